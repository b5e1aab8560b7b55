//! Three-head network: shared convolutional feature extractor, class head,
//! and a multi-domain discriminator sitting behind a gradient-reversal layer.

mod checkpoint;

pub use checkpoint::{config_hash, load_checkpoint, save_checkpoint, CheckpointMeta, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

use serde::{Deserialize, Serialize};

use crate::autodiff::{Init, NodeId, PoolKind, ReversalScale, Tape, Tensor};
use crate::error::{Error, Result};
use crate::seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    /// Square input side in pixels.
    pub input_size: usize,
    pub in_channels: usize,
    /// Output channels of each conv → ReLU → 2×2 max-pool stage.
    pub stage_channels: Vec<usize>,
    pub kernel: usize,
    pub embedding_dim: usize,
    pub num_classes: usize,
    pub num_domains: usize,
    /// Width of the discriminator's hidden layer; 0 means a single affine map.
    pub discriminator_hidden: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            input_size: 32,
            in_channels: 1,
            stage_channels: vec![16, 32, 64],
            kernel: 3,
            embedding_dim: 128,
            num_classes: 6,
            num_domains: 2,
            discriminator_hidden: 64,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embedding_dim == 0 {
            return Err(Error::config("embedding_dim must be >= 1"));
        }
        if self.num_classes < 2 {
            return Err(Error::config("num_classes must be >= 2"));
        }
        if self.num_domains < 2 {
            return Err(Error::config("num_domains must be >= 2"));
        }
        if self.in_channels == 0 || self.stage_channels.is_empty() || self.stage_channels.contains(&0) {
            return Err(Error::config("channel counts must be positive and at least one stage is required"));
        }
        if self.kernel == 0 || self.kernel.is_multiple_of(2) {
            return Err(Error::config(format!("kernel must be odd, got {}", self.kernel)));
        }
        let factor = 1usize << self.stage_channels.len();
        if self.input_size == 0 || !self.input_size.is_multiple_of(factor) {
            return Err(Error::config(format!(
                "input_size {} not divisible by 2^{} stages",
                self.input_size,
                self.stage_channels.len()
            )));
        }
        Ok(())
    }

    /// Total scalar parameter count.
    pub fn parameter_count(&self) -> usize {
        specs(self).iter().map(|s| s.shape.iter().product::<usize>()).sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Extractor,
    Classifier,
    Discriminator,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub group: ParamGroup,
    pub value: Tensor,
}

struct ParamSpec {
    name: String,
    group: ParamGroup,
    shape: Vec<usize>,
    init: Init,
}

fn specs(config: &BackboneConfig) -> Vec<ParamSpec> {
    let mut out = Vec::new();
    let mut push = |name: String, group, shape: Vec<usize>, init| out.push(ParamSpec { name, group, shape, init });
    let mut channels = config.in_channels;
    for (i, &c) in config.stage_channels.iter().enumerate() {
        let k = config.kernel;
        push(format!("extractor.conv{i}.weight"), ParamGroup::Extractor, vec![c, channels, k, k], Init::UniformHe);
        push(format!("extractor.conv{i}.bias"), ParamGroup::Extractor, vec![c], Init::Zeros);
        channels = c;
    }
    let e = config.embedding_dim;
    push("extractor.proj.weight".into(), ParamGroup::Extractor, vec![channels, e], Init::UniformHe);
    push("extractor.proj.bias".into(), ParamGroup::Extractor, vec![e], Init::Zeros);
    push("classifier.weight".into(), ParamGroup::Classifier, vec![e, config.num_classes], Init::UniformHe);
    push("classifier.bias".into(), ParamGroup::Classifier, vec![config.num_classes], Init::Zeros);
    let mut width = e;
    if config.discriminator_hidden > 0 {
        let h = config.discriminator_hidden;
        push("discriminator.hidden.weight".into(), ParamGroup::Discriminator, vec![e, h], Init::UniformHe);
        push("discriminator.hidden.bias".into(), ParamGroup::Discriminator, vec![h], Init::Zeros);
        width = h;
    }
    push("discriminator.out.weight".into(), ParamGroup::Discriminator, vec![width, config.num_domains], Init::UniformHe);
    push("discriminator.out.bias".into(), ParamGroup::Discriminator, vec![config.num_domains], Init::Zeros);
    out
}

/// All trainable tensors, split into extractor / classifier / discriminator groups.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    config: BackboneConfig,
    params: Vec<Param>,
}

impl ModelParams {
    /// Deterministic initialization: He-uniform weights, zero biases.
    pub fn build(config: &BackboneConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let params = specs(config)
            .into_iter()
            .enumerate()
            .map(|(i, s)| {
                Ok(Param {
                    value: Tensor::init(&s.shape, s.init, seed::derive_seed(seed, i as u64))?,
                    name: s.name,
                    group: s.group,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            config: config.clone(),
            params,
        })
    }

    /// Reassemble from named tensors, checking names and shapes against `config`.
    pub fn from_parts(config: &BackboneConfig, tensors: Vec<(String, Tensor)>) -> Result<Self> {
        config.validate()?;
        let specs = specs(config);
        if specs.len() != tensors.len() {
            return Err(Error::config(format!(
                "expected {} parameters, got {}",
                specs.len(),
                tensors.len()
            )));
        }
        let params = specs
            .into_iter()
            .zip(tensors)
            .map(|(s, (name, value))| {
                if s.name != name || s.shape != value.shape() {
                    return Err(Error::config(format!(
                        "parameter {name} {:?} does not match expected {} {:?}",
                        value.shape(),
                        s.name,
                        s.shape
                    )));
                }
                Ok(Param {
                    name,
                    group: s.group,
                    value,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            config: config.clone(),
            params,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn group(&self, group: ParamGroup) -> impl Iterator<Item = &Param> {
        self.params.iter().filter(move |p| p.group == group)
    }

    /// Put every parameter on `tape` as a leaf.
    pub fn bind<'a>(&'a self, tape: &mut Tape) -> BoundModel<'a> {
        let ids = self.params.iter().map(|p| tape.leaf(p.value.clone())).collect();
        BoundModel { params: self, ids }
    }
}

/// Embedding plus the per-stage post-ReLU activations (pre-pooling), which
/// Grad-CAM taps.
#[derive(Clone, Debug)]
pub struct FeatureTrace {
    pub embedding: NodeId,
    pub stage_activations: Vec<NodeId>,
}

/// Model parameters placed on a tape for one forward pass.
pub struct BoundModel<'a> {
    params: &'a ModelParams,
    ids: Vec<NodeId>,
}

impl BoundModel<'_> {
    /// Tape node of parameter `i` (same order as [`ModelParams::params`]).
    pub fn param_ids(&self) -> &[NodeId] {
        &self.ids
    }

    fn id(&self, name: &str) -> NodeId {
        let i = self
            .params
            .params
            .iter()
            .position(|p| p.name == name)
            .unwrap_or_else(|| panic!("missing parameter {name}"));
        self.ids[i]
    }

    /// Per-stage conv → ReLU → 2×2 max-pool, global average pool, then an
    /// affine projection to the embedding.
    pub fn extract_features(&self, tape: &mut Tape, x: NodeId) -> Result<FeatureTrace> {
        let cfg = &self.params.config;
        let shape = tape.value(x).shape().to_vec();
        if shape.len() != 4 || shape[1] != cfg.in_channels || shape[2] != cfg.input_size || shape[3] != cfg.input_size {
            return Err(Error::shape(format!(
                "expected input [B, {}, {}, {}], got {shape:?}",
                cfg.in_channels, cfg.input_size, cfg.input_size
            )));
        }
        let mut h = x;
        let mut stage_activations = Vec::with_capacity(cfg.stage_channels.len());
        for i in 0..cfg.stage_channels.len() {
            let w = self.id(&format!("extractor.conv{i}.weight"));
            let b = self.id(&format!("extractor.conv{i}.bias"));
            let conv = tape.conv2d(h, w, b, 1, cfg.kernel / 2)?;
            let act = tape.relu(conv);
            stage_activations.push(act);
            h = tape.pool2d(PoolKind::Max, act, 2, 2)?;
        }
        let pooled = tape.global_avg_pool(h)?;
        let proj = tape.matmul(pooled, self.id("extractor.proj.weight"))?;
        let embedding = tape.add_bias(proj, self.id("extractor.proj.bias"))?;
        Ok(FeatureTrace {
            embedding,
            stage_activations,
        })
    }

    fn check_embedding(&self, tape: &Tape, e: NodeId) -> Result<()> {
        let shape = tape.value(e).shape();
        if shape.len() != 2 || shape[1] != self.params.config.embedding_dim {
            return Err(Error::shape(format!(
                "embedding must be [B, {}], got {shape:?}",
                self.params.config.embedding_dim
            )));
        }
        Ok(())
    }

    /// Class logits `[B×K]`.
    pub fn classify(&self, tape: &mut Tape, e: NodeId) -> Result<NodeId> {
        self.check_embedding(tape, e)?;
        let z = tape.matmul(e, self.id("classifier.weight"))?;
        tape.add_bias(z, self.id("classifier.bias"))
    }

    /// Domain logits `[B×m]`, computed behind a gradient-reversal layer.
    pub fn discriminate(&self, tape: &mut Tape, e: NodeId, scale: ReversalScale) -> Result<NodeId> {
        self.check_embedding(tape, e)?;
        let mut h = tape.grad_reversal(e, scale);
        if self.params.config.discriminator_hidden > 0 {
            let z = tape.matmul(h, self.id("discriminator.hidden.weight"))?;
            let z = tape.add_bias(z, self.id("discriminator.hidden.bias"))?;
            h = tape.relu(z);
        }
        let z = tape.matmul(h, self.id("discriminator.out.weight"))?;
        tape.add_bias(z, self.id("discriminator.out.bias"))
    }
}

/// Stack `[H×W]` images into a `[B×1×H×W]` tensor.
pub fn batch_tensor<'a>(images: impl IntoIterator<Item = &'a [f64]>, size: usize) -> Result<Tensor> {
    let mut data = Vec::new();
    let mut count = 0;
    for img in images {
        if img.len() != size * size {
            return Err(Error::shape(format!("image has {} pixels, expected {}", img.len(), size * size)));
        }
        data.extend_from_slice(img);
        count += 1;
    }
    Tensor::new(vec![count, 1, size, size], data)
}
