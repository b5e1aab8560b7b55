//! Multi-task adversarial training: classification loss on every labeled
//! sample, domain loss behind the gradient-reversal layer, AdamW updates, the
//! epoch-indexed reversal ramp and lowest-validation-loss checkpointing.

mod optimizer;

pub use optimizer::{adamw_step, adamw_step_where, OptimizerState};

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, ReversalScale, Tape};
use crate::data::{augment, make_batches, AugmentPolicy, ImageSample};
use crate::error::{Error, Result};
use crate::eval;
use crate::model::{self, batch_tensor, BackboneConfig, BoundModel, CheckpointMeta, ModelParams, ParamGroup};
use crate::seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    SourceOnly,
    Dann,
    Mdann,
}

impl std::str::FromStr for TrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "source_only" => Ok(TrainMode::SourceOnly),
            "dann" => Ok(TrainMode::Dann),
            "mdann" => Ok(TrainMode::Mdann),
            other => Err(Error::config(format!("unknown mode `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub lambda: f64,
    pub seed: u64,
    pub checkpoint_path: Option<PathBuf>,
    pub augment: AugmentPolicy,
    /// Batch size for validation forward passes only.
    pub eval_batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: TrainMode::Dann,
            epochs: 90,
            batch_size: 6,
            learning_rate: 1e-3,
            weight_decay: 1e-3,
            lambda: 1.0,
            seed: 0,
            checkpoint_path: None,
            augment: AugmentPolicy::default(),
            eval_batch_size: 64,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::config("learning_rate must be > 0"));
        }
        if self.epochs == 0 {
            return Err(Error::config("epochs must be >= 1"));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::config("lambda must be >= 0"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::config("weight_decay must be >= 0"));
        }
        if self.batch_size < 2 || self.eval_batch_size == 0 {
            return Err(Error::config("batch_size must be >= 2"));
        }
        Ok(())
    }
}

/// `2 / (1 + exp(-10 t_i / t)) - 1`.
pub fn tau(epoch: usize, total_epochs: usize) -> Result<f64> {
    if total_epochs == 0 {
        return Err(Error::config("total epochs must be >= 1"));
    }
    if epoch > total_epochs {
        return Err(Error::config(format!("epoch {epoch} beyond total {total_epochs}")));
    }
    Ok(2.0 / (1.0 + (-10.0 * epoch as f64 / total_epochs as f64).exp()) - 1.0)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TauSchedule {
    pub current_epoch: usize,
    pub total_epochs: usize,
}

impl TauSchedule {
    pub fn new(current_epoch: usize, total_epochs: usize) -> Result<Self> {
        tau(current_epoch, total_epochs)?;
        Ok(Self {
            current_epoch,
            total_epochs,
        })
    }

    pub fn value(&self) -> f64 {
        tau(self.current_epoch, self.total_epochs).expect("validated on construction")
    }
}

/// Batch losses. `loss_d` is the unweighted domain cross-entropy (zero in
/// source-only mode); λ and τ act on its gradients, not its value.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    pub loss_c: f64,
    pub loss_d: f64,
    pub total: f64,
}

/// Loss nodes of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct LossNodes {
    pub loss_c: NodeId,
    pub loss_d: Option<NodeId>,
    pub total: NodeId,
}

/// Build L_C (and L_D unless source-only) for `batch` on `tape`.
pub fn compute_losses(
    tape: &mut Tape,
    model: &BoundModel<'_>,
    batch: &[&ImageSample],
    schedule: TauSchedule,
    config: &TrainConfig,
) -> Result<(LossBreakdown, LossNodes)> {
    if batch.is_empty() {
        return Err(Error::data("empty batch"));
    }
    let size = batch[0].width;
    let x = tape.leaf(batch_tensor(batch.iter().map(|s| s.pixels.as_slice()), size)?);
    let features = model.extract_features(tape, x)?;
    let logits = model.classify(tape, features.embedding)?;
    let classes: Vec<usize> = batch.iter().map(|s| s.class_label).collect();
    let (loss_c, _) = tape.softmax_cross_entropy(logits, &classes)?;

    let loss_d = match config.mode {
        TrainMode::SourceOnly => None,
        TrainMode::Dann | TrainMode::Mdann => {
            let scale = ReversalScale::new(config.lambda, schedule.value())?;
            let domain_logits = model.discriminate(tape, features.embedding, scale)?;
            let domains: Vec<usize> = batch.iter().map(|s| s.domain_label).collect();
            Some(tape.softmax_cross_entropy(domain_logits, &domains)?.0)
        }
    };
    let total = match loss_d {
        Some(d) => tape.add(loss_c, d)?,
        None => loss_c,
    };
    let value = |id: NodeId| tape.value(id).data()[0];
    let breakdown = LossBreakdown {
        loss_c: value(loss_c),
        loss_d: loss_d.map(value).unwrap_or(0.0),
        total: value(total),
    };
    Ok((
        breakdown,
        LossNodes {
            loss_c,
            loss_d,
            total,
        },
    ))
}

/// One forward/backward pass over `L_C + L_D` followed by an AdamW update.
///
/// The reversal layer hands the extractor `-λτ·∂L_D/∂θ_f`; the discriminator
/// gradient is scaled by λ here, and the class head never sees L_D.
pub fn train_step(
    params: &mut ModelParams,
    batch: &[&ImageSample],
    schedule: TauSchedule,
    config: &TrainConfig,
    state: &mut OptimizerState,
) -> Result<LossBreakdown> {
    let mut tape = Tape::new();
    let (breakdown, mut grads) = {
        let model = params.bind(&mut tape);
        let (breakdown, nodes) = compute_losses(&mut tape, &model, batch, schedule, config)?;
        let mut g = tape.backward(nodes.total)?;
        let grads: Vec<_> = model
            .param_ids()
            .iter()
            .map(|&id| g.take(id).expect("leaves always receive gradients"))
            .collect();
        (breakdown, grads)
    };
    let source_only = config.mode == TrainMode::SourceOnly;
    for (p, g) in params.params().iter().zip(grads.iter_mut()) {
        if p.group == ParamGroup::Discriminator {
            for v in g.data_mut() {
                *v *= config.lambda;
            }
        }
    }
    // Source-only training never touches the discriminator, decay included.
    adamw_step_where(params.params_mut(), &grads, state, config.learning_rate, config.weight_decay, |p| {
        !(source_only && p.group == ParamGroup::Discriminator)
    })?;
    Ok(breakdown)
}

/// Labeled data for one run. Target shots carry their domain label (≥ 1).
#[derive(Clone, Debug, Default)]
pub struct TrainData {
    pub source_train: Vec<ImageSample>,
    pub source_val: Vec<ImageSample>,
    pub target_shots: Vec<ImageSample>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub tau: f64,
    pub loss_c: f64,
    pub loss_d: f64,
    pub val_loss: f64,
    pub val_acc: f64,
}

#[derive(Clone, Debug)]
pub struct FitResult {
    pub best: ModelParams,
    pub meta: CheckpointMeta,
    pub log: Vec<EpochMetrics>,
    /// Parameters after the final epoch.
    pub last: ModelParams,
}

fn check_data(config: &TrainConfig, backbone: &BackboneConfig, data: &TrainData) -> Result<()> {
    if data.source_train.is_empty() || data.source_val.is_empty() {
        return Err(Error::data("source train and validation sets must be nonempty"));
    }
    if let Some(s) = data.source_train.iter().chain(&data.source_val).find(|s| s.domain_label != 0) {
        return Err(Error::data(format!("source sample with domain label {}", s.domain_label)));
    }
    let mut targets: Vec<usize> = data.target_shots.iter().map(|s| s.domain_label).collect();
    targets.sort_unstable();
    targets.dedup();
    if let Some(&d) = targets.iter().find(|&&d| d == 0 || d >= backbone.num_domains) {
        return Err(Error::data(format!(
            "target shot with domain label {d}, expected 1..{}",
            backbone.num_domains
        )));
    }
    match config.mode {
        TrainMode::SourceOnly => Ok(()),
        TrainMode::Dann if targets != [1] => Err(Error::config(format!(
            "dann needs shots from exactly one target domain (label 1), got {targets:?}"
        ))),
        TrainMode::Mdann if targets.is_empty() => Err(Error::config("mdann needs target shots")),
        _ => Ok(()),
    }
}

/// Train from a fresh initialization and keep the lowest-validation-loss
/// parameters (earliest epoch on ties). When `checkpoint_path` is set the
/// best parameters are written there whenever they improve.
pub fn fit(config: &TrainConfig, backbone: &BackboneConfig, data: &TrainData) -> Result<FitResult> {
    config.validate()?;
    check_data(config, backbone, data)?;
    let mut params = ModelParams::build(backbone, seed::derive_seed(config.seed, 0))?;
    let shots: &[ImageSample] = match config.mode {
        TrainMode::SourceOnly => &[],
        _ => &data.target_shots,
    };
    let plan = make_batches(&data.source_train, shots, config.batch_size, seed::derive_seed(config.seed, 1))?;
    let augment_seed = seed::derive_seed(config.seed, 2);
    let mut state = OptimizerState::new(&params);
    let hash = model::config_hash(backbone);

    let mut log = Vec::with_capacity(config.epochs);
    let mut best: Option<(ModelParams, CheckpointMeta)> = None;
    for epoch in 0..config.epochs {
        let schedule = TauSchedule::new(epoch, config.epochs)?;
        let (mut sum_c, mut sum_d, mut batches) = (0.0, 0.0, 0usize);
        for idx in plan.epoch_indices(epoch) {
            let augmented: Vec<ImageSample> = idx
                .iter()
                .map(|&i| augment(&plan.pool()[i], &config.augment, seed::derive_seed2(augment_seed, epoch as u64, i as u64)))
                .collect();
            let refs: Vec<&ImageSample> = augmented.iter().collect();
            let losses = train_step(&mut params, &refs, schedule, config, &mut state)?;
            sum_c += losses.loss_c;
            sum_d += losses.loss_d;
            batches += 1;
        }
        let (val_loss, val_acc) = eval::loss_and_accuracy(&params, &data.source_val, config.eval_batch_size)?;
        log.push(EpochMetrics {
            epoch,
            tau: schedule.value(),
            loss_c: sum_c / batches as f64,
            loss_d: sum_d / batches as f64,
            val_loss,
            val_acc,
        });
        log::debug!("epoch {epoch}: loss_c {:.4} val_loss {val_loss:.4} val_acc {val_acc:.3}", sum_c / batches as f64);
        if best.as_ref().is_none_or(|(_, m)| val_loss < m.validation_loss) {
            let meta = CheckpointMeta {
                epoch,
                validation_loss: val_loss,
                validation_accuracy: val_acc,
                config_hash: hash.clone(),
            };
            if let Some(path) = &config.checkpoint_path {
                model::save_checkpoint(path, &params, Some(&meta))?;
            }
            best = Some((params.clone(), meta));
        }
    }
    let (best, meta) = best.expect("at least one epoch");
    Ok(FitResult {
        best,
        meta,
        log,
        last: params,
    })
}

/// Nine significant digits.
fn sig9(v: f64) -> String {
    format!("{v:.8e}")
}

pub const METRICS_HEADER: &str = "epoch,tau,loss_c,loss_d,val_loss,val_acc";

pub fn metrics_csv(log: &[EpochMetrics]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for m in log {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            m.epoch,
            sig9(m.tau),
            sig9(m.loss_c),
            sig9(m.loss_d),
            sig9(m.val_loss),
            sig9(m.val_acc)
        );
    }
    out
}

pub fn write_metrics_csv(path: &Path, log: &[EpochMetrics]) -> Result<()> {
    std::fs::write(path, metrics_csv(log)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tau_endpoints_and_midpoint() {
        assert_eq!(tau(0, 90).unwrap(), 0.0);
        let end = 2.0 / (1.0 + (-10.0f64).exp()) - 1.0;
        assert_eq!(tau(90, 90).unwrap(), end);
        assert!((tau(90, 90).unwrap() - 0.99990920).abs() < 1e-8);
        assert!((tau(45, 90).unwrap() - 0.98661430).abs() < 1e-8);
        assert!(tau(30, 90).unwrap() > 0.9);
        assert!(matches!(tau(0, 0), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn tau_is_strictly_increasing_and_bounded() {
        let end = 2.0 / (1.0 + (-10.0f64).exp()) - 1.0;
        let values: Vec<f64> = (0..=90).map(|i| tau(i, 90).unwrap()).collect();
        assert!(values.windows(2).all(|w| w[0] < w[1]));
        assert!(values.iter().all(|&v| (0.0..=end).contains(&v)));
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        for bad in [
            TrainConfig { learning_rate: 0.0, ..Default::default() },
            TrainConfig { epochs: 0, ..Default::default() },
            TrainConfig { lambda: -0.1, ..Default::default() },
            TrainConfig { batch_size: 1, ..Default::default() },
        ] {
            assert!(bad.validate().is_err());
        }
        assert_eq!("mdann".parse::<TrainMode>().unwrap(), TrainMode::Mdann);
        assert!("other".parse::<TrainMode>().is_err());
    }

    #[test]
    fn metrics_csv_format() {
        let csv = metrics_csv(&[EpochMetrics {
            epoch: 0,
            tau: 0.0,
            loss_c: 1.791759469228055,
            loss_d: 0.5,
            val_loss: 1.25,
            val_acc: 1.0 / 3.0,
        }]);
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), METRICS_HEADER);
        assert_eq!(
            lines.next().unwrap(),
            "0,0.00000000e0,1.79175947e0,5.00000000e-1,1.25000000e0,3.33333333e-1"
        );
    }
}
