//! Run configuration: JSON file merged over defaults, then `key.path=value`
//! overrides, then command-line flags.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use dann_core::data::{AugmentPolicy, DatasetSpec, SplitSpec};
use dann_core::eval::TsneConfig;
use dann_core::training::{TrainConfig, TrainMode};
use dann_core::{BackboneConfig, Error, Result};

/// What `explain` produces.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExplainConfig {
    /// Test images per domain that get a Grad-CAM heatmap.
    pub gradcam_samples: usize,
    /// Convolutional stage Grad-CAM taps; `None` means the last one.
    pub gradcam_stage: Option<usize>,
    pub tsne: TsneConfig,
}

impl Default for ExplainConfig {
    fn default() -> Self {
        Self {
            gradcam_samples: 8,
            gradcam_stage: None,
            tsne: TsneConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Master seed. Every component seed below is overwritten with it.
    pub seed: u64,
    /// Dataset root holding one image folder per domain.
    pub data_root: PathBuf,
    /// Generator settings for `gen-data`.
    pub dataset: DatasetSpec,
    pub source_domain: String,
    /// Target domain names, labelled 1..=m in this order.
    pub targets: Vec<String>,
    /// Labeled samples per class drawn from each target.
    pub shots: usize,
    /// Per-class size of each target test split.
    pub target_test_per_class: usize,
    pub split: SplitSpec,
    pub backbone: BackboneConfig,
    pub train: TrainConfig,
    pub explain: ExplainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data_root: PathBuf::from("data"),
            dataset: DatasetSpec::default(),
            source_domain: "source".into(),
            targets: vec!["t_contrast".into()],
            shots: 5,
            target_test_per_class: 15,
            split: SplitSpec::default(),
            backbone: BackboneConfig::default(),
            train: TrainConfig::default(),
            explain: ExplainConfig::default(),
        }
    }
}

impl RunConfig {
    /// Push the master seed into every component and the target count into
    /// the discriminator width, then validate.
    pub fn resolve(mut self) -> Result<Self> {
        self.dataset.seed = self.seed;
        self.split.seed = self.seed;
        self.train.seed = self.seed;
        self.explain.tsne.seed = self.seed;
        if self.train.mode != TrainMode::SourceOnly {
            self.backbone.num_domains = self.targets.len() + 1;
        }
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.train.validate()?;
        self.split.validate()?;
        self.dataset.validate()?;
        if self.dataset.renderer.image_size != self.backbone.input_size {
            return Err(Error::InvalidConfig(format!(
                "dataset.renderer.image_size {} differs from backbone.input_size {}",
                self.dataset.renderer.image_size, self.backbone.input_size
            )));
        }
        if self.shots == 0 {
            return Err(Error::InvalidConfig("shots must be >= 1".into()));
        }
        match self.train.mode {
            TrainMode::SourceOnly => {}
            TrainMode::Dann if self.targets.len() != 1 => {
                return Err(Error::InvalidConfig(format!(
                    "dann trains against exactly one target, got {}",
                    self.targets.len()
                )))
            }
            TrainMode::Mdann if self.targets.is_empty() => {
                return Err(Error::InvalidConfig("mdann needs at least one target".into()))
            }
            _ => {}
        }
        let mut names = self.targets.clone();
        names.push(self.source_domain.clone());
        names.sort();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::InvalidConfig("domain names must be distinct".into()));
        }
        Ok(())
    }

    /// Augmentation off; used by `eval` and `explain`, which never train.
    pub fn without_augmentation(mut self) -> Self {
        self.train.augment = AugmentPolicy::disabled();
        self
    }
}

/// Recursively overlay `patch` onto `base`; objects merge, everything else replaces.
fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Set `a.b.c` to `raw`, read as JSON when it parses and as a string otherwise.
pub fn apply_override(root: &mut Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::InvalidConfig(format!("override `{assignment}` is not key=value")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| Error::InvalidConfig(format!("`{}` is not an object", parts[..i].join("."))))?;
        if !obj.contains_key(*part) {
            return Err(Error::InvalidConfig(format!("unknown config key `{key}`")));
        }
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        node = obj.get_mut(*part).expect("checked above");
    }
    Err(Error::InvalidConfig("empty override key".into()))
}

/// Defaults, then the JSON file at `path` (if any), then `overrides` in order.
/// The result is not yet resolved.
pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
    let mut value = serde_json::to_value(RunConfig::default()).expect("config serializes");
    if let Some(path) = path {
        let text = fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        let file: Value = serde_json::from_str(&text)
            .map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))?;
        if !file.is_object() {
            return Err(Error::InvalidConfig(format!("{}: top level must be an object", path.display())));
        }
        merge(&mut value, file);
    }
    for o in overrides {
        apply_override(&mut value, o)?;
    }
    serde_json::from_value(value).map_err(|e| Error::InvalidConfig(e.to_string()))
}

pub fn write_resolved(config: &RunConfig, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(config).expect("config serializes");
    fs::write(path, text + "\n").map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_reach_nested_fields() {
        let cfg = load(None, &["train.epochs=7".into(), "train.mode=\"source_only\"".into(), "backbone.stage_channels=[4,8]".into()])
            .unwrap();
        assert_eq!(cfg.train.epochs, 7);
        assert_eq!(cfg.train.mode, TrainMode::SourceOnly);
        assert_eq!(cfg.backbone.stage_channels, vec![4, 8]);
        // Bare words fall back to strings.
        let cfg = load(None, &["train.mode=mdann".into()]).unwrap();
        assert_eq!(cfg.train.mode, TrainMode::Mdann);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(matches!(load(None, &["train.epoch=3".into()]), Err(Error::InvalidConfig(_))));
        assert!(matches!(load(None, &["nope".into()]), Err(Error::InvalidConfig(_))));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        fs::write(&path, r#"{"train": {"epochs": 3, "bogus": 1}}"#).unwrap();
        let err = load(Some(&path), &[]).unwrap_err();
        assert!(err.to_string().contains("bogus"), "{err}");
    }

    #[test]
    fn file_merges_over_defaults_and_echo_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        fs::write(&path, r#"{"seed": 9, "train": {"epochs": 3}}"#).unwrap();
        let cfg = load(Some(&path), &["train.epochs=4".into()]).unwrap().resolve().unwrap();
        assert_eq!(cfg.train.epochs, 4);
        assert_eq!(cfg.train.batch_size, 6);
        assert_eq!((cfg.train.seed, cfg.split.seed, cfg.dataset.seed), (9, 9, 9));

        let echo = dir.path().join("echo.json");
        write_resolved(&cfg, &echo).unwrap();
        assert_eq!(load(Some(&echo), &[]).unwrap().resolve().unwrap(), cfg);
    }

    #[test]
    fn resolve_sizes_the_discriminator_and_checks_modes() {
        let cfg = load(None, &["train.mode=mdann".into(), r#"targets=["t_contrast","t_lowres"]"#.into()])
            .unwrap()
            .resolve()
            .unwrap();
        assert_eq!(cfg.backbone.num_domains, 3);
        assert!(load(None, &[r#"targets=["a","b"]"#.into()]).unwrap().resolve().is_err());
        assert!(load(None, &["backbone.input_size=64".into()]).unwrap().resolve().is_err());
        assert!(load(None, &[r#"targets=["source"]"#.into()]).unwrap().resolve().is_err());
    }
}
