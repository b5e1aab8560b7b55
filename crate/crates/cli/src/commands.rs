use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use image::GrayImage;
use serde::Serialize;

use dann_core::data::{
    generate_dataset, load_image_folder, quantize, sample_few_shot, species_dirs, split_source, split_target,
    ImageSample, Manifest, SourceSplit,
};
use dann_core::eval;
use dann_core::model::{config_hash, load_checkpoint};
use dann_core::seed::derive_seed;
use dann_core::training::{fit, write_metrics_csv, FitResult, TrainData, TrainMode};
use dann_core::{Error, ModelParams, Result};

use crate::config::{write_resolved, RunConfig};

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(io(path))
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(io(path))
}

pub fn gen_data(config: &RunConfig, root: &Path) -> Result<Manifest> {
    create_dir(root)?;
    let manifest = generate_dataset(&config.dataset, root)?;
    for e in &manifest.entries {
        log::debug!("{}/{}: {} images", e.domain, e.species, e.count);
    }
    Ok(manifest)
}

/// A target domain's held-out test set and the shots drawn from its pool.
#[derive(Clone, Debug)]
pub struct TargetData {
    pub name: String,
    pub test: Vec<ImageSample>,
    pub shots: Vec<ImageSample>,
}

#[derive(Clone, Debug)]
pub struct Prepared {
    pub class_names: Vec<String>,
    pub source: SourceSplit,
    pub targets: Vec<TargetData>,
}

fn load_domain(config: &RunConfig, name: &str, label: usize, class_names: Option<&[String]>) -> Result<Vec<ImageSample>> {
    let dir = config.data_root.join(name);
    if !dir.is_dir() {
        return Err(Error::InvalidConfig(format!("missing domain directory {}", dir.display())));
    }
    if let Some(expected) = class_names {
        let found = species_dirs(&dir)?;
        if found != expected {
            return Err(Error::InvalidData(format!(
                "{} has classes {found:?}, source has {expected:?}",
                dir.display()
            )));
        }
    }
    let samples = load_image_folder(&dir, label)?;
    if let Some(s) = samples.iter().find(|s| s.width != config.backbone.input_size || s.height != s.width) {
        return Err(Error::InvalidConfig(format!(
            "{} is {}x{}, backbone.input_size is {}",
            s.source_path.as_deref().unwrap_or("image"),
            s.width,
            s.height,
            config.backbone.input_size
        )));
    }
    Ok(samples)
}

/// Load and split the source domain and the configured targets named in
/// `wanted`. Splits depend only on the config, so `train`, `eval` and
/// `explain` agree.
pub fn prepare(config: &RunConfig, wanted: &[String]) -> Result<Prepared> {
    let source_dir = config.data_root.join(&config.source_domain);
    let source = load_domain(config, &config.source_domain, 0, None)?;
    let class_names = species_dirs(&source_dir)?;
    if class_names.len() != config.backbone.num_classes {
        return Err(Error::InvalidConfig(format!(
            "{} classes on disk, backbone.num_classes is {}",
            class_names.len(),
            config.backbone.num_classes
        )));
    }
    let source = split_source(&source, &config.split)?;
    let mut targets = Vec::new();
    for (k, name) in config.targets.iter().enumerate() {
        if wanted.contains(name) {
            let samples = load_domain(config, name, k + 1, Some(&class_names))?;
            let split = split_target(&samples, config.target_test_per_class, derive_seed(config.seed, 100 + k as u64))?;
            let shots = sample_few_shot(&split, config.shots, derive_seed(config.seed, 200 + k as u64))?;
            targets.push(TargetData {
                name: name.clone(),
                test: split.test,
                shots,
            });
        }
    }
    Ok(Prepared {
        class_names,
        source,
        targets,
    })
}

pub const CONFIG_FILE: &str = "config.json";
pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.adsh";

pub fn train(config: &RunConfig, out: &Path) -> Result<FitResult> {
    let mut config = config.clone();
    config.train.checkpoint_path = Some(out.join(CHECKPOINT_FILE));
    create_dir(out)?;
    write_resolved(&config, &out.join(CONFIG_FILE))?;

    let adapt = config.train.mode != TrainMode::SourceOnly;
    let data = prepare(&config, if adapt { &config.targets } else { &[] })?;
    let train_data = TrainData {
        source_train: data.source.train,
        source_val: data.source.val,
        target_shots: data.targets.into_iter().flat_map(|t| t.shots).collect(),
    };
    log::info!(
        "training {:?}: {} source, {} target shots, {} epochs",
        config.train.mode,
        train_data.source_train.len(),
        train_data.target_shots.len(),
        config.train.epochs
    );
    let result = fit(&config.train, &config.backbone, &train_data)?;
    write_metrics_csv(&out.join(METRICS_FILE), &result.log)?;
    Ok(result)
}

/// Load a checkpoint and refuse it unless it was trained with `config`'s backbone.
pub fn load_matching(config: &RunConfig, path: &Path) -> Result<ModelParams> {
    let (params, meta) = load_checkpoint(path)?;
    let expected = config_hash(&config.backbone);
    let actual = meta.map(|m| m.config_hash).unwrap_or_else(|| config_hash(params.config()));
    if actual != expected || params.config() != &config.backbone {
        return Err(Error::InvalidConfig(format!(
            "checkpoint {} has config hash {actual}, run config hash is {expected}",
            path.display()
        )));
    }
    Ok(params)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DomainAccuracy {
    pub domain: String,
    pub n: usize,
    pub accuracy: f64,
}

/// Test samples for `name`: the held-out split for the source and configured
/// targets, every image for any other domain (none of it was trained on).
fn test_set(config: &RunConfig, data: &Prepared, name: &str) -> Result<Vec<ImageSample>> {
    if name == config.source_domain {
        return Ok(data.source.test.clone());
    }
    if let Some(t) = data.targets.iter().find(|t| t.name == name) {
        return Ok(t.test.clone());
    }
    load_domain(config, name, 0, Some(&data.class_names))
}

pub fn evaluate(config: &RunConfig, checkpoint: &Path, domains: &[String], out: &Path) -> Result<Vec<DomainAccuracy>> {
    let params = load_matching(config, checkpoint)?;
    let data = prepare(config, domains)?;
    let dir = out.join("eval");
    create_dir(&dir)?;
    let mut rows = Vec::new();
    let mut csv = String::from("domain,n,accuracy\n");
    for name in domains {
        let test = test_set(config, &data, name)?;
        let cm = eval::confusion_matrix(&params, &test, &data.class_names)?;
        let row = DomainAccuracy {
            domain: name.clone(),
            n: test.len(),
            accuracy: cm.accuracy(),
        };
        let _ = writeln!(csv, "{},{},{:.8e}", row.domain, row.n, row.accuracy);
        let json = serde_json::to_string_pretty(&cm).expect("confusion serializes");
        write(&dir.join(format!("confusion_{name}.json")), json + "\n")?;
        rows.push(row);
    }
    write(&dir.join("accuracy.csv"), csv)?;
    Ok(rows)
}

fn relative_id(config: &RunConfig, sample: &ImageSample, fallback: usize) -> String {
    sample
        .source_path
        .as_deref()
        .map(|p| {
            let p = Path::new(p);
            p.strip_prefix(&config.data_root).unwrap_or(p).to_string_lossy().replace('\\', "/")
        })
        .unwrap_or_else(|| fallback.to_string())
}

/// Source test set followed by every target test set.
fn pooled_test(data: &Prepared) -> Vec<ImageSample> {
    let mut pooled = data.source.test.clone();
    for t in &data.targets {
        pooled.extend(t.test.iter().cloned());
    }
    pooled
}

#[derive(Serialize)]
struct HeatmapSidecar<'a> {
    image: &'a str,
    domain: &'a str,
    class_label: usize,
    predicted: usize,
    target_class: usize,
    stage: usize,
    min: f64,
    max: f64,
    mean: f64,
    raw_max: f64,
}

/// Grad-CAM of the predicted class for the first `gradcam_samples` test images
/// of every domain. Returns the PNG paths.
pub fn explain_gradcam(config: &RunConfig, checkpoint: &Path, out: &Path) -> Result<Vec<PathBuf>> {
    let params = load_matching(config, checkpoint)?;
    let data = prepare(config, &config.targets)?;
    let dir = out.join("explain").join("gradcam");
    create_dir(&dir)?;
    let stage = config
        .explain
        .gradcam_stage
        .unwrap_or(config.backbone.stage_channels.len() - 1);
    let mut domains = vec![(config.source_domain.clone(), data.source.test.clone())];
    domains.extend(data.targets.iter().map(|t| (t.name.clone(), t.test.clone())));
    let mut written = Vec::new();
    for (name, test) in domains {
        let picked: Vec<ImageSample> = test.into_iter().take(config.explain.gradcam_samples).collect();
        let predicted = eval::predict(&params, &picked, 64)?;
        for (i, (sample, &pred)) in picked.iter().zip(&predicted).enumerate() {
            let cam = eval::grad_cam_at_stage(&params, sample, pred, stage)?;
            let stem = format!("{name}_{i:03}");
            let png = dir.join(format!("{stem}.png"));
            GrayImage::from_raw(cam.width as u32, cam.height as u32, quantize(&cam.values))
                .expect("heatmap buffer matches its size")
                .save(&png)
                .map_err(|e| Error::Ingestion {
                    path: png.clone(),
                    reason: e.to_string(),
                })?;
            let id = relative_id(config, sample, i);
            let sidecar = HeatmapSidecar {
                image: &id,
                domain: &name,
                class_label: sample.class_label,
                predicted: pred,
                target_class: cam.target_class,
                stage: cam.stage,
                min: cam.values.iter().copied().fold(f64::INFINITY, f64::min),
                max: cam.values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                mean: cam.mean(),
                raw_max: cam.raw_max,
            };
            let json = serde_json::to_string_pretty(&sidecar).expect("sidecar serializes");
            write(&dir.join(format!("{stem}.json")), json + "\n")?;
            written.push(png);
        }
    }
    Ok(written)
}

pub struct TsneSummary {
    pub rows: usize,
    pub kl_initial: f64,
    pub kl_final: f64,
    pub path: PathBuf,
}

pub fn explain_tsne(config: &RunConfig, checkpoint: &Path, out: &Path) -> Result<TsneSummary> {
    let params = load_matching(config, checkpoint)?;
    let data = prepare(config, &config.targets)?;
    let pooled = pooled_test(&data);
    let outputs = eval::forward(&params, &pooled, 64)?;
    let result = eval::tsne(&outputs.embeddings, &config.explain.tsne)?;
    let dir = out.join("explain");
    create_dir(&dir)?;
    let mut csv = String::from("id,x,y,class,domain\n");
    for (i, (s, c)) in pooled.iter().zip(&result.coords).enumerate() {
        let _ = writeln!(
            csv,
            "{},{:.8e},{:.8e},{},{}",
            relative_id(config, s, i),
            c[0],
            c[1],
            s.class_label,
            s.domain_label
        );
    }
    let path = dir.join("tsne.csv");
    write(&path, csv)?;
    Ok(TsneSummary {
        rows: pooled.len(),
        kl_initial: result.kl_initial,
        kl_final: result.kl_final,
        path,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ProbeReport {
    pub accuracy: f64,
    pub chance: f64,
    pub n: usize,
    pub domains: Vec<String>,
}

pub fn explain_probe(config: &RunConfig, checkpoint: &Path, out: &Path) -> Result<ProbeReport> {
    let params = load_matching(config, checkpoint)?;
    let data = prepare(config, &config.targets)?;
    let pooled = pooled_test(&data);
    let outputs = eval::forward(&params, &pooled, 64)?;
    let labels: Vec<usize> = pooled.iter().map(|s| s.domain_label).collect();
    let mut domains = vec![config.source_domain.clone()];
    domains.extend(config.targets.iter().cloned());
    let report = ProbeReport {
        accuracy: eval::domain_probe(&outputs.embeddings, &labels)?,
        chance: 1.0 / domains.len() as f64,
        n: pooled.len(),
        domains,
    };
    let dir = out.join("explain");
    create_dir(&dir)?;
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    write(&dir.join("probe.json"), json + "\n")?;
    Ok(report)
}
