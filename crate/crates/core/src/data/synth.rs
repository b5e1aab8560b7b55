//! Synthetic microcolony images with controllable domain shift.
//!
//! Each species renders a cluster of soft-edged elliptical cells on a noisy
//! dark background; the species differ in cell count, size, elongation,
//! cluster spread and brightness. Domain transforms emulate the acquisition
//! conditions that separate target domains from the source.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{folder, ImageSample};
use crate::error::{Error, Result};
use crate::seed;

/// Directory names of the six built-in species; their lexicographic order is
/// the class-label order.
pub const SPECIES_NAMES: [&str; 6] = ["Bc", "Bs", "Ec", "Li", "SE", "ST"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpeciesSpec {
    pub species_id: usize,
    pub name: String,
    /// Inclusive range of cells per colony.
    pub blob_count_range: (usize, usize),
    /// Semi-major axis range in canvas pixels.
    pub blob_radius_range: (f64, f64),
    pub eccentricity_range: (f64, f64),
    /// Standard deviation of cell positions around the colony center.
    pub cluster_spread: f64,
    pub intensity_contrast: f64,
}

impl SpeciesSpec {
    pub fn builtin() -> Vec<SpeciesSpec> {
        let s = |id: usize, count, radius, ecc, spread, contrast| SpeciesSpec {
            species_id: id,
            name: SPECIES_NAMES[id].to_string(),
            blob_count_range: count,
            blob_radius_range: radius,
            eccentricity_range: ecc,
            cluster_spread: spread,
            intensity_contrast: contrast,
        };
        vec![
            s(0, (3, 5), (6.5, 8.5), (0.88, 0.95), 7.0, 0.70),
            s(1, (8, 12), (3.5, 4.5), (0.80, 0.90), 9.0, 0.60),
            s(2, (4, 6), (4.0, 5.0), (0.55, 0.70), 5.0, 0.85),
            s(3, (12, 18), (2.0, 2.8), (0.00, 0.30), 11.0, 0.55),
            s(4, (1, 2), (8.0, 10.0), (0.00, 0.40), 3.0, 0.65),
            s(5, (5, 8), (3.0, 4.0), (0.30, 0.50), 14.0, 0.95),
        ]
    }

    pub fn validate(&self) -> Result<()> {
        let (c0, c1) = self.blob_count_range;
        let (r0, r1) = self.blob_radius_range;
        let (e0, e1) = self.eccentricity_range;
        if c0 == 0 || c0 > c1 {
            return Err(Error::config(format!("{}: bad blob_count_range {c0}..{c1}", self.name)));
        }
        if !(r0 > 0.0 && r0 <= r1) {
            return Err(Error::config(format!("{}: bad blob_radius_range {r0}..{r1}", self.name)));
        }
        if !(0.0 <= e0 && e0 <= e1 && e1 < 1.0) {
            return Err(Error::config(format!("{}: bad eccentricity_range {e0}..{e1}", self.name)));
        }
        if !(self.intensity_contrast > 0.0 && self.intensity_contrast <= 1.0) {
            return Err(Error::config(format!("{}: intensity_contrast must be in (0, 1]", self.name)));
        }
        if self.cluster_spread < 0.0 {
            return Err(Error::config(format!("{}: negative cluster_spread", self.name)));
        }
        Ok(())
    }
}

/// Acquisition-condition shift applied to a rendered image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DomainTransform {
    Identity,
    /// Pull intensities toward the image mean: `μ + factor·(p − μ)`.
    ContrastReduce { factor: f64 },
    /// Average over `scale×scale` blocks of output pixels, then replicate back
    /// (loss of resolution).
    Downsample { scale: usize },
    /// Longer incubation: larger cells and a looser colony.
    Growth { dilation: f64, extra_jitter: f64 },
    /// Apply several transforms in order.
    Chain { steps: Vec<DomainTransform> },
}

impl DomainTransform {
    pub fn validate(&self) -> Result<()> {
        match self {
            DomainTransform::Identity => Ok(()),
            DomainTransform::ContrastReduce { factor } => {
                if *factor > 0.0 && *factor <= 1.0 {
                    Ok(())
                } else {
                    Err(Error::config(format!("contrast factor {factor} not in (0, 1]")))
                }
            }
            DomainTransform::Downsample { scale } => {
                if *scale >= 1 {
                    Ok(())
                } else {
                    Err(Error::config("downsample scale must be >= 1"))
                }
            }
            DomainTransform::Growth { dilation, extra_jitter } => {
                if *dilation >= 0.0 && *extra_jitter >= 0.0 {
                    Ok(())
                } else {
                    Err(Error::config("growth dilation and jitter must be >= 0"))
                }
            }
            DomainTransform::Chain { steps } => steps.iter().try_for_each(|s| s.validate()),
        }
    }

    /// Summed growth parameters (applied while rendering, not afterwards).
    fn growth(&self) -> (f64, f64) {
        match self {
            DomainTransform::Growth { dilation, extra_jitter } => (*dilation, *extra_jitter),
            DomainTransform::Chain { steps } => steps
                .iter()
                .map(|s| s.growth())
                .fold((0.0, 0.0), |a, b| (a.0 + b.0, a.1 + b.1)),
            _ => (0.0, 0.0),
        }
    }

    /// `px` is the number of canvas pixels per output pixel.
    fn apply(&self, canvas: &mut [f64], side: usize, px: usize) {
        match self {
            DomainTransform::Identity | DomainTransform::Growth { .. } => {}
            DomainTransform::ContrastReduce { factor } => {
                let mean = canvas.iter().sum::<f64>() / canvas.len() as f64;
                for p in canvas.iter_mut() {
                    *p = mean + factor * (*p - mean);
                }
            }
            DomainTransform::Downsample { scale } => block_average(canvas, side, *scale * px),
            DomainTransform::Chain { steps } => {
                for s in steps {
                    s.apply(canvas, side, px);
                }
            }
        }
    }
}

fn block_average(canvas: &mut [f64], side: usize, scale: usize) {
    if scale <= 1 {
        return;
    }
    for by in (0..side).step_by(scale) {
        for bx in (0..side).step_by(scale) {
            let (y1, x1) = ((by + scale).min(side), (bx + scale).min(side));
            let mut acc = 0.0;
            for y in by..y1 {
                acc += canvas[y * side + bx..y * side + x1].iter().sum::<f64>();
            }
            let mean = acc / ((y1 - by) * (x1 - bx)) as f64;
            for y in by..y1 {
                canvas[y * side + bx..y * side + x1].fill(mean);
            }
        }
    }
}

/// A rendered sample together with its cell mask (`true` inside a cell).
#[derive(Clone, Debug)]
pub struct MaskedSample {
    pub sample: ImageSample,
    pub mask: Vec<bool>,
}

/// Rendering parameters shared by all species and domains.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Renderer {
    pub canvas_size: usize,
    pub image_size: usize,
    pub background: f64,
    pub noise_sigma: f64,
    /// Width of the soft cell edge in canvas pixels.
    pub edge_softness: f64,
}

impl Default for Renderer {
    fn default() -> Self {
        Self {
            canvas_size: 64,
            image_size: 32,
            background: 0.15,
            noise_sigma: 0.05,
            edge_softness: 1.5,
        }
    }
}

impl Renderer {
    pub fn new(image_size: usize) -> Self {
        Self {
            canvas_size: image_size.max(64),
            image_size,
            ..Default::default()
        }
    }

    fn validate(&self, spec: &SpeciesSpec, transform: &DomainTransform) -> Result<()> {
        spec.validate()?;
        transform.validate()?;
        if self.image_size == 0 || !self.canvas_size.is_multiple_of(self.image_size) {
            return Err(Error::config(format!(
                "canvas {} not a multiple of image size {}",
                self.canvas_size, self.image_size
            )));
        }
        let (dilation, _) = transform.growth();
        let largest = spec.blob_radius_range.1 + dilation;
        if largest * 4.0 > self.canvas_size as f64 {
            return Err(Error::config(format!(
                "{}: cell radius {largest} too large for a {}px canvas",
                spec.name, self.canvas_size
            )));
        }
        Ok(())
    }

    /// `n` images of one species under one transform, deterministic per seed;
    /// image `i` uses seed `derive_seed(seed, i)`.
    pub fn generate(
        &self,
        spec: &SpeciesSpec,
        transform: &DomainTransform,
        n: usize,
        seed: u64,
    ) -> Result<Vec<MaskedSample>> {
        if n == 0 {
            return Err(Error::config("n must be >= 1"));
        }
        self.validate(spec, transform)?;
        Ok((0..n)
            .map(|i| self.render(spec, transform, seed::derive_seed(seed, i as u64)))
            .collect())
    }

    fn render(&self, spec: &SpeciesSpec, transform: &DomainTransform, image_seed: u64) -> MaskedSample {
        let side = self.canvas_size;
        let sf = side as f64;
        let mut rng = seed::rng(image_seed);
        let (dilation, jitter) = transform.growth();

        let background = self.background + rng.random_range(-0.02..0.02);
        let count = rng.random_range(spec.blob_count_range.0..=spec.blob_count_range.1);
        let center = (rng.random_range(0.35 * sf..0.65 * sf), rng.random_range(0.35 * sf..0.65 * sf));
        let spread = spec.cluster_spread + jitter;
        let jitter_dist = Normal::new(0.0, spread.max(1e-9)).expect("positive sigma");

        struct Cell {
            cx: f64,
            cy: f64,
            major: f64,
            minor: f64,
            cos: f64,
            sin: f64,
        }
        let cells: Vec<Cell> = (0..count)
            .map(|_| {
                let major = rng.random_range(spec.blob_radius_range.0..=spec.blob_radius_range.1) + dilation;
                let ecc = rng.random_range(spec.eccentricity_range.0..=spec.eccentricity_range.1);
                let minor = (major * (1.0 - ecc * ecc).sqrt()).max(1.0);
                let angle = rng.random_range(0.0..std::f64::consts::PI);
                let cx = (center.0 + jitter_dist.sample(&mut rng)).clamp(major, sf - major);
                let cy = (center.1 + jitter_dist.sample(&mut rng)).clamp(major, sf - major);
                Cell {
                    cx,
                    cy,
                    major,
                    minor,
                    cos: angle.cos(),
                    sin: angle.sin(),
                }
            })
            .collect();

        let peak = spec.intensity_contrast * (0.95 - background);
        let noise = Normal::new(0.0, self.noise_sigma.max(0.0)).expect("valid sigma");
        let mut canvas = vec![0.0; side * side];
        let mut coverage = vec![0.0f64; side * side];
        for y in 0..side {
            for x in 0..side {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                let mut cov = 0.0f64;
                for c in &cells {
                    let (dx, dy) = (px - c.cx, py - c.cy);
                    let u = dx * c.cos + dy * c.sin;
                    let v = -dx * c.sin + dy * c.cos;
                    let r = ((u / c.major).powi(2) + (v / c.minor).powi(2)).sqrt();
                    let edge = ((1.0 - r) * c.minor / self.edge_softness + 0.5).clamp(0.0, 1.0);
                    cov = cov.max(edge);
                }
                coverage[y * side + x] = cov;
                let value = background + peak * cov + noise.sample(&mut rng);
                canvas[y * side + x] = value.clamp(0.0, 1.0);
            }
        }

        transform.apply(&mut canvas, side, side / self.image_size);

        let factor = side / self.image_size;
        let out = self.image_size;
        let mut pixels = vec![0.0; out * out];
        let mut mask = vec![false; out * out];
        let inv = 1.0 / (factor * factor) as f64;
        for oy in 0..out {
            for ox in 0..out {
                let (mut acc, mut cov) = (0.0, 0.0);
                for y in oy * factor..(oy + 1) * factor {
                    for x in ox * factor..(ox + 1) * factor {
                        acc += canvas[y * side + x];
                        cov += coverage[y * side + x];
                    }
                }
                pixels[oy * out + ox] = (acc * inv).clamp(0.0, 1.0);
                mask[oy * out + ox] = cov * inv >= 0.5;
            }
        }
        MaskedSample {
            sample: ImageSample {
                pixels,
                height: out,
                width: out,
                class_label: spec.species_id,
                domain_label: 0,
                source_path: None,
            },
            mask,
        }
    }
}

/// `n` images of `spec` under `transform` at `image_size`, with the default
/// 64-pixel canvas and background noise σ = 0.05.
pub fn synth_generate(
    spec: &SpeciesSpec,
    transform: &DomainTransform,
    n: usize,
    image_size: usize,
    seed: u64,
) -> Result<Vec<ImageSample>> {
    Ok(Renderer::new(image_size)
        .generate(spec, transform, n, seed)?
        .into_iter()
        .map(|m| m.sample)
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSpec {
    pub name: String,
    pub transform: DomainTransform,
    pub per_class: usize,
}

/// Everything needed to regenerate a dataset root bit-for-bit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSpec {
    pub renderer: Renderer,
    pub species: Vec<SpeciesSpec>,
    /// First entry is the source domain.
    pub domains: Vec<DomainSpec>,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        let domain = |name: &str, transform, per_class| DomainSpec {
            name: name.to_string(),
            transform,
            per_class,
        };
        Self {
            renderer: Renderer::default(),
            species: SpeciesSpec::builtin(),
            domains: vec![
                domain("source", DomainTransform::Identity, 100),
                domain("t_contrast", DomainTransform::ContrastReduce { factor: 0.3 }, 25),
                domain("t_lowres", DomainTransform::Downsample { scale: 4 }, 25),
                domain(
                    "t_growth",
                    DomainTransform::Chain {
                        steps: vec![
                            DomainTransform::Downsample { scale: 2 },
                            DomainTransform::Growth {
                                dilation: 2.0,
                                extra_jitter: 4.0,
                            },
                        ],
                    },
                    25,
                ),
            ],
            seed: 0,
        }
    }
}

impl DatasetSpec {
    /// Seed for `(domain, species)`; images within use `derive_seed(this, i)`.
    pub fn stream_seed(&self, domain: usize, species: usize) -> u64 {
        seed::derive_seed2(self.seed, domain as u64, species as u64)
    }

    /// Render one domain in memory, with masks. Domain labels are left at 0;
    /// the caller assigns them per experiment.
    pub fn render_domain(&self, domain: usize) -> Result<Vec<MaskedSample>> {
        let d = self
            .domains
            .get(domain)
            .ok_or_else(|| Error::config(format!("no domain #{domain}")))?;
        let mut out = Vec::new();
        for (s, species) in self.species.iter().enumerate() {
            let mut batch = self.renderer.generate(species, &d.transform, d.per_class, self.stream_seed(domain, s))?;
            for (i, m) in batch.iter_mut().enumerate() {
                m.sample.source_path = Some(format!("{}/{}/{i:05}", d.name, species.name));
            }
            out.extend(batch);
        }
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        if self.domains.is_empty() {
            return Err(Error::config("at least one domain is required"));
        }
        if self.species.is_empty() {
            return Err(Error::config("at least one species is required"));
        }
        for (i, s) in self.species.iter().enumerate() {
            if s.species_id != i {
                return Err(Error::config(format!("species {} has id {} at position {i}", s.name, s.species_id)));
            }
        }
        let mut names: Vec<&str> = self.species.iter().map(|s| s.name.as_str()).collect();
        let listed = names.clone();
        names.sort_unstable();
        if names != listed {
            return Err(Error::config("species names must be listed in lexicographic order"));
        }
        for d in &self.domains {
            if d.per_class == 0 {
                return Err(Error::config(format!("domain {} has per_class 0", d.name)));
            }
            d.transform.validate()?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub domain: String,
    pub species: String,
    pub seed: u64,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub spec: DatasetSpec,
    pub entries: Vec<ManifestEntry>,
}

/// Write every domain as `<root>/<domain>/<species>/<index>.png` plus
/// `<root>/manifest.json`.
pub fn generate_dataset(spec: &DatasetSpec, root: &Path) -> Result<Manifest> {
    spec.validate()?;
    let class_names: Vec<&str> = spec.species.iter().map(|s| s.name.as_str()).collect();
    let mut entries = Vec::new();
    for (d, domain) in spec.domains.iter().enumerate() {
        let samples: Vec<ImageSample> = spec.render_domain(d)?.into_iter().map(|m| m.sample).collect();
        folder::write_image_folder(&samples, &root.join(&domain.name), &class_names)?;
        for (s, species) in spec.species.iter().enumerate() {
            entries.push(ManifestEntry {
                domain: domain.name.clone(),
                species: species.name.clone(),
                seed: spec.stream_seed(d, s),
                count: domain.per_class,
            });
        }
    }
    let manifest = Manifest {
        spec: spec.clone(),
        entries,
    };
    let path = root.join("manifest.json");
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}
