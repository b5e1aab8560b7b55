//! Dataset pipeline: synthetic domain-shift generator, image-folder IO,
//! normalization, augmentation, stratified splits, few-shot sampling and
//! epoch batching.

mod augment;
mod batch;
mod folder;
mod split;
mod synth;

pub use augment::{augment, flip_horizontal, flip_vertical, AugmentPolicy};
pub use batch::{make_batches, BatchPlan};
pub use folder::{load_image_folder, species_dirs, write_image_folder};
pub use split::{sample_few_shot, split_counts, split_source, split_target, SourceSplit, SplitSpec, TargetSplit};
pub use synth::{
    generate_dataset, synth_generate, DatasetSpec, DomainSpec, DomainTransform, Manifest, ManifestEntry, MaskedSample,
    Renderer, SpeciesSpec, SPECIES_NAMES,
};

/// One grayscale image with its class and domain labels.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageSample {
    /// Row-major intensities in `[0, 1]`.
    pub pixels: Vec<f64>,
    pub height: usize,
    pub width: usize,
    pub class_label: usize,
    pub domain_label: usize,
    pub source_path: Option<String>,
}

impl ImageSample {
    pub fn in_range(&self) -> bool {
        self.pixels.iter().all(|p| (0.0..=1.0).contains(p))
    }

    pub fn with_domain(mut self, domain_label: usize) -> Self {
        self.domain_label = domain_label;
        self
    }
}

/// `raw / 255` per pixel.
pub fn normalize(raw: &[u8]) -> Vec<f64> {
    raw.iter().map(|&v| f64::from(v) / 255.0).collect()
}

/// Inverse of [`normalize`] up to 8-bit quantization.
pub fn quantize(pixels: &[f64]) -> Vec<u8> {
    pixels.iter().map(|&p| (p.clamp(0.0, 1.0) * 255.0).round() as u8).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalize_endpoints() {
        assert_eq!(normalize(&[255, 0, 128]), vec![1.0, 0.0, 128.0 / 255.0]);
        assert!((normalize(&[128])[0] - 0.50196).abs() < 1e-5);
    }

    #[test]
    fn quantize_inverts_normalize() {
        let raw: Vec<u8> = (0..=255).collect();
        assert_eq!(quantize(&normalize(&raw)), raw);
    }
}
