//! Fixtures shared by the benchmarks.

use dann_core::data::{synth_generate, DomainTransform, ImageSample, SpeciesSpec};
use dann_core::{seed, Tensor};

/// Deterministic values in `[-1, 1)` without pulling in an RNG crate.
pub fn tensor(shape: &[usize], salt: u64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|i| (seed::derive_seed(salt, i as u64) >> 11) as f64 / (1u64 << 52) as f64 - 1.0)
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

/// `n` images alternating between the source and a contrast-reduced target.
pub fn mixed_images(n: usize, size: usize) -> Vec<ImageSample> {
    let species = SpeciesSpec::builtin();
    (0..n)
        .map(|i| {
            let domain = i % 2;
            let transform = if domain == 0 {
                DomainTransform::Identity
            } else {
                DomainTransform::ContrastReduce { factor: 0.3 }
            };
            synth_generate(&species[i % species.len()], &transform, 1, size, i as u64)
                .expect("builtin species render")
                .remove(0)
                .with_domain(domain)
        })
        .collect()
}
