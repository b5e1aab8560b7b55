use rand::Rng;
use serde::{Deserialize, Serialize};

use super::ImageSample;
use crate::seed;

/// Random flips, rotation and brightness/contrast jitter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentPolicy {
    pub hflip_prob: f64,
    pub vflip_prob: f64,
    pub rotate_prob: f64,
    pub max_degrees: f64,
    pub jitter_prob: f64,
    /// Additive brightness shift drawn from `±brightness`.
    pub brightness: f64,
    /// Multiplicative gain drawn from `1 ± contrast`.
    pub contrast: f64,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        Self {
            hflip_prob: 0.5,
            vflip_prob: 0.5,
            rotate_prob: 0.5,
            max_degrees: 15.0,
            jitter_prob: 0.5,
            brightness: 0.1,
            contrast: 0.1,
        }
    }
}

impl AugmentPolicy {
    pub fn disabled() -> Self {
        Self {
            hflip_prob: 0.0,
            vflip_prob: 0.0,
            rotate_prob: 0.0,
            jitter_prob: 0.0,
            ..Default::default()
        }
    }

    pub fn is_disabled(&self) -> bool {
        self.hflip_prob <= 0.0 && self.vflip_prob <= 0.0 && self.rotate_prob <= 0.0 && self.jitter_prob <= 0.0
    }
}

pub fn flip_horizontal(pixels: &mut [f64], width: usize) {
    for row in pixels.chunks_mut(width) {
        row.reverse();
    }
}

pub fn flip_vertical(pixels: &mut [f64], width: usize) {
    let height = pixels.len() / width;
    for y in 0..height / 2 {
        let (top, bottom) = pixels.split_at_mut((height - 1 - y) * width);
        top[y * width..(y + 1) * width].swap_with_slice(&mut bottom[..width]);
    }
}

/// Reflect-101 border index (`dcb|abcd|cba`).
fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut i = i.rem_euclid(period);
    if i >= n as isize {
        i = period - i;
    }
    i as usize
}

/// Rotate about the image center with bilinear sampling and reflected borders.
fn rotate(pixels: &[f64], height: usize, width: usize, degrees: f64) -> Vec<f64> {
    let (sin, cos) = degrees.to_radians().sin_cos();
    let (cy, cx) = ((height as f64 - 1.0) / 2.0, (width as f64 - 1.0) / 2.0);
    let at = |y: isize, x: isize| pixels[reflect(y, height) * width + reflect(x, width)];
    let mut out = Vec::with_capacity(pixels.len());
    for y in 0..height {
        for x in 0..width {
            let (dy, dx) = (y as f64 - cy, x as f64 - cx);
            // inverse map: output pixel pulls from the un-rotated position
            let sx = cos * dx + sin * dy + cx;
            let sy = -sin * dx + cos * dy + cy;
            let (x0, y0) = (sx.floor(), sy.floor());
            let (fx, fy) = (sx - x0, sy - y0);
            let (x0, y0) = (x0 as isize, y0 as isize);
            let top = at(y0, x0) * (1.0 - fx) + at(y0, x0 + 1) * fx;
            let bottom = at(y0 + 1, x0) * (1.0 - fx) + at(y0 + 1, x0 + 1) * fx;
            out.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    out
}

/// Apply `policy` with randomness drawn from `seed`. Labels pass through untouched.
pub fn augment(image: &ImageSample, policy: &AugmentPolicy, seed: u64) -> ImageSample {
    let mut out = image.clone();
    if policy.is_disabled() {
        return out;
    }
    let mut rng = seed::rng(seed);
    // Fixed draw order keeps results stable when a probability changes.
    let hflip = rng.random::<f64>() < policy.hflip_prob;
    let vflip = rng.random::<f64>() < policy.vflip_prob;
    let rotate_on = rng.random::<f64>() < policy.rotate_prob;
    let angle = rng.random_range(-1.0..=1.0) * policy.max_degrees;
    let jitter_on = rng.random::<f64>() < policy.jitter_prob;
    let shift = rng.random_range(-1.0..=1.0) * policy.brightness;
    let gain = 1.0 + rng.random_range(-1.0..=1.0) * policy.contrast;

    if hflip {
        flip_horizontal(&mut out.pixels, out.width);
    }
    if vflip {
        flip_vertical(&mut out.pixels, out.width);
    }
    if rotate_on && angle != 0.0 {
        out.pixels = rotate(&out.pixels, out.height, out.width, angle);
    }
    if jitter_on {
        for p in &mut out.pixels {
            *p = *p * gain + shift;
        }
    }
    for p in &mut out.pixels {
        *p = p.clamp(0.0, 1.0);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_generate, DomainTransform, SpeciesSpec};

    fn sample() -> ImageSample {
        synth_generate(&SpeciesSpec::builtin()[0], &DomainTransform::Identity, 1, 32, 3)
            .unwrap()
            .remove(0)
    }

    #[test]
    fn disabled_policy_is_identity() {
        let s = sample();
        for seed in 0..20 {
            assert_eq!(augment(&s, &AugmentPolicy::disabled(), seed), s);
        }
    }

    #[test]
    fn flips_are_involutions() {
        let s = sample();
        let forced = AugmentPolicy {
            hflip_prob: 1.0,
            ..AugmentPolicy::disabled()
        };
        let twice = augment(&augment(&s, &forced, 1), &forced, 2);
        assert_eq!(twice, s);
        let once = augment(&s, &forced, 1);
        assert_ne!(once.pixels, s.pixels);

        let mut p: Vec<f64> = (0..12).map(f64::from).collect();
        flip_vertical(&mut p, 4);
        assert_eq!(&p[..4], &[8.0, 9.0, 10.0, 11.0]);
        flip_vertical(&mut p, 4);
        assert_eq!(p, (0..12).map(f64::from).collect::<Vec<_>>());
    }

    #[test]
    fn rotation_by_zero_and_full_turn_is_identity() {
        let s = sample();
        let r = rotate(&s.pixels, 32, 32, 0.0);
        assert_eq!(r, s.pixels);
        let r = rotate(&s.pixels, 32, 32, 360.0);
        let err = r.iter().zip(&s.pixels).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err < 1e-9);
    }

    #[test]
    fn reflect_101() {
        let idx: Vec<usize> = (-3..7).map(|i| reflect(i, 4)).collect();
        assert_eq!(idx, vec![3, 2, 1, 0, 1, 2, 3, 2, 1, 0]);
    }

    #[test]
    fn outputs_stay_in_unit_range_and_keep_labels() {
        let mut s = sample();
        s.domain_label = 2;
        let strong = AugmentPolicy {
            brightness: 0.8,
            contrast: 0.9,
            jitter_prob: 1.0,
            rotate_prob: 1.0,
            max_degrees: 90.0,
            ..Default::default()
        };
        for seed in 0..1000 {
            let a = augment(&s, &strong, seed);
            assert!(a.in_range());
            assert_eq!((a.class_label, a.domain_label), (s.class_label, 2));
        }
        assert_eq!(augment(&s, &strong, 5), augment(&s, &strong, 5));
    }
}
