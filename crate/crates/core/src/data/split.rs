use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::ImageSample;
use crate::error::{Error, Result};
use crate::seed;

/// Minimum samples per class for a source split.
pub const MIN_PER_CLASS: usize = 7;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitSpec {
    /// Fraction of each class held out for test.
    pub test_fraction: f64,
    /// Fraction of the remainder used for validation (the 30 of 70/30).
    pub val_fraction: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            test_fraction: 0.15,
            val_fraction: 0.3,
            seed: 0,
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        for (name, f) in [("test_fraction", self.test_fraction), ("val_fraction", self.val_fraction)] {
            if !(f > 0.0 && f < 1.0) {
                return Err(Error::config(format!("{name} must be in (0, 1), got {f}")));
            }
        }
        Ok(())
    }
}

/// `(test, val, train)` counts for a class of `n` samples: test is
/// `floor(test_fraction·n)` (at least 1), validation is the remainder times
/// `val_fraction` rounded half-up, train takes the rest.
pub fn split_counts(n: usize, spec: &SplitSpec) -> (usize, usize, usize) {
    // The 1e-9 nudges absorb binary representation error (0.3·85 = 25.4999…).
    let test = ((spec.test_fraction * n as f64 + 1e-9).floor() as usize).max(1);
    let rest = n - test;
    let val = (spec.val_fraction * rest as f64 + 0.5 + 1e-9).floor() as usize;
    (test, val, rest - val)
}

#[derive(Clone, Debug, Default)]
pub struct SourceSplit {
    pub train: Vec<ImageSample>,
    pub val: Vec<ImageSample>,
    pub test: Vec<ImageSample>,
}

fn by_class(samples: &[ImageSample]) -> BTreeMap<usize, Vec<&ImageSample>> {
    let mut map: BTreeMap<usize, Vec<&ImageSample>> = BTreeMap::new();
    for s in samples {
        map.entry(s.class_label).or_default().push(s);
    }
    map
}

fn shuffled(mut members: Vec<&ImageSample>, seed: u64, class: usize) -> Vec<&ImageSample> {
    members.shuffle(&mut seed::rng(seed::derive_seed(seed, class as u64)));
    members
}

/// Per-class stratified test / validation / train split.
pub fn split_source(samples: &[ImageSample], spec: &SplitSpec) -> Result<SourceSplit> {
    spec.validate()?;
    let mut out = SourceSplit::default();
    for (class, members) in by_class(samples) {
        if members.len() < MIN_PER_CLASS {
            return Err(Error::data(format!(
                "class {class} has {} samples, at least {MIN_PER_CLASS} are required",
                members.len()
            )));
        }
        let (test, val, _) = split_counts(members.len(), spec);
        let members = shuffled(members, spec.seed, class);
        out.test.extend(members[..test].iter().map(|&s| s.clone()));
        out.val.extend(members[test..test + val].iter().map(|&s| s.clone()));
        out.train.extend(members[test + val..].iter().map(|&s| s.clone()));
    }
    Ok(out)
}

/// A target domain divided into a held-out test set and the pool few-shot
/// training samples are drawn from.
#[derive(Clone, Debug, Default)]
pub struct TargetSplit {
    pub pool: Vec<ImageSample>,
    pub test: Vec<ImageSample>,
}

/// Hold out `test_per_class` samples of every class; everything else is pool.
pub fn split_target(samples: &[ImageSample], test_per_class: usize, seed: u64) -> Result<TargetSplit> {
    let mut out = TargetSplit::default();
    for (class, members) in by_class(samples) {
        if members.len() <= test_per_class {
            return Err(Error::data(format!(
                "target class {class} has {} samples, need more than {test_per_class}",
                members.len()
            )));
        }
        let members = shuffled(members, seed, class);
        out.test.extend(members[..test_per_class].iter().map(|&s| s.clone()));
        out.pool.extend(members[test_per_class..].iter().map(|&s| s.clone()));
    }
    Ok(out)
}

/// Exactly `k` pool samples per class, without replacement. Classes that only
/// appear in the test set count as having zero pool samples.
pub fn sample_few_shot(target: &TargetSplit, k: usize, seed: u64) -> Result<Vec<ImageSample>> {
    if k == 0 {
        return Err(Error::data("k must be >= 1"));
    }
    let pool = by_class(&target.pool);
    let mut classes: Vec<usize> = pool.keys().copied().collect();
    classes.extend(target.test.iter().map(|s| s.class_label));
    classes.sort_unstable();
    classes.dedup();
    let mut out = Vec::with_capacity(k * classes.len());
    for class in classes {
        let members = pool.get(&class).cloned().unwrap_or_default();
        if members.len() < k {
            return Err(Error::data(format!(
                "class {class} has {} samples outside the test set, {k} requested",
                members.len()
            )));
        }
        let members = shuffled(members, seed, class);
        out.extend(members[..k].iter().map(|&s| s.clone()));
    }
    Ok(out)
}
