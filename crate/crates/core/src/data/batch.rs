use rand::seq::SliceRandom;

use super::ImageSample;
use crate::error::{Error, Result};
use crate::seed;

/// Labeled training pool (source train plus every few-shot target sample)
/// reshuffled each epoch.
#[derive(Clone, Debug)]
pub struct BatchPlan {
    pool: Vec<ImageSample>,
    batch_size: usize,
    seed: u64,
}

pub fn make_batches(
    source_train: &[ImageSample],
    target_shots: &[ImageSample],
    batch_size: usize,
    seed: u64,
) -> Result<BatchPlan> {
    if batch_size < 2 {
        return Err(Error::config(format!("batch_size must be >= 2, got {batch_size}")));
    }
    let pool: Vec<ImageSample> = source_train.iter().chain(target_shots).cloned().collect();
    if pool.is_empty() {
        return Err(Error::data("training pool is empty"));
    }
    Ok(BatchPlan { pool, batch_size, seed })
}

impl BatchPlan {
    pub fn pool(&self) -> &[ImageSample] {
        &self.pool
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.pool.len().div_ceil(self.batch_size)
    }

    /// Pool indices for every batch of `epoch`; the last batch may be short.
    pub fn epoch_indices(&self, epoch: usize) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..self.pool.len()).collect();
        order.shuffle(&mut seed::rng(seed::derive_seed(self.seed, epoch as u64)));
        order.chunks(self.batch_size).map(<[usize]>::to_vec).collect()
    }

    pub fn epoch(&self, epoch: usize) -> impl Iterator<Item = Vec<&ImageSample>> + '_ {
        self.epoch_indices(epoch)
            .into_iter()
            .map(move |idx| idx.into_iter().map(|i| &self.pool[i]).collect())
    }
}
