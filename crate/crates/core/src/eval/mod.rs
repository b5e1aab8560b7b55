//! Accuracy, confusion matrices and the interpretability tools: Grad-CAM,
//! exact t-SNE and a nearest-neighbour domain probe.

mod gradcam;
mod probe;
mod tsne;

pub use gradcam::{bilinear_upsample, cam_from_activations, grad_cam, grad_cam_at_stage, CamHeatmap};
pub use probe::domain_probe;
pub use tsne::{conditional_probabilities, tsne, TsneConfig, TsneResult};

use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::data::ImageSample;
use crate::error::{Error, Result};
use crate::model::{batch_tensor, ModelParams};

/// Embeddings and class logits for every sample, row-aligned with the input.
#[derive(Clone, Debug, Default)]
pub struct Outputs {
    pub embeddings: Vec<Vec<f64>>,
    pub logits: Vec<Vec<f64>>,
}

/// Forward `samples` through extractor and classifier in chunks of `batch_size`.
pub fn forward(params: &ModelParams, samples: &[ImageSample], batch_size: usize) -> Result<Outputs> {
    if batch_size == 0 {
        return Err(Error::config("batch_size must be >= 1"));
    }
    let mut out = Outputs::default();
    let size = params.config().input_size;
    for chunk in samples.chunks(batch_size) {
        let mut tape = Tape::new();
        let model = params.bind(&mut tape);
        let x = tape.leaf(batch_tensor(chunk.iter().map(|s| s.pixels.as_slice()), size)?);
        let e = model.extract_features(&mut tape, x)?.embedding;
        let z = model.classify(&mut tape, e)?;
        let rows = |id, width| -> Vec<Vec<f64>> { tape.value(id).data().chunks(width).map(<[f64]>::to_vec).collect() };
        out.embeddings.extend(rows(e, params.config().embedding_dim));
        out.logits.extend(rows(z, params.config().num_classes));
    }
    Ok(out)
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

pub fn predict(params: &ModelParams, samples: &[ImageSample], batch_size: usize) -> Result<Vec<usize>> {
    Ok(forward(params, samples, batch_size)?.logits.iter().map(|r| argmax(r)).collect())
}

pub fn accuracy_of(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    if predictions.is_empty() || predictions.len() != labels.len() {
        return Err(Error::data(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    let hits = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Fraction of `samples` whose argmax class matches the label.
pub fn accuracy(params: &ModelParams, samples: &[ImageSample]) -> Result<f64> {
    let labels: Vec<usize> = samples.iter().map(|s| s.class_label).collect();
    accuracy_of(&predict(params, samples, 64)?, &labels)
}

/// Mean softmax cross-entropy and accuracy over `samples`.
pub fn loss_and_accuracy(params: &ModelParams, samples: &[ImageSample], batch_size: usize) -> Result<(f64, f64)> {
    if samples.is_empty() {
        return Err(Error::data("empty evaluation set"));
    }
    let out = forward(params, samples, batch_size)?;
    let (mut loss, mut hits) = (0.0, 0usize);
    for (row, s) in out.logits.iter().zip(samples) {
        let k = row.len();
        if s.class_label >= k {
            return Err(Error::InvalidLabel {
                label: s.class_label,
                bound: k,
            });
        }
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
        loss += lse - row[s.class_label];
        hits += usize::from(argmax(row) == s.class_label);
    }
    let n = samples.len() as f64;
    Ok((loss / n, hits as f64 / n))
}

/// Row = true class, column = predicted class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub classes: Vec<String>,
    pub counts: Vec<Vec<usize>>,
}

impl ConfusionMatrix {
    pub fn from_predictions(classes: &[String], predictions: &[usize], labels: &[usize]) -> Result<Self> {
        let k = classes.len();
        let mut counts = vec![vec![0; k]; k];
        for (&p, &l) in predictions.iter().zip(labels) {
            for v in [p, l] {
                if v >= k {
                    return Err(Error::InvalidLabel { label: v, bound: k });
                }
            }
            counts[l][p] += 1;
        }
        Ok(Self {
            classes: classes.to_vec(),
            counts,
        })
    }

    pub fn total(&self) -> usize {
        self.counts.iter().flatten().sum()
    }

    pub fn accuracy(&self) -> f64 {
        let diag: usize = (0..self.counts.len()).map(|i| self.counts[i][i]).sum();
        diag as f64 / self.total().max(1) as f64
    }
}

pub fn confusion_matrix(params: &ModelParams, samples: &[ImageSample], classes: &[String]) -> Result<ConfusionMatrix> {
    let labels: Vec<usize> = samples.iter().map(|s| s.class_label).collect();
    ConfusionMatrix::from_predictions(classes, &predict(params, samples, 64)?, &labels)
}
