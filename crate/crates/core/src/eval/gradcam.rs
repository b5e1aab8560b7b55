use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor};
use crate::data::ImageSample;
use crate::error::{Error, Result};
use crate::model::{batch_tensor, ModelParams};

/// Class activation map at input resolution, max-normalized to 1 unless all zero.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CamHeatmap {
    pub height: usize,
    pub width: usize,
    pub target_class: usize,
    pub stage: usize,
    pub values: Vec<f64>,
    /// Peak of the unnormalized map.
    pub raw_max: f64,
}

impl CamHeatmap {
    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }
}

/// Grad-CAM on the last convolutional stage.
pub fn grad_cam(params: &ModelParams, image: &ImageSample, target_class: usize) -> Result<CamHeatmap> {
    grad_cam_at_stage(params, image, target_class, params.config().stage_channels.len() - 1)
}

/// Grad-CAM on stage `stage` (post-ReLU, pre-pool activations).
pub fn grad_cam_at_stage(params: &ModelParams, image: &ImageSample, target_class: usize, stage: usize) -> Result<CamHeatmap> {
    let cfg = params.config();
    if target_class >= cfg.num_classes {
        return Err(Error::InvalidLabel {
            label: target_class,
            bound: cfg.num_classes,
        });
    }
    if stage >= cfg.stage_channels.len() {
        return Err(Error::config(format!("stage {stage} out of range")));
    }
    let mut tape = Tape::new();
    let model = params.bind(&mut tape);
    let x = tape.leaf(batch_tensor([image.pixels.as_slice()], cfg.input_size)?);
    let trace = model.extract_features(&mut tape, x)?;
    let logits = model.classify(&mut tape, trace.embedding)?;
    let mut onehot = Tensor::zeros(&[1, cfg.num_classes])?;
    onehot.data_mut()[target_class] = 1.0;
    let mask = tape.leaf(onehot);
    let picked = tape.mul(logits, mask)?;
    let score = tape.sum(picked);
    let act = trace.stage_activations[stage];
    let grads = tape.backward(score)?;

    let a = tape.value(act);
    let g = grads.get(act).expect("activation is upstream of the logit");
    let (c, h, w) = (a.shape()[1], a.shape()[2], a.shape()[3]);
    let (map, raw_max) = cam_from_activations(a.data(), g.data(), c, h, w)?;
    let mut values = bilinear_upsample(&map, h, w, cfg.input_size, cfg.input_size);
    let peak = values.iter().copied().fold(0.0, f64::max);
    if peak > 0.0 {
        for v in &mut values {
            *v /= peak;
        }
    }
    Ok(CamHeatmap {
        height: cfg.input_size,
        width: cfg.input_size,
        target_class,
        stage,
        values,
        raw_max,
    })
}

/// `ReLU(Σ_k w_k·A^k)` with `w_k` the spatial mean of `∂y/∂A^k`, at the
/// activation resolution. Both slices are `[C×H×W]`. Also returns the map's max.
pub fn cam_from_activations(activations: &[f64], gradients: &[f64], c: usize, h: usize, w: usize) -> Result<(Vec<f64>, f64)> {
    let n = c * h * w;
    if activations.len() != n || gradients.len() != n || n == 0 {
        return Err(Error::shape(format!(
            "activations {} / gradients {} for [{c}, {h}, {w}]",
            activations.len(),
            gradients.len()
        )));
    }
    let hw = h * w;
    let mut map = vec![0.0; hw];
    for k in 0..c {
        let weight = gradients[k * hw..(k + 1) * hw].iter().sum::<f64>() / hw as f64;
        for (m, a) in map.iter_mut().zip(&activations[k * hw..(k + 1) * hw]) {
            *m += weight * a;
        }
    }
    for m in &mut map {
        *m = m.max(0.0);
    }
    let max = map.iter().copied().fold(0.0, f64::max);
    Ok((map, max))
}

/// Bilinear resize with half-pixel centers and edge clamping.
pub fn bilinear_upsample(src: &[f64], h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<f64> {
    let coord = |o: usize, n_in: usize, n_out: usize| {
        let s = ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
        let i0 = s.floor() as usize;
        (i0, (i0 + 1).min(n_in - 1), s - i0 as f64)
    };
    let mut out = Vec::with_capacity(out_h * out_w);
    for oy in 0..out_h {
        let (y0, y1, fy) = coord(oy, h, out_h);
        for ox in 0..out_w {
            let (x0, x1, fx) = coord(ox, w, out_w);
            let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
            let bottom = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
            out.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    out
}
