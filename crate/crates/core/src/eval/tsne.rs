//! Exact O(n²) t-SNE.

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TsneConfig {
    pub perplexity: f64,
    pub iterations: usize,
    pub learning_rate: f64,
    pub early_exaggeration: f64,
    pub exaggeration_iters: usize,
    pub initial_momentum: f64,
    pub final_momentum: f64,
    pub momentum_switch: usize,
    pub seed: u64,
}

impl Default for TsneConfig {
    fn default() -> Self {
        Self {
            perplexity: 30.0,
            iterations: 1000,
            learning_rate: 200.0,
            early_exaggeration: 12.0,
            exaggeration_iters: 250,
            initial_momentum: 0.5,
            final_momentum: 0.8,
            momentum_switch: 250,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TsneResult {
    pub coords: Vec<[f64; 2]>,
    /// Perplexity actually targeted (the requested value, capped at n − 1).
    pub perplexity: f64,
    /// Achieved perplexity of every conditional row.
    pub row_perplexities: Vec<f64>,
    /// KL(P‖Q) at the initial layout and after the last iteration.
    pub kl_initial: f64,
    pub kl_final: f64,
}

const MAX_BISECTION_STEPS: usize = 64;
const ENTROPY_TOL: f64 = 1e-6;

/// Row `i` of `P_{j|i}` for squared distances `d` (entry `i` ignored) at
/// precision `beta`; returns the entropy in nats.
fn row_at(d: &[f64], i: usize, beta: f64, out: &mut [f64]) -> f64 {
    let min = d.iter().enumerate().filter(|&(j, _)| j != i).map(|(_, &v)| v).fold(f64::INFINITY, f64::min);
    let mut sum = 0.0;
    for (j, (o, &v)) in out.iter_mut().zip(d).enumerate() {
        // Shifting by the nearest distance keeps exp() from underflowing.
        *o = if j == i { 0.0 } else { (-(v - min) * beta).exp() };
        sum += *o;
    }
    let mut weighted = 0.0;
    for (o, &v) in out.iter_mut().zip(d) {
        *o /= sum;
        weighted += *o * (v - min);
    }
    sum.ln() + beta * weighted
}

/// Conditional affinities `P_{j|i}` (row-major `n×n`) from squared distances,
/// each row's bandwidth bisected to hit `perplexity`. Also returns the
/// achieved per-row perplexities.
pub fn conditional_probabilities(sq_dists: &[f64], n: usize, perplexity: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    if sq_dists.len() != n * n || n < 2 {
        return Err(Error::shape(format!("{} distances for n = {n}", sq_dists.len())));
    }
    if !(perplexity >= 1.0) {
        return Err(Error::config(format!("perplexity must be >= 1, got {perplexity}")));
    }
    let target = perplexity.ln();
    let mut p = vec![0.0; n * n];
    let mut achieved = Vec::with_capacity(n);
    for i in 0..n {
        let d = &sq_dists[i * n..(i + 1) * n];
        let row = &mut p[i * n..(i + 1) * n];
        let (mut beta, mut lo, mut hi) = (1.0, 0.0, f64::INFINITY);
        let mut h = row_at(d, i, beta, row);
        for _ in 0..MAX_BISECTION_STEPS {
            if (h - target).abs() < ENTROPY_TOL {
                break;
            }
            if h > target {
                lo = beta;
                beta = if hi.is_finite() { (beta + hi) / 2.0 } else { beta * 2.0 };
            } else {
                hi = beta;
                beta = (beta + lo) / 2.0;
            }
            h = row_at(d, i, beta, row);
        }
        achieved.push(h.exp());
    }
    Ok((p, achieved))
}

fn squared_distances(points: &[Vec<f64>]) -> Vec<f64> {
    let n = points.len();
    let mut d = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let v: f64 = points[i].iter().zip(&points[j]).map(|(a, b)| (a - b) * (a - b)).sum();
            d[i * n + j] = v;
            d[j * n + i] = v;
        }
    }
    d
}

/// Student-t kernel numerators and their sum.
fn student_t(y: &[[f64; 2]]) -> (Vec<f64>, f64) {
    let n = y.len();
    let mut num = vec![0.0; n * n];
    let mut sum = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            let (dx, dy) = (y[i][0] - y[j][0], y[i][1] - y[j][1]);
            let v = 1.0 / (1.0 + dx * dx + dy * dy);
            num[i * n + j] = v;
            num[j * n + i] = v;
            sum += 2.0 * v;
        }
    }
    (num, sum)
}

fn kl_divergence(p: &[f64], y: &[[f64; 2]]) -> f64 {
    let (num, sum) = student_t(y);
    p.iter()
        .zip(&num)
        .filter(|(&pij, _)| pij > 0.0)
        .map(|(&pij, &nij)| pij * (pij / (nij / sum).max(1e-300)).ln())
        .sum()
}

/// `∂KL/∂y_i` with P scaled by `exaggeration`.
fn kl_gradient(p: &[f64], y: &[[f64; 2]], exaggeration: f64) -> Vec<[f64; 2]> {
    let n = y.len();
    let (num, sum) = student_t(y);
    let mut out = vec![[0.0; 2]; n];
    for (i, grad) in out.iter_mut().enumerate() {
        for j in (0..n).filter(|&j| j != i) {
            let nij = num[i * n + j];
            let coef = 4.0 * (exaggeration * p[i * n + j] - nij / sum) * nij;
            grad[0] += coef * (y[i][0] - y[j][0]);
            grad[1] += coef * (y[i][1] - y[j][1]);
        }
    }
    out
}

/// Embed `points` in 2-D.
pub fn tsne(points: &[Vec<f64>], config: &TsneConfig) -> Result<TsneResult> {
    let n = points.len();
    if n < 3 {
        return Err(Error::data(format!("t-SNE needs at least 3 points, got {n}")));
    }
    let dim = points[0].len();
    if points.iter().any(|p| p.len() != dim || p.iter().any(|v| !v.is_finite())) {
        return Err(Error::data("embeddings must share one dimension and be finite"));
    }
    let perplexity = config.perplexity.min((n - 1) as f64);
    if 3.0 * config.perplexity > n as f64 {
        log::warn!("t-SNE on {n} points with perplexity {}; 3x perplexity points are recommended", config.perplexity);
    }
    let (cond, row_perplexities) = conditional_probabilities(&squared_distances(points), n, perplexity)?;
    let mut p = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            p[i * n + j] = ((cond[i * n + j] + cond[j * n + i]) / (2.0 * n as f64)).max(1e-12);
        }
        p[i * n + i] = 0.0;
    }

    let normal = Normal::new(0.0, 1e-4).expect("valid sigma");
    let mut rng = seed::rng(config.seed);
    let mut y: Vec<[f64; 2]> = (0..n).map(|_| [normal.sample(&mut rng), normal.sample(&mut rng)]).collect();
    let kl_initial = kl_divergence(&p, &y);

    let mut update = vec![[0.0; 2]; n];
    let mut gains = vec![[1.0f64; 2]; n];
    for iter in 0..config.iterations {
        let exaggeration = if iter < config.exaggeration_iters { config.early_exaggeration } else { 1.0 };
        let momentum = if iter < config.momentum_switch { config.initial_momentum } else { config.final_momentum };
        let grads = kl_gradient(&p, &y, exaggeration);
        for (i, grad) in grads.iter().enumerate() {
            for d in 0..2 {
                let g = &mut gains[i][d];
                *g = if (grad[d] > 0.0) != (update[i][d] > 0.0) { *g + 0.2 } else { *g * 0.8 };
                *g = g.max(0.01);
                update[i][d] = momentum * update[i][d] - config.learning_rate * *g * grad[d];
            }
        }
        let mut mean = [0.0; 2];
        for (yi, u) in y.iter_mut().zip(&update) {
            yi[0] += u[0];
            yi[1] += u[1];
            mean[0] += yi[0] / n as f64;
            mean[1] += yi[1] / n as f64;
        }
        for yi in &mut y {
            yi[0] -= mean[0];
            yi[1] -= mean[1];
        }
    }
    let kl_final = kl_divergence(&p, &y);
    if y.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::data("t-SNE diverged to non-finite coordinates"));
    }
    Ok(TsneResult {
        coords: y,
        perplexity,
        row_perplexities,
        kl_initial,
        kl_final,
    })
}
