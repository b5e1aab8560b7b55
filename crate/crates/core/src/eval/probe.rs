use std::collections::BTreeMap;

use crate::error::{Error, Result};

/// Leave-one-out 1-nearest-neighbour domain accuracy in Euclidean embedding
/// space. Distance ties go to the lower index. Lower means better aligned.
///
/// When every embedding is identical the neighbour is meaningless, so chance
/// (`1/m`) is returned with a warning.
pub fn domain_probe(embeddings: &[Vec<f64>], domains: &[usize]) -> Result<f64> {
    if embeddings.len() != domains.len() {
        return Err(Error::data(format!("{} embeddings for {} domain labels", embeddings.len(), domains.len())));
    }
    let mut per_domain: BTreeMap<usize, usize> = BTreeMap::new();
    for &d in domains {
        *per_domain.entry(d).or_default() += 1;
    }
    if per_domain.len() < 2 {
        return Err(Error::data("domain probe needs at least two domains"));
    }
    if let Some((d, n)) = per_domain.iter().find(|(_, &n)| n < 10) {
        log::warn!("domain {d} has only {n} points; the probe is noisy below 10");
    }
    let chance = 1.0 / per_domain.len() as f64;
    if embeddings.iter().all(|e| e == &embeddings[0]) {
        log::warn!("all embeddings are identical; reporting chance");
        return Ok(chance);
    }

    let n = embeddings.len();
    let mut hits = 0;
    for i in 0..n {
        let mut best = (f64::INFINITY, usize::MAX);
        for j in (0..n).filter(|&j| j != i) {
            let d: f64 = embeddings[i].iter().zip(&embeddings[j]).map(|(a, b)| (a - b) * (a - b)).sum();
            if d < best.0 {
                best = (d, j);
            }
        }
        hits += usize::from(domains[best.1] == domains[i]);
    }
    Ok(hits as f64 / n as f64)
}
