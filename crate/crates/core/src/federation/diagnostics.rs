//! Client-drift and score-error diagnostics logged alongside training.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{forward_score, Mlp, ModelBundle};
use crate::numerics::RngStream;

/// `lhs = Σ_k w_k‖θ − θ_k‖²` against `rhs = 4η²(E−1)²V̂²`.
///
/// `E` counts local SGD iterations and `V̂` is the running max of the
/// per-iteration parameter change divided by `η`, so the bound holds whenever
/// `E ≥ 2`: the weighted spread about the mean is at most the largest client
/// displacement, which is at most `E·η·V̂ ≤ 2(E−1)·η·V̂`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DivergenceRecord {
    pub lhs: f64,
    pub rhs: f64,
    pub eta: f64,
    pub local_steps: usize,
    pub v_hat: f64,
    pub holds: bool,
}

pub fn divergence_diagnostic(
    global: &ModelBundle,
    clients: &[&ModelBundle],
    weights: &[f64],
    eta: f64,
    local_steps: usize,
    v_hat: f64,
) -> Result<DivergenceRecord> {
    if clients.len() != weights.len() {
        return Err(Error::dim(
            "divergence",
            format!("{} bundles, {} weights", clients.len(), weights.len()),
        ));
    }
    let g = global.flatten();
    let mut lhs = 0.0;
    for (b, w) in clients.iter().zip(weights) {
        let d: f64 = b.flatten().iter().zip(&g).map(|(p, q)| (p - q) * (p - q)).sum();
        lhs += w * d;
    }
    let e1 = local_steps.saturating_sub(1) as f64;
    let rhs = 4.0 * eta * eta * e1 * e1 * v_hat * v_hat;
    Ok(DivergenceRecord {
        lhs,
        rhs,
        eta,
        local_steps,
        v_hat,
        holds: lhs <= rhs,
    })
}

/// Score error against the standard normal reference and its bound
/// `d/σ² − d + (|D|/B)·C`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    /// Monte-Carlo mean of `‖s(z) + z‖²` over `z ~ N(0, I)`.
    pub lhs: f64,
    pub rhs: f64,
    pub dim: usize,
    pub sigma: f64,
    pub batch_size: usize,
    pub dataset_size: usize,
    /// Largest MMD observed during the fit.
    pub c: f64,
    pub samples: usize,
    pub holds: bool,
}

pub fn bound_rhs(dim: usize, sigma: f64, batch_size: usize, dataset_size: usize, c: f64) -> f64 {
    let d = dim as f64;
    d / (sigma * sigma) - d + dataset_size as f64 / batch_size as f64 * c
}

pub fn dsm_bound_report(
    score: &Mlp,
    sigma: f64,
    batch_size: usize,
    dataset_size: usize,
    c: f64,
    samples: usize,
    stream: &mut RngStream,
) -> Result<BoundReport> {
    if batch_size == 0 || samples == 0 || !(sigma > 0.0) {
        return Err(Error::domain(
            "bound_report",
            "batch size, samples and sigma must be positive",
        ));
    }
    let dim = score.spec().output_dim();
    let z = stream.gaussian(&[samples, dim]);
    let s = forward_score(score, &z, sigma)?;
    let lhs = s
        .data()
        .chunks_exact(dim)
        .zip(z.data().chunks_exact(dim))
        .map(|(si, zi)| si.iter().zip(zi).map(|(a, b)| (a + b) * (a + b)).sum::<f64>())
        .sum::<f64>()
        / samples as f64;
    let rhs = bound_rhs(dim, sigma, batch_size, dataset_size, c);
    Ok(BoundReport {
        lhs,
        rhs,
        dim,
        sigma,
        batch_size,
        dataset_size,
        c,
        samples,
        holds: lhs <= rhs,
    })
}
