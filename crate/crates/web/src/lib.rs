//! WebAssembly entry points for the static demo page. Every export takes
//! plain numbers and returns a JSON string, so the page needs no bindings
//! beyond `JSON.parse`.

use foogd::federation::dirichlet_partition;
use foogd::models::standard_normal_score;
use foogd::numerics::{RngStream, StreamLabel};
use foogd::sag::ksd;
use foogd::smd::{median_bandwidth, Estimator};
use foogd::workbench::toy::{toy_fit, ToyConfig};
use serde::Serialize;
use wasm_bindgen::prelude::*;

fn stream(seed: u64, purpose: &str) -> RngStream {
    RngStream::new(seed, StreamLabel::new("web").with(purpose, 0))
}

fn points(t: &foogd::numerics::Tensor) -> Vec<[f64; 2]> {
    (0..t.rows()).map(|i| [t.row(i)[0], t.row(i)[1]]).collect()
}

fn encode<T: Serialize>(v: &T) -> String {
    serde_json::to_string(v).expect("plain data serializes")
}

fn fail(e: impl std::fmt::Display) -> String {
    encode(&serde_json::json!({ "error": e.to_string() }))
}

#[derive(Serialize)]
struct ToyResult {
    lambda_m: f64,
    mmd: f64,
    target: Vec<[f64; 2]>,
    generated: Vec<[f64; 2]>,
}

/// Small-budget version of the ring sweep for one `λ_m`.
pub fn demo_toy_config(rounds: usize) -> ToyConfig {
    ToyConfig {
        train_size: 512,
        heldout_size: 512,
        samples: 512,
        rounds,
        score_hidden: vec![32, 32],
        threads: Some(1),
        ..ToyConfig::default()
    }
}

/// Fits the ring with the given `λ_m` and returns target and Langevin points.
#[wasm_bindgen]
pub fn toy_density(lambda_m: f64, rounds: u32, seed: u32) -> String {
    let cfg = demo_toy_config(rounds as usize);
    match toy_fit(&cfg, lambda_m, seed as u64) {
        Ok(fit) => encode(&ToyResult {
            lambda_m,
            mmd: fit.run.mmd,
            target: points(&fit.heldout),
            generated: points(&fit.generated),
        }),
        Err(e) => fail(e),
    }
}

#[derive(Serialize)]
struct PartitionResult {
    alpha: f64,
    /// `counts[k][j]`: samples of class `j` held by client `k`.
    counts: Vec<Vec<usize>>,
    sizes: Vec<usize>,
}

/// Dirichlet split of a balanced label set across `clients`.
#[wasm_bindgen]
pub fn partition_summary(alpha: f64, clients: u32, classes: u32, per_class: u32, seed: u32) -> String {
    let (k, c) = (clients as usize, classes as usize);
    let labels: Vec<usize> = (0..c * per_class as usize).map(|i| i % c.max(1)).collect();
    match dirichlet_partition(&labels, c, k, alpha, &stream(seed as u64, "partition")) {
        Ok(p) => {
            let counts = p
                .clients
                .iter()
                .map(|idx| {
                    let mut row = vec![0; c];
                    for &i in idx {
                        row[labels[i]] += 1;
                    }
                    row
                })
                .collect();
            encode(&PartitionResult {
                alpha,
                counts,
                sizes: p.sizes(),
            })
        }
        Err(e) => fail(e),
    }
}

#[derive(Serialize)]
struct KsdCurve {
    shifts: Vec<f64>,
    ksd: Vec<f64>,
}

/// U-statistic KSD of mean-shifted 2-d Gaussian samples against the exact
/// standard-normal score, for `steps` shifts evenly spaced in `[0, max_shift]`.
#[wasm_bindgen]
pub fn ksd_vs_shift(max_shift: f64, steps: u32, samples: u32, seed: u32) -> String {
    let score = standard_normal_score(2);
    let steps = steps.max(2) as usize;
    let mut curve = KsdCurve {
        shifts: Vec::with_capacity(steps),
        ksd: Vec::with_capacity(steps),
    };
    let base = stream(seed as u64, "ksd").gaussian(&[samples.max(2) as usize, 2]);
    for i in 0..steps {
        let shift = max_shift * i as f64 / (steps - 1) as f64;
        let mut z = base.clone();
        for r in 0..z.rows() {
            z.row_mut(r)[0] += shift;
        }
        match ksd(&score, &z, median_bandwidth(&z), 1.0, Estimator::UStatistic) {
            Ok(v) => {
                curve.shifts.push(shift);
                curve.ksd.push(v);
            }
            Err(e) => return fail(e),
        }
    }
    encode(&curve)
}
