//! Weighted per-client evaluation of a global model.

use serde::{Deserialize, Serialize};

use crate::detection::{build_report, DetectionMetrics};
use crate::error::{Error, Result};
use crate::models::ModelBundle;
use crate::numerics::Tensor;

/// One client's held-out IN split and its covariate-shifted copy.
#[derive(Clone, Debug, PartialEq)]
pub struct ClientSplit {
    pub in_x: Tensor,
    pub in_y: Vec<usize>,
    pub inc_x: Tensor,
    pub inc_y: Vec<usize>,
}

/// How detection thresholds and metrics are formed across clients.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DetectionMode {
    /// Metrics per client against the shared OUT set, then weight-averaged.
    #[default]
    PerClient,
    /// One report over the union of all clients' IN splits.
    Pooled,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClientEval {
    pub client: usize,
    pub weight: f64,
    pub acc_in: f64,
    pub acc_inc: f64,
    pub detection: Option<DetectionMetrics>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub acc_in: f64,
    pub acc_inc: f64,
    pub detection: DetectionMetrics,
    pub per_client: Vec<ClientEval>,
}

pub fn accuracy(bundle: &ModelBundle, x: &Tensor, y: &[usize]) -> Result<f64> {
    if x.rows() == 0 {
        return Err(Error::Empty("accuracy on an empty split".into()));
    }
    if x.rows() != y.len() {
        return Err(Error::dim("accuracy", format!("{} rows, {} labels", x.rows(), y.len())));
    }
    let pred = bundle.predict(x)?;
    Ok(pred.iter().zip(y).filter(|(p, t)| p == t).count() as f64 / y.len() as f64)
}

/// `Σ w_k v_k / Σ w_k`.
pub fn weighted_mean(values: &[f64], weights: &[f64]) -> f64 {
    let total: f64 = weights.iter().sum();
    values.iter().zip(weights).map(|(v, w)| v * w).sum::<f64>() / total
}

/// Accuracy on IN and IN-C plus detection against `out_x`, combined with the
/// client weights. Clients with an empty IN split are skipped and the
/// remaining weights renormalized.
pub fn evaluate_weighted(
    bundle: &ModelBundle,
    splits: &[ClientSplit],
    weights: &[f64],
    out_x: &Tensor,
    sigma_eval: f64,
    mode: DetectionMode,
) -> Result<EvalMetrics> {
    if splits.len() != weights.len() {
        return Err(Error::dim(
            "evaluate_weighted",
            format!("{} splits, {} weights", splits.len(), weights.len()),
        ));
    }
    let live: Vec<usize> = (0..splits.len())
        .filter(|&k| splits[k].in_x.rows() > 0 && splits[k].inc_x.rows() > 0 && weights[k] > 0.0)
        .collect();
    if live.is_empty() {
        return Err(Error::Empty("no client has a non-empty evaluation split".into()));
    }
    let mut per_client = Vec::with_capacity(live.len());
    for &k in &live {
        let s = &splits[k];
        let detection = match mode {
            DetectionMode::PerClient => Some(build_report(bundle, &s.in_x, &s.inc_x, out_x, sigma_eval)?.metrics()),
            DetectionMode::Pooled => None,
        };
        per_client.push(ClientEval {
            client: k,
            weight: weights[k],
            acc_in: accuracy(bundle, &s.in_x, &s.in_y)?,
            acc_inc: accuracy(bundle, &s.inc_x, &s.inc_y)?,
            detection,
        });
    }
    let total: f64 = per_client.iter().map(|c| c.weight).sum();
    for c in &mut per_client {
        c.weight /= total;
    }
    let w: Vec<f64> = per_client.iter().map(|c| c.weight).collect();
    let acc_in = weighted_mean(&per_client.iter().map(|c| c.acc_in).collect::<Vec<_>>(), &w);
    let acc_inc = weighted_mean(&per_client.iter().map(|c| c.acc_inc).collect::<Vec<_>>(), &w);
    let detection = match mode {
        DetectionMode::PerClient => DetectionMetrics::weighted(
            &per_client
                .iter()
                .filter_map(|c| c.detection.map(|d| (c.weight, d)))
                .collect::<Vec<_>>(),
        ),
        DetectionMode::Pooled => {
            let ins: Vec<&Tensor> = live.iter().map(|&k| &splits[k].in_x).collect();
            let incs: Vec<&Tensor> = live.iter().map(|&k| &splits[k].inc_x).collect();
            build_report(
                bundle,
                &Tensor::concat_rows(&ins)?,
                &Tensor::concat_rows(&incs)?,
                out_x,
                sigma_eval,
            )?
            .metrics()
        }
    };
    Ok(EvalMetrics {
        acc_in,
        acc_inc,
        detection,
        per_client,
    })
}
