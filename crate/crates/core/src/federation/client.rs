//! Local client training: per batch, one score step then one feature step.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::ModelBundle;
use crate::numerics::{RngStream, SgdConfig, SgdState, StreamLabel, Tensor};
use crate::sag::{feature_update_step, FeatureStepRecord, SagConfig};
use crate::smd::{score_update_step, LangevinConfig, ScoreStepRecord, Sm3dConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FederationConfig {
    pub clients: usize,
    pub rounds: usize,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub participation: f64,
    /// Optimizer for the feature extractor and classifier head.
    pub feature_sgd: SgdConfig,
    /// Optimizer for the score network.
    pub score_sgd: SgdConfig,
    pub smd: Sm3dConfig,
    pub langevin: LangevinConfig,
    pub sag: SagConfig,
    /// Run the score step each batch.
    pub update_score: bool,
    /// Run the feature step each batch.
    pub update_features: bool,
    pub seed: u64,
    /// Worker cap for concurrent clients; `None` reads `FOOGD_THREADS`.
    pub threads: Option<usize>,
}

impl Default for FederationConfig {
    fn default() -> Self {
        FederationConfig {
            clients: 10,
            rounds: 10,
            local_epochs: 5,
            batch_size: 64,
            participation: 1.0,
            feature_sgd: SgdConfig {
                lr: 0.1,
                momentum: 0.9,
                weight_decay: 5e-4,
            },
            score_sgd: SgdConfig {
                lr: 1e-3,
                momentum: 0.9,
                weight_decay: 0.0,
            },
            smd: Sm3dConfig::default(),
            langevin: LangevinConfig::default(),
            sag: SagConfig::default(),
            update_score: true,
            update_features: true,
            seed: 0,
            threads: None,
        }
    }
}

fn check_sgd(cfg: &SgdConfig, path: &str) -> Result<()> {
    if !(cfg.lr >= 0.0 && cfg.lr.is_finite()) {
        return Err(Error::config(format!("{path}.lr"), "must be finite and >= 0"));
    }
    if !(0.0..1.0).contains(&cfg.momentum) {
        return Err(Error::config(format!("{path}.momentum"), "must lie in [0, 1)"));
    }
    if !(cfg.weight_decay >= 0.0 && cfg.weight_decay.is_finite()) {
        return Err(Error::config(format!("{path}.weight_decay"), "must be finite and >= 0"));
    }
    Ok(())
}

impl FederationConfig {
    pub fn validate(&self, path: &str) -> Result<()> {
        if self.clients == 0 {
            return Err(Error::config(format!("{path}.clients"), "must be >= 1"));
        }
        if self.local_epochs == 0 {
            return Err(Error::config(format!("{path}.local_epochs"), "must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config(format!("{path}.batch_size"), "must be >= 1"));
        }
        if !(self.participation > 0.0 && self.participation <= 1.0) {
            return Err(Error::config(format!("{path}.participation"), "must lie in (0, 1]"));
        }
        if self.threads == Some(0) {
            return Err(Error::config(format!("{path}.threads"), "must be >= 1"));
        }
        check_sgd(&self.feature_sgd, &format!("{path}.feature_sgd"))?;
        check_sgd(&self.score_sgd, &format!("{path}.score_sgd"))?;
        self.smd.validate("smd")?;
        self.langevin.validate("smd.langevin")?;
        self.sag.validate("sag")
    }

    /// Learning rate used by the divergence diagnostic.
    pub fn diagnostic_lr(&self) -> f64 {
        if self.update_features {
            self.feature_sgd.lr
        } else {
            self.score_sgd.lr
        }
    }

    /// Local SGD iterations for a client holding `n` samples.
    pub fn local_steps(&self, n: usize) -> usize {
        self.local_epochs * n.div_ceil(self.batch_size)
    }
}

/// Per-client data and the weight it carries in aggregation.
#[derive(Clone, Debug, PartialEq)]
pub struct ClientState {
    pub id: usize,
    pub indices: Vec<usize>,
    pub bundle: ModelBundle,
    pub weight: f64,
}

/// The stream every random choice of client `k` in round `t` derives from.
pub fn client_stream(seed: u64, client: usize, round: usize) -> RngStream {
    RngStream::new(seed, StreamLabel::new("client-update").client(client).round(round))
}

/// Shuffled mini-batches for one local epoch.
pub fn epoch_batches(stream: &RngStream, indices: &[usize], epoch: usize, batch: usize) -> Vec<Vec<usize>> {
    let mut order = indices.to_vec();
    stream.fork("epoch", epoch as u64).shuffle(&mut order);
    order.chunks(batch.max(1)).map(<[usize]>::to_vec).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub score: Option<ScoreStepRecord>,
    pub feature: Option<FeatureStepRecord>,
    /// `‖Δθ‖` over the whole bundle for this iteration.
    pub step_norm: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClientOutcome {
    pub bundle: ModelBundle,
    pub records: Vec<StepRecord>,
}

impl ClientOutcome {
    pub fn max_step_norm(&self) -> f64 {
        self.records.iter().map(|r| r.step_norm).fold(0.0, f64::max)
    }
}

fn norm_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Trains a copy of `global` on the client's data. Optimizer state starts
/// fresh every round. Any non-finite loss aborts with the round and client.
pub fn client_update(
    state: &ClientState,
    global: &ModelBundle,
    x: &Tensor,
    y: &[usize],
    cfg: &FederationConfig,
    round: usize,
) -> Result<ClientOutcome> {
    if global.input_dim() != x.cols() {
        return Err(Error::dim(
            "client_update",
            format!("model input {} vs data {}", global.input_dim(), x.cols()),
        ));
    }
    let mut bundle = global.clone();
    let stream = client_stream(cfg.seed, state.id, round);
    let mut score_state = SgdState::default();
    let mut feature_state = SgdState::default();
    let mut records = Vec::new();
    let sigma_eval = cfg.smd.smallest_sigma();
    let non_finite = || Error::NonFiniteLoss {
        round,
        client: state.id,
    };
    for epoch in 0..cfg.local_epochs {
        for batch in epoch_batches(&stream, &state.indices, epoch, cfg.batch_size) {
            let step = stream.fork("step", records.len() as u64);
            let xb = x.select_rows(&batch);
            let yb: Vec<usize> = batch.iter().map(|&i| y[i]).collect();
            let before = bundle.flatten();
            let score = if cfg.update_score {
                let r = score_update_step(
                    &mut bundle,
                    &xb,
                    &mut score_state,
                    &cfg.score_sgd,
                    &cfg.smd,
                    &cfg.langevin,
                    &step.fork("smd", 0),
                )?;
                if !r.parts.total.is_finite() {
                    return Err(non_finite());
                }
                Some(r)
            } else {
                None
            };
            let feature = if cfg.update_features {
                let r = feature_update_step(
                    &mut bundle,
                    &xb,
                    &yb,
                    &mut feature_state,
                    &cfg.feature_sgd,
                    &cfg.sag,
                    sigma_eval,
                    &step.fork("sag", 0),
                )?;
                if !r.parts.total.is_finite() {
                    return Err(non_finite());
                }
                Some(r)
            } else {
                None
            };
            let step_norm = norm_diff(&before, &bundle.flatten());
            if !step_norm.is_finite() {
                return Err(non_finite());
            }
            records.push(StepRecord {
                score,
                feature,
                step_norm,
            });
        }
    }
    Ok(ClientOutcome { bundle, records })
}
