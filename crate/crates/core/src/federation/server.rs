//! Aggregation and the communication-round loop.

use serde::{Deserialize, Serialize};

use super::client::{client_update, ClientOutcome, ClientState, FederationConfig};
use super::diagnostics::{divergence_diagnostic, DivergenceRecord};
use super::eval::EvalMetrics;
use super::partition::{size_weights, Partition};
use crate::error::{Error, Result};
use crate::models::ModelBundle;
use crate::numerics::{RngStream, StreamLabel, Tensor};

/// Weighted mean of the flat parameters, formed as
/// `θ_1 + Σ_k w_k·(θ_k − θ_1)` so identical inputs reproduce `θ_1` exactly.
pub fn aggregate(bundles: &[&ModelBundle], weights: &[f64]) -> Result<ModelBundle> {
    if bundles.is_empty() {
        return Err(Error::Empty("aggregate needs at least one bundle".into()));
    }
    if bundles.len() != weights.len() {
        return Err(Error::dim(
            "aggregate",
            format!("{} bundles, {} weights", bundles.len(), weights.len()),
        ));
    }
    let sum: f64 = weights.iter().sum();
    if !((sum - 1.0).abs() <= 1e-9) || weights.iter().any(|w| !(*w >= 0.0)) {
        return Err(Error::Contract(format!(
            "aggregation weights must be >= 0 and sum to 1, got {sum}"
        )));
    }
    let spec = bundles[0].spec();
    let anchor = bundles[0].flatten();
    let mut acc = vec![0.0; anchor.len()];
    for (b, &w) in bundles.iter().zip(weights) {
        if b.spec() != spec {
            return Err(Error::dim("aggregate", "bundle shapes differ"));
        }
        for ((a, p), o) in acc.iter_mut().zip(b.flatten()).zip(&anchor) {
            *a += w * (p - o);
        }
    }
    let flat: Vec<f64> = anchor.iter().zip(&acc).map(|(o, a)| o + a).collect();
    ModelBundle::unflatten(&flat, bundles[0])
}

/// Loss summary for one client in one round.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ClientRoundSummary {
    pub client: usize,
    pub samples: usize,
    pub weight: f64,
    pub steps: usize,
    pub mean_dsm: Option<f64>,
    pub mean_mmd: Option<f64>,
    pub mean_score_loss: Option<f64>,
    pub mean_ce: Option<f64>,
    pub mean_ksd: Option<f64>,
    pub mean_feature_loss: Option<f64>,
    pub max_step_norm: f64,
}

fn mean_of(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let (mut s, mut n) = (0.0, 0usize);
    for v in values.flatten() {
        s += v;
        n += 1;
    }
    (n > 0).then(|| s / n as f64)
}

impl ClientRoundSummary {
    fn from_outcome(client: usize, samples: usize, weight: f64, o: &ClientOutcome) -> Self {
        let r = &o.records;
        ClientRoundSummary {
            client,
            samples,
            weight,
            steps: r.len(),
            mean_dsm: mean_of(r.iter().map(|s| s.score.as_ref().map(|x| x.parts.dsm))),
            mean_mmd: mean_of(r.iter().map(|s| s.score.as_ref().and_then(|x| x.parts.mmd))),
            mean_score_loss: mean_of(r.iter().map(|s| s.score.as_ref().map(|x| x.parts.total))),
            mean_ce: mean_of(r.iter().map(|s| s.feature.as_ref().map(|x| x.parts.ce))),
            mean_ksd: mean_of(r.iter().map(|s| s.feature.as_ref().and_then(|x| x.parts.ksd))),
            mean_feature_loss: mean_of(r.iter().map(|s| s.feature.as_ref().map(|x| x.parts.total))),
            max_step_norm: o.max_step_norm(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub participants: Vec<usize>,
    pub clients: Vec<ClientRoundSummary>,
    pub divergence: DivergenceRecord,
    pub checksum: String,
    pub eval: Option<EvalMetrics>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RoundHistory {
    pub rounds: Vec<RoundRecord>,
}

impl RoundHistory {
    pub fn len(&self) -> usize {
        self.rounds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rounds.is_empty()
    }

    /// Whether the divergence bound held at every round.
    pub fn divergence_holds(&self) -> bool {
        self.rounds.iter().all(|r| r.divergence.holds)
    }
}

/// Clients taking part in `round`: all of them at ratio 1, otherwise
/// `round(ratio·K)` (at least one) drawn without replacement, sorted.
pub fn sample_participants(cfg: &FederationConfig, round: usize) -> Vec<usize> {
    let k = cfg.clients;
    if cfg.participation >= 1.0 {
        return (0..k).collect();
    }
    let m = ((cfg.participation * k as f64).round() as usize).clamp(1, k);
    let mut ids: Vec<usize> = (0..k).collect();
    RngStream::new(cfg.seed, StreamLabel::new("participation").round(round)).shuffle(&mut ids);
    let mut chosen = ids[..m].to_vec();
    chosen.sort_unstable();
    chosen
}

/// Worker count: explicit setting, else `FOOGD_THREADS`, else all cores.
pub fn resolve_threads(explicit: Option<usize>) -> Option<usize> {
    explicit.or_else(|| {
        std::env::var("FOOGD_THREADS")
            .ok()
            .and_then(|v| v.trim().parse::<usize>().ok())
            .filter(|&n| n > 0)
    })
}

#[cfg(feature = "parallel")]
fn run_clients<F>(jobs: &[usize], threads: Option<usize>, f: F) -> Vec<Result<ClientOutcome>>
where
    F: Fn(usize) -> Result<ClientOutcome> + Sync + Send,
{
    use rayon::prelude::*;
    let run = || jobs.par_iter().map(|&k| f(k)).collect();
    match threads {
        Some(1) => jobs.iter().map(|&k| f(k)).collect(),
        Some(n) => match rayon::ThreadPoolBuilder::new().num_threads(n).build() {
            Ok(pool) => pool.install(run),
            Err(_) => jobs.iter().map(|&k| f(k)).collect(),
        },
        None => run(),
    }
}

#[cfg(not(feature = "parallel"))]
fn run_clients<F>(jobs: &[usize], _threads: Option<usize>, f: F) -> Vec<Result<ClientOutcome>>
where
    F: Fn(usize) -> Result<ClientOutcome>,
{
    jobs.iter().map(|&k| f(k)).collect()
}

/// Evaluation callback and schedule for [`run_rounds`].
pub struct EvalSchedule<'a> {
    /// Evaluate after every `every`-th round and after the last one.
    pub every: usize,
    pub eval: &'a (dyn Fn(&ModelBundle) -> Result<EvalMetrics> + Sync),
}

/// Broadcast, local training, and aggregation for `cfg.rounds` rounds.
/// Only participants are aggregated, with weights renormalized over them.
pub fn run_rounds(
    cfg: &FederationConfig,
    partition: &Partition,
    x: &Tensor,
    y: &[usize],
    init: ModelBundle,
    schedule: Option<&EvalSchedule>,
) -> Result<(ModelBundle, RoundHistory)> {
    cfg.validate("federation")?;
    if partition.num_clients() != cfg.clients {
        return Err(Error::config(
            "federation.clients",
            format!(
                "partition has {} clients, config {}",
                partition.num_clients(),
                cfg.clients
            ),
        ));
    }
    partition.validate(x.rows())?;
    if y.len() != x.rows() {
        return Err(Error::dim(
            "run_rounds",
            format!("{} labels for {} rows", y.len(), x.rows()),
        ));
    }
    let threads = resolve_threads(cfg.threads);
    let mut global = init;
    let mut history = RoundHistory::default();
    let mut v_hat: f64 = 0.0;
    let eta = cfg.diagnostic_lr();
    for round in 0..cfg.rounds {
        let participants = sample_participants(cfg, round);
        let sizes: Vec<usize> = participants.iter().map(|&k| partition.clients[k].len()).collect();
        if sizes.iter().all(|&n| n == 0) {
            return Err(Error::Empty(format!("round {round}: no participant holds data")));
        }
        let weights = size_weights(&sizes);
        let states: Vec<ClientState> = participants
            .iter()
            .zip(&weights)
            .map(|(&k, &w)| ClientState {
                id: k,
                indices: partition.clients[k].clone(),
                bundle: global.clone(),
                weight: w,
            })
            .collect();
        let slots: Vec<usize> = (0..states.len()).collect();
        let outcomes = run_clients(&slots, threads, |i| {
            client_update(&states[i], &global, x, y, cfg, round).map_err(|e| match e {
                e @ Error::NonFiniteLoss { .. } => e,
                e => Error::Client {
                    round,
                    client: states[i].id,
                    source: Box::new(e),
                },
            })
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
        let locals: Vec<&ModelBundle> = outcomes.iter().map(|o| &o.bundle).collect();
        let next = aggregate(&locals, &weights)?;
        let steps = participants
            .iter()
            .map(|&k| cfg.local_steps(partition.clients[k].len()))
            .max()
            .unwrap_or(0);
        if eta > 0.0 {
            v_hat = outcomes.iter().map(|o| o.max_step_norm() / eta).fold(v_hat, f64::max);
        }
        let divergence = divergence_diagnostic(&next, &locals, &weights, eta, steps, v_hat)?;
        let clients = states
            .iter()
            .zip(&outcomes)
            .map(|(s, o)| ClientRoundSummary::from_outcome(s.id, s.indices.len(), s.weight, o))
            .collect();
        global = next;
        let eval = match schedule {
            Some(s) if (s.every > 0 && (round + 1) % s.every == 0) || round + 1 == cfg.rounds => {
                Some((s.eval)(&global)?)
            }
            _ => None,
        };
        history.rounds.push(RoundRecord {
            round,
            participants,
            clients,
            divergence,
            checksum: global.checksum(),
            eval,
        });
    }
    Ok((global, history))
}
