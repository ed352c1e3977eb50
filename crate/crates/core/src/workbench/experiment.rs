//! End-to-end runs: data, partition, federated training, evaluation, and
//! artifacts.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, Overrides};
use super::data::{generate_dataset, DatasetBundle};
use super::export::{export_plot_data, PlotData, PointKind};
use crate::detection::{build_report, DetectionReport};
use crate::error::{Error, Result};
use crate::federation::{
    dirichlet_partition, dsm_bound_report, evaluate_weighted, run_rounds, BoundReport, ClientEval, ClientSplit,
    EvalMetrics, EvalSchedule, FederationConfig, Partition, RoundHistory,
};
use crate::models::{init_bundle, save_checkpoint, Mlp, MlpSpec, ModelBundle};
use crate::numerics::{RngStream, StreamLabel, Tensor};
use crate::sag::SagConfig;
use crate::smd::{langevin_sample, mmd_with, resolve_bandwidth};

pub const SCHEMA_VERSION: u32 = 1;

fn stream(seed: u64, purpose: &str) -> RngStream {
    RngStream::new(seed, StreamLabel::new(purpose))
}

/// Data, partition and per-client evaluation splits for one config.
pub struct Prepared {
    pub data: DatasetBundle,
    pub partition: Partition,
    pub splits: Vec<ClientSplit>,
    pub weights: Vec<f64>,
}

pub fn prepare(cfg: &ExperimentConfig) -> Result<Prepared> {
    let d = &cfg.dataset;
    let data = generate_dataset(&d.generator, d.sizes(), d.shift, &stream(cfg.seed, "dataset"))?;
    let partition = dirichlet_partition(
        &data.train.y,
        data.classes,
        cfg.federation.clients,
        cfg.federation.alpha,
        &stream(cfg.seed, "partition"),
    )?;
    let test_idx = partition.apply(&data.test.y, &stream(cfg.seed, "split-test"))?;
    let inc_idx = partition.apply(&data.inc.y, &stream(cfg.seed, "split-inc"))?;
    let splits = test_idx
        .iter()
        .zip(&inc_idx)
        .map(|(t, c)| {
            let (a, b) = (data.test.subset(t), data.inc.subset(c));
            ClientSplit {
                in_x: a.x,
                in_y: a.y,
                inc_x: b.x,
                inc_y: b.y,
            }
        })
        .collect();
    let weights = partition.weights();
    Ok(Prepared {
        data,
        partition,
        splits,
        weights,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DivergenceRound {
    pub round: usize,
    pub lhs: f64,
    pub rhs: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DivergenceSummary {
    pub holds_every_round: bool,
    pub per_round: Vec<DivergenceRound>,
}

impl DivergenceSummary {
    pub fn from_history(h: &RoundHistory) -> Self {
        DivergenceSummary {
            holds_every_round: h.divergence_holds(),
            per_round: h
                .rounds
                .iter()
                .map(|r| DivergenceRound {
                    round: r.round,
                    lhs: r.divergence.lhs,
                    rhs: r.divergence.rhs,
                })
                .collect(),
        }
    }
}

/// Contents of `metrics.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub schema_version: u32,
    pub config_echo: ExperimentConfig,
    pub rounds: usize,
    pub acc_in: f64,
    pub acc_inc: f64,
    pub auroc: f64,
    pub fpr95: f64,
    pub msp_auroc: f64,
    pub msp_fpr95: f64,
    pub divergence: DivergenceSummary,
    pub bound_report: Option<BoundReport>,
    pub model_checksum: String,
    pub per_client: Vec<ClientEval>,
}

impl Metrics {
    fn assemble(
        cfg: &ExperimentConfig,
        eval: &EvalMetrics,
        history: &RoundHistory,
        bound: Option<BoundReport>,
        bundle: &ModelBundle,
    ) -> Metrics {
        Metrics {
            schema_version: SCHEMA_VERSION,
            config_echo: cfg.clone(),
            rounds: history.len(),
            acc_in: eval.acc_in,
            acc_inc: eval.acc_inc,
            auroc: eval.detection.auroc,
            fpr95: eval.detection.fpr95,
            msp_auroc: eval.detection.msp_auroc,
            msp_fpr95: eval.detection.msp_fpr95,
            divergence: DivergenceSummary::from_history(history),
            bound_report: bound,
            model_checksum: bundle.checksum(),
            per_client: eval.per_client.clone(),
        }
    }
}

pub struct ExperimentOutcome {
    pub metrics: Metrics,
    pub history: RoundHistory,
    pub bundle: ModelBundle,
    pub prepared: Prepared,
}

pub fn evaluate(cfg: &ExperimentConfig, prepared: &Prepared, bundle: &ModelBundle) -> Result<EvalMetrics> {
    evaluate_weighted(
        bundle,
        &prepared.splits,
        &prepared.weights,
        &prepared.data.out,
        cfg.smd.sm3d().smallest_sigma(),
        cfg.detection.mode,
    )
}

/// Score-only federated fit on standard-normal latents (identity features),
/// then the error-bound report for the fitted score network. `C` is the
/// largest MMD seen: at initialization or in any round.
pub fn bound_fit(cfg: &ExperimentConfig) -> Result<Option<BoundReport>> {
    let rounds = cfg.detection.bound_rounds;
    if rounds == 0 {
        return Ok(None);
    }
    let d = cfg.models.latent_dim;
    let n = cfg.dataset.train_size.max(2);
    let k = cfg.federation.clients;
    let z = stream(cfg.seed, "bound-data").gaussian(&[n, d]);
    let y: Vec<usize> = (0..n).map(|i| i % 2).collect();
    let clients = (0..k).map(|c| (c..n).step_by(k).collect()).collect();
    let partition = Partition {
        clients,
        proportions: vec![vec![1.0 / k as f64; k]; 2],
        alpha: f64::INFINITY,
        seed: cfg.seed,
    };
    let spec = cfg.models.bundle_spec(d, 2);
    let bundle = ModelBundle {
        feature: Mlp::identity(d)?,
        head: Mlp::zeros(&MlpSpec::new(&[d, 2], cfg.models.activation))?,
        score: Mlp::init(&spec.score, &mut stream(cfg.seed, "bound-init"))?,
    };
    let fcfg = FederationConfig {
        rounds,
        participation: 1.0,
        update_features: false,
        sag: SagConfig {
            lambda_a: 0.0,
            ..cfg.sag.clone()
        },
        ..cfg.federation_config()
    };
    let sigma = fcfg.smd.smallest_sigma();
    let b = fcfg.batch_size.min(n);
    let mut st = stream(cfg.seed, "bound-mmd");
    let gen = langevin_sample(&bundle.score, b, &fcfg.langevin, &mut st)?;
    let head = z.select_rows(&(0..b).collect::<Vec<_>>());
    let h = resolve_bandwidth(fcfg.smd.bandwidth, &head, &gen)?;
    let c_init = mmd_with(&head, &gen, h, fcfg.smd.estimator)?;
    let (fitted, history) = run_rounds(&fcfg, &partition, &z, &y, bundle, None)?;
    let c = history
        .rounds
        .iter()
        .flat_map(|r| r.clients.iter().filter_map(|c| c.mean_mmd))
        .fold(c_init, f64::max);
    let report = dsm_bound_report(
        &fitted.score,
        sigma,
        b,
        n,
        c,
        cfg.detection.bound_samples,
        &mut stream(cfg.seed, "bound-report"),
    )?;
    Ok(Some(report))
}

/// Runs the configured experiment without touching the file system.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutcome> {
    cfg.validate()?;
    let prepared = prepare(cfg)?;
    let spec = cfg.models.bundle_spec(prepared.data.input_dim, prepared.data.classes);
    let init = init_bundle(&spec, &mut stream(cfg.seed, "init"))?;
    let fcfg = cfg.federation_config();
    let eval_fn = |b: &ModelBundle| evaluate(cfg, &prepared, b);
    let schedule = EvalSchedule {
        every: cfg.detection.eval_every,
        eval: &eval_fn,
    };
    let (bundle, history) = run_rounds(
        &fcfg,
        &prepared.partition,
        &prepared.data.train.x,
        &prepared.data.train.y,
        init,
        Some(&schedule),
    )?;
    let eval = match history.rounds.last().and_then(|r| r.eval.clone()) {
        Some(e) => e,
        None => evaluate(cfg, &prepared, &bundle)?,
    };
    let bound = bound_fit(cfg)?;
    let metrics = Metrics::assemble(cfg, &eval, &history, bound, &bundle);
    Ok(ExperimentOutcome {
        metrics,
        history,
        bundle,
        prepared,
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Serde(e.to_string()))?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

/// Detection report over the pooled held-out sets, used for plots.
pub fn pooled_report(cfg: &ExperimentConfig, prepared: &Prepared, bundle: &ModelBundle) -> Result<DetectionReport> {
    let d = &prepared.data;
    build_report(bundle, &d.test.x, &d.inc.x, &d.out, cfg.smd.sm3d().smallest_sigma())
}

/// Latent scatter, field and norm files for a trained bundle.
pub fn write_plots(
    cfg: &ExperimentConfig,
    prepared: &Prepared,
    bundle: &ModelBundle,
    dir: &Path,
) -> Result<Vec<PathBuf>> {
    let d = &prepared.data;
    let target = bundle.forward_features(&d.train.x)?;
    let lcfg = cfg.smd.langevin;
    let generated = langevin_sample(
        &bundle.score,
        cfg.output.generated,
        &lcfg,
        &mut stream(cfg.seed, "plot-langevin"),
    )?;
    let zin = bundle.forward_features(&d.test.x)?;
    let zinc = bundle.forward_features(&d.inc.x)?;
    let zout = bundle.forward_features(&d.out)?;
    let report = pooled_report(cfg, prepared, bundle)?;
    let points: Vec<(PointKind, &Tensor)> = vec![
        (PointKind::Target, &target),
        (PointKind::Generated, &generated),
        (PointKind::In, &zin),
        (PointKind::Inc, &zinc),
        (PointKind::Out, &zout),
    ];
    export_plot_data(
        &PlotData {
            points,
            score: &bundle.score,
            sigma: cfg.smd.sm3d().smallest_sigma(),
            grid: cfg.output.grid,
            report: Some(&report),
            svg: cfg.output.svg,
        },
        dir,
    )
}

/// Writes `metrics.json`, `history.json`, `checkpoint.json` and plot files.
pub fn write_artifacts(cfg: &ExperimentConfig, outcome: &ExperimentOutcome) -> Result<Vec<PathBuf>> {
    let dir = &cfg.output.dir;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = Vec::new();
    let p = dir.join("metrics.json");
    write_json(&p, &outcome.metrics)?;
    files.push(p);
    let p = dir.join("history.json");
    write_json(&p, &outcome.history)?;
    files.push(p);
    if cfg.output.checkpoint {
        let p = dir.join("checkpoint.json");
        save_checkpoint(&p, &outcome.bundle)?;
        files.push(p);
    }
    if cfg.output.plots {
        files.extend(write_plots(cfg, &outcome.prepared, &outcome.bundle, dir)?);
    }
    Ok(files)
}

/// Loads, overrides, validates, runs and writes artifacts.
pub fn run_experiment_file(path: &Path, overrides: &Overrides) -> Result<(ExperimentOutcome, Vec<PathBuf>)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut cfg = ExperimentConfig::from_toml_str(&text, &path.display().to_string())?;
    cfg.apply(overrides);
    cfg.validate()?;
    let outcome = run_experiment(&cfg)?;
    let files = write_artifacts(&cfg, &outcome)?;
    Ok((outcome, files))
}
