//! The 2-d density-estimation sweep: a score network trained directly on
//! data coordinates for several `λ_m`, scored by the MMD between Langevin
//! samples and held-out target points.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::data::{sample_in, GeneratorSpec};
use super::export::{export_plot_data, PlotData, PointKind};
use crate::error::{Error, Result};
use crate::federation::{dirichlet_partition, run_rounds, FederationConfig};
use crate::models::{Activation, Mlp, MlpSpec, ModelBundle};
use crate::numerics::{RngStream, SgdConfig, StreamLabel, Tensor};
use crate::sag::SagConfig;
use crate::smd::{
    langevin_sample, mmd_with, resolve_bandwidth, Backprop, Bandwidth, Estimator, LangevinConfig, Sm3dConfig,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyConfig {
    pub generator: GeneratorSpec,
    pub train_size: usize,
    pub heldout_size: usize,
    /// Langevin samples compared against the held-out set.
    pub samples: usize,
    pub lambda_ms: Vec<f64>,
    pub seeds: Vec<u64>,
    pub clients: usize,
    pub rounds: usize,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub score_sgd: SgdConfig,
    pub sigmas: Vec<f64>,
    pub bandwidth: Bandwidth,
    pub estimator: Estimator,
    pub langevin: LangevinConfig,
    pub score_hidden: Vec<usize>,
    pub activation: Activation,
    pub threads: Option<usize>,
}

impl Default for ToyConfig {
    /// Tuned for a single CPU: a smoothed target (σ = 0.5) with a sampler
    /// long enough to reach the ring, so the MMD term shapes the chain.
    fn default() -> Self {
        ToyConfig {
            generator: GeneratorSpec::default(),
            train_size: 1024,
            heldout_size: 2048,
            samples: 2048,
            lambda_ms: vec![0.0, 0.1, 1.0],
            seeds: (0..5).collect(),
            clients: 1,
            rounds: 60,
            local_epochs: 2,
            batch_size: 64,
            score_sgd: SgdConfig {
                lr: 1e-3,
                momentum: 0.9,
                weight_decay: 0.0,
            },
            sigmas: vec![0.5],
            bandwidth: Bandwidth::Median,
            estimator: Estimator::VStatistic,
            langevin: LangevinConfig {
                steps: 20,
                step_size: 0.2,
                sigma: 0.5,
                backprop: Backprop::FullChain,
            },
            score_hidden: vec![64, 64],
            activation: Activation::Tanh,
            threads: None,
        }
    }
}

impl ToyConfig {
    /// Takes the generator, MMD settings and seed from an experiment config.
    /// Noise level, sampler and optimizer stay at the toy defaults: the
    /// latent-space values are far too aggressive for raw ring coordinates.
    pub fn from_experiment(cfg: &ExperimentConfig) -> ToyConfig {
        ToyConfig {
            generator: cfg.dataset.generator.clone(),
            bandwidth: cfg.smd.bandwidth,
            estimator: cfg.smd.estimator,
            activation: cfg.models.activation,
            threads: cfg.federation.threads,
            seeds: (0..5).map(|i| cfg.seed + i).collect(),
            ..ToyConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.lambda_ms.is_empty() || self.lambda_ms.iter().any(|l| !(0.0..=1.0).contains(l)) {
            return Err(Error::config("toy.lambda_ms", "need values in [0, 1]"));
        }
        if self.seeds.is_empty() {
            return Err(Error::config("toy.seeds", "need at least one seed"));
        }
        if self.train_size < 2 || self.heldout_size < 2 || self.samples < 2 {
            return Err(Error::config(
                "toy",
                "train_size, heldout_size and samples must be >= 2",
            ));
        }
        self.generator.validate("toy.generator")?;
        if matches!(self.generator, GeneratorSpec::Csv { .. }) {
            return Err(Error::config(
                "toy.generator",
                "the toy sweep needs a synthetic generator",
            ));
        }
        self.federation(0.0, 0).validate("toy")
    }

    fn federation(&self, lambda_m: f64, seed: u64) -> FederationConfig {
        FederationConfig {
            clients: self.clients,
            rounds: self.rounds,
            local_epochs: self.local_epochs,
            batch_size: self.batch_size,
            participation: 1.0,
            feature_sgd: SgdConfig::plain(0.0),
            score_sgd: self.score_sgd,
            smd: Sm3dConfig {
                lambda_m,
                sigmas: self.sigmas.clone(),
                bandwidth: self.bandwidth,
                estimator: self.estimator,
            },
            langevin: self.langevin,
            sag: SagConfig {
                lambda_a: 0.0,
                ..SagConfig::default()
            },
            update_score: true,
            update_features: false,
            seed,
            threads: self.threads,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyRun {
    pub lambda_m: f64,
    pub seed: u64,
    pub mmd: f64,
    pub bandwidth: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyMedian {
    pub lambda_m: f64,
    pub median_mmd: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyReport {
    pub runs: Vec<ToyRun>,
    pub medians: Vec<ToyMedian>,
}

impl ToyReport {
    pub fn median_for(&self, lambda_m: f64) -> Option<f64> {
        self.medians
            .iter()
            .find(|m| m.lambda_m == lambda_m)
            .map(|m| m.median_mmd)
    }
}

pub struct ToyFit {
    pub bundle: ModelBundle,
    pub target: Tensor,
    pub heldout: Tensor,
    pub generated: Tensor,
    pub run: ToyRun,
}

/// Trains one score network on the ring for a given `λ_m` and seed. The data
/// depend only on the seed, so runs across `λ_m` are paired.
pub fn toy_fit(cfg: &ToyConfig, lambda_m: f64, seed: u64) -> Result<ToyFit> {
    let st = |p: &str| RngStream::new(seed, StreamLabel::new("toy").with(p, 0));
    let train = sample_in(&cfg.generator, cfg.train_size, &mut st("train"))?;
    let heldout = sample_in(&cfg.generator, cfg.heldout_size, &mut st("heldout"))?.x;
    let classes = cfg.generator.classes().unwrap_or(2);
    let fcfg = cfg.federation(lambda_m, seed);
    let partition = dirichlet_partition(&train.y, classes, cfg.clients, 1e6, &st("partition"))?;
    let mut widths = vec![3];
    widths.extend_from_slice(&cfg.score_hidden);
    widths.push(2);
    let init = ModelBundle {
        feature: Mlp::identity(2)?,
        head: Mlp::zeros(&MlpSpec::new(&[2, classes], cfg.activation))?,
        score: Mlp::init(&MlpSpec::new(&widths, cfg.activation), &mut st("init"))?,
    };
    let (bundle, _) = run_rounds(&fcfg, &partition, &train.x, &train.y, init, None)?;
    let generated = langevin_sample(&bundle.score, cfg.samples, &cfg.langevin, &mut st("sample"))?;
    let h = resolve_bandwidth(Bandwidth::Median, &generated, &heldout)?;
    let mmd = if generated.all_finite() {
        mmd_with(&generated, &heldout, h, Estimator::VStatistic)?
    } else {
        f64::INFINITY
    };
    Ok(ToyFit {
        bundle,
        target: train.x,
        heldout,
        generated,
        run: ToyRun {
            lambda_m,
            seed,
            mmd,
            bandwidth: h,
        },
    })
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    (v[(n - 1) / 2] + v[n / 2]) / 2.0
}

/// Runs every `(λ_m, seed)` pair. With `out`, writes `toy.json` and plot
/// files for the first seed of each `λ_m` under `out/lambda_<λ>/`.
pub fn run_toy2d(cfg: &ToyConfig, out: Option<&Path>) -> Result<(ToyReport, Vec<PathBuf>)> {
    cfg.validate()?;
    let mut runs = Vec::new();
    let mut files = Vec::new();
    for &lambda_m in &cfg.lambda_ms {
        for (i, &seed) in cfg.seeds.iter().enumerate() {
            let fit = toy_fit(cfg, lambda_m, seed)?;
            if let (Some(dir), 0) = (out, i) {
                let sub = dir.join(format!("lambda_{lambda_m}"));
                files.extend(export_plot_data(
                    &PlotData {
                        points: vec![
                            (PointKind::Target, &fit.heldout),
                            (PointKind::Generated, &fit.generated),
                        ],
                        score: &fit.bundle.score,
                        sigma: cfg.sigmas.iter().copied().fold(f64::INFINITY, f64::min),
                        grid: 25,
                        report: None,
                        svg: true,
                    },
                    &sub,
                )?);
            }
            runs.push(fit.run);
        }
    }
    let medians = cfg
        .lambda_ms
        .iter()
        .map(|&l| ToyMedian {
            lambda_m: l,
            median_mmd: median(runs.iter().filter(|r| r.lambda_m == l).map(|r| r.mmd).collect()),
        })
        .collect();
    let report = ToyReport { runs, medians };
    if let Some(dir) = out {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let p = dir.join("toy.json");
        let text = serde_json::to_string_pretty(&report).map_err(|e| Error::Serde(e.to_string()))?;
        std::fs::write(&p, text + "\n").map_err(|e| Error::io(&p, e))?;
        files.push(p);
    }
    Ok((report, files))
}
