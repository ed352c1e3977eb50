//! Finite-difference checks of every training loss on small instances.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::models::{init_bundle, Activation, BoundMlp, BundleSpec, Mlp, MlpSpec};
use crate::numerics::{check_gradients, GradCheckConfig, GradCheckReport, RngStream, StreamLabel, Var};
use crate::sag::{ksd_term, sag_objective, AugmentSpec, SagConfig};
use crate::smd::{dsm_term, mmd_term, sm3d_objective, Backprop, Bandwidth, Estimator, LangevinConfig, Sm3dConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteResult {
    pub name: String,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub checked: usize,
    pub passed: bool,
}

impl SuiteResult {
    fn new(name: &str, report: GradCheckReport, tolerance: f64) -> SuiteResult {
        SuiteResult {
            name: name.to_string(),
            max_rel_err: report.max_rel_err,
            tolerance,
            checked: report.checked,
            passed: report.passes(tolerance),
        }
    }
}

/// Tolerance for losses without a Langevin chain.
pub const DIRECT_TOL: f64 = 1e-5;
/// Tolerance for losses differentiated through a Langevin chain.
pub const CHAIN_TOL: f64 = 1e-4;

const BATCH: usize = 8;
const LATENT: usize = 2;

fn spec() -> BundleSpec {
    BundleSpec {
        feature: MlpSpec::new(&[2, 6, LATENT], Activation::Tanh),
        head: MlpSpec::new(&[LATENT, 3], Activation::Tanh),
        score: MlpSpec::new(&[LATENT + 1, 8, 8, LATENT], Activation::Tanh),
    }
}

fn split<'a, 't>(vars: &'a [Var<'t>], sizes: &[usize]) -> Vec<&'a [Var<'t>]> {
    let mut out = Vec::new();
    let mut start = 0;
    for &n in sizes {
        out.push(&vars[start..start + n]);
        start += n;
    }
    out
}

/// Runs every suite; each entry reports the worst relative error found.
pub fn run_gradient_suites(seed: u64) -> Result<Vec<SuiteResult>> {
    let st = |p: &str| RngStream::new(seed, StreamLabel::new("gradcheck").with(p, 0));
    let cfg = GradCheckConfig {
        abs_tol: 1e-12,
        ..GradCheckConfig::default()
    };
    let spec = spec();
    let bundle = init_bundle(&spec, &mut st("init"))?;
    let x = st("x").gaussian(&[BATCH, 2]);
    let labels: Vec<usize> = (0..BATCH).map(|i| i % 3).collect();
    let z = st("z").gaussian(&[BATCH, LATENT]);
    let mut out = Vec::new();

    // generic three-layer network with a nonlinear scalar loss
    let mlp_spec = MlpSpec::new(&[3, 5, 4, 2], Activation::Tanh);
    let mlp = Mlp::init(&mlp_spec, &mut st("mlp"))?;
    let mut inputs = mlp.param_tensors();
    inputs.push(st("mx").gaussian(&[4, 3]));
    let r = check_gradients(&inputs, cfg, |_, v| {
        let net = BoundMlp::from_vars(&mlp_spec, &v[..6])?;
        let y = net.forward(v[6])?;
        y.tanh().square().mean().add(y.exp().mean())
    })?;
    out.push(SuiteResult::new("mlp-random-loss", r, DIRECT_TOL));

    // classification loss through feature extractor and head
    let nf = spec.feature.widths.len() * 2 - 2;
    let mut inputs = bundle.feature.param_tensors();
    inputs.extend(bundle.head.param_tensors());
    let r = check_gradients(&inputs, cfg, |t, v| {
        let parts = split(v, &[nf, 2]);
        let f = BoundMlp::from_vars(&spec.feature, parts[0])?;
        let g = BoundMlp::from_vars(&spec.head, parts[1])?;
        g.forward(f.forward(t.constant(x.clone()))?)?.cross_entropy(&labels)
    })?;
    out.push(SuiteResult::new("cross-entropy", r, DIRECT_TOL));

    // denoising score matching
    let score_params = bundle.score.param_tensors();
    let r = check_gradients(&score_params, cfg, |t, v| {
        let s = BoundMlp::from_vars(&spec.score, v)?;
        dsm_term(t, &s, &z, 0.1, &mut st("dsm"))
    })?;
    out.push(SuiteResult::new("dsm", r, DIRECT_TOL));

    // MMD with respect to both sample sets
    let y = st("y").gaussian(&[BATCH - 2, LATENT]).map(|v| v + 0.5);
    let r = check_gradients(&[z.clone(), y], cfg, |t, v| {
        mmd_term(t, v[0], v[1], 1.3, Estimator::VStatistic)
    })?;
    out.push(SuiteResult::new("mmd", r, DIRECT_TOL));

    // (1 − λ_m)·DSM + λ_m·MMD through a five-step Langevin chain
    let smd = Sm3dConfig {
        lambda_m: 0.5,
        sigmas: vec![0.1],
        bandwidth: Bandwidth::Fixed(2.0),
        estimator: Estimator::VStatistic,
    };
    let lcfg = LangevinConfig {
        steps: 5,
        step_size: 0.01,
        sigma: 0.1,
        backprop: Backprop::FullChain,
    };
    let r = check_gradients(&score_params, cfg, |t, v| {
        let s = BoundMlp::from_vars(&spec.score, v)?;
        Ok(sm3d_objective(t, &s, &bundle.score, &z, &smd, &lcfg, &st("sm3d"))?.0)
    })?;
    out.push(SuiteResult::new("sm3d-full-chain", r, CHAIN_TOL));

    // Stein kernel statistic with respect to scores and points
    let s = st("s").gaussian(&[BATCH, LATENT]);
    let r = check_gradients(&[s, z.clone()], cfg, |t, v| {
        ksd_term(t, v[0], v[1], 1.7, Estimator::UStatistic)
    })?;
    out.push(SuiteResult::new("stein-kernel", r, DIRECT_TOL));

    // CE + λ_a·KSD with respect to feature and head parameters
    let sag = SagConfig {
        lambda_a: 0.5,
        augment: AugmentSpec::RandomRotation { max_degrees: 20.0 },
        bandwidth: Bandwidth::Fixed(1.5),
        estimator: Estimator::UStatistic,
    };
    let r = check_gradients(&inputs, cfg, |t, v| {
        let parts = split(v, &[nf, 2]);
        let f = BoundMlp::from_vars(&spec.feature, parts[0])?;
        let g = BoundMlp::from_vars(&spec.head, parts[1])?;
        let s = bundle.score.bind(t, false);
        Ok(sag_objective(t, &f, &g, &s, &x, &labels, &sag, 0.1, &st("sag"))?.0)
    })?;
    out.push(SuiteResult::new("sag-total", r, DIRECT_TOL));
    Ok(out)
}
