//! Score-model density estimation: denoising score matching on perturbed
//! latents, Langevin sampling from the learned field, and an MMD term that
//! pulls the sampled latents onto the data.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{forward_score_var, BoundMlp, Mlp, ModelBundle, ScoreField};
use crate::numerics::{sgd_step, Primitive, PrimitiveHandle, RngStream, SgdConfig, SgdState, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Backprop {
    /// Differentiate through every step; injected noise is constant.
    FullChain,
    /// Treat generated samples as constants.
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LangevinConfig {
    pub steps: usize,
    pub step_size: f64,
    pub sigma: f64,
    pub backprop: Backprop,
}

impl Default for LangevinConfig {
    fn default() -> Self {
        LangevinConfig {
            steps: 20,
            step_size: 0.01,
            sigma: 0.1,
            backprop: Backprop::FullChain,
        }
    }
}

impl LangevinConfig {
    pub fn validate(&self, path: &str) -> Result<()> {
        if self.steps < 1 {
            return Err(Error::config(format!("{path}.steps"), "must be >= 1"));
        }
        if !(self.step_size >= 0.0 && self.step_size.is_finite()) {
            return Err(Error::config(format!("{path}.step_size"), "must be >= 0"));
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::config(format!("{path}.sigma"), "must be > 0"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Bandwidth {
    Median,
    Fixed(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Estimator {
    /// all pairs, diagonal included
    VStatistic,
    /// distinct pairs only
    UStatistic,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Sm3dConfig {
    pub lambda_m: f64,
    pub sigmas: Vec<f64>,
    pub bandwidth: Bandwidth,
    pub estimator: Estimator,
}

impl Default for Sm3dConfig {
    fn default() -> Self {
        Sm3dConfig {
            lambda_m: 0.5,
            sigmas: vec![0.1],
            bandwidth: Bandwidth::Median,
            estimator: Estimator::VStatistic,
        }
    }
}

impl Sm3dConfig {
    /// `count` noise levels from `largest` down to `smallest`, geometrically spaced.
    pub fn geometric_sigmas(largest: f64, smallest: f64, count: usize) -> Vec<f64> {
        if count <= 1 {
            return vec![smallest];
        }
        let ratio = (smallest / largest).powf(1.0 / (count - 1) as f64);
        (0..count).map(|i| largest * ratio.powi(i as i32)).collect()
    }

    pub fn smallest_sigma(&self) -> f64 {
        self.sigmas.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn validate(&self, path: &str) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda_m) {
            return Err(Error::config(format!("{path}.lambda_m"), "must lie in [0, 1]"));
        }
        if self.sigmas.is_empty() || self.sigmas.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
            return Err(Error::config(
                format!("{path}.sigmas"),
                "need one or more positive values",
            ));
        }
        if let Bandwidth::Fixed(h) = self.bandwidth {
            if !(h > 0.0 && h.is_finite()) {
                return Err(Error::config(
                    format!("{path}.bandwidth"),
                    "fixed bandwidth must be > 0",
                ));
            }
        }
        Ok(())
    }
}

fn check_sigma(op: &'static str, sigma: f64) -> Result<()> {
    if sigma > 0.0 && sigma.is_finite() {
        Ok(())
    } else {
        Err(Error::domain(op, format!("noise scale {sigma} must be > 0")))
    }
}

/// Draws `V ~ N(0, I)` and returns `(Z + σV, V)`.
pub fn perturb(z: &Tensor, sigma: f64, stream: &mut RngStream) -> Result<(Tensor, Tensor)> {
    check_sigma("perturb", sigma)?;
    let v = stream.gaussian(z.shape());
    let data = z.data().iter().zip(v.data()).map(|(a, b)| a + sigma * b).collect();
    Ok((Tensor::new(z.shape().to_vec(), data)?, v))
}

fn dsm_target(v: &Tensor, sigma: f64) -> Tensor {
    let inv = 1.0 / sigma;
    v.map(|x| -x * inv)
}

/// `½ · mean_b ‖s(z̃, σ) + v/σ‖²` for any score field.
pub fn dsm_loss<S: ScoreField + ?Sized>(score: &S, z: &Tensor, sigma: f64, stream: &mut RngStream) -> Result<f64> {
    if z.rows() == 0 {
        return Err(Error::Empty("dsm batch".into()));
    }
    let (zt, v) = perturb(z, sigma, stream)?;
    let s = score.score(&zt, sigma)?;
    let target = dsm_target(&v, sigma);
    let sq: f64 = s.data().iter().zip(target.data()).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(sq * (0.5 / z.rows() as f64))
}

/// Tape form of [`dsm_loss`] for a bound score network.
pub fn dsm_term<'t>(
    tape: &'t Tape,
    score: &BoundMlp<'t>,
    z: &Tensor,
    sigma: f64,
    stream: &mut RngStream,
) -> Result<Var<'t>> {
    if z.rows() == 0 {
        return Err(Error::Empty("dsm batch".into()));
    }
    let (zt, v) = perturb(z, sigma, stream)?;
    let s = forward_score_var(tape, score, tape.constant(zt), sigma)?;
    let target = tape.constant(dsm_target(&v, sigma));
    Ok(s.sub(target)?.square().sum().scale(0.5 / z.rows() as f64))
}

/// Unweighted mean of the DSM term over all noise levels.
pub fn multi_sigma_dsm_term<'t>(
    tape: &'t Tape,
    score: &BoundMlp<'t>,
    z: &Tensor,
    sigmas: &[f64],
    stream: &RngStream,
) -> Result<Var<'t>> {
    let mut total: Option<Var<'t>> = None;
    for (i, &sigma) in sigmas.iter().enumerate() {
        let term = dsm_term(tape, score, z, sigma, &mut stream.fork("dsm", i as u64))?;
        total = Some(match total {
            None => term,
            Some(acc) => acc.add(term)?,
        });
    }
    let total = total.ok_or_else(|| Error::Empty("noise level list".into()))?;
    Ok(if sigmas.len() == 1 {
        total
    } else {
        total.scale(1.0 / sigmas.len() as f64)
    })
}

/// Starting points and per-step injected noise of one Langevin chain.
#[derive(Clone, Debug)]
pub struct LangevinNoise {
    pub start: Tensor,
    pub steps: Vec<Tensor>,
}

impl LangevinNoise {
    pub fn draw(stream: &mut RngStream, batch: usize, dim: usize, steps: usize) -> Self {
        let start = stream.gaussian(&[batch, dim]);
        let steps = (0..steps).map(|_| stream.gaussian(&[batch, dim])).collect();
        LangevinNoise { start, steps }
    }
}

/// Runs `z ← z + (ε/2)·s(z, σ) + √ε·w` from the given noise.
pub fn langevin_from<S: ScoreField + ?Sized>(score: &S, noise: &LangevinNoise, cfg: &LangevinConfig) -> Result<Tensor> {
    let half = cfg.step_size / 2.0;
    let root = cfg.step_size.sqrt();
    let mut z = noise.start.clone();
    for (t, w) in noise.steps.iter().enumerate() {
        let s = score.score(&z, cfg.sigma)?;
        let data = z
            .data()
            .iter()
            .zip(s.data())
            .zip(w.data())
            .map(|((zv, sv), wv)| (zv + sv * half) + wv * root)
            .collect();
        z = Tensor::new(z.shape().to_vec(), data)?;
        if !z.all_finite() {
            return Err(Error::DivergedChain { step: t + 1 });
        }
    }
    Ok(z)
}

/// `T`-step Langevin sampling from `z⁰ ~ N(0, I)`.
pub fn langevin_sample<S: ScoreField + ?Sized>(
    score: &S,
    batch: usize,
    cfg: &LangevinConfig,
    stream: &mut RngStream,
) -> Result<Tensor> {
    cfg.validate("langevin")?;
    let noise = LangevinNoise::draw(stream, batch, score.dim(), cfg.steps);
    langevin_from(score, &noise, cfg)
}

/// The Langevin chain recorded on a tape (full-chain mode) or evaluated
/// off-tape and inserted as a constant.
pub fn langevin_chain<'t>(
    tape: &'t Tape,
    bound: &BoundMlp<'t>,
    score: &Mlp,
    noise: &LangevinNoise,
    cfg: &LangevinConfig,
) -> Result<Var<'t>> {
    match cfg.backprop {
        Backprop::None => Ok(tape.constant(langevin_from(score, noise, cfg)?)),
        Backprop::FullChain => {
            let half = cfg.step_size / 2.0;
            let root = cfg.step_size.sqrt();
            let mut z = tape.constant(noise.start.clone());
            for (t, w) in noise.steps.iter().enumerate() {
                let s = forward_score_var(tape, bound, z, cfg.sigma)?;
                let kick = tape.constant(w.map(|v| v * root));
                z = z.add(s.scale(half))?.add(kick)?;
                if !z.value().all_finite() {
                    return Err(Error::DivergedChain { step: t + 1 });
                }
            }
            Ok(z)
        }
    }
}

/// Median of pairwise squared distances; 1 when every point coincides.
pub fn median_bandwidth(points: &Tensor) -> f64 {
    let n = points.rows();
    if n < 2 {
        return 1.0;
    }
    let mut d2 = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        let a = points.row(i);
        for j in i + 1..n {
            d2.push(sq_dist(a, points.row(j)));
        }
    }
    let m = d2.len();
    let h = if m % 2 == 1 {
        *d2.select_nth_unstable_by(m / 2, f64::total_cmp).1
    } else {
        let hi = *d2.select_nth_unstable_by(m / 2, f64::total_cmp).1;
        let lo = d2[..m / 2].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        0.5 * (lo + hi)
    };
    if h > 0.0 && h.is_finite() {
        h
    } else {
        1.0
    }
}

pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Mean Gaussian kernel `exp(−‖x − y‖²/h)` between two point sets.
///
/// The sum is accumulated in row order and in column order and the two are
/// averaged, which makes the result bitwise symmetric in its arguments.
#[derive(Clone, Copy, Debug)]
pub struct KernelMean {
    pub h: f64,
    pub exclude_diagonal: bool,
}

impl KernelMean {
    fn count(&self, n: usize, m: usize) -> f64 {
        if self.exclude_diagonal {
            (n * (n - 1)) as f64
        } else {
            (n * m) as f64
        }
    }

    pub fn value(&self, x: &Tensor, y: &Tensor) -> Result<f64> {
        let (n, m) = (x.rows(), y.rows());
        if n == 0 || m == 0 {
            return Err(Error::Empty("kernel mean over an empty set".into()));
        }
        if x.cols() != y.cols() {
            return Err(Error::dim("kernel_mean", format!("{:?} vs {:?}", x.shape(), y.shape())));
        }
        if self.exclude_diagonal && (n != m || n < 2) {
            return Err(Error::Contract("U-statistic needs one set of >= 2 points".into()));
        }
        let mut by_row = 0.0;
        let mut cols = vec![0.0; m];
        for i in 0..n {
            let xi = x.row(i);
            let mut acc = 0.0;
            for (j, c) in cols.iter_mut().enumerate() {
                if self.exclude_diagonal && i == j {
                    continue;
                }
                let k = (-sq_dist(xi, y.row(j)) / self.h).exp();
                acc += k;
                *c += k;
            }
            by_row += acc;
        }
        let by_col: f64 = cols.iter().sum();
        Ok(0.5 * (by_row + by_col) / self.count(n, m))
    }
}

impl Primitive for KernelMean {
    fn name(&self) -> &str {
        "gaussian_kernel_mean"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        Ok(Tensor::scalar(self.value(inputs[0], inputs[1])?))
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Tensor> {
        let (x, y) = (inputs[0], inputs[1]);
        let (n, m, d) = (x.rows(), y.rows(), x.cols());
        let a = 2.0 / self.h;
        let scale = grad.item() / self.count(n, m);
        let mut gx = Tensor::zeros(x.shape());
        let mut gy = Tensor::zeros(y.shape());
        for i in 0..n {
            for j in 0..m {
                if self.exclude_diagonal && i == j {
                    continue;
                }
                let (xi, yj) = (x.row(i), y.row(j));
                let k = (-sq_dist(xi, yj) / self.h).exp();
                let c = scale * a * k;
                for l in 0..d {
                    let diff = xi[l] - yj[l];
                    gx.row_mut(i)[l] -= c * diff;
                    gy.row_mut(j)[l] += c * diff;
                }
            }
        }
        vec![gx, gy]
    }
}

fn check_bandwidth(h: f64) -> Result<()> {
    if h > 0.0 && h.is_finite() {
        Ok(())
    } else {
        Err(Error::domain("mmd", format!("bandwidth {h} must be > 0")))
    }
}

/// Squared MMD between two point sets with a Gaussian kernel of bandwidth `h`.
pub fn mmd_with(x: &Tensor, y: &Tensor, h: f64, estimator: Estimator) -> Result<f64> {
    check_bandwidth(h)?;
    let same = KernelMean {
        h,
        exclude_diagonal: estimator == Estimator::UStatistic,
    };
    let cross = KernelMean {
        h,
        exclude_diagonal: false,
    };
    let kxx = same.value(x, x)?;
    let kyy = same.value(y, y)?;
    let kxy = cross.value(x, y)?;
    Ok((kxx + kyy) - kxy * 2.0)
}

/// V-statistic MMD.
pub fn mmd(x: &Tensor, y: &Tensor, h: f64) -> Result<f64> {
    mmd_with(x, y, h, Estimator::VStatistic)
}

/// Tape form of [`mmd_with`], differentiable in both sets.
pub fn mmd_term<'t>(tape: &'t Tape, x: Var<'t>, y: Var<'t>, h: f64, estimator: Estimator) -> Result<Var<'t>> {
    check_bandwidth(h)?;
    let same: PrimitiveHandle = Arc::new(KernelMean {
        h,
        exclude_diagonal: estimator == Estimator::UStatistic,
    });
    let cross: PrimitiveHandle = Arc::new(KernelMean {
        h,
        exclude_diagonal: false,
    });
    let kxx = tape.apply(&same, &[x, x])?;
    let kyy = tape.apply(&same, &[y, y])?;
    let kxy = tape.apply(&cross, &[x, y])?;
    kxx.add(kyy)?.sub(kxy.scale(2.0))
}

pub fn resolve_bandwidth(policy: Bandwidth, x: &Tensor, y: &Tensor) -> Result<f64> {
    match policy {
        Bandwidth::Fixed(h) => Ok(h),
        Bandwidth::Median => Ok(median_bandwidth(&Tensor::concat_rows(&[x, y])?)),
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Sm3dParts {
    pub dsm: f64,
    /// `None` when `λ_m = 0` and the chain was skipped.
    pub mmd: Option<f64>,
    pub total: f64,
    pub bandwidth: Option<f64>,
}

/// Builds `(1 − λ_m)·DSM + λ_m·MMD(Z, Z_gen)` on `tape`. The latents enter
/// as constants; only the score network bound in `bound` receives gradients.
pub fn sm3d_objective<'t>(
    tape: &'t Tape,
    bound: &BoundMlp<'t>,
    score: &Mlp,
    z: &Tensor,
    cfg: &Sm3dConfig,
    lcfg: &LangevinConfig,
    stream: &RngStream,
) -> Result<(Var<'t>, Sm3dParts)> {
    let dsm = multi_sigma_dsm_term(tape, bound, z, &cfg.sigmas, stream)?;
    let dsm_value = dsm.value().item();
    if cfg.lambda_m == 0.0 {
        let total = dsm.scale(1.0);
        let parts = Sm3dParts {
            dsm: dsm_value,
            mmd: None,
            total: total.value().item(),
            bandwidth: None,
        };
        return Ok((total, parts));
    }
    if z.rows() < 2 && cfg.estimator == Estimator::UStatistic {
        // the U-statistic needs two points; the MMD term contributes nothing
        let total = dsm.scale(1.0 - cfg.lambda_m);
        let parts = Sm3dParts {
            dsm: dsm_value,
            mmd: None,
            total: total.value().item(),
            bandwidth: None,
        };
        return Ok((total, parts));
    }
    let noise = LangevinNoise::draw(&mut stream.fork("langevin", 0), z.rows(), z.cols(), lcfg.steps);
    let generated = langevin_chain(tape, bound, score, &noise, lcfg)?;
    let h = resolve_bandwidth(cfg.bandwidth, z, &generated.value())?;
    let mmd = mmd_term(tape, tape.constant(z.clone()), generated, h, cfg.estimator)?;
    let total = dsm.scale(1.0 - cfg.lambda_m).add(mmd.scale(cfg.lambda_m))?;
    let parts = Sm3dParts {
        dsm: dsm_value,
        mmd: Some(mmd.value().item()),
        total: total.value().item(),
        bandwidth: Some(h),
    };
    Ok((total, parts))
}

/// Objective value for a frozen score network.
pub fn sm3d_loss(
    score: &Mlp,
    z: &Tensor,
    cfg: &Sm3dConfig,
    lcfg: &LangevinConfig,
    stream: &RngStream,
) -> Result<Sm3dParts> {
    let tape = Tape::new();
    let bound = score.bind(&tape, false);
    Ok(sm3d_objective(&tape, &bound, score, z, cfg, lcfg, stream)?.1)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreStepRecord {
    pub parts: Sm3dParts,
    pub grad_norm: f64,
}

/// One SGD step on the score network with the feature extractor frozen.
pub fn score_update_step(
    bundle: &mut ModelBundle,
    x: &Tensor,
    state: &mut SgdState,
    sgd: &SgdConfig,
    cfg: &Sm3dConfig,
    lcfg: &LangevinConfig,
    stream: &RngStream,
) -> Result<ScoreStepRecord> {
    let z = bundle.forward_features(x)?;
    let tape = Tape::new();
    let bound = bundle.score.bind(&tape, true);
    let (loss, parts) = sm3d_objective(&tape, &bound, &bundle.score, &z, cfg, lcfg, stream)?;
    let grads = tape.backward(loss)?;
    let flat_grad = bound.flat_grad(&grads);
    let grad_norm = flat_grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    let mut params = bundle.score.flat();
    sgd_step(&mut params, &flat_grad, sgd, state)?;
    bundle.score.set_flat(&params)?;
    Ok(ScoreStepRecord { parts, grad_norm })
}
