//! Stein-discrepancy regularization of the feature extractor.
//!
//! Augmented latents are scored against the frozen score network with a
//! kernelized Stein discrepancy built on the Gaussian kernel
//! `k(z, z′) = exp(−‖z − z′‖²/h)`. With `δ = z − z′`, `r² = ‖δ‖²` and
//! `a = 2/h`:
//!
//! ```text
//! ∇_z k  = −a·δ·k          ∇_z′ k = a·δ·k
//! tr(∇_z ∇_z′ k) = (a·d − a²·r²)·k
//! u(z, z′) = k·[s(z)·s(z′) + a·(s(z) − s(z′))·δ + a·d − a²·r²]
//! ```

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{forward_score_var, BoundMlp, ModelBundle, ScoreField};
use crate::numerics::{sgd_step, Primitive, PrimitiveHandle, RngStream, SgdConfig, SgdState, Tape, Tensor, Var};
use crate::smd::{median_bandwidth, sq_dist, Bandwidth, Estimator};

/// Gaussian kernel value and derivatives for one pair of points.
#[derive(Clone, Debug, PartialEq)]
pub struct KernelTerms {
    pub k: f64,
    pub grad_z: Vec<f64>,
    pub grad_zp: Vec<f64>,
    pub trace_grad_grad: f64,
}

pub fn kernel_terms(z: &[f64], zp: &[f64], h: f64) -> Result<KernelTerms> {
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::domain("kernel_terms", format!("bandwidth {h} must be > 0")));
    }
    if z.len() != zp.len() {
        return Err(Error::dim("kernel_terms", format!("{} vs {}", z.len(), zp.len())));
    }
    let a = 2.0 / h;
    let r2 = sq_dist(z, zp);
    let k = (-r2 / h).exp();
    let grad_z: Vec<f64> = z.iter().zip(zp).map(|(x, y)| -a * (x - y) * k).collect();
    let grad_zp = grad_z.iter().map(|g| -g).collect();
    let d = z.len() as f64;
    Ok(KernelTerms {
        k,
        grad_z,
        grad_zp,
        trace_grad_grad: (a * d - a * a * r2) * k,
    })
}

/// `u(z, z′)` for one pair given the scores at both points.
pub fn stein_kernel(s: &[f64], sp: &[f64], z: &[f64], zp: &[f64], h: f64) -> f64 {
    let a = 2.0 / h;
    let d = z.len() as f64;
    let mut r2 = 0.0;
    let mut ss = 0.0;
    let mut cross = 0.0;
    for l in 0..z.len() {
        let delta = z[l] - zp[l];
        r2 += delta * delta;
        ss += s[l] * sp[l];
        cross += (s[l] - sp[l]) * delta;
    }
    let k = (-r2 / h).exp();
    k * (ss + a * cross + a * d - a * a * r2)
}

/// Mean Stein kernel over pairs of rows of `(S, Z)`: distinct ordered pairs
/// for the U-statistic, all pairs for the V-statistic. Gradients flow to
/// both the scores and the points.
#[derive(Clone, Copy, Debug)]
pub struct SteinKernelStat {
    pub h: f64,
    pub estimator: Estimator,
}

impl SteinKernelStat {
    fn count(&self, n: usize) -> f64 {
        match self.estimator {
            Estimator::UStatistic => (n * (n - 1)) as f64,
            Estimator::VStatistic => (n * n) as f64,
        }
    }

    pub fn value(&self, s: &Tensor, z: &Tensor) -> Result<f64> {
        let n = z.rows();
        if s.shape() != z.shape() {
            return Err(Error::dim(
                "ksd",
                format!("scores {:?}, points {:?}", s.shape(), z.shape()),
            ));
        }
        let min = match self.estimator {
            Estimator::UStatistic => 2,
            Estimator::VStatistic => 1,
        };
        if n < min {
            return Err(Error::Empty(format!("ksd needs at least {min} samples")));
        }
        if !(self.h > 0.0 && self.h.is_finite()) {
            return Err(Error::domain("ksd", format!("bandwidth {} must be > 0", self.h)));
        }
        let mut off = 0.0;
        for i in 0..n {
            for j in i + 1..n {
                off += stein_kernel(s.row(i), s.row(j), z.row(i), z.row(j), self.h);
            }
        }
        let mut total = 2.0 * off;
        if self.estimator == Estimator::VStatistic {
            let ad = 2.0 / self.h * z.cols() as f64;
            for i in 0..n {
                let si = s.row(i);
                total += si.iter().map(|v| v * v).sum::<f64>() + ad;
            }
        }
        Ok(total / self.count(n))
    }
}

impl Primitive for SteinKernelStat {
    fn name(&self) -> &str {
        "stein_kernel_stat"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        Ok(Tensor::scalar(self.value(inputs[0], inputs[1])?))
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Tensor> {
        let (s, z) = (inputs[0], inputs[1]);
        let (n, d) = (z.rows(), z.cols());
        let a = 2.0 / self.h;
        // each unordered pair appears twice among ordered pairs
        let c = 2.0 * grad.item() / self.count(n);
        let mut gs = Tensor::zeros(s.shape());
        let mut gz = Tensor::zeros(z.shape());
        let mut delta = vec![0.0; d];
        for i in 0..n {
            for j in i + 1..n {
                let (si, sj) = (s.row(i), s.row(j));
                let (zi, zj) = (z.row(i), z.row(j));
                let mut r2 = 0.0;
                let mut ss = 0.0;
                let mut cross = 0.0;
                for l in 0..d {
                    delta[l] = zi[l] - zj[l];
                    r2 += delta[l] * delta[l];
                    ss += si[l] * sj[l];
                    cross += (si[l] - sj[l]) * delta[l];
                }
                let k = (-r2 / self.h).exp();
                let g = ss + a * cross + a * d as f64 - a * a * r2;
                let ck = c * k;
                for l in 0..d {
                    gs.row_mut(i)[l] += ck * (sj[l] + a * delta[l]);
                    gs.row_mut(j)[l] += ck * (si[l] - a * delta[l]);
                    let dd = ck * (a * (si[l] - sj[l]) - 2.0 * a * a * delta[l] - a * delta[l] * g);
                    gz.row_mut(i)[l] += dd;
                    gz.row_mut(j)[l] -= dd;
                }
            }
        }
        if self.estimator == Estimator::VStatistic {
            let cd = grad.item() / self.count(n);
            for i in 0..n {
                for l in 0..d {
                    gs.row_mut(i)[l] += cd * 2.0 * s.row(i)[l];
                }
            }
        }
        vec![gs, gz]
    }
}

/// Tape form of the Stein statistic over scores `s` at points `z`.
pub fn ksd_term<'t>(tape: &'t Tape, s: Var<'t>, z: Var<'t>, h: f64, estimator: Estimator) -> Result<Var<'t>> {
    let prim: PrimitiveHandle = Arc::new(SteinKernelStat { h, estimator });
    tape.apply(&prim, &[s, z])
}

/// KSD of the points `z` against the density whose score is `score(·, σ)`.
pub fn ksd<S: ScoreField + ?Sized>(score: &S, z: &Tensor, h: f64, sigma: f64, estimator: Estimator) -> Result<f64> {
    if z.rows() == 0 {
        return Err(Error::Empty("ksd of an empty sample".into()));
    }
    let s = score.score(z, sigma)?;
    SteinKernelStat { h, estimator }.value(&s, z)
}

/// A scalar test function for the Stein identity.
pub trait SteinTestFunction {
    fn value(&self, x: &[f64]) -> f64;
    fn grad(&self, x: &[f64]) -> Vec<f64>;
}

/// `φ(x) = k(x, anchor)` with bandwidth `h`.
pub struct KernelTestFunction {
    pub anchor: Vec<f64>,
    pub h: f64,
}

impl SteinTestFunction for KernelTestFunction {
    fn value(&self, x: &[f64]) -> f64 {
        (-sq_dist(x, &self.anchor) / self.h).exp()
    }

    fn grad(&self, x: &[f64]) -> Vec<f64> {
        let k = self.value(x);
        x.iter()
            .zip(&self.anchor)
            .map(|(a, b)| -2.0 / self.h * (a - b) * k)
            .collect()
    }
}

/// `φ(x) = x[coord]`.
pub struct CoordinateTestFunction {
    pub coord: usize,
}

impl SteinTestFunction for CoordinateTestFunction {
    fn value(&self, x: &[f64]) -> f64 {
        x[self.coord]
    }

    fn grad(&self, x: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; x.len()];
        g[self.coord] = 1.0;
        g
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SteinResidual {
    pub mean: f64,
    pub std_err: f64,
    pub samples: usize,
}

impl SteinResidual {
    /// |mean| in units of its standard error.
    pub fn z_score(&self) -> f64 {
        self.mean.abs() / self.std_err
    }
}

/// Monte-Carlo estimate of `E[φ(x)·∇log q(x) + ∇φ(x)]`, averaged over the
/// test functions and coordinates, with its standard error.
pub fn stein_identity_residual<F>(score: F, samples: &Tensor, tests: &[&dyn SteinTestFunction]) -> Result<SteinResidual>
where
    F: Fn(&[f64]) -> Vec<f64>,
{
    let n = samples.rows();
    if n < 2 || tests.is_empty() {
        return Err(Error::Empty(
            "stein residual needs >= 2 samples and a test function".into(),
        ));
    }
    let d = samples.cols();
    let norm = (tests.len() * d) as f64;
    let per: Vec<f64> = (0..n)
        .map(|i| {
            let x = samples.row(i);
            let s = score(x);
            let mut acc = 0.0;
            for t in tests {
                let phi = t.value(x);
                for (sl, gl) in s.iter().zip(t.grad(x)) {
                    acc += phi * sl + gl;
                }
            }
            acc / norm
        })
        .collect();
    let mean = per.iter().sum::<f64>() / n as f64;
    let var = per.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    Ok(SteinResidual {
        mean,
        std_err: (var / n as f64).sqrt(),
        samples: n,
    })
}

/// Label-preserving input transforms. A magnitude of zero is the identity.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "kebab-case", deny_unknown_fields)]
pub enum AugmentSpec {
    Identity,
    /// Fixed rotation of each coordinate pair.
    Rotation {
        degrees: f64,
    },
    /// Per-sample rotation angle uniform in `[−max_degrees, max_degrees]`.
    RandomRotation {
        max_degrees: f64,
    },
    /// Additive Gaussian noise.
    Jitter {
        std: f64,
    },
    /// Multiply by `1 + delta`.
    Scale {
        delta: f64,
    },
    /// Per-sample factor uniform in `[1 − max_delta, 1 + max_delta]`.
    RandomScale {
        max_delta: f64,
    },
    Compose {
        steps: Vec<AugmentSpec>,
    },
}

impl AugmentSpec {
    pub fn validate(&self, path: &str) -> Result<()> {
        let bad = |what: &str| Err(Error::config(path, format!("{what} must be finite and >= 0")));
        match self {
            AugmentSpec::Identity | AugmentSpec::Rotation { .. } | AugmentSpec::Scale { .. } => Ok(()),
            AugmentSpec::RandomRotation { max_degrees: m } if !(*m >= 0.0 && m.is_finite()) => bad("max_degrees"),
            AugmentSpec::Jitter { std } if !(*std >= 0.0 && std.is_finite()) => bad("std"),
            AugmentSpec::RandomScale { max_delta: m } if !(*m >= 0.0 && m.is_finite()) => bad("max_delta"),
            AugmentSpec::Compose { steps } => steps
                .iter()
                .enumerate()
                .try_for_each(|(i, s)| s.validate(&format!("{path}.steps[{i}]"))),
            _ => Ok(()),
        }
    }
}

fn rotate_row(row: &mut [f64], radians: f64) {
    let (sin, cos) = radians.sin_cos();
    for pair in row.chunks_exact_mut(2) {
        let (x, y) = (pair[0], pair[1]);
        pair[0] = x * cos - y * sin;
        pair[1] = x * sin + y * cos;
    }
}

/// Rotates every coordinate pair `(0,1), (2,3), …` by `degrees`.
pub fn rotate(x: &Tensor, degrees: f64) -> Result<Tensor> {
    if x.cols() < 2 {
        return Err(Error::domain(
            "rotate",
            format!("needs >= 2 input dims, got {}", x.cols()),
        ));
    }
    let mut out = x.clone();
    let rad = degrees.to_radians();
    for i in 0..out.rows() {
        rotate_row(out.row_mut(i), rad);
    }
    Ok(out)
}

pub fn augment(x: &Tensor, spec: &AugmentSpec, stream: &mut RngStream) -> Result<Tensor> {
    match spec {
        AugmentSpec::Identity => Ok(x.clone()),
        AugmentSpec::Rotation { degrees } => rotate(x, *degrees),
        AugmentSpec::RandomRotation { max_degrees } => {
            if x.cols() < 2 {
                return Err(Error::domain("augment", "rotation needs >= 2 input dims"));
            }
            let mut out = x.clone();
            for i in 0..out.rows() {
                let deg = (2.0 * stream.uniform() - 1.0) * max_degrees;
                rotate_row(out.row_mut(i), deg.to_radians());
            }
            Ok(out)
        }
        AugmentSpec::Jitter { std } => {
            let noise = stream.gaussian(x.shape());
            let data = x.data().iter().zip(noise.data()).map(|(a, b)| a + std * b).collect();
            Tensor::new(x.shape().to_vec(), data)
        }
        AugmentSpec::Scale { delta } => Ok(x.map(|v| v * (1.0 + delta))),
        AugmentSpec::RandomScale { max_delta } => {
            let mut out = x.clone();
            for i in 0..out.rows() {
                let f = 1.0 + (2.0 * stream.uniform() - 1.0) * max_delta;
                out.row_mut(i).iter_mut().for_each(|v| *v *= f);
            }
            Ok(out)
        }
        AugmentSpec::Compose { steps } => {
            let mut out = x.clone();
            for (i, s) in steps.iter().enumerate() {
                out = augment(&out, s, &mut stream.fork("compose", i as u64))?;
            }
            Ok(out)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SagConfig {
    pub lambda_a: f64,
    pub augment: AugmentSpec,
    pub bandwidth: Bandwidth,
    pub estimator: Estimator,
}

impl Default for SagConfig {
    fn default() -> Self {
        SagConfig {
            lambda_a: 0.05,
            augment: AugmentSpec::RandomRotation { max_degrees: 20.0 },
            bandwidth: Bandwidth::Median,
            estimator: Estimator::UStatistic,
        }
    }
}

impl SagConfig {
    pub fn validate(&self, path: &str) -> Result<()> {
        if !(self.lambda_a >= 0.0 && self.lambda_a.is_finite()) {
            return Err(Error::config(format!("{path}.lambda_a"), "must be finite and >= 0"));
        }
        if let Bandwidth::Fixed(h) = self.bandwidth {
            if !(h > 0.0 && h.is_finite()) {
                return Err(Error::config(
                    format!("{path}.bandwidth"),
                    "fixed bandwidth must be > 0",
                ));
            }
        }
        self.augment.validate(&format!("{path}.augment"))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SagParts {
    pub ce: f64,
    /// Unweighted Stein statistic; `None` when `λ_a = 0`.
    pub ksd: Option<f64>,
    /// `λ_a · ksd`, so that `ce + weighted_ksd == total`.
    pub weighted_ksd: f64,
    pub total: f64,
    pub bandwidth: Option<f64>,
}

/// `CE(g(f(X)), Y) + λ_a·KSD(f(augment(X)))` over networks bound on `tape`.
/// The score network `s` is normally bound as constants.
#[allow(clippy::too_many_arguments)]
pub fn sag_objective<'t>(
    tape: &'t Tape,
    f: &BoundMlp<'t>,
    g: &BoundMlp<'t>,
    s: &BoundMlp<'t>,
    x: &Tensor,
    labels: &[usize],
    cfg: &SagConfig,
    sigma_eval: f64,
    stream: &RngStream,
) -> Result<(Var<'t>, SagParts)> {
    let z = f.forward(tape.constant(x.clone()))?;
    let ce = g.forward(z)?.cross_entropy(labels)?;
    let ce_value = ce.value().item();
    // a single-point batch has no U-statistic; it trains on CE alone
    if cfg.lambda_a == 0.0 || (x.rows() < 2 && cfg.estimator == Estimator::UStatistic) {
        let parts = SagParts {
            ce: ce_value,
            ksd: None,
            weighted_ksd: 0.0,
            total: ce_value,
            bandwidth: None,
        };
        return Ok((ce, parts));
    }
    let xa = augment(x, &cfg.augment, &mut stream.fork("augment", 0))?;
    let za = f.forward(tape.constant(xa))?;
    let scores = forward_score_var(tape, s, za, sigma_eval)?;
    let h = match cfg.bandwidth {
        Bandwidth::Fixed(h) => h,
        Bandwidth::Median => median_bandwidth(&za.value()),
    };
    let ksd = ksd_term(tape, scores, za, h, cfg.estimator)?;
    let weighted = ksd.scale(cfg.lambda_a);
    let total = ce.add(weighted)?;
    let parts = SagParts {
        ce: ce_value,
        ksd: Some(ksd.value().item()),
        weighted_ksd: weighted.value().item(),
        total: total.value().item(),
        bandwidth: Some(h),
    };
    Ok((total, parts))
}

/// Binds the bundle on `tape` and builds the objective.
#[allow(clippy::too_many_arguments)]
fn bundle_objective<'t>(
    tape: &'t Tape,
    bundle: &ModelBundle,
    trainable: bool,
    x: &Tensor,
    labels: &[usize],
    cfg: &SagConfig,
    sigma_eval: f64,
    stream: &RngStream,
) -> Result<(Var<'t>, SagParts, BoundMlp<'t>, BoundMlp<'t>)> {
    let f = bundle.feature.bind(tape, trainable);
    let g = bundle.head.bind(tape, trainable);
    let s = bundle.score.bind(tape, false);
    let (loss, parts) = sag_objective(tape, &f, &g, &s, x, labels, cfg, sigma_eval, stream)?;
    Ok((loss, parts, f, g))
}

pub fn sag_loss(
    bundle: &ModelBundle,
    x: &Tensor,
    labels: &[usize],
    cfg: &SagConfig,
    sigma_eval: f64,
    stream: &RngStream,
) -> Result<SagParts> {
    let tape = Tape::new();
    Ok(bundle_objective(&tape, bundle, false, x, labels, cfg, sigma_eval, stream)?.1)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureStepRecord {
    pub parts: SagParts,
    pub grad_norm: f64,
}

/// Flat `[θ_f; θ_g]`, the parameter block updated by [`feature_update_step`].
pub fn feature_params(bundle: &ModelBundle) -> Vec<f64> {
    let mut p = bundle.feature.flat();
    p.extend(bundle.head.flat());
    p
}

/// One SGD step on the feature extractor and classifier head; the score
/// network is untouched.
#[allow(clippy::too_many_arguments)]
pub fn feature_update_step(
    bundle: &mut ModelBundle,
    x: &Tensor,
    labels: &[usize],
    state: &mut SgdState,
    sgd: &SgdConfig,
    cfg: &SagConfig,
    sigma_eval: f64,
    stream: &RngStream,
) -> Result<FeatureStepRecord> {
    let tape = Tape::new();
    let (loss, parts, f, g) = bundle_objective(&tape, bundle, true, x, labels, cfg, sigma_eval, stream)?;
    let grads = tape.backward(loss)?;
    let mut flat_grad = f.flat_grad(&grads);
    flat_grad.extend(g.flat_grad(&grads));
    let grad_norm = flat_grad.iter().map(|v| v * v).sum::<f64>().sqrt();
    let mut params = feature_params(bundle);
    sgd_step(&mut params, &flat_grad, sgd, state)?;
    let nf = bundle.feature.param_count();
    bundle.feature.set_flat(&params[..nf])?;
    bundle.head.set_flat(&params[nf..])?;
    Ok(FeatureStepRecord { parts, grad_norm })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{init_bundle, standard_normal_score, Activation, BundleSpec, MlpSpec};
    use crate::numerics::{check_gradients, GradCheckConfig, StreamLabel};

    fn stream(tag: &str) -> RngStream {
        RngStream::new(9, StreamLabel::new(tag))
    }

    /// Central differences of the kernel alone, independent of the closed forms.
    fn fd_terms(z: &[f64], zp: &[f64], h: f64) -> (Vec<f64>, Vec<f64>, f64) {
        let k = |a: &[f64], b: &[f64]| (-sq_dist(a, b) / h).exp();
        let e = 1e-5;
        let d = z.len();
        let mut gz = vec![0.0; d];
        let mut gzp = vec![0.0; d];
        let mut tr = 0.0;
        for l in 0..d {
            let mut up = z.to_vec();
            let mut dn = z.to_vec();
            up[l] += e;
            dn[l] -= e;
            gz[l] = (k(&up, zp) - k(&dn, zp)) / (2.0 * e);
            let mut up = zp.to_vec();
            let mut dn = zp.to_vec();
            up[l] += e;
            dn[l] -= e;
            gzp[l] = (k(z, &up) - k(z, &dn)) / (2.0 * e);
            // mixed partial ∂²k/∂z_l∂z′_l
            let e2 = 1e-4;
            let mut acc = 0.0;
            for (sz, szp) in [(1.0, 1.0), (-1.0, -1.0), (1.0, -1.0), (-1.0, 1.0)] {
                let mut a = z.to_vec();
                let mut b = zp.to_vec();
                a[l] += sz * e2;
                b[l] += szp * e2;
                acc += sz * szp * k(&a, &b);
            }
            tr += acc / (4.0 * e2 * e2);
        }
        (gz, gzp, tr)
    }

    fn rel(a: f64, b: f64) -> f64 {
        let gap = (a - b).abs();
        if gap < 1e-9 {
            0.0
        } else {
            gap / a.abs().max(b.abs())
        }
    }

    #[test]
    fn coincident_points() {
        let t = kernel_terms(&[0.3, -1.0, 2.0], &[0.3, -1.0, 2.0], 0.5).unwrap();
        assert_eq!(t.k, 1.0);
        assert!(t.grad_z.iter().chain(&t.grad_zp).all(|&v| v == 0.0));
        assert_eq!(t.trace_grad_grad, 2.0 * 3.0 / 0.5);
        assert!(kernel_terms(&[0.0], &[1.0], 0.0).is_err());
    }

    #[test]
    fn hand_evaluated_pair() {
        let t = kernel_terms(&[0.0], &[1.0], 2.0).unwrap();
        let e = (-0.5f64).exp();
        assert!((t.k - e).abs() < 1e-15);
        assert!((t.grad_z[0] - e).abs() < 1e-15);
        assert!(t.trace_grad_grad.abs() < 1e-15);
    }

    #[test]
    fn closed_forms_match_finite_differences() {
        let mut st = stream("kt");
        for _ in 0..50 {
            let d = 1 + st.below(3);
            let z: Vec<f64> = (0..d).map(|_| st.normal()).collect();
            let zp: Vec<f64> = (0..d).map(|_| st.normal()).collect();
            let h = 0.5 + 3.0 * st.uniform();
            let t = kernel_terms(&z, &zp, h).unwrap();
            let (gz, gzp, tr) = fd_terms(&z, &zp, h);
            for l in 0..d {
                assert!(rel(t.grad_z[l], gz[l]) < 1e-6);
                assert!(rel(t.grad_zp[l], gzp[l]) < 1e-6);
                assert!((t.grad_z[l] + t.grad_zp[l]).abs() < 1e-15);
            }
            assert!(
                rel(t.trace_grad_grad, tr) < 1e-6 || (t.trace_grad_grad - tr).abs() < 1e-7,
                "{} vs {tr}",
                t.trace_grad_grad
            );
            assert!(t.k > 0.0 && t.k <= 1.0);
        }
    }

    /// Stein kernel assembled term by term from `kernel_terms`.
    fn u_from_terms(s: &[f64], sp: &[f64], z: &[f64], zp: &[f64], h: f64) -> f64 {
        let t = kernel_terms(z, zp, h).unwrap();
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        dot(s, sp) * t.k + dot(s, &t.grad_zp) + dot(sp, &t.grad_z) + t.trace_grad_grad
    }

    #[test]
    fn stein_kernel_hand_value_and_symmetry() {
        let u = stein_kernel(&[0.0], &[-1.0], &[0.0], &[1.0], 2.0);
        assert!((u + (-0.5f64).exp()).abs() < 1e-15);
        assert!((u - (-0.606531)).abs() < 1e-6);
        let mut st = stream("sym");
        for _ in 0..20 {
            let v: Vec<f64> = (0..8).map(|_| st.normal()).collect();
            let (s, sp, z, zp) = (&v[0..2], &v[2..4], &v[4..6], &v[6..8]);
            let a = stein_kernel(s, sp, z, zp, 1.3);
            assert!((a - stein_kernel(sp, s, zp, z, 1.3)).abs() < 1e-12);
            assert!((a - u_from_terms(s, sp, z, zp, 1.3)).abs() < 1e-12);
        }
    }

    #[test]
    fn stein_stat_gradients_match_fd() {
        let s = stream("s").gaussian(&[5, 2]);
        let z = stream("z").gaussian(&[5, 2]);
        for est in [Estimator::UStatistic, Estimator::VStatistic] {
            let rep = check_gradients(&[s.clone(), z.clone()], GradCheckConfig::default(), |t, v| {
                ksd_term(t, v[0], v[1], 1.7, est)
            })
            .unwrap();
            assert!(rep.passes(1e-5), "{est:?} {rep:?}");
        }
    }

    #[test]
    fn ksd_rejects_single_sample() {
        let sc = standard_normal_score(2);
        assert!(ksd(&sc, &Tensor::zeros(&[1, 2]), 1.0, 1.0, Estimator::UStatistic).is_err());
    }

    #[test]
    fn stein_identity_linear_and_kernel() {
        let x = stream("si").gaussian(&[20_000, 1]);
        let truth = |v: &[f64]| vec![-v[0]];
        let lin = stein_identity_residual(truth, &x, &[&CoordinateTestFunction { coord: 0 }]).unwrap();
        assert!(lin.z_score() < 3.0, "{lin:?}");
        let kern = KernelTestFunction {
            anchor: vec![0.0],
            h: 1.0,
        };
        let r = stein_identity_residual(truth, &x, &[&kern]).unwrap();
        assert!(r.z_score() < 3.0, "{r:?}");
        let off = KernelTestFunction {
            anchor: vec![1.0],
            h: 1.0,
        };
        let wrong = stein_identity_residual(|v: &[f64]| vec![v[0]], &x, &[&off]).unwrap();
        assert!(wrong.z_score() > 5.0, "{wrong:?}");
    }

    #[test]
    fn augment_identities() {
        let x = stream("x").gaussian(&[6, 2]);
        let mut st = stream("a");
        assert_eq!(
            augment(&x, &AugmentSpec::Rotation { degrees: 0.0 }, &mut st).unwrap(),
            x
        );
        assert_eq!(augment(&x, &AugmentSpec::Jitter { std: 0.0 }, &mut st).unwrap(), x);
        assert_eq!(
            augment(&x, &AugmentSpec::RandomRotation { max_degrees: 0.0 }, &mut st).unwrap(),
            x
        );
        assert_eq!(augment(&x, &AugmentSpec::Scale { delta: 0.0 }, &mut st).unwrap(), x);
        let e = Tensor::matrix(1, 2, vec![1.0, 0.0]).unwrap();
        let r = augment(&e, &AugmentSpec::Rotation { degrees: 90.0 }, &mut st).unwrap();
        assert!(r.data()[0].abs() < 1e-12 && (r.data()[1] - 1.0).abs() < 1e-12);
        let one_d = Tensor::matrix(3, 1, vec![1.0, 2.0, 3.0]).unwrap();
        assert!(augment(&one_d, &AugmentSpec::Rotation { degrees: 10.0 }, &mut st).is_err());
        let composed = AugmentSpec::Compose {
            steps: vec![
                AugmentSpec::Rotation { degrees: 30.0 },
                AugmentSpec::Rotation { degrees: -30.0 },
            ],
        };
        let back = augment(&x, &composed, &mut st).unwrap();
        for (a, b) in back.data().iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    fn tiny() -> ModelBundle {
        let spec = BundleSpec {
            feature: MlpSpec::new(&[2, 5, 2], Activation::Tanh),
            head: MlpSpec::new(&[2, 3], Activation::Tanh),
            score: MlpSpec::new(&[3, 6, 2], Activation::Tanh),
        };
        init_bundle(&spec, &mut stream("init")).unwrap()
    }

    #[test]
    fn sag_parts() {
        let b = tiny();
        let x = stream("x").gaussian(&[6, 2]);
        let y = [0usize, 1, 2, 0, 1, 2];
        let mut cfg = SagConfig {
            lambda_a: 0.0,
            ..SagConfig::default()
        };
        let p = sag_loss(&b, &x, &y, &cfg, 0.1, &stream("s")).unwrap();
        let logits = b.forward_logits(&b.forward_features(&x).unwrap()).unwrap();
        let ce = crate::numerics::tape::cross_entropy_value(&logits, &y).unwrap();
        assert_eq!(p.total.to_bits(), ce.to_bits());
        cfg.lambda_a = 0.3;
        let p = sag_loss(&b, &x, &y, &cfg, 0.1, &stream("s")).unwrap();
        assert_eq!(p.ce + p.weighted_ksd, p.total);
        assert_eq!(p.weighted_ksd, p.ksd.unwrap() * 0.3);
    }

    #[test]
    fn single_row_batch_falls_back_to_cross_entropy() {
        let b = tiny();
        let x = stream("x1").gaussian(&[1, 2]);
        let p = sag_loss(&b, &x, &[1], &SagConfig::default(), 0.1, &stream("s")).unwrap();
        assert_eq!(p.ksd, None);
        assert_eq!(p.total, p.ce);
        let cfg = SagConfig {
            estimator: Estimator::VStatistic,
            ..SagConfig::default()
        };
        assert!(sag_loss(&b, &x, &[1], &cfg, 0.1, &stream("s")).unwrap().ksd.is_some());
    }

    #[test]
    fn feature_gradient_through_ksd_matches_fd() {
        let b = tiny();
        let x = stream("x").gaussian(&[4, 2]);
        let y = [0usize, 1, 2, 1];
        let cfg = SagConfig {
            lambda_a: 0.7,
            augment: AugmentSpec::RandomRotation { max_degrees: 25.0 },
            bandwidth: Bandwidth::Fixed(1.3),
            estimator: Estimator::UStatistic,
        };
        let st = stream("s");
        let tape = Tape::new();
        let (loss, _, f, _) = bundle_objective(&tape, &b, true, &x, &y, &cfg, 0.1, &st).unwrap();
        let grads = tape.backward(loss).unwrap();
        let analytic = f.flat_grad(&grads);
        let base = b.feature.flat();
        let eval = |flat: &[f64]| {
            let mut m = b.clone();
            m.feature.set_flat(flat).unwrap();
            sag_loss(&m, &x, &y, &cfg, 0.1, &st).unwrap().total
        };
        let e = 1e-5;
        let mut idx = stream("idx");
        for _ in 0..10 {
            let i = idx.below(base.len());
            let mut up = base.clone();
            let mut dn = base.clone();
            up[i] += e;
            dn[i] -= e;
            let fd = (eval(&up) - eval(&dn)) / (2.0 * e);
            let gap = (fd - analytic[i]).abs();
            assert!(
                gap < 1e-8 || gap / fd.abs().max(analytic[i].abs()) < 1e-4,
                "{i}: {fd} vs {}",
                analytic[i]
            );
        }
    }

    #[test]
    fn feature_step_respects_frozen_score() {
        let mut b = tiny();
        let before = b.clone();
        let x = stream("x").gaussian(&[6, 2]);
        let y = [0usize, 1, 2, 0, 1, 2];
        let cfg = SagConfig::default();
        let mut st = SgdState::default();
        feature_update_step(&mut b, &x, &y, &mut st, &SgdConfig::plain(0.0), &cfg, 0.1, &stream("s")).unwrap();
        assert_eq!(b, before);
        feature_update_step(
            &mut b,
            &x,
            &y,
            &mut st,
            &SgdConfig::plain(0.05),
            &cfg,
            0.1,
            &stream("s"),
        )
        .unwrap();
        assert_eq!(b.score, before.score);
        assert_ne!(b.feature, before.feature);
    }
}
