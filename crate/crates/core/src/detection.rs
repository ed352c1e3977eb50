//! Score-norm OOD detection and the AUROC / FPR95 / MSP metric suite.
//!
//! OUT is the positive class and a higher score means more OUT-like. A
//! sample is flagged OUT when its score norm exceeds `−τ`; the boundary is IN.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{forward_score, ModelBundle};
use crate::numerics::{tensor::softmax_rows, Tensor};

/// `‖s(f(x), σ)‖` per row of `x`.
pub fn score_norm(bundle: &ModelBundle, x: &Tensor, sigma_eval: f64) -> Result<Vec<f64>> {
    if !(sigma_eval > 0.0) {
        return Err(Error::domain("score_norm", format!("sigma {sigma_eval} must be > 0")));
    }
    let z = bundle.forward_features(x)?;
    Ok(forward_score(&bundle.score, &z, sigma_eval)?.row_norms())
}

fn check_scores(op: &'static str, v: &[f64]) -> Result<()> {
    if v.is_empty() {
        return Err(Error::Empty(format!("{op}: empty score set")));
    }
    if v.iter().any(|x| x.is_nan()) {
        return Err(Error::domain(op, "NaN score"));
    }
    Ok(())
}

/// Smallest value `t` of `scores` with `fraction(scores ≤ t) ≥ tpr`: the
/// order statistic at `ceil(n·tpr)`.
pub fn tpr_threshold(scores: &[f64], tpr: f64) -> Result<f64> {
    check_scores("tpr_threshold", scores)?;
    if !(tpr > 0.0 && tpr < 1.0) {
        return Err(Error::domain("tpr_threshold", format!("target {tpr} outside (0,1)")));
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    // guard against n·tpr landing a hair above an integer
    let k = ((n as f64 * tpr - 1e-9).ceil() as usize).clamp(1, n);
    Ok(sorted[k - 1])
}

/// `τ = −t` for the IN-acceptance threshold `t`. Errors when `t = 0`, since
/// no negative threshold then exists.
pub fn calibrate_tau(in_norms: &[f64], tpr_target: f64) -> Result<f64> {
    let t = tpr_threshold(in_norms, tpr_target)?;
    if !(t > 0.0) {
        return Err(Error::domain(
            "calibrate_tau",
            format!("threshold {t} gives no negative tau"),
        ));
    }
    Ok(-t)
}

pub fn is_out(norm: f64, tau: f64) -> Result<bool> {
    if !(tau < 0.0) {
        return Err(Error::Contract(format!("tau must be negative, got {tau}")));
    }
    Ok(norm > -tau)
}

/// Mann–Whitney AUROC: fraction of `(out, in)` pairs with `out > in`, ties
/// counting one half. Computed from integer pair counts.
pub fn auroc(in_scores: &[f64], out_scores: &[f64]) -> Result<f64> {
    check_scores("auroc", in_scores)?;
    check_scores("auroc", out_scores)?;
    let mut sorted = in_scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    // twice the credited pairs: 2 per win, 1 per tie
    let mut doubled: u128 = 0;
    for &o in out_scores {
        let below = sorted.partition_point(|&v| v < o);
        let not_above = sorted.partition_point(|&v| v <= o);
        doubled += 2 * below as u128 + (not_above - below) as u128;
    }
    Ok(doubled as f64 / (2 * in_scores.len() as u128 * out_scores.len() as u128) as f64)
}

/// Fraction of OUT scores accepted as IN at the 95%-TPR threshold of the IN scores.
pub fn fpr95(in_scores: &[f64], out_scores: &[f64]) -> Result<f64> {
    fpr_at(in_scores, out_scores, 0.95)
}

pub fn fpr_at(in_scores: &[f64], out_scores: &[f64], tpr: f64) -> Result<f64> {
    check_scores("fpr", out_scores)?;
    let t = tpr_threshold(in_scores, tpr)?;
    let accepted = out_scores.iter().filter(|&&o| o <= t).count();
    Ok(accepted as f64 / out_scores.len() as f64)
}

/// Maximum softmax probability per row.
pub fn msp(logits: &Tensor) -> Result<Vec<f64>> {
    if logits.cols() < 2 {
        return Err(Error::dim("msp", format!("need >= 2 classes, got {}", logits.cols())));
    }
    let p = softmax_rows(logits.data(), logits.cols());
    Ok(p.chunks_exact(logits.cols())
        .map(|r| r.iter().copied().fold(f64::NEG_INFINITY, f64::max))
        .collect())
}

/// Headline detection numbers, averaged across clients by weight.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DetectionMetrics {
    pub auroc: f64,
    pub fpr95: f64,
    pub msp_auroc: f64,
    pub msp_fpr95: f64,
}

impl DetectionMetrics {
    /// Weighted mean; weights are used as given.
    pub fn weighted(items: &[(f64, DetectionMetrics)]) -> DetectionMetrics {
        let mut m = DetectionMetrics::default();
        for (w, x) in items {
            m.auroc += w * x.auroc;
            m.fpr95 += w * x.fpr95;
            m.msp_auroc += w * x.msp_auroc;
            m.msp_fpr95 += w * x.msp_fpr95;
        }
        m
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionReport {
    pub in_norms: Vec<f64>,
    pub inc_norms: Vec<f64>,
    pub out_norms: Vec<f64>,
    pub tau: f64,
    pub auroc: f64,
    pub fpr95: f64,
    /// MSP baseline on the same IN and OUT samples, negated into OUT-scores.
    pub msp_auroc: f64,
    pub msp_fpr95: f64,
}

impl DetectionReport {
    pub fn metrics(&self) -> DetectionMetrics {
        DetectionMetrics {
            auroc: self.auroc,
            fpr95: self.fpr95,
            msp_auroc: self.msp_auroc,
            msp_fpr95: self.msp_fpr95,
        }
    }
}

pub fn build_report(
    bundle: &ModelBundle,
    in_x: &Tensor,
    inc_x: &Tensor,
    out_x: &Tensor,
    sigma_eval: f64,
) -> Result<DetectionReport> {
    for (name, x) in [("in", in_x), ("in-c", inc_x), ("out", out_x)] {
        if x.rows() == 0 {
            return Err(Error::Empty(format!("detection: {name} set is empty")));
        }
    }
    let in_norms = score_norm(bundle, in_x, sigma_eval)?;
    let inc_norms = score_norm(bundle, inc_x, sigma_eval)?;
    let out_norms = score_norm(bundle, out_x, sigma_eval)?;
    let msp_out_score = |x: &Tensor| -> Result<Vec<f64>> {
        let logits = bundle.forward_logits(&bundle.forward_features(x)?)?;
        Ok(msp(&logits)?.into_iter().map(|p| -p).collect())
    };
    let msp_in = msp_out_score(in_x)?;
    let msp_out = msp_out_score(out_x)?;
    let t = tpr_threshold(&in_norms, 0.95)?;
    Ok(DetectionReport {
        // a degenerate all-zero IN norm set still gets a (tiny) negative tau
        tau: -t.max(f64::MIN_POSITIVE),
        auroc: auroc(&in_norms, &out_norms)?,
        fpr95: fpr95(&in_norms, &out_norms)?,
        msp_auroc: auroc(&msp_in, &msp_out)?,
        msp_fpr95: fpr95(&msp_in, &msp_out)?,
        in_norms,
        inc_norms,
        out_norms,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{init_bundle, Activation, BundleSpec, Mlp, MlpSpec};
    use crate::numerics::{RngStream, StreamLabel};

    fn brute_auroc(i: &[f64], o: &[f64]) -> f64 {
        let mut doubled = 0u64;
        for a in o {
            for b in i {
                if a > b {
                    doubled += 2;
                } else if a == b {
                    doubled += 1;
                }
            }
        }
        doubled as f64 / (2 * i.len() * o.len()) as f64
    }

    #[test]
    fn tau_examples() {
        let v: Vec<f64> = (1..=20).map(f64::from).collect();
        assert_eq!(calibrate_tau(&v, 0.95).unwrap(), -19.0);
        assert_eq!(calibrate_tau(&[5.0], 0.95).unwrap(), -5.0);
        assert_eq!(calibrate_tau(&[2.5; 7], 0.95).unwrap(), -2.5);
        assert!(calibrate_tau(&[], 0.95).is_err());
    }

    #[test]
    fn is_out_boundary() {
        assert!(is_out(20.0, -19.0).unwrap());
        assert!(!is_out(19.0, -19.0).unwrap());
        assert!(!is_out(0.0, -0.1).unwrap());
        assert!(matches!(is_out(1.0, 0.0), Err(Error::Contract(_))));
    }

    #[test]
    fn auroc_examples() {
        assert_eq!(auroc(&[1.0, 2.0], &[3.0, 4.0]).unwrap(), 1.0);
        assert_eq!(auroc(&[1.0; 5], &[1.0; 3]).unwrap(), 0.5);
        assert_eq!(auroc(&[1.0, 3.0], &[2.0, 4.0]).unwrap(), 0.75);
        assert!(auroc(&[], &[1.0]).is_err());
    }

    #[test]
    fn auroc_matches_brute_force_and_is_rank_invariant() {
        let mut st = RngStream::new(3, StreamLabel::new("auroc"));
        for _ in 0..50 {
            let (n, m) = (1 + st.below(60), 1 + st.below(60));
            // coarse grid forces ties
            let i: Vec<f64> = (0..n).map(|_| (st.normal() * 4.0).round()).collect();
            let o: Vec<f64> = (0..m).map(|_| (st.normal() * 4.0 + 1.0).round()).collect();
            let a = auroc(&i, &o).unwrap();
            assert_eq!(a, brute_auroc(&i, &o));
            let f = |v: &Vec<f64>| v.iter().map(|x| x.exp() * 3.0 + 1.0).collect::<Vec<_>>();
            assert_eq!(auroc(&f(&i), &f(&o)).unwrap(), a);
        }
    }

    #[test]
    fn fpr95_examples() {
        let i: Vec<f64> = (1..=100).map(f64::from).collect();
        let o: Vec<f64> = (50..=149).map(f64::from).collect();
        assert_eq!(tpr_threshold(&i, 0.95).unwrap(), 95.0);
        assert_eq!(fpr95(&i, &o).unwrap(), 0.46);
        assert_eq!(fpr95(&i, &[101.0, 200.0]).unwrap(), 0.0);
        let shifted: Vec<f64> = o.iter().map(|v| v + 10.0).collect();
        assert!(fpr95(&i, &shifted).unwrap() <= fpr95(&i, &o).unwrap());
    }

    #[test]
    fn msp_examples() {
        let l = Tensor::matrix(3, 3, vec![0.0, 0.0, 0.0, 10.0, 0.0, 0.0, 110.0, 100.0, 100.0]).unwrap();
        let p = msp(&l).unwrap();
        assert!((p[0] - 1.0 / 3.0).abs() < 1e-15);
        let expect = 1.0 / (1.0 + 2.0 * (-10.0f64).exp());
        assert!((p[1] - expect).abs() < 1e-15 && (p[1] - 0.999909).abs() < 1e-6);
        assert!((p[2] - p[1]).abs() < 1e-12);
        assert!(msp(&Tensor::zeros(&[2, 1])).is_err());
    }

    fn bundle(zero_score: bool) -> ModelBundle {
        let spec = BundleSpec {
            feature: MlpSpec::new(&[2, 4, 2], Activation::Tanh),
            head: MlpSpec::new(&[2, 3], Activation::Tanh),
            score: MlpSpec::new(&[3, 5, 2], Activation::Tanh),
        };
        let mut b = init_bundle(&spec, &mut RngStream::new(1, StreamLabel::new("init"))).unwrap();
        if zero_score {
            b.score = Mlp::zeros(&spec.score).unwrap();
        }
        b
    }

    #[test]
    fn score_norm_properties() {
        let x = RngStream::new(2, StreamLabel::new("x")).gaussian(&[7, 2]);
        assert!(score_norm(&bundle(true), &x, 0.1).unwrap().iter().all(|&n| n == 0.0));
        let b = bundle(false);
        let n = score_norm(&b, &x, 0.1).unwrap();
        let perm = [3usize, 0, 6, 1, 5, 2, 4];
        let np = score_norm(&b, &x.select_rows(&perm), 0.1).unwrap();
        for (k, &p) in perm.iter().enumerate() {
            assert_eq!(np[k], n[p]);
        }
        assert!(score_norm(&b, &Tensor::zeros(&[2, 3]), 0.1).is_err());
        assert!(score_norm(&b, &x, 0.0).is_err());
    }

    #[test]
    fn report_consistency() {
        let b = bundle(false);
        let x = RngStream::new(2, StreamLabel::new("x")).gaussian(&[40, 2]);
        let r = build_report(&b, &x, &x, &x, 0.1).unwrap();
        assert_eq!(r.auroc, 0.5);
        assert_eq!(r.fpr95, fpr95(&r.in_norms, &r.out_norms).unwrap());
        assert!(r.tau < 0.0);
        assert!(build_report(&b, &x, &x, &Tensor::zeros(&[0, 2]), 0.1).is_err());
    }
}
