//! Covariate shifts with a fixed severity table.
//!
//! | kind   | magnitude at severity `s`            |
//! |--------|--------------------------------------|
//! | rotate | `5°·s` about the origin              |
//! | jitter | Gaussian noise, std `0.05·s·std(X)`  |
//! | scale  | multiply by `1 + 0.05·s`             |

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{RngStream, Tensor};
use crate::sag::rotate;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ShiftKind {
    Rotate,
    Jitter,
    Scale,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ShiftSpec {
    pub kind: ShiftKind,
    pub severity: u8,
}

impl Default for ShiftSpec {
    fn default() -> Self {
        ShiftSpec {
            kind: ShiftKind::Rotate,
            severity: 3,
        }
    }
}

impl ShiftSpec {
    pub fn validate(&self, path: &str) -> Result<()> {
        if !(1..=5).contains(&self.severity) {
            return Err(Error::config(format!("{path}.severity"), "must lie in 1..=5"));
        }
        Ok(())
    }
}

impl ShiftKind {
    /// Degrees for rotate, relative noise for jitter, factor for scale.
    pub fn magnitude(self, severity: u8) -> f64 {
        let s = f64::from(severity);
        match self {
            ShiftKind::Rotate => 5.0 * s,
            ShiftKind::Jitter => 0.05 * s,
            ShiftKind::Scale => 1.0 + 0.05 * s,
        }
    }
}

/// Standard deviation over all entries of `x`.
fn pooled_std(x: &Tensor) -> f64 {
    let n = x.len() as f64;
    let mean = x.data().iter().sum::<f64>() / n;
    (x.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt()
}

pub fn covariate_shift(x: &Tensor, spec: ShiftSpec, stream: &mut RngStream) -> Result<Tensor> {
    spec.validate("shift")?;
    let m = spec.kind.magnitude(spec.severity);
    match spec.kind {
        ShiftKind::Rotate => rotate(x, m),
        ShiftKind::Scale => Ok(x.map(|v| v * m)),
        ShiftKind::Jitter => {
            if x.is_empty() {
                return Ok(x.clone());
            }
            let std = m * pooled_std(x);
            let noise = stream.gaussian(x.shape());
            let data = x.data().iter().zip(noise.data()).map(|(a, b)| a + std * b).collect();
            Tensor::new(x.shape().to_vec(), data)
        }
    }
}
