use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SgdConfig {
    pub lr: f64,
    #[serde(default)]
    pub momentum: f64,
    #[serde(default)]
    pub weight_decay: f64,
}

impl SgdConfig {
    pub fn plain(lr: f64) -> Self {
        SgdConfig {
            lr,
            momentum: 0.0,
            weight_decay: 0.0,
        }
    }
}

/// Momentum buffer; empty until the first step.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SgdState {
    pub buffer: Vec<f64>,
}

/// One step of SGD with heavy-ball momentum and L2 weight decay:
/// `g' = g + wd·p`, `buf = m·buf + g'`, `p -= lr·buf`.
pub fn sgd_step(params: &mut [f64], grads: &[f64], cfg: &SgdConfig, state: &mut SgdState) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::dim(
            "sgd_step",
            format!("{} params, {} grads", params.len(), grads.len()),
        ));
    }
    if !(cfg.lr >= 0.0) {
        return Err(Error::domain("sgd_step", format!("learning rate {}", cfg.lr)));
    }
    if state.buffer.is_empty() {
        state.buffer = vec![0.0; params.len()];
    } else if state.buffer.len() != params.len() {
        return Err(Error::dim(
            "sgd_step",
            format!("state holds {}, params {}", state.buffer.len(), params.len()),
        ));
    }
    for ((p, &g), b) in params.iter_mut().zip(grads).zip(state.buffer.iter_mut()) {
        let g = g + cfg.weight_decay * *p;
        *b = cfg.momentum * *b + g;
        *p -= cfg.lr * *b;
    }
    Ok(())
}
