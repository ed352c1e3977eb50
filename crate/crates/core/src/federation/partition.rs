//! Dirichlet non-IID label partitioning.

use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::RngStream;

/// Client index lists plus the per-class proportions that produced them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Partition {
    /// Sorted dataset indices per client.
    pub clients: Vec<Vec<usize>>,
    /// `proportions[j][k]`: share of class `j` assigned to client `k`.
    pub proportions: Vec<Vec<f64>>,
    pub alpha: f64,
    pub seed: u64,
}

/// One draw from `Dir(α·1_k)`. Gamma variates are formed in log space
/// (`ln G_α = ln G_{α+1} + ln U / α`) so tiny `α` cannot underflow to an
/// all-zero vector.
pub fn sample_dirichlet(alpha: f64, k: usize, stream: &mut RngStream) -> Result<Vec<f64>> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::domain("dirichlet", format!("alpha {alpha} must be > 0")));
    }
    if k == 0 {
        return Err(Error::domain("dirichlet", "need at least one component"));
    }
    let gamma = Gamma::new(alpha + 1.0, 1.0).map_err(|e| Error::domain("dirichlet", e.to_string()))?;
    let logs: Vec<f64> = (0..k)
        .map(|_| {
            let g: f64 = gamma.sample(stream);
            // uniform in (0, 1]
            let u = 1.0 - stream.uniform();
            g.ln() + u.ln() / alpha
        })
        .collect();
    let top = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logs.iter().map(|l| (l - top).exp()).collect();
    let sum: f64 = w.iter().sum();
    Ok(w.into_iter().map(|v| v / sum).collect())
}

/// Integer counts summing to `total`, proportional to `shares`: floors first,
/// then the leftover units go to the largest fractional parts (lower index
/// wins ties).
pub fn largest_remainder(total: usize, shares: &[f64]) -> Vec<usize> {
    let exact: Vec<f64> = shares.iter().map(|p| p * total as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..shares.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = exact[a] - exact[a].floor();
        let fb = exact[b] - exact[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &k in order.iter().cycle().take(total.saturating_sub(assigned)) {
        counts[k] += 1;
    }
    counts
}

fn class_members(labels: &[usize], classes: usize) -> Result<Vec<Vec<usize>>> {
    let mut members = vec![Vec::new(); classes];
    for (i, &y) in labels.iter().enumerate() {
        if y >= classes {
            return Err(Error::domain(
                "partition",
                format!("label {y} at index {i} >= {classes} classes"),
            ));
        }
        members[y].push(i);
    }
    Ok(members)
}

fn assign(members: Vec<Vec<usize>>, proportions: &[Vec<f64>], k: usize, stream: &RngStream) -> Vec<Vec<usize>> {
    let mut clients = vec![Vec::new(); k];
    for (j, mut idx) in members.into_iter().enumerate() {
        stream.fork("shuffle", j as u64).shuffle(&mut idx);
        let counts = largest_remainder(idx.len(), &proportions[j]);
        let mut start = 0;
        for (client, c) in clients.iter_mut().zip(counts) {
            client.extend_from_slice(&idx[start..start + c]);
            start += c;
        }
    }
    for c in &mut clients {
        c.sort_unstable();
    }
    clients
}

/// Splits `labels` over `k` clients with per-class shares `p_j ~ Dir(α)`.
pub fn dirichlet_partition(
    labels: &[usize],
    classes: usize,
    k: usize,
    alpha: f64,
    stream: &RngStream,
) -> Result<Partition> {
    if labels.is_empty() {
        return Err(Error::Empty("cannot partition an empty dataset".into()));
    }
    if k == 0 {
        return Err(Error::domain("partition", "need at least one client"));
    }
    let members = class_members(labels, classes)?;
    let proportions = (0..classes)
        .map(|j| sample_dirichlet(alpha, k, &mut stream.fork("dirichlet", j as u64)))
        .collect::<Result<Vec<_>>>()?;
    let clients = assign(members, &proportions, k, &stream.fork("assign", 0));
    Ok(Partition {
        clients,
        proportions,
        alpha,
        seed: stream.seed(),
    })
}

impl Partition {
    pub fn num_clients(&self) -> usize {
        self.clients.len()
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.clients.iter().map(Vec::len).collect()
    }

    /// `w_k = |D_k| / Σ_j |D_j|`.
    pub fn weights(&self) -> Vec<f64> {
        size_weights(&self.sizes())
    }

    /// Splits another labeled set (e.g. a test split) with the same per-class
    /// proportions, so each client's evaluation data matches its label mix.
    pub fn apply(&self, labels: &[usize], stream: &RngStream) -> Result<Vec<Vec<usize>>> {
        let members = class_members(labels, self.proportions.len())?;
        Ok(assign(members, &self.proportions, self.clients.len(), stream))
    }

    /// Checks that the client lists form a set partition of `0..n`.
    pub fn validate(&self, n: usize) -> Result<()> {
        let mut seen = vec![false; n];
        for (k, c) in self.clients.iter().enumerate() {
            for &i in c {
                if i >= n || seen[i] {
                    return Err(Error::Contract(format!(
                        "client {k}: index {i} out of range or repeated"
                    )));
                }
                seen[i] = true;
            }
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(Error::Contract(format!("index {i} unassigned")));
        }
        for (j, p) in self.proportions.iter().enumerate() {
            let s: f64 = p.iter().sum();
            if (s - 1.0).abs() > 1e-9 {
                return Err(Error::Contract(format!("class {j} proportions sum to {s}")));
            }
        }
        Ok(())
    }
}

/// Size-proportional weights; all zero sizes is an error.
pub fn size_weights(sizes: &[usize]) -> Vec<f64> {
    let total: usize = sizes.iter().sum();
    sizes.iter().map(|&n| n as f64 / total as f64).collect()
}
