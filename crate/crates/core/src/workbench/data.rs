//! Synthetic benchmarks: labeled IN data, a covariate-shifted IN-C copy, and
//! a semantically shifted OUT set.

use std::f64::consts::TAU;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use super::csv_io::load_csv;
use super::shift::{covariate_shift, ShiftSpec};
use crate::error::{Error, Result};
use crate::numerics::{RngStream, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSet {
    pub x: Tensor,
    pub y: Vec<usize>,
}

impl LabeledSet {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn subset(&self, idx: &[usize]) -> LabeledSet {
        LabeledSet {
            x: self.x.select_rows(idx),
            y: idx.iter().map(|&i| self.y[i]).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetBundle {
    pub train: LabeledSet,
    pub test: LabeledSet,
    /// Independently drawn IN samples after the covariate shift.
    pub inc: LabeledSet,
    pub out: Tensor,
    pub shift: ShiftSpec,
    pub input_dim: usize,
    pub classes: usize,
    pub provenance: String,
}

/// Where OUT samples of the ring come from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OutKind {
    /// Modes on a circle of radius `3R`, offset by half the mode spacing.
    #[default]
    FarRing,
    /// Uniform over the annulus `2.5R ≤ r ≤ 4R`.
    Annulus,
}

/// Generator parameters; `kind` selects the family.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum GeneratorSpec {
    GaussianRing {
        modes: usize,
        radius: f64,
        std: f64,
        /// Class of mode `m` is `m mod classes`.
        classes: usize,
        #[serde(default)]
        out: OutKind,
    },
    TwoMoons {
        noise: f64,
    },
    GridMixture {
        side: usize,
        spacing: f64,
        std: f64,
    },
    /// Files with header `x0,…,x{d−1},label`; the OUT file may omit labels.
    Csv {
        train: PathBuf,
        test: PathBuf,
        out: PathBuf,
    },
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        GeneratorSpec::GaussianRing {
            modes: 8,
            radius: 2.0,
            std: 0.2,
            classes: 8,
            out: OutKind::FarRing,
        }
    }
}

impl GeneratorSpec {
    pub fn classes(&self) -> Option<usize> {
        match self {
            GeneratorSpec::GaussianRing { classes, .. } => Some(*classes),
            GeneratorSpec::TwoMoons { .. } => Some(2),
            GeneratorSpec::GridMixture { side, .. } => Some(side * side),
            GeneratorSpec::Csv { .. } => None,
        }
    }

    pub fn validate(&self, path: &str) -> Result<()> {
        let pos = |v: f64, name: &str| -> Result<()> {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::config(format!("{path}.{name}"), "must be finite and > 0"))
            }
        };
        match self {
            GeneratorSpec::GaussianRing {
                modes,
                radius,
                std,
                classes,
                ..
            } => {
                if *modes < 2 {
                    return Err(Error::config(format!("{path}.modes"), "must be >= 2"));
                }
                if *classes < 2 || classes > modes {
                    return Err(Error::config(format!("{path}.classes"), "must lie in [2, modes]"));
                }
                pos(*radius, "radius")?;
                pos(*std, "std")
            }
            GeneratorSpec::TwoMoons { noise } => {
                if *noise >= 0.0 && noise.is_finite() {
                    Ok(())
                } else {
                    Err(Error::config(format!("{path}.noise"), "must be finite and >= 0"))
                }
            }
            GeneratorSpec::GridMixture { side, spacing, std } => {
                if *side < 2 {
                    return Err(Error::config(format!("{path}.side"), "must be >= 2"));
                }
                pos(*spacing, "spacing")?;
                pos(*std, "std")
            }
            GeneratorSpec::Csv { .. } => Ok(()),
        }
    }
}

/// Mode centers of the ring.
pub fn ring_means(modes: usize, radius: f64) -> Vec<[f64; 2]> {
    (0..modes)
        .map(|m| {
            let a = TAU * m as f64 / modes as f64;
            [radius * a.cos(), radius * a.sin()]
        })
        .collect()
}

/// Isotropic Gaussian noise with norm strictly below `3·std`.
fn truncated_noise(std: f64, stream: &mut RngStream) -> [f64; 2] {
    loop {
        let v = [std * stream.normal(), std * stream.normal()];
        if v[0] * v[0] + v[1] * v[1] < 9.0 * std * std {
            return v;
        }
    }
}

fn from_points(points: Vec<[f64; 2]>) -> Tensor {
    let n = points.len();
    Tensor::new(vec![n, 2], points.into_iter().flatten().collect()).expect("row-major 2d points")
}

/// `n` labeled IN samples; modes are visited round-robin so labels balance.
pub fn sample_in(spec: &GeneratorSpec, n: usize, stream: &mut RngStream) -> Result<LabeledSet> {
    let mut pts = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    match spec {
        GeneratorSpec::GaussianRing {
            modes,
            radius,
            std,
            classes,
            ..
        } => {
            let means = ring_means(*modes, *radius);
            for i in 0..n {
                let m = i % modes;
                let e = truncated_noise(*std, stream);
                pts.push([means[m][0] + e[0], means[m][1] + e[1]]);
                y.push(m % classes);
            }
        }
        GeneratorSpec::TwoMoons { noise } => {
            for i in 0..n {
                let c = i % 2;
                let t = std::f64::consts::PI * stream.uniform();
                let (px, py) = if c == 0 {
                    (t.cos(), t.sin())
                } else {
                    (1.0 - t.cos(), 0.5 - t.sin())
                };
                pts.push([px + noise * stream.normal(), py + noise * stream.normal()]);
                y.push(c);
            }
        }
        GeneratorSpec::GridMixture { side, spacing, std } => {
            let offset = spacing * (*side as f64 - 1.0) / 2.0;
            for i in 0..n {
                let m = i % (side * side);
                let (gx, gy) = ((m % side) as f64, (m / side) as f64);
                pts.push([
                    gx * spacing - offset + std * stream.normal(),
                    gy * spacing - offset + std * stream.normal(),
                ]);
                y.push(m);
            }
        }
        GeneratorSpec::Csv { .. } => return Err(Error::Contract("csv datasets are loaded, not sampled".into())),
    }
    Ok(LabeledSet { x: from_points(pts), y })
}

/// `n` OUT samples away from every IN mode.
pub fn sample_out(spec: &GeneratorSpec, n: usize, stream: &mut RngStream) -> Result<Tensor> {
    let mut pts = Vec::with_capacity(n);
    match spec {
        GeneratorSpec::GaussianRing {
            modes,
            radius,
            std,
            out,
            ..
        } => match out {
            OutKind::FarRing => {
                let half = TAU / (2.0 * *modes as f64);
                for i in 0..n {
                    let a = TAU * (i % modes) as f64 / *modes as f64 + half;
                    let e = truncated_noise(*std, stream);
                    pts.push([3.0 * radius * a.cos() + e[0], 3.0 * radius * a.sin() + e[1]]);
                }
            }
            OutKind::Annulus => {
                for _ in 0..n {
                    let a = TAU * stream.uniform();
                    let r = radius * (2.5 + 1.5 * stream.uniform());
                    pts.push([r * a.cos(), r * a.sin()]);
                }
            }
        },
        GeneratorSpec::TwoMoons { noise } => {
            // a third, displaced arc
            for _ in 0..n {
                let t = std::f64::consts::PI * stream.uniform();
                pts.push([
                    0.5 + t.cos() + noise * stream.normal(),
                    2.0 + t.sin() + noise * stream.normal(),
                ]);
            }
        }
        GeneratorSpec::GridMixture { side, spacing, std } => {
            // cell centers between grid points
            let offset = spacing * (*side as f64 - 1.0) / 2.0;
            let cells = (side - 1) * (side - 1);
            for i in 0..n {
                let m = i % cells;
                let (gx, gy) = ((m % (side - 1)) as f64 + 0.5, (m / (side - 1)) as f64 + 0.5);
                pts.push([
                    gx * spacing - offset + std * stream.normal(),
                    gy * spacing - offset + std * stream.normal(),
                ]);
            }
        }
        GeneratorSpec::Csv { .. } => return Err(Error::Contract("csv datasets are loaded, not sampled".into())),
    }
    Ok(from_points(pts))
}

/// Sizes of each generated split.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSizes {
    pub train: usize,
    pub test: usize,
    pub out: usize,
}

pub fn generate_dataset(
    spec: &GeneratorSpec,
    sizes: SplitSizes,
    shift: ShiftSpec,
    stream: &RngStream,
) -> Result<DatasetBundle> {
    spec.validate("dataset")?;
    let (train, test, inc_base, out, classes, provenance) = match spec {
        GeneratorSpec::Csv { train, test, out } => {
            let (tx, ty) = load_csv(train, true)?;
            let (sx, sy) = load_csv(test, true)?;
            let (ox, _) = load_csv(out, false)?;
            let (ty, sy) = (ty.unwrap_or_default(), sy.unwrap_or_default());
            let classes = ty.iter().chain(&sy).max().map_or(0, |m| m + 1);
            if classes < 2 {
                return Err(Error::config("dataset", "csv data must contain at least 2 classes"));
            }
            if sx.cols() != tx.cols() || ox.cols() != tx.cols() {
                return Err(Error::config("dataset", "csv splits disagree on feature dimension"));
            }
            let provenance = format!("csv: {}, {}, {}", train.display(), test.display(), out.display());
            let test = LabeledSet { x: sx, y: sy };
            (LabeledSet { x: tx, y: ty }, test.clone(), test, ox, classes, provenance)
        }
        _ => {
            let train = sample_in(spec, sizes.train, &mut stream.fork("train", 0))?;
            let test = sample_in(spec, sizes.test, &mut stream.fork("test", 0))?;
            let inc_base = sample_in(spec, sizes.test, &mut stream.fork("inc", 0))?;
            let out = sample_out(spec, sizes.out, &mut stream.fork("out", 0))?;
            let classes = spec.classes().unwrap_or(2);
            let provenance = serde_json::to_string(spec).map_err(|e| Error::Serde(e.to_string()))?;
            (train, test, inc_base, out, classes, provenance)
        }
    };
    let inc = LabeledSet {
        x: covariate_shift(&inc_base.x, shift, &mut stream.fork("shift", 0))?,
        y: inc_base.y,
    };
    Ok(DatasetBundle {
        input_dim: train.x.cols(),
        train,
        test,
        inc,
        out,
        shift,
        classes,
        provenance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::StreamLabel;
    use crate::workbench::shift::ShiftKind;

    fn stream() -> RngStream {
        RngStream::new(11, StreamLabel::new("data"))
    }

    #[test]
    fn ring_counts_and_means() {
        let spec = GeneratorSpec::default();
        let set = sample_in(&spec, 1000, &mut stream()).unwrap();
        assert_eq!(set.len(), 1000);
        let mut counts = [0usize; 8];
        set.y.iter().for_each(|&c| counts[c] += 1);
        assert!(counts.iter().all(|&c| c == 125));
        for m in ring_means(8, 2.0) {
            assert!((m[0].hypot(m[1]) - 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn out_is_far_from_every_mode() {
        let (r, s) = (2.0, 0.2);
        let spec = GeneratorSpec::default();
        let out = sample_out(&spec, 2000, &mut stream()).unwrap();
        let means = ring_means(8, r);
        let min = (0..out.rows())
            .flat_map(|i| {
                let p = out.row(i).to_vec();
                means.iter().map(move |m| (p[0] - m[0]).hypot(p[1] - m[1]))
            })
            .fold(f64::INFINITY, f64::min);
        assert!(min > 2.0 * r - 3.0 * s, "{min}");
    }

    #[test]
    fn bundle_is_consistent() {
        let shift = ShiftSpec {
            kind: ShiftKind::Rotate,
            severity: 3,
        };
        let sizes = SplitSizes {
            train: 160,
            test: 80,
            out: 40,
        };
        for spec in [
            GeneratorSpec::default(),
            GeneratorSpec::TwoMoons { noise: 0.1 },
            GeneratorSpec::GridMixture {
                side: 3,
                spacing: 2.0,
                std: 0.2,
            },
        ] {
            let b = generate_dataset(&spec, sizes, shift, &stream()).unwrap();
            assert_eq!(b.inc.len(), 80);
            assert_eq!(b.out.cols(), b.input_dim);
            assert_eq!(b.classes, spec.classes().unwrap());
            assert!(b.train.y.iter().all(|&c| c < b.classes));
            assert_eq!(b, generate_dataset(&spec, sizes, shift, &stream()).unwrap());
        }
    }
}
