//! Plot data: latent scatter points, score vector field, and score norms.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::csv_io::format_f64;
use crate::detection::DetectionReport;
use crate::error::{Error, Result};
use crate::models::{forward_score, Mlp};
use crate::numerics::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PointKind {
    Target,
    Generated,
    In,
    Inc,
    Out,
}

impl PointKind {
    pub const ALL: [PointKind; 5] = [
        PointKind::Target,
        PointKind::Generated,
        PointKind::In,
        PointKind::Inc,
        PointKind::Out,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PointKind::Target => "target",
            PointKind::Generated => "generated",
            PointKind::In => "in",
            PointKind::Inc => "inc",
            PointKind::Out => "out",
        }
    }

    fn color(self) -> &'static str {
        match self {
            PointKind::Target => "#d62728",
            PointKind::Generated => "#1f77b4",
            PointKind::In => "#2ca02c",
            PointKind::Inc => "#ff7f0e",
            PointKind::Out => "#7f7f7f",
        }
    }
}

/// An `n × n` lattice over `[lo, hi]²`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub n: usize,
    pub lo: [f64; 2],
    pub hi: [f64; 2],
}

impl GridSpec {
    /// Bounding box of `sets`, padded by 10% per side.
    pub fn covering(sets: &[&Tensor], n: usize) -> GridSpec {
        let mut lo = [f64::INFINITY; 2];
        let mut hi = [f64::NEG_INFINITY; 2];
        for t in sets {
            for i in 0..t.rows() {
                for c in 0..2 {
                    lo[c] = lo[c].min(t.row(i)[c]);
                    hi[c] = hi[c].max(t.row(i)[c]);
                }
            }
        }
        for c in 0..2 {
            if !(lo[c] < hi[c]) {
                lo[c] = -1.0;
                hi[c] = 1.0;
            }
            let pad = 0.1 * (hi[c] - lo[c]);
            lo[c] -= pad;
            hi[c] += pad;
        }
        GridSpec { n, lo, hi }
    }

    pub fn points(&self) -> Tensor {
        let step = |c: usize, i: usize| {
            if self.n == 1 {
                self.lo[c]
            } else {
                self.lo[c] + (self.hi[c] - self.lo[c]) * i as f64 / (self.n - 1) as f64
            }
        };
        let mut data = Vec::with_capacity(2 * self.n * self.n);
        for j in 0..self.n {
            for i in 0..self.n {
                data.push(step(0, i));
                data.push(step(1, j));
            }
        }
        Tensor::new(vec![self.n * self.n, 2], data).expect("grid shape")
    }
}

fn require_2d(op: &'static str, dim: usize) -> Result<()> {
    if dim != 2 {
        return Err(Error::dim(
            op,
            format!("plot export needs a 2-d latent space, got {dim}"),
        ));
    }
    Ok(())
}

/// Rows `(x, y, sx, sy)` of the score field on the grid.
pub fn score_field(score: &Mlp, sigma: f64, grid: &GridSpec) -> Result<Tensor> {
    require_2d("score_field", score.spec().output_dim())?;
    let pts = grid.points();
    let s = forward_score(score, &pts, sigma)?;
    let mut data = Vec::with_capacity(4 * pts.rows());
    for i in 0..pts.rows() {
        data.extend_from_slice(pts.row(i));
        data.extend_from_slice(s.row(i));
    }
    Tensor::new(vec![pts.rows(), 4], data)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn points_csv(sets: &[(PointKind, &Tensor)]) -> Result<String> {
    let mut s = String::from("x,y,kind\n");
    for (kind, t) in sets {
        require_2d("points", t.cols())?;
        for i in 0..t.rows() {
            let r = t.row(i);
            let _ = writeln!(s, "{},{},{}", format_f64(r[0]), format_f64(r[1]), kind.as_str());
        }
    }
    Ok(s)
}

pub fn field_csv(field: &Tensor) -> String {
    let mut s = String::from("x,y,sx,sy\n");
    for i in 0..field.rows() {
        let r: Vec<String> = field.row(i).iter().map(|&v| format_f64(v)).collect();
        let _ = writeln!(s, "{}", r.join(","));
    }
    s
}

pub fn norms_csv(report: &DetectionReport) -> String {
    let mut s = String::from("split,norm\n");
    for (name, v) in [
        ("in", &report.in_norms),
        ("inc", &report.inc_norms),
        ("out", &report.out_norms),
    ] {
        for n in v.iter() {
            let _ = writeln!(s, "{name},{}", format_f64(*n));
        }
    }
    s
}

/// Minimal scatter plot, one circle per point.
pub fn render_svg(sets: &[(PointKind, &Tensor)], size: u32) -> String {
    let tensors: Vec<&Tensor> = sets.iter().map(|(_, t)| *t).collect();
    let g = GridSpec::covering(&tensors, 2);
    let size_f = f64::from(size);
    let sx = |x: f64| (x - g.lo[0]) / (g.hi[0] - g.lo[0]) * size_f;
    let sy = |y: f64| size_f - (y - g.lo[1]) / (g.hi[1] - g.lo[1]) * size_f;
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{size}\" height=\"{size}\" viewBox=\"0 0 {size} {size}\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
    );
    for (kind, t) in sets {
        let _ = writeln!(
            s,
            "<g fill=\"{}\" fill-opacity=\"0.6\" class=\"{}\">",
            kind.color(),
            kind.as_str()
        );
        for i in 0..t.rows() {
            let r = t.row(i);
            let _ = writeln!(s, "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"1.6\"/>", sx(r[0]), sy(r[1]));
        }
        s.push_str("</g>\n");
    }
    s.push_str("</svg>\n");
    s
}

/// Everything needed for the plot files of one model.
pub struct PlotData<'a> {
    pub points: Vec<(PointKind, &'a Tensor)>,
    pub score: &'a Mlp,
    pub sigma: f64,
    pub grid: usize,
    pub report: Option<&'a DetectionReport>,
    pub svg: bool,
}

/// Writes `points.csv`, `field.csv`, `norms.csv` and optionally `scatter.svg`.
pub fn export_plot_data(data: &PlotData, dir: &Path) -> Result<Vec<PathBuf>> {
    require_2d("export", data.score.spec().output_dim())?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = Vec::new();
    let p = dir.join("points.csv");
    write_text(&p, &points_csv(&data.points)?)?;
    files.push(p);
    let tensors: Vec<&Tensor> = data.points.iter().map(|(_, t)| *t).collect();
    let grid = GridSpec::covering(&tensors, data.grid);
    let p = dir.join("field.csv");
    write_text(&p, &field_csv(&score_field(data.score, data.sigma, &grid)?))?;
    files.push(p);
    if let Some(r) = data.report {
        let p = dir.join("norms.csv");
        write_text(&p, &norms_csv(r))?;
        files.push(p);
    }
    if data.svg {
        let p = dir.join("scatter.svg");
        write_text(&p, &render_svg(&data.points, 480))?;
        files.push(p);
    }
    Ok(files)
}
