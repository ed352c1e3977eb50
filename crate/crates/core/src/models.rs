//! Multilayer perceptrons for the feature extractor, classifier head and
//! noise-conditional score network, bundled as the unit clients exchange.
//!
//! Flat parameter order: feature extractor, then head, then score network;
//! within a network layers in order, each as its weight matrix (row-major,
//! `in × out`) followed by its bias.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::tensor::{self, Tensor};
use crate::numerics::{Gradients, RngStream, Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Relu => v.max(0.0),
            Activation::Tanh => v.tanh(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpSpec {
    /// input, hidden..., output
    pub widths: Vec<usize>,
    pub activation: Activation,
}

impl MlpSpec {
    pub fn new(widths: &[usize], activation: Activation) -> Self {
        MlpSpec {
            widths: widths.to_vec(),
            activation,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().expect("validated widths")
    }

    pub fn hidden_layers(&self) -> usize {
        self.widths.len().saturating_sub(2)
    }

    /// Σ over layers of `in·out + out`.
    pub fn param_count(&self) -> usize {
        self.widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    pub fn validate(&self, path: &str) -> Result<()> {
        if self.widths.len() < 2 {
            return Err(Error::config(path, "needs at least input and output widths"));
        }
        if self.widths.contains(&0) {
            return Err(Error::config(path, "all widths must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    spec: MlpSpec,
    layers: Vec<Linear>,
}

impl Mlp {
    /// He-scaled Gaussian weights, zero biases.
    pub fn init(spec: &MlpSpec, stream: &mut RngStream) -> Result<Mlp> {
        spec.validate("mlp")?;
        let layers = spec
            .widths
            .windows(2)
            .map(|w| {
                let scale = (2.0 / w[0] as f64).sqrt();
                let weight = stream.gaussian(&[w[0], w[1]]).map(|v| v * scale);
                Linear {
                    weight,
                    bias: Tensor::zeros(&[w[1]]),
                }
            })
            .collect();
        Ok(Mlp {
            spec: spec.clone(),
            layers,
        })
    }

    pub fn zeros(spec: &MlpSpec) -> Result<Mlp> {
        spec.validate("mlp")?;
        let layers = spec
            .widths
            .windows(2)
            .map(|w| Linear {
                weight: Tensor::zeros(&[w[0], w[1]]),
                bias: Tensor::zeros(&[w[1]]),
            })
            .collect();
        Ok(Mlp {
            spec: spec.clone(),
            layers,
        })
    }

    /// A single linear layer `[dim, dim]` with identity weight and zero
    /// bias; its forward pass returns the input exactly.
    pub fn identity(dim: usize) -> Result<Mlp> {
        let spec = MlpSpec::new(&[dim, dim], Activation::Tanh);
        let mut m = Mlp::zeros(&spec)?;
        m.layers[0].weight = Tensor::identity(dim);
        Ok(m)
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn layers(&self) -> &[Linear] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Linear] {
        &mut self.layers
    }

    pub fn param_count(&self) -> usize {
        self.spec.param_count()
    }

    /// `[W_0, b_0, W_1, b_1, …]`.
    pub fn param_tensors(&self) -> Vec<Tensor> {
        self.layers
            .iter()
            .flat_map(|l| [l.weight.clone(), l.bias.clone()])
            .collect()
    }

    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        self.write_flat(&mut out);
        out
    }

    fn write_flat(&self, out: &mut Vec<f64>) {
        for l in &self.layers {
            out.extend_from_slice(l.weight.data());
            out.extend_from_slice(l.bias.data());
        }
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::dim(
                "set_flat",
                format!("{} values for {} parameters", flat.len(), self.param_count()),
            ));
        }
        let mut off = 0;
        for l in &mut self.layers {
            for t in [&mut l.weight, &mut l.bias] {
                let n = t.len();
                t.data_mut().copy_from_slice(&flat[off..off + n]);
                off += n;
            }
        }
        Ok(())
    }

    /// Gradient-free forward pass.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        if x.shape().len() != 2 || x.cols() != self.spec.input_dim() {
            return Err(Error::dim(
                "mlp forward",
                format!("input {:?}, expected [_, {}]", x.shape(), self.spec.input_dim()),
            ));
        }
        let last = self.layers.len() - 1;
        let mut h = x.clone();
        for (i, l) in self.layers.iter().enumerate() {
            h = tensor::affine(&h, &l.weight, &l.bias)?;
            if i < last {
                let act = self.spec.activation;
                h = h.map(|v| act.apply(v));
            }
        }
        Ok(h)
    }

    /// Registers the parameters on `tape`, as gradient leaves when
    /// `trainable` and as constants otherwise.
    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> BoundMlp<'t> {
        let put = |t: &Tensor| {
            if trainable {
                tape.leaf(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        BoundMlp {
            params: self.layers.iter().map(|l| (put(&l.weight), put(&l.bias))).collect(),
            activation: self.spec.activation,
            input_dim: self.spec.input_dim(),
        }
    }
}

/// An [`Mlp`] whose parameters live on a tape.
pub struct BoundMlp<'t> {
    params: Vec<(Var<'t>, Var<'t>)>,
    activation: Activation,
    input_dim: usize,
}

impl<'t> BoundMlp<'t> {
    /// Builds the network from tape variables ordered as
    /// [`Mlp::param_tensors`].
    pub fn from_vars(spec: &MlpSpec, vars: &[Var<'t>]) -> Result<BoundMlp<'t>> {
        let layers = spec.widths.len() - 1;
        if vars.len() != 2 * layers {
            return Err(Error::dim(
                "bound mlp",
                format!("{} vars for {layers} layers", vars.len()),
            ));
        }
        for (l, w) in spec.widths.windows(2).enumerate() {
            if vars[2 * l].shape() != [w[0], w[1]] || vars[2 * l + 1].shape() != [w[1]] {
                return Err(Error::dim("bound mlp", format!("layer {l} shapes")));
            }
        }
        Ok(BoundMlp {
            params: vars.chunks_exact(2).map(|p| (p[0], p[1])).collect(),
            activation: spec.activation,
            input_dim: spec.input_dim(),
        })
    }

    pub fn forward(&self, x: Var<'t>) -> Result<Var<'t>> {
        let shape = x.shape();
        if shape.len() != 2 || shape[1] != self.input_dim {
            return Err(Error::dim(
                "mlp forward",
                format!("input {shape:?}, expected [_, {}]", self.input_dim),
            ));
        }
        let last = self.params.len() - 1;
        let mut h = x;
        for (i, (w, b)) in self.params.iter().enumerate() {
            h = h.matmul(*w)?.add(*b)?;
            if i < last {
                h = match self.activation {
                    Activation::Relu => h.relu(),
                    Activation::Tanh => h.tanh(),
                };
            }
        }
        Ok(h)
    }

    /// Parameter gradients in flat order.
    pub fn flat_grad(&self, grads: &Gradients) -> Vec<f64> {
        let mut out = Vec::new();
        for (w, b) in &self.params {
            out.extend_from_slice(grads.get(*w).data());
            out.extend_from_slice(grads.get(*b).data());
        }
        out
    }
}

/// Appends a `ln σ` column to a batch of latents.
pub fn score_input(z: &Tensor, sigma: f64) -> Result<Tensor> {
    let d = z.cols();
    let mut data = Vec::with_capacity(z.rows() * (d + 1));
    let ls = sigma.ln();
    for i in 0..z.rows() {
        data.extend_from_slice(z.row(i));
        data.push(ls);
    }
    Tensor::new(vec![z.rows(), d + 1], data)
}

fn check_sigma(sigma: f64) -> Result<()> {
    if sigma > 0.0 && sigma.is_finite() {
        Ok(())
    } else {
        Err(Error::domain("score", format!("noise scale {sigma} must be > 0")))
    }
}

/// `s_θ(z, σ)`: the network sees `[z, ln σ]` and its output is divided by σ.
pub fn forward_score(score: &Mlp, z: &Tensor, sigma: f64) -> Result<Tensor> {
    check_sigma(sigma)?;
    let raw = score.forward(&score_input(z, sigma)?)?;
    let inv = 1.0 / sigma;
    Ok(raw.map(|v| v * inv))
}

/// Tape version of [`forward_score`], differentiable in the latents and in
/// whatever parameters `score` was bound with.
pub fn forward_score_var<'t>(tape: &'t Tape, score: &BoundMlp<'t>, z: Var<'t>, sigma: f64) -> Result<Var<'t>> {
    check_sigma(sigma)?;
    let rows = z.value().rows();
    let col = tape.constant(Tensor::full(&[rows, 1], sigma.ln()));
    let input = Var::concat_last(&[z, col])?;
    Ok(score.forward(input)?.scale(1.0 / sigma))
}

/// Anything that evaluates a score field on a batch of points.
pub trait ScoreField {
    fn dim(&self) -> usize;
    fn score(&self, z: &Tensor, sigma: f64) -> Result<Tensor>;
}

impl ScoreField for Mlp {
    fn dim(&self) -> usize {
        self.spec.output_dim()
    }

    fn score(&self, z: &Tensor, sigma: f64) -> Result<Tensor> {
        forward_score(self, z, sigma)
    }
}

/// A closed-form score `z ↦ f(z)`, ignoring σ.
pub struct AnalyticScore<F> {
    dim: usize,
    f: F,
}

impl<F: Fn(&[f64]) -> Vec<f64>> AnalyticScore<F> {
    pub fn new(dim: usize, f: F) -> Self {
        AnalyticScore { dim, f }
    }
}

impl<F: Fn(&[f64]) -> Vec<f64>> ScoreField for AnalyticScore<F> {
    fn dim(&self) -> usize {
        self.dim
    }

    fn score(&self, z: &Tensor, _sigma: f64) -> Result<Tensor> {
        let mut data = Vec::with_capacity(z.len());
        for i in 0..z.rows() {
            data.extend((self.f)(z.row(i)));
        }
        Tensor::new(z.shape().to_vec(), data)
    }
}

/// Score of the standard normal, `s(z) = −z`.
pub fn standard_normal_score(dim: usize) -> AnalyticScore<impl Fn(&[f64]) -> Vec<f64>> {
    AnalyticScore::new(dim, |z: &[f64]| z.iter().map(|v| -v).collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelBundle {
    pub feature: Mlp,
    pub head: Mlp,
    pub score: Mlp,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BundleSpec {
    pub feature: MlpSpec,
    pub head: MlpSpec,
    pub score: MlpSpec,
}

impl BundleSpec {
    /// Desk-scale default: tanh MLPs `[d_x, 64, 64, d_z]`, linear head and
    /// a `[d_z + 1, 128, 128, d_z]` score network.
    pub fn default_for(input_dim: usize, latent_dim: usize, classes: usize) -> Self {
        BundleSpec {
            feature: MlpSpec::new(&[input_dim, 64, 64, latent_dim], Activation::Tanh),
            head: MlpSpec::new(&[latent_dim, classes], Activation::Tanh),
            score: MlpSpec::new(&[latent_dim + 1, 128, 128, latent_dim], Activation::Tanh),
        }
    }

    pub fn validate(&self, path: &str) -> Result<()> {
        self.feature.validate(&format!("{path}.feature"))?;
        self.head.validate(&format!("{path}.head"))?;
        self.score.validate(&format!("{path}.score"))?;
        let dz = self.feature.output_dim();
        if self.head.input_dim() != dz {
            return Err(Error::config(
                format!("{path}.head"),
                format!("input width {} != latent dim {dz}", self.head.input_dim()),
            ));
        }
        if self.score.output_dim() != dz || self.score.input_dim() != dz + 1 {
            return Err(Error::config(
                format!("{path}.score"),
                format!("widths must run from {} to {dz}", dz + 1),
            ));
        }
        if self.score.hidden_layers() < 1 {
            return Err(Error::config(
                format!("{path}.score"),
                "score network needs at least one hidden layer",
            ));
        }
        if self.head.output_dim() < 2 {
            return Err(Error::config(format!("{path}.head"), "need at least 2 classes"));
        }
        Ok(())
    }
}

/// Initializes all three networks from one stream.
pub fn init_bundle(spec: &BundleSpec, stream: &mut RngStream) -> Result<ModelBundle> {
    spec.validate("models")?;
    Ok(ModelBundle {
        feature: Mlp::init(&spec.feature, &mut stream.fork("net", 0))?,
        head: Mlp::init(&spec.head, &mut stream.fork("net", 1))?,
        score: Mlp::init(&spec.score, &mut stream.fork("net", 2))?,
    })
}

impl ModelBundle {
    pub fn spec(&self) -> BundleSpec {
        BundleSpec {
            feature: self.feature.spec().clone(),
            head: self.head.spec().clone(),
            score: self.score.spec().clone(),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.feature.spec().input_dim()
    }

    pub fn latent_dim(&self) -> usize {
        self.feature.spec().output_dim()
    }

    pub fn classes(&self) -> usize {
        self.head.spec().output_dim()
    }

    pub fn param_count(&self) -> usize {
        self.feature.param_count() + self.head.param_count() + self.score.param_count()
    }

    pub fn forward_features(&self, x: &Tensor) -> Result<Tensor> {
        self.feature.forward(x)
    }

    pub fn forward_logits(&self, z: &Tensor) -> Result<Tensor> {
        self.head.forward(z)
    }

    pub fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        let logits = self.forward_logits(&self.forward_features(x)?)?;
        Ok((0..logits.rows()).map(|i| argmax(logits.row(i))).collect())
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        self.feature.write_flat(&mut out);
        self.head.write_flat(&mut out);
        self.score.write_flat(&mut out);
        out
    }

    /// Rebuilds a bundle shaped like `template` from a flat vector.
    pub fn unflatten(flat: &[f64], template: &ModelBundle) -> Result<ModelBundle> {
        if flat.len() != template.param_count() {
            return Err(Error::dim(
                "unflatten",
                format!("{} values for {} parameters", flat.len(), template.param_count()),
            ));
        }
        let mut out = template.clone();
        let nf = out.feature.param_count();
        let ng = out.head.param_count();
        out.feature.set_flat(&flat[..nf])?;
        out.head.set_flat(&flat[nf..nf + ng])?;
        out.score.set_flat(&flat[nf + ng..])?;
        Ok(out)
    }

    /// Order-sensitive FNV-1a over the parameter bit patterns.
    pub fn checksum(&self) -> String {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for v in self.flatten() {
            for b in v.to_bits().to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        }
        format!("{h:016x}")
    }
}

pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

const CHECKPOINT_FORMAT: &str = "foogd-checkpoint";
const CHECKPOINT_VERSION: u32 = 1;

/// On-disk checkpoint: JSON with the three network specs and the flat
/// parameter vector. Floats are written in shortest round-trip form.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Checkpoint {
    format: String,
    version: u32,
    spec: BundleSpec,
    params: Vec<f64>,
}

pub fn save_checkpoint(path: &Path, bundle: &ModelBundle) -> Result<()> {
    let ck = Checkpoint {
        format: CHECKPOINT_FORMAT.into(),
        version: CHECKPOINT_VERSION,
        spec: bundle.spec(),
        params: bundle.flatten(),
    };
    let text = serde_json::to_string_pretty(&ck).map_err(|e| Error::Serde(e.to_string()))?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<ModelBundle> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let ck: Checkpoint = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: e.line() as u64,
        msg: e.to_string(),
    })?;
    if ck.format != CHECKPOINT_FORMAT || ck.version != CHECKPOINT_VERSION {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: 1,
            msg: format!("unsupported checkpoint {} v{}", ck.format, ck.version),
        });
    }
    ck.spec.validate("checkpoint.spec")?;
    let template = ModelBundle {
        feature: Mlp::zeros(&ck.spec.feature)?,
        head: Mlp::zeros(&ck.spec.head)?,
        score: Mlp::zeros(&ck.spec.score)?,
    };
    ModelBundle::unflatten(&ck.params, &template)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{check_gradients, GradCheckConfig, StreamLabel};

    fn stream(tag: &str) -> RngStream {
        RngStream::new(11, StreamLabel::new(tag))
    }

    fn small_spec() -> BundleSpec {
        BundleSpec {
            feature: MlpSpec::new(&[2, 8, 3], Activation::Tanh),
            head: MlpSpec::new(&[3, 4], Activation::Tanh),
            score: MlpSpec::new(&[4, 6, 3], Activation::Tanh),
        }
    }

    #[test]
    fn init_is_deterministic() {
        let a = init_bundle(&small_spec(), &mut stream("init")).unwrap();
        let b = init_bundle(&small_spec(), &mut stream("init")).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn score_without_hidden_layer_rejected() {
        let mut spec = small_spec();
        spec.score = MlpSpec::new(&[4, 3], Activation::Tanh);
        assert!(matches!(
            init_bundle(&spec, &mut stream("init")),
            Err(Error::Config { .. })
        ));
        let mut spec = small_spec();
        spec.head = MlpSpec::new(&[5, 4], Activation::Tanh);
        assert!(init_bundle(&spec, &mut stream("init")).is_err());
    }

    #[test]
    fn he_variance() {
        let spec = MlpSpec::new(&[64, 64], Activation::Relu);
        let m = Mlp::init(&spec, &mut stream("he")).unwrap();
        let w = m.layers()[0].weight.data();
        let n = w.len() as f64;
        let mean = w.iter().sum::<f64>() / n;
        let var = w.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        let target = 2.0 / 64.0;
        assert!((var - target).abs() < 0.2 * target, "var {var}");
        assert!(m.layers()[0].bias.data().iter().all(|&b| b == 0.0));
    }

    #[test]
    fn empty_batch_forward() {
        let b = init_bundle(&small_spec(), &mut stream("init")).unwrap();
        let z = b.forward_features(&Tensor::zeros(&[0, 2])).unwrap();
        assert_eq!(z.shape(), &[0, 3]);
    }

    #[test]
    fn identity_linear_features() {
        let spec = MlpSpec::new(&[3, 3], Activation::Tanh);
        let mut f = Mlp::zeros(&spec).unwrap();
        f.layers_mut()[0].weight = Tensor::identity(3);
        let x = Tensor::from_rows(&[vec![1.5, -2.0, 0.25], vec![0.0, 7.0, -3.0]]).unwrap();
        assert_eq!(f.forward(&x).unwrap(), x);
    }

    #[test]
    fn feature_input_gradient_matches_fd() {
        let b = init_bundle(&small_spec(), &mut stream("init")).unwrap();
        let x = stream("x").gaussian(&[5, 2]);
        let rep = check_gradients(&[x], GradCheckConfig::default(), |t, v| {
            let f = b.feature.bind(t, false);
            Ok(f.forward(v[0])?.square().sum())
        })
        .unwrap();
        assert!(rep.passes(1e-5), "{rep:?}");
    }

    #[test]
    fn ce_gradient_is_softmax_minus_onehot() {
        let logits = Tensor::from_rows(&[vec![0.2, -1.0, 0.7], vec![1.5, 0.1, -0.3]]).unwrap();
        let labels = [2usize, 0];
        let t = Tape::new();
        let l = t.leaf(logits.clone());
        let g = t.backward(l.cross_entropy(&labels).unwrap()).unwrap().get(l);
        let p = tensor::softmax_rows(logits.data(), 3);
        for i in 0..2 {
            for c in 0..3 {
                let expect = (p[i * 3 + c] - if c == labels[i] { 1.0 } else { 0.0 }) / 2.0;
                assert!((g.data()[i * 3 + c] - expect).abs() < 1e-15);
            }
        }
        let rep = check_gradients(&[logits], GradCheckConfig::default(), |_, v| {
            v[0].cross_entropy(&labels)
        })
        .unwrap();
        assert!(rep.passes(1e-5));
    }

    #[test]
    fn score_conditioning() {
        let mut b = init_bundle(&small_spec(), &mut stream("init")).unwrap();
        let z = stream("z").gaussian(&[4, 3]);
        assert_eq!(forward_score(&b.score, &z, 0.5).unwrap().shape(), z.shape());
        assert!(forward_score(&b.score, &z, 0.0).is_err());
        assert!(forward_score(&b.score, &z, -1.0).is_err());

        // A network whose raw output ignores its ln σ input exposes the 1/σ law.
        b.score.layers_mut()[0].weight.row_mut(3).fill(0.0);
        let s1 = forward_score(&b.score, &z, 0.3).unwrap();
        let s2 = forward_score(&b.score, &z, 0.6).unwrap();
        for (a, c) in s1.data().iter().zip(s2.data()) {
            assert!((a * 0.3 - c * 0.6).abs() < 1e-12);
        }

        let zero = Mlp::zeros(b.score.spec()).unwrap();
        for sigma in [0.01, 1.0, 10.0] {
            assert!(forward_score(&zero, &z, sigma)
                .unwrap()
                .data()
                .iter()
                .all(|&v| v == 0.0));
        }
    }

    #[test]
    fn tape_and_value_score_paths_agree_bitwise() {
        let b = init_bundle(&small_spec(), &mut stream("init")).unwrap();
        let z = stream("z").gaussian(&[6, 3]);
        let t = Tape::new();
        let bound = b.score.bind(&t, true);
        let zv = t.constant(z.clone());
        let on_tape = forward_score_var(&t, &bound, zv, 0.1).unwrap().value();
        assert_eq!(*on_tape, forward_score(&b.score, &z, 0.1).unwrap());
    }

    #[test]
    fn flatten_roundtrip_and_counts() {
        let b = init_bundle(&small_spec(), &mut stream("init")).unwrap();
        let flat = b.flatten();
        assert_eq!(
            flat.len(),
            (2 * 8 + 8) + (8 * 3 + 3) + (3 * 4 + 4) + (4 * 6 + 6) + (6 * 3 + 3)
        );
        let back = ModelBundle::unflatten(&flat, &b).unwrap();
        assert_eq!(back, b);
        assert!(ModelBundle::unflatten(&flat[1..], &b).is_err());
    }

    #[test]
    fn checkpoint_roundtrip() {
        let b = init_bundle(&small_spec(), &mut stream("init")).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.json");
        save_checkpoint(&p, &b).unwrap();
        let back = load_checkpoint(&p).unwrap();
        assert_eq!(back.flatten(), b.flatten());
        assert_eq!(back.checksum(), b.checksum());
    }
}
