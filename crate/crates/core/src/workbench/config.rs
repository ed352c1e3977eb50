//! One TOML file describes a whole experiment.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::data::{GeneratorSpec, SplitSizes};
use super::shift::ShiftSpec;
use crate::error::{Error, Result};
use crate::federation::{DetectionMode, FederationConfig};
use crate::models::{Activation, BundleSpec, MlpSpec};
use crate::numerics::SgdConfig;
use crate::sag::SagConfig;
use crate::smd::{Bandwidth, Estimator, LangevinConfig, Sm3dConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSection {
    pub generator: GeneratorSpec,
    pub train_size: usize,
    pub test_size: usize,
    pub out_size: usize,
    pub shift: ShiftSpec,
}

impl Default for DatasetSection {
    fn default() -> Self {
        DatasetSection {
            generator: GeneratorSpec::default(),
            train_size: 2000,
            test_size: 800,
            out_size: 400,
            shift: ShiftSpec::default(),
        }
    }
}

impl DatasetSection {
    pub fn sizes(&self) -> SplitSizes {
        SplitSizes {
            train: self.train_size,
            test: self.test_size,
            out: self.out_size,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FederationSection {
    pub clients: usize,
    pub rounds: usize,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub participation: f64,
    /// Dirichlet concentration of the label partition.
    pub alpha: f64,
    pub feature_sgd: SgdConfig,
    pub score_sgd: SgdConfig,
    pub update_score: bool,
    pub update_features: bool,
    pub threads: Option<usize>,
}

impl Default for FederationSection {
    fn default() -> Self {
        let f = FederationConfig::default();
        FederationSection {
            clients: f.clients,
            rounds: f.rounds,
            local_epochs: f.local_epochs,
            batch_size: f.batch_size,
            participation: f.participation,
            alpha: 0.5,
            feature_sgd: f.feature_sgd,
            score_sgd: f.score_sgd,
            update_score: true,
            update_features: true,
            threads: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelsSection {
    pub latent_dim: usize,
    pub feature_hidden: Vec<usize>,
    pub score_hidden: Vec<usize>,
    pub activation: Activation,
}

impl Default for ModelsSection {
    fn default() -> Self {
        ModelsSection {
            latent_dim: 2,
            feature_hidden: vec![64, 64],
            score_hidden: vec![128, 128],
            activation: Activation::Tanh,
        }
    }
}

impl ModelsSection {
    pub fn bundle_spec(&self, input_dim: usize, classes: usize) -> BundleSpec {
        let dz = self.latent_dim;
        let chain = |first: usize, hidden: &[usize], last: usize| {
            let mut w = vec![first];
            w.extend_from_slice(hidden);
            w.push(last);
            MlpSpec::new(&w, self.activation)
        };
        BundleSpec {
            feature: chain(input_dim, &self.feature_hidden, dz),
            head: MlpSpec::new(&[dz, classes], self.activation),
            score: chain(dz + 1, &self.score_hidden, dz),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SmdSection {
    pub lambda_m: f64,
    pub sigmas: Vec<f64>,
    pub bandwidth: Bandwidth,
    pub estimator: Estimator,
    pub langevin: LangevinConfig,
}

impl Default for SmdSection {
    fn default() -> Self {
        let s = Sm3dConfig::default();
        SmdSection {
            lambda_m: s.lambda_m,
            sigmas: s.sigmas,
            bandwidth: s.bandwidth,
            estimator: s.estimator,
            langevin: LangevinConfig::default(),
        }
    }
}

impl SmdSection {
    pub fn sm3d(&self) -> Sm3dConfig {
        Sm3dConfig {
            lambda_m: self.lambda_m,
            sigmas: self.sigmas.clone(),
            bandwidth: self.bandwidth,
            estimator: self.estimator,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectionSection {
    pub mode: DetectionMode,
    /// Evaluate every this many rounds (0: only after the last round).
    pub eval_every: usize,
    /// Rounds of the score-only fit on standard-normal latents used for the
    /// error-bound report (0 disables the report).
    pub bound_rounds: usize,
    pub bound_samples: usize,
}

impl Default for DetectionSection {
    fn default() -> Self {
        DetectionSection {
            mode: DetectionMode::PerClient,
            eval_every: 0,
            bound_rounds: 5,
            bound_samples: 4096,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub dir: PathBuf,
    pub checkpoint: bool,
    pub plots: bool,
    pub svg: bool,
    /// Points per axis of the exported score field.
    pub grid: usize,
    /// Langevin samples drawn for the plot export.
    pub generated: usize,
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection {
            dir: PathBuf::from("runs/default"),
            checkpoint: true,
            plots: true,
            svg: true,
            grid: 25,
            generated: 512,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub dataset: DatasetSection,
    pub federation: FederationSection,
    pub models: ModelsSection,
    pub smd: SmdSection,
    pub sag: SagConfig,
    pub detection: DetectionSection,
    pub output: OutputSection,
}

/// Values that override a loaded config, typically from the command line.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub lambda_m: Option<f64>,
    pub lambda_a: Option<f64>,
    pub out: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str, origin: &str) -> Result<ExperimentConfig> {
        toml::from_str(text).map_err(|e| {
            let line = e
                .span()
                .map(|s| text[..s.start.min(text.len())].matches('\n').count() + 1)
                .unwrap_or(0);
            Error::config(format!("{origin}:{line}"), e.message().to_string())
        })
    }

    /// Reads and validates a config file.
    pub fn load(path: &Path) -> Result<ExperimentConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg = Self::from_toml_str(&text, &path.display().to_string())?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Serde(e.to_string()))
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(l) = o.lambda_m {
            self.smd.lambda_m = l;
        }
        if let Some(l) = o.lambda_a {
            self.sag.lambda_a = l;
        }
        if let Some(d) = &o.out {
            self.output.dir = d.clone();
        }
    }

    pub fn federation_config(&self) -> FederationConfig {
        let f = &self.federation;
        FederationConfig {
            clients: f.clients,
            rounds: f.rounds,
            local_epochs: f.local_epochs,
            batch_size: f.batch_size,
            participation: f.participation,
            feature_sgd: f.feature_sgd,
            score_sgd: f.score_sgd,
            smd: self.smd.sm3d(),
            langevin: self.smd.langevin,
            sag: self.sag.clone(),
            update_score: f.update_score,
            update_features: f.update_features,
            seed: self.seed,
            threads: f.threads,
        }
    }

    /// Rejects every invalid value with its field path before any compute.
    pub fn validate(&self) -> Result<()> {
        let d = &self.dataset;
        d.generator.validate("dataset.generator")?;
        d.shift.validate("dataset.shift")?;
        if !matches!(d.generator, GeneratorSpec::Csv { .. }) {
            if d.train_size == 0 {
                return Err(Error::config("dataset.train_size", "must be >= 1"));
            }
            if d.test_size == 0 {
                return Err(Error::config("dataset.test_size", "must be >= 1"));
            }
            if d.out_size == 0 {
                return Err(Error::config("dataset.out_size", "must be >= 1"));
            }
        }
        if !(self.federation.alpha > 0.0 && self.federation.alpha.is_finite()) {
            return Err(Error::config("federation.alpha", "must be finite and > 0"));
        }
        let m = &self.models;
        if m.latent_dim == 0 {
            return Err(Error::config("models.latent_dim", "must be >= 1"));
        }
        if m.score_hidden.is_empty() {
            return Err(Error::config("models.score_hidden", "needs at least one hidden layer"));
        }
        if m.feature_hidden.contains(&0) || m.score_hidden.contains(&0) {
            return Err(Error::config("models", "hidden widths must be >= 1"));
        }
        if let Some(c) = d.generator.classes() {
            self.models.bundle_spec(2, c).validate("models")?;
        }
        if self.sag.lambda_a > 0.0 && m.latent_dim < 1 {
            return Err(Error::config("sag.lambda_a", "needs a latent space"));
        }
        self.federation_config().validate("federation")?;
        if self.detection.bound_rounds > 0 && self.detection.bound_samples == 0 {
            return Err(Error::config("detection.bound_samples", "must be >= 1"));
        }
        let o = &self.output;
        if o.plots && m.latent_dim != 2 {
            return Err(Error::config("output.plots", "plot export needs models.latent_dim = 2"));
        }
        if o.plots && o.grid < 2 {
            return Err(Error::config("output.grid", "must be >= 2"));
        }
        if o.dir.as_os_str().is_empty() {
            return Err(Error::config("output.dir", "must not be empty"));
        }
        Ok(())
    }
}
