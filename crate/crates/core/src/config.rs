//! Experiment configuration files (TOML).
//!
//! Every table rejects unknown keys. Relative MNIST paths are resolved
//! against a data directory supplied by the caller.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::datasets::{self, LabeledDataset, MnistOptions, PinwheelParams};
use crate::error::{Error, Result};
use crate::flows::LayerSpec;
use crate::mixture::{ModelSpec, SemiSupervisedOptions, TemperatureSchedule};
use crate::nn::AdamConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub training: TrainingConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

/// A file holding only a `[dataset]` table, as accepted by evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetFile {
    pub dataset: DatasetConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetConfig {
    Pinwheel {
        n_per_class: usize,
        #[serde(default = "five")]
        classes: usize,
        #[serde(default)]
        shape: PinwheelParams,
        #[serde(default)]
        seed: u64,
        /// Size per class of a separately drawn labeled set.
        #[serde(default)]
        labeled_per_class: usize,
    },
    TwoCircles {
        n_per_class: usize,
        #[serde(default = "default_radii")]
        radii: (f64, f64),
        #[serde(default = "default_noise")]
        noise_std: f64,
        #[serde(default)]
        seed: u64,
        #[serde(default)]
        labeled_per_class: usize,
    },
    Mnist {
        #[serde(default = "default_images")]
        images: PathBuf,
        #[serde(default = "default_labels")]
        labels: PathBuf,
        digits: Vec<u8>,
        #[serde(default)]
        limit: Option<usize>,
        #[serde(default = "yes")]
        dequantize_logit: bool,
        #[serde(default)]
        seed: u64,
        /// Labeled examples per class taken from the front of the loaded set.
        #[serde(default)]
        labeled_per_class: usize,
    },
}

fn five() -> usize {
    5
}
fn default_radii() -> (f64, f64) {
    (1.0, 0.5)
}
fn default_noise() -> f64 {
    0.03
}
fn default_images() -> PathBuf {
    "train-images-idx3-ubyte".into()
}
fn default_labels() -> PathBuf {
    "train-labels-idx1-ubyte".into()
}
fn yes() -> bool {
    true
}

/// Seed offset of the separately generated labeled set.
const LABELED_SEED_OFFSET: u64 = 0x5eed;

impl DatasetConfig {
    pub fn dim(&self) -> usize {
        match self {
            DatasetConfig::Pinwheel { .. } | DatasetConfig::TwoCircles { .. } => 2,
            DatasetConfig::Mnist { .. } => 784,
        }
    }

    pub fn num_classes(&self) -> usize {
        match self {
            DatasetConfig::Pinwheel { classes, .. } => *classes,
            DatasetConfig::TwoCircles { .. } => 2,
            DatasetConfig::Mnist { digits, .. } => {
                let mut d = digits.clone();
                d.sort_unstable();
                d.dedup();
                d.len()
            }
        }
    }

    /// Same dataset with its seed replaced, e.g. to draw a held-out sample.
    pub fn with_seed(&self, new_seed: u64) -> Self {
        let mut out = self.clone();
        match &mut out {
            DatasetConfig::Pinwheel { seed, .. } | DatasetConfig::TwoCircles { seed, .. } | DatasetConfig::Mnist { seed, .. } => {
                *seed = new_seed
            }
        }
        out
    }

    fn labeled_per_class(&self) -> usize {
        match self {
            DatasetConfig::Pinwheel { labeled_per_class, .. }
            | DatasetConfig::TwoCircles { labeled_per_class, .. }
            | DatasetConfig::Mnist { labeled_per_class, .. } => *labeled_per_class,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, reason: &str| Err(Error::Config { key: format!("dataset.{key}"), reason: reason.into() });
        match self {
            DatasetConfig::Pinwheel { n_per_class, classes, shape, .. } => {
                if *n_per_class == 0 {
                    return bad("n_per_class", "must be at least 1");
                }
                if *classes == 0 {
                    return bad("classes", "must be at least 1");
                }
                if !(shape.radial_std >= 0.0 && shape.tangential_std >= 0.0) {
                    return bad("shape", "standard deviations must be non-negative");
                }
            }
            DatasetConfig::TwoCircles { n_per_class, radii, noise_std, .. } => {
                if *n_per_class == 0 {
                    return bad("n_per_class", "must be at least 1");
                }
                if !(radii.0 > 0.0 && radii.1 > 0.0) || radii.0 == radii.1 {
                    return bad("radii", "must be positive and distinct");
                }
                if !(*noise_std >= 0.0) {
                    return bad("noise_std", "must be non-negative");
                }
            }
            DatasetConfig::Mnist { digits, limit, .. } => {
                if digits.is_empty() {
                    return bad("digits", "select at least one digit");
                }
                if digits.iter().any(|&d| d > 9) {
                    return bad("digits", "digits run from 0 to 9");
                }
                if *limit == Some(0) {
                    return bad("limit", "must be at least 1");
                }
            }
        }
        Ok(())
    }

    /// The unlabeled training set (labels kept for evaluation).
    pub fn load(&self, data_dir: &Path) -> Result<LabeledDataset> {
        self.validate()?;
        match self {
            DatasetConfig::Pinwheel { n_per_class, classes, shape, seed, .. } => {
                datasets::gen_pinwheel_with(*n_per_class, *classes, *shape, *seed)
            }
            DatasetConfig::TwoCircles { n_per_class, radii, noise_std, seed, .. } => {
                datasets::gen_two_circles(*n_per_class, *seed, *radii, *noise_std)
            }
            DatasetConfig::Mnist { images, labels, digits, limit, dequantize_logit, seed, .. } => {
                let opts = MnistOptions { dequantize_logit: *dequantize_logit, limit: *limit, seed: *seed };
                datasets::load_mnist_idx(&data_dir.join(images), &data_dir.join(labels), digits, &opts)
            }
        }
    }

    /// The labeled set used by semi-supervised training, if one is configured.
    pub fn load_labeled(&self, data_dir: &Path) -> Result<Option<LabeledDataset>> {
        let per_class = self.labeled_per_class();
        if per_class == 0 {
            return Ok(None);
        }
        let labeled = match self {
            DatasetConfig::Pinwheel { classes, shape, seed, .. } => {
                datasets::gen_pinwheel_with(per_class, *classes, *shape, seed.wrapping_add(LABELED_SEED_OFFSET))?
            }
            DatasetConfig::TwoCircles { radii, noise_std, seed, .. } => {
                datasets::gen_two_circles(per_class, seed.wrapping_add(LABELED_SEED_OFFSET), *radii, *noise_std)?
            }
            DatasetConfig::Mnist { .. } => {
                let all = self.load(data_dir)?;
                let labels = all.labels()?;
                let mut taken = vec![0; all.num_classes];
                let idx: Vec<usize> = (0..all.len())
                    .filter(|&i| {
                        let c = labels[i];
                        taken[c] += 1;
                        taken[c] <= per_class
                    })
                    .collect();
                all.subset(&idx)?
            }
        };
        Ok(Some(labeled))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum FlowConfig {
    Realnvp { blocks: usize, hidden: Vec<usize> },
    Maf { blocks: usize, hidden: Vec<usize> },
    /// Explicit layer list.
    Layers { layers: Vec<LayerSpec> },
}

impl FlowConfig {
    pub fn layers(&self) -> Vec<LayerSpec> {
        match self {
            FlowConfig::Realnvp { blocks, hidden } => LayerSpec::realnvp(*blocks, hidden),
            FlowConfig::Maf { blocks, hidden } => LayerSpec::maf(*blocks, hidden),
            FlowConfig::Layers { layers } => layers.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub components: usize,
    pub flow: FlowConfig,
    #[serde(default)]
    pub posterior_hidden: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainingMode {
    Unsupervised,
    Semisupervised,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TemperatureConfig {
    #[serde(default = "default_t0")]
    pub t0: f64,
    #[serde(default = "default_t_min")]
    pub t_min: f64,
    /// Decay per epoch; when absent, the floor is reached at two thirds of the
    /// unsupervised epochs.
    #[serde(default)]
    pub decay: Option<f64>,
}

fn default_t0() -> f64 {
    5.0
}
fn default_t_min() -> f64 {
    1.0
}

impl Default for TemperatureConfig {
    fn default() -> Self {
        TemperatureConfig { t0: default_t0(), t_min: default_t_min(), decay: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    pub mode: TrainingMode,
    /// Unsupervised epochs (semi-supervised: interleaved rounds).
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default)]
    pub temperature: TemperatureConfig,
    #[serde(default)]
    pub pretrain_epochs: usize,
    /// Batch size of supervised epochs; defaults to `batch_size`.
    #[serde(default)]
    pub labeled_batch_size: Option<usize>,
    #[serde(default = "one")]
    pub supervised_per_round: usize,
    #[serde(default = "one")]
    pub unsupervised_per_round: usize,
    #[serde(default)]
    pub seed: u64,
}

fn one() -> usize {
    1
}

impl TrainingConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig { lr: self.learning_rate, weight_decay: self.weight_decay, ..AdamConfig::default() }
    }

    pub fn schedule(&self) -> TemperatureSchedule {
        let t = self.temperature;
        let horizon = match self.mode {
            TrainingMode::Unsupervised => self.epochs,
            TrainingMode::Semisupervised => self.epochs * self.unsupervised_per_round,
        };
        match t.decay {
            Some(decay) => TemperatureSchedule { t0: t.t0, t_min: t.t_min, decay },
            None => TemperatureSchedule::for_epochs(t.t0, t.t_min, horizon),
        }
    }

    pub fn semisupervised(&self) -> SemiSupervisedOptions {
        SemiSupervisedOptions {
            rounds: self.epochs,
            supervised_per_round: self.supervised_per_round,
            unsupervised_per_round: self.unsupervised_per_round,
            batch_size: self.batch_size,
            labeled_batch_size: self.labeled_batch_size.unwrap_or(self.batch_size),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    #[serde(default = "default_dir")]
    pub dir: PathBuf,
    #[serde(default = "default_ckpt")]
    pub checkpoint: String,
    #[serde(default = "default_metrics")]
    pub metrics: String,
}

fn default_dir() -> PathBuf {
    "runs".into()
}
fn default_ckpt() -> String {
    "model.ckpt".into()
}
fn default_metrics() -> String {
    "metrics.csv".into()
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig { dir: default_dir(), checkpoint: default_ckpt(), metrics: default_metrics() }
    }
}

impl OutputConfig {
    pub fn checkpoint_path(&self) -> PathBuf {
        self.dir.join(&self.checkpoint)
    }

    pub fn metrics_path(&self) -> PathBuf {
        self.dir.join(&self.metrics)
    }
}

fn parse_error(source: &str, e: toml::de::Error) -> Error {
    let reason = e.message().trim().to_string();
    let key = e
        .span()
        .and_then(|s| source.get(s))
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty() && s.len() < 60 && !s.contains('\n'))
        .unwrap_or_else(|| "<document>".into());
    Error::Config { key, reason }
}

impl ExperimentConfig {
    pub fn from_toml(source: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(source).map_err(|e| parse_error(source, e))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configs always serialise")
    }

    pub fn model_spec(&self) -> ModelSpec {
        ModelSpec {
            components: self.model.components,
            dim: self.dataset.dim(),
            flow: self.model.flow.layers(),
            posterior_hidden: self.model.posterior_hidden.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        let bad = |key: &str, reason: String| Err(Error::Config { key: key.into(), reason });
        let m = &self.model;
        if m.components == 0 {
            return bad("model.components", "must be at least 1".into());
        }
        if m.posterior_hidden.contains(&0) {
            return bad("model.posterior_hidden", "hidden widths must be positive".into());
        }
        let hidden_ok = |h: &[usize]| !h.contains(&0);
        match &m.flow {
            FlowConfig::Realnvp { hidden, .. } | FlowConfig::Maf { hidden, .. } if !hidden_ok(hidden) => {
                return bad("model.flow.hidden", "hidden widths must be positive".into());
            }
            FlowConfig::Realnvp { .. } if self.dataset.dim() < 2 => {
                return bad("model.flow.kind", "coupling layers need at least two dimensions".into());
            }
            _ => {}
        }
        let t = &self.training;
        if t.batch_size == 0 {
            return bad("training.batch_size", "must be at least 1".into());
        }
        if t.labeled_batch_size == Some(0) {
            return bad("training.labeled_batch_size", "must be at least 1".into());
        }
        if !(t.learning_rate >= 0.0 && t.learning_rate.is_finite()) {
            return bad("training.learning_rate", format!("{} is not a non-negative number", t.learning_rate));
        }
        if !(t.weight_decay >= 0.0 && t.weight_decay.is_finite()) {
            return bad("training.weight_decay", format!("{} is not a non-negative number", t.weight_decay));
        }
        let temp = &t.temperature;
        if !(temp.t0 > 0.0 && temp.t0.is_finite()) {
            return bad("training.temperature.t0", "must be positive".into());
        }
        if !(temp.t_min > 0.0 && temp.t_min.is_finite()) {
            return bad("training.temperature.t_min", "must be positive".into());
        }
        if temp.decay.is_some_and(|d| !(d >= 0.0 && d.is_finite())) {
            return bad("training.temperature.decay", "must be non-negative".into());
        }
        if t.mode == TrainingMode::Semisupervised {
            if self.dataset.labeled_per_class() == 0 {
                return bad("dataset.labeled_per_class", "semi-supervised training needs labeled examples".into());
            }
            if self.dataset.num_classes() != m.components {
                return bad(
                    "model.components",
                    format!("semi-supervised training needs one component per class ({})", self.dataset.num_classes()),
                );
            }
        }
        Ok(())
    }
}

impl DatasetFile {
    /// Reads a dataset description from either a full experiment config or a
    /// file with only a `[dataset]` table.
    pub fn from_file(path: &Path) -> Result<DatasetConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        if let Ok(cfg) = ExperimentConfig::from_toml(&text) {
            return Ok(cfg.dataset);
        }
        let file: DatasetFile = toml::from_str(&text).map_err(|e| parse_error(&text, e))?;
        file.dataset.validate()?;
        Ok(file.dataset)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const PINWHEEL: &str = r#"
[dataset]
name = "pinwheel"
n_per_class = 512

[model]
components = 5
flow = { kind = "realnvp", blocks = 8, hidden = [8] }
posterior_hidden = [3]

[training]
mode = "unsupervised"
epochs = 400
batch_size = 512
learning_rate = 0.001
"#;

    #[test]
    fn parses_reference_shape() {
        let cfg = ExperimentConfig::from_toml(PINWHEEL).unwrap();
        assert_eq!(cfg.model_spec().dim, 2);
        assert_eq!(cfg.model_spec().flow.len(), 8);
        let s = cfg.training.schedule();
        assert_eq!(s.at(0), 5.0);
        assert!((s.at(267) - 1.0).abs() < 0.01);
        assert_eq!(ExperimentConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn unknown_key_is_named() {
        let src = PINWHEEL.replace("batch_size = 512", "batch_size = 512\nbatch_sise = 3");
        let err = ExperimentConfig::from_toml(&src).unwrap_err().to_string();
        assert!(err.contains("batch_sise"), "{err}");
    }

    #[test]
    fn invalid_value_is_named() {
        let src = PINWHEEL.replace("learning_rate = 0.001", "learning_rate = -1.0");
        match ExperimentConfig::from_toml(&src) {
            Err(Error::Config { key, .. }) => assert_eq!(key, "training.learning_rate"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn malformed_inputs_never_panic() {
        for src in ["", "[[[", "dataset = 3", "[dataset]\nname = \"nope\"", "\u{0}"] {
            assert!(ExperimentConfig::from_toml(src).is_err());
        }
    }

    #[test]
    fn semisupervised_needs_labels() {
        let src = PINWHEEL.replace("\"unsupervised\"", "\"semisupervised\"");
        assert!(matches!(ExperimentConfig::from_toml(&src), Err(Error::Config { .. })));
    }
}
