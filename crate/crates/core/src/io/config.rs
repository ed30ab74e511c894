//! Run configuration: a small sectioned key = value file (TOML syntax).
//! Unknown keys are rejected and everything is validated before any
//! compute starts. Weights and thresholds never live here; they belong to
//! the binary checkpoint.

use crate::error::{Result, SnnError};
use crate::neuron::SurrogateFamily;
use crate::training::{OptimizerKind, TrainConfig};
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub run: RunSection,
    #[serde(default)]
    pub dataset: DatasetSection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainSection,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    pub seed: u64,
    pub out_dir: String,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection {
            seed: 42,
            out_dir: "runs".into(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    /// "mnist" (IDX directory) or "cifar10" (binary batch files).
    pub name: String,
    pub path: String,
}

impl Default for DatasetSection {
    fn default() -> Self {
        DatasetSection {
            name: "mnist".into(),
            path: "data/mnist".into(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    /// Architecture preset name.
    pub arch: String,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            arch: "vgg5".into(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub timesteps: usize,
    /// 0 means "equal to timesteps" (full unrolling).
    pub truncate: usize,
    pub surrogate: SurrogateFamily,
    pub alpha: f64,
    pub beta: f64,
    pub use_lut: bool,
    pub leak: f64,
    pub grad_clip: Option<f64>,
    pub calibration_batch: usize,
    pub train_subset: Option<usize>,
    pub eval_subset: Option<usize>,
    pub stop_at_accuracy: Option<f64>,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            lr: 1e-4,
            epochs: 20,
            batch_size: 32,
            optimizer: OptimizerKind::Adam,
            timesteps: 20,
            truncate: 0,
            surrogate: SurrogateFamily::SpikeTime,
            alpha: 0.3,
            beta: 0.01,
            use_lut: true,
            leak: 1.0,
            grad_clip: None,
            calibration_batch: 512,
            train_subset: None,
            eval_subset: None,
            stop_at_accuracy: None,
        }
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            run: RunSection::default(),
            dataset: DatasetSection::default(),
            model: ModelSection::default(),
            train: TrainSection::default(),
        }
    }
}

impl RunConfig {
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| SnnError::io(format!("reading config {}", path.display()), e))?;
        let cfg: RunConfig = toml::from_str(&text).map_err(|e| SnnError::Format {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.train.lr <= 0.0 {
            return Err(SnnError::Config("train.lr must be positive".into()));
        }
        if self.train.calibration_batch == 0 {
            return Err(SnnError::Config(
                "train.calibration_batch must be >= 1".into(),
            ));
        }
        match self.dataset.name.as_str() {
            "mnist" | "cifar10" => {}
            other => {
                return Err(SnnError::Config(format!(
                    "unknown dataset '{other}' (available: mnist, cifar10)"
                )))
            }
        }
        self.train_config().validate()
    }

    /// Flatten into the trainer's hyperparameter block.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            lr: self.train.lr,
            epochs: self.train.epochs,
            batch_size: self.train.batch_size,
            optimizer: self.train.optimizer,
            timesteps: self.train.timesteps,
            truncate: if self.train.truncate == 0 {
                self.train.timesteps
            } else {
                self.train.truncate
            },
            surrogate: self.train.surrogate,
            alpha: self.train.alpha,
            beta: self.train.beta,
            use_lut: self.train.use_lut,
            leak: self.train.leak,
            seed: self.run.seed,
            grad_clip: self.train.grad_clip,
            train_subset: self.train.train_subset,
            eval_subset: self.train.eval_subset,
            stop_at_accuracy: self.train.stop_at_accuracy,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_minimal_config() {
        let text = r#"
[run]
seed = 7
out_dir = "runs/x"

[dataset]
name = "mnist"
path = "data/mnist"

[model]
arch = "vgg5"

[train]
lr = 0.001
epochs = 3
timesteps = 10
"#;
        let cfg: RunConfig = toml::from_str(text).unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.run.seed, 7);
        let tc = cfg.train_config();
        assert_eq!(tc.truncate, 10); // defaults to timesteps
    }

    #[test]
    fn unknown_keys_rejected() {
        let text = r#"
[train]
lr = 0.001
made_up_knob = 3
"#;
        assert!(toml::from_str::<RunConfig>(text).is_err());
    }

    #[test]
    fn bad_values_rejected() {
        let mut cfg = RunConfig::default();
        cfg.train.lr = 0.0;
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::default();
        cfg.dataset.name = "imagenet".into();
        assert!(cfg.validate().is_err());
    }
}
