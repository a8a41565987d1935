use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::Strategy;
use crate::model::{ModelConfig, Task};
use crate::objective::LossCoefficients;
use crate::synth::{ContextTag, SequenceSample};

/// Everything needed to reproduce a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub task: Task,
    pub strategy: Strategy,
    pub d_h: usize,
    pub d_z: usize,
    /// Number of context grid steps.
    pub k: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub grad_clip: Option<f64>,
    pub seed: u64,
    pub beta: f64,
    pub lambda_uni: f64,
    pub folds: usize,
    /// Share of each training fold held out to fit late-fusion weights.
    pub validation_fraction: f64,
    pub data: Vec<PathBuf>,
    /// Keep only these contexts; `None` keeps all.
    pub contexts: Option<Vec<ContextTag>>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let c = LossCoefficients::default();
        Self {
            task: Task::Classification,
            strategy: Strategy::Tcf,
            d_h: 16,
            d_z: 8,
            k: 8,
            epochs: 30,
            batch_size: 16,
            learning_rate: 1e-3,
            grad_clip: Some(5.0),
            seed: 0,
            beta: c.beta,
            lambda_uni: c.lambda_uni,
            folds: 5,
            validation_fraction: 0.2,
            data: Vec::new(),
            contexts: None,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: RunConfig =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d_h", self.d_h),
            ("d_z", self.d_z),
            ("k", self.k),
            ("epochs", self.epochs),
            ("batch_size", self.batch_size),
            ("folds", self.folds),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::Config("learning_rate must be finite and nonnegative".into()));
        }
        if let Some(c) = self.grad_clip {
            if !(c.is_finite() && c > 0.0) {
                return Err(Error::Config("grad_clip must be positive".into()));
            }
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return Err(Error::Config("validation_fraction must lie in (0, 1)".into()));
        }
        self.coefficients().validate().map_err(|e| Error::Config(e.to_string()))?;
        self.task.validate()
    }

    pub fn coefficients(&self) -> LossCoefficients {
        LossCoefficients { beta: self.beta, lambda_uni: self.lambda_uni }
    }

    /// Model shape for data whose feature widths are those of `sample`.
    pub fn model_config(&self, sample: &SequenceSample) -> Result<ModelConfig> {
        sample.validate()?;
        let cfg = ModelConfig {
            strategy: self.strategy,
            task: self.task.clone(),
            d_audio: sample.audio_features[0].len(),
            d_text: sample.text_features[0].len(),
            d_h: self.d_h,
            d_z: self.d_z,
            k: self.k,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies the context filter.
    pub fn select<'a>(&self, data: &'a [SequenceSample]) -> Vec<&'a SequenceSample> {
        data.iter().filter(|s| self.contexts.as_ref().map_or(true, |c| c.contains(&s.context_tag))).collect()
    }
}
