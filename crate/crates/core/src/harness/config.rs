use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backbone::ModelConfig;
use crate::curriculum::CurriculumConfig;
use crate::data::{AugPolicy, SynthConfig};
use crate::error::{io_err, Error, Result};

/// Where training data comes from. Without a manifest or directories a
/// synthetic set is generated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub synth: SynthConfig,
    /// Synthetic sample count (train + test).
    pub num_samples: usize,
    /// Seed of the synthetic generator.
    pub seed: u64,
    /// Share of every size bin held out for testing.
    pub test_fraction: f64,
    /// Seed of the per-bin train/test draw.
    pub split_seed: u64,
    /// Existing JSON-lines manifest; its split column is kept when present.
    pub manifest: Option<PathBuf>,
    pub image_dir: Option<PathBuf>,
    pub mask_dir: Option<PathBuf>,
    pub augment: AugPolicy,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            synth: SynthConfig::default(),
            num_samples: 900,
            seed: 0,
            test_fraction: 0.3,
            split_seed: 0,
            manifest: None,
            image_dir: None,
            mask_dir: None,
            augment: AugPolicy::default(),
        }
    }
}

/// Component switches; a disabled component is structurally absent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Ablation {
    pub encf_on: bool,
    pub tcma_on: bool,
    pub cl_on: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Self::FULL
    }
}

impl Ablation {
    pub const FULL: Ablation = Ablation {
        encf_on: true,
        tcma_on: true,
        cl_on: true,
    };
    pub const BASELINE: Ablation = Ablation {
        encf_on: false,
        tcma_on: false,
        cl_on: false,
    };

    /// Parse a comma-separated list of components to switch off
    /// (`encf`, `tcma`, `cl`); the empty string or `none` keeps everything on.
    pub fn disabling(list: &str) -> Result<Self> {
        let mut a = Self::FULL;
        for item in list.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            match item.to_ascii_lowercase().as_str() {
                "encf" => a.encf_on = false,
                "tcma" => a.tcma_on = false,
                "cl" => a.cl_on = false,
                "none" => {}
                other => return Err(Error::Config(format!("unknown ablation component '{other}'"))),
            }
        }
        Ok(a)
    }

    /// Variant label in ablation tables: `baseline`, `+EnCF`, `+TCMA+CL`, …
    pub fn label(&self) -> String {
        let mut parts = Vec::new();
        if self.encf_on {
            parts.push("+EnCF");
        }
        if self.tcma_on {
            parts.push("+TCMA");
        }
        if self.cl_on {
            parts.push("+CL");
        }
        if parts.is_empty() {
            "baseline".into()
        } else {
            parts.concat()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub learning_rate: f64,
    /// Floor of the cosine schedule.
    pub min_learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Global gradient-norm cap; 0 disables clipping.
    pub grad_clip: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            min_learning_rate: 0.0,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch_size: 16,
            epochs: 200,
            grad_clip: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Evaluate the test split every this many epochs (0: only at the end).
    pub every: usize,
    /// Stop once the train-split DSC reaches this value (checked at each
    /// evaluation).
    pub stop_at_train_dsc: Option<f64>,
    /// Also score the training split at each evaluation.
    pub train_metrics: bool,
}

/// Everything that determines a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub data: DataConfig,
    pub curriculum: CurriculumConfig,
    pub ablation: Ablation,
    pub optim: OptimConfig,
    pub eval: EvalConfig,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Model configuration after applying the ablation switches.
    pub fn effective_model(&self) -> ModelConfig {
        let mut m = self.model.clone();
        m.encf &= self.ablation.encf_on;
        m.tcma.enabled &= self.ablation.tcma_on;
        m
    }

    pub fn curriculum_on(&self) -> bool {
        self.curriculum.enabled && self.ablation.cl_on
    }

    pub fn validate(&self) -> Result<()> {
        self.effective_model().validate()?;
        self.curriculum.validate()?;
        self.data.synth.validate()?;
        let o = &self.optim;
        if !(o.learning_rate > 0.0) || o.min_learning_rate < 0.0 || o.batch_size == 0 {
            return Err(Error::Config(
                "learning rate must be positive, min_learning_rate non-negative, batch size ≥ 1".into(),
            ));
        }
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) || !(o.eps > 0.0) {
            return Err(Error::Config("betas must lie in [0, 1) and eps be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.data.test_fraction) {
            return Err(Error::Config("test_fraction must lie in [0, 1]".into()));
        }
        if self.data.image_dir.is_some() != self.data.mask_dir.is_some() {
            return Err(Error::Config("image_dir and mask_dir must be given together".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_round_trip() {
        let cfg = ExperimentConfig::default();
        let back = ExperimentConfig::from_toml_str(&cfg.to_toml_string()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn partial_toml_uses_defaults() {
        let cfg = ExperimentConfig::from_toml_str("seed = 3\n[optim]\nepochs = 5\n").unwrap();
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.optim.epochs, 5);
        assert_eq!(cfg.optim.learning_rate, 1e-4);
    }

    #[test]
    fn unknown_key_is_config_error() {
        assert!(matches!(
            ExperimentConfig::from_toml_str("sede = 3"),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn ablation_parsing_and_labels() {
        assert_eq!(Ablation::disabling("").unwrap(), Ablation::FULL);
        assert_eq!(Ablation::disabling("encf,tcma,cl").unwrap(), Ablation::BASELINE);
        let a = Ablation::disabling("tcma, cl").unwrap();
        assert_eq!(a.label(), "+EnCF");
        assert_eq!(Ablation::FULL.label(), "+EnCF+TCMA+CL");
        assert!(Ablation::disabling("dropout").is_err());
    }

    #[test]
    fn ablation_shapes_model() {
        let cfg = ExperimentConfig {
            ablation: Ablation::BASELINE,
            ..Default::default()
        };
        let m = cfg.effective_model();
        assert!(!m.encf && !m.tcma.enabled);
        assert!(!cfg.curriculum_on());
    }
}
