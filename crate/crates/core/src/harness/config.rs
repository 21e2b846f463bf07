use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{SynthSpec, TaskKind};
use crate::curriculum::{CurriculumSchedule, Pacing};
use crate::decode::DecodeConfig;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, TaskK};
use crate::numcore::AdamConfig;

pub const OUT_DIR_ENV: &str = "TCLNAT_OUT_DIR";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Desk,
    Small,
    Custom,
}

/// Everything one experiment needs, as a flat key/value file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Existing corpus directory; generated under `out_dir/data` when absent.
    pub data_dir: Option<PathBuf>,

    pub task: TaskKind,
    pub vocab_size: usize,
    pub len_min: usize,
    pub len_max: usize,
    pub train_size: usize,
    pub dev_size: usize,
    pub test_size: usize,

    /// `desk` and `small` fix the sizes below; `custom` reads them.
    pub preset: Preset,
    pub d_model: usize,
    pub d_hidden: usize,
    pub n_layer: usize,
    pub n_head: usize,
    pub max_len: usize,

    pub steps_at: u64,
    pub steps_sat: u64,
    pub steps_nat: u64,
    pub pacing: Pacing,
    pub window: usize,
    pub teacher_steps: u64,

    pub warmup_steps: u64,
    pub lr_factor: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub label_smoothing: f64,
    pub dropout: f64,
    pub max_tokens: usize,

    pub log_interval: u64,
    pub checkpoint_interval: u64,
    /// Stop once the final-phase dev loss has not improved for this many evaluations; 0 disables.
    pub early_stop_patience: u64,
    pub eval_interval: u64,

    pub decode_k: TaskK,
    pub npd_b: usize,
    pub rescore: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 7,
            out_dir: PathBuf::from("runs/default"),
            data_dir: None,
            task: TaskKind::MappedSwap,
            vocab_size: 64,
            len_min: 4,
            len_max: 16,
            train_size: 10_000,
            dev_size: 200,
            test_size: 200,
            preset: Preset::Desk,
            d_model: 32,
            d_hidden: 64,
            n_layer: 2,
            n_head: 4,
            max_len: 32,
            steps_at: 200,
            steps_sat: 600,
            steps_nat: 800,
            pacing: Pacing::Exponential,
            window: 2,
            teacher_steps: 800,
            warmup_steps: 200,
            lr_factor: 1.0,
            beta1: 0.9,
            beta2: 0.98,
            epsilon: 1e-9,
            label_smoothing: 0.1,
            dropout: 0.0,
            max_tokens: 1024,
            log_interval: 10,
            checkpoint_interval: 200,
            early_stop_patience: 0,
            eval_interval: 0,
            decode_k: TaskK::Full,
            npd_b: 0,
            rescore: false,
        }
    }
}

impl ExperimentConfig {
    /// Parses a config file and applies the output-directory override from the environment.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text)?;
        cfg.apply_env();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.message().to_owned()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn apply_env(&mut self) {
        if let Some(dir) = std::env::var_os(OUT_DIR_ENV) {
            self.out_dir = PathBuf::from(dir);
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule()?;
        self.model_config(self.vocab_size).validate()?;
        self.decode_config().validate()?;
        if self.len_max > self.max_len {
            return Err(Error::Config(format!("len_max {} exceeds max_len {}", self.len_max, self.max_len)));
        }
        if self.max_tokens < self.len_max {
            return Err(Error::Config(format!("max_tokens {} below len_max {}", self.max_tokens, self.len_max)));
        }
        if !(0.0..1.0).contains(&self.dropout) || !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::Config("dropout and label_smoothing must lie in [0, 1)".into()));
        }
        if self.warmup_steps == 0 || self.log_interval == 0 {
            return Err(Error::Config("warmup_steps and log_interval must be positive".into()));
        }
        if let Some(dir) = &self.data_dir {
            if !dir.is_dir() {
                return Err(Error::Config(format!("data_dir {} does not exist", dir.display())));
            }
        }
        Ok(())
    }

    pub fn data_dir(&self) -> PathBuf {
        self.data_dir.clone().unwrap_or_else(|| self.out_dir.join("data"))
    }

    pub fn synth_spec(&self) -> SynthSpec {
        SynthSpec {
            task: self.task,
            vocab_size: self.vocab_size,
            len_min: self.len_min,
            len_max: self.len_max,
            seed: self.seed,
        }
    }

    pub fn model_config(&self, vocab_size: usize) -> ModelConfig {
        match self.preset {
            Preset::Desk => ModelConfig::desk(vocab_size, self.max_len),
            Preset::Small => ModelConfig::small(vocab_size, self.max_len),
            Preset::Custom => ModelConfig {
                d_model: self.d_model,
                d_hidden: self.d_hidden,
                n_layer: self.n_layer,
                n_head: self.n_head,
                vocab_size,
                max_len: self.max_len,
            },
        }
    }

    pub fn schedule(&self) -> Result<CurriculumSchedule> {
        CurriculumSchedule::new(self.steps_at, self.steps_sat, self.steps_nat, self.pacing, self.window)
            .map_err(|e| Error::Config(e.to_string()))
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
            warmup_steps: self.warmup_steps,
            lr_factor: self.lr_factor,
        }
    }

    pub fn decode_config(&self) -> DecodeConfig {
        DecodeConfig::new(self.decode_k, self.npd_b, self.rescore, self.max_len)
    }

    /// Hash of every key that shapes a training trajectory. Output paths,
    /// logging cadence and decoding options are excluded, so they may change
    /// across a resume.
    pub fn training_hash(&self) -> String {
        let mut c = self.clone();
        c.out_dir = PathBuf::new();
        c.data_dir = None;
        c.log_interval = 1;
        c.checkpoint_interval = 0;
        c.eval_interval = 0;
        c.early_stop_patience = 0;
        c.decode_k = TaskK::Full;
        c.npd_b = 0;
        c.rescore = false;
        let json = serde_json::to_string(&c).expect("config serialises");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid_and_round_trip() {
        let c = ExperimentConfig::default();
        c.validate().unwrap();
        assert_eq!(ExperimentConfig::from_toml(&c.to_toml().unwrap()).unwrap(), c);
    }

    #[test]
    fn partial_file_fills_defaults() {
        let c = ExperimentConfig::from_toml("seed = 3\npacing = \"linear\"\ndecode_k = 1\nwindow = 1\n").unwrap();
        assert_eq!(c.seed, 3);
        assert_eq!(c.pacing, Pacing::Linear);
        assert_eq!(c.decode_k, TaskK::Fixed(1));
        assert_eq!(c.train_size, ExperimentConfig::default().train_size);
        let n = ExperimentConfig::from_toml("decode_k = \"N\"").unwrap();
        assert_eq!(n.decode_k, TaskK::Full);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = ExperimentConfig::from_toml("seeed = 3").unwrap_err().to_string();
        assert!(err.contains("seeed"), "{err}");
    }

    #[test]
    fn invalid_values_are_rejected() {
        let c = ExperimentConfig {
            len_max: 40,
            ..Default::default()
        };
        assert!(c.validate().is_err());
        let c = ExperimentConfig {
            window: 0,
            ..Default::default()
        };
        assert!(c.validate().is_err());
        let c = ExperimentConfig {
            data_dir: Some(PathBuf::from("/nonexistent/tclnat")),
            ..Default::default()
        };
        assert!(c.validate().is_err());
    }

    #[test]
    fn training_hash_ignores_output_settings() {
        let a = ExperimentConfig::default();
        let b = ExperimentConfig {
            out_dir: PathBuf::from("elsewhere"),
            log_interval: 50,
            npd_b: 3,
            ..Default::default()
        };
        assert_eq!(a.training_hash(), b.training_hash());
        let c = ExperimentConfig {
            seed: 8,
            ..Default::default()
        };
        assert_ne!(a.training_hash(), c.training_hash());
    }
}
