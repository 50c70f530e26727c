//! Run profiles and the versioned TOML configuration file.
//!
//! A config file names a base profile and overrides any subset of its
//! values:
//!
//! ```toml
//! format_version = 1
//! profile = "desk"
//!
//! [pretrain_full]
//! max_steps = 500
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoder::{EncoderConfig, MaskingConfig};
use crate::error::{Error, Result};
use crate::fixtures::SyntheticSpec;
use crate::training::{ClassifyGrid, DevMetric, TrainConfig, TrainMode};

pub const FORMAT_VERSION: u32 = 1;

/// Bound values for every pipeline stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Profile {
    pub name: String,
    /// `vocab_size` is replaced by the vocabulary's size at run time.
    pub encoder: EncoderConfig,
    /// Pretraining of the stand-in base model on general text.
    pub base_pretrain: TrainConfig,
    pub pretrain_full: TrainConfig,
    pub pretrain_adapter: TrainConfig,
    pub ner_full: TrainConfig,
    pub ner_adapter: TrainConfig,
    pub classify_full: TrainConfig,
    pub classify_adapter: TrainConfig,
    pub classify_grid: ClassifyGrid,
    pub masking: MaskingConfig,
    /// Sentence budget of composed corpora.
    pub budget: u64,
    pub alpha: f64,
    pub seeds: Vec<u64>,
    pub fixtures: SyntheticSpec,
}

impl Profile {
    /// Paper-scale hyperparameters. Too large to run on a desk; kept so the
    /// desk values can be read against them.
    pub fn paper() -> Self {
        let pretrain = |lr, steps| TrainConfig {
            max_steps: steps,
            ..TrainConfig::new(lr, 2048, 32, 128)
        };
        let ner_full = TrainConfig {
            max_epochs: 100,
            early_stop_patience: 25,
            dev_metric: DevMetric::SpanF1,
            ..TrainConfig::new(2e-5, 32, 32, 128)
        };
        let ner_adapter = TrainConfig {
            mode: TrainMode::Adapter,
            max_epochs: 30,
            early_stop_patience: 0,
            adapter_dim: Some(48),
            ..TrainConfig::new(1e-4, 32, 32, 128)
        };
        Self {
            name: "paper".into(),
            encoder: EncoderConfig {
                num_layers: 12,
                hidden_dim: 768,
                num_heads: 12,
                ff_dim: 3072,
                max_seq_len: 512,
                vocab_size: 119_547,
                adapter_dim: None,
                dropout_rate: 0.1,
                init_std: 0.02,
            },
            base_pretrain: pretrain(5e-5, 25_000),
            pretrain_full: pretrain(5e-5, 25_000),
            pretrain_adapter: TrainConfig {
                mode: TrainMode::Adapter,
                adapter_dim: Some(48),
                ..pretrain(1e-4, 1_500_000)
            },
            classify_full: TrainConfig::new(2e-5, 32, 16, 128),
            classify_adapter: TrainConfig {
                mode: TrainMode::Adapter,
                adapter_dim: Some(48),
                ..TrainConfig::new(1e-4, 32, 16, 128)
            },
            ner_full,
            ner_adapter,
            classify_grid: ClassifyGrid::default(),
            masking: MaskingConfig::default(),
            budget: 10_000_000,
            alpha: 0.3,
            seeds: vec![1, 2, 3, 4, 5],
            fixtures: SyntheticSpec::default(),
        }
    }

    /// Scaled-down values that run the whole fixture pipeline on a CPU in
    /// minutes.
    pub fn desk() -> Self {
        let pretrain = |lr, steps| TrainConfig {
            max_steps: steps,
            warmup_steps: 50,
            ..TrainConfig::new(lr, 32, 8, 32)
        };
        let ner_full = TrainConfig {
            max_epochs: 20,
            early_stop_patience: 5,
            ..TrainConfig::new(2e-3, 16, 16, 32)
        };
        Self {
            name: "desk".into(),
            encoder: EncoderConfig {
                num_layers: 2,
                hidden_dim: 64,
                num_heads: 4,
                ff_dim: 128,
                max_seq_len: 32,
                vocab_size: 0,
                adapter_dim: None,
                dropout_rate: 0.0,
                init_std: 0.02,
            },
            base_pretrain: pretrain(1e-3, 1000),
            pretrain_full: pretrain(1e-3, 1500),
            pretrain_adapter: TrainConfig {
                mode: TrainMode::Adapter,
                adapter_dim: Some(16),
                ..pretrain(2e-3, 1500)
            },
            ner_adapter: TrainConfig {
                mode: TrainMode::Adapter,
                adapter_dim: Some(16),
                ..ner_full.clone()
            },
            ner_full,
            classify_full: TrainConfig::new(1e-3, 16, 16, 32),
            classify_adapter: TrainConfig {
                mode: TrainMode::Adapter,
                adapter_dim: Some(16),
                ..TrainConfig::new(2e-3, 16, 16, 32)
            },
            classify_grid: ClassifyGrid::default(),
            masking: MaskingConfig::default(),
            budget: 1500,
            alpha: 0.3,
            seeds: vec![1, 2, 3],
            fixtures: SyntheticSpec::default(),
        }
    }

    pub fn named(name: &str) -> Result<Self> {
        match name {
            "paper" => Ok(Self::paper()),
            "desk" => Ok(Self::desk()),
            _ => Err(Error::Config(format!("unknown profile `{name}` (expected paper or desk)"))),
        }
    }

    pub fn pretrain(&self, mode: TrainMode) -> &TrainConfig {
        match mode {
            TrainMode::Full => &self.pretrain_full,
            TrainMode::Adapter => &self.pretrain_adapter,
        }
    }

    pub fn ner(&self, mode: TrainMode) -> &TrainConfig {
        match mode {
            TrainMode::Full => &self.ner_full,
            TrainMode::Adapter => &self.ner_adapter,
        }
    }

    pub fn classify(&self, mode: TrainMode) -> &TrainConfig {
        match mode {
            TrainMode::Full => &self.classify_full,
            TrainMode::Adapter => &self.classify_adapter,
        }
    }

    /// Parses a config file. `fallback` names the base profile when the file
    /// does not.
    pub fn from_toml(text: &str, fallback: &str) -> Result<Self> {
        let mut user: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        let version = user
            .remove("format_version")
            .ok_or_else(|| Error::Config("config lacks `format_version`".into()))?;
        if version.as_integer() != Some(FORMAT_VERSION as i64) {
            return Err(Error::Config(format!(
                "unsupported format_version {version} (this build reads {FORMAT_VERSION})"
            )));
        }
        let base_name = match user.remove("profile") {
            Some(toml::Value::String(s)) => s,
            Some(other) => return Err(Error::Config(format!("`profile` must be a string, got {other}"))),
            None => fallback.to_owned(),
        };
        let base = Self::named(&base_name)?;
        let mut merged = toml::Table::try_from(&base).map_err(|e| Error::Config(e.to_string()))?;
        merge(&mut merged, user);
        let profile: Profile = merged.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        profile.validate()?;
        Ok(profile)
    }

    pub fn load(path: impl AsRef<Path>, fallback: &str) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text, fallback).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// The profile as a complete config file.
    pub fn to_toml(&self) -> String {
        let mut t = toml::Table::new();
        t.insert("format_version".into(), toml::Value::Integer(FORMAT_VERSION as i64));
        let body = toml::Table::try_from(self).expect("profile serializes");
        t.extend(body);
        toml::to_string(&t).expect("profile serializes")
    }

    pub fn validate(&self) -> Result<()> {
        for t in [
            &self.base_pretrain,
            &self.pretrain_full,
            &self.pretrain_adapter,
            &self.ner_full,
            &self.ner_adapter,
            &self.classify_full,
            &self.classify_adapter,
        ] {
            t.validate()?;
        }
        self.masking.validate()?;
        self.fixtures.validate()?;
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        if self.budget == 0 {
            return Err(Error::Config("budget must be positive".into()));
        }
        Ok(())
    }
}

fn merge(base: &mut toml::Table, user: toml::Table) {
    for (k, v) in user {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(u)) => merge(b, u),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn profiles_validate() {
        Profile::paper().validate().unwrap();
        Profile::desk().validate().unwrap();
        let p = Profile::paper();
        assert_eq!(p.pretrain_full.effective_batch, 2048);
        assert_eq!(p.pretrain_full.grad_accum_steps(), 64);
        assert_eq!(p.ner_full.early_stop_patience, 25);
    }

    #[test]
    fn partial_override() {
        let p = Profile::from_toml("format_version = 1\n[pretrain_full]\nmax_steps = 7\n", "desk").unwrap();
        assert_eq!(p.pretrain_full.max_steps, 7);
        assert_eq!(p.pretrain_full.learning_rate, Profile::desk().pretrain_full.learning_rate);
        let p = Profile::from_toml("format_version = 1\nprofile = \"paper\"\nbudget = 5\n", "desk").unwrap();
        assert_eq!((p.name.as_str(), p.budget), ("paper", 5));
    }

    #[test]
    fn full_round_trip() {
        let p = Profile::desk();
        assert_eq!(Profile::from_toml(&p.to_toml(), "paper").unwrap(), p);
    }

    #[test]
    fn rejects_bad_files() {
        assert!(Profile::from_toml("budget = 5\n", "desk").is_err());
        assert!(Profile::from_toml("format_version = 2\n", "desk").is_err());
        assert!(Profile::from_toml("format_version = 1\nprofile = \"huge\"\n", "desk").is_err());
        assert!(Profile::from_toml("format_version = 1\n[pretrain_full]\nbogus = 1\n", "desk").is_err());
        let e = Profile::from_toml("format_version = 1\n[pretrain_full]\nmicro_batch = 5\n", "desk").unwrap_err();
        assert_eq!(e.exit_code(), 2);
    }
}
