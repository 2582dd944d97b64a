use std::path::{Path, PathBuf};

use dcr_core::datasets::{generate_synthetic, load_idx, Dataset};
use dcr_core::training::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::{invalid, Failure};

/// Where images come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Synthetic(SyntheticSpec),
    Idx { images: PathBuf, labels: PathBuf },
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Synthetic(SyntheticSpec::default())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub per_class: usize,
    pub height: usize,
    pub width: usize,
    /// Seed of the generator; independent of the training seed.
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            classes: 8,
            per_class: 64,
            height: 16,
            width: 16,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifyOptions {
    pub lemma1_sets: usize,
    pub lemma1_max_n: usize,
    pub lemma1_dim: usize,
    pub theorem1_batches: usize,
    pub theorem1_batch_size: usize,
    pub sandwich_instances: usize,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self {
            lemma1_sets: 100,
            lemma1_max_n: 500,
            lemma1_dim: 64,
            theorem1_batches: 20,
            theorem1_batch_size: 32,
            sandwich_instances: 1000,
        }
    }
}

/// Everything a command needs, as read from a TOML file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Parent of run directories, or the target of `gen-data`.
    pub out: PathBuf,
    pub data: DataSource,
    pub train: TrainConfig,
    pub verify: VerifyOptions,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            out: PathBuf::from("runs"),
            data: DataSource::default(),
            train: TrainConfig::default(),
            verify: VerifyOptions::default(),
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, Failure> {
        toml::from_str(text).map_err(|e| invalid(format!("config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self, Failure> {
        if !path.is_file() {
            return Err(invalid(format!("config file {} not found", path.display())));
        }
        let text = std::fs::read_to_string(path).map_err(|e| invalid(format!("reading {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config is always representable in TOML")
    }

    /// Checks the training settings and that every input path exists.
    pub fn validate(&self) -> Result<(), Failure> {
        self.train.validate()?;
        match &self.data {
            DataSource::Synthetic(s) => {
                if s.classes < 2 {
                    return Err(invalid(format!(
                        "synthetic data needs at least 2 classes (got {}); clustering metrics are undefined with one",
                        s.classes
                    )));
                }
            }
            DataSource::Idx { images, labels } => {
                for p in [images, labels] {
                    if !p.is_file() {
                        return Err(invalid(format!("data file {} not found", p.display())));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn load_data(&self) -> Result<Dataset, Failure> {
        let data = match &self.data {
            DataSource::Synthetic(s) => generate_synthetic(s.classes, s.per_class, s.height, s.width, s.seed)?,
            DataSource::Idx { images, labels } => load_idx(images, labels)?,
        };
        if data.num_classes < 2 {
            return Err(invalid("dataset has fewer than 2 classes"));
        }
        Ok(data)
    }
}
