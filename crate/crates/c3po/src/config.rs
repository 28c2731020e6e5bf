//! The run configuration file: model, training and synthetic-data settings
//! in one JSON document, plus dataset resolution.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::io::load_dataset;
use crate::data::{generate_one, split, ChangeSample, SynthConfig};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::train::TrainConfig;

pub const CONFIG_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub synth: SynthConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            version: CONFIG_VERSION,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            synth: SynthConfig::default(),
        }
    }
}

impl RunConfig {
    /// Parses and validates; syntax and unknown-key errors carry line and column.
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Json(j) => Error::Config(format!("{}: {j}", path.display())),
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::Config(format!(
                "unsupported config version {} (expected {CONFIG_VERSION})",
                self.version
            )));
        }
        self.model.validate()?;
        self.train.validate()?;
        self.synth.validate()?;
        let synth_classes = self.synth.label_mode.num_classes();
        if synth_classes != self.model.num_classes {
            return Err(Error::Config(format!(
                "synth.label_mode yields {synth_classes} classes but model.num_classes is {}",
                self.model.num_classes
            )));
        }
        Ok(())
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }
}

/// Where training and test samples come from. Serialised as `"synth"` or a
/// directory path.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum DataSource {
    #[default]
    /// Generated from the config's `synth` section.
    Synth,
    /// A directory in the `t0/`, `t1/`, `mask/` layout, or one holding
    /// `train/` and `test/` directories in that layout.
    Dir(PathBuf),
}

impl FromStr for DataSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.is_empty() {
            return Err(Error::Config("empty data source".into()));
        }
        Ok(if s == "synth" {
            DataSource::Synth
        } else {
            DataSource::Dir(PathBuf::from(s))
        })
    }
}

impl TryFrom<String> for DataSource {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<DataSource> for String {
    fn from(d: DataSource) -> String {
        match d {
            DataSource::Synth => "synth".into(),
            DataSource::Dir(p) => p.display().to_string(),
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct Datasets {
    pub train: Vec<ChangeSample>,
    pub test: Vec<ChangeSample>,
    /// Loader warnings (skipped files).
    pub warnings: Vec<String>,
}

/// Synthetic samples `start..start + count` of the stream seeded by `seed`.
pub fn synth_range(cfg: &SynthConfig, seed: u64, start: usize, count: usize) -> Result<Vec<ChangeSample>> {
    (start..start + count).map(|i| generate_one(cfg, seed, i as u64)).collect()
}

/// Resolves the train/test samples of a run. Synthetic test samples continue
/// the training stream (indices after the training ones), so the two never
/// overlap.
pub fn load_datasets(cfg: &RunConfig, source: &DataSource) -> Result<Datasets> {
    let t = &cfg.train;
    match source {
        DataSource::Synth => Ok(Datasets {
            train: synth_range(&cfg.synth, t.data_seed, 0, t.train_samples)?,
            test: synth_range(&cfg.synth, t.data_seed, t.train_samples, t.test_samples)?,
            warnings: Vec::new(),
        }),
        DataSource::Dir(dir) => {
            let binary = cfg.model.num_classes == 2;
            let (train_dir, test_dir) = (dir.join("train"), dir.join("test"));
            let out = if train_dir.is_dir() && test_dir.is_dir() {
                let a = load_dataset(&train_dir, binary)?;
                let b = load_dataset(&test_dir, binary)?;
                Datasets {
                    train: a.samples,
                    test: b.samples,
                    warnings: a.warnings.into_iter().chain(b.warnings).collect(),
                }
            } else {
                let all = load_dataset(dir, binary)?;
                if all.samples.len() < 2 {
                    return Err(Error::Data(format!("{} holds fewer than two samples", dir.display())));
                }
                let (train, test) = split(&all.samples, t.train_fraction, t.data_seed)?;
                Datasets {
                    train,
                    test,
                    warnings: all.warnings,
                }
            };
            if out.train.is_empty() {
                return Err(Error::Data(format!("no training samples found under {}", dir.display())));
            }
            for s in out.train.iter().chain(&out.test) {
                s.validate(cfg.model.num_classes)?;
            }
            Ok(out)
        }
    }
}
