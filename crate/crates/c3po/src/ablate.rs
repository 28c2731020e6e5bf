//! Ablation sweeps: train a list of config variants on shared data and
//! tabulate their best and last metrics.
//!
//! A sweep file lists partial overrides merged into a base [`RunConfig`]:
//!
//! ```json
//! {"variants": [
//!   {"name": "D",   "model": {"branches": "D"}},
//!   {"name": "I+D", "model": {"branches": "I+D"}}
//! ]}
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::config::{load_datasets, DataSource, Datasets, RunConfig};
use crate::error::{Error, Result};
use crate::metrics::MetricsReport;
use crate::train::{TrainConfig, Trainer};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Variant {
    pub name: String,
    #[serde(default)]
    pub model: Value,
    #[serde(default)]
    pub train: Value,
    #[serde(default)]
    pub synth: Value,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub variants: Vec<Variant>,
}

impl SweepSpec {
    pub fn from_json(text: &str) -> Result<Self> {
        let spec: SweepSpec = serde_json::from_str(text)?;
        if spec.variants.is_empty() {
            return Err(Error::Config("sweep lists no variants".into()));
        }
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }
}

/// Recursively overlays `patch` on `base`; non-object values replace.
fn merge(base: &mut Value, patch: &Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                merge(b.entry(k.clone()).or_insert(Value::Null), v);
            }
        }
        (b, p) if !p.is_null() => *b = p.clone(),
        _ => {}
    }
}

/// The base config with a variant's overrides applied and validated.
pub fn apply_variant(base: &RunConfig, variant: &Variant) -> Result<RunConfig> {
    let mut value = serde_json::to_value(base)?;
    for (key, patch) in [("model", &variant.model), ("train", &variant.train), ("synth", &variant.synth)] {
        if !(patch.is_null() || patch.is_object()) {
            return Err(Error::Config(format!("variant {:?}: `{key}` must be an object", variant.name)));
        }
        merge(&mut value[key], patch);
    }
    let cfg: RunConfig =
        serde_json::from_value(value).map_err(|e| Error::Config(format!("variant {:?}: {e}", variant.name)))?;
    cfg.validate()?;
    Ok(cfg)
}

/// One table row. Metric columns are empty when the variant failed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub last_f1: Option<f64>,
    pub best_f1: Option<f64>,
    pub best_epoch: Option<usize>,
    pub error: Option<String>,
}

impl AblationRow {
    fn from_reports(name: &str, best: &MetricsReport, last: &MetricsReport) -> Self {
        AblationRow {
            name: name.to_string(),
            last_f1: Some(last.f1),
            best_f1: Some(best.f1),
            best_epoch: best.epoch,
            error: None,
        }
    }

    fn failed(name: &str, err: &Error) -> Self {
        AblationRow {
            name: name.to_string(),
            last_f1: None,
            best_f1: None,
            best_epoch: None,
            error: Some(err.to_string()),
        }
    }
}

/// Directory-safe form of a variant name.
fn slug(name: &str) -> String {
    name.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

fn run_variant(cfg: &RunConfig, data: &Datasets, ckpt_dir: Option<PathBuf>) -> Result<(MetricsReport, MetricsReport)> {
    if let Some(dir) = &ckpt_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("config.json");
        std::fs::write(&path, cfg.to_json_pretty()).map_err(|e| Error::io(&path, e))?;
    }
    let train_cfg = TrainConfig {
        checkpoint_dir: ckpt_dir,
        ..cfg.train.clone()
    };
    let mut trainer = Trainer::new(&cfg.model, &train_cfg, &data.train)?;
    let outcome = trainer.fit(&data.train, &data.test, |_| {})?;
    Ok((outcome.best, outcome.last))
}

/// Trains every variant in order. Data is resolved per variant (so `synth`
/// or `train.data_seed` overrides take effect) from `source` when given,
/// otherwise from each variant's `train.data`. A variant that fails to build
/// or train yields an error row and the sweep moves on. With `out_dir`, each
/// variant's checkpoints and log go to `out_dir/<name>/`.
pub fn run_sweep(
    base: &RunConfig,
    spec: &SweepSpec,
    source: Option<&DataSource>,
    out_dir: Option<&Path>,
    mut on_row: impl FnMut(&AblationRow),
) -> Vec<AblationRow> {
    let mut rows = Vec::with_capacity(spec.variants.len());
    for variant in &spec.variants {
        let result = apply_variant(base, variant).and_then(|cfg| {
            let data = load_datasets(&cfg, source.unwrap_or(&cfg.train.data))?;
            run_variant(&cfg, &data, out_dir.map(|d| d.join(slug(&variant.name))))
        });
        let row = match result {
            Ok((best, last)) => AblationRow::from_reports(&variant.name, &best, &last),
            Err(e) => {
                log::warn!("variant {:?} failed: {e}", variant.name);
                AblationRow::failed(&variant.name, &e)
            }
        };
        on_row(&row);
        rows.push(row);
    }
    rows
}

/// Writes rows as CSV: `name, last_f1, best_f1, best_epoch, error`.
pub fn write_table(path: &Path, rows: &[AblationRow]) -> Result<()> {
    let csv_err = |e: csv::Error| Error::Data(format!("{}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(["name", "last_f1", "best_f1", "best_epoch", "error"]).map_err(csv_err)?;
    let opt = |v: Option<f64>| v.map_or_else(String::new, |x| format!("{x:.4}"));
    for r in rows {
        w.write_record([
            r.name.clone(),
            opt(r.last_f1),
            opt(r.best_f1),
            r.best_epoch.map_or_else(String::new, |e| e.to_string()),
            r.error.clone().unwrap_or_default(),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
