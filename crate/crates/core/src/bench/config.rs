//! Experiment files: one TOML document with `[federation]`, `[model]`,
//! `[data]` and `[output]` tables. Unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{read_binary, read_csv, synthetic_classification, synthetic_regression, Dataset};
use crate::error::{FerretError, Result};
use crate::federation::FedConfig;
use crate::models::ModelSpec;
use crate::rand_basis::RandomSeed;

/// Overrides `[output].dir` when set.
pub const OUTPUT_DIR_ENV: &str = "FERRET_OUTPUT_DIR";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub federation: FedConfig,
    pub model: ModelSpec,
    pub data: DataConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DataSource {
    SyntheticRegression,
    SyntheticClassification,
    Csv,
    Binary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    /// Generated examples (synthetic sources only).
    #[serde(default)]
    pub examples: usize,
    #[serde(default)]
    pub noise: f64,
    /// Class count; 0 means a regression target.
    #[serde(default)]
    pub classes: usize,
    #[serde(default = "default_separation")]
    pub separation: f64,
    #[serde(default)]
    pub seed: RandomSeed,
    /// Training file for `csv` and `binary`, relative to the config file.
    #[serde(default)]
    pub path: Option<PathBuf>,
    /// Held-out file; when absent the last `test_examples` rows are held out.
    #[serde(default)]
    pub test_path: Option<PathBuf>,
    #[serde(default)]
    pub test_examples: usize,
}

fn default_separation() -> f64 {
    2.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    #[serde(default = "default_dir")]
    pub dir: PathBuf,
    #[serde(default = "default_csv")]
    pub csv: String,
    #[serde(default = "default_summary")]
    pub summary: String,
    /// Fill the timing columns with wall-clock seconds instead of zeros.
    #[serde(default)]
    pub record_timings: bool,
}

fn default_dir() -> PathBuf {
    PathBuf::from("ferret-out")
}

fn default_csv() -> String {
    "metrics.csv".into()
}

fn default_summary() -> String {
    "summary.json".into()
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig {
            dir: default_dir(),
            csv: default_csv(),
            summary: default_summary(),
            record_timings: false,
        }
    }
}

/// 1-based line and column of byte `offset` in `text`.
pub fn line_col(text: &str, offset: usize) -> (usize, usize) {
    let before = &text[..offset.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let col = before.rsplit('\n').next().map_or(0, |l| l.chars().count()) + 1;
    (line, col)
}

impl ExperimentConfig {
    /// Parses TOML text. Errors carry the line and column of the offending
    /// key or value.
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| {
            let msg = e.message().trim().to_string();
            match e.span() {
                Some(span) => {
                    let (line, col) = line_col(text, span.start);
                    FerretError::Config(format!("line {line}, column {col}: {msg}"))
                }
                None => FerretError::Config(msg),
            }
        })?;
        cfg.federation.validate()?;
        cfg.model.validate()?;
        Ok(cfg)
    }

    /// Reads `path`, resolving data paths against its directory and
    /// checking that they exist. Applies the output-dir override.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| FerretError::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut cfg.data.path, &mut cfg.data.test_path].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
            if !p.exists() {
                return Err(FerretError::Config(format!("data file {} does not exist", p.display())));
            }
        }
        if let Some(dir) = std::env::var_os(OUTPUT_DIR_ENV) {
            cfg.output.dir = PathBuf::from(dir);
        } else if cfg.output.dir.is_relative() {
            cfg.output.dir = base.join(&cfg.output.dir);
        }
        Ok(cfg)
    }

    /// Training and held-out sets described by `[data]`.
    pub fn load_data(&self) -> Result<(Dataset, Dataset)> {
        let d = &self.data;
        let m = &self.model;
        let classes = if m.is_classifier() { m.output_dim } else { 0 };
        if d.classes != 0 && d.classes != classes {
            return Err(FerretError::Config(format!(
                "data has {} classes, model predicts {classes}",
                d.classes
            )));
        }
        let full = match d.source {
            DataSource::SyntheticRegression => {
                if classes != 0 {
                    return Err(FerretError::Config(
                        "synthetic-regression needs a regression model".into(),
                    ));
                }
                synthetic_regression(d.examples, m.input_dim, d.noise, d.seed)
            }
            DataSource::SyntheticClassification => {
                if classes == 0 {
                    return Err(FerretError::Config(
                        "synthetic-classification needs a classifier".into(),
                    ));
                }
                synthetic_classification(d.examples, m.input_dim, classes, d.separation, d.seed)
            }
            DataSource::Csv => read_csv(self.data_path()?, classes)?,
            DataSource::Binary => read_binary(self.data_path()?)?,
        };
        if full.input_dim != m.input_dim {
            return Err(FerretError::Config(format!(
                "data has {} features, model expects {}",
                full.input_dim, m.input_dim
            )));
        }
        match &d.test_path {
            Some(p) => {
                let test = match d.source {
                    DataSource::Binary => read_binary(p)?,
                    _ => read_csv(p, classes)?,
                };
                Ok((full, test))
            }
            None => full.split_tail(d.test_examples),
        }
    }

    fn data_path(&self) -> Result<&Path> {
        self.data
            .path
            .as_deref()
            .ok_or_else(|| FerretError::Config("[data].path is required for file sources".into()))
    }

    pub fn csv_path(&self) -> PathBuf {
        self.output.dir.join(&self.output.csv)
    }

    pub fn summary_path(&self) -> PathBuf {
        self.output.dir.join(&self.output.summary)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
[federation]
method = "ferret"
num_clients = 4
rounds = 2
local_iters = 3
total_bases = 8
local_lr = 0.05
root_seed = 1

[model]
kind = "linear-regression"
input_dim = 5

[data]
source = "synthetic-regression"
examples = 100
noise = 0.1
test_examples = 20
"#;

    #[test]
    fn minimal_config_parses_with_defaults() {
        let cfg = ExperimentConfig::parse(MINIMAL).unwrap();
        assert_eq!(cfg.federation.server_lr, 1.0);
        assert_eq!(cfg.output.csv, "metrics.csv");
        let (train, test) = cfg.load_data().unwrap();
        assert_eq!((train.len(), test.len()), (80, 20));
    }

    #[test]
    fn unknown_key_reports_position() {
        let text = MINIMAL.replace("noise = 0.1", "noise = 0.1\nnoize = 2");
        let err = ExperimentConfig::parse(&text).unwrap_err().to_string();
        assert!(err.contains("line 19, column 1"), "{err}");
        assert!(err.contains("noize"), "{err}");
    }

    #[test]
    fn bad_value_reports_position() {
        let text = MINIMAL.replace("method = \"ferret\"", "method = \"fedsgd\"");
        let err = ExperimentConfig::parse(&text).unwrap_err().to_string();
        assert!(err.contains("line 3, column 10"), "{err}");
    }

    #[test]
    fn line_col_counts_from_one() {
        assert_eq!(line_col("ab\ncd", 0), (1, 1));
        assert_eq!(line_col("ab\ncd", 4), (2, 2));
    }
}
