//! Run configuration. A TOML file with `[section]` tables; every key can be
//! overridden on the command line, either through a dedicated flag or with
//! `--set section.key=value`.

use std::path::{Path, PathBuf};

use mamba_icl::dynamics::max_learning_rate;
use mamba_icl::training::{Init, Mode, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::error::{LabError, LabResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub seed: u64,
    pub out: PathBuf,
    /// Independent trials per sweep point; trial `k` uses seed `seed + k`.
    pub trials: usize,
}

impl Default for RunSection {
    fn default() -> Self {
        Self { seed: 0, out: PathBuf::from("out"), trials: 10 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub d: usize,
    pub n: usize,
    pub dh: usize,
    /// Defaults to `1/(2d²d_h)` when absent.
    pub eta: Option<f64>,
    pub mode: Mode,
    pub init: Init,
    /// Population iterations (cap) or empirical epochs.
    pub iterations: usize,
    pub tol: f64,
    pub train_wdelta: bool,
    pub confidence: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            d: 4,
            n: 50,
            dh: 80,
            eta: None,
            mode: Mode::Population,
            init: Init::Gaussian,
            iterations: 200_000,
            tol: 1e-6,
            train_wdelta: false,
            confidence: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub train_prompts: usize,
    pub test_prompts: usize,
    pub batch_size: Option<usize>,
}

impl Default for DataSection {
    fn default() -> Self {
        Self { train_prompts: 3000, test_prompts: 1000, batch_size: None }
    }
}

/// Settings that only apply to empirical training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmpiricalSection {
    pub warm_start: usize,
    pub wdelta_eta: f64,
    pub wdelta_init_std: f64,
    pub max_step_norm: Option<f64>,
    pub train_bdelta: bool,
}

impl Default for EmpiricalSection {
    fn default() -> Self {
        Self { warm_start: 0, wdelta_eta: 0.1, wdelta_init_std: 0.4, max_step_norm: None, train_bdelta: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FiguresSection {
    /// Context lengths of the loss sweep.
    pub n_values: Vec<usize>,
    pub cosine_prompts: usize,
}

impl Default for FiguresSection {
    fn default() -> Self {
        Self { n_values: (1..=20).map(|k| 4 * k).collect(), cosine_prompts: 1000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TablesSection {
    pub baseline_d: usize,
    pub baseline_n: Vec<usize>,
    pub short_d: usize,
    pub short_n: Vec<usize>,
    pub wdelta_epochs: usize,
    pub wdelta_warm_start: usize,
    pub wdelta_max_step_norm: f64,
    pub width_d: usize,
    pub width_n: usize,
    pub width_dh: Vec<usize>,
}

impl Default for TablesSection {
    fn default() -> Self {
        Self {
            baseline_d: 10,
            baseline_n: (1..=8).map(|k| 10 * k).collect(),
            short_d: 20,
            short_n: (2..=10).map(|k| 2 * k).collect(),
            wdelta_epochs: 80,
            wdelta_warm_start: 3000,
            wdelta_max_step_norm: 0.05,
            width_d: 4,
            width_n: 30,
            width_dh: (3..=10).map(|k| 2 * k).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifySection {
    /// Monte-Carlo sample count of the expectation oracles.
    pub samples: usize,
    /// Acceptance threshold in standard errors.
    pub k: f64,
    pub grad_eps: f64,
    pub grad_threshold: f64,
    /// Relative Frobenius tolerance of the population-gradient check.
    pub population_tolerance: f64,
    /// Test hook: multiplies `β1` before the identity check.
    #[serde(skip_serializing_if = "is_one")]
    pub beta1_scale: f64,
}

fn is_one(v: &f64) -> bool {
    *v == 1.0
}

impl Default for VerifySection {
    fn default() -> Self {
        Self {
            samples: 1_000_000,
            k: 4.0,
            grad_eps: 1e-5,
            grad_threshold: 1e-4,
            population_tolerance: 0.01,
            beta1_scale: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LabConfig {
    pub run: RunSection,
    pub model: ModelSection,
    pub data: DataSection,
    pub empirical: EmpiricalSection,
    pub figures: FiguresSection,
    pub tables: TablesSection,
    pub verify: VerifySection,
}

impl LabConfig {
    pub fn from_toml(text: &str) -> LabResult<Self> {
        Self::from_toml_with(text, &[])
    }

    /// Parses `text`, applies `section.key=value` overrides, then validates.
    pub fn from_toml_with(text: &str, overrides: &[String]) -> LabResult<Self> {
        let mut table: toml::Table = text.parse().map_err(|e| LabError::Config(format!("config: {e}")))?;
        for item in overrides {
            apply_override(&mut table, item)?;
        }
        let config: LabConfig =
            toml::Value::Table(table).try_into().map_err(|e: toml::de::Error| LabError::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> LabResult<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| LabError::io(p, e))?,
            None => String::new(),
        };
        Self::from_toml_with(&text, overrides)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> LabResult<()> {
        let m = &self.model;
        if m.d == 0 || m.n == 0 || m.dh == 0 {
            return Err(LabError::Config(format!("d, n and dh must be positive (got {}, {}, {})", m.d, m.n, m.dh)));
        }
        if let Some(eta) = m.eta {
            if !(eta >= 0.0 && eta.is_finite()) {
                return Err(LabError::Config(format!("eta must be finite and non-negative, got {eta}")));
            }
        }
        if self.run.trials == 0 {
            return Err(LabError::Config("trials must be at least 1".into()));
        }
        if self.data.test_prompts == 0 || self.data.train_prompts == 0 {
            return Err(LabError::Config("train_prompts and test_prompts must be positive".into()));
        }
        if self.verify.samples < 2 {
            return Err(LabError::Config("verify.samples must be at least 2".into()));
        }
        if self.figures.n_values.contains(&0) || self.tables.short_n.contains(&0) || self.tables.baseline_n.contains(&0) {
            return Err(LabError::Config("context lengths must be positive".into()));
        }
        Ok(())
    }

    pub fn eta(&self) -> f64 {
        self.model.eta.unwrap_or_else(|| max_learning_rate(self.model.d, self.model.dh))
    }

    /// Training configuration for `(d, n, d_h)` with seed `seed`; the
    /// learning rate falls back to `1/(2d²d_h)` for these dimensions.
    pub fn train_config(&self, d: usize, n: usize, d_h: usize, seed: u64) -> TrainConfig {
        let mut c = TrainConfig::new(d, n, d_h);
        c.eta = self.model.eta.unwrap_or(c.eta);
        c.iterations = self.model.iterations;
        c.init = self.model.init;
        c.mode = self.model.mode;
        c.tol = self.model.tol;
        c.train_wdelta = self.model.train_wdelta;
        c.confidence = self.model.confidence;
        c.batch_size = self.data.batch_size;
        c.train_prompts = self.data.train_prompts;
        c.warm_start = self.empirical.warm_start;
        c.wdelta_eta = self.empirical.wdelta_eta;
        c.wdelta_init_std = self.empirical.wdelta_init_std;
        c.max_step_norm = self.empirical.max_step_norm;
        c.train_bdelta = self.empirical.train_bdelta;
        c.seed = seed;
        c
    }
}

fn apply_override(table: &mut toml::Table, item: &str) -> LabResult<()> {
    let (path, raw) =
        item.split_once('=').ok_or_else(|| LabError::Config(format!("override '{item}' is not key=value")))?;
    let (section, key) = path
        .trim()
        .split_once('.')
        .ok_or_else(|| LabError::Config(format!("override key '{path}' must be section.key")))?;
    let raw = raw.trim();
    // Bare words that are not TOML literals are taken as strings.
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let entry = table.entry(section.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
    let section_table =
        entry.as_table_mut().ok_or_else(|| LabError::Config(format!("'{section}' is not a section")))?;
    section_table.insert(key.to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let c = LabConfig::from_toml("").unwrap();
        assert_eq!(c, LabConfig::default());
        assert_eq!(c.eta(), 1.0 / 2560.0);
    }

    #[test]
    fn overrides_take_precedence() {
        let text = "[model]\nd = 3\nmode = \"empirical\"\n";
        let c = LabConfig::from_toml_with(text, &["model.d=5".into(), "run.out=results".into()]).unwrap();
        assert_eq!(c.model.d, 5);
        assert_eq!(c.model.mode, Mode::Empirical);
        assert_eq!(c.run.out, PathBuf::from("results"));
    }

    #[test]
    fn round_trips_through_toml() {
        let mut c = LabConfig::default();
        c.model.eta = Some(0.001);
        c.data.batch_size = Some(64);
        assert_eq!(LabConfig::from_toml(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        assert!(LabConfig::from_toml("[model]\ndepth = 3\n").is_err());
        assert!(LabConfig::from_toml("[model]\nd = 0\n").is_err());
        assert!(LabConfig::from_toml("[model]\nmode = \"online\"\n").is_err());
        assert!(LabConfig::from_toml_with("", &["nokey".into()]).is_err());
    }
}
