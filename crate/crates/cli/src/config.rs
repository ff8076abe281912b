//! The JSON run configuration shared by every command.

use std::path::{Path, PathBuf};

use condmmd::data::{
    gen_synthetic, load_csv, normalize_split, Dataset, SyntheticSpec, TargetColumn, DEFAULT_TEST_FRACTION,
};
use condmmd::evalreport::EvalSettings;
use condmmd::rng::derive_seed;
use condmmd::training::{KernelsConfig, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};
use crate::varbench::VarbenchConfig;

/// Overrides the `seed` of every config when set.
pub const SEED_ENV: &str = "CONDMMD_SEED";

const SPLIT_STREAM: u64 = 0x5b1;
const EVAL_STREAM: u64 = 0xe7a1;
const MONITOR_STREAM: u64 = 0x3017;

fn default_out_dir() -> PathBuf {
    PathBuf::from("out")
}
fn default_test_fraction() -> f64 {
    DEFAULT_TEST_FRACTION
}
fn yes() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub dataset: Option<DatasetConfig>,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalSettings,
    #[serde(default)]
    pub kernels: KernelsConfig,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    /// Evaluate on the test split every this many epochs (0 disables).
    #[serde(default)]
    pub monitor_every: usize,
    #[serde(default)]
    pub varbench: VarbenchConfig,
}

/// Exactly one of `synthetic` and `csv` must be given.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    #[serde(default)]
    pub synthetic: Option<SyntheticSpec>,
    #[serde(default)]
    pub csv: Option<CsvSource>,
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsvSource {
    pub path: PathBuf,
    pub targets: Vec<TargetColumn>,
    #[serde(default = "yes")]
    pub has_header: bool,
}

/// Normalized train and test splits.
pub struct Splits {
    pub train: Dataset,
    pub test: Dataset,
}

impl RunConfig {
    /// Parses and validates `path`, applying the seed override.
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| CliError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        let bad = |msg: String| CliError::Config {
            path: path.to_path_buf(),
            msg,
        };
        let mut cfg: RunConfig = serde_json::from_str(&text).map_err(|e| bad(e.to_string()))?;
        if let Ok(v) = std::env::var(SEED_ENV) {
            cfg.seed = v
                .trim()
                .parse()
                .map_err(|_| bad(format!("{SEED_ENV}={v:?} is not a non-negative integer")))?;
        }
        cfg.train.seed = cfg.seed;
        cfg.validate().map_err(bad)?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<(), String> {
        self.train.validate().map_err(|e| e.to_string())?;
        if self.eval.m_draws < 2 {
            return Err(format!("eval.m_draws must be at least 2 (got {})", self.eval.m_draws));
        }
        if self.eval.n_reps < 1 {
            return Err("eval.n_reps must be at least 1".into());
        }
        if let Some(q) = self.eval.quantiles.iter().find(|q| !(0.0..=1.0).contains(*q)) {
            return Err(format!("eval.quantiles: level {q} outside [0, 1]"));
        }
        if let Some(ds) = &self.dataset {
            match (&ds.synthetic, &ds.csv) {
                (Some(_), Some(_)) => return Err("dataset: give either `synthetic` or `csv`, not both".into()),
                (None, None) => return Err("dataset: one of `synthetic` or `csv` is required".into()),
                (None, Some(c)) if c.targets.is_empty() => return Err("dataset.csv.targets must not be empty".into()),
                _ => {}
            }
            if !(ds.test_fraction > 0.0 && ds.test_fraction < 1.0) {
                return Err(format!(
                    "dataset.test_fraction must lie in (0, 1) (got {})",
                    ds.test_fraction
                ));
            }
        }
        self.varbench.validate()
    }

    pub fn dataset_config(&self) -> CliResult<&DatasetConfig> {
        self.dataset
            .as_ref()
            .ok_or_else(|| CliError::Usage("this command needs a `dataset` section in the config".into()))
    }

    /// Loads the raw (unnormalized) dataset.
    pub fn raw_dataset(&self) -> CliResult<Dataset> {
        let ds = self.dataset_config()?;
        Ok(match (&ds.synthetic, &ds.csv) {
            (Some(spec), _) => gen_synthetic(spec)?.0,
            (_, Some(c)) => load_csv(&c.path, &c.targets, c.has_header)?,
            (None, None) => unreachable!("validated"),
        })
    }

    pub fn splits(&self) -> CliResult<Splits> {
        let raw = self.raw_dataset()?;
        let frac = self.dataset_config()?.test_fraction;
        let (train, test) = normalize_split(&raw, frac, derive_seed(self.seed, SPLIT_STREAM))?;
        Ok(Splits { train, test })
    }

    pub fn eval_seed(&self) -> u64 {
        derive_seed(self.seed, EVAL_STREAM)
    }

    pub fn monitor_seed(&self, epoch: usize) -> u64 {
        derive_seed(derive_seed(self.seed, MONITOR_STREAM), epoch as u64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<RunConfig, String> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| e.to_string())?;
        cfg.validate()?;
        Ok(cfg)
    }

    #[test]
    fn empty_config_uses_defaults() {
        let cfg = parse("{}").unwrap();
        assert_eq!(cfg.train, TrainConfig::default());
        assert_eq!(cfg.eval, EvalSettings::default());
        assert_eq!(cfg.out_dir, PathBuf::from("out"));
        assert!(cfg.dataset.is_none());
    }

    #[test]
    fn rejects_unknown_and_misplaced_keys() {
        assert!(parse(r#"{"trian": {}}"#).is_err());
        // the seed lives at the top level only
        assert!(parse(r#"{"train": {"seed": 3}}"#).is_err());
        assert!(parse(r#"{"eval": {"reps": 3}}"#).is_err());
        assert!(parse(r#"{"dataset": {"synthetic": {"task": {"kind": "spiral"}}}}"#).is_err());
    }

    #[test]
    fn dataset_needs_exactly_one_source() {
        let syn = r#""synthetic": {"task": {"kind": "bimodal"}}"#;
        let csv = r#""csv": {"path": "a.csv", "targets": [2]}"#;
        assert!(parse(&format!(r#"{{"dataset": {{{syn}}}}}"#)).is_ok());
        assert!(parse(&format!(r#"{{"dataset": {{{csv}}}}}"#)).is_ok());
        assert!(parse(&format!(r#"{{"dataset": {{{syn}, {csv}}}}}"#)).is_err());
        assert!(parse(r#"{"dataset": {}}"#).is_err());
        assert!(parse(r#"{"dataset": {"csv": {"path": "a.csv", "targets": []}}}"#).is_err());
    }

    #[test]
    fn validates_numeric_ranges() {
        assert!(parse(r#"{"train": {"loss": "ammd", "m": 1}}"#).is_err());
        assert!(parse(r#"{"train": {"batch_size": 1}}"#).is_err());
        assert!(parse(r#"{"eval": {"m_draws": 1}}"#).is_err());
        assert!(parse(r#"{"eval": {"n_reps": 0}}"#).is_err());
        assert!(parse(r#"{"eval": {"quantiles": [1.5]}}"#).is_err());
        let ds = |f: f64| {
            format!(r#"{{"dataset": {{"synthetic": {{"task": {{"kind": "bimodal"}}}}, "test_fraction": {f}}}}}"#)
        };
        assert!(parse(&ds(0.0)).is_err());
        assert!(parse(&ds(1.0)).is_err());
        assert!(parse(&ds(0.5)).is_ok());
    }

    #[test]
    fn csv_targets_accept_names_and_indices() {
        let cfg =
            parse(r#"{"dataset": {"csv": {"path": "a.csv", "targets": ["MEDV", 3], "has_header": false}}}"#).unwrap();
        let csv = cfg.dataset.unwrap().csv.unwrap();
        assert_eq!(
            csv.targets,
            vec![TargetColumn::Name("MEDV".into()), TargetColumn::Index(3)]
        );
        assert!(!csv.has_header);
    }

    #[test]
    fn splits_are_seeded() {
        let mut cfg =
            parse(r#"{"dataset": {"synthetic": {"task": {"kind": "heteroscedastic"}, "samples": 50}}}"#).unwrap();
        let a = cfg.splits().unwrap();
        let b = cfg.splits().unwrap();
        assert_eq!(a.test.records(), b.test.records());
        cfg.seed = 1;
        let c = cfg.splits().unwrap();
        assert_ne!(a.test.records(), c.test.records());
        assert_eq!(a.train.len() + a.test.len(), 50);
    }
}
