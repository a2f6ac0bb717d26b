//! The JSON run configuration shared by all subcommands.
//!
//! One file may carry sections for several subcommands; each subcommand
//! reads the common keys plus its own section. Unknown keys are rejected at
//! every level.

use std::path::{Path, PathBuf};

use driftlab_core::dlm::FitMode;
use driftlab_core::erm::ImportanceOptions;
use driftlab_core::harness::HarnessConfig;
use driftlab_core::perturb_sim::{TransformSpec, WeightScheme};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};

pub const DEFAULT_SEED: u64 = 20_240_601;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// Relative `--out` paths resolve against this directory.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub verbosity: Option<Verbosity>,
    /// Significant digits of numbers written to CSV files.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub precision: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data: Option<DataConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub simulate: Option<SimulateConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fit: Option<FitConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub erm: Option<ErmConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub validate: Option<HarnessConfig>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verbosity {
    Error,
    Warn,
    Info,
    Debug,
    Trace,
}

impl Verbosity {
    pub fn level(self) -> log::LevelFilter {
        match self {
            Verbosity::Error => log::LevelFilter::Error,
            Verbosity::Warn => log::LevelFilter::Warn,
            Verbosity::Info => log::LevelFilter::Info,
            Verbosity::Debug => log::LevelFilter::Debug,
            Verbosity::Trace => log::LevelFilter::Trace,
        }
    }
}

/// How input CSV files are read.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Outcome column; detected as the one column present in every source
    /// and absent from the target when unset.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub outcome: Option<String>,
    /// Columns read as categories even when their cells look numeric.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub categorical: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateConfig {
    pub m: usize,
    pub weights: WeightScheme,
    /// Rows per source; a single entry applies to every source.
    pub sizes: Vec<usize>,
    pub target_size: usize,
    /// Use the last weight row as a perturbed target instead of the
    /// unperturbed base distribution.
    #[serde(default)]
    pub perturb_target: bool,
    #[serde(default = "identity_transform")]
    pub transform: TransformSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub columns: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub outcome: Option<OutcomeConfig>,
}

fn identity_transform() -> TransformSpec {
    TransformSpec::Identity
}

/// `name = expr(columns) + noise_sd * N(0, 1)` appended to every source.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutcomeConfig {
    pub name: String,
    pub expr: String,
    #[serde(default)]
    pub noise_sd: f64,
    /// Also write the outcome into the target file.
    #[serde(default)]
    pub in_target: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitConfig {
    pub test_functions: Vec<String>,
    #[serde(default)]
    pub mode: FitMode,
    #[serde(default)]
    pub whiten: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ridge: Option<f64>,
    /// Dataset used as the reference of the reparametrized design.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference: Option<String>,
    #[serde(default = "default_level")]
    pub level: f64,
    /// Functions whose target mean gets a confidence interval.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub target_ci: Vec<String>,
    /// Replaces the generated `Call:` line of the text summary.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub call: Option<String>,
}

fn default_level() -> f64 {
    0.95
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ErmConfig {
    /// Covariate columns of the model; every numeric covariate when unset.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub features: Option<Vec<String>>,
    #[serde(default = "yes")]
    pub intercept: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loss: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<String>,
    /// Test functions of the weight fit and the shift scale; one
    /// `column:` per numeric covariate and `auto_indicators:` per
    /// categorical covariate when unset.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_functions: Option<Vec<String>>,
    #[serde(default = "simplex")]
    pub mode: FitMode,
    #[serde(default)]
    pub whiten: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ridge: Option<f64>,
    #[serde(default = "default_level")]
    pub level: f64,
    #[serde(default)]
    pub importance: ImportanceOptions,
}

fn yes() -> bool {
    true
}

fn simplex() -> FitMode {
    FitMode::Simplex
}

impl Default for ErmConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("every erm key has a default")
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let cfg: RunConfig =
            serde_json::from_str(&text).map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
        cfg.check()?;
        Ok(cfg)
    }

    fn check(&self) -> Result<()> {
        if let Some(p) = self.precision {
            if !(1..=17).contains(&p) {
                return Err(CliError::config(format!("precision must be between 1 and 17, got {p}")));
            }
        }
        Ok(())
    }

    pub fn seed_or_default(&self) -> u64 {
        self.seed.unwrap_or(DEFAULT_SEED)
    }

    pub fn precision(&self) -> usize {
        self.precision.unwrap_or(17)
    }

    pub fn data(&self) -> DataConfig {
        self.data.clone().unwrap_or_default()
    }

    /// Where an output named on the command line goes.
    pub fn resolve_output(&self, out: &Path) -> PathBuf {
        match &self.output_dir {
            Some(dir) if out.is_relative() => dir.join(out),
            _ => out.to_path_buf(),
        }
    }

    /// SHA-256 of the compact JSON form, after command-line overrides.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        let digest = Sha256::digest(&bytes);
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_are_rejected_at_every_level() {
        assert!(serde_json::from_str::<RunConfig>(r#"{"sed": 1}"#).is_err());
        assert!(serde_json::from_str::<RunConfig>(r#"{"fit": {"test_functions": [], "wheiten": true}}"#).is_err());
        assert!(serde_json::from_str::<RunConfig>(r#"{"data": {"outcome": "y", "extra": 1}}"#).is_err());
        assert!(serde_json::from_str::<RunConfig>(r#"{"validate": {"chekcs": []}}"#).is_err());
    }

    #[test]
    fn hash_changes_with_content_only() {
        let a: RunConfig = serde_json::from_str(r#"{"seed": 3, "precision": 6}"#).unwrap();
        let b: RunConfig = serde_json::from_str(r#"{ "precision": 6,   "seed": 3 }"#).unwrap();
        let c: RunConfig = serde_json::from_str(r#"{"seed": 4, "precision": 6}"#).unwrap();
        assert_eq!(a.hash(), b.hash());
        assert_ne!(a.hash(), c.hash());
        assert_eq!(a.hash().len(), 64);
    }

    #[test]
    fn erm_defaults() {
        let e = ErmConfig::default();
        assert!(e.intercept);
        assert_eq!(e.mode, FitMode::Simplex);
        assert_eq!(e.level, 0.95);
        assert_eq!(e.importance.clip_quantile, Some(0.99));
    }

    #[test]
    fn output_dir_applies_to_relative_paths() {
        let cfg = RunConfig { output_dir: Some("/tmp/x".into()), ..Default::default() };
        assert_eq!(cfg.resolve_output(Path::new("a.json")), PathBuf::from("/tmp/x/a.json"));
        assert_eq!(cfg.resolve_output(Path::new("/abs.json")), PathBuf::from("/abs.json"));
    }
}
