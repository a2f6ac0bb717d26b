use driftlab_core::harness::{self, HarnessConfig, HarnessReport};
use serde::Serialize;

use super::load_config;
use crate::error::{CliError, Result};
use crate::output::{write_json, Provenance};
use crate::{Cli, ValidateArgs};

#[derive(Serialize)]
struct ValidateReport<'a> {
    provenance: Provenance,
    #[serde(flatten)]
    report: &'a HarnessReport,
}

pub fn run(cli: &Cli, args: &ValidateArgs) -> Result<()> {
    let mut cfg = load_config(cli, args.config.as_deref())?;
    let mut harness_cfg = cfg.validate.clone().unwrap_or_default();
    if let Some(seed) = cfg.seed {
        harness_cfg.seed = seed;
    }
    cfg.seed = Some(harness_cfg.seed);
    cfg.validate = Some(harness_cfg.clone());
    let report = run_harness(&harness_cfg)?;
    for c in &report.checks {
        println!("{:<16} {}", c.check, if c.passed { "pass" } else { "FAIL" });
    }
    write_json(
        &cfg.resolve_output(&args.out),
        &ValidateReport { provenance: Provenance::new(&cfg), report: &report },
    )?;
    let failed = report.checks.iter().filter(|c| !c.passed).count();
    if failed > 0 {
        return Err(CliError::ChecksFailed { failed, total: report.checks.len() });
    }
    Ok(())
}

fn run_harness(cfg: &HarnessConfig) -> Result<HarnessReport> {
    Ok(harness::run(cfg)?)
}
