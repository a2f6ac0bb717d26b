use driftlab_core::dlm::{self, TargetCi};
use driftlab_core::summary;
use driftlab_core::test_functions::TestFunctionSet;
use serde::Serialize;

use super::{load_config, DlmRun, DlmSettings, FitSummary, Inputs};
use crate::config::FitConfig;
use crate::error::{CliError, Result};
use crate::ingest;
use crate::output::{atomic_write, write_json, Provenance};
use crate::{Cli, FitArgs};

/// JSON twin of the text summary.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FitReport {
    pub provenance: Provenance,
    pub inputs: Inputs,
    pub fit: FitSummary,
    /// Largest absolute off-diagonal correlation of the pooled test-function
    /// covariance after any whitening.
    pub max_offdiag_correlation: f64,
    pub target_ci: Vec<TargetCi>,
    pub summary: String,
}

pub fn run(cli: &Cli, args: &FitArgs) -> Result<()> {
    let mut cfg = load_config(cli, Some(&args.config))?;
    let mut fc = cfg
        .fit
        .clone()
        .ok_or_else(|| CliError::config("the config has no `fit` section"))?;
    if let Some(m) = args.mode {
        fc.mode = m.into();
    }
    fc.whiten |= args.whiten;
    cfg.fit = Some(fc.clone());
    let out = cfg.resolve_output(&args.out);
    let text = match out.extension().and_then(|e| e.to_str()) {
        Some("txt") => true,
        Some("json") => false,
        _ => return Err(CliError::Usage("--out must end in .txt or .json".into())),
    };

    let sources = ingest::source_paths(&args.data, &args.target)?;
    let data = ingest::ingest(&sources, &args.target, &cfg.data())?;
    let run = DlmRun::new(&data, &settings(&fc))?;
    let call = fc.call.clone().unwrap_or_else(|| summary::default_call(&run.fit));
    let summary_text = summary::summarize(&run.fit, &call);
    let provenance = Provenance::new(&cfg);

    if text {
        let body = format!("{}{summary_text}", provenance.comment_line());
        return atomic_write(&out, body.as_bytes());
    }
    let target_ci = if fc.target_ci.is_empty() {
        Vec::new()
    } else {
        let phis = TestFunctionSet::parse(&fc.target_ci, &data)?;
        phis.functions
            .iter()
            .map(|f| dlm::target_ci(&run.fit, &data, f, fc.level))
            .collect::<std::result::Result<_, _>>()?
    };
    let report = FitReport {
        provenance,
        inputs: Inputs::new(&sources, &args.target),
        fit: FitSummary::from(&run.fit),
        max_offdiag_correlation: run.moments.max_offdiag_correlation(),
        target_ci,
        summary: summary_text,
    };
    write_json(&out, &report)
}

pub(super) fn settings(fc: &FitConfig) -> DlmSettings<'_> {
    DlmSettings {
        test_functions: &fc.test_functions,
        mode: fc.mode,
        whiten: fc.whiten,
        ridge: fc.ridge,
        reference: fc.reference.as_deref(),
    }
}

