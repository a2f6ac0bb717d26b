use std::path::PathBuf;

use driftlab_core::diagnostics;
use serde::Deserialize;

use super::{fit::settings, load_config, DlmRun, Inputs};
use crate::error::{CliError, Result};
use crate::ingest;
use crate::output::{atomic_write, csv_number, Provenance};
use crate::{Cli, DiagnoseArgs};

/// Relative agreement required between the stored and the recomputed weights.
const WEIGHT_TOLERANCE: f64 = 1e-9;

/// The parts of a fit report needed to rebuild the fit.
#[derive(Deserialize)]
struct StoredReport {
    provenance: Provenance,
    inputs: Inputs,
    fit: StoredFit,
}

#[derive(Deserialize)]
struct StoredFit {
    dataset_names: Vec<String>,
    beta_hat: Vec<f64>,
}

pub fn run(cli: &Cli, args: &DiagnoseArgs) -> Result<()> {
    let text = std::fs::read_to_string(&args.fit).map_err(|e| CliError::io(&args.fit, e))?;
    let stored: StoredReport = serde_json::from_str(&text)
        .map_err(|e| CliError::config(format!("{}: not a JSON fit report: {e}", args.fit.display())))?;
    let load = load_config(cli, None)?;
    let mut cfg = stored.provenance.config.clone();
    if load.seed.is_some() {
        cfg.seed = load.seed;
    }
    let fc = cfg
        .fit
        .clone()
        .ok_or_else(|| CliError::config("the fit report carries no `fit` configuration"))?;

    let target = args.target.clone().unwrap_or_else(|| PathBuf::from(&stored.inputs.target));
    let sources = ingest::source_paths(&args.data, &target)?;
    let data = ingest::ingest(&sources, &target, &cfg.data())?;
    let run = DlmRun::new(&data, &settings(&fc))?;

    if run.fit.dataset_names != stored.fit.dataset_names {
        return Err(CliError::config(format!(
            "datasets {:?} differ from those of the fit report {:?}",
            run.fit.dataset_names, stored.fit.dataset_names
        )));
    }
    let worst = run
        .fit
        .beta_hat
        .iter()
        .zip(&stored.fit.beta_hat)
        .map(|(a, b)| (a - b).abs() / (1.0 + b.abs()))
        .fold(0.0, f64::max);
    if worst > WEIGHT_TOLERANCE {
        return Err(CliError::config(format!(
            "weights refitted from the data differ from the fit report (max relative gap {worst:.3e})"
        )));
    }

    let bundle = diagnostics::diagnose(&run.fit, &run.moments)?;
    if !bundle.residuals.qq_defined {
        log::warn!("residual variance is zero; QQ points are omitted");
    }
    for s in &bundle.two_sample_stats {
        if !s.skipped.is_empty() {
            log::warn!("{}: skipped functions with zero pooled sd: {}", s.dataset, s.skipped.join(", "));
        }
    }
    let digits = cfg.precision();
    let provenance = Provenance::new(&cfg);
    let mut buf = provenance.comment_line().into_bytes();
    {
        let mut w = csv::Writer::from_writer(&mut buf);
        let io = |e: csv::Error| CliError::config(e.to_string());
        w.write_record(["plot_id", "x", "y", "label"]).map_err(io)?;
        for r in diagnostics::tidy_rows(&bundle) {
            w.write_record([r.plot_id, csv_number(r.x, digits), csv_number(r.y, digits), r.label])
                .map_err(io)?;
        }
        // One summary row per block: slope and R² of each scatter, variance
        // inflation and normality p-value of each two-sample statistic.
        for b in &bundle.scatter_blocks {
            w.write_record([
                format!("scatter_fit:{}|{}", b.x_dataset, b.y_dataset),
                csv_number(b.slope, digits),
                csv_number(b.r_squared, digits),
                "slope|r_squared".into(),
            ])
            .map_err(io)?;
        }
        for e in &bundle.two_sample_stats {
            w.write_record([
                format!("two_sample_fit:{}", e.dataset),
                csv_number(e.inflation, digits),
                csv_number(e.normality_p_value, digits),
                "inflation|normality_p_value".into(),
            ])
            .map_err(io)?;
        }
        w.flush().map_err(|e| CliError::io(&args.out, e))?;
    }
    atomic_write(&cfg.resolve_output(&args.out), &buf)
}
