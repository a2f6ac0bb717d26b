mod diagnose;
mod erm;
mod fit;
mod simulate;
mod validate;

use std::path::Path;

use driftlab_core::data::{Column, DatasetCollection, Table};
use driftlab_core::dlm::{self, DlmFit, FitMode, FitOptions};
use driftlab_core::moments::{self, MomentMatrix};
use driftlab_core::test_functions::TestFunctionSet;
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{CliError, Result};
use crate::output::{atomic_write, csv_number, Provenance};
use crate::{Cli, Command};

pub use fit::FitReport;

pub fn dispatch(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Simulate(a) => simulate::run(cli, a),
        Command::Fit(a) => fit::run(cli, a),
        Command::Erm(a) => erm::run(cli, a),
        Command::Diagnose(a) => diagnose::run(cli, a),
        Command::Validate(a) => validate::run(cli, a),
    }
}

/// Load the config, fold in `--seed` and apply its verbosity unless a
/// flag already set one.
fn load_config(cli: &Cli, path: Option<&Path>) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(path)?;
    if let Some(seed) = cli.seed {
        cfg.seed = Some(seed);
    }
    if !cli.quiet && cli.verbose == 0 {
        if let Some(v) = cfg.verbosity {
            log::set_max_level(v.level());
        }
    }
    Ok(cfg)
}

/// Test functions, their moments and the weight fit of one dataset collection.
struct DlmRun {
    moments: MomentMatrix,
    fit: DlmFit,
}

struct DlmSettings<'a> {
    test_functions: &'a [String],
    mode: FitMode,
    whiten: bool,
    ridge: Option<f64>,
    reference: Option<&'a str>,
}

impl DlmRun {
    fn new(data: &DatasetCollection, s: &DlmSettings<'_>) -> Result<Self> {
        let tests = TestFunctionSet::parse(s.test_functions, data)?;
        let raw = moments::evaluate_moments(data, &tests)?;
        let (tests, moments) = if s.whiten {
            let white = moments::fit_whitening(&tests, &raw, s.ridge)?;
            let m = raw.transformed(&white.whitening);
            (white, m)
        } else {
            (tests, raw)
        };
        let corr = moments.max_offdiag_correlation();
        log::info!(
            "{} test functions on {} sources; largest pooled off-diagonal correlation {corr:.3}",
            tests.len(),
            data.k()
        );
        let reference = match s.reference {
            None => None,
            Some(name) => Some(
                data.source_names()
                    .iter()
                    .position(|n| n == name)
                    .ok_or_else(|| CliError::config(format!("reference dataset `{name}` is not among the sources")))?,
            ),
        };
        let fit = dlm::fit_weights(&moments, FitOptions { mode: s.mode, reference })?;
        if fit.low_power {
            log::warn!("only {} degree(s) of freedom; tests have little power", fit.df);
        }
        if fit.non_unique {
            log::warn!("the constrained optimum is not unique; reporting the minimum-norm weights");
        }
        Ok(Self { moments, fit })
    }
}

fn matrix_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

/// Every field of a weight fit, with vectors and row-major matrices.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FitSummary {
    pub mode: FitMode,
    pub dataset_names: Vec<String>,
    pub target_name: String,
    pub function_names: Vec<String>,
    pub whitening: String,
    pub beta_hat: Vec<f64>,
    pub reference: usize,
    pub se: Vec<f64>,
    pub covariance: Vec<Vec<f64>>,
    pub t_stats: Vec<f64>,
    pub p_values: Vec<f64>,
    pub sigma2_hat: f64,
    pub df: usize,
    pub rss: f64,
    pub rss_uniform: f64,
    pub shift_scale: f64,
    pub f_stat: f64,
    pub f_df1: usize,
    pub f_pvalue: f64,
    pub r_squared: f64,
    pub adj_r_squared: f64,
    pub residuals: Vec<f64>,
    pub fitted: Vec<f64>,
    pub design: Vec<Vec<f64>>,
    pub response: Vec<f64>,
    pub unscaled_cov: Vec<Vec<f64>>,
    pub non_unique: bool,
    pub low_power: bool,
}

impl From<&DlmFit> for FitSummary {
    fn from(f: &DlmFit) -> Self {
        Self {
            mode: f.mode,
            dataset_names: f.dataset_names.clone(),
            target_name: f.target_name.clone(),
            function_names: f.function_names.clone(),
            whitening: f.whitening.clone(),
            beta_hat: f.beta_hat.iter().copied().collect(),
            reference: f.reference,
            se: f.se.iter().copied().collect(),
            covariance: matrix_rows(&f.covariance),
            t_stats: f.t_stats.iter().copied().collect(),
            p_values: f.p_values.iter().copied().collect(),
            sigma2_hat: f.sigma2_hat,
            df: f.df,
            rss: f.rss,
            rss_uniform: f.rss_uniform,
            shift_scale: f.shift_scale(),
            f_stat: f.f_stat,
            f_df1: f.f_df1,
            f_pvalue: f.f_pvalue,
            r_squared: f.r_squared,
            adj_r_squared: f.adj_r_squared,
            residuals: f.residuals.iter().copied().collect(),
            fitted: f.fitted.iter().copied().collect(),
            design: matrix_rows(&f.design),
            response: f.response.iter().copied().collect(),
            unscaled_cov: matrix_rows(&f.unscaled_cov),
            non_unique: f.non_unique,
            low_power: f.low_power,
        }
    }
}

/// Input files as given on the command line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Inputs {
    pub sources: Vec<String>,
    pub target: String,
}

impl Inputs {
    fn new(sources: &[std::path::PathBuf], target: &Path) -> Self {
        Self {
            sources: sources.iter().map(|p| p.display().to_string()).collect(),
            target: target.display().to_string(),
        }
    }
}

/// CSV with a provenance comment line, then header and rows.
fn write_table_csv(path: &Path, table: &Table, provenance: &Provenance, digits: usize) -> Result<()> {
    let mut buf = provenance.comment_line().into_bytes();
    {
        let mut w = csv::Writer::from_writer(&mut buf);
        let names: Vec<&str> = table.column_names().collect();
        w.write_record(&names).map_err(|e| CliError::config(e.to_string()))?;
        let cols = table.columns();
        let mut row = Vec::with_capacity(cols.len());
        for i in 0..table.nrows() {
            row.clear();
            for (_, c) in cols {
                row.push(match c {
                    Column::Numeric(v) => csv_number(v[i], digits),
                    Column::Categorical(v) => v[i].clone(),
                });
            }
            w.write_record(&row).map_err(|e| CliError::config(e.to_string()))?;
        }
        w.flush().map_err(|e| CliError::io(path, e))?;
    }
    atomic_write(path, &buf)
}
