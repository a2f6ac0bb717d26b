use std::path::{Path, PathBuf};

use driftlab_core::data::{Column, DatasetCollection};
use driftlab_core::erm::{self, ErmFit, Features, OodRisk, ParameterCi, RiskScale};
use nalgebra::DMatrix;
use serde::Serialize;

use super::{load_config, matrix_rows, DlmRun, DlmSettings, FitSummary, Inputs};
use crate::config::ErmConfig;
use crate::error::{CliError, Result};
use crate::ingest;
use crate::output::{write_json, Provenance};
use crate::{Cli, ErmArgs};

#[derive(Debug, Clone, PartialEq)]
enum Method {
    Dlm,
    Uniform,
    Importance,
    File(PathBuf),
}

impl Method {
    fn parse(s: &str) -> Result<Self> {
        match s {
            "dlm" => Ok(Method::Dlm),
            "uniform" => Ok(Method::Uniform),
            "importance" => Ok(Method::Importance),
            other => match other.strip_prefix("file:") {
                Some(p) if !p.is_empty() => Ok(Method::File(PathBuf::from(p))),
                _ => Err(CliError::Usage(format!(
                    "unknown weighting `{other}` (expected dlm, uniform, importance or file:<path>)"
                ))),
            },
        }
    }

    fn name(&self) -> &'static str {
        match self {
            Method::Dlm => "dlm",
            Method::Uniform => "uniform",
            Method::Importance => "importance",
            Method::File(_) => "file",
        }
    }
}

#[derive(Serialize)]
struct ErmReport {
    provenance: Provenance,
    inputs: Inputs,
    loss: String,
    weighting: Weighting,
    parameter_names: Vec<String>,
    theta_hat: Vec<f64>,
    level: f64,
    intervals: Vec<ParameterCi>,
    /// Mean squared residual of the target moments under the weights used;
    /// stands in for the unknown distributional scale.
    shift_scale: f64,
    ood_risk: OodRisk,
    converged: bool,
    iterations: usize,
    gradient_norm: f64,
    hessian: Vec<Vec<f64>>,
    influence_variance: Vec<Vec<f64>>,
}

#[derive(Serialize)]
struct Weighting {
    method: &'static str,
    dataset_names: Vec<String>,
    /// Share of the objective carried by each source.
    beta: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    dlm: Option<FitSummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    importance: Option<ImportanceSummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    file: Option<String>,
}

#[derive(Serialize)]
struct ImportanceSummary {
    raw_max: f64,
    clip_threshold: Option<f64>,
    clipped: usize,
    classifier: Vec<f64>,
}

pub fn run(cli: &Cli, args: &ErmArgs) -> Result<()> {
    let mut cfg = load_config(cli, args.config.as_deref())?;
    let mut ec = cfg.erm.clone().unwrap_or_default();
    if let Some(l) = &args.loss {
        ec.loss = Some(l.clone());
    }
    if let Some(w) = &args.weights {
        ec.weights = Some(w.clone());
    }
    let loss_name = ec.loss.clone().unwrap_or_else(|| "squared".into());
    let method = Method::parse(ec.weights.as_deref().unwrap_or("dlm"))?;
    let loss = erm::loss_by_name(&loss_name)?;

    let sources = ingest::source_paths(&args.data, &args.target)?;
    let data = ingest::ingest(&sources, &args.target, &cfg.data())?;
    if data.outcome.is_none() {
        return Err(CliError::config(
            "no outcome column found: sources need one column the target lacks, or set data.outcome",
        ));
    }
    if ec.features.is_none() {
        ec.features = Some(numeric_covariates(&data));
    }
    if ec.test_functions.is_none() {
        ec.test_functions = Some(default_test_functions(&data));
    }
    cfg.erm = Some(ec.clone());

    let features = Features { columns: ec.features.clone().unwrap_or_default(), intercept: ec.intercept };
    if features.dim() == 0 {
        return Err(CliError::config("the model has no features and no intercept"));
    }
    let samples = erm::erm_samples(&data, &features)?;
    let specs = ec.test_functions.clone().unwrap_or_default();
    let dlm_run = DlmRun::new(
        &data,
        &DlmSettings { test_functions: &specs, mode: ec.mode, whiten: ec.whiten, ridge: ec.ridge, reference: None },
    )?;

    let mut weighting = Weighting {
        method: method.name(),
        dataset_names: data.source_names(),
        beta: Vec::new(),
        dlm: None,
        importance: None,
        file: None,
    };
    let fit: ErmFit = match &method {
        Method::Dlm => {
            weighting.dlm = Some(FitSummary::from(&dlm_run.fit));
            erm::fit_erm(&samples, loss.as_ref(), dlm_run.fit.beta_hat.as_slice())?
        }
        Method::Uniform => {
            let k = data.k();
            erm::fit_erm(&samples, loss.as_ref(), &vec![1.0 / k as f64; k])?
        }
        Method::File(path) => {
            weighting.file = Some(path.display().to_string());
            let beta = read_weight_file(path, &data.source_names())?;
            erm::fit_erm(&samples, loss.as_ref(), &beta)?
        }
        Method::Importance => {
            let (row_weights, summary) = importance_row_weights(&data, &features, &ec)?;
            weighting.importance = Some(summary);
            erm::fit_erm_sample_weights(&samples, loss.as_ref(), &row_weights)?
        }
    };
    if !fit.converged {
        log::warn!("Newton iterations did not converge (gradient norm {:.3e})", fit.gradient_norm);
    }
    let beta: Vec<f64> = fit.weights_used.iter().copied().collect();
    weighting.beta = beta.clone();

    let shift_scale = residual_scale(&dlm_run, &beta);
    let ood_risk = erm::ood_risk(&fit, RiskScale::Observational { shift_scale }, &beta)?;
    let intervals = erm::erm_ci_with_scale(&fit, shift_scale, ec.level)?;

    let report = ErmReport {
        provenance: Provenance::new(&cfg),
        inputs: Inputs::new(&sources, &args.target),
        loss: loss_name,
        weighting,
        parameter_names: fit.parameter_names.clone(),
        theta_hat: fit.theta_hat.iter().copied().collect(),
        level: ec.level,
        intervals,
        shift_scale,
        ood_risk,
        converged: fit.converged,
        iterations: fit.iterations,
        gradient_norm: fit.gradient_norm,
        hessian: matrix_rows(&fit.hessian_hat),
        influence_variance: matrix_rows(&fit.influence_variance),
    };
    write_json(&cfg.resolve_output(&args.out), &report)
}

fn covariates(data: &DatasetCollection) -> impl Iterator<Item = (&str, &Column)> {
    data.target
        .columns()
        .iter()
        .filter(move |(n, _)| Some(n.as_str()) != data.outcome.as_deref())
        .map(|(n, c)| (n.as_str(), c))
}

fn numeric_covariates(data: &DatasetCollection) -> Vec<String> {
    covariates(data)
        .filter(|(_, c)| matches!(c, Column::Numeric(_)))
        .map(|(n, _)| n.to_string())
        .collect()
}

fn default_test_functions(data: &DatasetCollection) -> Vec<String> {
    covariates(data)
        .map(|(n, c)| match c {
            Column::Numeric(_) => format!("column:{n}"),
            Column::Categorical(_) => format!("auto_indicators:{n}"),
        })
        .collect()
}

/// `(1/L) ‖Ê⁰ − Σ_k β_k Ê^k‖²` on the (possibly whitened) test functions.
fn residual_scale(run: &DlmRun, beta: &[f64]) -> f64 {
    let m = &run.moments;
    let l = m.l();
    let mut rss = 0.0;
    for j in 0..l {
        let fitted: f64 = beta.iter().enumerate().map(|(k, b)| b * m.phi_hat[(k + 1, j)]).sum();
        rss += (m.phi_hat[(0, j)] - fitted).powi(2);
    }
    rss / l as f64
}

/// Per-row weights of every source from a source-versus-target classifier.
fn importance_row_weights(
    data: &DatasetCollection,
    features: &Features,
    ec: &ErmConfig,
) -> Result<(Vec<Vec<f64>>, ImportanceSummary)> {
    let plain = Features { columns: features.columns.clone(), intercept: false };
    if plain.dim() == 0 {
        return Err(CliError::config("importance weighting needs at least one feature column"));
    }
    let mut blocks = Vec::new();
    for s in &data.sources {
        blocks.push(plain.design(s)?);
    }
    blocks.push(plain.design(&data.target)?);
    let n: usize = blocks.iter().map(|b| b.ncols()).sum();
    let n_target = data.target.nrows();
    let mut x = DMatrix::zeros(n, plain.dim());
    let mut row = 0;
    for b in &blocks {
        for i in 0..b.ncols() {
            for j in 0..plain.dim() {
                x[(row, j)] = b[(j, i)];
            }
            row += 1;
        }
    }
    let labels: Vec<bool> = (0..n).map(|i| i >= n - n_target).collect();
    let iw = erm::importance_weights(&x, &labels, &ec.importance)?;
    if iw.clipped > 0 {
        log::info!("clipped {} importance weights at {:?}", iw.clipped, iw.clip_threshold);
    }
    let mut out = Vec::new();
    let mut start = 0;
    for s in &data.sources {
        out.push(iw.weights[start..start + s.nrows()].to_vec());
        start += s.nrows();
    }
    let summary = ImportanceSummary {
        raw_max: iw.raw_max,
        clip_threshold: iw.clip_threshold,
        clipped: iw.clipped,
        classifier: iw.classifier.iter().copied().collect(),
    };
    Ok((out, summary))
}

/// CSV with columns `dataset,weight`, one row per source.
fn read_weight_file(path: &Path, names: &[String]) -> Result<Vec<f64>> {
    let table = ingest::read_table(path, &["dataset".to_string()])?;
    let ds = match table.column("dataset") {
        Some(Column::Categorical(v)) => v.clone(),
        _ => return Err(CliError::ingest(path, None, Some("dataset"), "column is missing")),
    };
    let w = table
        .numeric("weight")
        .map_err(|_| CliError::ingest(path, None, Some("weight"), "numeric column is missing"))?;
    let mut beta = Vec::with_capacity(names.len());
    for name in names {
        let i = ds
            .iter()
            .position(|d| d == name)
            .ok_or_else(|| CliError::ingest(path, None, Some("dataset"), format!("no weight for source `{name}`")))?;
        beta.push(w[i]);
    }
    if ds.len() != names.len() {
        return Err(CliError::ingest(path, None, Some("dataset"), format!("expected {} rows, one per source", names.len())));
    }
    Ok(beta)
}
