//! Brute-force Monte Carlo validation of the limit laws behind the
//! estimators. Targets come from [`oracle`], which never calls into the
//! estimator code paths it is checking.

pub mod checks;
pub mod experiment;
pub mod oracle;

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats::NeumaierSum;

pub use checks::{
    CiCoverageParams, CovOverrides, CovParams, ExcessRiskParams, NullLawsParams, UnitFunction, YxShiftParams,
};
pub use experiment::{ExperimentParams, ExperimentOutcome};

/// Minimum number of replicates accepted for any check.
pub const MIN_REPLICATES: usize = 100;
/// Environment variable capping harness parallelism.
pub const THREADS_ENV: &str = "DRIFTLAB_THREADS";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "check", rename_all = "snake_case", deny_unknown_fields)]
pub enum CheckConfig {
    CltCov(#[serde(default)] CovOverrides),
    KronCov(#[serde(default)] CovOverrides),
    NullLaws(#[serde(default)] NullLawsParams),
    CiCoverage(#[serde(default)] CiCoverageParams),
    ExcessRisk(#[serde(default)] ExcessRiskParams),
    YxShift(#[serde(default)] YxShiftParams),
    ShiftWeighting(#[serde(default)] ExperimentParams),
}

impl CheckConfig {
    pub fn name(&self) -> &'static str {
        match self {
            CheckConfig::CltCov(_) => "clt_cov",
            CheckConfig::KronCov(_) => "kron_cov",
            CheckConfig::NullLaws(_) => "null_laws",
            CheckConfig::CiCoverage(_) => "ci_coverage",
            CheckConfig::ExcessRisk(_) => "excess_risk",
            CheckConfig::YxShift(_) => "yx_shift",
            CheckConfig::ShiftWeighting(_) => "shift_weighting",
        }
    }

    fn replicates(&self) -> usize {
        match self {
            CheckConfig::CltCov(p) => p.resolve(CovParams::clt()).replicates,
            CheckConfig::KronCov(p) => p.resolve(CovParams::kron()).replicates,
            CheckConfig::NullLaws(p) => p.replicates,
            CheckConfig::CiCoverage(p) => p.replicates,
            CheckConfig::ExcessRisk(p) => p.replicates,
            CheckConfig::YxShift(p) => p.replicates,
            CheckConfig::ShiftWeighting(p) => p.worlds * 100,
        }
    }

    /// Every check with its default parameters.
    pub fn defaults() -> Vec<CheckConfig> {
        vec![
            CheckConfig::CltCov(CovOverrides::default()),
            CheckConfig::KronCov(CovOverrides::default()),
            CheckConfig::NullLaws(NullLawsParams::default()),
            CheckConfig::CiCoverage(CiCoverageParams::default()),
            CheckConfig::ExcessRisk(ExcessRiskParams::default()),
            CheckConfig::YxShift(YxShiftParams::default()),
            CheckConfig::ShiftWeighting(ExperimentParams::default()),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HarnessConfig {
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "CheckConfig::defaults")]
    pub checks: Vec<CheckConfig>,
}

fn default_seed() -> u64 {
    20_240_601
}

impl Default for HarnessConfig {
    fn default() -> Self {
        Self { seed: default_seed(), checks: CheckConfig::defaults() }
    }
}

impl HarnessConfig {
    pub fn validate(&self) -> Result<()> {
        if self.checks.is_empty() {
            return Err(Error::config("no checks requested"));
        }
        for c in &self.checks {
            // the weighting experiment counts worlds, not replicates
            if !matches!(c, CheckConfig::ShiftWeighting(_)) && c.replicates() < MIN_REPLICATES {
                return Err(Error::config(format!(
                    "check {} needs at least {MIN_REPLICATES} replicates, got {}",
                    c.name(),
                    c.replicates()
                )));
            }
        }
        Ok(())
    }
}

/// One compared number. `target` is absent for pure test statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Quantity {
    pub name: String,
    pub target: Option<f64>,
    pub empirical: f64,
    pub mc_se: Option<f64>,
    /// How the target was obtained.
    pub provenance: String,
    /// Pass condition for this quantity.
    pub rule: String,
    /// Whether this quantity counts toward the check's pass flag.
    pub gated: bool,
    pub passed: bool,
}

impl Quantity {
    /// `|empirical − target| ≤ k · se`.
    pub fn within_se(
        name: impl Into<String>,
        target: f64,
        empirical: f64,
        se: f64,
        k: f64,
        provenance: impl Into<String>,
    ) -> Self {
        let passed = (empirical - target).abs() <= k * se;
        Self {
            name: name.into(),
            target: Some(target),
            empirical,
            mc_se: Some(se),
            provenance: provenance.into(),
            rule: format!("|empirical - target| <= {k} * mc_se"),
            gated: true,
            passed,
        }
    }

    pub fn within_relative(
        name: impl Into<String>,
        target: f64,
        empirical: f64,
        se: f64,
        rel: f64,
        provenance: impl Into<String>,
    ) -> Self {
        let passed = ((empirical - target) / target).abs() <= rel;
        Self {
            name: name.into(),
            target: Some(target),
            empirical,
            mc_se: Some(se),
            provenance: provenance.into(),
            rule: format!("|empirical / target - 1| <= {rel}"),
            gated: true,
            passed,
        }
    }

    pub fn in_band(name: impl Into<String>, nominal: f64, empirical: f64, lo: f64, hi: f64, se: f64) -> Self {
        Self {
            name: name.into(),
            target: Some(nominal),
            empirical,
            mc_se: Some(se),
            provenance: "nominal level".into(),
            rule: format!("{lo} <= empirical <= {hi}"),
            gated: true,
            passed: (lo..=hi).contains(&empirical),
        }
    }

    /// `empirical ≤ bound`.
    pub fn at_most(name: impl Into<String>, bound: f64, empirical: f64, se: Option<f64>, provenance: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            target: Some(bound),
            empirical,
            mc_se: se,
            provenance: provenance.into(),
            rule: format!("empirical <= {bound}"),
            gated: true,
            passed: empirical <= bound,
        }
    }

    /// A p-value that must exceed `alpha`.
    pub fn p_value(name: impl Into<String>, p: f64, alpha: f64, reference: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            target: None,
            empirical: p,
            mc_se: None,
            provenance: reference.into(),
            rule: format!("p > {alpha}"),
            gated: true,
            passed: p > alpha,
        }
    }

    /// Reported but not part of the pass flag.
    pub fn informational(mut self) -> Self {
        self.gated = false;
        self
    }

    pub fn z(&self) -> Option<f64> {
        match (self.target, self.mc_se) {
            (Some(t), Some(se)) if se > 0.0 => Some((self.empirical - t) / se),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckReport {
    pub check: String,
    pub passed: bool,
    pub pass_rule: String,
    pub replicates: usize,
    pub quantities: Vec<Quantity>,
    #[serde(default)]
    pub details: serde_json::Value,
    /// Wall time; kept out of serialized output so reports stay byte-stable.
    #[serde(skip)]
    pub runtime_seconds: f64,
}

pub const PASS_RULE: &str = "passed iff every gated quantity satisfies its rule";

impl CheckReport {
    pub fn new(check: &str, replicates: usize, quantities: Vec<Quantity>, details: serde_json::Value) -> Self {
        let passed = quantities.iter().filter(|q| q.gated).all(|q| q.passed);
        Self {
            check: check.into(),
            passed,
            pass_rule: PASS_RULE.into(),
            replicates,
            quantities,
            details,
            runtime_seconds: 0.0,
        }
    }

    pub fn quantity(&self, name: &str) -> Option<&Quantity> {
        self.quantities.iter().find(|q| q.name == name)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HarnessReport {
    pub seed: u64,
    pub passed: bool,
    pub checks: Vec<CheckReport>,
}

/// Thread pool sized from `DRIFTLAB_THREADS` (all cores when unset).
pub fn thread_pool() -> Result<rayon::ThreadPool> {
    let threads = match std::env::var(THREADS_ENV) {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .map_err(|_| Error::config(format!("{THREADS_ENV} must be a positive integer, got `{v}`")))?,
        Err(_) => 0,
    };
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Numerical(format!("cannot start thread pool: {e}")))
}

/// Run `f(r)` for every replicate in parallel; results come back in
/// replicate order so reductions do not depend on scheduling.
pub fn replicate<T: Send>(n: usize, f: impl Fn(usize) -> Result<T> + Sync + Send) -> Result<Vec<T>> {
    (0..n).into_par_iter().map(f).collect()
}

pub fn run_check(check: &CheckConfig, seed: u64) -> Result<CheckReport> {
    let start = Instant::now();
    let mut report = match check {
        CheckConfig::CltCov(p) => checks::covariance_check("clt_cov", &p.resolve(CovParams::clt()), seed)?,
        CheckConfig::KronCov(p) => checks::covariance_check("kron_cov", &p.resolve(CovParams::kron()), seed)?,
        CheckConfig::NullLaws(p) => checks::null_laws(p, seed)?,
        CheckConfig::CiCoverage(p) => checks::ci_coverage(p, seed)?,
        CheckConfig::ExcessRisk(p) => checks::excess_risk(p, seed)?,
        CheckConfig::YxShift(p) => checks::yx_shift(p, seed)?,
        CheckConfig::ShiftWeighting(p) => experiment::shift_weighting(p, seed)?,
    };
    report.runtime_seconds = start.elapsed().as_secs_f64();
    Ok(report)
}

/// Run every configured check inside a pool sized from the environment.
pub fn run(config: &HarnessConfig) -> Result<HarnessReport> {
    config.validate()?;
    let pool = thread_pool()?;
    let checks = pool.install(|| {
        config
            .checks
            .iter()
            .map(|c| {
                let r = run_check(c, config.seed)?;
                log::info!("{}: {} in {:.1}s", r.check, if r.passed { "pass" } else { "FAIL" }, r.runtime_seconds);
                Ok(r)
            })
            .collect::<Result<Vec<_>>>()
    })?;
    Ok(HarnessReport {
        seed: config.seed,
        passed: checks.iter().all(|c| c.passed),
        checks,
    })
}

/// Sample variance of a series and the MC standard error of that estimate.
pub fn variance_with_se(xs: &[f64]) -> (f64, f64) {
    let c = covariance_with_se(&[xs]);
    (c.0[0][0], c.1[0][0])
}

/// Covariance matrix across replicates of several series (all the same
/// length), with MC standard errors of every entry from the spread of the
/// centered products.
pub fn covariance_with_se(series: &[&[f64]]) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let d = series.len();
    let r = series[0].len();
    let means: Vec<f64> = series
        .iter()
        .map(|s| {
            let mut acc = NeumaierSum::new();
            acc.extend(s.iter().copied());
            acc.value() / r as f64
        })
        .collect();
    let mut cov = vec![vec![0.0; d]; d];
    let mut se = vec![vec![0.0; d]; d];
    for a in 0..d {
        for b in 0..=a {
            let mut s1 = NeumaierSum::new();
            let mut s2 = NeumaierSum::new();
            for i in 0..r {
                let p = (series[a][i] - means[a]) * (series[b][i] - means[b]);
                s1.add(p);
                s2.add(p * p);
            }
            let mean = s1.value() / r as f64;
            let var = (s2.value() / r as f64 - mean * mean).max(0.0);
            // unbiased covariance; the SE uses the spread of the products
            let c = mean * r as f64 / (r as f64 - 1.0);
            let e = (var / r as f64).sqrt();
            cov[a][b] = c;
            cov[b][a] = c;
            se[a][b] = e;
            se[b][a] = e;
        }
    }
    (cov, se)
}

/// Normal-approximation binomial standard error of a proportion.
pub fn proportion_se(p: f64, n: usize) -> f64 {
    (p * (1.0 - p) / n as f64).sqrt()
}
