//! Two-source weighting comparison: a home source close to the target and
//! a strongly shifted source whose sample size grows. Three weightings of
//! the pooled rows are compared by exact target risk: equal per-row
//! weights, classifier density-ratio weights, and per-dataset weights
//! from moment matching on category indicators.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{replicate, CheckReport, Quantity};
use crate::data::{Column, DatasetCollection, Table};
use crate::dlm::{self, FitMode, FitOptions};
use crate::erm::{self, Features, ImportanceOptions, SquaredError};
use crate::error::{Error, Result};
use crate::moments::evaluate_moments;
use crate::perturb_sim::{
    realize_world_with, sample_units, shift_target, PerturbationScheme, PerturbedWorld, Population, WeightLaw,
    WeightScheme,
};
use crate::rng;
use crate::stats;
use crate::test_functions::TestFunctionSet;
use nalgebra::DMatrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentParams {
    pub worlds: usize,
    pub m: usize,
    /// Number of equal-width categories of the covariate used as indicators.
    pub categories: usize,
    pub n_home: usize,
    pub n_target: usize,
    /// Sample sizes of the divergent source, increasing; zero is allowed.
    pub divergent_sizes: Vec<usize>,
    pub home_law: WeightLaw,
    pub divergent_law: WeightLaw,
    pub target_law: WeightLaw,
    pub noise_sd: f64,
    /// Largest mean weight on the divergent source allowed at the largest size.
    pub divergent_weight_bound: f64,
}

impl Default for ExperimentParams {
    fn default() -> Self {
        Self {
            worlds: 20,
            m: 200,
            categories: 100,
            n_home: 4000,
            n_target: 4000,
            divergent_sizes: vec![0, 1000, 2000, 4000, 8000],
            home_law: WeightLaw::lognormal(0.05),
            divergent_law: WeightLaw::lognormal(1.0),
            target_law: WeightLaw::lognormal(0.05),
            noise_sd: 0.5,
            divergent_weight_bound: 0.1,
        }
    }
}

/// Mean curves over worlds, one entry per divergent sample size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentOutcome {
    pub divergent_sizes: Vec<usize>,
    pub mixing_fraction: Vec<f64>,
    pub mse_equal: Vec<f64>,
    pub mse_importance: Vec<f64>,
    pub mse_dlm: Vec<f64>,
    pub divergent_weight: Vec<f64>,
    /// Standard error over worlds of the paired difference dlm − equal.
    pub dlm_minus_equal_se: Vec<f64>,
}

fn signal(u: f64) -> f64 {
    (3.0 * std::f64::consts::PI * u).sin() + u
}

const FEATURES: [&str; 2] = ["x", "x2"];

fn table(name: &str, units: &[f64], categories: usize, noise: Option<(&mut ChaCha8Rng, f64)>) -> Result<Table> {
    let x: Vec<f64> = units.to_vec();
    let x2: Vec<f64> = units.iter().map(|u| u * u).collect();
    let code: Vec<String> = units
        .iter()
        .map(|u| format!("c{:03}", ((u * categories as f64) as usize).min(categories - 1)))
        .collect();
    let mut t = Table::new(name)
        .with_column("x", Column::Numeric(x))?
        .with_column("x2", Column::Numeric(x2))?
        .with_column("code", Column::Categorical(code))?;
    if let Some((rng, sd)) = noise {
        let y: Vec<f64> = units
            .iter()
            .map(|&u| {
                let z: f64 = rng.sample(rand_distr::StandardNormal);
                signal(u) + sd * z
            })
            .collect();
        t.push("y", Column::Numeric(y))?;
    }
    Ok(t)
}

/// Exact target risk of the quadratic fit `θ`.
fn target_risk(world: &PerturbedWorld, theta: &[f64], noise_sd: f64) -> f64 {
    let excess = world.population_mean(
        Population::Target,
        |u| {
            let e = signal(u) - theta[0] - theta[1] * u - theta[2] * u * u;
            e * e
        },
        8,
    );
    noise_sd * noise_sd + excess
}

struct WorldResult {
    equal: Vec<f64>,
    importance: Vec<f64>,
    dlm: Vec<f64>,
    divergent_weight: Vec<f64>,
}

fn run_world(p: &ExperimentParams, seed: u64, w: usize) -> Result<WorldResult> {
    let scheme = WeightScheme::Independent {
        laws: vec![p.home_law.clone(), p.divergent_law.clone(), p.target_law.clone()],
    };
    let compiled = PerturbationScheme::new(p.m, scheme, seed).compile()?;
    let mut rng = rng::stream(seed, "shift_weighting", w as u64);
    let world = shift_target(&realize_world_with(&compiled, p.m, seed, &mut rng)?)?;
    let max_div = p.divergent_sizes.iter().copied().max().unwrap_or(0);
    let draw = |which, n, rng: &mut ChaCha8Rng| -> Vec<f64> {
        sample_units(&world, which, n, rng).into_iter().map(|u| u.value()).collect()
    };
    let home_u = draw(Population::Source(0), p.n_home, &mut rng);
    let div_u = draw(Population::Source(1), max_div, &mut rng);
    let target_u = draw(Population::Target, p.n_target, &mut rng);
    let home = table("home", &home_u, p.categories, Some((&mut rng, p.noise_sd)))?;
    let divergent_all = table("divergent", &div_u, p.categories, Some((&mut rng, p.noise_sd)))?;
    let target = table("target", &target_u, p.categories, None)?;
    let features = Features { columns: FEATURES.iter().map(|s| s.to_string()).collect(), intercept: true };
    let tests = ["auto_indicators:code".to_string()];

    let mut out = WorldResult { equal: vec![], importance: vec![], dlm: vec![], divergent_weight: vec![] };
    for &s in &p.divergent_sizes {
        let mut sources = vec![home.clone()];
        if s > 0 {
            sources.push(divergent_all.select_rows(&(0..s).collect::<Vec<_>>()));
        }
        let data = DatasetCollection::new(sources, target.clone(), Some("y".into()))?;
        let samples = erm::erm_samples(&data, &features)?;

        let ones: Vec<Vec<f64>> = samples.iter().map(|s| vec![1.0; s.n()]).collect();
        let equal = erm::fit_erm_sample_weights(&samples, &SquaredError, &ones)?;

        let set = TestFunctionSet::parse(&tests, &data)?;
        let moments = evaluate_moments(&data, &set)?;
        let beta = dlm::fit_weights(&moments, FitOptions::mode(FitMode::Simplex))?.beta_hat;
        let weighted = erm::fit_erm(&samples, &SquaredError, beta.as_slice())?;

        // classifier of target membership on the same covariates
        let source_rows: usize = samples.iter().map(|s| s.n()).sum();
        let n_all = source_rows + p.n_target;
        let mut x = DMatrix::zeros(n_all, FEATURES.len());
        let mut labels = Vec::with_capacity(n_all);
        let mut r = 0;
        for t in data.sources.iter().chain(std::iter::once(&data.target)) {
            let cols: Vec<&[f64]> = FEATURES.iter().map(|c| t.numeric(c)).collect::<Result<_>>()?;
            for i in 0..t.nrows() {
                for (j, c) in cols.iter().enumerate() {
                    x[(r, j)] = c[i];
                }
                labels.push(std::ptr::eq(t, &data.target));
                r += 1;
            }
        }
        let iw = erm::importance_weights(&x, &labels, &ImportanceOptions::default())?;
        let mut per_source = Vec::new();
        let mut offset = 0;
        for s in &samples {
            per_source.push(iw.weights[offset..offset + s.n()].to_vec());
            offset += s.n();
        }
        let importance = erm::fit_erm_sample_weights(&samples, &SquaredError, &per_source)?;

        out.equal.push(target_risk(&world, equal.theta_hat.as_slice(), p.noise_sd));
        out.importance.push(target_risk(&world, importance.theta_hat.as_slice(), p.noise_sd));
        out.dlm.push(target_risk(&world, weighted.theta_hat.as_slice(), p.noise_sd));
        out.divergent_weight.push(if s > 0 { beta[1] } else { 0.0 });
    }
    Ok(out)
}

pub fn run_experiment(p: &ExperimentParams, seed: u64) -> Result<ExperimentOutcome> {
    if p.worlds < 2 {
        return Err(Error::config("the weighting experiment needs at least two worlds"));
    }
    if p.divergent_sizes.is_empty() || p.divergent_sizes.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::config("divergent_sizes must be nonempty and strictly increasing"));
    }
    if p.categories < 3 || p.categories > p.m {
        return Err(Error::config("categories must be between 3 and m"));
    }
    let results = replicate(p.worlds, |w| run_world(p, seed, w))?;
    let per_size = |pick: fn(&WorldResult) -> &Vec<f64>, i: usize| -> Vec<f64> {
        results.iter().map(|r| pick(r)[i]).collect()
    };
    let sizes = p.divergent_sizes.len();
    let mean_curve = |pick: fn(&WorldResult) -> &Vec<f64>| -> Vec<f64> {
        (0..sizes).map(|i| stats::mean(&per_size(pick, i))).collect()
    };
    let diff_se = (0..sizes)
        .map(|i| {
            let d: Vec<f64> = results.iter().map(|r| r.dlm[i] - r.equal[i]).collect();
            (stats::sample_variance(&d) / d.len() as f64).sqrt()
        })
        .collect();
    Ok(ExperimentOutcome {
        divergent_sizes: p.divergent_sizes.clone(),
        mixing_fraction: p
            .divergent_sizes
            .iter()
            .map(|&s| s as f64 / (s + p.n_home) as f64)
            .collect(),
        mse_equal: mean_curve(|r| &r.equal),
        mse_importance: mean_curve(|r| &r.importance),
        mse_dlm: mean_curve(|r| &r.dlm),
        divergent_weight: mean_curve(|r| &r.divergent_weight),
        dlm_minus_equal_se: diff_se,
    })
}

/// Harness entry: the dlm weighting must not lose to equal weights once
/// divergent data is present, and its weight on the divergent source must
/// end below the configured bound.
pub fn shift_weighting(p: &ExperimentParams, seed: u64) -> Result<CheckReport> {
    let out = run_experiment(p, seed)?;
    let mut q = Vec::new();
    for (i, &s) in out.divergent_sizes.iter().enumerate() {
        if s == 0 {
            continue;
        }
        q.push(Quantity::at_most(
            format!("mse_dlm_minus_equal[n={s}]"),
            0.0,
            out.mse_dlm[i] - out.mse_equal[i],
            Some(out.dlm_minus_equal_se[i]),
            "mean over worlds of the paired target-risk difference",
        ));
        q.push(
            Quantity::at_most(
                format!("mse_dlm_minus_importance[n={s}]"),
                0.0,
                out.mse_dlm[i] - out.mse_importance[i],
                None,
                "mean over worlds of the target-risk difference",
            )
            .informational(),
        );
    }
    let last = out.divergent_sizes.len() - 1;
    q.push(Quantity::at_most(
        format!("divergent_weight[n={}]", out.divergent_sizes[last]),
        p.divergent_weight_bound,
        out.divergent_weight[last],
        None,
        "configured bound",
    ));
    Ok(CheckReport::new(
        "shift_weighting",
        p.worlds,
        q,
        serde_json::to_value(&out).map_err(|e| Error::Numerical(e.to_string()))?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sizes_must_increase() {
        let p = ExperimentParams { divergent_sizes: vec![100, 50], ..Default::default() };
        assert!(run_experiment(&p, 1).is_err());
    }

    #[test]
    fn small_experiment_runs_and_zero_size_is_home_only() {
        let p = ExperimentParams {
            worlds: 2,
            m: 50,
            categories: 25,
            n_home: 400,
            n_target: 400,
            divergent_sizes: vec![0, 400],
            ..Default::default()
        };
        let out = run_experiment(&p, 3).unwrap();
        // without divergent data the equal and dlm weightings coincide
        assert!((out.mse_equal[0] - out.mse_dlm[0]).abs() < 1e-10);
        assert_eq!(out.divergent_weight[0], 0.0);
        assert!(out.mse_dlm.iter().all(|v| *v >= p.noise_sd * p.noise_sd));
    }
}
