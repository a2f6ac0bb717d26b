//! Dataset weights by test-function moment matching, with exact t/F
//! inference, R², and confidence intervals for target means.
//!
//! With `S` the `L x K` matrix of source means and `e0` the target means,
//! the fit minimizes `‖e0 − Sβ‖²` subject to `Σβ = 1` (and optionally
//! `β ≥ 0`). For inference the constraint is removed by expressing all
//! means relative to a reference dataset: the design has columns
//! `Ê^k − Ê^ref` for `k ≠ ref` and the response is `e0 − Ê^ref`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::DatasetCollection;
use crate::error::{Error, Result};
use crate::linalg;
use crate::moments::{self, MomentMatrix};
use crate::qp;
use crate::stats;
use crate::test_functions::TestFunction;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FitMode {
    #[default]
    SumToOne,
    Simplex,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct FitOptions {
    pub mode: FitMode,
    /// Reference dataset for the reparametrized design; defaults to the last.
    pub reference: Option<usize>,
}

impl FitOptions {
    pub fn mode(mode: FitMode) -> Self {
        Self { mode, reference: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DlmFit {
    pub mode: FitMode,
    pub dataset_names: Vec<String>,
    pub target_name: String,
    pub function_names: Vec<String>,
    pub whitening: String,
    pub beta_hat: DVector<f64>,
    pub reference: usize,
    /// Standard errors of all K weights (the reference weight included).
    pub se: DVector<f64>,
    /// `K x K` estimated covariance of `β̂`.
    pub covariance: DMatrix<f64>,
    pub t_stats: DVector<f64>,
    pub p_values: DVector<f64>,
    pub sigma2_hat: f64,
    pub df: usize,
    pub rss: f64,
    pub rss_uniform: f64,
    pub f_stat: f64,
    pub f_df1: usize,
    pub f_pvalue: f64,
    pub r_squared: f64,
    pub adj_r_squared: f64,
    /// `e0 − Sβ̂`, one entry per test function.
    pub residuals: DVector<f64>,
    /// `Sβ̂`.
    pub fitted: DVector<f64>,
    /// `L x (K-1)` reparametrized design.
    pub design: DMatrix<f64>,
    pub response: DVector<f64>,
    /// `(Φ̃ᵀΦ̃)⁻¹`, empty when K = 1.
    pub unscaled_cov: DMatrix<f64>,
    pub non_unique: bool,
    pub low_power: bool,
}

impl DlmFit {
    pub fn k(&self) -> usize {
        self.beta_hat.len()
    }

    pub fn l(&self) -> usize {
        self.residuals.len()
    }

    /// `(1/L) Σ residual²`.
    pub fn shift_scale(&self) -> f64 {
        self.rss / self.l() as f64
    }

    /// Coordinates of the reparametrized weight vector (all but the reference).
    pub fn free_indices(&self) -> Vec<usize> {
        (0..self.k()).filter(|&i| i != self.reference).collect()
    }
}

/// Columns `Ê^k − Ê⁰`.
pub fn deviation_matrix(moments: &MomentMatrix) -> DMatrix<f64> {
    let s = moments.sources();
    let e0 = moments.target();
    let mut phi = s.clone();
    for mut c in phi.column_iter_mut() {
        c -= &e0;
    }
    phi
}

/// `(ΦᵀΦ)⁻¹1 / (1ᵀ(ΦᵀΦ)⁻¹1)` and `RSS = 1 / (1ᵀ(ΦᵀΦ)⁻¹1)`.
pub fn closed_form_weights(moments: &MomentMatrix) -> Result<(DVector<f64>, f64)> {
    let phi = deviation_matrix(moments);
    let k = phi.ncols();
    let v = phi.transpose() * &phi;
    let ones = DVector::from_element(k, 1.0);
    let x = linalg::solve_spd(&v, &ones).ok_or_else(|| collinear(moments, &phi))?;
    let denom = x.sum();
    Ok((x / denom, 1.0 / denom))
}

fn collinear(moments: &MomentMatrix, phi: &DMatrix<f64>) -> Error {
    let v = linalg::null_direction(phi);
    let scale = v.amax();
    let datasets = moments
        .source_names()
        .iter()
        .zip(v.iter())
        .filter(|(_, &x)| x.abs() > 1e-6 * scale)
        .map(|(n, _)| n.clone())
        .collect();
    Error::CollinearDatasets { datasets }
}

/// Reparametrized design and response for a reference dataset.
pub fn reparametrized_design(moments: &MomentMatrix, reference: usize) -> (DMatrix<f64>, DVector<f64>) {
    let s = moments.sources();
    let k = s.ncols();
    let base = s.column(reference).clone_owned();
    let cols: Vec<DVector<f64>> = (0..k)
        .filter(|&c| c != reference)
        .map(|c| s.column(c) - &base)
        .collect();
    let design = if cols.is_empty() {
        DMatrix::zeros(s.nrows(), 0)
    } else {
        DMatrix::from_columns(&cols)
    };
    (design, moments.target() - base)
}

/// Fit the weights and, in sum-to-one mode, the default inference.
pub fn fit_weights(moments: &MomentMatrix, options: FitOptions) -> Result<DlmFit> {
    let k = moments.k();
    let l = moments.l();
    if l < k {
        return Err(Error::DegreesOfFreedom { l, k });
    }
    let reference = options.reference.unwrap_or(k - 1);
    if reference >= k {
        return Err(Error::invalid(format!("reference dataset {reference} out of range")));
    }
    let (design, response) = reparametrized_design(moments, reference);
    let s = moments.sources();
    let e0 = moments.target();
    let mut non_unique = false;

    let (beta, unscaled) = if k == 1 {
        (DVector::from_element(1, 1.0), DMatrix::zeros(0, 0))
    } else {
        let gram = design.transpose() * &design;
        let unscaled = linalg::inverse_spd(&gram);
        match options.mode {
            FitMode::SumToOne => {
                let free = linalg::least_squares(&design, &response)
                    .ok_or_else(|| collinear(moments, &design_with_reference(&design, k, reference)))?;
                let unscaled = unscaled.ok_or_else(|| collinear(moments, &design))?;
                (expand(&free, reference), unscaled)
            }
            FitMode::Simplex => {
                let phi = deviation_matrix(moments);
                let g = phi.transpose() * &phi;
                let sol = qp::solve_simplex_qp(&(g * 2.0), &DVector::zeros(k))?;
                non_unique = sol.non_unique;
                (sol.beta, unscaled.unwrap_or_else(|| DMatrix::zeros(k - 1, k - 1)))
            }
        }
    };
    let fitted = &s * &beta;
    let residuals = &e0 - &fitted;
    let rss = residuals.norm_squared();
    let df = l - k + 1;
    let sigma2_hat = rss / df as f64;
    let uniform = DVector::from_element(k, 1.0 / k as f64);
    let rss_uniform = (&e0 - &s * uniform).norm_squared();
    let (r_squared, adj_r_squared) = r_squared_from(rss, rss_uniform, l, k);

    let mut fit = DlmFit {
        mode: options.mode,
        dataset_names: moments.source_names().to_vec(),
        target_name: moments.dataset_names[0].clone(),
        function_names: moments.function_names.clone(),
        whitening: moments.whitening.provenance().to_string(),
        beta_hat: beta,
        reference,
        se: DVector::from_element(k, f64::NAN),
        covariance: DMatrix::from_element(k, k, f64::NAN),
        t_stats: DVector::from_element(k, f64::NAN),
        p_values: DVector::from_element(k, f64::NAN),
        sigma2_hat,
        df,
        rss,
        rss_uniform,
        f_stat: f64::NAN,
        f_df1: k - 1,
        f_pvalue: f64::NAN,
        r_squared,
        adj_r_squared,
        residuals,
        fitted,
        design,
        response,
        unscaled_cov: unscaled,
        non_unique,
        low_power: df == 1,
    };
    if fit.low_power {
        log::warn!("L = K leaves a single residual degree of freedom; tests have little power");
    }
    if options.mode == FitMode::SumToOne {
        fill_inference(&mut fit);
    }
    Ok(fit)
}

fn design_with_reference(design: &DMatrix<f64>, k: usize, reference: usize) -> DMatrix<f64> {
    // Express the reparametrized design back in K columns so collinearity
    // is reported with dataset names; the reference column is zero.
    let mut out = DMatrix::zeros(design.nrows(), k);
    let mut c = 0;
    for j in 0..k {
        if j != reference {
            out.set_column(j, &design.column(c));
            c += 1;
        }
    }
    out
}

fn expand(free: &DVector<f64>, reference: usize) -> DVector<f64> {
    let k = free.len() + 1;
    let mut beta = DVector::zeros(k);
    let mut c = 0;
    for j in 0..k {
        if j != reference {
            beta[j] = free[c];
            c += 1;
        }
    }
    beta[reference] = 1.0 - free.sum();
    beta
}

fn fill_inference(fit: &mut DlmFit) {
    let k = fit.k();
    if k == 1 {
        fit.covariance = DMatrix::zeros(1, 1);
        fit.se = DVector::zeros(1);
        return;
    }
    let r = &fit.unscaled_cov;
    let free = fit.free_indices();
    let r1 = r * DVector::from_element(k - 1, 1.0);
    let total = r1.sum();
    let mut cov = DMatrix::zeros(k, k);
    for (a, &i) in free.iter().enumerate() {
        for (b, &j) in free.iter().enumerate() {
            cov[(i, j)] = r[(a, b)];
        }
        cov[(i, fit.reference)] = -r1[a];
        cov[(fit.reference, i)] = -r1[a];
    }
    cov[(fit.reference, fit.reference)] = total;
    fit.covariance = cov * fit.sigma2_hat;
    fit.se = fit.covariance.diagonal().map(|v| v.max(0.0).sqrt());
    let df = fit.df as f64;
    fit.t_stats = fit.beta_hat.component_div(&fit.se);
    fit.p_values = fit.t_stats.map(|t| stats::t_two_sided_p(t, df));
    let q = DMatrix::identity(k - 1, k - 1);
    let h = DVector::from_element(k - 1, 1.0 / k as f64);
    let test = contrast_statistic(fit, &q, &h);
    fit.f_stat = test.statistic;
    fit.f_pvalue = test.p_value;
}

/// `R² = 1 − RSS/RSS_uniform` and `1 − (1 − R²)·L/(L − K + 1)`.
pub fn r_squared_from(rss: f64, rss_uniform: f64, l: usize, k: usize) -> (f64, f64) {
    if rss_uniform == 0.0 {
        log::warn!("uniform weights fit the target exactly; R-squared is undefined");
        return (f64::NAN, f64::NAN);
    }
    let r2 = 1.0 - rss / rss_uniform;
    (r2, adjusted_r_squared(r2, l, k))
}

pub fn adjusted_r_squared(r2: f64, l: usize, k: usize) -> f64 {
    1.0 - (1.0 - r2) * l as f64 / (l - k + 1) as f64
}

pub fn r_squared(fit: &DlmFit) -> (f64, f64) {
    (fit.r_squared, fit.adj_r_squared)
}

/// Linear hypothesis `Q β_free = h` on the reparametrized weights.
#[derive(Debug, Clone, PartialEq)]
pub struct ContrastSpec {
    /// `p x (K-1)`.
    pub q: DMatrix<f64>,
    pub value: DVector<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContrastTest {
    pub estimate: DVector<f64>,
    pub statistic: f64,
    pub df1: usize,
    pub df2: usize,
    pub p_value: f64,
}

fn contrast_statistic(fit: &DlmFit, q: &DMatrix<f64>, h: &DVector<f64>) -> ContrastTest {
    let free: Vec<f64> = fit.free_indices().iter().map(|&i| fit.beta_hat[i]).collect();
    let b = DVector::from_vec(free);
    let est = q * &b;
    let d = &est - h;
    let p = q.nrows();
    let m = q * &fit.unscaled_cov * q.transpose() * fit.sigma2_hat;
    let statistic = if d.amax() == 0.0 {
        0.0
    } else {
        match linalg::solve_spd(&m, &d) {
            Some(x) => d.dot(&x) / p as f64,
            None => f64::INFINITY,
        }
    };
    ContrastTest {
        estimate: est,
        statistic,
        df1: p,
        df2: fit.df,
        p_value: if statistic.is_infinite() {
            0.0
        } else {
            stats::f_sf(statistic, p as f64, fit.df as f64)
        },
    }
}

/// F test of a contrast; without one, the equal-weights hypothesis.
pub fn infer(fit: &DlmFit, contrast: Option<&ContrastSpec>) -> Result<ContrastTest> {
    if fit.mode != FitMode::SumToOne {
        return Err(Error::InferenceMode);
    }
    if fit.df < 1 {
        return Err(Error::DegreesOfFreedom { l: fit.l(), k: fit.k() });
    }
    let k = fit.k();
    if k < 2 {
        return Err(Error::invalid("inference needs at least two datasets"));
    }
    let (q, h) = match contrast {
        Some(c) => {
            if c.q.ncols() != k - 1 || c.value.len() != c.q.nrows() {
                return Err(Error::invalid(format!(
                    "contrast must be p x {} with a length-p value",
                    k - 1
                )));
            }
            let rank = linalg::numerical_rank(&c.q);
            if rank < c.q.nrows() {
                return Err(Error::RankDeficientContrast {
                    rank,
                    rows: c.q.nrows(),
                });
            }
            (c.q.clone(), c.value.clone())
        }
        None => (
            DMatrix::identity(k - 1, k - 1),
            DVector::from_element(k - 1, 1.0 / k as f64),
        ),
    };
    Ok(contrast_statistic(fit, &q, &h))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetCi {
    pub estimate: f64,
    pub half_width: f64,
    pub level: f64,
    pub phi0_name: String,
    pub variance_hat: f64,
    pub shift_scale: f64,
}

impl TargetCi {
    pub fn lower(&self) -> f64 {
        self.estimate - self.half_width
    }

    pub fn upper(&self) -> f64 {
        self.estimate + self.half_width
    }

    pub fn contains(&self, x: f64) -> bool {
        (x - self.estimate).abs() <= self.half_width
    }
}

/// Interval for `E⁰[φ₀]` from per-source means and the pooled variance of `φ₀`.
pub fn target_ci_from_moments(
    fit: &DlmFit,
    phi0_source_means: &[f64],
    phi0_pooled_var: f64,
    level: f64,
    name: &str,
) -> Result<TargetCi> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::Level(level));
    }
    if phi0_source_means.len() != fit.k() {
        return Err(Error::invalid("one mean of the target function per source is required"));
    }
    let estimate = stats::sum(
        fit.beta_hat
            .iter()
            .zip(phi0_source_means)
            .map(|(b, m)| b * m),
    );
    let shift_scale = fit.shift_scale();
    let z = stats::z_for_level(level);
    Ok(TargetCi {
        estimate,
        half_width: z * phi0_pooled_var.max(0.0).sqrt() * shift_scale.sqrt(),
        level,
        phi0_name: name.into(),
        variance_hat: phi0_pooled_var,
        shift_scale,
    })
}

pub fn target_ci(
    fit: &DlmFit,
    data: &DatasetCollection,
    phi0: &TestFunction,
    level: f64,
) -> Result<TargetCi> {
    let means: Vec<f64> = data
        .sources
        .iter()
        .map(|s| phi0.evaluate(s).map(|v| stats::mean(&v)))
        .collect::<Result<_>>()?;
    let var = moments::pooled_variance(data, phi0)?;
    target_ci_from_moments(fit, &means, var, level, &phi0.name)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::Rng;

    fn moments_from(e0: &[f64], sources: &[&[f64]]) -> MomentMatrix {
        let l = e0.len();
        let k = sources.len();
        let phi = DMatrix::from_fn(k + 1, l, |r, c| if r == 0 { e0[c] } else { sources[r - 1][c] });
        MomentMatrix::from_parts(phi, DMatrix::identity(l, l), vec![100; k], 100).unwrap()
    }

    fn random_moments(rng: &mut rand_chacha::ChaCha8Rng, k: usize, l: usize) -> MomentMatrix {
        let phi = DMatrix::from_fn(k + 1, l, |_, _| rng.random::<f64>() - 0.5);
        MomentMatrix::from_parts(phi, DMatrix::identity(l, l), vec![100; k], 100).unwrap()
    }

    #[test]
    fn single_dataset_gets_all_weight() {
        let m = moments_from(&[1.0, 2.0], &[&[0.0, 5.0]]);
        let f = fit_weights(&m, FitOptions::default()).unwrap();
        assert_eq!(f.beta_hat[0], 1.0);
        assert_eq!(f.df, 2);
    }

    #[test]
    fn exact_interpolation() {
        let m = moments_from(&[1.0, 2.0, 3.0], &[&[0.0, 5.0, 1.0], &[1.0, 2.0, 3.0]]);
        let f = fit_weights(&m, FitOptions::default()).unwrap();
        assert_relative_eq!(f.beta_hat[0], 0.0, epsilon = 1e-14);
        assert_relative_eq!(f.beta_hat[1], 1.0, epsilon = 1e-14);
        assert!(f.residuals.amax() < 1e-14);
        assert!(f.sigma2_hat < 1e-28);
    }

    #[test]
    fn fewer_functions_than_datasets() {
        let m = moments_from(&[1.0], &[&[0.0], &[2.0]]);
        assert!(matches!(
            fit_weights(&m, FitOptions::default()),
            Err(Error::DegreesOfFreedom { l: 1, k: 2 })
        ));
    }

    #[test]
    fn collinear_datasets_are_named() {
        let m = moments_from(&[1.0, 2.0, 3.0], &[&[0.0, 1.0, 2.0], &[0.0, 1.0, 2.0], &[5.0, 1.0, 0.0]]);
        match fit_weights(&m, FitOptions::default()) {
            Err(Error::CollinearDatasets { datasets }) => {
                assert!(datasets.contains(&"source1".to_string()));
                assert!(datasets.contains(&"source2".to_string()));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn closed_form_matches_reparametrized_on_5x3() {
        let mut rng = crate::rng::stream(1, "dlm", 0);
        let m = random_moments(&mut rng, 3, 5);
        let f = fit_weights(&m, FitOptions::default()).unwrap();
        let (b, rss) = closed_form_weights(&m).unwrap();
        assert!((&f.beta_hat - &b).amax() < 1e-10);
        assert_relative_eq!(f.rss, rss, max_relative = 1e-10);
        // Grid search over the constraint plane as an independent check.
        let obj = |b0: f64, b1: f64| {
            let beta = DVector::from_vec(vec![b0, b1, 1.0 - b0 - b1]);
            (m.target() - m.sources() * beta).norm_squared()
        };
        let best = obj(b[0], b[1]);
        for i in -20..=20 {
            for j in -20..=20 {
                let (d0, d1) = (i as f64 * 1e-3, j as f64 * 1e-3);
                assert!(obj(b[0] + d0, b[1] + d1) >= best - 1e-15);
            }
        }
    }

    #[test]
    fn reference_invariance() {
        let mut rng = crate::rng::stream(2, "dlm", 0);
        let m = random_moments(&mut rng, 4, 30);
        let a = fit_weights(&m, FitOptions::default()).unwrap();
        let b = fit_weights(&m, FitOptions { mode: FitMode::SumToOne, reference: Some(0) }).unwrap();
        assert!((&a.beta_hat - &b.beta_hat).amax() < 1e-8);
        assert_relative_eq!(a.f_stat, b.f_stat, max_relative = 1e-8);
        assert!((&a.se - &b.se).amax() < 1e-8);
    }

    #[test]
    fn uniform_estimate_gives_zero_f() {
        // Target is the average of the sources plus noise orthogonal to them.
        let s1 = [1.0, 0.0, 0.0, 0.0];
        let s2 = [0.0, 1.0, 0.0, 0.0];
        let e0 = [0.5, 0.5, 0.3, -0.2];
        let m = moments_from(&e0, &[&s1, &s2]);
        let f = fit_weights(&m, FitOptions::default()).unwrap();
        assert_relative_eq!(f.beta_hat[0], 0.5, epsilon = 1e-14);
        assert!(f.f_stat < 1e-20);
        assert_relative_eq!(f.f_pvalue, 1.0, epsilon = 1e-12);
        assert_relative_eq!(f.r_squared, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn residual_sum_of_squares_identity() {
        let mut rng = crate::rng::stream(3, "dlm", 0);
        let m = random_moments(&mut rng, 3, 12);
        let f = fit_weights(&m, FitOptions::default()).unwrap();
        assert_relative_eq!(f.residuals.norm_squared(), f.df as f64 * f.sigma2_hat, max_relative = 1e-12);
        assert_relative_eq!(f.beta_hat.sum(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn simplex_mode_is_nonnegative() {
        let m = moments_from(&[3.0, 3.0, 3.0], &[&[1.0, 1.0, 1.0], &[2.0, 2.0, 2.5], &[0.0, 0.0, 0.1]]);
        let f = fit_weights(&m, FitOptions::mode(FitMode::Simplex)).unwrap();
        assert!(f.beta_hat.iter().all(|&b| b >= 0.0));
        assert_relative_eq!(f.beta_hat.sum(), 1.0, epsilon = 1e-12);
        assert!(matches!(infer(&f, None), Err(Error::InferenceMode)));
    }

    #[test]
    fn contrasts() {
        let mut rng = crate::rng::stream(5, "dlm", 0);
        let m = random_moments(&mut rng, 3, 20);
        let f = fit_weights(&m, FitOptions::default()).unwrap();
        let default = infer(&f, None).unwrap();
        assert_relative_eq!(default.statistic, f.f_stat, max_relative = 1e-12);
        // A single-row contrast on one coordinate reproduces that t statistic squared.
        let c = ContrastSpec {
            q: DMatrix::from_row_slice(1, 2, &[1.0, 0.0]),
            value: DVector::from_vec(vec![0.0]),
        };
        let t = infer(&f, Some(&c)).unwrap();
        assert_relative_eq!(t.statistic, f.t_stats[0].powi(2), max_relative = 1e-10);
        let bad = ContrastSpec {
            q: DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 2.0, 2.0]),
            value: DVector::zeros(2),
        };
        assert!(matches!(infer(&f, Some(&bad)), Err(Error::RankDeficientContrast { rank: 1, rows: 2 })));
    }

    #[test]
    fn adjusted_r_squared_convention() {
        let adj = adjusted_r_squared(0.5088, 1000, 4);
        assert_eq!(format!("{adj:.4}"), "0.5073");
    }

    #[test]
    fn perfect_fit_has_unit_r_squared() {
        let m = moments_from(&[1.0, 2.0, 3.0], &[&[0.0, 5.0, 1.0], &[1.0, 2.0, 3.0]]);
        let f = fit_weights(&m, FitOptions::default()).unwrap();
        assert_relative_eq!(f.r_squared, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn target_interval_edge_cases() {
        let m = moments_from(&[1.0, 2.0, 3.0], &[&[0.0, 5.0, 1.0], &[1.0, 2.0, 3.0]]);
        let f = fit_weights(&m, FitOptions::default()).unwrap();
        let ci = target_ci_from_moments(&f, &[0.3, 0.7], 2.0, 0.95, "phi0").unwrap();
        assert!(ci.half_width < 1e-6);
        let mut rng = crate::rng::stream(6, "dlm", 0);
        let m2 = random_moments(&mut rng, 2, 10);
        let f2 = fit_weights(&m2, FitOptions::default()).unwrap();
        let c = target_ci_from_moments(&f2, &[4.0, 4.0], 0.0, 0.95, "const").unwrap();
        assert_eq!(c.half_width, 0.0);
        assert_relative_eq!(c.estimate, 4.0, epsilon = 1e-12);
        assert!(matches!(
            target_ci_from_moments(&f2, &[4.0, 4.0], 1.0, 1.0, "x"),
            Err(Error::Level(_))
        ));
    }
}
