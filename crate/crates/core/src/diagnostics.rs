//! Data behind residual, QQ and moment-scatter diagnostics, and the
//! per-function two-sample standardized mean difference.
//!
//! Everything here is returned as points; rendering is left to the caller.

use serde::{Deserialize, Serialize};

use crate::dlm::DlmFit;
use crate::error::{Error, Result};
use crate::moments::MomentMatrix;
use crate::stats;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualDiagnostics {
    pub labels: Vec<String>,
    /// `(Σ_k β̂_k Ê^k[φ], residual)` per test function.
    pub residual_points: Vec<(f64, f64)>,
    /// Not zero in general: the fit is constrained.
    pub residual_mean: f64,
    /// Residuals divided by `sqrt(σ̂²)`; empty when `σ̂² = 0`.
    pub standardized: Vec<f64>,
    /// `(normal quantile at (i − 0.5)/L, i-th smallest standardized residual)`.
    pub qq_points: Vec<(f64, f64)>,
    pub qq_defined: bool,
}

/// Normal QQ pairs with plotting positions `(i − 0.5)/n`.
pub fn qq_pairs(values: &[f64]) -> Vec<(f64, f64)> {
    let n = values.len() as f64;
    stats::sorted_copy(values)
        .into_iter()
        .enumerate()
        .map(|(i, v)| (stats::normal_quantile((i as f64 + 0.5) / n), v))
        .collect()
}

/// Largest `|sample − theoretical|` among QQ points whose plotting position
/// lies in the central `central` fraction (0.5 = interquartile range).
pub fn qq_max_deviation(points: &[(f64, f64)], central: f64) -> f64 {
    let n = points.len() as f64;
    let lo = (1.0 - central) / 2.0;
    points
        .iter()
        .enumerate()
        .filter(|(i, _)| {
            let p = (*i as f64 + 0.5) / n;
            p >= lo && p <= 1.0 - lo
        })
        .map(|(_, (a, b))| (a - b).abs())
        .fold(0.0, f64::max)
}

pub fn residual_qq(fit: &DlmFit) -> ResidualDiagnostics {
    let r = fit.residuals.as_slice();
    let residual_points: Vec<(f64, f64)> = fit.fitted.iter().copied().zip(r.iter().copied()).collect();
    let sigma = fit.sigma2_hat.sqrt();
    let qq_defined = sigma > 0.0;
    if !qq_defined {
        log::warn!("residual variance is zero; QQ data omitted");
    }
    let standardized: Vec<f64> = if qq_defined { r.iter().map(|v| v / sigma).collect() } else { Vec::new() };
    ResidualDiagnostics {
        labels: fit.function_names.clone(),
        residual_points,
        residual_mean: stats::mean(r),
        qq_points: qq_pairs(&standardized),
        standardized,
        qq_defined,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScatterBlock {
    pub x_dataset: String,
    pub y_dataset: String,
    /// `(Ê^x[φ] − Ê⁰[φ], Ê^y[φ] − Ê⁰[φ])`.
    pub points: Vec<(f64, f64)>,
    /// Least-squares slope of y on x (with intercept).
    pub slope: f64,
    pub r_squared: f64,
}

/// Simple regression slope and R² of `y` on `x`.
pub fn simple_regression(x: &[f64], y: &[f64]) -> (f64, f64) {
    let vx = stats::pop_variance(x);
    let vy = stats::pop_variance(y);
    let c = stats::pop_covariance(x, y);
    let slope = c / vx;
    let r2 = if vx > 0.0 && vy > 0.0 { c * c / (vx * vy) } else { f64::NAN };
    (slope, r2)
}

/// One block per ordered pair of distinct source datasets.
pub fn pairwise_scatter(moments: &MomentMatrix) -> Result<Vec<ScatterBlock>> {
    let k = moments.k();
    let l = moments.l();
    if k < 2 || l < 10 {
        return Err(Error::invalid(format!("scatter needs K >= 2 and L >= 10, got K = {k}, L = {l}")));
    }
    let e0 = moments.target();
    let s = moments.sources();
    let dev: Vec<Vec<f64>> = (0..k).map(|c| (0..l).map(|r| s[(r, c)] - e0[r]).collect()).collect();
    let names = moments.source_names();
    let mut out = Vec::new();
    for a in 0..k {
        for b in 0..k {
            if a == b {
                continue;
            }
            let (slope, r_squared) = simple_regression(&dev[a], &dev[b]);
            out.push(ScatterBlock {
                x_dataset: names[a].clone(),
                y_dataset: names[b].clone(),
                points: dev[a].iter().copied().zip(dev[b].iter().copied()).collect(),
                slope,
                r_squared,
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwoSampleStats {
    pub dataset: String,
    pub function_names: Vec<String>,
    /// `(1/n_k + 1/n_0)^{-1/2} (Ê^k[φ] − Ê⁰[φ]) / sd(φ)` per retained function.
    pub statistics: Vec<f64>,
    /// Functions dropped because their pooled standard deviation is zero.
    pub skipped: Vec<String>,
    /// Variance of the statistics across functions (1 for i.i.d. samples).
    pub inflation: f64,
    pub normality_p_value: f64,
}

/// Two-sample statistic for source `k` (0-based) against the target.
pub fn two_sample_statistic(moments: &MomentMatrix, k: usize) -> Result<TwoSampleStats> {
    if k >= moments.k() {
        return Err(Error::invalid(format!("dataset index {k} out of range")));
    }
    let nk = moments.source_sizes[k] as f64;
    let n0 = moments.target_size as f64;
    let pre = (1.0 / nk + 1.0 / n0).powf(-0.5);
    let mut names = Vec::new();
    let mut values = Vec::new();
    let mut skipped = Vec::new();
    for l in 0..moments.l() {
        let sd = moments.pooled_var[(l, l)].max(0.0).sqrt();
        let name = moments.function_names[l].clone();
        if sd == 0.0 {
            log::warn!("{name} has zero pooled standard deviation; skipped");
            skipped.push(name);
            continue;
        }
        let diff = moments.phi_hat[(k + 1, l)] - moments.phi_hat[(0, l)];
        names.push(name);
        values.push(pre * diff / sd);
    }
    let inflation = if values.len() > 1 { stats::sample_variance(&values) } else { f64::NAN };
    let normality_p_value = if values.len() >= 8 && inflation > 0.0 {
        stats::anderson_darling_normal(&values).p_value
    } else {
        f64::NAN
    };
    Ok(TwoSampleStats {
        dataset: moments.source_names()[k].clone(),
        function_names: names,
        statistics: values,
        skipped,
        inflation,
        normality_p_value,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticBundle {
    pub residuals: ResidualDiagnostics,
    pub scatter_blocks: Vec<ScatterBlock>,
    pub two_sample_stats: Vec<TwoSampleStats>,
}

pub fn diagnose(fit: &DlmFit, moments: &MomentMatrix) -> Result<DiagnosticBundle> {
    let scatter_blocks = if moments.k() >= 2 && moments.l() >= 10 {
        pairwise_scatter(moments)?
    } else {
        Vec::new()
    };
    Ok(DiagnosticBundle {
        residuals: residual_qq(fit),
        scatter_blocks,
        two_sample_stats: (0..moments.k()).map(|k| two_sample_statistic(moments, k)).collect::<Result<_>>()?,
    })
}

/// One plotted point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TidyRow {
    pub plot_id: String,
    pub x: f64,
    pub y: f64,
    pub label: String,
}

/// Flatten a bundle into rows `(plot_id, x, y, label)`.
pub fn tidy_rows(bundle: &DiagnosticBundle) -> Vec<TidyRow> {
    let mut out = Vec::new();
    let res = &bundle.residuals;
    for ((x, y), label) in res.residual_points.iter().zip(&res.labels) {
        out.push(TidyRow { plot_id: "residual".into(), x: *x, y: *y, label: label.clone() });
    }
    // QQ points are sorted, so labels follow the residual order.
    let mut order: Vec<usize> = (0..res.standardized.len()).collect();
    order.sort_by(|&a, &b| res.standardized[a].total_cmp(&res.standardized[b]));
    for (&(x, y), &i) in res.qq_points.iter().zip(&order) {
        out.push(TidyRow { plot_id: "qq".into(), x, y, label: res.labels[i].clone() });
    }
    for b in &bundle.scatter_blocks {
        let id = format!("scatter:{}|{}", b.x_dataset, b.y_dataset);
        for ((x, y), label) in b.points.iter().zip(&res.labels) {
            out.push(TidyRow { plot_id: id.clone(), x: *x, y: *y, label: label.clone() });
        }
    }
    for e in &bundle.two_sample_stats {
        let id = format!("two_sample:{}", e.dataset);
        for (x, y) in qq_pairs(&e.statistics) {
            out.push(TidyRow { plot_id: id.clone(), x, y, label: String::new() });
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dlm::{fit_weights, FitOptions};
    use approx::assert_relative_eq;
    use nalgebra::DMatrix;
    use rand_distr::{Distribution, StandardNormal, StudentT};

    fn moments_with(phi: DMatrix<f64>, var: f64, sizes: Vec<usize>, n0: usize) -> MomentMatrix {
        let l = phi.ncols();
        MomentMatrix::from_parts(phi, DMatrix::identity(l, l) * var, sizes, n0).unwrap()
    }

    fn random_fit(seed: u64, k: usize, l: usize) -> DlmFit {
        let mut rng = crate::rng::stream(seed, "diag", 0);
        let phi = DMatrix::from_fn(k + 1, l, |_, _| StandardNormal.sample(&mut rng));
        fit_weights(&moments_with(phi, 1.0, vec![50; k], 50), FitOptions::default()).unwrap()
    }

    #[test]
    fn standardized_mean_square_follows_df() {
        let fit = random_fit(1, 3, 40);
        let d = residual_qq(&fit);
        let ms = d.standardized.iter().map(|v| v * v).sum::<f64>() / 40.0;
        assert_relative_eq!(ms, 38.0 / 40.0, epsilon = 1e-8);
        assert!(d.qq_points.windows(2).all(|w| w[0].0 <= w[1].0 && w[0].1 <= w[1].1));
    }

    #[test]
    fn single_point_qq() {
        let q = qq_pairs(&[0.7]);
        assert_eq!(q, vec![(0.0, 0.7)]);
    }

    #[test]
    fn zero_residuals_flag() {
        let phi = DMatrix::from_row_slice(3, 3, &[1.0, 2.0, 3.0, 0.0, 5.0, 1.0, 1.0, 2.0, 3.0]);
        let fit = fit_weights(&moments_with(phi, 1.0, vec![10, 10], 10), FitOptions::default()).unwrap();
        let d = residual_qq(&fit);
        assert!(!d.qq_defined);
        assert!(d.qq_points.is_empty());
        assert_eq!(d.residual_points.len(), 3);
    }

    #[test]
    fn gaussian_qq_is_close_to_diagonal() {
        let mut rng = crate::rng::stream(2, "diag", 0);
        let z: Vec<f64> = (0..1000).map(|_| StandardNormal.sample(&mut rng)).collect();
        let dev = qq_max_deviation(&qq_pairs(&z), 0.5);
        assert!(dev < 0.15, "{dev}");
        let mut rng = crate::rng::stream(3, "diag", 0);
        let t2 = StudentT::new(2.0).unwrap();
        let heavy: Vec<f64> = (0..1000).map(|_| t2.sample(&mut rng)).collect();
        assert!(stats::anderson_darling_normal(&heavy).p_value < 0.01);
    }

    #[test]
    fn two_sample_statistic_algebra() {
        let phi = DMatrix::from_row_slice(2, 1, &[1.0, 1.3]);
        let m = moments_with(phi, 1.0, vec![200], 200);
        let s = two_sample_statistic(&m, 0).unwrap();
        assert_relative_eq!(s.statistics[0], 0.3 * (100.0f64).sqrt(), max_relative = 1e-12);
        let same = moments_with(DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 1.0, 2.0]), 1.0, vec![5], 5);
        assert!(two_sample_statistic(&same, 0).unwrap().statistics.iter().all(|&v| v == 0.0));
        let zero = moments_with(DMatrix::from_row_slice(2, 1, &[1.0, 2.0]), 0.0, vec![5], 5);
        let z = two_sample_statistic(&zero, 0).unwrap();
        assert!(z.statistics.is_empty());
        assert_eq!(z.skipped.len(), 1);
    }

    #[test]
    fn scatter_of_coupled_and_independent_deviations() {
        let mut rng = crate::rng::stream(4, "diag", 0);
        let l = 1000;
        let mut phi = DMatrix::zeros(4, l);
        for c in 0..l {
            let shared: f64 = StandardNormal.sample(&mut rng);
            phi[(1, c)] = shared;
            phi[(2, c)] = 2.0 * shared + 0.01 * Distribution::<f64>::sample(&StandardNormal, &mut rng);
            phi[(3, c)] = StandardNormal.sample(&mut rng);
        }
        let m = moments_with(phi, 1.0, vec![10; 3], 10);
        let blocks = pairwise_scatter(&m).unwrap();
        assert_eq!(blocks.len(), 6);
        let b12 = &blocks[0];
        assert!(b12.r_squared > 0.95);
        assert_relative_eq!(b12.slope, 2.0, epsilon = 0.01);
        let b13 = blocks.iter().find(|b| b.x_dataset == "source1" && b.y_dataset == "source3").unwrap();
        assert!(b13.r_squared < 0.05);
    }

    #[test]
    fn tidy_rows_cover_all_plots() {
        let fit = random_fit(5, 2, 12);
        let mut rng = crate::rng::stream(5, "diag", 0);
        let phi = DMatrix::from_fn(3, 12, |_, _| StandardNormal.sample(&mut rng));
        let m = moments_with(phi, 1.0, vec![50; 2], 50);
        let b = diagnose(&fit, &m).unwrap();
        let rows = tidy_rows(&b);
        let count = |p: &str| rows.iter().filter(|r| r.plot_id.starts_with(p)).count();
        assert_eq!(count("residual"), 12);
        assert_eq!(count("qq"), 12);
        assert_eq!(count("scatter:"), 24);
        assert_eq!(count("two_sample:"), 24);
    }
}
