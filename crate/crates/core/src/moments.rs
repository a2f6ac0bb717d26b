//! Per-dataset test-function means, pooled covariance over the source data,
//! and the whitening transform.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::{DatasetCollection, Table};
use crate::error::{Error, Result};
use crate::linalg;
use crate::stats;
use crate::test_functions::{TestFunction, TestFunctionSet, Whitening};

/// Relative eigenvalue floor used when forming inverse square roots.
pub const EIGEN_CLAMP: f64 = 1e-12;
/// Minimum eigenvalue relative to `trace / L` accepted without a ridge.
pub const SINGULARITY_RATIO: f64 = 1e-10;

/// Test-function means by dataset; row 0 is the target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentMatrix {
    pub function_names: Vec<String>,
    /// Target name first, then the K sources.
    pub dataset_names: Vec<String>,
    /// `(K + 1) x L`.
    pub phi_hat: DMatrix<f64>,
    /// `L x L` population covariance over the pooled source rows.
    pub pooled_var: DMatrix<f64>,
    pub pooled_mean: DVector<f64>,
    pub source_sizes: Vec<usize>,
    pub target_size: usize,
    /// Transform already applied to `phi_hat` and `pooled_var`, if any.
    pub whitening: Whitening,
}

impl MomentMatrix {
    /// Build directly from means and a pooled covariance.
    pub fn from_parts(
        phi_hat: DMatrix<f64>,
        pooled_var: DMatrix<f64>,
        source_sizes: Vec<usize>,
        target_size: usize,
    ) -> Result<Self> {
        let (k1, l) = phi_hat.shape();
        if k1 < 2 {
            return Err(Error::invalid("moment matrix needs a target row and at least one source"));
        }
        if pooled_var.shape() != (l, l) {
            return Err(Error::invalid(format!(
                "pooled covariance is {}x{}, expected {l}x{l}",
                pooled_var.nrows(),
                pooled_var.ncols()
            )));
        }
        if source_sizes.len() != k1 - 1 {
            return Err(Error::invalid("one source size per source row is required"));
        }
        if phi_hat.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("moment matrix has non-finite entries"));
        }
        Ok(Self {
            function_names: (1..=l).map(|i| format!("phi{i}")).collect(),
            dataset_names: std::iter::once("target".to_string())
                .chain((1..k1).map(|k| format!("source{k}")))
                .collect(),
            phi_hat,
            pooled_var: linalg::symmetrize(&pooled_var),
            pooled_mean: DVector::zeros(l),
            source_sizes,
            target_size,
            whitening: Whitening::Identity,
        })
    }

    pub fn k(&self) -> usize {
        self.phi_hat.nrows() - 1
    }

    pub fn l(&self) -> usize {
        self.phi_hat.ncols()
    }

    /// Target means `Ê⁰[φ]`.
    pub fn target(&self) -> DVector<f64> {
        self.phi_hat.row(0).transpose()
    }

    /// `L x K` matrix with column k holding `Ê^k[φ]`.
    pub fn sources(&self) -> DMatrix<f64> {
        self.phi_hat.rows(1, self.k()).transpose()
    }

    pub fn source_names(&self) -> &[String] {
        &self.dataset_names[1..]
    }

    /// Apply a linear transform `T` to the functions: means become `T Ê`,
    /// the pooled covariance `T Σ Tᵀ`.
    pub fn transformed(&self, whitening: &Whitening) -> MomentMatrix {
        let Some(t) = whitening.transform() else {
            return self.clone();
        };
        let mut out = self.clone();
        out.phi_hat = &self.phi_hat * t.transpose();
        out.pooled_var = linalg::symmetrize(&(t * &self.pooled_var * t.transpose()));
        out.pooled_mean = t * &self.pooled_mean;
        out.whitening = whitening.clone();
        if whitening.transform().is_some() {
            out.function_names = (1..=self.l()).map(|i| format!("white{i}")).collect();
        }
        out
    }

    /// Largest absolute off-diagonal correlation of the pooled covariance.
    pub fn max_offdiag_correlation(&self) -> f64 {
        let l = self.l();
        let mut worst: f64 = 0.0;
        for i in 0..l {
            for j in 0..i {
                let d = (self.pooled_var[(i, i)] * self.pooled_var[(j, j)]).sqrt();
                if d > 0.0 {
                    worst = worst.max((self.pooled_var[(i, j)] / d).abs());
                }
            }
        }
        worst
    }
}

/// Means of each function on each dataset plus the pooled covariance.
pub fn evaluate_moments(data: &DatasetCollection, tests: &TestFunctionSet) -> Result<MomentMatrix> {
    if tests.is_empty() {
        return Err(Error::config("no test functions"));
    }
    let l = tests.len();
    let k = data.k();
    let mut phi_hat = DMatrix::zeros(k + 1, l);
    let n_total: usize = data.source_sizes().iter().sum();
    let mut pooled = DMatrix::zeros(n_total, l);
    let tables: Vec<&Table> = std::iter::once(&data.target).chain(&data.sources).collect();
    for (c, f) in tests.functions.iter().enumerate() {
        let mut offset = 0;
        for (r, t) in tables.iter().enumerate() {
            let v = f.evaluate(t)?;
            phi_hat[(r, c)] = stats::mean(&v);
            if r > 0 {
                for (i, x) in v.into_iter().enumerate() {
                    pooled[(offset + i, c)] = x;
                }
                offset += t.nrows();
            }
        }
    }
    let (pooled_mean, pooled_var) = column_covariance(&pooled);
    let raw = MomentMatrix {
        function_names: tests.names(),
        dataset_names: tables.iter().map(|t| t.name.clone()).collect(),
        phi_hat,
        pooled_var,
        pooled_mean,
        source_sizes: data.source_sizes(),
        target_size: data.target.nrows(),
        whitening: Whitening::Identity,
    };
    let mut out = raw.transformed(&tests.whitening);
    out.function_names = tests.names();
    Ok(out)
}

/// Column means and population covariance of an `n x L` matrix.
pub fn column_covariance(x: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let (n, l) = x.shape();
    let mean = DVector::from_iterator(l, (0..l).map(|c| stats::sum(x.column(c).iter().copied()) / n as f64));
    let mut centered = x.clone();
    for c in 0..l {
        let m = mean[c];
        centered.column_mut(c).apply(|v| *v -= m);
    }
    let cov = centered.transpose() * &centered / n as f64;
    (mean, linalg::symmetrize(&cov))
}

/// Population variance of one function over the pooled source rows.
pub fn pooled_variance(data: &DatasetCollection, f: &TestFunction) -> Result<f64> {
    let mut all = Vec::new();
    for s in &data.sources {
        all.extend(f.evaluate(s)?);
    }
    Ok(stats::pop_variance(&all))
}

/// Pooled population variance from per-group sizes, means and variances.
pub fn pooled_variance_from_groups(sizes: &[usize], means: &[f64], variances: &[f64]) -> f64 {
    let n: f64 = sizes.iter().map(|&s| s as f64).sum();
    let grand = stats::sum(sizes.iter().zip(means).map(|(&s, m)| s as f64 * m)) / n;
    stats::sum(
        sizes
            .iter()
            .zip(means.iter().zip(variances))
            .map(|(&s, (m, v))| s as f64 / n * (v + (m - grand).powi(2))),
    )
}

/// Inverse square root of the pooled covariance.
///
/// Fails when the smallest eigenvalue is below `1e-10 * trace / L` unless a
/// ridge is given, in which case `ridge * I` is added first.
pub fn fit_whitening_transform(pooled_var: &DMatrix<f64>, ridge: Option<f64>) -> Result<Whitening> {
    let l = pooled_var.nrows();
    let trace = pooled_var.trace();
    let threshold = SINGULARITY_RATIO * trace / l as f64;
    let ridge = ridge.unwrap_or(0.0);
    if ridge < 0.0 || !ridge.is_finite() {
        return Err(Error::config(format!("ridge must be nonnegative, got {ridge}")));
    }
    let mut sigma = pooled_var.clone();
    for i in 0..l {
        sigma[(i, i)] += ridge;
    }
    let (vals, _) = linalg::sorted_eigen(&sigma);
    let min = vals[0];
    if !(min > threshold) {
        let suggested = (threshold - min).max(threshold) * 10.0;
        return Err(Error::NearSingularCovariance {
            min_eigenvalue: min,
            threshold,
            suggested_ridge: suggested.max(1e-8 * trace / l as f64),
        });
    }
    if ridge > 0.0 {
        log::info!("whitening with ridge {ridge:.3e}");
    }
    let (t, _) = linalg::inverse_sqrt_psd(&sigma, EIGEN_CLAMP)?;
    Ok(Whitening::Empirical {
        transform: t,
        ridge,
    })
}

/// Whitening fitted on (unwhitened) moments and attached to the test set.
///
/// If the moments were already transformed, the new transform is composed
/// with the existing one so it still acts on the raw functions.
pub fn fit_whitening(
    tests: &TestFunctionSet,
    moments: &MomentMatrix,
    ridge: Option<f64>,
) -> Result<TestFunctionSet> {
    let w = fit_whitening_transform(&moments.pooled_var, ridge)?;
    let composed = match (w, moments.whitening.transform()) {
        (Whitening::Empirical { transform, ridge }, Some(prev)) => Whitening::Empirical {
            transform: transform * prev,
            ridge,
        },
        (w, _) => w,
    };
    tests.clone().with_whitening(composed)
}
