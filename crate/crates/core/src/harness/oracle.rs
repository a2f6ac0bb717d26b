//! Analytic targets for the harness, computed from first principles and
//! kept apart from the estimators. Weight-law moments are re-derived here
//! rather than read from `perturb_sim`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::perturb_sim::{WeightLaw, WeightScheme};
use crate::stats;

/// `(E[W], Var[W])` of a weight law.
pub fn law_moments(law: &WeightLaw) -> (f64, f64) {
    match *law {
        WeightLaw::Constant { value } => (value, 0.0),
        WeightLaw::LogNormal { mu, sigma2 } => {
            let mean = (mu + 0.5 * sigma2).exp();
            (mean, mean * mean * (sigma2.exp() - 1.0))
        }
        WeightLaw::Gamma { shape, scale } => (shape * scale, shape * scale * scale),
        WeightLaw::ShiftedUniform { low, high } => (0.5 * (low + high), (high - low) * (high - low) / 12.0),
    }
}

/// Means and covariance of the K bin weights, built row by row.
fn weight_moments(scheme: &WeightScheme) -> Result<(Vec<f64>, DMatrix<f64>)> {
    let k = scheme.k();
    let mut mean = vec![0.0; k];
    let mut cov = DMatrix::zeros(k, k);
    match scheme {
        WeightScheme::Independent { laws } => {
            for (i, l) in laws.iter().enumerate() {
                let (m, v) = law_moments(l);
                mean[i] = m;
                cov[(i, i)] = v;
            }
        }
        WeightScheme::Mixture { bases, mixed } => {
            for (i, l) in bases.iter().enumerate() {
                let (m, v) = law_moments(l);
                mean[i] = m;
                cov[(i, i)] = v;
            }
            for (r, row) in mixed.iter().enumerate() {
                let i = bases.len() + r;
                // W_i = Σ_s c_s W_s + ε with ε independent of earlier rows
                mean[i] = row.coefficients.iter().zip(&mean).map(|(c, m)| c * m).sum();
                for t in 0..i {
                    let c: f64 = row.coefficients.iter().enumerate().map(|(s, c)| c * cov[(s, t)]).sum();
                    cov[(i, t)] = c;
                    cov[(t, i)] = c;
                }
                cov[(i, i)] = row.coefficients.iter().enumerate().map(|(s, c)| c * cov[(s, i)]).sum::<f64>()
                    + row.noise_sd * row.noise_sd;
            }
        }
        WeightScheme::ArTime { k, initial, coefficients, innovation_sd, intercept } => {
            let (m0, v0) = law_moments(initial);
            mean[0] = m0;
            cov[(0, 0)] = v0;
            for i in 1..*k {
                let lags: Vec<(usize, f64)> =
                    coefficients.iter().enumerate().map(|(p, &a)| (i.saturating_sub(p + 1), a)).collect();
                mean[i] = intercept + lags.iter().map(|&(l, a)| a * mean[l]).sum::<f64>();
                for t in 0..i {
                    let c: f64 = lags.iter().map(|&(l, a)| a * cov[(l, t)]).sum();
                    cov[(i, t)] = c;
                    cov[(t, i)] = c;
                }
                cov[(i, i)] =
                    lags.iter().map(|&(l, a)| a * cov[(l, i)]).sum::<f64>() + innovation_sd * innovation_sd;
            }
        }
        WeightScheme::GaussianCopula { .. } => {
            return Err(Error::config("copula schemes have no closed-form moments in the oracle"));
        }
    }
    Ok((mean, cov))
}

/// `Cov(W^i, W^j) / (E W^i E W^j)`. For the copula scheme the requested
/// matrix is returned, since the construction is calibrated to hit it.
pub fn relative_covariance(scheme: &WeightScheme) -> Result<DMatrix<f64>> {
    if let WeightScheme::GaussianCopula { sigma_w, .. } = scheme {
        let k = sigma_w.len();
        return Ok(DMatrix::from_fn(k, k, |i, j| sigma_w[i][j]));
    }
    let (mean, cov) = weight_moments(scheme)?;
    let k = mean.len();
    Ok(DMatrix::from_fn(k, k, |i, j| cov[(i, j)] / (mean[i] * mean[j])))
}

/// `E[U^p]` for `U` uniform on `[0, 1]`.
pub fn uniform_power_mean(p: u32) -> f64 {
    1.0 / (p as f64 + 1.0)
}

/// `Cov(U^a, U^b)` for `U` uniform.
pub fn uniform_power_cov(a: u32, b: u32) -> f64 {
    uniform_power_mean(a + b) - uniform_power_mean(a) * uniform_power_mean(b)
}

/// Mean of `u^p` over bin `j` of `m` equal bins.
pub fn bin_power_mean(p: u32, j: usize, m: usize) -> f64 {
    let q = p as i32 + 1;
    let (lo, hi) = (j as f64, j as f64 + 1.0);
    (hi.powi(q) - lo.powi(q)) / (q as f64 * (m as f64).powi(q - 1))
}

/// Bin-constant cosine basis, orthonormal under the uniform law:
/// `sqrt(2) cos(π ℓ (j + ½) / m)` for `ℓ = 1..m−1`.
pub fn cosine_basis(l: usize, j: usize, m: usize) -> f64 {
    std::f64::consts::SQRT_2 * (std::f64::consts::PI * l as f64 * (j as f64 + 0.5) / m as f64).cos()
}

/// `L x m` table of the first `L` cosine basis functions.
pub fn cosine_table(l: usize, m: usize) -> DMatrix<f64> {
    DMatrix::from_fn(l, m, |i, j| cosine_basis(i + 1, j, m))
}

/// Scaled covariance of source-minus-target moment deviations when the
/// target is an unperturbed sample of size `n_target`:
/// `Σ^W + m·diag(1/n_k) + m·J/n_0`.
pub fn effective_covariance(sigma_w: &DMatrix<f64>, m: usize, source_sizes: &[usize], n_target: Option<usize>) -> DMatrix<f64> {
    let k = sigma_w.nrows();
    let m = m as f64;
    let t = n_target.map_or(0.0, |n| m / n as f64);
    DMatrix::from_fn(k, k, |i, j| {
        sigma_w[(i, j)] + t + if i == j { m / source_sizes[i] as f64 } else { 0.0 }
    })
}

/// Minimizer of `βᵀΣβ` subject to `Σβ = 1`.
pub fn min_variance_weights(sigma: &DMatrix<f64>) -> Result<DVector<f64>> {
    let k = sigma.nrows();
    let ones = DVector::from_element(k, 1.0);
    let lu = sigma.clone().lu();
    let x = lu.solve(&ones).ok_or_else(|| Error::Numerical("singular weight covariance".into()))?;
    let s = x.sum();
    Ok(x / s)
}

pub fn quadratic_form(sigma: &DMatrix<f64>, beta: &DVector<f64>) -> f64 {
    (beta.transpose() * sigma * beta)[(0, 0)]
}

/// Composite Gauss–Legendre integral of `f` over `[0, 1]`.
pub fn integrate_unit(f: impl Fn(f64) -> f64, panels: usize, nodes: usize) -> f64 {
    let (x, w) = stats::gauss_legendre_unit(nodes);
    let h = 1.0 / panels as f64;
    let mut acc = stats::NeumaierSum::new();
    for p in 0..panels {
        for (x, w) in x.iter().zip(&w) {
            acc.add(h * w * f((p as f64 + x) * h));
        }
    }
    acc.value()
}

/// Misspecified linear regression on three orthonormal features of `U`.
/// `E[x xᵀ] = I`, so the squared-loss Hessian is `2I` and the excess risk
/// of `θ` is exactly `‖θ − θ⁰‖²`.
pub mod regression {
    use super::integrate_unit;

    pub const DIM: usize = 3;
    const PANELS: usize = 256;
    const NODES: usize = 16;

    pub fn features(u: f64) -> [f64; DIM] {
        [
            1.0,
            3f64.sqrt() * (2.0 * u - 1.0),
            std::f64::consts::SQRT_2 * (2.0 * std::f64::consts::PI * u).cos(),
        ]
    }

    pub fn response(u: f64) -> f64 {
        (1.5 * u).exp() + 0.3 * (5.0 * std::f64::consts::PI * u).sin()
    }

    /// Population least-squares coefficients `E[x y]`.
    pub fn theta0() -> [f64; DIM] {
        let mut t = [0.0; DIM];
        for (j, v) in t.iter_mut().enumerate() {
            *v = integrate_unit(|u| features(u)[j] * response(u), PANELS, NODES);
        }
        t
    }

    /// `Tr(H⁻¹ V)` with `H = 2I` and `V = Var(−2 x e)` at `θ⁰`,
    /// i.e. `2 E[‖x‖² e²]` (the gradient has mean zero).
    pub fn trace_term() -> f64 {
        let t = theta0();
        let e2 = |u: f64| {
            let x = features(u);
            let fit: f64 = x.iter().zip(&t).map(|(a, b)| a * b).sum();
            let e = response(u) - fit;
            x.iter().map(|v| v * v).sum::<f64>() * e * e
        };
        2.0 * integrate_unit(e2, PANELS, NODES)
    }

    /// `E[x xᵀ]` by quadrature; the identity up to quadrature error.
    pub fn gram() -> [[f64; DIM]; DIM] {
        let mut g = [[0.0; DIM]; DIM];
        for a in 0..DIM {
            for b in 0..DIM {
                g[a][b] = integrate_unit(|u| features(u)[a] * features(u)[b], PANELS, NODES);
            }
        }
        g
    }
}

/// Moments of `Y = sqrt(2) cos(2π f U)` given `U < a`.
pub fn cosine_conditional_moments(freq: f64, a: f64) -> (f64, f64) {
    let w = 2.0 * std::f64::consts::PI * freq;
    let mean = std::f64::consts::SQRT_2 * (w * a).sin() / (w * a);
    let second = 1.0 + (2.0 * w * a).sin() / (2.0 * w * a);
    (mean, second - mean * mean)
}

/// Mean of `sqrt(2) cos(2π f u)` over bin `j` of `m`.
pub fn cosine_bin_mean(freq: f64, j: usize, m: usize) -> f64 {
    let w = 2.0 * std::f64::consts::PI * freq;
    let (lo, hi) = (j as f64 / m as f64, (j + 1) as f64 / m as f64);
    std::f64::consts::SQRT_2 * ((w * hi).sin() - (w * lo).sin()) / (w * (hi - lo))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::perturb_sim::MixedRow;
    use approx::assert_relative_eq;

    #[test]
    fn lognormal_relative_variance() {
        let s = relative_covariance(&WeightScheme::independent(WeightLaw::lognormal(0.25), 2)).unwrap();
        assert_relative_eq!(s[(0, 0)], 0.25f64.exp() - 1.0, epsilon = 1e-14);
        assert_relative_eq!(s[(0, 0)], 0.2840, epsilon = 1e-4);
        assert_eq!(s[(0, 1)], 0.0);
    }

    #[test]
    fn mixture_bilinearity() {
        let b = WeightLaw::lognormal(0.25);
        let scheme = WeightScheme::Mixture {
            bases: vec![b.clone(), b.clone()],
            mixed: vec![MixedRow { coefficients: vec![0.7, 0.3], noise_sd: 0.1 }],
        };
        let s = relative_covariance(&scheme).unwrap();
        let (mu, _) = law_moments(&b);
        // E W3 = E W1 here, so the ratio of means is one
        assert_relative_eq!(s[(0, 2)], 0.7 * s[(0, 0)] * mu / mu, epsilon = 1e-14);
    }

    #[test]
    fn ar_recursion_matches_direct_expansion() {
        // W2 = c + a W1 + e, W3 = c + a W2 + e'
        let law = WeightLaw::Gamma { shape: 2.0, scale: 0.5 };
        let (a, c, sd) = (0.6, 0.4, 0.1);
        let scheme = WeightScheme::ArTime {
            k: 3,
            initial: law.clone(),
            coefficients: vec![a],
            innovation_sd: sd,
            intercept: c,
        };
        let (mean, cov) = weight_moments(&scheme).unwrap();
        let (m1, v1) = law_moments(&law);
        assert_relative_eq!(mean[2], c + a * (c + a * m1), epsilon = 1e-14);
        assert_relative_eq!(cov[(2, 2)], a.powi(4) * v1 + a * a * sd * sd + sd * sd, epsilon = 1e-14);
        assert_relative_eq!(cov[(0, 2)], a * a * v1, epsilon = 1e-14);
    }

    #[test]
    fn uniform_and_basis_moments() {
        assert_relative_eq!(uniform_power_cov(1, 1), 1.0 / 12.0, epsilon = 1e-15);
        assert_relative_eq!(uniform_power_cov(2, 2), 4.0 / 45.0, epsilon = 1e-15);
        assert_relative_eq!(uniform_power_cov(1, 2), 1.0 / 12.0, epsilon = 1e-15);
        let m = 50;
        let avg: f64 = (0..m).map(|j| bin_power_mean(2, j, m)).sum::<f64>() / m as f64;
        assert_relative_eq!(avg, 1.0 / 3.0, epsilon = 1e-14);
        let t = cosine_table(10, m);
        let g = &t * t.transpose() / m as f64;
        assert!((g - DMatrix::identity(10, 10)).amax() < 1e-12);
        assert!(t.column_sum().amax() < 1e-10);
    }

    #[test]
    fn min_variance_weights_diag() {
        let s = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 4.0]));
        let b = min_variance_weights(&s).unwrap();
        assert_relative_eq!(b[0], 0.8, epsilon = 1e-14);
        assert_relative_eq!(quadratic_form(&s, &b), 0.8, epsilon = 1e-14);
    }

    #[test]
    fn regression_design_is_orthonormal() {
        let g = regression::gram();
        for a in 0..3 {
            for b in 0..3 {
                assert!((g[a][b] - if a == b { 1.0 } else { 0.0 }).abs() < 1e-12);
            }
        }
        assert!(regression::trace_term() > 0.0);
    }

    #[test]
    fn cosine_conditionals() {
        let (m, v) = cosine_conditional_moments(8.0, 0.5);
        assert!(m.abs() < 1e-14);
        assert_relative_eq!(v, 1.0, epsilon = 1e-14);
        let mb: f64 = (0..50).map(|j| cosine_bin_mean(8.0, j, 200)).sum::<f64>();
        assert!(mb.abs() < 1e-10);
    }
}
