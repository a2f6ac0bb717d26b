//! Summation, sample moments, quantiles and a few distribution helpers.

use statrs::distribution::{
    ChiSquared, ContinuousCDF, FisherSnedecor, Normal, StudentsT,
};

/// Neumaier-compensated running sum.
#[derive(Debug, Clone, Copy, Default)]
pub struct NeumaierSum {
    sum: f64,
    comp: f64,
}

impl NeumaierSum {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

impl Extend<f64> for NeumaierSum {
    fn extend<I: IntoIterator<Item = f64>>(&mut self, iter: I) {
        for x in iter {
            self.add(x);
        }
    }
}

pub fn sum(xs: impl IntoIterator<Item = f64>) -> f64 {
    let mut acc = NeumaierSum::new();
    acc.extend(xs);
    acc.value()
}

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    sum(xs.iter().copied()) / xs.len() as f64
}

/// Variance with divisor `n`.
pub fn pop_variance(xs: &[f64]) -> f64 {
    pop_covariance(xs, xs)
}

/// Covariance with divisor `n`.
pub fn pop_covariance(xs: &[f64], ys: &[f64]) -> f64 {
    assert_eq!(xs.len(), ys.len());
    let mx = mean(xs);
    let my = mean(ys);
    sum(xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my))) / xs.len() as f64
}

/// Variance with divisor `n - 1`.
pub fn sample_variance(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    pop_variance(xs) * n / (n - 1.0)
}

/// Linear-interpolation quantile (Hyndman–Fan type 7) of sorted data.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 0 {
        return f64::NAN;
    }
    let h = (n - 1) as f64 * p.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn sorted_copy(xs: &[f64]) -> Vec<f64> {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    v
}

fn std_normal() -> Normal {
    Normal::new(0.0, 1.0).expect("standard normal")
}

pub fn normal_cdf(x: f64) -> f64 {
    std_normal().cdf(x)
}

pub fn normal_quantile(p: f64) -> f64 {
    std_normal().inverse_cdf(p)
}

/// Two-sided normal critical value for a confidence level.
pub fn z_for_level(level: f64) -> f64 {
    normal_quantile(0.5 + level / 2.0)
}

pub fn t_cdf(x: f64, df: f64) -> f64 {
    StudentsT::new(0.0, 1.0, df).expect("valid df").cdf(x)
}

/// `P(|T| > |t|)` for Student's t with `df` degrees of freedom.
pub fn t_two_sided_p(t: f64, df: f64) -> f64 {
    if t.is_nan() {
        return f64::NAN;
    }
    let d = StudentsT::new(0.0, 1.0, df).expect("valid df");
    (2.0 * d.sf(t.abs())).min(1.0)
}

pub fn f_cdf(x: f64, df1: f64, df2: f64) -> f64 {
    FisherSnedecor::new(df1, df2).expect("valid df").cdf(x.max(0.0))
}

/// Upper tail of the F distribution.
pub fn f_sf(x: f64, df1: f64, df2: f64) -> f64 {
    if x.is_nan() {
        return f64::NAN;
    }
    FisherSnedecor::new(df1, df2).expect("valid df").sf(x.max(0.0))
}

pub fn chi2_cdf(x: f64, df: f64) -> f64 {
    ChiSquared::new(df).expect("valid df").cdf(x.max(0.0))
}

pub fn chi2_sf(x: f64, df: f64) -> f64 {
    ChiSquared::new(df).expect("valid df").sf(x.max(0.0))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TestResult {
    pub statistic: f64,
    pub p_value: f64,
}

/// Asymptotic Kolmogorov survival function `P(K > lambda)`.
pub fn kolmogorov_sf(lambda: f64) -> f64 {
    if lambda <= 0.0 {
        return 1.0;
    }
    if lambda < 0.3 {
        // Series below converges slowly here, and the value is 1 to double precision.
        return 1.0;
    }
    let mut total = 0.0;
    for k in 1..=100 {
        let kf = k as f64;
        let term = (-2.0 * kf * kf * lambda * lambda).exp();
        total += if k % 2 == 1 { term } else { -term };
        if term < 1e-17 {
            break;
        }
    }
    (2.0 * total).clamp(0.0, 1.0)
}

/// One-sample Kolmogorov–Smirnov test against a continuous CDF.
///
/// The p-value uses Stephens' small-sample correction of the asymptotic law.
pub fn ks_one_sample(data: &[f64], cdf: impl Fn(f64) -> f64) -> TestResult {
    let sorted = sorted_copy(data);
    let n = sorted.len() as f64;
    let mut d: f64 = 0.0;
    for (i, &x) in sorted.iter().enumerate() {
        let f = cdf(x);
        d = d.max((i as f64 + 1.0) / n - f).max(f - i as f64 / n);
    }
    let sn = n.sqrt();
    let lambda = (sn + 0.12 + 0.11 / sn) * d;
    TestResult {
        statistic: d,
        p_value: kolmogorov_sf(lambda),
    }
}

/// Anderson–Darling test of normality with estimated mean and variance.
pub fn anderson_darling_normal(data: &[f64]) -> TestResult {
    let sorted = sorted_copy(data);
    let n = sorted.len();
    let nf = n as f64;
    let m = mean(&sorted);
    let sd = sample_variance(&sorted).sqrt();
    let logp: Vec<f64> = sorted
        .iter()
        .map(|&x| std_normal().cdf((x - m) / sd).max(1e-300).ln())
        .collect();
    let log1mp: Vec<f64> = sorted
        .iter()
        .map(|&x| std_normal().sf((x - m) / sd).max(1e-300).ln())
        .collect();
    let s = sum((0..n).map(|i| (2.0 * i as f64 + 1.0) * (logp[i] + log1mp[n - 1 - i])));
    let a = -nf - s / nf;
    let aa = a * (1.0 + 0.75 / nf + 2.25 / (nf * nf));
    let p = if aa < 0.2 {
        1.0 - (-13.436 + 101.14 * aa - 223.73 * aa * aa).exp()
    } else if aa < 0.34 {
        1.0 - (-8.318 + 42.796 * aa - 59.938 * aa * aa).exp()
    } else if aa < 0.6 {
        (0.9177 - 4.279 * aa - 1.38 * aa * aa).exp()
    } else if aa < 10.0 {
        (1.2937 - 5.709 * aa + 0.0186 * aa * aa).exp()
    } else {
        3.7e-24
    };
    TestResult {
        statistic: a,
        p_value: p,
    }
}

/// Gauss–Hermite nodes and weights for the weight function `exp(-x^2)`.
pub fn gauss_hermite(n: usize) -> (Vec<f64>, Vec<f64>) {
    // Golub–Welsch on the Jacobi matrix of the physicists' Hermite polynomials.
    let mut j = nalgebra::DMatrix::<f64>::zeros(n, n);
    for i in 1..n {
        let b = (i as f64 / 2.0).sqrt();
        j[(i, i - 1)] = b;
        j[(i - 1, i)] = b;
    }
    let (vals, vecs) = crate::linalg::sorted_eigen(&j);
    let mu0 = std::f64::consts::PI.sqrt();
    let nodes = vals.iter().copied().collect();
    let weights = (0..n).map(|i| mu0 * vecs[(0, i)].powi(2)).collect();
    (nodes, weights)
}

/// Gauss–Legendre nodes and weights on `[0, 1]`.
pub fn gauss_legendre_unit(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut j = nalgebra::DMatrix::<f64>::zeros(n, n);
    for i in 1..n {
        let k = i as f64;
        let b = k / (4.0 * k * k - 1.0).sqrt();
        j[(i, i - 1)] = b;
        j[(i - 1, i)] = b;
    }
    let (vals, vecs) = crate::linalg::sorted_eigen(&j);
    let nodes = vals.iter().map(|&x| 0.5 * (x + 1.0)).collect();
    let weights = (0..n).map(|i| vecs[(0, i)].powi(2)).collect();
    (nodes, weights)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn compensated_sum_recovers_small_terms() {
        let xs = [1e16, 1.0, -1e16, 1.0];
        assert_eq!(sum(xs), 2.0);
    }

    #[test]
    fn type7_quantiles() {
        let xs = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert_eq!(quantile_sorted(&xs, 0.25), 2.0);
        assert_eq!(quantile_sorted(&xs, 0.5), 3.0);
        assert_relative_eq!(quantile_sorted(&xs, 0.1), 1.4, epsilon = 1e-14);
    }

    #[test]
    fn population_variance_uses_n() {
        assert_relative_eq!(pop_variance(&[1.0, 2.0, 3.0, 4.0]), 1.25, epsilon = 1e-15);
    }

    #[test]
    fn distribution_tails() {
        assert_relative_eq!(z_for_level(0.95), 1.959963984540054, epsilon = 1e-9);
        assert_relative_eq!(t_two_sided_p(2.0, 10.0), 0.07338803477074, epsilon = 1e-9);
        // df1 = 2 has the closed-form tail (1 + 2x/d2)^(-d2/2)
        assert_relative_eq!(f_sf(3.0, 2.0, 20.0), 1.3f64.powi(-10), epsilon = 1e-10);
    }

    #[test]
    fn kolmogorov_tail_values() {
        assert_relative_eq!(kolmogorov_sf(1.36), 0.0494, epsilon = 5e-4);
        assert_relative_eq!(kolmogorov_sf(1.0), 0.2700, epsilon = 5e-4);
    }

    #[test]
    fn ks_uniform_grid_is_accepted() {
        let xs: Vec<f64> = (0..500).map(|i| (i as f64 + 0.5) / 500.0).collect();
        let r = ks_one_sample(&xs, |x| x.clamp(0.0, 1.0));
        assert!(r.statistic <= 0.001 + 1e-12);
        assert!(r.p_value > 0.99);
    }

    #[test]
    fn anderson_darling_on_normal_scores() {
        let n = 200;
        let xs: Vec<f64> = (0..n)
            .map(|i| normal_quantile((i as f64 + 0.5) / n as f64))
            .collect();
        assert!(anderson_darling_normal(&xs).p_value > 0.5);
        let skewed: Vec<f64> = xs.iter().map(|x| x.exp()).collect();
        assert!(anderson_darling_normal(&skewed).p_value < 1e-6);
    }

    #[test]
    fn quadrature_rules() {
        let (x, w) = gauss_hermite(20);
        let m2: f64 = x.iter().zip(&w).map(|(x, w)| w * x * x).sum();
        assert_relative_eq!(m2, std::f64::consts::PI.sqrt() / 2.0, epsilon = 1e-12);
        let (u, v) = gauss_legendre_unit(10);
        let i: f64 = u.iter().zip(&v).map(|(u, v)| v * u.powi(5)).sum();
        assert_relative_eq!(i, 1.0 / 6.0, epsilon = 1e-13);
    }
}
