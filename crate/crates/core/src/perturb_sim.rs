//! Randomly perturbed distributions built by reweighting equal-width bins of
//! the unit interval, and samplers for them.
//!
//! A world holds one positive weight per (dataset, bin). Dataset `k` draws a
//! bin with probability proportional to its weight, a uniform point inside
//! that bin, and pushes the point through a transform to produce a data row.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution, Gamma, LogNormal, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::distribution::ContinuousCDF;

use crate::data::{Column, Table};
use crate::error::{Error, Result};
use crate::expr::Expr;
use crate::linalg;
use crate::rng;
use crate::stats;

const MAX_REJECTIONS: usize = 100;

/// Law of a single positive bin weight.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "law", rename_all = "snake_case", deny_unknown_fields)]
pub enum WeightLaw {
    Constant { value: f64 },
    LogNormal {
        #[serde(default)]
        mu: f64,
        sigma2: f64,
    },
    Gamma { shape: f64, scale: f64 },
    /// Uniform on `[low, high]` with `low > 0`.
    ShiftedUniform { low: f64, high: f64 },
}

impl WeightLaw {
    pub fn lognormal(sigma2: f64) -> Self {
        WeightLaw::LogNormal { mu: 0.0, sigma2 }
    }

    /// Gamma law with mean one and the given variance.
    pub fn unit_gamma(variance: f64) -> Self {
        WeightLaw::Gamma { shape: 1.0 / variance, scale: variance }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            WeightLaw::Constant { value } => value > 0.0 && value.is_finite(),
            WeightLaw::LogNormal { mu, sigma2 } => mu.is_finite() && sigma2 >= 0.0 && sigma2.is_finite(),
            WeightLaw::Gamma { shape, scale } => shape > 0.0 && scale > 0.0 && shape.is_finite() && scale.is_finite(),
            WeightLaw::ShiftedUniform { low, high } => low > 0.0 && high >= low && high.is_finite(),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::config(format!("invalid weight law {self:?}")))
        }
    }

    pub fn mean(&self) -> f64 {
        match *self {
            WeightLaw::Constant { value } => value,
            WeightLaw::LogNormal { mu, sigma2 } => (mu + sigma2 / 2.0).exp(),
            WeightLaw::Gamma { shape, scale } => shape * scale,
            WeightLaw::ShiftedUniform { low, high } => (low + high) / 2.0,
        }
    }

    pub fn variance(&self) -> f64 {
        match *self {
            WeightLaw::Constant { .. } => 0.0,
            WeightLaw::LogNormal { mu, sigma2 } => sigma2.exp_m1() * (2.0 * mu + sigma2).exp(),
            WeightLaw::Gamma { shape, scale } => shape * scale * scale,
            WeightLaw::ShiftedUniform { low, high } => (high - low).powi(2) / 12.0,
        }
    }

    /// `Var(W) / E[W]^2`.
    pub fn relative_variance(&self) -> f64 {
        match *self {
            WeightLaw::LogNormal { sigma2, .. } => sigma2.exp_m1(),
            WeightLaw::Gamma { shape, .. } => 1.0 / shape,
            _ => self.variance() / self.mean().powi(2),
        }
    }

    pub fn sample(&self, rng: &mut ChaCha8Rng) -> f64 {
        match *self {
            WeightLaw::Constant { value } => value,
            WeightLaw::LogNormal { mu, sigma2 } => {
                LogNormal::new(mu, sigma2.sqrt()).expect("validated").sample(rng)
            }
            WeightLaw::Gamma { shape, scale } => {
                Gamma::new(shape, scale).expect("validated").sample(rng)
            }
            WeightLaw::ShiftedUniform { low, high } => {
                if high == low {
                    low
                } else {
                    rng.random_range(low..high)
                }
            }
        }
    }
}

/// Marginal family used by the Gaussian-copula scheme. Each marginal is
/// scaled to mean one with relative variance taken from the target diagonal.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CopulaMarginal {
    #[default]
    LogNormal,
    Gamma,
}

/// One derived row of a mixture scheme: a linear combination of all
/// earlier rows plus independent Gaussian noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixedRow {
    pub coefficients: Vec<f64>,
    #[serde(default)]
    pub noise_sd: f64,
}

/// Joint law of the K weights attached to one bin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum WeightScheme {
    /// Independent rows, one law per dataset.
    Independent { laws: Vec<WeightLaw> },
    /// Rows share Gaussian innovations through a copula calibrated so that
    /// the relative covariance matches `sigma_w` as closely as possible.
    GaussianCopula {
        sigma_w: Vec<Vec<f64>>,
        #[serde(default)]
        marginal: CopulaMarginal,
    },
    /// `W^1 ~ initial`, `W^k = intercept + sum_p a_p W^{max(k-p,1)} + eps_k`.
    ArTime {
        k: usize,
        initial: WeightLaw,
        coefficients: Vec<f64>,
        innovation_sd: f64,
        #[serde(default)]
        intercept: f64,
    },
    /// Independent base rows followed by derived rows.
    Mixture { bases: Vec<WeightLaw>, mixed: Vec<MixedRow> },
}

impl WeightScheme {
    pub fn independent(law: WeightLaw, k: usize) -> Self {
        WeightScheme::Independent { laws: vec![law; k] }
    }

    pub fn k(&self) -> usize {
        match self {
            WeightScheme::Independent { laws } => laws.len(),
            WeightScheme::GaussianCopula { sigma_w, .. } => sigma_w.len(),
            WeightScheme::ArTime { k, .. } => *k,
            WeightScheme::Mixture { bases, mixed } => bases.len() + mixed.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerturbationScheme {
    pub m: usize,
    pub weights: WeightScheme,
    #[serde(default)]
    pub seed: u64,
}

impl PerturbationScheme {
    pub fn new(m: usize, weights: WeightScheme, seed: u64) -> Self {
        Self { m, weights, seed }
    }

    pub fn k(&self) -> usize {
        self.weights.k()
    }

    pub fn compile(&self) -> Result<CompiledScheme> {
        if self.m < 2 {
            return Err(Error::config(format!("bin count m must be at least 2, got {}", self.m)));
        }
        CompiledScheme::new(&self.weights)
    }
}

#[derive(Debug, Clone)]
enum Innovation {
    Law(WeightLaw),
    Gaussian(f64),
}

impl Innovation {
    fn mean(&self) -> f64 {
        match self {
            Innovation::Law(l) => l.mean(),
            Innovation::Gaussian(_) => 0.0,
        }
    }

    fn variance(&self) -> f64 {
        match self {
            Innovation::Law(l) => l.variance(),
            Innovation::Gaussian(sd) => sd * sd,
        }
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> f64 {
        match self {
            Innovation::Law(l) => l.sample(rng),
            Innovation::Gaussian(sd) => {
                let z: f64 = StandardNormal.sample(rng);
                sd * z
            }
        }
    }
}

#[derive(Debug, Clone)]
enum Sampler {
    /// `W = offset + A xi` with independent innovations `xi`.
    Linear {
        offset: DVector<f64>,
        a: DMatrix<f64>,
        innovations: Vec<Innovation>,
    },
    Copula {
        chol: DMatrix<f64>,
        marginal: CopulaMarginal,
        rel_var: Vec<f64>,
    },
}

/// A validated scheme with its analytic moments.
#[derive(Debug, Clone)]
pub struct CompiledScheme {
    sampler: Sampler,
    means: DVector<f64>,
    sigma_w: DMatrix<f64>,
    copula_error: Option<f64>,
}

impl CompiledScheme {
    fn new(scheme: &WeightScheme) -> Result<Self> {
        if scheme.k() == 0 {
            return Err(Error::config("a weight scheme needs at least one dataset"));
        }
        match scheme {
            WeightScheme::Independent { laws } => {
                for l in laws {
                    l.validate()?;
                }
                let k = laws.len();
                Self::linear(
                    DVector::zeros(k),
                    DMatrix::identity(k, k),
                    laws.iter().cloned().map(Innovation::Law).collect(),
                )
            }
            WeightScheme::Mixture { bases, mixed } => {
                if bases.is_empty() {
                    return Err(Error::config("mixture scheme needs at least one base row"));
                }
                for l in bases {
                    l.validate()?;
                }
                let k = bases.len() + mixed.len();
                let n_xi = k;
                let mut a = DMatrix::zeros(k, n_xi);
                let mut innovations: Vec<Innovation> =
                    bases.iter().cloned().map(Innovation::Law).collect();
                for i in 0..bases.len() {
                    a[(i, i)] = 1.0;
                }
                for (r, row) in mixed.iter().enumerate() {
                    let idx = bases.len() + r;
                    if row.coefficients.len() != idx {
                        return Err(Error::config(format!(
                            "mixture row {} needs {idx} coefficients (one per earlier row), got {}",
                            idx + 1,
                            row.coefficients.len()
                        )));
                    }
                    if !(row.noise_sd >= 0.0) {
                        return Err(Error::config("mixture noise_sd must be nonnegative"));
                    }
                    for (j, &c) in row.coefficients.iter().enumerate() {
                        let src = a.row(j).clone_owned();
                        let mut dst = a.row_mut(idx);
                        dst += src * c;
                    }
                    a[(idx, idx)] = 1.0;
                    innovations.push(Innovation::Gaussian(row.noise_sd));
                }
                Self::linear(DVector::zeros(k), a, innovations)
            }
            WeightScheme::ArTime {
                k,
                initial,
                coefficients,
                innovation_sd,
                intercept,
            } => {
                initial.validate()?;
                if coefficients.is_empty() {
                    return Err(Error::config("ar_time needs at least one coefficient"));
                }
                if !(*innovation_sd >= 0.0) {
                    return Err(Error::config("innovation_sd must be nonnegative"));
                }
                let k = *k;
                let mut a = DMatrix::zeros(k, k);
                let mut offset = DVector::zeros(k);
                let mut innovations = vec![Innovation::Law(initial.clone())];
                a[(0, 0)] = 1.0;
                for row in 1..k {
                    offset[row] = *intercept;
                    for (p, &c) in coefficients.iter().enumerate() {
                        let lag = row.saturating_sub(p + 1);
                        let src = a.row(lag).clone_owned();
                        let src_off = offset[lag];
                        let mut dst = a.row_mut(row);
                        dst += src * c;
                        offset[row] += c * src_off;
                    }
                    a[(row, row)] = 1.0;
                    innovations.push(Innovation::Gaussian(*innovation_sd));
                }
                Self::linear(offset, a, innovations)
            }
            WeightScheme::GaussianCopula { sigma_w, marginal } => {
                Self::copula(sigma_w, *marginal)
            }
        }
    }

    fn linear(offset: DVector<f64>, a: DMatrix<f64>, innovations: Vec<Innovation>) -> Result<Self> {
        let xi_mean = DVector::from_iterator(innovations.len(), innovations.iter().map(Innovation::mean));
        let xi_var = DVector::from_iterator(innovations.len(), innovations.iter().map(Innovation::variance));
        let means = &offset + &a * xi_mean;
        if let Some(k) = means.iter().position(|&m| !(m > 0.0)) {
            return Err(Error::config(format!(
                "weight row {} has nonpositive mean {}",
                k + 1,
                means[k]
            )));
        }
        let cov = &a * DMatrix::from_diagonal(&xi_var) * a.transpose();
        let k = means.len();
        let sigma_w = DMatrix::from_fn(k, k, |i, j| cov[(i, j)] / (means[i] * means[j]));
        Ok(Self {
            sampler: Sampler::Linear {
                offset,
                a,
                innovations,
            },
            means,
            sigma_w: linalg::symmetrize(&sigma_w),
            copula_error: None,
        })
    }

    fn copula(target: &[Vec<f64>], marginal: CopulaMarginal) -> Result<Self> {
        let k = target.len();
        if target.iter().any(|r| r.len() != k) {
            return Err(Error::config("copula sigma_w must be square"));
        }
        let t = DMatrix::from_fn(k, k, |i, j| target[i][j]);
        if (&t - t.transpose()).amax() > 1e-12 {
            return Err(Error::config("copula sigma_w must be symmetric"));
        }
        let rel_var: Vec<f64> = (0..k).map(|i| t[(i, i)]).collect();
        if rel_var.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
            return Err(Error::config("copula sigma_w diagonal must be nonnegative and finite"));
        }
        let quad = CopulaQuadrature::new(marginal, &rel_var);
        let mut r = DMatrix::identity(k, k);
        for i in 0..k {
            for j in 0..i {
                let rho = quad.solve_rho(i, j, t[(i, j)]);
                r[(i, j)] = rho;
                r[(j, i)] = rho;
            }
        }
        let r = nearest_correlation(&r);
        let mut achieved = DMatrix::zeros(k, k);
        for i in 0..k {
            achieved[(i, i)] = rel_var[i];
            for j in 0..i {
                let v = quad.cross(i, j, r[(i, j)]);
                achieved[(i, j)] = v;
                achieved[(j, i)] = v;
            }
        }
        let err = (&achieved - &t).amax();
        if err > 1e-6 {
            log::warn!("copula cannot reach the requested weight covariance; max entry error {err:.3e}");
        }
        Ok(Self {
            sampler: Sampler::Copula {
                chol: linalg::psd_cholesky(&r),
                marginal,
                rel_var,
            },
            means: DVector::from_element(k, 1.0),
            sigma_w: achieved,
            copula_error: Some(err),
        })
    }

    pub fn k(&self) -> usize {
        self.means.len()
    }

    /// `E[W^k]` per row.
    pub fn means(&self) -> &DVector<f64> {
        &self.means
    }

    /// Analytic `Cov(W^i, W^j) / (E W^i E W^j)`.
    pub fn sigma_w(&self) -> &DMatrix<f64> {
        &self.sigma_w
    }

    /// Max entry error between requested and achieved covariance (copula only).
    pub fn copula_error(&self) -> Option<f64> {
        self.copula_error
    }

    /// Draw the K weights of one bin into `out`.
    fn draw_bin(&self, rng: &mut ChaCha8Rng, out: &mut [f64]) -> Result<()> {
        match &self.sampler {
            Sampler::Linear {
                offset,
                a,
                innovations,
            } => {
                let mut xi = vec![0.0; innovations.len()];
                for _ in 0..MAX_REJECTIONS {
                    for (x, inn) in xi.iter_mut().zip(innovations) {
                        *x = inn.sample(rng);
                    }
                    for (k, o) in out.iter_mut().enumerate() {
                        *o = offset[k] + (0..xi.len()).map(|i| a[(k, i)] * xi[i]).sum::<f64>();
                    }
                    if out.iter().all(|&w| w > 0.0) {
                        return Ok(());
                    }
                }
                Err(Error::Realization(format!(
                    "nonpositive weight in {MAX_REJECTIONS} consecutive draws; reduce the noise level"
                )))
            }
            Sampler::Copula {
                chol,
                marginal,
                rel_var,
            } => {
                let k = out.len();
                let g: Vec<f64> = (0..k).map(|_| StandardNormal.sample(rng)).collect();
                for i in 0..k {
                    let z: f64 = (0..=i).map(|p| chol[(i, p)] * g[p]).sum();
                    out[i] = copula_quantile(*marginal, rel_var[i], z);
                }
                Ok(())
            }
        }
    }

    /// Realize a `K x m` weight matrix.
    pub fn draw_weights(&self, m: usize, rng: &mut ChaCha8Rng) -> Result<DMatrix<f64>> {
        let k = self.k();
        let mut w = DMatrix::zeros(k, m);
        let mut buf = vec![0.0; k];
        for j in 0..m {
            self.draw_bin(rng, &mut buf)?;
            for (i, &b) in buf.iter().enumerate() {
                w[(i, j)] = b;
            }
        }
        Ok(w)
    }
}

fn copula_quantile(marginal: CopulaMarginal, rel_var: f64, z: f64) -> f64 {
    if rel_var == 0.0 {
        return 1.0;
    }
    match marginal {
        CopulaMarginal::LogNormal => {
            let s2 = rel_var.ln_1p();
            (-s2 / 2.0 + s2.sqrt() * z).exp()
        }
        CopulaMarginal::Gamma => {
            let shape = 1.0 / rel_var;
            let p = stats::normal_cdf(z).clamp(1e-300, 1.0 - 1e-16);
            statrs::distribution::Gamma::new(shape, shape)
                .expect("positive shape")
                .inverse_cdf(p)
                .max(f64::MIN_POSITIVE)
        }
    }
}

/// Bivariate Gauss–Hermite evaluation of copula cross moments.
struct CopulaQuadrature {
    marginal: CopulaMarginal,
    rel_var: Vec<f64>,
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

impl CopulaQuadrature {
    fn new(marginal: CopulaMarginal, rel_var: &[f64]) -> Self {
        let (x, w) = stats::gauss_hermite(48);
        let pi = std::f64::consts::PI.sqrt();
        Self {
            marginal,
            rel_var: rel_var.to_vec(),
            nodes: x.iter().map(|x| x * std::f64::consts::SQRT_2).collect(),
            weights: w.iter().map(|w| w / pi).collect(),
        }
    }

    /// `Cov(W_i, W_j)` for unit-mean marginals at latent correlation `rho`.
    fn cross(&self, i: usize, j: usize, rho: f64) -> f64 {
        let (si, sj) = (self.rel_var[i], self.rel_var[j]);
        if si == 0.0 || sj == 0.0 {
            return 0.0;
        }
        if self.marginal == CopulaMarginal::LogNormal {
            return (si.ln_1p().sqrt() * sj.ln_1p().sqrt() * rho).exp_m1();
        }
        let c = (1.0 - rho * rho).max(0.0).sqrt();
        let mut acc = stats::NeumaierSum::new();
        for (a, &za) in self.nodes.iter().enumerate() {
            let qa = copula_quantile(self.marginal, si, za);
            for (b, &zb) in self.nodes.iter().enumerate() {
                let qb = copula_quantile(self.marginal, sj, rho * za + c * zb);
                acc.add(self.weights[a] * self.weights[b] * qa * qb);
            }
        }
        acc.value() - 1.0
    }

    fn solve_rho(&self, i: usize, j: usize, target: f64) -> f64 {
        let (si, sj) = (self.rel_var[i], self.rel_var[j]);
        if si == 0.0 || sj == 0.0 {
            return 0.0;
        }
        if self.marginal == CopulaMarginal::LogNormal {
            let rho = target.ln_1p() / (si.ln_1p().sqrt() * sj.ln_1p().sqrt());
            return if rho.is_nan() { -1.0 } else { rho.clamp(-1.0, 1.0) };
        }
        let (mut lo, mut hi) = (-1.0, 1.0);
        if target <= self.cross(i, j, lo) {
            return lo;
        }
        if target >= self.cross(i, j, hi) {
            return hi;
        }
        for _ in 0..60 {
            let mid = 0.5 * (lo + hi);
            if self.cross(i, j, mid) < target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }
}

/// Clip negative eigenvalues and rescale to unit diagonal.
fn nearest_correlation(r: &DMatrix<f64>) -> DMatrix<f64> {
    let (vals, vecs) = linalg::sorted_eigen(r);
    if vals[0] >= 0.0 {
        return r.clone();
    }
    let clipped = DVector::from_iterator(vals.len(), vals.iter().map(|&v| v.max(0.0)));
    let p = &vecs * DMatrix::from_diagonal(&clipped) * vecs.transpose();
    let d: Vec<f64> = (0..p.nrows()).map(|i| p[(i, i)].max(1e-300).sqrt()).collect();
    DMatrix::from_fn(p.nrows(), p.ncols(), |i, j| p[(i, j)] / (d[i] * d[j]))
}

/// Realized weights for K source datasets and, optionally, a perturbed target.
#[derive(Debug, Clone)]
pub struct PerturbedWorld {
    /// `K x m` matrix of bin weights.
    pub weights: DMatrix<f64>,
    /// Relative weight covariance of the source rows.
    pub sigma_w: DMatrix<f64>,
    /// Weights of the target row when the target itself is perturbed.
    pub target_weights: Option<DVector<f64>>,
    pub seed: u64,
    pub copula_error: Option<f64>,
}

/// Which distribution of a world to sample from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Population {
    Source(usize),
    Target,
}

impl PerturbedWorld {
    pub fn k(&self) -> usize {
        self.weights.nrows()
    }

    pub fn m(&self) -> usize {
        self.weights.ncols()
    }

    /// Normalized bin probabilities of a population.
    pub fn bin_probabilities(&self, which: Population) -> Vec<f64> {
        let raw: Vec<f64> = match which {
            Population::Source(k) => self.weights.row(k).iter().copied().collect(),
            Population::Target => match &self.target_weights {
                Some(w) => w.iter().copied().collect(),
                None => vec![1.0; self.m()],
            },
        };
        let total = stats::sum(raw.iter().copied());
        raw.into_iter().map(|w| w / total).collect()
    }

    /// Exact mean of `f(U)` under a population, by Gauss–Legendre per bin.
    pub fn population_mean(&self, which: Population, f: impl Fn(f64) -> f64, nodes: usize) -> f64 {
        let probs = self.bin_probabilities(which);
        let (x, w) = stats::gauss_legendre_unit(nodes.max(1));
        let m = self.m() as f64;
        stats::sum(probs.iter().enumerate().map(|(j, p)| {
            p * x
                .iter()
                .zip(&w)
                .map(|(x, w)| w * f((j as f64 + x) / m))
                .sum::<f64>()
        }))
    }
}

/// Realize a world from the scheme's own seed.
pub fn realize_world(scheme: &PerturbationScheme) -> Result<PerturbedWorld> {
    let compiled = scheme.compile()?;
    let mut r = rng::stream(scheme.seed, "world", 0);
    realize_world_with(&compiled, scheme.m, scheme.seed, &mut r)
}

pub fn realize_world_with(
    compiled: &CompiledScheme,
    m: usize,
    seed: u64,
    rng: &mut ChaCha8Rng,
) -> Result<PerturbedWorld> {
    Ok(PerturbedWorld {
        weights: compiled.draw_weights(m, rng)?,
        sigma_w: compiled.sigma_w().clone(),
        target_weights: None,
        seed,
        copula_error: compiled.copula_error(),
    })
}

/// Treat the last of K+1 rows as a perturbed target. The remaining K rows
/// get relative covariance `A Sigma A^T` with `A = [I_K, -1]`.
pub fn shift_target(world: &PerturbedWorld) -> Result<PerturbedWorld> {
    let k1 = world.k();
    if k1 < 2 {
        return Err(Error::invalid(format!(
            "shifting the target needs at least 2 weight rows, got {k1}"
        )));
    }
    let k = k1 - 1;
    let mut a = DMatrix::zeros(k, k1);
    for i in 0..k {
        a[(i, i)] = 1.0;
        a[(i, k)] = -1.0;
    }
    let sigma = &a * &world.sigma_w * a.transpose();
    Ok(PerturbedWorld {
        weights: world.weights.rows(0, k).clone_owned(),
        sigma_w: linalg::symmetrize(&sigma),
        target_weights: Some(world.weights.row(k).transpose()),
        seed: world.seed,
        copula_error: world.copula_error,
    })
}

/// A point of `[0, 1)` held as a 128-bit fixed-point fraction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct UnitDraw(pub u128);

impl UnitDraw {
    /// `(bin + frac / 2^64) / m`, rounded up so the draw never leaves its bin.
    pub fn from_bin(bin: usize, frac: u64, m: usize) -> Self {
        let m = m as u128;
        let n = ((bin as u128) << 64) | frac as u128;
        let hi = n / m;
        let lo = ((n % m) << 64).div_ceil(m);
        UnitDraw((hi << 64) + lo)
    }

    pub fn uniform(rng: &mut ChaCha8Rng) -> Self {
        UnitDraw(rng.random())
    }

    /// Nearest-bucket double in `(0, 1)`.
    pub fn value(self) -> f64 {
        (((self.0 >> 75) as f64) + 0.5) * 2f64.powi(-53)
    }

    pub fn bin(self, m: usize) -> usize {
        let m = m as u128;
        let hi = self.0 >> 64;
        let lo = self.0 & u64::MAX as u128;
        ((hi * m + ((lo * m) >> 64)) >> 64) as usize
    }

    /// Split into `d` draws by de-interleaving binary digits; coordinate `c`
    /// takes digits `c, c + d, c + 2d, ...`. Independent uniform input gives
    /// independent uniform outputs.
    pub fn split(self, d: usize) -> Vec<UnitDraw> {
        let d = d.max(1);
        let per = 128 / d;
        (0..d)
            .map(|c| {
                let mut v: u128 = 0;
                for b in 0..per {
                    let pos = c + b * d;
                    let bit = (self.0 >> (127 - pos)) & 1;
                    v |= bit << (127 - b);
                }
                UnitDraw(v)
            })
            .collect()
    }
}

/// Scalar and multivariate transforms from the unit interval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TransformSpec {
    Identity,
    Normal { mean: f64, sd: f64 },
    Exponential { rate: f64 },
    /// Increasing `(u, value)` knots covering `u = 0` and `u = 1`.
    PiecewiseLinear { knots: Vec<[f64; 2]> },
    /// Independent coordinates through digit interleaving.
    Paired { components: Vec<TransformSpec> },
    /// Dependent coordinates as expressions of `u`.
    Expr { columns: Vec<ExprColumn> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExprColumn {
    pub name: String,
    pub expr: String,
}

impl TransformSpec {
    fn validate_scalar(&self) -> Result<()> {
        match self {
            TransformSpec::Identity => Ok(()),
            TransformSpec::Normal { sd, .. } if *sd > 0.0 => Ok(()),
            TransformSpec::Exponential { rate } if *rate > 0.0 => Ok(()),
            TransformSpec::PiecewiseLinear { knots } => {
                let ok = knots.len() >= 2
                    && knots[0][0] <= 0.0
                    && knots[knots.len() - 1][0] >= 1.0
                    && knots.windows(2).all(|w| w[1][0] > w[0][0]);
                if ok {
                    Ok(())
                } else {
                    Err(Error::config(
                        "piecewise_linear needs at least two knots with increasing u covering [0, 1]",
                    ))
                }
            }
            TransformSpec::Paired { .. } | TransformSpec::Expr { .. } => Err(Error::config(
                "paired components must be scalar transforms",
            )),
            other => Err(Error::config(format!("invalid transform {other:?}"))),
        }
    }

    fn scalar(&self, u: f64) -> f64 {
        match self {
            TransformSpec::Identity => u,
            TransformSpec::Normal { mean, sd } => mean + sd * stats::normal_quantile(u),
            TransformSpec::Exponential { rate } => -(-u).ln_1p() / rate,
            TransformSpec::PiecewiseLinear { knots } => {
                let i = knots.partition_point(|k| k[0] <= u).clamp(1, knots.len() - 1);
                let (a, b) = (knots[i - 1], knots[i]);
                a[1] + (u - a[0]) / (b[0] - a[0]) * (b[1] - a[1])
            }
            _ => unreachable!("validated scalar transform"),
        }
    }
}

type CustomMap = Arc<dyn Fn(UnitDraw, &mut [f64]) + Send + Sync>;

#[derive(Clone)]
enum Mapping {
    Scalar(TransformSpec),
    Paired(Vec<TransformSpec>),
    Expr(Vec<Expr>),
    Custom(CustomMap),
}

/// Law of the data row `D = h(U)` with `U` uniform.
#[derive(Clone)]
pub struct TargetDistribution {
    columns: Vec<String>,
    mapping: Mapping,
}

impl std::fmt::Debug for TargetDistribution {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("TargetDistribution")
            .field("columns", &self.columns)
            .finish_non_exhaustive()
    }
}

impl TargetDistribution {
    pub fn identity() -> Self {
        Self {
            columns: vec!["x".into()],
            mapping: Mapping::Scalar(TransformSpec::Identity),
        }
    }

    /// Build from a spec; `names` overrides the default column names.
    pub fn from_spec(spec: &TransformSpec, names: Option<Vec<String>>) -> Result<Self> {
        let (default_names, mapping) = match spec {
            TransformSpec::Paired { components } => {
                if components.is_empty() || components.len() > 4 {
                    return Err(Error::config("paired transform supports 1 to 4 components"));
                }
                for c in components {
                    c.validate_scalar()?;
                }
                (
                    (1..=components.len()).map(|i| format!("x{i}")).collect(),
                    Mapping::Paired(components.clone()),
                )
            }
            TransformSpec::Expr { columns } => {
                if columns.is_empty() {
                    return Err(Error::config("expr transform needs at least one column"));
                }
                let mut exprs = Vec::new();
                for c in columns {
                    let e = Expr::parse(&c.expr)?;
                    if let Some(v) = e.variables().iter().find(|v| *v != "u") {
                        return Err(Error::config(format!(
                            "transform column `{}` reads `{v}`; only `u` is available",
                            c.name
                        )));
                    }
                    exprs.push(e);
                }
                (
                    columns.iter().map(|c| c.name.clone()).collect(),
                    Mapping::Expr(exprs),
                )
            }
            scalar => {
                scalar.validate_scalar()?;
                (vec!["x".to_string()], Mapping::Scalar(scalar.clone()))
            }
        };
        let columns = names.unwrap_or(default_names);
        let dim = match &mapping {
            Mapping::Paired(c) => c.len(),
            Mapping::Expr(e) => e.len(),
            _ => 1,
        };
        if columns.len() != dim {
            return Err(Error::config(format!(
                "transform produces {dim} columns but {} names were given",
                columns.len()
            )));
        }
        Ok(Self { columns, mapping })
    }

    /// A user map writing one value per column.
    pub fn custom(
        columns: Vec<String>,
        f: impl Fn(UnitDraw, &mut [f64]) + Send + Sync + 'static,
    ) -> Self {
        Self {
            columns,
            mapping: Mapping::Custom(Arc::new(f)),
        }
    }

    pub fn columns(&self) -> &[String] {
        &self.columns
    }

    pub fn dim(&self) -> usize {
        self.columns.len()
    }

    pub fn apply(&self, u: UnitDraw, out: &mut [f64]) -> Result<()> {
        match &self.mapping {
            Mapping::Scalar(s) => out[0] = s.scalar(u.value()),
            Mapping::Paired(c) => {
                for ((o, s), part) in out.iter_mut().zip(c).zip(u.split(c.len())) {
                    *o = s.scalar(part.value());
                }
            }
            Mapping::Expr(e) => {
                let v = [u.value()];
                for (o, e) in out.iter_mut().zip(e) {
                    *o = e.eval(&v)?;
                }
            }
            Mapping::Custom(f) => f(u, out),
        }
        Ok(())
    }

    fn table(&self, name: String, draws: impl Iterator<Item = UnitDraw>, n: usize) -> Result<Table> {
        let d = self.dim();
        let mut cols = vec![Vec::with_capacity(n); d];
        let mut buf = vec![0.0; d];
        for u in draws {
            self.apply(u, &mut buf)?;
            for (c, &b) in cols.iter_mut().zip(&buf) {
                c.push(b);
            }
        }
        let mut t = Table::new(name);
        for (name, c) in self.columns.iter().zip(cols) {
            t.push(name.clone(), Column::Numeric(c))?;
        }
        Ok(t)
    }
}

fn cumulative(probs: &[f64]) -> Vec<f64> {
    let mut acc = 0.0;
    probs
        .iter()
        .map(|p| {
            acc += p;
            acc
        })
        .collect()
}

/// Draw a bin index from cumulative probabilities.
fn draw_bin(cum: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let total = cum[cum.len() - 1];
    let x = rng.random::<f64>() * total;
    cum.partition_point(|&c| c <= x).min(cum.len() - 1)
}

/// Draw `n` unit points from a population of the world.
pub fn sample_units(
    world: &PerturbedWorld,
    which: Population,
    n: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<UnitDraw> {
    let m = world.m();
    if which == Population::Target && world.target_weights.is_none() {
        return (0..n).map(|_| UnitDraw::uniform(rng)).collect();
    }
    let cum = cumulative(&world.bin_probabilities(which));
    (0..n)
        .map(|_| {
            let j = draw_bin(&cum, rng);
            UnitDraw::from_bin(j, rng.random(), m)
        })
        .collect()
}

/// `n` rows from source `k` (0-based), seeded by the world seed and `k`.
pub fn sample_dataset(
    world: &PerturbedWorld,
    k: usize,
    n: usize,
    target: &TargetDistribution,
) -> Result<Table> {
    let mut r = rng::stream(world.seed, "dataset", k as u64);
    sample_dataset_with(world, k, n, target, &mut r)
}

pub fn sample_dataset_with(
    world: &PerturbedWorld,
    k: usize,
    n: usize,
    target: &TargetDistribution,
    rng: &mut ChaCha8Rng,
) -> Result<Table> {
    if k >= world.k() {
        return Err(Error::invalid(format!(
            "dataset index {k} out of range for a world with {} rows",
            world.k()
        )));
    }
    if n == 0 {
        return Err(Error::invalid("sample size must be at least 1"));
    }
    let units = sample_units(world, Population::Source(k), n, rng);
    target.table(format!("source{}", k + 1), units.into_iter(), n)
}

/// `n` rows from the target population (unperturbed unless shifted).
pub fn sample_target(
    world: &PerturbedWorld,
    n: usize,
    target: &TargetDistribution,
    rng: &mut ChaCha8Rng,
) -> Result<Table> {
    let units = sample_units(world, Population::Target, n, rng);
    target.table("target".into(), units.into_iter(), n)
}

/// Multinomial bin counts for `n` draws, by sequential binomials.
pub fn sample_bin_counts(probs: &[f64], n: u64, rng: &mut ChaCha8Rng) -> Vec<u64> {
    let mut out = vec![0u64; probs.len()];
    let mut left = n;
    let mut mass = stats::sum(probs.iter().copied());
    for (j, &p) in probs.iter().enumerate() {
        if left == 0 {
            break;
        }
        if j + 1 == probs.len() {
            out[j] = left;
            break;
        }
        let q = if mass > 0.0 { (p / mass).clamp(0.0, 1.0) } else { 1.0 };
        let c = if q >= 1.0 {
            left
        } else if q <= 0.0 {
            0
        } else {
            Binomial::new(left, q).expect("valid binomial").sample(rng)
        };
        out[j] = c;
        left -= c;
        mass -= p;
    }
    out
}

/// Sum of `count` uniforms on bin `j` of `m` mapped through the identity.
pub fn bin_uniform_sum(j: usize, count: u64, m: usize, rng: &mut ChaCha8Rng) -> f64 {
    let c = count as f64;
    let base = j as f64 / m as f64;
    let within: f64 = if count <= 32 {
        (0..count).map(|_| rng.random::<f64>()).sum()
    } else {
        // Irwin–Hall is normal to high accuracy at these counts.
        let z: f64 = Normal::new(0.0, 1.0).expect("unit normal").sample(rng);
        c / 2.0 + (c / 12.0).sqrt() * z
    };
    c * base + within / m as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn world_from(weights: &[&[f64]]) -> PerturbedWorld {
        let k = weights.len();
        let m = weights[0].len();
        PerturbedWorld {
            weights: DMatrix::from_fn(k, m, |i, j| weights[i][j]),
            sigma_w: DMatrix::zeros(k, k),
            target_weights: None,
            seed: 1,
            copula_error: None,
        }
    }

    #[test]
    fn constant_weights_have_zero_covariance() {
        let s = PerturbationScheme::new(
            10,
            WeightScheme::independent(WeightLaw::Constant { value: 1.0 }, 3),
            0,
        );
        let w = realize_world(&s).unwrap();
        assert_eq!(w.sigma_w, DMatrix::zeros(3, 3));
        assert!(w.weights.iter().all(|&x| x == 1.0));
    }

    #[test]
    fn lognormal_relative_variance() {
        let s = PerturbationScheme::new(
            10,
            WeightScheme::independent(WeightLaw::lognormal(0.25), 2),
            0,
        );
        let c = s.compile().unwrap();
        assert_relative_eq!(c.sigma_w()[(0, 0)], 0.25f64.exp() - 1.0, epsilon = 1e-14);
        assert_relative_eq!(c.sigma_w()[(0, 0)], 0.2840, epsilon = 5e-5);
        assert_eq!(c.sigma_w()[(0, 1)], 0.0);
    }

    #[test]
    fn mixture_cross_covariance_by_bilinearity() {
        let law = WeightLaw::lognormal(0.25);
        let s = WeightScheme::Mixture {
            bases: vec![law.clone(), law.clone()],
            mixed: vec![MixedRow {
                coefficients: vec![0.7, 0.3],
                noise_sd: 0.05,
            }],
        };
        let c = CompiledScheme::new(&s).unwrap();
        let sw = c.sigma_w();
        let e1 = law.mean();
        let e3 = 0.7 * e1 + 0.3 * e1;
        assert_relative_eq!(sw[(0, 2)], 0.7 * sw[(0, 0)] * e1 / e3, epsilon = 1e-12);
    }

    #[test]
    fn ar_time_covariance_recursion() {
        let s = WeightScheme::ArTime {
            k: 3,
            initial: WeightLaw::Gamma { shape: 4.0, scale: 0.25 },
            coefficients: vec![0.5],
            innovation_sd: 0.1,
            intercept: 0.5,
        };
        let c = CompiledScheme::new(&s).unwrap();
        // Oracle: direct recursion on raw covariances.
        let v1 = 4.0 * 0.0625;
        let v2 = 0.25 * v1 + 0.01;
        let c12 = 0.5 * v1;
        let c13 = 0.5 * c12;
        let v3 = 0.25 * v2 + 0.01;
        let means = [1.0, 1.0, 1.0];
        assert_relative_eq!(c.means()[1], means[1], epsilon = 1e-14);
        assert_relative_eq!(c.sigma_w()[(1, 1)], v2, epsilon = 1e-14);
        assert_relative_eq!(c.sigma_w()[(0, 2)], c13, epsilon = 1e-14);
        assert_relative_eq!(c.sigma_w()[(2, 2)], v3, epsilon = 1e-14);
    }

    #[test]
    fn copula_lognormal_hits_target() {
        let target = vec![vec![0.3, 0.15], vec![0.15, 0.5]];
        let c = CompiledScheme::new(&WeightScheme::GaussianCopula {
            sigma_w: target.clone(),
            marginal: CopulaMarginal::LogNormal,
        })
        .unwrap();
        assert!(c.copula_error().unwrap() < 1e-12);
    }

    #[test]
    fn copula_gamma_hits_target() {
        let target = vec![vec![0.5, 0.2], vec![0.2, 0.5]];
        let c = CompiledScheme::new(&WeightScheme::GaussianCopula {
            sigma_w: target,
            marginal: CopulaMarginal::Gamma,
        })
        .unwrap();
        assert!(c.copula_error().unwrap() < 1e-6, "{:?}", c.copula_error());
    }

    #[test]
    fn copula_reports_unreachable_targets() {
        // Perfect negative dependence cannot reach -0.9 with these marginals.
        let c = CompiledScheme::new(&WeightScheme::GaussianCopula {
            sigma_w: vec![vec![0.3, -0.9], vec![-0.9, 0.3]],
            marginal: CopulaMarginal::LogNormal,
        })
        .unwrap();
        assert!(c.copula_error().unwrap() > 0.1);
    }

    #[test]
    fn nonpositive_mixture_weights_error_after_rejections() {
        let s = PerturbationScheme::new(
            5,
            WeightScheme::Mixture {
                bases: vec![WeightLaw::Constant { value: 0.01 }],
                mixed: vec![MixedRow {
                    coefficients: vec![1.0],
                    noise_sd: 100.0,
                }],
            },
            3,
        );
        // Mean is positive, but draws are positive only about half the time per bin.
        let res = realize_world(&s);
        assert!(res.is_ok());
        let s2 = PerturbationScheme::new(
            5,
            WeightScheme::Mixture {
                bases: vec![WeightLaw::Constant { value: 1e-9 }],
                mixed: vec![
                    MixedRow { coefficients: vec![1.0], noise_sd: 1e3 },
                    MixedRow { coefficients: vec![1.0, 0.0], noise_sd: 1e3 },
                    MixedRow { coefficients: vec![1.0, 0.0, 0.0], noise_sd: 1e3 },
                    MixedRow { coefficients: vec![1.0, 0.0, 0.0, 0.0], noise_sd: 1e3 },
                    MixedRow { coefficients: vec![1.0, 0.0, 0.0, 0.0, 0.0], noise_sd: 1e3 },
                    MixedRow { coefficients: vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0], noise_sd: 1e3 },
                    MixedRow { coefficients: vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0], noise_sd: 1e3 },
                    MixedRow { coefficients: vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0], noise_sd: 1e3 },
                    MixedRow { coefficients: vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0], noise_sd: 1e3 },
                    MixedRow { coefficients: vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0], noise_sd: 1e3 },
                ],
            },
            3,
        );
        // Ten rows each positive with probability 1/2: 1/1024 acceptance per try.
        assert!(matches!(realize_world(&s2), Err(Error::Realization(_))));
    }

    #[test]
    fn two_bin_probabilities() {
        let w = world_from(&[&[2.0, 1.0]]);
        let mut r = rng::stream(5, "t", 0);
        let units = sample_units(&w, Population::Source(0), 200_000, &mut r);
        let frac = units.iter().filter(|u| u.value() < 0.5).count() as f64 / 200_000.0;
        // 5 binomial standard errors.
        assert!((frac - 2.0 / 3.0).abs() < 5.0 * (2.0 / 9.0 / 200_000.0f64).sqrt());
    }

    #[test]
    fn uniform_world_samples_are_uniform() {
        let w = world_from(&[&[1.0; 50]]);
        let t = sample_dataset(&w, 0, 100_000, &TargetDistribution::identity()).unwrap();
        let x = t.numeric("x").unwrap();
        let ks = stats::ks_one_sample(x, |u| u.clamp(0.0, 1.0));
        assert!(ks.statistic < 1.628 / (100_000f64).sqrt());
    }

    #[test]
    fn sampling_is_deterministic() {
        let w = world_from(&[&[1.0, 3.0, 2.0]]);
        let tg = TargetDistribution::identity();
        assert_eq!(
            sample_dataset(&w, 0, 100, &tg).unwrap(),
            sample_dataset(&w, 0, 100, &tg).unwrap()
        );
    }

    #[test]
    fn shift_target_examples() {
        let mut w = world_from(&[&[1.0, 1.0], &[1.0, 1.0]]);
        w.sigma_w = DMatrix::identity(2, 2);
        assert_eq!(shift_target(&w).unwrap().sigma_w, DMatrix::from_element(1, 1, 2.0));
        let mut w3 = world_from(&[&[1.0, 1.0], &[1.0, 1.0], &[1.0, 1.0]]);
        w3.sigma_w = DMatrix::identity(3, 3);
        let s = shift_target(&w3).unwrap();
        assert_eq!(s.sigma_w, DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 2.0]));
        w3.sigma_w = DMatrix::from_element(3, 3, 0.7);
        assert!(shift_target(&w3).unwrap().sigma_w.amax() < 1e-15);
        let w1 = world_from(&[&[1.0, 1.0]]);
        assert!(shift_target(&w1).is_err());
    }

    #[test]
    fn unit_draw_bins_are_exact() {
        for m in [2usize, 3, 7, 1000] {
            for j in [0, m / 2, m - 1] {
                for f in [0u64, 1, u64::MAX / 3, u64::MAX] {
                    let u = UnitDraw::from_bin(j, f, m);
                    assert_eq!(u.bin(m), j);
                    let v = u.value();
                    assert!(v >= j as f64 / m as f64 - 1e-15 && v <= (j + 1) as f64 / m as f64 + 1e-15);
                }
            }
        }
    }

    #[test]
    fn split_coordinates_are_uncorrelated_uniforms() {
        let mut r = rng::stream(9, "split", 0);
        let n = 50_000;
        let (mut xs, mut ys) = (Vec::new(), Vec::new());
        for _ in 0..n {
            let p = UnitDraw::uniform(&mut r).split(2);
            xs.push(p[0].value());
            ys.push(p[1].value());
        }
        assert!(stats::pop_covariance(&xs, &ys).abs() < 5.0 / 12.0 / (n as f64).sqrt());
        assert!(stats::ks_one_sample(&ys, |u| u.clamp(0.0, 1.0)).p_value > 0.001);
    }

    #[test]
    fn transforms_reproduce_marginals() {
        let mut r = rng::stream(11, "tf", 0);
        let n = 100_000;
        let normal = TargetDistribution::from_spec(&TransformSpec::Normal { mean: 2.0, sd: 3.0 }, None).unwrap();
        let expo = TargetDistribution::from_spec(&TransformSpec::Exponential { rate: 2.0 }, None).unwrap();
        let mut a = vec![0.0];
        let (mut xs, mut es) = (Vec::new(), Vec::new());
        for _ in 0..n {
            let u = UnitDraw::uniform(&mut r);
            normal.apply(u, &mut a).unwrap();
            xs.push(a[0]);
            expo.apply(u, &mut a).unwrap();
            es.push(a[0]);
        }
        assert!((stats::mean(&xs) - 2.0).abs() < 5.0 * 3.0 / (n as f64).sqrt());
        assert!((stats::pop_variance(&xs) / 9.0 - 1.0).abs() < 0.03);
        assert!((stats::mean(&es) - 0.5).abs() < 5.0 * 0.5 / (n as f64).sqrt());
    }

    #[test]
    fn piecewise_and_expr_transforms() {
        let pl = TargetDistribution::from_spec(
            &TransformSpec::PiecewiseLinear { knots: vec![[0.0, 0.0], [0.5, 1.0], [1.0, 3.0]] },
            None,
        )
        .unwrap();
        let mut out = [0.0];
        pl.apply(UnitDraw(3u128 << 126), &mut out).unwrap();
        assert_relative_eq!(out[0], 2.0, epsilon = 1e-12);
        let ex = TargetDistribution::from_spec(
            &TransformSpec::Expr {
                columns: vec![
                    ExprColumn { name: "x".into(), expr: "u".into() },
                    ExprColumn { name: "y".into(), expr: "2*u + 1".into() },
                ],
            },
            None,
        )
        .unwrap();
        let mut out2 = [0.0; 2];
        ex.apply(UnitDraw(1u128 << 126), &mut out2).unwrap();
        assert_relative_eq!(out2[1], 1.5, epsilon = 1e-12);
        assert!(TargetDistribution::from_spec(
            &TransformSpec::Expr { columns: vec![ExprColumn { name: "x".into(), expr: "v".into() }] },
            None
        )
        .is_err());
    }

    #[test]
    fn bin_counts_sum_to_n() {
        let mut r = rng::stream(2, "bc", 0);
        let p = vec![0.1, 0.2, 0.3, 0.4];
        let c = sample_bin_counts(&p, 1000, &mut r);
        assert_eq!(c.iter().sum::<u64>(), 1000);
    }

    #[test]
    fn population_mean_of_identity() {
        let w = world_from(&[&[2.0, 1.0]]);
        // Bin 0 has mass 2/3 and mean 1/4; bin 1 mass 1/3 and mean 3/4.
        let e = w.population_mean(Population::Source(0), |u| u, 2);
        assert_relative_eq!(e, 2.0 / 3.0 * 0.25 + 1.0 / 3.0 * 0.75, epsilon = 1e-14);
    }

    #[test]
    fn scheme_round_trips_through_json() {
        let s = PerturbationScheme::new(
            200,
            WeightScheme::independent(WeightLaw::lognormal(0.25), 2),
            7,
        );
        let j = serde_json::to_string(&s).unwrap();
        assert_eq!(serde_json::from_str::<PerturbationScheme>(&j).unwrap(), s);
        assert!(serde_json::from_str::<PerturbationScheme>(
            r#"{"m": 2, "weights": {"kind": "independent", "laws": [], "bogus": 1}}"#
        )
        .is_err());
    }
}
