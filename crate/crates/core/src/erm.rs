//! Weighted empirical risk minimization over several source datasets,
//! influence-function intervals, the asymptotic out-of-distribution excess
//! risk of a weighting, and importance-weight baselines.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::{DatasetCollection, Table};
use crate::dlm::DlmFit;
use crate::error::{Error, Result};
use crate::expr::Expr;
use crate::linalg;
use crate::stats;

pub const MAX_NEWTON_ITER: usize = 200;
const ARMIJO_C: f64 = 1e-4;
const MAX_HALVINGS: usize = 60;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossFamily {
    SquaredErrorLinear,
    Logistic,
    UserSupplied,
}

/// A twice differentiable loss `L(θ, x, y)`.
pub trait Loss: Send + Sync {
    fn family(&self) -> LossFamily;
    fn value(&self, theta: &[f64], x: &[f64], y: f64) -> f64;
    /// `grad += w ∂_θ L`.
    fn add_gradient(&self, theta: &[f64], x: &[f64], y: f64, w: f64, grad: &mut [f64]);
    /// `hess += w ∂²_θ L`.
    fn add_hessian(&self, theta: &[f64], x: &[f64], y: f64, w: f64, hess: &mut DMatrix<f64>);
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn add_outer(x: &[f64], w: f64, hess: &mut DMatrix<f64>) {
    let p = x.len();
    for j in 0..p {
        let wx = w * x[j];
        for i in 0..p {
            hess[(i, j)] += wx * x[i];
        }
    }
}

/// `(y − xᵀθ)²`.
#[derive(Debug, Clone, Copy, Default)]
pub struct SquaredError;

impl Loss for SquaredError {
    fn family(&self) -> LossFamily {
        LossFamily::SquaredErrorLinear
    }

    fn value(&self, theta: &[f64], x: &[f64], y: f64) -> f64 {
        (y - dot(theta, x)).powi(2)
    }

    fn add_gradient(&self, theta: &[f64], x: &[f64], y: f64, w: f64, grad: &mut [f64]) {
        let r = -2.0 * w * (y - dot(theta, x));
        for (g, xi) in grad.iter_mut().zip(x) {
            *g += r * xi;
        }
    }

    fn add_hessian(&self, _theta: &[f64], x: &[f64], _y: f64, w: f64, hess: &mut DMatrix<f64>) {
        add_outer(x, 2.0 * w, hess);
    }
}

/// Negative Bernoulli log-likelihood with `y ∈ {0, 1}`: `log(1 + e^η) − yη`.
#[derive(Debug, Clone, Copy, Default)]
pub struct Logistic;

fn softplus(eta: f64) -> f64 {
    if eta > 0.0 {
        eta + (-eta).exp().ln_1p()
    } else {
        eta.exp().ln_1p()
    }
}

fn sigmoid(eta: f64) -> f64 {
    if eta >= 0.0 {
        1.0 / (1.0 + (-eta).exp())
    } else {
        let e = eta.exp();
        e / (1.0 + e)
    }
}

impl Loss for Logistic {
    fn family(&self) -> LossFamily {
        LossFamily::Logistic
    }

    fn value(&self, theta: &[f64], x: &[f64], y: f64) -> f64 {
        let eta = dot(theta, x);
        softplus(eta) - y * eta
    }

    fn add_gradient(&self, theta: &[f64], x: &[f64], y: f64, w: f64, grad: &mut [f64]) {
        let r = w * (sigmoid(dot(theta, x)) - y);
        for (g, xi) in grad.iter_mut().zip(x) {
            *g += r * xi;
        }
    }

    fn add_hessian(&self, theta: &[f64], x: &[f64], _y: f64, w: f64, hess: &mut DMatrix<f64>) {
        let p = sigmoid(dot(theta, x));
        add_outer(x, w * p * (1.0 - p), hess);
    }
}

/// Loss given as an expression over `theta0, theta1, …`, `x0, x1, …` and `y`.
///
/// Derivatives come from optional expressions (`gradient[j]`,
/// `hessian[i][j]`), otherwise from central differences.
pub struct ExprLoss {
    loss: Bound,
    gradient: Option<Vec<Bound>>,
    hessian: Option<Vec<Vec<Bound>>>,
    dim: usize,
}

struct Bound {
    expr: Expr,
    /// Index of each expression variable into `[θ…, x…, y]`.
    slots: Vec<usize>,
}

impl Bound {
    fn new(source: &str, dim: usize, nx: usize) -> Result<Self> {
        let expr = Expr::parse(source)?;
        let slots = expr
            .variables()
            .iter()
            .map(|v| slot(v, dim, nx))
            .collect::<Result<_>>()?;
        Ok(Self { expr, slots })
    }

    fn eval(&self, theta: &[f64], x: &[f64], y: f64) -> f64 {
        let p = theta.len();
        let vals: Vec<f64> = self
            .slots
            .iter()
            .map(|&s| {
                if s < p {
                    theta[s]
                } else if s < p + x.len() {
                    x[s - p]
                } else {
                    y
                }
            })
            .collect();
        self.expr.eval(&vals).unwrap_or(f64::NAN)
    }
}

fn slot(name: &str, dim: usize, nx: usize) -> Result<usize> {
    let index = |prefix: &str, n: usize| {
        name.strip_prefix(prefix)
            .and_then(|s| s.parse::<usize>().ok())
            .filter(|&i| i < n)
    };
    if name == "y" {
        Ok(dim + nx)
    } else if let Some(i) = index("theta", dim) {
        Ok(i)
    } else if let Some(i) = index("x", nx) {
        Ok(dim + i)
    } else {
        Err(Error::invalid(format!(
            "loss expression reads `{name}`; allowed are theta0..theta{}, x0..x{} and y",
            dim - 1,
            nx.saturating_sub(1)
        )))
    }
}

impl ExprLoss {
    /// `dim` parameters and `nx` features per row.
    pub fn new(
        loss: &str,
        gradient: Option<&[String]>,
        hessian: Option<&[Vec<String>]>,
        dim: usize,
        nx: usize,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("loss needs at least one parameter"));
        }
        let gradient = match gradient {
            Some(g) if g.len() != dim => return Err(Error::invalid("gradient needs one expression per parameter")),
            Some(g) => Some(g.iter().map(|s| Bound::new(s, dim, nx)).collect::<Result<_>>()?),
            None => None,
        };
        let hessian = match hessian {
            Some(h) if h.len() != dim || h.iter().any(|r| r.len() != dim) => {
                return Err(Error::invalid("hessian needs a square array of expressions"))
            }
            Some(h) => Some(
                h.iter()
                    .map(|r| r.iter().map(|s| Bound::new(s, dim, nx)).collect::<Result<_>>())
                    .collect::<Result<_>>()?,
            ),
            None => None,
        };
        Ok(Self {
            loss: Bound::new(loss, dim, nx)?,
            gradient,
            hessian,
            dim,
        })
    }

    fn grad_at(&self, theta: &[f64], x: &[f64], y: f64) -> Vec<f64> {
        let mut g = vec![0.0; self.dim];
        self.add_gradient(theta, x, y, 1.0, &mut g);
        g
    }
}

fn fd_step(v: f64, base: f64) -> f64 {
    base * (1.0 + v.abs())
}

impl Loss for ExprLoss {
    fn family(&self) -> LossFamily {
        LossFamily::UserSupplied
    }

    fn value(&self, theta: &[f64], x: &[f64], y: f64) -> f64 {
        self.loss.eval(theta, x, y)
    }

    fn add_gradient(&self, theta: &[f64], x: &[f64], y: f64, w: f64, grad: &mut [f64]) {
        match &self.gradient {
            Some(g) => {
                for (gj, e) in grad.iter_mut().zip(g) {
                    *gj += w * e.eval(theta, x, y);
                }
            }
            None => {
                let mut t = theta.to_vec();
                for j in 0..self.dim {
                    let h = fd_step(theta[j], 6e-6);
                    t[j] = theta[j] + h;
                    let up = self.value(&t, x, y);
                    t[j] = theta[j] - h;
                    let down = self.value(&t, x, y);
                    t[j] = theta[j];
                    grad[j] += w * (up - down) / (2.0 * h);
                }
            }
        }
    }

    fn add_hessian(&self, theta: &[f64], x: &[f64], y: f64, w: f64, hess: &mut DMatrix<f64>) {
        match &self.hessian {
            Some(h) => {
                for (i, row) in h.iter().enumerate() {
                    for (j, e) in row.iter().enumerate() {
                        hess[(i, j)] += w * e.eval(theta, x, y);
                    }
                }
            }
            None => {
                let mut t = theta.to_vec();
                for j in 0..self.dim {
                    let h = fd_step(theta[j], 1e-4);
                    t[j] = theta[j] + h;
                    let up = self.grad_at(&t, x, y);
                    t[j] = theta[j] - h;
                    let down = self.grad_at(&t, x, y);
                    t[j] = theta[j];
                    for i in 0..self.dim {
                        let v = w * (up[i] - down[i]) / (2.0 * h);
                        // Average the two finite-difference estimates of each entry.
                        hess[(i, j)] += 0.5 * v;
                        hess[(j, i)] += 0.5 * v;
                    }
                }
            }
        }
    }
}

/// Named loss for configs.
pub fn loss_by_name(name: &str) -> Result<Box<dyn Loss>> {
    match name {
        "squared" | "squared_error" | "squared_error_linear" => Ok(Box::new(SquaredError)),
        "logistic" => Ok(Box::new(Logistic)),
        other => Err(Error::config(format!("unknown loss `{other}` (expected squared or logistic)"))),
    }
}

/// Feature map from table columns to a design row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Features {
    pub columns: Vec<String>,
    #[serde(default = "yes")]
    pub intercept: bool,
}

fn yes() -> bool {
    true
}

impl Features {
    pub fn dim(&self) -> usize {
        self.columns.len() + self.intercept as usize
    }

    pub fn names(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.intercept {
            out.push("(Intercept)".to_string());
        }
        out.extend(self.columns.iter().cloned());
        out
    }

    /// `dim x n` matrix with one column per row of the table.
    pub fn design(&self, table: &Table) -> Result<DMatrix<f64>> {
        let n = table.nrows();
        let mut xt = DMatrix::zeros(self.dim(), n);
        let off = self.intercept as usize;
        if self.intercept {
            xt.row_mut(0).fill(1.0);
        }
        for (j, c) in self.columns.iter().enumerate() {
            let v = table.numeric(c)?;
            for (i, &x) in v.iter().enumerate() {
                if !x.is_finite() {
                    return Err(Error::NonFinite {
                        dataset: table.name.clone(),
                        row: i + 1,
                        function: c.clone(),
                    });
                }
                xt[(off + j, i)] = x;
            }
        }
        Ok(xt)
    }
}

/// Design and outcome of one dataset; `xt` holds one sample per column.
#[derive(Debug, Clone, PartialEq)]
pub struct ErmSample {
    pub name: String,
    pub xt: DMatrix<f64>,
    pub y: Vec<f64>,
}

impl ErmSample {
    pub fn new(name: impl Into<String>, xt: DMatrix<f64>, y: Vec<f64>) -> Result<Self> {
        if xt.ncols() != y.len() {
            return Err(Error::invalid("design and outcome lengths differ"));
        }
        Ok(Self { name: name.into(), xt, y })
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn x(&self, i: usize) -> &[f64] {
        let p = self.xt.nrows();
        &self.xt.as_slice()[i * p..(i + 1) * p]
    }
}

/// One sample per source table using the collection's outcome column.
pub fn erm_samples(data: &DatasetCollection, features: &Features) -> Result<Vec<ErmSample>> {
    let outcome = data
        .outcome
        .as_deref()
        .ok_or_else(|| Error::config("an outcome column is required for risk minimization"))?;
    data.sources
        .iter()
        .map(|t| ErmSample::new(t.name.clone(), features.design(t)?, t.numeric(outcome)?.to_vec()))
        .collect()
}

/// Rows with nonnegative or signed per-row coefficients.
struct Objective<'a> {
    loss: &'a dyn Loss,
    samples: &'a [ErmSample],
    /// Coefficient of every row, per sample.
    coef: Vec<Vec<f64>>,
    /// Ridge on all coordinates except `unpenalized`.
    l2: f64,
    unpenalized: Option<usize>,
    dim: usize,
}

impl Objective<'_> {
    fn rows(&self) -> impl Iterator<Item = (&[f64], f64, f64)> {
        self.samples.iter().zip(&self.coef).flat_map(|(s, c)| {
            (0..s.n()).filter(move |&i| c[i] != 0.0).map(move |i| (s.x(i), s.y[i], c[i]))
        })
    }

    fn penalty_mask(&self, j: usize) -> f64 {
        if Some(j) == self.unpenalized { 0.0 } else { 1.0 }
    }

    fn value(&self, theta: &[f64]) -> f64 {
        let mut s = stats::NeumaierSum::new();
        for (x, y, c) in self.rows() {
            s.add(c * self.loss.value(theta, x, y));
        }
        let pen: f64 = (0..self.dim).map(|j| self.penalty_mask(j) * theta[j] * theta[j]).sum();
        s.value() + 0.5 * self.l2 * pen
    }

    fn gradient(&self, theta: &[f64]) -> DVector<f64> {
        let mut g = vec![0.0; self.dim];
        for (x, y, c) in self.rows() {
            self.loss.add_gradient(theta, x, y, c, &mut g);
        }
        for j in 0..self.dim {
            g[j] += self.l2 * self.penalty_mask(j) * theta[j];
        }
        DVector::from_vec(g)
    }

    fn hessian(&self, theta: &[f64]) -> DMatrix<f64> {
        let mut h = DMatrix::zeros(self.dim, self.dim);
        for (x, y, c) in self.rows() {
            self.loss.add_hessian(theta, x, y, c, &mut h);
        }
        for j in 0..self.dim {
            h[(j, j)] += self.l2 * self.penalty_mask(j);
        }
        linalg::symmetrize(&h)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NewtonResult {
    pub theta: DVector<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub gradient_norm: f64,
    /// Objective after each accepted step, starting with the initial point.
    pub objective_trace: Vec<f64>,
}

/// Damped Newton with Armijo backtracking; Levenberg shift when the Hessian
/// is not positive definite.
fn newton(obj: &Objective, start: DVector<f64>) -> NewtonResult {
    let mut theta = start;
    let mut f = obj.value(theta.as_slice());
    let mut trace = vec![f];
    let mut gnorm = f64::INFINITY;
    for it in 0..MAX_NEWTON_ITER {
        let g = obj.gradient(theta.as_slice());
        gnorm = g.norm();
        if gnorm <= 1e-10 * (1.0 + theta.norm()) {
            return NewtonResult { theta, iterations: it, converged: true, gradient_norm: gnorm, objective_trace: trace };
        }
        let h = obj.hessian(theta.as_slice());
        let scale = h.diagonal().amax().max(1e-300);
        let mut shift = 0.0;
        let step = loop {
            let shifted = &h + DMatrix::identity(obj.dim, obj.dim) * shift;
            if let Some(d) = linalg::solve_spd(&shifted, &(-&g)) {
                if d.iter().all(|v| v.is_finite()) {
                    break Some(d);
                }
            }
            shift = if shift == 0.0 { 1e-10 * scale } else { shift * 10.0 };
            if shift > 1e10 * scale {
                break None;
            }
        };
        let Some(d) = step else { break };
        let slope = g.dot(&d);
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..MAX_HALVINGS {
            let cand = &theta + &d * t;
            let fc = obj.value(cand.as_slice());
            if fc.is_finite() && fc <= f + ARMIJO_C * t * slope {
                theta = cand;
                f = fc;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            // No decrease is representable: we are at the optimum to rounding.
            let g = obj.gradient(theta.as_slice());
            gnorm = g.norm();
            let ok = gnorm <= 1e-8 * (1.0 + theta.norm());
            return NewtonResult { theta, iterations: it, converged: ok, gradient_norm: gnorm, objective_trace: trace };
        }
        trace.push(f);
    }
    let converged = gnorm <= 1e-8 * (1.0 + theta.norm());
    NewtonResult { theta, iterations: MAX_NEWTON_ITER, converged, gradient_norm: gnorm, objective_trace: trace }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErmFit {
    pub family: LossFamily,
    pub parameter_names: Vec<String>,
    pub theta_hat: DVector<f64>,
    pub weights_used: DVector<f64>,
    /// `Σ_k β_k Ê^k[∂²L(θ̂)]`.
    pub hessian_hat: DMatrix<f64>,
    /// Pooled donor covariance of `∂L(θ̂)`.
    pub gradient_variance: DMatrix<f64>,
    /// Pooled donor covariance of `−H⁻¹ ∂L(θ̂)`.
    pub influence_variance: DMatrix<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// `‖Σ_k β_k Ê^k[∂L(θ̂)]‖`.
    pub gradient_norm: f64,
    pub objective_trace: Vec<f64>,
}

impl ErmFit {
    pub fn dim(&self) -> usize {
        self.theta_hat.len()
    }
}

/// Minimize `Σ_k β_k Ê^k[L(θ, X, Y)]`.
pub fn fit_erm(samples: &[ErmSample], loss: &dyn Loss, beta: &[f64]) -> Result<ErmFit> {
    if samples.is_empty() || beta.len() != samples.len() {
        return Err(Error::invalid("one weight per source dataset is required"));
    }
    let total: f64 = beta.iter().sum();
    if (total - 1.0).abs() > 1e-8 || beta.iter().any(|b| !b.is_finite()) {
        return Err(Error::invalid(format!("dataset weights must sum to one, got {total}")));
    }
    let coef = samples
        .iter()
        .zip(beta)
        .map(|(s, &b)| vec![b / s.n() as f64; s.n()])
        .collect();
    fit_with_coefficients(samples, loss, coef, DVector::from_column_slice(beta))
}

/// Minimize `Σ_i w_i L(θ, x_i, y_i)` over all source rows with per-row
/// weights (normalized to sum to one).
pub fn fit_erm_sample_weights(samples: &[ErmSample], loss: &dyn Loss, weights: &[Vec<f64>]) -> Result<ErmFit> {
    if weights.len() != samples.len() || weights.iter().zip(samples).any(|(w, s)| w.len() != s.n()) {
        return Err(Error::invalid("one weight per source row is required"));
    }
    let total = stats::sum(weights.iter().flatten().copied());
    if !(total > 0.0) || weights.iter().flatten().any(|w| *w < 0.0 || !w.is_finite()) {
        return Err(Error::invalid("sample weights must be nonnegative with a positive sum"));
    }
    let coef: Vec<Vec<f64>> = weights.iter().map(|w| w.iter().map(|v| v / total).collect()).collect();
    let beta = DVector::from_iterator(coef.len(), coef.iter().map(|c| stats::sum(c.iter().copied())));
    fit_with_coefficients(samples, loss, coef, beta)
}

fn fit_with_coefficients(
    samples: &[ErmSample],
    loss: &dyn Loss,
    coef: Vec<Vec<f64>>,
    beta: DVector<f64>,
) -> Result<ErmFit> {
    let dim = samples[0].xt.nrows();
    if samples.iter().any(|s| s.xt.nrows() != dim) {
        return Err(Error::invalid("all datasets need the same features"));
    }
    let obj = Objective { loss, samples, coef, l2: 0.0, unpenalized: None, dim };
    let res = newton(&obj, DVector::zeros(dim));
    if !res.converged {
        log::warn!(
            "risk minimization stopped after {} iterations with gradient norm {:.3e}",
            res.iterations,
            res.gradient_norm
        );
    }
    let theta = res.theta.as_slice();
    let hessian = obj.hessian(theta);
    let (vals, _) = linalg::sorted_eigen(&hessian);
    let scale = vals.amax();
    if !(scale > 0.0) || vals.iter().map(|v| v.abs()).fold(f64::INFINITY, f64::min) <= 1e-12 * scale {
        return Err(Error::SingularHessian);
    }
    let h_inv = hessian.clone().try_inverse().ok_or(Error::SingularHessian)?;
    let grads = pooled_gradients(samples, loss, theta);
    let (_, gvar) = crate::moments::column_covariance(&grads);
    let infl = linalg::symmetrize(&(&h_inv * &gvar * &h_inv));
    Ok(ErmFit {
        family: loss.family(),
        parameter_names: (0..dim).map(|j| format!("theta{j}")).collect(),
        theta_hat: res.theta.clone(),
        weights_used: beta,
        hessian_hat: hessian,
        gradient_variance: gvar,
        influence_variance: infl,
        iterations: res.iterations,
        converged: res.converged,
        gradient_norm: obj.gradient(theta).norm(),
        objective_trace: res.objective_trace,
    })
}

/// `n x p` matrix of per-row gradients over all source rows.
fn pooled_gradients(samples: &[ErmSample], loss: &dyn Loss, theta: &[f64]) -> DMatrix<f64> {
    let n: usize = samples.iter().map(|s| s.n()).sum();
    let p = theta.len();
    let mut out = DMatrix::zeros(n, p);
    let mut r = 0;
    let mut g = vec![0.0; p];
    for s in samples {
        for i in 0..s.n() {
            g.iter_mut().for_each(|v| *v = 0.0);
            loss.add_gradient(theta, s.x(i), s.y[i], 1.0, &mut g);
            for j in 0..p {
                out[(r, j)] = g[j];
            }
            r += 1;
        }
    }
    out
}

/// How the distributional scale of the excess risk is obtained.
#[derive(Debug, Clone, PartialEq)]
pub enum RiskScale<'a> {
    /// Known weight covariance and number of bins.
    Simulation { sigma_w: &'a DMatrix<f64>, m: usize },
    /// Mean squared residual of a weight fit stands in for `βᵀΣβ/m`.
    Observational { shift_scale: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OodRisk {
    /// `βᵀΣβ`; NaN in observational mode.
    pub quadratic_form: f64,
    /// `Tr(H⁻¹ V)`.
    pub trace_term: f64,
    /// `βᵀΣβ · Tr(H⁻¹ V)`; NaN in observational mode.
    pub scale_free: f64,
    /// The excess-risk expression times `1/m` (or the residual scale).
    pub mean_excess_risk: f64,
    /// Mean of the second-order expansion `½ (θ̂−θ)ᵀH(θ̂−θ)`, half the value above.
    pub second_order_mean: f64,
    pub mode: String,
}

/// Asymptotic mean excess risk of weighting `beta`.
pub fn ood_risk(fit: &ErmFit, scale: RiskScale<'_>, beta: &[f64]) -> Result<OodRisk> {
    let h_inv = fit.hessian_hat.clone().try_inverse().ok_or(Error::SingularHessian)?;
    let trace_term = (h_inv * &fit.gradient_variance).trace();
    let (q, value, mode) = match scale {
        RiskScale::Simulation { sigma_w, m } => {
            if sigma_w.nrows() != beta.len() || sigma_w.ncols() != beta.len() {
                return Err(Error::invalid("weight covariance does not match the number of datasets"));
            }
            if m == 0 {
                return Err(Error::invalid("m must be positive"));
            }
            let b = DVector::from_column_slice(beta);
            let q = (b.transpose() * sigma_w * &b)[(0, 0)];
            (q, q * trace_term / m as f64, "simulation")
        }
        RiskScale::Observational { shift_scale } => (f64::NAN, shift_scale * trace_term, "observational"),
    };
    Ok(OodRisk {
        quadratic_form: q,
        trace_term,
        scale_free: q * trace_term,
        mean_excess_risk: value,
        second_order_mean: 0.5 * value,
        mode: mode.into(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterCi {
    pub name: String,
    pub estimate: f64,
    pub half_width: f64,
    pub lower: f64,
    pub upper: f64,
}

/// `θ̂_j ± z · sqrt(Var̂(φ̂_j)) · sqrt(mean squared weight-fit residual)`.
pub fn erm_ci(fit: &ErmFit, dlm: &DlmFit, level: f64) -> Result<Vec<ParameterCi>> {
    erm_ci_with_scale(fit, dlm.shift_scale(), level)
}

pub fn erm_ci_with_scale(fit: &ErmFit, shift_scale: f64, level: f64) -> Result<Vec<ParameterCi>> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::Level(level));
    }
    let z = stats::z_for_level(level);
    Ok((0..fit.dim())
        .map(|j| {
            let hw = z * fit.influence_variance[(j, j)].max(0.0).sqrt() * shift_scale.max(0.0).sqrt();
            let est = fit.theta_hat[j];
            ParameterCi {
                name: fit.parameter_names[j].clone(),
                estimate: est,
                half_width: hw,
                lower: est - hw,
                upper: est + hw,
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ImportanceOptions {
    /// Ridge on the classifier slopes.
    pub l2: f64,
    /// Weights above this quantile are clipped to it; `None` disables clipping.
    pub clip_quantile: Option<f64>,
}

impl Default for ImportanceOptions {
    fn default() -> Self {
        Self { l2: 0.0, clip_quantile: Some(0.99) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceWeights {
    /// One weight per input row.
    pub weights: Vec<f64>,
    pub raw_max: f64,
    pub clip_threshold: Option<f64>,
    pub clipped: usize,
    pub classifier: DVector<f64>,
}

/// `P(A=1|x) P(A=0) / (P(A=0|x) P(A=1))`.
pub fn odds_weight(p1_given_x: f64, p1: f64) -> f64 {
    p1_given_x / (1.0 - p1_given_x) * (1.0 - p1) / p1
}

/// Density-ratio weights from a logistic classifier of `A` on `x` (with
/// intercept). Rows of `x` are samples.
pub fn importance_weights(x: &DMatrix<f64>, a: &[bool], options: &ImportanceOptions) -> Result<ImportanceWeights> {
    let n = x.nrows();
    if a.len() != n || n == 0 {
        return Err(Error::invalid("one label per row is required"));
    }
    let n1 = a.iter().filter(|&&v| v).count();
    if n1 == 0 || n1 == n {
        return Err(Error::invalid("both label values must occur"));
    }
    let p = x.ncols() + 1;
    let mut xt = DMatrix::zeros(p, n);
    xt.row_mut(0).fill(1.0);
    xt.view_mut((1, 0), (p - 1, n)).copy_from(&x.transpose());
    let y: Vec<f64> = a.iter().map(|&v| v as u8 as f64).collect();
    let sample = [ErmSample::new("pooled", xt, y)?];
    let obj = Objective {
        loss: &Logistic,
        samples: &sample,
        coef: vec![vec![1.0 / n as f64; n]],
        l2: options.l2,
        unpenalized: Some(0),
        dim: p,
    };
    let res = newton(&obj, DVector::zeros(p));
    let eta: Vec<f64> = (0..n).map(|i| dot(res.theta.as_slice(), sample[0].x(i))).collect();
    if options.l2 == 0.0 {
        let separated = eta.iter().zip(a).all(|(&e, &l)| if l { e > 0.0 } else { e < 0.0 });
        if separated || !res.converged {
            return Err(Error::PerfectSeparation);
        }
    }
    let p1 = n1 as f64 / n as f64;
    let mut weights: Vec<f64> = eta.iter().map(|&e| (e + ((1.0 - p1) / p1).ln()).exp()).collect();
    let raw_max = weights.iter().cloned().fold(0.0, f64::max);
    let mut threshold = None;
    let mut clipped = 0;
    if let Some(q) = options.clip_quantile {
        if !(q > 0.0 && q <= 1.0) {
            return Err(Error::config(format!("clip quantile must be in (0, 1], got {q}")));
        }
        let t = stats::quantile_sorted(&stats::sorted_copy(&weights), q);
        for w in weights.iter_mut() {
            if *w > t {
                *w = t;
                clipped += 1;
            }
        }
        if clipped > 0 {
            log::info!("clipped {clipped} importance weights at {t:.4e} (max was {raw_max:.4e})");
        }
        threshold = Some(t);
    }
    Ok(ImportanceWeights {
        weights,
        raw_max,
        clip_threshold: threshold,
        clipped,
        classifier: res.theta,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn linear_sample(name: &str, n: usize, theta: &[f64], noise: f64, seed: u64) -> ErmSample {
        let mut rng = crate::rng::stream(seed, "erm-test", 0);
        let p = theta.len();
        let xt = DMatrix::from_fn(p, n, |r, _| if r == 0 { 1.0 } else { StandardNormal.sample(&mut rng) });
        let y = (0..n)
            .map(|i| {
                let e: f64 = StandardNormal.sample(&mut rng);
                dot(theta, xt.column(i).as_slice()) + noise * e
            })
            .collect();
        ErmSample::new(name, xt, y).unwrap()
    }

    fn normal_equations(s: &ErmSample) -> (DMatrix<f64>, DVector<f64>) {
        let n = s.n() as f64;
        let a = &s.xt * s.xt.transpose() / n;
        let b = &s.xt * DVector::from_column_slice(&s.y) / n;
        (a, b)
    }

    #[test]
    fn derivatives_match_finite_differences() {
        let mut rng = crate::rng::stream(9, "erm-fd", 0);
        let user = ExprLoss::new("(y - theta0 * x0 - theta1 * x1)^2 + 0.1 * theta0^4", None, None, 2, 2).unwrap();
        let losses: [&dyn Loss; 3] = [&SquaredError, &Logistic, &user];
        for loss in losses {
            for _ in 0..10 {
                let theta: Vec<f64> = (0..2).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
                let x: Vec<f64> = (0..2).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
                let y = if rng.random::<bool>() { 1.0 } else { 0.0 };
                let mut g = vec![0.0; 2];
                loss.add_gradient(&theta, &x, y, 1.0, &mut g);
                let mut h = DMatrix::zeros(2, 2);
                loss.add_hessian(&theta, &x, y, 1.0, &mut h);
                for j in 0..2 {
                    let eps = 1e-5;
                    let mut tp = theta.clone();
                    tp[j] += eps;
                    let mut tm = theta.clone();
                    tm[j] -= eps;
                    let fd = (loss.value(&tp, &x, y) - loss.value(&tm, &x, y)) / (2.0 * eps);
                    assert!((fd - g[j]).abs() <= 1e-5 * (1.0 + g[j].abs()), "{fd} vs {}", g[j]);
                    let (mut gp, mut gm) = (vec![0.0; 2], vec![0.0; 2]);
                    loss.add_gradient(&tp, &x, y, 1.0, &mut gp);
                    loss.add_gradient(&tm, &x, y, 1.0, &mut gm);
                    for i in 0..2 {
                        let fd = (gp[i] - gm[i]) / (2.0 * eps);
                        assert!((fd - h[(i, j)]).abs() <= 1e-4 * (1.0 + h[(i, j)].abs()), "{fd} vs {}", h[(i, j)]);
                    }
                }
            }
        }
    }

    #[test]
    fn single_source_is_least_squares() {
        let s = linear_sample("a", 200, &[1.0, 2.0, -0.5], 0.3, 1);
        let fit = fit_erm(std::slice::from_ref(&s), &SquaredError, &[1.0]).unwrap();
        let (a, b) = normal_equations(&s);
        let ols = a.lu().solve(&b).unwrap();
        assert!((&fit.theta_hat - ols).amax() < 1e-10);
        assert!(fit.converged);
        assert!(fit.gradient_norm <= 1e-8 * (1.0 + fit.theta_hat.norm()));
    }

    #[test]
    fn weighted_normal_equations() {
        let s1 = linear_sample("a", 150, &[1.0, 2.0], 0.5, 2);
        let s2 = linear_sample("b", 300, &[-1.0, 0.5], 0.5, 3);
        let beta = [0.3, 0.7];
        let fit = fit_erm(&[s1.clone(), s2.clone()], &SquaredError, &beta).unwrap();
        let (a1, b1) = normal_equations(&s1);
        let (a2, b2) = normal_equations(&s2);
        let theta = (a1 * beta[0] + a2 * beta[1]).lu().solve(&(b1 * beta[0] + b2 * beta[1])).unwrap();
        assert!((&fit.theta_hat - theta).amax() < 1e-10);
    }

    #[test]
    fn identical_sources_and_pooling() {
        let s = linear_sample("a", 100, &[0.5, 1.0], 1.0, 4);
        let single = fit_erm(std::slice::from_ref(&s), &Logistic, &[1.0]);
        let y01: Vec<f64> = s.y.iter().map(|&v| (v > 0.5) as u8 as f64).collect();
        let s = ErmSample::new("a", s.xt.clone(), y01).unwrap();
        drop(single);
        let one = fit_erm(std::slice::from_ref(&s), &Logistic, &[1.0]).unwrap();
        let two = fit_erm(&[s.clone(), s.clone()], &Logistic, &[0.25, 0.75]).unwrap();
        let three = fit_erm(&[s.clone(), s.clone(), s.clone()], &Logistic, &[1.0 / 3.0; 3]).unwrap();
        assert!((&one.theta_hat - &two.theta_hat).amax() < 1e-8);
        assert!((&one.theta_hat - &three.theta_hat).amax() < 1e-8);
        assert!(one.objective_trace.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn user_loss_matches_builtin() {
        let s = linear_sample("a", 100, &[0.5, 1.0], 1.0, 5);
        let user = ExprLoss::new("(y - theta0 * x0 - theta1 * x1)^2", None, None, 2, 2).unwrap();
        let a = fit_erm(std::slice::from_ref(&s), &user, &[1.0]).unwrap();
        let b = fit_erm(std::slice::from_ref(&s), &SquaredError, &[1.0]).unwrap();
        assert!((&a.theta_hat - &b.theta_hat).amax() < 1e-6);
        assert!(ExprLoss::new("z * theta0", None, None, 1, 1).is_err());
    }

    #[test]
    fn singular_hessian_is_reported() {
        let xt = DMatrix::from_row_slice(2, 3, &[1.0, 1.0, 1.0, 2.0, 2.0, 2.0]);
        let s = ErmSample::new("a", xt, vec![1.0, 2.0, 3.0]).unwrap();
        assert!(matches!(fit_erm(&[s], &SquaredError, &[1.0]), Err(Error::SingularHessian)));
    }

    #[test]
    fn intercept_only_interval() {
        let mk = |ys: &[f64]| ErmSample::new("s", DMatrix::from_element(1, ys.len(), 1.0), ys.to_vec()).unwrap();
        let s1 = mk(&[1.0, 2.0, 3.0]);
        let s2 = mk(&[5.0, 7.0]);
        let beta = [0.4, 0.6];
        let fit = fit_erm(&[s1, s2], &SquaredError, &beta).unwrap();
        assert_relative_eq!(fit.theta_hat[0], 0.4 * 2.0 + 0.6 * 6.0, epsilon = 1e-12);
        // φ = y − θ (the factor 2 cancels between gradient and Hessian).
        let pooled = [1.0, 2.0, 3.0, 5.0, 7.0];
        let var = stats::pop_variance(&pooled);
        assert_relative_eq!(fit.influence_variance[(0, 0)], var, max_relative = 1e-10);
        let ci = erm_ci_with_scale(&fit, 0.01, 0.95).unwrap();
        assert_relative_eq!(ci[0].half_width, 1.959963984540054 * var.sqrt() * 0.1, max_relative = 1e-9);
        assert_eq!(erm_ci_with_scale(&fit, 0.0, 0.95).unwrap()[0].half_width, 0.0);
        assert!(matches!(erm_ci_with_scale(&fit, 0.0, 0.0), Err(Error::Level(_))));
    }

    #[test]
    fn ood_risk_one_hot_and_optimal() {
        let s = linear_sample("a", 300, &[1.0, 1.0], 1.0, 6);
        let fit = fit_erm(std::slice::from_ref(&s), &SquaredError, &[1.0]).unwrap();
        let id = DMatrix::identity(2, 2);
        let r = ood_risk(&fit, RiskScale::Simulation { sigma_w: &id, m: 1 }, &[1.0, 0.0]).unwrap();
        assert_relative_eq!(r.quadratic_form, 1.0);
        assert_relative_eq!(r.mean_excess_risk, r.trace_term);
        assert_relative_eq!(r.second_order_mean, 0.5 * r.trace_term);
        let g = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 4.0]));
        let best = crate::qp::solve_simplex_qp(&(&g * 2.0), &DVector::zeros(2)).unwrap();
        let r = ood_risk(&fit, RiskScale::Simulation { sigma_w: &g, m: 1 }, best.beta.as_slice()).unwrap();
        assert_relative_eq!(r.quadratic_form, 0.8, epsilon = 1e-12);
    }

    #[test]
    fn odds_weight_arithmetic() {
        assert_relative_eq!(odds_weight(2.0 / 3.0, 0.5), 2.0, epsilon = 1e-12);
    }

    #[test]
    fn importance_weights_same_distribution() {
        let mut rng = crate::rng::stream(7, "iw", 0);
        let n = 10_000;
        let x = DMatrix::from_fn(n, 1, |_, _| StandardNormal.sample(&mut rng));
        let a: Vec<bool> = (0..n).map(|i| i % 2 == 0).collect();
        let w = importance_weights(&x, &a, &ImportanceOptions::default()).unwrap();
        let med = stats::quantile_sorted(&stats::sorted_copy(&w.weights), 0.5);
        assert!((0.9..=1.1).contains(&med), "{med}");
        assert!(w.weights.iter().all(|&v| v > 0.0));
    }

    #[test]
    fn separation_and_clipping() {
        let n = 200;
        let x = DMatrix::from_fn(n, 1, |i, _| if i < n / 2 { i as f64 / n as f64 } else { 1.0 + i as f64 / n as f64 });
        let a: Vec<bool> = (0..n).map(|i| i >= n / 2).collect();
        assert!(matches!(
            importance_weights(&x, &a, &ImportanceOptions::default()),
            Err(Error::PerfectSeparation)
        ));
        let w = importance_weights(&x, &a, &ImportanceOptions { l2: 1e-3, clip_quantile: Some(0.99) }).unwrap();
        assert!(w.clipped > 0);
        let q1 = stats::quantile_sorted(&stats::sorted_copy(&w.weights), 0.25);
        assert!(w.raw_max > 100.0 * q1);
    }
}
