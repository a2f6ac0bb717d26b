//! Convex quadratic programs over the probability simplex:
//! minimize `½ βᵀGβ − cᵀβ` subject to `Σβ = 1`, `β ≥ 0`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg;

#[derive(Debug, Clone)]
pub struct SimplexSolution {
    pub beta: DVector<f64>,
    /// The minimizer is not unique; `beta` is the (approximate) minimum-norm one.
    pub non_unique: bool,
    pub iterations: usize,
    /// Largest violation of the KKT conditions at the returned point.
    pub kkt_violation: f64,
}

const MAX_ITER: usize = 1000;

/// Primal active-set method started from the barycenter.
pub fn solve_simplex_qp(g: &DMatrix<f64>, c: &DVector<f64>) -> Result<SimplexSolution> {
    let k = g.nrows();
    if g.ncols() != k || c.len() != k || k == 0 {
        return Err(Error::invalid("simplex QP dimensions do not match"));
    }
    let g = linalg::symmetrize(g);
    let scale = g.diagonal().amax().max(c.amax()).max(1e-300);
    let mut sol = active_set(&g, c, scale)?;
    if k > 1 && sol_is_degenerate(&g, &sol.beta, scale) {
        let delta = 1e-9 * g.trace().max(scale) / k as f64;
        let reg = &g + DMatrix::identity(k, k) * delta;
        let mut refined = active_set(&reg, c, scale)?;
        refined.non_unique = true;
        refined.kkt_violation = kkt_violation(&g, c, &refined.beta, scale);
        sol = refined;
    }
    Ok(sol)
}

fn active_set(g: &DMatrix<f64>, c: &DVector<f64>, scale: f64) -> Result<SimplexSolution> {
    let k = g.nrows();
    let tol = 1e-12;
    let mut beta = DVector::from_element(k, 1.0 / k as f64);
    let mut fixed = vec![false; k];
    for it in 0..MAX_ITER {
        let free: Vec<usize> = (0..k).filter(|&i| !fixed[i]).collect();
        let target = equality_qp(g, c, &free)?;
        let mut step = DVector::zeros(k);
        for (p, &i) in free.iter().enumerate() {
            step[i] = target[p] - beta[i];
        }
        let mut alpha = 1.0;
        let mut blocking = None;
        for &i in &free {
            if step[i] < 0.0 {
                let a = -beta[i] / step[i];
                if a < alpha {
                    alpha = a;
                    blocking = Some(i);
                }
            }
        }
        if let Some(i) = blocking {
            beta += step * alpha;
            fixed[i] = true;
            for j in 0..k {
                if fixed[j] {
                    beta[j] = 0.0;
                }
            }
            let s: f64 = beta.sum();
            beta /= s;
            continue;
        }
        for (p, &i) in free.iter().enumerate() {
            beta[i] = target[p].max(0.0);
        }
        let s: f64 = beta.sum();
        beta /= s;
        // Stationary on the current face: check multipliers of fixed coordinates.
        let grad = g * &beta - c;
        let nu = -free.iter().map(|&i| grad[i]).sum::<f64>() / free.len() as f64;
        let worst = (0..k)
            .filter(|&i| fixed[i])
            .map(|i| (i, grad[i] + nu))
            .min_by(|a, b| a.1.total_cmp(&b.1));
        match worst {
            Some((i, mu)) if mu < -tol * scale => fixed[i] = false,
            _ => {
                let kkt = kkt_violation(g, c, &beta, scale);
                return Ok(SimplexSolution {
                    beta,
                    non_unique: false,
                    iterations: it,
                    kkt_violation: kkt,
                });
            }
        }
    }
    Err(Error::Numerical("simplex QP did not converge".into()))
}

/// Minimize over the free coordinates with `Σ β_free = 1`, others zero.
fn equality_qp(g: &DMatrix<f64>, c: &DVector<f64>, free: &[usize]) -> Result<DVector<f64>> {
    let f = free.len();
    let mut kkt = DMatrix::zeros(f + 1, f + 1);
    let mut rhs = DVector::zeros(f + 1);
    for (a, &i) in free.iter().enumerate() {
        for (b, &j) in free.iter().enumerate() {
            kkt[(a, b)] = g[(i, j)];
        }
        kkt[(a, f)] = 1.0;
        kkt[(f, a)] = 1.0;
        rhs[a] = c[i];
    }
    rhs[f] = 1.0;
    // The bordered matrix is indefinite, so use a pseudo-inverse solve; on a
    // singular face this returns the minimum-norm stationary point.
    let svd = kkt.svd(true, true);
    let tol = svd.singular_values.max() * (f + 1) as f64 * f64::EPSILON * 16.0;
    let x = svd
        .solve(&rhs, tol)
        .map_err(|e| Error::Numerical(format!("simplex QP subproblem: {e}")))?;
    Ok(x.rows(0, f).clone_owned())
}

fn kkt_violation(g: &DMatrix<f64>, c: &DVector<f64>, beta: &DVector<f64>, scale: f64) -> f64 {
    let grad = g * beta - c;
    let support: Vec<usize> = (0..beta.len()).filter(|&i| beta[i] > 1e-12).collect();
    if support.is_empty() {
        return f64::INFINITY;
    }
    let nu = -support.iter().map(|&i| grad[i]).sum::<f64>() / support.len() as f64;
    let mut worst: f64 = (beta.sum() - 1.0).abs();
    for i in 0..beta.len() {
        let r = grad[i] + nu;
        if support.contains(&i) {
            worst = worst.max(r.abs() / scale);
        } else {
            worst = worst.max((-r).max(0.0) / scale);
        }
        worst = worst.max((-beta[i]).max(0.0));
    }
    worst
}

/// True when `G` is singular along feasible directions within the support,
/// so other minimizers exist.
fn sol_is_degenerate(g: &DMatrix<f64>, beta: &DVector<f64>, scale: f64) -> bool {
    let support: Vec<usize> = (0..beta.len()).filter(|&i| beta[i] > 1e-10).collect();
    let s = support.len();
    if s < 2 {
        return false;
    }
    // Basis of {d : Σ d = 0} on the support.
    let mut z = DMatrix::zeros(s, s - 1);
    for j in 0..s - 1 {
        z[(j, j)] = 1.0;
        z[(s - 1, j)] = -1.0;
    }
    let gs = DMatrix::from_fn(s, s, |a, b| g[(support[a], support[b])]);
    let reduced = z.transpose() * gs * &z;
    let (vals, _) = linalg::sorted_eigen(&reduced);
    vals[0] <= 1e-10 * scale
}
