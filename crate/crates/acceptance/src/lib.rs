//! Independent oracles for the acceptance suite. Nothing here calls the
//! estimators it is used to check.

use driftlab_core::moments::MomentMatrix;
use driftlab_core::rng;
use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal, Uniform};

/// `count` moment problems with K in 2..=8 sources and L in K..=200
/// functions, all entries standard normal.
pub fn random_problems(count: usize, seed: u64) -> Vec<MomentMatrix> {
    let mut r = rng::stream(seed, "acceptance_identities", 0);
    let kd = Uniform::new_inclusive(2usize, 8).unwrap();
    (0..count)
        .map(|_| {
            let k = kd.sample(&mut r);
            let l = Uniform::new_inclusive(k, 200).unwrap().sample(&mut r);
            let phi = DMatrix::from_fn(k + 1, l, |_, _| StandardNormal.sample(&mut r));
            MomentMatrix::from_parts(phi, DMatrix::identity(l, l), vec![1000; k], 1000).unwrap()
        })
        .collect()
}

/// Sum-to-one least squares solved on the differences from the last
/// source by SVD; returns all K weights and the residual sum of squares.
pub fn reparametrized_least_squares(m: &MomentMatrix) -> (DVector<f64>, f64) {
    let (k, l) = (m.k(), m.l());
    let row = |d: usize, j: usize| m.phi_hat[(d, j)];
    let x = DMatrix::from_fn(l, k - 1, |j, c| row(c + 1, j) - row(k, j));
    let y = DVector::from_fn(l, |j, _| row(0, j) - row(k, j));
    let free = x.clone().svd(true, true).solve(&y, 1e-14).unwrap();
    let mut beta = DVector::zeros(k);
    beta.rows_mut(0, k - 1).copy_from(&free);
    beta[k - 1] = 1.0 - free.sum();
    let rss = (y - x * free).norm_squared();
    (beta, rss)
}

/// `1 − (1 − R²)(L)/(L − K + 1)` written out from the degrees of freedom of
/// a K-weight fit with one linear constraint.
pub fn adjusted_r_squared(r2: f64, l: usize, k: usize) -> f64 {
    let residual_df = (l - (k - 1)) as f64;
    1.0 - (1.0 - r2) * l as f64 / residual_df
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn oracle_recovers_an_exact_mixture() {
        // target = 0.3·s1 + 0.7·s2 exactly
        let s1 = [1.0, 0.0, 2.0, -1.0];
        let s2 = [0.0, 1.0, -1.0, 3.0];
        let phi = DMatrix::from_fn(3, 4, |r, c| match r {
            0 => 0.3 * s1[c] + 0.7 * s2[c],
            1 => s1[c],
            _ => s2[c],
        });
        let m = MomentMatrix::from_parts(phi, DMatrix::identity(4, 4), vec![10, 10], 10).unwrap();
        let (beta, rss) = reparametrized_least_squares(&m);
        assert!((beta[0] - 0.3).abs() < 1e-12 && (beta[1] - 0.7).abs() < 1e-12);
        assert!(rss < 1e-24);
    }

    #[test]
    fn problems_respect_the_size_ranges() {
        for m in random_problems(200, 1) {
            assert!((2..=8).contains(&m.k()));
            assert!(m.l() >= m.k() && m.l() <= 200);
        }
    }
}
