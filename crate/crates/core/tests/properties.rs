use driftlab_core::dlm::{self, FitMode, FitOptions};
use driftlab_core::moments::MomentMatrix;
use driftlab_core::perturb_sim::{UnitDraw, WeightLaw};
use driftlab_core::stats::NeumaierSum;
use driftlab_core::summary::format_g;
use driftlab_core::{qp, rng};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::Rng;

/// `(K + 1) x L` moments with independent N(0, 1) entries from a seed.
fn moments(k: usize, l: usize, seed: u64) -> MomentMatrix {
    let mut r = rng::stream(seed, "properties", 0);
    let phi = DMatrix::from_fn(k + 1, l, |_, _| r.sample::<f64, _>(rand_distr::StandardNormal));
    MomentMatrix::from_parts(phi, DMatrix::identity(l, l), vec![100; k], 100).unwrap()
}

fn dims() -> impl Strategy<Value = (usize, usize, u64)> {
    (2usize..=8).prop_flat_map(|k| (Just(k), (k + 1)..=60usize, any::<u64>()))
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1e-300)
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 128, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn closed_form_matches_least_squares((k, l, seed) in dims()) {
        let m = moments(k, l, seed);
        let (beta, rss) = dlm::closed_form_weights(&m).unwrap();
        let fit = dlm::fit_weights(&m, FitOptions::default()).unwrap();
        prop_assert!((beta.sum() - 1.0).abs() < 1e-10);
        prop_assert!((&beta - &fit.beta_hat).amax() < 1e-8);
        prop_assert!(rel(rss, fit.rss) < 1e-8);
    }

    #[test]
    fn reference_choice_does_not_change_the_fit((k, l, seed) in dims(), pick in any::<prop::sample::Index>()) {
        let m = moments(k, l, seed);
        let a = dlm::fit_weights(&m, FitOptions::default()).unwrap();
        let b = dlm::fit_weights(&m, FitOptions { mode: FitMode::SumToOne, reference: Some(pick.index(k)) }).unwrap();
        prop_assert!((&a.beta_hat - &b.beta_hat).amax() < 1e-8);
        prop_assert!((&a.se - &b.se).amax() < 1e-8 * a.se.amax());
        prop_assert!(rel(a.f_stat, b.f_stat) < 1e-8);
    }

    #[test]
    fn t_values_are_estimate_over_se((k, l, seed) in dims()) {
        let fit = dlm::fit_weights(&moments(k, l, seed), FitOptions::default()).unwrap();
        for i in 0..k {
            prop_assert!(rel(fit.t_stats[i], fit.beta_hat[i] / fit.se[i]) < 1e-12);
            prop_assert!(fit.p_values[i] >= 0.0 && fit.p_values[i] <= 1.0);
        }
        prop_assert_eq!(fit.df, l - k + 1);
        prop_assert!(fit.adj_r_squared <= fit.r_squared + 1e-15);
        prop_assert!(fit.rss <= fit.rss_uniform * (1.0 + 1e-12));
    }

    #[test]
    fn common_translation_and_scale_leave_weights_unchanged((k, l, seed) in dims(), shift in -5.0..5.0f64, scale in 0.1..10.0f64) {
        let m = moments(k, l, seed);
        let a = dlm::fit_weights(&m, FitOptions::default()).unwrap();
        let offsets = DVector::from_fn(l, |j, _| shift * (j as f64 + 1.0).sqrt());
        let mut phi = m.phi_hat.clone();
        for mut row in phi.row_iter_mut() {
            row += offsets.transpose();
            row *= scale;
        }
        let moved = MomentMatrix::from_parts(phi, m.pooled_var.clone(), m.source_sizes.clone(), m.target_size).unwrap();
        let b = dlm::fit_weights(&moved, FitOptions::default()).unwrap();
        prop_assert!((&a.beta_hat - &b.beta_hat).amax() < 1e-7);
        prop_assert!(rel(b.rss, a.rss * scale * scale) < 1e-7);
        prop_assert!((&a.t_stats - &b.t_stats).amax() < 1e-6 * a.t_stats.amax().max(1.0));
    }

    #[test]
    fn permuting_sources_permutes_weights((k, l, seed) in dims(), rot in 1usize..8) {
        let m = moments(k, l, seed);
        let a = dlm::fit_weights(&m, FitOptions::default()).unwrap();
        let perm: Vec<usize> = (0..k).map(|i| (i + rot) % k).collect();
        let phi = DMatrix::from_fn(k + 1, l, |r, c| if r == 0 { m.phi_hat[(0, c)] } else { m.phi_hat[(perm[r - 1] + 1, c)] });
        let moved = MomentMatrix::from_parts(phi, m.pooled_var.clone(), m.source_sizes.clone(), m.target_size).unwrap();
        let b = dlm::fit_weights(&moved, FitOptions::default()).unwrap();
        for i in 0..k {
            prop_assert!((b.beta_hat[i] - a.beta_hat[perm[i]]).abs() < 1e-8);
        }
    }

    #[test]
    fn simplex_fit_is_feasible_and_optimal((k, l, seed) in dims(), probes in prop::collection::vec(prop::collection::vec(0.0..1.0f64, 8), 20)) {
        let m = moments(k, l, seed);
        let fit = dlm::fit_weights(&m, FitOptions::mode(FitMode::Simplex)).unwrap();
        prop_assert!(fit.beta_hat.iter().all(|&b| b >= -1e-12));
        prop_assert!((fit.beta_hat.sum() - 1.0).abs() < 1e-10);
        let unconstrained = dlm::fit_weights(&m, FitOptions::default()).unwrap();
        prop_assert!(fit.rss >= unconstrained.rss * (1.0 - 1e-9));
        let phi = dlm::deviation_matrix(&m);
        for p in probes {
            let w = DVector::from_iterator(k, p.iter().take(k).map(|x| x + 1e-3));
            let w = &w / w.sum();
            prop_assert!(fit.rss <= (&phi * &w).norm_squared() * (1.0 + 1e-9) + 1e-12);
        }
    }

    #[test]
    fn simplex_qp_finds_the_best_vertex_of_a_linear_gain(c in prop::collection::vec(-3.0..3.0f64, 2..7)) {
        // objective ½βᵀGβ − cᵀβ with G = 0
        let k = c.len();
        let sol = qp::solve_simplex_qp(&DMatrix::zeros(k, k), &DVector::from_vec(c.clone())).unwrap();
        let best = c.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let value: f64 = sol.beta.iter().zip(&c).map(|(b, c)| b * c).sum();
        prop_assert!((value - best).abs() < 1e-9);
        prop_assert!((sol.beta.sum() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn adjusted_r_squared_is_monotone_in_r_squared(r2 in 0.0..1.0f64, d in 0.0..0.1f64, l in 10usize..2000, k in 2usize..8) {
        let a = dlm::adjusted_r_squared(r2, l, k);
        let b = dlm::adjusted_r_squared((r2 + d).min(1.0), l, k);
        prop_assert!(a <= b + 1e-15);
        prop_assert!(a <= r2 + 1e-15);
        prop_assert!((dlm::adjusted_r_squared(1.0, l, k) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn seventeen_digits_round_trip(x in any::<f64>().prop_filter("finite", |x| x.is_finite())) {
        let s = format_g(x, 17);
        prop_assert_eq!(s.parse::<f64>().unwrap(), x);
    }

    #[test]
    fn compensated_sum_ignores_order(mut xs in prop::collection::vec(-1e12..1e12f64, 1..200), seed in any::<u64>()) {
        let fwd = { let mut s = NeumaierSum::new(); xs.iter().for_each(|&x| s.add(x)); s.value() };
        let mut r = rng::stream(seed, "shuffle", 0);
        for i in (1..xs.len()).rev() {
            xs.swap(i, r.random_range(0..=i));
        }
        let back = { let mut s = NeumaierSum::new(); xs.iter().for_each(|&x| s.add(x)); s.value() };
        let scale = xs.iter().map(|x| x.abs()).sum::<f64>();
        prop_assert!((fwd - back).abs() <= 1e-15 * scale);
    }

    #[test]
    fn unit_draws_stay_in_their_bin(bin in 0usize..10_000, frac in any::<u64>(), extra in 0usize..10_000) {
        let m = bin + 1 + extra;
        let d = UnitDraw::from_bin(bin, frac, m);
        prop_assert_eq!(d.bin(m), bin);
        let v = d.value();
        prop_assert!(v > 0.0 && v < 1.0);
        for part in d.split(3) {
            let v = part.value();
            prop_assert!(v > 0.0 && v < 1.0);
        }
    }

    #[test]
    fn streams_depend_on_every_key(seed in any::<u64>(), i in 0u64..1000) {
        let a: u64 = rng::stream(seed, "a", i).random();
        prop_assert_eq!(a, rng::stream(seed, "a", i).random::<u64>());
        prop_assert_ne!(a, rng::stream(seed, "b", i).random::<u64>());
        prop_assert_ne!(a, rng::stream(seed, "a", i + 1).random::<u64>());
        prop_assert_ne!(a, rng::stream(seed.wrapping_add(1), "a", i).random::<u64>());
    }

    #[test]
    fn weight_law_moments_agree(v in 0.01..2.0f64) {
        let g = WeightLaw::unit_gamma(v);
        prop_assert!((g.mean() - 1.0).abs() < 1e-12);
        prop_assert!(rel(g.variance(), v) < 1e-12);
        for law in [g, WeightLaw::lognormal(v)] {
            prop_assert!(rel(law.relative_variance(), law.variance() / law.mean().powi(2)) < 1e-12);
        }
    }
}
