use driftlab_core::harness::checks::{CovOverrides, NullLawsParams};
use driftlab_core::harness::{self, CheckConfig, CheckReport, HarnessConfig};

fn cov(replicates: usize) -> CheckConfig {
    CheckConfig::CltCov(CovOverrides { replicates: Some(replicates), m: Some(100), ..Default::default() })
}

fn in_pool<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> T {
    rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap().install(f)
}

fn mean_se(r: &CheckReport) -> f64 {
    let ses: Vec<f64> = r.quantities.iter().filter_map(|q| q.mc_se).collect();
    assert!(!ses.is_empty());
    ses.iter().sum::<f64>() / ses.len() as f64
}

#[test]
fn reports_are_identical_for_a_seed() {
    let a = harness::run_check(&cov(300), 5).unwrap();
    let b = harness::run_check(&cov(300), 5).unwrap();
    let c = harness::run_check(&cov(300), 6).unwrap();
    assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    assert_ne!(a.quantities, c.quantities);
}

#[test]
fn thread_count_does_not_change_results() {
    let one = in_pool(1, || harness::run_check(&cov(300), 9).unwrap());
    let four = in_pool(4, || harness::run_check(&cov(300), 9).unwrap());
    assert_eq!(serde_json::to_string(&one).unwrap(), serde_json::to_string(&four).unwrap());
}

#[test]
fn quadrupling_replicates_halves_standard_errors() {
    let small = harness::run_check(&cov(1000), 11).unwrap();
    let large = harness::run_check(&cov(4000), 11).unwrap();
    let ratio = mean_se(&small) / mean_se(&large);
    assert!((ratio / 2.0 - 1.0).abs() < 0.2, "SE ratio {ratio}");

    let p = |r| CheckConfig::NullLaws(NullLawsParams { replicates: r, m: 200, test_functions: 20, ..Default::default() });
    let small = harness::run_check(&p(1000), 12).unwrap();
    let large = harness::run_check(&p(4000), 12).unwrap();
    let ratio = mean_se(&small) / mean_se(&large);
    assert!((ratio / 2.0 - 1.0).abs() < 0.2, "SE ratio {ratio}");
}

#[test]
fn config_round_trips_and_rejects_bad_input() {
    let cfg = HarnessConfig::default();
    let text = serde_json::to_string(&cfg).unwrap();
    let back: HarnessConfig = serde_json::from_str(&text).unwrap();
    assert_eq!(back, cfg);
    assert_eq!(cfg.checks.len(), 7);

    let few: HarnessConfig = serde_json::from_str(r#"{"checks": [{"check": "clt_cov", "replicates": 10}]}"#).unwrap();
    assert!(harness::run(&few).is_err());
    assert!(serde_json::from_str::<HarnessConfig>(r#"{"checks": [{"check": "clt_cov", "bogus": 1}]}"#).is_err());
    assert!(serde_json::from_str::<HarnessConfig>(r#"{"checks": [{"check": "nope"}]}"#).is_err());
}

#[test]
fn every_quantity_explains_its_target() {
    let r = harness::run_check(&cov(300), 1).unwrap();
    assert_eq!(r.check, "clt_cov");
    for q in &r.quantities {
        assert!(!q.provenance.is_empty(), "{}", q.name);
        assert!(!q.rule.is_empty(), "{}", q.name);
    }
    assert_eq!(r.passed, r.quantities.iter().filter(|q| q.gated).all(|q| q.passed));
}
