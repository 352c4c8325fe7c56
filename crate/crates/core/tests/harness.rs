use ddpgp::estimands::TauSettings;
use ddpgp::harness::{run_repetitions, BenchmarkSettings};

fn tiny(seed: u64) -> BenchmarkSettings {
    BenchmarkSettings {
        scenarios: vec![1, 3],
        reps: 2,
        n: 60,
        iterations: 40,
        burn_in: 20,
        thin: 4,
        k_trunc: Some(4),
        tau: TauSettings { nodes: 16, min_weight: 1e-4, ..TauSettings::default() },
        truth_draws: 40_000,
        ..BenchmarkSettings::desk(seed)
    }
}

#[test]
fn report_is_reproducible_and_shaped_like_the_tables() {
    let settings = tiny(12);
    let pool = |t: usize| rayon::ThreadPoolBuilder::new().num_threads(t).build().unwrap();
    let a = pool(1).install(|| run_repetitions(&settings, None).unwrap());
    let b = pool(3).install(|| run_repetitions(&settings, None).unwrap());
    let json = |r: &ddpgp::harness::RepetitionReport| serde_json::to_string(r).unwrap();
    assert_eq!(json(&a), json(&b));
    assert!(a.failures.is_empty(), "{:?}", a.failures);
    assert_eq!(a.outcomes.len(), 4);

    assert_eq!(a.survival_table.len(), 2);
    assert_eq!(a.tau_table.len(), 2);
    for row in &a.tau_table {
        assert_eq!(row.rhos, vec![0.2, 0.5, 0.8]);
        assert_eq!(row.bnp.len(), 3);
        assert_eq!(row.naive.len(), 3);
    }
    for o in &a.outcomes {
        assert!(o.survival_rmse_bnp.iter().chain(&o.survival_rmse_naive).all(|v| v.is_finite() && *v >= 0.0));
    }

    let other = run_repetitions(&tiny(13), None).unwrap();
    assert_ne!(json(&a), json(&other));
}
