use wallmpc::bench::bench_mpc_solve;
use wallmpc::controller::MpcConfig;

fn with_horizon(n: usize) -> MpcConfig {
    MpcConfig {
        horizon: n,
        ..MpcConfig::default()
    }
}

#[test]
fn shorter_horizon_solves_faster() {
    let short = bench_mpc_solve(&with_horizon(2), 100).unwrap();
    let long = bench_mpc_solve(&with_horizon(20), 100).unwrap();
    assert_eq!(short.horizon, 2);
    assert_eq!(long.horizon, 20);
    assert!(short.mean_ms < long.mean_ms, "{} vs {}", short.mean_ms, long.mean_ms);
}

#[test]
fn iteration_counts_are_reproducible() {
    let a = bench_mpc_solve(&MpcConfig::default(), 150).unwrap();
    let b = bench_mpc_solve(&MpcConfig::default(), 150).unwrap();
    assert_eq!(a.iterations, b.iterations);
    assert_eq!(a.n_solves, 150);
    assert!(a.under_10ms >= 0.0 && a.under_10ms <= 1.0);
}
