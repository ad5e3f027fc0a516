//! Solve-latency measurement over a closed-loop trace.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::controller::MpcConfig;
use crate::sim::{simulate_observed, ControllerKind, SimConfig, SimError, TrajectorySpec};
use crate::suction::{PlaneFrame, SuctionParams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchResult {
    pub scenario: String,
    pub horizon: usize,
    pub n_solves: usize,
    pub mean_ms: f64,
    pub median_ms: f64,
    pub p99_ms: f64,
    pub max_ms: f64,
    /// Fraction of solves under 10 ms.
    pub under_10ms: f64,
    pub mean_iterations: f64,
    /// LM iterations of every solve, in order.
    pub iterations: Vec<usize>,
}

/// SC-MPC following a circle beside a wall with suction active.
pub fn bench_scenario(cfg: &MpcConfig) -> SimConfig {
    SimConfig {
        controller: ControllerKind::Scmpc,
        mpc: cfg.clone(),
        planes: vec![PlaneFrame::from_wall(Vector3::zeros(), Vector3::y(), 0).expect("valid wall")],
        suction_true: SuctionParams {
            d_min: 0.02,
            ..SuctionParams::with_gain(10.0, 0.10)
        },
        trajectory: TrajectorySpec::Circle {
            center: [0.0, 0.165, 1.5],
            radius: 1.0,
            period: 10.0,
            axis_a: [1.0, 0.0, 0.0],
            axis_b: [0.0, 0.0, 1.0],
            phase: 0.0,
        },
        sigma_t: 0.2,
        sigma_w: 0.1,
        warmup: 0.0,
        seed: 0,
        ..SimConfig::default()
    }
}

/// Times `n_solves` warm-started solves on [`bench_scenario`].
pub fn bench_mpc_solve(cfg: &MpcConfig, n_solves: usize) -> Result<BenchResult, SimError> {
    bench_on("wall_circle", &bench_scenario(cfg), n_solves)
}

/// Times the controller of `sim` over its first `n_solves` ticks.
pub fn bench_on(name: &str, sim: &SimConfig, n_solves: usize) -> Result<BenchResult, SimError> {
    if n_solves < 100 {
        return Err(SimError::Config {
            field: "n_solves".into(),
            message: "must be >= 100".into(),
        });
    }
    let sim = SimConfig {
        duration: n_solves as f64 * sim.ctrl_dt,
        warmup: 0.0,
        ..sim.clone()
    };
    let mut times = Vec::with_capacity(n_solves);
    let mut iterations = Vec::with_capacity(n_solves);
    simulate_observed(&sim, |record, report| {
        times.push(record.solve_ms);
        iterations.push(report.map_or(0, |r| r.iterations));
    })?;
    let n = times.len();
    let mut sorted = times.clone();
    sorted.sort_by(f64::total_cmp);
    let quantile = |q: f64| sorted[((q * n as f64).ceil() as usize).clamp(1, n) - 1];
    Ok(BenchResult {
        scenario: name.to_string(),
        horizon: sim.mpc.horizon,
        n_solves: n,
        mean_ms: times.iter().sum::<f64>() / n as f64,
        median_ms: quantile(0.5),
        p99_ms: quantile(0.99),
        max_ms: sorted[n - 1],
        under_10ms: times.iter().filter(|t| **t < 10.0).count() as f64 / n as f64,
        mean_iterations: iterations.iter().sum::<usize>() as f64 / n as f64,
        iterations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_short_runs() {
        assert!(bench_mpc_solve(&MpcConfig::default(), 10).is_err());
    }

    #[test]
    fn quantiles_are_ordered() {
        let r = bench_mpc_solve(&MpcConfig::default(), 100).unwrap();
        assert_eq!(r.n_solves, 100);
        assert!(r.p99_ms >= r.median_ms && r.median_ms >= 0.0);
        assert!(r.max_ms >= r.p99_ms);
        assert!(r.iterations.iter().all(|i| *i >= 1));
    }
}
