use nalgebra::Vector3;
use proptest::prelude::*;
use wallmpc::sim::*;
use wallmpc::{PlaneFrame, SuctionParams};

fn wall() -> PlaneFrame {
    PlaneFrame::from_wall(Vector3::zeros(), Vector3::y(), 0).unwrap()
}

fn wall_circle(kind: ControllerKind, k_s: f64, seed: u64, duration: f64) -> SimConfig {
    SimConfig {
        controller: kind,
        planes: vec![wall()],
        suction_true: SuctionParams {
            d_min: 0.02,
            ..SuctionParams::with_gain(k_s, 0.10)
        },
        trajectory: TrajectorySpec::Circle {
            center: [0.0, 0.165, 1.5],
            radius: 1.0,
            period: 10.0,
            axis_a: [1.0, 0.0, 0.0],
            axis_b: [0.0, 0.0, 1.0],
            phase: 0.0,
        },
        sigma_w: 0.1,
        duration,
        warmup: 0.5,
        seed,
        ..Default::default()
    }
}

#[test]
fn identical_config_gives_identical_log() {
    for kind in [ControllerKind::Pid, ControllerKind::Scmpc] {
        let cfg = wall_circle(kind, 4.0, 7, 1.5);
        let (a, ma) = simulate(&cfg).unwrap();
        let (b, mb) = simulate(&cfg).unwrap();
        assert!(a.same_trajectory(&b));
        assert_eq!(ma, mb);
        let (c, _) = simulate(&SimConfig { seed: 8, ..cfg }).unwrap();
        assert!(!a.same_trajectory(&c));
    }
}

#[test]
fn free_fall_matches_parabola() {
    // thrust clamped to zero, no drag, no noise: the body rates the PID still
    // commands cannot affect the translation
    let mut pid = wallmpc::controller::PidConfig::default();
    pid.u_max[0] = 0.0;
    let cfg = SimConfig {
        controller: ControllerKind::Pid,
        pid,
        vehicle: wallmpc::VehicleParams {
            drag: Vector3::zeros(),
            ..Default::default()
        },
        trajectory: TrajectorySpec::Hover {
            position: [0.0, 0.0, 100.0],
        },
        sigma_t: 0.0,
        duration: 2.0,
        warmup: 0.0,
        ..Default::default()
    };
    let (log, _) = simulate(&cfg).unwrap();
    for row in &log.rows {
        let z = 100.0 - 0.5 * 9.81 * row.t * row.t;
        assert!((row.pz - z).abs() < 1e-9, "t {} z {} vs {}", row.t, row.pz, z);
        assert!(row.t_act == 0.0);
    }
}

#[test]
fn metrics_match_streaming_recomputation() {
    let cfg = wall_circle(ControllerKind::Pid, 4.0, 3, 2.0);
    let (log, m) = simulate(&cfg).unwrap();
    // Welford-style running means, independent of the batch implementation
    let (mut n, mut mean_abs, mut mean_sq) = (0.0, [0.0; 3], [0.0; 3]);
    for row in log.rows.iter().filter(|r| r.t >= cfg.warmup) {
        n += 1.0;
        let e = [row.px - row.ref_px, row.py - row.ref_py, row.pz - row.ref_pz];
        for i in 0..3 {
            mean_abs[i] += (e[i].abs() - mean_abs[i]) / n;
            mean_sq[i] += (e[i] * e[i] - mean_sq[i]) / n;
        }
    }
    for i in 0..3 {
        assert!((m.mae[i] - mean_abs[i]).abs() < 1e-12);
        assert!((m.rmse[i] - mean_sq[i].sqrt()).abs() < 1e-12);
    }
    assert!((m.wall_normal_rmse.unwrap() - m.rmse[1]).abs() < 1e-15);
}

#[test]
fn zero_gain_plant_makes_suction_model_irrelevant() {
    let cfg = wall_circle(ControllerKind::Mpc, 0.0, 5, 1.0);
    let (a, _) = simulate(&cfg).unwrap();
    let (b, _) = simulate(&SimConfig {
        controller: ControllerKind::Scmpc,
        ..cfg
    })
    .unwrap();
    assert!(a.max_abs_diff(&b).unwrap() < 1e-9);
}

#[test]
fn log_rows_follow_ticks() {
    let cfg = wall_circle(ControllerKind::Scmpc, 10.0, 0, 1.0);
    let (log, _) = simulate(&cfg).unwrap();
    assert_eq!(log.len(), 100);
    for (k, row) in log.rows.iter().enumerate() {
        assert_eq!(row.t, k as f64 * 0.01);
        assert!(row.suction().y <= 0.0);
        assert!(row.t_act - row.t_cmd != 0.0);
    }
}

#[test]
fn controller_mismatch_is_honoured() {
    // controller believes there is no suction: behaves as the baseline
    let cfg = wall_circle(ControllerKind::Scmpc, 10.0, 2, 1.0);
    let blind = SimConfig {
        suction_ctrl: Some(SuctionParams { k_s: 0.0, ..cfg.suction_true.clone() }),
        ..cfg.clone()
    };
    let (a, _) = simulate(&blind).unwrap();
    let (b, _) = simulate(&SimConfig { controller: ControllerKind::Mpc, ..cfg.clone() }).unwrap();
    let (c, _) = simulate(&cfg).unwrap();
    assert!(a.max_abs_diff(&b).unwrap() < 1e-9);
    assert!(a.max_abs_diff(&c).unwrap() > 1e-6);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]
    #[test]
    fn rmse_dominates_mae(seed in 0u64..1000, k_s in 0.0..12.0f64) {
        let (_, m) = simulate(&wall_circle(ControllerKind::Pid, k_s, seed, 1.0)).unwrap();
        for i in 0..3 {
            prop_assert!(m.rmse[i] >= m.mae[i] && m.mae[i] >= 0.0);
        }
    }
}
