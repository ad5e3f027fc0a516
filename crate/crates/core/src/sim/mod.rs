//! Closed-loop simulation: a controller running at `ctrl_dt` drives the plant,
//! which is integrated at `sim_dt` with the true suction model and noisy
//! actuators. Rotor contact with a wall is clamped at `d_min` and logged.

pub mod experiment;
pub mod log;
pub mod metrics;
pub mod noise;
pub mod trajectory;

use std::time::Instant;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::controller::{
    CascadedPid, ControlOutput, Controller, ControllerError, MpcConfig, MpcController, PidConfig,
    ReferenceTrajectory,
};
use crate::dynamics::{propagate_with_force, VehicleParams};
use crate::manifold::State;
use crate::solver::SolveReport;
use crate::suction::{rotor_position_in_plane, suction_force_world, PlaneFrame, SuctionError, SuctionParams};

pub use log::{LogRow, SimLog, TickRecord};
pub use metrics::{compute_metrics, compute_metrics_along, Metrics};
pub use noise::{apply_actuator_noise, stream_rng, ActuatorNoise, Stream};
pub use trajectory::{make_trajectory, TrajectorySpec};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimError {
    #[error("invalid config field `{field}`: {message}")]
    Config { field: String, message: String },
    #[error("invalid trajectory: {0}")]
    Trajectory(String),
    #[error(transparent)]
    Controller(#[from] ControllerError),
    #[error(transparent)]
    Suction(#[from] SuctionError),
    #[error("csv error{}: {message}", line.map(|l| format!(" at line {l}")).unwrap_or_default())]
    Csv { line: Option<u64>, message: String },
    #[error("i/o error: {0}")]
    Io(String),
    #[error("no log rows at or after warmup {warmup} s ({rows} rows total)")]
    EmptyWindow { warmup: f64, rows: usize },
}

fn config_error(field: &str, message: impl Into<String>) -> SimError {
    SimError::Config {
        field: field.to_string(),
        message: message.into(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControllerKind {
    Pid,
    /// MPC without the suction model.
    Mpc,
    /// Suction-compensated MPC.
    Scmpc,
}

impl ControllerKind {
    pub fn name(&self) -> &'static str {
        match self {
            ControllerKind::Pid => "pid",
            ControllerKind::Mpc => "mpc",
            ControllerKind::Scmpc => "scmpc",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub vehicle: VehicleParams,
    /// Suction acting on the plant.
    pub suction_true: SuctionParams,
    /// Suction model used by the SC-MPC; the plant truth when absent.
    pub suction_ctrl: Option<SuctionParams>,
    pub planes: Vec<PlaneFrame>,
    pub controller: ControllerKind,
    pub mpc: MpcConfig,
    pub pid: PidConfig,
    pub trajectory: TrajectorySpec,
    /// Thrust noise standard deviation, N.
    pub sigma_t: f64,
    /// Body-rate noise standard deviation, rad/s.
    pub sigma_w: f64,
    /// s
    pub duration: f64,
    /// Plant integration step, s.
    pub sim_dt: f64,
    /// Controller period, s; an integer multiple of `sim_dt`.
    pub ctrl_dt: f64,
    /// Leading time excluded from the error metrics, s.
    pub warmup: f64,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            vehicle: VehicleParams::default(),
            suction_true: SuctionParams::default(),
            suction_ctrl: None,
            planes: Vec::new(),
            controller: ControllerKind::Scmpc,
            mpc: MpcConfig::default(),
            pid: PidConfig::default(),
            trajectory: TrajectorySpec::default(),
            sigma_t: 0.2,
            sigma_w: 0.0,
            duration: 12.0,
            sim_dt: 0.002,
            ctrl_dt: 0.01,
            warmup: 2.0,
            seed: 0,
        }
    }
}

impl SimConfig {
    /// Plant substeps per control tick.
    pub fn substeps(&self) -> usize {
        (self.ctrl_dt / self.sim_dt).round() as usize
    }

    /// Number of control ticks.
    pub fn ticks(&self) -> usize {
        (self.duration / self.ctrl_dt).round() as usize
    }

    pub fn controller_suction(&self) -> &SuctionParams {
        self.suction_ctrl.as_ref().unwrap_or(&self.suction_true)
    }

    pub fn validate(&self) -> Result<(), SimError> {
        self.vehicle.validate().map_err(|e| config_error("vehicle", e.0))?;
        self.suction_true
            .validate()
            .map_err(|e| config_error("suction_true", e.to_string()))?;
        if let Some(s) = &self.suction_ctrl {
            s.validate().map_err(|e| config_error("suction_ctrl", e.to_string()))?;
        }
        let positive = |field: &str, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(config_error(field, format!("must be > 0, got {v}")))
            }
        };
        positive("sim_dt", self.sim_dt)?;
        positive("ctrl_dt", self.ctrl_dt)?;
        positive("duration", self.duration)?;
        if self.sim_dt > self.ctrl_dt {
            return Err(config_error("sim_dt", "must be <= ctrl_dt"));
        }
        let ratio = self.ctrl_dt / self.sim_dt;
        if (ratio - ratio.round()).abs() > 1e-9 * ratio {
            return Err(config_error("ctrl_dt", "must be an integer multiple of sim_dt"));
        }
        for (field, v) in [("sigma_t", self.sigma_t), ("sigma_w", self.sigma_w)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(config_error(field, format!("must be >= 0, got {v}")));
            }
        }
        if !(self.warmup.is_finite() && self.warmup >= 0.0 && self.warmup < self.duration) {
            return Err(config_error("warmup", "must satisfy 0 <= warmup < duration"));
        }
        match self.controller {
            ControllerKind::Pid => self.pid.validate(),
            _ => self.mpc.validate(),
        }
        .map_err(|e| config_error(if self.controller == ControllerKind::Pid { "pid" } else { "mpc" }, e.to_string()))?;
        self.trajectory.validate()
    }

    /// Reference covering the run plus one MPC horizon.
    pub fn reference(&self) -> Result<ReferenceTrajectory, SimError> {
        let lookahead = self.mpc.horizon as f64 * self.mpc.dt;
        make_trajectory(&self.trajectory, &self.vehicle, self.duration + lookahead, self.ctrl_dt)
    }

    pub fn build_controller(&self) -> Result<Box<dyn Controller>, SimError> {
        Ok(match self.controller {
            ControllerKind::Pid => Box::new(CascadedPid::new(self.pid.clone(), self.vehicle.clone())?),
            ControllerKind::Mpc | ControllerKind::Scmpc => {
                let cfg = MpcConfig {
                    suction_enabled: self.controller == ControllerKind::Scmpc,
                    ..self.mpc.clone()
                };
                Box::new(MpcController::new(
                    &cfg,
                    &self.vehicle,
                    &self.planes,
                    self.controller_suction(),
                )?)
            }
        })
    }

    /// Outward normal of the first wall, used for wall-normal metrics.
    pub fn wall_normal(&self) -> Option<Vector3<f64>> {
        self.planes.first().map(|p| p.normal_world())
    }
}

/// Pushes the vehicle out of any wall it has reached. Each plane keeps the
/// vehicle on the side its centre occupies; returns the deepest penetration
/// past `d_min` (negative when no rotor is within `d_min`).
fn resolve_contact(x: &mut State, planes: &[PlaneFrame], suction: &SuctionParams) -> f64 {
    let mut worst = f64::NEG_INFINITY;
    for plane in planes {
        let side = if plane.signed_distance(&x.p) >= 0.0 { 1.0 } else { -1.0 };
        let closest = suction
            .rotor_offsets
            .iter()
            .map(|o| side * rotor_position_in_plane(x, o, plane).x)
            .fold(f64::INFINITY, f64::min);
        let depth = suction.d_min - closest;
        worst = worst.max(depth);
        if depth >= 0.0 {
            let n = plane.normal_world() * side;
            x.p += n * depth;
            let inward = x.v.dot(&n);
            if inward < 0.0 {
                x.v -= n * inward;
            }
        }
    }
    worst
}

/// Runs the closed loop and returns the log and its metrics.
pub fn simulate(cfg: &SimConfig) -> Result<(SimLog, Metrics), SimError> {
    simulate_observed(cfg, |_, _| {})
}

/// As [`simulate`], calling `observe` after every tick with the record and the
/// optimizer report, if any.
pub fn simulate_observed<F>(cfg: &SimConfig, mut observe: F) -> Result<(SimLog, Metrics), SimError>
where
    F: FnMut(&TickRecord, Option<&SolveReport>),
{
    cfg.validate()?;
    let reference = cfg.reference()?;
    let mut controller = cfg.build_controller()?;
    let mut noise = ActuatorNoise::new(cfg.seed);
    let substeps = cfg.substeps();

    let (x_ref0, _) = reference.sample(0.0);
    let mut x = x_ref0;
    let mut rows = Vec::with_capacity(cfg.ticks());
    for k in 0..cfg.ticks() {
        let t = k as f64 * cfg.ctrl_dt;
        let (x_ref, _) = reference.sample(t);
        let f_s = suction_force_world(&x, &cfg.planes, &cfg.suction_true)?;

        let start = Instant::now();
        let ControlOutput {
            input,
            cost,
            degraded,
            report,
        } = controller.step(t, &x, &reference);
        let solve_ms = start.elapsed().as_secs_f64() * 1e3;
        let u_act = apply_actuator_noise(&input, cfg.sigma_t, cfg.sigma_w, &mut noise);

        let record_state = x;
        let mut penetration = f64::NEG_INFINITY;
        for _ in 0..substeps {
            let f = suction_force_world(&x, &cfg.planes, &cfg.suction_true)?;
            x = propagate_with_force(&x, &u_act, cfg.sim_dt, &f, &cfg.vehicle);
            penetration = penetration.max(resolve_contact(&mut x, &cfg.planes, &cfg.suction_true));
        }
        let record = TickRecord {
            t,
            reference: x_ref,
            state: record_state,
            u_cmd: input,
            u_act,
            suction: f_s,
            collision: penetration >= 0.0,
            cost,
            solve_ms,
            degraded,
            penetration: penetration.max(0.0),
        };
        observe(&record, report.as_ref());
        rows.push(LogRow::from_record(&record));
    }
    let log = SimLog { rows };
    let metrics = compute_metrics_along(&log, cfg.warmup, cfg.wall_normal())?;
    Ok((log, metrics))
}
