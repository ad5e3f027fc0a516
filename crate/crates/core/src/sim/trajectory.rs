//! Reference trajectories: hover, circle, and straight (optionally
//! back-and-forth) line segments. Attitude is level and the reference input is
//! hover thrust.

use std::f64::consts::TAU;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use super::SimError;
use crate::controller::ReferenceTrajectory;
use crate::dynamics::{ControlInput, VehicleParams};
use crate::manifold::State;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TrajectorySpec {
    Hover {
        position: [f64; 3],
    },
    /// `c + r(cos φ·a + sin φ·b)`, `φ = 2πt/period + phase`. `a` and `b` are
    /// normalized and must not be parallel; `b` is orthogonalized against `a`.
    Circle {
        center: [f64; 3],
        radius: f64,
        period: f64,
        #[serde(default = "default_axis_a")]
        axis_a: [f64; 3],
        #[serde(default = "default_axis_b")]
        axis_b: [f64; 3],
        #[serde(default)]
        phase: f64,
    },
    /// Constant speed from `start` to `end`; with `repeat` the motion reverses
    /// at each end.
    Line {
        start: [f64; 3],
        end: [f64; 3],
        speed: f64,
        #[serde(default)]
        repeat: bool,
    },
}

fn default_axis_a() -> [f64; 3] {
    [1.0, 0.0, 0.0]
}

fn default_axis_b() -> [f64; 3] {
    [0.0, 0.0, 1.0]
}

impl Default for TrajectorySpec {
    fn default() -> Self {
        TrajectorySpec::Hover {
            position: [0.0, 0.0, 1.0],
        }
    }
}

impl TrajectorySpec {
    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: &str| Err(SimError::Trajectory(m.to_string()));
        let finite = |v: &[f64; 3]| v.iter().all(|x| x.is_finite());
        match self {
            TrajectorySpec::Hover { position } => {
                if !finite(position) {
                    return bad("hover position must be finite");
                }
            }
            TrajectorySpec::Circle {
                center,
                radius,
                period,
                axis_a,
                axis_b,
                phase,
            } => {
                if !finite(center) || !phase.is_finite() {
                    return bad("circle center and phase must be finite");
                }
                if !(*radius > 0.0 && radius.is_finite()) {
                    return bad("circle radius must be > 0");
                }
                if !(*period > 0.0 && period.is_finite()) {
                    return bad("circle period must be > 0");
                }
                let (a, b) = (Vector3::from(*axis_a), Vector3::from(*axis_b));
                if !(a.norm() > 0.0 && b.norm() > 0.0) || a.normalize().cross(&b.normalize()).norm() < 1e-6 {
                    return bad("circle axes must be nonzero and not parallel");
                }
            }
            TrajectorySpec::Line { start, end, speed, .. } => {
                if !finite(start) || !finite(end) {
                    return bad("line endpoints must be finite");
                }
                if (Vector3::from(*end) - Vector3::from(*start)).norm() < 1e-9 {
                    return bad("line endpoints must differ");
                }
                if !(*speed > 0.0 && speed.is_finite()) {
                    return bad("line speed must be > 0");
                }
            }
        }
        Ok(())
    }

    /// Position and velocity at time `t`.
    pub fn evaluate(&self, t: f64) -> (Vector3<f64>, Vector3<f64>) {
        match self {
            TrajectorySpec::Hover { position } => (Vector3::from(*position), Vector3::zeros()),
            TrajectorySpec::Circle {
                center,
                radius,
                period,
                axis_a,
                axis_b,
                phase,
            } => {
                let a = Vector3::from(*axis_a).normalize();
                let b = Vector3::from(*axis_b);
                let b = (b - a * a.dot(&b)).normalize();
                let w = TAU / period;
                let phi = w * t + phase;
                let p = Vector3::from(*center) + (a * phi.cos() + b * phi.sin()) * *radius;
                let v = (b * phi.cos() - a * phi.sin()) * (radius * w);
                (p, v)
            }
            TrajectorySpec::Line {
                start,
                end,
                speed,
                repeat,
            } => {
                let (s, e) = (Vector3::from(*start), Vector3::from(*end));
                let length = (e - s).norm();
                let dir = (e - s) / length;
                let travel = (speed * t.max(0.0)) / length;
                if !repeat {
                    return if travel >= 1.0 {
                        (e, Vector3::zeros())
                    } else {
                        (s + dir * (travel * length), dir * *speed)
                    };
                }
                let cycle = travel % 2.0;
                if cycle < 1.0 {
                    (s + dir * (cycle * length), dir * *speed)
                } else {
                    (e - dir * ((cycle - 1.0) * length), -dir * *speed)
                }
            }
        }
    }

    /// Time to go once from start to end (lines only).
    pub fn traversal_time(&self) -> Option<f64> {
        match self {
            TrajectorySpec::Line { start, end, speed, .. } => {
                Some((Vector3::from(*end) - Vector3::from(*start)).norm() / speed)
            }
            _ => None,
        }
    }
}

/// Samples `spec` every `dt` over `[0, until]`.
pub fn make_trajectory(
    spec: &TrajectorySpec,
    vehicle: &VehicleParams,
    until: f64,
    dt: f64,
) -> Result<ReferenceTrajectory, SimError> {
    spec.validate()?;
    if !(dt > 0.0 && until >= 0.0) {
        return Err(SimError::Trajectory("sampling step must be > 0 and span >= 0".into()));
    }
    let count = (until / dt).round() as usize + 1;
    let times: Vec<f64> = (0..count).map(|k| k as f64 * dt).collect();
    let states = times
        .iter()
        .map(|t| {
            let (p, v) = spec.evaluate(*t);
            State::new(p, nalgebra::Matrix3::identity(), v)
        })
        .collect();
    let inputs = vec![ControlInput::hover(vehicle); count];
    ReferenceTrajectory::new(times, states, inputs).map_err(|e| SimError::Trajectory(e.to_string()))
}
