//! Cascaded PID: position → velocity setpoint → acceleration → thrust vector
//! → attitude → body-rate command.

use nalgebra::{Matrix3, Vector3, Vector4};
use serde::{Deserialize, Serialize};

use super::{ControlOutput, Controller, ControllerError, ReferenceTrajectory};
use crate::dynamics::{ControlInput, VehicleParams};
use crate::manifold::{so3_log_unchecked, State};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PidConfig {
    /// Position error → velocity setpoint, 1/s.
    pub kp: [f64; 3],
    /// Integrated position error → velocity setpoint, 1/s².
    pub ki: [f64; 3],
    /// Velocity error (reference − actual) → velocity setpoint, dimensionless.
    pub kd: [f64; 3],
    /// Velocity loop: setpoint error → acceleration, 1/s.
    pub kv: [f64; 3],
    /// Attitude error → body rate, 1/s.
    pub k_att: f64,
    /// Bound on each integrator state, m·s.
    pub integral_limit: f64,
    /// Largest commanded tilt from vertical, rad.
    pub max_tilt: f64,
    pub u_min: [f64; 4],
    pub u_max: [f64; 4],
}

impl Default for PidConfig {
    /// Critically damped position/velocity cascade on the wall-free plant
    /// (`s² + 8s + 16`), with a slow integrator.
    fn default() -> Self {
        let hover = VehicleParams::default().hover_thrust();
        Self {
            kp: [2.0; 3],
            ki: [0.5; 3],
            kd: [0.0; 3],
            kv: [8.0; 3],
            k_att: 20.0,
            integral_limit: 0.5,
            max_tilt: 0.6,
            u_min: [0.0, -3.0, -3.0, -3.0],
            u_max: [2.0 * hover, 3.0, 3.0, 3.0],
        }
    }
}

impl PidConfig {
    pub fn validate(&self) -> Result<(), ControllerError> {
        let gains = self.kp.iter().chain(&self.ki).chain(&self.kd).chain(&self.kv);
        if !gains.chain([&self.k_att]).all(|g| g.is_finite() && *g >= 0.0) {
            return Err(ControllerError::Config("PID gains must be >= 0".into()));
        }
        if !(self.integral_limit >= 0.0) {
            return Err(ControllerError::Config("integral_limit must be >= 0".into()));
        }
        if !(self.max_tilt > 0.0 && self.max_tilt < std::f64::consts::FRAC_PI_2) {
            return Err(ControllerError::Config("max_tilt must be in (0, pi/2)".into()));
        }
        if (0..4).any(|i| !(self.u_min[i] <= self.u_max[i])) {
            return Err(ControllerError::Config("u_min must be <= u_max componentwise".into()));
        }
        Ok(())
    }
}

/// Level attitude with zero yaw whose body z axis is `z`.
fn attitude_from_thrust_direction(z: &Vector3<f64>) -> Matrix3<f64> {
    let y = z.cross(&Vector3::x());
    let y = if y.norm() < 1e-9 { Vector3::y() } else { y.normalize() };
    let x = y.cross(z);
    Matrix3::from_columns(&[x, y, *z])
}

/// One evaluation of the cascade with a given integrator state.
pub fn pid_step(
    x: &State,
    x_ref: &State,
    v_ref: &Vector3<f64>,
    integral: &Vector3<f64>,
    pid: &PidConfig,
    vehicle: &VehicleParams,
) -> ControlInput {
    let e = x_ref.p - x.p;
    let e_dot = v_ref - x.v;
    let gain = |k: &[f64; 3]| Vector3::from(*k);
    let v_sp = v_ref + gain(&pid.kp).component_mul(&e) + gain(&pid.ki).component_mul(integral)
        + gain(&pid.kd).component_mul(&e_dot);
    let a_des = gain(&pid.kv).component_mul(&(v_sp - x.v));

    let mut f = (a_des + Vector3::z() * vehicle.gravity) * vehicle.mass;
    f.z = f.z.max(0.2 * vehicle.hover_thrust());
    let horizontal = f.xy().norm();
    let max_horizontal = f.z * pid.max_tilt.tan();
    if horizontal > max_horizontal {
        let s = max_horizontal / horizontal;
        f.x *= s;
        f.y *= s;
    }

    let thrust = f.dot(&(x.rot * Vector3::z()));
    let r_des = attitude_from_thrust_direction(&f.normalize());
    let omega = so3_log_unchecked(&(x.rot.transpose() * r_des)) * pid.k_att;
    ControlInput::new(thrust, omega).clamp(&Vector4::from(pid.u_min), &Vector4::from(pid.u_max))
}

/// PID with an integrator and anti-windup clamp.
#[derive(Debug, Clone)]
pub struct CascadedPid {
    pub config: PidConfig,
    pub vehicle: VehicleParams,
    integral: Vector3<f64>,
    last_t: Option<f64>,
}

impl CascadedPid {
    pub fn new(config: PidConfig, vehicle: VehicleParams) -> Result<Self, ControllerError> {
        config.validate()?;
        Ok(Self {
            config,
            vehicle,
            integral: Vector3::zeros(),
            last_t: None,
        })
    }

    pub fn integral(&self) -> Vector3<f64> {
        self.integral
    }

    pub fn update(&mut self, t: f64, x: &State, x_ref: &State) -> ControlInput {
        if let Some(t0) = self.last_t {
            let dt = (t - t0).max(0.0);
            let lim = self.config.integral_limit;
            self.integral = (self.integral + (x_ref.p - x.p) * dt).map(|v| v.clamp(-lim, lim));
        }
        self.last_t = Some(t);
        pid_step(x, x_ref, &x_ref.v, &self.integral, &self.config, &self.vehicle)
    }
}

impl Controller for CascadedPid {
    fn step(&mut self, t: f64, x: &State, reference: &ReferenceTrajectory) -> ControlOutput {
        let (x_ref, _) = reference.sample(t);
        ControlOutput {
            input: self.update(t, x, &x_ref),
            cost: 0.0,
            degraded: false,
            report: None,
        }
    }
}
