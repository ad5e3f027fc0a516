//! Quadrotor translational/rotational kinematics with body drag and wall suction.
//!
//! Angular velocity is an input; the discrete step is second order in position
//! and first order in velocity and rotation, with the acceleration evaluated
//! at the start of the step.

use nalgebra::{Vector3, Vector4};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::manifold::{so3_exp, State};
use crate::suction::{suction_force_world, PlaneFrame, SuctionError, SuctionParams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VehicleParams {
    /// kg
    pub mass: f64,
    /// Diagonal of the body drag matrix, N·s/m.
    pub drag: Vector3<f64>,
    /// m/s²
    pub gravity: f64,
}

impl Default for VehicleParams {
    fn default() -> Self {
        Self {
            mass: 1.0,
            drag: Vector3::new(0.1, 0.1, 0.15),
            gravity: 9.81,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
#[error("invalid vehicle parameters: {0}")]
pub struct VehicleError(pub String);

impl VehicleParams {
    pub fn validate(&self) -> Result<(), VehicleError> {
        if !(self.mass.is_finite() && self.mass > 0.0) {
            return Err(VehicleError("mass must be > 0".into()));
        }
        if !self.drag.iter().all(|d| d.is_finite() && *d >= 0.0) {
            return Err(VehicleError("drag entries must be >= 0".into()));
        }
        if !(self.gravity.is_finite() && self.gravity > 0.0) {
            return Err(VehicleError("gravity must be > 0".into()));
        }
        Ok(())
    }

    pub fn hover_thrust(&self) -> f64 {
        self.mass * self.gravity
    }
}

/// Collective thrust along body z and body angular velocity.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ControlInput {
    pub thrust: f64,
    pub omega: Vector3<f64>,
}

impl ControlInput {
    pub fn new(thrust: f64, omega: Vector3<f64>) -> Self {
        Self { thrust, omega }
    }

    pub fn hover(vehicle: &VehicleParams) -> Self {
        Self::new(vehicle.hover_thrust(), Vector3::zeros())
    }

    pub fn to_vector(&self) -> Vector4<f64> {
        Vector4::new(self.thrust, self.omega.x, self.omega.y, self.omega.z)
    }

    pub fn from_slice(u: &[f64]) -> Self {
        Self::new(u[0], Vector3::new(u[1], u[2], u[3]))
    }

    pub fn clamp(&self, lo: &Vector4<f64>, hi: &Vector4<f64>) -> Self {
        let u = self.to_vector();
        let c = u.zip_zip_map(lo, hi, |v, l, h| v.max(l).min(h));
        Self::from_slice(c.as_slice())
    }
}

/// Time derivative of the state in tangent form.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StateRate {
    pub p_dot: Vector3<f64>,
    /// Body angular velocity (`Ṙ = R·ω^`).
    pub omega: Vector3<f64>,
    pub v_dot: Vector3<f64>,
}

/// `F_drag = D·Rᵀ·v` in the body frame.
pub fn drag_force_body(x: &State, params: &VehicleParams) -> Vector3<f64> {
    params.drag.component_mul(&(x.rot.transpose() * x.v))
}

pub fn acceleration(x: &State, thrust: f64, f_s: &Vector3<f64>, params: &VehicleParams) -> Vector3<f64> {
    let body_force = Vector3::z() * thrust + drag_force_body(x, params);
    -Vector3::z() * params.gravity + (x.rot * body_force + f_s) / params.mass
}

pub fn state_derivative(x: &State, u: &ControlInput, f_s: &Vector3<f64>, params: &VehicleParams) -> StateRate {
    StateRate {
        p_dot: x.v,
        omega: u.omega,
        v_dot: acceleration(x, u.thrust, f_s, params),
    }
}

/// One explicit step with a given suction force.
pub fn propagate_with_force(
    x: &State,
    u: &ControlInput,
    dt: f64,
    f_s: &Vector3<f64>,
    params: &VehicleParams,
) -> State {
    let a = acceleration(x, u.thrust, f_s, params);
    State {
        p: x.p + x.v * dt + a * (0.5 * dt * dt),
        rot: x.rot * so3_exp(&(u.omega * dt)),
        v: x.v + a * dt,
    }
}

/// One explicit step, evaluating the suction force at `x`.
pub fn propagate(
    x: &State,
    u: &ControlInput,
    dt: f64,
    planes: &[PlaneFrame],
    suction: &SuctionParams,
    params: &VehicleParams,
) -> Result<State, SuctionError> {
    let f_s = suction_force_world(x, planes, suction)?;
    Ok(propagate_with_force(x, u, dt, &f_s, params))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::manifold::check_rotation;
    use approx::assert_relative_eq;
    use nalgebra::Matrix3;

    #[test]
    fn drag_examples() {
        let vehicle = VehicleParams {
            drag: Vector3::new(0.1, 0.1, 0.2),
            ..Default::default()
        };
        assert_eq!(drag_force_body(&State::identity(), &vehicle), Vector3::zeros());
        let x = State::new(Vector3::zeros(), Matrix3::identity(), Vector3::new(1.0, 0.0, -2.0));
        assert_relative_eq!(drag_force_body(&x, &vehicle), Vector3::new(0.1, 0.0, -0.4));
        let no_drag = VehicleParams {
            drag: Vector3::zeros(),
            ..Default::default()
        };
        assert_eq!(drag_force_body(&x, &no_drag), Vector3::zeros());
    }

    #[test]
    fn derivative_examples() {
        let vehicle = VehicleParams::default();
        let x = State::identity();
        let hover = ControlInput::hover(&vehicle);
        assert_eq!(state_derivative(&x, &hover, &Vector3::zeros(), &vehicle).v_dot, Vector3::zeros());
        let f_s = Vector3::new(-0.41, 0.0, 0.0);
        assert_relative_eq!(
            state_derivative(&x, &hover, &f_s, &vehicle).v_dot,
            Vector3::new(-0.41, 0.0, 0.0),
            epsilon = 1e-15
        );
        let fall = state_derivative(&x, &ControlInput::default(), &Vector3::zeros(), &vehicle);
        assert_eq!(fall.v_dot, Vector3::new(0.0, 0.0, -9.81));
        assert_eq!(fall.p_dot, x.v);
    }

    #[test]
    fn hover_is_fixed_point() {
        let vehicle = VehicleParams::default();
        let x = State::at_rest(Vector3::new(1.0, 2.0, 3.0));
        let y = propagate(&x, &ControlInput::hover(&vehicle), 0.01, &[], &SuctionParams::default(), &vehicle).unwrap();
        assert!((y.p - x.p).amax() < 1e-12 && (y.v - x.v).amax() < 1e-12);
        assert_relative_eq!(y.rot, x.rot, epsilon = 1e-12);
    }

    #[test]
    fn yaw_rate_advances_rotation() {
        let vehicle = VehicleParams::default();
        let u = ControlInput::new(vehicle.hover_thrust(), Vector3::new(0.0, 0.0, 1.0));
        let y = propagate_with_force(&State::identity(), &u, 0.1, &Vector3::zeros(), &vehicle);
        assert_relative_eq!(y.rot, so3_exp(&Vector3::new(0.0, 0.0, 0.1)), epsilon = 1e-15);
        assert!(y.p.amax() < 1e-15 && y.v.amax() < 1e-15);
    }

    #[test]
    fn rotation_stays_orthonormal_over_long_runs() {
        let vehicle = VehicleParams::default();
        let u = ControlInput::new(9.0, Vector3::new(0.7, -1.3, 2.1));
        let mut x = State::identity();
        let first = propagate_with_force(&x, &u, 0.01, &Vector3::zeros(), &vehicle);
        assert!(check_rotation(&first.rot, 1e-9).is_ok());
        for _ in 0..10_000 {
            x = propagate_with_force(&x, &u, 0.01, &Vector3::zeros(), &vehicle);
        }
        assert!(check_rotation(&x.rot, 1e-6).is_ok());
    }

    #[test]
    fn horizontal_momentum_conserved_without_drag_or_suction() {
        let vehicle = VehicleParams {
            drag: Vector3::zeros(),
            ..Default::default()
        };
        let mut x = State::new(Vector3::zeros(), Matrix3::identity(), Vector3::new(0.7, -0.2, 0.0));
        let u = ControlInput::new(12.0, Vector3::zeros());
        for _ in 0..1000 {
            x = propagate_with_force(&x, &u, 0.002, &Vector3::zeros(), &vehicle);
        }
        assert_eq!((x.v.x, x.v.y), (0.7, -0.2));
    }

    #[test]
    fn propagate_is_deterministic() {
        let vehicle = VehicleParams::default();
        let x = State::from_rotation_vector(Vector3::new(0.1, 0.2, 0.3), Vector3::new(0.3, -0.2, 0.1), Vector3::new(0.5, 0.1, -0.3));
        let u = ControlInput::new(10.3, Vector3::new(0.2, 0.1, -0.4));
        let a = propagate_with_force(&x, &u, 0.02, &Vector3::new(0.0, -0.3, 0.0), &vehicle);
        let b = propagate_with_force(&x, &u, 0.02, &Vector3::new(0.0, -0.3, 0.0), &vehicle);
        assert_eq!(a, b);
    }
}
