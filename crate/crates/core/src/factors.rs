//! Residual blocks of the MPC factor graph.
//!
//! The dynamics residual is written in the frame of the body at step `k`:
//!
//! ```text
//! p_p = p₁ − p₀ − v₀Δt + ½e₃gΔt² − ½(F_s/m)Δt²
//! p_v = v₁ − v₀ + e₃gΔt − (F_s/m)Δt
//! e_p = R₀ᵀp_p − ½Δt²(D·R₀ᵀv₀ + T·e₃)/m
//! e_θ = Log(R₀ᵀR₁) − ωΔt
//! e_v = R₀ᵀp_v − Δt(D·R₀ᵀv₀ + T·e₃)/m
//! ```
//!
//! It vanishes exactly at `x₁ = propagate(x₀, u, Δt)`.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector, Matrix3, SMatrix, SVector, SymmetricEigen, Vector3, Vector4};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{ControlInput, VehicleParams};
use crate::manifold::{
    left_jacobian_inv, right_jacobian_inv, skew, so3_log_unchecked, tangent, State, Tangent,
};
use crate::solver::Variable;
use crate::suction::{suction_force_linearized, suction_force_world, PlaneFrame, SuctionError, SuctionParams};

pub type Matrix9 = SMatrix<f64, 9, 9>;
pub type Matrix9x4 = SMatrix<f64, 9, 4>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FactorError {
    #[error(transparent)]
    Suction(#[from] SuctionError),
    #[error("factor expects {expected} variables, got {got}")]
    Arity { expected: usize, got: usize },
    #[error("variable {index} of factor has the wrong type or dimension")]
    VariableType { index: usize },
    #[error("weight matrix is not symmetric positive semidefinite ({0})")]
    BadWeight(String),
    #[error("weight is {rows}x{cols} but residual has dimension {dim}")]
    WeightShape { rows: usize, cols: usize, dim: usize },
}

/// Actuator noise on the commanded input.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseParams {
    /// Thrust noise std, N.
    pub sigma_t: f64,
    /// Angular-rate noise std, rad/s.
    pub sigma_w: f64,
}

impl Default for NoiseParams {
    fn default() -> Self {
        Self {
            sigma_t: 0.2,
            sigma_w: 0.2,
        }
    }
}

fn v3(v: SVector<f64, 9>, block: usize) -> Vector3<f64> {
    v.fixed_rows::<3>(3 * block).into()
}

struct DynamicsTerms {
    rot_t: Matrix3<f64>,
    body_p: Vector3<f64>,
    body_v: Vector3<f64>,
    body_vel: Vector3<f64>,
    rel_log: Vector3<f64>,
    rel_rot: Matrix3<f64>,
    pos_scale: f64,
    vel_scale: f64,
}

fn dynamics_terms(
    xk: &State,
    xk1: &State,
    f_s: &Vector3<f64>,
    params: &VehicleParams,
    dt: f64,
) -> DynamicsTerms {
    let g = Vector3::z() * params.gravity;
    let m = params.mass;
    let pp = xk1.p - xk.p - xk.v * dt + g * (0.5 * dt * dt) - f_s * (0.5 * dt * dt / m);
    let pv = xk1.v - xk.v + g * dt - f_s * (dt / m);
    let rot_t = xk.rot.transpose();
    let rel_rot = rot_t * xk1.rot;
    DynamicsTerms {
        rot_t,
        body_p: rot_t * pp,
        body_v: rot_t * pv,
        body_vel: rot_t * xk.v,
        rel_log: so3_log_unchecked(&rel_rot),
        rel_rot,
        pos_scale: 0.5 * dt * dt / m,
        vel_scale: dt / m,
    }
}

/// Body-frame dynamics residual `[e_p, e_θ, e_v]`.
pub fn dynamics_residual(
    xk: &State,
    xk1: &State,
    uk: &ControlInput,
    f_s: &Vector3<f64>,
    params: &VehicleParams,
    dt: f64,
) -> Tangent {
    let t = dynamics_terms(xk, xk1, f_s, params, dt);
    let body_force = params.drag.component_mul(&t.body_vel) + Vector3::z() * uk.thrust;
    tangent(
        t.body_p - body_force * t.pos_scale,
        t.rel_log - uk.omega * dt,
        t.body_v - body_force * t.vel_scale,
    )
}

/// Jacobians of [`dynamics_residual`] with respect to `x_k`, `x_{k+1}` (both
/// as ⊞ perturbations) and `u_k`, holding `F_s` fixed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DynamicsJacobians {
    pub wrt_xk: Matrix9,
    pub wrt_xk1: Matrix9,
    pub wrt_u: Matrix9x4,
}

pub fn dynamics_jacobians(
    xk: &State,
    xk1: &State,
    _uk: &ControlInput,
    f_s: &Vector3<f64>,
    params: &VehicleParams,
    dt: f64,
) -> DynamicsJacobians {
    let t = dynamics_terms(xk, xk1, f_s, params, dt);
    let d = Matrix3::from_diagonal(&params.drag);
    let jr_inv = right_jacobian_inv(&t.rel_log);

    let mut wrt_xk = Matrix9::zeros();
    wrt_xk.fixed_view_mut::<3, 3>(0, 0).copy_from(&-t.rot_t);
    wrt_xk
        .fixed_view_mut::<3, 3>(0, 3)
        .copy_from(&(skew(&t.body_p) - d * skew(&t.body_vel) * t.pos_scale));
    wrt_xk
        .fixed_view_mut::<3, 3>(0, 6)
        .copy_from(&(-t.rot_t * dt - d * t.rot_t * t.pos_scale));
    wrt_xk
        .fixed_view_mut::<3, 3>(3, 3)
        .copy_from(&(-jr_inv * t.rel_rot.transpose()));
    wrt_xk
        .fixed_view_mut::<3, 3>(6, 3)
        .copy_from(&(skew(&t.body_v) - d * skew(&t.body_vel) * t.vel_scale));
    wrt_xk
        .fixed_view_mut::<3, 3>(6, 6)
        .copy_from(&(-t.rot_t - d * t.rot_t * t.vel_scale));

    let mut wrt_xk1 = Matrix9::zeros();
    wrt_xk1.fixed_view_mut::<3, 3>(0, 0).copy_from(&t.rot_t);
    wrt_xk1.fixed_view_mut::<3, 3>(3, 3).copy_from(&jr_inv);
    wrt_xk1.fixed_view_mut::<3, 3>(6, 6).copy_from(&t.rot_t);

    DynamicsJacobians {
        wrt_xk,
        wrt_xk1,
        wrt_u: input_matrix(dt, params.mass),
    }
}

/// Constant input Jacobian `B`; the residual is affine in `u` through it.
pub fn input_matrix(dt: f64, mass: f64) -> Matrix9x4 {
    let mut b = Matrix9x4::zeros();
    b[(2, 0)] = -0.5 * dt * dt / mass;
    b[(8, 0)] = -dt / mass;
    for i in 0..3 {
        b[(3 + i, 1 + i)] = -dt;
    }
    b
}

/// `P = B·Σ_u·Bᵀ` with `Σ_u = diag(σ_T², σ_ω²·I₃)`.
pub fn dynamics_covariance(dt: f64, noise: &NoiseParams, params: &VehicleParams) -> Matrix9 {
    let b = input_matrix(dt, params.mass);
    let sigma = Vector4::new(
        noise.sigma_t * noise.sigma_t,
        noise.sigma_w * noise.sigma_w,
        noise.sigma_w * noise.sigma_w,
        noise.sigma_w * noise.sigma_w,
    );
    let p = b * Matrix4::from_diagonal(&sigma) * b.transpose();
    // exact symmetry
    (p + p.transpose()) * 0.5
}

type Matrix4 = nalgebra::Matrix4<f64>;

/// Default relative regularization added to the rank-4 covariance before inversion.
pub const COVARIANCE_REGULARIZATION: f64 = 1e-8;

/// Square-root information `S` with `SᵀS = (P + εI)⁻¹`, `ε = rel·tr(P)/9`.
pub fn dynamics_sqrt_information(dt: f64, noise: &NoiseParams, params: &VehicleParams, rel: f64) -> Matrix9 {
    let p = dynamics_covariance(dt, noise, params);
    let eps = (rel * p.trace() / 9.0).max(f64::MIN_POSITIVE);
    let eig = SymmetricEigen::new(p + Matrix9::identity() * eps);
    let inv_sqrt = eig.eigenvalues.map(|l| 1.0 / l.max(eps).sqrt());
    Matrix9::from_diagonal(&inv_sqrt) * eig.eigenvectors.transpose()
}

/// `(p − p_r, Log(RᵀR_r), v − v_r)`.
pub fn reference_residual(x: &State, x_ref: &State) -> Tangent {
    tangent(
        x.p - x_ref.p,
        so3_log_unchecked(&(x.rot.transpose() * x_ref.rot)),
        x.v - x_ref.v,
    )
}

pub fn reference_jacobian(x: &State, x_ref: &State) -> Matrix9 {
    let phi = so3_log_unchecked(&(x.rot.transpose() * x_ref.rot));
    let mut j = Matrix9::identity();
    j.fixed_view_mut::<3, 3>(3, 3).copy_from(&-left_jacobian_inv(&phi));
    j
}

/// `max(u − u_max, 0) + max(u_min − u, 0)`, componentwise.
pub fn control_limit_residual(u: &ControlInput, u_min: &Vector4<f64>, u_max: &Vector4<f64>) -> Vector4<f64> {
    let u = u.to_vector();
    Vector4::from_fn(|i, _| (u[i] - u_max[i]).max(0.0) + (u_min[i] - u[i]).max(0.0))
}

/// Diagonal of the limit Jacobian; 0 on the boundary.
pub fn control_limit_jacobian(u: &ControlInput, u_min: &Vector4<f64>, u_max: &Vector4<f64>) -> Vector4<f64> {
    let u = u.to_vector();
    Vector4::from_fn(|i, _| {
        if u[i] > u_max[i] {
            1.0
        } else if u[i] < u_min[i] {
            -1.0
        } else {
            0.0
        }
    })
}

pub fn control_rate_residual(uk: &ControlInput, uk1: &ControlInput) -> Vector4<f64> {
    uk.to_vector() - uk1.to_vector()
}

// ---------------------------------------------------------------------------
// Solver-facing blocks

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FactorKind {
    Dynamics,
    Reference,
    Rate,
    Limit,
    Prior,
    /// Any other residual (identification, tests).
    Custom,
}

impl FactorKind {
    pub fn residual_dim(&self) -> Option<usize> {
        match self {
            FactorKind::Dynamics | FactorKind::Reference | FactorKind::Prior => Some(9),
            FactorKind::Rate | FactorKind::Limit => Some(4),
            FactorKind::Custom => None,
        }
    }
}

/// Residual and per-variable Jacobians at one point.
#[derive(Debug, Clone)]
pub struct Linearization {
    pub residual: DVector<f64>,
    pub jacobians: Vec<DMatrix<f64>>,
}

/// A residual function over an ordered list of variables.
pub trait Residual: Send + Sync {
    fn dim(&self) -> usize;

    fn residual(&self, vars: &[&Variable]) -> Result<DVector<f64>, FactorError> {
        Ok(self.linearize(vars)?.residual)
    }

    /// Residual plus one Jacobian per variable, each `dim × var.dim()`, with
    /// respect to the variable's ⊞ perturbation.
    fn linearize(&self, vars: &[&Variable]) -> Result<Linearization, FactorError>;
}

/// One residual block with its weight `W`; the cost is `½ rᵀWr`.
#[derive(Clone)]
pub struct Factor {
    pub kind: FactorKind,
    pub var_ids: Vec<usize>,
    pub weight: DMatrix<f64>,
    /// `S` with `SᵀS = W`.
    pub sqrt_weight: DMatrix<f64>,
    pub residual: Arc<dyn Residual>,
}

impl fmt::Debug for Factor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Factor")
            .field("kind", &self.kind)
            .field("var_ids", &self.var_ids)
            .field("residual_dim", &self.residual_dim())
            .finish()
    }
}

impl Factor {
    pub fn new(
        kind: FactorKind,
        var_ids: Vec<usize>,
        weight: DMatrix<f64>,
        residual: Arc<dyn Residual>,
    ) -> Result<Self, FactorError> {
        check_shape(&weight, residual.dim())?;
        let sqrt_weight = psd_sqrt(&weight)?;
        Ok(Self {
            kind,
            var_ids,
            weight,
            sqrt_weight,
            residual,
        })
    }

    /// Builds a factor from a precomputed square-root information matrix.
    pub fn with_sqrt_weight(
        kind: FactorKind,
        var_ids: Vec<usize>,
        sqrt_weight: DMatrix<f64>,
        residual: Arc<dyn Residual>,
    ) -> Result<Self, FactorError> {
        check_shape(&sqrt_weight, residual.dim())?;
        Ok(Self {
            kind,
            var_ids,
            weight: sqrt_weight.transpose() * &sqrt_weight,
            sqrt_weight,
            residual,
        })
    }

    pub fn residual_dim(&self) -> usize {
        self.residual.dim()
    }
}

/// `S` with `SᵀS = W` for a symmetric positive semidefinite `W`.
pub fn psd_sqrt(weight: &DMatrix<f64>) -> Result<DMatrix<f64>, FactorError> {
    if !weight.is_square() {
        return Err(FactorError::BadWeight("not square".into()));
    }
    if !weight.iter().all(|w| w.is_finite()) {
        return Err(FactorError::BadWeight("non-finite entry".into()));
    }
    let asym = (weight - weight.transpose()).amax();
    let scale = weight.amax().max(1.0);
    if asym > 1e-12 * scale {
        return Err(FactorError::BadWeight(format!("asymmetry {asym:e}")));
    }
    let eig = SymmetricEigen::new(weight.clone());
    let min = eig.eigenvalues.min();
    if min < -1e-12 * scale {
        return Err(FactorError::BadWeight(format!("eigenvalue {min:e}")));
    }
    let root = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    Ok(DMatrix::from_diagonal(&root) * eig.eigenvectors.transpose())
}

fn check_shape(m: &DMatrix<f64>, dim: usize) -> Result<(), FactorError> {
    if m.nrows() != dim || m.ncols() != dim {
        return Err(FactorError::WeightShape {
            rows: m.nrows(),
            cols: m.ncols(),
            dim,
        });
    }
    Ok(())
}

fn expect_arity(vars: &[&Variable], n: usize) -> Result<(), FactorError> {
    if vars.len() != n {
        return Err(FactorError::Arity {
            expected: n,
            got: vars.len(),
        });
    }
    Ok(())
}

fn state_at<'a>(vars: &[&'a Variable], i: usize) -> Result<&'a State, FactorError> {
    vars[i].as_state().ok_or(FactorError::VariableType { index: i })
}

fn input_at(vars: &[&Variable], i: usize) -> Result<ControlInput, FactorError> {
    match vars[i].as_vector() {
        Some(v) if v.len() == 4 => Ok(ControlInput::from_slice(v.as_slice())),
        _ => Err(FactorError::VariableType { index: i }),
    }
}

fn dyn_from<const R: usize, const C: usize>(m: &SMatrix<f64, R, C>) -> DMatrix<f64> {
    DMatrix::from_column_slice(R, C, m.as_slice())
}

fn dvec<const R: usize>(v: &SVector<f64, R>) -> DVector<f64> {
    DVector::from_column_slice(v.as_slice())
}

/// Wall model used inside a dynamics factor.
#[derive(Debug, Clone)]
pub struct SuctionModel {
    pub planes: Arc<[PlaneFrame]>,
    pub params: SuctionParams,
}

/// Dynamics factor over `[x_k, u_k, x_{k+1}]`.
///
/// When a suction model is present, `F_s` is evaluated at the current `x_k`.
/// With `suction_jacobian` set, the linearization also carries `∂F_s/∂x_k`.
#[derive(Debug, Clone)]
pub struct DynamicsFactor {
    pub dt: f64,
    pub vehicle: VehicleParams,
    pub suction: Option<SuctionModel>,
    pub suction_jacobian: bool,
}

impl DynamicsFactor {
    fn force(&self, xk: &State) -> Result<Vector3<f64>, FactorError> {
        match &self.suction {
            Some(s) => Ok(suction_force_world(xk, &s.planes, &s.params)?),
            None => Ok(Vector3::zeros()),
        }
    }
}

impl Residual for DynamicsFactor {
    fn dim(&self) -> usize {
        9
    }

    fn residual(&self, vars: &[&Variable]) -> Result<DVector<f64>, FactorError> {
        expect_arity(vars, 3)?;
        let (xk, uk, xk1) = (state_at(vars, 0)?, input_at(vars, 1)?, state_at(vars, 2)?);
        let f_s = self.force(xk)?;
        Ok(dvec(&dynamics_residual(xk, xk1, &uk, &f_s, &self.vehicle, self.dt)))
    }

    fn linearize(&self, vars: &[&Variable]) -> Result<Linearization, FactorError> {
        expect_arity(vars, 3)?;
        let (xk, uk, xk1) = (state_at(vars, 0)?, input_at(vars, 1)?, state_at(vars, 2)?);
        let (f_s, coupling) = match (&self.suction, self.suction_jacobian) {
            (Some(s), true) => {
                let lin = suction_force_linearized(xk, &s.planes, &s.params)?;
                (lin.force, Some(lin))
            }
            _ => (self.force(xk)?, None),
        };
        let r = dynamics_residual(xk, xk1, &uk, &f_s, &self.vehicle, self.dt);
        let mut j = dynamics_jacobians(xk, xk1, &uk, &f_s, &self.vehicle, self.dt);
        if let Some(lin) = coupling {
            let rot_t = xk.rot.transpose();
            let pos = 0.5 * self.dt * self.dt / self.vehicle.mass;
            let vel = self.dt / self.vehicle.mass;
            for (block, dfd) in [(0usize, lin.d_position), (3, lin.d_rotation)] {
                let mut top = j.wrt_xk.fixed_view_mut::<3, 3>(0, block);
                top -= rot_t * dfd * pos;
                let mut bottom = j.wrt_xk.fixed_view_mut::<3, 3>(6, block);
                bottom -= rot_t * dfd * vel;
            }
        }
        Ok(Linearization {
            residual: dvec(&r),
            jacobians: vec![dyn_from(&j.wrt_xk), dyn_from(&j.wrt_u), dyn_from(&j.wrt_xk1)],
        })
    }
}

/// Tracking factor `x ⊖ x_ref` on one state.
#[derive(Debug, Clone)]
pub struct ReferenceFactor {
    pub target: State,
}

impl Residual for ReferenceFactor {
    fn dim(&self) -> usize {
        9
    }

    fn linearize(&self, vars: &[&Variable]) -> Result<Linearization, FactorError> {
        expect_arity(vars, 1)?;
        let x = state_at(vars, 0)?;
        Ok(Linearization {
            residual: dvec(&reference_residual(x, &self.target)),
            jacobians: vec![dyn_from(&reference_jacobian(x, &self.target))],
        })
    }
}

/// State prior `x ⊟ target`.
#[derive(Debug, Clone)]
pub struct PriorFactor {
    pub target: State,
}

impl Residual for PriorFactor {
    fn dim(&self) -> usize {
        9
    }

    fn linearize(&self, vars: &[&Variable]) -> Result<Linearization, FactorError> {
        expect_arity(vars, 1)?;
        let x = state_at(vars, 0)?;
        let r = x.boxminus(&self.target);
        let phi: Vector3<f64> = r.fixed_rows::<3>(3).into();
        let mut j = Matrix9::identity();
        j.fixed_view_mut::<3, 3>(3, 3).copy_from(&right_jacobian_inv(&phi));
        Ok(Linearization {
            residual: dvec(&r),
            jacobians: vec![dyn_from(&j)],
        })
    }
}

/// `u_k − u_{k+1}`.
#[derive(Debug, Clone, Copy, Default)]
pub struct RateFactor;

impl Residual for RateFactor {
    fn dim(&self) -> usize {
        4
    }

    fn linearize(&self, vars: &[&Variable]) -> Result<Linearization, FactorError> {
        expect_arity(vars, 2)?;
        let (a, b) = (input_at(vars, 0)?, input_at(vars, 1)?);
        Ok(Linearization {
            residual: dvec(&control_rate_residual(&a, &b)),
            jacobians: vec![DMatrix::identity(4, 4), -DMatrix::identity(4, 4)],
        })
    }
}

/// Soft box constraint on one input.
#[derive(Debug, Clone, Copy)]
pub struct LimitFactor {
    pub u_min: Vector4<f64>,
    pub u_max: Vector4<f64>,
}

impl Residual for LimitFactor {
    fn dim(&self) -> usize {
        4
    }

    fn linearize(&self, vars: &[&Variable]) -> Result<Linearization, FactorError> {
        expect_arity(vars, 1)?;
        let u = input_at(vars, 0)?;
        let r = control_limit_residual(&u, &self.u_min, &self.u_max);
        let d = control_limit_jacobian(&u, &self.u_min, &self.u_max);
        Ok(Linearization {
            residual: dvec(&r),
            jacobians: vec![DMatrix::from_diagonal(&DVector::from_column_slice(d.as_slice()))],
        })
    }
}

/// Helper for tests and tooling: the residual vector of one dynamics block in
/// its three parts.
pub fn split_tangent(r: &Tangent) -> (Vector3<f64>, Vector3<f64>, Vector3<f64>) {
    (v3(*r, 0), v3(*r, 1), v3(*r, 2))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::propagate_with_force;
    use crate::manifold::so3_exp;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_vec(rng: &mut ChaCha8Rng, scale: f64) -> Vector3<f64> {
        Vector3::from_fn(|_, _| rng.random_range(-scale..scale))
    }

    fn random_state(rng: &mut ChaCha8Rng) -> State {
        let axis = random_vec(rng, 1.0).normalize();
        let angle = rng.random_range(0.0..3.0);
        State::new(random_vec(rng, 5.0), so3_exp(&(axis * angle)), random_vec(rng, 3.0))
    }

    fn random_input(rng: &mut ChaCha8Rng) -> ControlInput {
        ControlInput::new(rng.random_range(0.0..20.0), random_vec(rng, 3.0))
    }

    #[test]
    fn residual_vanishes_on_propagated_state() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let vehicle = VehicleParams::default();
        for _ in 0..200 {
            let x = random_state(&mut rng);
            let u = random_input(&mut rng);
            let f_s = random_vec(&mut rng, 1.0);
            let y = propagate_with_force(&x, &u, 0.02, &f_s, &vehicle);
            let r = dynamics_residual(&x, &y, &u, &f_s, &vehicle, 0.02);
            assert!(r.amax() < 1e-10, "{r}");
        }
    }

    #[test]
    fn position_sensitivity_is_linear() {
        let vehicle = VehicleParams::default();
        let x = State::identity();
        let u = ControlInput::hover(&vehicle);
        let y = propagate_with_force(&x, &u, 0.02, &Vector3::zeros(), &vehicle);
        let mut y2 = y;
        y2.p.x += 1e-3;
        let r = dynamics_residual(&x, &y2, &u, &Vector3::zeros(), &vehicle, 0.02);
        assert_relative_eq!(r, tangent(Vector3::new(1e-3, 0.0, 0.0), Vector3::zeros(), Vector3::zeros()), epsilon = 1e-15);
    }

    #[test]
    fn suction_shifts_only_translation_blocks() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let vehicle = VehicleParams::default();
        let dt = 0.02;
        let x = random_state(&mut rng);
        let y = random_state(&mut rng);
        let u = random_input(&mut rng);
        let f_s = Vector3::new(0.1, -0.4, 0.2);
        let diff = dynamics_residual(&x, &y, &u, &Vector3::zeros(), &vehicle, dt)
            - dynamics_residual(&x, &y, &u, &f_s, &vehicle, dt);
        let (dp, dth, dv) = split_tangent(&diff);
        let rf = x.rot.transpose() * f_s;
        assert_relative_eq!(dp, rf * (0.5 * dt * dt / vehicle.mass), epsilon = 1e-14);
        assert_eq!(dth, Vector3::zeros());
        assert_relative_eq!(dv, rf * (dt / vehicle.mass), epsilon = 1e-14);
    }

    #[test]
    fn input_jacobian_is_b() {
        let b = input_matrix(0.02, 1.0);
        assert_eq!(b[(2, 0)], -0.5 * 0.02 * 0.02);
        assert_eq!(b[(8, 0)], -0.02);
        assert_eq!(b.fixed_view::<3, 3>(3, 1).into_owned(), -Matrix3::identity() * 0.02);
        assert_eq!(b.fixed_view::<3, 3>(0, 1).into_owned(), Matrix3::zeros());
    }

    #[test]
    fn next_state_jacobian_at_identity() {
        let vehicle = VehicleParams::default();
        let x = State::identity();
        let j = dynamics_jacobians(&x, &x, &ControlInput::default(), &Vector3::zeros(), &vehicle, 0.02);
        assert_relative_eq!(j.wrt_xk1, Matrix9::identity(), epsilon = 1e-15);
    }

    #[test]
    fn covariance_matches_explicit_product() {
        let vehicle = VehicleParams::default();
        let noise = NoiseParams { sigma_t: 0.2, sigma_w: 0.3 };
        let dt = 0.01;
        let p = dynamics_covariance(dt, &noise, &vehicle);
        // explicit B Σ Bᵀ, entry by entry
        let b = input_matrix(dt, vehicle.mass);
        let s = [0.04, 0.09, 0.09, 0.09];
        for i in 0..9 {
            for j in 0..9 {
                let expected: f64 = (0..4).map(|k| b[(i, k)] * s[k] * b[(j, k)]).sum();
                assert_relative_eq!(p[(i, j)], expected, epsilon = 1e-20);
            }
        }
        assert_relative_eq!(p[(8, 8)], 4e-6, epsilon = 1e-18);
        assert_eq!(p, p.transpose());
        let eig = SymmetricEigen::new(p).eigenvalues;
        assert!(eig.min() >= -1e-12);
        assert_eq!(eig.iter().filter(|l| **l > 1e-14).count(), 4);
        assert_eq!(
            dynamics_covariance(dt, &NoiseParams { sigma_t: 0.0, sigma_w: 0.0 }, &vehicle),
            Matrix9::zeros()
        );
    }

    #[test]
    fn sqrt_information_inverts_regularized_covariance() {
        let vehicle = VehicleParams::default();
        let noise = NoiseParams::default();
        let s = dynamics_sqrt_information(0.02, &noise, &vehicle, COVARIANCE_REGULARIZATION);
        let p = dynamics_covariance(0.02, &noise, &vehicle);
        let eps = 1e-8 * p.trace() / 9.0;
        let prod = (s.transpose() * s) * (p + Matrix9::identity() * eps);
        assert_relative_eq!(prod, Matrix9::identity(), epsilon = 1e-6);
    }

    #[test]
    fn reference_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random_state(&mut rng);
        assert_eq!(reference_residual(&x, &x), Tangent::zeros());
        let mut y = x;
        y.p.x += 0.02;
        assert_relative_eq!(
            reference_residual(&y, &x),
            tangent(Vector3::new(0.02, 0.0, 0.0), Vector3::zeros(), Vector3::zeros()),
            epsilon = 1e-15
        );
        let r = random_state(&mut rng);
        let res = reference_residual(&x, &r);
        // blockwise oracle
        assert_relative_eq!(v3(res, 0), x.p - r.p);
        assert_relative_eq!(v3(res, 1), so3_log_unchecked(&(x.rot.transpose() * r.rot)));
        assert_relative_eq!(v3(res, 2), x.v - r.v);
    }

    #[test]
    fn limit_examples() {
        let lo = Vector4::new(0.0, -3.0, -3.0, -3.0);
        let hi = Vector4::new(20.0, 3.0, 3.0, 3.0);
        let inside = ControlInput::new(10.0, Vector3::new(1.0, -2.0, 0.0));
        assert_eq!(control_limit_residual(&inside, &lo, &hi), Vector4::zeros());
        let high = ControlInput::new(25.0, Vector3::zeros());
        assert_eq!(control_limit_residual(&high, &lo, &hi), Vector4::new(5.0, 0.0, 0.0, 0.0));
        let low = ControlInput::new(-2.0, Vector3::zeros());
        assert_eq!(control_limit_residual(&low, &lo, &hi), Vector4::new(2.0, 0.0, 0.0, 0.0));
        let edge = ControlInput::new(20.0, Vector3::zeros());
        assert_eq!(control_limit_jacobian(&edge, &lo, &hi), Vector4::zeros());
    }

    #[test]
    fn rate_examples() {
        let a = ControlInput::new(10.0, Vector3::new(0.1, 0.2, 0.3));
        let b = ControlInput::new(9.0, Vector3::new(0.1, 0.2, 0.3));
        assert_eq!(control_rate_residual(&a, &a), Vector4::zeros());
        assert_eq!(control_rate_residual(&a, &b), Vector4::new(1.0, 0.0, 0.0, 0.0));
        assert_eq!(control_rate_residual(&a, &b), -control_rate_residual(&b, &a));
    }

    #[test]
    fn factor_rejects_indefinite_weight() {
        let w = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, -1.0, 1.0, 1.0]));
        assert!(matches!(
            Factor::new(FactorKind::Rate, vec![0, 1], w, Arc::new(RateFactor)),
            Err(FactorError::BadWeight(_))
        ));
        assert!(matches!(
            Factor::new(FactorKind::Rate, vec![0, 1], DMatrix::identity(3, 3), Arc::new(RateFactor)),
            Err(FactorError::WeightShape { .. })
        ));
    }
}
