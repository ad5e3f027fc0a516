//! Local vectorized algebra on ℝ³ × SO(3) × ℝ³.
//!
//! Rotations perturb on the right: `R ⊞ δθ = R·exp(δθ)`. Tangent vectors are
//! always laid out as `[δp, δθ, δv]`.

use nalgebra::{Matrix3, SVector, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Axis-angle vector; its norm is the rotation angle in radians.
pub type RotationVector = Vector3<f64>;
/// Body-to-world rotation matrix.
pub type RotationMatrix = Matrix3<f64>;
/// Tangent-space perturbation `[δp, δθ, δv]`.
pub type Tangent = SVector<f64, 9>;

/// Below this angle the exp/log maps switch to their Taylor expansions.
pub const SMALL_ANGLE: f64 = 1e-6;

/// Tolerance used when validating rotation matrices handed to [`so3_log`].
pub const ROTATION_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Error)]
pub enum ManifoldError {
    #[error("matrix is not a rotation (max |RᵀR - I| = {orthogonality:e}, det = {det})")]
    InvalidRotation { orthogonality: f64, det: f64 },
}

pub fn skew(w: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -w.z, w.y, w.z, 0.0, -w.x, -w.y, w.x, 0.0)
}

/// Inverse of [`skew`] for antisymmetric input.
pub fn vee(m: &Matrix3<f64>) -> Vector3<f64> {
    Vector3::new(m[(2, 1)], m[(0, 2)], m[(1, 0)])
}

/// Rodrigues' formula.
pub fn so3_exp(theta: &RotationVector) -> RotationMatrix {
    let angle_sq = theta.norm_squared();
    let k = skew(theta);
    let (a, b) = if angle_sq < SMALL_ANGLE * SMALL_ANGLE {
        (1.0 - angle_sq / 6.0, 0.5 - angle_sq / 24.0)
    } else {
        let angle = angle_sq.sqrt();
        (angle.sin() / angle, (1.0 - angle.cos()) / angle_sq)
    };
    Matrix3::identity() + k * a + k * k * b
}

/// Checks the rotation-matrix invariants at `tol`.
pub fn check_rotation(r: &RotationMatrix, tol: f64) -> Result<(), ManifoldError> {
    let orthogonality = (r.transpose() * r - Matrix3::identity()).amax();
    let det = r.determinant();
    if orthogonality > tol || (det - 1.0).abs() > tol || !orthogonality.is_finite() {
        return Err(ManifoldError::InvalidRotation { orthogonality, det });
    }
    Ok(())
}

/// Logarithm map, validated. Returns the canonical vector with angle in `[0, π]`.
pub fn so3_log(r: &RotationMatrix) -> Result<RotationVector, ManifoldError> {
    check_rotation(r, ROTATION_TOLERANCE)?;
    Ok(so3_log_unchecked(r))
}

/// Logarithm map without validation; used on hot paths where `r` is known
/// to be a product of rotations.
pub fn so3_log_unchecked(r: &RotationMatrix) -> RotationVector {
    let half_vee = vee(&(r - r.transpose())) * 0.5;
    let sin_angle = half_vee.norm();
    let cos_angle = ((r.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
    let angle = sin_angle.atan2(cos_angle);

    if angle < SMALL_ANGLE {
        return half_vee * (1.0 + angle * angle / 6.0);
    }
    if angle < std::f64::consts::PI - 1e-3 {
        return half_vee * (angle / sin_angle);
    }

    // Near π the antisymmetric part vanishes; recover the axis from the
    // symmetric part, (R + Rᵀ)/2 - cosθ·I = (1 - cosθ)·aaᵀ.
    let sym = (r + r.transpose()) * 0.5 - Matrix3::identity() * cos_angle;
    let one_minus_cos = 1.0 - cos_angle;
    let i = (0..3)
        .max_by(|&a, &b| sym[(a, a)].total_cmp(&sym[(b, b)]))
        .unwrap_or(0);
    let ai = (sym[(i, i)] / one_minus_cos).max(0.0).sqrt();
    let mut axis = Vector3::zeros();
    for j in 0..3 {
        axis[j] = if j == i {
            ai
        } else {
            sym[(i, j)] / (one_minus_cos * ai)
        };
    }
    if axis.dot(&half_vee) < 0.0 {
        axis = -axis;
    }
    axis.normalize() * angle
}

/// Right Jacobian of SO(3): `exp(φ + δ) ≈ exp(φ)·exp(Jr(φ)·δ)`.
pub fn right_jacobian(phi: &RotationVector) -> Matrix3<f64> {
    let angle_sq = phi.norm_squared();
    let k = skew(phi);
    let (a, b) = if angle_sq < SMALL_ANGLE * SMALL_ANGLE {
        (0.5 - angle_sq / 24.0, 1.0 / 6.0 - angle_sq / 120.0)
    } else {
        let angle = angle_sq.sqrt();
        (
            (1.0 - angle.cos()) / angle_sq,
            (angle - angle.sin()) / (angle_sq * angle),
        )
    };
    Matrix3::identity() - k * a + k * k * b
}

/// Inverse right Jacobian: `Log(exp(φ)·exp(δ)) ≈ φ + Jr⁻¹(φ)·δ`.
pub fn right_jacobian_inv(phi: &RotationVector) -> Matrix3<f64> {
    let angle_sq = phi.norm_squared();
    let k = skew(phi);
    let c = if angle_sq < SMALL_ANGLE * SMALL_ANGLE {
        1.0 / 12.0 + angle_sq / 720.0
    } else {
        let angle = angle_sq.sqrt();
        1.0 / angle_sq - (1.0 + angle.cos()) / (2.0 * angle * angle.sin())
    };
    Matrix3::identity() + k * 0.5 + k * k * c
}

/// Inverse left Jacobian: `Log(exp(δ)·exp(φ)) ≈ φ + Jl⁻¹(φ)·δ`.
pub fn left_jacobian_inv(phi: &RotationVector) -> Matrix3<f64> {
    right_jacobian_inv(&-phi)
}

/// Quadrotor state: world position, body→world rotation, world velocity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct State {
    pub p: Vector3<f64>,
    pub rot: RotationMatrix,
    pub v: Vector3<f64>,
}

impl Default for State {
    fn default() -> Self {
        Self::identity()
    }
}

impl State {
    pub fn new(p: Vector3<f64>, rot: RotationMatrix, v: Vector3<f64>) -> Self {
        Self { p, rot, v }
    }

    /// Origin, level, at rest.
    pub fn identity() -> Self {
        Self {
            p: Vector3::zeros(),
            rot: Matrix3::identity(),
            v: Vector3::zeros(),
        }
    }

    pub fn at_rest(p: Vector3<f64>) -> Self {
        Self {
            p,
            ..Self::identity()
        }
    }

    pub fn rotation_vector(&self) -> RotationVector {
        so3_log_unchecked(&self.rot)
    }

    pub fn from_rotation_vector(p: Vector3<f64>, theta: RotationVector, v: Vector3<f64>) -> Self {
        Self {
            p,
            rot: so3_exp(&theta),
            v,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.p.iter().chain(self.rot.iter()).chain(self.v.iter()).all(|x| x.is_finite())
    }

    /// `x ⊞ d`.
    pub fn boxplus(&self, d: &Tangent) -> State {
        state_boxplus(self, d)
    }

    /// `self ⊟ other`.
    pub fn boxminus(&self, other: &State) -> Tangent {
        state_boxminus(self, other)
    }
}

pub fn tangent(dp: Vector3<f64>, dtheta: Vector3<f64>, dv: Vector3<f64>) -> Tangent {
    let mut d = Tangent::zeros();
    d.fixed_rows_mut::<3>(0).copy_from(&dp);
    d.fixed_rows_mut::<3>(3).copy_from(&dtheta);
    d.fixed_rows_mut::<3>(6).copy_from(&dv);
    d
}

pub fn state_boxplus(x: &State, d: &Tangent) -> State {
    let dp: Vector3<f64> = d.fixed_rows::<3>(0).into();
    let dtheta: Vector3<f64> = d.fixed_rows::<3>(3).into();
    let dv: Vector3<f64> = d.fixed_rows::<3>(6).into();
    State {
        p: x.p + dp,
        rot: x.rot * so3_exp(&dtheta),
        v: x.v + dv,
    }
}

pub fn state_boxminus(y: &State, x: &State) -> Tangent {
    tangent(
        y.p - x.p,
        so3_log_unchecked(&(x.rot.transpose() * y.rot)),
        y.v - x.v,
    )
}
