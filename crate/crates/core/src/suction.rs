//! Wall-proximity suction model.
//!
//! Each rotor inside the threshold distance of a wall plane is pulled toward
//! the plane with a force `k_s·(d_thr − d)`, linear in its distance `d` and zero
//! beyond `d_thr`. Planes are two-sided: a rotor on the negative side of a
//! plane frame is pulled toward the plane along `+x`.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::manifold::{skew, RotationMatrix, State};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SuctionError {
    #[error("negative rotor-to-wall distance {0} m")]
    NegativeDistance(f64),
    #[error("invalid suction parameters: {0}")]
    InvalidParams(String),
    #[error("invalid wall plane: {0}")]
    InvalidPlane(String),
}

/// Wall plane frame. Its x-axis is the outward wall normal and its z-axis
/// points against gravity for vertical walls.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "WallSpec", into = "WallSpec")]
pub struct PlaneFrame {
    pub id: u32,
    /// World → plane rotation.
    pub w_to_p: RotationMatrix,
    /// World origin expressed in the plane frame.
    pub origin_in_plane: Vector3<f64>,
}

/// Serialized form of a [`PlaneFrame`]: a point on the wall and its outward normal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WallSpec {
    #[serde(default)]
    pub id: u32,
    pub point: [f64; 3],
    pub normal: [f64; 3],
}

impl PlaneFrame {
    pub fn from_wall(point: Vector3<f64>, normal: Vector3<f64>, id: u32) -> Result<Self, SuctionError> {
        let n = normal.norm();
        if !(n.is_finite() && n > 1e-9) || !point.iter().all(|v| v.is_finite()) {
            return Err(SuctionError::InvalidPlane(format!(
                "wall {id} needs a finite point and a nonzero normal"
            )));
        }
        let x = normal / n;
        // z as close to world up as the normal allows
        let up = if x.z.abs() > 0.999 { Vector3::x() } else { Vector3::z() };
        let z = (up - x * x.dot(&up)).normalize();
        let y = z.cross(&x);
        let w_to_p = Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
        Ok(Self {
            id,
            w_to_p,
            origin_in_plane: -(w_to_p * point),
        })
    }

    /// Outward wall normal in world coordinates.
    pub fn normal_world(&self) -> Vector3<f64> {
        self.w_to_p.row(0).transpose()
    }

    /// Plane origin in world coordinates.
    pub fn point_world(&self) -> Vector3<f64> {
        -(self.w_to_p.transpose() * self.origin_in_plane)
    }

    /// Signed distance of a world point along the outward normal.
    pub fn signed_distance(&self, p_world: &Vector3<f64>) -> f64 {
        (self.w_to_p * p_world + self.origin_in_plane).x
    }
}

impl TryFrom<WallSpec> for PlaneFrame {
    type Error = SuctionError;
    fn try_from(w: WallSpec) -> Result<Self, Self::Error> {
        PlaneFrame::from_wall(w.point.into(), w.normal.into(), w.id)
    }
}

impl From<PlaneFrame> for WallSpec {
    fn from(p: PlaneFrame) -> Self {
        WallSpec {
            id: p.id,
            point: p.point_world().into(),
            normal: p.normal_world().into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SuctionParams {
    /// Scale factor, N/m.
    pub k_s: f64,
    /// Threshold distance, m.
    pub d_thr: f64,
    /// Rotor centres in the body frame, m.
    pub rotor_offsets: [Vector3<f64>; 4],
    /// Geometric minimum rotor-to-wall distance, m.
    pub d_min: f64,
}

/// X-layout rotor offsets with the given per-axis half-span.
pub fn x_layout(half_span: f64) -> [Vector3<f64>; 4] {
    [
        Vector3::new(half_span, half_span, 0.0),
        Vector3::new(-half_span, half_span, 0.0),
        Vector3::new(-half_span, -half_span, 0.0),
        Vector3::new(half_span, -half_span, 0.0),
    ]
}

pub const DEFAULT_HALF_SPAN: f64 = 0.115;

impl Default for SuctionParams {
    /// Flight-identified values of the reference ducted quadrotor; the rotor
    /// layout and `d_min` are configuration placeholders.
    fn default() -> Self {
        Self {
            k_s: 4.1,
            d_thr: 0.132,
            rotor_offsets: x_layout(DEFAULT_HALF_SPAN),
            d_min: 0.066,
        }
    }
}

impl SuctionParams {
    pub fn with_gain(k_s: f64, d_thr: f64) -> Self {
        Self {
            k_s,
            d_thr,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), SuctionError> {
        let bad = |m: &str| Err(SuctionError::InvalidParams(m.to_string()));
        if !(self.k_s.is_finite() && self.k_s >= 0.0) {
            return bad("k_s must be finite and >= 0");
        }
        if !(self.d_thr.is_finite() && self.d_thr > 0.0) {
            return bad("d_thr must be finite and > 0");
        }
        if !(self.d_min.is_finite() && self.d_min >= 0.0 && self.d_min < self.d_thr) {
            return bad("d_min must satisfy 0 <= d_min < d_thr");
        }
        if self.rotor_offsets.iter().any(|o| !o.iter().all(|v| v.is_finite())) {
            return bad("rotor offsets must be finite");
        }
        Ok(())
    }

    /// Upper bound on `‖F_s‖` for a single plane with every rotor at least `d_min` away.
    pub fn max_force(&self) -> f64 {
        4.0 * self.k_s * (self.d_thr - self.d_min).max(0.0)
    }
}

/// Rotor position in the plane frame: `R_w→P (R·p_r + p) + p_w^P`.
pub fn rotor_position_in_plane(x: &State, offset: &Vector3<f64>, plane: &PlaneFrame) -> Vector3<f64> {
    plane.w_to_p * (x.rot * offset + x.p) + plane.origin_in_plane
}

/// Scalar force law: `k_s·(d_thr − d)` inside the threshold, zero outside.
pub fn suction_scalar(d: f64, params: &SuctionParams) -> Result<f64, SuctionError> {
    if d < 0.0 {
        return Err(SuctionError::NegativeDistance(d));
    }
    Ok(if d < params.d_thr {
        params.k_s * (params.d_thr - d)
    } else {
        0.0
    })
}

/// A rotor currently inside the threshold of a plane.
#[derive(Debug, Clone, Copy)]
pub struct ActiveRotor {
    pub rotor: usize,
    pub plane: usize,
    /// Signed plane-frame x coordinate of the rotor.
    pub coordinate: f64,
    /// +1 on the outward side of the plane, -1 behind it.
    pub side: f64,
    /// Outward normal of the plane in the world frame.
    pub normal: Vector3<f64>,
}

pub fn active_rotors(x: &State, planes: &[PlaneFrame], params: &SuctionParams) -> Vec<ActiveRotor> {
    let mut out = Vec::new();
    for (k, plane) in planes.iter().enumerate() {
        for (j, offset) in params.rotor_offsets.iter().enumerate() {
            let c = rotor_position_in_plane(x, offset, plane).x;
            if c.abs() < params.d_thr {
                out.push(ActiveRotor {
                    rotor: j,
                    plane: k,
                    coordinate: c,
                    side: if c >= 0.0 { 1.0 } else { -1.0 },
                    normal: plane.normal_world(),
                });
            }
        }
    }
    out
}

/// Total suction force in the world frame, summed over rotors and planes.
pub fn suction_force_world(
    x: &State,
    planes: &[PlaneFrame],
    params: &SuctionParams,
) -> Result<Vector3<f64>, SuctionError> {
    let mut force = Vector3::zeros();
    for (k, plane) in planes.iter().enumerate() {
        for offset in &params.rotor_offsets {
            let c = rotor_position_in_plane(x, offset, plane).x;
            let magnitude = suction_scalar(c.abs(), params)?;
            if magnitude != 0.0 {
                let side = if c >= 0.0 { 1.0 } else { -1.0 };
                force -= planes[k].normal_world() * (side * magnitude);
            }
        }
    }
    Ok(force)
}

/// Suction force with its derivatives with respect to a world-frame position
/// perturbation and a right rotation perturbation of the state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SuctionLinearization {
    pub force: Vector3<f64>,
    pub d_position: Matrix3<f64>,
    pub d_rotation: Matrix3<f64>,
}

pub fn suction_force_linearized(
    x: &State,
    planes: &[PlaneFrame],
    params: &SuctionParams,
) -> Result<SuctionLinearization, SuctionError> {
    let force = suction_force_world(x, planes, params)?;
    let mut d_position = Matrix3::zeros();
    let mut d_rotation = Matrix3::zeros();
    // Each active contribution is k_s·(c − side·d_thr)·n, so ∂F/∂c = k_s·n on
    // either side of the plane.
    for a in active_rotors(x, planes, params) {
        let n = a.normal;
        let offset = params.rotor_offsets[a.rotor];
        d_position += n * n.transpose() * params.k_s;
        d_rotation -= n * (n.transpose() * x.rot * skew(&offset)) * params.k_s;
    }
    Ok(SuctionLinearization {
        force,
        d_position,
        d_rotation,
    })
}

/// Suction force and its derivatives with respect to `k_s` and `d_thr`.
pub fn suction_param_jacobian(
    x: &State,
    planes: &[PlaneFrame],
    params: &SuctionParams,
) -> (Vector3<f64>, Vector3<f64>, Vector3<f64>) {
    let mut force = Vector3::zeros();
    let mut d_ks = Vector3::zeros();
    let mut d_dthr = Vector3::zeros();
    for a in active_rotors(x, planes, params) {
        let depth = params.d_thr - a.coordinate.abs();
        force -= a.normal * (a.side * params.k_s * depth);
        d_ks -= a.normal * (a.side * depth);
        d_dthr -= a.normal * (a.side * params.k_s);
    }
    (force, d_ks, d_dthr)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::manifold::{so3_exp, tangent};
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn world_plane() -> PlaneFrame {
        PlaneFrame {
            id: 0,
            w_to_p: Matrix3::identity(),
            origin_in_plane: Vector3::zeros(),
        }
    }

    /// Wall at y = 0 with the vehicle on the +y side.
    fn y_wall() -> PlaneFrame {
        PlaneFrame::from_wall(Vector3::zeros(), Vector3::y(), 0).unwrap()
    }

    #[test]
    fn rotor_position_examples() {
        let x = State::identity();
        assert_eq!(rotor_position_in_plane(&x, &Vector3::zeros(), &world_plane()), Vector3::zeros());
        assert_eq!(
            rotor_position_in_plane(&x, &Vector3::new(0.1, 0.0, 0.0), &world_plane()),
            Vector3::new(0.1, 0.0, 0.0)
        );
    }

    #[test]
    fn rotor_position_composes_transforms() {
        let x = State::from_rotation_vector(
            Vector3::new(0.3, 1.2, -0.4),
            Vector3::new(0.2, -0.1, 0.7),
            Vector3::zeros(),
        );
        let plane = PlaneFrame::from_wall(Vector3::new(1.0, 2.0, 0.5), Vector3::new(0.6, -0.8, 0.0), 3).unwrap();
        let offset = Vector3::new(0.1, -0.05, 0.02);
        // body -> world, then world -> plane, step by step
        let world = x.rot * offset + x.p;
        let rel = world - plane.point_world();
        let expected = Vector3::new(
            rel.dot(&plane.w_to_p.row(0).transpose()),
            rel.dot(&plane.w_to_p.row(1).transpose()),
            rel.dot(&plane.w_to_p.row(2).transpose()),
        );
        assert_relative_eq!(rotor_position_in_plane(&x, &offset, &plane), expected, epsilon = 1e-12);
    }

    #[test]
    fn wall_frame_axes() {
        let plane = y_wall();
        assert_relative_eq!(plane.normal_world(), Vector3::y(), epsilon = 1e-15);
        assert_relative_eq!(plane.w_to_p.row(2).transpose(), Vector3::z(), epsilon = 1e-15);
        assert_relative_eq!(plane.w_to_p.determinant(), 1.0, epsilon = 1e-12);
        let back = PlaneFrame::try_from(WallSpec::from(plane.clone())).unwrap();
        assert_relative_eq!(back.w_to_p, plane.w_to_p, epsilon = 1e-15);
        assert!(PlaneFrame::from_wall(Vector3::zeros(), Vector3::zeros(), 0).is_err());
    }

    #[test]
    fn scalar_law() {
        let params = SuctionParams::with_gain(4.1, 0.132);
        assert_eq!(suction_scalar(0.132, &params).unwrap(), 0.0);
        assert_relative_eq!(suction_scalar(0.032, &params).unwrap(), 0.41, epsilon = 1e-12);
        assert_eq!(suction_scalar(1.0, &params).unwrap(), 0.0);
        assert!(matches!(suction_scalar(-0.01, &params), Err(SuctionError::NegativeDistance(_))));
    }

    #[test]
    fn all_rotors_at_minimum_distance() {
        let mut params = SuctionParams::with_gain(4.1, 0.132);
        params.rotor_offsets = [Vector3::zeros(); 4];
        let x = State::at_rest(Vector3::new(0.0, 0.066, 1.0));
        let f = suction_force_world(&x, &[y_wall()], &params).unwrap();
        assert_relative_eq!(f.norm(), 4.0 * 4.1 * (0.132 - 0.066), epsilon = 1e-12);
        assert!((f.norm() - 1.08).abs() < 0.01);
        assert!(f.y < 0.0, "force must point at the wall");
    }

    #[test]
    fn far_from_wall_is_zero() {
        let params = SuctionParams::default();
        let x = State::at_rest(Vector3::new(0.0, 2.0, 1.0));
        assert_eq!(suction_force_world(&x, &[y_wall()], &params).unwrap(), Vector3::zeros());
    }

    #[test]
    fn two_active_rotors_sum() {
        let params = SuctionParams::with_gain(10.0, 0.10);
        let plane = y_wall();
        // near rotors at 0.05 m, far rotors at 0.28 m
        let x = State::at_rest(Vector3::new(0.3, 0.165, 1.0));
        let mut expected = Vector3::zeros();
        for o in &params.rotor_offsets {
            let d = rotor_position_in_plane(&x, o, &plane).x;
            expected -= plane.normal_world() * suction_scalar(d, &params).unwrap();
        }
        let f = suction_force_world(&x, &[plane], &params).unwrap();
        assert_relative_eq!(f, expected, epsilon = 1e-12);
        assert_relative_eq!(f, Vector3::new(0.0, -1.0, 0.0), epsilon = 1e-12);
    }

    #[test]
    fn planes_superpose() {
        let params = SuctionParams::with_gain(10.0, 0.10);
        let a = y_wall();
        let b = PlaneFrame::from_wall(Vector3::new(0.4, 0.0, 0.0), -Vector3::x(), 1).unwrap();
        let x = State::at_rest(Vector3::new(0.24, 0.17, 1.0));
        let fa = suction_force_world(&x, std::slice::from_ref(&a), &params).unwrap();
        let fb = suction_force_world(&x, std::slice::from_ref(&b), &params).unwrap();
        let fab = suction_force_world(&x, &[a, b], &params).unwrap();
        assert_relative_eq!(fab, fa + fb, epsilon = 1e-12);
        assert!(fb.x > 0.0);
    }

    #[test]
    fn linearization_matches_finite_differences() {
        let params = SuctionParams::with_gain(10.0, 0.10);
        let planes = [y_wall()];
        let x = State::from_rotation_vector(
            Vector3::new(0.0, 0.16, 1.0),
            Vector3::new(0.05, -0.08, 0.3),
            Vector3::zeros(),
        );
        let lin = suction_force_linearized(&x, &planes, &params).unwrap();
        let h = 1e-6;
        for i in 0..6 {
            let mut d = Vector3::zeros();
            d[i % 3] = h;
            let (dp, dth) = if i < 3 { (d, Vector3::zeros()) } else { (Vector3::zeros(), d) };
            let plus = x.boxplus(&tangent(dp, dth, Vector3::zeros()));
            let minus = x.boxplus(&tangent(-dp, -dth, Vector3::zeros()));
            let fd = (suction_force_world(&plus, &planes, &params).unwrap()
                - suction_force_world(&minus, &planes, &params).unwrap())
                / (2.0 * h);
            let col = if i < 3 { lin.d_position.column(i % 3) } else { lin.d_rotation.column(i % 3) };
            assert_relative_eq!(fd, col.into_owned(), epsilon = 1e-6);
        }
    }

    #[test]
    fn param_jacobian_all_rotors_active() {
        let mut params = SuctionParams::with_gain(4.1, 0.132);
        params.rotor_offsets = [Vector3::zeros(); 4];
        let plane = y_wall();
        let x = State::at_rest(Vector3::new(0.0, 0.08, 1.0));
        let (_, _, d_dthr) = suction_param_jacobian(&x, std::slice::from_ref(&plane), &params);
        // the residual carries -F_s, so its d_thr derivative is +4·k_s·n
        assert_relative_eq!(-d_dthr, plane.normal_world() * 4.0 * 4.1, epsilon = 1e-12);
    }

    proptest! {
        #[test]
        fn force_points_at_wall_and_is_bounded(
            y in 0.0f64..0.5,
            roll in -0.4f64..0.4,
            pitch in -0.4f64..0.4,
            yaw in -3.0f64..3.0,
            k_s in 0.0f64..20.0,
        ) {
            let params = SuctionParams { k_s, d_thr: 0.132, rotor_offsets: x_layout(0.115), d_min: 0.0 };
            let plane = y_wall();
            let rot = so3_exp(&Vector3::new(roll, pitch, yaw));
            // shift the body so that every rotor sits on the outward side
            let mut x = State::new(Vector3::new(0.0, 0.0, 1.0), rot, Vector3::zeros());
            let min_c = params.rotor_offsets.iter()
                .map(|o| rotor_position_in_plane(&x, o, &plane).x)
                .fold(f64::INFINITY, f64::min);
            x.p.y += y - min_c;
            let f = suction_force_world(&x, std::slice::from_ref(&plane), &params).unwrap();
            prop_assert!(f.dot(&plane.normal_world()) <= 0.0);
            prop_assert!(f.norm() <= params.max_force() + 1e-12);
            if k_s == 0.0 {
                prop_assert_eq!(f, Vector3::zeros());
            }
        }

        #[test]
        fn force_is_continuous_in_position(y in 0.0f64..0.4, k_s in 0.1f64..20.0) {
            let params = SuctionParams { k_s, d_thr: 0.1, rotor_offsets: x_layout(0.115), d_min: 0.0 };
            let planes = [y_wall()];
            let eps = 1e-9;
            let a = suction_force_world(&State::at_rest(Vector3::new(0.0, 0.115 + y, 1.0)), &planes, &params).unwrap();
            let b = suction_force_world(&State::at_rest(Vector3::new(0.0, 0.115 + y + eps, 1.0)), &planes, &params).unwrap();
            prop_assert!((a - b).norm() <= 4.0 * k_s * eps * 1.0001);
        }
    }
}
