//! Batch identification of the suction parameters `(k_s, d_thr)` from logged
//! motion, by least squares on the per-sample force residual.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{drag_force_body, VehicleParams};
use crate::factors::{Factor, FactorError, FactorKind, Linearization, Residual};
use crate::manifold::{so3_exp, so3_log_unchecked, State};
use crate::sim::log::SimLog;
use crate::sim::noise::{stream_rng, Stream};
use crate::solver::{lm_solve, LmOptions, Problem, SolverError, Variable};
use crate::suction::{rotor_position_in_plane, suction_param_jacobian, PlaneFrame, SuctionParams};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum IdError {
    #[error("insufficient excitation: {active} samples have a rotor within {range} m of a wall, need {required}")]
    InsufficientExcitation { active: usize, required: usize, range: f64 },
    #[error("invalid identification input: {0}")]
    Invalid(String),
    #[error(transparent)]
    Solver(#[from] SolverError),
}

/// Logged motion at one instant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IdSample {
    pub t: f64,
    pub p: Vector3<f64>,
    pub rot: Matrix3<f64>,
    /// World-frame velocity, m/s.
    pub v: Vector3<f64>,
    /// World-frame acceleration, m/s².
    pub a: Vector3<f64>,
    /// Realized collective thrust, N.
    pub thrust: f64,
}

impl IdSample {
    pub fn state(&self) -> State {
        State::new(self.p, self.rot, self.v)
    }

    pub fn is_finite(&self) -> bool {
        self.state().is_finite() && self.a.iter().all(|v| v.is_finite()) && self.thrust.is_finite()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdResult {
    /// N/m
    pub k_s: f64,
    /// m
    pub d_thr: f64,
    /// `sqrt(mean ‖r‖²)` at the estimate, N.
    pub residual_rms: f64,
    /// `sqrt(mean ‖r‖²)` at the caller's initialization, N.
    pub initial_residual_rms: f64,
    pub sample_count: usize,
    /// Samples with at least one rotor inside the identified threshold.
    pub active_sample_count: usize,
    pub iterations: usize,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IdOptions {
    /// Upper end of the `d_thr` search range, m; also the excitation radius.
    pub d_thr_max: f64,
    /// Spacing of the initial `d_thr` grid, m.
    pub grid_step: f64,
    /// Fewest samples near a wall that the fit accepts.
    pub min_active: usize,
    pub lm: LmOptions,
}

impl Default for IdOptions {
    fn default() -> Self {
        Self {
            d_thr_max: 0.3,
            grid_step: 1e-3,
            min_active: 10,
            lm: LmOptions {
                max_iter: 50,
                ..LmOptions::default()
            },
        }
    }
}

fn suction_with(k_s: f64, d_thr: f64, layout: &SuctionParams) -> SuctionParams {
    SuctionParams {
        k_s,
        d_thr,
        ..layout.clone()
    }
}

/// Force residual without the suction term: `m·a + m·g·e₃ − R(e₃T + F_drag)`.
fn unexplained_force(s: &IdSample, vehicle: &VehicleParams) -> Vector3<f64> {
    let x = s.state();
    let body = Vector3::z() * s.thrust + drag_force_body(&x, vehicle);
    (s.a + Vector3::z() * vehicle.gravity) * vehicle.mass - s.rot * body
}

/// `m·a + m·g·e₃ − R(e₃T + F_drag) − F_s(k_s, d_thr)`, N.
pub fn force_residual(
    s: &IdSample,
    k_s: f64,
    d_thr: f64,
    planes: &[PlaneFrame],
    vehicle: &VehicleParams,
    layout: &SuctionParams,
) -> Vector3<f64> {
    let (f_s, _, _) = suction_param_jacobian(&s.state(), planes, &suction_with(k_s, d_thr, layout));
    unexplained_force(s, vehicle) - f_s
}

/// `(∂r/∂k_s, ∂r/∂d_thr)`; zero when no rotor is inside `d_thr`.
pub fn force_jacobian(
    s: &IdSample,
    k_s: f64,
    d_thr: f64,
    planes: &[PlaneFrame],
    layout: &SuctionParams,
) -> (Vector3<f64>, Vector3<f64>) {
    let (_, d_ks, d_dthr) = suction_param_jacobian(&s.state(), planes, &suction_with(k_s, d_thr, layout));
    (-d_ks, -d_dthr)
}

/// Whether any rotor lies within `range` of a plane.
fn near_wall(s: &IdSample, planes: &[PlaneFrame], layout: &SuctionParams, range: f64) -> bool {
    let x = s.state();
    planes.iter().any(|plane| {
        layout
            .rotor_offsets
            .iter()
            .any(|o| rotor_position_in_plane(&x, o, plane).x.abs() < range)
    })
}

/// A sample reduced to what the fit needs: the unexplained force and, per
/// rotor near a wall, its distance and the unit pull direction `−side·n`.
struct Reduced {
    b: Vector3<f64>,
    rotors: Vec<(f64, Vector3<f64>)>,
}

impl Reduced {
    fn new(s: &IdSample, planes: &[PlaneFrame], vehicle: &VehicleParams, layout: &SuctionParams, range: f64) -> Self {
        let x = s.state();
        let mut rotors = Vec::new();
        for plane in planes {
            for o in &layout.rotor_offsets {
                let c = rotor_position_in_plane(&x, o, plane).x;
                if c.abs() < range {
                    let side = if c >= 0.0 { 1.0 } else { -1.0 };
                    rotors.push((c.abs(), -plane.normal_world() * side));
                }
            }
        }
        Self {
            b: unexplained_force(s, vehicle),
            rotors,
        }
    }

    /// Suction force per unit `k_s` at threshold `d_thr`.
    fn unit_force(&self, d_thr: f64) -> Vector3<f64> {
        self.rotors
            .iter()
            .filter(|(d, _)| *d < d_thr)
            .fold(Vector3::zeros(), |acc, (d, u)| acc + u * (d_thr - d))
    }
}

/// Best non-negative `k_s` for a fixed `d_thr` and the resulting squared error.
fn best_gain(reduced: &[Reduced], d_thr: f64) -> (f64, f64) {
    let (mut bf, mut ff, mut bb) = (0.0, 0.0, 0.0);
    for r in reduced {
        let f = r.unit_force(d_thr);
        bf += r.b.dot(&f);
        ff += f.dot(&f);
        bb += r.b.dot(&r.b);
    }
    let k = if ff > 0.0 { (bf / ff).max(0.0) } else { 0.0 };
    (k, bb - 2.0 * k * bf + k * k * ff)
}

struct ForceFactor {
    sample: IdSample,
    planes: Arc<[PlaneFrame]>,
    vehicle: VehicleParams,
    layout: SuctionParams,
}

impl Residual for ForceFactor {
    fn dim(&self) -> usize {
        3
    }

    fn linearize(&self, vars: &[&Variable]) -> Result<Linearization, FactorError> {
        let theta = match vars {
            [v] => v.as_vector().filter(|t| t.len() == 2).ok_or(FactorError::VariableType { index: 0 })?,
            _ => {
                return Err(FactorError::Arity {
                    expected: 1,
                    got: vars.len(),
                })
            }
        };
        let (k_s, d_thr) = (theta[0], theta[1]);
        let r = force_residual(&self.sample, k_s, d_thr, &self.planes, &self.vehicle, &self.layout);
        let (j_ks, j_dthr) = force_jacobian(&self.sample, k_s, d_thr, &self.planes, &self.layout);
        let mut j = DMatrix::zeros(3, 2);
        j.set_column(0, &j_ks);
        j.set_column(1, &j_dthr);
        Ok(Linearization {
            residual: DVector::from_column_slice(r.as_slice()),
            jacobians: vec![j],
        })
    }
}

fn rms(samples: &[IdSample], k_s: f64, d_thr: f64, planes: &[PlaneFrame], vehicle: &VehicleParams, layout: &SuctionParams) -> f64 {
    let sum: f64 = samples
        .iter()
        .map(|s| force_residual(s, k_s, d_thr, planes, vehicle, layout).norm_squared())
        .sum();
    (sum / samples.len() as f64).sqrt()
}

/// Fits `(k_s, d_thr)`. `layout` supplies the rotor offsets and the `d_min`
/// floor for `d_thr`; its gains are ignored. A grid over `d_thr` with the
/// optimal `k_s` per grid point seeds the LM refinement whenever it beats
/// `init`.
pub fn identify(
    samples: &[IdSample],
    init: (f64, f64),
    planes: &[PlaneFrame],
    vehicle: &VehicleParams,
    layout: &SuctionParams,
    opts: &IdOptions,
) -> Result<IdResult, IdError> {
    if planes.is_empty() {
        return Err(IdError::Invalid("no wall planes".into()));
    }
    if samples.iter().any(|s| !s.is_finite()) {
        return Err(IdError::Invalid("non-finite sample".into()));
    }
    let floor = layout.d_min.max(1e-6);
    if !(opts.d_thr_max > floor && opts.grid_step > 0.0) {
        return Err(IdError::Invalid("d_thr search range is empty".into()));
    }
    if !(init.0.is_finite() && init.1.is_finite()) {
        return Err(IdError::Invalid("initial guess must be finite".into()));
    }
    let active = samples
        .iter()
        .filter(|s| near_wall(s, planes, layout, opts.d_thr_max))
        .count();
    if active < opts.min_active.max(1) {
        return Err(IdError::InsufficientExcitation {
            active,
            required: opts.min_active.max(1),
            range: opts.d_thr_max,
        });
    }

    let init = (init.0.max(0.0), init.1.max(floor));
    let reduced: Vec<Reduced> = samples
        .iter()
        .map(|s| Reduced::new(s, planes, vehicle, layout, opts.d_thr_max.max(init.1)))
        .collect();
    let steps = ((opts.d_thr_max - floor) / opts.grid_step).ceil() as usize;
    let mut start = init;
    let mut start_cost = reduced.iter().map(|r| (r.b - r.unit_force(init.1) * init.0).norm_squared()).sum::<f64>();
    for i in 0..=steps {
        let d = (floor + i as f64 * opts.grid_step).min(opts.d_thr_max);
        let (k, cost) = best_gain(&reduced, d);
        if cost < start_cost {
            start = (k, d);
            start_cost = cost;
        }
    }

    let planes: Arc<[PlaneFrame]> = planes.to_vec().into();
    let mut problem = Problem::new();
    let theta = problem.add_variable(Variable::bounded(&[start.0, start.1], &[0.0, floor]), false);
    for s in samples {
        let residual = Arc::new(ForceFactor {
            sample: *s,
            planes: planes.clone(),
            vehicle: vehicle.clone(),
            layout: layout.clone(),
        });
        problem.add_factor(
            Factor::with_sqrt_weight(FactorKind::Custom, vec![theta], DMatrix::identity(3, 3), residual)
                .map_err(|e| IdError::Invalid(e.to_string()))?,
        );
    }
    let (values, report) = lm_solve(&problem, &problem.variables, &opts.lm)?;
    let est = values[theta].as_vector().expect("parameter vector");
    let (k_s, d_thr) = (est[0], est[1]);
    Ok(IdResult {
        k_s,
        d_thr,
        residual_rms: rms(samples, k_s, d_thr, &planes, vehicle, layout),
        initial_residual_rms: rms(samples, init.0, init.1, &planes, vehicle, layout),
        sample_count: samples.len(),
        active_sample_count: samples.iter().filter(|s| near_wall(s, &planes, layout, d_thr)).count(),
        iterations: report.iterations,
        converged: report.converged,
    })
}

/// Samples at the midpoint of each logged tick interval: position, velocity
/// and attitude averaged between consecutive rows, acceleration as the
/// velocity difference over the interval, thrust as the realized input held
/// over it. Intervals that contained wall contact are skipped.
pub fn samples_from_log(log: &SimLog) -> Vec<IdSample> {
    log.rows
        .windows(2)
        .filter(|w| !w[0].collided() && w[1].t > w[0].t)
        .map(|w| {
            let (a, b) = (w[0].state(), w[1].state());
            let dt = w[1].t - w[0].t;
            let half = so3_log_unchecked(&(a.rot.transpose() * b.rot)) * 0.5;
            IdSample {
                t: 0.5 * (w[0].t + w[1].t),
                p: (a.p + b.p) * 0.5,
                rot: a.rot * so3_exp(&half),
                v: (a.v + b.v) * 0.5,
                a: (b.v - a.v) / dt,
                thrust: w[0].t_act,
            }
        })
        .collect()
}

/// Random-pose samples near the first plane, generated exactly from the
/// dynamics with `truth`, plus Gaussian force noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub count: usize,
    /// Range of the vehicle centre's distance from the plane, m.
    pub distance: [f64; 2],
    /// Largest tilt about a random horizontal axis, rad.
    pub max_tilt: f64,
    pub max_speed: f64,
    /// Thrust range, N.
    pub thrust: [f64; 2],
    /// Standard deviation of the force noise per axis, N.
    pub force_noise: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            count: 2000,
            distance: [0.18, 0.24],
            max_tilt: 0.1,
            max_speed: 0.5,
            thrust: [8.0, 12.0],
            force_noise: 0.0,
            seed: 0,
        }
    }
}

pub fn synthetic_samples(
    cfg: &SyntheticConfig,
    plane: &PlaneFrame,
    vehicle: &VehicleParams,
    truth: &SuctionParams,
) -> Vec<IdSample> {
    let mut rng = stream_rng(cfg.seed, Stream::Identification);
    let unit = Uniform::new_inclusive(-1.0, 1.0).expect("valid range");
    let n = plane.normal_world();
    let planes = std::slice::from_ref(plane);
    (0..cfg.count)
        .map(|k| {
            let dist = rng.random_range(cfg.distance[0]..=cfg.distance[1]);
            let lateral = Vector3::new(unit.sample(&mut rng), unit.sample(&mut rng), unit.sample(&mut rng));
            let lateral = lateral - n * n.dot(&lateral);
            let p = plane.point_world() + n * dist + lateral;
            let axis = Vector3::new(unit.sample(&mut rng), unit.sample(&mut rng), 0.0);
            let tilt = axis.normalize() * (cfg.max_tilt * unit.sample(&mut rng).abs());
            let yaw = Vector3::z() * (std::f64::consts::PI * unit.sample(&mut rng));
            let rot = so3_exp(&yaw) * so3_exp(&tilt);
            let v = Vector3::new(unit.sample(&mut rng), unit.sample(&mut rng), unit.sample(&mut rng)) * cfg.max_speed;
            let thrust = rng.random_range(cfg.thrust[0]..=cfg.thrust[1]);
            let x = State::new(p, rot, v);
            let (f_s, _, _) = suction_param_jacobian(&x, planes, truth);
            let force_noise = Vector3::from_fn(|_, _| {
                let z: f64 = StandardNormal.sample(&mut rng);
                z * cfg.force_noise
            });
            let body = Vector3::z() * thrust + drag_force_body(&x, vehicle);
            let a = -Vector3::z() * vehicle.gravity + (rot * body + f_s + force_noise) / vehicle.mass;
            IdSample {
                t: k as f64 * 0.01,
                p,
                rot,
                v,
                a,
                thrust,
            }
        })
        .collect()
}
