//! Receding-horizon MPC posed as a factor graph and solved with LM.
//!
//! Variables are ordered `x₀, u₀, x₁, u₁, …, u_{N−1}, x_N` so the normal
//! matrix is banded; `x₀` is fixed to the measured state.

use std::sync::Arc;

use nalgebra::{DMatrix, SMatrix, Vector3, Vector4};
use serde::{Deserialize, Serialize};

use super::{weight_serde, ControlOutput, Controller, ControllerError, ReferenceTrajectory};
use crate::dynamics::{propagate_with_force, ControlInput, VehicleParams};
use crate::factors::{
    dynamics_residual, dynamics_sqrt_information, input_matrix, psd_sqrt, split_tangent, DynamicsFactor, Factor,
    FactorKind, LimitFactor, Matrix9x4, NoiseParams, RateFactor, ReferenceFactor, SuctionModel,
    COVARIANCE_REGULARIZATION,
};
use crate::manifold::{so3_exp, State};
use crate::solver::{lm_solve_projected, LmOptions, Problem, Projection, SolveReport, SolverError, Variable};
use crate::suction::{suction_force_world, PlaneFrame, SuctionParams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MpcConfig {
    /// Number of steps `N`.
    pub horizon: usize,
    /// Step length of the prediction model, s.
    pub dt: f64,
    /// Stage tracking weight `Q` (9×9).
    #[serde(with = "weight_serde")]
    pub q: DMatrix<f64>,
    /// Terminal tracking weight `Q_N` (9×9).
    #[serde(with = "weight_serde")]
    pub q_terminal: DMatrix<f64>,
    /// Input-rate weight `G` (4×4).
    #[serde(with = "weight_serde")]
    pub rate_weight: DMatrix<f64>,
    /// Input-limit weight `Q_lim` (4×4).
    #[serde(with = "weight_serde")]
    pub limit_weight: DMatrix<f64>,
    pub u_min: [f64; 4],
    pub u_max: [f64; 4],
    /// Input noise defining the dynamics-factor covariance.
    pub noise: NoiseParams,
    /// `ε/(tr(P)/9)` for the regularized dynamics covariance `P + εI`.
    pub covariance_regularization: f64,
    /// Include the suction force in the prediction model.
    pub suction_enabled: bool,
    /// Carry `∂F_s/∂x` in the dynamics Jacobian instead of freezing `F_s`
    /// within each linearization.
    pub suction_jacobian: bool,
    /// Keep trial points dynamically consistent during the solve.
    pub project_dynamics: bool,
    pub lm: LmOptions,
}

fn diag(values: &[f64]) -> DMatrix<f64> {
    DMatrix::from_diagonal(&nalgebra::DVector::from_column_slice(values))
}

impl Default for MpcConfig {
    fn default() -> Self {
        let q = diag(&[100.0, 100.0, 100.0, 10.0, 10.0, 10.0, 10.0, 10.0, 10.0]);
        let hover = VehicleParams::default().hover_thrust();
        Self {
            horizon: 20,
            dt: 0.02,
            q_terminal: &q * 2.0,
            q,
            rate_weight: diag(&[1.0, 10.0, 10.0, 10.0]),
            limit_weight: diag(&[1e4; 4]),
            u_min: [0.0, -3.0, -3.0, -3.0],
            u_max: [2.0 * hover, 3.0, 3.0, 3.0],
            noise: NoiseParams::default(),
            covariance_regularization: COVARIANCE_REGULARIZATION,
            suction_enabled: true,
            suction_jacobian: true,
            project_dynamics: true,
            // Marquardt damping scales with the near-hard dynamics diagonal, so
            // the useful damping range starts far below the generic default.
            lm: LmOptions {
                max_iter: 5,
                lambda0: 1e-12,
                ..LmOptions::default()
            },
        }
    }
}

impl MpcConfig {
    pub fn validate(&self) -> Result<(), ControllerError> {
        let bad = |m: String| Err(ControllerError::Config(m));
        if self.horizon < 2 {
            return bad("horizon must be >= 2".into());
        }
        if !(self.dt.is_finite() && self.dt > 0.0) {
            return bad("dt must be > 0".into());
        }
        for (name, m, n) in [
            ("q", &self.q, 9),
            ("q_terminal", &self.q_terminal, 9),
            ("rate_weight", &self.rate_weight, 4),
            ("limit_weight", &self.limit_weight, 4),
        ] {
            if m.nrows() != n || m.ncols() != n {
                return bad(format!("{name} must be {n}x{n}"));
            }
            psd_sqrt(m).map_err(|e| ControllerError::Config(format!("{name}: {e}")))?;
        }
        for (name, m) in [("rate_weight", &self.rate_weight), ("limit_weight", &self.limit_weight)] {
            if m.clone().cholesky().is_none() {
                return bad(format!("{name} must be positive definite"));
            }
        }
        if (0..4).any(|i| !(self.u_min[i] <= self.u_max[i])) {
            return bad("u_min must be <= u_max componentwise".into());
        }
        if !(self.noise.sigma_t > 0.0 && self.noise.sigma_w > 0.0) {
            return bad("noise sigmas must be > 0".into());
        }
        if !(self.covariance_regularization > 0.0 && self.covariance_regularization.is_finite()) {
            return bad("covariance_regularization must be > 0".into());
        }
        if self.lm.max_iter == 0 {
            return bad("lm.max_iter must be >= 1".into());
        }
        Ok(())
    }

    pub fn u_min_vec(&self) -> Vector4<f64> {
        Vector4::from(self.u_min)
    }

    pub fn u_max_vec(&self) -> Vector4<f64> {
        Vector4::from(self.u_max)
    }
}

pub fn state_index(k: usize) -> usize {
    2 * k
}

pub fn input_index(k: usize) -> usize {
    2 * k + 1
}

/// Optimized (or initial) horizon trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct MpcSolution {
    /// `x₀ … x_N`.
    pub states: Vec<State>,
    /// `u₀ … u_{N−1}`.
    pub inputs: Vec<ControlInput>,
}

impl MpcSolution {
    pub fn horizon(&self) -> usize {
        self.inputs.len()
    }

    fn from_values(values: &[Variable], n: usize) -> Self {
        let states = (0..=n).map(|k| *values[state_index(k)].as_state().unwrap()).collect();
        let inputs = (0..n)
            .map(|k| ControlInput::from_slice(values[input_index(k)].as_vector().unwrap().as_slice()))
            .collect();
        Self { states, inputs }
    }

    fn to_values(&self) -> Vec<Variable> {
        let mut out = Vec::with_capacity(2 * self.inputs.len() + 1);
        for (x, u) in self.states.iter().zip(&self.inputs) {
            out.push(Variable::State(*x));
            out.push(Variable::vector(u.to_vector().as_slice()));
        }
        out.push(Variable::State(*self.states.last().unwrap()));
        out
    }

    /// Inputs advanced by `steps` (fractional) horizon steps, holding the last one.
    pub fn shifted_inputs(&self, steps: f64) -> Vec<ControlInput> {
        let n = self.inputs.len();
        (0..n)
            .map(|k| {
                let pos = k as f64 + steps.max(0.0);
                let i = pos.floor() as usize;
                if i + 1 >= n {
                    return self.inputs[n - 1];
                }
                let a = pos - i as f64;
                if a == 0.0 {
                    return self.inputs[i];
                }
                let (u0, u1) = (&self.inputs[i], &self.inputs[i + 1]);
                ControlInput::new(u0.thrust + a * (u1.thrust - u0.thrust), u0.omega.lerp(&u1.omega, a))
            })
            .collect()
    }
}

/// Forward-simulates the prediction model from `x0`.
pub fn rollout(
    x0: &State,
    inputs: &[ControlInput],
    dt: f64,
    vehicle: &VehicleParams,
    suction: Option<(&[PlaneFrame], &SuctionParams)>,
) -> Result<MpcSolution, ControllerError> {
    let mut states = Vec::with_capacity(inputs.len() + 1);
    states.push(*x0);
    for u in inputs {
        let x = states.last().unwrap();
        let f_s = match suction {
            Some((planes, params)) => suction_force_world(x, planes, params)?,
            None => Vector3::zeros(),
        };
        states.push(propagate_with_force(x, u, dt, &f_s, vehicle));
    }
    Ok(MpcSolution {
        states,
        inputs: inputs.to_vec(),
    })
}

/// Square roots of the configured weights, computed once per configuration.
#[derive(Debug, Clone)]
struct Weights {
    stage: DMatrix<f64>,
    terminal: DMatrix<f64>,
    rate: DMatrix<f64>,
    limit: DMatrix<f64>,
    dynamics: DMatrix<f64>,
}

impl Weights {
    fn new(cfg: &MpcConfig, vehicle: &VehicleParams) -> Result<Self, ControllerError> {
        cfg.validate()?;
        let s = dynamics_sqrt_information(cfg.dt, &cfg.noise, vehicle, cfg.covariance_regularization);
        Ok(Self {
            stage: psd_sqrt(&cfg.q)?,
            terminal: psd_sqrt(&cfg.q_terminal)?,
            rate: psd_sqrt(&cfg.rate_weight)?,
            limit: psd_sqrt(&cfg.limit_weight)?,
            dynamics: DMatrix::from_column_slice(9, 9, s.as_slice()),
        })
    }
}

/// Everything fixed across the ticks of one controller.
#[derive(Debug, Clone)]
struct Model {
    cfg: MpcConfig,
    vehicle: VehicleParams,
    planes: Arc<[PlaneFrame]>,
    suction: SuctionParams,
    weights: Weights,
    input_matrix: Matrix9x4,
    input_pinv: SMatrix<f64, 4, 9>,
}

impl Model {
    fn new(
        cfg: &MpcConfig,
        vehicle: &VehicleParams,
        planes: &[PlaneFrame],
        suction: &SuctionParams,
    ) -> Result<Self, ControllerError> {
        vehicle.validate().map_err(|e| ControllerError::Config(e.to_string()))?;
        suction.validate()?;
        let input_matrix = input_matrix(cfg.dt, vehicle.mass);
        let input_pinv = input_matrix
            .pseudo_inverse(1e-15)
            .map_err(|e| ControllerError::Config(e.to_string()))?;
        Ok(Self {
            input_matrix,
            input_pinv,
            weights: Weights::new(cfg, vehicle)?,
            cfg: cfg.clone(),
            vehicle: vehicle.clone(),
            planes: Arc::from(planes),
            suction: suction.clone(),
        })
    }

    fn suction_model(&self) -> Option<SuctionModel> {
        self.cfg.suction_enabled.then(|| SuctionModel {
            planes: self.planes.clone(),
            params: self.suction.clone(),
        })
    }

    fn rollout(&self, x0: &State, inputs: &[ControlInput]) -> Result<MpcSolution, ControllerError> {
        let suction = self.cfg.suction_enabled.then(|| (&self.planes[..], &self.suction));
        rollout(x0, inputs, self.cfg.dt, &self.vehicle, suction)
    }

    fn graph(&self, x_init: &State, reference: &ReferenceTrajectory) -> Result<Problem, ControllerError> {
        let n = self.cfg.horizon;
        if reference.len() < n + 1 {
            return Err(ControllerError::Horizon {
                needed: n + 1,
                got: reference.len(),
            });
        }
        let mut problem = Problem::new();
        problem.add_variable(Variable::State(*x_init), true);
        for k in 0..n {
            problem.add_variable(Variable::vector(reference.inputs[k].to_vector().as_slice()), false);
            problem.add_variable(Variable::State(reference.states[k + 1]), false);
        }

        let dynamics = Arc::new(DynamicsFactor {
            dt: self.cfg.dt,
            vehicle: self.vehicle.clone(),
            suction: self.suction_model(),
            suction_jacobian: self.cfg.suction_jacobian,
        });
        let limit = Arc::new(LimitFactor {
            u_min: self.cfg.u_min_vec(),
            u_max: self.cfg.u_max_vec(),
        });
        let w = &self.weights;
        for k in 0..n {
            problem.add_factor(Factor::with_sqrt_weight(
                FactorKind::Dynamics,
                vec![state_index(k), input_index(k), state_index(k + 1)],
                w.dynamics.clone(),
                dynamics.clone(),
            )?);
        }
        for k in 1..=n {
            let weight = if k == n { &w.terminal } else { &w.stage };
            problem.add_factor(Factor::with_sqrt_weight(
                FactorKind::Reference,
                vec![state_index(k)],
                weight.clone(),
                Arc::new(ReferenceFactor {
                    target: reference.states[k],
                }),
            )?);
        }
        for k in 0..n - 1 {
            problem.add_factor(Factor::with_sqrt_weight(
                FactorKind::Rate,
                vec![input_index(k), input_index(k + 1)],
                w.rate.clone(),
                Arc::new(RateFactor),
            )?);
        }
        for k in 0..n {
            problem.add_factor(Factor::with_sqrt_weight(
                FactorKind::Limit,
                vec![input_index(k)],
                w.limit.clone(),
                limit.clone(),
            )?);
        }
        Ok(problem)
    }

    /// Rebuilds `x₁ … x_N` from the inputs so that each dynamics residual
    /// keeps only its component in the range of the input matrix `B`, the
    /// directions the dynamics covariance admits.
    fn project(&self, values: &mut [Variable]) -> Result<(), SolverError> {
        let dt = self.cfg.dt;
        for k in 0..self.cfg.horizon {
            let xk = *values[state_index(k)].as_state().ok_or(SolverError::Dimension("state".into()))?;
            let xk1 = *values[state_index(k + 1)].as_state().ok_or(SolverError::Dimension("state".into()))?;
            let uk = values[input_index(k)]
                .as_vector()
                .map(|u| ControlInput::from_slice(u.as_slice()))
                .ok_or(SolverError::Dimension("input".into()))?;
            let f_s = match self.cfg.suction_enabled {
                true => suction_force_world(&xk, &self.planes, &self.suction)
                    .map_err(|e| SolverError::Factor { factor: k, source: e.into() })?,
                false => Vector3::zeros(),
            };
            let r = dynamics_residual(&xk, &xk1, &uk, &f_s, &self.vehicle, dt);
            let e = self.input_matrix * (self.input_pinv * r);
            let (e_p, e_theta, e_v) = split_tangent(&e);
            let pred = propagate_with_force(&xk, &uk, dt, &f_s, &self.vehicle);
            values[state_index(k + 1)] = Variable::State(State::new(
                pred.p + xk.rot * e_p,
                xk.rot * so3_exp(&(uk.omega * dt + e_theta)),
                pred.v + xk.rot * e_v,
            ));
        }
        Ok(())
    }

    fn solve(
        &self,
        x_init: &State,
        reference: &ReferenceTrajectory,
        init: &MpcSolution,
    ) -> Result<MpcOutput, ControllerError> {
        let n = self.cfg.horizon;
        if init.inputs.len() != n || init.states.len() != n + 1 {
            return Err(ControllerError::WarmStart);
        }
        let problem = self.graph(x_init, reference)?;
        let mut values = init.to_values();
        values[0] = Variable::State(*x_init);
        let project = |v: &mut [Variable]| self.project(v);
        let projection: Option<Projection<'_>> = self.cfg.project_dynamics.then_some(&project);
        let (values, report) = lm_solve_projected(&problem, &values, &self.cfg.lm, projection)?;
        let solution = MpcSolution::from_values(&values, n);
        let u0 = solution.inputs[0].clamp(&self.cfg.u_min_vec(), &self.cfg.u_max_vec());
        Ok(MpcOutput { u0, solution, report })
    }
}

/// Result of one MPC solve.
#[derive(Debug, Clone, PartialEq)]
pub struct MpcOutput {
    /// First input, clamped to the actuator box.
    pub u0: ControlInput,
    pub solution: MpcSolution,
    pub report: SolveReport,
}

/// Factor graph of one MPC tick. Initial values are taken from the reference.
pub fn build_mpc_graph(
    x_init: &State,
    reference: &ReferenceTrajectory,
    planes: &[PlaneFrame],
    suction: &SuctionParams,
    vehicle: &VehicleParams,
    cfg: &MpcConfig,
) -> Result<Problem, ControllerError> {
    Model::new(cfg, vehicle, planes, suction)?.graph(x_init, reference)
}

/// Solves one MPC tick. Without a warm start the reference inputs are rolled
/// out from `x_init` to initialize the states.
pub fn mpc_step(
    x_init: &State,
    reference: &ReferenceTrajectory,
    planes: &[PlaneFrame],
    suction: &SuctionParams,
    vehicle: &VehicleParams,
    cfg: &MpcConfig,
    warm_start: Option<&MpcSolution>,
) -> Result<MpcOutput, ControllerError> {
    let model = Model::new(cfg, vehicle, planes, suction)?;
    let init = match warm_start {
        Some(w) => w.clone(),
        None => {
            let n = cfg.horizon.min(reference.len());
            model.rollout(x_init, &reference.inputs[..n])?
        }
    };
    model.solve(x_init, reference, &init)
}

/// Stateful receding-horizon controller with warm starting.
#[derive(Debug, Clone)]
pub struct MpcController {
    model: Model,
    previous: Option<(f64, MpcSolution)>,
}

impl MpcController {
    pub fn new(
        cfg: &MpcConfig,
        vehicle: &VehicleParams,
        planes: &[PlaneFrame],
        suction: &SuctionParams,
    ) -> Result<Self, ControllerError> {
        Ok(Self {
            model: Model::new(cfg, vehicle, planes, suction)?,
            previous: None,
        })
    }

    pub fn config(&self) -> &MpcConfig {
        &self.model.cfg
    }

    pub fn reset(&mut self) {
        self.previous = None;
    }

    /// Last optimized horizon, if any.
    pub fn previous_solution(&self) -> Option<&MpcSolution> {
        self.previous.as_ref().map(|(_, s)| s)
    }

    /// Initial guess for a solve at time `t` from state `x`: the previous
    /// inputs advanced by the elapsed time (or the reference inputs on the
    /// first tick), rolled out from `x`.
    pub fn warm_start(&self, t: f64, x: &State, reference: &ReferenceTrajectory) -> Result<MpcSolution, ControllerError> {
        let n = self.model.cfg.horizon;
        let inputs = match &self.previous {
            Some((t_prev, prev)) => prev.shifted_inputs((t - t_prev) / self.model.cfg.dt),
            None => reference.inputs[..n].to_vec(),
        };
        self.model.rollout(x, &inputs)
    }

    pub fn solve(&mut self, t: f64, x: &State, reference: &ReferenceTrajectory) -> Result<MpcOutput, ControllerError> {
        let cfg = &self.model.cfg;
        let window = reference.window(t, cfg.horizon + 1, cfg.dt);
        let init = self.warm_start(t, x, &window)?;
        let out = self.model.solve(x, &window, &init)?;
        self.previous = Some((t, out.solution.clone()));
        Ok(out)
    }
}

impl Controller for MpcController {
    fn step(&mut self, t: f64, x: &State, reference: &ReferenceTrajectory) -> ControlOutput {
        match self.solve(t, x, reference) {
            Ok(out) => ControlOutput {
                input: out.u0,
                cost: out.report.final_cost,
                degraded: false,
                report: Some(out.report),
            },
            Err(_) => {
                let cfg = &self.model.cfg;
                let window = reference.window(t, cfg.horizon + 1, cfg.dt);
                let fallback = self
                    .warm_start(t, x, &window)
                    .unwrap_or_else(|_| MpcSolution {
                        states: vec![*x; cfg.horizon + 1],
                        inputs: window.inputs[..cfg.horizon].to_vec(),
                    });
                let input = fallback.inputs[0].clamp(&cfg.u_min_vec(), &cfg.u_max_vec());
                self.previous = Some((t, fallback));
                ControlOutput {
                    input,
                    cost: f64::NAN,
                    degraded: true,
                    report: None,
                }
            }
        }
    }
}
