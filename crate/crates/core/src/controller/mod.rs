//! Tracking controllers: factor-graph MPC (with or without the suction model)
//! and a cascaded PID baseline.

pub mod mpc;
pub mod pid;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::ControlInput;
use crate::factors::FactorError;
use crate::manifold::{so3_exp, so3_log_unchecked, State};
use crate::solver::{SolveReport, SolverError};
use crate::suction::SuctionError;

pub use mpc::{build_mpc_graph, mpc_step, MpcConfig, MpcController, MpcOutput, MpcSolution};
pub use pid::{pid_step, CascadedPid, PidConfig};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ControllerError {
    #[error("invalid controller configuration: {0}")]
    Config(String),
    #[error("reference has {got} samples, horizon needs {needed}")]
    Horizon { needed: usize, got: usize },
    #[error("invalid reference trajectory: {0}")]
    Reference(String),
    #[error("warm start has the wrong length")]
    WarmStart,
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error(transparent)]
    Factor(#[from] FactorError),
    #[error(transparent)]
    Suction(#[from] SuctionError),
}

/// Time-stamped reference states and inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceTrajectory {
    pub times: Vec<f64>,
    pub states: Vec<State>,
    pub inputs: Vec<ControlInput>,
}

impl ReferenceTrajectory {
    pub fn new(times: Vec<f64>, states: Vec<State>, inputs: Vec<ControlInput>) -> Result<Self, ControllerError> {
        if times.is_empty() {
            return Err(ControllerError::Reference("empty".into()));
        }
        if times.len() != states.len() || times.len() != inputs.len() {
            return Err(ControllerError::Reference("times, states and inputs differ in length".into()));
        }
        if times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(ControllerError::Reference("timestamps must be strictly increasing".into()));
        }
        Ok(Self { times, states, inputs })
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn start(&self) -> f64 {
        self.times[0]
    }

    pub fn end(&self) -> f64 {
        *self.times.last().unwrap()
    }

    /// Interpolated state and input at `t`, held constant outside the sampled span.
    pub fn sample(&self, t: f64) -> (State, ControlInput) {
        let n = self.len();
        if t <= self.times[0] || n == 1 {
            return (self.states[0], self.inputs[0]);
        }
        if t >= self.times[n - 1] {
            return (self.states[n - 1], self.inputs[n - 1]);
        }
        let i = self.times.partition_point(|s| *s <= t) - 1;
        let (t0, t1) = (self.times[i], self.times[i + 1]);
        let a = (t - t0) / (t1 - t0);
        if a == 0.0 {
            return (self.states[i], self.inputs[i]);
        }
        let (x0, x1) = (&self.states[i], &self.states[i + 1]);
        let rel = so3_log_unchecked(&(x0.rot.transpose() * x1.rot));
        let state = State::new(
            x0.p.lerp(&x1.p, a),
            x0.rot * so3_exp(&(rel * a)),
            x0.v.lerp(&x1.v, a),
        );
        let (u0, u1) = (&self.inputs[i], &self.inputs[i + 1]);
        let input = ControlInput::new(u0.thrust + a * (u1.thrust - u0.thrust), u0.omega.lerp(&u1.omega, a));
        (state, input)
    }

    /// `count` samples starting at `t0`, spaced `dt`.
    pub fn window(&self, t0: f64, count: usize, dt: f64) -> ReferenceTrajectory {
        let times: Vec<f64> = (0..count).map(|k| t0 + k as f64 * dt).collect();
        let (states, inputs) = times.iter().map(|t| self.sample(*t)).unzip();
        ReferenceTrajectory { times, states, inputs }
    }

    /// A constant reference.
    pub fn hold(state: State, input: ControlInput, count: usize, dt: f64) -> ReferenceTrajectory {
        ReferenceTrajectory {
            times: (0..count).map(|k| k as f64 * dt).collect(),
            states: vec![state; count],
            inputs: vec![input; count],
        }
    }
}

/// What a controller hands back to the simulator on each tick.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlOutput {
    pub input: ControlInput,
    /// Final optimization cost (0 for controllers without one).
    pub cost: f64,
    /// Set when the optimizer failed and a fallback input was used.
    pub degraded: bool,
    pub report: Option<SolveReport>,
}

/// A tracking controller driven once per control tick.
pub trait Controller: Send {
    fn step(&mut self, t: f64, x: &State, reference: &ReferenceTrajectory) -> ControlOutput;
}

/// Serializes a square weight as its diagonal when it is diagonal, otherwise
/// as rows; accepts either form.
pub(crate) mod weight_serde {
    use super::*;
    use serde::{Deserializer, Serializer};

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Diagonal(Vec<f64>),
        Rows(Vec<Vec<f64>>),
    }

    pub fn serialize<S: Serializer>(m: &DMatrix<f64>, s: S) -> Result<S::Ok, S::Error> {
        let diagonal = (0..m.nrows()).all(|i| (0..m.ncols()).all(|j| i == j || m[(i, j)] == 0.0));
        if diagonal {
            Repr::Diagonal(m.diagonal().iter().copied().collect()).serialize(s)
        } else {
            Repr::Rows(m.row_iter().map(|r| r.iter().copied().collect()).collect()).serialize(s)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DMatrix<f64>, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Diagonal(v) => Ok(DMatrix::from_diagonal(&nalgebra::DVector::from_vec(v))),
            Repr::Rows(rows) => {
                let n = rows.len();
                if rows.iter().any(|r| r.len() != n) {
                    return Err(serde::de::Error::custom("weight rows must form a square matrix"));
                }
                Ok(DMatrix::from_fn(n, n, |i, j| rows[i][j]))
            }
        }
    }
}
