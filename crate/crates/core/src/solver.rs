//! Levenberg–Marquardt over manifold-valued variable blocks.
//!
//! Each iteration solves `(JᵀJ + λ·diag(JᵀJ))·Δ = −Jᵀr` with a Cholesky
//! factorization restricted to the band of the normal matrix. Chain-shaped
//! graphs (an MPC horizon ordered `x₀, u₀, x₁, u₁, …`) have a narrow band, so
//! the solve is linear in the horizon length. Fixed variables contribute no
//! columns.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::factors::{Factor, FactorError};
use crate::manifold::{State, Tangent};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SolverError {
    #[error("factor {factor}: {source}")]
    Factor { factor: usize, source: FactorError },
    #[error("factor {factor} references variable {var}, but the problem has {count}")]
    UnknownVariable { factor: usize, var: usize, count: usize },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("problem has no factors")]
    Empty,
    #[error("damped normal matrix is singular (lambda = {lambda:e})")]
    Singular { lambda: f64 },
}

/// One optimization variable.
#[derive(Debug, Clone, PartialEq)]
pub enum Variable {
    /// A quadrotor state; tangent dimension 9.
    State(State),
    /// A Euclidean vector with optional componentwise lower bounds applied
    /// after each update.
    Vector {
        value: DVector<f64>,
        lower: Option<DVector<f64>>,
    },
}

impl Variable {
    pub fn vector(values: &[f64]) -> Self {
        Variable::Vector {
            value: DVector::from_column_slice(values),
            lower: None,
        }
    }

    pub fn bounded(values: &[f64], lower: &[f64]) -> Self {
        Variable::Vector {
            value: DVector::from_column_slice(values),
            lower: Some(DVector::from_column_slice(lower)),
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Variable::State(_) => 9,
            Variable::Vector { value, .. } => value.len(),
        }
    }

    pub fn as_state(&self) -> Option<&State> {
        match self {
            Variable::State(s) => Some(s),
            _ => None,
        }
    }

    pub fn as_vector(&self) -> Option<&DVector<f64>> {
        match self {
            Variable::Vector { value, .. } => Some(value),
            _ => None,
        }
    }

    /// `self ⊞ delta`.
    pub fn retract(&self, delta: &[f64]) -> Variable {
        match self {
            Variable::State(s) => Variable::State(s.boxplus(&Tangent::from_column_slice(delta))),
            Variable::Vector { value, lower } => {
                let mut v = value + DVector::from_column_slice(delta);
                if let Some(lo) = lower {
                    v.zip_apply(lo, |x, l| *x = x.max(l));
                }
                Variable::Vector {
                    value: v,
                    lower: lower.clone(),
                }
            }
        }
    }

    fn same_shape(&self, other: &Variable) -> bool {
        matches!(
            (self, other),
            (Variable::State(_), Variable::State(_)) | (Variable::Vector { .. }, Variable::Vector { .. })
        ) && self.dim() == other.dim()
    }
}

/// A factor graph: variables with initial values, a fixed mask and factors.
#[derive(Debug, Clone, Default)]
pub struct Problem {
    pub variables: Vec<Variable>,
    pub fixed: Vec<bool>,
    pub factors: Vec<Factor>,
}

impl Problem {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_variable(&mut self, value: Variable, fixed: bool) -> usize {
        self.variables.push(value);
        self.fixed.push(fixed);
        self.variables.len() - 1
    }

    pub fn add_factor(&mut self, factor: Factor) -> usize {
        self.factors.push(factor);
        self.factors.len() - 1
    }

    pub fn free_variable_count(&self) -> usize {
        self.fixed.iter().filter(|f| !**f).count()
    }

    /// Number of columns of the solve.
    pub fn free_dim(&self) -> usize {
        self.variables
            .iter()
            .zip(&self.fixed)
            .filter(|(_, f)| !**f)
            .map(|(v, _)| v.dim())
            .sum()
    }

    pub fn validate(&self) -> Result<(), SolverError> {
        if self.factors.is_empty() {
            return Err(SolverError::Empty);
        }
        if self.fixed.len() != self.variables.len() {
            return Err(SolverError::Dimension("fixed mask length differs from variable count".into()));
        }
        for (i, f) in self.factors.iter().enumerate() {
            for &v in &f.var_ids {
                if v >= self.variables.len() {
                    return Err(SolverError::UnknownVariable {
                        factor: i,
                        var: v,
                        count: self.variables.len(),
                    });
                }
            }
        }
        Ok(())
    }

    fn check_values(&self, values: &[Variable]) -> Result<(), SolverError> {
        if values.len() != self.variables.len()
            || values.iter().zip(&self.variables).any(|(a, b)| !a.same_shape(b))
        {
            return Err(SolverError::Dimension("values do not match the problem's variables".into()));
        }
        Ok(())
    }

    fn column_offsets(&self) -> Vec<Option<usize>> {
        let mut col = 0;
        self.variables
            .iter()
            .zip(&self.fixed)
            .map(|(v, fixed)| {
                if *fixed {
                    None
                } else {
                    let start = col;
                    col += v.dim();
                    Some(start)
                }
            })
            .collect()
    }
}

/// Whitened rows contributed by one factor.
#[derive(Debug, Clone)]
pub struct FactorRows {
    pub row: usize,
    pub residual: DVector<f64>,
    /// `(variable index, S·J)` for every variable of the factor.
    pub jacobians: Vec<(usize, DMatrix<f64>)>,
}

/// Whitened, block-sparse linear system at one point.
#[derive(Debug, Clone)]
pub struct Linearized {
    pub blocks: Vec<FactorRows>,
    /// Stacked whitened residual `S·r`.
    pub residual: DVector<f64>,
    /// `½‖S·r‖²`.
    pub cost: f64,
}

impl Linearized {
    /// Dense whitened Jacobian over all variables (fixed ones included),
    /// mostly for inspection and tests.
    pub fn dense_jacobian(&self, problem: &Problem) -> DMatrix<f64> {
        let mut offsets = Vec::with_capacity(problem.variables.len());
        let mut col = 0;
        for v in &problem.variables {
            offsets.push(col);
            col += v.dim();
        }
        let mut j = DMatrix::zeros(self.residual.len(), col);
        for b in &self.blocks {
            for (var, m) in &b.jacobians {
                j.view_mut((b.row, offsets[*var]), (m.nrows(), m.ncols())).copy_from(m);
            }
        }
        j
    }
}

fn factor_vars<'a>(factor: &Factor, values: &'a [Variable]) -> Vec<&'a Variable> {
    factor.var_ids.iter().map(|&i| &values[i]).collect()
}

pub fn linearize(problem: &Problem, values: &[Variable]) -> Result<Linearized, SolverError> {
    problem.validate()?;
    problem.check_values(values)?;
    let total: usize = problem.factors.iter().map(|f| f.residual_dim()).sum();
    let mut residual = DVector::zeros(total);
    let mut blocks = Vec::with_capacity(problem.factors.len());
    let mut row = 0;
    for (i, f) in problem.factors.iter().enumerate() {
        let vars = factor_vars(f, values);
        let lin = f
            .residual
            .linearize(&vars)
            .map_err(|source| SolverError::Factor { factor: i, source })?;
        let dim = f.residual_dim();
        if lin.residual.len() != dim || lin.jacobians.len() != vars.len() {
            return Err(SolverError::Dimension(format!("factor {i} returned inconsistent shapes")));
        }
        let r = &f.sqrt_weight * &lin.residual;
        residual.rows_mut(row, dim).copy_from(&r);
        let mut jacobians = Vec::with_capacity(vars.len());
        for (k, (j, v)) in lin.jacobians.into_iter().zip(&vars).enumerate() {
            if j.nrows() != dim || j.ncols() != v.dim() {
                return Err(SolverError::Dimension(format!(
                    "factor {i}: jacobian {k} is {}x{}, expected {dim}x{}",
                    j.nrows(),
                    j.ncols(),
                    v.dim()
                )));
            }
            jacobians.push((f.var_ids[k], &f.sqrt_weight * j));
        }
        blocks.push(FactorRows { row, residual: r, jacobians });
        row += dim;
    }
    let cost = 0.5 * residual.norm_squared();
    Ok(Linearized { blocks, residual, cost })
}

/// `½ Σ ‖S_i·r_i‖²` without Jacobians.
pub fn evaluate_cost(problem: &Problem, values: &[Variable]) -> Result<f64, SolverError> {
    let mut cost = 0.0;
    for (i, f) in problem.factors.iter().enumerate() {
        let r = f
            .residual
            .residual(&factor_vars(f, values))
            .map_err(|source| SolverError::Factor { factor: i, source })?;
        cost += 0.5 * (&f.sqrt_weight * r).norm_squared();
    }
    Ok(cost)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LmOptions {
    pub max_iter: usize,
    pub lambda0: f64,
    pub lambda_up: f64,
    pub lambda_down: f64,
    pub grad_tol: f64,
    pub step_tol: f64,
}

impl Default for LmOptions {
    fn default() -> Self {
        Self {
            max_iter: 30,
            lambda0: 1e-4,
            lambda_up: 10.0,
            lambda_down: 0.5,
            grad_tol: 1e-8,
            step_tol: 1e-10,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Gradient,
    Step,
    MaxIter,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    /// Attempted steps, accepted or not.
    pub iterations: usize,
    pub accepted: usize,
    pub initial_cost: f64,
    pub final_cost: f64,
    pub converged: bool,
    pub termination: Termination,
    /// Seconds.
    pub wall_time: f64,
    /// Cost after every accepted step, starting with the initial cost.
    pub cost_history: Vec<f64>,
}

/// Damping is refused as singular once it reaches this value.
pub const SINGULAR_LAMBDA: f64 = 1e8;

pub fn lm_solve(
    problem: &Problem,
    init: &[Variable],
    opts: &LmOptions,
) -> Result<(Vec<Variable>, SolveReport), SolverError> {
    lm_solve_projected(problem, init, opts, None)
}

/// Maps a point onto a feasible set before it is evaluated. Must leave fixed
/// variables untouched and be idempotent.
pub type Projection<'a> = &'a (dyn Fn(&mut [Variable]) -> Result<(), SolverError> + Sync);

/// [`lm_solve`] where the initial point and every trial point are passed
/// through `project` before their cost is evaluated. Steps are still accepted
/// only on cost decrease.
pub fn lm_solve_projected(
    problem: &Problem,
    init: &[Variable],
    opts: &LmOptions,
    project: Option<Projection<'_>>,
) -> Result<(Vec<Variable>, SolveReport), SolverError> {
    let start = Instant::now();
    problem.validate()?;
    problem.check_values(init)?;

    let offsets = problem.column_offsets();
    let n = problem.free_dim();
    let bandwidth = bandwidth(problem, &offsets);

    let mut values = init.to_vec();
    if let Some(project) = project {
        project(&mut values)?;
    }
    let mut lin = linearize(problem, &values)?;
    let initial_cost = lin.cost;
    let mut cost = lin.cost;
    let mut history = vec![cost];
    let mut lambda = opts.lambda0;
    let mut iterations = 0;
    let mut accepted = 0;
    let mut termination = Termination::MaxIter;

    if n == 0 {
        termination = Termination::Step;
    }

    let mut normal = NormalEquations::new(n);
    normal.assemble(&lin, &offsets);

    while n > 0 && iterations < opts.max_iter {
        if normal.gradient.amax() < opts.grad_tol {
            termination = Termination::Gradient;
            break;
        }

        let step = loop {
            match normal.solve_damped(lambda, bandwidth) {
                Some(step) => break step,
                None if lambda >= SINGULAR_LAMBDA => return Err(SolverError::Singular { lambda }),
                None => lambda = (lambda * opts.lambda_up).max(f64::MIN_POSITIVE),
            }
        };
        if step.norm() < opts.step_tol {
            termination = Termination::Step;
            break;
        }

        iterations += 1;
        let mut candidate = retract_all(&values, &step, &offsets);
        let projected = match project {
            Some(project) => project(&mut candidate).is_ok(),
            None => true,
        };
        let new_cost = if projected {
            evaluate_cost(problem, &candidate).unwrap_or(f64::INFINITY)
        } else {
            f64::INFINITY
        };
        if new_cost.is_finite() && new_cost < cost {
            values = candidate;
            lin = linearize(problem, &values)?;
            cost = lin.cost;
            history.push(cost);
            accepted += 1;
            lambda *= opts.lambda_down;
            normal.assemble(&lin, &offsets);
        } else {
            lambda = (lambda * opts.lambda_up).max(f64::MIN_POSITIVE);
        }
    }

    let report = SolveReport {
        iterations,
        accepted,
        initial_cost,
        final_cost: cost,
        converged: termination != Termination::MaxIter,
        termination,
        wall_time: start.elapsed().as_secs_f64(),
        cost_history: history,
    };
    Ok((values, report))
}

fn retract_all(values: &[Variable], step: &DVector<f64>, offsets: &[Option<usize>]) -> Vec<Variable> {
    values
        .iter()
        .zip(offsets)
        .map(|(v, off)| match off {
            Some(c) => v.retract(&step.as_slice()[*c..*c + v.dim()]),
            None => v.clone(),
        })
        .collect()
}

/// Half-bandwidth of `JᵀJ` in the free-column ordering.
fn bandwidth(problem: &Problem, offsets: &[Option<usize>]) -> usize {
    let mut bw = 0;
    for f in &problem.factors {
        let mut lo = usize::MAX;
        let mut hi = 0;
        for &v in &f.var_ids {
            if let Some(c) = offsets[v] {
                lo = lo.min(c);
                hi = hi.max(c + problem.variables[v].dim());
            }
        }
        if hi > lo {
            bw = bw.max(hi - 1 - lo);
        }
    }
    bw
}

struct NormalEquations {
    hessian: DMatrix<f64>,
    gradient: DVector<f64>,
}

impl NormalEquations {
    fn new(n: usize) -> Self {
        Self {
            hessian: DMatrix::zeros(n, n),
            gradient: DVector::zeros(n),
        }
    }

    fn assemble(&mut self, lin: &Linearized, offsets: &[Option<usize>]) {
        self.hessian.fill(0.0);
        self.gradient.fill(0.0);
        for block in &lin.blocks {
            for (va, ja) in &block.jacobians {
                let Some(ca) = offsets[*va] else { continue };
                let mut g = self.gradient.rows_mut(ca, ja.ncols());
                g += ja.tr_mul(&block.residual);
                for (vb, jb) in &block.jacobians {
                    let Some(cb) = offsets[*vb] else { continue };
                    let mut h = self.hessian.view_mut((ca, cb), (ja.ncols(), jb.ncols()));
                    h += ja.tr_mul(jb);
                }
            }
        }
    }

    fn solve_damped(&self, lambda: f64, bandwidth: usize) -> Option<DVector<f64>> {
        let mut a = self.hessian.clone();
        for i in 0..a.nrows() {
            let d = a[(i, i)];
            a[(i, i)] = d + lambda * d.max(1e-12);
        }
        banded_cholesky_solve(&mut a, bandwidth, &(-&self.gradient))
    }
}

/// Solves `A·x = b` for symmetric positive definite `A` whose nonzeros lie
/// within `bw` of the diagonal. `A` is overwritten by its Cholesky factor.
/// Returns `None` on a non-positive or non-finite pivot.
pub fn banded_cholesky_solve(a: &mut DMatrix<f64>, bw: usize, b: &DVector<f64>) -> Option<DVector<f64>> {
    let n = a.nrows();
    for j in 0..n {
        let k0 = j.saturating_sub(bw);
        let mut d = a[(j, j)];
        for k in k0..j {
            d -= a[(j, k)] * a[(j, k)];
        }
        if !(d > 0.0 && d.is_finite()) {
            return None;
        }
        let ljj = d.sqrt();
        a[(j, j)] = ljj;
        for i in j + 1..(j + bw + 1).min(n) {
            let mut s = a[(i, j)];
            for k in i.saturating_sub(bw).max(k0)..j {
                s -= a[(i, k)] * a[(j, k)];
            }
            a[(i, j)] = s / ljj;
        }
    }
    // forward: L y = b
    let mut y = b.clone();
    for i in 0..n {
        let mut s = y[i];
        for k in i.saturating_sub(bw)..i {
            s -= a[(i, k)] * y[k];
        }
        y[i] = s / a[(i, i)];
    }
    // backward: Lᵀ x = y
    for i in (0..n).rev() {
        let mut s = y[i];
        for k in i + 1..(i + bw + 1).min(n) {
            s -= a[(k, i)] * y[k];
        }
        y[i] = s / a[(i, i)];
    }
    y.iter().all(|v| v.is_finite()).then_some(y)
}
