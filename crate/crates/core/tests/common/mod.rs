#![allow(dead_code)]

use nalgebra::{DMatrix, Vector3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use wallmpc::dynamics::ControlInput;
use wallmpc::factors::Residual;
use wallmpc::manifold::{so3_exp, State};
use wallmpc::solver::Variable;

pub fn random_vec(rng: &mut ChaCha8Rng, scale: f64) -> Vector3<f64> {
    Vector3::from_fn(|_, _| rng.random_range(-scale..scale))
}

/// State with rotation angle below 3 rad.
pub fn random_state(rng: &mut ChaCha8Rng) -> State {
    let axis = random_vec(rng, 1.0).normalize();
    let angle = rng.random_range(0.0..3.0);
    State::new(random_vec(rng, 5.0), so3_exp(&(axis * angle)), random_vec(rng, 3.0))
}

pub fn random_input(rng: &mut ChaCha8Rng) -> ControlInput {
    ControlInput::new(rng.random_range(0.0..20.0), random_vec(rng, 3.0))
}

pub fn input_var(u: &ControlInput) -> Variable {
    Variable::vector(u.to_vector().as_slice())
}

/// Central differences of `f` under ⊞ perturbations of variable `which`.
pub fn numeric_jacobian<F>(vars: &[Variable], which: usize, h: f64, f: F) -> DMatrix<f64>
where
    F: Fn(&[&Variable]) -> nalgebra::DVector<f64>,
{
    let dim = vars[which].dim();
    let eval = |delta: &[f64]| {
        let mut moved: Vec<Variable> = vars.to_vec();
        moved[which] = vars[which].retract(delta);
        let refs: Vec<&Variable> = moved.iter().collect();
        f(&refs)
    };
    let rows = eval(&vec![0.0; dim]).len();
    let mut j = DMatrix::zeros(rows, dim);
    for c in 0..dim {
        let mut d = vec![0.0; dim];
        d[c] = h;
        let plus = eval(&d);
        d[c] = -h;
        let minus = eval(&d);
        j.set_column(c, &((plus - minus) / (2.0 * h)));
    }
    j
}

/// `‖A − B‖_F / max(‖B‖_F, 1)`.
pub fn relative_error(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).norm() / b.norm().max(1.0)
}

/// Largest relative error between analytic and numeric Jacobians of a factor.
pub fn factor_jacobian_error(factor: &dyn Residual, vars: &[Variable]) -> f64 {
    let refs: Vec<&Variable> = vars.iter().collect();
    let lin = factor.linearize(&refs).unwrap();
    (0..vars.len())
        .map(|i| {
            let num = numeric_jacobian(vars, i, 1e-6, |v| factor.residual(v).unwrap());
            relative_error(&lin.jacobians[i], &num)
        })
        .fold(0.0, f64::max)
}
