//! Finite-difference gradient checking utilities.
//!
//! Used by the unit tests of every operation and by the model-level checks in
//! the acceptance suite. Central differences in `f64` resolve gradients to
//! roughly 1e-10 absolute for well-scaled losses, far below the tolerances
//! asserted anywhere in this crate.

use ndarray::ArrayD;

use super::{Graph, Var};

/// Relative error with an absolute guard so near-zero pairs do not explode.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Central difference of a scalar-valued function at `x0`.
pub fn central_difference(mut eval: impl FnMut(f64) -> f64, x0: f64, eps: f64) -> f64 {
    (eval(x0 + eps) - eval(x0 - eps)) / (2.0 * eps)
}

/// Step size scaled to the magnitude of the perturbed value.
pub fn step_for(x: f64) -> f64 {
    1e-6 * x.abs().max(1.0)
}

const CHECK_SEED: u64 = 0x5eed;

fn eval_loss(inputs: &[ArrayD<f64>], build: &impl Fn(&mut Graph, &[Var]) -> Var) -> f64 {
    let mut g = Graph::new(true, CHECK_SEED);
    let vars: Vec<Var> = inputs.iter().map(|a| g.leaf(a.clone())).collect();
    let loss = build(&mut g, &vars);
    g.value(loss)[0]
}

/// Checks every element of every input of a small op graph against central
/// differences. Panics with a located message on mismatch.
pub fn check_op(inputs: &[ArrayD<f64>], build: impl Fn(&mut Graph, &[Var]) -> Var) {
    let mut g = Graph::new(true, CHECK_SEED);
    let vars: Vec<Var> = inputs.iter().map(|a| g.leaf(a.clone())).collect();
    let loss = build(&mut g, &vars);
    let grads = g.backward(loss);

    for (i, input) in inputs.iter().enumerate() {
        let analytic = grads
            .get(vars[i])
            .cloned()
            .unwrap_or_else(|| ArrayD::zeros(input.raw_dim()));
        let flat = input.as_slice().expect("standard layout");
        for j in 0..flat.len() {
            let x0 = flat[j];
            let eps = step_for(x0);
            let numeric = central_difference(
                |x| {
                    let mut perturbed: Vec<ArrayD<f64>> = inputs.to_vec();
                    perturbed[i].as_slice_mut().unwrap()[j] = x;
                    eval_loss(&perturbed, &build)
                },
                x0,
                eps,
            );
            let a = analytic.as_slice().unwrap()[j];
            let err = relative_error(a, numeric);
            assert!(
                err < 1e-4 || (a - numeric).abs() < 1e-8,
                "input {i} element {j}: analytic {a} vs numeric {numeric} (rel {err:.3e})"
            );
        }
    }
}
