//! Central finite-difference checks against the tape's analytic gradients.

use super::graph::{Graph, Var};
use super::params::ParameterStore;
use super::tensor::Tensor;
use crate::error::Result;

pub const FD_STEP: f64 = 1e-6;

/// Gradients below this magnitude are compared absolutely; above it, relatively.
pub const REL_FLOOR: f64 = 1e-3;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares analytic and central-difference gradients of a scalar function of
/// several input tensors.
///
/// `f` rebuilds the computation from scratch on a fresh graph given leaf
/// variables for each input and returns the scalar loss. Returns the largest
/// relative error over every input entry.
pub fn check_inputs<F>(inputs: &[Tensor], f: F) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    check_inputs_offset(inputs, 0.0, f)
}

/// [`check_inputs`] with `offset` added to every analytic gradient, a
/// negative control for the checker itself.
pub fn check_inputs_offset<F>(inputs: &[Tensor], offset: f64, f: F) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let loss = f(&mut g, &vars)?;
    let grads = g.backward(loss)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| grads.get(v)).collect();

    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| g.constant(t.clone())).collect();
        let loss = f(&mut g, &vars)?;
        Ok(g.scalar(loss))
    };

    let mut worst: f64 = 0.0;
    let mut work = inputs.to_vec();
    for (k, input) in inputs.iter().enumerate() {
        for i in 0..input.len() {
            let orig = input.data()[i];
            work[k].data_mut()[i] = orig + FD_STEP;
            let up = eval(&work)?;
            work[k].data_mut()[i] = orig - FD_STEP;
            let down = eval(&work)?;
            work[k].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            worst = worst.max(relative_error(analytic[k].data()[i] + offset, numeric));
        }
    }
    Ok(worst)
}

/// Same comparison for every scalar of every parameter in `store`. `f`
/// builds the loss from the store's current values.
pub fn check_params<F>(store: &ParameterStore, offset: f64, f: F) -> Result<f64>
where
    F: Fn(&mut Graph, &ParameterStore) -> Result<Var>,
{
    let mut work = store.clone();
    work.zero_grads();
    let mut g = Graph::new();
    let loss = f(&mut g, &work)?;
    g.backward_into(loss, &mut work)?;
    let analytic: Vec<Tensor> = work.ids().map(|id| work.grad(id).clone()).collect();

    let mut worst: f64 = 0.0;
    let ids: Vec<_> = work.ids().collect();
    for (k, id) in ids.into_iter().enumerate() {
        for i in 0..analytic[k].len() {
            let orig = work.value(id).data()[i];
            let mut eval = |v: f64| -> Result<f64> {
                work.value_mut(id).data_mut()[i] = v;
                let mut g = Graph::new();
                let loss = f(&mut g, &work)?;
                Ok(g.scalar(loss))
            };
            let up = eval(orig + FD_STEP)?;
            let down = eval(orig - FD_STEP)?;
            work.value_mut(id).data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            worst = worst.max(relative_error(analytic[k].data()[i] + offset, numeric));
        }
    }
    Ok(worst)
}
