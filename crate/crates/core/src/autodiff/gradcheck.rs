//! Central finite-difference oracle for analytic gradients.

use super::params::{ParamId, ParamStore};
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::Result;

pub const DEFAULT_STEP: f64 = 1e-5;

/// Relative error with the `max(|a|, |n|, 1e-8)` denominator.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares the tape gradient of the scalar `f(params)` against central
/// differences `(f(θ+h) − f(θ−h)) / 2h` and returns the largest relative
/// error over every parameter entry.
pub fn finite_diff_check<F>(f: F, params: &[Tensor], h: f64) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let mut store = ParamStore::new();
    let ids: Vec<_> = params
        .iter()
        .enumerate()
        .map(|(i, t)| store.add(format!("p{i}"), t.clone()))
        .collect();
    check_store(
        &mut store,
        |tape| {
            let vars: Vec<Var<'_>> = ids.iter().map(|&id| tape.param(id)).collect();
            f(tape, &vars)
        },
        h,
    )
}

/// Same check over every tensor of a parameter store. `f` reads parameters
/// through [`Tape::param`].
pub fn check_store<F>(store: &mut ParamStore, f: F, h: f64) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape) -> Result<Var<'t>>,
{
    let ids: Vec<_> = store.ids().collect();
    check_store_params(store, &ids, f, h)
}

/// [`check_store`] restricted to the parameters in `ids`.
pub fn check_store_params<F>(store: &mut ParamStore, ids: &[ParamId], f: F, h: f64) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape) -> Result<Var<'t>>,
{
    let analytic = {
        let tape = Tape::with_params(store);
        let loss = f(&tape)?;
        tape.backward(loss)?.into_param_grads()
    };
    let eval = |s: &ParamStore| -> Result<f64> {
        let tape = Tape::with_params(s);
        Ok(f(&tape)?.item())
    };
    let mut worst = 0.0f64;
    for &id in ids {
        let Some(grad) = analytic[id.index()].clone() else {
            continue;
        };
        for i in 0..store.get(id).numel() {
            let orig = store.get(id).data()[i];
            store.get_mut(id).data_mut()[i] = orig + h;
            let up = eval(store)?;
            store.get_mut(id).data_mut()[i] = orig - h;
            let down = eval(store)?;
            store.get_mut(id).data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            worst = worst.max(relative_error(grad.data()[i], numeric));
        }
    }
    Ok(worst)
}
