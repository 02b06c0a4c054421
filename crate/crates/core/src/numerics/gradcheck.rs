//! Central finite-difference certification of tape gradients.

use super::{Graph, ParamId, ParamStore, Real, Tensor, Var};
use crate::error::{invalid, Result};

/// Gradients smaller than this in magnitude are compared absolutely.
const REL_FLOOR: Real = 1e-6;

fn rel_err(analytic: Real, numeric: Real) -> Real {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

fn eval_scalar(g: &Graph, v: Var) -> Result<Real> {
    let t = g.value(v);
    if t.numel() != 1 {
        return Err(invalid(format!(
            "gradient check needs a scalar output, got shape {:?}",
            t.shape()
        )));
    }
    Ok(t.data()[0])
}

/// Maximum relative error between reverse-mode gradients of `f` with
/// respect to every element of `inputs` and central differences with step `eps`.
pub fn gradient_check<F>(inputs: &[Tensor], eps: Real, f: F) -> Result<Real>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let analytic: Vec<Vec<Real>> = {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        eval_scalar(&g, out)?;
        let grads = g.backward(out);
        vars.iter()
            .zip(inputs)
            .map(|(v, t)| {
                grads
                    .wrt(*v)
                    .map_or_else(|| vec![0.0; t.numel()], |s| s.to_vec())
            })
            .collect()
    };

    let eval = |point: &[Tensor]| -> Result<Real> {
        let mut g = Graph::new();
        let vars: Vec<Var> = point.iter().map(|t| g.leaf(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        eval_scalar(&g, out)
    };

    let mut point = inputs.to_vec();
    let mut worst: Real = 0.0;
    for (ti, grad) in analytic.iter().enumerate() {
        for i in 0..grad.len() {
            let orig = point[ti].data()[i];
            point[ti].data_mut()[i] = orig + eps;
            let plus = eval(&point)?;
            point[ti].data_mut()[i] = orig - eps;
            let minus = eval(&point)?;
            point[ti].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            worst = worst.max(rel_err(grad[i], numeric));
        }
    }
    Ok(worst)
}

/// Same check against parameters in a store. At most `max_coords` evenly
/// spaced coordinates are probed per parameter tensor.
pub fn gradient_check_params<F>(
    store: &mut ParamStore,
    ids: &[ParamId],
    max_coords: usize,
    eps: Real,
    f: F,
) -> Result<Real>
where
    F: Fn(&mut Graph) -> Result<Var>,
{
    let analytic: Vec<Vec<Real>> = {
        let mut g = Graph::with_params(store);
        let out = f(&mut g)?;
        eval_scalar(&g, out)?;
        let grads = g.backward(out);
        ids.iter()
            .map(|&id| {
                grads
                    .param(id)
                    .map_or_else(|| vec![0.0; store.get(id).numel()], |s| s.to_vec())
            })
            .collect()
    };

    let mut worst: Real = 0.0;
    for (&id, grad) in ids.iter().zip(&analytic) {
        let n = grad.len();
        let probes = max_coords.min(n).max(1);
        for j in 0..probes {
            let i = j * n / probes;
            let orig = store.get(id).data()[i];
            store.get_mut(id).data_mut()[i] = orig + eps;
            let plus = {
                let mut g = Graph::with_params(store);
                let out = f(&mut g)?;
                eval_scalar(&g, out)?
            };
            store.get_mut(id).data_mut()[i] = orig - eps;
            let minus = {
                let mut g = Graph::with_params(store);
                let out = f(&mut g)?;
                eval_scalar(&g, out)?
            };
            store.get_mut(id).data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            worst = worst.max(rel_err(grad[i], numeric));
        }
    }
    Ok(worst)
}
