//! Central-difference gradient checks.

use super::{Graph, ParamStore, Tensor, Var};
use crate::error::{Error, Result};

fn check_eps(eps: f64) -> Result<()> {
    if eps > 0.0 && eps <= 1e-2 {
        Ok(())
    } else {
        Err(Error::contract(format!("grad_check eps {eps} outside (0, 1e-2]")))
    }
}

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs())
}

fn eval_scalar(g: &Graph<'_>, y: Var) -> Result<f64> {
    if g.value(y).len() != 1 {
        return Err(Error::contract(format!(
            "grad_check function must return a scalar, got {:?}",
            g.shape(y)
        )));
    }
    Ok(g.scalar_value(y))
}

/// Max over coordinates of `|analytic - numeric| / max(1, |analytic|, |numeric|)`.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph<'_>, Var) -> Result<Var>,
{
    check_eps(eps)?;
    let run = |t: Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let v = g.input(t);
        let y = f(&mut g, v)?;
        eval_scalar(&g, y)
    };

    let mut g = Graph::new();
    let xv = g.input(x.clone());
    let y = f(&mut g, xv)?;
    let base = eval_scalar(&g, y)?;
    if run(x.clone())?.to_bits() != base.to_bits() {
        return Err(Error::contract("grad_check function is not deterministic"));
    }
    let analytic = g.backward(y)?.get_or_zeros(&g, xv);

    let mut worst = 0.0f64;
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.data_mut()[i] += eps;
        let mut minus = x.clone();
        minus.data_mut()[i] -= eps;
        let numeric = (run(plus)? - run(minus)?) / (2.0 * eps);
        worst = worst.max(rel_err(analytic[i], numeric));
    }
    Ok(worst)
}

/// Outcome of [`grad_check_params`].
#[derive(Debug, Clone)]
pub struct ParamCheck {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub coords_checked: usize,
}

/// Gradient check over every coordinate of every parameter in `store`.
///
/// `f` builds the scalar loss on a graph bound to the (possibly perturbed)
/// store. The store is restored bitwise before returning.
pub fn grad_check_params<F>(store: &mut ParamStore, f: F, eps: f64) -> Result<ParamCheck>
where
    F: Fn(&mut Graph<'_>) -> Result<Var>,
{
    check_eps(eps)?;
    let analytic: Vec<Vec<f64>> = {
        let mut g = Graph::with_params(store);
        let y = f(&mut g)?;
        let base = eval_scalar(&g, y)?;
        let mut g2 = Graph::with_params(store);
        let y2 = f(&mut g2)?;
        if eval_scalar(&g2, y2)?.to_bits() != base.to_bits() {
            return Err(Error::contract("grad_check function is not deterministic"));
        }
        let grads = g.backward(y)?;
        store
            .ids()
            .map(|id| match g.param_var(id) {
                Some(v) => grads.get_or_zeros(&g, v),
                None => vec![0.0; store.get(id).len()],
            })
            .collect()
    };

    let eval = |store: &ParamStore| -> Result<f64> {
        let mut g = Graph::with_params(store);
        let y = f(&mut g)?;
        eval_scalar(&g, y)
    };

    let mut report = ParamCheck {
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        coords_checked: 0,
    };
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        for i in 0..store.get(id).len() {
            let orig = store.get(id).data()[i];
            store.get_mut(id).data_mut()[i] = orig + eps;
            let up = eval(store);
            store.get_mut(id).data_mut()[i] = orig - eps;
            let down = eval(store);
            store.get_mut(id).data_mut()[i] = orig;
            let numeric = (up? - down?) / (2.0 * eps);
            let err = rel_err(analytic[id.index()][i], numeric);
            report.coords_checked += 1;
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst_param = store.name(id).to_string();
                report.worst_index = i;
            }
        }
    }
    Ok(report)
}
