use crate::error::{Error, Result};

use super::{Graph, ParamId, ParamStore, Tensor, Var};

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

fn check_eps(eps: f64) -> Result<()> {
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::Invalid(format!("finite-difference eps {eps} outside [1e-7, 1e-3]")));
    }
    Ok(())
}

fn scalar_of(g: &Graph, y: Var) -> Result<f64> {
    match g.dims(y) {
        (1, 1) => Ok(g.scalar(y)),
        (rows, cols) => Err(Error::NotScalar { rows, cols }),
    }
}

/// Max relative error between the reverse-mode gradient of the scalar map
/// `f` at `x` and its central finite-difference estimate.
pub fn finite_difference_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    check_eps(eps)?;
    let (rows, cols) = x.dims2();
    let eval = |data: Vec<f64>| -> Result<f64> {
        let mut g = Graph::inference();
        let v = g.leaf(rows, cols, data, false)?;
        let y = f(&mut g, v)?;
        scalar_of(&g, y)
    };
    let mut g = Graph::new();
    let v = g.leaf(rows, cols, x.data().to_vec(), true)?;
    let y = f(&mut g, v)?;
    g.backward(y)?;
    let analytic = g.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; x.numel()]);

    let mut worst: f64 = 0.0;
    for i in 0..x.numel() {
        let mut plus = x.data().to_vec();
        let mut minus = x.data().to_vec();
        plus[i] += eps;
        minus[i] -= eps;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        worst = worst.max(rel_err(analytic[i], numeric));
    }
    Ok(worst)
}

/// Same check with respect to a stored parameter, for maps that read their
/// weights from a [`ParamStore`]. The parameter must be trainable.
pub fn param_gradient_check<F>(store: &ParamStore, id: ParamId, f: F, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    check_eps(eps)?;
    if store.get(id).frozen {
        return Err(Error::Invalid(format!("`{}` is frozen", store.get(id).name)));
    }
    let mut g = Graph::new();
    let y = f(&mut g, store)?;
    g.backward(y)?;
    let n = store.get(id).tensor.numel();
    let analytic = g
        .param_grads()
        .into_iter()
        .find(|(pid, _)| *pid == id)
        .map(|(_, gr)| gr.to_vec())
        .unwrap_or_else(|| vec![0.0; n]);

    let mut work = store.clone();
    let eval = |s: &ParamStore| -> Result<f64> {
        let mut g = Graph::inference();
        let y = f(&mut g, s)?;
        scalar_of(&g, y)
    };
    let mut worst: f64 = 0.0;
    for i in 0..n {
        let orig = store.get(id).tensor.data()[i];
        work.get_mut(id).tensor.data_mut()[i] = orig + eps;
        let up = eval(&work)?;
        work.get_mut(id).tensor.data_mut()[i] = orig - eps;
        let down = eval(&work)?;
        work.get_mut(id).tensor.data_mut()[i] = orig;
        worst = worst.max(rel_err(analytic[i], (up - down) / (2.0 * eps)));
    }
    Ok(worst)
}
