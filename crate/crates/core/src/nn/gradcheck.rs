//! Finite-difference checks for parameterised graphs.

use super::{Graph, ParamStore};
use crate::autodiff::Var;
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::Result;

/// Builds `f` on a graph, contracts its output with fixed random weights and
/// returns that scalar together with the graph.
fn contract<'p, F>(store: &'p ParamStore, x: &Tensor, w: &Tensor, f: &F) -> Result<(Graph<'p>, Var, Var)>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let mut g = Graph::new(store);
    let xv = g.variable(x.clone());
    let y = f(&mut g, xv)?;
    let wv = g.constant(w.clone());
    let prod = g.mul(y, wv)?;
    let loss = g.sum_all(prod)?;
    Ok((g, xv, loss))
}

/// Worst relative error `|a-n|/max(1,|n|)` over the input and every
/// parameter coordinate (strided to at most `max_coords` per tensor).
pub fn param_grad_check<F>(store: &ParamStore, x: &Tensor, f: F, max_coords: usize) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let mut rng = Rng::seed_from_u64(0xC0FFEE);
    let out_shape = {
        let mut g = Graph::new(store);
        let v = g.variable(x.clone());
        let y = f(&mut g, v)?;
        g.shape(y).to_vec()
    };
    let w = Tensor::from_fn(&out_shape, |_| rng.normal());
    let (g, xv, loss) = contract(store, x, &w, &f)?;
    let grads = g.backward(loss)?;
    let pgrads = g.param_grads(&grads);
    let xgrad = grads.get(xv).cloned().expect("leaf gradients are always filled");
    drop(g);

    let eval = |s: &ParamStore, xx: &Tensor| -> Result<f64> {
        let (g, _, l) = contract(s, xx, &w, &f)?;
        Ok(g.value(l).item())
    };
    let eps = 1e-6;
    let mut worst: f64 = 0.0;
    let mut record = |a: f64, n: f64| worst = worst.max((a - n).abs() / n.abs().max(1.0));

    let stride = |n: usize| (n / max_coords.max(1)).max(1);
    let n = x.numel();
    for i in (0..n).step_by(stride(n)) {
        let mut xp = x.clone();
        xp.data_mut()[i] += eps;
        let mut xm = x.clone();
        xm.data_mut()[i] -= eps;
        let num = (eval(store, &xp)? - eval(store, &xm)?) / (2.0 * eps);
        record(xgrad.data()[i], num);
    }
    let mut work = store.clone();
    for id in store.ids() {
        let n = store.get(id).numel();
        for i in (0..n).step_by(stride(n)) {
            let orig = store.get(id).data()[i];
            work.get_mut(id).data_mut()[i] = orig + eps;
            let lp = eval(&work, x)?;
            work.get_mut(id).data_mut()[i] = orig - eps;
            let lm = eval(&work, x)?;
            work.get_mut(id).data_mut()[i] = orig;
            record(pgrads[id.index()].data()[i], (lp - lm) / (2.0 * eps));
        }
    }
    Ok(worst)
}
