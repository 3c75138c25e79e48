//! Central-difference gradient verification.
//!
//! The checks here never touch the backward pass: they re-evaluate the
//! forward loss at perturbed parameters, which makes them an independent
//! oracle for everything `graph.rs` computes.

use rand::Rng as _;

use super::params::ParamStore;
use crate::rng::Rng;

pub const DEFAULT_H: f64 = 1e-6;

/// Scaled relative error with a floor so exact zeros compare absolutely.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / (a.abs() + b.abs()).max(1e-3)
}

/// Central difference of `loss` w.r.t. one parameter coordinate.
pub fn central_diff(
    loss: &dyn Fn(&ParamStore) -> f64,
    store: &ParamStore,
    name: &str,
    idx: usize,
    h: f64,
) -> f64 {
    let mut plus = store.clone();
    plus.value_mut(name).unwrap().data_mut()[idx] += h;
    let mut minus = store.clone();
    minus.value_mut(name).unwrap().data_mut()[idx] -= h;
    (loss(&plus) - loss(&minus)) / (2.0 * h)
}

/// Compare analytic gradients already accumulated in `store` against central
/// differences on `coords_per_param` random coordinates of every parameter.
/// Returns the maximum relative error seen.
pub fn max_grad_rel_err(
    loss: &dyn Fn(&ParamStore) -> f64,
    store: &ParamStore,
    coords_per_param: usize,
    h: f64,
    rng: &mut Rng,
) -> f64 {
    let names: Vec<String> = store.names().cloned().collect();
    let mut worst = 0.0f64;
    for name in &names {
        let n = store.value(name).unwrap().len();
        for _ in 0..coords_per_param.min(n) {
            let idx = rng.gen_range(0..n);
            let analytic = store.grad(name).unwrap().data()[idx];
            let numeric = central_diff(loss, store, name, idx, h);
            worst = worst.max(rel_err(analytic, numeric));
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::graph::Graph;
    use crate::nn::tensor::Tensor;

    #[test]
    fn quadratic_gradient_checks_out() {
        // loss = sum(w^2) -> d/dw = 2w
        let mut store = ParamStore::new();
        store.insert("w", Tensor::new(vec![3], vec![0.5, -1.5, 2.0]).unwrap()).unwrap();
        let loss = |s: &ParamStore| -> f64 {
            let mut g = Graph::new();
            let w = g.param(s, "w");
            let sq = g.mul(w, w);
            let l = g.sum_all(sq);
            g.value(l).data()[0]
        };
        let mut work = store.clone();
        {
            let mut g = Graph::new();
            let w = g.param(&work, "w");
            let sq = g.mul(w, w);
            let l = g.sum_all(sq);
            g.backward(l);
            g.accumulate_param_grads(&mut work).unwrap();
        }
        let mut rng = crate::rng::seeded(1);
        let err = max_grad_rel_err(&loss, &work, 3, DEFAULT_H, &mut rng);
        assert!(err < 1e-8, "rel err {err}");
    }
}
