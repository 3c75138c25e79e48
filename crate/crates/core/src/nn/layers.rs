//! Layer ops built on the graph primitives.
//!
//! Each function validates shapes against the store and then records the
//! computation on the graph, so gradients flow without further ceremony.

use super::graph::{Graph, Var};
use super::params::{init_linear, ParamStore};
use crate::error::{CoreError, Result};
use crate::rng::Rng;

/// `y = x W + b` where `W` is `store[name.w]` of shape `[in, out]`.
pub fn linear(g: &mut Graph, store: &ParamStore, name: &str, x: Var) -> Result<Var> {
    let w_name = format!("{name}.w");
    let w = store
        .value(&w_name)
        .ok_or_else(|| CoreError::usage(format!("unknown parameter `{w_name}`")))?;
    let d_in = w.shape()[0];
    let got = *g.value(x).shape().last().unwrap_or(&0);
    if got != d_in {
        return Err(CoreError::dimension(format!(
            "linear `{name}`: input width {got}, weight expects {d_in}"
        )));
    }
    let wv = g.param(store, &w_name);
    let bv = g.param(store, &format!("{name}.b"));
    let y = g.matmul(x, wv);
    Ok(g.add_bias(y, bv))
}

pub fn layer_norm(g: &mut Graph, store: &ParamStore, name: &str, x: Var) -> Var {
    let gamma = g.param(store, &format!("{name}.g"));
    let beta = g.param(store, &format!("{name}.b"));
    g.layer_norm(x, gamma, beta)
}

pub fn group_norm(g: &mut Graph, store: &ParamStore, name: &str, x: Var, groups: usize) -> Var {
    let gamma = g.param(store, &format!("{name}.g"));
    let beta = g.param(store, &format!("{name}.b"));
    g.group_norm(x, gamma, beta, groups)
}

/// Same-length temporal convolution; weights from `store[name.w]`.
pub fn conv1d_temporal(g: &mut Graph, store: &ParamStore, name: &str, x: Var) -> Result<Var> {
    let w_name = format!("{name}.w");
    let w = store
        .value(&w_name)
        .ok_or_else(|| CoreError::usage(format!("unknown parameter `{w_name}`")))?;
    let c_in = w.shape()[1];
    let got = g.value(x).shape()[1];
    if got != c_in {
        return Err(CoreError::dimension(format!(
            "conv `{name}`: input has {got} channels, weight expects {c_in}"
        )));
    }
    let wv = g.param(store, &w_name);
    let bv = g.param(store, &format!("{name}.b"));
    Ok(g.conv1d(x, wv, bv))
}

pub fn init_attention(store: &mut ParamStore, prefix: &str, d: usize, rng: &mut Rng) -> Result<()> {
    for part in ["wq", "wk", "wv", "wo"] {
        init_linear(store, &format!("{prefix}.{part}"), d, d, rng)?;
    }
    Ok(())
}

/// Multi-head causal self-attention over a `[T, d]` sequence. Position `t`
/// of the output depends on input positions `0..=t` only.
pub fn causal_self_attention(
    g: &mut Graph,
    store: &ParamStore,
    prefix: &str,
    x: Var,
    n_heads: usize,
) -> Result<Var> {
    let d = g.value(x).shape()[1];
    if n_heads == 0 || d % n_heads != 0 {
        return Err(CoreError::config(format!(
            "attention `{prefix}`: width {d} not divisible by {n_heads} heads"
        )));
    }
    let dh = d / n_heads;
    let q = linear(g, store, &format!("{prefix}.wq"), x)?;
    let k = linear(g, store, &format!("{prefix}.wk"), x)?;
    let v = linear(g, store, &format!("{prefix}.wv"), x)?;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut heads = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let qh = g.slice_cols(q, h * dh, dh);
        let kh = g.slice_cols(k, h * dh, dh);
        let vh = g.slice_cols(v, h * dh, dh);
        let kt = g.transpose(kh);
        let scores = g.matmul(qh, kt);
        let scores = g.scale(scores, scale);
        let probs = g.causal_softmax(scores);
        heads.push(g.matmul(probs, vh));
    }
    let merged = g.concat_cols(&heads);
    linear(g, store, &format!("{prefix}.wo"), merged)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::tensor::Tensor;

    #[test]
    fn linear_identity_passes_input_through() {
        let mut store = ParamStore::new();
        store
            .insert("id.w", Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap())
            .unwrap();
        store.insert("id.b", Tensor::zeros(vec![2])).unwrap();
        let mut g = Graph::new();
        let x = g.input(Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap());
        let y = linear(&mut g, &store, "id", x).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 2.0]);
    }

    #[test]
    fn linear_hand_case() {
        // W=[[2]], b=[3], x=[1] -> 5
        let mut store = ParamStore::new();
        store.insert("f.w", Tensor::new(vec![1, 1], vec![2.0]).unwrap()).unwrap();
        store.insert("f.b", Tensor::new(vec![1], vec![3.0]).unwrap()).unwrap();
        let mut g = Graph::new();
        let x = g.input(Tensor::new(vec![1, 1], vec![1.0]).unwrap());
        let y = linear(&mut g, &store, "f", x).unwrap();
        assert_eq!(g.value(y).data(), &[5.0]);
    }

    #[test]
    fn linear_rejects_width_mismatch() {
        let mut store = ParamStore::new();
        let mut rng = crate::rng::seeded(0);
        init_linear(&mut store, "f", 3, 2, &mut rng).unwrap();
        let mut g = Graph::new();
        let x = g.input(Tensor::zeros(vec![1, 4]));
        assert!(matches!(
            linear(&mut g, &store, "f", x),
            Err(CoreError::Dimension(_))
        ));
    }

    #[test]
    fn attention_rejects_bad_head_count() {
        let mut store = ParamStore::new();
        let mut rng = crate::rng::seeded(0);
        init_attention(&mut store, "a", 6, &mut rng).unwrap();
        let mut g = Graph::new();
        let x = g.input(Tensor::zeros(vec![3, 6]));
        assert!(matches!(
            causal_self_attention(&mut g, &store, "a", x, 4),
            Err(CoreError::Config(_))
        ));
    }

    #[test]
    fn attention_is_causal_under_perturbation() {
        let mut rng = crate::rng::seeded(42);
        let (t_len, d) = (8, 8);
        let mut store = ParamStore::new();
        init_attention(&mut store, "a", d, &mut rng).unwrap();
        let base = Tensor::randn(vec![t_len, d], 1.0, &mut rng);

        let run = |inp: &Tensor| {
            let mut g = Graph::new();
            let x = g.input(inp.clone());
            let y = causal_self_attention(&mut g, &store, "a", x, 2).unwrap();
            g.value(y).clone()
        };
        let y0 = run(&base);

        let mut perturbed = base.clone();
        let t_hit = 5;
        for c in 0..d {
            perturbed.data_mut()[t_hit * d + c] += 0.37;
        }
        let y1 = run(&perturbed);
        for t in 0..t_hit {
            assert_eq!(y0.row(t), y1.row(t), "position {t} leaked future info");
        }
        assert_ne!(y0.row(t_hit), y1.row(t_hit));
    }

    #[test]
    fn single_token_attention_is_value_projection() {
        // T=1: softmax over one element is 1, so out = (x Wv) Wo + biases
        let mut rng = crate::rng::seeded(7);
        let d = 4;
        let mut store = ParamStore::new();
        init_attention(&mut store, "a", d, &mut rng).unwrap();
        let x_t = Tensor::randn(vec![1, d], 1.0, &mut rng);

        let mut g = Graph::new();
        let x = g.input(x_t.clone());
        let y = causal_self_attention(&mut g, &store, "a", x, 2).unwrap();

        let mut g2 = Graph::new();
        let x2 = g2.input(x_t);
        let v = linear(&mut g2, &store, "a.wv", x2).unwrap();
        let o = linear(&mut g2, &store, "a.wo", v).unwrap();

        for (a, b) in g.value(y).data().iter().zip(g2.value(o).data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
