//! Reverse-mode differentiation on a flat tape.
//!
//! A [`Graph`] records every operation as a node holding its forward value;
//! [`Graph::backward`] walks the tape in reverse and accumulates gradients.
//! Handles are plain indices ([`Var`]), so models are ordinary functions
//! that take `&mut Graph` and return `Var`s. A fresh graph is built per
//! training step; parameter gradients are flushed back into the
//! [`ParamStore`](super::params::ParamStore) afterwards.
//!
//! Everything is f64 and single-threaded by contract; two identical graphs
//! produce bitwise-identical values and gradients.

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    Param(String),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddBias(usize, usize),
    MatMul(usize, usize),
    Transpose(usize),
    SliceCols { x: usize, start: usize },
    SliceRows { x: usize, start: usize },
    ConcatCols(Vec<usize>),
    Reshape(usize),
    Relu(usize),
    Gelu(usize),
    Mish(usize),
    CausalSoftmax(usize),
    LayerNorm { x: usize, gamma: usize, beta: usize, stats: Vec<(f64, f64)> },
    GroupNorm { x: usize, gamma: usize, beta: usize, groups: usize, stats: Vec<(f64, f64)> },
    Conv1d { x: usize, w: usize, b: usize },
    SumAll(usize),
}

struct Node {
    value: Tensor,
    grad: Option<Tensor>,
    op: Op,
}

pub struct Graph {
    nodes: Vec<Node>,
}

pub const LN_EPS: f64 = 1e-8;

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, grad: None, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient of the last `backward` target w.r.t. `v`. Zero tensor if the
    /// node was not reached.
    pub fn grad(&self, v: Var) -> Tensor {
        match &self.nodes[v.0].grad {
            Some(g) => g.clone(),
            None => Tensor::zeros(self.nodes[v.0].value.shape().to_vec()),
        }
    }

    // ── node constructors ────────────────────────────────────────────────

    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    /// Leaf bound to a named parameter; `accumulate_param_grads` adds its
    /// gradient back into the store.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Var {
        let t = store
            .value(name)
            .unwrap_or_else(|| panic!("unknown parameter `{name}`"))
            .clone();
        self.push(t, Op::Param(name.to_string()))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(ta.shape(), tb.shape(), "add: shape mismatch");
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let t = Tensor::new(ta.shape().to_vec(), data).unwrap();
        self.push(t, Op::Add(a.0, b.0))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(ta.shape(), tb.shape(), "sub: shape mismatch");
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x - y).collect();
        let t = Tensor::new(ta.shape().to_vec(), data).unwrap();
        self.push(t, Op::Sub(a.0, b.0))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(ta.shape(), tb.shape(), "mul: shape mismatch");
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let t = Tensor::new(ta.shape().to_vec(), data).unwrap();
        self.push(t, Op::Mul(a.0, b.0))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let ta = &self.nodes[a.0].value;
        let data = ta.data().iter().map(|x| x * c).collect();
        let t = Tensor::new(ta.shape().to_vec(), data).unwrap();
        self.push(t, Op::Scale(a.0, c))
    }

    /// `x` of shape `[r, n]` plus a length-`n` bias, broadcast over rows.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Var {
        let (tx, tb) = (&self.nodes[x.0].value, &self.nodes[b.0].value);
        assert_eq!(tb.shape().len(), 1, "add_bias: bias must be 1-D");
        let n = tb.shape()[0];
        assert_eq!(tx.shape().last(), Some(&n), "add_bias: width mismatch");
        let data = tx
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v + tb.data()[i % n])
            .collect();
        let t = Tensor::new(tx.shape().to_vec(), data).unwrap();
        self.push(t, Op::AddBias(x.0, b.0))
    }

    /// `[m, k] @ [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(ta.shape().len(), 2, "matmul: lhs must be 2-D");
        assert_eq!(tb.shape().len(), 2, "matmul: rhs must be 2-D");
        let (m, k) = (ta.shape()[0], ta.shape()[1]);
        let (k2, n) = (tb.shape()[0], tb.shape()[1]);
        assert_eq!(k, k2, "matmul: inner dims {k} vs {k2}");
        let t = matmul_raw(ta.data(), tb.data(), m, k, n);
        self.push(Tensor::new(vec![m, n], t).unwrap(), Op::MatMul(a.0, b.0))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let ta = &self.nodes[a.0].value;
        assert_eq!(ta.shape().len(), 2, "transpose: 2-D only");
        let (m, n) = (ta.shape()[0], ta.shape()[1]);
        let t = transpose_raw(ta.data(), m, n);
        self.push(Tensor::new(vec![n, m], t).unwrap(), Op::Transpose(a.0))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let tx = &self.nodes[x.0].value;
        let (r, c) = (tx.shape()[0], tx.shape()[1]);
        assert!(start + len <= c, "slice_cols out of range");
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&tx.data()[i * c + start..i * c + start + len]);
        }
        self.push(Tensor::new(vec![r, len], data).unwrap(), Op::SliceCols { x: x.0, start })
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Var {
        let tx = &self.nodes[x.0].value;
        let (r, c) = (tx.shape()[0], tx.shape()[1]);
        assert!(start + len <= r, "slice_rows out of range");
        let data = tx.data()[start * c..(start + len) * c].to_vec();
        self.push(Tensor::new(vec![len, c], data).unwrap(), Op::SliceRows { x: x.0, start })
    }

    pub fn concat_cols(&mut self, xs: &[Var]) -> Var {
        assert!(!xs.is_empty());
        let r = self.nodes[xs[0].0].value.shape()[0];
        let total: usize = xs.iter().map(|v| self.nodes[v.0].value.shape()[1]).sum();
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for v in xs {
                data.extend_from_slice(self.nodes[v.0].value.row(i));
            }
        }
        let idxs = xs.iter().map(|v| v.0).collect();
        self.push(Tensor::new(vec![r, total], data).unwrap(), Op::ConcatCols(idxs))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Var {
        let t = self.nodes[x.0].value.reshaped(shape).expect("reshape: size mismatch");
        self.push(t, Op::Reshape(x.0))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let tx = &self.nodes[x.0].value;
        let data = tx.data().iter().map(|&v| v.max(0.0)).collect();
        let t = Tensor::new(tx.shape().to_vec(), data).unwrap();
        self.push(t, Op::Relu(x.0))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let tx = &self.nodes[x.0].value;
        let data = tx.data().iter().map(|&v| gelu_fwd(v)).collect();
        let t = Tensor::new(tx.shape().to_vec(), data).unwrap();
        self.push(t, Op::Gelu(x.0))
    }

    pub fn mish(&mut self, x: Var) -> Var {
        let tx = &self.nodes[x.0].value;
        let data = tx.data().iter().map(|&v| mish_fwd(v)).collect();
        let t = Tensor::new(tx.shape().to_vec(), data).unwrap();
        self.push(t, Op::Mish(x.0))
    }

    /// Row-wise softmax of a `[T, T]` score matrix where row `t` attends to
    /// columns `0..=t` only; masked columns come out exactly zero.
    pub fn causal_softmax(&mut self, s: Var) -> Var {
        let ts = &self.nodes[s.0].value;
        let t_len = ts.shape()[0];
        assert_eq!(ts.shape(), &[t_len, t_len], "causal_softmax: square input");
        let mut data = vec![0.0; t_len * t_len];
        for t in 0..t_len {
            let row = ts.row(t);
            let m = row[..=t].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for j in 0..=t {
                let e = (row[j] - m).exp();
                data[t * t_len + j] = e;
                sum += e;
            }
            for j in 0..=t {
                data[t * t_len + j] /= sum;
            }
        }
        self.push(Tensor::new(vec![t_len, t_len], data).unwrap(), Op::CausalSoftmax(s.0))
    }

    /// Per-row normalization of `[r, c]` with learned affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let tx = &self.nodes[x.0].value;
        let (r, c) = (tx.shape()[0], tx.shape()[1]);
        let tg = &self.nodes[gamma.0].value;
        let tb = &self.nodes[beta.0].value;
        assert_eq!(tg.shape(), &[c], "layer_norm: gamma width");
        assert_eq!(tb.shape(), &[c], "layer_norm: beta width");
        let mut data = vec![0.0; r * c];
        let mut stats = Vec::with_capacity(r);
        for i in 0..r {
            let row = tx.row(i);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c as f64;
            let rstd = 1.0 / (var + LN_EPS).sqrt();
            stats.push((mean, rstd));
            for j in 0..c {
                let xhat = (row[j] - mean) * rstd;
                data[i * c + j] = tg.data()[j] * xhat + tb.data()[j];
            }
        }
        self.push(
            Tensor::new(vec![r, c], data).unwrap(),
            Op::LayerNorm { x: x.0, gamma: gamma.0, beta: beta.0, stats },
        )
    }

    /// Group normalization over a `[T, C]` feature map: channels are split
    /// into `groups` contiguous groups and each group is normalized over all
    /// timesteps jointly, then scaled per channel.
    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize) -> Var {
        let tx = &self.nodes[x.0].value;
        let (t_len, c) = (tx.shape()[0], tx.shape()[1]);
        assert!(groups >= 1 && c % groups == 0, "group_norm: C {c} % groups {groups} != 0");
        let gs = c / groups;
        let tg = self.nodes[gamma.0].value.data().to_vec();
        let tb = self.nodes[beta.0].value.data().to_vec();
        assert_eq!(tg.len(), c);
        assert_eq!(tb.len(), c);
        let n = (t_len * gs) as f64;
        let mut data = vec![0.0; t_len * c];
        let mut stats = Vec::with_capacity(groups);
        for g in 0..groups {
            let c0 = g * gs;
            let mut mean = 0.0;
            for t in 0..t_len {
                for j in 0..gs {
                    mean += tx.at2(t, c0 + j);
                }
            }
            mean /= n;
            let mut var = 0.0;
            for t in 0..t_len {
                for j in 0..gs {
                    var += (tx.at2(t, c0 + j) - mean).powi(2);
                }
            }
            var /= n;
            let rstd = 1.0 / (var + LN_EPS).sqrt();
            stats.push((mean, rstd));
            for t in 0..t_len {
                for j in 0..gs {
                    let xhat = (tx.at2(t, c0 + j) - mean) * rstd;
                    data[t * c + c0 + j] = tg[c0 + j] * xhat + tb[c0 + j];
                }
            }
        }
        self.push(
            Tensor::new(vec![t_len, c], data).unwrap(),
            Op::GroupNorm { x: x.0, gamma: gamma.0, beta: beta.0, groups, stats },
        )
    }

    /// Temporal convolution with same-length zero padding. `x` is `[T, c_in]`,
    /// `w` is `[c_out, c_in, k]` with odd `k`, `b` is `[c_out]`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var) -> Var {
        let tx = &self.nodes[x.0].value;
        let tw = &self.nodes[w.0].value;
        let tb = &self.nodes[b.0].value;
        let (t_len, c_in) = (tx.shape()[0], tx.shape()[1]);
        assert_eq!(tw.shape().len(), 3, "conv1d: weight must be [c_out, c_in, k]");
        let (c_out, wc_in, k) = (tw.shape()[0], tw.shape()[1], tw.shape()[2]);
        assert_eq!(c_in, wc_in, "conv1d: channel mismatch");
        assert_eq!(k % 2, 1, "conv1d: kernel must be odd");
        assert_eq!(tb.shape(), &[c_out], "conv1d: bias width");
        let half = k / 2;
        // true convolution: y[t] = sum_j w[j] * x[t - j + half]
        let mut data = vec![0.0; t_len * c_out];
        for t in 0..t_len {
            for o in 0..c_out {
                let mut acc = tb.data()[o];
                for j in 0..k {
                    let src = t as isize - j as isize + half as isize;
                    if src < 0 || src >= t_len as isize {
                        continue;
                    }
                    let src = src as usize;
                    for c in 0..c_in {
                        acc += tw.data()[(o * c_in + c) * k + j] * tx.at2(src, c);
                    }
                }
                data[t * c_out + o] = acc;
            }
        }
        self.push(
            Tensor::new(vec![t_len, c_out], data).unwrap(),
            Op::Conv1d { x: x.0, w: w.0, b: b.0 },
        )
    }

    /// Sum of all entries, as a `[1]` tensor.
    pub fn sum_all(&mut self, x: Var) -> Var {
        let s: f64 = self.nodes[x.0].value.data().iter().sum();
        self.push(Tensor::scalar(s), Op::SumAll(x.0))
    }

    // ── backward ─────────────────────────────────────────────────────────

    fn add_grad(&mut self, idx: usize, delta: &[f64]) {
        let node = &mut self.nodes[idx];
        let g = node
            .grad
            .get_or_insert_with(|| Tensor::zeros(node.value.shape().to_vec()));
        for (gi, di) in g.data_mut().iter_mut().zip(delta) {
            *gi += di;
        }
    }

    /// Backpropagate from a scalar (`[1]`) node.
    pub fn backward(&mut self, loss: Var) {
        assert_eq!(self.nodes[loss.0].value.len(), 1, "backward: target must be scalar");
        self.nodes[loss.0].grad = Some(Tensor::scalar(1.0));
        for idx in (0..=loss.0).rev() {
            let g = match &self.nodes[idx].grad {
                Some(g) => g.data().to_vec(),
                None => continue,
            };
            // Ops read forward values immutably, then write input grads.
            match &self.nodes[idx].op {
                Op::Leaf | Op::Param(_) => {}
                &Op::Add(a, b) => {
                    self.add_grad(a, &g);
                    self.add_grad(b, &g);
                }
                &Op::Sub(a, b) => {
                    self.add_grad(a, &g);
                    let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                    self.add_grad(b, &neg);
                }
                &Op::Mul(a, b) => {
                    let da: Vec<f64> =
                        g.iter().zip(self.nodes[b].value.data()).map(|(gi, bv)| gi * bv).collect();
                    let db: Vec<f64> =
                        g.iter().zip(self.nodes[a].value.data()).map(|(gi, av)| gi * av).collect();
                    self.add_grad(a, &da);
                    self.add_grad(b, &db);
                }
                &Op::Scale(a, c) => {
                    let da: Vec<f64> = g.iter().map(|v| v * c).collect();
                    self.add_grad(a, &da);
                }
                &Op::AddBias(x, b) => {
                    let n = self.nodes[b].value.len();
                    let mut db = vec![0.0; n];
                    for (i, gi) in g.iter().enumerate() {
                        db[i % n] += gi;
                    }
                    self.add_grad(x, &g);
                    self.add_grad(b, &db);
                }
                &Op::MatMul(a, b) => {
                    let ta = &self.nodes[a].value;
                    let tb = &self.nodes[b].value;
                    let (m, k) = (ta.shape()[0], ta.shape()[1]);
                    let n = tb.shape()[1];
                    // dA = G B^T, dB = A^T G
                    let bt = transpose_raw(tb.data(), k, n);
                    let da = matmul_raw(&g, &bt, m, n, k);
                    let at = transpose_raw(ta.data(), m, k);
                    let db = matmul_raw(&at, &g, k, m, n);
                    self.add_grad(a, &da);
                    self.add_grad(b, &db);
                }
                &Op::Transpose(a) => {
                    let shape = self.nodes[idx].value.shape();
                    let (m, n) = (shape[0], shape[1]);
                    let da = transpose_raw(&g, m, n);
                    self.add_grad(a, &da);
                }
                &Op::SliceCols { x, start } => {
                    let (r, len) = {
                        let s = self.nodes[idx].value.shape();
                        (s[0], s[1])
                    };
                    let c = self.nodes[x].value.shape()[1];
                    let mut dx = vec![0.0; r * c];
                    for i in 0..r {
                        for j in 0..len {
                            dx[i * c + start + j] = g[i * len + j];
                        }
                    }
                    self.add_grad(x, &dx);
                }
                &Op::SliceRows { x, start } => {
                    let (len, c) = {
                        let s = self.nodes[idx].value.shape();
                        (s[0], s[1])
                    };
                    let r = self.nodes[x].value.shape()[0];
                    let mut dx = vec![0.0; r * c];
                    dx[start * c..(start + len) * c].copy_from_slice(&g);
                    self.add_grad(x, &dx);
                }
                Op::ConcatCols(xs) => {
                    let xs = xs.clone();
                    let r = self.nodes[idx].value.shape()[0];
                    let total = self.nodes[idx].value.shape()[1];
                    let mut offset = 0;
                    for xi in xs {
                        let w = self.nodes[xi].value.shape()[1];
                        let mut dx = vec![0.0; r * w];
                        for i in 0..r {
                            dx[i * w..(i + 1) * w]
                                .copy_from_slice(&g[i * total + offset..i * total + offset + w]);
                        }
                        self.add_grad(xi, &dx);
                        offset += w;
                    }
                }
                &Op::Reshape(x) => {
                    self.add_grad(x, &g);
                }
                &Op::Relu(x) => {
                    let dx: Vec<f64> = self.nodes[x]
                        .value
                        .data()
                        .iter()
                        .zip(&g)
                        .map(|(&xv, gi)| if xv > 0.0 { *gi } else { 0.0 })
                        .collect();
                    self.add_grad(x, &dx);
                }
                &Op::Gelu(x) => {
                    let dx: Vec<f64> = self.nodes[x]
                        .value
                        .data()
                        .iter()
                        .zip(&g)
                        .map(|(&xv, gi)| gi * gelu_bwd(xv))
                        .collect();
                    self.add_grad(x, &dx);
                }
                &Op::Mish(x) => {
                    let dx: Vec<f64> = self.nodes[x]
                        .value
                        .data()
                        .iter()
                        .zip(&g)
                        .map(|(&xv, gi)| gi * mish_bwd(xv))
                        .collect();
                    self.add_grad(x, &dx);
                }
                &Op::CausalSoftmax(s) => {
                    let p = &self.nodes[idx].value;
                    let t_len = p.shape()[0];
                    let mut ds = vec![0.0; t_len * t_len];
                    for t in 0..t_len {
                        let prow = p.row(t);
                        let grow = &g[t * t_len..(t + 1) * t_len];
                        let dot: f64 = (0..=t).map(|j| prow[j] * grow[j]).sum();
                        for j in 0..=t {
                            ds[t * t_len + j] = prow[j] * (grow[j] - dot);
                        }
                    }
                    self.add_grad(s, &ds);
                }
                Op::LayerNorm { x, gamma, beta, stats } => {
                    let (x, gamma, beta) = (*x, *gamma, *beta);
                    let stats = stats.clone();
                    let tx = &self.nodes[x].value;
                    let (r, c) = (tx.shape()[0], tx.shape()[1]);
                    let gvals = self.nodes[gamma].value.data().to_vec();
                    let mut dx = vec![0.0; r * c];
                    let mut dgamma = vec![0.0; c];
                    let mut dbeta = vec![0.0; c];
                    for i in 0..r {
                        let (mean, rstd) = stats[i];
                        let row = tx.row(i);
                        let grow = &g[i * c..(i + 1) * c];
                        let mut sum_dy = 0.0;
                        let mut sum_dy_xhat = 0.0;
                        for j in 0..c {
                            let xhat = (row[j] - mean) * rstd;
                            let dy = grow[j] * gvals[j];
                            sum_dy += dy;
                            sum_dy_xhat += dy * xhat;
                            dgamma[j] += grow[j] * xhat;
                            dbeta[j] += grow[j];
                        }
                        let inv_c = 1.0 / c as f64;
                        for j in 0..c {
                            let xhat = (row[j] - mean) * rstd;
                            let dy = grow[j] * gvals[j];
                            dx[i * c + j] =
                                rstd * (dy - inv_c * sum_dy - xhat * inv_c * sum_dy_xhat);
                        }
                    }
                    self.add_grad(x, &dx);
                    self.add_grad(gamma, &dgamma);
                    self.add_grad(beta, &dbeta);
                }
                Op::GroupNorm { x, gamma, beta, groups, stats } => {
                    let (x, gamma, beta, groups) = (*x, *gamma, *beta, *groups);
                    let stats = stats.clone();
                    let tx = &self.nodes[x].value;
                    let (t_len, c) = (tx.shape()[0], tx.shape()[1]);
                    let gs = c / groups;
                    let gvals = self.nodes[gamma].value.data().to_vec();
                    let n = (t_len * gs) as f64;
                    let mut dx = vec![0.0; t_len * c];
                    let mut dgamma = vec![0.0; c];
                    let mut dbeta = vec![0.0; c];
                    for grp in 0..groups {
                        let c0 = grp * gs;
                        let (mean, rstd) = stats[grp];
                        let mut sum_dy = 0.0;
                        let mut sum_dy_xhat = 0.0;
                        for t in 0..t_len {
                            for j in 0..gs {
                                let ch = c0 + j;
                                let xhat = (tx.at2(t, ch) - mean) * rstd;
                                let go = g[t * c + ch];
                                let dy = go * gvals[ch];
                                sum_dy += dy;
                                sum_dy_xhat += dy * xhat;
                                dgamma[ch] += go * xhat;
                                dbeta[ch] += go;
                            }
                        }
                        let inv_n = 1.0 / n;
                        for t in 0..t_len {
                            for j in 0..gs {
                                let ch = c0 + j;
                                let xhat = (tx.at2(t, ch) - mean) * rstd;
                                let dy = g[t * c + ch] * gvals[ch];
                                dx[t * c + ch] =
                                    rstd * (dy - inv_n * sum_dy - xhat * inv_n * sum_dy_xhat);
                            }
                        }
                    }
                    self.add_grad(x, &dx);
                    self.add_grad(gamma, &dgamma);
                    self.add_grad(beta, &dbeta);
                }
                Op::Conv1d { x, w, b } => {
                    let (x, w, b) = (*x, *w, *b);
                    let tx = &self.nodes[x].value;
                    let tw = &self.nodes[w].value;
                    let (t_len, c_in) = (tx.shape()[0], tx.shape()[1]);
                    let (c_out, _, k) = (tw.shape()[0], tw.shape()[1], tw.shape()[2]);
                    let half = k / 2;
                    let mut dx = vec![0.0; t_len * c_in];
                    let mut dw = vec![0.0; c_out * c_in * k];
                    let mut db = vec![0.0; c_out];
                    for t in 0..t_len {
                        for o in 0..c_out {
                            let go = g[t * c_out + o];
                            if go == 0.0 {
                                continue;
                            }
                            db[o] += go;
                            for j in 0..k {
                                let src = t as isize - j as isize + half as isize;
                                if src < 0 || src >= t_len as isize {
                                    continue;
                                }
                                let src = src as usize;
                                for c in 0..c_in {
                                    dw[(o * c_in + c) * k + j] += go * tx.at2(src, c);
                                    dx[src * c_in + c] += go * tw.data()[(o * c_in + c) * k + j];
                                }
                            }
                        }
                    }
                    self.add_grad(x, &dx);
                    self.add_grad(w, &dw);
                    self.add_grad(b, &db);
                }
                &Op::SumAll(x) => {
                    let n = self.nodes[x].value.len();
                    let dx = vec![g[0]; n];
                    self.add_grad(x, &dx);
                }
            }
        }
    }

    /// Add gradients of every `param(..)` node into the store.
    pub fn accumulate_param_grads(&self, store: &mut ParamStore) -> Result<()> {
        for node in &self.nodes {
            if let Op::Param(name) = &node.op {
                if let Some(g) = &node.grad {
                    g.ensure_finite(&format!("gradient of `{name}`"))?;
                    store.add_grad(name, g)?;
                }
            }
        }
        Ok(())
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    out
}

fn transpose_raw(a: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

// tanh-form gelu, the usual transformer variant
fn gelu_fwd(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x.powi(3))).tanh())
}

fn gelu_bwd(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let u = C * (x + 0.044715 * x.powi(3));
    let t = u.tanh();
    let du = C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

fn softplus(x: f64) -> f64 {
    // ln(1 + e^x), stable for large |x|
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

fn mish_fwd(x: f64) -> f64 {
    x * softplus(x).tanh()
}

fn mish_bwd(x: f64) -> f64 {
    let sp = softplus(x);
    let t = sp.tanh();
    let sigma = 1.0 / (1.0 + (-x).exp());
    t + x * (1.0 - t * t) * sigma
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t2(rows: &[Vec<f64>]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn matmul_forward_matches_hand() {
        let mut g = Graph::new();
        let a = g.input(t2(&[vec![1.0, 2.0], vec![3.0, 4.0]]));
        let b = g.input(t2(&[vec![5.0, 6.0], vec![7.0, 8.0]]));
        let c = g.matmul(a, b);
        assert_eq!(g.value(c).data(), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn backward_through_matmul_and_sum() {
        // f = sum(A B); df/dA = 1 B^T, df/dB = A^T 1
        let mut g = Graph::new();
        let a = g.input(t2(&[vec![1.0, 2.0]]));
        let b = g.input(t2(&[vec![3.0], vec![4.0]]));
        let c = g.matmul(a, b);
        let loss = g.sum_all(c);
        g.backward(loss);
        assert_eq!(g.grad(a).data(), &[3.0, 4.0]);
        assert_eq!(g.grad(b).data(), &[1.0, 2.0]);
    }

    #[test]
    fn causal_softmax_rows_sum_to_one_and_mask() {
        let mut g = Graph::new();
        let s = g.input(t2(&[vec![0.3, 9.0, -2.0], vec![1.0, 2.0, 5.0], vec![0.1, 0.2, 0.3]]));
        let p = g.causal_softmax(s);
        let v = g.value(p);
        assert_eq!(v.at2(0, 0), 1.0);
        assert_eq!(v.at2(0, 1), 0.0);
        assert_eq!(v.at2(0, 2), 0.0);
        assert_eq!(v.at2(1, 2), 0.0);
        for t in 0..3 {
            let s: f64 = v.row(t).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn mish_at_zero_is_zero() {
        assert_eq!(mish_fwd(0.0), 0.0);
    }

    #[test]
    fn layer_norm_rows_standardized() {
        let mut g = Graph::new();
        let x = g.input(t2(&[vec![1.0, 2.0, 3.0, 10.0], vec![-5.0, 0.0, 5.0, 2.0]]));
        let gamma = g.input(Tensor::full(vec![4], 1.0));
        let beta = g.input(Tensor::zeros(vec![4]));
        let y = g.layer_norm(x, gamma, beta);
        let v = g.value(y);
        for i in 0..2 {
            let row = v.row(i);
            let mean: f64 = row.iter().sum::<f64>() / 4.0;
            let var: f64 = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-10, "row mean {mean}");
            assert!((var - 1.0).abs() < 1e-6, "row var {var}");
        }
    }

    #[test]
    fn conv1d_impulse_recovers_kernel() {
        let mut g = Graph::new();
        let x = g.input(t2(&[vec![0.0], vec![0.0], vec![1.0], vec![0.0], vec![0.0]]));
        let w = g.input(Tensor::new(vec![1, 1, 3], vec![0.25, 0.5, -1.0]).unwrap());
        let b = g.input(Tensor::zeros(vec![1]));
        let y = g.conv1d(x, w, b);
        let v: Vec<f64> = g.value(y).data().to_vec();
        // impulse at t=2 reproduces the taps in order, centered on t=2
        assert_eq!(v, vec![0.0, 0.25, 0.5, -1.0, 0.0]);
    }
}
