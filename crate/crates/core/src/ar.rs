//! Autoregressive backbone: given a history of (state, returns-to-go)
//! tokens, predict the next state and next returns-to-go.
//!
//! Each timestep is a single token — the state and its returns-to-go are
//! embedded by separate linear maps, summed, and layer-normalized, so the
//! two modalities are bound together rather than interleaved as separate
//! tokens. A stack of pre-norm causal transformer blocks follows, with two
//! regression heads on top. Prediction is deterministic: the squared-error
//! heads are the unit-variance Gaussian log-likelihood up to constants.

use serde::{Deserialize, Serialize};

use crate::data::Batch;
use crate::error::{CoreError, Result};
use crate::nn::checkpoint::{self, Meta};
use crate::nn::gradcheck;
use crate::nn::layers::{causal_self_attention, init_attention, layer_norm, linear};
use crate::nn::{adam_step, AdamConfig, Graph, ParamStore, Tensor, Var};
use crate::rng::{seeded, Rng};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ARConfig {
    pub d_s: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub embed_dim: usize,
    /// Context window (max tokens per forward pass).
    pub context: usize,
    pub dropout: f64,
}

impl ARConfig {
    /// Desk-scale defaults; the full-scale 4/4/256 setup stays reachable
    /// through the config file.
    pub fn desk(d_s: usize) -> Self {
        ARConfig { d_s, n_layers: 2, n_heads: 2, embed_dim: 64, context: 32, dropout: 0.0 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.n_heads == 0 || self.embed_dim % self.n_heads != 0 {
            return Err(CoreError::config(format!(
                "embed_dim {} must be divisible by n_heads {}",
                self.embed_dim, self.n_heads
            )));
        }
        if self.context < 1 || self.n_layers < 1 || self.d_s < 1 {
            return Err(CoreError::config("context, n_layers and d_s must be >= 1"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(CoreError::config("dropout must lie in [0, 1)"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct ARModel {
    pub cfg: ARConfig,
    pub params: ParamStore,
}

impl ARModel {
    pub fn init(cfg: ARConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.embed_dim;
        let mut p = ParamStore::new();
        crate::nn::params::init_linear(&mut p, "embed.state", cfg.d_s, d, rng)?;
        crate::nn::params::init_linear(&mut p, "embed.rtg", 1, d, rng)?;
        crate::nn::params::init_layer_norm(&mut p, "embed.ln", d)?;
        p.insert("pos", Tensor::randn(vec![cfg.context, d], 1.0 / (d as f64).sqrt(), rng))?;
        for i in 0..cfg.n_layers {
            crate::nn::params::init_layer_norm(&mut p, &format!("block{i}.ln1"), d)?;
            init_attention(&mut p, &format!("block{i}.attn"), d, rng)?;
            crate::nn::params::init_layer_norm(&mut p, &format!("block{i}.ln2"), d)?;
            crate::nn::params::init_linear(&mut p, &format!("block{i}.mlp.fc1"), d, 4 * d, rng)?;
            crate::nn::params::init_linear(&mut p, &format!("block{i}.mlp.fc2"), 4 * d, d, rng)?;
            // zero-init residual-branch outputs so the stack starts close
            // to the identity
            p.value_mut(&format!("block{i}.attn.wo.w")).unwrap().data_mut().fill(0.0);
            p.value_mut(&format!("block{i}.mlp.fc2.w")).unwrap().data_mut().fill(0.0);
        }
        crate::nn::params::init_layer_norm(&mut p, "final_ln", d)?;
        crate::nn::params::init_linear(&mut p, "head.state", d, cfg.d_s, rng)?;
        crate::nn::params::init_linear(&mut p, "head.rtg", d, 1, rng)?;
        Ok(ARModel { cfg, params: p })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let mut meta = Meta::new();
        meta.insert("kind".into(), "ar".into());
        meta.insert(
            "config".into(),
            serde_json::to_string(&self.cfg).expect("config serializes"),
        );
        checkpoint::save(path, &self.params, &meta)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let (params, meta) = checkpoint::load(path)?;
        if meta.get("kind").map(String::as_str) != Some("ar") {
            return Err(CoreError::usage(format!(
                "{} is not an autoregressive-model checkpoint",
                path.display()
            )));
        }
        let cfg_json = meta
            .get("config")
            .ok_or_else(|| CoreError::parse(path.display().to_string(), "missing config meta"))?;
        let cfg: ARConfig = serde_json::from_str(cfg_json)
            .map_err(|e| CoreError::parse(path.display().to_string(), e.to_string()))?;
        cfg.validate()?;
        Ok(ARModel { cfg, params })
    }
}

/// Embed a token sequence: `ln(state_proj + rtg_proj)` plus the positional
/// rows. `states` is `[T, d_s]`, `rtgs` `[T, 1]`.
pub fn embed_tokens(
    g: &mut Graph,
    model: &ARModel,
    states: Var,
    rtgs: Var,
) -> Result<Var> {
    let t_len = g.value(states).rows();
    let se = linear(g, &model.params, "embed.state", states)?;
    let re = linear(g, &model.params, "embed.rtg", rtgs)?;
    let sum = g.add(se, re);
    let normed = layer_norm(g, &model.params, "embed.ln", sum);
    let pos_full = g.param(&model.params, "pos");
    let pos = g.slice_rows(pos_full, 0, t_len);
    Ok(g.add(normed, pos))
}

/// Convenience single-token embedding (row 0 of the embedded sequence).
pub fn embed_token(model: &ARModel, state: &[f64], rtg: f64) -> Result<Vec<f64>> {
    if state.len() != model.cfg.d_s {
        return Err(CoreError::dimension(format!(
            "embed_token: state has {} dims, model expects {}",
            state.len(),
            model.cfg.d_s
        )));
    }
    let mut g = Graph::new();
    let s = g.input(Tensor::new(vec![1, model.cfg.d_s], state.to_vec())?);
    let r = g.input(Tensor::new(vec![1, 1], vec![rtg])?);
    let e = embed_tokens(&mut g, model, s, r)?;
    Ok(g.value(e).data().to_vec())
}

struct ForwardOpts<'a> {
    dropout: f64,
    rng: Option<&'a mut Rng>,
}

fn forward_graph(
    g: &mut Graph,
    model: &ARModel,
    states: Var,
    rtgs: Var,
    mut opts: ForwardOpts,
) -> Result<(Var, Var)> {
    let t_len = g.value(states).rows();
    if t_len > model.cfg.context {
        return Err(CoreError::usage(format!(
            "sequence length {} exceeds context {}",
            t_len, model.cfg.context
        )));
    }
    let mut x = embed_tokens(g, model, states, rtgs)?;
    for i in 0..model.cfg.n_layers {
        let pre = layer_norm(g, &model.params, &format!("block{i}.ln1"), x);
        let mut att =
            causal_self_attention(g, &model.params, &format!("block{i}.attn"), pre, model.cfg.n_heads)?;
        att = maybe_dropout(g, att, &mut opts);
        x = g.add(x, att);
        let pre2 = layer_norm(g, &model.params, &format!("block{i}.ln2"), x);
        let h = linear(g, &model.params, &format!("block{i}.mlp.fc1"), pre2)?;
        let h = g.relu(h);
        let mut mlp = linear(g, &model.params, &format!("block{i}.mlp.fc2"), h)?;
        mlp = maybe_dropout(g, mlp, &mut opts);
        x = g.add(x, mlp);
    }
    let h = layer_norm(g, &model.params, "final_ln", x);
    let ps = linear(g, &model.params, "head.state", h)?;
    let pr = linear(g, &model.params, "head.rtg", h)?;
    Ok((ps, pr))
}

fn maybe_dropout(g: &mut Graph, x: Var, opts: &mut ForwardOpts) -> Var {
    if opts.dropout <= 0.0 {
        return x;
    }
    let rng = opts.rng.as_deref_mut().expect("dropout requires an rng");
    let shape = g.value(x).shape().to_vec();
    let keep = 1.0 - opts.dropout;
    use rand::Rng as _;
    let mask: Vec<f64> = (0..shape.iter().product())
        .map(|_| if rng.gen_range(0.0..1.0) < keep { 1.0 / keep } else { 0.0 })
        .collect();
    let m = g.input(Tensor::new(shape, mask).expect("mask matches"));
    g.mul(x, m)
}

/// Deterministic forward pass: prediction at position `t` estimates the
/// step-`t+1` state and returns-to-go.
pub fn forward(model: &ARModel, states: &Tensor, rtgs: &Tensor) -> Result<(Tensor, Tensor)> {
    let mut g = Graph::new();
    let s = g.input(states.clone());
    let r = g.input(rtgs.clone());
    let (ps, pr) = forward_graph(&mut g, model, s, r, ForwardOpts { dropout: 0.0, rng: None })?;
    Ok((g.value(ps).clone(), g.value(pr).clone()))
}

/// One optimizer step on a batch of masked context windows. Returns the
/// loss: mean over unmasked positions of squared state error plus squared
/// returns-to-go error.
pub fn train_step(
    model: &mut ARModel,
    batch: &Batch,
    adam: &AdamConfig,
    step: u64,
    rng: &mut Rng,
) -> Result<f64> {
    let total_unmasked: f64 = batch.mask.iter().flatten().sum();
    if total_unmasked == 0.0 {
        return Err(CoreError::usage("train_step: batch mask is empty"));
    }
    let d_s = model.cfg.d_s;
    let mut g = Graph::new();
    let mut sample_losses = Vec::with_capacity(batch.len());
    for i in 0..batch.len() {
        let k = batch.mask[i].len();
        let s = g.input(batch.states[i].clone());
        let r = g.input(Tensor::new(vec![k, 1], batch.rtgs[i].clone())?);
        let (ps, pr) = forward_graph(
            &mut g,
            model,
            s,
            r,
            ForwardOpts { dropout: model.cfg.dropout, rng: Some(rng) },
        )?;
        let ts = g.input(batch.target_states[i].clone());
        let tr = g.input(Tensor::new(vec![k, 1], batch.target_rtgs[i].clone())?);
        // replicate the mask across state dims so masked rows contribute 0
        let mask_rows: Vec<f64> =
            batch.mask[i].iter().flat_map(|&m| std::iter::repeat(m).take(d_s)).collect();
        let ms = g.input(Tensor::new(vec![k, d_s], mask_rows)?);
        let mr = g.input(Tensor::new(vec![k, 1], batch.mask[i].clone())?);
        let ds = g.sub(ps, ts);
        let ds2 = g.mul(ds, ds);
        let ds2m = g.mul(ds2, ms);
        let ls = g.sum_all(ds2m);
        let dr = g.sub(pr, tr);
        let dr2 = g.mul(dr, dr);
        let dr2m = g.mul(dr2, mr);
        let lr = g.sum_all(dr2m);
        sample_losses.push(g.add(ls, lr));
    }
    let mut total = sample_losses[0];
    for &l in &sample_losses[1..] {
        total = g.add(total, l);
    }
    let loss = g.scale(total, 1.0 / total_unmasked);
    let loss_val = g.value(loss).data()[0];
    if !loss_val.is_finite() {
        return Err(CoreError::NonFinite("ar train loss".into()));
    }
    g.backward(loss);
    g.accumulate_param_grads(&mut model.params)?;
    adam_step(&mut model.params, adam, step)?;
    Ok(loss_val)
}

/// Full training loop; the base learning rate decays linearly over the run.
/// Returns the per-step loss curve.
pub fn train(
    model: &mut ARModel,
    dataset: &crate::data::OfflineDataset,
    steps: u64,
    batch_size: usize,
    adam: &AdamConfig,
    seed: u64,
) -> Result<Vec<f64>> {
    let mut rng = seeded(seed);
    let mut curve = Vec::with_capacity(steps as usize);
    for step in 1..=steps {
        let batch = crate::data::sample_batch(dataset, model.cfg.context, batch_size, &mut rng)?;
        let cfg = AdamConfig {
            learning_rate: crate::nn::params::linear_decay(adam.learning_rate, step, steps),
            ..*adam
        };
        let loss = train_step(model, &batch, &cfg, step, &mut rng)?;
        curve.push(loss);
    }
    Ok(curve)
}

/// Autoregressive continuation: append `c` predictions, each produced from
/// the most recent `window` tokens (capped by the model context). Predicted
/// returns-to-go are fed back as inputs unless `scheduled_rtgs` supplies
/// replacement values.
pub fn rollout(
    model: &ARModel,
    history_states: &[Vec<f64>],
    history_rtgs: &[f64],
    c: usize,
    window: usize,
    scheduled_rtgs: Option<&[f64]>,
) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
    if history_states.is_empty() || history_states.len() != history_rtgs.len() {
        return Err(CoreError::usage(
            "rollout: history states/rtgs must be non-empty and equal length",
        ));
    }
    if window < 1 {
        return Err(CoreError::usage("rollout: window must be >= 1"));
    }
    if let Some(sched) = scheduled_rtgs {
        if sched.len() < c {
            return Err(CoreError::usage(format!(
                "rollout: scheduled rtgs cover {} of {} steps",
                sched.len(),
                c
            )));
        }
    }
    let window = window.min(model.cfg.context);
    let d_s = model.cfg.d_s;
    let mut states: Vec<Vec<f64>> = history_states.to_vec();
    let mut rtgs: Vec<f64> = history_rtgs.to_vec();
    let mut out_states = Vec::with_capacity(c);
    let mut out_rtgs = Vec::with_capacity(c);
    for i in 0..c {
        let take = window.min(states.len());
        let from = states.len() - take;
        let mut flat = Vec::with_capacity(take * d_s);
        for row in &states[from..] {
            flat.extend_from_slice(row);
        }
        let st = Tensor::new(vec![take, d_s], flat)?;
        let rt = Tensor::new(vec![take, 1], rtgs[from..].to_vec())?;
        let (ps, pr) = forward(model, &st, &rt)?;
        let next_state = ps.row(take - 1).to_vec();
        let next_rtg = match scheduled_rtgs {
            Some(sched) => sched[i],
            None => pr.at2(take - 1, 0),
        };
        states.push(next_state.clone());
        rtgs.push(next_rtg);
        out_states.push(next_state);
        out_rtgs.push(next_rtg);
    }
    Ok((out_states, out_rtgs))
}

/// Scalar loss over a fixed batch, for finite-difference verification.
pub fn batch_loss(model: &ARModel, params: &ParamStore, batch: &Batch) -> f64 {
    let eval = ARModel { cfg: model.cfg.clone(), params: params.clone() };
    let total_unmasked: f64 = batch.mask.iter().flatten().sum();
    let mut acc = 0.0;
    for i in 0..batch.len() {
        let k = batch.mask[i].len();
        let rt = Tensor::new(vec![k, 1], batch.rtgs[i].clone()).unwrap();
        let (ps, pr) = forward(&eval, &batch.states[i], &rt).unwrap();
        for pos in 0..k {
            if batch.mask[i][pos] == 0.0 {
                continue;
            }
            let se: f64 = ps
                .row(pos)
                .iter()
                .zip(batch.target_states[i].row(pos))
                .map(|(a, b)| (a - b).powi(2))
                .sum();
            let re = (pr.at2(pos, 0) - batch.target_rtgs[i][pos]).powi(2);
            acc += se + re;
        }
    }
    acc / total_unmasked
}

/// Analytic gradients vs central differences on random coordinates.
pub fn gradient_check(model: &ARModel, batch: &Batch, coords: usize, rng: &mut Rng) -> Result<f64> {
    let mut work = model.params.clone();
    work.zero_grads();
    {
        let eval = ARModel { cfg: model.cfg.clone(), params: work.clone() };
        let mut g = Graph::new();
        let total_unmasked: f64 = batch.mask.iter().flatten().sum();
        let mut losses = Vec::new();
        for i in 0..batch.len() {
            let k = batch.mask[i].len();
            let s = g.input(batch.states[i].clone());
            let r = g.input(Tensor::new(vec![k, 1], batch.rtgs[i].clone())?);
            let (ps, pr) = forward_graph(&mut g, &eval, s, r, ForwardOpts { dropout: 0.0, rng: None })?;
            let ts = g.input(batch.target_states[i].clone());
            let tr = g.input(Tensor::new(vec![k, 1], batch.target_rtgs[i].clone())?);
            let mask_rows: Vec<f64> = batch.mask[i]
                .iter()
                .flat_map(|&m| std::iter::repeat(m).take(model.cfg.d_s))
                .collect();
            let ms = g.input(Tensor::new(vec![k, model.cfg.d_s], mask_rows)?);
            let mr = g.input(Tensor::new(vec![k, 1], batch.mask[i].clone())?);
            let ds = g.sub(ps, ts);
            let ds2 = g.mul(ds, ds);
            let ds2m = g.mul(ds2, ms);
            let dr = g.sub(pr, tr);
            let dr2 = g.mul(dr, dr);
            let dr2m = g.mul(dr2, mr);
            let ls = g.sum_all(ds2m);
            let lr = g.sum_all(dr2m);
            losses.push(g.add(ls, lr));
        }
        let mut total = losses[0];
        for &l in &losses[1..] {
            total = g.add(total, l);
        }
        let loss = g.scale(total, 1.0 / total_unmasked);
        g.backward(loss);
        g.accumulate_param_grads(&mut work)?;
    }
    let loss_fn = |p: &ParamStore| batch_loss(model, p, batch);
    Ok(gradcheck::max_grad_rel_err(&loss_fn, &work, coords, gradcheck::DEFAULT_H, rng))
}
