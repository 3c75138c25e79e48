//! Conditional denoising diffusion over state sequences, used as a
//! trajectory optimizer.
//!
//! Training corrupts dataset windows with the closed-form forward process
//! and regresses the injected noise, dropping the returns-to-go condition
//! with probability `p` so one network serves both guidance branches. At
//! plan time a feasible trajectory is noised to a shallow step `K_imp` and
//! walked back with classifier-free-guided reverse steps; the first row is
//! pinned to the current state throughout.

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::OfflineDataset;
use crate::error::{CoreError, Result};
use crate::nn::checkpoint::{self, Meta};
use crate::nn::gradcheck;
use crate::nn::layers::{conv1d_temporal, group_norm, linear};
use crate::nn::{adam_step, AdamConfig, Graph, ParamStore, Tensor, Var};
use crate::rng::{seeded, Rng};

// ── noise schedule ───────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Cosine,
    Linear,
}

impl ScheduleKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "cosine" => Ok(ScheduleKind::Cosine),
            "linear" => Ok(ScheduleKind::Linear),
            other => Err(CoreError::config(format!("unknown schedule kind `{other}`"))),
        }
    }
}

/// Per-step `beta_k`, `alpha_k = 1 - beta_k` and `alpha_bar_k = prod alpha_j`
/// tables for steps `1..=K` (stored 0-indexed).
#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    pub k_max: usize,
    pub betas: Vec<f64>,
    pub alphas: Vec<f64>,
    pub alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn beta(&self, k: usize) -> f64 {
        self.betas[k - 1]
    }
    pub fn alpha(&self, k: usize) -> f64 {
        self.alphas[k - 1]
    }
    pub fn alpha_bar(&self, k: usize) -> f64 {
        self.alpha_bars[k - 1]
    }

    fn from_betas(betas: Vec<f64>) -> Result<Self> {
        let k_max = betas.len();
        let mut alphas = Vec::with_capacity(k_max);
        let mut alpha_bars = Vec::with_capacity(k_max);
        let mut prod = 1.0;
        for (i, &b) in betas.iter().enumerate() {
            if !(0.0 < b && b < 1.0) {
                return Err(CoreError::config(format!("beta[{}] = {b} outside (0,1)", i + 1)));
            }
            let a = 1.0 - b;
            prod *= a;
            alphas.push(a);
            alpha_bars.push(prod);
        }
        for i in 1..k_max {
            if alpha_bars[i] >= alpha_bars[i - 1] {
                return Err(CoreError::config("alpha_bar must be strictly decreasing"));
            }
        }
        Ok(NoiseSchedule { k_max, betas, alphas, alpha_bars })
    }
}

/// Default schedules. The cosine variant follows the squared-cosine
/// alpha-bar shape; the linear one spans the classic 1e-4..2e-2 range
/// rescaled by 1000/K so the terminal signal level stays near zero for any
/// K.
pub fn build_schedule(k_max: usize, kind: ScheduleKind) -> Result<NoiseSchedule> {
    if k_max < 1 {
        return Err(CoreError::usage("build_schedule: K must be >= 1"));
    }
    match kind {
        ScheduleKind::Linear => {
            let scale = 1000.0 / k_max as f64;
            build_linear_schedule(k_max, (1e-4 * scale).min(0.5), (2e-2 * scale).min(0.999))
        }
        ScheduleKind::Cosine => {
            let s = 0.008;
            let f = |t: f64| ((t / k_max as f64 + s) / (1.0 + s) * std::f64::consts::FRAC_PI_2)
                .cos()
                .powi(2);
            let f0 = f(0.0);
            let betas = (1..=k_max)
                .map(|k| {
                    let ab_prev = f((k - 1) as f64) / f0;
                    let ab = f(k as f64) / f0;
                    (1.0 - ab / ab_prev).clamp(1e-8, 0.999)
                })
                .collect();
            NoiseSchedule::from_betas(betas)
        }
    }
}

/// Linear schedule with an explicit beta range.
pub fn build_linear_schedule(k_max: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if k_max < 1 {
        return Err(CoreError::usage("build_linear_schedule: K must be >= 1"));
    }
    let betas = (0..k_max)
        .map(|i| {
            if k_max == 1 {
                beta_start
            } else {
                beta_start + (beta_end - beta_start) * i as f64 / (k_max - 1) as f64
            }
        })
        .collect();
    NoiseSchedule::from_betas(betas)
}

/// Closed-form forward corruption:
/// `x_k = sqrt(alpha_bar_k) x0 + sqrt(1 - alpha_bar_k) eps`.
pub fn forward_noise(x0: &Tensor, k: usize, eps: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    if k < 1 || k > sched.k_max {
        return Err(CoreError::usage(format!("forward_noise: k {k} outside 1..={}", sched.k_max)));
    }
    if x0.shape() != eps.shape() {
        return Err(CoreError::dimension("forward_noise: x0 and eps shapes differ"));
    }
    let ab = sched.alpha_bar(k);
    let (ws, wn) = (ab.sqrt(), (1.0 - ab).sqrt());
    let data = x0.data().iter().zip(eps.data()).map(|(x, e)| ws * x + wn * e).collect();
    Tensor::new(x0.shape().to_vec(), data)
}

// ── denoiser ─────────────────────────────────────────────────────────────

/// Returns-to-go condition: a scaled scalar, or the learned null token used
/// for dropout and the unconditional guidance branch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Condition {
    Value(f64),
    Null,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub d_s: usize,
    /// Residual-block output channels, one entry per block.
    pub channels: Vec<usize>,
    pub kernel: usize,
    pub groups: usize,
    pub time_features: usize,
    pub time_embed: usize,
    pub cond_embed: usize,
    /// Hidden width of the two embedding MLPs.
    pub embed_hidden: usize,
}

impl DenoiserConfig {
    /// Desk-scale: two residual levels at 32/64 channels, kernel 5.
    pub fn desk(d_s: usize) -> Self {
        DenoiserConfig {
            d_s,
            channels: vec![32, 64],
            kernel: 5,
            groups: 8,
            time_features: 16,
            time_embed: 64,
            cond_embed: 64,
            embed_hidden: 128,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel % 2 == 0 {
            return Err(CoreError::config(format!("kernel must be odd, got {}", self.kernel)));
        }
        if self.channels.is_empty() {
            return Err(CoreError::config("need at least one residual block"));
        }
        for &c in &self.channels {
            if c == 0 || c % self.groups != 0 {
                return Err(CoreError::config(format!(
                    "channel count {c} not divisible by groups {}",
                    self.groups
                )));
            }
        }
        if self.time_features % 2 != 0 {
            return Err(CoreError::config("time_features must be even"));
        }
        if self.d_s < 1 {
            return Err(CoreError::config("d_s must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Denoiser {
    pub cfg: DenoiserConfig,
    pub params: ParamStore,
}

impl Denoiser {
    pub fn init(cfg: DenoiserConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let mut p = ParamStore::new();
        crate::nn::params::init_linear(&mut p, "time_mlp.fc1", cfg.time_features, cfg.embed_hidden, rng)?;
        crate::nn::params::init_linear(&mut p, "time_mlp.fc2", cfg.embed_hidden, cfg.time_embed, rng)?;
        crate::nn::params::init_linear(&mut p, "cond_mlp.fc1", 1, cfg.embed_hidden, rng)?;
        crate::nn::params::init_linear(&mut p, "cond_mlp.fc2", cfg.embed_hidden, cfg.cond_embed, rng)?;
        p.insert(
            "null_embed",
            Tensor::randn(vec![1, cfg.cond_embed], 1.0 / (cfg.cond_embed as f64).sqrt(), rng),
        )?;
        let embed_width = cfg.time_embed + cfg.cond_embed;
        let mut c_in = cfg.d_s;
        for (i, &c_out) in cfg.channels.iter().enumerate() {
            crate::nn::params::init_conv1d(&mut p, &format!("block{i}.conv1"), c_in, c_out, cfg.kernel, rng)?;
            p.insert(&format!("block{i}.gn1.g"), Tensor::full(vec![c_out], 1.0))?;
            p.insert(&format!("block{i}.gn1.b"), Tensor::zeros(vec![c_out]))?;
            crate::nn::params::init_linear(&mut p, &format!("block{i}.embed_proj"), embed_width, c_out, rng)?;
            crate::nn::params::init_conv1d(&mut p, &format!("block{i}.conv2"), c_out, c_out, cfg.kernel, rng)?;
            p.insert(&format!("block{i}.gn2.g"), Tensor::full(vec![c_out], 1.0))?;
            p.insert(&format!("block{i}.gn2.b"), Tensor::zeros(vec![c_out]))?;
            if c_in != c_out {
                crate::nn::params::init_conv1d(&mut p, &format!("block{i}.skip"), c_in, c_out, 1, rng)?;
            }
            c_in = c_out;
        }
        crate::nn::params::init_conv1d(&mut p, "out_proj", c_in, cfg.d_s, 1, rng)?;
        Ok(Denoiser { cfg, params: p })
    }
}

fn sinusoidal_features(k: usize, dim: usize) -> Tensor {
    let half = dim / 2;
    let mut data = Vec::with_capacity(dim);
    for i in 0..half {
        let freq = (10_000f64).powf(-(i as f64) / half as f64);
        let angle = k as f64 * freq;
        data.push(angle.sin());
        data.push(angle.cos());
    }
    Tensor::new(vec![1, dim], data).expect("even dim")
}

/// Noise-prediction network on the graph. `x` is `[H, d_s]`.
pub fn denoise_net_graph(
    g: &mut Graph,
    model: &Denoiser,
    x: Var,
    cond: &Condition,
    k: usize,
) -> Result<Var> {
    let cfg = &model.cfg;
    let got = g.value(x).cols();
    if got != cfg.d_s {
        return Err(CoreError::dimension(format!(
            "denoise_net: input has {got} state dims, model expects {}",
            cfg.d_s
        )));
    }
    let p = &model.params;
    let tf = g.input(sinusoidal_features(k, cfg.time_features));
    let th = linear(g, p, "time_mlp.fc1", tf)?;
    let th = g.mish(th);
    let t_emb = linear(g, p, "time_mlp.fc2", th)?;
    let c_emb = match cond {
        Condition::Value(y) => {
            let yv = g.input(Tensor::new(vec![1, 1], vec![*y])?);
            let ch = linear(g, p, "cond_mlp.fc1", yv)?;
            let ch = g.mish(ch);
            linear(g, p, "cond_mlp.fc2", ch)?
        }
        Condition::Null => g.param(p, "null_embed"),
    };
    let emb = g.concat_cols(&[t_emb, c_emb]);

    let mut h = x;
    let mut c_in = cfg.d_s;
    for (i, &c_out) in cfg.channels.iter().enumerate() {
        let mut y = conv1d_temporal(g, p, &format!("block{i}.conv1"), h)?;
        y = group_norm(g, p, &format!("block{i}.gn1"), y, cfg.groups);
        y = g.mish(y);
        // timestep + condition enter after the first convolution
        let proj = linear(g, p, &format!("block{i}.embed_proj"), emb)?;
        let proj = g.reshape(proj, vec![c_out]);
        y = g.add_bias(y, proj);
        y = conv1d_temporal(g, p, &format!("block{i}.conv2"), y)?;
        y = group_norm(g, p, &format!("block{i}.gn2"), y, cfg.groups);
        y = g.mish(y);
        let skip = if c_in == c_out { h } else { conv1d_temporal(g, p, &format!("block{i}.skip"), h)? };
        h = g.add(y, skip);
        c_in = c_out;
    }
    conv1d_temporal(g, p, "out_proj", h)
}

/// Plain (inference) noise prediction; one denoiser evaluation.
pub fn denoise_net(model: &Denoiser, x: &Tensor, cond: &Condition, k: usize) -> Result<Tensor> {
    let mut g = Graph::new();
    let xv = g.input(x.clone());
    let out = denoise_net_graph(&mut g, model, xv, cond, k)?;
    Ok(g.value(out).clone())
}

/// Classifier-free guidance:
/// `eps_hat = eps(x, null, k) + omega * (eps(x, y, k) - eps(x, null, k))`.
/// Evaluated as `(1 - omega) * uncond + omega * cond`, which is the same
/// algebra but lands exactly on the unconditional branch at `omega = 0` and
/// the conditional one at `omega = 1`. Always two denoiser evaluations.
pub fn guided_eps(model: &Denoiser, x: &Tensor, y: f64, k: usize, omega: f64) -> Result<Tensor> {
    let uncond = denoise_net(model, x, &Condition::Null, k)?;
    let cond = denoise_net(model, x, &Condition::Value(y), k)?;
    let data = uncond
        .data()
        .iter()
        .zip(cond.data())
        .map(|(u, c)| (1.0 - omega) * u + omega * c)
        .collect();
    Tensor::new(x.shape().to_vec(), data)
}

/// One reverse step: `mu = (x_k - beta_k / sqrt(1 - alpha_bar_k) eps_hat)
/// / sqrt(alpha_k)`, then a draw from `N(mu, temperature * beta_k I)`. The
/// terminal step `k = 1` returns `mu` itself.
pub fn reverse_step(
    x_k: &Tensor,
    eps_hat: &Tensor,
    k: usize,
    sched: &NoiseSchedule,
    temperature: f64,
    rng: &mut Rng,
) -> Result<Tensor> {
    if k < 1 || k > sched.k_max {
        return Err(CoreError::usage(format!("reverse_step: k {k} outside 1..={}", sched.k_max)));
    }
    let beta = sched.beta(k);
    let alpha = sched.alpha(k);
    let ab = sched.alpha_bar(k);
    let coef = beta / (1.0 - ab).sqrt();
    let inv_sqrt_alpha = 1.0 / alpha.sqrt();
    let mut data: Vec<f64> = x_k
        .data()
        .iter()
        .zip(eps_hat.data())
        .map(|(x, e)| inv_sqrt_alpha * (x - coef * e))
        .collect();
    if k > 1 && temperature > 0.0 {
        let sigma = (temperature * beta).sqrt();
        for v in data.iter_mut() {
            let z: f64 = StandardNormal.sample(rng);
            *v += sigma * z;
        }
    }
    Tensor::new(x_k.shape().to_vec(), data)
}

/// Trajectory optimization: noise the plan to step `k_imp`, then walk the
/// guided reverse chain back to 0 with the first row pinned to the current
/// state at every step. Returns the optimized plan and the number of
/// denoiser evaluations (`2 * k_imp`). `k_imp = 0` is the identity.
pub fn optimize_trajectory(
    model: &Denoiser,
    sched: &NoiseSchedule,
    tau: &Tensor,
    y: f64,
    k_imp: usize,
    omega: f64,
    temperature: f64,
    rng: &mut Rng,
) -> Result<(Tensor, usize)> {
    if k_imp > sched.k_max {
        return Err(CoreError::usage(format!(
            "optimize_trajectory: k_imp {k_imp} exceeds K {}",
            sched.k_max
        )));
    }
    if k_imp == 0 {
        return Ok((tau.clone(), 0));
    }
    let d_s = tau.cols();
    let mut eps = Tensor::zeros(tau.shape().to_vec());
    for v in eps.data_mut().iter_mut() {
        let z: f64 = StandardNormal.sample(rng);
        *v = z;
    }
    let mut x = forward_noise(tau, k_imp, &eps, sched)?;
    let pin = tau.row(0).to_vec();
    let mut nfe = 0;
    for k in (1..=k_imp).rev() {
        x.data_mut()[..d_s].copy_from_slice(&pin);
        let eps_hat = guided_eps(model, &x, y, k, omega)?;
        nfe += 2;
        x = reverse_step(&x, &eps_hat, k, sched, temperature, rng)?;
    }
    x.data_mut()[..d_s].copy_from_slice(&pin);
    Ok((x, nfe))
}

// ── training ─────────────────────────────────────────────────────────────

/// `eta ~ Bern(p)`: with probability `p` the condition is dropped to the
/// null token.
pub fn apply_condition_dropout(y: f64, p: f64, rng: &mut Rng) -> Condition {
    if rng.gen_range(0.0..1.0) < p {
        Condition::Null
    } else {
        Condition::Value(y)
    }
}

/// One training draw: a normalized dataset window `x0` of `horizon` rows,
/// its condition (the scaled returns-to-go at the window's first step), a
/// uniform diffusion step, and the Gaussian noise realization.
pub struct TrainingSample {
    pub x0: Tensor,
    pub y: f64,
    pub k: usize,
    pub eps: Tensor,
}

pub fn draw_training_sample(
    dataset: &OfflineDataset,
    sched: &NoiseSchedule,
    horizon: usize,
    rng: &mut Rng,
) -> Result<TrainingSample> {
    let eligible: Vec<usize> = (0..dataset.trajectories.len())
        .filter(|&i| dataset.trajectories[i].len() >= horizon)
        .collect();
    if eligible.is_empty() {
        return Err(CoreError::usage(format!(
            "no trajectory is at least {horizon} steps long"
        )));
    }
    let tr = &dataset.trajectories[eligible[rng.gen_range(0..eligible.len())]];
    let start = rng.gen_range(0..=tr.len() - horizon);
    let d_s = dataset.d_s;
    let mut flat = Vec::with_capacity(horizon * d_s);
    for t in start..start + horizon {
        flat.extend(dataset.normalize_state(tr.states.row(t))?);
    }
    let x0 = Tensor::new(vec![horizon, d_s], flat)?;
    let y = dataset.scale_rtg(tr.returns_to_go[start]);
    let k = rng.gen_range(1..=sched.k_max);
    let mut eps = Tensor::zeros(vec![horizon, d_s]);
    for v in eps.data_mut().iter_mut() {
        let z: f64 = StandardNormal.sample(rng);
        *v = z;
    }
    Ok(TrainingSample { x0, y, k, eps })
}

/// Per-element mean squared error between predicted and true noise.
pub fn eps_loss(eps_hat: &Tensor, eps: &Tensor) -> f64 {
    let n = eps.len() as f64;
    eps_hat
        .data()
        .iter()
        .zip(eps.data())
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        / n
}

/// One optimizer step over a minibatch of noised windows.
pub fn train_step(
    model: &mut Denoiser,
    dataset: &OfflineDataset,
    sched: &NoiseSchedule,
    horizon: usize,
    p_dropout: f64,
    batch_size: usize,
    adam: &AdamConfig,
    step: u64,
    rng: &mut Rng,
) -> Result<f64> {
    if !(0.0..=1.0).contains(&p_dropout) {
        return Err(CoreError::usage("p_dropout must lie in [0,1]"));
    }
    let mut g = Graph::new();
    let mut losses = Vec::with_capacity(batch_size);
    let mut n_elems = 0.0;
    for _ in 0..batch_size {
        let sample = draw_training_sample(dataset, sched, horizon, rng)?;
        let cond = apply_condition_dropout(sample.y, p_dropout, rng);
        let x_k = forward_noise(&sample.x0, sample.k, &sample.eps, sched)?;
        let xv = g.input(x_k);
        let eps_hat = denoise_net_graph(&mut g, model, xv, &cond, sample.k)?;
        let target = g.input(sample.eps.clone());
        let d = g.sub(eps_hat, target);
        let d2 = g.mul(d, d);
        losses.push(g.sum_all(d2));
        n_elems += sample.eps.len() as f64;
    }
    let mut total = losses[0];
    for &l in &losses[1..] {
        total = g.add(total, l);
    }
    let loss = g.scale(total, 1.0 / n_elems);
    let loss_val = g.value(loss).data()[0];
    if !loss_val.is_finite() {
        return Err(CoreError::NonFinite("diffusion train loss".into()));
    }
    g.backward(loss);
    g.accumulate_param_grads(&mut model.params)?;
    adam_step(&mut model.params, adam, step)?;
    Ok(loss_val)
}

/// Training loop with the base learning rate decaying linearly over the run.
pub fn train(
    model: &mut Denoiser,
    dataset: &OfflineDataset,
    sched: &NoiseSchedule,
    horizon: usize,
    p_dropout: f64,
    steps: u64,
    batch_size: usize,
    adam: &AdamConfig,
    seed: u64,
) -> Result<Vec<f64>> {
    let mut rng = seeded(seed);
    let mut curve = Vec::with_capacity(steps as usize);
    for step in 1..=steps {
        let cfg = AdamConfig {
            learning_rate: crate::nn::params::linear_decay(adam.learning_rate, step, steps),
            ..*adam
        };
        curve.push(train_step(model, dataset, sched, horizon, p_dropout, batch_size, &cfg, step, &mut rng)?);
    }
    Ok(curve)
}

// ── checkpointing ────────────────────────────────────────────────────────

/// Denoiser plus the schedule it was trained against.
#[derive(Debug, Clone)]
pub struct DiffusionModel {
    pub denoiser: Denoiser,
    pub schedule_kind: ScheduleKind,
    pub sched: NoiseSchedule,
}

impl DiffusionModel {
    pub fn new(denoiser: Denoiser, schedule_kind: ScheduleKind, k_max: usize) -> Result<Self> {
        let sched = build_schedule(k_max, schedule_kind)?;
        Ok(DiffusionModel { denoiser, schedule_kind, sched })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let mut meta = Meta::new();
        meta.insert("kind".into(), "diffusion".into());
        meta.insert(
            "config".into(),
            serde_json::to_string(&self.denoiser.cfg).expect("config serializes"),
        );
        meta.insert(
            "schedule".into(),
            serde_json::to_string(&self.schedule_kind).expect("kind serializes"),
        );
        meta.insert("k_max".into(), self.sched.k_max.to_string());
        checkpoint::save(path, &self.denoiser.params, &meta)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let (params, meta) = checkpoint::load(path)?;
        let loc = path.display().to_string();
        if meta.get("kind").map(String::as_str) != Some("diffusion") {
            return Err(CoreError::usage(format!("{loc} is not a diffusion checkpoint")));
        }
        let cfg: DenoiserConfig = serde_json::from_str(
            meta.get("config").ok_or_else(|| CoreError::parse(&loc, "missing config meta"))?,
        )
        .map_err(|e| CoreError::parse(&loc, e.to_string()))?;
        cfg.validate()?;
        let schedule_kind: ScheduleKind = serde_json::from_str(
            meta.get("schedule").ok_or_else(|| CoreError::parse(&loc, "missing schedule meta"))?,
        )
        .map_err(|e| CoreError::parse(&loc, e.to_string()))?;
        let k_max: usize = meta
            .get("k_max")
            .ok_or_else(|| CoreError::parse(&loc, "missing k_max meta"))?
            .parse()
            .map_err(|_| CoreError::parse(&loc, "k_max meta not an integer"))?;
        let sched = build_schedule(k_max, schedule_kind)?;
        Ok(DiffusionModel { denoiser: Denoiser { cfg, params }, schedule_kind, sched })
    }
}

/// Finite-difference verification of the denoiser backward pass (both
/// condition branches share one check; the null branch exercises the
/// learned embedding path).
pub fn gradient_check(model: &Denoiser, horizon: usize, coords: usize, rng: &mut Rng) -> Result<f64> {
    let x = Tensor::randn(vec![horizon, model.cfg.d_s], 1.0, rng);
    let target = Tensor::randn(vec![horizon, model.cfg.d_s], 1.0, rng);
    let mut worst = 0.0f64;
    for cond in [Condition::Value(0.37), Condition::Null] {
        let mut work = model.params.clone();
        work.zero_grads();
        {
            let eval = Denoiser { cfg: model.cfg.clone(), params: work.clone() };
            let mut g = Graph::new();
            let xv = g.input(x.clone());
            let out = denoise_net_graph(&mut g, &eval, xv, &cond, 3)?;
            let tv = g.input(target.clone());
            let d = g.sub(out, tv);
            let d2 = g.mul(d, d);
            let s = g.sum_all(d2);
            let loss = g.scale(s, 1.0 / target.len() as f64);
            g.backward(loss);
            g.accumulate_param_grads(&mut work)?;
        }
        let loss_fn = |p: &ParamStore| {
            let eval = Denoiser { cfg: model.cfg.clone(), params: p.clone() };
            let out = denoise_net(&eval, &x, &cond, 3).unwrap();
            eps_loss(&out, &target)
        };
        worst = worst.max(gradcheck::max_grad_rel_err(&loss_fn, &work, coords, gradcheck::DEFAULT_H, rng));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{OfflineDataset, Trajectory};

    fn tiny_denoiser(d_s: usize, rng: &mut Rng) -> Denoiser {
        let cfg = DenoiserConfig {
            d_s,
            channels: vec![8, 8],
            kernel: 3,
            groups: 4,
            time_features: 8,
            time_embed: 16,
            cond_embed: 16,
            embed_hidden: 32,
        };
        Denoiser::init(cfg, rng).unwrap()
    }

    fn toy_dataset() -> OfflineDataset {
        let t_len = 24;
        let states: Vec<f64> = (0..t_len).map(|t| (t as f64 * 0.3).sin()).collect();
        let tr = Trajectory::from_parts(
            Tensor::new(vec![t_len, 1], states).unwrap(),
            Tensor::zeros(vec![t_len, 0]),
            vec![0.25; t_len],
            1.0,
        )
        .unwrap();
        OfflineDataset::new(vec![tr], 1.0).unwrap()
    }

    #[test]
    fn linear_schedule_first_step_arithmetic() {
        let s = build_linear_schedule(100, 1e-4, 2e-2).unwrap();
        assert_eq!(s.beta(1), 1e-4);
        assert_eq!(s.alpha(1), 1.0 - 1e-4);
        assert_eq!(s.alpha_bar(1), 1.0 - 1e-4);
        assert_eq!(s.beta(100), 2e-2);
    }

    #[test]
    fn single_step_schedule() {
        let s = build_linear_schedule(1, 0.3, 0.9).unwrap();
        assert_eq!(s.alpha_bar(1), 1.0 - 0.3);
    }

    #[test]
    fn cosine_schedule_decays_to_near_zero() {
        // closed-form oracle: alpha_bar(k) ~ f(k)/f(0) for the squared cosine
        let s = build_schedule(100, ScheduleKind::Cosine).unwrap();
        for k in 2..=100 {
            assert!(s.alpha_bar(k) < s.alpha_bar(k - 1));
        }
        assert!(s.alpha_bar(1) > 0.99, "alpha_bar_1 = {}", s.alpha_bar(1));
        assert!(s.alpha_bar(100) < 0.01, "alpha_bar_K = {}", s.alpha_bar(100));
        let f = |t: f64| ((t / 100.0 + 0.008) / 1.008 * std::f64::consts::FRAC_PI_2).cos().powi(2);
        for k in [1usize, 25, 50, 75] {
            let expected = f(k as f64) / f(0.0);
            assert!((s.alpha_bar(k) - expected).abs() < 1e-9);
        }
    }

    #[test]
    fn default_linear_schedule_also_ends_low() {
        let s = build_schedule(100, ScheduleKind::Linear).unwrap();
        assert!(s.alpha_bar(100) < 0.01, "alpha_bar_K = {}", s.alpha_bar(100));
    }

    #[test]
    fn unknown_schedule_kind_is_rejected() {
        assert!(ScheduleKind::parse("quadratic").is_err());
    }

    #[test]
    fn forward_noise_zero_eps_scales_input() {
        let s = build_schedule(10, ScheduleKind::Cosine).unwrap();
        let x0 = Tensor::new(vec![2, 2], vec![1.0, -2.0, 0.5, 3.0]).unwrap();
        let eps = Tensor::zeros(vec![2, 2]);
        let xk = forward_noise(&x0, 4, &eps, &s).unwrap();
        let w = s.alpha_bar(4).sqrt();
        for (a, b) in xk.data().iter().zip(x0.data()) {
            assert!((a - w * b).abs() < 1e-15);
        }
    }

    #[test]
    fn forward_noise_k_out_of_range() {
        let s = build_schedule(10, ScheduleKind::Cosine).unwrap();
        let x0 = Tensor::zeros(vec![2, 1]);
        assert!(forward_noise(&x0, 0, &x0, &s).is_err());
        assert!(forward_noise(&x0, 11, &x0, &s).is_err());
    }

    #[test]
    fn forward_noise_variance_matches_closed_form() {
        // Monte-Carlo oracle at modest draw count; the acceptance suite
        // repeats this at 1e5 draws.
        let s = build_schedule(20, ScheduleKind::Cosine).unwrap();
        let mut rng = seeded(17);
        let k = 10;
        let n = 20_000;
        let mut values = Vec::with_capacity(n);
        for _ in 0..n {
            let x0 = Tensor::randn(vec![1, 1], 1.0, &mut rng);
            let eps = Tensor::randn(vec![1, 1], 1.0, &mut rng);
            values.push(forward_noise(&x0, k, &eps, &s).unwrap().data()[0]);
        }
        let mean: f64 = values.iter().sum::<f64>() / n as f64;
        let var: f64 = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
        let expected = s.alpha_bar(k) * 1.0 + (1.0 - s.alpha_bar(k));
        assert!((var - expected).abs() / expected < 0.05, "var {var} vs {expected}");
    }

    #[test]
    fn denoiser_output_shape_matches_input() {
        let mut rng = seeded(2);
        let model = tiny_denoiser(2, &mut rng);
        for h in [8usize, 16, 32] {
            let x = Tensor::randn(vec![h, 2], 1.0, &mut rng);
            let out = denoise_net(&model, &x, &Condition::Value(0.5), 3).unwrap();
            assert_eq!(out.shape(), &[h, 2]);
        }
    }

    #[test]
    fn null_and_value_conditions_differ() {
        let mut rng = seeded(3);
        let model = tiny_denoiser(1, &mut rng);
        let x = Tensor::randn(vec![8, 1], 1.0, &mut rng);
        let a = denoise_net(&model, &x, &Condition::Value(0.8), 2).unwrap();
        let b = denoise_net(&model, &x, &Condition::Null, 2).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn guidance_endpoints_are_exact() {
        let mut rng = seeded(4);
        let model = tiny_denoiser(1, &mut rng);
        let x = Tensor::randn(vec![8, 1], 1.0, &mut rng);
        let uncond = denoise_net(&model, &x, &Condition::Null, 2).unwrap();
        let cond = denoise_net(&model, &x, &Condition::Value(0.9), 2).unwrap();
        let w0 = guided_eps(&model, &x, 0.9, 2, 0.0).unwrap();
        let w1 = guided_eps(&model, &x, 0.9, 2, 1.0).unwrap();
        assert_eq!(w0, uncond);
        assert_eq!(w1, cond);
    }

    #[test]
    fn guidance_forms_agree_algebraically() {
        // u + w (c - u) vs the implemented (1 - w) u + w c, over random
        // inputs and scales
        let mut rng = seeded(5);
        let model = tiny_denoiser(1, &mut rng);
        for trial in 0..20 {
            let x = Tensor::randn(vec![8, 1], 1.0, &mut rng);
            let omega = rng.gen_range(0.0..3.0);
            let k = 1 + trial % 4;
            let u = denoise_net(&model, &x, &Condition::Null, k).unwrap();
            let c = denoise_net(&model, &x, &Condition::Value(0.4), k).unwrap();
            let got = guided_eps(&model, &x, 0.4, k, omega).unwrap();
            for ((&uu, &cc), &gv) in u.data().iter().zip(c.data()).zip(got.data()) {
                let perturbed = uu + omega * (cc - uu);
                assert!((perturbed - gv).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn reverse_step_identities() {
        let s = build_schedule(10, ScheduleKind::Cosine).unwrap();
        let mut rng = seeded(6);
        let x = Tensor::randn(vec![4, 1], 1.0, &mut rng);
        // eps_hat = 0 -> mu = x / sqrt(alpha_k)
        let zero = Tensor::zeros(vec![4, 1]);
        let mu = reverse_step(&x, &zero, 3, &s, 0.0, &mut rng).unwrap();
        for (a, b) in mu.data().iter().zip(x.data()) {
            assert!((a - b / s.alpha(3).sqrt()).abs() < 1e-15);
        }
        // temperature 0 is deterministic
        let e = Tensor::randn(vec![4, 1], 1.0, &mut rng);
        let r1 = reverse_step(&x, &e, 5, &s, 0.0, &mut seeded(1)).unwrap();
        let r2 = reverse_step(&x, &e, 5, &s, 0.0, &mut seeded(2)).unwrap();
        assert_eq!(r1, r2);
    }

    #[test]
    fn one_step_round_trip_recovers_x0() {
        // forward to k=1 with known eps, then reverse with eps_hat = eps:
        // beta_1 = 1 - alpha_1 and alpha_bar_1 = alpha_1 make this exact
        let s = build_schedule(10, ScheduleKind::Cosine).unwrap();
        let mut rng = seeded(7);
        let x0 = Tensor::randn(vec![5, 2], 1.0, &mut rng);
        let eps = Tensor::randn(vec![5, 2], 1.0, &mut rng);
        let x1 = forward_noise(&x0, 1, &eps, &s).unwrap();
        let back = reverse_step(&x1, &eps, 1, &s, 1.0, &mut rng).unwrap();
        for (a, b) in back.data().iter().zip(x0.data()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn optimize_with_zero_steps_is_identity() {
        let mut rng = seeded(8);
        let model = tiny_denoiser(1, &mut rng);
        let s = build_schedule(10, ScheduleKind::Cosine).unwrap();
        let tau = Tensor::randn(vec![6, 1], 1.0, &mut rng);
        let (out, nfe) = optimize_trajectory(&model, &s, &tau, 0.5, 0, 1.2, 0.5, &mut rng).unwrap();
        assert_eq!(out, tau);
        assert_eq!(nfe, 0);
    }

    #[test]
    fn optimize_pins_first_row_and_counts_nfe() {
        let mut rng = seeded(9);
        let model = tiny_denoiser(2, &mut rng);
        let s = build_schedule(100, ScheduleKind::Cosine).unwrap();
        let tau = Tensor::randn(vec![6, 2], 1.0, &mut rng);
        let (out, nfe) = optimize_trajectory(&model, &s, &tau, 0.5, 5, 1.2, 0.5, &mut rng).unwrap();
        assert_eq!(nfe, 10);
        assert_eq!(out.row(0), tau.row(0));
        assert_ne!(out.row(1), tau.row(1));
    }

    #[test]
    fn condition_dropout_extremes() {
        let mut rng = seeded(10);
        for _ in 0..50 {
            assert_eq!(apply_condition_dropout(0.7, 1.0, &mut rng), Condition::Null);
            assert_eq!(apply_condition_dropout(0.7, 0.0, &mut rng), Condition::Value(0.7));
        }
    }

    #[test]
    fn perfect_noise_oracle_has_zero_loss() {
        let s = build_schedule(10, ScheduleKind::Cosine).unwrap();
        let ds = toy_dataset();
        let mut rng = seeded(11);
        let sample = draw_training_sample(&ds, &s, 8, &mut rng).unwrap();
        // an oracle that emits the injected noise exactly
        assert_eq!(eps_loss(&sample.eps, &sample.eps), 0.0);
    }

    #[test]
    fn training_reduces_loss() {
        let ds = toy_dataset();
        let s = build_schedule(20, ScheduleKind::Cosine).unwrap();
        let mut rng = seeded(12);
        let mut model = tiny_denoiser(1, &mut rng);
        let adam = AdamConfig::with_lr(1e-3);
        let mut curve = Vec::new();
        for step in 1..=200 {
            curve.push(
                train_step(&mut model, &ds, &s, 8, 0.5, 8, &adam, step, &mut rng).unwrap(),
            );
        }
        let early: f64 = curve[..20].iter().sum::<f64>() / 20.0;
        let late: f64 = curve[180..].iter().sum::<f64>() / 20.0;
        assert!(late < early, "early {early} late {late}");
    }

    #[test]
    fn checkpoint_round_trip_rebuilds_schedule() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("diff.ckpt");
        let mut rng = seeded(13);
        let model = DiffusionModel::new(tiny_denoiser(2, &mut rng), ScheduleKind::Cosine, 50).unwrap();
        model.save(&path).unwrap();
        let loaded = DiffusionModel::load(&path).unwrap();
        assert_eq!(loaded.sched.k_max, 50);
        assert_eq!(loaded.schedule_kind, ScheduleKind::Cosine);
        let x = Tensor::randn(vec![8, 2], 1.0, &mut rng);
        let a = denoise_net(&model.denoiser, &x, &Condition::Null, 4).unwrap();
        let b = denoise_net(&loaded.denoiser, &x, &Condition::Null, 4).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = seeded(14);
        let model = tiny_denoiser(2, &mut rng);
        let err = gradient_check(&model, 6, 2, &mut rng).unwrap();
        assert!(err < 1e-4, "max rel err {err}");
    }
}
