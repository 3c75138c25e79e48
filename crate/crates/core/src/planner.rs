//! Receding-horizon control loop.
//!
//! Every step: push the observation and current returns-to-go into a
//! bounded history, roll the autoregressive model `C` steps forward, refine
//! the planned window with a few guided reverse-diffusion steps (optional),
//! and extract the action that reaches the first planned state via inverse
//! dynamics. Only that first action is executed; the next step replans.

use std::collections::VecDeque;
use std::time::Instant;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::ar::{self, ARModel};
use crate::data::NormStats;
use crate::diffusion::{guided_eps, optimize_trajectory, reverse_step, DiffusionModel};
use crate::envs::Environment;
use crate::error::{CoreError, Result};
use crate::invdyn::{predict_action, InvDynModel};
use crate::nn::Tensor;
use crate::rng::{derive_seed, seeded};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RtgUpdate {
    /// `rtg <- max(rtg - reward, 0)` after each step.
    Decrement,
    Constant,
}

/// Which returns-to-go value conditions the diffusion optimizer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RtgSource {
    /// The planner's current target (default).
    Target,
    /// The AR model's own next-step returns-to-go estimate.
    Predicted,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PlanConfig {
    pub history_len: usize,
    pub plan_steps: usize,
    pub improve_steps: usize,
    pub omega: f64,
    pub temperature: f64,
    /// Raw (environment-scale) returns-to-go target at episode start.
    pub target_rtg: f64,
    pub improve_enabled: bool,
    pub rtg_update: RtgUpdate,
    pub rtg_source: RtgSource,
}

impl PlanConfig {
    pub fn desk(target_rtg: f64) -> Self {
        PlanConfig {
            history_len: 8,
            plan_steps: 8,
            improve_steps: 5,
            omega: 1.2,
            temperature: 0.5,
            target_rtg,
            improve_enabled: true,
            rtg_update: RtgUpdate::Decrement,
            rtg_source: RtgSource::Target,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.history_len < 1 || self.plan_steps < 1 {
            return Err(CoreError::config("history_len and plan_steps must be >= 1"));
        }
        if self.omega < 0.0 {
            return Err(CoreError::config("omega must be >= 0"));
        }
        if self.temperature < 0.0 {
            return Err(CoreError::config("temperature must be >= 0"));
        }
        Ok(())
    }
}

/// Bounded (state, returns-to-go) history; oldest entries evicted first.
#[derive(Debug, Clone)]
pub struct HistoryBuffer {
    states: VecDeque<Vec<f64>>,
    rtgs: VecDeque<f64>,
    capacity: usize,
}

impl HistoryBuffer {
    pub fn new(capacity: usize) -> Self {
        HistoryBuffer { states: VecDeque::new(), rtgs: VecDeque::new(), capacity }
    }

    pub fn push(&mut self, state: Vec<f64>, rtg: f64) {
        if self.states.len() == self.capacity {
            self.states.pop_front();
            self.rtgs.pop_front();
        }
        self.states.push_back(state);
        self.rtgs.push_back(rtg);
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn states(&self) -> Vec<Vec<f64>> {
        self.states.iter().cloned().collect()
    }

    pub fn rtgs(&self) -> Vec<f64> {
        self.rtgs.iter().cloned().collect()
    }
}

/// Everything a planner needs besides the environment.
pub struct PlannerModels<'a> {
    pub ar: &'a ARModel,
    pub diffusion: Option<&'a DiffusionModel>,
    pub invdyn: &'a InvDynModel,
    pub stats: &'a NormStats,
}

#[derive(Debug, Clone)]
pub struct PlanOutcome {
    /// Raw action for the environment.
    pub action: Vec<f64>,
    /// Planned future states (environment scale), after optimization.
    pub planned_states: Vec<Vec<f64>>,
    /// The same plan before the optimization stage.
    pub ar_planned_states: Vec<Vec<f64>>,
    /// First row of the optimization window (normalized); pinned to the
    /// current observation bitwise.
    pub window_first_row: Vec<f64>,
    pub nfe_denoiser: usize,
    pub ar_forwards: usize,
}

/// One planning step. Inserts `(obs, rtg)` into the buffer, rolls the AR
/// model `plan_steps` ahead feeding the last `history_len` tokens, optimizes
/// the `[current; planned]` window when enabled, and extracts the action to
/// the first planned state.
pub fn plan_step(
    obs: &[f64],
    rtg: f64,
    buffer: &mut HistoryBuffer,
    models: &PlannerModels,
    cfg: &PlanConfig,
    seed: u64,
) -> Result<PlanOutcome> {
    cfg.validate()?;
    if cfg.improve_enabled {
        let diff = models
            .diffusion
            .ok_or_else(|| CoreError::usage("improvement enabled but no diffusion model given"))?;
        if cfg.improve_steps > diff.sched.k_max {
            return Err(CoreError::usage(format!(
                "improve_steps {} exceeds diffusion K {}",
                cfg.improve_steps, diff.sched.k_max
            )));
        }
    }
    let n_obs = models.stats.normalize(obs)?;
    let rtg_scaled = models.stats.scale_rtg(rtg);
    buffer.push(n_obs.clone(), rtg_scaled);

    let c = cfg.plan_steps;
    let (ar_states, ar_rtgs) =
        ar::rollout(models.ar, &buffer.states(), &buffer.rtgs(), c, cfg.history_len, None)?;
    let ar_forwards = c;

    let d_s = models.ar.cfg.d_s;
    let mut window = Vec::with_capacity((c + 1) * d_s);
    window.extend_from_slice(&n_obs);
    for row in &ar_states {
        window.extend_from_slice(row);
    }
    let window = Tensor::new(vec![c + 1, d_s], window)?;

    let (optimized, nfe) = if cfg.improve_enabled && cfg.improve_steps > 0 {
        let diff = models.diffusion.expect("checked above");
        let y = match cfg.rtg_source {
            RtgSource::Target => rtg_scaled,
            RtgSource::Predicted => *ar_rtgs.first().unwrap_or(&rtg_scaled),
        };
        let mut rng = seeded(seed);
        optimize_trajectory(
            &diff.denoiser,
            &diff.sched,
            &window,
            y,
            cfg.improve_steps,
            cfg.omega,
            cfg.temperature,
            &mut rng,
        )?
    } else {
        (window.clone(), 0)
    };

    let action = predict_action(models.invdyn, &n_obs, optimized.row(1))?;
    let planned_states = (1..=c)
        .map(|i| models.stats.denormalize(optimized.row(i)))
        .collect::<Result<Vec<_>>>()?;
    let ar_planned_states =
        ar_states.iter().map(|r| models.stats.denormalize(r)).collect::<Result<Vec<_>>>()?;
    Ok(PlanOutcome {
        action,
        planned_states,
        ar_planned_states,
        window_first_row: optimized.row(0).to_vec(),
        nfe_denoiser: nfe,
        ar_forwards,
    })
}

/// Reference planner that skips the autoregressive stage entirely: the
/// window starts as pure noise and runs the full-length guided reverse
/// chain (`2K` denoiser evaluations per action). Used as the latency
/// baseline at matched network size.
pub fn full_denoise_plan(
    obs: &[f64],
    rtg: f64,
    models: &PlannerModels,
    cfg: &PlanConfig,
    seed: u64,
) -> Result<PlanOutcome> {
    let diff = models
        .diffusion
        .ok_or_else(|| CoreError::usage("full_denoise_plan requires a diffusion model"))?;
    let n_obs = models.stats.normalize(obs)?;
    let rtg_scaled = models.stats.scale_rtg(rtg);
    let d_s = diff.denoiser.cfg.d_s;
    let c = cfg.plan_steps;
    let mut rng = seeded(seed);
    let mut x = Tensor::zeros(vec![c + 1, d_s]);
    for v in x.data_mut().iter_mut() {
        let z: f64 = StandardNormal.sample(&mut rng);
        *v = z;
    }
    let mut nfe = 0;
    for k in (1..=diff.sched.k_max).rev() {
        x.data_mut()[..d_s].copy_from_slice(&n_obs);
        let eps_hat = guided_eps(&diff.denoiser, &x, rtg_scaled, k, cfg.omega)?;
        nfe += 2;
        x = reverse_step(&x, &eps_hat, k, &diff.sched, cfg.temperature, &mut rng)?;
    }
    x.data_mut()[..d_s].copy_from_slice(&n_obs);
    let action = predict_action(models.invdyn, &n_obs, x.row(1))?;
    let planned_states =
        (1..=c).map(|i| models.stats.denormalize(x.row(i))).collect::<Result<Vec<_>>>()?;
    Ok(PlanOutcome {
        action,
        planned_states: planned_states.clone(),
        ar_planned_states: Vec::new(),
        window_first_row: x.row(0).to_vec(),
        nfe_denoiser: nfe,
        ar_forwards: 0,
    })
}

/// Returns-to-go bookkeeping between steps.
pub fn update_rtg(rtg: f64, reward: f64, mode: RtgUpdate) -> f64 {
    match mode {
        RtgUpdate::Decrement => (rtg - reward).max(0.0),
        RtgUpdate::Constant => rtg,
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub total_return: f64,
    pub steps: usize,
    pub nfe_denoiser: usize,
    pub ar_forwards: usize,
    pub actions: Vec<Vec<f64>>,
    /// Wall-clock seconds per planning call; excluded from determinism
    /// comparisons.
    pub latencies: Vec<f64>,
}

impl EpisodeResult {
    /// Equality on everything except timings.
    pub fn same_outcome(&self, other: &EpisodeResult) -> bool {
        self.total_return == other.total_return
            && self.steps == other.steps
            && self.nfe_denoiser == other.nfe_denoiser
            && self.ar_forwards == other.ar_forwards
            && self.actions == other.actions
    }
}

/// Run one episode under the receding-horizon planner. The RNG streams for
/// the environment reset and each planning step derive from `seed`, so the
/// result is a pure function of its arguments (timings aside).
pub fn run_episode(
    env: &dyn Environment,
    models: &PlannerModels,
    cfg: &PlanConfig,
    seed: u64,
    max_steps: usize,
) -> Result<EpisodeResult> {
    let mut reset_rng = seeded(derive_seed(seed, u64::MAX));
    let mut state = env.reset(&mut reset_rng);
    let mut rtg = cfg.target_rtg;
    let mut buffer = HistoryBuffer::new(cfg.history_len);
    let mut result = EpisodeResult {
        total_return: 0.0,
        steps: 0,
        nfe_denoiser: 0,
        ar_forwards: 0,
        actions: Vec::new(),
        latencies: Vec::new(),
    };
    for t in 0..max_steps {
        let t0 = Instant::now();
        let outcome = plan_step(&state, rtg, &mut buffer, models, cfg, derive_seed(seed, t as u64))?;
        result.latencies.push(t0.elapsed().as_secs_f64());
        let (next, reward, done) = env.step(&state, &outcome.action);
        result.total_return += reward;
        result.steps += 1;
        result.nfe_denoiser += outcome.nfe_denoiser;
        result.ar_forwards += outcome.ar_forwards;
        result.actions.push(outcome.action);
        rtg = update_rtg(rtg, reward, cfg.rtg_update);
        state = next;
        if done {
            break;
        }
    }
    Ok(result)
}
