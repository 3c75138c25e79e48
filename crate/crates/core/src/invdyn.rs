//! Inverse dynamics: map two consecutive states to the action that made
//! the transition. A two-layer ReLU perceptron on the concatenated
//! normalized states, regressing raw actions.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::data::OfflineDataset;
use crate::error::{CoreError, Result};
use crate::nn::checkpoint::{self, Meta};
use crate::nn::layers::linear;
use crate::nn::{adam_step, AdamConfig, Graph, ParamStore, Tensor};
use crate::rng::{seeded, Rng};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InvDynConfig {
    pub d_s: usize,
    pub d_a: usize,
    pub hidden: usize,
}

impl InvDynConfig {
    pub fn desk(d_s: usize, d_a: usize) -> Self {
        InvDynConfig { d_s, d_a, hidden: 128 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_a == 0 {
            return Err(CoreError::usage("inverse dynamics needs d_a >= 1"));
        }
        if self.d_s == 0 || self.hidden == 0 {
            return Err(CoreError::config("d_s and hidden must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct InvDynModel {
    pub cfg: InvDynConfig,
    pub params: ParamStore,
}

impl InvDynModel {
    pub fn init(cfg: InvDynConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let mut p = ParamStore::new();
        crate::nn::params::init_linear(&mut p, "fc1", 2 * cfg.d_s, cfg.hidden, rng)?;
        crate::nn::params::init_linear(&mut p, "fc2", cfg.hidden, cfg.d_a, rng)?;
        // zero output projection: predictions start at zero and grow only
        // as the data demands
        p.value_mut("fc2.w").unwrap().data_mut().fill(0.0);
        Ok(InvDynModel { cfg, params: p })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let mut meta = Meta::new();
        meta.insert("kind".into(), "invdyn".into());
        meta.insert("config".into(), serde_json::to_string(&self.cfg).expect("config serializes"));
        checkpoint::save(path, &self.params, &meta)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let (params, meta) = checkpoint::load(path)?;
        let loc = path.display().to_string();
        if meta.get("kind").map(String::as_str) != Some("invdyn") {
            return Err(CoreError::usage(format!("{loc} is not an inverse-dynamics checkpoint")));
        }
        let cfg: InvDynConfig = serde_json::from_str(
            meta.get("config").ok_or_else(|| CoreError::parse(&loc, "missing config meta"))?,
        )
        .map_err(|e| CoreError::parse(&loc, e.to_string()))?;
        cfg.validate()?;
        Ok(InvDynModel { cfg, params })
    }
}

/// Deterministic action estimate from two normalized states.
pub fn predict_action(model: &InvDynModel, s: &[f64], s_next: &[f64]) -> Result<Vec<f64>> {
    let d_s = model.cfg.d_s;
    if s.len() != d_s || s_next.len() != d_s {
        return Err(CoreError::dimension(format!(
            "predict_action: expected two {d_s}-dim states, got {} and {}",
            s.len(),
            s_next.len()
        )));
    }
    let mut joint = Vec::with_capacity(2 * d_s);
    joint.extend_from_slice(s);
    joint.extend_from_slice(s_next);
    let mut g = Graph::new();
    let x = g.input(Tensor::new(vec![1, 2 * d_s], joint)?);
    let h = linear(&mut g, &model.params, "fc1", x)?;
    let h = g.relu(h);
    let out = linear(&mut g, &model.params, "fc2", h)?;
    Ok(g.value(out).data().to_vec())
}

/// One minibatch MSE step over dataset transitions `(s_t, s_{t+1}) -> a_t`.
pub fn train_step(
    model: &mut InvDynModel,
    dataset: &OfflineDataset,
    batch_size: usize,
    adam: &AdamConfig,
    step: u64,
    rng: &mut Rng,
) -> Result<f64> {
    if dataset.d_a != model.cfg.d_a {
        return Err(CoreError::dimension(format!(
            "dataset has d_a {}, model expects {}",
            dataset.d_a, model.cfg.d_a
        )));
    }
    let eligible: Vec<usize> = (0..dataset.trajectories.len())
        .filter(|&i| dataset.trajectories[i].len() >= 2)
        .collect();
    if eligible.is_empty() {
        return Err(CoreError::usage("no trajectory has a transition"));
    }
    let d_s = dataset.d_s;
    let d_a = dataset.d_a;
    let mut inputs = Vec::with_capacity(batch_size * 2 * d_s);
    let mut targets = Vec::with_capacity(batch_size * d_a);
    for _ in 0..batch_size {
        let tr = &dataset.trajectories[eligible[rng.gen_range(0..eligible.len())]];
        // the terminal row's filler action never enters training
        let t = rng.gen_range(0..tr.len() - 1);
        inputs.extend(dataset.normalize_state(tr.states.row(t))?);
        inputs.extend(dataset.normalize_state(tr.states.row(t + 1))?);
        targets.extend_from_slice(tr.actions.row(t));
    }
    let mut g = Graph::new();
    let x = g.input(Tensor::new(vec![batch_size, 2 * d_s], inputs)?);
    let h = linear(&mut g, &model.params, "fc1", x)?;
    let h = g.relu(h);
    let pred = linear(&mut g, &model.params, "fc2", h)?;
    let tgt = g.input(Tensor::new(vec![batch_size, d_a], targets)?);
    let d = g.sub(pred, tgt);
    let d2 = g.mul(d, d);
    let s = g.sum_all(d2);
    let loss = g.scale(s, 1.0 / (batch_size * d_a) as f64);
    let loss_val = g.value(loss).data()[0];
    if !loss_val.is_finite() {
        return Err(CoreError::NonFinite("invdyn train loss".into()));
    }
    g.backward(loss);
    g.accumulate_param_grads(&mut model.params)?;
    adam_step(&mut model.params, adam, step)?;
    Ok(loss_val)
}

/// Training loop with the base learning rate decaying linearly over the run.
pub fn train(
    model: &mut InvDynModel,
    dataset: &OfflineDataset,
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
        curve.push(train_step(model, dataset, batch_size, &cfg, step, &mut rng)?);
    }
    Ok(curve)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{generate_dataset, LinearSystem, PolicyTier, ToyEnv};

    #[test]
    fn zero_width_actions_are_rejected() {
        let mut rng = seeded(0);
        assert!(matches!(
            InvDynModel::init(InvDynConfig { d_s: 2, d_a: 0, hidden: 16 }, &mut rng),
            Err(CoreError::Usage(_))
        ));
    }

    #[test]
    fn training_is_seed_deterministic() {
        let env = ToyEnv::Linear(LinearSystem::integrator(2));
        let ds = generate_dataset(&env, PolicyTier::Random, 20, 1.0, 5).unwrap();
        let adam = AdamConfig::with_lr(1e-3);
        let mut rng = seeded(1);
        let mut m1 = InvDynModel::init(InvDynConfig::desk(2, 2), &mut rng).unwrap();
        let mut m2 = m1.clone();
        let c1 = train(&mut m1, &ds, 50, 16, &adam, 9).unwrap();
        let c2 = train(&mut m2, &ds, 50, 16, &adam, 9).unwrap();
        assert_eq!(c1, c2);
        assert_eq!(m1.params.value("fc1.w").unwrap(), m2.params.value("fc1.w").unwrap());
    }

    #[test]
    fn integrator_action_is_state_difference() {
        // analytic oracle: s' = s + a, so a = s' - s; ~1e4 transitions
        let env = ToyEnv::Linear(LinearSystem::integrator(1));
        let ds = generate_dataset(&env, PolicyTier::Random, 320, 1.0, 5).unwrap();
        let mut rng = seeded(2);
        let mut model =
            InvDynModel::init(InvDynConfig { d_s: 1, d_a: 1, hidden: 128 }, &mut rng).unwrap();
        let adam = AdamConfig::with_lr(1e-3);
        let curve = train(&mut model, &ds, 8000, 256, &adam, 3).unwrap();
        // the loss dips under 1e-4 already inside the first 5k steps
        let floor_5k = curve[..5000].iter().cloned().fold(f64::INFINITY, f64::min);
        assert!(floor_5k < 1e-4, "loss floor over first 5k steps {floor_5k}");

        // held-out transitions from a fresh seed
        let held = generate_dataset(&env, PolicyTier::Random, 40, 1.0, 333).unwrap();
        let mut worst = 0.0f64;
        for tr in &held.trajectories {
            for t in 0..tr.len() - 1 {
                let s = ds.normalize_state(tr.states.row(t)).unwrap();
                let sn = ds.normalize_state(tr.states.row(t + 1)).unwrap();
                let pred = predict_action(&model, &s, &sn).unwrap();
                let oracle: Vec<f64> =
                    tr.states.row(t + 1).iter().zip(tr.states.row(t)).map(|(a, b)| a - b).collect();
                for (p, o) in pred.iter().zip(&oracle) {
                    worst = worst.max((p - o).abs());
                }
            }
        }
        assert!(worst < 1e-2, "held-out Linf {worst}");
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("inv.ckpt");
        let mut rng = seeded(7);
        let model = InvDynModel::init(InvDynConfig::desk(3, 2), &mut rng).unwrap();
        model.save(&path).unwrap();
        let loaded = InvDynModel::load(&path).unwrap();
        let a = predict_action(&model, &[0.1, 0.2, 0.3], &[0.2, 0.3, 0.4]).unwrap();
        let b = predict_action(&loaded, &[0.1, 0.2, 0.3], &[0.2, 0.3, 0.4]).unwrap();
        assert_eq!(a, b);
    }
}
