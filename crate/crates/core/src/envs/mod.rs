//! Deterministic toy environments and offline-dataset generators.
//!
//! Three worlds, each targeting one checkable claim: a continuous point
//! maze with sparse goal reward (planning quality), a linear system with an
//! analytic inverse-dynamics solution (action recovery), and an action-free
//! 1-D mixed-frequency signal task (spectral effect of the optimizer).

mod freq;
mod generate;
mod linear;
mod maze;
pub mod spectrum;

pub use freq::Freq1DTask;
pub use generate::{generate_dataset, generate_freq_dataset, scripted_action, PolicyTier};
pub use linear::LinearSystem;
pub use maze::{PointMaze2D, Wall};

use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RewardKind {
    Sparse,
    Dense,
    None,
}

#[derive(Debug, Clone, Copy)]
pub struct EnvSpec {
    pub d_s: usize,
    pub d_a: usize,
    pub max_steps: usize,
    pub reward: RewardKind,
}

/// A pure-function environment: `step` depends only on its arguments, so
/// replays are bitwise reproducible.
pub trait Environment {
    fn spec(&self) -> EnvSpec;
    fn reset(&self, rng: &mut Rng) -> Vec<f64>;
    /// Returns (next_state, reward, done). Out-of-bounds actions are clipped.
    fn step(&self, state: &[f64], action: &[f64]) -> (Vec<f64>, f64, bool);
}

/// Concrete environment selection for configs and the CLI.
#[derive(Debug, Clone)]
pub enum ToyEnv {
    Maze(PointMaze2D),
    Linear(LinearSystem),
}

impl Environment for ToyEnv {
    fn spec(&self) -> EnvSpec {
        match self {
            ToyEnv::Maze(m) => m.spec(),
            ToyEnv::Linear(l) => l.spec(),
        }
    }

    fn reset(&self, rng: &mut Rng) -> Vec<f64> {
        match self {
            ToyEnv::Maze(m) => m.reset(rng),
            ToyEnv::Linear(l) => l.reset(rng),
        }
    }

    fn step(&self, state: &[f64], action: &[f64]) -> (Vec<f64>, f64, bool) {
        match self {
            ToyEnv::Maze(m) => m.step(state, action),
            ToyEnv::Linear(l) => l.step(state, action),
        }
    }
}

pub(crate) fn clip(v: f64, lo: f64, hi: f64) -> f64 {
    v.max(lo).min(hi)
}
