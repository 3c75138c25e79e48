//! Scripted behavior policies and offline-dataset generation.
//!
//! Tiers mirror the usual offline-RL data regimes: `random` takes uniform
//! actions, `medium` follows the greedy route with 30% random actions,
//! `expert` with 5%, and `mixed` interleaves medium and expert episodes
//! 50/50.

use rand::Rng as _;

use super::{Environment, LinearSystem, PointMaze2D, ToyEnv};
use crate::data::{OfflineDataset, Trajectory};
use crate::envs::Freq1DTask;
use crate::error::{CoreError, Result};
use crate::nn::Tensor;
use crate::rng::{derive_seed, seeded, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PolicyTier {
    Random,
    Medium,
    Expert,
    Mixed,
}

impl PolicyTier {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(PolicyTier::Random),
            "medium" => Ok(PolicyTier::Medium),
            "expert" => Ok(PolicyTier::Expert),
            "mixed" => Ok(PolicyTier::Mixed),
            other => Err(CoreError::config(format!("unknown policy tier `{other}`"))),
        }
    }

    fn noise(self) -> f64 {
        match self {
            PolicyTier::Random => 1.0,
            PolicyTier::Medium => 0.3,
            PolicyTier::Expert => 0.05,
            PolicyTier::Mixed => unreachable!("mixed resolves per episode"),
        }
    }

    fn resolve(self, episode: usize) -> PolicyTier {
        match self {
            PolicyTier::Mixed => {
                if episode % 2 == 0 {
                    PolicyTier::Medium
                } else {
                    PolicyTier::Expert
                }
            }
            t => t,
        }
    }
}

/// One scripted action: greedy-to-goal, replaced by a uniform action with
/// the tier's noise probability.
pub fn scripted_action(env: &ToyEnv, state: &[f64], tier: PolicyTier, rng: &mut Rng) -> Vec<f64> {
    let (a_max, d_a) = match env {
        ToyEnv::Maze(m) => (m.a_max, 2),
        ToyEnv::Linear(l) => (l.a_max, l.d_a),
    };
    if rng.gen_range(0.0..1.0) < tier.noise() {
        return (0..d_a).map(|_| rng.gen_range(-a_max..=a_max)).collect();
    }
    match env {
        ToyEnv::Maze(m) => greedy_maze(m, state),
        ToyEnv::Linear(l) => greedy_linear(l, state),
    }
}

/// Waypoint route over the wall: climb, cross, descend to the goal.
fn greedy_maze(maze: &PointMaze2D, state: &[f64]) -> Vec<f64> {
    let (x, y) = (state[0], state[1]);
    let wall_x = maze.walls.first().map(|w| w.pos).unwrap_or(maze.x_max);
    let wall_top = maze.walls.first().map(|w| w.hi).unwrap_or(0.0);
    let cruise_y = wall_top + 0.7;
    let target = if x < wall_x + 0.2 && y < wall_top + 0.4 {
        [wall_x - 1.0, cruise_y]
    } else if x < maze.goal[0] - 0.3 && y > wall_top {
        [maze.goal[0], cruise_y]
    } else {
        maze.goal
    };
    let scale = maze.a_max;
    vec![
        (target[0] - x).clamp(-scale, scale),
        (target[1] - y).clamp(-scale, scale),
    ]
}

/// Proportional pull toward the goal state through the pseudo-inverse of B.
fn greedy_linear(sys: &LinearSystem, state: &[f64]) -> Vec<f64> {
    let desired: Vec<f64> = sys.s_goal.clone();
    let a = sys.inverse_action(state, &desired);
    a.iter().map(|&v| v.clamp(-sys.a_max, sys.a_max)).collect()
}

/// Roll `n_traj` scripted episodes into an offline dataset. Episode `i`
/// draws from the stream `derive_seed(seed, i)`, so the result is a pure
/// function of the arguments.
pub fn generate_dataset(
    env: &ToyEnv,
    tier: PolicyTier,
    n_traj: usize,
    gamma: f64,
    seed: u64,
) -> Result<OfflineDataset> {
    if n_traj < 1 {
        return Err(CoreError::usage("generate_dataset: n_traj must be >= 1"));
    }
    let spec = env.spec();
    let mut trajectories = Vec::with_capacity(n_traj);
    for i in 0..n_traj {
        let mut rng = seeded(derive_seed(seed, i as u64));
        let episode_tier = tier.resolve(i);
        let mut state = env.reset(&mut rng);
        let mut states: Vec<f64> = Vec::new();
        let mut actions: Vec<f64> = Vec::new();
        let mut rewards: Vec<f64> = Vec::new();
        for _ in 0..spec.max_steps {
            let action = scripted_action(env, &state, episode_tier, &mut rng);
            let (next, reward, done) = env.step(&state, &action);
            states.extend_from_slice(&state);
            actions.extend_from_slice(&action);
            rewards.push(reward);
            state = next;
            if done {
                break;
            }
        }
        // terminal row: the final state with zero action/reward fillers
        states.extend_from_slice(&state);
        actions.extend(std::iter::repeat(0.0).take(spec.d_a));
        rewards.push(0.0);
        let t_len = rewards.len();
        trajectories.push(Trajectory::from_parts(
            Tensor::new(vec![t_len, spec.d_s], states)?,
            Tensor::new(vec![t_len, spec.d_a], actions)?,
            rewards,
            gamma,
        )?);
    }
    OfflineDataset::new(trajectories, gamma)
}

/// Action-free signal dataset; rewards are all zero so returns-to-go scale
/// degenerates to 1.
pub fn generate_freq_dataset(task: &Freq1DTask, n_traj: usize, seed: u64) -> Result<OfflineDataset> {
    if n_traj < 1 {
        return Err(CoreError::usage("generate_freq_dataset: n_traj must be >= 1"));
    }
    let mut trajectories = Vec::with_capacity(n_traj);
    for i in 0..n_traj {
        let mut rng = seeded(derive_seed(seed, i as u64));
        let signal = task.sample_signal(&mut rng);
        let t_len = signal.len();
        trajectories.push(Trajectory::from_parts(
            Tensor::new(vec![t_len, 1], signal)?,
            Tensor::zeros(vec![t_len, 0]),
            vec![0.0; t_len],
            1.0,
        )?);
    }
    OfflineDataset::new(trajectories, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn expert_reaches_goal_reliably() {
        let env = ToyEnv::Maze(PointMaze2D::u_maze());
        let ds = generate_dataset(&env, PolicyTier::Expert, 100, 1.0, 7).unwrap();
        let successes = ds.trajectories.iter().filter(|t| t.returns_to_go[0] > 0.5).count();
        assert!(successes >= 95, "expert reached goal in only {successes}/100 episodes");
    }

    #[test]
    fn tier_returns_are_strictly_ordered() {
        let env = ToyEnv::Maze(PointMaze2D::u_maze());
        let random = generate_dataset(&env, PolicyTier::Random, 100, 1.0, 11).unwrap();
        let medium = generate_dataset(&env, PolicyTier::Medium, 100, 1.0, 11).unwrap();
        let expert = generate_dataset(&env, PolicyTier::Expert, 100, 1.0, 11).unwrap();
        assert!(
            random.mean_return() < medium.mean_return(),
            "random {} !< medium {}",
            random.mean_return(),
            medium.mean_return()
        );
        assert!(
            medium.mean_return() < expert.mean_return(),
            "medium {} !< expert {}",
            medium.mean_return(),
            expert.mean_return()
        );
    }

    #[test]
    fn same_seed_same_dataset_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let env = ToyEnv::Maze(PointMaze2D::u_maze());
        let d1 = generate_dataset(&env, PolicyTier::Mixed, 20, 1.0, 3).unwrap();
        let d2 = generate_dataset(&env, PolicyTier::Mixed, 20, 1.0, 3).unwrap();
        let p1 = dir.path().join("1.jsonl");
        let p2 = dir.path().join("2.jsonl");
        crate::data::save_dataset(&p1, &d1).unwrap();
        crate::data::save_dataset(&p2, &d2).unwrap();
        assert_eq!(std::fs::read(p1).unwrap(), std::fs::read(p2).unwrap());
    }

    #[test]
    fn freq_dataset_has_no_actions_and_zero_returns() {
        let ds = generate_freq_dataset(&Freq1DTask::default(), 5, 1).unwrap();
        assert_eq!(ds.d_a, 0);
        assert_eq!(ds.rtg_scale, 1.0);
        assert!(ds.trajectories.iter().all(|t| t.returns_to_go.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn linear_logged_actions_match_closed_form() {
        let env = ToyEnv::Linear(LinearSystem::default_2d());
        let ds = generate_dataset(&env, PolicyTier::Medium, 5, 1.0, 9).unwrap();
        let sys = LinearSystem::default_2d();
        for tr in &ds.trajectories {
            for t in 0..tr.len() - 1 {
                let rec = sys.inverse_action(tr.states.row(t), tr.states.row(t + 1));
                for (x, y) in tr.actions.row(t).iter().zip(&rec) {
                    assert!((x - y).abs() < 1e-9);
                }
            }
        }
    }
}
