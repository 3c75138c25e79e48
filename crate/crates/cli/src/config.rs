//! Run configuration: one TOML file drives every command.
//!
//! Defaults follow the desk-scale setup; the full-scale values (4-layer
//! 256-wide backbone, 200k-step training) stay reachable by editing the
//! file. The tree round-trips through TOML losslessly.

use serde::{Deserialize, Serialize};
use std::path::Path;

use trajplan_core::envs::{Freq1DTask, LinearSystem, PointMaze2D, ToyEnv};
use trajplan_core::planner::{RtgSource, RtgUpdate};

pub const CONFIG_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub schema_version: u32,
    pub seed: u64,
    pub out_dir: String,
    pub env: EnvConfig,
    pub data: DataConfig,
    pub ar: ArConfig,
    pub diff: DiffConfig,
    pub inv: InvConfig,
    pub plan: PlanSection,
    pub eval: EvalConfig,
    pub bench: BenchConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            schema_version: CONFIG_SCHEMA_VERSION,
            seed: 0,
            out_dir: "runs/default".into(),
            env: EnvConfig::default(),
            data: DataConfig::default(),
            ar: ArConfig::default(),
            diff: DiffConfig::default(),
            inv: InvConfig::default(),
            plan: PlanSection::default(),
            eval: EvalConfig::default(),
            bench: BenchConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnvConfig {
    /// `point_maze`, `linear`, or `freq1d`.
    pub name: String,
    /// 0 keeps the environment's own default.
    pub max_steps: usize,
    pub seed: u64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig { name: "point_maze".into(), max_steps: 0, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub tier: String,
    pub n_traj: usize,
    pub gamma: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig { tier: "mixed".into(), n_traj: 300, gamma: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub embed_dim: usize,
    pub context: usize,
    pub dropout: f64,
    pub lr: f64,
    pub steps: u64,
    pub batch: usize,
}

impl Default for ArConfig {
    fn default() -> Self {
        ArConfig {
            n_layers: 2,
            n_heads: 2,
            embed_dim: 64,
            context: 32,
            dropout: 0.0,
            lr: 2e-4,
            steps: 20_000,
            batch: 32,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiffConfig {
    #[serde(rename = "K")]
    pub k: usize,
    pub schedule: String,
    pub p_dropout: f64,
    /// Training window length; 0 means `plan.steps + 1`.
    pub horizon: usize,
    pub channels: Vec<usize>,
    pub kernel: usize,
    pub groups: usize,
    pub lr: f64,
    pub steps: u64,
    pub batch: usize,
}

impl Default for DiffConfig {
    fn default() -> Self {
        DiffConfig {
            k: 100,
            schedule: "cosine".into(),
            p_dropout: 0.5,
            horizon: 0,
            channels: vec![32, 64],
            kernel: 5,
            groups: 8,
            lr: 2e-4,
            steps: 30_000,
            batch: 32,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InvConfig {
    pub hidden: usize,
    pub lr: f64,
    pub steps: u64,
    pub batch: usize,
}

impl Default for InvConfig {
    fn default() -> Self {
        InvConfig { hidden: 128, lr: 1e-3, steps: 5000, batch: 256 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlanSection {
    pub history_len: usize,
    pub steps: usize,
    pub improve_steps: usize,
    pub omega: f64,
    pub temperature: f64,
    /// Absolute returns-to-go target at episode start, environment units.
    pub target_rtg: f64,
    pub improve_enabled: bool,
    pub rtg_update: RtgUpdate,
    pub rtg_source: RtgSource,
}

impl Default for PlanSection {
    fn default() -> Self {
        PlanSection {
            history_len: 8,
            steps: 8,
            improve_steps: 5,
            omega: 1.2,
            temperature: 0.5,
            target_rtg: 1.0,
            improve_enabled: true,
            rtg_update: RtgUpdate::Decrement,
            rtg_source: RtgSource::Target,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub n_seeds: usize,
    /// `planner`, `scripted-expert`, or `scripted-random`.
    pub policy: String,
    /// Also evaluate with improvement disabled and emit both records.
    pub compare_improve: bool,
    /// Episodes used to pin the random/expert normalization references.
    pub n_ref_episodes: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            n_seeds: 20,
            policy: "planner".into(),
            compare_improve: false,
            n_ref_episodes: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    pub n_actions: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig { n_actions: 1000 }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| anyhow::anyhow!("cannot read config {}: {e}", path.display()))?;
        let cfg: RunConfig = toml::from_str(&text)
            .map_err(|e| anyhow::anyhow!("config {}: {e}", path.display()))?;
        if cfg.schema_version != CONFIG_SCHEMA_VERSION {
            anyhow::bail!(
                "config {}: unsupported schema_version {}",
                path.display(),
                cfg.schema_version
            );
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Build the control environment named by the config.
    pub fn build_env(&self) -> anyhow::Result<ToyEnv> {
        match self.env.name.as_str() {
            "point_maze" => {
                let mut m = PointMaze2D::u_maze();
                if self.env.max_steps > 0 {
                    m.max_steps = self.env.max_steps;
                }
                Ok(ToyEnv::Maze(m))
            }
            "linear" => {
                let mut l = LinearSystem::default_2d();
                if self.env.max_steps > 0 {
                    l.max_steps = self.env.max_steps;
                }
                Ok(ToyEnv::Linear(l))
            }
            "freq1d" => anyhow::bail!("freq1d has no control loop; use dataset gen / freq-demo"),
            other => anyhow::bail!("unknown env `{other}`"),
        }
    }

    pub fn build_freq_task(&self) -> anyhow::Result<Freq1DTask> {
        if self.env.name != "freq1d" {
            anyhow::bail!("env `{}` is not freq1d", self.env.name);
        }
        Ok(Freq1DTask::default())
    }

    pub fn is_freq(&self) -> bool {
        self.env.name == "freq1d"
    }

    /// Diffusion training window length.
    pub fn diff_horizon(&self) -> usize {
        if self.diff.horizon > 0 {
            self.diff.horizon
        } else {
            self.plan.steps + 1
        }
    }

    pub fn plan_config(&self) -> trajplan_core::planner::PlanConfig {
        trajplan_core::planner::PlanConfig {
            history_len: self.plan.history_len,
            plan_steps: self.plan.steps,
            improve_steps: self.plan.improve_steps,
            omega: self.plan.omega,
            temperature: self.plan.temperature,
            target_rtg: self.plan.target_rtg,
            improve_enabled: self.plan.improve_enabled,
            rtg_update: self.plan.rtg_update,
            rtg_source: self.plan.rtg_source,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_round_trips_losslessly() {
        let mut cfg = RunConfig::default();
        cfg.seed = 99;
        cfg.ar.embed_dim = 256;
        cfg.diff.channels = vec![16, 32, 64];
        cfg.plan.omega = 1.3;
        let text = cfg.to_toml();
        let back: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = "schema_version = 1\n[ar]\nn_layerz = 3\n";
        assert!(toml::from_str::<RunConfig>(text).is_err());
    }

    #[test]
    fn paper_scale_defaults_are_pinned() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.diff.k, 100);
        assert_eq!(cfg.diff.p_dropout, 0.5);
        assert_eq!(cfg.ar.lr, 2e-4);
        assert_eq!(cfg.ar.batch, 32);
        assert_eq!(cfg.plan.improve_steps, 5);
        assert_eq!(cfg.plan.omega, 1.2);
        assert_eq!(cfg.eval.n_seeds, 20);
        assert_eq!(cfg.bench.n_actions, 1000);
        assert_eq!(cfg.data.gamma, 1.0);
    }
}
