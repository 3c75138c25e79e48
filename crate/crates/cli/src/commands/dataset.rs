//! `dataset gen` and `dataset inspect`.

use anyhow::Context;

use trajplan_core::data::{load_dataset, save_dataset};
use trajplan_core::envs::{generate_dataset, generate_freq_dataset, PolicyTier};

use crate::config::RunConfig;
use crate::paths::OutPaths;

pub fn generate(cfg: &RunConfig) -> anyhow::Result<std::path::PathBuf> {
    let out = OutPaths::new(&cfg.out_dir);
    out.ensure()?;
    let ds = if cfg.is_freq() {
        let task = cfg.build_freq_task()?;
        generate_freq_dataset(&task, cfg.data.n_traj, cfg.env.seed)?
    } else {
        let env = cfg.build_env()?;
        let tier = PolicyTier::parse(&cfg.data.tier)?;
        generate_dataset(&env, tier, cfg.data.n_traj, cfg.data.gamma, cfg.env.seed)?
    };
    let path = out.dataset();
    save_dataset(&path, &ds).with_context(|| format!("writing {}", path.display()))?;
    println!(
        "wrote {} ({} trajectories, {} transitions, mean return {:.3})",
        path.display(),
        ds.trajectories.len(),
        ds.n_transitions(),
        ds.mean_return()
    );
    Ok(path)
}

pub fn inspect(cfg: &RunConfig) -> anyhow::Result<String> {
    let out = OutPaths::new(&cfg.out_dir);
    let path = out.dataset();
    let ds = load_dataset(&path).with_context(|| format!("loading {}", path.display()))?;
    let mut report = String::new();
    report.push_str(&format!(
        "dataset {}\n  d_s={} d_a={} gamma={} trajectories={} rtg_scale={}\n",
        path.display(),
        ds.d_s,
        ds.d_a,
        ds.gamma,
        ds.trajectories.len(),
        ds.rtg_scale
    ));
    report.push_str(&format!(
        "  mean return {:.4}, max return {:.4}\n",
        ds.mean_return(),
        ds.max_return()
    ));
    for (i, tr) in ds.trajectories.iter().enumerate() {
        report.push_str(&format!(
            "  traj {:>4}: len {:>4}  return {:.4}\n",
            i,
            tr.len(),
            tr.returns_to_go[0]
        ));
    }
    print!("{report}");
    Ok(report)
}
