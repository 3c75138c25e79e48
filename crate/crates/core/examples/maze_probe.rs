use trajplan_core::ar::{self, ARConfig, ARModel};
use trajplan_core::diffusion::{self, Denoiser, DenoiserConfig, DiffusionModel, ScheduleKind};
use trajplan_core::envs::*;
use trajplan_core::invdyn::{self, InvDynConfig, InvDynModel};
use trajplan_core::nn::AdamConfig;
use trajplan_core::planner::*;
use trajplan_core::rng::seeded;

fn main() {
    let t0 = std::time::Instant::now();
    let maze = PointMaze2D::u_maze();
    let env = ToyEnv::Maze(maze.clone());
    let ds = generate_dataset(&env, PolicyTier::Mixed, 300, 1.0, 17).unwrap();
    let n_fail = ds.trajectories.iter().filter(|t| t.returns_to_go[0] < 0.5).count();
    println!("dataset: {} traj, {} failures, rtg_scale {}", ds.trajectories.len(), n_fail, ds.rtg_scale);

    let mut rng = seeded(1000);
    let mut arm = ARModel::init(ARConfig { d_s: 2, n_layers: 2, n_heads: 2, embed_dim: 64, context: 16, dropout: 0.0 }, &mut rng).unwrap();
    let curve = ar::train(&mut arm, &ds, 3000, 16, &AdamConfig::with_lr(1e-3), 41).unwrap();
    println!("[{:.0}s] ar loss start {:.4} end {:.5}", t0.elapsed().as_secs_f64(), curve[0], curve.last().unwrap());

    let den = Denoiser::init(DenoiserConfig::desk(2), &mut rng).unwrap();
    let mut diff = DiffusionModel::new(den, ScheduleKind::Cosine, 100).unwrap();
    let dcurve = diffusion::train(&mut diff.denoiser, &ds, &diff.sched, 9, 0.5, 4000, 16, &AdamConfig::with_lr(1e-3), 43).unwrap();
    println!("[{:.0}s] diff loss start {:.4} end {:.5}", t0.elapsed().as_secs_f64(), dcurve[0], dcurve.last().unwrap());

    let mut inv = InvDynModel::init(InvDynConfig { d_s: 2, d_a: 2, hidden: 128 }, &mut rng).unwrap();
    let icurve = invdyn::train(&mut inv, &ds, 6000, 256, &AdamConfig::with_lr(1e-3), 45).unwrap();
    println!("[{:.0}s] inv loss end {:.6}", t0.elapsed().as_secs_f64(), icurve.last().unwrap());

    let stats = ds.stats();
    let eval = |name: &str, cfg: &PlanConfig| {
        let models = PlannerModels { ar: &arm, diffusion: Some(&diff), invdyn: &inv, stats: &stats };
        let mut returns = Vec::new();
        let mut lens = Vec::new();
        for seed in 0..20u64 {
            let r = run_episode(&env, &models, cfg, 9000 + seed, maze.max_steps).unwrap();
            returns.push(r.total_return);
            lens.push(r.steps as f64);
        }
        let mean: f64 = returns.iter().sum::<f64>() / returns.len() as f64;
        let len: f64 = lens.iter().sum::<f64>() / lens.len() as f64;
        println!("[{:.0}s] {name}: mean return {mean:.2} mean len {len:.1}", t0.elapsed().as_secs_f64());
        mean
    };

    let mut td = PlanConfig::desk(1.0);
    td.history_len = 8; td.plan_steps = 8; td.improve_steps = 5; td.omega = 1.2; td.temperature = 0.5;
    eval("TD  (k=5, w=1.2, rtg policy=1)", &td);

    let mut tdm = td.clone(); tdm.improve_enabled = false;
    eval("TD(-)              ", &tdm);

    let mut rtg0 = td.clone(); rtg0.target_rtg = 0.0;
    eval("TD rtg=0           ", &rtg0);

    let mut k100 = td.clone(); k100.improve_steps = 100;
    eval("TD k_imp=100       ", &k100);

    let mut k2 = td.clone(); k2.improve_steps = 2;
    eval("TD k_imp=2         ", &k2);

    let mut w0 = td.clone(); w0.omega = 0.0;
    eval("TD w=0             ", &w0);
}
