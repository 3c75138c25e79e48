//! `train-ar`, `train-diffusion`, `train-invdyn`.

use anyhow::Context;

use trajplan_core::ar::{self, ARModel};
use trajplan_core::data::load_dataset;
use trajplan_core::diffusion::{self, Denoiser, DenoiserConfig, DiffusionModel, ScheduleKind};
use trajplan_core::invdyn::{self, InvDynConfig, InvDynModel};
use trajplan_core::nn::AdamConfig;
use trajplan_core::rng::{derive_seed, seeded};

use crate::config::RunConfig;
use crate::paths::{write_loss_curve, OutPaths};

fn load_data(cfg: &RunConfig) -> anyhow::Result<trajplan_core::data::OfflineDataset> {
    let out = OutPaths::new(&cfg.out_dir);
    let path = out.dataset();
    load_dataset(&path)
        .with_context(|| format!("loading {} (run `dataset gen` first?)", path.display()))
}

pub fn train_ar(cfg: &RunConfig) -> anyhow::Result<std::path::PathBuf> {
    let ds = load_data(cfg)?;
    let out = OutPaths::new(&cfg.out_dir);
    let arc = trajplan_core::ar::ARConfig {
        d_s: ds.d_s,
        n_layers: cfg.ar.n_layers,
        n_heads: cfg.ar.n_heads,
        embed_dim: cfg.ar.embed_dim,
        context: cfg.ar.context,
        dropout: cfg.ar.dropout,
    };
    let mut rng = seeded(derive_seed(cfg.seed, 0x41));
    let mut model = ARModel::init(arc, &mut rng)?;
    let adam = AdamConfig::with_lr(cfg.ar.lr);
    let curve = ar::train(&mut model, &ds, cfg.ar.steps, cfg.ar.batch, &adam, derive_seed(cfg.seed, 0x42))?;
    let path = out.ar_ckpt();
    model.save(&path)?;
    write_loss_curve(&out.ar_loss(), &curve)?;
    println!(
        "trained ar backbone: {} steps, loss {:.5} -> {:.5}; wrote {}",
        cfg.ar.steps,
        curve.first().unwrap_or(&0.0),
        curve.last().unwrap_or(&0.0),
        path.display()
    );
    Ok(path)
}

pub fn train_diffusion(cfg: &RunConfig) -> anyhow::Result<std::path::PathBuf> {
    let ds = load_data(cfg)?;
    let out = OutPaths::new(&cfg.out_dir);
    let dc = DenoiserConfig {
        d_s: ds.d_s,
        channels: cfg.diff.channels.clone(),
        kernel: cfg.diff.kernel,
        groups: cfg.diff.groups,
        ..DenoiserConfig::desk(ds.d_s)
    };
    let kind = ScheduleKind::parse(&cfg.diff.schedule)?;
    let mut rng = seeded(derive_seed(cfg.seed, 0x51));
    let den = Denoiser::init(dc, &mut rng)?;
    let mut model = DiffusionModel::new(den, kind, cfg.diff.k)?;
    let adam = AdamConfig::with_lr(cfg.diff.lr);
    let curve = diffusion::train(
        &mut model.denoiser,
        &ds,
        &model.sched,
        cfg.diff_horizon(),
        cfg.diff.p_dropout,
        cfg.diff.steps,
        cfg.diff.batch,
        &adam,
        derive_seed(cfg.seed, 0x52),
    )?;
    let path = out.diffusion_ckpt();
    model.save(&path)?;
    write_loss_curve(&out.diffusion_loss(), &curve)?;
    println!(
        "trained denoiser: {} steps at horizon {}, loss {:.5} -> {:.5}; wrote {}",
        cfg.diff.steps,
        cfg.diff_horizon(),
        curve.first().unwrap_or(&0.0),
        curve.last().unwrap_or(&0.0),
        path.display()
    );
    Ok(path)
}

pub fn train_invdyn(cfg: &RunConfig) -> anyhow::Result<std::path::PathBuf> {
    let ds = load_data(cfg)?;
    if ds.d_a == 0 {
        anyhow::bail!("dataset has no actions; inverse dynamics does not apply");
    }
    let out = OutPaths::new(&cfg.out_dir);
    let mut rng = seeded(derive_seed(cfg.seed, 0x61));
    let mut model =
        InvDynModel::init(InvDynConfig { d_s: ds.d_s, d_a: ds.d_a, hidden: cfg.inv.hidden }, &mut rng)?;
    let adam = AdamConfig::with_lr(cfg.inv.lr);
    let curve =
        invdyn::train(&mut model, &ds, cfg.inv.steps, cfg.inv.batch, &adam, derive_seed(cfg.seed, 0x62))?;
    let path = out.invdyn_ckpt();
    model.save(&path)?;
    write_loss_curve(&out.invdyn_loss(), &curve)?;
    println!(
        "trained inverse dynamics: {} steps, final loss {:.6}; wrote {}",
        cfg.inv.steps,
        curve.last().unwrap_or(&0.0),
        path.display()
    );
    Ok(path)
}
