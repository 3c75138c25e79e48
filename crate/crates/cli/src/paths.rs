//! Output-directory layout shared by every command.

use std::path::{Path, PathBuf};

pub struct OutPaths {
    pub root: PathBuf,
}

impl OutPaths {
    pub fn new(out_dir: &str) -> Self {
        OutPaths { root: PathBuf::from(out_dir) }
    }

    pub fn ensure(&self) -> std::io::Result<()> {
        std::fs::create_dir_all(&self.root)
    }

    pub fn dataset(&self) -> PathBuf {
        self.root.join("dataset.jsonl")
    }
    pub fn ar_ckpt(&self) -> PathBuf {
        self.root.join("ar.ckpt")
    }
    pub fn ar_loss(&self) -> PathBuf {
        self.root.join("ar_loss.csv")
    }
    pub fn diffusion_ckpt(&self) -> PathBuf {
        self.root.join("diffusion.ckpt")
    }
    pub fn diffusion_loss(&self) -> PathBuf {
        self.root.join("diffusion_loss.csv")
    }
    pub fn invdyn_ckpt(&self) -> PathBuf {
        self.root.join("invdyn.ckpt")
    }
    pub fn invdyn_loss(&self) -> PathBuf {
        self.root.join("invdyn_loss.csv")
    }
    pub fn eval_metrics(&self) -> PathBuf {
        self.root.join("eval_metrics.jsonl")
    }
    pub fn bench_report(&self) -> PathBuf {
        self.root.join("bench.jsonl")
    }
    pub fn ablate_table(&self, axis: &str) -> PathBuf {
        self.root.join(format!("ablate_{axis}.csv"))
    }
    pub fn freq_spectra(&self) -> PathBuf {
        self.root.join("freq_spectra.csv")
    }
    pub fn freq_summary(&self) -> PathBuf {
        self.root.join("freq_summary.jsonl")
    }
}

/// Write a two-column loss curve; floats go through Rust's shortest
/// round-trip formatting so reruns are byte-identical.
pub fn write_loss_curve(path: &Path, curve: &[f64]) -> std::io::Result<()> {
    let mut text = String::with_capacity(curve.len() * 16 + 16);
    text.push_str("step,loss\n");
    for (i, v) in curve.iter().enumerate() {
        text.push_str(&format!("{},{}\n", i + 1, v));
    }
    std::fs::write(path, text)
}
