//! Trajectory storage, returns-to-go, normalization, batching, and the
//! line-delimited dataset file format.
//!
//! On disk a dataset is JSON-lines: a header record (`format_version`,
//! `d_s`, `d_a`, `gamma`) followed by one record per trajectory with nested
//! numeric arrays. The writer is deterministic, so equal datasets produce
//! equal bytes. See docs/formats.md.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::nn::Tensor;
use crate::rng::Rng;

pub const DATASET_FORMAT_VERSION: u32 = 1;
const STD_FLOOR: f64 = 1e-8;

/// One episode: states, actions, rewards and returns-to-go, all of leading
/// length `T`. The final row marks the terminal state; its action and reward
/// are zero fillers (no transition leaves it).
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub states: Tensor,  // [T, d_s]
    pub actions: Tensor, // [T, d_a]
    pub rewards: Vec<f64>,
    pub returns_to_go: Vec<f64>,
}

impl Trajectory {
    /// Build from raw parts, computing returns-to-go at `gamma`.
    pub fn from_parts(states: Tensor, actions: Tensor, rewards: Vec<f64>, gamma: f64) -> Result<Self> {
        let rtg = compute_returns_to_go(&rewards, gamma)?;
        let t = Trajectory { states, actions, rewards, returns_to_go: rtg };
        t.validate()?;
        Ok(t)
    }

    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    pub fn d_s(&self) -> usize {
        self.states.cols()
    }

    pub fn d_a(&self) -> usize {
        self.actions.cols()
    }

    fn validate(&self) -> Result<()> {
        let t = self.len();
        if t == 0 {
            return Err(CoreError::usage("trajectory must have T >= 1"));
        }
        if self.states.rows() != t || self.actions.rows() != t || self.returns_to_go.len() != t {
            return Err(CoreError::dimension(format!(
                "trajectory arrays disagree on T: states {}, actions {}, rewards {}, rtg {}",
                self.states.rows(),
                self.actions.rows(),
                t,
                self.returns_to_go.len()
            )));
        }
        self.states.ensure_finite("trajectory states")?;
        self.actions.ensure_finite("trajectory actions")?;
        Ok(())
    }
}

/// Backward recursion `rtg[t] = r[t] + gamma * rtg[t+1]`.
pub fn compute_returns_to_go(rewards: &[f64], gamma: f64) -> Result<Vec<f64>> {
    if rewards.is_empty() {
        return Err(CoreError::usage("compute_returns_to_go: empty rewards"));
    }
    if !(0.0..=1.0).contains(&gamma) {
        return Err(CoreError::usage(format!("gamma {gamma} outside [0,1]")));
    }
    let t = rewards.len();
    let mut rtg = vec![0.0; t];
    rtg[t - 1] = rewards[t - 1];
    for i in (0..t - 1).rev() {
        rtg[i] = rewards[i] + gamma * rtg[i + 1];
    }
    Ok(rtg)
}

/// Normalization constants a trained model is bound to. Carried separately
/// from the dataset so planners can run from checkpoints plus stats alone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub rtg_scale: f64,
}

impl NormStats {
    pub fn normalize(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.mean.len() {
            return Err(CoreError::dimension(format!(
                "normalize: got {} dims, stats have {}",
                x.len(),
                self.mean.len()
            )));
        }
        Ok(x.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(v, (m, s))| (v - m) / s)
            .collect())
    }

    pub fn denormalize(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.mean.len() {
            return Err(CoreError::dimension(format!(
                "denormalize: got {} dims, stats have {}",
                x.len(),
                self.mean.len()
            )));
        }
        Ok(x.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(v, (m, s))| v * s + m)
            .collect())
    }

    pub fn scale_rtg(&self, rtg: f64) -> f64 {
        rtg / self.rtg_scale
    }
}

/// Immutable trajectory collection plus the statistics models condition on.
#[derive(Debug, Clone)]
pub struct OfflineDataset {
    pub trajectories: Vec<Trajectory>,
    pub d_s: usize,
    pub d_a: usize,
    pub gamma: f64,
    pub state_mean: Vec<f64>,
    pub state_std: Vec<f64>,
    pub rtg_scale: f64,
}

impl OfflineDataset {
    pub fn new(trajectories: Vec<Trajectory>, gamma: f64) -> Result<Self> {
        if trajectories.is_empty() {
            return Err(CoreError::usage("dataset must contain at least one trajectory"));
        }
        let d_s = trajectories[0].d_s();
        let d_a = trajectories[0].d_a();
        for (i, tr) in trajectories.iter().enumerate() {
            tr.validate()?;
            if tr.d_s() != d_s || tr.d_a() != d_a {
                return Err(CoreError::dimension(format!(
                    "trajectory {i} dims ({}, {}) disagree with dataset ({d_s}, {d_a})",
                    tr.d_s(),
                    tr.d_a()
                )));
            }
        }
        let (state_mean, state_std) = state_stats(&trajectories, d_s);
        let mut rtg_scale = 0.0f64;
        for tr in &trajectories {
            for &v in &tr.returns_to_go {
                rtg_scale = rtg_scale.max(v.abs());
            }
        }
        if rtg_scale == 0.0 {
            rtg_scale = 1.0;
        }
        Ok(OfflineDataset { trajectories, d_s, d_a, gamma, state_mean, state_std, rtg_scale })
    }

    pub fn normalize_state(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.d_s {
            return Err(CoreError::dimension(format!(
                "normalize_state: got {} dims, dataset has {}",
                x.len(),
                self.d_s
            )));
        }
        Ok(x.iter()
            .zip(self.state_mean.iter().zip(&self.state_std))
            .map(|(v, (m, s))| (v - m) / s)
            .collect())
    }

    pub fn denormalize_state(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.d_s {
            return Err(CoreError::dimension(format!(
                "denormalize_state: got {} dims, dataset has {}",
                x.len(),
                self.d_s
            )));
        }
        Ok(x.iter()
            .zip(self.state_mean.iter().zip(&self.state_std))
            .map(|(v, (m, s))| v * s + m)
            .collect())
    }

    pub fn scale_rtg(&self, rtg: f64) -> f64 {
        rtg / self.rtg_scale
    }

    pub fn stats(&self) -> NormStats {
        NormStats {
            mean: self.state_mean.clone(),
            std: self.state_std.clone(),
            rtg_scale: self.rtg_scale,
        }
    }

    pub fn n_transitions(&self) -> usize {
        self.trajectories.iter().map(|t| t.len().saturating_sub(1)).sum()
    }

    pub fn mean_return(&self) -> f64 {
        let total: f64 = self.trajectories.iter().map(|t| t.returns_to_go[0]).sum();
        total / self.trajectories.len() as f64
    }

    pub fn max_return(&self) -> f64 {
        self.trajectories
            .iter()
            .map(|t| t.returns_to_go[0])
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

fn state_stats(trajectories: &[Trajectory], d_s: usize) -> (Vec<f64>, Vec<f64>) {
    let mut mean = vec![0.0; d_s];
    let mut count = 0usize;
    for tr in trajectories {
        for t in 0..tr.len() {
            for (m, v) in mean.iter_mut().zip(tr.states.row(t)) {
                *m += v;
            }
        }
        count += tr.len();
    }
    for m in mean.iter_mut() {
        *m /= count as f64;
    }
    let mut var = vec![0.0; d_s];
    for tr in trajectories {
        for t in 0..tr.len() {
            for ((vv, v), m) in var.iter_mut().zip(tr.states.row(t)).zip(&mean) {
                *vv += (v - m).powi(2);
            }
        }
    }
    let std = var
        .iter()
        .map(|v| (v / count as f64).sqrt().max(STD_FLOOR))
        .collect();
    (mean, std)
}

/// Context windows for autoregressive training. States are normalized and
/// returns-to-go scaled; positions left of the episode start are zero-padded
/// with `mask = 0`.
#[derive(Debug, Clone)]
pub struct Batch {
    pub states: Vec<Tensor>,        // each [K, d_s]
    pub rtgs: Vec<Vec<f64>>,        // each [K]
    pub target_states: Vec<Tensor>, // each [K, d_s]
    pub target_rtgs: Vec<Vec<f64>>, // each [K]
    pub mask: Vec<Vec<f64>>,        // each [K], 1.0 on real positions
    /// Window start index per sample (may be negative into the padding).
    pub starts: Vec<i64>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }
}

/// Draw `batch_size` length-`k_ctx` windows uniformly. A window is anchored
/// at a uniformly chosen end position `e` (with a valid next-step target),
/// so its start `e - k_ctx + 1` is uniform as well.
pub fn sample_batch(
    dataset: &OfflineDataset,
    k_ctx: usize,
    batch_size: usize,
    rng: &mut Rng,
) -> Result<Batch> {
    if k_ctx < 1 {
        return Err(CoreError::usage("sample_batch: k_ctx must be >= 1"));
    }
    if batch_size < 1 {
        return Err(CoreError::usage("sample_batch: batch_size must be >= 1"));
    }
    let eligible: Vec<usize> = (0..dataset.trajectories.len())
        .filter(|&i| dataset.trajectories[i].len() >= 2)
        .collect();
    if eligible.is_empty() {
        return Err(CoreError::usage("sample_batch: no trajectory of length >= 2"));
    }
    let d_s = dataset.d_s;
    let mut batch = Batch {
        states: Vec::with_capacity(batch_size),
        rtgs: Vec::with_capacity(batch_size),
        target_states: Vec::with_capacity(batch_size),
        target_rtgs: Vec::with_capacity(batch_size),
        mask: Vec::with_capacity(batch_size),
        starts: Vec::with_capacity(batch_size),
    };
    for _ in 0..batch_size {
        let tr = &dataset.trajectories[eligible[rng.gen_range(0..eligible.len())]];
        let t_len = tr.len();
        let end = rng.gen_range(0..=t_len - 2) as i64;
        let start = end - k_ctx as i64 + 1;
        let mut st = vec![0.0; k_ctx * d_s];
        let mut tg = vec![0.0; k_ctx * d_s];
        let mut rt = vec![0.0; k_ctx];
        let mut trt = vec![0.0; k_ctx];
        let mut mask = vec![0.0; k_ctx];
        for pos in 0..k_ctx {
            let a = start + pos as i64;
            if a < 0 {
                continue;
            }
            let a = a as usize;
            let ns = dataset.normalize_state(tr.states.row(a))?;
            st[pos * d_s..(pos + 1) * d_s].copy_from_slice(&ns);
            let nt = dataset.normalize_state(tr.states.row(a + 1))?;
            tg[pos * d_s..(pos + 1) * d_s].copy_from_slice(&nt);
            rt[pos] = dataset.scale_rtg(tr.returns_to_go[a]);
            trt[pos] = dataset.scale_rtg(tr.returns_to_go[a + 1]);
            mask[pos] = 1.0;
        }
        batch.states.push(Tensor::new(vec![k_ctx, d_s], st)?);
        batch.target_states.push(Tensor::new(vec![k_ctx, d_s], tg)?);
        batch.rtgs.push(rt);
        batch.target_rtgs.push(trt);
        batch.mask.push(mask);
        batch.starts.push(start);
    }
    Ok(batch)
}

// ── file format ──────────────────────────────────────────────────────────

#[derive(Serialize, Deserialize)]
struct HeaderRecord {
    format_version: u32,
    d_s: usize,
    d_a: usize,
    gamma: f64,
    n_trajectories: usize,
}

#[derive(Serialize, Deserialize)]
struct TrajectoryRecord {
    states: Vec<Vec<f64>>,
    actions: Vec<Vec<f64>>,
    rewards: Vec<f64>,
    returns_to_go: Vec<f64>,
}

pub fn save_dataset(path: &Path, dataset: &OfflineDataset) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    let header = HeaderRecord {
        format_version: DATASET_FORMAT_VERSION,
        d_s: dataset.d_s,
        d_a: dataset.d_a,
        gamma: dataset.gamma,
        n_trajectories: dataset.trajectories.len(),
    };
    writeln!(w, "{}", serde_json::to_string(&header).expect("header serializes"))?;
    for tr in &dataset.trajectories {
        let rec = TrajectoryRecord {
            states: (0..tr.len()).map(|t| tr.states.row(t).to_vec()).collect(),
            actions: (0..tr.len()).map(|t| tr.actions.row(t).to_vec()).collect(),
            rewards: tr.rewards.clone(),
            returns_to_go: tr.returns_to_go.clone(),
        };
        writeln!(w, "{}", serde_json::to_string(&rec).expect("record serializes"))?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<OfflineDataset> {
    let file = File::open(path)?;
    let loc = |line: usize| format!("{}:{}", path.display(), line);
    let mut lines = BufReader::new(file).lines();
    let header_line = lines
        .next()
        .ok_or_else(|| CoreError::parse(loc(1), "empty file, expected header record"))??;
    let header: HeaderRecord = serde_json::from_str(&header_line)
        .map_err(|e| CoreError::parse(loc(1), format!("header: {e}")))?;
    if header.format_version != DATASET_FORMAT_VERSION {
        return Err(CoreError::parse(
            loc(1),
            format!("unsupported format_version {}", header.format_version),
        ));
    }
    let mut trajectories = Vec::with_capacity(header.n_trajectories);
    let mut line_no = 1;
    for line in lines {
        line_no += 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: TrajectoryRecord = serde_json::from_str(&line)
            .map_err(|e| CoreError::parse(loc(line_no), format!("trajectory: {e}")))?;
        let t_len = rec.rewards.len();
        if rec.states.len() != t_len || rec.actions.len() != t_len || rec.returns_to_go.len() != t_len
        {
            return Err(CoreError::parse(
                loc(line_no),
                format!(
                    "array lengths disagree: states {}, actions {}, rewards {}, rtg {}",
                    rec.states.len(),
                    rec.actions.len(),
                    t_len,
                    rec.returns_to_go.len()
                ),
            ));
        }
        let states = rows_to_tensor(&rec.states, header.d_s, &loc(line_no), "states")?;
        let actions = rows_to_tensor(&rec.actions, header.d_a, &loc(line_no), "actions")?;
        // stored returns-to-go must satisfy the recursion at the header gamma
        let recomputed = compute_returns_to_go(&rec.rewards, header.gamma)
            .map_err(|e| CoreError::parse(loc(line_no), e.to_string()))?;
        for (i, (a, b)) in recomputed.iter().zip(&rec.returns_to_go).enumerate() {
            if (a - b).abs() > 1e-9 {
                return Err(CoreError::parse(
                    loc(line_no),
                    format!("returns_to_go[{i}] = {b} violates recursion (expected {a})"),
                ));
            }
        }
        trajectories.push(Trajectory {
            states,
            actions,
            rewards: rec.rewards,
            returns_to_go: rec.returns_to_go,
        });
    }
    if trajectories.len() != header.n_trajectories {
        return Err(CoreError::parse(
            loc(line_no),
            format!(
                "header promises {} trajectories, file has {}",
                header.n_trajectories,
                trajectories.len()
            ),
        ));
    }
    OfflineDataset::new(trajectories, header.gamma)
}

fn rows_to_tensor(rows: &[Vec<f64>], width: usize, loc: &str, field: &str) -> Result<Tensor> {
    let mut data = Vec::with_capacity(rows.len() * width);
    for (i, r) in rows.iter().enumerate() {
        if r.len() != width {
            return Err(CoreError::parse(
                loc,
                format!("{field}[{i}] has {} entries, header says {width}", r.len()),
            ));
        }
        data.extend_from_slice(r);
    }
    Tensor::new(vec![rows.len(), width], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_traj(values: &[f64], gamma: f64) -> Trajectory {
        let t = values.len();
        let states = Tensor::new(vec![t, 1], values.to_vec()).unwrap();
        let actions = Tensor::zeros(vec![t, 1]);
        let rewards: Vec<f64> = (0..t).map(|i| i as f64 * 0.1).collect();
        Trajectory::from_parts(states, actions, rewards, gamma).unwrap()
    }

    #[test]
    fn rtg_undiscounted_is_suffix_sum() {
        let rtg = compute_returns_to_go(&[1.0, 2.0, 3.0], 1.0).unwrap();
        assert_eq!(rtg, vec![6.0, 5.0, 3.0]);
    }

    #[test]
    fn rtg_discounted_hand_case() {
        let rtg = compute_returns_to_go(&[1.0, 2.0, 3.0], 0.5).unwrap();
        assert_eq!(rtg, vec![2.75, 3.5, 3.0]);
    }

    #[test]
    fn rtg_rejects_empty() {
        assert!(compute_returns_to_go(&[], 1.0).is_err());
    }

    #[test]
    fn normalization_round_trips() {
        let trajs = vec![toy_traj(&[1.0, 5.0, -3.0, 2.0], 1.0)];
        let ds = OfflineDataset::new(trajs, 1.0).unwrap();
        let x = vec![0.7];
        let n = ds.normalize_state(&x).unwrap();
        let back = ds.denormalize_state(&n).unwrap();
        assert!((back[0] - 0.7).abs() < 1e-12);
    }

    #[test]
    fn normalized_dataset_has_zero_mean() {
        // independent oracle: recompute stats on normalized states
        let trajs = vec![toy_traj(&[1.0, 5.0, -3.0, 2.0], 1.0), toy_traj(&[0.0, 9.0, 4.0], 1.0)];
        let ds = OfflineDataset::new(trajs, 1.0).unwrap();
        let mut sum = 0.0;
        let mut n = 0;
        for tr in &ds.trajectories {
            for t in 0..tr.len() {
                sum += ds.normalize_state(tr.states.row(t)).unwrap()[0];
                n += 1;
            }
        }
        assert!((sum / n as f64).abs() < 1e-10);
    }

    #[test]
    fn batches_are_seed_deterministic_and_masked_positions_are_real() {
        let trajs = vec![toy_traj(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], 1.0)];
        let ds = OfflineDataset::new(trajs, 1.0).unwrap();
        let b1 = sample_batch(&ds, 4, 8, &mut crate::rng::seeded(3)).unwrap();
        let b2 = sample_batch(&ds, 4, 8, &mut crate::rng::seeded(3)).unwrap();
        for i in 0..8 {
            assert_eq!(b1.states[i], b2.states[i]);
            assert_eq!(b1.rtgs[i], b2.rtgs[i]);
            assert_eq!(b1.starts[i], b2.starts[i]);
        }
        // every masked-in position maps to a real timestep
        for i in 0..8 {
            for pos in 0..4 {
                let a = b1.starts[i] + pos as i64;
                if b1.mask[i][pos] == 1.0 {
                    assert!(a >= 0 && (a as usize) < 5);
                } else {
                    assert!(a < 0);
                    assert!(b1.states[i].row(pos).iter().all(|&v| v == 0.0));
                }
            }
        }
    }

    #[test]
    fn window_starts_are_uniform() {
        // chi-squared over 1e5 draws on a single length-12 trajectory
        let trajs = vec![toy_traj(&[0.0; 12], 1.0)];
        let ds = OfflineDataset::new(trajs, 1.0).unwrap();
        let k = 4usize;
        let n_draws = 100_000usize;
        let mut rng = crate::rng::seeded(99);
        // valid ends: 0..=10 -> 11 bins
        let bins = 11usize;
        let mut counts = vec![0usize; bins];
        let mut drawn = 0;
        while drawn < n_draws {
            let b = sample_batch(&ds, k, 100, &mut rng).unwrap();
            for s in b.starts {
                let end = (s + k as i64 - 1) as usize;
                counts[end] += 1;
            }
            drawn += 100;
        }
        let expected = n_draws as f64 / bins as f64;
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        // df = 10; the 99.9% quantile is 29.6
        assert!(chi2 < 29.6, "chi2 = {chi2}, counts {counts:?}");
    }

    #[test]
    fn dataset_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        let trajs = vec![
            toy_traj(&[1.5, -2.25, 0.125], 0.9),
            toy_traj(&[0.1, 0.2], 0.9),
            toy_traj(&[7.0, 8.0, 9.0, 10.0], 0.9),
        ];
        let ds = OfflineDataset::new(trajs, 0.9).unwrap();
        save_dataset(&path, &ds).unwrap();
        let loaded = load_dataset(&path).unwrap();
        assert_eq!(loaded.trajectories.len(), 3);
        for (a, b) in ds.trajectories.iter().zip(&loaded.trajectories) {
            assert_eq!(a, b);
        }
        assert_eq!(ds.state_mean, loaded.state_mean);
        assert_eq!(ds.rtg_scale, loaded.rtg_scale);
    }

    #[test]
    fn save_is_byte_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let trajs = vec![toy_traj(&[1.0, 2.0, 3.0], 1.0)];
        let ds = OfflineDataset::new(trajs, 1.0).unwrap();
        let p1 = dir.path().join("a.jsonl");
        let p2 = dir.path().join("b.jsonl");
        save_dataset(&p1, &ds).unwrap();
        save_dataset(&p2, &ds).unwrap();
        assert_eq!(std::fs::read(p1).unwrap(), std::fs::read(p2).unwrap());
    }

    #[test]
    fn truncated_file_fails_cleanly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        let ds = OfflineDataset::new(vec![toy_traj(&[1.0, 2.0, 3.0], 1.0)], 1.0).unwrap();
        save_dataset(&path, &ds).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        std::fs::write(&path, &text[..text.len() - 20]).unwrap();
        assert!(matches!(load_dataset(&path), Err(CoreError::Parse { .. })));
    }

    #[test]
    fn corrupted_rtg_fails_recursion_check() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        let ds = OfflineDataset::new(vec![toy_traj(&[1.0, 2.0, 3.0], 1.0)], 1.0).unwrap();
        save_dataset(&path, &ds).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let corrupted = text.replace("\"returns_to_go\":[0.3", "\"returns_to_go\":[9.3");
        assert_ne!(text, corrupted);
        std::fs::write(&path, corrupted).unwrap();
        assert!(matches!(load_dataset(&path), Err(CoreError::Parse { .. })));
    }
}
