//! Discrete Fourier power spectrum, computed directly.
//!
//! The O(T^2) evaluation doubles as the verification oracle for every
//! spectral claim in the test suites, so it stays dependency-free and
//! literal: `P_m = |X_m|^2 / T^2` with `X_m = sum_t x_t e^{-2 pi i m t / T}`.
//! Under this normalization Parseval reads `sum_m P_m = sum_t x_t^2 / T`.

use crate::error::{CoreError, Result};

pub fn spectrum(signal: &[f64]) -> Result<Vec<f64>> {
    let t_len = signal.len();
    if t_len < 8 {
        return Err(CoreError::usage(format!("spectrum: need T >= 8, got {t_len}")));
    }
    let n = t_len as f64;
    let mut power = Vec::with_capacity(t_len);
    for m in 0..t_len {
        let mut re = 0.0;
        let mut im = 0.0;
        for (t, &x) in signal.iter().enumerate() {
            let angle = -std::f64::consts::TAU * (m * t) as f64 / n;
            re += x * angle.cos();
            im += x * angle.sin();
        }
        power.push((re * re + im * im) / (n * n));
    }
    Ok(power)
}

/// Strongest bin among positive frequencies `1..=T/2`.
pub fn dominant_bin(power: &[f64]) -> usize {
    let half = power.len() / 2;
    (1..=half)
        .max_by(|&a, &b| power[a].partial_cmp(&power[b]).unwrap())
        .expect("spectrum has positive-frequency bins")
}

/// Total power off the kept bin: everything except DC, `keep`, and its
/// mirror `T - keep`.
pub fn offband_power(power: &[f64], keep: usize) -> f64 {
    let t_len = power.len();
    (1..t_len)
        .filter(|&m| m != keep && m != t_len - keep)
        .map(|m| power[m])
        .sum()
}
