//! Action-free 1-D signal task: a base sinusoid contaminated by weaker
//! interference tones and noise. Generation is the whole game here, so the
//! task only produces datasets; there is no step function.

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use super::{EnvSpec, RewardKind};
use crate::rng::Rng;

#[derive(Debug, Clone)]
pub struct Freq1DTask {
    /// Samples per signal.
    pub t_len: usize,
    /// Period of the unit-amplitude base tone, in samples.
    pub base_period: usize,
    /// Interference tone periods; amplitudes drawn from `[0, max_amp]`.
    pub interference_periods: Vec<usize>,
    pub max_interference_amp: f64,
    pub noise_std: f64,
}

impl Default for Freq1DTask {
    fn default() -> Self {
        // periods divide the window lengths used downstream, so every tone
        // sits on an exact DFT bin
        Freq1DTask {
            t_len: 64,
            base_period: 16,
            interference_periods: vec![4, 8],
            max_interference_amp: 0.2,
            noise_std: 0.01,
        }
    }
}

impl Freq1DTask {
    pub fn spec(&self) -> EnvSpec {
        EnvSpec { d_s: 1, d_a: 0, max_steps: self.t_len, reward: RewardKind::None }
    }

    /// One signal: random-phase base tone plus random-phase, random-amplitude
    /// interference tones plus Gaussian noise.
    pub fn sample_signal(&self, rng: &mut Rng) -> Vec<f64> {
        let two_pi = std::f64::consts::TAU;
        let base_phase = rng.gen_range(0.0..two_pi);
        let tones: Vec<(f64, f64, f64)> = self
            .interference_periods
            .iter()
            .map(|&p| {
                let amp = rng.gen_range(0.0..=self.max_interference_amp);
                let phase = rng.gen_range(0.0..two_pi);
                (p as f64, amp, phase)
            })
            .collect();
        (0..self.t_len)
            .map(|t| {
                let t = t as f64;
                let mut v = (two_pi * t / self.base_period as f64 + base_phase).sin();
                for &(p, amp, phase) in &tones {
                    v += amp * (two_pi * t / p + phase).sin();
                }
                let noise: f64 = StandardNormal.sample(rng);
                v + self.noise_std * noise
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn signals_are_bounded_and_deterministic() {
        let task = Freq1DTask::default();
        let s1 = task.sample_signal(&mut crate::rng::seeded(8));
        let s2 = task.sample_signal(&mut crate::rng::seeded(8));
        assert_eq!(s1, s2);
        assert_eq!(s1.len(), 64);
        // 1 + 2 * 0.2 + noise slack
        assert!(s1.iter().all(|v| v.abs() < 1.6));
    }
}
