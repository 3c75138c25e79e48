//! Linear dynamical system `s' = A s + B a` with a closed-form inverse
//! dynamics `a = B^+ (s' - A s)`, used as the oracle environment for action
//! recovery.

use super::{clip, EnvSpec, Environment, RewardKind};
use crate::rng::Rng;
use rand::Rng as _;

#[derive(Debug, Clone)]
pub struct LinearSystem {
    pub d_s: usize,
    pub d_a: usize,
    /// Row-major `d_s x d_s`.
    pub a: Vec<f64>,
    /// Row-major `d_s x d_a`, full column rank.
    pub b: Vec<f64>,
    pub s_goal: Vec<f64>,
    pub a_max: f64,
    pub start_scale: f64,
    pub max_steps: usize,
}

impl LinearSystem {
    /// `s' = s + a`: the simplest invertible system.
    pub fn integrator(d: usize) -> Self {
        let mut a = vec![0.0; d * d];
        let mut b = vec![0.0; d * d];
        for i in 0..d {
            a[i * d + i] = 1.0;
            b[i * d + i] = 1.0;
        }
        LinearSystem {
            d_s: d,
            d_a: d,
            a,
            b,
            s_goal: vec![0.0; d],
            a_max: 1.0,
            start_scale: 2.0,
            max_steps: 32,
        }
    }

    /// A mildly rotating stable system with an invertible, non-trivial B.
    pub fn default_2d() -> Self {
        LinearSystem {
            d_s: 2,
            d_a: 2,
            a: vec![0.95, 0.10, -0.08, 0.92],
            b: vec![1.0, 0.25, 0.0, 0.85],
            s_goal: vec![0.5, -0.5],
            a_max: 1.0,
            start_scale: 2.0,
            max_steps: 32,
        }
    }

    fn apply_a(&self, s: &[f64]) -> Vec<f64> {
        (0..self.d_s)
            .map(|i| (0..self.d_s).map(|j| self.a[i * self.d_s + j] * s[j]).sum())
            .collect()
    }

    fn apply_b(&self, a: &[f64]) -> Vec<f64> {
        (0..self.d_s)
            .map(|i| (0..self.d_a).map(|j| self.b[i * self.d_a + j] * a[j]).sum())
            .collect()
    }

    /// Closed-form inverse dynamics: the action that produced `s -> s_next`,
    /// via the left pseudo-inverse of B.
    pub fn inverse_action(&self, s: &[f64], s_next: &[f64]) -> Vec<f64> {
        let residual: Vec<f64> =
            s_next.iter().zip(self.apply_a(s)).map(|(n, p)| n - p).collect();
        least_squares(&self.b, &residual, self.d_s, self.d_a)
    }
}

impl Environment for LinearSystem {
    fn spec(&self) -> EnvSpec {
        EnvSpec { d_s: self.d_s, d_a: self.d_a, max_steps: self.max_steps, reward: RewardKind::Dense }
    }

    fn reset(&self, rng: &mut Rng) -> Vec<f64> {
        (0..self.d_s).map(|_| rng.gen_range(-self.start_scale..=self.start_scale)).collect()
    }

    fn step(&self, state: &[f64], action: &[f64]) -> (Vec<f64>, f64, bool) {
        let a: Vec<f64> = action.iter().map(|&v| clip(v, -self.a_max, self.a_max)).collect();
        let next: Vec<f64> =
            self.apply_a(state).iter().zip(self.apply_b(&a)).map(|(x, u)| x + u).collect();
        let reward = -next
            .iter()
            .zip(&self.s_goal)
            .map(|(s, g)| (s - g).powi(2))
            .sum::<f64>();
        (next, reward, false)
    }
}

/// Solve `min_a |M a - y|` by normal equations with Gauss-Jordan; fine for
/// the tiny systems used here.
fn least_squares(m: &[f64], y: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    // G = M^T M (cols x cols), rhs = M^T y
    let mut g = vec![0.0; cols * cols];
    let mut rhs = vec![0.0; cols];
    for i in 0..cols {
        for j in 0..cols {
            g[i * cols + j] = (0..rows).map(|r| m[r * cols + i] * m[r * cols + j]).sum();
        }
        rhs[i] = (0..rows).map(|r| m[r * cols + i] * y[r]).sum();
    }
    // augmented elimination with partial pivoting
    let n = cols;
    let mut aug = vec![0.0; n * (n + 1)];
    for i in 0..n {
        aug[i * (n + 1)..i * (n + 1) + n].copy_from_slice(&g[i * n..(i + 1) * n]);
        aug[i * (n + 1) + n] = rhs[i];
    }
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&a, &b| {
                aug[a * (n + 1) + col]
                    .abs()
                    .partial_cmp(&aug[b * (n + 1) + col].abs())
                    .unwrap()
            })
            .unwrap();
        if pivot != col {
            for k in 0..=n {
                aug.swap(col * (n + 1) + k, pivot * (n + 1) + k);
            }
        }
        let p = aug[col * (n + 1) + col];
        assert!(p.abs() > 1e-12, "B is rank deficient");
        for k in 0..=n {
            aug[col * (n + 1) + k] /= p;
        }
        for row in 0..n {
            if row == col {
                continue;
            }
            let f = aug[row * (n + 1) + col];
            if f == 0.0 {
                continue;
            }
            for k in 0..=n {
                aug[row * (n + 1) + k] -= f * aug[col * (n + 1) + k];
            }
        }
    }
    (0..n).map(|i| aug[i * (n + 1) + n]).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn integrator_steps_by_action() {
        let env = LinearSystem::integrator(2);
        let (next, _, done) = env.step(&[1.0, -2.0], &[0.5, 0.25]);
        assert_eq!(next, vec![1.5, -1.75]);
        assert!(!done);
    }

    #[test]
    fn inverse_action_recovers_logged_actions_exactly() {
        let env = LinearSystem::default_2d();
        let mut rng = crate::rng::seeded(4);
        let mut s = env.reset(&mut rng);
        for _ in 0..50 {
            let a = vec![rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
            let (next, _, _) = env.step(&s, &a);
            let rec = env.inverse_action(&s, &next);
            for (x, y) in a.iter().zip(&rec) {
                assert!((x - y).abs() < 1e-9, "recovered {rec:?} for {a:?}");
            }
            s = next;
        }
    }

    #[test]
    fn integrator_identity_transition_needs_zero_action() {
        let env = LinearSystem::integrator(3);
        let s = vec![0.4, -0.1, 2.0];
        let a = env.inverse_action(&s, &s);
        assert!(a.iter().all(|v| v.abs() < 1e-12));
    }
}
