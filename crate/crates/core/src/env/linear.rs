//! Linear time-invariant systems, the discrete algebraic Riccati equation and
//! the noisy LQR expert.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Continuous double integrator discretized with zero-order hold.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LinearConfig {
    pub dt: f64,
    /// Diagonal of the state weight.
    pub q: f64,
    /// Diagonal of the input weight.
    pub r: f64,
    /// Initial states are uniform on `[-init_box, init_box]^2`.
    pub init_box: f64,
    pub steps: usize,
}

impl Default for LinearConfig {
    fn default() -> Self {
        Self {
            dt: 0.1,
            q: 1.0,
            r: 0.1,
            init_box: 2.0,
            steps: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearSystem {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
}

impl LinearSystem {
    pub fn double_integrator(cfg: &LinearConfig) -> Self {
        let dt = cfg.dt;
        Self {
            a: DMatrix::from_row_slice(2, 2, &[1.0, dt, 0.0, 1.0]),
            b: DMatrix::from_row_slice(2, 1, &[0.5 * dt * dt, dt]),
            q: DMatrix::identity(2, 2) * cfg.q,
            r: DMatrix::identity(1, 1) * cfg.r,
        }
    }

    pub fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn action_dim(&self) -> usize {
        self.b.ncols()
    }

    pub fn next_state(&self, x: &[f64], u: &[f64]) -> Vec<f64> {
        let (n, m) = (self.state_dim(), self.action_dim());
        (0..n)
            .map(|i| {
                (0..n).map(|j| self.a[(i, j)] * x[j]).sum::<f64>() + (0..m).map(|j| self.b[(i, j)] * u[j]).sum::<f64>()
            })
            .collect()
    }

    /// `x'Qx + u'Ru`.
    pub fn stage_cost(&self, x: &[f64], u: &[f64]) -> f64 {
        let xv = DVector::from_column_slice(x);
        let uv = DVector::from_column_slice(u);
        (xv.transpose() * &self.q * &xv)[(0, 0)] + (uv.transpose() * &self.r * &uv)[(0, 0)]
    }

    /// Deterministic step returning `(x', reward)` with reward `-(x'Qx + u'Ru)`.
    pub fn step(&self, x: &[f64], u: &[f64]) -> (Vec<f64>, f64) {
        (self.next_state(x, u), -self.stage_cost(x, u))
    }
}

/// Infinite-horizon LQR solution.
#[derive(Debug, Clone, PartialEq)]
pub struct Lqr {
    pub p: DMatrix<f64>,
    /// Feedback gain with the convention `u = K x`.
    pub k: DMatrix<f64>,
    pub iterations: usize,
}

impl Lqr {
    pub fn control(&self, x: &[f64]) -> Vec<f64> {
        (self.k.clone() * DVector::from_column_slice(x)).iter().copied().collect()
    }

    pub fn value(&self, x: &[f64]) -> f64 {
        let xv = DVector::from_column_slice(x);
        (xv.transpose() * &self.p * &xv)[(0, 0)]
    }
}

fn riccati_map(a: &DMatrix<f64>, b: &DMatrix<f64>, q: &DMatrix<f64>, r: &DMatrix<f64>, p: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let bt_p = b.transpose() * p;
    let s = r + &bt_p * b;
    let gain = s.try_inverse()? * &bt_p * a;
    Some(q + a.transpose() * p * a - a.transpose() * p * b * gain)
}

/// Max-abs difference between `P` and one Riccati update of `P`.
pub fn riccati_residual(sys: &LinearSystem, p: &DMatrix<f64>) -> f64 {
    riccati_map(&sys.a, &sys.b, &sys.q, &sys.r, p)
        .map(|next| (next - p).amax())
        .unwrap_or(f64::INFINITY)
}

pub const DARE_TOL: f64 = 1e-10;
pub const DARE_MAX_ITERS: usize = 100_000;

/// Fixed-point iteration of the Riccati recursion from `P = Q`.
pub fn solve_dare(sys: &LinearSystem) -> Result<Lqr> {
    let (a, b, q, r) = (&sys.a, &sys.b, &sys.q, &sys.r);
    let n = sys.state_dim();
    if a.ncols() != n || b.nrows() != n || q.shape() != (n, n) || r.shape() != (b.ncols(), b.ncols()) {
        return Err(Error::Config("inconsistent system matrix shapes".into()));
    }
    if r.clone().cholesky().is_none() {
        return Err(Error::Config("input weight must be positive definite".into()));
    }
    let mut p = q.clone();
    let mut trace: Vec<f64> = Vec::new();
    for it in 1..=DARE_MAX_ITERS {
        let next = riccati_map(a, b, q, r, &p).ok_or_else(|| Error::Numerical("singular R + B'PB".into()))?;
        let res = (&next - &p).amax();
        p = next;
        if !res.is_finite() {
            return Err(Error::Numerical(format!("Riccati iteration diverged at iteration {it}")));
        }
        if it % 1000 == 0 {
            trace.push(res);
        }
        if res < DARE_TOL {
            let bt_p = b.transpose() * &p;
            let s = r + &bt_p * b;
            let k = -(s.try_inverse().ok_or_else(|| Error::Numerical("singular R + B'PB".into()))? * bt_p * a);
            return Ok(Lqr { p, k, iterations: it });
        }
    }
    Err(Error::Numerical(format!(
        "Riccati iteration did not converge in {DARE_MAX_ITERS} iterations; residual trace every 1000 iterations: {:?}",
        &trace[trace.len().saturating_sub(10)..]
    )))
}

/// Largest eigenvalue modulus of `A + B K`.
pub fn closed_loop_spectral_radius(sys: &LinearSystem, k: &DMatrix<f64>) -> f64 {
    let cl = &sys.a + &sys.b * k;
    cl.complex_eigenvalues().iter().map(|z| z.norm()).fold(0.0, f64::max)
}

/// One rollout of `u_t = K x_t + d_t w_t` with `d_t ~ Bernoulli(p)` and
/// `w_t ~ N(0, std^2 I)`. Returns states, actions, rewards and the
/// injection flags.
pub struct ExpertRollout {
    pub states: Vec<f64>,
    pub actions: Vec<f64>,
    pub rewards: Vec<f64>,
    pub injected: Vec<bool>,
}

pub fn noisy_lqr_rollout<R: Rng + ?Sized>(
    sys: &LinearSystem,
    lqr: &Lqr,
    x0: &[f64],
    steps: usize,
    noise_prob: f64,
    noise_std: f64,
    rng: &mut R,
) -> ExpertRollout {
    let m = sys.action_dim();
    let mut out = ExpertRollout {
        states: x0.to_vec(),
        actions: Vec::with_capacity(steps * m),
        rewards: Vec::with_capacity(steps),
        injected: Vec::with_capacity(steps),
    };
    let mut x = x0.to_vec();
    for _ in 0..steps {
        let mut u = lqr.control(&x);
        let hit = noise_prob > 0.0 && rng.random::<f64>() < noise_prob;
        if hit {
            for v in &mut u {
                *v += noise_std * rng.sample::<f64, _>(StandardNormal);
            }
        }
        let (next, r) = sys.step(&x, &u);
        out.actions.extend_from_slice(&u);
        out.rewards.push(r);
        out.injected.push(hit);
        out.states.extend_from_slice(&next);
        x = next;
    }
    out
}

/// Accumulated quadratic cost of the noiseless LQR policy from `x0` over `steps`.
pub fn lqr_cost(sys: &LinearSystem, lqr: &Lqr, x0: &[f64], steps: usize) -> f64 {
    let mut x = x0.to_vec();
    let mut total = 0.0;
    for _ in 0..steps {
        let u = lqr.control(&x);
        total += sys.stage_cost(&x, &u);
        x = sys.next_state(&x, &u);
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn scalar_dare() {
        let one = DMatrix::from_element(1, 1, 1.0);
        let sys = LinearSystem {
            a: DMatrix::zeros(1, 1),
            b: one.clone(),
            q: one.clone(),
            r: one,
        };
        let lqr = solve_dare(&sys).unwrap();
        assert!((lqr.p[(0, 0)] - 1.0).abs() < 1e-12);
        assert!(lqr.k[(0, 0)].abs() < 1e-12);
    }

    #[test]
    fn zero_order_hold_matches_matrix_exponential() {
        let dt = 0.1;
        let mut m = DMatrix::zeros(3, 3);
        m[(0, 1)] = 1.0;
        m[(1, 2)] = 1.0;
        let e = (m * dt).exp();
        let sys = LinearSystem::double_integrator(&LinearConfig::default());
        for i in 0..2 {
            for j in 0..2 {
                assert!((e[(i, j)] - sys.a[(i, j)]).abs() < 1e-14);
            }
            assert!((e[(i, 2)] - sys.b[(i, 0)]).abs() < 1e-14);
        }
        assert_eq!(sys.a.as_slice(), &[1.0, 0.0, 0.1, 1.0]);
        assert!((sys.b[(0, 0)] - 0.005).abs() < 1e-15 && (sys.b[(1, 0)] - 0.1).abs() < 1e-15);
    }

    #[test]
    fn trivial_steps() {
        let sys = LinearSystem::double_integrator(&LinearConfig::default());
        assert_eq!(sys.step(&[0.0, 0.0], &[0.0]), (vec![0.0, 0.0], 0.0));
        assert_eq!(sys.next_state(&[1.0, 0.0], &[0.0]), vec![1.0, 0.0]);
    }

    #[test]
    fn noiseless_expert_is_pure_feedback() {
        let sys = LinearSystem::double_integrator(&LinearConfig::default());
        let lqr = solve_dare(&sys).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let r = noisy_lqr_rollout(&sys, &lqr, &[1.5, -0.5], 200, 0.0, 0.25, &mut rng);
        for t in 0..200 {
            let u = lqr.control(&r.states[2 * t..2 * t + 2]);
            assert!((u[0] - r.actions[t]).abs() < 1e-12);
        }
        let all = noisy_lqr_rollout(&sys, &lqr, &[1.5, -0.5], 200, 1.0, 0.25, &mut rng);
        assert!(all.injected.iter().all(|h| *h));
    }
}
