//! Noise schedules and the closed-form forward and reverse diffusion kernels.
//!
//! Levels are 1-based: level `k = 0` is clean data and `k = K` is (almost)
//! pure noise. Every reverse step is parameterized through a noise
//! prediction `eps_hat`, the score being `-eps_hat / sqrt(1 - alpha_bar_k)`.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Linear,
    Cosine,
}

/// Largest per-step variance allowed by the cosine schedule.
pub const COSINE_BETA_CAP: f64 = 0.999;
const COSINE_OFFSET: f64 = 0.008;

/// Parameters needed to rebuild a schedule; stored in configs and checkpoints.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleParams {
    pub kind: ScheduleKind,
    pub steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
}

impl Default for ScheduleParams {
    fn default() -> Self {
        Self::default_for_steps(50)
    }
}

impl ScheduleParams {
    /// Linear schedules for short chains, cosine otherwise.
    pub fn default_for_steps(steps: usize) -> Self {
        if steps <= 50 {
            Self {
                kind: ScheduleKind::Linear,
                steps,
                beta_min: 1e-4,
                beta_max: 0.3,
            }
        } else {
            Self {
                kind: ScheduleKind::Cosine,
                steps,
                beta_min: 1e-4,
                beta_max: COSINE_BETA_CAP,
            }
        }
    }

    pub fn build(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::new(self.kind, self.steps, self.beta_min, self.beta_max)
    }
}

/// The beta / alpha / alpha-bar / sigma tables of a discrete diffusion chain.
///
/// Vectors are indexed by `k - 1`; use the accessors, which take the level.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    params: ScheduleParams,
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
    sigmas: Vec<f64>,
}

impl NoiseSchedule {
    /// Builds a schedule with `steps` levels.
    ///
    /// Linear schedules interpolate `beta_min..=beta_max`. The cosine schedule
    /// follows its own shape and only uses `beta_max` as an upper cap, which is
    /// additionally limited to [`COSINE_BETA_CAP`].
    pub fn new(kind: ScheduleKind, steps: usize, beta_min: f64, beta_max: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Config("diffusion schedule needs at least one step".into()));
        }
        if !(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0) {
            return Err(Error::Config(format!(
                "invalid beta bounds: need 0 < beta_min <= beta_max < 1, got ({beta_min}, {beta_max})"
            )));
        }
        let betas: Vec<f64> = match kind {
            ScheduleKind::Linear => (0..steps)
                .map(|i| {
                    if steps == 1 {
                        beta_min
                    } else {
                        beta_min + (beta_max - beta_min) * i as f64 / (steps - 1) as f64
                    }
                })
                .collect(),
            ScheduleKind::Cosine => {
                let f = |t: f64| {
                    let x = (t / steps as f64 + COSINE_OFFSET) / (1.0 + COSINE_OFFSET)
                        * std::f64::consts::FRAC_PI_2;
                    x.cos().powi(2)
                };
                let cap = beta_max.min(COSINE_BETA_CAP);
                (0..steps)
                    .map(|i| {
                        let b = 1.0 - f(i as f64 + 1.0) / f(i as f64);
                        b.clamp(f64::MIN_POSITIVE, cap)
                    })
                    .collect()
            }
        };
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(steps);
        let mut acc = 1.0;
        for a in &alphas {
            acc *= a;
            alpha_bars.push(acc);
        }
        let sigmas = (0..steps)
            .map(|i| {
                if i == 0 {
                    0.0
                } else {
                    (betas[i] * (1.0 - alpha_bars[i - 1]) / (1.0 - alpha_bars[i])).sqrt()
                }
            })
            .collect();
        Ok(Self {
            params: ScheduleParams {
                kind,
                steps,
                beta_min,
                beta_max,
            },
            betas,
            alphas,
            alpha_bars,
            sigmas,
        })
    }

    pub fn params(&self) -> ScheduleParams {
        self.params
    }

    pub fn kind(&self) -> ScheduleKind {
        self.params.kind
    }

    pub fn num_steps(&self) -> usize {
        self.betas.len()
    }

    fn check(&self, k: usize) -> Result<usize> {
        if k == 0 || k > self.num_steps() {
            Err(Error::Domain(format!(
                "diffusion level {k} outside [1, {}]",
                self.num_steps()
            )))
        } else {
            Ok(k - 1)
        }
    }

    pub fn beta(&self, k: usize) -> f64 {
        self.betas[k - 1]
    }

    pub fn alpha(&self, k: usize) -> f64 {
        self.alphas[k - 1]
    }

    /// Cumulative product of alphas; `alpha_bar(0) == 1`.
    pub fn alpha_bar(&self, k: usize) -> f64 {
        if k == 0 {
            1.0
        } else {
            self.alpha_bars[k - 1]
        }
    }

    /// Posterior standard deviation of the reverse step at level `k`; zero at `k = 1`.
    pub fn sigma(&self, k: usize) -> f64 {
        self.sigmas[k - 1]
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }
}

/// Closed-form marginal `sqrt(ab) * clean + sqrt(1 - ab) * noise` at level `k` (0 allowed).
pub fn q_sample(schedule: &NoiseSchedule, clean: &[f64], noise: &[f64], k: usize) -> Result<Vec<f64>> {
    if k > schedule.num_steps() {
        return Err(Error::Domain(format!(
            "diffusion level {k} outside [0, {}]",
            schedule.num_steps()
        )));
    }
    let ab = schedule.alpha_bar(k);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(clean.iter().zip(noise).map(|(x, e)| a * x + b * e).collect())
}

/// Reverse-step posterior mean `(x_k - beta_k / sqrt(1 - ab_k) * eps_hat) / sqrt(alpha_k)`
/// and the isotropic posterior variance `sigma_k^2`.
pub fn posterior_mean(
    schedule: &NoiseSchedule,
    noisy: &[f64],
    eps_hat: &[f64],
    k: usize,
) -> Result<(Vec<f64>, f64)> {
    let i = schedule.check(k)?;
    if noisy.len() != eps_hat.len() {
        return Err(Error::mismatch("noise prediction length", noisy.len(), eps_hat.len()));
    }
    let coef = schedule.betas[i] / (1.0 - schedule.alpha_bars[i]).sqrt();
    let inv_sqrt_alpha = 1.0 / schedule.alphas[i].sqrt();
    let mean = noisy
        .iter()
        .zip(eps_hat)
        .map(|(x, e)| (x - coef * e) * inv_sqrt_alpha)
        .collect();
    Ok((mean, schedule.sigmas[i].powi(2)))
}

/// Exact inversion of [`q_sample`] given the injected noise.
pub fn predict_clean(schedule: &NoiseSchedule, noisy: &[f64], eps: &[f64], k: usize) -> Result<Vec<f64>> {
    if k > schedule.num_steps() {
        return Err(Error::Domain(format!("diffusion level {k} out of range")));
    }
    let ab = schedule.alpha_bar(k);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(noisy.iter().zip(eps).map(|(x, e)| (x - b * e) / a).collect())
}

/// Classifier-free guidance: `uncond + omega * (cond - uncond)`.
pub fn cfg_combine(eps_cond: &[f64], eps_uncond: &[f64], omega: f64) -> Vec<f64> {
    debug_assert_eq!(eps_cond.len(), eps_uncond.len());
    eps_cond
        .iter()
        .zip(eps_uncond)
        .map(|(c, u)| u + omega * (c - u))
        .collect()
}

pub fn standard_normal_vec<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

/// A state block `x_{1:H}` and action block `u_{0:H-1}`, row-major per step.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryBlock {
    pub horizon: usize,
    pub state_dim: usize,
    pub action_dim: usize,
    pub states: Vec<f64>,
    pub actions: Vec<f64>,
}

impl TrajectoryBlock {
    pub fn new(horizon: usize, state_dim: usize, action_dim: usize, states: Vec<f64>, actions: Vec<f64>) -> Result<Self> {
        if states.len() != horizon * state_dim {
            return Err(Error::mismatch("state block length", horizon * state_dim, states.len()));
        }
        if actions.len() != horizon * action_dim {
            return Err(Error::mismatch("action block length", horizon * action_dim, actions.len()));
        }
        Ok(Self {
            horizon,
            state_dim,
            action_dim,
            states,
            actions,
        })
    }

    pub fn zeros(horizon: usize, state_dim: usize, action_dim: usize) -> Self {
        Self {
            horizon,
            state_dim,
            action_dim,
            states: vec![0.0; horizon * state_dim],
            actions: vec![0.0; horizon * action_dim],
        }
    }

    /// States followed by actions, the layout used by the joint kernels.
    pub fn flatten(&self) -> Vec<f64> {
        let mut v = self.states.clone();
        v.extend_from_slice(&self.actions);
        v
    }

    pub fn from_flat(&self, flat: &[f64]) -> Self {
        let n = self.states.len();
        Self {
            horizon: self.horizon,
            state_dim: self.state_dim,
            action_dim: self.action_dim,
            states: flat[..n].to_vec(),
            actions: flat[n..].to_vec(),
        }
    }
}

/// A trajectory block at diffusion level `level`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoisyTrajectory {
    pub block: TrajectoryBlock,
    pub level: usize,
}

/// Noises a clean block to level `k`, returning the noisy block and the injected noise
/// (states first, then actions).
pub fn forward_noise<R: Rng + ?Sized>(
    clean: &TrajectoryBlock,
    k: usize,
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> Result<(NoisyTrajectory, Vec<f64>)> {
    let flat = clean.flatten();
    let noise = standard_normal_vec(rng, flat.len());
    let noisy = q_sample(schedule, &flat, &noise, k)?;
    Ok((
        NoisyTrajectory {
            block: clean.from_flat(&noisy),
            level: k,
        },
        noise,
    ))
}

/// One reverse step on a noisy block; returns the posterior mean block and `sigma_k^2`.
pub fn denoise_step(
    noisy: &NoisyTrajectory,
    eps_hat: &[f64],
    schedule: &NoiseSchedule,
) -> Result<(TrajectoryBlock, f64)> {
    let (mean, var) = posterior_mean(schedule, &noisy.block.flatten(), eps_hat, noisy.level)?;
    Ok((noisy.block.from_flat(&mean), var))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn single_step_linear() {
        let s = NoiseSchedule::new(ScheduleKind::Linear, 1, 0.1, 0.1).unwrap();
        assert!((s.alpha_bar(1) - 0.9).abs() < 1e-15);
        assert_eq!(s.sigma(1), 0.0);
    }

    #[test]
    fn two_step_linear_product() {
        let s = NoiseSchedule::new(ScheduleKind::Linear, 2, 0.1, 0.2).unwrap();
        assert!((s.alpha_bar(2) - 0.72).abs() < 1e-15);
    }

    #[test]
    fn cosine_reaches_near_total_noise() {
        let s = NoiseSchedule::new(ScheduleKind::Cosine, 100, 1e-4, 0.999).unwrap();
        assert!(s.alpha_bar(100) < 1e-3);
        for k in 1..100 {
            assert!(s.alpha_bar(k + 1) < s.alpha_bar(k));
        }
        assert!(s.betas().iter().all(|&b| b > 0.0 && b < 1.0));
    }

    #[test]
    fn sigma_matches_posterior_formula() {
        let s = ScheduleParams::default_for_steps(50).build().unwrap();
        for k in 2..=50 {
            let expect = s.beta(k) * (1.0 - s.alpha_bar(k - 1)) / (1.0 - s.alpha_bar(k));
            assert!((s.sigma(k).powi(2) - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn rejects_bad_bounds() {
        assert!(matches!(NoiseSchedule::new(ScheduleKind::Linear, 0, 0.1, 0.2), Err(Error::Config(_))));
        assert!(NoiseSchedule::new(ScheduleKind::Linear, 5, 0.3, 0.2).is_err());
        assert!(NoiseSchedule::new(ScheduleKind::Linear, 5, 0.0, 0.2).is_err());
        assert!(NoiseSchedule::new(ScheduleKind::Cosine, 5, 0.1, 1.0).is_err());
    }

    #[test]
    fn zero_noise_scales_clean() {
        let s = ScheduleParams::default_for_steps(10).build().unwrap();
        let clean = [1.0, -2.0, 3.5];
        let out = q_sample(&s, &clean, &[0.0; 3], 4).unwrap();
        for (o, c) in out.iter().zip(clean) {
            assert!((o - s.alpha_bar(4).sqrt() * c).abs() < 1e-15);
        }
        assert_eq!(q_sample(&s, &clean, &[0.3; 3], 0).unwrap(), clean.to_vec());
        assert!(q_sample(&s, &clean, &[0.0; 3], 11).is_err());
    }

    #[test]
    fn noop_step_when_beta_vanishes() {
        let s = NoiseSchedule::new(ScheduleKind::Linear, 3, 1e-14, 1e-14).unwrap();
        let x = [0.4, -0.7];
        let (mean, _) = posterior_mean(&s, &x, &[0.0, 0.0], 2).unwrap();
        for (m, xi) in mean.iter().zip(x) {
            assert!((m - xi).abs() < 1e-12);
        }
    }

    #[test]
    fn single_step_inversion_is_exact() {
        let s = NoiseSchedule::new(ScheduleKind::Linear, 1, 0.37, 0.37).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let clean = TrajectoryBlock::new(4, 2, 1, standard_normal_vec(&mut rng, 8), standard_normal_vec(&mut rng, 4)).unwrap();
        let (noisy, eps) = forward_noise(&clean, 1, &s, &mut rng).unwrap();
        let (mean, var) = denoise_step(&noisy, &eps, &s).unwrap();
        assert_eq!(var, 0.0);
        for (m, c) in mean.flatten().iter().zip(clean.flatten()) {
            assert!((m - c).abs() <= 1e-10 * c.abs().max(1.0));
        }
    }

    #[test]
    fn denoise_rejects_out_of_range_level() {
        let s = ScheduleParams::default_for_steps(5).build().unwrap();
        assert!(matches!(posterior_mean(&s, &[0.0], &[0.0], 0), Err(Error::Domain(_))));
        assert!(posterior_mean(&s, &[0.0], &[0.0], 6).is_err());
    }

    #[test]
    fn cfg_identities() {
        let c = [2.0, -1.0];
        let u = [1.0, 3.0];
        assert_eq!(cfg_combine(&c, &u, 1.0), c.to_vec());
        assert_eq!(cfg_combine(&c, &u, 0.0), u.to_vec());
        assert_eq!(cfg_combine(&[2.0], &[1.0], 2.0), vec![3.0]);
        // same as omega * cond + (1 - omega) * uncond
        let w = 1.7;
        for (a, (ci, ui)) in cfg_combine(&c, &u, w).iter().zip(c.iter().zip(u)) {
            assert!((a - (w * ci + (1.0 - w) * ui)).abs() < 1e-12);
        }
    }

    proptest::proptest! {
        #[test]
        fn alpha_bar_decreases_and_inversion_is_exact(
            cosine in proptest::bool::ANY,
            steps in 1usize..200,
            clean in proptest::collection::vec(-5.0f64..5.0, 1..16),
            seed in 0u64..1000,
        ) {
            let s = if cosine {
                NoiseSchedule::new(ScheduleKind::Cosine, steps, 1e-4, COSINE_BETA_CAP).unwrap()
            } else {
                NoiseSchedule::new(ScheduleKind::Linear, steps, 1e-4, 0.3).unwrap()
            };
            let noise = standard_normal_vec(&mut ChaCha8Rng::seed_from_u64(seed), clean.len());
            for k in 1..=steps {
                proptest::prop_assert!(s.alpha_bar(k) < s.alpha_bar(k - 1));
                proptest::prop_assert!(s.alpha_bar(k) > 0.0);
            }
            let k = 1 + seed as usize % steps;
            let back = predict_clean(&s, &q_sample(&s, &clean, &noise, k).unwrap(), &noise, k).unwrap();
            for (a, b) in back.iter().zip(&clean) {
                proptest::prop_assert!((a - b).abs() < 1e-8 * (1.0 + b.abs()) / s.alpha_bar(k).sqrt());
            }
        }
    }
}
