//! Linear-beta noise schedule and the forward noising process.

use ndarray::Array4;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiffusionConfig {
    /// Number of steps in the training grid.
    pub timesteps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        DiffusionConfig { timesteps: 200, beta_min: 1e-4, beta_max: 0.05 }
    }
}

impl DiffusionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.timesteps == 0 {
            return Err(Error::Config("diffusion needs at least one timestep".into()));
        }
        if !(self.beta_min > 0.0) || !(self.beta_max < 1.0) || self.beta_min > self.beta_max {
            return Err(Error::Config(format!(
                "beta range must satisfy 0 < beta_min <= beta_max < 1, got [{}, {}]",
                self.beta_min, self.beta_max
            )));
        }
        Ok(())
    }
}

/// Noise schedule arrays indexed by timestep t in 0..=T. Index 0 is the clean
/// state: beta(0) is unused, alpha_bar(0) = 1. `model_t` maps each position to
/// the timestep id the denoiser was trained with, so a re-spaced schedule
/// still feeds the network its native timestep embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct Schedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
    model_t: Vec<usize>,
}

/// Builds the native schedule: T betas linearly spaced from beta_min to
/// beta_max, alpha_t = 1 - beta_t, alpha_bar_t the running product.
pub fn make_schedule(config: &DiffusionConfig) -> Result<Schedule> {
    config.validate()?;
    let t_max = config.timesteps;
    let mut betas = vec![0.0; t_max + 1];
    let mut alphas = vec![1.0; t_max + 1];
    let mut alpha_bars = vec![1.0; t_max + 1];
    let mut model_t = vec![0; t_max + 1];
    for t in 1..=t_max {
        let frac = if t_max == 1 { 0.0 } else { (t - 1) as f64 / (t_max - 1) as f64 };
        betas[t] = config.beta_min + (config.beta_max - config.beta_min) * frac;
        alphas[t] = 1.0 - betas[t];
        alpha_bars[t] = alpha_bars[t - 1] * alphas[t];
        model_t[t] = t;
    }
    Ok(Schedule { betas, alphas, alpha_bars, model_t })
}

impl Schedule {
    /// Number of noising steps (the t=0 slot is not a step).
    pub fn t_max(&self) -> usize {
        self.betas.len() - 1
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    /// Timestep id to feed the denoiser at schedule position t.
    pub fn model_t(&self, t: usize) -> usize {
        self.model_t[t]
    }

    /// Standard deviation of the reverse-step posterior at index t; zero at
    /// t = 1, where the chain lands on the clean state.
    pub fn posterior_sigma(&self, t: usize) -> f64 {
        if t <= 1 {
            return 0.0;
        }
        (self.beta(t) * (1.0 - self.alpha_bar(t - 1)) / (1.0 - self.alpha_bar(t))).sqrt()
    }

    pub fn check_index(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.t_max() {
            return Err(Error::Config(format!(
                "timestep {t} outside the schedule range 1..={}",
                self.t_max()
            )));
        }
        Ok(())
    }

    /// Subsamples the schedule to `steps` positions with the same endpoint
    /// noise level. Effective betas are recomputed from alpha_bar ratios, so
    /// the subsampled arrays satisfy the same recurrences, while `model_t`
    /// keeps pointing at the native grid for the timestep embedding.
    pub fn respaced(&self, steps: usize) -> Result<Schedule> {
        let t_native = self.t_max();
        if steps == 0 || steps > t_native {
            return Err(Error::Config(format!(
                "re-spaced step count {steps} must lie in 1..={t_native}"
            )));
        }
        let mut betas = vec![0.0; steps + 1];
        let mut alphas = vec![1.0; steps + 1];
        let mut alpha_bars = vec![1.0; steps + 1];
        let mut model_t = vec![0; steps + 1];
        for k in 1..=steps {
            let native = ((k * t_native) as f64 / steps as f64).round() as usize;
            let native = native.clamp(1, t_native);
            alpha_bars[k] = self.alpha_bars[native];
            alphas[k] = alpha_bars[k] / alpha_bars[k - 1];
            betas[k] = 1.0 - alphas[k];
            model_t[k] = native;
        }
        Ok(Schedule { betas, alphas, alpha_bars, model_t })
    }
}

/// Forward noising: x_t = sqrt(alpha_bar_t) * x0 + sqrt(1 - alpha_bar_t) * noise.
/// t = 0 returns x0 unchanged.
pub fn q_sample(x0: &Array4<f64>, t: usize, noise: &Array4<f64>, schedule: &Schedule) -> Result<Array4<f64>> {
    if t > schedule.t_max() {
        return Err(Error::Config(format!(
            "timestep {t} outside the schedule range 0..={}",
            schedule.t_max()
        )));
    }
    if x0.dim() != noise.dim() {
        return Err(Error::Shape {
            expected: format!("noise shaped {:?}", x0.dim()),
            got: format!("{:?}", noise.dim()),
        });
    }
    let ab = schedule.alpha_bar(t);
    let signal = ab.sqrt();
    let sigma = (1.0 - ab).sqrt();
    Ok(x0 * signal + noise * sigma)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn cfg(timesteps: usize, beta_min: f64, beta_max: f64) -> DiffusionConfig {
        DiffusionConfig { timesteps, beta_min, beta_max }
    }

    /// Literal product-of-alphas evaluation, kept separate from the running
    /// product inside make_schedule.
    fn alpha_bar_oracle(config: &DiffusionConfig, t: usize) -> f64 {
        let mut product = 1.0;
        for step in 1..=t {
            let frac = if config.timesteps == 1 {
                0.0
            } else {
                (step - 1) as f64 / (config.timesteps - 1) as f64
            };
            let beta = config.beta_min + (config.beta_max - config.beta_min) * frac;
            product *= 1.0 - beta;
        }
        product
    }

    #[test]
    fn single_step_schedule_matches_hand_value() {
        let schedule = make_schedule(&cfg(1, 0.1, 0.1)).unwrap();
        assert_eq!(schedule.t_max(), 1);
        assert!((schedule.beta(1) - 0.1).abs() < 1e-15);
        assert!((schedule.alpha(1) - 0.9).abs() < 1e-15);
        assert!((schedule.alpha_bar(1) - 0.9).abs() < 1e-15);
        assert_eq!(schedule.alpha_bar(0), 1.0);
    }

    #[test]
    fn alpha_bar_matches_product_oracle() {
        for config in [cfg(50, 1e-4, 0.02), DiffusionConfig::default(), cfg(7, 0.01, 0.3)] {
            let schedule = make_schedule(&config).unwrap();
            for t in [0, 1, config.timesteps / 2, config.timesteps] {
                let expect = alpha_bar_oracle(&config, t);
                let got = schedule.alpha_bar(t);
                assert!(
                    (expect - got).abs() <= 1e-12 * expect.max(1.0),
                    "t={t}: {got} vs oracle {expect}"
                );
            }
        }
    }

    #[test]
    fn default_grid_ends_nearly_noise_free() {
        let schedule = make_schedule(&DiffusionConfig::default()).unwrap();
        let oracle = alpha_bar_oracle(&DiffusionConfig::default(), schedule.t_max());
        assert!((schedule.alpha_bar(schedule.t_max()) - oracle).abs() < 1e-12);
        assert!(
            schedule.alpha_bar(schedule.t_max()) < 0.05,
            "terminal alpha_bar {} should be almost pure noise",
            schedule.alpha_bar(schedule.t_max())
        );
    }

    #[test]
    fn alpha_bar_is_strictly_decreasing() {
        let schedule = make_schedule(&DiffusionConfig::default()).unwrap();
        for t in 1..=schedule.t_max() {
            assert!(schedule.alpha_bar(t) < schedule.alpha_bar(t - 1));
            assert!(schedule.alpha_bar(t) > 0.0);
            assert!(schedule.beta(t) > 0.0 && schedule.beta(t) < 1.0);
        }
    }

    #[test]
    fn invalid_beta_ranges_are_rejected() {
        assert!(make_schedule(&cfg(10, 0.0, 0.5)).is_err());
        assert!(make_schedule(&cfg(10, 0.2, 0.1)).is_err());
        assert!(make_schedule(&cfg(10, 0.1, 1.0)).is_err());
        assert!(make_schedule(&cfg(0, 0.1, 0.2)).is_err());
    }

    #[test]
    fn respaced_schedule_keeps_endpoint_and_recurrences() {
        let native = make_schedule(&DiffusionConfig::default()).unwrap();
        let short = native.respaced(50).unwrap();
        assert_eq!(short.t_max(), 50);
        assert_eq!(short.alpha_bar(50), native.alpha_bar(200));
        assert_eq!(short.model_t(50), 200);
        for k in 1..=50 {
            let recon = short.alpha_bar(k - 1) * short.alpha(k);
            assert!((recon - short.alpha_bar(k)).abs() < 1e-15);
            assert!((short.alpha(k) - (1.0 - short.beta(k))).abs() < 1e-15);
        }
    }

    #[test]
    fn q_sample_at_zero_returns_x0() {
        let schedule = make_schedule(&cfg(10, 1e-4, 0.02)).unwrap();
        let x0 = Array4::from_shape_fn((2, 4, 4, 3), |(a, b, c, d)| {
            (a + b * 2 + c * 3 + d) as f64 * 0.01 + 0.1
        });
        let noise = Array4::from_elem((2, 4, 4, 3), 0.7);
        let xt = q_sample(&x0, 0, &noise, &schedule).unwrap();
        assert_eq!(xt, x0);
    }

    #[test]
    fn q_sample_variance_tracks_schedule() {
        let config = cfg(50, 1e-4, 0.12);
        let schedule = make_schedule(&config).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let n = 100_000;
        let x0 = Array4::zeros((1, 1, 1, 1));
        for t in [1, 25, 50] {
            let mut sum = 0.0;
            let mut sum_sq = 0.0;
            for _ in 0..n {
                let z: f64 = StandardNormal.sample(&mut rng);
                let noise = Array4::from_elem((1, 1, 1, 1), z);
                let xt = q_sample(&x0, t, &noise, &schedule).unwrap();
                sum += xt[[0, 0, 0, 0]];
                sum_sq += xt[[0, 0, 0, 0]] * xt[[0, 0, 0, 0]];
            }
            let mean = sum / n as f64;
            let var = sum_sq / n as f64 - mean * mean;
            let expect = 1.0 - schedule.alpha_bar(t);
            assert!(
                (var - expect).abs() <= 0.02 * expect,
                "t={t}: empirical variance {var} vs {expect}"
            );
        }
    }

    #[test]
    fn q_sample_rejects_shape_mismatch() {
        let schedule = make_schedule(&cfg(10, 1e-4, 0.02)).unwrap();
        let x0 = Array4::zeros((2, 4, 4, 3));
        let noise = Array4::zeros((2, 4, 4, 1));
        assert!(q_sample(&x0, 1, &noise, &schedule).is_err());
    }
}
