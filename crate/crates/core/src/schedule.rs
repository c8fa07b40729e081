//! Linear-β DDPM noise schedule.

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiffusionSchedule {
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub betas: Vec<f64>,
    pub alphas: Vec<f64>,
    pub alpha_bars: Vec<f64>,
}

impl DiffusionSchedule {
    pub fn linear(timesteps: usize, beta_start: f64, beta_end: f64) -> Self {
        let betas: Vec<f64> = (0..timesteps)
            .map(|t| {
                if timesteps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * t as f64 / (timesteps - 1) as f64
                }
            })
            .collect();
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(timesteps);
        let mut acc = 1.0;
        for a in &alphas {
            acc *= a;
            alpha_bars.push(acc);
        }
        Self {
            timesteps,
            beta_start,
            beta_end,
            betas,
            alphas,
            alpha_bars,
        }
    }

    pub fn from_config(cfg: &RunConfig) -> Self {
        Self::linear(cfg.timesteps, cfg.beta_start, cfg.beta_end)
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t < self.timesteps {
            Ok(())
        } else {
            Err(Error::Param(format!("timestep {t} outside [0, {})", self.timesteps)))
        }
    }

    /// `z_t = sqrt(ᾱ_t) z + sqrt(1 - ᾱ_t) ε`.
    pub fn q_sample<T: Scalar>(&self, z: &Tensor<T>, t: usize, eps: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_t(t)?;
        q_sample_with(z, self.alpha_bars[t], eps)
    }

    /// Variance of the ancestral step from `t` to `t - 1`; zero at `t = 0`.
    pub fn posterior_variance(&self, t: usize) -> f64 {
        if t == 0 {
            0.0
        } else {
            self.betas[t] * (1.0 - self.alpha_bars[t - 1]) / (1.0 - self.alpha_bars[t])
        }
    }

    /// Mean of `p(z_{t-1} | z_t)` given the predicted noise.
    pub fn posterior_mean<T: Scalar>(&self, zt: &Tensor<T>, t: usize, eps_hat: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_t(t)?;
        let coef = self.betas[t] / (1.0 - self.alpha_bars[t]).sqrt();
        let inv = 1.0 / self.alphas[t].sqrt();
        let data = zt
            .data()
            .iter()
            .zip(eps_hat.data())
            .map(|(&z, &e)| T::lit(inv * (z.as_f64() - coef * e.as_f64())))
            .collect();
        Tensor::new(zt.shape(), data)
    }
}

/// Forward noising for an explicit `ᾱ`.
pub fn q_sample_with<T: Scalar>(z: &Tensor<T>, alpha_bar: f64, eps: &Tensor<T>) -> Result<Tensor<T>> {
    if z.shape() != eps.shape() {
        return Err(Error::Shape {
            what: "q_sample noise".into(),
            expected: format!("{:?}", z.shape()),
            actual: format!("{:?}", eps.shape()),
        });
    }
    let (a, b) = (T::lit(alpha_bar.sqrt()), T::lit((1.0 - alpha_bar).sqrt()));
    let data = z.data().iter().zip(eps.data()).map(|(&x, &e)| a * x + b * e).collect();
    Tensor::new(z.shape(), data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn schedule_shape() {
        let s = DiffusionSchedule::linear(200, 1e-4, 0.02);
        assert!(s.betas.windows(2).all(|w| w[0] <= w[1]));
        assert!(s.alpha_bars.windows(2).all(|w| w[0] > w[1]));
        assert!(s.alpha_bars[0] > 0.999);
        assert!(s.betas.iter().all(|&b| b > 0.0 && b < 1.0));
        for &ab in &s.alpha_bars {
            assert!((ab.sqrt().powi(2) + (1.0 - ab) - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_noise_and_unit_alpha() {
        let s = DiffusionSchedule::linear(10, 1e-4, 0.02);
        let z = Tensor::<f64>::from_fn(&[2, 3], |i| i as f64);
        let zt = s.q_sample(&z, 4, &Tensor::zeros(&[2, 3])).unwrap();
        for (a, b) in zt.data().iter().zip(z.data()) {
            assert_eq!(*a, s.alpha_bars[4].sqrt() * b);
        }
        let eps = Tensor::<f64>::full(&[2, 3], 3.0);
        assert_eq!(q_sample_with(&z, 1.0, &eps).unwrap(), z);
        assert!(s.q_sample(&z, 10, &eps).is_err());
    }

    #[test]
    fn variance_is_preserved() {
        let s = DiffusionSchedule::linear(200, 1e-4, 0.02);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n = 100_000;
        let mut draw = || -> Tensor<f64> {
            Tensor::from_fn(&[n], |_| StandardNormal.sample(&mut rng))
        };
        let (z, e) = (draw(), draw());
        for t in [0, 50, 120, 199] {
            let zt = s.q_sample(&z, t, &e).unwrap();
            let mean = zt.data().iter().sum::<f64>() / n as f64;
            let var = zt.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
            assert!((var - 1.0).abs() < 0.02, "t={t}: var {var}");
        }
    }
}
