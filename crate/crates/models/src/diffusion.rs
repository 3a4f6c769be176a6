//! Cosine noise schedule, forward noising and the respaced ancestral step.

use serde::{Deserialize, Serialize};

use crate::error::{ModelError, Result};

pub const DEFAULT_TIMESTEPS: usize = 1000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    /// `alpha_bar(t) = f(t) / f(0)` with `f(t) = cos^2(((t+1)/T + s)/(1 + s) * pi/2)`,
    /// per-step betas capped at 0.999.
    pub fn cosine(timesteps: usize) -> Result<Self> {
        if timesteps < 2 {
            return Err(ModelError::Config("schedule needs at least two timesteps".into()));
        }
        let s = 0.008;
        let f = |t: f64| (((t / timesteps as f64) + s) / (1.0 + s) * std::f64::consts::FRAC_PI_2).cos().powi(2);
        let mut alpha_bar = Vec::with_capacity(timesteps);
        let mut prev = 1.0;
        for t in 0..timesteps {
            let beta = (1.0 - f(t as f64 + 1.0) / f(t as f64)).min(0.999);
            prev *= 1.0 - beta;
            alpha_bar.push(prev);
        }
        Ok(Self { alpha_bar })
    }

    pub fn timesteps(&self) -> usize {
        self.alpha_bar.len()
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    /// `sqrt(ab) * x0 + sqrt(1 - ab) * eps`.
    pub fn q_sample(&self, x0: &[f32], eps: &[f32], t: usize) -> Vec<f32> {
        let ab = self.alpha_bar(t);
        let (a, b) = (ab.sqrt() as f32, (1.0 - ab).sqrt() as f32);
        x0.iter().zip(eps).map(|(x, e)| a * x + b * e).collect()
    }

    /// `steps` timesteps from `T-1` down to 0, evenly spaced.
    pub fn respaced(&self, steps: usize) -> Result<Vec<usize>> {
        let t = self.timesteps();
        if steps < 2 || steps > t {
            return Err(ModelError::Request(format!("steps must be in [2, {t}], got {steps}")));
        }
        let mut out: Vec<usize> = (0..steps)
            .map(|i| ((t - 1) as f64 * (1.0 - i as f64 / (steps - 1) as f64)).round() as usize)
            .collect();
        out.dedup();
        Ok(out)
    }

    /// One ancestral step from `t` to `t_prev` (`None` for the final step).
    /// Returns the posterior mean and standard deviation given the predicted
    /// noise; `x0` is clipped to `[-1, 1]`.
    pub fn step(&self, x_t: &[f32], eps: &[f32], t: usize, t_prev: Option<usize>) -> (Vec<f32>, f32) {
        let ab_t = self.alpha_bar(t);
        let x0: Vec<f64> = x_t
            .iter()
            .zip(eps)
            .map(|(&x, &e)| ((x as f64 - (1.0 - ab_t).sqrt() * e as f64) / ab_t.sqrt()).clamp(-1.0, 1.0))
            .collect();
        let Some(tp) = t_prev else {
            return (x0.into_iter().map(|v| v as f32).collect(), 0.0);
        };
        let ab_p = self.alpha_bar(tp);
        let alpha = ab_t / ab_p;
        let beta = 1.0 - alpha;
        let c0 = ab_p.sqrt() * beta / (1.0 - ab_t);
        let ct = alpha.sqrt() * (1.0 - ab_p) / (1.0 - ab_t);
        let var = beta * (1.0 - ab_p) / (1.0 - ab_t);
        let mean = x0
            .iter()
            .zip(x_t)
            .map(|(&x0, &xt)| (c0 * x0 + ct * xt as f64) as f32)
            .collect();
        (mean, var.max(0.0).sqrt() as f32)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_schedule_is_monotone_and_bounded() {
        let s = NoiseSchedule::cosine(1000).unwrap();
        assert!(s.alpha_bar(0) < 1.0 && s.alpha_bar(0) > 0.99);
        assert!(s.alpha_bar(999) < 1e-3);
        for t in 1..1000 {
            assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
        }
    }

    #[test]
    fn respacing_endpoints() {
        let s = NoiseSchedule::cosine(1000).unwrap();
        let r = s.respaced(10).unwrap();
        assert_eq!(r.len(), 10);
        assert_eq!((r[0], r[9]), (999, 0));
        assert!(s.respaced(1).is_err());
    }

    #[test]
    fn exact_noise_recovers_x0() {
        let s = NoiseSchedule::cosine(1000).unwrap();
        let x0 = vec![0.3f32, -0.7, 0.1];
        let eps = vec![1.0f32, -0.5, 0.25];
        let xt = s.q_sample(&x0, &eps, 400);
        let (out, sd) = s.step(&xt, &eps, 400, None);
        assert_eq!(sd, 0.0);
        for (a, b) in out.iter().zip(&x0) {
            assert!((a - b).abs() < 1e-5);
        }
    }
}
