use alloc::format;
use alloc::vec::Vec;

use crate::numerics::math::sqrt;
use crate::{Error, Result};

/// Linear-β noise schedule with cumulative products `ᾱ_t`, `t ∈ [0, T]`.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct NoiseSchedule {
    steps: usize,
    /// `betas[0] = 0`; `betas[t]` for `t ≥ 1`.
    betas: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    /// Number of diffusion steps `T`.
    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }
}

pub fn make_schedule(steps: usize, beta_min: f64, beta_max: f64) -> Result<NoiseSchedule> {
    if steps < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 steps, got {steps}")));
    }
    if !(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "require 0 < beta_min <= beta_max < 1, got [{beta_min}, {beta_max}]"
        )));
    }
    let mut betas = Vec::with_capacity(steps + 1);
    let mut alpha_bar = Vec::with_capacity(steps + 1);
    betas.push(0.0);
    alpha_bar.push(1.0);
    let span = beta_max - beta_min;
    for s in 1..=steps {
        let beta = beta_min + span * (s - 1) as f64 / (steps - 1) as f64;
        betas.push(beta);
        alpha_bar.push(alpha_bar[s - 1] * (1.0 - beta));
    }
    Ok(NoiseSchedule {
        steps,
        betas,
        alpha_bar,
    })
}

/// `x_t = √ᾱ_t·x₀ + √(1−ᾱ_t)·ε`
pub fn forward_diffuse(x0: &[f64], t: usize, eps: &[f64], schedule: &NoiseSchedule) -> Result<Vec<f64>> {
    if t > schedule.steps {
        return Err(Error::InvalidArgument(format!(
            "timestep {t} outside [0, {}]",
            schedule.steps
        )));
    }
    if x0.len() != eps.len() {
        return Err(crate::shape_err!("x0 has {} entries, eps {}", x0.len(), eps.len()));
    }
    let ab = schedule.alpha_bar[t];
    let (a, b) = (sqrt(ab), sqrt(1.0 - ab));
    Ok(x0.iter().zip(eps).map(|(x, e)| a * x + b * e).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;

    #[test]
    fn two_step_closed_form() {
        let s = make_schedule(2, 0.5, 0.5).unwrap();
        assert_eq!(s.alpha_bars(), &[1.0, 0.5, 0.25]);
    }

    #[test]
    fn long_schedule_matches_direct_product() {
        let s = make_schedule(1000, 1e-4, 2e-2).unwrap();
        let mut prod = 1.0;
        for k in 1..=1000 {
            let beta = 1e-4 + (2e-2 - 1e-4) * (k - 1) as f64 / 999.0;
            prod *= 1.0 - beta;
            assert!((s.alpha_bar(k) - prod).abs() <= 1e-15);
            assert!(s.alpha_bar(k) < s.alpha_bar(k - 1));
        }
        assert!(s.alpha_bar(1000) > 0.0);
    }

    #[test]
    fn range_checks() {
        assert!(make_schedule(100, 1e-4, 1.0).is_err());
        assert!(make_schedule(1, 1e-4, 0.02).is_err());
        assert!(make_schedule(10, 0.0, 0.02).is_err());
        assert!(make_schedule(10, 0.3, 0.2).is_err());
    }

    #[test]
    fn diffuse_identity_and_arithmetic() {
        let s = make_schedule(2, 0.5, 0.5).unwrap();
        assert_eq!(forward_diffuse(&[2.0, -1.0], 0, &[5.0, 5.0], &s).unwrap(), [2.0, -1.0]);
        let xt = forward_diffuse(&[2.0, 0.0], 2, &[0.0, 2.0], &s).unwrap();
        assert!((xt[0] - 1.0).abs() < 1e-15);
        assert!((xt[1] - 3f64.sqrt()).abs() < 1e-15);
        assert!(forward_diffuse(&[0.0], 3, &[0.0], &s).is_err());
    }

    #[test]
    fn monte_carlo_mean() {
        let s = make_schedule(200, 5e-4, 0.1).unwrap();
        let mut rng = Rng::new(9);
        let x0 = [1.5, -0.7];
        let t = 37;
        let n = 10_000;
        let mut mean = [0.0; 2];
        for _ in 0..n {
            let eps = rng.normal_vec(2);
            let xt = forward_diffuse(&x0, t, &eps, &s).unwrap();
            mean[0] += xt[0] / n as f64;
            mean[1] += xt[1] / n as f64;
        }
        let sd = sqrt(1.0 - s.alpha_bar(t));
        let tol = 3.0 * sd / sqrt(n as f64);
        for d in 0..2 {
            assert!((mean[d] - sqrt(s.alpha_bar(t)) * x0[d]).abs() <= tol);
        }
    }
}
