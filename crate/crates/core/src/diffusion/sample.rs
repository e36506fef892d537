use alloc::vec::Vec;

use super::denoiser::{forward, ContextKv};
use super::params::DenoiserParams;
use super::schedule::NoiseSchedule;
use crate::numerics::math::sqrt;
use crate::numerics::{Matrix, Rng};
use crate::Result;

/// Ancestral DDPM sampling for one prompt.
///
/// All Gaussian draws come from `Rng::new(seed)` in a fixed order that does
/// not depend on the model, so two models sampled with the same seed see
/// identical noise.
pub fn sample(
    params: &DenoiserParams,
    tokens: &Matrix,
    schedule: &NoiseSchedule,
    n: usize,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    if n == 0 {
        return Ok(Vec::new());
    }
    let kv = ContextKv::new(params, tokens)?;
    let d = params.dims.data_dim;
    let mut rng = Rng::new(seed);
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let mut x = rng.normal_vec(d);
        for t in (1..=schedule.steps()).rev() {
            let eps = forward(params, &kv, &x, t)?.output;
            let beta = schedule.beta(t);
            let ab = schedule.alpha_bar(t);
            let ab_prev = schedule.alpha_bar(t - 1);
            let coef = beta / sqrt(1.0 - ab);
            let inv_sqrt_alpha = 1.0 / sqrt(1.0 - beta);
            for (xi, ei) in x.iter_mut().zip(&eps) {
                *xi = inv_sqrt_alpha * (*xi - coef * ei);
            }
            if t > 1 {
                let sigma = sqrt(beta * (1.0 - ab_prev) / (1.0 - ab));
                for xi in x.iter_mut() {
                    *xi += sigma * rng.normal();
                }
            }
        }
        out.push(x);
    }
    Ok(out)
}
