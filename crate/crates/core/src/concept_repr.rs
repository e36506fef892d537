//! Concept representations and the quantities that drive concept-irrelevant
//! unlearning: the noise-difference representation Δ_ε, the correlation loss
//! between original and edited representations, per-concept loss balancing and
//! the momentum statistic used for early stopping.

use alloc::vec::Vec;

use crate::diffusion::{forward, ContextKv, DenoiserParams};
use crate::numerics::math::{dot, norm2};
use crate::numerics::Matrix;
use crate::{Error, Result};

/// Smallest denominator used when balancing losses.
pub const ETA_FLOOR: f64 = 1e-12;

/// How the original and edited representations are compared.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum CorrKind {
    /// Mean of the element-wise product.
    #[default]
    Product,
    /// Cosine similarity of the two flattened vectors (experimental).
    Cosine,
}

impl CorrKind {
    /// Value of the comparison between the frozen representation `a` and the
    /// edited representation `b`.
    pub fn value(self, a: &[f64], b: &[f64]) -> f64 {
        match self {
            CorrKind::Product => dot(a, b) / a.len() as f64,
            CorrKind::Cosine => {
                let denom = norm2(a) * norm2(b);
                if denom == 0.0 {
                    0.0
                } else {
                    dot(a, b) / denom
                }
            }
        }
    }

    /// Gradient of [`value`](Self::value) with respect to `b`; `a` is a constant.
    pub fn grad_b(self, a: &[f64], b: &[f64]) -> Vec<f64> {
        match self {
            CorrKind::Product => {
                let n = a.len() as f64;
                a.iter().map(|x| x / n).collect()
            }
            CorrKind::Cosine => {
                let (na, nb) = (norm2(a), norm2(b));
                if na == 0.0 || nb == 0.0 {
                    return alloc::vec![0.0; b.len()];
                }
                let ab = dot(a, b);
                a.iter()
                    .zip(b)
                    .map(|(x, y)| x / (na * nb) - ab * y / (na * nb * nb * nb))
                    .collect()
            }
        }
    }
}

/// `Δ_ε(c, θ) = ε_θ(x_t, c, t) − ε_θ(x_t, ∅, t)`
pub fn delta_eps(params: &DenoiserParams, x_t: &[f64], concept: &Matrix, blank: &Matrix, t: usize) -> Result<Vec<f64>> {
    let kc = ContextKv::new(params, concept)?;
    let kb = ContextKv::new(params, blank)?;
    delta_eps_kv(params, &kc, &kb, x_t, t)
}

pub(crate) fn delta_eps_kv(
    params: &DenoiserParams,
    concept: &ContextKv,
    blank: &ContextKv,
    x_t: &[f64],
    t: usize,
) -> Result<Vec<f64>> {
    let yc = forward(params, concept, x_t, t)?.output;
    let yb = forward(params, blank, x_t, t)?.output;
    Ok(yc.iter().zip(&yb).map(|(c, b)| c - b).collect())
}

/// Correlation loss between the representations of one concept under the
/// frozen model and an edited model, averaged over every entry of every
/// probe `(x_t, t)`.
///
/// `edited` is `θ_dm + Δθ`. Negative values are allowed.
pub fn corr_loss(
    concept: &Matrix,
    blank: &Matrix,
    frozen: &DenoiserParams,
    edited: &DenoiserParams,
    probes: &[(Vec<f64>, usize)],
    kind: CorrKind,
) -> Result<f64> {
    if probes.is_empty() {
        return Err(Error::InvalidArgument("corr_loss needs at least one probe".into()));
    }
    frozen.check_compatible(edited)?;
    let (fc, fb) = (ContextKv::new(frozen, concept)?, ContextKv::new(frozen, blank)?);
    let (ec, eb) = (ContextKv::new(edited, concept)?, ContextKv::new(edited, blank)?);
    let mut a = Vec::new();
    let mut b = Vec::new();
    for (x, t) in probes {
        a.extend(delta_eps_kv(frozen, &fc, &fb, x, *t)?);
        b.extend(delta_eps_kv(edited, &ec, &eb, x, *t)?);
    }
    Ok(kind.value(&a, &b))
}

/// Per-concept balancing weights, treated as constants by the optimiser.
#[derive(Debug, Clone, PartialEq)]
pub struct EtaWeights {
    pub eta: Vec<f64>,
}

impl EtaWeights {
    /// `Σ η_i·losses[i]`
    pub fn balanced_sum(&self, losses: &[f64]) -> f64 {
        self.eta.iter().zip(losses).map(|(e, l)| e * l).sum()
    }
}

/// `η_i = |losses[0]| / max(|losses[i]|, 1e-12)`, `η_0 = 1`.
pub fn eta_weights(losses: &[f64]) -> Result<EtaWeights> {
    let Some(&first) = losses.first() else {
        return Err(Error::InvalidArgument("eta_weights needs at least one loss".into()));
    };
    let mut eta: Vec<f64> = losses
        .iter()
        .map(|l| first.abs() / l.abs().max(ETA_FLOOR))
        .collect();
    eta[0] = 1.0;
    Ok(EtaWeights { eta })
}

/// Momentum statistic of the balanced loss and its early-stopping threshold.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct CorrState {
    /// `None` until the first update.
    pub l_mom: Option<f64>,
    pub alpha: f64,
    pub tau: f64,
    pub n: usize,
}

impl CorrState {
    pub fn new(alpha: f64, tau: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&alpha) {
            return Err(Error::InvalidArgument(alloc::format!("alpha must lie in [0, 1), got {alpha}")));
        }
        Ok(Self {
            l_mom: None,
            alpha,
            tau,
            n: 0,
        })
    }

    /// Starts from a known momentum value instead of the first balanced sum.
    pub fn with_momentum(alpha: f64, tau: f64, l_mom: f64) -> Result<Self> {
        let mut s = Self::new(alpha, tau)?;
        s.l_mom = Some(l_mom);
        Ok(s)
    }

    /// One optimisation step: `L_mom ← α·L_mom + (1−α)·sum`. Returns `true`
    /// when `L_mom ≤ τ`. On the first step the previous value is `sum` itself.
    pub fn step(&mut self, balanced_sum: f64) -> Result<bool> {
        if !balanced_sum.is_finite() {
            return Err(Error::NonFinite(alloc::format!("balanced loss at step {}", self.n + 1)));
        }
        let prev = self.l_mom.unwrap_or(balanced_sum);
        let next = self.alpha * prev + (1.0 - self.alpha) * balanced_sum;
        self.l_mom = Some(next);
        self.n += 1;
        Ok(next <= self.tau)
    }

    pub fn value(&self) -> Option<f64> {
        self.l_mom
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::{predict, ModelDims};
    use crate::numerics::{check_gradient, Rng};
    use alloc::vec;

    fn model() -> (DenoiserParams, Matrix, Matrix, Rng) {
        let mut rng = Rng::new(21);
        let p = DenoiserParams::init(ModelDims::default(), 1.0, &mut rng);
        let c = rng.normal_matrix(4, 64, 1.0);
        let blank = rng.normal_matrix(4, 64, 1.0);
        (p, c, blank, rng)
    }

    #[test]
    fn delta_eps_of_blank_is_zero() {
        let (p, _, blank, _) = model();
        let d = delta_eps(&p, &[0.4, -0.2], &blank, &blank, 30).unwrap();
        assert!(d.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn delta_eps_is_difference_of_predictions() {
        let (p, c, blank, _) = model();
        let x = [1.1, 0.3];
        let d = delta_eps(&p, &x, &c, &blank, 12).unwrap();
        let yc = predict(&p, &x, &c, 12).unwrap();
        let yb = predict(&p, &x, &blank, 12).unwrap();
        assert_eq!(d, vec![yc[0] - yb[0], yc[1] - yb[1]]);
    }

    #[test]
    fn corr_loss_without_edit_is_mean_square() {
        let (p, c, blank, mut rng) = model();
        let probes: Vec<(Vec<f64>, usize)> = (0..5).map(|i| (rng.normal_vec(2), 10 + i)).collect();
        let l = corr_loss(&c, &blank, &p, &p, &probes, CorrKind::Product).unwrap();
        // Entry-wise oracle.
        let mut acc = 0.0;
        let mut n = 0;
        for (x, t) in &probes {
            for v in delta_eps(&p, x, &c, &blank, *t).unwrap() {
                acc += v * v;
                n += 1;
            }
        }
        assert!(l >= 0.0);
        assert!((l - acc / n as f64).abs() <= 1e-15 * acc.abs().max(1.0));
    }

    #[test]
    fn corr_loss_matches_entrywise_oracle_under_edit() {
        let (p, c, blank, mut rng) = model();
        let mut q = p.clone();
        q.blocks[1].to_v.add_scaled(0.3, &rng.normal_matrix(64, 32, 1.0)).unwrap();
        q.blocks[0].to_q.add_scaled(0.3, &rng.normal_matrix(32, 32, 1.0)).unwrap();
        let probes: Vec<(Vec<f64>, usize)> = (0..4).map(|i| (rng.normal_vec(2), 3 + 40 * i)).collect();
        let l = corr_loss(&c, &blank, &p, &q, &probes, CorrKind::Product).unwrap();
        let mut acc = 0.0;
        let mut n = 0;
        for (x, t) in &probes {
            let a = vec![
                predict(&p, x, &c, *t).unwrap(),
                predict(&p, x, &blank, *t).unwrap(),
            ];
            let b = vec![
                predict(&q, x, &c, *t).unwrap(),
                predict(&q, x, &blank, *t).unwrap(),
            ];
            for k in 0..2 {
                acc += (a[0][k] - a[1][k]) * (b[0][k] - b[1][k]);
                n += 1;
            }
        }
        assert!((l - acc / n as f64).abs() <= 1e-14);
    }

    #[test]
    fn orthogonal_representations_give_zero() {
        assert_eq!(CorrKind::Product.value(&[1.0, 1.0], &[2.0, -2.0]), 0.0);
        assert_eq!(CorrKind::Cosine.value(&[1.0, 0.0], &[0.0, 3.0]), 0.0);
    }

    #[test]
    fn cosine_gradient() {
        let a = [0.3, -1.2, 0.8, 2.0];
        let err = check_gradient(
            |b| (CorrKind::Cosine.value(&a, b), CorrKind::Cosine.grad_b(&a, b)),
            &[1.0, 0.5, -0.7, 0.2],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-7);
    }

    #[test]
    fn eta_examples() {
        assert_eq!(eta_weights(&[0.2, 0.1, 0.4]).unwrap().eta, [1.0, 2.0, 0.5]);
        assert_eq!(eta_weights(&[0.3, 0.3]).unwrap().eta, [1.0, 1.0]);
        let w = eta_weights(&[0.5, 0.0]).unwrap();
        assert_eq!(w.eta[1], 0.5 / 1e-12);
        assert_eq!(w.eta[1] * 0.0, 0.0);
        assert!(eta_weights(&[]).is_err());
    }

    #[test]
    fn momentum_examples() {
        let mut s = CorrState::with_momentum(0.9, 0.0, 0.1).unwrap();
        let stop = s.step(0.2).unwrap();
        assert!((s.value().unwrap() - 0.11).abs() < 1e-15);
        assert!(!stop);

        let mut s = CorrState::with_momentum(0.9, 0.0, -0.01).unwrap();
        assert!(s.step(-0.01).unwrap());

        let mut s = CorrState::with_momentum(0.0, 0.0, 123.0).unwrap();
        s.step(0.37).unwrap();
        assert_eq!(s.value(), Some(0.37));

        let mut s = CorrState::new(0.9, 0.0).unwrap();
        assert!(s.step(f64::NAN).is_err());
        assert!(CorrState::new(1.0, 0.0).is_err());
    }

    #[test]
    fn first_step_starts_from_the_first_sum() {
        let mut s = CorrState::new(0.9, 0.0).unwrap();
        assert!(!s.step(0.25).unwrap());
        assert!((s.value().unwrap() - 0.25).abs() < 1e-16);
    }
}

#[cfg(test)]
mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn balancing_identity(losses in proptest::collection::vec(-1.0f64..1.0, 1..6)) {
            let w = eta_weights(&losses).unwrap();
            for (e, l) in w.eta.iter().zip(&losses) {
                prop_assert!(*e >= 0.0);
                if l.abs() > ETA_FLOOR {
                    let lhs = (e * l).abs();
                    prop_assert!((lhs - losses[0].abs()).abs() <= 1e-12 * losses[0].abs().max(1e-300));
                }
            }
        }

        #[test]
        fn momentum_contracts(alpha in 0.0f64..0.999, prev in -1.0f64..1.0, s in -1.0f64..1.0) {
            let mut st = CorrState::with_momentum(alpha, 0.0, prev).unwrap();
            st.step(s).unwrap();
            let lhs = (st.value().unwrap() - s).abs();
            prop_assert!((lhs - alpha * (prev - s).abs()).abs() <= 1e-15);
        }
    }
}
