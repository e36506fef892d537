use alloc::string::String;
use alloc::vec::Vec;

use super::RegNorm;
use crate::concept_repr::{delta_eps_kv, CorrKind};
use crate::diffusion::{backward, forward, ContextKv, DenoiserParams, KvGrad};
use crate::numerics::Matrix;
use crate::{Error, Result};

/// One erased concept with the probes drawn for it this iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrTarget {
    pub name: String,
    pub tokens: Matrix,
    pub probes: Vec<(Vec<f64>, usize)>,
}

/// Correlation loss of one concept between `frozen` and `edited`, with its
/// gradient with respect to every tensor of `edited`.
pub fn corr_value_grad(
    frozen: &DenoiserParams,
    edited: &DenoiserParams,
    concept: &Matrix,
    blank: &Matrix,
    probes: &[(Vec<f64>, usize)],
    kind: CorrKind,
) -> Result<(f64, DenoiserParams)> {
    if probes.is_empty() {
        return Err(Error::InvalidArgument("correlation loss needs at least one probe".into()));
    }
    frozen.check_compatible(edited)?;
    let (fc, fb) = (ContextKv::new(frozen, concept)?, ContextKv::new(frozen, blank)?);
    let (ec, eb) = (ContextKv::new(edited, concept)?, ContextKv::new(edited, blank)?);
    let d = edited.dims.data_dim;
    let mut a = Vec::with_capacity(probes.len() * d);
    let mut b = Vec::with_capacity(probes.len() * d);
    let mut traces = Vec::with_capacity(probes.len());
    for (x, t) in probes {
        a.extend(delta_eps_kv(frozen, &fc, &fb, x, *t)?);
        let tc = forward(edited, &ec, x, *t)?;
        let tb = forward(edited, &eb, x, *t)?;
        b.extend(tc.output.iter().zip(&tb.output).map(|(c, z)| c - z));
        traces.push((tc, tb));
    }
    let value = kind.value(&a, &b);
    let g = kind.grad_b(&a, &b);

    let mut grads = edited.zeros_like();
    let mut kg_c = KvGrad::zeros(&ec);
    let mut kg_b = KvGrad::zeros(&eb);
    for (p, (tc, tb)) in traces.iter().enumerate() {
        let gp = &g[p * d..(p + 1) * d];
        backward(edited, &ec, tc, gp, None, &mut grads, &mut kg_c);
        let neg: Vec<f64> = gp.iter().map(|v| -v).collect();
        backward(edited, &eb, tb, &neg, None, &mut grads, &mut kg_b);
    }
    kg_c.pull_back(concept, &mut grads)?;
    kg_b.pull_back(blank, &mut grads)?;
    Ok((value, grads))
}

/// `‖·‖_p` over a set of tensors: the mean of a per-tensor norm.
pub fn reg_value<'a>(tensors: impl IntoIterator<Item = &'a Matrix>, norm: RegNorm) -> f64 {
    let (sum, count) = tensors.into_iter().fold((0.0, 0usize), |(s, n), m| {
        let v = match norm {
            RegNorm::L1Mean => m.l1_norm(),
            RegNorm::L2 => m.frobenius_norm(),
        };
        (s + v, n + 1)
    });
    if count == 0 {
        0.0
    } else {
        sum / count as f64
    }
}

/// Gradient of [`reg_value`] for each tensor. The ℓ1 subgradient at zero is 0.
pub fn reg_grad(tensors: &[&Matrix], norm: RegNorm) -> Vec<Matrix> {
    let m = tensors.len().max(1) as f64;
    tensors
        .iter()
        .map(|t| match norm {
            RegNorm::L1Mean => t.map(|x| {
                if x > 0.0 {
                    1.0 / m
                } else if x < 0.0 {
                    -1.0 / m
                } else {
                    0.0
                }
            }),
            RegNorm::L2 => {
                let n = t.frobenius_norm();
                if n == 0.0 {
                    t.map(|_| 0.0)
                } else {
                    t.scale(1.0 / (n * m))
                }
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{check_gradient, Rng};

    #[test]
    fn reg_matches_brute_force() {
        let mut rng = Rng::new(2);
        let ts: Vec<Matrix> = (0..4).map(|_| rng.normal_matrix(5, 3, 1.0)).collect();
        let brute: f64 = ts.iter().flat_map(|m| m.as_slice()).map(|x| x.abs()).sum::<f64>() / 4.0;
        assert!((reg_value(&ts, RegNorm::L1Mean) - brute).abs() <= 1e-12 * brute);
        assert_eq!(reg_value(core::iter::empty(), RegNorm::L1Mean), 0.0);
    }

    #[test]
    fn reg_gradients() {
        let mut rng = Rng::new(3);
        let ts: Vec<Matrix> = (0..3).map(|_| rng.normal_matrix(4, 2, 1.0)).collect();
        for norm in [RegNorm::L1Mean, RegNorm::L2] {
            let flat: Vec<f64> = ts.iter().flat_map(|m| m.as_slice().to_vec()).collect();
            let err = check_gradient(
                |p| {
                    let ms: Vec<Matrix> = p.chunks(8).map(|c| Matrix::from_vec(4, 2, c.to_vec()).unwrap()).collect();
                    let refs: Vec<&Matrix> = ms.iter().collect();
                    let g: Vec<f64> = reg_grad(&refs, norm).into_iter().flat_map(|m| m.into_vec()).collect();
                    (reg_value(&ms, norm), g)
                },
                &flat,
                1e-6,
            )
            .unwrap();
            assert!(err <= 1e-6, "{norm:?}: {err}");
        }
    }
}
