//! Forward pass and hand-derived backward pass of the toy denoiser.
//!
//! Per sample:
//!
//! ```text
//! h   = x·W_in + b_in + E[t]
//! per block:
//!   q  = h·to_q
//!   a  = softmax(q·Kᵀ / √d_out)        K = c·to_k, V = c·to_v
//!   h1 = h + (a·V)·W_o + b_o
//!   h  = h1 + silu(h1·W_1 + b_1)·W_2 + b_2
//! ε̂  = h·W_out + b_out
//! ```
//!
//! Keys and values depend only on the prompt tokens `c`, so they are computed
//! once per prompt ([`ContextKv`]) and their gradients are accumulated
//! separately ([`KvGrad`]) before being pulled back onto `to_k`/`to_v`.

use alloc::vec;
use alloc::vec::Vec;

use super::params::DenoiserParams;
use crate::numerics::math::{axpy, dot, exp, sigmoid, sqrt};
use crate::numerics::Matrix;
use crate::{shape_err, Error, Result};

/// Keys and values of one prompt for every block.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextKv {
    /// Per block, `tokens × d_out`.
    pub keys: Vec<Matrix>,
    pub values: Vec<Matrix>,
}

impl ContextKv {
    pub fn new(params: &DenoiserParams, tokens: &Matrix) -> Result<Self> {
        if tokens.cols() != params.dims.d_in {
            return Err(shape_err!(
                "prompt tokens have width {}, model expects {}",
                tokens.cols(),
                params.dims.d_in
            ));
        }
        if tokens.rows() == 0 {
            return Err(shape_err!("prompt has no tokens"));
        }
        let mut keys = Vec::with_capacity(params.blocks.len());
        let mut values = Vec::with_capacity(params.blocks.len());
        for blk in &params.blocks {
            keys.push(tokens.matmul(&blk.to_k)?);
            values.push(tokens.matmul(&blk.to_v)?);
        }
        Ok(Self { keys, values })
    }

    pub fn token_count(&self) -> usize {
        self.keys.first().map_or(0, |k| k.rows())
    }
}

/// Gradient with respect to the keys and values of one prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct KvGrad {
    pub keys: Vec<Matrix>,
    pub values: Vec<Matrix>,
}

impl KvGrad {
    pub fn zeros(kv: &ContextKv) -> Self {
        Self {
            keys: kv.keys.iter().map(|k| Matrix::zeros(k.rows(), k.cols())).collect(),
            values: kv.values.iter().map(|v| Matrix::zeros(v.rows(), v.cols())).collect(),
        }
    }

    /// `d to_k += cᵀ·dK`, `d to_v += cᵀ·dV` for every block.
    pub fn pull_back(&self, tokens: &Matrix, grads: &mut DenoiserParams) -> Result<()> {
        for (b, blk) in grads.blocks.iter_mut().enumerate() {
            blk.to_k.add_assign(&tokens.t_matmul(&self.keys[b])?)?;
            blk.to_v.add_assign(&tokens.t_matmul(&self.values[b])?)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct BlockTrace {
    h_in: Vec<f64>,
    q: Vec<f64>,
    attn: Vec<f64>,
    o: Vec<f64>,
    h1: Vec<f64>,
    z: Vec<f64>,
    g: Vec<f64>,
}

/// Intermediate activations of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    x: Vec<f64>,
    t: usize,
    blocks: Vec<BlockTrace>,
    h_final: Vec<f64>,
    pub output: Vec<f64>,
}

impl ForwardTrace {
    /// Attention probabilities over the prompt tokens in block `b`.
    pub fn attention(&self, b: usize) -> &[f64] {
        &self.blocks[b].attn
    }
}

fn softmax_in_place(s: &mut [f64]) {
    let m = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for v in s.iter_mut() {
        *v = exp(*v - m);
        z += *v;
    }
    for v in s.iter_mut() {
        *v /= z;
    }
}

/// Runs the denoiser on one noised sample.
pub fn forward(params: &DenoiserParams, kv: &ContextKv, x: &[f64], t: usize) -> Result<ForwardTrace> {
    let dims = &params.dims;
    if x.len() != dims.data_dim {
        return Err(shape_err!("input has {} entries, model expects {}", x.len(), dims.data_dim));
    }
    if t >= params.time_embed.rows() {
        return Err(Error::InvalidArgument(alloc::format!(
            "timestep {t} outside [0, {}]",
            params.time_embed.rows() - 1
        )));
    }
    if kv.keys.len() != params.blocks.len() {
        return Err(shape_err!("context has {} blocks, model {}", kv.keys.len(), params.blocks.len()));
    }

    let mut h = vec![0.0; dims.hidden];
    params.input.apply_into(x, &mut h);
    axpy(1.0, params.time_embed.row(t), &mut h);

    let inv_sqrt_d = 1.0 / sqrt(dims.d_out as f64);
    let mut traces = Vec::with_capacity(params.blocks.len());
    for (b, blk) in params.blocks.iter().enumerate() {
        let q = blk.to_q.vecmat(&h);
        let keys = &kv.keys[b];
        let mut attn: Vec<f64> = (0..keys.rows()).map(|j| dot(&q, keys.row(j)) * inv_sqrt_d).collect();
        softmax_in_place(&mut attn);
        let vals = &kv.values[b];
        let mut o = vec![0.0; vals.cols()];
        for (j, &a) in attn.iter().enumerate() {
            axpy(a, vals.row(j), &mut o);
        }
        let mut h1 = vec![0.0; dims.hidden];
        blk.to_out.apply_into(&o, &mut h1);
        axpy(1.0, &h, &mut h1);
        let mut z = vec![0.0; blk.ff1.weight.cols()];
        blk.ff1.apply_into(&h1, &mut z);
        let g: Vec<f64> = z.iter().map(|&v| v * sigmoid(v)).collect();
        let mut h2 = vec![0.0; dims.hidden];
        blk.ff2.apply_into(&g, &mut h2);
        axpy(1.0, &h1, &mut h2);
        traces.push(BlockTrace {
            h_in: h,
            q,
            attn,
            o,
            h1,
            z,
            g,
        });
        h = h2;
    }

    let mut output = vec![0.0; dims.data_dim];
    params.output.apply_into(&h, &mut output);
    Ok(ForwardTrace {
        x: x.to_vec(),
        t,
        blocks: traces,
        h_final: h,
        output,
    })
}

/// Convenience wrapper: `ε̂(x_t, c, t)` for a prompt given as raw tokens.
pub fn predict(params: &DenoiserParams, x: &[f64], tokens: &Matrix, t: usize) -> Result<Vec<f64>> {
    let kv = ContextKv::new(params, tokens)?;
    Ok(forward(params, &kv, x, t)?.output)
}

/// Backpropagates through one forward pass.
///
/// `d_output` is the gradient of the loss with respect to `ε̂`. `d_attn`, when
/// given, adds a per-block gradient with respect to the attention
/// probabilities. Parameter gradients accumulate into `grads` (except
/// `to_k`/`to_v`, which go through `kv_grad`; see [`KvGrad::pull_back`]).
pub fn backward(
    params: &DenoiserParams,
    kv: &ContextKv,
    trace: &ForwardTrace,
    d_output: &[f64],
    d_attn: Option<&[Vec<f64>]>,
    grads: &mut DenoiserParams,
    kv_grad: &mut KvGrad,
) {
    let dims = &params.dims;
    grads.output.weight.add_outer(&trace.h_final, d_output);
    axpy(1.0, d_output, grads.output.bias.as_mut_slice());
    let mut dh = params.output.weight.matvec(d_output);

    let inv_sqrt_d = 1.0 / sqrt(dims.d_out as f64);
    for b in (0..params.blocks.len()).rev() {
        let blk = &params.blocks[b];
        let tr = &trace.blocks[b];
        let gb = &mut grads.blocks[b];

        // FFN residual.
        gb.ff2.weight.add_outer(&tr.g, &dh);
        axpy(1.0, &dh, gb.ff2.bias.as_mut_slice());
        let dg = blk.ff2.weight.matvec(&dh);
        let dz: Vec<f64> = dg
            .iter()
            .zip(&tr.z)
            .map(|(&d, &z)| {
                let s = sigmoid(z);
                d * s * (1.0 + z * (1.0 - s))
            })
            .collect();
        gb.ff1.weight.add_outer(&tr.h1, &dz);
        axpy(1.0, &dz, gb.ff1.bias.as_mut_slice());
        let mut dh1 = dh;
        axpy(1.0, &blk.ff1.weight.matvec(&dz), &mut dh1);

        // Attention residual.
        gb.to_out.weight.add_outer(&tr.o, &dh1);
        axpy(1.0, &dh1, gb.to_out.bias.as_mut_slice());
        let d_o = blk.to_out.weight.matvec(&dh1);
        let vals = &kv.values[b];
        let keys = &kv.keys[b];
        let mut da: Vec<f64> = (0..vals.rows()).map(|j| dot(&d_o, vals.row(j))).collect();
        if let Some(extra) = d_attn {
            axpy(1.0, &extra[b], &mut da);
        }
        for (j, &a) in tr.attn.iter().enumerate() {
            axpy(a, &d_o, kv_grad.values[b].row_mut(j));
        }
        let mean_da = dot(&tr.attn, &da);
        let mut dq = vec![0.0; keys.cols()];
        for j in 0..keys.rows() {
            let ds = tr.attn[j] * (da[j] - mean_da) * inv_sqrt_d;
            if ds != 0.0 {
                axpy(ds, keys.row(j), &mut dq);
                axpy(ds, &tr.q, kv_grad.keys[b].row_mut(j));
            }
        }
        gb.to_q.add_outer(&tr.h_in, &dq);
        dh = dh1;
        axpy(1.0, &blk.to_q.matvec(&dq), &mut dh);
    }

    grads.input.weight.add_outer(&trace.x, &dh);
    axpy(1.0, &dh, grads.input.bias.as_mut_slice());
    axpy(1.0, &dh, grads.time_embed.row_mut(trace.t));
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::params::ModelDims;
    use crate::numerics::{check_gradient, Rng};

    fn small_dims() -> ModelDims {
        ModelDims {
            data_dim: 2,
            hidden: 6,
            d_in: 8,
            tokens: 3,
            d_out: 5,
            blocks: 2,
            ffn: 7,
            timesteps: 10,
        }
    }

    #[test]
    fn deterministic() {
        let mut rng = Rng::new(3);
        let p = DenoiserParams::init(ModelDims::default(), 1.0, &mut rng);
        let c = rng.normal_matrix(4, 64, 1.0);
        let a = predict(&p, &[0.3, -1.2], &c, 17).unwrap();
        let b = predict(&p, &[0.3, -1.2], &c, 17).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn shape_errors() {
        let mut rng = Rng::new(3);
        let p = DenoiserParams::init(small_dims(), 1.0, &mut rng);
        let c = rng.normal_matrix(3, 8, 1.0);
        assert!(predict(&p, &[0.0; 3], &c, 1).is_err());
        assert!(predict(&p, &[0.0; 2], &rng.normal_matrix(3, 7, 1.0), 1).is_err());
        assert!(predict(&p, &[0.0; 2], &c, 11).is_err());
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let mut rng = Rng::new(4);
        let p = DenoiserParams::init(small_dims(), 1.0, &mut rng);
        let c = rng.normal_matrix(3, 8, 1.0);
        let kv = ContextKv::new(&p, &c).unwrap();
        let tr = forward(&p, &kv, &[0.5, 0.1], 4).unwrap();
        for b in 0..2 {
            assert!((tr.attention(b).iter().sum::<f64>() - 1.0).abs() < 1e-14);
        }
    }

    /// Full backward pass (including key/value pull-back and an attention seed)
    /// against central differences on a small model.
    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = Rng::new(8);
        let base = DenoiserParams::init(small_dims(), 1.0, &mut rng);
        let c = rng.normal_matrix(3, 8, 1.0);
        let x = [0.7, -0.4];
        let w_out = [0.3, -1.1];
        let w_attn = [vec![0.2, -0.5, 0.9], vec![-0.3, 0.1, 0.4]];
        let loss = |flat: &[f64]| {
            let mut p = base.clone();
            p.load_flat(flat).unwrap();
            let kv = ContextKv::new(&p, &c).unwrap();
            let tr = forward(&p, &kv, &x, 6).unwrap();
            let mut value = dot(&w_out, &tr.output);
            for b in 0..2 {
                value += dot(&w_attn[b], tr.attention(b));
            }
            let mut g = p.zeros_like();
            let mut kg = KvGrad::zeros(&kv);
            backward(&p, &kv, &tr, &w_out, Some(&w_attn), &mut g, &mut kg);
            kg.pull_back(&c, &mut g).unwrap();
            (value, g.flatten())
        };
        let err = check_gradient(loss, &base.flatten(), 1e-5).unwrap();
        assert!(err <= 1e-6, "max relative error {err}");
    }

    #[test]
    fn output_is_first_order_in_to_v() {
        let mut rng = Rng::new(12);
        let p = DenoiserParams::init(ModelDims::default(), 1.0, &mut rng);
        let c = rng.normal_matrix(4, 64, 1.0);
        let dir = rng.normal_matrix(64, 32, 1.0);
        let x = [0.2, 0.9];
        let y0 = predict(&p, &x, &c, 50).unwrap();
        let mut diffs = Vec::new();
        for delta in [1e-3, 2e-3] {
            let mut q = p.clone();
            q.blocks[0].to_v.add_scaled(delta, &dir).unwrap();
            let y = predict(&q, &x, &c, 50).unwrap();
            diffs.push(crate::numerics::math::max_abs_diff(&y, &y0));
        }
        // Doubling δ doubles the change up to second-order terms.
        assert!((diffs[1] / diffs[0] - 2.0).abs() < 1e-2, "{diffs:?}");
    }
}
