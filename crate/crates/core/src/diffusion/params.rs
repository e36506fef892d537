use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::numerics::math::sqrt;
use crate::numerics::{Matrix, Rng};
use crate::{Error, Result};

/// Layer sizes of the toy denoiser.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ModelDims {
    pub data_dim: usize,
    pub hidden: usize,
    /// Width of one concept token.
    pub d_in: usize,
    /// Tokens per concept.
    pub tokens: usize,
    /// Width of attention queries, keys and values.
    pub d_out: usize,
    pub blocks: usize,
    pub ffn: usize,
    /// Number of diffusion steps `T`; the time table has `T + 1` rows.
    pub timesteps: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        Self {
            data_dim: 2,
            hidden: 32,
            d_in: 64,
            tokens: 4,
            d_out: 32,
            blocks: 2,
            ffn: 64,
            timesteps: 200,
        }
    }
}

/// Which parameters an optimiser may touch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum ParamScope {
    All,
    /// `to_q`, `to_k`, `to_v` and `to_out` of every cross-attention block.
    CrossAttention,
    /// Only `to_k` and `to_v`.
    KeyValue,
}

impl ParamScope {
    pub fn contains(self, name: &str) -> bool {
        match self {
            ParamScope::All => true,
            ParamScope::CrossAttention => ["to_q.", "to_k.", "to_v.", "to_out."]
                .iter()
                .any(|p| name.starts_with(p)),
            ParamScope::KeyValue => name.starts_with("to_k.") || name.starts_with("to_v."),
        }
    }
}

/// Affine map `y = x·weight + bias` with `weight: in × out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Matrix,
    /// `1 × out`
    pub bias: Matrix,
}

impl Linear {
    fn init(inp: usize, out: usize, std: f64, rng: &mut Rng) -> Self {
        Self {
            weight: rng.normal_matrix(inp, out, std),
            bias: Matrix::zeros(1, out),
        }
    }

    fn zeros_like(&self) -> Self {
        Self {
            weight: Matrix::zeros(self.weight.rows(), self.weight.cols()),
            bias: Matrix::zeros(1, self.bias.cols()),
        }
    }

    pub fn apply_into(&self, x: &[f64], out: &mut [f64]) {
        self.weight.vecmat_into(x, out);
        for (o, b) in out.iter_mut().zip(self.bias.as_slice()) {
            *o += b;
        }
    }
}

/// One residual cross-attention block followed by a residual SiLU FFN.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossAttnBlock {
    /// `hidden × d_out`
    pub to_q: Matrix,
    /// `d_in × d_out`
    pub to_k: Matrix,
    /// `d_in × d_out`
    pub to_v: Matrix,
    pub to_out: Linear,
    pub ff1: Linear,
    pub ff2: Linear,
}

/// Full parameter set of the toy denoiser.
///
/// Tensors are addressed by flat names: `input.weight`, `input.bias`,
/// `time_embed`, `to_q.{b}`, `to_k.{b}`, `to_v.{b}`, `to_out.{b}.weight`,
/// `to_out.{b}.bias`, `ff1.{b}.weight`, ..., `output.weight`, `output.bias`.
/// The same type doubles as a gradient accumulator.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserParams {
    pub dims: ModelDims,
    pub input: Linear,
    /// `(T + 1) × hidden`
    pub time_embed: Matrix,
    pub blocks: Vec<CrossAttnBlock>,
    pub output: Linear,
}

impl DenoiserParams {
    /// Random initialisation. `token_scale` is the standard deviation of concept
    /// token entries; key/value projections are scaled so that keys and values
    /// start with unit variance.
    pub fn init(dims: ModelDims, token_scale: f64, rng: &mut Rng) -> Self {
        let h = dims.hidden;
        let input = Linear::init(dims.data_dim, h, 1.0 / sqrt(dims.data_dim as f64), rng);
        let time_embed = rng.normal_matrix(dims.timesteps + 1, h, 0.5);
        let kv_std = 1.0 / (token_scale * sqrt(dims.d_in as f64));
        let blocks = (0..dims.blocks)
            .map(|_| CrossAttnBlock {
                to_q: rng.normal_matrix(h, dims.d_out, 1.0 / sqrt(h as f64)),
                to_k: rng.normal_matrix(dims.d_in, dims.d_out, kv_std),
                to_v: rng.normal_matrix(dims.d_in, dims.d_out, kv_std),
                to_out: Linear::init(dims.d_out, h, 1.0 / sqrt(dims.d_out as f64), rng),
                ff1: Linear::init(h, dims.ffn, 1.0 / sqrt(h as f64), rng),
                ff2: Linear::init(dims.ffn, h, 1.0 / sqrt(dims.ffn as f64), rng),
            })
            .collect();
        let output = Linear::init(h, dims.data_dim, 0.1 / sqrt(h as f64), rng);
        Self {
            dims,
            input,
            time_embed,
            blocks,
            output,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            dims: self.dims,
            input: self.input.zeros_like(),
            time_embed: Matrix::zeros(self.time_embed.rows(), self.time_embed.cols()),
            blocks: self
                .blocks
                .iter()
                .map(|b| CrossAttnBlock {
                    to_q: Matrix::zeros(b.to_q.rows(), b.to_q.cols()),
                    to_k: Matrix::zeros(b.to_k.rows(), b.to_k.cols()),
                    to_v: Matrix::zeros(b.to_v.rows(), b.to_v.cols()),
                    to_out: b.to_out.zeros_like(),
                    ff1: b.ff1.zeros_like(),
                    ff2: b.ff2.zeros_like(),
                })
                .collect(),
            output: self.output.zeros_like(),
        }
    }

    /// All tensors with their names, in canonical order.
    pub fn named(&self) -> Vec<(String, &Matrix)> {
        let mut out = Vec::with_capacity(5 + 9 * self.blocks.len());
        out.push(("input.weight".into(), &self.input.weight));
        out.push(("input.bias".into(), &self.input.bias));
        out.push(("time_embed".into(), &self.time_embed));
        for (b, blk) in self.blocks.iter().enumerate() {
            out.push((format!("to_q.{b}"), &blk.to_q));
            out.push((format!("to_k.{b}"), &blk.to_k));
            out.push((format!("to_v.{b}"), &blk.to_v));
            out.push((format!("to_out.{b}.weight"), &blk.to_out.weight));
            out.push((format!("to_out.{b}.bias"), &blk.to_out.bias));
            out.push((format!("ff1.{b}.weight"), &blk.ff1.weight));
            out.push((format!("ff1.{b}.bias"), &blk.ff1.bias));
            out.push((format!("ff2.{b}.weight"), &blk.ff2.weight));
            out.push((format!("ff2.{b}.bias"), &blk.ff2.bias));
        }
        out.push(("output.weight".into(), &self.output.weight));
        out.push(("output.bias".into(), &self.output.bias));
        out
    }

    /// Mutable counterpart of [`named`](Self::named), same order.
    pub fn named_mut(&mut self) -> Vec<(String, &mut Matrix)> {
        let mut out = Vec::with_capacity(5 + 9 * self.blocks.len());
        out.push(("input.weight".into(), &mut self.input.weight));
        out.push(("input.bias".into(), &mut self.input.bias));
        out.push(("time_embed".into(), &mut self.time_embed));
        for (b, blk) in self.blocks.iter_mut().enumerate() {
            out.push((format!("to_q.{b}"), &mut blk.to_q));
            out.push((format!("to_k.{b}"), &mut blk.to_k));
            out.push((format!("to_v.{b}"), &mut blk.to_v));
            out.push((format!("to_out.{b}.weight"), &mut blk.to_out.weight));
            out.push((format!("to_out.{b}.bias"), &mut blk.to_out.bias));
            out.push((format!("ff1.{b}.weight"), &mut blk.ff1.weight));
            out.push((format!("ff1.{b}.bias"), &mut blk.ff1.bias));
            out.push((format!("ff2.{b}.weight"), &mut blk.ff2.weight));
            out.push((format!("ff2.{b}.bias"), &mut blk.ff2.bias));
        }
        out.push(("output.weight".into(), &mut self.output.weight));
        out.push(("output.bias".into(), &mut self.output.bias));
        out
    }

    pub fn names(&self) -> Vec<String> {
        self.named().into_iter().map(|(n, _)| n).collect()
    }

    /// Names of the `to_k`/`to_v` layers, block by block.
    pub fn editable_layers(&self) -> Vec<String> {
        (0..self.blocks.len())
            .flat_map(|b| [format!("to_k.{b}"), format!("to_v.{b}")])
            .collect()
    }

    pub fn get(&self, name: &str) -> Result<&Matrix> {
        self.named()
            .into_iter()
            .find(|(n, _)| n == name)
            .map(|(_, m)| m)
            .ok_or_else(|| Error::UnknownLayer(name.into()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Matrix> {
        self.named_mut()
            .into_iter()
            .find(|(n, _)| n == name)
            .map(|(_, m)| m)
            .ok_or_else(|| Error::UnknownLayer(name.into()))
    }

    pub fn num_params(&self) -> usize {
        self.named().iter().map(|(_, m)| m.as_slice().len()).sum()
    }

    /// Concatenation of every tensor in canonical order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for (_, m) in self.named() {
            out.extend_from_slice(m.as_slice());
        }
        out
    }

    pub fn load_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(crate::shape_err!("{} values for {} parameters", flat.len(), self.num_params()));
        }
        let mut off = 0;
        for (_, m) in self.named_mut() {
            let n = m.as_slice().len();
            m.as_mut_slice().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }

    /// Returns a copy with `delta` added to the named layer.
    pub fn add_to_layer(&mut self, name: &str, delta: &Matrix) -> Result<()> {
        self.get_mut(name)?.add_assign(delta)
    }

    pub fn is_finite(&self) -> bool {
        self.named().iter().all(|(_, m)| m.is_finite())
    }

    /// Zeroes every tensor outside `scope`.
    pub fn mask_to_scope(&mut self, scope: ParamScope) {
        for (name, m) in self.named_mut() {
            if !scope.contains(&name) {
                m.fill(0.0);
            }
        }
    }

    /// Checks that another parameter set has identical tensor shapes.
    pub fn check_compatible(&self, other: &DenoiserParams) -> Result<()> {
        let a = self.named();
        let b = other.named();
        if a.len() != b.len() {
            return Err(crate::shape_err!("{} tensors vs {}", a.len(), b.len()));
        }
        for ((na, ma), (_, mb)) in a.iter().zip(&b) {
            if ma.shape() != mb.shape() {
                return Err(crate::shape_err!("`{na}`: {:?} vs {:?}", ma.shape(), mb.shape()));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_are_unique_and_editable_set_is_kv() {
        let p = DenoiserParams::init(ModelDims::default(), 1.0, &mut Rng::new(0));
        let names = p.names();
        for (i, n) in names.iter().enumerate() {
            assert!(!names[..i].contains(n), "duplicate {n}");
        }
        assert_eq!(p.editable_layers(), ["to_k.0", "to_v.0", "to_k.1", "to_v.1"]);
        for n in p.editable_layers() {
            assert_eq!(p.get(&n).unwrap().shape(), (64, 32));
            assert!(ParamScope::KeyValue.contains(&n));
        }
        assert!(ParamScope::CrossAttention.contains("to_out.1.bias"));
        assert!(!ParamScope::CrossAttention.contains("ff1.0.weight"));
        assert!(matches!(p.get("to_z.0"), Err(Error::UnknownLayer(_))));
    }

    #[test]
    fn flatten_roundtrip() {
        let p = DenoiserParams::init(ModelDims::default(), 1.0, &mut Rng::new(1));
        let mut q = p.zeros_like();
        q.load_flat(&p.flatten()).unwrap();
        assert_eq!(p, q);
    }
}
