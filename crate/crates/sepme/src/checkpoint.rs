//! Binary tensor container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic   "SEPME\x01"
//! u32     record count
//! record  u32 name length, UTF-8 name, u8 dtype code, u32 ndim,
//!         ndim × u64 shape, row-major payload
//! ```
//!
//! The only dtype is `1` (float64). Scalars have `ndim = 0` and one value.
//! Every checkpoint has a `<file>.meta.toml` sidecar, see [`crate::meta`].

use std::collections::BTreeSet;
use std::fs;
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};

use sepme_core::decoupling::{ConstraintSystem, EraserSet, IncrementForm, WeightIncrement};
use sepme_core::diffusion::{DenoiserParams, ModelDims};
use sepme_core::numerics::Matrix;
use sepme_core::Rng;

use crate::error::{CliError, CliResult};

pub const MAGIC: &[u8; 6] = b"SEPME\x01";
pub const DTYPE_F64: u8 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn matrix(name: impl Into<String>, m: &Matrix) -> Self {
        Self {
            name: name.into(),
            shape: vec![m.rows(), m.cols()],
            data: m.as_slice().to_vec(),
        }
    }

    pub fn scalar(name: impl Into<String>, v: f64) -> Self {
        Self {
            name: name.into(),
            shape: Vec::new(),
            data: vec![v],
        }
    }

    pub fn to_matrix(&self) -> CliResult<Matrix> {
        match self.shape[..] {
            [r, c] => Ok(Matrix::from_vec(r, c, self.data.clone())?),
            _ => Err(CliError::Format(format!(
                "`{}` has shape {:?}, expected a matrix",
                self.name, self.shape
            ))),
        }
    }

    pub fn to_scalar(&self) -> CliResult<f64> {
        match (self.shape.len(), self.data.as_slice()) {
            (0, [v]) => Ok(*v),
            _ => Err(CliError::Format(format!("`{}` is not a scalar", self.name))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub tensors: Vec<Tensor>,
}

impl Checkpoint {
    pub fn push(&mut self, t: Tensor) {
        self.tensors.push(t);
    }

    pub fn get(&self, name: &str) -> CliResult<&Tensor> {
        self.tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| CliError::Format(format!("checkpoint has no tensor `{name}`")))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.iter().map(|t| t.name.as_str())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            out.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.push(DTYPE_F64);
            out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
            for d in &t.shape {
                out.extend_from_slice(&(*d as u64).to_le_bytes());
            }
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> CliResult<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 6];
        read_exact(&mut r, &mut magic)?;
        if &magic != MAGIC {
            return Err(CliError::Format("bad magic bytes, not a SEPME checkpoint".into()));
        }
        let count = read_u32(&mut r)? as usize;
        let mut tensors = Vec::new();
        let mut seen = BTreeSet::new();
        for _ in 0..count {
            let len = read_u32(&mut r)? as usize;
            if len > r.len() {
                return Err(truncated());
            }
            let (name, rest) = r.split_at(len);
            r = rest;
            let name = String::from_utf8(name.to_vec())
                .map_err(|_| CliError::Format("tensor name is not UTF-8".into()))?;
            let mut code = [0u8];
            read_exact(&mut r, &mut code)?;
            if code[0] != DTYPE_F64 {
                return Err(CliError::Format(format!("`{name}` has unsupported dtype code {}", code[0])));
            }
            let ndim = read_u32(&mut r)? as usize;
            if ndim > 8 {
                return Err(CliError::Format(format!("`{name}` has {ndim} dimensions")));
            }
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(usize::try_from(read_u64(&mut r)?).map_err(|_| truncated())?);
            }
            let n = shape
                .iter()
                .try_fold(1usize, |a, d| a.checked_mul(*d))
                .filter(|n| n.checked_mul(8).is_some_and(|b| b <= r.len()))
                .ok_or_else(truncated)?;
            let mut data = Vec::with_capacity(n);
            for _ in 0..n {
                data.push(f64::from_le_bytes(take8(&mut r)?));
            }
            if !seen.insert(name.clone()) {
                return Err(CliError::Format(format!("duplicate tensor `{name}`")));
            }
            tensors.push(Tensor { name, shape, data });
        }
        if !r.is_empty() {
            return Err(CliError::Format(format!("{} trailing bytes", r.len())));
        }
        Ok(Self { tensors })
    }

    pub fn save(&self, path: &Path) -> CliResult<()> {
        let mut f = fs::File::create(path).map_err(|e| CliError::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| CliError::io(path, e))
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let mut bytes = Vec::new();
        fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| CliError::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            CliError::Format(m) => CliError::Format(format!("{}: {m}", path.display())),
            e => e,
        })
    }

    /// Names of tensors that are missing from one side or differ in value.
    pub fn diff(&self, other: &Checkpoint) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for t in &self.tensors {
            match other.tensors.iter().find(|o| o.name == t.name) {
                Some(o) if o == t => {}
                _ => out.push(t.name.clone()),
            }
        }
        for o in &other.tensors {
            if !self.tensors.iter().any(|t| t.name == o.name) {
                out.push(o.name.clone());
            }
        }
        out
    }
}

fn truncated() -> CliError {
    CliError::Format("checkpoint is truncated".into())
}

fn read_exact(r: &mut &[u8], buf: &mut [u8]) -> CliResult<()> {
    io::Read::read_exact(r, buf).map_err(|_| truncated())
}

fn take8(r: &mut &[u8]) -> CliResult<[u8; 8]> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(b)
}

fn read_u32(r: &mut &[u8]) -> CliResult<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut &[u8]) -> CliResult<u64> {
    Ok(u64::from_le_bytes(take8(r)?))
}

pub fn sidecar(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta.toml");
    PathBuf::from(s)
}

pub fn params_to_checkpoint(p: &DenoiserParams) -> Checkpoint {
    Checkpoint {
        tensors: p.named().into_iter().map(|(n, m)| Tensor::matrix(n, m)).collect(),
    }
}

/// Rebuilds parameters of the given dimensions; every layer must be present
/// with its expected shape and no extra tensors are allowed.
pub fn params_from_checkpoint(ck: &Checkpoint, dims: ModelDims) -> CliResult<DenoiserParams> {
    let mut p = DenoiserParams::init(dims, 1.0, &mut Rng::new(0));
    let expected = p.names();
    for (name, m) in p.named_mut() {
        let t = ck.get(&name)?.to_matrix()?;
        if t.shape() != m.shape() {
            return Err(CliError::Format(format!(
                "`{name}` has shape {:?}, model expects {:?}",
                t.shape(),
                m.shape()
            )));
        }
        *m = t;
    }
    if let Some(extra) = ck.names().find(|n| !expected.iter().any(|e| e == n)) {
        return Err(CliError::Format(format!("unexpected tensor `{extra}` in model checkpoint")));
    }
    Ok(p)
}

/// Keys holding trainable deltas, `inc/<concept>/<layer>/w` or `/delta`.
pub fn is_delta_key(key: &str) -> bool {
    key.starts_with("inc/") && (key.ends_with("/w") || key.ends_with("/delta"))
}

/// Layer a delta key refers to.
pub fn delta_layer(key: &str) -> Option<&str> {
    let rest = key.strip_prefix("inc/")?;
    let rest = rest.strip_suffix("/w").or_else(|| rest.strip_suffix("/delta"))?;
    rest.rsplit('/').next()
}

pub fn increment_to_checkpoint(inc: &WeightIncrement) -> Checkpoint {
    let c = inc.concept();
    let mut ck = Checkpoint::default();
    match inc.form() {
        IncrementForm::Decoupled { constraint, beta, w } => {
            for (layer, m) in w {
                ck.push(Tensor::matrix(format!("inc/{c}/{layer}/w"), m));
            }
            ck.push(Tensor::matrix(format!("inc/{c}/S_p"), &constraint.basis));
            ck.push(Tensor::matrix(format!("inc/{c}/A"), &constraint.a));
            ck.push(Tensor::scalar("beta", *beta));
        }
        IncrementForm::Dense { layers } => {
            for (layer, m) in layers {
                ck.push(Tensor::matrix(format!("inc/{c}/{layer}/delta"), m));
            }
        }
    }
    ck
}

/// Inverse of [`increment_to_checkpoint`]. `covered` lists the prompts stacked
/// in the constraint matrix and is only used for decoupled increments.
pub fn increment_from_checkpoint(ck: &Checkpoint, concept: &str, covered: &[String]) -> CliResult<WeightIncrement> {
    let prefix = format!("inc/{concept}/");
    let mut w = Vec::new();
    let mut dense = Vec::new();
    for t in &ck.tensors {
        let Some(rest) = t.name.strip_prefix(&prefix) else {
            if t.name != "beta" {
                return Err(CliError::Format(format!("`{}` does not belong to increment `{concept}`", t.name)));
            }
            continue;
        };
        if let Some(layer) = rest.strip_suffix("/w") {
            w.push((layer.to_string(), t.to_matrix()?));
        } else if let Some(layer) = rest.strip_suffix("/delta") {
            dense.push((layer.to_string(), t.to_matrix()?));
        } else if rest != "S_p" && rest != "A" {
            return Err(CliError::Format(format!("unexpected tensor `{}`", t.name)));
        }
    }
    let form = match (w.is_empty(), dense.is_empty()) {
        (false, true) => {
            let basis = ck.get(&format!("{prefix}S_p"))?.to_matrix()?;
            let a = ck.get(&format!("{prefix}A"))?.to_matrix()?;
            IncrementForm::Decoupled {
                constraint: ConstraintSystem {
                    erased: concept.to_string(),
                    covered: covered.to_vec(),
                    rank: basis.rows().saturating_sub(basis.cols()),
                    a,
                    basis,
                },
                beta: ck.get("beta")?.to_scalar()?,
                w,
            }
        }
        (true, false) => IncrementForm::Dense { layers: dense },
        _ => {
            return Err(CliError::Format(format!(
                "increment `{concept}` must hold either `w` or `delta` tensors"
            )))
        }
    };
    Ok(WeightIncrement::from_form(concept, form)?)
}

/// `θ_dm` plus the realised sum of every increment in the set, for diffing
/// against the base checkpoint.
pub fn composed_checkpoint(set: &EraserSet, subset: &[&str]) -> CliResult<Checkpoint> {
    Ok(params_to_checkpoint(&set.apply(subset)?))
}
