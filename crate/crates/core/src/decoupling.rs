//! Null-space weight decoupling and the erase/restore algebra.
//!
//! Each erased concept owns one [`WeightIncrement`] on the `to_k`/`to_v`
//! layers. A decoupled increment is parameterised as `Δθ = β·S_p·wᵀ`, where the
//! columns of `S_p` span the null space of the constraint matrix `A` built from
//! the blank prompt and every other known concept. Any `w` therefore leaves the
//! keys and values of those prompts unchanged, so increments can be added or
//! removed independently.

use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::diffusion::{ConceptEmbedding, ContextKv, DenoiserParams, forward};
use crate::numerics::math::max_abs_diff;
use crate::numerics::{nullspace, Matrix, DEFAULT_RANK_TOL};
use crate::{Error, Result};

/// Constraint matrix for one erased concept and its null-space basis.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstraintSystem {
    pub erased: String,
    /// Prompts whose tokens are stacked in `a`, blank first.
    pub covered: Vec<String>,
    /// `(covered · tokens) × d_in`
    pub a: Matrix,
    /// `S_p`: `d_in × (d_in − rank)`, unit-norm columns.
    pub basis: Matrix,
    pub rank: usize,
}

impl ConstraintSystem {
    /// `max |A·S_p|`
    pub fn residual(&self) -> f64 {
        self.a.matmul(&self.basis).map(|m| m.max_abs()).unwrap_or(f64::INFINITY)
    }

    pub fn null_dim(&self) -> usize {
        self.basis.cols()
    }
}

/// Builds `A = [c_∅; c_j for j ≠ erased]` over `concepts` and solves for `S_p`.
pub fn build_constraint(
    concepts: &[&ConceptEmbedding],
    erased: usize,
    blank: &ConceptEmbedding,
) -> Result<ConstraintSystem> {
    if erased >= concepts.len() {
        return Err(Error::InvalidArgument(alloc::format!(
            "erased index {erased} out of range for {} concepts",
            concepts.len()
        )));
    }
    let mut parts = Vec::with_capacity(concepts.len());
    let mut covered = Vec::with_capacity(concepts.len());
    parts.push(&blank.tokens);
    covered.push(blank.name.clone());
    for (j, c) in concepts.iter().enumerate() {
        if j != erased {
            parts.push(&c.tokens);
            covered.push(c.name.clone());
        }
    }
    let a = Matrix::vstack(&parts)?;
    let ns = nullspace(&a, DEFAULT_RANK_TOL)?;
    Ok(ConstraintSystem {
        erased: concepts[erased].name.clone(),
        covered,
        a,
        basis: ns.basis,
        rank: ns.rank,
    })
}

/// `Δθ = (w·(β·S_pᵀ))ᵀ = β·S_p·wᵀ`, shape `d_in × d_out`.
pub fn realize_decoupled(basis: &Matrix, beta: f64, w: &Matrix) -> Result<Matrix> {
    basis.scale(beta).matmul(&w.transpose())
}

/// Storage form of an increment.
#[derive(Debug, Clone, PartialEq)]
pub enum IncrementForm {
    /// `Δθ_ℓ = β·S_p·w_ℓᵀ` on `to_k`/`to_v` layers, sharing one constraint.
    Decoupled {
        constraint: ConstraintSystem,
        beta: f64,
        w: Vec<(String, Matrix)>,
    },
    /// Unconstrained dense deltas (G-CiRs and the baselines).
    Dense { layers: Vec<(String, Matrix)> },
}

/// The weight change that erases one concept.
///
/// The dense realisation of every layer is cached and refreshed whenever `w`
/// changes.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightIncrement {
    concept: String,
    form: IncrementForm,
    realized: Vec<(String, Matrix)>,
}

impl WeightIncrement {
    /// Decoupled increment with every `w` initialised to zero.
    pub fn decoupled(
        concept: &str,
        constraint: ConstraintSystem,
        beta: f64,
        layers: &[String],
        d_out: usize,
    ) -> Result<Self> {
        let k = constraint.null_dim();
        let w = layers
            .iter()
            .map(|l| (l.clone(), Matrix::zeros(d_out, k)))
            .collect();
        Self::from_form(
            concept,
            IncrementForm::Decoupled {
                constraint,
                beta,
                w,
            },
        )
    }

    pub fn dense(concept: &str, layers: Vec<(String, Matrix)>) -> Result<Self> {
        Self::from_form(concept, IncrementForm::Dense { layers })
    }

    pub fn from_form(concept: &str, form: IncrementForm) -> Result<Self> {
        let mut inc = Self {
            concept: concept.to_string(),
            form,
            realized: Vec::new(),
        };
        inc.refresh()?;
        Ok(inc)
    }

    fn refresh(&mut self) -> Result<()> {
        self.realized = match &self.form {
            IncrementForm::Decoupled {
                constraint, beta, w, ..
            } => w
                .iter()
                .map(|(name, w)| {
                    if w.rows() == 0 || w.cols() != constraint.null_dim() {
                        return Err(crate::shape_err!(
                            "w for `{name}` is {:?}, null space has {} columns",
                            w.shape(),
                            constraint.null_dim()
                        ));
                    }
                    Ok((name.clone(), realize_decoupled(&constraint.basis, *beta, w)?))
                })
                .collect::<Result<_>>()?,
            IncrementForm::Dense { layers } => layers.clone(),
        };
        Ok(())
    }

    pub fn concept(&self) -> &str {
        &self.concept
    }

    pub fn form(&self) -> &IncrementForm {
        &self.form
    }

    pub fn is_decoupled(&self) -> bool {
        matches!(self.form, IncrementForm::Decoupled { .. })
    }

    pub fn constraint(&self) -> Option<&ConstraintSystem> {
        match &self.form {
            IncrementForm::Decoupled { constraint, .. } => Some(constraint),
            IncrementForm::Dense { .. } => None,
        }
    }

    pub fn beta(&self) -> Option<f64> {
        match &self.form {
            IncrementForm::Decoupled { beta, .. } => Some(*beta),
            IncrementForm::Dense { .. } => None,
        }
    }

    /// Names of the layers this increment touches.
    pub fn layers(&self) -> Vec<&str> {
        self.realized.iter().map(|(n, _)| n.as_str()).collect()
    }

    /// Dense `Δθ` for one layer.
    pub fn realize(&self, layer: &str) -> Result<&Matrix> {
        self.realized
            .iter()
            .find(|(n, _)| n == layer)
            .map(|(_, m)| m)
            .ok_or_else(|| Error::UnknownLayer(layer.to_string()))
    }

    pub fn realized(&self) -> &[(String, Matrix)] {
        &self.realized
    }

    /// Combination weights of a decoupled increment.
    pub fn w(&self) -> Option<&[(String, Matrix)]> {
        match &self.form {
            IncrementForm::Decoupled { w, .. } => Some(w),
            IncrementForm::Dense { .. } => None,
        }
    }

    /// Mutates the trainable tensors (`w` or the dense deltas) and refreshes
    /// the realised cache.
    pub fn update<F>(&mut self, f: F) -> Result<()>
    where
        F: FnOnce(&mut [(String, Matrix)]),
    {
        match &mut self.form {
            IncrementForm::Decoupled { w, .. } => f(w),
            IncrementForm::Dense { layers } => f(layers),
        }
        self.refresh()
    }

    /// `Σ_ℓ ‖Δθ_ℓ‖₁ / M` over the realised layers.
    pub fn norm_p(&self) -> f64 {
        l1_mean(self.realized.iter().map(|(_, m)| m))
    }

    /// `max_ℓ max |c·Δθ_ℓ|` for the given prompt tokens.
    pub fn token_response(&self, tokens: &Matrix) -> Result<f64> {
        let mut worst = 0.0_f64;
        for (_, d) in &self.realized {
            worst = worst.max(tokens.matmul(d)?.max_abs());
        }
        Ok(worst)
    }
}

/// Mean ℓ1 norm over a set of layers; zero for an empty set.
pub fn l1_mean<'a>(layers: impl IntoIterator<Item = &'a Matrix>) -> f64 {
    let (sum, count) = layers
        .into_iter()
        .fold((0.0, 0usize), |(s, n), m| (s + m.l1_norm(), n + 1));
    if count == 0 {
        0.0
    } else {
        sum / count as f64
    }
}

/// Frozen base parameters plus an ordered collection of per-concept increments.
#[derive(Debug, Clone, PartialEq)]
pub struct EraserSet {
    base: DenoiserParams,
    increments: Vec<WeightIncrement>,
}

impl EraserSet {
    pub fn new(base: DenoiserParams) -> Self {
        Self {
            base,
            increments: Vec::new(),
        }
    }

    pub fn base(&self) -> &DenoiserParams {
        &self.base
    }

    pub fn increments(&self) -> &[WeightIncrement] {
        &self.increments
    }

    pub fn names(&self) -> Vec<&str> {
        self.increments.iter().map(|i| i.concept()).collect()
    }

    pub fn get(&self, concept: &str) -> Result<&WeightIncrement> {
        self.increments
            .iter()
            .find(|i| i.concept == concept)
            .ok_or_else(|| Error::UnknownConcept(concept.to_string()))
    }

    /// Adds an increment; its layers must exist in the base with matching shapes.
    pub fn insert(&mut self, inc: WeightIncrement) -> Result<()> {
        if self.increments.iter().any(|i| i.concept == inc.concept) {
            return Err(Error::DuplicateConcept(inc.concept.clone()));
        }
        for (layer, d) in inc.realized() {
            let target = self.base.get(layer)?;
            if target.shape() != d.shape() {
                return Err(crate::shape_err!(
                    "increment `{}` layer `{layer}` is {:?}, base {:?}",
                    inc.concept,
                    d.shape(),
                    target.shape()
                ));
            }
        }
        self.increments.push(inc);
        Ok(())
    }

    pub fn remove(&mut self, concept: &str) -> Result<WeightIncrement> {
        let pos = self
            .increments
            .iter()
            .position(|i| i.concept == concept)
            .ok_or_else(|| Error::UnknownConcept(concept.to_string()))?;
        Ok(self.increments.remove(pos))
    }

    fn resolve(&self, subset: &[&str]) -> Result<Vec<usize>> {
        let mut picked: Vec<usize> = Vec::with_capacity(subset.len());
        for name in subset {
            let idx = self
                .increments
                .iter()
                .position(|i| i.concept == *name)
                .ok_or_else(|| Error::UnknownConcept((*name).to_string()))?;
            if picked.contains(&idx) {
                return Err(Error::DuplicateConcept((*name).to_string()));
            }
            picked.push(idx);
        }
        // Summation always follows set order, so the result does not depend on
        // the order of `subset`.
        picked.sort_unstable();
        Ok(picked)
    }

    /// `θ_dm + Σ_{i ∈ subset} Δθ_i`. The base is not modified.
    pub fn apply(&self, subset: &[&str]) -> Result<DenoiserParams> {
        let picked = self.resolve(subset)?;
        let mut out = self.base.clone();
        for idx in picked {
            for (layer, d) in self.increments[idx].realized() {
                out.add_to_layer(layer, d)?;
            }
        }
        Ok(out)
    }

    /// `max |ε_{θ+ΣΔθ}(x_t, c, t) − ε_θ(x_t, c, t)|` over the given probes.
    pub fn restoration_check(&self, erased: &[&str], probe: &Matrix, probes: &[(Vec<f64>, usize)]) -> Result<f64> {
        let edited = self.apply(erased)?;
        max_prediction_gap(&self.base, &edited, probe, probes)
    }
}

/// Largest ℓ∞ difference between two models' predictions on one prompt.
pub fn max_prediction_gap(
    a: &DenoiserParams,
    b: &DenoiserParams,
    tokens: &Matrix,
    probes: &[(Vec<f64>, usize)],
) -> Result<f64> {
    let ka = ContextKv::new(a, tokens)?;
    let kb = ContextKv::new(b, tokens)?;
    let mut worst = 0.0_f64;
    for (x, t) in probes {
        let ya = forward(a, &ka, x, *t)?.output;
        let yb = forward(b, &kb, x, *t)?.output;
        worst = worst.max(max_abs_diff(&ya, &yb));
    }
    Ok(worst)
}
