use alloc::string::{String, ToString};
use alloc::vec::Vec;

use super::objective::{corr_value_grad, reg_grad, reg_value, CorrTarget};
use super::{draw_probes, run_loop, EraseHyper, EraseReport, LoopSpec, Objective, RegNorm};
use crate::concept_repr::CorrKind;
use crate::decoupling::{l1_mean, WeightIncrement};
use crate::diffusion::{ConceptBank, DenoiserParams, NoiseSchedule, ToyDataset};
use crate::numerics::{Adam, AdamConfig, Matrix, Rng};
use crate::{Error, Result};

fn edited(frozen: &DenoiserParams, delta: &[(String, Matrix)]) -> Result<DenoiserParams> {
    let mut p = frozen.clone();
    for (name, d) in delta {
        p.add_to_layer(name, d)?;
    }
    Ok(p)
}

/// Per-concept `(L_cor, ∂L_cor/∂Δθ)` for a shared dense increment.
fn terms(
    frozen: &DenoiserParams,
    delta: &[(String, Matrix)],
    blank: &Matrix,
    targets: &[CorrTarget],
    kind: CorrKind,
) -> Result<Vec<(f64, Vec<Matrix>)>> {
    let p = edited(frozen, delta)?;
    targets
        .iter()
        .map(|tg| {
            let (l, g) = corr_value_grad(frozen, &p, &tg.tokens, blank, &tg.probes, kind)?;
            let gd = delta
                .iter()
                .map(|(name, _)| g.get(name).cloned())
                .collect::<Result<Vec<_>>>()?;
            Ok((l, gd))
        })
        .collect()
}

/// `Σ η_i·L_cor(c_i, θ+Δθ) + λ·‖Δθ‖_p` and its gradient with respect to each
/// tensor of the dense increment `delta`, with `η` held fixed.
#[allow(clippy::too_many_arguments)]
pub fn gcirs_objective(
    frozen: &DenoiserParams,
    delta: &[(String, Matrix)],
    blank: &Matrix,
    targets: &[CorrTarget],
    eta: &[f64],
    lambda: f64,
    reg: RegNorm,
    kind: CorrKind,
) -> Result<(f64, Vec<Matrix>)> {
    if eta.len() != targets.len() {
        return Err(crate::shape_err!("{} weights for {} concepts", eta.len(), targets.len()));
    }
    let t = terms(frozen, delta, blank, targets, kind)?;
    let refs: Vec<&Matrix> = delta.iter().map(|(_, m)| m).collect();
    let mut value = lambda * reg_value(refs.iter().copied(), reg);
    let mut grads: Vec<Matrix> = reg_grad(&refs, reg).into_iter().map(|g| g.scale(lambda)).collect();
    for ((l, g), e) in t.iter().zip(eta) {
        value += e * l;
        for (acc, gi) in grads.iter_mut().zip(g) {
            acc.add_scaled(*e, gi)?;
        }
    }
    Ok((value, grads))
}

pub(super) struct Concept {
    pub name: String,
    pub tokens: Matrix,
}

pub(super) fn concepts_of(bank: &ConceptBank, names: &[&str]) -> Result<Vec<Concept>> {
    if names.is_empty() {
        return Err(Error::InvalidArgument("no concepts to erase".into()));
    }
    for (i, n) in names.iter().enumerate() {
        if names[..i].contains(n) {
            return Err(Error::DuplicateConcept((*n).to_string()));
        }
    }
    names
        .iter()
        .map(|n| {
            Ok(Concept {
                name: (*n).to_string(),
                tokens: bank.get(n)?.tokens.clone(),
            })
        })
        .collect()
}

struct Gcirs<'a> {
    frozen: &'a DenoiserParams,
    blank: &'a Matrix,
    concepts: &'a [Concept],
    data: &'a ToyDataset,
    schedule: &'a NoiseSchedule,
    rng: Rng,
    per_concept: usize,
    delta: Vec<(String, Matrix)>,
    adam: Adam,
    lambda: f64,
    reg: RegNorm,
    kind: CorrKind,
    cached: Vec<Vec<Matrix>>,
}

impl Objective for Gcirs<'_> {
    fn evaluate(&mut self) -> Result<Vec<f64>> {
        let mut targets = Vec::with_capacity(self.concepts.len());
        for c in self.concepts {
            targets.push(CorrTarget {
                name: c.name.clone(),
                tokens: c.tokens.clone(),
                probes: draw_probes(self.data, &c.name, self.schedule, self.per_concept, &mut self.rng)?,
            });
        }
        let t = terms(self.frozen, &self.delta, self.blank, &targets, self.kind)?;
        let (losses, grads) = t.into_iter().unzip();
        self.cached = grads;
        Ok(losses)
    }

    fn reg(&self) -> f64 {
        reg_value(self.delta.iter().map(|(_, m)| m), self.reg)
    }

    fn descend(&mut self, eta: &[f64]) -> Result<()> {
        let refs: Vec<&Matrix> = self.delta.iter().map(|(_, m)| m).collect();
        let mut total: Vec<Matrix> = reg_grad(&refs, self.reg)
            .into_iter()
            .map(|g| g.scale(self.lambda))
            .collect();
        for (g, e) in self.cached.iter().zip(eta) {
            for (acc, gi) in total.iter_mut().zip(g) {
                acc.add_scaled(*e, gi)?;
            }
        }
        self.adam.step(
            self.delta
                .iter_mut()
                .zip(&total)
                .map(|((_, d), g)| (d.as_mut_slice(), g.as_slice())),
        );
        Ok(())
    }
}

#[allow(clippy::too_many_arguments)]
pub(super) fn run_gcirs(
    theta_dm: &DenoiserParams,
    bank: &ConceptBank,
    forgotten: &[&str],
    data: &ToyDataset,
    schedule: &NoiseSchedule,
    hyper: &EraseHyper,
    lr: f64,
    stream: u64,
) -> Result<(WeightIncrement, EraseReport)> {
    hyper.validate()?;
    let concepts = concepts_of(bank, forgotten)?;
    let names: Vec<String> = concepts.iter().map(|c| c.name.clone()).collect();
    let delta: Vec<(String, Matrix)> = theta_dm
        .named()
        .into_iter()
        .filter(|(n, _)| hyper.scope.contains(n))
        .map(|(n, m)| (n, Matrix::zeros(m.rows(), m.cols())))
        .collect();
    let tau = if names.len() == 1 {
        hyper.tau_for(&names[0])
    } else {
        hyper.tau
    };
    let mut obj = Gcirs {
        frozen: theta_dm,
        blank: &bank.blank().tokens,
        concepts: &concepts,
        data,
        schedule,
        rng: Rng::stream(hyper.seed, stream),
        per_concept: hyper.probes_per_concept(concepts.len()),
        adam: Adam::new(AdamConfig::with_lr(lr), delta.iter().map(|(_, m)| m.as_slice().len())),
        delta,
        lambda: hyper.lambda,
        reg: hyper.reg,
        kind: hyper.corr,
        cached: Vec::new(),
    };
    let out = run_loop(
        &mut obj,
        &LoopSpec {
            names: &names,
            max_iters: hyper.max_iters,
            alpha: hyper.alpha,
            tau,
            balance: true,
        },
    )?;
    let delta = obj.delta;
    let report = EraseReport {
        concepts: names.clone(),
        alpha: hyper.alpha,
        tau,
        iters_run: out.iters_run,
        final_l_mom: out.final_l_mom,
        stop_reason: out.stop_reason,
        delta_norm: l1_mean(delta.iter().map(|(_, m)| m)),
        trace: out.trace,
    };
    Ok((WeightIncrement::dense(&names.join("+"), delta)?, report))
}

/// Concept-irrelevant unlearning with one dense increment over `hyper.scope`
/// shared by all `forgotten` concepts. `theta_dm` is never modified.
///
/// Probes are drawn from each concept's dataset class; the increment is named
/// after the concepts joined with `+`.
pub fn train_gcirs(
    theta_dm: &DenoiserParams,
    bank: &ConceptBank,
    forgotten: &[&str],
    data: &ToyDataset,
    schedule: &NoiseSchedule,
    hyper: &EraseHyper,
) -> Result<(WeightIncrement, EraseReport)> {
    run_gcirs(theta_dm, bank, forgotten, data, schedule, hyper, hyper.lr, 0)
}
