use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use super::gcirs::{concepts_of, Concept};
use super::objective::reg_value;
use super::{draw_probes, run_loop, EraseHyper, EraseReport, LoopSpec, Objective};
use crate::decoupling::{l1_mean, WeightIncrement};
use crate::diffusion::{backward, forward, ConceptBank, ContextKv, DenoiserParams, KvGrad, NoiseSchedule, ToyDataset};
use crate::numerics::{Adam, AdamConfig, Matrix, Rng};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum BaselineKind {
    /// Negative guidance away from the concept.
    Esd,
    /// Map the concept onto the blank prompt.
    Sdd,
    /// Map the concept onto an anchor concept.
    AbConcept,
    /// Suppress attention on the concept's tokens.
    Fmn,
}

/// Noise target for the targeted baselines, computed on the frozen model.
///
/// ESD: `(1+η)·ε(∅) − η·ε(c_f)`. SDD: `ε(∅)`. AbConcept: `ε(c*)`.
#[allow(clippy::too_many_arguments)]
pub fn baseline_target(
    kind: BaselineKind,
    theta_dm: &DenoiserParams,
    x_t: &[f64],
    t: usize,
    concept: &Matrix,
    blank: &Matrix,
    anchor: Option<&Matrix>,
    eta: f64,
) -> Result<Vec<f64>> {
    let eps = |tokens: &Matrix| -> Result<Vec<f64>> {
        let kv = ContextKv::new(theta_dm, tokens)?;
        Ok(forward(theta_dm, &kv, x_t, t)?.output)
    };
    match kind {
        BaselineKind::Esd => {
            let b = eps(blank)?;
            let c = eps(concept)?;
            Ok(b.iter().zip(&c).map(|(b, c)| (1.0 + eta) * b - eta * c).collect())
        }
        BaselineKind::Sdd => eps(blank),
        BaselineKind::AbConcept => {
            let a = anchor.ok_or_else(|| Error::InvalidArgument("AbConcept needs an anchor concept".into()))?;
            eps(a)
        }
        BaselineKind::Fmn => Err(Error::InvalidArgument("FMN has no noise target".into())),
    }
}

struct Baseline<'a> {
    kind: BaselineKind,
    frozen: &'a DenoiserParams,
    blank: &'a Matrix,
    concepts: &'a [Concept],
    anchors: Vec<Option<Matrix>>,
    data: &'a ToyDataset,
    schedule: &'a NoiseSchedule,
    rng: Rng,
    per_concept: usize,
    esd_eta: f64,
    delta: Vec<(String, Matrix)>,
    adam: Adam,
    cached: Vec<DenoiserParams>,
}

impl Baseline<'_> {
    fn targeted(
        &self,
        edited: &DenoiserParams,
        c: &Concept,
        anchor: Option<&Matrix>,
        probes: &[(Vec<f64>, usize)],
    ) -> Result<(f64, DenoiserParams)> {
        let kv = ContextKv::new(edited, &c.tokens)?;
        let mut kg = KvGrad::zeros(&kv);
        let mut grads = edited.zeros_like();
        let d = edited.dims.data_dim;
        let scale = 1.0 / (probes.len() * d) as f64;
        let mut loss = 0.0;
        for (x, t) in probes {
            let target = baseline_target(self.kind, self.frozen, x, *t, &c.tokens, self.blank, anchor, self.esd_eta)?;
            let tr = forward(edited, &kv, x, *t)?;
            let resid: Vec<f64> = tr.output.iter().zip(&target).map(|(p, q)| p - q).collect();
            loss += resid.iter().map(|r| r * r).sum::<f64>() * scale;
            let g: Vec<f64> = resid.iter().map(|r| 2.0 * r * scale).collect();
            backward(edited, &kv, &tr, &g, None, &mut grads, &mut kg);
        }
        kg.pull_back(&c.tokens, &mut grads)?;
        Ok((loss, grads))
    }

    /// Mean attention mass on the concept's tokens with the context `[∅; c_f]`.
    fn attention_mass(
        &self,
        edited: &DenoiserParams,
        c: &Concept,
        probes: &[(Vec<f64>, usize)],
    ) -> Result<(f64, DenoiserParams)> {
        let ctx = Matrix::vstack(&[self.blank, &c.tokens])?;
        let kv = ContextKv::new(edited, &ctx)?;
        let mut kg = KvGrad::zeros(&kv);
        let mut grads = edited.zeros_like();
        let blocks = edited.blocks.len();
        let skip = self.blank.rows();
        let scale = 1.0 / (probes.len() * blocks) as f64;
        let zero_out = vec![0.0; edited.dims.data_dim];
        let d_attn: Vec<Vec<f64>> = (0..blocks)
            .map(|_| (0..ctx.rows()).map(|j| if j >= skip { scale } else { 0.0 }).collect())
            .collect();
        let mut loss = 0.0;
        for (x, t) in probes {
            let tr = forward(edited, &kv, x, *t)?;
            for b in 0..blocks {
                loss += tr.attention(b)[skip..].iter().sum::<f64>() * scale;
            }
            backward(edited, &kv, &tr, &zero_out, Some(&d_attn), &mut grads, &mut kg);
        }
        kg.pull_back(&ctx, &mut grads)?;
        Ok((loss, grads))
    }
}

impl Objective for Baseline<'_> {
    fn evaluate(&mut self) -> Result<Vec<f64>> {
        let mut edited = self.frozen.clone();
        for (name, d) in &self.delta {
            edited.add_to_layer(name, d)?;
        }
        let mut losses = Vec::with_capacity(self.concepts.len());
        self.cached.clear();
        for (i, c) in self.concepts.iter().enumerate() {
            let probes = draw_probes(self.data, &c.name, self.schedule, self.per_concept, &mut self.rng)?;
            let (l, g) = match self.kind {
                BaselineKind::Fmn => self.attention_mass(&edited, c, &probes)?,
                _ => self.targeted(&edited, c, self.anchors[i].as_ref(), &probes)?,
            };
            losses.push(l);
            self.cached.push(g);
        }
        Ok(losses)
    }

    fn reg(&self) -> f64 {
        reg_value(self.delta.iter().map(|(_, m)| m), super::RegNorm::L1Mean)
    }

    fn descend(&mut self, eta: &[f64]) -> Result<()> {
        let mut total: Vec<Matrix> = self.delta.iter().map(|(_, m)| Matrix::zeros(m.rows(), m.cols())).collect();
        for (g, e) in self.cached.iter().zip(eta) {
            for ((name, _), acc) in self.delta.iter().zip(total.iter_mut()) {
                acc.add_scaled(*e, g.get(name)?)?;
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

/// Trains a dense increment over `hyper.scope` for a fixed number of
/// iterations with one of the baseline objectives.
///
/// The loss of each concept is logged in the `l_cor` column of the trace with
/// unit weights. There is no early stop and no weight regulariser.
#[allow(clippy::too_many_arguments)]
pub fn train_baseline(
    kind: BaselineKind,
    theta_dm: &DenoiserParams,
    bank: &ConceptBank,
    forgotten: &[&str],
    data: &ToyDataset,
    schedule: &NoiseSchedule,
    hyper: &EraseHyper,
    iters: usize,
) -> Result<(WeightIncrement, EraseReport)> {
    hyper.validate()?;
    let concepts = concepts_of(bank, forgotten)?;
    let anchors = concepts
        .iter()
        .map(|c| match (kind, hyper.anchor_for(&c.name)) {
            (BaselineKind::AbConcept, None) => Err(Error::InvalidArgument(alloc::format!(
                "AbConcept needs an anchor for `{}`",
                c.name
            ))),
            (BaselineKind::AbConcept, Some(a)) => Ok(Some(bank.get(a)?.tokens.clone())),
            _ => Ok(None),
        })
        .collect::<Result<Vec<_>>>()?;
    let names: Vec<String> = concepts.iter().map(|c| c.name.clone()).collect();
    let delta: Vec<(String, Matrix)> = theta_dm
        .named()
        .into_iter()
        .filter(|(n, _)| hyper.scope.contains(n))
        .map(|(n, m)| (n, Matrix::zeros(m.rows(), m.cols())))
        .collect();
    let mut obj = Baseline {
        kind,
        frozen: theta_dm,
        blank: &bank.blank().tokens,
        concepts: &concepts,
        anchors,
        data,
        schedule,
        rng: Rng::stream(hyper.seed, 0),
        per_concept: hyper.probes_per_concept(concepts.len()),
        esd_eta: hyper.esd_eta,
        adam: Adam::new(AdamConfig::with_lr(hyper.lr), delta.iter().map(|(_, m)| m.as_slice().len())),
        delta,
        cached: Vec::new(),
    };
    let out = run_loop(
        &mut obj,
        &LoopSpec {
            names: &names,
            max_iters: iters,
            alpha: hyper.alpha,
            tau: f64::NEG_INFINITY,
            balance: false,
        },
    )?;
    let delta = obj.delta;
    let report = EraseReport {
        concepts: names.clone(),
        alpha: hyper.alpha,
        tau: f64::NEG_INFINITY,
        iters_run: out.iters_run,
        final_l_mom: out.final_l_mom,
        stop_reason: out.stop_reason,
        delta_norm: l1_mean(delta.iter().map(|(_, m)| m)),
        trace: out.trace,
    };
    Ok((WeightIncrement::dense(&names.join("+"), delta)?, report))
}
