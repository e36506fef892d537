use alloc::string::String;
use alloc::vec::Vec;

use super::gcirs::{concepts_of, run_gcirs, Concept};
use super::objective::{corr_value_grad, reg_grad, reg_value, CorrTarget};
use super::{draw_probes, run_loop, EraseHyper, EraseReport, LoopSpec, Objective, RegNorm};
use crate::concept_repr::CorrKind;
use crate::decoupling::{build_constraint, l1_mean, EraserSet, WeightIncrement};
use crate::diffusion::{ConceptBank, ConceptEmbedding, DenoiserParams, NoiseSchedule, ParamScope, ToyDataset};
use crate::numerics::{Adam, AdamConfig, Matrix, Rng};
use crate::{Error, Result};

/// How several concepts are erased.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum SepmeMode {
    /// All increments optimised jointly under one momentum statistic.
    Simultaneous,
    /// Each increment optimised on its own, every concept known up front.
    #[default]
    Separate,
    /// Concepts arrive one at a time; step `t` only knows concepts before it.
    Iterative,
}

#[derive(Debug, Clone)]
pub struct SepmeOutcome {
    pub set: EraserSet,
    /// One report per concept, or a single joint report in simultaneous mode.
    pub reports: Vec<EraseReport>,
}

/// `(L_cor, ∂L_cor/∂w_ℓ)` for one decoupled increment.
fn inc_terms(
    frozen: &DenoiserParams,
    inc: &WeightIncrement,
    blank: &Matrix,
    target: &CorrTarget,
    kind: CorrKind,
) -> Result<(f64, Vec<Matrix>)> {
    let (Some(cs), Some(beta), Some(ws)) = (inc.constraint(), inc.beta(), inc.w()) else {
        return Err(Error::InvalidArgument("SepME needs a decoupled increment".into()));
    };
    let mut p = frozen.clone();
    for (layer, d) in inc.realized() {
        p.add_to_layer(layer, d)?;
    }
    let (l, g) = corr_value_grad(frozen, &p, &target.tokens, blank, &target.probes, kind)?;
    let dw = ws
        .iter()
        .map(|(layer, _)| Ok(g.get(layer)?.t_matmul(&cs.basis)?.scale(beta)))
        .collect::<Result<Vec<_>>>()?;
    Ok((l, dw))
}

/// `Σ η_i·L_cor(c_i, θ+Δθ_i) + λ·‖W‖_p` and its gradient with respect to every
/// `w` matrix, increment by increment, with `η` held fixed. `W` collects the
/// `w` matrices of all increments.
#[allow(clippy::too_many_arguments)]
pub fn sepme_objective(
    frozen: &DenoiserParams,
    incs: &[WeightIncrement],
    blank: &Matrix,
    targets: &[CorrTarget],
    eta: &[f64],
    lambda: f64,
    reg: RegNorm,
    kind: CorrKind,
) -> Result<(f64, Vec<Vec<Matrix>>)> {
    if incs.len() != targets.len() || eta.len() != targets.len() {
        return Err(crate::shape_err!(
            "{} increments, {} targets, {} weights",
            incs.len(),
            targets.len(),
            eta.len()
        ));
    }
    let all_w = all_w(incs);
    let mut value = lambda * reg_value(all_w.iter().copied(), reg);
    let mut reg_g = reg_grad(&all_w, reg).into_iter();
    let mut grads = Vec::with_capacity(incs.len());
    for ((inc, tg), e) in incs.iter().zip(targets).zip(eta) {
        let (l, dw) = inc_terms(frozen, inc, blank, tg, kind)?;
        value += e * l;
        let mut gi = Vec::with_capacity(dw.len());
        for d in dw {
            let mut g = reg_g.next().expect("one per w").scale(lambda);
            g.add_scaled(*e, &d)?;
            gi.push(g);
        }
        grads.push(gi);
    }
    Ok((value, grads))
}

fn all_w(incs: &[WeightIncrement]) -> Vec<&Matrix> {
    incs.iter()
        .flat_map(|i| i.w().unwrap_or(&[]).iter().map(|(_, m)| m))
        .collect()
}

struct Sepme<'a> {
    frozen: &'a DenoiserParams,
    blank: &'a Matrix,
    concepts: &'a [Concept],
    data: &'a ToyDataset,
    schedule: &'a NoiseSchedule,
    rng: Rng,
    per_concept: usize,
    incs: Vec<WeightIncrement>,
    adams: Vec<Adam>,
    lambda: f64,
    reg: RegNorm,
    kind: CorrKind,
    cached: Vec<Vec<Matrix>>,
}

impl Objective for Sepme<'_> {
    fn evaluate(&mut self) -> Result<Vec<f64>> {
        let mut losses = Vec::with_capacity(self.concepts.len());
        self.cached.clear();
        for (c, inc) in self.concepts.iter().zip(&self.incs) {
            let target = CorrTarget {
                name: c.name.clone(),
                tokens: c.tokens.clone(),
                probes: draw_probes(self.data, &c.name, self.schedule, self.per_concept, &mut self.rng)?,
            };
            let (l, dw) = inc_terms(self.frozen, inc, self.blank, &target, self.kind)?;
            losses.push(l);
            self.cached.push(dw);
        }
        Ok(losses)
    }

    fn reg(&self) -> f64 {
        reg_value(all_w(&self.incs), self.reg)
    }

    fn descend(&mut self, eta: &[f64]) -> Result<()> {
        let reg_g = reg_grad(&all_w(&self.incs), self.reg);
        let mut reg_g = reg_g.into_iter();
        for (k, inc) in self.incs.iter_mut().enumerate() {
            let mut total = Vec::with_capacity(self.cached[k].len());
            for d in &self.cached[k] {
                let mut g = reg_g.next().expect("one per w").scale(self.lambda);
                g.add_scaled(eta[k], d)?;
                total.push(g);
            }
            let adam = &mut self.adams[k];
            inc.update(|ws| {
                adam.step(
                    ws.iter_mut()
                        .zip(&total)
                        .map(|((_, w), g)| (w.as_mut_slice(), g.as_slice())),
                )
            })?;
        }
        Ok(())
    }
}

struct Job<'a> {
    concepts: &'a [Concept],
    incs: Vec<WeightIncrement>,
    tau: f64,
    stream: u64,
}

fn run_job(
    theta_dm: &DenoiserParams,
    blank: &Matrix,
    data: &ToyDataset,
    schedule: &NoiseSchedule,
    hyper: &EraseHyper,
    per_concept: usize,
    job: Job<'_>,
) -> Result<(Vec<WeightIncrement>, EraseReport)> {
    let names: Vec<String> = job.concepts.iter().map(|c| c.name.clone()).collect();
    let adams = job
        .incs
        .iter()
        .map(|i| {
            Adam::new(
                AdamConfig::with_lr(hyper.lr),
                i.w().unwrap_or(&[]).iter().map(|(_, m)| m.as_slice().len()),
            )
        })
        .collect();
    let mut obj = Sepme {
        frozen: theta_dm,
        blank,
        concepts: job.concepts,
        data,
        schedule,
        rng: Rng::stream(hyper.seed, job.stream),
        per_concept,
        incs: job.incs,
        adams,
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
            tau: job.tau,
            balance: true,
        },
    )?;
    let delta_norm = summed_norm(&obj.incs)?;
    let report = EraseReport {
        concepts: names,
        alpha: hyper.alpha,
        tau: job.tau,
        iters_run: out.iters_run,
        final_l_mom: out.final_l_mom,
        stop_reason: out.stop_reason,
        delta_norm,
        trace: out.trace,
    };
    Ok((obj.incs, report))
}

/// `‖Σ_i Δθ_i‖_p` with the sum taken layer by layer.
fn summed_norm(incs: &[WeightIncrement]) -> Result<f64> {
    let mut layers: Vec<(String, Matrix)> = Vec::new();
    for inc in incs {
        for (name, d) in inc.realized() {
            match layers.iter_mut().find(|(n, _)| n == name) {
                Some((_, acc)) => acc.add_assign(d)?,
                None => layers.push((name.clone(), d.clone())),
            }
        }
    }
    Ok(l1_mean(layers.iter().map(|(_, m)| m)))
}

/// Separable multi-concept erasure.
///
/// Each concept gets a decoupled increment on the `to_k`/`to_v` layers whose
/// null-space basis excludes the blank prompt and every other concept known at
/// that point. In iterative mode the first concept is instead erased by
/// G-CiRs with a dense increment over the cross-attention layers, trained at
/// `hyper.gcirs_lr`.
///
/// RNG streams: simultaneous mode uses stream 0; otherwise concept `k` uses
/// stream `k`.
pub fn train_sepme(
    theta_dm: &DenoiserParams,
    bank: &ConceptBank,
    forgotten: &[&str],
    data: &ToyDataset,
    schedule: &NoiseSchedule,
    hyper: &EraseHyper,
    mode: SepmeMode,
) -> Result<SepmeOutcome> {
    hyper.validate()?;
    let concepts = concepts_of(bank, forgotten)?;
    let embeds: Vec<&ConceptEmbedding> = forgotten.iter().map(|n| bank.get(n)).collect::<Result<_>>()?;
    let blank = bank.blank();
    let layers = theta_dm.editable_layers();
    let d_out = theta_dm.dims.d_out;
    let per_concept = hyper.probes_per_concept(concepts.len());
    let decoupled = |known: &[&ConceptEmbedding], i: usize| -> Result<WeightIncrement> {
        let cs = build_constraint(known, i, blank)?;
        WeightIncrement::decoupled(&known[i].name, cs, hyper.beta, &layers, d_out)
    };

    let mut set = EraserSet::new(theta_dm.clone());
    let mut reports = Vec::new();
    match mode {
        SepmeMode::Simultaneous => {
            let incs = (0..embeds.len())
                .map(|i| decoupled(&embeds, i))
                .collect::<Result<Vec<_>>>()?;
            let job = Job {
                concepts: &concepts,
                incs,
                tau: hyper.tau,
                stream: 0,
            };
            let (incs, report) = run_job(theta_dm, &blank.tokens, data, schedule, hyper, per_concept, job)?;
            for inc in incs {
                set.insert(inc)?;
            }
            reports.push(report);
        }
        SepmeMode::Separate | SepmeMode::Iterative => {
            for k in 0..concepts.len() {
                if mode == SepmeMode::Iterative && k == 0 {
                    let first = EraseHyper {
                        scope: ParamScope::CrossAttention,
                        ..hyper.clone()
                    };
                    let (inc, report) =
                        run_gcirs(theta_dm, bank, &forgotten[..1], data, schedule, &first, hyper.gcirs_lr, 0)?;
                    set.insert(inc)?;
                    reports.push(report);
                    continue;
                }
                let inc = if mode == SepmeMode::Iterative {
                    decoupled(&embeds[..=k], k)?
                } else {
                    decoupled(&embeds, k)?
                };
                let job = Job {
                    concepts: &concepts[k..=k],
                    incs: alloc::vec![inc],
                    tau: hyper.tau_for(&concepts[k].name),
                    stream: k as u64,
                };
                let (mut incs, report) =
                    run_job(theta_dm, &blank.tokens, data, schedule, hyper, per_concept, job)?;
                set.insert(incs.pop().expect("one increment per job"))?;
                reports.push(report);
            }
        }
    }
    Ok(SepmeOutcome { set, reports })
}
