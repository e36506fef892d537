//! Erasure optimisers: G-CiRs, SepME in three modes, and the targeted and
//! untargeted baselines.
//!
//! Every trainer runs the same loop: evaluate the per-concept losses at the
//! current parameters, derive the balancing weights, update the momentum
//! statistic, stop if it has reached `τ`, otherwise take one Adam step.

mod baselines;
mod gcirs;
mod objective;
mod sepme;

use alloc::string::String;
use alloc::vec::Vec;

use crate::concept_repr::{eta_weights, CorrKind, CorrState};
use crate::diffusion::{forward_diffuse, NoiseSchedule, ParamScope, ToyDataset};
use crate::numerics::Rng;
use crate::{Error, Result};

pub use baselines::{baseline_target, train_baseline, BaselineKind};
pub use gcirs::{gcirs_objective, train_gcirs};
pub use objective::{corr_value_grad, reg_grad, reg_value, CorrTarget};
pub use sepme::{sepme_objective, train_sepme, SepmeMode, SepmeOutcome};

/// Norm used for the weight regulariser and the reported `‖Δθ‖_p`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum RegNorm {
    /// Mean over tensors of the entry-wise ℓ1 norm.
    #[default]
    L1Mean,
    /// Mean over tensors of the Frobenius norm.
    L2,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EraseHyper {
    pub lr: f64,
    pub max_iters: usize,
    pub tau: f64,
    /// Per-concept thresholds that replace `tau` in separate and iterative mode.
    pub tau_overrides: Vec<(String, f64)>,
    pub alpha: f64,
    pub beta: f64,
    pub lambda: f64,
    /// Probes drawn per iteration across all erased concepts. `None` means one
    /// per erased concept.
    pub batch: Option<usize>,
    pub seed: u64,
    /// Layers a dense (G-CiRs or baseline) increment may touch.
    pub scope: ParamScope,
    pub reg: RegNorm,
    pub corr: CorrKind,
    /// Learning rate of the G-CiRs step that opens iterative SepME.
    pub gcirs_lr: f64,
    /// Guidance strength of the ESD target.
    pub esd_eta: f64,
    /// `(erased, anchor)` pairs for AbConcept.
    pub anchors: Vec<(String, String)>,
}

impl EraseHyper {
    pub fn sepme() -> Self {
        Self {
            lr: 1e-2,
            max_iters: 1000,
            tau: 0.0,
            tau_overrides: Vec::new(),
            alpha: 0.9,
            beta: 1e-4,
            lambda: 3e-5,
            batch: None,
            seed: 0,
            scope: ParamScope::CrossAttention,
            reg: RegNorm::L1Mean,
            corr: CorrKind::Product,
            gcirs_lr: 1e-6,
            esd_eta: 1.0,
            anchors: Vec::new(),
        }
    }

    pub fn gcirs() -> Self {
        Self {
            lr: 1e-6,
            ..Self::sepme()
        }
    }

    pub fn tau_for(&self, concept: &str) -> f64 {
        self.tau_overrides
            .iter()
            .find(|(n, _)| n == concept)
            .map_or(self.tau, |(_, t)| *t)
    }

    pub fn anchor_for(&self, concept: &str) -> Option<&str> {
        self.anchors
            .iter()
            .find(|(n, _)| n == concept)
            .map(|(_, a)| a.as_str())
    }

    fn probes_per_concept(&self, erased: usize) -> usize {
        (self.batch.unwrap_or(erased) / erased.max(1)).max(1)
    }

    fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::InvalidArgument(what.into()));
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad("lr must be finite and non-negative");
        }
        if !(self.gcirs_lr >= 0.0 && self.gcirs_lr.is_finite()) {
            return bad("gcirs_lr must be finite and non-negative");
        }
        if !(0.0..1.0).contains(&self.alpha) {
            return bad("alpha must lie in [0, 1)");
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return bad("beta must be positive");
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad("lambda must be non-negative");
        }
        if self.batch == Some(0) {
            return bad("batch must be positive");
        }
        if self.tau.is_nan() || self.tau_overrides.iter().any(|(_, t)| t.is_nan()) {
            return bad("tau must not be NaN");
        }
        Ok(())
    }
}

impl Default for EraseHyper {
    fn default() -> Self {
        Self::sepme()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum StopReason {
    EarlyStop,
    MaxIters,
}

impl StopReason {
    pub fn as_str(self) -> &'static str {
        match self {
            StopReason::EarlyStop => "early_stop",
            StopReason::MaxIters => "max_iters",
        }
    }
}

/// One concept's entry at one iteration.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TraceRow {
    /// 1-based.
    pub iter: usize,
    pub concept: String,
    pub l_cor: f64,
    pub eta: f64,
    /// Momentum after this iteration's update.
    pub l_mom: f64,
    /// `‖·‖_p` of the trainable tensors before this iteration's step.
    pub reg: f64,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EraseReport {
    pub concepts: Vec<String>,
    pub alpha: f64,
    pub tau: f64,
    pub iters_run: usize,
    /// `None` when no iteration ran.
    pub final_l_mom: Option<f64>,
    pub stop_reason: StopReason,
    /// `‖Δθ‖_p` of the returned increment.
    pub delta_norm: f64,
    pub trace: Vec<TraceRow>,
}

impl EraseReport {
    /// Balanced loss `Σ η_i·L_i` per iteration, summed in trace order.
    pub fn balanced_losses(&self) -> Vec<f64> {
        let mut out: Vec<f64> = Vec::with_capacity(self.iters_run);
        for row in &self.trace {
            if out.len() < row.iter {
                out.push(0.0);
            }
            *out.last_mut().expect("pushed above") += row.eta * row.l_cor;
        }
        out
    }

    /// `L_mom` per iteration.
    pub fn l_mom_trace(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.iters_run);
        for row in &self.trace {
            if out.len() < row.iter {
                out.push(row.l_mom);
            }
        }
        out
    }
}

/// Per-iteration hooks the optimisation loop drives.
pub(crate) trait Objective {
    /// Losses per concept at the current parameters; caches their gradients.
    fn evaluate(&mut self) -> Result<Vec<f64>>;
    /// `‖·‖_p` of the trainable tensors.
    fn reg(&self) -> f64;
    /// One optimiser step on `Σ η_i·∇L_i + λ·∇‖·‖_p`.
    fn descend(&mut self, eta: &[f64]) -> Result<()>;
}

pub(crate) struct LoopSpec<'a> {
    pub names: &'a [String],
    pub max_iters: usize,
    pub alpha: f64,
    pub tau: f64,
    /// Use `η` balancing; otherwise every weight is 1.
    pub balance: bool,
}

pub(crate) struct LoopOutcome {
    pub iters_run: usize,
    pub final_l_mom: Option<f64>,
    pub stop_reason: StopReason,
    pub trace: Vec<TraceRow>,
}

pub(crate) fn run_loop<O: Objective>(obj: &mut O, spec: &LoopSpec<'_>) -> Result<LoopOutcome> {
    let mut state = CorrState::new(spec.alpha, spec.tau)?;
    let mut trace = Vec::with_capacity(spec.max_iters * spec.names.len());
    let mut stop_reason = StopReason::MaxIters;
    let mut iters_run = 0;
    for iter in 1..=spec.max_iters {
        let losses = obj.evaluate()?;
        if let Some(bad) = losses.iter().position(|l| !l.is_finite()) {
            return Err(Error::NonFinite(alloc::format!(
                "loss of `{}` at iteration {iter}",
                spec.names[bad]
            )));
        }
        let eta = if spec.balance {
            eta_weights(&losses)?.eta
        } else {
            alloc::vec![1.0; losses.len()]
        };
        let sum: f64 = eta.iter().zip(&losses).map(|(e, l)| e * l).sum();
        let stop = state.step(sum)?;
        let l_mom = state.value().expect("set by step");
        let reg = obj.reg();
        for ((name, l), e) in spec.names.iter().zip(&losses).zip(&eta) {
            trace.push(TraceRow {
                iter,
                concept: name.clone(),
                l_cor: *l,
                eta: *e,
                l_mom,
                reg,
            });
        }
        iters_run = iter;
        if stop {
            stop_reason = StopReason::EarlyStop;
            break;
        }
        obj.descend(&eta)?;
    }
    Ok(LoopOutcome {
        iters_run,
        final_l_mom: state.value(),
        stop_reason,
        trace,
    })
}

/// `n` noised samples of one dataset class at uniform timesteps.
pub fn draw_probes(
    data: &ToyDataset,
    class: &str,
    schedule: &NoiseSchedule,
    n: usize,
    rng: &mut Rng,
) -> Result<Vec<(Vec<f64>, usize)>> {
    (0..n)
        .map(|_| {
            let x0 = data.draw_named(class, rng)?;
            let t = rng.range_inclusive(1, schedule.steps());
            let eps = rng.normal_vec(data.data_dim);
            Ok((forward_diffuse(x0, t, &eps, schedule)?, t))
        })
        .collect()
}
