//! Experiment configuration: one TOML file, unknown keys rejected.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use sepme_core::concept_repr::CorrKind;
use sepme_core::diffusion::{make_schedule, ConceptBank, ModelDims, NoiseSchedule, ParamScope, ToyDataset, TrainHyper};
use sepme_core::eval::EvalSpec;
use sepme_core::trainers::{BaselineKind, EraseHyper, RegNorm, SepmeMode};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Gcirs,
    Sepme,
    Esd,
    Sdd,
    Abconcept,
    Fmn,
}

impl Method {
    pub fn baseline(self) -> Option<BaselineKind> {
        match self {
            Method::Esd => Some(BaselineKind::Esd),
            Method::Sdd => Some(BaselineKind::Sdd),
            Method::Abconcept => Some(BaselineKind::AbConcept),
            Method::Fmn => Some(BaselineKind::Fmn),
            Method::Gcirs | Method::Sepme => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub data_dim: usize,
    pub hidden: usize,
    pub d_in: usize,
    pub tokens: usize,
    pub d_out: usize,
    pub blocks: usize,
    pub ffn: usize,
    /// Multiplier on the initial `to_k`/`to_v` weights.
    pub token_scale: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        let d = ModelDims::default();
        Self {
            data_dim: d.data_dim,
            hidden: d.hidden,
            d_in: d.d_in,
            tokens: d.tokens,
            d_out: d.d_out,
            blocks: d.blocks,
            ffn: d.ffn,
            token_scale: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleSection {
    pub timesteps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        Self {
            timesteps: 200,
            beta_min: 5e-4,
            beta_max: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub radius: f64,
    pub std: f64,
    pub per_concept: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            radius: 2.0,
            std: 0.1,
            per_concept: 500,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub lr: f64,
    pub steps: usize,
    pub batch: usize,
    pub blank_prob: f64,
    pub eval_batch: usize,
    pub kv_lr_scale: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let h = TrainHyper::default();
        Self {
            lr: h.lr,
            steps: h.steps,
            batch: h.batch,
            blank_prob: h.blank_prob,
            eval_batch: h.eval_batch,
            kv_lr_scale: h.kv_lr_scale,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConceptEntry {
    pub name: String,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EraseSection {
    pub method: Method,
    pub mode: SepmeMode,
    pub lr: f64,
    pub max_iters: usize,
    pub tau: f64,
    pub tau_overrides: BTreeMap<String, f64>,
    pub alpha: f64,
    pub beta: f64,
    pub lambda: f64,
    /// Probes per iteration across all erased concepts; 0 means one each.
    pub batch: usize,
    pub scope: ParamScope,
    pub reg: RegNorm,
    pub corr: CorrKind,
    pub gcirs_lr: f64,
    pub esd_eta: f64,
    pub anchors: BTreeMap<String, String>,
    /// Fixed iteration count of the baselines.
    pub baseline_iters: usize,
}

impl Default for EraseSection {
    fn default() -> Self {
        let h = EraseHyper::sepme();
        Self {
            method: Method::Sepme,
            mode: SepmeMode::Separate,
            lr: h.lr,
            max_iters: h.max_iters,
            tau: h.tau,
            tau_overrides: BTreeMap::new(),
            alpha: h.alpha,
            beta: h.beta,
            lambda: h.lambda,
            batch: 0,
            scope: h.scope,
            reg: h.reg,
            corr: h.corr,
            gcirs_lr: h.gcirs_lr,
            esd_eta: h.esd_eta,
            anchors: BTreeMap::new(),
            baseline_iters: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub n_per_concept: usize,
    pub corr_probes: usize,
    pub suite_probes: usize,
    pub suite_tol: f64,
    pub taus: Vec<f64>,
    /// Increments applied by `compose` and `evaluate`; absent means all.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub subset: Option<Vec<String>>,
}

impl Default for EvalSection {
    fn default() -> Self {
        let s = EvalSpec::default();
        Self {
            n_per_concept: s.n_per_concept,
            corr_probes: s.corr_probes,
            suite_probes: 100,
            suite_tol: 1e-9,
            taus: vec![1e-3, 5e-4, 0.0, -5e-4],
            subset: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub concepts: Vec<ConceptEntry>,
    pub blank_seed: u64,
    /// Concepts to erase, in order.
    pub forget: Vec<String>,
    pub model: ModelSection,
    pub schedule: ScheduleSection,
    pub data: DataSection,
    pub train: TrainSection,
    pub erase: EraseSection,
    pub eval: EvalSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let names = ["A", "B", "C", "D", "E"];
        Self {
            seed: 0,
            out: PathBuf::from("runs/default"),
            concepts: names
                .iter()
                .zip(1..)
                .map(|(n, s)| ConceptEntry {
                    name: n.to_string(),
                    seed: s,
                })
                .collect(),
            blank_seed: 0,
            forget: names[..3].iter().map(|s| s.to_string()).collect(),
            model: ModelSection::default(),
            schedule: ScheduleSection::default(),
            data: DataSection::default(),
            train: TrainSection::default(),
            erase: EraseSection::default(),
            eval: EvalSection::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> CliResult<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
            e => e,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config always serialises")
    }

    pub fn validate(&self) -> CliResult<()> {
        let bad = |m: String| Err(CliError::Config(m));
        if self.concepts.is_empty() {
            return bad("at least one concept is required".into());
        }
        for (i, c) in self.concepts.iter().enumerate() {
            if self.concepts[..i].iter().any(|o| o.name == c.name) {
                return bad(format!("concept `{}` listed twice", c.name));
            }
        }
        let known = |n: &String| self.concepts.iter().any(|c| &c.name == n);
        for n in self.forget.iter().chain(self.erase.tau_overrides.keys()) {
            if !known(n) {
                return bad(format!("`{n}` is not a configured concept"));
            }
        }
        for (k, v) in &self.erase.anchors {
            if !known(k) || !known(v) {
                return bad(format!("anchor pair `{k}` -> `{v}` names an unknown concept"));
            }
        }
        if self.erase.method == Method::Abconcept {
            if let Some(n) = self.forget.iter().find(|n| !self.erase.anchors.contains_key(*n)) {
                return bad(format!("abconcept needs an anchor for `{n}` in erase.anchors"));
            }
        }
        let m = &self.model;
        if [m.data_dim, m.hidden, m.d_in, m.tokens, m.d_out, m.blocks, m.ffn].contains(&0) {
            return bad("model dimensions must be positive".into());
        }
        if !(m.token_scale > 0.0 && m.token_scale.is_finite()) {
            return bad("model.token_scale must be positive".into());
        }
        if !(self.data.std >= 0.0 && self.data.radius.is_finite()) || self.data.per_concept == 0 {
            return bad("data section out of range".into());
        }
        if !(0.0..=1.0).contains(&self.train.blank_prob) {
            return bad("train.blank_prob must lie in [0, 1]".into());
        }
        if self.eval.n_per_concept == 0 || self.eval.corr_probes == 0 || self.eval.suite_probes == 0 {
            return bad("eval sample counts must be positive".into());
        }
        self.schedule()?;
        Ok(())
    }

    pub fn dims(&self) -> ModelDims {
        let m = &self.model;
        ModelDims {
            data_dim: m.data_dim,
            hidden: m.hidden,
            d_in: m.d_in,
            tokens: m.tokens,
            d_out: m.d_out,
            blocks: m.blocks,
            ffn: m.ffn,
            timesteps: self.schedule.timesteps,
        }
    }

    pub fn schedule(&self) -> CliResult<NoiseSchedule> {
        let s = &self.schedule;
        make_schedule(s.timesteps, s.beta_min, s.beta_max).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn names(&self) -> Vec<String> {
        self.concepts.iter().map(|c| c.name.clone()).collect()
    }

    pub fn bank(&self) -> CliResult<ConceptBank> {
        let seeded: Vec<(String, u64)> = self.concepts.iter().map(|c| (c.name.clone(), c.seed)).collect();
        Ok(ConceptBank::generate(
            &seeded,
            self.blank_seed,
            self.model.tokens,
            self.model.d_in,
            self.model.token_scale,
        )?)
    }

    pub fn dataset(&self) -> CliResult<ToyDataset> {
        Ok(ToyDataset::generate(
            &self.names(),
            self.model.data_dim,
            self.data.radius,
            self.data.std,
            self.data.per_concept,
            self.seed,
        )?)
    }

    pub fn train_hyper(&self) -> TrainHyper {
        let t = &self.train;
        TrainHyper {
            lr: t.lr,
            steps: t.steps,
            batch: t.batch,
            seed: self.seed,
            blank_prob: t.blank_prob,
            eval_batch: t.eval_batch,
            kv_lr_scale: t.kv_lr_scale,
        }
    }

    pub fn erase_hyper(&self) -> EraseHyper {
        let e = &self.erase;
        EraseHyper {
            lr: e.lr,
            max_iters: e.max_iters,
            tau: e.tau,
            tau_overrides: e.tau_overrides.iter().map(|(k, v)| (k.clone(), *v)).collect(),
            alpha: e.alpha,
            beta: e.beta,
            lambda: e.lambda,
            batch: (e.batch > 0).then_some(e.batch),
            seed: self.seed,
            scope: e.scope,
            reg: e.reg,
            corr: e.corr,
            gcirs_lr: e.gcirs_lr,
            esd_eta: e.esd_eta,
            anchors: e.anchors.iter().map(|(k, v)| (k.clone(), v.clone())).collect(),
        }
    }

    pub fn eval_spec(&self) -> EvalSpec {
        EvalSpec {
            n_per_concept: self.eval.n_per_concept,
            corr_probes: self.eval.corr_probes,
            seed: self.seed,
        }
    }

    pub fn forget_refs(&self) -> Vec<&str> {
        self.forget.iter().map(String::as_str).collect()
    }
}

/// Command-line values that replace config keys.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub method: Option<Method>,
    pub mode: Option<SepmeMode>,
    pub subset: Option<Vec<String>>,
    pub tau: Option<f64>,
    pub corr: Option<CorrKind>,
    pub iters: Option<usize>,
}

impl Overrides {
    pub fn apply(&self, cfg: &mut ExperimentConfig) -> CliResult<()> {
        if let Some(o) = &self.out {
            cfg.out = o.clone();
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(m) = self.method {
            cfg.erase.method = m;
        }
        if let Some(m) = self.mode {
            cfg.erase.mode = m;
        }
        if let Some(s) = &self.subset {
            cfg.eval.subset = Some(s.clone());
        }
        if let Some(t) = self.tau {
            cfg.erase.tau = t;
        }
        if let Some(c) = self.corr {
            cfg.erase.corr = c;
        }
        if let Some(i) = self.iters {
            cfg.erase.max_iters = i;
            cfg.erase.baseline_iters = i;
        }
        cfg.validate()
    }
}

/// Splits `"A,B"` into names; the empty string is the empty subset.
pub fn parse_subset(s: &str) -> Vec<String> {
    s.split(',').map(str::trim).filter(|n| !n.is_empty()).map(String::from).collect()
}
