//! Subcommand implementations. Every command reads and writes inside
//! `config.out`:
//!
//! ```text
//! config.toml              effective config of the last command
//! theta_dm.ckpt            trained model            (train-dm)
//! train_dm.toml            initial and final L_DM   (train-dm)
//! increments/<name>.ckpt   one file per increment   (erase)
//! report.toml, trace.csv   stop statistics, trace   (erase)
//! edited.ckpt              θ_dm + Σ subset          (compose)
//! eval.csv, eval.toml      evaluation, warnings     (evaluate)
//! ablation.csv             τ sweep                  (ablate-tau)
//! subsets.csv              separability matrix      (suite)
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use sepme_core::decoupling::{EraserSet, WeightIncrement};
use sepme_core::diffusion::{train_dm, DenoiserParams, TrainReport};
use sepme_core::eval::{ablate_tau, evaluate, separability_suite, EvalReport, SuiteCell, SuiteProbes, ToyClassifier};
use sepme_core::trainers::{train_baseline, train_gcirs, train_sepme, EraseReport};

use crate::checkpoint::{
    increment_from_checkpoint, increment_to_checkpoint, params_from_checkpoint, params_to_checkpoint, Checkpoint,
};
use crate::config::{ExperimentConfig, Method};
use crate::error::{CliError, CliResult};
use crate::meta::{IncrementMeta, Kind, Meta};
use crate::report;

pub const THETA_DM: &str = "theta_dm.ckpt";
pub const EDITED: &str = "edited.ckpt";
pub const INCREMENTS: &str = "increments";

fn prepare(cfg: &ExperimentConfig) -> CliResult<PathBuf> {
    cfg.validate()?;
    let out = cfg.out.clone();
    fs::create_dir_all(&out).map_err(|e| CliError::io(&out, e))?;
    let path = out.join("config.toml");
    fs::write(&path, cfg.to_toml()).map_err(|e| CliError::io(&path, e))?;
    Ok(out)
}

fn write_toml<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let text = toml::to_string(value).map_err(|e| CliError::Format(e.to_string()))?;
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

pub fn increment_path(out: &Path, name: &str) -> PathBuf {
    out.join(INCREMENTS).join(format!("{name}.ckpt"))
}

#[derive(Debug, Serialize)]
struct DmSummary {
    initial_loss: f64,
    final_loss: f64,
    steps: usize,
}

pub fn cmd_train_dm(cfg: &ExperimentConfig) -> CliResult<TrainReport> {
    let out = prepare(cfg)?;
    let (theta, report) = train_dm(
        cfg.dims(),
        cfg.model.token_scale,
        &cfg.dataset()?,
        &cfg.bank()?,
        &cfg.schedule()?,
        &cfg.train_hyper(),
    )?;
    let path = out.join(THETA_DM);
    params_to_checkpoint(&theta).save(&path)?;
    Meta::new(Kind::ThetaDm, cfg).save(&path)?;
    write_toml(
        &out.join("train_dm.toml"),
        &DmSummary {
            initial_loss: report.initial_loss,
            final_loss: report.final_loss,
            steps: report.losses.len(),
        },
    )?;
    Ok(report)
}

/// Loads `θ_dm` from the run directory and checks it against the config.
pub fn load_theta(cfg: &ExperimentConfig) -> CliResult<(DenoiserParams, Meta)> {
    let path = cfg.out.join(THETA_DM);
    let meta = Meta::load(&path)?;
    if meta.kind != Kind::ThetaDm {
        return Err(CliError::Format(format!("{} is not a theta_dm checkpoint", path.display())));
    }
    if meta.dims != cfg.dims() {
        return Err(CliError::Format(format!(
            "{} was trained with dims {:?}, config has {:?}",
            path.display(),
            meta.dims,
            cfg.dims()
        )));
    }
    let theta = params_from_checkpoint(&Checkpoint::load(&path)?, meta.dims)?;
    Ok((theta, meta))
}

#[derive(Debug, Clone)]
pub struct EraseOutput {
    pub increments: Vec<WeightIncrement>,
    pub reports: Vec<EraseReport>,
}

pub fn cmd_erase(cfg: &ExperimentConfig) -> CliResult<EraseOutput> {
    let out = prepare(cfg)?;
    let (theta, _) = load_theta(cfg)?;
    let bank = cfg.bank()?;
    let data = cfg.dataset()?;
    let sched = cfg.schedule()?;
    let hyper = cfg.erase_hyper();
    let forget = cfg.forget_refs();
    if forget.is_empty() {
        return Err(CliError::Config("`forget` lists no concepts".into()));
    }
    let (increments, reports) = match cfg.erase.method {
        Method::Sepme => {
            let o = train_sepme(&theta, &bank, &forget, &data, &sched, &hyper, cfg.erase.mode)?;
            (o.set.increments().to_vec(), o.reports)
        }
        Method::Gcirs => {
            let (inc, r) = train_gcirs(&theta, &bank, &forget, &data, &sched, &hyper)?;
            (vec![inc], vec![r])
        }
        m => {
            let kind = m.baseline().expect("remaining methods are baselines");
            let (inc, r) = train_baseline(kind, &theta, &bank, &forget, &data, &sched, &hyper, cfg.erase.baseline_iters)?;
            (vec![inc], vec![r])
        }
    };

    let dir = out.join(INCREMENTS);
    if dir.exists() {
        fs::remove_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
    }
    fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
    let mut names = Vec::new();
    for inc in &increments {
        let path = increment_path(&out, inc.concept());
        increment_to_checkpoint(inc).save(&path)?;
        let mut meta = Meta::new(Kind::Increment, cfg);
        meta.increment = Some(IncrementMeta {
            concept: inc.concept().to_string(),
            form: if inc.is_decoupled() { "decoupled" } else { "dense" }.into(),
            covered: inc.constraint().map(|c| c.covered.clone()).unwrap_or_default(),
        });
        meta.save(&path)?;
        names.push(inc.concept().to_string());
    }
    let mode = match cfg.erase.method {
        Method::Sepme => format!("{:?}", cfg.erase.mode).to_lowercase(),
        _ => "-".into(),
    };
    let method = format!("{:?}", cfg.erase.method).to_lowercase();
    report::write_report(&out.join("report.toml"), &method, &mode, &names, &reports)?;
    report::write_trace(&out.join("trace.csv"), &reports)?;
    Ok(EraseOutput { increments, reports })
}

#[derive(Debug, Deserialize)]
struct Manifest {
    increments: Vec<String>,
}

/// `θ_dm` with every increment written by the last `erase`, in set order.
pub fn load_set(cfg: &ExperimentConfig) -> CliResult<EraserSet> {
    let (theta, _) = load_theta(cfg)?;
    let path = cfg.out.join("report.toml");
    let text = fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
    let manifest: Manifest = toml::from_str(&text).map_err(|e| CliError::Format(format!("{}: {e}", path.display())))?;
    let mut set = EraserSet::new(theta);
    for name in &manifest.increments {
        let path = increment_path(&cfg.out, name);
        let meta = Meta::load(&path)?;
        let im = match (meta.kind, meta.increment) {
            (Kind::Increment, Some(im)) if im.concept == *name => im,
            _ => return Err(CliError::Format(format!("{} does not describe increment `{name}`", path.display()))),
        };
        if meta.dims != set.base().dims {
            return Err(CliError::Format(format!("{} was trained for different model dims", path.display())));
        }
        let inc = increment_from_checkpoint(&Checkpoint::load(&path)?, name, &im.covered)?;
        set.insert(inc)
            .map_err(|e| CliError::Format(format!("{}: {e}", path.display())))?;
    }
    Ok(set)
}

/// The increments named in `eval.subset`, or all of them.
fn subset_of<'a>(cfg: &'a ExperimentConfig, set: &'a EraserSet) -> Vec<&'a str> {
    match &cfg.eval.subset {
        Some(s) => s.iter().map(String::as_str).collect(),
        None => set.names(),
    }
}

pub fn cmd_compose(cfg: &ExperimentConfig) -> CliResult<PathBuf> {
    let out = prepare(cfg)?;
    let set = load_set(cfg)?;
    let subset = subset_of(cfg, &set);
    let edited = set.apply(&subset)?;
    let path = out.join(EDITED);
    params_to_checkpoint(&edited).save(&path)?;
    let mut meta = Meta::new(Kind::Edited, cfg);
    meta.subset = Some(
        set.names()
            .into_iter()
            .filter(|n| subset.contains(n))
            .map(String::from)
            .collect(),
    );
    meta.save(&path)?;
    Ok(path)
}

#[derive(Debug, Serialize)]
struct EvalMeta {
    seed: u64,
    classifier_seed: u64,
    theta_dm_data_seed: u64,
    subset: Vec<String>,
    delta_norm: f64,
    warnings: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct EvaluateOutput {
    pub report: EvalReport,
    pub warnings: Vec<String>,
}

fn classifier_warnings(cfg: &ExperimentConfig, dm_meta: &Meta, clf: &ToyClassifier) -> Vec<String> {
    let mut w = Vec::new();
    if clf.seed != dm_meta.data_seed {
        w.push(format!(
            "classifier fitted on dataset seed {} but theta_dm was trained on seed {}",
            clf.seed, dm_meta.data_seed
        ));
    }
    if cfg.data != dm_meta.config.data {
        w.push("data section differs from the one theta_dm was trained with".into());
    }
    w
}

/// Concepts erased by the named increments; G-CiRs increments cover several.
fn erased_concepts(subset: &[&str]) -> Vec<String> {
    subset.iter().flat_map(|n| n.split('+')).map(String::from).collect()
}

pub fn cmd_evaluate(cfg: &ExperimentConfig) -> CliResult<EvaluateOutput> {
    let out = prepare(cfg)?;
    let set = load_set(cfg)?;
    let (_, dm_meta) = load_theta(cfg)?;
    let subset = subset_of(cfg, &set);
    let edited = set.apply(&subset)?;
    let data = cfg.dataset()?;
    let clf = ToyClassifier::fit(&data, cfg.seed);
    let warnings = classifier_warnings(cfg, &dm_meta, &clf);
    let names = cfg.names();
    let refs: Vec<&str> = names.iter().map(String::as_str).collect();
    let report = evaluate(
        &edited,
        set.base(),
        &cfg.bank()?,
        &refs,
        &data,
        &clf,
        &cfg.schedule()?,
        &cfg.eval_spec(),
    )?;
    let erased = erased_concepts(&subset);
    report::write_eval(&out.join("eval.csv"), &report, &erased)?;
    write_toml(
        &out.join("eval.toml"),
        &EvalMeta {
            seed: cfg.seed,
            classifier_seed: clf.seed,
            theta_dm_data_seed: dm_meta.data_seed,
            subset: subset.iter().map(|s| s.to_string()).collect(),
            delta_norm: report.delta_norm,
            warnings: warnings.clone(),
        },
    )?;
    Ok(EvaluateOutput { report, warnings })
}

pub fn cmd_ablate(cfg: &ExperimentConfig) -> CliResult<Vec<sepme_core::eval::AblationRow>> {
    let out = prepare(cfg)?;
    if cfg.erase.method != Method::Sepme {
        return Err(CliError::Config("ablate-tau sweeps SepME only; set erase.method = \"sepme\"".into()));
    }
    if cfg.eval.taus.is_empty() {
        return Err(CliError::Config("eval.taus is empty".into()));
    }
    let (theta, _) = load_theta(cfg)?;
    let data = cfg.dataset()?;
    let clf = ToyClassifier::fit(&data, cfg.seed);
    let names = cfg.names();
    let refs: Vec<&str> = names.iter().map(String::as_str).collect();
    let rows = ablate_tau(
        &cfg.eval.taus,
        &theta,
        &cfg.bank()?,
        &cfg.forget_refs(),
        &refs,
        &data,
        &clf,
        &cfg.schedule()?,
        &cfg.erase_hyper(),
        cfg.erase.mode,
        &cfg.eval_spec(),
    )?;
    report::write_ablation(&out.join("ablation.csv"), &rows, &cfg.forget)?;
    Ok(rows)
}

pub fn cmd_suite(cfg: &ExperimentConfig) -> CliResult<Vec<SuiteCell>> {
    let out = prepare(cfg)?;
    let set = load_set(cfg)?;
    let probes = SuiteProbes::draw(&set, &cfg.dataset()?, &cfg.schedule()?, cfg.eval.suite_probes, cfg.seed)?;
    let cells = separability_suite(&set, &cfg.bank()?, &probes, &cfg.erase_hyper(), cfg.eval.suite_tol)?;
    report::write_subsets(&out.join("subsets.csv"), &cells)?;
    Ok(cells)
}
