//! CSV and TOML report writers.

use std::path::Path;

use serde::Serialize;

use sepme_core::eval::{AblationRow, EvalReport, SuiteCell};
use sepme_core::trainers::EraseReport;

use crate::error::{CliError, CliResult};

pub const TRACE_HEADER: [&str; 6] = ["iter", "concept", "L_cor", "eta", "L_mom", "reg"];
pub const EVAL_HEADER: [&str; 8] = [
    "concept",
    "erased",
    "acc_before",
    "acc_after",
    "distance",
    "corr",
    "samples",
    "delta_norm",
];
pub const SUBSETS_HEADER: [&str; 6] = ["subset", "concept", "erased", "metric", "threshold", "pass"];
pub const ABLATION_HEADER: [&str; 6] = ["tau", "iters_run", "delta_norm", "erased_acc", "held_acc", "mean_distance"];

fn write_csv<const N: usize>(path: &Path, header: [&str; N], rows: impl IntoIterator<Item = [String; N]>) -> CliResult<()> {
    let io = |e: csv::Error| CliError::io(path, e.into());
    let mut w = csv::Writer::from_path(path).map_err(io)?;
    w.write_record(header).map_err(io)?;
    for r in rows {
        w.write_record(&r).map_err(io)?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

/// One trace per report, concatenated in report order.
pub fn write_trace(path: &Path, reports: &[EraseReport]) -> CliResult<()> {
    write_csv(
        path,
        TRACE_HEADER,
        reports.iter().flat_map(|r| &r.trace).map(|t| {
            [
                t.iter.to_string(),
                t.concept.clone(),
                t.l_cor.to_string(),
                t.eta.to_string(),
                t.l_mom.to_string(),
                t.reg.to_string(),
            ]
        }),
    )
}

pub fn write_eval(path: &Path, report: &EvalReport, erased: &[String]) -> CliResult<()> {
    write_csv(
        path,
        EVAL_HEADER,
        report.concepts.iter().map(|c| {
            [
                c.concept.clone(),
                erased.contains(&c.concept).to_string(),
                c.acc_before.to_string(),
                c.acc_after.to_string(),
                c.distance.to_string(),
                c.corr.to_string(),
                c.samples.to_string(),
                report.delta_norm.to_string(),
            ]
        }),
    )
}

pub fn write_subsets(path: &Path, cells: &[SuiteCell]) -> CliResult<()> {
    write_csv(
        path,
        SUBSETS_HEADER,
        cells.iter().map(|c| {
            [
                c.subset.join(";"),
                c.concept.clone(),
                c.erased.to_string(),
                c.metric.to_string(),
                c.threshold.to_string(),
                c.pass.to_string(),
            ]
        }),
    )
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

pub fn write_ablation(path: &Path, rows: &[AblationRow], erased: &[String]) -> CliResult<()> {
    write_csv(
        path,
        ABLATION_HEADER,
        rows.iter().map(|r| {
            let cs = &r.eval.concepts;
            let is_erased = |n: &String| erased.contains(n);
            [
                r.tau.to_string(),
                r.iters_run.to_string(),
                r.delta_norm.to_string(),
                mean(cs.iter().filter(|c| is_erased(&c.concept)).map(|c| c.acc_after)).to_string(),
                mean(cs.iter().filter(|c| !is_erased(&c.concept)).map(|c| c.acc_after)).to_string(),
                mean(cs.iter().map(|c| c.distance)).to_string(),
            ]
        }),
    )
}

#[derive(Debug, Serialize)]
struct ReportEntry<'a> {
    concepts: &'a [String],
    alpha: f64,
    tau: f64,
    iters_run: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    final_l_mom: Option<f64>,
    stop_reason: &'static str,
    delta_norm: f64,
}

#[derive(Debug, Serialize)]
struct ReportFile<'a> {
    method: &'a str,
    mode: &'a str,
    /// Increment names in set order.
    increments: &'a [String],
    reports: Vec<ReportEntry<'a>>,
}

/// `report.toml`: stop statistics per run without the trace.
///
/// Infinite thresholds are written as `inf` / `-inf`, which TOML allows.
pub fn write_report(path: &Path, method: &str, mode: &str, increments: &[String], reports: &[EraseReport]) -> CliResult<()> {
    let file = ReportFile {
        method,
        mode,
        increments,
        reports: reports
            .iter()
            .map(|r| ReportEntry {
                concepts: &r.concepts,
                alpha: r.alpha,
                tau: r.tau,
                iters_run: r.iters_run,
                final_l_mom: r.final_l_mom,
                stop_reason: r.stop_reason.as_str(),
                delta_norm: r.delta_norm,
            })
            .collect(),
    };
    let text = toml::to_string(&file).map_err(|e| CliError::Format(e.to_string()))?;
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))
}
