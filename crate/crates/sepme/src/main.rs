use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use sepme::config::parse_subset;
use sepme::run;
use sepme::{CliError, CliResult, ExperimentConfig, Method, Overrides};
use sepme_core::concept_repr::CorrKind;
use sepme_core::trainers::SepmeMode;

#[derive(Debug, Parser)]
#[command(name = "sepme", version, about = "Separable multi-concept erasure on a toy diffusion model")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Experiment config (TOML). Built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run directory; overrides `out`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, value_enum)]
    method: Option<Method>,
    #[arg(long, global = true, value_enum)]
    mode: Option<ModeArg>,
    /// Comma-separated increment names, e.g. "A,B". Empty selects none.
    #[arg(long, global = true)]
    subset: Option<String>,
    #[arg(long, global = true, allow_negative_numbers = true)]
    tau: Option<f64>,
    #[arg(long, global = true, value_enum)]
    corr: Option<CorrArg>,
    /// Erasure iterations (max for SepME/G-CiRs, fixed for baselines).
    #[arg(long, global = true)]
    iters: Option<usize>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train the toy diffusion model.
    TrainDm,
    /// Erase the `forget` concepts from the trained model.
    Erase,
    /// Write θ_dm plus a subset of the increments.
    Compose,
    /// Evaluate θ_dm plus a subset of the increments.
    Evaluate,
    /// Sweep τ for SepME.
    AblateTau,
    /// Check every subset of the increments for separability.
    Suite,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ModeArg {
    Simultaneous,
    Separate,
    Iterative,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum CorrArg {
    Product,
    Cosine,
}

fn config(cli: &Cli) -> CliResult<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    Overrides {
        out: cli.out.clone(),
        seed: cli.seed,
        method: cli.method,
        mode: cli.mode.map(|m| match m {
            ModeArg::Simultaneous => SepmeMode::Simultaneous,
            ModeArg::Separate => SepmeMode::Separate,
            ModeArg::Iterative => SepmeMode::Iterative,
        }),
        subset: cli.subset.as_deref().map(parse_subset),
        tau: cli.tau,
        corr: cli.corr.map(|c| match c {
            CorrArg::Product => CorrKind::Product,
            CorrArg::Cosine => CorrKind::Cosine,
        }),
        iters: cli.iters,
    }
    .apply(&mut cfg)?;
    Ok(cfg)
}

fn execute(cli: &Cli) -> CliResult<()> {
    let cfg = config(cli)?;
    let out = cfg.out.display();
    match cli.command {
        Command::TrainDm => {
            let r = run::cmd_train_dm(&cfg)?;
            println!("L_DM {:.6} -> {:.6}", r.initial_loss, r.final_loss);
            println!("wrote {out}/{}", run::THETA_DM);
        }
        Command::Erase => {
            let o = run::cmd_erase(&cfg)?;
            for r in &o.reports {
                println!(
                    "{}: {} after {} iters, L_mom {}, |dtheta|_p {:.6}",
                    r.concepts.join("+"),
                    r.stop_reason.as_str(),
                    r.iters_run,
                    r.final_l_mom.map_or("-".into(), |v| format!("{v:.3e}")),
                    r.delta_norm
                );
            }
            println!("wrote {} increment(s) to {out}/{}", o.increments.len(), run::INCREMENTS);
        }
        Command::Compose => {
            let p = run::cmd_compose(&cfg)?;
            println!("wrote {}", p.display());
        }
        Command::Evaluate => {
            let o = run::cmd_evaluate(&cfg)?;
            for w in &o.warnings {
                eprintln!("warning: {w}");
            }
            println!("concept  acc_before  acc_after  distance  corr");
            for c in &o.report.concepts {
                println!(
                    "{:<8} {:>10.3} {:>10.3} {:>9.4} {:>9.3e}",
                    c.concept, c.acc_before, c.acc_after, c.distance, c.corr
                );
            }
            println!("|dtheta|_p {:.6}; wrote {out}/eval.csv", o.report.delta_norm);
        }
        Command::AblateTau => {
            let rows = run::cmd_ablate(&cfg)?;
            for r in &rows {
                println!("tau {:>9.1e}  iters {:>5}  |dtheta|_p {:.6}", r.tau, r.iters_run, r.delta_norm);
            }
            println!("wrote {out}/ablation.csv");
        }
        Command::Suite => {
            let cells = run::cmd_suite(&cfg)?;
            let failed = cells.iter().filter(|c| !c.pass).count();
            println!("{} checks, {failed} failed; wrote {out}/subsets.csv", cells.len());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if let Some(h) = e.hint() {
                eprintln!("hint: {h}");
            }
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &CliError) -> u8 {
    e.exit_code() as u8
}
