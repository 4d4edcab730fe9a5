use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use orthoml::cli::{self, config, RunConfig};
use orthoml::learners::LearnerSpec;
use orthoml::sim::SimOptions;
use orthoml::Error;

/// Orthogonal machine learning estimators from the command line.
///
/// Exit codes: 0 success, 2 config error, 3 data error, 4 numerical failure.
#[derive(Parser)]
#[command(name = "orthoml", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Flat `key = value` config file.
    config: PathBuf,
    /// Override or add a config key, e.g. `--set folds=10`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    input: Option<String>,
    #[arg(long)]
    output: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    folds: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    trim: Option<f64>,
}

#[derive(Subcommand)]
enum Command {
    /// Estimate the configured target and write report.json plus CSV artifacts.
    Estimate(ConfigArgs),
    /// Placebo pre-trend check for a did_panel config with `placebo.pre` set.
    Placebo(ConfigArgs),
    /// Parse and validate a config without reading data.
    ValidateConfig(ConfigArgs),
    /// Monte Carlo study over a registered design.
    Simulate {
        #[arg(long)]
        dgp: String,
        /// Sample size (design default when omitted).
        #[arg(long)]
        n: Option<usize>,
        #[arg(long, default_value_t = 100)]
        reps: usize,
        #[arg(long)]
        seed: u64,
        /// Comma-separated estimators (design defaults when omitted).
        #[arg(long, value_delimiter = ',')]
        estimators: Vec<String>,
        #[arg(long, default_value_t = 5)]
        folds: usize,
        #[arg(long, default_value_t = 0.05)]
        alpha: f64,
        #[arg(long)]
        outcome_learner: Option<String>,
        #[arg(long)]
        treatment_learner: Option<String>,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// List registered simulation designs.
    ListDgps,
}

fn load(a: &ConfigArgs) -> orthoml::Result<RunConfig> {
    let text = std::fs::read_to_string(&a.config)
        .map_err(|e| Error::Config(format!("cannot read config `{}`: {e}", a.config.display())))?;
    let mut pairs = config::parse_pairs(&text)?;
    let mut overrides = Vec::new();
    for s in &a.set {
        let (k, v) = s.split_once('=').ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got `{s}`")))?;
        overrides.push((k.trim().to_string(), v.trim().to_string()));
    }
    let flags = [
        ("input", a.input.clone()),
        ("output", a.output.clone()),
        ("seed", a.seed.map(|v| v.to_string())),
        ("folds", a.folds.map(|v| v.to_string())),
        ("alpha", a.alpha.map(|v| v.to_string())),
        ("trim", a.trim.map(|v| v.to_string())),
    ];
    overrides.extend(flags.into_iter().filter_map(|(k, v)| v.map(|v| (k.to_string(), v))));
    config::apply_overrides(&mut pairs, &overrides)?;
    RunConfig::from_pairs(pairs)
}

fn print_report(r: &cli::Report) {
    for e in &r.estimates {
        match (e.se, e.ci) {
            (Some(se), Some((lo, hi))) => println!("{:<18} {:>12.6}  se {:.6}  ci [{:.6}, {:.6}]", e.name, e.estimate, se, lo, hi),
            (_, Some((lo, hi))) => println!("{:<18} {:>12.6}  [{:.6}, {:.6}]", e.name, e.estimate, lo, hi),
            _ => println!("{:<18} {:>12.6}", e.name, e.estimate),
        }
    }
    for w in &r.warnings {
        eprintln!("warning: {w}");
    }
}

fn learner(s: &Option<String>) -> orthoml::Result<Option<LearnerSpec>> {
    s.as_deref().map(str::parse).transpose()
}

fn run(cli: Cli) -> orthoml::Result<()> {
    match cli.command {
        Command::Estimate(a) => {
            let cfg = load(&a)?;
            let r = cli::run_estimate(&cfg).map_err(|e| context(&cfg, e))?;
            print_report(&r);
            println!("report written to {}", cfg.output.join("report.json").display());
        }
        Command::Placebo(a) => {
            let cfg = load(&a)?;
            let r = cli::did_placebo(&cfg).map_err(|e| context(&cfg, e))?;
            print_report(&r);
            println!("report written to {}", cfg.output.join("report.json").display());
        }
        Command::ValidateConfig(a) => {
            let cfg = load(&a)?;
            println!("ok: estimand {} (config hash {})", cfg.estimand, cfg.hash());
        }
        Command::Simulate { dgp, n, reps, seed, estimators, folds, alpha, outcome_learner, treatment_learner, output } => {
            let info = orthoml::sim::dgp_info(&dgp)?;
            let opts = SimOptions {
                folds,
                alpha,
                outcome: learner(&outcome_learner)?,
                treatment: learner(&treatment_learner)?,
                ..SimOptions::default()
            };
            let rep = cli::run_simulation(&dgp, n.unwrap_or(info.default_n), reps, seed, &estimators, &opts, output.as_deref())?;
            print!("{}", rep.summary_csv());
            for (r, est, msg) in &rep.failures {
                eprintln!("warning: replication {r} ({est}) failed: {msg}");
            }
        }
        Command::ListDgps => print!("{}", cli::list_dgps()),
    }
    Ok(())
}

fn context(cfg: &RunConfig, e: Error) -> Error {
    eprintln!("while running estimand {}:", cfg.estimand);
    e
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
