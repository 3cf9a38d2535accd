use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::{error, info};
use restless_bai::config::{Experiment, ExperimentConfig};
use restless_bai::oracle::{self, KlCache};
use restless_bai::report::{self, BoundReport, SummaryReport};
use restless_bai::sim::{self, RunStats, TrialOptions};
use restless_bai::{validate, Error};

#[derive(Parser)]
#[command(name = "restless-bai", version, about = "Best-arm identification for restless Markov bandits")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Tabulate ρ(θ) and η(θ) over the parameter interval (family.csv).
    Family(Common),
    /// Solve for T_R* and T*_unif (bound.json).
    LowerBound(Common),
    /// Run seeded trials of the policy (trials.csv, summary.json).
    Simulate(Common),
    /// Run the invariant suite and print a table.
    Validate(Common),
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    /// Worker threads for simulate.
    #[arg(long, default_value_t = 1)]
    parallel: usize,
    #[arg(long)]
    trials: Option<u64>,
    #[arg(long)]
    delta: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

enum Failure {
    Lib(Error),
    Invariants(usize),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

fn load(common: &Common) -> Result<Experiment, Failure> {
    let text = fs::read_to_string(&common.config)
        .map_err(|e| Error::Io(format!("{}: {e}", common.config.display())))?;
    let mut cfg = ExperimentConfig::parse(&text)?;
    if let Some(t) = common.trials {
        cfg.trials = t;
    }
    if let Some(d) = common.delta {
        cfg.delta = d;
    }
    if let Some(s) = common.seed {
        cfg.master_seed = s;
    }
    if let Some(dir) = &common.output_dir {
        cfg.output_dir = dir.display().to_string();
    }
    Ok(cfg.build()?)
}

/// Writes every file or none: anything already written is removed if a
/// later write fails.
fn write_all(dir: &Path, files: &[(&str, String)]) -> Result<(), Error> {
    fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    for (name, body) in files {
        let path = dir.join(name);
        if let Err(e) = fs::write(&path, body) {
            for p in &written {
                let _ = fs::remove_file(p);
            }
            let _ = fs::remove_file(&path);
            return Err(e.into());
        }
        written.push(path);
    }
    Ok(())
}

fn cmd_family(exp: &Experiment) -> Result<(), Failure> {
    let csv = report::family_csv(&exp.generator, exp.config.family_points)?;
    write_all(Path::new(&exp.config.output_dir), &[("family.csv", csv)])?;
    Ok(())
}

fn cmd_lower_bound(exp: &Experiment) -> Result<(), Failure> {
    let mut cache = KlCache::for_instance(&exp.instance);
    let lb = oracle::t_star(&exp.instance, &exp.config.bound_solver, None, &mut cache)?;
    let t_unif = oracle::t_unif(&exp.instance, &mut cache)?;
    info!("t_star {:.6e}, t_unif {:.6e}, gap {:.2e}", lb.t_star, t_unif, lb.fw_gap);
    let body = report::to_json(&BoundReport::new(&lb, t_unif))?;
    write_all(Path::new(&exp.config.output_dir), &[("bound.json", body)])?;
    Ok(())
}

fn cmd_simulate(exp: &Experiment, threads: usize) -> Result<(), Failure> {
    let mut cache = KlCache::for_instance(&exp.instance);
    let lb = oracle::t_star(&exp.instance, &exp.config.bound_solver, None, &mut cache)?;
    let t_unif = oracle::t_unif(&exp.instance, &mut cache)?;
    let records = sim::run_batch(
        &exp.instance,
        &exp.policy,
        exp.config.trials,
        exp.config.master_seed,
        threads,
        &TrialOptions::default(),
    )?;
    let stats = RunStats::from_records(&records, exp.config.delta, exp.config.eta, lb.t_star, t_unif);
    info!(
        "{} trials: error rate {:.4}, censored {}, mean tau {:.1}",
        stats.trials, stats.error_rate, stats.censored_count, stats.mean_tau
    );
    let summary = SummaryReport::new(stats, lb.t_star, t_unif, exp.config.clone());
    write_all(
        Path::new(&exp.config.output_dir),
        &[
            ("trials.csv", report::trials_csv(&records)),
            ("summary.json", report::to_json(&summary)?),
        ],
    )?;
    Ok(())
}

fn cmd_validate(exp: &Experiment) -> Result<(), Failure> {
    let results = validate::run_suite(exp)?;
    let width = results.iter().map(|r| r.name.len()).max().unwrap_or(0);
    for r in &results {
        println!(
            "{:<width$}  {}  {}",
            r.name,
            if r.pass { "PASS" } else { "FAIL" },
            r.detail
        );
    }
    let failed = results.iter().filter(|r| !r.pass).count();
    if failed > 0 {
        Err(Failure::Invariants(failed))
    } else {
        Ok(())
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("RESTLESS_BAI_LOG", "warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Family(c) => load(c).and_then(|e| cmd_family(&e)),
        Command::LowerBound(c) => load(c).and_then(|e| cmd_lower_bound(&e)),
        Command::Simulate(c) => load(c).and_then(|e| cmd_simulate(&e, c.parallel)),
        Command::Validate(c) => load(c).and_then(|e| cmd_validate(&e)),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Invariants(n)) => {
            error!("{n} invariant(s) failed");
            ExitCode::from(3)
        }
        Err(Failure::Lib(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numerical() { 2 } else { 1 })
        }
    }
}
