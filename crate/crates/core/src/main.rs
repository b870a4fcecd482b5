use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use dipsvd::allocator::bayes::Surrogate;
use dipsvd::allocator::heuristic::EnergyMode;
use dipsvd::pipeline::{
    cmd_allocate, cmd_compress, cmd_report, cmd_verify_loss, render_allocation, render_report,
    AllocatorKind, Command, RunConfig, WhiteningMode,
};
use dipsvd::Error;

#[derive(Parser)]
#[command(name = "dipsvd", version, about = "Importance-protected truncated-SVD compression")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Compress a model and write factors, manifest and report.
    Compress(RunArgs),
    /// Compute a per-layer plan and the score table.
    Allocate(RunArgs),
    /// Check observed truncation loss against the singular values on random instances.
    VerifyLoss {
        #[arg(long, default_value_t = 100)]
        instances: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Damping; the loss identity is only judged at 0.
        #[arg(long, default_value_t = 0.0)]
        lambda: f64,
        /// Print the record as JSON.
        #[arg(long)]
        json: bool,
    },
    /// Render a saved report.json (or a directory containing one).
    Report { path: PathBuf },
}

#[derive(Args)]
struct RunArgs {
    /// Model spec JSON; a default 4-layer random model when omitted.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Calibration matrix (.dsvd or .csv); seeded synthetic input when omitted.
    #[arg(long)]
    calibration: Option<PathBuf>,
    #[arg(long, default_value_t = 256)]
    calibration_rows: usize,
    #[arg(short, long, default_value_t = 0.3)]
    k: f64,
    /// Amplification of important channels.
    #[arg(long, default_value_t = 30.0)]
    amplify: f64,
    /// Fraction of channels amplified.
    #[arg(long, default_value_t = 0.03)]
    top_fraction: f64,
    #[arg(long, default_value_t = 0.25)]
    beta: f64,
    #[arg(long, default_value_t = 0.95)]
    tau: f64,
    #[arg(long, default_value_t = 0.25)]
    p_min: f64,
    /// Whitening damping; defaults to 1e-6 · trace(G) / n.
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long, default_value = "squares")]
    energy_mode: EnergyMode,
    #[arg(long, default_value = "heuristic")]
    allocator: AllocatorKind,
    #[arg(long, default_value = "channel-weighted")]
    whitening: WhiteningMode,
    /// Overridden by DIPSVD_SEED.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(short, long)]
    output: Option<PathBuf>,
    #[arg(long, default_value_t = 64)]
    bo_budget: usize,
    #[arg(long)]
    bo_seed: Option<u64>,
    #[arg(long, default_value = "gp-ei")]
    surrogate: Surrogate,
    /// Print JSON instead of the text table.
    #[arg(long)]
    json: bool,
}

impl RunArgs {
    fn config(&self, command: Command) -> RunConfig {
        RunConfig {
            model: self.model.clone(),
            calibration: self.calibration.clone(),
            calibration_rows: self.calibration_rows,
            k: self.k,
            amplify: self.amplify,
            top_fraction: self.top_fraction,
            beta: self.beta,
            tau: self.tau,
            p_min: self.p_min,
            lambda: self.lambda,
            energy_mode: self.energy_mode,
            allocator: self.allocator,
            whitening: self.whitening,
            seed: self.seed,
            output: self.output.clone(),
            bo_budget: self.bo_budget,
            bo_seed: self.bo_seed,
            surrogate: self.surrogate,
            ..RunConfig::new(command)
        }
    }
}

fn run(cli: Cli) -> Result<bool, Error> {
    match cli.command {
        Cmd::Compress(args) => {
            let mut cfg = args.config(Command::Compress);
            cfg.apply_env()?;
            let report = cmd_compress(&cfg)?;
            if args.json {
                println!("{}", serde_json::to_string_pretty(&report)?);
            } else {
                print!("{}", render_report(&report));
            }
            Ok(true)
        }
        Cmd::Allocate(args) => {
            let mut cfg = args.config(Command::Allocate);
            cfg.apply_env()?;
            let (out, _) = cmd_allocate(&cfg)?;
            if args.json {
                println!("{}", serde_json::to_string_pretty(&out)?);
            } else {
                print!("{}", render_allocation(&out));
            }
            Ok(true)
        }
        Cmd::VerifyLoss { instances, seed, lambda, json } => {
            let mut cfg = RunConfig::new(Command::VerifyLoss);
            cfg.instances = instances;
            cfg.seed = seed;
            cfg.lambda = Some(lambda);
            cfg.apply_env()?;
            cfg.validate()?;
            let rec = cmd_verify_loss(&cfg);
            if json {
                println!("{}", serde_json::to_string_pretty(&rec)?);
            } else {
                println!(
                    "{} instances, lambda {:e}{}: max rel deviation single {:.3e}, subset {:.3e} (tolerance {:.0e}) -> {}",
                    rec.instances,
                    rec.lambda,
                    if rec.damped { " [damped]" } else { "" },
                    rec.max_rel_dev_single,
                    rec.max_rel_dev_subset,
                    rec.tolerance,
                    if rec.damped { "reported" } else if rec.passed { "PASS" } else { "FAIL" }
                );
                for s in &rec.singular {
                    println!("  {s}");
                }
                println!("rank-deficient probe: {}", rec.rank_deficient_probe);
            }
            Ok(rec.passed)
        }
        Cmd::Report { path } => {
            print!("{}", cmd_report(&path)?);
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
