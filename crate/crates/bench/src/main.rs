use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use pgf_bench::{Command, Config, Precision, RunContext};

#[derive(Parser)]
#[command(name = "pgf-bench", version, about = "Experiments for the streamed tangent engine")]
struct Cli {
    /// Flat JSON config; missing keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, value_enum)]
    precision: Option<Precision>,
    /// Worker threads for grid commands; 0 uses all cores.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    Verify,
    Invariance,
    GhostPulse,
    Stiffness,
    Memory,
    Complexity,
    Hessian,
    Params,
    /// Print the effective config as JSON.
    PrintConfig,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    let mut cfg = match &cli.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    let command = match cli.cmd {
        Cmd::PrintConfig => {
            println!("{}", cfg.to_pretty_json());
            return Ok(ExitCode::SUCCESS);
        }
        Cmd::Verify => Command::Verify,
        Cmd::Invariance => Command::Invariance,
        Cmd::GhostPulse => Command::GhostPulse,
        Cmd::Stiffness => Command::Stiffness,
        Cmd::Memory => Command::Memory,
        Cmd::Complexity => Command::Complexity,
        Cmd::Hessian => Command::Hessian,
        Cmd::Params => Command::Params,
    };
    if cli.threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cli.threads)
            .build_global()?;
    }
    let ctx = RunContext {
        out: cli.out,
        seed: cfg.seed,
        precision: cli.precision,
        threads: cli.threads,
    };
    let outcome = command.run(&cfg, &ctx)?;
    for b in &outcome.breaches {
        eprintln!("tolerance breach: {b}");
    }
    println!(
        "{}: {} ({} files in {})",
        outcome.command,
        if outcome.pass { "pass" } else { "FAIL" },
        outcome.files.len() + 1,
        ctx.out.display()
    );
    Ok(if outcome.pass { ExitCode::SUCCESS } else { ExitCode::from(1) })
}
