//! `regime-smp` command-line tool.
//!
//! Exit codes: 0 pass, 1 failed verification, 2 bad configuration or input,
//! 3 numerical or I/O abort.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use regime_smp::run::{exit_code, run, Command, RunRequest};

#[derive(Parser)]
#[command(
    name = "regime-smp",
    version,
    about = "Maximum-principle verification for regime-switching mean-field control"
)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Simulate state and cost for the scenario control.
    Simulate(Common),
    /// Solve first- and second-order adjoints and the degeneracy check.
    Adjoint(Common),
    /// Check the stochastic maximum principle for the scenario control.
    VerifyMp(Common),
    /// Spike-variation rate study on the ε ladder.
    RateStudy(Common),
    /// Brute-force LQ optimum followed by maximum-principle verification.
    LqDemo(Common),
    /// Terminal-constraint verification along the penalty ladder.
    ConstrainedDemo(Common),
    /// Built-in fixtures with known answers.
    Selftest(SelftestArgs),
}

#[derive(Args)]
struct Common {
    /// Scenario JSON file.
    #[arg(long)]
    scenario: PathBuf,
    /// Master seed override.
    #[arg(long)]
    seed: Option<u64>,
    /// Particle count override.
    #[arg(long)]
    particles: Option<usize>,
    /// Time-step override.
    #[arg(long)]
    steps: Option<usize>,
    /// Worker threads.
    #[arg(long)]
    workers: Option<usize>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Write every particle path.
    #[arg(long)]
    dump_paths: bool,
    /// Skip the coefficient assumption checks.
    #[arg(long)]
    skip_validate: bool,
}

#[derive(Args)]
struct SelftestArgs {
    /// Worker threads.
    #[arg(long)]
    workers: Option<usize>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

fn request(command: Command, c: Common) -> RunRequest {
    RunRequest {
        command,
        scenario: Some(c.scenario),
        seed: c.seed,
        particles: c.particles,
        steps: c.steps,
        workers: c.workers,
        out: c.out,
        dump_paths: c.dump_paths,
        skip_validate: c.skip_validate,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let req = match cli.command {
        Cmd::Simulate(c) => request(Command::Simulate, c),
        Cmd::Adjoint(c) => request(Command::Adjoint, c),
        Cmd::VerifyMp(c) => request(Command::VerifyMp, c),
        Cmd::RateStudy(c) => request(Command::RateStudy, c),
        Cmd::LqDemo(c) => request(Command::LqDemo, c),
        Cmd::ConstrainedDemo(c) => request(Command::ConstrainedDemo, c),
        Cmd::Selftest(s) => RunRequest {
            command: Command::Selftest,
            scenario: None,
            seed: None,
            particles: None,
            steps: None,
            workers: s.workers,
            out: s.out,
            dump_paths: false,
            skip_validate: false,
        },
    };
    let result = run(&req);
    match &result {
        Ok(o) => println!(
            "{}: {} ({})",
            req.command.name(),
            if o.passed { "PASS" } else { "FAIL" },
            o.report.display()
        ),
        Err(e) => eprintln!("error: {e}"),
    }
    ExitCode::from(exit_code(&result) as u8)
}
