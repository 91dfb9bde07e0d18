use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use phient::cli::{run, Command, Overrides, EXIT_CONFIG};

#[derive(Parser)]
#[command(name = "phient", version, about = "Curvature estimates, Fokker-Planck solves and Φ-entropy checks")]
struct Args {
    #[command(subcommand)]
    command: Cmd,
    /// Run configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory; overrides `output.directory`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Test-battery seed; overrides `verify.seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Time step; overrides `solver.dt`.
    #[arg(long, global = true)]
    dt: Option<f64>,
    /// Final time; overrides `solver.t_end`.
    #[arg(long = "t-end", global = true)]
    t_end: Option<f64>,
}

#[derive(Subcommand, Clone, Copy)]
enum Cmd {
    /// Curvature constant ρ of the model.
    CheckCd,
    /// Solve the Fokker-Planck equation and write snapshots.
    Solve,
    /// Run the verification suite and write report.json and decay CSVs.
    Verify,
    /// Summarize an existing report.json.
    Report,
}

fn main() -> ExitCode {
    let args = match Args::try_parse() {
        Ok(a) => a,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_CONFIG as u8 } else { 0 });
        }
    };
    let command = match args.command {
        Cmd::CheckCd => Command::CheckCd,
        Cmd::Solve => Command::Solve,
        Cmd::Verify => Command::Verify,
        Cmd::Report => Command::Report,
    };
    let overrides = Overrides {
        out: args.out,
        seed: args.seed,
        dt: args.dt,
        t_end: args.t_end,
    };
    let out = run(command, args.config.as_deref(), &overrides);
    if !out.stdout.is_null() {
        println!("{}", serde_json::to_string_pretty(&out.stdout).expect("serializable"));
    }
    for line in &out.stderr {
        eprintln!("{line}");
    }
    ExitCode::from(out.code as u8)
}

