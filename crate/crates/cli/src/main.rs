use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use dpbilevel_cli::{
    default_config, exit, run_experiment_with_status, verify_suite, ExperimentKind, Fault, RunOverrides, VerifyOptions, OUT_DIR_ENV,
};

#[derive(Debug, Parser)]
#[command(name = "dpbilevel", version, about = "Differentially private bilevel optimization experiments")]
struct Cli {
    /// Print the default config (for `--kind`, default bilevel_full) and exit.
    #[arg(long)]
    print_defaults: bool,

    /// Experiment kind used with `--print-defaults`.
    #[arg(long, value_enum, requires = "print_defaults")]
    kind: Option<KindArg>,

    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run the experiment described by a JSON config.
    Run {
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory; overrides the config file.
        #[arg(long, env = OUT_DIR_ENV)]
        out_dir: Option<PathBuf>,
    },
    /// Run the invariant battery and print a pass/fail table.
    Verify {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Inject a deliberate fault to exercise the battery.
        #[arg(long, value_enum)]
        fault: Option<FaultArg>,
        /// Print the table as JSON.
        #[arg(long)]
        json: bool,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum KindArg {
    BilevelFull,
    BilevelMinibatch,
    RegTuning,
    LeakDemo,
    ScalingSweep,
    PropositionCheck,
    DiagnosticsSweep,
}

impl From<KindArg> for ExperimentKind {
    fn from(k: KindArg) -> Self {
        match k {
            KindArg::BilevelFull => ExperimentKind::BilevelFull,
            KindArg::BilevelMinibatch => ExperimentKind::BilevelMinibatch,
            KindArg::RegTuning => ExperimentKind::RegTuning,
            KindArg::LeakDemo => ExperimentKind::LeakDemo,
            KindArg::ScalingSweep => ExperimentKind::ScalingSweep,
            KindArg::PropositionCheck => ExperimentKind::PropositionCheck,
            KindArg::DiagnosticsSweep => ExperimentKind::DiagnosticsSweep,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum FaultArg {
    HalveL0f,
}

fn code(c: i32) -> ExitCode {
    ExitCode::from(c.clamp(0, 255) as u8)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if cli.print_defaults {
        let cfg = default_config(cli.kind.map(Into::into).unwrap_or_default());
        match serde_json::to_string_pretty(&cfg) {
            Ok(s) => {
                println!("{s}");
                return code(exit::OK);
            }
            Err(e) => {
                eprintln!("{e}");
                return code(exit::OTHER);
            }
        }
    }
    match cli.command {
        None => {
            eprintln!("nothing to do: use `run <config>`, `verify` or `--print-defaults`");
            code(exit::CONFIG)
        }
        Some(Command::Run { config, seed, out_dir }) => {
            let overrides = RunOverrides { seed, out_dir };
            let (status, result) = run_experiment_with_status(&config, &overrides);
            match result {
                Ok(o) => {
                    let out = serde_json::json!({ "kind": o.kind, "out_dir": o.out_dir, "files": o.files, "summary": o.summary });
                    println!("{}", serde_json::to_string_pretty(&out).unwrap_or_default());
                }
                Err(report) => {
                    println!("{}", serde_json::to_string_pretty(&report).unwrap_or_default());
                }
            }
            code(status)
        }
        Some(Command::Verify { seed, fault, json }) => {
            let opts = VerifyOptions { seed, fault: fault.map(|FaultArg::HalveL0f| Fault::HalveL0f) };
            match verify_suite(&opts) {
                Ok(report) => {
                    if json {
                        println!("{}", serde_json::to_string_pretty(&report).unwrap_or_default());
                    } else {
                        println!("{report}");
                    }
                    code(if report.all_passed() { exit::OK } else { exit::OTHER })
                }
                Err(e) => {
                    println!("{}", serde_json::to_string_pretty(&e.report()).unwrap_or_default());
                    code(e.exit_code())
                }
            }
        }
    }
}
