use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ramen::commands::{cmd_analyze, cmd_gen, cmd_run, cmd_verify, RunOptions};
use ramen::verify::Suite;
use ramen::{Error, Method};

/// Test-time adaptation with an embedding-gradient cache.
#[derive(Parser)]
#[command(name = "ramen", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic mixed-domain dataset.
    Gen {
        /// Stream config JSON; omitted fields take their defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run one method over a dataset and write the report.
    Run {
        /// Directory holding dataset.jsonl, metadata.json, and bank.json.
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, default_value = "ramen")]
        method: String,
        /// Engine config JSON; omitted fields take their defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Renormalize off-unit vectors instead of rejecting them.
        #[arg(long)]
        renormalize: bool,
        /// Also time the cached engine against per-entry recomputation.
        #[arg(long)]
        timing: bool,
        /// Include embeddings and gradients in memory.jsonl.
        #[arg(long)]
        snapshot_full: bool,
    },
    /// Numerical self-checks; exits with status 2 if any fails.
    Verify {
        #[arg(value_enum, default_value = "all")]
        suite: Suite,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Rebuild composition and similarity-bin tables from a run directory.
    Analyze {
        #[arg(long)]
        run: PathBuf,
        /// Dataset directory; defaults to the one in the run manifest.
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Defaults to the run directory.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn execute(cmd: Command) -> Result<(), Error> {
    match cmd {
        Command::Gen { config, out, seed } => {
            let m = cmd_gen(config.as_deref(), &out, seed)?;
            println!("wrote dataset to {} (seed {})", out.display(), m.seed.unwrap_or(0));
        }
        Command::Run {
            dataset,
            method,
            config,
            out,
            seed,
            renormalize,
            timing,
            snapshot_full,
        } => {
            let method: Method = method.parse()?;
            let report = cmd_run(&RunOptions {
                dataset,
                method,
                config,
                out: out.clone(),
                seed,
                renormalize,
                timing,
                snapshot_full,
            })?;
            println!("method {method}");
            for (d, acc) in &report.per_domain_accuracy {
                println!("  {d}: {:.4}", acc);
            }
            println!("macro average {:.4}", report.macro_average);
            if let Some(t) = report.timing {
                println!(
                    "per sample: cached {:.0} ns, recompute {:.0} ns",
                    t.cached_ns_per_sample, t.naive_ns_per_sample
                );
            }
            println!("report written to {}", out.display());
        }
        Command::Verify { suite, out } => {
            let checks = cmd_verify(suite, out.as_deref())?;
            for c in &checks {
                println!("{c}");
            }
            let failed = checks.iter().filter(|c| !c.passed).count();
            if failed > 0 {
                return Err(Error::Verification(format!("{failed} check(s) failed")));
            }
        }
        Command::Analyze {
            run,
            dataset,
            out,
            seed,
        } => {
            let report = cmd_analyze(&run, dataset.as_deref(), out.as_deref(), seed)?;
            println!("mean same-domain share {:.1}%", report.mean_diagonal());
            if let Some(b) = &report.same_domain_ratio_bins {
                let shown: Vec<String> = b.iter().map(|x| format!("{:.3}", x)).collect();
                println!("same-domain ratio by similarity decile: {}", shown.join(" "));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
