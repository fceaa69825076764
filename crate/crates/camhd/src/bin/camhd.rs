use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use camhd::error::Error;
use camhd::harness::{
    bench, emit_csv, emit_sweep_csv, gamma_ratio_sweep, run_experiment, ExperimentConfig,
};
use camhd::verify::run_suites;

#[derive(Parser)]
#[command(name = "camhd", about = "Multi-level adaptive learning-rate experiments")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train the configured model over one or more seeds.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated seed list overriding the config.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        /// Output directory for CSV logs and the summary.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sweep the initial global combination weight over a grid.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated grid of initial global weights in [0,1].
        #[arg(long, value_delimiter = ',')]
        grid: Vec<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the analytical verification suites.
    Verify {
        #[arg(long, default_value = "all")]
        suite: String,
    },
    /// Compare step time of the multi-level mode against its base rule.
    Bench {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 30)]
        steps: u64,
    },
}

fn exit_code_for(e: &Error) -> ExitCode {
    match e {
        Error::Config(_) => ExitCode::from(2),
        _ => ExitCode::from(1),
    }
}

fn run(cli: Cli) -> Result<ExitCode, Error> {
    match cli.cmd {
        Cmd::Train { config, seeds, out } => {
            let mut cfg = ExperimentConfig::from_path(&config)?;
            if let Some(seeds) = seeds {
                cfg.seeds = seeds;
            }
            if let Some(out) = out {
                cfg.out_dir = Some(out);
            }
            cfg.validate()?;
            let outcome = run_experiment(&cfg)?;
            if let Some(dir) = &cfg.out_dir {
                std::fs::create_dir_all(dir)?;
                for rec in &outcome.records {
                    emit_csv(
                        std::slice::from_ref(rec),
                        &dir.join(format!("run_seed{}.csv", rec.seed)),
                    )?;
                }
                std::fs::write(
                    dir.join("summary.json"),
                    serde_json::to_string_pretty(&outcome.summary)
                        .map_err(|e| Error::Config(e.to_string()))?,
                )?;
            }
            for rec in &outcome.records {
                println!(
                    "seed {}: final val acc {}  ms/step {:.3}{}",
                    rec.seed,
                    rec.final_val_acc
                        .map(|a| format!("{a:.2}%"))
                        .unwrap_or_else(|| "-".into()),
                    rec.ms_per_step,
                    if rec.diverged { "  [diverged]" } else { "" },
                );
            }
            let s = &outcome.summary;
            match (s.mean_val_acc, s.stderr_val_acc) {
                (Some(m), Some(se)) => println!(
                    "mean val acc {m:.2}% +/- {se:.2} over {} seeds ({} diverged)",
                    s.n_seeds, s.n_diverged
                ),
                _ => println!("all {} seeds diverged", s.n_seeds),
            }
            Ok(if s.n_diverged > 0 { ExitCode::from(1) } else { ExitCode::SUCCESS })
        }
        Cmd::Sweep { config, grid, out } => {
            let cfg = ExperimentConfig::from_path(&config)?;
            let table = gamma_ratio_sweep(&cfg, &grid)?;
            for r in &table.rows {
                println!(
                    "gamma_global={:.3} trainable={} mean acc {} +/- {}",
                    r.gamma_global,
                    r.trainable,
                    r.mean_acc.map(|m| format!("{m:.2}%")).unwrap_or_else(|| "-".into()),
                    r.stderr.map(|s| format!("{s:.2}")).unwrap_or_else(|| "-".into()),
                );
            }
            let dir = out.or(cfg.out_dir.clone()).unwrap_or_else(|| PathBuf::from("."));
            std::fs::create_dir_all(&dir)?;
            emit_sweep_csv(&table, &dir.join("sweep.csv"))?;
            let diverged = table.cells.iter().any(|c| c.final_acc.is_none());
            Ok(if diverged { ExitCode::from(1) } else { ExitCode::SUCCESS })
        }
        Cmd::Verify { suite } => {
            let reports = run_suites(&suite)?;
            let mut all_ok = true;
            for r in &reports {
                println!(
                    "{}",
                    serde_json::to_string(r).map_err(|e| Error::Config(e.to_string()))?
                );
            }
            for r in &reports {
                all_ok &= r.passed;
                println!(
                    "suite {}: {} ({} cases, max rel dev {:.3e}, tol {:.0e})",
                    r.suite,
                    if r.passed { "PASS" } else { "FAIL" },
                    r.cases,
                    r.max_rel_dev,
                    r.tol,
                );
                for n in &r.notes {
                    println!("  note: {n}");
                }
                for f in &r.failures {
                    println!("  failure: {f}");
                }
            }
            Ok(if all_ok { ExitCode::SUCCESS } else { ExitCode::from(1) })
        }
        Cmd::Bench { config, steps } => {
            let cfg = ExperimentConfig::from_path(&config)?;
            let rep = bench(&cfg, steps)?;
            println!(
                "base {:.3} ms/step, multi-level {:.3} ms/step, ratio {:.3}",
                rep.base_ms_per_step, rep.cam_ms_per_step, rep.ratio
            );
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code_for(&e)
        }
    }
}
