use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};

use blofin::experiment::{self, ExperimentError, RunConfig, Sweep};
use blofin::gradcheck;

#[derive(Parser)]
#[command(
    name = "blofin",
    version,
    about = "Bi-level LoRA/prompt fine-tuning on a toy segmentation task"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// key=value config file; `#` starts a comment.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Override one config key, applied after the file. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Train every configured seed and write metrics, summary and curves.
    Train,
    /// Compare autodiff gradients with central finite differences.
    Gradcheck {
        /// Add a node with a deliberately wrong derivative (negative control).
        #[arg(long, hide = true)]
        with_corrupted_fixture: bool,
    },
    /// Check the hypergradient estimator against closed-form and exact oracles.
    Oracle,
    /// Sweep one setting (order, lambda or rank) over the configured seeds.
    Ablate { which: String },
}

fn load_config(cli: &Cli) -> Result<RunConfig, ExperimentError> {
    let mut cfg = match &cli.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| ExperimentError::Config(format!("{}: {e}", path.display())))?;
            RunConfig::parse(&text)?
        }
        None => RunConfig::default(),
    };
    for pair in &cli.overrides {
        cfg.apply_override(pair)?;
    }
    if let Some(out) = std::env::var_os("BLOFIN_OUT") {
        cfg.out_dir = PathBuf::from(out);
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<(), ExperimentError> {
    let cfg = load_config(cli)?;
    let start = Instant::now();
    match &cli.command {
        Command::Train => {
            let runs = experiment::train(&cfg)?;
            for r in &runs {
                let o = &r.outcome;
                println!(
                    "seed {}: best epoch {} (d2 dice {:.4}) test dice {:.4} | final train {:.4} test {:.4} gap {:.4}",
                    r.seed,
                    o.best_epoch,
                    o.best().d2_val.dice,
                    o.best_test_dice(),
                    o.last().train.dice,
                    o.last().test.dice,
                    o.final_gap()
                );
            }
            println!(
                "wrote {} ({:.1}s)",
                cfg.out_dir.display(),
                start.elapsed().as_secs_f64()
            );
        }
        Command::Gradcheck {
            with_corrupted_fixture,
        } => {
            let mut cases =
                gradcheck::standard_cases(0).map_err(|e| ExperimentError::Run(e.to_string()))?;
            if *with_corrupted_fixture {
                cases.push(gradcheck::corrupted_case(0));
            }
            let report =
                gradcheck::run(&cases, 0).map_err(|e| ExperimentError::Numerical(e.to_string()))?;
            print!("{}", report.render());
            if !report.passed() {
                let failed: Vec<&str> = report
                    .results
                    .iter()
                    .filter(|r| r.max_rel_error >= report.tolerance)
                    .map(|r| r.name.as_str())
                    .collect();
                return Err(ExperimentError::Check(format!(
                    "gradient mismatch in {}",
                    failed.join(", ")
                )));
            }
        }
        Command::Oracle => {
            let report = experiment::oracle_suite()?;
            print!("{}", report.render());
            if !report.passed() {
                return Err(ExperimentError::Check(
                    "hypergradient oracle thresholds missed".into(),
                ));
            }
        }
        Command::Ablate { which } => {
            let sweep: Sweep = which.parse()?;
            let rows = experiment::ablate(&cfg, sweep)?;
            print!("{}", experiment::render_ablation(&rows));
            println!(
                "wrote {} ({:.1}s)",
                cfg.out_dir
                    .join(format!("ablate_{}", sweep.as_str()))
                    .display(),
                start.elapsed().as_secs_f64()
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("blofin: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
