use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use npbml::config::PrecisionChoice;
use npbml::records::TASKS_FILE;
use npbml::runner::{self, checkpoint_path};
use npbml::{ablation, ExpError, ExperimentConfig, Result};
use npbml_core::eval::EvalReport;

#[derive(Parser)]
#[command(name = "npbml", version, about = "Meta-learn initializations, optimizers and loss functions on few-shot tasks")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Experiment config (TOML)
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Run a single seed instead of the config's seed list
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Print the resolved config and exit
    #[arg(long, global = true)]
    dry_run: bool,

    #[arg(long, global = true, value_enum)]
    precision: Option<PrecisionChoice>,

    /// Episodes evaluated concurrently
    #[arg(long, global = true)]
    workers: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain, meta-train and evaluate
    Run,
    /// Evaluate a saved checkpoint on meta-test tasks
    Evaluate {
        /// Defaults to the best checkpoint of the seed under --out
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Number of meta-test tasks (defaults to eval.tasks)
        #[arg(long)]
        tasks: Option<usize>,
    },
    /// Run the component and loss-term ablation tables
    Ablate {
        /// Restrict to these rows (shared rows follow their twins)
        #[arg(long, value_delimiter = ',')]
        rows: Option<Vec<u8>>,
    },
    /// Run the gradient and identity oracle suite
    Check,
}

fn load(cli: &Cli) -> Result<ExperimentConfig> {
    let path = cli
        .config
        .as_deref()
        .ok_or_else(|| ExpError::config("--config", "this command needs a config file"))?;
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(s) = cli.seed {
        cfg.seeds = vec![s];
    }
    if let Some(out) = &cli.out {
        cfg.out = Some(out.clone());
    }
    if let Some(p) = cli.precision {
        cfg.execution.precision = p;
    }
    if let Some(w) = cli.workers {
        cfg.execution.workers = w;
    }
    if cfg.name.is_empty() {
        cfg.name = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(cfg: &ExperimentConfig) -> PathBuf {
    cfg.out.clone().unwrap_or_else(|| Path::new("runs").join(&cfg.name))
}

fn print_report(report: &EvalReport) {
    for s in &report.per_seed {
        print_line(&format!("seed {}", s.seed), &s.summary);
    }
    print_line("pooled", &report.pooled);
}

fn print_line(label: &str, s: &npbml_core::eval::Summary) {
    match (s.mean_accuracy, s.accuracy_ci) {
        (Some(m), Some(c)) => println!("{label}: accuracy {:.2} ± {:.2}% over {} tasks (loss {:.4})", 100.0 * m, 100.0 * c, s.tasks, s.mean_loss),
        _ => println!("{label}: loss {:.4} ± {:.4} over {} tasks", s.mean_loss, s.loss_ci, s.tasks),
    }
}

fn execute(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Check => {
            if cli.dry_run {
                println!("check: oracle suite, seed {}", cli.seed.unwrap_or(npbml_core::verify::FROZEN_SEED));
                return Ok(());
            }
            let seed = cli.seed.unwrap_or(npbml_core::verify::FROZEN_SEED);
            npbml::check(seed, |c| println!("{c}"))?;
        }
        Command::Run => {
            let cfg = load(cli)?;
            if cli.dry_run {
                print!("{}", cfg.to_toml()?);
                return Ok(());
            }
            let out = out_dir(&cfg);
            let summary = runner::run(&cfg, Some(&out))?;
            if let Some(b) = &summary.baseline {
                print_line("initialization", &b.pooled);
            }
            print_report(&summary.report);
            println!("results in {}", out.display());
        }
        Command::Evaluate { checkpoint, tasks } => {
            let cfg = load(cli)?;
            let tasks = tasks.unwrap_or(cfg.eval.tasks);
            if cli.dry_run {
                print!("{}", cfg.to_toml()?);
                return Ok(());
            }
            let out = out_dir(&cfg);
            let mut reports = Vec::new();
            for &seed in &cfg.seeds {
                let ck = checkpoint.clone().unwrap_or_else(|| checkpoint_path(&out, seed));
                reports.push(runner::evaluate_checkpoint(&cfg, &ck, seed, tasks)?);
            }
            let report = EvalReport::merge(reports);
            std::fs::create_dir_all(&out).map_err(|e| ExpError::io(&out, e))?;
            let path = out.join(format!("eval-{TASKS_FILE}"));
            npbml::records::write_tasks(&path, &report.records)?;
            print_report(&report);
        }
        Command::Ablate { rows } => {
            let cfg = load(cli)?;
            if cli.dry_run {
                for r in ablation::ROWS.iter() {
                    println!("({}) {}: {:?}", r.id, r.label, r.variant);
                }
                return Ok(());
            }
            let out = out_dir(&cfg);
            let table = ablation::ablate(&cfg, Some(&out), rows.as_deref())?;
            print!("{}", table.render());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let category = e.category();
            eprintln!("error[{}]: {e}", category.label());
            ExitCode::from(category as u8)
        }
    }
}
