//! Command-line front end: `gen-data`, `train`, `eval`, `ablate`, `inspect`.
//!
//! Exit codes: 0 success, 1 config error, 2 numeric failure, 3 I/O error.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use dsamgn_core::config::{RunConfig, SplitName};
use dsamgn_core::data::{generate_dataset, Dataset};
use dsamgn_core::harness::{ablate_beta, ablation_table, evaluate, inspect, inspect_files, train};
use dsamgn_core::io::Container;
use dsamgn_core::model::Model;
use dsamgn_core::Error;

#[derive(Parser)]
#[command(name = "dsamgn", version, about = "Attention-adjacency graph network on synthetic re-ID data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset container.
    GenData(Args),
    /// Train a model and write the checkpoint and training log.
    Train(Args),
    /// Evaluate a checkpoint and write the metrics report.
    Eval(Args),
    /// Train one model per percentile and write a comparison table.
    Ablate(Args),
    /// Dump similarity/adjacency matrices of one sample as CSV.
    Inspect(Args),
}

#[derive(clap::Args)]
struct Args {
    /// Run configuration (TOML key/value file).
    #[arg(long)]
    config: PathBuf,
}

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
}

fn write(path: &Path, contents: &str) -> Result<(), Error> {
    fs::write(path, contents).map_err(|e| io_err(path, e))
}

fn ensure_dir(dir: &Path) -> Result<(), Error> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

fn load_data(cfg: &RunConfig) -> Result<Dataset, Error> {
    Dataset::from_container(&Container::load(&cfg.data)?)
}

fn load_model(cfg: &RunConfig) -> Result<Model, Error> {
    Model::from_container(&Container::load(&cfg.checkpoint)?)
}

fn run(command: Command) -> Result<(), Error> {
    let args = match &command {
        Command::GenData(a)
        | Command::Train(a)
        | Command::Eval(a)
        | Command::Ablate(a)
        | Command::Inspect(a) => a,
    };
    let cfg = RunConfig::load(&args.config)?;
    match command {
        Command::GenData(_) => {
            let data = generate_dataset(&cfg.synthetic)?;
            if let Some(dir) = cfg.data.parent() {
                ensure_dir(dir)?;
            }
            data.to_container()?.save(&cfg.data)?;
            println!(
                "wrote {} ({} train, {} query, {} gallery)",
                cfg.data.display(),
                data.train.len(),
                data.query.len(),
                data.gallery.len()
            );
        }
        Command::Train(_) => {
            let model_cfg = cfg.model_config()?;
            let data = load_data(&cfg)?;
            ensure_dir(&cfg.out_dir)?;
            let outcome = train(&model_cfg, &cfg.train, &cfg.loss, &data, Some(&cfg.out_dir))?;
            if let Some(dir) = cfg.checkpoint.parent() {
                ensure_dir(dir)?;
            }
            outcome.model.to_container()?.save(&cfg.checkpoint)?;
            let log_path = cfg.out_dir.join("train.log");
            write(&log_path, &(outcome.log.join("\n") + "\n"))?;
            let report = evaluate(&outcome.model, &data)?.report();
            let metrics_path = cfg.out_dir.join("train_metrics.json");
            write(&metrics_path, &serde_json::to_string_pretty(&report)?)?;
            println!(
                "wrote {} after {} steps; mAP={:.4} rank1={:.4} rank5={:.4}",
                cfg.checkpoint.display(),
                outcome.steps.len(),
                report.map,
                report.rank1,
                report.rank5
            );
        }
        Command::Eval(_) => {
            let model = load_model(&cfg)?;
            let data = load_data(&cfg)?;
            let report = evaluate(&model, &data)?.report();
            ensure_dir(&cfg.out_dir)?;
            let path = cfg.out_dir.join("metrics.json");
            write(&path, &serde_json::to_string_pretty(&report)?)?;
            println!(
                "mAP={:.4} rank1={:.4} rank5={:.4} ({} excluded); wrote {}",
                report.map,
                report.rank1,
                report.rank5,
                report.excluded_queries,
                path.display()
            );
        }
        Command::Ablate(_) => {
            let model_cfg = cfg.model_config()?;
            let data = load_data(&cfg)?;
            ensure_dir(&cfg.out_dir)?;
            let rows = ablate_beta(
                &model_cfg,
                &cfg.train,
                &cfg.loss,
                &data,
                &cfg.ablate.betas,
                Some(&cfg.out_dir),
            )?;
            let table = ablation_table(&rows);
            write(&cfg.out_dir.join("ablation.json"), &serde_json::to_string_pretty(&rows)?)?;
            write(&cfg.out_dir.join("ablation.txt"), &table)?;
            print!("{table}");
        }
        Command::Inspect(_) => {
            let model = load_model(&cfg)?;
            let data = load_data(&cfg)?;
            let split = match cfg.inspect.split {
                SplitName::Train => &data.train,
                SplitName::Query => &data.query,
                SplitName::Gallery => &data.gallery,
            };
            let sample = split.x.index_outer(cfg.inspect.index).map_err(|_| {
                Error::Config(format!(
                    "inspect index {} outside a split of {} samples",
                    cfg.inspect.index,
                    split.len()
                ))
            })?;
            let dumps = inspect(&model, &sample)?;
            let dir = cfg.out_dir.join("inspect");
            ensure_dir(&dir)?;
            for (name, contents) in inspect_files(&dumps)? {
                write(&dir.join(name), &contents)?;
            }
            for d in &dumps {
                println!(
                    "block {} branch {}: threshold {:.6e}, {} of {} edges kept",
                    d.block,
                    d.branch,
                    d.adjacency.threshold,
                    d.nonzeros(),
                    d.s.numel()
                );
            }
            println!("wrote {}", dir.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("dsamgn: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
