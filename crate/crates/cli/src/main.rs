//! `densup` command-line front end: train, evaluate, ablate and export.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use densup::data::DatasetSpec;
use densup::eval::EvalResult;
use densup::train::{
    ablate, evaluate_model, export_curves, format_table, load_inference_model, load_run, save_run, train,
    variant_name, AblationGrid, RunConfig, CONFIG_FILE,
};
use densup::Error;

#[derive(Debug, Parser)]
#[command(name = "densup", version, about = "Dense positive supervision for a toy detection transformer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train one configuration and write its run directory.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the seed of the config file.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "runs/latest")]
        out: PathBuf,
    },
    /// Evaluate a checkpoint with its stripped inference model.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset manifest (TOML).
        #[arg(long)]
        dataset: PathBuf,
        /// Run config describing the architecture; defaults to the
        /// config.toml next to the checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train every configuration of a grid and print a comparison table.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        grid: PathBuf,
        /// Directory receiving one run directory per configuration.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Rewrite the loss/AP CSVs and summary of a saved run.
    Export {
        #[arg(long)]
        run: PathBuf,
    },
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(Error::Config(_) | Error::ArchitectureMismatch(_)) => 2,
        Some(Error::NonFiniteLoss { .. }) => 3,
        Some(Error::Io { .. } | Error::Checkpoint(_) | Error::Malformed(_)) => 4,
        _ => 1,
    }
}

fn run_train(config: &Path, seed: Option<u64>, out: &Path) -> anyhow::Result<()> {
    let mut cfg = RunConfig::read(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    log::info!("training {} (seed {}) into {}", variant_name(&cfg), cfg.seed, out.display());
    let (mut run, model) = train(&cfg)?;
    save_run(&mut run, &model, out)?;
    let (epoch, ap) = run.best().unwrap_or((0, 0.0));
    println!("final AP {:.4}, best AP {:.4} at epoch {epoch}", run.final_ap(), ap);
    Ok(())
}

fn run_evaluate(checkpoint: &Path, dataset: &Path, config: Option<PathBuf>) -> anyhow::Result<()> {
    let config = config.unwrap_or_else(|| checkpoint.parent().unwrap_or(Path::new(".")).join(CONFIG_FILE));
    let cfg = RunConfig::read(&config)?;
    let data = DatasetSpec::read_manifest(dataset)?;
    if let Some(c) = data.n_classes() {
        if c != cfg.model.n_classes {
            return Err(Error::Config(format!("dataset has {c} classes, model has {}", cfg.model.n_classes)).into());
        }
    }
    let model = load_inference_model(&cfg, checkpoint)?;
    let scenes = data.load()?;
    let result = evaluate_model(&model, &scenes)?;
    println!("{}", format_eval(&result));
    Ok(())
}

fn format_eval(result: &EvalResult) -> String {
    let mut text = format!(
        "AP {:.4}\nAP50 {:.4}\nAP75 {:.4}",
        result.mean_ap,
        result.ap50(),
        result.ap_per_threshold[5]
    );
    for (class, ap) in result.per_class_ap.iter().enumerate() {
        // Classes without ground truth have no AP.
        match ap {
            Some(ap) => text.push_str(&format!("\nclass {class} AP {ap:.4}")),
            None => text.push_str(&format!("\nclass {class} AP n/a")),
        }
    }
    text
}

fn run_ablate(config: &Path, grid: &Path, out: Option<PathBuf>) -> anyhow::Result<()> {
    let base = RunConfig::read(config)?;
    let configs = AblationGrid::read(grid)?.expand(&base)?;
    log::info!("ablation over {} configurations", configs.len());
    let rows = ablate(&configs, |cfg| {
        log::info!("run {} seed {}", variant_name(cfg), cfg.seed);
        let (mut run, model) = train(cfg)?;
        if let Some(dir) = &out {
            let name = format!("{}-seed{}", variant_name(cfg), cfg.seed).replace(['(', ')', '=', '+'], "_");
            save_run(&mut run, &model, &dir.join(name))?;
        }
        Ok(run)
    })?;
    let table = format_table(&rows);
    if let Some(dir) = &out {
        let path = dir.join("ablation.md");
        std::fs::write(&path, &table).map_err(|source| Error::Io { path, source })?;
    }
    print!("{table}");
    Ok(())
}

fn run_export(dir: &Path) -> anyhow::Result<()> {
    let run = load_run(dir)?;
    export_curves(&run, dir)?;
    println!("exported {} steps and {} epochs to {}", run.history.len(), run.epochs.len(), dir.display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train { config, seed, out } => run_train(&config, seed, &out),
        Command::Evaluate {
            checkpoint,
            dataset,
            config,
        } => run_evaluate(&checkpoint, &dataset, config),
        Command::Ablate { config, grid, out } => run_ablate(&config, &grid, out),
        Command::Export { run } => run_export(&run),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
