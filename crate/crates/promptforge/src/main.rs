use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use promptforge::data::{generate_synthetic, load_directory, write_directory, Dataset};
use promptforge::eval::{evaluate_with, export_heatmap, harmonic_mean, record_for};
use promptforge::experiment::{run_experiment, DataSource, ExperimentConfig};
use promptforge::par::Execution;
use promptforge::trainer::{encode_dataset, Checkpoint, TrainedState};

#[derive(Parser)]
#[command(name = "promptforge", version, about = "Few-shot prompt learning on toy vision-language encoders")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Base,
    New,
    Both,
}

#[derive(Subcommand)]
enum Command {
    /// Render the synthetic colored-shape dataset as root/<class>/<n>.ppm.
    GenData {
        #[arg(long, default_value_t = 8)]
        classes: usize,
        #[arg(long, default_value_t = 64)]
        per_class: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and evaluate every method and seed listed in a config file.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Overrides out_dir from the config.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a dataset directory.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = SplitArg::Both)]
        split: SplitArg,
    },
    /// Write one prompt's attention over the patch grid as P2 graymap + CSV.
    Heatmap {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: usize,
        #[arg(long = "class")]
        class: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
    },
}

fn load_checkpoint(path: &Path, data: Option<&PathBuf>) -> Result<(TrainedState, Dataset)> {
    let ck = Checkpoint::load(path)?;
    let ds = match data {
        Some(d) => load_directory(d)?,
        None => {
            let src = ck
                .meta
                .iter()
                .find(|(k, _)| k == "data")
                .map(|(_, v)| v.clone())
                .context("checkpoint has no data source; pass --data")?;
            DataSource::parse(&src)?.load()?
        }
    };
    let state = ck.into_state();
    let needed = state.split.base_classes.len() + state.split.new_classes.len();
    if ds.num_classes() != needed {
        bail!(
            "dataset has {} classes but the checkpoint split covers {needed}",
            ds.num_classes()
        );
    }
    Ok((state, ds))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData {
            classes,
            per_class,
            seed,
            out,
        } => {
            let ds = generate_synthetic(classes, per_class, seed)?;
            write_directory(&ds, &out)?;
            println!("wrote {} images in {} classes to {}", ds.len(), ds.num_classes(), out.display());
        }
        Command::Run { config, out } => {
            let text = std::fs::read_to_string(&config).with_context(|| format!("reading {}", config.display()))?;
            let mut cfg = ExperimentConfig::parse(&text)?;
            if let Some(o) = out {
                cfg.out_dir = o;
            }
            let res = run_experiment(&cfg)?;
            print!("{}", promptforge::eval::markdown_table(&res.averaged));
            println!("reports written to {}", cfg.out_dir.display());
        }
        Command::Eval { checkpoint, data, split } => {
            let (state, ds) = load_checkpoint(&checkpoint, data.as_ref())?;
            let bank = encode_dataset(&state.weights, &ds, Execution::default())?;
            let acc = |classes: &[usize]| evaluate_with(&state, &ds, &bank, classes, Execution::default());
            println!("method,split,accuracy");
            let method = state.config.method.name();
            match split {
                SplitArg::Base => println!("{method},base,{:.4}", acc(&state.split.base_classes)?.accuracy),
                SplitArg::New => println!("{method},new,{:.4}", acc(&state.split.new_classes)?.accuracy),
                SplitArg::Both => {
                    let b = acc(&state.split.base_classes)?.accuracy;
                    let n = acc(&state.split.new_classes)?.accuracy;
                    println!("{method},base,{b:.4}\n{method},new,{n:.4}\n{method},hos,{:.4}", harmonic_mean(b, n));
                }
            }
        }
        Command::Heatmap {
            checkpoint,
            image,
            class,
            out,
            data,
        } => {
            let (state, ds) = load_checkpoint(&checkpoint, data.as_ref())?;
            let rec = record_for(&state, &ds, image)?;
            let art = export_heatmap(&rec, image, class, &out)?;
            println!(
                "wrote {}x{} heatmap for class {} to {} and {}",
                art.rows,
                art.cols,
                rec.class_names[class],
                out.display(),
                out.with_extension("csv").display()
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
