use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use rasp_core::config::{ExperimentConfig, MemoryKind};
use rasp_core::engine::checkpoint::Checkpoint;
use rasp_core::evalkit::{read_trace, write_plot, write_report, MetricsReport, ReportPaths};
use rasp_core::pipeline::Pipeline;
use rasp_core::protocol::{ProtocolMode, Sample};
use rasp_core::synthdata::{
    default_shape_taxonomy, export_dataset, generate_dataset, load_dataset, GenConfig,
};

#[derive(Parser)]
#[command(
    name = "rasp",
    version,
    about = "Weakly supervised class-incremental segmentation with a semantic prior"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum MemoryArg {
    None,
    Episodic,
    External,
}

#[derive(Clone, Copy, ValueEnum)]
enum Split {
    Train,
    Eval,
}

impl Split {
    fn dir(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Eval => "eval",
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write the shape taxonomy, train/eval datasets and a starter config.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 600)]
        train: usize,
        #[arg(long, default_value_t = 200)]
        eval: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
    },
    /// Train the base model with dense masks.
    TrainBase {
        #[arg(long)]
        config: PathBuf,
        /// Directory written by gen-data.
        #[arg(long)]
        data: PathBuf,
        /// Output directory for checkpoints and reports.
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run one incremental step on top of the previous step's checkpoint.
    TrainIncremental {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        step: usize,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        lambda_rasp: Option<f64>,
        #[arg(long, value_enum)]
        memory: Option<MemoryArg>,
        #[arg(long)]
        memory_manifest: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a dataset split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value_t = Split::Eval)]
        split: Split,
        /// Directory for report.csv and report.json; stdout gets the JSON otherwise.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render per-step mIoU curves from a reports file.
    Plot {
        #[arg(long)]
        trace: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_split(data: &Path, split: &str) -> Result<Vec<Sample>> {
    let (_, samples) = load_dataset(&data.join(split))
        .with_context(|| format!("loading {split} split from {}", data.display()))?;
    Ok(samples)
}

fn load_config(path: &Path, seed: Option<u64>) -> Result<ExperimentConfig> {
    let cfg = ExperimentConfig::load(path)?;
    Ok(match seed {
        Some(s) => cfg.with_seed(s),
        None => cfg,
    })
}

fn checkpoint_path(run: &Path, step: usize) -> PathBuf {
    run.join(format!("step{step}.ckpt.json"))
}

/// Stores the report of a step next to the run and updates the run's
/// list of per-step reports.
fn record(run: &Path, report: &MetricsReport) -> Result<()> {
    write_report(
        report,
        &ReportPaths::in_dir(run, &format!("step{}", report.step)),
    )?;
    let list = run.join("reports.json");
    let mut reports = if list.exists() {
        read_trace(&list)?
    } else {
        Vec::new()
    };
    reports.retain(|r| r.step != report.step);
    reports.push(report.clone());
    reports.sort_by_key(|r| r.step);
    fs::write(&list, serde_json::to_string_pretty(&reports)?)
        .with_context(|| format!("writing {}", list.display()))?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData {
            out,
            seed,
            train,
            eval,
            size,
        } => {
            let tax = default_shape_taxonomy();
            fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            for (split, n, offset) in [("train", train, 0u64), ("eval", eval, 1)] {
                let cfg = GenConfig {
                    n,
                    height: size,
                    width: size,
                    seed: seed.wrapping_mul(2).wrapping_add(offset),
                    ..GenConfig::default()
                };
                let data = generate_dataset(&tax, &cfg)?;
                export_dataset(&out.join(split), &tax.registry, &data)?;
            }
            tax.embeddings.save(&out.join("embeddings.json"))?;
            let mut cfg = ExperimentConfig::shapes(4, 2, ProtocolMode::Disjoint);
            cfg.embeddings_path = Some(PathBuf::from("embeddings.json"));
            cfg.save(&out.join("config.json"))?;
            println!(
                "wrote {} train / {} eval samples to {}",
                train,
                eval,
                out.display()
            );
        }
        Command::TrainBase {
            config,
            data,
            run,
            seed,
        } => {
            let pipe = Pipeline::new(load_config(&config, seed)?)?;
            let train = load_split(&data, "train")?;
            let eval = load_split(&data, "eval")?;
            fs::create_dir_all(&run).with_context(|| format!("creating {}", run.display()))?;
            let (model, losses) = pipe.train_base(&train)?;
            Checkpoint::from_model(&model, 0, pipe.config_hash())
                .save(&checkpoint_path(&run, 0))?;
            fs::write(
                run.join("step0_trace.json"),
                serde_json::to_string_pretty(&losses)?,
            )?;
            let report = pipe.evaluate(&model, &eval, 0)?;
            record(&run, &report)?;
            println!(
                "step 0: mIoU base {:.4} all {:.4}",
                report.miou_base, report.miou_all
            );
        }
        Command::TrainIncremental {
            config,
            data,
            run,
            step,
            seed,
            lambda_rasp,
            memory,
            memory_manifest,
        } => {
            if step == 0 {
                bail!(rasp_core::Error::Invalid(
                    "incremental steps start at 1; use train-base".into()
                ));
            }
            let mut cfg = load_config(&config, seed)?;
            if let Some(l) = lambda_rasp {
                cfg.loss.lambda_rasp = l;
            }
            if let Some(m) = memory {
                cfg.memory.kind = match m {
                    MemoryArg::None => MemoryKind::None,
                    MemoryArg::Episodic => MemoryKind::Episodic,
                    MemoryArg::External => MemoryKind::External,
                };
            }
            if memory_manifest.is_some() {
                cfg.memory.manifest = memory_manifest;
            }
            let pipe = Pipeline::new(cfg)?;
            let previous = Checkpoint::load(&checkpoint_path(&run, step - 1))?.to_model()?;
            let train = load_split(&data, "train")?;
            let eval = load_split(&data, "eval")?;
            let bank = pipe.memory_for(&train, step)?;
            let (model, trace) = pipe.train_step(&previous, step, &train, bank.as_ref())?;
            Checkpoint::from_model(&model, step, pipe.config_hash())
                .save(&checkpoint_path(&run, step))?;
            fs::write(
                run.join(format!("step{step}_trace.json")),
                serde_json::to_string_pretty(&trace)?,
            )?;
            let report = pipe.evaluate(&model, &eval, step)?;
            record(&run, &report)?;
            println!(
                "step {step}: mIoU base {:.4} new {:.4} all {:.4}",
                report.miou_base,
                report.miou_new.unwrap_or(0.0),
                report.miou_all
            );
        }
        Command::Eval {
            checkpoint,
            config,
            data,
            split,
            out,
        } => {
            let pipe = Pipeline::new(load_config(&config, None)?)?;
            let ck = Checkpoint::load(&checkpoint)?;
            let model = ck.to_model()?;
            let samples = load_split(&data, split.dir())?;
            let report = pipe.evaluate(&model, &samples, ck.step)?;
            match out {
                Some(dir) => {
                    fs::create_dir_all(&dir)
                        .with_context(|| format!("creating {}", dir.display()))?;
                    write_report(&report, &ReportPaths::in_dir(&dir, "report"))?;
                }
                None => writeln!(
                    std::io::stdout(),
                    "{}",
                    serde_json::to_string_pretty(&report)?
                )?,
            }
        }
        Command::Plot { trace, out } => {
            let reports = read_trace(&trace)?;
            write_plot(&reports, &out)?;
        }
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<rasp_core::Error>() {
        Some(e) if e.is_validation() => 1,
        Some(_) => 2,
        None if err.downcast_ref::<std::io::Error>().is_some() => 2,
        None => 1,
    }
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
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
