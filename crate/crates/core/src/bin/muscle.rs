//! Command-line front end for the three-stage pipeline and the ablation
//! ladder.
//!
//! Exit codes: 0 on success, 2 on a configuration error, 3 on a runtime or
//! stage failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use muscle::config::{RunConfig, Variant};
use muscle::pipeline::{evaluate_saved, run_ablation, run_pipeline_from, Stage};
use muscle::synth::{standard_suite_sized, SUITE_IMAGES};
use muscle::Error;

#[derive(Parser)]
#[command(name = "muscle", version, about = "Multi-dataset contrastive pre-training with continual learning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON run configuration; defaults are used when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides `master_seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides `variant`.
    #[arg(long)]
    variant: Option<String>,
    /// Overrides `out_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Continue after the stage that wrote this checkpoint.
    #[arg(long)]
    resume_from: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Write the standard synthetic suite as manifest files.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = SUITE_IMAGES)]
        n_images: usize,
    },
    /// Initialise and run contrastive pre-training.
    Pretrain(Common),
    /// Run up to and including continual learning.
    Cl(Common),
    /// Fine-tune every task from a stage checkpoint.
    Finetune(Common),
    /// Re-evaluate a saved task model.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Model checkpoint written by fine-tuning.
        #[arg(long)]
        model: PathBuf,
    },
    /// Full pipeline for the configured variant.
    Run(Common),
    /// Every variant for every seed, with a comparison table.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Comma-separated master seeds.
        #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4")]
        seeds: Vec<u64>,
    },
}

fn build_config(c: &Common) -> Result<RunConfig, Error> {
    let mut cfg = match &c.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = c.seed {
        cfg.master_seed = s;
    }
    if let Some(v) = &c.variant {
        cfg.variant = v.parse::<Variant>()?;
    }
    if let Some(o) = &c.out {
        cfg.out_dir = o.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn stage_run(c: &Common, until: Stage, need_resume: bool) -> Result<(), Error> {
    let cfg = build_config(c)?;
    if need_resume && c.resume_from.is_none() {
        return Err(Error::Config("--resume-from is required".into()));
    }
    let summary = run_pipeline_from(&cfg, c.resume_from.as_deref(), until)?;
    for p in &summary.checkpoints {
        println!("checkpoint {}", p.display());
    }
    for r in &summary.reports {
        println!("{} {}", r.task_id, serde_json::to_string(&r.metrics)?);
    }
    if !summary.reports.is_empty() {
        println!("aggregate {:.4}", summary.aggregate);
    }
    Ok(())
}

fn write_suite(out: &Path, seed: u64, n_images: usize) -> Result<(), Error> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    for m in standard_suite_sized(seed, n_images)? {
        let path = out.join(format!("{}.json", m.dataset_id));
        m.save(&path)?;
        println!("{}", path.display());
    }
    Ok(())
}

fn dispatch(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Synth { out, seed, n_images } => write_suite(&out, seed, n_images),
        Command::Pretrain(c) => stage_run(&c, Stage::Pretrain, false),
        Command::Cl(c) => stage_run(&c, Stage::ContinualLearning, false),
        Command::Finetune(c) => stage_run(&c, Stage::Finetune, true),
        Command::Run(c) => stage_run(&c, Stage::Finetune, false),
        Command::Eval { common, model } => {
            let cfg = build_config(&common)?;
            let report = evaluate_saved(&cfg, &model)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
            Ok(())
        }
        Command::Ablate { common, seeds } => {
            let cfg = build_config(&common)?;
            let table = run_ablation(&cfg, &seeds)?;
            print!("{}", table.to_text());
            Ok(())
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        _ => 3,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
