//! Stage orchestration for one run, and the ablation ladder over variants
//! and seeds.
//!
//! A run directory looks like:
//!
//! ```text
//! config.json  metrics.csv
//! checkpoints/init.ckpt  checkpoints/stage1_<source>.ckpt  checkpoints/stage2_cl.ckpt
//! models/<task>.ckpt
//! reports/<task>.json  reports/roc_<task>.csv
//! traces/moco_loss.csv  traces/cl_trace.csv
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_checkpoint_into, save_checkpoint, CheckpointHeader};
use crate::cl::{cl_train, trace_csv};
use crate::config::{DataSource, RunConfig, Variant};
use crate::error::{ensure, Error, Result};
use crate::finetune::{evaluate, finetune_task, roc_csv, EvalReport, FittedModel};
use crate::moco::{loss_trace_csv, pretrain_from, MoCoState};
use crate::nets::ParamVector;
use crate::preprocess::{aggregate, DatasetManifest, PoolItem};
use crate::seed::{keyed_rng, stream};
use crate::synth::standard_suite_sized;
use crate::task::{TaskBinding, TaskData};

/// The stages of a run, in execution order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    Init,
    Pretrain,
    ContinualLearning,
    Finetune,
}

impl Stage {
    pub fn label(self) -> &'static str {
        match self {
            Stage::Init => "init",
            Stage::Pretrain => "stage1",
            Stage::ContinualLearning => "stage2_cl",
            Stage::Finetune => "stage3_finetune",
        }
    }

    /// Stage that wrote a checkpoint, from its `created_by` field.
    pub fn from_created_by(created_by: &str) -> Option<Stage> {
        match created_by {
            "init" => Some(Stage::Init),
            "stage2_cl" => Some(Stage::ContinualLearning),
            s if s.starts_with("stage1_") => Some(Stage::Pretrain),
            _ => None,
        }
    }

    pub fn for_variant(variant: Variant) -> Vec<Stage> {
        let mut v = vec![Stage::Init];
        if variant.pretrains() {
            v.push(Stage::Pretrain);
        }
        if variant.continual() {
            v.push(Stage::ContinualLearning);
        }
        v.push(Stage::Finetune);
        v
    }
}

/// Name of the stage-1 checkpoint for a variant.
pub fn pretrain_tag(variant: Variant) -> &'static str {
    if variant == Variant::Foreign {
        "stage1_foreign"
    } else {
        "stage1_md_moco"
    }
}

/// Every dataset of a source, ordered by `dataset_id` so a suite gives the
/// same run whether it is generated or read from files.
pub fn load_datasets(data: &DataSource) -> Result<Vec<DatasetManifest>> {
    let mut manifests = match data {
        DataSource::Synthetic {
            suite_seed,
            n_images,
        } => standard_suite_sized(*suite_seed, *n_images)?,
        DataSource::Manifests { dir } => {
            let mut paths: Vec<PathBuf> = fs::read_dir(dir)
                .map_err(|e| Error::io(dir, e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|x| x == "json"))
                .collect();
            paths.sort();
            ensure!(!paths.is_empty(), Config, "no manifests in {}", dir.display());
            paths.iter().map(|p| DatasetManifest::load(p)).collect::<Result<Vec<_>>>()?
        }
    };
    manifests.sort_by(|a, b| a.dataset_id.cmp(&b.dataset_id));
    if let Some(w) = manifests.windows(2).find(|w| w[0].dataset_id == w[1].dataset_id) {
        return Err(Error::Config(format!("duplicate dataset `{}`", w[0].dataset_id)));
    }
    Ok(manifests)
}

pub fn prepare_tasks(manifests: &[DatasetManifest], cfg: &RunConfig) -> Result<Vec<TaskData>> {
    manifests
        .iter()
        .filter(|m| m.task.is_some())
        .map(|m| {
            let binding = TaskBinding::from_manifest(m.clone())?;
            TaskData::prepare(&binding, cfg.preprocessing.target_hw, cfg.preprocessing.norm)
        })
        .collect()
}

/// Contrastive pool for a variant: unlabelled datasets only for `foreign`,
/// every dataset otherwise.
pub fn pretrain_pool(
    manifests: &[DatasetManifest],
    cfg: &RunConfig,
    variant: Variant,
) -> Result<Vec<PoolItem>> {
    let chosen: Vec<DatasetManifest> = manifests
        .iter()
        .filter(|m| variant != Variant::Foreign || m.task.is_none())
        .cloned()
        .collect();
    ensure!(!chosen.is_empty(), Contract, "no datasets for the `{variant}` pool");
    aggregate(&chosen, cfg.preprocessing.target_hw, cfg.preprocessing.norm, cfg.moco.seed)
}

/// Mean headline metric (AUC or Dice) over tasks that have one.
pub fn aggregate_score(reports: &[EvalReport]) -> f64 {
    let vals: Vec<f64> = reports.iter().filter_map(EvalReport::headline).collect();
    if vals.is_empty() {
        f64::NAN
    } else {
        vals.iter().sum::<f64>() / vals.len() as f64
    }
}

pub const METRIC_COLUMNS: [&str; 8] = ["acc", "auc", "auc_ci_low", "auc_ci_high", "sen", "spe", "dice", "miou"];

/// One row per task; undefined or non-applicable metrics are empty.
pub fn metrics_csv(variant: Variant, master_seed: u64, reports: &[EvalReport]) -> String {
    let mut out = format!("variant,master_seed,task_id,n_test,{}\n", METRIC_COLUMNS.join(","));
    for r in reports {
        let cells: Vec<String> = METRIC_COLUMNS
            .iter()
            .map(|m| r.metric(m).map(|v| v.to_string()).unwrap_or_default())
            .collect();
        let _ = writeln!(out, "{variant},{master_seed},{},{},{}", r.task_id, r.n_test, cells.join(","));
    }
    out
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub out_dir: PathBuf,
    pub config_hash: String,
    pub reports: Vec<EvalReport>,
    pub aggregate: f64,
    /// Stage checkpoints written by this run, in stage order.
    pub checkpoints: Vec<PathBuf>,
    /// Backbone handed to fine-tuning.
    pub backbone: ParamVector,
}

fn write(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

pub fn run_pipeline(cfg: &RunConfig) -> Result<RunSummary> {
    run_pipeline_from(cfg, None, Stage::Finetune)
}

/// Runs the variant's stages up to and including `until`, optionally
/// continuing from a stage checkpoint.
pub fn run_pipeline_from(
    cfg: &RunConfig,
    resume_from: Option<&Path>,
    until: Stage,
) -> Result<RunSummary> {
    cfg.validate()?;
    let cfg = cfg.resolved();
    let hash = cfg.config_hash();
    let stages = Stage::for_variant(cfg.variant);
    ensure!(
        stages.contains(&until),
        Config,
        "variant `{}` has no {} stage",
        cfg.variant,
        until.label()
    );
    let out = cfg.out_dir.clone();
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    write(&out.join("config.json"), &cfg.to_json()?)?;

    let manifests = load_datasets(&cfg.data)?;
    let template = cfg.encoder.init(&mut keyed_rng(cfg.moco.seed, &[stream::ENCODER_INIT]))?;
    let (mut backbone, done) = match resume_from {
        None => (None, None),
        Some(path) => {
            let (header, params) = load_checkpoint_into(path, &template, Some(&hash))?;
            let stage = resume_stage(&header, cfg.variant, &stages)?;
            log::info!("resuming after {} from {}", stage.label(), path.display());
            (Some(params), Some(stage))
        }
    };
    let mut checkpoints = Vec::new();
    let ckpt_dir = out.join("checkpoints");
    let mut reports = Vec::new();
    for &stage in stages.iter().filter(|s| Some(**s) > done && **s <= until) {
        let ctx = |e: Error| e.in_stage(stage.label());
        match stage {
            Stage::Init => {
                let path = ckpt_dir.join("init.ckpt");
                save_checkpoint(&template, &path, "init", &hash).map_err(ctx)?;
                checkpoints.push(path);
                backbone = Some(template.clone());
            }
            Stage::Pretrain => {
                let init = backbone.take().expect("init precedes pretrain");
                let pool = pretrain_pool(&manifests, &cfg, cfg.variant).map_err(ctx)?;
                log::info!("pretraining on a pool of {} images", pool.len());
                let state = MoCoState::init(&cfg.encoder, &cfg.moco)
                    .and_then(|s| s.with_backbone(&init))
                    .map_err(ctx)?;
                let res = pretrain_from(state, &pool, &cfg.encoder, &cfg.moco).map_err(ctx)?;
                write(&out.join("traces/moco_loss.csv"), &loss_trace_csv(&res.loss_trace))?;
                let tag = pretrain_tag(cfg.variant);
                let path = ckpt_dir.join(format!("{tag}.ckpt"));
                save_checkpoint(&res.backbone, &path, tag, &hash).map_err(ctx)?;
                checkpoints.push(path);
                backbone = Some(res.backbone);
            }
            Stage::ContinualLearning => {
                let start = backbone.take().expect("pretrain precedes continual learning");
                let tasks = prepare_tasks(&manifests, &cfg).map_err(ctx)?;
                let res = cl_train(&cfg.encoder, &start, &tasks, &cfg.schedule, &cfg.reg, cfg.cl_flags())
                    .map_err(ctx)?;
                write(&out.join("traces/cl_trace.csv"), &trace_csv(&res.trace))?;
                let path = ckpt_dir.join("stage2_cl.ckpt");
                save_checkpoint(&res.backbone, &path, "stage2_cl", &hash).map_err(ctx)?;
                checkpoints.push(path);
                backbone = Some(res.backbone);
            }
            Stage::Finetune => {
                let start = backbone.as_ref().expect("a backbone precedes fine-tuning");
                let tasks = prepare_tasks(&manifests, &cfg).map_err(ctx)?;
                for task in &tasks {
                    let (model, eval) = finetune_task(&cfg.encoder, start, task, &cfg.finetune)
                        .map_err(|e| e.in_stage(&format!("{}/{}", stage.label(), task.task_id)))?;
                    let mut report = eval.report;
                    report.config_hash = hash.clone();
                    let id = &task.task_id;
                    save_checkpoint(
                        &model.params()?,
                        &out.join(format!("models/{id}.ckpt")),
                        &format!("finetune/{id}"),
                        &hash,
                    )?;
                    write(
                        &out.join(format!("reports/{id}.json")),
                        &serde_json::to_string_pretty(&report)?,
                    )?;
                    if let Some(points) = &eval.roc {
                        write(&out.join(format!("reports/roc_{id}.csv")), &roc_csv(points))?;
                    }
                    log::info!("{id}: headline {:?}", report.headline());
                    reports.push(report);
                }
                write(
                    &out.join("metrics.csv"),
                    &metrics_csv(cfg.variant, cfg.master_seed, &reports),
                )?;
            }
        }
    }
    Ok(RunSummary {
        out_dir: out,
        config_hash: hash,
        aggregate: aggregate_score(&reports),
        reports,
        checkpoints,
        backbone: backbone.unwrap_or(template),
    })
}

fn resume_stage(header: &CheckpointHeader, variant: Variant, stages: &[Stage]) -> Result<Stage> {
    let stage = Stage::from_created_by(&header.created_by).ok_or_else(|| {
        Error::Config(format!("cannot resume from a `{}` checkpoint", header.created_by))
    })?;
    ensure!(
        stages.contains(&stage),
        Config,
        "variant `{variant}` has no {} stage to resume after",
        stage.label()
    );
    if stage == Stage::Pretrain {
        ensure!(
            header.created_by == pretrain_tag(variant),
            Config,
            "`{}` checkpoint does not match variant `{variant}`",
            header.created_by
        );
    }
    Ok(stage)
}

/// Re-evaluates a saved task model on its task's test split.
pub fn evaluate_saved(cfg: &RunConfig, model_path: &Path) -> Result<EvalReport> {
    cfg.validate()?;
    let cfg = cfg.resolved();
    let (header, params) = crate::checkpoint::load_checkpoint(model_path)?;
    let task_id = header.created_by.strip_prefix("finetune/").ok_or_else(|| {
        Error::Config(format!("`{}` is not a task model checkpoint", header.created_by))
    })?;
    let manifests = load_datasets(&cfg.data)?;
    let tasks = prepare_tasks(&manifests, &cfg)?;
    let task = tasks
        .iter()
        .find(|t| t.task_id == task_id)
        .ok_or_else(|| Error::Config(format!("no task `{task_id}` in the configured data")))?;
    let model = FittedModel::from_params(task_id, task.head, &params);
    let template = cfg.encoder.init(&mut keyed_rng(0, &[stream::ENCODER_INIT]))?;
    crate::checkpoint::check_against(&model.backbone, &template)?;
    let mut report = evaluate(&cfg.encoder, &model, task, &cfg.finetune)?.report;
    report.config_hash = header.config_hash;
    Ok(report)
}

/// Mean and sample standard deviation of one cell of the ablation table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellStats {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl CellStats {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Self { mean, std, n }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub task_id: String,
    /// Metric name to statistics over seeds.
    pub metrics: BTreeMap<String, CellStats>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
    /// Aggregate score per variant over seeds.
    pub aggregate: BTreeMap<Variant, CellStats>,
    pub run_dirs: Vec<PathBuf>,
}

impl AblationTable {
    pub fn row(&self, variant: Variant, task_id: &str) -> Option<&AblationRow> {
        self.rows
            .iter()
            .find(|r| r.variant == variant && r.task_id == task_id)
    }

    /// Seed-mean headline metric for one (variant, task) cell.
    pub fn headline(&self, variant: Variant, task_id: &str) -> Option<f64> {
        let row = self.row(variant, task_id)?;
        row.metrics
            .get("auc")
            .or_else(|| row.metrics.get("dice"))
            .map(|c| c.mean)
    }

    pub fn task_ids(&self) -> Vec<String> {
        let mut ids: Vec<String> = self.rows.iter().map(|r| r.task_id.clone()).collect();
        ids.sort();
        ids.dedup();
        ids
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("variant,task_id,metric,mean,std,n\n");
        for r in &self.rows {
            for (m, c) in &r.metrics {
                let _ = writeln!(out, "{},{},{m},{},{},{}", r.variant, r.task_id, c.mean, c.std, c.n);
            }
        }
        for (v, c) in &self.aggregate {
            let _ = writeln!(out, "{v},*,aggregate,{},{},{}", c.mean, c.std, c.n);
        }
        out
    }

    /// Variants × metrics as an aligned text table, one block per task.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let cols: Vec<&str> = METRIC_COLUMNS
            .iter()
            .copied()
            .filter(|m| self.rows.iter().any(|r| r.metrics.contains_key(*m)))
            .collect();
        let _ = write!(out, "{:<14}{:<12}", "variant", "task");
        for c in &cols {
            let _ = write!(out, "{c:>18}");
        }
        out.push('\n');
        for r in &self.rows {
            let _ = write!(out, "{:<14}{:<12}", r.variant.name(), r.task_id);
            for c in &cols {
                match r.metrics.get(*c) {
                    Some(s) => {
                        let _ = write!(out, "{:>18}", format!("{:.4}±{:.4}", s.mean, s.std));
                    }
                    None => {
                        let _ = write!(out, "{:>18}", "-");
                    }
                }
            }
            out.push('\n');
        }
        out.push('\n');
        for (v, c) in &self.aggregate {
            let _ = writeln!(out, "{:<14}aggregate {:.4}±{:.4} (n={})", v.name(), c.mean, c.std, c.n);
        }
        out
    }
}

/// Runs every variant for every seed under `base.out_dir`, then writes
/// `ablation.csv` and `ablation.txt` there.
pub fn run_ablation(base: &RunConfig, seeds: &[u64]) -> Result<AblationTable> {
    ensure!(!seeds.is_empty(), Config, "ablation needs at least one seed");
    let mut per_cell: BTreeMap<(Variant, String), BTreeMap<String, Vec<f64>>> = BTreeMap::new();
    let mut agg: BTreeMap<Variant, Vec<f64>> = BTreeMap::new();
    let mut run_dirs = Vec::new();
    for &seed in seeds {
        for variant in Variant::ALL {
            let mut cfg = base.clone();
            cfg.master_seed = seed;
            cfg.variant = variant;
            cfg.out_dir = base.out_dir.join(format!("{variant}_seed{seed}"));
            log::info!("ablation run {}", cfg.out_dir.display());
            let summary = run_pipeline(&cfg)?;
            for r in &summary.reports {
                let cell = per_cell.entry((variant, r.task_id.clone())).or_default();
                for (m, v) in &r.metrics {
                    if let Some(v) = v {
                        cell.entry(m.clone()).or_default().push(*v);
                    }
                }
            }
            agg.entry(variant).or_default().push(summary.aggregate);
            run_dirs.push(summary.out_dir);
        }
    }
    let rows = per_cell
        .into_iter()
        .map(|((variant, task_id), metrics)| AblationRow {
            variant,
            task_id,
            metrics: metrics
                .into_iter()
                .map(|(m, vals)| (m, CellStats::of(&vals)))
                .collect(),
        })
        .collect();
    let table = AblationTable {
        seeds: seeds.to_vec(),
        rows,
        aggregate: agg.into_iter().map(|(v, vals)| (v, CellStats::of(&vals))).collect(),
        run_dirs,
    };
    write(&base.out_dir.join("ablation.csv"), &table.to_csv())?;
    write(&base.out_dir.join("ablation.txt"), &table.to_text())?;
    Ok(table)
}
