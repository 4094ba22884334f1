//! Subcommands. Each one resolves the config, prepares the output
//! directory, does its work and always leaves a `status.json` behind.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use refpose::data::{load_checkpoint, save_checkpoint, synth_generate, Checkpoint, Dataset};
use refpose::eval::{ap_eval, EvalReport, Prediction};
use refpose::head::{parse_trunk_layers, receptive_field_of, HeadVariant, ReceptiveField, TrunkLayer};
use refpose::keypoints::KEYPOINT_NAMES;
use refpose::model::{evaluate, jittered_proposals, predict_dataset, ModelConfig, PoseModel};
use refpose::pyramid::{ExtractionConfig, LevelStrategy};
use refpose::train::{train, EvalSnapshot, LogRecord, Sgd, TrainLog, TrainObserver, TrainState};
use refpose::Error;
use serde_json::json;

use crate::config::RunConfig;
use crate::dataset::{load_dataset, split, write_dataset};
use crate::output::OutputDir;
use crate::CliError;

pub const CHECKPOINT_FILE: &str = "checkpoint.ckpt";
pub const DIVERGED_FILE: &str = "diverged.ckpt";
pub const TRAIN_LOG_FILE: &str = "train_log.jsonl";
pub const SNAPSHOT_FILE: &str = "eval_snapshots.jsonl";
pub const TIMING_FILE: &str = "timing.jsonl";
pub const SUMMARY_FILE: &str = "summary.json";
pub const REPORT_FILE: &str = "report.json";
pub const PREDICTIONS_FILE: &str = "predictions.json";
pub const MAG_ABLATION_FILE: &str = "magnification_ablation.csv";
pub const LEVEL_ABLATION_FILE: &str = "level_ablation.csv";
pub const RF_FILE: &str = "rf.json";

#[derive(Debug, Parser)]
#[command(name = "refpose", version, about = "Top-down keypoint estimation: data, training, evaluation, ablations")]
pub struct Cli {
    /// Worker threads for the data-parallel loops (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone, Default)]
pub struct Common {
    /// TOML run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory (overrides `output_dir` in the config).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Overrides the seed(s) the command consumes.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Reuse a non-empty output directory.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic dataset.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Train a model.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        freeze_backbone: bool,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Score a checkpoint, or the ground truth itself.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, conflicts_with = "gt_predictions")]
        checkpoint: Option<PathBuf>,
        /// Submit the ground-truth keypoints as predictions.
        #[arg(long)]
        gt_predictions: bool,
    },
    /// Sweep the box magnification.
    AblateMag {
        #[command(flatten)]
        common: Common,
        /// Evaluate this checkpoint instead of training.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        train_per_point: bool,
        #[arg(long)]
        freeze_backbone: bool,
    },
    /// Compare pyramid level strategies.
    AblateLevel {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, conflicts_with = "train_once")]
        train_per_point: bool,
        /// Train one model and evaluate it at every level.
        #[arg(long)]
        train_once: bool,
        #[arg(long)]
        freeze_backbone: bool,
    },
    /// Print the receptive field of a head trunk.
    Rf {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        force: bool,
        /// Head variant (defaults to the config's).
        #[arg(long)]
        variant: Option<HeadVariant>,
        /// Explicit layer stack, e.g. `3:1,3:1,g,3:1` (`g` is a global layer).
        #[arg(long, conflicts_with = "variant")]
        stack: Option<String>,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::GenData { .. } => "gen-data",
            Command::Train { .. } => "train",
            Command::Eval { .. } => "eval",
            Command::AblateMag { .. } => "ablate-mag",
            Command::AblateLevel { .. } => "ablate-level",
            Command::Rf { .. } => "rf",
        }
    }
}

fn resolve(config: Option<&Path>) -> Result<RunConfig, CliError> {
    match config {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn out_path(common: &Common, cfg: &RunConfig) -> Result<PathBuf, CliError> {
    common
        .out
        .clone()
        .or_else(|| cfg.output_dir.clone())
        .ok_or_else(|| CliError::Config("no output directory: pass --out or set output_dir".into()))
}

/// Runs `body` inside a prepared output directory and writes the status
/// record whatever the outcome.
fn with_output(
    command: &str,
    common: &Common,
    cfg: &mut RunConfig,
    body: impl FnOnce(&RunConfig, &mut OutputDir) -> Result<(), CliError>,
) -> Result<(), CliError> {
    let path = out_path(common, cfg)?;
    cfg.output_dir = None;
    let mut out = OutputDir::prepare(&path, common.force)?;
    let outcome = cfg.validate().and_then(|()| {
        out.write_config(cfg)?;
        body(cfg, &mut out)
    });
    out.finish(command, &outcome)?;
    outcome
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(n) = cli.threads {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
    }
    let name = cli.command.name();
    match cli.command {
        Command::GenData { common } => {
            let mut cfg = resolve(common.config.as_deref())?;
            if let Some(s) = common.seed {
                cfg.data.synth.seed = s;
            }
            with_output(name, &common, &mut cfg, |cfg, out| {
                let dataset = synth_generate(&cfg.data.synth)?;
                let manifest = write_dataset(out, &dataset, &cfg.data.synth)?;
                println!(
                    "{} images, {} people, edge fraction {:.3}",
                    manifest.num_images, manifest.num_annotations, manifest.edge_fraction
                );
                Ok(())
            })
        }
        Command::Train {
            common,
            freeze_backbone,
            resume,
        } => {
            let mut cfg = resolve(common.config.as_deref())?;
            apply_train_overrides(&mut cfg, &common, freeze_backbone);
            with_output(name, &common, &mut cfg, |cfg, out| train_command(cfg, out, resume.as_deref()))
        }
        Command::Eval {
            common,
            checkpoint,
            gt_predictions,
        } => {
            let ckpt = checkpoint.as_deref().map(load_checkpoint).transpose()?;
            let mut cfg = match (&common.config, &ckpt) {
                (None, Some(c)) if !c.config.is_null() => config_from_checkpoint(c)?,
                _ => resolve(common.config.as_deref())?,
            };
            if let Some(s) = common.seed {
                cfg.eval.seed = s;
            }
            if ckpt.is_none() && !gt_predictions {
                return Err(CliError::Config("eval needs --checkpoint or --gt-predictions".into()));
            }
            with_output(name, &common, &mut cfg, |cfg, out| eval_command(cfg, out, ckpt.as_ref()))
        }
        Command::AblateMag {
            common,
            checkpoint,
            train_per_point,
            freeze_backbone,
        } => {
            let mut cfg = resolve(common.config.as_deref())?;
            apply_train_overrides(&mut cfg, &common, freeze_backbone);
            if train_per_point {
                cfg.ablation.magnification_train_per_point = true;
            }
            with_output(name, &common, &mut cfg, |cfg, out| {
                let mode = mode_for(checkpoint.as_deref(), cfg.ablation.magnification_train_per_point)?;
                let rows = magnification_ablation(cfg, &mode)?;
                write_ablation(out, MAG_ABLATION_FILE, "magnification", &rows)
            })
        }
        Command::AblateLevel {
            common,
            checkpoint,
            train_per_point,
            train_once,
            freeze_backbone,
        } => {
            let mut cfg = resolve(common.config.as_deref())?;
            apply_train_overrides(&mut cfg, &common, freeze_backbone);
            if train_per_point {
                cfg.ablation.level_train_per_point = true;
            }
            if train_once {
                cfg.ablation.level_train_per_point = false;
            }
            with_output(name, &common, &mut cfg, |cfg, out| {
                let mode = mode_for(checkpoint.as_deref(), cfg.ablation.level_train_per_point)?;
                let rows = level_ablation(cfg, &mode)?;
                write_ablation(out, LEVEL_ABLATION_FILE, "level", &rows)
            })
        }
        Command::Rf {
            config,
            out,
            force,
            variant,
            stack,
        } => {
            let cfg = resolve(config.as_deref())?;
            let (label, layers) = match stack {
                Some(s) => (format!("stack {s}"), parse_stack(&s)?),
                None => {
                    let mut model = cfg.model.clone();
                    if let Some(v) = variant {
                        model.head.variant = v;
                    }
                    (format!("{:?}", model.head.variant), head_layers(&model)?)
                }
            };
            let rf = receptive_field_of(&layers, cfg.model.roi_size);
            println!("{rf}");
            if let Some(path) = out {
                let mut dir = OutputDir::prepare(&path, force)?;
                let outcome = dir.write_json(
                    RF_FILE,
                    &json!({ "trunk": label, "extent": cfg.model.roi_size, "receptive_field": rf.to_string() }),
                );
                dir.finish(name, &outcome)?;
                outcome?;
            }
            Ok(())
        }
    }
}

fn apply_train_overrides(cfg: &mut RunConfig, common: &Common, freeze_backbone: bool) {
    if let Some(s) = common.seed {
        cfg.train.seed = s;
        cfg.model.init_seed = s;
    }
    if freeze_backbone {
        cfg.train.freeze_backbone = true;
    }
}

fn config_from_checkpoint(ckpt: &Checkpoint) -> Result<RunConfig, CliError> {
    serde_json::from_value(ckpt.config.clone()).map_err(|e| CliError::Config(format!("checkpoint config: {e}")))
}

/// Trunk layers of the head `model` would build.
pub fn head_layers(model: &ModelConfig) -> Result<Vec<TrunkLayer>, CliError> {
    let m = PoseModel::new(model)?;
    Ok(m.head().layers())
}

/// Parses `k:s` pairs and `g` separated by commas.
pub fn parse_stack(s: &str) -> Result<Vec<TrunkLayer>, CliError> {
    Ok(parse_trunk_layers(s)?)
}

/// Observer that mirrors progress to stdout and writes periodic checkpoints.
struct RunObserver<'a> {
    out: &'a mut OutputDir,
    config: serde_json::Value,
    records: Vec<LogRecord>,
    snapshots: Vec<EvalSnapshot>,
    error: Option<CliError>,
}

impl TrainObserver for RunObserver<'_> {
    fn record(&mut self, r: &LogRecord) {
        if r.iteration % 50 == 0 {
            println!("iter {:>6}  loss {:.5}  lr {:.3e}  people {}", r.iteration, r.loss, r.lr, r.instances);
        }
        self.records.push(*r);
    }

    fn snapshot(&mut self, s: &EvalSnapshot) {
        println!("iter {:>6}  AP {:.4}  PCK {:.4}", s.iteration, s.ap_mean, s.pck);
        self.snapshots.push(*s);
    }

    fn checkpoint(&mut self, iteration: u64, model: &PoseModel, optimizer: &Sgd) -> refpose::Result<()> {
        let name = format!("checkpoints/iter_{iteration:06}.ckpt");
        let ckpt = Checkpoint::from_params(iteration, &model.params, Some(&optimizer.velocity), self.config.clone());
        std::fs::create_dir_all(self.out.join("checkpoints")).map_err(|e| Error::Io {
            path: self.out.join("checkpoints"),
            source: e,
        })?;
        save_checkpoint(&ckpt, &self.out.join(&name))?;
        if let Err(e) = self.out.register(&name) {
            self.error = Some(e);
        }
        Ok(())
    }
}

fn jsonl<T: serde::Serialize>(items: &[T]) -> String {
    let mut s = String::new();
    for item in items {
        s.push_str(&serde_json::to_string(item).expect("log record serializes"));
        s.push('\n');
    }
    s
}

fn config_value(cfg: &RunConfig) -> serde_json::Value {
    serde_json::to_value(cfg).expect("run config serializes")
}

/// Restores weights and optimizer state from `path`.
pub fn resume_from(path: &Path, model: &mut PoseModel, cfg: &RunConfig) -> Result<TrainState, CliError> {
    let ckpt = load_checkpoint(path)?;
    ckpt.restore_params(&mut model.params)?;
    let mut state = TrainState::fresh(model, &cfg.train);
    state.iteration = ckpt.iteration;
    if let Some(v) = ckpt.momentum_for(&model.params)? {
        state.optimizer.velocity = v;
    }
    if state.iteration > cfg.train.total_iterations {
        return Err(CliError::Config(format!(
            "checkpoint is at iteration {}, past train.total_iterations {}",
            state.iteration, cfg.train.total_iterations
        )));
    }
    Ok(state)
}

fn train_command(cfg: &RunConfig, out: &mut OutputDir, resume: Option<&Path>) -> Result<(), CliError> {
    let (train_set, _) = split(load_dataset(&cfg.data)?, cfg.data.holdout)?;
    let mut model = PoseModel::new(&cfg.model)?;
    let state = resume.map(|p| resume_from(p, &mut model, cfg)).transpose()?;
    let start = state.as_ref().map_or(0, |s| s.iteration);
    println!(
        "training {} parameters on {} images, iterations {start}..{}",
        model.params.num_scalars(),
        train_set.images.len(),
        cfg.train.total_iterations
    );
    let config = config_value(cfg);
    let mut obs = RunObserver {
        out,
        config: config.clone(),
        records: Vec::new(),
        snapshots: Vec::new(),
        error: None,
    };
    let result = train(&mut model, &train_set, &cfg.train, &cfg.eval, state, &mut obs);
    let RunObserver {
        out,
        records,
        snapshots,
        error,
        ..
    } = obs;
    out.write(TRAIN_LOG_FILE, jsonl(&records).as_bytes())?;
    out.write(SNAPSHOT_FILE, jsonl(&snapshots).as_bytes())?;
    let timing: Vec<_> = records.iter().map(|r| json!({ "iteration": r.iteration, "seconds": r.seconds })).collect();
    out.write_volatile(TIMING_FILE, jsonl(&timing).as_bytes())?;
    if let Some(e) = error {
        return Err(e);
    }
    let log = TrainLog { records, snapshots };
    match result {
        Ok((state, _)) => {
            let ckpt = Checkpoint::from_params(state.iteration, &model.params, Some(&state.optimizer.velocity), config);
            save_checkpoint(&ckpt, &out.join(CHECKPOINT_FILE))?;
            out.register(CHECKPOINT_FILE)?;
            out.write_json(
                SUMMARY_FILE,
                &json!({
                    "start_iteration": start,
                    "iterations": state.iteration,
                    "parameters": model.params.num_scalars(),
                    "initial_loss": log.initial_loss(20),
                    "final_loss": log.final_loss(20),
                }),
            )?;
            println!("done: loss {:.4} -> {:.4}", log.initial_loss(20), log.final_loss(20));
            Ok(())
        }
        Err(e @ Error::Diverged { .. }) => {
            let done = start + log.records.len() as u64;
            let ckpt = Checkpoint::from_params(done, &model.params, None, config);
            save_checkpoint(&ckpt, &out.join(DIVERGED_FILE))?;
            out.register(DIVERGED_FILE)?;
            Err(e.into())
        }
        Err(e) => Err(e.into()),
    }
}

/// Ground-truth keypoints submitted as predictions with score 1.
pub fn gt_predictions(dataset: &Dataset) -> Vec<Prediction> {
    dataset
        .ground_truths()
        .into_iter()
        .map(|g| Prediction {
            image_id: g.image_id,
            id: g.id,
            keypoints: g.keypoints,
            score: 1.0,
            area: g.area,
        })
        .collect()
}

/// Builds the configured model and loads `ckpt` into it.
pub fn model_from_checkpoint(model: &ModelConfig, ckpt: &Checkpoint) -> Result<PoseModel, CliError> {
    let mut m = PoseModel::new(model)?;
    ckpt.restore_params(&mut m.params)?;
    Ok(m)
}

fn eval_command(cfg: &RunConfig, out: &mut OutputDir, ckpt: Option<&Checkpoint>) -> Result<(), CliError> {
    let (_, eval_set) = split(load_dataset(&cfg.data)?, cfg.data.holdout)?;
    let predictions = match ckpt {
        Some(c) => {
            let model = model_from_checkpoint(&cfg.model, c)?;
            let proposals = jittered_proposals(&eval_set, cfg.eval.jitter_scale, cfg.eval.jitter_shift, cfg.eval.seed)?;
            predict_dataset(&model, &eval_set, &proposals, &model.extraction())?
        }
        None => gt_predictions(&eval_set),
    };
    let report = ap_eval(&predictions, &eval_set.ground_truths(), &cfg.eval.params())?;
    out.write_json(PREDICTIONS_FILE, &predictions)?;
    out.write_json(REPORT_FILE, &report)?;
    println!("AP {:.4}  AP50 {:.4}  PCK {:.4}  miss {:.4}", report.ap_mean, report.ap_per_threshold[0], report.pck, miss_rate(&report));
    Ok(())
}

/// Where ablation models come from.
pub enum AblationMode {
    Checkpoint(Box<Checkpoint>),
    TrainOnce,
    TrainPerPoint,
}

impl AblationMode {
    pub fn label(&self) -> &'static str {
        match self {
            AblationMode::Checkpoint(_) => "checkpoint",
            AblationMode::TrainOnce => "train-once",
            AblationMode::TrainPerPoint => "train-per-point",
        }
    }
}

fn mode_for(checkpoint: Option<&Path>, per_point: bool) -> Result<AblationMode, CliError> {
    Ok(match checkpoint {
        Some(p) => AblationMode::Checkpoint(Box::new(load_checkpoint(p)?)),
        None if per_point => AblationMode::TrainPerPoint,
        None => AblationMode::TrainOnce,
    })
}

/// Trains a fresh model from `cfg` on `dataset`.
pub fn train_model(cfg: &RunConfig, dataset: &Dataset) -> Result<(PoseModel, TrainLog), CliError> {
    let mut model = PoseModel::new(&cfg.model)?;
    let (_, log) = train(&mut model, dataset, &cfg.train, &cfg.eval, None, &mut refpose::train::NoObserver)?;
    Ok((model, log))
}

pub struct AblationRow {
    pub point: String,
    pub mode: &'static str,
    pub report: EvalReport,
}

/// Evaluates (and in per-point mode trains) one model config per point.
fn sweep(
    cfg: &RunConfig,
    mode: &AblationMode,
    points: &[(String, ModelConfig)],
) -> Result<Vec<AblationRow>, CliError> {
    let (train_set, eval_set) = split(load_dataset(&cfg.data)?, cfg.data.holdout)?;
    let shared = match mode {
        AblationMode::Checkpoint(c) => Some(model_from_checkpoint(&cfg.model, c)?),
        AblationMode::TrainOnce => Some(train_model(cfg, &train_set)?.0),
        AblationMode::TrainPerPoint => None,
    };
    let mut rows = Vec::with_capacity(points.len());
    for (label, model_cfg) in points {
        let ext: ExtractionConfig = model_cfg.extraction();
        let report = match &shared {
            Some(model) => evaluate(model, &eval_set, &ext, &cfg.eval)?,
            None => {
                let point_cfg = RunConfig {
                    model: model_cfg.clone(),
                    ..cfg.clone()
                };
                let (model, _) = train_model(&point_cfg, &train_set)?;
                evaluate(&model, &eval_set, &ext, &cfg.eval)?
            }
        };
        println!("{label:>12}  AP {:.4}  PCK {:.4}  miss {:.4}", report.ap_mean, report.pck, miss_rate(&report));
        rows.push(AblationRow {
            point: label.clone(),
            mode: mode.label(),
            report,
        });
    }
    Ok(rows)
}

pub fn magnification_ablation(cfg: &RunConfig, mode: &AblationMode) -> Result<Vec<AblationRow>, CliError> {
    let points: Vec<_> = cfg
        .ablation
        .magnifications()
        .into_iter()
        .map(|m| {
            (
                format!("{m}"),
                ModelConfig {
                    magnification: m,
                    ..cfg.model.clone()
                },
            )
        })
        .collect();
    sweep(cfg, mode, &points)
}

pub fn level_ablation(cfg: &RunConfig, mode: &AblationMode) -> Result<Vec<AblationRow>, CliError> {
    let points: Vec<_> = cfg
        .ablation
        .levels
        .iter()
        .map(|&l: &LevelStrategy| {
            (
                l.to_string(),
                ModelConfig {
                    level_strategy: l,
                    ..cfg.model.clone()
                },
            )
        })
        .collect();
    sweep(cfg, mode, &points)
}

/// Fraction of all labeled GT keypoints that were missed.
pub fn miss_rate(r: &EvalReport) -> f64 {
    let n = &r.per_scale_keypoints;
    let m = &r.per_scale_miss_rate;
    let total = n.small + n.medium + n.large;
    if total == 0.0 {
        return 0.0;
    }
    (m.small * n.small + m.medium * n.medium + m.large * n.large) / total
}

pub fn metric_columns() -> Vec<String> {
    let mut cols: Vec<String> = vec!["ap_mean".into()];
    cols.extend((0..10).map(|i| format!("ap_{}", 50 + 5 * i)));
    cols.extend(["ap_medium", "ap_large", "pck", "miss_rate", "miss_small", "miss_medium", "miss_large"].map(String::from));
    cols.extend(KEYPOINT_NAMES.iter().map(|k| format!("miss_{k}")));
    cols
}

pub fn metric_values(r: &EvalReport) -> Vec<f64> {
    let mut v = vec![r.ap_mean];
    v.extend(r.ap_per_threshold);
    v.extend([
        r.ap_medium,
        r.ap_large,
        r.pck,
        miss_rate(r),
        r.per_scale_miss_rate.small,
        r.per_scale_miss_rate.medium,
        r.per_scale_miss_rate.large,
    ]);
    v.extend(r.per_keypoint_miss_rate);
    v
}

fn write_ablation(out: &mut OutputDir, file: &str, key: &str, rows: &[AblationRow]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| CliError::Output(e.to_string());
    let mut header = vec![key.to_string(), "mode".into()];
    header.extend(metric_columns());
    w.write_record(&header).map_err(csv_err)?;
    for row in rows {
        let mut rec = vec![row.point.clone(), row.mode.to_string()];
        rec.extend(metric_values(&row.report).into_iter().map(|v| v.to_string()));
        w.write_record(&rec).map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| CliError::Output(e.to_string()))?;
    out.write(file, &bytes)
}

pub fn receptive_field(model: &ModelConfig) -> Result<ReceptiveField, CliError> {
    Ok(receptive_field_of(&head_layers(model)?, model.roi_size))
}
