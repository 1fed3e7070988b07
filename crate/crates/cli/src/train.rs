//! The `train` command and the per-run artifacts shared with `ablate`.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use pppc_core::checkpoint::{self, write_atomic};
use pppc_core::config::ExperimentConfig;
use pppc_core::metrics::{write_trace_csv, TraceRow};
use pppc_core::train::{Datasets, StepLog, TrainFailure, TrainState};
use pppc_core::Error;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};
use crate::manifest::{load_config, prepare_output_dir, RunManifest, Status};
use crate::output_root;

pub const CHECKPOINT: &str = "checkpoint.bin";
pub const LAST_GOOD: &str = "checkpoint_last_good.bin";
pub const TRACE: &str = "trace.csv";
pub const STEPS: &str = "steps.csv";
pub const SUMMARY: &str = "summary.json";
pub const CONFIG: &str = "config.toml";

#[derive(Debug, Clone, Default)]
pub struct TrainArgs {
    pub config: Option<PathBuf>,
    pub overrides: Vec<String>,
    pub force: bool,
    /// Defaults to `<output root>/train-<config hash prefix>`.
    pub out: Option<PathBuf>,
}

/// End-of-run numbers of one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub seed: u64,
    pub steps: usize,
    pub source_miou: Option<f64>,
    pub target_miou: Option<f64>,
    pub target_iou: Vec<Option<f64>>,
    pub entropy_correct: Option<f64>,
    pub entropy_incorrect: Option<f64>,
    pub norm_var_spearman: Option<f64>,
    pub norm_var_degenerate: bool,
    /// Steps whose total loss was finite; equals `steps` for a completed run.
    pub finite_losses: usize,
}

impl RunSummary {
    pub fn of(state: &TrainState) -> Self {
        let last = |split: &str| state.trace.iter().rev().find(|r| r.split == split);
        let diag = state.diagnostics.as_ref();
        Self {
            seed: state.config.seed,
            steps: state.step,
            source_miou: last("source").map(|r| r.report.miou),
            target_miou: last("target").map(|r| r.report.miou),
            target_iou: last("target").map(|r| r.report.per_class.clone()).unwrap_or_default(),
            entropy_correct: diag.and_then(|d| d.entropy_correct),
            entropy_incorrect: diag.and_then(|d| d.entropy_incorrect),
            norm_var_spearman: diag.map(|d| d.norm_var.rho),
            norm_var_degenerate: diag.is_some_and(|d| d.norm_var.degenerate),
            finite_losses: state.log.iter().filter(|l| l.loss.is_finite()).count(),
        }
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn steps_csv(log: &[StepLog]) -> String {
    let mut s = String::from("step,lr,loss,source,target,contrast,kl,pseudo_kept,anchors,skipped_anchors\n");
    for l in log {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{}",
            l.step,
            l.lr,
            l.loss,
            l.source,
            opt(l.target),
            opt(l.contrast),
            opt(l.kl),
            l.pseudo_kept,
            l.anchors,
            l.skipped_anchors
        );
    }
    s
}

pub fn trace_csv(classes: usize, rows: &[TraceRow]) -> CliResult<Vec<u8>> {
    let mut buf = Vec::new();
    write_trace_csv(&mut buf, classes, rows)?;
    Ok(buf)
}

pub fn default_run_dir(cfg: &ExperimentConfig) -> CliResult<PathBuf> {
    Ok(output_root().join(format!("train-{}", &cfg.hash()?[..12])))
}

pub struct TrainOutcome {
    pub dir: PathBuf,
    pub state: TrainState,
}

pub fn cmd_train(args: &TrainArgs) -> CliResult<TrainOutcome> {
    let cfg = load_config(args.config.as_deref(), &args.overrides)?;
    let dir = match &args.out {
        Some(d) => d.clone(),
        None => default_run_dir(&cfg)?,
    };
    prepare_output_dir(&dir, args.force)?;
    train_into(cfg, &dir)
}

fn save(dir: &Path, manifest: &mut RunManifest, name: &str, bytes: &[u8]) -> CliResult<()> {
    write_atomic(&dir.join(name), bytes)?;
    manifest.add_output(name);
    Ok(())
}

/// Trains `cfg` and writes every artifact into the existing `dir`.
pub fn train_into(cfg: ExperimentConfig, dir: &Path) -> CliResult<TrainOutcome> {
    let started = Instant::now();
    let mut manifest = RunManifest::new("train", &cfg, dir, &["data", "train", "artifacts"])?;
    manifest.write()?;
    save(dir, &mut manifest, CONFIG, cfg.to_toml()?.as_bytes())?;

    manifest.set_stage("data", Status::Running, None);
    let data = Datasets::generate(&cfg)?;
    manifest.set_stage("data", Status::Completed, None);
    manifest.set_stage("train", Status::Running, None);
    manifest.write()?;

    let k = cfg.classes();
    let total = cfg.schedule.total_iters;
    let mut state = TrainState::new(cfg, &data)?;
    let interval = state.config.eval.interval.max(1);
    let result = loop {
        if state.done() {
            break Ok(state);
        }
        let stop = ((state.step / interval) + 1) * interval;
        match state.run_until(&data, stop) {
            Ok(s) => {
                state = s;
                if let Some(row) = state.trace.iter().rev().find(|r| r.split == "target") {
                    log::info!("step {}/{total}: target mIoU {:.4}", state.step, row.report.miou);
                }
            }
            Err(f) => break Err(f),
        }
    };

    let state = match result {
        Ok(s) => s,
        Err(TrainFailure { error, step, last_good }) => {
            let detail = format!("aborted at step {step}: {error}");
            manifest.set_stage("train", Status::Failed, Some(detail.clone()));
            manifest.status = Status::Failed;
            if let Some(good) = last_good {
                save(dir, &mut manifest, LAST_GOOD, &checkpoint::encode(&good)?)?;
                save(dir, &mut manifest, STEPS, steps_csv(&good.log).as_bytes())?;
                save(dir, &mut manifest, TRACE, &trace_csv(k, &good.trace)?)?;
            }
            manifest.wall_clock_secs = Some(started.elapsed().as_secs_f64());
            manifest.write()?;
            return Err(match error {
                Error::Numeric(_) => CliError::numeric(detail),
                other => {
                    let mut e = CliError::from(other);
                    e.message = detail;
                    e
                }
            });
        }
    };
    manifest.set_stage("train", Status::Completed, None);
    manifest.set_stage("artifacts", Status::Running, None);
    manifest.write()?;

    save(dir, &mut manifest, CHECKPOINT, &checkpoint::encode(&state)?)?;
    save(dir, &mut manifest, TRACE, &trace_csv(k, &state.trace)?)?;
    save(dir, &mut manifest, STEPS, steps_csv(&state.log).as_bytes())?;
    let mut summary = serde_json::to_string_pretty(&RunSummary::of(&state))?;
    summary.push('\n');
    save(dir, &mut manifest, SUMMARY, summary.as_bytes())?;

    manifest.set_stage("artifacts", Status::Completed, None);
    manifest.status = Status::Completed;
    manifest.wall_clock_secs = Some(started.elapsed().as_secs_f64());
    manifest.write()?;
    Ok(TrainOutcome {
        dir: dir.to_path_buf(),
        state,
    })
}

/// Reads a run summary written by [`train_into`].
pub fn read_summary(dir: &Path) -> CliResult<RunSummary> {
    Ok(serde_json::from_str(&fs::read_to_string(dir.join(SUMMARY))?)?)
}
