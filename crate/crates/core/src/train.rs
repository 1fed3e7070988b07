//! Mean-teacher self-training with probabilistic prototype contrast.
//!
//! One step draws a labeled source crop and, when any target term is live,
//! a target crop chosen by the configured strategy. The teacher labels the
//! target crop and supplies the source embeddings that maintain the
//! prototype bank; the student is trained on the weighted loss and the
//! teacher follows it by EMA.

use std::fmt;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::agc::{agc_select, cbc_select, class_ambiguity, LabelMap, UNKNOWN};
use crate::config::{CropStrategy, EvalModel, ExperimentConfig};
use crate::diff::{Tape, Tensor};
use crate::error::{contract, Error, Result};
use crate::losses::{
    kl_sum, masked_mean, prob_contrastive, pseudo_label, supervised_ce, target_ce, total_loss, Anchors, LossParts,
    PseudoLabels,
};
use crate::metrics::{crop_statistics, entropy_map, iou, spearman, ConfusionMatrix, Spearman, TraceRow};
use crate::model::{
    ema_teacher, forward_plain, forward_tape, input_tensor, patch_features, NetworkParams, Outputs, FIRST_HEAD_PARAM,
};
use crate::optim::AdamW;
use crate::prototypes::PrototypeBank;
use crate::rng::{derive_seed, labeled};
use crate::synthdata::{empirical_frequencies, generate, Domain, LabeledGrid, Rect};

/// Training and evaluation grids of one experiment.
#[derive(Debug, Clone)]
pub struct Datasets {
    pub source: Vec<LabeledGrid>,
    pub target: Vec<LabeledGrid>,
    pub source_eval: Vec<LabeledGrid>,
    pub target_eval: Vec<LabeledGrid>,
    /// Inverse-frequency class weights from the source training grids.
    pub rcs_weights: Vec<f64>,
}

fn split_seed(world_seed: u64, split: &str) -> u64 {
    let b = derive_seed(world_seed, &format!("split/{split}"));
    u64::from_le_bytes(b[..8].try_into().expect("8 bytes"))
}

impl Datasets {
    pub fn generate(cfg: &ExperimentConfig) -> Result<Self> {
        let world = cfg.world_spec();
        let make = |split: &str, count: usize, domain: Domain| {
            let mut spec = world.clone();
            spec.seed = split_seed(world.seed, split);
            generate(&spec, count, domain)
        };
        let source = make("source_train", cfg.data.source_images, Domain::Source)?;
        let target = make("target_train", cfg.data.target_images, Domain::Target)?;
        let source_eval = make("source_eval", cfg.data.eval_images, Domain::Source)?;
        let target_eval = make("target_eval", cfg.data.eval_images, Domain::Target)?;
        let freq = empirical_frequencies(&source, world.classes);
        let inv: Vec<f64> = freq.iter().map(|&f| if f > 0.0 { 1.0 / f } else { 0.0 }).collect();
        let total: f64 = inv.iter().sum();
        let rcs_weights = inv.iter().map(|v| v / total).collect();
        Ok(Self {
            source,
            target,
            source_eval,
            target_eval,
            rcs_weights,
        })
    }
}

/// The independent random streams of a run.
#[derive(Debug, Clone, PartialEq)]
pub struct Streams {
    pub data_source: ChaCha8Rng,
    pub data_target: ChaCha8Rng,
    pub crops_source: ChaCha8Rng,
    pub crops_target: ChaCha8Rng,
    pub mc: ChaCha8Rng,
}

impl Streams {
    pub const NAMES: [&'static str; 5] = ["data/source", "data/target", "crops/source", "crops/target", "mc"];

    pub fn new(seed: u64) -> Self {
        Self {
            data_source: labeled(seed, Self::NAMES[0]),
            data_target: labeled(seed, Self::NAMES[1]),
            crops_source: labeled(seed, Self::NAMES[2]),
            crops_target: labeled(seed, Self::NAMES[3]),
            mc: labeled(seed, Self::NAMES[4]),
        }
    }

    pub fn all(&self) -> [&ChaCha8Rng; 5] {
        [
            &self.data_source,
            &self.data_target,
            &self.crops_source,
            &self.crops_target,
            &self.mc,
        ]
    }

    pub fn from_array(a: [ChaCha8Rng; 5]) -> Self {
        let [data_source, data_target, crops_source, crops_target, mc] = a;
        Self {
            data_source,
            data_target,
            crops_source,
            crops_target,
            mc,
        }
    }
}

/// Loss components and bookkeeping of one step. Absent terms were not
/// computed.
#[derive(Debug, Clone, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub source: f64,
    pub target: Option<f64>,
    pub contrast: Option<f64>,
    pub kl: Option<f64>,
    /// Target pixels above the confidence threshold.
    pub pseudo_kept: usize,
    pub anchors: usize,
    pub skipped_anchors: usize,
}

/// End-of-run diagnostics on the target evaluation split.
#[derive(Debug, Clone, PartialEq)]
pub struct Diagnostics {
    pub entropy_correct: Option<f64>,
    pub entropy_incorrect: Option<f64>,
    pub correct_pixels: usize,
    pub incorrect_pixels: usize,
    pub crop_norms: Vec<f64>,
    pub crop_vars: Vec<f64>,
    pub norm_var: Spearman,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub config: ExperimentConfig,
    /// Steps completed.
    pub step: usize,
    pub student: NetworkParams,
    pub teacher: NetworkParams,
    pub optimizer: AdamW,
    pub bank: PrototypeBank,
    /// Latest teacher argmax per target training pixel, [`UNKNOWN`] if none.
    pub label_cache: Vec<Vec<u8>>,
    pub streams: Streams,
    pub trace: Vec<TraceRow>,
    pub log: Vec<StepLog>,
    pub diagnostics: Option<Diagnostics>,
}

/// A run stopped by an error; `last_good` is the state before the failing
/// step.
#[derive(Debug)]
pub struct TrainFailure {
    pub error: Error,
    pub step: usize,
    pub last_good: Option<Box<TrainState>>,
}

impl fmt::Display for TrainFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "training stopped at step {}: {}", self.step, self.error)
    }
}

impl std::error::Error for TrainFailure {}

fn labels_of(grid: &LabeledGrid, rect: Rect) -> Vec<Option<usize>> {
    grid.crop_labels(rect).into_iter().map(|l| Some(l as usize)).collect()
}

fn all_finite(v: &[f64]) -> bool {
    v.iter().all(|x| x.is_finite())
}

impl TrainState {
    pub fn new(config: ExperimentConfig, data: &Datasets) -> Result<Self> {
        config.validate()?;
        contract!(
            data.target.len() == config.data.target_images,
            "dataset has {} target grids, config expects {}",
            data.target.len(),
            config.data.target_images
        );
        let mut init = labeled(config.seed, "init");
        let student = NetworkParams::init(config.model_shape(), &mut init)?;
        let teacher = student.clone();
        let optimizer = AdamW::new(config.adamw(), &student);
        let label_cache = data.target.iter().map(|g| vec![UNKNOWN; g.labels.len()]).collect();
        Ok(Self {
            bank: PrototypeBank::new(config.classes()),
            streams: Streams::new(config.seed),
            config,
            step: 0,
            student,
            teacher,
            optimizer,
            label_cache,
            trace: Vec::new(),
            log: Vec::new(),
            diagnostics: None,
        })
    }

    pub fn done(&self) -> bool {
        self.step >= self.config.schedule.total_iters
    }

    /// Parameters used for evaluation.
    pub fn eval_params(&self) -> &NetworkParams {
        match self.config.eval.model {
            EvalModel::Teacher => &self.teacher,
            EvalModel::Student => &self.student,
        }
    }

    fn select_target_crop(&mut self, index: usize, grid: &LabeledGrid, data: &Datasets) -> Result<Rect> {
        let c = &self.config.crop;
        let rng = &mut self.streams.crops_target;
        let map = LabelMap {
            labels: &self.label_cache[index],
            height: grid.height,
            width: grid.width,
        };
        Ok(match c.strategy {
            CropStrategy::Random => Rect::random(rng, grid.height, grid.width, c.size)?,
            CropStrategy::Agc => {
                let amb = class_ambiguity(&self.bank, c.tau, c.ambiguity)?;
                agc_select(&map, &amb.weights, c.top_k, c.count, c.size, rng)?.rect
            }
            CropStrategy::Rcs => agc_select(&map, &data.rcs_weights, c.top_k, c.count, c.size, rng)?.rect,
            CropStrategy::Cbc => cbc_select(&map, self.config.classes(), c.cbc_threshold, c.count, c.size, rng)?.rect,
        })
    }

    /// Runs one optimization step, evaluating afterwards when due.
    pub fn step(&mut self, data: &Datasets) -> Result<StepLog> {
        contract!(!self.done(), "training already finished at step {}", self.step);
        let step = self.step;
        let cfg = self.config.clone();
        let k = cfg.classes();
        let sched = cfg.schedule();
        let weights = cfg.loss.weights();
        let contrast_on = sched.contrast_active(step);
        let use_c = contrast_on && weights.lambda_c > 0.0;
        let use_kl = contrast_on && weights.lambda_kl > 0.0;
        let need_emb = use_c || use_kl;
        let use_target = weights.lambda_t > 0.0 || need_emb;
        let maintain_bank = weights.lambda_c > 0.0 || cfg.crop.strategy == CropStrategy::Agc;
        let size = cfg.crop.size;

        let si = self.streams.data_source.random_range(0..data.source.len());
        let src = &data.source[si];
        let srect = Rect::random(&mut self.streams.crops_source, src.height, src.width, size)?;
        let sfeat = patch_features(src, srect);
        let slabels = labels_of(src, srect);

        let target: Option<(Vec<f64>, PseudoLabels)> = if use_target {
            let ti = self.streams.data_target.random_range(0..data.target.len());
            let grid = &data.target[ti];
            let rect = self.select_target_crop(ti, grid, data)?;
            let feat = patch_features(grid, rect);
            let out = forward_plain(&self.teacher, &feat, false)?;
            let pseudo = pseudo_label(&out.logits, k, cfg.loss.alpha)?;
            for (j, idx) in rect.indices(grid.width).enumerate() {
                self.label_cache[ti][idx] = pseudo.labels[j] as u8;
            }
            Some((feat, pseudo))
        } else {
            None
        };

        if maintain_bank {
            let out = forward_plain(&self.teacher, &sfeat, true)?;
            let emb = out.embeddings.expect("embeddings requested");
            let labels: Vec<usize> = slabels.iter().map(|l| l.expect("source pixels are labeled")).collect();
            self.bank.update(&emb, &labels, cfg.prototypes.momentum)?;
        }

        let mut tape = Tape::new();
        let bound = self.student.bind(&mut tape);
        let s_out = forward_tape(&mut tape, &bound, input_tensor(sfeat)?, need_emb)?;
        let ce = supervised_ce(&mut tape, s_out.logits, &slabels)?;
        let mut parts = LossParts {
            source: ce.loss,
            target: None,
            contrast: None,
            kl: None,
        };
        let mut log = StepLog {
            step,
            lr: sched.lr(step, false),
            loss: 0.0,
            source: 0.0,
            target: None,
            contrast: None,
            kl: None,
            pseudo_kept: 0,
            anchors: 0,
            skipped_anchors: 0,
        };
        if let Some((feat, pseudo)) = target {
            log.pseudo_kept = pseudo.kept();
            let t_out = forward_tape(&mut tape, &bound, input_tensor(feat)?, need_emb)?;
            if weights.lambda_t > 0.0 {
                parts.target = Some(target_ce(&mut tape, t_out.logits, &pseudo)?);
            }
            if need_emb {
                let (sm, sv) = s_out.embeddings.expect("embeddings requested");
                let (tm, tv) = t_out.embeddings.expect("embeddings requested");
                if use_c {
                    let tlabels = pseudo.masked();
                    let sets = [
                        Anchors {
                            mean: sm,
                            var: sv,
                            labels: &slabels,
                        },
                        Anchors {
                            mean: tm,
                            var: tv,
                            labels: &tlabels,
                        },
                    ];
                    let c = prob_contrastive(
                        &mut tape,
                        &sets,
                        &self.bank.prototypes(),
                        cfg.loss.similarity,
                        cfg.loss.tau,
                        &mut self.streams.mc,
                    )?;
                    log.anchors = c.anchors;
                    log.skipped_anchors = c.skipped;
                    parts.contrast = Some(c.loss);
                }
                if use_kl {
                    let s = kl_sum(&mut tape, sm, sv, &vec![true; slabels.len()])?;
                    let t = kl_sum(&mut tape, tm, tv, &vec![true; pseudo.labels.len()])?;
                    parts.kl = Some(masked_mean(&mut tape, &[s, t])?);
                }
            }
        }
        let loss = total_loss(&mut tape, &parts, &weights)?;
        let item = |tape: &Tape, v| tape.value(v).item();
        log.loss = item(&tape, loss);
        log.source = item(&tape, parts.source);
        log.target = parts.target.map(|v| item(&tape, v));
        log.contrast = parts.contrast.map(|v| item(&tape, v));
        log.kl = parts.kl.map(|v| item(&tape, v));
        if !log.loss.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite loss {} (source {}, target {:?}, contrast {:?}, kl {:?})",
                log.loss, log.source, log.target, log.contrast, log.kl
            )));
        }

        let grads = tape.backward(loss)?;
        let grads: Vec<Tensor> = bound.vars().iter().map(|&v| grads.wrt(v)).collect();
        let names = self.student.names();
        for (g, name) in grads.iter().zip(&names) {
            if !all_finite(g.data()) {
                return Err(Error::Numeric(format!("non-finite gradient for `{name}`")));
            }
        }
        let lrs: Vec<f64> = (0..grads.len())
            .map(|i| sched.lr(step, i >= FIRST_HEAD_PARAM))
            .collect();
        self.optimizer.step(&mut self.student, &grads, &lrs)?;
        ema_teacher(&self.student, &mut self.teacher, cfg.teacher.momentum)?;
        self.step += 1;
        self.log.push(log.clone());

        let last = self.step == cfg.schedule.total_iters;
        if self.step.is_multiple_of(cfg.eval.interval) || last {
            self.evaluate(data, last)?;
        }
        Ok(log)
    }

    fn evaluate(&mut self, data: &Datasets, with_diagnostics: bool) -> Result<()> {
        let k = self.config.classes();
        let params = self.eval_params().clone();
        let source = evaluate_grids(&params, &data.source_eval, k)?;
        let target = evaluate_grids(&params, &data.target_eval, k)?;
        for (split, ev) in [("source", &source), ("target", &target)] {
            self.trace.push(TraceRow {
                step: self.step,
                split: split.to_string(),
                report: iou(&ev.confusion)?,
            });
        }
        if with_diagnostics {
            let mut rng = labeled(self.config.seed, "eval/crops");
            let (norms, vars) = crop_diagnostics(
                &params,
                &data.target_eval,
                self.config.crop.size,
                self.config.eval.crops,
                &mut rng,
            )?;
            self.diagnostics = Some(Diagnostics {
                entropy_correct: (target.correct > 0).then(|| target.entropy_correct / target.correct as f64),
                entropy_incorrect: (target.incorrect > 0).then(|| target.entropy_incorrect / target.incorrect as f64),
                correct_pixels: target.correct,
                incorrect_pixels: target.incorrect,
                norm_var: spearman(&norms, &vars)?,
                crop_norms: norms,
                crop_vars: vars,
            });
        }
        Ok(())
    }

    /// Steps until `stop` steps are complete (or the run ends).
    pub fn run_until(mut self, data: &Datasets, stop: usize) -> std::result::Result<Self, TrainFailure> {
        while self.step < stop.min(self.config.schedule.total_iters) {
            // The history only grows, so it is left out of the snapshot and
            // cut back to the snapshot step on failure.
            let log = std::mem::take(&mut self.log);
            let trace = std::mem::take(&mut self.trace);
            let mut snapshot = self.clone();
            self.log = log;
            self.trace = trace;
            if let Err(error) = self.step(data) {
                let at = snapshot.step;
                snapshot.log = std::mem::take(&mut self.log);
                snapshot.log.truncate(at);
                snapshot.trace = std::mem::take(&mut self.trace);
                snapshot.trace.retain(|r| r.step <= at);
                return Err(TrainFailure {
                    error,
                    step: at,
                    last_good: Some(Box::new(snapshot)),
                });
            }
        }
        Ok(self)
    }
}

/// Trains from scratch to the configured length.
pub fn train(config: ExperimentConfig, data: &Datasets) -> std::result::Result<TrainState, TrainFailure> {
    let state = TrainState::new(config, data).map_err(|error| TrainFailure {
        error,
        step: 0,
        last_good: None,
    })?;
    let total = state.config.schedule.total_iters;
    state.run_until(data, total)
}

/// Whole-grid prediction.
pub fn predict(params: &NetworkParams, grid: &LabeledGrid, with_embeddings: bool) -> Result<Outputs> {
    forward_plain(params, &patch_features(grid, grid.full_rect()), with_embeddings)
}

pub fn argmax_rows(logits: &[f64], classes: usize) -> Vec<usize> {
    logits
        .chunks(classes)
        .map(|row| {
            let mut best = 0;
            for (c, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = c;
                }
            }
            best
        })
        .collect()
}

/// Confusion matrix and entropy split by correctness over some grids.
#[derive(Debug, Clone)]
pub struct GridEvaluation {
    pub confusion: ConfusionMatrix,
    pub entropy_correct: f64,
    pub entropy_incorrect: f64,
    pub correct: usize,
    pub incorrect: usize,
}

pub fn evaluate_grids(params: &NetworkParams, grids: &[LabeledGrid], classes: usize) -> Result<GridEvaluation> {
    let mut ev = GridEvaluation {
        confusion: ConfusionMatrix::new(classes),
        entropy_correct: 0.0,
        entropy_incorrect: 0.0,
        correct: 0,
        incorrect: 0,
    };
    for g in grids {
        let out = predict(params, g, false)?;
        let pred = argmax_rows(&out.logits, classes);
        let ent = entropy_map(&out.logits, classes)?;
        ev.confusion.accumulate(&g.labels, &pred)?;
        for ((&p, &t), h) in pred.iter().zip(&g.labels).zip(ent) {
            if p == t as usize {
                ev.entropy_correct += h;
                ev.correct += 1;
            } else {
                ev.entropy_incorrect += h;
                ev.incorrect += 1;
            }
        }
    }
    Ok(ev)
}

/// Mean raw-mean norm and mean variance of `count` random crops.
pub fn crop_diagnostics<R: Rng + ?Sized>(
    params: &NetworkParams,
    grids: &[LabeledGrid],
    size: usize,
    count: usize,
    rng: &mut R,
) -> Result<(Vec<f64>, Vec<f64>)> {
    contract!(!grids.is_empty(), "crop diagnostics need at least one grid");
    let mut norms = Vec::with_capacity(count);
    let mut vars = Vec::with_capacity(count);
    for _ in 0..count {
        let g = &grids[rng.random_range(0..grids.len())];
        let rect = Rect::random(rng, g.height, g.width, size)?;
        let out = forward_plain(params, &patch_features(g, rect), true)?;
        let (n, v) = crop_statistics(out.embeddings.as_ref().expect("embeddings requested"))?;
        norms.push(n);
        vars.push(v);
    }
    Ok((norms, vars))
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny_config(total: usize) -> ExperimentConfig {
        let mut cfg = ExperimentConfig::default();
        cfg.world.height = 24;
        cfg.world.width = 24;
        cfg.world.blob_scale = 6.0;
        cfg.world.classes = 4;
        cfg.data.source_images = 3;
        cfg.data.target_images = 3;
        cfg.data.eval_images = 2;
        cfg.model.hidden = 8;
        cfg.model.proj_hidden = 8;
        cfg.model.embed_dim = 4;
        cfg.crop.size = 8;
        cfg.crop.top_k = 2;
        cfg.crop.count = 4;
        cfg.schedule.total_iters = total;
        cfg.schedule.warmup_iters = 2;
        cfg.eval.interval = 5;
        cfg.eval.crops = 5;
        cfg.loss.alpha = 0.3;
        cfg
    }

    #[test]
    fn zero_iterations_keep_the_initial_state() {
        let cfg = tiny_config(0);
        let data = Datasets::generate(&cfg).unwrap();
        let init = TrainState::new(cfg.clone(), &data).unwrap();
        let done = train(cfg, &data).unwrap();
        assert!(done.trace.is_empty() && done.log.is_empty());
        assert_eq!(done.student, init.student);
    }

    #[test]
    fn short_run_is_deterministic_and_finite() {
        let cfg = tiny_config(12);
        let data = Datasets::generate(&cfg).unwrap();
        let a = train(cfg.clone(), &data).unwrap();
        let b = train(cfg, &data).unwrap();
        assert_eq!(a, b);
        assert_eq!(
            a.trace.iter().map(|r| r.step).collect::<Vec<_>>(),
            vec![5, 5, 10, 10, 12, 12]
        );
        assert!(a.log.iter().all(|l| l.loss.is_finite()));
        assert!(a.log.iter().any(|l| l.contrast.is_some()));
        assert!(!a.bank.is_empty());
        assert!(a.diagnostics.is_some());
        assert!(a.label_cache.iter().flatten().any(|&l| l != UNKNOWN));
    }

    #[test]
    fn split_runs_match_a_single_run() {
        let cfg = tiny_config(9);
        let data = Datasets::generate(&cfg).unwrap();
        let whole = train(cfg.clone(), &data).unwrap();
        let half = TrainState::new(cfg, &data).unwrap().run_until(&data, 4).unwrap();
        assert_eq!(half.step, 4);
        assert_eq!(half.run_until(&data, 9).unwrap(), whole);
    }

    #[test]
    fn every_strategy_and_kind_runs() {
        use crate::similarity::SimilarityKind;
        for strategy in [CropStrategy::Random, CropStrategy::Rcs, CropStrategy::Cbc] {
            let mut cfg = tiny_config(4);
            cfg.crop.strategy = strategy;
            let data = Datasets::generate(&cfg).unwrap();
            train(cfg, &data).unwrap();
        }
        for kind in [
            SimilarityKind::Bk,
            SimilarityKind::Kl,
            SimilarityKind::JsMc { samples: 4 },
            SimilarityKind::Wasserstein2,
            SimilarityKind::Cosine,
            SimilarityKind::McCosine { samples: 4 },
        ] {
            let mut cfg = tiny_config(4);
            cfg.loss.similarity = kind;
            let data = Datasets::generate(&cfg).unwrap();
            train(cfg, &data).unwrap();
        }
    }

    #[test]
    fn non_finite_weights_abort_with_last_good_state() {
        let cfg = tiny_config(6);
        let data = Datasets::generate(&cfg).unwrap();
        let mut state = TrainState::new(cfg, &data).unwrap().run_until(&data, 3).unwrap();
        state.student.tensors_mut()[0].data_mut()[0] = f64::NAN;
        let fail = state.clone().run_until(&data, 6).unwrap_err();
        assert_eq!(fail.step, 3);
        assert!(matches!(fail.error, Error::Numeric(_)), "{}", fail.error);
        // NaN never compares equal, so compare the weights bitwise.
        let good = fail.last_good.unwrap();
        assert_eq!(good.step, 3);
        let bits = |p: &NetworkParams| -> Vec<u64> {
            p.tensors()
                .iter()
                .flat_map(|t| t.data().iter().map(|v| v.to_bits()))
                .collect()
        };
        assert_eq!(bits(&good.student), bits(&state.student));
        assert_eq!(good.log, state.log);
    }
}
