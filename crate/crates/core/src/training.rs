//! Optimizer, learning-rate schedule, training and evaluation loops, metrics.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::data::{
    augment, farthest_point_sample, normalize, AugmentConfig, DataSource, Label, LabeledCloud, ProtocolSplit,
};
use crate::error::{Error, Result};
use crate::model::{one_hot, Mode, Task, VntModel};
use crate::params::ParamStore;
use crate::rng::{derive, Rng};
use crate::rotation::Protocol;
use crate::tape::{BatchStats, Tape};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub betas: [f64; 2],
    pub eps: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub sched_step: usize,
    pub sched_gamma: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 5e-4,
            betas: [0.9, 0.999],
            eps: 1e-8,
            batch_size: 8,
            epochs: 30,
            sched_step: 20,
            sched_gamma: 0.9,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if !(self.lr > 0.0) {
            problems.push(format!("lr must be positive, got {}", self.lr));
        }
        if !(self.sched_gamma > 0.0 && self.sched_gamma <= 1.0) {
            problems.push(format!("sched_gamma must lie in (0,1], got {}", self.sched_gamma));
        }
        if self.betas.iter().any(|b| !(0.0..1.0).contains(b)) {
            problems.push(format!("betas must lie in [0,1), got {:?}", self.betas));
        }
        if !(self.eps > 0.0) {
            problems.push("eps must be positive".into());
        }
        if self.batch_size == 0 || self.sched_step == 0 {
            problems.push("batch_size and sched_step must be ≥ 1".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }
}

/// `lr · γ^⌊epoch / step⌋`.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    cfg.lr * cfg.sched_gamma.powi((epoch / cfg.sched_step) as i32)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: ParamStore,
    pub v: ParamStore,
    /// Steps taken so far.
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &ParamStore) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
        }
    }
}

/// One bias-corrected Adam update at learning rate `lr`.
pub fn adam_step(
    params: &mut ParamStore,
    grads: &ParamStore,
    state: &mut AdamState,
    cfg: &TrainConfig,
    lr: f64,
) -> Result<()> {
    for (name, g) in grads.iter() {
        let p = params.require(name)?;
        if p.shape() != g.shape() {
            return Err(Error::shape("adam_step", p.shape(), g.shape()));
        }
        if !g.is_finite() {
            return Err(Error::NonFinite(format!("gradient of {name}")));
        }
    }
    state.t += 1;
    let [b1, b2] = cfg.betas;
    let c1 = 1.0 - b1.powi(state.t as i32);
    let c2 = 1.0 - b2.powi(state.t as i32);
    let names: Vec<String> = params.names().map(str::to_string).collect();
    for name in names {
        let Some(g) = grads.get(&name) else { continue };
        let m: Vec<f64> = state
            .m
            .require(&name)?
            .data()
            .iter()
            .zip(g.data())
            .map(|(m, g)| b1 * m + (1.0 - b1) * g)
            .collect();
        let v: Vec<f64> = state
            .v
            .require(&name)?
            .data()
            .iter()
            .zip(g.data())
            .map(|(v, g)| b2 * v + (1.0 - b2) * g * g)
            .collect();
        let p: Vec<f64> = params
            .require(&name)?
            .data()
            .iter()
            .zip(m.iter().zip(&v))
            .map(|(p, (m, v))| p - lr * (m / c1) / ((v / c2).sqrt() + cfg.eps))
            .collect();
        params.set_data(&name, p)?;
        state.m.set_data(&name, m)?;
        state.v.set_data(&name, v)?;
    }
    Ok(())
}

/// Formats with 9 significant digits, `%.9g` style.
pub fn fmt_sig9(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        return format!("{x}");
    }
    let sci = format!("{x:.8e}");
    let (mantissa, exp) = sci.split_once('e').unwrap();
    let exp: i32 = exp.parse().unwrap();
    let trim = |s: String| {
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s
        }
    };
    if (-5..9).contains(&exp) {
        trim(format!("{x:.*}", (8 - exp).max(0) as usize))
    } else {
        format!("{}e{exp}", trim(mantissa.to_string()))
    }
}

/// Runs `f` for every index, on `jobs` worker threads when `jobs > 1`.
/// Results come back in index order either way.
fn map_indices<T, F>(jobs: usize, n: usize, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize) -> Result<T> + Sync + Send,
{
    if jobs <= 1 {
        return (0..n).map(f).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    pool.install(|| (0..n).into_par_iter().map(&f).collect())
}

/// FPS down to `sample_n` points, then normalization. The first FPS index is
/// random when `rng` is given and 0 otherwise.
pub fn prepare(cloud: &LabeledCloud, sample_n: usize, rng: Option<&mut Rng>) -> Result<LabeledCloud> {
    let n = cloud.len();
    if sample_n > n {
        return Err(Error::Contract(format!(
            "cannot sample {sample_n} points from a cloud of {n}"
        )));
    }
    let start = rng.map_or(0, |r| r.random_range(0..n));
    let idx = farthest_point_sample(&cloud.points, sample_n, start)?;
    let picked = cloud.select(&idx)?;
    Ok(picked.with_points(normalize(&picked.points)?))
}

fn labels_of(cloud: &LabeledCloud) -> Vec<usize> {
    match &cloud.label {
        Label::Class(c) => vec![*c],
        Label::Parts(p) => p.clone(),
    }
}

fn category_tensor(model: &VntModel, cloud: &LabeledCloud) -> Result<Option<Tensor>> {
    match model.config.task {
        Task::Classification => Ok(None),
        Task::Segmentation => {
            let c = cloud
                .category
                .ok_or_else(|| Error::Contract("segmentation sample without category".into()))?;
            Ok(Some(one_hot(c, model.config.num_categories)?))
        }
    }
}

fn check_labels(model: &VntModel, cloud: &LabeledCloud) -> Result<()> {
    let ok = matches!(
        (&cloud.label, model.config.task),
        (Label::Class(_), Task::Classification) | (Label::Parts(_), Task::Segmentation)
    );
    if !ok {
        return Err(Error::Contract(format!(
            "labels do not fit a {:?} model",
            model.config.task
        )));
    }
    Ok(())
}

struct SampleGrad {
    loss: f64,
    grads: ParamStore,
    bn: Vec<BatchStats>,
}

fn sample_grad(model: &VntModel, cloud: &LabeledCloud, aug: &AugmentConfig, rng: &mut Rng) -> Result<SampleGrad> {
    check_labels(model, cloud)?;
    let prepared = prepare(cloud, aug.sample_n, Some(rng))?;
    let sample = augment(&prepared, aug, rng)?;
    let category = category_tensor(model, &sample)?;
    let mut tape = Tape::new();
    let bound = model.params.bind(&mut tape, true);
    let out = model.forward(&mut tape, &bound, &sample.points, category.as_ref(), Mode::Train(rng))?;
    let loss = tape.cross_entropy(out.logits, &labels_of(&sample))?;
    let value = tape.value(loss).item();
    let mut grads = tape.backward(loss)?;
    Ok(SampleGrad {
        loss: value,
        grads: model.params.collect_grads(&bound, &mut grads),
        bn: out.bn_stats,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub task: Task,
    pub samples: usize,
    pub loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<f64>,
    /// `None` for classes absent from the evaluated set.
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub per_class_accuracy: Vec<Option<f64>>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub part_iou: Vec<Option<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub category_miou: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub global_miou: Option<f64>,
}

impl Metrics {
    /// Accuracy for classification, global mIoU for segmentation.
    pub fn headline(&self) -> f64 {
        match self.task {
            Task::Classification => self.accuracy.unwrap_or(0.0),
            Task::Segmentation => self.global_miou.unwrap_or(0.0),
        }
    }
}

/// Overall and per-class accuracy.
pub fn classification_metrics(pred: &[usize], truth: &[usize], num_classes: usize) -> (f64, Vec<Option<f64>>) {
    let correct = pred.iter().zip(truth).filter(|(p, t)| p == t).count();
    let per_class = (0..num_classes)
        .map(|c| {
            let total = truth.iter().filter(|&&t| t == c).count();
            let hit = pred.iter().zip(truth).filter(|(&p, &t)| t == c && p == c).count();
            (total > 0).then(|| hit as f64 / total as f64)
        })
        .collect();
    (correct as f64 / truth.len().max(1) as f64, per_class)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegmentationScores {
    /// Pooled `TP/(TP+FP+FN)` per part; `None` when the part never occurs
    /// in either predictions or labels.
    pub part_iou: Vec<Option<f64>>,
    /// Mean over each category's parts, then over categories.
    pub category_miou: f64,
    /// Mean over all parts.
    pub global_miou: f64,
}

/// `pred[s][i]`/`truth[s][i]` are part ids of point `i` in sample `s`. A
/// part belongs to the categories whose samples carry it in `truth`.
pub fn segmentation_metrics(
    pred: &[Vec<usize>],
    truth: &[Vec<usize>],
    categories: &[usize],
    num_parts: usize,
) -> SegmentationScores {
    let mut tp = vec![0usize; num_parts];
    let mut fp = vec![0usize; num_parts];
    let mut fn_ = vec![0usize; num_parts];
    let num_categories = categories.iter().max().map_or(0, |m| m + 1);
    let mut owns = vec![vec![false; num_parts]; num_categories];
    for ((p, t), &c) in pred.iter().zip(truth).zip(categories) {
        for (&pi, &ti) in p.iter().zip(t) {
            owns[c][ti] = true;
            if pi == ti {
                tp[ti] += 1;
            } else {
                fn_[ti] += 1;
                if pi < num_parts {
                    fp[pi] += 1;
                }
            }
        }
    }
    let part_iou: Vec<Option<f64>> = (0..num_parts)
        .map(|k| {
            let denom = tp[k] + fp[k] + fn_[k];
            (denom > 0).then(|| tp[k] as f64 / denom as f64)
        })
        .collect();
    let mean = |xs: &[f64]| {
        if xs.is_empty() {
            0.0
        } else {
            xs.iter().sum::<f64>() / xs.len() as f64
        }
    };
    let per_category: Vec<f64> = owns
        .iter()
        .filter(|o| o.iter().any(|&b| b))
        .map(|o| {
            let ious: Vec<f64> = (0..num_parts)
                .filter(|&k| o[k])
                .map(|k| part_iou[k].unwrap_or(0.0))
                .collect();
            mean(&ious)
        })
        .collect();
    let all: Vec<f64> = part_iou.iter().flatten().copied().collect();
    SegmentationScores {
        category_miou: mean(&per_category),
        global_miou: mean(&all),
        part_iou,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Predictions {
    Class(Vec<usize>),
    Parts(Vec<Vec<usize>>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub metrics: Metrics,
    pub predictions: Predictions,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalOptions {
    pub protocol: Protocol,
    /// Seeds the fixed per-sample test rotations.
    pub seed: u64,
    pub sample_n: usize,
    pub jobs: usize,
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = i;
        }
    }
    best
}

/// Evaluation mode: FPS from index 0, no scale/shift, a fixed rotation per
/// sample drawn under `opts.protocol`.
pub fn evaluate(model: &VntModel, samples: &[LabeledCloud], opts: &EvalOptions) -> Result<Evaluation> {
    let split = ProtocolSplit {
        train: opts.protocol,
        test: opts.protocol,
        test_seed: opts.seed,
    };
    let aug = AugmentConfig::rotation_only(opts.protocol, opts.sample_n);
    let per_sample = map_indices(opts.jobs, samples.len(), |i| {
        check_labels(model, &samples[i])?;
        let prepared = prepare(&samples[i], opts.sample_n, None)?;
        let sample = augment(&prepared, &aug, &mut split.test_rng(i))?;
        let category = category_tensor(model, &sample)?;
        let mut tape = Tape::new();
        let bound = model.params.bind(&mut tape, false);
        let out = model.forward(&mut tape, &bound, &sample.points, category.as_ref(), Mode::Eval)?;
        let labels = labels_of(&sample);
        let loss = tape.cross_entropy(out.logits, &labels)?;
        let logits = tape.value(out.logits);
        let width = logits.shape()[1];
        let pred: Vec<usize> = logits.data().chunks_exact(width).map(argmax).collect();
        Ok((tape.value(loss).item(), pred, labels, sample.category.unwrap_or(0)))
    })?;
    let n = per_sample.len();
    let loss = per_sample.iter().map(|s| s.0).sum::<f64>() / n.max(1) as f64;
    let cfg = &model.config;
    Ok(match cfg.task {
        Task::Classification => {
            let pred: Vec<usize> = per_sample.iter().map(|s| s.1[0]).collect();
            let truth: Vec<usize> = per_sample.iter().map(|s| s.2[0]).collect();
            let (accuracy, per_class) = classification_metrics(&pred, &truth, cfg.num_classes);
            Evaluation {
                metrics: Metrics {
                    task: cfg.task,
                    samples: n,
                    loss,
                    accuracy: Some(accuracy),
                    per_class_accuracy: per_class,
                    part_iou: vec![],
                    category_miou: None,
                    global_miou: None,
                },
                predictions: Predictions::Class(pred),
            }
        }
        Task::Segmentation => {
            let cats: Vec<usize> = per_sample.iter().map(|s| s.3).collect();
            let (pred, truth): (Vec<_>, Vec<_>) = per_sample.into_iter().map(|s| (s.1, s.2)).unzip();
            let scores = segmentation_metrics(&pred, &truth, &cats, cfg.num_classes);
            Evaluation {
                metrics: Metrics {
                    task: cfg.task,
                    samples: n,
                    loss,
                    accuracy: None,
                    per_class_accuracy: vec![],
                    part_iou: scores.part_iou,
                    category_miou: Some(scores.category_miou),
                    global_miou: Some(scores.global_miou),
                },
                predictions: Predictions::Parts(pred),
            }
        }
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOptions {
    pub train: TrainConfig,
    /// Scale/shift ranges and sample size; the rotation protocol is taken
    /// from `split`.
    pub augment: AugmentConfig,
    pub split: ProtocolSplit,
    pub jobs: usize,
    /// Receives `metrics.csv`, `checkpoint/` (final state) and `best/`.
    pub out_dir: Option<PathBuf>,
    /// Recorded in `run.json`.
    pub data: Option<DataSource>,
    pub verbose: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub eval_metric: f64,
}

/// Stored as `run.json` next to checkpoints so evaluation can reuse the
/// sampling setup.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunInfo {
    pub train: TrainConfig,
    pub sample_n: usize,
    pub split: ProtocolSplit,
    pub epoch: usize,
    pub eval_metric: f64,
    #[serde(default)]
    pub data: Option<DataSource>,
}

pub struct TrainOutcome {
    pub optimizer: AdamState,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub final_eval: Evaluation,
}

pub fn metrics_csv(history: &[EpochRecord]) -> String {
    let mut s = String::from("epoch,lr,train_loss,eval_metric\n");
    for r in history {
        s += &format!(
            "{},{},{},{}\n",
            r.epoch,
            fmt_sig9(r.lr),
            fmt_sig9(r.train_loss),
            fmt_sig9(r.eval_metric)
        );
    }
    s
}

const SHUFFLE_STREAM: u64 = 0x5_u64;
const SAMPLE_STREAM: u64 = 0x6_u64;

/// Trains `model` in place on `train`, evaluating on `test` after every
/// epoch under the test protocol.
pub fn train(
    model: &mut VntModel,
    train: &[LabeledCloud],
    test: &[LabeledCloud],
    opts: &TrainOptions,
) -> Result<TrainOutcome> {
    let cfg = &opts.train;
    cfg.validate()?;
    opts.augment.validate()?;
    if train.is_empty() || test.is_empty() {
        return Err(Error::Data {
            path: "<dataset>".into(),
            msg: "training and test splits must be nonempty".into(),
        });
    }
    let aug = AugmentConfig {
        protocol: opts.split.train,
        ..opts.augment
    };
    let eval_opts = EvalOptions {
        protocol: opts.split.test,
        seed: opts.split.test_seed,
        sample_n: aug.sample_n,
        jobs: opts.jobs,
    };
    if let Some(dir) = &opts.out_dir {
        fs::create_dir_all(dir)?;
    }
    let mut optimizer = AdamState::new(&model.params);
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, f64)> = None;
    let mut last_eval = None;
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        let lr = lr_at(epoch, cfg);
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut derive(cfg.seed, &[SHUFFLE_STREAM, epoch as u64]));
        let mut loss_sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let snapshot: &VntModel = model;
            let results = map_indices(opts.jobs, batch.len(), |j| {
                let idx = batch[j];
                let mut rng = derive(cfg.seed, &[SAMPLE_STREAM, epoch as u64, idx as u64]);
                sample_grad(snapshot, &train[idx], &aug, &mut rng)
            })?;
            let scale = 1.0 / results.len() as f64;
            let mut mean = model.params.zeros_like();
            let names: Vec<String> = mean.names().map(str::to_string).collect();
            for name in &names {
                let mut acc = vec![0.0; mean.require(name)?.numel()];
                for r in &results {
                    for (a, g) in acc.iter_mut().zip(r.grads.require(name)?.data()) {
                        *a += g;
                    }
                }
                mean.set_data(name, acc.into_iter().map(|a| a * scale).collect())?;
            }
            let batch_loss: f64 = results.iter().map(|r| r.loss).sum();
            if !batch_loss.is_finite() {
                return Err(Error::NonFinite(format!("training loss at epoch {epoch}, step {step}")));
            }
            loss_sum += batch_loss;
            adam_step(&mut model.params, &mean, &mut optimizer, cfg, lr)?;
            let stats: Vec<Vec<BatchStats>> = results.into_iter().map(|r| r.bn).collect();
            model.update_running_stats(&stats)?;
            step += 1;
        }
        let eval = evaluate(model, test, &eval_opts)?;
        let record = EpochRecord {
            epoch,
            lr,
            train_loss: loss_sum / train.len() as f64,
            eval_metric: eval.metrics.headline(),
        };
        if opts.verbose {
            eprintln!(
                "epoch {epoch:>3}  lr {}  loss {}  eval {}",
                fmt_sig9(lr),
                fmt_sig9(record.train_loss),
                fmt_sig9(record.eval_metric)
            );
        }
        let improved = best.is_none_or(|(_, m)| record.eval_metric > m);
        if improved {
            best = Some((epoch, record.eval_metric));
        }
        history.push(record);
        if let Some(dir) = &opts.out_dir {
            fs::write(dir.join("metrics.csv"), metrics_csv(&history))?;
            let info = RunInfo {
                train: cfg.clone(),
                sample_n: aug.sample_n,
                split: opts.split,
                epoch,
                eval_metric: eval.metrics.headline(),
                data: opts.data.clone(),
            };
            let info = serde_json::to_value(&info)?;
            if improved {
                checkpoint::save(&dir.join("best"), model, Some(&optimizer), Some(&info))?;
            }
            checkpoint::save(&dir.join("checkpoint"), model, Some(&optimizer), Some(&info))?;
        }
        last_eval = Some(eval);
    }
    let final_eval = match last_eval {
        Some(e) => e,
        None => evaluate(model, test, &eval_opts)?,
    };
    Ok(TrainOutcome {
        optimizer,
        history,
        best_epoch: best.map_or(0, |b| b.0),
        final_eval,
    })
}

/// `predictions.csv`: one row per sample (classification) or per point
/// (segmentation).
pub fn predictions_csv(pred: &Predictions) -> String {
    match pred {
        Predictions::Class(p) => {
            let mut s = String::from("sample,prediction\n");
            for (i, c) in p.iter().enumerate() {
                s += &format!("{i},{c}\n");
            }
            s
        }
        Predictions::Parts(p) => {
            let mut s = String::from("sample,point,prediction\n");
            for (i, row) in p.iter().enumerate() {
                for (j, c) in row.iter().enumerate() {
                    s += &format!("{i},{j},{c}\n");
                }
            }
            s
        }
    }
}

pub fn write_eval_outputs(dir: &Path, eval: &Evaluation) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("metrics.json"), serde_json::to_string_pretty(&eval.metrics)?)?;
    fs::write(dir.join("predictions.csv"), predictions_csv(&eval.predictions))?;
    Ok(())
}
