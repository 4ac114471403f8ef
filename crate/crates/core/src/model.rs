//! The full network: edge-convolution lifting, stacked attention blocks,
//! invariant readout and a scalar task head.

use std::fmt;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::attention::{vnt_block, AttentionConfig, BlockParams, FfnParams, HeadParams, MultiHeadParams};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamStore};
use crate::rng::Rng;
use crate::tape::{BatchStats, Tape, Var};
use crate::tensor::Tensor;
use crate::vn::{edge_conv_lift, vn_invariant, EdgeConv, Frame, Nonlin, DEFAULT_LEAK};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;
/// Slope of the scalar leaky ReLU in the classification head.
pub const HEAD_LEAK: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    #[serde(alias = "cls")]
    Classification,
    #[serde(alias = "seg")]
    Segmentation,
}

impl std::str::FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cls" | "classification" => Ok(Task::Classification),
            "seg" | "segmentation" => Ok(Task::Segmentation),
            other => Err(Error::Config(format!("unknown task {other:?} (expected cls or seg)"))),
        }
    }
}

/// How block features become scalars for the head.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Readout {
    /// Inner products with a learned equivariant frame.
    #[default]
    Invariant,
    /// Raw vector coordinates, flattened. Not rotation invariant; kept as an
    /// ablation baseline.
    Flatten,
}

fn default_blocks() -> usize {
    3
}
fn default_knn() -> usize {
    20
}
fn default_dropout() -> f64 {
    0.5
}
fn default_cls_hidden() -> Vec<usize> {
    vec![512, 256]
}
fn default_seg_hidden() -> Vec<usize> {
    vec![512, 256, 128]
}
fn default_embed() -> usize {
    64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub linear_dim: usize,
    pub heads: usize,
    pub head_size: usize,
    #[serde(default = "default_blocks")]
    pub blocks: usize,
    #[serde(default = "default_knn")]
    pub knn_k: usize,
    pub task: Task,
    /// Class count, or part count for segmentation.
    pub num_classes: usize,
    #[serde(default)]
    pub num_categories: usize,
    #[serde(default = "default_dropout")]
    pub dropout: f64,
    #[serde(default = "default_cls_hidden")]
    pub cls_hidden: Vec<usize>,
    #[serde(default = "default_seg_hidden")]
    pub seg_hidden: Vec<usize>,
    #[serde(default = "default_embed")]
    pub category_embed: usize,
    #[serde(default)]
    pub readout: Readout,
}

impl ModelConfig {
    /// Classification setup: linear dimension 16, 24 heads of size 16.
    pub fn classification(num_classes: usize) -> Self {
        Self {
            linear_dim: 16,
            heads: 24,
            head_size: 16,
            blocks: default_blocks(),
            knn_k: default_knn(),
            task: Task::Classification,
            num_classes,
            num_categories: 0,
            dropout: default_dropout(),
            cls_hidden: default_cls_hidden(),
            seg_hidden: default_seg_hidden(),
            category_embed: default_embed(),
            readout: Readout::Invariant,
        }
    }

    /// Part-segmentation setup: linear dimension 128, 14 heads of size 16.
    pub fn segmentation(num_parts: usize, num_categories: usize) -> Self {
        Self {
            linear_dim: 128,
            heads: 14,
            head_size: 16,
            task: Task::Segmentation,
            num_categories,
            ..Self::classification(num_parts)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        for (name, v) in [
            ("linear_dim", self.linear_dim),
            ("heads", self.heads),
            ("head_size", self.head_size),
            ("blocks", self.blocks),
            ("knn_k", self.knn_k),
            ("num_classes", self.num_classes),
        ] {
            if v == 0 {
                problems.push(format!("{name} must be ≥ 1"));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            problems.push(format!("dropout must lie in [0,1), got {}", self.dropout));
        }
        match self.task {
            Task::Classification => {
                if self.cls_hidden.len() != 2 || self.cls_hidden.contains(&0) {
                    problems.push("cls_hidden must list 2 positive widths".into());
                }
            }
            Task::Segmentation => {
                if self.seg_hidden.len() != 3 || self.seg_hidden.contains(&0) {
                    problems.push("seg_hidden must list 3 positive widths".into());
                }
                if self.num_categories == 0 {
                    problems.push("segmentation needs num_categories ≥ 1".into());
                }
                if self.category_embed == 0 {
                    problems.push("category_embed must be ≥ 1".into());
                }
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }

    pub fn attention(&self) -> AttentionConfig {
        AttentionConfig {
            d_model: self.linear_dim,
            heads: self.heads,
            d_k: self.head_size,
        }
    }

    /// Channels after concatenating all block outputs.
    pub fn concat_channels(&self) -> usize {
        self.blocks * self.linear_dim
    }

    fn frame_hidden(&self) -> usize {
        (self.concat_channels() / 2).max(1)
    }

    /// Scalar features per point entering the head.
    pub fn readout_width(&self) -> usize {
        3 * self.concat_channels()
    }
}

/// Shape of every trainable tensor, in canonical order.
pub fn param_shapes(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let c = cfg.linear_dim;
    let mut out: Vec<(String, Vec<usize>)> = vec![("edge.lift".into(), vec![c, 2]), ("edge.dir".into(), vec![c, c])];
    for b in 0..cfg.blocks {
        for h in 0..cfg.heads {
            for w in ["wq", "wk", "wv"] {
                out.push((format!("block{b}.head{h}.{w}"), vec![cfg.head_size, c]));
            }
        }
        out.push((format!("block{b}.wo"), vec![c, cfg.heads * cfg.head_size]));
        out.push((format!("block{b}.ffn.w1"), vec![c, c]));
        out.push((format!("block{b}.ffn.dir"), vec![c, c]));
        out.push((format!("block{b}.ffn.w2"), vec![c, c]));
    }
    if cfg.readout == Readout::Invariant {
        let (cc, h) = (cfg.concat_channels(), cfg.frame_hidden());
        out.push(("frame.lin1".into(), vec![h, cc]));
        out.push(("frame.dir1".into(), vec![h, h]));
        out.push(("frame.lin2".into(), vec![3, h]));
        out.push(("frame.dir2".into(), vec![3, 3]));
    }
    let mut width = cfg.readout_width();
    match cfg.task {
        Task::Classification => {
            let widths = [cfg.cls_hidden[0], cfg.cls_hidden[1], cfg.num_classes];
            for (j, &w) in widths.iter().enumerate() {
                out.push((format!("head.fc{j}.w"), vec![w, width]));
                out.push((format!("head.fc{j}.b"), vec![w]));
                width = w;
            }
        }
        Task::Segmentation => {
            let e = cfg.category_embed;
            out.push(("cat.w".into(), vec![e, cfg.num_categories]));
            out.push(("cat.b".into(), vec![e]));
            width += e;
            let widths = [cfg.seg_hidden[0], cfg.seg_hidden[1], cfg.seg_hidden[2], cfg.num_classes];
            for (j, &w) in widths.iter().enumerate() {
                out.push((format!("head.fc{j}.w"), vec![w, width]));
                out.push((format!("head.fc{j}.b"), vec![w]));
                if j < 3 {
                    out.push((format!("head.bn{j}.gamma"), vec![w]));
                    out.push((format!("head.bn{j}.beta"), vec![w]));
                }
                width = w;
            }
        }
    }
    out
}

/// Non-trainable state (batch-norm running statistics).
pub fn buffer_shapes(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    match cfg.task {
        Task::Classification => vec![],
        Task::Segmentation => (0..3)
            .flat_map(|j| {
                let w = cfg.seg_hidden[j];
                [
                    (format!("head.bn{j}.mean"), vec![w]),
                    (format!("head.bn{j}.var"), vec![w]),
                ]
            })
            .collect(),
    }
}

/// Per-module scalar counts keyed by the name prefix, plus the total.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamCount {
    pub modules: Vec<(String, usize)>,
    pub total: usize,
}

impl fmt::Display for ParamCount {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (m, n) in &self.modules {
            writeln!(f, "{m:<12} {n:>10}")?;
        }
        write!(f, "{:<12} {:>10}", "total", self.total)
    }
}

pub fn count_params(cfg: &ModelConfig) -> Result<ParamCount> {
    cfg.validate()?;
    let mut modules: Vec<(String, usize)> = Vec::new();
    for (name, shape) in param_shapes(cfg) {
        let module = name.split('.').next().unwrap_or("").to_string();
        let n: usize = shape.iter().product();
        match modules.last_mut() {
            Some((m, count)) if *m == module => *count += n,
            _ => modules.push((module, n)),
        }
    }
    let total = modules.iter().map(|(_, n)| n).sum();
    Ok(ParamCount { modules, total })
}

/// Forward-pass mode. Training enables dropout and batch statistics.
pub enum Mode<'a> {
    Eval,
    Train(&'a mut Rng),
}

impl Mode<'_> {
    fn is_train(&self) -> bool {
        matches!(self, Mode::Train(_))
    }
}

pub struct ForwardOutput {
    /// `1×num_classes` for classification, `N×num_parts` for segmentation.
    pub logits: Var,
    /// `attention[block][head]` is an `N×N` weight matrix.
    pub attention: Vec<Vec<Var>>,
    /// Training-mode batch-norm statistics, one per normalized layer.
    pub bn_stats: Vec<BatchStats>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VntModel {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub buffers: ParamStore,
}

/// Uniform(±1/√fan_in) weights; biases use the fan-in of their layer.
/// Batch-norm scales start at 1 and shifts at 0.
pub fn init_model(cfg: &ModelConfig, rng: &mut Rng) -> Result<VntModel> {
    cfg.validate()?;
    let shapes = param_shapes(cfg);
    let mut params = ParamStore::new();
    let mut last_fan_in = 1;
    for (name, shape) in &shapes {
        let t = if name.ends_with(".gamma") {
            Tensor::full(shape.clone(), 1.0)
        } else if name.ends_with(".beta") {
            Tensor::zeros(shape.clone())
        } else {
            let fan_in = if shape.len() == 2 { shape[1] } else { last_fan_in };
            last_fan_in = fan_in;
            let bound = 1.0 / (fan_in as f64).sqrt();
            Tensor::from_op(
                shape.clone(),
                (0..shape.iter().product())
                    .map(|_| rng.random_range(-bound..=bound))
                    .collect(),
            )
        };
        params.insert(name.clone(), t);
    }
    let mut buffers = ParamStore::new();
    for (name, shape) in buffer_shapes(cfg) {
        let fill = if name.ends_with(".var") { 1.0 } else { 0.0 };
        buffers.insert(name, Tensor::full(shape, fill));
    }
    Ok(VntModel {
        config: cfg.clone(),
        params,
        buffers,
    })
}

fn check_points(points: &Tensor) -> Result<()> {
    let s = points.shape();
    if s.len() != 2 || s[1] != 3 {
        return Err(Error::shape("model input", s, &[0, 3]));
    }
    if cfg!(debug_assertions) {
        // Normalized clouds after scale/shift augmentation stay inside this envelope.
        let n = s[0] as f64;
        let mut centroid = [0.0; 3];
        let mut max_norm: f64 = 0.0;
        for p in points.data().chunks_exact(3) {
            for k in 0..3 {
                centroid[k] += p[k] / n;
            }
            max_norm = max_norm.max(p.iter().map(|x| x * x).sum::<f64>().sqrt());
        }
        let c = centroid.iter().map(|x| x * x).sum::<f64>().sqrt();
        if c > 0.25 || max_norm > 1.5 {
            return Err(Error::Contract(format!(
                "input cloud is not normalized (centroid norm {c:.3}, max norm {max_norm:.3})"
            )));
        }
    }
    Ok(())
}

impl VntModel {
    pub fn new(cfg: &ModelConfig, rng: &mut Rng) -> Result<Self> {
        init_model(cfg, rng)
    }

    pub fn num_params(&self) -> usize {
        self.params.num_scalars()
    }

    fn nonlin(b: &Bound, name: &str, alpha: f64) -> Result<Nonlin> {
        Ok(Nonlin {
            dir: b.get(name)?,
            alpha,
        })
    }

    fn block_params(&self, b: &Bound, block: usize) -> Result<BlockParams> {
        let heads = (0..self.config.heads)
            .map(|h| {
                Ok(HeadParams {
                    wq: b.get(&format!("block{block}.head{h}.wq"))?,
                    wk: b.get(&format!("block{block}.head{h}.wk"))?,
                    wv: b.get(&format!("block{block}.head{h}.wv"))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(BlockParams {
            attention: MultiHeadParams {
                heads,
                wo: b.get(&format!("block{block}.wo"))?,
            },
            ffn: FfnParams {
                w1: b.get(&format!("block{block}.ffn.w1"))?,
                nonlin: Self::nonlin(b, &format!("block{block}.ffn.dir"), 0.0)?,
                w2: b.get(&format!("block{block}.ffn.w2"))?,
            },
        })
    }

    /// Lifting, blocks and readout: per-point scalars `N×readout_width`.
    fn trunk(&self, tape: &mut Tape, b: &Bound, points: &Tensor) -> Result<(Var, Vec<Vec<Var>>)> {
        check_points(points)?;
        let cfg = &self.config;
        let edge = EdgeConv {
            lift: b.get("edge.lift")?,
            nonlin: Self::nonlin(b, "edge.dir", DEFAULT_LEAK)?,
            k: cfg.knn_k,
        };
        let mut x = edge_conv_lift(tape, points, &edge)?;
        let att = cfg.attention();
        let mut outputs = Vec::with_capacity(cfg.blocks);
        let mut attention = Vec::with_capacity(cfg.blocks);
        for block in 0..cfg.blocks {
            let p = self.block_params(b, block)?;
            let (y, w) = vnt_block(tape, x, &p, &att)?;
            outputs.push(y);
            attention.push(w);
            x = y;
        }
        let cat = tape.concat(&outputs, 1)?;
        let n = points.shape()[0];
        let features = match cfg.readout {
            Readout::Invariant => {
                let frame = Frame {
                    stages: vec![
                        (b.get("frame.lin1")?, Self::nonlin(b, "frame.dir1", DEFAULT_LEAK)?),
                        (b.get("frame.lin2")?, Self::nonlin(b, "frame.dir2", DEFAULT_LEAK)?),
                    ],
                };
                vn_invariant(tape, cat, &frame)?
            }
            Readout::Flatten => cat,
        };
        let flat = tape.reshape(features, &[n, cfg.readout_width()])?;
        Ok((flat, attention))
    }

    fn dropout(&self, tape: &mut Tape, x: Var, mode: &mut Mode<'_>) -> Result<Var> {
        let p = self.config.dropout;
        match mode {
            Mode::Train(rng) if p > 0.0 => {
                let keep = 1.0 / (1.0 - p);
                let mask = (0..tape.value(x).numel())
                    .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
                    .collect();
                tape.mask(x, mask)
            }
            _ => Ok(x),
        }
    }

    /// Class logits `1×num_classes` for one cloud.
    pub fn forward_classify(
        &self,
        tape: &mut Tape,
        b: &Bound,
        points: &Tensor,
        mut mode: Mode<'_>,
    ) -> Result<ForwardOutput> {
        if self.config.task != Task::Classification {
            return Err(Error::Config("model is not configured for classification".into()));
        }
        let (flat, attention) = self.trunk(tape, b, points)?;
        let pooled = tape.mean_axis(flat, 0)?;
        let mut h = tape.reshape(pooled, &[1, self.config.readout_width()])?;
        for j in 0..3 {
            h = tape.linear(
                h,
                b.get(&format!("head.fc{j}.w"))?,
                Some(b.get(&format!("head.fc{j}.b"))?),
            )?;
            if j < 2 {
                h = tape.leaky_relu(h, HEAD_LEAK)?;
                h = self.dropout(tape, h, &mut mode)?;
            }
        }
        Ok(ForwardOutput {
            logits: h,
            attention,
            bn_stats: vec![],
        })
    }

    /// Per-point part logits `N×num_parts`; `category` must be one-hot.
    pub fn forward_segment(
        &self,
        tape: &mut Tape,
        b: &Bound,
        points: &Tensor,
        category: &Tensor,
        mode: Mode<'_>,
    ) -> Result<ForwardOutput> {
        let cfg = &self.config;
        if cfg.task != Task::Segmentation {
            return Err(Error::Config("model is not configured for segmentation".into()));
        }
        let ones = category.data().iter().filter(|&&x| x == 1.0).count();
        let zeros = category.data().iter().filter(|&&x| x == 0.0).count();
        if category.numel() != cfg.num_categories || ones != 1 || ones + zeros != category.numel() {
            return Err(Error::Contract(format!(
                "category must be a one-hot vector of length {}",
                cfg.num_categories
            )));
        }
        let (flat, attention) = self.trunk(tape, b, points)?;
        let n = points.shape()[0];
        let cat = tape.constant(category.clone().reshape(vec![1, cfg.num_categories])?);
        let embed = tape.linear(cat, b.get("cat.w")?, Some(b.get("cat.b")?))?;
        let ones = tape.constant(Tensor::full(vec![n, 1], 1.0));
        let embed = tape.matmul(ones, embed)?;
        let mut h = tape.concat(&[flat, embed], 1)?;
        let training = mode.is_train();
        let mut bn_stats = Vec::new();
        for j in 0..4 {
            h = tape.linear(
                h,
                b.get(&format!("head.fc{j}.w"))?,
                Some(b.get(&format!("head.fc{j}.b"))?),
            )?;
            if j < 3 {
                let gamma = b.get(&format!("head.bn{j}.gamma"))?;
                let beta = b.get(&format!("head.bn{j}.beta"))?;
                let running = if training {
                    None
                } else {
                    Some((
                        self.buffers.require(&format!("head.bn{j}.mean"))?.data(),
                        self.buffers.require(&format!("head.bn{j}.var"))?.data(),
                    ))
                };
                let (y, stats) = tape.batch_norm(h, gamma, beta, running, BN_EPS)?;
                bn_stats.extend(stats);
                h = tape.relu(y)?;
            }
        }
        Ok(ForwardOutput {
            logits: h,
            attention,
            bn_stats,
        })
    }

    /// Dispatches on the configured task.
    pub fn forward(
        &self,
        tape: &mut Tape,
        b: &Bound,
        points: &Tensor,
        category: Option<&Tensor>,
        mode: Mode<'_>,
    ) -> Result<ForwardOutput> {
        match self.config.task {
            Task::Classification => self.forward_classify(tape, b, points, mode),
            Task::Segmentation => {
                let category = category.ok_or_else(|| Error::Contract("segmentation needs a category".into()))?;
                self.forward_segment(tape, b, points, category, mode)
            }
        }
    }

    /// Evaluation-mode logits without gradient bookkeeping.
    pub fn predict(&self, points: &Tensor, category: Option<&Tensor>) -> Result<Tensor> {
        let mut tape = Tape::new();
        let b = self.params.bind(&mut tape, false);
        let out = self.forward(&mut tape, &b, points, category, Mode::Eval)?;
        Ok(tape.value(out.logits).clone())
    }

    /// Attention weights of one block/head in evaluation mode.
    pub fn attention_weights(
        &self,
        points: &Tensor,
        category: Option<&Tensor>,
        block: usize,
        head: usize,
    ) -> Result<Tensor> {
        if block >= self.config.blocks || head >= self.config.heads {
            return Err(Error::Config(format!(
                "block {block}/head {head} out of range ({} blocks, {} heads)",
                self.config.blocks, self.config.heads
            )));
        }
        let mut tape = Tape::new();
        let b = self.params.bind(&mut tape, false);
        let out = self.forward(&mut tape, &b, points, category, Mode::Eval)?;
        Ok(tape.value(out.attention[block][head]).clone())
    }

    /// Folds averaged batch statistics into the running estimates.
    pub fn update_running_stats(&mut self, per_sample: &[Vec<BatchStats>]) -> Result<()> {
        if per_sample.is_empty() || self.buffers.is_empty() {
            return Ok(());
        }
        for j in 0..per_sample[0].len() {
            for (suffix, pick) in [("mean", 0), ("var", 1)] {
                let name = format!("head.bn{j}.{suffix}");
                let current = self.buffers.require(&name)?.data().to_vec();
                let mut avg = vec![0.0; current.len()];
                for stats in per_sample {
                    let s = if pick == 0 { &stats[j].mean } else { &stats[j].var };
                    for (a, v) in avg.iter_mut().zip(s) {
                        *a += v / per_sample.len() as f64;
                    }
                }
                let updated = current
                    .iter()
                    .zip(&avg)
                    .map(|(r, a)| BN_MOMENTUM * r + (1.0 - BN_MOMENTUM) * a)
                    .collect();
                self.buffers.set_data(&name, updated)?;
            }
        }
        Ok(())
    }
}

/// One-hot encoding of `index` among `n` categories.
pub fn one_hot(index: usize, n: usize) -> Result<Tensor> {
    if index >= n {
        return Err(Error::Contract(format!("category {index} out of range for {n}")));
    }
    let mut data = vec![0.0; n];
    data[index] = 1.0;
    Tensor::new(vec![n], data)
}
