//! Self-check suite: equivariance of every vector-neuron op, invariance of
//! attention weights and the full model, algebraic identities of the score
//! computation, and finite-difference gradient checks.

use std::fmt;

use rand::Rng as _;

use crate::attention::{
    flatten_scores, multi_head_vn_attention, vn_attention, vn_ffn, vnt_block, AttentionConfig, BlockParams, FfnParams,
    HeadParams, MultiHeadParams,
};
use crate::error::Result;
use crate::gradcheck::grad_check;
use crate::model::{init_model, Mode, ModelConfig, VntModel};
use crate::params::{Bound, ParamStore};
use crate::rng::{derive, Rng};
use crate::rotation::{sample_rotation, Protocol, Rotation};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::vn::{edge_conv_lift, vn_invariant, vn_leaky_relu, vn_linear, vn_mean_pool, EdgeConv, Frame, Nonlin};

/// Tolerance the base tolerances below are expressed against.
pub const DEFAULT_TOL: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub trials: usize,
    pub max_error: f64,
    pub tol: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_error <= self.tol
    }
}

/// A quantity reported for information only, with no tolerance.
#[derive(Clone, Debug, PartialEq)]
pub struct Measurement {
    pub name: &'static str,
    pub trials: usize,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VerifyReport {
    pub checks: Vec<CheckResult>,
    pub measurements: Vec<Measurement>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(CheckResult::passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &CheckResult> {
        self.checks.iter().filter(|c| !c.passed())
    }

    pub fn get(&self, name: &str) -> Option<&CheckResult> {
        self.checks.iter().find(|c| c.name == name)
    }
}

impl fmt::Display for VerifyReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:<34} {:>6} {:>12} {:>12}  status",
            "check", "trials", "max error", "tolerance"
        )?;
        for c in &self.checks {
            writeln!(
                f,
                "{:<34} {:>6} {:>12.3e} {:>12.3e}  {}",
                c.name,
                c.trials,
                c.max_error,
                c.tol,
                if c.passed() { "ok" } else { "FAIL" }
            )?;
        }
        for m in &self.measurements {
            writeln!(
                f,
                "{:<34} {:>6} {:>12.3e}  (measured, not checked)",
                m.name, m.trials, m.value
            )?;
        }
        let ok = self.checks.iter().filter(|c| c.passed()).count();
        write!(f, "{ok}/{} checks passed", self.checks.len())
    }
}

#[derive(Clone, Copy, Debug)]
pub struct VerifyOptions {
    pub trials: usize,
    /// Scales every check's tolerance by `tol / DEFAULT_TOL`.
    pub tol: f64,
    pub seed: u64,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self {
            trials: 100,
            tol: DEFAULT_TOL,
            seed: 0,
        }
    }
}

fn rotation(rng: &mut Rng) -> Rotation {
    sample_rotation(Protocol::So3, rng)
}

fn randn(shape: &[usize], rng: &mut Rng) -> Tensor {
    Tensor::randn(shape.to_vec(), rng)
}

/// Evaluates `f` on a fresh tape with `params` bound as constants.
fn eval<F>(params: &ParamStore, input: &Tensor, f: &F) -> Result<Tensor>
where
    F: Fn(&mut Tape, &Bound, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let b = params.bind(&mut tape, false);
    let x = tape.constant(input.clone());
    let out = f(&mut tape, &b, x)?;
    Ok(tape.value(out).clone())
}

/// `‖f(x·R) − f(x)·R‖∞`.
fn equivariance_error<F>(params: &ParamStore, x: &Tensor, r: &Rotation, f: &F) -> Result<f64>
where
    F: Fn(&mut Tape, &Bound, Var) -> Result<Var>,
{
    let rotated_out = eval(params, &r.rotate(x)?, f)?;
    let out_rotated = r.rotate(&eval(params, x, f)?)?;
    Ok(rotated_out.max_abs_diff(&out_rotated))
}

fn nonlin(b: &Bound, name: &str, alpha: f64) -> Result<Nonlin> {
    Ok(Nonlin {
        dir: b.get(name)?,
        alpha,
    })
}

fn attention_params(cfg: &AttentionConfig, rng: &mut Rng) -> ParamStore {
    let mut p = ParamStore::new();
    for h in 0..cfg.heads {
        for w in ["wq", "wk", "wv"] {
            p.insert(format!("h{h}.{w}"), randn(&[cfg.d_k, cfg.d_model], rng));
        }
    }
    p.insert("wo", randn(&[cfg.d_model, cfg.heads * cfg.d_k], rng));
    p.insert("w1", randn(&[cfg.d_model, cfg.d_model], rng));
    p.insert("dir", randn(&[cfg.d_model, cfg.d_model], rng));
    p.insert("w2", randn(&[cfg.d_model, cfg.d_model], rng));
    p
}

fn block_params(b: &Bound, cfg: &AttentionConfig) -> Result<BlockParams> {
    let heads = (0..cfg.heads)
        .map(|h| {
            Ok(HeadParams {
                wq: b.get(&format!("h{h}.wq"))?,
                wk: b.get(&format!("h{h}.wk"))?,
                wv: b.get(&format!("h{h}.wv"))?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(BlockParams {
        attention: MultiHeadParams {
            heads,
            wo: b.get("wo")?,
        },
        ffn: FfnParams {
            w1: b.get("w1")?,
            nonlin: nonlin(b, "dir", 0.0)?,
            w2: b.get("w2")?,
        },
    })
}

fn random_attention_config(rng: &mut Rng) -> AttentionConfig {
    AttentionConfig {
        d_model: rng.random_range(1..=5),
        heads: rng.random_range(1..=3),
        d_k: rng.random_range(1..=4),
    }
}

struct Suite {
    opts: VerifyOptions,
    checks: Vec<CheckResult>,
    measurements: Vec<Measurement>,
}

impl Suite {
    fn scaled(&self, base: f64) -> f64 {
        base * self.opts.tol / DEFAULT_TOL
    }

    fn rng(&self) -> Rng {
        derive(self.opts.seed, &[self.checks.len() as u64])
    }

    fn record(&mut self, name: &'static str, trials: usize, max_error: f64, tol: f64) {
        self.checks.push(CheckResult {
            name,
            trials,
            max_error,
            tol,
        });
    }

    /// Runs `trial` `trials` times and keeps the worst error.
    fn trials<F>(&mut self, name: &'static str, base_tol: f64, mut trial: F) -> Result<()>
    where
        F: FnMut(&mut Rng) -> Result<f64>,
    {
        let mut rng = self.rng();
        let mut worst: f64 = 0.0;
        for _ in 0..self.opts.trials {
            worst = worst.max(trial(&mut rng)?);
        }
        let tol = self.scaled(base_tol);
        self.record(name, self.opts.trials, worst, tol);
        Ok(())
    }
}

pub fn run_verify(opts: &VerifyOptions) -> Result<VerifyReport> {
    let mut s = Suite {
        opts: *opts,
        checks: Vec::new(),
        measurements: Vec::new(),
    };
    equivariance_checks(&mut s)?;
    invariance_checks(&mut s)?;
    identity_checks(&mut s)?;
    model_invariance(&mut s)?;
    gradient_checks(&mut s)?;
    scale_sensitivity(&mut s)?;
    Ok(VerifyReport {
        checks: s.checks,
        measurements: s.measurements,
    })
}

pub fn equivariance_checks_only(opts: &VerifyOptions) -> Result<VerifyReport> {
    let mut s = Suite {
        opts: *opts,
        checks: Vec::new(),
        measurements: Vec::new(),
    };
    equivariance_checks(&mut s)?;
    Ok(VerifyReport {
        checks: s.checks,
        measurements: s.measurements,
    })
}

fn equivariance_checks(s: &mut Suite) -> Result<()> {
    s.trials("equivariance/vn_linear", 1e-10, |rng| {
        let (n, c, o) = (
            rng.random_range(1..=10),
            rng.random_range(1..=6),
            rng.random_range(1..=6),
        );
        let mut p = ParamStore::new();
        p.insert("w", randn(&[o, c], rng));
        let x = randn(&[n, c, 3], rng);
        equivariance_error(&p, &x, &rotation(rng), &|t, b, x| vn_linear(t, x, b.get("w")?))
    })?;
    s.trials("equivariance/vn_leaky_relu", 1e-10, |rng| {
        let (n, c) = (rng.random_range(1..=10), rng.random_range(1..=6));
        let alpha = rng.random_range(0.0..0.5);
        let mut p = ParamStore::new();
        p.insert("u", randn(&[c, c], rng));
        let x = randn(&[n, c, 3], rng);
        equivariance_error(&p, &x, &rotation(rng), &|t, b, x| {
            vn_leaky_relu(t, x, nonlin(b, "u", alpha)?)
        })
    })?;
    s.trials("equivariance/edge_conv_lift", 1e-10, |rng| {
        let k = rng.random_range(1..=4);
        let (n, c) = (rng.random_range(k + 1..=12), rng.random_range(1..=5));
        let mut p = ParamStore::new();
        p.insert("lift", randn(&[c, 2], rng));
        p.insert("dir", randn(&[c, c], rng));
        let pts = randn(&[n, 3], rng);
        let r = rotation(rng);
        let lift = |pts: &Tensor| {
            let mut tape = Tape::new();
            let b = p.bind(&mut tape, false);
            let e = EdgeConv {
                lift: b.get("lift")?,
                nonlin: nonlin(&b, "dir", 0.2)?,
                k,
            };
            let out = edge_conv_lift(&mut tape, pts, &e)?;
            Ok::<_, crate::Error>(tape.value(out).clone())
        };
        Ok(lift(&r.rotate(&pts)?)?.max_abs_diff(&r.rotate(&lift(&pts)?)?))
    })?;
    s.trials("equivariance/vn_mean_pool", 1e-10, |rng| {
        let (n, c) = (rng.random_range(1..=10), rng.random_range(1..=6));
        let x = randn(&[n, c, 3], rng);
        equivariance_error(&ParamStore::new(), &x, &rotation(rng), &|t, _, x| vn_mean_pool(t, x))
    })?;
    s.trials("equivariance/vn_attention", 1e-10, |rng| {
        let (n, c, cv) = (
            rng.random_range(1..=10),
            rng.random_range(1..=6),
            rng.random_range(1..=6),
        );
        let mut p = ParamStore::new();
        p.insert("k", randn(&[n, c, 3], rng));
        p.insert("v", randn(&[n, cv, 3], rng));
        let q = randn(&[n, c, 3], rng);
        let r = rotation(rng);
        // Rotate all three inputs together.
        let mut pr = ParamStore::new();
        pr.insert("k", r.rotate(p.require("k")?)?);
        pr.insert("v", r.rotate(p.require("v")?)?);
        let f = |t: &mut Tape, b: &Bound, q: Var| Ok(vn_attention(t, q, b.get("k")?, b.get("v")?)?.0);
        let rotated_out = eval(&pr, &r.rotate(&q)?, &f)?;
        Ok(rotated_out.max_abs_diff(&r.rotate(&eval(&p, &q, &f)?)?))
    })?;
    s.trials("equivariance/multi_head", 1e-10, |rng| {
        let cfg = random_attention_config(rng);
        let p = attention_params(&cfg, rng);
        let x = randn(&[rng.random_range(1..=10), cfg.d_model, 3], rng);
        equivariance_error(&p, &x, &rotation(rng), &|t, b, x| {
            Ok(multi_head_vn_attention(t, x, &block_params(b, &cfg)?.attention, &cfg)?.0)
        })
    })?;
    s.trials("equivariance/vn_ffn", 1e-10, |rng| {
        let cfg = random_attention_config(rng);
        let p = attention_params(&cfg, rng);
        let x = randn(&[rng.random_range(1..=10), cfg.d_model, 3], rng);
        equivariance_error(&p, &x, &rotation(rng), &|t, b, x| {
            vn_ffn(t, x, &block_params(b, &cfg)?.ffn)
        })
    })?;
    s.trials("equivariance/vnt_block", 1e-10, |rng| {
        let cfg = random_attention_config(rng);
        let p = attention_params(&cfg, rng);
        let x = randn(&[rng.random_range(1..=10), cfg.d_model, 3], rng);
        equivariance_error(&p, &x, &rotation(rng), &|t, b, x| {
            Ok(vnt_block(t, x, &block_params(b, &cfg)?, &cfg)?.0)
        })
    })?;
    Ok(())
}

fn invariance_checks(s: &mut Suite) -> Result<()> {
    s.trials("invariance/attention_weights", 1e-12, |rng| {
        let cfg = random_attention_config(rng);
        let p = attention_params(&cfg, rng);
        let x = randn(&[rng.random_range(1..=10), cfg.d_model, 3], rng);
        let r = rotation(rng);
        let weights = |x: &Tensor| {
            let mut tape = Tape::new();
            let b = p.bind(&mut tape, false);
            let xv = tape.constant(x.clone());
            let (_, w) = multi_head_vn_attention(&mut tape, xv, &block_params(&b, &cfg)?.attention, &cfg)?;
            Ok::<_, crate::Error>(w.iter().map(|&w| tape.value(w).clone()).collect::<Vec<_>>())
        };
        let (a, b) = (weights(&x)?, weights(&r.rotate(&x)?)?);
        Ok(a.iter().zip(&b).map(|(a, b)| a.max_abs_diff(b)).fold(0.0, f64::max))
    })?;
    s.trials("invariance/vn_invariant", 1e-10, |rng| {
        let (n, c) = (rng.random_range(1..=10), rng.random_range(1..=6));
        let h = rng.random_range(1..=4);
        let mut p = ParamStore::new();
        p.insert("l1", randn(&[h, c], rng));
        p.insert("d1", randn(&[h, h], rng));
        p.insert("l2", randn(&[3, h], rng));
        p.insert("d2", randn(&[3, 3], rng));
        let x = randn(&[n, c, 3], rng);
        let f = |t: &mut Tape, b: &Bound, x: Var| {
            let frame = Frame {
                stages: vec![
                    (b.get("l1")?, nonlin(b, "d1", 0.2)?),
                    (b.get("l2")?, nonlin(b, "d2", 0.2)?),
                ],
            };
            vn_invariant(t, x, &frame)
        };
        Ok(eval(&p, &rotation(rng).rotate(&x)?, &f)?.max_abs_diff(&eval(&p, &x, &f)?))
    })?;
    Ok(())
}

/// Scalar attention on `N×C` matrices.
fn scalar_attention(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let (qv, kv, vv) = (
        tape.constant(q.clone()),
        tape.constant(k.clone()),
        tape.constant(v.clone()),
    );
    let kt = tape.transpose(kv)?;
    let s = tape.matmul(qv, kt)?;
    let w = tape.softmax_rows(s, (q.shape()[1] as f64).sqrt())?;
    let out = tape.matmul(w, vv)?;
    Ok(tape.value(out).clone())
}

fn identity_checks(s: &mut Suite) -> Result<()> {
    // D = 1 must reproduce scalar attention exactly, whatever the tolerance.
    let mut rng = s.rng();
    let mut worst: f64 = 0.0;
    for _ in 0..s.opts.trials {
        let (n, c, cv) = (
            rng.random_range(1..=10),
            rng.random_range(1..=6),
            rng.random_range(1..=6),
        );
        let (q, k, v) = (
            randn(&[n, c], &mut rng),
            randn(&[n, c], &mut rng),
            randn(&[n, cv], &mut rng),
        );
        let scalar = scalar_attention(&q, &k, &v)?;
        let mut tape = Tape::new();
        let q1 = tape.constant(q.clone().reshape(vec![n, c, 1])?);
        let k1 = tape.constant(k.clone().reshape(vec![n, c, 1])?);
        let v1 = tape.constant(v.clone().reshape(vec![n, cv, 1])?);
        let (out, _) = vn_attention(&mut tape, q1, k1, v1)?;
        let vn = tape.value(out).data();
        let differs = vn.iter().zip(scalar.data()).any(|(a, b)| a.to_bits() != b.to_bits());
        if differs {
            worst = worst.max(
                scalar
                    .data()
                    .iter()
                    .zip(vn)
                    .map(|(a, b)| (a - b).abs())
                    .fold(f64::MIN_POSITIVE, f64::max),
            );
        }
    }
    s.record("reduction/d1_bitwise", s.opts.trials, worst, 0.0);

    let mut rng = s.rng();
    let mut worst: f64 = 0.0;
    let mut count = 0;
    for n in 2..=16 {
        for c in 1..=8 {
            let (q, k) = (randn(&[n, c, 3], &mut rng), randn(&[n, c, 3], &mut rng));
            let mut tape = Tape::new();
            let (qv, kv) = (tape.constant(q.clone()), tape.constant(k.clone()));
            let sv = flatten_scores(&mut tape, qv, kv)?;
            let scores = tape.value(sv);
            for i in 0..n {
                for j in 0..n {
                    let mut naive = 0.0;
                    for ch in 0..c {
                        let mut dot = 0.0;
                        for d in 0..3 {
                            dot += q.get(&[i, ch, d]) * k.get(&[j, ch, d]);
                        }
                        naive += dot;
                    }
                    worst = worst.max((scores.get(&[i, j]) - naive).abs());
                }
            }
            count += 1;
        }
    }
    let tol = s.scaled(1e-12);
    s.record("identity/flattened_scores", count, worst, tol);

    s.trials("identity/cosine_decomposition", 1e-12, |rng| {
        let (n, c) = (rng.random_range(2..=10), rng.random_range(1..=6));
        let (q, k) = (randn(&[n, c, 3], rng), randn(&[n, c, 3], rng));
        let mut tape = Tape::new();
        let (qv, kv) = (tape.constant(q.clone()), tape.constant(k.clone()));
        let sv = flatten_scores(&mut tape, qv, kv)?;
        let scores = tape.value(sv);
        let mut worst: f64 = 0.0;
        for i in 0..n {
            for j in 0..n {
                let mut total = 0.0;
                for ch in 0..c {
                    let a: [f64; 3] = std::array::from_fn(|d| q.get(&[i, ch, d]));
                    let b: [f64; 3] = std::array::from_fn(|d| k.get(&[j, ch, d]));
                    let dot = a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
                    let cross = [
                        a[1] * b[2] - a[2] * b[1],
                        a[2] * b[0] - a[0] * b[2],
                        a[0] * b[1] - a[1] * b[0],
                    ];
                    let theta = (cross[0] * cross[0] + cross[1] * cross[1] + cross[2] * cross[2])
                        .sqrt()
                        .atan2(dot);
                    let norm = |v: [f64; 3]| (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
                    total += norm(a) * norm(b) * theta.cos();
                }
                worst = worst.max((scores.get(&[i, j]) - total).abs());
            }
        }
        Ok(worst)
    })?;
    Ok(())
}

/// Tiny classification model used by the full-model checks.
pub fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        linear_dim: 4,
        heads: 2,
        head_size: 4,
        blocks: 3,
        knn_k: 8,
        cls_hidden: vec![16, 8],
        dropout: 0.0,
        ..ModelConfig::classification(3)
    }
}

fn unit_cloud(n: usize, rng: &mut Rng) -> Result<Tensor> {
    crate::data::normalize(&randn(&[n, 3], rng))
}

/// Tiny model, 16-point cloud and label for the full-model gradient check.
///
/// Weights are drawn from twice the initialization range so that attention
/// scores are not all near zero, and the label is the least likely class so
/// the loss is far from saturation. Both keep every gradient entry well
/// above the roundoff floor of a central difference with step 1e-5.
pub fn gradient_probe(rng: &mut Rng) -> Result<(VntModel, Tensor, usize)> {
    let mut model = init_model(&tiny_model_config(), rng)?;
    let names: Vec<String> = model.params.names().map(str::to_string).collect();
    for name in names {
        let doubled = model.params.require(&name)?.data().iter().map(|x| 2.0 * x).collect();
        model.params.set_data(&name, doubled)?;
    }
    let points = unit_cloud(16, rng)?;
    let logits = model.predict(&points, None)?;
    let label = (0..logits.numel())
        .min_by(|&a, &b| logits.data()[a].total_cmp(&logits.data()[b]))
        .unwrap_or(0);
    Ok((model, points, label))
}

fn model_invariance(s: &mut Suite) -> Result<()> {
    let mut init_rng = s.rng();
    let model = init_model(&tiny_model_config(), &mut init_rng)?;
    s.trials("invariance/full_model_relative", 1e-6, |rng| {
        let x = unit_cloud(16, rng)?;
        let a = model.predict(&x, None)?;
        let b = model.predict(&rotation(rng).rotate(&x)?, None)?;
        Ok(a.max_abs_diff(&b) / a.max_abs().max(1e-300))
    })
}

/// Uniform input scaling multiplies the scores by s², so softmax weights
/// move; report by how much for s = 0.8 and 1.25.
fn scale_sensitivity(s: &mut Suite) -> Result<()> {
    let mut rng = derive(s.opts.seed, &[0x5ca1e]);
    let model = init_model(&tiny_model_config(), &mut rng)?;
    for (name, scale) in [
        ("measured/attention_scale_0.8", 0.8),
        ("measured/attention_scale_1.25", 1.25),
    ] {
        let mut worst: f64 = 0.0;
        for _ in 0..s.opts.trials {
            let x = unit_cloud(16, &mut rng)?;
            let a = model.attention_weights(&x, None, 0, 0)?;
            let b = model.attention_weights(&x.map(|v| v * scale), None, 0, 0)?;
            worst = worst.max(a.max_abs_diff(&b));
        }
        s.measurements.push(Measurement {
            name,
            trials: s.opts.trials,
            value: worst,
        });
    }
    Ok(())
}

fn gradient_checks(s: &mut Suite) -> Result<()> {
    let mut rng = s.rng();
    let (n, c) = (4, 3);
    let mut p = ParamStore::new();
    p.insert("x", randn(&[n, c, 3], &mut rng));
    for w in ["wq", "wk", "wv"] {
        p.insert(w, randn(&[c, c], &mut rng));
    }
    let weights = randn(&[n, c, 3], &mut rng);
    let report = grad_check(
        |t, b| {
            let x = b.get("x")?;
            let q = vn_linear(t, x, b.get("wq")?)?;
            let k = vn_linear(t, x, b.get("wk")?)?;
            let v = vn_linear(t, x, b.get("wv")?)?;
            let (out, _) = vn_attention(t, q, k, v)?;
            t.weighted_sum(out, &weights)
        },
        &p,
        1e-5,
        1e-4,
    )?;
    let tol = s.scaled(1e-4);
    s.record("gradient/vn_attention", 1, report.max_rel_err(), tol);

    let mut rng = s.rng();
    let (model, points, label) = gradient_probe(&mut rng)?;
    let report = grad_check(
        |t, b| {
            let out = model.forward_classify(t, b, &points, Mode::Eval)?;
            t.cross_entropy(out.logits, &[label])
        },
        &model.params,
        1e-5,
        1e-4,
    )?;
    let tol = s.scaled(1e-4);
    s.record("gradient/tiny_model", 1, report.max_rel_err(), tol);
    Ok(())
}
