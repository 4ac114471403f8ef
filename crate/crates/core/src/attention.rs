//! Equivariant scaled dot-product attention over vector neurons.
//!
//! Scores sum the per-channel vector dot products, `S = Σ_c Q_c K_cᵀ`,
//! which is invariant under a shared rotation of `Q` and `K`. The weights
//! then mix the value vectors linearly, so the output rotates with `V`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::vn::{vn_leaky_relu, vn_linear, Nonlin};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionConfig {
    pub d_model: usize,
    pub heads: usize,
    /// Per-head channel width (values use the same width).
    pub d_k: usize,
}

impl AttentionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.heads == 0 || self.d_k == 0 {
            return Err(Error::Config(format!("attention dims must be positive: {self:?}")));
        }
        Ok(())
    }
}

/// Channel projections of one head, each `d_k×d_model`.
#[derive(Clone, Copy, Debug)]
pub struct HeadParams {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
}

#[derive(Clone, Debug)]
pub struct MultiHeadParams {
    pub heads: Vec<HeadParams>,
    /// `d_model×(heads·d_k)` output projection.
    pub wo: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct FfnParams {
    /// `d_ff×d_model`.
    pub w1: Var,
    pub nonlin: Nonlin,
    /// `d_model×d_ff`.
    pub w2: Var,
}

#[derive(Clone, Debug)]
pub struct BlockParams {
    pub attention: MultiHeadParams,
    pub ffn: FfnParams,
}

/// Scores `Q_flat · K_flatᵀ` with `N×C×D` inputs flattened to `N×(C·D)`.
/// Equal to the per-channel sum `Σ_c Q_c K_cᵀ` in one matrix product.
pub fn flatten_scores(tape: &mut Tape, q: Var, k: Var) -> Result<Var> {
    let (qs, ks) = (tape.shape(q).to_vec(), tape.shape(k).to_vec());
    if qs.len() != 3 || qs != ks {
        return Err(Error::shape("flatten_scores", &qs, &ks));
    }
    let width = qs[1] * qs[2];
    let qf = tape.reshape(q, &[qs[0], width])?;
    let kf = tape.reshape(k, &[ks[0], width])?;
    let kt = tape.transpose(kf)?;
    tape.matmul(qf, kt)
}

/// Returns `(softmax(S/√d_k)·V, W)` where `d_k` is the channel count of `q`.
pub fn vn_attention(tape: &mut Tape, q: Var, k: Var, v: Var) -> Result<(Var, Var)> {
    let (qs, vs) = (tape.shape(q).to_vec(), tape.shape(v).to_vec());
    if vs.len() != 3 || vs[0] != qs[0] || vs[2] != qs[2] {
        return Err(Error::shape("vn_attention", &qs, &vs));
    }
    let scores = flatten_scores(tape, q, k)?;
    let weights = tape.softmax_rows(scores, (qs[1] as f64).sqrt())?;
    let vf = tape.reshape(v, &[vs[0], vs[1] * vs[2]])?;
    let mixed = tape.matmul(weights, vf)?;
    let out = tape.reshape(mixed, &vs)?;
    Ok((out, weights))
}

/// Self-attention with `h` heads, output projection and the residual
/// `+ x`. Also returns each head's attention weights in head order.
pub fn multi_head_vn_attention(
    tape: &mut Tape,
    x: Var,
    p: &MultiHeadParams,
    cfg: &AttentionConfig,
) -> Result<(Var, Vec<Var>)> {
    cfg.validate()?;
    let xs = tape.shape(x).to_vec();
    if xs.len() != 3 || xs[1] != cfg.d_model {
        return Err(Error::Config(format!(
            "block input {xs:?} does not carry d_model = {} channels",
            cfg.d_model
        )));
    }
    if p.heads.len() != cfg.heads {
        return Err(Error::Config(format!(
            "expected {} heads, got {}",
            cfg.heads,
            p.heads.len()
        )));
    }
    let proj = [cfg.d_k, cfg.d_model];
    for head in &p.heads {
        for w in [head.wq, head.wk, head.wv] {
            if tape.shape(w) != proj {
                return Err(Error::Config(format!(
                    "head projection has shape {:?}, expected {proj:?}",
                    tape.shape(w)
                )));
            }
        }
    }
    if tape.shape(p.wo) != [cfg.d_model, cfg.heads * cfg.d_k] {
        return Err(Error::Config(format!(
            "output projection has shape {:?}, expected [{}, {}]",
            tape.shape(p.wo),
            cfg.d_model,
            cfg.heads * cfg.d_k
        )));
    }

    let mut outs = Vec::with_capacity(cfg.heads);
    let mut weights = Vec::with_capacity(cfg.heads);
    for head in &p.heads {
        let q = vn_linear(tape, x, head.wq)?;
        let k = vn_linear(tape, x, head.wk)?;
        let v = vn_linear(tape, x, head.wv)?;
        let (o, w) = vn_attention(tape, q, k, v)?;
        outs.push(o);
        weights.push(w);
    }
    let cat = tape.concat(&outs, 1)?;
    let projected = vn_linear(tape, cat, p.wo)?;
    Ok((tape.add(projected, x)?, weights))
}

/// `W₂ · VN-ReLU(W₁ · x)`; the residual is added by the caller.
pub fn vn_ffn(tape: &mut Tape, x: Var, p: &FfnParams) -> Result<Var> {
    let h = vn_linear(tape, x, p.w1)?;
    let h = vn_leaky_relu(tape, h, p.nonlin)?;
    vn_linear(tape, h, p.w2)
}

/// Attention (with its residual) followed by the feed-forward residual.
pub fn vnt_block(tape: &mut Tape, x: Var, p: &BlockParams, cfg: &AttentionConfig) -> Result<(Var, Vec<Var>)> {
    let (y, weights) = multi_head_vn_attention(tape, x, &p.attention, cfg)?;
    let f = vn_ffn(tape, y, &p.ffn)?;
    Ok((tape.add(y, f)?, weights))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use crate::tensor::Tensor;

    #[test]
    fn single_token_attention_returns_value() {
        let mut rng = seeded(41);
        let mut tape = Tape::new();
        let q = tape.constant(Tensor::randn(vec![1, 2, 3], &mut rng));
        let k = tape.constant(Tensor::randn(vec![1, 2, 3], &mut rng));
        let v = tape.constant(Tensor::randn(vec![1, 4, 3], &mut rng));
        let (o, w) = vn_attention(&mut tape, q, k, v).unwrap();
        assert_eq!(tape.value(w).data(), &[1.0]);
        assert_eq!(tape.value(o), tape.value(v));
    }

    #[test]
    fn single_channel_scores_are_the_gram_matrix() {
        let mut rng = seeded(42);
        let x = Tensor::randn(vec![4, 1, 3], &mut rng);
        let mut tape = Tape::new();
        let q = tape.constant(x.clone());
        let s = flatten_scores(&mut tape, q, q).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let g: f64 = (0..3).map(|c| x.get(&[i, 0, c]) * x.get(&[j, 0, c])).sum();
                assert!((tape.value(s).get(&[i, j]) - g).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn attention_rejects_mismatched_points() {
        let mut tape = Tape::new();
        let q = tape.constant(Tensor::zeros(vec![3, 2, 3]));
        let v = tape.constant(Tensor::zeros(vec![4, 2, 3]));
        assert!(vn_attention(&mut tape, q, q, v).is_err());
        let k = tape.constant(Tensor::zeros(vec![4, 2, 3]));
        assert!(vn_attention(&mut tape, q, k, q).is_err());
    }

    #[test]
    fn identity_projections_double_a_single_point() {
        let mut rng = seeded(43);
        let x = Tensor::randn(vec![1, 2, 3], &mut rng);
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let eye = tape.constant(Tensor::eye(2));
        let p = MultiHeadParams {
            heads: vec![HeadParams {
                wq: eye,
                wk: eye,
                wv: eye,
            }],
            wo: eye,
        };
        let cfg = AttentionConfig {
            d_model: 2,
            heads: 1,
            d_k: 2,
        };
        let (out, _) = multi_head_vn_attention(&mut tape, xv, &p, &cfg).unwrap();
        assert_eq!(tape.value(out), &x.map(|v| 2.0 * v));
    }

    #[test]
    fn multi_head_validates_shapes() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(vec![2, 4, 3]));
        let w = tape.constant(Tensor::zeros(vec![2, 4]));
        let wo = tape.constant(Tensor::zeros(vec![4, 4]));
        let p = MultiHeadParams {
            heads: vec![HeadParams { wq: w, wk: w, wv: w }],
            wo,
        };
        let cfg = AttentionConfig {
            d_model: 4,
            heads: 2,
            d_k: 2,
        };
        assert!(matches!(
            multi_head_vn_attention(&mut tape, x, &p, &cfg),
            Err(Error::Config(_))
        ));
        let cfg = AttentionConfig {
            d_model: 4,
            heads: 1,
            d_k: 2,
        };
        assert!(multi_head_vn_attention(&mut tape, x, &p, &cfg).is_err());
    }

    #[test]
    fn ffn_identity_and_zero() {
        let mut rng = seeded(44);
        let x = Tensor::randn(vec![3, 2, 3], &mut rng);
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let eye = tape.constant(Tensor::eye(2));
        let p = FfnParams {
            w1: eye,
            nonlin: Nonlin { dir: eye, alpha: 0.0 },
            w2: eye,
        };
        let out = vn_ffn(&mut tape, xv, &p).unwrap();
        assert_eq!(tape.value(out), &x);

        let zero = tape.constant(Tensor::zeros(vec![2, 2]));
        let p = FfnParams { w1: zero, ..p };
        let out = vn_ffn(&mut tape, xv, &p).unwrap();
        assert_eq!(tape.value(out).max_abs(), 0.0);
    }

    #[test]
    fn zero_block_is_identity() {
        let mut rng = seeded(45);
        let x = Tensor::randn(vec![5, 3, 3], &mut rng);
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let z = |t: &mut Tape, r, c| t.constant(Tensor::zeros(vec![r, c]));
        let heads = (0..2)
            .map(|_| HeadParams {
                wq: z(&mut tape, 2, 3),
                wk: z(&mut tape, 2, 3),
                wv: z(&mut tape, 2, 3),
            })
            .collect();
        let p = BlockParams {
            attention: MultiHeadParams {
                heads,
                wo: z(&mut tape, 3, 4),
            },
            ffn: FfnParams {
                w1: z(&mut tape, 3, 3),
                nonlin: Nonlin {
                    dir: z(&mut tape, 3, 3),
                    alpha: 0.0,
                },
                w2: z(&mut tape, 3, 3),
            },
        };
        let cfg = AttentionConfig {
            d_model: 3,
            heads: 2,
            d_k: 2,
        };
        let (out, w) = vnt_block(&mut tape, xv, &p, &cfg).unwrap();
        assert_eq!(tape.value(out), &x);
        assert_eq!(w.len(), 2);
    }
}
