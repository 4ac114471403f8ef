//! Vector-neuron primitives.
//!
//! A vector-neuron feature is an `N×C×3` tensor: `N` points, each carrying
//! `C` channels of 3-vectors. Rotations act on the right of every vector, and
//! every layer here commutes with that action (or, for the invariant
//! readout, removes it).

use crate::error::{Error, Result};
use crate::rotation::Rotation;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Leak used by the lifting and frame stages.
pub const DEFAULT_LEAK: f64 = 0.2;

/// An `N×C×D` feature tensor (`D = 3` outside the scalar-reduction harness).
#[derive(Clone, Debug, PartialEq)]
pub struct VnFeature(Tensor);

impl VnFeature {
    pub fn new(t: Tensor) -> Result<Self> {
        if t.rank() != 3 {
            return Err(Error::shape("vn_feature", t.shape(), &[0, 0, 3]));
        }
        Ok(Self(t))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    pub fn points(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn channels(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn rotated(&self, r: &Rotation) -> Result<Self> {
        Ok(Self(r.rotate(&self.0)?))
    }

    /// Reorders the point axis: row `i` of the result is row `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        Ok(Self(self.0.select_rows(perm)?))
    }
}

/// Direction weights and leak of a vector-neuron leaky ReLU.
#[derive(Clone, Copy, Debug)]
pub struct Nonlin {
    pub dir: Var,
    pub alpha: f64,
}

#[derive(Clone, Copy, Debug)]
pub struct EdgeConv {
    /// `C×2` lift of the (neighbor offset, center) channel pair.
    pub lift: Var,
    pub nonlin: Nonlin,
    pub k: usize,
}

/// Frame network of the invariant readout: stages of linear map + nonlinearity.
#[derive(Clone, Debug)]
pub struct Frame {
    pub stages: Vec<(Var, Nonlin)>,
}

/// `W·Vₙ` for every point: `v: N×C×D`, `w: C'×C` → `N×C'×D`.
pub fn vn_linear(tape: &mut Tape, v: Var, w: Var) -> Result<Var> {
    let (vs, ws) = (tape.shape(v), tape.shape(w));
    if vs.len() != 3 || ws.len() != 2 || ws[1] != vs[1] {
        return Err(Error::shape("vn_linear", vs, ws));
    }
    tape.matmul(w, v)
}

/// Vector-neuron leaky ReLU with learned directions `d = U·V`.
pub fn vn_leaky_relu(tape: &mut Tape, v: Var, p: Nonlin) -> Result<Var> {
    let d = vn_linear(tape, v, p.dir)?;
    tape.vn_leaky(v, d, p.alpha)
}

/// Mean over the point axis: `N×C×D` → `1×C×D`.
pub fn vn_mean_pool(tape: &mut Tape, v: Var) -> Result<Var> {
    let s = tape.shape(v).to_vec();
    if s.len() != 3 {
        return Err(Error::shape("vn_mean_pool", &s, &[]));
    }
    let m = tape.mean_axis(v, 0)?;
    tape.reshape(m, &[1, s[1], s[2]])
}

/// `k` nearest neighbors of every point (self excluded), ordered by
/// distance with ties broken by the lower index.
pub fn knn(points: &Tensor, k: usize) -> Result<Vec<Vec<usize>>> {
    let s = points.shape();
    if s.len() != 2 || s[1] != 3 {
        return Err(Error::shape("knn", s, &[0, 3]));
    }
    let n = s[0];
    if k == 0 || n <= k {
        return Err(Error::Config(format!("k-NN needs 1 ≤ k < N, got k = {k} with N = {n}")));
    }
    let p = points.data();
    let mut out = Vec::with_capacity(n);
    let mut cand: Vec<(f64, usize)> = Vec::with_capacity(n - 1);
    for i in 0..n {
        cand.clear();
        let xi = &p[i * 3..i * 3 + 3];
        for j in (0..n).filter(|&j| j != i) {
            let xj = &p[j * 3..j * 3 + 3];
            let d2 = (xj[0] - xi[0]).powi(2) + (xj[1] - xi[1]).powi(2) + (xj[2] - xi[2]).powi(2);
            cand.push((d2, j));
        }
        let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
        cand.select_nth_unstable_by(k - 1, cmp);
        let mut near = cand[..k].to_vec();
        near.sort_unstable_by(cmp);
        out.push(near.into_iter().map(|(_, j)| j).collect());
    }
    Ok(out)
}

/// Edge features `(xⱼ − xᵢ, xᵢ)` for every neighbor pair: `(N·k)×2×3`.
pub fn edge_features(points: &Tensor, neighbors: &[Vec<usize>]) -> Result<Tensor> {
    let p = points.data();
    let k = neighbors.first().map_or(0, Vec::len);
    let mut data = Vec::with_capacity(neighbors.len() * k * 6);
    for (i, near) in neighbors.iter().enumerate() {
        let xi = &p[i * 3..i * 3 + 3];
        for &j in near {
            let xj = &p[j * 3..j * 3 + 3];
            data.extend((0..3).map(|c| xj[c] - xi[c]));
            data.extend_from_slice(xi);
        }
    }
    Tensor::new(vec![neighbors.len() * k, 2, 3], data)
}

/// Lifts a raw `N×3` cloud to `N×C×3` vector-neuron features: per neighbor
/// pair, lift the two-channel edge feature, apply the nonlinearity, then
/// average over the `k` neighbors.
pub fn edge_conv_lift(tape: &mut Tape, points: &Tensor, p: &EdgeConv) -> Result<Var> {
    let neighbors = knn(points, p.k)?;
    let n = neighbors.len();
    let edges = tape.constant(edge_features(points, &neighbors)?);
    let lifted = vn_linear(tape, edges, p.lift)?;
    let act = vn_leaky_relu(tape, lifted, p.nonlin)?;
    let c = tape.shape(act)[1];
    let grouped = tape.reshape(act, &[n, p.k, c, 3])?;
    tape.mean_axis(grouped, 1)
}

/// `Vₙ·Tₙᵀ` for every point: `v: N×C×3`, `frame: N×F×3` → `N×C×F`.
pub fn invariant_from_frame(tape: &mut Tape, v: Var, frame: Var) -> Result<Var> {
    let (vs, fs) = (tape.shape(v), tape.shape(frame));
    if vs.len() != 3 || fs.len() != 3 || vs[0] != fs[0] || vs[2] != fs[2] {
        return Err(Error::shape("invariant_from_frame", vs, fs));
    }
    let ft = tape.transpose(frame)?;
    tape.matmul(v, ft)
}

/// Rotation-invariant readout: a frame network predicts three equivariant
/// vectors per point and the features are expressed in that frame.
pub fn vn_invariant(tape: &mut Tape, v: Var, frame: &Frame) -> Result<Var> {
    let mut t = v;
    for (lin, nonlin) in &frame.stages {
        t = vn_linear(tape, t, *lin)?;
        t = vn_leaky_relu(tape, t, *nonlin)?;
    }
    if tape.shape(t)[1] != 3 {
        return Err(Error::Config(format!(
            "frame network must output 3 channels, got {}",
            tape.shape(t)[1]
        )));
    }
    invariant_from_frame(tape, v, t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{seeded, Rng};
    use crate::rotation::{sample_rotation, Protocol};

    fn feature(n: usize, c: usize, rng: &mut Rng) -> Tensor {
        Tensor::randn(vec![n, c, 3], rng)
    }

    fn run<F: Fn(&mut Tape, Var) -> Result<Var>>(input: &Tensor, f: F) -> Tensor {
        let mut tape = Tape::new();
        let v = tape.constant(input.clone());
        let out = f(&mut tape, v).unwrap();
        tape.value(out).clone()
    }

    #[test]
    fn vn_linear_identity_and_dependency() {
        let mut rng = seeded(31);
        let x = feature(4, 3, &mut rng);
        let out = run(&x, |t, v| {
            let w = t.constant(Tensor::eye(3));
            vn_linear(t, v, w)
        });
        assert_eq!(out, x);

        // One input channel duplicated into two outputs stays parallel.
        let single = feature(5, 1, &mut rng);
        let out = run(&single, |t, v| {
            let w = t.constant(Tensor::new(vec![2, 1], vec![1.0, 1.0]).unwrap());
            vn_linear(t, v, w)
        });
        for p in 0..5 {
            for k in 0..3 {
                assert_eq!(out.get(&[p, 0, k]), out.get(&[p, 1, k]));
            }
        }
    }

    #[test]
    fn vn_linear_rejects_channel_mismatch() {
        let mut tape = Tape::new();
        let v = tape.constant(Tensor::zeros(vec![2, 3, 3]));
        let w = tape.constant(Tensor::zeros(vec![2, 4]));
        assert!(matches!(vn_linear(&mut tape, v, w), Err(Error::Shape { .. })));
    }

    #[test]
    fn single_channel_lift_is_rank_one() {
        let mut rng = seeded(32);
        let x = feature(6, 1, &mut rng);
        let w = Tensor::randn(vec![5, 1], &mut rng);
        let out = run(&x, |t, v| {
            let wv = t.constant(w.clone());
            vn_linear(t, v, wv)
        });
        for p in 0..6 {
            let base = [out.get(&[p, 0, 0]), out.get(&[p, 0, 1]), out.get(&[p, 0, 2])];
            for c in 1..5 {
                let v = [out.get(&[p, c, 0]), out.get(&[p, c, 1]), out.get(&[p, c, 2])];
                let cross = [
                    base[1] * v[2] - base[2] * v[1],
                    base[2] * v[0] - base[0] * v[2],
                    base[0] * v[1] - base[1] * v[0],
                ];
                assert!(cross.iter().all(|x| x.abs() < 1e-12));
            }
        }
    }

    #[test]
    fn leaky_relu_passes_aligned_vectors() {
        let mut rng = seeded(33);
        let x = feature(3, 2, &mut rng);
        // U = I makes d = q, so ⟨q,d⟩ ≥ 0 everywhere.
        let out = run(&x, |t, v| {
            let u = t.constant(Tensor::eye(2));
            vn_leaky_relu(t, v, Nonlin { dir: u, alpha: 0.0 })
        });
        assert_eq!(out, x);
        // U = −I: every vector is anti-parallel to its direction and clamps to 0.
        let out = run(&x, |t, v| {
            let u = t.constant(Tensor::eye(2).map(|x| -x));
            vn_leaky_relu(t, v, Nonlin { dir: u, alpha: 0.0 })
        });
        assert!(out.max_abs() < 1e-15);
    }

    #[test]
    fn knn_tie_breaks_by_lowest_index() {
        let pts = Tensor::new(vec![3, 3], vec![0., 0., 0., 1., 0., 0., 2., 0., 0.]).unwrap();
        let nn = knn(&pts, 1).unwrap();
        assert_eq!(nn, vec![vec![1], vec![0], vec![1]]);
        assert!(knn(&pts, 3).is_err());
    }

    #[test]
    fn knn_matches_brute_force() {
        let mut rng = seeded(34);
        let pts = Tensor::randn(vec![20, 3], &mut rng);
        let nn = knn(&pts, 5).unwrap();
        for (i, got) in nn.iter().enumerate() {
            let mut all: Vec<(f64, usize)> = (0..20)
                .filter(|&j| j != i)
                .map(|j| {
                    let d: f64 = (0..3).map(|c| (pts.get(&[i, c]) - pts.get(&[j, c])).powi(2)).sum();
                    (d, j)
                })
                .collect();
            all.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
            let expected: Vec<usize> = all[..5].iter().map(|x| x.1).collect();
            assert_eq!(got, &expected);
        }
    }

    #[test]
    fn degenerate_cloud_lift_depends_only_on_center() {
        let mut rng = seeded(35);
        let pts = Tensor::full(vec![6, 3], 0.25);
        let lift = Tensor::randn(vec![4, 2], &mut rng);
        let dir = Tensor::randn(vec![4, 4], &mut rng);
        let mut tape = Tape::new();
        let lv = tape.constant(lift.clone());
        let dv = tape.constant(dir.clone());
        let p = EdgeConv {
            lift: lv,
            nonlin: Nonlin {
                dir: dv,
                alpha: DEFAULT_LEAK,
            },
            k: 3,
        };
        let out = edge_conv_lift(&mut tape, &pts, &p).unwrap();
        // Zero offsets: the lifted vector is lift[:,1] ⊗ x, then the nonlinearity.
        let center = tape.constant(Tensor::new(vec![1, 2, 3], vec![0., 0., 0., 0.25, 0.25, 0.25]).unwrap());
        let lifted = vn_linear(&mut tape, center, lv).unwrap();
        let expected = vn_leaky_relu(&mut tape, lifted, p.nonlin).unwrap();
        let got = tape.value(out).clone();
        let exp = tape.value(expected).clone();
        for i in 0..6 {
            for c in 0..4 {
                for k in 0..3 {
                    assert!((got.get(&[i, c, k]) - exp.get(&[0, c, k])).abs() < 1e-15);
                }
            }
        }
    }

    #[test]
    fn mean_pool_cases() {
        let one = Tensor::new(vec![1, 1, 3], vec![1., 2., 3.]).unwrap();
        assert_eq!(run(&one, vn_mean_pool), one);
        let opposite = Tensor::new(vec![2, 1, 3], vec![1., 2., 3., -1., -2., -3.]).unwrap();
        assert_eq!(run(&opposite, vn_mean_pool).data(), &[0., 0., 0.]);
    }

    #[test]
    fn invariant_from_frame_self_product() {
        let v = Tensor::new(vec![1, 1, 3], vec![1., 2., 2.]).unwrap();
        let mut tape = Tape::new();
        let vv = tape.constant(v.clone());
        let fv = tape.constant(v);
        let out = invariant_from_frame(&mut tape, vv, fv).unwrap();
        assert_eq!(tape.value(out).data(), &[9.0]);
    }

    #[test]
    fn zero_frame_gives_zero_invariants() {
        let mut rng = seeded(36);
        let x = feature(4, 6, &mut rng);
        let out = run(&x, |t, v| {
            let frame = Frame {
                stages: vec![
                    (
                        t.constant(Tensor::zeros(vec![3, 6])),
                        Nonlin {
                            dir: t.constant(Tensor::zeros(vec![3, 3])),
                            alpha: 0.2,
                        },
                    ),
                    (
                        t.constant(Tensor::zeros(vec![3, 3])),
                        Nonlin {
                            dir: t.constant(Tensor::zeros(vec![3, 3])),
                            alpha: 0.2,
                        },
                    ),
                ],
            };
            vn_invariant(t, v, &frame)
        });
        assert_eq!(out.shape(), &[4, 6, 3]);
        assert_eq!(out.max_abs(), 0.0);
    }

    #[test]
    fn invariant_layer_is_rotation_invariant() {
        let mut rng = seeded(37);
        let x = feature(5, 4, &mut rng);
        let w1 = Tensor::randn(vec![2, 4], &mut rng);
        let u1 = Tensor::randn(vec![2, 2], &mut rng);
        let w2 = Tensor::randn(vec![3, 2], &mut rng);
        let u2 = Tensor::randn(vec![3, 3], &mut rng);
        let layer = |t: &mut Tape, v: Var| {
            let frame = Frame {
                stages: vec![
                    (
                        t.constant(w1.clone()),
                        Nonlin {
                            dir: t.constant(u1.clone()),
                            alpha: 0.2,
                        },
                    ),
                    (
                        t.constant(w2.clone()),
                        Nonlin {
                            dir: t.constant(u2.clone()),
                            alpha: 0.2,
                        },
                    ),
                ],
            };
            vn_invariant(t, v, &frame)
        };
        let r = sample_rotation(Protocol::So3, &mut rng);
        let a = run(&x, layer);
        let b = run(&r.rotate(&x).unwrap(), layer);
        assert!(a.max_abs_diff(&b) <= 1e-10);
    }

    #[test]
    fn frame_must_have_three_channels() {
        let mut rng = seeded(38);
        let x = feature(2, 4, &mut rng);
        let mut tape = Tape::new();
        let v = tape.constant(x);
        let frame = Frame {
            stages: vec![(
                tape.constant(Tensor::randn(vec![2, 4], &mut rng)),
                Nonlin {
                    dir: tape.constant(Tensor::eye(2)),
                    alpha: 0.2,
                },
            )],
        };
        assert!(matches!(vn_invariant(&mut tape, v, &frame), Err(Error::Config(_))));
    }
}
