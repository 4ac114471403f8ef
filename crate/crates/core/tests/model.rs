use vnt_core::data::{generate_synthetic, normalize, Shape};
use vnt_core::model::{init_model, one_hot, ModelConfig, Readout, VntModel};
use vnt_core::rng::seeded;
use vnt_core::{sample_rotation, Protocol, Tensor};

fn cls_config() -> ModelConfig {
    ModelConfig {
        linear_dim: 3,
        heads: 2,
        head_size: 3,
        blocks: 2,
        knn_k: 5,
        cls_hidden: vec![12, 8],
        ..ModelConfig::classification(4)
    }
}

fn seg_config() -> ModelConfig {
    ModelConfig {
        linear_dim: 3,
        heads: 2,
        head_size: 3,
        blocks: 2,
        knn_k: 5,
        seg_hidden: vec![10, 8, 6],
        category_embed: 4,
        ..ModelConfig::segmentation(5, 3)
    }
}

fn cloud(shape: Shape, n: usize, seed: u64) -> Tensor {
    let c = generate_synthetic(shape, n, 0.02, &mut seeded(seed)).unwrap();
    normalize(&c.points).unwrap()
}

fn rel_diff(a: &Tensor, b: &Tensor) -> f64 {
    a.max_abs_diff(b) / a.max_abs().max(1e-300)
}

fn permute_rows(t: &Tensor, perm: &[usize]) -> Tensor {
    t.select_rows(perm).unwrap()
}

fn permutation(n: usize, seed: u64) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut p: Vec<usize> = (0..n).collect();
    p.shuffle(&mut seeded(seed));
    p
}

fn argmax_rows(t: &Tensor) -> Vec<usize> {
    let cols = t.shape()[1];
    t.data()
        .chunks(cols)
        .map(|r| (0..cols).fold(0, |b, j| if r[j] > r[b] { j } else { b }))
        .collect()
}

#[test]
fn classification_logits_are_rotation_invariant() {
    let model = init_model(&cls_config(), &mut seeded(1)).unwrap();
    for (i, shape) in Shape::ALL.into_iter().enumerate() {
        let x = cloud(shape, 48, i as u64);
        let a = model.predict(&x, None).unwrap();
        for s in 0..5 {
            let r = sample_rotation(Protocol::So3, &mut seeded(100 + s));
            let b = model.predict(&r.rotate(&x).unwrap(), None).unwrap();
            assert!(rel_diff(&a, &b) < 1e-9, "{shape:?}: {}", rel_diff(&a, &b));
        }
    }
}

#[test]
fn classification_logits_ignore_point_order() {
    let model = init_model(&cls_config(), &mut seeded(2)).unwrap();
    let x = cloud(Shape::Cylinder, 40, 3);
    let a = model.predict(&x, None).unwrap();
    let b = model.predict(&permute_rows(&x, &permutation(40, 4)), None).unwrap();
    assert!(rel_diff(&a, &b) < 1e-10);
}

#[test]
fn segmentation_is_permutation_equivariant() {
    let model = init_model(&seg_config(), &mut seeded(5)).unwrap();
    let x = cloud(Shape::Cube, 36, 6);
    let cat = one_hot(2, 3).unwrap();
    let perm = permutation(36, 7);
    let a = model.predict(&x, Some(&cat)).unwrap();
    let b = model.predict(&permute_rows(&x, &perm), Some(&cat)).unwrap();
    assert!(rel_diff(&permute_rows(&a, &perm), &b) < 1e-10);
}

#[test]
fn segmentation_labels_survive_rotation() {
    let model = init_model(&seg_config(), &mut seeded(8)).unwrap();
    let cat = one_hot(0, 3).unwrap();
    let x = cloud(Shape::Sphere, 40, 9);
    let a = model.predict(&x, Some(&cat)).unwrap();
    let r = sample_rotation(Protocol::So3, &mut seeded(10));
    let b = model.predict(&r.rotate(&x).unwrap(), Some(&cat)).unwrap();
    assert!(rel_diff(&a, &b) < 1e-9);
    assert_eq!(argmax_rows(&a), argmax_rows(&b));
}

#[test]
fn attention_weights_are_invariant_and_permute() {
    let model = init_model(&cls_config(), &mut seeded(11)).unwrap();
    let x = cloud(Shape::Cube, 24, 12);
    let r = sample_rotation(Protocol::So3, &mut seeded(13));
    let perm = permutation(24, 14);
    for block in 0..2 {
        for head in 0..2 {
            let w = model.attention_weights(&x, None, block, head).unwrap();
            let wr = model
                .attention_weights(&r.rotate(&x).unwrap(), None, block, head)
                .unwrap();
            assert!(w.max_abs_diff(&wr) < 1e-12);
            for row in w.data().chunks(24) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
            // P W Pᵀ: row i and column j of the permuted matrix come from perm[i], perm[j].
            let wp = model
                .attention_weights(&permute_rows(&x, &perm), None, block, head)
                .unwrap();
            for i in 0..24 {
                for j in 0..24 {
                    let want = w.data()[perm[i] * 24 + perm[j]];
                    assert!((wp.data()[i * 24 + j] - want).abs() < 1e-12);
                }
            }
        }
    }
}

#[test]
fn flatten_readout_is_not_invariant() {
    let cfg = ModelConfig {
        readout: Readout::Flatten,
        ..cls_config()
    };
    let model = init_model(&cfg, &mut seeded(15)).unwrap();
    let x = cloud(Shape::Cube, 32, 16);
    let a = model.predict(&x, None).unwrap();
    let r = sample_rotation(Protocol::So3, &mut seeded(17));
    let b = model.predict(&r.rotate(&x).unwrap(), None).unwrap();
    assert!(rel_diff(&a, &b) > 1e-6);
}

#[test]
fn same_seed_same_model() {
    let a: VntModel = init_model(&cls_config(), &mut seeded(3)).unwrap();
    let b = init_model(&cls_config(), &mut seeded(3)).unwrap();
    let c = init_model(&cls_config(), &mut seeded(4)).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
}
