use proptest::prelude::*;

use vnt_core::data::{augment, farthest_point_sample, normalize, AugmentConfig, Label, LabeledCloud};
use vnt_core::rng::seeded;
use vnt_core::vn::knn;
use vnt_core::{sample_rotation, Protocol, Rotation, Tensor};

fn cloud(n: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-5.0..5.0f64, n * 3).prop_map(move |d| Tensor::new(vec![n, 3], d).unwrap())
}

fn sized_cloud() -> impl Strategy<Value = Tensor> {
    (4usize..40).prop_flat_map(cloud)
}

fn rotation() -> impl Strategy<Value = Rotation> {
    any::<u64>().prop_map(|s| sample_rotation(Protocol::So3, &mut seeded(s)))
}

fn sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Farthest-point sampling by recomputing every min-distance from scratch.
fn fps_oracle(points: &Tensor, m: usize, start: usize) -> Vec<usize> {
    let rows: Vec<&[f64]> = points.data().chunks(3).collect();
    let mut chosen = vec![start];
    while chosen.len() < m {
        let mut best = (f64::NEG_INFINITY, 0);
        for (i, r) in rows.iter().enumerate() {
            if chosen.contains(&i) {
                continue;
            }
            let d = chosen.iter().map(|&c| sq(r, rows[c])).fold(f64::INFINITY, f64::min);
            if d > best.0 {
                best = (d, i);
            }
        }
        chosen.push(best.1);
    }
    chosen
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn normalize_centers_and_scales(x in sized_cloud()) {
        let y = normalize(&x).unwrap();
        let n = y.shape()[0] as f64;
        for k in 0..3 {
            let c: f64 = y.data().chunks(3).map(|p| p[k]).sum::<f64>() / n;
            prop_assert!(c.abs() < 1e-12);
        }
        let max = y.data().chunks(3).map(|p| sq(p, &[0.0; 3]).sqrt()).fold(0.0, f64::max);
        prop_assert!((max - 1.0).abs() < 1e-12);
    }

    #[test]
    fn normalize_is_idempotent(x in sized_cloud()) {
        let y = normalize(&x).unwrap();
        prop_assert!(normalize(&y).unwrap().max_abs_diff(&y) < 1e-12);
    }

    #[test]
    fn normalize_commutes_with_rotation(x in sized_cloud(), r in rotation()) {
        let a = r.rotate(&normalize(&x).unwrap()).unwrap();
        let b = normalize(&r.rotate(&x).unwrap()).unwrap();
        prop_assert!(a.max_abs_diff(&b) < 1e-12);
    }

    #[test]
    fn fps_matches_brute_force(x in sized_cloud(), frac in 0.0..1.0f64, start in any::<prop::sample::Index>()) {
        let n = x.shape()[0];
        let m = 1 + ((n - 1) as f64 * frac) as usize;
        let s = start.index(n);
        let got = farthest_point_sample(&x, m, s).unwrap();
        prop_assert_eq!(&got, &fps_oracle(&x, m, s));
        let mut uniq = got.clone();
        uniq.sort_unstable();
        uniq.dedup();
        prop_assert_eq!(uniq.len(), m);
    }

    #[test]
    fn fps_ignores_rotation(x in sized_cloud(), r in rotation()) {
        let m = x.shape()[0] / 2;
        let a = farthest_point_sample(&x, m, 0).unwrap();
        let b = farthest_point_sample(&r.rotate(&x).unwrap(), m, 0).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn knn_matches_brute_force(x in sized_cloud(), k in 1usize..4) {
        let nb = knn(&x, k).unwrap();
        let rows: Vec<&[f64]> = x.data().chunks(3).collect();
        for (i, near) in nb.iter().enumerate() {
            let mut order: Vec<usize> = (0..rows.len()).filter(|&j| j != i).collect();
            order.sort_by(|&a, &b| sq(rows[i], rows[a]).total_cmp(&sq(rows[i], rows[b])).then(a.cmp(&b)));
            prop_assert_eq!(near, &order[..k].to_vec());
        }
    }

    #[test]
    fn augment_preserves_count_and_labels(x in sized_cloud(), seed in any::<u64>(), p in 0usize..3) {
        let protocol = [Protocol::None, Protocol::Z, Protocol::So3][p];
        let n = x.shape()[0];
        let c = LabeledCloud { points: x, label: Label::Parts((0..n).map(|i| i % 3).collect()), category: Some(1) };
        let cfg = AugmentConfig { protocol, ..Default::default() };
        let out = augment(&c, &cfg, &mut seeded(seed)).unwrap();
        prop_assert_eq!(out.points.shape(), c.points.shape());
        prop_assert_eq!(&out.label, &c.label);
        prop_assert_eq!(out.category, Some(1));
        prop_assert!(out.points.is_finite());
    }

    #[test]
    fn z_rotation_fixes_heights(x in sized_cloud(), seed in any::<u64>()) {
        let r = sample_rotation(Protocol::Z, &mut seeded(seed));
        let y = r.rotate(&x).unwrap();
        for (a, b) in x.data().chunks(3).zip(y.data().chunks(3)) {
            prop_assert!((a[2] - b[2]).abs() < 1e-12);
            prop_assert!((sq(a, &[0.0; 3]) - sq(b, &[0.0; 3])).abs() < 1e-9);
        }
    }

    #[test]
    fn rotations_are_proper(r in rotation()) {
        let (orth, det) = r.defects();
        prop_assert!(orth < 1e-12 && (det - 1.0).abs() < 1e-12);
    }
}
