use proptest::prelude::*;
use udafeat_core::graph::Graph;
use udafeat_core::labels::LabelMap;
use udafeat_core::losses::{
    compute_centroids, orthogonality_loss, sparsity_loss, Domain, FeatureBatch, PseudoLabelGrid,
};
use udafeat_core::metrics::{similarity_matrix, sparsity_scores, SPARSITY_TAU};
use udafeat_core::trainer::poly_lr;
use udafeat_core::Tensor;

const D: usize = 4;
const N: usize = 6;

fn batch_value<F>(data: &[f64], classes: &[u8], num_classes: usize, f: F) -> f64
where
    F: Fn(&mut Graph, &FeatureBatch, &udafeat_core::losses::Centroids) -> f64,
{
    let mut g = Graph::new();
    let x = g.constant(Tensor::new(&[D, 1, N], data.to_vec()).unwrap());
    let grid = PseudoLabelGrid {
        labels: LabelMap::new(1, N, classes.to_vec()).unwrap(),
        domain: Domain::Target,
    };
    let b = FeatureBatch::stack(&mut g, &[x], &[&grid]).unwrap();
    let c = compute_centroids(&mut g, &b, num_classes, false).unwrap();
    f(&mut g, &b, &c)
}

fn features() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(prop_oneof![Just(0.0), 0.0..3.0f64], D * N)
}

fn classes(c: u8) -> impl Strategy<Value = Vec<u8>> {
    prop::collection::vec(0..c, N)
}

proptest! {
    #[test]
    fn softmax_sums_to_one(v in prop::collection::vec(-50.0..50.0f64, 1..8)) {
        let mut g = Graph::new();
        let n = v.len();
        let x = g.constant(Tensor::new(&[n, 1], v).unwrap());
        let y = g.softmax(x, 0).unwrap();
        let s: f64 = g.value(y).data().iter().sum();
        prop_assert!((s - 1.0).abs() < 1e-12);
        prop_assert!(g.value(y).data().iter().all(|p| *p >= 0.0));
    }

    #[test]
    fn backward_is_linear_in_the_loss(
        x in prop::collection::vec(-2.0..2.0f64, 5),
        a in -3.0..3.0f64,
        b in -3.0..3.0f64,
    ) {
        let grad = |ka: f64, kb: f64| {
            let mut g = Graph::new();
            let v = g.param(Tensor::new(&[5], x.clone()).unwrap());
            let f1 = g.square(v);
            let f1 = g.sum(f1);
            let f2 = g.exp(v);
            let f2 = g.sum(f2);
            let l1 = g.mul_scalar(f1, ka);
            let l2 = g.mul_scalar(f2, kb);
            let l = g.add(l1, l2).unwrap();
            g.backward(l).unwrap();
            g.grad(v).unwrap().data().to_vec()
        };
        let both = grad(a, b);
        let ga = grad(1.0, 0.0);
        let gb = grad(0.0, 1.0);
        for i in 0..5 {
            let want = a * ga[i] + b * gb[i];
            prop_assert!((both[i] - want).abs() <= 1e-10 * (1.0 + want.abs()));
        }
    }

    #[test]
    fn orthogonality_is_permutation_invariant(
        data in features(),
        cls in classes(3),
        perm in Just([0u8, 1, 2]).prop_shuffle(),
    ) {
        let or = |g: &mut Graph, b: &FeatureBatch, c: &udafeat_core::losses::Centroids| {
            let v = orthogonality_loss(g, b, c).unwrap();
            g.value(v).item()
        };
        let base = batch_value(&data, &cls, 3, or);
        let permuted: Vec<u8> = cls.iter().map(|&c| perm[c as usize]).collect();
        let other = batch_value(&data, &permuted, 3, or);
        prop_assert!((base - other).abs() < 1e-12);
        let present = {
            let mut p = cls.clone();
            p.sort();
            p.dedup();
            p.len()
        };
        prop_assert!(base >= -1e-15 && base <= (present as f64).ln() + 1e-12);
    }

    #[test]
    fn sparsity_loss_ignores_centroid_scale(
        data in features(),
        cls in classes(3),
        class in 0u8..3,
        scale in 0.01..100.0f64,
    ) {
        let sp = |g: &mut Graph, _: &FeatureBatch, c: &udafeat_core::losses::Centroids| {
            let v = sparsity_loss(g, c).unwrap();
            g.value(v).item()
        };
        let mut scaled = data.clone();
        for (i, &c) in cls.iter().enumerate() {
            if c == class {
                for ch in 0..D {
                    scaled[ch * N + i] *= scale;
                }
            }
        }
        let a = batch_value(&data, &cls, 3, sp);
        let b = batch_value(&scaled, &cls, 3, sp);
        prop_assert!((a - b).abs() < 1e-9);
    }

    #[test]
    fn sparsity_scores_ignore_vector_scale(
        data in features(),
        cls in classes(3),
        scales in prop::collection::vec(0.01..100.0f64, N),
    ) {
        let mut scaled = data.clone();
        for (i, s) in scales.iter().enumerate() {
            for ch in 0..D {
                scaled[ch * N + i] *= s;
            }
        }
        let labels = LabelMap::new(1, N, cls).unwrap();
        let score = |d: &[f64]| {
            let f = Tensor::new(&[D, 1, N], d.to_vec()).unwrap();
            sparsity_scores(&[f], &[labels.clone()], 3, SPARSITY_TAU).unwrap()
        };
        let a = score(&data);
        let b = score(&scaled);
        for (x, y) in a.iter().zip(&b) {
            match (x, y) {
                (Some(x), Some(y)) => prop_assert!((x - y).abs() < 1e-12),
                (None, None) => {}
                _ => prop_assert!(false, "presence changed"),
            }
        }
    }

    #[test]
    fn similarity_is_symmetric_and_bounded(data in features(), cls in classes(3)) {
        let f = Tensor::new(&[D, 1, N], data).unwrap();
        let s = similarity_matrix(&[f], &[LabelMap::new(1, N, cls).unwrap()], 3).unwrap();
        for j in 0..3 {
            for k in 0..3 {
                prop_assert_eq!(s.get(j, k), s.get(k, j));
                if let Some(v) = s.get(j, k) {
                    prop_assert!((-1e-12..=1.0 + 1e-12).contains(&v));
                }
            }
        }
    }

    #[test]
    fn poly_schedule_matches_closed_form(base in 1e-5..1e-1f64, total in 1usize..10_000, frac in 0.0..1.0f64) {
        let step = ((total as f64) * frac) as usize;
        let want = base * (1.0 - step as f64 / total as f64).powf(0.9);
        prop_assert!((poly_lr(base, step, total, 0.9) - want).abs() <= 1e-15 * base.max(1.0));
        prop_assert_eq!(poly_lr(base, total, total, 0.9), 0.0);
    }
}
