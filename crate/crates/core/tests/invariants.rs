mod common;

use proptest::prelude::*;

use dsamgn_core::autograd::Tape;
use dsamgn_core::metrics::{cmc, rank_gallery};
use dsamgn_core::sasamg::{erase_matrix, generate_adjacency, Percentile, SasamgParams, SimilarityMatrix};
use dsamgn_core::tensor::Tensor;

fn matrix(n: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-3.0f64..3.0, n * n).prop_map(move |v| Tensor::new(vec![n, n], v).unwrap())
}

fn sized_matrix() -> impl Strategy<Value = Tensor> {
    (1usize..=8).prop_flat_map(matrix)
}

fn beta() -> impl Strategy<Value = Percentile> {
    (0.0f64..=100.0).prop_map(|b| Percentile::new(b).unwrap())
}

proptest! {
    #[test]
    fn similarity_rows_are_distributions(
        (x, seed) in (1usize..=8, 1usize..=6).prop_flat_map(|(n, c)| {
            (prop::collection::vec(-4.0f64..4.0, n * c).prop_map(move |v| Tensor::new(vec![n, c], v).unwrap()), any::<u64>())
        })
    ) {
        let (_, c) = x.dims2().unwrap();
        let p = SasamgParams::init(c, &mut common::rng(seed));
        let (s, _) = generate_adjacency(&x, &p, Percentile::new(0.0).unwrap()).unwrap();
        let (n, _) = s.0.dims2().unwrap();
        for i in 0..n {
            let row = s.0.row(i);
            prop_assert!(row.iter().all(|&v| v >= 0.0 && v <= 1.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn erasure_keeps_entries_above_threshold_only(s in sized_matrix(), b in beta()) {
        let sm = SimilarityMatrix(s.clone());
        let a = erase_matrix(&sm, b).unwrap();
        for (&orig, &kept) in s.data().iter().zip(a.a.data()) {
            if orig > a.threshold {
                prop_assert_eq!(kept, orig);
            } else {
                prop_assert_eq!(kept, 0.0);
            }
        }
        let n = s.numel();
        prop_assert!(a.nonzeros() <= n - b.rank(n));
    }

    #[test]
    fn erasure_support_shrinks_with_beta(s in sized_matrix(), b1 in beta(), b2 in beta()) {
        let (lo, hi) = if b1.value() <= b2.value() { (b1, b2) } else { (b2, b1) };
        let sm = SimilarityMatrix(s);
        let a_lo = erase_matrix(&sm, lo).unwrap();
        let a_hi = erase_matrix(&sm, hi).unwrap();
        for (&x, &y) in a_lo.a.data().iter().zip(a_hi.a.data()) {
            prop_assert!(y == 0.0 || x == y);
        }
    }

    #[test]
    fn erasure_count_on_distinct_entries(n in 1usize..=8, b in beta(), seed in any::<u64>()) {
        let s = common::distinct_matrix(n, &mut common::rng(seed));
        let a = erase_matrix(&SimilarityMatrix(s), b).unwrap();
        prop_assert_eq!(a.nonzeros(), n * n - b.rank(n * n));
    }

    #[test]
    fn mask_gradient_is_zero_on_erased_entries(s in sized_matrix(), b in beta()) {
        let mut tape = Tape::new();
        let sv = tape.param(s.clone());
        let (a, threshold) = dsamgn_core::sasamg::erase(&mut tape, sv, b).unwrap();
        let loss = tape.sum(a);
        tape.backward(loss).unwrap();
        for (&v, &g) in s.data().iter().zip(tape.grad(sv).unwrap()) {
            prop_assert_eq!(g, if v > threshold { 1.0 } else { 0.0 });
        }
    }

    #[test]
    fn cmc_is_monotone_and_ranking_is_a_permutation(
        gallery in (1usize..=10, 1usize..=3).prop_flat_map(|(g, c)| {
            prop::collection::vec(-2.0f64..2.0, g * c).prop_map(move |v| Tensor::new(vec![g, c], v).unwrap())
        }),
        ids in prop::collection::vec(0usize..3, 10),
    ) {
        let (g, c) = gallery.dims2().unwrap();
        let query = vec![0.0; c];
        let order = rank_gallery(&query, &gallery).unwrap();
        let mut sorted = order.clone();
        sorted.sort_unstable();
        prop_assert_eq!(sorted, (0..g).collect::<Vec<_>>());
        let ranked: Vec<usize> = order.iter().map(|&j| ids[j]).collect();
        let rates = cmc(&[ranked], &[0], &(1..=g).collect::<Vec<_>>());
        prop_assert!(rates.windows(2).all(|w| w[0] <= w[1]));
    }
}
