use proptest::prelude::*;

use relprop::autodiff::Graph;
use relprop::ner::{crf_nll, log_partition, sequence_score, viterbi_decode};
use relprop::{Real, Tensor};

fn instance() -> impl Strategy<Value = (Tensor, Tensor, Vec<usize>)> {
    (1usize..=5, 1usize..=4).prop_flat_map(|(n, k)| {
        (
            prop::collection::vec(-3.0..3.0f64, n * k),
            prop::collection::vec(-3.0..3.0f64, (k + 2) * (k + 2)),
            prop::collection::vec(0..k, n),
        )
            .prop_map(move |(e, t, gold)| {
                (
                    Tensor::new(vec![n, k], e).unwrap(),
                    Tensor::new(vec![k + 2, k + 2], t).unwrap(),
                    gold,
                )
            })
    })
}

fn paths(n: usize, k: usize) -> Vec<Vec<usize>> {
    (0..k.pow(n as u32))
        .map(|mut code| {
            (0..n)
                .map(|_| {
                    let y = code % k;
                    code /= k;
                    y
                })
                .collect()
        })
        .collect()
}

proptest! {
    #[test]
    fn probabilities_of_all_paths_sum_to_one((em, tr, _) in instance()) {
        let (n, k) = (em.rows(), em.cols());
        let z = log_partition(&em, &tr);
        let total: Real = paths(n, k).iter().map(|p| (sequence_score(&em, &tr, p) - z).exp()).sum();
        prop_assert!((total - 1.0).abs() < 1e-10);
    }

    #[test]
    fn nll_is_nonnegative_and_matches_partition((em, tr, gold) in instance()) {
        let mut g = Graph::new();
        let (e, t) = (g.input(em.clone()), g.input(tr.clone()));
        let loss = crf_nll(&mut g, e, t, &gold).unwrap();
        let nll = g.value(loss).item();
        prop_assert!(nll >= -1e-12);
        prop_assert!((nll - (log_partition(&em, &tr) - sequence_score(&em, &tr, &gold))).abs() < 1e-9);
    }

    #[test]
    fn viterbi_path_is_never_beaten((em, tr, _) in instance()) {
        let (best, score) = viterbi_decode(&em, &tr);
        prop_assert_eq!(best.len(), em.rows());
        for p in paths(em.rows(), em.cols()) {
            prop_assert!(sequence_score(&em, &tr, &p) <= score + 1e-12);
        }
    }

    #[test]
    fn gradient_of_nll_is_marginal_minus_gold((em, tr, gold) in instance()) {
        let (n, k) = (em.rows(), em.cols());
        let mut g = Graph::new();
        let e = g.leaf(em.clone(), true);
        let t = g.input(tr.clone());
        let loss = crf_nll(&mut g, e, t, &gold).unwrap();
        g.backward(loss).unwrap();
        let grad = g.grad(e).unwrap().clone();
        let z = log_partition(&em, &tr);
        let mut marginal = vec![0.0; n * k];
        for p in paths(n, k) {
            let w = (sequence_score(&em, &tr, &p) - z).exp();
            for (i, &y) in p.iter().enumerate() {
                marginal[i * k + y] += w;
            }
        }
        for i in 0..n {
            for y in 0..k {
                let expect = marginal[i * k + y] - Real::from(u8::from(gold[i] == y));
                prop_assert!((grad.at(i, y) - expect).abs() < 1e-9);
            }
        }
    }
}
