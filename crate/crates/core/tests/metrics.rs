mod common;

use common::{auc_pairs, v_shadow};
use proptest::prelude::*;
use treeleak::eval::{auc, auc_binary, homogeneity_completeness_v, v_measure};

fn labelled(max_n: usize) -> impl Strategy<Value = (Vec<usize>, Vec<usize>)> {
    (1..max_n).prop_flat_map(|n| (prop::collection::vec(0..5usize, n), prop::collection::vec(0..7usize, n)))
}

proptest! {
    #[test]
    fn v_measure_matches_entropy_shadow((truth, pred) in labelled(120)) {
        let v = v_measure(&truth, &pred).unwrap();
        prop_assert!((v - v_shadow(&truth, &pred)).abs() <= 1e-10);
        prop_assert!((0.0..=1.0 + 1e-12).contains(&v));
    }

    #[test]
    fn v_measure_ignores_cluster_names((truth, pred) in labelled(80), shift in 1..50usize) {
        let renamed: Vec<usize> = pred.iter().map(|&p| (p * 7 + shift) % 1000).collect();
        let a = v_measure(&truth, &pred).unwrap();
        let b = v_measure(&truth, &renamed).unwrap();
        prop_assert!((a - b).abs() <= 1e-12);
    }

    #[test]
    fn v_measure_is_symmetric((truth, pred) in labelled(80)) {
        let hcv = homogeneity_completeness_v(&truth, &pred).unwrap();
        let swapped = homogeneity_completeness_v(&pred, &truth).unwrap();
        prop_assert!((hcv.homogeneity - swapped.completeness).abs() <= 1e-12);
        prop_assert!((hcv.v_measure - swapped.v_measure).abs() <= 1e-12);
    }

    #[test]
    fn binary_auc_matches_pair_count(
        pos in prop::collection::vec(any::<bool>(), 2..40),
        seed in prop::collection::vec(0..6u8, 40),
    ) {
        prop_assume!(pos.iter().any(|&p| p) && pos.iter().any(|&p| !p));
        let scores: Vec<f64> = pos.iter().zip(&seed).map(|(_, &s)| s as f64 / 5.0).collect();
        prop_assert_eq!(auc_binary(&pos, &scores).unwrap(), auc_pairs(&pos, &scores));
    }

    #[test]
    fn auc_is_rank_based(
        truth in prop::collection::vec(0..2usize, 4..40),
        raw in prop::collection::vec(0.0..1.0f64, 40),
    ) {
        prop_assume!(truth.contains(&0) && truth.contains(&1));
        let scores: Vec<Vec<f64>> = truth.iter().zip(&raw).map(|(_, &s)| vec![1.0 - s, s]).collect();
        let stretched: Vec<Vec<f64>> = scores.iter().map(|s| vec![s[0], s[1].powi(3) + 2.0]).collect();
        prop_assert_eq!(auc(&truth, &scores, 2).unwrap(), auc(&truth, &stretched, 2).unwrap());
    }
}

#[test]
fn perfect_and_trivial_clusterings() {
    let truth = [0, 0, 1, 1, 2, 2];
    assert!((v_measure(&truth, &[5, 5, 3, 3, 9, 9]).unwrap() - 1.0).abs() < 1e-12);
    assert_eq!(v_measure(&truth, &[0; 6]).unwrap(), 0.0);
}
