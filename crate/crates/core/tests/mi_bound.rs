mod common;

use common::exact_mi;
use proptest::prelude::*;
use treeleak::idlmid::{admissible, mi_upper_bound, NodeClassCounts};

fn counts() -> impl Strategy<Value = NodeClassCounts> {
    prop::collection::vec(1..60usize, 2..7)
        .prop_flat_map(|totals| {
            let node = totals.iter().map(|&t| 0..=t).collect::<Vec<_>>();
            (Just(totals), node)
        })
        .prop_filter("nonempty node", |(_, node)| node.iter().sum::<usize>() > 0)
        .prop_map(|(totals, node)| NodeClassCounts::new(totals, node).unwrap())
}

proptest! {
    #[test]
    fn bound_dominates_exact_mi(c in counts()) {
        prop_assert!(mi_upper_bound(&c).unwrap() >= exact_mi(&c) - 1e-12);
    }

    #[test]
    fn admissibility_is_monotone_in_xi(c in counts(), lo in 0.0..1.0f64, step in 0.0..1.0f64) {
        if admissible(&c, lo).unwrap() {
            prop_assert!(admissible(&c, lo + step).unwrap());
        }
    }

    #[test]
    fn whole_population_reveals_nothing(totals in prop::collection::vec(1..60usize, 2..7)) {
        let c = NodeClassCounts::new(totals.clone(), totals).unwrap();
        prop_assert!(mi_upper_bound(&c).unwrap().abs() <= 1e-12);
    }
}
