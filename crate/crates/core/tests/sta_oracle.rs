mod common;

use std::sync::Arc;

use proptest::prelude::*;
use sta_unet::sta::{self, StaConfig, StaGeometry, TokenMatrix, WINDOW};
use sta_unet::Graph;

#[test]
fn sparse_matches_dense_on_small_grids() {
    let diff = common::sparse_dense_max_diff(60, 7);
    assert!(diff < 1e-6, "max deviation {diff:e}");
}

#[test]
fn window_len_is_capped_at_three_per_axis() {
    for (gh, gw, want) in [(1, 1, 1), (2, 5, 6), (3, 3, 9), (7, 7, 9), (1, 4, 3)] {
        let geo = StaGeometry::new(gh * 2, gw * 2, 2, 2).unwrap();
        assert_eq!(geo.window_len(), want, "{gh}x{gw}");
    }
}

#[test]
fn indivisible_extent_is_rejected() {
    assert!(StaGeometry::new(10, 8, 4, 4).is_err());
    assert!(StaConfig::new(6, (2, 2), 4).validate().is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn window_contains_own_cell_without_duplicates(
        gh in 1usize..7, gw in 1usize..7, ch in 1usize..3, cw in 1usize..3,
    ) {
        let geo = StaGeometry::new(gh * ch, gw * cw, ch, cw).unwrap();
        for i in 0..geo.num_tokens() {
            let n: Vec<usize> = geo.neighbors(i).collect();
            prop_assert_eq!(n.len(), geo.window_len());
            prop_assert!(n.contains(&geo.cell_of(i)));
            let mut sorted = n.clone();
            sorted.sort_unstable();
            sorted.dedup();
            prop_assert_eq!(sorted.len(), n.len());
            prop_assert!(n.iter().all(|&j| j < geo.num_super_tokens()));
        }
    }

    #[test]
    fn association_rows_are_distributions(
        gh in 1usize..6, gw in 1usize..6, c in 1usize..5, seed in any::<u64>(),
    ) {
        let mut r = common::rng(seed);
        let geo = Arc::new(StaGeometry::new(gh * 2, gw, 2, 1).unwrap());
        let mut g = Graph::<f64>::new();
        let x = TokenMatrix {
            var: g.constant(common::uniform(&mut r, &[2, geo.num_tokens(), c], 3.0)),
            height: geo.height,
            width: geo.width,
        };
        let s = sta::init_super_tokens(&mut g, &x, &geo).unwrap();
        let q = sta::associate(&mut g, &x, &s, &geo).unwrap();
        let qd = g.value(q.var).data();
        for row in qd.chunks(WINDOW) {
            let used = &row[..geo.window_len()];
            prop_assert!(used.iter().all(|&v| v >= 0.0));
            prop_assert!((used.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
