mod common;

use common::oracles::{dt_matches, dt_mismatches};
use edge_odometry::imaging::{distance_transform, EdgeMap};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn random_masks_match_brute_force() {
    assert_eq!(dt_mismatches(1, 200, 16, 16), 0);
}

#[test]
fn empty_mask_is_unreachable_everywhere() {
    let field = distance_transform(&EdgeMap::from_mask(5, 4, vec![false; 20]).unwrap());
    assert!(field.is_empty());
    assert!(field.distances().iter().all(|d| d.is_infinite()));
    assert_eq!(field.nearest_base(2, 2), None);
}

#[test]
fn equidistant_edges_resolve_to_lowest_column_then_row() {
    // Edges at (1, 2), (3, 0) and (3, 4) are all at distance 2 from (3, 2).
    let mut mask = vec![false; 25];
    for (x, y) in [(1, 2), (3, 0), (3, 4)] {
        mask[y * 5 + x] = true;
    }
    let field = distance_transform(&EdgeMap::from_mask(5, 5, mask.clone()).unwrap());
    assert_eq!(field.distance(3, 2), 2.0);
    assert_eq!(field.nearest_base(3, 2), Some((1, 2)));
    mask[2 * 5 + 1] = false;
    let field = distance_transform(&EdgeMap::from_mask(5, 5, mask).unwrap());
    assert_eq!(field.nearest_base(3, 2), Some((3, 0)));
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn rectangular_masks_match_brute_force(w in 1u32..24, h in 1u32..24, seed in any::<u64>(), density in 0.0f64..0.5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mask: Vec<bool> = (0..w * h).map(|_| rng.random_bool(density)).collect();
        prop_assert!(dt_matches(&mask, w, h));
    }

    #[test]
    fn edges_have_zero_distance_and_point_to_themselves(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mask: Vec<bool> = (0..400).map(|_| rng.random_bool(0.1)).collect();
        let field = distance_transform(&EdgeMap::from_mask(20, 20, mask.clone()).unwrap());
        for (i, &m) in mask.iter().enumerate() {
            let (x, y) = (i as u32 % 20, i as u32 / 20);
            if m {
                prop_assert_eq!(field.distance(x, y), 0.0);
                prop_assert_eq!(field.nearest_base(x, y), Some((x, y)));
            }
        }
    }
}
