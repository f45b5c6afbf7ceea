mod common;

use common::*;
use mcbo_core::fusion::{fuse, max_fuse, FusionStrategy, ModalityFieldSet};
use mcbo_core::volgrid::{norm, DisplacementField};
use proptest::prelude::*;
use rand::Rng;

#[test]
fn random_pair_matches_per_voxel_oracle() {
    let g = grid([4, 4, 4]);
    let mut r = rng(1);
    // small integer vectors so that equal norms actually occur
    let mut make = || {
        DisplacementField::new(
            g,
            (0..g.len())
                .map(|_| [0; 3].map(|_| r.random_range(-1i32..=1) as f64))
                .collect(),
        )
        .unwrap()
    };
    let (a, b) = (make(), make());
    let out = max_fuse(&ModalityFieldSet::unlabeled(vec![a.clone(), b.clone()]).unwrap());
    let mut ties = 0;
    for i in 0..g.len() {
        let (u, v) = (a.vectors()[i], b.vectors()[i]);
        let expected = if norm(v) > norm(u) { v } else { u };
        ties += usize::from(norm(u) == norm(v) && u != v);
        assert_eq!(out.vectors()[i], expected);
    }
    assert!(ties > 0);
}

#[test]
fn single_field_is_returned_unchanged() {
    let f = random_field([5, 4, 3], 2.0, 2);
    let set = ModalityFieldSet::new(vec![f.clone()], vec!["t1".into()]).unwrap();
    assert_eq!(max_fuse(&set), f);
    assert_eq!(
        fuse(&set, FusionStrategy::parse("vector_norm_max").unwrap()),
        f
    );
}

#[test]
fn dominating_field_wins() {
    let g = grid([3, 3, 3]);
    let b = DisplacementField::uniform(g, [2.0, 0.0, 0.0]).unwrap();
    let set = ModalityFieldSet::unlabeled(vec![DisplacementField::zeros(g), b.clone()]).unwrap();
    assert_eq!(max_fuse(&set), b);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn idempotent(seed in 0u64..1000) {
        let f = random_field([4, 3, 5], 3.0, seed);
        prop_assert_eq!(max_fuse(&ModalityFieldSet::unlabeled(vec![f.clone(), f.clone()]).unwrap()), f);
    }

    #[test]
    fn output_norm_is_the_max_and_order_does_not_matter(seed in 0u64..1000, k in 2usize..5) {
        let fields: Vec<_> = (0..k).map(|i| random_field([4, 4, 3], 3.0, seed * 10 + i as u64)).collect();
        let out = max_fuse(&ModalityFieldSet::unlabeled(fields.clone()).unwrap());
        let mut rev = fields.clone();
        rev.reverse();
        // continuous random vectors: ties have probability zero
        prop_assert_eq!(&out, &max_fuse(&ModalityFieldSet::unlabeled(rev).unwrap()));
        for (i, u) in out.vectors().iter().enumerate() {
            let best = fields.iter().map(|f| norm(f.vectors()[i])).fold(0.0, f64::max);
            prop_assert_eq!(norm(*u), best);
        }
    }
}
