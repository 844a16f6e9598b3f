mod support;

use musim_core::model::{make_masks, MaskSet};
use musim_core::{Condition, Dimension};

#[test]
fn full_preset_masks_partition_the_embedding() {
    let r = support::mask_algebra(3);
    assert_eq!(r.ones, [64; 4]);
    assert!(r.disjoint);
    assert_eq!(r.union, 256);
    assert!(r.max_decomposition_err < 1e-6);
}

#[test]
fn masks_are_contiguous_quarters_in_dimension_order() {
    let m = make_masks();
    for d in Dimension::ALL {
        let bits = &m.for_dimension(d).bits;
        let on: Vec<usize> = (0..256).filter(|&i| bits[i]).collect();
        assert_eq!(on, (64 * d.index()..64 * (d.index() + 1)).collect::<Vec<_>>());
        assert_eq!(m.for_condition(Condition::from(d)), m.for_dimension(d));
    }
    assert_eq!(m.for_condition(Condition::Track).ones(), 256);
    assert!(MaskSet::new(30).is_err());
}
