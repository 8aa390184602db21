mod common;

use rand::Rng;
use scunetpp_core::metrics::{dsc, hd95, BinaryMask, HdMode};

#[test]
fn random_pairs_match_bruteforce() {
    let mut r = common::rng(42);
    let mut undefined = 0;
    for _ in 0..500 {
        let (h, w) = (r.gen_range(1..=32), r.gen_range(1..=32));
        let (da, db) = (r.gen_range(0.0..0.5), r.gen_range(0.0..0.5));
        let x = common::random_mask(h, w, da, &mut r);
        let y = common::random_mask(h, w, db, &mut r);
        assert_eq!(dsc(&x, &y).unwrap(), common::dsc_bruteforce(&x, &y));
        if x.is_empty() || y.is_empty() {
            assert!(hd95(&x, &y, HdMode::Percentile).is_err());
            undefined += 1;
            continue;
        }
        let p = hd95(&x, &y, HdMode::Percentile).unwrap();
        assert!((p - common::hd95_percentile_bruteforce(&x, &y)).abs() < 1e-9);
        let max = common::hausdorff_bruteforce(&x, &y);
        assert_eq!(hd95(&x, &y, HdMode::PaperScaled).unwrap(), 0.95 * max);
        assert!(p <= max);
    }
    assert!(undefined < 100);
}

#[test]
fn sparse_masks_far_apart() {
    let mut r = common::rng(7);
    for _ in 0..100 {
        let x = common::random_mask(32, 32, 0.01, &mut r);
        let y = common::random_mask(32, 32, 0.02, &mut r);
        if x.is_empty() || y.is_empty() {
            continue;
        }
        let p = hd95(&x, &y, HdMode::Percentile).unwrap();
        assert!((p - common::hd95_percentile_bruteforce(&x, &y)).abs() < 1e-9);
    }
}

#[test]
fn three_four_five() {
    let x = BinaryMask::from_fn(5, 5, |r, c| (r, c) == (0, 0));
    let y = BinaryMask::from_fn(5, 5, |r, c| (r, c) == (3, 4));
    assert_eq!(hd95(&x, &y, HdMode::Percentile).unwrap(), 5.0);
    assert_eq!(hd95(&x, &y, HdMode::PaperScaled).unwrap(), 4.75);
    assert_eq!(dsc(&x, &y).unwrap(), 0.0);
}
