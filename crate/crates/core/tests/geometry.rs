use proptest::prelude::*;

use tempscale_core::geometry::{
    aggregate, error_prone_class, geometry_of, normalize_range, population_variance, shift_of, BoxStats,
};
use tempscale_core::softmax::Probabilities;

proptest! {
    /// Dyadic inputs with power-of-two scales and dyadic offsets keep every
    /// intermediate exact, so the invariance holds bit for bit.
    #[test]
    fn normalization_is_affine_invariant(
        raw in prop::collection::vec(-1024i32..1024, 2..20),
        k in -8i32..8,
        offset in -64i32..64,
    ) {
        let v: Vec<f64> = raw.iter().map(|&r| f64::from(r) / 16.0).collect();
        prop_assume!(v.iter().any(|&a| a != v[0]));
        let a = 2f64.powi(k);
        let w: Vec<f64> = v.iter().map(|x| a * x + f64::from(offset)).collect();
        let n = normalize_range(&v).unwrap();
        prop_assert_eq!(&n, &normalize_range(&w).unwrap());
        prop_assert!(n.iter().all(|x| (0.0..=1.0).contains(x)));
        prop_assert!(n.contains(&0.0) && n.contains(&1.0));
    }

    #[test]
    fn distances_and_cosines_are_bounded(
        f in prop::collection::vec(-5.0f64..5.0, 4),
        w in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 4), 2..6),
    ) {
        prop_assume!(f.iter().any(|v| v.abs() > 1e-6) && w.iter().all(|r| r.iter().any(|v| v.abs() > 1e-6)));
        let g = geometry_of(&f, &w, 0).unwrap();
        prop_assert!(g.cosines.iter().all(|c| (-1.0..=1.0).contains(c)));
        prop_assert!(g.distances.iter().all(|d| *d >= 0.0));
    }

    #[test]
    fn box_stats_are_ordered(v in prop::collection::vec(-100.0f64..100.0, 1..50)) {
        let b = BoxStats::of(&v).unwrap();
        prop_assert!(b.min <= b.q1 && b.q1 <= b.median && b.median <= b.q3 && b.q3 <= b.max);
        prop_assert!(b.min <= b.mean && b.mean <= b.max);
    }
}

#[test]
fn variance_hand_oracle() {
    assert_eq!(population_variance(&[2.0, 4.0, 4.0, 4.0, 5.0, 5.0, 7.0, 9.0]), 4.0);
    assert_eq!(population_variance(&[3.0]), 0.0);
    let b = BoxStats::of(&[1.0, 2.0, 3.0, 4.0]).unwrap();
    assert_eq!((b.q1, b.median, b.q3, b.mean), (1.75, 2.5, 3.25, 2.5));
}

#[test]
fn degenerate_inputs_are_errors() {
    assert!(normalize_range(&[1.0, 1.0]).is_err());
    assert!(geometry_of(&[0.0, 0.0], &[vec![1.0, 0.0], vec![0.0, 1.0]], 0).is_err());
    assert!(BoxStats::of(&[]).is_err());
}

#[test]
fn hand_geometry() {
    let g = geometry_of(&[3.0, 4.0], &[vec![3.0, 4.0], vec![-4.0, 3.0], vec![0.0, 8.0]], 0).unwrap();
    assert_eq!(g.distances, vec![0.0, 50f64.sqrt(), 5.0]);
    assert_eq!(g.cosines[0], 1.0);
    assert_eq!(g.cosines[1], 0.0);
    assert!((g.cosines[2] - 0.8).abs() < 1e-15);
}

#[test]
fn shifts_and_error_prone_class() {
    let p = Probabilities::new(vec![0.5, 0.2, 0.3]).unwrap();
    assert_eq!(error_prone_class(&p, 0), 2);
    assert_eq!(error_prone_class(&p, 2), 0);
    let r = shift_of(vec![3.0, 1.0, 2.0], vec![1.0, 1.5, 4.0], 0).unwrap();
    assert_eq!(r.error_prone, 2);
    assert_eq!(r.delta, vec![-2.0, 0.5, 2.0]);
    assert_eq!((r.target_delta, r.error_prone_delta), (-2.0, 2.0));
    let s = aggregate(&[r]).unwrap();
    assert_eq!(s.mean_target_delta, -2.0);
    assert_eq!(s.mean_abs_delta, 1.5);
}
