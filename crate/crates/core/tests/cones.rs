use mmv_core::cones::{ConeConstraint, ConeSpec, DEFAULT_ENUMERATION_CAP};
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn vector(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-3.0..3.0f64, n)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn linear_cone() -> ConeConstraint {
    // Long the first asset at least as much as the second is short, and a
    // budget-like row.
    ConeConstraint::linear(DMatrix::from_row_slice(2, 3, &[1.0, 1.0, 0.0, 0.5, -1.0, 1.0])).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn nonnegative_projection_clips(v in vector(4)) {
        let c = ConeConstraint::nonnegative(4);
        let p = c.project_convex(&v).unwrap();
        for (pi, vi) in p.iter().zip(&v) {
            prop_assert!((pi - vi.max(0.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn linear_projection_is_optimal(v in vector(3), seed in any::<u64>()) {
        let c = linear_cone();
        let p = c.project_convex(&v).unwrap();
        prop_assert!(c.is_feasible(&p, 1e-9).unwrap());
        let resid: Vec<f64> = v.iter().zip(&p).map(|(a, b)| a - b).collect();
        // Moreau: the residual is orthogonal to the projection and lies in
        // the polar cone.
        prop_assert!(dot(&resid, &p).abs() < 1e-9);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..10 {
            let y = c.random_feasible(&mut rng).unwrap();
            prop_assert!(dot(&resid, &y) <= 1e-9);
        }
    }

    #[test]
    fn feasibility_is_scale_invariant(v in vector(4), alpha in 0.01..100.0f64) {
        let c = ConeConstraint::intersection(vec![
            ConeConstraint::nonnegative(4),
            ConeConstraint::cardinality(4, 2).unwrap(),
        ]).unwrap();
        let scaled: Vec<f64> = v.iter().map(|x| x * alpha).collect();
        prop_assert_eq!(c.is_feasible(&v, 0.0).unwrap(), c.is_feasible(&scaled, 0.0).unwrap());
    }

    #[test]
    fn nearest_point_beats_every_support(v in vector(4)) {
        let c = ConeConstraint::intersection(vec![
            ConeConstraint::nonnegative(4),
            ConeConstraint::cardinality(4, 2).unwrap(),
        ]).unwrap();
        let p = c.project_nearest(&v).unwrap();
        prop_assert!(c.is_feasible(&p, 1e-12).unwrap());
        let dist = |x: &[f64]| x.iter().zip(&v).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
        // Brute force: keep the two largest positive coordinates.
        let mut best = v.iter().map(|x| x.max(0.0)).collect::<Vec<_>>();
        let mut order: Vec<usize> = (0..4).collect();
        order.sort_by(|a, b| best[*b].total_cmp(&best[*a]));
        for &i in &order[2..] {
            best[i] = 0.0;
        }
        prop_assert!((dist(&p) - dist(&best)).abs() < 1e-12);
    }

    #[test]
    fn nonnegative_polar_is_the_negative_orthant(y in vector(4)) {
        let c = ConeConstraint::nonnegative(4);
        prop_assert_eq!(c.in_polar(&y, 0.0).unwrap(), y.iter().all(|v| *v <= 0.0));
    }

    #[test]
    fn random_feasible_points_are_feasible(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cones = [
            ConeConstraint::unconstrained(3),
            ConeConstraint::nonnegative(3),
            linear_cone(),
            ConeConstraint::intersection(vec![linear_cone(), ConeConstraint::cardinality(3, 1).unwrap()]).unwrap(),
        ];
        for c in &cones {
            let pi = c.random_feasible(&mut rng).unwrap();
            prop_assert!(c.is_feasible(&pi, 1e-9).unwrap());
        }
    }
}

#[test]
fn supports_are_ordered_by_size() {
    let c = ConeConstraint::cardinality(5, 3).unwrap();
    let supports = c.enumerate_supports(DEFAULT_ENUMERATION_CAP).unwrap();
    assert_eq!(supports.len(), 5 + 10 + 10);
    assert!(supports.windows(2).all(|w| w[0].len() <= w[1].len()));
}

#[test]
fn cardinality_projection_is_rejected() {
    let c = ConeConstraint::cardinality(3, 1).unwrap();
    assert!(c.project_convex(&[1.0, 2.0, 3.0]).is_err());
}

#[test]
fn cone_spec_parses_from_json() {
    let spec: ConeSpec = serde_json::from_str(r#"{"nonnegative": true, "cardinality": 2}"#).unwrap();
    let c = spec.build(4).unwrap();
    assert_eq!(c.cardinality_bound(), Some(2));
    assert!(c.is_feasible(&[0.0, 1.0, 0.0, 2.0], 0.0).unwrap());
    assert!(!c.is_feasible(&[1.0, 1.0, 0.0, 2.0], 0.0).unwrap());
    assert!(!c.is_feasible(&[0.0, -1.0, 0.0, 0.0], 0.0).unwrap());
    assert!(serde_json::from_str::<ConeSpec>(r#"{"nonnegativ": true}"#).is_err());
}
