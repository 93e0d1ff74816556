#![allow(dead_code)]

use mmv_core::cones::ConeConstraint;
use mmv_core::market::{MarkovChainModel, ReturnLaw, RiskFree};
use nalgebra::{DMatrix, DVector};

pub const RF: f64 = 1.003;
pub const HORIZON: usize = 12;
pub const X0: f64 = 1.0;
pub const X_TARGET: f64 = 1.178;

/// Four assets, two regimes ("good" S1 and "bad" S2), quarterly periods.
pub fn four_asset_model() -> MarkovChainModel {
    let c1 = DVector::from_vec(vec![0.167, 0.157, 0.057, 0.147]);
    let c2 = DVector::from_vec(vec![-0.193, -0.063, -0.073, -0.113]);
    let s1 = DMatrix::from_row_slice(
        4,
        4,
        &[
            3.06, 0.12, 0.15, 0.47, 0.12, 3.19, 0.32, 0.27, 0.15, 0.32, 1.30, 0.41, 0.47, 0.27,
            0.41, 2.22,
        ],
    ) * 1e-2;
    let s2 = DMatrix::from_row_slice(
        4,
        4,
        &[
            4.88, 0.36, 1.16, 1.94, 0.36, 3.69, 0.69, 0.64, 1.16, 0.69, 2.57, 1.41, 1.94, 0.64,
            1.41, 5.80,
        ],
    ) * 1e-2;
    MarkovChainModel::gaussian(
        DMatrix::from_row_slice(2, 2, &[0.7, 0.3, 0.4, 0.6]),
        vec![c1, c2],
        vec![s1, s2],
        RiskFree::Constant(RF),
    )
    .unwrap()
}

/// No shorting and at most two active assets.
pub fn four_asset_cone() -> ConeConstraint {
    ConeConstraint::intersection(vec![
        ConeConstraint::nonnegative(4),
        ConeConstraint::cardinality(4, 2).unwrap(),
    ])
    .unwrap()
}

/// One asset with excess return 0.3 or -0.1, equally likely, i.i.d.
pub fn two_point_model(risk_free: f64) -> MarkovChainModel {
    MarkovChainModel::iid(
        ReturnLaw::discrete(
            vec![DVector::from_vec(vec![0.3]), DVector::from_vec(vec![-0.1])],
            vec![0.5, 0.5],
        )
        .unwrap(),
        RiskFree::Constant(risk_free),
    )
    .unwrap()
}

/// Minimizes `f` over `[lo, hi]` on a uniform grid with the given step.
pub fn grid_minimize(f: impl Fn(f64) -> f64, lo: f64, hi: f64, step: f64) -> (f64, f64) {
    let n = ((hi - lo) / step).round() as usize;
    (0..=n)
        .map(|i| lo + i as f64 * step)
        .map(|k| (k, f(k)))
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .unwrap()
}

/// A random Gaussian regime-switching market with `m` regimes and `n`
/// assets whose covariances are well conditioned.
pub fn random_markov(m: usize, n: usize, seed: u64) -> MarkovChainModel {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let transition = {
        let mut p = DMatrix::from_fn(m, m, |_, _| rng.random_range(0.1..1.0));
        for i in 0..m {
            let s = p.row(i).sum();
            for j in 0..m {
                p[(i, j)] /= s;
            }
        }
        p
    };
    let means = (0..m)
        .map(|_| DVector::from_fn(n, |_, _| rng.random_range(-0.05..0.1)))
        .collect();
    let covs = (0..m)
        .map(|_| {
            let a = DMatrix::from_fn(n, n, |_, _| rng.random_range(-0.1..0.1));
            &a * a.transpose() + DMatrix::identity(n, n) * 0.01
        })
        .collect();
    MarkovChainModel::gaussian(transition, means, covs, RiskFree::Constant(1.001)).unwrap()
}
