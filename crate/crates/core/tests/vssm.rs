mod common;

use mmv_core::cones::ConeConstraint;
use mmv_core::fio::{backward_markov, FioTable, MarkovOptions};
use mmv_core::market::{MarketModel, MarkovChainModel, ReturnLaw, RiskFree, State};
use mmv_core::vssm::*;
use nalgebra::DVector;

fn one_asset_law(outcomes: &[f64], probs: &[f64]) -> ReturnLaw {
    ReturnLaw::discrete(
        outcomes.iter().map(|r| DVector::from_vec(vec![*r])).collect(),
        probs.to_vec(),
    )
    .unwrap()
}

fn fit(model: &MarkovChainModel, cone: &ConeConstraint, horizon: usize) -> FioTable {
    backward_markov(model, cone, horizon, &MarkovOptions::default()).unwrap()
}

/// Heavy right tail: the long position that is optimal on average loses
/// more than the whole shifted wealth in the best outcome.
fn tail_market() -> MarkovChainModel {
    MarkovChainModel::iid(one_asset_law(&[1.0, 0.1, -0.05], &[0.1, 0.6, 0.3]), RiskFree::Constant(1.0)).unwrap()
}

#[test]
fn binomial_densities_by_hand() {
    let model = common::two_point_model(1.0);
    let table = fit(&model, &ConeConstraint::unconstrained(1), 1);
    let market = MarketModel::Markov(model);
    let paths = market.enumerate_paths(&State::Regime(0), 1, 10).unwrap();
    let dens: Vec<f64> = paths.iter().map(|p| density_path(&table, p).unwrap().density).collect();
    // k⁻ = 2, d⁻ = 0.8: (1 − 0.6)/0.8 and (1 + 0.2)/0.8.
    assert!((dens[0] - 0.5).abs() < 1e-12);
    assert!((dens[1] - 1.5).abs() < 1e-12);
    let report = martingale_checks(&table, &State::Regime(0), 100, 0).unwrap();
    assert!(report.exact);
    assert!((report.mean_density.mean - 1.0).abs() < 1e-12);
    assert!((report.second_moment.mean - 1.25).abs() < 1e-12);
    assert!((report.second_moment_reference - 1.25).abs() < 1e-12);
    assert!(report.all_passed());
    let tcie = check_tcie(&table, &State::Regime(0), 100, 0).unwrap();
    assert_eq!(tcie.verdict, TcieVerdict::Condition33);
    assert!(tcie.tcie);
}

#[test]
fn zero_mean_market_has_unit_density() {
    let model = MarkovChainModel::iid(one_asset_law(&[0.1, -0.1], &[0.5, 0.5]), RiskFree::Constant(1.0)).unwrap();
    let table = fit(&model, &ConeConstraint::nonnegative(1), 3);
    let report = martingale_checks(&table, &State::Regime(0), 100, 0).unwrap();
    assert_eq!(report.mean_density.mean, 1.0);
    assert_eq!(report.second_moment.mean, 1.0);
    assert!(report.increments.iter().all(|c| c.increment.mean == 0.0));
    assert!(report.all_passed());
    let tcie = check_tcie(&table, &State::Regime(0), 100, 0).unwrap();
    assert_eq!(tcie.verdict, TcieVerdict::Condition33);
    assert_eq!(tcie.nonnegative_fraction, 1.0);
}

#[test]
fn terminal_conditional_expectation_is_the_density() {
    let model = common::two_point_model(1.002);
    let table = fit(&model, &ConeConstraint::nonnegative(1), 3);
    let market = MarketModel::Markov(model);
    for path in market.enumerate_paths(&State::Regime(0), 3, 100).unwrap() {
        let d = density_path(&table, &path).unwrap();
        assert_eq!(d.conditional[3], d.density);
        assert_eq!(d.conditional[0], 1.0);
        assert_eq!(d.products[3] / table.discrete().unwrap().d_minus[0][0], d.density);
    }
}

#[test]
fn heavy_tail_market_stops_at_first_negative_time() {
    let model = tail_market();
    let table = fit(&model, &ConeConstraint::nonnegative(1), 2);
    let fio = table.discrete().unwrap();
    let (k0, k1, kp1) = (fio.k_minus[0][0][0], fio.k_minus[1][0][0], fio.k_plus[1][0][0]);
    assert!(k0 > 1.0 && k1 > 1.0);
    assert_eq!(kp1, 0.0);

    // Enumeration oracle: running products and first sign change per path.
    let outcomes = [1.0, 0.1, -0.05];
    let mut expected_counts = vec![0usize; 3];
    for r1 in outcomes {
        for r2 in outcomes {
            let p1 = 1.0 - r1 * k0;
            let p2 = if p1 >= 0.0 { p1 * (1.0 - r2 * k1) } else { p1 * (1.0 + r2 * kp1) };
            if p1 < 0.0 {
                expected_counts[1] += 1;
            } else if p2 < 0.0 {
                expected_counts[2] += 1;
            }
        }
    }
    assert_eq!(expected_counts, vec![0, 3, 2]);

    let report = check_tcie(&table, &State::Regime(0), 100, 0).unwrap();
    assert_eq!(report.verdict, TcieVerdict::Condition34);
    assert!(report.tcie);
    assert_eq!(report.first_negative_counts, expected_counts);
    assert!(report.violations.iter().all(|v| v.constant_after));
    assert!(!report.all_exposures_within_one);
    assert!((report.exposure_within_one[0] - 0.9).abs() < 1e-12);
}

#[test]
fn exposure_and_sign_conditions_are_equivalent() {
    for (model, cone) in [
        (tail_market(), ConeConstraint::nonnegative(1)),
        (common::two_point_model(1.0), ConeConstraint::unconstrained(1)),
    ] {
        let table = fit(&model, &cone, 2);
        let report = check_tcie(&table, &State::Regime(0), 100, 0).unwrap();
        assert_eq!(report.all_exposures_within_one, report.verdict == TcieVerdict::Condition33);
    }
}

#[test]
fn monte_carlo_density_has_mean_one() {
    let model = common::four_asset_model();
    let opts = MarkovOptions {
        samples: 2000,
        seed: 3,
        ..Default::default()
    };
    let table = backward_markov(&model, &common::four_asset_cone(), 4, &opts).unwrap();
    let report = martingale_checks(&table, &State::Regime(0), 20_000, 8).unwrap();
    assert!(!report.exact);
    assert!(report.mean_density_passed, "{:?}", report.mean_density);
    let tcie = check_tcie(&table, &State::Regime(0), 20_000, 8).unwrap();
    assert!((0.0..=1.0).contains(&tcie.nonnegative_fraction));
    assert!(tcie.exposure_within_one.iter().all(|f| (0.0..=1.0).contains(f)));
    let json = serde_json::to_string(&tcie).unwrap();
    assert!(json.contains("\"verdict\""));
}

#[test]
fn too_few_monte_carlo_paths_are_rejected() {
    let table = backward_markov(
        &common::four_asset_model(),
        &common::four_asset_cone(),
        1,
        &MarkovOptions {
            samples: 200,
            ..Default::default()
        },
    )
    .unwrap();
    assert!(check_tcie(&table, &State::Regime(0), 50, 0).is_err());
}
