mod common;

use mmv_core::cones::{ConeConstraint, ConeSpec};
use mmv_core::fio::{backward_markov, DiscreteFio, FioTable, FioValues, MarkovOptions, FIO_FORMAT_VERSION};
use mmv_core::market::{MarketModel, State};
use mmv_core::policy::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use std::sync::OnceLock;

/// A one-period, one-asset table with `k⁻ = 2`, `k⁺ = 1`, `d⁻ = 0.8`.
fn hand_table() -> FioTable {
    FioTable {
        format_version: FIO_FORMAT_VERSION,
        horizon: 1,
        n_assets: 1,
        cone: ConeSpec::default(),
        model: MarketModel::Markov(common::two_point_model(1.0)),
        master_seed: 0,
        samples: 2,
        values: FioValues::Discrete(DiscreteFio {
            d_minus: vec![vec![0.8]],
            d_plus: vec![vec![0.9]],
            k_minus: vec![vec![vec![2.0]]],
            k_plus: vec![vec![vec![1.0]]],
        }),
        cells: Vec::new(),
        warnings: Vec::new(),
        metadata: Default::default(),
    }
}

fn example_table() -> &'static FioTable {
    static TABLE: OnceLock<FioTable> = OnceLock::new();
    TABLE.get_or_init(|| {
        let opts = MarkovOptions {
            samples: 2000,
            seed: 1,
            ..Default::default()
        };
        backward_markov(&common::four_asset_model(), &common::four_asset_cone(), common::HORIZON, &opts).unwrap()
    })
}

#[test]
fn below_threshold_decision_by_hand() {
    let table = hand_table();
    // W* = ρ_0 x_0 + λ/d_0^- = 1 + 0.16/0.8 = 1.2.
    let policy = PrecommittedPolicy::new(&table, PolicyMode::Lambda(0.16), 1.0, State::Regime(0)).unwrap();
    assert!((policy.threshold() - 1.2).abs() < 1e-15);
    let d = policy.decide(0, 1.0, &State::Regime(0)).unwrap();
    assert!((d.pi[0] - 0.4).abs() < 1e-15);
    // Above the threshold the k⁺ branch applies: π = 1·(1.5 − 1.2).
    let up = policy.decide(0, 1.5, &State::Regime(0)).unwrap();
    assert!((up.pi[0] - 0.3).abs() < 1e-15);
}

#[test]
fn on_path_wealth_does_not_invest() {
    let table = hand_table();
    let policy = PrecommittedPolicy::new(&table, PolicyMode::Lambda(0.16), 1.0, State::Regime(0)).unwrap();
    assert_eq!(policy.decide(0, 1.2, &State::Regime(0)).unwrap().pi, vec![0.0]);
    let example = example_table();
    let p = PrecommittedPolicy::new(example, PolicyMode::Target(common::X_TARGET), 1.0, State::Regime(0)).unwrap();
    for t in 0..common::HORIZON {
        let x = p.threshold() / p.rho().at(t);
        assert!(p.decide(t, x, &State::Regime(1)).unwrap().pi.iter().all(|v| *v == 0.0));
    }
}

#[test]
fn infeasible_targets_are_rejected() {
    let table = hand_table();
    assert!(PrecommittedPolicy::new(&table, PolicyMode::Target(0.9), 1.0, State::Regime(0)).is_err());
    assert!(PrecommittedPolicy::new(&table, PolicyMode::Lambda(-1.0), 1.0, State::Regime(0)).is_err());
    let mut flat = hand_table();
    if let FioValues::Discrete(d) = &mut flat.values {
        d.d_minus[0][0] = 1.0;
    }
    assert!(PrecommittedPolicy::new(&flat, PolicyMode::Target(1.1), 1.0, State::Regime(0)).is_err());
}

#[test]
fn conditional_sharpe_uses_branch_value() {
    let table = hand_table();
    let policy = PrecommittedPolicy::new(&table, PolicyMode::Target(1.1), 1.0, State::Regime(0)).unwrap();
    let below = policy.conditional_sharpe(0, 1.0, &State::Regime(0)).unwrap();
    assert!((below - (0.2f64 / 0.8).sqrt()).abs() < 1e-15);
    let above = policy.conditional_sharpe(0, 1.2, &State::Regime(0)).unwrap();
    assert!((above - (0.1f64 / 0.9).sqrt()).abs() < 1e-15);
}

#[test]
fn target_and_lambda_modes_agree() {
    let table = example_table();
    let s0 = State::Regime(0);
    let target = PrecommittedPolicy::new(table, PolicyMode::Target(common::X_TARGET), 1.0, s0.clone()).unwrap();
    let lambda = lambda_star(common::X_TARGET, 1.0, target.rho().at(0), target.d0_minus()).unwrap();
    let by_lambda = PrecommittedPolicy::new(table, PolicyMode::Lambda(lambda), 1.0, s0).unwrap();
    assert!((target.threshold() - by_lambda.threshold()).abs() < 1e-14);
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
    for _ in 0..2000 {
        let t = rng.random_range(0..common::HORIZON);
        let x = rng.random_range(0.5..1.6);
        let s = State::Regime(rng.random_range(0..2));
        let a = target.decide(t, x, &s).unwrap();
        let b = by_lambda.decide(t, x, &s).unwrap();
        for (u, v) in a.pi.iter().zip(&b.pi) {
            assert!((u - v).abs() <= 1e-12, "t={t}, x={x}: {u} vs {v}");
        }
    }
}

#[test]
fn decisions_are_feasible() {
    let table = example_table();
    let cone = common::four_asset_cone();
    let policy = PrecommittedPolicy::new(table, PolicyMode::Target(common::X_TARGET), 1.0, State::Regime(0)).unwrap();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
    for _ in 0..10_000 {
        let t = rng.random_range(0..common::HORIZON);
        let x = rng.random_range(-1.0..3.0);
        let s = State::Regime(rng.random_range(0..2));
        let d = policy.decide(t, x, &s).unwrap();
        assert!(cone.is_feasible(&d.pi, 1e-8).unwrap());
    }
}

#[test]
fn below_threshold_at_start_follows_k_minus_direction() {
    let table = example_table();
    let policy = PrecommittedPolicy::new(table, PolicyMode::Target(common::X_TARGET), 1.0, State::Regime(0)).unwrap();
    let d = policy.decide(0, 1.0, &State::Regime(0)).unwrap();
    let k = &table.discrete().unwrap().k_minus[0][0];
    let scale = d.pi[1] / k[1];
    assert!(scale > 0.0);
    for (p, k) in d.pi.iter().zip(k) {
        assert!((p - scale * k).abs() < 1e-12);
    }
    assert_eq!((d.pi[0], d.pi[2]), (0.0, 0.0));
}

#[test]
fn threshold_is_never_crossed_when_exposures_stay_below_one() {
    // r'k⁻ ∈ {0.6, −0.2}: every path stays at or below W*.
    let model = common::two_point_model(1.01);
    let table = backward_markov(&model, &ConeConstraint::unconstrained(1), 3, &MarkovOptions::default()).unwrap();
    let policy = PrecommittedPolicy::new(&table, PolicyMode::Target(1.2), 1.0, State::Regime(0)).unwrap();
    let market = MarketModel::Markov(model);
    for path in market.enumerate_paths(&State::Regime(0), 3, 100).unwrap() {
        let mut x = 1.0;
        for t in 0..3 {
            assert!(policy.rho().at(t) * x <= policy.threshold() + 1e-12);
            let pi = policy.decide(t, x, &path.states[t]).unwrap().pi;
            x = 1.01 * x + path.returns[t][0] * pi[0];
        }
        assert!(x <= policy.threshold() + 1e-12);
    }
}

#[test]
fn csv_exports() {
    let mut buf = Vec::new();
    let points = efficient_frontier(0.8, 1.0, 1.0, &[1.0, 2.0]).unwrap();
    write_frontier_csv(&mut buf, &points).unwrap();
    assert_eq!(String::from_utf8(buf).unwrap(), "E,Var\n1,0\n2,4.000000000000001\n");
    let mut buf = Vec::new();
    write_decisions_csv(
        &mut buf,
        &[DecisionRow {
            t: 0,
            state: State::Factors(vec![0.5, -1.0]),
            wealth: 1.0,
            pi: vec![0.25, 0.0],
        }],
    )
    .unwrap();
    assert_eq!(String::from_utf8(buf).unwrap(), "t,state,wealth,pi_1,pi_2\n0,0.5;-1,1,0.25,0\n");
}

proptest! {
    #[test]
    fn decisions_scale_with_the_gap(x in -0.5..2.5f64, alpha in 0.01..20.0f64, t in 0usize..12, s in 0usize..2) {
        let table = example_table();
        let policy = PrecommittedPolicy::new(table, PolicyMode::Target(common::X_TARGET), 1.0, State::Regime(0)).unwrap();
        let r0 = common::RF;
        let offset = policy.threshold() / policy.rho().at(t + 1);
        let gap = r0 * x - offset;
        prop_assume!(gap.abs() > 1e-6);
        let scaled_x = (alpha * gap + offset) / r0;
        let state = State::Regime(s);
        let a = policy.decide(t, x, &state).unwrap();
        let b = policy.decide(t, scaled_x, &state).unwrap();
        prop_assert_eq!(a.branch, b.branch);
        for (u, v) in a.pi.iter().zip(&b.pi) {
            prop_assert!((alpha * u - v).abs() <= 1e-10 * (1.0 + v.abs()));
        }
    }
}
