//! Acceptance suite. Prints one `PASS`/`FAIL` line per criterion and exits
//! non-zero if any criterion fails.

mod common;

use std::time::Instant;

use mmv_core::backtest::{cost_sweep, rollout, stats, CostModel};
use mmv_core::cones::ConeConstraint;
use mmv_core::fio::*;
use mmv_core::market::{LinearFactorModel, MarketModel, MarkovChainModel, ReturnLaw, RiskFree, State};
use mmv_core::policy::{sharpe_from_d, PolicyMode, PrecommittedPolicy};
use mmv_core::vssm::{check_tcie, martingale_checks, TcieVerdict};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        passed,
        detail: detail.into(),
    }
}

fn example_options() -> MarkovOptions {
    MarkovOptions {
        samples: 10_000,
        seed: 1,
        ..Default::default()
    }
}

fn example_table() -> FioTable {
    backward_markov(&common::four_asset_model(), &common::four_asset_cone(), common::HORIZON, &example_options()).unwrap()
}

fn one_asset_law(outcomes: &[f64], probs: &[f64]) -> ReturnLaw {
    ReturnLaw::discrete(outcomes.iter().map(|r| DVector::from_vec(vec![*r])).collect(), probs.to_vec()).unwrap()
}

fn four_asset_reference(table: &FioTable, seconds: f64) -> Outcome {
    let d = table.discrete().unwrap();
    let checks = [
        ("d0-(S1)", d.d_minus[0][0], 0.32),
        ("d0+(S1)", d.d_plus[0][0], 0.38),
        ("d0-(S2)", d.d_minus[0][1], 0.40),
        ("d11-(S1)", d.d_minus[11][0], 0.82),
        ("d11-(S2)", d.d_minus[11][1], 0.99),
    ];
    let mut passed = seconds < 600.0;
    let mut parts = Vec::new();
    for (name, got, want) in checks {
        passed &= (got - want).abs() <= 0.03;
        parts.push(format!("{name}={got:.3} (ref {want})"));
    }
    let k = &d.k_minus[0][0];
    let support: Vec<usize> = (0..4).filter(|i| k[*i] > 1e-9).map(|i| i + 1).collect();
    passed &= support == [2, 4] && (k[1] - 1.33).abs() <= 0.15 && (k[3] - 0.55).abs() <= 0.15;
    parts.push(format!("k0-(S1)=({:.3}, {:.3}, {:.3}, {:.3})", k[0], k[1], k[2], k[3]));
    parts.push(format!("fit {seconds:.1}s"));
    outcome(passed, parts.join(", "))
}

fn factor_table() -> FioTable {
    let model = LinearFactorModel::new(
        DVector::from_vec(vec![0.004, 0.006]),
        DMatrix::from_row_slice(2, 1, &[0.03, -0.02]),
        DMatrix::from_element(1, 1, 0.3),
        DMatrix::from_row_slice(2, 2, &[0.0025, 0.0005, 0.0005, 0.0036]),
        DMatrix::from_element(1, 1, 0.01),
        RiskFree::Constant(1.001),
    )
    .unwrap();
    let grid: Vec<Vec<f64>> = (0..21).map(|i| vec![-0.3 + 0.03 * i as f64]).collect();
    let opts = FactorOptions {
        samples: 2000,
        seed: 6,
        ..Default::default()
    };
    backward_factor(&model, &ConeConstraint::nonnegative(2), 4, &grid, &opts).unwrap()
}

fn bounds_and_submartingale(tables: &[(&str, &FioTable)]) -> Outcome {
    let mut passed = true;
    let mut parts = Vec::new();
    for (name, table) in tables {
        let bounds = table.bounds_hold();
        let violations = table.submartingale_violations();
        let worst = violations
            .iter()
            .map(|c| (c.d - c.next_mean) / c.next_se.max(f64::MIN_POSITIVE))
            .fold(0.0, f64::max);
        passed &= bounds && violations.is_empty();
        parts.push(format!(
            "{name}: bounds {}, {} of {} cells violate (worst {worst:.1} SE, directions {:?})",
            if bounds { "ok" } else { "broken" },
            violations.len(),
            table.cells.len(),
            violations.iter().map(|c| c.direction.label()).collect::<std::collections::BTreeSet<_>>(),
        ));
    }
    outcome(passed, parts.join("; "))
}

fn riccati_equivalence() -> Outcome {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2024);
    let mut worst_d: f64 = 0.0;
    let mut worst_k: f64 = 0.0;
    for instance in 0..20 {
        let horizon = rng.random_range(1..=4);
        let n = rng.random_range(1..=3);
        let m = rng.random_range(1..=3);
        let model = common::random_markov(m, n, 100 + instance);
        let opts = MarkovOptions {
            samples: 300,
            seed: 500 + instance,
            ..Default::default()
        };
        let table = backward_markov(&model, &ConeConstraint::unconstrained(n), horizon, &opts).unwrap();
        let (rd, rk) = riccati_markov(&model, horizon, &opts).unwrap();
        let d = table.discrete().unwrap();
        for t in 0..horizon {
            for i in 0..m {
                worst_d = worst_d.max((d.d_minus[t][i] - rd[t][i]).abs());
                for (a, b) in d.k_minus[t][i].iter().zip(&rk[t][i]) {
                    worst_k = worst_k.max((a - b).abs() / b.abs().max(1.0));
                }
            }
        }
    }
    outcome(
        worst_d <= 1e-6 && worst_k <= 1e-6,
        format!("20 instances, max |Δd| = {worst_d:.1e}, max relative |Δk| = {worst_k:.1e}"),
    )
}

fn small_enumeration() -> Outcome {
    let model = common::two_point_model(1.0);
    let opts = MarkovOptions::default();
    let mut passed = true;
    let mut parts = Vec::new();
    for (cone, lo) in [(ConeConstraint::unconstrained(1), -5.0), (ConeConstraint::nonnegative(1), 0.0)] {
        let table = backward_markov(&model, &cone, 2, &opts).unwrap();
        let d = table.discrete().unwrap();
        for t in 0..2 {
            let (next_m, next_p) = if t == 0 {
                (d.d_minus[1].clone(), d.d_plus[1].clone())
            } else {
                (vec![1.0], vec![1.0])
            };
            let samples = markov_cell_samples(&model, t, 0, &next_m, &next_p, &opts).unwrap();
            for direction in [Direction::Minus, Direction::Plus] {
                let input = FioCellInput {
                    samples: &samples,
                    cone: &cone,
                    direction,
                };
                let out = solve_cell(&input, &SolverOptions::default()).unwrap();
                let (k, v) = common::grid_minimize(|k| saa_objective(&input, &[k]).unwrap(), lo, 5.0, 1e-4);
                let ok = (out.k_star[0] - k).abs() <= 1e-3 && (out.d_star - v).abs() <= 1e-6;
                passed &= ok;
                if !ok {
                    parts.push(format!("t={t} {direction:?}: k {} vs {k}, d {} vs {v}", out.k_star[0], out.d_star));
                }
            }
        }
        let report = martingale_checks(&table, &State::Regime(0), 100, 0).unwrap();
        let exact = report.exact
            && (report.mean_density.mean - 1.0).abs() <= 1e-12
            && (report.second_moment.mean - report.second_moment_reference).abs() <= 1e-12;
        passed &= exact;
        parts.push(format!(
            "{}: E[density] = {}, E[density^2] = {} (1/d0- = {})",
            if lo < 0.0 { "unconstrained" } else { "long-only" },
            report.mean_density.mean,
            report.second_moment.mean,
            report.second_moment_reference
        ));
    }
    outcome(passed, format!("8 cells checked against the grid oracle; {}", parts.join("; ")))
}

fn policy_identities(table: &FioTable, market: &MarketModel) -> Outcome {
    let s0 = State::Regime(0);
    let zero = PrecommittedPolicy::new(table, PolicyMode::Lambda(0.0), common::X0, s0.clone()).unwrap();
    let paths = rollout(&zero, market, 10_000, 1).unwrap();
    let benchmark = zero.rho().at(0) * common::X0;
    let first = paths[0].terminal();
    let flat = paths.iter().all(|p| p.terminal() == first)
        && (first - benchmark).abs() <= 1e-14
        && stats(&paths, market, None).unwrap().gross.std == 0.0;

    let policy = PrecommittedPolicy::new(table, PolicyMode::Target(common::X_TARGET), common::X0, s0).unwrap();
    let paths = rollout(&policy, market, 100_000, 7).unwrap();
    let s = stats(&paths, market, None).unwrap().gross;
    let n = paths.len() as f64;
    let mean_se = s.std / n.sqrt();
    let mean_ok = (s.mean - common::X_TARGET).abs() <= 3.0 * mean_se;

    let var = s.std * s.std;
    let m4 = paths.iter().map(|p| (p.terminal() - s.mean).powi(4)).sum::<f64>() / n;
    let var_se = ((m4 - var * var) / n).sqrt();
    let var_ref = policy.optimum().variance;
    let var_ok = (var - var_ref).abs() <= (0.05 * var_ref).max(3.0 * var_se);

    let sharpe_ref = sharpe_from_d(policy.d0_minus());
    let sharpe_se = s.sharpe_se.unwrap_or(f64::NAN);
    let sharpe_ok = (s.sharpe - sharpe_ref).abs() <= 3.0 * sharpe_se;
    outcome(
        flat && mean_ok && var_ok && sharpe_ok,
        format!(
            "lambda=0 flat: {flat}; E[x_T] = {:.5} ± {mean_se:.5} (target {}); Var = {var:.6} ± {var_se:.6} (frontier {var_ref:.6}); Sharpe = {:.4} ± {sharpe_se:.4} (ref {sharpe_ref:.4})",
            s.mean,
            common::X_TARGET,
            s.sharpe
        ),
    )
}

fn gradient_check() -> Outcome {
    let mut worst: f64 = 0.0;
    let mut evaluated = 0;
    for (instance, direction) in [(0u64, Direction::Minus), (1, Direction::Plus), (2, Direction::Minus), (3, Direction::Plus)] {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(instance);
        let (n, l) = (3, 60);
        let returns: Vec<f64> = (0..l * n).map(|_| rng.random_range(-0.4..0.5)).collect();
        let dm: Vec<f64> = (0..l).map(|_| rng.random_range(0.2..1.0)).collect();
        let dp: Vec<f64> = (0..l).map(|_| rng.random_range(0.2..1.0)).collect();
        let samples = CellSamples::uniform(n, returns, dm, dp).unwrap();
        let cone = ConeConstraint::unconstrained(n);
        let input = FioCellInput {
            samples: &samples,
            cone: &cone,
            direction,
        };
        let mut points = 0;
        while points < 100 {
            let k: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
            let near_kink = (0..l).any(|i| {
                let e: f64 = samples.return_at(i).iter().zip(&k).map(|(a, b)| a * b).sum();
                (e.abs() - 1.0).abs() < 1e-4
            });
            if near_kink {
                continue;
            }
            let g = saa_gradient(&input, &k).unwrap();
            let h = 1e-6;
            let fd: Vec<f64> = (0..n)
                .map(|j| {
                    let mut up = k.clone();
                    let mut dn = k.clone();
                    up[j] += h;
                    dn[j] -= h;
                    (saa_objective(&input, &up).unwrap() - saa_objective(&input, &dn).unwrap()) / (2.0 * h)
                })
                .collect();
            let err = g.iter().zip(&fd).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            let scale = g.iter().map(|a| a * a).sum::<f64>().sqrt().max(1e-3);
            worst = worst.max(err / scale);
            points += 1;
            evaluated += 1;
        }
    }
    outcome(worst < 1e-6, format!("{evaluated} points on 4 instances, max relative error {worst:.1e}"))
}

fn tcie() -> Outcome {
    let zero_mean = MarkovChainModel::iid(one_asset_law(&[0.1, -0.1], &[0.5, 0.5]), RiskFree::Constant(1.0)).unwrap();
    let table = backward_markov(&zero_mean, &ConeConstraint::nonnegative(1), 3, &MarkovOptions::default()).unwrap();
    let a = check_tcie(&table, &State::Regime(0), 1000, 0).unwrap();

    let binomial = common::two_point_model(1.0);
    let table = backward_markov(&binomial, &ConeConstraint::unconstrained(1), 2, &MarkovOptions::default()).unwrap();
    let b = check_tcie(&table, &State::Regime(0), 1000, 0).unwrap();

    // Heavy right tail: the best outcome pushes r'k⁻ above one.
    let outcomes = [1.0, 0.1, -0.05];
    let tail = MarkovChainModel::iid(one_asset_law(&outcomes, &[0.1, 0.6, 0.3]), RiskFree::Constant(1.0)).unwrap();
    let table = backward_markov(&tail, &ConeConstraint::nonnegative(1), 2, &MarkovOptions::default()).unwrap();
    let c = check_tcie(&table, &State::Regime(0), 1000, 0).unwrap();
    let fio = table.discrete().unwrap();
    let (k0, k1, kp1) = (fio.k_minus[0][0][0], fio.k_minus[1][0][0], fio.k_plus[1][0][0]);
    let mut expected = vec![0usize; 3];
    for r1 in outcomes {
        for r2 in outcomes {
            let p1 = 1.0 - r1 * k0;
            let p2 = if p1 >= 0.0 { p1 * (1.0 - r2 * k1) } else { p1 * (1.0 + r2 * kp1) };
            if p1 < 0.0 {
                expected[1] += 1;
            } else if p2 < 0.0 {
                expected[2] += 1;
            }
        }
    }
    let passed = a.verdict == TcieVerdict::Condition33
        && b.verdict == TcieVerdict::Condition33
        && b.tcie
        && c.verdict == TcieVerdict::Condition34
        && c.first_negative_counts == expected
        && c.violations.iter().all(|v| v.constant_after);
    outcome(
        passed,
        format!(
            "zero-mean {:?}; binomial {:?} (tcie {}); violating {:?} with first-negative counts {:?} (enumerated {:?})",
            a.verdict, b.verdict, b.tcie, c.verdict, c.first_negative_counts, expected
        ),
    )
}

fn regime_awareness(table: &FioTable, market: &MarketModel) -> Outcome {
    let model = common::four_asset_model();
    let iid = backward_markov(&model.iid_mixture().unwrap(), &common::four_asset_cone(), common::HORIZON, &example_options()).unwrap();
    let s0 = State::Regime(0);
    let aware_d = table.discrete().unwrap().d_minus[0][0];
    let iid_d = iid.discrete().unwrap().d_minus[0][0];
    let realized = |t: &FioTable| {
        let p = PrecommittedPolicy::new(t, PolicyMode::Target(common::X_TARGET), common::X0, s0.clone()).unwrap();
        let paths = rollout(&p, market, 100_000, 11).unwrap();
        let s = stats(&paths, market, None).unwrap().gross;
        (s.sharpe, s.sharpe_se.unwrap_or(f64::NAN))
    };
    let (aware_sr, aware_se) = realized(table);
    let (iid_sr, iid_se) = realized(&iid);
    outcome(
        sharpe_from_d(aware_d) > sharpe_from_d(iid_d) && aware_sr > iid_sr + 3.0 * (aware_se + iid_se),
        format!(
            "frontier slope regime-aware {:.3} vs i.i.d. mixture {:.3}; realized Sharpe in the regime market {aware_sr:.3} ± {aware_se:.3} vs {iid_sr:.3} ± {iid_se:.3}",
            sharpe_from_d(aware_d),
            sharpe_from_d(iid_d)
        ),
    )
}

fn cost_smoke(market: &MarketModel) -> Outcome {
    let model = common::four_asset_model();
    let fit_for = |q: usize| {
        let cone = ConeConstraint::intersection(vec![
            ConeConstraint::nonnegative(4),
            ConeConstraint::cardinality(4, q)?,
        ])?;
        backward_markov(
            &model,
            &cone,
            4,
            &MarkovOptions {
                samples: 1000,
                seed: 1,
                ..Default::default()
            },
        )
    };
    let free = CostModel {
        alpha0: 0.0,
        alpha1: 0.0,
        q: 1,
    };
    let qs = [1, 2, 3, 4];
    let rows = cost_sweep(&qs, fit_for, PolicyMode::Target(1.05), 1.0, &State::Regime(0), market, &free, 5000, 3).unwrap();
    let identical = rows.iter().all(|r| r.stats.net.as_ref() == Some(&r.stats.gross));
    let paid = CostModel {
        alpha0: 0.002,
        alpha1: 0.0002,
        q: 1,
    };
    let rows = cost_sweep(&qs, fit_for, PolicyMode::Target(1.05), 1.0, &State::Regime(0), market, &paid, 5000, 3).unwrap();
    let sharpes: Vec<String> = rows
        .iter()
        .map(|r| format!("q={}: {:.3}", r.q, r.stats.net.as_ref().unwrap().sharpe))
        .collect();
    let completed = rows.len() == qs.len() && rows.iter().all(|r| r.stats.net.as_ref().is_some_and(|n| n.sharpe.is_finite()));
    outcome(
        identical && completed,
        format!("zero rates give identical statistics: {identical}; with-cost Sharpe {}", sharpes.join(", ")),
    )
}

fn main() {
    let mut results: Vec<(u32, &str, Outcome)> = Vec::new();
    let start = Instant::now();
    let table = example_table();
    let seconds = start.elapsed().as_secs_f64();
    let market = MarketModel::Markov(common::four_asset_model());
    results.push((1, "four-asset reference values", four_asset_reference(&table, seconds)));
    let factor = factor_table();
    results.push((2, "FIO bounds and submartingale", bounds_and_submartingale(&[("markov", &table), ("factor", &factor)])));
    results.push((3, "Riccati equivalence", riccati_equivalence()));
    results.push((4, "exact small-instance enumeration", small_enumeration()));
    results.push((5, "policy identities", policy_identities(&table, &market)));
    results.push((6, "gradient check", gradient_check()));
    results.push((7, "TCIE diagnostics", tcie()));
    results.push((8, "regime-aware frontier slope", regime_awareness(&table, &market)));
    results.push((9, "cost-sweep smoke test", cost_smoke(&market)));

    let failed = results.iter().filter(|(_, _, o)| !o.passed).count();
    for (id, name, o) in &results {
        println!("criterion {id} {}: {name}: {}", if o.passed { "PASS" } else { "FAIL" }, o.detail);
    }
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
