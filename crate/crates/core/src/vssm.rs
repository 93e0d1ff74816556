//! The variance-optimal signed supermartingale measure and the
//! time-consistency-in-efficiency conditions.
//!
//! Along a path the density is a product of one-period factors
//!
//! ```text
//! B_t = 1 − r_{t+1}ᵀk_t^-(s_t)   if Π_t ≥ 0
//! B_t = 1 + r_{t+1}ᵀk_t^+(s_t)   if Π_t < 0,        Π_0 = 1, Π_{t+1} = Π_t B_t
//! ```
//!
//! with `dP̃/dP = Π_T / d_0^-(s_0)` and
//! `E[dP̃/dP | F_t] = Π_t/d_0^- · d_t^{sign(Π_t)}(s_t)`.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{MmvError, Result};
use crate::fio::{Direction, FioTable};
use crate::linalg::dot;
use crate::market::{MarketPath, State};
use crate::seed;

/// Density factors and conditional expectations along one path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityPath {
    /// `B_0..B_{T-1}`.
    pub factors: Vec<f64>,
    /// `Π_0..Π_T`.
    pub products: Vec<f64>,
    /// `Π_T / d_0^-(s_0)`.
    pub density: f64,
    /// `E[dP̃/dP | F_t]` for `t = 0..T`.
    pub conditional: Vec<f64>,
    /// `r_{t+1}ᵀk_t^-(s_t)` for `t = 0..T-1`, whichever branch was used.
    pub minus_exposure: Vec<f64>,
    pub extrapolated: bool,
    pub weight: f64,
}

fn branch(product: f64) -> Direction {
    if product >= 0.0 {
        Direction::Minus
    } else {
        Direction::Plus
    }
}

/// Density factors of one path under a fitted table.
pub fn density_path(fio: &FioTable, path: &MarketPath) -> Result<DensityPath> {
    let horizon = fio.horizon;
    if path.horizon() != horizon || path.states.len() != horizon + 1 {
        return Err(MmvError::Domain(format!(
            "path has {} periods, table horizon is {horizon}",
            path.horizon()
        )));
    }
    let d0 = fio.d(0, &path.states[0], Direction::Minus)?;
    let mut extrapolated = d0.extrapolated;
    let mut factors = Vec::with_capacity(horizon);
    let mut products = Vec::with_capacity(horizon + 1);
    let mut conditional = Vec::with_capacity(horizon + 1);
    let mut minus_exposure = Vec::with_capacity(horizon);
    let mut prod = 1.0;
    for t in 0..=horizon {
        let s = &path.states[t];
        let dir = branch(prod);
        let d = fio
            .d(t, s, dir)
            .map_err(|e| e.in_cell(format!("(t={t})")))?;
        extrapolated |= d.extrapolated;
        products.push(prod);
        conditional.push(prod / d0.value * d.value);
        if t == horizon {
            break;
        }
        let r = &path.returns[t];
        let km = fio
            .k(t, s, Direction::Minus)
            .map_err(|e| e.in_cell(format!("(t={t})")))?;
        extrapolated |= km.extrapolated;
        let exposure = dot(r, &km.value);
        minus_exposure.push(exposure);
        let b = match dir {
            Direction::Minus => 1.0 - exposure,
            Direction::Plus => {
                let kp = fio
                    .k(t, s, Direction::Plus)
                    .map_err(|e| e.in_cell(format!("(t={t})")))?;
                1.0 + dot(r, &kp.value)
            }
        };
        factors.push(b);
        prod *= b;
    }
    Ok(DensityPath {
        factors,
        density: prod / d0.value,
        products,
        conditional,
        minus_exposure,
        extrapolated,
        weight: path.weight,
    })
}

/// Density paths for all market paths, evaluated in parallel.
pub fn density_paths(fio: &FioTable, paths: &[MarketPath]) -> Result<Vec<DensityPath>> {
    paths.par_iter().map(|p| density_path(fio, p)).collect()
}

/// A weighted mean and its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub mean: f64,
    /// Zero for exact enumerations.
    pub se: f64,
    pub n: usize,
}

/// Mean and standard error of `values` under probability weights. With
/// `exact` set the weights are path probabilities and `se` is zero.
fn estimate(values: &[f64], weights: &[f64], exact: bool) -> Estimate {
    let total: f64 = weights.iter().sum();
    let mean = values.iter().zip(weights).map(|(v, w)| v * w).sum::<f64>() / total;
    let n = values.len();
    let se = if exact || n < 2 {
        0.0
    } else {
        let var = values
            .iter()
            .zip(weights)
            .map(|(v, w)| w * (v - mean).powi(2))
            .sum::<f64>()
            / total;
        (var * n as f64 / (n - 1) as f64 / n as f64).sqrt()
    };
    Estimate { mean, se, n }
}

/// Groups paths by `(t, regime or 0, branch)` at time `t`.
fn bucket_of(state: &State, product: f64) -> (usize, Direction) {
    (state.regime().unwrap_or(0), branch(product))
}

/// Martingale property of the conditional-expectation process in one bucket.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IncrementCheck {
    pub t: usize,
    /// Regime index (0 for factor models).
    pub state: usize,
    pub branch: Direction,
    /// `E[E_{t+1} − E_t | bucket]`; zero for a martingale.
    pub increment: Estimate,
    pub passed: bool,
}

/// Supermartingale inequality `E[E_{t+1} rᵀπ | bucket] ≤ 0` for one
/// random feasible `π`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SupermartingaleCheck {
    pub t: usize,
    pub state: usize,
    pub branch: Direction,
    pub pi: Vec<f64>,
    pub value: Estimate,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MartingaleReport {
    pub n_paths: usize,
    pub exact: bool,
    pub mean_density: Estimate,
    pub mean_density_passed: bool,
    pub second_moment: Estimate,
    /// `1/d_0^-(s_0)`, the second moment of the density when no
    /// conditional expectation turns negative.
    pub second_moment_reference: f64,
    pub increments: Vec<IncrementCheck>,
    pub supermartingale: Vec<SupermartingaleCheck>,
    pub extrapolated_paths: usize,
}

impl MartingaleReport {
    pub fn all_passed(&self) -> bool {
        self.mean_density_passed
            && self.increments.iter().all(|c| c.passed)
            && self.supermartingale.iter().all(|c| c.passed)
    }
}

/// Random feasible directions tested per bucket.
const PANEL: usize = 5;
/// Absolute slack for exact enumerations (rounding only).
const EXACT_TOL: f64 = 1e-9;

fn within(est: &Estimate, target: f64, exact: bool) -> bool {
    let slack = if exact { EXACT_TOL } else { 3.0 * est.se + 1e-12 };
    (est.mean - target).abs() <= slack
}

fn at_most(est: &Estimate, bound: f64, exact: bool) -> bool {
    let slack = if exact { EXACT_TOL } else { 3.0 * est.se + 1e-12 };
    est.mean <= bound + slack
}

/// Paths to evaluate: the exact enumeration when it exists and `enumerate`
/// is set, otherwise Monte Carlo.
pub fn diagnostic_paths(
    fio: &FioTable,
    s0: &State,
    n_paths: usize,
    seed: u64,
    enumerate: bool,
) -> Result<(Vec<MarketPath>, bool)> {
    if enumerate {
        if let Ok(paths) = fio.model.enumerate_paths(s0, fio.horizon, n_paths.max(1)) {
            return Ok((paths, true));
        }
    }
    if n_paths < 100 {
        return Err(MmvError::Domain(format!(
            "at least 100 paths are needed for Monte Carlo diagnostics, got {n_paths}"
        )));
    }
    Ok((fio.model.simulate_paths(s0, fio.horizon, n_paths, seed)?, false))
}

/// Mean-one, martingale-increment and supermartingale checks on the
/// density process of `fio` from `s0`. Discrete regime markets with at
/// most `n_paths` paths are enumerated exactly.
pub fn martingale_checks(
    fio: &FioTable,
    s0: &State,
    n_paths: usize,
    seed: u64,
) -> Result<MartingaleReport> {
    let (paths, exact) = diagnostic_paths(fio, s0, n_paths, seed, true)?;
    let dens = density_paths(fio, &paths)?;
    let weights: Vec<f64> = dens.iter().map(|d| d.weight).collect();
    let densities: Vec<f64> = dens.iter().map(|d| d.density).collect();
    let squares: Vec<f64> = densities.iter().map(|d| d * d).collect();
    let mean_density = estimate(&densities, &weights, exact);
    let second_moment = estimate(&squares, &weights, exact);
    let d0 = fio.d(0, s0, Direction::Minus)?.value;

    type Key = (usize, usize, u8);
    let mut increments: BTreeMap<Key, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    let mut members: BTreeMap<Key, Vec<usize>> = BTreeMap::new();
    for (p, d) in dens.iter().enumerate() {
        for t in 0..fio.horizon {
            let (state, br) = bucket_of(&paths[p].states[t], d.products[t]);
            let key = (t, state, br as u8);
            let entry = increments.entry(key).or_default();
            entry.0.push(d.conditional[t + 1] - d.conditional[t]);
            entry.1.push(d.weight);
            members.entry(key).or_default().push(p);
        }
    }
    let direction_of = |b: u8| if b == 0 { Direction::Minus } else { Direction::Plus };
    let increments: Vec<IncrementCheck> = increments
        .into_iter()
        .map(|((t, state, b), (v, w))| {
            let increment = estimate(&v, &w, exact);
            IncrementCheck {
                t,
                state,
                branch: direction_of(b),
                passed: within(&increment, 0.0, exact),
                increment,
            }
        })
        .collect();

    let cone = fio.cone()?;
    let mut supermartingale = Vec::new();
    for ((t, state, b), idx) in &members {
        let mut rng = seed::rng(seed::child_seed(
            seed,
            &[seed::tag::PANEL, *t as u64, *state as u64, *b as u64],
        ));
        for _ in 0..PANEL {
            let mut pi = cone.random_feasible(&mut rng)?;
            let norm = pi.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 0.0 {
                pi.iter_mut().for_each(|v| *v /= norm);
            }
            let (v, w): (Vec<f64>, Vec<f64>) = idx
                .iter()
                .map(|&p| {
                    (
                        dens[p].conditional[t + 1] * dot(&paths[p].returns[*t], &pi),
                        dens[p].weight,
                    )
                })
                .unzip();
            let value = estimate(&v, &w, exact);
            supermartingale.push(SupermartingaleCheck {
                t: *t,
                state: *state,
                branch: direction_of(*b),
                passed: at_most(&value, 0.0, exact),
                pi,
                value,
            });
        }
    }

    Ok(MartingaleReport {
        n_paths: paths.len(),
        exact,
        mean_density_passed: within(&mean_density, 1.0, exact),
        mean_density,
        second_moment,
        second_moment_reference: 1.0 / d0,
        increments,
        supermartingale,
        extrapolated_paths: dens.iter().filter(|d| d.extrapolated).count(),
    })
}

/// Which sufficient condition for time consistency in efficiency holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TcieVerdict {
    /// Every conditional expectation of the density is nonnegative.
    Condition33,
    /// Wherever the conditional expectation first turns negative, the
    /// running product stays constant afterwards.
    Condition34,
    Neither,
}

/// One path on which the conditional expectation turned negative.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub path: usize,
    /// First `t` with `E[dP̃/dP | F_t] < 0`.
    pub first_negative: usize,
    /// `Π_t` is unchanged for every `t ≥ first_negative`.
    pub constant_after: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TcieReport {
    pub n_paths: usize,
    pub exact: bool,
    /// Share of `(path, t)` cells with a nonnegative conditional expectation.
    pub nonnegative_fraction: f64,
    /// Per period, share of paths with `r_{t+1}ᵀk_t^-(s_t) ≤ 1`.
    pub exposure_within_one: Vec<f64>,
    pub all_exposures_within_one: bool,
    pub verdict: TcieVerdict,
    pub tcie: bool,
    /// Number of violating paths per first-negative time `0..=T`.
    pub first_negative_counts: Vec<usize>,
    /// Violating paths (at most [`MAX_LISTED`]).
    pub violations: Vec<Violation>,
    pub violating_paths: usize,
    pub extrapolated_paths: usize,
}

/// Cap on the violations listed in a report.
pub const MAX_LISTED: usize = 100;

/// Classifies the density process of `fio` from `s0` against the two
/// sufficient TCIE conditions. Signs are exact: no tolerance is applied.
pub fn check_tcie(fio: &FioTable, s0: &State, n_paths: usize, seed: u64) -> Result<TcieReport> {
    let (paths, exact) = diagnostic_paths(fio, s0, n_paths, seed, true)?;
    let dens = density_paths(fio, &paths)?;
    Ok(classify(fio.horizon, &dens, exact))
}

/// Builds the report from evaluated density paths. Fractions are
/// probability-weighted for exact enumerations.
pub fn classify(horizon: usize, dens: &[DensityPath], exact: bool) -> TcieReport {
    let total: f64 = dens.iter().map(|d| d.weight).sum();
    let mut nonneg = 0.0;
    let mut within_one = vec![0.0; horizon];
    let mut counts = vec![0usize; horizon + 1];
    let mut violations = Vec::new();
    let mut violating = 0usize;
    let mut all_constant = true;
    let mut all_within = true;
    for (p, d) in dens.iter().enumerate() {
        nonneg += d.weight * d.conditional.iter().filter(|c| **c >= 0.0).count() as f64
            / d.conditional.len() as f64;
        for (t, e) in d.minus_exposure.iter().enumerate() {
            if *e <= 1.0 {
                within_one[t] += d.weight;
            } else {
                all_within = false;
            }
        }
        if let Some(tau) = d.conditional.iter().position(|c| *c < 0.0) {
            let constant_after = d.products[tau..].iter().all(|v| *v == d.products[tau]);
            all_constant &= constant_after;
            counts[tau] += 1;
            violating += 1;
            if violations.len() < MAX_LISTED {
                violations.push(Violation {
                    path: p,
                    first_negative: tau,
                    constant_after,
                });
            }
        }
    }
    let verdict = if violating == 0 {
        TcieVerdict::Condition33
    } else if all_constant {
        TcieVerdict::Condition34
    } else {
        TcieVerdict::Neither
    };
    TcieReport {
        n_paths: dens.len(),
        exact,
        nonnegative_fraction: nonneg / total,
        exposure_within_one: within_one.iter().map(|w| w / total).collect(),
        all_exposures_within_one: all_within,
        verdict,
        tcie: verdict != TcieVerdict::Neither,
        first_negative_counts: counts,
        violations,
        violating_paths: violating,
        extrapolated_paths: dens.iter().filter(|d| d.extrapolated).count(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn path(factors: &[f64]) -> DensityPath {
        let mut products = vec![1.0];
        for b in factors {
            products.push(products.last().unwrap() * b);
        }
        DensityPath {
            factors: factors.to_vec(),
            conditional: products.clone(),
            density: *products.last().unwrap(),
            products,
            minus_exposure: factors.iter().map(|b| 1.0 - b).collect(),
            extrapolated: false,
            weight: 1.0,
        }
    }

    #[test]
    fn classification_by_sign_pattern() {
        let ok = classify(2, &[path(&[0.5, 1.2]), path(&[1.5, 0.9])], true);
        assert_eq!(ok.verdict, TcieVerdict::Condition33);
        assert_eq!(ok.nonnegative_fraction, 1.0);

        let stopped = classify(2, &[path(&[-0.5, 1.0]), path(&[0.5, 1.0])], true);
        assert_eq!(stopped.verdict, TcieVerdict::Condition34);
        assert_eq!(stopped.first_negative_counts, vec![0, 1, 0]);

        let moving = classify(2, &[path(&[-0.5, 2.0])], true);
        assert_eq!(moving.verdict, TcieVerdict::Neither);
        assert!(!moving.tcie);
    }

    #[test]
    fn weighted_estimate() {
        let e = estimate(&[0.5, 1.5], &[0.5, 0.5], true);
        assert_eq!(e.mean, 1.0);
        assert_eq!(e.se, 0.0);
        let mc = estimate(&[0.0, 2.0], &[0.5, 0.5], false);
        assert!((mc.se - 1.0).abs() < 1e-12);
    }
}
