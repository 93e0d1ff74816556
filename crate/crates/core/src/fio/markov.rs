use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{
    clamp_warnings, record, solve_cell, CellRecord, CellSamples, Direction, DiscreteFio,
    FioCellInput, FioTable, FioValues, SolverOptions, FIO_FORMAT_VERSION,
};
use crate::cones::ConeConstraint;
use crate::error::{MmvError, Result};
use crate::market::{MarketModel, MarkovChainModel};
use crate::seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MarkovOptions {
    /// Scenarios drawn per regime and time step.
    pub samples: usize,
    pub seed: u64,
    pub solver: SolverOptions,
    /// Use the exact outcome list of discrete regime laws instead of draws.
    pub exact_discrete: bool,
}

impl Default for MarkovOptions {
    fn default() -> Self {
        Self {
            samples: 10_000,
            seed: 0,
            solver: SolverOptions::default(),
            exact_discrete: true,
        }
    }
}

/// Per-regime weighted return samples for one time step.
pub(crate) struct RegimeSets {
    n_assets: usize,
    sets: Vec<(Vec<f64>, Vec<f64>)>,
}

impl RegimeSets {
    /// Draws the scenario set of every regime at time `t` from its own
    /// seed `(master, t, regime)`.
    pub(crate) fn draw(model: &MarkovChainModel, t: usize, opts: &MarkovOptions) -> Self {
        let sets = (0..model.n_states())
            .map(|j| {
                let mut rng = seed::rng(seed::scenario_seed(opts.seed, t, j));
                model.law(j).sample_set(opts.samples, opts.exact_discrete, &mut rng)
            })
            .collect();
        Self {
            n_assets: model.n_assets(),
            sets,
        }
    }
}

/// Cell samples for origin regime `origin`: the union of the per-regime
/// sets weighted by `P[origin, j]`, each carrying `d^±_{t+1}(j)`.
pub fn markov_cell_samples(
    model: &MarkovChainModel,
    t: usize,
    origin: usize,
    d_minus_next: &[f64],
    d_plus_next: &[f64],
    opts: &MarkovOptions,
) -> Result<CellSamples> {
    let sets = RegimeSets::draw(model, t, opts);
    cell_samples(model, &sets, origin, d_minus_next, d_plus_next)
}

fn cell_samples(
    model: &MarkovChainModel,
    sets: &RegimeSets,
    origin: usize,
    d_minus_next: &[f64],
    d_plus_next: &[f64],
) -> Result<CellSamples> {
    let mut returns = Vec::new();
    let mut weights = Vec::new();
    let mut dm = Vec::new();
    let mut dp = Vec::new();
    for (j, (r, w)) in sets.sets.iter().enumerate() {
        let p = model.transition()[(origin, j)];
        if p == 0.0 {
            continue;
        }
        returns.extend_from_slice(r);
        weights.extend(w.iter().map(|w| w * p));
        dm.extend(std::iter::repeat_n(d_minus_next[j], w.len()));
        dp.extend(std::iter::repeat_n(d_plus_next[j], w.len()));
    }
    let total: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|w| *w /= total);
    CellSamples::new(sets.n_assets, returns, weights, dm, dp)
}

fn solver_for(opts: &MarkovOptions, t: usize, node: usize, direction: Direction) -> SolverOptions {
    SolverOptions {
        seed: seed::child_seed(
            opts.seed,
            &[seed::tag::MULTISTART, t as u64, node as u64, direction as u64],
        ),
        ..opts.solver.clone()
    }
}

/// Backward recursion for a regime-switching market. Each time step draws
/// one scenario set per regime, shared by every origin regime and by both
/// directions; cells of one step are solved in parallel.
pub fn backward_markov(
    model: &MarkovChainModel,
    cone: &ConeConstraint,
    horizon: usize,
    opts: &MarkovOptions,
) -> Result<FioTable> {
    if horizon == 0 {
        return Err(MmvError::Domain("horizon must be at least 1".into()));
    }
    if opts.samples == 0 {
        return Err(MmvError::Domain("sample count must be at least 1".into()));
    }
    if cone.dim() != model.n_assets() {
        return Err(MmvError::Domain("cone dimension does not match the asset count".into()));
    }
    crate::market::CumulativeRiskFree::new(model.risk_free(), horizon)?;
    let m = model.n_states();
    let n = model.n_assets();
    let mut d_minus = vec![vec![1.0; m]; horizon];
    let mut d_plus = vec![vec![1.0; m]; horizon];
    let mut k_minus = vec![vec![vec![0.0; n]; m]; horizon];
    let mut k_plus = vec![vec![vec![0.0; n]; m]; horizon];
    let mut cells: Vec<CellRecord> = Vec::new();
    let mut next_minus = vec![1.0; m];
    let mut next_plus = vec![1.0; m];

    for t in (0..horizon).rev() {
        let sets = RegimeSets::draw(model, t, opts);
        let jobs: Vec<(usize, Direction)> = (0..m)
            .flat_map(|i| [(i, Direction::Minus), (i, Direction::Plus)])
            .collect();
        let solved: Vec<Result<(usize, Direction, Vec<f64>, CellRecord)>> = jobs
            .par_iter()
            .map(|&(i, direction)| {
                let samples = cell_samples(model, &sets, i, &next_minus, &next_plus)?;
                let input = FioCellInput {
                    samples: &samples,
                    cone,
                    direction,
                };
                let out = solve_cell(&input, &solver_for(opts, t, i, direction))
                    .map_err(|e| e.in_cell(format!("(t={t}, state={i}, {})", direction.label())))?;
                let rec = record(t, i, direction, &out, &samples);
                Ok((i, direction, out.k_star, rec))
            })
            .collect();
        for result in solved {
            let (i, direction, k, rec) = result?;
            match direction {
                Direction::Minus => {
                    d_minus[t][i] = rec.d;
                    k_minus[t][i] = k;
                }
                Direction::Plus => {
                    d_plus[t][i] = rec.d;
                    k_plus[t][i] = k;
                }
            }
            cells.push(rec);
        }
        next_minus = d_minus[t].clone();
        next_plus = d_plus[t].clone();
        log::debug!("t={t}: d- = {next_minus:?}, d+ = {next_plus:?}");
    }
    cells.sort_by_key(|c| (c.t, c.node, c.direction as u8));
    let warnings = clamp_warnings(&cells);
    Ok(FioTable {
        format_version: FIO_FORMAT_VERSION,
        horizon,
        n_assets: n,
        cone: cone.spec(),
        model: MarketModel::Markov(model.clone()),
        master_seed: opts.seed,
        samples: opts.samples,
        values: FioValues::Discrete(DiscreteFio {
            d_minus,
            d_plus,
            k_minus,
            k_plus,
        }),
        cells,
        warnings,
        metadata: Default::default(),
    })
}

/// Closed-form unconstrained cell: with `d⁻_{t+1} = d⁺_{t+1} = d` the
/// objective is the quadratic `Σ w d (1 − rᵀk)²`, minimized by the weighted
/// normal equations. Returns `(d_t, k⁻_t)`; the Plus solution is `−k⁻_t`.
///
/// Equivalently `d_t = Ê[d]·(1 − Ê^Q[r]ᵀ Ê^Q[r rᵀ]⁻¹ Ê^Q[r])` with `Q`
/// reweighting the samples by `d / Ê[d]`.
pub fn riccati_cell(samples: &CellSamples) -> Result<(f64, Vec<f64>)> {
    let n = samples.n_assets();
    let mut mass = 0.0;
    let mut mean = DVector::zeros(n);
    let mut second = DMatrix::zeros(n, n);
    for l in 0..samples.len() {
        let w = samples.weights()[l] * samples.d_minus()[l];
        let r = DVector::from_column_slice(samples.return_at(l));
        mass += w;
        mean += &r * w;
        second += &r * r.transpose() * w;
    }
    let mean_q = mean / mass;
    let second_q = second / mass;
    let chol = second_q.clone().cholesky().ok_or_else(|| {
        MmvError::Numerical("weighted second-moment matrix is singular".into())
    })?;
    let k = chol.solve(&mean_q);
    let d = mass * (1.0 - mean_q.dot(&k));
    Ok((d, k.iter().cloned().collect()))
}

/// The unconstrained recursion evaluated in closed form on exactly the
/// scenario sets `backward_markov` draws for the same options.
/// Returns `(d[t][state], k⁻[t][state])`.
#[allow(clippy::type_complexity)]
pub fn riccati_markov(
    model: &MarkovChainModel,
    horizon: usize,
    opts: &MarkovOptions,
) -> Result<(Vec<Vec<f64>>, Vec<Vec<Vec<f64>>>)> {
    let m = model.n_states();
    let mut d = vec![vec![1.0; m]; horizon];
    let mut k = vec![vec![Vec::new(); m]; horizon];
    let mut next = vec![1.0; m];
    for t in (0..horizon).rev() {
        let sets = RegimeSets::draw(model, t, opts);
        for i in 0..m {
            let samples = cell_samples(model, &sets, i, &next, &next)?;
            let (di, ki) =
                riccati_cell(&samples).map_err(|e| e.in_cell(format!("(t={t}, state={i})")))?;
            d[t][i] = di;
            k[t][i] = ki;
        }
        next = d[t].clone();
    }
    Ok((d, k))
}
