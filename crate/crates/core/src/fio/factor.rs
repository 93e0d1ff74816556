use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{
    clamp_warnings, record, solve_cell, CellRecord, CellSamples, ContinuousFio, ContinuousStep,
    Direction, FioCellInput, FioTable, FioValues, Lookup, SolverOptions, FIO_FORMAT_VERSION,
};
use crate::approximator::{fit, FitConfig, TargetKind};
use crate::cones::ConeConstraint;
use crate::error::{MmvError, Result};
use crate::market::{LinearFactorModel, MarketModel, State};
use crate::seed;

/// How `k_t^±` is obtained at states off the grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KMode {
    /// Evaluate fitted functions of the state (projected back onto the cone).
    Fit,
    /// Re-solve the cell at the state using the fitted `d_{t+1}`.
    #[default]
    Resolve,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FactorOptions {
    /// Scenarios per grid point.
    pub samples: usize,
    pub seed: u64,
    pub solver: SolverOptions,
    pub fit: FitConfig,
    pub k_mode: KMode,
    /// Scenarios used when re-solving `k` off the grid; defaults to `samples`.
    pub resolve_samples: Option<usize>,
    /// Validation errors above this threshold are reported as warnings.
    pub validation_warn: f64,
}

impl Default for FactorOptions {
    fn default() -> Self {
        Self {
            samples: 1000,
            seed: 0,
            solver: SolverOptions::default(),
            fit: FitConfig::default(),
            k_mode: KMode::Resolve,
            resolve_samples: None,
            validation_warn: 1e-3,
        }
    }
}

fn state_hash(s: &[f64]) -> u64 {
    seed::child_seed(0, &s.iter().map(|v| v.to_bits()).collect::<Vec<_>>())
}

/// Cell samples at factor state `s` for time `t`: `L` joint draws of
/// `(s_{t+1}, r_{t+1})` with next-period values from the fitted step `t+1`.
fn factor_cell_samples(
    model: &MarketModel,
    next: Option<&ContinuousStep>,
    t: usize,
    s: &[f64],
    samples: usize,
    seed: u64,
) -> Result<CellSamples> {
    let scen = model.sample_scenarios(t, &State::Factors(s.to_vec()), samples, seed)?;
    let mut dm = Vec::with_capacity(scen.len());
    let mut dp = Vec::with_capacity(scen.len());
    for l in 0..scen.len() {
        match next {
            None => {
                dm.push(1.0);
                dp.push(1.0);
            }
            Some(step) => {
                let s_next = scen.next_state(l);
                let e = step.d.evaluate(s_next.factors().expect("factor state"))?;
                dm.push(e.value[0]);
                dp.push(e.value[1]);
            }
        }
    }
    CellSamples::uniform(scen.n_assets, scen.returns, dm, dp)
}

/// Backward recursion for the linear factor model over a grid of states.
/// At each step both cells are solved at every grid point (in parallel),
/// then `(d⁻, d⁺)` are fitted as functions of the state, and in [`KMode::Fit`]
/// so are `k⁻` and `k⁺`.
pub fn backward_factor(
    model: &LinearFactorModel,
    cone: &ConeConstraint,
    horizon: usize,
    grid: &[Vec<f64>],
    opts: &FactorOptions,
) -> Result<FioTable> {
    if horizon == 0 {
        return Err(MmvError::Domain("horizon must be at least 1".into()));
    }
    if grid.len() < 2 {
        return Err(MmvError::Domain("the state grid needs at least two points".into()));
    }
    if let Some(bad) = grid.iter().position(|g| g.len() != model.n_factors()) {
        return Err(MmvError::Domain(format!(
            "grid point {bad} has dimension {}, model has {} factors",
            grid[bad].len(),
            model.n_factors()
        )));
    }
    if cone.dim() != model.n_assets() {
        return Err(MmvError::Domain("cone dimension does not match the asset count".into()));
    }
    opts.fit.validate()?;
    crate::market::CumulativeRiskFree::new(model.risk_free(), horizon)?;
    let market = MarketModel::Factor(model.clone());
    let mut steps: Vec<Option<ContinuousStep>> = vec![None; horizon];
    let mut cells: Vec<CellRecord> = Vec::new();
    let mut warnings = Vec::new();

    for t in (0..horizon).rev() {
        let next = steps.get(t + 1).and_then(|s| s.as_ref());
        let solved: Vec<Result<[(Vec<f64>, CellRecord); 2]>> = grid
            .par_iter()
            .enumerate()
            .map(|(g, s)| {
                let samples = factor_cell_samples(
                    &market,
                    next,
                    t,
                    s,
                    opts.samples,
                    seed::scenario_seed(opts.seed, t, g),
                )?;
                let solve = |direction: Direction| -> Result<(Vec<f64>, CellRecord)> {
                    let input = FioCellInput {
                        samples: &samples,
                        cone,
                        direction,
                    };
                    let solver = SolverOptions {
                        seed: seed::child_seed(
                            opts.seed,
                            &[seed::tag::MULTISTART, t as u64, g as u64, direction as u64],
                        ),
                        ..opts.solver.clone()
                    };
                    let out = solve_cell(&input, &solver).map_err(|e| {
                        e.in_cell(format!("(t={t}, grid point={g}, {})", direction.label()))
                    })?;
                    let rec = record(t, g, direction, &out, &samples);
                    Ok((out.k_star, rec))
                };
                Ok([solve(Direction::Minus)?, solve(Direction::Plus)?])
            })
            .collect();
        let mut grid_d_minus = Vec::with_capacity(grid.len());
        let mut grid_d_plus = Vec::with_capacity(grid.len());
        let mut grid_k_minus = Vec::with_capacity(grid.len());
        let mut grid_k_plus = Vec::with_capacity(grid.len());
        for result in solved {
            let [(km, rm), (kp, rp)] = result?;
            grid_d_minus.push(rm.d);
            grid_d_plus.push(rp.d);
            grid_k_minus.push(km);
            grid_k_plus.push(kp);
            cells.push(rm);
            cells.push(rp);
        }
        let fit_cfg = FitConfig {
            seed: seed::child_seed(opts.fit.seed, &[seed::tag::GRID, t as u64]),
            ..opts.fit.clone()
        };
        let d_targets: Vec<Vec<f64>> = grid_d_minus
            .iter()
            .zip(&grid_d_plus)
            .map(|(a, b)| vec![*a, *b])
            .collect();
        let d = fit(grid, &d_targets, TargetKind::Fio, &fit_cfg)?;
        if d.validation_error > opts.validation_warn {
            warnings.push(format!(
                "t={t}: d fit validation error {:.3e} exceeds {:.1e}",
                d.validation_error, opts.validation_warn
            ));
        }
        let (k_minus, k_plus) = match opts.k_mode {
            KMode::Resolve => (None, None),
            KMode::Fit => (
                Some(fit(grid, &grid_k_minus, TargetKind::Allocation, &fit_cfg)?),
                Some(fit(grid, &grid_k_plus, TargetKind::Allocation, &fit_cfg)?),
            ),
        };
        log::debug!("t={t}: d fit validation error {:.3e}", d.validation_error);
        steps[t] = Some(ContinuousStep {
            d,
            k_minus,
            k_plus,
            grid_d_minus,
            grid_d_plus,
            grid_k_minus,
            grid_k_plus,
        });
    }
    cells.sort_by_key(|c| (c.t, c.node, c.direction as u8));
    warnings.extend(clamp_warnings(&cells));
    Ok(FioTable {
        format_version: FIO_FORMAT_VERSION,
        horizon,
        n_assets: model.n_assets(),
        cone: cone.spec(),
        model: market,
        master_seed: opts.seed,
        samples: opts.samples,
        values: FioValues::Continuous(ContinuousFio {
            grid: grid.to_vec(),
            k_mode: opts.k_mode,
            resolve_samples: opts.resolve_samples.unwrap_or(opts.samples),
            solver: opts.solver.clone(),
            steps: steps.into_iter().map(|s| s.expect("every step fitted")).collect(),
        }),
        cells,
        warnings,
        metadata: Default::default(),
    })
}

/// Re-solved or fitted `k_t^±(s)` for a continuous table.
pub(super) fn continuous_k(
    table: &FioTable,
    t: usize,
    state: &State,
    direction: Direction,
) -> Result<Lookup<Vec<f64>>> {
    let FioValues::Continuous(c) = &table.values else {
        unreachable!("continuous table expected")
    };
    let s = state.factors().ok_or_else(|| {
        MmvError::Domain(format!("state {state:?} is not a factor vector (t={t})"))
    })?;
    table.model.validate_state(state)?;
    let step = &c.steps[t];
    let extrapolated = step.d.evaluate(s)?.extrapolated;
    if let Some(g) = c.grid.iter().position(|p| p.as_slice() == s) {
        return Ok(Lookup {
            value: match direction {
                Direction::Minus => step.grid_k_minus[g].clone(),
                Direction::Plus => step.grid_k_plus[g].clone(),
            },
            extrapolated: false,
        });
    }
    let cone = table.cone()?;
    let value = match c.k_mode {
        KMode::Fit => {
            let f = match direction {
                Direction::Minus => step.k_minus.as_ref(),
                Direction::Plus => step.k_plus.as_ref(),
            }
            .ok_or_else(|| MmvError::Domain("table has no fitted k functions".into()))?;
            cone.project_nearest(&f.evaluate(s)?.value)?
        }
        KMode::Resolve => {
            let samples = factor_cell_samples(
                &table.model,
                c.steps.get(t + 1),
                t,
                s,
                c.resolve_samples,
                seed::child_seed(table.master_seed, &[seed::tag::RESOLVE, t as u64, state_hash(s)]),
            )?;
            let input = FioCellInput {
                samples: &samples,
                cone: &cone,
                direction,
            };
            let solver = SolverOptions {
                seed: seed::child_seed(
                    table.master_seed,
                    &[seed::tag::RESOLVE, t as u64, state_hash(s), direction as u64],
                ),
                ..c.solver.clone()
            };
            solve_cell(&input, &solver)
                .map_err(|e| e.in_cell(format!("(t={t}, state={s:?}, {})", direction.label())))?
                .k_star
        }
    };
    Ok(Lookup {
        value,
        extrapolated,
    })
}
