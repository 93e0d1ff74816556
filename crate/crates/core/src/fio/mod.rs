//! Future-investment-opportunity (FIO) processes.
//!
//! `d_t^-(s)`, `d_t^+(s)` and their minimizers `k_t^-(s)`, `k_t^+(s)` solve
//!
//! ```text
//! d_t^-(s) = min_{k ∈ A} E[(1 − rᵀk)² (d⁻_{t+1} 1{rᵀk ≤ 1} + d⁺_{t+1} 1{rᵀk > 1}) | s]
//! d_t^+(s) = min_{k ∈ A} E[(1 + rᵀk)² (d⁻_{t+1} 1{rᵀk ≥ −1} + d⁺_{t+1} 1{rᵀk < −1}) | s]
//! ```
//!
//! backwards from `d_T^± = 1`, with expectations replaced by sample averages.
//! Regime-switching markets give a discrete table over states; factor
//! models give fitted functions of the state.

mod cell;
mod factor;
mod markov;

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use cell::{
    saa_gradient, saa_objective, solve_cell, CellSamples, Direction, FioCellInput, FioCellOutput,
    SolveDiagnostics, SolverOptions,
};
pub use factor::{backward_factor, FactorOptions, KMode};
pub use markov::{backward_markov, markov_cell_samples, riccati_cell, riccati_markov, MarkovOptions};

use crate::approximator::FittedFunction;
use crate::cones::{ConeConstraint, ConeSpec};
use crate::error::{MmvError, Result};
use crate::market::{MarketModel, State};

/// Version of the serialized table layout.
pub const FIO_FORMAT_VERSION: u32 = 1;

/// Lower clamp applied to stored `d` values.
pub const D_MIN: f64 = 1e-9;

/// Clamping by more than this is reported in the diagnostics.
const CLAMP_REPORT: f64 = 1e-6;

/// Diagnostics of one solved cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellRecord {
    pub t: usize,
    /// State index (regime models) or grid point index (factor models).
    pub node: usize,
    pub direction: Direction,
    /// Objective value before clamping.
    pub d_raw: f64,
    pub d: f64,
    /// Set when clamping moved `d` by more than `1e-6`.
    pub clamped: bool,
    /// Sample mean of the next-period value of the same direction, and its
    /// standard error.
    pub next_mean: f64,
    pub next_se: f64,
    pub solve: SolveDiagnostics,
}

impl CellRecord {
    /// Sample-level submartingale inequality `d_t ≤ Ê[d_{t+1}] + 3 SE`.
    pub fn submartingale_holds(&self) -> bool {
        self.d <= self.next_mean + 3.0 * self.next_se + 1e-12
    }
}

/// Discrete table, indexed `[t][state]` for `t = 0..T-1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscreteFio {
    pub d_minus: Vec<Vec<f64>>,
    pub d_plus: Vec<Vec<f64>>,
    pub k_minus: Vec<Vec<Vec<f64>>>,
    pub k_plus: Vec<Vec<Vec<f64>>>,
}

/// One time step of a continuous-state table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContinuousStep {
    /// Two outputs: `(d⁻, d⁺)`.
    pub d: FittedFunction,
    /// Fitted `k⁻`, `k⁺` (only in [`KMode::Fit`]).
    pub k_minus: Option<FittedFunction>,
    pub k_plus: Option<FittedFunction>,
    /// Raw solutions at the grid points.
    pub grid_d_minus: Vec<f64>,
    pub grid_d_plus: Vec<f64>,
    pub grid_k_minus: Vec<Vec<f64>>,
    pub grid_k_plus: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContinuousFio {
    pub grid: Vec<Vec<f64>>,
    pub k_mode: KMode,
    /// Scenario count used when re-solving `k` at an off-grid state.
    pub resolve_samples: usize,
    pub solver: SolverOptions,
    pub steps: Vec<ContinuousStep>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FioValues {
    Discrete(DiscreteFio),
    Continuous(ContinuousFio),
}

/// The fitted FIO processes with everything needed to evaluate policies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FioTable {
    pub format_version: u32,
    pub horizon: usize,
    pub n_assets: usize,
    pub cone: ConeSpec,
    pub model: MarketModel,
    pub master_seed: u64,
    /// Scenarios per state node.
    pub samples: usize,
    pub values: FioValues,
    pub cells: Vec<CellRecord>,
    pub warnings: Vec<String>,
    /// Free-form labels attached by callers, e.g. a hash of the run configuration.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub metadata: BTreeMap<String, String>,
}

/// A looked-up value and whether the state lay outside the fitted region.
#[derive(Debug, Clone, PartialEq)]
pub struct Lookup<T> {
    pub value: T,
    pub extrapolated: bool,
}

impl<T> Lookup<T> {
    fn exact(value: T) -> Self {
        Self {
            value,
            extrapolated: false,
        }
    }
}

impl FioTable {
    pub fn cone(&self) -> Result<ConeConstraint> {
        self.cone.build(self.n_assets)
    }

    /// Number of regimes for a discrete table.
    pub fn n_states(&self) -> Option<usize> {
        match &self.values {
            FioValues::Discrete(d) => d.d_minus.first().map(|row| row.len()),
            FioValues::Continuous(_) => None,
        }
    }

    pub fn discrete(&self) -> Option<&DiscreteFio> {
        match &self.values {
            FioValues::Discrete(d) => Some(d),
            FioValues::Continuous(_) => None,
        }
    }

    fn check_t(&self, t: usize, allow_terminal: bool) -> Result<()> {
        let max = if allow_terminal { self.horizon } else { self.horizon - 1 };
        if t > max {
            return Err(MmvError::Domain(format!(
                "time {t} is outside 0..={max} for horizon {}",
                self.horizon
            )));
        }
        Ok(())
    }

    fn regime(&self, t: usize, state: &State) -> Result<usize> {
        let m = self.n_states().unwrap_or(0);
        match state {
            State::Regime(i) if *i < m => Ok(*i),
            _ => Err(MmvError::Domain(format!(
                "state {state:?} is not a regime of this table (t={t})"
            ))),
        }
    }

    /// `d_t^±(s)`; equals 1 at `t = T`.
    pub fn d(&self, t: usize, state: &State, direction: Direction) -> Result<Lookup<f64>> {
        self.check_t(t, true)?;
        if t == self.horizon {
            return Ok(Lookup::exact(1.0));
        }
        match &self.values {
            FioValues::Discrete(d) => {
                let i = self.regime(t, state)?;
                Ok(Lookup::exact(match direction {
                    Direction::Minus => d.d_minus[t][i],
                    Direction::Plus => d.d_plus[t][i],
                }))
            }
            FioValues::Continuous(c) => {
                let s = state.factors().ok_or_else(|| {
                    MmvError::Domain(format!("state {state:?} is not a factor vector (t={t})"))
                })?;
                let e = c.steps[t].d.evaluate(s)?;
                let value = match direction {
                    Direction::Minus => e.value[0],
                    Direction::Plus => e.value[1],
                };
                Ok(Lookup {
                    value,
                    extrapolated: e.extrapolated,
                })
            }
        }
    }

    /// `k_t^±(s)`. Continuous tables either evaluate the fitted function or
    /// re-solve the cell at `s` using the fitted `d_{t+1}`.
    pub fn k(&self, t: usize, state: &State, direction: Direction) -> Result<Lookup<Vec<f64>>> {
        self.check_t(t, false)?;
        match &self.values {
            FioValues::Discrete(d) => {
                let i = self.regime(t, state)?;
                Ok(Lookup::exact(match direction {
                    Direction::Minus => d.k_minus[t][i].clone(),
                    Direction::Plus => d.k_plus[t][i].clone(),
                }))
            }
            FioValues::Continuous(_) => factor::continuous_k(self, t, state, direction),
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = std::fs::File::create(path)?;
        serde_json::to_writer_pretty(std::io::BufWriter::new(file), self)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        let table: FioTable = serde_json::from_reader(std::io::BufReader::new(file))?;
        if table.format_version != FIO_FORMAT_VERSION {
            return Err(MmvError::Domain(format!(
                "unsupported FIO table format version {} (expected {FIO_FORMAT_VERSION})",
                table.format_version
            )));
        }
        Ok(table)
    }

    /// Every stored `d` lies in `(0, 1]`.
    pub fn bounds_hold(&self) -> bool {
        let ok = |v: &f64| *v > 0.0 && *v <= 1.0;
        match &self.values {
            FioValues::Discrete(d) => d.d_minus.iter().chain(&d.d_plus).flatten().all(ok),
            FioValues::Continuous(c) => c
                .steps
                .iter()
                .all(|s| s.grid_d_minus.iter().chain(&s.grid_d_plus).all(ok)),
        }
    }

    /// Cells whose value exceeds the sample mean of the next-period value by
    /// more than three standard errors.
    pub fn submartingale_violations(&self) -> Vec<&CellRecord> {
        self.cells.iter().filter(|c| !c.submartingale_holds()).collect()
    }
}

/// Clamps a solved value into `[D_MIN, 1]` and builds its diagnostic record.
pub(crate) fn record(
    t: usize,
    node: usize,
    direction: Direction,
    out: &FioCellOutput,
    samples: &CellSamples,
) -> CellRecord {
    let d = out.d_star.clamp(D_MIN, 1.0);
    let (next_mean, next_se) = samples.next_mean(direction);
    CellRecord {
        t,
        node,
        direction,
        d_raw: out.d_star,
        d,
        clamped: (d - out.d_star).abs() > CLAMP_REPORT,
        next_mean,
        next_se,
        solve: out.diagnostics.clone(),
    }
}

pub(crate) fn clamp_warnings(cells: &[CellRecord]) -> Vec<String> {
    cells
        .iter()
        .filter(|c| c.clamped)
        .map(|c| {
            format!(
                "d at t={}, node={}, {} clamped from {:.3e} to {:.3e}",
                c.t,
                c.node,
                c.direction.label(),
                c.d_raw,
                c.d
            )
        })
        .collect()
}
