//! Pre-committed mean-variance policies, the efficient frontier and the
//! conditional Sharpe ratio.
//!
//! With threshold `W*`, the optimal decision at `(t, x_t, s_t)` is
//!
//! ```text
//! gap = r⁰_{t+1} x_t − W*/ρ_{t+1}
//! π_t = −k_t^-(s_t)·gap   if ρ_t x_t ≤ W*
//! π_t = +k_t^+(s_t)·gap   otherwise
//! ```
//!
//! where `ρ_t = Π_{u>t} r⁰_u` discounts to the horizon.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::cones::ConeConstraint;
use crate::error::{MmvError, Result};
use crate::fio::{Direction, FioTable};
use crate::market::{CumulativeRiskFree, State};

/// Tolerance of the feasibility check on every decision.
const FEASIBILITY_TOL: f64 = 1e-8;

/// Relative distance below which wealth counts as on the risk-free growth
/// path to `W*`, where the optimal decision is exactly zero. Absorbs the
/// rounding of forward and backward risk-free products.
const ON_PATH_TOL: f64 = 1e-14;

/// Which mean-variance problem the policy solves.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyMode {
    /// Minimize `Var[x_T] − 2λ E[x_T]` for `λ ≥ 0`.
    Lambda(f64),
    /// Minimize `Var[x_T]` subject to `E[x_T] = x_tg`.
    Target(f64),
}

/// A pair on the mean-variance plane.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrontierPoint {
    pub mean: f64,
    pub variance: f64,
}

/// One decision and the branch that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct Decision {
    pub pi: Vec<f64>,
    pub branch: Direction,
    /// The state lay outside the fitted region of a continuous table.
    pub extrapolated: bool,
}

/// `λ*(x_tg) = d_0^-(x_tg − ρ_0 x_0)/(1 − d_0^-)`, the multiplier that makes
/// the λ-problem hit the target mean.
pub fn lambda_star(x_tg: f64, x0: f64, rho0: f64, d0_minus: f64) -> Result<f64> {
    check_d0(d0_minus)?;
    if d0_minus >= 1.0 {
        return Err(MmvError::Infeasible(
            "d_0^- = 1: no investment opportunity, so no target above the risk-free growth is attainable".into(),
        ));
    }
    let floor = rho0 * x0;
    if x_tg < floor {
        return Err(MmvError::Infeasible(format!(
            "target {x_tg} is below the risk-free terminal wealth {floor}"
        )));
    }
    Ok(d0_minus * (x_tg - floor) / (1.0 - d0_minus))
}

/// Terminal mean and variance of the optimal λ-policy.
pub fn mean_variance_of_optimum(lambda: f64, d0_minus: f64, x0: f64, rho0: f64) -> FrontierPoint {
    let excess = 1.0 / d0_minus - 1.0;
    FrontierPoint {
        mean: rho0 * x0 + lambda * excess,
        variance: lambda * lambda * excess,
    }
}

/// `Var(E) = d_0^-(E − ρ_0 x_0)²/(1 − d_0^-)` at every target mean.
pub fn efficient_frontier(
    d0_minus: f64,
    x0: f64,
    rho0: f64,
    e_grid: &[f64],
) -> Result<Vec<FrontierPoint>> {
    check_d0(d0_minus)?;
    if d0_minus >= 1.0 {
        return Err(MmvError::Infeasible(
            "d_0^- = 1: the frontier degenerates to the risk-free point".into(),
        ));
    }
    let floor = rho0 * x0;
    e_grid
        .iter()
        .map(|&e| {
            if e < floor {
                return Err(MmvError::Domain(format!(
                    "frontier mean {e} is below the risk-free terminal wealth {floor}"
                )));
            }
            Ok(FrontierPoint {
                mean: e,
                variance: d0_minus * (e - floor).powi(2) / (1.0 - d0_minus),
            })
        })
        .collect()
}

/// `sqrt((1 − d)/d)`.
pub fn sharpe_from_d(d: f64) -> f64 {
    ((1.0 - d) / d).max(0.0).sqrt()
}

fn check_d0(d0_minus: f64) -> Result<()> {
    if !(d0_minus > 0.0 && d0_minus <= 1.0) {
        return Err(MmvError::Domain(format!("d_0^- = {d0_minus} is outside (0, 1]")));
    }
    Ok(())
}

/// The time-0 optimal policy of a fitted table.
#[derive(Debug, Clone)]
pub struct PrecommittedPolicy<'a> {
    fio: &'a FioTable,
    cone: ConeConstraint,
    mode: PolicyMode,
    x0: f64,
    s0: State,
    rho: CumulativeRiskFree,
    d0_minus: f64,
    threshold: f64,
}

impl<'a> PrecommittedPolicy<'a> {
    pub fn new(fio: &'a FioTable, mode: PolicyMode, x0: f64, s0: State) -> Result<Self> {
        if !x0.is_finite() {
            return Err(MmvError::Domain(format!("initial wealth {x0} is not finite")));
        }
        let rho = CumulativeRiskFree::new(fio.model.risk_free(), fio.horizon)?;
        let d0_minus = fio.d(0, &s0, Direction::Minus)?.value;
        let floor = rho.at(0) * x0;
        let threshold = match mode {
            PolicyMode::Lambda(lambda) => {
                if !(lambda >= 0.0 && lambda.is_finite()) {
                    return Err(MmvError::Domain(format!("λ = {lambda} must be finite and nonnegative")));
                }
                floor + lambda / d0_minus
            }
            PolicyMode::Target(x_tg) => {
                lambda_star(x_tg, x0, rho.at(0), d0_minus)?;
                (x_tg - rho.at(0) * d0_minus * x0) / (1.0 - d0_minus)
            }
        };
        Ok(Self {
            fio,
            cone: fio.cone()?,
            mode,
            x0,
            s0,
            rho,
            d0_minus,
            threshold,
        })
    }

    pub fn fio(&self) -> &FioTable {
        self.fio
    }

    pub fn mode(&self) -> PolicyMode {
        self.mode
    }

    pub fn x0(&self) -> f64 {
        self.x0
    }

    pub fn s0(&self) -> &State {
        &self.s0
    }

    pub fn horizon(&self) -> usize {
        self.fio.horizon
    }

    pub fn rho(&self) -> &CumulativeRiskFree {
        &self.rho
    }

    pub fn d0_minus(&self) -> f64 {
        self.d0_minus
    }

    /// `W*`, the horizon wealth level the policy steers towards.
    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    /// The multiplier of the equivalent λ-problem.
    pub fn lambda(&self) -> f64 {
        match self.mode {
            PolicyMode::Lambda(l) => l,
            PolicyMode::Target(_) => self.d0_minus * (self.threshold - self.rho.at(0) * self.x0),
        }
    }

    /// Mean and variance of the optimal terminal wealth.
    pub fn optimum(&self) -> FrontierPoint {
        mean_variance_of_optimum(self.lambda(), self.d0_minus, self.x0, self.rho.at(0))
    }

    /// Target mean: `x_tg` in target mode, `E[x_T*]` in λ mode.
    pub fn target(&self) -> f64 {
        match self.mode {
            PolicyMode::Target(x_tg) => x_tg,
            PolicyMode::Lambda(_) => self.optimum().mean,
        }
    }

    /// The optimal allocation at `(t, x_t, s_t)`.
    pub fn decide(&self, t: usize, x_t: f64, s_t: &State) -> Result<Decision> {
        if t >= self.horizon() {
            return Err(MmvError::Domain(format!(
                "decision time {t} is outside 0..{}",
                self.horizon()
            )));
        }
        let r0 = self.fio.model.risk_free().gross(t + 1);
        let horizon_wealth = self.rho.at(t) * x_t;
        let gap = if (horizon_wealth - self.threshold).abs()
            <= ON_PATH_TOL * horizon_wealth.abs().max(self.threshold.abs())
        {
            0.0
        } else {
            r0 * x_t - self.threshold / self.rho.at(t + 1)
        };
        let (branch, scale) = if horizon_wealth <= self.threshold {
            (Direction::Minus, -gap.min(0.0))
        } else {
            (Direction::Plus, gap.max(0.0))
        };
        let k = self.fio.k(t, s_t, branch)?;
        let pi: Vec<f64> = k.value.iter().map(|v| v * scale).collect();
        if !self.cone.is_feasible(&pi, FEASIBILITY_TOL * (1.0 + scale.abs()))? {
            return Err(MmvError::Numerical(format!(
                "decision at (t={t}, wealth={x_t}, state={s_t:?}) leaves the constraint cone: {pi:?}"
            )));
        }
        Ok(Decision {
            pi,
            branch,
            extrapolated: k.extrapolated,
        })
    }

    /// Conditional Sharpe ratio of the optimal terminal wealth, choosing the
    /// branch by comparing `ρ_t x_t` with the target mean.
    pub fn conditional_sharpe(&self, t: usize, x_t: f64, s_t: &State) -> Result<f64> {
        if t >= self.horizon() {
            return Err(MmvError::Domain(format!(
                "time {t} is outside 0..{}",
                self.horizon()
            )));
        }
        let direction = if self.rho.at(t) * x_t <= self.target() {
            Direction::Minus
        } else {
            Direction::Plus
        };
        Ok(sharpe_from_d(self.fio.d(t, s_t, direction)?.value))
    }
}

/// Writes `E,Var` rows.
pub fn write_frontier_csv<W: Write>(out: W, points: &[FrontierPoint]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["E", "Var"])?;
    for p in points {
        w.write_record([p.mean.to_string(), p.variance.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// One evaluated decision for export.
#[derive(Debug, Clone, PartialEq)]
pub struct DecisionRow {
    pub t: usize,
    pub state: State,
    pub wealth: f64,
    pub pi: Vec<f64>,
}

/// Writes `t,state,wealth,pi_1..pi_N` rows; factor states are joined by `;`.
pub fn write_decisions_csv<W: Write>(out: W, rows: &[DecisionRow]) -> Result<()> {
    let n = rows.first().map_or(0, |r| r.pi.len());
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["t".to_string(), "state".into(), "wealth".into()];
    header.extend((1..=n).map(|i| format!("pi_{i}")));
    w.write_record(&header)?;
    for r in rows {
        let mut rec = vec![r.t.to_string(), state_label(&r.state), r.wealth.to_string()];
        rec.extend(r.pi.iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub(crate) fn state_label(state: &State) -> String {
    match state {
        State::Regime(i) => i.to_string(),
        State::Factors(f) => f.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(";"),
    }
}
