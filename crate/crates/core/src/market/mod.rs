//! Return and state dynamics.
//!
//! Two concrete variants are provided: a Markov regime-switching chain whose
//! regimes carry their own return law, and a linear factor model with
//! mean-reverting factors. Both expose one-step scenario sampling and exact
//! conditional moments.

mod calibrate;
mod csv_io;
mod factor;
mod markov;
mod paths;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{MmvError, Result};

pub use calibrate::{calibrate_linear_factor, CalibrationOptions, CalibrationReport};
pub use csv_io::{align_on_dates, read_dated_csv, DatedSeries};
pub use factor::LinearFactorModel;
pub use markov::{MarkovChainModel, ReturnLaw};
pub use paths::MarketPath;

/// Per-period gross risk-free return `r⁰_{t+1}`, either constant or a
/// schedule indexed by decision time `t = 0..T-1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum RiskFree {
    Constant(f64),
    Schedule(Vec<f64>),
}

impl RiskFree {
    /// Gross risk-free return over period `(t, t+1]`.
    pub fn gross(&self, t: usize) -> f64 {
        match self {
            RiskFree::Constant(r) => *r,
            RiskFree::Schedule(v) => v[t.min(v.len().saturating_sub(1))],
        }
    }

    pub(crate) fn validate(&self) -> Result<()> {
        let ok = |r: &f64| r.is_finite() && *r > 0.0;
        let valid = match self {
            RiskFree::Constant(r) => ok(r),
            RiskFree::Schedule(v) => !v.is_empty() && v.iter().all(ok),
        };
        if valid {
            Ok(())
        } else {
            Err(MmvError::InvalidModel(
                "risk-free returns must be positive and finite".into(),
            ))
        }
    }

    /// Checks that a schedule covers `horizon` periods.
    pub fn covers(&self, horizon: usize) -> Result<()> {
        match self {
            RiskFree::Schedule(v) if v.len() < horizon => Err(MmvError::Domain(format!(
                "risk-free schedule has {} periods, horizon is {horizon}",
                v.len()
            ))),
            _ => Ok(()),
        }
    }
}

/// Cumulative risk-free growth `ρ_t = Π_{k=t}^{T-1} r⁰_{k+1}`, with `ρ_T = 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CumulativeRiskFree {
    rho: Vec<f64>,
}

impl CumulativeRiskFree {
    pub fn new(risk_free: &RiskFree, horizon: usize) -> Result<Self> {
        risk_free.validate()?;
        risk_free.covers(horizon)?;
        let mut rho = vec![1.0; horizon + 1];
        for t in (0..horizon).rev() {
            rho[t] = risk_free.gross(t) * rho[t + 1];
        }
        Ok(Self { rho })
    }

    pub fn horizon(&self) -> usize {
        self.rho.len() - 1
    }

    /// `ρ_t` for `t = 0..=T`.
    pub fn at(&self, t: usize) -> f64 {
        self.rho[t]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.rho
    }
}

/// An observed state: a regime index or a factor vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum State {
    Regime(usize),
    Factors(Vec<f64>),
}

impl State {
    pub fn regime(&self) -> Option<usize> {
        match self {
            State::Regime(i) => Some(*i),
            State::Factors(_) => None,
        }
    }

    pub fn factors(&self) -> Option<&[f64]> {
        match self {
            State::Factors(v) => Some(v),
            State::Regime(_) => None,
        }
    }
}

/// Next-period states of a scenario set.
#[derive(Debug, Clone, PartialEq)]
pub enum NextStates {
    Regimes(Vec<usize>),
    /// Row-major `L x N_s`.
    Factors { dim: usize, data: Vec<f64> },
}

/// `L` joint draws of `(s_{t+1}, r_{t+1})` given `s_t = origin`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioSet {
    pub t: usize,
    pub origin: State,
    pub seed: u64,
    pub n_assets: usize,
    pub next: NextStates,
    /// Row-major `L x N` excess returns.
    pub returns: Vec<f64>,
}

impl ScenarioSet {
    pub fn len(&self) -> usize {
        self.returns.len() / self.n_assets.max(1)
    }

    pub fn is_empty(&self) -> bool {
        self.returns.is_empty()
    }

    pub fn return_at(&self, l: usize) -> &[f64] {
        &self.returns[l * self.n_assets..(l + 1) * self.n_assets]
    }

    pub fn next_state(&self, l: usize) -> State {
        match &self.next {
            NextStates::Regimes(v) => State::Regime(v[l]),
            NextStates::Factors { dim, data } => {
                State::Factors(data[l * dim..(l + 1) * dim].to_vec())
            }
        }
    }
}

/// Conditional first and second moments of `r_{t+1}` given `s_t`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionalMoments {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub second_moment: DMatrix<f64>,
}

/// A factor-model specification with sampling and moment access.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MarketModel {
    Markov(MarkovChainModel),
    Factor(LinearFactorModel),
}

impl MarketModel {
    pub fn n_assets(&self) -> usize {
        match self {
            MarketModel::Markov(m) => m.n_assets(),
            MarketModel::Factor(m) => m.n_assets(),
        }
    }

    pub fn risk_free(&self) -> &RiskFree {
        match self {
            MarketModel::Markov(m) => m.risk_free(),
            MarketModel::Factor(m) => m.risk_free(),
        }
    }

    pub fn validate_state(&self, state: &State) -> Result<()> {
        match (self, state) {
            (MarketModel::Markov(m), State::Regime(i)) if *i < m.n_states() => Ok(()),
            (MarketModel::Factor(m), State::Factors(v))
                if v.len() == m.n_factors() && v.iter().all(|x| x.is_finite()) =>
            {
                Ok(())
            }
            _ => Err(MmvError::Domain(format!(
                "state {state:?} is not valid for this model"
            ))),
        }
    }

    /// Draws `samples` joint realizations of `(s_{t+1}, r_{t+1})` given
    /// `s_t = origin`. Deterministic in `(model, t, origin, samples, seed)`.
    pub fn sample_scenarios(
        &self,
        t: usize,
        origin: &State,
        samples: usize,
        seed: u64,
    ) -> Result<ScenarioSet> {
        self.validate_state(origin)?;
        if samples == 0 {
            return Err(MmvError::Domain("sample count must be at least 1".into()));
        }
        let mut rng = crate::seed::rng(seed);
        let n = self.n_assets();
        let mut returns = Vec::with_capacity(samples * n);
        let next = match (self, origin) {
            (MarketModel::Markov(m), State::Regime(i)) => {
                let mut regimes = Vec::with_capacity(samples);
                for _ in 0..samples {
                    let j = m.draw_next_regime(*i, &mut rng);
                    m.law(j).draw_into(&mut rng, &mut returns);
                    regimes.push(j);
                }
                NextStates::Regimes(regimes)
            }
            (MarketModel::Factor(m), State::Factors(s)) => {
                let dim = m.n_factors();
                let mut data = Vec::with_capacity(samples * dim);
                let s = DVector::from_column_slice(s);
                for _ in 0..samples {
                    let (s_next, r_next) = m.draw(&s, &mut rng);
                    data.extend(s_next.iter());
                    returns.extend(r_next.iter());
                }
                NextStates::Factors { dim, data }
            }
            _ => unreachable!("state validated above"),
        };
        Ok(ScenarioSet {
            t,
            origin: origin.clone(),
            seed,
            n_assets: n,
            next,
            returns,
        })
    }

    /// One step of the joint dynamics, used for path simulation.
    pub fn step<R: Rng + ?Sized>(&self, origin: &State, rng: &mut R) -> (State, Vec<f64>) {
        match (self, origin) {
            (MarketModel::Markov(m), State::Regime(i)) => {
                let j = m.draw_next_regime(*i, rng);
                let mut r = Vec::with_capacity(m.n_assets());
                m.law(j).draw_into(rng, &mut r);
                (State::Regime(j), r)
            }
            (MarketModel::Factor(m), State::Factors(s)) => {
                let (s_next, r) = m.draw(&DVector::from_column_slice(s), rng);
                (
                    State::Factors(s_next.iter().cloned().collect()),
                    r.iter().cloned().collect(),
                )
            }
            _ => panic!("state {origin:?} does not match the model variant"),
        }
    }

    /// Exact `E[r_{t+1}|s_t]`, `Cov[r_{t+1}|s_t]` and `E[r_{t+1} r_{t+1}ᵀ|s_t]`.
    pub fn conditional_moments(&self, origin: &State) -> Result<ConditionalMoments> {
        self.validate_state(origin)?;
        Ok(match (self, origin) {
            (MarketModel::Markov(m), State::Regime(i)) => m.conditional_moments(*i),
            (MarketModel::Factor(m), State::Factors(s)) => {
                m.conditional_moments(&DVector::from_column_slice(s))
            }
            _ => unreachable!(),
        })
    }
}
