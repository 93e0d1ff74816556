//! Policy rollouts, terminal-wealth statistics and the fee and
//! transaction-cost model.
//!
//! Wealth follows the self-financing recursion
//! `x_{t+1} = r⁰_{t+1} x_t + r_{t+1}ᵀπ_t`. Costs are charged ex post:
//! a management fee `M = α_0·q·x_0` at `t = 0` and
//! `TC_t = α_1 Σ_i |π_t^i/S_t^i − π_{t−1}^i/S_{t−1}^i|` each period, both
//! carried to the horizon at the risk-free rate.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{MmvError, Result};
use crate::fio::{Direction, FioTable};
use crate::linalg::dot;
use crate::market::{DatedSeries, MarketModel, MarketPath, State};
use crate::policy::{PolicyMode, PrecommittedPolicy};

/// Tail probability of VaR and CVaR.
pub const TAIL_LEVEL: f64 = 0.05;

/// Largest tolerated deviation from the wealth recursion.
const RECURSION_TOL: f64 = 1e-12;

/// Metric definitions, written next to every statistics output.
pub const DEFINITIONS: &[&str] = &[
    "benchmark: risk-free terminal wealth rho_0*x_0",
    "std: population standard deviation of terminal wealth",
    "sharpe: (mean - benchmark)/std; +inf with sharpe_infinite set when std = 0",
    "sortino: (mean - benchmark)/sqrt(E[min(x_T - benchmark, 0)^2])",
    "var_shortfall, cvar_shortfall: 5% VaR and CVaR of the shortfall benchmark - x_T (loss positive)",
    "var, cvar: the same quantities in P&L terms (negated shortfalls), so cvar <= var",
    "net: terminal wealth minus the fee and transaction costs compounded at the risk-free rate",
    "cost_undefined_paths: paths whose synthetic price reached zero or below; left out of net statistics",
];

/// One simulated or replayed trajectory of wealth and decisions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WealthPath {
    /// `x_0..x_T`.
    pub wealth: Vec<f64>,
    /// `π_0..π_{T-1}`.
    pub decisions: Vec<Vec<f64>>,
    /// Branch used at each decision.
    pub branches: Vec<Direction>,
    pub market: MarketPath,
    pub extrapolated: bool,
}

impl WealthPath {
    pub fn terminal(&self) -> f64 {
        *self.wealth.last().expect("wealth path is never empty")
    }

    pub fn weight(&self) -> f64 {
        self.market.weight
    }

    /// Largest absolute deviation from `x_{t+1} = r⁰_{t+1} x_t + r_{t+1}ᵀπ_t`.
    pub fn recursion_residual(&self, model: &MarketModel) -> f64 {
        (0..self.decisions.len())
            .map(|t| {
                let expected = model.risk_free().gross(t + 1) * self.wealth[t]
                    + dot(&self.market.returns[t], &self.decisions[t]);
                (self.wealth[t + 1] - expected).abs()
            })
            .fold(0.0, f64::max)
    }
}

/// Applies the policy along one market path.
pub fn apply_policy(
    policy: &PrecommittedPolicy,
    model: &MarketModel,
    market: MarketPath,
) -> Result<WealthPath> {
    let horizon = policy.horizon();
    if market.horizon() != horizon {
        return Err(MmvError::Domain(format!(
            "path has {} periods, policy horizon is {horizon}",
            market.horizon()
        )));
    }
    let mut wealth = Vec::with_capacity(horizon + 1);
    let mut decisions = Vec::with_capacity(horizon);
    let mut branches = Vec::with_capacity(horizon);
    let mut extrapolated = false;
    let mut x = policy.x0();
    wealth.push(x);
    for t in 0..horizon {
        let dec = policy.decide(t, x, &market.states[t])?;
        x = model.risk_free().gross(t + 1) * x + dot(&market.returns[t], &dec.pi);
        extrapolated |= dec.extrapolated;
        wealth.push(x);
        decisions.push(dec.pi);
        branches.push(dec.branch);
    }
    let path = WealthPath {
        wealth,
        decisions,
        branches,
        market,
        extrapolated,
    };
    let residual = path.recursion_residual(model);
    if residual > RECURSION_TOL * (1.0 + path.wealth.iter().fold(0.0f64, |m, v| m.max(v.abs()))) {
        return Err(MmvError::Numerical(format!(
            "wealth recursion violated by {residual:.3e}"
        )));
    }
    Ok(path)
}

fn check_model(policy: &PrecommittedPolicy, model: &MarketModel) -> Result<()> {
    if model.n_assets() != policy.fio().n_assets {
        return Err(MmvError::Domain(format!(
            "market has {} assets, policy has {}",
            model.n_assets(),
            policy.fio().n_assets
        )));
    }
    model.risk_free().covers(policy.horizon())?;
    model.validate_state(policy.s0())
}

/// `n_paths` Monte Carlo rollouts of `policy` in `model`, starting from the
/// policy's initial state. Deterministic given `seed`.
pub fn rollout(
    policy: &PrecommittedPolicy,
    model: &MarketModel,
    n_paths: usize,
    seed: u64,
) -> Result<Vec<WealthPath>> {
    check_model(policy, model)?;
    let markets = model.simulate_paths(policy.s0(), policy.horizon(), n_paths, seed)?;
    markets
        .into_par_iter()
        .enumerate()
        .map(|(p, m)| apply_policy(policy, model, m).map_err(|e| e.in_cell(format!("(path={p})"))))
        .collect()
}

/// Rollouts over every path of a discrete regime market, weighted by their
/// probabilities.
pub fn rollout_enumerated(
    policy: &PrecommittedPolicy,
    model: &MarketModel,
    cap: usize,
) -> Result<Vec<WealthPath>> {
    check_model(policy, model)?;
    let markets = model.enumerate_paths(policy.s0(), policy.horizon(), cap)?;
    markets
        .into_par_iter()
        .map(|m| apply_policy(policy, model, m))
        .collect()
}

/// Cuts aligned historical data into consecutive non-overlapping windows
/// of `horizon` periods. The state at each date is that date's factor row;
/// the return over the next period is the following date's return row.
pub fn historical_paths(
    returns: &DatedSeries,
    factors: &DatedSeries,
    horizon: usize,
) -> Result<Vec<MarketPath>> {
    let (r, f) = crate::market::align_on_dates(returns, factors)?;
    let n_obs = r.nrows();
    if horizon == 0 || n_obs < horizon + 1 {
        return Err(MmvError::Domain(format!(
            "{n_obs} aligned observations cannot fill a window of {horizon} periods"
        )));
    }
    let windows = (n_obs - 1) / horizon;
    let weight = 1.0 / windows as f64;
    Ok((0..windows)
        .map(|w| {
            let start = w * horizon;
            MarketPath {
                states: (start..=start + horizon)
                    .map(|i| State::Factors(f.row(i).iter().cloned().collect()))
                    .collect(),
                returns: (start + 1..=start + horizon)
                    .map(|i| r.row(i).iter().cloned().collect())
                    .collect(),
                weight,
            }
        })
        .collect())
}

/// Management fee and transaction-cost rates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostModel {
    /// Management fee per unit of initial wealth and per asset held.
    pub alpha0: f64,
    /// Transaction cost per unit change in share count.
    pub alpha1: f64,
    /// Number of assets the fee is charged on.
    pub q: usize,
}

impl CostModel {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha0 >= 0.0 && self.alpha1 >= 0.0) {
            return Err(MmvError::Domain(format!(
                "cost rates must be nonnegative, got α0 = {}, α1 = {}",
                self.alpha0, self.alpha1
            )));
        }
        Ok(())
    }

    /// `(fee, transaction costs)` of one path, both valued at the horizon.
    /// Prices start at 1 and grow with the gross returns `r⁰ + r`. `None` when
    /// a price reaches zero or below, where share counts are undefined.
    pub fn path_costs(&self, path: &WealthPath, model: &MarketModel) -> Option<(f64, f64)> {
        let horizon = path.decisions.len();
        let rf = model.risk_free();
        let mut rho = vec![1.0; horizon + 1];
        for t in (0..horizon).rev() {
            rho[t] = rho[t + 1] * rf.gross(t + 1);
        }
        let fee = self.alpha0 * self.q as f64 * path.wealth[0] * rho[0];
        if self.alpha1 == 0.0 {
            return Some((fee, 0.0));
        }
        let n = model.n_assets();
        let mut prices = vec![1.0; n];
        let mut held = vec![0.0; n];
        let mut tc = 0.0;
        for t in 0..horizon {
            if t > 0 {
                for (i, p) in prices.iter_mut().enumerate() {
                    *p *= rf.gross(t) + path.market.returns[t - 1][i];
                    if *p <= 0.0 {
                        return None;
                    }
                }
            }
            let mut turnover = 0.0;
            for i in 0..n {
                let shares = path.decisions[t][i] / prices[i];
                turnover += (shares - held[i]).abs();
                held[i] = shares;
            }
            tc += self.alpha1 * turnover * rho[t];
        }
        Some((fee, tc))
    }
}

/// Statistics of one terminal-wealth sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TerminalStats {
    pub mean: f64,
    pub std: f64,
    #[serde(with = "extended_f64")]
    pub sharpe: f64,
    pub sharpe_infinite: bool,
    /// Standard error of the Sharpe ratio under i.i.d. sampling; absent for
    /// probability-weighted enumerations and infinite ratios.
    pub sharpe_se: Option<f64>,
    #[serde(with = "extended_f64")]
    pub sortino: f64,
    pub var_shortfall: f64,
    pub cvar_shortfall: f64,
    pub var: f64,
    pub cvar: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerformanceStats {
    pub n_paths: usize,
    pub benchmark: f64,
    pub gross: TerminalStats,
    /// After fee and transaction costs, when a cost model is given.
    pub net: Option<TerminalStats>,
    pub mean_fee: Option<f64>,
    pub mean_transaction_cost: Option<f64>,
    /// Paths left out of the net statistics because a synthetic price hit zero.
    #[serde(default)]
    pub cost_undefined_paths: usize,
    pub extrapolated_paths: usize,
}

/// Writes `±inf` as strings, since JSON has no infinities.
mod extended_f64 {
    use serde::{de, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_infinite() {
            s.serialize_str(if *v > 0.0 { "inf" } else { "-inf" })
        } else {
            s.serialize_f64(*v)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Num(f64),
            Text(String),
        }
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Text(t) if t == "inf" => Ok(f64::INFINITY),
            Repr::Text(t) if t == "-inf" => Ok(f64::NEG_INFINITY),
            Repr::Text(t) => Err(de::Error::custom(format!("expected a number, got {t:?}"))),
        }
    }
}

/// Statistics of terminal wealth under probability `weights` (which need
/// not be normalized). `iid` enables the Sharpe standard error.
pub fn terminal_stats(values: &[f64], weights: &[f64], benchmark: f64, iid: bool) -> Result<TerminalStats> {
    if values.is_empty() {
        return Err(MmvError::Domain("statistics need at least one path".into()));
    }
    let total: f64 = weights.iter().sum();
    let wmean = |f: &dyn Fn(f64) -> f64| {
        values.iter().zip(weights).map(|(v, w)| w * f(*v)).sum::<f64>() / total
    };
    let mean = if values.iter().all(|v| *v == values[0]) {
        values[0]
    } else {
        wmean(&|v| v)
    };
    let var = wmean(&|v| (v - mean).powi(2));
    let std = var.sqrt();
    let excess = mean - benchmark;
    let ratio = |num: f64, den: f64| -> (f64, bool) {
        if den > 0.0 {
            (num / den, false)
        } else if num > 0.0 {
            (f64::INFINITY, true)
        } else if num < 0.0 {
            (f64::NEG_INFINITY, true)
        } else {
            (f64::INFINITY, true)
        }
    };
    let (sharpe, sharpe_infinite) = ratio(excess, std);
    let downside = wmean(&|v| (v - benchmark).min(0.0).powi(2)).sqrt();
    let (sortino, _) = ratio(excess, downside);
    let sharpe_se = (iid && !sharpe_infinite && values.len() > 1).then(|| {
        let skew = wmean(&|v| (v - mean).powi(3)) / std.powi(3);
        let kurt = wmean(&|v| (v - mean).powi(4)) / var.powi(2);
        let s = sharpe;
        ((1.0 + 0.5 * s * s - skew * s + 0.25 * (kurt - 3.0) * s * s).max(0.0) / values.len() as f64)
            .sqrt()
    });

    let mut losses: Vec<(f64, f64)> = values
        .iter()
        .zip(weights)
        .map(|(v, w)| (benchmark - v, w / total))
        .collect();
    losses.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut cum = 0.0;
    let mut var_shortfall = losses.last().expect("nonempty").0;
    for (l, w) in &losses {
        cum += w;
        if cum >= 1.0 - TAIL_LEVEL - 1e-12 {
            var_shortfall = *l;
            break;
        }
    }
    let tail: f64 = losses
        .iter()
        .map(|(l, w)| w * (l - var_shortfall).max(0.0))
        .sum();
    let cvar_shortfall = var_shortfall + tail / TAIL_LEVEL;
    Ok(TerminalStats {
        mean,
        std,
        sharpe,
        sharpe_infinite,
        sharpe_se,
        sortino,
        var_shortfall,
        cvar_shortfall,
        var: -var_shortfall,
        cvar: -cvar_shortfall,
    })
}

/// Performance of a set of paths against the risk-free benchmark `ρ_0 x_0`.
/// Paths carrying unequal weights (exact enumerations) are weighted.
pub fn stats(
    paths: &[WealthPath],
    model: &MarketModel,
    cost: Option<&CostModel>,
) -> Result<PerformanceStats> {
    let first = paths
        .first()
        .ok_or_else(|| MmvError::Domain("statistics need at least one path".into()))?;
    let horizon = first.decisions.len();
    let benchmark = (1..=horizon).map(|t| model.risk_free().gross(t)).product::<f64>() * first.wealth[0];
    let weights: Vec<f64> = paths.iter().map(WealthPath::weight).collect();
    let iid = weights.iter().all(|w| *w == weights[0]);
    let terminal: Vec<f64> = paths.iter().map(WealthPath::terminal).collect();
    let gross = terminal_stats(&terminal, &weights, benchmark, iid)?;
    let mut cost_undefined = 0;
    let (net, mean_fee, mean_tc) = match cost {
        None => (None, None, None),
        Some(c) => {
            c.validate()?;
            let costs: Vec<Option<(f64, f64)>> = paths.par_iter().map(|p| c.path_costs(p, model)).collect();
            let mut net = Vec::with_capacity(paths.len());
            let mut net_weights = Vec::with_capacity(paths.len());
            let (mut fee_sum, mut tc_sum) = (0.0, 0.0);
            for ((x, w), pc) in terminal.iter().zip(&weights).zip(&costs) {
                match pc {
                    Some((fee, tc)) => {
                        net.push(x - fee - tc);
                        net_weights.push(*w);
                        fee_sum += w * fee;
                        tc_sum += w * tc;
                    }
                    None => cost_undefined += 1,
                }
            }
            if net.is_empty() {
                return Err(MmvError::Numerical(
                    "transaction costs are undefined on every path (nonpositive prices)".into(),
                ));
            }
            if cost_undefined > 0 {
                log::warn!("{cost_undefined} paths have a nonpositive synthetic price and are left out of net statistics");
            }
            let total: f64 = net_weights.iter().sum();
            (
                Some(terminal_stats(&net, &net_weights, benchmark, iid)?),
                Some(fee_sum / total),
                Some(tc_sum / total),
            )
        }
    };
    Ok(PerformanceStats {
        n_paths: paths.len(),
        benchmark,
        gross,
        net,
        mean_fee,
        mean_transaction_cost: mean_tc,
        cost_undefined_paths: cost_undefined,
        extrapolated_paths: paths.iter().filter(|p| p.extrapolated).count(),
    })
}

/// One row of a cardinality sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub q: usize,
    pub d0_minus: f64,
    pub stats: PerformanceStats,
}

/// For each cardinality bound `q`, fits a table with `fit_for(q)`, rolls
/// out the policy in `model` and reports performance with the fee charged
/// on `q` assets.
#[allow(clippy::too_many_arguments)]
pub fn cost_sweep<F>(
    qs: &[usize],
    fit_for: F,
    mode: PolicyMode,
    x0: f64,
    s0: &State,
    model: &MarketModel,
    cost: &CostModel,
    n_paths: usize,
    seed: u64,
) -> Result<Vec<SweepRow>>
where
    F: Fn(usize) -> Result<FioTable>,
{
    cost.validate()?;
    let n = model.n_assets();
    qs.iter()
        .map(|&q| {
            if q == 0 || q > n {
                return Err(MmvError::Domain(format!("cardinality {q} is outside 1..={n}")));
            }
            let table = fit_for(q)?;
            let policy = PrecommittedPolicy::new(&table, mode, x0, s0.clone())?;
            let paths = rollout(&policy, model, n_paths, seed)?;
            let stats = stats(&paths, model, Some(&CostModel { q, ..*cost }))?;
            Ok(SweepRow {
                q,
                d0_minus: policy.d0_minus(),
                stats,
            })
        })
        .collect()
}

/// Writes `path,t,wealth,pi_1..pi_N`; the decision columns are empty at `t = T`.
pub fn write_paths_csv<W: Write>(out: W, paths: &[WealthPath]) -> Result<()> {
    let n = paths.first().and_then(|p| p.decisions.first()).map_or(0, Vec::len);
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["path".to_string(), "t".into(), "wealth".into()];
    header.extend((1..=n).map(|i| format!("pi_{i}")));
    w.write_record(&header)?;
    for (p, path) in paths.iter().enumerate() {
        for (t, x) in path.wealth.iter().enumerate() {
            let mut rec = vec![p.to_string(), t.to_string(), x.to_string()];
            match path.decisions.get(t) {
                Some(pi) => rec.extend(pi.iter().map(|v| v.to_string())),
                None => rec.extend(std::iter::repeat_n(String::new(), n)),
            }
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Writes one line per cardinality with gross and net performance.
pub fn write_sweep_csv<W: Write>(out: W, rows: &[SweepRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "q",
        "d0_minus",
        "mean",
        "std",
        "sharpe",
        "net_mean",
        "net_std",
        "net_sharpe",
        "mean_fee",
        "mean_transaction_cost",
        "cost_undefined_paths",
    ])?;
    for r in rows {
        let net = r.stats.net.as_ref();
        let opt = |v: Option<f64>| v.map_or(String::new(), |v| v.to_string());
        w.write_record([
            r.q.to_string(),
            r.d0_minus.to_string(),
            r.stats.gross.mean.to_string(),
            r.stats.gross.std.to_string(),
            r.stats.gross.sharpe.to_string(),
            opt(net.map(|n| n.mean)),
            opt(net.map(|n| n.std)),
            opt(net.map(|n| n.sharpe)),
            opt(r.stats.mean_fee),
            opt(r.stats.mean_transaction_cost),
            r.stats.cost_undefined_paths.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
