use std::path::PathBuf;

use mmv_core::backtest::{
    apply_policy, cost_sweep, historical_paths, rollout, stats, write_paths_csv, write_sweep_csv, CostModel,
    WealthPath, DEFINITIONS,
};
use mmv_core::cones::ConeConstraint;
use mmv_core::fio::{
    backward_factor, backward_markov, riccati_markov, Direction, FactorOptions, FioTable, FioValues, MarkovOptions,
};
use mmv_core::market::{
    align_on_dates, calibrate_linear_factor, read_dated_csv, CalibrationOptions, CalibrationReport, DatedSeries,
    LinearFactorModel, MarketModel, State,
};
use mmv_core::policy::{efficient_frontier, sharpe_from_d, write_frontier_csv, PrecommittedPolicy};
use mmv_core::seed::child_seed;
use mmv_core::vssm::{check_tcie, martingale_checks};
use mmv_core::MmvError;
use serde_json::json;

use crate::config::{GridSpec, ModelSource, RunConfig};
use crate::error::CliError;
use crate::output::{announce, Output};

/// Largest tolerated gap between the unconstrained table and the closed form.
const RICCATI_TOL: f64 = 1e-6;
/// Periods simulated before a random grid starts collecting states.
const GRID_BURN_IN: usize = 200;

// Seed streams derived from the master seed, kept apart from the fitting seeds.
const SIMULATION_STREAM: u64 = 101;
const VSSM_STREAM: u64 = 102;
const GRID_STREAM: u64 = 103;

pub struct Context {
    pub config: RunConfig,
    pub seed: u64,
    pub out: Output,
    pub fio: Option<PathBuf>,
}

type CliResult<T> = Result<T, CliError>;

struct Market {
    model: MarketModel,
    calibration: Option<CalibrationReport>,
    /// Values subtracted from factor files (nonzero after demeaned calibration).
    factor_shift: Vec<f64>,
}

impl Context {
    fn stream(&self, tag: u64) -> u64 {
        child_seed(self.seed, &[tag])
    }

    fn fio_path(&self) -> PathBuf {
        self.fio.clone().unwrap_or_else(|| self.out.path("fio.json"))
    }

    fn load_table(&self) -> CliResult<FioTable> {
        let path = self.fio_path();
        let table = FioTable::load(&path).map_err(|e| {
            let err = CliError::from(e);
            CliError {
                message: format!("{}: {}", path.display(), err.message),
                ..err
            }
        })?;
        if table.horizon != self.config.horizon {
            return Err(CliError::validation(format!(
                "table {} has horizon {}, config has {}",
                path.display(),
                table.horizon,
                self.config.horizon
            )));
        }
        Ok(table)
    }

    fn initial_state(&self, model: &MarketModel) -> CliResult<State> {
        let s0 = match (&self.config.initial_state, model) {
            (Some(s), _) => s.clone(),
            (None, MarketModel::Markov(_)) => State::Regime(0),
            (None, MarketModel::Factor(m)) => State::Factors(vec![0.0; m.n_factors()]),
        };
        model.validate_state(&s0)?;
        Ok(s0)
    }

    fn policy<'a>(&self, table: &'a FioTable) -> CliResult<PrecommittedPolicy<'a>> {
        let s0 = self.initial_state(&table.model)?;
        Ok(PrecommittedPolicy::new(table, self.config.mode, self.config.x0, s0)?)
    }

    fn cost_model(&self, n_assets: usize) -> Option<CostModel> {
        self.config.costs.map(|c| CostModel {
            alpha0: c.alpha0,
            alpha1: c.alpha1,
            q: self.config.cone.cardinality.unwrap_or(n_assets),
        })
    }

    fn market(&self) -> CliResult<Market> {
        match &self.config.model {
            ModelSource::Markov(m) => Ok(Market {
                model: MarketModel::Markov(m.clone()),
                calibration: None,
                factor_shift: Vec::new(),
            }),
            ModelSource::Factor(m) => Ok(Market {
                factor_shift: vec![0.0; m.n_factors()],
                model: MarketModel::Factor(m.clone()),
                calibration: None,
            }),
            ModelSource::File(path) => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| CliError::io(format!("cannot read {}: {e}", path.display())))?;
                let model: MarketModel = serde_json::from_str(&text)
                    .map_err(|e| CliError::validation(format!("model {}: {e}", path.display())))?;
                let shift = match &model {
                    MarketModel::Factor(m) => vec![0.0; m.n_factors()],
                    MarketModel::Markov(_) => Vec::new(),
                };
                Ok(Market {
                    model,
                    calibration: None,
                    factor_shift: shift,
                })
            }
            ModelSource::Calibration(input) => {
                let returns = read_dated_csv(&input.returns)?;
                let factors = read_dated_csv(&input.factors)?;
                let (r, f) = align_on_dates(&returns, &factors)?;
                let opts = CalibrationOptions {
                    demean_factors: input.demean_factors,
                    factor_names: factors.columns.clone(),
                };
                let report = calibrate_linear_factor(&r, &f, &opts)?;
                let model = report.model(input.risk_free.clone())?;
                Ok(Market {
                    factor_shift: report.factor_means.clone(),
                    model: MarketModel::Factor(model),
                    calibration: Some(report),
                })
            }
        }
    }

    fn shifted(&self, series: &DatedSeries, shift: &[f64]) -> Vec<Vec<f64>> {
        series
            .rows
            .iter()
            .map(|row| row.iter().zip(shift).map(|(v, m)| v - m).collect())
            .collect()
    }

    fn grid(&self, model: &LinearFactorModel, market: &Market) -> mmv_core::Result<Vec<Vec<f64>>> {
        let spec = match (&self.config.grid, &self.config.model) {
            (Some(g), _) => g.clone(),
            (None, ModelSource::Calibration(c)) => GridSpec::Historical(c.factors.clone()),
            (None, _) => {
                return Err(MmvError::Domain(
                    "factor models need a grid: historical, random or points".into(),
                ))
            }
        };
        Ok(match spec {
            GridSpec::Points(p) => p,
            GridSpec::Historical(path) => self.shifted(&read_dated_csv(&path)?, &market.factor_shift),
            GridSpec::Random { size } => {
                let start = State::Factors(vec![0.0; model.n_factors()]);
                let path = market
                    .model
                    .simulate_paths(&start, GRID_BURN_IN + size, 1, self.stream(GRID_STREAM))?
                    .remove(0);
                path.states[GRID_BURN_IN + 1..]
                    .iter()
                    .map(|s| s.factors().expect("factor state").to_vec())
                    .collect()
            }
        })
    }

    fn fit_with(&self, market: &Market, cone: &ConeConstraint) -> mmv_core::Result<FioTable> {
        let cfg = &self.config;
        let mut table = match &market.model {
            MarketModel::Markov(m) => {
                let opts = MarkovOptions {
                    samples: cfg.samples,
                    seed: self.seed,
                    solver: cfg.solver.clone(),
                    ..Default::default()
                };
                backward_markov(m, cone, cfg.horizon, &opts)?
            }
            MarketModel::Factor(m) => {
                let grid = self.grid(m, market)?;
                let opts = FactorOptions {
                    samples: cfg.samples,
                    seed: self.seed,
                    solver: cfg.solver.clone(),
                    fit: cfg.fit.clone(),
                    k_mode: cfg.k_mode,
                    ..Default::default()
                };
                backward_factor(m, cone, cfg.horizon, &grid, &opts)?
            }
        };
        table
            .metadata
            .insert("config_sha256".into(), self.out.config_sha256.clone());
        table.metadata.insert("seed".into(), self.seed.to_string());
        if market.factor_shift.iter().any(|v| *v != 0.0) {
            table
                .metadata
                .insert("factor_shift".into(), serde_json::to_string(&market.factor_shift)?);
        }
        Ok(table)
    }
}

pub fn calibrate(ctx: &Context) -> CliResult<()> {
    if !matches!(ctx.config.model, ModelSource::Calibration(_)) {
        return Err(CliError::validation(
            "calibrate needs a model of the form {\"calibration\": {\"returns\": ..., \"factors\": ...}}",
        ));
    }
    let market = ctx.market()?;
    let report = market.calibration.as_ref().expect("calibrated above");
    let path = ctx.out.path("model.json");
    std::fs::write(&path, serde_json::to_string_pretty(&market.model)? + "\n")?;
    announce(&path);
    announce(&ctx.out.json("calibration.json", "report", report, json!({}))?);
    println!(
        "calibrated {} assets on {} factors from {} observations; mean R² of returns {:.3}",
        report.alpha.len(),
        report.phi.nrows(),
        report.n_obs,
        report.r2_returns.iter().sum::<f64>() / report.r2_returns.len() as f64
    );
    Ok(())
}

fn write_cells_csv(ctx: &Context, table: &FioTable) -> CliResult<PathBuf> {
    ctx.out.csv("cells.csv", |w| {
        let mut csv = csv::Writer::from_writer(w);
        csv.write_record([
            "t",
            "node",
            "direction",
            "d_raw",
            "d",
            "clamped",
            "next_mean",
            "next_se",
            "submartingale",
            "iterations",
            "residual",
            "restarts",
            "patterns",
            "support",
            "heuristic",
        ])?;
        for c in &table.cells {
            let support = c.solve.support.as_ref().map_or(String::new(), |s| {
                s.iter().map(|i| (i + 1).to_string()).collect::<Vec<_>>().join(";")
            });
            csv.write_record([
                c.t.to_string(),
                c.node.to_string(),
                c.direction.label().to_string(),
                c.d_raw.to_string(),
                c.d.to_string(),
                c.clamped.to_string(),
                c.next_mean.to_string(),
                c.next_se.to_string(),
                c.submartingale_holds().to_string(),
                c.solve.iterations.to_string(),
                c.solve.residual.to_string(),
                c.solve.restarts.to_string(),
                c.solve.patterns.to_string(),
                support,
                c.solve.heuristic.to_string(),
            ])?;
        }
        csv.flush()?;
        Ok(())
    })
}

pub fn fit(ctx: &Context) -> CliResult<()> {
    let market = ctx.market()?;
    let n = market.model.n_assets();
    let cone = ctx.config.cone.build(n)?;
    let table = ctx.fit_with(&market, &cone)?;
    let path = ctx.fio_path();
    table.save(&path)?;
    announce(&path);
    announce(&write_cells_csv(ctx, &table)?);

    let violations = table.submartingale_violations();
    let riccati = match &market.model {
        MarketModel::Markov(m) if cone.is_unconstrained() => {
            let opts = MarkovOptions {
                samples: ctx.config.samples,
                seed: ctx.seed,
                ..Default::default()
            };
            let (rd, rk) = riccati_markov(m, ctx.config.horizon, &opts)?;
            let d = table.discrete().expect("regime table");
            let mut max_d: f64 = 0.0;
            let mut max_k: f64 = 0.0;
            for t in 0..ctx.config.horizon {
                for i in 0..m.n_states() {
                    max_d = max_d.max((d.d_minus[t][i] - rd[t][i]).abs());
                    for (a, b) in d.k_minus[t][i].iter().zip(&rk[t][i]) {
                        max_k = max_k.max((a - b).abs() / b.abs().max(1.0));
                    }
                }
            }
            Some(json!({
                "max_abs_d_difference": max_d,
                "max_rel_k_difference": max_k,
                "passed": max_d <= RICCATI_TOL && max_k <= RICCATI_TOL,
            }))
        }
        _ => None,
    };
    let validation: Vec<_> = match &table.values {
        FioValues::Continuous(c) => c
            .steps
            .iter()
            .enumerate()
            .map(|(t, s)| json!({"t": t, "train_error": s.d.train_error, "validation_error": s.d.validation_error}))
            .collect(),
        FioValues::Discrete(_) => Vec::new(),
    };
    let d0 = match &table.values {
        FioValues::Discrete(d) => json!({"d0_minus": d.d_minus[0], "d0_plus": d.d_plus[0]}),
        FioValues::Continuous(_) => {
            let s0 = ctx.initial_state(&table.model)?;
            json!({
                "d0_minus": table.d(0, &s0, Direction::Minus)?.value,
                "d0_plus": table.d(0, &s0, Direction::Plus)?.value,
            })
        }
    };
    let summary = json!({
        "horizon": table.horizon,
        "cells": table.cells.len(),
        "clamped_cells": table.cells.iter().filter(|c| c.clamped).count(),
        "heuristic_cells": table.cells.iter().filter(|c| c.solve.heuristic).count(),
        "bounds_hold": table.bounds_hold(),
        "submartingale_violations": violations.iter().map(|c| json!({"t": c.t, "node": c.node, "direction": c.direction.label(), "d": c.d, "next_mean": c.next_mean, "next_se": c.next_se})).collect::<Vec<_>>(),
        "warnings": table.warnings,
        "initial": d0,
    });
    let extra = json!({"riccati_check": riccati, "validation_errors": validation});
    announce(&ctx.out.json("fit_diagnostics.json", "summary", &summary, extra)?);
    for w in &table.warnings {
        log::warn!("{w}");
    }
    if let Some(check) = &riccati {
        if check["passed"] != json!(true) {
            return Err(CliError {
                kind: crate::error::Kind::Solver,
                message: format!("unconstrained table disagrees with the closed-form recursion: {check}"),
            });
        }
    }
    Ok(())
}

fn frontier_files(ctx: &Context, table: &FioTable) -> CliResult<()> {
    let policy = ctx.policy(table)?;
    let rho0 = policy.rho().at(0);
    let base = rho0 * ctx.config.x0;
    let spec = &ctx.config.frontier;
    let means = match &spec.means {
        Some(m) => m.clone(),
        None => {
            let top = spec
                .max_mean
                .unwrap_or(base + 2.0 * (policy.optimum().mean - base).max(0.1 * base));
            let k = spec.points.max(2);
            (0..k).map(|i| base + (top - base) * i as f64 / (k - 1) as f64).collect()
        }
    };
    let points = efficient_frontier(policy.d0_minus(), ctx.config.x0, rho0, &means)?;
    announce(&ctx.out.csv("frontier.csv", |w| Ok(write_frontier_csv(w, &points)?))?);
    let s0 = policy.s0().clone();
    let summary = json!({
        "mode": ctx.config.mode,
        "initial_state": s0,
        "lambda": policy.lambda(),
        "threshold": policy.threshold(),
        "d0_minus": policy.d0_minus(),
        "d0_plus": table.d(0, &s0, Direction::Plus)?.value,
        "sharpe": sharpe_from_d(policy.d0_minus()),
        "optimum": policy.optimum(),
    });
    announce(&ctx.out.json("policy.json", "policy", &summary, json!({}))?);
    Ok(())
}

pub fn frontier(ctx: &Context) -> CliResult<()> {
    frontier_files(ctx, &ctx.load_table()?)
}

fn simulated_paths(ctx: &Context, table: &FioTable) -> CliResult<Vec<WealthPath>> {
    let model = &table.model;
    match &ctx.config.simulation.historical {
        Some(h) => {
            let returns = read_dated_csv(&h.returns)?;
            let factors = read_dated_csv(&h.factors)?;
            let shift = match model {
                MarketModel::Factor(m) => table
                    .metadata
                    .get("factor_shift")
                    .and_then(|s| serde_json::from_str(s).ok())
                    .unwrap_or_else(|| vec![0.0; m.n_factors()]),
                MarketModel::Markov(_) => {
                    return Err(CliError::validation("historical replay needs a factor model table"))
                }
            };
            let factors = DatedSeries {
                rows: ctx.shifted(&factors, &shift),
                ..factors
            };
            historical_paths(&returns, &factors, ctx.config.horizon)?
                .into_iter()
                .map(|m| {
                    let policy = PrecommittedPolicy::new(table, ctx.config.mode, ctx.config.x0, m.states[0].clone())?;
                    Ok(apply_policy(&policy, model, m)?)
                })
                .collect()
        }
        None => {
            let policy = ctx.policy(table)?;
            Ok(rollout(&policy, model, ctx.config.simulation.paths, ctx.stream(SIMULATION_STREAM))?)
        }
    }
}

fn stats_file(ctx: &Context, table: &FioTable, paths: &[WealthPath]) -> CliResult<()> {
    let cost = ctx.cost_model(table.n_assets);
    let s = stats(paths, &table.model, cost.as_ref())?;
    let extra = json!({
        "definitions": DEFINITIONS,
        "costs": cost,
        "historical": ctx.config.simulation.historical.is_some(),
    });
    announce(&ctx.out.json("stats.json", "stats", &s, extra)?);
    println!(
        "{} paths: mean {:.6}, std {:.6}, sharpe {}",
        s.n_paths,
        s.gross.mean,
        s.gross.std,
        if s.gross.sharpe_infinite { "inf".to_string() } else { format!("{:.4}", s.gross.sharpe) }
    );
    Ok(())
}

pub fn simulate(ctx: &Context) -> CliResult<()> {
    let table = ctx.load_table()?;
    let paths = simulated_paths(ctx, &table)?;
    announce(&ctx.out.csv("paths.csv", |w| Ok(write_paths_csv(w, &paths)?))?);
    stats_file(ctx, &table, &paths)
}

fn vssm_file(ctx: &Context, table: &FioTable) -> CliResult<()> {
    let s0 = ctx.initial_state(&table.model)?;
    let seed = ctx.stream(VSSM_STREAM);
    let martingale = martingale_checks(table, &s0, ctx.config.vssm.paths, seed)?;
    let tcie = check_tcie(table, &s0, ctx.config.vssm.paths, seed)?;
    println!(
        "density mean {:.6} (se {:.2e}); TCIE verdict {:?}",
        martingale.mean_density.mean, martingale.mean_density.se, tcie.verdict
    );
    announce(&ctx.out.json("vssm.json", "martingale", &martingale, json!({ "tcie": tcie }))?);
    Ok(())
}

pub fn vssm(ctx: &Context) -> CliResult<()> {
    vssm_file(ctx, &ctx.load_table()?)
}

fn sweep_file(ctx: &Context) -> CliResult<()> {
    let spec = ctx
        .config
        .sweep
        .as_ref()
        .ok_or_else(|| CliError::validation("the config has no sweep section"))?;
    let costs = ctx
        .config
        .costs
        .ok_or_else(|| CliError::validation("the sweep needs a costs section"))?;
    let market = ctx.market()?;
    let n = market.model.n_assets();
    let s0 = ctx.initial_state(&market.model)?;
    let fit_for = |q: usize| {
        let mut cone = ctx.config.cone.clone();
        cone.cardinality = Some(q);
        let cone = cone.build(n)?;
        ctx.fit_with(&market, &cone)
    };
    let cost = CostModel {
        alpha0: costs.alpha0,
        alpha1: costs.alpha1,
        q: n,
    };
    let rows = cost_sweep(
        &spec.cardinalities,
        fit_for,
        ctx.config.mode,
        ctx.config.x0,
        &s0,
        &market.model,
        &cost,
        spec.paths.unwrap_or(ctx.config.simulation.paths),
        ctx.stream(SIMULATION_STREAM),
    )?;
    announce(&ctx.out.csv("sweep.csv", |w| Ok(write_sweep_csv(w, &rows)?))?);
    Ok(())
}

pub fn sweep(ctx: &Context) -> CliResult<()> {
    sweep_file(ctx)
}

/// Linear-interpolation percentile of sorted values.
fn percentile(sorted: &[f64], p: f64) -> f64 {
    let pos = p * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

fn coefficients_file(ctx: &Context, table: &FioTable) -> CliResult<PathBuf> {
    let n = table.n_assets;
    let mut header: Vec<String> = Vec::new();
    let mut rows: Vec<Vec<String>> = Vec::new();
    let values = |t: usize, s: &State| -> CliResult<(Vec<String>, bool)> {
        let dm = table.d(t, s, Direction::Minus)?;
        let dp = table.d(t, s, Direction::Plus)?;
        let km = table.k(t, s, Direction::Minus)?;
        let kp = table.k(t, s, Direction::Plus)?;
        let mut v = vec![dm.value.to_string(), dp.value.to_string()];
        v.extend(km.value.iter().map(|x| x.to_string()));
        v.extend(kp.value.iter().map(|x| x.to_string()));
        Ok((v, dm.extrapolated || dp.extrapolated || km.extrapolated || kp.extrapolated))
    };
    let mut value_cols = vec!["d_minus".to_string(), "d_plus".into()];
    value_cols.extend((1..=n).map(|i| format!("k_minus_{i}")));
    value_cols.extend((1..=n).map(|i| format!("k_plus_{i}")));
    match &table.values {
        FioValues::Discrete(d) => {
            header.extend(["t".to_string(), "state".into()]);
            header.extend(value_cols);
            for t in 0..table.horizon {
                for i in 0..d.d_minus[t].len() {
                    let mut row = vec![t.to_string(), i.to_string()];
                    row.extend(values(t, &State::Regime(i))?.0);
                    rows.push(row);
                }
            }
        }
        FioValues::Continuous(c) => {
            let spec = &ctx.config.coefficients;
            let dim = c.grid[0].len();
            if spec.factor >= dim || spec.t >= table.horizon || spec.points < 2 {
                return Err(CliError::validation(format!(
                    "coefficient sweep needs factor < {dim}, t < {} and at least two points",
                    table.horizon
                )));
            }
            let sorted: Vec<Vec<f64>> = (0..dim)
                .map(|j| {
                    let mut v: Vec<f64> = c.grid.iter().map(|g| g[j]).collect();
                    v.sort_by(f64::total_cmp);
                    v
                })
                .collect();
            let (lo, hi) = (percentile(&sorted[spec.factor], 0.05), percentile(&sorted[spec.factor], 0.95));
            header.extend(["case".to_string(), "t".into(), format!("s_{}", spec.factor + 1)]);
            header.extend(value_cols);
            header.push("extrapolated".into());
            for (case, p) in [("p05", 0.05), ("p50", 0.5), ("p95", 0.95)] {
                let pinned: Vec<f64> = sorted.iter().map(|v| percentile(v, p)).collect();
                for i in 0..spec.points {
                    let x = lo + (hi - lo) * i as f64 / (spec.points - 1) as f64;
                    let mut s = pinned.clone();
                    s[spec.factor] = x;
                    let (v, extrapolated) = values(spec.t, &State::Factors(s))?;
                    let mut row = vec![case.to_string(), spec.t.to_string(), x.to_string()];
                    row.extend(v);
                    row.push(extrapolated.to_string());
                    rows.push(row);
                }
            }
        }
    }
    ctx.out.csv("coefficients.csv", |w| {
        let mut csv = csv::Writer::from_writer(w);
        csv.write_record(&header)?;
        for r in &rows {
            csv.write_record(r)?;
        }
        csv.flush()?;
        Ok(())
    })
}

pub fn report(ctx: &Context) -> CliResult<()> {
    let table = ctx.load_table()?;
    frontier_files(ctx, &table)?;
    announce(&coefficients_file(ctx, &table)?);
    vssm_file(ctx, &table)?;
    let paths = simulated_paths(ctx, &table)?;
    stats_file(ctx, &table, &paths)?;
    if ctx.config.sweep.is_some() {
        sweep_file(ctx)?;
    }
    Ok(())
}
