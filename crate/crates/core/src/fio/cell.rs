//! One cell of the backward recursion: a cone-constrained minimization of a
//! convex, continuously differentiable, piecewise-quadratic sample average.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::cones::{ConeConstraint, ConvexCone, SupportPattern, DEFAULT_ENUMERATION_CAP};
use crate::error::{MmvError, Result};
use crate::qp;
use crate::seed;

/// Which of the two cell problems is solved.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    /// `min E[(1 − rᵀk)² (d⁻ 1{rᵀk ≤ 1} + d⁺ 1{rᵀk > 1})]`
    Minus,
    /// `min E[(1 + rᵀk)² (d⁻ 1{rᵀk ≥ −1} + d⁺ 1{rᵀk < −1})]`
    Plus,
}

impl Direction {
    fn sign(self) -> f64 {
        match self {
            Direction::Minus => -1.0,
            Direction::Plus => 1.0,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Direction::Minus => "minus",
            Direction::Plus => "plus",
        }
    }
}

/// Weighted scenarios for one cell: returns `r^(ℓ)`, probability weights and
/// the next-period values `d⁻_{t+1}`, `d⁺_{t+1}` attached to each scenario.
#[derive(Debug, Clone, PartialEq)]
pub struct CellSamples {
    n_assets: usize,
    returns: Vec<f64>,
    weights: Vec<f64>,
    d_minus: Vec<f64>,
    d_plus: Vec<f64>,
}

impl CellSamples {
    /// `returns` is row-major `L x N`; weights must be nonnegative and sum
    /// to one; next-period values must lie in `(0, 1]`.
    pub fn new(
        n_assets: usize,
        returns: Vec<f64>,
        weights: Vec<f64>,
        d_minus: Vec<f64>,
        d_plus: Vec<f64>,
    ) -> Result<Self> {
        let l = weights.len();
        if n_assets == 0 || l == 0 {
            return Err(MmvError::Domain("a cell needs at least one asset and one sample".into()));
        }
        if returns.len() != l * n_assets || d_minus.len() != l || d_plus.len() != l {
            return Err(MmvError::Domain("cell sample arrays disagree in length".into()));
        }
        if returns.iter().any(|v| !v.is_finite()) {
            return Err(MmvError::Domain("cell returns must be finite".into()));
        }
        if weights.iter().any(|w| !(*w >= 0.0)) || (weights.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(MmvError::Domain("cell weights must be nonnegative and sum to 1".into()));
        }
        if d_minus
            .iter()
            .chain(&d_plus)
            .any(|d| !(*d > 0.0 && *d <= 1.0 + 1e-9))
        {
            return Err(MmvError::Domain("next-period d values must lie in (0, 1]".into()));
        }
        Ok(Self {
            n_assets,
            returns,
            weights,
            d_minus,
            d_plus,
        })
    }

    /// Equally weighted samples.
    pub fn uniform(
        n_assets: usize,
        returns: Vec<f64>,
        d_minus: Vec<f64>,
        d_plus: Vec<f64>,
    ) -> Result<Self> {
        let l = d_minus.len();
        Self::new(n_assets, returns, vec![1.0 / l.max(1) as f64; l], d_minus, d_plus)
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn n_assets(&self) -> usize {
        self.n_assets
    }

    pub fn return_at(&self, l: usize) -> &[f64] {
        &self.returns[l * self.n_assets..(l + 1) * self.n_assets]
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn d_minus(&self) -> &[f64] {
        &self.d_minus
    }

    pub fn d_plus(&self) -> &[f64] {
        &self.d_plus
    }

    /// Weighted mean and standard error of the next-period value selected
    /// by `direction`.
    pub fn next_mean(&self, direction: Direction) -> (f64, f64) {
        let d = match direction {
            Direction::Minus => &self.d_minus,
            Direction::Plus => &self.d_plus,
        };
        let mean: f64 = self.weights.iter().zip(d).map(|(w, v)| w * v).sum();
        let var: f64 = self
            .weights
            .iter()
            .zip(d)
            .map(|(w, v)| w * w * (v - mean).powi(2))
            .sum();
        (mean, var.sqrt())
    }
}

/// A cell problem: samples, admissible cone and direction.
#[derive(Debug, Clone, Copy)]
pub struct FioCellInput<'a> {
    pub samples: &'a CellSamples,
    pub cone: &'a ConeConstraint,
    pub direction: Direction,
}

/// Settings of the cell solver.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverOptions {
    /// Required projected-gradient residual `‖k − P(k − ∇h)‖`.
    pub tol: f64,
    pub max_iter: usize,
    /// Number of starting points (zero, the projected unconstrained
    /// minimizer, then random feasible points).
    pub multistarts: usize,
    pub enumeration_cap: usize,
    /// Greedy forward selection over supports instead of full enumeration.
    /// The result is flagged as heuristic.
    pub greedy: bool,
    /// Seed for the random starting points.
    pub seed: u64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iter: 2000,
            multistarts: 5,
            enumeration_cap: DEFAULT_ENUMERATION_CAP,
            greedy: false,
            seed: 0,
        }
    }
}

/// Convergence information of one cell solve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveDiagnostics {
    pub iterations: usize,
    pub residual: f64,
    /// Support of the winning pattern when the cone has a cardinality bound.
    pub support: Option<Vec<usize>>,
    pub restarts: usize,
    pub patterns: usize,
    /// Set when greedy support search replaced full enumeration.
    pub heuristic: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FioCellOutput {
    pub k_star: Vec<f64>,
    /// Attained sample-average objective.
    pub d_star: f64,
    pub diagnostics: SolveDiagnostics,
}

/// Branch weight of one sample: `d⁻` unless the scaled wealth changes sign.
#[inline]
fn branch_weight(z: f64, dm: f64, dp: f64) -> f64 {
    if z >= 0.0 {
        dm
    } else {
        dp
    }
}

/// Sample-average objective `h(k)` of the cell.
pub fn saa_objective(input: &FioCellInput, k: &[f64]) -> Result<f64> {
    let s = input.samples;
    if k.len() != s.n_assets {
        return Err(MmvError::Domain(format!(
            "k has dimension {}, samples have {} assets",
            k.len(),
            s.n_assets
        )));
    }
    let sign = input.direction.sign();
    let mut total = 0.0;
    for l in 0..s.len() {
        let u: f64 = s.return_at(l).iter().zip(k).map(|(r, k)| r * k).sum();
        let z = 1.0 + sign * u;
        total += s.weights[l] * z * z * branch_weight(z, s.d_minus[l], s.d_plus[l]);
    }
    Ok(total)
}

/// Analytic gradient `∇h(k) = 2 σ Σ w d z r` with `z = 1 + σ rᵀk`.
pub fn saa_gradient(input: &FioCellInput, k: &[f64]) -> Result<Vec<f64>> {
    let s = input.samples;
    if k.len() != s.n_assets {
        return Err(MmvError::Domain("k dimension mismatch".into()));
    }
    let sign = input.direction.sign();
    let mut g = vec![0.0; s.n_assets];
    for l in 0..s.len() {
        let r = s.return_at(l);
        let u: f64 = r.iter().zip(k).map(|(r, k)| r * k).sum();
        let z = 1.0 + sign * u;
        let c = 2.0 * sign * s.weights[l] * z * branch_weight(z, s.d_minus[l], s.d_plus[l]);
        for (gi, ri) in g.iter_mut().zip(r) {
            *gi += c * ri;
        }
    }
    Ok(g)
}

/// The cell restricted to one support: returns gathered into reduced
/// coordinates.
struct Restricted<'a> {
    samples: &'a CellSamples,
    sign: f64,
    cone: ConvexCone,
    /// Row-major `L x m`.
    returns: Vec<f64>,
    m: usize,
}

struct Eval {
    f: f64,
    grad: DVector<f64>,
}

impl<'a> Restricted<'a> {
    fn new(samples: &'a CellSamples, direction: Direction, cone: ConvexCone) -> Self {
        let idx = cone.support().indices().to_vec();
        let m = idx.len();
        let mut returns = Vec::with_capacity(samples.len() * m);
        for l in 0..samples.len() {
            let r = samples.return_at(l);
            returns.extend(idx.iter().map(|&i| r[i]));
        }
        Self {
            samples,
            sign: direction.sign(),
            cone,
            returns,
            m,
        }
    }

    fn row(&self, l: usize) -> &[f64] {
        &self.returns[l * self.m..(l + 1) * self.m]
    }

    fn value(&self, k: &DVector<f64>) -> f64 {
        let s = self.samples;
        let mut f = 0.0;
        for l in 0..s.len() {
            let u: f64 = self.row(l).iter().zip(k.iter()).map(|(r, k)| r * k).sum();
            let z = 1.0 + self.sign * u;
            f += s.weights[l] * z * z * branch_weight(z, s.d_minus[l], s.d_plus[l]);
        }
        f
    }

    fn eval(&self, k: &DVector<f64>) -> Eval {
        let s = self.samples;
        let mut f = 0.0;
        let mut grad = DVector::zeros(self.m);
        for l in 0..s.len() {
            let r = self.row(l);
            let u: f64 = r.iter().zip(k.iter()).map(|(r, k)| r * k).sum();
            let z = 1.0 + self.sign * u;
            let wd = s.weights[l] * branch_weight(z, s.d_minus[l], s.d_plus[l]);
            f += wd * z * z;
            let c = 2.0 * self.sign * wd * z;
            for (g, ri) in grad.iter_mut().zip(r) {
                *g += c * ri;
            }
        }
        Eval { f, grad }
    }

    /// Quadratic model with the branches frozen at `k`:
    /// `½ xᵀH x − gᵀx + const` with `H = 2 Σ w d r rᵀ`, `g = −2σ Σ w d r`.
    fn frozen_model(&self, k: &DVector<f64>) -> (DMatrix<f64>, DVector<f64>) {
        let s = self.samples;
        let m = self.m;
        let mut h = DMatrix::zeros(m, m);
        let mut g = DVector::zeros(m);
        for l in 0..s.len() {
            let r = self.row(l);
            let u: f64 = r.iter().zip(k.iter()).map(|(r, k)| r * k).sum();
            let z = 1.0 + self.sign * u;
            let wd = s.weights[l] * branch_weight(z, s.d_minus[l], s.d_plus[l]);
            for a in 0..m {
                g[a] -= 2.0 * self.sign * wd * r[a];
                for b in 0..=a {
                    h[(a, b)] += 2.0 * wd * r[a] * r[b];
                }
            }
        }
        for a in 0..m {
            for b in 0..a {
                h[(b, a)] = h[(a, b)];
            }
        }
        (h, g)
    }

    fn residual(&self, k: &DVector<f64>, grad: &DVector<f64>) -> Result<f64> {
        let p = self.cone.project(&(k - grad))?;
        Ok((k - p).norm())
    }

    /// Generalized Newton iteration from a feasible start: minimize the
    /// frozen-branch quadratic model exactly over the cone, then line-search
    /// the true objective along the segment. Falls back to a projected
    /// gradient step when the model step makes no progress.
    fn descend(&self, start: DVector<f64>, opts: &SolverOptions) -> Result<(DVector<f64>, f64, f64, usize)> {
        let mut k = start;
        let mut e = self.eval(&k);
        let mut res = self.residual(&k, &e.grad)?;
        let mut step_pg = 1.0;
        for it in 0..opts.max_iter {
            if res <= opts.tol {
                return Ok((k, e.f, res, it));
            }
            let (h, g) = self.frozen_model(&k);
            let target = qp::solve(&h, &g, self.cone.constraints())?.x;
            let p = &target - &k;
            let slope = e.grad.dot(&p);
            let mut moved = false;
            if slope < 0.0 {
                let mut t = 1.0;
                while t > 1e-12 {
                    let cand = &k + &p * t;
                    let f = self.value(&cand);
                    if f <= e.f + 1e-4 * t * slope {
                        k = cand;
                        moved = true;
                        break;
                    }
                    t *= 0.5;
                }
            }
            if !moved {
                // Projected gradient with backtracking.
                let mut t = step_pg;
                while t > 1e-16 {
                    let cand = self.cone.project(&(&k - &e.grad * t))?;
                    let d = &cand - &k;
                    let f = self.value(&cand);
                    if f <= e.f + 1e-4 * e.grad.dot(&d) && d.norm() > 0.0 {
                        k = cand;
                        moved = true;
                        step_pg = (t * 2.0).min(1e6);
                        break;
                    }
                    t *= 0.5;
                }
                if !moved {
                    // No representable decrease: the residual is at the
                    // floating-point floor of this objective.
                    return Ok((k, e.f, res, it));
                }
            }
            e = self.eval(&k);
            res = self.residual(&k, &e.grad)?;
        }
        if res <= opts.tol {
            return Ok((k, e.f, res, opts.max_iter));
        }
        Err(MmvError::Solver {
            iterations: opts.max_iter,
            residual: res,
            best: self.cone.embed(&k, self.samples.n_assets).iter().cloned().collect(),
            context: String::new(),
        })
    }

    fn starts(&self, opts: &SolverOptions) -> Result<Vec<DVector<f64>>> {
        let mut out = vec![DVector::zeros(self.m)];
        if opts.multistarts >= 2 {
            let (h, g) = self.frozen_model(&DVector::zeros(self.m));
            let unconstrained = h
                .clone()
                .cholesky()
                .map(|c| c.solve(&g))
                .or_else(|| h.svd(true, true).solve(&g, 1e-14).ok());
            if let Some(x) = unconstrained {
                out.push(self.cone.project(&x)?);
            }
        }
        let mut rng = seed::rng(seed::child_seed(
            opts.seed,
            &[seed::tag::MULTISTART, self.cone.support().indices().iter().fold(0u64, |a, &i| a * 131 + i as u64 + 1)],
        ));
        let scale = out.last().map_or(1.0, |x| x.norm().max(1.0));
        while out.len() < opts.multistarts.max(1) {
            use rand_distr::{Distribution, StandardNormal};
            let v = DVector::from_fn(self.m, |_, _| {
                let z: f64 = StandardNormal.sample(&mut rng);
                z * scale
            });
            out.push(self.cone.project(&v)?);
        }
        Ok(out)
    }

    fn solve(&self, opts: &SolverOptions) -> Result<(DVector<f64>, f64, f64, usize, usize)> {
        let mut best: Option<(DVector<f64>, f64, f64)> = None;
        let mut iterations = 0;
        let mut last_err = None;
        let starts = self.starts(opts)?;
        let restarts = starts.len();
        for start in starts {
            match self.descend(start, opts) {
                Ok((k, f, res, it)) => {
                    iterations += it;
                    if best.as_ref().is_none_or(|b| f < b.1) {
                        best = Some((k, f, res));
                    }
                }
                Err(e) => last_err = Some(e),
            }
        }
        match best {
            Some((k, f, res)) => Ok((k, f, res, iterations, restarts)),
            None => Err(last_err.expect("at least one start")),
        }
    }
}

/// Solves the cell: every support pattern of a cardinality cone (or the
/// single convex cone otherwise) is solved to the residual tolerance and the
/// pattern with the smallest objective wins. Ties keep the earlier, smaller
/// support.
pub fn solve_cell(input: &FioCellInput, opts: &SolverOptions) -> Result<FioCellOutput> {
    let cone = input.cone;
    let s = input.samples;
    if cone.dim() != s.n_assets {
        return Err(MmvError::Domain(format!(
            "cone dimension {} does not match {} assets",
            cone.dim(),
            s.n_assets
        )));
    }
    let n = s.n_assets;
    let cardinal = cone.cardinality_bound().filter(|q| *q < n);
    let solve_support = |support: SupportPattern| -> Result<(DVector<f64>, f64, f64, usize, usize)> {
        let r = Restricted::new(s, input.direction, cone.restricted(support));
        let (k, f, res, it, restarts) = r.solve(opts)?;
        Ok((r.cone.embed(&k, n), f, res, it, restarts))
    };

    let mut iterations = 0;
    let mut restarts = 0;
    let mut patterns = 0;
    let mut best: Option<(DVector<f64>, f64, f64, Vec<usize>)> = None;
    let mut consider = |support: Vec<usize>,
                        out: (DVector<f64>, f64, f64, usize, usize),
                        best: &mut Option<(DVector<f64>, f64, f64, Vec<usize>)>| {
        iterations += out.3;
        restarts += out.4;
        patterns += 1;
        if best.as_ref().is_none_or(|b| out.1 < b.1) {
            *best = Some((out.0, out.1, out.2, support));
        }
    };

    match cardinal {
        None => {
            let support = SupportPattern((0..n).collect());
            let out = solve_support(support.clone())?;
            consider(support.0, out, &mut best);
        }
        Some(q) if opts.greedy => {
            let mut current: Vec<usize> = Vec::new();
            let mut current_f = saa_objective(input, &vec![0.0; n])?;
            for _ in 0..q {
                let mut round: Option<(DVector<f64>, f64, f64, Vec<usize>)> = None;
                for i in (0..n).filter(|i| !current.contains(i)) {
                    let mut cand = current.clone();
                    cand.push(i);
                    cand.sort_unstable();
                    let out = solve_support(SupportPattern(cand.clone()))?;
                    consider(cand, out, &mut round);
                }
                match round {
                    Some(r) if r.1 < current_f => {
                        current = r.3.clone();
                        current_f = r.1;
                        best = Some(r);
                    }
                    _ => break,
                }
            }
            if best.is_none() {
                best = Some((DVector::zeros(n), current_f, 0.0, Vec::new()));
            }
        }
        Some(_) => {
            for support in cone.enumerate_supports(opts.enumeration_cap)? {
                let out = solve_support(support.clone())?;
                consider(support.0, out, &mut best);
            }
        }
    }

    let (k, _, residual, support) = best.expect("at least one pattern solved");
    let k_star: Vec<f64> = k.iter().cloned().collect();
    let d_star = saa_objective(input, &k_star)?;
    Ok(FioCellOutput {
        k_star,
        d_star,
        diagnostics: SolveDiagnostics {
            iterations,
            residual,
            support: cardinal.map(|_| support),
            restarts,
            patterns,
            heuristic: cardinal.is_some() && opts.greedy,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_point() -> CellSamples {
        CellSamples::uniform(1, vec![0.3, -0.1], vec![1.0; 2], vec![1.0; 2]).unwrap()
    }

    #[test]
    fn objective_at_zero_is_mean_d_minus() {
        let s = CellSamples::uniform(1, vec![0.3, -0.1], vec![0.5, 0.7], vec![0.9, 0.9]).unwrap();
        let cone = ConeConstraint::unconstrained(1);
        for direction in [Direction::Minus, Direction::Plus] {
            let input = FioCellInput {
                samples: &s,
                cone: &cone,
                direction,
            };
            assert!((saa_objective(&input, &[0.0]).unwrap() - 0.6).abs() < 1e-15);
        }
    }

    #[test]
    fn hand_values() {
        let s = two_point();
        let cone = ConeConstraint::unconstrained(1);
        let input = FioCellInput {
            samples: &s,
            cone: &cone,
            direction: Direction::Minus,
        };
        assert!((saa_objective(&input, &[2.0]).unwrap() - 0.8).abs() < 1e-15);
        let out = solve_cell(&input, &SolverOptions::default()).unwrap();
        assert!((out.k_star[0] - 2.0).abs() < 1e-9);
        assert!((out.d_star - 0.8).abs() < 1e-12);
    }

    #[test]
    fn symmetric_market_does_not_invest() {
        let s = CellSamples::uniform(1, vec![0.1, -0.1], vec![1.0; 2], vec![1.0; 2]).unwrap();
        let cone = ConeConstraint::nonnegative(1);
        let input = FioCellInput {
            samples: &s,
            cone: &cone,
            direction: Direction::Minus,
        };
        let out = solve_cell(&input, &SolverOptions::default()).unwrap();
        assert_eq!(out.k_star, vec![0.0]);
        assert_eq!(out.d_star, 1.0);
    }

    #[test]
    fn plus_direction_shorts_unconstrained() {
        let s = two_point();
        let cone = ConeConstraint::unconstrained(1);
        let input = FioCellInput {
            samples: &s,
            cone: &cone,
            direction: Direction::Plus,
        };
        let out = solve_cell(&input, &SolverOptions::default()).unwrap();
        assert!((out.k_star[0] + 2.0).abs() < 1e-9);
        assert!((out.d_star - 0.8).abs() < 1e-12);
    }
}
