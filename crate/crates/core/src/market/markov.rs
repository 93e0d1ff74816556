use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{ConditionalMoments, RiskFree};
use crate::error::{MmvError, Result};
use crate::linalg;

/// Distribution of the excess return vector in one regime.
#[derive(Debug, Clone, PartialEq)]
pub enum ReturnLaw {
    /// `N(mean, cov)`; `chol` is the lower Cholesky factor of `cov`.
    Gaussian {
        mean: DVector<f64>,
        cov: DMatrix<f64>,
        chol: DMatrix<f64>,
    },
    /// Finitely many outcomes. Scenario generation for the backward
    /// recursion enumerates them exactly.
    Discrete {
        outcomes: Vec<DVector<f64>>,
        probs: Vec<f64>,
    },
}

impl ReturnLaw {
    pub fn gaussian(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let n = mean.len();
        linalg::check_square(&cov, n, "regime covariance")?;
        let chol = linalg::pd_factor(&cov, "regime covariance")?;
        Ok(ReturnLaw::Gaussian { mean, cov, chol })
    }

    pub fn discrete(outcomes: Vec<DVector<f64>>, probs: Vec<f64>) -> Result<Self> {
        if outcomes.is_empty() || outcomes.len() != probs.len() {
            return Err(MmvError::InvalidModel(
                "discrete law needs one probability per outcome".into(),
            ));
        }
        let n = outcomes[0].len();
        if outcomes.iter().any(|o| o.len() != n || o.iter().any(|x| !x.is_finite())) {
            return Err(MmvError::InvalidModel("discrete outcomes must share a finite dimension".into()));
        }
        if probs.iter().any(|p| !(*p >= 0.0)) || (probs.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
            return Err(MmvError::InvalidModel(
                "discrete probabilities must be nonnegative and sum to 1".into(),
            ));
        }
        let law = ReturnLaw::Discrete { outcomes, probs };
        let (mean, second) = law.moments();
        let cov = second - &mean * mean.transpose();
        let trace = cov.trace();
        if !(trace > 0.0) || linalg::min_eigenvalue(&cov) < linalg::NEAR_SINGULAR_REL * trace {
            return Err(MmvError::InvalidModel(
                "discrete law has a singular covariance (returns not linearly independent)".into(),
            ));
        }
        Ok(law)
    }

    pub fn dim(&self) -> usize {
        match self {
            ReturnLaw::Gaussian { mean, .. } => mean.len(),
            ReturnLaw::Discrete { outcomes, .. } => outcomes[0].len(),
        }
    }

    /// Mean and second moment `E[r rᵀ]`.
    pub fn moments(&self) -> (DVector<f64>, DMatrix<f64>) {
        match self {
            ReturnLaw::Gaussian { mean, cov, .. } => (mean.clone(), cov + mean * mean.transpose()),
            ReturnLaw::Discrete { outcomes, probs } => {
                let n = outcomes[0].len();
                let mut mean = DVector::zeros(n);
                let mut second = DMatrix::zeros(n, n);
                for (o, p) in outcomes.iter().zip(probs) {
                    mean += o * *p;
                    second += o * o.transpose() * *p;
                }
                (mean, second)
            }
        }
    }

    pub(crate) fn draw_into<R: Rng + ?Sized>(&self, rng: &mut R, out: &mut Vec<f64>) {
        match self {
            ReturnLaw::Gaussian { mean, chol, .. } => {
                let n = mean.len();
                let z: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
                for i in 0..n {
                    let mut v = mean[i];
                    for (k, zk) in z.iter().enumerate().take(i + 1) {
                        v += chol[(i, k)] * zk;
                    }
                    out.push(v);
                }
            }
            ReturnLaw::Discrete { outcomes, probs } => {
                let k = draw_index(probs, rng);
                out.extend(outcomes[k].iter());
            }
        }
    }

    /// A weighted sample set for the backward recursion: `samples` draws with
    /// weight `1/samples` each, or the exact outcome list for discrete laws
    /// when `exact_discrete` is set.
    pub(crate) fn sample_set<R: Rng + ?Sized>(
        &self,
        samples: usize,
        exact_discrete: bool,
        rng: &mut R,
    ) -> (Vec<f64>, Vec<f64>) {
        match self {
            ReturnLaw::Discrete { outcomes, probs } if exact_discrete => {
                let returns = outcomes.iter().flat_map(|o| o.iter().cloned()).collect();
                (returns, probs.clone())
            }
            _ => {
                let mut returns = Vec::with_capacity(samples * self.dim());
                for _ in 0..samples {
                    self.draw_into(rng, &mut returns);
                }
                (returns, vec![1.0 / samples as f64; samples])
            }
        }
    }
}

pub(crate) fn draw_index<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (k, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return k;
        }
    }
    // Guard against rounding in the cumulative sum: fall back to the last
    // outcome with positive probability.
    probs.iter().rposition(|p| *p > 0.0).unwrap_or(probs.len() - 1)
}

#[derive(Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum LawSpec {
    Gaussian { mean: Vec<f64>, cov: Vec<Vec<f64>> },
    Discrete { outcomes: Vec<Vec<f64>>, probs: Vec<f64> },
}

#[derive(Serialize, Deserialize)]
struct MarkovSpec {
    transition: Vec<Vec<f64>>,
    regimes: Vec<LawSpec>,
    risk_free: RiskFree,
}

/// Regime-switching market: `s_t` is a Markov chain on `{0..M-1}` and
/// `r_{t+1}` is drawn from the law of regime `s_{t+1}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MarkovSpec", into = "MarkovSpec")]
pub struct MarkovChainModel {
    transition: DMatrix<f64>,
    laws: Vec<ReturnLaw>,
    risk_free: RiskFree,
}

impl TryFrom<MarkovSpec> for MarkovChainModel {
    type Error = MmvError;

    fn try_from(spec: MarkovSpec) -> Result<Self> {
        let transition = linalg::from_rows(&spec.transition, "transition")?;
        let laws = spec
            .regimes
            .into_iter()
            .map(|l| match l {
                LawSpec::Gaussian { mean, cov } => {
                    ReturnLaw::gaussian(DVector::from_vec(mean), linalg::from_rows(&cov, "cov")?)
                }
                LawSpec::Discrete { outcomes, probs } => ReturnLaw::discrete(
                    outcomes.into_iter().map(DVector::from_vec).collect(),
                    probs,
                ),
            })
            .collect::<Result<Vec<_>>>()?;
        MarkovChainModel::new(transition, laws, spec.risk_free)
    }
}

impl From<MarkovChainModel> for MarkovSpec {
    fn from(m: MarkovChainModel) -> Self {
        MarkovSpec {
            transition: linalg::to_rows(&m.transition),
            regimes: m
                .laws
                .into_iter()
                .map(|l| match l {
                    ReturnLaw::Gaussian { mean, cov, .. } => LawSpec::Gaussian {
                        mean: mean.iter().cloned().collect(),
                        cov: linalg::to_rows(&cov),
                    },
                    ReturnLaw::Discrete { outcomes, probs } => LawSpec::Discrete {
                        outcomes: outcomes.iter().map(|o| o.iter().cloned().collect()).collect(),
                        probs,
                    },
                })
                .collect(),
            risk_free: m.risk_free,
        }
    }
}

impl MarkovChainModel {
    pub fn new(transition: DMatrix<f64>, laws: Vec<ReturnLaw>, risk_free: RiskFree) -> Result<Self> {
        let m = laws.len();
        if m == 0 {
            return Err(MmvError::InvalidModel("at least one regime is required".into()));
        }
        linalg::check_square(&transition, m, "transition")?;
        for i in 0..m {
            let row = transition.row(i);
            if row.iter().any(|p| !(0.0..=1.0).contains(p)) {
                return Err(MmvError::InvalidModel(format!(
                    "transition row {i} has entries outside [0, 1]"
                )));
            }
            if (row.sum() - 1.0).abs() > 1e-12 {
                return Err(MmvError::InvalidModel(format!(
                    "transition row {i} sums to {} (expected 1)",
                    row.sum()
                )));
            }
        }
        let n = laws[0].dim();
        if laws.iter().any(|l| l.dim() != n) {
            return Err(MmvError::InvalidModel("regimes disagree on the asset count".into()));
        }
        risk_free.validate()?;
        Ok(Self {
            transition,
            laws,
            risk_free,
        })
    }

    /// Gaussian regimes `N(means[j], covs[j])`.
    pub fn gaussian(
        transition: DMatrix<f64>,
        means: Vec<DVector<f64>>,
        covs: Vec<DMatrix<f64>>,
        risk_free: RiskFree,
    ) -> Result<Self> {
        if means.len() != covs.len() {
            return Err(MmvError::InvalidModel("one covariance per regime mean is required".into()));
        }
        let laws = means
            .into_iter()
            .zip(covs)
            .map(|(m, c)| ReturnLaw::gaussian(m, c))
            .collect::<Result<Vec<_>>>()?;
        Self::new(transition, laws, risk_free)
    }

    /// Single-regime market with i.i.d. returns drawn from `law`.
    pub fn iid(law: ReturnLaw, risk_free: RiskFree) -> Result<Self> {
        Self::new(DMatrix::from_element(1, 1, 1.0), vec![law], risk_free)
    }

    pub fn n_states(&self) -> usize {
        self.laws.len()
    }

    pub fn n_assets(&self) -> usize {
        self.laws[0].dim()
    }

    pub fn transition(&self) -> &DMatrix<f64> {
        &self.transition
    }

    pub fn law(&self, regime: usize) -> &ReturnLaw {
        &self.laws[regime]
    }

    pub fn risk_free(&self) -> &RiskFree {
        &self.risk_free
    }

    pub(crate) fn draw_next_regime<R: Rng + ?Sized>(&self, from: usize, rng: &mut R) -> usize {
        let row: Vec<f64> = self.transition.row(from).iter().cloned().collect();
        draw_index(&row, rng)
    }

    pub(crate) fn conditional_moments(&self, origin: usize) -> ConditionalMoments {
        let n = self.n_assets();
        let mut mean = DVector::zeros(n);
        let mut second = DMatrix::zeros(n, n);
        for j in 0..self.n_states() {
            let p = self.transition[(origin, j)];
            if p == 0.0 {
                continue;
            }
            let (m, s) = self.laws[j].moments();
            mean += m * p;
            second += s * p;
        }
        let cov = &second - &mean * mean.transpose();
        ConditionalMoments {
            mean,
            cov,
            second_moment: second,
        }
    }

    /// Stationary distribution `π` with `πP = π`.
    pub fn stationary_distribution(&self) -> Result<Vec<f64>> {
        let m = self.n_states();
        let mut a = self.transition.transpose() - DMatrix::identity(m, m);
        for j in 0..m {
            a[(m - 1, j)] = 1.0;
        }
        let mut b = DVector::zeros(m);
        b[m - 1] = 1.0;
        let pi = a
            .lu()
            .solve(&b)
            .ok_or_else(|| MmvError::Numerical("transition matrix is not ergodic".into()))?;
        Ok(pi.iter().cloned().collect())
    }

    /// The same regime laws with every transition row replaced by the
    /// stationary distribution: returns become i.i.d. draws from the
    /// stationary mixture, so the regime carries no predictive information.
    pub fn iid_mixture(&self) -> Result<Self> {
        let pi = self.stationary_distribution()?;
        let m = self.n_states();
        let transition = DMatrix::from_fn(m, m, |_, j| pi[j]);
        // Renormalize rows so they pass the 1e-12 row-sum check exactly.
        let transition = {
            let mut t = transition;
            for i in 0..m {
                let s = t.row(i).sum();
                for j in 0..m {
                    t[(i, j)] /= s;
                }
            }
            t
        };
        Self::new(transition, self.laws.clone(), self.risk_free.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_state() -> MarkovChainModel {
        MarkovChainModel::gaussian(
            DMatrix::from_row_slice(2, 2, &[0.7, 0.3, 0.4, 0.6]),
            vec![DVector::from_vec(vec![0.1, 0.2]), DVector::from_vec(vec![-0.1, 0.0])],
            vec![DMatrix::identity(2, 2) * 0.01, DMatrix::identity(2, 2) * 0.02],
            RiskFree::Constant(1.0),
        )
        .unwrap()
    }

    #[test]
    fn rejects_non_stochastic_rows() {
        let err = MarkovChainModel::gaussian(
            DMatrix::from_row_slice(1, 1, &[0.9]),
            vec![DVector::from_vec(vec![0.1])],
            vec![DMatrix::identity(1, 1)],
            RiskFree::Constant(1.0),
        );
        assert!(err.is_err());
    }

    #[test]
    fn rejects_singular_covariance() {
        let err = MarkovChainModel::gaussian(
            DMatrix::identity(1, 1),
            vec![DVector::from_vec(vec![0.1, 0.1])],
            vec![DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0])],
            RiskFree::Constant(1.0),
        );
        assert!(err.is_err());
    }

    #[test]
    fn stationary_distribution_of_two_regime_chain() {
        let pi = two_state().stationary_distribution().unwrap();
        assert!((pi[0] - 4.0 / 7.0).abs() < 1e-12);
        assert!((pi[1] - 3.0 / 7.0).abs() < 1e-12);
    }

    #[test]
    fn json_round_trip() {
        let m = two_state();
        let json = serde_json::to_string(&m).unwrap();
        let back: MarkovChainModel = serde_json::from_str(&json).unwrap();
        assert_eq!(m, back);
    }

    #[test]
    fn discrete_law_moments() {
        let law = ReturnLaw::discrete(
            vec![DVector::from_vec(vec![0.3]), DVector::from_vec(vec![-0.1])],
            vec![0.5, 0.5],
        )
        .unwrap();
        let (m, s) = law.moments();
        assert!((m[0] - 0.1).abs() < 1e-15);
        assert!((s[(0, 0)] - 0.05).abs() < 1e-15);
    }
}
