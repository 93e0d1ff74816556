use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{ConditionalMoments, RiskFree};
use crate::error::{MmvError, Result};
use crate::linalg;

#[derive(Serialize, Deserialize)]
struct FactorSpec {
    alpha: Vec<f64>,
    #[serde(rename = "B")]
    loadings: Vec<Vec<f64>>,
    #[serde(rename = "Phi")]
    phi: Vec<Vec<f64>>,
    sigma_eps: Vec<Vec<f64>>,
    sigma_xi: Vec<Vec<f64>>,
    risk_free: RiskFree,
}

/// Linear factor model with mean-reverting factors:
///
/// ```text
/// r_t = alpha + B s_t + eps_t,      eps_t ~ N(0, sigma_eps)
/// s_t = (I - Phi) s_{t-1} + xi_t,   xi_t  ~ N(0, sigma_xi)
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "FactorSpec", into = "FactorSpec")]
pub struct LinearFactorModel {
    alpha: DVector<f64>,
    loadings: DMatrix<f64>,
    phi: DMatrix<f64>,
    sigma_eps: DMatrix<f64>,
    sigma_xi: DMatrix<f64>,
    risk_free: RiskFree,
    transition: DMatrix<f64>,
    eps_factor: DMatrix<f64>,
    xi_factor: DMatrix<f64>,
}

impl TryFrom<FactorSpec> for LinearFactorModel {
    type Error = MmvError;

    fn try_from(s: FactorSpec) -> Result<Self> {
        LinearFactorModel::new(
            DVector::from_vec(s.alpha),
            linalg::from_rows(&s.loadings, "B")?,
            linalg::from_rows(&s.phi, "Phi")?,
            linalg::from_rows(&s.sigma_eps, "sigma_eps")?,
            linalg::from_rows(&s.sigma_xi, "sigma_xi")?,
            s.risk_free,
        )
    }
}

impl From<LinearFactorModel> for FactorSpec {
    fn from(m: LinearFactorModel) -> Self {
        FactorSpec {
            alpha: m.alpha.iter().cloned().collect(),
            loadings: linalg::to_rows(&m.loadings),
            phi: linalg::to_rows(&m.phi),
            sigma_eps: linalg::to_rows(&m.sigma_eps),
            sigma_xi: linalg::to_rows(&m.sigma_xi),
            risk_free: m.risk_free,
        }
    }
}

impl LinearFactorModel {
    pub fn new(
        alpha: DVector<f64>,
        loadings: DMatrix<f64>,
        phi: DMatrix<f64>,
        sigma_eps: DMatrix<f64>,
        sigma_xi: DMatrix<f64>,
        risk_free: RiskFree,
    ) -> Result<Self> {
        let n = alpha.len();
        let ns = loadings.ncols();
        if n == 0 || ns == 0 {
            return Err(MmvError::InvalidModel("empty asset or factor dimension".into()));
        }
        if loadings.nrows() != n {
            return Err(MmvError::InvalidModel(format!(
                "B must be {n}x{ns}, got {}x{}",
                loadings.nrows(),
                ns
            )));
        }
        if alpha.iter().chain(loadings.iter()).any(|v| !v.is_finite()) {
            return Err(MmvError::InvalidModel("alpha and B must be finite".into()));
        }
        linalg::check_square(&phi, ns, "Phi")?;
        linalg::check_square(&sigma_eps, n, "sigma_eps")?;
        linalg::check_square(&sigma_xi, ns, "sigma_xi")?;
        let eps_factor = linalg::pd_factor(&sigma_eps, "sigma_eps")?;
        let xi_factor = linalg::psd_factor(&sigma_xi, "sigma_xi")?;
        risk_free.validate()?;
        let transition = DMatrix::identity(ns, ns) - &phi;
        let radius = linalg::spectral_radius(&transition);
        if radius >= 1.0 {
            log::warn!("factor dynamics are not mean-reverting: spectral radius of I - Phi is {radius:.4}");
        }
        Ok(Self {
            alpha,
            loadings,
            phi,
            sigma_eps,
            sigma_xi,
            risk_free,
            transition,
            eps_factor,
            xi_factor,
        })
    }

    pub fn n_assets(&self) -> usize {
        self.alpha.len()
    }

    pub fn n_factors(&self) -> usize {
        self.loadings.ncols()
    }

    pub fn alpha(&self) -> &DVector<f64> {
        &self.alpha
    }

    pub fn loadings(&self) -> &DMatrix<f64> {
        &self.loadings
    }

    pub fn phi(&self) -> &DMatrix<f64> {
        &self.phi
    }

    pub fn sigma_eps(&self) -> &DMatrix<f64> {
        &self.sigma_eps
    }

    pub fn sigma_xi(&self) -> &DMatrix<f64> {
        &self.sigma_xi
    }

    pub fn risk_free(&self) -> &RiskFree {
        &self.risk_free
    }

    /// Spectral radius of `I - Phi`; below 1 means the factors are stationary.
    pub fn spectral_radius(&self) -> f64 {
        linalg::spectral_radius(&self.transition)
    }

    fn normal_draw<R: Rng + ?Sized>(factor: &DMatrix<f64>, rng: &mut R) -> DVector<f64> {
        let z = DVector::from_fn(factor.ncols(), |_, _| rng.sample(StandardNormal));
        factor * z
    }

    /// One step of the dynamics from `s`: returns `(s_{t+1}, r_{t+1})`.
    pub(crate) fn draw<R: Rng + ?Sized>(
        &self,
        s: &DVector<f64>,
        rng: &mut R,
    ) -> (DVector<f64>, DVector<f64>) {
        let s_next = &self.transition * s + Self::normal_draw(&self.xi_factor, rng);
        let r = &self.alpha + &self.loadings * &s_next + Self::normal_draw(&self.eps_factor, rng);
        (s_next, r)
    }

    pub(crate) fn conditional_moments(&self, s: &DVector<f64>) -> ConditionalMoments {
        let mean = &self.alpha + &self.loadings * (&self.transition * s);
        let cov = &self.loadings * &self.sigma_xi * self.loadings.transpose() + &self.sigma_eps;
        let second_moment = &cov + &mean * mean.transpose();
        ConditionalMoments {
            mean,
            cov,
            second_moment,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model() -> LinearFactorModel {
        LinearFactorModel::new(
            DVector::from_vec(vec![0.01, 0.02]),
            DMatrix::from_row_slice(2, 1, &[0.5, -0.3]),
            DMatrix::from_row_slice(1, 1, &[0.2]),
            DMatrix::from_row_slice(2, 2, &[0.02, 0.005, 0.005, 0.03]),
            DMatrix::from_row_slice(1, 1, &[0.01]),
            RiskFree::Constant(1.001),
        )
        .unwrap()
    }

    #[test]
    fn json_round_trip() {
        let m = model();
        let json = serde_json::to_string(&m).unwrap();
        assert!(json.contains("\"Phi\""));
        let back: LinearFactorModel = serde_json::from_str(&json).unwrap();
        assert_eq!(m, back);
    }

    #[test]
    fn moments_follow_state() {
        let m = model();
        let s = DVector::from_vec(vec![1.0]);
        let cm = m.conditional_moments(&s);
        assert!((cm.mean[0] - (0.01 + 0.5 * 0.8)).abs() < 1e-15);
        assert!((cm.cov[(0, 0)] - (0.25 * 0.01 + 0.02)).abs() < 1e-15);
    }

    #[test]
    fn rejects_singular_noise() {
        let err = LinearFactorModel::new(
            DVector::from_vec(vec![0.0, 0.0]),
            DMatrix::from_row_slice(2, 1, &[1.0, 1.0]),
            DMatrix::identity(1, 1),
            DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]),
            DMatrix::zeros(1, 1),
            RiskFree::Constant(1.0),
        );
        assert!(err.is_err());
    }
}
