use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{LinearFactorModel, RiskFree};
use crate::error::{MmvError, Result};
use crate::linalg;

/// Relative residual norm below which a regressor column counts as a linear
/// combination of the preceding ones.
const RANK_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CalibrationOptions {
    /// Subtract per-column factor means before both regressions.
    pub demean_factors: bool,
    /// Factor column names used in error messages; defaults to `f1, f2, ...`.
    pub factor_names: Vec<String>,
}

/// Least-squares estimates of the linear factor model plus fit statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub n_obs: usize,
    #[serde(with = "linalg::serde_vec")]
    pub alpha: DVector<f64>,
    #[serde(rename = "B", with = "linalg::serde_rows")]
    pub loadings: DMatrix<f64>,
    #[serde(rename = "Phi", with = "linalg::serde_rows")]
    pub phi: DMatrix<f64>,
    #[serde(with = "linalg::serde_rows")]
    pub sigma_eps: DMatrix<f64>,
    #[serde(with = "linalg::serde_rows")]
    pub sigma_xi: DMatrix<f64>,
    /// In-sample R² of each return equation.
    pub r2_returns: Vec<f64>,
    /// In-sample R² of each factor equation.
    pub r2_factors: Vec<f64>,
    /// Means removed from the factors (zeros unless demeaning was requested).
    pub factor_means: Vec<f64>,
    /// Spectral radius of `I - Phi`.
    pub spectral_radius: f64,
}

impl CalibrationReport {
    /// Builds the model; fails if a residual covariance is not admissible
    /// (for instance a noiseless return equation gives `sigma_eps = 0`).
    pub fn model(&self, risk_free: RiskFree) -> Result<LinearFactorModel> {
        LinearFactorModel::new(
            self.alpha.clone(),
            self.loadings.clone(),
            self.phi.clone(),
            self.sigma_eps.clone(),
            self.sigma_xi.clone(),
            risk_free,
        )
    }
}

/// Names the first column of `x` that lies in the span of the columns before it.
fn check_rank(x: &DMatrix<f64>, names: &[String]) -> Result<()> {
    let mut basis: Vec<DVector<f64>> = Vec::new();
    for (j, name) in names.iter().enumerate() {
        let col = x.column(j).into_owned();
        let scale = col.norm();
        let mut v = col;
        for q in &basis {
            let c = q.dot(&v);
            v -= q * c;
        }
        let rest = v.norm();
        if scale == 0.0 || rest <= RANK_TOL * scale {
            return Err(MmvError::Calibration(format!(
                "regressor matrix is rank deficient: column '{name}' is a linear combination of the others"
            )));
        }
        basis.push(v / rest);
    }
    Ok(())
}

fn least_squares(x: &DMatrix<f64>, y: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    x.clone()
        .svd(true, true)
        .solve(y, 1e-14)
        .map_err(|e| MmvError::Calibration(format!("least squares failed: {e}")))
}

fn r_squared(y: &DMatrix<f64>, resid: &DMatrix<f64>) -> Vec<f64> {
    (0..y.ncols())
        .map(|j| {
            let col = y.column(j);
            let mean = col.mean();
            let sst: f64 = col.iter().map(|v| (v - mean).powi(2)).sum();
            let ssr: f64 = resid.column(j).iter().map(|v| v * v).sum();
            if sst == 0.0 {
                if ssr == 0.0 {
                    1.0
                } else {
                    0.0
                }
            } else {
                1.0 - ssr / sst
            }
        })
        .collect()
}

fn residual_cov(resid: &DMatrix<f64>, dof: usize) -> DMatrix<f64> {
    let c = resid.transpose() * resid / dof as f64;
    (&c + c.transpose()) * 0.5
}

/// OLS calibration: `r_t` on `[1, s_t]` gives `(alpha, B)`; `s_t` on
/// `s_{t-1}` without intercept gives `I - Phi`. Residual covariances use the
/// degrees-of-freedom corrected denominator.
pub fn calibrate_linear_factor(
    returns: &DMatrix<f64>,
    factors: &DMatrix<f64>,
    options: &CalibrationOptions,
) -> Result<CalibrationReport> {
    let (t_obs, n) = returns.shape();
    let ns = factors.ncols();
    if factors.nrows() != t_obs {
        return Err(MmvError::Calibration(format!(
            "returns have {t_obs} rows but factors have {}",
            factors.nrows()
        )));
    }
    if n == 0 || ns == 0 {
        return Err(MmvError::Calibration("need at least one return and one factor column".into()));
    }
    if t_obs < ns + 2 {
        return Err(MmvError::Calibration(format!(
            "{t_obs} observations are too few for {ns} factors (need at least {})",
            ns + 2
        )));
    }
    if returns.iter().chain(factors.iter()).any(|v| !v.is_finite()) {
        return Err(MmvError::Calibration("inputs contain non-finite values".into()));
    }
    let names: Vec<String> = (0..ns)
        .map(|j| {
            options
                .factor_names
                .get(j)
                .cloned()
                .unwrap_or_else(|| format!("f{}", j + 1))
        })
        .collect();

    let factor_means: Vec<f64> = if options.demean_factors {
        (0..ns).map(|j| factors.column(j).mean()).collect()
    } else {
        vec![0.0; ns]
    };
    let s = DMatrix::from_fn(t_obs, ns, |i, j| factors[(i, j)] - factor_means[j]);

    // Return equation.
    let mut x = DMatrix::from_element(t_obs, ns + 1, 1.0);
    x.view_mut((0, 1), (t_obs, ns)).copy_from(&s);
    let mut x_names = vec!["intercept".to_string()];
    x_names.extend(names.iter().cloned());
    check_rank(&x, &x_names)?;
    let coef = least_squares(&x, returns)?;
    let resid = returns - &x * &coef;
    let alpha = coef.row(0).transpose();
    let loadings = coef.rows(1, ns).transpose();
    let sigma_eps = residual_cov(&resid, t_obs - ns - 1);
    let r2_returns = r_squared(returns, &resid);

    // Factor equation.
    let lagged = s.rows(0, t_obs - 1).into_owned();
    let current = s.rows(1, t_obs - 1).into_owned();
    let lag_names: Vec<String> = names.iter().map(|n| format!("lagged {n}")).collect();
    check_rank(&lagged, &lag_names)?;
    let g = least_squares(&lagged, &current)?;
    let resid_s = &current - &lagged * &g;
    let transition = g.transpose();
    let phi = DMatrix::identity(ns, ns) - &transition;
    let sigma_xi = residual_cov(&resid_s, (t_obs - 1 - ns).max(1));
    let r2_factors = r_squared(&current, &resid_s);

    Ok(CalibrationReport {
        n_obs: t_obs,
        alpha,
        loadings,
        phi,
        sigma_eps,
        sigma_xi,
        r2_returns,
        r2_factors,
        factor_means,
        spectral_radius: linalg::spectral_radius(&transition),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_factor_is_named() {
        let t = 20;
        let f = DMatrix::from_fn(t, 2, |i, _| (i as f64).sin());
        let r = DMatrix::from_fn(t, 1, |i, _| i as f64 * 0.01);
        let opts = CalibrationOptions {
            factor_names: vec!["mkt".into(), "smb".into()],
            ..Default::default()
        };
        let err = calibrate_linear_factor(&r, &f, &opts).unwrap_err();
        assert!(err.to_string().contains("'smb'"), "{err}");
    }

    #[test]
    fn too_few_rows() {
        let f = DMatrix::from_element(3, 2, 1.0);
        let r = DMatrix::from_element(3, 1, 1.0);
        assert!(calibrate_linear_factor(&r, &f, &CalibrationOptions::default()).is_err());
    }
}
