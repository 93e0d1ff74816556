//! Primal active-set method for small convex quadratic programs over
//! polyhedral cones:
//!
//! ```text
//! minimize ½ xᵀH x − gᵀx   subject to  C x ≥ 0
//! ```
//!
//! `x = 0` is always feasible, so the method starts there with an empty
//! working set. `H` must be positive semidefinite; singular directions are
//! handled through a least-squares solve of the KKT system.

use nalgebra::{DMatrix, DVector};

use crate::error::{MmvError, Result};

#[derive(Debug, Clone)]
pub(crate) struct QpSolution {
    pub x: DVector<f64>,
}

fn solve_kkt(
    h: &DMatrix<f64>,
    c: &DMatrix<f64>,
    working: &[usize],
    rhs_top: &DVector<f64>,
) -> Option<(DVector<f64>, DVector<f64>)> {
    let n = h.nrows();
    let w = working.len();
    let mut k = DMatrix::zeros(n + w, n + w);
    k.view_mut((0, 0), (n, n)).copy_from(h);
    for (a, &i) in working.iter().enumerate() {
        for j in 0..n {
            k[(j, n + a)] = -c[(i, j)];
            k[(n + a, j)] = c[(i, j)];
        }
    }
    let mut rhs = DVector::zeros(n + w);
    rhs.rows_mut(0, n).copy_from(rhs_top);
    let sol = match k.clone().lu().solve(&rhs) {
        Some(s) if s.iter().all(|v| v.is_finite()) => s,
        _ => k.svd(true, true).solve(&rhs, 1e-13).ok()?,
    };
    Some((sol.rows(0, n).into_owned(), sol.rows(n, w).into_owned()))
}

/// Solves the cone-constrained QP. `c` has one row per constraint.
pub(crate) fn solve(h: &DMatrix<f64>, g: &DVector<f64>, c: &DMatrix<f64>) -> Result<QpSolution> {
    let n = h.nrows();
    let m = c.nrows();
    let scale = h.amax().max(g.amax()).max(1e-300);
    let tol = 1e-13 * scale.max(1.0);
    let mut x = DVector::zeros(n);
    let mut working: Vec<usize> = Vec::new();
    let max_iter = 50 * (n + m) + 100;
    for _ in 0..max_iter {
        let rhs = g - h * &x;
        let (p, mu) = solve_kkt(h, c, &working, &rhs)
            .ok_or_else(|| MmvError::Numerical("singular KKT system in quadratic program".into()))?;
        let step_norm = p.amax();
        if step_norm <= 1e-14 * (1.0 + x.amax()) {
            // Stationary on the working face: check multiplier signs.
            let worst = mu
                .iter()
                .enumerate()
                .filter(|(_, v)| **v < -tol)
                .min_by(|a, b| a.1.total_cmp(b.1));
            match worst {
                None => return Ok(QpSolution { x }),
                Some((a, _)) => {
                    working.remove(a);
                }
            }
            continue;
        }
        let cp = c * &p;
        let cx = c * &x;
        let mut alpha = 1.0;
        let mut blocking = None;
        for i in 0..m {
            if working.contains(&i) || cp[i] >= -1e-15 * step_norm {
                continue;
            }
            let ratio = (cx[i].max(0.0)) / -cp[i];
            if ratio < alpha {
                alpha = ratio;
                blocking = Some(i);
            }
        }
        x += &p * alpha;
        if let Some(i) = blocking {
            working.push(i);
        }
    }
    Err(MmvError::Numerical(format!(
        "active-set quadratic program did not terminate within {max_iter} iterations"
    )))
}
