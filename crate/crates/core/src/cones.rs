//! Admissible cones for the allocation vector.
//!
//! A cone is stored in normalized form: an optional no-shorting constraint,
//! optional linear rows `A π ≥ 0`, and an optional cardinality bound `q`.
//! Intersections of these building blocks normalize to the same form. The
//! convex part is the polyhedral cone `{π : C π ≥ 0}` with `C` stacking the
//! identity (for no-shorting) and `A`; cardinality turns the feasible set
//! into a finite union of convex cones, one per support pattern.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{MmvError, Result};
use crate::qp;

/// Default feasibility tolerance on unit-scale allocations.
pub const DEFAULT_TOL: f64 = 1e-9;

/// Default cap on the number of enumerated support patterns.
pub const DEFAULT_ENUMERATION_CAP: usize = 100_000;

/// Cone declaration as it appears in configuration files, e.g.
/// `{"nonnegative": true, "cardinality": 2, "linear_rows": [[1, 1, 0]]}`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConeSpec {
    pub nonnegative: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cardinality: Option<usize>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub linear_rows: Vec<Vec<f64>>,
}

impl ConeSpec {
    pub fn build(&self, n: usize) -> Result<ConeConstraint> {
        let mut members = Vec::new();
        if self.nonnegative {
            members.push(ConeConstraint::nonnegative(n));
        }
        if !self.linear_rows.is_empty() {
            let a = crate::linalg::from_rows(&self.linear_rows, "linear_rows")?;
            members.push(ConeConstraint::linear(a)?);
        }
        if let Some(q) = self.cardinality {
            members.push(ConeConstraint::cardinality(n, q)?);
        }
        if members.is_empty() {
            return Ok(ConeConstraint::unconstrained(n));
        }
        ConeConstraint::intersection(members)
    }
}

/// A (possibly non-convex) cone `A ⊆ R^N`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConeConstraint {
    n: usize,
    nonnegative: bool,
    /// `K x N` rows of the linear cone; `K = 0` when absent.
    linear: DMatrix<f64>,
    cardinality: Option<usize>,
}

/// Indices of the coordinates allowed to be nonzero.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SupportPattern(pub Vec<usize>);

impl SupportPattern {
    pub fn indices(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// A polyhedral cone `{x ∈ R^m : C x ≥ 0}` in the coordinates of one support.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvexCone {
    support: SupportPattern,
    constraints: DMatrix<f64>,
}

impl ConvexCone {
    pub fn support(&self) -> &SupportPattern {
        &self.support
    }

    pub fn dim(&self) -> usize {
        self.support.len()
    }

    /// Rows of `C`.
    pub fn constraints(&self) -> &DMatrix<f64> {
        &self.constraints
    }

    pub fn is_unconstrained(&self) -> bool {
        self.constraints.nrows() == 0
    }

    /// Euclidean projection in reduced coordinates.
    pub fn project(&self, v: &DVector<f64>) -> Result<DVector<f64>> {
        if self.is_unconstrained() {
            return Ok(v.clone());
        }
        if self.is_orthant() {
            return Ok(v.map(|x| x.max(0.0)));
        }
        let h = DMatrix::identity(v.len(), v.len());
        Ok(qp::solve(&h, v, &self.constraints)?.x)
    }

    fn is_orthant(&self) -> bool {
        let m = self.dim();
        self.constraints.nrows() == m && self.constraints == DMatrix::identity(m, m)
    }

    /// Scatters reduced coordinates into a full `n`-vector.
    pub fn embed(&self, x: &DVector<f64>, n: usize) -> DVector<f64> {
        let mut out = DVector::zeros(n);
        for (a, &i) in self.support.0.iter().enumerate() {
            out[i] = x[a];
        }
        out
    }

    /// Gathers the support coordinates of a full vector.
    pub fn restrict(&self, v: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(self.dim(), self.support.0.iter().map(|&i| v[i]))
    }
}

fn binomial(n: usize, k: usize) -> u128 {
    let k = k.min(n - k.min(n));
    (0..k).fold(1u128, |acc, i| acc * (n - i) as u128 / (i as u128 + 1))
}

fn combinations(n: usize, k: usize, out: &mut Vec<SupportPattern>) {
    let mut idx: Vec<usize> = (0..k).collect();
    loop {
        out.push(SupportPattern(idx.clone()));
        let mut i = k;
        loop {
            if i == 0 {
                return;
            }
            i -= 1;
            if idx[i] != i + n - k {
                break;
            }
            if i == 0 {
                return;
            }
        }
        idx[i] += 1;
        for j in i + 1..k {
            idx[j] = idx[j - 1] + 1;
        }
    }
}

impl ConeConstraint {
    pub fn unconstrained(n: usize) -> Self {
        Self {
            n,
            nonnegative: false,
            linear: DMatrix::zeros(0, n),
            cardinality: None,
        }
    }

    /// No-shorting: `π ≥ 0`.
    pub fn nonnegative(n: usize) -> Self {
        Self {
            nonnegative: true,
            ..Self::unconstrained(n)
        }
    }

    /// `A π ≥ 0` for a `K x N` matrix `A`.
    pub fn linear(a: DMatrix<f64>) -> Result<Self> {
        if a.ncols() == 0 || a.iter().any(|v| !v.is_finite()) {
            return Err(MmvError::Domain("linear cone rows must be finite and nonempty".into()));
        }
        Ok(Self {
            linear: a.clone(),
            ..Self::unconstrained(a.ncols())
        })
    }

    /// At most `q` nonzero coordinates, `1 ≤ q ≤ N`.
    pub fn cardinality(n: usize, q: usize) -> Result<Self> {
        if q == 0 || q > n {
            return Err(MmvError::Domain(format!("cardinality q={q} must lie in 1..={n}")));
        }
        Ok(Self {
            cardinality: Some(q),
            ..Self::unconstrained(n)
        })
    }

    /// Intersection of cones of a common dimension. At most one member may
    /// carry a cardinality bound.
    pub fn intersection(members: Vec<ConeConstraint>) -> Result<Self> {
        let first = members
            .first()
            .ok_or_else(|| MmvError::Domain("empty intersection".into()))?;
        let n = first.n;
        let mut out = Self::unconstrained(n);
        for m in &members {
            if m.n != n {
                return Err(MmvError::Domain("intersection members differ in dimension".into()));
            }
            out.nonnegative |= m.nonnegative;
            if m.linear.nrows() > 0 {
                let k = out.linear.nrows();
                let mut stacked = DMatrix::zeros(k + m.linear.nrows(), n);
                stacked.view_mut((0, 0), (k, n)).copy_from(&out.linear);
                stacked.view_mut((k, 0), (m.linear.nrows(), n)).copy_from(&m.linear);
                out.linear = stacked;
            }
            if let Some(q) = m.cardinality {
                if out.cardinality.is_some() {
                    return Err(MmvError::Domain(
                        "an intersection may contain at most one cardinality member".into(),
                    ));
                }
                out.cardinality = Some(q);
            }
        }
        Ok(out)
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn cardinality_bound(&self) -> Option<usize> {
        self.cardinality
    }

    pub fn is_convex(&self) -> bool {
        self.cardinality.is_none_or(|q| q >= self.n)
    }

    pub fn is_unconstrained(&self) -> bool {
        self.is_convex() && !self.nonnegative && self.linear.nrows() == 0
    }

    pub fn spec(&self) -> ConeSpec {
        ConeSpec {
            nonnegative: self.nonnegative,
            cardinality: self.cardinality,
            linear_rows: crate::linalg::to_rows(&self.linear),
        }
    }

    fn check_dim(&self, v: &[f64]) -> Result<()> {
        if v.len() != self.n {
            return Err(MmvError::Domain(format!(
                "vector has dimension {}, cone has dimension {}",
                v.len(),
                self.n
            )));
        }
        Ok(())
    }

    /// Membership within `tol`: nonnegativity as `min π_i ≥ −tol`, linear rows
    /// as `min (Aπ)_k ≥ −tol`, cardinality as `#{i : |π_i| > tol} ≤ q`.
    pub fn is_feasible(&self, pi: &[f64], tol: f64) -> Result<bool> {
        self.check_dim(pi)?;
        if self.nonnegative && pi.iter().any(|x| *x < -tol) {
            return Ok(false);
        }
        let p = DVector::from_column_slice(pi);
        if self.linear.nrows() > 0 && (&self.linear * &p).iter().any(|x| *x < -tol) {
            return Ok(false);
        }
        if let Some(q) = self.cardinality {
            if pi.iter().filter(|x| x.abs() > tol).count() > q {
                return Ok(false);
            }
        }
        Ok(true)
    }

    /// The convex cone obtained by restricting the convex members to `support`.
    pub fn restricted(&self, support: SupportPattern) -> ConvexCone {
        let m = support.len();
        let k = self.linear.nrows();
        let rows = if self.nonnegative { m + k } else { k };
        let mut c = DMatrix::zeros(rows, m);
        let mut r = 0;
        if self.nonnegative {
            for a in 0..m {
                c[(a, a)] = 1.0;
            }
            r = m;
        }
        for row in 0..k {
            for (a, &i) in support.0.iter().enumerate() {
                c[(r + row, a)] = self.linear[(row, i)];
            }
        }
        ConvexCone {
            support,
            constraints: c,
        }
    }

    /// The convex members on the full coordinate set.
    pub fn convex_part(&self) -> ConvexCone {
        self.restricted(SupportPattern((0..self.n).collect()))
    }

    /// Euclidean projection onto a convex cone.
    pub fn project_convex(&self, v: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(v)?;
        if !self.is_convex() {
            return Err(MmvError::Unsupported(
                "projection onto a cardinality-constrained cone is not defined".into(),
            ));
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(MmvError::Domain("projection input must be finite".into()));
        }
        let p = self.convex_part().project(&DVector::from_column_slice(v))?;
        Ok(p.iter().cloned().collect())
    }

    /// A nearest feasible point. Equals [`Self::project_convex`] for convex
    /// cones; for cardinality cones the projections onto the maximal
    /// supports are compared.
    pub fn project_nearest(&self, v: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(v)?;
        let q = match self.cardinality {
            Some(q) if q < self.n => q,
            _ => return self.project_convex(v),
        };
        let full = DVector::from_column_slice(v);
        let mut supports = Vec::new();
        if binomial(self.n, q) > DEFAULT_ENUMERATION_CAP as u128 {
            return Err(MmvError::EnumerationCap {
                needed: binomial(self.n, q),
                cap: DEFAULT_ENUMERATION_CAP,
            });
        }
        combinations(self.n, q, &mut supports);
        let mut best: Option<(f64, DVector<f64>)> = None;
        for s in supports {
            let cone = self.restricted(s);
            let p = cone.embed(&cone.project(&cone.restrict(&full))?, self.n);
            let dist = (&p - &full).norm();
            if best.as_ref().is_none_or(|b| dist < b.0) {
                best = Some((dist, p));
            }
        }
        Ok(best.expect("q >= 1").1.iter().cloned().collect())
    }

    /// Number of support patterns of size `1..=q`.
    pub fn support_count(&self) -> u128 {
        match self.cardinality {
            None => 1,
            Some(q) => (1..=q).map(|k| binomial(self.n, k)).sum(),
        }
    }

    /// All supports of size at most `q`, ordered by size and then
    /// lexicographically. Without a cardinality member there is one pattern
    /// covering every coordinate.
    pub fn enumerate_supports(&self, cap: usize) -> Result<Vec<SupportPattern>> {
        match self.cardinality {
            None => Ok(vec![SupportPattern((0..self.n).collect())]),
            Some(q) => self.all_subsets_upto(q, cap),
        }
    }

    fn all_subsets_upto(&self, q: usize, cap: usize) -> Result<Vec<SupportPattern>> {
        let needed: u128 = (1..=q).map(|k| binomial(self.n, k)).sum();
        if needed > cap as u128 {
            return Err(MmvError::EnumerationCap { needed, cap });
        }
        let mut out = Vec::with_capacity(needed as usize);
        for k in 1..=q {
            combinations(self.n, k, &mut out);
        }
        Ok(out)
    }

    /// Whether `y` lies in the polar cone `{y : yᵀπ ≤ 0 for all π ∈ A}`.
    /// Uses Moreau's decomposition: `y` is polar to a convex cone iff its
    /// projection onto that cone vanishes; for a union of convex cones the
    /// polar is the intersection of the individual polars.
    pub fn in_polar(&self, y: &[f64], tol: f64) -> Result<bool> {
        self.check_dim(y)?;
        let y = DVector::from_column_slice(y);
        // Cones on smaller supports are contained in those on larger ones,
        // so only maximal supports matter. Without linear rows the convex
        // members act coordinatewise and singletons already suffice.
        let supports = match self.cardinality {
            Some(q) if q < self.n && self.linear.nrows() == 0 => {
                (0..self.n).map(|i| SupportPattern(vec![i])).collect()
            }
            Some(q) if q < self.n => {
                let mut out = Vec::new();
                if binomial(self.n, q) > DEFAULT_ENUMERATION_CAP as u128 {
                    return Err(MmvError::EnumerationCap {
                        needed: binomial(self.n, q),
                        cap: DEFAULT_ENUMERATION_CAP,
                    });
                }
                combinations(self.n, q, &mut out);
                out
            }
            _ => vec![SupportPattern((0..self.n).collect())],
        };
        for s in supports {
            let cone = self.restricted(s);
            let p = cone.project(&cone.restrict(&y))?;
            if p.amax() > tol {
                return Ok(false);
            }
        }
        Ok(true)
    }

    /// A random feasible point: a random support (for cardinality cones)
    /// and the projection of a standard normal vector onto its convex cone.
    pub fn random_feasible<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Vec<f64>> {
        let support = match self.cardinality {
            Some(q) if q < self.n => {
                let size = rng.random_range(1..=q);
                let mut idx: Vec<usize> = (0..self.n).collect();
                for i in 0..size {
                    let j = rng.random_range(i..self.n);
                    idx.swap(i, j);
                }
                let mut s = idx[..size].to_vec();
                s.sort_unstable();
                SupportPattern(s)
            }
            _ => SupportPattern((0..self.n).collect()),
        };
        let cone = self.restricted(support);
        let v = DVector::from_fn(cone.dim(), |_, _| rng.sample(StandardNormal));
        let p = cone.project(&v)?;
        Ok(cone.embed(&p, self.n).iter().cloned().collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn support_counts() {
        let c = ConeConstraint::cardinality(4, 2).unwrap();
        assert_eq!(c.enumerate_supports(DEFAULT_ENUMERATION_CAP).unwrap().len(), 10);
        let c = ConeConstraint::cardinality(10, 2).unwrap();
        assert_eq!(c.enumerate_supports(DEFAULT_ENUMERATION_CAP).unwrap().len(), 55);
        let c = ConeConstraint::cardinality(4, 4).unwrap();
        assert_eq!(c.enumerate_supports(DEFAULT_ENUMERATION_CAP).unwrap().len(), 15);
    }

    #[test]
    fn cap_is_enforced() {
        let c = ConeConstraint::cardinality(40, 10).unwrap();
        let err = c.enumerate_supports(DEFAULT_ENUMERATION_CAP).unwrap_err();
        assert!(err.to_string().contains("greedy"));
    }

    #[test]
    fn spec_round_trip() {
        let spec: ConeSpec =
            serde_json::from_str(r#"{"nonnegative": true, "cardinality": 2}"#).unwrap();
        let cone = spec.build(4).unwrap();
        assert_eq!(cone.cardinality_bound(), Some(2));
        assert!(cone.is_feasible(&[0.0, 1.33, 0.0, 0.55], DEFAULT_TOL).unwrap());
        assert_eq!(cone.spec(), spec);
    }

    #[test]
    fn two_cardinality_members_rejected() {
        let a = ConeConstraint::cardinality(3, 1).unwrap();
        let b = ConeConstraint::cardinality(3, 2).unwrap();
        assert!(ConeConstraint::intersection(vec![a, b]).is_err());
    }
}
