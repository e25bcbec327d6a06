//! Sieve bases of characteristics, the cross-sectional projection operator
//! and leverage weights.
//!
//! The projection `P = Φ (Φ'Φ)^{-1} Φ'` is never materialized as a `p × p`
//! matrix; all queries act through the `p × J` basis matrix and the factored
//! `J × J` Gram matrix.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Cross-sectional characteristics at a window anchor time.
#[derive(Debug, Clone)]
pub struct CharacteristicPanel {
    /// `p × K_x` matrix of raw characteristic values.
    pub values: DMatrix<f64>,
    /// Optional per-column domain bounds; defaults to the observed range.
    pub bounds: Option<Vec<(f64, f64)>>,
}

impl CharacteristicPanel {
    pub fn new(values: DMatrix<f64>) -> Result<Self> {
        let (p, k_x) = values.shape();
        if k_x == 0 {
            return Err(Error::config("characteristics must have K_x >= 1 columns"));
        }
        if p <= k_x {
            return Err(Error::config(format!("need p > K_x, got p = {p}, K_x = {k_x}")));
        }
        if values.iter().any(|x| !x.is_finite()) {
            return Err(Error::data("non-finite characteristic value"));
        }
        Ok(CharacteristicPanel { values, bounds: None })
    }

    pub fn p(&self) -> usize {
        self.values.nrows()
    }

    pub fn k_x(&self) -> usize {
        self.values.ncols()
    }
}

/// Basis family for the sieve expansion.
///
/// Nonlinear families are additive across characteristics (one univariate
/// expansion per column plus a shared intercept); tensor products would blow
/// up `J` against the `J² = O(p)` rate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "family")]
pub enum SieveFamily {
    /// The (standardized) characteristic columns themselves; `J = K_x`.
    Linear,
    /// Clamped B-splines of the given degree with `interior_knots` uniform
    /// interior knots per column; `J = 1 + K_x (interior_knots + degree)`.
    Bspline { degree: usize, interior_knots: usize },
    /// Monomials `x, x², …, x^order` per column plus an intercept;
    /// `J = 1 + K_x · order`.
    Polynomial { order: usize },
}

/// Specification of the sieve basis construction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SieveBasisSpec {
    pub family: SieveFamily,
    /// Standardize each column to zero mean / unit variance cross-sectionally
    /// before the basis expansion.
    pub standardize: bool,
    /// Gram matrix condition-number cap; exceeding it is a singular-basis error.
    pub condition_cap: f64,
}

impl Default for SieveBasisSpec {
    fn default() -> Self {
        SieveBasisSpec { family: SieveFamily::Linear, standardize: true, condition_cap: 1e10 }
    }
}

impl SieveBasisSpec {
    pub fn linear() -> Self {
        Self::default()
    }

    /// Total basis dimension `J` for `k_x` characteristic columns.
    pub fn dimension(&self, k_x: usize) -> usize {
        match self.family {
            SieveFamily::Linear => k_x,
            SieveFamily::Bspline { degree, interior_knots } => 1 + k_x * (interior_knots + degree),
            SieveFamily::Polynomial { order } => 1 + k_x * order,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.family {
            SieveFamily::Bspline { degree, interior_knots } => {
                if degree == 0 {
                    return Err(Error::config("bspline degree must be >= 1"));
                }
                if interior_knots == 0 && degree < 1 {
                    return Err(Error::config("bspline needs at least one basis function"));
                }
            }
            SieveFamily::Polynomial { order } => {
                if order == 0 {
                    return Err(Error::config("polynomial order must be >= 1"));
                }
            }
            SieveFamily::Linear => {}
        }
        if !(self.condition_cap > 1.0) {
            return Err(Error::config("condition_cap must exceed 1"));
        }
        Ok(())
    }
}

/// Conditioning and rate diagnostics attached to a built basis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BasisDiagnostics {
    /// Smallest eigenvalue of `(1/p) Φ'Φ`.
    pub eigen_min: f64,
    /// Largest eigenvalue of `(1/p) Φ'Φ`.
    pub eigen_max: f64,
    /// Condition number `eigen_max / eigen_min`.
    pub condition_number: f64,
    /// Set when `J² > p`, flagging the `J² = O(p)` rate condition.
    pub rate_warning: bool,
}

/// The cross-sectional smoother: basis matrix `Φ`, inverted Gram matrix and
/// leverage weights `h_{lm} = φ_l' ((1/p) Φ'Φ)^{-1} φ_m`.
///
/// Immutable after construction; all queries are read-only and thread-safe.
#[derive(Debug, Clone)]
pub struct ProjectionOperator {
    phi: DMatrix<f64>,
    gram_inv: DMatrix<f64>,
    diagnostics: BasisDiagnostics,
}

/// Build the basis matrix (without conditioning checks) for the given spec.
fn expand_basis(chars: &CharacteristicPanel, spec: &SieveBasisSpec) -> Result<DMatrix<f64>> {
    let p = chars.p();
    let k_x = chars.k_x();
    let mut cols: Vec<DVector<f64>> = Vec::new();

    // Column-wise standardization.
    let mut x = chars.values.clone();
    if spec.standardize {
        for j in 0..k_x {
            let col = x.column(j);
            let mean = col.mean();
            let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / p as f64;
            let sd = var.sqrt();
            if sd <= 0.0 {
                return Err(Error::config(format!(
                    "characteristic column {j} is constant; cannot standardize"
                )));
            }
            for l in 0..p {
                x[(l, j)] = (x[(l, j)] - mean) / sd;
            }
        }
    }

    match spec.family {
        SieveFamily::Linear => {
            for j in 0..k_x {
                cols.push(DVector::from_column_slice(x.column(j).as_slice()));
            }
        }
        SieveFamily::Polynomial { order } => {
            cols.push(DVector::from_element(p, 1.0));
            for j in 0..k_x {
                for r in 1..=order {
                    cols.push(DVector::from_fn(p, |l, _| x[(l, j)].powi(r as i32)));
                }
            }
        }
        SieveFamily::Bspline { degree, interior_knots } => {
            cols.push(DVector::from_element(p, 1.0));
            for j in 0..k_x {
                let (lo, hi) = column_bounds(chars, &x, j, spec.standardize)?;
                let knots = clamped_knots(lo, hi, degree, interior_knots);
                let n_basis = interior_knots + degree + 1;
                // Drop the first function of each column's expansion: the
                // spline basis sums to one, so keeping it alongside the
                // shared intercept would be rank-deficient.
                let mut vals = vec![DVector::zeros(p); n_basis];
                for l in 0..p {
                    let b = bspline_row(x[(l, j)], degree, &knots, n_basis);
                    for (q, bv) in b.iter().enumerate() {
                        vals[q][l] = *bv;
                    }
                }
                for v in vals.into_iter().skip(1) {
                    cols.push(v);
                }
            }
        }
    }

    Ok(DMatrix::from_columns(&cols))
}

fn column_bounds(
    chars: &CharacteristicPanel,
    x: &DMatrix<f64>,
    j: usize,
    standardized: bool,
) -> Result<(f64, f64)> {
    if let (Some(bounds), false) = (&chars.bounds, standardized) {
        let (lo, hi) = bounds[j];
        if !(lo < hi) {
            return Err(Error::config(format!("invalid bounds for column {j}: [{lo}, {hi}]")));
        }
        return Ok((lo, hi));
    }
    let col = x.column(j);
    let lo = col.min();
    let hi = col.max();
    if !(lo < hi) {
        return Err(Error::config(format!("characteristic column {j} is degenerate")));
    }
    Ok((lo, hi))
}

/// Clamped uniform knot vector on `[lo, hi]`.
fn clamped_knots(lo: f64, hi: f64, degree: usize, interior: usize) -> Vec<f64> {
    let mut knots = Vec::with_capacity(2 * (degree + 1) + interior);
    for _ in 0..=degree {
        knots.push(lo);
    }
    for q in 1..=interior {
        knots.push(lo + (hi - lo) * q as f64 / (interior + 1) as f64);
    }
    for _ in 0..=degree {
        knots.push(hi);
    }
    knots
}

/// Evaluate all `n_basis` B-spline basis functions at `t` (Cox–de Boor).
fn bspline_row(t: f64, degree: usize, knots: &[f64], n_basis: usize) -> Vec<f64> {
    let lo = knots[0];
    let hi = *knots.last().unwrap();
    let t = t.clamp(lo, hi);
    let mut b = vec![0.0; n_basis];

    // Degree-0 seed: indicator of the knot span containing t. Non-empty
    // spans of a clamped knot vector run from `degree` to `n_basis - 1`;
    // t == hi falls in the last one.
    let mut span = n_basis - 1;
    for q in degree..n_basis {
        if t < knots[q + 1] {
            span = q;
            break;
        }
    }
    let mut work = vec![0.0; n_basis + degree];
    work[span] = 1.0;

    for d in 1..=degree {
        for q in 0..(n_basis + degree - d) {
            let left = if knots[q + d] > knots[q] {
                (t - knots[q]) / (knots[q + d] - knots[q]) * work[q]
            } else {
                0.0
            };
            let right = if knots[q + d + 1] > knots[q + 1] {
                (knots[q + d + 1] - t) / (knots[q + d + 1] - knots[q + 1]) * work[q + 1]
            } else {
                0.0
            };
            work[q] = left + right;
        }
    }
    b.copy_from_slice(&work[..n_basis]);
    b
}

/// Build the projection operator from characteristics and a basis spec.
///
/// Fails with a singular-basis error naming the offending columns when the
/// Gram condition number exceeds `spec.condition_cap`.
pub fn build_basis(chars: &CharacteristicPanel, spec: &SieveBasisSpec) -> Result<ProjectionOperator> {
    spec.validate()?;
    let phi = expand_basis(chars, spec)?;
    ProjectionOperator::from_phi(phi, spec.condition_cap)
}

impl ProjectionOperator {
    /// Construct from an explicit basis matrix.
    pub fn from_phi(phi: DMatrix<f64>, condition_cap: f64) -> Result<Self> {
        let (p, j) = phi.shape();
        if j == 0 || p < j {
            return Err(Error::config(format!("basis must satisfy 1 <= J <= p, got p = {p}, J = {j}")));
        }
        let gram = phi.transpose() * &phi;
        let eig = SymmetricEigen::new(gram.clone());
        let mut eigen_min = f64::INFINITY;
        let mut eigen_max = f64::NEG_INFINITY;
        let mut min_idx = 0;
        for (idx, &ev) in eig.eigenvalues.iter().enumerate() {
            if ev < eigen_min {
                eigen_min = ev;
                min_idx = idx;
            }
            eigen_max = eigen_max.max(ev);
        }
        let condition = if eigen_min > 0.0 { eigen_max / eigen_min } else { f64::INFINITY };
        if !(eigen_min > 0.0) || condition > condition_cap {
            let null = eig.eigenvectors.column(min_idx);
            let peak = null.iter().map(|v| v.abs()).fold(0.0, f64::max);
            let offenders: Vec<usize> = null
                .iter()
                .enumerate()
                .filter(|(_, v)| v.abs() > 0.3 * peak)
                .map(|(q, _)| q)
                .collect();
            return Err(Error::numerical(format!(
                "singular sieve basis: Gram condition {condition:.3e} exceeds cap \
                 {condition_cap:.1e}; near-null direction loads on basis columns {offenders:?}"
            )));
        }
        let gram_inv = eig.recompose_inverse();
        let diagnostics = BasisDiagnostics {
            eigen_min: eigen_min / p as f64,
            eigen_max: eigen_max / p as f64,
            condition_number: condition,
            rate_warning: j * j > p,
        };
        Ok(ProjectionOperator { phi, gram_inv, diagnostics })
    }

    pub fn p(&self) -> usize {
        self.phi.nrows()
    }

    /// Basis dimension `J` (the rank of the projection).
    pub fn j(&self) -> usize {
        self.phi.ncols()
    }

    pub fn phi(&self) -> &DMatrix<f64> {
        &self.phi
    }

    /// `(Φ'Φ)^{-1}`.
    pub fn gram_inv(&self) -> &DMatrix<f64> {
        &self.gram_inv
    }

    pub fn diagnostics(&self) -> &BasisDiagnostics {
        &self.diagnostics
    }

    /// `P v`, computed as `Φ ((Φ'Φ)^{-1} (Φ' v))`; `v` is `p × K`.
    pub fn project(&self, v: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if v.nrows() != self.p() {
            return Err(Error::config(format!(
                "projection input has {} rows, expected p = {}",
                v.nrows(),
                self.p()
            )));
        }
        let t = self.phi.transpose() * v;
        Ok(&self.phi * (&self.gram_inv * t))
    }

    /// Vector version of [`Self::project`].
    pub fn project_vec(&self, v: &DVector<f64>) -> Result<DVector<f64>> {
        if v.nrows() != self.p() {
            return Err(Error::config(format!(
                "projection input has {} rows, expected p = {}",
                v.nrows(),
                self.p()
            )));
        }
        let t = self.phi.transpose() * v;
        Ok(&self.phi * (&self.gram_inv * t))
    }

    /// Leverage weight `h_{lm} = φ_l' ((1/p) Φ'Φ)^{-1} φ_m = p · (P)_{lm}`.
    pub fn leverage_h(&self, l: usize, m: usize) -> Result<f64> {
        let p = self.p();
        if l >= p || m >= p {
            return Err(Error::config(format!("leverage index out of range: ({l}, {m}), p = {p}")));
        }
        let phi_l = self.phi.row(l).transpose();
        let phi_m = self.phi.row(m).transpose();
        Ok(p as f64 * (phi_l.transpose() * &self.gram_inv * phi_m)[(0, 0)])
    }

    /// Column `l` of the projection matrix, `P_l = Φ (Φ'Φ)^{-1} φ_l`.
    pub fn p_col(&self, l: usize) -> Result<DVector<f64>> {
        if l >= self.p() {
            return Err(Error::config(format!("asset index {l} out of range, p = {}", self.p())));
        }
        let phi_l = self.phi.row(l).transpose();
        Ok(&self.phi * (&self.gram_inv * phi_l))
    }

    /// Leverage column `h_{·l} = p · P_l`.
    pub fn h_col(&self, l: usize) -> Result<DVector<f64>> {
        Ok(self.p_col(l)? * self.p() as f64)
    }
}

/// Recompose `V diag(1/λ) V'` from a symmetric eigendecomposition.
trait RecomposeInverse {
    fn recompose_inverse(&self) -> DMatrix<f64>;
}

impl RecomposeInverse for SymmetricEigen<f64, nalgebra::Dyn> {
    fn recompose_inverse(&self) -> DMatrix<f64> {
        let inv_vals = DVector::from_iterator(
            self.eigenvalues.len(),
            self.eigenvalues.iter().map(|&l| 1.0 / l),
        );
        &self.eigenvectors * DMatrix::from_diagonal(&inv_vals) * self.eigenvectors.transpose()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream_rng;
    use approx::assert_abs_diff_eq;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn random_chars(p: usize, k_x: usize, seed: u64) -> CharacteristicPanel {
        let mut rng = stream_rng(seed, 0);
        let values = DMatrix::from_fn(p, k_x, |_, _| rng.sample::<f64, _>(StandardNormal));
        CharacteristicPanel::new(values).unwrap()
    }

    #[test]
    fn linear_family_is_standardized_x() {
        let chars = random_chars(40, 3, 1);
        let op = build_basis(&chars, &SieveBasisSpec::linear()).unwrap();
        assert_eq!(op.j(), 3);
        for j in 0..3 {
            let col = op.phi().column(j);
            assert_abs_diff_eq!(col.mean(), 0.0, epsilon = 1e-12);
            let var = col.iter().map(|v| v * v).sum::<f64>() / 40.0;
            assert_abs_diff_eq!(var, 1.0, epsilon = 1e-10);
        }
    }

    #[test]
    fn square_invertible_basis_gives_identity_projection() {
        let mut rng = stream_rng(2, 0);
        let phi = DMatrix::from_fn(4, 4, |_, _| rng.sample::<f64, _>(StandardNormal));
        let op = ProjectionOperator::from_phi(phi, 1e12).unwrap();
        let v = DVector::from_fn(4, |l, _| (l + 1) as f64);
        let pv = op.project_vec(&v).unwrap();
        assert_abs_diff_eq!((pv - v).norm(), 0.0, epsilon = 1e-10);
    }

    #[test]
    fn bspline_spans_cubics() {
        // Cubic B-splines with 4 interior knots on one column: J = 8 and any
        // cubic polynomial of x must project onto itself.
        let p = 200;
        let mut rng = stream_rng(3, 0);
        let values = DMatrix::from_fn(p, 1, |_, _| rng.sample::<f64, _>(StandardNormal));
        let chars = CharacteristicPanel::new(values.clone()).unwrap();
        let spec = SieveBasisSpec {
            family: SieveFamily::Bspline { degree: 3, interior_knots: 4 },
            standardize: true,
            condition_cap: 1e12,
        };
        assert_eq!(spec.dimension(1), 8);
        let op = build_basis(&chars, &spec).unwrap();
        assert_eq!(op.j(), 8);

        // Standardization used inside the builder.
        let mean = values.column(0).mean();
        let sd = (values.column(0).iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
            / p as f64)
            .sqrt();
        let cubic = DVector::from_fn(p, |l, _| {
            let z = (values[(l, 0)] - mean) / sd;
            0.7 - 1.3 * z + 0.4 * z * z + 0.9 * z * z * z
        });
        let proj = op.project_vec(&cubic).unwrap();
        let resid = (&proj - &cubic).norm();
        assert!(resid < 1e-8, "cubic projection residual {resid}");

        // Direct least-squares oracle: the projection equals the LS fit.
        let ls = op.phi().clone().svd(true, true).solve(&cubic, 1e-14).unwrap();
        let fit = op.phi() * ls;
        assert!((fit - proj).norm() < 1e-8);
    }

    #[test]
    fn project_span_and_orthogonal_cases() {
        let chars = random_chars(60, 4, 4);
        let op = build_basis(&chars, &SieveBasisSpec::linear()).unwrap();
        let mut rng = stream_rng(4, 1);

        // v in the column span projects to itself.
        let coef = DVector::from_fn(4, |_, _| rng.sample::<f64, _>(StandardNormal));
        let v = op.phi() * coef;
        let pv = op.project_vec(&v).unwrap();
        assert!((&pv - &v).norm() < 1e-10 * v.norm().max(1.0));

        // Residualized vector projects to zero.
        let w = DVector::from_fn(60, |_, _| rng.sample::<f64, _>(StandardNormal));
        let resid = &w - op.project_vec(&w).unwrap();
        let pr = op.project_vec(&resid).unwrap();
        assert!(pr.norm() < 1e-10);

        // Contraction.
        let u = DVector::from_fn(60, |_, _| rng.sample::<f64, _>(StandardNormal));
        assert!(op.project_vec(&u).unwrap().norm() <= u.norm() + 1e-12);
    }

    #[test]
    fn leverage_hand_oracle() {
        // p = 4, J = 2 hand matrix; h_{lm} = p phi_l' (Phi'Phi)^{-1} phi_m with
        // the 2x2 inverse computed explicitly.
        let phi = DMatrix::from_row_slice(4, 2, &[1.0, 0.5, -1.0, 2.0, 0.25, -1.5, 2.0, 1.0]);
        let op = ProjectionOperator::from_phi(phi.clone(), 1e12).unwrap();

        let g = phi.transpose() * &phi;
        let det = g[(0, 0)] * g[(1, 1)] - g[(0, 1)] * g[(1, 0)];
        let ginv = DMatrix::from_row_slice(
            2,
            2,
            &[g[(1, 1)] / det, -g[(0, 1)] / det, -g[(1, 0)] / det, g[(0, 0)] / det],
        );
        for l in 0..4 {
            for m in 0..4 {
                let expect =
                    4.0 * (phi.row(l) * &ginv * phi.row(m).transpose())[(0, 0)];
                assert_abs_diff_eq!(op.leverage_h(l, m).unwrap(), expect, epsilon = 1e-10);
            }
        }
        // Diagonal leverage is a quadratic form in a PD matrix.
        for l in 0..4 {
            assert!(op.leverage_h(l, l).unwrap() >= 0.0);
        }
    }

    #[test]
    fn leverage_orthonormal_scaling() {
        // Columns scaled so (1/p) Phi'Phi = I: h_{lm} = phi_l' phi_m.
        let p = 16;
        let mut phi = DMatrix::zeros(p, 2);
        for l in 0..p {
            phi[(l, 0)] = if l % 2 == 0 { 1.0 } else { -1.0 };
            phi[(l, 1)] = if l % 4 < 2 { 1.0 } else { -1.0 };
        }
        let op = ProjectionOperator::from_phi(phi.clone(), 1e12).unwrap();
        for l in 0..p {
            for m in 0..p {
                let expect = (phi.row(l) * phi.row(m).transpose())[(0, 0)];
                assert_abs_diff_eq!(op.leverage_h(l, m).unwrap(), expect, epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn trace_identity() {
        let chars = random_chars(100, 4, 5);
        let op = build_basis(&chars, &SieveBasisSpec::linear()).unwrap();
        let trace: f64 = (0..100).map(|l| op.leverage_h(l, l).unwrap()).sum::<f64>() / 100.0;
        assert_abs_diff_eq!(trace, op.j() as f64, epsilon = 1e-8);
    }

    #[test]
    fn basis_change_invariance() {
        let chars = random_chars(50, 3, 6);
        let op = build_basis(&chars, &SieveBasisSpec::linear()).unwrap();
        let mut rng = stream_rng(6, 1);
        let a = DMatrix::from_fn(3, 3, |_, _| rng.sample::<f64, _>(StandardNormal))
            + DMatrix::identity(3, 3) * 2.0;
        let op2 = ProjectionOperator::from_phi(op.phi() * &a, 1e12).unwrap();
        let v = DVector::from_fn(50, |_, _| rng.sample::<f64, _>(StandardNormal));
        let d = (op.project_vec(&v).unwrap() - op2.project_vec(&v).unwrap()).norm();
        assert!(d < 1e-8, "projection changed under basis change: {d}");
    }

    #[test]
    fn rank_deficient_basis_names_columns() {
        let mut phi = DMatrix::from_fn(10, 3, |l, j| ((l * 3 + j) as f64).sin());
        for l in 0..10 {
            phi[(l, 2)] = 2.0 * phi[(l, 0)] - phi[(l, 1)];
        }
        let err = ProjectionOperator::from_phi(phi, 1e10).unwrap_err();
        let msg = format!("{err}");
        assert!(msg.contains("singular sieve basis"), "{msg}");
    }

    #[test]
    fn rate_warning_flag() {
        let chars = random_chars(10, 4, 7);
        let op = build_basis(&chars, &SieveBasisSpec::linear()).unwrap();
        assert!(op.diagnostics().rate_warning); // J^2 = 16 > p = 10
        let chars = random_chars(100, 4, 8);
        let op = build_basis(&chars, &SieveBasisSpec::linear()).unwrap();
        assert!(!op.diagnostics().rate_warning);
    }
}
