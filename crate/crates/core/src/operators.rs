//! Dense self-adjoint and skew operators, seminorms, operator order and the
//! primal-dual block preconditioner.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{check_dim, invalid, Error, Result};

/// Relative tolerance used for positivity and operator-order decisions.
pub const ORDER_TOL: f64 = 1e-9;

/// Self-adjoint operator on `R^dim`, stored densely.
#[derive(Clone, Debug, PartialEq)]
pub struct SymOperator {
    entries: DMatrix<f64>,
    eigenvalues: DVector<f64>,
    psd_checked: bool,
}

impl SymOperator {
    /// Symmetrizes `m` and records its spectrum.
    pub fn new(m: DMatrix<f64>) -> Result<Self> {
        if !m.is_square() {
            return Err(Error::Dimension {
                what: "symmetric operator",
                expected: m.nrows(),
                found: m.ncols(),
            });
        }
        if m.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("symmetric operator"));
        }
        let entries = (&m + m.transpose()) * 0.5;
        let eigenvalues = if entries.nrows() == 0 {
            DVector::zeros(0)
        } else {
            SymmetricEigen::new(entries.clone()).eigenvalues
        };
        if eigenvalues.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("eigenvalues"));
        }
        let norm = eigenvalues.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        let min = eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
        let psd_checked = eigenvalues.is_empty() || min >= -ORDER_TOL * norm;
        Ok(Self {
            entries,
            eigenvalues,
            psd_checked,
        })
    }

    pub fn identity(dim: usize) -> Self {
        Self::scaled_identity(dim, 1.0)
    }

    pub fn zeros(dim: usize) -> Self {
        Self::scaled_identity(dim, 0.0)
    }

    pub fn scaled_identity(dim: usize, scale: f64) -> Self {
        Self {
            entries: DMatrix::identity(dim, dim) * scale,
            eigenvalues: DVector::from_element(dim, scale),
            psd_checked: scale >= 0.0,
        }
    }

    pub fn from_diagonal(diag: &[f64]) -> Result<Self> {
        Self::new(DMatrix::from_diagonal(&DVector::from_column_slice(diag)))
    }

    pub fn dim(&self) -> usize {
        self.entries.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.entries
    }

    /// Eigenvalues in the order returned by the decomposition.
    pub fn eigenvalues(&self) -> &DVector<f64> {
        &self.eigenvalues
    }

    pub fn psd_checked(&self) -> bool {
        self.psd_checked
    }

    pub fn min_eigenvalue(&self) -> f64 {
        self.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max_eigenvalue(&self) -> f64 {
        self.eigenvalues
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn spectral_norm(&self) -> f64 {
        self.eigenvalues.iter().fold(0.0f64, |a, v| a.max(v.abs()))
    }

    pub fn apply(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        check_dim("operator argument", self.dim(), x.len())?;
        Ok(&self.entries * x)
    }

    /// `⟨Γx, x⟩`; Γ need not be positive.
    pub fn quad_form(&self, x: &DVector<f64>) -> Result<f64> {
        check_dim("quadratic form argument", self.dim(), x.len())?;
        Ok(x.dot(&(&self.entries * x)))
    }

    /// `⟨Mx, z⟩`.
    pub fn pairing(&self, x: &DVector<f64>, z: &DVector<f64>) -> Result<f64> {
        check_dim("pairing argument", self.dim(), x.len())?;
        check_dim("pairing argument", self.dim(), z.len())?;
        Ok(z.dot(&(&self.entries * x)))
    }

    /// `‖x‖_M`.
    pub fn seminorm(&self, x: &DVector<f64>) -> Result<f64> {
        Ok(self.seminorm_sq(x)?.sqrt())
    }

    /// `‖x‖²_M`, with tiny negative round-off clamped to zero.
    pub fn seminorm_sq(&self, x: &DVector<f64>) -> Result<f64> {
        if !self.psd_checked {
            return Err(Error::NotPositiveSemidefinite {
                min_eig: self.min_eigenvalue(),
            });
        }
        let q = self.quad_form(x)?;
        if q < 0.0 && q >= -1e-12 * (1.0 + self.spectral_norm() * x.norm_squared()) {
            Ok(0.0)
        } else if q < 0.0 {
            Err(Error::NotPositiveSemidefinite {
                min_eig: self.min_eigenvalue(),
            })
        } else {
            Ok(q)
        }
    }

    /// Dual seminorm `‖x*‖_{M†}`. Components of `x*` outside the range of M
    /// make the dual distance infinite and are reported as errors.
    pub fn dual_seminorm(&self, xs: &DVector<f64>) -> Result<f64> {
        if !self.psd_checked {
            return Err(Error::NotPositiveSemidefinite {
                min_eig: self.min_eigenvalue(),
            });
        }
        check_dim("dual seminorm argument", self.dim(), xs.len())?;
        let eig = SymmetricEigen::new(self.entries.clone());
        let cutoff = ORDER_TOL * self.spectral_norm().max(f64::MIN_POSITIVE);
        let mut acc = 0.0;
        let mut null = 0.0;
        for (i, &lam) in eig.eigenvalues.iter().enumerate() {
            let c = eig.eigenvectors.column(i).dot(xs);
            if lam > cutoff {
                acc += c * c / lam;
            } else {
                null += c * c;
            }
        }
        let null = null.sqrt();
        if null > 1e-9 * (1.0 + xs.norm()) {
            return Err(Error::NullSpaceComponent { residual: null });
        }
        Ok(acc.sqrt())
    }

    /// Spectral absolute value `V |Λ| Vᵀ`.
    pub fn young_companion(&self) -> Result<SymOperator> {
        if self.dim() == 0 {
            return Ok(self.clone());
        }
        let eig = SymmetricEigen::new(self.entries.clone());
        let abs = eig.eigenvalues.map(f64::abs);
        let m = &eig.eigenvectors * DMatrix::from_diagonal(&abs) * eig.eigenvectors.transpose();
        let mut out = SymOperator::new(m)?;
        out.psd_checked = true;
        Ok(out)
    }

    pub fn scale(&self, s: f64) -> SymOperator {
        SymOperator {
            entries: &self.entries * s,
            eigenvalues: &self.eigenvalues * s,
            psd_checked: if s >= 0.0 {
                self.psd_checked
            } else {
                self.max_eigenvalue() <= ORDER_TOL * self.spectral_norm()
            },
        }
    }

    pub fn add(&self, other: &SymOperator) -> Result<SymOperator> {
        check_dim("operator sum", self.dim(), other.dim())?;
        SymOperator::new(&self.entries + &other.entries)
    }

    pub fn sub(&self, other: &SymOperator) -> Result<SymOperator> {
        check_dim("operator difference", self.dim(), other.dim())?;
        SymOperator::new(&self.entries - &other.entries)
    }

    /// Block-diagonal operator `diag(self, other)`.
    pub fn block_diag(&self, other: &SymOperator) -> Result<SymOperator> {
        let (n, m) = (self.dim(), other.dim());
        let mut out = DMatrix::zeros(n + m, n + m);
        out.view_mut((0, 0), (n, n)).copy_from(&self.entries);
        out.view_mut((n, n), (m, m)).copy_from(&other.entries);
        SymOperator::new(out)
    }
}

/// `A ≤ B` in the Loewner order, up to relative tolerance `tol`.
pub fn operator_leq(a: &SymOperator, b: &SymOperator, tol: f64) -> Result<bool> {
    let diff = b.sub(a)?;
    Ok(diff.dim() == 0 || diff.min_eigenvalue() >= -tol * diff.spectral_norm().max(1.0))
}

/// Skew-adjoint operator; `⟨Ξx, x⟩ = 0`.
#[derive(Clone, Debug, PartialEq)]
pub struct SkewOperator {
    entries: DMatrix<f64>,
}

impl SkewOperator {
    /// Antisymmetrizes `m`.
    pub fn new(m: DMatrix<f64>) -> Result<Self> {
        if !m.is_square() {
            return Err(Error::Dimension {
                what: "skew operator",
                expected: m.nrows(),
                found: m.ncols(),
            });
        }
        if m.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("skew operator"));
        }
        Ok(Self {
            entries: (&m - m.transpose()) * 0.5,
        })
    }

    pub fn zeros(dim: usize) -> Self {
        Self {
            entries: DMatrix::zeros(dim, dim),
        }
    }

    pub fn dim(&self) -> usize {
        self.entries.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.entries
    }

    pub fn apply(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        check_dim("skew operator argument", self.dim(), x.len())?;
        Ok(&self.entries * x)
    }
}

/// Primal and dual dimensions together with the coupling `K: Z → Y`.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockShape {
    pub primal_dim: usize,
    pub dual_dim: usize,
    pub k: DMatrix<f64>,
}

impl BlockShape {
    pub fn new(k: DMatrix<f64>) -> Self {
        Self {
            primal_dim: k.ncols(),
            dual_dim: k.nrows(),
            k,
        }
    }

    pub fn dim(&self) -> usize {
        self.primal_dim + self.dual_dim
    }

    /// Splits a stacked vector into its primal and dual parts.
    pub fn split(&self, x: &DVector<f64>) -> Result<(DVector<f64>, DVector<f64>)> {
        check_dim("stacked primal-dual vector", self.dim(), x.len())?;
        Ok((
            x.rows(0, self.primal_dim).into_owned(),
            x.rows(self.primal_dim, self.dual_dim).into_owned(),
        ))
    }

    pub fn stack(&self, z: &DVector<f64>, y: &DVector<f64>) -> Result<DVector<f64>> {
        check_dim("primal part", self.primal_dim, z.len())?;
        check_dim("dual part", self.dual_dim, y.len())?;
        let mut out = DVector::zeros(self.dim());
        out.rows_mut(0, self.primal_dim).copy_from(z);
        out.rows_mut(self.primal_dim, self.dual_dim).copy_from(y);
        Ok(out)
    }

    /// The skew part `[[0, Kᵀ], [−K, 0]]`.
    pub fn skew(&self) -> SkewOperator {
        let (n, m) = (self.primal_dim, self.dual_dim);
        let mut out = DMatrix::zeros(n + m, n + m);
        out.view_mut((0, n), (n, m)).copy_from(&self.k.transpose());
        out.view_mut((n, 0), (m, n)).copy_from(&(-&self.k));
        SkewOperator { entries: out }
    }
}

/// `[[τ⁻¹M_z, −Kᵀ], [−K, σ⁻¹M_y]]`.
pub fn pdps_preconditioner(
    tau: f64,
    sigma: f64,
    mz: &SymOperator,
    my: &SymOperator,
    k: &DMatrix<f64>,
) -> Result<SymOperator> {
    if !(tau > 0.0) || !(sigma > 0.0) {
        return Err(invalid("tau/sigma", "step lengths must be positive"));
    }
    check_dim("coupling columns", mz.dim(), k.ncols())?;
    check_dim("coupling rows", my.dim(), k.nrows())?;
    let (n, m) = (mz.dim(), my.dim());
    let mut out = DMatrix::zeros(n + m, n + m);
    out.view_mut((0, 0), (n, n)).copy_from(&(mz.matrix() / tau));
    out.view_mut((n, n), (m, m)).copy_from(&(my.matrix() / sigma));
    out.view_mut((0, n), (n, m)).copy_from(&(-k.transpose()));
    out.view_mut((n, 0), (m, n)).copy_from(&(-k));
    SymOperator::new(out)
}

/// Step-length condition for the primal-dual method with `K = K_y K_z`:
/// `K_y K_yᵀ ≤ M_y` and `τλM_z + τσK_zᵀK_z ≤ M_z`.
#[allow(clippy::too_many_arguments)]
pub fn pdps_step_check(
    tau: f64,
    sigma: f64,
    lambda: f64,
    mz: &SymOperator,
    my: &SymOperator,
    kz: &DMatrix<f64>,
    ky: &DMatrix<f64>,
    tol: f64,
) -> Result<bool> {
    check_dim("K_z columns", mz.dim(), kz.ncols())?;
    check_dim("K_y rows", my.dim(), ky.nrows())?;
    check_dim("K_y columns", kz.nrows(), ky.ncols())?;
    let kyy = SymOperator::new(ky * ky.transpose())?;
    let lhs = SymOperator::new(mz.matrix() * (tau * lambda) + kz.transpose() * kz * (tau * sigma))?;
    Ok(operator_leq(&kyy, my, tol)? && operator_leq(&lhs, mz, tol)?)
}

/// Checks `λ diag(M_z, 0) ≤ M` and `γM ≤ diag(γ_z M_z, γ_y M_y)` with
/// `γ = min{γ_z τ, γ_y σ}/2`.
#[allow(clippy::too_many_arguments)]
pub fn preconditioner_bounds_check(
    m: &SymOperator,
    mz: &SymOperator,
    my: &SymOperator,
    lambda: f64,
    gamma_z: f64,
    gamma_y: f64,
    tau: f64,
    sigma: f64,
    tol: f64,
) -> Result<bool> {
    check_dim("preconditioner", mz.dim() + my.dim(), m.dim())?;
    let lower = mz.scale(lambda).block_diag(&SymOperator::zeros(my.dim()))?;
    let gamma = (gamma_z * tau).min(gamma_y * sigma) / 2.0;
    let upper = mz.scale(gamma_z).block_diag(&my.scale(gamma_y))?;
    Ok(operator_leq(&lower, m, tol)? && operator_leq(&m.scale(gamma), &upper, tol)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn v(xs: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(xs)
    }

    fn sym(rows: usize, xs: &[f64]) -> SymOperator {
        SymOperator::new(DMatrix::from_row_slice(rows, rows, xs)).unwrap()
    }

    #[test]
    fn seminorm_examples() {
        assert_relative_eq!(SymOperator::identity(2).seminorm(&v(&[3.0, 4.0])).unwrap(), 5.0);
        assert_eq!(SymOperator::zeros(2).seminorm(&v(&[7.0, -1.0])).unwrap(), 0.0);
        let m = SymOperator::from_diagonal(&[2.0, 0.0]).unwrap();
        assert_relative_eq!(m.seminorm(&v(&[1.0, 1.0])).unwrap(), 2f64.sqrt());
    }

    #[test]
    fn seminorm_rejects_indefinite_and_bad_dims() {
        let m = SymOperator::from_diagonal(&[1.0, -1.0]).unwrap();
        assert!(!m.psd_checked());
        assert!(m.seminorm(&v(&[1.0, 0.0])).is_err());
        assert!(matches!(
            SymOperator::identity(2).seminorm(&v(&[1.0])),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn quad_form_examples() {
        let g = SymOperator::from_diagonal(&[1.0, -1.0]).unwrap();
        assert_eq!(g.quad_form(&v(&[1.0, 1.0])).unwrap(), 0.0);
        assert_eq!(SymOperator::identity(2).quad_form(&v(&[2.0, 0.0])).unwrap(), 4.0);
        let g = SymOperator::from_diagonal(&[-2.0]).unwrap();
        assert_eq!(g.quad_form(&v(&[3.0])).unwrap(), -18.0);
    }

    #[test]
    fn young_companion_examples() {
        let y = SymOperator::from_diagonal(&[1.0, -1.0]).unwrap().young_companion().unwrap();
        assert_relative_eq!(y.matrix(), &DMatrix::identity(2, 2), epsilon = 1e-12);
        let y = SymOperator::identity(3).young_companion().unwrap();
        assert_relative_eq!(y.matrix(), &DMatrix::identity(3, 3), epsilon = 1e-12);
        let y = sym(2, &[0.0, 1.0, 1.0, 0.0]).young_companion().unwrap();
        assert_relative_eq!(y.matrix(), &DMatrix::identity(2, 2), epsilon = 1e-12);
    }

    #[test]
    fn operator_leq_examples() {
        let i = SymOperator::identity(2);
        let two = SymOperator::scaled_identity(2, 2.0);
        assert!(operator_leq(&i, &two, 1e-9).unwrap());
        assert!(!operator_leq(&two, &i, 1e-9).unwrap());
        let a = SymOperator::from_diagonal(&[1.0, 3.0]).unwrap();
        let b = SymOperator::from_diagonal(&[2.0, 2.0]).unwrap();
        assert!(!operator_leq(&a, &b, 1e-9).unwrap());
        assert!(operator_leq(&i, &SymOperator::identity(3), 1e-9).is_err());
    }

    #[test]
    fn preconditioner_examples() {
        let i1 = SymOperator::identity(1);
        let k = DMatrix::from_element(1, 1, 1.0);
        let m = pdps_preconditioner(1.0, 1.0, &i1, &i1, &k).unwrap();
        assert_eq!(m.matrix(), &DMatrix::from_row_slice(2, 2, &[1.0, -1.0, -1.0, 1.0]));
        let mut eig: Vec<f64> = m.eigenvalues().iter().copied().collect();
        eig.sort_by(f64::total_cmp);
        assert_relative_eq!(eig[0], 0.0, epsilon = 1e-12);
        assert_relative_eq!(eig[1], 2.0, epsilon = 1e-12);
        assert!(m.psd_checked());
        assert_eq!(m.matrix(), &m.matrix().transpose());

        let m = pdps_preconditioner(0.5, 1.0, &i1, &i1, &DMatrix::zeros(1, 1)).unwrap();
        assert_eq!(m.matrix(), &DMatrix::from_diagonal(&v(&[2.0, 1.0])));
        assert!(pdps_preconditioner(0.0, 1.0, &i1, &i1, &k).is_err());
    }

    #[test]
    fn step_check_examples() {
        let i1 = SymOperator::identity(1);
        let one = DMatrix::from_element(1, 1, 1.0);
        assert!(pdps_step_check(1.0, 1.0, 0.0, &i1, &i1, &one, &one, 1e-9).unwrap());
        assert!(!pdps_step_check(1.0, 1.0, 1.0, &i1, &i1, &one, &one, 1e-9).unwrap());
        let zero = DMatrix::zeros(1, 1);
        assert!(pdps_step_check(3.0, 5.0, 0.0, &i1, &i1, &zero, &one, 1e-9).unwrap());
    }

    #[test]
    fn bounds_check_examples() {
        let i1 = SymOperator::identity(1);
        let k = DMatrix::from_element(1, 1, 1.0);
        let m = pdps_preconditioner(1.0, 1.0, &i1, &i1, &k).unwrap();
        assert!(preconditioner_bounds_check(&m, &i1, &i1, 0.0, 1.0, 1.0, 1.0, 1.0, 1e-9).unwrap());
        assert!(preconditioner_bounds_check(&m, &i1, &i1, 0.0, 0.0, 0.0, 1.0, 1.0, 1e-9).unwrap());
        // M − λ diag(1, 0) has determinant −λ, so any λ > 0 fails here.
        assert!(!preconditioner_bounds_check(&m, &i1, &i1, 1e-3, 1.0, 1.0, 1.0, 1.0, 1e-9).unwrap());
        // With τ = 1/2 the largest feasible λ is 1; sweep across it.
        let m = pdps_preconditioner(0.5, 1.0, &i1, &i1, &k).unwrap();
        assert!(preconditioner_bounds_check(&m, &i1, &i1, 0.99, 0.0, 0.0, 0.5, 1.0, 1e-9).unwrap());
        assert!(!preconditioner_bounds_check(&m, &i1, &i1, 1.01, 0.0, 0.0, 0.5, 1.0, 1e-9).unwrap());
    }

    #[test]
    fn dual_seminorm_inverse_and_null_space() {
        let m = SymOperator::from_diagonal(&[4.0, 1.0]).unwrap();
        assert_relative_eq!(m.dual_seminorm(&v(&[2.0, 3.0])).unwrap(), (1.0f64 + 9.0).sqrt(), epsilon = 1e-12);
        let m = SymOperator::from_diagonal(&[4.0, 0.0]).unwrap();
        assert_relative_eq!(m.dual_seminorm(&v(&[2.0, 0.0])).unwrap(), 1.0, epsilon = 1e-12);
        assert!(matches!(
            m.dual_seminorm(&v(&[2.0, 1.0])),
            Err(Error::NullSpaceComponent { .. })
        ));
    }

    #[test]
    fn skew_pairing_vanishes() {
        let k = DMatrix::from_row_slice(2, 3, &[1.0, 2.0, -1.0, 0.5, 0.0, 3.0]);
        let shape = BlockShape::new(k);
        let xi = shape.skew();
        let x = v(&[1.0, -2.0, 0.3, 4.0, 0.7]);
        assert_relative_eq!(x.dot(&xi.apply(&x).unwrap()), 0.0, epsilon = 1e-12);
        let (z, y) = shape.split(&x).unwrap();
        assert_eq!(shape.stack(&z, &y).unwrap(), x);
    }

    fn arb_matrix(n: usize) -> impl Strategy<Value = DMatrix<f64>> {
        prop::collection::vec(-3.0f64..3.0, n * n).prop_map(move |e| DMatrix::from_vec(n, n, e))
    }

    fn arb_vec(n: usize) -> impl Strategy<Value = DVector<f64>> {
        prop::collection::vec(-5.0f64..5.0, n).prop_map(DVector::from_vec)
    }

    proptest! {
        #[test]
        fn cauchy_schwarz_in_seminorm(b in arb_matrix(3), x in arb_vec(3), z in arb_vec(3)) {
            let m = SymOperator::new(&b * b.transpose()).unwrap();
            let lhs = m.pairing(&x, &z).unwrap().abs();
            let rhs = m.seminorm(&x).unwrap() * m.seminorm(&z).unwrap();
            prop_assert!(rhs - lhs >= -1e-9 * (1.0 + rhs));
        }

        #[test]
        fn young_inequality(g in arb_matrix(3), x in arb_vec(3), z in arb_vec(3)) {
            let g = SymOperator::new(g).unwrap();
            let y = g.young_companion().unwrap();
            let lhs = 2.0 * g.pairing(&x, &z).unwrap();
            let rhs = y.seminorm_sq(&x).unwrap() + y.seminorm_sq(&z).unwrap();
            prop_assert!(rhs - lhs >= -1e-9 * (1.0 + rhs.abs()));
        }

        #[test]
        fn pythagoras(b in arb_matrix(3), x in arb_vec(3), z in arb_vec(3), xb in arb_vec(3)) {
            let m = SymOperator::new(&b * b.transpose()).unwrap();
            let lhs = m.pairing(&(&x - &z), &(&x - &xb)).unwrap();
            let rhs = 0.5 * m.seminorm_sq(&(&x - &z)).unwrap() + 0.5 * m.seminorm_sq(&(&x - &xb)).unwrap()
                - 0.5 * m.seminorm_sq(&(&z - &xb)).unwrap();
            prop_assert!((lhs - rhs).abs() <= 1e-10 * (1.0 + lhs.abs().max(rhs.abs())));
        }

        #[test]
        fn preconditioner_is_symmetric(tau in 0.1f64..3.0, sigma in 0.1f64..3.0, k in arb_matrix(2)) {
            let i = SymOperator::identity(2);
            let m = pdps_preconditioner(tau, sigma, &i, &i, &k).unwrap();
            prop_assert_eq!(m.matrix(), &m.matrix().transpose());
        }
    }
}
