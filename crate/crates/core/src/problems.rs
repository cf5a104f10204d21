//! Parametric inner problems `T(u, x) = 0`, the reduced objective
//! `F = J ∘ S_u` with `J(u) = ½‖u − u_ref‖²`, exact solution and adjoint
//! oracles, and the shipped instances.

use std::fmt::Debug;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, invalid, Error, Result};
use crate::par::{map_range, sample_rng, Execution};

pub const NEWTON_TOL: f64 = 1e-12;
pub const NEWTON_MAX_ITER: usize = 50;
/// Number of seeded samples used by empirical constant estimation.
pub const SAMPLE_COUNT: usize = 1000;
/// Inflation applied to sampled suprema.
pub const SAMPLE_INFLATION: f64 = 1.05;

/// Admissible parameter region Ω.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Region {
    Whole { dim: usize },
    Box { lo: Vec<f64>, hi: Vec<f64> },
}

impl Region {
    pub fn dim(&self) -> usize {
        match self {
            Region::Whole { dim } => *dim,
            Region::Box { lo, .. } => lo.len(),
        }
    }

    pub fn is_bounded(&self) -> bool {
        matches!(self, Region::Box { .. })
    }

    pub fn contains(&self, x: &DVector<f64>) -> bool {
        match self {
            Region::Whole { dim } => x.len() == *dim && x.iter().all(|v| v.is_finite()),
            Region::Box { lo, hi } => {
                x.len() == lo.len()
                    && x.iter()
                        .zip(lo.iter().zip(hi))
                        .all(|(v, (l, h))| *l <= *v && *v <= *h)
            }
        }
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> Result<DVector<f64>> {
        match self {
            Region::Whole { .. } => Err(Error::Unsupported(
                "sampling requires a bounded region".into(),
            )),
            Region::Box { lo, hi } => Ok(DVector::from_iterator(
                lo.len(),
                lo.iter().zip(hi).map(|(l, h)| {
                    if h > l {
                        rng.gen_range(*l..=*h)
                    } else {
                        *l
                    }
                }),
            )),
        }
    }

    /// All `2^dim` vertices of a box.
    pub fn corners(&self) -> Vec<DVector<f64>> {
        match self {
            Region::Whole { .. } => Vec::new(),
            Region::Box { lo, hi } => {
                let n = lo.len();
                (0..1usize << n)
                    .map(|mask| {
                        DVector::from_iterator(
                            n,
                            (0..n).map(|i| if mask >> i & 1 == 1 { hi[i] } else { lo[i] }),
                        )
                    })
                    .collect()
            }
        }
    }

    pub fn center(&self) -> Option<DVector<f64>> {
        match self {
            Region::Whole { .. } => None,
            Region::Box { lo, hi } => Some(DVector::from_iterator(
                lo.len(),
                lo.iter().zip(hi).map(|(l, h)| 0.5 * (l + h)),
            )),
        }
    }

    fn validate(&self) -> Result<()> {
        if let Region::Box { lo, hi } = self {
            if lo.len() != hi.len() {
                return Err(invalid("region", "bound lengths differ"));
            }
            if lo.iter().zip(hi).any(|(l, h)| !(l <= h) || !l.is_finite() || !h.is_finite()) {
                return Err(invalid("region", "each lower bound must not exceed its upper bound"));
            }
        }
        Ok(())
    }
}

/// `T: U × X → W*` together with its partial derivatives. Here `W* ≅ U`.
pub trait InnerProblem: Debug + Send + Sync {
    fn dim_u(&self) -> usize;
    fn dim_x(&self) -> usize;
    fn residual(&self, u: &DVector<f64>, x: &DVector<f64>) -> DVector<f64>;
    fn jac_u(&self, u: &DVector<f64>, x: &DVector<f64>) -> DMatrix<f64>;
    fn jac_x(&self, u: &DVector<f64>, x: &DVector<f64>) -> DMatrix<f64>;
    /// Present when `T(u, x) = A(x)u − b(x)`.
    fn linear_system(&self) -> Option<&ParametricLinearSystem> {
        None
    }
}

/// `A(x) = A₀ + Σ xᵢAᵢ`, `b(x) = b₀ + Σ xᵢbᵢ`.
#[derive(Clone, Debug, PartialEq)]
pub struct ParametricLinearSystem {
    pub a0: DMatrix<f64>,
    pub a_coeffs: Vec<DMatrix<f64>>,
    pub b0: DVector<f64>,
    pub b_coeffs: Vec<DVector<f64>>,
}

impl ParametricLinearSystem {
    pub fn new(
        a0: DMatrix<f64>,
        a_coeffs: Vec<DMatrix<f64>>,
        b0: DVector<f64>,
        b_coeffs: Vec<DVector<f64>>,
    ) -> Result<Self> {
        let n = a0.nrows();
        check_dim("system matrix columns", n, a0.ncols())?;
        check_dim("right-hand side", n, b0.len())?;
        check_dim("parameter count", a_coeffs.len(), b_coeffs.len())?;
        for a in &a_coeffs {
            check_dim("coefficient matrix", n, a.nrows())?;
            check_dim("coefficient matrix", n, a.ncols())?;
        }
        for b in &b_coeffs {
            check_dim("coefficient vector", n, b.len())?;
        }
        Ok(Self {
            a0,
            a_coeffs,
            b0,
            b_coeffs,
        })
    }

    pub fn dim(&self) -> usize {
        self.a0.nrows()
    }

    pub fn a(&self, x: &DVector<f64>) -> DMatrix<f64> {
        let mut a = self.a0.clone();
        for (xi, ai) in x.iter().zip(&self.a_coeffs) {
            a += ai * *xi;
        }
        a
    }

    pub fn b(&self, x: &DVector<f64>) -> DVector<f64> {
        let mut b = self.b0.clone();
        for (xi, bi) in x.iter().zip(&self.b_coeffs) {
            b += bi * *xi;
        }
        b
    }
}

impl InnerProblem for ParametricLinearSystem {
    fn dim_u(&self) -> usize {
        self.dim()
    }

    fn dim_x(&self) -> usize {
        self.a_coeffs.len()
    }

    fn residual(&self, u: &DVector<f64>, x: &DVector<f64>) -> DVector<f64> {
        self.a(x) * u - self.b(x)
    }

    fn jac_u(&self, _u: &DVector<f64>, x: &DVector<f64>) -> DMatrix<f64> {
        self.a(x)
    }

    fn jac_x(&self, u: &DVector<f64>, _x: &DVector<f64>) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.dim(), self.dim_x());
        for (j, (aj, bj)) in self.a_coeffs.iter().zip(&self.b_coeffs).enumerate() {
            out.set_column(j, &(aj * u - bj));
        }
        out
    }

    fn linear_system(&self) -> Option<&ParametricLinearSystem> {
        Some(self)
    }
}

/// Extra structure that some inner algorithms need.
#[derive(Clone, Debug, PartialEq)]
pub enum InnerStructure {
    /// `f(u; x) = ½‖u − x‖²`, `g(u) = (γ/2)‖u‖²`.
    QuadraticProx { gamma: f64 },
    /// `u = (z, y)`, primal term `(a/2)‖z − x‖²`, dual term `(b/2)‖y‖²`, coupling `K`.
    Saddle {
        primal_weight: f64,
        dual_weight: f64,
        coupling: DMatrix<f64>,
    },
    Plain,
}

/// Serializable description of an instance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InstanceSpec {
    QuadraticBilevel {
        gamma: f64,
        target: Vec<f64>,
    },
    ParametricPoisson {
        n: usize,
        coeff_box: [[f64; 2]; 2],
    },
    SaddleBilevel {
        primal_weight: f64,
        dual_weight: f64,
        /// Row-major coupling matrix.
        coupling: Vec<Vec<f64>>,
        halfwidth: f64,
    },
}

impl InstanceSpec {
    pub fn build(&self) -> Result<BilevelInstance> {
        match self {
            InstanceSpec::QuadraticBilevel { gamma, target } => {
                make_quadratic_bilevel(*gamma, &DVector::from_column_slice(target))
            }
            InstanceSpec::ParametricPoisson { n, coeff_box } => make_parametric_poisson(*n, *coeff_box),
            InstanceSpec::SaddleBilevel {
                primal_weight,
                dual_weight,
                coupling,
                halfwidth,
            } => {
                let rows = coupling.len();
                let cols = coupling.first().map_or(0, Vec::len);
                if rows == 0 || cols == 0 || coupling.iter().any(|r| r.len() != cols) {
                    return Err(invalid("coupling", "must be a non-empty rectangular matrix"));
                }
                let k = DMatrix::from_row_iterator(rows, cols, coupling.iter().flatten().copied());
                make_saddle_bilevel(*primal_weight, *dual_weight, k, *halfwidth)
            }
        }
    }
}

/// Closed-form oracles available for the quadratic family.
#[derive(Clone, Debug, PartialEq)]
pub struct QuadraticClosedForm {
    pub gamma: f64,
    pub target: DVector<f64>,
}

impl QuadraticClosedForm {
    pub fn value(&self, x: &DVector<f64>) -> f64 {
        0.5 * (x / (1.0 + self.gamma) - &self.target).norm_squared()
    }

    pub fn gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        (x / (1.0 + self.gamma) - &self.target) / (1.0 + self.gamma)
    }

    pub fn minimizer(&self) -> DVector<f64> {
        &self.target * (1.0 + self.gamma)
    }

    /// Curvature of `F`, which is a multiple of the identity.
    pub fn curvature(&self) -> f64 {
        1.0 / (1.0 + self.gamma).powi(2)
    }
}

/// A bilevel problem `min_x J(S_u(x))` with `T(S_u(x), x) = 0`.
#[derive(Clone, Debug)]
pub struct BilevelInstance {
    pub label: String,
    pub spec: Option<InstanceSpec>,
    pub inner: Arc<dyn InnerProblem>,
    /// Tracking target `u_ref` in `J(u) = ½‖u − u_ref‖²`.
    pub target: DVector<f64>,
    pub region: Region,
    pub structure: InnerStructure,
    pub closed_form: Option<QuadraticClosedForm>,
    /// A known minimizer of `F` over Ω, when one is available by construction.
    pub known_minimizer: Option<DVector<f64>>,
}

impl BilevelInstance {
    pub fn new(
        label: impl Into<String>,
        inner: Arc<dyn InnerProblem>,
        target: DVector<f64>,
        region: Region,
    ) -> Result<Self> {
        check_dim("objective target", inner.dim_u(), target.len())?;
        check_dim("region", inner.dim_x(), region.dim())?;
        region.validate()?;
        Ok(Self {
            label: label.into(),
            spec: None,
            inner,
            target,
            region,
            structure: InnerStructure::Plain,
            closed_form: None,
            known_minimizer: None,
        })
    }

    pub fn dim_u(&self) -> usize {
        self.inner.dim_u()
    }

    pub fn dim_x(&self) -> usize {
        self.inner.dim_x()
    }

    pub fn linear_system(&self) -> Option<&ParametricLinearSystem> {
        self.inner.linear_system()
    }

    pub fn objective_value_u(&self, u: &DVector<f64>) -> f64 {
        0.5 * (u - &self.target).norm_squared()
    }

    /// `J'(u)`.
    pub fn objective_grad_u(&self, u: &DVector<f64>) -> DVector<f64> {
        u - &self.target
    }

    /// Lipschitz factor of `J'`.
    pub fn objective_grad_lipschitz(&self) -> f64 {
        1.0
    }

    fn ensure_in_region(&self, x: &DVector<f64>) -> Result<()> {
        check_dim("outer variable", self.dim_x(), x.len())?;
        if self.region.contains(x) {
            Ok(())
        } else {
            Err(Error::OutsideRegion)
        }
    }

    /// `S_u(x)`.
    pub fn solve_inner_exact(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        self.ensure_in_region(x)?;
        self.solve_inner_unchecked(x)
    }

    pub(crate) fn solve_inner_unchecked(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        if let Some(sys) = self.linear_system() {
            let b = sys.b(x);
            let lu = sys.a(x).lu();
            let mut u = lu.solve(&b).ok_or(Error::Singular("inner system"))?;
            // One refinement sweep keeps the residual at round-off level.
            let r = sys.a(x) * &u - &b;
            if let Some(du) = lu.solve(&r) {
                u -= du;
            }
            if u.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("inner solution"));
            }
            return Ok(u);
        }
        let mut u = DVector::zeros(self.dim_u());
        let mut res = self.inner.residual(&u, x).norm();
        for _ in 0..NEWTON_MAX_ITER {
            if res <= NEWTON_TOL {
                return Ok(u);
            }
            let step = self
                .inner
                .jac_u(&u, x)
                .lu()
                .solve(&self.inner.residual(&u, x))
                .ok_or(Error::Singular("newton jacobian"))?;
            u -= step;
            res = self.inner.residual(&u, x).norm();
            if !res.is_finite() {
                break;
            }
        }
        if res <= NEWTON_TOL {
            Ok(u)
        } else {
            Err(Error::NewtonFailed {
                iterations: NEWTON_MAX_ITER,
                residual: res,
            })
        }
    }

    /// `w` with `∂T/∂u(u, x)ᵀ w = −J'(u)` at an arbitrary `u`.
    pub fn reduced_adjoint_at(&self, u: &DVector<f64>, x: &DVector<f64>) -> Result<DVector<f64>> {
        self.inner
            .jac_u(u, x)
            .transpose()
            .lu()
            .solve(&(-self.objective_grad_u(u)))
            .ok_or(Error::Singular("reduced adjoint"))
    }

    /// `S_w(x)`.
    pub fn solve_reduced_adjoint_exact(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        let u = self.solve_inner_exact(x)?;
        self.reduced_adjoint_at(&u, x)
    }

    /// `p` with `∂T/∂u(u, x) p = −∂T/∂x(u, x)` at an arbitrary `u`.
    pub fn basic_adjoint_at(&self, u: &DVector<f64>, x: &DVector<f64>) -> Result<DMatrix<f64>> {
        self.inner
            .jac_u(u, x)
            .lu()
            .solve(&(-self.inner.jac_x(u, x)))
            .ok_or(Error::Singular("basic adjoint"))
    }

    /// `S_u'(x)`.
    pub fn solve_basic_adjoint_exact(&self, x: &DVector<f64>) -> Result<DMatrix<f64>> {
        let u = self.solve_inner_exact(x)?;
        self.basic_adjoint_at(&u, x)
    }

    /// `F(x) = J(S_u(x))`.
    pub fn objective(&self, x: &DVector<f64>) -> Result<f64> {
        Ok(self.objective_value_u(&self.solve_inner_exact(x)?))
    }

    /// `F'(x) = S_u'(x)ᵀ J'(S_u(x))`, as a column vector.
    pub fn exact_gradient(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        let u = self.solve_inner_exact(x)?;
        let p = self.basic_adjoint_at(&u, x)?;
        Ok(p.transpose() * self.objective_grad_u(&u))
    }

    /// `F'(x)` through the reduced adjoint: `∂T/∂x(S_u(x), x)ᵀ w`.
    pub fn exact_gradient_reduced(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        let u = self.solve_inner_exact(x)?;
        let w = self.reduced_adjoint_at(&u, x)?;
        Ok(self.inner.jac_x(&u, x).transpose() * w)
    }

    /// `F''(x)` by central differences of the exact gradient, symmetrized.
    /// Falls back to one-sided differences at the boundary of Ω.
    pub fn exact_hessian(&self, x: &DVector<f64>) -> Result<DMatrix<f64>> {
        if let Some(cf) = &self.closed_form {
            return Ok(DMatrix::identity(self.dim_x(), self.dim_x()) * cf.curvature());
        }
        self.ensure_in_region(x)?;
        jacobian_fd(x, |y| self.exact_gradient_unchecked(y)).map(|h| (&h + h.transpose()) * 0.5)
    }

    fn exact_gradient_unchecked(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        let u = self.solve_inner_unchecked(x)?;
        let p = self.basic_adjoint_at(&u, x)?;
        Ok(p.transpose() * self.objective_grad_u(&u))
    }

    /// Sensitivities of the exact adjoints in `x`, by central differences.
    pub fn reduced_adjoint_sensitivity(&self, x: &DVector<f64>) -> Result<DMatrix<f64>> {
        jacobian_fd(x, |y| {
            let u = self.solve_inner_unchecked(y)?;
            self.reduced_adjoint_at(&u, y)
        })
    }

    pub fn basic_adjoint_sensitivity(&self, x: &DVector<f64>) -> Result<DMatrix<f64>> {
        jacobian_fd(x, |y| {
            let u = self.solve_inner_unchecked(y)?;
            let p = self.basic_adjoint_at(&u, y)?;
            Ok(DVector::from_column_slice(p.as_slice()))
        })
    }

    /// Samples used by empirical estimation: the corners of Ω followed by
    /// `SAMPLE_COUNT` seeded uniform points. A single representative point is
    /// used for an unbounded Ω.
    pub fn sample_points(&self, seed: u64, exec: Execution) -> Result<Vec<DVector<f64>>> {
        if !self.region.is_bounded() {
            return Err(Error::Unsupported(
                "empirical estimation needs a bounded region".into(),
            ));
        }
        let mut pts = self.region.corners();
        let region = &self.region;
        let drawn = map_range(SAMPLE_COUNT, exec, |i| region.sample(&mut sample_rng(seed, i)));
        for p in drawn {
            pts.push(p?);
        }
        Ok(pts)
    }

    /// Sampled sensitivity suprema, inflated by `SAMPLE_INFLATION`.
    pub fn estimate_sensitivities(&self, seed: u64, exec: Execution) -> Result<Sensitivities> {
        if let Some(cf) = &self.closed_form {
            return Ok(Sensitivities::quadratic(cf, self.dim_x()));
        }
        let pts = self.sample_points(seed, exec)?;
        let per = map_range(pts.len(), exec, |i| self.point_sensitivities(&pts[i]));
        let mut acc = Sensitivities::zero();
        for s in per {
            acc = acc.max(&s?);
        }
        // Pairwise quotients give a second lower estimate of L_s.
        let pairs = map_range(pts.len() - 1, exec, |i| {
            let (a, b) = (&pts[i], &pts[i + 1]);
            let dx = (a - b).norm();
            if dx == 0.0 {
                return Ok(0.0);
            }
            Ok::<f64, Error>((self.solve_inner_exact(a)? - self.solve_inner_exact(b)?).norm() / dx)
        });
        for q in pairs {
            acc.solution_lipschitz = acc.solution_lipschitz.max(q?);
        }
        Ok(acc.inflate(SAMPLE_INFLATION))
    }

    fn point_sensitivities(&self, x: &DVector<f64>) -> Result<Sensitivities> {
        let u = self.solve_inner_exact(x)?;
        let p = self.basic_adjoint_at(&u, x)?;
        let w = self.reduced_adjoint_at(&u, x)?;
        let hess = self.exact_hessian(x)?;
        let h_eig = nalgebra::SymmetricEigen::new(hess).eigenvalues;
        let jac_u_inv = self
            .inner
            .jac_u(&u, x)
            .try_inverse()
            .ok_or(Error::Singular("inner jacobian"))?;
        Ok(Sensitivities {
            solution_lipschitz: spectral_norm(&p),
            solution_derivative_bound: p.norm(),
            reduced_adjoint_bound: w.norm(),
            reduced_adjoint_lipschitz: spectral_norm(&self.reduced_adjoint_sensitivity(x)?),
            basic_adjoint_lipschitz: spectral_norm(&self.basic_adjoint_sensitivity(x)?),
            objective_grad_bound: self.objective_grad_u(&u).norm(),
            jac_x_bound: spectral_norm(&self.inner.jac_x(&u, x)),
            inverse_jac_u_bound: spectral_norm(&jac_u_inv),
            curvature_upper: h_eig.iter().fold(0.0f64, |a, v| a.max(v.abs())),
            curvature_lower: h_eig.iter().copied().fold(f64::INFINITY, f64::min),
        })
    }
}

/// Suprema over Ω of the sensitivities that enter the tracking constants.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sensitivities {
    /// `L_s`, Lipschitz factor of `S_u`.
    pub solution_lipschitz: f64,
    /// `N_{S_u'}` in the Frobenius norm.
    pub solution_derivative_bound: f64,
    /// `N_{S_w}`.
    pub reduced_adjoint_bound: f64,
    /// Lipschitz factor of `S_w`.
    pub reduced_adjoint_lipschitz: f64,
    /// Lipschitz factor of `S_u'` in the Frobenius norm.
    pub basic_adjoint_lipschitz: f64,
    /// `N_{J'}` at exact solutions.
    pub objective_grad_bound: f64,
    /// `‖∂T/∂x‖` at exact solutions.
    pub jac_x_bound: f64,
    /// `‖∂T/∂u⁻¹‖`.
    pub inverse_jac_u_bound: f64,
    /// Upper bound for `‖F''‖`, the factor `L` of `Λ = L·I`.
    pub curvature_upper: f64,
    /// Lower bound for the smallest eigenvalue of `F''`, i.e. `γ_F`.
    pub curvature_lower: f64,
}

impl Sensitivities {
    fn zero() -> Self {
        Self {
            solution_lipschitz: 0.0,
            solution_derivative_bound: 0.0,
            reduced_adjoint_bound: 0.0,
            reduced_adjoint_lipschitz: 0.0,
            basic_adjoint_lipschitz: 0.0,
            objective_grad_bound: 0.0,
            jac_x_bound: 0.0,
            inverse_jac_u_bound: 0.0,
            curvature_upper: 0.0,
            curvature_lower: f64::INFINITY,
        }
    }

    fn quadratic(cf: &QuadraticClosedForm, dim_x: usize) -> Self {
        let s = 1.0 / (1.0 + cf.gamma);
        Self {
            solution_lipschitz: s,
            solution_derivative_bound: s * (dim_x as f64).sqrt(),
            // S_w(x) = −s (s x − target) is unbounded on the whole space, but
            // only its product with the vanishing u-derivative of ∂T/∂x enters.
            reduced_adjoint_bound: f64::INFINITY,
            reduced_adjoint_lipschitz: s * s,
            basic_adjoint_lipschitz: 0.0,
            objective_grad_bound: f64::INFINITY,
            jac_x_bound: 1.0,
            inverse_jac_u_bound: s,
            curvature_upper: s * s,
            curvature_lower: s * s,
        }
    }

    fn max(&self, o: &Self) -> Self {
        Self {
            solution_lipschitz: self.solution_lipschitz.max(o.solution_lipschitz),
            solution_derivative_bound: self.solution_derivative_bound.max(o.solution_derivative_bound),
            reduced_adjoint_bound: self.reduced_adjoint_bound.max(o.reduced_adjoint_bound),
            reduced_adjoint_lipschitz: self.reduced_adjoint_lipschitz.max(o.reduced_adjoint_lipschitz),
            basic_adjoint_lipschitz: self.basic_adjoint_lipschitz.max(o.basic_adjoint_lipschitz),
            objective_grad_bound: self.objective_grad_bound.max(o.objective_grad_bound),
            jac_x_bound: self.jac_x_bound.max(o.jac_x_bound),
            inverse_jac_u_bound: self.inverse_jac_u_bound.max(o.inverse_jac_u_bound),
            curvature_upper: self.curvature_upper.max(o.curvature_upper),
            curvature_lower: self.curvature_lower.min(o.curvature_lower),
        }
    }

    fn inflate(&self, f: f64) -> Self {
        let lower = if self.curvature_lower >= 0.0 {
            self.curvature_lower / f
        } else {
            self.curvature_lower * f
        };
        Self {
            solution_lipschitz: self.solution_lipschitz * f,
            solution_derivative_bound: self.solution_derivative_bound * f,
            reduced_adjoint_bound: self.reduced_adjoint_bound * f,
            reduced_adjoint_lipschitz: self.reduced_adjoint_lipschitz * f,
            basic_adjoint_lipschitz: self.basic_adjoint_lipschitz * f,
            objective_grad_bound: self.objective_grad_bound * f,
            jac_x_bound: self.jac_x_bound * f,
            inverse_jac_u_bound: self.inverse_jac_u_bound * f,
            curvature_upper: self.curvature_upper * f,
            curvature_lower: lower,
        }
    }
}

pub(crate) fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.singular_values().iter().fold(0.0f64, |a, v| a.max(*v))
}

/// Central-difference Jacobian of `f` at `x`, step `1e-5·(1+|xᵢ|)`.
pub fn jacobian_fd<F>(x: &DVector<f64>, f: F) -> Result<DMatrix<f64>>
where
    F: Fn(&DVector<f64>) -> Result<DVector<f64>>,
{
    let f0 = f(x)?;
    let mut jac = DMatrix::zeros(f0.len(), x.len());
    for j in 0..x.len() {
        let h = 1e-5 * (1.0 + x[j].abs());
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp[j] += h;
        xm[j] -= h;
        jac.set_column(j, &((f(&xp)? - f(&xm)?) / (2.0 * h)));
    }
    Ok(jac)
}

/// The quadratic family; BQ1 is `gamma = 1`, `target = [1]`.
pub fn make_quadratic_bilevel(gamma: f64, target: &DVector<f64>) -> Result<BilevelInstance> {
    if !(gamma > 0.0) || !gamma.is_finite() {
        return Err(invalid("gamma", "must be positive"));
    }
    let d = target.len();
    if d == 0 {
        return Err(invalid("target", "must be non-empty"));
    }
    let sys = ParametricLinearSystem::new(
        DMatrix::identity(d, d) * (1.0 + gamma),
        (0..d).map(|_| DMatrix::zeros(d, d)).collect(),
        DVector::zeros(d),
        (0..d)
            .map(|i| {
                let mut e = DVector::zeros(d);
                e[i] = 1.0;
                e
            })
            .collect(),
    )?;
    let mut inst = BilevelInstance::new(
        format!("quadratic_bilevel(gamma={gamma})"),
        Arc::new(sys),
        target.clone(),
        Region::Whole { dim: d },
    )?;
    let cf = QuadraticClosedForm {
        gamma,
        target: target.clone(),
    };
    inst.known_minimizer = Some(cf.minimizer());
    inst.closed_form = Some(cf);
    inst.structure = InnerStructure::QuadraticProx { gamma };
    inst.spec = Some(InstanceSpec::QuadraticBilevel {
        gamma,
        target: target.iter().copied().collect(),
    });
    Ok(inst)
}

/// Second-difference matrix `tridiag(−1, 2, −1)`.
pub fn second_difference(n: usize) -> DMatrix<f64> {
    DMatrix::from_fn(n, n, |i, j| {
        if i == j {
            2.0
        } else if i.abs_diff(j) == 1 {
            -1.0
        } else {
            0.0
        }
    })
}

/// Discretized 1-D diffusion-reaction problem with `x = (diffusion, mass)`:
/// `A(x) = (1 + x₁)·D + x₂·I`, `b(x) = s + x₂·c`.
/// The tracking target is the state at the centre of the coefficient box,
/// so that centre is a global minimizer of `F` with value zero.
pub fn make_parametric_poisson(n: usize, coeff_box: [[f64; 2]; 2]) -> Result<BilevelInstance> {
    if n < 4 {
        return Err(invalid("n", "grid size must be at least 4"));
    }
    let [[d_lo, d_hi], [m_lo, m_hi]] = coeff_box;
    if !(d_lo > -1.0) || !(m_lo > 0.0) {
        return Err(invalid(
            "coeff_box",
            "needs diffusion > -1 and mass > 0 so that A(x) is strictly diagonally dominant",
        ));
    }
    let lap = second_difference(n);
    let h = 1.0 / (n + 1) as f64;
    let source = DVector::from_element(n, 1.0);
    let sys = ParametricLinearSystem::new(
        lap.clone(),
        vec![lap, DMatrix::identity(n, n)],
        source,
        vec![DVector::zeros(n), DVector::from_fn(n, |i, _| {
            5.0 * (3.0 * std::f64::consts::PI * (i + 1) as f64 * h).sin()
        })],
    )?;
    let region = Region::Box {
        lo: vec![d_lo, m_lo],
        hi: vec![d_hi, m_hi],
    };
    region.validate()?;
    let center = region.center().expect("box region");
    let placeholder = DVector::zeros(n);
    let mut inst = BilevelInstance::new(
        format!("parametric_poisson(n={n})"),
        Arc::new(sys),
        placeholder,
        region,
    )?;
    inst.target = inst.solve_inner_exact(&center)?;
    inst.known_minimizer = Some(center);
    inst.spec = Some(InstanceSpec::ParametricPoisson { n, coeff_box });
    Ok(inst)
}

/// Inner saddle problem `min_z (a/2)‖z − x‖² + h(Kz)` with `h* = (b/2)‖·‖²`,
/// written through its optimality system in `u = (z, y)`.
pub fn make_saddle_bilevel(
    primal_weight: f64,
    dual_weight: f64,
    coupling: DMatrix<f64>,
    halfwidth: f64,
) -> Result<BilevelInstance> {
    if !(primal_weight > 0.0) || !(dual_weight > 0.0) {
        return Err(invalid("weights", "must be positive"));
    }
    if !(halfwidth > 0.0) {
        return Err(invalid("halfwidth", "must be positive"));
    }
    let (m, d) = coupling.shape();
    let n = d + m;
    let mut a0 = DMatrix::zeros(n, n);
    a0.view_mut((0, 0), (d, d))
        .copy_from(&(DMatrix::identity(d, d) * primal_weight));
    a0.view_mut((0, d), (d, m)).copy_from(&coupling.transpose());
    a0.view_mut((d, 0), (m, d)).copy_from(&(-&coupling));
    a0.view_mut((d, d), (m, m))
        .copy_from(&(DMatrix::identity(m, m) * dual_weight));
    let b_coeffs = (0..d)
        .map(|i| {
            let mut e = DVector::zeros(n);
            e[i] = primal_weight;
            e
        })
        .collect();
    let sys = ParametricLinearSystem::new(
        a0,
        (0..d).map(|_| DMatrix::zeros(n, n)).collect(),
        DVector::zeros(n),
        b_coeffs,
    )?;
    let region = Region::Box {
        lo: vec![-halfwidth; d],
        hi: vec![halfwidth; d],
    };
    let reference = DVector::from_fn(d, |i, _| 0.5 * halfwidth * if i % 2 == 0 { 1.0 } else { -0.5 });
    let mut inst = BilevelInstance::new(
        format!("saddle_bilevel(d={d}, m={m})"),
        Arc::new(sys),
        DVector::zeros(n),
        region,
    )?;
    inst.target = inst.solve_inner_exact(&reference)?;
    inst.known_minimizer = Some(reference);
    inst.structure = InnerStructure::Saddle {
        primal_weight,
        dual_weight,
        coupling: coupling.clone(),
    };
    inst.spec = Some(InstanceSpec::SaddleBilevel {
        primal_weight,
        dual_weight,
        coupling: coupling.row_iter().map(|r| r.iter().copied().collect()).collect(),
        halfwidth,
    });
    Ok(inst)
}
