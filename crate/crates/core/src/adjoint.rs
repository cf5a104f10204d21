//! Single-step adjoint algorithms, the differential transformations that
//! assemble gradient estimates, and assembly of the tracking constants.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::inner::{contraction_from, estimation_points, iteration_matrix, splitting_step, InnerMethod, Splitting};
use crate::operators::SymOperator;
use crate::par::{map_range, Execution};
use crate::problems::{spectral_norm, BilevelInstance, InnerStructure, Sensitivities};
use crate::trace::IterateTrace;
use crate::tracking::TrackingConstants;

/// Lower floor for constants that vanish analytically but must be positive.
pub const CONSTANT_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdjointVariant {
    /// Covector `w` solving `w ∂T/∂u = −J'(u)`.
    Reduced,
    /// Full sensitivity `p ≈ S_u'(x)`.
    Basic,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdjointMethod {
    pub variant: AdjointVariant,
    pub scheme: Splitting,
}

impl AdjointMethod {
    pub fn name(&self) -> String {
        let v = match self.variant {
            AdjointVariant::Reduced => "reduced",
            AdjointVariant::Basic => "basic",
        };
        let s = match self.scheme {
            Splitting::Jacobi => "jacobi",
            Splitting::GaussSeidel => "gauss_seidel",
        };
        format!("{v}-{s}")
    }

    pub fn step_flops(&self, n: usize, dim_x: usize) -> u64 {
        let per = 2 * (n as u64) * (n as u64);
        match self.variant {
            AdjointVariant::Reduced => per,
            AdjointVariant::Basic => per * dim_x as u64,
        }
    }
}

/// Current adjoint iterate.
#[derive(Clone, Debug, PartialEq)]
pub enum AdjointState {
    Reduced(DVector<f64>),
    Basic(DMatrix<f64>),
}

impl AdjointState {
    pub fn zeros(variant: AdjointVariant, dim_u: usize, dim_x: usize) -> Self {
        match variant {
            AdjointVariant::Reduced => AdjointState::Reduced(DVector::zeros(dim_u)),
            AdjointVariant::Basic => AdjointState::Basic(DMatrix::zeros(dim_u, dim_x)),
        }
    }

    /// Exact adjoint at the exact inner solution for `x`.
    pub fn exact(variant: AdjointVariant, instance: &BilevelInstance, x: &DVector<f64>) -> Result<Self> {
        Ok(match variant {
            AdjointVariant::Reduced => AdjointState::Reduced(instance.solve_reduced_adjoint_exact(x)?),
            AdjointVariant::Basic => AdjointState::Basic(instance.solve_basic_adjoint_exact(x)?),
        })
    }

    /// `(rows, cols)`; a covector is `(n, 1)`.
    pub fn shape(&self) -> (usize, usize) {
        match self {
            AdjointState::Reduced(w) => (w.len(), 1),
            AdjointState::Basic(p) => p.shape(),
        }
    }

    /// Row-major flattening, the CSV layout.
    pub fn flatten(&self) -> DVector<f64> {
        match self {
            AdjointState::Reduced(w) => w.clone(),
            AdjointState::Basic(p) => crate::trace::flatten_row_major(p),
        }
    }

    /// Euclidean (Frobenius) distance `d_W`.
    pub fn distance(&self, other: &Self) -> Result<f64> {
        match (self, other) {
            (AdjointState::Reduced(a), AdjointState::Reduced(b)) => {
                check_dim("adjoint", a.len(), b.len())?;
                Ok((a - b).norm())
            }
            (AdjointState::Basic(a), AdjointState::Basic(b)) => {
                check_dim("adjoint", a.len(), b.len())?;
                Ok((a - b).norm())
            }
            _ => Err(Error::Other("mixed adjoint variants".into())),
        }
    }
}

/// One splitting step on `(∂T/∂u)ᵀ w = −J'(u_next)` at `(u_next, x)`.
pub fn reduced_adjoint_step(
    w: &DVector<f64>,
    u_next: &DVector<f64>,
    x: &DVector<f64>,
    instance: &BilevelInstance,
    scheme: Splitting,
) -> Result<DVector<f64>> {
    let a = instance.inner.jac_u(u_next, x).transpose();
    splitting_step(&a, &(-instance.objective_grad_u(u_next)), w, scheme)
}

/// One splitting step, columnwise, on `∂T/∂u p = −∂T/∂x` at `(u_next, x)`.
pub fn basic_adjoint_step(
    p: &DMatrix<f64>,
    u_next: &DVector<f64>,
    x: &DVector<f64>,
    instance: &BilevelInstance,
    scheme: Splitting,
) -> Result<DMatrix<f64>> {
    let a = instance.inner.jac_u(u_next, x);
    let rhs = -instance.inner.jac_x(u_next, x);
    check_dim("basic adjoint rows", a.nrows(), p.nrows())?;
    check_dim("basic adjoint columns", rhs.ncols(), p.ncols())?;
    let mut out = DMatrix::zeros(p.nrows(), p.ncols());
    for j in 0..p.ncols() {
        let col = splitting_step(&a, &rhs.column(j).into_owned(), &p.column(j).into_owned(), scheme)?;
        out.set_column(j, &col);
    }
    Ok(out)
}

/// `m` adjoint steps at frozen `(u_next, x)`.
pub fn adjoint_steps(
    method: &AdjointMethod,
    instance: &BilevelInstance,
    state: &AdjointState,
    u_next: &DVector<f64>,
    x: &DVector<f64>,
    m: usize,
) -> Result<AdjointState> {
    let mut s = state.clone();
    for _ in 0..m {
        s = match (&s, method.variant) {
            (AdjointState::Reduced(w), AdjointVariant::Reduced) => {
                AdjointState::Reduced(reduced_adjoint_step(w, u_next, x, instance, method.scheme)?)
            }
            (AdjointState::Basic(p), AdjointVariant::Basic) => {
                AdjointState::Basic(basic_adjoint_step(p, u_next, x, instance, method.scheme)?)
            }
            _ => return Err(Error::Other("adjoint state does not match the method".into())),
        };
    }
    Ok(s)
}

/// `w_next ∂T/∂x(u_next, x)`, as a column vector.
pub fn differential_transform_reduced(
    w_next: &DVector<f64>,
    u_next: &DVector<f64>,
    x: &DVector<f64>,
    instance: &BilevelInstance,
) -> Result<DVector<f64>> {
    check_dim("reduced adjoint", instance.dim_u(), w_next.len())?;
    Ok(instance.inner.jac_x(u_next, x).transpose() * w_next)
}

/// `J'(u_next) p_next`, as a column vector.
pub fn differential_transform_basic(
    p_next: &DMatrix<f64>,
    u_next: &DVector<f64>,
    instance: &BilevelInstance,
) -> Result<DVector<f64>> {
    check_dim("basic adjoint rows", instance.dim_u(), p_next.nrows())?;
    Ok(p_next.transpose() * instance.objective_grad_u(u_next))
}

pub fn differential_transform(
    state: &AdjointState,
    u_next: &DVector<f64>,
    x: &DVector<f64>,
    instance: &BilevelInstance,
) -> Result<DVector<f64>> {
    match state {
        AdjointState::Reduced(w) => differential_transform_reduced(w, u_next, x, instance),
        AdjointState::Basic(p) => differential_transform_basic(p, u_next, instance),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Analytic,
    Empirical,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConstantsMode {
    /// Closed form when the instance has one, sampling otherwise.
    #[default]
    Auto,
    Analytic,
    Empirical,
}

/// Euclidean `α_u`, `α_w` with the suprema they are built from. The suprema
/// over `u` are taken on the tube `‖u − S_u(x)‖ ≤ tube_radius`, `x ∈ Ω`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransformConstants {
    pub variant: AdjointVariant,
    pub alpha_u: f64,
    pub alpha_w: f64,
    pub provenance: Provenance,
    pub tube_radius: f64,
    /// `N_{J'}`: sup of `‖J'(S_u(x))‖`.
    pub n_objective_grad: f64,
    /// `L_{J'}`.
    pub l_objective_grad: f64,
    /// `N_{S_u'}`: sup of `‖S_u'(x)‖`.
    pub n_solution_derivative: f64,
    /// `N_{S_w}`: sup of `‖S_w(x)‖`.
    pub n_reduced_adjoint: f64,
    /// `L_{∂T/∂x;u}`.
    pub l_jac_x_u: f64,
    /// `M_{∂T/∂x}` over the tube.
    pub m_jac_x: f64,
}

fn mul_sup(a: f64, b: f64) -> f64 {
    // A vanishing Lipschitz factor kills an unbounded supremum.
    if a == 0.0 || b == 0.0 {
        0.0
    } else {
        a * b
    }
}

/// `√(Σ‖A_j‖²)`, the `u`-Lipschitz factor of `∂T/∂x` for linear problems.
fn jac_x_u_lipschitz(instance: &BilevelInstance) -> Result<f64> {
    let sys = instance
        .linear_system()
        .ok_or_else(|| Error::Unsupported("transform constants need a linear inner problem".into()))?;
    Ok(sys.a_coeffs.iter().map(|a| spectral_norm(a).powi(2)).sum::<f64>().sqrt())
}

pub fn default_tube_radius(initial_inner_distance: f64) -> f64 {
    2.0 * initial_inner_distance.max(1.0)
}

pub fn estimate_transform_constants(
    instance: &BilevelInstance,
    variant: AdjointVariant,
    mode: ConstantsMode,
    tube_radius: f64,
    seed: u64,
    exec: Execution,
) -> Result<TransformConstants> {
    let l_b = jac_x_u_lipschitz(instance)?;
    let l_jp = instance.objective_grad_lipschitz();
    let (sens, provenance) = sensitivities(instance, mode, seed, exec)?;
    let n_jp = sens.objective_grad_bound;
    let m_b = sens.jac_x_bound + l_b * tube_radius;
    let (alpha_u, alpha_w) = match variant {
        AdjointVariant::Reduced => (mul_sup(sens.reduced_adjoint_bound, l_b), m_b),
        AdjointVariant::Basic => (l_jp * sens.solution_lipschitz, n_jp + l_jp * tube_radius),
    };
    Ok(TransformConstants {
        variant,
        alpha_u,
        alpha_w,
        provenance,
        tube_radius,
        n_objective_grad: n_jp,
        l_objective_grad: l_jp,
        n_solution_derivative: sens.solution_lipschitz,
        n_reduced_adjoint: sens.reduced_adjoint_bound,
        l_jac_x_u: l_b,
        m_jac_x: m_b,
    })
}

fn sensitivities(
    instance: &BilevelInstance,
    mode: ConstantsMode,
    seed: u64,
    exec: Execution,
) -> Result<(Sensitivities, Provenance)> {
    let analytic = instance.closed_form.is_some();
    match mode {
        ConstantsMode::Analytic if !analytic => {
            Err(Error::Unsupported("no closed-form constants for this instance".into()))
        }
        ConstantsMode::Empirical if !instance.region.is_bounded() => {
            Err(Error::Unsupported("empirical constants need a bounded region".into()))
        }
        ConstantsMode::Analytic | ConstantsMode::Auto if analytic => {
            Ok((instance.estimate_sensitivities(seed, exec)?, Provenance::Analytic))
        }
        _ => Ok((instance.estimate_sensitivities(seed, exec)?, Provenance::Empirical)),
    }
}

/// Both sides of the transform inequality, in Euclidean norms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransformCheck {
    pub lhs: f64,
    pub rhs: f64,
    pub holds: bool,
}

pub fn transform_error_bound(
    u_next: &DVector<f64>,
    adjoint_next: &AdjointState,
    x: &DVector<f64>,
    instance: &BilevelInstance,
    constants: &TransformConstants,
) -> Result<TransformCheck> {
    let u_exact = instance.solve_inner_exact(x)?;
    let exact = AdjointState::exact(constants.variant, instance, x)?;
    let estimate = differential_transform(adjoint_next, u_next, x, instance)?;
    let grad = instance.exact_gradient(x)?;
    let lhs = (estimate - grad).norm();
    let rhs = constants.alpha_u * (u_next - &u_exact).norm() + constants.alpha_w * adjoint_next.distance(&exact)?;
    Ok(TransformCheck {
        lhs,
        rhs,
        holds: lhs <= rhs + 1e-10,
    })
}

/// Tracking constants in Euclidean units (`d_X`, `d_{X*}`, `λ` all `‖·‖₂`).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EuclideanConstants {
    pub constants: TrackingConstants,
    pub inner_provenance: Provenance,
    pub adjoint_provenance: Provenance,
    pub transform: TransformConstants,
    /// `‖G_w^m‖₂`; zero when the adjoint step is an exact solve.
    pub adjoint_contraction: f64,
    /// `L_{w*,u}` (reduced) or `L_{p*,u}` (basic).
    pub adjoint_u_lipschitz: f64,
}

/// `(√‖M⁻¹‖, 1/√λ_min(Λ))`: multipliers taking Euclidean `α` and `π` to the
/// dual step metric and the update metric.
pub fn metric_scales(step_metric: &SymOperator, update_metric: &SymOperator) -> Result<(f64, f64)> {
    let m_min = step_metric.min_eigenvalue();
    let l_min = update_metric.min_eigenvalue();
    if !(m_min > 0.0) || !(l_min > 0.0) {
        return Err(Error::Unsupported("metric conversion needs positive definite metrics".into()));
    }
    Ok(((1.0 / m_min).sqrt(), 1.0 / l_min.sqrt()))
}

impl EuclideanConstants {
    /// Constants relative to `d_{X*} = ‖·‖_{M⁻¹}` and `λ = ‖·‖_Λ`.
    pub fn in_metrics(&self, step_metric: &SymOperator, update_metric: &SymOperator) -> Result<TrackingConstants> {
        let (alpha_scale, pi_scale) = metric_scales(step_metric, update_metric)?;
        let c = &self.constants;
        TrackingConstants::new(
            c.kappa_u,
            c.kappa_w,
            c.pi_u * pi_scale,
            c.pi_w * pi_scale,
            c.mu_u,
            c.alpha_u * alpha_scale,
            c.alpha_w * alpha_scale,
        )
    }
}

/// Inner contraction `κ_u` and provenance.
fn inner_kappa(
    method: &InnerMethod,
    instance: &BilevelInstance,
    m: usize,
    mode: ConstantsMode,
    seed: u64,
    exec: Execution,
) -> Result<(f64, Provenance)> {
    let analytic = match (method, &instance.structure) {
        (InnerMethod::ForwardBackward { tau }, InnerStructure::QuadraticProx { gamma }) => {
            Some((1.0 + tau * gamma).powi(m as i32))
        }
        _ => None,
    };
    match (mode, analytic) {
        (ConstantsMode::Analytic | ConstantsMode::Auto, Some(k)) => Ok((k, Provenance::Analytic)),
        (ConstantsMode::Analytic, None) => Err(Error::Unsupported(format!(
            "no closed-form contraction for the {} inner method",
            method.name()
        ))),
        _ => {
            let est = crate::inner::estimate_inner_contraction(method, instance, m, seed, exec)?;
            Ok((est.kappa, Provenance::Empirical))
        }
    }
}

/// Uniform `‖G_w^m‖₂` of the adjoint splitting over the estimation points.
pub fn adjoint_contraction(
    method: &AdjointMethod,
    instance: &BilevelInstance,
    m: usize,
    seed: u64,
    exec: Execution,
) -> Result<f64> {
    let pts = estimation_points(instance, seed, exec)?;
    let per = map_range(pts.len(), exec, |i| {
        let x = &pts[i];
        let u = instance.solve_inner_exact(x)?;
        let a = match method.variant {
            AdjointVariant::Reduced => instance.inner.jac_u(&u, x).transpose(),
            AdjointVariant::Basic => instance.inner.jac_u(&u, x),
        };
        let zero = DVector::zeros(a.nrows());
        let g = iteration_matrix(a.nrows(), |v| {
            let mut v = v.clone();
            for _ in 0..m {
                v = splitting_step(&a, &zero, &v, method.scheme)?;
            }
            Ok(v)
        })?;
        Ok::<_, Error>(spectral_norm(&g))
    });
    let mut q = 0.0f64;
    for r in per {
        q = q.max(r?);
    }
    Ok(q)
}

/// Assembles `(κ_u, κ_w, π_u, π_w, μ_u, α_u, α_w)` in Euclidean units for
/// `m` inner and adjoint steps per outer iteration.
#[allow(clippy::too_many_arguments)]
pub fn assemble_constants(
    instance: &BilevelInstance,
    inner: &InnerMethod,
    adjoint: &AdjointMethod,
    m: usize,
    mode: ConstantsMode,
    tube_radius: f64,
    seed: u64,
    exec: Execution,
) -> Result<EuclideanConstants> {
    if m == 0 {
        return Err(crate::error::invalid("steps", "at least one step per outer iteration"));
    }
    inner.validate(instance)?;
    let (kappa_u, inner_prov) = inner_kappa(inner, instance, m, mode, seed, exec)?;
    let (sens, sens_prov) = sensitivities(instance, mode, seed, exec)?;
    let transform = estimate_transform_constants(instance, adjoint.variant, mode, tube_radius, seed, exec)?;
    let q_w = adjoint_contraction(adjoint, instance, m, seed, exec)?;
    let kappa_w = if q_w <= 1e-14 {
        // The adjoint step is an exact solve; any κ_w works, and κ_u keeps κ̄ small.
        kappa_u
    } else {
        contraction_from(q_w, q_w, 0)?.kappa
    };
    let (l_adj_u, pi_w) = match adjoint.variant {
        AdjointVariant::Reduced => (
            sens.inverse_jac_u_bound * instance.objective_grad_lipschitz(),
            sens.reduced_adjoint_lipschitz,
        ),
        AdjointVariant::Basic => (
            sens.inverse_jac_u_bound * jac_x_u_lipschitz(instance)?,
            sens.basic_adjoint_lipschitz,
        ),
    };
    let mu_u = kappa_w * (1.0 + q_w) * l_adj_u;
    let constants = TrackingConstants::new(
        kappa_u,
        kappa_w,
        sens.solution_lipschitz.max(CONSTANT_FLOOR),
        pi_w.max(CONSTANT_FLOOR),
        mu_u.max(CONSTANT_FLOOR),
        transform.alpha_u,
        transform.alpha_w,
    )?;
    let provenance = |p: Provenance| match (p, sens_prov) {
        (Provenance::Analytic, Provenance::Analytic) => Provenance::Analytic,
        _ => Provenance::Empirical,
    };
    Ok(EuclideanConstants {
        constants,
        inner_provenance: provenance(inner_prov),
        adjoint_provenance: sens_prov,
        transform,
        adjoint_contraction: q_w,
        adjoint_u_lipschitz: l_adj_u,
    })
}

/// `d_W(w^k, S_w(x^{k−1})) + μ_u d_U(u^{k+1}, S_u(x^k)) + π_w λ(x^k, x^{k−1})
/// − κ_w d_W(w^{k+1}, S_w(x^k))` for `k = 1, …, N−1`.
pub fn measure_adjoint_tracking(
    trace: &IterateTrace,
    kappa_w: f64,
    mu_u: f64,
    pi_w: f64,
    update_metric: &SymOperator,
) -> Result<Vec<f64>> {
    if trace.rows.len() < 2 {
        return Err(Error::Empty("trace with at least two outer steps"));
    }
    trace
        .rows
        .windows(2)
        .map(|w| {
            let (prev, cur) = (&w[0], &w[1]);
            let d_prev = (&prev.adjoint - &prev.adjoint_exact).norm();
            let d_cur = (&cur.adjoint - &cur.adjoint_exact).norm();
            let e_u = (&cur.u - &cur.u_exact).norm();
            let lam = update_metric.seminorm(&(&cur.x - &prev.x))?;
            Ok(d_prev + mu_u * e_u + pi_w * lam - kappa_w * d_cur)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::par::sample_rng;
    use crate::problems::{make_parametric_poisson, make_quadratic_bilevel};
    use approx::assert_relative_eq;
    use rand::Rng;

    fn v(xs: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(xs)
    }

    fn bq1() -> BilevelInstance {
        make_quadratic_bilevel(1.0, &v(&[1.0])).unwrap()
    }

    fn poisson(n: usize) -> BilevelInstance {
        make_parametric_poisson(n, [[0.0, 1.0], [0.5, 2.0]]).unwrap()
    }

    #[test]
    fn reduced_adjoint_bq1_examples() {
        let inst = bq1();
        for w in [-3.0, 0.0, 5.0] {
            let out = reduced_adjoint_step(&v(&[w]), &v(&[1.0]), &v(&[2.0]), &inst, Splitting::Jacobi).unwrap();
            assert_eq!(out[0], 0.0);
            let out = reduced_adjoint_step(&v(&[w]), &v(&[0.0]), &v(&[2.0]), &inst, Splitting::Jacobi).unwrap();
            assert_relative_eq!(out[0], 0.5, epsilon = 1e-15);
        }
    }

    #[test]
    fn basic_adjoint_bq1_examples() {
        let inst = bq1();
        for p in [-1.0, 0.0, 7.0] {
            let out = basic_adjoint_step(&DMatrix::from_element(1, 1, p), &v(&[0.3]), &v(&[2.0]), &inst, Splitting::GaussSeidel)
                .unwrap();
            assert_relative_eq!(out[(0, 0)], 0.5, epsilon = 1e-15);
        }
    }

    #[test]
    fn transform_examples() {
        let inst = bq1();
        assert_eq!(differential_transform_reduced(&v(&[0.0]), &v(&[1.0]), &v(&[2.0]), &inst).unwrap()[0], 0.0);
        let g = differential_transform_reduced(&v(&[0.5]), &v(&[0.0]), &v(&[0.0]), &inst).unwrap();
        assert_relative_eq!(g[0], -0.5, epsilon = 1e-15);
        assert_relative_eq!(inst.exact_gradient(&v(&[0.0])).unwrap()[0], -0.5, epsilon = 1e-15);
        let half = DMatrix::from_element(1, 1, 0.5);
        assert_eq!(differential_transform_basic(&half, &v(&[1.0]), &inst).unwrap()[0], 0.0);
        assert_relative_eq!(differential_transform_basic(&half, &v(&[0.0]), &inst).unwrap()[0], -0.5);
    }

    #[test]
    fn fixed_points_match_direct_solves() {
        let inst = poisson(8);
        let x = v(&[0.4, 1.3]);
        let u = DVector::from_fn(8, |i, _| 0.1 * i as f64);
        let w_star = inst.reduced_adjoint_at(&u, &x).unwrap();
        let p_star = inst.basic_adjoint_at(&u, &x).unwrap();
        for s in [Splitting::Jacobi, Splitting::GaussSeidel] {
            let w = reduced_adjoint_step(&w_star, &u, &x, &inst, s).unwrap();
            assert_relative_eq!(w, w_star, epsilon = 1e-12);
            let p = basic_adjoint_step(&p_star, &u, &x, &inst, s).unwrap();
            assert_relative_eq!(p, p_star, epsilon = 1e-12);
        }
        // Iterating from zero converges to the same point.
        let mut w = DVector::zeros(8);
        for _ in 0..600 {
            w = reduced_adjoint_step(&w, &u, &x, &inst, Splitting::GaussSeidel).unwrap();
        }
        assert_relative_eq!(w, w_star, epsilon = 1e-10);
    }

    #[test]
    fn transforms_agree_with_exact_gradient() {
        for inst in [bq1(), poisson(8)] {
            let x = if inst.dim_x() == 1 { v(&[0.7]) } else { v(&[0.2, 1.7]) };
            let u = inst.solve_inner_exact(&x).unwrap();
            let g = inst.exact_gradient(&x).unwrap();
            let red = differential_transform_reduced(&inst.solve_reduced_adjoint_exact(&x).unwrap(), &u, &x, &inst).unwrap();
            let bas = differential_transform_basic(&inst.solve_basic_adjoint_exact(&x).unwrap(), &u, &inst).unwrap();
            assert!((red - &g).norm() <= 1e-10);
            assert!((bas - &g).norm() <= 1e-10);
        }
    }

    #[test]
    fn basic_adjoint_contraction_matches_jacobi_radius() {
        let inst = poisson(8);
        let x = v(&[0.5, 1.0]);
        let u = inst.solve_inner_exact(&x).unwrap();
        let p_star = inst.basic_adjoint_at(&u, &x).unwrap();
        let a = inst.inner.jac_u(&u, &x);
        let rho = 1.5 * 2.0 * (std::f64::consts::PI / 9.0).cos() / (2.0 * 1.5 + 1.0);
        let g = iteration_matrix(8, |c| splitting_step(&a, &DVector::zeros(8), c, Splitting::Jacobi)).unwrap();
        assert_relative_eq!(crate::inner::spectral_radius(&g), rho, max_relative = 1e-10);
        let mut p = DMatrix::zeros(8, 2);
        let mut hist = vec![(&p - &p_star).norm()];
        while hist.last().unwrap() > &(1e-10 * hist[0]) {
            p = basic_adjoint_step(&p, &u, &x, &inst, Splitting::Jacobi).unwrap();
            hist.push((&p - &p_star).norm());
        }
        let n = hist.len();
        let ratio = (hist[n - 1] / hist[n - 11]).powf(0.1);
        assert!((ratio - rho).abs() <= 0.05 * rho, "{ratio} vs {rho}");
    }

    #[test]
    fn bq1_transform_constants() {
        let inst = bq1();
        let red = estimate_transform_constants(&inst, AdjointVariant::Reduced, ConstantsMode::Analytic, 2.0, 0, Execution::Sequential)
            .unwrap();
        assert_eq!(red.l_jac_x_u, 0.0);
        assert_eq!(red.alpha_u, 0.0);
        assert_relative_eq!(red.alpha_w, 1.0, epsilon = 1e-15);
        assert_eq!(red.provenance, Provenance::Analytic);
        let bas = estimate_transform_constants(&inst, AdjointVariant::Basic, ConstantsMode::Analytic, 2.0, 0, Execution::Sequential)
            .unwrap();
        assert_relative_eq!(bas.n_solution_derivative, 0.5, epsilon = 1e-15);
        assert!(estimate_transform_constants(&inst, AdjointVariant::Basic, ConstantsMode::Empirical, 2.0, 0, Execution::Sequential)
            .is_err());
    }

    #[test]
    fn bq1_assembled_constants() {
        let inst = bq1();
        let red = AdjointMethod {
            variant: AdjointVariant::Reduced,
            scheme: Splitting::Jacobi,
        };
        let c = assemble_constants(&inst, &InnerMethod::ForwardBackward { tau: 1.0 }, &red, 1, ConstantsMode::Auto, 2.0, 0, Execution::Sequential)
            .unwrap();
        let k = c.constants;
        assert_eq!(c.adjoint_contraction, 0.0);
        assert_relative_eq!(k.kappa_u, 2.0);
        assert_relative_eq!(k.kappa_w, 2.0);
        assert_relative_eq!(k.pi_u, 0.5, epsilon = 1e-15);
        assert_relative_eq!(k.pi_w, 0.25, epsilon = 1e-15);
        assert_relative_eq!(k.mu_u, 1.0, epsilon = 1e-15);
        assert_eq!(k.alpha_u, 0.0);
        assert_relative_eq!(k.alpha_w, 1.0, epsilon = 1e-15);
        let tau = 0.4;
        let metric = k_in_metrics(&c, tau, 0.25);
        assert_relative_eq!(metric.pi_u, 1.0, epsilon = 1e-14);
        assert_relative_eq!(metric.pi_w, 0.5, epsilon = 1e-14);
        assert_relative_eq!(metric.alpha_w, tau.sqrt(), epsilon = 1e-14);
        let th = crate::tracking::theta(1.0, &metric, crate::tracking::THETA_TOL).unwrap();
        assert_relative_eq!(th, 4.0 * tau.sqrt(), max_relative = 1e-10);
    }

    fn k_in_metrics(c: &EuclideanConstants, tau: f64, l: f64) -> TrackingConstants {
        c.in_metrics(&SymOperator::scaled_identity(1, 1.0 / tau), &SymOperator::scaled_identity(1, l))
            .unwrap()
    }

    #[test]
    fn transform_bound_holds_on_perturbations() {
        let inst = poisson(6);
        for variant in [AdjointVariant::Reduced, AdjointVariant::Basic] {
            let tc = estimate_transform_constants(&inst, variant, ConstantsMode::Empirical, 1.0, 11, Execution::Parallel).unwrap();
            assert_eq!(tc.provenance, Provenance::Empirical);
            let pts = inst.sample_points(5, Execution::Sequential).unwrap();
            for (i, x) in pts.iter().take(200).enumerate() {
                let mut rng = sample_rng(99, i);
                let u = inst.solve_inner_exact(x).unwrap();
                let du = DVector::from_fn(6, |_, _| rng.gen_range(-1.0..1.0));
                let u_pert = &u + du.normalize() * rng.gen_range(0.0..1.0);
                let exact = AdjointState::exact(variant, &inst, x).unwrap();
                let adj = match exact {
                    AdjointState::Reduced(w) => AdjointState::Reduced(w.map(|v| v + rng.gen_range(-0.3..0.3))),
                    AdjointState::Basic(p) => AdjointState::Basic(p.map(|v| v + rng.gen_range(-0.3..0.3))),
                };
                let chk = transform_error_bound(&u_pert, &adj, x, &inst, &tc).unwrap();
                assert!(chk.holds, "{variant:?} sample {i}: {chk:?}");
            }
            let x = &pts[3];
            let u = inst.solve_inner_exact(x).unwrap();
            let exact = AdjointState::exact(variant, &inst, x).unwrap();
            let chk = transform_error_bound(&u, &exact, x, &inst, &tc).unwrap();
            assert!(chk.lhs <= 1e-10 && chk.rhs <= 1e-10);
        }
    }

    #[test]
    fn poisson_empirical_constants_dominate_single_samples() {
        let inst = poisson(6);
        let tc = estimate_transform_constants(&inst, AdjointVariant::Reduced, ConstantsMode::Empirical, 1.0, 2, Execution::Parallel)
            .unwrap();
        let x = v(&[0.77, 0.61]);
        let u = inst.solve_inner_exact(&x).unwrap();
        let w = inst.reduced_adjoint_at(&u, &x).unwrap();
        assert!(tc.n_reduced_adjoint >= w.norm());
        assert!(tc.m_jac_x >= spectral_norm(&inst.inner.jac_x(&u, &x)));
    }
}
