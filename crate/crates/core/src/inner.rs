//! Single-step inner algorithms and measurement of their tracking residuals.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, invalid, Error, Result};
use crate::operators::SymOperator;
use crate::par::{map_range, Execution};
use crate::problems::{spectral_norm, BilevelInstance, InnerStructure};
use crate::trace::IterateTrace;

/// Margin subtracted from `1/q` when a contraction factor is estimated.
pub const KAPPA_MARGIN: f64 = 1e-6;

/// Stationary splitting `A = N + M` with `N` the diagonal or lower triangle.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Splitting {
    Jacobi,
    GaussSeidel,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InnerMethod {
    /// Needs `InnerStructure::QuadraticProx`.
    ForwardBackward { tau: f64 },
    /// Needs `InnerStructure::Saddle`.
    PrimalDual { tau: f64, sigma: f64 },
    Jacobi,
    GaussSeidel,
}

impl InnerMethod {
    pub fn name(&self) -> &'static str {
        match self {
            InnerMethod::ForwardBackward { .. } => "fb",
            InnerMethod::PrimalDual { .. } => "pdps",
            InnerMethod::Jacobi => "jacobi",
            InnerMethod::GaussSeidel => "gauss_seidel",
        }
    }

    /// Step-size and structure requirements against `instance`.
    pub fn validate(&self, instance: &BilevelInstance) -> Result<()> {
        match (*self, &instance.structure) {
            (InnerMethod::ForwardBackward { tau }, InnerStructure::QuadraticProx { .. }) => {
                // f(u; x) = ½‖u − x‖² has L_f = 1.
                if !(tau > 0.0) || tau > 1.0 {
                    return Err(Error::StepLength(format!("inner forward-backward needs 0 < τ ≤ 1/L_f = 1, got {tau}")));
                }
                Ok(())
            }
            (InnerMethod::ForwardBackward { .. }, _) => Err(Error::Unsupported(
                "inner forward-backward needs a quadratic-prox inner problem".into(),
            )),
            (InnerMethod::PrimalDual { tau, sigma }, InnerStructure::Saddle { coupling, .. }) => {
                let nk = spectral_norm(coupling);
                if !(tau > 0.0) || !(sigma > 0.0) || tau * sigma * nk * nk > 1.0 + 1e-12 {
                    return Err(Error::StepLength(format!(
                        "inner primal-dual needs τσ‖K‖² ≤ 1, got τ={tau}, σ={sigma}, ‖K‖={nk}"
                    )));
                }
                Ok(())
            }
            (InnerMethod::PrimalDual { .. }, _) => Err(Error::Unsupported(
                "inner primal-dual needs a saddle inner problem".into(),
            )),
            (InnerMethod::Jacobi | InnerMethod::GaussSeidel, _) => {
                if instance.linear_system().is_none() {
                    return Err(Error::Unsupported("splitting schemes need a linear inner problem".into()));
                }
                Ok(())
            }
        }
    }

    /// Rough flop count of one step at size `n`.
    pub fn step_flops(&self, n: usize) -> u64 {
        let n = n as u64;
        match self {
            InnerMethod::ForwardBackward { .. } => 4 * n,
            InnerMethod::PrimalDual { .. } => 4 * n * n,
            InnerMethod::Jacobi | InnerMethod::GaussSeidel => 2 * n * n,
        }
    }
}

/// `N⁻¹(b − M u)`.
pub fn splitting_step(a: &DMatrix<f64>, b: &DVector<f64>, u: &DVector<f64>, scheme: Splitting) -> Result<DVector<f64>> {
    let n = a.nrows();
    check_dim("splitting matrix", n, a.ncols())?;
    check_dim("splitting rhs", n, b.len())?;
    check_dim("splitting iterate", n, u.len())?;
    let mut out = u.clone();
    for i in 0..n {
        let d = a[(i, i)];
        if d == 0.0 {
            return Err(Error::ZeroPivot(i));
        }
        let mut s = b[i];
        for j in 0..n {
            if j == i {
                continue;
            }
            // Gauss–Seidel reads the entries already updated in this sweep.
            let uj = match scheme {
                Splitting::GaussSeidel if j < i => out[j],
                _ => u[j],
            };
            s -= a[(i, j)] * uj;
        }
        out[i] = s / d;
    }
    Ok(out)
}

pub fn jacobi_step(u: &DVector<f64>, x: &DVector<f64>, instance: &BilevelInstance) -> Result<DVector<f64>> {
    let sys = instance
        .linear_system()
        .ok_or_else(|| Error::Unsupported("Jacobi needs a linear inner problem".into()))?;
    splitting_step(&sys.a(x), &sys.b(x), u, Splitting::Jacobi)
}

pub fn gauss_seidel_step(u: &DVector<f64>, x: &DVector<f64>, instance: &BilevelInstance) -> Result<DVector<f64>> {
    let sys = instance
        .linear_system()
        .ok_or_else(|| Error::Unsupported("Gauss–Seidel needs a linear inner problem".into()))?;
    splitting_step(&sys.a(x), &sys.b(x), u, Splitting::GaussSeidel)
}

/// `prox_{τg}(u − τ∇_u f(u; x)) = (u − τ(u − x))/(1 + τγ)`.
pub fn fb_inner_step(u: &DVector<f64>, x: &DVector<f64>, tau: f64, instance: &BilevelInstance) -> Result<DVector<f64>> {
    InnerMethod::ForwardBackward { tau }.validate(instance)?;
    let InnerStructure::QuadraticProx { gamma } = instance.structure else {
        unreachable!("validated above")
    };
    check_dim("inner iterate", instance.dim_u(), u.len())?;
    check_dim("outer variable", instance.dim_x(), x.len())?;
    Ok((u - (u - x) * tau) / (1.0 + tau * gamma))
}

/// One primal-dual step on the inner saddle problem, returning `(z⁺, y⁺)`.
pub fn pdps_inner_step(
    z: &DVector<f64>,
    y: &DVector<f64>,
    x: &DVector<f64>,
    tau: f64,
    sigma: f64,
    instance: &BilevelInstance,
) -> Result<(DVector<f64>, DVector<f64>)> {
    InnerMethod::PrimalDual { tau, sigma }.validate(instance)?;
    let InnerStructure::Saddle {
        primal_weight,
        dual_weight,
        coupling,
    } = &instance.structure
    else {
        unreachable!("validated above")
    };
    check_dim("primal iterate", coupling.ncols(), z.len())?;
    check_dim("dual iterate", coupling.nrows(), y.len())?;
    check_dim("outer variable", coupling.ncols(), x.len())?;
    let v = z - coupling.transpose() * y * tau;
    let z_next = (v + x * (tau * primal_weight)) / (1.0 + tau * primal_weight);
    let w = y + coupling * (&z_next * 2.0 - z) * sigma;
    let y_next = w / (1.0 + sigma * dual_weight);
    Ok((z_next, y_next))
}

/// One step of `method` on the stacked inner variable.
pub fn inner_step(method: &InnerMethod, instance: &BilevelInstance, u: &DVector<f64>, x: &DVector<f64>) -> Result<DVector<f64>> {
    match *method {
        InnerMethod::ForwardBackward { tau } => fb_inner_step(u, x, tau, instance),
        InnerMethod::PrimalDual { tau, sigma } => {
            let d = instance.dim_x();
            check_dim("inner iterate", instance.dim_u(), u.len())?;
            let z = u.rows(0, d).into_owned();
            let y = u.rows(d, u.len() - d).into_owned();
            let (z, y) = pdps_inner_step(&z, &y, x, tau, sigma, instance)?;
            let mut out = DVector::zeros(u.len());
            out.rows_mut(0, d).copy_from(&z);
            out.rows_mut(d, y.len()).copy_from(&y);
            Ok(out)
        }
        InnerMethod::Jacobi => jacobi_step(u, x, instance),
        InnerMethod::GaussSeidel => gauss_seidel_step(u, x, instance),
    }
}

/// `m` consecutive steps at frozen `x`.
pub fn inner_steps(
    method: &InnerMethod,
    instance: &BilevelInstance,
    u: &DVector<f64>,
    x: &DVector<f64>,
    m: usize,
) -> Result<DVector<f64>> {
    let mut u = u.clone();
    for _ in 0..m {
        u = inner_step(method, instance, &u, x)?;
    }
    Ok(u)
}

/// Linear part `G` of an affine map, probed by `G eᵢ = step(eᵢ) − step(0)`.
pub fn iteration_matrix<F>(dim: usize, step: F) -> Result<DMatrix<f64>>
where
    F: Fn(&DVector<f64>) -> Result<DVector<f64>>,
{
    let base = step(&DVector::zeros(dim))?;
    let mut g = DMatrix::zeros(base.len(), dim);
    for i in 0..dim {
        let mut e = DVector::zeros(dim);
        e[i] = 1.0;
        g.set_column(i, &(step(&e)? - &base));
    }
    Ok(g)
}

/// `ρ(G)`. Symmetric input goes through the symmetric eigensolver; otherwise
/// a bounded Schur iteration, with Gelfand's formula `‖G^{2^j}‖^{2^{−j}}` when
/// that does not converge.
pub fn spectral_radius(g: &DMatrix<f64>) -> f64 {
    if g.is_empty() {
        return 0.0;
    }
    let scale = g.amax().max(f64::MIN_POSITIVE);
    if (g - g.transpose()).amax() <= 1e-14 * scale {
        let sym = (g + g.transpose()) * 0.5;
        return sym.symmetric_eigenvalues().amax();
    }
    if let Some(schur) = g.clone().try_schur(f64::EPSILON, 10_000) {
        return schur.complex_eigenvalues().iter().fold(0.0f64, |a, v| a.max(v.norm()));
    }
    let mut power = g.clone();
    let mut log_scale = 0.0;
    let mut exponent = 1.0;
    for _ in 0..10 {
        let n = power.norm();
        if n == 0.0 {
            return 0.0;
        }
        log_scale += n.ln() / exponent;
        power /= n;
        power = &power * &power;
        exponent *= 2.0;
    }
    (log_scale + spectral_norm(&power).ln() / exponent).exp()
}

/// Iteration matrix of `m` inner steps at frozen `x`.
pub fn inner_iteration_matrix(
    method: &InnerMethod,
    instance: &BilevelInstance,
    x: &DVector<f64>,
    m: usize,
) -> Result<DMatrix<f64>> {
    iteration_matrix(instance.dim_u(), |u| inner_steps(method, instance, u, x, m))
}

/// Points where uniform constants are evaluated: the sample set of a
/// bounded Ω, or the origin when the iteration does not depend on `x`.
pub fn estimation_points(instance: &BilevelInstance, seed: u64, exec: Execution) -> Result<Vec<DVector<f64>>> {
    if instance.region.is_bounded() {
        return instance.sample_points(seed, exec);
    }
    match instance.linear_system() {
        Some(sys) if sys.a_coeffs.iter().all(|a| a.iter().all(|v| *v == 0.0)) => {
            Ok(vec![DVector::zeros(instance.dim_x())])
        }
        _ => Err(Error::Unsupported(
            "uniform constants over an unbounded region need an x-independent iteration".into(),
        )),
    }
}

/// Uniform contraction of `m` inner steps in the Euclidean norm.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContractionEstimate {
    /// `max_x ‖G_x^m‖₂`.
    pub norm: f64,
    /// `max_x ρ(G_x^m)`.
    pub radius: f64,
    /// `1/norm − KAPPA_MARGIN`.
    pub kappa: f64,
    pub points: usize,
}

pub fn estimate_inner_contraction(
    method: &InnerMethod,
    instance: &BilevelInstance,
    m: usize,
    seed: u64,
    exec: Execution,
) -> Result<ContractionEstimate> {
    method.validate(instance)?;
    let pts = estimation_points(instance, seed, exec)?;
    let per = map_range(pts.len(), exec, |i| {
        let g = inner_iteration_matrix(method, instance, &pts[i], m)?;
        Ok::<_, Error>((spectral_norm(&g), spectral_radius(&g)))
    });
    let (mut norm, mut radius) = (0.0f64, 0.0f64);
    for r in per {
        let (n, rho) = r?;
        norm = norm.max(n);
        radius = radius.max(rho);
    }
    contraction_from(norm, radius, pts.len())
}

pub(crate) fn contraction_from(norm: f64, radius: f64, points: usize) -> Result<ContractionEstimate> {
    let kappa = if norm == 0.0 { f64::INFINITY } else { 1.0 / norm - KAPPA_MARGIN };
    if !(kappa > 1.0) {
        return Err(invalid("kappa", format!("iteration is not a uniform contraction (‖G‖ = {norm})")));
    }
    Ok(ContractionEstimate {
        norm,
        radius,
        kappa,
        points,
    })
}

/// Observed contraction at a constant `x`, from `u⁰ = 0`: the geometric mean
/// of `‖u^{j+1} − ū‖/‖u^j − ū‖` over the last 10 steps before the error
/// falls below `1e-10` of its initial value (or `steps` is reached).
pub fn observed_contraction(
    method: &InnerMethod,
    instance: &BilevelInstance,
    x: &DVector<f64>,
    steps: usize,
) -> Result<f64> {
    let target = instance.solve_inner_exact(x)?;
    let mut u = DVector::zeros(instance.dim_u());
    let d0 = (&u - &target).norm();
    if d0 == 0.0 {
        return Ok(0.0);
    }
    let mut hist = vec![d0];
    for _ in 0..steps {
        u = inner_step(method, instance, &u, x)?;
        let d = (&u - &target).norm();
        hist.push(d);
        if d < 1e-10 * d0 {
            break;
        }
    }
    let w = 10.min(hist.len() - 1);
    if w == 0 {
        return Ok(0.0);
    }
    let (a, b) = (hist[hist.len() - 1 - w], hist[hist.len() - 1]);
    Ok((b / a).powf(1.0 / w as f64))
}

/// `d_U(u^k, S_u(x^{k−1})) + π_u λ(x^k, x^{k−1}) − κ_u d_U(u^{k+1}, S_u(x^k))`
/// for `k = 1, …, N−1`. Constants are in the units of `update_metric`.
pub fn measure_inner_tracking(
    trace: &IterateTrace,
    kappa_u: f64,
    pi_u: f64,
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
            let d_prev = (&prev.u - &prev.u_exact).norm();
            let d_cur = (&cur.u - &cur.u_exact).norm();
            let lam = update_metric.seminorm(&(&cur.x - &prev.x))?;
            Ok(d_prev + pi_u * lam - kappa_u * d_cur)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problems::{make_parametric_poisson, make_quadratic_bilevel, make_saddle_bilevel};
    use approx::assert_relative_eq;
    use rand::Rng;

    fn v(xs: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(xs)
    }

    fn bq1() -> BilevelInstance {
        make_quadratic_bilevel(1.0, &v(&[1.0])).unwrap()
    }

    #[test]
    fn fb_inner_examples() {
        let inst = bq1();
        assert_relative_eq!(fb_inner_step(&v(&[0.0]), &v(&[2.0]), 1.0, &inst).unwrap()[0], 1.0);
        for x in [-3.0, 0.4, 2.0] {
            let s = inst.solve_inner_exact(&v(&[x])).unwrap();
            let u = fb_inner_step(&s, &v(&[x]), 0.7, &inst).unwrap();
            assert_relative_eq!(u[0], s[0], epsilon = 1e-15);
        }
        // From distance 1 the step lands at 2/3, i.e. distance 1/3 = (1−τ)/(1+τγ).
        let u = fb_inner_step(&v(&[0.0]), &v(&[2.0]), 0.5, &inst).unwrap();
        assert_relative_eq!(u[0], 2.0 / 3.0, epsilon = 1e-15);
        let factor = (u[0] - 1.0).abs() / 1.0;
        assert_relative_eq!(factor, 1.0 / 3.0, epsilon = 1e-15);
        assert!(factor <= 1.0 / 1.5);
        assert!(matches!(fb_inner_step(&v(&[0.0]), &v(&[2.0]), 1.5, &inst), Err(Error::StepLength(_))));
    }

    #[test]
    fn splitting_examples() {
        let a = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 2.0]);
        let b = v(&[3.0, 3.0]);
        let u0 = v(&[0.0, 0.0]);
        assert_eq!(splitting_step(&a, &b, &u0, Splitting::Jacobi).unwrap(), v(&[1.5, 1.5]));
        assert_eq!(splitting_step(&a, &b, &u0, Splitting::GaussSeidel).unwrap(), v(&[1.5, 0.75]));
        let exact = a.clone().lu().solve(&b).unwrap();
        assert_relative_eq!(exact, v(&[1.0, 1.0]), epsilon = 1e-15);
        for s in [Splitting::Jacobi, Splitting::GaussSeidel] {
            assert_relative_eq!(splitting_step(&a, &b, &exact, s).unwrap(), exact, epsilon = 1e-15);
        }
        let singular = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 2.0]);
        assert_eq!(splitting_step(&singular, &b, &u0, Splitting::Jacobi), Err(Error::ZeroPivot(0)));
    }

    #[test]
    fn steps_are_deterministic() {
        let inst = make_parametric_poisson(8, [[0.0, 1.0], [0.5, 2.0]]).unwrap();
        let x = v(&[0.3, 1.1]);
        let u = DVector::from_fn(8, |i, _| (i as f64).sin());
        for m in [InnerMethod::Jacobi, InnerMethod::GaussSeidel] {
            let a = inner_step(&m, &inst, &u, &x).unwrap();
            let b = inner_step(&m, &inst, &u, &x).unwrap();
            assert_eq!(a.as_slice(), b.as_slice());
        }
    }

    #[test]
    fn pdps_inner_examples() {
        let inst = make_saddle_bilevel(1.0, 1.0, DMatrix::from_element(1, 1, 1.0), 2.0).unwrap();
        let (z, y) = pdps_inner_step(&v(&[0.0]), &v(&[0.0]), &v(&[1.0]), 1.0, 1.0, &inst).unwrap();
        assert_relative_eq!(z[0], 0.5, epsilon = 1e-15);
        assert_relative_eq!(y[0], 0.5, epsilon = 1e-15);
        let x = v(&[1.0]);
        let s = inst.solve_inner_exact(&x).unwrap();
        let out = inner_step(&InnerMethod::PrimalDual { tau: 1.0, sigma: 1.0 }, &inst, &s, &x).unwrap();
        assert_relative_eq!(out, s, epsilon = 1e-15);
        assert!(pdps_inner_step(&v(&[0.0]), &v(&[0.0]), &x, 2.0, 1.0, &inst).is_err());
    }

    #[test]
    fn pdps_inner_contracts_in_preconditioner_norm() {
        let k = DMatrix::from_row_slice(2, 3, &[1.0, 0.5, 0.0, -0.3, 1.0, 0.7]);
        let inst = make_saddle_bilevel(1.0, 0.5, k.clone(), 1.0).unwrap();
        let nk = spectral_norm(&k);
        let (tau, sigma) = (0.9 / nk, 0.9 / nk);
        let method = InnerMethod::PrimalDual { tau, sigma };
        let m = crate::operators::pdps_preconditioner(
            tau,
            sigma,
            &SymOperator::identity(3),
            &SymOperator::identity(2),
            &k,
        )
        .unwrap();
        for seed in 0..20u64 {
            let x = DVector::from_fn(3, |i, _| crate::par::sample_rng(seed, i).gen_range(-1.0..1.0));
            let s = inst.solve_inner_exact(&x).unwrap();
            let u0 = DVector::from_fn(5, |i, _| crate::par::sample_rng(seed + 100, i).gen_range(-2.0..2.0));
            let u1 = inner_step(&method, &inst, &u0, &x).unwrap();
            let before = m.seminorm(&(&u0 - &s)).unwrap();
            let after = m.seminorm(&(&u1 - &s)).unwrap();
            assert!(after < before, "seed {seed}: {after} vs {before}");
        }
    }

    #[test]
    fn jacobi_contraction_matches_spectral_radius() {
        let inst = make_parametric_poisson(8, [[0.0, 1.0], [0.5, 2.0]]).unwrap();
        let x = v(&[0.5, 1.0]);
        let g = inner_iteration_matrix(&InnerMethod::Jacobi, &inst, &x, 1).unwrap();
        let rho = spectral_radius(&g);
        // Symmetric iteration matrix: norm and radius coincide.
        assert_relative_eq!(spectral_norm(&g), rho, max_relative = 1e-10);
        // D = tridiag(−1,2,−1): ρ = (1+x₁)·2cos(π/(n+1)) / (2(1+x₁)+x₂).
        let oracle = 1.5 * 2.0 * (std::f64::consts::PI / 9.0).cos() / (3.0 + 1.0);
        assert_relative_eq!(rho, oracle, max_relative = 1e-10);
        let observed = observed_contraction(&InnerMethod::Jacobi, &inst, &x, 400).unwrap();
        assert!((observed - rho).abs() <= 0.05 * rho, "{observed} vs {rho}");
    }

    #[test]
    fn uniform_contraction_estimates() {
        let inst = make_parametric_poisson(6, [[0.0, 1.0], [0.5, 2.0]]).unwrap();
        let est = estimate_inner_contraction(&InnerMethod::Jacobi, &inst, 1, 3, Execution::Parallel).unwrap();
        let seq = estimate_inner_contraction(&InnerMethod::Jacobi, &inst, 1, 3, Execution::Sequential).unwrap();
        assert_eq!(est, seq);
        assert!(est.kappa > 1.0);
        // Worst case sits at the corner with the least mass.
        let worst = 2.0 * (std::f64::consts::PI / 7.0).cos() * 2.0 / (4.0 + 0.5);
        assert_relative_eq!(est.norm, worst, max_relative = 1e-10);
        let bq = bq1();
        let fb = estimate_inner_contraction(&InnerMethod::ForwardBackward { tau: 0.5 }, &bq, 1, 0, Execution::Sequential)
            .unwrap();
        assert_relative_eq!(fb.norm, 1.0 / 3.0, epsilon = 1e-15);
    }
}
