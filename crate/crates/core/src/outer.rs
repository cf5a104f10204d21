//! Outer methods: proximal maps, inexact forward-backward and primal-dual
//! steps, step-length certificates and the single-loop driver that
//! interleaves inner, adjoint and outer updates.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::adjoint::{
    adjoint_steps, assemble_constants, default_tube_radius, differential_transform, AdjointMethod, AdjointState,
    ConstantsMode, EuclideanConstants,
};
use crate::error::{check_dim, invalid, Error, Result};
use crate::inner::{inner_steps, InnerMethod};
use crate::operators::{pdps_preconditioner, pdps_step_check, BlockShape, SkewOperator, SymOperator};
use crate::par::Execution;
use crate::problems::{spectral_norm, BilevelInstance, InstanceSpec};
use crate::trace::{Counters, IterateTrace, RunStatus, TraceRow};
use crate::tracking::{theta, ElipVariant, ErrorLedger, TrackingConstants, THETA_TOL};

/// Closed-form proximable functions, applied componentwise where separable.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ProxFunction {
    Zero,
    /// `(γ/2)‖x − a‖²`; an empty `center` is the origin.
    ScaledQuadratic {
        gamma: f64,
        #[serde(default)]
        center: Vec<f64>,
    },
    /// `weight·‖x‖₁`.
    SoftThreshold { weight: f64 },
    /// Indicator of `[lo, hi]` in every component.
    BoxIndicator { lo: f64, hi: f64 },
    /// `(γ/2)‖x − a‖²` restricted to `[lo, hi]` in every component.
    QuadraticOnBox {
        gamma: f64,
        #[serde(default)]
        center: Vec<f64>,
        lo: f64,
        hi: f64,
    },
}

impl ProxFunction {
    pub fn validate(&self) -> Result<()> {
        match self {
            ProxFunction::Zero => Ok(()),
            ProxFunction::ScaledQuadratic { gamma, .. } if !(*gamma >= 0.0) => {
                Err(invalid("gamma", "quadratic weight must be nonnegative"))
            }
            ProxFunction::SoftThreshold { weight } if !(*weight >= 0.0) => {
                Err(invalid("weight", "soft-threshold weight must be nonnegative"))
            }
            ProxFunction::BoxIndicator { lo, hi } | ProxFunction::QuadraticOnBox { lo, hi, .. } if !(lo <= hi) => {
                Err(invalid("box", "lo must not exceed hi"))
            }
            ProxFunction::QuadraticOnBox { gamma, .. } if !(*gamma >= 0.0) => {
                Err(invalid("gamma", "quadratic weight must be nonnegative"))
            }
            _ => Ok(()),
        }
    }

    fn center(c: &[f64], dim: usize) -> Result<DVector<f64>> {
        if c.is_empty() {
            return Ok(DVector::zeros(dim));
        }
        check_dim("prox center", dim, c.len())?;
        Ok(DVector::from_column_slice(c))
    }

    /// Modulus of strong convexity.
    pub fn strong_convexity(&self) -> f64 {
        match self {
            ProxFunction::ScaledQuadratic { gamma, .. } | ProxFunction::QuadraticOnBox { gamma, .. } => *gamma,
            _ => 0.0,
        }
    }

    /// `argmin_x g(x) + ‖x − v‖²/(2τ)`.
    pub fn prox(&self, tau: f64, v: &DVector<f64>) -> Result<DVector<f64>> {
        if !(tau > 0.0) {
            return Err(invalid("tau", "prox step must be positive"));
        }
        self.validate()?;
        Ok(match self {
            ProxFunction::Zero => v.clone(),
            ProxFunction::ScaledQuadratic { gamma, center } => {
                let a = Self::center(center, v.len())?;
                (v + a * (tau * gamma)) / (1.0 + tau * gamma)
            }
            ProxFunction::SoftThreshold { weight } => {
                v.map(|t| t.signum() * (t.abs() - tau * weight).max(0.0))
            }
            ProxFunction::BoxIndicator { lo, hi } => v.map(|t| t.clamp(*lo, *hi)),
            ProxFunction::QuadraticOnBox { gamma, center, lo, hi } => {
                let a = Self::center(center, v.len())?;
                ((v + a * (tau * gamma)) / (1.0 + tau * gamma)).map(|t| t.clamp(*lo, *hi))
            }
        })
    }

    /// `g(x)`, `+∞` outside the domain.
    pub fn value(&self, x: &DVector<f64>) -> Result<f64> {
        let in_box = |lo: f64, hi: f64| x.iter().all(|t| lo <= *t && *t <= hi);
        Ok(match self {
            ProxFunction::Zero => 0.0,
            ProxFunction::ScaledQuadratic { gamma, center } => {
                0.5 * gamma * (x - Self::center(center, x.len())?).norm_squared()
            }
            ProxFunction::SoftThreshold { weight } => weight * x.lp_norm(1),
            ProxFunction::BoxIndicator { lo, hi } => {
                if in_box(*lo, *hi) {
                    0.0
                } else {
                    f64::INFINITY
                }
            }
            ProxFunction::QuadraticOnBox { gamma, center, lo, hi } => {
                if in_box(*lo, *hi) {
                    0.5 * gamma * (x - Self::center(center, x.len())?).norm_squared()
                } else {
                    f64::INFINITY
                }
            }
        })
    }

    /// Fenchel conjugate `g*(v)`.
    pub fn conjugate_value(&self, v: &DVector<f64>) -> Result<f64> {
        let zero_only = |v: &DVector<f64>| if v.iter().all(|t| *t == 0.0) { 0.0 } else { f64::INFINITY };
        Ok(match self {
            ProxFunction::Zero => zero_only(v),
            ProxFunction::ScaledQuadratic { gamma, center } => {
                let a = Self::center(center, v.len())?;
                if *gamma == 0.0 {
                    zero_only(v)
                } else {
                    v.dot(&a) + v.norm_squared() / (2.0 * gamma)
                }
            }
            ProxFunction::SoftThreshold { weight } => {
                if v.amax() <= *weight {
                    0.0
                } else {
                    f64::INFINITY
                }
            }
            ProxFunction::BoxIndicator { lo, hi } => v.iter().map(|t| if *t >= 0.0 { t * hi } else { t * lo }).sum(),
            ProxFunction::QuadraticOnBox { gamma, center, lo, hi } => {
                let a = Self::center(center, v.len())?;
                v.iter()
                    .zip(a.iter())
                    .map(|(t, c)| {
                        let y = if *gamma > 0.0 {
                            (c + t / gamma).clamp(*lo, *hi)
                        } else if *t >= 0.0 {
                            *hi
                        } else {
                            *lo
                        };
                        t * y - 0.5 * gamma * (y - c).powi(2)
                    })
                    .sum()
            }
        })
    }

    /// Euclidean distance from `xi` to `∂g(x)`.
    pub fn subgradient_distance(&self, x: &DVector<f64>, xi: &DVector<f64>) -> Result<f64> {
        check_dim("subgradient", x.len(), xi.len())?;
        // Distance from t to the normal cone of [lo, hi] at s.
        let normal = |s: f64, t: f64, lo: f64, hi: f64| -> f64 {
            if s < lo || s > hi {
                f64::INFINITY
            } else if lo == hi {
                0.0
            } else if s == lo {
                t.max(0.0)
            } else if s == hi {
                (-t).max(0.0)
            } else {
                t.abs()
            }
        };
        let comps: Vec<f64> = match self {
            ProxFunction::Zero => xi.iter().map(|t| t.abs()).collect(),
            ProxFunction::ScaledQuadratic { gamma, center } => {
                let a = Self::center(center, x.len())?;
                (xi - (x - a) * *gamma).iter().map(|t| t.abs()).collect()
            }
            ProxFunction::SoftThreshold { weight } => x
                .iter()
                .zip(xi.iter())
                .map(|(s, t)| {
                    if *s == 0.0 {
                        (t.abs() - weight).max(0.0)
                    } else {
                        (t - weight * s.signum()).abs()
                    }
                })
                .collect(),
            ProxFunction::BoxIndicator { lo, hi } => {
                x.iter().zip(xi.iter()).map(|(s, t)| normal(*s, *t, *lo, *hi)).collect()
            }
            ProxFunction::QuadraticOnBox { gamma, center, lo, hi } => {
                let a = Self::center(center, x.len())?;
                x.iter()
                    .zip(xi.iter())
                    .zip(a.iter())
                    .map(|((s, t), c)| normal(*s, t - gamma * (s - c), *lo, *hi))
                    .collect()
            }
        };
        Ok(comps.iter().map(|c| c * c).sum::<f64>().sqrt())
    }

    /// Euclidean diameter of the domain in `dim` dimensions.
    pub fn domain_diameter(&self, dim: usize) -> f64 {
        match self {
            ProxFunction::BoxIndicator { lo, hi } | ProxFunction::QuadraticOnBox { lo, hi, .. } => {
                (hi - lo) * (dim as f64).sqrt()
            }
            _ => f64::INFINITY,
        }
    }
}

/// Result of one forward-backward step.
#[derive(Clone, Debug, PartialEq)]
pub struct FbStep {
    pub x_next: DVector<f64>,
    /// `q̃^{k+1} = −(x^{k+1} − x^k)/τ`.
    pub q_tilde: DVector<f64>,
    /// `q̃^{k+1} − ∇̃F(x^k) ∈ ∂G(x^{k+1})`.
    pub subgradient: DVector<f64>,
}

pub fn fb_outer_step(x: &DVector<f64>, grad_estimate: &DVector<f64>, tau: f64, g: &ProxFunction) -> Result<FbStep> {
    check_dim("gradient estimate", x.len(), grad_estimate.len())?;
    let x_next = g.prox(tau, &(x - grad_estimate * tau))?;
    let q_tilde = -(&x_next - x) / tau;
    let subgradient = &q_tilde - grad_estimate;
    Ok(FbStep {
        x_next,
        q_tilde,
        subgradient,
    })
}

/// Result of one primal-dual step, with the subgradients certified by the
/// two prox optimality conditions.
#[derive(Clone, Debug, PartialEq)]
pub struct PdpsStep {
    pub z_next: DVector<f64>,
    pub y_next: DVector<f64>,
    /// Element of `∂g(z^{k+1})`.
    pub dg: DVector<f64>,
    /// Element of `∂h*(y^{k+1})`.
    pub dh: DVector<f64>,
}

/// Primal-dual step with primal adjoint operator `k_adj` (normally `Kᵀ`).
#[allow(clippy::too_many_arguments)]
fn pdps_step_with(
    z: &DVector<f64>,
    y: &DVector<f64>,
    grad_f: &DVector<f64>,
    tau: f64,
    sigma: f64,
    k: &DMatrix<f64>,
    k_adj: &DMatrix<f64>,
    g: &ProxFunction,
    h_star: &ProxFunction,
) -> Result<PdpsStep> {
    check_dim("primal iterate", k.ncols(), z.len())?;
    check_dim("dual iterate", k.nrows(), y.len())?;
    check_dim("primal gradient", z.len(), grad_f.len())?;
    if !(sigma > 0.0) {
        return Err(invalid("sigma", "dual step must be positive"));
    }
    let v = z - (grad_f + k_adj * y) * tau;
    let z_next = g.prox(tau, &v)?;
    let w = y + k * (&z_next * 2.0 - z) * sigma;
    let y_next = h_star.prox(sigma, &w)?;
    let dg = (v - &z_next) / tau;
    let dh = (w - &y_next) / sigma;
    Ok(PdpsStep { z_next, y_next, dg, dh })
}

/// `z⁺ = prox_{τg}(z − τ∇̃f − τKᵀy)`, `y⁺ = prox_{σh*}(y + σK(2z⁺ − z))`.
#[allow(clippy::too_many_arguments)]
pub fn pdps_outer_step(
    z: &DVector<f64>,
    y: &DVector<f64>,
    grad_f: &DVector<f64>,
    tau: f64,
    sigma: f64,
    k: &DMatrix<f64>,
    g: &ProxFunction,
    h_star: &ProxFunction,
) -> Result<PdpsStep> {
    pdps_step_with(z, y, grad_f, tau, sigma, k, &k.transpose(), g, h_star)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MismatchStep {
    pub step: PdpsStep,
    /// `(1/2γ_g)‖(K*≈ − K*)y^k‖²`.
    pub err_mono: f64,
    /// `(K*≈ − K*)y^k`, the perturbation of the primal gradient.
    pub perturbation: DVector<f64>,
}

/// Primal-dual step with `k_adj ≈ Kᵀ` in the primal update.
#[allow(clippy::too_many_arguments)]
pub fn mismatched_pdps_step(
    z: &DVector<f64>,
    y: &DVector<f64>,
    tau: f64,
    sigma: f64,
    k: &DMatrix<f64>,
    k_adj: &DMatrix<f64>,
    g: &ProxFunction,
    h_star: &ProxFunction,
) -> Result<MismatchStep> {
    let gamma_g = g.strong_convexity();
    if !(gamma_g > 0.0) {
        return Err(invalid("g", "adjoint mismatch needs a strongly convex g"));
    }
    check_dim("mismatched adjoint rows", k.ncols(), k_adj.nrows())?;
    check_dim("mismatched adjoint columns", k.nrows(), k_adj.ncols())?;
    let perturbation = (k_adj - k.transpose()) * y;
    let step = pdps_step_with(z, y, &DVector::zeros(z.len()), tau, sigma, k, k_adj, g, h_star)?;
    Ok(MismatchStep {
        step,
        err_mono: perturbation.norm_squared() / (2.0 * gamma_g),
        perturbation,
    })
}

/// Uniform bound `ε = (1/2γ_g)(‖K*≈ − K*‖·diam Dom h*)²` on the mismatch errors.
pub fn mismatch_epsilon(k: &DMatrix<f64>, k_adj: &DMatrix<f64>, gamma_g: f64, h_star: &ProxFunction) -> Result<f64> {
    if !(gamma_g > 0.0) {
        return Err(invalid("gamma_g", "must be positive"));
    }
    let diam = h_star.domain_diameter(k.nrows());
    if !diam.is_finite() {
        return Err(Error::Unsupported("the mismatch bound needs a bounded dual domain".into()));
    }
    let d = spectral_norm(&(k_adj - k.transpose()));
    Ok((d * diam).powi(2) / (2.0 * gamma_g))
}

/// Convergence regime certified by the step-length conditions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Regime {
    None,
    /// Subdifferentials converge and values are quasi-monotone.
    Subdifferential,
    /// Iterates stay near `x̄` and converge (`p = 1`).
    NonEscape,
    /// Linear convergence at rate `O(p^{−N})`, `p > 1`.
    Linear,
}

/// Outcome of a step-length condition check.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Certificate {
    pub regime: Regime,
    pub p: f64,
    pub theta: f64,
    pub gamma_tilde: f64,
    /// `γ` of the local conditions.
    pub gamma: f64,
    /// Left side and bound of the weak condition.
    pub weak_lhs: f64,
    pub weak_rhs: f64,
    /// Left side and bound of the local `Λ̆` condition.
    pub local_lhs: f64,
    pub local_rhs: f64,
    /// `Λ̆ = λ̆·Id` on the step variable in the descent inequality.
    pub lambda_breve: f64,
    /// `η` available to the quasi-monotonicity of values.
    pub eta_descent: f64,
}

/// `θ²/γ̃`, taken as zero in the exact case `θ = 0`.
fn theta_ratio(theta: f64, gamma_tilde: f64) -> f64 {
    if theta == 0.0 {
        0.0
    } else {
        theta * theta / gamma_tilde
    }
}

/// Scalar parameters of the outer forward-backward conditions with
/// `M = Id/τ` and `Λ = L·Id`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FbParams {
    pub tau: f64,
    pub l: f64,
    pub theta: f64,
    pub gamma_tilde: f64,
    pub beta: f64,
    pub gamma_g: f64,
    pub gamma_f: f64,
    pub eta: f64,
    pub p: f64,
}

/// Weak condition `γ̃ + τ(1+θ²/γ̃)L < 2`, local conditions
/// `τ[(1+θ²/γ̃)L + 2(|γ_F|/β − γ_F)] ≤ 1−η` and
/// `γ := τ[γ_G + γ_F − β|γ_F|] − γ̃ ≥ p − 1`.
pub fn condition_check_inexact_fb(c: &FbParams) -> Result<Certificate> {
    if !(c.tau > 0.0) || !(c.l >= 0.0) || !(c.beta > 0.0) || !(c.eta >= 0.0) || !(c.p >= 1.0) {
        return Err(invalid("fb parameters", "need τ, β > 0, L, η ≥ 0 and p ≥ 1"));
    }
    if c.theta > 0.0 && !(c.gamma_tilde > 0.0) {
        return Err(invalid("gamma_tilde", "must be positive when θ > 0"));
    }
    let r = theta_ratio(c.theta, c.gamma_tilde);
    let lambda_breve = (1.0 + r) * c.l + c.gamma_tilde / c.tau;
    let weak_lhs = c.tau * lambda_breve;
    let local_lhs = c.tau * ((1.0 + r) * c.l + 2.0 * (c.gamma_f.abs() / c.beta - c.gamma_f));
    let local_rhs = 1.0 - c.eta;
    let gamma = c.tau * (c.gamma_g + c.gamma_f - c.beta * c.gamma_f.abs()) - c.gamma_tilde;
    let local = local_lhs >= 0.0 && local_lhs <= local_rhs && gamma >= c.p - 1.0;
    let regime = if local && c.p > 1.0 {
        Regime::Linear
    } else if local {
        Regime::NonEscape
    } else if weak_lhs < 2.0 {
        Regime::Subdifferential
    } else {
        Regime::None
    };
    Ok(Certificate {
        regime,
        p: c.p,
        theta: c.theta,
        gamma_tilde: c.gamma_tilde,
        gamma,
        weak_lhs,
        weak_rhs: 2.0,
        local_lhs,
        local_rhs,
        lambda_breve,
        eta_descent: 1.0 - weak_lhs / 2.0,
    })
}

/// Largest `p ∈ [1, κ)` for which the local FB conditions hold with
/// `θ = θ(p)`, found by bisection. `None` if even `p = 1` fails.
pub fn max_certified_p(base: &FbParams, constants: &TrackingConstants) -> Result<Option<f64>> {
    let check = |p: f64| -> Result<bool> {
        let th = theta(p, constants, THETA_TOL)?;
        let c = FbParams { theta: th, p, ..*base };
        Ok(matches!(condition_check_inexact_fb(&c)?.regime, Regime::NonEscape | Regime::Linear))
    };
    if !check(1.0)? {
        return Ok(None);
    }
    let (mut lo, mut hi) = (1.0, constants.kappa() * (1.0 - 1e-9));
    if check(hi)? {
        return Ok(Some(hi));
    }
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if check(mid)? {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(Some(lo))
}

/// Which sufficient condition of the inexact primal-dual theorem to test.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PdpsMode {
    Mono,
    Smoothness,
}

/// Scalar parameters of the primal-dual conditions with `M_z = M_y = Id`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PdpsParams {
    pub tau: f64,
    pub sigma: f64,
    pub lambda: f64,
    pub l: f64,
    pub theta: f64,
    pub gamma_tilde: f64,
    pub beta: f64,
    pub zeta: f64,
    pub gamma_g: f64,
    pub gamma_h_star: f64,
    pub gamma_f: f64,
    pub eta: f64,
    pub p: f64,
}

/// Mono: `γ̃_f = γ_f − ζL/2`, `γ := min{(γ_g+γ̃_f−β|γ̃_f|)τ, γ_{h*}σ}/2 − γ̃ ≥ (p−1)/2`,
/// `λ̆ := L/ζ + 2(|γ̃_f|/β − γ̃_f) + 2θ²L/γ̃ ≤ (1−η)λ`.
/// Smoothness: `γ := min{(γ_g+γ_f−β|γ_f|)τ, γ_{h*}σ}/2 − γ̃ ≥ p − 1`,
/// `λ̆ := L + |γ_f|/β − γ_f + θ²L/γ̃ ≤ (1−η)λ`.
pub fn condition_check_pdps_inexact(c: &PdpsParams, mode: PdpsMode) -> Result<Certificate> {
    if !(c.tau > 0.0) || !(c.sigma > 0.0) || !(c.lambda >= 0.0) || !(c.beta > 0.0) || !(c.zeta > 0.0) {
        return Err(invalid("pdps parameters", "need τ, σ, β, ζ > 0 and λ ≥ 0"));
    }
    if !(c.p >= 1.0) || !(c.eta >= 0.0) {
        return Err(invalid("pdps parameters", "need p ≥ 1 and η ≥ 0"));
    }
    if c.theta > 0.0 && !(c.gamma_tilde > 0.0) {
        return Err(invalid("gamma_tilde", "must be positive when θ > 0"));
    }
    let r = theta_ratio(c.theta, c.gamma_tilde);
    let (gamma, lambda_breve, needed) = match mode {
        PdpsMode::Mono => {
            let gf = c.gamma_f - 0.5 * c.zeta * c.l;
            let gamma = ((c.gamma_g + gf - c.beta * gf.abs()) * c.tau).min(c.gamma_h_star * c.sigma) / 2.0
                - c.gamma_tilde;
            let lb = c.l / c.zeta + 2.0 * (gf.abs() / c.beta - gf) + 2.0 * r * c.l;
            (gamma, lb, (c.p - 1.0) / 2.0)
        }
        PdpsMode::Smoothness => {
            let gf = c.gamma_f;
            let gamma = ((c.gamma_g + gf - c.beta * gf.abs()) * c.tau).min(c.gamma_h_star * c.sigma) / 2.0
                - c.gamma_tilde;
            let lb = c.l + gf.abs() / c.beta - gf + r * c.l;
            (gamma, lb, c.p - 1.0)
        }
    };
    let local_rhs = (1.0 - c.eta) * c.lambda;
    let local = lambda_breve >= 0.0 && lambda_breve <= local_rhs + 1e-15 && gamma >= needed;
    let regime = match (local, c.p > 1.0) {
        (true, true) => Regime::Linear,
        (true, false) => Regime::NonEscape,
        _ => Regime::None,
    };
    Ok(Certificate {
        regime,
        p: c.p,
        theta: c.theta,
        gamma_tilde: c.gamma_tilde,
        gamma,
        weak_lhs: f64::NAN,
        weak_rhs: f64::NAN,
        local_lhs: lambda_breve,
        local_rhs,
        lambda_breve,
        eta_descent: f64::NAN,
    })
}

/// Initial-point condition `x⁰ ∈ 𝕆_M(x̄, √(λ²δ_z² − 2r_p))`, `λ²δ_z² > 2r_p`.
/// Returns `(‖x⁰ − x̄‖_M, radius, holds)`.
pub fn pdps_init_ball_check(
    metric: &SymOperator,
    x0: &DVector<f64>,
    x_bar: &DVector<f64>,
    lambda: f64,
    delta_z: f64,
    r_p: f64,
) -> Result<(f64, f64, bool)> {
    let d = metric.seminorm(&(x0 - x_bar))?;
    let slack = (lambda * delta_z).powi(2) - 2.0 * r_p;
    let radius = if slack > 0.0 { slack.sqrt() } else { 0.0 };
    Ok((d, radius, slack > 0.0 && d < radius))
}

/// Certificate of the adjoint-mismatch theorem: `τσ‖K‖² ≤ 1`, `f = 0`,
/// `γ = min{γ_gτ/4, γ_{h*}σ/2}` and `p ∈ (1, 1+2γ]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MismatchCertificate {
    pub gamma: f64,
    pub p: f64,
    pub p_max: f64,
    pub epsilon: f64,
    /// `ε/(p−1)`, bounding every `Σ_{k<N} p^{k−N} errMono^k`.
    pub r_p_bound: f64,
    pub holds: bool,
}

pub fn mismatch_certificate(
    tau: f64,
    sigma: f64,
    k: &DMatrix<f64>,
    k_adj: &DMatrix<f64>,
    g: &ProxFunction,
    h_star: &ProxFunction,
    p: f64,
) -> Result<MismatchCertificate> {
    let nk = spectral_norm(k);
    let steps_ok = tau > 0.0 && sigma > 0.0 && tau * sigma * nk * nk <= 1.0 + 1e-12;
    let gamma_g = g.strong_convexity();
    let gamma = (gamma_g * tau / 4.0).min(h_star.strong_convexity() * sigma / 2.0);
    let epsilon = mismatch_epsilon(k, k_adj, gamma_g, h_star)?;
    let p_max = 1.0 + 2.0 * gamma;
    Ok(MismatchCertificate {
        gamma,
        p,
        p_max,
        epsilon,
        r_p_bound: if p > 1.0 { epsilon / (p - 1.0) } else { f64::INFINITY },
        holds: steps_ok && p > 1.0 && p <= p_max,
    })
}

/// Outer algorithm and its nonsmooth parts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OuterMethod {
    /// `x⁺ = prox_{τG}(x − τ∇̃F(x))`.
    ForwardBackward { tau: f64, g: ProxFunction },
    /// Primal-dual splitting for `f(z) + g(z) + h(Kz)` with `x = (z, y)`.
    /// `f` is the bilevel objective when an instance is given, zero otherwise.
    /// `coupling_adjoint`, if given, replaces `Kᵀ` in the primal step.
    PrimalDual {
        tau: f64,
        sigma: f64,
        /// Row-major `K`.
        coupling: Vec<Vec<f64>>,
        g: ProxFunction,
        h_star: ProxFunction,
        #[serde(default)]
        coupling_adjoint: Option<Vec<Vec<f64>>>,
    },
}

fn matrix_from_rows(name: &'static str, rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let r = rows.len();
    let c = rows.first().map_or(0, Vec::len);
    if r == 0 || c == 0 || rows.iter().any(|row| row.len() != c) {
        return Err(invalid(name, "must be a non-empty rectangular matrix"));
    }
    Ok(DMatrix::from_row_iterator(r, c, rows.iter().flatten().copied()))
}

impl OuterMethod {
    pub fn name(&self) -> &'static str {
        match self {
            OuterMethod::ForwardBackward { .. } => "fb",
            OuterMethod::PrimalDual {
                coupling_adjoint: None, ..
            } => "pdps",
            OuterMethod::PrimalDual { .. } => "pdps-mismatch",
        }
    }
}

/// Initial inner and adjoint iterates.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WarmStart {
    #[default]
    Zero,
    /// One exact solve at `x⁰`.
    Presolve,
}

/// Which gradient oracle drives the outer method.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Driver {
    #[default]
    SingleLoop,
    ExactBaseline,
}

fn default_steps() -> usize {
    1
}
fn default_tolerance() -> f64 {
    1e-8
}
fn default_one() -> f64 {
    1.0
}
fn default_beta() -> f64 {
    0.5
}

/// Full description of an experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub label: String,
    /// Bilevel objective `F`; absent means `F = 0`.
    #[serde(default)]
    pub instance: Option<InstanceSpec>,
    #[serde(default)]
    pub inner: Option<InnerMethod>,
    #[serde(default)]
    pub adjoint: Option<AdjointMethod>,
    pub outer: OuterMethod,
    #[serde(default)]
    pub driver: Driver,
    /// Inner and adjoint steps per outer iteration.
    #[serde(default = "default_steps")]
    pub steps_per_outer: usize,
    pub budget: usize,
    #[serde(default = "default_tolerance")]
    pub tolerance: f64,
    /// `x⁰`, stacked `(z⁰, y⁰)` for primal-dual methods.
    pub x0: Vec<f64>,
    /// Reference point `x̄`; defaults to the instance minimizer for unconstrained FB.
    #[serde(default)]
    pub x_bar: Option<Vec<f64>>,
    #[serde(default)]
    pub warm_start: WarmStart,
    #[serde(default)]
    pub constants_mode: ConstantsMode,
    #[serde(default)]
    pub tube_radius: Option<f64>,
    #[serde(default = "default_one")]
    pub p: f64,
    /// `γ̃`; defaults to `θ√(τL)`.
    #[serde(default)]
    pub gamma_tilde: Option<f64>,
    #[serde(default = "default_beta")]
    pub beta: f64,
    #[serde(default = "default_one")]
    pub zeta: f64,
    #[serde(default)]
    pub eta: f64,
    /// Primal-dual `λ`; defaults to `1/τ − σ‖K‖²`.
    #[serde(default)]
    pub lambda: Option<f64>,
    /// Reject configurations for which no convergence regime is certified.
    #[serde(default)]
    pub require_certificate: bool,
    #[serde(default)]
    pub elip_variant: ElipVariant,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub execution: Execution,
}

impl RunConfig {
    /// Stable hash of the configuration.
    pub fn hash(&self) -> u64 {
        let mut h = DefaultHasher::new();
        format!("{self:?}").hash(&mut h);
        h.finish()
    }
}

/// Trace plus the run-level quantities the checks need.
#[derive(Clone, Debug)]
pub struct RunOutput {
    pub trace: IterateTrace,
    pub certificate: Certificate,
    pub mismatch: Option<MismatchCertificate>,
    pub euclidean_constants: Option<EuclideanConstants>,
    /// Error-sum lemma bound for `Σ_k p^k e_{p,k}` at `x = x^{k+1}`.
    pub error_sum_bound: Option<f64>,
    /// `λ` of the primal-dual step condition.
    pub lambda: Option<f64>,
    /// Update metric `Λ` on the step variable.
    pub update_metric: SymOperator,
    /// Step metric `d_X` on the step variable.
    pub step_metric: SymOperator,
    pub gamma_f: f64,
    pub l: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Oracle {
    Tracking,
    Exact,
}

pub fn run_single_loop(config: &RunConfig) -> Result<RunOutput> {
    run(config, Oracle::Tracking)
}

/// Double-loop comparator: exact `S_u` and adjoint solves every outer step.
pub fn run_exact_baseline(config: &RunConfig) -> Result<RunOutput> {
    run(config, Oracle::Exact)
}

/// Runs `config` with the oracle its `driver` names.
pub fn run_configured(config: &RunConfig) -> Result<RunOutput> {
    match config.driver {
        Driver::SingleLoop => run_single_loop(config),
        Driver::ExactBaseline => run_exact_baseline(config),
    }
}

struct Layout {
    /// Dimension of the step variable `z` (all of `x` for FB).
    n: usize,
    k: Option<DMatrix<f64>>,
    k_adj: Option<DMatrix<f64>>,
    tau: f64,
    sigma: f64,
}

impl Layout {
    fn split(&self, x: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        (x.rows(0, self.n).into_owned(), x.rows(self.n, x.len() - self.n).into_owned())
    }

    fn pad(&self, v: &DVector<f64>, total: usize) -> DVector<f64> {
        let mut out = DVector::zeros(total);
        out.rows_mut(0, self.n).copy_from(v);
        out
    }
}

struct Problem<'a> {
    config: &'a RunConfig,
    instance: Option<BilevelInstance>,
    layout: Layout,
}

impl Problem<'_> {
    fn f_value(&self, z: &DVector<f64>) -> Result<f64> {
        self.instance.as_ref().map_or(Ok(0.0), |i| i.objective(z))
    }

    fn f_grad(&self, z: &DVector<f64>) -> Result<DVector<f64>> {
        self.instance
            .as_ref()
            .map_or_else(|| Ok(DVector::zeros(z.len())), |i| i.exact_gradient(z))
    }

    /// `[F + G](x)`.
    fn value(&self, x: &DVector<f64>) -> Result<f64> {
        let (z, y) = self.layout.split(x);
        let mut v = self.f_value(&z)?;
        match &self.config.outer {
            OuterMethod::ForwardBackward { g, .. } => v += g.value(&z)?,
            OuterMethod::PrimalDual { g, h_star, .. } => v += g.value(&z)? + h_star.value(&y)?,
        }
        Ok(v)
    }
}

fn ensure_finite(what: &'static str, v: &DVector<f64>) -> Result<()> {
    if v.iter().all(|t| t.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what))
    }
}

#[allow(clippy::too_many_lines)]
fn run(config: &RunConfig, oracle: Oracle) -> Result<RunOutput> {
    let instance = config.instance.as_ref().map(InstanceSpec::build).transpose()?;
    if !(config.tolerance >= 0.0) {
        return Err(invalid("tolerance", "must be nonnegative"));
    }
    let x0 = DVector::from_column_slice(&config.x0);
    let layout = match &config.outer {
        OuterMethod::ForwardBackward { tau, g } => {
            g.validate()?;
            if !(*tau > 0.0) {
                return Err(Error::StepLength(format!("outer τ must be positive, got {tau}")));
            }
            Layout {
                n: x0.len(),
                k: None,
                k_adj: None,
                tau: *tau,
                sigma: f64::NAN,
            }
        }
        OuterMethod::PrimalDual {
            tau,
            sigma,
            coupling,
            g,
            h_star,
            coupling_adjoint,
        } => {
            g.validate()?;
            h_star.validate()?;
            let k = matrix_from_rows("coupling", coupling)?;
            check_dim("x0 (stacked primal and dual)", k.ncols() + k.nrows(), x0.len())?;
            let k_adj = coupling_adjoint
                .as_ref()
                .map(|rows| matrix_from_rows("coupling_adjoint", rows))
                .transpose()?;
            if k_adj.is_some() && instance.is_some() {
                return Err(Error::Unsupported("adjoint mismatch is only analysed for f = 0".into()));
            }
            Layout {
                n: k.ncols(),
                k: Some(k),
                k_adj,
                tau: *tau,
                sigma: *sigma,
            }
        }
    };
    if x0.is_empty() {
        return Err(Error::Empty("x0"));
    }
    let n = layout.n;
    let total = x0.len();
    let (z0, _) = layout.split(&x0);
    let m_steps = config.steps_per_outer;
    if let Some(inst) = &instance {
        check_dim("x0 against the instance", inst.dim_x(), n)?;
        if !inst.region.contains(&z0) {
            return Err(Error::OutsideRegion);
        }
        if m_steps == 0 {
            return Err(invalid("steps_per_outer", "must be at least 1"));
        }
    }
    let problem = Problem {
        config,
        instance,
        layout,
    };
    let inst = problem.instance.as_ref();
    let (inner, adjoint) = match inst {
        Some(i) => {
            let inner = config
                .inner
                .ok_or_else(|| invalid("inner", "required when an instance is given"))?;
            let adjoint = config
                .adjoint
                .ok_or_else(|| invalid("adjoint", "required when an instance is given"))?;
            inner.validate(i)?;
            (Some(inner), Some(adjoint))
        }
        None => (None, None),
    };
    let lay = &problem.layout;

    // Metrics on the full variable and on the step variable.
    let (metric, step_metric, skew) = match &lay.k {
        None => (
            SymOperator::scaled_identity(n, 1.0 / lay.tau),
            SymOperator::scaled_identity(n, 1.0 / lay.tau),
            SkewOperator::zeros(n),
        ),
        Some(k) => {
            let mz = SymOperator::identity(n);
            let my = SymOperator::identity(k.nrows());
            (
                pdps_preconditioner(lay.tau, lay.sigma, &mz, &my, k)?,
                mz,
                BlockShape::new(k.clone()).skew(),
            )
        }
    };

    // Curvature of F.
    let (l, gamma_f) = match inst {
        Some(i) => {
            let s = i.estimate_sensitivities(config.seed, config.execution)?;
            (s.curvature_upper, s.curvature_lower)
        }
        None => (0.0, 0.0),
    };
    let update_metric = SymOperator::scaled_identity(n, l.max(f64::MIN_POSITIVE));

    // Hard step-length checks.
    let lambda = match (&config.outer, &lay.k) {
        (OuterMethod::ForwardBackward { .. }, _) => {
            if lay.tau * l >= 2.0 {
                return Err(Error::StepLength(format!(
                    "outer forward-backward needs τL < 2, got τ={}, L={l}",
                    lay.tau
                )));
            }
            None
        }
        (OuterMethod::PrimalDual { .. }, Some(k)) => {
            let nk = spectral_norm(k);
            let lam = config.lambda.unwrap_or(1.0 / lay.tau - lay.sigma * nk * nk);
            let id_n = SymOperator::identity(n);
            let id_m = SymOperator::identity(k.nrows());
            if !(lay.sigma > 0.0)
                || !(lam >= 0.0)
                || !pdps_step_check(lay.tau, lay.sigma, lam, &id_n, &id_m, k, &DMatrix::identity(k.nrows(), k.nrows()), 1e-12)?
            {
                return Err(Error::StepLength(format!(
                    "primal-dual needs τλ + τσ‖K‖² ≤ 1 with λ ≥ 0, got τ={}, σ={}, λ={lam}, ‖K‖={nk}",
                    lay.tau, lay.sigma
                )));
            }
            if inst.is_some() && !(lam > 0.0) {
                return Err(Error::StepLength("inexact primal-dual needs λ > 0".into()));
            }
            Some(lam)
        }
        _ => unreachable!("layout matches the method"),
    };

    let mut counters = Counters::default();
    let exec = config.execution;

    // Warm start.
    let (mut u, mut adj) = match (inst, adjoint) {
        (Some(i), Some(a)) => match config.warm_start {
            WarmStart::Zero => (
                DVector::zeros(i.dim_u()),
                AdjointState::zeros(a.variant, i.dim_u(), n),
            ),
            WarmStart::Presolve => {
                counters.direct_solves += 2;
                (i.solve_inner_exact(&z0)?, AdjointState::exact(a.variant, i, &z0)?)
            }
        },
        _ => (DVector::zeros(0), AdjointState::Reduced(DVector::zeros(0))),
    };

    // Tracking constants and ledger.
    let mut euclid = None;
    let mut ledger = None;
    if let (Some(i), Some(inn), Some(a), Oracle::Tracking) = (inst, inner, adjoint, oracle) {
        let r = config
            .tube_radius
            .unwrap_or_else(|| default_tube_radius((&u - i.solve_inner_exact(&z0).unwrap_or_else(|_| u.clone())).norm()));
        let ec = assemble_constants(i, &inn, &a, m_steps, config.constants_mode, r, config.seed, exec)?;
        let tc = ec.in_metrics(&step_metric, &update_metric)?;
        if !(config.p < tc.kappa()) {
            return Err(invalid("p", format!("must lie in [1, κ) with κ = {}", tc.kappa())));
        }
        ledger = Some(ErrorLedger::new(
            tc,
            config.p,
            update_metric.clone(),
            step_metric.clone(),
            config.elip_variant,
        )?);
        euclid = Some(ec);
    }
    let th = ledger.as_ref().map_or(0.0, |lg| lg.theta);
    let gamma_tilde = config.gamma_tilde.unwrap_or(if th > 0.0 {
        th * (lay.tau * l).sqrt()
    } else {
        0.0
    });

    // Certificates.
    let mut mismatch = None;
    let certificate = match &config.outer {
        OuterMethod::ForwardBackward { g, .. } => condition_check_inexact_fb(&FbParams {
            tau: lay.tau,
            l,
            theta: th,
            gamma_tilde,
            beta: config.beta,
            gamma_g: g.strong_convexity(),
            gamma_f,
            eta: config.eta,
            p: config.p,
        })?,
        OuterMethod::PrimalDual { g, h_star, .. } => {
            let params = PdpsParams {
                tau: lay.tau,
                sigma: lay.sigma,
                lambda: lambda.unwrap_or(0.0),
                l,
                theta: th,
                gamma_tilde,
                beta: config.beta,
                zeta: config.zeta,
                gamma_g: g.strong_convexity(),
                gamma_h_star: h_star.strong_convexity(),
                gamma_f,
                eta: config.eta,
                p: config.p,
            };
            if let (Some(k), Some(k_adj)) = (&lay.k, &lay.k_adj) {
                let mc = mismatch_certificate(lay.tau, lay.sigma, k, k_adj, g, h_star, config.p)?;
                mismatch = Some(mc);
                let mut c = condition_check_pdps_inexact(&params, PdpsMode::Mono)?;
                c.gamma = mc.gamma;
                c.regime = if mc.holds { Regime::Linear } else { Regime::None };
                c
            } else {
                let mono = condition_check_pdps_inexact(&params, PdpsMode::Mono)?;
                let smooth = condition_check_pdps_inexact(&params, PdpsMode::Smoothness)?;
                if mono.regime != Regime::None {
                    mono
                } else {
                    smooth
                }
            }
        }
    };
    if config.require_certificate && certificate.regime == Regime::None {
        return Err(Error::StepLength(format!(
            "no convergence regime certified (γ = {:.3e}, local {:.3e} vs {:.3e}, weak {:.3e})",
            certificate.gamma, certificate.local_lhs, certificate.local_rhs, certificate.weak_lhs
        )));
    }
    let err_scale = match (th > 0.0, lambda) {
        (false, _) => 0.0,
        (true, None) => 1.0 / (2.0 * gamma_tilde),
        (true, Some(lam)) => 1.0 / (2.0 * lam * gamma_tilde),
    };

    let x_bar = match (&config.x_bar, &config.outer) {
        (Some(v), _) => {
            check_dim("x_bar", total, v.len())?;
            Some(DVector::from_column_slice(v))
        }
        (None, OuterMethod::ForwardBackward { g: ProxFunction::Zero, .. }) => inst.and_then(|i| i.known_minimizer.clone()),
        _ => None,
    };

    let adjoint_shape = match (inst, adjoint) {
        (Some(i), Some(a)) => AdjointState::zeros(a.variant, i.dim_u(), n).shape(),
        _ => (0, 0),
    };
    let method = match (inner, adjoint) {
        (Some(i), Some(a)) => format!(
            "{}+{}+{}{}",
            i.name(),
            a.name(),
            config.outer.name(),
            if oracle == Oracle::Exact { " (exact)" } else { "" }
        ),
        _ => config.outer.name().to_string(),
    };
    let mut trace = IterateTrace {
        label: config.label.clone(),
        method,
        status: RunStatus::Budget,
        config_hash: config.hash(),
        x0: x0.clone(),
        x_bar: x_bar.clone(),
        metric: metric.matrix().clone(),
        adjoint_shape,
        constants: ledger.as_ref().map(|lg| lg.constants),
        counters,
        rows: Vec::with_capacity(config.budget),
    };

    let mut x = x0;
    let mut value_x = problem.value(&x)?;
    let mut grad_exact_x = problem.f_grad(&z0)?;
    for k in 0..config.budget {
        let (z, y) = lay.split(&x);
        // Steps (1)-(3): inner, adjoint, differential transform.
        let (u_next, adj_next, grad_f) = match (inst, inner, adjoint) {
            (Some(i), Some(inn), Some(a)) => {
                let (u_next, adj_next) = match oracle {
                    Oracle::Tracking => {
                        let u_next = inner_steps(&inn, i, &u, &z, m_steps)?;
                        let adj_next = adjoint_steps(&a, i, &adj, &u_next, &z, m_steps)?;
                        counters.inner_steps += m_steps;
                        counters.adjoint_steps += m_steps;
                        counters.flops +=
                            m_steps as u64 * (inn.step_flops(i.dim_u()) + a.step_flops(i.dim_u(), n));
                        (u_next, adj_next)
                    }
                    Oracle::Exact => {
                        let u_next = i.solve_inner_exact(&z)?;
                        let adj_next = match a.variant {
                            crate::adjoint::AdjointVariant::Reduced => {
                                AdjointState::Reduced(i.reduced_adjoint_at(&u_next, &z)?)
                            }
                            crate::adjoint::AdjointVariant::Basic => {
                                AdjointState::Basic(i.basic_adjoint_at(&u_next, &z)?)
                            }
                        };
                        counters.direct_solves += 2;
                        let du = i.dim_u() as u64;
                        let cols = adj_next.shape().1 as u64;
                        counters.flops += 2 * du * du * du / 3 * 2 + 2 * du * du * cols;
                        (u_next, adj_next)
                    }
                };
                let grad = differential_transform(&adj_next, &u_next, &z, i)?;
                counters.flops += 2 * (i.dim_u() * n) as u64;
                (u_next, adj_next, grad)
            }
            _ => (u.clone(), adj.clone(), DVector::zeros(n)),
        };
        ensure_finite("gradient estimate", &grad_f)?;

        // Step (4): outer update.
        let mut err_mono_direct = None;
        let (x_next, grad_full) = match &config.outer {
            OuterMethod::ForwardBackward { tau, g } => {
                let s = fb_outer_step(&x, &grad_f, *tau, g)?;
                (s.x_next, grad_f.clone())
            }
            OuterMethod::PrimalDual { g, h_star, .. } => {
                let kk = lay.k.as_ref().expect("primal-dual layout");
                let (s, grad_z) = match &lay.k_adj {
                    None => (
                        pdps_outer_step(&z, &y, &grad_f, lay.tau, lay.sigma, kk, g, h_star)?,
                        grad_f.clone(),
                    ),
                    Some(ka) => {
                        let ms = mismatched_pdps_step(&z, &y, lay.tau, lay.sigma, kk, ka, g, h_star)?;
                        err_mono_direct = Some(ms.err_mono);
                        (ms.step, ms.perturbation)
                    }
                };
                let mut xn = DVector::zeros(total);
                xn.rows_mut(0, n).copy_from(&s.z_next);
                xn.rows_mut(n, total - n).copy_from(&s.y_next);
                (xn, lay.pad(&grad_z, total))
            }
        };
        counters.flops += 4 * (total * total) as u64;
        counters.outer_steps += 1;
        ensure_finite("outer iterate", &x_next)?;
        let (z_next, _) = lay.split(&x_next);
        if let Some(i) = inst {
            if !i.region.contains(&z_next) {
                trace.status = RunStatus::LeftRegion;
                break;
            }
        }

        // Step (5): ledger and diagnostics row.
        let q_tilde = -metric.apply(&(&x_next - &x))?;
        let subgradient = &q_tilde - &grad_full - skew.apply(&x_next)?;
        let grad_exact_next = problem.f_grad(&z_next)?;
        let (u_exact, adjoint_exact) = match (inst, adjoint) {
            (Some(i), Some(a)) => (i.solve_inner_exact(&z)?, AdjointState::exact(a.variant, i, &z)?),
            _ => (u_next.clone(), adj_next.clone()),
        };
        let grad_f_full = lay.pad(&grad_f, total);
        let grad_error = step_metric.dual_seminorm(&(&grad_f - &grad_exact_x))?;
        let (e_pk, e_lip) = match ledger.as_mut() {
            Some(lg) => {
                if k == 0 {
                    lg.set_initial_distances((&u_next - &u_exact).norm(), adj_next.distance(&adjoint_exact)?);
                }
                let e = lg.e_pk(k, &z_next, &z)?;
                let el = lg.e_lip(k)?;
                lg.push_step(&z_next, &z)?;
                (e, el)
            }
            None => (0.0, 0.0),
        };
        let (err_desc, err_mono) = match (&config.outer, err_mono_direct) {
            (_, Some(em)) => (f64::NAN, em),
            (OuterMethod::ForwardBackward { .. }, None) => (e_pk * err_scale, e_pk * err_scale),
            (OuterMethod::PrimalDual { .. }, None) => (f64::NAN, e_pk * err_scale),
        };
        let value_next = problem.value(&x_next)?;
        let gap = value_next - value_x - skew.apply(&x_next)?.dot(&x);
        let residual = (lay.pad(&grad_exact_next, total) + &q_tilde - &grad_full).norm();
        let row = TraceRow {
            k,
            x: x.clone(),
            x_next: x_next.clone(),
            u: u_next.clone(),
            adjoint: adj_next.flatten(),
            u_exact,
            adjoint_exact: adjoint_exact.flatten(),
            grad_estimate: grad_f_full,
            grad_exact: lay.pad(&grad_exact_x, total),
            grad_exact_next: lay.pad(&grad_exact_next, total),
            q_tilde,
            subgradient,
            grad_error,
            e_pk,
            e_lip,
            err_desc,
            err_mono,
            gap,
            step_norm_m: metric.seminorm(&(&x_next - &x))?,
            dist_to_xbar_m: x_bar
                .as_ref()
                .map_or(Ok(f64::NAN), |xb| metric.seminorm(&(&x_next - xb)))?,
            residual,
            lambda_sq: update_metric.seminorm_sq(&(&z_next - &z))?,
            value_next,
        };
        trace.rows.push(row);
        u = u_next;
        adj = adj_next;
        x = x_next;
        value_x = value_next;
        grad_exact_x = grad_exact_next;
        if residual < config.tolerance {
            trace.status = RunStatus::Converged;
            break;
        }
    }
    trace.counters = counters;
    let error_sum_bound = ledger.as_ref().map(ErrorLedger::error_sum_bound);
    Ok(RunOutput {
        trace,
        certificate,
        mismatch,
        euclidean_constants: euclid,
        error_sum_bound,
        lambda,
        update_metric,
        step_metric,
        gamma_f,
        l,
    })
}
