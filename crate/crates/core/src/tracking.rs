//! Error calculus for tracked inner and adjoint iterates: the series `ι_k`,
//! `ψ_j`, `θ`, the ledgers `e_{p,k}` and `e_lip^k`, the generic recursion
//! bound, and the gradient-error inequalities as signed slacks.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::operators::SymOperator;

/// Tail tolerance for the `θ` series.
pub const THETA_TOL: f64 = 1e-12;
const THETA_MAX_TERMS: usize = 10_000_000;

/// `(κ_u, κ_w, π_u, π_w, μ_u, α_u, α_w)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrackingConstants {
    pub kappa_u: f64,
    pub kappa_w: f64,
    pub pi_u: f64,
    pub pi_w: f64,
    pub mu_u: f64,
    pub alpha_u: f64,
    pub alpha_w: f64,
}

impl TrackingConstants {
    pub fn new(
        kappa_u: f64,
        kappa_w: f64,
        pi_u: f64,
        pi_w: f64,
        mu_u: f64,
        alpha_u: f64,
        alpha_w: f64,
    ) -> Result<Self> {
        let c = Self {
            kappa_u,
            kappa_w,
            pi_u,
            pi_w,
            mu_u,
            alpha_u,
            alpha_w,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        let all = [
            self.kappa_u,
            self.kappa_w,
            self.pi_u,
            self.pi_w,
            self.mu_u,
            self.alpha_u,
            self.alpha_w,
        ];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("tracking constants"));
        }
        if !(self.kappa_u > 1.0) || !(self.kappa_w > 1.0) {
            return Err(invalid("kappa", "contraction factors must exceed 1"));
        }
        if !(self.pi_u > 0.0) || !(self.pi_w > 0.0) || !(self.mu_u > 0.0) {
            return Err(invalid("pi/mu", "must be positive"));
        }
        if self.alpha_u < 0.0 || self.alpha_w < 0.0 {
            return Err(invalid("alpha", "must be nonnegative"));
        }
        Ok(())
    }

    /// `κ = min(κ_u, κ_w)`.
    pub fn kappa(&self) -> f64 {
        self.kappa_u.min(self.kappa_w)
    }

    /// `κ̄ = max(κ_u, κ_w)`.
    pub fn kappa_bar(&self) -> f64 {
        self.kappa_u.max(self.kappa_w)
    }
}

/// `ι_k = Σ_{m=1}^{k} κ_u^{−m} κ_w^{−(k+1−m)}`, with `ι_0 = 0`.
pub fn iota(k: usize, kappa_u: f64, kappa_w: f64) -> f64 {
    (1..=k)
        .map(|m| kappa_u.powi(-(m as i32)) * kappa_w.powi(-((k + 1 - m) as i32)))
        .sum()
}

/// `ψ_j = α_u κ_u^{−j} π_u + α_w [ι_j μ_u π_u + κ_w^{−j} π_w]`.
pub fn psi(j: usize, c: &TrackingConstants) -> f64 {
    let j_i = j as i32;
    c.alpha_u * c.kappa_u.powi(-j_i) * c.pi_u
        + c.alpha_w * (iota(j, c.kappa_u, c.kappa_w) * c.mu_u * c.pi_u + c.kappa_w.powi(-j_i) * c.pi_w)
}

fn check_p(p: f64, c: &TrackingConstants) -> Result<()> {
    if !(p > 0.0) || p >= c.kappa() {
        return Err(invalid("p", format!("must lie in (0, {})", c.kappa())));
    }
    Ok(())
}

/// `θ = (κ̄/p) Σ_j p^j ψ_j`, summed until the tail bound drops below
/// `tol·(partial + 1)`. The returned value includes the tail bound and so
/// never underestimates the series.
pub fn theta(p: f64, c: &TrackingConstants, tol: f64) -> Result<f64> {
    c.validate()?;
    check_p(p, c)?;
    if c.alpha_u == 0.0 && c.alpha_w == 0.0 {
        return Ok(0.0);
    }
    let scale = c.kappa_bar() / p;
    let (ru, rw) = (p / c.kappa_u, p / c.kappa_w);
    let r = p / c.kappa();
    // ι_j updated by its recursion: ι_{j+1} = (κ_u^{−(j+1)} + ι_j)/κ_w.
    let mut iota_j = 0.0;
    let mut ku_pow = 1.0; // κ_u^{−j}
    let mut kw_pow = 1.0; // κ_w^{−j}
    let mut p_pow = 1.0; // p^j
    let mut partial = 0.0;
    for j in 0..THETA_MAX_TERMS {
        let psi_j = c.alpha_u * ku_pow * c.pi_u + c.alpha_w * (iota_j * c.mu_u * c.pi_u + kw_pow * c.pi_w);
        partial += p_pow * psi_j;
        let n = (j + 1) as f64;
        let rn_u = ru.powf(n);
        let rn_w = rw.powf(n);
        let rn = r.powf(n);
        let tail = c.alpha_u * c.pi_u * rn_u / (1.0 - ru)
            + c.alpha_w * c.pi_w * rn_w / (1.0 - rw)
            + c.alpha_w * c.mu_u * c.pi_u * (r / p) * rn * (n * (1.0 - r) + r) / (1.0 - r).powi(2);
        if scale * tail < tol * (scale * partial + 1.0) {
            return Ok(scale * (partial + tail));
        }
        ku_pow /= c.kappa_u;
        kw_pow /= c.kappa_w;
        iota_j = (ku_pow + iota_j) / c.kappa_w;
        p_pow *= p;
    }
    Err(Error::Other("theta series did not reach its tolerance".into()))
}

/// Closed-form upper bound
/// `(α_uπ_u+α_wπ_w)κκ̄/(p(κ−p)) + α_wμ_uπ_uκ̄/(κ−p)²`, valid on all of `(0, κ)`.
pub fn theta_bound(p: f64, c: &TrackingConstants) -> Result<f64> {
    check_p(p, c)?;
    let (k, kb) = (c.kappa(), c.kappa_bar());
    Ok((c.alpha_u * c.pi_u + c.alpha_w * c.pi_w) * k * kb / (p * (k - p))
        + c.alpha_w * c.mu_u * c.pi_u * kb / (k - p).powi(2))
}

/// The commonly quoted variant with `p²(κ−p)²` in the second denominator.
/// It dominates [`theta_bound`] only for `p ≤ 1`.
pub fn theta_bound_printed(p: f64, c: &TrackingConstants) -> Result<f64> {
    check_p(p, c)?;
    let (k, kb) = (c.kappa(), c.kappa_bar());
    Ok((c.alpha_u * c.pi_u + c.alpha_w * c.pi_w) * k * kb / (p * (k - p))
        + c.alpha_w * c.mu_u * c.pi_u * kb / (p * p * (k - p).powi(2)))
}

/// Right-hand side of the generic recursion bound for
/// `α_u b_{k+1} + α_w c_{k+1}`; `d[j]` holds `d_{j+1}`.
pub fn recursion_bound(
    k: usize,
    alpha_u: f64,
    alpha_w: f64,
    c: &TrackingConstants,
    b1: f64,
    c1: f64,
    d: &[f64],
) -> Result<f64> {
    if d.len() < k {
        return Err(Error::Empty("recursion history"));
    }
    let ki = k as i32;
    let mut out = (alpha_u * c.kappa_u.powi(-ki) + alpha_w * iota(k, c.kappa_u, c.kappa_w) * c.mu_u) * b1
        + alpha_w * c.kappa_w.powi(-ki) * c1;
    for (j, dj) in d.iter().take(k).enumerate() {
        let l = k - j;
        let li = l as i32;
        let coeff = alpha_u * c.kappa_u.powi(-li) * c.pi_u
            + alpha_w
                * (iota(l, c.kappa_u, c.kappa_w) * c.mu_u * c.pi_u + c.kappa_w.powi(-li) * c.pi_w);
        debug_assert!(coeff >= 0.0);
        out += coeff * dj;
    }
    Ok(out)
}

/// Which distance enters the history term of `e_lip`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ElipVariant {
    /// `λ²(x^{j+1}, x^j)`, consistent with `e_lip^k = e_{1,k}(x^k)`.
    #[default]
    UpdateMetric,
    /// `d²_X(x^{j+1}, x^j)`, the alternative display.
    StepMetric,
}

/// Append-only record of the quantities entering `e_{p,k}` and `e_lip^k`.
#[derive(Clone, Debug)]
pub struct ErrorLedger {
    pub constants: TrackingConstants,
    pub p: f64,
    pub theta: f64,
    pub theta_one: f64,
    /// `d_U(u¹, S_u(x⁰))`.
    pub init_u: f64,
    /// `d_W(w¹, S_w(x⁰))`.
    pub init_w: f64,
    /// `λ` is the `Λ`-seminorm.
    pub update_metric: SymOperator,
    /// `d_X` is the `M`-seminorm, `d_{X*}` its dual.
    pub step_metric: SymOperator,
    pub variant: ElipVariant,
    lambda_sq: Vec<f64>,
    step_sq: Vec<f64>,
    psi_cache: Vec<f64>,
}

impl ErrorLedger {
    pub fn new(
        constants: TrackingConstants,
        p: f64,
        update_metric: SymOperator,
        step_metric: SymOperator,
        variant: ElipVariant,
    ) -> Result<Self> {
        constants.validate()?;
        if p < 1.0 {
            return Err(invalid("p", "ledger weights require p >= 1"));
        }
        let theta_p = theta(p, &constants, THETA_TOL)?;
        let theta_one = theta(1.0, &constants, THETA_TOL)?;
        Ok(Self {
            constants,
            p,
            theta: theta_p,
            theta_one,
            init_u: 0.0,
            init_w: 0.0,
            update_metric,
            step_metric,
            variant,
            lambda_sq: Vec::new(),
            step_sq: Vec::new(),
            psi_cache: vec![psi(0, &constants)],
        })
    }

    pub fn set_initial_distances(&mut self, d_u: f64, d_w: f64) {
        self.init_u = d_u;
        self.init_w = d_w;
    }

    pub fn steps(&self) -> usize {
        self.lambda_sq.len()
    }

    pub fn lambda_sq_history(&self) -> &[f64] {
        &self.lambda_sq
    }

    /// Records the step `x^k → x^{k+1}`.
    pub fn push_step(&mut self, x_next: &DVector<f64>, x: &DVector<f64>) -> Result<()> {
        let d = x_next - x;
        self.lambda_sq.push(self.update_metric.seminorm_sq(&d)?);
        self.step_sq.push(self.step_metric.seminorm_sq(&d)?);
        Ok(())
    }

    pub fn lambda_sq(&self, x: &DVector<f64>, y: &DVector<f64>) -> Result<f64> {
        self.update_metric.seminorm_sq(&(x - y))
    }

    fn psi_at(&mut self, j: usize) -> f64 {
        while self.psi_cache.len() <= j {
            let n = self.psi_cache.len();
            self.psi_cache.push(psi(n, &self.constants));
        }
        self.psi_cache[j]
    }

    fn need(&self, k: usize) -> Result<()> {
        if self.lambda_sq.len() < k {
            Err(Error::Empty("ledger history"))
        } else {
            Ok(())
        }
    }

    fn init_terms(&self, k: usize, theta: f64, p: f64) -> f64 {
        let c = &self.constants;
        let ki = k as i32;
        let pk = p.powi(ki);
        theta * (c.alpha_u * c.kappa_u.powi(-ki) + c.alpha_w * iota(k, c.kappa_u, c.kappa_w) * c.mu_u)
            / (c.pi_u * pk)
            * self.init_u.powi(2)
            + theta * c.alpha_w * c.kappa_w.powi(-ki) / (c.pi_w * pk) * self.init_w.powi(2)
    }

    /// `e_{p,k}(x)`; `x_k` is the current outer iterate.
    pub fn e_pk(&mut self, k: usize, x: &DVector<f64>, x_k: &DVector<f64>) -> Result<f64> {
        self.need(k)?;
        let (theta, p) = (self.theta, self.p);
        let mut hist = 0.0;
        for j in 0..k {
            let l = k - j;
            hist += theta * self.psi_at(l) / p.powi(l as i32) * self.lambda_sq[j];
        }
        let lam = self.lambda_sq(x, x_k)?;
        Ok(self.init_terms(k, theta, p) + hist - theta * theta * lam)
    }

    /// `e_lip^k`, with `p = 1` weights.
    pub fn e_lip(&mut self, k: usize) -> Result<f64> {
        self.need(k)?;
        let theta = self.theta_one;
        let mut hist = 0.0;
        for j in 0..k {
            let dist = match self.variant {
                ElipVariant::UpdateMetric => self.lambda_sq[j],
                ElipVariant::StepMetric => self.step_sq[j],
            };
            hist += theta * self.psi_at(k - j) * dist;
        }
        Ok(self.init_terms(k, theta, 1.0) + hist)
    }

    /// Closed-form right-hand side of the error-sum lemma, valid for `p ≥ 1`.
    pub fn error_sum_bound(&self) -> f64 {
        let c = &self.constants;
        let k = c.kappa();
        let th = self.theta;
        self.init_u.powi(2) / c.pi_u * (th * c.alpha_u * k / (k - 1.0) + th * c.alpha_w * c.mu_u / (k - 1.0).powi(2))
            + self.init_w.powi(2) / c.pi_w * (th * c.alpha_w * k / (k - 1.0))
    }

    /// Bound for `Σ_{k<N} e_lip^k` from the erroneous-Lipschitz argument.
    pub fn elip_sum_bound(&self, n: usize) -> f64 {
        let c = &self.constants;
        let k = c.kappa();
        let th = self.theta_one;
        let hist: f64 = match self.variant {
            ElipVariant::UpdateMetric => self.lambda_sq.iter().take(n).sum(),
            ElipVariant::StepMetric => self.step_sq.iter().take(n).sum(),
        };
        self.init_u.powi(2) / c.pi_u * (th * c.alpha_u * k / (k - 1.0) + th * c.alpha_w * c.mu_u / (k - 1.0).powi(2))
            + self.init_w.powi(2) / c.pi_w * (th * c.alpha_w * k / (k - 1.0))
            + th * th / c.kappa_bar() * hist
    }
}

/// `θ²λ²(x, x^k) + e_{p,k}(x) − d²_{X*}(∇̃F(x^k), F'(x^k))`.
pub fn gradient_error_check(
    k: usize,
    ledger: &mut ErrorLedger,
    estimate: &DVector<f64>,
    exact: &DVector<f64>,
    x: &DVector<f64>,
    x_k: &DVector<f64>,
) -> Result<f64> {
    let lhs = ledger.step_metric.dual_seminorm(&(estimate - exact))?.powi(2);
    let rhs = ledger.theta.powi(2) * ledger.lambda_sq(x, x_k)? + ledger.e_pk(k, x, x_k)?;
    Ok(rhs - lhs)
}

/// `⟨∇̃F − F', x − x̄⟩ + (γ̃/2)d²_X(x, x̄) + (θ²/2γ̃)λ²(x, x^k) + e_{p,k}(x)/(2γ̃)`.
#[allow(clippy::too_many_arguments)]
pub fn descent_with_error_check(
    k: usize,
    ledger: &mut ErrorLedger,
    estimate: &DVector<f64>,
    exact: &DVector<f64>,
    x: &DVector<f64>,
    x_bar: &DVector<f64>,
    x_k: &DVector<f64>,
    gamma_tilde: f64,
) -> Result<f64> {
    if !(gamma_tilde > 0.0) {
        return Err(invalid("gamma_tilde", "must be positive"));
    }
    let lhs = (estimate - exact).dot(&(x - x_bar));
    let rhs = -0.5 * gamma_tilde * ledger.step_metric.seminorm_sq(&(x - x_bar))?
        - ledger.theta.powi(2) / (2.0 * gamma_tilde) * ledger.lambda_sq(x, x_k)?
        - ledger.e_pk(k, x, x_k)? / (2.0 * gamma_tilde);
    Ok(lhs - rhs)
}

/// Slack of the assembled inexact descent inequality
/// `⟨∇̃F(x^k), x − x^k⟩ ≥ F(x) − F(x^k) − ½(1+θ²/γ̃)λ²(x,x^k) − (γ̃/2)d²_X(x,x^k) − e_{p,k}(x)/(2γ̃)`.
#[allow(clippy::too_many_arguments)]
pub fn inexact_descent_check(
    k: usize,
    ledger: &mut ErrorLedger,
    estimate: &DVector<f64>,
    value_x: f64,
    value_xk: f64,
    x: &DVector<f64>,
    x_k: &DVector<f64>,
    gamma_tilde: f64,
) -> Result<f64> {
    let lhs = estimate.dot(&(x - x_k));
    let rhs = value_x - value_xk
        - 0.5 * (1.0 + ledger.theta.powi(2) / gamma_tilde) * ledger.lambda_sq(x, x_k)?
        - 0.5 * gamma_tilde * ledger.step_metric.seminorm_sq(&(x - x_k))?
        - ledger.e_pk(k, x, x_k)? / (2.0 * gamma_tilde);
    Ok(lhs - rhs)
}

/// Slack of the inexact three-point descent inequality with growth operator
/// `Γ` (and companion `|Γ|`) valid on Ω.
#[allow(clippy::too_many_arguments)]
pub fn inexact_three_point_check(
    k: usize,
    ledger: &mut ErrorLedger,
    estimate: &DVector<f64>,
    value_x: f64,
    value_xbar: f64,
    x: &DVector<f64>,
    x_bar: &DVector<f64>,
    x_k: &DVector<f64>,
    gamma_op: &SymOperator,
    gamma_abs: &SymOperator,
    beta: f64,
    gamma_tilde: f64,
) -> Result<f64> {
    let lam = &ledger.update_metric;
    let lower = gamma_op.sub(&gamma_abs.scale(beta))?;
    let upper = lam.add(&gamma_abs.scale(1.0 / beta))?.sub(gamma_op)?;
    let lhs = estimate.dot(&(x - x_bar));
    let rhs = value_x - value_xbar + 0.5 * lower.quad_form(&(x - x_bar))? - 0.5 * upper.quad_form(&(x - x_k))?
        - 0.5 * gamma_tilde * ledger.step_metric.seminorm_sq(&(x - x_bar))?
        - ledger.theta.powi(2) / (2.0 * gamma_tilde) * ledger.lambda_sq(x, x_k)?
        - ledger.e_pk(k, x, x_k)? / (2.0 * gamma_tilde);
    Ok(lhs - rhs)
}

/// `((1+ϑ)/2)d²(F', x*) + ((1+ϑ⁻¹)/2)e_lip^k − ½d²(∇̃F, x*)`.
pub fn lipschitz_with_error_check(
    k: usize,
    ledger: &mut ErrorLedger,
    estimate: &DVector<f64>,
    exact: &DVector<f64>,
    target: &DVector<f64>,
    vartheta: f64,
) -> Result<f64> {
    let e = ledger.e_lip(k)?;
    lipschitz_slack(ledger, estimate, exact, target, vartheta, e)
}

/// As [`lipschitz_with_error_check`] with a caller-supplied `e_lip` value.
pub fn lipschitz_slack(
    ledger: &ErrorLedger,
    estimate: &DVector<f64>,
    exact: &DVector<f64>,
    target: &DVector<f64>,
    vartheta: f64,
    e_lip: f64,
) -> Result<f64> {
    if !(vartheta > 0.0) {
        return Err(invalid("vartheta", "must be positive"));
    }
    let d_est = ledger.step_metric.dual_seminorm(&(estimate - target))?;
    let d_ex = ledger.step_metric.dual_seminorm(&(exact - target))?;
    Ok(0.5 * (1.0 + vartheta) * d_ex * d_ex + 0.5 * (1.0 + 1.0 / vartheta) * e_lip - 0.5 * d_est * d_est)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn ones(k: f64) -> TrackingConstants {
        TrackingConstants::new(k, k, 1.0, 1.0, 1.0, 1.0, 1.0).unwrap()
    }

    /// `Σ_j p^j ψ_j` through the generating function of `ι`.
    fn theta_oracle(p: f64, c: &TrackingConstants) -> f64 {
        let (au, aw) = (1.0 - p / c.kappa_u, 1.0 - p / c.kappa_w);
        let iota_sum = p / (c.kappa_u * c.kappa_w) / (au * aw);
        c.kappa_bar() / p
            * (c.alpha_u * c.pi_u / au + c.alpha_w * c.mu_u * c.pi_u * iota_sum + c.alpha_w * c.pi_w / aw)
    }

    #[test]
    fn iota_examples() {
        assert_eq!(iota(0, 2.0, 2.0), 0.0);
        assert_eq!(iota(1, 2.0, 2.0), 0.25);
        assert_eq!(iota(2, 2.0, 2.0), 0.25);
        for k in 0..20 {
            assert_relative_eq!(iota(k, 2.0, 2.0), k as f64 * 0.5f64.powi(k as i32 + 1), epsilon = 1e-15);
        }
    }

    #[test]
    fn iota_recursion_identity() {
        for (ku, kw) in [(2.0, 3.0), (1.1, 4.0), (3.5, 1.2)] {
            for n in 0..=64usize {
                let lhs = iota(n + 1, ku, kw);
                let rhs = ku.powi(-(n as i32 + 1)) / kw + iota(n, ku, kw) / kw;
                assert!((lhs - rhs).abs() <= 1e-15 * lhs.abs().max(f64::MIN_POSITIVE) * 4.0);
            }
        }
    }

    #[test]
    fn psi_examples() {
        let c = ones(2.0);
        assert_eq!(psi(0, &c), 2.0);
        assert_eq!(psi(1, &c), 1.25);
        let z = TrackingConstants::new(2.0, 2.0, 1.0, 1.0, 1.0, 0.0, 0.0).unwrap();
        assert_eq!(psi(3, &z), 0.0);
    }

    #[test]
    fn theta_examples() {
        let c = ones(2.0);
        assert!((theta(1.0, &c, THETA_TOL).unwrap() - 10.0).abs() <= 1e-9);
        assert!((theta_bound(1.0, &c).unwrap() - 10.0).abs() <= 1e-12);
        assert!((theta_bound_printed(1.0, &c).unwrap() - 10.0).abs() <= 1e-12);
        let z = TrackingConstants::new(2.0, 2.0, 1.0, 1.0, 1.0, 0.0, 0.0).unwrap();
        assert_eq!(theta(1.0, &z, THETA_TOL).unwrap(), 0.0);
        assert!(theta(2.0, &c, THETA_TOL).is_err());
    }

    #[test]
    fn theta_matches_generating_function() {
        let c = TrackingConstants::new(1.7, 3.1, 0.4, 2.0, 0.9, 0.3, 1.6).unwrap();
        for p in [0.5, 1.0, 1.3, 1.6] {
            let t = theta(p, &c, THETA_TOL).unwrap();
            let o = theta_oracle(p, &c);
            assert!(t >= o);
            assert_relative_eq!(t, o, max_relative = 1e-10);
        }
    }

    #[test]
    fn printed_bound_fails_above_one() {
        let c = TrackingConstants::new(3.2, 3.45, 1.75, 0.01, 0.01, 0.0, 0.7).unwrap();
        let p = 2.65;
        let t = theta(p, &c, THETA_TOL).unwrap();
        assert!(t > theta_bound_printed(p, &c).unwrap());
        assert!(t <= theta_bound(p, &c).unwrap());
    }

    #[test]
    fn recursion_examples() {
        let c = ones(2.0);
        let b = recursion_bound(1, 1.0, 1.0, &c, 1.0, 1.0, &[0.0]).unwrap();
        assert_relative_eq!(b, 1.25, epsilon = 1e-15);
        let b2 = 0.5;
        let c2 = (1.0 + 1.0 * b2) / 2.0;
        assert_relative_eq!(b2 + c2, 1.25, epsilon = 1e-15);
        let c = TrackingConstants::new(3.0, 1.5, 1.0, 1.0, 1.0, 1.0, 1.0).unwrap();
        let b = recursion_bound(4, 2.0, 0.0, &c, 5.0, 9.0, &[0.0; 4]).unwrap();
        assert_relative_eq!(b, 2.0 * 3f64.powi(-4) * 5.0, epsilon = 1e-15);
    }

    fn ledger(c: TrackingConstants, p: f64) -> ErrorLedger {
        ErrorLedger::new(
            c,
            p,
            SymOperator::scaled_identity(1, 0.25),
            SymOperator::identity(1),
            ElipVariant::UpdateMetric,
        )
        .unwrap()
    }

    #[test]
    fn e_pk_empty_history_is_zero() {
        let mut l = ledger(ones(2.0), 1.0);
        let x = DVector::from_element(1, 0.3);
        assert_eq!(l.e_pk(0, &x, &x).unwrap(), 0.0);
        assert_eq!(l.e_lip(0).unwrap(), 0.0);
        assert!(l.e_pk(1, &x, &x).is_err());
    }

    #[test]
    fn e_pk_matches_direct_summation() {
        let c = TrackingConstants::new(2.0, 1.5, 0.7, 0.3, 1.1, 0.2, 0.9).unwrap();
        let mut l = ledger(c, 1.2);
        l.set_initial_distances(0.4, 0.6);
        let xs: Vec<DVector<f64>> = [0.0, 0.5, 0.8, 1.4, 1.5].iter().map(|v| DVector::from_element(1, *v)).collect();
        for w in xs.windows(2) {
            l.push_step(&w[1], &w[0]).unwrap();
        }
        let k = 3;
        let x = DVector::from_element(1, 1.45);
        let got = l.e_pk(k, &x, &xs[k]).unwrap();
        // Straightforward re-summation with independently computed weights.
        let th = theta_oracle(1.2, &c);
        let mut want = th * (0.2 * 2f64.powi(-3) + 0.9 * iota(3, 2.0, 1.5) * 1.1) / (0.7 * 1.2f64.powi(3)) * 0.16
            + th * 0.9 * 1.5f64.powi(-3) / (0.3 * 1.2f64.powi(3)) * 0.36;
        for j in 0..k {
            let d = xs[j + 1][0] - xs[j][0];
            want += th * psi(k - j, &c) / 1.2f64.powi((k - j) as i32) * 0.25 * d * d;
        }
        want -= th * th * 0.25 * (1.45f64 - 1.4).powi(2);
        assert_relative_eq!(got, want, epsilon = 1e-12, max_relative = 1e-10);
    }

    #[test]
    fn e_lip_is_e_1k_at_current_iterate() {
        let c = TrackingConstants::new(2.5, 1.8, 0.7, 0.3, 1.1, 0.2, 0.9).unwrap();
        let mut l = ledger(c, 1.0);
        l.set_initial_distances(0.3, 0.2);
        let xs: Vec<DVector<f64>> = [1.0, 0.2, -0.3, 0.9].iter().map(|v| DVector::from_element(1, *v)).collect();
        for (k, w) in xs.windows(2).enumerate() {
            let a = l.e_lip(k).unwrap();
            let b = l.e_pk(k, &w[0], &w[0]).unwrap();
            assert_relative_eq!(a, b, epsilon = 1e-14);
            l.push_step(&w[1], &w[0]).unwrap();
        }
    }

    proptest! {
        #[test]
        fn theta_below_closed_form(ku in 1.05f64..4.0, kw in 1.05f64..4.0, pu in 0.01f64..3.0, pw in 0.01f64..3.0,
                                  mu in 0.01f64..3.0, au in 0.0f64..3.0, aw in 0.0f64..3.0, frac in 0.0f64..0.95) {
            let c = TrackingConstants::new(ku, kw, pu, pw, mu, au, aw).unwrap();
            let p = 0.05 + frac * (c.kappa() - 0.05);
            let t = theta(p, &c, THETA_TOL).unwrap();
            prop_assert!(t <= theta_bound(p, &c).unwrap() * (1.0 + 1e-12));
            if p <= 1.0 {
                prop_assert!(t <= theta_bound_printed(p, &c).unwrap() * (1.0 + 1e-12));
            }
        }

        #[test]
        fn iota_series_estimates(ku in 1.05f64..4.0, kw in 1.05f64..4.0, k in 0usize..80, frac in 0.05f64..0.95) {
            let kap = ku.min(kw);
            let p = frac * kap;
            let lhs = p.powi(k as i32) * iota(k, ku, kw);
            let rhs = k as f64 * (kap / p).powi(-(k as i32 + 1)) / p;
            prop_assert!(lhs <= rhs * (1.0 + 1e-12));
        }

        #[test]
        fn iota_sum_bound(ku in 1.05f64..4.0, kw in 1.05f64..4.0, frac in 0.05f64..0.9) {
            let kap = ku.min(kw);
            let p = frac * kap;
            let r = p / kap;
            let n = 400usize;
            let partial: f64 = (0..n).map(|k| p.powi(k as i32) * iota(k, ku, kw)).sum();
            let nf = n as f64;
            let tail = (r / p) * r.powf(nf) * (nf * (1.0 - r) + r) / (1.0 - r).powi(2);
            prop_assert!(partial + tail <= p / (kap - p).powi(2) * (1.0 + 1e-12) + tail);
            prop_assert!(partial <= p / (kap - p).powi(2) * (1.0 + 1e-12));
        }

        #[test]
        fn recursion_bound_monotone(b1 in 0.0f64..2.0, c1 in 0.0f64..2.0, bump in 0.0f64..1.0, idx in 0usize..5) {
            let c = TrackingConstants::new(1.5, 2.5, 0.5, 0.7, 0.9, 1.0, 1.0).unwrap();
            let mut d = vec![0.1, 0.2, 0.3, 0.4, 0.5];
            let base = recursion_bound(5, 1.0, 1.0, &c, b1, c1, &d).unwrap();
            prop_assert!(recursion_bound(5, 1.0, 1.0, &c, b1 + bump, c1, &d).unwrap() >= base);
            prop_assert!(recursion_bound(5, 1.0, 1.0, &c, b1, c1 + bump, &d).unwrap() >= base);
            d[idx] += bump;
            prop_assert!(recursion_bound(5, 1.0, 1.0, &c, b1, c1, &d).unwrap() >= base);
        }
    }
}
