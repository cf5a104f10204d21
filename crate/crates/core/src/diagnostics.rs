//! Per-step and per-run inequality checks over iterate traces, sampled checks
//! of the operator-relative smoothness inequalities, and rate estimation.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, invalid, Error, Result};
use crate::operators::{SkewOperator, SymOperator};
use crate::outer::ProxFunction;
use crate::par::{map_range, sample_rng, Execution};
use crate::trace::IterateTrace;

/// Absolute slack tolerance, scaled by `1 + |largest term|`.
pub const CHECK_TOL: f64 = 1e-9;

/// Outcome of one inequality check.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckReport {
    pub name: String,
    /// The inequality being checked, by name.
    pub citation: String,
    pub slacks: Vec<f64>,
    pub min_slack: f64,
    /// `min_k slack_k / (1 + scale_k)`.
    pub min_scaled_slack: f64,
    pub tolerance: f64,
    pub pass: bool,
    pub first_violation: Option<usize>,
    #[serde(default)]
    pub seed: Option<u64>,
    /// Qualifier such as "sampled" or "budget-bounded".
    #[serde(default)]
    pub qualifier: Option<String>,
}

impl CheckReport {
    /// Builds a report from slacks and the magnitudes of their largest terms.
    pub fn from_slacks(name: &str, citation: &str, slacks: Vec<f64>, scales: &[f64]) -> Self {
        let scaled: Vec<f64> = slacks
            .iter()
            .zip(scales)
            .map(|(s, m)| if s.is_nan() { f64::NEG_INFINITY } else { s / (1.0 + m.abs()) })
            .collect();
        let min_scaled_slack = scaled.iter().copied().fold(f64::INFINITY, f64::min);
        let first_violation = scaled.iter().position(|s| *s < -CHECK_TOL);
        Self {
            name: name.into(),
            citation: citation.into(),
            min_slack: slacks.iter().copied().fold(f64::INFINITY, |a, s| if s.is_nan() { f64::NEG_INFINITY } else { a.min(s) }),
            slacks,
            min_scaled_slack,
            tolerance: CHECK_TOL,
            pass: first_violation.is_none(),
            first_violation,
            seed: None,
            qualifier: None,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = Some(seed);
        self
    }

    pub fn with_qualifier(mut self, q: &str) -> Self {
        self.qualifier = Some(q.into());
        self
    }

    pub fn violations(&self) -> usize {
        self.slacks
            .iter()
            .filter(|s| s.is_nan() || **s < -CHECK_TOL * 1e3)
            .count()
            .max(usize::from(!self.pass))
    }
}

fn largest(terms: &[f64]) -> f64 {
    terms.iter().fold(0.0f64, |a, t| a.max(t.abs()))
}

fn require_rows(trace: &IterateTrace) -> Result<()> {
    if trace.is_empty() {
        Err(Error::Empty("trace"))
    } else {
        Ok(())
    }
}

fn metric_of(trace: &IterateTrace) -> Result<SymOperator> {
    SymOperator::new(trace.metric.clone())
}

/// `𝒢(x; x̄) = [F+G](x) − [F+G](x̄) − ⟨Ξx, x̄⟩`; `+∞` if `G(x)` is infinite.
pub fn lagrangian_gap<V>(x: &DVector<f64>, x_bar: &DVector<f64>, value: V, skew: &SkewOperator) -> Result<f64>
where
    V: Fn(&DVector<f64>) -> Result<f64>,
{
    let vx = value(x)?;
    if vx == f64::INFINITY {
        return Ok(f64::INFINITY);
    }
    Ok(vx - value(x_bar)? - skew.apply(x)?.dot(x_bar))
}

/// Descent inequality `⟨q̃^{k+1}, x^{k+1}−x^k⟩ ≥ 𝒢(x^{k+1}; x^k) − ½‖x^{k+1}−x^k‖²_Λ̆ − errDesc^k`.
pub fn descent_check(trace: &IterateTrace, lambda_breve: &SymOperator) -> Result<CheckReport> {
    require_rows(trace)?;
    let mut slacks = Vec::with_capacity(trace.len());
    let mut scales = Vec::with_capacity(trace.len());
    for r in &trace.rows {
        if r.err_desc.is_nan() {
            return Err(Error::Unsupported("trace carries no descent errors".into()));
        }
        let d = &r.x_next - &r.x;
        let lhs = r.q_tilde.dot(&d);
        let quad = 0.5 * lambda_breve.quad_form(&d)?;
        slacks.push(lhs - r.gap + quad + r.err_desc);
        scales.push(largest(&[lhs, r.gap, quad, r.err_desc]));
    }
    Ok(CheckReport::from_slacks(
        "descent",
        "inexact descent inequality for the implicit method",
        slacks,
        &scales,
    ))
}

/// Quasi-monotonicity `𝒢(x^{k+1}; x^k) + η‖x^{k+1}−x^k‖²_M ≤ errDesc^k`.
pub fn quasi_monotonicity_check(trace: &IterateTrace, eta: f64) -> Result<CheckReport> {
    require_rows(trace)?;
    let m = metric_of(trace)?;
    let mut slacks = Vec::with_capacity(trace.len());
    let mut scales = Vec::with_capacity(trace.len());
    for r in &trace.rows {
        if r.err_desc.is_nan() {
            return Err(Error::Unsupported("trace carries no descent errors".into()));
        }
        let step = eta * m.seminorm_sq(&(&r.x_next - &r.x))?;
        slacks.push(r.err_desc - r.gap - step);
        scales.push(largest(&[r.err_desc, r.gap, step]));
    }
    Ok(CheckReport::from_slacks(
        "quasi-monotonicity",
        "quasi-monotonicity of values under subdifferential convergence",
        slacks,
        &scales,
    ))
}

/// `(p/2)‖x^{k+1}−x̄‖²_M ≤ ½‖x^k−x̄‖²_M + e^k`.
pub fn quasi_fejer_check(trace: &IterateTrace, x_bar: &DVector<f64>, p: f64, errors: &[f64]) -> Result<CheckReport> {
    require_rows(trace)?;
    check_dim("error series", trace.len(), errors.len())?;
    check_dim("x_bar", trace.x0.len(), x_bar.len())?;
    if !(p >= 1.0) {
        return Err(invalid("p", "must be at least 1"));
    }
    let m = metric_of(trace)?;
    let mut slacks = Vec::with_capacity(trace.len());
    let mut scales = Vec::with_capacity(trace.len());
    for (r, e) in trace.rows.iter().zip(errors) {
        let before = 0.5 * m.seminorm_sq(&(&r.x - x_bar))?;
        let after = 0.5 * p * m.seminorm_sq(&(&r.x_next - x_bar))?;
        slacks.push(before + e - after);
        scales.push(largest(&[before, after, *e]));
    }
    Ok(CheckReport::from_slacks(
        "quasi-fejer",
        "p-strong quasi-Féjer monotonicity",
        slacks,
        &scales,
    ))
}

/// `x^k ∈ 𝕆_M(x̄, δ)` for every iterate, slack `δ − ‖x^k − x̄‖_M`.
pub fn ball_containment_check(trace: &IterateTrace, x_bar: &DVector<f64>, delta: f64) -> Result<CheckReport> {
    let m = metric_of(trace)?;
    let mut slacks = Vec::new();
    let mut scales = Vec::new();
    for x in trace.iterates() {
        let d = m.seminorm(&(&x - x_bar))?;
        slacks.push(delta - d);
        scales.push(largest(&[delta, d]));
    }
    Ok(CheckReport::from_slacks(
        "non-escape",
        "non-escape ball containment",
        slacks,
        &scales,
    ))
}

/// `sup_N Σ_{k<N} p^{k−N} e^k` over the run, with the partial sums.
pub fn r_p_partial_sums(errors: &[f64], p: f64) -> (f64, Vec<f64>) {
    let mut s = 0.0;
    let mut out = Vec::with_capacity(errors.len());
    for e in errors {
        s = (s + e) / p;
        out.push(s);
    }
    (out.iter().copied().fold(0.0, f64::max), out)
}

/// Partial sums `Σ_{k<N} p^{k−N} e^k ≤ bound`, labelled budget-bounded.
pub fn r_p_check(errors: &[f64], p: f64, bound: f64) -> CheckReport {
    let (_, sums) = r_p_partial_sums(errors, p);
    let scales: Vec<f64> = sums.iter().map(|s| s.max(bound)).collect();
    let slacks = sums.iter().map(|s| bound - s).collect();
    CheckReport::from_slacks("r_p", "weighted error-sum bound", slacks, &scales).with_qualifier("budget-bounded")
}

/// Norm of the certified element `F'(x^{k+1}) + q̃^{k+1} − ∇̃F(x^k)` of `H(x^{k+1})`.
pub fn subdiff_residual(row: &crate::trace::TraceRow) -> Result<f64> {
    check_dim("recorded subgradient", row.x_next.len(), row.subgradient.len())?;
    if row.subgradient.iter().any(|v| v.is_nan()) {
        return Err(Error::Empty("recorded subgradient"));
    }
    Ok((&row.grad_exact_next + &row.q_tilde - &row.grad_estimate).norm())
}

/// Estimated linear rate, or exact convergence.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RateFit {
    Rate(f64),
    ConvergedExactly,
}

impl RateFit {
    pub fn rate(&self) -> Option<f64> {
        match self {
            RateFit::Rate(p) => Some(*p),
            RateFit::ConvergedExactly => None,
        }
    }
}

/// Least-squares slope of `ln ‖x^k − x̄‖²_M` over the last `window + 1`
/// iterates, reported as `p = exp(−slope)`.
pub fn linear_rate_fit(trace: &IterateTrace, x_bar: &DVector<f64>, window: usize) -> Result<RateFit> {
    let m = metric_of(trace)?;
    let dists: Vec<f64> = trace
        .iterates()
        .iter()
        .map(|x| m.seminorm_sq(&(x - x_bar)))
        .collect::<Result<_>>()?;
    rate_from_distances(&dists, window)
}

/// As [`linear_rate_fit`] from squared distances directly.
pub fn rate_from_distances(dist_sq: &[f64], window: usize) -> Result<RateFit> {
    if window == 0 || dist_sq.len() < window + 1 {
        return Err(Error::Empty("rate-fit window"));
    }
    let tail = &dist_sq[dist_sq.len() - window - 1..];
    if tail.iter().any(|d| *d <= 0.0) {
        return Ok(RateFit::ConvergedExactly);
    }
    let n = tail.len() as f64;
    let xs: Vec<f64> = (0..tail.len()).map(|i| i as f64).collect();
    let ys: Vec<f64> = tail.iter().map(|d| d.ln()).collect();
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    Ok(RateFit::Rate((-sxy / sxx).exp()))
}

/// Rate fit over the part of the run above the round-off floor: iterates with
/// `‖x^k − x̄‖²_M ≤ floor·‖x⁰ − x̄‖²_M` are dropped and the fit uses the later
/// half of the rest.
pub fn fit_rate_above_floor(trace: &IterateTrace, x_bar: &DVector<f64>, floor: f64) -> Result<RateFit> {
    let m = metric_of(trace)?;
    let dists: Vec<f64> = trace
        .iterates()
        .iter()
        .map(|x| m.seminorm_sq(&(x - x_bar)))
        .collect::<Result<_>>()?;
    let d0 = dists[0];
    if d0 == 0.0 {
        return Ok(RateFit::ConvergedExactly);
    }
    let kept = dists.iter().take_while(|d| **d > floor * d0).count();
    if kept < 3 {
        return Ok(RateFit::ConvergedExactly);
    }
    rate_from_distances(&dists[..kept], (kept / 2).max(2))
}

/// `g(z) + h(Kz)` with `h = (h*)*`.
pub fn pdps_primal_value(z: &DVector<f64>, g: &ProxFunction, h_star: &ProxFunction, k: &DMatrix<f64>) -> Result<f64> {
    Ok(g.value(z)? + h_star.conjugate_value(&(k * z))?)
}

/// One point of the ergodic value bound.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErgodicPoint {
    pub n: usize,
    /// `P(z̃^N) − P(z̄)`.
    pub value_gap: f64,
    /// `sup_ŷ ‖(z⁰,y⁰) − (z̄,ŷ)‖²_M/(2N) + Σ_{k<N} errMono^k/N`.
    pub bound: f64,
    pub holds: bool,
}

/// `sup_{ŷ ∈ [lo,hi]^m} ‖(z⁰, y⁰) − (z̄, ŷ)‖²_M`, attained at a vertex since
/// the quadratic is convex in `ŷ`.
pub fn sup_ball_constant(trace: &IterateTrace, z_bar: &DVector<f64>, lo: f64, hi: f64) -> Result<f64> {
    let m = metric_of(trace)?;
    let n = z_bar.len();
    let dy = trace.x0.len() - n;
    if dy > 20 {
        return Err(Error::Unsupported("vertex enumeration limited to 20 dual components".into()));
    }
    let mut best = f64::NEG_INFINITY;
    for mask in 0..1usize << dy {
        let mut corner = DVector::zeros(n + dy);
        corner.rows_mut(0, n).copy_from(z_bar);
        for j in 0..dy {
            corner[n + j] = if mask >> j & 1 == 1 { hi } else { lo };
        }
        best = best.max(m.seminorm_sq(&(&trace.x0 - corner))?);
    }
    Ok(best)
}

/// Ergodic value bound for primal-dual runs on `P = f + g + h∘K` with convex
/// `f`. The ergodic iterate averages `z^1, …, z^N`, the points whose gaps are
/// summed in the underlying estimate.
pub fn ergodic_values<P>(
    trace: &IterateTrace,
    primal_value: P,
    z_bar: &DVector<f64>,
    sup_constant: f64,
    f_convex: bool,
) -> Result<Vec<ErgodicPoint>>
where
    P: Fn(&DVector<f64>) -> Result<f64>,
{
    if !f_convex {
        return Err(Error::Unsupported(
            "the convex envelope of a nonconvex objective is not computed".into(),
        ));
    }
    require_rows(trace)?;
    let n = z_bar.len();
    let p_bar = primal_value(z_bar)?;
    let mut sum_z = DVector::zeros(n);
    let mut sum_err = 0.0;
    let mut out = Vec::with_capacity(trace.len());
    for (i, r) in trace.rows.iter().enumerate() {
        let count = (i + 1) as f64;
        sum_z += r.x_next.rows(0, n);
        sum_err += if r.err_mono.is_nan() { 0.0 } else { r.err_mono };
        let value_gap = primal_value(&(&sum_z / count))? - p_bar;
        let bound = sup_constant / (2.0 * count) + sum_err / count;
        out.push(ErgodicPoint {
            n: i + 1,
            value_gap,
            bound,
            holds: value_gap <= bound + 1e-9,
        });
    }
    Ok(out)
}

/// `d²_{X*}(∇̃F(x^k), F'(x^k)) ≤ θ²λ²(x^{k+1}, x^k) + e_{p,k}(x^{k+1})` from trace columns.
pub fn gradient_error_report(trace: &IterateTrace, theta: f64) -> Result<CheckReport> {
    require_rows(trace)?;
    let (slacks, scales): (Vec<f64>, Vec<f64>) = trace
        .rows
        .iter()
        .map(|r| {
            let rhs = theta * theta * r.lambda_sq + r.e_pk;
            let lhs = r.grad_error * r.grad_error;
            (rhs - lhs, largest(&[rhs, lhs, theta * theta * r.lambda_sq]))
        })
        .unzip();
    Ok(CheckReport::from_slacks(
        "gradient-error",
        "inner-product error estimate for the differential",
        slacks,
        &scales,
    ))
}

/// `Σ_{k<N} p^k e_{p,k}(x^{k+1}) ≤ bound` for every `N` in the run.
pub fn error_sum_report(trace: &IterateTrace, p: f64, bound: f64) -> Result<CheckReport> {
    require_rows(trace)?;
    let mut s = 0.0;
    let mut slacks = Vec::with_capacity(trace.len());
    let mut scales = Vec::with_capacity(trace.len());
    for (k, r) in trace.rows.iter().enumerate() {
        s += p.powi(k as i32) * r.e_pk;
        slacks.push(bound - s);
        scales.push(largest(&[bound, s]));
    }
    Ok(CheckReport::from_slacks("error-sum", "error-sum lemma", slacks, &scales).with_qualifier("budget-bounded"))
}

/// Uniform sample in `[lo, hi]^dim` from stream `index`.
pub fn sample_box(seed: u64, index: usize, dim: usize, lo: f64, hi: f64) -> DVector<f64> {
    let mut rng = sample_rng(seed, index);
    DVector::from_fn(dim, |_, _| rng.gen_range(lo..=hi))
}

/// Uniform sample in the Euclidean ball of radius `r` from stream `index`.
pub fn sample_ball(seed: u64, index: usize, dim: usize, r: f64) -> DVector<f64> {
    let mut rng = sample_rng(seed, index);
    loop {
        let v = DVector::from_fn(dim, |_, _| rng.gen_range(-r..=r));
        if v.norm() <= r {
            return v;
        }
    }
}

/// `F(x) − F(z) − ⟨DF(z), x−z⟩ ≤ ½‖z−x‖²_Λ` on sampled pairs `(x, z)`.
pub fn check_descent_lemma<F, D>(
    f: F,
    df: D,
    lambda: &SymOperator,
    pairs: &[(DVector<f64>, DVector<f64>)],
    exec: Execution,
) -> Result<CheckReport>
where
    F: Fn(&DVector<f64>) -> f64 + Sync,
    D: Fn(&DVector<f64>) -> DVector<f64> + Sync,
{
    let res = map_range(pairs.len(), exec, |i| {
        let (x, z) = &pairs[i];
        let lhs = f(x) - f(z) - df(z).dot(&(x - z));
        let rhs = 0.5 * lambda.quad_form(&(z - x))?;
        Ok::<_, Error>((rhs - lhs, largest(&[f(x), f(z), rhs])))
    });
    let (slacks, scales) = collect_pairs(res)?;
    Ok(CheckReport::from_slacks("descent-lemma", "operator descent inequality", slacks, &scales)
        .with_qualifier("sampled"))
}

fn collect_pairs(res: Vec<Result<(f64, f64)>>) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut a = Vec::with_capacity(res.len());
    let mut b = Vec::with_capacity(res.len());
    for r in res {
        let (s, m) = r?;
        a.push(s);
        b.push(m);
    }
    Ok((a, b))
}

/// `⟨DF(z), x−x̄⟩ ≥ F(x)−F(x̄) + ½q_{Γ−β|Γ|}(x−x̄) − ½q_{Λ+β⁻¹|Γ|−Γ}(x−z)`
/// on sampled triples `(z, x, x̄)`.
#[allow(clippy::too_many_arguments)]
pub fn check_three_point_descent<F, D>(
    f: F,
    df: D,
    lambda: &SymOperator,
    gamma: &SymOperator,
    gamma_abs: &SymOperator,
    beta: f64,
    triples: &[(DVector<f64>, DVector<f64>, DVector<f64>)],
    exec: Execution,
) -> Result<CheckReport>
where
    F: Fn(&DVector<f64>) -> f64 + Sync,
    D: Fn(&DVector<f64>) -> DVector<f64> + Sync,
{
    if !(beta > 0.0) {
        return Err(invalid("beta", "must be positive"));
    }
    let lower = gamma.sub(&gamma_abs.scale(beta))?;
    let upper = lambda.add(&gamma_abs.scale(1.0 / beta))?.sub(gamma)?;
    let res = map_range(triples.len(), exec, |i| {
        let (z, x, xb) = &triples[i];
        let lhs = df(z).dot(&(x - xb));
        let a = 0.5 * lower.quad_form(&(x - xb))?;
        let b = 0.5 * upper.quad_form(&(x - z))?;
        let rhs = f(x) - f(xb) + a - b;
        Ok::<_, Error>((lhs - rhs, largest(&[lhs, f(x), f(xb), a, b])))
    });
    let (slacks, scales) = collect_pairs(res)?;
    Ok(
        CheckReport::from_slacks("three-point-descent", "three-point descent inequality", slacks, &scales)
            .with_qualifier("sampled"),
    )
}

/// With `Γ̃ = Γ − (ζ/2)Λ`:
/// `⟨DF(z)−DF(x̄), x−x̄⟩ ≥ q_{Γ̃−β|Γ̃|}(x−x̄) − q_{Λ/(2ζ)+β⁻¹|Γ̃|−Γ̃}(x−z)`.
pub fn check_three_point_mono<D>(
    df: D,
    lambda: &SymOperator,
    gamma: &SymOperator,
    beta: f64,
    zeta: f64,
    triples: &[(DVector<f64>, DVector<f64>, DVector<f64>)],
    exec: Execution,
) -> Result<CheckReport>
where
    D: Fn(&DVector<f64>) -> DVector<f64> + Sync,
{
    if !(beta > 0.0) || !(zeta > 0.0) {
        return Err(invalid("beta/zeta", "must be positive"));
    }
    let gt = gamma.sub(&lambda.scale(zeta / 2.0))?;
    let gt_abs = gt.young_companion()?;
    let lower = gt.sub(&gt_abs.scale(beta))?;
    let upper = lambda.scale(1.0 / (2.0 * zeta)).add(&gt_abs.scale(1.0 / beta))?.sub(&gt)?;
    let res = map_range(triples.len(), exec, |i| {
        let (z, x, xb) = &triples[i];
        let lhs = (df(z) - df(xb)).dot(&(x - xb));
        let a = lower.quad_form(&(x - xb))?;
        let b = upper.quad_form(&(x - z))?;
        Ok::<_, Error>((lhs - a + b, largest(&[lhs, a, b])))
    });
    let (slacks, scales) = collect_pairs(res)?;
    Ok(CheckReport::from_slacks(
        "three-point-monotonicity",
        "three-point monotonicity inequality",
        slacks,
        &scales,
    )
    .with_qualifier("sampled"))
}

/// Summary of a nonnegative recursion `a_{k+1} ≤ a_k(1+b_k) + c_k − d_k`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobbinsSummary {
    /// Final `a_N`.
    pub limit: f64,
    pub d_partial_sums: Vec<f64>,
    /// `Π(1+b_k)(a_0 + Σc_k)`, an upper bound for every `a_k`.
    pub growth_bound: f64,
    /// First index at which the recursion fails.
    pub violation: Option<usize>,
}

/// Checks the recursion index by index; `a` has one more entry than `b, c, d`.
pub fn robbins_check(a: &[f64], b: &[f64], c: &[f64], d: &[f64]) -> Result<RobbinsSummary> {
    let n = b.len();
    check_dim("robbins c", n, c.len())?;
    check_dim("robbins d", n, d.len())?;
    check_dim("robbins a", n + 1, a.len())?;
    if a.iter().chain(b).chain(c).chain(d).any(|v| !(*v >= 0.0)) {
        return Err(invalid("robbins series", "must be nonnegative"));
    }
    let mut violation = None;
    let mut sums = Vec::with_capacity(n);
    let mut s = 0.0;
    let mut prod = 1.0;
    let mut csum = 0.0;
    for k in 0..n {
        let rhs = a[k] * (1.0 + b[k]) + c[k] - d[k];
        if violation.is_none() && a[k + 1] > rhs + CHECK_TOL * (1.0 + rhs.abs()) {
            violation = Some(k);
        }
        s += d[k];
        sums.push(s);
        prod *= 1.0 + b[k];
        csum += c[k];
    }
    Ok(RobbinsSummary {
        limit: a[n],
        d_partial_sums: sums,
        growth_bound: prod * (a[0] + csum),
        violation,
    })
}
