//! Assembly of the check set for a finished run.

use nalgebra::DVector;
use tracksplit::diagnostics::{
    descent_check, error_sum_report, gradient_error_report, quasi_fejer_check, quasi_monotonicity_check, r_p_check,
    CheckReport,
};
use tracksplit::inner::measure_inner_tracking;
use tracksplit::adjoint::measure_adjoint_tracking;
use tracksplit::operators::SymOperator;
use tracksplit::outer::{Regime, RunConfig, RunOutput};

/// Every check name the harness knows, in report order.
pub const ALL_CHECKS: &[&str] = &[
    "descent",
    "quasi-monotonicity",
    "gradient-error",
    "error-sum",
    "quasi-fejer",
    "r_p",
    "inner-tracking",
    "adjoint-tracking",
];

/// Checks that run unless `--check` narrows the set. The tracking checks use
/// estimated constants and are opt-in.
const DEFAULT_CHECKS: &[&str] = &["descent", "quasi-monotonicity", "gradient-error", "error-sum", "quasi-fejer", "r_p"];

pub fn parse_selection(list: Option<&str>) -> Result<Vec<String>, String> {
    let Some(list) = list else {
        return Ok(DEFAULT_CHECKS.iter().map(|s| s.to_string()).collect());
    };
    let mut out = Vec::new();
    for name in list.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        if !ALL_CHECKS.contains(&name) {
            return Err(format!("unknown check `{name}` (known: {})", ALL_CHECKS.join(", ")));
        }
        out.push(name.to_string());
    }
    Ok(out)
}

fn absolute(name: &str, citation: &str, slacks: Vec<f64>) -> CheckReport {
    let scales = vec![0.0; slacks.len()];
    CheckReport::from_slacks(name, citation, slacks, &scales)
}

/// Runs the selected checks that apply to this run; inapplicable ones are skipped.
pub fn run_checks(config: &RunConfig, out: &RunOutput, selected: &[String]) -> tracksplit::Result<Vec<CheckReport>> {
    let trace = &out.trace;
    let mut reports = Vec::new();
    if trace.is_empty() {
        return Ok(reports);
    }
    let has_desc = trace.rows.iter().all(|r| !r.err_desc.is_nan());
    let x_bar = trace.x_bar.clone();
    let cert = &out.certificate;
    for name in selected {
        let report = match name.as_str() {
            "descent" if has_desc => {
                let lb = SymOperator::scaled_identity(trace.x0.len(), cert.lambda_breve);
                Some(descent_check(trace, &lb)?)
            }
            "quasi-monotonicity" if has_desc => Some(quasi_monotonicity_check(trace, cert.eta_descent)?),
            "gradient-error" if config.instance.is_some() => Some(gradient_error_report(trace, cert.theta)?),
            "error-sum" => match out.error_sum_bound {
                Some(b) if config.instance.is_some() => Some(error_sum_report(trace, cert.p, b)?),
                _ => None,
            },
            "quasi-fejer" => quasi_fejer_report(out, x_bar.as_ref())?,
            "r_p" => out.mismatch.as_ref().map(|mc| {
                let errs: Vec<f64> = trace.rows.iter().map(|r| r.err_mono).collect();
                r_p_check(&errs, mc.p, mc.r_p_bound)
            }),
            "inner-tracking" => match (&trace.constants, trace.len() >= 2) {
                (Some(c), true) => Some(absolute(
                    "inner-tracking",
                    "inner tracking inequality",
                    measure_inner_tracking(trace, c.kappa_u, c.pi_u, &out.update_metric)?,
                )),
                _ => None,
            },
            "adjoint-tracking" => match (&trace.constants, trace.len() >= 2) {
                (Some(c), true) => Some(absolute(
                    "adjoint-tracking",
                    "adjoint tracking inequality",
                    measure_adjoint_tracking(trace, c.kappa_w, c.mu_u, c.pi_w, &out.update_metric)?,
                )),
                _ => None,
            },
            _ => None,
        };
        if let Some(r) = report {
            reports.push(r.with_seed(config.seed));
        }
    }
    Ok(reports)
}

fn quasi_fejer_report(out: &RunOutput, x_bar: Option<&DVector<f64>>) -> tracksplit::Result<Option<CheckReport>> {
    let Some(x_bar) = x_bar else { return Ok(None) };
    let trace = &out.trace;
    let errs: Vec<f64> = trace
        .rows
        .iter()
        .map(|r| if r.err_mono.is_nan() { 0.0 } else { r.err_mono })
        .collect();
    let p = if let Some(mc) = &out.mismatch {
        if !mc.holds {
            return Ok(None);
        }
        mc.p
    } else if out.lambda.is_some() && trace.constants.is_none() {
        // exact primal-dual: monotone with p = 1
        1.0
    } else if out.certificate.regime == Regime::Linear {
        out.certificate.p
    } else {
        return Ok(None);
    };
    Ok(Some(quasi_fejer_check(trace, x_bar, p, &errs)?))
}
