//! Iterate traces and their CSV form.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::tracking::TrackingConstants;

/// Why a run stopped.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RunStatus {
    Converged,
    Budget,
    #[serde(rename = "left-Ω")]
    LeftRegion,
}

/// Work performed by the algorithm itself; diagnostic oracle solves are not counted.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counters {
    pub outer_steps: usize,
    pub inner_steps: usize,
    pub adjoint_steps: usize,
    pub direct_solves: usize,
    /// Rough floating-point operation count of the algorithmic work.
    pub flops: u64,
}

/// One outer iteration `k → k+1`.
#[derive(Clone, Debug, PartialEq)]
pub struct TraceRow {
    pub k: usize,
    pub x: DVector<f64>,
    pub x_next: DVector<f64>,
    /// `u^{k+1}`, used to form the estimate at `x^k`.
    pub u: DVector<f64>,
    /// `w^{k+1}` or the flattened `p^{k+1}` (row-major).
    pub adjoint: DVector<f64>,
    /// `S_u(x^k)`.
    pub u_exact: DVector<f64>,
    /// `S_w(x^k)` or the flattened `S_u'(x^k)`.
    pub adjoint_exact: DVector<f64>,
    /// `∇̃F(x^k)`.
    pub grad_estimate: DVector<f64>,
    /// `F'(x^k)`.
    pub grad_exact: DVector<f64>,
    /// `F'(x^{k+1})`.
    pub grad_exact_next: DVector<f64>,
    /// `q̃^{k+1} = −M(x^{k+1} − x^k)`.
    pub q_tilde: DVector<f64>,
    /// Element of `∂G(x^{k+1})` certified by the prox optimality condition.
    pub subgradient: DVector<f64>,
    /// `d_{X*}(∇̃F(x^k), F'(x^k))`.
    pub grad_error: f64,
    /// `e_{p,k}(x^{k+1})`.
    pub e_pk: f64,
    pub e_lip: f64,
    pub err_desc: f64,
    pub err_mono: f64,
    /// `𝒢(x^{k+1}; x^k)`.
    pub gap: f64,
    /// `‖x^{k+1} − x^k‖_M`.
    pub step_norm_m: f64,
    /// `‖x^{k+1} − x̄‖_M`.
    pub dist_to_xbar_m: f64,
    /// Norm of a certified element of `H(x^{k+1})`.
    pub residual: f64,
    /// `λ²(x^{k+1}, x^k)`.
    pub lambda_sq: f64,
    /// `[F+G](x^{k+1})`; for primal-dual runs `x` is the stacked `(u, y)`.
    pub value_next: f64,
}

/// Time-ordered record of a run with its metadata.
#[derive(Clone, Debug)]
pub struct IterateTrace {
    pub label: String,
    pub method: String,
    pub status: RunStatus,
    pub config_hash: u64,
    pub x0: DVector<f64>,
    pub x_bar: Option<DVector<f64>>,
    /// Step metric `M`.
    pub metric: DMatrix<f64>,
    /// Shape of the adjoint variable (rows, cols).
    pub adjoint_shape: (usize, usize),
    pub constants: Option<TrackingConstants>,
    pub counters: Counters,
    pub rows: Vec<TraceRow>,
}

impl IterateTrace {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn last_x(&self) -> &DVector<f64> {
        self.rows.last().map_or(&self.x0, |r| &r.x_next)
    }

    pub fn final_residual(&self) -> Option<f64> {
        self.rows.last().map(|r| r.residual)
    }

    /// Iterates `x⁰, …, x^N`.
    pub fn iterates(&self) -> Vec<DVector<f64>> {
        let mut out = Vec::with_capacity(self.rows.len() + 1);
        out.push(self.x0.clone());
        out.extend(self.rows.iter().map(|r| r.x_next.clone()));
        out
    }

    pub fn csv_header(&self) -> String {
        let mut cols = vec!["k".to_string()];
        let dx = self.x0.len();
        cols.extend((0..dx).map(|i| format!("x_{i}")));
        let du = self.rows.first().map_or(0, |r| r.u.len());
        cols.extend((0..du).map(|i| format!("u_{i}")));
        let (ar, ac) = self.adjoint_shape;
        if ac <= 1 {
            cols.extend((0..ar).map(|i| format!("w_{i}")));
        } else {
            for i in 0..ar {
                cols.extend((0..ac).map(|j| format!("p_{i}_{j}")));
            }
        }
        let dg = self.rows.first().map_or(0, |r| r.grad_estimate.len());
        cols.extend((0..dg).map(|i| format!("grad_{i}")));
        for name in [
            "grad_error",
            "e_pk",
            "e_lip",
            "err_desc",
            "err_mono",
            "gap",
            "step_norm_M",
            "dist_to_xbar_M",
            "residual",
        ] {
            cols.push(name.into());
        }
        cols.join(",")
    }

    /// CSV with 17 significant digits per float.
    pub fn to_csv(&self) -> String {
        let mut out = self.csv_header();
        out.push('\n');
        for r in &self.rows {
            let _ = write!(out, "{}", r.k);
            for v in r
                .x
                .iter()
                .chain(r.u.iter())
                .chain(r.adjoint.iter())
                .chain(r.grad_estimate.iter())
                .chain([
                    &r.grad_error,
                    &r.e_pk,
                    &r.e_lip,
                    &r.err_desc,
                    &r.err_mono,
                    &r.gap,
                    &r.step_norm_m,
                    &r.dist_to_xbar_m,
                    &r.residual,
                ])
            {
                out.push(',');
                out.push_str(&fmt_float(*v));
            }
            out.push('\n');
        }
        out
    }
}

pub fn fmt_float(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.16e}")
    } else if v.is_nan() {
        "nan".into()
    } else if v > 0.0 {
        "inf".into()
    } else {
        "-inf".into()
    }
}

/// Flattens a matrix row-major.
pub fn flatten_row_major(m: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_iterator(m.len(), m.row_iter().flat_map(|r| r.iter().copied().collect::<Vec<_>>()))
}
