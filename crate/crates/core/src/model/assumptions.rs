//! Local checks near the origin: the closed-loop linearisation inequality and the
//! small-control property of the CLF.

use serde::Serialize;

use super::{ModelError, SystemSpec};
use crate::compat::{lie_rows, margin_box};
use crate::field::VectorField;
use crate::linalg::{norm2, Matrix};
use crate::sampling::Halton;

const HESSIAN_STEP: f64 = 1e-4;
const PROBE_SAMPLES: usize = 256;
const PROBE_LEVELS: usize = 24;

#[derive(Debug, Clone, Serialize)]
pub struct LinearizationReport {
    #[serde(rename = "A")]
    pub a: Matrix,
    #[serde(rename = "B")]
    pub b: Matrix,
    #[serde(rename = "K")]
    pub k: Matrix,
    #[serde(rename = "P")]
    pub p: Matrix,
    #[serde(rename = "M")]
    pub m: Matrix,
    pub pass: bool,
    /// Smallest Cholesky pivot of `−M` (the first non-positive one when factorisation stops).
    pub min_pivot: f64,
    /// `max |P − Pᵀ| / max |P|` of the raw finite-difference Hessian.
    pub asymmetry: f64,
}

/// Hessian by nested central differences: the outer difference acts on a central-difference
/// gradient.
fn hessian(spec: &SystemSpec, x: &[f64], step: f64) -> Result<Matrix, ModelError> {
    let n = x.len();
    let v = |p: &[f64]| spec.v(p).map_err(|e| ModelError::Hessian(e.to_string()));
    let grad_j = |p: &mut Vec<f64>, j: usize| -> Result<f64, ModelError> {
        let c = p[j];
        p[j] = c + step;
        let plus = v(p)?;
        p[j] = c - step;
        let minus = v(p)?;
        p[j] = c;
        Ok((plus - minus) / (2.0 * step))
    };
    let mut hess = Matrix::zeros(n, n);
    let mut p = x.to_vec();
    for i in 0..n {
        for j in 0..n {
            let c = p[i];
            p[i] = c + step;
            let plus = grad_j(&mut p, j)?;
            p[i] = c - step;
            let minus = grad_j(&mut p, j)?;
            p[i] = c;
            hess[(i, j)] = (plus - minus) / (2.0 * step);
        }
    }
    if hess.as_slice().iter().any(|v| !v.is_finite()) {
        return Err(ModelError::Hessian("non-finite entries".into()));
    }
    Ok(hess)
}

/// Checks `P(A+BK) + (A+BK)ᵀP ≺ 0` with `A = ∂f/∂x(0)`, `B = g(0)`, `P = ∇²V(0)`.
pub fn check_linearization(spec: &SystemSpec, k: &Matrix) -> Result<LinearizationReport, ModelError> {
    let f = spec.drift_field().ok_or(ModelError::ClosedLoopMode)?;
    let (n, m) = (spec.n, spec.m);
    if k.rows() != m || k.cols() != n {
        return Err(ModelError::Dimension(format!(
            "gain is {}×{}, expected {m}×{n}",
            k.rows(),
            k.cols()
        )));
    }
    let zero = vec![0.0; n];
    let a = f
        .jacobian(&zero)
        .map(|(j, _)| j)
        .or_else(|_| crate::field::fd_jacobian(&f, &zero))
        .map_err(|e| ModelError::Invalid(format!("∂f/∂x at 0: {e}")))?;
    let b = spec
        .input_matrix(&zero)
        .map_err(|e| ModelError::Invalid(format!("g(0): {e}")))?;

    let raw = hessian(spec, &zero, HESSIAN_STEP)?;
    let scale = raw.max_abs().max(f64::MIN_POSITIVE);
    let asymmetry = raw.max_abs_diff(&raw.transpose()) / scale;
    let p = raw.symmetrized();
    let (p_pivots, p_ok) = p.cholesky_pivots();
    // Pivots at the level of the difference-quotient truncation error mean V is flat to
    // second order.
    let floor = 1e-6 * p.max_abs().max(1.0);
    if !p_ok || p_pivots.iter().any(|&d| d <= floor) {
        return Err(ModelError::HessianNotPositive { pivots: p_pivots });
    }

    let abar = a.add(&b.matmul(k));
    let mm = p.matmul(&abar).add(&abar.transpose().matmul(&p));
    let (pivots, pass) = mm.scale(-1.0).cholesky_pivots();
    let min_pivot = pivots.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(LinearizationReport {
        a,
        b,
        k: k.clone(),
        p,
        m: mm,
        pass,
        min_pivot,
        asymmetry,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct ProbeRow {
    pub eps: f64,
    /// Largest tested radius for which every sample passed; 0 when none did.
    pub delta: f64,
    pub pass: bool,
    /// A failing sample at the smallest tested radius, when the probe failed.
    pub counterexample: Option<Vec<f64>>,
}

fn ball_directions(n: usize) -> Vec<Vec<f64>> {
    let mut seq = Halton::unshifted(n);
    let cube = vec![(-1.0, 1.0); n];
    let mut out = Vec::with_capacity(PROBE_SAMPLES);
    while out.len() < PROBE_SAMPLES {
        let p = seq.next_in_box(&cube);
        let r = norm2(&p);
        if r > 0.0 && r <= 1.0 {
            out.push(p);
        }
    }
    out
}

/// For each `ε`, the largest radius `δ` on the grid `δ_max·2^{-k}` such that every sampled
/// `x` with `0 < |x| < δ` admits `|u|∞ < ε` with `L_fV + L_gV·u < 0`. `ε = ∞` drops the
/// bound.
pub fn small_control_probe(spec: &SystemSpec, eps_list: &[f64]) -> Result<Vec<ProbeRow>, ModelError> {
    if !spec.is_control_affine() {
        return Err(ModelError::ClosedLoopMode);
    }
    let unit = ball_directions(spec.n);
    let delta_max = spec
        .domain_box
        .iter()
        .map(|(lo, hi)| lo.abs().min(hi.abs()))
        .fold(f64::INFINITY, f64::min);
    let grid: Vec<f64> = (0..PROBE_LEVELS).map(|k| delta_max * 0.5f64.powi(k as i32)).collect();

    let first_failure = |eps: f64, delta: f64| -> Option<Vec<f64>> {
        unit.iter().find_map(|d| {
            let x: Vec<f64> = d.iter().map(|v| v * delta).collect();
            let ok = match lie_rows(spec, &x) {
                Ok(rows) => {
                    if eps.is_infinite() {
                        rows.a.iter().any(|v| *v != 0.0) || rows.a0 < 0.0
                    } else {
                        margin_box(rows.a0, &rows.a, eps).0 > 0.0
                    }
                }
                Err(_) => false,
            };
            (!ok).then_some(x)
        })
    };

    let mut rows = Vec::with_capacity(eps_list.len());
    for &eps in eps_list {
        // Index of the largest passing radius, assuming the pass set is closed under
        // shrinking the radius.
        let last = grid.len() - 1;
        let row = match first_failure(eps, grid[last]) {
            Some(cx) => ProbeRow {
                eps,
                delta: 0.0,
                pass: false,
                counterexample: Some(cx),
            },
            None => {
                let (mut lo, mut hi) = (0usize, last);
                if first_failure(eps, grid[0]).is_none() {
                    hi = 0;
                }
                // Invariant: grid[hi] passes, grid[lo] fails (unless hi == 0).
                while hi > 0 && hi - lo > 1 {
                    let mid = (lo + hi) / 2;
                    if first_failure(eps, grid[mid]).is_none() {
                        hi = mid;
                    } else {
                        lo = mid;
                    }
                }
                ProbeRow {
                    eps,
                    delta: grid[hi],
                    pass: true,
                    counterexample: None,
                }
            }
        };
        rows.push(row);
    }
    Ok(rows)
}
