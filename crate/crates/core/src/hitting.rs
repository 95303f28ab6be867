//! Hitting time `T(x)` of the boundary `∂C = {h = 0}` along the closed-loop flow: positive
//! outside `C` (forward crossing), negative inside (backward crossing), zero on `∂C`.
//!
//! The gradient follows from differentiating `h(φ(T(x), x)) = 0`:
//! `∇T(x) = −Φ(T)ᵀ∇h(x_hit) / (∇h(x_hit)·F(x_hit))` with `Φ` the variational flow.

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::export::{indexed, Cell, Csv};
use crate::expr::{Expr, ExprError};
use crate::field::{FieldError, JacobianSource, VectorField};
use crate::linalg::{dot, norm2, ols_slope, Matrix};
use crate::model::AnalysisTolerances;
use crate::ode::{self, Direction, EventOutcome, OdeError, Trajectory};

/// Relative tolerance of the `T = 0` branch: `|h(x)| ≤ 1e-9·(1 + |∇h(x)||x|)`.
pub const BOUNDARY_REL_TOL: f64 = 1e-9;
/// Transversality guard: `∇h·F ≥ 1e-8·|∇h||F|` at the hit point.
pub const TRANSVERSALITY: f64 = 1e-8;

#[derive(Debug, Clone, Error)]
pub enum HittingError {
    #[error("|x| = {norm} is below r_min = {r_min}")]
    OriginTooClose { norm: f64, r_min: f64 },
    #[error("no boundary crossing within |t| ≤ {t_max}")]
    NoCrossing { t_max: f64 },
    #[error("integration failed: {0}")]
    IntegrationFailed(OdeError),
    #[error("evaluating h at {x:?}: {source}")]
    Barrier { x: Vec<f64>, source: ExprError },
    #[error("vector field at {x:?}: {source}")]
    Field { x: Vec<f64>, source: FieldError },
    #[error("non-transversal crossing at {x_hit:?}: ∇h·F = {denom}, |∇h||F| = {scale}")]
    Transversality { x_hit: Vec<f64>, denom: f64, scale: f64 },
    #[error("h changes sign {count} more time(s) after the first crossing")]
    MultipleCrossings { count: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum HitStatus {
    Ok,
    NoCrossing,
    OriginTooClose,
    IntegrationFailed,
    Transversality,
}

impl HitStatus {
    pub fn name(self) -> &'static str {
        match self {
            HitStatus::Ok => "ok",
            HitStatus::NoCrossing => "no_crossing",
            HitStatus::OriginTooClose => "origin_too_close",
            HitStatus::IntegrationFailed => "integration_failed",
            HitStatus::Transversality => "transversality",
        }
    }
}

impl HittingError {
    pub fn status(&self) -> HitStatus {
        match self {
            HittingError::OriginTooClose { .. } => HitStatus::OriginTooClose,
            HittingError::NoCrossing { .. } => HitStatus::NoCrossing,
            HittingError::Transversality { .. } => HitStatus::Transversality,
            _ => HitStatus::IntegrationFailed,
        }
    }
}

#[derive(Debug, Clone)]
pub struct HittingResult {
    pub x: Vec<f64>,
    /// Signed hitting time.
    pub t: f64,
    pub x_hit: Vec<f64>,
    /// `∇h(x_hit)·F(x_hit)`; positive for an inward crossing.
    pub denom: f64,
    pub grad_h_hit: Vec<f64>,
    pub field_hit: Vec<f64>,
    /// Path from `x` to `x_hit` (absent on the `T = 0` branch).
    pub path: Option<Trajectory>,
}

fn h_value(h: &Expr, x: &[f64]) -> Result<f64, HittingError> {
    h.eval(x).map_err(|source| HittingError::Barrier { x: x.to_vec(), source })
}

fn h_grad(h: &Expr, x: &[f64]) -> Result<Vec<f64>, HittingError> {
    h.grad(x).map_err(|source| HittingError::Barrier { x: x.to_vec(), source })
}

fn field_at<F: VectorField + ?Sized>(field: &F, x: &[f64]) -> Result<Vec<f64>, HittingError> {
    field.eval(x).map_err(|source| HittingError::Field { x: x.to_vec(), source })
}

/// `|h(x)| ≤ 1e-9·(1 + |∇h(x)||x|)`.
pub fn on_boundary(h: &Expr, x: &[f64]) -> Result<bool, HittingError> {
    let hv = h_value(h, x)?;
    let g = h_grad(h, x)?;
    Ok(hv.abs() <= BOUNDARY_REL_TOL * (1.0 + norm2(&g) * norm2(x)))
}

/// First crossing of `h = 0`: forward from outside `C`, backward from inside.
pub fn hitting_time<F: VectorField + ?Sized>(
    field: &F,
    h: &Expr,
    x: &[f64],
    caps: &AnalysisTolerances,
) -> Result<HittingResult, HittingError> {
    let r = norm2(x);
    if r < caps.r_min {
        return Err(HittingError::OriginTooClose {
            norm: r,
            r_min: caps.r_min,
        });
    }
    let hv = h_value(h, x)?;
    let (t, x_hit, path) = if on_boundary(h, x)? {
        (0.0, x.to_vec(), None)
    } else {
        let direction = if hv < 0.0 { Direction::Forward } else { Direction::Backward };
        let event = |y: &[f64]| h.eval(y).map_err(FieldError::from);
        match ode::detect_event(field, x, event, caps.t_max, direction, caps.ode) {
            Ok(EventOutcome::Hit { t, x: xh, trajectory }) => (t, xh, Some(trajectory)),
            Ok(EventOutcome::NoEvent { .. }) => return Err(HittingError::NoCrossing { t_max: caps.t_max }),
            Err(e) => return Err(HittingError::IntegrationFailed(e)),
        }
    };
    let grad_h_hit = h_grad(h, &x_hit)?;
    let field_hit = field_at(field, &x_hit)?;
    let denom = dot(&grad_h_hit, &field_hit);
    if !(denom > 0.0) {
        return Err(HittingError::Transversality {
            x_hit,
            denom,
            scale: norm2(&grad_h_hit) * norm2(&field_hit),
        });
    }
    Ok(HittingResult {
        x: x.to_vec(),
        t,
        x_hit,
        denom,
        grad_h_hit,
        field_hit,
        path,
    })
}

#[derive(Debug, Clone)]
pub struct HittingGradient {
    pub hit: HittingResult,
    pub grad: Vec<f64>,
    /// `Φ(T) = ∂φ(T, x)/∂x`.
    pub phi: Matrix,
    pub jacobian: JacobianSource,
}

/// `∇T(x)` by the quotient formula, integrating the variational system over `[0, T(x)]`.
pub fn grad_hitting_time<F: VectorField + ?Sized>(
    field: &F,
    h: &Expr,
    x: &[f64],
    caps: &AnalysisTolerances,
) -> Result<HittingGradient, HittingError> {
    let hit = hitting_time(field, h, x, caps)?;
    let n = x.len();
    let (_, jacobian) = field
        .jacobian(x)
        .map_err(|source| HittingError::Field { x: x.to_vec(), source })?;
    let phi = if hit.t == 0.0 {
        Matrix::identity(n)
    } else {
        ode::integrate_variational(field, x, (0.0, hit.t), caps.ode)
            .map_err(HittingError::IntegrationFailed)?
            .final_phi()
    };
    let scale = norm2(&hit.grad_h_hit) * norm2(&hit.field_hit);
    if hit.denom < TRANSVERSALITY * scale {
        return Err(HittingError::Transversality {
            x_hit: hit.x_hit.clone(),
            denom: hit.denom,
            scale,
        });
    }
    let grad = phi.tr_matvec(&hit.grad_h_hit).into_iter().map(|v| -v / hit.denom).collect();
    Ok(HittingGradient {
        hit,
        grad,
        phi,
        jacobian,
    })
}

/// Central differences of `T` with step `step` (default `1e-5·max(1, |x|)`).
pub fn grad_t_fd<F: VectorField + ?Sized>(
    field: &F,
    h: &Expr,
    x: &[f64],
    step: Option<f64>,
    caps: &AnalysisTolerances,
) -> Result<Vec<f64>, HittingError> {
    let step = step.unwrap_or(1e-5 * norm2(x).max(1.0));
    let mut p = x.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for j in 0..x.len() {
        p[j] = x[j] + step;
        let plus = hitting_time(field, h, &p, caps)?.t;
        p[j] = x[j] - step;
        let minus = hitting_time(field, h, &p, caps)?.t;
        p[j] = x[j];
        grad.push((plus - minus) / (2.0 * step));
    }
    Ok(grad)
}

/// Continues the flow past the first crossing up to `|t| = t_max` (or until it leaves
/// `domain` or the integration fails) and counts further sign changes of `h`.
pub fn extra_crossings<F: VectorField + ?Sized>(
    field: &F,
    h: &Expr,
    hit: &HittingResult,
    domain: &[(f64, f64)],
    caps: &AnalysisTolerances,
) -> Result<usize, HittingError> {
    if hit.t == 0.0 && hit.path.is_none() {
        // Both directions leave ∂C from a boundary start.
        let mut total = 0;
        for end in [caps.t_max, -caps.t_max] {
            total += crossings_after(field, h, &hit.x_hit, 0.0, end, domain, caps)?;
        }
        return Ok(total);
    }
    let end = if hit.t > 0.0 { caps.t_max } else { -caps.t_max };
    crossings_after(field, h, &hit.x_hit, hit.t, end, domain, caps)
}

fn crossings_after<F: VectorField + ?Sized>(
    field: &F,
    h: &Expr,
    start: &[f64],
    t0: f64,
    t1: f64,
    domain: &[(f64, f64)],
    caps: &AnalysisTolerances,
) -> Result<usize, HittingError> {
    if t0 == t1 {
        return Ok(0);
    }
    let traj = match ode::integrate(field, start, (t0, t1), caps.ode) {
        Ok(t) => t,
        Err(e) => match e.partial() {
            Some(p) => p.clone(),
            None => return Ok(0),
        },
    };
    // Past the crossing the flow must stay on the side it moved to.
    let expected = if t1 > t0 { 1.0 } else { -1.0 };
    let inside_box = |x: &[f64]| x.iter().zip(domain).all(|(v, (lo, hi))| v >= lo && v <= hi);
    let mut count = 0;
    let mut wrong_side = false;
    for seg in traj.segments() {
        let x = &seg.state_end;
        if !inside_box(x) {
            break;
        }
        let hv = h_value(h, x)?;
        let scale = BOUNDARY_REL_TOL * (1.0 + norm2(&h_grad(h, x)?) * norm2(x));
        let now_wrong = hv * expected < -scale;
        if now_wrong != wrong_side {
            count += 1;
            wrong_side = now_wrong;
        }
    }
    Ok(count)
}

/// One row of a batch hitting-time export.
#[derive(Debug, Clone, Serialize)]
pub struct HitRow {
    pub x: Vec<f64>,
    pub t: Option<f64>,
    pub x_hit: Option<Vec<f64>>,
    pub grad: Option<Vec<f64>>,
    pub status: HitStatus,
    pub message: Option<String>,
}

/// Hitting times (and optionally quotient gradients) for a batch of points, in input order.
pub fn hitting_batch<F: VectorField + ?Sized>(
    field: &F,
    h: &Expr,
    points: &[Vec<f64>],
    gradients: bool,
    caps: &AnalysisTolerances,
) -> Vec<HitRow> {
    points
        .par_iter()
        .map(|x| {
            let out = if gradients {
                grad_hitting_time(field, h, x, caps).map(|g| (g.hit, Some(g.grad)))
            } else {
                hitting_time(field, h, x, caps).map(|r| (r, None))
            };
            match out {
                Ok((hit, grad)) => HitRow {
                    x: x.clone(),
                    t: Some(hit.t),
                    x_hit: Some(hit.x_hit),
                    grad,
                    status: HitStatus::Ok,
                    message: None,
                },
                Err(e) => HitRow {
                    x: x.clone(),
                    t: None,
                    x_hit: None,
                    grad: None,
                    status: e.status(),
                    message: Some(e.to_string()),
                },
            }
        })
        .collect()
}

/// `x1..xn,T,xhit1..xhitn[,gradT1..gradTn],status`; failed rows carry `nan`.
pub fn batch_csv(rows: &[HitRow], n: usize, gradients: bool) -> String {
    let mut header = indexed("x", n);
    header.push("T".into());
    header.extend(indexed("xhit", n));
    if gradients {
        header.extend(indexed("gradT", n));
    }
    header.push("status".into());
    let mut csv = Csv::new(&header);
    let nan = vec![f64::NAN; n];
    for r in rows {
        let mut cells: Vec<Cell<'_>> = r.x.iter().map(|v| Cell::Num(*v)).collect();
        cells.push(Cell::Num(r.t.unwrap_or(f64::NAN)));
        cells.extend(r.x_hit.as_ref().unwrap_or(&nan).iter().map(|v| Cell::Num(*v)));
        if gradients {
            cells.extend(r.grad.as_ref().unwrap_or(&nan).iter().map(|v| Cell::Num(*v)));
        }
        cells.push(Cell::Text(r.status.name()));
        csv.row(&cells);
    }
    csv.finish()
}

#[derive(Debug, Clone, Serialize)]
pub struct GrowthProbe {
    pub direction: Vec<f64>,
    /// Strictly decreasing radii `r_start·2^{-k}`.
    pub radii: Vec<f64>,
    pub grad_norms: Vec<f64>,
    pub times: Vec<f64>,
    /// Least-squares slope of `log|∇T|` against `log r`.
    pub slope: f64,
    /// Least-squares slope of `|T|` against `log(1/r)`.
    pub time_slope: f64,
}

impl GrowthProbe {
    /// `r,grad_norm,T`.
    pub fn to_csv(&self) -> String {
        let mut csv = Csv::new(&["r", "grad_norm", "T"]);
        for ((r, g), t) in self.radii.iter().zip(&self.grad_norms).zip(&self.times) {
            csv.row(&[Cell::Num(*r), Cell::Num(*g), Cell::Num(*t)]);
        }
        csv.finish()
    }
}

/// Samples `|∇T|` and `T` at `x = r·direction` for `r = r_start·2^{-k}`, `k = 0..=k_max`.
pub fn growth_probe<F: VectorField + ?Sized>(
    field: &F,
    h: &Expr,
    direction: &[f64],
    r_start: f64,
    k_max: usize,
    caps: &AnalysisTolerances,
) -> Result<GrowthProbe, HittingError> {
    let nd = norm2(direction);
    let dir: Vec<f64> = direction.iter().map(|v| v / nd).collect();
    let radii: Vec<f64> = (0..=k_max).map(|k| r_start * 0.5f64.powi(k as i32)).collect();
    let evals = radii
        .par_iter()
        .map(|r| {
            let x: Vec<f64> = dir.iter().map(|v| r * v).collect();
            grad_hitting_time(field, h, &x, caps).map(|g| (norm2(&g.grad), g.hit.t))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let grad_norms: Vec<f64> = evals.iter().map(|e| e.0).collect();
    let times: Vec<f64> = evals.iter().map(|e| e.1).collect();
    let log_r: Vec<f64> = radii.iter().map(|r| r.ln()).collect();
    let log_g: Vec<f64> = grad_norms.iter().map(|g| g.ln()).collect();
    let log_inv_r: Vec<f64> = radii.iter().map(|r| -r.ln()).collect();
    let abs_t: Vec<f64> = times.iter().map(|t| t.abs()).collect();
    Ok(GrowthProbe {
        direction: dir,
        slope: ols_slope(&log_r, &log_g).unwrap_or(f64::NAN),
        time_slope: ols_slope(&log_inv_r, &abs_t).unwrap_or(f64::NAN),
        radii,
        grad_norms,
        times,
    })
}
