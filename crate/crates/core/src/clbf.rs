//! The unified Lyapunov-barrier function `W(x) = V(x)/V(φ(T(x), x))`.
//!
//! Along a trajectory the denominator is constant, so `W` decreases exactly as `V` does and
//! equals 1 precisely on `∂C`. `ω = −∇V·F` and `ω₁ = ω/V(x_hit)` give the decrease rate:
//! `∇W·F = −ω₁`.

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::compat::{sample_boundary, strict_feasible, CompatError, Mode};
use crate::control::ClosedLoop;
use crate::export::{indexed, Cell, Csv};
use crate::expr::ExprError;
use crate::field::{FieldError, VectorField};
use crate::hitting::{hitting_time, HitStatus, HittingError, BOUNDARY_REL_TOL};
use crate::linalg::{dot, norm2};
use crate::model::SystemSpec;
use crate::ode::{self, OdeError};
use crate::sampling::Halton;

const D_MIN_SAMPLES: usize = 64;

#[derive(Debug, Clone, Error)]
pub enum ClbfError {
    #[error(transparent)]
    Hitting(#[from] HittingError),
    #[error("V(x_hit) = {value} at {x_hit:?} is below the guard {d_min}; V vanishes on ∂C")]
    Denominator { x_hit: Vec<f64>, value: f64, d_min: f64 },
    #[error("V does not decrease along the flow between {x:?} and ∂C")]
    LyapunovViolation { x: Vec<f64> },
    #[error("smoothing exponent p = {0} must be at least 1")]
    InvalidExponent(f64),
    #[error("cannot smooth the negative value {0}")]
    NegativeValue(f64),
    #[error("evaluating V at {x:?}: {source}")]
    Expr { x: Vec<f64>, source: ExprError },
    #[error("vector field at {x:?}: {source}")]
    Field { x: Vec<f64>, source: FieldError },
    #[error("flow integration failed: {0}")]
    Flow(OdeError),
    #[error(transparent)]
    Sampling(#[from] CompatError),
    #[error("finite-difference gradient does not settle at {x:?}")]
    GradientUnresolved { x: Vec<f64> },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Ok,
    OriginTooClose,
    NoCrossing,
    IntegrationFailed,
    Transversality,
    LyapunovViolation,
    DenominatorGuard,
    GradientUnresolved,
    Invalid,
}

impl Status {
    pub fn name(self) -> &'static str {
        match self {
            Status::Ok => "ok",
            Status::OriginTooClose => "origin_too_close",
            Status::NoCrossing => "no_crossing",
            Status::IntegrationFailed => "integration_failed",
            Status::Transversality => "transversality",
            Status::LyapunovViolation => "lyapunov_violation",
            Status::DenominatorGuard => "denominator_guard",
            Status::GradientUnresolved => "gradient_unresolved",
            Status::Invalid => "invalid",
        }
    }
}

impl ClbfError {
    pub fn status(&self) -> Status {
        match self {
            ClbfError::Hitting(h) => match h.status() {
                HitStatus::OriginTooClose => Status::OriginTooClose,
                HitStatus::NoCrossing => Status::NoCrossing,
                HitStatus::Transversality => Status::Transversality,
                HitStatus::IntegrationFailed | HitStatus::Ok => Status::IntegrationFailed,
            },
            ClbfError::Denominator { .. } => Status::DenominatorGuard,
            ClbfError::LyapunovViolation { .. } => Status::LyapunovViolation,
            ClbfError::Flow(_) | ClbfError::Field { .. } => Status::IntegrationFailed,
            ClbfError::GradientUnresolved { .. } => Status::GradientUnresolved,
            _ => Status::Invalid,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Region {
    Inside,
    Boundary,
    Outside,
}

impl Region {
    pub fn name(self) -> &'static str {
        match self {
            Region::Inside => "inside",
            Region::Boundary => "boundary",
            Region::Outside => "outside",
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ClbfEvaluation {
    pub x: Vec<f64>,
    pub t_hit: f64,
    pub x_hit: Vec<f64>,
    /// `V(x_hit)`.
    pub denominator: f64,
    pub omega: f64,
    pub omega1: f64,
    pub w: f64,
    pub region: Region,
    pub pde_residual: Option<f64>,
}

/// Something that assigns a candidate certificate value to a state.
pub trait Evaluator: Sync {
    fn value(&self, x: &[f64]) -> Result<f64, ClbfError>;

    fn name(&self) -> String;

    /// `|d/dt value(φ(t,x)) + rate(x)|` at `t = 0`, when the evaluator has a known decrease
    /// rate.
    fn pde_residual(&self, _x: &[f64]) -> Option<Result<f64, ClbfError>> {
        None
    }
}

/// Builds `W` for a model and its closed loop.
pub struct ClbfBuilder<'a> {
    spec: &'a SystemSpec,
    field: &'a ClosedLoop<'a>,
    d_min: f64,
}

impl<'a> ClbfBuilder<'a> {
    /// `d_min = 1e-9·max V` over boundary samples.
    pub fn new(spec: &'a SystemSpec, field: &'a ClosedLoop<'a>) -> Result<Self, ClbfError> {
        let pts = sample_boundary(spec, D_MIN_SAMPLES, 0)?;
        let mut vmax: f64 = 0.0;
        for p in &pts {
            vmax = vmax.max(v_at(spec, p)?);
        }
        Ok(ClbfBuilder {
            spec,
            field,
            d_min: 1e-9 * vmax,
        })
    }

    pub fn with_d_min(spec: &'a SystemSpec, field: &'a ClosedLoop<'a>, d_min: f64) -> Self {
        ClbfBuilder { spec, field, d_min }
    }

    pub fn spec(&self) -> &SystemSpec {
        self.spec
    }

    pub fn field(&self) -> &ClosedLoop<'a> {
        self.field
    }

    pub fn d_min(&self) -> f64 {
        self.d_min
    }

    fn omega(&self, x: &[f64]) -> Result<f64, ClbfError> {
        let gv = self.spec.grad_v(x).map_err(|source| ClbfError::Expr { x: x.to_vec(), source })?;
        let f = self
            .field
            .eval(x)
            .map_err(|source| ClbfError::Field { x: x.to_vec(), source })?;
        Ok(-dot(&gv, &f))
    }

    fn region(&self, x: &[f64]) -> Result<Region, ClbfError> {
        let h = self.spec.h(x).map_err(|source| ClbfError::Expr { x: x.to_vec(), source })?;
        let gh = self.spec.grad_h(x).map_err(|source| ClbfError::Expr { x: x.to_vec(), source })?;
        Ok(if h.abs() <= BOUNDARY_REL_TOL * (1.0 + norm2(&gh) * norm2(x)) {
            Region::Boundary
        } else if h > 0.0 {
            Region::Inside
        } else {
            Region::Outside
        })
    }

    /// `W(x)`, `ω(x)`, `ω₁(x)`. `W(0) = 0`. Points whose arc to `∂C` has `ω ≤ 0` somewhere
    /// (so `V` fails to decrease there) are rejected with a Lyapunov violation.
    pub fn evaluate(&self, x: &[f64]) -> Result<ClbfEvaluation, ClbfError> {
        if x.iter().all(|v| *v == 0.0) {
            return Ok(ClbfEvaluation {
                x: x.to_vec(),
                t_hit: f64::NEG_INFINITY,
                x_hit: Vec::new(),
                denominator: f64::NAN,
                omega: 0.0,
                omega1: 0.0,
                w: 0.0,
                region: Region::Inside,
                pde_residual: None,
            });
        }
        let hit = hitting_time(self.field, &self.spec.barrier, x, &self.spec.tolerances)?;
        let d = v_at(self.spec, &hit.x_hit)?;
        if !(d >= self.d_min) || d <= 0.0 {
            return Err(ClbfError::Denominator {
                x_hit: hit.x_hit,
                value: d,
                d_min: self.d_min,
            });
        }
        let vx = v_at(self.spec, x)?;
        let omega = self.omega(x)?;
        if vx <= 0.0 || omega <= 0.0 {
            return Err(ClbfError::LyapunovViolation { x: x.to_vec() });
        }
        if let Some(path) = &hit.path {
            for (_, y) in path.nodes() {
                if self.omega(y)? <= 0.0 {
                    return Err(ClbfError::LyapunovViolation { x: x.to_vec() });
                }
            }
        }
        Ok(ClbfEvaluation {
            x: x.to_vec(),
            t_hit: hit.t,
            x_hit: hit.x_hit,
            denominator: d,
            omega,
            omega1: omega / d,
            w: vx / d,
            region: self.region(x)?,
            pde_residual: None,
        })
    }

    pub fn w(&self, x: &[f64]) -> Result<f64, ClbfError> {
        Ok(self.evaluate(x)?.w)
    }

    /// `φ(t, x)`.
    pub fn flow(&self, x: &[f64], t: f64) -> Result<Vec<f64>, ClbfError> {
        if t == 0.0 {
            return Ok(x.to_vec());
        }
        let tr = ode::integrate(self.field, x, (0.0, t), self.spec.tolerances.ode).map_err(ClbfError::Flow)?;
        Ok(tr.final_state().to_vec())
    }

    /// `|(W(φ(dt,x)) − W(φ(−dt,x)))/(2dt) + ω₁(x)|`, default `dt = 1e-5·(1 + |T(x)|)`.
    pub fn pde_residual(&self, x: &[f64], dt: Option<f64>) -> Result<f64, ClbfError> {
        let e = self.evaluate(x)?;
        let dt = dt.unwrap_or(1e-5 * (1.0 + e.t_hit.abs()));
        let wp = self.w(&self.flow(x, dt)?)?;
        let wm = self.w(&self.flow(x, -dt)?)?;
        Ok(((wp - wm) / (2.0 * dt) + e.omega1).abs())
    }

    /// `∫₀^{t_end} ω₁(φ(t, x)) dt` by composite Simpson on the dense output, which should
    /// reproduce `W(x) − W(φ(t_end, x))`. Returns the integral and `W(φ(t_end, x))`, the
    /// neglected tail.
    pub fn converse_integral(&self, x: &[f64], t_end: f64, panels: usize) -> Result<(f64, f64), ClbfError> {
        let e = self.evaluate(x)?;
        let tr = ode::integrate(self.field, x, (0.0, t_end), self.spec.tolerances.ode).map_err(ClbfError::Flow)?;
        let panels = panels.max(2) & !1;
        let dt = t_end / panels as f64;
        let mut sum = 0.0;
        for k in 0..=panels {
            let y = tr.interpolate(k as f64 * dt).map_err(ClbfError::Flow)?;
            let wgt = if k == 0 || k == panels {
                1.0
            } else if k % 2 == 1 {
                4.0
            } else {
                2.0
            };
            sum += wgt * self.omega(&y)?;
        }
        let integral = sum * dt / 3.0 / e.denominator;
        let tail = v_at(self.spec, tr.final_state())? / e.denominator;
        Ok((integral, tail))
    }
}

fn v_at(spec: &SystemSpec, x: &[f64]) -> Result<f64, ClbfError> {
    spec.v(x).map_err(|source| ClbfError::Expr { x: x.to_vec(), source })
}

impl Evaluator for ClbfBuilder<'_> {
    fn value(&self, x: &[f64]) -> Result<f64, ClbfError> {
        self.w(x)
    }

    fn name(&self) -> String {
        "W".into()
    }

    fn pde_residual(&self, x: &[f64]) -> Option<Result<f64, ClbfError>> {
        Some(ClbfBuilder::pde_residual(self, x, None))
    }
}

impl<E: Evaluator + ?Sized> Evaluator for &E {
    fn value(&self, x: &[f64]) -> Result<f64, ClbfError> {
        (**self).value(x)
    }

    fn name(&self) -> String {
        (**self).name()
    }

    fn pde_residual(&self, x: &[f64]) -> Option<Result<f64, ClbfError>> {
        (**self).pde_residual(x)
    }
}

/// The unnormalised Lyapunov function itself; a negative control for the verifier.
pub struct RawV<'a>(pub &'a SystemSpec);

impl Evaluator for RawV<'_> {
    fn value(&self, x: &[f64]) -> Result<f64, ClbfError> {
        v_at(self.0, x)
    }

    fn name(&self) -> String {
        "V".into()
    }
}

/// `ρ∘E` with `ρ(s) = s^p`.
pub struct Smoothed<E> {
    inner: E,
    p: f64,
}

impl<E> Smoothed<E> {
    pub fn p(&self) -> f64 {
        self.p
    }

    pub fn inner(&self) -> &E {
        &self.inner
    }
}

/// `ρ(s) = s^p` for `s ≥ 0`.
pub fn rho(s: f64, p: f64) -> f64 {
    s.powf(p)
}

/// `ρ'(s) = p·s^{p−1}`.
pub fn rho_prime(s: f64, p: f64) -> f64 {
    if p == 1.0 {
        1.0
    } else {
        p * s.powf(p - 1.0)
    }
}

/// Composes an evaluator with `ρ(s) = s^p`. For `p ≥ 1`, `ρ` is class-K∞ with `ρ(1) = 1`
/// and `ρ(s) ≤ s·ρ'(s)`, so the unit level set and the decrease direction are preserved.
pub fn smooth_compose<E: Evaluator>(inner: E, p: f64) -> Result<Smoothed<E>, ClbfError> {
    if !(p >= 1.0) || !p.is_finite() {
        return Err(ClbfError::InvalidExponent(p));
    }
    Ok(Smoothed { inner, p })
}

impl<E: Evaluator> Evaluator for Smoothed<E> {
    fn value(&self, x: &[f64]) -> Result<f64, ClbfError> {
        let s = self.inner.value(x)?;
        if s < 0.0 {
            return Err(ClbfError::NegativeValue(s));
        }
        Ok(rho(s, self.p))
    }

    fn name(&self) -> String {
        format!("({})^{}", self.inner.name(), self.p)
    }
}

/// Axis-aligned tensor grid; the first coordinate varies slowest.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GridSpec {
    pub ranges: Vec<(f64, f64)>,
    pub counts: Vec<usize>,
}

impl GridSpec {
    pub fn points(&self) -> Vec<Vec<f64>> {
        let axes: Vec<Vec<f64>> = self
            .ranges
            .iter()
            .zip(&self.counts)
            .map(|(&(lo, hi), &c)| match c {
                0 => Vec::new(),
                1 => vec![lo],
                _ => (0..c)
                    .map(|k| if k + 1 == c { hi } else { lo + (hi - lo) * k as f64 / (c - 1) as f64 })
                    .collect(),
            })
            .collect();
        let mut out: Vec<Vec<f64>> = vec![Vec::new()];
        for axis in &axes {
            out = out
                .into_iter()
                .flat_map(|p| {
                    axis.iter().map(move |v| {
                        let mut q = p.clone();
                        q.push(*v);
                        q
                    })
                })
                .collect();
        }
        out
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct GridPoint {
    pub x: Vec<f64>,
    pub h: f64,
    pub v: f64,
    pub w: f64,
    pub omega1: f64,
    pub region: Region,
    pub status: Status,
}

/// Evaluates `W` at every grid point (row-major); failures are recorded per point.
pub fn clbf_grid(builder: &ClbfBuilder<'_>, grid: &GridSpec) -> Vec<GridPoint> {
    let spec = builder.spec;
    grid.points()
        .into_par_iter()
        .map(|x| {
            let h = spec.h(&x).unwrap_or(f64::NAN);
            let v = spec.v(&x).unwrap_or(f64::NAN);
            let region = builder.region(&x).unwrap_or(if h > 0.0 { Region::Inside } else { Region::Outside });
            match builder.evaluate(&x) {
                Ok(e) => GridPoint {
                    x,
                    h,
                    v,
                    w: e.w,
                    omega1: e.omega1,
                    region,
                    status: Status::Ok,
                },
                Err(err) => GridPoint {
                    x,
                    h,
                    v,
                    w: f64::NAN,
                    omega1: f64::NAN,
                    region,
                    status: err.status(),
                },
            }
        })
        .collect()
}

/// `x1..xn,h,V,W,omega1,region,status`.
pub fn grid_csv(points: &[GridPoint], n: usize) -> String {
    let mut header = indexed("x", n);
    for c in ["h", "V", "W", "omega1", "region", "status"] {
        header.push(c.into());
    }
    let mut csv = Csv::new(&header);
    for p in points {
        let mut cells: Vec<Cell<'_>> = p.x.iter().map(|v| Cell::Num(*v)).collect();
        cells.extend([
            Cell::Num(p.h),
            Cell::Num(p.v),
            Cell::Num(p.w),
            Cell::Num(p.omega1),
            Cell::Text(p.region.name()),
            Cell::Text(p.status.name()),
        ]);
        csv.row(&cells);
    }
    csv.finish()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct VerifyTolerances {
    /// `|W − 1| ≤ tol_boundary` on `∂C`.
    pub tol_boundary: f64,
    /// Strict separation from 1 away from `∂C`.
    pub tol_sep: f64,
    /// Samples with `|h| < h_margin` are not classified.
    pub h_margin: f64,
}

impl Default for VerifyTolerances {
    fn default() -> Self {
        VerifyTolerances {
            tol_boundary: 1e-7,
            tol_sep: 1e-6,
            h_margin: 1e-3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct SampleCounts {
    pub boundary: usize,
    pub interior: usize,
    pub exterior: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct Verdicts {
    /// Decrease: some input makes `∇W·(f + g u) < 0` (or `∇W·F < 0` in closed-loop mode).
    pub decrease: bool,
    /// `W < 1` strictly inside and `W > 1` strictly outside.
    pub sublevel: bool,
    /// `W = 1` on `∂C`.
    pub level_set: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct Skipped {
    pub x: Vec<f64>,
    pub status: Status,
}

#[derive(Debug, Clone, Serialize)]
pub struct ClbfReport {
    pub evaluator: String,
    pub pass: bool,
    pub verdicts: Verdicts,
    pub tolerances: VerifyTolerances,
    pub requested: SampleCounts,
    pub evaluated: SampleCounts,
    pub boundary_max_abs_w_minus_1: f64,
    pub interior_max_w: f64,
    pub exterior_min_w: f64,
    pub max_pde_residual: Option<f64>,
    pub decrease_failures: usize,
    pub decrease_counterexamples: Vec<Vec<f64>>,
    pub level_set_counterexamples: Vec<Vec<f64>>,
    pub skipped: Vec<Skipped>,
}

/// Step refinements tried after the initial `1e-5·max(1, |x|)`.
const FD_REFINEMENTS: usize = 4;
/// Successive estimates must agree to this relative tolerance.
const FD_AGREEMENT: f64 = 0.1;

fn fd_gradient<E: Evaluator + ?Sized>(ev: &E, x: &[f64], step: f64) -> Result<Vec<f64>, ClbfError> {
    let mut p = x.to_vec();
    let mut g = Vec::with_capacity(x.len());
    for j in 0..x.len() {
        p[j] = x[j] + step;
        let plus = ev.value(&p)?;
        p[j] = x[j] - step;
        let minus = ev.value(&p)?;
        p[j] = x[j];
        g.push((plus - minus) / (2.0 * step));
    }
    Ok(g)
}

/// The quantities condition (1) depends on: `(∇W·f, gᵀ∇W)` in `f, g` mode, `(∇W·F)` in
/// closed-loop mode.
fn decrease_terms<E: Evaluator + ?Sized>(
    spec: &SystemSpec,
    field: &ClosedLoop<'_>,
    ev: &E,
    x: &[f64],
    step: f64,
) -> Result<Vec<f64>, ClbfError> {
    let gw = fd_gradient(ev, x, step)?;
    let err = |source| ClbfError::Field { x: x.to_vec(), source };
    if spec.is_control_affine() {
        let f = spec.drift(x).map_err(err)?;
        let g = spec.input_matrix(x).map_err(err)?;
        let mut t = vec![dot(&gw, &f)];
        t.extend(g.tr_matvec(&gw));
        Ok(t)
    } else {
        let fx = field.eval(x).map_err(err)?;
        Ok(vec![dot(&gw, &fx)])
    }
}

/// Condition (1) at `x` from central differences of the evaluator. The step starts at
/// `1e-5·max(1, |x|)` and is divided by 10 until two successive estimates agree; near a
/// point where the evaluator is not C¹ they may never agree, and the sample is reported as
/// unresolved.
fn decrease_ok<E: Evaluator + ?Sized>(spec: &SystemSpec, field: &ClosedLoop<'_>, ev: &E, x: &[f64]) -> Result<bool, ClbfError> {
    let mut step = 1e-5 * norm2(x).max(1.0);
    let mut prev = decrease_terms(spec, field, ev, x, step)?;
    for _ in 0..FD_REFINEMENTS {
        step /= 10.0;
        let next = decrease_terms(spec, field, ev, x, step)?;
        let diff: Vec<f64> = next.iter().zip(&prev).map(|(a, b)| a - b).collect();
        if norm2(&diff) <= FD_AGREEMENT * norm2(&next) {
            return Ok(if spec.is_control_affine() {
                strict_feasible(next[0], &next[1..], 0.0, &[], Mode::Interior).0
            } else {
                next[0] < 0.0
            });
        }
        prev = next;
    }
    Err(ClbfError::GradientUnresolved { x: x.to_vec() })
}

fn sample_where(spec: &SystemSpec, count: usize, seed: u64, keep: impl Fn(f64) -> bool) -> Vec<Vec<f64>> {
    let mut seq = Halton::new(spec.n, seed);
    let mut out = Vec::with_capacity(count);
    let mut tries = 0usize;
    while out.len() < count && tries < 10_000 * count.max(1) {
        tries += 1;
        let x = seq.next_in_box(&spec.domain_box);
        if norm2(&x) < spec.tolerances.r_min {
            continue;
        }
        if let Ok(h) = spec.h(&x) {
            if keep(h) {
                out.push(x);
            }
        }
    }
    out
}

enum Outcome {
    Value { w: f64, decrease: bool, residual: Option<f64> },
    Skip(Status),
}

/// Checks the three defining conditions of a Lyapunov-barrier function on samples:
/// `|W − 1| ≤ tol_boundary` on `∂C`; `W < 1 − tol_sep` where `h ≥ h_margin`;
/// `W > 1 + tol_sep` where `h ≤ −h_margin`; and decrease feasibility with `∇W` from central
/// differences. Samples whose evaluation fails are skipped and listed.
pub fn verify_clbf<E: Evaluator + ?Sized>(
    spec: &SystemSpec,
    field: &ClosedLoop<'_>,
    evaluator: &E,
    counts: SampleCounts,
    tol: VerifyTolerances,
    seed: u64,
) -> Result<ClbfReport, ClbfError> {
    let boundary = sample_boundary(spec, counts.boundary, seed)?;
    let interior = sample_where(spec, counts.interior, seed, |h| h >= tol.h_margin);
    let exterior = sample_where(spec, counts.exterior, seed.wrapping_add(1), |h| h <= -tol.h_margin);

    let run = |x: &Vec<f64>| -> Outcome {
        let w = match evaluator.value(x) {
            Ok(w) => w,
            Err(e) => return Outcome::Skip(e.status()),
        };
        let decrease = match decrease_ok(spec, field, evaluator, x) {
            Ok(d) => d,
            Err(e) => return Outcome::Skip(e.status()),
        };
        let residual = match evaluator.pde_residual(x) {
            Some(Ok(r)) => Some(r),
            Some(Err(e)) => return Outcome::Skip(e.status()),
            None => None,
        };
        Outcome::Value { w, decrease, residual }
    };
    let eval_all = |pts: &[Vec<f64>]| -> Vec<Outcome> { pts.par_iter().map(run).collect() };
    let (ob, oi, oe) = (eval_all(&boundary), eval_all(&interior), eval_all(&exterior));

    let mut skipped = Vec::new();
    let mut decrease_cx = Vec::new();
    let mut level_cx = Vec::new();
    let mut max_res: Option<f64> = None;
    let mut evaluated = SampleCounts {
        boundary: 0,
        interior: 0,
        exterior: 0,
    };
    let mut bmax: f64 = 0.0;
    let mut imax = f64::NEG_INFINITY;
    let mut emin = f64::INFINITY;
    let mut sublevel = true;
    let mut level_set = true;

    for (kind, pts, outs) in [(0, &boundary, &ob), (1, &interior, &oi), (2, &exterior, &oe)] {
        for (x, o) in pts.iter().zip(outs) {
            match o {
                Outcome::Skip(status) => skipped.push(Skipped { x: x.clone(), status: *status }),
                Outcome::Value { w, decrease, residual } => {
                    if !decrease {
                        decrease_cx.push(x.clone());
                    }
                    if let Some(r) = residual {
                        max_res = Some(max_res.map_or(*r, |m: f64| m.max(*r)));
                    }
                    match kind {
                        0 => {
                            evaluated.boundary += 1;
                            bmax = bmax.max((w - 1.0).abs());
                            if !((w - 1.0).abs() <= tol.tol_boundary) {
                                level_set = false;
                                level_cx.push(x.clone());
                            }
                        }
                        1 => {
                            evaluated.interior += 1;
                            imax = imax.max(*w);
                            if !(*w < 1.0 - tol.tol_sep) {
                                sublevel = false;
                                level_cx.push(x.clone());
                            }
                        }
                        _ => {
                            evaluated.exterior += 1;
                            emin = emin.min(*w);
                            if !(*w > 1.0 + tol.tol_sep) {
                                sublevel = false;
                                level_cx.push(x.clone());
                            }
                        }
                    }
                }
            }
        }
    }
    let verdicts = Verdicts {
        decrease: decrease_cx.is_empty(),
        sublevel,
        level_set: level_set && evaluated.boundary > 0,
    };
    Ok(ClbfReport {
        evaluator: evaluator.name(),
        pass: verdicts.decrease && verdicts.sublevel && verdicts.level_set,
        verdicts,
        tolerances: tol,
        requested: counts,
        evaluated,
        boundary_max_abs_w_minus_1: bmax,
        interior_max_w: imax,
        exterior_min_w: emin,
        max_pde_residual: max_res,
        decrease_failures: decrease_cx.len(),
        decrease_counterexamples: decrease_cx,
        level_set_counterexamples: level_cx,
        skipped,
    })
}
