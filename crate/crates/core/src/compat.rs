//! Pointwise strict CLF/CBF compatibility: Lie-derivative rows, the analytic feasibility
//! verdict for the open inequality system, robustness margins, and sampled reports.

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::expr::ExprError;
use crate::linalg::{dot, norm2, Matrix};
use crate::model::SystemSpec;
use crate::sampling::{sphere_directions, Halton};

/// Margin below which a sample is not certified strictly feasible.
pub const EPS_STRICT: f64 = 1e-8;
/// Squared sine below which two rows are treated as parallel.
const PARALLEL_SIN2: f64 = 1e-12;
const MARCH_STEPS: usize = 512;
const BOUNDARY_H_TOL: f64 = 1e-10;
const ANGLE_SCAN: usize = 720;

#[derive(Debug, Clone, Error)]
pub enum CompatError {
    #[error("Lie rows need f and g; this model supplies the closed loop directly")]
    ClosedLoopMode,
    #[error("evaluating {what} at {x:?}: {source}")]
    Expr { what: &'static str, x: Vec<f64>, source: ExprError },
    #[error("ray from {anchor:?} along {direction:?} leaves the domain box with h still positive")]
    RayExitsBox { anchor: Vec<f64>, direction: Vec<f64> },
    #[error("h is not strictly decreasing past its first zero along the ray from {anchor:?} along {direction:?} (near {x:?}); C is not star-shaped here")]
    NonMonotone {
        anchor: Vec<f64>,
        direction: Vec<f64>,
        x: Vec<f64>,
    },
    #[error("ray anchor {0:?} is not strictly inside the safe set")]
    AnchorOutside(Vec<f64>),
    #[error("no usable ray directions inside the domain box")]
    NoDirections,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// CLF clause only.
    Interior,
    /// CLF and CBF clauses.
    Boundary,
}

/// `(L_fV, L_gV, L_fh, L_gh)` at a point.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LieRows {
    pub a0: f64,
    pub a: Vec<f64>,
    pub b0: f64,
    pub b: Vec<f64>,
}

pub fn lie_rows(spec: &SystemSpec, x: &[f64]) -> Result<LieRows, CompatError> {
    if !spec.is_control_affine() {
        return Err(CompatError::ClosedLoopMode);
    }
    let wrap = |what: &'static str| {
        move |source: ExprError| CompatError::Expr {
            what,
            x: x.to_vec(),
            source,
        }
    };
    let field_err = |e: crate::field::FieldError| match e {
        crate::field::FieldError::Expr(source) => CompatError::Expr {
            what: "dynamics",
            x: x.to_vec(),
            source,
        },
        _ => CompatError::ClosedLoopMode,
    };
    let dv = spec.grad_v(x).map_err(wrap("∇V"))?;
    let dh = spec.grad_h(x).map_err(wrap("∇h"))?;
    let f = spec.drift(x).map_err(field_err)?;
    let g = spec.input_matrix(x).map_err(field_err)?;
    Ok(rows_from(&dv, &dh, &f, &g))
}

pub(crate) fn rows_from(dv: &[f64], dh: &[f64], f: &[f64], g: &Matrix) -> LieRows {
    LieRows {
        a0: dot(dv, f),
        a: g.tr_matvec(dv),
        b0: dot(dh, f),
        b: g.tr_matvec(dh),
    }
}

fn is_zero(v: &[f64]) -> bool {
    v.iter().all(|c| *c == 0.0)
}

fn lin(alpha: f64, x: &[f64], beta: f64, y: &[f64]) -> Vec<f64> {
    x.iter().zip(y).map(|(a, b)| alpha * a + beta * b).collect()
}

fn scale(alpha: f64, x: &[f64]) -> Vec<f64> {
    x.iter().map(|v| alpha * v).collect()
}

fn interior_verdict(a0: f64, a: &[f64]) -> (bool, Option<Vec<f64>>) {
    if a0 < 0.0 {
        return (true, Some(vec![0.0; a.len()]));
    }
    if is_zero(a) {
        return (false, None);
    }
    let t = (a0.abs() + 1.0) / dot(a, a);
    (true, Some(scale(-t, a)))
}

/// Exact verdict for `{a·u < −a0}` (interior) or `{a·u < −a0, b·u > −b0}` (boundary),
/// with an explicit witness when feasible.
pub fn strict_feasible(a0: f64, a: &[f64], b0: f64, b: &[f64], mode: Mode) -> (bool, Option<Vec<f64>>) {
    if mode == Mode::Interior {
        return interior_verdict(a0, a);
    }
    let m = a.len();
    let a_zero = is_zero(a);
    let b_zero = is_zero(b);
    if a_zero {
        if a0 >= 0.0 {
            return (false, None);
        }
        if b0 > 0.0 {
            return (true, Some(vec![0.0; m]));
        }
        if b_zero {
            return (false, None);
        }
        let t = (b0.abs() + 1.0) / dot(b, b);
        return (true, Some(scale(t, b)));
    }
    if b_zero {
        if b0 <= 0.0 {
            return (false, None);
        }
        return interior_verdict(a0, a);
    }
    let aa = dot(a, a);
    let bb = dot(b, b);
    let ab = dot(a, b);
    let sin2 = (1.0 - ab * ab / (aa * bb)).max(0.0);
    if sin2 <= PARALLEL_SIN2 {
        let lambda = ab / aa;
        // u = s·a moves a·u by s|a|² and b·u by λ s|a|².
        if lambda > 0.0 {
            if b0 <= lambda * a0 {
                return (false, None);
            }
            let target = 0.5 * (-b0 / lambda - a0);
            return (true, Some(scale(target / aa, a)));
        }
        let target = (-a0).min(-b0 / lambda) - 1.0;
        return (true, Some(scale(target / aa, a)));
    }
    // Independent rows: solve a·u = −a0 − 1, b·u = −b0 + 1 on span{a, b}.
    let det = aa * bb - ab * ab;
    let (ra, rb) = (-a0 - 1.0, -b0 + 1.0);
    let alpha = (ra * bb - rb * ab) / det;
    let beta = (aa * rb - ab * ra) / det;
    (true, Some(lin(alpha, a, beta, b)))
}

fn slack(a0: f64, a: &[f64], b0: f64, b: &[f64], mode: Mode, u: &[f64]) -> f64 {
    let sa = -a0 - dot(a, u);
    match mode {
        Mode::Interior => sa,
        Mode::Boundary => sa.min(b0 + dot(b, u)),
    }
}

/// Orthonormal basis of span{a, b} (zero, one, or two vectors).
fn span_basis(a: &[f64], b: &[f64]) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(2);
    for v in [a, b] {
        let mut w = v.to_vec();
        for e in &basis {
            let c = dot(&w, e);
            w = lin(1.0, &w, -c, e);
        }
        let n = norm2(&w);
        if n > 1e-9 * norm2(v).max(f64::MIN_POSITIVE) && n > 0.0 {
            basis.push(scale(1.0 / n, &w));
        }
    }
    basis
}

/// Largest `ε` with `a0 + a·u ≤ −ε` (and, in boundary mode, `b0 + b·u ≥ ε`) over
/// `|u|₂ ≤ U`, together with a maximiser. Negative values measure infeasibility depth.
///
/// An infinite bound gives the supremum over all of `ℝᵐ` and the analytic witness.
pub fn margin(a0: f64, a: &[f64], b0: f64, b: &[f64], bound: f64, mode: Mode) -> (f64, Vec<f64>) {
    let m = a.len();
    let na = norm2(a);
    if bound.is_infinite() {
        return margin_unbounded(a0, a, b0, b, mode);
    }
    if mode == Mode::Interior {
        if na == 0.0 {
            return (-a0, vec![0.0; m]);
        }
        let u = scale(-bound / na, a);
        return (-a0 + bound * na, u);
    }

    let phi = |u: &[f64]| slack(a0, a, b0, b, mode, u);
    let mut best = (phi(&vec![0.0; m]), vec![0.0; m]);
    let mut consider = |u: Vec<f64>| {
        let r = norm2(&u);
        let u = if r > bound { scale(bound / r, &u) } else { u };
        let v = phi(&u);
        if v > best.0 {
            best = (v, u);
        }
    };

    let nb = norm2(b);
    if na > 0.0 {
        consider(scale(-bound / na, a));
    }
    if nb > 0.0 {
        consider(scale(bound / nb, b));
    }
    // Kink line (a + b)·u = −(a0 + b0): its minimum-norm point, clipped, and where it
    // meets the circle.
    let c = lin(1.0, a, 1.0, b);
    let cc = dot(&c, &c);
    if cc > 0.0 {
        let u0 = scale(-(a0 + b0) / cc, &c);
        let r0 = norm2(&u0);
        consider(u0.clone());
        if r0 < bound {
            let acoef = dot(a, &c) / cc;
            let d = lin(1.0, a, -acoef, &c);
            let nd = norm2(&d);
            if nd > 1e-12 * na.max(nb) {
                let s = (bound * bound - r0 * r0).sqrt();
                consider(lin(1.0, &u0, s / nd, &d));
                consider(lin(1.0, &u0, -s / nd, &d));
            }
        }
    }

    // Boundary of the disk within span{a, b}: angle scan refined by golden section.
    let basis = span_basis(a, b);
    match basis.len() {
        1 => {
            consider(scale(bound, &basis[0]));
            consider(scale(-bound, &basis[0]));
        }
        2 => {
            let at = |th: f64| lin(bound * th.cos(), &basis[0], bound * th.sin(), &basis[1]);
            let step = std::f64::consts::TAU / ANGLE_SCAN as f64;
            let (mut k_best, mut v_best) = (0usize, f64::NEG_INFINITY);
            for k in 0..ANGLE_SCAN {
                let v = phi(&at(k as f64 * step));
                if v > v_best {
                    k_best = k;
                    v_best = v;
                }
            }
            let th = golden_max(|t| phi(&at(t)), (k_best as f64 - 1.0) * step, (k_best as f64 + 1.0) * step);
            consider(at(th));
        }
        _ => {}
    }
    best
}

fn golden_max(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64) -> f64 {
    let g = 0.5 * (5f64.sqrt() - 1.0);
    let mut x1 = hi - g * (hi - lo);
    let mut x2 = lo + g * (hi - lo);
    let (mut f1, mut f2) = (f(x1), f(x2));
    for _ in 0..80 {
        if f1 < f2 {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + g * (hi - lo);
            f2 = f(x2);
        } else {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - g * (hi - lo);
            f1 = f(x1);
        }
    }
    0.5 * (lo + hi)
}

fn margin_unbounded(a0: f64, a: &[f64], b0: f64, b: &[f64], mode: Mode) -> (f64, Vec<f64>) {
    let m = a.len();
    let (_, witness) = strict_feasible(a0, a, b0, b, mode);
    let witness = witness.unwrap_or_else(|| vec![0.0; m]);
    let a_zero = is_zero(a);
    let eps = match mode {
        Mode::Interior if a_zero => -a0,
        Mode::Interior => f64::INFINITY,
        Mode::Boundary => {
            let b_zero = is_zero(b);
            match (a_zero, b_zero) {
                (true, true) => (-a0).min(b0),
                (true, false) => -a0,
                (false, true) => b0,
                (false, false) => {
                    let aa = dot(a, a);
                    let ab = dot(a, b);
                    let sin2 = (1.0 - ab * ab / (aa * dot(b, b))).max(0.0);
                    let lambda = ab / aa;
                    if sin2 <= PARALLEL_SIN2 && lambda > 0.0 {
                        (b0 - lambda * a0) / (1.0 + lambda)
                    } else {
                        f64::INFINITY
                    }
                }
            }
        }
    };
    (eps, witness)
}

/// Interior-mode margin over the box `|u|∞ ≤ ε`: `−a0 + ε|a|₁`, attained at `u = −ε·sign(a)`.
pub fn margin_box(a0: f64, a: &[f64], eps: f64) -> (f64, Vec<f64>) {
    let u: Vec<f64> = a
        .iter()
        .map(|v| if *v == 0.0 { 0.0 } else { -eps * v.signum() })
        .collect();
    (-a0 + eps * a.iter().map(|v| v.abs()).sum::<f64>(), u)
}

/// Compatibility record at one state.
#[derive(Debug, Clone, Serialize)]
pub struct PointFeasibility {
    pub x: Vec<f64>,
    pub a0: f64,
    pub a: Vec<f64>,
    pub b0: f64,
    pub b: Vec<f64>,
    pub mode: Mode,
    /// Analytically feasible and certified by `raw_margin ≥ EPS_STRICT`.
    pub feasible: bool,
    pub analytic_feasible: bool,
    pub witness: Option<Vec<f64>>,
    /// `raw_margin` when feasible, else 0.
    pub margin: f64,
    pub raw_margin: f64,
    pub margin_control: Vec<f64>,
}

impl PointFeasibility {
    pub fn from_rows(x: &[f64], rows: &LieRows, mode: Mode, bound: f64) -> PointFeasibility {
        let (analytic, witness) = strict_feasible(rows.a0, &rows.a, rows.b0, &rows.b, mode);
        let (raw, u) = margin(rows.a0, &rows.a, rows.b0, &rows.b, bound, mode);
        let feasible = analytic && raw >= EPS_STRICT;
        PointFeasibility {
            x: x.to_vec(),
            a0: rows.a0,
            a: rows.a.clone(),
            b0: rows.b0,
            b: rows.b.clone(),
            mode,
            feasible,
            analytic_feasible: analytic,
            witness,
            margin: if feasible { raw } else { 0.0 },
            raw_margin: raw,
            margin_control: u,
        }
    }

    pub fn evaluate(spec: &SystemSpec, x: &[f64], mode: Mode, bound: f64) -> Result<PointFeasibility, CompatError> {
        let rows = lie_rows(spec, x)?;
        Ok(PointFeasibility::from_rows(x, &rows, mode, bound))
    }
}

fn exit_distance(anchor: &[f64], dir: &[f64], domain: &[(f64, f64)]) -> f64 {
    let mut t = f64::INFINITY;
    for ((p, d), (lo, hi)) in anchor.iter().zip(dir).zip(domain) {
        if *d > 0.0 {
            t = t.min((hi - p) / d);
        } else if *d < 0.0 {
            t = t.min((lo - p) / d);
        }
    }
    t
}

/// Rays used for boundary sampling: an anchor (origin in the ray coordinates, quasi-random
/// in the others) and a unit direction spanning only `spec.ray_dims`.
fn boundary_rays(spec: &SystemSpec, count: usize, seed: u64) -> Vec<(Vec<f64>, Vec<f64>)> {
    let n = spec.n;
    let dims = &spec.ray_dims;
    let others: Vec<usize> = (0..n).filter(|i| !dims.contains(i)).collect();
    let other_box: Vec<(f64, f64)> = others.iter().map(|&i| spec.domain_box[i]).collect();
    let mut anchors = Halton::new(others.len().max(1), seed);
    let allowed_sign = |i: usize, s: f64| {
        let (lo, hi) = spec.domain_box[i];
        if s > 0.0 {
            hi > 0.0
        } else {
            lo < 0.0
        }
    };
    let dirs: Vec<Vec<f64>> = if dims.len() == 1 {
        let signs: Vec<f64> = [1.0, -1.0].into_iter().filter(|s| allowed_sign(dims[0], *s)).collect();
        if signs.is_empty() {
            return Vec::new();
        }
        (0..count).map(|k| vec![signs[k % signs.len()]]).collect()
    } else {
        sphere_directions(dims.len(), count, seed)
    };
    let mut rays = Vec::with_capacity(count);
    for d in dirs {
        let mut anchor = vec![0.0; n];
        if !others.is_empty() {
            for (k, v) in others.iter().zip(anchors.next_in_box(&other_box)) {
                anchor[*k] = v;
            }
        }
        let mut dir = vec![0.0; n];
        for (k, v) in dims.iter().zip(&d) {
            dir[*k] = *v;
        }
        // Directions that leave the box immediately carry no boundary point.
        if exit_distance(&anchor, &dir, &spec.domain_box) <= 0.0 {
            continue;
        }
        rays.push((anchor, dir));
    }
    rays
}

fn h_at(spec: &SystemSpec, x: &[f64]) -> Result<f64, CompatError> {
    spec.h(x).map_err(|source| CompatError::Expr {
        what: "h",
        x: x.to_vec(),
        source,
    })
}

/// Marches from `anchor` along `dir` to the first zero of `h` and bisects it to
/// `|h| ≤ 1e-10`; verifies that `h` keeps strictly decreasing beyond it inside the box.
pub fn boundary_point_on_ray(spec: &SystemSpec, anchor: &[f64], dir: &[f64]) -> Result<Vec<f64>, CompatError> {
    let point = |t: f64| -> Vec<f64> { anchor.iter().zip(dir).map(|(p, d)| p + t * d).collect() };
    let h0 = h_at(spec, anchor)?;
    if h0 <= 0.0 {
        return Err(CompatError::AnchorOutside(anchor.to_vec()));
    }
    let t_exit = exit_distance(anchor, dir, &spec.domain_box);
    let dt = t_exit / MARCH_STEPS as f64;
    let mut prev = (0.0, h0);
    let mut crossing = None;
    let mut k = 1;
    while k <= MARCH_STEPS {
        let t = if k == MARCH_STEPS { t_exit } else { k as f64 * dt };
        let hv = h_at(spec, &point(t))?;
        if hv <= 0.0 {
            crossing = Some((prev, (t, hv), k));
            break;
        }
        prev = (t, hv);
        k += 1;
    }
    let ((mut ta, mut ha), (mut tb, mut hb), k_cross) = crossing.ok_or_else(|| CompatError::RayExitsBox {
        anchor: anchor.to_vec(),
        direction: dir.to_vec(),
    })?;

    let mut last = (tb, hb);
    for _ in 0..200 {
        if hb.abs() <= BOUNDARY_H_TOL {
            last = (tb, hb);
            break;
        }
        if ha.abs() <= BOUNDARY_H_TOL {
            last = (ta, ha);
            break;
        }
        let tm = 0.5 * (ta + tb);
        if tm == ta || tm == tb {
            last = if ha.abs() < hb.abs() { (ta, ha) } else { (tb, hb) };
            break;
        }
        let hm = h_at(spec, &point(tm))?;
        if hm > 0.0 {
            ta = tm;
            ha = hm;
        } else {
            tb = tm;
            hb = hm;
        }
        last = if ha.abs() < hb.abs() { (ta, ha) } else { (tb, hb) };
    }

    let mut h_prev = hb;
    for j in k_cross + 1..=MARCH_STEPS {
        let t = if j == MARCH_STEPS { t_exit } else { j as f64 * dt };
        let x = point(t);
        let hv = h_at(spec, &x)?;
        if hv >= h_prev {
            return Err(CompatError::NonMonotone {
                anchor: anchor.to_vec(),
                direction: dir.to_vec(),
                x,
            });
        }
        h_prev = hv;
    }
    Ok(point(last.0))
}

/// Up to `count` points on `∂C`, one per ray (see [`boundary_point_on_ray`]).
pub fn sample_boundary(spec: &SystemSpec, count: usize, seed: u64) -> Result<Vec<Vec<f64>>, CompatError> {
    let rays = boundary_rays(spec, count, seed);
    if rays.is_empty() && count > 0 {
        return Err(CompatError::NoDirections);
    }
    rays.par_iter()
        .map(|(anchor, dir)| boundary_point_on_ray(spec, anchor, dir))
        .collect()
}

/// `count` quasi-random points of the domain box outside the ball `|x| < r_min`.
pub fn sample_interior(spec: &SystemSpec, count: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut seq = Halton::new(spec.n, seed);
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let x = seq.next_in_box(&spec.domain_box);
        if norm2(&x) >= spec.tolerances.r_min {
            out.push(x);
        }
    }
    out
}

#[derive(Debug, Clone, Serialize)]
pub struct CompatReport {
    pub pass: bool,
    pub bound_u: f64,
    pub seed: u64,
    pub n_interior: usize,
    pub n_boundary: usize,
    pub n_failures: usize,
    /// Smallest raw margin over boundary samples (negative when infeasible).
    pub worst_boundary_margin: f64,
    pub worst_interior_margin: f64,
    pub counterexamples: Vec<Vec<f64>>,
    pub interior: Vec<PointFeasibility>,
    pub boundary: Vec<PointFeasibility>,
}

/// Samples both clauses of strict compatibility: the CLF clause on the domain box minus
/// the `r_min` ball and the joint clause on `∂C`.
pub fn compat_report(
    spec: &SystemSpec,
    n_interior: usize,
    n_boundary: usize,
    bound: f64,
    seed: u64,
) -> Result<CompatReport, CompatError> {
    if !spec.is_control_affine() {
        return Err(CompatError::ClosedLoopMode);
    }
    let interior_pts = sample_interior(spec, n_interior, seed);
    let boundary_pts = sample_boundary(spec, n_boundary, seed)?;
    let interior: Vec<PointFeasibility> = interior_pts
        .par_iter()
        .map(|x| PointFeasibility::evaluate(spec, x, Mode::Interior, bound))
        .collect::<Result<_, _>>()?;
    let boundary: Vec<PointFeasibility> = boundary_pts
        .par_iter()
        .map(|x| PointFeasibility::evaluate(spec, x, Mode::Boundary, bound))
        .collect::<Result<_, _>>()?;
    let counterexamples: Vec<Vec<f64>> = interior
        .iter()
        .chain(&boundary)
        .filter(|p| !p.feasible)
        .map(|p| p.x.clone())
        .collect();
    let worst = |v: &[PointFeasibility]| v.iter().map(|p| p.raw_margin).fold(f64::INFINITY, f64::min);
    Ok(CompatReport {
        pass: counterexamples.is_empty(),
        bound_u: bound,
        seed,
        n_interior: interior.len(),
        n_boundary: boundary.len(),
        n_failures: counterexamples.len(),
        worst_boundary_margin: worst(&boundary),
        worst_interior_margin: worst(&interior),
        counterexamples,
        interior,
        boundary,
    })
}
