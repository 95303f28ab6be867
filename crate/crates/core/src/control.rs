//! Pointwise feedback laws built from the CLF and CBF rows, the resulting closed-loop
//! vector field, and closed-loop simulation with safety/decrease monitors.

use serde::Serialize;
use thiserror::Error;

use crate::compat::{lie_rows, CompatError, LieRows, Mode, PointFeasibility};
use crate::expr::ExprError;
use crate::export::{indexed, Cell, Csv};
use crate::field::{ExprField, FieldError, JacobianSource, VectorField};
use crate::linalg::{dot, norm2, ols_slope, Matrix};
use crate::model::{ControllerKind, ControllerParams, SystemSpec};
use crate::ode::{self, OdeError, Trajectory};
use crate::sampling::sphere_directions;

#[derive(Debug, Clone, Error)]
pub enum ControlError {
    #[error("controller `{0}` needs f and g; this model supplies the closed loop directly")]
    NotControlAffine(&'static str),
    #[error(transparent)]
    Expr(#[from] ExprError),
    #[error(transparent)]
    Compat(#[from] CompatError),
    #[error("controller infeasible at x = {:?} (mode {:?}, a0 = {}, b0 = {})", .0.x, .0.mode, .0.a0, .0.b0)]
    Infeasible(Box<PointFeasibility>),
    #[error("blended controller needs gain_K in the config")]
    MissingGain,
    #[error("invalid controller parameters: {0}")]
    InvalidParams(String),
    #[error("initial state {0:?} lies outside the domain box")]
    OutsideBox(Vec<f64>),
    #[error("closed-loop integration failed: {0}")]
    Integration(OdeError),
}

impl From<ControlError> for FieldError {
    fn from(e: ControlError) -> FieldError {
        match e {
            ControlError::Expr(e) => FieldError::Expr(e),
            ControlError::Compat(CompatError::Expr { source, .. }) => FieldError::Expr(source),
            ControlError::Infeasible(p) => FieldError::Infeasible(p),
            other => FieldError::Unsupported(other.to_string()),
        }
    }
}

fn rows(spec: &SystemSpec, x: &[f64], who: &'static str) -> Result<LieRows, ControlError> {
    if !spec.is_control_affine() {
        return Err(ControlError::NotControlAffine(who));
    }
    Ok(lie_rows(spec, x)?)
}

/// Sontag's universal formula: `u = −((a0 + √(a0² + |a|⁴))/|a|²)·aᵀ`, and `u = 0` where
/// `a = 0`.
pub fn sontag(spec: &SystemSpec, x: &[f64]) -> Result<Vec<f64>, ControlError> {
    let r = rows(spec, x, "sontag")?;
    Ok(sontag_from_rows(r.a0, &r.a))
}

pub fn sontag_from_rows(a0: f64, a: &[f64]) -> Vec<f64> {
    let aa = dot(a, a);
    if aa == 0.0 {
        return vec![0.0; a.len()];
    }
    let k = (a0 + (a0 * a0 + aa * aa).sqrt()) / aa;
    a.iter().map(|v| -k * v).collect()
}

/// Half-space `row·u ≤ rhs`.
#[derive(Debug, Clone, PartialEq)]
pub struct HalfSpace {
    pub row: Vec<f64>,
    pub rhs: f64,
}

impl HalfSpace {
    fn holds(&self, u: &[f64]) -> bool {
        let lhs = dot(&self.row, u);
        lhs - self.rhs <= 1e-12 * (1.0 + self.rhs.abs() + norm2(&self.row) * norm2(u))
    }
}

/// Least-norm point of the intersection of at most two half-spaces, by enumerating the
/// active sets `∅`, `{i}`, `{1, 2}`. Among candidates of equal norm (within 1e-12) the one
/// with fewer active constraints wins. `None` when the intersection is empty.
pub fn min_norm_point(cons: &[HalfSpace]) -> Option<Vec<f64>> {
    assert!(cons.len() <= 2, "at most two constraints");
    let m = cons.first().map_or(0, |c| c.row.len());
    let feasible = |u: &[f64]| cons.iter().all(|c| c.holds(u));
    let mut best: Option<(f64, Vec<f64>)> = None;
    let mut offer = |u: Vec<f64>| {
        if !feasible(&u) {
            return;
        }
        let n = norm2(&u);
        if best.as_ref().is_none_or(|(bn, _)| n < bn - 1e-12) {
            best = Some((n, u));
        }
    };
    offer(vec![0.0; m]);
    for c in cons {
        let rr = dot(&c.row, &c.row);
        if rr > 0.0 {
            offer(c.row.iter().map(|v| c.rhs / rr * v).collect());
        }
    }
    if let [c1, c2] = cons {
        let g11 = dot(&c1.row, &c1.row);
        let g22 = dot(&c2.row, &c2.row);
        let g12 = dot(&c1.row, &c2.row);
        let det = g11 * g22 - g12 * g12;
        if det > 1e-14 * g11 * g22 {
            let al = (c1.rhs * g22 - c2.rhs * g12) / det;
            let be = (g11 * c2.rhs - g12 * c1.rhs) / det;
            offer(c1.row.iter().zip(&c2.row).map(|(p, q)| al * p + be * q).collect());
        }
    }
    best.map(|(_, u)| u)
}

/// Constraints of the min-norm CLF–CBF program at a state:
/// `a0 + a·u ≤ −c_v·V` always, and `b0 + b·u ≥ κ` when `h ≤ band`.
pub fn qp_constraints(r: &LieRows, v: f64, h: f64, params: &ControllerParams) -> Vec<HalfSpace> {
    let mut cons = vec![HalfSpace {
        row: r.a.clone(),
        rhs: -params.c_v * v - r.a0,
    }];
    if h <= params.band {
        cons.push(HalfSpace {
            row: r.b.iter().map(|v| -v).collect(),
            rhs: r.b0 - params.kappa,
        });
    }
    cons
}

pub fn min_norm_qp(spec: &SystemSpec, x: &[f64], params: &ControllerParams) -> Result<Vec<f64>, ControlError> {
    let r = rows(spec, x, "min_norm_qp")?;
    let v = spec.v(x)?;
    let h = spec.h(x)?;
    let cons = qp_constraints(&r, v, h, params);
    min_norm_point(&cons).ok_or_else(|| {
        let mode = if cons.len() == 2 { Mode::Boundary } else { Mode::Interior };
        ControlError::Infeasible(Box::new(PointFeasibility::from_rows(x, &r, mode, f64::INFINITY)))
    })
}

fn bump(t: f64) -> f64 {
    if t > 0.0 {
        (-1.0 / t).exp()
    } else {
        0.0
    }
}

/// Smooth monotone weight: 1 for `s ≤ r0`, 0 for `s ≥ r1`, `q((r1 − s)/(r1 − r0))` between,
/// with `q(τ) = e(τ)/(e(τ) + e(1 − τ))` and `e(τ) = exp(−1/τ)`.
pub fn blend_weight(s: f64, r0: f64, r1: f64) -> f64 {
    if s <= r0 {
        return 1.0;
    }
    if s >= r1 {
        return 0.0;
    }
    let tau = (r1 - s) / (r1 - r0);
    let (e0, e1) = (bump(tau), bump(1.0 - tau));
    e0 / (e0 + e1)
}

fn blend_radii(params: &ControllerParams) -> Result<(f64, f64), ControlError> {
    match (params.r0, params.r1) {
        (Some(r0), Some(r1)) if 0.0 < r0 && r0 < r1 => Ok((r0, r1)),
        _ => Err(ControlError::InvalidParams("blended controller needs 0 < r0 < r1".into())),
    }
}

/// Checks `0 < r0 < r1` and that the sphere `|x| = r1` lies strictly inside `C`.
pub fn validate_blend(spec: &SystemSpec, params: &ControllerParams) -> Result<(), ControlError> {
    let (_, r1) = blend_radii(params)?;
    spec.gain.as_ref().ok_or(ControlError::MissingGain)?;
    for d in sphere_directions(spec.n, 256, 0) {
        let x: Vec<f64> = d.iter().map(|v| r1 * v).collect();
        if spec.h(&x)? <= 0.0 {
            return Err(ControlError::InvalidParams(format!(
                "the r1-sphere leaves the safe set near {x:?}"
            )));
        }
    }
    Ok(())
}

/// `u = w(|x|)·Kx + (1 − w(|x|))·min_norm_qp(x)`.
pub fn blended(spec: &SystemSpec, x: &[f64], params: &ControllerParams) -> Result<Vec<f64>, ControlError> {
    if !spec.is_control_affine() {
        return Err(ControlError::NotControlAffine("blended"));
    }
    let k = spec.gain.as_ref().ok_or(ControlError::MissingGain)?;
    let (r0, r1) = blend_radii(params)?;
    let w = blend_weight(norm2(x), r0, r1);
    if w == 1.0 {
        return Ok(k.matvec(x));
    }
    let outer = min_norm_qp(spec, x, params)?;
    if w == 0.0 {
        return Ok(outer);
    }
    Ok(k.matvec(x)
        .iter()
        .zip(&outer)
        .map(|(l, o)| w * l + (1.0 - w) * o)
        .collect())
}

/// Evaluates the feedback law selected by `kind` (empty input in external mode).
pub fn control_input(
    spec: &SystemSpec,
    kind: ControllerKind,
    params: &ControllerParams,
    x: &[f64],
) -> Result<Vec<f64>, ControlError> {
    match kind {
        ControllerKind::Sontag => sontag(spec, x),
        ControllerKind::MinNormQp => min_norm_qp(spec, x, params),
        ControllerKind::Blended => blended(spec, x, params),
        ControllerKind::External => {
            if spec.is_control_affine() {
                Err(ControlError::InvalidParams("controller `external` needs closed_loop".into()))
            } else {
                Ok(Vec::new())
            }
        }
    }
}

/// The closed-loop field `F(x) = f(x) + g(x)·k(x)`, or the supplied `F` in external mode.
pub struct ClosedLoop<'a> {
    spec: &'a SystemSpec,
    kind: ControllerKind,
    params: ControllerParams,
    external: Option<ExprField>,
}

impl<'a> ClosedLoop<'a> {
    pub fn new(spec: &'a SystemSpec, kind: ControllerKind, params: ControllerParams) -> Result<Self, ControlError> {
        let external = spec.external_field();
        match (kind, &external) {
            (ControllerKind::External, None) => {
                return Err(ControlError::InvalidParams("controller `external` needs closed_loop".into()))
            }
            (ControllerKind::External, Some(_)) => {}
            (_, Some(_)) => return Err(ControlError::NotControlAffine(kind.name())),
            (ControllerKind::Blended, None) => validate_blend(spec, &params)?,
            _ => {}
        }
        Ok(ClosedLoop {
            spec,
            kind,
            params,
            external,
        })
    }

    pub fn spec(&self) -> &SystemSpec {
        self.spec
    }

    pub fn kind(&self) -> ControllerKind {
        self.kind
    }

    pub fn params(&self) -> &ControllerParams {
        &self.params
    }

    pub fn input(&self, x: &[f64]) -> Result<Vec<f64>, ControlError> {
        control_input(self.spec, self.kind, &self.params, x)
    }
}

impl VectorField for ClosedLoop<'_> {
    fn dim(&self) -> usize {
        self.spec.n
    }

    fn eval(&self, x: &[f64]) -> Result<Vec<f64>, FieldError> {
        if let Some(f) = &self.external {
            return f.eval(x);
        }
        let u = self.input(x)?;
        self.spec.eval_dynamics(x, &u)
    }

    fn jacobian(&self, x: &[f64]) -> Result<(Matrix, JacobianSource), FieldError> {
        match &self.external {
            Some(f) => f.jacobian(x),
            None => Ok((crate::field::fd_jacobian(self, x)?, JacobianSource::FiniteDifference)),
        }
    }
}

/// Closed loop with the controller and parameters named in the config.
pub fn closed_loop_field(spec: &SystemSpec) -> Result<ClosedLoop<'_>, ControlError> {
    ClosedLoop::new(spec, spec.controller, spec.params)
}

#[derive(Debug, Clone, Serialize)]
pub struct Monitors {
    /// `min h(φ(t, x0))` over the simulated path.
    pub min_h: f64,
    /// `max V(φ(t, x0)) − V(x0)`.
    pub max_v_increase: f64,
    pub final_norm: f64,
    /// Least-squares slope of `log|x(t)|` against `t`; a decay-rate diagnostic.
    pub log_decay_slope: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct Truncation {
    pub t: f64,
    pub x: Vec<f64>,
    pub feasibility: Option<PointFeasibility>,
}

#[derive(Debug, Clone)]
pub struct Simulation {
    pub trajectory: Trajectory,
    pub monitors: Monitors,
    /// Set when the controller became infeasible at a visited state.
    pub truncated: Option<Truncation>,
}

impl Simulation {
    /// `t,x1..xn,u1..um,V,h` at `count + 1` equally spaced times.
    pub fn to_csv(&self, field: &ClosedLoop<'_>, count: usize) -> String {
        let spec = field.spec();
        let mut header = vec!["t".to_string()];
        header.extend(indexed("x", spec.n));
        header.extend(indexed("u", spec.m));
        header.push("V".into());
        header.push("h".into());
        let mut csv = Csv::new(&header);
        for (t, x) in self.trajectory.sample_uniform(count) {
            let mut cells = vec![Cell::Num(t)];
            cells.extend(x.iter().map(|v| Cell::Num(*v)));
            match field.input(&x) {
                Ok(u) if u.len() == spec.m => cells.extend(u.into_iter().map(Cell::Num)),
                _ => cells.extend(std::iter::repeat_n(Cell::Num(f64::NAN), spec.m)),
            }
            cells.push(Cell::Num(spec.v(&x).unwrap_or(f64::NAN)));
            cells.push(Cell::Num(spec.h(&x).unwrap_or(f64::NAN)));
            csv.row(&cells);
        }
        csv.finish()
    }
}

fn monitor(spec: &SystemSpec, traj: &Trajectory) -> Result<Monitors, ControlError> {
    let v0 = spec.v(traj.initial_state())?;
    let mut min_h = f64::INFINITY;
    let mut max_dv = f64::NEG_INFINITY;
    let mut visit = |x: &[f64]| -> Result<(), ControlError> {
        min_h = min_h.min(spec.h(x)?);
        max_dv = max_dv.max(spec.v(x)? - v0);
        Ok(())
    };
    visit(traj.initial_state())?;
    let mut ts = Vec::new();
    let mut logs = Vec::new();
    for seg in traj.segments() {
        for th in [0.25, 0.5, 0.75] {
            visit(&seg.eval(seg.t_start + th * (seg.t_end - seg.t_start)))?;
        }
        visit(&seg.state_end)?;
        let r = norm2(&seg.state_end);
        if r > 1e-12 {
            ts.push(seg.t_end);
            logs.push(r.ln());
        }
    }
    Ok(Monitors {
        min_h,
        max_v_increase: max_dv,
        final_norm: norm2(traj.final_state()),
        log_decay_slope: ols_slope(&ts, &logs),
    })
}

/// Integrates the closed loop from `x0` over `[0, t_end]` and records the monitors.
/// Controller infeasibility truncates the trajectory at the last accepted step.
pub fn simulate_closed_loop(field: &ClosedLoop<'_>, x0: &[f64], t_end: f64) -> Result<Simulation, ControlError> {
    let spec = field.spec();
    if x0.len() != spec.n || !spec.in_box(x0) {
        return Err(ControlError::OutsideBox(x0.to_vec()));
    }
    let tol = spec.tolerances.ode;
    let (trajectory, truncated) = match ode::integrate(field, x0, (0.0, t_end), tol) {
        Ok(tr) => (tr, None),
        Err(err) => {
            let infeasible = match &err {
                OdeError::Field {
                    source: FieldError::Infeasible(p),
                    ..
                } => Some((**p).clone()),
                _ => None,
            };
            let Some(feas) = infeasible else {
                return Err(ControlError::Integration(err));
            };
            let tr = err
                .partial()
                .cloned()
                .unwrap_or_else(|| Trajectory::start(0.0, x0, ode::Direction::Forward));
            let trunc = Truncation {
                t: tr.t_end(),
                x: feas.x.clone(),
                feasibility: Some(feas),
            };
            (tr, Some(trunc))
        }
    };
    let monitors = monitor(spec, &trajectory)?;
    Ok(Simulation {
        trajectory,
        monitors,
        truncated,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::builtin;

    fn params(c_v: f64, kappa: f64, band: f64) -> ControllerParams {
        ControllerParams {
            c_v,
            kappa,
            band,
            r0: Some(0.2),
            r1: Some(0.5),
        }
    }

    #[test]
    fn sontag_on_linear_reference() {
        let spec = builtin::linear();
        for x in [[0.3, -0.4], [2.0, 1.0], [-1e-3, 2e-3]] {
            let u = sontag(&spec, &x).unwrap();
            assert!((u[0] + x[0]).abs() <= 1e-12 * (1.0 + x[0].abs()));
            assert!((u[1] + x[1]).abs() <= 1e-12 * (1.0 + x[1].abs()));
        }
        assert_eq!(sontag(&spec, &[0.0, 0.0]).unwrap(), vec![0.0, 0.0]);
        assert_eq!(sontag_from_rows(-1.0, &[0.0, 0.0]), vec![0.0, 0.0]);
        assert!(matches!(sontag(&builtin::polar(), &[1.0, 0.0]), Err(ControlError::NotControlAffine(_))));
    }

    #[test]
    fn qp_examples() {
        let spec = builtin::linear();
        let u = min_norm_qp(&spec, &[1.0, 0.0], &params(1.0, 1.0, 1.0)).unwrap();
        assert!((u[0] + 0.5).abs() < 1e-12 && u[1].abs() < 1e-12, "{u:?}");
        // Deep inside C with the CLF row already satisfied by the zero input.
        let di = builtin::double_integrator();
        let x = [-0.2, 0.1];
        let r = lie_rows(&di, &x).unwrap();
        assert!(r.a0 <= -0.1 * di.v(&x).unwrap());
        assert_eq!(min_norm_qp(&di, &x, &params(0.1, 1e-3, 0.1)).unwrap(), vec![0.0]);
        match min_norm_qp(&di, &[1.0, 0.0], &params(0.1, 1e-3, 0.1)) {
            Err(ControlError::Infeasible(p)) => {
                assert_eq!(p.mode, Mode::Boundary);
                assert!(!p.analytic_feasible);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn min_norm_point_cases() {
        let c = |row: Vec<f64>, rhs: f64| HalfSpace { row, rhs };
        assert_eq!(min_norm_point(&[c(vec![1.0, 0.0], 1.0)]), Some(vec![0.0, 0.0]));
        assert_eq!(min_norm_point(&[c(vec![2.0, 0.0], -1.0)]), Some(vec![-0.5, 0.0]));
        let u = min_norm_point(&[c(vec![1.0, 0.0], -1.0), c(vec![0.0, 1.0], -1.0)]).unwrap();
        assert!((u[0] + 1.0).abs() < 1e-15 && (u[1] + 1.0).abs() < 1e-15);
        assert_eq!(min_norm_point(&[c(vec![1.0], -1.0), c(vec![-1.0], -1.0)]), None);
        assert_eq!(min_norm_point(&[c(vec![0.0], -1.0)]), None);
    }

    #[test]
    fn blend_weight_shape() {
        assert_eq!(blend_weight(0.1, 0.2, 0.5), 1.0);
        assert_eq!(blend_weight(0.6, 0.2, 0.5), 0.0);
        assert!((blend_weight(0.35, 0.2, 0.5) - 0.5).abs() < 1e-15);
        let mut prev = 1.0;
        for k in 0..=300 {
            let w = blend_weight(0.2 + 0.001 * k as f64, 0.2, 0.5);
            assert!(w <= prev);
            prev = w;
        }
    }

    #[test]
    fn blended_limits() {
        let spec = builtin::linear();
        let p = spec.params;
        let x = [0.1, -0.05];
        assert_eq!(blended(&spec, &x, &p).unwrap(), vec![-0.1, 0.05]);
        let far = [0.6, 0.3];
        assert_eq!(blended(&spec, &far, &p).unwrap(), min_norm_qp(&spec, &far, &p).unwrap());
        validate_blend(&spec, &p).unwrap();
        let bad = ControllerParams { r1: Some(1.5), ..p };
        assert!(validate_blend(&spec, &bad).is_err());
    }

    #[test]
    fn sontag_simulation() {
        let spec = builtin::linear();
        let field = ClosedLoop::new(&spec, ControllerKind::Sontag, spec.params).unwrap();
        let sim = simulate_closed_loop(&field, &[0.9, 0.0], 10.0).unwrap();
        assert!(sim.truncated.is_none());
        assert!(sim.monitors.min_h >= 0.19 - 1e-9);
        assert!(sim.monitors.final_norm <= 1e-4);
        assert!(sim.monitors.max_v_increase <= 1e-12);
        assert!((sim.monitors.log_decay_slope.unwrap() + 1.0).abs() < 1e-3);
        let still = simulate_closed_loop(&field, &[0.0, 0.0], 1.0).unwrap();
        assert_eq!(still.trajectory.final_state(), &[0.0, 0.0]);
    }

    #[test]
    fn boundary_start_stays_safe() {
        let spec = builtin::linear();
        let field = ClosedLoop::new(&spec, ControllerKind::MinNormQp, spec.params).unwrap();
        let x0 = [0.6, 0.8];
        let sim = simulate_closed_loop(&field, &x0, 20.0).unwrap();
        assert!(sim.monitors.min_h >= -1e-9, "{}", sim.monitors.min_h);
    }

    #[test]
    fn infeasible_start_is_truncated() {
        let spec = builtin::double_integrator();
        let field = closed_loop_field(&spec).unwrap();
        let sim = simulate_closed_loop(&field, &[1.0, 0.0], 5.0).unwrap();
        let tr = sim.truncated.as_ref().expect("truncated");
        assert_eq!(tr.t, 0.0);
        assert!(!tr.feasibility.as_ref().unwrap().analytic_feasible);
        let csv = sim.to_csv(&field, 4);
        assert!(csv.starts_with("t,x1,x2,u1,V,h\n"));
    }

    #[test]
    fn mode_guards() {
        let polar = builtin::polar();
        assert!(ClosedLoop::new(&polar, ControllerKind::Sontag, polar.params).is_err());
        let f = closed_loop_field(&polar).unwrap();
        assert_eq!(f.eval(&[1.0, 0.0]).unwrap(), vec![-1.0, 1.0]);
        assert!(simulate_closed_loop(&f, &[3.0, 0.0], 1.0).is_err());
    }
}
