//! Adaptive explicit Runge–Kutta integration with dense output.
//!
//! Provides the flow map `φ(t, x0)` in either time direction, first-crossing detection of a
//! scalar event function, and the variational (sensitivity) system `Φ̇ = A(t)Φ, Φ(0) = I`.

mod dopri;
mod trajectory;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::field::{FieldError, VectorField};
use crate::linalg::Matrix;

use dopri::{StepError, Stepper};
pub use trajectory::{Direction, Segment, Trajectory, TrajectoryStatus};

/// Integrator tolerances. The local error of every accepted step satisfies
/// `|err_i| ≤ atol + rtol·max(|y_i|, |y_i'|)` componentwise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Tolerances {
    pub rtol: f64,
    pub atol: f64,
    /// Width of the final time bracket around an event.
    pub event_tol: f64,
    pub max_steps: usize,
}

impl Default for Tolerances {
    fn default() -> Self {
        Tolerances {
            rtol: 1e-9,
            atol: 1e-12,
            event_tol: 1e-12,
            max_steps: 1_000_000,
        }
    }
}

#[derive(Debug, Clone, Error)]
pub enum OdeError {
    #[error("empty time span")]
    EmptySpan,
    #[error("step size underflow at t = {t} (state {state:?}); finite-time blow-up or stiffness")]
    StepUnderflow {
        t: f64,
        state: Vec<f64>,
        partial: Box<Trajectory>,
    },
    #[error("step budget exhausted at t = {t}")]
    TooManySteps {
        t: f64,
        state: Vec<f64>,
        partial: Box<Trajectory>,
    },
    #[error("vector field failed at t = {t}: {source}")]
    Field {
        t: f64,
        state: Vec<f64>,
        source: FieldError,
        partial: Option<Box<Trajectory>>,
    },
    #[error("time {t} outside trajectory span [{lo}, {hi}]")]
    OutOfSpan { t: f64, lo: f64, hi: f64 },
}

impl OdeError {
    /// The trajectory computed before the failure, if any.
    pub fn partial(&self) -> Option<&Trajectory> {
        match self {
            OdeError::StepUnderflow { partial, .. } | OdeError::TooManySteps { partial, .. } => Some(partial),
            OdeError::Field { partial, .. } => partial.as_deref(),
            _ => None,
        }
    }
}

fn direction_of(t0: f64, t1: f64) -> Direction {
    if t1 >= t0 {
        Direction::Forward
    } else {
        Direction::Backward
    }
}

fn start<'a, F: VectorField + ?Sized>(
    field: &'a F,
    x0: &[f64],
    t0: f64,
    t1: f64,
    tol: Tolerances,
) -> Result<Stepper<'a, F>, OdeError> {
    Stepper::new(field, x0, t0, t1, tol).map_err(|source| OdeError::Field {
        t: t0,
        state: x0.to_vec(),
        source,
        partial: None,
    })
}

fn step_failure(err: StepError, stepper_t: f64, state: &[f64], mut traj: Trajectory) -> OdeError {
    traj.status = TrajectoryStatus::StepFailure;
    let state = state.to_vec();
    match err {
        StepError::Underflow => OdeError::StepUnderflow {
            t: stepper_t,
            state,
            partial: Box::new(traj),
        },
        StepError::TooManySteps => OdeError::TooManySteps {
            t: stepper_t,
            state,
            partial: Box::new(traj),
        },
        StepError::Field(source) => OdeError::Field {
            t: stepper_t,
            state,
            source,
            partial: Some(Box::new(traj)),
        },
    }
}

/// Integrates `ẋ = F(x)` from `(t0, x0)` to `t1` (backward when `t1 < t0`).
pub fn integrate<F: VectorField + ?Sized>(
    field: &F,
    x0: &[f64],
    span: (f64, f64),
    tol: Tolerances,
) -> Result<Trajectory, OdeError> {
    let (t0, t1) = span;
    if t0 == t1 {
        return Err(OdeError::EmptySpan);
    }
    let mut traj = Trajectory::start(t0, x0, direction_of(t0, t1));
    let mut stepper = start(field, x0, t0, t1, tol)?;
    while !stepper.done() {
        match stepper.step() {
            Ok(seg) => traj.segments.push(seg),
            Err(e) => {
                let (t, y) = (stepper.t, stepper.y.clone());
                return Err(step_failure(e, t, &y, traj));
            }
        }
    }
    traj.status = TrajectoryStatus::Completed;
    Ok(traj)
}

/// Result of [`detect_event`].
#[derive(Debug, Clone)]
pub enum EventOutcome {
    Hit {
        t: f64,
        x: Vec<f64>,
        trajectory: Trajectory,
    },
    NoEvent {
        trajectory: Trajectory,
    },
}

/// Integrates from `x0` at `t = 0` towards `±t_max` and reports the first `t*` with
/// `event(φ(t*, x0)) = 0`.
///
/// Crossings are bracketed by sign changes between accepted steps and refined on the
/// dense output (Illinois false position with bisection safeguards) until the time
/// bracket is below `event_tol` and `|event| ≤ 1e-10·(1 + |event(x0)|)`.
pub fn detect_event<F, E>(
    field: &F,
    x0: &[f64],
    event: E,
    t_max: f64,
    direction: Direction,
    tol: Tolerances,
) -> Result<EventOutcome, OdeError>
where
    F: VectorField + ?Sized,
    E: Fn(&[f64]) -> Result<f64, FieldError>,
{
    let eval_event = |x: &[f64], t: f64| {
        event(x).map_err(|source| OdeError::Field {
            t,
            state: x.to_vec(),
            source,
            partial: None,
        })
    };
    let e0 = eval_event(x0, 0.0)?;
    let sign = if direction == Direction::Forward { 1.0 } else { -1.0 };
    let mut traj = Trajectory::start(0.0, x0, direction);
    if e0 == 0.0 {
        traj.status = TrajectoryStatus::EventHit;
        return Ok(EventOutcome::Hit {
            t: 0.0,
            x: x0.to_vec(),
            trajectory: traj,
        });
    }
    let scale = 1e-10 * (1.0 + e0.abs());
    let mut stepper = start(field, x0, 0.0, sign * t_max, tol)?;
    let mut e_prev = e0;
    while !stepper.done() {
        let seg = match stepper.step() {
            Ok(seg) => seg,
            Err(e) => {
                let (t, y) = (stepper.t, stepper.y.clone());
                return Err(step_failure(e, t, &y, traj));
            }
        };
        let e_new = eval_event(&seg.state_end, seg.t_end)?;
        if e_new == 0.0 || e_new.signum() != e_prev.signum() {
            let (t, x) = refine(&seg, &eval_event, e_prev, e_new, scale, tol.event_tol)?;
            traj.segments.push(seg);
            traj.status = TrajectoryStatus::EventHit;
            return Ok(EventOutcome::Hit { t, x, trajectory: traj });
        }
        e_prev = e_new;
        traj.segments.push(seg);
    }
    traj.status = TrajectoryStatus::MaxTime;
    Ok(EventOutcome::NoEvent { trajectory: traj })
}

fn refine<G>(
    seg: &Segment,
    event: &G,
    e_a: f64,
    e_b: f64,
    scale: f64,
    event_tol: f64,
) -> Result<(f64, Vec<f64>), OdeError>
where
    G: Fn(&[f64], f64) -> Result<f64, OdeError>,
{
    if e_b == 0.0 {
        return Ok((seg.t_end, seg.state_end.clone()));
    }
    let (mut ta, mut tb) = (seg.t_start, seg.t_end);
    let (mut fa, mut fb) = (e_a, e_b);
    let mut best = if fa.abs() <= fb.abs() {
        (ta, seg.state_start.clone(), fa)
    } else {
        (tb, seg.state_end.clone(), fb)
    };
    let mut side = 0i8;
    for iter in 0..400 {
        let width = (tb - ta).abs();
        let ulp_floor = 4.0 * f64::EPSILON * ta.abs().max(tb.abs()).max(1.0);
        if width <= event_tol.max(ulp_floor) && best.2.abs() <= scale {
            break;
        }
        if width <= ulp_floor {
            break;
        }
        let mut t = ta - fa * (tb - ta) / (fb - fa);
        let lo = ta.min(tb);
        let hi = ta.max(tb);
        // Fall back to bisection when false position stalls near an end.
        if !(t > lo + 0.01 * width && t < hi - 0.01 * width) || iter % 8 == 7 {
            t = 0.5 * (ta + tb);
        }
        let x = seg.eval(t);
        let ft = event(&x, t)?;
        if ft.abs() < best.2.abs() || (ft.abs() == best.2.abs() && (t - seg.t_start).abs() < (best.0 - seg.t_start).abs()) {
            best = (t, x.clone(), ft);
        }
        if ft == 0.0 {
            break;
        }
        if ft.signum() == fa.signum() {
            ta = t;
            fa = ft;
            if side == -1 {
                fb *= 0.5;
            }
            side = -1;
        } else {
            tb = t;
            fb = ft;
            if side == 1 {
                fa *= 0.5;
            }
            side = 1;
        }
    }
    Ok((best.0, best.1))
}

struct Augmented<'a, F: VectorField + ?Sized> {
    field: &'a F,
    n: usize,
}

impl<F: VectorField + ?Sized> VectorField for Augmented<'_, F> {
    fn dim(&self) -> usize {
        self.n + self.n * self.n
    }

    fn eval(&self, z: &[f64]) -> Result<Vec<f64>, FieldError> {
        let n = self.n;
        let x = &z[..n];
        let mut out = self.field.eval(x)?;
        let (jac, _) = self.field.jacobian(x)?;
        let phi = Matrix::from_row_major(n, n, z[n..].to_vec());
        out.extend_from_slice(jac.matmul(&phi).as_slice());
        Ok(out)
    }
}

/// Joint solution of the flow and its sensitivity matrix `Φ(t) = ∂φ(t, x0)/∂x0`.
#[derive(Debug, Clone)]
pub struct VariationalResult {
    n: usize,
    augmented: Trajectory,
}

impl VariationalResult {
    pub fn augmented(&self) -> &Trajectory {
        &self.augmented
    }

    pub fn state_at(&self, t: f64) -> Result<Vec<f64>, OdeError> {
        let mut z = self.augmented.interpolate(t)?;
        z.truncate(self.n);
        Ok(z)
    }

    pub fn phi_at(&self, t: f64) -> Result<Matrix, OdeError> {
        let z = self.augmented.interpolate(t)?;
        Ok(Matrix::from_row_major(self.n, self.n, z[self.n..].to_vec()))
    }

    pub fn final_state(&self) -> Vec<f64> {
        self.augmented.final_state()[..self.n].to_vec()
    }

    pub fn final_phi(&self) -> Matrix {
        Matrix::from_row_major(self.n, self.n, self.augmented.final_state()[self.n..].to_vec())
    }

    /// Φ at every accepted step endpoint.
    pub fn phi_nodes(&self) -> impl Iterator<Item = (f64, Matrix)> + '_ {
        self.augmented
            .nodes()
            .map(|(t, z)| (t, Matrix::from_row_major(self.n, self.n, z[self.n..].to_vec())))
    }
}

/// Integrates the `n + n²` augmented system `(ẋ, Φ̇) = (F(x), ∂F/∂x(x)·Φ)` with `Φ(t0) = I`.
pub fn integrate_variational<F: VectorField + ?Sized>(
    field: &F,
    x0: &[f64],
    span: (f64, f64),
    tol: Tolerances,
) -> Result<VariationalResult, OdeError> {
    let n = field.dim();
    let mut z0 = x0.to_vec();
    z0.extend_from_slice(Matrix::identity(n).as_slice());
    let aug = Augmented { field, n };
    let augmented = integrate(&aug, &z0, span, tol)?;
    Ok(VariationalResult { n, augmented })
}
