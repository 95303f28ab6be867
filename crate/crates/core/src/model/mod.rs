//! Control-affine system model `ẋ = f(x) + g(x)u` with a CLF candidate `V` and a CBF
//! candidate `h` (safe set `C = {h ≥ 0}`), loaded from a TOML document.

mod assumptions;
mod config;

use std::path::Path;

use thiserror::Error;

use crate::expr::{Expr, ExprError};
use crate::field::{ExprField, FieldError, JacobianSource, VectorField};
use crate::linalg::{norm2, Matrix};
use crate::ode;
use crate::sampling::Halton;

pub use assumptions::{check_linearization, small_control_probe, LinearizationReport, ProbeRow};
pub use config::{ControllerKind, ControllerParamsConfig, SystemConfig, ToleranceConfig};

/// Number of quasi-random points used to validate a freshly loaded model.
pub const VALIDATION_SAMPLES: usize = 1024;
const ORIGIN_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Error)]
pub enum ModelError {
    #[error("cannot read config: {0}")]
    Io(String),
    #[error("malformed config: {0}")]
    Format(String),
    #[error("in `{field}`: {source}")]
    Parse { field: String, source: ExprError },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("V(0) = {0}, expected 0")]
    LyapunovNonzeroAtOrigin(f64),
    #[error("origin outside safe set: h(0) = {0}")]
    OriginOutsideSafeSet(f64),
    #[error("f(0) = {0:?}, expected the zero vector")]
    DriftNonzeroAtOrigin(Vec<f64>),
    #[error("V is not positive at x = {x:?} (V = {value}) inside the safe set")]
    NotPositiveDefinite { x: Vec<f64>, value: f64 },
    #[error("evaluating `{field}` at {x:?}: {source}")]
    Eval { field: String, x: Vec<f64>, source: ExprError },
    #[error("operation requires f, g mode; this model supplies the closed loop directly")]
    ClosedLoopMode,
    #[error("Hessian of V at 0 could not be computed: {0}")]
    Hessian(String),
    #[error("∇²V(0) is not positive definite (pivots {pivots:?}); V is not locally quadratic-positive")]
    HessianNotPositive { pivots: Vec<f64> },
}

#[derive(Debug, Clone)]
pub enum Dynamics {
    /// `f` (n entries) and `g` (n rows of m entries).
    ControlAffine { f: Vec<Expr>, g: Vec<Vec<Expr>> },
    /// `F(x)` given directly.
    ClosedLoop(Vec<Expr>),
}

/// Analysis tolerances: integrator settings plus the origin exclusion radius and the
/// hitting-time horizon.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnalysisTolerances {
    pub ode: ode::Tolerances,
    pub r_min: f64,
    pub t_max: f64,
}

impl From<ToleranceConfig> for AnalysisTolerances {
    fn from(c: ToleranceConfig) -> Self {
        AnalysisTolerances {
            ode: ode::Tolerances {
                rtol: c.rtol,
                atol: c.atol,
                event_tol: c.event_tol,
                ..ode::Tolerances::default()
            },
            r_min: c.r_min,
            t_max: c.t_max,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ControllerParams {
    pub c_v: f64,
    pub kappa: f64,
    pub band: f64,
    pub r0: Option<f64>,
    pub r1: Option<f64>,
}

/// A validated model. Immutable after loading.
#[derive(Debug, Clone)]
pub struct SystemSpec {
    pub n: usize,
    pub m: usize,
    pub state_names: Vec<String>,
    pub dynamics: Dynamics,
    pub lyapunov: Expr,
    pub barrier: Expr,
    pub controller: ControllerKind,
    pub params: ControllerParams,
    pub domain_box: Vec<(f64, f64)>,
    pub tolerances: AnalysisTolerances,
    /// `m × n` feedback gain for the local linear law.
    pub gain: Option<Matrix>,
    pub ray_dims: Vec<usize>,
    /// Non-fatal findings from load-time validation.
    pub diagnostics: Vec<String>,
    pub config: SystemConfig,
}

pub fn load_system(path: &Path) -> Result<SystemSpec, ModelError> {
    let text = std::fs::read_to_string(path).map_err(|e| ModelError::Io(format!("{}: {e}", path.display())))?;
    SystemSpec::from_toml_str(&text)
}

fn parse_field(src: &str, field: String, names: &[String]) -> Result<Expr, ModelError> {
    Expr::parse(src, names).map_err(|source| ModelError::Parse { field, source })
}

impl SystemSpec {
    pub fn from_toml_str(text: &str) -> Result<SystemSpec, ModelError> {
        let config: SystemConfig = toml::from_str(text).map_err(|e| ModelError::Format(e.to_string()))?;
        SystemSpec::from_config(config)
    }

    pub fn from_config(config: SystemConfig) -> Result<SystemSpec, ModelError> {
        let n = config.state_dim;
        if n == 0 {
            return Err(ModelError::Dimension("state_dim must be positive".into()));
        }
        if config.state_names.len() != n {
            return Err(ModelError::Dimension(format!(
                "state_names has {} entries for state_dim {n}",
                config.state_names.len()
            )));
        }
        let names = &config.state_names;
        Expr::parse("0", names).map_err(|source| ModelError::Parse {
            field: "state_names".into(),
            source,
        })?;

        let dynamics = match (&config.f, &config.g, &config.closed_loop) {
            (Some(f), Some(g), None) => {
                if config.controller == ControllerKind::External {
                    return Err(ModelError::Invalid(
                        "controller `external` requires `closed_loop` instead of f, g".into(),
                    ));
                }
                let m = config.input_dim;
                if m == 0 {
                    return Err(ModelError::Dimension("input_dim must be positive in f, g mode".into()));
                }
                if f.len() != n {
                    return Err(ModelError::Dimension(format!("f has {} entries, expected {n}", f.len())));
                }
                if g.len() != n || g.iter().any(|row| row.len() != m) {
                    return Err(ModelError::Dimension(format!("g must be {n}×{m}")));
                }
                let f = f
                    .iter()
                    .enumerate()
                    .map(|(i, s)| parse_field(s, format!("f[{i}]"), names))
                    .collect::<Result<Vec<_>, _>>()?;
                let g = g
                    .iter()
                    .enumerate()
                    .map(|(i, row)| {
                        row.iter()
                            .enumerate()
                            .map(|(j, s)| parse_field(s, format!("g[{i}][{j}]"), names))
                            .collect::<Result<Vec<_>, _>>()
                    })
                    .collect::<Result<Vec<_>, _>>()?;
                Dynamics::ControlAffine { f, g }
            }
            (None, None, Some(cl)) => {
                if config.controller != ControllerKind::External {
                    return Err(ModelError::Invalid(
                        "`closed_loop` requires controller = \"external\"".into(),
                    ));
                }
                if cl.len() != n {
                    return Err(ModelError::Dimension(format!(
                        "closed_loop has {} entries, expected {n}",
                        cl.len()
                    )));
                }
                Dynamics::ClosedLoop(
                    cl.iter()
                        .enumerate()
                        .map(|(i, s)| parse_field(s, format!("closed_loop[{i}]"), names))
                        .collect::<Result<Vec<_>, _>>()?,
                )
            }
            _ => {
                return Err(ModelError::Invalid(
                    "supply exactly one of {f, g} or closed_loop".into(),
                ))
            }
        };
        let m = match &dynamics {
            Dynamics::ControlAffine { .. } => config.input_dim,
            Dynamics::ClosedLoop(_) => 0,
        };

        let lyapunov = parse_field(&config.v, "V".into(), names)?;
        let barrier = parse_field(&config.h, "h".into(), names)?;

        if config.domain_box.len() != n {
            return Err(ModelError::Dimension(format!(
                "domain_box has {} intervals, expected {n}",
                config.domain_box.len()
            )));
        }
        let domain_box: Vec<(f64, f64)> = config.domain_box.iter().map(|[a, b]| (*a, *b)).collect();
        for (i, (lo, hi)) in domain_box.iter().enumerate() {
            if !(lo < hi) || !(*lo <= 0.0 && *hi >= 0.0) {
                return Err(ModelError::Invalid(format!(
                    "domain_box[{i}] = [{lo}, {hi}] must be a non-empty interval containing 0"
                )));
            }
        }

        let t = config.tolerances;
        if !(t.rtol > 0.0 && t.atol > 0.0 && t.event_tol > 0.0 && t.r_min > 0.0 && t.t_max > 0.0) {
            return Err(ModelError::Invalid("tolerances must be positive".into()));
        }

        let gain = match &config.gain_k {
            None => None,
            Some(k) => {
                if m == 0 || k.len() != m * n {
                    return Err(ModelError::Dimension(format!(
                        "gain_K has {} entries, expected input_dim × state_dim = {}",
                        k.len(),
                        m * n
                    )));
                }
                Some(Matrix::from_row_major(m, n, k.clone()))
            }
        };

        let ray_dims = match &config.ray_dims {
            None => (0..n).collect(),
            Some(d) => {
                let mut d = d.clone();
                d.sort_unstable();
                d.dedup();
                if d.is_empty() || d.iter().any(|&i| i >= n) {
                    return Err(ModelError::Invalid("ray_dims must list valid state indices".into()));
                }
                d
            }
        };

        let p = config.controller_params;
        if let (Some(r0), Some(r1)) = (p.r0, p.r1) {
            if !(0.0 < r0 && r0 < r1) {
                return Err(ModelError::Invalid(format!("need 0 < r0 < r1, got r0 = {r0}, r1 = {r1}")));
            }
        }
        if p.c_v < 0.0 || p.kappa < 0.0 || p.band.is_some_and(|b| b <= 0.0) {
            return Err(ModelError::Invalid("controller_params: c_v, kappa ≥ 0 and band > 0 required".into()));
        }

        let mut spec = SystemSpec {
            n,
            m,
            state_names: names.clone(),
            dynamics,
            lyapunov,
            barrier,
            controller: config.controller,
            params: ControllerParams {
                c_v: p.c_v,
                kappa: p.kappa,
                band: p.band.unwrap_or(f64::NAN),
                r0: p.r0,
                r1: p.r1,
            },
            domain_box,
            tolerances: t.into(),
            gain,
            ray_dims,
            diagnostics: Vec::new(),
            config,
        };
        spec.validate()?;
        Ok(spec)
    }

    fn eval_named(&self, e: &Expr, field: &str, x: &[f64]) -> Result<f64, ModelError> {
        e.eval(x).map_err(|source| ModelError::Eval {
            field: field.into(),
            x: x.to_vec(),
            source,
        })
    }

    fn validate(&mut self) -> Result<(), ModelError> {
        let zero = vec![0.0; self.n];
        let v0 = self.eval_named(&self.lyapunov, "V", &zero)?;
        if v0.abs() > ORIGIN_TOL {
            return Err(ModelError::LyapunovNonzeroAtOrigin(v0));
        }
        let h0 = self.eval_named(&self.barrier, "h", &zero)?;
        if h0 <= 0.0 {
            return Err(ModelError::OriginOutsideSafeSet(h0));
        }
        match &self.dynamics {
            Dynamics::ControlAffine { f, .. } => {
                let f0 = f
                    .iter()
                    .enumerate()
                    .map(|(i, e)| self.eval_named(e, &format!("f[{i}]"), &zero))
                    .collect::<Result<Vec<_>, _>>()?;
                if f0.iter().any(|v| v.abs() > ORIGIN_TOL) {
                    return Err(ModelError::DriftNonzeroAtOrigin(f0));
                }
            }
            Dynamics::ClosedLoop(cl) => {
                for (i, e) in cl.iter().enumerate() {
                    match e.eval(&zero) {
                        Ok(v) if v.abs() > ORIGIN_TOL => self
                            .diagnostics
                            .push(format!("closed_loop[{i}](0) = {v}; the origin is not an equilibrium")),
                        Ok(_) => {}
                        Err(err) => self
                            .diagnostics
                            .push(format!("closed_loop[{i}] is not evaluable at 0 ({err})")),
                    }
                }
            }
        }

        let mut seq = Halton::unshifted(self.n);
        let mut max_h = h0;
        let mut outside_nonpositive = 0usize;
        for _ in 0..VALIDATION_SAMPLES {
            let x = seq.next_in_box(&self.domain_box);
            if norm2(&x) == 0.0 {
                continue;
            }
            let v = self.eval_named(&self.lyapunov, "V", &x)?;
            let h = self.eval_named(&self.barrier, "h", &x)?;
            max_h = max_h.max(h);
            if v <= 0.0 {
                if h >= 0.0 {
                    return Err(ModelError::NotPositiveDefinite { x, value: v });
                }
                outside_nonpositive += 1;
            }
        }
        if outside_nonpositive > 0 {
            self.diagnostics.push(format!(
                "V ≤ 0 at {outside_nonpositive} of {VALIDATION_SAMPLES} box samples outside the safe set; \
                 the certificate domain is smaller than the box"
            ));
        }
        if self.params.band.is_nan() {
            self.params.band = 0.1 * max_h;
        }
        Ok(())
    }

    pub fn is_control_affine(&self) -> bool {
        matches!(self.dynamics, Dynamics::ControlAffine { .. })
    }

    pub fn v(&self, x: &[f64]) -> Result<f64, ExprError> {
        self.lyapunov.eval(x)
    }

    pub fn h(&self, x: &[f64]) -> Result<f64, ExprError> {
        self.barrier.eval(x)
    }

    pub fn grad_v(&self, x: &[f64]) -> Result<Vec<f64>, ExprError> {
        self.lyapunov.grad(x)
    }

    pub fn grad_h(&self, x: &[f64]) -> Result<Vec<f64>, ExprError> {
        self.barrier.grad(x)
    }

    /// `f(x)`; errors in closed-loop mode.
    pub fn drift(&self, x: &[f64]) -> Result<Vec<f64>, FieldError> {
        match &self.dynamics {
            Dynamics::ControlAffine { f, .. } => f.iter().map(|e| e.eval(x).map_err(Into::into)).collect(),
            Dynamics::ClosedLoop(_) => Err(FieldError::Unsupported("no drift in closed-loop mode".into())),
        }
    }

    /// `g(x)` as an `n × m` matrix; errors in closed-loop mode.
    pub fn input_matrix(&self, x: &[f64]) -> Result<Matrix, FieldError> {
        match &self.dynamics {
            Dynamics::ControlAffine { g, .. } => {
                let mut out = Matrix::zeros(self.n, self.m);
                for (i, row) in g.iter().enumerate() {
                    for (j, e) in row.iter().enumerate() {
                        out[(i, j)] = e.eval(x)?;
                    }
                }
                Ok(out)
            }
            Dynamics::ClosedLoop(_) => Err(FieldError::Unsupported("no input matrix in closed-loop mode".into())),
        }
    }

    /// `f(x) + g(x)u`, or `F(x)` in closed-loop mode (where `u` is ignored).
    pub fn eval_dynamics(&self, x: &[f64], u: &[f64]) -> Result<Vec<f64>, FieldError> {
        match &self.dynamics {
            Dynamics::ControlAffine { .. } => {
                if x.len() != self.n || u.len() != self.m {
                    return Err(FieldError::Unsupported(format!(
                        "expected state of length {} and input of length {}",
                        self.n, self.m
                    )));
                }
                let mut out = self.drift(x)?;
                let g = self.input_matrix(x)?;
                for (o, gu) in out.iter_mut().zip(g.matvec(u)) {
                    *o += gu;
                }
                Ok(out)
            }
            Dynamics::ClosedLoop(cl) => cl.iter().map(|e| e.eval(x).map_err(Into::into)).collect(),
        }
    }

    /// The drift `f` as a vector field (for linearisation).
    pub fn drift_field(&self) -> Option<ExprField> {
        match &self.dynamics {
            Dynamics::ControlAffine { f, .. } => Some(ExprField::new(f.clone())),
            Dynamics::ClosedLoop(_) => None,
        }
    }

    /// The supplied closed-loop field in external mode.
    pub fn external_field(&self) -> Option<ExprField> {
        match &self.dynamics {
            Dynamics::ClosedLoop(cl) => Some(ExprField::new(cl.clone())),
            Dynamics::ControlAffine { .. } => None,
        }
    }

    /// Euclidean distance to the origin, the quantity compared against `r_min`.
    pub fn radius(&self, x: &[f64]) -> f64 {
        norm2(x)
    }

    pub fn in_box(&self, x: &[f64]) -> bool {
        x.iter().zip(&self.domain_box).all(|(v, (lo, hi))| v >= lo && v <= hi)
    }
}

/// `∂F/∂x` at `x`: forward AD when the field is expression-backed, central differences
/// otherwise.
pub fn field_jacobian<F: VectorField + ?Sized>(field: &F, x: &[f64]) -> Result<(Matrix, JacobianSource), FieldError> {
    field.jacobian(x)
}
