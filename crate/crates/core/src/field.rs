//! Vector fields `x ↦ F(x)` consumed by the integrator, with Jacobians.

use serde::Serialize;
use thiserror::Error;

use crate::compat::PointFeasibility;
use crate::expr::{Expr, ExprError};
use crate::linalg::{norm_inf, Matrix};

#[derive(Debug, Clone, Error)]
pub enum FieldError {
    #[error(transparent)]
    Expr(#[from] ExprError),
    #[error("controller infeasible at x = {:?}", .0.x)]
    Infeasible(Box<PointFeasibility>),
    #[error("{0}")]
    Unsupported(String),
}

/// How a Jacobian was obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum JacobianSource {
    AutoDiff,
    FiniteDifference,
}

pub trait VectorField: Send + Sync {
    fn dim(&self) -> usize;

    fn eval(&self, x: &[f64]) -> Result<Vec<f64>, FieldError>;

    /// `∂F/∂x` at `x`. The default uses central differences.
    fn jacobian(&self, x: &[f64]) -> Result<(Matrix, JacobianSource), FieldError> {
        Ok((fd_jacobian(self, x)?, JacobianSource::FiniteDifference))
    }
}

impl<T: VectorField + ?Sized> VectorField for &T {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn eval(&self, x: &[f64]) -> Result<Vec<f64>, FieldError> {
        (**self).eval(x)
    }
    fn jacobian(&self, x: &[f64]) -> Result<(Matrix, JacobianSource), FieldError> {
        (**self).jacobian(x)
    }
}

/// Central-difference Jacobian with step `1e-6·max(1, |x|∞)`.
pub fn fd_jacobian<F: VectorField + ?Sized>(field: &F, x: &[f64]) -> Result<Matrix, FieldError> {
    let n = field.dim();
    let step = 1e-6 * norm_inf(x).max(1.0);
    let mut jac = Matrix::zeros(n, n);
    let mut probe = x.to_vec();
    for j in 0..n {
        probe[j] = x[j] + step;
        let plus = field.eval(&probe)?;
        probe[j] = x[j] - step;
        let minus = field.eval(&probe)?;
        probe[j] = x[j];
        for i in 0..n {
            jac[(i, j)] = (plus[i] - minus[i]) / (2.0 * step);
        }
    }
    Ok(jac)
}

/// A field given component-wise by parsed expressions; its Jacobian is exact (forward AD).
#[derive(Debug, Clone)]
pub struct ExprField {
    components: Vec<Expr>,
}

impl ExprField {
    pub fn new(components: Vec<Expr>) -> ExprField {
        ExprField { components }
    }

    pub fn components(&self) -> &[Expr] {
        &self.components
    }
}

impl VectorField for ExprField {
    fn dim(&self) -> usize {
        self.components.len()
    }

    fn eval(&self, x: &[f64]) -> Result<Vec<f64>, FieldError> {
        self.components
            .iter()
            .map(|e| e.eval(x).map_err(FieldError::from))
            .collect()
    }

    fn jacobian(&self, x: &[f64]) -> Result<(Matrix, JacobianSource), FieldError> {
        let n = self.components.len();
        let mut jac = Matrix::zeros(n, x.len());
        for (i, e) in self.components.iter().enumerate() {
            for (j, d) in e.grad(x)?.into_iter().enumerate() {
                jac[(i, j)] = d;
            }
        }
        Ok((jac, JacobianSource::AutoDiff))
    }
}

/// A field backed by closures, mainly for tests and analytic reference systems.
pub struct FnField<F, J = fn(&[f64]) -> Matrix> {
    dim: usize,
    f: F,
    jac: Option<J>,
}

impl<F> FnField<F>
where
    F: Fn(&[f64]) -> Vec<f64> + Send + Sync,
{
    pub fn new(dim: usize, f: F) -> Self {
        FnField { dim, f, jac: None }
    }
}

impl<F, J> FnField<F, J>
where
    F: Fn(&[f64]) -> Vec<f64> + Send + Sync,
    J: Fn(&[f64]) -> Matrix + Send + Sync,
{
    pub fn with_jacobian(dim: usize, f: F, jac: J) -> Self {
        FnField {
            dim,
            f,
            jac: Some(jac),
        }
    }
}

impl<F, J> VectorField for FnField<F, J>
where
    F: Fn(&[f64]) -> Vec<f64> + Send + Sync,
    J: Fn(&[f64]) -> Matrix + Send + Sync,
{
    fn dim(&self) -> usize {
        self.dim
    }

    fn eval(&self, x: &[f64]) -> Result<Vec<f64>, FieldError> {
        Ok((self.f)(x))
    }

    fn jacobian(&self, x: &[f64]) -> Result<(Matrix, JacobianSource), FieldError> {
        match &self.jac {
            Some(j) => Ok((j(x), JacobianSource::AutoDiff)),
            None => Ok((fd_jacobian(self, x)?, JacobianSource::FiniteDifference)),
        }
    }
}
