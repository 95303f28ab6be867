//! Numerical certificates for safe stabilisation of control-affine systems
//! `ẋ = f(x) + g(x)u`.
//!
//! Given a CLF candidate `V` and a CBF candidate `h` (safe set `C = {h ≥ 0}`), the crate
//! checks strict compatibility of the two, synthesises pointwise feedback laws, computes
//! the hitting time `T(x)` of `∂C` along the closed-loop flow together with its gradient,
//! and builds the unified Lyapunov-barrier function `W(x) = V(x)/V(φ(T(x), x))`, whose
//! unit sublevel set is exactly `C`.

pub mod builtin;
pub mod clbf;
pub mod compat;
pub mod control;
pub mod export;
pub mod expr;
pub mod field;
pub mod hitting;
pub mod linalg;
pub mod model;
pub mod ode;
pub mod sampling;
