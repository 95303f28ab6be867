//! Ready-to-run configurations.

use crate::model::SystemSpec;

/// Closed-loop system in polar coordinates `(r, θ)` with `ṙ = −r³`, `θ̇ = r^{-1/2}`.
/// Its flow is known in closed form: `r(t) = r₀/√(1 + 2r₀²t)`, so the boundary `r = 1`
/// is reached at `T = (1 − 1/r₀²)/2`.
pub const POLAR_TOML: &str = r#"# Closed-loop system in polar coordinates (r, th).
state_dim = 2
state_names = ["r", "th"]
closed_loop = ["-r^3", "r^(-1/2)"]
V = "4*r^2 + r^5*sin(th)"
h = "1 - r^2"
controller = "external"
domain_box = [[0.0, 2.5], [0.0, 6.283185307179586]]
# Boundary rays run along r only; th is fixed per ray.
ray_dims = [0]

[tolerances]
rtol = 1e-9
atol = 1e-12
event_tol = 1e-12
r_min = 1e-6
# Backward hitting times grow like 1/(2r^2) here.
t_max = 1000.0
"#;

/// `ẋ = u` with `V = |x|²/2` and the unit disk as safe set.
pub const LINEAR_TOML: &str = r#"# Single integrator in the plane with a unit-disk safe set.
state_dim = 2
input_dim = 2
state_names = ["x1", "x2"]
f = ["0", "0"]
g = [["1", "0"], ["0", "1"]]
V = "(x1^2 + x2^2)/2"
h = "1 - x1^2 - x2^2"
controller = "sontag"
domain_box = [[-3.0, 3.0], [-3.0, 3.0]]
gain_K = [-1.0, 0.0, 0.0, -1.0]

[tolerances]
rtol = 1e-9
atol = 1e-12
event_tol = 1e-12
r_min = 1e-6
t_max = 50.0

[controller_params]
c_v = 0.1
kappa = 1e-3
r0 = 0.2
r1 = 0.5
"#;

/// Double integrator with the unit disk as safe set. The barrier has no control authority
/// at `(±1, 0)`, where strict compatibility fails.
pub const DOUBLE_INTEGRATOR_TOML: &str = r#"# Double integrator; h = 1 - |x|^2 loses control authority at (+-1, 0).
state_dim = 2
input_dim = 1
state_names = ["x1", "x2"]
f = ["x2", "0"]
g = [["0"], ["1"]]
V = "x1^2 + x1*x2 + x2^2"
h = "1 - x1^2 - x2^2"
controller = "min_norm_qp"
domain_box = [[-1.5, 1.5], [-1.5, 1.5]]
gain_K = [-1.0, -1.0]

[tolerances]
rtol = 1e-9
atol = 1e-12
event_tol = 1e-12
r_min = 1e-6
t_max = 50.0

[controller_params]
c_v = 0.1
kappa = 1e-3
"#;

pub const NAMES: [&str; 3] = ["polar", "linear", "double_integrator"];

pub fn config_text(name: &str) -> Option<&'static str> {
    match name {
        "polar" => Some(POLAR_TOML),
        "linear" => Some(LINEAR_TOML),
        "double_integrator" => Some(DOUBLE_INTEGRATOR_TOML),
        _ => None,
    }
}

pub fn polar() -> SystemSpec {
    SystemSpec::from_toml_str(POLAR_TOML).expect("built-in polar config is valid")
}

pub fn linear() -> SystemSpec {
    SystemSpec::from_toml_str(LINEAR_TOML).expect("built-in linear config is valid")
}

pub fn double_integrator() -> SystemSpec {
    SystemSpec::from_toml_str(DOUBLE_INTEGRATOR_TOML).expect("built-in double integrator config is valid")
}
