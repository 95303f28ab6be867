//! On-disk configuration schema (TOML). Unknown keys are rejected.

use serde::{Deserialize, Serialize};

/// Feedback law used to close the loop in `f, g` mode; `external` means the closed-loop
/// field is given directly by `closed_loop`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControllerKind {
    Sontag,
    MinNormQp,
    Blended,
    #[serde(alias = "external-F", alias = "external_f")]
    External,
}

impl ControllerKind {
    pub fn name(self) -> &'static str {
        match self {
            ControllerKind::Sontag => "sontag",
            ControllerKind::MinNormQp => "min_norm_qp",
            ControllerKind::Blended => "blended",
            ControllerKind::External => "external",
        }
    }
}

impl std::str::FromStr for ControllerKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "sontag" => Ok(ControllerKind::Sontag),
            "min_norm_qp" => Ok(ControllerKind::MinNormQp),
            "blended" => Ok(ControllerKind::Blended),
            "external" | "external-F" | "external_f" => Ok(ControllerKind::External),
            other => Err(format!("unknown controller `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToleranceConfig {
    pub rtol: f64,
    pub atol: f64,
    pub event_tol: f64,
    pub r_min: f64,
    pub t_max: f64,
}

impl Default for ToleranceConfig {
    fn default() -> Self {
        ToleranceConfig {
            rtol: 1e-9,
            atol: 1e-12,
            event_tol: 1e-12,
            r_min: 1e-6,
            t_max: 50.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControllerParamsConfig {
    /// CLF decrease rate: `L_fV + L_gV u ≤ -c_v V`.
    pub c_v: f64,
    /// CBF inward slack: `L_fh + L_gh u ≥ kappa` inside the activation band.
    pub kappa: f64,
    /// Activation band `h(x) ≤ band`; defaults to `0.1·max h` over the domain box.
    pub band: Option<f64>,
    pub r0: Option<f64>,
    pub r1: Option<f64>,
}

impl Default for ControllerParamsConfig {
    fn default() -> Self {
        ControllerParamsConfig {
            c_v: 0.1,
            kappa: 1e-3,
            band: None,
            r0: None,
            r1: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemConfig {
    pub state_dim: usize,
    #[serde(default)]
    pub input_dim: usize,
    pub state_names: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub f: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub g: Option<Vec<Vec<String>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub closed_loop: Option<Vec<String>>,
    #[serde(rename = "V")]
    pub v: String,
    pub h: String,
    pub controller: ControllerKind,
    pub domain_box: Vec<[f64; 2]>,
    #[serde(default)]
    pub tolerances: ToleranceConfig,
    #[serde(rename = "gain_K", default, skip_serializing_if = "Option::is_none")]
    pub gain_k: Option<Vec<f64>>,
    #[serde(default)]
    pub controller_params: ControllerParamsConfig,
    /// State indices spanned by boundary-sampling rays; the remaining coordinates are
    /// held fixed per ray. Defaults to all coordinates (rays from the origin).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ray_dims: Option<Vec<usize>>,
}
