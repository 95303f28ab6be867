mod manifest;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use clbf_core::builtin;
use clbf_core::clbf::{
    clbf_grid, grid_csv, smooth_compose, verify_clbf, ClbfBuilder, Evaluator, GridSpec, RawV, SampleCounts,
    Status, VerifyTolerances,
};
use clbf_core::compat::compat_report;
use clbf_core::control::{simulate_closed_loop, ClosedLoop};
use clbf_core::hitting::{batch_csv, growth_probe, hitting_batch, HitStatus};
use clbf_core::model::{check_linearization, load_system, small_control_probe, ControllerKind, SystemSpec};

use manifest::Manifest;

/// Exit codes: 0 pass, 1 usage or config error, 2 verification failure, 3 runtime
/// infeasibility.
#[derive(Debug)]
enum Failure {
    Usage(String),
    Verification(String),
    Infeasible(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Verification(_) => 2,
            Failure::Infeasible(_) => 3,
        }
    }
}

fn usage<E: std::fmt::Display>(e: E) -> Failure {
    Failure::Usage(e.to_string())
}

#[derive(Parser, Debug)]
#[command(name = "clbf-forge", version, about = "Safe-stabilization certificates: compatibility, controllers, hitting times, CLBF")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Sample strict CLF/CBF compatibility on the domain box and on the boundary.
    CheckCompat {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 1000)]
        n_interior: usize,
        #[arg(long, default_value_t = 200)]
        n_boundary: usize,
        /// Euclidean bound on the control used for margins.
        #[arg(long = "bound-u", default_value_t = 1.0)]
        bound_u: f64,
    },
    /// Linearization (needs gain_K) and small-control checks.
    CheckAssumptions {
        #[command(flatten)]
        common: Common,
        /// Control bounds for the small-control probe.
        #[arg(long, value_delimiter = ',', default_values_t = vec![1.0, 0.1, 0.01])]
        eps: Vec<f64>,
    },
    /// Integrate the closed loop from one initial state and record safety monitors.
    Simulate {
        #[command(flatten)]
        common: Common,
        /// Overrides the controller named in the config.
        /// Overrides the controller named in the config.
        #[arg(long)]
        controller: Option<ControllerKind>,
        /// Initial state, comma separated.
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true, required = true)]
        x0: Vec<f64>,
        #[arg(long, default_value_t = 200.0)]
        t_end: f64,
        /// Number of equally spaced intervals in the trajectory CSV.
        #[arg(long, default_value_t = 400)]
        samples: usize,
        /// Required |x(t_end)|.
        #[arg(long, default_value_t = 1e-3)]
        converge_tol: f64,
        /// Allowed violation of h ≥ 0 along the path.
        #[arg(long, default_value_t = 1e-6)]
        safety_tol: f64,
    },
    /// Hitting times of ∂C (and optionally their gradients) for a batch of states.
    Hitting {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        points: PointSource,
        /// Add quotient-formula gradient columns.
        #[arg(long)]
        gradients: bool,
        /// Overrides the controller named in the config.
        #[arg(long)]
        controller: Option<ControllerKind>,
    },
    /// Growth of |∇T| and |T| along a ray towards the origin.
    Growth {
        #[command(flatten)]
        common: Common,
        /// Ray direction, comma separated; normalized before use.
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true, required = true)]
        direction: Vec<f64>,
        #[arg(long, default_value_t = 0.5)]
        r_start: f64,
        #[arg(long, default_value_t = 12)]
        k_max: usize,
        /// Overrides the controller named in the config.
        #[arg(long)]
        controller: Option<ControllerKind>,
    },
    /// Evaluate W on a grid and verify the Lyapunov-barrier conditions on samples.
    BuildClbf {
        #[command(flatten)]
        common: Common,
        /// Grid as `lo:hi:count` per coordinate, comma separated. Defaults to the domain box
        /// with 41 points per axis.
        #[arg(long, allow_hyphen_values = true)]
        grid: Option<String>,
        /// Verify ρ∘W with ρ(s) = s^p instead of W.
        #[arg(long)]
        smooth_p: Option<f64>,
        /// Verify the raw Lyapunov function instead of W.
        #[arg(long)]
        raw_v: bool,
        #[arg(long, default_value_t = 64)]
        n_boundary: usize,
        #[arg(long, default_value_t = 200)]
        n_interior: usize,
        #[arg(long, default_value_t = 200)]
        n_exterior: usize,
        #[arg(long, default_value_t = 1e-7)]
        tol_boundary: f64,
        #[arg(long, default_value_t = 1e-6)]
        tol_sep: f64,
        #[arg(long, default_value_t = 1e-3)]
        h_margin: f64,
        /// Overrides the controller named in the config.
        #[arg(long)]
        controller: Option<ControllerKind>,
    },
    /// Print a built-in configuration (polar, linear, double_integrator).
    Example {
        name: String,
        /// Write to this file instead of standard output.
        #[arg(long)]
        file: Option<PathBuf>,
    },
}

#[derive(Args, Debug, Clone, Serialize)]
struct Common {
    /// System description (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Output directory.
    #[arg(long, env = "CLBF_FORGE_OUT", default_value = "clbf-out")]
    out: PathBuf,
    /// Seed for the quasi-random samples.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    overrides: ToleranceOverrides,
}

#[derive(Args, Debug, Clone, Default, Serialize)]
struct ToleranceOverrides {
    /// Integrator relative tolerance.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    rtol: Option<f64>,
    /// Integrator absolute tolerance.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    atol: Option<f64>,
    /// Width of the final time bracket around a crossing.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    event_tol: Option<f64>,
    /// Radius of the excluded ball around the origin.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    r_min: Option<f64>,
    /// Horizon for hitting-time searches.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    t_max: Option<f64>,
}

#[derive(Args, Debug)]
#[group(required = true, multiple = true)]
struct PointSource {
    /// File with one state per line (comma or whitespace separated; a non-numeric first
    /// line is treated as a header).
    #[arg(long)]
    points: Option<PathBuf>,
    /// A single state, comma separated; may be repeated.
    #[arg(long, allow_hyphen_values = true)]
    point: Vec<String>,
    /// Grid as `lo:hi:count` per coordinate, comma separated.
    #[arg(long, allow_hyphen_values = true)]
    grid: Option<String>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            match &f {
                Failure::Usage(m) => eprintln!("error: {m}"),
                Failure::Verification(m) => eprintln!("verification failed: {m}"),
                Failure::Infeasible(m) => eprintln!("infeasible: {m}"),
            }
            ExitCode::from(f.code())
        }
    }
}

fn load(common: &Common) -> Result<SystemSpec, Failure> {
    let mut spec = load_system(&common.config).map_err(usage)?;
    let o = &common.overrides;
    let t = &mut spec.tolerances;
    if let Some(v) = o.rtol {
        t.ode.rtol = v;
    }
    if let Some(v) = o.atol {
        t.ode.atol = v;
    }
    if let Some(v) = o.event_tol {
        t.ode.event_tol = v;
    }
    if let Some(v) = o.r_min {
        t.r_min = v;
    }
    if let Some(v) = o.t_max {
        t.t_max = v;
    }
    for (name, v) in [("rtol", t.ode.rtol), ("atol", t.ode.atol), ("event-tol", t.ode.event_tol), ("r-min", t.r_min), ("t-max", t.t_max)] {
        if !(v > 0.0 && v.is_finite()) {
            return Err(Failure::Usage(format!("--{name} must be positive and finite, got {v}")));
        }
    }
    for d in &spec.diagnostics {
        eprintln!("note: {d}");
    }
    Ok(spec)
}

fn field<'a>(spec: &'a SystemSpec, kind: Option<ControllerKind>) -> Result<ClosedLoop<'a>, Failure> {
    ClosedLoop::new(spec, kind.unwrap_or(spec.controller), spec.params).map_err(usage)
}

fn parse_grid(text: &str, n: usize) -> Result<GridSpec, Failure> {
    let axes: Vec<&str> = text.split(',').map(str::trim).collect();
    if axes.len() != n {
        return Err(Failure::Usage(format!("grid `{text}` has {} axes, the state has {n}", axes.len())));
    }
    let mut ranges = Vec::with_capacity(n);
    let mut counts = Vec::with_capacity(n);
    for a in axes {
        let parts: Vec<&str> = a.split(':').collect();
        let bad = || Failure::Usage(format!("grid axis `{a}` is not lo:hi:count"));
        if parts.len() != 3 {
            return Err(bad());
        }
        let lo: f64 = parts[0].trim().parse().map_err(|_| bad())?;
        let hi: f64 = parts[1].trim().parse().map_err(|_| bad())?;
        let c: usize = parts[2].trim().parse().map_err(|_| bad())?;
        if c == 0 || !lo.is_finite() || !hi.is_finite() {
            return Err(bad());
        }
        ranges.push((lo, hi));
        counts.push(c);
    }
    Ok(GridSpec { ranges, counts })
}

fn parse_state(text: &str, n: usize) -> Result<Vec<f64>, Failure> {
    let vals: Result<Vec<f64>, _> = text
        .split(|c: char| c == ',' || c.is_whitespace())
        .filter(|s| !s.is_empty())
        .map(str::parse::<f64>)
        .collect();
    match vals {
        Ok(v) if v.len() == n => Ok(v),
        Ok(v) => Err(Failure::Usage(format!("state `{text}` has {} entries, expected {n}", v.len()))),
        Err(e) => Err(Failure::Usage(format!("state `{text}`: {e}"))),
    }
}

fn collect_points(src: &PointSource, n: usize) -> Result<Vec<Vec<f64>>, Failure> {
    let mut pts = Vec::new();
    if let Some(path) = &src.points {
        let text = std::fs::read_to_string(path).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if i == 0 && line.chars().any(|c| c.is_ascii_alphabetic() && c != 'e' && c != 'E') {
                continue;
            }
            pts.push(parse_state(line, n)?);
        }
    }
    for p in &src.point {
        pts.push(parse_state(p, n)?);
    }
    if let Some(g) = &src.grid {
        pts.extend(parse_grid(g, n)?.points());
    }
    if pts.is_empty() {
        return Err(Failure::Usage("no points given".into()));
    }
    Ok(pts)
}

fn write_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("report serializes");
    s.push('\n');
    s
}

fn run(cli: Cli) -> Result<(), Failure> {
    let started = Instant::now();
    let argv: Vec<String> = std::env::args().collect();
    let (name, common) = match &cli.command {
        Command::Example { name, file } => return example(name, file.as_deref()),
        Command::CheckCompat { common, .. } => ("check-compat", common),
        Command::CheckAssumptions { common, .. } => ("check-assumptions", common),
        Command::Simulate { common, .. } => ("simulate", common),
        Command::Hitting { common, .. } => ("hitting", common),
        Command::Growth { common, .. } => ("growth", common),
        Command::BuildClbf { common, .. } => ("build-clbf", common),
    };
    let spec = load(common)?;
    std::fs::create_dir_all(&common.out).map_err(|e| Failure::Usage(format!("{}: {e}", common.out.display())))?;
    let mut manifest = Manifest::new(name, common, &argv);
    let result = dispatch(&cli.command, &spec, &mut manifest);
    manifest.finish(started.elapsed(), result.as_ref().err().map(Failure::code).unwrap_or(0));
    manifest.write().map_err(usage)?;
    result
}

fn dispatch(cmd: &Command, spec: &SystemSpec, manifest: &mut Manifest) -> Result<(), Failure> {
    match cmd {
        Command::CheckCompat {
            common,
            n_interior,
            n_boundary,
            bound_u,
        } => {
            if !(*bound_u > 0.0) {
                return Err(Failure::Usage("--bound-u must be positive".into()));
            }
            let rep = compat_report(spec, *n_interior, *n_boundary, *bound_u, common.seed).map_err(usage)?;
            manifest.output("compat_report.json", &write_json(&rep)).map_err(usage)?;
            println!(
                "compatibility: {} ({} interior, {} boundary samples, worst boundary margin {}, {} failures)",
                if rep.pass { "pass" } else { "FAIL" },
                rep.n_interior,
                rep.n_boundary,
                rep.worst_boundary_margin,
                rep.n_failures
            );
            for x in rep.counterexamples.iter().take(20) {
                println!("  counterexample {x:?}");
            }
            if rep.pass {
                Ok(())
            } else {
                Err(Failure::Verification(format!("{} infeasible samples", rep.n_failures)))
            }
        }
        Command::CheckAssumptions { eps, .. } => {
            #[derive(Serialize)]
            struct Report {
                linearization: Option<clbf_core::model::LinearizationReport>,
                linearization_error: Option<String>,
                small_control: Vec<clbf_core::model::ProbeRow>,
                pass: bool,
            }
            let (lin, lin_err) = match &spec.gain {
                Some(k) => match check_linearization(spec, k) {
                    Ok(r) => (Some(r), None),
                    Err(e) => (None, Some(e.to_string())),
                },
                None => (None, Some("no gain_K in config".to_string())),
            };
            let probe = small_control_probe(spec, eps).map_err(usage)?;
            let pass = lin.as_ref().is_some_and(|r| r.pass) && probe.iter().all(|r| r.pass);
            let rep = Report {
                linearization: lin,
                linearization_error: lin_err,
                small_control: probe,
                pass,
            };
            manifest.output("assumptions.json", &write_json(&rep)).map_err(usage)?;
            match (&rep.linearization, &rep.linearization_error) {
                (Some(r), _) => println!("linearization: {} (min pivot of -M {})", if r.pass { "pass" } else { "FAIL" }, r.min_pivot),
                (_, Some(e)) => println!("linearization: FAIL ({e})"),
                _ => {}
            }
            for r in &rep.small_control {
                println!("small control eps = {}: {} (delta = {})", r.eps, if r.pass { "pass" } else { "FAIL" }, r.delta);
            }
            if pass {
                Ok(())
            } else {
                Err(Failure::Verification("assumption check failed".into()))
            }
        }
        Command::Simulate {
            controller,
            x0,
            t_end,
            samples,
            converge_tol,
            safety_tol,
            ..
        } => {
            if x0.len() != spec.n {
                return Err(Failure::Usage(format!("--x0 has {} entries, expected {}", x0.len(), spec.n)));
            }
            if !(*t_end > 0.0) || *samples == 0 {
                return Err(Failure::Usage("--t-end and --samples must be positive".into()));
            }
            let cl = field(spec, *controller)?;
            let sim = simulate_closed_loop(&cl, x0, *t_end).map_err(usage)?;
            manifest.output("trajectory.csv", &sim.to_csv(&cl, *samples)).map_err(usage)?;
            #[derive(Serialize)]
            struct Report<'a> {
                controller: &'static str,
                x0: &'a [f64],
                t_end: f64,
                monitors: &'a clbf_core::control::Monitors,
                truncated: &'a Option<clbf_core::control::Truncation>,
                safe: bool,
                converged: bool,
            }
            let safe = sim.monitors.min_h >= -safety_tol;
            let converged = sim.monitors.final_norm <= *converge_tol;
            let rep = Report {
                controller: cl.kind().name(),
                x0,
                t_end: *t_end,
                monitors: &sim.monitors,
                truncated: &sim.truncated,
                safe,
                converged,
            };
            manifest.output("monitors.json", &write_json(&rep)).map_err(usage)?;
            println!(
                "simulate ({}): min h = {}, max V increase = {}, |x(t_end)| = {}",
                cl.kind().name(),
                sim.monitors.min_h,
                sim.monitors.max_v_increase,
                sim.monitors.final_norm
            );
            if let Some(tr) = &sim.truncated {
                return Err(Failure::Infeasible(format!("controller infeasible at t = {}, x = {:?}", tr.t, tr.x)));
            }
            match (safe, converged) {
                (true, true) => Ok(()),
                (false, _) => Err(Failure::Verification(format!("min h = {} below -{safety_tol}", sim.monitors.min_h))),
                (_, false) => Err(Failure::Verification(format!("|x(t_end)| = {} above {converge_tol}", sim.monitors.final_norm))),
            }
        }
        Command::Hitting {
            points,
            gradients,
            controller,
            ..
        } => {
            let pts = collect_points(points, spec.n)?;
            let cl = field(spec, *controller)?;
            let rows = hitting_batch(&cl, &spec.barrier, &pts, *gradients, &spec.tolerances);
            manifest.output("hitting.csv", &batch_csv(&rows, spec.n, *gradients)).map_err(usage)?;
            let bad = rows.iter().filter(|r| r.status != HitStatus::Ok).count();
            println!("hitting: {} points, {} ok, {} failed", rows.len(), rows.len() - bad, bad);
            for r in rows.iter().filter(|r| r.status != HitStatus::Ok).take(20) {
                println!("  {:?}: {} ({})", r.x, r.status.name(), r.message.as_deref().unwrap_or(""));
            }
            if bad == 0 {
                Ok(())
            } else {
                Err(Failure::Verification(format!("{bad} points without a hitting time")))
            }
        }
        Command::Growth {
            direction,
            r_start,
            k_max,
            controller,
            ..
        } => {
            if direction.len() != spec.n || direction.iter().all(|v| *v == 0.0) {
                return Err(Failure::Usage(format!("--direction needs {} entries, not all zero", spec.n)));
            }
            let cl = field(spec, *controller)?;
            let probe = growth_probe(&cl, &spec.barrier, direction, *r_start, *k_max, &spec.tolerances)
                .map_err(|e| Failure::Verification(e.to_string()))?;
            manifest.output("growth.csv", &probe.to_csv()).map_err(usage)?;
            manifest.output("growth.json", &write_json(&probe)).map_err(usage)?;
            println!("growth: slope log|∇T| vs log r = {}, slope |T| vs log(1/r) = {}", probe.slope, probe.time_slope);
            Ok(())
        }
        Command::BuildClbf {
            common,
            grid,
            smooth_p,
            raw_v,
            n_boundary,
            n_interior,
            n_exterior,
            tol_boundary,
            tol_sep,
            h_margin,
            controller,
        } => {
            let cl = field(spec, *controller)?;
            let builder = ClbfBuilder::new(spec, &cl).map_err(usage)?;
            let grid = match grid {
                Some(g) => parse_grid(g, spec.n)?,
                None => GridSpec {
                    ranges: spec.domain_box.clone(),
                    counts: vec![41; spec.n],
                },
            };
            let pts = clbf_grid(&builder, &grid);
            manifest.output("clbf_grid.csv", &grid_csv(&pts, spec.n)).map_err(usage)?;
            let counts = SampleCounts {
                boundary: *n_boundary,
                interior: *n_interior,
                exterior: *n_exterior,
            };
            let tol = VerifyTolerances {
                tol_boundary: *tol_boundary,
                tol_sep: *tol_sep,
                h_margin: *h_margin,
            };
            let evaluator: Box<dyn Evaluator + '_> = match (raw_v, smooth_p) {
                (true, Some(_)) => return Err(Failure::Usage("--raw-v and --smooth-p are exclusive".into())),
                (true, None) => Box::new(RawV(spec)),
                (false, Some(p)) => Box::new(smooth_compose(&builder, *p).map_err(usage)?),
                (false, None) => Box::new(&builder),
            };
            let rep = verify_clbf(spec, &cl, evaluator.as_ref(), counts, tol, common.seed).map_err(usage)?;
            manifest.output("clbf_report.json", &write_json(&rep)).map_err(usage)?;
            let non_ok = pts.iter().filter(|p| p.status != Status::Ok).count();
            println!(
                "build-clbf ({}): {}; boundary max |W-1| = {}, interior max W = {}, exterior min W = {}, decrease failures = {}, skipped samples = {}, non-ok grid points = {}/{}",
                rep.evaluator,
                if rep.pass { "pass" } else { "FAIL" },
                rep.boundary_max_abs_w_minus_1,
                rep.interior_max_w,
                rep.exterior_min_w,
                rep.decrease_failures,
                rep.skipped.len(),
                non_ok,
                pts.len()
            );
            if let Some(r) = rep.max_pde_residual {
                println!("  max PDE residual = {r}");
            }
            if rep.pass {
                Ok(())
            } else {
                Err(Failure::Verification(format!(
                    "decrease = {}, sublevel = {}, level set = {}",
                    rep.verdicts.decrease, rep.verdicts.sublevel, rep.verdicts.level_set
                )))
            }
        }
        Command::Example { .. } => unreachable!("handled before loading a config"),
    }
}

fn example(name: &str, file: Option<&Path>) -> Result<(), Failure> {
    let text = builtin::config_text(name).ok_or_else(|| {
        Failure::Usage(format!("unknown example `{name}`; choose one of {}", builtin::NAMES.join(", ")))
    })?;
    match file {
        Some(p) => std::fs::write(p, text).map_err(|e| Failure::Usage(format!("{}: {e}", p.display()))),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}
