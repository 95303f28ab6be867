//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits non-zero if any fails.

use std::f64::consts::PI;
use std::time::Instant;

use clbf_core::builtin;
use clbf_core::clbf::{
    clbf_grid, verify_clbf, ClbfBuilder, GridSpec, RawV, SampleCounts, Status, VerifyTolerances,
};
use clbf_core::compat::{compat_report, strict_feasible, Mode};
use clbf_core::control::{
    closed_loop_field, min_norm_point, simulate_closed_loop, sontag, ClosedLoop, HalfSpace,
};
use clbf_core::expr::Expr;
use clbf_core::hitting::{grad_hitting_time, grad_t_fd, growth_probe, hitting_time};
use clbf_core::linalg::{dot, norm2, Matrix};
use clbf_core::model::{check_linearization, small_control_probe, ControllerKind};
use clbf_core::sampling::Halton;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn polar_hitting_time() -> Outcome {
    let spec = builtin::polar();
    let field = closed_loop_field(&spec).unwrap();
    let mut worst_t: f64 = 0.0;
    let mut worst_th: f64 = 0.0;
    let mut failures = 0;
    for r in [0.5, 0.8, 1.0, 1.5, 2.0] {
        for k in 0..8 {
            let th = 2.0 * PI * k as f64 / 8.0;
            match hitting_time(&field, &spec.barrier, &[r, th], &spec.tolerances) {
                Ok(hit) => {
                    let t_exact = (1.0 - 1.0 / (r * r)) / 2.0;
                    let th_exact = th + 0.4 * (1.0 - r.powf(-2.5));
                    worst_t = worst_t.max((hit.t - t_exact).abs());
                    worst_th = worst_th.max((hit.x_hit[1] - th_exact).abs());
                }
                Err(_) => failures += 1,
            }
        }
    }
    outcome(
        failures == 0 && worst_t <= 1e-6 && worst_th <= 1e-5,
        format!("40 points, max |T err| = {worst_t:.2e} (tol 1e-6), max |θ_hit err| = {worst_th:.2e} (tol 1e-5), failures = {failures}"),
    )
}

fn polar_clbf() -> Outcome {
    let spec = builtin::polar();
    let field = closed_loop_field(&spec).unwrap();
    let b = ClbfBuilder::new(&spec, &field).unwrap();

    let boundary = clbf_core::compat::sample_boundary(&spec, 64, 11).unwrap();
    let mut bmax: f64 = 0.0;
    let mut bfail = 0;
    for x in &boundary {
        match b.w(x) {
            Ok(w) => bmax = bmax.max((w - 1.0).abs()),
            Err(_) => bfail += 1,
        }
    }

    let grid = GridSpec {
        ranges: vec![(0.2, 2.0), (0.0, 2.0 * PI * 40.0 / 41.0)],
        counts: vec![41, 41],
    };
    let pts = clbf_grid(&b, &grid);
    let mut sign_bad = 0;
    let mut classified = 0;
    let mut excluded = 0;
    for p in &pts {
        if p.status != Status::Ok {
            excluded += 1;
            continue;
        }
        if p.h.abs() > 1e-3 {
            classified += 1;
            if (p.w - 1.0).signum() != -p.h.signum() {
                sign_bad += 1;
            }
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut residuals = Vec::new();
    let mut skipped = 0;
    while residuals.len() < 100 {
        let x = [rng.gen_range(0.2..2.0), rng.gen_range(0.0..2.0 * PI)];
        match b.pde_residual(&x, None) {
            Ok(r) => residuals.push(r),
            Err(e) if e.status() == Status::LyapunovViolation => skipped += 1,
            Err(_) => {
                skipped += 1;
            }
        }
        if skipped > 10_000 {
            break;
        }
    }
    let rmax = residuals.iter().cloned().fold(0.0, f64::max);
    outcome(
        bfail == 0 && bmax <= 1e-7 && sign_bad == 0 && classified > 0 && residuals.len() == 100 && rmax <= 1e-5,
        format!(
            "boundary max |W-1| = {bmax:.2e} (tol 1e-7); grid sign mismatches = {sign_bad}/{classified} (status-ok, |h|>1e-3; {excluded} non-ok points excluded); max PDE residual = {rmax:.2e} over {} points (tol 1e-5; {skipped} non-ok draws skipped)",
            residuals.len()
        ),
    )
}

fn linear_reference() -> Outcome {
    let spec = builtin::linear();
    let field = closed_loop_field(&spec).unwrap();
    let b = ClbfBuilder::new(&spec, &field).unwrap();
    let mut seq = Halton::new(2, 7);
    let (mut et, mut eg, mut ew, mut efd): (f64, f64, f64, f64) = (0.0, 0.0, 0.0, 0.0);
    let mut fails = 0;
    let mut count = 0;
    while count < 100 {
        let u = seq.next_unit();
        let r = 0.1 + 2.9 * u[0];
        let th = 2.0 * PI * u[1];
        let x = [r * th.cos(), r * th.sin()];
        count += 1;
        let res = (|| -> Result<(), String> {
            let g = grad_hitting_time(&field, &spec.barrier, &x, &spec.tolerances).map_err(|e| e.to_string())?;
            et = et.max((g.hit.t - r.ln()).abs());
            let exact = [x[0] / (r * r), x[1] / (r * r)];
            eg = eg.max((g.grad[0] - exact[0]).abs().max((g.grad[1] - exact[1]).abs()));
            let w = b.w(&x).map_err(|e| e.to_string())?;
            ew = ew.max((w - r * r).abs());
            let fd = grad_t_fd(&field, &spec.barrier, &x, None, &spec.tolerances).map_err(|e| e.to_string())?;
            let d = [g.grad[0] - fd[0], g.grad[1] - fd[1]];
            efd = efd.max(norm2(&d) / norm2(&g.grad));
            Ok(())
        })();
        if res.is_err() {
            fails += 1;
        }
    }
    outcome(
        fails == 0 && et <= 1e-6 && eg <= 1e-5 && ew <= 1e-6 && efd <= 1e-4,
        format!("100 points |x| ∈ [0.1, 3]: max |T - ln|x|| = {et:.2e}, max |∇T err| = {eg:.2e}, max |W - |x|²| = {ew:.2e}, max quotient/FD rel diff = {efd:.2e}, failures = {fails}"),
    )
}

fn growth_laws() -> Outcome {
    let lin = builtin::linear();
    let lf = closed_loop_field(&lin).unwrap();
    let gl = growth_probe(&lf, &lin.barrier, &[1.0, 0.0], 0.5, 16, &lin.tolerances);
    let pol = builtin::polar();
    let pf = closed_loop_field(&pol).unwrap();
    let gp = growth_probe(&pf, &pol.barrier, &[1.0, 0.0], 0.8, 5, &pol.tolerances);
    match (gl, gp) {
        (Ok(gl), Ok(gp)) => outcome(
            (gl.slope + 1.0).abs() <= 0.02 && (gl.time_slope - 1.0).abs() <= 0.02 && (gp.slope + 3.0).abs() <= 0.05,
            format!(
                "linear |∇T| slope = {:.4} (−1 ± 0.02), linear |T| vs log(1/r) slope = {:.4} (1 ± 0.02), polar |∇T| slope = {:.4} (−3 ± 0.05)",
                gl.slope, gl.time_slope, gp.slope
            ),
        ),
        (a, b) => outcome(false, format!("probe failed: {:?} / {:?}", a.err(), b.err())),
    }
}

/// Feasibility of the open system by exhaustive grid search over `[−50, 50]^m`, pitch 0.25.
/// Returns (some grid point has both slacks ≥ 0.01, some grid point has both slacks > 0).
/// For `m = 3` the innermost coordinate is resolved exactly on its grid line.
fn grid_search(a0: f64, a: &[f64], b0: f64, b: &[f64], mode: Mode) -> (bool, bool) {
    let pitch = 0.25;
    let steps: i32 = 400;
    let coord = |k: i32| -50.0 + pitch * k as f64;
    let slacks = |u: &[f64]| {
        let sa = -a0 - dot(a, u);
        let sb = match mode {
            Mode::Interior => f64::INFINITY,
            Mode::Boundary => b0 + dot(b, u),
        };
        (sa, sb)
    };
    let mut robust = false;
    let mut any = false;
    let mut note = |sa: f64, sb: f64| {
        if sa >= 0.01 && sb >= 0.01 {
            robust = true;
        }
        if sa > 0.0 && sb > 0.0 {
            any = true;
        }
    };
    match a.len() {
        1 => {
            for i in 0..=steps {
                let (sa, sb) = slacks(&[coord(i)]);
                note(sa, sb);
            }
        }
        2 => {
            for i in 0..=steps {
                for j in 0..=steps {
                    let (sa, sb) = slacks(&[coord(i), coord(j)]);
                    note(sa, sb);
                }
            }
        }
        _ => {
            // Along a grid line in u3 each slack is affine, so the best grid value of
            // min(sa, sb) over the line is attained where the two cross or at the ends.
            for i in 0..=steps {
                for j in 0..=steps {
                    let base = [coord(i), coord(j), 0.0];
                    let (sa0, sb0) = slacks(&base);
                    let (ca, cb) = (-a[2], if mode == Mode::Boundary { b[2] } else { 0.0 });
                    let mut cands = vec![0, steps];
                    if (ca - cb).abs() > 0.0 && sb0.is_finite() {
                        let t = (sb0 - sa0) / (ca - cb);
                        let k = ((t + 50.0) / pitch).floor() as i32;
                        for kk in [k - 1, k, k + 1, k + 2] {
                            if (0..=steps).contains(&kk) {
                                cands.push(kk);
                            }
                        }
                    }
                    for k in cands {
                        let t = coord(k);
                        note(sa0 + ca * t, sb0 + cb * t);
                    }
                }
            }
        }
    }
    (robust, any)
}

fn compat_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let pick = |rng: &mut ChaCha8Rng, set: &[f64]| set[rng.gen_range(0..set.len())];
    let comps = [-2.0, -1.0, 0.0, 1.0, 2.0];
    let offsets = [-4.0, -2.0, 0.0, 2.0, 4.0];
    let mut disagreements = Vec::new();
    let mut n_feasible = 0;
    let mut bad_witness = 0;
    for inst in 0..1000 {
        let m = 1 + inst % 3;
        let vec_of = |rng: &mut ChaCha8Rng| (0..m).map(|_| pick(rng, &comps)).collect::<Vec<f64>>();
        let a0 = pick(&mut rng, &offsets);
        let b0 = pick(&mut rng, &offsets);
        let kind = rng.gen_range(0..6);
        let mode = if rng.gen_bool(0.2) { Mode::Interior } else { Mode::Boundary };
        let (a, b) = match kind {
            0 => (vec_of(&mut rng), vec_of(&mut rng)),
            1 => (vec![0.0; m], vec_of(&mut rng)),
            2 => (vec_of(&mut rng), vec![0.0; m]),
            3 | 4 => {
                let a = vec_of(&mut rng);
                let lam = pick(&mut rng, &[0.5, 1.0, 2.0]) * if kind == 3 { 1.0 } else { -1.0 };
                let b = a.iter().map(|v| lam * v).collect();
                (a, b)
            }
            _ => (vec![0.0; m], vec![0.0; m]),
        };
        let (feasible, witness) = strict_feasible(a0, &a, b0, &b, mode);
        let (robust, any) = grid_search(a0, &a, b0, &b, mode);
        if feasible {
            n_feasible += 1;
            let u = witness.unwrap_or_default();
            let ok_a = a0 + dot(&a, &u) < 0.0;
            let ok_b = mode == Mode::Interior || b0 + dot(&b, &u) > 0.0;
            if !(ok_a && ok_b) {
                bad_witness += 1;
            }
        }
        if feasible != robust || (!feasible && any) {
            disagreements.push((a0, a, b0, b, mode));
        }
    }

    let di = builtin::double_integrator();
    let rep = compat_report(&di, 256, 64, 1.0, 3).unwrap();
    let mut detected = [false, false];
    for x in &rep.counterexamples {
        for (k, s) in [1.0, -1.0].iter().enumerate() {
            if (x[0] - s).abs() < 1e-6 && x[1].abs() < 1e-6 {
                detected[k] = true;
            }
        }
    }
    let lin = builtin::linear();
    let lrep = compat_report(&lin, 256, 64, 1.0, 3).unwrap();
    outcome(
        disagreements.is_empty() && bad_witness == 0 && detected == [true, true] && !rep.pass && lrep.pass && lrep.worst_boundary_margin >= 0.5,
        format!(
            "1000 instances ({n_feasible} feasible): {} disagreements, {bad_witness} invalid witnesses; double integrator counterexamples at (+1,0): {}, (−1,0): {}; linear pass = {}, worst boundary margin = {:.6} (≥ 0.5)",
            disagreements.len(),
            detected[0],
            detected[1],
            lrep.pass,
            lrep.worst_boundary_margin
        ),
    )
}

/// Least `|u|²` over `{row_i·u ≤ rhs_i}` by successively refined grids; each level searches
/// a window around the previous level's best point.
fn grid_min_norm(cons: &[HalfSpace], m: usize) -> Option<f64> {
    let feasible = |u: &[f64]| cons.iter().all(|c| dot(&c.row, u) <= c.rhs);
    let mut center = vec![0.0; m];
    let mut half = 4.0;
    let mut best: Option<(f64, Vec<f64>)> = None;
    let per_axis: i32 = if m == 3 { 40 } else { 200 };
    for _level in 0..5 {
        let pitch = half / per_axis as f64;
        let mut idx = vec![-per_axis; m];
        loop {
            let u: Vec<f64> = (0..m).map(|d| center[d] + pitch * idx[d] as f64).collect();
            if feasible(&u) {
                let n = dot(&u, &u);
                if best.as_ref().is_none_or(|(bn, _)| n < *bn) {
                    best = Some((n, u));
                }
            }
            let mut d = 0;
            while d < m {
                idx[d] += 1;
                if idx[d] <= per_axis {
                    break;
                }
                idx[d] = -per_axis;
                d += 1;
            }
            if d == m {
                break;
            }
        }
        let (_, u) = best.as_ref()?;
        center = u.clone();
        half = 8.0 * pitch;
    }
    best.map(|(n, _)| n)
}

fn controller_suite() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let lin = builtin::linear();
    let di = builtin::double_integrator();
    let mut worst_sontag: f64 = 0.0;
    let mut seq = Halton::new(2, 1);
    for k in 0..500 {
        let spec = if k % 2 == 0 { &lin } else { &di };
        let x = seq.next_in_box(&spec.domain_box);
        let rows = clbf_core::compat::lie_rows(spec, &x).unwrap();
        let aa = dot(&rows.a, &rows.a);
        let u = sontag(spec, &x).unwrap();
        let target = (rows.a0 * rows.a0 + aa * aa).sqrt();
        if target == 0.0 {
            continue;
        }
        let lhs = rows.a0 + dot(&rows.a, &u) + target;
        worst_sontag = worst_sontag.max(lhs.abs() / target);
    }

    let mut worst_qp: f64 = 0.0;
    let mut qp_cases = 0;
    let mut qp_bad = 0;
    while qp_cases < 150 {
        let m = 1 + qp_cases % 3;
        let ncons = rng.gen_range(1..=2);
        let cons: Vec<HalfSpace> = (0..ncons)
            .map(|_| HalfSpace {
                row: (0..m).map(|_| rng.gen_range(-2.0..2.0)).collect(),
                rhs: rng.gen_range(-2.0..1.0),
            })
            .collect();
        let Some(u) = min_norm_point(&cons) else { continue };
        if norm2(&u) > 3.0 {
            continue;
        }
        qp_cases += 1;
        let slack_ok = cons.iter().all(|c| c.rhs - dot(&c.row, &u) >= -1e-9);
        match grid_min_norm(&cons, m) {
            Some(g) => {
                let q = dot(&u, &u);
                let rel = (q - g).abs() / g.max(1e-12);
                if !(q <= g * 1.01 + 1e-6 && g <= q * 1.01 + 1e-6) || !slack_ok {
                    qp_bad += 1;
                }
                if g > 1e-6 {
                    worst_qp = worst_qp.max(rel);
                }
            }
            None => qp_bad += 1,
        }
    }

    let field = ClosedLoop::new(&lin, ControllerKind::MinNormQp, lin.params).unwrap();
    let mut seq = Halton::new(2, 17);
    let mut min_h = f64::INFINITY;
    let mut sims = 0;
    let mut sim_err = 0;
    while sims < 100 {
        let u = seq.next_unit();
        let r = if sims % 4 == 0 { 1.0 } else { u[0].sqrt() };
        let th = 2.0 * PI * u[1];
        let x0 = [r * th.cos(), r * th.sin()];
        sims += 1;
        match simulate_closed_loop(&field, &x0, 10.0) {
            Ok(sim) if sim.truncated.is_none() => min_h = min_h.min(sim.monitors.min_h),
            _ => sim_err += 1,
        }
    }
    outcome(
        worst_sontag <= 1e-9 && qp_bad == 0 && sim_err == 0 && min_h >= -1e-6,
        format!(
            "Sontag identity max rel err = {worst_sontag:.2e} over 500 points; min-norm QP vs grid: {qp_bad}/{qp_cases} outside 1%, max rel diff = {worst_qp:.2e}; 100 safe starts: min path h = {min_h:.3e}, failed runs = {sim_err}"
        ),
    )
}

fn assumption_checks() -> Outcome {
    let lin = builtin::linear();
    let neg = check_linearization(&lin, &Matrix::identity(2).scale(-1.0)).unwrap();
    let pos = check_linearization(&lin, &Matrix::identity(2)).unwrap();
    let m_err = neg.m.max_abs_diff(&Matrix::identity(2).scale(-2.0));
    let probe = small_control_probe(&lin, &[1.0, 0.1, 0.01]).unwrap();
    let probe_ok = probe.iter().all(|r| r.pass && r.delta > 0.0);
    let deltas: Vec<String> = probe.iter().map(|r| format!("ε={}:δ={:.3e}", r.eps, r.delta)).collect();
    outcome(
        neg.pass && m_err <= 1e-9 && !pos.pass && probe_ok,
        format!(
            "K=−I pass = {}, max |M + 2I| = {m_err:.2e}; K=+I pass = {}; probe {}",
            neg.pass,
            pos.pass,
            deltas.join(", ")
        ),
    )
}

fn negative_control() -> Outcome {
    let spec = builtin::polar();
    let field = closed_loop_field(&spec).unwrap();
    let counts = SampleCounts {
        boundary: 64,
        interior: 32,
        exterior: 32,
    };
    let rep = verify_clbf(&spec, &field, &RawV(&spec), counts, VerifyTolerances::default(), 1).unwrap();
    outcome(
        !rep.verdicts.level_set && rep.boundary_max_abs_w_minus_1 >= 0.2,
        format!(
            "raw V: level-set condition = {}, boundary max |W−1| = {:.4} (≥ 0.2), overall pass = {}",
            rep.verdicts.level_set, rep.boundary_max_abs_w_minus_1, rep.pass
        ),
    )
}

fn random_expr(rng: &mut ChaCha8Rng, depth: usize) -> String {
    let names = ["x1", "x2", "x3"];
    if depth == 0 || rng.gen_bool(0.25) {
        return if rng.gen_bool(0.6) {
            names[rng.gen_range(0..3)].to_string()
        } else {
            format!("{:.3}", rng.gen_range(0.1..3.0))
        };
    }
    let sub = |rng: &mut ChaCha8Rng| random_expr(rng, depth - 1);
    match rng.gen_range(0..11) {
        0 => format!("({} + {})", sub(rng), sub(rng)),
        1 => format!("({} - {})", sub(rng), sub(rng)),
        2 => format!("({} * {})", sub(rng), sub(rng)),
        3 => format!("({} / (2 + sin({})))", sub(rng), sub(rng)),
        4 => format!("({})^{}", sub(rng), rng.gen_range(2..4)),
        5 => format!("sin({})", sub(rng)),
        6 => format!("cos({})", sub(rng)),
        7 => format!("exp(0.1*{})", sub(rng)),
        8 => format!("log(1 + ({})^2)", sub(rng)),
        9 => format!("sqrt(1 + ({})^2)", sub(rng)),
        _ => format!("-{}", sub(rng)),
    }
}

fn expression_layer() -> Outcome {
    let names = ["x1", "x2", "x3"];
    let mut rng = ChaCha8Rng::seed_from_u64(314);
    let mut worst: f64 = 0.0;
    let mut trees = 0;
    let mut skipped = 0;
    while trees < 200 {
        let src = random_expr(&mut rng, 4);
        let e = Expr::parse(&src, &names).unwrap_or_else(|err| panic!("{src}: {err}"));
        let x: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.5..1.5)).collect();
        let Ok(g) = e.grad(&x) else {
            skipped += 1;
            continue;
        };
        trees += 1;
        for j in 0..3 {
            let step = 1e-6 * x[j].abs().max(1.0);
            let mut p = x.clone();
            p[j] += step;
            let fp = e.eval(&p).unwrap();
            p[j] -= 2.0 * step;
            let fm = e.eval(&p).unwrap();
            let fd = (fp - fm) / (2.0 * step);
            let scale = g[j].abs().max(fd.abs()).max(1.0);
            worst = worst.max((g[j] - fd).abs() / scale);
        }
    }
    let eval = |s: &str| Expr::parse(s, &[] as &[&str]).unwrap().eval(&[]).unwrap();
    let prec = eval("2+3*4") == 14.0 && eval("2^3^2") == 512.0 && eval("-2^2") == -4.0;
    outcome(
        worst <= 1e-6 && prec,
        format!("200 random trees ({skipped} domain-error draws skipped): max AD/FD rel diff = {worst:.2e} (tol 1e-6); precedence fixtures exact = {prec}"),
    )
}

type Criterion = (&'static str, fn() -> Outcome);

fn main() {
    let criteria: [Criterion; 9] = [
        ("polar hitting time", polar_hitting_time),
        ("polar CLBF", polar_clbf),
        ("linear analytic reference", linear_reference),
        ("gradient growth laws", growth_laws),
        ("compatibility oracle", compat_oracle),
        ("controller suite", controller_suite),
        ("assumption checks", assumption_checks),
        ("negative control", negative_control),
        ("expression/AD layer", expression_layer),
    ];
    let mut failed = 0;
    let start = Instant::now();
    for (name, run) in criteria {
        let t = Instant::now();
        let o = run();
        if !o.pass {
            failed += 1;
        }
        println!(
            "{} {name} [{:.2}s]: {}",
            if o.pass { "PASS" } else { "FAIL" },
            t.elapsed().as_secs_f64(),
            o.detail
        );
    }
    println!(
        "acceptance: {}/{} criteria passed in {:.1}s",
        criteria.len() - failed,
        criteria.len(),
        start.elapsed().as_secs_f64()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
