use clbf_core::builtin;
use clbf_core::clbf::{
    clbf_grid, smooth_compose, verify_clbf, ClbfBuilder, Evaluator, GridSpec, RawV, SampleCounts, Status,
    VerifyTolerances,
};
use clbf_core::compat::{lie_rows, margin, strict_feasible, Mode, PointFeasibility};
use clbf_core::control::{blend_weight, blended, closed_loop_field, min_norm_qp, qp_constraints, ClosedLoop};
use clbf_core::linalg::{dot, norm2, sub};
use clbf_core::model::{ControllerKind, SystemSpec};
use clbf_core::sampling::Halton;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Interior points of `C` away from the origin, drawn from the domain box.
fn inside_points(spec: &SystemSpec, radius: fn(&[f64]) -> f64, count: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut pts = Halton::new(spec.n, seed);
    let mut out = Vec::new();
    while out.len() < count {
        let x = pts.next_in_box(&spec.domain_box);
        if radius(&x) >= 0.3 && spec.h(&x).unwrap() > 1e-3 {
            out.push(x);
        }
    }
    out
}

/// A model and how to measure distance to its origin.
type Case = (SystemSpec, fn(&[f64]) -> f64);

fn cases() -> [Case; 2] {
    [(builtin::linear(), |x| norm2(x)), (builtin::polar(), |x| x[0])]
}

#[test]
fn w_decreases_along_the_flow_with_constant_denominator() {
    for (spec, radius) in cases() {
        let field = closed_loop_field(&spec).unwrap();
        let b = ClbfBuilder::new(&spec, &field).unwrap();
        for (k, x) in inside_points(&spec, radius, 100, 17).into_iter().enumerate() {
            let s = 0.1 * (k + 1) as f64 / 100.0;
            let here = b.evaluate(&x).unwrap();
            let y = b.flow(&x, s).unwrap();
            let there = b.evaluate(&y).unwrap();
            assert!(there.w < here.w, "{x:?}, s = {s}: {} !< {}", there.w, here.w);
            let rel = (there.denominator - here.denominator).abs() / here.denominator;
            assert!(rel <= 1e-6, "{x:?}: denominator drift {rel}");
        }
    }
}

#[test]
fn converse_integral_reproduces_w() {
    let spec = builtin::linear();
    let field = closed_loop_field(&spec).unwrap();
    let b = ClbfBuilder::new(&spec, &field).unwrap();
    let (integral, tail) = b.converse_integral(&[0.5, 0.0], 30.0, 3000).unwrap();
    assert!(tail < 1e-12);
    assert!((integral + tail - 0.25).abs() < 1e-3, "{integral} + {tail}");
    assert!((b.w(&[0.5, 0.0]).unwrap() - 0.25).abs() < 1e-9);
}

#[test]
fn linear_grid_is_the_squared_norm() {
    let spec = builtin::linear();
    let field = closed_loop_field(&spec).unwrap();
    let b = ClbfBuilder::new(&spec, &field).unwrap();
    let grid = GridSpec {
        ranges: vec![(-1.5, 1.5), (-1.5, 1.5)],
        counts: vec![41, 41],
    };
    let pts = clbf_grid(&b, &grid);
    assert_eq!(pts.len(), 41 * 41);
    let mut ok = 0;
    for p in &pts {
        if p.status != Status::Ok {
            assert_eq!(p.status, Status::OriginTooClose, "{:?}", p.x);
            continue;
        }
        ok += 1;
        let r2 = p.x[0] * p.x[0] + p.x[1] * p.x[1];
        assert!((p.w - r2).abs() <= 1e-8 * (1.0 + r2), "{:?}: {}", p.x, p.w);
        if p.h.abs() > 1e-3 {
            assert_eq!((p.w - 1.0).signum(), -p.h.signum(), "{:?}", p.x);
        }
    }
    assert!(ok >= 41 * 41 - 1);
}

#[test]
fn smoothing_preserves_verdicts() {
    let counts = SampleCounts {
        boundary: 32,
        interior: 60,
        exterior: 60,
    };
    let tol = VerifyTolerances::default();
    // ρ(W) = W² moves values near 1 twice as far as W does.
    let scaled = VerifyTolerances {
        tol_boundary: 2.0 * tol.tol_boundary,
        tol_sep: 2.0 * tol.tol_sep,
        ..tol
    };
    for (spec, _) in cases() {
        let field = closed_loop_field(&spec).unwrap();
        let b = ClbfBuilder::new(&spec, &field).unwrap();
        let plain = verify_clbf(&spec, &field, &b, counts, tol, 4).unwrap();
        let smooth = smooth_compose(&b, 2.0).unwrap();
        let composed = verify_clbf(&spec, &field, &smooth, counts, scaled, 4).unwrap();
        assert!(plain.pass, "{}", serde_json::to_string(&plain).unwrap());
        assert_eq!(plain.pass, composed.pass);
        assert_eq!(plain.verdicts.level_set, composed.verdicts.level_set);
        assert_eq!(plain.verdicts.sublevel, composed.verdicts.sublevel);
        assert!(composed.evaluator.contains(&b.name()));
    }
    let spec = builtin::polar();
    let field = closed_loop_field(&spec).unwrap();
    let raw = verify_clbf(&spec, &field, &RawV(&spec), counts, tol, 4).unwrap();
    let smooth_raw = verify_clbf(&spec, &field, &smooth_compose(RawV(&spec), 2.0).unwrap(), counts, scaled, 4).unwrap();
    assert!(!raw.pass && !smooth_raw.pass);
    assert!(!raw.verdicts.level_set && !smooth_raw.verdicts.level_set);
}

fn scaled_barrier(name: &str, c: f64) -> SystemSpec {
    let text = builtin::config_text(name).unwrap();
    let line = text.lines().find(|l| l.starts_with("h = ")).unwrap();
    let h = line.trim_start_matches("h = ").trim_matches('"');
    SystemSpec::from_toml_str(&text.replace(line, &format!("h = \"{c}*({h})\""))).unwrap()
}

#[test]
fn barrier_scaling_is_covariant() {
    for name in ["linear", "double_integrator"] {
        let base = scaled_barrier(name, 1.0);
        for c in [0.25, 3.0] {
            let scaled = scaled_barrier(name, c);
            let mut pts = Halton::new(2, 8);
            for _ in 0..50 {
                let x = pts.next_in_box(&base.domain_box);
                let r = lie_rows(&base, &x).unwrap();
                let rc = lie_rows(&scaled, &x).unwrap();
                assert!((rc.b0 - c * r.b0).abs() <= 1e-12 * (1.0 + r.b0.abs()));
                for (p, q) in rc.b.iter().zip(&r.b) {
                    assert!((p - c * q).abs() <= 1e-12 * (1.0 + q.abs()));
                }
                assert_eq!((rc.a0, &rc.a), (r.a0, &r.a));
                for mode in [Mode::Interior, Mode::Boundary] {
                    let f = PointFeasibility::from_rows(&x, &r, mode, f64::INFINITY).analytic_feasible;
                    let fc = PointFeasibility::from_rows(&x, &rc, mode, f64::INFINITY).analytic_feasible;
                    assert_eq!(f, fc, "{name} c = {c} at {x:?}");
                }
            }
        }
    }
}

#[test]
fn margin_controls_respect_the_bound() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for _ in 0..2000 {
        let m = rng.gen_range(1..=3);
        let vec = |rng: &mut ChaCha8Rng| (0..m).map(|_| rng.gen_range(-2.0..2.0)).collect::<Vec<f64>>();
        let (a, b) = (vec(&mut rng), vec(&mut rng));
        let (a0, b0) = (rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0));
        let bound = rng.gen_range(0.1..5.0);
        for mode in [Mode::Interior, Mode::Boundary] {
            let (eps, u) = margin(a0, &a, b0, &b, bound, mode);
            assert!(norm2(&u) <= bound * (1.0 + 1e-9), "{u:?} exceeds {bound}");
            assert!(-(a0 + dot(&a, &u)) >= eps - 1e-9);
            if mode == Mode::Boundary {
                assert!(b0 + dot(&b, &u) >= eps - 1e-9);
            }
            let (feasible, witness) = strict_feasible(a0, &a, b0, &b, mode);
            if eps > 1e-9 {
                assert!(feasible, "margin {eps} but analytically infeasible");
            }
            if let Some(w) = witness {
                assert!(a0 + dot(&a, &w) < 0.0);
                if mode == Mode::Boundary {
                    assert!(b0 + dot(&b, &w) > 0.0);
                }
            }
        }
    }
}

#[test]
fn qp_solution_satisfies_its_constraints() {
    let spec = builtin::linear();
    let params = spec.params;
    let mut pts = Halton::new(2, 2);
    for _ in 0..300 {
        let x = pts.next_in_box(&[(-1.0, 1.0), (-1.0, 1.0)]);
        if norm2(&x) < 1e-3 || spec.h(&x).unwrap() < 0.0 {
            continue;
        }
        let u = min_norm_qp(&spec, &x, &params).unwrap();
        let r = lie_rows(&spec, &x).unwrap();
        for c in qp_constraints(&r, spec.v(&x).unwrap(), spec.h(&x).unwrap(), &params) {
            assert!(c.rhs - dot(&c.row, &u) >= -1e-9, "{x:?}");
        }
        let f = spec.eval_dynamics(&x, &u).unwrap();
        let (v_dot, h_dot) = (dot(&spec.grad_v(&x).unwrap(), &f), dot(&spec.grad_h(&x).unwrap(), &f));
        assert!(v_dot <= -params.c_v * spec.v(&x).unwrap() + 1e-9);
        if spec.h(&x).unwrap() <= params.band {
            assert!(h_dot >= params.kappa - 1e-9);
        }
    }
}

#[test]
fn blended_law_is_continuous() {
    let spec = builtin::linear();
    let mut params = spec.params;
    params.r0 = Some(0.2);
    params.r1 = Some(0.5);
    let field = ClosedLoop::new(&spec, ControllerKind::Blended, params).unwrap();
    let dir = [0.6, 0.8];
    let ds = 1e-4;
    let mut prev: Option<Vec<f64>> = None;
    let mut w_prev = f64::INFINITY;
    for k in 1..=7000 {
        let s = k as f64 * ds;
        let x = [s * dir[0], s * dir[1]];
        let u = blended(&spec, &x, &params).unwrap();
        assert_eq!(u, field.input(&x).unwrap());
        if let Some(p) = &prev {
            // Both component laws are Lipschitz here with constant below 2.
            assert!(norm2(&sub(&u, p)) / ds < 5.0, "jump at |x| = {s}");
        }
        let w = blend_weight(s, 0.2, 0.5);
        assert!(w <= w_prev);
        w_prev = w;
        prev = Some(u);
    }
}
