use clbf_core::builtin;
use clbf_core::control::closed_loop_field;
use clbf_core::field::{FieldError, FnField};
use clbf_core::hitting::{extra_crossings, hitting_time};
use clbf_core::linalg::{norm2, Matrix};
use clbf_core::ode::{detect_event, integrate, integrate_variational, Direction, EventOutcome, Tolerances};
use clbf_core::model::SystemSpec;
use clbf_core::sampling::Halton;

type Radius = fn(&[f64]) -> f64;

fn damped() -> FnField<impl Fn(&[f64]) -> Vec<f64> + Send + Sync> {
    // Divergence is the constant -0.3.
    FnField::new(2, |x: &[f64]| vec![x[1].sin(), -x[0] - 0.3 * x[1]])
}

#[test]
fn halving_time_event() {
    let f = FnField::new(1, |x: &[f64]| vec![-x[0]]);
    let ev = |x: &[f64]| Ok::<f64, FieldError>(x[0] - 0.5);
    match detect_event(&f, &[1.0], ev, 10.0, Direction::Forward, Tolerances::default()).unwrap() {
        EventOutcome::Hit { t, x, .. } => {
            assert!((t - 2f64.ln()).abs() < 1e-8, "{t}");
            assert!((x[0] - 0.5).abs() <= 1e-10 * 1.5);
        }
        other => panic!("{other:?}"),
    }
    let back = |x: &[f64]| Ok::<f64, FieldError>(x[0] - 2.0);
    match detect_event(&f, &[1.0], back, 10.0, Direction::Backward, Tolerances::default()).unwrap() {
        EventOutcome::Hit { t, x, .. } => {
            assert!((t + 2f64.ln()).abs() < 1e-8, "{t}");
            assert!((x[0] - 2.0).abs() <= 1e-10 * 2.0);
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn rotation_sensitivity() {
    let f = FnField::new(2, |x: &[f64]| vec![-x[1], x[0]]);
    let t = 2.0 * std::f64::consts::PI / 3.0;
    let var = integrate_variational(&f, &[1.0, 0.5], (0.0, t), Tolerances::default()).unwrap();
    let (c, s) = (t.cos(), t.sin());
    let exact = Matrix::from_rows(&[vec![c, -s], vec![s, c]]);
    assert!(var.final_phi().max_abs_diff(&exact) < 1e-8);
    let x = var.final_state();
    assert!((x[0] - (c - 0.5 * s)).abs() < 1e-8 && (x[1] - (s + 0.5 * c)).abs() < 1e-8);
}

#[test]
fn flow_is_a_semigroup_and_reversible() {
    let f = damped();
    let tol = Tolerances::default();
    let mut pts = Halton::new(2, 3);
    let bound = |x: &[f64]| 10.0 * (tol.atol + tol.rtol * clbf_core::linalg::norm_inf(x));
    for _ in 0..20 {
        let x0 = pts.next_in_box(&[(-2.0, 2.0), (-2.0, 2.0)]);
        let direct = integrate(&f, &x0, (0.0, 2.5), tol).unwrap().final_state().to_vec();
        let mid = integrate(&f, &x0, (0.0, 1.0), tol).unwrap().final_state().to_vec();
        let split = integrate(&f, &mid, (1.0, 2.5), tol).unwrap().final_state().to_vec();
        let gap = clbf_core::linalg::norm_inf(&clbf_core::linalg::sub(&direct, &split));
        assert!(gap <= bound(&direct), "{x0:?}: {gap}");
        let back = integrate(&f, &direct, (2.5, 0.0), tol).unwrap().final_state().to_vec();
        let gap = clbf_core::linalg::norm_inf(&clbf_core::linalg::sub(&back, &x0));
        assert!(gap <= bound(&x0), "{x0:?}: {gap}");
    }
}

#[test]
fn sensitivity_matches_perturbed_flows() {
    let f = damped();
    let tol = Tolerances::default();
    let x0 = [0.7, -0.4];
    let t = 3.0;
    let var = integrate_variational(&f, &x0, (0.0, t), tol).unwrap();
    let phi = var.final_phi();
    let step = 1e-5;
    for j in 0..2 {
        let mut p = x0;
        p[j] += step;
        let plus = integrate(&f, &p, (0.0, t), tol).unwrap().final_state().to_vec();
        p[j] -= 2.0 * step;
        let minus = integrate(&f, &p, (0.0, t), tol).unwrap().final_state().to_vec();
        for i in 0..2 {
            let fd = (plus[i] - minus[i]) / (2.0 * step);
            let exact = phi.row(i)[j];
            assert!((fd - exact).abs() <= 1e-4 * exact.abs().max(1e-3), "Φ[{i}][{j}] {exact} vs {fd}");
        }
    }
    for (s, m) in var.phi_nodes() {
        let det = m.determinant();
        assert!(det > 0.0);
        assert!((det - (-0.3 * s).exp()).abs() < 1e-7 * (1.0 + s), "t={s}: {det}");
    }
}

#[test]
fn hitting_time_is_consistent_with_the_flow() {
    // Distance to the origin: Euclidean for the plane, the first coordinate in polar form.
    let cases: [(SystemSpec, Radius); 2] = [(builtin::linear(), |x| norm2(x)), (builtin::polar(), |x| x[0])];
    for (spec, radius) in cases {
        let field = closed_loop_field(&spec).unwrap();
        let caps = spec.tolerances;
        let mut pts = Halton::new(2, 5);
        let mut checked = 0;
        while checked < 25 {
            let x = pts.next_in_box(&spec.domain_box);
            let r = radius(&x);
            if !(0.3..=0.9).contains(&r) || spec.h(&x).unwrap() <= 0.0 {
                continue;
            }
            checked += 1;
            let hit = hitting_time(&field, &spec.barrier, &x, &caps).unwrap();
            assert!(hit.t < 0.0);
            let hb = spec.h(&hit.x_hit).unwrap();
            let scale = 1.0 + norm2(&spec.grad_h(&hit.x_hit).unwrap()) * norm2(&hit.x_hit);
            assert!(hb.abs() <= 1e-10 * scale, "h(x_hit) = {hb}");
            assert_eq!(extra_crossings(&field, &spec.barrier, &hit, &spec.domain_box, &caps).unwrap(), 0);

            let s = 0.05;
            let y = integrate(&field, &x, (0.0, s), caps.ode).unwrap().final_state().to_vec();
            let later = hitting_time(&field, &spec.barrier, &y, &caps).unwrap();
            assert!((later.t - (hit.t - s)).abs() < 1e-6, "{x:?}: {} vs {}", later.t, hit.t - s);
        }
    }
}

#[test]
fn outside_points_hit_forward() {
    let spec = builtin::linear();
    let field = closed_loop_field(&spec).unwrap();
    let hit = hitting_time(&field, &spec.barrier, &[0.0, -2.5], &spec.tolerances).unwrap();
    assert!((hit.t - 2.5f64.ln()).abs() < 1e-8);
    assert!((hit.x_hit[1] + 1.0).abs() < 1e-8);
    assert!(hit.denom > 0.0);
}
