mod common;

use bidomain_core::ionic::{coercivity_check, IonicParams};
use proptest::prelude::*;

#[test]
fn equilibrium_at_rest() {
    let p = IonicParams::default();
    assert_eq!(p.i_ion(0.0, 0.0), 0.0);
    assert_eq!(p.r_gate(0.0, 0.0), 0.0);
}

#[test]
fn peak_potential_leaves_only_gating_term() {
    let p = IonicParams::default();
    for w in [0.0, 0.3, 1.0, 2.5] {
        assert!((p.i_ion(100.0, w) - p.eta1 * 100.0 * w).abs() < 1e-12);
    }
}

#[test]
fn cubic_against_exact_rationals() {
    // G = 6/5, v_th = 13, v_p = 100, eta1 = 22/5, at v = 50, w = 1/10
    let (num, den): (i128, i128) = {
        let g = (6, 5);
        let f1 = (13 - 50, 13);
        let f2 = (100 - 50, 100);
        let cubic = (g.0 * 50 * f1.0 * f2.0, g.1 * f1.1 * f2.1);
        let lin = (22 * 50, 5 * 10);
        (cubic.0 * lin.1 + lin.0 * cubic.1, cubic.1 * lin.1)
    };
    let exact = num as f64 / den as f64;
    let p = IonicParams::default();
    assert!((p.i_ion(50.0, 0.1) - exact).abs() <= 1e-13 * exact.abs());
    assert!((exact + 824.0 / 13.0).abs() < 1e-12);
}

#[test]
fn gating_rate_values() {
    let p = IonicParams::default();
    assert_eq!(p.r_gate(p.v_p, 1.0), 0.0);
    assert!((p.r_gate(13.0, 0.05) - 0.012 * (0.13 - 0.05)).abs() < 1e-16);
}

#[test]
fn constant_gating_partials() {
    let p = IonicParams::default();
    let tau = 0.05;
    for (v, w) in [(0.0, 0.0), (40.0, 0.2), (-10.0, 1.5)] {
        let d = p.partials(v, w);
        assert_eq!(d.dr_dw, -p.eta2);
        assert_eq!(1.0 - tau * d.dr_dw, 1.0 + p.eta2 * tau);
        assert_eq!(d.dr_dv, p.eta2 / p.v_p);
        assert_eq!(d.di_dw, p.eta1 * v);
    }
    assert_eq!(p.partials(0.0, 0.7).di_dw, 0.0);
}

fn best_fd_error(f: impl Fn(f64) -> f64, x: f64, exact: f64) -> f64 {
    [1e-3, 1e-4, 1e-5, 1e-6]
        .iter()
        .map(|h| {
            let fd = (f(x + h) - f(x - h)) / (2.0 * h);
            (fd - exact).abs() / exact.abs().max(1e-12)
        })
        .fold(f64::INFINITY, f64::min)
}

#[test]
fn partials_match_finite_differences() {
    let p = IonicParams::default();
    let (v, w) = (40.0, 0.2);
    let d = p.partials(v, w);
    assert!(best_fd_error(|x| p.i_ion(x, w), v, d.di_dv) <= 1e-7);
    assert!(best_fd_error(|x| p.i_ion(v, x), w, d.di_dw) <= 1e-7);
    assert!(best_fd_error(|x| p.r_gate(x, w), v, d.dr_dv) <= 1e-7);
    assert!(best_fd_error(|x| p.r_gate(v, x), w, d.dr_dw) <= 1e-7);
}

#[test]
fn rest_state_coercivity() {
    let p = IonicParams::default();
    let r = coercivity_check(&[0.0; 4], &[0.0; 4], 0.05, &p);
    assert!((r.c1 - (p.capacitance() + 0.05 * p.g)).abs() < 1e-15);
    assert!(r.hyp1 && r.hyp2);
    assert!((r.c2 - (1.0 + p.eta2 * 0.05)).abs() < 1e-15);
}

#[test]
fn coercivity_over_physiological_sweep() {
    let p = IonicParams::default();
    let mut v = Vec::new();
    let mut w = Vec::new();
    for i in 0..=100 {
        for j in 0..=20 {
            v.push(i as f64);
            w.push(j as f64 / 20.0);
        }
    }
    let r = coercivity_check(&v, &w, 0.05, &p);
    assert!(r.c1 > 0.0 && r.hyp1);
    assert!(r.hyp2);
    assert_eq!(r.hyp1, r.c1 > 0.0);
    assert_eq!(r.hyp3, r.cross > 0.0);
    // the cross term eta1 v - eta2 / v_p fails only near v = 0
    assert!(!r.hyp3);
    assert!(r.violations.iter().all(|&n| v[n] < 2e-4 + 1e-12));
    assert!((p.coercive_time_step() - 0.37).abs() < 5e-3);
}

#[test]
fn invalid_parameters_rejected() {
    let p = IonicParams {
        v_th: 120.0,
        ..Default::default()
    };
    assert!(p.validate().is_err());
    let p = IonicParams {
        g: -1.0,
        ..Default::default()
    };
    assert!(p.validate().is_err());
    assert!(IonicParams::default().validate().is_ok());
}

proptest! {
    #[test]
    fn partials_consistent(v in -20.0f64..120.0, w in 0.0f64..2.0) {
        let p = IonicParams::default();
        let d = p.partials(v, w);
        let h = 1e-5;
        let fd_v = (p.i_ion(v + h, w) - p.i_ion(v - h, w)) / (2.0 * h);
        let fd_w = (p.i_ion(v, w + h) - p.i_ion(v, w - h)) / (2.0 * h);
        let scale = d.di_dv.abs().max(1.0);
        prop_assert!((fd_v - d.di_dv).abs() <= 1e-6 * scale);
        prop_assert!((fd_w - d.di_dw).abs() <= 1e-6 * d.di_dw.abs().max(1.0));
        let fd_r = (p.r_gate(v + h, w) - p.r_gate(v - h, w)) / (2.0 * h);
        prop_assert!((fd_r - d.dr_dv).abs() <= 1e-6 * d.dr_dv.abs().max(1e-3));
    }

    #[test]
    fn gating_hypothesis_constant(v in -50.0f64..150.0, w in -1.0f64..3.0, tau in 0.001f64..1.0) {
        let p = IonicParams::default();
        let r = coercivity_check(&[v], &[w], tau, &p);
        prop_assert_eq!(r.c2, 1.0 + p.eta2 * tau);
    }
}
