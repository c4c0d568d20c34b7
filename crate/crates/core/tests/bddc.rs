mod common;

use std::sync::Arc;

use bidomain_core::assembly::{Bidomain, State};
use bidomain_core::bddc::{
    build_rho_scaling, partition_of_unity_error, subdomain_sigma_max, transform_local, Bddc, BddcOptions, Scaling,
    ScalingKind, WTilde,
};
use bidomain_core::geometry::{build_conductivity, build_fibers, Conductivities, Mesh};
use bidomain_core::ionic::IonicParams;
use bidomain_core::partition::{Decomposition, PrimalConfig};
use bidomain_core::schur::{assemble_local_fe, local_jacobians, SchurSystem};
use bidomain_core::sparse::CsrMatrix;
use nalgebra::{DMatrix, DVector};

struct Case {
    dec: Arc<Decomposition>,
    ks: Vec<CsrMatrix>,
    sigma_max: Vec<[f64; 2]>,
}

fn jacobian_case(n: [usize; 3], grid: [usize; 3], primal: PrimalConfig, state: impl Fn(usize) -> State) -> Case {
    let (mesh, t) = common::slab(n, 0.1);
    let dec = Arc::new(common::decompose(&mesh, grid, primal));
    let bd = Bidomain::new(IonicParams::default(), 0.05);
    let local_fe = assemble_local_fe(&mesh, &t, &dec).unwrap();
    let ks = local_jacobians(&bd, &local_fe, &dec, &state(mesh.n_nodes()));
    Case {
        sigma_max: subdomain_sigma_max(&dec, &t),
        dec,
        ks,
    }
}

/// Block-diagonal SPD local matrices diag(A_i + M, A_e + M, M).
fn spd_case(n: [usize; 3], grid: [usize; 3], primal: PrimalConfig) -> Case {
    let (mesh, t) = common::slab(n, 0.1);
    let dec = Arc::new(common::decompose(&mesh, grid, primal));
    let ks = assemble_local_fe(&mesh, &t, &dec)
        .unwrap()
        .iter()
        .map(|fe| {
            let ai = fe.a_i.linear_combination(1.0, &fe.m, 1.0);
            let ae = fe.a_e.linear_combination(1.0, &fe.m, 1.0);
            let nl = fe.n();
            CsrMatrix::from_blocks(
                &[nl; 3],
                &[nl; 3],
                &[
                    vec![Some(&ai), None, None],
                    vec![None, Some(&ae), None],
                    vec![None, None, Some(&fe.m)],
                ],
            )
        })
        .collect();
    Case {
        sigma_max: subdomain_sigma_max(&dec, &t),
        dec,
        ks,
    }
}

fn build(c: &Case, scaling: ScalingKind, deflate: bool) -> Bddc {
    let opts = BddcOptions {
        scaling,
        deflate,
        ..Default::default()
    };
    Bddc::new(c.dec.clone(), &c.ks, Some(&c.sigma_max), opts).unwrap()
}

fn random_tilde(b: &Bddc, seed: u64) -> WTilde {
    let dec = b.decomposition();
    WTilde {
        primal: common::random_vec(dec.n_primal, seed),
        dual: dec
            .subdomains
            .iter()
            .map(|s| common::random_vec(s.dual.len(), seed * 1000 + s.id as u64 + 1))
            .collect(),
    }
}

fn tilde_diff(a: &WTilde, b: &WTilde) -> f64 {
    let p = common::max_abs_diff(&a.primal, &b.primal);
    a.dual
        .iter()
        .zip(&b.dual)
        .map(|(x, y)| common::max_abs_diff(x, y))
        .fold(p, f64::max)
}

fn tilde_max(a: &WTilde) -> f64 {
    a.dual
        .iter()
        .map(|x| common::max_abs(x))
        .fold(common::max_abs(&a.primal), f64::max)
}

fn field_of(dec: &Decomposition, s: usize, q: usize) -> usize {
    dec.subdomains[s].gamma_global[q] / dec.n_gamma_nodes()
}

#[test]
fn rho_weights_follow_conductivity_ratio() {
    let m = Mesh::slab(4, 2, 2, [1.0; 3]).unwrap();
    let dec = common::decompose(&m, [2, 1, 1], PrimalConfig::V);
    for (sig, expect) in [
        ([[1e-3; 2], [1e-3; 2]], [0.5, 0.5]),
        ([[3e-3; 2], [1e-3; 2]], [0.75, 0.25]),
    ] {
        let Scaling::Rho { weights } = build_rho_scaling(&dec, &sig) else {
            panic!("expected rho scaling");
        };
        for (j, s) in dec.subdomains.iter().enumerate() {
            for (k, &(q, _)) in s.dual.iter().enumerate() {
                let w = weights[j][k];
                if field_of(&dec, j, q) == 2 {
                    assert!((w - 0.5).abs() < 1e-15);
                } else {
                    assert!((w - expect[j]).abs() < 1e-15);
                }
            }
        }
        assert!(partition_of_unity_error(&dec, &build_rho_scaling(&dec, &sig)) <= 1e-14);
    }
}

#[test]
fn deluxe_halves_between_identical_subdomains() {
    let mesh = Mesh::slab(4, 2, 2, [0.4, 0.2, 0.2]).unwrap();
    let iso = Conductivities {
        intra: [2e-3; 3],
        extra: [1e-3; 3],
    };
    let t = build_conductivity(&build_fibers(&mesh), iso, None).unwrap();
    let dec = Arc::new(common::decompose(&mesh, [2, 1, 1], PrimalConfig::V));
    let bd = Bidomain::new(IonicParams::default(), 0.05);
    let state = State {
        ui: vec![20.0; mesh.n_nodes()],
        ue: vec![0.0; mesh.n_nodes()],
        w: vec![0.1; mesh.n_nodes()],
    };
    let ks = local_jacobians(&bd, &assemble_local_fe(&mesh, &t, &dec).unwrap(), &dec, &state);
    let opts = BddcOptions {
        scaling: ScalingKind::Deluxe,
        ..Default::default()
    };
    let b = Bddc::new(dec.clone(), &ks, None, opts).unwrap();
    let Scaling::Deluxe { blocks } = b.scaling() else {
        panic!("expected deluxe scaling");
    };
    for bj in blocks {
        for blk in bj {
            let half = DMatrix::identity(blk.d.nrows(), blk.d.ncols()) * 0.5;
            assert!((&blk.d - half).abs().max() < 1e-10);
        }
    }
}

#[test]
fn partition_of_unity_both_scalings() {
    let c = jacobian_case([4, 4, 4], [2, 2, 2], PrimalConfig::VE, |n| common::random_state(n, 1));
    for (kind, symmetric) in [
        (ScalingKind::Rho, true),
        (ScalingKind::Deluxe, true),
        (ScalingKind::Deluxe, false),
    ] {
        let opts = BddcOptions {
            scaling: kind,
            deluxe_symmetric: symmetric,
            ..Default::default()
        };
        let b = Bddc::new(c.dec.clone(), &c.ks, Some(&c.sigma_max), opts).unwrap();
        assert!(partition_of_unity_error(&c.dec, b.scaling()) <= 1e-10);
    }
}

/// Schur complement of the symmetric part onto `dofs`, by dense elimination of `interior`.
fn dense_minor(k: &DMatrix<f64>, interior: &[usize], dofs: &[usize]) -> DMatrix<f64> {
    let sym = (k + k.transpose()) * 0.5;
    let pick = |r: &[usize], c: &[usize]| DMatrix::from_fn(r.len(), c.len(), |a, b| sym[(r[a], c[b])]);
    pick(dofs, dofs) - pick(dofs, interior) * pick(interior, interior).lu().solve(&pick(interior, dofs)).unwrap()
}

#[test]
fn deluxe_edge_operators_match_explicit_minors() {
    let c = jacobian_case([8, 8, 2], [2, 2, 1], PrimalConfig::V, |n| common::random_state(n, 3));
    let dec = &c.dec;
    let (_, edges, _) = dec.class_counts();
    assert_eq!(edges, 1);
    let edge = dec.classes.iter().position(|k| k.sharers.len() == 4).unwrap();
    let b = build(&c, ScalingKind::Deluxe, true);
    let Scaling::Deluxe { blocks } = b.scaling() else {
        panic!("expected deluxe scaling");
    };
    let mut minors = Vec::new();
    let mut ops = Vec::new();
    for (j, s) in dec.subdomains.iter().enumerate() {
        let blk = blocks[j]
            .iter()
            .find(|b| b.class == edge)
            .expect("edge block on every sharer");
        let khat = transform_local(dec, s, &c.ks[j]).to_dense();
        let dofs: Vec<usize> = blk.dual_idx.iter().map(|&k| s.gamma_dofs[s.dual[k].0]).collect();
        minors.push(dense_minor(&khat, &s.interior_dofs, &dofs));
        ops.push(blk.d.clone());
    }
    assert_eq!(ops.len(), 4);
    let sum: DMatrix<f64> = minors
        .iter()
        .fold(DMatrix::zeros(minors[0].nrows(), minors[0].ncols()), |a, m| a + m);
    let inv = sum.clone().lu().try_inverse().unwrap();
    let mut total = DMatrix::zeros(sum.nrows(), sum.ncols());
    for (m, d) in minors.iter().zip(&ops) {
        assert!((&inv * m - d).abs().max() < 1e-9);
        total += d;
    }
    assert!((total - DMatrix::identity(sum.nrows(), sum.ncols())).abs().max() < 1e-10);
}

#[test]
fn averaging_is_a_projection() {
    let c = jacobian_case([4, 4, 4], [2, 2, 2], PrimalConfig::VE, |n| common::random_state(n, 4));
    for kind in [ScalingKind::Rho, ScalingKind::Deluxe] {
        let b = build(&c, kind, true);
        for seed in 1..=10 {
            let u = random_tilde(&b, seed);
            let e = b.e_d(&u);
            let ee = b.e_d(&e);
            assert!(tilde_diff(&e, &ee) <= 1e-11 * tilde_max(&e));
            let pe = b.p_d(&e);
            assert!(tilde_max(&pe) <= 1e-11 * tilde_max(&e));
        }
    }
}

#[test]
fn continuous_vectors_are_fixed() {
    let c = jacobian_case([4, 4, 4], [2, 2, 2], PrimalConfig::VEF, |n| common::random_state(n, 5));
    for kind in [ScalingKind::Rho, ScalingKind::Deluxe] {
        let b = build(&c, kind, true);
        let v = common::random_vec(c.dec.n_gamma(), 6);
        let w = b.restrict_tilde(&v);
        assert!(common::max_abs_diff(&b.scaled_assemble_tilde(&w), &v) <= 1e-12);
        assert!(tilde_diff(&b.e_d(&w), &w) <= 1e-12);
        assert!(tilde_max(&b.p_d(&w)) <= 1e-12);
    }
}

#[test]
fn rho_average_is_arithmetic_mean_on_equal_face() {
    let c = jacobian_case([4, 2, 2], [2, 1, 1], PrimalConfig::V, |n| State::rest(n));
    let b = build(&c, ScalingKind::Rho, true);
    let u = random_tilde(&b, 7);
    let e = b.e_d(&u);
    let mut copies: std::collections::BTreeMap<usize, Vec<f64>> = Default::default();
    for (j, s) in c.dec.subdomains.iter().enumerate() {
        for (k, &(q, _)) in s.dual.iter().enumerate() {
            copies.entry(s.gamma_global[q]).or_default().push(u.dual[j][k]);
        }
    }
    for (j, s) in c.dec.subdomains.iter().enumerate() {
        for (k, &(q, _)) in s.dual.iter().enumerate() {
            let vals = &copies[&s.gamma_global[q]];
            assert_eq!(vals.len(), 2);
            assert!((e.dual[j][k] - (vals[0] + vals[1]) / 2.0).abs() < 1e-15);
        }
    }
}

#[test]
fn coarse_matrix_spd_for_spd_input() {
    let c = spd_case([4, 4, 4], [2, 2, 2], PrimalConfig::VE);
    for kind in [ScalingKind::Rho, ScalingKind::Deluxe] {
        let b = build(&c, kind, false);
        let s = b.coarse_matrix();
        assert_eq!(s.nrows(), c.dec.n_primal);
        assert!((s - s.transpose()).abs().max() <= 1e-12 * s.abs().max());
        assert!(s.clone().cholesky().is_some());
    }
}

#[test]
fn coarse_basis_is_discrete_harmonic() {
    let c = jacobian_case([4, 4, 4], [2, 2, 2], PrimalConfig::VE, |n| common::random_state(n, 8));
    let b = build(&c, ScalingKind::Rho, true);
    for (j, s) in c.dec.subdomains.iter().enumerate() {
        let khat = transform_local(&c.dec, s, &c.ks[j]).to_dense();
        let mut r = s.interior_dofs.clone();
        r.extend(s.dual.iter().map(|&(q, _)| s.gamma_dofs[q]));
        let p: Vec<usize> = s.primal.iter().map(|&(q, _)| s.gamma_dofs[q]).collect();
        let pick = |a: &[usize], bb: &[usize]| DMatrix::from_fn(a.len(), bb.len(), |x, y| khat[(a[x], bb[y])]);
        let res = pick(&r, &r) * b.local_phi(j) + pick(&r, &p);
        assert!(res.abs().max() <= 1e-11 * khat.abs().max());
    }
}

#[test]
fn single_subdomain_has_empty_coarse_problem() {
    let c = spd_case([3, 3, 3], [1, 1, 1], PrimalConfig::VE);
    let b = build(&c, ScalingKind::Rho, false);
    assert_eq!(b.coarse_matrix().nrows(), 0);
    assert!(b.apply(&[]).is_empty());
}

#[test]
fn preconditioner_is_linear() {
    let c = jacobian_case([4, 4, 4], [2, 2, 2], PrimalConfig::VE, |n| common::random_state(n, 9));
    for kind in [ScalingKind::Rho, ScalingKind::Deluxe] {
        let b = build(&c, kind, true);
        let r1 = common::random_vec(c.dec.n_gamma(), 10);
        let r2 = common::random_vec(c.dec.n_gamma(), 11);
        let alpha = -1.7;
        let comb: Vec<f64> = r1.iter().zip(&r2).map(|(a, c)| alpha * a + c).collect();
        let lhs = b.apply(&comb);
        let z1 = b.apply(&r1);
        let z2 = b.apply(&r2);
        let rhs: Vec<f64> = z1.iter().zip(&z2).map(|(a, c)| alpha * a + c).collect();
        assert!(common::max_abs_diff(&lhs, &rhs) <= 1e-12 * common::max_abs(&lhs));
    }
}

fn dense_operator(n: usize, f: impl Fn(&[f64]) -> Vec<f64>) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(n, n);
    for c in 0..n {
        let mut e = vec![0.0; n];
        e[c] = 1.0;
        m.set_column(c, &DVector::from_vec(f(&e)));
    }
    m
}

#[test]
fn spd_preconditioned_spectrum_bounded_below_by_one() {
    let c = spd_case([4, 4, 2], [2, 2, 1], PrimalConfig::VE);
    let schur = SchurSystem::new(c.dec.clone(), c.ks.clone()).unwrap();
    let n = schur.n_gamma();
    let s = dense_operator(n, |x| schur.apply(x));
    for kind in [ScalingKind::Rho, ScalingKind::Deluxe] {
        let b = build(&c, kind, false);
        let minv = dense_operator(n, |x| b.apply(x));
        assert!((&minv - minv.transpose()).abs().max() <= 1e-10 * minv.abs().max());
        let l = ((&minv + minv.transpose()) * 0.5)
            .cholesky()
            .expect("SPD preconditioner")
            .l();
        let sym = l.transpose() * &s * &l;
        let ev = ((&sym + sym.transpose()) * 0.5).symmetric_eigenvalues();
        let (lo, hi) = (ev.min(), ev.max());
        assert!(lo >= 1.0 - 1e-8, "{kind}: smallest eigenvalue {lo}");
        assert!(hi.is_finite() && hi < 1e3, "{kind}: largest eigenvalue {hi}");
    }
}
