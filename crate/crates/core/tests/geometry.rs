mod common;

use bidomain_core::geometry::{
    build_conductivity, build_fibers, conductivity_tensor, fiber_frame_at, Conductivities, EllipsoidParams, Mesh,
};
use nalgebra::{Matrix3, Rotation3, SymmetricEigen, Vector3};
use proptest::prelude::*;
use rand::Rng;

#[test]
fn slab_dof_count_48_48_24() {
    let m = Mesh::slab(48, 48, 24, [1.92, 1.92, 0.48]).unwrap();
    assert_eq!(m.n_nodes(), 60_025);
    assert_eq!(m.n_dofs(), 180_075);
}

#[test]
fn unit_cube_has_eight_nodes() {
    let m = Mesh::slab(1, 1, 1, [1.0; 3]).unwrap();
    assert_eq!(m.n_nodes(), 8);
    assert_eq!(m.n_elems(), 1);
}

#[test]
fn node_index_round_trip() {
    let m = Mesh::slab(4, 2, 2, [1.0; 3]).unwrap();
    assert_eq!(m.n_nodes(), 5 * 3 * 3);
    let mut seen = vec![false; 45];
    for k in 0..3 {
        for j in 0..3 {
            for i in 0..5 {
                let n = m.node_index(i, j, k);
                assert!(!seen[n]);
                seen[n] = true;
                assert_eq!(m.node_ijk(n), [i, j, k]);
            }
        }
    }
    assert!(seen.iter().all(|&s| s));
    assert_eq!(Mesh::slab(4, 2, 4, [1.0; 3]).unwrap().n_nodes(), 75);
}

#[test]
fn zero_dimension_rejected() {
    assert!(Mesh::slab(0, 2, 2, [1.0; 3]).is_err());
    assert!(Mesh::slab(2, 2, 2, [1.0, -1.0, 1.0]).is_err());
}

#[test]
fn degenerate_angles_rejected() {
    let p = EllipsoidParams {
        theta_max: -1.0,
        theta_min: -1.0,
        ..Default::default()
    };
    assert!(Mesh::ellipsoid(4, 4, 2, p).is_err());
}

#[test]
fn ellipsoid_corner_matches_parametric_formula() {
    let p = EllipsoidParams::default();
    let m = Mesh::ellipsoid(8, 8, 4, p).unwrap();
    let x = m.coords()[m.node_index(0, 0, 0)];
    let (phi, theta) = (p.phi_min, p.theta_min);
    let expect = [
        p.a1 * theta.cos() * phi.cos(),
        p.b1 * theta.cos() * phi.sin(),
        p.c1 * theta.sin(),
    ];
    for d in 0..3 {
        assert!((x[d] - expect[d]).abs() < 1e-14);
    }
    assert!(m.is_endocardial(m.node_index(0, 0, 0)));
    assert!(m.is_epicardial(m.node_index(0, 0, 4)));
}

#[test]
fn ellipsoid_dof_count_48_48_24() {
    let m = Mesh::ellipsoid(48, 48, 24, EllipsoidParams::default()).unwrap();
    assert_eq!(m.n_dofs(), 180_075);
}

#[test]
fn ellipsoid_corner_jacobians_positive() {
    let m = Mesh::ellipsoid(8, 8, 4, EllipsoidParams::default()).unwrap();
    for e in 0..m.n_elems() {
        assert!(m.corner_jacobians(e).iter().all(|&j| j > 0.0), "element {e}");
    }
    assert!(m.min_corner_jacobian() > 0.0);
}

fn angle(a: Vector3<f64>, b: Vector3<f64>) -> f64 {
    a.dot(&b).clamp(-1.0, 1.0).acos().to_degrees()
}

#[test]
fn fiber_rotation_across_depth() {
    let (e1, e2) = (Vector3::x(), Vector3::y());
    let f0 = fiber_frame_at(0.0, e1, e2);
    let f1 = fiber_frame_at(1.0, e1, e2);
    let fh = fiber_frame_at(0.5, e1, e2);
    assert!((angle(f0.l, f1.l) - 120.0).abs() < 1e-9);
    assert!((angle(f0.l, fh.l) - 60.0).abs() < 1e-9);
}

#[test]
fn slab_fibers_rotate_with_thickness() {
    let (mesh, _) = common::slab([2, 2, 8], 0.1);
    let f = build_fibers(&mesh);
    let bottom = mesh.elem_index(0, 0, 0);
    let top = mesh.elem_index(0, 0, 7);
    let dr = f.depth[top] - f.depth[bottom];
    assert!((angle(f.frames[bottom].l, f.frames[top].l) - 120.0 * dr).abs() < 1e-9);
}

#[test]
fn frames_are_orthonormal() {
    for mesh in [
        common::slab([3, 3, 3], 0.1).0,
        Mesh::ellipsoid(6, 6, 3, EllipsoidParams::default()).unwrap(),
    ] {
        for f in build_fibers(&mesh).frames {
            assert!(f.l.dot(&f.t).abs() < 1e-12);
            assert!(f.l.dot(&f.n).abs() < 1e-12);
            assert!(f.t.dot(&f.n).abs() < 1e-12);
            for v in [f.l, f.t, f.n] {
                assert!((v.norm() - 1.0).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn axis_aligned_intracellular_tensor() {
    let frame = fiber_frame_at(0.0, Vector3::x(), Vector3::y());
    let rot = Rotation3::from_axis_angle(&Vector3::z_axis(), -60f64.to_radians());
    let aligned = bidomain_core::geometry::FiberFrame {
        l: rot * frame.l,
        t: rot * frame.t,
        n: rot * frame.n,
    };
    assert!((aligned.l - Vector3::x()).norm() < 1e-12);
    let d = conductivity_tensor(&aligned, Conductivities::default().intra);
    let expect = Matrix3::from_diagonal(&Vector3::new(3e-3, 3.1525e-4, 3.1525e-5));
    assert!((d - expect).abs().max() < 1e-15);
}

#[test]
fn isotropic_coefficients_give_scaled_identity() {
    let (mesh, _) = common::slab([2, 2, 4], 0.1);
    let c = Conductivities {
        intra: [2.5e-3; 3],
        extra: [1e-3; 3],
    };
    let t = build_conductivity(&build_fibers(&mesh), c, None).unwrap();
    for (di, de) in t.di.iter().zip(&t.de) {
        assert!((di - Matrix3::identity() * 2.5e-3).abs().max() < 1e-15);
        assert!((de - Matrix3::identity() * 1e-3).abs().max() < 1e-15);
    }
}

#[test]
fn nonpositive_coefficients_rejected() {
    let (mesh, _) = common::slab([1, 1, 1], 0.1);
    let c = Conductivities {
        intra: [1e-3, 0.0, 1e-4],
        ..Default::default()
    };
    assert!(build_conductivity(&build_fibers(&mesh), c, None).is_err());
}

fn random_rotation(seed: u64) -> Rotation3<f64> {
    let mut r = common::rng(seed);
    let axis = Vector3::new(
        r.random_range(-1.0..1.0),
        r.random_range(-1.0..1.0),
        r.random_range(-1.0..1.0),
    );
    Rotation3::from_axis_angle(
        &nalgebra::Unit::new_normalize(axis),
        r.random_range(0.0..std::f64::consts::TAU),
    )
}

#[test]
fn extracellular_eigenvalues_under_rotation() {
    let base = fiber_frame_at(0.3, Vector3::x(), Vector3::y());
    for seed in 0..10 {
        let q = random_rotation(seed);
        let f = bidomain_core::geometry::FiberFrame {
            l: q * base.l,
            t: q * base.t,
            n: q * base.n,
        };
        let d = conductivity_tensor(&f, Conductivities::default().extra);
        let mut ev: Vec<f64> = SymmetricEigen::new(d).eigenvalues.iter().cloned().collect();
        ev.sort_by(|a, b| b.partial_cmp(a).unwrap());
        for (a, b) in ev.iter().zip([2e-3, 1.3514e-3, 6.757e-4]) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn rotating_frame_rotates_tensor() {
    let base = fiber_frame_at(0.7, Vector3::x(), Vector3::y());
    let s = Conductivities::default().intra;
    let d = conductivity_tensor(&base, s);
    for seed in 20..30 {
        let q = random_rotation(seed);
        let f = bidomain_core::geometry::FiberFrame {
            l: q * base.l,
            t: q * base.t,
            n: q * base.n,
        };
        let qm = q.matrix();
        let rotated = qm * d * qm.transpose();
        assert!((conductivity_tensor(&f, s) - rotated).abs().max() < 1e-12);
    }
}

proptest! {
    #[test]
    fn dof_law(nx in 1usize..12, ny in 1usize..12, nz in 1usize..8) {
        let m = Mesh::slab(nx, ny, nz, [1.0; 3]).unwrap();
        prop_assert_eq!(m.n_dofs(), 3 * (nx + 1) * (ny + 1) * (nz + 1));
        prop_assert_eq!(m.n_elems(), nx * ny * nz);
        let e = Mesh::ellipsoid(nx, ny, nz, EllipsoidParams::default()).unwrap();
        prop_assert_eq!(e.n_dofs(), m.n_dofs());
    }

    #[test]
    fn ellipsoid_quality(nx in 2usize..10, ny in 2usize..10, nz in 1usize..5) {
        let m = Mesh::ellipsoid(nx, ny, nz, EllipsoidParams::default()).unwrap();
        prop_assert!(m.min_corner_jacobian() > 0.0);
    }
}
