//! Structured hexahedral meshes (slab and truncated ellipsoid), fiber frames
//! and per-element conductivity tensors.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Local corner ordering of a hexahedron, as offsets in (i, j, k).
pub const HEX_CORNERS: [[usize; 3]; 8] = [
    [0, 0, 0],
    [1, 0, 0],
    [1, 1, 0],
    [0, 1, 0],
    [0, 0, 1],
    [1, 0, 1],
    [1, 1, 1],
    [0, 1, 1],
];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EllipsoidParams {
    pub a1: f64,
    pub a2: f64,
    pub b1: f64,
    pub b2: f64,
    pub c1: f64,
    pub c2: f64,
    pub phi_min: f64,
    pub phi_max: f64,
    pub theta_min: f64,
    pub theta_max: f64,
}

impl Default for EllipsoidParams {
    fn default() -> Self {
        use std::f64::consts::PI;
        Self {
            a1: 1.5,
            a2: 2.7,
            b1: 1.5,
            b2: 2.7,
            c1: 4.4,
            c2: 5.0,
            phi_min: -PI / 2.0,
            phi_max: PI / 2.0,
            theta_min: -3.0 * PI / 8.0,
            theta_max: PI / 8.0,
        }
    }
}

impl EllipsoidParams {
    pub fn validate(&self) -> Result<()> {
        let ok_axes = self.a1 > 0.0
            && self.b1 > 0.0
            && self.c1 > 0.0
            && self.a2 > self.a1
            && self.b2 > self.b1
            && self.c2 > self.c1;
        if !ok_axes {
            return Err(Error::Geometry(
                "ellipsoid axes must satisfy a2>a1>0, b2>b1>0, c2>c1>0".into(),
            ));
        }
        let finite = [self.phi_min, self.phi_max, self.theta_min, self.theta_max]
            .iter()
            .all(|v| v.is_finite());
        if !finite || self.phi_max <= self.phi_min || self.theta_max <= self.theta_min {
            return Err(Error::Geometry("degenerate angle range".into()));
        }
        Ok(())
    }

    /// Point at angles (phi, theta) and depth r in [0, 1].
    pub fn point(&self, phi: f64, theta: f64, r: f64) -> Vector3<f64> {
        let a = self.a1 + r * (self.a2 - self.a1);
        let b = self.b1 + r * (self.b2 - self.b1);
        let c = self.c1 + r * (self.c2 - self.c1);
        Vector3::new(
            a * theta.cos() * phi.cos(),
            b * theta.cos() * phi.sin(),
            c * theta.sin(),
        )
    }

    /// Tangent vectors (d/dphi, d/dtheta) at the given parameters.
    pub fn tangents(&self, phi: f64, theta: f64, r: f64) -> (Vector3<f64>, Vector3<f64>) {
        let a = self.a1 + r * (self.a2 - self.a1);
        let b = self.b1 + r * (self.b2 - self.b1);
        let c = self.c1 + r * (self.c2 - self.c1);
        let d_phi = Vector3::new(-a * theta.cos() * phi.sin(), b * theta.cos() * phi.cos(), 0.0);
        let d_theta = Vector3::new(
            -a * theta.sin() * phi.cos(),
            -b * theta.sin() * phi.sin(),
            c * theta.cos(),
        );
        (d_phi, d_theta)
    }

    fn lattice(&self, dims: [usize; 3], i: f64, j: f64, k: f64) -> (f64, f64, f64) {
        let phi = self.phi_min + (self.phi_max - self.phi_min) * i / dims[0] as f64;
        let theta = self.theta_min + (self.theta_max - self.theta_min) * j / dims[1] as f64;
        (phi, theta, k / dims[2] as f64)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum MeshKind {
    Slab { lengths: [f64; 3] },
    Ellipsoid(EllipsoidParams),
}

/// Structured grid of nx*ny*nz hexahedra. For the ellipsoid the lattice
/// directions (i, j, k) map to (phi, theta, r) and k = 0 is the endocardium.
#[derive(Debug, Clone)]
pub struct Mesh {
    kind: MeshKind,
    dims: [usize; 3],
    coords: Vec<[f64; 3]>,
    h: f64,
}

impl Mesh {
    pub fn slab(nx: usize, ny: usize, nz: usize, lengths: [f64; 3]) -> Result<Self> {
        if nx == 0 || ny == 0 || nz == 0 {
            return Err(Error::Config("element counts must be at least 1".into()));
        }
        if lengths.iter().any(|l| !(l.is_finite() && *l > 0.0)) {
            return Err(Error::Config("slab extents must be positive".into()));
        }
        let dims = [nx, ny, nz];
        let mut coords = Vec::with_capacity((nx + 1) * (ny + 1) * (nz + 1));
        for k in 0..=nz {
            for j in 0..=ny {
                for i in 0..=nx {
                    coords.push([
                        lengths[0] * i as f64 / nx as f64,
                        lengths[1] * j as f64 / ny as f64,
                        lengths[2] * k as f64 / nz as f64,
                    ]);
                }
            }
        }
        let mut mesh = Self {
            kind: MeshKind::Slab { lengths },
            dims,
            coords,
            h: 0.0,
        };
        mesh.h = mesh.compute_h();
        Ok(mesh)
    }

    pub fn ellipsoid(nx: usize, ny: usize, nz: usize, p: EllipsoidParams) -> Result<Self> {
        if nx == 0 || ny == 0 || nz == 0 {
            return Err(Error::Config("element counts must be at least 1".into()));
        }
        p.validate()?;
        let dims = [nx, ny, nz];
        let mut coords = Vec::with_capacity((nx + 1) * (ny + 1) * (nz + 1));
        for k in 0..=nz {
            for j in 0..=ny {
                for i in 0..=nx {
                    let (phi, theta, r) = p.lattice(dims, i as f64, j as f64, k as f64);
                    let x = p.point(phi, theta, r);
                    coords.push([x.x, x.y, x.z]);
                }
            }
        }
        let mut mesh = Self {
            kind: MeshKind::Ellipsoid(p),
            dims,
            coords,
            h: 0.0,
        };
        mesh.h = mesh.compute_h();
        Ok(mesh)
    }

    pub fn kind(&self) -> &MeshKind {
        &self.kind
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn node_dims(&self) -> [usize; 3] {
        [self.dims[0] + 1, self.dims[1] + 1, self.dims[2] + 1]
    }

    pub fn n_nodes(&self) -> usize {
        self.coords.len()
    }

    pub fn n_elems(&self) -> usize {
        self.dims.iter().product()
    }

    /// Scalar unknowns over the three fields.
    pub fn n_dofs(&self) -> usize {
        3 * self.n_nodes()
    }

    pub fn coords(&self) -> &[[f64; 3]] {
        &self.coords
    }

    pub fn node_index(&self, i: usize, j: usize, k: usize) -> usize {
        i + (self.dims[0] + 1) * (j + (self.dims[1] + 1) * k)
    }

    pub fn node_ijk(&self, n: usize) -> [usize; 3] {
        let nx = self.dims[0] + 1;
        let ny = self.dims[1] + 1;
        [n % nx, (n / nx) % ny, n / (nx * ny)]
    }

    pub fn elem_index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    pub fn elem_ijk(&self, e: usize) -> [usize; 3] {
        let nx = self.dims[0];
        let ny = self.dims[1];
        [e % nx, (e / nx) % ny, e / (nx * ny)]
    }

    pub fn elem_nodes(&self, e: usize) -> [usize; 8] {
        let [i, j, k] = self.elem_ijk(e);
        HEX_CORNERS.map(|c| self.node_index(i + c[0], j + c[1], k + c[2]))
    }

    pub fn elem_coords(&self, e: usize) -> [[f64; 3]; 8] {
        self.elem_nodes(e).map(|n| self.coords[n])
    }

    /// Maximum element diameter.
    pub fn h(&self) -> f64 {
        self.h
    }

    /// True for nodes on the inner (r = 0) surface of the ellipsoid.
    pub fn is_endocardial(&self, n: usize) -> bool {
        matches!(self.kind, MeshKind::Ellipsoid(_)) && self.node_ijk(n)[2] == 0
    }

    /// True for nodes on the outer (r = 1) surface of the ellipsoid.
    pub fn is_epicardial(&self, n: usize) -> bool {
        matches!(self.kind, MeshKind::Ellipsoid(_)) && self.node_ijk(n)[2] == self.dims[2]
    }

    /// Jacobian determinants of the trilinear map at the eight corners.
    pub fn corner_jacobians(&self, e: usize) -> [f64; 8] {
        let x = self.elem_coords(e);
        HEX_CORNERS.map(|c| trilinear_jacobian(&x, [c[0] as f64, c[1] as f64, c[2] as f64]).determinant())
    }

    pub fn min_corner_jacobian(&self) -> f64 {
        (0..self.n_elems())
            .flat_map(|e| self.corner_jacobians(e))
            .fold(f64::INFINITY, f64::min)
    }

    fn compute_h(&self) -> f64 {
        let mut h: f64 = 0.0;
        for e in 0..self.n_elems() {
            let x = self.elem_coords(e);
            for a in 0..8 {
                for b in a + 1..8 {
                    let d = (0..3).map(|c| (x[a][c] - x[b][c]).powi(2)).sum::<f64>();
                    h = h.max(d.sqrt());
                }
            }
        }
        h
    }

    /// Depth fraction r in [0, 1] and local fiber plane (e1, e2) at the
    /// centroid of element `e`.
    fn elem_frame_basis(&self, e: usize) -> (f64, Vector3<f64>, Vector3<f64>) {
        let [i, j, k] = self.elem_ijk(e);
        match &self.kind {
            MeshKind::Slab { .. } => ((k as f64 + 0.5) / self.dims[2] as f64, Vector3::x(), Vector3::y()),
            MeshKind::Ellipsoid(p) => {
                let (phi, theta, r) = p.lattice(self.dims, i as f64 + 0.5, j as f64 + 0.5, k as f64 + 0.5);
                let (t_phi, t_theta) = p.tangents(phi, theta, r);
                let e1 = t_phi.normalize();
                let e2 = (t_theta - e1 * e1.dot(&t_theta)).normalize();
                (r, e1, e2)
            }
        }
    }
}

/// Shape function gradient of the trilinear map on the unit reference cube.
pub fn trilinear_jacobian(x: &[[f64; 3]; 8], xi: [f64; 3]) -> Matrix3<f64> {
    let mut jac = Matrix3::zeros();
    for (a, c) in HEX_CORNERS.iter().enumerate() {
        let g = q1_ref_gradient(*c, xi);
        for r in 0..3 {
            for s in 0..3 {
                jac[(r, s)] += x[a][r] * g[s];
            }
        }
    }
    jac
}

/// Value of the Q1 basis function attached to corner `c` at reference point `xi`.
pub fn q1_ref_value(c: [usize; 3], xi: [f64; 3]) -> f64 {
    (0..3).map(|d| if c[d] == 1 { xi[d] } else { 1.0 - xi[d] }).product()
}

/// Reference gradient of the Q1 basis function attached to corner `c`.
pub fn q1_ref_gradient(c: [usize; 3], xi: [f64; 3]) -> [f64; 3] {
    let f = |d: usize| if c[d] == 1 { xi[d] } else { 1.0 - xi[d] };
    let df = |d: usize| if c[d] == 1 { 1.0 } else { -1.0 };
    [df(0) * f(1) * f(2), f(0) * df(1) * f(2), f(0) * f(1) * df(2)]
}

/// Orthonormal fiber triplet: longitudinal, transversal and sheet normal.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FiberFrame {
    pub l: Vector3<f64>,
    pub t: Vector3<f64>,
    pub n: Vector3<f64>,
}

/// Total intramural rotation of the fibers, in degrees.
pub const FIBER_ROTATION_DEG: f64 = 120.0;

/// Fiber angle (radians) at depth fraction r: +60 degrees at r = 0 and
/// -60 degrees at r = 1.
pub fn fiber_angle(r: f64) -> f64 {
    (FIBER_ROTATION_DEG / 2.0 - FIBER_ROTATION_DEG * r).to_radians()
}

/// Fiber frame at depth fraction `r` in the plane spanned by orthonormal `e1`, `e2`.
pub fn fiber_frame_at(r: f64, e1: Vector3<f64>, e2: Vector3<f64>) -> FiberFrame {
    let alpha = fiber_angle(r);
    let n = e1.cross(&e2);
    let l = e1 * alpha.cos() + e2 * alpha.sin();
    let t = n.cross(&l);
    FiberFrame { l, t, n }
}

#[derive(Debug, Clone)]
pub struct FiberField {
    pub frames: Vec<FiberFrame>,
    pub depth: Vec<f64>,
}

pub fn build_fibers(mesh: &Mesh) -> FiberField {
    let (frames, depth) = (0..mesh.n_elems())
        .map(|e| {
            let (r, e1, e2) = mesh.elem_frame_basis(e);
            (fiber_frame_at(r, e1, e2), r)
        })
        .unzip();
    FiberField { frames, depth }
}

/// Conductivity coefficients along (l, t, n) for the intra- and extracellular media.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Conductivities {
    pub intra: [f64; 3],
    pub extra: [f64; 3],
}

impl Default for Conductivities {
    fn default() -> Self {
        Self {
            intra: [3e-3, 3.1525e-4, 3.1525e-5],
            extra: [2e-3, 1.3514e-3, 6.757e-4],
        }
    }
}

#[derive(Debug, Clone)]
pub struct ConductivityTensors {
    pub di: Vec<Matrix3<f64>>,
    pub de: Vec<Matrix3<f64>>,
    /// Per-element multiplier applied to both media.
    pub scale: Vec<f64>,
    pub coeffs: Conductivities,
}

impl ConductivityTensors {
    /// Largest coefficient of medium `field` (0 = intra, 1 = extra) on element `e`.
    pub fn sigma_max(&self, field: usize, e: usize) -> f64 {
        let c = if field == 0 {
            &self.coeffs.intra
        } else {
            &self.coeffs.extra
        };
        self.scale[e] * c.iter().cloned().fold(f64::MIN, f64::max)
    }

    /// Smallest coefficient of medium `field` on element `e`.
    pub fn sigma_min(&self, field: usize, e: usize) -> f64 {
        let c = if field == 0 {
            &self.coeffs.intra
        } else {
            &self.coeffs.extra
        };
        self.scale[e] * c.iter().cloned().fold(f64::MAX, f64::min)
    }
}

pub fn conductivity_tensor(frame: &FiberFrame, sigma: [f64; 3]) -> Matrix3<f64> {
    frame.l * frame.l.transpose() * sigma[0]
        + frame.t * frame.t.transpose() * sigma[1]
        + frame.n * frame.n.transpose() * sigma[2]
}

/// D = sum of sigma * a aᵀ per element. `scale` optionally multiplies each
/// element's tensors, which is how heterogeneous media are represented.
pub fn build_conductivity(
    fibers: &FiberField,
    coeffs: Conductivities,
    scale: Option<&[f64]>,
) -> Result<ConductivityTensors> {
    if coeffs.intra.iter().chain(&coeffs.extra).any(|s| !(*s > 0.0)) {
        return Err(Error::Config("conductivity coefficients must be positive".into()));
    }
    let ne = fibers.frames.len();
    let scale = match scale {
        Some(s) if s.len() != ne => return Err(Error::Config("conductivity scale length mismatch".into())),
        Some(s) if s.iter().any(|v| !(*v > 0.0)) => {
            return Err(Error::Config("conductivity scale must be positive".into()))
        }
        Some(s) => s.to_vec(),
        None => vec![1.0; ne],
    };
    let di = fibers
        .frames
        .iter()
        .zip(&scale)
        .map(|(f, s)| conductivity_tensor(f, coeffs.intra) * *s)
        .collect();
    let de = fibers
        .frames
        .iter()
        .zip(&scale)
        .map(|(f, s)| conductivity_tensor(f, coeffs.extra) * *s)
        .collect();
    Ok(ConductivityTensors { di, de, scale, coeffs })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn node_index_round_trip() {
        let m = Mesh::slab(4, 2, 2, [1.0, 1.0, 1.0]).unwrap();
        assert_eq!(m.n_nodes(), 45);
        assert_eq!(Mesh::slab(4, 2, 4, [1.0; 3]).unwrap().n_nodes(), 75);
        let mut seen = vec![false; m.n_nodes()];
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
        assert!(seen.iter().all(|s| *s));
    }

    #[test]
    fn single_cube() {
        let m = Mesh::slab(1, 1, 1, [1.0, 1.0, 1.0]).unwrap();
        assert_eq!((m.n_nodes(), m.n_elems()), (8, 1));
        assert!((m.h() - 3f64.sqrt()).abs() < 1e-14);
        let nodes = m.elem_nodes(0);
        let mut sorted = nodes.to_vec();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), 8);
        assert!(m.corner_jacobians(0).iter().all(|d| (d - 1.0).abs() < 1e-14));
    }

    #[test]
    fn rejects_bad_input() {
        assert!(Mesh::slab(0, 1, 1, [1.0; 3]).is_err());
        assert!(Mesh::slab(1, 1, 1, [1.0, -1.0, 1.0]).is_err());
        let p = EllipsoidParams {
            theta_max: -2.0,
            ..Default::default()
        };
        assert!(Mesh::ellipsoid(2, 2, 2, p).is_err());
    }

    #[test]
    fn ellipsoid_corner_matches_formula() {
        let p = EllipsoidParams::default();
        let m = Mesh::ellipsoid(8, 8, 4, p).unwrap();
        let x = m.coords()[m.node_index(0, 0, 0)];
        let (phi, th) = (p.phi_min, p.theta_min);
        let want = [
            p.a1 * th.cos() * phi.cos(),
            p.b1 * th.cos() * phi.sin(),
            p.c1 * th.sin(),
        ];
        for d in 0..3 {
            assert!((x[d] - want[d]).abs() < 1e-14);
        }
        assert!(m.min_corner_jacobian() > 0.0);
        assert!(m.is_endocardial(m.node_index(3, 3, 0)));
        assert!(m.is_epicardial(m.node_index(3, 3, 4)));
    }

    #[test]
    fn fibers_rotate_linearly() {
        let e1 = Vector3::x();
        let e2 = Vector3::y();
        let f0 = fiber_frame_at(0.0, e1, e2);
        let f1 = fiber_frame_at(1.0, e1, e2);
        let fh = fiber_frame_at(0.5, e1, e2);
        let ang = |a: &Vector3<f64>, b: &Vector3<f64>| a.dot(b).clamp(-1.0, 1.0).acos().to_degrees();
        assert!((ang(&f0.l, &f1.l) - 120.0).abs() < 1e-9);
        assert!((ang(&f0.l, &fh.l) - 60.0).abs() < 1e-9);
    }

    #[test]
    fn fiber_frames_are_orthonormal() {
        for mesh in [
            Mesh::slab(3, 3, 5, [1.0, 1.0, 0.5]).unwrap(),
            Mesh::ellipsoid(4, 4, 3, EllipsoidParams::default()).unwrap(),
        ] {
            let f = build_fibers(&mesh);
            for fr in &f.frames {
                assert!(fr.l.dot(&fr.t).abs() < 1e-12);
                assert!(fr.l.dot(&fr.n).abs() < 1e-12);
                assert!(fr.t.dot(&fr.n).abs() < 1e-12);
                for v in [fr.l, fr.t, fr.n] {
                    assert!((v.norm() - 1.0).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn axis_aligned_tensor_is_diagonal() {
        let frame = FiberFrame {
            l: Vector3::x(),
            t: Vector3::y(),
            n: Vector3::z(),
        };
        let c = Conductivities::default();
        let d = conductivity_tensor(&frame, c.intra);
        let want = Matrix3::from_diagonal(&Vector3::new(3e-3, 3.1525e-4, 3.1525e-5));
        assert!((d - want).abs().max() < 1e-18);
        let iso = conductivity_tensor(&fiber_frame_at(0.3, Vector3::x(), Vector3::y()), [2.0; 3]);
        assert!((iso - Matrix3::identity() * 2.0).abs().max() < 1e-14);
    }
}
