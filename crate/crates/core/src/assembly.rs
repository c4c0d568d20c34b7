//! Q1 finite element assembly: stiffness and mass matrices, the Backward Euler
//! residual and its Jacobian, and the symmetric/skew split of the Jacobian.
//!
//! Vectors over the three fields are stored field-major: index = field * n + node,
//! with fields ordered (u_i, u_e, w).

use nalgebra::{Matrix3, SMatrix, Vector3};

use crate::error::{Error, Result};
use crate::geometry::{q1_ref_gradient, q1_ref_value, trilinear_jacobian, ConductivityTensors, Mesh, HEX_CORNERS};
use crate::ionic::IonicParams;
use crate::sparse::CsrMatrix;

pub type ElemMatrix = SMatrix<f64, 8, 8>;

/// Gauss points and weights on [0, 1] with `n` points per direction (n = 2 or 3).
pub fn gauss_1d(n: usize) -> Vec<(f64, f64)> {
    match n {
        2 => {
            let d = 0.5 / 3f64.sqrt();
            vec![(0.5 - d, 0.5), (0.5 + d, 0.5)]
        }
        3 => {
            let d = 0.5 * (0.6f64).sqrt();
            vec![(0.5 - d, 5.0 / 18.0), (0.5, 8.0 / 18.0), (0.5 + d, 5.0 / 18.0)]
        }
        _ => panic!("unsupported Gauss order {n}"),
    }
}

/// Element stiffness matrices for each tensor in `d` plus the element mass
/// matrix, integrated with 2x2x2 Gauss quadrature.
pub fn element_matrices(x: &[[f64; 3]; 8], d: &[Matrix3<f64>]) -> Result<(Vec<ElemMatrix>, ElemMatrix)> {
    let g = gauss_1d(2);
    let mut ks = vec![ElemMatrix::zeros(); d.len()];
    let mut m = ElemMatrix::zeros();
    for &(a, wa) in &g {
        for &(b, wb) in &g {
            for &(c, wc) in &g {
                let xi = [a, b, c];
                let jac = trilinear_jacobian(x, xi);
                let det = jac.determinant();
                if !(det > 0.0) {
                    return Err(Error::Geometry(format!("inverted element (det {det:.3e})")));
                }
                let jinv_t = jac.try_inverse().expect("det > 0").transpose();
                let w = wa * wb * wc * det;
                let mut grads = SMatrix::<f64, 3, 8>::zeros();
                let mut vals = [0.0; 8];
                for (k, corner) in HEX_CORNERS.iter().enumerate() {
                    let gr = q1_ref_gradient(*corner, xi);
                    grads.set_column(k, &(jinv_t * Vector3::new(gr[0], gr[1], gr[2])));
                    vals[k] = q1_ref_value(*corner, xi);
                }
                for (kmat, dm) in ks.iter_mut().zip(d) {
                    *kmat += grads.transpose() * dm * grads * w;
                }
                for p in 0..8 {
                    for q in 0..8 {
                        m[(p, q)] += w * vals[p] * vals[q];
                    }
                }
            }
        }
    }
    Ok((ks, m))
}

/// Stiffness matrices for both media, the consistent mass matrix and its
/// row-sum lumping, on some node numbering.
#[derive(Debug, Clone)]
pub struct FeMatrices {
    pub a_i: CsrMatrix,
    pub a_e: CsrMatrix,
    pub m: CsrMatrix,
    pub lumped: Vec<f64>,
}

impl FeMatrices {
    pub fn n(&self) -> usize {
        self.m.nrows()
    }
}

/// Assembles over all elements of the mesh with global node numbering.
pub fn assemble_stiffness_mass(mesh: &Mesh, tensors: &ConductivityTensors) -> Result<FeMatrices> {
    let elems: Vec<usize> = (0..mesh.n_elems()).collect();
    let map: Vec<usize> = (0..mesh.n_nodes()).collect();
    assemble_elements(mesh, tensors, &elems, &map, mesh.n_nodes())
}

/// Assembles over a subset of elements. `node_map[g]` gives the local index of
/// global node `g` (only nodes of the listed elements are read).
pub fn assemble_elements(
    mesh: &Mesh,
    tensors: &ConductivityTensors,
    elems: &[usize],
    node_map: &[usize],
    n_local: usize,
) -> Result<FeMatrices> {
    let cap = elems.len() * 64;
    let mut ti = Vec::with_capacity(cap);
    let mut te = Vec::with_capacity(cap);
    let mut tm = Vec::with_capacity(cap);
    for &e in elems {
        let x = mesh.elem_coords(e);
        let (ks, me) = element_matrices(&x, &[tensors.di[e], tensors.de[e]])?;
        let nodes = mesh.elem_nodes(e).map(|g| node_map[g]);
        for p in 0..8 {
            for q in 0..8 {
                ti.push((nodes[p], nodes[q], ks[0][(p, q)]));
                te.push((nodes[p], nodes[q], ks[1][(p, q)]));
                tm.push((nodes[p], nodes[q], me[(p, q)]));
            }
        }
    }
    let m = CsrMatrix::from_triplets(n_local, n_local, &tm);
    let lumped = m.apply(&vec![1.0; n_local]);
    Ok(FeMatrices {
        a_i: CsrMatrix::from_triplets(n_local, n_local, &ti),
        a_e: CsrMatrix::from_triplets(n_local, n_local, &te),
        m,
        lumped,
    })
}

/// Nodal unknowns (u_i, u_e, w).
#[derive(Debug, Clone, PartialEq)]
pub struct State {
    pub ui: Vec<f64>,
    pub ue: Vec<f64>,
    pub w: Vec<f64>,
}

impl State {
    pub fn rest(n: usize) -> Self {
        Self {
            ui: vec![0.0; n],
            ue: vec![0.0; n],
            w: vec![0.0; n],
        }
    }

    pub fn n(&self) -> usize {
        self.ui.len()
    }

    /// Transmembrane potential u_i - u_e.
    pub fn v(&self) -> Vec<f64> {
        self.ui.iter().zip(&self.ue).map(|(a, b)| a - b).collect()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(3 * self.n());
        out.extend_from_slice(&self.ui);
        out.extend_from_slice(&self.ue);
        out.extend_from_slice(&self.w);
        out
    }

    pub fn from_vec(x: &[f64]) -> Self {
        assert_eq!(x.len() % 3, 0);
        let n = x.len() / 3;
        Self {
            ui: x[..n].to_vec(),
            ue: x[n..2 * n].to_vec(),
            w: x[2 * n..].to_vec(),
        }
    }

    /// self += s for a field-major increment.
    pub fn add(&mut self, s: &[f64]) {
        let n = self.n();
        for k in 0..n {
            self.ui[k] += s[k];
            self.ue[k] += s[n + k];
            self.w[k] += s[2 * n + k];
        }
    }

    /// Restriction to a list of node indices.
    pub fn restrict(&self, nodes: &[usize]) -> Self {
        Self {
            ui: nodes.iter().map(|&g| self.ui[g]).collect(),
            ue: nodes.iter().map(|&g| self.ue[g]).collect(),
            w: nodes.iter().map(|&g| self.w[g]).collect(),
        }
    }
}

/// Time-discrete Bidomain operator: ionic parameters, time step and the
/// choice of mass matrix used for the reaction terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bidomain {
    pub ionic: IonicParams,
    pub tau: f64,
    pub lumped_reaction: bool,
}

impl Bidomain {
    pub fn new(ionic: IonicParams, tau: f64) -> Self {
        Self {
            ionic,
            tau,
            lumped_reaction: false,
        }
    }

    fn reaction_apply(&self, mats: &FeMatrices, x: &[f64]) -> Vec<f64> {
        if self.lumped_reaction {
            x.iter().zip(&mats.lumped).map(|(a, b)| a * b).collect()
        } else {
            mats.m.apply(x)
        }
    }

    /// Integral of a nodal field with the reaction mass matrix.
    pub fn integral(&self, mats: &FeMatrices, x: &[f64]) -> f64 {
        if self.lumped_reaction {
            x.iter().zip(&mats.lumped).map(|(a, b)| a * b).sum()
        } else {
            crate::sparse::dot(&mats.lumped, x)
        }
    }

    /// Checks the discrete compatibility condition int I_app^i = int I_app^e.
    pub fn check_compatibility(&self, mats: &FeMatrices, iapp_i: &[f64], iapp_e: &[f64]) -> Result<()> {
        let a = self.integral(mats, iapp_i);
        let b = self.integral(mats, iapp_e);
        let scale = a.abs() + b.abs();
        if (a - b).abs() > 1e-10 * scale + 1e-300 {
            return Err(Error::Config(format!(
                "applied currents violate compatibility: {a:.6e} vs {b:.6e}"
            )));
        }
        Ok(())
    }

    /// Backward Euler residual F(new) for the step from `old`, field-major.
    pub fn residual(
        &self,
        mats: &FeMatrices,
        new: &State,
        old: &State,
        iapp_i: &[f64],
        iapp_e: &[f64],
    ) -> Result<Vec<f64>> {
        let n = mats.n();
        if [new.n(), old.n(), iapp_i.len(), iapp_e.len()].iter().any(|&l| l != n) {
            return Err(Error::Config("state or current size does not match the mesh".into()));
        }
        self.check_compatibility(mats, iapp_i, iapp_e)?;
        let p = &self.ionic;
        let tau = self.tau;
        let cap = p.capacitance();
        let v = new.v();
        let dv: Vec<f64> = v.iter().zip(old.v()).map(|(a, b)| a - b).collect();
        let dw: Vec<f64> = new.w.iter().zip(&old.w).map(|(a, b)| a - b).collect();
        let iion: Vec<f64> = v.iter().zip(&new.w).map(|(&v, &w)| p.i_ion(v, w)).collect();
        let rr: Vec<f64> = v.iter().zip(&new.w).map(|(&v, &w)| p.r_gate(v, w)).collect();
        let m_dv = mats.m.apply(&dv);
        let m_dw = mats.m.apply(&dw);
        let ai = mats.a_i.apply(&new.ui);
        let ae = mats.a_e.apply(&new.ue);
        let m_iion = self.reaction_apply(mats, &iion);
        let m_r = self.reaction_apply(mats, &rr);
        let m_ii = self.reaction_apply(mats, iapp_i);
        let m_ie = self.reaction_apply(mats, iapp_e);
        let mut f = vec![0.0; 3 * n];
        for k in 0..n {
            f[k] = cap * m_dv[k] + tau * ai[k] + tau * m_iion[k] - tau * m_ii[k];
            f[n + k] = -cap * m_dv[k] + tau * ae[k] - tau * m_iion[k] + tau * m_ie[k];
            f[2 * n + k] = m_dw[k] - tau * m_r[k];
        }
        Ok(f)
    }

    /// Jacobian of the residual at nodal (v, w), on the numbering of `mats`.
    pub fn jacobian(&self, mats: &FeMatrices, v: &[f64], w: &[f64]) -> CsrMatrix {
        let n = mats.n();
        assert_eq!(v.len(), n);
        let p = &self.ionic;
        let tau = self.tau;
        let cap = p.capacitance();
        let d: Vec<_> = v.iter().zip(w).map(|(&v, &w)| p.partials(v, w)).collect();
        let col = |f: &dyn Fn(&crate::ionic::Partials) -> f64, s: f64| -> CsrMatrix {
            let vals: Vec<f64> = d.iter().map(|x| s * f(x)).collect();
            if self.lumped_reaction {
                let t: Vec<_> = (0..n).map(|k| (k, k, vals[k] * mats.lumped[k])).collect();
                CsrMatrix::from_triplets(n, n, &t)
            } else {
                mats.m.scale_columns(&vals)
            }
        };
        let m_iv = col(&|x| x.di_dv, tau);
        let m_iw = col(&|x| x.di_dw, tau);
        let m_rv = col(&|x| x.dr_dv, tau);
        let m_rw = col(&|x| x.dr_dw, tau);
        let cm = mats.m.scaled(cap);
        let j11 = sum(&[(&cm, 1.0), (&mats.a_i, tau), (&m_iv, 1.0)]);
        let j12 = sum(&[(&cm, -1.0), (&m_iv, -1.0)]);
        let j22 = sum(&[(&cm, 1.0), (&mats.a_e, tau), (&m_iv, 1.0)]);
        let j23 = m_iw.scaled(-1.0);
        let j31 = m_rv.scaled(-1.0);
        let j33 = sum(&[(&mats.m, 1.0), (&m_rw, -1.0)]);
        CsrMatrix::from_blocks(
            &[n; 3],
            &[n; 3],
            &[
                vec![Some(&j11), Some(&j12), Some(&m_iw)],
                vec![Some(&j12), Some(&j22), Some(&j23)],
                vec![Some(&j31), Some(&m_rv), Some(&j33)],
            ],
        )
    }

    pub fn jacobian_at(&self, mats: &FeMatrices, s: &State) -> CsrMatrix {
        self.jacobian(mats, &s.v(), &s.w)
    }
}

fn sum(terms: &[(&CsrMatrix, f64)]) -> CsrMatrix {
    let (first, a0) = terms[0];
    let mut trip: Vec<_> = first.iter().map(|(r, c, v)| (r, c, a0 * v)).collect();
    for &(m, a) in &terms[1..] {
        trip.extend(m.iter().map(|(r, c, v)| (r, c, a * v)));
    }
    CsrMatrix::from_triplets(first.nrows(), first.ncols(), &trip)
}

/// B = J + Jᵀ and Z = J - Jᵀ, so that J = (B + Z) / 2.
pub fn split_symmetric_skew(j: &CsrMatrix) -> (CsrMatrix, CsrMatrix) {
    let jt = j.transpose();
    (
        j.linear_combination(1.0, &jt, 1.0),
        j.linear_combination(1.0, &jt, -1.0),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{build_conductivity, build_fibers, Conductivities};

    fn setup(n: usize) -> (Mesh, FeMatrices) {
        let mesh = Mesh::slab(n, n, n, [0.3, 0.3, 0.3]).unwrap();
        let fib = build_fibers(&mesh);
        let t = build_conductivity(&fib, Conductivities::default(), None).unwrap();
        let mats = assemble_stiffness_mass(&mesh, &t).unwrap();
        (mesh, mats)
    }

    #[test]
    fn canonical_unit_cube_matrices() {
        let mesh = Mesh::slab(1, 1, 1, [1.0; 3]).unwrap();
        let (ks, m) = element_matrices(&mesh.elem_coords(0), &[Matrix3::identity()]).unwrap();
        for p in 0..8 {
            for q in 0..8 {
                let dist: usize = (0..3).map(|d| HEX_CORNERS[p][d].abs_diff(HEX_CORNERS[q][d])).sum();
                let (k_want, m_want) = match dist {
                    0 => (1.0 / 3.0, 8.0 / 216.0),
                    1 => (0.0, 4.0 / 216.0),
                    2 => (-1.0 / 12.0, 2.0 / 216.0),
                    _ => (-1.0 / 12.0, 1.0 / 216.0),
                };
                assert!((ks[0][(p, q)] - k_want).abs() < 1e-14);
                assert!((m[(p, q)] - m_want).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn neumann_kernel_and_volume() {
        let (_, mats) = setup(3);
        let n = mats.n();
        let ones = vec![1.0; n];
        let r = mats.a_i.apply(&ones);
        assert!(crate::sparse::norm_inf(&r) <= 1e-12 * mats.a_i.norm_inf());
        let vol: f64 = mats.lumped.iter().sum();
        assert!((vol - 0.027).abs() < 1e-10 * 0.027);
    }

    #[test]
    fn rest_is_equilibrium() {
        let (mesh, mats) = setup(2);
        let bd = Bidomain::new(IonicParams::default(), 0.05);
        let s = State::rest(mesh.n_nodes());
        let z = vec![0.0; mesh.n_nodes()];
        let f = bd.residual(&mats, &s, &s, &z, &z).unwrap();
        assert!(f.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn rest_gating_block() {
        let (mesh, mats) = setup(2);
        let bd = Bidomain::new(IonicParams::default(), 0.05);
        let j = bd.jacobian_at(&mats, &State::rest(mesh.n_nodes()));
        let n = mats.n();
        for (r, c, v) in mats.m.iter() {
            let want = (1.0 + 0.012 * 0.05) * v;
            assert!((j.get(2 * n + r, 2 * n + c) - want).abs() < 1e-15);
        }
    }

    #[test]
    fn incompatible_current_is_rejected() {
        let (mesh, mats) = setup(2);
        let bd = Bidomain::new(IonicParams::default(), 0.05);
        let s = State::rest(mesh.n_nodes());
        let ii = vec![1.0; mesh.n_nodes()];
        let ie = vec![0.0; mesh.n_nodes()];
        assert!(bd.residual(&mats, &s, &s, &ii, &ie).is_err());
    }
}
