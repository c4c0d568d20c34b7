//! Static condensation onto the interface: local blocks, matrix-free Schur
//! complement action, back-substitution, harmonic extension and the interface
//! bilinear forms induced by the symmetric and skew parts of the Jacobian.

use std::sync::Arc;

use rayon::prelude::*;

use crate::assembly::{assemble_elements, Bidomain, FeMatrices, State};
use crate::error::Result;
use crate::geometry::{ConductivityTensors, Mesh};
use crate::partition::{Decomposition, Subdomain, FIELDS};
use crate::sparse::{dot, CsrMatrix, SparseLu};

/// Assembles stiffness and mass matrices on every subdomain in local numbering.
pub fn assemble_local_fe(mesh: &Mesh, tensors: &ConductivityTensors, dec: &Decomposition) -> Result<Vec<FeMatrices>> {
    dec.subdomains
        .par_iter()
        .map(|s| assemble_elements(mesh, tensors, &s.elems, &s.node_map(mesh.n_nodes()), s.n_local_nodes()))
        .collect()
}

/// Local Jacobians for the current state.
pub fn local_jacobians(bd: &Bidomain, local_fe: &[FeMatrices], dec: &Decomposition, state: &State) -> Vec<CsrMatrix> {
    dec.subdomains
        .par_iter()
        .zip(local_fe.par_iter())
        .map(|(s, fe)| bd.jacobian_at(fe, &state.restrict(&s.nodes)))
        .collect()
}

/// Which bilinear form an interface inner product uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Form {
    /// K + Kᵀ
    B,
    /// K - Kᵀ
    Z,
    /// K itself
    S,
}

/// Interior/interface blocks of one subdomain matrix.
pub struct LocalSystem {
    pub k: CsrMatrix,
    pub kii: CsrMatrix,
    pub kig: CsrMatrix,
    pub kgi: CsrMatrix,
    pub kgg: CsrMatrix,
    pub lu: SparseLu,
}

impl std::fmt::Debug for LocalSystem {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LocalSystem")
            .field("n_interior", &self.kii.nrows())
            .field("n_gamma", &self.kgg.nrows())
            .finish()
    }
}

impl LocalSystem {
    /// Splits `k` by the subdomain's index sets and factors the interior block.
    /// A subdomain without interface has a singular interior block; it is
    /// factored with the extracellular unknown of its first node pinned.
    pub fn new(k: CsrMatrix, sub: &Subdomain) -> Result<Self> {
        let (i, g) = (&sub.interior_dofs, &sub.gamma_dofs);
        let kii = k.submatrix(i, i);
        let lu = if g.is_empty() {
            SparseLu::factor_pinned(&kii, sub.n_local_nodes())?
        } else {
            SparseLu::factor(&kii)?
        };
        Ok(Self {
            kig: k.submatrix(i, g),
            kgi: k.submatrix(g, i),
            kgg: k.submatrix(g, g),
            kii,
            k,
            lu,
        })
    }

    pub fn n_gamma(&self) -> usize {
        self.kgg.nrows()
    }

    /// S x = K_ΓΓ x - K_ΓI K_II⁻¹ K_IΓ x
    pub fn schur_apply(&self, x: &[f64]) -> Vec<f64> {
        let mut t = self.kig.apply(x);
        self.lu.solve_in_place(&mut t);
        let mut y = self.kgg.apply(x);
        self.kgi.mul_vec_acc(-1.0, &t, &mut y);
        y
    }

    /// Interior part of the harmonic extension: -K_II⁻¹ K_IΓ x.
    pub fn extend_interior(&self, x: &[f64]) -> Vec<f64> {
        let mut t = self.kig.apply(x);
        t.iter_mut().for_each(|v| *v = -*v);
        self.lu.solve_in_place(&mut t);
        t
    }

    /// Harmonic extension as a full local vector.
    pub fn extend(&self, sub: &Subdomain, x: &[f64]) -> Vec<f64> {
        let ui = self.extend_interior(x);
        let mut out = vec![0.0; self.k.nrows()];
        for (&d, &v) in sub.interior_dofs.iter().zip(&ui) {
            out[d] = v;
        }
        for (&d, &v) in sub.gamma_dofs.iter().zip(x) {
            out[d] = v;
        }
        out
    }

    /// v_extᵀ F u_ext for the chosen form on this subdomain.
    pub fn form(&self, sub: &Subdomain, which: Form, u: &[f64], v: &[f64]) -> f64 {
        let ue = self.extend(sub, u);
        let ve = self.extend(sub, v);
        let a = dot(&ve, &self.k.apply(&ue));
        let b = dot(&ue, &self.k.apply(&ve));
        match which {
            Form::S => a,
            Form::B => a + b,
            Form::Z => a - b,
        }
    }
}

/// Schur complement system distributed over subdomains.
#[derive(Debug)]
pub struct SchurSystem {
    pub dec: Arc<Decomposition>,
    pub locals: Vec<LocalSystem>,
}

impl SchurSystem {
    pub fn new(dec: Arc<Decomposition>, ks: Vec<CsrMatrix>) -> Result<Self> {
        let locals = ks
            .into_par_iter()
            .zip(dec.subdomains.par_iter())
            .map(|(k, s)| LocalSystem::new(k, s))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { dec, locals })
    }

    pub fn n_gamma(&self) -> usize {
        self.dec.n_gamma()
    }

    /// Ŝ x = Σ R_jᵀ S_j R_j x
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let parts: Vec<Vec<f64>> = self
            .dec
            .subdomains
            .par_iter()
            .zip(self.locals.par_iter())
            .map(|(s, l)| l.schur_apply(&s.restrict_gamma(x)))
            .collect();
        let mut y = vec![0.0; self.n_gamma()];
        for (s, p) in self.dec.subdomains.iter().zip(&parts) {
            s.extend_gamma_add(p, &mut y);
        }
        y
    }

    /// f̂_Γ = f_Γ - Σ R_jᵀ K_ΓI K_II⁻¹ f_I for a global field-major `rhs`.
    pub fn condense(&self, rhs: &[f64]) -> Vec<f64> {
        let mut y = self.dec.gather_gamma(rhs);
        let parts: Vec<Vec<f64>> = self
            .dec
            .subdomains
            .par_iter()
            .zip(self.locals.par_iter())
            .map(|(s, l)| {
                let loc = s.gather(rhs);
                let mut fi: Vec<f64> = s.interior_dofs.iter().map(|&d| loc[d]).collect();
                l.lu.solve_in_place(&mut fi);
                l.kgi.apply(&fi)
            })
            .collect();
        for (s, p) in self.dec.subdomains.iter().zip(&parts) {
            for (&g, &v) in s.gamma_global.iter().zip(p) {
                y[g] -= v;
            }
        }
        y
    }

    /// Full global vector with interface part `u_gamma` and interiors
    /// u_I = K_II⁻¹ (f_I - K_IΓ u_Γ).
    pub fn back_substitute(&self, u_gamma: &[f64], rhs: &[f64]) -> Vec<f64> {
        self.complete(u_gamma, Some(rhs))
    }

    /// Harmonic extension of an interface vector to a global vector.
    pub fn harmonic_extend(&self, u_gamma: &[f64]) -> Vec<f64> {
        self.complete(u_gamma, None)
    }

    fn complete(&self, u_gamma: &[f64], rhs: Option<&[f64]>) -> Vec<f64> {
        let n = self.dec.n_nodes;
        let parts: Vec<Vec<f64>> = self
            .dec
            .subdomains
            .par_iter()
            .zip(self.locals.par_iter())
            .map(|(s, l)| {
                let ug = s.restrict_gamma(u_gamma);
                let mut t = l.kig.apply(&ug);
                match rhs {
                    Some(r) => {
                        let loc = s.gather(r);
                        for (tk, &d) in t.iter_mut().zip(&s.interior_dofs) {
                            *tk = loc[d] - *tk;
                        }
                    }
                    None => t.iter_mut().for_each(|v| *v = -*v),
                }
                l.lu.solve_in_place(&mut t);
                t
            })
            .collect();
        let mut out = vec![0.0; FIELDS * n];
        self.dec.scatter_gamma(u_gamma, &mut out);
        for (s, ui) in self.dec.subdomains.iter().zip(&parts) {
            let nl = s.n_local_nodes();
            for (&d, &v) in s.interior_dofs.iter().zip(ui) {
                out[(d / nl) * n + s.nodes[d % nl]] = v;
            }
        }
        out
    }

    /// Interface inner product ⟨u, v⟩ for the chosen form on assembled
    /// interface vectors.
    pub fn inner(&self, which: Form, u: &[f64], v: &[f64]) -> f64 {
        let parts: Vec<f64> = self
            .dec
            .subdomains
            .par_iter()
            .zip(self.locals.par_iter())
            .map(|(s, l)| l.form(s, which, &s.restrict_gamma(u), &s.restrict_gamma(v)))
            .collect();
        parts.iter().sum()
    }

    /// Same form on partially assembled vectors given per subdomain.
    pub fn inner_local(&self, which: Form, u: &[Vec<f64>], v: &[Vec<f64>]) -> f64 {
        let parts: Vec<f64> = (0..self.locals.len())
            .into_par_iter()
            .map(|j| self.locals[j].form(&self.dec.subdomains[j], which, &u[j], &v[j]))
            .collect();
        parts.iter().sum()
    }
}

/// Orthogonal projection onto the complement of the (1, 1, 0) interface mode.
pub fn deflate_gamma(dec: &Decomposition, x: &mut [f64]) {
    let ng = dec.n_gamma_nodes();
    if ng == 0 {
        return;
    }
    let s: f64 = x[..2 * ng].iter().sum();
    let c = s / (2 * ng) as f64;
    x[..2 * ng].iter_mut().for_each(|v| *v -= c);
}

/// Orthogonal projection onto the complement of the global (1, 1, 0) mode of
/// a field-major nodal vector.
pub fn deflate_full(x: &mut [f64]) {
    let n = x.len() / FIELDS;
    let s: f64 = x[..2 * n].iter().sum();
    let c = s / (2 * n) as f64;
    x[..2 * n].iter_mut().for_each(|v| *v -= c);
}
