//! BDDC preconditioner for the interface Schur complement.
//!
//! Local matrices are moved to a basis where edge/face averages are explicit
//! unknowns. Each subdomain then splits its unknowns into interior (I), dual
//! (Δ) and primal (Π) sets; the partially assembled problem is solved by
//! eliminating r = I ∪ Δ locally and solving a global coarse problem for Π.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, LinalgError, Result};
use crate::geometry::ConductivityTensors;
use crate::partition::{Decomposition, Role, Subdomain};
use crate::schur::deflate_gamma;
use crate::sparse::{CsrMatrix, SparseLu};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScalingKind {
    Rho,
    Deluxe,
}

impl fmt::Display for ScalingKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScalingKind::Rho => "rho",
            ScalingKind::Deluxe => "deluxe",
        })
    }
}

impl FromStr for ScalingKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "rho" => Ok(ScalingKind::Rho),
            "deluxe" => Ok(ScalingKind::Deluxe),
            _ => Err(Error::Config(format!("unknown scaling '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BddcOptions {
    pub scaling: ScalingKind,
    /// Remove the (1, 1, 0) mode from residuals, coarse solves and outputs.
    pub deflate: bool,
    /// Build deluxe minors from the symmetric part (K + Kᵀ)/2.
    pub deluxe_symmetric: bool,
}

impl Default for BddcOptions {
    fn default() -> Self {
        Self {
            scaling: ScalingKind::Rho,
            deflate: true,
            deluxe_symmetric: true,
        }
    }
}

/// Largest conductivity coefficient per subdomain for the two media.
pub fn subdomain_sigma_max(dec: &Decomposition, tensors: &ConductivityTensors) -> Vec<[f64; 2]> {
    dec.subdomains
        .iter()
        .map(|s| {
            let mut m = [0.0f64; 2];
            for &e in &s.elems {
                for (f, mf) in m.iter_mut().enumerate() {
                    *mf = mf.max(tensors.sigma_max(f, e));
                }
            }
            m
        })
        .collect()
}

/// Smallest conductivity coefficient per subdomain for the two media.
pub fn subdomain_sigma_min(dec: &Decomposition, tensors: &ConductivityTensors) -> Vec<[f64; 2]> {
    dec.subdomains
        .iter()
        .map(|s| {
            let mut m = [f64::INFINITY; 2];
            for &e in &s.elems {
                for (f, mf) in m.iter_mut().enumerate() {
                    *mf = mf.min(tensors.sigma_min(f, e));
                }
            }
            m
        })
        .collect()
}

/// Deluxe operator of one class on one subdomain.
#[derive(Debug, Clone)]
pub struct DeluxeBlock {
    pub class: usize,
    /// Indices into the subdomain's dual list.
    pub dual_idx: Vec<usize>,
    pub d: DMatrix<f64>,
}

#[derive(Debug, Clone)]
pub enum Scaling {
    /// Diagonal weight per subdomain and local dual unknown.
    Rho { weights: Vec<Vec<f64>> },
    /// Dense per-class operators per subdomain.
    Deluxe { blocks: Vec<Vec<DeluxeBlock>> },
}

impl Scaling {
    /// x ← D⁽ʲ⁾ x (or D⁽ʲ⁾ᵀ x) on a local dual vector.
    pub fn apply(&self, j: usize, x: &mut [f64], transpose: bool) {
        match self {
            Scaling::Rho { weights } => {
                for (v, w) in x.iter_mut().zip(&weights[j]) {
                    *v *= w;
                }
            }
            Scaling::Deluxe { blocks } => {
                for b in &blocks[j] {
                    let v: Vec<f64> = b.dual_idx.iter().map(|&k| x[k]).collect();
                    let m = v.len();
                    for (r, &k) in b.dual_idx.iter().enumerate() {
                        x[k] = (0..m)
                            .map(|c| if transpose { b.d[(c, r)] } else { b.d[(r, c)] } * v[c])
                            .sum();
                    }
                }
            }
        }
    }

    pub fn kind(&self) -> ScalingKind {
        match self {
            Scaling::Rho { .. } => ScalingKind::Rho,
            Scaling::Deluxe { .. } => ScalingKind::Deluxe,
        }
    }
}

/// ρ-scaling: potentials weighted by the subdomain conductivity maxima,
/// the gating field by the inverse multiplicity.
pub fn build_rho_scaling(dec: &Decomposition, sigma_max: &[[f64; 2]]) -> Scaling {
    let ng = dec.n_gamma_nodes();
    let weights = dec
        .subdomains
        .iter()
        .map(|s| {
            s.dual
                .iter()
                .map(|&(q, class)| {
                    let field = s.gamma_global[q] / ng;
                    let sharers = &dec.classes[class].sharers;
                    if field == 2 {
                        1.0 / sharers.len() as f64
                    } else {
                        let total: f64 = sharers.iter().map(|&k| sigma_max[k][field]).sum();
                        sigma_max[s.id][field] / total
                    }
                })
                .collect()
        })
        .collect();
    Scaling::Rho { weights }
}

/// Sparse change of basis on local dofs: identity off the averaged groups.
fn local_transform(dec: &Decomposition, s: &Subdomain) -> CsrMatrix {
    let n = s.n_local_dofs();
    let mut in_group = vec![false; n];
    let mut trip = Vec::new();
    for (gid, pos) in &s.groups {
        let t = &dec.groups[*gid].t;
        for (r, &qr) in pos.iter().enumerate() {
            let dr = s.gamma_dofs[qr];
            in_group[dr] = true;
            for (c, &qc) in pos.iter().enumerate() {
                trip.push((dr, s.gamma_dofs[qc], t[(r, c)]));
            }
        }
    }
    for (d, g) in in_group.iter().enumerate() {
        if !g {
            trip.push((d, d, 1.0));
        }
    }
    CsrMatrix::from_triplets(n, n, &trip)
}

/// K̂ = Tᵀ K T for subdomain `s`.
pub fn transform_local(dec: &Decomposition, s: &Subdomain, k: &CsrMatrix) -> CsrMatrix {
    if s.groups.is_empty() {
        return k.clone();
    }
    let t = local_transform(dec, s);
    t.transpose().matmul(k).matmul(&t)
}

/// Dual dofs of subdomain `s` grouped by class, as indices into `s.dual`,
/// each group sorted by global interface position.
fn dual_by_class(s: &Subdomain) -> Vec<(usize, Vec<usize>)> {
    let mut map: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
    for (k, &(_, class)) in s.dual.iter().enumerate() {
        map.entry(class).or_default().push(k);
    }
    map.into_iter()
        .map(|(c, mut v)| {
            v.sort_by_key(|&k| s.gamma_global[s.dual[k].0]);
            (c, v)
        })
        .collect()
}

/// Dense Schur complement minors of K̂ on each class's dual dofs, eliminating
/// the interior only.
pub fn schur_minors(s: &Subdomain, khat: &CsrMatrix) -> Result<Vec<(usize, Vec<usize>, DMatrix<f64>)>> {
    let groups = dual_by_class(s);
    let interior = &s.interior_dofs;
    let kii = khat.submatrix(interior, interior);
    let lu = SparseLu::factor(&kii)?;
    let mut out = Vec::with_capacity(groups.len());
    for (class, idx) in groups {
        let dofs: Vec<usize> = idx.iter().map(|&k| s.gamma_dofs[s.dual[k].0]).collect();
        let m = dofs.len();
        let kif = khat.submatrix(interior, &dofs).to_dense();
        let kfi = khat.submatrix(&dofs, interior);
        let mut x = kif.clone();
        lu.solve_columns(x.as_mut_slice(), m);
        let mut sm = khat.submatrix(&dofs, &dofs).to_dense();
        for c in 0..m {
            let col: Vec<f64> = x.column(c).iter().cloned().collect();
            let prod = kfi.apply(&col);
            for r in 0..m {
                sm[(r, c)] -= prod[r];
            }
        }
        out.push((class, idx, sm));
    }
    Ok(out)
}

/// Deluxe scaling D⁽ʲ⁾ = (Σₖ S⁽ᵏ⁾)⁻¹ S⁽ʲ⁾ per class from transformed local matrices.
pub fn build_deluxe_scaling(dec: &Decomposition, khats: &[CsrMatrix], symmetric: bool) -> Result<Scaling> {
    let minors: Vec<Vec<(usize, Vec<usize>, DMatrix<f64>)>> = dec
        .subdomains
        .par_iter()
        .zip(khats.par_iter())
        .map(|(s, k)| {
            if symmetric {
                let sym = k.linear_combination(0.5, &k.transpose(), 0.5);
                schur_minors(s, &sym)
            } else {
                schur_minors(s, k)
            }
        })
        .collect::<Result<_>>()?;
    let mut sums: std::collections::BTreeMap<usize, DMatrix<f64>> = Default::default();
    for mj in &minors {
        for (class, _, sm) in mj {
            sums.entry(*class)
                .and_modify(|acc| *acc += sm)
                .or_insert_with(|| sm.clone());
        }
    }
    let mut inverses = std::collections::BTreeMap::new();
    for (class, sum) in sums {
        let inv = sum
            .clone()
            .lu()
            .try_inverse()
            .ok_or_else(|| Error::Linalg(LinalgError::Backend(format!("deluxe class {class} sum is singular"))))?;
        inverses.insert(class, inv);
    }
    let blocks = minors
        .into_iter()
        .map(|mj| {
            mj.into_iter()
                .map(|(class, dual_idx, sm)| DeluxeBlock {
                    class,
                    dual_idx,
                    d: &inverses[&class] * sm,
                })
                .collect()
        })
        .collect();
    Ok(Scaling::Deluxe { blocks })
}

/// Largest deviation from the partition of unity over all dual unknowns.
pub fn partition_of_unity_error(dec: &Decomposition, scaling: &Scaling) -> f64 {
    match scaling {
        Scaling::Rho { weights } => {
            let mut sum = vec![0.0; dec.n_gamma()];
            let mut dual = vec![false; dec.n_gamma()];
            for (s, w) in dec.subdomains.iter().zip(weights) {
                for (&(q, _), &wk) in s.dual.iter().zip(w) {
                    sum[s.gamma_global[q]] += wk;
                    dual[s.gamma_global[q]] = true;
                }
            }
            sum.iter()
                .zip(&dual)
                .filter(|(_, d)| **d)
                .map(|(v, _)| (v - 1.0).abs())
                .fold(0.0, f64::max)
        }
        Scaling::Deluxe { blocks } => {
            let mut sums: std::collections::BTreeMap<usize, DMatrix<f64>> = Default::default();
            for bj in blocks {
                for b in bj {
                    sums.entry(b.class)
                        .and_modify(|acc| *acc += &b.d)
                        .or_insert_with(|| b.d.clone());
                }
            }
            sums.values()
                .map(|s| (s - DMatrix::identity(s.nrows(), s.ncols())).abs().max())
                .fold(0.0, f64::max)
        }
    }
}

/// Vector of the partially assembled interface space: global primal values
/// plus per-subdomain dual values (in `Subdomain::dual` order).
#[derive(Debug, Clone, PartialEq)]
pub struct WTilde {
    pub primal: Vec<f64>,
    pub dual: Vec<Vec<f64>>,
}

struct BddcLocal {
    /// r = I ∪ Δ in local dofs; interior first.
    n_interior: usize,
    lu_rr: SparseLu,
    k_pr: CsrMatrix,
    k_pp: DMatrix<f64>,
    /// -K_rr⁻¹ K_rΠ
    phi: DMatrix<f64>,
    /// Global primal index of each local primal dof.
    pi_global: Vec<usize>,
}

/// Coarse problem and local data realizing the BDDC preconditioner.
pub struct Bddc {
    dec: Arc<Decomposition>,
    scaling: Scaling,
    locals: Vec<BddcLocal>,
    s_pp: DMatrix<f64>,
    coarse_lu: Option<nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>>,
    opts: BddcOptions,
}

impl fmt::Debug for Bddc {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Bddc")
            .field("n_primal", &self.dec.n_primal)
            .field("scaling", &self.scaling.kind())
            .finish()
    }
}

impl Bddc {
    /// Builds the preconditioner from local matrices in the original basis.
    /// `sigma_max` is required for ρ-scaling.
    pub fn new(
        dec: Arc<Decomposition>,
        ks: &[CsrMatrix],
        sigma_max: Option<&[[f64; 2]]>,
        opts: BddcOptions,
    ) -> Result<Self> {
        let khats: Vec<CsrMatrix> = dec
            .subdomains
            .par_iter()
            .zip(ks.par_iter())
            .map(|(s, k)| transform_local(&dec, s, k))
            .collect();
        let scaling = match opts.scaling {
            ScalingKind::Rho => {
                let sm = sigma_max.ok_or_else(|| Error::Config("rho scaling needs conductivities".into()))?;
                build_rho_scaling(&dec, sm)
            }
            ScalingKind::Deluxe => build_deluxe_scaling(&dec, &khats, opts.deluxe_symmetric)?,
        };
        let pou = partition_of_unity_error(&dec, &scaling);
        if pou > 1e-8 {
            return Err(Error::PartitionOfUnity(pou));
        }
        let locals: Vec<BddcLocal> = dec
            .subdomains
            .par_iter()
            .zip(khats.par_iter())
            .map(|(s, k)| build_local(s, k))
            .collect::<Result<_>>()?;
        let np = dec.n_primal;
        let mut s_pp = DMatrix::zeros(np, np);
        for l in &locals {
            let kpp_phi = local_coarse(l);
            for (a, &ga) in l.pi_global.iter().enumerate() {
                for (b, &gb) in l.pi_global.iter().enumerate() {
                    s_pp[(ga, gb)] += kpp_phi[(a, b)];
                }
            }
        }
        let coarse_lu = if np == 0 {
            None
        } else if opts.deflate {
            let kern = dec.primal_kernel();
            let mut bordered = DMatrix::zeros(np + 1, np + 1);
            bordered.view_mut((0, 0), (np, np)).copy_from(&s_pp);
            for (p, &v) in kern.iter().enumerate() {
                bordered[(p, np)] = v;
                bordered[(np, p)] = v;
            }
            Some(bordered.lu())
        } else {
            Some(s_pp.clone().lu())
        };
        if let Some(lu) = &coarse_lu {
            if !lu.is_invertible() {
                return Err(Error::Linalg(LinalgError::Singular));
            }
        }
        Ok(Self {
            dec,
            scaling,
            locals,
            s_pp,
            coarse_lu,
            opts,
        })
    }

    pub fn scaling(&self) -> &Scaling {
        &self.scaling
    }

    pub fn decomposition(&self) -> &Arc<Decomposition> {
        &self.dec
    }

    /// Assembled coarse matrix S_ΠΠ.
    pub fn coarse_matrix(&self) -> &DMatrix<f64> {
        &self.s_pp
    }

    /// Coarse basis block -K_rr⁻¹ K_rΠ of subdomain `j`.
    pub fn local_phi(&self, j: usize) -> &DMatrix<f64> {
        &self.locals[j].phi
    }

    fn coarse_solve(&self, g: &[f64]) -> Vec<f64> {
        let np = self.dec.n_primal;
        let Some(lu) = &self.coarse_lu else {
            return Vec::new();
        };
        let rhs_len = if self.opts.deflate { np + 1 } else { np };
        let mut rhs = nalgebra::DVector::zeros(rhs_len);
        rhs.rows_mut(0, np).copy_from_slice(g);
        let x = lu.solve(&rhs).expect("coarse matrix checked invertible");
        x.rows(0, np).iter().cloned().collect()
    }

    /// Solves the partially assembled Schur system S̃ x = b.
    pub fn solve_tilde(&self, b: &WTilde) -> WTilde {
        let ys: Vec<Vec<f64>> = self
            .locals
            .par_iter()
            .zip(b.dual.par_iter())
            .map(|(l, bd)| {
                let mut y = vec![0.0; l.n_interior + bd.len()];
                y[l.n_interior..].copy_from_slice(bd);
                l.lu_rr.solve_in_place(&mut y);
                y
            })
            .collect();
        let mut g = b.primal.clone();
        for (l, y) in self.locals.iter().zip(&ys) {
            let kp = l.k_pr.apply(y);
            for (&gp, v) in l.pi_global.iter().zip(kp) {
                g[gp] -= v;
            }
        }
        let xp = self.coarse_solve(&g);
        let dual = self
            .locals
            .par_iter()
            .zip(ys.into_par_iter())
            .map(|(l, y)| {
                let xpl: Vec<f64> = l.pi_global.iter().map(|&p| xp[p]).collect();
                let mut xr = y;
                let corr = &l.phi * nalgebra::DVector::from_vec(xpl);
                for (v, c) in xr.iter_mut().zip(corr.iter()) {
                    *v += c;
                }
                xr.split_off(l.n_interior)
            })
            .collect();
        WTilde { primal: xp, dual }
    }

    /// R̃ v̂: copies of a transformed assembled interface vector.
    pub fn restrict_tilde(&self, vhat: &[f64]) -> WTilde {
        let mut primal = vec![0.0; self.dec.n_primal];
        for (g, role) in self.dec.roles.iter().enumerate() {
            if let Role::Primal(p) = role {
                primal[*p] = vhat[g];
            }
        }
        let dual = self
            .dec
            .subdomains
            .iter()
            .map(|s| s.dual.iter().map(|&(q, _)| vhat[s.gamma_global[q]]).collect())
            .collect();
        WTilde { primal, dual }
    }

    /// R̃_D v̂ = (v̂_Π, D⁽ʲ⁾ᵀ R_Δ⁽ʲ⁾ v̂)
    pub fn scaled_restrict_tilde(&self, vhat: &[f64]) -> WTilde {
        let mut w = self.restrict_tilde(vhat);
        for (j, d) in w.dual.iter_mut().enumerate() {
            self.scaling.apply(j, d, true);
        }
        w
    }

    /// R̃ᵀ w: sums subdomain copies into a transformed assembled vector.
    pub fn assemble_tilde(&self, w: &WTilde) -> Vec<f64> {
        self.assemble_impl(w, false)
    }

    /// R̃_Dᵀ w = w_Π + Σ R_Δ⁽ʲ⁾ᵀ D⁽ʲ⁾ w_Δ⁽ʲ⁾
    pub fn scaled_assemble_tilde(&self, w: &WTilde) -> Vec<f64> {
        self.assemble_impl(w, true)
    }

    fn assemble_impl(&self, w: &WTilde, scaled: bool) -> Vec<f64> {
        let mut out = vec![0.0; self.dec.n_gamma()];
        for (g, role) in self.dec.roles.iter().enumerate() {
            if let Role::Primal(p) = role {
                out[g] = w.primal[*p];
            }
        }
        for (j, s) in self.dec.subdomains.iter().enumerate() {
            let mut d = w.dual[j].clone();
            if scaled {
                self.scaling.apply(j, &mut d, false);
            }
            for (&(q, _), v) in s.dual.iter().zip(d) {
                out[s.gamma_global[q]] += v;
            }
        }
        out
    }

    /// E_D w = R̃ R̃_Dᵀ w
    pub fn e_d(&self, w: &WTilde) -> WTilde {
        self.restrict_tilde(&self.scaled_assemble_tilde(w))
    }

    /// P_D w = (I - E_D) w
    pub fn p_d(&self, w: &WTilde) -> WTilde {
        let e = self.e_d(w);
        WTilde {
            primal: w.primal.iter().zip(&e.primal).map(|(a, b)| a - b).collect(),
            dual: w
                .dual
                .iter()
                .zip(&e.dual)
                .map(|(a, b)| a.iter().zip(b).map(|(x, y)| x - y).collect())
                .collect(),
        }
    }

    /// z = M⁻¹ r on an assembled interface residual in the original basis.
    pub fn apply(&self, r: &[f64]) -> Vec<f64> {
        let mut rhat = r.to_vec();
        if self.opts.deflate {
            deflate_gamma(&self.dec, &mut rhat);
        }
        self.dec.t_apply_transpose(&mut rhat);
        let b = self.scaled_restrict_tilde(&rhat);
        let x = self.solve_tilde(&b);
        let mut z = self.scaled_assemble_tilde(&x);
        self.dec.t_apply(&mut z);
        if self.opts.deflate {
            deflate_gamma(&self.dec, &mut z);
        }
        z
    }
}

fn build_local(s: &Subdomain, khat: &CsrMatrix) -> Result<BddcLocal> {
    let mut r_dofs = s.interior_dofs.clone();
    r_dofs.extend(s.dual.iter().map(|&(q, _)| s.gamma_dofs[q]));
    let pi_dofs: Vec<usize> = s.primal.iter().map(|&(q, _)| s.gamma_dofs[q]).collect();
    let pi_global: Vec<usize> = s.primal.iter().map(|&(_, p)| p).collect();
    let k_rr = khat.submatrix(&r_dofs, &r_dofs);
    let lu_rr = SparseLu::factor(&k_rr)?;
    let np = pi_dofs.len();
    let mut phi = khat.submatrix(&r_dofs, &pi_dofs).to_dense();
    lu_rr.solve_columns(phi.as_mut_slice(), np);
    phi.neg_mut();
    let k_pp = khat.submatrix(&pi_dofs, &pi_dofs);
    let k_pr = khat.submatrix(&pi_dofs, &r_dofs);
    Ok(BddcLocal {
        n_interior: s.interior_dofs.len(),
        lu_rr,
        k_pr,
        k_pp: k_pp.to_dense(),
        phi,
        pi_global,
    })
}

/// K_ΠΠ + K_Πr Φ
fn local_coarse(l: &BddcLocal) -> DMatrix<f64> {
    let np = l.pi_global.len();
    let mut out = l.k_pp.clone();
    for c in 0..np {
        let col: Vec<f64> = l.phi.column(c).iter().cloned().collect();
        let v = l.k_pr.apply(&col);
        for r in 0..np {
            out[(r, c)] += v[r];
        }
    }
    out
}
