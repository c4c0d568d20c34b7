//! Empirical convergence-theory quantities: the constants K², Φ, c0, c, C
//! from nodal extrema of the ionic derivatives, sampled and exact
//! field-of-values bounds of the preconditioned operator in the B_Γ form,
//! and the GMRES residual envelope.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::assembly::{Bidomain, State};
use crate::bddc::{subdomain_sigma_max, subdomain_sigma_min, Bddc, ScalingKind};
use crate::error::{Error, Result};
use crate::geometry::ConductivityTensors;
use crate::partition::Decomposition;
use crate::schur::{deflate_gamma, Form, SchurSystem};
use crate::solvers::{gmres_ext, GmresConfig, GmresExtras, Side};

/// Logarithmic exponent of Φ for a scaling kind.
pub fn log_exponent(kind: ScalingKind) -> i32 {
    match kind {
        ScalingKind::Rho => 2,
        ScalingKind::Deluxe => 3,
    }
}

/// Convergence-bound constants evaluated with nodal extrema as proxies for the
/// abstract bounds on the ionic derivatives.
#[derive(Debug, Clone)]
pub struct TheoryConstants {
    /// max ∂I_ion/∂v
    pub k_max_i: f64,
    /// min ∂I_ion/∂v
    pub k_min_i: f64,
    /// max ∂R/∂w
    pub k_max_r: f64,
    /// min ∂R/∂w
    pub k_min_r: f64,
    /// max |∂I_ion/∂w|
    pub c_iw: f64,
    /// max |∂R/∂v|
    pub c_rv: f64,
    /// Per subdomain [intra, extra] largest conductivity eigenvalue.
    pub sigma_max: Vec<[f64; 2]>,
    /// Per subdomain [intra, extra] smallest conductivity eigenvalue.
    pub sigma_min: Vec<[f64; 2]>,
    pub h_sub: f64,
    pub h: f64,
    pub tau: f64,
    pub chi_cm: f64,
    pub n: i32,
    pub k2: f64,
    pub phi: f64,
    pub c0: f64,
    pub c: f64,
    pub big_c: f64,
}

impl TheoryConstants {
    /// Φ for subdomain size `h_sub` and mesh size `h`.
    pub fn phi_at(&self, h_sub: f64, h: f64) -> f64 {
        let tau = self.tau;
        let mut m: f64 = 0.0;
        for (smax, smin) in self.sigma_max.iter().zip(&self.sigma_min) {
            for f in 0..2 {
                let q = (tau * smax[f] + h_sub * h_sub * (self.chi_cm + tau * self.k_max_i)) / (tau * smin[f]);
                m = m.max(q);
            }
        }
        let gate = (1.0 - tau * self.k_max_r) / (1.0 - tau * self.k_min_r);
        (m + gate) * (1.0 + (h_sub / h).ln()).powi(self.n)
    }

    fn finish(mut self) -> Self {
        let tau = self.tau;
        let d = self.c_iw - self.c_rv;
        self.k2 = 0.25 * tau * tau * d * d / ((self.chi_cm + tau * self.k_min_i) * (1.0 - tau * self.k_min_r));
        self.phi = self.phi_at(self.h_sub, self.h);
        let mut m: f64 = 0.0;
        for (smax, smin) in self.sigma_max.iter().zip(&self.sigma_min) {
            for f in 0..2 {
                m = m.max(smax[f].sqrt() / (tau.sqrt() * smin[f]));
            }
        }
        let phi = self.phi;
        self.c0 = 1.0 - self.k2 * self.k2 * self.h_sub * self.h_sub / self.h * m * phi * (phi - 1.0).max(0.0).sqrt();
        self.c = self.c0 / self.k2;
        self.big_c = phi * self.k2;
        self
    }
}

/// Evaluates the convergence-bound constants at `state`.
pub fn compute_constants(
    state: &State,
    bd: &Bidomain,
    dec: &Decomposition,
    tensors: &ConductivityTensors,
    h: f64,
    kind: ScalingKind,
) -> TheoryConstants {
    let v = state.v();
    let mut k = TheoryConstants {
        k_max_i: f64::NEG_INFINITY,
        k_min_i: f64::INFINITY,
        k_max_r: f64::NEG_INFINITY,
        k_min_r: f64::INFINITY,
        c_iw: 0.0,
        c_rv: 0.0,
        sigma_max: subdomain_sigma_max(dec, tensors),
        sigma_min: subdomain_sigma_min(dec, tensors),
        h_sub: dec.h_sub,
        h,
        tau: bd.tau,
        chi_cm: bd.ionic.capacitance(),
        n: log_exponent(kind),
        k2: 0.0,
        phi: 0.0,
        c0: 0.0,
        c: 0.0,
        big_c: 0.0,
    };
    for (&vn, &wn) in v.iter().zip(&state.w) {
        let p = bd.ionic.partials(vn, wn);
        k.k_max_i = k.k_max_i.max(p.di_dv);
        k.k_min_i = k.k_min_i.min(p.di_dv);
        k.k_max_r = k.k_max_r.max(p.dr_dw);
        k.k_min_r = k.k_min_r.min(p.dr_dw);
        k.c_iw = k.c_iw.max(p.di_dw.abs());
        k.c_rv = k.c_rv.max(p.dr_dv.abs());
    }
    k.finish()
}

/// Extremes of ⟨u,Tu⟩/⟨u,u⟩ and ⟨Tu,Tu⟩/⟨u,u⟩ in a given inner product.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FieldOfValues {
    pub c: f64,
    pub big_c: f64,
    /// Samples with ⟨u,u⟩ ≤ 0.
    pub nonpositive: usize,
}

/// Sampled estimate over `samples` vectors drawn by `draw`.
pub fn estimate_c_big_c(
    t: &dyn Fn(&[f64]) -> Vec<f64>,
    inner: &dyn Fn(&[f64], &[f64]) -> f64,
    draw: &mut dyn FnMut() -> Vec<f64>,
    samples: usize,
) -> FieldOfValues {
    let mut out = FieldOfValues {
        c: f64::INFINITY,
        big_c: 0.0,
        nonpositive: 0,
    };
    for _ in 0..samples {
        let u = draw();
        let uu = inner(&u, &u);
        if !(uu > 0.0) {
            out.nonpositive += 1;
            continue;
        }
        let tu = t(&u);
        out.c = out.c.min(inner(&u, &tu) / uu);
        out.big_c = out.big_c.max(inner(&tu, &tu) / uu);
    }
    out
}

/// Orthonormal basis of the complement of `k` (Householder reflection).
pub fn orthonormal_complement(k: &[f64]) -> DMatrix<f64> {
    let n = k.len();
    let nk = k.iter().map(|x| x * x).sum::<f64>().sqrt();
    let mut v: Vec<f64> = k.iter().map(|x| x / nk).collect();
    // reflect e_0 onto the unit kernel vector
    let s = if v[0] >= 0.0 { 1.0 } else { -1.0 };
    v[0] += s;
    let vv: f64 = v.iter().map(|x| x * x).sum();
    DMatrix::from_fn(n, n - 1, |r, c| {
        let col = c + 1;
        let e = if r == col { 1.0 } else { 0.0 };
        e - 2.0 * v[r] * v[col] / vv
    })
}

/// Exact extremes on the span of `q` for a dense operator `t` (mapping the
/// span into itself) and symmetric form matrix `b`, from generalized
/// symmetric eigenproblems. Fails if `b` is not positive on the span.
pub fn exact_field_of_values(t: &DMatrix<f64>, b: &DMatrix<f64>, q: &DMatrix<f64>) -> Result<FieldOfValues> {
    let tq = q.transpose() * t * q;
    let bq = q.transpose() * b * q;
    let bq = (&bq + bq.transpose()) * 0.5;
    let chol = bq
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Config("interface form is not positive on the deflated space".into()))?;
    let l = chol.l();
    let linv = l
        .clone()
        .try_inverse()
        .ok_or(Error::Linalg(crate::error::LinalgError::Singular))?;
    let sym = |a: DMatrix<f64>| {
        let m = &linv * a * linv.transpose();
        (&m + m.transpose()) * 0.5
    };
    let bt = &bq * &tq;
    let lower = sym((&bt + bt.transpose()) * 0.5);
    let upper = sym(tq.transpose() * &bq * &tq);
    let c = lower.symmetric_eigenvalues().min();
    let big_c = upper.symmetric_eigenvalues().max();
    Ok(FieldOfValues {
        c,
        big_c,
        nonpositive: 0,
    })
}

/// Dense matrix of a linear map on R^n, one application per column.
pub fn dense_of(n: usize, f: &(dyn Fn(&[f64]) -> Vec<f64> + Sync)) -> DMatrix<f64> {
    use rayon::prelude::*;
    let cols: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|j| {
            let mut e = vec![0.0; n];
            e[j] = 1.0;
            f(&e)
        })
        .collect();
    DMatrix::from_fn(n, n, |r, c| cols[c][r])
}

/// Envelope comparison of a left-preconditioned GMRES run in the B_Γ norm.
#[derive(Debug, Clone)]
pub struct EnvelopeReport {
    /// ‖r_m‖_B / ‖r_0‖_B for m = 0, 1, ...
    pub ratios: Vec<f64>,
    /// (1 - c²/C)^{m/2}
    pub bound: Vec<f64>,
    /// Constants from random samples only.
    pub sampled: FieldOfValues,
    /// Exact constants on the deflated interface space, when available.
    pub exact: Option<FieldOfValues>,
    /// False when the dense B_Γ matrix is not positive definite on the
    /// deflated space or a sample had ⟨u,u⟩_B ≤ 0.
    pub form_positive: bool,
    /// Constants used for the bound: the extremes over samples and exact values.
    pub c_emp: f64,
    pub big_c_emp: f64,
    /// Indices m with ratio > bound + 1e-10.
    pub violations: Vec<usize>,
    /// False when c ≤ 0 and the bound degenerates to 1.
    pub informative: bool,
    /// Largest |⟨u,u⟩_Z| / ⟨u,u⟩_B over the samples.
    pub skew_max: f64,
    pub converged: bool,
}

impl EnvelopeReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("m,ratio,bound\n");
        for (m, (r, b)) in self.ratios.iter().zip(&self.bound).enumerate() {
            s.push_str(&format!(
                "{m},{},{}\n",
                crate::harness::sig6(*r),
                crate::harness::sig6(*b)
            ));
        }
        s
    }
}

/// Bound curve (1 - c²/C)^{m/2} for m = 0..len; degenerate when c ≤ 0.
pub fn envelope_curve(c: f64, big_c: f64, len: usize) -> (Vec<f64>, bool) {
    let informative = c > 0.0 && big_c > 0.0;
    let base = if informative {
        (1.0 - c * c / big_c).max(0.0)
    } else {
        1.0
    };
    ((0..len).map(|m| base.powf(m as f64 / 2.0)).collect(), informative)
}

/// Options of the envelope diagnostic.
#[derive(Debug, Clone, Copy)]
pub struct EnvelopeOptions {
    pub samples: usize,
    pub seed: u64,
    /// Also compute exact constants from dense eigenproblems.
    pub exact: bool,
    pub gmres: GmresConfig,
}

impl Default for EnvelopeOptions {
    fn default() -> Self {
        Self {
            samples: 100,
            seed: 7,
            exact: true,
            gmres: GmresConfig {
                side: Side::Left,
                ..Default::default()
            },
        }
    }
}

/// Runs left-preconditioned GMRES in the B_Γ inner product on Ŝ x = b,
/// stores its residuals and compares them with the envelope built from
/// empirical c and C.
pub fn check_envelope(schur: &SchurSystem, bddc: &Bddc, b: &[f64], opts: &EnvelopeOptions) -> Result<EnvelopeReport> {
    let dec = schur.dec.clone();
    let n = schur.n_gamma();
    let proj = |x: &mut [f64]| deflate_gamma(&dec, x);
    let t = |u: &[f64]| {
        let mut su = schur.apply(u);
        proj(&mut su);
        let mut z = bddc.apply(&su);
        proj(&mut z);
        z
    };
    let inner_b = |u: &[f64], v: &[f64]| schur.inner(Form::B, u, v);

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut skew_max: f64 = 0.0;
    let mut draw = || {
        let mut u: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        proj(&mut u);
        let zz = schur.inner(Form::Z, &u, &u);
        let bb = schur.inner(Form::B, &u, &u);
        if bb > 0.0 {
            skew_max = skew_max.max(zz.abs() / bb);
        }
        u
    };
    let sampled = estimate_c_big_c(&t, &inner_b, &mut draw, opts.samples);

    let mut form_positive = sampled.nonpositive == 0;
    let exact = if opts.exact {
        let s = dense_of(n, &|u: &[f64]| schur.apply(u));
        let bm = &s + s.transpose();
        let tm = dense_of(n, &t);
        let q = orthonormal_complement(&kernel_gamma(&dec));
        match exact_field_of_values(&tm, &bm, &q) {
            Ok(f) => Some(f),
            Err(e) => {
                log::warn!("exact field of values unavailable: {e}");
                form_positive = false;
                None
            }
        }
    } else {
        None
    };
    let (c_emp, big_c_emp) = match exact {
        Some(f) => (sampled.c.min(f.c), sampled.big_c.max(f.big_c)),
        None => (sampled.c, sampled.big_c),
    };

    let mut bb = b.to_vec();
    proj(&mut bb);
    let cfg = GmresConfig {
        side: Side::Left,
        ..opts.gmres
    };
    let run = gmres_ext(
        schur,
        bddc,
        &bb,
        &cfg,
        GmresExtras {
            inner: Some(&inner_b),
            project: Some(&proj),
            store_residuals: true,
        },
    );
    let (outcome, converged) = match run {
        Ok(o) => (o, true),
        Err(f) => (*f.0, false),
    };
    let ratios = outcome.history;
    let (bound, informative) = envelope_curve(c_emp, big_c_emp, ratios.len());
    let violations = ratios
        .iter()
        .zip(&bound)
        .enumerate()
        .filter(|(_, (r, b))| **r > **b + 1e-10)
        .map(|(m, _)| m)
        .collect();
    Ok(EnvelopeReport {
        ratios,
        bound,
        sampled,
        exact,
        form_positive,
        c_emp,
        big_c_emp,
        violations,
        informative,
        skew_max,
        converged,
    })
}

/// The (1, 1, 0) interface vector.
pub fn kernel_gamma(dec: &Decomposition) -> Vec<f64> {
    let ng = dec.n_gamma_nodes();
    let mut k = vec![0.0; dec.n_gamma()];
    k[..2 * ng].iter_mut().for_each(|x| *x = 1.0);
    k
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_operator_has_unit_constants() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = |u: &[f64]| u.to_vec();
        let inner = |u: &[f64], v: &[f64]| u.iter().zip(v).map(|(a, b)| a * b).sum::<f64>();
        let mut draw = || (0..10).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>();
        let f = estimate_c_big_c(&t, &inner, &mut draw, 100);
        assert!((f.c - 1.0).abs() < 1e-12);
        assert!((f.big_c - 1.0).abs() < 1e-12);
    }

    #[test]
    fn complement_is_orthonormal() {
        let k = [1.0, 1.0, 0.0, 1.0, 0.0];
        let q = orthonormal_complement(&k);
        let g = q.transpose() * &q;
        assert!((g - DMatrix::identity(4, 4)).amax() < 1e-14);
        let kv = nalgebra::DVector::from_row_slice(&k);
        assert!((q.transpose() * kv).amax() < 1e-14);
    }

    #[test]
    fn degenerate_envelope() {
        let (b, informative) = envelope_curve(0.0, 2.0, 4);
        assert!(!informative);
        assert!(b.iter().all(|&x| x == 1.0));
        let (b, informative) = envelope_curve(0.5, 1.0, 3);
        assert!(informative);
        assert_eq!(b[0], 1.0);
        assert!((b[2] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn exponent_per_scaling() {
        assert_eq!(log_exponent(ScalingKind::Rho), 2);
        assert_eq!(log_exponent(ScalingKind::Deluxe), 3);
    }
}
