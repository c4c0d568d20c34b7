//! Restarted GMRES, the Newton iteration for one Backward Euler step, the
//! stimulus protocol and the time loop.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::assembly::{assemble_stiffness_mass, Bidomain, FeMatrices, State};
use crate::bddc::{subdomain_sigma_max, Bddc, BddcOptions};
use crate::error::{Error, Result};
use crate::geometry::{ConductivityTensors, Mesh};
use crate::ionic::coercivity_check;
use crate::partition::{Decomposition, FIELDS};
use crate::schur::{assemble_local_fe, deflate_full, deflate_gamma, local_jacobians, SchurSystem};
use crate::sparse::{axpy, dot, norm2, CsrMatrix, SparseLu};

pub trait LinearOperator: Sync {
    fn dim(&self) -> usize;
    fn apply(&self, x: &[f64]) -> Vec<f64>;
}

pub trait Preconditioner: Sync {
    fn apply(&self, r: &[f64]) -> Vec<f64>;
}

pub struct IdentityPreconditioner;

impl Preconditioner for IdentityPreconditioner {
    fn apply(&self, r: &[f64]) -> Vec<f64> {
        r.to_vec()
    }
}

impl LinearOperator for CsrMatrix {
    fn dim(&self) -> usize {
        self.nrows()
    }
    fn apply(&self, x: &[f64]) -> Vec<f64> {
        CsrMatrix::apply(self, x)
    }
}

impl LinearOperator for SchurSystem {
    fn dim(&self) -> usize {
        self.n_gamma()
    }
    fn apply(&self, x: &[f64]) -> Vec<f64> {
        SchurSystem::apply(self, x)
    }
}

impl Preconditioner for Bddc {
    fn apply(&self, r: &[f64]) -> Vec<f64> {
        Bddc::apply(self, r)
    }
}

/// Side on which the preconditioner is applied.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Left,
    Right,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GmresConfig {
    pub restart: usize,
    pub max_iter: usize,
    pub rtol: f64,
    pub side: Side,
}

impl Default for GmresConfig {
    fn default() -> Self {
        Self {
            restart: 200,
            max_iter: 1000,
            rtol: 1e-6,
            side: Side::Right,
        }
    }
}

impl GmresConfig {
    pub fn validate(&self) -> Result<()> {
        if self.restart == 0 || self.max_iter == 0 || !(self.rtol > 0.0 && self.rtol < 1.0) {
            return Err(Error::Config(
                "GMRES needs restart >= 1, max_iter >= 1, 0 < rtol < 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct GmresOutcome {
    pub x: Vec<f64>,
    pub iterations: usize,
    /// Relative residual estimate after each iteration, starting with the
    /// initial residual.
    pub history: Vec<f64>,
    /// Relative residual of the returned iterate, recomputed explicitly.
    pub residual: f64,
    pub converged: bool,
    /// Explicit residual vectors after every iteration (when requested).
    pub residual_vectors: Vec<Vec<f64>>,
}

#[derive(Debug, thiserror::Error)]
#[error("GMRES did not converge: relative residual {:.3e} after {} iterations", .0.residual, .0.iterations)]
pub struct GmresFailure(pub Box<GmresOutcome>);

impl From<GmresFailure> for Error {
    fn from(f: GmresFailure) -> Self {
        Error::NotConverged {
            iterations: f.0.iterations,
            residual: f.0.residual,
        }
    }
}

/// Extra GMRES controls used by diagnostics.
pub struct GmresExtras<'a> {
    /// Inner product; Euclidean when `None`.
    pub inner: Option<&'a (dyn Fn(&[f64], &[f64]) -> f64 + Sync)>,
    /// Projection applied to the right-hand side and preconditioned vectors.
    pub project: Option<&'a (dyn Fn(&mut [f64]) + Sync)>,
    /// Store the explicit residual vector after every iteration.
    pub store_residuals: bool,
}

impl Default for GmresExtras<'_> {
    fn default() -> Self {
        Self {
            inner: None,
            project: None,
            store_residuals: false,
        }
    }
}

/// Restarted GMRES with Euclidean inner product.
pub fn gmres(
    a: &dyn LinearOperator,
    m: &dyn Preconditioner,
    b: &[f64],
    cfg: &GmresConfig,
    project: Option<&(dyn Fn(&mut [f64]) + Sync)>,
) -> std::result::Result<GmresOutcome, GmresFailure> {
    gmres_ext(
        a,
        m,
        b,
        cfg,
        GmresExtras {
            project,
            ..Default::default()
        },
    )
}

pub fn gmres_ext(
    a: &dyn LinearOperator,
    m: &dyn Preconditioner,
    b: &[f64],
    cfg: &GmresConfig,
    extras: GmresExtras<'_>,
) -> std::result::Result<GmresOutcome, GmresFailure> {
    let n = a.dim();
    assert_eq!(b.len(), n);
    let inner = |x: &[f64], y: &[f64]| match extras.inner {
        Some(f) => f(x, y),
        None => dot(x, y),
    };
    let norm = |x: &[f64]| inner(x, x).max(0.0).sqrt();
    let project = |x: &mut [f64]| {
        if let Some(p) = extras.project {
            p(x)
        }
    };
    let left = cfg.side == Side::Left;
    let precond = |x: &[f64]| {
        let mut z = m.apply(x);
        project(&mut z);
        z
    };
    // residual in the space GMRES minimizes over
    let residual_of = |x: &[f64]| -> Vec<f64> {
        let ax = a.apply(x);
        let mut r: Vec<f64> = b.iter().zip(&ax).map(|(bi, ai)| bi - ai).collect();
        project(&mut r);
        if left {
            precond(&r)
        } else {
            r
        }
    };
    let mut bb = b.to_vec();
    project(&mut bb);
    let bnorm = if left { norm(&precond(&bb)) } else { norm(&bb) };
    let mut x = vec![0.0; n];
    let mut residual_vectors = Vec::new();
    if bnorm == 0.0 || n == 0 {
        return Ok(GmresOutcome {
            x,
            iterations: 0,
            history: vec![0.0],
            residual: 0.0,
            converged: true,
            residual_vectors,
        });
    }
    let mut r = residual_of(&x);
    let mut rel = norm(&r) / bnorm;
    let mut history = vec![rel];
    if extras.store_residuals {
        residual_vectors.push(r.clone());
    }
    let mut iterations = 0;
    loop {
        if rel <= cfg.rtol {
            return Ok(GmresOutcome {
                x,
                iterations,
                history,
                residual: rel,
                converged: true,
                residual_vectors,
            });
        }
        if iterations >= cfg.max_iter {
            return Err(GmresFailure(Box::new(GmresOutcome {
                x,
                iterations,
                history,
                residual: rel,
                converged: false,
                residual_vectors,
            })));
        }
        let beta = norm(&r);
        let mut v: Vec<Vec<f64>> = vec![r.iter().map(|ri| ri / beta).collect()];
        let mut z: Vec<Vec<f64>> = Vec::new();
        let mut h: Vec<Vec<f64>> = Vec::new();
        let mut cs: Vec<f64> = Vec::new();
        let mut sn: Vec<f64> = Vec::new();
        let mut g = vec![beta];
        let mut cycle_done = false;
        while !cycle_done {
            let k = v.len() - 1;
            let mut w = if left {
                precond(&a.apply(&v[k]))
            } else {
                let zk = precond(&v[k]);
                let w = a.apply(&zk);
                z.push(zk);
                w
            };
            let mut hk = vec![0.0; k + 2];
            // modified Gram-Schmidt with one reorthogonalization pass
            for _ in 0..2 {
                for i in 0..=k {
                    let c = inner(&w, &v[i]);
                    hk[i] += c;
                    axpy(-c, &v[i], &mut w);
                }
            }
            let hnext = norm(&w);
            hk[k + 1] = hnext;
            for i in 0..k {
                let t = cs[i] * hk[i] + sn[i] * hk[i + 1];
                hk[i + 1] = -sn[i] * hk[i] + cs[i] * hk[i + 1];
                hk[i] = t;
            }
            let denom = hk[k].hypot(hk[k + 1]);
            let (c, s) = if denom == 0.0 {
                (1.0, 0.0)
            } else {
                (hk[k] / denom, hk[k + 1] / denom)
            };
            hk[k] = c * hk[k] + s * hk[k + 1];
            hk[k + 1] = 0.0;
            cs.push(c);
            sn.push(s);
            let gk = g[k];
            g[k] = c * gk;
            g.push(-s * gk);
            h.push(hk);
            iterations += 1;
            let est = g[k + 1].abs() / bnorm;
            let breakdown = hnext <= 1e-14 * beta;
            if !breakdown {
                v.push(w.iter().map(|wi| wi / hnext).collect());
            }
            let stop = est <= cfg.rtol || iterations >= cfg.max_iter || breakdown || k + 1 >= cfg.restart;
            if extras.store_residuals || stop {
                let xk = update(&x, &h, &g, if left { &v } else { &z });
                if extras.store_residuals {
                    let rk = residual_of(&xk);
                    history.push(norm(&rk) / bnorm);
                    residual_vectors.push(rk);
                } else {
                    history.push(est);
                }
                if stop {
                    x = xk;
                    cycle_done = true;
                }
            } else {
                history.push(est);
            }
        }
        r = residual_of(&x);
        rel = norm(&r) / bnorm;
        // a converged estimate with a larger explicit residual restarts
    }
}

fn update(x: &[f64], h: &[Vec<f64>], g: &[f64], basis: &[Vec<f64>]) -> Vec<f64> {
    let k = h.len();
    let mut y = vec![0.0; k];
    for i in (0..k).rev() {
        let mut s = g[i];
        for j in i + 1..k {
            s -= h[j][i] * y[j];
        }
        y[i] = if h[i][i] != 0.0 { s / h[i][i] } else { 0.0 };
    }
    let mut out = x.to_vec();
    for (yi, bi) in y.iter().zip(basis) {
        axpy(*yi, bi, &mut out);
    }
    out
}

/// Linear solver used inside each Newton iteration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LinearSolverKind {
    /// GMRES on the interface Schur complement with BDDC.
    Bddc(BddcOptions),
    /// GMRES on the full Jacobian with one block per subdomain.
    BlockJacobi,
    /// GMRES on the interface Schur complement without preconditioner.
    Unpreconditioned,
    /// Sparse direct solve of the full Jacobian.
    Direct,
}

impl fmt::Display for LinearSolverKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LinearSolverKind::Bddc(o) => write!(f, "bddc-{}", o.scaling),
            LinearSolverKind::BlockJacobi => f.write_str("block-jacobi"),
            LinearSolverKind::Unpreconditioned => f.write_str("none"),
            LinearSolverKind::Direct => f.write_str("direct"),
        }
    }
}

impl FromStr for LinearSolverKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "block-jacobi" => Ok(Self::BlockJacobi),
            "none" => Ok(Self::Unpreconditioned),
            "direct" => Ok(Self::Direct),
            other => {
                let scaling = other.strip_prefix("bddc-").unwrap_or(other).parse()?;
                Ok(Self::Bddc(BddcOptions {
                    scaling,
                    ..Default::default()
                }))
            }
        }
    }
}

/// Block-Jacobi over subdomain-owned nodes of the full Jacobian.
pub struct BlockJacobi {
    blocks: Vec<(Vec<usize>, SparseLu)>,
}

impl BlockJacobi {
    pub fn new(j: &CsrMatrix, dec: &Decomposition) -> Result<Self> {
        use rayon::prelude::*;
        let n = dec.n_nodes;
        let mut owner = vec![usize::MAX; n];
        for s in &dec.subdomains {
            for &g in &s.nodes {
                if owner[g] == usize::MAX {
                    owner[g] = s.id;
                }
            }
        }
        let blocks = dec
            .subdomains
            .par_iter()
            .map(|s| {
                let mut dofs = Vec::new();
                for f in 0..FIELDS {
                    dofs.extend(s.nodes.iter().filter(|&&g| owner[g] == s.id).map(|&g| f * n + g));
                }
                let blk = j.submatrix(&dofs, &dofs);
                let lu = if dec.n_subdomains() == 1 {
                    SparseLu::factor_pinned(&blk, n)?
                } else {
                    SparseLu::factor(&blk)?
                };
                Ok((dofs, lu))
            })
            .collect::<Result<_>>()?;
        Ok(Self { blocks })
    }
}

impl Preconditioner for BlockJacobi {
    fn apply(&self, r: &[f64]) -> Vec<f64> {
        use rayon::prelude::*;
        let parts: Vec<Vec<f64>> = self
            .blocks
            .par_iter()
            .map(|(dofs, lu)| {
                let mut x: Vec<f64> = dofs.iter().map(|&d| r[d]).collect();
                lu.solve_in_place(&mut x);
                x
            })
            .collect();
        let mut out = vec![0.0; r.len()];
        for ((dofs, _), x) in self.blocks.iter().zip(parts) {
            for (&d, v) in dofs.iter().zip(x) {
                out[d] = v;
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NewtonConfig {
    /// Absolute tolerance on the mass-normalized max norm of the residual.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for NewtonConfig {
    fn default() -> Self {
        Self {
            tol: 1e-4,
            max_iter: 20,
        }
    }
}

/// Stimulated region.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StimulusSite {
    /// Nodes inside a ball.
    Sphere { center: [f64; 3], radius: f64 },
    /// Endocardial nodes inside a ball.
    Endocardial { center: [f64; 3], radius: f64 },
}

/// How the extracellular current balancing the intracellular injection is placed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CurrentBalance {
    /// Uniform extracellular withdrawal over the whole tissue.
    Distributed,
    /// Extracellular current equal to the intracellular one at the same nodes.
    Colocated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StimulusProtocol {
    /// mA/cm^3
    pub amplitude: f64,
    /// ms
    pub duration: f64,
    pub sites: Vec<StimulusSite>,
    pub balance: CurrentBalance,
}

impl Default for StimulusProtocol {
    fn default() -> Self {
        Self {
            amplitude: 100.0,
            duration: 1.0,
            sites: vec![StimulusSite::Sphere {
                center: [0.0; 3],
                radius: 0.1,
            }],
            balance: CurrentBalance::Distributed,
        }
    }
}

impl StimulusProtocol {
    pub fn none() -> Self {
        Self {
            amplitude: 0.0,
            duration: 0.0,
            sites: Vec::new(),
            balance: CurrentBalance::Distributed,
        }
    }

    /// Nodes covered by any site.
    pub fn stimulated_nodes(&self, mesh: &Mesh) -> Vec<usize> {
        (0..mesh.n_nodes())
            .filter(|&n| {
                let x = mesh.coords()[n];
                self.sites.iter().any(|s| {
                    let (c, r, endo) = match s {
                        StimulusSite::Sphere { center, radius } => (center, radius, false),
                        StimulusSite::Endocardial { center, radius } => (center, radius, true),
                    };
                    let d2: f64 = (0..3).map(|k| (x[k] - c[k]).powi(2)).sum();
                    d2 <= r * r * (1.0 + 1e-12) && (!endo || mesh.is_endocardial(n))
                })
            })
            .collect()
    }

    /// Nodal (I_app^i, I_app^e) for the step starting at step index `step`.
    pub fn currents(&self, mesh: &Mesh, bd: &Bidomain, mats: &FeMatrices, step: usize) -> (Vec<f64>, Vec<f64>) {
        let n = mesh.n_nodes();
        let mut ii = vec![0.0; n];
        let mut ie = vec![0.0; n];
        let t = step as f64 * bd.tau;
        if self.amplitude == 0.0 || t >= self.duration - 1e-9 * bd.tau {
            return (ii, ie);
        }
        for k in self.stimulated_nodes(mesh) {
            ii[k] = self.amplitude;
        }
        match self.balance {
            CurrentBalance::Colocated => ie.copy_from_slice(&ii),
            CurrentBalance::Distributed => {
                let total = bd.integral(mats, &ii);
                let vol = bd.integral(mats, &vec![1.0; n]);
                ie.iter_mut().for_each(|v| *v = total / vol);
            }
        }
        (ii, ie)
    }
}

/// Statistics of one time step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepStats {
    pub step: usize,
    pub t: f64,
    /// Newton iterations.
    pub nit: usize,
    /// GMRES iterations of each Newton iteration.
    pub lit: Vec<usize>,
    /// Newton residual norms, starting with the initial one.
    pub residuals: Vec<f64>,
    /// GMRES relative residual histories per Newton iteration.
    pub gmres_histories: Vec<Vec<f64>>,
    pub seconds: f64,
}

impl StepStats {
    pub fn mean_lit(&self) -> f64 {
        if self.lit.is_empty() {
            0.0
        } else {
            self.lit.iter().sum::<usize>() as f64 / self.lit.len() as f64
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SolverStats {
    pub steps: Vec<StepStats>,
}

impl SolverStats {
    pub fn mean_nit(&self) -> f64 {
        if self.steps.is_empty() {
            return 0.0;
        }
        self.steps.iter().map(|s| s.nit as f64).sum::<f64>() / self.steps.len() as f64
    }

    /// GMRES iterations averaged over all Newton iterations.
    pub fn mean_lit(&self) -> f64 {
        let (sum, cnt) = self
            .steps
            .iter()
            .flat_map(|s| s.lit.iter())
            .fold((0usize, 0usize), |(s, c), l| (s + l, c + 1));
        if cnt == 0 {
            0.0
        } else {
            sum as f64 / cnt as f64
        }
    }

    pub fn seconds(&self) -> f64 {
        self.steps.iter().map(|s| s.seconds).sum()
    }
}

/// Everything needed to advance the discrete Bidomain system in time.
pub struct Simulation {
    pub mesh: Mesh,
    pub tensors: ConductivityTensors,
    pub dec: Arc<Decomposition>,
    pub bd: Bidomain,
    pub fe: FeMatrices,
    pub local_fe: Vec<FeMatrices>,
    pub sigma_max: Vec<[f64; 2]>,
    pub linear: LinearSolverKind,
    pub gmres: GmresConfig,
    pub newton: NewtonConfig,
    pub stimulus: StimulusProtocol,
}

/// Result of solving one Jacobian system.
#[derive(Debug, Clone)]
pub struct LinearSolve {
    pub s: Vec<f64>,
    pub iterations: usize,
    pub history: Vec<f64>,
}

impl Simulation {
    pub fn new(
        mesh: Mesh,
        tensors: ConductivityTensors,
        dec: Decomposition,
        bd: Bidomain,
        linear: LinearSolverKind,
        gmres: GmresConfig,
        newton: NewtonConfig,
        stimulus: StimulusProtocol,
    ) -> Result<Self> {
        bd.ionic.validate()?;
        gmres.validate()?;
        if !(bd.tau > 0.0) {
            return Err(Error::Config("time step must be positive".into()));
        }
        if !(newton.tol > 0.0) {
            return Err(Error::Config("Newton tolerance must be positive".into()));
        }
        if bd.tau > bd.ionic.coercive_time_step() {
            log::warn!(
                "time step {} ms exceeds the coercivity bound {:.4} ms",
                bd.tau,
                bd.ionic.coercive_time_step()
            );
        }
        let fe = assemble_stiffness_mass(&mesh, &tensors)?;
        let local_fe = assemble_local_fe(&mesh, &tensors, &dec)?;
        let sigma_max = subdomain_sigma_max(&dec, &tensors);
        Ok(Self {
            mesh,
            tensors,
            dec: Arc::new(dec),
            bd,
            fe,
            local_fe,
            sigma_max,
            linear,
            gmres,
            newton,
            stimulus,
        })
    }

    /// Mass-normalized max norm: max_k |F_k| / m_k with lumped nodal masses.
    pub fn residual_norm(&self, f: &[f64]) -> f64 {
        let n = self.mesh.n_nodes();
        f.iter()
            .enumerate()
            .map(|(k, v)| v.abs() / self.fe.lumped[k % n])
            .fold(0.0, f64::max)
    }

    /// Solves J(state) s = rhs with the configured linear solver.
    pub fn solve_linear(&self, state: &State, rhs: &[f64]) -> Result<LinearSolve> {
        let closed = self.dec.n_gamma() == 0;
        match self.linear {
            LinearSolverKind::Direct => self.solve_direct(state, rhs),
            _ if closed => self.solve_direct(state, rhs),
            LinearSolverKind::BlockJacobi => {
                let j = self.bd.jacobian_at(&self.fe, state);
                let pc = BlockJacobi::new(&j, &self.dec)?;
                let mut b = rhs.to_vec();
                deflate_full(&mut b);
                let proj = |x: &mut [f64]| deflate_full(x);
                let out = gmres(&j, &pc, &b, &self.gmres, Some(&proj))?;
                let mut s = out.x;
                deflate_full(&mut s);
                Ok(LinearSolve {
                    s,
                    iterations: out.iterations,
                    history: out.history,
                })
            }
            LinearSolverKind::Bddc(_) | LinearSolverKind::Unpreconditioned => {
                let ks = local_jacobians(&self.bd, &self.local_fe, &self.dec, state);
                let schur = SchurSystem::new(self.dec.clone(), ks)?;
                let mut fhat = schur.condense(rhs);
                deflate_gamma(&self.dec, &mut fhat);
                let dec = self.dec.clone();
                let proj = move |x: &mut [f64]| deflate_gamma(&dec, x);
                let out = match self.linear {
                    LinearSolverKind::Bddc(opts) => {
                        let ks: Vec<CsrMatrix> = schur.locals.iter().map(|l| l.k.clone()).collect();
                        let pc = Bddc::new(self.dec.clone(), &ks, Some(&self.sigma_max), opts)?;
                        gmres(&schur, &pc, &fhat, &self.gmres, Some(&proj))?
                    }
                    _ => gmres(&schur, &IdentityPreconditioner, &fhat, &self.gmres, Some(&proj))?,
                };
                let mut s = schur.back_substitute(&out.x, rhs);
                deflate_full(&mut s);
                Ok(LinearSolve {
                    s,
                    iterations: out.iterations,
                    history: out.history,
                })
            }
        }
    }

    fn solve_direct(&self, state: &State, rhs: &[f64]) -> Result<LinearSolve> {
        let j = self.bd.jacobian_at(&self.fe, state);
        let n = self.mesh.n_nodes();
        let lu = SparseLu::factor_pinned(&j, n)?;
        let mut b = rhs.to_vec();
        deflate_full(&mut b);
        let mut s = lu.solve(&b);
        deflate_full(&mut s);
        Ok(LinearSolve {
            s,
            iterations: 0,
            history: Vec::new(),
        })
    }

    /// Advances `old` by one Backward Euler step with Newton's method.
    pub fn step(&self, old: &State, step: usize) -> Result<(State, StepStats)> {
        let start = Instant::now();
        let (ii, ie) = self.stimulus.currents(&self.mesh, &self.bd, &self.fe, step);
        let mut state = old.clone();
        let mut stats = StepStats {
            step,
            t: (step + 1) as f64 * self.bd.tau,
            nit: 0,
            lit: Vec::new(),
            residuals: Vec::new(),
            gmres_histories: Vec::new(),
            seconds: 0.0,
        };
        let mut growth = 0;
        loop {
            let f = self.bd.residual(&self.fe, &state, old, &ii, &ie)?;
            let norm = self.residual_norm(&f);
            if let Some(&prev) = stats.residuals.last() {
                growth = if norm > prev { growth + 1 } else { 0 };
            }
            stats.residuals.push(norm);
            if norm <= self.newton.tol {
                break;
            }
            if growth >= 3 || stats.nit >= self.newton.max_iter || !norm.is_finite() {
                return Err(Error::NewtonDiverged {
                    step,
                    iterations: stats.nit,
                    residual: norm,
                });
            }
            let rep = coercivity_check(&state.v(), &state.w, self.bd.tau, &self.bd.ionic);
            if !rep.hyp1 {
                log::warn!(
                    "step {step}: chi C_m + tau dI/dv reaches {:.3e} at {} nodes",
                    rep.c1,
                    rep.violations.len()
                );
            }
            let rhs: Vec<f64> = f.iter().map(|v| -v).collect();
            let lin = self.solve_linear(&state, &rhs)?;
            state.add(&lin.s);
            stats.nit += 1;
            stats.lit.push(lin.iterations);
            stats.gmres_histories.push(lin.history);
        }
        stats.seconds = start.elapsed().as_secs_f64();
        Ok((state, stats))
    }

    /// Runs `n_steps` steps from `initial`; `observe` sees every new state.
    pub fn run(
        &self,
        initial: State,
        n_steps: usize,
        mut observe: impl FnMut(usize, &State),
    ) -> std::result::Result<(State, SolverStats), (Error, SolverStats)> {
        let mut stats = SolverStats::default();
        let mut state = initial;
        for k in 0..n_steps {
            match self.step(&state, k) {
                Ok((next, st)) => {
                    log::info!("step {k}: t = {:.3} ms, nit = {}, lit = {:?}", st.t, st.nit, st.lit);
                    stats.steps.push(st);
                    state = next;
                    observe(k, &state);
                }
                Err(e) => return Err((e, stats)),
            }
        }
        Ok((state, stats))
    }
}

/// Euclidean norm relative helper used by tests and diagnostics.
pub fn relative_residual(a: &dyn LinearOperator, x: &[f64], b: &[f64]) -> f64 {
    let ax = a.apply(x);
    let r: Vec<f64> = b.iter().zip(&ax).map(|(p, q)| p - q).collect();
    norm2(&r) / norm2(b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{DMatrix, DVector};

    #[test]
    fn identity_converges_in_one_iteration() {
        let a = CsrMatrix::identity(5);
        let b = [1.0, 2.0, 3.0, 4.0, 5.0];
        let out = gmres(&a, &IdentityPreconditioner, &b, &GmresConfig::default(), None).unwrap();
        assert_eq!(out.iterations, 1);
        for i in 0..5 {
            assert!((out.x[i] - b[i]).abs() < 1e-14);
        }
    }

    #[test]
    fn nonsymmetric_matches_dense() {
        let vals = [
            [4.0, 1.0, 0.0, 0.5, 0.0],
            [-1.0, 3.0, 0.2, 0.0, 0.0],
            [0.0, 0.7, 5.0, -1.0, 0.3],
            [0.1, 0.0, -0.4, 2.0, 1.0],
            [0.0, 0.0, 0.9, 0.0, 3.0],
        ];
        let trip: Vec<_> = (0..5)
            .flat_map(|r| (0..5).map(move |c| (r, c)))
            .filter(|&(r, c)| vals[r][c] != 0.0)
            .map(|(r, c)| (r, c, vals[r][c]))
            .collect();
        let a = CsrMatrix::from_triplets(5, 5, &trip);
        let b = [1.0, -1.0, 2.0, 0.5, 3.0];
        let cfg = GmresConfig {
            rtol: 1e-13,
            ..Default::default()
        };
        let out = gmres(&a, &IdentityPreconditioner, &b, &cfg, None).unwrap();
        let d = DMatrix::from_fn(5, 5, |r, c| vals[r][c]);
        let x = d.lu().solve(&DVector::from_row_slice(&b)).unwrap();
        for i in 0..5 {
            assert!((out.x[i] - x[i]).abs() < 1e-10);
        }
        for w in out.history.windows(2) {
            assert!(w[1] <= w[0] * (1.0 + 1e-12));
        }
    }

    #[test]
    fn failure_carries_best_iterate() {
        let n = 30;
        let trip: Vec<_> = (0..n).map(|i| (i, i, 1.0 + i as f64)).collect();
        let a = CsrMatrix::from_triplets(n, n, &trip);
        let b = vec![1.0; n];
        let cfg = GmresConfig {
            max_iter: 3,
            restart: 3,
            rtol: 1e-12,
            side: Side::Right,
        };
        let err = gmres(&a, &IdentityPreconditioner, &b, &cfg, None).unwrap_err();
        assert_eq!(err.0.iterations, 3);
        assert!(err.0.residual < 1.0);
        assert!((relative_residual(&a, &err.0.x, &b) - err.0.residual).abs() < 1e-12);
    }
}
