//! Experiment driver: run configuration, presets, the weak/strong/optimality/
//! heartbeat suites, CSV statistics and legacy VTK snapshots.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::assembly::{Bidomain, State};
use crate::bddc::{Bddc, BddcOptions, ScalingKind};
use crate::diagnostics::{check_envelope, compute_constants, EnvelopeOptions, EnvelopeReport, TheoryConstants};
use crate::error::{Error, Result};
use crate::geometry::{build_conductivity, build_fibers, Conductivities, EllipsoidParams, Mesh};
use crate::ionic::IonicParams;
use crate::partition::{Decomposition, PrimalConfig, FIELDS};
use crate::schur::{local_jacobians, SchurSystem};
use crate::solvers::{
    GmresConfig, LinearSolverKind, NewtonConfig, Simulation, SolverStats, StimulusProtocol, StimulusSite,
};

/// Slab element size: 1.92 cm over 128 elements.
pub const SLAB_ELEMENT_SIZE: f64 = 0.015;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    Single,
    Weak,
    Strong,
    Optimality,
    Heartbeat,
}

impl fmt::Display for ExperimentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Single => "single",
            Self::Weak => "weak",
            Self::Strong => "strong",
            Self::Optimality => "optimality",
            Self::Heartbeat => "heartbeat",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeometryKind {
    Slab,
    Ellipsoid,
}

impl FromStr for GeometryKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "slab" => Ok(Self::Slab),
            "ellipsoid" => Ok(Self::Ellipsoid),
            _ => Err(Error::Config(format!("unknown geometry '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeometryConfig {
    pub kind: GeometryKind,
    /// Global element counts; local counts for weak scaling.
    pub elements: [usize; 3],
    /// Slab element size in cm.
    pub h: f64,
    pub ellipsoid: EllipsoidParams,
}

impl Default for GeometryConfig {
    fn default() -> Self {
        Self {
            kind: GeometryKind::Slab,
            elements: [12, 12, 12],
            h: SLAB_ELEMENT_SIZE,
            ellipsoid: EllipsoidParams::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecompositionConfig {
    pub grid: [usize; 3],
    pub primal: PrimalConfig,
}

impl Default for DecompositionConfig {
    fn default() -> Self {
        Self {
            grid: [2, 2, 2],
            primal: PrimalConfig::VE,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TimeConfig {
    /// Time step in ms.
    pub tau: f64,
    pub steps: usize,
}

impl Default for TimeConfig {
    fn default() -> Self {
        Self { tau: 0.05, steps: 40 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    pub linear: LinearSolverKind,
    pub gmres: GmresConfig,
    pub newton: NewtonConfig,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            linear: LinearSolverKind::Bddc(BddcOptions::default()),
            gmres: GmresConfig::default(),
            newton: NewtonConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    /// Subdomain grids for weak and strong scaling.
    pub grids: Vec<[usize; 3]>,
    /// Local element counts per direction for the optimality sweep.
    pub ratios: Vec<usize>,
    pub scalings: Vec<ScalingKind>,
    pub primals: Vec<PrimalConfig>,
    /// Additional linear solvers run on every weak/strong row.
    pub baselines: Vec<LinearSolverKind>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            grids: vec![[1, 1, 1], [2, 1, 1], [2, 2, 1], [2, 2, 2]],
            ratios: vec![4, 8, 12],
            scalings: vec![ScalingKind::Rho, ScalingKind::Deluxe],
            primals: PrimalConfig::ALL.to_vec(),
            baselines: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
    /// Snapshot cadence in time steps; 0 disables VTK output.
    pub vtk_every: usize,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("out"),
            vtk_every: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiagnoseConfig {
    /// Random samples for the field-of-values estimate.
    pub samples: usize,
    /// Augment the samples with dense eigenproblems.
    pub exact: bool,
}

impl Default for DiagnoseConfig {
    fn default() -> Self {
        Self {
            samples: 100,
            exact: true,
        }
    }
}

/// Complete description of one experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub experiment: ExperimentKind,
    pub geometry: GeometryConfig,
    pub decomposition: DecompositionConfig,
    pub ionic: IonicParams,
    pub conductivities: Conductivities,
    pub time: TimeConfig,
    pub solver: SolverConfig,
    /// Defaults to the geometry's protocol when absent.
    pub stimulus: Option<StimulusProtocol>,
    pub sweep: SweepConfig,
    pub output: OutputConfig,
    pub diagnose: DiagnoseConfig,
    pub seed: u64,
    pub threads: Option<usize>,
    /// Single thread, no wall times in outputs.
    pub deterministic: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::preset("slab").expect("built-in preset")
    }
}

impl RunConfig {
    /// Named configurations with the default physical parameters.
    pub fn preset(name: &str) -> Result<Self> {
        let base = RunConfig {
            experiment: ExperimentKind::Single,
            geometry: GeometryConfig::default(),
            decomposition: DecompositionConfig::default(),
            ionic: IonicParams::default(),
            conductivities: Conductivities::default(),
            time: TimeConfig::default(),
            solver: SolverConfig::default(),
            stimulus: None,
            sweep: SweepConfig::default(),
            output: OutputConfig::default(),
            diagnose: DiagnoseConfig::default(),
            seed: 1,
            threads: None,
            deterministic: false,
        };
        match name {
            "slab" => Ok(base),
            "ellipsoid" => Ok(RunConfig {
                geometry: GeometryConfig {
                    kind: GeometryKind::Ellipsoid,
                    elements: [16, 12, 4],
                    ..GeometryConfig::default()
                },
                decomposition: DecompositionConfig {
                    grid: [2, 2, 1],
                    primal: PrimalConfig::VE,
                },
                ..base
            }),
            _ => Err(Error::Config(format!("unknown preset '{name}'"))),
        }
    }

    pub fn from_toml(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&fs::read_to_string(path)?)
    }

    /// Checks the divisibility constraints of every case the experiment runs.
    pub fn validate(&self) -> Result<()> {
        self.ionic.validate()?;
        self.solver.gmres.validate()?;
        if !(self.time.tau > 0.0) {
            return Err(Error::Config("time step must be positive".into()));
        }
        if self.geometry.elements.contains(&0) || !(self.geometry.h > 0.0) {
            return Err(Error::Config("geometry needs positive element counts and size".into()));
        }
        for case in self.cases() {
            for d in 0..3 {
                if case.grid[d] == 0 || case.elements[d] % case.grid[d] != 0 {
                    return Err(Error::Partition(format!(
                        "{} elements in direction {d} cannot be split into {} subdomains",
                        case.elements[d], case.grid[d]
                    )));
                }
            }
        }
        Ok(())
    }

    /// Applies a scaling kind to the BDDC solver.
    pub fn set_scaling(&mut self, scaling: ScalingKind) {
        match &mut self.solver.linear {
            LinearSolverKind::Bddc(o) => o.scaling = scaling,
            other => {
                *other = LinearSolverKind::Bddc(BddcOptions {
                    scaling,
                    ..BddcOptions::default()
                })
            }
        }
        self.sweep.scalings = vec![scaling];
    }

    pub fn set_primal(&mut self, primal: PrimalConfig) {
        self.decomposition.primal = primal;
        self.sweep.primals = vec![primal];
    }

    fn cases(&self) -> Vec<Case> {
        let g = &self.geometry;
        let base = Case {
            elements: g.elements,
            grid: self.decomposition.grid,
            primal: self.decomposition.primal,
            linear: self.solver.linear,
            portion: [1.0, 1.0],
        };
        match self.experiment {
            ExperimentKind::Single | ExperimentKind::Heartbeat => vec![base],
            ExperimentKind::Weak => {
                let gmax = [0, 1].map(|d| self.sweep.grids.iter().map(|q| q[d]).max().unwrap_or(1).max(1));
                self.sweep
                    .grids
                    .iter()
                    .flat_map(|&grid| {
                        let elements = [0, 1, 2].map(|d| g.elements[d] * grid[d]);
                        let portion = [0, 1].map(|d| grid[d] as f64 / gmax[d] as f64);
                        self.solvers().into_iter().map(move |linear| Case {
                            elements,
                            grid,
                            linear,
                            portion,
                            ..base
                        })
                    })
                    .collect()
            }
            ExperimentKind::Strong => self
                .sweep
                .grids
                .iter()
                .flat_map(|&grid| {
                    self.solvers()
                        .into_iter()
                        .map(move |linear| Case { grid, linear, ..base })
                })
                .collect(),
            ExperimentKind::Optimality => {
                let mut out = Vec::new();
                for &r in &self.sweep.ratios {
                    for &scaling in &self.sweep.scalings {
                        for &primal in &self.sweep.primals {
                            let opts = match self.solver.linear {
                                LinearSolverKind::Bddc(o) => BddcOptions { scaling, ..o },
                                _ => BddcOptions {
                                    scaling,
                                    ..BddcOptions::default()
                                },
                            };
                            out.push(Case {
                                elements: [0, 1, 2].map(|d| r * base.grid[d]),
                                primal,
                                linear: LinearSolverKind::Bddc(opts),
                                ..base
                            });
                        }
                    }
                }
                out
            }
        }
    }

    fn solvers(&self) -> Vec<LinearSolverKind> {
        let mut v = vec![self.solver.linear];
        v.extend(self.sweep.baselines.iter().copied());
        v
    }
}

#[derive(Debug, Clone, Copy)]
struct Case {
    elements: [usize; 3],
    grid: [usize; 3],
    primal: PrimalConfig,
    linear: LinearSolverKind,
    /// Fraction of the angular ranges used by an ellipsoid (φ, θ).
    portion: [f64; 2],
}

/// One table row.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub subds: usize,
    pub mesh: [usize; 3],
    pub dofs: usize,
    pub nit: f64,
    pub lit: f64,
    /// Mean wall time per step in seconds.
    pub time: Option<f64>,
    pub sp: Option<f64>,
    pub label: String,
    pub status: String,
}

/// Per-step series of a time loop.
#[derive(Debug, Clone, PartialEq)]
pub struct SeriesRow {
    pub step: usize,
    pub t: f64,
    pub nit: usize,
    pub lit: f64,
    pub time: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ExperimentReport {
    pub rows: Vec<ReportRow>,
    pub series: Vec<SeriesRow>,
}

/// Number of unknowns of a mesh: three fields on (nx+1)(ny+1)(nz+1) nodes.
pub fn dof_count(elements: [usize; 3]) -> usize {
    FIELDS * elements.iter().map(|n| n + 1).product::<usize>()
}

/// Formats to 6 significant digits.
pub fn sig6(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        return if x == 0.0 { "0.00000".into() } else { format!("{x}") };
    }
    let sci = format!("{x:.5e}");
    let exp: i32 = sci[sci.find('e').unwrap() + 1..].parse().unwrap();
    if (-4..6).contains(&exp) {
        format!("{x:.*}", (5 - exp) as usize)
    } else {
        sci
    }
}

fn label_of(case: &Case) -> String {
    if case.grid == [1, 1, 1] {
        return LinearSolverKind::Direct.to_string();
    }
    match &case.linear {
        LinearSolverKind::Bddc(o) => format!("bddc-{}-{}", o.scaling, case.primal),
        other => other.to_string(),
    }
}

/// Builds the mesh for a geometry with an optional angular portion.
fn build_mesh(g: &GeometryConfig, elements: [usize; 3], portion: [f64; 2]) -> Result<Mesh> {
    let [nx, ny, nz] = elements;
    match g.kind {
        GeometryKind::Slab => Mesh::slab(nx, ny, nz, elements.map(|n| n as f64 * g.h)),
        GeometryKind::Ellipsoid => {
            let mut p = g.ellipsoid;
            p.phi_max = p.phi_min + (p.phi_max - p.phi_min) * portion[0];
            p.theta_max = p.theta_min + (p.theta_max - p.theta_min) * portion[1];
            Mesh::ellipsoid(nx, ny, nz, p)
        }
    }
}

/// Default protocol: a corner ball on the slab, five endocardial sites at the
/// apex of the ellipsoid.
pub fn default_stimulus(mesh: &Mesh) -> StimulusProtocol {
    match mesh.kind() {
        crate::geometry::MeshKind::Slab { .. } => StimulusProtocol::default(),
        crate::geometry::MeshKind::Ellipsoid(p) => {
            let radius = 0.25;
            let sites = (0..5)
                .map(|s| {
                    let phi = p.phi_min + (p.phi_max - p.phi_min) * s as f64 / 4.0;
                    let x = p.point(phi, p.theta_min, 0.0);
                    StimulusSite::Endocardial {
                        center: [x.x, x.y, x.z],
                        radius,
                    }
                })
                .collect();
            StimulusProtocol {
                sites,
                ..StimulusProtocol::default()
            }
        }
    }
}

/// Simulation for a configuration case.
fn build_simulation(cfg: &RunConfig, case: &Case) -> Result<Simulation> {
    let mesh = build_mesh(&cfg.geometry, case.elements, case.portion)?;
    let tensors = build_conductivity(&build_fibers(&mesh), cfg.conductivities, None)?;
    let dec = Decomposition::new(&mesh, case.grid, case.primal)?;
    let stimulus = cfg.stimulus.clone().unwrap_or_else(|| default_stimulus(&mesh));
    Simulation::new(
        mesh,
        tensors,
        dec,
        Bidomain::new(cfg.ionic, cfg.time.tau),
        case.linear,
        cfg.solver.gmres,
        cfg.solver.newton,
        stimulus,
    )
}

/// Simulation described by the top-level configuration.
pub fn simulation_from_config(cfg: &RunConfig) -> Result<Simulation> {
    let case = Case {
        elements: cfg.geometry.elements,
        grid: cfg.decomposition.grid,
        primal: cfg.decomposition.primal,
        linear: cfg.solver.linear,
        portion: [1.0, 1.0],
    };
    build_simulation(cfg, &case)
}

fn row_of(cfg: &RunConfig, case: &Case, stats: &SolverStats, status: String) -> ReportRow {
    let steps = stats.steps.len().max(1) as f64;
    ReportRow {
        subds: case.grid.iter().product(),
        mesh: case.elements,
        dofs: dof_count(case.elements),
        nit: stats.mean_nit(),
        lit: stats.mean_lit(),
        time: (!cfg.deterministic).then(|| stats.seconds() / steps),
        sp: None,
        label: label_of(case),
        status,
    }
}

fn series_of(cfg: &RunConfig, stats: &SolverStats) -> Vec<SeriesRow> {
    stats
        .steps
        .iter()
        .map(|s| SeriesRow {
            step: s.step,
            t: s.t,
            nit: s.nit,
            lit: s.mean_lit(),
            time: (!cfg.deterministic).then_some(s.seconds),
        })
        .collect()
}

/// Runs one case; failures are recorded in the row status.
fn run_case(cfg: &RunConfig, case: &Case, snapshots: bool) -> (ReportRow, SolverStats) {
    let sim = match build_simulation(cfg, case) {
        Ok(s) => s,
        Err(e) => {
            return (
                row_of(cfg, case, &SolverStats::default(), format!("failed: {e}")),
                SolverStats::default(),
            )
        }
    };
    let every = cfg.output.vtk_every;
    let mut io_error = None;
    let mut observe = |k: usize, s: &State| {
        if snapshots && every > 0 && (k + 1) % every == 0 && io_error.is_none() {
            let path = cfg.output.dir.join(format!("snapshot_{:05}.vtk", k + 1));
            if let Err(e) = write_vtk(&path, &sim.mesh, s, (k + 1) as f64 * cfg.time.tau) {
                io_error = Some(e);
            }
        }
    };
    let (stats, status) = match sim.run(State::rest(sim.mesh.n_nodes()), cfg.time.steps, &mut observe) {
        Ok((_, st)) => (st, "ok".to_string()),
        Err((e, st)) => (st, format!("failed: {e}")),
    };
    let status = match io_error {
        Some(e) => format!("failed: {e}"),
        None => status,
    };
    (row_of(cfg, case, &stats, status), stats)
}

/// Runs the configured experiment inside a thread pool of the configured size.
pub fn run_experiment(cfg: &RunConfig) -> Result<ExperimentReport> {
    cfg.validate()?;
    with_pool(cfg, || run_experiment_inner(cfg))
}

/// Runs `f` on a pool sized by `threads` (one thread in deterministic mode).
pub fn with_pool<T: Send>(cfg: &RunConfig, f: impl FnOnce() -> Result<T> + Send) -> Result<T> {
    let threads = if cfg.deterministic { Some(1) } else { cfg.threads };
    match threads {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build()
            .map_err(|e| Error::Config(e.to_string()))?
            .install(f),
        None => f(),
    }
}

fn run_experiment_inner(cfg: &RunConfig) -> Result<ExperimentReport> {
    let mut report = ExperimentReport::default();
    let snapshots = matches!(cfg.experiment, ExperimentKind::Single | ExperimentKind::Heartbeat);
    if snapshots && cfg.output.vtk_every > 0 {
        fs::create_dir_all(&cfg.output.dir)?;
    }
    for case in cfg.cases() {
        log::info!(
            "{} case: mesh {:?}, grid {:?}, {}",
            cfg.experiment,
            case.elements,
            case.grid,
            label_of(&case)
        );
        let (row, stats) = run_case(cfg, &case, snapshots);
        if snapshots {
            report.series.extend(series_of(cfg, &stats));
        }
        report.rows.push(row);
    }
    if cfg.experiment == ExperimentKind::Strong && !cfg.deterministic {
        let n_solvers = cfg.solvers().len();
        for s in 0..n_solvers {
            let reference = report.rows.get(s).and_then(|r| r.time);
            for row in report.rows.iter_mut().skip(s).step_by(n_solvers) {
                row.sp = match (reference, row.time) {
                    (Some(t1), Some(tn)) if tn > 0.0 => Some(t1 / tn),
                    _ => None,
                };
            }
        }
    }
    Ok(report)
}

pub const CSV_HEADER: [&str; 9] = ["subds", "mesh", "dofs", "nit", "lit", "time", "sp", "label", "status"];
pub const SERIES_HEADER: [&str; 5] = ["step", "t", "nit", "lit", "time"];

fn opt6(x: Option<f64>) -> String {
    x.map(sig6).unwrap_or_default()
}

/// Report rows as CSV text.
pub fn rows_to_csv(rows: &[ReportRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(CSV_HEADER).map_err(csv_err)?;
    for r in rows {
        w.write_record([
            r.subds.to_string(),
            format!("{}x{}x{}", r.mesh[0], r.mesh[1], r.mesh[2]),
            r.dofs.to_string(),
            sig6(r.nit),
            sig6(r.lit),
            opt6(r.time),
            opt6(r.sp),
            r.label.clone(),
            r.status.clone(),
        ])
        .map_err(csv_err)?;
    }
    finish(w)
}

/// Step series as CSV text.
pub fn series_to_csv(rows: &[SeriesRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(SERIES_HEADER).map_err(csv_err)?;
    for r in rows {
        w.write_record([
            r.step.to_string(),
            sig6(r.t),
            r.nit.to_string(),
            sig6(r.lit),
            opt6(r.time),
        ])
        .map_err(csv_err)?;
    }
    finish(w)
}

fn finish(w: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = w.into_inner().map_err(|e| Error::Config(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Config(e.to_string()))
}

fn csv_err(e: csv::Error) -> Error {
    Error::Config(format!("csv: {e}"))
}

/// Parses report rows written by [`rows_to_csv`].
pub fn rows_from_csv(text: &str) -> Result<Vec<ReportRow>> {
    let mut rd = csv::Reader::from_reader(text.as_bytes());
    let bad = |what: &str| Error::Config(format!("malformed report field '{what}'"));
    let num = |s: &str| -> Result<f64> { s.parse().map_err(|_| bad(s)) };
    let opt = |s: &str| -> Result<Option<f64>> {
        if s.is_empty() {
            Ok(None)
        } else {
            num(s).map(Some)
        }
    };
    let mut rows = Vec::new();
    for rec in rd.records() {
        let rec = rec.map_err(csv_err)?;
        let f = |i: usize| rec.get(i).ok_or_else(|| bad("missing column"));
        let mesh: Vec<usize> = f(1)?
            .split('x')
            .map(|s| s.parse().map_err(|_| bad(s)))
            .collect::<Result<_>>()?;
        if mesh.len() != 3 {
            return Err(bad(f(1)?));
        }
        rows.push(ReportRow {
            subds: f(0)?.parse().map_err(|_| bad(f(0).unwrap_or("")))?,
            mesh: [mesh[0], mesh[1], mesh[2]],
            dofs: f(2)?.parse().map_err(|_| bad(f(2).unwrap_or("")))?,
            nit: num(f(3)?)?,
            lit: num(f(4)?)?,
            time: opt(f(5)?)?,
            sp: opt(f(6)?)?,
            label: f(7)?.to_string(),
            status: f(8)?.to_string(),
        });
    }
    Ok(rows)
}

/// Writes the report (and step series when present) into `dir`.
pub fn write_report(dir: &Path, name: &str, report: &ExperimentReport) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    let main = dir.join(format!("{name}.csv"));
    fs::write(&main, rows_to_csv(&report.rows)?)?;
    written.push(main);
    if !report.series.is_empty() {
        let p = dir.join(format!("{name}_series.csv"));
        fs::write(&p, series_to_csv(&report.series)?)?;
        written.push(p);
    }
    Ok(written)
}

/// Legacy ASCII VTK structured grid with point fields v, u_e and w.
pub fn vtk_string(mesh: &Mesh, state: &State, t: f64) -> Result<String> {
    let n = mesh.n_nodes();
    if state.n() != n {
        return Err(Error::Config(format!("state has {} nodes, mesh has {n}", state.n())));
    }
    let [a, b, c] = mesh.node_dims();
    let mut s = String::with_capacity(n * 64);
    s.push_str("# vtk DataFile Version 3.0\n");
    s.push_str(&format!("bidomain t={t}\nASCII\nDATASET STRUCTURED_GRID\n"));
    s.push_str(&format!("DIMENSIONS {a} {b} {c}\nPOINTS {n} double\n"));
    for p in mesh.coords() {
        s.push_str(&format!("{} {} {}\n", p[0], p[1], p[2]));
    }
    s.push_str(&format!("POINT_DATA {n}\n"));
    let v = state.v();
    for (name, field) in [("v", &v), ("u_e", &state.ue), ("w", &state.w)] {
        s.push_str(&format!("SCALARS {name} double 1\nLOOKUP_TABLE default\n"));
        for x in field.iter() {
            s.push_str(&format!("{x}\n"));
        }
    }
    Ok(s)
}

pub fn write_vtk(path: &Path, mesh: &Mesh, state: &State, t: f64) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(vtk_string(mesh, state, t)?.as_bytes())?;
    Ok(())
}

/// True when the maximum of `series` lies in its leading `fraction`.
pub fn peak_in_leading_fraction(series: &[f64], fraction: f64) -> bool {
    if series.is_empty() {
        return false;
    }
    let arg = series
        .iter()
        .enumerate()
        .fold(0, |best, (i, &x)| if x > series[best] { i } else { best });
    (arg as f64) < fraction * series.len() as f64
}

/// Theory constants and envelope at the state reached after the configured
/// number of time steps.
#[derive(Debug, Clone)]
pub struct DiagnoseReport {
    pub constants: TheoryConstants,
    pub envelope: EnvelopeReport,
    pub state: State,
}

pub fn run_diagnose(cfg: &RunConfig) -> Result<DiagnoseReport> {
    cfg.validate()?;
    with_pool(cfg, || {
        let sim = simulation_from_config(cfg)?;
        let opts = match sim.linear {
            LinearSolverKind::Bddc(o) => o,
            _ => return Err(Error::Config("diagnostics need the BDDC solver".into())),
        };
        let state = match sim.run(State::rest(sim.mesh.n_nodes()), cfg.time.steps, |_, _| {}) {
            Ok((s, _)) => s,
            Err((e, _)) => return Err(e),
        };
        let constants = compute_constants(&state, &sim.bd, &sim.dec, &sim.tensors, sim.mesh.h(), opts.scaling);
        let ks = local_jacobians(&sim.bd, &sim.local_fe, &sim.dec, &state);
        let schur = SchurSystem::new(sim.dec.clone(), ks.clone())?;
        let bddc = Bddc::new(sim.dec.clone(), &ks, Some(&sim.sigma_max), opts)?;
        let (ii, ie) = sim.stimulus.currents(&sim.mesh, &sim.bd, &sim.fe, 0);
        let f = sim.bd.residual(&sim.fe, &state, &state, &ii, &ie)?;
        let rhs: Vec<f64> = f.iter().map(|v| -v).collect();
        let b = schur.condense(&rhs);
        let envelope = check_envelope(
            &schur,
            &bddc,
            &b,
            &EnvelopeOptions {
                samples: cfg.diagnose.samples,
                seed: cfg.seed,
                exact: cfg.diagnose.exact,
                gmres: cfg.solver.gmres,
            },
        )?;
        Ok(DiagnoseReport {
            constants,
            envelope,
            state,
        })
    })
}

/// Key/value listing of theory constants.
pub fn constants_to_csv(k: &TheoryConstants, e: &EnvelopeReport) -> String {
    let mut s = String::from("name,value\n");
    let mut put = |name: &str, v: f64| s.push_str(&format!("{name},{}\n", sig6(v)));
    put("K_M_I", k.k_max_i);
    put("K_m_I", k.k_min_i);
    put("K_M_R", k.k_max_r);
    put("K_m_R", k.k_min_r);
    put("C_Iw", k.c_iw);
    put("C_Rv", k.c_rv);
    put("H", k.h_sub);
    put("h", k.h);
    put("tau", k.tau);
    put("K2", k.k2);
    put("Phi", k.phi);
    put("c0", k.c0);
    put("c", k.c);
    put("C", k.big_c);
    put("c_sampled", e.sampled.c);
    put("C_sampled", e.sampled.big_c);
    put("c_emp", e.c_emp);
    put("C_emp", e.big_c_emp);
    put("skew_max", e.skew_max);
    s
}
