use std::path::PathBuf;
use std::process::ExitCode;

use bidomain_core::bddc::ScalingKind;
use bidomain_core::harness::{
    constants_to_csv, run_diagnose, run_experiment, write_report, ExperimentKind, GeometryKind, RunConfig,
};
use bidomain_core::partition::PrimalConfig;
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "bidomain",
    version,
    about = "Fully implicit Bidomain simulations with Newton-Krylov-BDDC"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    opts: Opts,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Single simulation
    Run,
    /// Fixed local mesh, growing subdomain grid
    Weak,
    /// Fixed global mesh, growing subdomain grid
    Strong,
    /// H/h sweep over scalings and primal spaces
    Optimality,
    /// Long time loop with per-step iteration series
    Heartbeat,
    /// Theory constants and GMRES residual envelope
    Diagnose,
}

#[derive(Args)]
struct Opts {
    /// TOML configuration file
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Built-in configuration used when no file is given
    #[arg(long, global = true, default_value = "slab")]
    preset: String,
    /// slab or ellipsoid
    #[arg(long, global = true)]
    geometry: Option<GeometryKind>,
    /// rho or deluxe
    #[arg(long, global = true)]
    scaling: Option<ScalingKind>,
    /// v, ve or vef
    #[arg(long, global = true)]
    primal: Option<PrimalConfig>,
    /// Worker threads
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Output directory
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Number of time steps
    #[arg(long, global = true)]
    steps: Option<usize>,
    /// Single thread and no wall times in outputs
    #[arg(long, global = true)]
    deterministic: bool,
}

fn configure(cli: &Cli) -> bidomain_core::Result<RunConfig> {
    let o = &cli.opts;
    let mut cfg = match &o.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::preset(&o.preset)?,
    };
    if let Some(g) = o.geometry {
        if g != cfg.geometry.kind {
            let preset = match g {
                GeometryKind::Slab => "slab",
                GeometryKind::Ellipsoid => "ellipsoid",
            };
            let p = RunConfig::preset(preset)?;
            cfg.geometry = p.geometry;
            cfg.decomposition = p.decomposition;
        }
    }
    if let Some(s) = o.scaling {
        cfg.set_scaling(s);
    }
    if let Some(p) = o.primal {
        cfg.set_primal(p);
    }
    if let Some(t) = o.threads {
        cfg.threads = Some(t);
    }
    if let Some(d) = &o.out {
        cfg.output.dir = d.clone();
    }
    if let Some(n) = o.steps {
        cfg.time.steps = n;
    }
    cfg.deterministic |= o.deterministic;
    cfg.experiment = match cli.command {
        Command::Run | Command::Diagnose => cfg.experiment,
        Command::Weak => ExperimentKind::Weak,
        Command::Strong => ExperimentKind::Strong,
        Command::Optimality => ExperimentKind::Optimality,
        Command::Heartbeat => ExperimentKind::Heartbeat,
    };
    if matches!(cli.command, Command::Run) && cfg.experiment != ExperimentKind::Single {
        cfg.experiment = ExperimentKind::Single;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn execute(cli: &Cli) -> bidomain_core::Result<()> {
    let cfg = configure(cli)?;
    let dir = cfg.output.dir.clone();
    if let Command::Diagnose = cli.command {
        let r = run_diagnose(&cfg)?;
        std::fs::create_dir_all(&dir)?;
        std::fs::write(dir.join("envelope.csv"), r.envelope.to_csv())?;
        std::fs::write(dir.join("constants.csv"), constants_to_csv(&r.constants, &r.envelope))?;
        println!(
            "c_emp = {:.6}, C_emp = {:.6}, iterations = {}, violations = {}, B form positive = {}",
            r.envelope.c_emp,
            r.envelope.big_c_emp,
            r.envelope.ratios.len().saturating_sub(1),
            r.envelope.violations.len(),
            r.envelope.form_positive
        );
        println!(
            "wrote {} and {}",
            dir.join("envelope.csv").display(),
            dir.join("constants.csv").display()
        );
        return Ok(());
    }
    let report = run_experiment(&cfg)?;
    let files = write_report(&dir, &cfg.experiment.to_string(), &report)?;
    print!("{}", bidomain_core::harness::rows_to_csv(&report.rows)?);
    for f in files {
        println!("wrote {}", f.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            ExitCode::FAILURE
        }
    }
}
