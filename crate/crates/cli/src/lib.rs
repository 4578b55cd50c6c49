//! Command implementations behind the `stargml` binary.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use stargml::gml::PhaseMode;
use stargml::harness::experiment::{write_grad_check, write_timing, TimingRow, SUMMARY_HEADER, TIMING_HEADER};
use stargml::harness::gradcheck::AnalyticGradient;
use stargml::harness::{
    grad_check_with, run_experiment, run_scheme, timing_probe, write_run, ConfigFile, ExperimentSpec, GradCheckConfig,
    Scale, Scheme, Setup,
};

#[derive(Debug, Parser)]
#[command(name = "stargml", version, about = "STAR-RIS beamforming by gradient-based meta-learning")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Solve one channel realization and write the solution.
    Run(RunArgs),
    /// Run an experiment described by a TOML spec file.
    Experiment(ExperimentArgs),
    /// Check the analytic WSR gradients against finite differences.
    GradCheck(GradCheckArgs),
    /// Measure seconds per training epoch over (M, N) sizes.
    Time(TimeArgs),
}

#[derive(Debug, Clone, Copy, Default, Args)]
pub struct ScaleArgs {
    /// M = 8, N = 16, K = 2, 300 epochs (the default).
    #[arg(long, conflicts_with = "paper_scale")]
    pub desk_scale: bool,
    /// M = 64, N = 100, K = 4, 500 epochs.
    #[arg(long)]
    pub paper_scale: bool,
}

impl ScaleArgs {
    fn scale(self) -> Option<Scale> {
        match (self.desk_scale, self.paper_scale) {
            (true, _) => Some(Scale::Desk),
            (_, true) => Some(Scale::Paper),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum ModeArg {
    Independent,
    Coupled,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// TOML configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Training seed (networks and starting point).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Phase model for the GML schemes.
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    /// gml_independent, gml_coupled, random_phase, conventional_ris or pga_oracle.
    #[arg(long)]
    pub scheme: Option<String>,
    /// Output directory.
    #[arg(long, default_value = "stargml-out")]
    pub out: PathBuf,
    #[command(flatten)]
    pub scale: ScaleArgs,
}

#[derive(Debug, Args)]
pub struct ExperimentArgs {
    /// Experiment spec file.
    pub spec: PathBuf,
    /// Master seed; overrides the spec's `seed`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory; overrides the spec's `out`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub scale: ScaleArgs,
}

#[derive(Debug, Args)]
pub struct GradCheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 50)]
    pub instances: usize,
    /// Directory for `grad_check.csv`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TimeArgs {
    /// TOML configuration file (system, train and channel sections).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Sizes as MxN.
    #[arg(long, value_delimiter = ',', default_value = "8x16,16x16,8x32,16x32")]
    pub sizes: Vec<String>,
    /// Timed repetitions per size, after one warm-up run.
    #[arg(long, default_value_t = 3)]
    pub repetitions: usize,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    /// Directory for `timing.csv`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub scale: ScaleArgs,
}

/// Runs a parsed command line. The returned value is the process exit code:
/// 0 on success, 1 when a check or an experiment cell failed.
pub fn execute(cli: Cli, out: &mut dyn Write) -> Result<u8> {
    match cli.command {
        Command::Run(args) => run_command(&args, out),
        Command::Experiment(args) => experiment_command(&args, out),
        Command::GradCheck(args) => grad_check_command(&args, stargml::gradients::wsr_gradients, out),
        Command::Time(args) => time_command(&args, out),
    }
}

fn load_setup(config: Option<&Path>, scale: Option<Scale>) -> Result<Setup> {
    let file = match config {
        Some(path) => ConfigFile::load(path)?,
        None => ConfigFile::default(),
    };
    Ok(file.resolve(scale)?)
}

fn apply_mode(setup: &mut Setup, mode: Option<ModeArg>) {
    if let Some(m) = mode {
        setup.train.mode = match m {
            ModeArg::Independent => PhaseMode::Independent,
            ModeArg::Coupled => PhaseMode::Coupled,
        };
    }
}

pub fn run_command(args: &RunArgs, out: &mut dyn Write) -> Result<u8> {
    let mut setup = load_setup(args.config.as_deref(), args.scale.scale())?;
    apply_mode(&mut setup, args.mode);
    if let Some(seed) = args.seed {
        setup.train.seed = seed;
    }
    let scheme = match &args.scheme {
        Some(name) => name.parse::<Scheme>()?,
        None if setup.train.mode == PhaseMode::Coupled => Scheme::GmlCoupled,
        None => Scheme::GmlIndependent,
    };
    if args.mode.is_some() && !matches!(scheme, Scheme::GmlIndependent | Scheme::GmlCoupled) {
        bail!("--mode applies to the gml schemes only");
    }
    let ch = setup.channels()?;
    let start = Instant::now();
    let sol = run_scheme(scheme, &setup, &ch, setup.train.seed)?;
    let seconds = start.elapsed().as_secs_f64();
    let files = write_run(&args.out, &sol, &ch)?;

    let sys = &setup.system;
    writeln!(out, "scheme {scheme}  M={} N={} K={}", sys.antennas, sys.elements, sys.users)?;
    writeln!(out, "wsr {:.6} bit/s/Hz", sol.wsr)?;
    if scheme == Scheme::GmlCoupled {
        writeln!(out, "wsr before projection {:.6}", sol.wsr_unprojected)?;
    }
    writeln!(out, "max |cos(theta_t - theta_r)| {:.3e}", sol.coupling_residual())?;
    writeln!(out, "seconds {seconds:.3}")?;
    for f in files {
        writeln!(out, "wrote {}", f.display())?;
    }
    Ok(0)
}

pub fn experiment_command(args: &ExperimentArgs, out: &mut dyn Write) -> Result<u8> {
    let mut spec = ExperimentSpec::load(&args.spec)?;
    if let Some(seed) = args.seed {
        spec.seed = seed;
    }
    let dir = args
        .out
        .clone()
        .or_else(|| spec.out.clone())
        .unwrap_or_else(|| PathBuf::from("stargml-out"));
    let report = run_experiment(&spec, args.scale.scale(), Some(&dir))?;

    if !report.summary.is_empty() {
        writeln!(out, "{}", SUMMARY_HEADER.join(","))?;
        for s in &report.summary {
            writeln!(
                out,
                "{},{},{},{:.6},{:.6},{:.4}",
                s.scheme, s.grid_value, s.samples, s.mean_wsr, s.std_wsr, s.mean_seconds
            )?;
        }
    }
    for t in &report.timing {
        writeln!(
            out,
            "M={} N={} K={}  median {:.3e} s/epoch  min {:.3e} s/epoch",
            t.antennas, t.elements, t.users, t.stats.median_s_per_epoch, t.stats.min_s_per_epoch
        )?;
    }
    if let Some(check) = &report.grad_check {
        print_grad_check(check, out)?;
    }
    for f in &report.failures {
        writeln!(out, "FAILED {} grid {} sample {}: {}", f.scheme, f.grid_value, f.sample, f.message)?;
    }
    writeln!(out, "wrote {} files to {}", report.files.len(), dir.display())?;
    Ok(if report.succeeded() { 0 } else { 1 })
}

fn print_grad_check(check: &stargml::harness::GradCheckReport, out: &mut dyn Write) -> Result<()> {
    let cfg = GradCheckConfig::default();
    writeln!(
        out,
        "{} instances: max rel err {:.3e} (limit {:.0e}), max abs err {:.3e} (limit {:.0e}) -> {}",
        check.instances.len(),
        check.worst.max_rel,
        cfg.rel_tol,
        check.worst.max_abs,
        cfg.abs_tol,
        if check.passed { "pass" } else { "FAIL" }
    )?;
    Ok(())
}

/// Gradient audit against `analytic`; tests substitute a broken gradient to
/// see the command fail.
pub fn grad_check_command(args: &GradCheckArgs, analytic: AnalyticGradient, out: &mut dyn Write) -> Result<u8> {
    let cfg = GradCheckConfig {
        instances: args.instances,
        seed: args.seed,
        ..GradCheckConfig::default()
    };
    let start = Instant::now();
    let check = grad_check_with(&cfg, analytic)?;
    print_grad_check(&check, out)?;
    writeln!(out, "seconds {:.2}", start.elapsed().as_secs_f64())?;
    if let Some(dir) = &args.out {
        let path = write_grad_check(dir, &check)?;
        writeln!(out, "wrote {}", path.display())?;
    }
    Ok(if check.passed { 0 } else { 1 })
}

fn parse_size(s: &str) -> Result<(usize, usize)> {
    let (m, n) = s
        .split_once('x')
        .with_context(|| format!("size {s:?} is not of the form MxN"))?;
    Ok((m.trim().parse()?, n.trim().parse()?))
}

pub fn time_command(args: &TimeArgs, out: &mut dyn Write) -> Result<u8> {
    let mut base = load_setup(args.config.as_deref(), args.scale.scale())?;
    apply_mode(&mut base, args.mode);
    if let Some(seed) = args.seed {
        base.train.seed = seed;
    }
    let sizes = args.sizes.iter().map(|s| parse_size(s)).collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::new();
    writeln!(out, "{}", TIMING_HEADER.join(","))?;
    for (m, n) in sizes {
        let mut setup = base.clone();
        setup.system.antennas = m;
        setup.system.elements = n;
        setup.validate()?;
        let stats = timing_probe(&setup.system, &setup.channel, setup.channel_seed, &setup.train, args.repetitions)?;
        writeln!(
            out,
            "{m},{n},{},{},{}",
            setup.system.users, stats.median_s_per_epoch, stats.min_s_per_epoch
        )?;
        rows.push(TimingRow {
            antennas: m,
            elements: n,
            users: setup.system.users,
            stats,
        });
    }
    if let Some(dir) = &args.out {
        let path = write_timing(dir, &rows)?;
        writeln!(out, "wrote {}", path.display())?;
    }
    Ok(0)
}
