//! Experiment specs, the cell runner, and CSV output.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Deserialize;

use super::config::{ChannelSection, ConfigFile, PgaSection, Scale, Setup, SystemSection, TrainSection};
use super::gradcheck::{grad_check, GradCheckConfig, GradCheckReport};
use super::timing::{timing_probe, TimingStats};
use crate::baselines::{conventional_ris_baseline, pga_oracle, random_phase_baseline, PgaConfig};
use crate::channels::generate_channels;
use crate::error::{Error, Result};
use crate::gml::{run_gml, PhaseMode, Solution, TrainConfig, Traces};
use crate::model::{ChannelSet, SystemConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    /// Best-so-far and current WSR per epoch.
    Convergence,
    /// Final WSR over a grid of element counts.
    SweepN,
    /// Final WSR over a grid of power budgets.
    SweepPmax,
    /// Final WSR over a grid of (M, N) pairs.
    SweepMn,
    /// Seconds per epoch over a grid of (M, N) pairs.
    Timing,
    /// Per-epoch `θ_t − θ_r` of every element.
    PhaseTrace,
    /// Finite-difference audit of the gradients.
    GradCheck,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    GmlIndependent,
    GmlCoupled,
    RandomPhase,
    ConventionalRis,
    PgaOracle,
}

impl Scheme {
    pub const ALL: [Scheme; 5] = [
        Scheme::GmlIndependent,
        Scheme::GmlCoupled,
        Scheme::RandomPhase,
        Scheme::ConventionalRis,
        Scheme::PgaOracle,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Scheme::GmlIndependent => "gml_independent",
            Scheme::GmlCoupled => "gml_coupled",
            Scheme::RandomPhase => "random_phase",
            Scheme::ConventionalRis => "conventional_ris",
            Scheme::PgaOracle => "pga_oracle",
        }
    }

    fn code(self) -> u64 {
        self as u64 + 1
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Scheme::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| {
                let names: Vec<_> = Scheme::ALL.iter().map(|x| x.name()).collect();
                Error::Config(format!("unknown scheme {s:?}, expected one of {}", names.join(", ")))
            })
    }
}

/// Runs one scheme on one channel set. `seed` drives network and starting
/// point draws.
pub fn run_scheme(scheme: Scheme, setup: &Setup, ch: &ChannelSet, seed: u64) -> Result<Solution> {
    let sys = &setup.system;
    let train = TrainConfig {
        seed,
        mode: match scheme {
            Scheme::GmlCoupled => PhaseMode::Coupled,
            _ => PhaseMode::Independent,
        },
        ..setup.train.clone()
    };
    match scheme {
        Scheme::GmlIndependent | Scheme::GmlCoupled => run_gml(sys, ch, &train),
        Scheme::RandomPhase => random_phase_baseline(sys, ch, &train),
        Scheme::ConventionalRis => conventional_ris_baseline(sys, ch, &train),
        Scheme::PgaOracle => pga_oracle(sys, ch, &PgaConfig { seed, ..setup.pga.clone() }),
    }
}

fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed for one stream, keyed by the master seed and a tuple of indices.
pub fn derive_seed(master: u64, key: &[u64]) -> u64 {
    key.iter().fold(mix(master), |acc, k| mix(acc ^ mix(*k)))
}

/// Channel seed of a cell; shared by all schemes so comparisons are paired.
pub fn channel_seed(master: u64, grid: usize, sample: usize) -> u64 {
    derive_seed(master, &[0, grid as u64, sample as u64])
}

pub fn scheme_seed(master: u64, scheme: Scheme, grid: usize, sample: usize) -> u64 {
    derive_seed(master, &[scheme.code(), grid as u64, sample as u64])
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSection {
    pub elements: Option<Vec<usize>>,
    pub p_max_watts: Option<Vec<f64>>,
    /// `[M, N]` pairs.
    pub sizes: Option<Vec<[usize; 2]>>,
}

fn default_samples() -> usize {
    20
}

/// An experiment file.
///
/// ```toml
/// kind = "sweep_n"                # convergence, sweep_n, sweep_pmax, sweep_mn,
///                                 # timing, phase_trace, grad_check
/// samples = 20
/// schemes = ["gml_independent", "random_phase"]
/// seed = 1
/// scale = "desk"
/// out = "results/sweep_n"
/// repetitions = 3                 # timing only
/// instances = 50                  # grad_check only
///
/// [grid]
/// elements = [8, 16, 32]          # sweep_n (optional for convergence, phase_trace)
/// # p_max_watts = [0.1, 1.0]      # sweep_pmax
/// # sizes = [[8, 16], [16, 16]]   # sweep_mn, timing
///
/// [train]                         # same sections as a config file
/// epochs = 300
/// ```
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub kind: ExperimentKind,
    #[serde(default = "default_samples")]
    pub samples: usize,
    #[serde(default)]
    pub schemes: Vec<Scheme>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub scale: Option<Scale>,
    #[serde(default)]
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub repetitions: Option<usize>,
    #[serde(default)]
    pub instances: Option<usize>,
    #[serde(default)]
    pub grid: GridSection,
    #[serde(default)]
    pub system: SystemSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub channel: ChannelSection,
    #[serde(default)]
    pub pga: PgaSection,
}

impl ExperimentSpec {
    pub fn new(kind: ExperimentKind) -> Self {
        Self {
            kind,
            samples: default_samples(),
            schemes: Vec::new(),
            seed: 0,
            scale: None,
            out: None,
            repetitions: None,
            instances: None,
            grid: GridSection::default(),
            system: SystemSection::default(),
            train: TrainSection::default(),
            channel: ChannelSection::default(),
            pga: PgaSection::default(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Parse(msg) => Error::Parse(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// Schemes to run; kind-specific defaults when the list is empty.
    pub fn effective_schemes(&self) -> Vec<Scheme> {
        if !self.schemes.is_empty() {
            return self.schemes.clone();
        }
        match self.kind {
            ExperimentKind::Convergence => vec![Scheme::GmlIndependent, Scheme::GmlCoupled],
            ExperimentKind::PhaseTrace => vec![Scheme::GmlCoupled],
            ExperimentKind::Timing | ExperimentKind::GradCheck => vec![Scheme::GmlIndependent],
            _ => Scheme::ALL.to_vec(),
        }
    }

    fn base(&self, scale: Option<Scale>) -> Result<Setup> {
        ConfigFile {
            scale: self.scale,
            system: self.system.clone(),
            train: self.train.clone(),
            channel: self.channel.clone(),
            pga: self.pga.clone(),
        }
        .resolve(scale)
    }

    /// Grid points with their labels and fully resolved setups.
    pub fn grid_points(&self, scale: Option<Scale>) -> Result<Vec<(String, Setup)>> {
        let base = self.base(scale)?;
        let with = |f: &dyn Fn(&mut SystemConfig)| -> Result<Setup> {
            let mut s = base.clone();
            f(&mut s.system);
            s.validate()?;
            Ok(s)
        };
        let missing = |key: &str| Error::Config(format!("{:?} experiment needs a non-empty grid.{key}", self.kind));
        let nonempty = |v: &Option<Vec<_>>| v.as_ref().is_some_and(|v: &Vec<_>| !v.is_empty());
        let elements = |list: &[usize]| -> Result<Vec<(String, Setup)>> {
            list.iter()
                .map(|&n| Ok((n.to_string(), with(&|s| s.elements = n)?)))
                .collect()
        };
        let sizes = |list: &[[usize; 2]]| -> Result<Vec<(String, Setup)>> {
            list.iter()
                .map(|&[m, n]| {
                    Ok((format!("{m}x{n}"), with(&|s| {
                        s.antennas = m;
                        s.elements = n;
                    })?))
                })
                .collect()
        };
        match self.kind {
            ExperimentKind::Convergence | ExperimentKind::PhaseTrace => match &self.grid.elements {
                Some(list) if !list.is_empty() => elements(list),
                _ => Ok(vec![(base.system.elements.to_string(), base)]),
            },
            ExperimentKind::SweepN if nonempty(&self.grid.elements) => elements(self.grid.elements.as_deref().unwrap()),
            ExperimentKind::SweepN => Err(missing("elements")),
            ExperimentKind::SweepPmax => match &self.grid.p_max_watts {
                Some(list) if !list.is_empty() => list
                    .iter()
                    .map(|&p| Ok((p.to_string(), with(&|s| s.p_max = p)?)))
                    .collect(),
                _ => Err(missing("p_max_watts")),
            },
            ExperimentKind::SweepMn | ExperimentKind::Timing => match &self.grid.sizes {
                Some(list) if !list.is_empty() => sizes(list),
                _ => Err(missing("sizes")),
            },
            ExperimentKind::GradCheck => Ok(Vec::new()),
        }
    }

    pub fn validate(&self, scale: Option<Scale>) -> Result<()> {
        if self.samples == 0 {
            return Err(Error::Config("samples must be at least 1".into()));
        }
        if self.kind == ExperimentKind::Timing && self.effective_schemes().len() != 1 {
            return Err(Error::Config("timing runs exactly one GML scheme".into()));
        }
        if self.kind == ExperimentKind::Timing
            && !matches!(self.effective_schemes()[0], Scheme::GmlIndependent | Scheme::GmlCoupled)
        {
            return Err(Error::Config("timing runs gml_independent or gml_coupled".into()));
        }
        self.grid_points(scale).map(|_| ())
    }
}

/// Outcome of one (scheme, grid point, sample) cell.
#[derive(Debug, Clone, PartialEq)]
pub struct CellRecord {
    pub scheme: Scheme,
    pub grid_index: usize,
    pub grid_value: String,
    pub sample: usize,
    pub channel_seed: u64,
    pub scheme_seed: u64,
    pub wsr_final: f64,
    pub wsr_unprojected: f64,
    pub seconds: f64,
    /// `max_n |cos(θ_t − θ_r)|` of the returned phases.
    pub coupling_residual: f64,
    pub traces: Traces,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellFailure {
    pub scheme: Scheme,
    pub grid_index: usize,
    pub grid_value: String,
    pub sample: usize,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub scheme: Scheme,
    pub grid_value: String,
    pub samples: usize,
    pub mean_wsr: f64,
    pub std_wsr: f64,
    pub mean_seconds: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TimingRow {
    pub antennas: usize,
    pub elements: usize,
    pub users: usize,
    pub stats: TimingStats,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentReport {
    pub kind: ExperimentKind,
    pub records: Vec<CellRecord>,
    pub failures: Vec<CellFailure>,
    pub summary: Vec<SummaryRow>,
    pub timing: Vec<TimingRow>,
    pub grad_check: Option<GradCheckReport>,
    /// Files written, in write order.
    pub files: Vec<PathBuf>,
}

impl ExperimentReport {
    fn empty(kind: ExperimentKind) -> Self {
        Self {
            kind,
            records: Vec::new(),
            failures: Vec::new(),
            summary: Vec::new(),
            timing: Vec::new(),
            grad_check: None,
            files: Vec::new(),
        }
    }

    /// True when every cell ran and any gradient audit passed.
    pub fn succeeded(&self) -> bool {
        self.failures.is_empty() && self.grad_check.as_ref().is_none_or(|g| g.passed)
    }
}

/// Mean and sample standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n;
    let var = if values.len() > 1 {
        values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

pub fn summarize(records: &[CellRecord]) -> Vec<SummaryRow> {
    let mut keys: Vec<(usize, Scheme, String)> = records
        .iter()
        .map(|r| (r.grid_index, r.scheme, r.grid_value.clone()))
        .collect();
    keys.sort();
    keys.dedup();
    keys.into_iter()
        .map(|(g, scheme, grid_value)| {
            let cell: Vec<&CellRecord> = records.iter().filter(|r| r.grid_index == g && r.scheme == scheme).collect();
            let wsr: Vec<f64> = cell.iter().map(|r| r.wsr_final).collect();
            let (mean_wsr, std_wsr) = mean_std(&wsr);
            SummaryRow {
                scheme,
                grid_value,
                samples: cell.len(),
                mean_wsr,
                std_wsr,
                mean_seconds: cell.iter().map(|r| r.seconds).sum::<f64>() / cell.len() as f64,
            }
        })
        .collect()
}

struct Cell<'a> {
    scheme: Scheme,
    grid_index: usize,
    grid_value: &'a str,
    setup: &'a Setup,
    sample: usize,
}

fn run_cell(master: u64, cell: &Cell) -> std::result::Result<CellRecord, CellFailure> {
    let channel_seed = channel_seed(master, cell.grid_index, cell.sample);
    let scheme_seed = scheme_seed(master, cell.scheme, cell.grid_index, cell.sample);
    let run = || -> Result<(Solution, f64)> {
        let ch = generate_channels(
            &cell.setup.system,
            &cell.setup.channel,
            &mut ChaCha8Rng::seed_from_u64(channel_seed),
        )?;
        let start = Instant::now();
        let sol = run_scheme(cell.scheme, cell.setup, &ch, scheme_seed)?;
        Ok((sol, start.elapsed().as_secs_f64()))
    };
    match run() {
        Ok((sol, seconds)) => Ok(CellRecord {
            scheme: cell.scheme,
            grid_index: cell.grid_index,
            grid_value: cell.grid_value.to_string(),
            sample: cell.sample,
            channel_seed,
            scheme_seed,
            wsr_final: sol.wsr,
            wsr_unprojected: sol.wsr_unprojected,
            seconds,
            coupling_residual: sol.coupling_residual(),
            traces: sol.traces,
        }),
        Err(e) => Err(CellFailure {
            scheme: cell.scheme,
            grid_index: cell.grid_index,
            grid_value: cell.grid_value.to_string(),
            sample: cell.sample,
            message: e.to_string(),
        }),
    }
}

/// Runs every cell of `spec` and writes its CSV files into `out` (nothing is
/// written when `out` is `None`). Cells run in parallel; results do not
/// depend on scheduling. Cell failures are collected in the report rather
/// than aborting the experiment.
pub fn run_experiment(spec: &ExperimentSpec, scale: Option<Scale>, out: Option<&Path>) -> Result<ExperimentReport> {
    spec.validate(scale)?;
    let mut report = ExperimentReport::empty(spec.kind);
    if let Some(dir) = out {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let schemes = spec.effective_schemes();
    let grid = spec.grid_points(scale)?;

    match spec.kind {
        ExperimentKind::GradCheck => {
            let cfg = GradCheckConfig {
                instances: spec.instances.unwrap_or(50),
                seed: spec.seed,
                ..GradCheckConfig::default()
            };
            let check = grad_check(&cfg)?;
            if let Some(dir) = out {
                report.files.push(write_grad_check(dir, &check)?);
            }
            report.grad_check = Some(check);
        }
        ExperimentKind::Timing => {
            let repetitions = spec.repetitions.unwrap_or(3);
            for (g, (_, setup)) in grid.iter().enumerate() {
                let train = TrainConfig {
                    seed: scheme_seed(spec.seed, schemes[0], g, 0),
                    mode: if schemes[0] == Scheme::GmlCoupled { PhaseMode::Coupled } else { PhaseMode::Independent },
                    ..setup.train.clone()
                };
                let stats = timing_probe(&setup.system, &setup.channel, channel_seed(spec.seed, g, 0), &train, repetitions)?;
                report.timing.push(TimingRow {
                    antennas: setup.system.antennas,
                    elements: setup.system.elements,
                    users: setup.system.users,
                    stats,
                });
            }
            if let Some(dir) = out {
                report.files.push(write_timing(dir, &report.timing)?);
            }
        }
        _ => {
            let cells: Vec<Cell> = grid
                .iter()
                .enumerate()
                .flat_map(|(g, (label, setup))| {
                    schemes.iter().flat_map(move |&scheme| {
                        (0..spec.samples).map(move |sample| Cell {
                            scheme,
                            grid_index: g,
                            grid_value: label,
                            setup,
                            sample,
                        })
                    })
                })
                .collect();
            let results: Vec<_> = cells.par_iter().map(|c| run_cell(spec.seed, c)).collect();
            for r in results {
                match r {
                    Ok(rec) => report.records.push(rec),
                    Err(fail) => report.failures.push(fail),
                }
            }
            report.summary = summarize(&report.records);
            if let Some(dir) = out {
                match spec.kind {
                    ExperimentKind::Convergence => {
                        for r in &report.records {
                            report.files.push(write_convergence(dir, r)?);
                        }
                    }
                    ExperimentKind::PhaseTrace => {
                        for r in &report.records {
                            report.files.push(write_phase_trace(dir, r)?);
                        }
                    }
                    _ => report.files.push(write_sweep(dir, &report.records)?),
                }
                report.files.push(write_summary(dir, &report.summary)?);
            }
        }
    }
    Ok(report)
}

pub const CONVERGENCE_HEADER: [&str; 5] = ["epoch", "wsr_best", "wsr_current", "penalty", "rho"];
pub const TIMING_HEADER: [&str; 5] = ["M", "N", "K", "median_s_per_epoch", "min_s_per_epoch"];
pub const SWEEP_HEADER: [&str; 5] = ["scheme", "grid_value", "sample", "wsr_final", "seconds"];
pub const SUMMARY_HEADER: [&str; 6] = ["scheme", "grid_value", "samples", "mean_wsr", "std_wsr", "mean_seconds"];
pub const GRAD_CHECK_HEADER: [&str; 6] = ["instance", "M", "N", "K", "max_rel", "max_abs"];

pub fn phase_trace_header(elements: usize) -> Vec<String> {
    std::iter::once("epoch".to_string())
        .chain((0..elements).map(|n| format!("elem_{n}")))
        .collect()
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    Error::io(path, std::io::Error::other(e))
}

fn write_csv<H, R>(path: PathBuf, header: &[H], rows: impl IntoIterator<Item = Vec<R>>) -> Result<PathBuf>
where
    H: AsRef<[u8]>,
    R: AsRef<[u8]>,
{
    let mut w = csv::Writer::from_path(&path).map_err(|e| csv_error(&path, e))?;
    w.write_record(header).map_err(|e| csv_error(&path, e))?;
    for row in rows {
        w.write_record(&row).map_err(|e| csv_error(&path, e))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

fn cell_file(prefix: &str, r: &CellRecord) -> String {
    format!("{prefix}_{}_g{}_s{}.csv", r.scheme, r.grid_index, r.sample)
}

fn write_convergence(dir: &Path, r: &CellRecord) -> Result<PathBuf> {
    write_traces(dir.join(cell_file("convergence", r)), &r.traces)
}

fn write_traces(path: PathBuf, t: &Traces) -> Result<PathBuf> {
    let rows = (0..t.wsr_best.len()).map(|e| {
        vec![
            (e + 1).to_string(),
            t.wsr_best[e].to_string(),
            t.wsr_current[e].to_string(),
            t.penalty[e].to_string(),
            t.rho[e].to_string(),
        ]
    });
    write_csv(path, &CONVERGENCE_HEADER, rows)
}

pub const PRECODER_HEADER: [&str; 4] = ["user", "antenna", "re", "im"];
pub const SURFACE_HEADER: [&str; 5] = ["element", "beta_t", "beta_r", "theta_t", "theta_r"];

/// Writes a single solve: `precoder.csv`, `surface.csv`, `convergence.csv`
/// and the channel set as `channels.txt`.
pub fn write_run(dir: &Path, sol: &Solution, ch: &ChannelSet) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let w = &sol.w;
    let precoder = (0..w.cols()).flat_map(|k| {
        (0..w.rows()).map(move |m| {
            let z = w.get(m, k);
            vec![k.to_string(), m.to_string(), z.re.to_string(), z.im.to_string()]
        })
    });
    let state = sol.state();
    let surface = (0..state.elements()).map(|n| {
        vec![
            n.to_string(),
            state.beta_t[n].to_string(),
            state.beta_r[n].to_string(),
            state.theta_t[n].to_string(),
            state.theta_r[n].to_string(),
        ]
    });
    let channels = dir.join("channels.txt");
    crate::channels::save_channels(&channels, ch)?;
    Ok(vec![
        write_csv(dir.join("precoder.csv"), &PRECODER_HEADER, precoder)?,
        write_csv(dir.join("surface.csv"), &SURFACE_HEADER, surface)?,
        write_traces(dir.join("convergence.csv"), &sol.traces)?,
        channels,
    ])
}

fn write_phase_trace(dir: &Path, r: &CellRecord) -> Result<PathBuf> {
    let elements = r.traces.phase_differences.first().map_or(0, Vec::len);
    let rows = r.traces.phase_differences.iter().enumerate().map(|(e, diffs)| {
        std::iter::once((e + 1).to_string())
            .chain(diffs.iter().map(f64::to_string))
            .collect::<Vec<_>>()
    });
    write_csv(dir.join(cell_file("phase_trace", r)), &phase_trace_header(elements), rows)
}

fn write_sweep(dir: &Path, records: &[CellRecord]) -> Result<PathBuf> {
    let rows = records.iter().map(|r| {
        vec![
            r.scheme.to_string(),
            r.grid_value.clone(),
            r.sample.to_string(),
            r.wsr_final.to_string(),
            r.seconds.to_string(),
        ]
    });
    write_csv(dir.join("sweep.csv"), &SWEEP_HEADER, rows)
}

fn write_summary(dir: &Path, summary: &[SummaryRow]) -> Result<PathBuf> {
    let rows = summary.iter().map(|s| {
        vec![
            s.scheme.to_string(),
            s.grid_value.clone(),
            s.samples.to_string(),
            s.mean_wsr.to_string(),
            s.std_wsr.to_string(),
            s.mean_seconds.to_string(),
        ]
    });
    write_csv(dir.join("summary.csv"), &SUMMARY_HEADER, rows)
}

/// Writes `timing.csv`.
pub fn write_timing(dir: &Path, rows: &[TimingRow]) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let rows = rows.iter().map(|t| {
        vec![
            t.antennas.to_string(),
            t.elements.to_string(),
            t.users.to_string(),
            t.stats.median_s_per_epoch.to_string(),
            t.stats.min_s_per_epoch.to_string(),
        ]
    });
    write_csv(dir.join("timing.csv"), &TIMING_HEADER, rows)
}

/// Writes `grad_check.csv`, one row per instance.
pub fn write_grad_check(dir: &Path, check: &GradCheckReport) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let rows = check.instances.iter().enumerate().map(|(i, c)| {
        let w = c.worst();
        vec![
            i.to_string(),
            c.antennas.to_string(),
            c.elements.to_string(),
            c.users.to_string(),
            w.max_rel.to_string(),
            w.max_abs.to_string(),
        ]
    });
    write_csv(dir.join("grad_check.csv"), &GRAD_CHECK_HEADER, rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scheme_names_round_trip() {
        for s in Scheme::ALL {
            assert_eq!(s.name().parse::<Scheme>().unwrap(), s);
        }
        assert!("gml".parse::<Scheme>().is_err());
    }

    #[test]
    fn derived_seeds_differ_by_key() {
        let a = channel_seed(1, 0, 0);
        assert_ne!(a, channel_seed(1, 0, 1));
        assert_ne!(a, channel_seed(1, 1, 0));
        assert_ne!(a, channel_seed(2, 0, 0));
        assert_ne!(scheme_seed(1, Scheme::GmlIndependent, 0, 0), scheme_seed(1, Scheme::GmlCoupled, 0, 0));
        assert_eq!(a, channel_seed(1, 0, 0));
    }

    #[test]
    fn mean_std_matches_hand_values() {
        let (m, s) = mean_std(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        assert!((s - (5.0_f64 / 3.0).sqrt()).abs() < 1e-15);
        assert_eq!(mean_std(&[7.0]), (7.0, 0.0));
    }

    #[test]
    fn grids_follow_the_kind() {
        let mut spec = ExperimentSpec::new(ExperimentKind::SweepN);
        assert!(spec.validate(None).is_err());
        spec.grid.elements = Some(vec![4, 8]);
        let points = spec.grid_points(None).unwrap();
        assert_eq!(points.iter().map(|p| p.0.as_str()).collect::<Vec<_>>(), ["4", "8"]);
        assert_eq!(points[1].1.system.elements, 8);

        let mut spec = ExperimentSpec::new(ExperimentKind::Timing);
        spec.grid.sizes = Some(vec![[8, 16], [16, 32]]);
        let points = spec.grid_points(None).unwrap();
        assert_eq!(points[1].0, "16x32");
        assert_eq!((points[1].1.system.antennas, points[1].1.system.elements), (16, 32));
        spec.schemes = vec![Scheme::GmlIndependent, Scheme::GmlCoupled];
        assert!(spec.validate(None).is_err());

        let conv = ExperimentSpec::new(ExperimentKind::Convergence);
        assert_eq!(conv.grid_points(None).unwrap().len(), 1);
        assert_eq!(conv.effective_schemes(), [Scheme::GmlIndependent, Scheme::GmlCoupled]);
    }

    #[test]
    fn documented_spec_parses() {
        let text = include_str!("experiment.rs")
            .lines()
            .skip_while(|l| !l.starts_with("/// ```toml"))
            .skip(1)
            .take_while(|l| !l.starts_with("/// ```"))
            .map(|l| l.trim_start_matches("///"))
            .collect::<Vec<_>>()
            .join("\n");
        let spec = ExperimentSpec::from_toml(&text).unwrap();
        assert_eq!(spec.kind, ExperimentKind::SweepN);
        assert_eq!(spec.grid.elements, Some(vec![8, 16, 32]));
        spec.validate(None).unwrap();
    }
}
