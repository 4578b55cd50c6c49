//! Experiment driver shared by the command-line tool and the test suites.

pub mod config;
pub mod experiment;
pub mod gradcheck;
pub mod timing;

pub use config::{ConfigFile, Scale, Setup};
pub use experiment::{run_experiment, run_scheme, write_run, ExperimentKind, ExperimentReport, ExperimentSpec, Scheme};
pub use gradcheck::{grad_check, grad_check_with, GradCheckConfig, GradCheckReport};
pub use timing::{timing_probe, TimingStats};
