use std::collections::BTreeMap;
use std::f64::consts::FRAC_PI_2;
use std::path::Path;

use stargml::harness::experiment::{
    mean_std, phase_trace_header, CONVERGENCE_HEADER, SUMMARY_HEADER, SWEEP_HEADER, TIMING_HEADER,
};
use stargml::harness::{run_experiment, ExperimentKind, ExperimentSpec, Scale, Scheme};
use stargml::Error;

fn quick(kind: ExperimentKind) -> ExperimentSpec {
    let mut spec = ExperimentSpec::new(kind);
    spec.seed = 7;
    spec.samples = 2;
    spec.train.epochs = Some(12);
    spec.pga.steps = Some(20);
    spec
}

fn read(path: &Path) -> (Vec<String>, Vec<Vec<String>>) {
    let mut r = csv::Reader::from_path(path).unwrap();
    let header = r.headers().unwrap().iter().map(str::to_string).collect();
    let rows = r
        .records()
        .map(|row| row.unwrap().iter().map(str::to_string).collect())
        .collect();
    (header, rows)
}

fn names(dir: &Path) -> Vec<String> {
    let mut v: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    v.sort();
    v
}

#[test]
fn convergence_writes_one_trace_per_cell_plus_summary() {
    let dir = tempfile::tempdir().unwrap();
    let mut spec = quick(ExperimentKind::Convergence);
    spec.samples = 3;
    spec.schemes = vec![Scheme::GmlIndependent, Scheme::RandomPhase];
    let report = run_experiment(&spec, Some(Scale::Desk), Some(dir.path())).unwrap();
    assert_eq!(report.records.len(), 6);
    assert_eq!(report.files.len(), 7);
    let files = names(dir.path());
    assert_eq!(files.iter().filter(|f| f.starts_with("convergence_")).count(), 6);
    assert!(files.contains(&"summary.csv".to_string()));
    let (header, rows) = read(&dir.path().join("convergence_gml_independent_g0_s2.csv"));
    assert_eq!(header, CONVERGENCE_HEADER);
    assert_eq!(rows.len(), 12);
    let (header, rows) = read(&dir.path().join("summary.csv"));
    assert_eq!(header, SUMMARY_HEADER);
    assert_eq!(rows.len(), 2);
}

#[test]
fn summary_matches_sweep_rows() {
    let dir = tempfile::tempdir().unwrap();
    let mut spec = quick(ExperimentKind::SweepN);
    spec.samples = 3;
    spec.schemes = vec![Scheme::GmlCoupled, Scheme::PgaOracle];
    spec.grid.elements = Some(vec![4, 8]);
    let report = run_experiment(&spec, Some(Scale::Desk), Some(dir.path())).unwrap();
    assert_eq!(report.records.len(), 2 * 2 * 3);

    let (header, rows) = read(&dir.path().join("sweep.csv"));
    assert_eq!(header, SWEEP_HEADER);
    let mut groups: BTreeMap<(String, String), Vec<f64>> = BTreeMap::new();
    for row in &rows {
        groups.entry((row[0].clone(), row[1].clone())).or_default().push(row[3].parse().unwrap());
    }
    let (_, summary) = read(&dir.path().join("summary.csv"));
    assert_eq!(summary.len(), groups.len());
    for row in &summary {
        let values = &groups[&(row[0].clone(), row[1].clone())];
        let (mean, std) = mean_std(values);
        assert_eq!(row[2].parse::<usize>().unwrap(), values.len());
        assert!((row[3].parse::<f64>().unwrap() - mean).abs() <= 1e-12 * mean.abs());
        assert!((row[4].parse::<f64>().unwrap() - std).abs() <= 1e-12 * mean.abs());
    }
}

#[test]
fn reruns_reproduce_every_output_but_timings() {
    let run = || {
        let dir = tempfile::tempdir().unwrap();
        let mut spec = quick(ExperimentKind::SweepPmax);
        spec.schemes = Scheme::ALL.to_vec();
        spec.grid.p_max_watts = Some(vec![0.5, 3.0]);
        run_experiment(&spec, Some(Scale::Desk), Some(dir.path())).unwrap();
        let (_, rows) = read(&dir.path().join("sweep.csv"));
        rows.into_iter().map(|r| r[..4].to_vec()).collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
}

#[test]
fn failing_cells_are_reported_without_stopping_the_rest() {
    let dir = tempfile::tempdir().unwrap();
    let mut spec = quick(ExperimentKind::SweepN);
    spec.schemes = vec![Scheme::ConventionalRis, Scheme::RandomPhase];
    spec.grid.elements = Some(vec![5, 6]);
    let report = run_experiment(&spec, Some(Scale::Desk), Some(dir.path())).unwrap();
    assert_eq!(report.failures.len(), 2);
    assert!(report.failures.iter().all(|f| f.scheme == Scheme::ConventionalRis && f.grid_value == "5"));
    assert_eq!(report.records.len(), 6);
    assert!(!report.succeeded());
    let (_, rows) = read(&dir.path().join("sweep.csv"));
    assert_eq!(rows.len(), 6);
}

#[test]
fn unwritable_output_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let blocker = dir.path().join("taken");
    std::fs::write(&blocker, "not a directory").unwrap();
    let target = blocker.join("out");
    let err = run_experiment(&quick(ExperimentKind::Convergence), Some(Scale::Desk), Some(&target)).unwrap_err();
    assert!(matches!(err, Error::Io { .. }));
    assert!(err.to_string().contains("taken"), "{err}");
}

#[test]
fn timing_table_has_one_row_per_size() {
    let dir = tempfile::tempdir().unwrap();
    let mut spec = quick(ExperimentKind::Timing);
    spec.schemes = vec![Scheme::GmlIndependent];
    spec.grid.sizes = Some(vec![[4, 8], [8, 8], [16, 8]]);
    spec.repetitions = Some(3);
    let report = run_experiment(&spec, Some(Scale::Desk), Some(dir.path())).unwrap();
    let (header, rows) = read(&dir.path().join("timing.csv"));
    assert_eq!(header, TIMING_HEADER);
    assert_eq!(rows.len(), 3);
    assert_eq!(rows.iter().map(|r| r[0].as_str()).collect::<Vec<_>>(), ["4", "8", "16"]);
    assert!(report.timing.iter().all(|t| t.stats.median_s_per_epoch > 0.0));
}

#[test]
fn grad_check_kind_writes_instance_table() {
    let dir = tempfile::tempdir().unwrap();
    let mut spec = ExperimentSpec::new(ExperimentKind::GradCheck);
    spec.instances = Some(5);
    let report = run_experiment(&spec, None, Some(dir.path())).unwrap();
    assert!(report.grad_check.as_ref().unwrap().passed);
    let (_, rows) = read(&dir.path().join("grad_check.csv"));
    assert_eq!(rows.len(), 5);
}

#[test]
fn coupled_phase_trace_settles_near_quarter_turns() {
    let dir = tempfile::tempdir().unwrap();
    let mut spec = ExperimentSpec::new(ExperimentKind::PhaseTrace);
    spec.seed = 3;
    spec.samples = 1;
    run_experiment(&spec, Some(Scale::Desk), Some(dir.path())).unwrap();
    let (header, rows) = read(&dir.path().join("phase_trace_gml_coupled_g0_s0.csv"));
    assert_eq!(header, phase_trace_header(16));
    assert_eq!(rows.len(), 300);
    for cell in &rows[rows.len() - 1][1..] {
        let d: f64 = cell.parse().unwrap();
        let gap = (d - FRAC_PI_2).abs().min((d - 3.0 * FRAC_PI_2).abs());
        assert!(gap < 0.08, "final difference {d} is {gap} rad from the coupled set");
    }
}

#[test]
fn guide_toml_examples_parse() {
    let text = include_str!("../../../book/src/experiments.md");
    let blocks: Vec<String> = text
        .split("```toml\n")
        .skip(1)
        .map(|b| b.split("```").next().unwrap().to_string())
        .collect();
    assert_eq!(blocks.len(), 2);
    let setup = stargml::harness::ConfigFile::from_toml(&blocks[0]).unwrap().resolve(None).unwrap();
    assert_eq!(setup.system.elements, 32);
    assert_eq!(setup.channel_seed, 7);
    let spec = ExperimentSpec::from_toml(&blocks[1]).unwrap();
    assert_eq!(spec.kind, ExperimentKind::Convergence);
    spec.validate(None).unwrap();
}
