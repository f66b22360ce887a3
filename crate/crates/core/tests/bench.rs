use corfd::bench::{
    cell_stream, emit_csv, run_cell, run_experiment, run_replications, summarize, summary_rows, write_csv,
    ExperimentConfig, SUMMARY_HEADER,
};
use corfd::estimators::Method;
use corfd::sampling::RngStream;
use corfd::Error;
use proptest::prelude::*;
use rand::Rng;

const SMALL: &str = "
problem = poly@1.5
methods = tra,boot,cor
pairs = 60,200
reps = 40
seed = 11
K = 4
r = 0.5
I = 50
";

fn csv_bytes(cfg: &ExperimentConfig) -> Vec<u8> {
    let result = run_experiment(cfg).unwrap();
    let mut buf = Vec::new();
    emit_csv(&SUMMARY_HEADER, &summary_rows(&cfg.problem, &result.cells), &mut buf).unwrap();
    buf
}

#[test]
fn summary_csv_is_byte_identical_across_runs() {
    let cfg = ExperimentConfig::parse(SMALL).unwrap();
    let a = csv_bytes(&cfg);
    assert_eq!(a, csv_bytes(&cfg));
    let text = String::from_utf8(a).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "problem,method,pairs,reps,bias,variance,mse");
    assert_eq!(lines.len(), 1 + 6);
    assert!(lines[1].starts_with("poly@1.5,tra,60,40,"));
}

#[test]
fn parallel_replications_match_sequential_order() {
    let stream = RngStream::from_seed(5);
    let par = run_replications(257, stream, |s| Ok(s.rng().random::<u64>())).unwrap();
    let seq: Vec<u64> = (0..257).map(|i| stream.substream(i).rng().random()).collect();
    assert_eq!(par, seq);
    assert!(run_replications(0, stream, |_| Ok(0)).is_err());
}

#[test]
fn every_replication_spends_its_budget() {
    let cfg = ExperimentConfig::parse(SMALL).unwrap();
    let truth = cfg.resolve_truth().unwrap();
    for method in [Method::Tra, Method::Boot, Method::Cor] {
        let cell = run_cell(&cfg, method, 1, truth).unwrap();
        assert!(cell.records.iter().all(|r| r.pairs_used == 200));
        assert_eq!(cell.records.len(), 40);
    }
}

#[test]
fn single_replication_has_zero_variance() {
    let mut cfg = ExperimentConfig::parse(SMALL).unwrap();
    cfg.set("reps", "1").unwrap();
    let result = run_experiment(&cfg).unwrap();
    assert!(result.cells.iter().all(|c| c.summary.variance == 0.0));
}

#[test]
fn failing_cells_do_not_stop_the_run() {
    let mut cfg = ExperimentConfig::parse(SMALL).unwrap();
    // at r = 1 the bootstrap estimator has no fresh pairs left
    cfg.set("r", "1").unwrap();
    let result = run_experiment(&cfg).unwrap();
    assert_eq!(result.failures.len(), 2);
    assert!(result.failures.iter().all(|f| f.method == Method::Boot));
    assert_eq!(result.cells.len(), 4);
}

#[test]
fn config_errors_are_reported() {
    assert!(matches!(ExperimentConfig::parse("nonsense = 1"), Err(Error::Config(_))));
    assert!(matches!(ExperimentConfig::parse("reps"), Err(Error::Config(_))));
    assert!(matches!(
        ExperimentConfig::parse("methods = tra,xyz"),
        Err(Error::Config(_))
    ));
    let cfg = ExperimentConfig::parse("problem = rosenbrock\ntheta0 = 1,2,3").unwrap();
    assert!(cfg.validate().is_err());
    // no known constants for the queue: opt fails, tra still runs
    let cfg = ExperimentConfig::parse(
        "problem = queue@3,5,10,service\nmethods = opt,tra\ntruth = -0.11\nreps = 5\npairs = 50",
    )
    .unwrap();
    let result = run_experiment(&cfg).unwrap();
    assert_eq!((result.failures.len(), result.cells.len()), (1, 1));
    assert_eq!(result.failures[0].method, Method::Opt);
}

#[test]
fn empty_rows_give_a_header_only_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("empty.csv");
    write_csv(&path, &SUMMARY_HEADER, &[]).unwrap();
    assert_eq!(
        std::fs::read_to_string(&path).unwrap(),
        "problem,method,pairs,reps,bias,variance,mse\n"
    );
    let ragged = vec![vec!["only".to_owned()]];
    assert!(write_csv(&path, &SUMMARY_HEADER, &ragged).is_err());
}

#[test]
fn cells_use_distinct_streams() {
    let a = cell_stream(1, Method::Cor, 0);
    assert_ne!(a, cell_stream(1, Method::Boot, 0));
    assert_ne!(a, cell_stream(1, Method::Cor, 1));
    assert_ne!(a, cell_stream(2, Method::Cor, 0));
}

proptest! {
    #[test]
    fn mse_decomposes(xs in prop::collection::vec(-1e3f64..1e3, 1..200), truth in -1e3f64..1e3) {
        let s = summarize(&xs, truth);
        let scale = 1.0 + s.mse;
        prop_assert!((s.mse - (s.bias * s.bias + s.variance)).abs() < 1e-9 * scale);
        prop_assert!(s.variance >= 0.0);
        prop_assert_eq!(s.reps, xs.len());
    }
}
