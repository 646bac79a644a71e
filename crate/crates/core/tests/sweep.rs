//! Sweep orchestration: determinism, reuse of finished points, and partial
//! failure.

mod common;

use common::{history_without_time, tiny_sweep};
use l2o_core::experiment::{read_results, results_digest, run_sweep};

fn quiet(_: &str) {}

fn point_dirs(root: &std::path::Path) -> Vec<std::path::PathBuf> {
    let mut v: Vec<_> = std::fs::read_dir(root.join("points")).unwrap().map(|e| e.unwrap().path()).collect();
    v.sort();
    v
}

#[test]
fn identical_seeds_give_identical_artifacts() {
    let sweep = tiny_sweep(vec![0.0, 10.0]);
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ra = run_sweep(&sweep, a.path(), 2, &quiet).unwrap();
    let rb = run_sweep(&sweep, b.path(), 1, &quiet).unwrap();
    assert!(ra.failures.is_empty());
    assert_eq!(ra.rows.len(), 2 * 7);
    assert_eq!(results_digest(&ra.rows), results_digest(&rb.rows));
    assert_eq!(read_results(&ra.results_path).unwrap().len(), 14);

    let (da, db) = (point_dirs(a.path()), point_dirs(b.path()));
    assert_eq!(da.iter().map(|p| p.file_name()).collect::<Vec<_>>(), db.iter().map(|p| p.file_name()).collect::<Vec<_>>());
    for (pa, pb) in da.iter().zip(&db) {
        let read = |p: &std::path::Path, f: &str| std::fs::read_to_string(p.join(f)).unwrap();
        assert_eq!(read(pa, "dataset.jsonl"), read(pb, "dataset.jsonl"));
        assert_eq!(read(pa, "du_dc3_s7.ckpt.json"), read(pb, "du_dc3_s7.ckpt.json"));
        assert_eq!(
            history_without_time(&read(pa, "mlp_hop_s7.history.csv")),
            history_without_time(&read(pb, "mlp_hop_s7.history.csv"))
        );
    }
}

#[test]
fn finished_points_are_reused() {
    let dir = tempfile::tempdir().unwrap();
    let first = run_sweep(&tiny_sweep(vec![5.0]), dir.path(), 1, &quiet).unwrap();
    let logs = std::sync::Mutex::new(Vec::new());
    let log = |s: &str| logs.lock().unwrap().push(s.to_string());
    let second = run_sweep(&tiny_sweep(vec![5.0, 15.0]), dir.path(), 1, &log).unwrap();
    assert_eq!(&second.rows[..7], &first.rows[..]);
    let logs = logs.into_inner().unwrap();
    assert!(logs.iter().any(|l| l.starts_with("snr=5: reusing")), "{logs:?}");
    assert!(logs.iter().any(|l| l.starts_with("snr=15: dataset")), "{logs:?}");
}

#[test]
fn a_failing_point_does_not_stop_the_others() {
    let mut sweep = tiny_sweep(vec![-40.0, 10.0]);
    sweep.archs = vec![l2o_core::Arch::Du];
    sweep.methods = vec![l2o_core::Method::Penalty];
    let dir = tempfile::tempdir().unwrap();
    let out = run_sweep(&sweep, dir.path(), 1, &quiet).unwrap();
    assert_eq!(out.failures.len(), 1);
    assert_eq!(out.failures[0].0, -40.0);
    assert!(out.failures[0].1.contains("too aggressive"), "{}", out.failures[0].1);
    assert_eq!(out.rows.len(), 2);
    assert!(out.rows.iter().all(|r| r.axis_value == 10.0));
}

#[test]
fn row_aggregates_recompute_from_stored_samples() {
    use l2o_core::channel::load_dataset;
    use l2o_core::problem::{self, Beamformer, FEASIBILITY_TOL};
    use l2o_core::trainer::SampleResult;

    let sweep = tiny_sweep(vec![10.0]);
    let dir = tempfile::tempdir().unwrap();
    let out = run_sweep(&sweep, dir.path(), 1, &quiet).unwrap();
    let point = &point_dirs(dir.path())[0];
    let ds = load_dataset(&point.join("dataset.jsonl")).unwrap();
    for row in &out.rows {
        let file = match row.train_seed {
            Some(s) => format!("{}_{}_s{s}_samples.json", row.arch, row.method),
            None => "wmmse_samples.json".into(),
        };
        let samples: Vec<SampleResult> = serde_json::from_str(&std::fs::read_to_string(point.join(&file)).unwrap()).unwrap();
        assert_eq!(samples.len(), ds.test().len(), "{file}");
        let mut infeasible = 0;
        let mut wsr = 0.0;
        for s in &samples {
            let src = ds.test().iter().find(|c| c.sample_seed == s.seed).unwrap();
            let inst = ds.instance(src).unwrap();
            let v = Beamformer::from_raw(&s.output, inst.n(), inst.k()).unwrap();
            let rep = problem::violation_report(&inst, &v, FEASIBILITY_TOL);
            assert_eq!(rep.feasible, s.report.feasible, "{file} seed {}", s.seed);
            assert!((problem::wsr(&inst, &v) - s.wsr).abs() <= 1e-12 * s.wsr.abs().max(1.0));
            infeasible += usize::from(!rep.feasible);
            wsr += s.wsr;
        }
        assert_eq!(row.violation_rate, infeasible as f64 / samples.len() as f64, "{file}");
        assert!((row.mean_wsr_bps_hz - wsr / samples.len() as f64).abs() <= 1e-12 * wsr.abs().max(1.0), "{file}");
    }
}
