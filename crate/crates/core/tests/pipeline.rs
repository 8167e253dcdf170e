use std::path::Path;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use dpe_core::capability::CapabilityCategory;
use dpe_core::config::RunConfig;
use dpe_core::diagnosis::DiagnosticReport;
use dpe_core::error::DpeError;
use dpe_core::pipeline::{simulate, Backend, Journal, Pipeline, Stage};

fn config(dir: &Path) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.run.mock = true;
    cfg.run.workspace = dir.to_path_buf();
    cfg.run.iterations = 3;
    cfg.generation.budget = 96;
    cfg.generation.progress_every = 10;
    cfg.diagnosis.sample_size = 120;
    cfg.world.world.pool_size = 480;
    cfg
}

fn artifacts(p: &Pipeline, iterations: u32) -> Vec<(String, Vec<u8>)> {
    let ws = &p.workspace;
    let mut out = Vec::new();
    for k in 0..iterations {
        for path in [ws.report(k), ws.dataset(k), ws.manifest(k), ws.profiles_jsonl(k), ws.train_set(k), ws.metrics(k), ws.checkpoint(k)] {
            let rel = path.strip_prefix(ws.root()).unwrap().display().to_string();
            out.push((rel, std::fs::read(&path).unwrap()));
        }
    }
    out.push(("summary.csv".into(), std::fs::read(ws.summary_csv()).unwrap()));
    out
}

#[test]
fn resume_after_interrupted_generation_matches_uninterrupted_run() {
    let clean_dir = tempfile::tempdir().unwrap();
    let clean = Pipeline::from_config(config(clean_dir.path())).unwrap();
    clean.evolve().unwrap();

    let dir = tempfile::tempdir().unwrap();
    let flag = Arc::new(AtomicBool::new(false));
    let f = flag.clone();
    let interrupted = Pipeline::from_config(config(dir.path()))
        .unwrap()
        .with_cancel(flag.clone())
        .with_progress(Arc::new(move |m: &str| {
            if m.starts_with("iteration 1: generated") {
                f.store(true, Ordering::SeqCst);
            }
        }));
    let err = interrupted.evolve().unwrap_err();
    assert!(matches!(err, DpeError::Interrupted(_)), "{err}");
    assert!(flag.load(Ordering::SeqCst));
    assert!(interrupted.workspace.partial_dataset(1).exists());
    assert!(!interrupted.workspace.dataset(1).exists());
    let journal = Journal::open(&interrupted.workspace).unwrap();
    assert!(journal.is_done(1, Stage::Diagnose));
    assert!(!journal.is_done(1, Stage::Generate));

    let resumed = Pipeline::from_config(config(dir.path())).unwrap();
    resumed.evolve().unwrap();
    assert_eq!(artifacts(&resumed, 3), artifacts(&clean, 3));
    // the diagnose stage of iteration 1 was not repeated
    let j = Journal::open(&resumed.workspace).unwrap();
    assert_eq!(j.entries().iter().filter(|e| e.iteration == 1 && e.stage == Stage::Diagnose).count(), 1);
}

#[test]
fn reports_are_valid_simplices_and_summary_has_one_row_per_category() {
    let dir = tempfile::tempdir().unwrap();
    let p = Pipeline::from_config(config(dir.path())).unwrap();
    let summary = p.evolve().unwrap();
    assert_eq!(summary.rows.len(), 3 * CapabilityCategory::COUNT);
    for k in 0..3 {
        let r = DiagnosticReport::load(&p.workspace.report(k)).unwrap();
        let m = r.mixture_vector().unwrap();
        assert!((m.as_array().iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!(m.as_array().iter().all(|a| *a > 0.0));
        let accepted: usize = summary.rows.iter().filter(|row| row.iteration == k).map(|row| row.accepted).sum();
        assert_eq!(accepted, 96);
    }
    let csv = std::fs::read_to_string(p.workspace.summary_csv()).unwrap();
    assert_eq!(csv.lines().count(), 1 + 3 * CapabilityCategory::COUNT);
}

#[test]
fn force_reruns_every_stage() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config(dir.path());
    cfg.run.iterations = 1;
    let p = Pipeline::from_config(cfg.clone()).unwrap();
    p.evolve().unwrap();
    p.evolve().unwrap();
    assert_eq!(Journal::open(&p.workspace).unwrap().entries().len(), 4);
    let forced = Pipeline::new(cfg.clone(), Backend::sim(&cfg)).with_force(true);
    forced.evolve().unwrap();
    assert_eq!(Journal::open(&p.workspace).unwrap().entries().len(), 4);
}

#[test]
fn missing_report_is_a_missing_input() {
    let dir = tempfile::tempdir().unwrap();
    let p = Pipeline::from_config(config(dir.path())).unwrap();
    let err = p.run_stage(Stage::Generate, 0).unwrap_err();
    assert_eq!(err.exit_code(), 3, "{err}");
}

#[test]
fn null_world_arms_are_identical() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config(dir.path());
    cfg.world.world.delta = 0.0;
    let r = simulate(&cfg, false, Arc::new(|_| {})).unwrap();
    assert_eq!(r.guided.final_skills, r.uniform.final_skills);
    assert_eq!(r.guided.final_skills, r.initial_skills);
    assert_eq!(r.min_skill_gain, 0.0);
}

#[test]
fn single_category_arms_are_identical() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config(dir.path());
    cfg.world.world.categories = vec![CapabilityCategory::StatisticalCharts];
    let r = simulate(&cfg, false, Arc::new(|_| {})).unwrap();
    assert_eq!(r.guided.final_skills, r.uniform.final_skills);
    assert_eq!(r.guided.first_mixture.len(), 1);
    assert_eq!(r.guided.accepted_per_iteration, vec![96, 96, 96]);
    let root = dir.path().join("simulate");
    for k in 0..3 {
        let data = |arm: &str| std::fs::read(root.join(arm).join("iterations").join(k.to_string()).join("dataset.jsonl")).unwrap();
        assert_eq!(data("guided"), data("uniform"));
    }
}
