use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use prismvau_core::ape::Task;
use prismvau_core::corpus::load_manifest;
use prismvau_core::demo::write_demo;
use prismvau_core::pipeline::{
    cmd_fuse_eval, cmd_optimize, cmd_refine, cmd_report, cmd_score_coarse, read_curve, RunConfig, StageOptions,
};
use prismvau_core::refiner::VerdictRecord;
use prismvau_core::scorer::InjectionLevel;
use prismvau_core::signal::{fourier_upsample, gaussian_smooth};
use prismvau_core::par::Exec;

fn snapshot(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().display().to_string(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn opts(force: bool) -> StageOptions {
    StageOptions { force, jobs: Some(2), exec: Exec::Parallel }
}

#[test]
fn coarse_stage_counts_and_idempotence() {
    let dir = tempfile::tempdir().unwrap();
    let demo = write_demo(dir.path()).unwrap();
    let cfg = RunConfig::load(&demo.config).unwrap();
    let s = cmd_score_coarse(&cfg, opts(false)).unwrap();
    assert_eq!((s.computed, s.skipped), (8, 0));
    let files = fs::read_dir(demo.run_dir.join("coarse"))
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "json"))
        .count();
    assert_eq!(files, 8 + 1); // curves plus the inputs fingerprint
    let before = snapshot(&demo.run_dir);
    let s = cmd_score_coarse(&cfg, opts(false)).unwrap();
    assert_eq!((s.computed, s.skipped), (0, 8));
    let s = cmd_score_coarse(&cfg, opts(true)).unwrap();
    assert_eq!(s.computed, 8);
    assert_eq!(snapshot(&demo.run_dir), before);
}

#[test]
fn refine_segment_count_and_missing_coarse() {
    let dir = tempfile::tempdir().unwrap();
    let demo = write_demo(dir.path()).unwrap();
    let cfg = RunConfig::load(&demo.config).unwrap();
    let err = cmd_refine(&cfg, opts(false)).unwrap_err();
    assert_eq!(err.exit_code(), 3);
    assert!(err.to_string().contains("coarse"));

    cmd_score_coarse(&cfg, opts(false)).unwrap();
    let s = cmd_refine(&cfg, opts(false)).unwrap();
    assert_eq!(s.computed, 8);
    let manifest = load_manifest(&demo.manifest).unwrap();
    let expected: usize = manifest.videos.iter().map(|v| (v.duration_s / 30.0).ceil() as usize).sum();
    let log = fs::read_to_string(demo.run_dir.join("mllm/verdicts.jsonl")).unwrap();
    let verdicts: Vec<VerdictRecord> = log.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(verdicts.len(), expected);
    assert!(verdicts.iter().all(|v| v.error.is_none()));
    assert_eq!(s.notes["segments"], expected as f64);
    for v in &manifest.videos {
        let c = read_curve(&demo.run_dir.join(format!("mllm/{}.json", v.id))).unwrap();
        assert_eq!(c.len(), v.sampled_frame_count());
    }

    let before = snapshot(&demo.run_dir);
    cmd_refine(&cfg, opts(true)).unwrap();
    assert_eq!(snapshot(&demo.run_dir), before);
}

#[test]
fn refine_without_prior_needs_no_coarse() {
    let dir = tempfile::tempdir().unwrap();
    let demo = write_demo(dir.path()).unwrap();
    let mut cfg = RunConfig::load(&demo.config).unwrap();
    cfg.injection_level = InjectionLevel::None;
    assert_eq!(cmd_refine(&cfg, opts(false)).unwrap().computed, 8);
}

#[test]
fn fuse_eval_requires_both_stages() {
    let dir = tempfile::tempdir().unwrap();
    let demo = write_demo(dir.path()).unwrap();
    let cfg = RunConfig::load(&demo.config).unwrap();
    assert_eq!(cmd_fuse_eval(&cfg, opts(false)).unwrap_err().exit_code(), 3);
    cmd_score_coarse(&cfg, opts(false)).unwrap();
    let err = cmd_fuse_eval(&cfg, opts(false)).unwrap_err();
    assert_eq!(err.exit_code(), 3);
    assert!(err.to_string().contains("mllm"));
    assert_eq!(cmd_report(&cfg).unwrap_err().exit_code(), 3);
}

#[test]
fn end_to_end_report_and_fused_oracle() {
    let dir = tempfile::tempdir().unwrap();
    let demo = write_demo(dir.path()).unwrap();
    let cfg = RunConfig::load(&demo.config).unwrap();
    cmd_score_coarse(&cfg, opts(false)).unwrap();
    cmd_refine(&cfg, opts(false)).unwrap();
    cmd_fuse_eval(&cfg, opts(false)).unwrap();

    let manifest = load_manifest(&demo.manifest).unwrap();
    for v in &manifest.videos {
        let c = read_curve(&demo.run_dir.join(format!("coarse/{}.json", v.id))).unwrap();
        let m = read_curve(&demo.run_dir.join(format!("mllm/{}.json", v.id))).unwrap();
        let f = read_curve(&demo.run_dir.join(format!("fused/{}.json", v.id))).unwrap();
        let sc = gaussian_smooth(&c, 2.0).unwrap();
        let sm = gaussian_smooth(&m, 4.0).unwrap();
        let mut avg = sc.clone();
        avg.values = sc.values.iter().zip(&sm.values).map(|(a, b)| 0.5 * (a + b)).collect();
        let want = fourier_upsample(&avg, v.native_fps).unwrap();
        assert_eq!(f.values.len(), want.values.len());
        assert!(f.values.iter().zip(&want.values).all(|(a, b)| (a - b).abs() < 1e-9));
        assert_eq!(f.rate, v.native_fps);
    }

    let report: serde_json::Value =
        serde_json::from_slice(&fs::read(demo.run_dir.join("report/report.json")).unwrap()).unwrap();
    for key in ["roc_auc", "ap", "f1", "fpr"] {
        let x = report[key].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&x), "{key} = {x}");
    }
    assert!(report["roc_auc"].as_f64().unwrap() > 0.9);
    assert!(report["per_category"]["Fighting"].is_number());
    assert!(report["semantic_similarity"].as_f64().unwrap() > 0.0);
    let text = cmd_report(&cfg).unwrap();
    assert!(text.contains("ROC AUC"));

    let before = snapshot(&demo.run_dir);
    let sequential = StageOptions { force: true, jobs: Some(1), exec: Exec::Sequential };
    cmd_score_coarse(&cfg, sequential).unwrap();
    cmd_refine(&cfg, sequential).unwrap();
    cmd_fuse_eval(&cfg, sequential).unwrap();
    assert_eq!(snapshot(&demo.run_dir), before);
}

#[test]
fn optimize_anchors_and_resume() {
    let dir = tempfile::tempdir().unwrap();
    let demo = write_demo(dir.path()).unwrap();
    let cfg = RunConfig::load(&demo.config).unwrap();
    let s = cmd_optimize(&cfg, Task::Anchors, opts(false)).unwrap();
    assert!(!s.resumed);
    assert!(s.last_iteration <= 4);
    let best: serde_json::Value =
        serde_json::from_slice(&fs::read(demo.run_dir.join("prompts/anchors.json")).unwrap()).unwrap();
    assert_eq!(best["fitness"].as_f64(), s.best.fitness);
    let history = fs::read_to_string(demo.run_dir.join("history/anchors.jsonl")).unwrap();
    let lines = history.lines().count();
    assert_eq!(lines, 1 + 3 * s.last_iteration);
    let curve = fs::read_to_string(demo.run_dir.join("history/anchors.csv")).unwrap();
    assert!(curve.starts_with("iteration,iteration_best,best_so_far\n0,"));

    // nothing left to do: resuming evaluates nothing new
    let again = cmd_optimize(&cfg, Task::Anchors, opts(false)).unwrap();
    assert!(again.resumed);
    assert_eq!(again.iterations_run, 0);
    assert_eq!(again.best, s.best);
    assert_eq!(fs::read_to_string(demo.run_dir.join("history/anchors.jsonl")).unwrap().lines().count(), lines);
}

#[test]
fn optimize_resumes_with_more_iterations() {
    let dir = tempfile::tempdir().unwrap();
    let demo = write_demo(dir.path()).unwrap();
    let mut cfg = RunConfig::load(&demo.config).unwrap();
    cfg.optimizer.anchors.iterations = Some(1);
    cfg.optimizer.anchors.patience = Some(10);
    let first = cmd_optimize(&cfg, Task::Anchors, opts(false)).unwrap();
    assert_eq!(first.last_iteration, 1);
    cfg.optimizer.anchors.iterations = Some(2);
    let second = cmd_optimize(&cfg, Task::Anchors, opts(false)).unwrap();
    assert!(second.resumed);
    assert_eq!((second.iterations_run, second.last_iteration), (1, 2));
    let history = fs::read_to_string(demo.run_dir.join("history/anchors.jsonl")).unwrap();
    assert_eq!(history.lines().count(), 1 + 3 + 3);
}

#[test]
fn optimize_vau_then_refine_with_run_prompts() {
    let dir = tempfile::tempdir().unwrap();
    let demo = write_demo(dir.path()).unwrap();
    let mut cfg = RunConfig::load(&demo.config).unwrap();
    let s = cmd_optimize(&cfg, Task::Vau, opts(false)).unwrap();
    assert_eq!(s.best.fitness, Some(100.0));
    cfg.vau_prompts = serde_json::from_str("\"run\"").unwrap();
    cfg.injection_level = InjectionLevel::None;
    assert_eq!(cmd_refine(&cfg, opts(false)).unwrap().computed, 8);
}

#[test]
fn run_prompts_missing_is_stage_error() {
    let dir = tempfile::tempdir().unwrap();
    let demo = write_demo(dir.path()).unwrap();
    let mut cfg = RunConfig::load(&demo.config).unwrap();
    cfg.anchors = serde_json::from_str("\"run\"").unwrap();
    let err = cmd_score_coarse(&cfg, opts(false)).unwrap_err();
    assert_eq!(err.exit_code(), 3);
}

#[test]
fn bad_configs_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("c.json");
    fs::write(&p, "{not json").unwrap();
    assert_eq!(RunConfig::load(&p).unwrap_err().exit_code(), 2);
    fs::write(&p, r#"{"dataset_manifest": "missing.json", "run_dir": "r"}"#).unwrap();
    assert_eq!(RunConfig::load(&p).unwrap_err().exit_code(), 2);
    let demo = write_demo(dir.path()).unwrap();
    let mut v: serde_json::Value = serde_json::from_slice(&fs::read(&demo.config).unwrap()).unwrap();
    v["tau"] = serde_json::json!(-1.0);
    fs::write(&demo.config, v.to_string()).unwrap();
    assert_eq!(RunConfig::load(&demo.config).unwrap_err().exit_code(), 2);
    assert_eq!(RunConfig::load(dir.path().join("nope.json")).unwrap_err().exit_code(), 2);
}
