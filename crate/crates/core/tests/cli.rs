//! Pipeline stages through `cli::run` and the stage functions: resumable
//! labeling, guards and exit codes.

use std::fs;
use std::net::TcpListener;
use std::path::Path;

use rgvlm::cli::{self, RunConfig};
use rgvlm::dataset::{labels_path, read_labels, LabelSource};

fn run(out: &Path, args: &[&str]) -> i32 {
    let mut v = vec!["rgvlm".to_string(), "--out".into(), out.display().to_string()];
    v.extend(args.iter().map(|s| s.to_string()));
    cli::run(v)
}

fn small(out: &Path, trajectories: usize) -> RunConfig {
    let mut cfg = RunConfig { output_dir: out.to_path_buf(), ..RunConfig::default() };
    cfg.generator.task_lengths = vec![1, 2];
    cfg.generator.trajectories_per_length = trajectories / 2;
    cfg
}

#[test]
fn interrupted_labeling_resumes_without_relabeling() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small(&tmp.path().join("ref"), 60);
    let (dir, _) = cli::gen_data(&cfg).unwrap();
    let full = cli::label(&cfg, &dir, LabelSource::Oracle, None).unwrap();
    assert_eq!((full.labeled, full.skipped), (60, 0));
    let reference = fs::read(labels_path(&dir, LabelSource::Oracle)).unwrap();

    // keep 30 complete records plus a torn 31st
    let cut = reference.iter().enumerate().filter(|(_, &b)| b == b'\n').nth(29).unwrap().0 + 1;
    let torn = &reference[..cut + 20];
    fs::write(labels_path(&dir, LabelSource::Oracle), torn).unwrap();
    let resumed = cli::label(&cfg, &dir, LabelSource::Oracle, None).unwrap();
    assert_eq!((resumed.labeled, resumed.skipped), (30, 30));
    assert_eq!(fs::read(labels_path(&dir, LabelSource::Oracle)).unwrap(), reference);

    // a complete file is left alone
    let again = cli::label(&cfg, &dir, LabelSource::Oracle, None).unwrap();
    assert_eq!((again.labeled, again.skipped), (0, 60));
    assert_eq!(read_labels(&dir, LabelSource::Oracle).unwrap().len(), 60);
}

#[test]
fn combined_requires_dense_labels() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    assert_eq!(run(&out, &["gen-data", "--generator.trajectories_per_length=2"]), 0);
    assert_eq!(run(&out, &["label", "--source", "combined"]), 1);
    assert!(!out.join("dataset/labels/combined.jsonl").exists());
    assert_eq!(run(&out, &["label", "--source", "combined", "--dense", "sparse"]), 1);
    assert_eq!(run(&out, &["label", "--source", "oracle"]), 0);
    assert_eq!(run(&out, &["label", "--source", "combined"]), 0);
}

#[test]
fn training_needs_labels() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    assert_eq!(run(&out, &["gen-data", "--generator.trajectories_per_length=2"]), 0);
    assert_eq!(run(&out, &["train", "--source", "sparse", "--iql.updates=10"]), 1);
    assert_eq!(run(&out, &["label", "--source", "sparse"]), 0);
    assert_eq!(run(&out, &["train", "--source", "sparse", "--iql.updates=10", "--iql.batch_size=8"]), 0);
    assert!(out.join("policies/sparse-seed0.bin").exists());
    assert!(out.join("policies/sparse-seed0.metrics.csv").exists());
}

#[test]
fn unreachable_backend_exits_with_code_2() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let url = format!("http://127.0.0.1:{port}");
    assert_eq!(run(&out, &["gen-data", "--generator.task_lengths=[1]", "--generator.trajectories_per_length=2"]), 0);
    let code = run(
        &out,
        &["label", "--source", "lvlm", "--backend", "http", "--base-url", &url, "--annotator.max_retries=0"],
    );
    assert_eq!(code, 2);
}

#[test]
fn divergence_exits_with_code_3() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    assert_eq!(run(&out, &["gen-data", "--generator.trajectories_per_length=2"]), 0);
    assert_eq!(run(&out, &["label", "--source", "sparse"]), 0);
    let code = run(&out, &["train", "--source", "sparse", "--iql.updates=200", "--iql.learning_rate=1e30"]);
    assert_eq!(code, 3);
}

#[test]
fn bad_configuration_is_a_validation_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    assert_eq!(run(&out, &["gen-data", "--generator.no_such_field=1"]), 1);
    assert_eq!(run(&out, &["gen-data", "--generator.task_lengths=[9]"]), 1);
    let cfg = tmp.path().join("cfg.json");
    fs::write(&cfg, r#"{"iql": {"gamma": "high"}}"#).unwrap();
    assert_eq!(run(&out, &["--config", cfg.to_str().unwrap(), "gen-data"]), 1);
}

#[test]
fn report_compares_methods_and_guards_its_inputs() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let eval_args = ["--eval.task_lengths=[1]", "--eval.tasks_per_length=10"];
    assert_eq!(run(&out, &["gen-data", "--generator.task_lengths=[1]", "--generator.trajectories_per_length=20"]), 0);
    for source in ["sparse", "oracle"] {
        assert_eq!(run(&out, &["label", "--source", source]), 0);
        assert_eq!(run(&out, &["train", "--source", source, "--iql.updates=1500", "--iql.batch_size=32", "--iql.hidden=[32,32]"]), 0);
        let artifact = out.join(format!("policies/{source}-seed0.bin"));
        for mode in ["fixed", "randomized"] {
            let mut args = vec!["eval", "--artifact", artifact.to_str().unwrap(), "--init-mode", mode];
            args.extend(eval_args);
            assert_eq!(run(&out, &args), 0);
        }
    }
    let reports: Vec<String> = ["sparse", "oracle"]
        .iter()
        .flat_map(|m| ["fixed", "randomized"].map(|mode| format!("{}/reports/{m}-seed0-{mode}.csv", out.display())))
        .collect();
    let mut args = vec!["report", "--baseline", "sparse"];
    args.extend(reports.iter().map(String::as_str));
    assert_eq!(run(&out, &args), 0);
    let table: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("comparison.json")).unwrap()).unwrap();
    assert_eq!(table["ratios"]["sparse"]["1"], 1.0);
    assert!(table["drops"]["oracle"].is_number());

    // one report, or a baseline that is not among them
    assert_eq!(run(&out, &["report", "--baseline", "sparse", &reports[0]]), 1);
    args[2] = "lvlm";
    assert_eq!(run(&out, &args), 1);
}
