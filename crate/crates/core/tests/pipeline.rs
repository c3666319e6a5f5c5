use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use weatherbias::pipeline::{bias_gap, ratio, read_summary, run_experiment, ExperimentConfig, Ratio, StageId};

fn tiny_config(out: &Path) -> ExperimentConfig {
    let text = fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/default.toml")).unwrap();
    let mut cfg: ExperimentConfig = text.parse().unwrap();
    cfg.output_dir = out.to_path_buf();
    cfg.data.train_size = 12;
    cfg.data.test_size = 4;
    cfg.train.steps = 6;
    cfg.train.batch_size = 4;
    cfg.fine_tune.steps = 3;
    cfg
}

fn run(cfg: &ExperimentConfig) -> weatherbias::pipeline::ExperimentSummary {
    run_experiment(cfg, &mut |_| {}).unwrap()
}

fn read(dir: &Path, file: &str) -> Vec<u8> {
    fs::read(dir.join(file)).unwrap_or_else(|e| panic!("{file}: {e}"))
}

#[test]
fn reruns_without_cache_are_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let mut a = tiny_config(&tmp.path().join("a"));
    a.cache = false;
    let mut b = a.clone();
    b.output_dir = tmp.path().join("b");
    run(&a);
    run(&b);
    for f in ["table1.csv", "table2.csv", "summary.json", "artifacts.tsv", "stages/A-tech2/model.wbh", "stages/B-stage3/model.wbh"] {
        assert_eq!(read(&a.output_dir, f), read(&b.output_dir, f), "{f}");
    }
}

#[test]
fn summary_arithmetic_recomputes_from_stored_reports() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let written = run(&cfg);
    let s = read_summary(&tmp.path().join("summary.json")).unwrap();
    assert_eq!(s, written);
    let map = |k: &str| s.stages.iter().find(|r| r.key == k).unwrap().report.map;
    assert_eq!(s.bias.bias_gap, Some(bias_gap(map("A/stage1"), map("A/stage2"))));
    assert_eq!(s.bias.bias_gap_b, Some(bias_gap(map("B/stage1"), map("B/stage2"))));
    for (m, key) in s.bias.mitigations.iter().zip(["A/tech1", "A/tech2"]) {
        assert_eq!(m.ratio, ratio(map(key), map("A/stage2")));
        assert_eq!(m.delta_map, map(key) - map("A/stage2"));
    }
    let keys: Vec<&str> = s.stages.iter().map(|r| r.key.as_str()).collect();
    assert_eq!(keys, ["A/stage1", "A/stage2", "A/stage3", "A/tech1", "A/tech2", "B/stage1", "B/stage2", "B/stage3"]);
    for r in &s.stages {
        assert!(tmp.path().join(&r.checkpoint).exists(), "{}", r.checkpoint);
        assert_eq!(r.report.provenance.dataset_id.is_empty(), false);
    }
    let csv = String::from_utf8(read(tmp.path(), "table1.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "model,car,bus,person,bicycle,mAP");
    assert_eq!(csv.lines().count(), 7);
}

#[test]
fn stage_one_alone_leaves_bias_fields_unavailable() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config(tmp.path());
    cfg.stages = vec![StageId::Stage1];
    let s = run(&cfg);
    assert_eq!(s.stages.len(), 1);
    assert_eq!(s.bias.bias_gap, None);
    assert_eq!(s.bias.mean_ratio, None);
    assert!(s.bias.mitigations.is_empty());
}

#[test]
fn dependent_stages_need_a_stage_one_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config(tmp.path());
    cfg.stages = vec![StageId::Stage2];
    let err = run_experiment(&cfg, &mut |_| {}).unwrap_err();
    assert!(err.to_string().contains("stage-1 checkpoint"), "{err}");

    cfg.stages = vec![StageId::Stage1];
    run(&cfg);
    cfg.stages = vec![StageId::Stage2, StageId::Tech1];
    let s = run(&cfg);
    assert_eq!(s.stages.len(), 2);
    assert!(tmp.path().join("stages/A-stage1/model.wbh").exists());
}

#[test]
fn zero_fine_tune_steps_reproduce_stage_two() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config(tmp.path());
    cfg.stages = vec![StageId::Stage1, StageId::Stage2, StageId::Tech1];
    cfg.fine_tune.steps = 0;
    let s = run(&cfg);
    let (s2, t1) = (&s.stages[1].report, &s.stages[2].report);
    assert_eq!((&s2.ap, s2.map), (&t1.ap, t1.map));
    assert_eq!(s.bias.mitigations[0].ratio, if s2.map > 0.0 { Ratio::Value(1.0) } else { Ratio::Unbounded });
}

#[test]
fn family_b_ignores_family_a_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let mut a = tiny_config(&tmp.path().join("a"));
    a.stages = vec![StageId::Stage4];
    let mut b = a.clone();
    b.output_dir = tmp.path().join("b");
    b.scenes.clean_a.seed += 100;
    let (sa, sb) = (run(&a), run(&b));
    assert_eq!(sa.stages, sb.stages);
    assert_eq!(read(&a.output_dir, "table1.csv"), read(&b.output_dir, "table1.csv"));
}

#[test]
fn cached_rerun_matches_fresh_run() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let first = run(&cfg);
    let summary = read(tmp.path(), "summary.json");
    let second = run(&cfg);
    assert_eq!(first, second);
    assert_eq!(summary, read(tmp.path(), "summary.json"));
}

fn cli() -> Command {
    Command::new(env!("CARGO_BIN_EXE_weatherbias"))
}

#[test]
fn cli_run_overrides_and_exit_code() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(&tmp.path().join("unused"));
    let config_path = tmp.path().join("tiny.toml");
    fs::write(&config_path, cfg.to_text()).unwrap();
    let out: PathBuf = tmp.path().join("cli");
    let status = cli()
        .args(["run", "--stages", "stage1", "--seed", "3", "--config"])
        .arg(&config_path)
        .arg("--out")
        .arg(&out)
        .output()
        .unwrap();
    let s = read_summary(&out.join("summary.json")).unwrap();
    assert_eq!(s.stages.len(), 1);
    let expected = if s.passed { 0 } else { 1 };
    assert_eq!(status.status.code(), Some(expected));
    let report = cli().arg("report").arg(&out).output().unwrap();
    assert!(String::from_utf8_lossy(&report.stdout).contains("| Model |"));

    let bad = cli().args(["run", "--stages", "stage9", "--config"]).arg(&config_path).output().unwrap();
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn cli_generate_corrupt_train_eval() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let ok = |c: &mut Command| assert!(c.status().unwrap().success());
    ok(cli().args(["generate", "--family", "coco", "--count", "6", "--out"]).arg(d.join("clean")));
    ok(cli()
        .args(["corrupt", "--chain", "fog:density=0.5,airlight=0.5", "--manifest"])
        .arg(d.join("clean/manifest.tsv"))
        .arg("--out")
        .arg(d.join("fog")));
    ok(cli()
        .args(["train", "--steps", "3", "--batch-size", "2", "--lr", "0.05", "--manifest"])
        .arg(d.join("clean/manifest.tsv"))
        .arg("--out")
        .arg(d.join("m.wbh")));
    ok(cli()
        .args(["train", "--steps", "2", "--batch-size", "2", "--init"])
        .arg(d.join("m.wbh"))
        .arg("--manifest")
        .arg(d.join("fog/manifest.tsv"))
        .arg("--out")
        .arg(d.join("ft.wbh")));
    let eval = cli()
        .args(["eval", "--format", "csv", "--model"])
        .arg(d.join("ft.wbh"))
        .arg("--manifest")
        .arg(d.join("fog/manifest.tsv"))
        .arg("--json")
        .arg(d.join("r.json"))
        .output()
        .unwrap();
    assert!(eval.status.success());
    assert!(String::from_utf8_lossy(&eval.stdout).starts_with("model,car,bus,person,bicycle,mAP"));
    assert!(d.join("r.json").exists());
}
