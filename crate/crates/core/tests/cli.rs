use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use fusenet::config::{validate_text, ExperimentConfig, DEFAULT_CONFIG};
use fusenet::fusion::FusionKind;
use fusenet::modality_net::BlockSpec;

fn fusenet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fusenet")).args(args).output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// A seconds-scale variant of the default experiment.
fn tiny(kinds: &[FusionKind]) -> ExperimentConfig {
    let mut c = validate_text(DEFAULT_CONFIG).unwrap();
    c.dataset.subjects = 4;
    c.dataset.tuples_per_subject = 6;
    c.dataset.runs = vec![7];
    for m in &mut c.dataset.modalities {
        m.shape = [1, 8, 8];
        m.train_samples = 3;
        m.test_samples = 2;
        m.noise.max_shift = 1;
        m.noise.occlusion_size = 3;
    }
    c.network.blocks = vec![
        BlockSpec { convs: 1, channels: 16 },
        BlockSpec { convs: 1, channels: 16 },
    ];
    c.network.pool_windows = Vec::new();
    c.network.embedding_dim = 8;
    c.fusion.kinds = kinds.to_vec();
    c.fusion.fusion_dim = 8;
    for t in [&mut c.train.pretrain, &mut c.train.frozen, &mut c.train.joint] {
        t.epochs = 2;
        t.batch_size = 4;
    }
    c.eval.ks = vec![1, 2];
    c
}

fn write_config(dir: &Path, c: &ExperimentConfig) -> PathBuf {
    let path = dir.join("experiment.toml");
    fs::write(&path, toml::to_string(c).unwrap()).unwrap();
    path
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn validate_accepts_the_default_config() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("default.toml");
    fs::write(&path, DEFAULT_CONFIG).unwrap();
    let o = fusenet(&["validate", "--config", s(&path)]);
    assert!(o.status.success(), "{}", stderr(&o));
}

#[test]
fn invalid_config_exits_with_validation_code() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = tiny(&[FusionKind::MultiAbstract]);
    c.network.shallow_tap.window = Some([3, 3]);
    let path = write_config(dir.path(), &c);
    let o = fusenet(&["validate", "--config", s(&path)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("FC3"), "{}", stderr(&o));

    // the run command refuses it before writing anything
    let out = dir.path().join("out");
    let o = fusenet(&["run", "--config", s(&path), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(!out.exists());
}

#[test]
fn unparsable_toml_and_bad_arguments_exit_with_validation_code() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("broken.toml");
    fs::write(&path, "[dataset\nseed = ").unwrap();
    assert_eq!(fusenet(&["validate", "--config", s(&path)]).status.code(), Some(1));
    assert_eq!(fusenet(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(fusenet(&["validate"]).status.code(), Some(1));
}

#[test]
fn eval_without_checkpoints_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_config(dir.path(), &tiny(&[FusionKind::ScoreSum]));
    let o = fusenet(&["eval", "--config", s(&path), "--out", s(&dir.path().join("empty"))]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn score_level_only_config_skips_fusion_phases() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_config(dir.path(), &tiny(&[FusionKind::ScoreSum]));
    let out = dir.path().join("out");
    let o = fusenet(&["run", "--config", s(&path), "--out", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));

    let log = fs::read_to_string(out.join("logs/run7.csv")).unwrap();
    let phases: Vec<&str> = log.lines().skip(1).map(|l| l.split(',').nth(1).unwrap()).collect();
    assert!(!phases.is_empty());
    assert!(phases.iter().all(|p| p.starts_with("pretrain_modality:")), "{phases:?}");

    let metrics = fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert!(metrics.starts_with("run_id,curve_name,K,recall,std\n"));
    let curves: std::collections::BTreeSet<&str> =
        metrics.lines().skip(1).map(|l| l.split(',').nth(1).unwrap()).collect();
    let want = ["score_sum", "unimodal:face", "unimodal:fingerprint", "unimodal:iris"];
    assert_eq!(curves.into_iter().collect::<Vec<_>>(), want);
    assert!(!out.join("FAILED").exists());
}

#[test]
fn eval_from_checkpoints_reproduces_metrics_and_plot_reemits_svg() {
    let dir = tempfile::tempdir().unwrap();
    let c = tiny(&[FusionKind::ScoreMajor, FusionKind::Weighted, FusionKind::MultiAbstract]);
    let path = write_config(dir.path(), &c);
    let out = dir.path().join("out");
    let o = fusenet(&["run", "--config", s(&path), "--out", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let summary = String::from_utf8_lossy(&o.stdout).into_owned();
    assert!(
        summary.contains("multi_abstract") && summary.contains("weighted"),
        "{summary}"
    );
    for f in ["config.toml", "data/run7/manifest.toml", "summary.md", "cmc.svg"] {
        assert!(out.join(f).exists(), "missing {f}");
    }

    let o = fusenet(&["eval", "--config", s(&path), "--out", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(
        fs::read(out.join("metrics.csv")).unwrap(),
        fs::read(out.join("eval/metrics.csv")).unwrap()
    );

    fs::remove_file(out.join("cmc.svg")).unwrap();
    let o = fusenet(&["plot", "--out", s(&out), "--config", s(&path)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let svg = fs::read_to_string(out.join("cmc.svg")).unwrap();
    let doc = roxmltree::Document::parse(&svg).unwrap();
    let lines = doc.descendants().filter(|n| n.has_tag_name("polyline")).count();
    // three unimodal curves plus one per fusion kind
    assert_eq!(lines, 6);
}

#[test]
fn seed_override_replaces_the_run_list() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_config(dir.path(), &tiny(&[FusionKind::ScoreSum]));
    let out = dir.path().join("out");
    let o = fusenet(&["run", "--config", s(&path), "--out", s(&out), "--seed-override", "3"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(out.join("logs/run3.csv").exists());
    assert!(!out.join("logs/run7.csv").exists());
}
