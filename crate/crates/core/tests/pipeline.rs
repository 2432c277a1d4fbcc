use std::path::Path;
use std::process::Command;

use sgn::harness::{Experiment, ExperimentConfig, RunOptions, Stage};
use sgn::metrics::{compare_reports, BleuMean, EvalReport};

fn tiny(epochs: usize) -> ExperimentConfig {
    ExperimentConfig {
        synthetic_train: 48,
        synthetic_val: 4,
        synthetic_test: 8,
        min_count: 1,
        parser_embed: 8,
        parser_hidden: 8,
        parser_layers: 1,
        parser_chunk: 2,
        parser_epochs: 1,
        width: 16,
        decoder_layers: 1,
        decoder_heads: 2,
        ffn: 16,
        tree_layers: 1,
        gat_layers: 1,
        epochs,
        batch: 8,
        ..ExperimentConfig::default()
    }
}

fn report(ppl: f64, bleu: f64, rouge: f64, len: f64, reference: f64) -> EvalReport {
    EvalReport {
        split: "test".into(),
        samples: 100,
        perplexity: ppl,
        bleu: bleu / 100.0,
        sentence_bleu: bleu / 100.0,
        rouge_l: rouge / 100.0,
        avg_length: len,
        reference_length: reference,
        bleu_mean: BleuMean::Geometric,
    }
}

#[test]
fn compare_reports_examples() {
    let a = report(7.52, 9.29, 34.8, 66.9, 116.5);
    let b = report(6.67, 12.75, 36.9, 112.5, 116.5);
    let d = compare_reports(&a, &b).unwrap();
    assert!((d.perplexity + 0.85).abs() < 1e-9);
    assert!((100.0 * d.bleu - 3.46).abs() < 1e-9);
    assert!((100.0 * d.rouge_l - 2.1).abs() < 1e-9);
    assert!((d.closer_by - 45.6).abs() < 1e-9);
    let same = compare_reports(&a, &a).unwrap();
    assert_eq!((same.perplexity, same.bleu, same.rouge_l, same.avg_length, same.closer_by), (0.0, 0.0, 0.0, 0.0, 0.0));
    let other = EvalReport { samples: 99, ..a.clone() };
    assert!(compare_reports(&a, &other).is_err());
}

#[test]
fn zero_step_run_reports_from_initialization() {
    let root = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig { parser_epochs: 0, ..tiny(0) };
    let exp = Experiment::new(cfg, root.path()).unwrap();
    let out = exp.run(&RunOptions::default()).unwrap();
    let report = out.report.expect("a report from the untrained model");
    report.validate().unwrap();
    assert_eq!(report.samples, 8);
    assert!(out.history.is_empty());
    assert_eq!(out.state.stage, Stage::Done);
    for stem in ["config-", "report-", "samples-", "state-", "annotated-", "vocab-"] {
        assert!(std::fs::read_dir(&exp.dir).unwrap().any(|e| e.unwrap().file_name().to_string_lossy().starts_with(stem)), "{stem}");
    }
    let saved = EvalReport::from_json(&std::fs::read_to_string(exp.path("report", "json")).unwrap()).unwrap();
    assert_eq!(saved, report);
}

#[test]
fn resumed_run_continues_the_same_curve() {
    let straight_root = tempfile::tempdir().unwrap();
    let straight = Experiment::new(tiny(3), straight_root.path()).unwrap();
    let full = straight.run(&RunOptions::default()).unwrap();

    let resumed_root = tempfile::tempdir().unwrap();
    let resumed = Experiment::new(tiny(3), resumed_root.path()).unwrap();
    let cut = resumed.run(&RunOptions { stop_after_joint_epochs: Some(1), ..Default::default() }).unwrap();
    assert!(cut.report.is_none());
    assert_eq!(resumed.read_state().unwrap().unwrap().status, "interrupted");
    assert_eq!(cut.state.joint_epochs, 1);
    let rest = resumed.run(&RunOptions::default()).unwrap();
    assert_eq!(rest.state.status, "done");

    assert_eq!(full.history.len(), rest.history.len());
    for (a, b) in full.history.iter().zip(&rest.history) {
        assert_eq!((&a.stage, a.epoch), (&b.stage, b.epoch));
        assert!((a.loss - b.loss).abs() < 1e-6, "{a:?} vs {b:?}");
        assert!((a.tree_loss - b.tree_loss).abs() < 1e-6);
    }
    assert_eq!(resumed.read_curves().unwrap(), rest.history);
    let (ra, rb) = (full.report.unwrap(), rest.report.unwrap());
    assert!((ra.perplexity - rb.perplexity).abs() < 1e-6);
    assert_eq!(ra.bleu, rb.bleu);
}

#[test]
fn config_fingerprint_separates_runs() {
    let root = tempfile::tempdir().unwrap();
    let a = Experiment::new(tiny(1), root.path()).unwrap();
    let b = Experiment::new(tiny(1).baseline(), root.path()).unwrap();
    assert_ne!(a.dir, b.dir);
    let again = Experiment::new(tiny(1), root.path()).unwrap();
    assert_eq!(a.dir, again.dir);
    let text = std::fs::read_to_string(a.path("config", "toml")).unwrap();
    assert_eq!(ExperimentConfig::from_toml(&text).unwrap(), tiny(1));
}

fn sgn(root: &Path, args: &[&str]) -> (bool, String, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_sgn")).args(args).env("SGN_ARTIFACTS", root).output().unwrap();
    (out.status.success(), String::from_utf8_lossy(&out.stdout).into_owned(), String::from_utf8_lossy(&out.stderr).into_owned())
}

#[test]
fn command_line_round_trip() {
    let root = tempfile::tempdir().unwrap();
    let cfg = root.path().join("run.toml");
    std::fs::write(&cfg, tiny(1).to_toml()).unwrap();
    let c = cfg.to_str().unwrap();

    let (ok, out, err) = sgn(root.path(), &["pipeline", "--config", c]);
    assert!(ok, "{err}");
    assert!(out.contains("+SGN"), "{out}");
    let (ok, out, _) = sgn(root.path(), &["pipeline", "--config", c, "--baseline"]);
    assert!(ok && out.contains("baseline"));

    let corpus = root.path().join("corpus.json");
    let (ok, _, err) = sgn(root.path(), &["make-corpus", "--config", c, "--out", corpus.to_str().unwrap()]);
    assert!(ok, "{err}");
    let text = std::fs::read_to_string(&corpus).unwrap();
    let key = text.split("\"image_key\": \"").nth(1).unwrap().split('"').next().unwrap().to_string();

    let (ok, out, err) = sgn(root.path(), &["gen-tree", "--config", c, "--key", &key]);
    assert!(ok, "{err}");
    assert!(out.lines().nth(1).unwrap().chars().all(|ch| ch == '0' || ch == '1'), "{out}");
    let (ok, _, err) = sgn(root.path(), &["generate", "--config", c, "--key", &key]);
    assert!(ok, "{err}");

    let reports: Vec<_> = walk(root.path()).into_iter().filter(|p| p.file_name().unwrap().to_string_lossy().starts_with("report-")).collect();
    assert_eq!(reports.len(), 2);
    let (ok, out, err) = sgn(root.path(), &["compare", reports[0].to_str().unwrap(), reports[1].to_str().unwrap()]);
    assert!(ok, "{err}");
    assert!(out.contains("closer by"));

    let (ok, _, err) = sgn(root.path(), &["evaluate", "--config", c, "--set", "no_such_key=1"]);
    assert!(!ok && err.starts_with("error:"), "{err}");
}

fn walk(dir: &Path) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    for e in std::fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(walk(&p));
        } else {
            out.push(p);
        }
    }
    out
}
