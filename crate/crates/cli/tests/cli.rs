use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use conceptlm::conceptset::SupervisionProportion;
use conceptlm::corpus::{export_corpus, Profile};
use conceptlm_cli::config::{Grid, Mode, PipelineConfig};
use conceptlm_cli::manifest::{GridPoint, RunStatus};
use conceptlm_cli::pipeline::{Split, RUN_ROOT_ENV};
use conceptlm_cli::report::{self, DIFF_METRICS, POINT_METRICS, REPORT_HEADER};
use conceptlm_cli::Workspace;

const FIVE: [f64; 5] = [0.0, 0.25, 0.5, 0.75, 1.0];

fn tiny_config() -> PipelineConfig {
    let mut cfg = PipelineConfig::default();
    cfg.seed = 11;
    cfg.corpus.pretrain_sequences = 40;
    cfg.corpus.train_sequences = 24;
    cfg.corpus.heldout_sequences = 12;
    cfg.pretrain.epochs = 1;
    cfg.train.max_epochs = 2;
    cfg.eval.cluster_sample = 8;
    cfg.eval.bootstrap_resamples = 40;
    cfg.eval.ood = false;
    cfg
}

fn write_config(dir: &Path, cfg: &PipelineConfig) -> PathBuf {
    let path = dir.join("conceptlm.toml");
    std::fs::write(&path, cfg.to_toml().unwrap()).unwrap();
    path
}

fn conceptlm(config: &Path, args: &[&str]) -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_conceptlm"));
    c.arg("--config")
        .arg(config)
        .args(args)
        .env_remove(RUN_ROOT_ENV)
        .env("RUST_LOG", "warn");
    c
}

fn ok(out: Output) -> Output {
    assert!(
        out.status.success(),
        "exit {:?}\n{}",
        out.status,
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn files_under(root: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p.strip_prefix(root).unwrap().to_path_buf());
            }
        }
    }
    out.sort();
    out
}

#[test]
fn missing_config_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = conceptlm(&dir.path().join("nope.toml"), &["gen-corpus"])
        .output()
        .unwrap();
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("error:") && err.contains("nope.toml"), "{err}");
}

#[test]
fn bad_lambda_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &tiny_config());
    let root = dir.path().join("r");
    let out = conceptlm(
        &cfg,
        &[
            "--run-root",
            root.to_str().unwrap(),
            "train",
            "--lambda",
            "1.5",
        ],
    )
    .output()
    .unwrap();
    assert!(!out.status.success());
}

#[test]
fn gen_corpus_is_deterministic_across_roots() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &tiny_config());
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(
        conceptlm(&cfg, &["--run-root", a.to_str().unwrap(), "gen-corpus"])
            .output()
            .unwrap(),
    );
    ok(
        conceptlm(&cfg, &["--run-root", b.to_str().unwrap(), "gen-corpus"])
            .output()
            .unwrap(),
    );
    let files = files_under(&a);
    assert_eq!(files, files_under(&b));
    assert!(files.len() >= 8);
    for f in &files {
        assert_eq!(
            std::fs::read(a.join(f)).unwrap(),
            std::fs::read(b.join(f)).unwrap(),
            "{}",
            f.display()
        );
    }
    // a second run keeps what is there
    let again = ok(
        conceptlm(&cfg, &["--run-root", a.to_str().unwrap(), "gen-corpus"])
            .output()
            .unwrap(),
    );
    assert!(again.stdout.is_empty());
}

#[test]
fn seed_flag_changes_the_corpus() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &tiny_config());
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(
        conceptlm(&cfg, &["--run-root", a.to_str().unwrap(), "gen-corpus"])
            .output()
            .unwrap(),
    );
    ok(conceptlm(
        &cfg,
        &[
            "--seed",
            "12",
            "--run-root",
            b.to_str().unwrap(),
            "gen-corpus",
        ],
    )
    .output()
    .unwrap());
    let split = Path::new("data/A/train.jsonl");
    assert_ne!(
        std::fs::read(a.join(split)).unwrap(),
        std::fs::read(b.join(split)).unwrap()
    );
}

#[test]
fn environment_sets_the_run_root() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &tiny_config());
    let root = dir.path().join("from-env");
    ok(conceptlm(&cfg, &["gen-corpus"])
        .env(RUN_ROOT_ENV, &root)
        .current_dir(dir.path())
        .output()
        .unwrap());
    assert!(root.join("config.toml").exists());
    assert!(!dir.path().join("runs").exists());
    // the flag still wins
    let flag = dir.path().join("from-flag");
    ok(
        conceptlm(&cfg, &["--run-root", flag.to_str().unwrap(), "gen-corpus"])
            .env(RUN_ROOT_ENV, &root)
            .output()
            .unwrap(),
    );
    assert!(flag.join("config.toml").exists());
}

#[test]
fn exported_splits_reingest_unchanged() {
    let dir = tempfile::tempdir().unwrap();
    let ws = Workspace::open(dir.path(), tiny_config()).unwrap();
    ws.gen_corpus().unwrap();
    let vocab = ws.vocab().unwrap();
    for profile in [Profile::A, Profile::B] {
        for split in Split::ALL {
            let path = ws.split_path(profile, split);
            let seqs = ws.split(profile, split, &vocab).unwrap();
            let copy = dir.path().join("copy.jsonl");
            export_corpus(&copy, &seqs, &vocab).unwrap();
            assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&copy).unwrap());
        }
    }
}

#[test]
fn report_header_matches_golden() {
    let golden = std::fs::read_to_string(
        Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden/report_header.csv"),
    )
    .unwrap();
    assert_eq!(golden.trim_end(), REPORT_HEADER);
}

#[test]
fn grid_expands_lambdas_by_proportions() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config();
    cfg.sweep.grid = vec![
        Grid {
            lambdas: FIVE.to_vec(),
            modes: vec![Mode::Concepts],
            proportions: SupervisionProportion::ALL.to_vec(),
        },
        // overlaps the first block in one point
        Grid {
            lambdas: vec![0.5],
            modes: vec![Mode::Concepts, Mode::Noise],
            proportions: vec![SupervisionProportion::All],
        },
    ];
    let ws = Workspace::open(dir.path(), cfg).unwrap();
    let points = ws.grid_points();
    assert_eq!(points.len(), 5 * 4 + 1);
    let ids: std::collections::BTreeSet<_> = points.iter().map(GridPoint::run_id).collect();
    assert_eq!(ids.len(), points.len());
}

#[test]
fn config_mismatch_refuses_the_root() {
    let dir = tempfile::tempdir().unwrap();
    Workspace::open(dir.path(), tiny_config()).unwrap();
    let mut other = tiny_config();
    other.seed += 1;
    assert!(Workspace::open(dir.path(), other).is_err());
}

fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    let text = std::fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some(REPORT_HEADER));
    lines
        .map(|l| l.split(',').map(String::from).collect())
        .collect()
}

#[test]
fn five_lambda_sweep_through_the_binary() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &tiny_config());
    let root = dir.path().join("r");
    let r = root.to_str().unwrap();

    let out = ok(conceptlm(&cfg, &["--jobs", "1", "--run-root", r, "sweep"])
        .output()
        .unwrap());
    assert!(String::from_utf8_lossy(&out.stderr).contains("5 runs, 5 trained"));
    ok(conceptlm(&cfg, &["--run-root", r, "eval"])
        .output()
        .unwrap());
    let out = ok(conceptlm(&cfg, &["--run-root", r, "report"])
        .output()
        .unwrap());
    let report_path = PathBuf::from(String::from_utf8(out.stdout).unwrap().trim());
    let first = std::fs::read(&report_path).unwrap();

    let rows = csv_rows(&report_path);
    for metric in POINT_METRICS {
        let runs: Vec<_> = rows
            .iter()
            .filter(|c| c[7] == metric && c[4] == "concepts")
            .collect();
        let lambdas: Vec<&str> = runs.iter().map(|c| c[3].as_str()).collect();
        assert_eq!(
            lambdas,
            ["0.00", "0.25", "0.50", "0.75", "1.00"],
            "{metric}"
        );
        for c in &runs {
            assert_eq!(c[12], (c[3] == "0.00").to_string());
            assert!(c[9].is_empty() && c[10].is_empty());
        }
        let base: Vec<_> = rows
            .iter()
            .filter(|c| c[7] == metric && c[4] == "pretrained")
            .collect();
        assert_eq!(base.len(), 1);
        assert_eq!(base[0][12], "true");
    }
    for metric in DIFF_METRICS {
        let runs: Vec<_> = rows.iter().filter(|c| c[7] == metric).collect();
        assert_eq!(runs.len(), 5);
        for c in runs {
            let (v, lo, hi): (f64, f64, f64) = (
                c[8].parse().unwrap(),
                c[9].parse().unwrap(),
                c[10].parse().unwrap(),
            );
            assert!(lo <= v && v <= hi);
            assert_eq!(c[11], "base");
        }
    }
    assert_eq!(rows.len(), 6 * POINT_METRICS.len() + 5 * DIFF_METRICS.len());

    // rerunning everything changes nothing
    let out = ok(conceptlm(&cfg, &["--run-root", r, "sweep"])
        .output()
        .unwrap());
    assert!(String::from_utf8_lossy(&out.stderr).contains("0 trained, 5 already done"));
    let out = ok(conceptlm(&cfg, &["--run-root", r, "eval"])
        .output()
        .unwrap());
    assert!(String::from_utf8_lossy(&out.stderr).contains("0 evaluated, 5 already evaluated"));
    ok(conceptlm(&cfg, &["--run-root", r, "report"])
        .output()
        .unwrap());
    assert_eq!(std::fs::read(&report_path).unwrap(), first);
}

#[test]
fn eval_skips_unfinished_and_isolates_missing_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config();
    cfg.sweep.grid = vec![Grid {
        lambdas: vec![0.0, 1.0],
        ..Grid::default()
    }];
    let cfg_path = write_config(dir.path(), &cfg);
    let root = dir.path().join("r");
    let ws = Workspace::open(&root, cfg).unwrap();
    assert!(ws.sweep().unwrap().failed.is_empty());
    let pending = GridPoint {
        lambda: 0.5,
        mode: Mode::Concepts,
        proportion: SupervisionProportion::All,
        profile: Profile::A,
        model_size: "desk".into(),
    };
    ws.register(&[pending.clone()]).unwrap();

    let done: Vec<_> = ws
        .manifest()
        .load()
        .unwrap()
        .runs
        .iter()
        .filter(|r| r.status == RunStatus::Done)
        .cloned()
        .collect();
    assert_eq!(done.len(), 2);
    let ckpt = |i: usize| root.join(&done[i].artifacts["checkpoint"]);
    std::fs::remove_file(ckpt(0)).unwrap();

    let r = root.to_str().unwrap();
    let out = ok(conceptlm(&cfg_path, &["--run-root", r, "eval"])
        .output()
        .unwrap());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(
        err.contains(&format!("skipped {}: status pending", pending.run_id())),
        "{err}"
    );
    assert!(err.contains(&format!("failed {}", done[0].id)), "{err}");
    assert!(err.contains("1 evaluated"), "{err}");

    // the report lists only what was evaluated
    let s = report::write_report(&ws).unwrap();
    assert_eq!(s.unevaluated, vec![done[0].id.clone()]);

    // with every checkpoint gone the command fails
    let fresh = dir.path().join("r2");
    let ws2 = Workspace::open(&fresh, ws.cfg.clone()).unwrap();
    ws2.sweep().unwrap();
    for e in ws2.manifest().load().unwrap().runs {
        std::fs::remove_file(fresh.join(&e.artifacts["checkpoint"])).unwrap();
    }
    let out = conceptlm(&cfg_path, &["--run-root", fresh.to_str().unwrap(), "eval"])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("every evaluation failed"));
}
