use std::collections::BTreeSet;
use std::path::Path;
use std::process::{Command, Output};
use std::sync::OnceLock;

use backchain_cli::manifest::{RunManifest, MANIFEST_FILE};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_backchain"));
    c.env_remove("BACKCHAIN_THREADS");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn backchain")
}

fn ok(args: &[&str]) -> Output {
    let o = run(args);
    assert!(o.status.success(), "{args:?} failed:\n{}", String::from_utf8_lossy(&o.stderr));
    o
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

/// Loads and validates the manifest in `dir`, and checks that it lists
/// every other file in the directory.
fn checked_manifest(dir: &Path) -> RunManifest {
    let m = RunManifest::load(&dir.join(MANIFEST_FILE)).unwrap();
    m.validate(dir).unwrap();
    let on_disk: BTreeSet<String> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .filter(|n| n != MANIFEST_FILE)
        .collect();
    let listed: BTreeSet<String> = m.artifacts.iter().map(|a| a.path.clone()).collect();
    assert_eq!(on_disk, listed, "unlisted or missing artifacts in {}", dir.display());
    m
}

/// A tiny trained checkpoint shared by the analysis tests.
fn checkpoint() -> &'static Path {
    static DIR: OnceLock<tempfile::TempDir> = OnceLock::new();
    let dir = DIR.get_or_init(|| {
        let d = tempfile::tempdir().unwrap();
        let out = d.path().join("train");
        ok(&[
            "train", "--preset", "tiny", "--n-nodes", "5", "--train-count", "200", "--val-count", "20",
            "--test-count", "20", "--epochs", "2", "--out", out.to_str().unwrap(),
        ]);
        d
    });
    Box::leak(dir.path().join("train/best.ckpt").into_boxed_path())
}

#[test]
fn help_and_usage_errors() {
    assert_eq!(code(&run(&["--help"])), 0);
    assert_eq!(code(&run(&["scrub", "--help"])), 0);
    assert_eq!(code(&run(&["frobnicate"])), 2);
    assert_eq!(code(&run(&["generate", "--no-such-flag"])), 2);
    assert_eq!(code(&run(&["generate", "--count", "many"])), 2);
    assert_eq!(code(&run(&[])), 2);
    let o = bin().args(["generate", "--count", "1"]).env("BACKCHAIN_THREADS", "zero").output().unwrap();
    assert_eq!(code(&o), 2);
}

#[test]
fn help_lists_every_flag_with_defaults() {
    let o = ok(&["scrub", "--help"]);
    let text = String::from_utf8(o.stdout).unwrap();
    for flag in ["--hypothesis", "--lookahead-constraints", "--donors", "--checkpoint", "--config", "--out"] {
        assert!(text.contains(flag), "{flag} missing from help:\n{text}");
    }
    assert!(text.contains("[default: backward-chaining]"));
}

#[test]
fn generate_writes_jsonl_and_manifest() {
    let d = tempfile::tempdir().unwrap();
    let out = d.path().join("d.jsonl");
    ok(&["generate", "--n-nodes", "16", "--count", "100", "--seed", "7", "--out", out.to_str().unwrap()]);
    let text = std::fs::read_to_string(&out).unwrap();
    assert_eq!(text.lines().count(), 100);
    let m = RunManifest::load(&d.path().join("d.manifest.json")).unwrap();
    m.validate(d.path()).unwrap();
    assert_eq!(m.artifacts.len(), 1);
    assert_eq!(m.dataset_digest.as_deref(), Some(m.artifacts[0].sha256.as_str()));
    assert_eq!(m.seeds["data"], 7);
    assert_eq!(m.config["count"], 100);
}

#[test]
fn repeated_invocations_give_identical_artifacts() {
    let d = tempfile::tempdir().unwrap();
    let out = d.path().join("run");
    let digests = || {
        ok(&[
            "train", "--preset", "tiny", "--n-nodes", "4", "--train-count", "64", "--val-count", "8",
            "--test-count", "8", "--epochs", "1", "--out", out.to_str().unwrap(),
        ]);
        let m = checked_manifest(&out);
        (m.artifacts.into_iter().map(|a| (a.path, a.sha256)).collect::<Vec<_>>(), m.checkpoint_digest, m.config_digest)
    };
    let first = digests();
    std::fs::remove_dir_all(&out).unwrap();
    assert_eq!(first, digests());
}

#[test]
fn config_file_precedence() {
    let d = tempfile::tempdir().unwrap();
    let cfg = d.path().join("run.toml");
    std::fs::write(&cfg, "[generate]\ncount = 5\nn-nodes = 6\nseed = 3\n").unwrap();
    let out = d.path().join("x.jsonl");
    ok(&["--config", cfg.to_str().unwrap(), "generate", "--count", "9", "--out", out.to_str().unwrap()]);
    let m = RunManifest::load(&d.path().join("x.manifest.json")).unwrap();
    assert_eq!((m.config["count"].as_u64(), m.config["n-nodes"].as_u64(), m.config["seed"].as_u64()), (Some(9), Some(6), Some(3)));
    assert_eq!(std::fs::read_to_string(&out).unwrap().lines().count(), 9);

    std::fs::write(&cfg, "[generate]\ncuont = 5\n").unwrap();
    assert_eq!(code(&run(&["--config", cfg.to_str().unwrap(), "generate"])), 2);
    assert_eq!(code(&run(&["--config", d.path().join("missing.toml").to_str().unwrap(), "generate"])), 2);
}

#[test]
fn operation_failures_exit_one() {
    let d = tempfile::tempdir().unwrap();
    let missing = d.path().join("none.ckpt");
    let out = d.path().join("o");
    assert_eq!(code(&run(&["eval", "--checkpoint", missing.to_str().unwrap(), "--out", out.to_str().unwrap()])), 1);
    // missing required option is a usage problem
    assert_eq!(code(&run(&["eval", "--out", out.to_str().unwrap()])), 2);
    // payload/kind mismatch is an invalid argument to the renderer
    let p = d.path().join("p.json");
    std::fs::write(&p, r#"{"kind":"attention-overlay","tokens":["a"],"weights":[[1.0]]}"#).unwrap();
    let o = run(&["viz", "--kind", "depth-curve", "--payload", p.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("invalid argument"));
}

#[test]
fn analysis_commands_run_on_a_trained_checkpoint() {
    let ckpt = checkpoint().to_str().unwrap().to_string();
    let d = tempfile::tempdir().unwrap();
    let out = |n: &str| d.path().join(n).to_str().unwrap().to_string();
    let runs: Vec<(&str, Vec<&str>)> = vec![
        ("eval", vec!["--count", "20"]),
        ("probe", vec!["--kinds", "edge-at-target,goal-at-path", "--layers", "0,1", "--n-train", "60", "--n-test", "40", "--max-iter", "50"]),
        ("patch", vec!["--runs", "2", "--samples", "4", "--depths", "2,3"]),
        ("knockout", vec!["--count", "10"]),
        ("circuits", vec![]),
        ("lens", vec!["--count", "40", "--test-count", "10", "--max-iter", "30"]),
        ("stats", vec!["--count", "20"]),
    ];
    for (cmd, extra) in runs {
        let o = out(cmd);
        let mut args = vec![cmd, "--checkpoint", &ckpt, "--out", &o];
        args.extend(extra);
        ok(&args);
        let m = checked_manifest(Path::new(&o));
        assert_eq!(m.command, cmd);
        assert!(m.checkpoint_digest.is_some());
    }
    let probes = std::fs::read_to_string(d.path().join("probe/probes.csv")).unwrap();
    assert_eq!(probes.lines().next(), Some("probe,layer,f1"));
    assert_eq!(probes.lines().count(), 1 + 4);
    assert!(d.path().join("lens/lens.svg").exists());

    let o = out("viz");
    ok(&["viz", "--kind", "attention-overlay", "--checkpoint", &ckpt, "--out", &o]);
    checked_manifest(Path::new(&o));
    let o2 = out("viz2");
    let lens_payload = d.path().join("lens/lens_readout.json");
    ok(&["viz", "--kind", "tree-lens-projection", "--payload", lens_payload.to_str().unwrap(), "--out", &o2]);
    let a = std::fs::read(d.path().join("lens/lens.svg")).unwrap();
    let b = std::fs::read(d.path().join("viz2/tree-lens-projection.svg")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn scrub_self_donor_recovers_everything() {
    let ckpt = checkpoint().to_str().unwrap().to_string();
    let d = tempfile::tempdir().unwrap();
    let o = d.path().join("scrub");
    ok(&[
        "scrub", "--hypothesis", "backward-chaining", "--lookahead-constraints", "--donors", "self", "--count", "30",
        "--checkpoint", &ckpt, "--out", o.to_str().unwrap(),
    ]);
    let m = checked_manifest(&o);
    assert_eq!(m.config["lookahead-constraints"], true);
    let mut r = csv::Reader::from_path(o.join("scrub.csv")).unwrap();
    let headers = r.headers().unwrap().clone();
    let col = headers.iter().position(|h| h == "l_cs").unwrap();
    let rows: Vec<f64> = r.records().map(|x| x.unwrap()[col].parse().unwrap()).collect();
    assert!(!rows.is_empty());
    assert!(rows.iter().all(|v| (v - 1.0).abs() < 1e-4), "{rows:?}");

    let bad = run(&["scrub", "--hypothesis", "forward-chaining", "--checkpoint", &ckpt, "--out", o.to_str().unwrap()]);
    assert_eq!(code(&bad), 2);

    let o2 = d.path().join("curve");
    ok(&["viz", "--kind", "depth-curve", "--payload", o.join("scrub.json").to_str().unwrap(), "--out", o2.to_str().unwrap()]);
    checked_manifest(&o2);
}
