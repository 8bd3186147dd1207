use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::Instant;

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures")
}

fn eqg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_eqg")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = eqg(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn write_config(dir: &Path) -> PathBuf {
    let path = dir.join("run.toml");
    let text = format!(
        "race_dir = {:?}\nwork_dir = {:?}\nparse_dir = {:?}\nhidden = 32\ntag_dim = 8\nepochs = 2\nbatch_size = 8\nbeam = 3\n",
        fixtures().join("synth_race"),
        dir.join("work"),
        fixtures().join("synth_parses"),
    );
    fs::write(&path, text).unwrap();
    path
}

#[test]
fn pipeline_runs_end_to_end_on_the_fixture() {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let cfg = cfg.to_str().unwrap();
    let report = ok(&["build-corpus", "--config", cfg]);
    assert!(report.contains("\"triples\": 50"), "{report}");
    ok(&["tag", "--config", cfg]);
    ok(&["build-graphs", "--config", cfg]);
    let train = ok(&["train", "--config", cfg]);
    assert!(train.contains("\"epochs_run\": 2"), "{train}");
    ok(&["generate", "--config", cfg, "--split", "test"]);
    let work = dir.path().join("work");
    let preds = work.join("predictions/test.jsonl");
    let refs = work.join("corpus/test.jsonl");
    let table = ok(&["evaluate", "--pred", preds.to_str().unwrap(), "--ref", refs.to_str().unwrap()]);
    for key in ["BLEU-1", "BLEU-2", "BLEU-3", "BLEU-4", "ROUGE-L"] {
        assert!(table.contains(key), "{table}");
    }
    assert!(start.elapsed().as_secs() < 300);
}

#[test]
fn evaluate_against_itself_scores_one() {
    let refs = fixtures().join("synth_race");
    let dir = tempfile::tempdir().unwrap();
    let work = dir.path().join("w");
    ok(&["build-corpus", "--race-dir", refs.to_str().unwrap(), "--out-dir", work.to_str().unwrap()]);
    let file = work.join("corpus/test.jsonl");
    let json = ok(&["evaluate", "--pred", file.to_str().unwrap(), "--ref", file.to_str().unwrap(), "--json"]);
    let row: serde_json::Value = serde_json::from_str(&json).unwrap();
    assert_eq!(row["BLEU-4"], 1.0);
    assert_eq!(row["ROUGE-L"], 1.0);
}

#[test]
fn gradcheck_exit_codes() {
    let out = ok(&["gradcheck"]);
    assert!(out.contains("\"passed\": true"), "{out}");
    let strict = eqg(&["gradcheck", "--override", "gradcheck_tolerance=1e-300"]);
    assert_eq!(strict.status.code(), Some(3));
}

#[test]
fn usage_and_data_errors() {
    assert_eq!(eqg(&["no-such-command"]).status.code(), Some(1));
    assert_eq!(eqg(&["train", "--override", "nonsense"]).status.code(), Some(1));
    assert_eq!(eqg(&["train", "--override", "unknown_key=3"]).status.code(), Some(1));
    assert_eq!(eqg(&["--help"]).status.code(), Some(0));

    let dir = tempfile::tempdir().unwrap();
    let work = format!("work_dir={:?}", dir.path().display().to_string());
    let out = eqg(&["tag", "--override", &work]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("build-corpus"));
}

#[test]
fn show_config_applies_overrides() {
    let out = ok(&["show-config", "--override", "hidden=64", "--override", "beam=5"]);
    assert!(out.contains("hidden = 64"));
    assert!(out.contains("beam = 5"));
    assert!(out.contains("tag_dim = 32"));
}
