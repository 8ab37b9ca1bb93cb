use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn memaudit(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_memaudit"))
        .args(args)
        .current_dir(cwd)
        .env_remove("MEMAUDIT_PROVIDER_TOKEN")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn explain(o: &Output) -> String {
    format!("stdout:\n{}\nstderr:\n{}", String::from_utf8_lossy(&o.stdout), String::from_utf8_lossy(&o.stderr))
}

const SMALL: &str = r#"
[corpus.testbed]
documents = 120
snippets_per_frequency = 2
probes = 4
heldout_documents = 10
filler_lines = [20, 40]

[generation]
strategy = "NPG"
num_outputs = 40
max_tokens = 128
"#;

fn write_config(dir: &Path, text: &str) -> String {
    let p = dir.join("audit.toml");
    fs::write(&p, text).unwrap();
    p.display().to_string()
}

#[test]
fn audit_runs_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let a = memaudit(&["audit", "--config", &cfg, "--out", "a"], dir.path());
    assert_eq!(code(&a), 0, "{}", explain(&a));
    assert!(String::from_utf8_lossy(&a.stdout).contains("unique segments"));
    let b = memaudit(&["audit", "--config", &cfg, "--out", "b"], dir.path());
    assert_eq!(code(&b), 0, "{}", explain(&b));
    let ra = fs::read(dir.path().join("a/report.json")).unwrap();
    assert_eq!(ra, fs::read(dir.path().join("b/report.json")).unwrap());
    let v: serde_json::Value = serde_json::from_slice(&ra).unwrap();
    let ratio = v["memorization"]["memorized_output_ratio"].as_f64().unwrap();
    assert!(ratio > 0.0 && ratio <= 1.0);
}

#[test]
fn seed_flag_changes_the_batch() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    assert_eq!(code(&memaudit(&["audit", "--config", &cfg, "--out", "a"], dir.path())), 0);
    assert_eq!(code(&memaudit(&["audit", "--config", &cfg, "--out", "b", "--seed", "9"], dir.path())), 0);
    let seed = |d: &str| {
        let v: serde_json::Value = serde_json::from_slice(&fs::read(dir.path().join(d).join("report.json")).unwrap()).unwrap();
        v["batch"]["seed"].as_u64().unwrap()
    };
    assert_eq!((seed("a"), seed("b")), (0, 9));
}

#[test]
fn stages_run_one_at_a_time() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let early = memaudit(&["detect", "--config", &cfg, "--out", "s"], dir.path());
    assert_eq!(code(&early), 2, "{}", explain(&early));
    for stage in ["generate", "detect", "metrics", "scan"] {
        let o = memaudit(&[stage, "--config", &cfg, "--out", "s"], dir.path());
        assert_eq!(code(&o), 0, "{stage}: {}", explain(&o));
    }
    for f in ["outputs.jsonl", "segments.jsonl", "segments.csv", "matches.jsonl", "scores.csv", "findings.jsonl"] {
        assert!(dir.path().join("s").join(f).is_file(), "{f}");
    }
}

#[test]
fn report_reemits_requested_formats() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    assert_eq!(code(&memaudit(&["audit", "--config", &cfg, "--out", "a"], dir.path())), 0);
    fs::remove_file(dir.path().join("a/report.txt")).unwrap();
    let o = memaudit(&["report", "--out", "a", "--format", "txt"], dir.path());
    assert_eq!(code(&o), 0, "{}", explain(&o));
    assert!(dir.path().join("a/report.txt").is_file());
    let bad = memaudit(&["report", "--out", "a", "--format", "xml"], dir.path());
    assert_eq!(code(&bad), 2);
    let missing = memaudit(&["report", "--out", "nowhere"], dir.path());
    assert_eq!(code(&missing), 2);
}

#[test]
fn redaction_flags() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let o = memaudit(&["audit", "--config", &cfg, "--out", "a", "--unsafe-no-redact"], dir.path());
    assert_eq!(code(&o), 0, "{}", explain(&o));
    let v: serde_json::Value = serde_json::from_slice(&fs::read(dir.path().join("a/report.json")).unwrap()).unwrap();
    assert_eq!(v["secrets"]["redacted"], false);
    let o = memaudit(&["audit", "--config", &cfg, "--out", "a", "--unsafe-no-redact", "--redact"], dir.path());
    assert_eq!(code(&o), 0, "{}", explain(&o));
    let v: serde_json::Value = serde_json::from_slice(&fs::read(dir.path().join("a/report.json")).unwrap()).unwrap();
    assert_eq!(v["secrets"]["redacted"], true);
}

#[test]
fn config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&memaudit(&["audit", "--config", "absent.toml"], dir.path())), 2);
    assert_eq!(code(&memaudit(&["audit"], dir.path())), 2);
    let cfg = write_config(dir.path(), &SMALL.replace("\"NPG\"", "\"PCG\"").replace("heldout_documents = 10", "heldout_documents = 0"));
    let o = memaudit(&["audit", "--config", &cfg, "--out", "p"], dir.path());
    assert_eq!(code(&o), 2, "{}", explain(&o));
    assert!(!dir.path().join("p/outputs.jsonl").exists());
    let cfg = write_config(dir.path(), &SMALL.replace("[generation]", "window_lines = 1\n[generation]"));
    assert_eq!(code(&memaudit(&["audit", "--config", &cfg], dir.path())), 2);
}

#[test]
fn unreachable_provider_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let text = format!("{SMALL}\n[models]\naudited = {{ kind = \"remote\", endpoint = \"http://127.0.0.1:9\", timeout_ms = 100 }}\nlarge = {{ kind = \"builtin\", order = 5 }}\nsmall = {{ kind = \"builtin\", order = 2 }}\n");
    let cfg = write_config(dir.path(), &text);
    let o = memaudit(&["audit", "--config", &cfg, "--out", "r"], dir.path());
    assert_eq!(code(&o), 3, "{}", explain(&o));
}

#[test]
fn corpus_model_and_sweep_commands() {
    let dir = tempfile::tempdir().unwrap();
    let o = memaudit(&["corpus", "testbed", "--out", "tb", "--documents", "150", "--probes", "3"], dir.path());
    assert_eq!(code(&o), 0, "{}", explain(&o));
    for f in ["training.jsonl", "heldout.jsonl", "snippets.jsonl", "probes.jsonl"] {
        assert!(dir.path().join("tb").join(f).is_file(), "{f}");
    }

    let src = dir.path().join("src");
    fs::create_dir_all(src.join("pkg")).unwrap();
    fs::write(src.join("pkg/a.py"), "def a():\n    return 1\n").unwrap();
    fs::write(src.join("b.py"), "import os\n").unwrap();
    fs::write(src.join("notes.md"), "# notes\n").unwrap();
    let o = memaudit(&["corpus", "ingest", "src", "--out", "ing", "--ext", "py"], dir.path());
    assert_eq!(code(&o), 0, "{}", explain(&o));
    let lines = fs::read_to_string(dir.path().join("ing/training.jsonl")).unwrap();
    assert_eq!(lines.lines().count(), 2);

    let o = memaudit(&["model", "train", "tb/training.jsonl", "--order", "3", "--out", "m"], dir.path());
    assert_eq!(code(&o), 0, "{}", explain(&o));
    let o = memaudit(&["model", "serve-info", "--model", "m/ngram-3.model"], dir.path());
    assert_eq!(code(&o), 0, "{}", explain(&o));
    let info: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(info["meta"]["model_label"], "ngram-3");

    let text = String::from(
        "[corpus]\ntraining = \"tb/training.jsonl\"\n[models]\naudited = { kind = \"file\", path = \"m/ngram-3.model\" }\nlarge = { kind = \"file\", path = \"m/ngram-3.model\" }\nsmall = { kind = \"builtin\", order = 2 }\n[generation]\nstrategy = \"NPG\"\nnum_outputs = 20\nmax_tokens = 64\n"
    );
    let cfg = write_config(dir.path(), &text);
    let o = memaudit(&["sweep", "--config", &cfg, "--out", "sw", "--factor", "max-tokens", "--values", "32,64"], dir.path());
    assert_eq!(code(&o), 0, "{}", explain(&o));
    let csv = fs::read_to_string(dir.path().join("sw/sweep-max_tokens.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    let o = memaudit(&["sweep", "--config", &cfg, "--out", "sw", "--factor", "top-k", "--values", "5,3"], dir.path());
    assert_eq!(code(&o), 2, "{}", explain(&o));
    let o = memaudit(&["audit", "--config", &cfg, "--out", "fa"], dir.path());
    assert_eq!(code(&o), 0, "{}", explain(&o));
}
