use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use annostance_cli::artifacts::{meta_path, Meta};
use annostance_cli::config::{Overrides, Resolved};

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/fixtures").canonicalize().unwrap()
}

fn config(dir: &Path, extra: &str) -> PathBuf {
    let f = fixtures();
    let body = format!(
        r#"
seed = 3
out_dir = "out"

[[corpus]]
name = "synthetic60"
path = "{syn}"

[[corpus]]
name = "semeval_trimmed"
adapter = "semeval"
format = "csv"
files = [{{ path = "{sem}", split = "test" }}]

[train]
corpora = ["synthetic60"]
sources = ["gold", "machine", "machine+mt"]

[student]
epochs = 5
dim = 4096
{extra}
"#,
        syn = f.join("synthetic60.jsonl").display(),
        sem = f.join("semeval_trimmed.tsv").display(),
    );
    let p = dir.join("run.toml");
    std::fs::write(&p, body).unwrap();
    p
}

fn run(cfg: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_annostance"))
        .arg("--config")
        .arg(cfg)
        .args(args)
        .env("RUST_LOG", "warn")
        .env_remove("OPENAI_API_KEY")
        .output()
        .unwrap()
}

fn ok(out: Output) -> Output {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    out
}

/// Every file under `root` except the timestamped log, keyed by relative path.
fn snapshot(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if p.file_name().unwrap() != "run.log" {
                out.insert(p.strip_prefix(root).unwrap().display().to_string(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn stage_names() -> [&'static str; 6] {
    ["ingest", "annotate", "sample-multitarget", "train", "evaluate", "export"]
}

#[test]
fn pipeline_is_deterministic_and_complete() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), "[mock]\nnoise_rate = 0.2\n");
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for stage in stage_names() {
        ok(run(&cfg, &["--out-dir", a.to_str().unwrap(), stage]));
    }
    ok(run(&cfg, &["--out-dir", b.to_str().unwrap(), "--sequential", "pipeline"]));
    let snap_a = snapshot(&a);
    assert_eq!(snap_a, snapshot(&b));
    for f in [
        "corpora/synthetic60.jsonl",
        "annotations/synthetic60.jsonl",
        "samples/synthetic60.jsonl",
        "models/synthetic60.machine+mt.json",
        "evaluate/grid.txt",
        "evaluate/summary.json",
        "export/synthetic60.gold.jsonl",
        "cache.jsonl",
    ] {
        assert!(snap_a.contains_key(f), "missing {f}");
    }
    assert!(a.join("run.log").is_file());

    // Warm re-runs agree with each other.
    ok(run(&cfg, &["--out-dir", a.to_str().unwrap(), "pipeline"]));
    let warm1 = snapshot(&a);
    ok(run(&cfg, &["--out-dir", a.to_str().unwrap(), "pipeline"]));
    assert_eq!(warm1, snapshot(&a));
}

#[test]
fn outputs_carry_recomputable_digest() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), "");
    ok(run(&cfg, &["ingest"]));
    ok(run(&cfg, &["--seed", "9", "annotate"]));
    let out = dir.path().join("out");
    let base = Resolved::load(&cfg, &Overrides::default()).unwrap().digest;
    let reseeded = Resolved::load(&cfg, &Overrides { seed: Some(9), ..Overrides::default() }).unwrap().digest;
    assert_ne!(base, reseeded);

    let corpus = out.join("corpora/synthetic60.jsonl");
    let meta: Meta = serde_json::from_slice(&std::fs::read(meta_path(&corpus)).unwrap()).unwrap();
    assert_eq!(meta.config_digest, base);
    assert_eq!(meta.command, "ingest");
    let stats: serde_json::Value =
        serde_json::from_slice(&std::fs::read(out.join("corpora/synthetic60.stats.json")).unwrap()).unwrap();
    assert_eq!(stats["config_digest"], base.as_str());
    let summary: serde_json::Value =
        serde_json::from_slice(&std::fs::read(out.join("annotations/summary.json")).unwrap()).unwrap();
    assert_eq!(summary["config_digest"], reseeded.as_str());
    let text = std::fs::read_to_string(out.join("corpora/stats.txt")).unwrap();
    assert!(text.starts_with(&format!("# config digest {base}\n")));
}

#[test]
fn noiseless_mock_scores_perfectly() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), "[mock]\nnoise_rate = 0.0\n");
    for stage in ["ingest", "annotate"] {
        ok(run(&cfg, &[stage]));
    }
    ok(run(&cfg, &["--backend", "mock", "pipeline"]));
    let summary: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("out/evaluate/summary.json")).unwrap()).unwrap();
    let annotator: Vec<&serde_json::Value> =
        summary["cells"].as_array().unwrap().iter().filter(|c| c["source"] == "annotator").collect();
    assert_eq!(annotator.len(), 2);
    for c in annotator {
        assert_eq!(c["report"]["macro3"]["f1"].as_f64(), Some(1.0), "{}", c["test_set"]);
    }
}

#[test]
fn sensitivity_ranges_vanish_for_a_prompt_insensitive_backend() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(
        dir.path(),
        "[mock]\nnoise_rate = 0.0\n[prompt.grid]\ninstructions = [\"A\", \"B\", \"C\"]\n[sensitivity]\ncorpora = [\"synthetic60\"]\n",
    );
    ok(run(&cfg, &["ingest"]));
    ok(run(&cfg, &["sensitivity"]));
    let report: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("out/sensitivity/synthetic60.json")).unwrap()).unwrap();
    assert_eq!(report["cells"].as_array().unwrap().len(), 3);
    let axes = report["report"]["axes"].as_array().unwrap();
    assert!(!axes.is_empty());
    for a in axes {
        assert_eq!(a["range"].as_f64(), Some(0.0));
        assert_eq!(a["std"].as_f64(), Some(0.0));
    }
    assert!(dir.path().join("out/sensitivity/synthetic60.csv").is_file());
    assert!(!dir.path().join("out/sensitivity/semeval_trimmed.json").exists());
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

#[test]
fn exit_codes_by_error_family() {
    let dir = tempfile::tempdir().unwrap();

    let cfg = config(dir.path(), "unknown_key = 1\n");
    assert_eq!(code(&run(&cfg, &["ingest"])), 2);
    let cfg = config(dir.path(), "");
    assert_eq!(code(&run(&cfg, &["--backend", "nope", "ingest"])), 2);

    let cfg = config(dir.path(), "");
    let out = run(&cfg, &["evaluate"]);
    assert_eq!(code(&out), 3);
    assert!(String::from_utf8_lossy(&out.stderr).contains("ingest"));
    ok(run(&cfg, &["ingest"]));
    assert_eq!(code(&run(&cfg, &["train"])), 3);

    let bad = dir.path().join("bad.jsonl");
    std::fs::write(&bad, "{\"id\":\"1\",\"text\":\"t\",\"target\":\"x\",\"gold\":\"maybe\"}\n").unwrap();
    let cfg_bad = dir.path().join("bad.toml");
    std::fs::write(&cfg_bad, format!("[[corpus]]\nname = \"bad\"\npath = \"{}\"\n", bad.display())).unwrap();
    assert_eq!(code(&run(&cfg_bad, &["ingest"])), 4);

    let cfg = config(
        dir.path(),
        "[backends.remote]\nkind = \"chat\"\nendpoint = \"http://127.0.0.1:9/v1/chat/completions\"\nauth_env_var = \"ANNOSTANCE_TEST_MISSING_KEY\"\n",
    );
    ok(run(&cfg, &["ingest"]));
    assert_eq!(code(&run(&cfg, &["--backend", "remote", "annotate"])), 5);

    // Gold training on a corpus whose train split is empty.
    let cfg = config(dir.path(), "");
    let body = std::fs::read_to_string(&cfg).unwrap().replace("corpora = [\"synthetic60\"]", "corpora = [\"semeval_trimmed\"]").replace(
        "sources = [\"gold\", \"machine\", \"machine+mt\"]",
        "sources = [\"gold\"]",
    );
    std::fs::write(&cfg, body).unwrap();
    ok(run(&cfg, &["ingest"]));
    assert_eq!(code(&run(&cfg, &["train"])), 6);

    let blocker = dir.path().join("blocker");
    std::fs::write(&blocker, "").unwrap();
    assert_eq!(code(&run(&cfg, &["--out-dir", blocker.join("sub").to_str().unwrap(), "ingest"])), 7);
}
