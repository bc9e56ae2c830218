use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn data(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../data")
        .join(name)
}

fn qcoder(args: &[&str]) -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_qcoder"));
    cmd.args(args);
    for var in [
        "QCODER_ENDPOINT",
        "QCODER_API_KEY",
        "QCODER_MODEL",
        "QCODER_BACKEND",
        "QCODER_SEED",
        "QCODER_WORKERS",
        "QCODER_PYTHON",
    ] {
        cmd.env_remove(var);
    }
    cmd
}

fn run(cmd: &mut Command) -> Output {
    cmd.output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn manifest(dir: &Path) -> serde_json::Value {
    serde_json::from_slice(&fs::read(dir.join("manifest.json")).unwrap()).unwrap()
}

fn snapshot(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.clone(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

#[test]
fn version_and_usage_errors() {
    let out = run(&mut qcoder(&["--version"]));
    assert_eq!(code(&out), 0);
    assert!(stdout(&out).starts_with("qcoder "));
    assert_eq!(code(&run(&mut qcoder(&["eval", "--no-such-flag"]))), 2);
    assert_eq!(code(&run(&mut qcoder(&[]))), 2);
    let tmp = tempfile::tempdir().unwrap();
    let missing =
        run(&mut qcoder(&["eval", "--tasks", "missing.jsonl", "--out"]).arg(tmp.path().join("r")));
    assert_eq!(code(&missing), 2);
}

#[test]
fn eval_writes_run_dir_and_report_is_read_only() {
    let tmp = tempfile::tempdir().unwrap();
    let run_dir = tmp.path().join("run");
    let out = run(
        qcoder(&["eval", "--temperature", "0", "--seed", "4", "--tasks"])
            .arg(data("stub_tasks.jsonl"))
            .arg("--out")
            .arg(&run_dir),
    );
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(stdout(&out).contains("Accuracy (%)"));
    for f in [
        "manifest.json",
        "report.json",
        "report.txt",
        "report.csv",
        "results.jsonl",
        "cell.json",
    ] {
        assert!(run_dir.join(f).exists(), "{f} missing");
    }
    let m = manifest(&run_dir);
    assert_eq!(m["state"], "complete");
    assert_eq!(m["command"], "eval");
    assert_eq!(m["seeds"]["seed"], 4);
    assert!(m["ended_at"].is_string());

    let before = snapshot(&run_dir);
    for format in ["text-table", "json", "csv"] {
        let out = run(qcoder(&["report", "--format", format, "--run"]).arg(&run_dir));
        assert_eq!(code(&out), 0);
        assert!(!stdout(&out).is_empty());
    }
    let text = run(qcoder(&["report", "--run"]).arg(&run_dir));
    assert_eq!(
        stdout(&text),
        fs::read_to_string(run_dir.join("report.txt")).unwrap()
    );
    assert_eq!(
        snapshot(&run_dir),
        before,
        "report must not touch the run directory"
    );

    // Rerunning a finished run reuses it and leaves the manifest frozen.
    let again = run(
        qcoder(&["eval", "--temperature", "0", "--seed", "4", "--tasks"])
            .arg(data("stub_tasks.jsonl"))
            .arg("--out")
            .arg(&run_dir),
    );
    assert_eq!(code(&again), 0);
    assert_eq!(snapshot(&run_dir), before);
}

#[test]
fn grid_resume_matches_uninterrupted_run() {
    let tmp = tempfile::tempdir().unwrap();
    let full = tmp.path().join("full");
    let resumed = tmp.path().join("resumed");
    let grid = |out: &Path, extra: &[&str]| {
        let mut cmd = qcoder(&["grid", "--n", "3", "--k", "1,3", "--tasks"]);
        cmd.arg(data("stub_tasks.jsonl"))
            .arg("--out")
            .arg(out)
            .args(extra);
        run(&mut cmd)
    };
    assert_eq!(code(&grid(&full, &[])), 0);
    let stopped = grid(&resumed, &["--stop-after", "10"]);
    assert_eq!(code(&stopped), 3);
    assert_eq!(manifest(&resumed)["state"], "interrupted");
    assert!(!resumed.join("report.json").exists());
    let report = run(qcoder(&["report", "--run"]).arg(&resumed));
    assert_eq!(code(&report), 2, "no final report for an unfinished run");
    assert_eq!(code(&grid(&resumed, &[])), 0);
    assert_eq!(
        fs::read(full.join("report.json")).unwrap(),
        fs::read(resumed.join("report.json")).unwrap()
    );
    let m = manifest(&resumed);
    assert_eq!(m["state"], "complete");
    assert_eq!(m["resumed_at"].as_array().unwrap().len(), 1);
    assert_eq!(fs::read_dir(resumed.join("cells")).unwrap().count(), 9);
}

#[test]
fn precedence_is_flag_then_config_then_env() {
    let tmp = tempfile::tempdir().unwrap();
    let config = tmp.path().join("run.toml");
    fs::write(&config, "n = 2\nk = [1, 2]\nseed = 11\ntemperature = 1.0\n").unwrap();
    let run_dir = tmp.path().join("run");
    let out = run(qcoder(&["--config"])
        .arg(&config)
        .args(["eval", "--temperature", "0", "--tasks"])
        .arg(data("stub_tasks.jsonl"))
        .arg("--out")
        .arg(&run_dir)
        .env("QCODER_SEED", "99")
        .env("QCODER_WORKERS", "1")
        .env("QCODER_API_KEY", "do-not-store"));
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let m = manifest(&run_dir);
    let s = &m["settings"];
    assert_eq!(
        (
            s["temperature"]["value"].as_f64(),
            s["temperature"]["source"].as_str()
        ),
        (Some(0.0), Some("flag"))
    );
    assert_eq!(
        (s["seed"]["value"].as_u64(), s["seed"]["source"].as_str()),
        (Some(11), Some("config"))
    );
    assert_eq!(
        (s["n"]["value"].as_u64(), s["n"]["source"].as_str()),
        (Some(2), Some("config"))
    );
    assert_eq!(
        (
            s["workers"]["value"].as_u64(),
            s["workers"]["source"].as_str()
        ),
        (Some(1), Some("env"))
    );
    assert_eq!(s["top_p"]["source"], "default");
    let raw = fs::read_to_string(run_dir.join("manifest.json")).unwrap();
    assert!(!raw.contains("do-not-store"));
    assert_eq!(m["environment"]["QCODER_API_KEY"], "<redacted>");

    fs::write(&config, "temprature = 1.0\n").unwrap();
    let bad = run(qcoder(&["--config"])
        .arg(&config)
        .arg("report")
        .args(["--counts", "a=1/1"]));
    assert_eq!(code(&bad), 2);
}

#[test]
fn unreachable_remote_is_an_infrastructure_failure() {
    let tmp = tempfile::tempdir().unwrap();
    let run_dir = tmp.path().join("run");
    let out = run(qcoder(&[
        "eval",
        "--backend",
        "remote",
        "--max-attempts",
        "1",
        "--tasks",
    ])
    .arg(data("stub_tasks.jsonl"))
    .arg("--out")
    .arg(&run_dir)
    .env("QCODER_ENDPOINT", "http://127.0.0.1:9/generate"));
    assert_eq!(code(&out), 3);
    assert!(!run_dir.join("report.json").exists());
    assert_eq!(manifest(&run_dir)["state"], "failed");
}

#[test]
fn ingest_reports_rejects_with_exit_one() {
    let tmp = tempfile::tempdir().unwrap();
    let clean = run(qcoder(&["ingest", "--in"])
        .arg(data("sample_corpus.jsonl"))
        .arg("--report")
        .arg(tmp.path().join("stats.json")));
    assert_eq!(code(&clean), 0);
    let stats: serde_json::Value =
        serde_json::from_slice(&fs::read(tmp.path().join("stats.json")).unwrap()).unwrap();
    assert_eq!(stats["stats"]["total"], 23);

    let bad = tmp.path().join("bad.jsonl");
    fs::write(
        &bad,
        "{\"instruction\": \"x\", \"code\": \"y\"}\n{\"instruction\": \"\", \"code\": \"z\"}\n",
    )
    .unwrap();
    let out = run(qcoder(&["ingest", "--in"]).arg(&bad));
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 2"));
}

#[test]
fn index_query_and_retrieval_augmented_ask() {
    let tmp = tempfile::tempdir().unwrap();
    let idx = tmp.path().join("idx");
    let out = run(qcoder(&["index", "--corpus"])
        .arg(data("sample_corpus.jsonl"))
        .arg("--out")
        .arg(&idx));
    assert_eq!(code(&out), 0);
    assert_eq!(manifest(&idx)["state"], "complete");
    let again = run(qcoder(&["index", "--corpus"])
        .arg(data("sample_corpus.jsonl"))
        .arg("--out")
        .arg(&idx));
    assert_eq!(code(&again), 2, "index directories are never reused");

    let hits = run(qcoder(&[
        "query",
        "--json",
        "--k",
        "2",
        "--text",
        "Prepare a Bell state",
        "--index",
    ])
    .arg(&idx));
    let hits: serde_json::Value = serde_json::from_slice(&hits.stdout).unwrap();
    assert_eq!(hits.as_array().unwrap().len(), 2);
    assert_eq!(hits[0]["sample_id"], "bell-001");

    let ask_dir = tmp.path().join("ask");
    let prompt = "Return the 2x2 Hadamard matrix as nested lists of floats from a function hadamard_matrix().";
    let out = run(qcoder(&[
        "ask",
        "--rag",
        "--k",
        "2",
        "--temperature",
        "0",
        "--prompt",
        prompt,
        "--index",
    ])
    .arg(&idx)
    .arg("--out")
    .arg(&ask_dir));
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let req: serde_json::Value =
        serde_json::from_slice(&fs::read(ask_dir.join("request.json")).unwrap()).unwrap();
    let ctx: serde_json::Value =
        serde_json::from_slice(&fs::read(ask_dir.join("context.json")).unwrap()).unwrap();
    let included = ctx["included_ids"].as_array().unwrap();
    assert!(!included.is_empty() && included.len() <= 2);
    assert_eq!(req["prompt"], ctx["text"]);
    assert!(req["prompt"].as_str().unwrap().contains(prompt));
    assert!(ask_dir.join("completions.json").exists());
}

#[test]
fn train_toy_then_ask() {
    let tmp = tempfile::tempdir().unwrap();
    let ckpt = tmp.path().join("toy");
    let out = run(qcoder(&["train-toy", "--updates", "20", "--out"]).arg(&ckpt));
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    for f in [
        "manifest.json",
        "model.json",
        "adapters/manifest.json",
        "train_log.jsonl",
        "summary.json",
    ] {
        assert!(ckpt.join(f).exists(), "{f} missing");
    }
    assert_eq!(
        fs::read_to_string(ckpt.join("train_log.jsonl"))
            .unwrap()
            .lines()
            .count(),
        20
    );
    let out = run(qcoder(&[
        "ask",
        "--backend",
        "toy",
        "--prompt",
        "apply H 1",
        "--n",
        "2",
        "--checkpoint",
    ])
    .arg(&ckpt));
    assert_eq!(code(&out), 0);
    assert_eq!(stdout(&out).matches("--- completion").count(), 2);
    let missing = run(&mut qcoder(&["ask", "--backend", "toy", "--prompt", "x"]));
    assert_eq!(code(&missing), 2);
}

#[test]
fn report_compares_recorded_counts() {
    let out = run(&mut qcoder(&[
        "report",
        "--counts",
        "tuned=117/147",
        "--counts",
        "base=89/175",
        "--format",
        "csv",
    ]));
    assert_eq!(code(&out), 0);
    let text = stdout(&out);
    assert!(text.contains("tuned,117,147,44.32"), "{text}");
    assert!(text.contains("base,89,175,33.71"), "{text}");
    assert_eq!(code(&run(&mut qcoder(&["report", "--counts", "oops"]))), 2);
}
