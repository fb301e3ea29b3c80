mod support;

use std::io::Write;
use std::path::Path;
use std::process::{Command, Output, Stdio};

use neurorag_core::demo;
use serde_json::{json, Value};

fn neurorag(args: &[&str]) -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_neurorag"));
    c.args(args)
        .env_remove("NEURORAG_CONFIG")
        .env_remove("NEURORAG_DATA_DIR")
        .env_remove("NEURORAG_PORT")
        .env("RUST_LOG", "warn");
    c
}

fn run(args: &[&str]) -> Output {
    neurorag(args).output().unwrap()
}

fn ok_stdout(args: &[&str]) -> String {
    let out = run(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn ok_json(args: &[&str]) -> Value {
    serde_json::from_str(&ok_stdout(args)).unwrap()
}

fn stderr_json(out: &Output) -> Value {
    serde_json::from_slice(&out.stderr).unwrap_or_else(|e| panic!("{e}: {}", String::from_utf8_lossy(&out.stderr)))
}

fn write(dir: &Path, name: &str, body: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, body).unwrap();
    p.to_str().unwrap().to_string()
}

fn examples(rows: &[(&str, bool, bool)]) -> String {
    rows.iter()
        .map(|(task, label, pred)| {
            format!("{}\n", json!({ "task": task, "text": "t", "label": label, "prediction": pred }))
        })
        .collect()
}

#[test]
fn config_show_layers_file_and_environment() {
    let t = ok_stdout(&["config", "show"]);
    assert!(t.contains("gamma = 0.15"), "{t}");
    assert!(t.contains("port = 8080"));
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.toml", "port = 9100\n[retrieval]\ntop_k = 3\n");
    let v = ok_json(&["--json", "--config", &cfg, "config", "show"]);
    assert_eq!(v["retrieval"]["top_k"], 3);
    assert_eq!(v["port"], 9100);
    let out = neurorag(&["--json", "--config", &cfg, "config", "show"])
        .env("NEURORAG_PORT", "9200")
        .output()
        .unwrap();
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["port"], 9200);
    let bad = write(dir.path(), "bad.toml", "[retrieval]\ncolour = 1\n");
    assert!(!run(&["config", "show", "--config", &bad]).status.success());
}

#[test]
fn eval_perfect_scorer_scores_one() {
    let dir = tempfile::tempdir().unwrap();
    let f = write(
        dir.path(),
        "e.jsonl",
        &examples(&[("depression", true, false), ("depression", false, true), ("depression", true, true), ("depression", false, false)]),
    );
    let v = ok_json(&["--json", "eval", "--examples", &f, "--scorer", "oracle"]);
    assert_eq!(v["macro_average"]["accuracy"], 1.0);
    assert_eq!(v["macro_average"]["f1"], 1.0);
}

#[test]
fn eval_known_confusion_gives_two_thirds() {
    let dir = tempfile::tempdir().unwrap();
    let f = write(
        dir.path(),
        "e.jsonl",
        &examples(&[
            ("stress", true, true),
            ("stress", true, true),
            ("stress", false, true),
            ("stress", true, false),
            ("stress", false, false),
            ("stress", false, false),
        ]),
    );
    let v = ok_json(&["--json", "eval", "--examples", &f]);
    let t = &v["tasks"][0];
    assert_eq!(t["confusion"], json!({ "tp": 2, "fp": 1, "fn": 1, "tn": 2 }));
    for k in ["accuracy", "precision", "recall", "f1"] {
        assert_eq!(t["scores"][k].as_f64().unwrap(), 2.0 / 3.0, "{k}");
    }
    let table = ok_stdout(&["eval", "--examples", &f]);
    assert!(table.lines().next().unwrap().contains("Acc"));
    assert!(table.contains("0.6667"));
}

#[test]
fn eval_instrument_scorer_uses_task_map() {
    let dir = tempfile::tempdir().unwrap();
    let rows = [
        json!({ "task": "depression", "text": "I've been feeling really down lately", "label": true }),
        json!({ "task": "depression", "text": "The bus was late today", "label": false }),
    ];
    let f = write(dir.path(), "e.jsonl", &rows.iter().map(|r| format!("{r}\n")).collect::<String>());
    let v = ok_json(&["--json", "eval", "--examples", &f, "--scorer", "instrument", "--task", "depression=depression-9"]);
    assert_eq!(v["tasks"][0]["scores"]["accuracy"], 1.0);
    let out = run(&["--json", "eval", "--examples", &f, "--scorer", "instrument"]);
    assert_eq!(stderr_json(&out)["error"]["kind"], "usage");
}

#[test]
fn retrieve_explain_validates_against_schema() {
    let validator = support::provenance_validator();
    let mut args = vec!["retrieve", "--mode", "mar", "--explain"];
    for t in demo::VIGNETTE {
        args.extend(["--turn", t]);
    }
    let v: Value = serde_json::from_str(&ok_stdout(&args)).unwrap();
    support::assert_valid(&validator, &v);
    assert_eq!(v["ranking"][0]["document_id"], demo::TRAUMA_DOCUMENT);
    let table = ok_stdout(&["retrieve", "--text", "trouble sleeping", "--top-k", "3"]);
    assert_eq!(table.lines().count(), 4);
}

#[test]
fn json_errors_go_to_stderr() {
    let out = run(&["--json", "retrieve", "--mode", "proknow", "--text", "low mood", "--instrument", "nope"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(out.stdout.is_empty());
    assert_eq!(stderr_json(&out)["error"]["kind"], "not_found");

    let out = run(&["--json", "retrieve", "--mode", "mar"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(stderr_json(&out)["error"]["kind"], "usage");

    let out = run(&["--json", "retrieve", "--mode", "fast"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(stderr_json(&out)["error"]["kind"], "usage");

    let out = run(&["retrieve", "--mode", "mar"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
}

#[test]
fn ingest_is_deterministic_and_feeds_retrieval() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let data_s = data.to_str().unwrap();
    ok_stdout(&["init", data_s]);
    let a = ok_json(&["--json", "--data-dir", data_s, "ingest"]);
    assert_eq!(a["documents"], 20);
    assert_eq!(a["errors"], json!([]));
    let other = dir.path().join("other");
    ok_stdout(&["--data-dir", data_s, "ingest", "--out", other.to_str().unwrap()]);
    for f in ["manifest.json", "chunks.jsonl"] {
        assert_eq!(
            std::fs::read(data.join("store").join(f)).unwrap(),
            std::fs::read(other.join(f)).unwrap(),
            "{f}"
        );
    }
    let from_store = ok_stdout(&["--json", "--data-dir", data_s, "retrieve", "--text", "childhood abuse"]);
    let bundled = ok_stdout(&["--json", "retrieve", "--text", "childhood abuse"]);
    assert_eq!(from_store, bundled);

    let out = run(&["--json", "ingest"]);
    assert_eq!(stderr_json(&out)["error"]["kind"], "usage");
}

#[test]
fn train_writes_a_checkpoint_the_next_run_loads() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let data_s = data.to_str().unwrap();
    ok_stdout(&["init", data_s]);
    let triples = write(
        dir.path(),
        "t.jsonl",
        "{\"query\":\"childhood abuse\",\"positive_id\":\"childhood_abuse_disclosure#0\"}\n{\"query\":\"trouble sleeping\",\"positive_id\":\"sleep_diary_guide#0\"}\n",
    );
    let before = ok_json(&["--json", "--data-dir", data_s, "retrieve", "--text", "low mood"]);
    let v = ok_json(&["--json", "--data-dir", data_s, "train", "--triples", &triples, "--epochs", "5", "--seed", "3"]);
    assert_eq!(v["report"]["loss_curve"].as_array().unwrap().len(), 5);
    assert!(data.join("model.json").exists());
    let after = ok_json(&["--json", "--data-dir", data_s, "retrieve", "--text", "low mood"]);
    assert_eq!(after["model_checksum"], v["report"]["model_checksum"]);
    assert_ne!(after["model_checksum"], before["model_checksum"]);
    let again = ok_json(&["--json", "--data-dir", data_s, "train", "--triples", &triples, "--epochs", "5", "--seed", "3", "--out", dir.path().join("m2.json").to_str().unwrap()]);
    assert!(again["report"]["final_loss"].is_number());
}

#[test]
fn session_repl_drives_the_engine() {
    let mut child = neurorag(&["--json", "session"])
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    {
        let stdin = child.stdin.as_mut().unwrap();
        for t in demo::VIGNETTE {
            writeln!(stdin, "{t}").unwrap();
        }
        writeln!(stdin, ":retrieve proknow\n:next\n:accept\n:bogus\n:state\n:quit\nignored after quit").unwrap();
    }
    let out = child.wait_with_output().unwrap();
    assert!(out.status.success());
    let lines: Vec<Value> = String::from_utf8(out.stdout)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 8);
    assert_eq!(lines[2]["phi"]["features"].as_array().unwrap().len(), 6);
    assert_eq!(lines[3]["proknow"]["instrument_id"], "depression-9");
    assert_eq!(lines[4]["status"], "question");
    assert_eq!(lines[5]["turn"], 4);
    assert_eq!(lines[6]["error"]["kind"], "usage");
    let state = &lines[7];
    assert_eq!(state["transcript"][3]["speaker"], "clinician");
    assert_eq!(state["transcript"][3]["text"], lines[4]["text"]);
    assert_eq!(state["asked_items"]["depression-9"], json!([1]));
}
