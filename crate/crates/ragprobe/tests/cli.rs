// SPDX-License-Identifier: MIT OR Apache-2.0

//! Command-line behavior: exit codes, configuration layering, and the run
//! manifest's prompt accounting.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use ragprobe::dataset::{load_contexts, save_contexts};

fn crate_dir() -> &'static Path {
    Path::new(env!("CARGO_MANIFEST_DIR"))
}

fn fixtures_dir() -> PathBuf {
    crate_dir().join("fixtures")
}

/// Run the binary from the crate root (fixture-relative paths resolve).
fn ragprobe(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ragprobe"))
        .args(args)
        .current_dir(crate_dir())
        .output()
        .expect("spawn the CLI")
}

fn code(output: &Output) -> i32 {
    output.status.code().unwrap_or(-1)
}

fn stdout(output: &Output) -> String {
    String::from_utf8_lossy(&output.stdout).into_owned()
}

fn stderr(output: &Output) -> String {
    String::from_utf8_lossy(&output.stderr).into_owned()
}

fn manifest(dir: &Path) -> serde_json::Value {
    let text = std::fs::read_to_string(dir.join("manifest.json")).unwrap();
    serde_json::from_str(&text).unwrap()
}

// ======================================================================
// Exit codes
// ======================================================================

#[test]
fn help_and_version_exit_zero() {
    for args in [&["--help"][..], &["--version"][..], &["trace", "--help"][..]] {
        let out = ragprobe(args);
        assert_eq!(code(&out), 0, "{args:?}: {}", stderr(&out));
    }
    assert!(stdout(&ragprobe(&["--help"])).contains("trace"));
}

#[test]
fn argument_and_configuration_errors_exit_two() {
    // Unknown flag: rejected by the parser.
    let out = ragprobe(&["trace", "--frobnicate"]);
    assert_eq!(code(&out), 2, "{}", stderr(&out));

    // Structurally valid invocation missing a required input.
    let out = ragprobe(&["trace"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("--model"), "{}", stderr(&out));

    // Config file that does not exist.
    let out = ragprobe(&["trace", "--config", "/nonexistent/run.conf"]);
    assert_eq!(code(&out), 2);

    // Config file with an unknown key, reported with its line number.
    let tmp = tempfile::tempdir().unwrap();
    let conf = tmp.path().join("bad.conf");
    std::fs::write(&conf, "model = builtin:copy-task\nmystery = 1\n").unwrap();
    let out = ragprobe(&["trace", "--config", conf.to_str().unwrap()]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("line 2"), "{}", stderr(&out));
}

#[test]
fn invalid_contexts_fail_validation_with_exit_one() {
    let tmp = tempfile::tempdir().unwrap();
    let mut contexts = load_contexts(&fixtures_dir().join("toy_contexts.json")).unwrap();
    let object = contexts[0].object.clone();
    contexts[0].response[3].push_str(&format!(" The {object} years stayed with her."));
    let doctored = tmp.path().join("doctored.json");
    save_contexts(&doctored, &contexts).unwrap();

    let out = ragprobe(&[
        "dataset",
        "validate",
        "--facts",
        "fixtures/known_facts.json",
        "--contexts",
        doctored.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 1);
    let report = stdout(&out);
    assert!(report.contains("INVALID [object_count=2]"), "{report}");
    assert!(report.contains(&format!("valid: {}/{}", contexts.len() - 1, contexts.len())));
}

// ======================================================================
// Configuration layering
// ======================================================================

#[test]
fn flags_override_config_file_values() {
    let tmp = tempfile::tempdir().unwrap();
    let conf = tmp.path().join("run.conf");
    std::fs::write(
        &conf,
        format!(
            "model = builtin:copy-task\n\
             facts = {}\n\
             contexts = {}\n\
             scenario = rag\n\
             seed = 1\n\
             noise = 8\n\
             out = {}\n",
            fixtures_dir().join("known_facts.json").display(),
            fixtures_dir().join("toy_contexts.json").display(),
            tmp.path().join("from_file").display(),
        ),
    )
    .unwrap();

    let out_dir = tmp.path().join("from_flag");
    let out = ragprobe(&[
        "trace",
        "--config",
        conf.to_str().unwrap(),
        "--seed",
        "45",
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(!tmp.path().join("from_file").exists(), "config-file out was not overridden");

    let m = manifest(&out_dir);
    assert_eq!(m["config"]["seed"], "45", "flag seed should win over the file's");
    assert_eq!(m["config"]["noise"], "8", "file noise should survive un-overridden");
    assert_eq!(m["config"]["scenario"], "rag");
    assert_eq!(m["version"], env!("CARGO_PKG_VERSION"));
}

#[test]
fn bundled_demo_config_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let out_dir = tmp.path().join("demo");
    let out = ragprobe(&[
        "knockout",
        "--config",
        "fixtures/demo.conf",
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(out_dir.join("knockout_rag_w1.csv").exists());
    assert!(stdout(&out).contains("max drop"), "{}", stdout(&out));
}

// ======================================================================
// Manifest accounting
// ======================================================================

#[test]
fn manifest_accounts_for_every_prompt() {
    let tmp = tempfile::tempdir().unwrap();
    let out_dir = tmp.path().join("full");
    let out = ragprobe(&[
        "trace",
        "--model",
        "builtin:copy-task",
        "--facts",
        "fixtures/known_facts.json",
        "--contexts",
        "fixtures/toy_contexts.json",
        "--scenario",
        "both",
        "--seed",
        "45",
        "--noise",
        "8",
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));

    let m = manifest(&out_dir);
    let prompts = m["prompts"].as_array().unwrap();
    // 4 records x {vanilla, rag}, each accounted exactly once.
    assert_eq!(prompts.len(), 8);
    let mut seen = std::collections::BTreeSet::new();
    for p in prompts {
        assert_eq!(p["status"], "ok", "{p}");
        assert!(seen.insert((
            p["known_id"].as_u64().unwrap(),
            p["scenario"].as_str().unwrap().to_string()
        )));
    }
    let stages: Vec<&str> = m["stages"]
        .as_array()
        .unwrap()
        .iter()
        .map(|s| s["name"].as_str().unwrap())
        .collect();
    assert_eq!(stages, ["load", "build", "trace", "write"]);

    // Sampling shrinks the accounting to exactly the sampled records.
    let sampled_dir = tmp.path().join("sampled");
    let out = ragprobe(&[
        "knockout",
        "--model",
        "builtin:copy-task",
        "--facts",
        "fixtures/known_facts.json",
        "--contexts",
        "fixtures/toy_contexts.json",
        "--scenario",
        "both",
        "--sample",
        "2",
        "--seed",
        "45",
        "--window",
        "1",
        "--out",
        sampled_dir.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let m = manifest(&sampled_dir);
    assert_eq!(m["prompts"].as_array().unwrap().len(), 4);
    assert_eq!(m["config"]["sample"], "2");
}

#[test]
fn factless_rag_prompts_are_skipped_with_reasons() {
    let tmp = tempfile::tempdir().unwrap();
    let out_dir = tmp.path().join("skipped");
    // These facts have no matching context records, so every rag prompt must
    // be skipped — and still accounted for.
    let out = ragprobe(&[
        "trace",
        "--model",
        "builtin:copy-task",
        "--facts",
        "fixtures/vanilla_facts.json",
        "--contexts",
        "fixtures/toy_contexts.json",
        "--scenario",
        "rag",
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(stdout(&out).contains("no traceable prompts"));

    let m = manifest(&out_dir);
    let prompts = m["prompts"].as_array().unwrap();
    assert_eq!(prompts.len(), 4);
    for p in prompts {
        assert_eq!(p["status"], "skipped");
        assert_eq!(p["reason"], "no context record for this known_id");
    }
    // The per-cell CSV still exists, holding only its header.
    let cells = std::fs::read_to_string(out_dir.join("trace_rag.csv")).unwrap();
    assert_eq!(cells.lines().count(), 1);
}

// ======================================================================
// Generation failures
// ======================================================================

#[test]
fn exhausted_generation_reports_failures_and_exits_one() {
    let tmp = tempfile::tempdir().unwrap();

    // Rebuild the bundled reply fixture so record 14 only ever gets its
    // invalid first reply, while the other records keep their good ones.
    let text = std::fs::read_to_string(fixtures_dir().join("chat_replies.json")).unwrap();
    let mut replies: BTreeMap<String, Vec<String>> = serde_json::from_str(&text).unwrap();
    let bad = replies["14"][0].clone();
    replies.insert("14".to_string(), vec![bad.clone(), bad]);
    for tag in ["21", "22", "23"] {
        let last = replies[tag].last().unwrap().clone();
        replies.insert(tag.to_string(), vec![last]);
    }
    let replies_path = tmp.path().join("replies.json");
    std::fs::write(&replies_path, serde_json::to_string_pretty(&replies).unwrap()).unwrap();

    let contexts_path = tmp.path().join("generated.json");
    let out_dir = tmp.path().join("run");
    let out = ragprobe(&[
        "dataset",
        "generate",
        "--facts",
        "fixtures/known_facts.json",
        "--fixtures",
        replies_path.to_str().unwrap(),
        "--contexts",
        contexts_path.to_str().unwrap(),
        "--attempts",
        "2",
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 1, "{}", stderr(&out));
    assert!(stdout(&out).contains("generated 3/4"), "{}", stdout(&out));
    assert!(stderr(&out).contains("record 14"), "{}", stderr(&out));

    let generated = load_contexts(&contexts_path).unwrap();
    let indices: Vec<u64> = generated.iter().map(|c| c.index).collect();
    assert_eq!(indices, [21, 22, 23]);

    let m = manifest(&out_dir);
    let (mut ok, mut skipped) = (0, 0);
    for p in m["prompts"].as_array().unwrap() {
        match p["status"].as_str().unwrap() {
            "ok" => ok += 1,
            "skipped" => {
                skipped += 1;
                assert_eq!(p["known_id"], 14);
                assert!(
                    p["reason"].as_str().unwrap().contains("after 2 attempts"),
                    "{p}"
                );
            }
            other => panic!("unexpected status {other}"),
        }
    }
    assert_eq!((ok, skipped), (3, 1));
}
