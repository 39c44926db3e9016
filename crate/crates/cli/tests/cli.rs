use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

const FIXTURES: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/fixtures");

fn run(args: &[&str]) -> (i32, String, String) {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let code = blocklm_cli::run(std::iter::once("blocklm").chain(args.iter().copied()), &mut out, &mut err);
    (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
}

fn corpus() -> String {
    format!("{FIXTURES}/episodes.jsonl")
}

fn path(dir: &Path, name: &str) -> String {
    dir.join(name).to_string_lossy().into_owned()
}

#[test]
fn missing_required_flag_is_a_usage_error() {
    let (code, _, err) = run(&["evaluate", "--corpus", &corpus(), "--report", "/dev/null"]);
    assert_eq!(code, 1, "{err}");
    assert!(err.contains("--checkpoint"), "{err}");
}

#[test]
fn help_exits_zero() {
    let (code, out, _) = run(&["--help"]);
    assert_eq!(code, 0);
    assert!(out.contains("pretrain"));
}

#[test]
fn unknown_config_key_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let conf = path(dir.path(), "bad.conf");
    std::fs::write(&conf, "model.d_model = 16\npretrain.momentum = 0.9\n").unwrap();
    let vocab = path(dir.path(), "vocab.txt");
    assert_eq!(run(&["build-vocab", "--corpus", &corpus(), "--out", &vocab]).0, 0);
    let (code, _, err) = run(&[
        "pretrain",
        "--corpus",
        &corpus(),
        "--vocab",
        &vocab,
        "--config",
        &conf,
        "--out-checkpoint",
        &path(dir.path(), "m.ckpt"),
        "--curves",
        &path(dir.path(), "m.csv"),
    ]);
    assert_eq!(code, 2, "{err}");
    assert!(err.contains("line 2") && err.contains("pretrain.momentum"), "{err}");
}

#[test]
fn full_pipeline_writes_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let d = |n: &str| path(dir.path(), n);
    let conf = format!("{FIXTURES}/tiny.conf");
    let c = corpus();
    let [vocab, mlm, mlm_csv, ft, ft_csv, metrics] =
        ["vocab.txt", "mlm.ckpt", "mlm.csv", "ft.ckpt", "ft.csv", "metrics.csv"].map(d);
    let steps: [Vec<&str>; 4] = [
        vec!["build-vocab", "--corpus", &c, "--out", &vocab],
        vec![
            "pretrain", "--corpus", &c, "--vocab", &vocab, "--config", &conf,
            "--out-checkpoint", &mlm, "--curves", &mlm_csv,
        ],
        vec![
            "finetune", "--corpus", &c, "--init-checkpoint", &mlm, "--config", &conf,
            "--out-checkpoint", &ft, "--curves", &ft_csv,
        ],
        vec![
            "evaluate", "--corpus", &c, "--checkpoint", &ft, "--report", &metrics,
            "--name", "tiny",
        ],
    ];
    let mut last = String::new();
    for args in &steps {
        let (code, out, err) = run(args);
        assert_eq!(code, 0, "{}: {err}", args[0]);
        last = out;
    }
    assert!(last.starts_with("Model  Recall Precision F1\ntiny "), "{last}");
    let csv = std::fs::read_to_string(&metrics).unwrap();
    assert!(csv.starts_with("model,recall,precision,f1,tp,fp,fn\ntiny,"), "{csv}");
    let curves = std::fs::read_to_string(&mlm_csv).unwrap();
    assert_eq!(curves.lines().count(), 1 + 5);
    assert!(std::fs::read_to_string(d("mlm.ckpt.config")).unwrap().contains("model.d_model = 32"));
}

#[test]
fn evaluate_rejects_a_conflicting_model_shape() {
    let dir = tempfile::tempdir().unwrap();
    let d = |n: &str| path(dir.path(), n);
    let c = corpus();
    let conf = format!("{FIXTURES}/tiny.conf");
    let [vocab, ft, report] = ["vocab.txt", "ft.ckpt", "m.csv"].map(d);
    assert_eq!(run(&["build-vocab", "--corpus", &c, "--out", &vocab]).0, 0);
    let (code, _, err) = run(&[
        "finetune", "--corpus", &c, "--vocab", &vocab, "--config", &conf,
        "--finetune.max_steps", "1", "--out-checkpoint", &ft,
    ]);
    assert_eq!(code, 0, "{err}");
    let (code, _, err) = run(&[
        "evaluate", "--corpus", &c, "--checkpoint", &ft, "--report", &report,
        "--model.d_model", "64",
    ]);
    assert_eq!(code, 2, "{err}");
}

/// Folds the raw JSON actions of each gold turn over a cell map and diffs the
/// maps, without going through the grid types.
fn oracle_changes(episode_line: &str) -> Vec<BTreeSet<String>> {
    let e: serde_json::Value = serde_json::from_str(episode_line).unwrap();
    let mut world: BTreeMap<(i64, i64, i64), String> = BTreeMap::new();
    for b in e["initial_blocks"].as_array().unwrap() {
        world.insert(
            (b["x"].as_i64().unwrap(), b["y"].as_i64().unwrap(), b["z"].as_i64().unwrap()),
            b["color"].as_str().unwrap().to_string(),
        );
    }
    let mut changes = Vec::new();
    for turn in e["gold_turns"].as_array().unwrap() {
        let before = world.clone();
        for a in turn["actions"].as_array().unwrap() {
            let cell = (a["x"].as_i64().unwrap(), a["y"].as_i64().unwrap(), a["z"].as_i64().unwrap());
            match a["type"].as_str().unwrap() {
                "place" => {
                    world.insert(cell, a["color"].as_str().unwrap().to_string());
                }
                "remove" => {
                    world.remove(&cell);
                }
                other => panic!("action type {other}"),
            }
        }
        let mut set = BTreeSet::new();
        for (c, k) in &before {
            if world.get(c) != Some(k) {
                set.insert(format!("- {k} ({},{},{})", c.0, c.1, c.2));
            }
        }
        for (c, k) in &world {
            if before.get(c) != Some(k) {
                set.insert(format!("+ {k} ({},{},{})", c.0, c.1, c.2));
            }
        }
        changes.push(set);
    }
    changes
}

#[test]
fn replay_net_changes_match_an_independent_diff() {
    let text = std::fs::read_to_string(corpus()).unwrap();
    for line in text.lines().take(6) {
        let id = serde_json::from_str::<serde_json::Value>(line).unwrap()["id"].as_str().unwrap().to_string();
        let (code, out, err) = run(&["replay", "--corpus", &corpus(), "--episode", &id, "--grid", "5x3x5"]);
        assert_eq!(code, 0, "{err}");
        let mut printed: Vec<BTreeSet<String>> = Vec::new();
        let mut in_change = false;
        for l in out.lines() {
            if l == "net change:" {
                printed.push(BTreeSet::new());
                in_change = true;
            } else if in_change && l.starts_with("  ") {
                printed.last_mut().unwrap().insert(l.trim().to_string());
            } else {
                in_change = false;
            }
        }
        assert_eq!(printed, oracle_changes(line), "episode {id}");
    }
}

#[test]
fn replay_of_an_unknown_episode_fails() {
    let (code, _, err) = run(&["replay", "--corpus", &corpus(), "--episode", "nope", "--grid", "5x3x5"]);
    assert_eq!(code, 2, "{err}");
}
