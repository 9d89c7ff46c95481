use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use composer_core::dataset::save_clips;
use composer_core::{load_dataset, split_train_test, TrainConfig, KEYS};
use serde_json::Value;

fn composer(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_composer"))
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "info")
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "status {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn repo_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

/// Synthetic data in `dir/data/clips.ndjson`.
fn synth(dir: &Path, extra: &[&str]) -> PathBuf {
    let mut args = vec!["synth-gen", "--out", "data/clips.ndjson"];
    args.extend_from_slice(extra);
    ok(&composer(&args, dir));
    dir.join("data/clips.ndjson")
}

fn train(dir: &Path, out: &str, extra: &[&str]) -> Output {
    let mut args = vec!["train", "--data", "data/clips.ndjson", "--out", out, "--ablate", "train.epochs=2"];
    args.extend_from_slice(extra);
    composer(&args, dir)
}

#[test]
fn help_lists_every_config_key() {
    let dir = tempfile::tempdir().unwrap();
    let help = ok(&composer(&["--help"], dir.path()));
    for (k, _) in KEYS {
        assert!(help.contains(k), "help is missing {k}");
    }
    for cmd in ["train", "eval", "export-attention", "gradcheck", "synth-gen"] {
        assert!(help.contains(cmd), "help is missing {cmd}");
    }
}

#[test]
fn shipped_configs_match_the_presets() {
    let root = repo_root();
    assert_eq!(TrainConfig::load(&root.join("configs/desk.cfg")).unwrap(), TrainConfig::desk());
    assert_eq!(TrainConfig::load(&root.join("configs/paper.cfg")).unwrap(), TrainConfig::paper());
}

#[test]
fn missing_config_key_exits_2_naming_it() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), &["--n-clips", "8"]);
    let text: String = TrainConfig::desk()
        .to_text()
        .lines()
        .filter(|l| !l.starts_with("cluster.tau"))
        .map(|l| format!("{l}\n"))
        .collect();
    std::fs::write(dir.path().join("bad.cfg"), text).unwrap();
    let out = train(dir.path(), "run", &["--config", "bad.cfg"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("cluster.tau"), "{}", stderr(&out));
}

#[test]
fn bad_override_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), &["--n-clips", "8"]);
    let out = train(dir.path(), "run", &["--ablate", "no_such_key=1"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("no_such_key"));
}

#[test]
fn one_scale_ablation_logs_keypoint_tokens_only() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), &["--n-clips", "8"]);
    let out = train(dir.path(), "run", &["--ablate", "num_scales=1", "--ablate", "train.epochs=1"]);
    ok(&out);
    // [CLS], the ball, 5 persons x 17 keypoints
    assert!(stderr(&out).contains("tokens per scale: 87\n"), "{}", stderr(&out));
    let full = train(dir.path(), "run4", &["--ablate", "train.epochs=1"]);
    ok(&full);
    assert!(stderr(&full).contains("tokens per scale: 87,7,22,4\n"));
}

#[test]
fn deterministic_runs_write_identical_files() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), &["--n-clips", "24"]);
    for run in ["a", "b"] {
        ok(&train(dir.path(), run, &["--deterministic", "--seed", "3"]));
    }
    for f in ["metrics.csv", "summary.json", "config.cfg", "checkpoint/params.bin"] {
        let a = std::fs::read(dir.path().join("a").join(f)).unwrap();
        let b = std::fs::read(dir.path().join("b").join(f)).unwrap();
        assert_eq!(a, b, "{f} differs");
    }
    let cfg = std::fs::read_to_string(dir.path().join("a/config.cfg")).unwrap();
    assert!(cfg.contains("train.seed = 3"));
}

fn skeleton_matches(golden: &Value, v: &Value) -> bool {
    match golden {
        Value::String(kinds) => kinds.split('|').any(|k| match k {
            "number" => v.is_number(),
            "integer" => v.is_u64(),
            "string" => v.is_string(),
            "null" => v.is_null(),
            _ => false,
        }),
        Value::Array(g) => v.as_array().is_some_and(|items| items.iter().all(|x| skeleton_matches(&g[0], x))),
        Value::Object(g) => v.as_object().is_some_and(|o| {
            o.len() == g.len() && g.iter().all(|(k, gv)| o.get(k).is_some_and(|x| skeleton_matches(gv, x)))
        }),
        _ => false,
    }
}

#[test]
fn eval_matches_in_memory_report_and_golden_schema() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), &["--n-clips", "20"]);
    ok(&train(dir.path(), "run", &[]));
    let (clips, _) = load_dataset(&data).unwrap();
    let (_, holdout) = split_train_test(clips, 5);
    save_clips(&dir.path().join("data/holdout.ndjson"), &holdout).unwrap();

    let out = ok(&composer(
        &["eval", "--checkpoint", "run/checkpoint", "--data", "data/holdout.ndjson"],
        dir.path(),
    ));
    let got: Value = serde_json::from_str(&out).unwrap();
    let golden: Value =
        serde_json::from_str(&std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden/eval_schema.json")).unwrap())
            .unwrap();
    assert!(skeleton_matches(&golden, &got), "{out}");

    let summary: Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("run/summary.json")).unwrap()).unwrap();
    let mem = &summary["holdout"];
    for k in ["accuracy", "confusion", "person_accuracy", "num_clips"] {
        assert_eq!(got[k], mem[k], "{k}");
    }
}

#[test]
fn malformed_checkpoint_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), &["--n-clips", "8"]);
    ok(&train(dir.path(), "run", &["--ablate", "train.epochs=1"]));
    let m = dir.path().join("run/checkpoint/manifest.json");
    let text = std::fs::read_to_string(&m).unwrap();
    std::fs::write(&m, &text[..text.len() / 2]).unwrap();
    let out = composer(&["eval", "--checkpoint", "run/checkpoint", "--data", "data/clips.ndjson"], dir.path());
    assert_eq!(out.status.code(), Some(3), "{}", stderr(&out));
    let out = composer(&["eval", "--checkpoint", "nowhere", "--data", "data/clips.ndjson"], dir.path());
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn attention_export_for_volleyball_sized_clips() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), &["--n-clips", "4", "--persons", "12", "--width", "4000"]);
    ok(&train(dir.path(), "run", &["--ablate", "train.epochs=1", "--holdout-every", "0"]));
    let args = ["export-attention", "--checkpoint", "run/checkpoint", "--data", "data/clips.ndjson"];
    let mut missing = args.to_vec();
    missing.extend(["--clip-id", "nope", "--out", "a.json"]);
    assert_eq!(composer(&missing, dir.path()).status.code(), Some(4));

    let mut good = args.to_vec();
    good.extend(["--clip-id", "synth-00002", "--out", "a.json"]);
    ok(&composer(&good, dir.path()));
    let v: Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("a.json")).unwrap()).unwrap();
    assert_eq!(v["clip_id"], "synth-00002");
    let maps = v["maps"].as_array().unwrap();
    assert_eq!(maps.len(), 8);
    for m in maps {
        let n = [206, 14, 134, 4][m["scale"].as_u64().unwrap() as usize];
        assert_eq!(m["tokens"].as_array().unwrap().len(), n);
        let rows = m["weights"].as_array().unwrap();
        assert_eq!(rows.len(), n);
        for r in rows {
            let r = r.as_array().unwrap();
            assert_eq!(r.len(), n);
            let s: f64 = r.iter().map(|x| x.as_f64().unwrap()).sum();
            assert!((s - 1.0).abs() <= 1e-6);
        }
    }
}

#[test]
fn gradcheck_passes_on_desk_preset_and_fails_at_zero_tolerance() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(&composer(&["gradcheck", "--coords", "60"], dir.path()));
    assert!(out.contains("worst coordinates:"));
    let rows = out.lines().skip_while(|l| !l.starts_with("worst")).skip(2).count();
    assert_eq!(rows, 10);

    let fail = composer(&["gradcheck", "--coords", "20", "--tol", "0"], dir.path());
    assert_eq!(fail.status.code(), Some(1));
    assert!(stderr(&fail).contains("gradient check failed"));
}

#[test]
fn synth_gen_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    for name in ["a", "b"] {
        let out = format!("{name}/clips.ndjson");
        ok(&composer(&["synth-gen", "--out", &out, "--n-clips", "12", "--noise-px", "0", "--seed", "5"], dir.path()));
    }
    for f in ["clips.ndjson", "manifest.json"] {
        assert_eq!(
            std::fs::read(dir.path().join("a").join(f)).unwrap(),
            std::fs::read(dir.path().join("b").join(f)).unwrap()
        );
    }
    let out = composer(&["synth-gen", "--out", "c/clips.ndjson", "--persons", "1"], dir.path());
    assert_eq!(out.status.code(), Some(2));
}
