//! End-to-end pipeline tests through the CLI binary: gen-data -> train ->
//! eval, exit-code contracts, ablation history shapes, and reproducibility.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn did() -> Command {
    Command::new(env!("CARGO_BIN_EXE_did"))
}

fn run_ok(cmd: &mut Command) -> Output {
    let out = cmd.output().expect("spawn did");
    assert!(
        out.status.success(),
        "command failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn exit_code(cmd: &mut Command) -> i32 {
    cmd.output().expect("spawn did").status.code().unwrap_or(-1)
}

fn write_config(dir: &Path, name: &str, body: &str) -> std::path::PathBuf {
    let path = dir.join(name);
    fs::write(&path, body).unwrap();
    path
}

/// Small but real config: 3 domains, 96 images, two epochs.
fn small_config(dir: &Path) -> String {
    format!(
        r#"{{
  "defaults_from": "paper-iv-a",
  "seed": 5,
  "synthetic": {{ "image_size": 32, "k": 2, "samples_per_domain": 32 }},
  "backbone": {{ "input_size": 32, "channel_widths": [8, 8] }},
  "data": {{ "train_manifest": "{dir}/data/manifest.jsonl", "holdout_domain": 2 }},
  "training": {{ "base_lr": 0.001, "batch_size": 12, "max_epochs": 2,
                 "iterations_per_epoch": 4 }}
}}"#,
        dir = dir.display()
    )
}

#[test]
fn full_pipeline_gen_train_eval() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let config = write_config(dir, "c.json", &small_config(dir));

    let out = run_ok(did()
        .arg("gen-data")
        .arg("--config")
        .arg(&config)
        .arg("--out")
        .arg(dir.join("data")));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("manifest:"), "gen-data must print the manifest path");
    assert!(stdout.contains("total: 96 samples"), "got: {stdout}");

    let run_dir = dir.join("run");
    run_ok(did()
        .arg("train")
        .arg("--config")
        .arg(&config)
        .arg("--out")
        .arg(&run_dir));
    assert!(run_dir.join("checkpoint.didc").is_file());
    assert!(run_dir.join("history.json").is_file());
    assert!(run_dir.join("resolved_config.json").is_file());
    assert!(run_dir.join("train_split.jsonl").is_file());
    assert!(run_dir.join("test_split.jsonl").is_file());

    let history: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(run_dir.join("history.json")).unwrap()).unwrap();
    assert_eq!(history.as_array().unwrap().len(), 2, "one record per epoch");
    let first = &history.as_array().unwrap()[0];
    for key in ["l_auc", "l_bce", "l_cls", "l_dom", "mi_estimate", "l_total", "beta"] {
        assert!(first.get(key).is_some(), "history missing {key}");
    }

    let eval_dir = dir.join("eval");
    let out = run_ok(did()
        .arg("eval")
        .arg("--checkpoint")
        .arg(run_dir.join("checkpoint.didc"))
        .arg("--manifest")
        .arg(run_dir.join("test_split.jsonl"))
        .arg("--out")
        .arg(&eval_dir)
        .arg("--export-maps")
        .arg("--export-embeddings"));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("auc"), "eval must print the AUC");
    assert!(eval_dir.join("metrics.json").is_file());
    assert!(eval_dir.join("roc.csv").is_file());
    assert!(eval_dir.join("embeddings.csv").is_file());
    let maps = fs::read_dir(eval_dir.join("attention")).unwrap().count();
    // test split: 13 reals (tail 20%) + 32 held-out fakes, 3 files each.
    assert_eq!(maps, 3 * (7 + 32));

    let metrics: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(eval_dir.join("metrics.json")).unwrap()).unwrap();
    let auc = metrics["auc"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&auc));
    let roc = fs::read_to_string(eval_dir.join("roc.csv")).unwrap();
    assert!(roc.starts_with("threshold,fpr,tpr\n"));
}

#[test]
fn gen_data_is_deterministic_across_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let config = write_config(
        dir,
        "c.json",
        r#"{ "synthetic": { "image_size": 32, "k": 1, "samples_per_domain": 4 } }"#,
    );
    for out in ["a", "b"] {
        run_ok(did()
            .arg("gen-data")
            .arg("--config")
            .arg(&config)
            .arg("--seed")
            .arg("7")
            .arg("--out")
            .arg(dir.join(out)));
    }
    let mut checked = 0;
    for entry in fs::read_dir(dir.join("a").join("images")).unwrap() {
        let name = entry.unwrap().file_name();
        let a = fs::read(dir.join("a").join("images").join(&name)).unwrap();
        let b = fs::read(dir.join("b").join("images").join(&name)).unwrap();
        assert_eq!(a, b, "checksum mismatch for {name:?}");
        checked += 1;
    }
    assert_eq!(checked, 8);
}

#[test]
fn train_is_reproducible_from_resolved_config() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let config = write_config(dir, "c.json", &small_config(dir));
    run_ok(did()
        .arg("gen-data")
        .arg("--config")
        .arg(&config)
        .arg("--out")
        .arg(dir.join("data")));
    run_ok(did()
        .arg("train")
        .arg("--config")
        .arg(&config)
        .arg("--out")
        .arg(dir.join("r1")));
    // Second run driven only by the resolved config of the first.
    run_ok(did()
        .arg("train")
        .arg("--config")
        .arg(dir.join("r1").join("resolved_config.json"))
        .arg("--out")
        .arg(dir.join("r2")));
    let h1 = fs::read_to_string(dir.join("r1").join("history.json")).unwrap();
    let h2 = fs::read_to_string(dir.join("r2").join("history.json")).unwrap();
    assert_eq!(h1, h2, "identical config + seed must reproduce the history");
}

#[test]
fn ablation_flags_shape_the_history() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let config = write_config(dir, "c.json", &small_config(dir));
    run_ok(did()
        .arg("gen-data")
        .arg("--config")
        .arg(&config)
        .arg("--out")
        .arg(dir.join("data")));

    run_ok(did()
        .arg("train")
        .arg("--config")
        .arg(&config)
        .arg("--out")
        .arg(dir.join("nodom"))
        .arg("--ablate")
        .arg("no-domain"));
    let history = fs::read_to_string(dir.join("nodom").join("history.json")).unwrap();
    assert!(!history.contains("l_dom"), "no-domain history must lack l_dom");
    assert!(history.contains("mi_estimate"));

    run_ok(did()
        .arg("train")
        .arg("--config")
        .arg(&config)
        .arg("--out")
        .arg(dir.join("nodec"))
        .arg("--ablate")
        .arg("no-decorrelation"));
    let history = fs::read_to_string(dir.join("nodec").join("history.json")).unwrap();
    assert!(!history.contains("mi_estimate"));
    assert!(history.contains("l_dom"));
}

#[test]
fn alpha_sweep_writes_five_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let config = write_config(dir, "c.json", &small_config(dir));
    run_ok(did()
        .arg("gen-data")
        .arg("--config")
        .arg(&config)
        .arg("--out")
        .arg(dir.join("data")));
    for alpha in ["0.0", "0.25", "0.5", "0.75", "1.0"] {
        let out_dir = dir.join(format!("alpha_{alpha}"));
        run_ok(did()
            .arg("train")
            .arg("--config")
            .arg(&config)
            .arg("--out")
            .arg(&out_dir)
            .arg("--alpha")
            .arg(alpha));
        assert!(out_dir.join("history.json").is_file());
        let resolved = fs::read_to_string(out_dir.join("resolved_config.json")).unwrap();
        assert!(resolved.contains(&format!("\"alpha_override\": {alpha}")));
    }
}

#[test]
fn exit_codes_follow_the_contract() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();

    // 2: output parent directory missing.
    let config = write_config(
        dir,
        "gen.json",
        r#"{ "synthetic": { "image_size": 16, "k": 1, "samples_per_domain": 1 } }"#,
    );
    let code = exit_code(did()
        .arg("gen-data")
        .arg("--config")
        .arg(&config)
        .arg("--out")
        .arg(dir.join("no").join("such").join("parent")));
    assert_eq!(code, 2, "missing parent must exit 2");

    // 2: malformed config.
    let bad = write_config(dir, "bad.json", r#"{ "training": { "batch_size": 0 } }"#);
    let code = exit_code(did().arg("train").arg("--config").arg(&bad).arg("--out").arg(dir));
    assert_eq!(code, 2, "invalid config must exit 2");

    // 2: clap usage error.
    let code = exit_code(did().arg("no-such-command"));
    assert_eq!(code, 2, "usage errors must exit 2");

    // 4: unreadable checkpoint path.
    let code = exit_code(did()
        .arg("eval")
        .arg("--checkpoint")
        .arg(dir.join("ghost.didc"))
        .arg("--manifest")
        .arg(dir.join("ghost.jsonl")));
    assert_eq!(code, 4, "missing checkpoint must exit 4");
}

#[test]
fn numeric_blowup_exits_3_and_retains_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let config = write_config(
        dir,
        "c.json",
        &format!(
            r#"{{
  "seed": 3,
  "synthetic": {{ "image_size": 32, "k": 2, "samples_per_domain": 16 }},
  "backbone": {{ "input_size": 32, "channel_widths": [8, 8] }},
  "data": {{ "train_manifest": "{dir}/data/manifest.jsonl" }},
  "training": {{ "base_lr": 1e120, "batch_size": 12, "max_epochs": 3,
                 "iterations_per_epoch": 4 }}
}}"#,
            dir = dir.display()
        ),
    );
    run_ok(did()
        .arg("gen-data")
        .arg("--config")
        .arg(&config)
        .arg("--out")
        .arg(dir.join("data")));
    let out = did()
        .arg("train")
        .arg("--config")
        .arg(&config)
        .arg("--out")
        .arg(dir.join("boom"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3), "non-finite loss must exit 3");
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(
        stderr.contains("non-finite"),
        "diagnostic must name the blowup: {stderr}"
    );
    assert!(
        stderr.contains("l_") || stderr.contains("mi_estimate"),
        "diagnostic must name the offending term: {stderr}"
    );
}

#[test]
fn eval_rejects_mismatched_config_and_missing_domain_branch() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let config = write_config(dir, "c.json", &small_config(dir));
    run_ok(did()
        .arg("gen-data")
        .arg("--config")
        .arg(&config)
        .arg("--out")
        .arg(dir.join("data")));
    run_ok(did()
        .arg("train")
        .arg("--config")
        .arg(&config)
        .arg("--out")
        .arg(dir.join("nodom"))
        .arg("--ablate")
        .arg("no-domain"));

    // Full-model eval config against a no-domain checkpoint: hash mismatch.
    let code = exit_code(did()
        .arg("eval")
        .arg("--config")
        .arg(&config)
        .arg("--checkpoint")
        .arg(dir.join("nodom").join("checkpoint.didc"))
        .arg("--manifest")
        .arg(dir.join("nodom").join("test_split.jsonl")));
    assert_eq!(code, 2, "config hash mismatch must exit 2");

    // Confusion matrix needs the domain branch.
    let code = exit_code(did()
        .arg("eval")
        .arg("--checkpoint")
        .arg(dir.join("nodom").join("checkpoint.didc"))
        .arg("--manifest")
        .arg(dir.join("nodom").join("test_split.jsonl"))
        .arg("--out")
        .arg(dir.join("ev"))
        .arg("--confusion"));
    assert_eq!(code, 2, "confusion without a domain branch must exit 2");
}
