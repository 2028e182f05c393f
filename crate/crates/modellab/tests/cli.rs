//! End-to-end tests of the `modellab` binary: exit codes, file outputs,
//! determinism, and agreement with the library the commands wrap.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use modellab::config::{Counts, RunConfig};
use modellab_core::masking::{build_mask, render_mask, MaskPolicy, RenderFormat, TokenLayout};
use modellab_core::model::ModelConfig;
use modellab_core::synth::GridSpec;
use modellab_core::train::AblationPlan;
use modellab_core::vision::VisionConfig;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_modellab"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawning modellab")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn assert_code(out: &Output, code: i32) {
    assert_eq!(
        out.status.code(),
        Some(code),
        "stdout:\n{}\nstderr:\n{}",
        stdout(out),
        stderr(out)
    );
}

/// Seconds-scale run config written to `dir`; returns the file path.
fn tiny_config(dir: &Path) -> PathBuf {
    let mut model = ModelConfig::toy();
    model.vocab_size = 48;
    model.d_l = 16;
    model.layers = 2;
    model.heads = 2;
    model.mlp_hidden = 24;
    model.vision = VisionConfig {
        image_size: 8,
        patch_size: 4,
        d_v: 8,
        layers: 2,
        heads: 2,
        mlp_hidden: 16,
        tap_layers: vec![1],
    };
    let mut cfg = RunConfig::from_plan(&AblationPlan::toy(), 3);
    cfg.model = model;
    cfg.data = GridSpec {
        grid: 2,
        palette: 4,
        noise_std: 0.1,
        jitter: false,
        distinct_colors: false,
        distinct_eval: false,
    };
    cfg.counts = Counts { train: 8, pretrain: 4, eval: 4 };
    cfg.pretrain.epochs = 1;
    cfg.pretrain.batch_size = 4;
    cfg.finetune.epochs = 1;
    cfg.finetune.batch_size = 4;
    let path = dir.join("run.toml");
    std::fs::write(&path, cfg.to_toml().unwrap()).unwrap();
    path
}

#[test]
fn unknown_flag_exits_1_and_writes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin()
        .current_dir(dir.path())
        .args(["mask", "--layout", "1,2,1", "--policy", "bidir", "--bogus"])
        .output()
        .unwrap();
    assert_code(&out, 1);
    assert!(!stderr(&out).is_empty());
    assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 0);
}

#[test]
fn help_is_a_success() {
    let out = run(&["--help"]);
    assert_code(&out, 0);
    assert!(stdout(&out).contains("gen-data"));
}

#[test]
fn mask_ascii_matches_the_library_rendering() {
    let out = run(&["mask", "--layout", "1,2,1", "--policy", "bidir", "--format", "ascii"]);
    assert_code(&out, 0);
    let mask = build_mask(TokenLayout::new(1, 2, 1).unwrap(), MaskPolicy::VisualBidirectional);
    let expected = String::from_utf8(render_mask(&mask, RenderFormat::Ascii).unwrap()).unwrap();
    assert_eq!(stdout(&out).trim_end(), expected);
    // The hybrid 4x4: the visual block (rows 1-2) is full.
    assert_eq!(expected.lines().nth(1).unwrap(), "###.");
}

#[test]
fn mask_pgm_requires_an_output_file() {
    let out = run(&["mask", "--layout", "1,2,1", "--policy", "causal", "--format", "pgm"]);
    assert_code(&out, 1);
    assert!(stderr(&out).contains("--out"));

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("mask.pgm");
    let out = run(&[
        "mask", "--layout", "1,2,1", "--policy", "causal", "--format", "pgm", "--out",
        path.to_str().unwrap(),
    ]);
    assert_code(&out, 0);
    let bytes = std::fs::read(&path).unwrap();
    assert!(bytes.starts_with(b"P5\n4 4\n255\n"));
}

#[test]
fn cost_reports_the_published_attention_figure() {
    let out = run(&[
        "cost", "--dims", "qwen2.5-3b", "--seq", "1024", "--visual", "576", "--policy", "causal",
    ]);
    assert_code(&out, 0);
    let json: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    let gflops = json["attention_per_layer_gflops"].as_f64().unwrap();
    assert!((gflops - 38.7).abs() / 38.7 < 0.05, "{gflops}");
    assert_eq!(json["layout"]["visual"], 576);
    assert!(json["params"]["total"].as_u64().unwrap() > 3_000_000_000);
}

#[test]
fn cost_usage_errors_exit_1() {
    assert_code(&run(&["cost", "--dims", "nope", "--seq", "8", "--visual", "4", "--policy", "causal"]), 1);
    assert_code(&run(&["cost", "--dims", "toy", "--seq", "4", "--visual", "8", "--policy", "causal"]), 1);
}

#[test]
fn gen_data_is_seed_deterministic_and_leaves_inputs_alone() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny_config(dir.path());
    let config_bytes = std::fs::read(&config).unwrap();
    let (a, b, c) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("c"));
    for (out, seed) in [(&a, "7"), (&b, "7"), (&c, "8")] {
        let res = run(&[
            "gen-data", "--config", config.to_str().unwrap(), "--seed", seed, "--out",
            out.to_str().unwrap(), "--images",
        ]);
        assert_code(&res, 0);
    }
    let read = |p: &Path| std::fs::read(p.join("train.jsonl")).unwrap();
    assert_eq!(read(&a), read(&b));
    assert_ne!(read(&a), read(&c));
    assert!(a.join("images/train-0000.ppm").exists());
    assert!(a.join("images/eval-0003.ppm").exists());
    assert_eq!(std::fs::read(&config).unwrap(), config_bytes);

    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(a.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 7);
    assert!(manifest["args"].as_array().unwrap().iter().any(|v| v == "--images"));
}

#[test]
fn malformed_config_is_a_runtime_failure() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny_config(dir.path());
    let mut text = std::fs::read_to_string(&config).unwrap();
    text = format!("definitely_not_a_key = true\n{text}");
    std::fs::write(&config, text).unwrap();
    let out = run(&[
        "gen-data", "--config", config.to_str().unwrap(), "--out",
        dir.path().join("x").to_str().unwrap(),
    ]);
    assert_code(&out, 2);
    assert!(stderr(&out).contains("definitely_not_a_key"));
}

#[test]
fn train_eval_probe_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny_config(dir.path());
    let train_out = dir.path().join("train");
    let res = run(&[
        "train", "--config", config.to_str().unwrap(), "--out", train_out.to_str().unwrap(),
    ]);
    assert_code(&res, 0);
    let final_ckpt = train_out.join("checkpoint-final.mlab");
    assert!(train_out.join("checkpoint-pretrain.mlab").exists());
    assert!(final_ckpt.exists());

    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(train_out.join("summary.json")).unwrap())
            .unwrap();
    let trained_accuracy = summary["accuracy"].as_f64().unwrap();

    // Eval twice: identical outputs, accuracy matches training's own eval,
    // and the accuracy line equals a recount over the per-sample records.
    let (e1, e2) = (dir.path().join("e1"), dir.path().join("e2"));
    let mut accuracy_lines = Vec::new();
    for out in [&e1, &e2] {
        let res = run(&[
            "eval", "--config", config.to_str().unwrap(), "--checkpoint",
            final_ckpt.to_str().unwrap(), "--out", out.to_str().unwrap(),
        ]);
        assert_code(&res, 0);
        accuracy_lines.push(stdout(&res));
    }
    assert_eq!(accuracy_lines[0], accuracy_lines[1]);
    // Identical apart from the manifest line, which echoes the differing
    // --out argument.
    let jsonl = std::fs::read_to_string(e1.join("eval.jsonl")).unwrap();
    let jsonl2 = std::fs::read_to_string(e2.join("eval.jsonl")).unwrap();
    let results = |s: &str| s.lines().skip(1).map(String::from).collect::<Vec<_>>();
    assert_eq!(results(&jsonl), results(&jsonl2));

    let mut correct = 0usize;
    let mut total = 0usize;
    let mut reported = None;
    for line in jsonl.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        match v["kind"].as_str().unwrap() {
            "sample" => {
                total += 1;
                correct += v["correct"].as_bool().unwrap() as usize;
            }
            "eval" => reported = v["accuracy"].as_f64(),
            _ => {}
        }
    }
    let reported = reported.expect("eval record present");
    assert_eq!(reported as f32, correct as f32 / total as f32);
    assert_eq!(reported as f32, trained_accuracy as f32);

    // Checkpoint round-trip through the library is bit-identical.
    let bytes = std::fs::read(&final_ckpt).unwrap();
    let reloaded = modellab::checkpoint::from_bytes(&bytes).unwrap();
    assert_eq!(modellab::checkpoint::to_bytes(&reloaded).unwrap(), bytes);

    // Probe the trained checkpoint on one eval sample.
    let probe_out = dir.path().join("probe");
    let res = run(&[
        "probe", "--config", config.to_str().unwrap(), "--checkpoint",
        final_ckpt.to_str().unwrap(), "--sample", "1", "--k", "2", "--out",
        probe_out.to_str().unwrap(),
    ]);
    assert_code(&res, 0);
    for name in ["input-lens", "output-lens"] {
        let lens: serde_json::Value = serde_json::from_str(
            &std::fs::read_to_string(probe_out.join(format!("{name}.json"))).unwrap(),
        )
        .unwrap();
        assert_eq!(lens["k"], 2);
        assert_eq!(lens["entries"].as_array().unwrap().len(), 4); // 2x2 patches
        let ppm = std::fs::read(probe_out.join(format!("{name}.ppm"))).unwrap();
        assert!(ppm.starts_with(b"P6\n"));
    }
    assert!(probe_out.join("sample.ppm").exists());
}

#[test]
fn eval_rejects_future_checkpoint_versions_with_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny_config(dir.path());
    let model = modellab_core::model::MllmModel::new(
        RunConfig::load(&config).unwrap().model,
        5,
    )
    .unwrap();
    let ckpt = dir.path().join("model.mlab");
    modellab::checkpoint::save_model(&ckpt, &model).unwrap();

    let mut bytes = std::fs::read(&ckpt).unwrap();
    bytes[4..8].copy_from_slice(&9u32.to_le_bytes());
    std::fs::write(&ckpt, bytes).unwrap();
    let out = run(&[
        "eval", "--config", config.to_str().unwrap(), "--checkpoint", ckpt.to_str().unwrap(),
        "--out", dir.path().join("e").to_str().unwrap(),
    ]);
    assert_code(&out, 2);
    let err = stderr(&out);
    assert!(err.contains('9') && err.contains('1'), "{err}");
}

#[test]
fn ablate_emits_six_rows_and_is_schedule_independent() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny_config(dir.path());
    let (serial, threaded) = (dir.path().join("serial"), dir.path().join("threaded"));
    let res = bin()
        .args([
            "ablate", "--config", config.to_str().unwrap(), "--seeds", "5", "--out",
            serial.to_str().unwrap(),
        ])
        .env("MODELLAB_THREADS", "1")
        .output()
        .unwrap();
    assert_code(&res, 0);
    let table = stdout(&res);
    assert_eq!(table.lines().count(), 7, "{table}"); // header + 5 rows + reference
    assert!(table.lines().last().unwrap().starts_with("no-visual-attention"));
    assert_eq!(std::fs::read_to_string(serial.join("table.txt")).unwrap(), table);

    let res = bin()
        .args([
            "ablate", "--config", config.to_str().unwrap(), "--seeds", "5", "--out",
            threaded.to_str().unwrap(),
        ])
        .env("MODELLAB_THREADS", "3")
        .output()
        .unwrap();
    assert_code(&res, 0);

    let strip_outcomes = |p: &Path| -> serde_json::Value {
        let mut v: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(p.join("report.json")).unwrap()).unwrap();
        // Outcome order depends on scheduling; rows and summaries must not.
        v.as_object_mut().unwrap().remove("outcomes");
        v
    };
    assert_eq!(strip_outcomes(&serial), strip_outcomes(&threaded));
}
