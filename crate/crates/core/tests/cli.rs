//! End-to-end exercise of the command-line surface on a miniature world:
//! gen-data → train-stage1 → train-stage2 → sample → eval → sweep, plus
//! the exit-code contract.

use std::path::Path;
use std::process::Command;

fn d2c() -> Command {
    Command::new(env!("CARGO_BIN_EXE_d2c"))
}

fn write_tiny_config(dir: &Path) -> std::path::PathBuf {
    let config = serde_json::json!({
        "world": {
            "seed": 9, "classes": 2, "codebook_size": 8,
            "h": 2, "w": 2, "d": 2, "corruption": 0.1, "noise": 0.4
        },
        "stage1": {
            "layers": 1, "heads": 2, "width": 8, "ffn_hidden": 16, "class_drop": 0.1
        },
        "stage2": {
            "encoder_layers": 1, "decoder_layers": 1, "heads": 2, "d_model": 8,
            "ffn_hidden": 16, "fusion": "q_former", "class_prefix": 2,
            "queries": 2, "query_dim": 8
        },
        "denoiser": { "width": 8, "cond_dim": 8, "blocks": 1, "steps": 20 },
        "optim": { "base_lr": 0.004 },
        "train": { "samples": 32, "epochs": 1, "batch_size": 8, "seed": 9 },
        "generation": {
            "steps": 2, "cfg_scale": 1.5, "stage1_cfg_scale": 1.0,
            "temperature": 1.0, "linear_guidance": true, "seed": 9,
            "samples_per_class": 4, "diffusion_steps": 5
        }
    });
    let path = dir.join("config.json");
    std::fs::write(&path, serde_json::to_string_pretty(&config).unwrap()).unwrap();
    path
}

#[test]
fn full_cli_workflow() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_tiny_config(dir.path());
    let data = dir.path().join("data.bin");
    let s1 = dir.path().join("s1.ckpt");
    let s2 = dir.path().join("s2.ckpt");
    let samples = dir.path().join("samples.bin");
    let csv = dir.path().join("report.csv");
    let sweep_dir = dir.path().join("sweeps");

    let run = |args: &[&str]| {
        let out = d2c().args(args).env("D2C_LOG", "warn").output().unwrap();
        assert!(
            out.status.success(),
            "d2c {args:?} failed:\nstdout: {}\nstderr: {}",
            String::from_utf8_lossy(&out.stdout),
            String::from_utf8_lossy(&out.stderr)
        );
        String::from_utf8_lossy(&out.stdout).to_string()
    };

    run(&["gen-data", "--config", config.to_str().unwrap(), "--out", data.to_str().unwrap()]);
    assert!(data.exists());
    // header: magic + 7 u32 fields = 32 bytes
    let bytes = std::fs::read(&data).unwrap();
    assert_eq!(&bytes[..4], b"D2CD");

    run(&[
        "train-stage1",
        "--config",
        config.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--out",
        s1.to_str().unwrap(),
    ]);
    assert_eq!(&std::fs::read(&s1).unwrap()[..4], b"D2CK");

    run(&[
        "train-stage2",
        "--config",
        config.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--stage1",
        s1.to_str().unwrap(),
        "--out",
        s2.to_str().unwrap(),
    ]);

    run(&[
        "sample",
        "--config",
        config.to_str().unwrap(),
        "--stage1",
        s1.to_str().unwrap(),
        "--stage2",
        s2.to_str().unwrap(),
        "--out",
        samples.to_str().unwrap(),
    ]);
    assert_eq!(&std::fs::read(&samples).unwrap()[..4], b"D2CD");

    let table = run(&[
        "eval",
        "--config",
        config.to_str().unwrap(),
        "--samples",
        samples.to_str().unwrap(),
        "--csv",
        csv.to_str().unwrap(),
    ]);
    assert!(table.contains("pooled"));
    let csv_text = std::fs::read_to_string(&csv).unwrap();
    assert!(csv_text.starts_with("class,samples,proxy,token_match\n"));

    let summary = run(&[
        "sweep",
        "--config",
        config.to_str().unwrap(),
        "--axis",
        "steps",
        "--grid",
        "1,2",
        "--stage1",
        s1.to_str().unwrap(),
        "--stage2",
        s2.to_str().unwrap(),
        "--out-dir",
        sweep_dir.to_str().unwrap(),
    ]);
    assert!(summary.contains("axis steps"));
    assert!(sweep_dir.join("sweep_steps.csv").exists());
    assert!(sweep_dir.join("sweep_steps.json").exists());
}

#[test]
fn sampling_is_reproducible_across_processes() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_tiny_config(dir.path());
    let s1 = dir.path().join("s1.ckpt");
    let s2 = dir.path().join("s2.ckpt");

    let run = |args: &[&str]| {
        let out = d2c().args(args).env("D2C_LOG", "warn").output().unwrap();
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    };
    run(&["train-stage1", "--config", config.to_str().unwrap(), "--out", s1.to_str().unwrap()]);
    run(&[
        "train-stage2",
        "--config",
        config.to_str().unwrap(),
        "--stage1",
        s1.to_str().unwrap(),
        "--out",
        s2.to_str().unwrap(),
    ]);
    let a = dir.path().join("a.bin");
    let b = dir.path().join("b.bin");
    for out in [&a, &b] {
        run(&[
            "sample",
            "--config",
            config.to_str().unwrap(),
            "--stage1",
            s1.to_str().unwrap(),
            "--stage2",
            s2.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ]);
    }
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
}

#[test]
fn exit_codes() {
    // usage error → 1
    let out = d2c().arg("no-such-command").output().unwrap();
    assert_eq!(out.status.code(), Some(1));

    let out = d2c().args(["eval", "--samples", "/nonexistent/x.bin"]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));

    // bad fusion value → 1
    let dir = tempfile::tempdir().unwrap();
    let out = d2c()
        .args([
            "gen-data",
            "--fusion",
            "bogus",
            "--out",
            dir.path().join("x.bin").to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));

    // help → 0
    let out = d2c().arg("--help").output().unwrap();
    assert_eq!(out.status.code(), Some(0));

    // checkpoint/config mismatch → 1: train a tiny stage-1, then try to
    // sample with a different stage-1 architecture config
    let config = write_tiny_config(dir.path());
    let s1 = dir.path().join("s1.ckpt");
    let out = d2c()
        .args([
            "train-stage1",
            "--config",
            config.to_str().unwrap(),
            "--out",
            s1.to_str().unwrap(),
        ])
        .env("D2C_LOG", "warn")
        .output()
        .unwrap();
    assert!(out.status.success());
    // default config has a different stage-1 shape: digest mismatch
    let out = d2c()
        .args([
            "sample",
            "--stage1",
            s1.to_str().unwrap(),
            "--stage2",
            s1.to_str().unwrap(),
            "--out",
            dir.path().join("y.bin").to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
}
