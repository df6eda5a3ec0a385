use std::fs;
use std::path::Path;
use std::process::Command;

fn rapnet(dir: &Path, args: &[&str]) -> String {
    let out = Command::new(env!("CARGO_BIN_EXE_rapnet"))
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .args(args)
        .output()
        .expect("failed to spawn rapnet");
    assert!(
        out.status.success(),
        "rapnet {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

const CONFIG: &str = r#"{
  "network": {"T": 32, "C": 8, "N": 3, "M": 2},
  "train": {"batch_size": 4, "epochs": 2, "warmup_epochs": 1, "base_lr": 0.05,
            "ranker": {"epochs": 1, "batch_size": 32, "base_lr": 0.05, "momentum": 0.9, "seed": 0}}
}"#;

#[test]
fn full_pipeline_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    fs::write(dir.join("config.json"), CONFIG).unwrap();
    let cfg = ["--config", "config.json"];

    rapnet(
        dir,
        &[
            "synth-data",
            "--out",
            "data",
            "--num-videos",
            "12",
            "--t",
            "40",
            "--c",
            "8",
            "--seed",
            "4",
        ],
    );
    let ann: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.join("data/annotations.json")).unwrap()).unwrap();
    assert_eq!(ann["videos"].as_array().unwrap().len(), 12);
    assert!(dir.join("data/features").read_dir().unwrap().count() == 12);

    rapnet(
        dir,
        &[
            &cfg[..],
            &["cluster-anchors", "--data", "data", "--out", "anchors.json"],
        ]
        .concat(),
    );
    let anchors: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.join("anchors.json")).unwrap()).unwrap();
    assert_eq!(anchors["N"], 3);
    assert_eq!(anchors["widths"].as_array().unwrap().len(), 3);

    rapnet(
        dir,
        &[
            &cfg[..],
            &[
                "train",
                "--data",
                "data",
                "--anchors",
                "anchors.json",
                "--out",
                "m/model.ckpt",
            ],
        ]
        .concat(),
    );
    assert!(dir.join("m/model.json").exists());
    let log = fs::read_to_string(dir.join("m/model.log.csv")).unwrap();
    assert!(log.starts_with("step,prop_conf_pos,"));
    assert_eq!(log.lines().count(), 1 + 2 * 3);

    let mut csvs = Vec::new();
    for flags in [&["--no-adjust", "--no-rank"][..], &["--no-rank"], &[]] {
        let name = format!("props{}.csv", csvs.len());
        rapnet(
            dir,
            &[
                &["propose", "--model", "m/model.ckpt", "--data", "data", "--out", &name][..],
                flags,
            ]
            .concat(),
        );
        let text = fs::read_to_string(dir.join(&name)).unwrap();
        assert!(text.starts_with("video_id,start,end,score\n"));
        for line in text.lines().skip(1) {
            let f: Vec<f64> = line.split(',').skip(1).map(|v| v.parse().unwrap()).collect();
            assert!(0.0 <= f[0] && f[0] <= f[1] && f[1] <= 1.0, "{line}");
        }
        csvs.push((name, text));
    }
    assert_ne!(csvs[0].1, csvs[1].1);
    assert_ne!(csvs[1].1, csvs[2].1);

    let table = rapnet(
        dir,
        &[
            "eval",
            "--proposals",
            &csvs[2].0,
            "--annotations",
            "data/annotations.json",
            "--out",
            "curve.json",
        ],
    );
    assert!(table.contains("AUC"));
    let curve: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.join("curve.json")).unwrap()).unwrap();
    let auc = curve["auc"].as_f64().unwrap();
    assert!((0.0..=100.0).contains(&auc));
    assert_eq!(curve["ar"].as_object().unwrap().len(), 100);
    assert!(curve["recall"]["0.50"]["100"].is_number());
}

#[test]
fn no_ram_checkpoint_has_no_ram_parameters() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    fs::write(dir.join("config.json"), CONFIG).unwrap();
    rapnet(
        dir,
        &[
            "synth-data",
            "--out",
            "data",
            "--num-videos",
            "6",
            "--t",
            "32",
            "--c",
            "8",
        ],
    );
    rapnet(
        dir,
        &[
            "--config",
            "config.json",
            "cluster-anchors",
            "--data",
            "data",
            "--out",
            "a.json",
        ],
    );
    rapnet(
        dir,
        &[
            "--config",
            "config.json",
            "train",
            "--data",
            "data",
            "--anchors",
            "a.json",
            "--out",
            "m.ckpt",
            "--no-ram",
            "--epochs",
            "2",
        ],
    );
    let spec: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.join("m.json")).unwrap()).unwrap();
    assert_eq!(spec["network"]["use_ram"], false);
    let bytes = fs::read(dir.join("m.ckpt")).unwrap();
    let text = String::from_utf8_lossy(&bytes);
    assert!(text.contains("gce.block0.conv.weight"));
    assert!(!text.contains(".ram."));
}

#[test]
fn rejects_bad_input() {
    let out = Command::new(env!("CARGO_BIN_EXE_rapnet"))
        .args([
            "eval",
            "--proposals",
            "/nonexistent.csv",
            "--annotations",
            "/nonexistent.json",
        ])
        .output()
        .unwrap();
    assert!(!out.status.success());
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("c.json"), r#"{"trian": {}}"#).unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_rapnet"))
        .current_dir(tmp.path())
        .args(["--config", "c.json", "synth-data", "--out", "d"])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("trian"));
}
