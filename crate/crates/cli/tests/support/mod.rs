#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

pub fn arin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_arin"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn arin")
}

pub fn ok(args: &[&str]) {
    let out = arin(args);
    assert!(
        out.status.success(),
        "arin {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

pub fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Small dataset plus tiny model configs, and the checkpoints trained on them.
pub struct Workspace {
    pub root: PathBuf,
    pub data: PathBuf,
    pub car_cfg: PathBuf,
    pub hinet_cfg: PathBuf,
}

impl Workspace {
    pub fn new(root: &Path) -> Self {
        let data = root.join("data");
        ok(&["synth-data", "--out", s(&data), "--count", "3", "--height", "48", "--width", "48", "--seed", "4"]);
        let car_cfg = root.join("car.json");
        std::fs::write(
            &car_cfg,
            r#"{"car": {"resampler": {"feature_width": 4, "residual_blocks": 1},
                        "edsr": {"feature_width": 4, "residual_blocks": 1}},
                "train": {"batch_size": 2, "patch_size": 24, "iterations": 30, "log_interval": 10,
                          "checkpoint_schedule": [10, 30]}}"#,
        )
        .unwrap();
        let hinet_cfg = root.join("hinet.json");
        std::fs::write(
            &hinet_cfg,
            r#"{"hinet": {"depth": 2, "base_width": 4},
                "train": {"batch_size": 2, "patch_size": 24, "iterations": 20, "log_interval": 10,
                          "checkpoint_schedule": []}}"#,
        )
        .unwrap();
        Workspace {
            root: root.to_path_buf(),
            data,
            car_cfg,
            hinet_cfg,
        }
    }

    pub fn train_car(&self, out: &Path) -> PathBuf {
        ok(&["train-car", "--data", s(&self.data), "--out", s(out), "--config", s(&self.car_cfg)]);
        out.join("car-final.ckpt")
    }

    pub fn train_hinet(&self, out: &Path, car: Option<&Path>) -> PathBuf {
        let mut args = vec!["train-hinet", "--data", s(&self.data), "--out", s(out), "--config", s(&self.hinet_cfg)];
        if let Some(c) = car {
            args.extend(["--mode", "car_outputs", "--car", s(c)]);
        }
        ok(&args);
        out.join("hinet-final.ckpt")
    }
}
