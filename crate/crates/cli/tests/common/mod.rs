#![allow(dead_code)]

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

/// 64 px model small enough to train a few steps in seconds.
pub const TINY_CONFIG: &str = r#"{
  "model": {
    "image_size": 64,
    "base_channels": 8,
    "channel_multipliers": [1, 2],
    "res_blocks_per_level": 1,
    "attention_resolutions": [16],
    "heads": 2,
    "token_dim": 16,
    "time_embed_dim": 16,
    "norm_groups": 4
  },
  "train": { "steps": 10, "batch_size": 2, "lr": 0.001, "log_every": 1, "checkpoint_every": 5 }
}"#;

pub fn funedit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_funedit")).args(args).output().expect("spawn funedit")
}

pub fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Runs and asserts success, returning stdout.
pub fn ok(args: &[&str]) -> String {
    let o = funedit(args);
    assert!(o.status.success(), "funedit {args:?} exited {:?}: {}", o.status.code(), stderr(&o));
    String::from_utf8_lossy(&o.stdout).into_owned()
}

pub fn s(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

pub fn write_tiny_config(dir: &Path) -> PathBuf {
    let p = dir.join("tiny.json");
    fs::write(&p, TINY_CONFIG).unwrap();
    p
}

/// Relative path to file bytes for every file under `dir`.
pub fn tree(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

pub fn read_json(p: &Path) -> serde_json::Value {
    serde_json::from_slice(&fs::read(p).unwrap()).unwrap()
}
