//! Shared helpers for driving the `f2r` binary.

#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

/// A small configuration that runs every subcommand in seconds.
pub fn tiny_config(root: &Path, run_id: &str) -> String {
    format!(
        r#"run_id = "{run_id}"
output_root = "{root}"
seed = 3

[data]
train_clips = 1
val_clips = 1

[data.scene]
height = 24
width = 24
length = 5
patch = 16
sprite_radius = [3.0, 6.0]

[priors]
denoiser = "classical"

[model]
width = 4
levels = 2

[model.align]
groups = 2
reduction = 2

[training]
iters = 3
batch = 2
patch = 16
window = 3
val_every = 0
val_frames = 1

[evaluation]
audit_trials = 100
"#,
        root = root.display()
    )
}

pub fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

pub fn f2r(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_f2r")).args(args).output().expect("spawning f2r")
}

pub fn run(sub: &str, config: &Path, extra: &[&str]) -> Output {
    let mut args = vec![sub, "--config", config.to_str().unwrap()];
    args.extend_from_slice(extra);
    f2r(&args)
}

pub fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

pub fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

/// Runs the subcommand and panics with its stderr unless it exits 0.
pub fn ok(sub: &str, config: &Path, extra: &[&str]) -> Output {
    let o = run(sub, config, extra);
    assert_eq!(o.status.code(), Some(0), "{sub} failed:\n{}", stderr(&o));
    o
}

/// The end-to-end chain: data, stage 1, stage 2, inference.
pub fn e2e(config: &Path) {
    for sub in ["gen-data", "train-stage1", "train-stage2", "infer"] {
        ok(sub, config, &[]);
    }
}
