#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

/// A short training run: small MLP on the stripes task, four epochs.
pub const SMALL_TRAIN: &str = r#"
[train]
model = "mini_mlp"
epochs = 4
batch_size = 16

[train.dataset]
kind = "stripes"
train_size = 96
eval_size = 64
channels = 1
noise = 0.5

[train.schedule]
warmup_epochs = 1
m_initial = 1
k = 3
growth = 1
"#;

/// Runs the binary with `args`, isolated from any `ADAGP_OUT` in the caller's environment.
pub fn adagp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_adagp"))
        .args(args)
        .env_remove("ADAGP_OUT")
        .output()
        .expect("binary runs")
}

/// Like [`adagp`] but fails the test on a non-zero exit; returns stdout.
pub fn adagp_ok(args: &[&str]) -> String {
    let out = adagp(args);
    assert!(
        out.status.success(),
        "adagp {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

pub fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

/// Every file under `dir`, keyed by relative path.
pub fn snapshot(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, acc: &mut BTreeMap<PathBuf, Vec<u8>>) {
        for entry in std::fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                walk(root, &path, acc);
            } else {
                acc.insert(path.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&path).unwrap());
            }
        }
    }
    let mut acc = BTreeMap::new();
    walk(dir, dir, &mut acc);
    acc
}

/// Runs every subcommand into `out` with the small training config.
pub fn run_all_subcommands(config: &Path, out: &Path) {
    let (c, o) = (config.to_str().unwrap(), out.to_str().unwrap());
    adagp_ok(&["-c", c, "-o", o, "train"]);
    adagp_ok(&["-c", c, "-o", o, "train", "--baseline"]);
    adagp_ok(&["-c", c, "-o", o, "timeline"]);
    for strategy in ["gpipe", "dapple", "chimera"] {
        for mode in ["baseline", "gp", "transition"] {
            adagp_ok(&["-c", c, "-o", o, "pipeline", "--strategy", strategy, "--mode", mode]);
        }
    }
    adagp_ok(&["-c", c, "-o", o, "energy"]);
    adagp_ok(&["-c", c, "-o", o, "report"]);
}
