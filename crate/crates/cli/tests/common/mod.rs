#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

pub const TINY: &str = r#"{
  "synthetic": {"num_nodes": 120, "num_classes": 3, "mean_degree": 4.0},
  "train": {"hidden": 8, "max_epochs": 4, "lr": 0.01},
  "experiment": {"scales": [0.0, 1.0], "num_seeds": 2}
}"#;

pub fn magsim(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_magsim"))
        .args(args)
        .env_remove("MAGSIM_LOG")
        .output()
        .expect("binary runs")
}

pub fn ok(args: &[&str]) -> Output {
    let out = magsim(args);
    assert!(
        out.status.success(),
        "magsim {args:?} failed ({:?}):\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

pub fn s(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

/// A work directory holding the tiny config and a dataset generated from it.
pub struct Workspace {
    pub dir: tempfile::TempDir,
    pub config: PathBuf,
    pub data: PathBuf,
}

impl Workspace {
    pub fn new(seed: u64) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let config = dir.path().join("config.json");
        std::fs::write(&config, TINY).unwrap();
        let data = dir.path().join("data");
        ok(&["gen", "--config", s(&config), "--out", s(&data), "--seed", &seed.to_string()]);
        Self { dir, config, data }
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    /// Runs a data-consuming subcommand writing to `out`.
    pub fn run(&self, cmd: &str, out: &Path, seed: u64, extra: &[&str]) -> Output {
        let seed = seed.to_string();
        let mut args = vec![cmd, "--config", s(&self.config), "--data", s(&self.data), "--out", s(out), "--seed", &seed];
        args.extend_from_slice(extra);
        ok(&args)
    }
}

/// Every file under `dir` (non-recursive) with its bytes, sorted by name.
pub fn snapshot(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
        .collect();
    files.sort();
    files
}

pub fn golden_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden")
}

/// Produces the golden outputs: sweep, gradient and probe CSVs for the tiny
/// config at seed 7. Returns `(file name, bytes)`.
pub fn golden_outputs() -> Vec<(String, Vec<u8>)> {
    let ws = Workspace::new(7);
    let mut out = Vec::new();
    for (cmd, name) in [("sweep-noise", "sweep.csv"), ("track-grads", "grads.csv"), ("corrupt", "probe.csv")] {
        let path = ws.path(name);
        ws.run(cmd, &path, 7, &[]);
        out.push((name.to_string(), std::fs::read(&path).unwrap()));
    }
    out
}

/// Compares fresh outputs against the checked-in goldens; `MAGSIM_BLESS=1`
/// rewrites them instead.
pub fn golden_mismatches() -> Vec<String> {
    let dir = golden_dir();
    let bless = std::env::var_os("MAGSIM_BLESS").is_some();
    let mut bad = Vec::new();
    for (name, bytes) in golden_outputs() {
        let path = dir.join(&name);
        if bless {
            std::fs::create_dir_all(&dir).unwrap();
            std::fs::write(&path, &bytes).unwrap();
        } else if std::fs::read(&path).ok().as_deref() != Some(&bytes[..]) {
            bad.push(name);
        }
    }
    bad
}
