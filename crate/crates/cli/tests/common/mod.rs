#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use dpae_core::data::registry_subset;
use dpae_core::model::DpaeConfig;
use dpae_core::profile::{ExperimentConfig, Scale};

pub fn dpae() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_dpae"));
    cmd.env_remove("DPAE_OUTPUT_ROOT");
    cmd
}

pub fn run(args: &[&str]) -> Output {
    dpae().args(args).output().expect("spawn dpae")
}

pub fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

/// Runs and asserts success, showing stderr otherwise.
pub fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert_eq!(
        code(&out),
        0,
        "dpae {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

/// Geometry small enough to run every command in seconds: two channels (one
/// of them label-independent), 16 samples, a toy model and short fits.
pub fn tiny_config(seed: u64) -> ExperimentConfig {
    let mut c = ExperimentConfig::new(Scale::Desk, seed);
    c.data.count = 16;
    c.data.samples = 16;
    c.data.period_s = 6.25;
    c.data.channels = registry_subset(&[1, 29]);
    c.model = DpaeConfig {
        samples: 16,
        ..DpaeConfig::toy()
    };
    c.train.epochs = 2;
    c.heads.mlp.max_epochs = 5;
    c.heads.end_to_end.max_epochs = 5;
    c.heads.forest.trees = 5;
    c.heads.train_replicates = 2;
    c.heads.test_replicates = 2;
    c.interpret.background = 4;
    c.interpret.coalition_samples = 16;
    c.interpret.size_band_cm = (0.1, 35.1);
    c
}

pub fn write_config(dir: &Path, config: &ExperimentConfig) -> PathBuf {
    let path = dir.join("tiny.json");
    fs::write(&path, serde_json::to_string_pretty(config).unwrap()).unwrap();
    path
}

/// Every file under `dir` with its bytes, sorted by relative path.
pub fn snapshot(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    fn walk(root: &Path, dir: &Path, out: &mut Vec<(PathBuf, Vec<u8>)>) {
        for entry in fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                walk(root, &path, out);
            } else {
                out.push((path.strip_prefix(root).unwrap().to_path_buf(), fs::read(&path).unwrap()));
            }
        }
    }
    let mut out = Vec::new();
    walk(dir, dir, &mut out);
    out.sort();
    out
}

/// Artifact directories produced by [`pipeline`].
pub struct Artifacts {
    pub data: PathBuf,
    pub model: PathBuf,
    pub recon: PathBuf,
    pub latents: PathBuf,
    pub heads: PathBuf,
    pub metrics: PathBuf,
    pub explain: PathBuf,
    pub gradcheck: PathBuf,
}

impl Artifacts {
    pub fn all(&self) -> [&PathBuf; 8] {
        [
            &self.data,
            &self.model,
            &self.recon,
            &self.latents,
            &self.heads,
            &self.metrics,
            &self.explain,
            &self.gradcheck,
        ]
    }
}

/// Runs every command once under `root/<tag>`, reading inputs produced by the
/// same run.
pub fn pipeline(root: &Path, config: &Path, tag: &str) -> Artifacts {
    let dir = |name: &str| root.join(tag).join(name);
    let a = Artifacts {
        data: dir("data"),
        model: dir("model"),
        recon: dir("recon"),
        latents: dir("latents"),
        heads: dir("heads"),
        metrics: dir("metrics"),
        explain: dir("explain"),
        gradcheck: dir("gradcheck"),
    };
    let s = |p: &PathBuf| p.to_str().unwrap().to_string();
    let cfg = config.to_str().unwrap();
    let base = ["--config", cfg, "--seed", "7"];
    let with = |extra: &[&str]| -> Vec<String> { base.iter().chain(extra).map(|s| s.to_string()).collect() };
    let call = |args: Vec<String>| {
        let refs: Vec<&str> = args.iter().map(String::as_str).collect();
        ok(&refs)
    };
    call(with(&["gen-data", "--out", &s(&a.data)]));
    call(with(&["train-dpae", "--data", &s(&a.data), "--out", &s(&a.model)]));
    call(with(&[
        "reconstruct",
        "--model",
        &s(&a.model),
        "--data",
        &s(&a.data),
        "--sample",
        "3",
        "--passthrough",
        "--out",
        &s(&a.recon),
    ]));
    call(with(&[
        "extract-latents",
        "--model",
        &s(&a.model),
        "--data",
        &s(&a.data),
        "--preset",
        "moderate",
        "--out",
        &s(&a.latents),
    ]));
    call(with(&["train-heads", "--model", &s(&a.model), "--data", &s(&a.data), "--out", &s(&a.heads)]));
    call(with(&[
        "evaluate",
        "--model",
        &s(&a.model),
        "--data",
        &s(&a.data),
        "--heads",
        &s(&a.heads),
        "--out",
        &s(&a.metrics),
    ]));
    call(with(&[
        "explain",
        "--model",
        &s(&a.model),
        "--data",
        &s(&a.data),
        "--heads",
        &s(&a.heads),
        "--band",
        "0.1,35.1",
        "--out",
        &s(&a.explain),
    ]));
    call(with(&["gradcheck", "--scope", "ops", "--out", &s(&a.gradcheck)]));
    a
}

/// Data rows of a CSV artifact: comment lines and the header are skipped.
pub fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .filter(|l| !l.starts_with('#'))
        .skip(1)
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}
