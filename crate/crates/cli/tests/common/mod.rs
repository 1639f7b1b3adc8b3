#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::{Duration, Instant};

use sha2::{Digest, Sha256};

pub const BIN: &str = env!("CARGO_BIN_EXE_cfdiff");

/// Seconds-scale configuration for wiring checks.
pub const TINY_CONFIG: &str = r#"rng_seed = 1

[dataset]
n_per_class = 60

[classifier]
epochs = 3

[detector]
epochs = 3

[probe]
epochs = 1

[ddpm]
epochs = 1
val_samples = 8

[ddpm.arch]
base_channels = 4
time_dim = 8
groups = 2

[ddpm.schedule]
steps = 10

[guidance]
tau = 5

[augmentation]
n = 4
keep_unflipped = true
"#;

pub fn cfdiff(args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn cfdiff")
}

/// Run and require success, returning stdout and the wall time.
pub fn cfdiff_ok(args: &[&str]) -> (String, Duration) {
    let start = Instant::now();
    let out = cfdiff(args);
    let elapsed = start.elapsed();
    assert!(
        out.status.success(),
        "cfdiff {:?} failed ({:?}):\n{}",
        args,
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    (String::from_utf8_lossy(&out.stdout).into_owned(), elapsed)
}

pub fn p(path: &Path) -> &str {
    path.to_str().expect("utf-8 path")
}

/// Directory layout of one pipeline run.
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: &Path) -> Self {
        Self {
            root: root.to_path_buf(),
        }
    }
    pub fn data(&self) -> PathBuf {
        self.root.join("data")
    }
    pub fn model(&self, name: &str) -> PathBuf {
        self.root.join("models").join(name)
    }
    pub fn run(&self, name: &str) -> PathBuf {
        self.root.join("runs").join(name)
    }
    pub fn aug(&self, name: &str) -> PathBuf {
        self.root.join("aug").join(name)
    }
    pub fn out(&self, name: &str) -> PathBuf {
        self.root.join("out").join(name)
    }
}

/// Every command once, with the config at `config`.
pub fn run_tiny_pipeline(l: &Layout, config: &Path) {
    let cfg = p(config);
    let data = l.data();
    cfdiff_ok(&["dataset", "--config", cfg, "--out", p(&data)]);
    for (role, name, objective) in [
        ("classifier", "classifier", "erm"),
        ("detector", "detector", "erm"),
        ("probe", "probe", "erm"),
        ("classifier", "classifier_dro", "group_dro"),
    ] {
        cfdiff_ok(&[
            "train",
            "--config",
            cfg,
            "--role",
            role,
            "--objective",
            objective,
            "--data",
            p(&data),
            "--out",
            p(&l.model(name)),
        ]);
    }
    cfdiff_ok(&[
        "train",
        "--config",
        cfg,
        "--role",
        "denoiser",
        "--data",
        p(&data),
        "--out",
        p(&l.model("denoiser")),
    ]);
    let (c, d, g) = (l.model("classifier"), l.model("detector"), l.model("denoiser"));
    for mode in ["decodex", "baseline"] {
        cfdiff_ok(&[
            "counterfactual",
            "--config",
            cfg,
            "--mode",
            mode,
            "--n",
            "8",
            "--classifier",
            p(&c),
            "--detector",
            p(&d),
            "--ddpm",
            p(&g),
            "--data",
            p(&data),
            "--out",
            p(&l.run(mode)),
        ]);
    }
    cfdiff_ok(&[
        "metrics",
        "--config",
        cfg,
        "--run",
        p(&l.run("decodex")),
        "--run",
        p(&l.run("baseline")),
        "--classifier",
        p(&c),
        "--detector",
        p(&d),
        "--probe",
        p(&l.model("probe")),
        "--out",
        p(&l.out("metrics")),
    ]);
    cfdiff_ok(&[
        "augment",
        "--config",
        cfg,
        "--mode",
        "decodex",
        "--classifier",
        p(&c),
        "--detector",
        p(&d),
        "--ddpm",
        p(&g),
        "--data",
        p(&data),
        "--out",
        p(&l.aug("decodex")),
    ]);
    cfdiff_ok(&[
        "retrain",
        "--config",
        cfg,
        "--augmented",
        p(&l.aug("decodex")),
        "--before",
        p(&c),
        "--objective",
        "erm",
        "--out",
        p(&l.out("retrain")),
    ]);
}

/// Relative path -> sha256 of every file under `root`, skipping wall-clock files.
pub fn tree_digest(root: &Path) -> BTreeMap<String, String> {
    fn walk(dir: &Path, root: &Path, out: &mut BTreeMap<String, String>) {
        let mut entries: Vec<_> = std::fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
        entries.sort();
        for path in entries {
            if path.is_dir() {
                walk(&path, root, out);
            } else if path.file_name().is_some_and(|n| n != "timing.json") {
                let rel = path.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.insert(rel, hex::encode(Sha256::digest(std::fs::read(&path).unwrap())));
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(root, root, &mut out);
    out
}
