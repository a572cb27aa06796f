#![allow(dead_code)]

pub mod fitcheck;
pub mod fock;

use std::path::{Path, PathBuf};
use std::process::Command;

pub fn configs_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("configs")
}

pub fn config(name: &str) -> PathBuf {
    configs_dir().join(name)
}

pub struct Run {
    pub code: i32,
    pub stdout: String,
    pub stderr: String,
}

/// Run the `mirpairs` binary with `MIRPAIRS_THREADS` cleared unless given.
pub fn mirpairs(args: &[&str], threads_env: Option<&str>) -> Run {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_mirpairs"));
    cmd.args(args).env_remove("MIRPAIRS_THREADS");
    if let Some(t) = threads_env {
        cmd.env("MIRPAIRS_THREADS", t);
    }
    let out = cmd.output().expect("binary runs");
    Run {
        code: out.status.code().unwrap_or(-1),
        stdout: String::from_utf8_lossy(&out.stdout).into_owned(),
        stderr: String::from_utf8_lossy(&out.stderr).into_owned(),
    }
}

/// Numeric rows of a CSV output, skipping `#` lines and the header.
pub fn csv_rows(path: &Path) -> Vec<Vec<f64>> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .filter(|l| !l.starts_with('#'))
        .skip(1)
        .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
        .collect()
}

pub fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

/// Every file in `a` exists in `b` with identical bytes, and vice versa.
pub fn same_tree(a: &Path, b: &Path) -> Result<usize, String> {
    let names = |d: &Path| {
        let mut v: Vec<_> = std::fs::read_dir(d).unwrap().map(|e| e.unwrap().file_name()).collect();
        v.sort();
        v
    };
    let (na, nb) = (names(a), names(b));
    if na != nb {
        return Err(format!("file sets differ: {na:?} vs {nb:?}"));
    }
    for n in &na {
        if std::fs::read(a.join(n)).unwrap() != std::fs::read(b.join(n)).unwrap() {
            return Err(format!("{n:?} differs"));
        }
    }
    Ok(na.len())
}
