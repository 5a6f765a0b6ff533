#![allow(dead_code)]

pub mod reference;

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::process::Command;

pub fn workspace() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..").canonicalize().unwrap()
}

pub fn desk_config() -> PathBuf {
    workspace().join("configs/desk.json")
}

pub struct Output {
    pub code: i32,
    pub stdout: String,
    pub stderr: String,
}

/// Runs the `familykit` binary with `FAMILYKIT_SEED` cleared.
pub fn familykit(args: &[&str]) -> Output {
    let out = Command::new(env!("CARGO_BIN_EXE_familykit"))
        .args(args)
        .env_remove("FAMILYKIT_SEED")
        .output()
        .expect("spawn familykit");
    Output {
        code: out.status.code().unwrap_or(-1),
        stdout: String::from_utf8_lossy(&out.stdout).into_owned(),
        stderr: String::from_utf8_lossy(&out.stderr).into_owned(),
    }
}

/// Runs a command and panics with its stderr unless it exits 0.
pub fn familykit_ok(args: &[&str]) -> Output {
    let out = familykit(args);
    assert_eq!(out.code, 0, "familykit {args:?} failed:\n{}", out.stderr);
    out
}

/// Rows of a simple CSV without quoted fields, keyed by header.
pub fn read_csv(path: &Path) -> Vec<HashMap<String, String>> {
    let text = std::fs::read_to_string(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    let mut lines = text.lines();
    let header: Vec<String> = lines.next().unwrap().split(',').map(str::to_string).collect();
    lines
        .map(|l| header.iter().cloned().zip(l.split(',').map(str::to_string)).collect())
        .collect()
}

pub fn field<T: std::str::FromStr>(row: &HashMap<String, String>, key: &str) -> T
where
    T::Err: std::fmt::Debug,
{
    row[key].parse().unwrap()
}

pub fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}
