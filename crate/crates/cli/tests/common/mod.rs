#![allow(dead_code)]

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

pub fn obbstack<I, S>(args: I) -> Output
where
    I: IntoIterator<Item = S>,
    S: AsRef<std::ffi::OsStr>,
{
    Command::new(env!("CARGO_BIN_EXE_obbstack"))
        .args(args)
        .env_remove("RUST_LOG")
        .output()
        .expect("binary runs")
}

/// Runs the binary and panics with its stderr unless it exits 0.
pub fn ok<I, S>(args: I) -> Output
where
    I: IntoIterator<Item = S>,
    S: AsRef<std::ffi::OsStr>,
{
    let out = obbstack(args);
    assert!(
        out.status.success(),
        "exit {:?}\nstderr:\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

pub fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

pub fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

pub const SCENARIO: &str = r#"
n_images = 60
categories = ["plane", "ship", "vehicle"]
seeds = [1, 2]
objects_per_image = { min = 4, max = 12 }

[[profiles]]
name = "alpha"
skill = 5.0
recall = 0.7

[[profiles]]
name = "beta"
skill = 4.0
recall = 0.7
temperature = 3.0

[[profiles]]
name = "gamma"
skill = 3.0
recall = 0.7
fp_rate = 2.0

[pipeline]
z_miss = -2.0
"#;

/// Simulates `scenario` (TOML) into `dir/sim`, seed 1 only.
pub fn simulate(dir: &Path, scenario: &str) -> std::path::PathBuf {
    let path = dir.join("scenario.toml");
    fs::write(&path, scenario).unwrap();
    let out = dir.join("sim");
    ok([
        "simulate".as_ref(),
        "--scenario".as_ref(),
        path.as_os_str(),
        "--seed".as_ref(),
        "1".as_ref(),
        "--out".as_ref(),
        out.as_os_str(),
    ]);
    out.join("seed_1")
}

/// Recursively lists files under `dir` with their bytes, sorted by relative path.
pub fn snapshot(dir: &Path) -> Vec<(String, Vec<u8>)> {
    fn walk(root: &Path, dir: &Path, out: &mut Vec<(String, Vec<u8>)>) {
        for entry in fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                walk(root, &path, out);
            } else {
                let rel = path.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.push((rel, fs::read(&path).unwrap()));
            }
        }
    }
    let mut out = Vec::new();
    walk(dir, dir, &mut out);
    out.sort();
    out
}
