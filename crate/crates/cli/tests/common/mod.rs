#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::Command;

pub struct Outcome {
    pub code: i32,
    pub stdout: String,
    pub stderr: String,
}

pub fn qtele(args: &[&str]) -> Outcome {
    let out = Command::new(env!("CARGO_BIN_EXE_qtele")).args(args).output().expect("spawn qtele");
    Outcome {
        code: out.status.code().unwrap_or(-1),
        stdout: String::from_utf8_lossy(&out.stdout).into_owned(),
        stderr: String::from_utf8_lossy(&out.stderr).into_owned(),
    }
}

/// Runs a command into `dir` and panics with the error stream on failure.
pub fn run_ok(command: &str, dir: &Path, overrides: &[(&str, String)]) -> Outcome {
    let mut args = vec![command.to_string(), "-o".into(), dir.display().to_string()];
    for (k, v) in overrides {
        args.push(format!("--{k}"));
        args.push(v.clone());
    }
    let refs: Vec<&str> = args.iter().map(String::as_str).collect();
    let o = qtele(&refs);
    assert_eq!(o.code, 0, "qtele {args:?} failed: {}", o.stderr);
    o
}

/// Structured-text output: a comment header, then JSON.
pub fn read_json(path: &Path) -> serde_json::Value {
    let text = std::fs::read_to_string(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    let body: Vec<&str> = text.lines().filter(|l| !l.starts_with('#')).collect();
    serde_json::from_str(&body.join("\n")).unwrap()
}

/// CSV rows as maps from column name to value.
pub fn read_csv(path: &Path) -> Vec<std::collections::HashMap<String, f64>> {
    let text = std::fs::read_to_string(path).unwrap();
    let mut lines = text.lines().filter(|l| !l.starts_with('#'));
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    lines
        .map(|l| header.iter().map(|h| h.to_string()).zip(l.split(',').map(|v| v.parse().unwrap_or(f64::NAN))).collect())
        .collect()
}

pub fn files_in(dir: &Path) -> Vec<PathBuf> {
    let mut v: Vec<PathBuf> = std::fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
    v.sort();
    v
}

const DARK_KEYS: [&str; 7] = [
    "detectors.D1.dark_rate_hz",
    "detectors.D2.dark_rate_hz",
    "detectors.D3.dark_rate_hz",
    "detectors.D4.dark_rate_hz",
    "detectors.D5.dark_rate_hz",
    "detectors.D6.dark_rate_hz",
    "detectors.TRIG.dark_rate_hz",
];

/// Noiseless single-pair configuration as overrides.
pub fn ideal(pulses: &str) -> Vec<(&'static str, String)> {
    let mut v = vec![
        ("source.g1", "0.05".to_string()),
        ("source.g2", "0.05".into()),
        ("source.xi", "1".into()),
        ("detectors.efficiency", "1".into()),
        ("attenuation_db", "0".into()),
        ("pulses", pulses.into()),
    ];
    v.extend(DARK_KEYS.map(|k| (k, "0".to_string())));
    v
}
