//! Run manifests: a flat `key = value` file plus `--key value` overrides.
//!
//! Experiment keys follow the field paths of `ExperimentConfig`
//! (`source.g1`, `detectors.D5.dark_rate_hz`, `window_ps`, ...).
//! `detectors.efficiency` sets every detector at once and is applied before
//! the per-detector keys. Command keys (sweep ranges, input files, link
//! budget overrides) live in the same namespace.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use qtele_core::experiment::{ExperimentConfig, TagScope};
use qtele_core::qstate::{CanonicalState, MeasurementBasis, PureState, C64};
use qtele_core::tags::Detector;
use sha2::{Digest, Sha256};

use crate::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Command {
    Simulate,
    TomoState,
    TomoProcess,
    SweepAttenuation,
    SweepWindow,
    Predict,
    Fit,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Self::Simulate => "simulate",
            Self::TomoState => "tomo-state",
            Self::TomoProcess => "tomo-process",
            Self::SweepAttenuation => "sweep-attenuation",
            Self::SweepWindow => "sweep-window",
            Self::Predict => "predict",
            Self::Fit => "fit",
        }
    }

    fn accepts(self, key: &str) -> bool {
        let budget = key.strip_prefix("budget.").is_some_and(|f| {
            matches!(f, "n_hz" | "tau_s" | "p_bsm_hz" | "v0" | "s2_frac" | "v2" | "bob_efficiency")
        });
        match self {
            Self::Simulate => key == "inputs",
            Self::TomoState => matches!(key, "inputs" | "counts"),
            Self::TomoProcess => matches!(key, "probe.H" | "probe.V" | "probe.P" | "probe.R" | "ellipsoid_points"),
            Self::SweepAttenuation => {
                matches!(key, "db_start" | "db_stop" | "db_step" | "target_events" | "pool" | "overlay")
            }
            Self::SweepWindow => matches!(key, "tau_start_ps" | "tau_stop_ps" | "tau_step_ps" | "tags" | "pool"),
            Self::Predict => budget || matches!(key, "db_start" | "db_stop" | "db_step"),
            Self::Fit => budget || key == "sweep",
        }
    }
}

impl fmt::Display for Command {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

const CONFIG_KEYS: [&str; 19] = [
    "source.g1",
    "source.g2",
    "source.xi",
    "n_max",
    "attenuation_db",
    "rep_period_ps",
    "pulses",
    "jitter_sigma_ps",
    "tag_resolution_ps",
    "feed_forward",
    "ff_delay_ps",
    "charlie_state",
    "bob_basis",
    "drift_angle_rad",
    "drift_axis",
    "seed",
    "window_ps",
    "tag_scope",
    "guard_ps",
];

/// A resolved, validated manifest.
#[derive(Clone, Debug)]
pub struct RunManifest {
    pub command: Command,
    pub config: ExperimentConfig,
    pub output_dir: PathBuf,
    pub emit_tags: bool,
    params: BTreeMap<String, String>,
    base_dir: PathBuf,
}

/// Parses `key = value` lines; `#` starts a comment.
pub fn parse_flat(text: &str) -> Result<Vec<(String, String)>, CliError> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| CliError::usage(format!("config line {}: expected 'key = value'", n + 1)))?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(CliError::usage(format!("config line {}: empty key", n + 1)));
        }
        out.push((k.to_string(), v.trim_matches('"').to_string()));
    }
    Ok(out)
}

/// `--key value` or `--key=value` pairs.
pub fn parse_overrides(args: &[String]) -> Result<Vec<(String, String)>, CliError> {
    let mut out = Vec::new();
    let mut it = args.iter();
    while let Some(a) = it.next() {
        let Some(key) = a.strip_prefix("--") else {
            return Err(CliError::usage(format!("unexpected argument '{a}' (overrides take the form --key value)")));
        };
        if let Some((k, v)) = key.split_once('=') {
            out.push((k.to_string(), v.to_string()));
        } else {
            let v = it.next().ok_or_else(|| CliError::usage(format!("override --{key} has no value")))?;
            out.push((key.to_string(), v.clone()));
        }
    }
    Ok(out)
}

fn is_detector_key(k: &str) -> bool {
    if k == "detectors.efficiency" {
        return true;
    }
    let mut parts = k.split('.');
    matches!(
        (parts.next(), parts.next().map(Detector::parse), parts.next(), parts.next()),
        (Some("detectors"), Some(Ok(_)), Some("efficiency" | "dark_rate_hz"), None)
    )
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, CliError>
where
    T::Err: fmt::Display,
{
    v.parse::<T>().map_err(|e| CliError::usage(format!("{key}: cannot parse '{v}': {e}")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool, CliError> {
    match v.to_ascii_lowercase().as_str() {
        "true" | "yes" | "on" | "1" => Ok(true),
        "false" | "no" | "off" | "0" => Ok(false),
        _ => Err(CliError::usage(format!("{key}: expected true or false, got '{v}'"))),
    }
}

fn parse_state(v: &str) -> Result<PureState, CliError> {
    if let Ok(s) = CanonicalState::parse(v) {
        return Ok(s.state());
    }
    let xs: Vec<f64> =
        v.split(',').map(|x| num::<f64>("charlie_state", x.trim())).collect::<Result<_, _>>()?;
    let [ar, ai, br, bi] = xs[..] else {
        return Err(CliError::usage(format!(
            "charlie_state: expected H, V, P, M, R, L or 're,im,re,im', got '{v}'"
        )));
    };
    PureState::normalized(C64::new(ar, ai), C64::new(br, bi)).map_err(|e| CliError::usage(format!("charlie_state: {e}")))
}

fn state_text(s: &PureState) -> String {
    match CanonicalState::identify(s) {
        Some(c) => c.to_string(),
        None => format!("{},{},{},{}", s.alpha().re, s.alpha().im, s.beta().re, s.beta().im),
    }
}

fn apply(cfg: &mut ExperimentConfig, key: &str, v: &str) -> Result<(), CliError> {
    match key {
        "source.g1" => cfg.source.g1 = num(key, v)?,
        "source.g2" => cfg.source.g2 = num(key, v)?,
        "source.xi" => cfg.source.xi = num(key, v)?,
        "n_max" => cfg.n_max = num(key, v)?,
        "attenuation_db" => cfg.attenuation_db = num(key, v)?,
        "rep_period_ps" => cfg.rep_period_ps = num(key, v)?,
        "pulses" => cfg.pulses = count(key, v)?,
        "jitter_sigma_ps" => cfg.jitter_sigma_ps = num(key, v)?,
        "tag_resolution_ps" => cfg.tag_resolution_ps = num(key, v)?,
        "feed_forward" => cfg.feed_forward = parse_bool(key, v)?,
        "ff_delay_ps" => cfg.ff_delay_ps = num(key, v)?,
        "charlie_state" => cfg.charlie_state = parse_state(v)?,
        "bob_basis" => {
            cfg.bob_basis = MeasurementBasis::parse(v).map_err(|e| CliError::usage(format!("bob_basis: {e}")))?
        }
        "drift_angle_rad" => cfg.drift_angle_rad = num(key, v)?,
        "drift_axis" => {
            let xs: Vec<f64> = v.split(',').map(|x| num(key, x.trim())).collect::<Result<_, _>>()?;
            cfg.drift_axis = xs
                .try_into()
                .map_err(|_| CliError::usage(format!("drift_axis: expected three comma-separated numbers, got '{v}'")))?;
        }
        "seed" => cfg.seed = num(key, v)?,
        "window_ps" => cfg.window_ps = num(key, v)?,
        "tag_scope" => cfg.tag_scope = TagScope::parse(v).map_err(|e| CliError::usage(e.to_string()))?,
        "guard_ps" => cfg.guard_ps = num(key, v)?,
        "detectors.efficiency" => {
            let e: f64 = num(key, v)?;
            for d in Detector::ALL {
                cfg.detectors.get_mut(d).efficiency = e;
            }
        }
        _ => {
            let mut parts = key.split('.');
            let (_, d, field) = (parts.next(), parts.next(), parts.next());
            let d = Detector::parse(d.unwrap_or("")).map_err(|e| CliError::usage(format!("{key}: {e}")))?;
            let x: f64 = num(key, v)?;
            match field {
                Some("efficiency") => cfg.detectors.get_mut(d).efficiency = x,
                _ => cfg.detectors.get_mut(d).dark_rate_hz = x,
            }
        }
    }
    Ok(())
}

/// Integer, or `1e8` style as long as it is a whole number.
fn count(key: &str, v: &str) -> Result<u64, CliError> {
    match v.parse::<u64>() {
        Ok(n) => Ok(n),
        Err(_) => whole(key, num(key, v)?),
    }
}

fn whole(key: &str, x: f64) -> Result<u64, CliError> {
    if x.is_finite() && x >= 0.0 && x.fract() == 0.0 && x < 1.8e19 {
        Ok(x as u64)
    } else {
        Err(CliError::usage(format!("{key}: expected a non-negative whole number, got {x}")))
    }
}

/// Canonical `key=value` text of every experiment field.
pub fn config_entries(cfg: &ExperimentConfig) -> Vec<(String, String)> {
    let mut out = vec![
        ("source.g1".to_string(), cfg.source.g1.to_string()),
        ("source.g2".into(), cfg.source.g2.to_string()),
        ("source.xi".into(), cfg.source.xi.to_string()),
        ("n_max".into(), cfg.n_max.to_string()),
        ("attenuation_db".into(), cfg.attenuation_db.to_string()),
        ("rep_period_ps".into(), cfg.rep_period_ps.to_string()),
        ("pulses".into(), cfg.pulses.to_string()),
        ("jitter_sigma_ps".into(), cfg.jitter_sigma_ps.to_string()),
        ("tag_resolution_ps".into(), cfg.tag_resolution_ps.to_string()),
        ("feed_forward".into(), cfg.feed_forward.to_string()),
        ("ff_delay_ps".into(), cfg.ff_delay_ps.to_string()),
        ("charlie_state".into(), state_text(&cfg.charlie_state)),
        ("bob_basis".into(), cfg.bob_basis.to_string()),
        ("drift_angle_rad".into(), cfg.drift_angle_rad.to_string()),
        ("drift_axis".into(), cfg.drift_axis.map(|x| x.to_string()).join(",")),
        ("seed".into(), cfg.seed.to_string()),
        ("window_ps".into(), cfg.window_ps.to_string()),
        ("tag_scope".into(), cfg.tag_scope.label().to_string()),
        ("guard_ps".into(), cfg.guard_ps.to_string()),
    ];
    for d in Detector::ALL {
        let s = cfg.detectors.get(d);
        out.push((format!("detectors.{d}.efficiency"), s.efficiency.to_string()));
        out.push((format!("detectors.{d}.dark_rate_hz"), s.dark_rate_hz.to_string()));
    }
    out
}

impl RunManifest {
    /// Merges file entries and overrides (later wins), then resolves and validates.
    pub fn resolve(
        command: Command,
        config_file: Option<&Path>,
        overrides: &[(String, String)],
    ) -> Result<Self, CliError> {
        let mut raw: BTreeMap<String, String> = BTreeMap::new();
        let mut base_dir = PathBuf::from(".");
        if let Some(path) = config_file {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::usage(format!("cannot read config {}: {e}", path.display())))?;
            raw.extend(parse_flat(&text)?);
            if let Some(dir) = path.parent() {
                base_dir = dir.to_path_buf();
            }
        }
        raw.extend(overrides.iter().cloned());

        let mut config = ExperimentConfig::default();
        let mut params = BTreeMap::new();
        let mut output_dir = PathBuf::from(".");
        let mut emit_tags = false;
        if let Some(v) = raw.get("detectors.efficiency") {
            apply(&mut config, "detectors.efficiency", v)?;
        }
        for (k, v) in &raw {
            match k.as_str() {
                "detectors.efficiency" => {}
                "output_dir" => output_dir = PathBuf::from(v),
                "emit_tags" => emit_tags = parse_bool(k, v)?,
                k if CONFIG_KEYS.contains(&k) || is_detector_key(k) => {
                    apply(&mut config, k, v)?
                }
                k if command.accepts(k) => {
                    params.insert(k.to_string(), v.clone());
                }
                k => return Err(CliError::usage(format!("unknown key '{k}' for command {command}"))),
            }
        }
        config.validate().map_err(|e| CliError::usage(e.to_string()))?;
        let m = Self { command, config, output_dir, emit_tags, params, base_dir };
        m.check_ranges()?;
        Ok(m)
    }

    fn check_ranges(&self) -> Result<(), CliError> {
        match self.command {
            Command::SweepAttenuation | Command::Predict => {
                self.db_range()?;
            }
            Command::SweepWindow => {
                self.tau_range()?;
            }
            _ => {}
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.params.get(key).map(String::as_str)
    }

    pub fn f64_or(&self, key: &str, default: f64) -> Result<f64, CliError> {
        self.get(key).map_or(Ok(default), |v| num(key, v))
    }

    pub fn u64_or(&self, key: &str, default: u64) -> Result<u64, CliError> {
        self.get(key).map_or(Ok(default), |v| count(key, v))
    }

    pub fn bool_or(&self, key: &str, default: bool) -> Result<bool, CliError> {
        self.get(key).map_or(Ok(default), |v| parse_bool(key, v))
    }

    /// Input files are resolved relative to the config file.
    pub fn path(&self, key: &str) -> Option<PathBuf> {
        self.get(key).map(|v| {
            let p = PathBuf::from(v);
            if p.is_absolute() {
                p
            } else {
                self.base_dir.join(p)
            }
        })
    }

    pub fn inputs(&self, default: &[CanonicalState]) -> Result<Vec<CanonicalState>, CliError> {
        let Some(v) = self.get("inputs") else { return Ok(default.to_vec()) };
        let list: Vec<CanonicalState> = v
            .split(',')
            .map(|s| CanonicalState::parse(s).map_err(|e| CliError::usage(format!("inputs: {e}"))))
            .collect::<Result<_, _>>()?;
        if list.is_empty() {
            return Err(CliError::usage("inputs: empty list"));
        }
        Ok(list)
    }

    pub fn db_range(&self) -> Result<Vec<f64>, CliError> {
        let (a, b, s) = (self.f64_or("db_start", 0.0)?, self.f64_or("db_stop", 60.0)?, self.f64_or("db_step", 5.0)?);
        if !(a.is_finite() && b.is_finite() && a >= 0.0 && b >= a) {
            return Err(CliError::usage(format!("attenuation range {a}..{b} dB must be ordered and >= 0")));
        }
        if !(s > 0.0) {
            return Err(CliError::usage(format!("db_step = {s} must be > 0")));
        }
        let n = ((b - a) / s + 1e-9).floor() as usize;
        Ok((0..=n).map(|i| a + i as f64 * s).collect())
    }

    pub fn tau_range(&self) -> Result<Vec<u64>, CliError> {
        let (a, b, s) = (
            self.u64_or("tau_start_ps", 1_000)?,
            self.u64_or("tau_stop_ps", 29_000)?,
            self.u64_or("tau_step_ps", 1_000)?,
        );
        if b < a || s == 0 {
            return Err(CliError::usage(format!("window range {a}..{b} ps step {s} must be ordered with a positive step")));
        }
        if a < self.config.tag_resolution_ps {
            return Err(CliError::usage(format!(
                "tau_start_ps = {a} is below the tag resolution {}",
                self.config.tag_resolution_ps
            )));
        }
        Ok((a..=b).step_by(s as usize).collect())
    }

    /// SHA-256 over the command, every resolved experiment field and the
    /// command keys. The output location does not enter the hash.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(format!("command={}\n", self.command));
        for (k, v) in config_entries(&self.config) {
            h.update(format!("{k}={v}\n"));
        }
        h.update(format!("emit_tags={}\n", self.emit_tags));
        for (k, v) in &self.params {
            h.update(format!("{k}={v}\n"));
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn header(&self) -> String {
        format!("qtele {} seed={} config={}", env!("CARGO_PKG_VERSION"), self.config.seed, self.hash())
    }

    /// Independent seed for a named sub-run.
    pub fn derive_seed(&self, label: &str) -> u64 {
        let d = Sha256::digest(format!("{}/{label}", self.config.seed));
        u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn kv(pairs: &[(&str, &str)]) -> Vec<(String, String)> {
        pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    #[test]
    fn flat_file_and_overrides() {
        let text = "# run\nsource.g1 = 0.05\ndetectors.D5.dark_rate_hz = 10 # per second\n\ncharlie_state = \"P\"\n";
        let entries = parse_flat(text).unwrap();
        assert_eq!(entries.len(), 3);
        let over = parse_overrides(&["--bob_basis".into(), "PM".into(), "--pulses=2e6".into()]).unwrap();
        let all: Vec<_> = entries.into_iter().chain(over).collect();
        let m = RunManifest::resolve(Command::Simulate, None, &all).unwrap();
        assert_eq!(m.config.source.g1, 0.05);
        assert_eq!(m.config.detectors.get(Detector::D5).dark_rate_hz, 10.0);
        assert_eq!(m.config.pulses, 2_000_000);
        assert_eq!(m.config.bob_basis, MeasurementBasis::PM);
        assert_eq!(CanonicalState::identify(&m.config.charlie_state), Some(CanonicalState::P));
    }

    #[test]
    fn per_detector_keys_win_over_global_efficiency() {
        let m = RunManifest::resolve(
            Command::Simulate,
            None,
            &kv(&[("detectors.D6.efficiency", "0.5"), ("detectors.efficiency", "0.9")]),
        )
        .unwrap();
        assert_eq!(m.config.detectors.get(Detector::D1).efficiency, 0.9);
        assert_eq!(m.config.detectors.get(Detector::D6).efficiency, 0.5);
    }

    #[test]
    fn rejects_bad_input() {
        for bad in [
            kv(&[("pulses", "0")]),
            kv(&[("bogus", "1")]),
            kv(&[("db_start", "0")]),
            kv(&[("source.xi", "1.5")]),
            kv(&[("feed_forward", "maybe")]),
            kv(&[("drift_axis", "1,2")]),
        ] {
            let e = RunManifest::resolve(Command::Simulate, None, &bad).unwrap_err();
            assert_eq!(e.code, 2, "{bad:?}");
        }
        let e = RunManifest::resolve(Command::Predict, None, &kv(&[("db_start", "10"), ("db_stop", "5")])).unwrap_err();
        assert!(e.message.contains("ordered"));
        assert!(parse_overrides(&["--seed".into()]).is_err());
        assert!(parse_flat("no equals sign").is_err());
    }

    #[test]
    fn hash_tracks_content_not_location() {
        let a = RunManifest::resolve(Command::Simulate, None, &kv(&[("seed", "3")])).unwrap();
        let b = RunManifest::resolve(Command::Simulate, None, &kv(&[("seed", "3"), ("output_dir", "/tmp/x")])).unwrap();
        let c = RunManifest::resolve(Command::Simulate, None, &kv(&[("seed", "4")])).unwrap();
        assert_eq!(a.hash(), b.hash());
        assert_ne!(a.hash(), c.hash());
        assert_eq!(a.hash().len(), 64);
        assert_ne!(a.derive_seed("H"), a.derive_seed("V"));
    }

    #[test]
    fn config_entries_round_trip() {
        let mut cfg = ExperimentConfig::ideal();
        cfg.drift_axis = [0.0, 0.5, 1.0];
        cfg.charlie_state = PureState::normalized(C64::new(0.6, 0.0), C64::new(0.0, 0.8)).unwrap();
        let back = RunManifest::resolve(Command::Simulate, None, &config_entries(&cfg)).unwrap();
        assert_eq!(back.config, cfg);
    }

    #[test]
    fn ranges() {
        let m = RunManifest::resolve(Command::Predict, None, &kv(&[("db_step", "10")])).unwrap();
        assert_eq!(m.db_range().unwrap(), vec![0.0, 10.0, 20.0, 30.0, 40.0, 50.0, 60.0]);
        let w = RunManifest::resolve(Command::SweepWindow, None, &kv(&[("tau_step_ps", "14000")])).unwrap();
        assert_eq!(w.tau_range().unwrap(), vec![1_000, 15_000, 29_000]);
    }
}
