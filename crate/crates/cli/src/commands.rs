use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::time::Instant;

use qtele_core::coincidence::{
    effective_window_ps, find_fourfolds, visibility_with_error, window_sweep, write_sweep_csv, CoincidenceWindow,
    Expectation,
};
use qtele_core::experiment::{self, reference_budget, ExperimentConfig, PulseModel, RunStats};
use qtele_core::linkmodel::{
    crossover_db, crossover_eta_closed_form, fit_budget, predict_rate_visibility, snr, write_predictions_csv,
    LinkBudget, SweepPoint,
};
use qtele_core::qstate::{fidelity, CanonicalState, DensityMatrix, MeasurementBasis, PureState};
use qtele_core::tags::{read_qtt, read_tags_csv, write_qtt, Detector, TimeTag};
use qtele_core::tomography::{
    bloch_map, mle_state, process_fidelity, process_from_pairs, read_counts_csv, write_counts_csv, ChiArrays,
    MleDiagnostics, ProcessMatrix, TomographyCounts, PROBES,
};
use serde::Serialize;
use serde_json::json;

use crate::manifest::{config_entries, Command, RunManifest};
use crate::output::OutputSet;
use crate::CliError;

pub fn execute(m: &RunManifest, out: &mut OutputSet) -> Result<(), CliError> {
    match m.command {
        Command::Simulate => simulate(m, out),
        Command::TomoState => tomo_state(m, out),
        Command::TomoProcess => tomo_process(m, out),
        Command::SweepAttenuation => sweep_attenuation(m, out),
        Command::SweepWindow => sweep_window(m, out),
        Command::Predict => predict(m, out),
        Command::Fit => fit(m, out),
    }
}

/// Analyzed result of one simulated stream.
struct Acquisition {
    n_plus: u64,
    n_minus: u64,
    /// All four-fold groups, ambiguous ones included.
    events: u64,
    duration_s: f64,
    stats: RunStats,
    tags: Vec<TimeTag>,
}

fn window_of(cfg: &ExperimentConfig) -> Result<CoincidenceWindow, CliError> {
    Ok(CoincidenceWindow::new(cfg.window_ps, cfg.tag_resolution_ps)?)
}

fn acquire(
    m: &RunManifest,
    base: &ExperimentConfig,
    input: &PureState,
    basis: MeasurementBasis,
    label: &str,
) -> Result<Acquisition, CliError> {
    let cfg = ExperimentConfig { charlie_state: *input, bob_basis: basis, seed: m.derive_seed(label), ..base.clone() };
    let run = experiment::run(&cfg)?;
    let events = find_fourfolds(&run.tags, window_of(&cfg)?)?;
    let (mut n_plus, mut n_minus) = (0, 0);
    for e in events.iter().filter(|e| !e.ambiguous) {
        match e.bob_detector {
            Detector::D5 => n_plus += 1,
            _ => n_minus += 1,
        }
    }
    Ok(Acquisition {
        n_plus,
        n_minus,
        events: events.len() as u64,
        duration_s: cfg.duration_s(),
        stats: run.stats,
        tags: run.tags,
    })
}

fn ratio(a: u64, n: u64) -> Option<f64> {
    (n > 0).then(|| a as f64 / n as f64)
}

fn canonical_input(cfg: &ExperimentConfig) -> Result<CanonicalState, CliError> {
    let s = CanonicalState::identify(&cfg.charlie_state)
        .ok_or_else(|| CliError::usage("charlie_state must be one of H, V, P, M, R, L for this command"))?;
    if s.basis().0 != cfg.bob_basis {
        return Err(CliError::usage(format!("charlie_state {s} is not an eigenstate of bob_basis {}", cfg.bob_basis)));
    }
    Ok(s)
}

fn partner(s: CanonicalState) -> CanonicalState {
    use CanonicalState::*;
    match s {
        H => V,
        V => H,
        P => M,
        M => P,
        R => L,
        L => R,
    }
}

fn emit_tags(out: &mut OutputSet, name: &str, cfg: &ExperimentConfig, tags: &[TimeTag]) -> Result<(), CliError> {
    let w = out.create(name)?;
    write_qtt(w, cfg.tag_resolution_ps as u32, tags)?;
    Ok(())
}

fn simulate(m: &RunManifest, out: &mut OutputSet) -> Result<(), CliError> {
    let start = Instant::now();
    let inputs = m.inputs(&CanonicalState::ALL)?;
    let mut rows = Vec::new();
    let mut per_basis = std::collections::BTreeMap::<String, (u64, u64)>::new();
    let mut total = 0;
    for s in &inputs {
        let (basis, plus) = s.basis();
        let a = acquire(m, &m.config, &s.state(), basis, &format!("simulate/{s}"))?;
        if m.emit_tags {
            emit_tags(out, &format!("tags_{s}.qtt"), &m.config, &a.tags)?;
        }
        let correct = if plus { a.n_plus } else { a.n_minus };
        let n = a.n_plus + a.n_minus;
        let e = per_basis.entry(basis.to_string()).or_default();
        e.0 += correct;
        e.1 += n;
        total += a.events;
        let model_cfg = ExperimentConfig { charlie_state: s.state(), bob_basis: basis, ..m.config.clone() };
        rows.push((*s, basis, a, ratio(correct, n), PulseModel::new(&model_cfg)?.expected_fidelity().ok()));
    }

    let mut w = out.create("counts.csv")?;
    writeln!(w, "# {}", out.header())?;
    writeln!(w, "input,basis,n_plus,n_minus,n_events")?;
    for (s, b, a, _, _) in &rows {
        writeln!(w, "{s},{b},{},{},{}", a.n_plus, a.n_minus, a.events)?;
    }
    w.flush()?;
    drop(w);

    let fids: Vec<f64> = rows.iter().filter_map(|r| r.3).collect();
    let avg = (!fids.is_empty()).then(|| fids.iter().sum::<f64>() / fids.len() as f64);
    let per_input: Vec<_> = rows
        .iter()
        .map(|(s, b, a, f, model)| {
            json!({
                "input": s.label(),
                "basis": b.label(),
                "n_plus": a.n_plus,
                "n_minus": a.n_minus,
                "fourfolds": a.events,
                "fidelity": f,
                "model_fidelity": model,
                "genuine_fourfolds": a.stats.genuine_fourfolds,
                "herald_probability": a.stats.herald_probability,
                "duration_s": a.duration_s,
            })
        })
        .collect();
    let basis_fid: serde_json::Map<String, serde_json::Value> =
        per_basis.iter().map(|(b, (c, n))| (b.clone(), json!(ratio(*c, *n)))).collect();
    let summary = json!({
        "command": "simulate",
        "seed": m.config.seed,
        "config_hash": m.hash(),
        "inputs": per_input,
        "per_basis_fidelity": basis_fid,
        "average_fidelity": avg,
        "visibility": avg.map(|f| 2.0 * f - 1.0),
        "total_fourfolds": total,
        "window_ps": m.config.window_ps,
        "config": config_map(&m.config),
        "wall_time_s": start.elapsed().as_secs_f64(),
    });
    out.write_json("summary.json", &summary)
}

fn config_map(cfg: &ExperimentConfig) -> serde_json::Map<String, serde_json::Value> {
    config_entries(cfg).into_iter().map(|(k, v)| (k, json!(v))).collect()
}

#[derive(Serialize)]
struct Complex2 {
    re: [[f64; 2]; 2],
    im: [[f64; 2]; 2],
}

impl From<&DensityMatrix> for Complex2 {
    fn from(rho: &DensityMatrix) -> Self {
        let m = rho.matrix();
        Self {
            re: [[m[(0, 0)].re, m[(0, 1)].re], [m[(1, 0)].re, m[(1, 1)].re]],
            im: [[m[(0, 0)].im, m[(0, 1)].im], [m[(1, 0)].im, m[(1, 1)].im]],
        }
    }
}

#[derive(Serialize)]
struct StateReport {
    input: Option<String>,
    counts: TomographyCounts,
    rho: Complex2,
    bloch: [f64; 3],
    purity: f64,
    fidelity: Option<f64>,
    mle: MleDiagnostics,
}

fn reconstruct(input: Option<CanonicalState>, counts: TomographyCounts) -> Result<(DensityMatrix, StateReport), CliError> {
    let est = mle_state(&counts)?;
    let b = est.rho.bloch_vector();
    let report = StateReport {
        input: input.map(|s| s.to_string()),
        counts,
        rho: Complex2::from(&est.rho),
        bloch: [b[0], b[1], b[2]],
        purity: est.rho.purity(),
        fidelity: input.map(|s| fidelity(&s.state(), &est.rho)),
        mle: est.diagnostics,
    };
    Ok((est.rho, report))
}

/// Six-state analyzer counts of one input, one simulated run per basis.
fn acquire_tomography(m: &RunManifest, s: CanonicalState) -> Result<TomographyCounts, CliError> {
    let mut counts = TomographyCounts::default();
    for b in MeasurementBasis::ALL {
        let a = acquire(m, &m.config, &s.state(), b, &format!("{}/{s}/{b}", m.command))?;
        counts.set(b, (a.n_plus, a.n_minus));
    }
    Ok(counts)
}

fn write_counts(out: &mut OutputSet, name: &str, counts: &TomographyCounts) -> Result<(), CliError> {
    let header = out.header().to_string();
    let w = out.create(name)?;
    write_counts_csv(w, Some(&header), counts)?;
    Ok(())
}

fn tomo_state(m: &RunManifest, out: &mut OutputSet) -> Result<(), CliError> {
    if let Some(path) = m.path("counts") {
        let counts = read_counts_csv(open(&path, "counts")?)?;
        let input = CanonicalState::identify(&m.config.charlie_state);
        let (_, report) = reconstruct(input, counts)?;
        return out.write_json("state.json", &json!({ "command": "tomo-state", "states": [report] }));
    }
    let mut reports = Vec::new();
    for s in m.inputs(&CanonicalState::ALL)? {
        let counts = acquire_tomography(m, s)?;
        write_counts(out, &format!("counts_{s}.csv"), &counts)?;
        reports.push(reconstruct(Some(s), counts)?.1);
    }
    let fids: Vec<f64> = reports.iter().filter_map(|r| r.fidelity).collect();
    let avg = fids.iter().sum::<f64>() / fids.len() as f64;
    out.write_json(
        "state.json",
        &json!({ "command": "tomo-state", "states": reports, "average_fidelity": avg }),
    )
}

fn open(path: &Path, what: &str) -> Result<BufReader<std::fs::File>, CliError> {
    std::fs::File::open(path)
        .map(BufReader::new)
        .map_err(|e| CliError::usage(format!("{what}: cannot open {}: {e}", path.display())))
}

fn tomo_process(m: &RunManifest, out: &mut OutputSet) -> Result<(), CliError> {
    let keys = PROBES.map(|p| format!("probe.{p}"));
    let given: Vec<bool> = keys.iter().map(|k| m.get(k).is_some()).collect();
    let from_files = given.iter().any(|g| *g);
    let mut counts = Vec::new();
    for (p, key) in PROBES.iter().zip(&keys) {
        let c = if from_files {
            let path = m.path(key).ok_or_else(|| CliError::usage(format!("missing probe {p}: set {key}")))?;
            if !path.is_file() {
                return Err(CliError::usage(format!("missing probe {p}: no file at {}", path.display())));
            }
            read_counts_csv(open(&path, key)?)?
        } else {
            let c = acquire_tomography(m, *p)?;
            write_counts(out, &format!("counts_{p}.csv"), &c)?;
            c
        };
        counts.push(c);
    }
    let mut outputs = Vec::new();
    let mut reports = Vec::new();
    for (p, c) in PROBES.iter().zip(counts) {
        let (rho, r) = reconstruct(Some(*p), c)?;
        outputs.push(rho);
        reports.push(r);
    }
    let outputs: [DensityMatrix; 4] = outputs.try_into().expect("four probes");
    let rec = process_from_pairs(&PROBES.map(|p| p.state()), &outputs)?;
    let ideal = ProcessMatrix::identity();
    let f_raw = rec.raw[(0, 0)].re;
    let f = process_fidelity(&rec.projected, &ideal);
    let map = bloch_map(&rec.projected);
    let n_points = m.u64_or("ellipsoid_points", 1024)? as usize;

    let header = out.header().to_string();
    let mut w = out.create("ellipsoid.csv")?;
    writeln!(w, "# {header}")?;
    writeln!(w, "x,y,z")?;
    for r in map.deformed_sphere(n_points) {
        writeln!(w, "{:.9},{:.9},{:.9}", r[0], r[1], r[2])?;
    }
    w.flush()?;
    drop(w);

    let rows = |k: usize| [map.m[(k, 0)], map.m[(k, 1)], map.m[(k, 2)]];
    out.write_json(
        "process.json",
        &json!({
            "command": "tomo-process",
            "feed_forward": m.config.feed_forward,
            "probes": PROBES.map(|p| p.label()),
            "source": if from_files { "files" } else { "simulation" },
            "chi_raw": ChiArrays::from(&rec.raw),
            "chi_projected": ChiArrays::from(rec.projected.matrix()),
            "f_process": f,
            "f_process_raw": f_raw,
            "bloch_map": { "m": [rows(0), rows(1), rows(2)], "c": [map.c[0], map.c[1], map.c[2]] },
            "probe_states": reports,
        }),
    )
}

fn sweep_attenuation(m: &RunManifest, out: &mut OutputSet) -> Result<(), CliError> {
    let input = canonical_input(&m.config)?;
    let mut streams = vec![input];
    if m.bool_or("pool", true)? {
        streams.push(partner(input));
    }
    let target = m.u64_or("target_events", 0)?;
    let overlay = m.bool_or("overlay", true)?;
    let window = window_of(&m.config)?;
    let rep_rate = 1e12 / m.config.rep_period_ps as f64;
    let tau_eff = effective_window_ps(window, m.config.jitter_sigma_ps, m.config.tag_resolution_ps) * 1e-12;
    let dark = m.config.detectors.bob_dark_rate_hz();

    let header = out.header().to_string();
    let mut w = out.create("attenuation_sweep.csv")?;
    writeln!(w, "# {header}")?;
    write!(w, "attenuation_db,rate_hz,visibility,snr,rate_err,visibility_err,n_events,pulses")?;
    writeln!(w, "{}", if overlay { ",model_rate_hz,model_visibility,model_snr" } else { "" })?;
    for db in m.db_range()? {
        let mut cfg = ExperimentConfig { attenuation_db: db, ..m.config.clone() };
        let budget = reference_budget(&cfg, window)?;
        if target > 0 {
            let per_pulse = budget.rate_hz() / rep_rate;
            let need = (target as f64 / streams.len() as f64 / per_pulse).ceil();
            cfg.pulses = if need.is_finite() { (need as u64).clamp(1, m.config.pulses) } else { m.config.pulses };
        }
        let (mut correct, mut wrong, mut events, mut duration, mut herald_hz) = (0, 0, 0, 0.0, 0.0);
        for s in &streams {
            let (basis, plus) = s.basis();
            let a = acquire(m, &cfg, &s.state(), basis, &format!("sweep-attenuation/{db}/{s}"))?;
            let (c, x) = if plus { (a.n_plus, a.n_minus) } else { (a.n_minus, a.n_plus) };
            correct += c;
            wrong += x;
            events += a.events;
            duration += a.duration_s;
            herald_hz = a.stats.herald_probability * rep_rate;
        }
        let rate = events as f64 / duration;
        let rate_err = (events.max(1) as f64).sqrt() / duration;
        let (vis, vis_err) = visibility_with_error(correct, wrong).unwrap_or((f64::NAN, f64::NAN));
        let accidental = herald_hz * dark * tau_eff;
        let snr_mc = if accidental > 0.0 { (rate - accidental) / accidental } else { f64::INFINITY };
        write!(
            w,
            "{db},{rate:.9e},{vis:.6},{snr_mc:.6e},{rate_err:.9e},{vis_err:.6},{events},{}",
            cfg.pulses
        )?;
        if overlay {
            let b = budget.at(db);
            write!(w, ",{:.9e},{:.6},{:.6e}", b.rate_hz(), b.visibility(), snr(&b))?;
        }
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

fn read_tag_file(path: &Path) -> Result<Vec<TimeTag>, CliError> {
    let is_csv = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv"));
    let r = open(path, "tags")?;
    let mut tags = if is_csv { read_tags_csv(r)? } else { read_qtt(r)?.1 };
    tags.sort_unstable();
    Ok(tags)
}

fn sweep_window(m: &RunManifest, out: &mut OutputSet) -> Result<(), CliError> {
    let taus = m.tau_range()?;
    let windows: Vec<CoincidenceWindow> = taus
        .iter()
        .map(|t| CoincidenceWindow::new(*t, m.config.tag_resolution_ps))
        .collect::<Result<_, _>>()?;
    let input = canonical_input(&m.config)?;
    let mut streams: Vec<(Vec<TimeTag>, Expectation)> = Vec::new();
    if let Some(path) = m.path("tags") {
        streams.push((read_tag_file(&path)?, Expectation::new(input, m.config.bob_basis)?));
    } else {
        // the recorded neighbourhood must cover the widest window
        let cfg = ExperimentConfig { guard_ps: m.config.guard_ps.max(*taus.last().expect("non-empty")), ..m.config.clone() };
        let mut inputs = vec![input];
        if m.bool_or("pool", true)? {
            inputs.push(partner(input));
        }
        for s in inputs {
            let basis = s.basis().0;
            let a = acquire(m, &cfg, &s.state(), basis, &format!("sweep-window/{s}"))?;
            if m.emit_tags {
                emit_tags(out, &format!("tags_{s}.qtt"), &cfg, &a.tags)?;
            }
            streams.push((a.tags, Expectation::new(s, basis)?));
        }
    }
    let refs: Vec<(&[TimeTag], Expectation)> = streams.iter().map(|(t, e)| (t.as_slice(), *e)).collect();
    let rows = window_sweep(&refs, &windows)?;
    let header = out.header().to_string();
    let w = out.create("window_sweep.csv")?;
    write_sweep_csv(w, Some(&header), &rows)?;
    Ok(())
}

/// Reference budget of the configuration with `budget.*` keys applied on top.
fn budget_for(m: &RunManifest) -> Result<LinkBudget, CliError> {
    let mut b = reference_budget(&m.config, window_of(&m.config)?)?;
    b.n_hz = m.f64_or("budget.n_hz", b.n_hz)?;
    b.tau_s = m.f64_or("budget.tau_s", b.tau_s)?;
    b.p_bsm_hz = m.f64_or("budget.p_bsm_hz", b.p_bsm_hz)?;
    b.v0 = m.f64_or("budget.v0", b.v0)?;
    b.s2_frac = m.f64_or("budget.s2_frac", b.s2_frac)?;
    b.v2 = m.f64_or("budget.v2", b.v2)?;
    b.bob_efficiency = m.f64_or("budget.bob_efficiency", b.bob_efficiency)?;
    b.validate().map_err(|e| CliError::usage(e.to_string()))?;
    Ok(b)
}

fn predict(m: &RunManifest, out: &mut OutputSet) -> Result<(), CliError> {
    let budget = budget_for(m)?;
    let rows = predict_rate_visibility(&budget, &m.db_range()?);
    let header = out.header().to_string();
    let w = out.create("predict.csv")?;
    write_predictions_csv(w, Some(&header), &rows)?;
    let eta_star = crossover_eta_closed_form(&budget);
    out.write_json(
        "predict.json",
        &json!({
            "command": "predict",
            "budget": budget,
            "crossover_db": crossover_db(&budget),
            "crossover_transmission_closed_form": eta_star,
        }),
    )
}

/// Reads the columns the fit needs from an attenuation-sweep CSV by header name.
/// Rows without a defined visibility are skipped.
fn read_sweep_points(path: &Path) -> Result<(Vec<SweepPoint>, usize), CliError> {
    let bad = |msg: String| CliError::usage(format!("{}: {msg}", path.display()));
    let mut lines = open(path, "sweep")?
        .lines()
        .map_while(Result::ok)
        .filter(|l| !l.trim().is_empty() && !l.starts_with('#'));
    let header: Vec<String> =
        lines.next().ok_or_else(|| bad("empty file".into()))?.split(',').map(|s| s.trim().to_string()).collect();
    let names = ["attenuation_db", "rate_hz", "rate_err", "visibility", "visibility_err"];
    let idx: Vec<usize> = names
        .iter()
        .map(|n| header.iter().position(|h| h == n).ok_or_else(|| bad(format!("missing column {n}"))))
        .collect::<Result<_, _>>()?;
    let (mut points, mut skipped) = (Vec::new(), 0);
    for (i, line) in lines.enumerate() {
        let cols: Vec<&str> = line.split(',').collect();
        let v: Vec<f64> = idx
            .iter()
            .map(|&j| {
                let s = cols.get(j).ok_or_else(|| bad(format!("row {}: too few columns", i + 1)))?;
                s.trim().parse::<f64>().map_err(|e| bad(format!("row {}: '{s}': {e}", i + 1)))
            })
            .collect::<Result<_, _>>()?;
        if !v[3].is_finite() {
            skipped += 1;
            continue;
        }
        points.push(SweepPoint {
            attenuation_db: v[0],
            rate_hz: v[1],
            rate_err: v[2],
            visibility: v[3],
            visibility_err: v[4],
        });
    }
    Ok((points, skipped))
}

fn fit(m: &RunManifest, out: &mut OutputSet) -> Result<(), CliError> {
    let path = m.path("sweep").ok_or_else(|| CliError::usage("fit needs 'sweep' (an attenuation sweep CSV)"))?;
    let (points, skipped) = read_sweep_points(&path)?;
    let known = budget_for(m)?;
    let report = fit_budget(&points, &known)?;
    out.write_json(
        "fit.json",
        &json!({
            "command": "fit",
            "points": points.len(),
            "skipped_rows": skipped,
            "report": report,
            "identifiable": report.is_identifiable(),
        }),
    )
}
