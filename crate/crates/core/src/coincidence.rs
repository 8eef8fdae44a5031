//! Four-fold coincidence extraction from time-tag streams.
//!
//! The scan is greedy and anchor-relative: the earliest unconsumed tag opens
//! a window `[anchor, anchor + tau]`. If the window holds a herald tag, a Bob
//! tag and a pair of BSM detectors forming a Ψ± pattern, one event is emitted
//! and the earliest tag of each role is consumed; otherwise the anchor is
//! discarded. Windows holding more than one candidate per role still yield an
//! event but are flagged ambiguous and left out of visibility counts.

use std::collections::VecDeque;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fockoptics::{classify_pattern, BsmDetector, BsmOutcome, ClickPattern};
use crate::linkmodel::ClassicalBounds;
use crate::qstate::{CanonicalState, MeasurementBasis};
use crate::tags::{Detector, TimeTag};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct CoincidenceWindow {
    pub tau_ps: u64,
}

impl CoincidenceWindow {
    pub fn new(tau_ps: u64, resolution_ps: u64) -> Result<Self> {
        if tau_ps == 0 || tau_ps < resolution_ps {
            return Err(Error::Validation(format!(
                "window {tau_ps} ps must be positive and at least the tag resolution {resolution_ps} ps"
            )));
        }
        Ok(Self { tau_ps })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FourfoldEvent {
    pub bsm_pattern: ClickPattern,
    /// D5 or D6.
    pub bob_detector: Detector,
    pub trig_time_ps: u64,
    /// Earliest of the four role tags.
    pub epoch_time_ps: u64,
    /// More than one candidate tag for some role was inside the window.
    pub ambiguous: bool,
}

impl FourfoldEvent {
    pub fn outcome(&self) -> BsmOutcome {
        classify_pattern(self.bsm_pattern)
    }
}

/// Ψ⁻ pairs first, then Ψ⁺.
const PAIRS: [(BsmDetector, BsmDetector); 4] = [
    (BsmDetector::D1, BsmDetector::D4),
    (BsmDetector::D2, BsmDetector::D3),
    (BsmDetector::D1, BsmDetector::D2),
    (BsmDetector::D3, BsmDetector::D4),
];

/// Streaming scanner; memory is bounded by the number of tags in one window.
pub struct FourfoldScanner<I> {
    input: I,
    tau: u64,
    buf: VecDeque<TimeTag>,
    last: Option<TimeTag>,
    done: bool,
    failed: bool,
}

impl<I: Iterator<Item = TimeTag>> FourfoldScanner<I> {
    pub fn new(input: I, window: CoincidenceWindow) -> Self {
        Self { input, tau: window.tau_ps, buf: VecDeque::new(), last: None, done: false, failed: false }
    }

    /// Pulls tags until the buffer covers `[front, front + tau]`.
    fn fill(&mut self) -> Result<()> {
        while !self.done {
            if let (Some(f), Some(b)) = (self.buf.front(), self.buf.back()) {
                if b.time_ps > f.time_ps.saturating_add(self.tau) {
                    break;
                }
            }
            match self.input.next() {
                None => self.done = true,
                Some(t) => {
                    if let Some(prev) = self.last {
                        if t < prev {
                            return Err(Error::Validation(format!(
                                "tag stream not sorted: {} @ {} follows {} @ {}",
                                t.detector, t.time_ps, prev.detector, prev.time_ps
                            )));
                        }
                    }
                    self.last = Some(t);
                    self.buf.push_back(t);
                }
            }
        }
        Ok(())
    }

    /// Inspects the window of the current anchor; on success consumes the role tags.
    fn try_event(&mut self) -> Option<FourfoldEvent> {
        let anchor = self.buf.front()?.time_ps;
        let end = anchor.saturating_add(self.tau);
        let mut first = [None::<usize>; 7];
        let mut seen = [0u32; 7];
        for (i, t) in self.buf.iter().enumerate().take_while(|(_, t)| t.time_ps <= end) {
            let d = t.detector.id() as usize;
            seen[d] += 1;
            first[d].get_or_insert(i);
        }
        let trig = first[Detector::Trig.id() as usize]?;
        let bob = match (first[Detector::D5.id() as usize], first[Detector::D6.id() as usize]) {
            (Some(a), Some(b)) => a.min(b),
            (Some(a), None) | (None, Some(a)) => a,
            (None, None) => return None,
        };
        let at = |d: BsmDetector| first[d as usize];
        let (pair, (i, j)) = PAIRS
            .iter()
            .filter_map(|(a, b)| Some(((*a, *b), (at(*a)?, at(*b)?))))
            .min_by_key(|(_, (i, j))| *i.max(j))?;

        let bsm_present = (0..4).filter(|d| seen[*d] > 0).count();
        let ambiguous = bsm_present != 2
            || seen[..4].iter().any(|n| *n > 1)
            || seen[Detector::Trig.id() as usize] > 1
            || seen[Detector::D5.id() as usize] + seen[Detector::D6.id() as usize] > 1;

        let ev = FourfoldEvent {
            bsm_pattern: ClickPattern::from_detectors(&[pair.0, pair.1]),
            bob_detector: self.buf[bob].detector,
            trig_time_ps: self.buf[trig].time_ps,
            epoch_time_ps: [i, j, trig, bob].iter().map(|k| self.buf[*k].time_ps).min().expect("four roles"),
            ambiguous,
        };
        let mut roles = [i, j, trig, bob];
        roles.sort_unstable();
        for k in roles.iter().rev() {
            self.buf.remove(*k);
        }
        Some(ev)
    }
}

impl<I: Iterator<Item = TimeTag>> Iterator for FourfoldScanner<I> {
    type Item = Result<FourfoldEvent>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.failed {
            return None;
        }
        loop {
            if let Err(e) = self.fill() {
                self.failed = true;
                return Some(Err(e));
            }
            if self.buf.is_empty() {
                return None;
            }
            if let Some(ev) = self.try_event() {
                return Some(Ok(ev));
            }
            self.buf.pop_front();
        }
    }
}

pub fn find_fourfolds(tags: &[TimeTag], window: CoincidenceWindow) -> Result<Vec<FourfoldEvent>> {
    FourfoldScanner::new(tags.iter().copied(), window).collect()
}

/// Which Bob detector reports the state Charlie sent.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Expectation {
    pub charlie: CanonicalState,
    pub basis: MeasurementBasis,
}

impl Expectation {
    pub fn new(charlie: CanonicalState, basis: MeasurementBasis) -> Result<Self> {
        if charlie.basis().0 != basis {
            return Err(Error::Validation(format!(
                "input {charlie} is not an eigenstate of the {basis} analysis basis"
            )));
        }
        Ok(Self { charlie, basis })
    }

    pub fn correct_detector(&self) -> Detector {
        if self.charlie.basis().1 {
            Detector::D5
        } else {
            Detector::D6
        }
    }
}

/// Correct/wrong tallies over unambiguous events.
pub fn tally(events: &[FourfoldEvent], expect: &Expectation) -> (u64, u64) {
    let good = expect.correct_detector();
    events.iter().filter(|e| !e.ambiguous).fold((0, 0), |(c, w), e| {
        if e.bob_detector == good {
            (c + 1, w)
        } else {
            (c, w + 1)
        }
    })
}

/// Visibility (c − w)/(c + w) and its Poisson error 2·sqrt(c·w/N³).
///
/// A zero tally is replaced by one in the error so a perfect record does not
/// report an infinitely sharp visibility.
pub fn visibility_with_error(correct: u64, wrong: u64) -> Option<(f64, f64)> {
    let n = (correct + wrong) as f64;
    if n == 0.0 {
        return None;
    }
    let v = (correct as f64 - wrong as f64) / n;
    let sigma = 2.0 * ((correct.max(1) as f64) * (wrong.max(1) as f64) / n.powi(3)).sqrt();
    Some((v, sigma))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub tau_ps: u64,
    pub n_events: u64,
    pub visibility: Option<f64>,
    pub visibility_err: Option<f64>,
    pub sigma_violation: Option<f64>,
}

/// Sweeps the window over one or more streams; tallies of all streams are pooled per τ.
pub fn window_sweep(streams: &[(&[TimeTag], Expectation)], taus: &[CoincidenceWindow]) -> Result<Vec<SweepRow>> {
    if let Some((_, _)) = streams.iter().find(|(t, _)| !crate::tags::is_sorted(t)) {
        return Err(Error::Validation("tag stream not sorted".into()));
    }
    use rayon::prelude::*;
    taus.par_iter()
        .map(|w| {
            let (mut n, mut c, mut wr) = (0u64, 0u64, 0u64);
            for (tags, expect) in streams {
                let events = find_fourfolds(tags, *w)?;
                let (ci, wi) = tally(&events, expect);
                n += events.len() as u64;
                c += ci;
                wr += wi;
            }
            let vs = visibility_with_error(c, wr);
            Ok(SweepRow {
                tau_ps: w.tau_ps,
                n_events: n,
                visibility: vs.map(|(v, _)| v),
                visibility_err: vs.map(|(_, s)| s),
                sigma_violation: vs.map(|(v, s)| (v - ClassicalBounds::V_CL) / s),
            })
        })
        .collect()
}

/// Width of the interval in which an uncorrelated Bob click joins a herald:
/// 2τ minus the mean spread of the three Alice tags (3σ/√π for Gaussian
/// jitter), plus one tag bin because both window edges are inclusive.
pub fn effective_window_ps(window: CoincidenceWindow, jitter_sigma_ps: f64, resolution_ps: u64) -> f64 {
    let spread = 3.0 * jitter_sigma_ps / std::f64::consts::PI.sqrt();
    (2.0 * window.tau_ps as f64 - spread + resolution_ps as f64).max(0.0)
}

pub fn write_sweep_csv<W: Write>(mut w: W, comment: Option<&str>, rows: &[SweepRow]) -> Result<()> {
    if let Some(c) = comment {
        writeln!(w, "# {c}")?;
    }
    writeln!(w, "tau_ps,n_events,visibility,sigma_violation,visibility_err")?;
    let opt = |x: Option<f64>| x.map_or_else(|| "NaN".to_string(), |v| format!("{v:.6}"));
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{}",
            r.tau_ps,
            r.n_events,
            opt(r.visibility),
            opt(r.sigma_violation),
            opt(r.visibility_err)
        )?;
    }
    w.flush()?;
    Ok(())
}

/// Product-of-singles four-fold accidental rate `p_BSM · n · τ`.
///
/// `herald_rate_hz` is the rate of heralded BSM three-folds and
/// `bob_rates_hz` the uncorrelated singles of Bob's detectors.
pub fn accidental_rate(herald_rate_hz: f64, bob_rates_hz: &[f64], window: CoincidenceWindow) -> Result<f64> {
    if herald_rate_hz < 0.0 || bob_rates_hz.iter().any(|r| *r < 0.0 || !r.is_finite()) || !herald_rate_hz.is_finite() {
        return Err(Error::Validation("rates must be finite and >= 0".into()));
    }
    Ok(herald_rate_hz * bob_rates_hz.iter().sum::<f64>() * window.tau_ps as f64 * 1e-12)
}

/// Accidentals from Bob clicks of neighbouring laser pulses: every pulse
/// slot inside the window after the herald adds `bob_click_probability`.
pub fn pulsed_accidental_rate(
    herald_rate_hz: f64,
    bob_click_probability: f64,
    window: CoincidenceWindow,
    rep_period_ps: u64,
) -> Result<f64> {
    if rep_period_ps == 0 || !(0.0..=1.0).contains(&bob_click_probability) || !(herald_rate_hz >= 0.0) {
        return Err(Error::Validation("invalid pulsed accidental inputs".into()));
    }
    Ok(herald_rate_hz * bob_click_probability * (window.tau_ps / rep_period_ps) as f64)
}
