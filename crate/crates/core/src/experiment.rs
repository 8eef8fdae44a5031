//! Monte-Carlo pulse engine.
//!
//! The per-pulse physics is fixed by the configuration, so the Fock state,
//! beam splitter and Alice-side photon-number distribution are computed once
//! into a [`PulseModel`]. Runs then skip directly between pulses that can
//! produce a recordable event (geometric gaps), which keeps the cost
//! proportional to the number of recorded clicks rather than the number of
//! laser pulses. Pulses are processed in fixed-size blocks with independent
//! sub-seeded random streams, so the output does not depend on how many
//! threads execute the blocks.

use std::f64::consts::PI;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Geometric, Normal, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::coincidence::{effective_window_ps, CoincidenceWindow};
use crate::error::{Error, Result};
use crate::fockoptics::{
    beam_splitter, classify_pattern, spdc_state, BobState, BsmOutcome, ClickPattern, ConditionalTable, SourceParams,
};
use crate::linkmodel::LinkBudget;
use crate::qstate::{c, CanonicalState, DensityMatrix, Mat2, MeasurementBasis, Pauli, PureState};
use crate::tags::{Detector, TimeTag};

/// Pulses per independently seeded block.
pub const BLOCK_PULSES: u64 = 1 << 26;

/// Efficiency and dark-count rate of one detector.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectorSpec {
    pub efficiency: f64,
    pub dark_rate_hz: f64,
}

/// Per-detector parameters indexed by [`Detector`] id.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectorTable(pub [DetectorSpec; 7]);

impl DetectorTable {
    /// Uniform efficiency; Alice's detectors at 300 Hz dark rate, D5/D6 at 180/400 Hz.
    pub fn with_efficiency(efficiency: f64) -> Self {
        let alice = DetectorSpec { efficiency, dark_rate_hz: 300.0 };
        let mut t = [alice; 7];
        t[Detector::D5.id() as usize].dark_rate_hz = 180.0;
        t[Detector::D6.id() as usize].dark_rate_hz = 400.0;
        Self(t)
    }

    pub fn get(&self, d: Detector) -> &DetectorSpec {
        &self.0[d.id() as usize]
    }

    pub fn get_mut(&mut self, d: Detector) -> &mut DetectorSpec {
        &mut self.0[d.id() as usize]
    }

    pub fn without_dark_counts(mut self) -> Self {
        for d in self.0.iter_mut() {
            d.dark_rate_hz = 0.0;
        }
        self
    }

    pub fn bob_dark_rate_hz(&self) -> f64 {
        self.get(Detector::D5).dark_rate_hz + self.get(Detector::D6).dark_rate_hz
    }
}

impl Default for DetectorTable {
    fn default() -> Self {
        Self::with_efficiency(0.3)
    }
}

/// Which clicks end up in the tag stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TagScope {
    /// Every click of every detector, dark counts included.
    Full,
    /// Only pulses where Alice registered a heralded Bell-state result
    /// (a Ψ± pair plus the herald detector) and Bob clicked within
    /// `guard_ps`; the record holds those Alice clicks and every Bob click
    /// (genuine or dark) inside the guard interval.
    Gated,
}

impl TagScope {
    pub fn label(self) -> &'static str {
        match self {
            Self::Full => "full",
            Self::Gated => "gated",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "full" => Ok(Self::Full),
            "gated" => Ok(Self::Gated),
            o => Err(Error::Config(format!("unknown tag scope '{o}' (expected full or gated)"))),
        }
    }
}

/// Full parameterization of one run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub source: SourceParams,
    /// Fock-space truncation on the total photon number.
    pub n_max: u8,
    /// Alice→Bob link attenuation; η = 10^(−dB/10).
    pub attenuation_db: f64,
    pub rep_period_ps: u64,
    pub pulses: u64,
    pub detectors: DetectorTable,
    pub jitter_sigma_ps: f64,
    pub tag_resolution_ps: u64,
    pub feed_forward: bool,
    pub ff_delay_ps: u64,
    pub charlie_state: PureState,
    pub bob_basis: MeasurementBasis,
    /// Amplitude of the slow polarization drift on Bob's photon.
    pub drift_angle_rad: f64,
    /// Rotation axis of the drift (normalized on use).
    pub drift_axis: [f64; 3],
    pub seed: u64,
    /// Coincidence window used by downstream analysis.
    pub window_ps: u64,
    pub tag_scope: TagScope,
    /// Half-width of the Bob neighbourhood recorded around each herald in gated scope.
    pub guard_ps: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            source: SourceParams { g1: 0.1, g2: 0.1, xi: 1.0 },
            n_max: 4,
            attenuation_db: 0.0,
            rep_period_ps: 12_500,
            pulses: 100_000_000,
            detectors: DetectorTable::default(),
            jitter_sigma_ps: 500.0,
            tag_resolution_ps: 156,
            feed_forward: true,
            ff_delay_ps: 250_000,
            charlie_state: PureState::h(),
            bob_basis: MeasurementBasis::HV,
            drift_angle_rad: 0.0,
            drift_axis: [1.0, 1.0, 1.0],
            seed: 1,
            window_ps: 3_000,
            tag_scope: TagScope::Gated,
            guard_ps: 37_500,
        }
    }
}

impl ExperimentConfig {
    /// Noiseless protocol: no loss, unit efficiencies, no dark counts, perfect overlap.
    pub fn ideal() -> Self {
        Self {
            source: SourceParams { g1: 0.05, g2: 0.05, xi: 1.0 },
            detectors: DetectorTable::with_efficiency(1.0).without_dark_counts(),
            ..Self::default()
        }
    }

    pub fn eta(&self) -> f64 {
        10f64.powf(-self.attenuation_db / 10.0)
    }

    pub fn duration_ps(&self) -> u64 {
        self.pulses.saturating_mul(self.rep_period_ps)
    }

    pub fn duration_s(&self) -> f64 {
        self.duration_ps() as f64 * 1e-12
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |m: String| Err(Error::Config(m));
        self.source.validate()?;
        if !(4..=6).contains(&self.n_max) {
            return cfg(format!("n_max = {} must lie in 4..=6", self.n_max));
        }
        if !(self.attenuation_db.is_finite() && self.attenuation_db >= 0.0) {
            return cfg(format!("attenuation_db = {} must be >= 0", self.attenuation_db));
        }
        if self.rep_period_ps == 0 {
            return cfg("rep_period_ps must be > 0".into());
        }
        if self.pulses == 0 {
            return cfg("pulses must be > 0".into());
        }
        for d in Detector::ALL {
            let s = self.detectors.get(d);
            if !(0.0..=1.0).contains(&s.efficiency) {
                return cfg(format!("{d} efficiency {} outside [0, 1]", s.efficiency));
            }
            if !(s.dark_rate_hz.is_finite() && s.dark_rate_hz >= 0.0) {
                return cfg(format!("{d} dark rate {} must be >= 0", s.dark_rate_hz));
            }
        }
        if !(self.jitter_sigma_ps.is_finite() && self.jitter_sigma_ps >= 0.0) {
            return cfg(format!("jitter_sigma_ps = {} must be >= 0", self.jitter_sigma_ps));
        }
        if self.tag_resolution_ps == 0 || self.tag_resolution_ps > u32::MAX as u64 {
            return cfg(format!("tag_resolution_ps = {} must be in 1..2^32", self.tag_resolution_ps));
        }
        if !(self.drift_angle_rad.is_finite() && self.drift_angle_rad >= 0.0) {
            return cfg(format!("drift_angle_rad = {} must be >= 0", self.drift_angle_rad));
        }
        let axis = self.drift_axis;
        if !axis.iter().all(|x| x.is_finite()) || axis.iter().map(|x| x * x).sum::<f64>() == 0.0 {
            return cfg("drift_axis must be a finite non-zero vector".into());
        }
        if self.window_ps < self.tag_resolution_ps {
            return cfg(format!(
                "window_ps = {} is below the tag resolution {}",
                self.window_ps, self.tag_resolution_ps
            ));
        }
        if self.tag_scope == TagScope::Gated && self.guard_ps < self.window_ps {
            return cfg(format!("guard_ps = {} must be >= window_ps = {}", self.guard_ps, self.window_ps));
        }
        let span = (self.pulses as u128) * (self.rep_period_ps as u128)
            + self.ff_delay_ps as u128
            + self.guard_ps as u128
            + 64 * (self.jitter_sigma_ps.ceil() as u128 + 1);
        if span >= (1u128 << 63) {
            return cfg("run duration overflows the 2^63 ps time axis".into());
        }
        Ok(())
    }

    fn epoch(&self, pulse: u64) -> i128 {
        self.ff_delay_ps as i128 + pulse as i128 * self.rep_period_ps as i128
    }
}

/// Four-fold tallies of one (basis, BSM result) cell; n_plus counts D5, n_minus D6.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CountRecord {
    pub basis: MeasurementBasis,
    pub bsm: BsmOutcome,
    pub n_plus: u64,
    pub n_minus: u64,
}

impl CountRecord {
    pub fn total(&self) -> u64 {
        self.n_plus + self.n_minus
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunStats {
    pub pulses: u64,
    pub duration_ps: u64,
    /// Exact per-pulse probability of a heralded Bell-state result at Alice.
    pub herald_probability: f64,
    /// Pulses that were examined in detail (the rest provably record nothing).
    pub candidate_pulses: u64,
    pub genuine_fourfolds: u64,
    pub dark_tags: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunOutput {
    pub tags: Vec<TimeTag>,
    /// PsiMinus and PsiPlus records, in that order.
    pub counts: Vec<CountRecord>,
    pub stats: RunStats,
}

/// PsiMinus → identity, PsiPlus → σ3 ρ σ3.
pub fn apply_feed_forward(state: &DensityMatrix, outcome: BsmOutcome) -> Result<DensityMatrix> {
    match outcome {
        BsmOutcome::PsiMinus => Ok(*state),
        BsmOutcome::PsiPlus => Ok(state.conjugate(&Pauli::Z.matrix())),
        BsmOutcome::Inconclusive => Err(Error::Logic("no feed-forward exists for an inconclusive BSM".into())),
    }
}

/// Slow sinusoidal polarization rotation of Bob's photon.
///
/// θ(t) = A·sin(2π t / T) with T the run duration and t measured from the
/// first pulse; U = cos(θ/2)·I + i·sin(θ/2)·(n·σ).
pub fn drift_rotation(time_ps: u64, config: &ExperimentConfig) -> Mat2 {
    let period = config.duration_ps().max(1) as f64;
    let theta = config.drift_angle_rad * (2.0 * PI * time_ps as f64 / period).sin();
    rotation(theta, config.drift_axis)
}

fn rotation(theta: f64, axis: [f64; 3]) -> Mat2 {
    let n = (axis[0] * axis[0] + axis[1] * axis[1] + axis[2] * axis[2]).sqrt();
    let (x, y, z) = (axis[0] / n, axis[1] / n, axis[2] / n);
    let gen = Pauli::X.matrix() * c(x, 0.0) + Pauli::Y.matrix() * c(y, 0.0) + Pauli::Z.matrix() * c(z, 0.0);
    Mat2::identity() * c((theta / 2.0).cos(), 0.0) + gen * c(0.0, (theta / 2.0).sin())
}

/// Per-pulse pair amplitude from a detected pair rate:
/// g = sqrt(rate / (rep_rate · two_fold_efficiency)), rejected outside g² ≤ 0.2.
pub fn calibrate_g(target_pair_rate_hz: f64, rep_rate_hz: f64, assumed_two_fold_efficiency: f64) -> Result<f64> {
    for (name, v) in [
        ("target_pair_rate_hz", target_pair_rate_hz),
        ("rep_rate_hz", rep_rate_hz),
        ("assumed_two_fold_efficiency", assumed_two_fold_efficiency),
    ] {
        if !(v.is_finite() && v > 0.0) {
            return Err(Error::Calibration(format!("{name} = {v} must be > 0")));
        }
    }
    let g2 = target_pair_rate_hz / (rep_rate_hz * assumed_two_fold_efficiency);
    if g2 > SourceParams::MAX_GAIN_SQ {
        return Err(Error::Calibration(format!(
            "calibrated g^2 = {g2:.4} exceeds the small-gain limit {}",
            SourceParams::MAX_GAIN_SQ
        )));
    }
    Ok(g2.sqrt())
}

/// Average expected fidelity over the six canonical inputs, each analyzed in
/// its own basis. With a window, dark-count accidentals are included.
pub fn six_state_expected_fidelity(config: &ExperimentConfig, window: Option<CoincidenceWindow>) -> Result<f64> {
    let mut sum = 0.0;
    for s in CanonicalState::ALL {
        let cfg = ExperimentConfig { charlie_state: s.state(), bob_basis: s.basis().0, ..config.clone() };
        let model = PulseModel::new(&cfg)?;
        sum += match window {
            Some(w) => model.expected_measured_fidelity(w)?,
            None => model.expected_fidelity()?,
        };
    }
    Ok(sum / 6.0)
}

/// Drift amplitude in [0, 2.4] rad at which the six-state average fidelity
/// equals `target`, by bisection (the average falls monotonically on that range).
pub fn fit_drift_angle(config: &ExperimentConfig, target: f64, window: Option<CoincidenceWindow>) -> Result<f64> {
    let at = |a: f64| six_state_expected_fidelity(&ExperimentConfig { drift_angle_rad: a, ..config.clone() }, window);
    let (mut lo, mut hi) = (0.0, 2.4);
    let (f_lo, f_hi) = (at(lo)?, at(hi)?);
    if !(f_hi <= target && target <= f_lo) {
        return Err(Error::Calibration(format!(
            "target fidelity {target} outside the reachable range [{f_hi:.4}, {f_lo:.4}]"
        )));
    }
    for _ in 0..40 {
        let mid = 0.5 * (lo + hi);
        if at(mid)? > target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Link-model parameters implied by a configuration for a coincidence window.
///
/// `p_bsm_hz` is the rate of all heralds, including multi-pair heralds that
/// carry no photon to Bob. The probability that a herald yields a Bob
/// detection, taken in the linear low-transmission regime, goes into
/// `bob_efficiency`, so `s2_frac` stays zero. The clean visibility comes from
/// the exact per-pulse model at 0 dB, the dark rate is the sum over D5 and D6,
/// and the window is the anchor-relative effective width.
pub fn reference_budget(config: &ExperimentConfig, window: CoincidenceWindow) -> Result<LinkBudget> {
    const FAR_DB: f64 = 60.0;
    let rep_rate = 1e12 / config.rep_period_ps as f64;
    let clean = ExperimentConfig { attenuation_db: 0.0, ..config.clone() };
    let v_clean = 2.0 * PulseModel::new(&clean)?.expected_fidelity()? - 1.0;
    let far = ExperimentConfig { attenuation_db: FAR_DB, ..config.clone() };
    let model = PulseModel::new(&far)?;
    let [(_, a), (_, b)] = model.fourfold_plus_probability();
    let herald = model.herald_probability();
    if herald <= 0.0 || a + b <= 0.0 {
        return Err(Error::Config("configuration produces no four-folds".into()));
    }
    let heralding = ((a + b) / (herald * far.eta())).min(1.0);
    Ok(LinkBudget {
        attenuation_db: config.attenuation_db,
        n_hz: config.detectors.bob_dark_rate_hz(),
        tau_s: effective_window_ps(window, config.jitter_sigma_ps, config.tag_resolution_ps) * 1e-12,
        p_bsm_hz: herald * rep_rate,
        v0: v_clean.clamp(0.0, 1.0),
        s2_frac: 0.0,
        v2: 0.0,
        bob_efficiency: heralding,
    })
}

/// Alice-side detectors in pattern bit order: D1..D4, then the herald.
const ALICE: [Detector; 5] = [Detector::D1, Detector::D2, Detector::D3, Detector::D4, Detector::Trig];
const TRIG_BIT: u8 = 1 << 4;

fn heralded(mask: u8) -> Option<BsmOutcome> {
    if mask & TRIG_BIT == 0 {
        return None;
    }
    match classify_pattern(ClickPattern::from_bits(mask)) {
        BsmOutcome::Inconclusive => None,
        o => Some(o),
    }
}

#[derive(Clone, Debug)]
struct Outcome {
    bob: BobState,
    /// P(Alice click pattern), 32 masks.
    alice: [f64; 32],
    /// P(detector clicked because of a photon | it clicked), per Alice detector.
    genuine_share: [f64; 5],
    herald: f64,
}

/// One independent source of Bob clicks near a herald.
#[derive(Clone, Debug)]
enum Background {
    Dark { detector: Detector, mean: f64 },
    Neighbour { offset: i64 },
}

/// Precomputed per-pulse physics of a configuration.
#[derive(Clone, Debug)]
pub struct PulseModel {
    config: ExperimentConfig,
    table: ConditionalTable,
    outcomes: Vec<Outcome>,
    sampler: Option<WeightedIndex<f64>>,
    candidate_probability: f64,
    herald_probability: f64,
    eta_max: f64,
    background: Vec<(Background, f64)>,
    neighbour_clicks: [f64; 3],
}

impl PulseModel {
    pub fn new(config: &ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let state = spdc_state(&config.source, &config.charlie_state, config.n_max)?;
        let table = ConditionalTable::new(&beam_splitter(&state))?;
        let eta = config.eta();
        let eff = |d: Detector| config.detectors.get(d).efficiency;
        let eta_max = eta * eff(Detector::D5).max(eff(Detector::D6));
        let slot_s = config.rep_period_ps as f64 * 1e-12;

        let outcomes: Vec<Outcome> = table
            .entries()
            .iter()
            .map(|e| {
                let mut p_click = [0.0; 5];
                let mut genuine_share = [1.0; 5];
                for (i, d) in ALICE.iter().enumerate() {
                    let miss = (1.0 - eff(*d)).powi(e.detector_photons[i] as i32);
                    let dark = match config.tag_scope {
                        // gated acquisition folds Alice dark counts into the pulse slot
                        TagScope::Gated => 1.0 - (-config.detectors.get(*d).dark_rate_hz * slot_s).exp(),
                        TagScope::Full => 0.0,
                    };
                    p_click[i] = 1.0 - miss * (1.0 - dark);
                    if p_click[i] > 0.0 {
                        genuine_share[i] = (1.0 - miss) / p_click[i];
                    }
                }
                let mut alice = [0.0; 32];
                for (mask, slot) in alice.iter_mut().enumerate() {
                    *slot = (0..5)
                        .map(|i| if mask & (1 << i) != 0 { p_click[i] } else { 1.0 - p_click[i] })
                        .product();
                }
                let herald = (0..32u8).filter(|m| heralded(*m).is_some()).map(|m| alice[m as usize]).sum();
                Outcome { bob: e.bob.clone(), alice, genuine_share, herald }
            })
            .collect();

        let herald_probability =
            table.entries().iter().zip(&outcomes).map(|(e, o)| e.probability * o.herald).sum::<f64>();

        let mut model = Self {
            config: config.clone(),
            table,
            outcomes,
            sampler: None,
            candidate_probability: 0.0,
            herald_probability,
            eta_max,
            background: Vec::new(),
            neighbour_clicks: [0.0; 3],
        };
        model.neighbour_clicks = model.bob_click_marginal();
        if config.tag_scope == TagScope::Gated {
            model.background = model.background_sources();
        }
        let p_bg = 1.0 - model.background.iter().map(|(_, q)| 1.0 - q).product::<f64>();
        let weights: Vec<f64> = model
            .table
            .entries()
            .iter()
            .zip(&model.outcomes)
            .map(|(e, o)| {
                let no_bob = (1.0 - eta_max).powi(o.bob.photons() as i32);
                let w = match config.tag_scope {
                    TagScope::Full => 1.0 - o.alice[0] * no_bob,
                    TagScope::Gated => o.herald * (1.0 - no_bob * (1.0 - p_bg)),
                };
                e.probability * w.max(0.0)
            })
            .collect();
        model.candidate_probability = weights.iter().sum::<f64>().min(1.0);
        if model.candidate_probability > 0.0 {
            model.sampler = Some(
                WeightedIndex::new(&weights).map_err(|e| Error::Logic(format!("candidate weights: {e}")))?,
            );
        }
        Ok(model)
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.config
    }

    pub fn table(&self) -> &ConditionalTable {
        &self.table
    }

    /// Exact per-pulse probability of a heralded Ψ± result at Alice.
    pub fn herald_probability(&self) -> f64 {
        self.herald_probability
    }

    /// Per-pulse probability that the pulse needs a detailed simulation.
    pub fn candidate_probability(&self) -> f64 {
        self.candidate_probability
    }

    /// Per-pulse probability of (D5 only, D6 only, both) for an unheralded pulse.
    pub fn neighbour_clicks(&self) -> [f64; 3] {
        self.neighbour_clicks
    }

    fn bob_unitary(&self, pulse: u64, outcome: BsmOutcome) -> Mat2 {
        self.bob_unitary_at(pulse.saturating_mul(self.config.rep_period_ps), outcome)
    }

    /// Drift, then the feed-forward correction, then the analyzer.
    fn bob_unitary_at(&self, t_rel: u64, outcome: BsmOutcome) -> Mat2 {
        let mut u = drift_rotation(t_rel, &self.config);
        if self.config.feed_forward && outcome == BsmOutcome::PsiPlus {
            u = Pauli::Z.matrix() * u;
        }
        self.config.bob_basis.analyzer() * u
    }

    /// P(D5 only, D6 only, both) for a Bob state of a given photon split.
    fn click_probs(&self, n_plus: usize, n_minus: usize) -> [f64; 3] {
        let eta = self.config.eta();
        let e5 = eta * self.config.detectors.get(Detector::D5).efficiency;
        let e6 = eta * self.config.detectors.get(Detector::D6).efficiency;
        let c5 = 1.0 - (1.0 - e5).powi(n_plus as i32);
        let c6 = 1.0 - (1.0 - e6).powi(n_minus as i32);
        [c5 * (1.0 - c6), c6 * (1.0 - c5), c5 * c6]
    }

    fn bob_click_marginal(&self) -> [f64; 3] {
        let analyzer = self.config.bob_basis.analyzer();
        let mut acc = [0.0; 3];
        for (e, o) in self.table.entries().iter().zip(&self.outcomes) {
            let k = o.bob.photons();
            if k == 0 {
                continue;
            }
            let probs = o.bob.apply(&analyzer).probabilities();
            for (np, p) in probs.iter().enumerate() {
                let cp = self.click_probs(np, k - np);
                for i in 0..3 {
                    acc[i] += e.probability * p * cp[i];
                }
            }
        }
        acc
    }

    fn background_sources(&self) -> Vec<(Background, f64)> {
        let guard_s = self.config.guard_ps as f64 * 1e-12;
        let mut v = Vec::new();
        for d in [Detector::D5, Detector::D6] {
            let mean = self.config.detectors.get(d).dark_rate_hz * 2.0 * guard_s;
            if mean > 0.0 {
                v.push((Background::Dark { detector: d, mean }, 1.0 - (-mean).exp()));
            }
        }
        let q: f64 = self.neighbour_clicks.iter().sum();
        if q > 0.0 {
            let m = (self.config.guard_ps / self.config.rep_period_ps) as i64;
            for off in (-m..=m).filter(|o| *o != 0) {
                v.push((Background::Neighbour { offset: off }, q));
            }
        }
        v
    }

    /// Exact distribution of Bob's outcome over clean in-pulse four-folds:
    /// (P(D5 | BSM result), four-fold probability per pulse) for PsiMinus and
    /// PsiPlus. Drift is averaged over the run with a 64-point periodic rule.
    pub fn fourfold_plus_probability(&self) -> [(f64, f64); 2] {
        const PHASES: u64 = 64;
        let phases = if self.config.drift_angle_rad == 0.0 { 1 } else { PHASES };
        let period = self.config.duration_ps();
        let mut acc = [(0.0, 0.0); 2];
        for (e, o) in self.table.entries().iter().zip(&self.outcomes) {
            let k = o.bob.photons();
            if k == 0 {
                continue;
            }
            for mask in 0..32u8 {
                let Some(bsm) = heralded(mask) else { continue };
                let slot = if bsm == BsmOutcome::PsiMinus { 0 } else { 1 };
                let pa = e.probability * o.alice[mask as usize] / phases as f64;
                if pa == 0.0 {
                    continue;
                }
                for ph in 0..phases {
                    let t = (period as f64 * ph as f64 / phases as f64) as u64;
                    let u = self.bob_unitary_at(t, bsm);
                    for (np, p) in o.bob.apply(&u).probabilities().iter().enumerate() {
                        let cp = self.click_probs(np, k - np);
                        acc[slot].0 += pa * p * cp[0];
                        acc[slot].1 += pa * p * cp[1];
                    }
                }
            }
        }
        acc.map(|(p, m)| if p + m > 0.0 { (p / (p + m), p + m) } else { (0.5, 0.0) })
    }

    /// Expected fraction of clean four-folds in which Bob reports Charlie's
    /// state; the state must be an eigenstate of the analysis basis.
    pub fn expected_fidelity(&self) -> Result<f64> {
        let (basis, plus) = match CanonicalState::identify(&self.config.charlie_state) {
            Some(s) => s.basis(),
            None => return Err(Error::Config("input state is not one of the six canonical states".into())),
        };
        if basis != self.config.bob_basis {
            return Err(Error::Config(format!("input state is not an eigenstate of the {basis} basis")));
        }
        let [(a, na), (b, nb)] = self.fourfold_plus_probability();
        if na + nb == 0.0 {
            return Err(Error::Logic("configuration produces no four-folds".into()));
        }
        let p_plus = (a * na + b * nb) / (na + nb);
        Ok(if plus { p_plus } else { 1.0 - p_plus })
    }

    /// Like [`Self::expected_fidelity`], but over all events found with
    /// `window`: clean four-folds plus heralds joined by a Bob dark count,
    /// which report D5 or D6 in proportion to their dark rates.
    pub fn expected_measured_fidelity(&self, window: CoincidenceWindow) -> Result<f64> {
        let f = self.expected_fidelity()?;
        let plus = CanonicalState::identify(&self.config.charlie_state).map(|s| s.basis().1).unwrap_or(true);
        let [(_, na), (_, nb)] = self.fourfold_plus_probability();
        let dets = &self.config.detectors;
        let dark = dets.bob_dark_rate_hz();
        let acc = self.herald_probability * dark * effective_window_ps(window, self.config.jitter_sigma_ps, self.config.tag_resolution_ps) * 1e-12;
        if acc == 0.0 {
            return Ok(f);
        }
        let good = dets.get(if plus { Detector::D5 } else { Detector::D6 }).dark_rate_hz / dark;
        Ok(((na + nb) * f + acc * good) / (na + nb + acc))
    }

    /// Runs every block and merges the result into one time-sorted stream.
    pub fn run(&self) -> RunOutput {
        let cfg = &self.config;
        let blocks = cfg.pulses.div_ceil(BLOCK_PULSES);
        let results: Vec<BlockResult> = (0..blocks).into_par_iter().map(|b| self.run_block(b)).collect();
        let mut tags = Vec::with_capacity(results.iter().map(|r| r.tags.len()).sum());
        let mut counts = [[0u64; 2]; 2];
        let mut stats = RunStats {
            pulses: cfg.pulses,
            duration_ps: cfg.duration_ps(),
            herald_probability: self.herald_probability,
            candidate_pulses: 0,
            genuine_fourfolds: 0,
            dark_tags: 0,
        };
        for r in results {
            tags.extend(r.tags);
            for i in 0..2 {
                for j in 0..2 {
                    counts[i][j] += r.counts[i][j];
                }
            }
            stats.candidate_pulses += r.candidates;
            stats.dark_tags += r.dark_tags;
        }
        tags.sort_unstable();
        stats.genuine_fourfolds = counts.iter().flatten().sum();
        let counts = [BsmOutcome::PsiMinus, BsmOutcome::PsiPlus]
            .into_iter()
            .zip(counts)
            .map(|(bsm, [p, m])| CountRecord { basis: cfg.bob_basis, bsm, n_plus: p, n_minus: m })
            .collect();
        RunOutput { tags, counts, stats }
    }

    fn block_rng(&self, block: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(block);
        rng
    }

    fn run_block(&self, block: u64) -> BlockResult {
        let cfg = &self.config;
        let start = block * BLOCK_PULSES;
        let end = (start + BLOCK_PULSES).min(cfg.pulses);
        let mut rng = self.block_rng(block);
        let mut out = BlockResult::default();
        let jitter = Normal::new(0.0, cfg.jitter_sigma_ps.max(0.0)).expect("finite sigma");
        let mut em = Emitter { cfg, jitter, tags: &mut out.tags };

        if cfg.tag_scope == TagScope::Full {
            let lo = cfg.epoch(start);
            let hi = cfg.epoch(end);
            let span_s = (hi - lo) as f64 * 1e-12;
            for d in Detector::ALL {
                let mean = cfg.detectors.get(d).dark_rate_hz * span_s;
                let n = poisson(&mut rng, mean);
                for _ in 0..n {
                    let t = rng.random_range(lo..hi);
                    em.raw(d, t);
                }
                out.dark_tags += n;
            }
        }

        if let Some(sampler) = &self.sampler {
            let q = self.candidate_probability;
            let geo = Geometric::new(q).expect("probability in (0, 1]");
            let mut pulse = start.saturating_add(geo.sample(&mut rng));
            while pulse < end {
                out.candidates += 1;
                let idx = sampler.sample(&mut rng);
                self.simulate_pulse(pulse, idx, &mut rng, &mut em, &mut out.counts);
                pulse = pulse.saturating_add(1).saturating_add(geo.sample(&mut rng));
            }
        }
        out.tags.sort_unstable();
        out
    }

    fn simulate_pulse(
        &self,
        pulse: u64,
        idx: usize,
        rng: &mut ChaCha8Rng,
        em: &mut Emitter<'_>,
        counts: &mut [[u64; 2]; 2],
    ) {
        let cfg = &self.config;
        let o = &self.outcomes[idx];
        let k = o.bob.photons();
        let p_surv = 1.0 - (1.0 - self.eta_max).powi(k as i32);

        // Alice pattern and the number of Bob photons surviving the link at
        // the larger Bob efficiency, conditioned on this pulse being a candidate.
        let (mask, survivors, need_bg) = match cfg.tag_scope {
            TagScope::Full => {
                let p_alice = 1.0 - o.alice[0];
                let cand = 1.0 - (1.0 - p_alice) * (1.0 - p_surv);
                if rng.random::<f64>() * cand < p_alice {
                    let mask = sample_mask(rng, &o.alice, |m| m != 0);
                    (mask, binomial(rng, k, self.eta_max), false)
                } else {
                    (0, binomial_nonzero(rng, k, self.eta_max), false)
                }
            }
            TagScope::Gated => {
                let mask = sample_mask(rng, &o.alice, |m| heralded(m).is_some());
                let p_bg = 1.0 - self.background.iter().map(|(_, q)| 1.0 - q).product::<f64>();
                let cand = 1.0 - (1.0 - p_surv) * (1.0 - p_bg);
                if rng.random::<f64>() * cand < p_surv {
                    (mask, binomial_nonzero(rng, k, self.eta_max), false)
                } else {
                    (mask, 0, true)
                }
            }
        };
        let bsm = classify_pattern(ClickPattern::from_bits(mask));
        let epoch = cfg.epoch(pulse);

        let (mut c5, mut c6) = (false, false);
        if survivors > 0 {
            let u = self.bob_unitary(pulse, bsm);
            let probs = o.bob.apply(&u).probabilities();
            let n_plus = sample_index(rng, &probs);
            let s_plus = hypergeometric(rng, k, n_plus, survivors);
            let s_minus = survivors - s_plus;
            let eff = |d: Detector| {
                if self.eta_max > 0.0 {
                    cfg.eta() * cfg.detectors.get(d).efficiency / self.eta_max
                } else {
                    0.0
                }
            };
            c5 = detect_any(rng, s_plus, eff(Detector::D5));
            c6 = detect_any(rng, s_minus, eff(Detector::D6));
        }

        let mut bg: Vec<(Detector, i128)> = Vec::new();
        if cfg.tag_scope == TagScope::Gated {
            self.sample_background(rng, pulse, need_bg, &mut bg);
            if !(c5 || c6 || !bg.is_empty()) {
                return;
            }
        }

        for (i, d) in ALICE.iter().enumerate() {
            if mask & (1 << i) == 0 {
                continue;
            }
            if o.genuine_share[i] < 1.0 && rng.random::<f64>() >= o.genuine_share[i] {
                let half = cfg.rep_period_ps as i128 / 2;
                em.raw(*d, rng.random_range(epoch - half..epoch + half + 1));
            } else {
                em.jittered(rng, *d, epoch);
            }
        }
        if c5 {
            em.jittered(rng, Detector::D5, epoch);
        }
        if c6 {
            em.jittered(rng, Detector::D6, epoch);
        }
        for (d, t) in bg {
            em.raw(d, t);
        }

        if mask & TRIG_BIT != 0 && bsm != BsmOutcome::Inconclusive && (c5 ^ c6) {
            let slot = if bsm == BsmOutcome::PsiMinus { 0 } else { 1 };
            counts[slot][if c5 { 0 } else { 1 }] += 1;
        }
    }

    /// Bob clicks near a herald from dark counts and neighbouring pulses.
    /// When `at_least_one`, the sample is conditioned on a non-empty result.
    fn sample_background(&self, rng: &mut ChaCha8Rng, pulse: u64, at_least_one: bool, out: &mut Vec<(Detector, i128)>) {
        let cfg = &self.config;
        let epoch = cfg.epoch(pulse);
        let mut forced = at_least_one;
        let mut rest: f64 = if forced {
            1.0 - self.background.iter().map(|(_, q)| 1.0 - q).product::<f64>()
        } else {
            1.0
        };
        for (i, (src, q)) in self.background.iter().enumerate() {
            let fire = if forced {
                // P(this source fires | no earlier source fired, some source fires)
                let p = q / rest;
                rest = 1.0 - self.background[i + 1..].iter().map(|(_, q)| 1.0 - q).product::<f64>();
                rng.random::<f64>() < p
            } else {
                rng.random::<f64>() < *q
            };
            if !fire {
                continue;
            }
            forced = false;
            match src {
                Background::Dark { detector, mean } => {
                    let n = poisson_nonzero(rng, *mean);
                    let g = cfg.guard_ps as i128;
                    for _ in 0..n {
                        out.push((*detector, rng.random_range(epoch - g..=epoch + g).max(0)));
                    }
                }
                Background::Neighbour { offset } => {
                    let p = self.neighbour_clicks;
                    let u = rng.random::<f64>() * (p[0] + p[1] + p[2]);
                    let dets: &[Detector] = if u < p[0] {
                        &[Detector::D5]
                    } else if u < p[0] + p[1] {
                        &[Detector::D6]
                    } else {
                        &[Detector::D5, Detector::D6]
                    };
                    let t = epoch + *offset as i128 * cfg.rep_period_ps as i128;
                    for d in dets {
                        let j = if cfg.jitter_sigma_ps > 0.0 {
                            Normal::new(0.0, cfg.jitter_sigma_ps).expect("sigma").sample(rng).round() as i128
                        } else {
                            0
                        };
                        out.push((*d, (t + j).max(0)));
                    }
                }
            }
        }
    }
}

#[derive(Default)]
struct BlockResult {
    tags: Vec<TimeTag>,
    counts: [[u64; 2]; 2],
    candidates: u64,
    dark_tags: u64,
}

struct Emitter<'a> {
    cfg: &'a ExperimentConfig,
    jitter: Normal<f64>,
    tags: &'a mut Vec<TimeTag>,
}

impl Emitter<'_> {
    fn raw(&mut self, d: Detector, t: i128) {
        let res = self.cfg.tag_resolution_ps as i128;
        let t = t.max(0);
        let q = (t + res / 2) / res * res;
        self.tags.push(TimeTag::new(d, q as u64));
    }

    fn jittered(&mut self, rng: &mut ChaCha8Rng, d: Detector, epoch: i128) {
        let j = if self.cfg.jitter_sigma_ps > 0.0 { self.jitter.sample(rng).round() as i128 } else { 0 };
        self.raw(d, epoch + j);
    }
}

/// Runs a configuration end to end.
pub fn run(config: &ExperimentConfig) -> Result<RunOutput> {
    Ok(PulseModel::new(config)?.run())
}

fn sample_mask(rng: &mut ChaCha8Rng, dist: &[f64; 32], allowed: impl Fn(u8) -> bool) -> u8 {
    let total: f64 = (0..32u8).filter(|m| allowed(*m)).map(|m| dist[m as usize]).sum();
    let mut u = rng.random::<f64>() * total;
    let mut last = 0;
    for m in (0..32u8).filter(|m| allowed(*m)) {
        if dist[m as usize] <= 0.0 {
            continue;
        }
        last = m;
        if u < dist[m as usize] {
            return m;
        }
        u -= dist[m as usize];
    }
    last
}

fn sample_index(rng: &mut ChaCha8Rng, probs: &[f64]) -> usize {
    let total: f64 = probs.iter().sum();
    let mut u = rng.random::<f64>() * total;
    let mut last = 0;
    for (i, p) in probs.iter().enumerate() {
        if *p <= 0.0 {
            continue;
        }
        last = i;
        if u < *p {
            return i;
        }
        u -= p;
    }
    last
}

fn binomial(rng: &mut ChaCha8Rng, n: usize, p: f64) -> usize {
    (0..n).filter(|_| rng.random::<f64>() < p).count()
}

/// Binomial(n, p) conditioned on a non-zero result, by inverting the pmf.
fn binomial_nonzero(rng: &mut ChaCha8Rng, n: usize, p: f64) -> usize {
    if n == 0 || p <= 0.0 {
        return 0;
    }
    let pmf: Vec<f64> = (0..=n)
        .map(|s| binom_coef(n, s) * p.powi(s as i32) * (1.0 - p).powi((n - s) as i32))
        .collect();
    1 + sample_index(rng, &pmf[1..])
}

fn binom_coef(n: usize, k: usize) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// Number of `plus` photons among `draws` drawn without replacement from `total`.
fn hypergeometric(rng: &mut ChaCha8Rng, total: usize, plus: usize, draws: usize) -> usize {
    let (mut left, mut plus_left, mut got) = (total, plus, 0);
    for _ in 0..draws {
        if rng.random_range(0..left) < plus_left {
            plus_left -= 1;
            got += 1;
        }
        left -= 1;
    }
    got
}

fn detect_any(rng: &mut ChaCha8Rng, photons: usize, p: f64) -> bool {
    photons > 0 && rng.random::<f64>() < 1.0 - (1.0 - p).powi(photons as i32)
}

fn poisson(rng: &mut ChaCha8Rng, mean: f64) -> u64 {
    if mean <= 0.0 {
        return 0;
    }
    Poisson::new(mean).expect("positive mean").sample(rng) as u64
}

/// Poisson(mean) conditioned on at least one event.
fn poisson_nonzero(rng: &mut ChaCha8Rng, mean: f64) -> u64 {
    let norm = 1.0 - (-mean).exp();
    let mut u = rng.random::<f64>() * norm;
    let mut p = (-mean).exp();
    let mut k = 0u64;
    loop {
        k += 1;
        p *= mean / k as f64;
        if u < p || k > 1000 {
            return k;
        }
        u -= p;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::qstate::fidelity;

    #[test]
    fn feed_forward_examples() {
        let m = apply_feed_forward(&PureState::p().projector(), BsmOutcome::PsiPlus).unwrap();
        assert!((fidelity(&PureState::m(), &m) - 1.0).abs() < 1e-12);
        let h = apply_feed_forward(&PureState::h().projector(), BsmOutcome::PsiPlus).unwrap();
        assert!((fidelity(&PureState::h(), &h) - 1.0).abs() < 1e-12);
        let r = PureState::r().projector();
        assert_eq!(apply_feed_forward(&r, BsmOutcome::PsiMinus).unwrap(), r);
        assert!(apply_feed_forward(&r, BsmOutcome::Inconclusive).is_err());
    }

    #[test]
    fn drift_examples() {
        let mut cfg = ExperimentConfig::default();
        for t in [0, 1_000_000, cfg.duration_ps() / 3] {
            assert!((drift_rotation(t, &cfg) - Mat2::identity()).norm() < 1e-15);
        }
        cfg.drift_angle_rad = 1.0;
        assert!((drift_rotation(0, &cfg) - Mat2::identity()).norm() < 1e-15);
        cfg.drift_angle_rad = PI / 2.0;
        cfg.drift_axis = [1.0, 0.0, 0.0];
        let u = drift_rotation(cfg.duration_ps() / 4, &cfg);
        assert!((u * u.adjoint() - Mat2::identity()).norm() < 1e-12);
        assert!(PureState::h().apply(&u).same_ray(&PureState::r()));
    }

    #[test]
    fn calibrate_examples() {
        assert!((calibrate_g(90e3, 80e6, 0.1).unwrap() - 0.10607).abs() < 1e-4);
        assert!((calibrate_g(110e3, 80e6, 0.1).unwrap() - 0.11726).abs() < 1e-4);
        assert!((calibrate_g(80e6 * 0.04, 80e6, 1.0).unwrap() - 0.2).abs() < 1e-12);
        assert!(calibrate_g(80e6 * 0.3, 80e6, 1.0).is_err());
        assert!(calibrate_g(0.0, 80e6, 1.0).is_err());
        assert!(calibrate_g(1.0, 80e6, -1.0).is_err());
    }

    #[test]
    fn config_validation() {
        let ok = ExperimentConfig::default();
        assert!(ok.validate().is_ok());
        let bad = [
            ExperimentConfig { pulses: 0, ..ok.clone() },
            ExperimentConfig { rep_period_ps: 0, ..ok.clone() },
            ExperimentConfig { attenuation_db: -1.0, ..ok.clone() },
            ExperimentConfig { window_ps: 100, ..ok.clone() },
            ExperimentConfig { guard_ps: 1000, ..ok.clone() },
            ExperimentConfig { n_max: 3, ..ok.clone() },
            ExperimentConfig { drift_axis: [0.0; 3], ..ok.clone() },
            ExperimentConfig { pulses: u64::MAX / 1000, ..ok.clone() },
        ];
        for b in bad {
            assert!(matches!(b.validate(), Err(Error::Config(_))), "{b:?}");
        }
        let mut d = ok.clone();
        d.detectors.get_mut(Detector::D3).efficiency = 1.5;
        assert!(d.validate().is_err());
    }

    #[test]
    fn runs_are_deterministic_and_sorted() {
        let cfg = ExperimentConfig {
            pulses: 3 * BLOCK_PULSES / 2,
            tag_scope: TagScope::Full,
            attenuation_db: 10.0,
            ..ExperimentConfig::default()
        };
        let a = run(&cfg).unwrap();
        let b = run(&cfg).unwrap();
        assert_eq!(a, b);
        assert!(crate::tags::is_sorted(&a.tags));
        assert!(a.tags.iter().all(|t| t.time_ps % cfg.tag_resolution_ps == 0));
        let other = run(&ExperimentConfig { seed: 2, ..cfg }).unwrap();
        assert_ne!(a.tags, other.tags);
    }

    fn ideal(state: CanonicalState, basis: MeasurementBasis, ff: bool, pulses: u64) -> RunOutput {
        let cfg = ExperimentConfig {
            charlie_state: state.state(),
            bob_basis: basis,
            feed_forward: ff,
            pulses,
            ..ExperimentConfig::ideal()
        };
        run(&cfg).unwrap()
    }

    fn plus_minus(out: &RunOutput) -> (u64, u64) {
        out.counts.iter().fold((0, 0), |(p, m), r| (p + r.n_plus, m + r.n_minus))
    }

    #[test]
    fn ideal_protocol_teleports_p() {
        let out = ideal(CanonicalState::P, MeasurementBasis::PM, true, 4_000_000_000);
        let (p, m) = plus_minus(&out);
        assert!(p + m > 10_000, "{p} {m}");
        let f = p as f64 / (p + m) as f64;
        let sd = (f * (1.0 - f) / (p + m) as f64).sqrt().max(1.0 / (p + m) as f64);
        assert!(1.0 - f < 3.0 * sd + 0.005, "fidelity {f}");
    }

    #[test]
    fn no_feed_forward_mixes_equatorial_states() {
        let out = ideal(CanonicalState::P, MeasurementBasis::PM, false, 4_000_000_000);
        let (p, m) = plus_minus(&out);
        let n = (p + m) as f64;
        assert!(((p as f64) - n / 2.0).abs() < 3.0 * (n / 4.0).sqrt(), "{p} {m}");
        let out = ideal(CanonicalState::H, MeasurementBasis::HV, false, 4_000_000_000);
        let (p, m) = plus_minus(&out);
        assert!(p as f64 / (p + m) as f64 > 0.99);
    }

    #[test]
    fn fourfold_statistics_match_the_conditional_state() {
        let cfg = ExperimentConfig {
            source: SourceParams { g1: 0.2, g2: 0.2, xi: 0.8 },
            charlie_state: PureState::r(),
            bob_basis: MeasurementBasis::PM,
            detectors: DetectorTable::with_efficiency(0.6).without_dark_counts(),
            attenuation_db: 1.0,
            pulses: 30_000_000,
            ..ExperimentConfig::default()
        };
        let model = PulseModel::new(&cfg).unwrap();
        let out = model.run();
        let expect = model.fourfold_plus_probability();
        let mut chi2 = 0.0;
        for (rec, (p_plus, _)) in out.counts.iter().zip(expect) {
            let n = rec.total() as f64;
            assert!(n > 1000.0, "{rec:?}");
            for (obs, p) in [(rec.n_plus as f64, p_plus), (rec.n_minus as f64, 1.0 - p_plus)] {
                chi2 += (obs - n * p).powi(2) / (n * p);
            }
        }
        // two independent binomial cells, chi^2 with 2 dof at p = 0.001
        assert!(chi2 < 13.82, "chi2 = {chi2}");
    }

    #[test]
    fn output_is_independent_of_thread_count() {
        let cfg = ExperimentConfig {
            pulses: 5 * BLOCK_PULSES / 2,
            attenuation_db: 20.0,
            ..ExperimentConfig::default()
        };
        let model = PulseModel::new(&cfg).unwrap();
        let serial = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap().install(|| model.run());
        let parallel = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap().install(|| model.run());
        assert_eq!(serial, parallel);
    }

    #[test]
    fn attenuation_scales_genuine_rate_not_dark_rate() {
        let base = ExperimentConfig {
            source: SourceParams { g1: 0.15, g2: 0.15, xi: 1.0 },
            detectors: DetectorTable::with_efficiency(0.6),
            tag_scope: TagScope::Full,
            pulses: 200_000_000,
            attenuation_db: 3.0,
            ..ExperimentConfig::default()
        };
        let lossier = ExperimentConfig { attenuation_db: 3.0 + 10.0 * 2f64.log10(), seed: 7, ..base.clone() };
        let a = run(&base).unwrap();
        let b = run(&lossier).unwrap();
        let (na, nb) = (a.stats.genuine_fourfolds as f64, b.stats.genuine_fourfolds as f64);
        assert!(nb > 1000.0);
        let ratio = nb / na;
        let sd = ratio * (1.0 / na + 1.0 / nb).sqrt();
        assert!((ratio - 0.5).abs() < 3.0 * sd, "ratio {ratio} ± {sd}");
        let (da, db) = (a.stats.dark_tags as f64, b.stats.dark_tags as f64);
        let expect = base.duration_s() * (4.0 * 300.0 + 180.0 + 400.0 + 300.0);
        assert!((da - expect).abs() < 3.0 * expect.sqrt(), "{da} vs {expect}");
        assert!((da - db).abs() < 3.0 * (da + db).sqrt());
    }

    #[test]
    fn drift_fit_inverts_the_fidelity_model() {
        let cfg = ExperimentConfig {
            source: SourceParams { g1: 0.1, g2: 0.1, xi: 0.95 },
            detectors: DetectorTable::with_efficiency(0.3),
            attenuation_db: 20.0,
            ..ExperimentConfig::default()
        };
        let target = six_state_expected_fidelity(&ExperimentConfig { drift_angle_rad: 0.9, ..cfg.clone() }, None).unwrap();
        let a = fit_drift_angle(&cfg, target, None).unwrap();
        assert!((a - 0.9).abs() < 1e-6, "{a}");
        assert!(matches!(fit_drift_angle(&cfg, 0.999, None), Err(Error::Calibration(_))));
    }

    #[test]
    fn double_pairs_fake_heralds_only_for_equatorial_inputs() {
        let herald = |s: CanonicalState| {
            let cfg = ExperimentConfig { charlie_state: s.state(), bob_basis: s.basis().0, ..ExperimentConfig::ideal() };
            PulseModel::new(&cfg).unwrap().herald_probability()
        };
        assert!(herald(CanonicalState::P) > 1.05 * herald(CanonicalState::H));
        assert!((herald(CanonicalState::P) - herald(CanonicalState::R)).abs() < 1e-12);
    }

    #[test]
    fn measured_fidelity_counts_dark_accidentals() {
        let cfg = ExperimentConfig {
            source: SourceParams { g1: 0.1, g2: 0.1, xi: 1.0 },
            charlie_state: PureState::p(),
            bob_basis: MeasurementBasis::PM,
            detectors: DetectorTable::with_efficiency(0.3),
            attenuation_db: 30.0,
            pulses: 8_000_000_000_000,
            ..ExperimentConfig::default()
        };
        let window = CoincidenceWindow::new(3000, 156).unwrap();
        let model = PulseModel::new(&cfg).unwrap();
        let expect = model.expected_measured_fidelity(window).unwrap();
        assert!(expect < model.expected_fidelity().unwrap() - 0.01);

        let out = model.run();
        let events = crate::coincidence::find_fourfolds(&out.tags, window).unwrap();
        let clean: Vec<_> = events.iter().filter(|e| !e.ambiguous).collect();
        let n = clean.len() as f64;
        assert!(n > 3000.0, "{n}");
        let f = clean.iter().filter(|e| e.bob_detector == Detector::D5).count() as f64 / n;
        let sd = (expect * (1.0 - expect) / n).sqrt();
        assert!((f - expect).abs() < 3.0 * sd, "{f} vs {expect} ± {sd}");
    }
}
