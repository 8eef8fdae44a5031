//! Truncated multi-mode Fock-space optics for the Bell-state measurement.
//!
//! Two SPDC sources feed a 50:50 fiber beam splitter. Source 1 emits
//! singlet pairs into Alice's mode `a` and Bob's mode `bob`; source 2 emits
//! the input photon into `b` (interfering) or `b'` (distinguishable) together
//! with a herald photon in `trig`. After the beam splitter the interfering
//! photons occupy ports `c`/`d`, distinguishable ones `c'`/`d'`; each pair
//! c/c' (and d/d') shares one physical detector per polarization.

use std::collections::BTreeMap;
use std::f64::consts::FRAC_1_SQRT_2;
use std::fmt::Write as _;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{validation, Error, Result};
use crate::qstate::{c, Mat2, PureState, C64};

/// Amplitudes with smaller modulus are dropped after every transformation.
pub const PRUNE_TOL: f64 = 1e-12;
/// Number of source-side modes.
pub const INPUT_MODES: usize = 9;
/// Number of modes after the beam splitter.
pub const OUTPUT_MODES: usize = 11;

/// Source-side modes, dense indices 0..8 in declaration order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ModeIndex {
    AH,
    AV,
    BH,
    BV,
    BpH,
    BpV,
    BobH,
    BobV,
    Trig,
}

impl ModeIndex {
    pub const ALL: [ModeIndex; INPUT_MODES] = [
        Self::AH,
        Self::AV,
        Self::BH,
        Self::BV,
        Self::BpH,
        Self::BpV,
        Self::BobH,
        Self::BobV,
        Self::Trig,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn label(self) -> &'static str {
        match self {
            Self::AH => "a_H",
            Self::AV => "a_V",
            Self::BH => "b_H",
            Self::BV => "b_V",
            Self::BpH => "b'_H",
            Self::BpV => "b'_V",
            Self::BobH => "bob_H",
            Self::BobV => "bob_V",
            Self::Trig => "trig",
        }
    }
}

/// Modes after the beam splitter, dense indices 0..10 in declaration order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum OutputMode {
    CH,
    CV,
    DH,
    DV,
    CpH,
    CpV,
    DpH,
    DpV,
    BobH,
    BobV,
    Trig,
}

impl OutputMode {
    pub fn index(self) -> usize {
        self as usize
    }
}

/// The four BSM detectors. D1 = port c H, D2 = port c V, D3 = port d H, D4 = port d V.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum BsmDetector {
    D1,
    D2,
    D3,
    D4,
}

impl BsmDetector {
    pub const ALL: [BsmDetector; 4] = [Self::D1, Self::D2, Self::D3, Self::D4];

    fn bit(self) -> u8 {
        1 << (self as u8)
    }

    /// Output modes summed onto this detector.
    fn modes(self) -> [OutputMode; 2] {
        match self {
            Self::D1 => [OutputMode::CH, OutputMode::CpH],
            Self::D2 => [OutputMode::CV, OutputMode::CpV],
            Self::D3 => [OutputMode::DH, OutputMode::DpH],
            Self::D4 => [OutputMode::DV, OutputMode::DpV],
        }
    }
}

/// Set of BSM detectors that clicked.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ClickPattern(u8);

impl ClickPattern {
    pub fn empty() -> Self {
        Self(0)
    }

    pub fn from_detectors(dets: &[BsmDetector]) -> Self {
        Self(dets.iter().fold(0, |m, d| m | d.bit()))
    }

    /// Bits 0..3 map to D1..D4; higher bits are ignored.
    pub fn from_bits(bits: u8) -> Self {
        Self(bits & 0x0f)
    }

    pub fn bits(self) -> u8 {
        self.0
    }

    pub fn insert(&mut self, d: BsmDetector) {
        self.0 |= d.bit();
    }

    pub fn contains(self, d: BsmDetector) -> bool {
        self.0 & d.bit() != 0
    }

    pub fn len(self) -> u32 {
        self.0.count_ones()
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn detectors(self) -> impl Iterator<Item = BsmDetector> {
        BsmDetector::ALL.into_iter().filter(move |d| self.contains(*d))
    }
}

/// Result of the linear-optics Bell-state measurement.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum BsmOutcome {
    PsiMinus,
    PsiPlus,
    Inconclusive,
}

impl BsmOutcome {
    pub fn label(self) -> &'static str {
        match self {
            Self::PsiMinus => "PsiMinus",
            Self::PsiPlus => "PsiPlus",
            Self::Inconclusive => "Inconclusive",
        }
    }
}

/// {D1,D4} or {D2,D3} herald Ψ⁻, {D1,D2} or {D3,D4} herald Ψ⁺.
pub fn classify_pattern(pattern: ClickPattern) -> BsmOutcome {
    use BsmDetector::*;
    let p = |a: BsmDetector, b: BsmDetector| ClickPattern::from_detectors(&[a, b]);
    if pattern == p(D1, D4) || pattern == p(D2, D3) {
        BsmOutcome::PsiMinus
    } else if pattern == p(D1, D2) || pattern == p(D3, D4) {
        BsmOutcome::PsiPlus
    } else {
        BsmOutcome::Inconclusive
    }
}

/// Interaction strengths of both sources and the two-photon mode overlap.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SourceParams {
    pub g1: f64,
    pub g2: f64,
    pub xi: f64,
}

impl SourceParams {
    pub const MAX_GAIN_SQ: f64 = 0.2;

    pub fn new(g1: f64, g2: f64, xi: f64) -> Result<Self> {
        let p = Self { g1, g2, xi };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, g) in [("g1", self.g1), ("g2", self.g2)] {
            if !(g.is_finite() && g >= 0.0) {
                return Err(Error::Config(format!("{name} = {g} must be a non-negative number")));
            }
            if g * g > Self::MAX_GAIN_SQ {
                return Err(Error::Config(format!(
                    "{name} = {g} leaves the small-gain regime ({name}^2 must be <= {})",
                    Self::MAX_GAIN_SQ
                )));
            }
        }
        if !(0.0..=1.0).contains(&self.xi) {
            return Err(Error::Config(format!("xi = {} must lie in [0, 1]", self.xi)));
        }
        Ok(())
    }
}

/// Sparse complex amplitudes over occupation vectors of `M` modes.
#[derive(Clone, Debug, PartialEq)]
pub struct FockState<const M: usize> {
    amps: BTreeMap<[u8; M], C64>,
    n_max: u8,
}

pub type SourceState = FockState<INPUT_MODES>;
pub type DetectorState = FockState<OUTPUT_MODES>;

impl<const M: usize> FockState<M> {
    pub fn vacuum(n_max: u8) -> Self {
        let mut amps = BTreeMap::new();
        amps.insert([0u8; M], c(1.0, 0.0));
        Self { amps, n_max }
    }

    /// Builds a state from explicit terms; occupations above `n_max` are rejected.
    pub fn from_terms(n_max: u8, terms: impl IntoIterator<Item = ([u8; M], C64)>) -> Result<Self> {
        let mut amps = BTreeMap::new();
        for (occ, a) in terms {
            if total(&occ) > n_max as u32 {
                return validation(format!("occupation {occ:?} exceeds n_max = {n_max}"));
            }
            *amps.entry(occ).or_insert(c(0.0, 0.0)) += a;
        }
        let mut s = Self { amps, n_max };
        s.prune();
        Ok(s)
    }

    pub fn n_max(&self) -> u8 {
        self.n_max
    }

    pub fn amplitude(&self, occ: &[u8; M]) -> C64 {
        self.amps.get(occ).copied().unwrap_or(c(0.0, 0.0))
    }

    /// Terms in lexicographic occupation order.
    pub fn iter(&self) -> impl Iterator<Item = (&[u8; M], &C64)> {
        self.amps.iter()
    }

    pub fn len(&self) -> usize {
        self.amps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.amps.is_empty()
    }

    pub fn norm_sqr(&self) -> f64 {
        self.amps.values().map(|a| a.norm_sqr()).sum()
    }

    pub fn normalized(mut self) -> Result<Self> {
        let n = self.norm_sqr().sqrt();
        if !(n.is_finite() && n > 0.0) {
            return Err(Error::Logic("cannot normalize an empty Fock state".into()));
        }
        for a in self.amps.values_mut() {
            *a /= n;
        }
        Ok(self)
    }

    /// Keeps only the terms whose occupation satisfies `keep` (not renormalized).
    pub fn filter(&self, keep: impl Fn(&[u8; M]) -> bool) -> Self {
        let amps = self.amps.iter().filter(|(o, _)| keep(o)).map(|(o, a)| (*o, *a)).collect();
        Self { amps, n_max: self.n_max }
    }

    /// Total photon numbers present in the state (sorted, deduplicated).
    pub fn photon_numbers(&self) -> Vec<u32> {
        let mut v: Vec<u32> = self.amps.keys().map(total).collect();
        v.sort_unstable();
        v.dedup();
        v
    }

    fn prune(&mut self) {
        self.amps.retain(|_, a| a.norm() >= PRUNE_TOL);
    }

    /// Applies Σ coeff·a†_mode to every term.
    fn create(&self, terms: &[(usize, C64)]) -> Self {
        let mut out: BTreeMap<[u8; M], C64> = BTreeMap::new();
        for (occ, a) in &self.amps {
            for &(mode, k) in terms {
                let mut o = *occ;
                o[mode] += 1;
                let f = (o[mode] as f64).sqrt();
                *out.entry(o).or_insert(c(0.0, 0.0)) += a * k * f;
            }
        }
        Self { amps: out, n_max: self.n_max }
    }

    fn add_scaled(&mut self, other: &Self, w: f64) {
        for (o, a) in &other.amps {
            *self.amps.entry(*o).or_insert(c(0.0, 0.0)) += a * w;
        }
    }

    /// Applies a passive linear network given as the image of each input
    /// creation operator, `map[i] = [(j, u_ji), ...]`, mapping `M` modes to `N`.
    pub fn transform<const N: usize>(&self, map: &[Vec<(usize, C64)>; M]) -> FockState<N> {
        let mut out = FockState::<N> { amps: BTreeMap::new(), n_max: self.n_max };
        for (occ, a) in &self.amps {
            let norm: f64 = occ.iter().map(|&n| factorial(n)).product::<f64>().sqrt();
            let mut acc = FockState::<N>::vacuum(self.n_max);
            acc.amps.insert([0u8; N], a / norm);
            for (i, &n) in occ.iter().enumerate() {
                for _ in 0..n {
                    acc = acc.create(&map[i]);
                }
            }
            out.add_scaled(&acc, 1.0);
        }
        out.prune();
        out
    }

    /// One line per occupation: "n1 n2 ... nM re im", lexicographic order.
    pub fn dump(&self) -> String {
        let mut s = String::new();
        for (occ, a) in &self.amps {
            for n in occ {
                let _ = write!(s, "{n} ");
            }
            let _ = writeln!(s, "{:.15e} {:.15e}", a.re, a.im);
        }
        s
    }
}

fn total<const M: usize>(occ: &[u8; M]) -> u32 {
    occ.iter().map(|&n| n as u32).sum()
}

fn factorial(n: u8) -> f64 {
    (1..=n as u32).map(f64::from).product()
}

fn check_truncation(n_max: u8) -> Result<()> {
    if n_max < 4 {
        return Err(Error::Config(format!(
            "n_max = {n_max} cannot hold one pair from each source (need >= 4)"
        )));
    }
    if n_max > 6 {
        return Err(Error::Config(format!("n_max = {n_max} exceeds the supported maximum of 6")));
    }
    Ok(())
}

/// Joint emission of both sources, Taylor-expanded to ⌊n_max/2⌋ pairs in total.
///
/// Term with k pairs from source 1 and m from source 2 carries the weight
/// g1^k g2^m / (k! m!) applied to (K1†)^k (K2†)^m |0⟩, where K1† creates a
/// normalized singlet on (a, bob) and K2† creates the input photon in
/// √xi·b + √(1−xi)·b' together with a herald photon.
pub fn spdc_state(params: &SourceParams, input: &PureState, n_max: u8) -> Result<SourceState> {
    params.validate()?;
    check_truncation(n_max)?;
    use ModeIndex::*;
    let s = c(FRAC_1_SQRT_2, 0.0);
    let singlet: [(ModeIndex, ModeIndex, C64); 2] = [(AH, BobV, s), (AV, BobH, -s)];
    let (al, be) = (input.alpha(), input.beta());
    let (wi, wd) = (params.xi.sqrt(), (1.0 - params.xi).sqrt());
    let photon3: [(ModeIndex, C64); 4] = [(BH, al * wi), (BpH, al * wd), (BV, be * wi), (BpV, be * wd)];

    let pairs = (n_max / 2) as usize;
    let apply_k1 = |st: &SourceState| -> SourceState {
        let mut out = FockState { amps: BTreeMap::new(), n_max };
        for &(m1, m2, k) in &singlet {
            let t = st.create(&[(m1.index(), k)]).create(&[(m2.index(), c(1.0, 0.0))]);
            out.add_scaled(&t, 1.0);
        }
        out
    };
    let apply_k2 = |st: &SourceState| -> SourceState {
        let terms: Vec<(usize, C64)> = photon3.iter().map(|(m, k)| (m.index(), *k)).collect();
        st.create(&terms).create(&[(Trig.index(), c(1.0, 0.0))])
    };

    let mut src2 = vec![SourceState::vacuum(n_max)];
    for m in 1..=pairs {
        let next = apply_k2(&src2[m - 1]);
        src2.push(next);
    }
    let mut state = FockState { amps: BTreeMap::new(), n_max };
    for (m, base) in src2.iter().enumerate() {
        let mut term = base.clone();
        for k in 0..=(pairs - m) {
            if k > 0 {
                term = apply_k1(&term);
            }
            let w = params.g1.powi(k as i32) * params.g2.powi(m as i32) / (factorial(k as u8) * factorial(m as u8));
            if w != 0.0 {
                state.add_scaled(&term, w);
            }
        }
    }
    state.prune();
    state.normalized()
}

fn bs_map() -> [Vec<(usize, C64)>; INPUT_MODES] {
    use OutputMode::*;
    let s = c(FRAC_1_SQRT_2, 0.0);
    let one = c(1.0, 0.0);
    [
        vec![(CH.index(), s), (DH.index(), s)],
        vec![(CV.index(), s), (DV.index(), s)],
        vec![(CH.index(), s), (DH.index(), -s)],
        vec![(CV.index(), s), (DV.index(), -s)],
        vec![(CpH.index(), s), (DpH.index(), -s)],
        vec![(CpV.index(), s), (DpV.index(), -s)],
        vec![(BobH.index(), one)],
        vec![(BobV.index(), one)],
        vec![(Trig.index(), one)],
    ]
}

/// 50:50 beam splitter: a → (c + d)/√2, b → (c − d)/√2, b' → (c' − d')/√2.
pub fn beam_splitter(state: &SourceState) -> DetectorState {
    state.transform(&bs_map())
}

/// Photon-number state of Bob's two polarization modes with a fixed total
/// photon number; `amps[n]` is the amplitude of n photons in H and
/// `photons − n` in V.
#[derive(Clone, Debug, PartialEq)]
pub struct BobState {
    amps: Vec<C64>,
}

impl BobState {
    pub fn vacuum() -> Self {
        Self { amps: vec![c(1.0, 0.0)] }
    }

    pub fn from_qubit(q: &PureState) -> Self {
        Self { amps: vec![q.beta(), q.alpha()] }
    }

    pub fn photons(&self) -> usize {
        self.amps.len() - 1
    }

    /// Amplitude of (n photons in the first mode, photons − n in the second).
    pub fn amplitude(&self, n_first: usize) -> C64 {
        self.amps.get(n_first).copied().unwrap_or(c(0.0, 0.0))
    }

    pub fn qubit(&self) -> Option<PureState> {
        if self.photons() != 1 {
            return None;
        }
        PureState::normalized(self.amps[1], self.amps[0]).ok()
    }

    /// Probabilities over n photons in the first mode.
    pub fn probabilities(&self) -> Vec<f64> {
        self.amps.iter().map(|a| a.norm_sqr()).collect()
    }

    /// Applies a polarization unitary to every photon: a†_H → U00 a†_H + U10 a†_V,
    /// a†_V → U01 a†_H + U11 a†_V.
    pub fn apply(&self, u: &Mat2) -> BobState {
        let k = self.photons();
        let mut out = vec![c(0.0, 0.0); k + 1];
        for (nh, a) in self.amps.iter().enumerate() {
            if a.norm() < PRUNE_TOL {
                continue;
            }
            let nv = k - nh;
            // poly[j] multiplies (a†_H)^j (a†_V)^(deg - j)
            let mut poly = vec![c(1.0, 0.0)];
            let mul = |p: &Vec<C64>, x: C64, y: C64| {
                let mut q = vec![c(0.0, 0.0); p.len() + 1];
                for (j, v) in p.iter().enumerate() {
                    q[j + 1] += v * x;
                    q[j] += v * y;
                }
                q
            };
            for _ in 0..nh {
                poly = mul(&poly, u[(0, 0)], u[(1, 0)]);
            }
            for _ in 0..nv {
                poly = mul(&poly, u[(0, 1)], u[(1, 1)]);
            }
            let norm = (factorial(nh as u8) * factorial(nv as u8)).sqrt();
            for (j, v) in poly.iter().enumerate() {
                let f = (factorial(j as u8) * factorial((k - j) as u8)).sqrt();
                out[j] += a * v * f / norm;
            }
        }
        BobState { amps: out }
    }

    fn from_fock(state: &FockState<2>) -> Result<Self> {
        let nums = state.photon_numbers();
        if nums.len() != 1 {
            return Err(Error::Logic(format!("conditional Bob state mixes photon numbers {nums:?}")));
        }
        let k = nums[0] as usize;
        let mut amps = vec![c(0.0, 0.0); k + 1];
        for (occ, a) in state.iter() {
            amps[occ[0] as usize] = *a;
        }
        Ok(Self { amps })
    }
}

/// Index of every non-bob output mode, in mode order.
const ALICE_MODES: [OutputMode; 9] = [
    OutputMode::CH,
    OutputMode::CV,
    OutputMode::DH,
    OutputMode::DV,
    OutputMode::CpH,
    OutputMode::CpV,
    OutputMode::DpH,
    OutputMode::DpV,
    OutputMode::Trig,
];

/// Photon counts per Alice-side detector: D1..D4 then the herald detector.
pub type DetectorPhotons = [u8; 5];

/// One outcome of a projective photon-number measurement on Alice's modes.
#[derive(Clone, Debug, PartialEq)]
pub struct FockMeasurement {
    /// Occupation of the non-bob modes in `OutputMode` order (bob modes skipped).
    pub occupation: [u8; 9],
    pub detector_photons: DetectorPhotons,
    /// Normalized conditional state of Bob's modes.
    pub bob: BobState,
    /// Marginal probability of this occupation.
    pub probability: f64,
}

impl FockMeasurement {
    /// Ideal threshold-detector pattern (every photon detected).
    pub fn ideal_pattern(&self) -> ClickPattern {
        let mut p = ClickPattern::empty();
        for (i, d) in BsmDetector::ALL.into_iter().enumerate() {
            if self.detector_photons[i] > 0 {
                p.insert(d);
            }
        }
        p
    }
}

fn detector_photons(occ: &[u8; 9]) -> DetectorPhotons {
    let at = |m: OutputMode| {
        let i = ALICE_MODES.iter().position(|x| *x == m).expect("alice mode");
        occ[i]
    };
    let mut out = [0u8; 5];
    for (i, d) in BsmDetector::ALL.into_iter().enumerate() {
        let [u, p] = d.modes();
        out[i] = at(u) + at(p);
    }
    out[4] = at(OutputMode::Trig);
    out
}

/// All outcomes of a photon-number measurement of Alice's modes, with the
/// conditional Bob states; precomputed once and sampled repeatedly.
#[derive(Clone, Debug)]
pub struct ConditionalTable {
    entries: Vec<FockMeasurement>,
    sampler: WeightedIndex<f64>,
}

impl ConditionalTable {
    pub fn new(state: &DetectorState) -> Result<Self> {
        let mut groups: BTreeMap<[u8; 9], Vec<([u8; 2], C64)>> = BTreeMap::new();
        for (occ, a) in state.iter() {
            let mut alice = [0u8; 9];
            for (i, m) in ALICE_MODES.iter().enumerate() {
                alice[i] = occ[m.index()];
            }
            let bob = [occ[OutputMode::BobH.index()], occ[OutputMode::BobV.index()]];
            groups.entry(alice).or_default().push((bob, *a));
        }
        let mut entries = Vec::with_capacity(groups.len());
        for (alice, terms) in groups {
            let p: f64 = terms.iter().map(|(_, a)| a.norm_sqr()).sum();
            if p <= 0.0 {
                continue;
            }
            let bob = FockState::<2>::from_terms(state.n_max(), terms)?.normalized()?;
            entries.push(FockMeasurement {
                occupation: alice,
                detector_photons: detector_photons(&alice),
                bob: BobState::from_fock(&bob)?,
                probability: p,
            });
        }
        if entries.is_empty() {
            return Err(Error::Logic("cannot measure an empty Fock state".into()));
        }
        let sampler = WeightedIndex::new(entries.iter().map(|e| e.probability))
            .map_err(|e| Error::Logic(format!("invalid outcome weights: {e}")))?;
        Ok(Self { entries, sampler })
    }

    pub fn entries(&self) -> &[FockMeasurement] {
        &self.entries
    }

    pub fn total_probability(&self) -> f64 {
        self.entries.iter().map(|e| e.probability).sum()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> &FockMeasurement {
        &self.entries[self.sampler.sample(rng)]
    }
}

/// Samples Alice's occupation numbers and returns Bob's conditional state.
pub fn measure_fock<R: Rng + ?Sized>(state: &DetectorState, rng: &mut R) -> Result<FockMeasurement> {
    let table = ConditionalTable::new(state)?;
    Ok(table.sample(rng).clone())
}

/// Component with exactly one pair from each source, renormalized.
pub fn single_pair_component(state: &SourceState) -> Result<SourceState> {
    use ModeIndex::*;
    state
        .filter(|o| {
            let a = o[AH.index()] + o[AV.index()];
            let b = o[BH.index()] + o[BV.index()] + o[BpH.index()] + o[BpV.index()];
            a == 1 && b == 1 && o[Trig.index()] == 1
        })
        .normalized()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::qstate::{fidelity, CanonicalState, Pauli};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn occ9(pairs: &[(ModeIndex, u8)]) -> [u8; 9] {
        let mut o = [0u8; 9];
        for (m, n) in pairs {
            o[m.index()] = *n;
        }
        o
    }

    fn occ11(pairs: &[(OutputMode, u8)]) -> [u8; 11] {
        let mut o = [0u8; 11];
        for (m, n) in pairs {
            o[m.index()] = *n;
        }
        o
    }

    #[test]
    fn classify_examples() {
        use BsmDetector::*;
        assert_eq!(classify_pattern(ClickPattern::from_detectors(&[D1, D4])), BsmOutcome::PsiMinus);
        assert_eq!(classify_pattern(ClickPattern::from_detectors(&[D2, D3])), BsmOutcome::PsiMinus);
        assert_eq!(classify_pattern(ClickPattern::from_detectors(&[D1, D2])), BsmOutcome::PsiPlus);
        assert_eq!(classify_pattern(ClickPattern::from_detectors(&[D3, D4])), BsmOutcome::PsiPlus);
        assert_eq!(classify_pattern(ClickPattern::from_detectors(&[D1])), BsmOutcome::Inconclusive);
        assert_eq!(classify_pattern(ClickPattern::from_detectors(&[D1, D3])), BsmOutcome::Inconclusive);
        assert_eq!(classify_pattern(ClickPattern::from_detectors(&[D1, D2, D4])), BsmOutcome::Inconclusive);
        assert_eq!(classify_pattern(ClickPattern::empty()), BsmOutcome::Inconclusive);
    }

    #[test]
    fn source_param_ranges() {
        assert!(SourceParams::new(0.1, 0.1, 0.9).is_ok());
        assert!(SourceParams::new(-0.1, 0.1, 0.9).is_err());
        assert!(SourceParams::new(0.5, 0.1, 0.9).is_err());
        assert!(SourceParams::new(0.1, 0.1, 1.1).is_err());
        assert!(spdc_state(&SourceParams::new(0.1, 0.1, 1.0).unwrap(), &PureState::h(), 3).is_err());
        assert!(spdc_state(&SourceParams::new(0.1, 0.1, 1.0).unwrap(), &PureState::h(), 7).is_err());
    }

    #[test]
    fn spdc_source1_only() {
        use ModeIndex::*;
        let st = spdc_state(&SourceParams::new(0.1, 0.0, 1.0).unwrap(), &PureState::p(), 4).unwrap();
        let vac = st.amplitude(&[0; 9]);
        let hv = st.amplitude(&occ9(&[(AH, 1), (BobV, 1)]));
        let vh = st.amplitude(&occ9(&[(AV, 1), (BobH, 1)]));
        assert!((hv.norm() - vh.norm()).abs() < 1e-15);
        assert!((hv + vh).norm() < 1e-15);
        // single pair term is 0.1·singlet relative to vacuum
        assert!((hv.norm() * 2f64.sqrt() / vac.norm() - 0.1).abs() < 1e-12);
        assert!((st.norm_sqr() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn spdc_source2_only() {
        use ModeIndex::*;
        let st = spdc_state(&SourceParams::new(0.0, 0.1, 1.0).unwrap(), &PureState::h(), 4).unwrap();
        for (occ, a) in st.iter() {
            if occ.iter().map(|&n| n as u32).sum::<u32>() == 2 {
                assert_eq!(*occ, occ9(&[(BH, 1), (Trig, 1)]), "unexpected amplitude {a}");
            }
        }
    }

    #[test]
    fn spdc_four_photon_amplitude_matches_symbolic_expansion() {
        let (g1, g2) = (0.1, 0.1);
        let st = spdc_state(&SourceParams::new(g1, g2, 1.0).unwrap(), &PureState::h(), 4).unwrap();
        // norm^2 of the truncated exponential, expanded by hand:
        // 1 + g1^2 + g2^2 + g1^2 g2^2 + (3/4) g1^4 + g2^4
        let n2 = 1.0 + g1 * g1 + g2 * g2 + g1 * g1 * g2 * g2 + 0.75 * g1.powi(4) + g2.powi(4);
        let four: f64 = st
            .iter()
            .filter(|(o, _)| {
                let a = o[0] + o[1];
                let t = o[8];
                a == 1 && t == 1 && o.iter().map(|&n| n as u32).sum::<u32>() == 4
            })
            .map(|(_, a)| a.norm_sqr())
            .sum();
        assert!((four.sqrt() - g1 * g2 / n2.sqrt()).abs() < 1e-14);
    }

    #[test]
    fn single_photon_beam_splitter() {
        let st = SourceState::from_terms(4, [(occ9(&[(ModeIndex::AH, 1)]), c(1.0, 0.0))]).unwrap();
        let out = beam_splitter(&st);
        assert_eq!(out.len(), 2);
        let s = FRAC_1_SQRT_2;
        assert!((out.amplitude(&occ11(&[(OutputMode::CH, 1)])) - c(s, 0.0)).norm() < 1e-15);
        assert!((out.amplitude(&occ11(&[(OutputMode::DH, 1)])) - c(s, 0.0)).norm() < 1e-15);
    }

    #[test]
    fn hong_ou_mandel_bunching() {
        use ModeIndex::*;
        let st = SourceState::from_terms(4, [(occ9(&[(AH, 1), (BH, 1)]), c(1.0, 0.0))]).unwrap();
        let out = beam_splitter(&st);
        assert_eq!(out.amplitude(&occ11(&[(OutputMode::CH, 1), (OutputMode::DH, 1)])), c(0.0, 0.0));
        assert!((out.norm_sqr() - 1.0).abs() < 1e-12);
        // (c^2 - d^2)/2 → |2,0> and |0,2> with amplitude ±1/√2
        let cc = out.amplitude(&occ11(&[(OutputMode::CH, 2)]));
        let dd = out.amplitude(&occ11(&[(OutputMode::DH, 2)]));
        assert!((cc - c(FRAC_1_SQRT_2, 0.0)).norm() < 1e-12);
        assert!((dd + c(FRAC_1_SQRT_2, 0.0)).norm() < 1e-12);
    }

    #[test]
    fn singlet_exits_different_ports() {
        use ModeIndex::*;
        let s = c(FRAC_1_SQRT_2, 0.0);
        let st = SourceState::from_terms(
            4,
            [(occ9(&[(AH, 1), (BV, 1)]), s), (occ9(&[(AV, 1), (BH, 1)]), -s)],
        )
        .unwrap();
        let out = beam_splitter(&st);
        for (o, a) in out.iter() {
            let c_port = o[0] + o[1];
            let d_port = o[2] + o[3];
            assert_eq!((c_port, d_port), (1, 1), "amplitude {a} on {o:?}");
        }
    }

    #[test]
    fn beam_splitter_preserves_norm_and_photon_number() {
        let params = SourceParams::new(0.3, 0.25, 0.7).unwrap();
        for n_max in [4, 6] {
            let st = spdc_state(&params, &PureState::r(), n_max).unwrap();
            let out = beam_splitter(&st);
            assert!((out.norm_sqr() - 1.0).abs() < 1e-9);
            assert_eq!(st.photon_numbers(), out.photon_numbers());
            for (o, _) in out.iter() {
                assert!(o.iter().map(|&n| n as u32).sum::<u32>() <= n_max as u32);
            }
        }
    }

    #[test]
    fn vacuum_sample_is_deterministic() {
        let st = SourceState::from_terms(4, [(occ9(&[(ModeIndex::AH, 1)]), c(1.0, 0.0))]).unwrap();
        let out = st.transform::<11>(&bs_map());
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10 {
            let m = measure_fock(&out, &mut rng).unwrap();
            assert_eq!(m.bob.photons(), 0);
        }
        assert!(measure_fock(&DetectorState::from_terms(4, []).unwrap(), &mut rng).is_err());
    }

    fn projected_bob(input: PureState, pattern: [BsmDetector; 2]) -> PureState {
        let params = SourceParams::new(0.1, 0.1, 1.0).unwrap();
        let st = single_pair_component(&spdc_state(&params, &input, 4).unwrap()).unwrap();
        let table = ConditionalTable::new(&beam_splitter(&st)).unwrap();
        let want = ClickPattern::from_detectors(&pattern);
        let hits: Vec<_> = table.entries().iter().filter(|e| e.ideal_pattern() == want).collect();
        assert_eq!(hits.len(), 1);
        hits[0].bob.qubit().unwrap()
    }

    /// Brute-force projection onto ⟨Ψ±|₁₃ of |ψ⟩₃|Ψ⁻⟩₁₂ on the qubit level.
    fn oracle_bob(input: PureState, bell: crate::qstate::BellState) -> PureState {
        let s = FRAC_1_SQRT_2;
        // |Ψ⁻⟩₁₂ amplitudes over (q1, q2)
        let singlet = |q1: usize, q2: usize| match (q1, q2) {
            (0, 1) => s,
            (1, 0) => -s,
            _ => 0.0,
        };
        let psi = [input.alpha(), input.beta()];
        let b = bell.amplitudes();
        let mut out = [c(0.0, 0.0); 2];
        for (q2, slot) in out.iter_mut().enumerate() {
            for q1 in 0..2 {
                for q3 in 0..2 {
                    *slot += b[2 * q1 + q3].conj() * psi[q3] * singlet(q1, q2);
                }
            }
        }
        PureState::normalized(out[0], out[1]).unwrap()
    }

    #[test]
    fn psi_minus_teleports_input() {
        use crate::qstate::BellState;
        for s in CanonicalState::ALL {
            let input = s.state();
            let bob = projected_bob(input, [BsmDetector::D1, BsmDetector::D4]);
            assert!(bob.same_ray(&oracle_bob(input, BellState::PsiMinus)));
            assert!((fidelity(&input, &bob.projector()) - 1.0).abs() < 1e-9);
            let bob = projected_bob(input, [BsmDetector::D2, BsmDetector::D3]);
            assert!(bob.same_ray(&input));
        }
    }

    #[test]
    fn psi_plus_applies_sigma_z() {
        use crate::qstate::BellState;
        for s in CanonicalState::ALL {
            let input = s.state();
            let flipped = input.apply(&Pauli::Z.matrix());
            for pat in [[BsmDetector::D1, BsmDetector::D2], [BsmDetector::D3, BsmDetector::D4]] {
                let bob = projected_bob(input, pat);
                assert!(bob.same_ray(&flipped));
                assert!(bob.same_ray(&oracle_bob(input, BellState::PsiPlus)));
            }
        }
    }

    #[test]
    fn bsm_outcome_frequencies_single_pair() {
        let params = SourceParams::new(0.1, 0.1, 1.0).unwrap();
        let st = single_pair_component(&spdc_state(&params, &PureState::p(), 4).unwrap()).unwrap();
        let table = ConditionalTable::new(&beam_splitter(&st)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 100_000;
        let mut counts = [0usize; 3];
        for _ in 0..n {
            match classify_pattern(table.sample(&mut rng).ideal_pattern()) {
                BsmOutcome::PsiMinus => counts[0] += 1,
                BsmOutcome::PsiPlus => counts[1] += 1,
                BsmOutcome::Inconclusive => counts[2] += 1,
            }
        }
        for (k, p) in counts.iter().zip([0.25, 0.25, 0.5]) {
            let sd = (n as f64 * p * (1.0 - p)).sqrt();
            assert!((*k as f64 - n as f64 * p).abs() < 3.0 * sd, "{counts:?}");
        }
    }

    #[test]
    fn distinguishable_photons_do_not_bunch() {
        use ModeIndex::*;
        // xi = 0: photon 3 lives entirely in b'
        let st = SourceState::from_terms(4, [(occ9(&[(AH, 1), (BpH, 1)]), c(1.0, 0.0))]).unwrap();
        let table = ConditionalTable::new(&beam_splitter(&st)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 20_000;
        let split = (0..n)
            .filter(|_| {
                let m = table.sample(&mut rng);
                m.detector_photons[0] == 1 && m.detector_photons[2] == 1
            })
            .count();
        let sd = (n as f64 * 0.25).sqrt();
        assert!((split as f64 - n as f64 * 0.5).abs() < 3.0 * sd);
    }

    #[test]
    fn bob_state_unitary_matches_fock_transform() {
        let u = crate::qstate::MeasurementBasis::RL.analyzer();
        // two photons: |1,1> on (H, V)
        let st = FockState::<2>::from_terms(4, [([1, 1], c(1.0, 0.0))]).unwrap();
        let map = [vec![(0, u[(0, 0)]), (1, u[(1, 0)])], vec![(0, u[(0, 1)]), (1, u[(1, 1)])]];
        let via_fock = BobState::from_fock(&st.transform::<2>(&map)).unwrap();
        let via_poly = BobState::from_fock(&st).unwrap().apply(&u);
        for n in 0..=2 {
            assert!((via_fock.amplitude(n) - via_poly.amplitude(n)).norm() < 1e-12);
        }
        let total: f64 = via_poly.probabilities().iter().sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn dump_is_sorted_and_complete() {
        let st = spdc_state(&SourceParams::new(0.1, 0.1, 0.5).unwrap(), &PureState::h(), 4).unwrap();
        let d = st.dump();
        let lines: Vec<&str> = d.lines().collect();
        assert_eq!(lines.len(), st.len());
        let keys: Vec<Vec<u8>> =
            lines.iter().map(|l| l.split(' ').take(9).map(|x| x.parse().unwrap()).collect()).collect();
        let mut sorted = keys.clone();
        sorted.sort();
        assert_eq!(keys, sorted);
    }
}
