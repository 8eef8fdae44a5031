//! Polarization-qubit algebra.
//!
//! Phase convention: |H⟩ is Bloch +z, |P⟩ = (|H⟩+|V⟩)/√2 is +x and
//! |R⟩ = (|H⟩+i|V⟩)/√2 is +y. Every other module relies on this choice.

use std::f64::consts::FRAC_1_SQRT_2;
use std::fmt;

use nalgebra::{Matrix2, Vector3};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{validation, Error, Result};

pub type C64 = Complex64;
/// 2×2 complex matrix acting on one polarization qubit.
pub type Mat2 = Matrix2<C64>;

const NORM_TOL: f64 = 1e-12;
const DM_TOL: f64 = 1e-10;

pub(crate) const fn c(re: f64, im: f64) -> C64 {
    C64::new(re, im)
}

/// A normalized single-photon polarization state α|H⟩ + β|V⟩.
///
/// The global phase is kept as given; use [`PureState::same_ray`] to compare.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PureState {
    alpha: C64,
    beta: C64,
}

impl PureState {
    /// Builds a state from amplitudes that must already be normalized.
    pub fn new(alpha: C64, beta: C64) -> Result<Self> {
        let n = alpha.norm_sqr() + beta.norm_sqr();
        if !n.is_finite() || (n - 1.0).abs() > NORM_TOL {
            return validation(format!("|alpha|^2 + |beta|^2 = {n}, expected 1"));
        }
        Ok(Self { alpha, beta })
    }

    /// Builds a state from arbitrary non-zero amplitudes by rescaling them.
    pub fn normalized(alpha: C64, beta: C64) -> Result<Self> {
        let n = (alpha.norm_sqr() + beta.norm_sqr()).sqrt();
        if !(n.is_finite() && n > 0.0) {
            return validation("cannot normalize a zero or non-finite amplitude pair");
        }
        Ok(Self { alpha: alpha / n, beta: beta / n })
    }

    pub const fn h() -> Self {
        Self { alpha: c(1.0, 0.0), beta: c(0.0, 0.0) }
    }
    pub const fn v() -> Self {
        Self { alpha: c(0.0, 0.0), beta: c(1.0, 0.0) }
    }
    pub const fn p() -> Self {
        Self { alpha: c(FRAC_1_SQRT_2, 0.0), beta: c(FRAC_1_SQRT_2, 0.0) }
    }
    pub const fn m() -> Self {
        Self { alpha: c(FRAC_1_SQRT_2, 0.0), beta: c(-FRAC_1_SQRT_2, 0.0) }
    }
    pub const fn r() -> Self {
        Self { alpha: c(FRAC_1_SQRT_2, 0.0), beta: c(0.0, FRAC_1_SQRT_2) }
    }
    pub const fn l() -> Self {
        Self { alpha: c(FRAC_1_SQRT_2, 0.0), beta: c(0.0, -FRAC_1_SQRT_2) }
    }

    pub fn alpha(&self) -> C64 {
        self.alpha
    }
    pub fn beta(&self) -> C64 {
        self.beta
    }

    /// ⟨self|other⟩
    pub fn inner(&self, other: &PureState) -> C64 {
        self.alpha.conj() * other.alpha + self.beta.conj() * other.beta
    }

    /// True when the two kets differ at most by a global phase.
    pub fn same_ray(&self, other: &PureState) -> bool {
        self.inner(other).norm_sqr() >= 1.0 - 1e-10
    }

    pub fn apply(&self, u: &Mat2) -> PureState {
        let a = u[(0, 0)] * self.alpha + u[(0, 1)] * self.beta;
        let b = u[(1, 0)] * self.alpha + u[(1, 1)] * self.beta;
        // unitaries keep the norm; renormalize only to absorb rounding
        PureState::normalized(a, b).expect("unitary image of a normalized state")
    }

    pub fn projector(&self) -> DensityMatrix {
        let v = [self.alpha, self.beta];
        let m = Mat2::from_fn(|i, j| v[i] * v[j].conj());
        DensityMatrix(m)
    }
}

/// One of the six canonical states of the three mutually unbiased bases.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum CanonicalState {
    H,
    V,
    P,
    M,
    R,
    L,
}

impl CanonicalState {
    pub const ALL: [CanonicalState; 6] = [Self::H, Self::V, Self::P, Self::M, Self::R, Self::L];

    pub fn state(self) -> PureState {
        match self {
            Self::H => PureState::h(),
            Self::V => PureState::v(),
            Self::P => PureState::p(),
            Self::M => PureState::m(),
            Self::R => PureState::r(),
            Self::L => PureState::l(),
        }
    }

    /// The basis this state belongs to and whether it is the +1 eigenstate.
    pub fn basis(self) -> (MeasurementBasis, bool) {
        match self {
            Self::H => (MeasurementBasis::HV, true),
            Self::V => (MeasurementBasis::HV, false),
            Self::P => (MeasurementBasis::PM, true),
            Self::M => (MeasurementBasis::PM, false),
            Self::R => (MeasurementBasis::RL, true),
            Self::L => (MeasurementBasis::RL, false),
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Self::H => "H",
            Self::V => "V",
            Self::P => "P",
            Self::M => "M",
            Self::R => "R",
            Self::L => "L",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "H" => Ok(Self::H),
            "V" => Ok(Self::V),
            "P" | "D" => Ok(Self::P),
            "M" | "A" => Ok(Self::M),
            "R" => Ok(Self::R),
            "L" => Ok(Self::L),
            other => validation(format!("unknown canonical state '{other}'")),
        }
    }

    /// Identifies a pure state with one of the six canonical states, if any.
    pub fn identify(state: &PureState) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.state().same_ray(state))
    }
}

impl fmt::Display for CanonicalState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// The three mutually unbiased polarization bases.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum MeasurementBasis {
    HV,
    PM,
    RL,
}

impl MeasurementBasis {
    pub const ALL: [MeasurementBasis; 3] = [Self::HV, Self::PM, Self::RL];

    /// The +1 eigenstate, routed to D5 on Bob's side.
    pub fn plus(self) -> PureState {
        match self {
            Self::HV => PureState::h(),
            Self::PM => PureState::p(),
            Self::RL => PureState::r(),
        }
    }

    /// The -1 eigenstate, routed to D6 on Bob's side.
    pub fn minus(self) -> PureState {
        match self {
            Self::HV => PureState::v(),
            Self::PM => PureState::m(),
            Self::RL => PureState::l(),
        }
    }

    /// The Pauli operator whose eigenbasis this is.
    pub fn pauli(self) -> Pauli {
        match self {
            Self::HV => Pauli::Z,
            Self::PM => Pauli::X,
            Self::RL => Pauli::Y,
        }
    }

    /// Unitary W with rows ⟨+| and ⟨-|, so that W|ψ⟩ holds the outcome amplitudes.
    pub fn analyzer(self) -> Mat2 {
        let p = self.plus();
        let m = self.minus();
        Mat2::new(p.alpha.conj(), p.beta.conj(), m.alpha.conj(), m.beta.conj())
    }

    pub fn label(self) -> &'static str {
        match self {
            Self::HV => "HV",
            Self::PM => "PM",
            Self::RL => "RL",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "HV" => Ok(Self::HV),
            "PM" | "DA" => Ok(Self::PM),
            "RL" => Ok(Self::RL),
            other => validation(format!("unknown measurement basis '{other}'")),
        }
    }
}

impl fmt::Display for MeasurementBasis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// σ0 (identity), σ1 = X, σ2 = Y, σ3 = Z.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Pauli {
    I,
    X,
    Y,
    Z,
}

impl Pauli {
    pub const ALL: [Pauli; 4] = [Self::I, Self::X, Self::Y, Self::Z];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn matrix(self) -> Mat2 {
        let o = c(0.0, 0.0);
        let one = c(1.0, 0.0);
        let i = c(0.0, 1.0);
        match self {
            Self::I => Mat2::new(one, o, o, one),
            Self::X => Mat2::new(o, one, one, o),
            Self::Y => Mat2::new(o, -i, i, o),
            Self::Z => Mat2::new(one, o, o, -one),
        }
    }
}

/// A 2×2 density matrix: Hermitian, positive semidefinite, unit trace.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DensityMatrix(Mat2);

impl DensityMatrix {
    /// Validates the matrix against the density-matrix invariants.
    pub fn new(m: Mat2) -> Result<Self> {
        if m.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
            return validation("density matrix has non-finite entries");
        }
        let herm = (m - m.adjoint()).iter().map(|z| z.norm()).fold(0.0, f64::max);
        if herm > DM_TOL {
            return validation(format!("matrix is not Hermitian (deviation {herm:.3e})"));
        }
        let tr = m.trace();
        if (tr.re - 1.0).abs() > DM_TOL || tr.im.abs() > DM_TOL {
            return validation(format!("trace {tr} differs from 1"));
        }
        let d = DensityMatrix(m);
        let (lo, _) = d.eigenvalues();
        if lo < -DM_TOL {
            return validation(format!("negative eigenvalue {lo:.3e}"));
        }
        Ok(d)
    }

    /// Symmetrizes and rescales a nearly valid matrix, then validates it.
    pub fn from_approx(m: Mat2) -> Result<Self> {
        let h = (m + m.adjoint()) * c(0.5, 0.0);
        let tr = h.trace().re;
        if !(tr.is_finite() && tr > 0.0) {
            return validation("matrix has non-positive trace");
        }
        Self::new(h / c(tr, 0.0))
    }

    pub fn maximally_mixed() -> Self {
        DensityMatrix(Mat2::identity() * c(0.5, 0.0))
    }

    pub fn matrix(&self) -> &Mat2 {
        &self.0
    }

    /// Eigenvalues in ascending order.
    pub fn eigenvalues(&self) -> (f64, f64) {
        let a = self.0[(0, 0)].re;
        let d = self.0[(1, 1)].re;
        let b = self.0[(0, 1)];
        let mean = 0.5 * (a + d);
        let rad = (0.25 * (a - d) * (a - d) + b.norm_sqr()).sqrt();
        (mean - rad, mean + rad)
    }

    pub fn purity(&self) -> f64 {
        (self.0 * self.0).trace().re
    }

    /// r_i = tr(ρ σ_i) for i = x, y, z.
    pub fn bloch_vector(&self) -> Vector3<f64> {
        let t = |p: Pauli| (self.0 * p.matrix()).trace().re;
        Vector3::new(t(Pauli::X), t(Pauli::Y), t(Pauli::Z))
    }

    /// ρ = (I + r·σ)/2; rejects vectors outside the Bloch ball.
    pub fn from_bloch(r: &Vector3<f64>) -> Result<Self> {
        if !r.iter().all(|x| x.is_finite()) || r.norm() > 1.0 + 1e-9 {
            return validation(format!("Bloch vector of length {} lies outside the unit ball", r.norm()));
        }
        let m = (Pauli::I.matrix()
            + Pauli::X.matrix() * c(r.x, 0.0)
            + Pauli::Y.matrix() * c(r.y, 0.0)
            + Pauli::Z.matrix() * c(r.z, 0.0))
            * c(0.5, 0.0);
        Ok(DensityMatrix(m))
    }

    /// U ρ U†
    pub fn conjugate(&self, u: &Mat2) -> DensityMatrix {
        DensityMatrix(u * self.0 * u.adjoint())
    }

    /// ½‖ρ − σ‖₁, half the Bloch-vector distance for qubits.
    pub fn trace_distance(&self, other: &DensityMatrix) -> f64 {
        0.5 * (self.bloch_vector() - other.bloch_vector()).norm()
    }
}

/// ⟨φ|ρ|φ⟩
pub fn fidelity(ideal: &PureState, rho: &DensityMatrix) -> f64 {
    let v = [ideal.alpha, ideal.beta];
    let m = rho.matrix();
    let mut acc = c(0.0, 0.0);
    for i in 0..2 {
        for j in 0..2 {
            acc += v[i].conj() * m[(i, j)] * v[j];
        }
    }
    acc.re.clamp(0.0, 1.0)
}

/// V = 2f − 1
pub fn visibility(f: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&f) {
        return Err(Error::Validation(format!("fidelity {f} outside [0, 1]")));
    }
    Ok(2.0 * f - 1.0)
}

pub fn fidelity_from_visibility(v: f64) -> f64 {
    0.5 * (v + 1.0)
}

pub fn purity(rho: &DensityMatrix) -> f64 {
    rho.purity()
}

/// The four Bell states of two polarization qubits.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum BellState {
    PsiMinus,
    PsiPlus,
    PhiPlus,
    PhiMinus,
}

impl BellState {
    pub const ALL: [BellState; 4] = [Self::PsiMinus, Self::PsiPlus, Self::PhiPlus, Self::PhiMinus];

    /// Amplitudes over |HH⟩, |HV⟩, |VH⟩, |VV⟩ (first qubit leftmost).
    pub fn amplitudes(self) -> [C64; 4] {
        let s = c(FRAC_1_SQRT_2, 0.0);
        let z = c(0.0, 0.0);
        match self {
            Self::PsiMinus => [z, s, -s, z],
            Self::PsiPlus => [z, s, s, z],
            Self::PhiPlus => [s, z, z, s],
            Self::PhiMinus => [s, z, z, -s],
        }
    }

    /// Reduced state of the first (`keep_first`) or second qubit.
    pub fn reduced(self, keep_first: bool) -> DensityMatrix {
        partial_trace(&self.amplitudes(), keep_first)
    }
}

/// Reduced density matrix of a two-qubit pure state given in the |HH⟩..|VV⟩ order.
pub fn partial_trace(amps: &[C64; 4], keep_first: bool) -> DensityMatrix {
    let idx = |a: usize, b: usize| 2 * a + b;
    let m = Mat2::from_fn(|i, j| {
        (0..2)
            .map(|k| {
                if keep_first {
                    amps[idx(i, k)] * amps[idx(j, k)].conj()
                } else {
                    amps[idx(k, i)] * amps[idx(k, j)].conj()
                }
            })
            .sum()
    });
    DensityMatrix(m)
}
