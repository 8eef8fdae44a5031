//! Single-qubit state and process reconstruction.

use std::f64::consts::FRAC_1_SQRT_2;
use std::io::{BufRead, Write};

use nalgebra::{Matrix3, Matrix4, SymmetricEigen, Vector3};
use rand::Rng;
use rand_distr::{Binomial, Distribution};
use serde::{Deserialize, Serialize};

use crate::error::{validation, Error, Result};
use crate::qstate::{c, fidelity, CanonicalState, DensityMatrix, Mat2, MeasurementBasis, Pauli, PureState, C64};

pub type Mat4 = Matrix4<C64>;

const BASES: [MeasurementBasis; 3] = [MeasurementBasis::HV, MeasurementBasis::PM, MeasurementBasis::RL];

/// Six-state analyzer counts: (n_plus, n_minus) per basis.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TomographyCounts {
    pub hv: (u64, u64),
    pub pm: (u64, u64),
    pub rl: (u64, u64),
}

impl TomographyCounts {
    pub fn new(hv: (u64, u64), pm: (u64, u64), rl: (u64, u64)) -> Result<Self> {
        let t = Self { hv, pm, rl };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        if self.total() == 0 {
            return validation("tomography counts are all zero");
        }
        Ok(())
    }

    pub fn get(&self, basis: MeasurementBasis) -> (u64, u64) {
        match basis {
            MeasurementBasis::HV => self.hv,
            MeasurementBasis::PM => self.pm,
            MeasurementBasis::RL => self.rl,
        }
    }

    pub fn set(&mut self, basis: MeasurementBasis, counts: (u64, u64)) {
        match basis {
            MeasurementBasis::HV => self.hv = counts,
            MeasurementBasis::PM => self.pm = counts,
            MeasurementBasis::RL => self.rl = counts,
        }
    }

    pub fn total(&self) -> u64 {
        BASES.iter().map(|b| self.get(*b).0 + self.get(*b).1).sum()
    }

    /// Binomial counts with `n` trials per basis drawn from `rho`.
    pub fn sample<R: Rng + ?Sized>(rho: &DensityMatrix, n: u64, rng: &mut R) -> Self {
        let mut t = Self::default();
        for b in BASES {
            let p = fidelity(&b.plus(), rho).clamp(0.0, 1.0);
            let k = Binomial::new(n, p).expect("probability in [0, 1]").sample(rng);
            t.set(b, (k, n - k));
        }
        t
    }

    /// Per-basis Bloch component estimates (n₊ − n₋)/(n₊ + n₋), zero for empty bases.
    pub fn linear_bloch(&self) -> Vector3<f64> {
        let r = |b: MeasurementBasis| {
            let (p, m) = self.get(b);
            if p + m == 0 {
                0.0
            } else {
                (p as f64 - m as f64) / (p + m) as f64
            }
        };
        Vector3::new(r(MeasurementBasis::PM), r(MeasurementBasis::RL), r(MeasurementBasis::HV))
    }
}

pub fn write_counts_csv<W: Write>(mut w: W, comment: Option<&str>, counts: &TomographyCounts) -> Result<()> {
    if let Some(c) = comment {
        writeln!(w, "# {c}")?;
    }
    writeln!(w, "basis,n_plus,n_minus")?;
    for b in BASES {
        let (p, m) = counts.get(b);
        writeln!(w, "{b},{p},{m}")?;
    }
    w.flush()?;
    Ok(())
}

/// Reads `basis,n_plus,n_minus` rows; repeated bases accumulate, absent ones stay zero.
pub fn read_counts_csv<R: BufRead>(r: R) -> Result<TomographyCounts> {
    let mut out = TomographyCounts::default();
    let mut header = false;
    for (n, line) in r.lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if !header {
            if line.replace(' ', "") != "basis,n_plus,n_minus" {
                return Err(Error::Format(format!("line {}: expected header 'basis,n_plus,n_minus'", n + 1)));
            }
            header = true;
            continue;
        }
        let cols: Vec<&str> = line.split(',').map(str::trim).collect();
        let [b, p, m] = cols[..] else {
            return Err(Error::Format(format!("line {}: expected three columns", n + 1)));
        };
        let basis = MeasurementBasis::parse(b).map_err(|e| Error::Format(format!("line {}: {e}", n + 1)))?;
        let num = |s: &str| {
            s.parse::<u64>().map_err(|e| Error::Format(format!("line {}: bad count '{s}': {e}", n + 1)))
        };
        let (p0, m0) = out.get(basis);
        out.set(basis, (p0 + num(p)?, m0 + num(m)?));
    }
    if !header {
        return Err(Error::Format("empty counts CSV".into()));
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MleDiagnostics {
    pub iterations: u32,
    pub log_likelihood: f64,
    pub converged: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MleEstimate {
    pub rho: DensityMatrix,
    pub diagnostics: MleDiagnostics,
}

pub const MLE_TOL: f64 = 1e-10;
pub const MLE_MAX_ITER: u32 = 10_000;

/// Bloch vector of ρ = T†T / tr(T†T) with T = [[t0, 0], [t2 + i t3, t1]].
fn bloch_of(t: &[f64; 4]) -> Vector3<f64> {
    let s: f64 = t.iter().map(|x| x * x).sum();
    Vector3::new(
        2.0 * t[1] * t[2] / s,
        2.0 * t[1] * t[3] / s,
        (t[0] * t[0] + t[2] * t[2] + t[3] * t[3] - t[1] * t[1]) / s,
    )
}

/// Jacobian rows ∂r_i/∂t_k of [`bloch_of`].
fn bloch_jacobian(t: &[f64; 4]) -> [[f64; 4]; 3] {
    let s: f64 = t.iter().map(|x| x * x).sum();
    let r = bloch_of(t);
    let num = [
        [0.0, 2.0 * t[2], 2.0 * t[1], 0.0],
        [0.0, 2.0 * t[3], 0.0, 2.0 * t[1]],
        [2.0 * t[0], -2.0 * t[1], 2.0 * t[2], 2.0 * t[3]],
    ];
    let mut j = [[0.0; 4]; 3];
    for i in 0..3 {
        for k in 0..4 {
            j[i][k] = (num[i][k] - r[i] * 2.0 * t[k]) / s;
        }
    }
    j
}

/// (n₊, n₋) ordered as the Bloch components x, y, z.
fn axis_counts(counts: &TomographyCounts) -> [(f64, f64); 3] {
    [MeasurementBasis::PM, MeasurementBasis::RL, MeasurementBasis::HV].map(|b| {
        let (p, m) = counts.get(b);
        (p as f64, m as f64)
    })
}

fn log_likelihood(n: &[(f64, f64); 3], r: &Vector3<f64>) -> f64 {
    let ln = |k: f64, p: f64| if k == 0.0 { 0.0 } else { k * p.max(1e-300).ln() };
    (0..3).map(|i| ln(n[i].0, 0.5 * (1.0 + r[i])) + ln(n[i].1, 0.5 * (1.0 - r[i]))).sum()
}

fn gradient(n: &[(f64, f64); 3], t: &[f64; 4]) -> [f64; 4] {
    let r = bloch_of(t);
    let j = bloch_jacobian(t);
    let mut g = [0.0; 4];
    for i in 0..3 {
        let dl = n[i].0 / (1.0 + r[i]).max(1e-300) - n[i].1 / (1.0 - r[i]).max(1e-300);
        for k in 0..4 {
            g[k] += dl * j[i][k];
        }
    }
    g
}

/// Maximum-likelihood density matrix from six-state counts.
///
/// Gradient ascent over the four real entries of T, starting at I/2, with a
/// step that grows by 1.5 after an accepted move and halves after a rejected
/// one. The loop stops once an accepted step improves the log-likelihood by
/// less than [`MLE_TOL`].
pub fn mle_state(counts: &TomographyCounts) -> Result<MleEstimate> {
    counts.validate()?;
    let n = axis_counts(counts);
    let total: f64 = n.iter().map(|(p, m)| p + m).sum();
    let mut t = [FRAC_1_SQRT_2, FRAC_1_SQRT_2, 0.0, 0.0];
    let mut ll = log_likelihood(&n, &bloch_of(&t));
    let mut step = 1.0 / total;
    let mut iterations = 0;
    let mut converged = false;
    while iterations < MLE_MAX_ITER {
        iterations += 1;
        let g = gradient(&n, &t);
        let mut cand = [0.0; 4];
        for k in 0..4 {
            cand[k] = t[k] + step * g[k];
        }
        let norm = cand.iter().map(|x| x * x).sum::<f64>().sqrt();
        cand.iter_mut().for_each(|x| *x /= norm);
        let cand_ll = log_likelihood(&n, &bloch_of(&cand));
        if cand_ll >= ll {
            let gain = cand_ll - ll;
            t = cand;
            ll = cand_ll;
            step *= 1.5;
            if gain < MLE_TOL {
                converged = true;
                break;
            }
        } else {
            step *= 0.5;
            if step * g.iter().map(|x| x * x).sum::<f64>().sqrt() < 1e-15 {
                converged = true;
                break;
            }
        }
    }
    let rho = DensityMatrix::from_bloch(&bloch_of(&t))?;
    Ok(MleEstimate { rho, diagnostics: MleDiagnostics { iterations, log_likelihood: ll, converged } })
}

/// Pauli-basis process matrix: E(ρ) = Σ χ_lk σ_l ρ σ_k.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProcessMatrix(Mat4);

pub const CHI_TOL: f64 = 1e-8;

impl ProcessMatrix {
    /// Validates Hermiticity, unit trace and positivity within 1e−8.
    pub fn new(chi: Mat4) -> Result<Self> {
        let herm = (chi - chi.adjoint()).iter().map(|z| z.norm()).fold(0.0, f64::max);
        if herm > CHI_TOL {
            return validation(format!("chi is not Hermitian (deviation {herm:.3e})"));
        }
        let tr = chi.trace();
        if (tr.re - 1.0).abs() > CHI_TOL || tr.im.abs() > CHI_TOL {
            return validation(format!("chi trace {tr} differs from 1"));
        }
        let lo = SymmetricEigen::new(chi).eigenvalues.min();
        if lo < -CHI_TOL {
            return validation(format!("chi has negative eigenvalue {lo:.3e}"));
        }
        Ok(Self(chi))
    }

    pub fn matrix(&self) -> &Mat4 {
        &self.0
    }

    pub fn identity() -> Self {
        Self::pauli(Pauli::I)
    }

    /// The unitary channel ρ ↦ σ ρ σ.
    pub fn pauli(p: Pauli) -> Self {
        let mut m = Mat4::zeros();
        m[(p.index(), p.index())] = c(1.0, 0.0);
        Self(m)
    }

    /// Mixture with Pauli weights (diagonal χ).
    pub fn pauli_diagonal(w: [f64; 4]) -> Result<Self> {
        Self::new(Mat4::from_diagonal(&nalgebra::Vector4::from(w.map(|x| c(x, 0.0)))))
    }

    /// Image of an arbitrary operator under the channel.
    pub fn apply(&self, rho: &Mat2) -> Mat2 {
        apply_chi(&self.0, rho)
    }

    pub fn apply_state(&self, rho: &DensityMatrix) -> Result<DensityMatrix> {
        DensityMatrix::from_approx(self.apply(rho.matrix()))
    }

    pub fn frobenius_distance(&self, other: &ProcessMatrix) -> f64 {
        (self.0 - other.0).norm()
    }
}

const PAULIS: [Pauli; 4] = [Pauli::I, Pauli::X, Pauli::Y, Pauli::Z];

fn apply_chi(chi: &Mat4, rho: &Mat2) -> Mat2 {
    let mut out = Mat2::zeros();
    for (l, sl) in PAULIS.iter().enumerate() {
        for (k, sk) in PAULIS.iter().enumerate() {
            if chi[(l, k)] != c(0.0, 0.0) {
                out += sl.matrix() * rho * sk.matrix() * chi[(l, k)];
            }
        }
    }
    out
}

/// Raw χ from the linear inversion and its projection onto physical maps.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProcessReconstruction {
    pub raw: Mat4,
    pub projected: ProcessMatrix,
}

/// Probe inputs in the order used by [`process_from_pairs`].
pub const PROBES: [CanonicalState; 4] = [CanonicalState::H, CanonicalState::V, CanonicalState::P, CanonicalState::R];

/// χ from the images of |H⟩, |V⟩, |P⟩, |R⟩.
///
/// E(|H⟩⟨V|) = ρ_P + iρ_R − (1+i)/2·(ρ_H + ρ_V) and E(|V⟩⟨H|) = ρ_P − iρ_R − (1−i)/2·(ρ_H + ρ_V);
/// the Choi matrix built from the four operator images is read out in the
/// Pauli basis.
pub fn process_from_pairs(inputs: &[PureState; 4], outputs: &[DensityMatrix; 4]) -> Result<ProcessReconstruction> {
    for (s, p) in inputs.iter().zip(PROBES) {
        if !s.same_ray(&p.state()) {
            return validation(format!("probe inputs must be H, V, P, R in that order (expected {p})"));
        }
    }
    for o in outputs {
        DensityMatrix::new(*o.matrix())?;
    }
    let [h, v, p, r] = outputs.map(|o| *o.matrix());
    let i = c(0.0, 1.0);
    let one = c(1.0, 0.0);
    let e_hv = p + r * i - (h + v) * ((one + i) * 0.5);
    let e_vh = p - r * i - (h + v) * ((one - i) * 0.5);
    let images = [[h, e_hv], [e_vh, v]];

    let mut choi = Mat4::zeros();
    for j in 0..2 {
        for k in 0..2 {
            let e = images[j][k];
            for a in 0..2 {
                for b in 0..2 {
                    choi[(2 * j + a, 2 * k + b)] = e[(a, b)];
                }
            }
        }
    }
    // columns v_l = Σ_j |j⟩ ⊗ σ_l|j⟩
    let vecs = Mat4::from_fn(|row, l| PAULIS[l].matrix()[(row % 2, row / 2)]);
    let raw = vecs.adjoint() * choi * vecs * c(0.25, 0.0);
    Ok(ProcessReconstruction { raw, projected: project_cp(&raw)? })
}

/// Hermitian part, eigenvalues clipped at zero, trace renormalized to one.
pub fn project_cp(raw: &Mat4) -> Result<ProcessMatrix> {
    let h = (raw + raw.adjoint()) * c(0.5, 0.0);
    let eig = SymmetricEigen::new(h);
    let clipped = eig.eigenvalues.map(|x| x.max(0.0));
    let tr: f64 = clipped.sum();
    if !(tr > 0.0) {
        return validation("process matrix has no positive eigenvalue");
    }
    let d = Mat4::from_diagonal(&clipped.map(|x| c(x / tr, 0.0)));
    let m = eig.eigenvectors * d * eig.eigenvectors.adjoint();
    ProcessMatrix::new((m + m.adjoint()) * c(0.5, 0.0))
}

/// tr(χ_ideal χ)
pub fn process_fidelity(chi: &ProcessMatrix, ideal: &ProcessMatrix) -> f64 {
    (ideal.0 * chi.0).trace().re.clamp(0.0, 1.0)
}

/// r ↦ M r + c on Bloch vectors.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BlochAffineMap {
    pub m: Matrix3<f64>,
    pub c: Vector3<f64>,
}

impl BlochAffineMap {
    pub fn apply(&self, r: &Vector3<f64>) -> Vector3<f64> {
        self.m * r + self.c
    }

    /// Images of `n` quasi-uniform points on the unit sphere (Fibonacci lattice).
    pub fn deformed_sphere(&self, n: usize) -> Vec<Vector3<f64>> {
        fibonacci_sphere(n).iter().map(|r| self.apply(r)).collect()
    }
}

pub fn fibonacci_sphere(n: usize) -> Vec<Vector3<f64>> {
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    (0..n)
        .map(|i| {
            let z = 1.0 - 2.0 * (i as f64 + 0.5) / n as f64;
            let rho = (1.0 - z * z).sqrt();
            let phi = golden * i as f64;
            Vector3::new(rho * phi.cos(), rho * phi.sin(), z)
        })
        .collect()
}

/// M_ij = ½ tr(σ_i E(σ_j)), c_i = ½ tr(σ_i E(I)).
pub fn bloch_map(chi: &ProcessMatrix) -> BlochAffineMap {
    let s = [Pauli::X, Pauli::Y, Pauli::Z];
    let half_tr = |a: &Mat2, b: &Mat2| 0.5 * (a * b).trace().re;
    let m = Matrix3::from_fn(|i, j| half_tr(&s[i].matrix(), &chi.apply(&s[j].matrix())));
    let e0 = chi.apply(&Mat2::identity());
    let cv = Vector3::from_fn(|i, _| half_tr(&s[i].matrix(), &e0));
    BlochAffineMap { m, c: cv }
}

/// Serializable view of a χ matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChiArrays {
    pub re: [[f64; 4]; 4],
    pub im: [[f64; 4]; 4],
}

impl From<&Mat4> for ChiArrays {
    fn from(m: &Mat4) -> Self {
        let mut re = [[0.0; 4]; 4];
        let mut im = [[0.0; 4]; 4];
        for i in 0..4 {
            for j in 0..4 {
                re[i][j] = m[(i, j)].re;
                im[i][j] = m[(i, j)].im;
            }
        }
        Self { re, im }
    }
}
