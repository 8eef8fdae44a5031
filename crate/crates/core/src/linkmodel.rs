//! Analytic rate/visibility model of the lossy link.
//!
//! Signal four-folds scale with the link transmission η, while the dominant
//! noise is a heralded three-fold at Alice meeting a Bob dark count inside
//! the coincidence window, which does not depend on η.

use std::io::Write;

use levenberg_marquardt::{LeastSquaresProblem, LevenbergMarquardt};
use nalgebra::{Dyn, Matrix3, OMatrix, OVector, Owned, Vector3, U3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Classical teleportation limits.
pub struct ClassicalBounds;

impl ClassicalBounds {
    /// f_cl as the exact fraction (numerator, denominator).
    pub const FIDELITY_RATIO: (u32, u32) = (2, 3);
    /// v_cl as the exact fraction (numerator, denominator).
    pub const VISIBILITY_RATIO: (u32, u32) = (1, 3);
    pub const F_CL: f64 = 2.0 / 3.0;
    pub const V_CL: f64 = 1.0 / 3.0;

    /// v_cl = 2·f_cl − 1, checked in integer arithmetic.
    pub fn relation_holds() -> bool {
        let (fn_, fd) = Self::FIDELITY_RATIO;
        let (vn, vd) = Self::VISIBILITY_RATIO;
        (2 * fn_ - fd) * vd == vn * fd
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinkBudget {
    pub attenuation_db: f64,
    /// Bob's dark-count rate summed over his detectors.
    pub n_hz: f64,
    pub tau_s: f64,
    /// Heralded three-fold rate at Alice.
    pub p_bsm_hz: f64,
    pub v0: f64,
    pub s2_frac: f64,
    /// Visibility carried by the second-order term.
    pub v2: f64,
    /// Detection efficiency folded into the transmission (1 for a pure link budget).
    pub bob_efficiency: f64,
}

impl Default for LinkBudget {
    fn default() -> Self {
        Self {
            attenuation_db: 31.0,
            n_hz: 400.0,
            tau_s: 3e-9,
            p_bsm_hz: 1.0,
            v0: 1.0,
            s2_frac: 0.0,
            v2: 0.0,
            bob_efficiency: 1.0,
        }
    }
}

impl LinkBudget {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Validation(m));
        if !(self.attenuation_db.is_finite() && self.attenuation_db >= 0.0) {
            return bad(format!("attenuation_db = {} must be >= 0", self.attenuation_db));
        }
        for (name, v) in [("n_hz", self.n_hz), ("tau_s", self.tau_s), ("p_bsm_hz", self.p_bsm_hz), ("s2_frac", self.s2_frac)] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{name} = {v} must be >= 0"));
            }
        }
        for (name, v) in [("v0", self.v0), ("v2", self.v2)] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{name} = {v} must lie in [0, 1]"));
            }
        }
        if !(self.bob_efficiency > 0.0 && self.bob_efficiency <= 1.0) {
            return bad(format!("bob_efficiency = {} must lie in (0, 1]", self.bob_efficiency));
        }
        Ok(())
    }

    pub fn eta(&self) -> f64 {
        self.eta_at(self.attenuation_db)
    }

    pub fn eta_at(&self, attenuation_db: f64) -> f64 {
        10f64.powf(-attenuation_db / 10.0) * self.bob_efficiency
    }

    pub fn at(&self, attenuation_db: f64) -> Self {
        Self { attenuation_db, ..*self }
    }

    pub fn rate_hz(&self) -> f64 {
        let eta = self.eta();
        self.p_bsm_hz * eta * (1.0 + self.s2_frac) + self.floor_hz()
    }

    /// Accidental floor p_BSM · n · τ.
    pub fn floor_hz(&self) -> f64 {
        self.p_bsm_hz * self.n_hz * self.tau_s
    }

    pub fn visibility(&self) -> f64 {
        let eta = self.eta();
        let den = eta * (1.0 + self.s2_frac) + self.n_hz * self.tau_s;
        if den == 0.0 {
            return self.v0;
        }
        eta * (self.v0 + self.v2 * self.s2_frac) / den
    }
}

/// η / (n τ); infinite when n·τ = 0.
pub fn snr(budget: &LinkBudget) -> f64 {
    let noise = budget.n_hz * budget.tau_s;
    if noise == 0.0 {
        f64::INFINITY
    } else {
        budget.eta() / noise
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub attenuation_db: f64,
    pub rate_hz: f64,
    pub visibility: f64,
    pub snr: f64,
}

pub fn predict_rate_visibility(budget: &LinkBudget, sweep_db: &[f64]) -> Vec<Prediction> {
    sweep_db
        .iter()
        .map(|db| {
            let b = budget.at(*db);
            Prediction { attenuation_db: *db, rate_hz: b.rate_hz(), visibility: b.visibility(), snr: snr(&b) }
        })
        .collect()
}

pub fn write_predictions_csv<W: Write>(mut w: W, comment: Option<&str>, rows: &[Prediction]) -> Result<()> {
    if let Some(c) = comment {
        writeln!(w, "# {c}")?;
    }
    writeln!(w, "attenuation_db,rate_hz,visibility,snr")?;
    for r in rows {
        writeln!(w, "{},{:.9e},{:.9},{:.9e}", r.attenuation_db, r.rate_hz, r.visibility, r.snr)?;
    }
    w.flush()?;
    Ok(())
}

/// Attenuation where the visibility falls to 1/3, by bisection; `None` if it never does
/// within 0–1000 dB or is already below at 0 dB.
pub fn crossover_db(budget: &LinkBudget) -> Option<f64> {
    let f = |db: f64| budget.at(db).visibility() - ClassicalBounds::V_CL;
    let (mut lo, mut hi) = (0.0, 1000.0);
    if f(lo) < 0.0 || f(hi) >= 0.0 {
        return None;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if f(mid) >= 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Some(0.5 * (lo + hi))
}

/// η* = n τ / (3 v0 − 1), valid for s2_frac = 0 and v0 > 1/3.
pub fn crossover_eta_closed_form(budget: &LinkBudget) -> Option<f64> {
    if budget.v0 <= ClassicalBounds::V_CL {
        return None;
    }
    Some(budget.n_hz * budget.tau_s / (3.0 * budget.v0 - 1.0))
}

/// One measured point with its one-sigma errors.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub attenuation_db: f64,
    pub rate_hz: f64,
    pub rate_err: f64,
    pub visibility: f64,
    pub visibility_err: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub budget: LinkBudget,
    /// One-sigma errors of (p_bsm_hz, v0, s2_frac) from the curvature at the optimum.
    pub std_errors: [f64; 3],
    pub rate_residuals: Vec<f64>,
    pub visibility_residuals: Vec<f64>,
    /// sqrt of the weighted residual sum of squares.
    pub residual_norm: f64,
    pub evaluations: usize,
    pub converged: bool,
    /// Parameters the data do not constrain.
    pub unidentifiable: Vec<String>,
    /// Parameters held at a physical bound (s2_frac = 0) because the free optimum lay outside it.
    pub at_bound: Vec<String>,
}

impl FitReport {
    pub fn is_identifiable(&self) -> bool {
        self.unidentifiable.is_empty()
    }
}

struct BudgetFit<'a> {
    points: &'a [SweepPoint],
    base: LinkBudget,
    /// (ln p_bsm, v0, s2)
    x: Vector3<f64>,
    fix_s2: bool,
}

impl BudgetFit<'_> {
    fn budget(&self, x: &Vector3<f64>) -> LinkBudget {
        LinkBudget { p_bsm_hz: x[0].exp(), v0: x[1], s2_frac: x[2], ..self.base }
    }

    fn model(&self, x: &Vector3<f64>, p: &SweepPoint) -> (f64, f64) {
        let b = self.budget(x).at(p.attenuation_db);
        (b.rate_hz(), b.visibility())
    }

    fn jacobian_at(&self, x: &Vector3<f64>) -> OMatrix<f64, Dyn, U3> {
        let m = self.points.len();
        let mut j = OMatrix::<f64, Dyn, U3>::zeros(2 * m);
        let b0 = self.budget(x);
        for (i, p) in self.points.iter().enumerate() {
            let b = b0.at(p.attenuation_db);
            let eta = b.eta();
            let nt = b.n_hz * b.tau_s;
            let den = eta * (1.0 + b.s2_frac) + nt;
            j[(i, 0)] = b.rate_hz() / p.rate_err;
            j[(i, 2)] = b.p_bsm_hz * eta / p.rate_err;
            if den > 0.0 {
                let num = eta * (b.v0 + b.v2 * b.s2_frac);
                j[(m + i, 1)] = eta / den / p.visibility_err;
                j[(m + i, 2)] = (eta * b.v2 / den - num * eta / (den * den)) / p.visibility_err;
            }
        }
        if self.fix_s2 {
            j.column_mut(2).fill(0.0);
        }
        j
    }
}

impl LeastSquaresProblem<f64, Dyn, U3> for BudgetFit<'_> {
    type ResidualStorage = Owned<f64, Dyn>;
    type JacobianStorage = Owned<f64, Dyn, U3>;
    type ParameterStorage = Owned<f64, U3>;

    fn set_params(&mut self, x: &Vector3<f64>) {
        self.x = *x;
        if self.fix_s2 {
            self.x[2] = 0.0;
        }
    }

    fn params(&self) -> Vector3<f64> {
        self.x
    }

    fn residuals(&self) -> Option<OVector<f64, Dyn>> {
        let m = self.points.len();
        let mut r = OVector::<f64, Dyn>::zeros(2 * m);
        for (i, p) in self.points.iter().enumerate() {
            let (rate, vis) = self.model(&self.x, p);
            r[i] = (rate - p.rate_hz) / p.rate_err;
            r[m + i] = (vis - p.visibility) / p.visibility_err;
        }
        Some(r)
    }

    fn jacobian(&self) -> Option<OMatrix<f64, Dyn, U3>> {
        Some(self.jacobian_at(&self.x))
    }
}

/// Weighted least-squares fit of (p_bsm_hz, v0, s2_frac) with n, τ, v2 and
/// the detection efficiency taken from `known`.
pub fn fit_budget(points: &[SweepPoint], known: &LinkBudget) -> Result<FitReport> {
    if points.len() < 4 {
        return Err(Error::Validation(format!("fit needs at least 4 sweep points, got {}", points.len())));
    }
    known.validate()?;
    for p in points {
        let ok = [p.attenuation_db, p.rate_hz, p.visibility].iter().all(|v| v.is_finite())
            && p.rate_err > 0.0
            && p.visibility_err > 0.0
            && p.rate_hz >= 0.0;
        if !ok {
            return Err(Error::Validation(format!("invalid sweep point {p:?}")));
        }
    }
    // starting point: the lowest-attenuation point fixes p_bsm and v0
    let best = points
        .iter()
        .min_by(|a, b| a.attenuation_db.total_cmp(&b.attenuation_db))
        .expect("non-empty");
    let eta0 = known.eta_at(best.attenuation_db);
    let p0 = (best.rate_hz / (eta0 + known.n_hz * known.tau_s)).max(1e-300);
    let v_start = (best.visibility * (eta0 + known.n_hz * known.tau_s) / eta0).clamp(0.05, 1.0);
    let problem = BudgetFit { points, base: *known, x: Vector3::new(p0.ln(), v_start, 0.0), fix_s2: false };
    let (mut fit, mut report) = LevenbergMarquardt::new().with_patience(500).minimize(problem);
    if fit.x[2] < 0.0 {
        let x = Vector3::new(fit.x[0], fit.x[1], 0.0);
        (fit, report) = LevenbergMarquardt::new()
            .with_patience(500)
            .minimize(BudgetFit { points, base: *known, x, fix_s2: true });
    }

    let x = fit.x;
    let budget = fit.budget(&x);
    let m = points.len();
    let res = fit.residuals().unwrap_or_else(|| OVector::<f64, Dyn>::zeros(2 * m));
    let rate_residuals = (0..m).map(|i| res[i]).collect();
    let visibility_residuals = (0..m).map(|i| res[m + i]).collect();
    let residual_norm = res.norm();

    let j = fit.jacobian_at(&x);
    let jtj: Matrix3<f64> = j.transpose() * &j;
    let mut std_errors = [f64::INFINITY; 3];
    let free = if fit.fix_s2 { 2 } else { 3 };
    if let Some(cov) = jtj.view((0, 0), (free, free)).clone_owned().try_inverse() {
        for k in 0..free {
            std_errors[k] = cov[(k, k)].max(0.0).sqrt();
        }
        // ln p → p
        std_errors[0] *= budget.p_bsm_hz;
    }
    if fit.fix_s2 {
        std_errors[2] = 0.0;
    }
    let mut unidentifiable = Vec::new();
    let checks = [
        ("p_bsm_hz", std_errors[0] > budget.p_bsm_hz.abs()),
        ("v0", std_errors[1] > 1.0),
        ("s2_frac", std_errors[2] > 1.0),
    ];
    for (name, bad) in checks {
        if bad || !std_errors.iter().all(|e| e.is_finite()) {
            unidentifiable.push(name.to_string());
        }
    }
    unidentifiable.dedup();
    Ok(FitReport {
        budget,
        std_errors,
        rate_residuals,
        visibility_residuals,
        residual_norm,
        evaluations: report.number_of_evaluations,
        converged: report.termination.was_successful(),
        unidentifiable,
        at_bound: if fit.fix_s2 { vec!["s2_frac".to_string()] } else { Vec::new() },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn reference_link() -> LinkBudget {
        LinkBudget { attenuation_db: 31.0, n_hz: 400.0, tau_s: 3e-9, ..LinkBudget::default() }
    }

    #[test]
    fn snr_examples() {
        assert_eq!(snr(&reference_link()), 10f64.powf(-3.1) / (400.0 * 3e-9));
        assert!((snr(&reference_link()) - 661.9).abs() < 0.1);
        assert!((snr(&reference_link().at(50.0)) - 8.333).abs() < 1e-3);
        let unit = LinkBudget { attenuation_db: 0.0, n_hz: 1.0, tau_s: 1.0, ..reference_link() };
        assert_eq!(snr(&unit), 1.0);
        assert!(snr(&LinkBudget { n_hz: 0.0, ..reference_link() }).is_infinite());
    }

    #[test]
    fn classical_bounds() {
        assert!(ClassicalBounds::relation_holds());
        assert_eq!(ClassicalBounds::V_CL, 1.0 / 3.0);
        assert!((2.0 * ClassicalBounds::F_CL - 1.0 - ClassicalBounds::V_CL).abs() <= f64::EPSILON);
    }

    #[test]
    fn prediction_limits() {
        let clean = LinkBudget { n_hz: 0.0, v0: 0.93, ..reference_link() };
        assert!((clean.at(0.0).visibility() - 0.93).abs() < 1e-15);
        let b = LinkBudget { p_bsm_hz: 2.0, ..reference_link() };
        let far = b.at(300.0);
        assert!((far.rate_hz() - 2.0 * 400.0 * 3e-9).abs() < 1e-18);
        let rows = predict_rate_visibility(&LinkBudget { n_hz: 0.0, v0: 0.8, ..reference_link() }, &[0.0, 20.0, 60.0]);
        assert!(rows.iter().all(|r| (r.visibility - 0.8).abs() < 1e-12));
    }

    #[test]
    fn crossover_matches_closed_form() {
        for v0 in [0.5, 0.8, 0.95, 1.0] {
            let b = LinkBudget { v0, ..reference_link() };
            let db = crossover_db(&b).unwrap();
            let eta = crossover_eta_closed_form(&b).unwrap();
            assert!((10f64.powf(-db / 10.0) - eta).abs() / eta < 1e-9);
            assert!((b.at(db).visibility() - 1.0 / 3.0).abs() < 1e-9);
        }
        assert!(crossover_db(&LinkBudget { v0: 0.3, ..reference_link() }).is_none());
        assert!(crossover_eta_closed_form(&LinkBudget { v0: 0.3, ..reference_link() }).is_none());
    }

    proptest! {
        #[test]
        fn snr_is_strictly_decreasing(db in 0.0f64..80.0, n in 1.0f64..1e4, tau in 1e-10f64..1e-7, d in 1e-3f64..10.0) {
            let b = LinkBudget { attenuation_db: db, n_hz: n, tau_s: tau, ..reference_link() };
            prop_assert!(snr(&b.at(db + d)) < snr(&b));
            let more_dark = LinkBudget { n_hz: n * (1.0 + d), ..b };
            let wider = LinkBudget { tau_s: tau * (1.0 + d), ..b };
            prop_assert!(snr(&more_dark) < snr(&b));
            prop_assert!(snr(&wider) < snr(&b));
        }

        #[test]
        fn prediction_is_monotone(db in 0.0f64..80.0, d in 1e-3f64..10.0, v0 in 0.0f64..1.0, s2 in 0.0f64..0.5, v2 in 0.0f64..1.0) {
            let b = LinkBudget { attenuation_db: db, v0, s2_frac: s2, v2, p_bsm_hz: 3.0, ..reference_link() };
            let (a, c) = (b, b.at(db + d));
            prop_assert!(c.visibility() <= a.visibility() + 1e-15);
            prop_assert!(c.rate_hz() < a.rate_hz());
            prop_assert!(c.rate_hz() > a.floor_hz());
        }

        #[test]
        fn quantum_region_matches_crossover(db in 0.0f64..80.0, v0 in 0.34f64..1.0) {
            let b = LinkBudget { attenuation_db: db, v0, ..reference_link() };
            let eta_star = crossover_eta_closed_form(&b).unwrap();
            let above = b.visibility() >= 1.0 / 3.0;
            prop_assume!(((b.eta() - eta_star) / eta_star).abs() > 1e-9);
            prop_assert_eq!(above, b.eta() >= eta_star);
        }
    }

    fn synthetic(truth: &LinkBudget, dbs: &[f64]) -> Vec<SweepPoint> {
        predict_rate_visibility(truth, dbs)
            .into_iter()
            .map(|p| SweepPoint {
                attenuation_db: p.attenuation_db,
                rate_hz: p.rate_hz,
                rate_err: 0.05 * p.rate_hz,
                visibility: p.visibility,
                visibility_err: 0.02,
            })
            .collect()
    }

    #[test]
    fn fit_recovers_noise_free_budget() {
        let truth = LinkBudget { p_bsm_hz: 40.0, v0: 0.88, s2_frac: 0.07, v2: 0.2, ..reference_link() };
        let dbs: Vec<f64> = (0..=12).map(|k| 5.0 * k as f64).collect();
        let fit = fit_budget(&synthetic(&truth, &dbs), &truth).unwrap();
        assert!(fit.converged);
        assert!(fit.is_identifiable(), "{:?}", fit.unidentifiable);
        let rel = |a: f64, b: f64| ((a - b) / b).abs();
        assert!(rel(fit.budget.p_bsm_hz, 40.0) < 1e-6);
        assert!(rel(fit.budget.v0, 0.88) < 1e-6);
        assert!(rel(fit.budget.s2_frac, 0.07) < 1e-6);
        assert!(fit.residual_norm < 1e-6);
    }

    #[test]
    fn fit_flags_tail_only_data() {
        let truth = LinkBudget { p_bsm_hz: 40.0, v0: 0.9, ..reference_link() };
        let fit = fit_budget(&synthetic(&truth, &[90.0, 100.0, 110.0, 120.0]), &truth).unwrap();
        assert!(fit.unidentifiable.contains(&"v0".to_string()), "{fit:?}");
    }

    #[test]
    fn fit_rejects_short_or_bad_input() {
        let truth = reference_link();
        let pts = synthetic(&truth, &[0.0, 10.0, 20.0]);
        assert!(fit_budget(&pts, &truth).is_err());
        let mut pts = synthetic(&truth, &[0.0, 10.0, 20.0, 30.0]);
        pts[1].rate_err = 0.0;
        assert!(fit_budget(&pts, &truth).is_err());
    }

    #[test]
    fn negative_s2_is_held_at_zero() {
        // visibility rising at the floor pulls the free optimum to s2 < 0
        let truth = LinkBudget { p_bsm_hz: 40.0, v0: 0.9, s2_frac: 0.0, v2: 0.2, ..reference_link() };
        let dbs: Vec<f64> = (0..=10).map(|k| 5.0 * k as f64).collect();
        let mut pts = synthetic(&truth, &dbs);
        for p in pts.iter_mut().take(3) {
            p.rate_hz *= 0.8;
        }
        let fit = fit_budget(&pts, &truth).unwrap();
        assert_eq!(fit.budget.s2_frac, 0.0);
        assert_eq!(fit.at_bound, ["s2_frac"]);
        assert_eq!(fit.std_errors[2], 0.0);
        assert!(fit.std_errors[0].is_finite() && fit.std_errors[1].is_finite());

        let clean = fit_budget(&synthetic(&truth, &dbs), &truth).unwrap();
        assert!(clean.at_bound.is_empty() || clean.budget.s2_frac == 0.0);
    }

    #[test]
    fn prediction_csv_layout() {
        let mut buf = Vec::new();
        write_predictions_csv(&mut buf, Some("x"), &predict_rate_visibility(&reference_link(), &[31.0])).unwrap();
        let s = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = s.lines().collect();
        assert_eq!(lines[1], "attenuation_db,rate_hz,visibility,snr");
        assert!(lines[2].starts_with("31,"));
    }
}
