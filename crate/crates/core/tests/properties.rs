//! Property checks across module boundaries, driven through the public API.

use proptest::prelude::*;
use qtele_core::coincidence::{find_fourfolds, CoincidenceWindow};
use qtele_core::experiment::{run, DetectorTable, ExperimentConfig, TagScope};
use qtele_core::fockoptics::{beam_splitter, classify_pattern, spdc_state, BsmDetector, BsmOutcome, ClickPattern, SourceParams};
use qtele_core::linkmodel::{crossover_db, LinkBudget};
use qtele_core::qstate::{fidelity, fidelity_from_visibility, visibility, PureState, C64};
use qtele_core::tags::is_sorted;
use qtele_core::tomography::{bloch_map, mle_state, TomographyCounts};

fn arb_qubit() -> impl Strategy<Value = PureState> {
    (-1.0f64..1.0, -1.0f64..1.0, -1.0f64..1.0, -1.0f64..1.0)
        .prop_filter("nonzero", |(a, b, c, d)| a * a + b * b + c * c + d * d > 1e-3)
        .prop_map(|(a, b, c, d)| PureState::normalized(C64::new(a, b), C64::new(c, d)).unwrap())
}

#[test]
fn classification_covers_all_sixteen_patterns() {
    use BsmDetector::*;
    let mut seen = [0; 3];
    for bits in 0u8..16 {
        let p = ClickPattern::from_bits(bits);
        let has = |a, b| p.len() == 2 && p.contains(a) && p.contains(b);
        let want = if has(D1, D4) || has(D2, D3) {
            BsmOutcome::PsiMinus
        } else if has(D1, D2) || has(D3, D4) {
            BsmOutcome::PsiPlus
        } else {
            BsmOutcome::Inconclusive
        };
        assert_eq!(classify_pattern(p), want, "{bits:04b}");
        seen[want as usize] += 1;
    }
    assert_eq!(seen, [2, 2, 12]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn beam_splitter_keeps_norm_and_photon_number(
        input in arb_qubit(),
        g1 in 0.0f64..0.44,
        g2 in 0.0f64..0.44,
        xi in 0.0f64..=1.0,
        n_max in 4u8..=6,
    ) {
        let params = SourceParams::new(g1, g2, xi).unwrap();
        let src = spdc_state(&params, &input, n_max).unwrap();
        let out = beam_splitter(&src);
        prop_assert!((out.norm_sqr() - src.norm_sqr()).abs() < 1e-9);
        prop_assert_eq!(out.photon_numbers(), src.photon_numbers());
    }
}

proptest! {
    #[test]
    fn fidelity_visibility_round_trip(f in 0.0f64..=1.0) {
        let v = visibility(f).unwrap();
        prop_assert!((fidelity_from_visibility(v) - f).abs() < 1e-15);
        prop_assert!((-1.0..=1.0).contains(&v));
    }

    #[test]
    fn pure_states_have_unit_self_fidelity(s in arb_qubit()) {
        prop_assert!((fidelity(&s, &s.projector()) - 1.0).abs() < 1e-10);
    }

    #[test]
    fn mle_is_physical_for_any_counts(
        hv in (0u64..5000, 0u64..5000),
        pm in (0u64..5000, 0u64..5000),
        rl in (0u64..5000, 0u64..5000),
    ) {
        prop_assume!(hv.0 + hv.1 + pm.0 + pm.1 + rl.0 + rl.1 > 0);
        let est = mle_state(&TomographyCounts::new(hv, pm, rl).unwrap()).unwrap();
        let (lo, hi) = est.rho.eigenvalues();
        prop_assert!(lo >= -1e-12 && hi <= 1.0 + 1e-12);
        prop_assert!((est.rho.matrix().trace().re - 1.0).abs() < 1e-12);
        prop_assert!(est.rho.bloch_vector().norm() <= 1.0 + 1e-9);
    }

    #[test]
    fn crossover_sits_where_visibility_is_one_third(
        v0 in 0.34f64..1.0,
        n in 10.0f64..5000.0,
        tau in 1e-10f64..3e-8,
        eff in 0.05f64..=1.0,
    ) {
        let b = LinkBudget { v0, n_hz: n, tau_s: tau, bob_efficiency: eff, ..LinkBudget::default() };
        let db = crossover_db(&b).unwrap();
        prop_assert!((b.at(db).visibility() - 1.0 / 3.0).abs() < 1e-9);
        prop_assert!(b.at(db - 0.1).visibility() > 1.0 / 3.0);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn runs_are_reproducible_sorted_and_quantized(
        seed in any::<u64>(),
        db in 0.0f64..20.0,
        res in 1u64..400,
        gated in any::<bool>(),
        basis in 0usize..3,
    ) {
        let s = [PureState::h(), PureState::p(), PureState::r()][basis];
        let cfg = ExperimentConfig {
            seed,
            attenuation_db: db,
            tag_resolution_ps: res,
            pulses: 20_000_000,
            detectors: DetectorTable::with_efficiency(0.5),
            charlie_state: s,
            bob_basis: qtele_core::qstate::CanonicalState::identify(&s).unwrap().basis().0,
            tag_scope: if gated { TagScope::Gated } else { TagScope::Full },
            ..ExperimentConfig::default()
        };
        let a = run(&cfg).unwrap();
        let b = run(&cfg).unwrap();
        prop_assert_eq!(&a.tags, &b.tags);
        prop_assert_eq!(&a.counts, &b.counts);
        prop_assert!(is_sorted(&a.tags));
        prop_assert!(a.tags.iter().all(|t| t.time_ps % res == 0));
        let w = CoincidenceWindow::new(cfg.window_ps.max(res), res).unwrap();
        let events = find_fourfolds(&a.tags, w).unwrap();
        prop_assert_eq!(&events, &find_fourfolds(&a.tags, w).unwrap());
    }

    #[test]
    fn affine_bloch_map_of_random_pauli_channels_keeps_the_ball(
        w in (0.0f64..1.0, 0.0f64..1.0, 0.0f64..1.0, 0.0f64..1.0),
    ) {
        let total = w.0 + w.1 + w.2 + w.3;
        prop_assume!(total > 1e-6);
        let chi = qtele_core::tomography::ProcessMatrix::pauli_diagonal(
            [w.0 / total, w.1 / total, w.2 / total, w.3 / total],
        ).unwrap();
        for r in bloch_map(&chi).deformed_sphere(1000) {
            prop_assert!(r.norm() <= 1.0 + 1e-9);
        }
    }
}
