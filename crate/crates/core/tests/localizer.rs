mod common;

use std::collections::BTreeSet;

use common::*;
use gridlocus::localizer::{
    alpha_sweep, classify, corrected_injections, minimize_and_classify, write_sweep_csv,
    Classification, Diagnosis, LocalizeError, SweepOptions, SweepResult, DEFAULT_ALPHAS,
    GREEN_THRESHOLD,
};
use gridlocus::loss::DEFAULT_H_STEP;
use gridlocus::{minimize, newton_solve, GridCase, NewtonOptions, RegularizerOptions};

fn sweep(name: &str, alphas: &[f64]) -> (GridCase, SweepResult) {
    let case = fixture(name);
    let s = injections(&case);
    let result = alpha_sweep(&case, &s, alphas, &SweepOptions::default()).unwrap();
    (case, result)
}

fn diagnoses(result: &SweepResult) -> Vec<&Diagnosis> {
    result
        .entries
        .iter()
        .map(|e| e.diagnosis.as_ref().unwrap_or_else(|| panic!("alpha {}: {:?}", e.alpha, e.error)))
        .collect()
}

fn set(ids: Vec<i64>) -> BTreeSet<i64> {
    ids.into_iter().collect()
}

#[test]
fn corrected_injections_add_the_residual() {
    let case = fixture("grid16_active.json");
    let s = injections(&case);
    let sp = minimize(&case, &s, &RegularizerOptions::with_alpha(0.1)).unwrap();
    let s_bar = corrected_injections(&s, &sp).unwrap();
    let n = s.len();
    for i in 0..n {
        assert_eq!(s_bar.p[i], s.p[i] + sp.residual.f[i]);
        assert_eq!(s_bar.q[i], s.q[i] + sp.residual.f[n + i]);
        assert!((s_bar.p[i] - sp.residual.s_calc.p[i]).abs() <= 1e-12);
        assert!((s_bar.q[i] - sp.residual.s_calc.q[i]).abs() <= 1e-12);
    }
}

#[test]
fn corrected_injections_of_solvable_case_are_unchanged() {
    let case = fixture("two_bus.json");
    let s = injections(&case);
    let mut sp = minimize(&case, &s, &RegularizerOptions::with_alpha(0.1)).unwrap();
    sp.residual.f.iter_mut().for_each(|f| *f = 0.0);
    assert_eq!(corrected_injections(&s, &sp).unwrap(), s);
}

#[test]
fn corrected_injections_restore_solvability() {
    let case = fixture("two_bus_overloaded.json");
    let s = injections(&case);
    let sp = minimize(&case, &s, &RegularizerOptions::with_alpha(0.1)).unwrap();
    let s_bar = corrected_injections(&s, &sp).unwrap();
    let sol = newton_solve(&case, &s_bar, &sp.x_star, &NewtonOptions::default()).unwrap();
    assert!(gridlocus::mismatch(&case, &sol.x, &s_bar).unwrap().norm_inf() < 1e-8);
}

#[test]
fn unconverged_points_are_rejected() {
    let case = fixture("grid16_active.json");
    let s = injections(&case);
    let mut sp = minimize(&case, &s, &RegularizerOptions::with_alpha(0.1)).unwrap();
    sp.converged = false;
    assert!(matches!(corrected_injections(&s, &sp), Err(LocalizeError::NotConverged)));
    assert!(matches!(classify(&case, &sp, 0.1, DEFAULT_H_STEP), Err(LocalizeError::NotConverged)));
}

#[test]
fn diagnosis_is_internally_consistent() {
    let case = fixture("grid16_active.json");
    let s = injections(&case);
    let d = minimize_and_classify(&case, &s, 0.1, &SweepOptions::default()).unwrap();
    let ids: Vec<i64> = (1..=case.n()).map(|i| case.external_id(i)).collect();
    let mut ranked: Vec<i64> = d.ranking.iter().map(|r| r.bus).collect();
    ranked.sort();
    let mut sorted = ids.clone();
    sorted.sort();
    assert_eq!(ranked, sorted);
    for w in d.ranking.windows(2) {
        assert!(w[0].score > w[1].score || (w[0].score == w[1].score && w[0].bus < w[1].bus));
    }
    for (i, r) in d.residual_profile.iter().enumerate() {
        let k = case.internal_id(r.bus).unwrap() - 1;
        assert_eq!(d.s_bar[i].bus, r.bus);
        assert!((d.s_bar[i].p - s.p[k] - r.p).abs() <= 1e-12);
        assert!((d.s_bar[i].q - s.q[k] - r.q).abs() <= 1e-12);
    }
    let peak = d.ranking[0].score;
    let mean = d.ranking.iter().map(|r| r.score).sum::<f64>() / d.ranking.len() as f64;
    assert!((d.peak_to_mean() - peak / mean).abs() <= 1e-12);
}

#[test]
fn active_perturbation_is_localized_at_every_alpha() {
    let (_, result) = sweep("grid16_active.json", &DEFAULT_ALPHAS);
    for d in diagnoses(&result) {
        assert_eq!(set(d.top(2)), set(vec![7, 10]), "alpha {}", d.alpha);
    }
    assert_eq!(result.stability, 1.0);
}

#[test]
fn reactive_perturbation_is_localized_at_every_alpha() {
    let (_, result) = sweep("grid16_reactive.json", &DEFAULT_ALPHAS);
    for d in diagnoses(&result) {
        assert_eq!(d.top(1), vec![10], "alpha {}", d.alpha);
        let mlc_top = d
            .mlc_profile
            .iter()
            .max_by(|a, b| a.q.abs().total_cmp(&b.q.abs()))
            .unwrap();
        assert_eq!(mlc_top.bus, 10, "alpha {}", d.alpha);
    }
}

#[test]
fn light_load_is_green() {
    let (_, result) = sweep("grid16_light.json", &[1e-3, 1e-2]);
    for d in diagnoses(&result) {
        assert_eq!(d.classification, Classification::ConvexGreen);
        assert!(d.min_eig_ls.unwrap() > 0.0);
    }
}

#[test]
fn severe_small_alpha_run_is_red_and_depressed() {
    let (case, result) = sweep("grid16_severe.json", &DEFAULT_ALPHAS);
    let ds = diagnoses(&result);
    let red = ds[0];
    assert_eq!(red.alpha, 1e-3);
    assert_eq!(red.classification, Classification::IndefiniteRed);
    let greens: Vec<_> = ds.iter().filter(|d| d.classification == Classification::ConvexGreen).collect();
    assert!(!greens.is_empty());
    for g in greens {
        assert!(red.v_min < g.v_min, "alpha {}: {} vs {}", g.alpha, red.v_min, g.v_min);
    }

    // The estimate agrees with the closed-form curvature at the same point.
    let s = injections(&case);
    let sp = minimize(&case, &s, &RegularizerOptions::with_alpha(1e-3)).unwrap();
    let exact = min_eig(&exact_injection_hessian(&case, &sp.x_star));
    let got = red.min_eig_ls.unwrap();
    assert!(exact < 0.0);
    assert!((got - exact).abs() <= 1e-3 * exact.abs(), "{got} vs {exact}");
}

#[test]
fn classification_matches_thresholds() {
    for name in ["grid16_active.json", "grid16_reactive.json", "grid16_severe.json"] {
        let (_, result) = sweep(name, &DEFAULT_ALPHAS);
        for d in diagnoses(&result) {
            let ls = d.min_eig_ls.unwrap();
            assert_eq!(d.classification == Classification::ConvexGreen, ls >= GREEN_THRESHOLD);
            if d.classification == Classification::ConvexGreen {
                assert!(d.min_eig_prop3.unwrap() > 0.0);
            }
            assert!(d.hessian_error.is_none());
        }
    }
}

#[test]
fn sweep_entries_are_sorted() {
    let (_, result) = sweep("grid16_active.json", &[1.0, 0.01, 0.1]);
    let alphas: Vec<f64> = result.entries.iter().map(|e| e.alpha).collect();
    assert_eq!(alphas, vec![0.01, 0.1, 1.0]);
    assert!(result.entries.iter().all(|e| e.diagnosis.as_ref().unwrap().alpha == e.alpha));
}

#[test]
fn invalid_alphas_are_rejected() {
    let case = fixture("grid16_active.json");
    let s = injections(&case);
    let opts = SweepOptions::default();
    for alphas in [vec![], vec![0.1, 0.0], vec![-1.0], vec![0.1, 0.1], vec![f64::NAN]] {
        assert!(matches!(
            alpha_sweep(&case, &s, &alphas, &opts),
            Err(LocalizeError::InvalidAlphas(_))
        ));
    }
}

#[test]
fn ranking_survives_alpha_scaling() {
    for (name, k) in [("grid16_active.json", 2), ("grid16_reactive.json", 1), ("grid16_severe.json", 1)] {
        let (_, base) = sweep(name, &DEFAULT_ALPHAS);
        let scaled: Vec<f64> = DEFAULT_ALPHAS.iter().map(|a| a * 3.0).collect();
        let (_, other) = sweep(name, &scaled);
        for (a, b) in diagnoses(&base).iter().zip(diagnoses(&other)) {
            assert_eq!(set(a.top(k)), set(b.top(k)), "{name}: {} vs {}", a.alpha, b.alpha);
        }
    }
}

#[test]
#[ignore = "the peak-to-mean ratio grows with alpha on this fixture, see README"]
fn residual_profile_smooths_as_alpha_grows() {
    let (_, result) = sweep("grid16_active.json", &DEFAULT_ALPHAS);
    let ratios: Vec<f64> = diagnoses(&result).iter().map(|d| d.peak_to_mean()).collect();
    assert!(ratios.windows(2).all(|w| w[1] <= w[0]), "{ratios:?}");
}

#[test]
fn sweep_csv_layout() {
    let (case, result) = sweep("grid16_active.json", &[0.1, 1.0]);
    let mut out = Vec::new();
    write_sweep_csv(&result, &mut out).unwrap();
    let text = String::from_utf8(out).unwrap();
    let mut lines = text.lines();
    assert_eq!(
        lines.next().unwrap(),
        "alpha,external_bus_id,delta_p,delta_q,mlc_p,mlc_q,status"
    );
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 2 * case.n());
    assert!(rows.iter().all(|r| r.ends_with(",convex_green")));
    let ids: Vec<i64> = rows[..case.n()].iter().map(|r| r.split(',').nth(1).unwrap().parse().unwrap()).collect();
    assert!(ids.windows(2).all(|w| w[0] < w[1]));
}
