#![allow(dead_code)]

use gridlocus::network::{BranchRecord, BusKindTag, BusRecord, CaseDocument};
use gridlocus::regularizer::residual_curvature;
use gridlocus::{
    jacobian, loss_grad_s, loss_hess_x, GridCase, InjectionVector, StateVector,
};
use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::rngs::StdRng;
use rand::Rng;

/// Also included by the CLI acceptance suite, hence the sibling-relative path.
pub fn fixture_path(name: &str) -> String {
    format!("{}/../core/fixtures/{name}", env!("CARGO_MANIFEST_DIR"))
}

pub fn fixture(name: &str) -> GridCase {
    let text = std::fs::read_to_string(fixture_path(name)).expect("fixture readable");
    if name.ends_with(".m") {
        gridlocus::import_matpower(&text).expect("fixture imports")
    } else {
        gridlocus::parse_case(&text).expect("fixture parses")
    }
}

pub fn two_bus(p: f64, q: f64, r: f64, x: f64) -> GridCase {
    gridlocus::parse_case(&format!(
        r#"{{"buses": [{{"id": 0, "kind": "swing"}}, {{"id": 1, "kind": "pq", "p": {p}, "q": {q}}}],
            "branches": [{{"from": 0, "to": 1, "r": {r}, "x": {x}}}]}}"#
    ))
    .unwrap()
}

/// High-voltage solution of a single branch `z` feeding injection `s` from a
/// unit swing, or `None` beyond the deliverability limit.
///
/// With `W = U₁`, `s·conj(z) = |W|² − W`, so `Im W = −Im w` and `Re W` solves
/// a quadratic.
pub fn two_bus_voltage(s: Complex64, z: Complex64) -> Option<Complex64> {
    let w = s * z.conj();
    let b = -w.im;
    let disc = 1.0 - 4.0 * (b * b - w.re);
    (disc >= 0.0).then(|| Complex64::new((1.0 + disc.sqrt()) / 2.0, b))
}

/// Largest load scaling `λ` for which `λ·s` is deliverable over `z`.
pub fn two_bus_limit(s: Complex64, z: Complex64) -> f64 {
    // disc(λ) = 1 − 4(λ² Im(w)² − λ Re(w)) = 0, positive root.
    let w = s * z.conj();
    let (a, b) = (4.0 * w.im * w.im, -4.0 * w.re);
    (-b + (b * b + 4.0 * a).sqrt()) / (2.0 * a)
}

/// Random connected case with `n` PQ buses: a random spanning tree plus a few
/// extra branches, no line charging unless `charging` is set.
pub fn random_case(rng: &mut StdRng, n: usize, charging: bool) -> GridCase {
    let mut buses = vec![BusRecord {
        id: 0,
        kind: BusKindTag::Swing,
        p: None,
        q: None,
        v_re: Some(rng.gen_range(0.95..1.05)),
        v_im: Some(rng.gen_range(-0.1..0.1)),
    }];
    for i in 1..=n {
        buses.push(BusRecord {
            id: i as i64,
            kind: BusKindTag::Pq,
            p: Some(rng.gen_range(-0.3..0.1)),
            q: Some(rng.gen_range(-0.1..0.05)),
            v_re: None,
            v_im: None,
        });
    }
    let branch = |from: usize, to: usize, rng: &mut StdRng| BranchRecord {
        from: from as i64,
        to: to as i64,
        r: rng.gen_range(0.005..0.05),
        x: rng.gen_range(0.02..0.2),
        b: if charging { rng.gen_range(0.0..0.05) } else { 0.0 },
    };
    let mut branches = Vec::new();
    for i in 1..=n {
        let j = rng.gen_range(0..i);
        branches.push(branch(i, j, rng));
    }
    for _ in 0..rng.gen_range(0..=n / 2) {
        let a = rng.gen_range(0..=n);
        let b = rng.gen_range(0..=n);
        if a != b {
            branches.push(branch(a, b, rng));
        }
    }
    GridCase::from_document(&CaseDocument { buses, branches }).unwrap()
}

/// Random state with magnitudes in `[0.85, 1.1]` and angles within ±0.4 rad.
pub fn random_state(rng: &mut StdRng, n: usize) -> StateVector {
    let (mut u, mut v) = (Vec::new(), Vec::new());
    for _ in 0..n {
        let z = Complex64::from_polar(rng.gen_range(0.85..1.1), rng.gen_range(-0.4..0.4));
        u.push(z.re);
        v.push(z.im);
    }
    StateVector::new(u, v)
}

pub fn max_abs(v: impl IntoIterator<Item = f64>) -> f64 {
    v.into_iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Closed-form `∇²L(S)` at a solved state:
/// `J⁻ᵀ (∇²_x L − Σ_i g_i ∇²F_i) J⁻¹` with `g = ∇_S L`.
pub fn exact_injection_hessian(case: &GridCase, x: &StateVector) -> DMatrix<f64> {
    let g = loss_grad_s(case, x).unwrap().grad_s;
    let m = loss_hess_x(case).h - residual_curvature(case, &g);
    let jinv = jacobian(case, x).unwrap().j.try_inverse().unwrap();
    let h = jinv.transpose() * m * &jinv;
    (&h + h.transpose()) * 0.5
}

pub fn min_eig(h: &DMatrix<f64>) -> f64 {
    nalgebra::SymmetricEigen::new(h.clone())
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}

pub fn injections(case: &GridCase) -> InjectionVector {
    InjectionVector::from_case(case)
}
