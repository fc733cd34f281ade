//! Series active-power losses and their sensitivities.
//!
//! `L(x) = Σ |U_r − U_k|² r / (r² + x²)` over all branches. The swing voltage
//! is a fixed parameter, so every gradient and Hessian here lives in the
//! `2n`-dimensional space of non-swing coordinates.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::linalg::min_eigenvalue;
use crate::loadflow::{
    bus_voltages, factor_jacobian, jacobian, newton_solve, Component, FlowError, InjectionVector,
    NewtonOptions, StateVector,
};
use crate::network::{ExternalId, GridCase};

/// Losses and their first-order sensitivities at one operating point.
#[derive(Debug, Clone, PartialEq)]
pub struct LossSensitivities {
    pub value: f64,
    pub grad_x: Vec<f64>,
    /// `∇_S L`, ordered `(P_1..P_n, Q_1..Q_n)`.
    pub grad_s: Vec<f64>,
    /// Marginal loss coefficients, `−∇_S L`.
    pub mlc: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum LossWarning {
    /// At least one branch has zero resistance, so strict convexity of `L(x)`
    /// is no longer guaranteed.
    StrongConvexityLost { zero_resistance_branches: usize },
}

/// Constant Hessian `∇²_x L`: a conductance-weighted Laplacian with the swing
/// row and column removed, repeated for the `u` and `v` blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct LossHessianX {
    pub h: DMatrix<f64>,
    pub min_eig: f64,
    pub warnings: Vec<LossWarning>,
}

/// Finite-difference estimate of `∇²L(S)` at an injection profile.
#[derive(Debug, Clone, PartialEq)]
pub struct LossHessianS {
    /// Symmetrized estimate.
    pub h: DMatrix<f64>,
    pub min_eig: f64,
    /// `‖h_raw − h_rawᵀ‖∞` of the unsymmetrized estimate.
    pub asymmetry: f64,
}

#[derive(Debug, Error, Clone, PartialEq)]
#[error("perturbed re-solve failed for the {component} injection of bus {bus}: {source}")]
pub struct HessianError {
    pub bus: ExternalId,
    pub component: Component,
    #[source]
    pub source: FlowError,
}

fn check_len(case: &GridCase, x: &StateVector) -> Result<(), FlowError> {
    if x.len() != case.n() {
        Err(FlowError::DimensionMismatch {
            expected: case.n(),
            found: x.len(),
        })
    } else {
        Ok(())
    }
}

pub fn loss_value(case: &GridCase, x: &StateVector) -> Result<f64, FlowError> {
    check_len(case, x)?;
    let volt = bus_voltages(case, x);
    Ok(case
        .branches()
        .iter()
        .map(|br| (volt[br.from] - volt[br.to]).norm_sqr() * br.loss_weight())
        .sum())
}

pub fn loss_grad_x(case: &GridCase, x: &StateVector) -> Result<Vec<f64>, FlowError> {
    check_len(case, x)?;
    let n = case.n();
    let volt = bus_voltages(case, x);
    let mut grad = vec![0.0; 2 * n];
    for br in case.branches() {
        let w = 2.0 * br.loss_weight();
        let d = volt[br.from] - volt[br.to];
        if br.from > 0 {
            grad[br.from - 1] += w * d.re;
            grad[n + br.from - 1] += w * d.im;
        }
        if br.to > 0 {
            grad[br.to - 1] -= w * d.re;
            grad[n + br.to - 1] -= w * d.im;
        }
    }
    Ok(grad)
}

pub fn loss_hess_x(case: &GridCase) -> LossHessianX {
    let n = case.n();
    let mut lap = DMatrix::zeros(n, n);
    for br in case.branches() {
        let w = 2.0 * br.loss_weight();
        let (a, b) = (br.from, br.to);
        if a > 0 {
            lap[(a - 1, a - 1)] += w;
        }
        if b > 0 {
            lap[(b - 1, b - 1)] += w;
        }
        if a > 0 && b > 0 {
            lap[(a - 1, b - 1)] -= w;
            lap[(b - 1, a - 1)] -= w;
        }
    }
    let min_eig = min_eigenvalue(&lap);
    let mut h = DMatrix::zeros(2 * n, 2 * n);
    h.view_mut((0, 0), (n, n)).copy_from(&lap);
    h.view_mut((n, n), (n, n)).copy_from(&lap);

    let zero_r = case.branches().iter().filter(|b| b.r == 0.0).count();
    let warnings = if zero_r > 0 {
        vec![LossWarning::StrongConvexityLost {
            zero_resistance_branches: zero_r,
        }]
    } else {
        Vec::new()
    };
    LossHessianX {
        h,
        min_eig,
        warnings,
    }
}

/// Injection-space loss gradient `∇_S L = J(x)⁻ᵀ ∇_x L(x)` and the marginal
/// loss coefficients.
pub fn loss_grad_s(case: &GridCase, x: &StateVector) -> Result<LossSensitivities, FlowError> {
    let value = loss_value(case, x)?;
    let grad_x = loss_grad_x(case, x)?;
    let jt = jacobian(case, x)?.j.transpose();
    let lu = factor_jacobian(case, jt)?;
    let g = lu.solve(&DVector::from_column_slice(&grad_x));
    let grad_s: Vec<f64> = g.iter().copied().collect();
    let mlc = grad_s.iter().map(|v| -v).collect();
    Ok(LossSensitivities {
        value,
        grad_x,
        grad_s,
        mlc,
    })
}

/// Options for the warm-started re-solves behind [`loss_hess_s`].
pub const HESSIAN_RESOLVE: NewtonOptions = NewtonOptions {
    tol: 1e-11,
    max_iter: 30,
};

pub const DEFAULT_H_STEP: f64 = 1e-5;

/// Central-difference estimate of `∇²L(S)` at `s`, re-solving the load flow at
/// `s ± h·e_r` from the warm start `x`.
pub fn loss_hess_s(
    case: &GridCase,
    s: &InjectionVector,
    x: &StateVector,
    h_step: f64,
) -> Result<LossHessianS, HessianError> {
    assert!(h_step > 0.0, "h_step must be positive");
    let n = case.n();
    let fail = |k: usize, source: FlowError| HessianError {
        bus: case.external_id_of_coordinate(k),
        component: if k < n { Component::P } else { Component::Q },
        source,
    };
    let grad_at = |k: usize, delta: f64| -> Result<Vec<f64>, HessianError> {
        let sp = s.perturbed(k, delta);
        let sol = newton_solve(case, &sp, x, &HESSIAN_RESOLVE).map_err(|e| fail(k, e))?;
        loss_grad_s(case, &sol.x)
            .map(|ls| ls.grad_s)
            .map_err(|e| fail(k, e))
    };
    let columns: Vec<Vec<f64>> = (0..2 * n)
        .into_par_iter()
        .map(|k| {
            let plus = grad_at(k, h_step)?;
            let minus = grad_at(k, -h_step)?;
            Ok(plus
                .iter()
                .zip(&minus)
                .map(|(a, b)| (a - b) / (2.0 * h_step))
                .collect())
        })
        .collect::<Result<_, HessianError>>()?;

    let raw = DMatrix::from_fn(2 * n, 2 * n, |i, k| columns[k][i]);
    let asymmetry = (&raw - raw.transpose())
        .row_iter()
        .map(|row| row.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max);
    let h = (&raw + raw.transpose()) * 0.5;
    let min_eig = min_eigenvalue(&h);
    Ok(LossHessianS {
        h,
        min_eig,
        asymmetry,
    })
}

/// Largest relative asymmetry `‖h_raw − h_rawᵀ‖∞ / ‖h‖∞` accepted by
/// [`loss_hess_s_refined`].
pub const MAX_RELATIVE_ASYMMETRY: f64 = 1e-4;

/// Number of tenfold step reductions tried by [`loss_hess_s_refined`]. Steps
/// below ten times the re-solve tolerance are never tried.
pub const REFINEMENTS: usize = 5;

/// Error of [`loss_hess_s_refined`].
#[derive(Debug, Error, Clone, PartialEq)]
pub enum RefinedHessianError {
    #[error(transparent)]
    Resolve(#[from] HessianError),
    #[error("finite-difference estimate stayed asymmetric down to step {h_step:e} (relative asymmetry {relative:.3e})")]
    Unreliable { h_step: f64, relative: f64 },
}

/// [`loss_hess_s`] with step refinement.
///
/// Close to the solvability boundary a fixed step either crosses it, so a
/// re-solve fails, or straddles strong curvature and yields a visibly
/// asymmetric estimate. Starting from `h_step`, the step is divided by ten
/// until the estimate is symmetric to [`MAX_RELATIVE_ASYMMETRY`]. Returns
/// the accepted estimate and its step.
pub fn loss_hess_s_refined(
    case: &GridCase,
    s: &InjectionVector,
    x: &StateVector,
    h_step: f64,
) -> Result<(LossHessianS, f64), RefinedHessianError> {
    let mut h = h_step;
    let mut last = None;
    for _ in 0..=REFINEMENTS {
        if h < 10.0 * HESSIAN_RESOLVE.tol && last.is_some() {
            break;
        }
        match loss_hess_s(case, s, x, h) {
            Ok(hs) => {
                let scale = hs
                    .h
                    .row_iter()
                    .map(|row| row.iter().map(|v| v.abs()).sum::<f64>())
                    .fold(0.0, f64::max);
                let relative = if scale > 0.0 { hs.asymmetry / scale } else { 0.0 };
                if relative <= MAX_RELATIVE_ASYMMETRY {
                    return Ok((hs, h));
                }
                last = Some(RefinedHessianError::Unreliable { h_step: h, relative });
            }
            Err(e) => last = Some(e.into()),
        }
        h /= 10.0;
    }
    Err(last.expect("at least one attempt"))
}

/// Writes `external_bus_id,mlc_p,mlc_q`, one row per PQ bus in ascending
/// external id order.
pub fn write_mlc_csv<W: Write>(
    case: &GridCase,
    sens: &LossSensitivities,
    out: W,
) -> csv::Result<()> {
    let n = case.n();
    let mut rows: Vec<(ExternalId, f64, f64)> = (0..n)
        .map(|i| (case.external_id(i + 1), sens.mlc[i], sens.mlc[n + i]))
        .collect();
    rows.sort_by_key(|r| r.0);
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["external_bus_id", "mlc_p", "mlc_q"])?;
    for (id, p, q) in rows {
        w.serialize((id, p, q))?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::loadflow::flat_start;
    use crate::network::parse_case;

    fn one_branch(r: f64, x: f64, p: f64, q: f64) -> GridCase {
        parse_case(&format!(
            r#"{{"buses": [{{"id": 0, "kind": "swing"}}, {{"id": 1, "kind": "pq", "p": {p}, "q": {q}}}],
                "branches": [{{"from": 0, "to": 1, "r": {r}, "x": {x}}}]}}"#
        ))
        .unwrap()
    }

    #[test]
    fn loss_is_zero_at_flat_start() {
        let case = one_branch(0.01, 0.1, -0.5, -0.2);
        assert_eq!(loss_value(&case, &flat_start(&case)).unwrap(), 0.0);
        assert!(loss_grad_x(&case, &flat_start(&case))
            .unwrap()
            .iter()
            .all(|g| *g == 0.0));
    }

    #[test]
    fn single_branch_arithmetic() {
        let case = one_branch(1.0, 1.0, 0.0, 0.0);
        let x = StateVector::new(vec![0.9], vec![0.0]);
        assert!((loss_value(&case, &x).unwrap() - 0.005).abs() < 1e-15);
    }

    #[test]
    fn lossless_case_has_no_sensitivities() {
        let case = one_branch(0.0, 0.1, -0.5, -0.2);
        let x = StateVector::new(vec![0.97], vec![-0.05]);
        assert!(loss_grad_x(&case, &x).unwrap().iter().all(|g| *g == 0.0));
        let sens = loss_grad_s(&case, &x).unwrap();
        assert!(sens.grad_s.iter().all(|g| *g == 0.0));
        assert_eq!(sens.mlc, sens.grad_s.iter().map(|g| -g).collect::<Vec<_>>());
        let hx = loss_hess_x(&case);
        assert_eq!(
            hx.warnings,
            vec![LossWarning::StrongConvexityLost {
                zero_resistance_branches: 1
            }]
        );
    }

    #[test]
    fn lossless_injection_hessian_vanishes() {
        let case = one_branch(0.0, 0.1, -0.5, -0.2);
        let s = InjectionVector::from_case(&case);
        let sol = newton_solve(&case, &s, &flat_start(&case), &NewtonOptions::default()).unwrap();
        let hs = loss_hess_s(&case, &s, &sol.x, DEFAULT_H_STEP).unwrap();
        assert!(hs.h.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn mlc_csv_is_sorted_by_external_id() {
        let case = parse_case(
            r#"{"buses": [{"id": 9, "kind": "pq", "p": -0.1, "q": 0},
                          {"id": 1, "kind": "swing"},
                          {"id": 4, "kind": "pq", "p": -0.1, "q": 0}],
                "branches": [{"from": 1, "to": 9, "r": 0.01, "x": 0.1},
                             {"from": 9, "to": 4, "r": 0.01, "x": 0.1}]}"#,
        )
        .unwrap();
        let sens = LossSensitivities {
            value: 0.0,
            grad_x: vec![0.0; 4],
            grad_s: vec![-1.0, -2.0, -3.0, -4.0],
            mlc: vec![1.0, 2.0, 3.0, 4.0],
        };
        let mut buf = Vec::new();
        write_mlc_csv(&case, &sens, &mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "external_bus_id,mlc_p,mlc_q\n4,2.0,4.0\n9,1.0,3.0\n"
        );
    }
}
