//! Turns a stationary point of the regularized problem into a diagnosis:
//! corrected injections, residual and loss-sensitivity profiles, a suspect
//! ranking and a convexity classification.

use std::io::Write;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::linalg::min_eigenvalue;
use crate::loadflow::{bus_voltages, FlowError, InjectionVector};
use crate::loss::{loss_grad_s, loss_hess_s_refined, DEFAULT_H_STEP};
use crate::network::{ExternalId, GridCase};
use crate::regularizer::{minimize, MinimizeError, RegularizerOptions, StationaryPoint};

pub const DEFAULT_ALPHAS: [f64; 5] = [1e-3, 1e-2, 1e-1, 1.0, 10.0];

/// Smallest eigenvalue of `∇²L(S̄)` still counted as positive definite.
pub const GREEN_THRESHOLD: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum LocalizeError {
    #[error("stationary point did not converge")]
    NotConverged,
    #[error("alpha list must be non-empty, positive and free of duplicates: {0}")]
    InvalidAlphas(String),
    #[error(transparent)]
    Flow(#[from] FlowError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Classification {
    ConvexGreen,
    IndefiniteRed,
    Unknown,
}

impl Classification {
    pub fn as_str(self) -> &'static str {
        match self {
            Classification::ConvexGreen => "convex_green",
            Classification::IndefiniteRed => "indefinite_red",
            Classification::Unknown => "unknown",
        }
    }
}

/// A `(P, Q)` pair attached to one bus.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BusPair {
    pub bus: ExternalId,
    pub p: f64,
    pub q: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Suspect {
    pub bus: ExternalId,
    pub score: f64,
}

/// Profiles are listed per non-swing bus in ascending external id order.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Diagnosis {
    pub alpha: f64,
    pub s_bar: Vec<BusPair>,
    pub residual_profile: Vec<BusPair>,
    pub mlc_profile: Vec<BusPair>,
    pub ranking: Vec<Suspect>,
    pub classification: Classification,
    pub min_eig_ls: Option<f64>,
    pub min_eig_prop3: Option<f64>,
    /// Finite-difference step at which the Hessian estimate was accepted.
    pub hessian_step: Option<f64>,
    /// Set when the injection-space Hessian could not be estimated.
    pub hessian_error: Option<String>,
    pub v_min: f64,
    pub objective: f64,
    pub grad_norm: f64,
    pub iterations: usize,
}

impl Diagnosis {
    pub fn top(&self, k: usize) -> Vec<ExternalId> {
        self.ranking.iter().take(k).map(|s| s.bus).collect()
    }

    /// Largest suspect score divided by the mean score.
    pub fn peak_to_mean(&self) -> f64 {
        let scores: Vec<f64> = self.ranking.iter().map(|s| s.score).collect();
        let mean = scores.iter().sum::<f64>() / scores.len().max(1) as f64;
        let peak = scores.iter().copied().fold(0.0, f64::max);
        if mean == 0.0 {
            1.0
        } else {
            peak / mean
        }
    }
}

/// `S̄ = S + F(x*, S)`.
pub fn corrected_injections(
    s: &InjectionVector,
    stationary: &StationaryPoint,
) -> Result<InjectionVector, LocalizeError> {
    if !stationary.converged {
        return Err(LocalizeError::NotConverged);
    }
    let f = &stationary.residual.f;
    if f.len() != 2 * s.len() {
        return Err(FlowError::DimensionMismatch {
            expected: 2 * s.len(),
            found: f.len(),
        }
        .into());
    }
    let mut out = s.to_vec();
    for (o, d) in out.iter_mut().zip(f) {
        *o += d;
    }
    Ok(InjectionVector::from_slice(&out))
}

/// Orders buses by descending `max(|ΔP|, |ΔQ|)`, ties by ascending id.
pub fn rank_suspects(profile: &[BusPair]) -> Vec<Suspect> {
    let mut out: Vec<Suspect> = profile
        .iter()
        .map(|b| Suspect {
            bus: b.bus,
            score: b.p.abs().max(b.q.abs()),
        })
        .collect();
    out.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.bus.cmp(&b.bus)));
    out
}

/// `(λ_min(H), λ_min(I + αH), classification)` for a symmetric `H = ∇²L(S̄)`.
pub fn assess_convexity(h: &DMatrix<f64>, alpha: f64) -> (f64, f64, Classification) {
    let min_ls = min_eigenvalue(h);
    let shifted = DMatrix::identity(h.nrows(), h.ncols()) + h * alpha;
    let min_prop3 = min_eigenvalue(&shifted);
    let class = if min_ls >= GREEN_THRESHOLD {
        Classification::ConvexGreen
    } else {
        Classification::IndefiniteRed
    };
    (min_ls, min_prop3, class)
}

fn pairs(case: &GridCase, v: &[f64]) -> Vec<BusPair> {
    let n = case.n();
    let mut out: Vec<BusPair> = (0..n)
        .map(|i| BusPair {
            bus: case.external_id(i + 1),
            p: v[i],
            q: v[n + i],
        })
        .collect();
    out.sort_by_key(|b| b.bus);
    out
}

pub fn classify(
    case: &GridCase,
    stationary: &StationaryPoint,
    alpha: f64,
    h_step: f64,
) -> Result<Diagnosis, LocalizeError> {
    if !stationary.converged {
        return Err(LocalizeError::NotConverged);
    }
    let x = &stationary.x_star;
    let s_bar = stationary.residual.s_calc.clone();
    let sens = loss_grad_s(case, x)?;
    let residual_profile = pairs(case, &stationary.residual.f);
    let ranking = rank_suspects(&residual_profile);
    let v_min = bus_voltages(case, x)
        .iter()
        .skip(1)
        .map(|u| u.norm())
        .fold(f64::INFINITY, f64::min);

    let (min_eig_ls, min_eig_prop3, classification, hessian_step, hessian_error) =
        match loss_hess_s_refined(case, &s_bar, x, h_step) {
            Ok((hs, h)) => {
                let (a, b, c) = assess_convexity(&hs.h, alpha);
                (Some(a), Some(b), c, Some(h), None)
            }
            Err(e) => (None, None, Classification::Unknown, None, Some(e.to_string())),
        };

    Ok(Diagnosis {
        alpha,
        s_bar: pairs(case, &s_bar.to_vec()),
        residual_profile,
        mlc_profile: pairs(case, &sens.mlc),
        ranking,
        classification,
        min_eig_ls,
        min_eig_prop3,
        hessian_step,
        hessian_error,
        v_min,
        objective: stationary.objective,
        grad_norm: stationary.grad_norm,
        iterations: stationary.iterations,
    })
}

/// Settings shared by every entry of a sweep. Each entry starts flat.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepOptions {
    pub grad_tol: f64,
    pub max_iter: usize,
    pub h_step: f64,
}

impl Default for SweepOptions {
    fn default() -> Self {
        let r = RegularizerOptions::default();
        SweepOptions {
            grad_tol: r.grad_tol,
            max_iter: r.max_iter,
            h_step: DEFAULT_H_STEP,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepEntry {
    pub alpha: f64,
    pub diagnosis: Option<Diagnosis>,
    pub error: Option<String>,
}

impl SweepEntry {
    /// Classification for converged entries, `not_converged` or `failed`
    /// otherwise.
    pub fn status(&self) -> &'static str {
        match (&self.diagnosis, &self.error) {
            (Some(d), _) => d.classification.as_str(),
            (None, Some(e)) if e.starts_with("not converged") => "not_converged",
            _ => "failed",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepResult {
    pub entries: Vec<SweepEntry>,
    /// Share of the top-2 suspects common to every converged entry.
    pub stability: f64,
}

pub fn minimize_and_classify(
    case: &GridCase,
    s: &InjectionVector,
    alpha: f64,
    opts: &SweepOptions,
) -> Result<Diagnosis, String> {
    let ropts = RegularizerOptions {
        alpha,
        grad_tol: opts.grad_tol,
        max_iter: opts.max_iter,
        ..RegularizerOptions::default()
    };
    let sp = minimize(case, s, &ropts).map_err(|e| match e {
        MinimizeError::NotConverged(nc) => format!(
            "not converged after {} iterations: {}",
            nc.iterations, nc.reason
        ),
        other => other.to_string(),
    })?;
    classify(case, &sp, alpha, opts.h_step).map_err(|e| e.to_string())
}

pub fn alpha_sweep(
    case: &GridCase,
    s: &InjectionVector,
    alphas: &[f64],
    opts: &SweepOptions,
) -> Result<SweepResult, LocalizeError> {
    if alphas.is_empty() {
        return Err(LocalizeError::InvalidAlphas("empty".into()));
    }
    if let Some(a) = alphas.iter().find(|a| !(**a > 0.0 && a.is_finite())) {
        return Err(LocalizeError::InvalidAlphas(format!("{a}")));
    }
    let mut sorted = alphas.to_vec();
    sorted.sort_by(f64::total_cmp);
    if sorted.windows(2).any(|w| w[0] == w[1]) {
        return Err(LocalizeError::InvalidAlphas("duplicate value".into()));
    }

    let entries: Vec<SweepEntry> = sorted
        .par_iter()
        .map(|&alpha| match minimize_and_classify(case, s, alpha, opts) {
            Ok(d) => SweepEntry {
                alpha,
                diagnosis: Some(d),
                error: None,
            },
            Err(e) => SweepEntry {
                alpha,
                diagnosis: None,
                error: Some(e),
            },
        })
        .collect();

    let tops: Vec<Vec<ExternalId>> = entries
        .iter()
        .filter_map(|e| e.diagnosis.as_ref().map(|d| d.top(2)))
        .collect();
    let stability = match tops.split_first() {
        Some((first, rest)) => {
            let common = first
                .iter()
                .filter(|b| rest.iter().all(|t| t.contains(b)))
                .count();
            common as f64 / 2.0
        }
        None => 0.0,
    };
    Ok(SweepResult { entries, stability })
}

/// One row per `(α, bus)`; a failed entry contributes a single row with only
/// `alpha` and `status` filled.
pub fn write_sweep_csv<W: Write>(sweep: &SweepResult, out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "alpha",
        "external_bus_id",
        "delta_p",
        "delta_q",
        "mlc_p",
        "mlc_q",
        "status",
    ])?;
    for e in &sweep.entries {
        let status = e.status();
        match &e.diagnosis {
            Some(d) => {
                for (r, m) in d.residual_profile.iter().zip(&d.mlc_profile) {
                    w.serialize((e.alpha, r.bus, r.p, r.q, m.p, m.q, status))?;
                }
            }
            None => w.write_record([&e.alpha.to_string(), "", "", "", "", "", status])?,
        }
    }
    w.flush()?;
    Ok(())
}
