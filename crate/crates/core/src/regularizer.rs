//! Minimization of the loss-regularized residual objective
//! `Φ_α(x) = ½‖F(x, S)‖² + α·L(x)`.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::Serialize;
use thiserror::Error;

use crate::linalg::norm_inf;
use crate::loadflow::{
    bus_voltages, flat_start, jacobian, mismatch, FlowError, InjectionVector, Mismatch,
    StateVector,
};
use crate::loss::{loss_grad_x, loss_hess_x, loss_value};
use crate::network::GridCase;

/// Armijo sufficient-decrease constant.
pub const ARMIJO_C: f64 = 1e-4;
/// Step reduction factor of the backtracking line search.
pub const BACKTRACK: f64 = 0.5;
/// Maximum number of step reductions per iteration.
pub const MAX_HALVINGS: usize = 30;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MinimizeError {
    #[error("invalid options: {0}")]
    InvalidOptions(String),
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error("no stationary point after {} iterations (gradient norm {:.3e}): {}", .0.iterations, .0.grad_norm, .0.reason)]
    NotConverged(Box<NotConverged>),
    #[error("search direction is not a descent direction at iteration {iteration} (slope {slope:e})")]
    NonDescentDirection { iteration: usize, slope: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct NotConverged {
    pub last: StateVector,
    pub iterations: usize,
    pub grad_norm: f64,
    pub trace: Vec<TraceEntry>,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Start {
    Flat,
    Warm(StateVector),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegularizerOptions {
    pub alpha: f64,
    pub grad_tol: f64,
    pub max_iter: usize,
    pub start: Start,
}

impl RegularizerOptions {
    pub fn with_alpha(alpha: f64) -> Self {
        RegularizerOptions {
            alpha,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<(), MinimizeError> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(MinimizeError::InvalidOptions(format!(
                "alpha must be positive, got {}",
                self.alpha
            )));
        }
        if !(self.grad_tol > 0.0) {
            return Err(MinimizeError::InvalidOptions(format!(
                "grad_tol must be positive, got {}",
                self.grad_tol
            )));
        }
        if self.max_iter == 0 {
            return Err(MinimizeError::InvalidOptions(
                "max_iter must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

impl Default for RegularizerOptions {
    fn default() -> Self {
        RegularizerOptions {
            alpha: 0.1,
            grad_tol: 1e-8,
            max_iter: 200,
            start: Start::Flat,
        }
    }
}

/// One row of the iteration trace: the iterate reached after a step of
/// length `step_length` (zero for the starting point).
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TraceEntry {
    pub iter: usize,
    pub objective: f64,
    pub grad_norm: f64,
    pub step_length: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StationaryPoint {
    pub x_star: StateVector,
    pub objective: f64,
    pub grad_norm: f64,
    pub residual: Mismatch,
    pub iterations: usize,
    pub converged: bool,
    pub trace: Vec<TraceEntry>,
}

pub fn objective(
    case: &GridCase,
    s: &InjectionVector,
    x: &StateVector,
    alpha: f64,
) -> Result<f64, FlowError> {
    let fm = mismatch(case, x, s)?;
    Ok(0.5 * fm.norm_sq() + alpha * loss_value(case, x)?)
}

/// `∇Φ_α = J(x)ᵀ F(x, S) + α ∇_x L(x)`.
pub fn objective_grad(
    case: &GridCase,
    s: &InjectionVector,
    x: &StateVector,
    alpha: f64,
) -> Result<Vec<f64>, FlowError> {
    let fm = mismatch(case, x, s)?;
    let j = jacobian(case, x)?.j;
    let lg = loss_grad_x(case, x)?;
    let jtf = j.tr_mul(&DVector::from_column_slice(&fm.f));
    Ok(jtf.iter().zip(&lg).map(|(a, b)| a + alpha * b).collect())
}

/// Recomputes `∇Φ_α` through complex power derivatives, without forming the
/// Jacobian, and returns its ∞-norm.
pub fn stationarity_recheck(
    case: &GridCase,
    s: &InjectionVector,
    x: &StateVector,
    alpha: f64,
) -> Result<f64, FlowError> {
    let n = case.n();
    let fm = mismatch(case, x, s)?;
    let volt = bus_voltages(case, x);
    let y = &case.admittance().y;
    let nb = volt.len();
    let current: Vec<Complex64> = (0..nb)
        .map(|r| (0..nb).map(|k| y[(r, k)] * volt[k]).sum())
        .collect();
    // ΔS_r as complex numbers, zero at the swing.
    let mut ds = vec![Complex64::new(0.0, 0.0); nb];
    for i in 0..n {
        ds[i + 1] = Complex64::new(fm.f[i], fm.f[n + i]);
    }
    let lg = loss_grad_x(case, x)?;
    let mut grad = vec![0.0; 2 * n];
    for k in 1..nb {
        // d(½Σ|ΔS_r|²) = Re Σ_r conj(ΔS_r) dS_r,
        // dS_r = dU_r conj(I_r) + U_r conj(Σ_k Y_rk dU_k).
        let direct = ds[k].conj() * current[k].conj();
        let coupled: Complex64 = (1..nb)
            .map(|r| ds[r].conj() * volt[r] * y[(r, k)].conj())
            .sum();
        grad[k - 1] = direct.re + coupled.re + alpha * lg[k - 1];
        grad[n + k - 1] = -direct.im + coupled.im + alpha * lg[n + k - 1];
    }
    Ok(norm_inf(&grad))
}

/// Minimizes `Φ_α` by a line-search Newton method with an Armijo backtracking
/// search on exact objective increments.
///
/// The trace records the objective accumulated from the accepted increments,
/// so it is non-increasing by construction.
pub fn minimize(
    case: &GridCase,
    s: &InjectionVector,
    opts: &RegularizerOptions,
) -> Result<StationaryPoint, MinimizeError> {
    opts.validate()?;
    let alpha = opts.alpha;
    let mut x = match &opts.start {
        Start::Flat => flat_start(case),
        Start::Warm(x0) => {
            if x0.len() != case.n() {
                return Err(FlowError::DimensionMismatch {
                    expected: case.n(),
                    found: x0.len(),
                }
                .into());
            }
            x0.clone()
        }
    };
    let loss_h = loss_hess_x(case).h * alpha;
    let mut trace = Vec::new();
    let mut step_length = 0.0;
    let mut phi = objective(case, s, &x, alpha)?;

    for iter in 0..=opts.max_iter {
        let fm = mismatch(case, &x, s)?;
        let j = jacobian(case, &x)?.j;
        let lg = loss_grad_x(case, &x)?;
        let f = DVector::from_column_slice(&fm.f);
        let grad = j.tr_mul(&f) + DVector::from_column_slice(&lg) * alpha;
        let grad_norm = grad.amax();
        trace.push(TraceEntry {
            iter,
            objective: phi,
            grad_norm,
            step_length,
        });

        if grad_norm < opts.grad_tol {
            let objective = 0.5 * fm.norm_sq() + alpha * loss_value(case, &x)?;
            return Ok(StationaryPoint {
                x_star: x,
                objective,
                grad_norm,
                residual: fm,
                iterations: iter,
                converged: true,
                trace,
            });
        }
        let not_converged = |x: StateVector, trace: Vec<TraceEntry>, reason: &str| {
            MinimizeError::NotConverged(Box::new(NotConverged {
                last: x,
                iterations: iter,
                grad_norm,
                trace,
                reason: reason.to_string(),
            }))
        };
        if iter == opts.max_iter {
            return Err(not_converged(x, trace, "iteration limit reached"));
        }

        let curvature = residual_curvature(case, &fm.f);
        let (direction, _kind) = model_direction(&j, &curvature, &loss_h, &grad);
        let slope = grad.dot(&direction);
        if !(slope < 0.0) {
            return Err(MinimizeError::NonDescentDirection {
                iteration: iter,
                slope,
            });
        }

        let base = x.to_vector();
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..=MAX_HALVINGS {
            let delta = t * &direction;
            let change = objective_change(case, &x, &fm.f, &j, &lg, delta.as_slice(), alpha);
            if change <= ARMIJO_C * t * slope {
                accepted = Some((StateVector::from_slice((&base + delta).as_slice()), change));
                break;
            }
            t *= BACKTRACK;
        }
        match accepted {
            Some((trial, change)) => {
                step_length = t * direction.amax();
                x = trial;
                phi += change;
            }
            None => return Err(not_converged(x, trace, "line search found no sufficient decrease")),
        }
    }
    unreachable!("loop returns on its last iteration")
}

/// Exact change `Φ_α(x + δ) − Φ_α(x)`.
///
/// `F` and `L` are quadratic in `x`, so `ΔF = Jδ + S(δ)` and
/// `ΔL = ∇L·δ + L(δ)`, where `S(δ)` and `L(δ)` are the homogeneous quadratic
/// parts evaluated with the swing voltage set to zero. Evaluating the
/// increment this way keeps it accurate when it is far below the rounding
/// level of `Φ` itself.
fn objective_change(
    case: &GridCase,
    x: &StateVector,
    f: &[f64],
    j: &DMatrix<f64>,
    loss_grad: &[f64],
    delta: &[f64],
    alpha: f64,
) -> f64 {
    let n = x.len();
    let y = &case.admittance().y;
    let du: Vec<Complex64> = std::iter::once(Complex64::new(0.0, 0.0))
        .chain((0..n).map(|i| Complex64::new(delta[i], delta[n + i])))
        .collect();
    let jd = j * DVector::from_column_slice(delta);
    let mut residual = 0.0;
    for i in 0..n {
        let r = i + 1;
        let di: Complex64 = (0..=n).map(|k| y[(r, k)] * du[k]).sum();
        let quad = du[r] * di.conj();
        let dp = jd[i] + quad.re;
        let dq = jd[n + i] + quad.im;
        residual += f[i] * dp + 0.5 * dp * dp + f[n + i] * dq + 0.5 * dq * dq;
    }
    let linear: f64 = loss_grad.iter().zip(delta).map(|(g, d)| g * d).sum();
    let quadratic: f64 = case
        .branches()
        .iter()
        .map(|br| (du[br.from] - du[br.to]).norm_sqr() * br.loss_weight())
        .sum();
    residual + alpha * (linear + quadratic)
}

/// Second-order residual term `Σ_i w_i ∇²F_i(x)` for weights `w` in mismatch
/// ordering. Each `F_i` is a quadratic form in `(u, v)`, so this matrix only
/// depends on `x` through the weights.
pub fn residual_curvature(case: &GridCase, w: &[f64]) -> DMatrix<f64> {
    let n = case.n();
    let y = &case.admittance().y;
    // Σ_r (w_P,r P_r + w_Q,r Q_r) = Re(Uᴴ B U) with B_kr = conj(ω_r) conj(Y_rk),
    // ω_r = w_P,r + i w_Q,r. Its Hessian in (u, v) is 2[[Hr, Hiᵀ], [Hi, Hr]]
    // where Hr + i Hi is the Hermitian part of B.
    let omega = |r: usize| Complex64::new(w[r - 1], w[n + r - 1]);
    let b = |k: usize, r: usize| omega(r).conj() * y[(r, k)].conj();
    let mut m = DMatrix::zeros(2 * n, 2 * n);
    for k in 1..=n {
        for r in 1..=n {
            let herm = (b(k, r) + b(r, k).conj()) * 0.5;
            let (i, j) = (k - 1, r - 1);
            m[(i, j)] = 2.0 * herm.re;
            m[(n + i, n + j)] = 2.0 * herm.re;
            m[(n + i, j)] = 2.0 * herm.im;
            m[(j, n + i)] = 2.0 * herm.im;
        }
    }
    m
}

/// Search direction from the exact Hessian when it is positive definite,
/// otherwise from the exact Hessian shifted by `τI` with the smallest `τ` (on a
/// doubling ladder) that makes it positive definite, otherwise from the
/// Gauss-Newton model `JᵀJ + α∇²_x L`, otherwise steepest descent.
fn model_direction(
    j: &DMatrix<f64>,
    curvature: &DMatrix<f64>,
    loss_h: &DMatrix<f64>,
    grad: &DVector<f64>,
) -> (DVector<f64>, Direction) {
    let gauss_newton = j.tr_mul(j) + loss_h;
    let exact = &gauss_newton + curvature;
    if let Some(chol) = exact.clone().cholesky() {
        return (-chol.solve(grad), Direction::Newton);
    }
    let scale = exact.diagonal().amax().max(f64::MIN_POSITIVE);
    let mut tau = 1e-6 * scale;
    while tau <= 1e6 * scale {
        let mut shifted = exact.clone();
        shifted.fill_diagonal(0.0);
        shifted.set_diagonal(&(exact.diagonal().add_scalar(tau)));
        if let Some(chol) = shifted.cholesky() {
            return (-chol.solve(grad), Direction::ShiftedNewton);
        }
        tau *= 2.0;
    }
    match gauss_newton.cholesky() {
        Some(chol) => (-chol.solve(grad), Direction::GaussNewton),
        None => (-grad.clone(), Direction::SteepestDescent),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Direction {
    Newton,
    ShiftedNewton,
    GaussNewton,
    SteepestDescent,
}

/// Writes the iteration trace as `iter,objective,grad_norm,step_length`.
pub fn write_trace_csv<W: Write>(trace: &[TraceEntry], out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for row in trace {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}
