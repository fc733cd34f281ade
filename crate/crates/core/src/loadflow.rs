//! Power-mismatch load-flow equations in rectangular coordinates and a
//! safeguarded Newton solver.
//!
//! State ordering is `(u_1..u_n, v_1..v_n)` and mismatch ordering is
//! `(ΔP_1..ΔP_n, ΔQ_1..ΔQ_n)`, where index `i` refers to internal bus `i + 1`.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::Serialize;
use thiserror::Error;

use crate::linalg::{condition_number, norm_inf, Factored};
use crate::network::{ExternalId, GridCase};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FlowError {
    #[error("dimension mismatch: case has {expected} PQ buses, vector has {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("singular Jacobian (degenerate pivot on the {component} coordinate of bus {bus})")]
    SingularJacobian {
        bus: ExternalId,
        component: Component,
    },
    #[error("load flow did not converge after {} iterations (residual {:.3e})", .0.iterations, .0.residual_history.last().copied().unwrap_or(f64::NAN))]
    NoConvergence(Box<NoConvergence>),
}

/// Which half of a `(u, v)` or `(P, Q)` ordered vector an index falls in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Component {
    U,
    V,
    P,
    Q,
}

impl std::fmt::Display for Component {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Component::U => "u",
            Component::V => "v",
            Component::P => "P",
            Component::Q => "Q",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoConvergence {
    pub last: StateVector,
    pub iterations: usize,
    /// ∞-norm of the mismatch at every visited iterate.
    pub residual_history: Vec<f64>,
}

/// Rectangular voltages `U = u + iv` of the non-swing buses.
#[derive(Debug, Clone, PartialEq)]
pub struct StateVector {
    pub u: Vec<f64>,
    pub v: Vec<f64>,
}

impl StateVector {
    pub fn new(u: Vec<f64>, v: Vec<f64>) -> Self {
        assert_eq!(u.len(), v.len(), "u and v must have equal length");
        StateVector { u, v }
    }

    pub fn len(&self) -> usize {
        self.u.len()
    }

    pub fn is_empty(&self) -> bool {
        self.u.is_empty()
    }

    pub fn to_vector(&self) -> DVector<f64> {
        DVector::from_iterator(2 * self.len(), self.u.iter().chain(&self.v).copied())
    }

    pub fn from_slice(x: &[f64]) -> Self {
        let n = x.len() / 2;
        StateVector {
            u: x[..n].to_vec(),
            v: x[n..].to_vec(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.u.iter().chain(&self.v).all(|x| x.is_finite())
    }
}

/// Net nodal injections of the non-swing buses, generation positive.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InjectionVector {
    pub p: Vec<f64>,
    pub q: Vec<f64>,
}

impl InjectionVector {
    pub fn new(p: Vec<f64>, q: Vec<f64>) -> Self {
        assert_eq!(p.len(), q.len(), "p and q must have equal length");
        InjectionVector { p, q }
    }

    pub fn zeros(n: usize) -> Self {
        InjectionVector {
            p: vec![0.0; n],
            q: vec![0.0; n],
        }
    }

    /// The injections specified in the case document.
    pub fn from_case(case: &GridCase) -> Self {
        let (p, q) = case.injections();
        InjectionVector { p, q }
    }

    pub fn len(&self) -> usize {
        self.p.len()
    }

    pub fn is_empty(&self) -> bool {
        self.p.is_empty()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.p.iter().chain(&self.q).copied().collect()
    }

    pub fn from_slice(s: &[f64]) -> Self {
        let n = s.len() / 2;
        InjectionVector {
            p: s[..n].to_vec(),
            q: s[n..].to_vec(),
        }
    }

    pub fn scaled(&self, factor: f64) -> Self {
        InjectionVector {
            p: self.p.iter().map(|x| x * factor).collect(),
            q: self.q.iter().map(|x| x * factor).collect(),
        }
    }

    /// Copy with `delta` added to the component at ordered index `k`.
    pub fn perturbed(&self, k: usize, delta: f64) -> Self {
        let mut out = self.clone();
        let n = self.len();
        if k < n {
            out.p[k] += delta;
        } else {
            out.q[k - n] += delta;
        }
        out
    }
}

/// Load-flow residual `F(x, S) = s_calc(x) − S`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mismatch {
    pub f: Vec<f64>,
    pub s_calc: InjectionVector,
}

impl Mismatch {
    pub fn norm_inf(&self) -> f64 {
        norm_inf(&self.f)
    }

    pub fn norm_sq(&self) -> f64 {
        self.f.iter().map(|x| x * x).sum()
    }
}

/// `∂F/∂x`: rows follow the mismatch ordering, columns the state ordering.
#[derive(Debug, Clone, PartialEq)]
pub struct JacobianMatrix {
    pub j: DMatrix<f64>,
}

impl JacobianMatrix {
    /// 2-norm condition number; infinite when singular.
    pub fn condition_number(&self) -> f64 {
        condition_number(&self.j)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NewtonOptions {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for NewtonOptions {
    fn default() -> Self {
        NewtonOptions {
            tol: 1e-8,
            max_iter: 20,
        }
    }
}

/// Maximum step halvings when a Newton step increases the residual.
pub const MAX_BACKSTEPS: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct FlowSolution {
    pub x: StateVector,
    pub iterations: usize,
    pub residual_norm: f64,
    pub residual_history: Vec<f64>,
}

fn check_len(case: &GridCase, found: usize) -> Result<(), FlowError> {
    if found != case.n() {
        Err(FlowError::DimensionMismatch {
            expected: case.n(),
            found,
        })
    } else {
        Ok(())
    }
}

/// Complex voltages of all buses, swing first.
pub fn bus_voltages(case: &GridCase, x: &StateVector) -> Vec<Complex64> {
    std::iter::once(case.v_swing())
        .chain(x.u.iter().zip(&x.v).map(|(&u, &v)| Complex64::new(u, v)))
        .collect()
}

fn bus_currents(case: &GridCase, voltages: &[Complex64]) -> Vec<Complex64> {
    let y = &case.admittance().y;
    (0..voltages.len())
        .map(|r| (0..voltages.len()).map(|k| y[(r, k)] * voltages[k]).sum())
        .collect()
}

/// Complex power injected at the swing bus for state `x`.
pub fn swing_injection(case: &GridCase, x: &StateVector) -> Result<Complex64, FlowError> {
    check_len(case, x.len())?;
    let volt = bus_voltages(case, x);
    let y = &case.admittance().y;
    let i0: Complex64 = (0..volt.len()).map(|k| y[(0, k)] * volt[k]).sum();
    Ok(volt[0] * i0.conj())
}

pub fn mismatch(case: &GridCase, x: &StateVector, s: &InjectionVector) -> Result<Mismatch, FlowError> {
    check_len(case, x.len())?;
    check_len(case, s.len())?;
    let n = case.n();
    let volt = bus_voltages(case, x);
    let cur = bus_currents(case, &volt);
    let mut p = Vec::with_capacity(n);
    let mut q = Vec::with_capacity(n);
    for r in 1..=n {
        let sr = volt[r] * cur[r].conj();
        p.push(sr.re);
        q.push(sr.im);
    }
    let f = p
        .iter()
        .zip(&s.p)
        .chain(q.iter().zip(&s.q))
        .map(|(calc, spec)| calc - spec)
        .collect();
    Ok(Mismatch {
        f,
        s_calc: InjectionVector { p, q },
    })
}

pub fn jacobian(case: &GridCase, x: &StateVector) -> Result<JacobianMatrix, FlowError> {
    check_len(case, x.len())?;
    let n = case.n();
    let volt = bus_voltages(case, x);
    let cur = bus_currents(case, &volt);
    let y = &case.admittance().y;
    let mut j = DMatrix::zeros(2 * n, 2 * n);
    for i in 0..n {
        let r = i + 1;
        let (ur, vr) = (volt[r].re, volt[r].im);
        let (a, b) = (cur[r].re, cur[r].im);
        for kk in 0..n {
            let k = kk + 1;
            let (g, bb) = (y[(r, k)].re, y[(r, k)].im);
            j[(i, kk)] = ur * g + vr * bb;
            j[(i, n + kk)] = vr * g - ur * bb;
            j[(n + i, kk)] = vr * g - ur * bb;
            j[(n + i, n + kk)] = -vr * bb - ur * g;
        }
        j[(i, i)] += a;
        j[(i, n + i)] += b;
        j[(n + i, i)] -= b;
        j[(n + i, n + i)] += a;
    }
    Ok(JacobianMatrix { j })
}

pub(crate) fn singular_error(case: &GridCase, column: usize) -> FlowError {
    let n = case.n();
    FlowError::SingularJacobian {
        bus: case.external_id_of_coordinate(column),
        component: if column < n { Component::U } else { Component::V },
    }
}

pub(crate) fn factor_jacobian(case: &GridCase, j: DMatrix<f64>) -> Result<Factored, FlowError> {
    Factored::new(j).map_err(|p| singular_error(case, p.0))
}

/// Flat start: every PQ bus at the swing voltage magnitude with zero angle.
pub fn flat_start(case: &GridCase) -> StateVector {
    let n = case.n();
    StateVector {
        u: vec![case.v_swing().norm(); n],
        v: vec![0.0; n],
    }
}

/// Solves `F(x, S) = 0` by Newton's method with residual-based step halving.
pub fn newton_solve(
    case: &GridCase,
    s: &InjectionVector,
    x0: &StateVector,
    opts: &NewtonOptions,
) -> Result<FlowSolution, FlowError> {
    assert!(opts.tol > 0.0, "tolerance must be positive");
    assert!(opts.max_iter >= 1, "max_iter must be at least 1");
    check_len(case, s.len())?;
    let mut x = x0.clone();
    let mut fm = mismatch(case, &x, s)?;
    let mut norm = fm.norm_inf();
    let mut history = vec![norm];
    let mut iterations = 0;

    loop {
        if norm < opts.tol {
            return Ok(FlowSolution {
                x,
                iterations,
                residual_norm: norm,
                residual_history: history,
            });
        }
        if iterations >= opts.max_iter || !norm.is_finite() {
            return Err(FlowError::NoConvergence(Box::new(NoConvergence {
                last: x,
                iterations,
                residual_history: history,
            })));
        }
        let jac = jacobian(case, &x)?;
        let lu = factor_jacobian(case, jac.j)?;
        let step = lu.solve(&DVector::from_column_slice(&fm.f));
        let base = x.to_vector();

        let mut t = 1.0;
        let mut trial;
        let mut trial_fm;
        let mut backsteps = 0;
        loop {
            trial = StateVector::from_slice((&base - t * &step).as_slice());
            trial_fm = mismatch(case, &trial, s)?;
            let trial_norm = trial_fm.norm_inf();
            if trial_norm <= norm || backsteps == MAX_BACKSTEPS {
                break;
            }
            t *= 0.5;
            backsteps += 1;
        }
        x = trial;
        fm = trial_fm;
        norm = fm.norm_inf();
        history.push(norm);
        iterations += 1;
    }
}
