//! Load-flow solvability diagnostics.
//!
//! Solves AC load flow in rectangular coordinates and, when a case has no
//! solution, minimizes the squared load-flow residual regularized by series
//! active losses. The residual at the resulting stationary point is
//! proportional to the marginal loss coefficients, which concentrate around
//! the buses responsible for the failure.

mod linalg;

pub mod loadflow;
pub mod localizer;
pub mod loss;
pub mod network;
pub mod regularizer;

pub use loadflow::{
    flat_start, jacobian, mismatch, newton_solve, FlowError, FlowSolution, InjectionVector,
    JacobianMatrix, Mismatch, NewtonOptions, StateVector,
};
pub use loss::{loss_grad_s, loss_grad_x, loss_hess_s, loss_hess_x, loss_value, LossSensitivities};
pub use network::{build_admittance, import_matpower, parse_case, CaseError, GridCase};
pub use regularizer::{minimize, objective, objective_grad, RegularizerOptions, StationaryPoint};
