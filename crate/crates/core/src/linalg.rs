//! Dense factorization helpers shared by the solvers.

use nalgebra::{DMatrix, DVector, LU, SymmetricEigen};

/// LU factorization that refuses numerically singular matrices.
pub(crate) struct Factored {
    lu: LU<f64, nalgebra::Dyn, nalgebra::Dyn>,
}

/// Column index of the most degenerate pivot of a singular matrix.
#[derive(Debug, Clone, Copy)]
pub(crate) struct SingularPivot(pub usize);

impl Factored {
    pub(crate) fn new(m: DMatrix<f64>) -> Result<Self, SingularPivot> {
        let dim = m.nrows();
        let lu = m.lu();
        let u = lu.u();
        let scale = u.diagonal().iter().fold(0.0_f64, |acc, d| acc.max(d.abs()));
        let threshold = scale * f64::EPSILON * dim.max(1) as f64;
        let mut worst = None;
        let mut worst_val = f64::INFINITY;
        for k in 0..dim {
            let d = u[(k, k)].abs();
            if !d.is_finite() || d <= threshold {
                if !(d >= worst_val) {
                    worst_val = d;
                    worst = Some(k);
                }
            }
        }
        match worst {
            Some(k) => Err(SingularPivot(k)),
            None => Ok(Factored { lu }),
        }
    }

    pub(crate) fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        self.lu
            .solve(b)
            .expect("factorization was checked for singular pivots")
    }
}

/// Smallest eigenvalue of a symmetric matrix; `+inf` for an empty matrix.
pub(crate) fn min_eigenvalue(sym: &DMatrix<f64>) -> f64 {
    if sym.nrows() == 0 {
        return f64::INFINITY;
    }
    SymmetricEigen::new(sym.clone())
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}

/// 2-norm condition number via singular values.
pub(crate) fn condition_number(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return 1.0;
    }
    let sv = m.clone().singular_values();
    let max = sv.iter().copied().fold(0.0, f64::max);
    let min = sv.iter().copied().fold(f64::INFINITY, f64::min);
    if min == 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

pub(crate) fn norm_inf(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |acc, x| acc.max(x.abs()))
}
