//! Observed information at an optimum and the intervals derived from it.

use nalgebra::{DMatrix, SymmetricEigen};

use super::mle::Objective;
use crate::error::Result;

/// Eigenvalue floor applied before any inverse root is taken.
pub const EIGEN_FLOOR: f64 = 1e-8;
/// Relative finite-difference step on the gradient.
pub const HESSIAN_REL_STEP: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct FisherInfo {
    /// Dims of the objective the matrix refers to.
    pub dims: Vec<usize>,
    /// Symmetrized `-Hessian` over `dims`.
    pub matrix: DMatrix<f64>,
    pub eigenvalues: Vec<f64>,
    /// Columns are eigenvectors.
    pub eigenvectors: DMatrix<f64>,
    /// A raw eigenvalue fell below `-EIGEN_FLOOR`.
    pub indefinite: bool,
}

impl FisherInfo {
    pub fn from_matrix(dims: Vec<usize>, m: DMatrix<f64>) -> Self {
        let sym = (&m + m.transpose()) * 0.5;
        let eig = SymmetricEigen::new(sym.clone());
        let indefinite = eig.eigenvalues.iter().any(|&l| l < -EIGEN_FLOOR);
        FisherInfo {
            dims,
            matrix: sym,
            eigenvalues: eig.eigenvalues.iter().copied().collect(),
            eigenvectors: eig.eigenvectors,
            indefinite,
        }
    }

    /// `U diag(max(l, floor)^p) U^T`.
    pub fn clamped_power(&self, p: f64) -> DMatrix<f64> {
        let u = &self.eigenvectors;
        let d = DMatrix::from_diagonal(&nalgebra::DVector::from_iterator(
            self.eigenvalues.len(),
            self.eigenvalues.iter().map(|l| l.max(EIGEN_FLOOR).powf(p)),
        ));
        u * d * u.transpose()
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        (0..self.matrix.nrows())
            .map(|r| self.matrix.row(r).iter().copied().collect())
            .collect()
    }
}

/// `-d2L/du2` over the objective's active dims by differencing the analytic gradient. Central
/// where the box allows, one-sided against a bound.
pub fn fisher_information<O: Objective + ?Sized>(obj: &O, u: &[f64]) -> Result<FisherInfo> {
    let dims = obj.active();
    let bounds = obj.bounds();
    let k = dims.len();
    let mut m = DMatrix::<f64>::zeros(k, k);
    let mut g0 = None;
    for (c, &i) in dims.iter().enumerate() {
        let h = HESSIAN_REL_STEP * u[i].abs().max(1.0);
        let (lo, hi) = bounds[i];
        let up = (u[i] + h).min(hi);
        let dn = (u[i] - h).max(lo);
        let grad_at = |x: f64| -> Result<Vec<f64>> {
            let mut z = u.to_vec();
            z[i] = x;
            Ok(obj.gradient(&z)?.1)
        };
        let (gp, gm, width) = if up > u[i] && dn < u[i] {
            (grad_at(up)?, grad_at(dn)?, up - dn)
        } else {
            if g0.is_none() {
                g0 = Some(obj.gradient(u)?.1);
            }
            let base = g0.clone().expect("set above");
            if up > u[i] {
                (grad_at(up)?, base, up - u[i])
            } else {
                (base, grad_at(dn)?, u[i] - dn)
            }
        };
        for (r, &j) in dims.iter().enumerate() {
            m[(r, c)] = -(gp[j] - gm[j]) / width;
        }
    }
    Ok(FisherInfo::from_matrix(dims, m))
}

/// 95% half-widths `2 (I^-1/2)_ii`, one per dim of `info`.
pub fn confidence_intervals(info: &FisherInfo) -> Vec<f64> {
    let r = info.clamped_power(-0.5);
    (0..r.nrows()).map(|i| 2.0 * r[(i, i)]).collect()
}
