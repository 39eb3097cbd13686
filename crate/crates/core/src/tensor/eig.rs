//! Cyclic Jacobi eigendecomposition for small symmetric matrices.

use super::Tensor;
use crate::error::{arg_err, Error, Result};

pub const JACOBI_MAX_SWEEPS: usize = 100;
/// Convergence when the off-diagonal Frobenius norm falls to this fraction
/// of `||W||_F`.
pub const JACOBI_REL_TOL: f64 = 1e-10;
const MAX_DIM: usize = 64;
const SYMMETRY_TOL: f64 = 1e-6;

/// Eigenpairs of a symmetric matrix, eigenvalues non-increasing.
#[derive(Clone, Debug)]
pub struct EigenSystem {
    pub eigenvalues: Vec<f64>,
    /// `m x m`, column `i` pairs with `eigenvalues[i]`.
    pub eigenvectors: Tensor<f64>,
    pub sweeps: usize,
}

impl EigenSystem {
    pub fn matrix_dim(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn vector(&self, i: usize) -> Vec<f64> {
        let m = self.matrix_dim();
        (0..m).map(|r| self.eigenvectors.data()[r * m + i]).collect()
    }
}

/// Eigendecomposition of a symmetric `m x m` matrix (`m <= 64`).
///
/// Ties keep their original diagonal order. Each eigenvector is signed so
/// that its largest-magnitude component is positive.
pub fn sym_eig(w: &Tensor<f64>) -> Result<EigenSystem> {
    sym_eig_with(w, JACOBI_MAX_SWEEPS, JACOBI_REL_TOL)
}

pub(crate) fn sym_eig_with(w: &Tensor<f64>, max_sweeps: usize, rel_tol: f64) -> Result<EigenSystem> {
    if w.rank() != 2 || w.dim(0) != w.dim(1) {
        return Err(arg_err(format!(
            "eigendecomposition needs a square matrix, got {:?}",
            w.shape()
        )));
    }
    let m = w.dim(0);
    if m > MAX_DIM {
        return Err(arg_err(format!("matrix dimension {m} exceeds {MAX_DIM}")));
    }
    let src = w.data();
    for r in 0..m {
        for c in r + 1..m {
            let gap = (src[r * m + c] - src[c * m + r]).abs();
            if gap > SYMMETRY_TOL || gap.is_nan() {
                return Err(Error::Asymmetric { row: r, col: c, gap });
            }
        }
    }

    let mut a: Vec<f64> = (0..m * m)
        .map(|idx| {
            let (r, c) = (idx / m, idx % m);
            0.5 * (src[r * m + c] + src[c * m + r])
        })
        .collect();
    let mut v = Tensor::<f64>::eye(m).into_data();
    let norm = a.iter().map(|x| x * x).sum::<f64>().sqrt();

    let mut sweeps = 0;
    loop {
        let off = off_diagonal_norm(&a, m);
        if off <= rel_tol * norm {
            break;
        }
        if sweeps == max_sweeps {
            return Err(Error::NonConvergence {
                sweeps,
                off_norm: off,
            });
        }
        for p in 0..m {
            for q in p + 1..m {
                rotate(&mut a, &mut v, m, p, q);
            }
        }
        sweeps += 1;
    }

    let mut order: Vec<usize> = (0..m).collect();
    // stable: equal eigenvalues keep diagonal order
    order.sort_by(|&i, &j| a[j * m + j].partial_cmp(&a[i * m + i]).unwrap());
    let eigenvalues = order.iter().map(|&i| a[i * m + i]).collect();
    let mut vectors = vec![0.0; m * m];
    for (col, &src_col) in order.iter().enumerate() {
        let mut lead = 0;
        for r in 0..m {
            if v[r * m + src_col].abs() > v[lead * m + src_col].abs() {
                lead = r;
            }
        }
        let sign = if v[lead * m + src_col] < 0.0 { -1.0 } else { 1.0 };
        for r in 0..m {
            vectors[r * m + col] = sign * v[r * m + src_col];
        }
    }
    Ok(EigenSystem {
        eigenvalues,
        eigenvectors: Tensor::new(&[m, m], vectors)?,
        sweeps,
    })
}

fn off_diagonal_norm(a: &[f64], m: usize) -> f64 {
    let mut s = 0.0;
    for r in 0..m {
        for c in 0..m {
            if r != c {
                s += a[r * m + c] * a[r * m + c];
            }
        }
    }
    s.sqrt()
}

/// Annihilate `a[p][q]` with one plane rotation, `A <- J^T A J`, `V <- V J`.
fn rotate(a: &mut [f64], v: &mut [f64], m: usize, p: usize, q: usize) {
    let apq = a[p * m + q];
    if apq == 0.0 {
        return;
    }
    let app = a[p * m + p];
    let aqq = a[q * m + q];
    let tau = (aqq - app) / (2.0 * apq);
    let t = if tau.abs() > 1e150 {
        0.5 / tau
    } else {
        let sign = if tau >= 0.0 { 1.0 } else { -1.0 };
        sign / (tau.abs() + (1.0 + tau * tau).sqrt())
    };
    let c = 1.0 / (1.0 + t * t).sqrt();
    let s = t * c;

    for k in 0..m {
        let akp = a[k * m + p];
        let akq = a[k * m + q];
        a[k * m + p] = c * akp - s * akq;
        a[k * m + q] = s * akp + c * akq;
    }
    for k in 0..m {
        let apk = a[p * m + k];
        let aqk = a[q * m + k];
        a[p * m + k] = c * apk - s * aqk;
        a[q * m + k] = s * apk + c * aqk;
    }
    a[p * m + q] = 0.0;
    a[q * m + p] = 0.0;
    for k in 0..m {
        let vkp = v[k * m + p];
        let vkq = v[k * m + q];
        v[k * m + p] = c * vkp - s * vkq;
        v[k * m + q] = s * vkp + c * vkq;
    }
}
