use nalgebra::{DMatrix, DVector};

use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

/// Default bound on `‖A² − I‖∞` accepted as an involution.
pub const DEFAULT_INVOLUTION_EPS: f64 = 1e-6;

/// `A = Q·diag(d)·Q⁻¹` with the `+1` eigenvectors first.
#[derive(Debug, Clone)]
pub struct IsotypicalDecomposition {
    pub q: Tensor<f64>,
    pub q_inv: Tensor<f64>,
    pub d: Vec<f64>,
    pub k_plus: usize,
    pub k_minus: usize,
}

impl IsotypicalDecomposition {
    /// `Q·D·Q⁻¹`.
    pub fn reconstruct(&self) -> Tensor<f64> {
        let q = to_matrix(&self.q);
        let qi = to_matrix(&self.q_inv);
        let d = DMatrix::from_diagonal(&DVector::from_column_slice(&self.d));
        from_matrix(&(q * d * qi))
    }
}

fn to_matrix(t: &Tensor<f64>) -> DMatrix<f64> {
    DMatrix::from_row_slice(t.shape()[0], t.shape()[1], t.data())
}

fn from_matrix(m: &DMatrix<f64>) -> Tensor<f64> {
    let data = m.transpose().as_slice().to_vec();
    Tensor::new([m.nrows(), m.ncols()], data).expect("non-empty matrix")
}

fn max_column_norm(p: &DMatrix<f64>) -> f64 {
    p.column_iter().map(|c| c.norm()).fold(0.0, f64::max)
}

/// Orthonormal basis of the column space of `p`, taking the column with the
/// largest remaining norm at every step and stopping once every remainder
/// falls below `tol·scale`.
fn pivoted_basis(p: &DMatrix<f64>, tol: f64, scale: f64) -> Vec<DVector<f64>> {
    let mut residual: Vec<DVector<f64>> = p.column_iter().map(|c| c.into_owned()).collect();
    let mut basis: Vec<DVector<f64>> = Vec::new();
    if scale == 0.0 {
        return basis;
    }
    loop {
        let (best, norm) = residual
            .iter()
            .enumerate()
            .map(|(i, c)| (i, c.norm()))
            .fold((0, 0.0), |acc, x| if x.1 > acc.1 { x } else { acc });
        if norm <= tol * scale || basis.len() == p.nrows() {
            break;
        }
        let mut v = residual[best].clone();
        // Second pass restores orthogonality lost to cancellation.
        for b in &basis {
            let c = b.dot(&v);
            v -= b * c;
        }
        let n = v.norm();
        if n <= tol * scale {
            residual[best].fill(0.0);
            continue;
        }
        v /= n;
        for r in residual.iter_mut() {
            let c = v.dot(r);
            *r -= &v * c;
        }
        basis.push(v);
    }
    basis
}

/// Splits an involution into its `+1` and `−1` eigenspaces via the projectors
/// `(I ± A)/2`.
pub fn isotypical_decompose(a: &Tensor<f64>, eps: f64) -> Result<IsotypicalDecomposition> {
    if a.rank() != 2 || a.shape()[0] != a.shape()[1] {
        return Err(shape_err!(
            "isotypical_decompose needs a square matrix, got {:?}",
            a.shape()
        ));
    }
    let n = a.shape()[0];
    let am = to_matrix(a);
    let id = DMatrix::<f64>::identity(n, n);
    let defect = (&am * &am - &id).abs().max();
    if !(defect <= eps) {
        return Err(Error::Precondition {
            what: "matrix is not an involution (‖A²−I‖∞)".into(),
            measured: defect,
            allowed: eps,
        });
    }
    let p_plus = (&id + &am) * 0.5;
    let p_minus = (&id - &am) * 0.5;
    const RANK_TOL: f64 = 1e-9;
    // Shared scale: an empty eigenspace leaves a projector of pure rounding
    // noise, which must not be judged against itself.
    let scale = max_column_norm(&p_plus).max(max_column_norm(&p_minus));
    let b_plus = pivoted_basis(&p_plus, RANK_TOL, scale);
    let b_minus = pivoted_basis(&p_minus, RANK_TOL, scale);
    let (k_plus, k_minus) = (b_plus.len(), b_minus.len());
    if k_plus + k_minus != n {
        return Err(Error::Precondition {
            what: format!("eigenspace dimensions {k_plus}+{k_minus} do not span {n}"),
            measured: (k_plus + k_minus) as f64,
            allowed: n as f64,
        });
    }
    let cols: Vec<DVector<f64>> = b_plus.into_iter().chain(b_minus).collect();
    let q = DMatrix::from_columns(&cols);
    let q_inv = q
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::NonFinite("inverting the eigenbasis".into()))?;
    let d = std::iter::repeat_n(1.0, k_plus)
        .chain(std::iter::repeat_n(-1.0, k_minus))
        .collect();
    Ok(IsotypicalDecomposition {
        q: from_matrix(&q),
        q_inv: from_matrix(&q_inv),
        d,
        k_plus,
        k_minus,
    })
}
