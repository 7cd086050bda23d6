//! Dense helpers shared by the alignment and fusion stages.
//!
//! Activations and weights live in row-major `ndarray` matrices; the SVD and
//! symmetric solves go through `nalgebra`.

use nalgebra::DMatrix;
use ndarray::{Array1, Array2, ArrayView2, Axis};

use crate::error::{Error, Result};

pub type Matrix = Array2<f64>;
pub type Vector = Array1<f64>;

pub fn to_nalgebra(m: ArrayView2<'_, f64>) -> DMatrix<f64> {
    let (r, c) = m.dim();
    DMatrix::from_fn(r, c, |i, j| m[[i, j]])
}

pub fn from_nalgebra(m: &DMatrix<f64>) -> Matrix {
    Array2::from_shape_fn((m.nrows(), m.ncols()), |(i, j)| m[(i, j)])
}

/// Subtracts the column means.
pub fn center_columns(m: ArrayView2<'_, f64>) -> Matrix {
    let mut out = m.to_owned();
    if out.nrows() == 0 {
        return out;
    }
    let mean = out.mean_axis(Axis(0)).expect("nonempty rows");
    out -= &mean;
    out
}

pub fn frobenius(m: ArrayView2<'_, f64>) -> f64 {
    m.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn max_abs_diff(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>) -> f64 {
    assert_eq!(a.dim(), b.dim(), "max_abs_diff shape");
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Thin SVD `m = U Σ Vᵀ` with each left singular vector's first nonzero
/// component made positive (the matching right vector flips with it).
pub struct ThinSvd {
    pub u: Matrix,
    pub singular_values: Vector,
    pub v_t: Matrix,
}

pub fn thin_svd(m: ArrayView2<'_, f64>) -> Result<ThinSvd> {
    let (r, c) = m.dim();
    if r == 0 || c == 0 {
        return Err(Error::dims("svd of an empty matrix"));
    }
    let svd = nalgebra::linalg::SVD::try_new(to_nalgebra(m), true, true, f64::EPSILON, 0)
        .ok_or_else(|| Error::Numerical("svd did not converge".into()))?;
    let u = svd.u.as_ref().expect("requested u");
    let v_t = svd.v_t.as_ref().expect("requested v_t");
    let mut u = from_nalgebra(u);
    let mut v_t = from_nalgebra(v_t);
    let k = u.ncols();
    for col in 0..k {
        let first = u.column(col).iter().copied().find(|x| x.abs() > 1e-12);
        if matches!(first, Some(x) if x < 0.0) {
            u.column_mut(col).mapv_inplace(|x| -x);
            v_t.row_mut(col).mapv_inplace(|x| -x);
        }
    }
    Ok(ThinSvd {
        u,
        singular_values: Array1::from_iter(svd.singular_values.iter().copied()),
        v_t,
    })
}

fn cholesky(a: &Matrix) -> Result<nalgebra::linalg::Cholesky<f64, nalgebra::Dyn>> {
    let singular = || Error::Numerical("normal matrix is singular; use lambda > 0".into());
    let chol = nalgebra::linalg::Cholesky::new(to_nalgebra(a.view())).ok_or_else(singular)?;
    // Rounding can leave a tiny positive pivot on an exactly singular matrix.
    let scale = a.diag().iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let l = chol.l_dirty();
    if (0..a.nrows()).any(|i| l[(i, i)] * l[(i, i)] <= 1e-13 * scale) {
        return Err(singular());
    }
    Ok(chol)
}

/// Solves `a x = b` for symmetric positive-definite `a` via Cholesky.
pub fn solve_spd(a: &Matrix, b: &Vector) -> Result<Vector> {
    let n = a.nrows();
    let chol = cholesky(a)?;
    let rhs = nalgebra::DVector::from_iterator(n, b.iter().copied());
    let x = chol.solve(&rhs);
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("non-finite solution of normal equations".into()));
    }
    Ok(Array1::from_iter(x.iter().copied()))
}

/// Ridge least squares with a matrix right-hand side: `(XᵀX + λI)⁻¹ XᵀY`.
pub fn ridge_solve(x: &Matrix, y: &Matrix, lambda: f64) -> Result<Matrix> {
    let mut gram = x.t().dot(x);
    gram.diag_mut().mapv_inplace(|d| d + lambda);
    let chol = cholesky(&gram)?;
    let sol = chol.solve(&to_nalgebra(x.t().dot(y).view()));
    Ok(from_nalgebra(&sol))
}

/// Rectangular identity: ones on the main diagonal.
pub fn eye_rect(rows: usize, cols: usize) -> Matrix {
    Array2::from_shape_fn((rows, cols), |(i, j)| if i == j { 1.0 } else { 0.0 })
}

/// Index of the largest entry; the first one wins ties.
pub fn argmax(row: ndarray::ArrayView1<'_, f64>) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = i;
        }
    }
    best
}

/// Rounds every entry through `f32`, the on-disk precision.
pub fn round_f32(m: &mut Matrix) {
    m.mapv_inplace(|x| x as f32 as f64);
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn svd_reconstructs_and_signs_are_fixed() {
        let m = array![[3.0, 1.0], [-1.0, 2.0], [0.5, -4.0]];
        let svd = thin_svd(m.view()).unwrap();
        let sigma = Array2::from_diag(&svd.singular_values);
        let back = svd.u.dot(&sigma).dot(&svd.v_t);
        assert!(max_abs_diff(back.view(), m.view()) < 1e-12);
        for col in svd.u.columns() {
            let first = col.iter().find(|x| x.abs() > 1e-12).unwrap();
            assert!(*first > 0.0);
        }
    }

    #[test]
    fn singular_normal_matrix_is_numerical_error() {
        let a = array![[1.0, 1.0], [1.0, 1.0]];
        let err = solve_spd(&a, &array![1.0, 1.0]).unwrap_err();
        assert_eq!(err.exit_code(), 3);
    }

    #[test]
    fn centering_zeroes_means() {
        let m = array![[1.0, 10.0], [3.0, 20.0]];
        let c = center_columns(m.view());
        assert_eq!(c, array![[-1.0, -5.0], [1.0, 5.0]]);
    }
}
