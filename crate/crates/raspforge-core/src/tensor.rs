//! Flat row-major matrices and the handful of kernels the model needs.
//!
//! Everything is generic over the scalar so the trainer runs in f32 while
//! the finite-difference gradient oracle runs the identical code in f64.
//! Parallel kernels split over output rows only; each element is produced
//! by one thread with a fixed-order inner reduction, so results are
//! bitwise identical regardless of thread count.

use num_traits::Float;
use rayon::prelude::*;
use std::fmt::Debug;

/// Scalar for model arithmetic.
pub trait Scalar:
    Float + num_traits::FromPrimitive + num_traits::ToPrimitive + std::iter::Sum + Send + Sync + Debug + 'static
{
    fn cast(x: f64) -> Self {
        num_traits::FromPrimitive::from_f64(x).expect("finite f64 converts")
    }
    fn as_f64(self) -> f64 {
        num_traits::ToPrimitive::to_f64(&self).expect("scalar converts to f64")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Dense row-major matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Mat<F> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<F>,
}

/// Row count below which the parallel kernels stay sequential.
const PAR_MIN_ROWS: usize = 32;

impl<F: Scalar> Mat<F> {
    pub fn zeros(rows: usize, cols: usize) -> Mat<F> {
        Mat {
            rows,
            cols,
            data: vec![F::zero(); rows * cols],
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> F) -> Mat<F> {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Mat { rows, cols, data }
    }

    pub fn row(&self, r: usize) -> &[F] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [F] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn fill_zero(&mut self) {
        self.data.fill(F::zero());
    }

    /// `self @ b` with `b: [k, n]`.
    pub fn matmul_nn(&self, b: &Mat<F>) -> Mat<F> {
        assert_eq!(self.cols, b.rows, "matmul_nn shape mismatch");
        let mut out = Mat::zeros(self.rows, b.cols);
        let cols = b.cols;
        let run_row = |r: usize, out_row: &mut [F]| {
            let a_row = self.row(r);
            for (k, &a) in a_row.iter().enumerate() {
                if a != F::zero() {
                    let b_row = &b.data[k * cols..(k + 1) * cols];
                    for (o, &bv) in out_row.iter_mut().zip(b_row) {
                        *o = *o + a * bv;
                    }
                }
            }
        };
        if self.rows >= PAR_MIN_ROWS {
            out.data
                .par_chunks_mut(cols)
                .enumerate()
                .for_each(|(r, out_row)| run_row(r, out_row));
        } else {
            for r in 0..self.rows {
                let row = &mut out.data[r * cols..(r + 1) * cols];
                run_row(r, row);
            }
        }
        out
    }

    /// `self @ b^T` with `b: [n, k]` sharing the inner dimension `k`.
    pub fn matmul_nt(&self, b: &Mat<F>) -> Mat<F> {
        assert_eq!(self.cols, b.cols, "matmul_nt shape mismatch");
        let mut out = Mat::zeros(self.rows, b.rows);
        let run_row = |r: usize, out_row: &mut [F]| {
            let a_row = self.row(r);
            for (c, o) in out_row.iter_mut().enumerate() {
                *o = dot(a_row, b.row(c));
            }
        };
        if self.rows >= PAR_MIN_ROWS {
            out.data
                .par_chunks_mut(b.rows)
                .enumerate()
                .for_each(|(r, out_row)| run_row(r, out_row));
        } else {
            for r in 0..self.rows {
                let row = &mut out.data[r * b.rows..(r + 1) * b.rows];
                run_row(r, row);
            }
        }
        out
    }

    /// `self^T @ b` with both operands `[r, _]` sharing the row count.
    pub fn matmul_tn(&self, b: &Mat<F>) -> Mat<F> {
        assert_eq!(self.rows, b.rows, "matmul_tn shape mismatch");
        let mut out = Mat::zeros(self.cols, b.cols);
        let cols = b.cols;
        let a_cols = self.cols;
        let run_row = |k: usize, out_row: &mut [F]| {
            for r in 0..self.rows {
                let a = self.data[r * a_cols + k];
                if a != F::zero() {
                    let b_row = &b.data[r * cols..(r + 1) * cols];
                    for (o, &bv) in out_row.iter_mut().zip(b_row) {
                        *o = *o + a * bv;
                    }
                }
            }
        };
        if self.cols >= PAR_MIN_ROWS {
            out.data
                .par_chunks_mut(cols)
                .enumerate()
                .for_each(|(k, out_row)| run_row(k, out_row));
        } else {
            for k in 0..self.cols {
                let row = &mut out.data[k * cols..(k + 1) * cols];
                run_row(k, row);
            }
        }
        out
    }

    /// Adds `bias` (length `cols`) to every row.
    pub fn add_bias(&mut self, bias: &[F]) {
        assert_eq!(bias.len(), self.cols);
        for r in 0..self.rows {
            for (x, &b) in self.row_mut(r).iter_mut().zip(bias) {
                *x = *x + b;
            }
        }
    }

    /// Column sums (the bias gradient of a linear layer).
    pub fn col_sums(&self) -> Vec<F> {
        let mut out = vec![F::zero(); self.cols];
        for r in 0..self.rows {
            for (o, &x) in out.iter_mut().zip(self.row(r)) {
                *o = *o + x;
            }
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

pub fn dot<F: Scalar>(a: &[F], b: &[F]) -> F {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = F::zero();
    for (&x, &y) in a.iter().zip(b) {
        acc = acc + x * y;
    }
    acc
}

pub fn axpy<F: Scalar>(alpha: F, x: &[F], y: &mut [F]) {
    debug_assert_eq!(x.len(), y.len());
    for (&xv, yv) in x.iter().zip(y) {
        *yv = *yv + alpha * xv;
    }
}

/// In-place softmax over a slice; entries equal to `-inf` get exactly 0.
pub fn softmax_inplace<F: Scalar>(xs: &mut [F]) {
    let mut max = F::neg_infinity();
    for &x in xs.iter() {
        if x > max {
            max = x;
        }
    }
    if !max.is_finite() {
        // all keys masked: leave a uniform row to stay well-defined
        let n = F::cast(xs.len() as f64);
        for x in xs.iter_mut() {
            *x = F::one() / n;
        }
        return;
    }
    let mut sum = F::zero();
    for x in xs.iter_mut() {
        *x = (*x - max).exp();
        sum = sum + *x;
    }
    for x in xs.iter_mut() {
        *x = *x / sum;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mat(rows: usize, cols: usize, xs: &[f64]) -> Mat<f64> {
        assert_eq!(xs.len(), rows * cols);
        Mat {
            rows,
            cols,
            data: xs.to_vec(),
        }
    }

    #[test]
    fn matmul_variants_agree_with_reference() {
        let a = mat(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = mat(3, 2, &[7.0, 8.0, 9.0, 10.0, 11.0, 12.0]);
        let c = a.matmul_nn(&b);
        assert_eq!(c.data, vec![58.0, 64.0, 139.0, 154.0]);

        // A @ B^T via matmul_nt equals A @ (B^T)
        let bt = mat(2, 3, &[7.0, 9.0, 11.0, 8.0, 10.0, 12.0]);
        let c2 = a.matmul_nt(&bt);
        assert_eq!(c2.data, c.data);

        // A^T @ B via matmul_tn
        let at = mat(3, 2, &[1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
        let d = at.matmul_tn(&b.matmul_nn(&mat(2, 2, &[1.0, 0.0, 0.0, 1.0])));
        let d_ref = mat(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).matmul_nn(&b);
        // (A^T)^T @ B == A @ B
        assert_eq!(d.data, d_ref.data);
    }

    #[test]
    fn parallel_matches_sequential() {
        // exercise the rayon path (rows >= threshold) against from_fn math
        let a = Mat::from_fn(64, 16, |r, c| ((r * 31 + c * 7) % 13) as f64 - 6.0);
        let b = Mat::from_fn(16, 24, |r, c| ((r * 5 + c * 3) % 11) as f64 - 5.0);
        let big = a.matmul_nn(&b);
        for r in 0..a.rows {
            for c in 0..b.cols {
                let want = dot(
                    a.row(r),
                    &(0..16).map(|k| b.data[k * 24 + c]).collect::<Vec<_>>(),
                );
                assert_eq!(big.data[r * 24 + c], want);
            }
        }
    }

    #[test]
    fn softmax_rows_normalize_and_respect_masks() {
        let mut xs = vec![1.0f64, 2.0, 3.0, f64::NEG_INFINITY];
        softmax_inplace(&mut xs);
        assert_eq!(xs[3], 0.0);
        let s: f64 = xs.iter().sum();
        assert!((s - 1.0).abs() < 1e-12);
        assert!(xs[2] > xs[1] && xs[1] > xs[0]);
    }

    #[test]
    fn bias_and_col_sums() {
        let mut a = mat(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        a.add_bias(&[10.0, 20.0]);
        assert_eq!(a.data, vec![11.0, 22.0, 13.0, 24.0]);
        assert_eq!(a.col_sums(), vec![24.0, 46.0]);
    }
}
