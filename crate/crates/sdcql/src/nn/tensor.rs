//! Dense row-major f32 matrix with GEMM helpers.

use crate::exec;

/// Row-major f32 matrix. Vectors are 1×n or n×1.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), rows * cols, "data length must match shape");
        Mat { rows, cols, data }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Mat { rows, cols, data }
    }

    pub fn scalar(v: f32) -> Self {
        Mat::from_vec(1, 1, vec![v])
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn at_mut(&mut self, r: usize, c: usize) -> &mut f32 {
        &mut self.data[r * self.cols + c]
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f32] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Frobenius-style squared L2 norm, accumulated in f64.
    pub fn sq_norm(&self) -> f64 {
        self.data.iter().map(|&v| f64::from(v) * f64::from(v)).sum()
    }
}

/// Row block size above which GEMMs split across threads.
const PAR_ROW_BLOCK: usize = 256;

fn sgemm_block(
    m: usize,
    k: usize,
    n: usize,
    alpha: f32,
    a: &[f32],
    b: &[f32],
    beta: f32,
    c: &mut [f32],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            n as isize,
            1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `out = a @ b`, splitting row blocks across threads when large.
pub fn matmul(a: &Mat, b: &Mat) -> Mat {
    assert_eq!(a.cols, b.rows, "matmul inner dims");
    let mut out = Mat::zeros(a.rows, b.cols);
    if a.rows >= 2 * PAR_ROW_BLOCK && exec::mode() == exec::Mode::Parallel {
        let k = a.cols;
        let n = b.cols;
        exec::for_each_chunk_mut(&mut out.data, PAR_ROW_BLOCK * n, |i, chunk| {
            let r0 = i * PAR_ROW_BLOCK;
            let m = chunk.len() / n;
            sgemm_block(m, k, n, 1.0, &a.data[r0 * k..(r0 + m) * k], &b.data, 0.0, chunk);
        });
    } else {
        sgemm_block(a.rows, a.cols, b.cols, 1.0, &a.data, &b.data, 0.0, &mut out.data);
    }
    out
}

/// `out += aᵀ @ b` (used for weight gradients).
pub fn matmul_tn_acc(a: &Mat, b: &Mat, out: &mut Mat) {
    assert_eq!(a.rows, b.rows, "matmul_tn inner dims");
    assert_eq!(out.rows, a.cols);
    assert_eq!(out.cols, b.cols);
    unsafe {
        matrixmultiply::sgemm(
            a.cols,
            a.rows,
            b.cols,
            1.0,
            a.data.as_ptr(),
            1,
            a.cols as isize,
            b.data.as_ptr(),
            b.cols as isize,
            1,
            1.0,
            out.data.as_mut_ptr(),
            out.cols as isize,
            1,
        );
    }
}

/// `out += a @ bᵀ` (used for input gradients).
pub fn matmul_nt_acc(a: &Mat, b: &Mat, out: &mut Mat) {
    assert_eq!(a.cols, b.cols, "matmul_nt inner dims");
    assert_eq!(out.rows, a.rows);
    assert_eq!(out.cols, b.rows);
    unsafe {
        matrixmultiply::sgemm(
            a.rows,
            a.cols,
            b.rows,
            1.0,
            a.data.as_ptr(),
            a.cols as isize,
            1,
            b.data.as_ptr(),
            1,
            b.cols as isize,
            1.0,
            out.data.as_mut_ptr(),
            out.cols as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &Mat, b: &Mat) -> Mat {
        let mut out = Mat::zeros(a.rows, b.cols);
        for i in 0..a.rows {
            for j in 0..b.cols {
                let mut s = 0.0f64;
                for k in 0..a.cols {
                    s += f64::from(a.at(i, k)) * f64::from(b.at(k, j));
                }
                *out.at_mut(i, j) = s as f32;
            }
        }
        out
    }

    #[test]
    fn matmul_matches_naive() {
        let a = Mat::from_fn(17, 9, |r, c| ((r * 31 + c * 7) % 13) as f32 * 0.25 - 1.0);
        let b = Mat::from_fn(9, 5, |r, c| ((r * 5 + c * 11) % 17) as f32 * 0.1 - 0.7);
        let got = matmul(&a, &b);
        let want = naive(&a, &b);
        for (g, w) in got.data.iter().zip(&want.data) {
            assert!((g - w).abs() < 1e-4, "{g} vs {w}");
        }
    }

    #[test]
    fn transposed_products_accumulate() {
        let a = Mat::from_fn(6, 4, |r, c| (r + 2 * c) as f32 * 0.5);
        let b = Mat::from_fn(6, 3, |r, c| (r as f32 - c as f32) * 0.25);
        let mut out = Mat::zeros(4, 3);
        matmul_tn_acc(&a, &b, &mut out);
        matmul_tn_acc(&a, &b, &mut out);
        for i in 0..4 {
            for j in 0..3 {
                let mut s = 0.0;
                for r in 0..6 {
                    s += a.at(r, i) * b.at(r, j);
                }
                assert!((out.at(i, j) - 2.0 * s).abs() < 1e-4);
            }
        }
    }
}
