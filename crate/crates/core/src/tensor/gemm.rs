use super::Tensor;
use crate::error::{Error, Result};

/// Strided read-only matrix view into a flat buffer.
#[derive(Clone, Copy, Debug)]
pub struct MatRef<'a> {
    pub data: &'a [f64],
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
    pub row_stride: usize,
    pub col_stride: usize,
}

impl<'a> MatRef<'a> {
    pub fn row_major(data: &'a [f64], rows: usize, cols: usize) -> Self {
        MatRef {
            data,
            offset: 0,
            rows,
            cols,
            row_stride: cols,
            col_stride: 1,
        }
    }

    pub fn t(self) -> Self {
        MatRef {
            rows: self.cols,
            cols: self.rows,
            row_stride: self.col_stride,
            col_stride: self.row_stride,
            ..self
        }
    }

    fn last_index(&self) -> usize {
        if self.rows == 0 || self.cols == 0 {
            return self.offset;
        }
        self.offset + (self.rows - 1) * self.row_stride + (self.cols - 1) * self.col_stride
    }
}

/// `c = alpha * a * b + beta * c`, with `c` a strided view into `out`.
///
/// Panics if any view reaches outside its buffer.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    alpha: f64,
    a: MatRef<'_>,
    b: MatRef<'_>,
    beta: f64,
    out: &mut [f64],
    c_offset: usize,
    c_row_stride: usize,
    c_col_stride: usize,
) {
    assert_eq!(a.cols, b.rows, "gemm inner dimensions");
    let (m, k, n) = (a.rows, a.cols, b.cols);
    if m == 0 || n == 0 {
        return;
    }
    assert!(a.last_index() < a.data.len().max(1) || k == 0);
    assert!(b.last_index() < b.data.len().max(1) || k == 0);
    let c_last = c_offset + (m - 1) * c_row_stride + (n - 1) * c_col_stride;
    assert!(c_last < out.len(), "gemm output view out of bounds");
    if k == 0 {
        for i in 0..m {
            for j in 0..n {
                let c = &mut out[c_offset + i * c_row_stride + j * c_col_stride];
                *c *= beta;
            }
        }
        return;
    }
    // SAFETY: every index touched by dgemm lies within the bounds asserted above
    // and the output buffer is uniquely borrowed.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr().add(a.offset),
            a.row_stride as isize,
            a.col_stride as isize,
            b.data.as_ptr().add(b.offset),
            b.row_stride as isize,
            b.col_stride as isize,
            beta,
            out.as_mut_ptr().add(c_offset),
            c_row_stride as isize,
            c_col_stride as isize,
        );
    }
}

/// Plain 2D matrix product `a (m×k) · b (k×n)`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
        return Err(Error::shape("matmul", a.shape(), b.shape()));
    }
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut out = vec![0.0; m * n];
    gemm(
        1.0,
        MatRef::row_major(a.data(), m, k),
        MatRef::row_major(b.data(), k, n),
        0.0,
        &mut out,
        0,
        n,
        1,
    );
    Tensor::new(vec![m, n], out)
}
