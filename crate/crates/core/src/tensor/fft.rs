//! Real-input 2D FFT.
//!
//! Convention: the forward transform is unnormalized,
//! `X[ky, kx] = Σ x[y, x] · exp(−2πi (ky·y/H + kx·x/W))`, and the inverse carries
//! the `1/(H·W)` factor. Only the half-plane `kx ∈ [0, W/2]` is stored; the
//! remaining modes follow from `X[−ky, −kx] = conj(X[ky, kx])`.

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct ComplexGrid {
    height: usize,
    width: usize,
    data: Vec<Complex64>,
}

impl ComplexGrid {
    pub fn zeros(height: usize, width: usize) -> Self {
        ComplexGrid {
            height,
            width,
            data: vec![Complex64::new(0.0, 0.0); height * (width / 2 + 1)],
        }
    }

    /// Extent of the real-space grid this spectrum belongs to.
    pub fn spatial_shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    /// Stored shape: `(H, W/2 + 1)`.
    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width / 2 + 1)
    }

    pub fn data(&self) -> &[Complex64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [Complex64] {
        &mut self.data
    }

    pub fn get(&self, ky: usize, kx: usize) -> Complex64 {
        self.data[ky * (self.width / 2 + 1) + kx]
    }

    pub fn set(&mut self, ky: usize, kx: usize, v: Complex64) {
        let half = self.width / 2 + 1;
        self.data[ky * half + kx] = v;
    }

    /// Signed integer wavenumbers `(ky, kx)` of a stored bin, in cycles per domain.
    /// The Nyquist row is reported as `−H/2`.
    pub fn wavenumber(&self, ky: usize, kx: usize) -> (i64, i64) {
        let sy = if 2 * ky < self.height {
            ky as i64
        } else {
            ky as i64 - self.height as i64
        };
        (sy, kx as i64)
    }

    /// How many full-plane modes a stored bin stands for (1 or 2).
    pub fn multiplicity(&self, kx: usize) -> f64 {
        if kx == 0 || (self.width % 2 == 0 && kx == self.width / 2) {
            1.0
        } else {
            2.0
        }
    }

    /// `Σ_full |X|² / (H·W)`, which equals `Σ x²` by Parseval.
    pub fn energy(&self) -> f64 {
        let half = self.width / 2 + 1;
        let mut total = 0.0;
        for ky in 0..self.height {
            for kx in 0..half {
                total += self.multiplicity(kx) * self.get(ky, kx).norm_sqr();
            }
        }
        total / (self.height * self.width) as f64
    }

    /// Multiply every stored bin by `f(ky_signed, kx)`.
    pub fn apply(&mut self, f: impl Fn(i64, i64) -> Complex64) {
        let half = self.width / 2 + 1;
        for ky in 0..self.height {
            for kx in 0..half {
                let (sy, sx) = self.wavenumber(ky, kx);
                self.data[ky * half + kx] *= f(sy, sx);
            }
        }
    }
}

fn check_2d(x: &Tensor) -> Result<(usize, usize)> {
    match *x.shape() {
        [h, w] if h >= 1 && w >= 1 => Ok((h, w)),
        _ => Err(Error::invalid(format!(
            "rfft2 expects a non-empty [H, W] tensor, got {:?}",
            x.shape()
        ))),
    }
}

pub fn rfft2(x: &Tensor) -> Result<ComplexGrid> {
    let (h, w) = check_2d(x)?;
    let half = w / 2 + 1;
    let mut planner = FftPlanner::<f64>::new();
    let row_fft = planner.plan_fft_forward(w);
    let col_fft = planner.plan_fft_forward(h);

    let mut grid = ComplexGrid::zeros(h, w);
    let mut row = vec![Complex64::new(0.0, 0.0); w];
    for y in 0..h {
        for (r, &v) in row.iter_mut().zip(&x.data()[y * w..(y + 1) * w]) {
            *r = Complex64::new(v, 0.0);
        }
        row_fft.process(&mut row);
        grid.data[y * half..(y + 1) * half].copy_from_slice(&row[..half]);
    }
    let mut col = vec![Complex64::new(0.0, 0.0); h];
    for kx in 0..half {
        for y in 0..h {
            col[y] = grid.data[y * half + kx];
        }
        col_fft.process(&mut col);
        for y in 0..h {
            grid.data[y * half + kx] = col[y];
        }
    }
    Ok(grid)
}

/// Inverse of [`rfft2`]. Any anti-Hermitian part in self-conjugate bins is
/// discarded, so the result is the real field whose spectrum is closest.
pub fn irfft2(grid: &ComplexGrid) -> Tensor {
    let (h, w) = (grid.height, grid.width);
    let half = w / 2 + 1;
    let mut planner = FftPlanner::<f64>::new();
    let row_ifft = planner.plan_fft_inverse(w);
    let col_ifft = planner.plan_fft_inverse(h);

    let mut work = grid.data.clone();
    let mut col = vec![Complex64::new(0.0, 0.0); h];
    for kx in 0..half {
        for y in 0..h {
            col[y] = work[y * half + kx];
        }
        col_ifft.process(&mut col);
        for y in 0..h {
            work[y * half + kx] = col[y];
        }
    }
    let scale = 1.0 / (h * w) as f64;
    let mut out = vec![0.0; h * w];
    let mut row = vec![Complex64::new(0.0, 0.0); w];
    for y in 0..h {
        let src = &work[y * half..(y + 1) * half];
        row[..half].copy_from_slice(src);
        for kx in half..w {
            row[kx] = src[w - kx].conj();
        }
        // self-conjugate bins must be real for the row to be Hermitian
        row[0].im = 0.0;
        if w % 2 == 0 {
            row[w / 2].im = 0.0;
        }
        row_ifft.process(&mut row);
        for (o, r) in out[y * w..(y + 1) * w].iter_mut().zip(&row) {
            *o = r.re * scale;
        }
    }
    Tensor::new(vec![h, w], out).expect("irfft2 output shape")
}
