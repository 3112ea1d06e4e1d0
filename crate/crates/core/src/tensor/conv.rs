//! Strided 2D convolution on NHWC tensors.
//!
//! `conv2d` is a cross-correlation (no kernel flip). Weights are laid out as
//! `[k, k, c_in, c_out]`, which flattens row-major to the `(k·k·c_in) × c_out`
//! matrix used by the im2col formulation. `conv_transpose2d` is the exact
//! adjoint of `conv2d` for the same weights, stride and padding/crop.

use super::gemm::{gemm, MatRef};
use super::Tensor;
use crate::error::{Error, Result};

/// Shape bookkeeping for one convolution: input extents, kernel, stride,
/// symmetric zero padding and the resulting token grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn new(
        batch: usize,
        in_h: usize,
        in_w: usize,
        channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        if stride == 0 || kernel == 0 {
            return Err(Error::invalid("kernel and stride must be positive"));
        }
        if kernel > in_h + 2 * pad || kernel > in_w + 2 * pad {
            return Err(Error::invalid(format!(
                "kernel {} larger than padded input {}x{} (pad {})",
                kernel, in_h, in_w, pad
            )));
        }
        Ok(ConvGeometry {
            batch,
            in_h,
            in_w,
            channels,
            kernel,
            stride,
            pad,
            out_h: (in_h + 2 * pad - kernel) / stride + 1,
            out_w: (in_w + 2 * pad - kernel) / stride + 1,
        })
    }

    pub fn patch_len(&self) -> usize {
        self.kernel * self.kernel * self.channels
    }

    pub fn n_patches(&self) -> usize {
        self.batch * self.out_h * self.out_w
    }

    pub fn input_len(&self) -> usize {
        self.batch * self.in_h * self.in_w * self.channels
    }

    /// Visit every (patch row, patch column, input offset) triple that lands
    /// inside the unpadded input.
    #[inline]
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let (k, c) = (self.kernel, self.channels);
        let plen = self.patch_len();
        for b in 0..self.batch {
            for oy in 0..self.out_h {
                for ox in 0..self.out_w {
                    let row = (b * self.out_h + oy) * self.out_w + ox;
                    for ky in 0..k {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.in_h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix < 0 || ix >= self.in_w as isize {
                                continue;
                            }
                            let src = ((b * self.in_h + iy as usize) * self.in_w + ix as usize) * c;
                            let dst = row * plen + (ky * k + kx) * c;
                            f(dst, src, c);
                        }
                    }
                }
            }
        }
    }
}

/// Gather every receptive field into a `(n_patches, k·k·c)` row-major matrix.
pub fn im2col(x: &[f64], g: &ConvGeometry) -> Vec<f64> {
    debug_assert_eq!(x.len(), g.input_len());
    let mut cols = vec![0.0; g.n_patches() * g.patch_len()];
    g.for_each_tap(|dst, src, c| cols[dst..dst + c].copy_from_slice(&x[src..src + c]));
    cols
}

/// Adjoint of [`im2col`]: scatter-add patch rows back onto the input grid.
pub fn col2im(cols: &[f64], g: &ConvGeometry) -> Vec<f64> {
    debug_assert_eq!(cols.len(), g.n_patches() * g.patch_len());
    let mut x = vec![0.0; g.input_len()];
    g.for_each_tap(|dst, src, c| {
        for (o, v) in x[src..src + c].iter_mut().zip(&cols[dst..dst + c]) {
            *o += v;
        }
    });
    x
}

fn check_weight(w: &Tensor) -> Result<(usize, usize, usize)> {
    let s = w.shape();
    if s.len() != 4 || s[0] != s[1] {
        return Err(Error::invalid(format!(
            "kernel must be [k, k, c_in, c_out], got {:?}",
            s
        )));
    }
    Ok((s[0], s[2], s[3]))
}

fn check_nhwc(x: &Tensor) -> Result<(usize, usize, usize, usize)> {
    let s = x.shape();
    if s.len() != 4 {
        return Err(Error::invalid(format!(
            "expected NHWC tensor, got shape {:?}",
            s
        )));
    }
    Ok((s[0], s[1], s[2], s[3]))
}

/// Geometry of `conv2d(x, w, stride, pad)` with channel compatibility checked.
pub(crate) fn conv2d_geometry(
    x: &Tensor,
    w: &Tensor,
    stride: usize,
    pad: usize,
) -> Result<ConvGeometry> {
    let (b, h, wd, c) = check_nhwc(x)?;
    let (k, c_in, _) = check_weight(w)?;
    if c != c_in {
        return Err(Error::shape("conv2d", x.shape(), w.shape()));
    }
    ConvGeometry::new(b, h, wd, c, k, stride, pad)
}

/// Geometry of the forward convolution that `conv_transpose2d(y, w, stride, crop)` is adjoint to.
pub(crate) fn conv_transpose2d_geometry(
    y: &Tensor,
    w: &Tensor,
    stride: usize,
    crop: usize,
) -> Result<ConvGeometry> {
    let (b, nh, nw, c_out) = check_nhwc(y)?;
    let (k, c_in, wc_out) = check_weight(w)?;
    if c_out != wc_out {
        return Err(Error::shape("conv_transpose2d", y.shape(), w.shape()));
    }
    if stride == 0 || nh == 0 || nw == 0 {
        return Err(Error::invalid("conv_transpose2d needs a non-empty grid and stride >= 1"));
    }
    let full_h = (nh - 1) * stride + k;
    let full_w = (nw - 1) * stride + k;
    if 2 * crop >= full_h || 2 * crop >= full_w {
        return Err(Error::invalid(format!(
            "crop {} leaves non-positive extents from {}x{}",
            crop, full_h, full_w
        )));
    }
    let g = ConvGeometry::new(b, full_h - 2 * crop, full_w - 2 * crop, c_in, k, stride, crop)?;
    debug_assert_eq!((g.out_h, g.out_w), (nh, nw));
    Ok(g)
}

/// Strided cross-correlation with symmetric zero padding.
///
/// Output extents are `⌊(H + 2·pad − k)/stride⌋ + 1` per axis.
pub fn conv2d(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    let g = conv2d_geometry(x, w, stride, pad)?;
    let c_out = w.shape()[3];
    let cols = im2col(x.data(), &g);
    let mut out = vec![0.0; g.n_patches() * c_out];
    gemm(
        1.0,
        MatRef::row_major(&cols, g.n_patches(), g.patch_len()),
        MatRef::row_major(w.data(), g.patch_len(), c_out),
        0.0,
        &mut out,
        0,
        c_out,
        1,
    );
    Tensor::new(vec![g.batch, g.out_h, g.out_w, c_out], out)
}

/// Transposed convolution: maps `[B, N_h, N_w, c_out]` tokens back to
/// `[B, (N_h−1)·s + k − 2·crop, …, c_in]`. Overlapping contributions add.
pub fn conv_transpose2d(y: &Tensor, w: &Tensor, stride: usize, crop: usize) -> Result<Tensor> {
    let g = conv_transpose2d_geometry(y, w, stride, crop)?;
    let c_out = w.shape()[3];
    let mut cols = vec![0.0; g.n_patches() * g.patch_len()];
    gemm(
        1.0,
        MatRef::row_major(y.data(), g.n_patches(), c_out),
        MatRef::row_major(w.data(), g.patch_len(), c_out).t(),
        0.0,
        &mut cols,
        0,
        g.patch_len(),
        1,
    );
    let x = col2im(&cols, &g);
    Tensor::new(vec![g.batch, g.in_h, g.in_w, g.channels], x)
}

/// `∂/∂w` of `⟨conv2d(x, w), dy⟩`, i.e. `im2col(x)ᵀ · dy`.
pub(crate) fn conv_weight_grad(patches: &[f64], dy: &[f64], g: &ConvGeometry, c_out: usize) -> Vec<f64> {
    let mut dw = vec![0.0; g.patch_len() * c_out];
    gemm(
        1.0,
        MatRef::row_major(patches, g.n_patches(), g.patch_len()).t(),
        MatRef::row_major(dy, g.n_patches(), c_out),
        0.0,
        &mut dw,
        0,
        c_out,
        1,
    );
    dw
}

/// `dy · wᵀ` followed by col2im: input-side gradient of `conv2d`, which is
/// also the forward map of `conv_transpose2d`.
pub(crate) fn conv_input_grad(dy: &[f64], w: &[f64], g: &ConvGeometry, c_out: usize) -> Vec<f64> {
    let mut cols = vec![0.0; g.n_patches() * g.patch_len()];
    gemm(
        1.0,
        MatRef::row_major(dy, g.n_patches(), c_out),
        MatRef::row_major(w, g.patch_len(), c_out).t(),
        0.0,
        &mut cols,
        0,
        g.patch_len(),
        1,
    );
    col2im(&cols, g)
}

/// `im2col(x) · w`: output-side map of `conv2d` given precomputed patches.
pub(crate) fn conv_apply(patches: &[f64], w: &[f64], g: &ConvGeometry, c_out: usize) -> Vec<f64> {
    let mut out = vec![0.0; g.n_patches() * c_out];
    gemm(
        1.0,
        MatRef::row_major(patches, g.n_patches(), g.patch_len()),
        MatRef::row_major(w, g.patch_len(), c_out),
        0.0,
        &mut out,
        0,
        c_out,
        1,
    );
    out
}
