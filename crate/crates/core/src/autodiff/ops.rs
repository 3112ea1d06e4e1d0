use std::cell::Cell;
use std::sync::Arc;

use rayon::prelude::*;

use super::{BackwardCtx, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::conv::{
    conv2d_geometry, conv_apply, conv_input_grad, conv_transpose2d_geometry, conv_weight_grad,
};
use crate::tensor::{gemm, im2col, MatRef, Tensor};

thread_local! {
    static ATTENTION_SCORES: Cell<u64> = const { Cell::new(0) };
}

/// Attention score entries computed on this thread since the last reset
/// (one per query/key pair per sequence, independent of head count).
pub fn attention_score_count() -> u64 {
    ATTENTION_SCORES.with(Cell::get)
}

pub fn reset_attention_score_count() {
    ATTENTION_SCORES.with(|c| c.set(0));
}

/// How the border of a padded grid is filled.
#[derive(Clone, Copy, Debug)]
pub enum PadFill {
    Zero,
    Periodic,
    /// Per-channel learned vector, shape `[C]`.
    Learned(Var),
}

/// Groups token rows into independent attention sequences.
///
/// Rows are the leading axis of a `[rows, D]` token matrix. Group `g` with
/// `o = g / inner`, `i = g % inner` covers rows
/// `o·outer_stride + i·inner_stride + p·step` for `p in 0..len`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SeqLayout {
    pub outer: usize,
    pub outer_stride: usize,
    pub inner: usize,
    pub inner_stride: usize,
    pub len: usize,
    pub step: usize,
}

impl SeqLayout {
    pub fn groups(&self) -> usize {
        self.outer * self.inner
    }

    pub fn rows(&self) -> usize {
        self.groups() * self.len
    }

    fn base(&self, g: usize) -> usize {
        (g / self.inner) * self.outer_stride + (g % self.inner) * self.inner_stride
    }

    /// Attention along `T` of a `[B, T, N, D]` token grid.
    pub fn temporal(batch: usize, frames: usize, tokens: usize) -> Self {
        SeqLayout {
            outer: batch,
            outer_stride: frames * tokens,
            inner: tokens,
            inner_stride: 1,
            len: frames,
            step: tokens,
        }
    }

    /// Full attention over all `N_h·N_w` tokens of each frame.
    pub fn spatial(frames: usize, nh: usize, nw: usize) -> Self {
        SeqLayout {
            outer: frames,
            outer_stride: nh * nw,
            inner: 1,
            inner_stride: 0,
            len: nh * nw,
            step: 1,
        }
    }

    /// Attention along each row of each frame.
    pub fn rows_of(frames: usize, nh: usize, nw: usize) -> Self {
        SeqLayout {
            outer: frames * nh,
            outer_stride: nw,
            inner: 1,
            inner_stride: 0,
            len: nw,
            step: 1,
        }
    }

    /// Attention along each column of each frame.
    pub fn cols_of(frames: usize, nh: usize, nw: usize) -> Self {
        SeqLayout {
            outer: frames,
            outer_stride: nh * nw,
            inner: nw,
            inner_stride: 1,
            len: nh,
            step: nw,
        }
    }
}

/// Per-row rotation angles for rotary position embedding. The same angles are
/// used in every head; `pairs` is half the head dimension.
#[derive(Clone, Debug, PartialEq)]
pub struct RopeTable {
    pub rows: usize,
    pub pairs: usize,
    cos: Vec<f64>,
    sin: Vec<f64>,
}

impl RopeTable {
    pub fn from_angles(rows: usize, pairs: usize, angles: &[f64]) -> Result<Self> {
        if angles.len() != rows * pairs {
            return Err(Error::invalid("rope angle table has the wrong length"));
        }
        Ok(RopeTable {
            rows,
            pairs,
            cos: angles.iter().map(|a| a.cos()).collect(),
            sin: angles.iter().map(|a| a.sin()).collect(),
        })
    }

    fn rotate(&self, x: &[f64], d: usize, inverse: bool) -> Vec<f64> {
        let head_dim = 2 * self.pairs;
        let mut out = vec![0.0; x.len()];
        for r in 0..self.rows {
            let row = &x[r * d..(r + 1) * d];
            let dst = &mut out[r * d..(r + 1) * d];
            for h in 0..d / head_dim {
                for j in 0..self.pairs {
                    let c = self.cos[r * self.pairs + j];
                    let s = if inverse {
                        -self.sin[r * self.pairs + j]
                    } else {
                        self.sin[r * self.pairs + j]
                    };
                    let i0 = h * head_dim + 2 * j;
                    let (a, b) = (row[i0], row[i0 + 1]);
                    dst[i0] = a * c - b * s;
                    dst[i0 + 1] = a * s + b * c;
                }
            }
        }
        out
    }
}

/// `tanh` via `expm1`; noticeably cheaper than the libm call on hot paths.
fn fast_tanh(z: f64) -> f64 {
    let e = (2.0 * z.clamp(-20.0, 20.0)).exp_m1();
    e / (e + 2.0)
}

fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + fast_tanh(C * (x + 0.044715 * x * x * x)))
}

fn gelu_grad(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let t = fast_tanh(C * (x + 0.044715 * x * x * x));
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn last_dim(t: &Tensor) -> Result<usize> {
    t.shape()
        .last()
        .copied()
        .filter(|&d| d > 0)
        .ok_or_else(|| Error::invalid(format!("expected a non-empty last axis, got {:?}", t.shape())))
}

impl Graph {
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).add(self.value(b))?;
        Ok(self.record("add", &[a, b], v, Box::new(|c| Ok(vec![c.grad.clone(), c.grad.clone()]))))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).sub(self.value(b))?;
        Ok(self.record(
            "sub",
            &[a, b],
            v,
            Box::new(|c| Ok(vec![c.grad.clone(), c.grad.scale(-1.0)])),
        ))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        Ok(self.record(
            "mul",
            &[a, b],
            v,
            Box::new(|c| {
                Ok(vec![
                    c.grad.zip_map(c.inputs[1], |g, y| g * y)?,
                    c.grad.zip_map(c.inputs[0], |g, x| g * x)?,
                ])
            }),
        ))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a).scale(k);
        self.record("scale", &[a], v, Box::new(move |c| Ok(vec![c.grad.scale(k)])))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        self.record(
            "sum",
            &[a],
            v,
            Box::new(|c| Ok(vec![Tensor::full(c.inputs[0].shape(), c.grad.item())])),
        )
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).reshaped(shape)?;
        Ok(self.record(
            "reshape",
            &[a],
            v,
            Box::new(|c| Ok(vec![c.grad.reshaped(c.inputs[0].shape())?])),
        ))
    }

    /// Pick index `t` along axis 1 and drop that axis.
    pub fn select(&mut self, x: Var, index: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 || index >= shape[1] {
            return Err(Error::invalid(format!(
                "select index {} on axis 1 of {:?}",
                index, shape
            )));
        }
        let mut out_shape = shape.clone();
        out_shape.remove(1);
        let v = self.value(x).narrow(1, index, 1)?.reshape(&out_shape)?;
        let (n, inner) = (shape[1], shape[2..].iter().product::<usize>());
        Ok(self.record(
            "select",
            &[x],
            v,
            Box::new(move |c| {
                let mut g = Tensor::zeros(c.inputs[0].shape());
                let outer = c.grad.len() / inner;
                let gd = g.data_mut();
                for o in 0..outer {
                    let dst = (o * n + index) * inner;
                    gd[dst..dst + inner].copy_from_slice(&c.grad.data()[o * inner..(o + 1) * inner]);
                }
                Ok(vec![g])
            }),
        ))
    }

    /// `x + b` with `b` broadcast along the last axis.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let d = last_dim(self.value(x))?;
        if self.shape(b) != [d] {
            return Err(Error::shape("add_bias", self.shape(x), self.shape(b)));
        }
        let mut v = self.value(x).clone();
        let bias = self.value(b).data().to_vec();
        for row in v.data_mut().chunks_mut(d) {
            for (o, bb) in row.iter_mut().zip(&bias) {
                *o += bb;
            }
        }
        Ok(self.record(
            "add_bias",
            &[x, b],
            v,
            Box::new(move |c| {
                let mut db = vec![0.0; d];
                for row in c.grad.data().chunks(d) {
                    for (o, g) in db.iter_mut().zip(row) {
                        *o += g;
                    }
                }
                Ok(vec![c.grad.clone(), Tensor::new(vec![d], db)?])
            }),
        ))
    }

    /// Row-wise `x · w` for `x: [..., d_in]`, `w: [d_in, d_out]`.
    pub fn linear(&mut self, x: Var, w: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let d_in = last_dim(self.value(x))?;
        if ws.len() != 2 || ws[0] != d_in {
            return Err(Error::shape("linear", &xs, &ws));
        }
        let d_out = ws[1];
        let rows = self.value(x).len() / d_in;
        let mut out = vec![0.0; rows * d_out];
        gemm(
            1.0,
            MatRef::row_major(self.value(x).data(), rows, d_in),
            MatRef::row_major(self.value(w).data(), d_in, d_out),
            0.0,
            &mut out,
            0,
            d_out,
            1,
        );
        let mut out_shape = xs.clone();
        *out_shape.last_mut().unwrap() = d_out;
        let v = Tensor::new(out_shape, out)?;
        Ok(self.record(
            "linear",
            &[x, w],
            v,
            Box::new(move |c| {
                let (xv, wv, g) = (c.inputs[0], c.inputs[1], c.grad);
                let mut dx = vec![0.0; rows * d_in];
                gemm(
                    1.0,
                    MatRef::row_major(g.data(), rows, d_out),
                    MatRef::row_major(wv.data(), d_in, d_out).t(),
                    0.0,
                    &mut dx,
                    0,
                    d_in,
                    1,
                );
                let mut dw = vec![0.0; d_in * d_out];
                gemm(
                    1.0,
                    MatRef::row_major(xv.data(), rows, d_in).t(),
                    MatRef::row_major(g.data(), rows, d_out),
                    0.0,
                    &mut dw,
                    0,
                    d_out,
                    1,
                );
                Ok(vec![
                    Tensor::new(xv.shape().to_vec(), dx)?,
                    Tensor::new(wv.shape().to_vec(), dw)?,
                ])
            }),
        ))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(gelu);
        self.record(
            "gelu",
            &[x],
            v,
            Box::new(|c| Ok(vec![c.grad.zip_map(c.inputs[0], |g, x| g * gelu_grad(x))?])),
        )
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let d = last_dim(self.value(x))?;
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::shape("layer_norm", self.shape(x), self.shape(gamma)));
        }
        let xv = self.value(x);
        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        let mut out = Vec::with_capacity(xv.len());
        for row in xv.data().chunks(d) {
            let (mean, inv) = row_stats(row, eps);
            out.extend(row.iter().enumerate().map(|(i, &v)| (v - mean) * inv * gv[i] + bv[i]));
        }
        let v = Tensor::new(xv.shape().to_vec(), out)?;
        Ok(self.record(
            "layer_norm",
            &[x, gamma, beta],
            v,
            Box::new(move |c| {
                let (xv, gv) = (c.inputs[0], c.inputs[1].data());
                let mut dx = Vec::with_capacity(xv.len());
                let mut dgamma = vec![0.0; d];
                let mut dbeta = vec![0.0; d];
                let mut xhat = vec![0.0; d];
                let mut dxhat = vec![0.0; d];
                for (row, grow) in xv.data().chunks(d).zip(c.grad.data().chunks(d)) {
                    let (mean, inv) = row_stats(row, eps);
                    let (mut m1, mut m2) = (0.0, 0.0);
                    for i in 0..d {
                        xhat[i] = (row[i] - mean) * inv;
                        dxhat[i] = grow[i] * gv[i];
                        dgamma[i] += grow[i] * xhat[i];
                        dbeta[i] += grow[i];
                        m1 += dxhat[i];
                        m2 += dxhat[i] * xhat[i];
                    }
                    m1 /= d as f64;
                    m2 /= d as f64;
                    dx.extend((0..d).map(|i| inv * (dxhat[i] - m1 - xhat[i] * m2)));
                }
                Ok(vec![
                    Tensor::new(xv.shape().to_vec(), dx)?,
                    Tensor::new(vec![d], dgamma)?,
                    Tensor::new(vec![d], dbeta)?,
                ])
            }),
        ))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let g = conv2d_geometry(self.value(x), self.value(w), stride, pad)?;
        let c_out = self.shape(w)[3];
        let patches = im2col(self.value(x).data(), &g);
        let out = conv_apply(&patches, self.value(w).data(), &g, c_out);
        let v = Tensor::new(vec![g.batch, g.out_h, g.out_w, c_out], out)?;
        Ok(self.record(
            "conv2d",
            &[x, w],
            v,
            Box::new(move |c| {
                let patches = im2col(c.inputs[0].data(), &g);
                let dw = conv_weight_grad(&patches, c.grad.data(), &g, c_out);
                let dx = conv_input_grad(c.grad.data(), c.inputs[1].data(), &g, c_out);
                Ok(vec![
                    Tensor::new(c.inputs[0].shape().to_vec(), dx)?,
                    Tensor::new(c.inputs[1].shape().to_vec(), dw)?,
                ])
            }),
        ))
    }

    pub fn conv_transpose2d(&mut self, y: Var, w: Var, stride: usize, crop: usize) -> Result<Var> {
        let g = conv_transpose2d_geometry(self.value(y), self.value(w), stride, crop)?;
        let c_out = self.shape(w)[3];
        let out = conv_input_grad(self.value(y).data(), self.value(w).data(), &g, c_out);
        let v = Tensor::new(vec![g.batch, g.in_h, g.in_w, g.channels], out)?;
        Ok(self.record(
            "conv_transpose2d",
            &[y, w],
            v,
            Box::new(move |c| {
                let patches = im2col(c.grad.data(), &g);
                let dy = conv_apply(&patches, c.inputs[1].data(), &g, c_out);
                let dw = conv_weight_grad(&patches, c.inputs[0].data(), &g, c_out);
                Ok(vec![
                    Tensor::new(c.inputs[0].shape().to_vec(), dy)?,
                    Tensor::new(c.inputs[1].shape().to_vec(), dw)?,
                ])
            }),
        ))
    }

    /// `m · x` where `x` is viewed as `[m.cols, rest]`; `m` is a constant and
    /// receives no gradient. Used to apply kernel resize operators.
    pub fn const_matmul(&mut self, m: Arc<Tensor>, x: Var, out_shape: &[usize]) -> Result<Var> {
        let (p, q) = match *m.shape() {
            [p, q] => (p, q),
            _ => return Err(Error::invalid("const_matmul needs a 2D operator")),
        };
        let xv = self.value(x);
        if q == 0 || xv.len() % q != 0 || out_shape.iter().product::<usize>() != p * (xv.len() / q) {
            return Err(Error::shape("const_matmul", m.shape(), xv.shape()));
        }
        let rest = xv.len() / q;
        let mut out = vec![0.0; p * rest];
        gemm(
            1.0,
            MatRef::row_major(m.data(), p, q),
            MatRef::row_major(xv.data(), q, rest),
            0.0,
            &mut out,
            0,
            rest,
            1,
        );
        let v = Tensor::new(out_shape.to_vec(), out)?;
        Ok(self.record(
            "const_matmul",
            &[x],
            v,
            Box::new(move |c| {
                let mut dx = vec![0.0; q * rest];
                gemm(
                    1.0,
                    MatRef::row_major(m.data(), p, q).t(),
                    MatRef::row_major(c.grad.data(), p, rest),
                    0.0,
                    &mut dx,
                    0,
                    rest,
                    1,
                );
                Ok(vec![Tensor::new(c.inputs[0].shape().to_vec(), dx)?])
            }),
        ))
    }

    /// Pad an NHWC grid by `amount` on every side.
    pub fn pad2d(&mut self, x: Var, amount: usize, fill: PadFill) -> Result<Var> {
        let (b, h, w, ch) = match *self.shape(x) {
            [b, h, w, c] => (b, h, w, c),
            _ => return Err(Error::invalid(format!("pad2d expects NHWC, got {:?}", self.shape(x)))),
        };
        if let PadFill::Learned(t) = fill {
            if self.shape(t) != [ch] {
                return Err(Error::shape("pad2d", self.shape(x), self.shape(t)));
            }
        }
        let (ph, pw) = (h + 2 * amount, w + 2 * amount);
        let periodic = matches!(fill, PadFill::Periodic);
        // source pixel of each padded pixel, None for fill positions
        let src = move |y: usize, xx: usize| -> Option<(usize, usize)> {
            let (sy, sx) = (y as isize - amount as isize, xx as isize - amount as isize);
            if sy >= 0 && sy < h as isize && sx >= 0 && sx < w as isize {
                Some((sy as usize, sx as usize))
            } else if periodic {
                Some((sy.rem_euclid(h as isize) as usize, sx.rem_euclid(w as isize) as usize))
            } else {
                None
            }
        };
        let xv = self.value(x).data();
        let token = match fill {
            PadFill::Learned(t) => self.value(t).data().to_vec(),
            _ => vec![0.0; ch],
        };
        let mut out = vec![0.0; b * ph * pw * ch];
        for n in 0..b {
            for y in 0..ph {
                for xx in 0..pw {
                    let dst = ((n * ph + y) * pw + xx) * ch;
                    match src(y, xx) {
                        Some((sy, sx)) => {
                            let s = ((n * h + sy) * w + sx) * ch;
                            out[dst..dst + ch].copy_from_slice(&xv[s..s + ch]);
                        }
                        None => out[dst..dst + ch].copy_from_slice(&token),
                    }
                }
            }
        }
        let v = Tensor::new(vec![b, ph, pw, ch], out)?;
        let backward = Box::new(move |c: &BackwardCtx<'_>| {
            let g = c.grad.data();
            let mut dx = vec![0.0; b * h * w * ch];
            let mut dt = vec![0.0; ch];
            for n in 0..b {
                for y in 0..ph {
                    for xx in 0..pw {
                        let s = ((n * ph + y) * pw + xx) * ch;
                        match src(y, xx) {
                            Some((sy, sx)) => {
                                let d = ((n * h + sy) * w + sx) * ch;
                                for k in 0..ch {
                                    dx[d + k] += g[s + k];
                                }
                            }
                            None => {
                                for k in 0..ch {
                                    dt[k] += g[s + k];
                                }
                            }
                        }
                    }
                }
            }
            let mut grads = vec![Tensor::new(vec![b, h, w, ch], dx)?];
            if c.inputs.len() == 2 {
                grads.push(Tensor::new(vec![ch], dt)?);
            }
            Ok(grads)
        });
        Ok(match fill {
            PadFill::Learned(t) => self.record("pad2d_learned", &[x, t], v, backward),
            PadFill::Zero => self.record("pad2d_zero", &[x], v, backward),
            PadFill::Periodic => self.record("pad2d_periodic", &[x], v, backward),
        })
    }

    /// Adjoint of periodic padding: strip `amount` from every side of an NHWC
    /// grid and add each stripped pixel onto its periodic image.
    pub fn fold2d_periodic(&mut self, x: Var, amount: usize) -> Result<Var> {
        let (b, ph, pw, ch) = match *self.shape(x) {
            [b, h, w, c] if h > 2 * amount && w > 2 * amount => (b, h, w, c),
            _ => {
                return Err(Error::invalid(format!(
                    "fold2d_periodic by {} needs an NHWC grid larger than {}, got {:?}",
                    amount,
                    2 * amount,
                    self.shape(x)
                )))
            }
        };
        let (h, w) = (ph - 2 * amount, pw - 2 * amount);
        let dst = move |n: usize, y: usize, xx: usize| -> usize {
            let sy = (y as isize - amount as isize).rem_euclid(h as isize) as usize;
            let sx = (xx as isize - amount as isize).rem_euclid(w as isize) as usize;
            ((n * h + sy) * w + sx) * ch
        };
        let xv = self.value(x).data();
        let mut out = vec![0.0; b * h * w * ch];
        for n in 0..b {
            for y in 0..ph {
                for xx in 0..pw {
                    let s = ((n * ph + y) * pw + xx) * ch;
                    let d = dst(n, y, xx);
                    for k in 0..ch {
                        out[d + k] += xv[s + k];
                    }
                }
            }
        }
        let v = Tensor::new(vec![b, h, w, ch], out)?;
        Ok(self.record(
            "fold2d_periodic",
            &[x],
            v,
            Box::new(move |c| {
                let g = c.grad.data();
                let mut dx = vec![0.0; b * ph * pw * ch];
                for n in 0..b {
                    for y in 0..ph {
                        for xx in 0..pw {
                            let s = ((n * ph + y) * pw + xx) * ch;
                            let d = dst(n, y, xx);
                            dx[s..s + ch].copy_from_slice(&g[d..d + ch]);
                        }
                    }
                }
                Ok(vec![Tensor::new(vec![b, ph, pw, ch], dx)?])
            }),
        ))
    }

    /// Rotary position embedding applied to `[rows, D]` tokens, per head.
    pub fn rope(&mut self, x: Var, table: Arc<RopeTable>) -> Result<Var> {
        let d = last_dim(self.value(x))?;
        let rows = self.value(x).len() / d;
        if rows != table.rows || table.pairs == 0 || d % (2 * table.pairs) != 0 {
            return Err(Error::invalid(format!(
                "rope table ({} rows, {} pairs) does not fit tokens {:?}",
                table.rows,
                table.pairs,
                self.shape(x)
            )));
        }
        let v = Tensor::new(self.shape(x).to_vec(), table.rotate(self.value(x).data(), d, false))?;
        Ok(self.record(
            "rope",
            &[x],
            v,
            Box::new(move |c| {
                Ok(vec![Tensor::new(
                    c.grad.shape().to_vec(),
                    table.rotate(c.grad.data(), d, true),
                )?])
            }),
        ))
    }

    /// Multi-head scaled dot-product attention over the sequences described
    /// by `layout`. `q`, `k`, `v` are `[..., D]` token matrices with the same
    /// row count; heads split `D` into equal contiguous chunks.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, layout: SeqLayout, heads: usize) -> Result<Var> {
        let shape = self.shape(q).to_vec();
        if self.shape(k) != shape.as_slice() || self.shape(v) != shape.as_slice() {
            return Err(Error::shape("attention", &shape, self.shape(k)));
        }
        let d = last_dim(self.value(q))?;
        if heads == 0 || d % heads != 0 {
            return Err(Error::invalid(format!("{} heads do not divide width {}", heads, d)));
        }
        if self.value(q).len() / d != layout.rows() {
            return Err(Error::invalid(format!(
                "attention layout covers {} rows, tokens have {}",
                layout.rows(),
                self.value(q).len() / d
            )));
        }
        let geom = AttnGeom { layout, d, heads };
        ATTENTION_SCORES.with(|c| c.set(c.get() + (layout.groups() * layout.len * layout.len) as u64));
        let out = geom.forward(self.value(q).data(), self.value(k).data(), self.value(v).data());
        let val = Tensor::new(shape.clone(), out)?;
        Ok(self.record(
            "attention",
            &[q, k, v],
            val,
            Box::new(move |c| {
                let (dq, dk, dv) = geom.backward(
                    c.inputs[0].data(),
                    c.inputs[1].data(),
                    c.inputs[2].data(),
                    c.grad.data(),
                );
                Ok(vec![
                    Tensor::new(shape.clone(), dq)?,
                    Tensor::new(shape.clone(), dk)?,
                    Tensor::new(shape.clone(), dv)?,
                ])
            }),
        ))
    }

    /// Normalized MSE against a constant target, averaged over the leading
    /// (batch) axis and the trailing (channel) axis:
    /// `mean_{b,c} [ mean_s (p − t)² / (mean_s t² + eps) ]`.
    pub fn nmse(&mut self, pred: Var, target: &Tensor, eps: f64) -> Result<Var> {
        let pv = self.value(pred);
        pv.expect_same_shape("nmse", target)?;
        let shape = pv.shape();
        if shape.len() < 2 {
            return Err(Error::invalid("nmse needs [batch, ..., channels]"));
        }
        let (b, ch) = (shape[0], shape[shape.len() - 1]);
        let space = pv.len() / (b * ch);
        let mut num = vec![0.0; b * ch];
        let mut den = vec![0.0; b * ch];
        for n in 0..b {
            for s in 0..space {
                for c in 0..ch {
                    let i = (n * space + s) * ch + c;
                    let r = pv.data()[i] - target.data()[i];
                    num[n * ch + c] += r * r;
                    den[n * ch + c] += target.data()[i] * target.data()[i];
                }
            }
        }
        for d in den.iter_mut() {
            *d = *d / space as f64 + eps;
        }
        let loss: f64 = num
            .iter()
            .zip(&den)
            .map(|(n, d)| n / space as f64 / d)
            .sum::<f64>()
            / (b * ch) as f64;
        let target = target.clone();
        Ok(self.record(
            "nmse",
            &[pred],
            Tensor::scalar(loss),
            Box::new(move |c| {
                let g = c.grad.item();
                let p = c.inputs[0].data();
                let scale = 2.0 * g / (space * b * ch) as f64;
                let mut dp = vec![0.0; p.len()];
                for n in 0..b {
                    for s in 0..space {
                        for cc in 0..ch {
                            let i = (n * space + s) * ch + cc;
                            dp[i] = scale * (p[i] - target.data()[i]) / den[n * ch + cc];
                        }
                    }
                }
                Ok(vec![Tensor::new(c.inputs[0].shape().to_vec(), dp)?])
            }),
        ))
    }
}

fn row_stats(row: &[f64], eps: f64) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, 1.0 / (var + eps).sqrt())
}

#[derive(Clone, Copy)]
struct AttnGeom {
    layout: SeqLayout,
    d: usize,
    heads: usize,
}

impl AttnGeom {
    fn head_dim(&self) -> usize {
        self.d / self.heads
    }

    fn view<'a>(&self, data: &'a [f64], g: usize, h: usize) -> MatRef<'a> {
        MatRef {
            data,
            offset: self.layout.base(g) * self.d + h * self.head_dim(),
            rows: self.layout.len,
            cols: self.head_dim(),
            row_stride: self.layout.step * self.d,
            col_stride: 1,
        }
    }

    /// Row-softmaxed attention probabilities for one group and head.
    fn probs(&self, q: &[f64], k: &[f64], g: usize, h: usize) -> Vec<f64> {
        let l = self.layout.len;
        let scale = 1.0 / (self.head_dim() as f64).sqrt();
        let mut s = vec![0.0; l * l];
        gemm(scale, self.view(q, g, h), self.view(k, g, h).t(), 0.0, &mut s, 0, l, 1);
        for row in s.chunks_mut(l) {
            let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                z += *v;
            }
            for v in row.iter_mut() {
                *v /= z;
            }
        }
        s
    }

    fn scatter(&self, dst: &mut [f64], g: usize, local: &[f64]) {
        let base = self.layout.base(g);
        for p in 0..self.layout.len {
            let r = base + p * self.layout.step;
            dst[r * self.d..(r + 1) * self.d].copy_from_slice(&local[p * self.d..(p + 1) * self.d]);
        }
    }

    fn forward(&self, q: &[f64], k: &[f64], v: &[f64]) -> Vec<f64> {
        let (l, d, dh) = (self.layout.len, self.d, self.head_dim());
        let locals: Vec<Vec<f64>> = (0..self.layout.groups())
            .into_par_iter()
            .map(|g| {
                let mut o = vec![0.0; l * d];
                for h in 0..self.heads {
                    let p = self.probs(q, k, g, h);
                    gemm(1.0, MatRef::row_major(&p, l, l), self.view(v, g, h), 0.0, &mut o, h * dh, d, 1);
                }
                o
            })
            .collect();
        let mut out = vec![0.0; q.len()];
        for (g, local) in locals.iter().enumerate() {
            self.scatter(&mut out, g, local);
        }
        out
    }

    fn backward(&self, q: &[f64], k: &[f64], v: &[f64], dout: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let (l, d, dh) = (self.layout.len, self.d, self.head_dim());
        let scale = 1.0 / (dh as f64).sqrt();
        let locals: Vec<[Vec<f64>; 3]> = (0..self.layout.groups())
            .into_par_iter()
            .map(|g| {
                let mut dq = vec![0.0; l * d];
                let mut dk = vec![0.0; l * d];
                let mut dv = vec![0.0; l * d];
                let mut dp = vec![0.0; l * l];
                for h in 0..self.heads {
                    let p = self.probs(q, k, g, h);
                    let pm = MatRef::row_major(&p, l, l);
                    let dov = self.view(dout, g, h);
                    gemm(1.0, pm.t(), dov, 0.0, &mut dv, h * dh, d, 1);
                    gemm(1.0, dov, self.view(v, g, h).t(), 0.0, &mut dp, 0, l, 1);
                    // softmax backward: ds = p ∘ (dp − rowsum(dp ∘ p))
                    for (prow, drow) in p.chunks(l).zip(dp.chunks_mut(l)) {
                        let dot: f64 = prow.iter().zip(drow.iter()).map(|(a, b)| a * b).sum();
                        for (dv_, pv) in drow.iter_mut().zip(prow) {
                            *dv_ = pv * (*dv_ - dot);
                        }
                    }
                    let ds = MatRef::row_major(&dp, l, l);
                    gemm(scale, ds, self.view(k, g, h), 0.0, &mut dq, h * dh, d, 1);
                    gemm(scale, ds.t(), self.view(q, g, h), 0.0, &mut dk, h * dh, d, 1);
                }
                [dq, dk, dv]
            })
            .collect();
        let mut dq = vec![0.0; q.len()];
        let mut dk = vec![0.0; q.len()];
        let mut dv = vec![0.0; q.len()];
        for (g, [lq, lk, lv]) in locals.iter().enumerate() {
            self.scatter(&mut dq, g, lq);
            self.scatter(&mut dk, g, lk);
            self.scatter(&mut dv, g, lv);
        }
        (dq, dk, dv)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fast_tanh_matches_std() {
        for i in -4000..=4000 {
            let z = i as f64 * 0.01;
            assert!((fast_tanh(z) - z.tanh()).abs() <= 4e-16, "{}", z);
        }
        assert_eq!(fast_tanh(1e6), 1.0);
        assert_eq!(fast_tanh(-1e6), -1.0);
        assert!((fast_tanh(1e-9) - 1e-9).abs() < 1e-24);
    }
}
