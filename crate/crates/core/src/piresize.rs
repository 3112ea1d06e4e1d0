//! Pseudoinverse kernel resizing.
//!
//! A kernel `w_base` of size `k_base` is mapped to size `k` so that a patch
//! `x` and its bicubically resized copy `B x` produce the same token:
//! `⟨x, w_base⟩ ≈ ⟨B x, w⟩`. Minimizing the expected squared mismatch under
//! patch covariance `Σ` gives `w = (√Σ Bᵀ)† √Σ w_base`, which for `Σ = I`
//! is `(Bᵀ)† w_base`. When `k ≥ k_base` the match is exact for every patch.
//!
//! Bicubic resampling uses the Catmull-Rom kernel (`a = −0.5`), the
//! half-pixel (align-corners = false) grid and edge clamping. The 2D operator
//! is the Kronecker product of the 1D matrices.

use std::collections::HashMap;
use std::hash::{Hash, Hasher};
use std::sync::{Arc, RwLock};

use crate::error::{Error, Result};
use crate::tensor::{matmul, Tensor};

/// Default relative singular-value cutoff for [`pinv`].
pub const DEFAULT_RCOND: f64 = 1e-10;

/// Catmull-Rom cubic convolution weight.
pub fn cubic_weight(t: f64) -> f64 {
    const A: f64 = -0.5;
    let t = t.abs();
    if t <= 1.0 {
        ((A + 2.0) * t - (A + 3.0)) * t * t + 1.0
    } else if t < 2.0 {
        ((A * t - 5.0 * A) * t + 8.0 * A) * t - 4.0 * A
    } else {
        0.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ResizeMatrix {
    pub k_from: usize,
    pub k_to: usize,
    /// `[k_to, k_from]`
    pub b1d: Tensor,
    /// `[k_to², k_from²]`, row-major patch flattening on both sides.
    pub b2d: Tensor,
}

fn resize_1d(k_from: usize, k_to: usize) -> Tensor {
    let mut b = Tensor::zeros(&[k_to, k_from]);
    let scale = k_from as f64 / k_to as f64;
    for o in 0..k_to {
        let src = (o as f64 + 0.5) * scale - 0.5;
        let base = src.floor();
        let frac = src - base;
        for tap in -1i64..=2 {
            let w = cubic_weight(frac - tap as f64);
            let idx = (base as i64 + tap).clamp(0, k_from as i64 - 1) as usize;
            let cur = b.at(&[o, idx]);
            b.set(&[o, idx], cur + w);
        }
    }
    b
}

fn kron(a: &Tensor, b: &Tensor) -> Tensor {
    let (ar, ac) = (a.shape()[0], a.shape()[1]);
    let (br, bc) = (b.shape()[0], b.shape()[1]);
    let mut out = Tensor::zeros(&[ar * br, ac * bc]);
    for i in 0..ar {
        for j in 0..ac {
            let aij = a.at(&[i, j]);
            if aij == 0.0 {
                continue;
            }
            for k in 0..br {
                for l in 0..bc {
                    out.set(&[i * br + k, j * bc + l], aij * b.at(&[k, l]));
                }
            }
        }
    }
    out
}

/// Bicubic resize operator taking a `k_from × k_from` patch to `k_to × k_to`.
pub fn resize_matrix(k_from: usize, k_to: usize) -> Result<ResizeMatrix> {
    if k_from < 2 || k_to < 2 {
        return Err(Error::invalid(format!(
            "bicubic resize needs at least 2 samples per axis, got {} -> {}",
            k_from, k_to
        )));
    }
    let b1d = resize_1d(k_from, k_to);
    let b2d = kron(&b1d, &b1d);
    Ok(ResizeMatrix {
        k_from,
        k_to,
        b1d,
        b2d,
    })
}

/// Thin SVD `a = u · diag(s) · vᵀ` by one-sided Jacobi rotations.
/// Returns `u: [m, r]`, `s: [r]`, `v: [n, r]` with `r = min(m, n)`.
pub fn svd(a: &Tensor) -> Result<(Tensor, Vec<f64>, Tensor)> {
    let (m, n) = match *a.shape() {
        [m, n] => (m, n),
        _ => return Err(Error::invalid("svd expects a matrix")),
    };
    if !a.is_finite() {
        return Err(Error::NonFinite("svd input".into()));
    }
    if m < n {
        let at = a.permute(&[1, 0])?;
        let (u, s, v) = svd(&at)?;
        return Ok((v, s, u));
    }
    // column-major working copies
    let mut cols: Vec<Vec<f64>> = (0..n).map(|j| (0..m).map(|i| a.at(&[i, j])).collect()).collect();
    let mut vcols: Vec<Vec<f64>> = (0..n)
        .map(|j| (0..n).map(|i| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();
    let eps = f64::EPSILON;
    for _sweep in 0..80 {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let (alpha, beta, gamma) = {
                    let (cp, cq) = (&cols[p], &cols[q]);
                    let mut al = 0.0;
                    let mut be = 0.0;
                    let mut ga = 0.0;
                    for i in 0..m {
                        al += cp[i] * cp[i];
                        be += cq[i] * cq[i];
                        ga += cp[i] * cq[i];
                    }
                    (al, be, ga)
                };
                if gamma == 0.0 || gamma.abs() <= eps * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut cols, p, q, c, s);
                rotate(&mut vcols, p, q, c, s);
            }
        }
        if !rotated {
            break;
        }
    }
    let mut u = Tensor::zeros(&[m, n]);
    let mut v = Tensor::zeros(&[n, n]);
    let mut sv = Vec::with_capacity(n);
    for j in 0..n {
        let norm = cols[j].iter().map(|x| x * x).sum::<f64>().sqrt();
        sv.push(norm);
        for i in 0..m {
            u.set(&[i, j], if norm > 0.0 { cols[j][i] / norm } else { 0.0 });
        }
        for i in 0..n {
            v.set(&[i, j], vcols[j][i]);
        }
    }
    Ok((u, sv, v))
}

fn rotate(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (lo, hi) = cols.split_at_mut(q);
    let (cp, cq) = (&mut lo[p], &mut hi[0]);
    for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
        let (a, b) = (*x, *y);
        *x = c * a - s * b;
        *y = s * a + c * b;
    }
}

/// Moore-Penrose pseudoinverse; singular values at or below
/// `rcond · σ_max` are treated as zero.
pub fn pinv(m: &Tensor, rcond: f64) -> Result<Tensor> {
    let (rows, cols) = match *m.shape() {
        [r, c] => (r, c),
        _ => return Err(Error::invalid("pinv expects a matrix")),
    };
    let (u, s, v) = svd(m)?;
    let r = s.len();
    let smax = s.iter().cloned().fold(0.0, f64::max);
    let cutoff = rcond * smax;
    let mut out = Tensor::zeros(&[cols, rows]);
    for k in 0..r {
        if s[k] <= cutoff || s[k] == 0.0 {
            continue;
        }
        let inv = 1.0 / s[k];
        for i in 0..cols {
            let vik = v.at(&[i, k]) * inv;
            if vik == 0.0 {
                continue;
            }
            for j in 0..rows {
                let cur = out.at(&[i, j]);
                out.set(&[i, j], cur + vik * u.at(&[j, k]));
            }
        }
    }
    Ok(out)
}

/// Principal square root of a symmetric positive semidefinite matrix.
pub fn psd_sqrt(sigma: &Tensor) -> Result<Tensor> {
    let n = match *sigma.shape() {
        [a, b] if a == b => a,
        _ => return Err(Error::invalid("covariance must be square")),
    };
    let scale = sigma.max_abs().max(f64::MIN_POSITIVE);
    for i in 0..n {
        for j in 0..i {
            if (sigma.at(&[i, j]) - sigma.at(&[j, i])).abs() > 1e-10 * scale {
                return Err(Error::invalid("covariance is not symmetric"));
            }
        }
    }
    let (_, s, v) = svd(sigma)?;
    // For a symmetric matrix the Rayleigh quotient of each right singular
    // vector is the matching eigenvalue, which exposes negative directions.
    let sv = matmul(sigma, &v)?;
    for k in 0..n {
        let lambda: f64 = (0..n).map(|i| v.at(&[i, k]) * sv.at(&[i, k])).sum();
        if lambda < -1e-10 * scale {
            return Err(Error::invalid(format!(
                "covariance is not positive semidefinite (eigenvalue {:.3e})",
                lambda
            )));
        }
    }
    let mut out = Tensor::zeros(&[n, n]);
    for k in 0..n {
        let r = s[k].sqrt();
        for i in 0..n {
            let a = v.at(&[i, k]) * r;
            for j in 0..n {
                let cur = out.at(&[i, j]);
                out.set(&[i, j], cur + a * v.at(&[j, k]));
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PIResizeConfig {
    pub k_base: usize,
    /// Patch covariance over flattened `k_base × k_base` patches; `None` is identity.
    pub covariance: Option<Tensor>,
    pub pinv_rcond: f64,
}

impl PIResizeConfig {
    pub fn new(k_base: usize) -> Self {
        PIResizeConfig {
            k_base,
            covariance: None,
            pinv_rcond: DEFAULT_RCOND,
        }
    }

    pub fn with_covariance(mut self, sigma: Tensor) -> Self {
        self.covariance = Some(sigma);
        self
    }

    fn covariance_key(&self) -> Option<u64> {
        self.covariance.as_ref().map(|s| {
            let mut h = std::collections::hash_map::DefaultHasher::new();
            s.shape().hash(&mut h);
            for v in s.data() {
                v.to_bits().hash(&mut h);
            }
            h.finish()
        })
    }
}

/// The linear map `P: [k², k_base²]` with `vec(w) = P · vec(w_base)` for each
/// input/output channel pair.
pub fn resize_operator(k_target: usize, cfg: &PIResizeConfig) -> Result<Tensor> {
    let kb = cfg.k_base;
    if k_target == kb && cfg.covariance.is_none() {
        return Ok(identity(kb * kb));
    }
    let b = resize_matrix(kb, k_target)?;
    let bt = b.b2d.permute(&[1, 0])?; // [kb², k²]
    match &cfg.covariance {
        None => pinv(&bt, cfg.pinv_rcond),
        Some(sigma) => {
            if sigma.shape() != [kb * kb, kb * kb] {
                return Err(Error::shape("pi_resize covariance", sigma.shape(), &[kb * kb, kb * kb]));
            }
            let root = psd_sqrt(sigma)?;
            let weighted = matmul(&root, &bt)?;
            matmul(&pinv(&weighted, cfg.pinv_rcond)?, &root)
        }
    }
}

fn identity(n: usize) -> Tensor {
    Tensor::from_fn(&[n, n], |i| if i / n == i % n { 1.0 } else { 0.0 })
}

/// Apply a resize operator to a `[k_base, k_base, c_in, c_out]` kernel.
pub fn apply_operator(op: &Tensor, w_base: &Tensor, k_target: usize) -> Result<Tensor> {
    let s = w_base.shape();
    if s.len() != 4 || s[0] != s[1] || op.shape() != [k_target * k_target, s[0] * s[1]] {
        return Err(Error::shape("pi_resize_kernel", op.shape(), s));
    }
    let flat = w_base.reshaped(&[s[0] * s[1], s[2] * s[3]])?;
    matmul(op, &flat)?.reshape(&[k_target, k_target, s[2], s[3]])
}

/// PI-resize a `[k_base, k_base, c_in, c_out]` kernel to `k_target`.
///
/// With identity covariance and `k_target == k_base` the input is returned unchanged.
pub fn pi_resize_kernel(w_base: &Tensor, k_target: usize, cfg: &PIResizeConfig) -> Result<Tensor> {
    if w_base.shape().first() != Some(&cfg.k_base) {
        return Err(Error::invalid(format!(
            "kernel {:?} does not match k_base {}",
            w_base.shape(),
            cfg.k_base
        )));
    }
    if !w_base.is_finite() {
        return Err(Error::NonFinite("base kernel".into()));
    }
    if k_target == cfg.k_base && cfg.covariance.is_none() {
        return Ok(w_base.clone());
    }
    apply_operator(&resize_operator(k_target, cfg)?, w_base, k_target)
}

type CacheKey = (usize, usize, Option<u64>);

/// Shared cache of resize operators keyed by `(k_base, k_target, Σ)`.
/// Kernels themselves change every optimizer step and are not cached.
#[derive(Default, Debug)]
pub struct ResizeCache {
    ops: RwLock<HashMap<CacheKey, Arc<Tensor>>>,
}

impl ResizeCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn operator(&self, k_target: usize, cfg: &PIResizeConfig) -> Result<Arc<Tensor>> {
        let key = (cfg.k_base, k_target, cfg.covariance_key());
        if let Some(op) = self.ops.read().expect("resize cache poisoned").get(&key) {
            return Ok(op.clone());
        }
        let op = Arc::new(resize_operator(k_target, cfg)?);
        let mut w = self.ops.write().expect("resize cache poisoned");
        Ok(w.entry(key).or_insert(op).clone())
    }

    pub fn len(&self) -> usize {
        self.ops.read().expect("resize cache poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}
