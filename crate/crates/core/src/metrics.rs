//! Field-level error metrics and spectral diagnostics.
//!
//! Wavenumbers are integers in cycles per domain along each axis; `|k|` is
//! their Euclidean magnitude. The spike score is this crate's quantification
//! of grid-aligned patch artifacts: excess power at harmonics of `H/p`
//! relative to a local median baseline.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{irfft2, rfft2, ComplexGrid, Tensor};

pub const VRMSE_EPS: f64 = 1e-7;
/// Half-width of the spike-score baseline window, in radial bins.
pub const SPIKE_WINDOW: usize = 5;

/// Per-channel VRMSE of one sample; every axis but the last is spatial.
pub fn vrmse(u: &Tensor, v: &Tensor, eps: f64) -> Result<Vec<f64>> {
    u.expect_same_shape("vrmse", v)?;
    let c = *u.shape().last().ok_or_else(|| Error::invalid("vrmse needs a channel axis"))?;
    let n = (u.len() / c) as f64;
    let mut mean = vec![0.0; c];
    for row in v.data().chunks(c) {
        for (m, x) in mean.iter_mut().zip(row) {
            *m += x;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut err = vec![0.0; c];
    let mut var = vec![0.0; c];
    for (ru, rv) in u.data().chunks(c).zip(v.data().chunks(c)) {
        for i in 0..c {
            err[i] += (ru[i] - rv[i]) * (ru[i] - rv[i]);
            var[i] += (rv[i] - mean[i]) * (rv[i] - mean[i]);
        }
    }
    Ok(err
        .iter()
        .zip(&var)
        .map(|(e, s)| {
            let num = (e / n).sqrt();
            if num == 0.0 {
                0.0
            } else {
                num / (s / n + eps).sqrt()
            }
        })
        .collect())
}

/// Per-channel VRMSE averaged over the samples of `[B, H, W, T, C]` fields;
/// each `(b, t)` slice is one sample.
pub fn vrmse_batch(u: &Tensor, v: &Tensor, eps: f64) -> Result<Vec<f64>> {
    u.expect_same_shape("vrmse_batch", v)?;
    let (b, t, c) = match *u.shape() {
        [b, _, _, t, c] => (b, t, c),
        _ => return Err(Error::invalid(format!("expected [B, H, W, T, C], got {:?}", u.shape()))),
    };
    let mut acc = vec![0.0; c];
    for bi in 0..b {
        for ti in 0..t {
            let su = frame(u, bi, ti)?;
            let sv = frame(v, bi, ti)?;
            for (a, x) in acc.iter_mut().zip(vrmse(&su, &sv, eps)?) {
                *a += x;
            }
        }
    }
    Ok(acc.iter().map(|a| a / (b * t) as f64).collect())
}

/// Slice `(b, t)` of a `[B, H, W, T, C]` field as `[H, W, C]`.
pub fn frame(x: &Tensor, b: usize, t: usize) -> Result<Tensor> {
    let s = x.shape();
    if s.len() != 5 {
        return Err(Error::invalid(format!("expected [B, H, W, T, C], got {:?}", s)));
    }
    let (h, w, c) = (s[1], s[2], s[4]);
    x.narrow(0, b, 1)?.narrow(3, t, 1)?.reshape(&[h, w, c])
}

/// Channel `c` of a `[H, W, C]` field.
pub fn channel(x: &Tensor, c: usize) -> Result<Tensor> {
    let s = x.shape();
    if s.len() != 3 || c >= s[2] {
        return Err(Error::invalid(format!("channel {} of {:?}", c, s)));
    }
    x.narrow(2, c, 1)?.reshape(&[s[0], s[1]])
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Three log-spaced `|k|` bands over `[1, k_max]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrequencyBands {
    /// `[1, r, r², k_max]` with `r = k_max^{1/3}`.
    pub edges: [f64; 4],
}

impl FrequencyBands {
    /// Band of a mode with magnitude `k`; `None` for the zero mode.
    pub fn band_of(&self, k: f64) -> Option<usize> {
        if k < self.edges[0] {
            None
        } else if k < self.edges[1] {
            Some(0)
        } else if k < self.edges[2] {
            Some(1)
        } else {
            Some(2)
        }
    }
}

pub fn log_bands(h: usize, w: usize) -> Result<FrequencyBands> {
    if h < 4 || w < 4 {
        return Err(Error::invalid(format!("grid {}x{} too small for bands", h, w)));
    }
    let k_max = (((h / 2) * (h / 2) + (w / 2) * (w / 2)) as f64).sqrt();
    let r = k_max.cbrt();
    Ok(FrequencyBands {
        edges: [1.0, r, r * r, k_max],
    })
}

fn magnitude(ky: i64, kx: i64) -> f64 {
    ((ky * ky + kx * kx) as f64).sqrt()
}

fn band_pass(spec: &ComplexGrid, bands: &FrequencyBands, band: usize) -> Tensor {
    let mut s = spec.clone();
    s.apply(|ky, kx| {
        if bands.band_of(magnitude(ky, kx)) == Some(band) {
            1.0.into()
        } else {
            0.0.into()
        }
    });
    irfft2(&s)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BandReport {
    /// `mean |u_B − v_B|²` per band.
    pub error: [f64; 3],
    /// `mean |v_B|²` per band.
    pub truth: [f64; 3],
    /// `error / truth`, `None` where the truth has no energy in the band.
    pub score: [Option<f64>; 3],
}

/// Relative energy below which a band of the truth counts as empty.
pub const EMPTY_BAND_TOL: f64 = 1e-20;

/// Band-filtered normalized MSE of one `[H, W]` field.
pub fn bsnmse(u: &Tensor, v: &Tensor, bands: &FrequencyBands) -> Result<BandReport> {
    u.expect_same_shape("bsnmse", v)?;
    let su = rfft2(u)?;
    let sv = rfft2(v)?;
    let total = v.norm_sq() / v.len() as f64;
    let mut rep = BandReport {
        error: [0.0; 3],
        truth: [0.0; 3],
        score: [None; 3],
    };
    for b in 0..3 {
        let ub = band_pass(&su, bands, b);
        let vb = band_pass(&sv, bands, b);
        let n = vb.len() as f64;
        rep.error[b] = ub.sub(&vb)?.norm_sq() / n;
        rep.truth[b] = vb.norm_sq() / n;
        if rep.truth[b] > EMPTY_BAND_TOL * total && rep.truth[b] > 0.0 {
            rep.score[b] = Some(rep.error[b] / rep.truth[b]);
        }
    }
    Ok(rep)
}

/// Radially averaged residual power spectrum.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectralReport {
    /// Mean `|r̂(k)|² / (H W)` over modes with `round(|k|) == i`.
    pub power: Vec<f64>,
    pub height: usize,
    pub width: usize,
}

impl SpectralReport {
    /// Elementwise mean of several reports on the same grid.
    pub fn average(reports: &[SpectralReport]) -> Result<SpectralReport> {
        let first = reports.first().ok_or_else(|| Error::invalid("no spectra to average"))?;
        let mut power = vec![0.0; first.power.len()];
        for r in reports {
            if r.power.len() != power.len() {
                return Err(Error::invalid("spectra have different lengths"));
            }
            for (a, p) in power.iter_mut().zip(&r.power) {
                *a += p;
            }
        }
        power.iter_mut().for_each(|p| *p /= reports.len() as f64);
        Ok(SpectralReport {
            power,
            height: first.height,
            width: first.width,
        })
    }
}

pub fn residual_spectrum(pred: &Tensor, truth: &Tensor) -> Result<SpectralReport> {
    let r = pred.sub(truth)?;
    power_spectrum(&r)
}

/// Radially averaged power spectrum of one `[H, W]` field.
pub fn power_spectrum(field: &Tensor) -> Result<SpectralReport> {
    let spec = rfft2(field)?;
    let (h, w) = spec.spatial_shape();
    let nbins = magnitude((h / 2) as i64, (w / 2) as i64).round() as usize + 1;
    let mut sum = vec![0.0; nbins];
    let mut count = vec![0.0; nbins];
    let half = w / 2 + 1;
    let norm = (h * w) as f64;
    for ky in 0..h {
        for kx in 0..half {
            let (sy, sx) = spec.wavenumber(ky, kx);
            let bin = magnitude(sy, sx).round() as usize;
            let m = spec.multiplicity(kx);
            sum[bin] += m * spec.get(ky, kx).norm_sqr() / norm;
            count[bin] += m;
        }
    }
    Ok(SpectralReport {
        power: sum
            .iter()
            .zip(&count)
            .map(|(s, c)| if *c > 0.0 { s / c } else { 0.0 })
            .collect(),
        height: h,
        width: w,
    })
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(|a, b| a.total_cmp(b));
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// Radial bins of the harmonics of `h / p` strictly below the Nyquist bin.
pub fn harmonic_bins(p: usize, h: usize) -> Result<Vec<usize>> {
    if p == 0 || h % p != 0 {
        return Err(Error::invalid(format!("patch size {} does not divide {}", p, h)));
    }
    let f = h / p;
    let bins: Vec<usize> = (1..).map(|m| m * f).take_while(|&k| k < h / 2).collect();
    if bins.len() < 2 {
        return Err(Error::invalid(format!(
            "patch size {} on a {}-point axis leaves {} harmonic(s) below Nyquist; need 2",
            p,
            h,
            bins.len()
        )));
    }
    Ok(bins)
}

/// `Σ_h max(0, P(k_h) − b_h) / b_h`, where `b_h` is the median of `P` over
/// `SPIKE_WINDOW` bins either side of `k_h` (excluding `k_h` and DC) plus a
/// floor of `1e-12 · mean(P)`.
pub fn harmonic_spike_score(report: &SpectralReport, p: usize, h: usize) -> Result<f64> {
    let bins = harmonic_bins(p, h)?;
    let n = report.power.len();
    let mean_p = report.power.iter().sum::<f64>() / n as f64;
    if mean_p == 0.0 {
        return Ok(0.0);
    }
    let floor = 1e-12 * mean_p;
    let mut score = 0.0;
    for &k in &bins {
        if k >= n {
            break;
        }
        let lo = k.saturating_sub(SPIKE_WINDOW).max(1);
        let hi = (k + SPIKE_WINDOW).min(n - 1);
        let window: Vec<f64> = (lo..=hi).filter(|&i| i != k).map(|i| report.power[i]).collect();
        let base = median(window) + floor;
        score += (report.power[k] - base).max(0.0) / base;
    }
    Ok(score)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vrmse_basics() {
        let v = Tensor::from_fn(&[4, 4, 1], |i| (i as f64).sin());
        assert_eq!(vrmse(&v, &v, VRMSE_EPS).unwrap(), vec![0.0]);
        let m = v.sum() / 16.0;
        let u = Tensor::full(&[4, 4, 1], m);
        let r = vrmse(&u, &v, VRMSE_EPS).unwrap()[0];
        assert!((r - 1.0).abs() < 1e-6);
        let c = Tensor::full(&[4, 4, 1], 3.0);
        assert_eq!(vrmse(&c, &c, VRMSE_EPS).unwrap(), vec![0.0]);
    }

    #[test]
    fn band_edges_64() {
        let b = log_bands(64, 64).unwrap();
        let k_max = (2.0f64 * 32.0 * 32.0).sqrt();
        let r = k_max.cbrt();
        assert!((b.edges[1] - r).abs() < 1e-12);
        assert!((b.edges[2] - r * r).abs() < 1e-12);
        assert_eq!(b.band_of(0.0), None);
        assert_eq!(b.band_of(1.0), Some(0));
        assert_eq!(b.band_of(k_max), Some(2));
        assert!(log_bands(2, 8).is_err());
    }

    #[test]
    fn harmonic_bin_table() {
        assert_eq!(harmonic_bins(16, 64).unwrap(), vec![4, 8, 12, 16, 20, 24, 28]);
        assert_eq!(harmonic_bins(8, 64).unwrap(), vec![8, 16, 24]);
        assert!(harmonic_bins(4, 64).is_err());
        assert!(harmonic_bins(5, 64).is_err());
    }

    #[test]
    fn flat_spectrum_scores_zero() {
        let r = SpectralReport {
            power: vec![1.0; 46],
            height: 64,
            width: 64,
        };
        assert_eq!(harmonic_spike_score(&r, 16, 64).unwrap(), 0.0);
    }

    #[test]
    fn zero_residual_spectrum() {
        let x = Tensor::from_fn(&[32, 32], |i| i as f64);
        let r = residual_spectrum(&x, &x).unwrap();
        assert!(r.power.iter().all(|&p| p == 0.0));
        assert_eq!(harmonic_spike_score(&r, 8, 32).unwrap(), 0.0);
    }
}
