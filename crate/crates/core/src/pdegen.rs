//! Periodic 2D advection-diffusion trajectories and their on-disk format.
//!
//! `∂u/∂t + c·∇u = ν ∇²u` on an `H × W` periodic grid with unit spacing is
//! advanced exactly in Fourier space: `û(κ) ← û(κ)·exp((−i c·κ − ν|κ|²) dt)`
//! with `κ = 2π k / N` per axis. `x` runs along the width axis. On even
//! grids the Nyquist wavenumber is treated as zero in the advection term, so
//! steps compose exactly (`step(dt)∘step(dt) = step(2 dt)`).
//!
//! Initial conditions are filtered white noise with modal power `∝ |k|^−slope`
//! for `k_min ≤ |k| ≤ k_max` (cycles per domain), scaled to zero mean and unit
//! standard deviation. Each channel is an independent field.

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use rustfft::num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::container::{bytes_to_f32_widened, f32_to_bytes, read_container, write_container};
use crate::error::{Error, Result};
use crate::tensor::{irfft2, rfft2, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PDEParams {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// `(c_x, c_y)` in grid cells per unit time.
    pub velocity: (f64, f64),
    pub diffusivity: f64,
    pub dt: f64,
    /// Frames per trajectory, including the initial condition.
    pub steps: usize,
    pub ic_slope: f64,
    pub ic_k_min: f64,
    pub ic_k_max: f64,
}

impl Default for PDEParams {
    fn default() -> Self {
        PDEParams {
            height: 64,
            width: 64,
            channels: 1,
            velocity: (0.7, 0.4),
            diffusivity: 0.01,
            dt: 1.0,
            steps: 60,
            ic_slope: 2.0,
            ic_k_min: 1.0,
            ic_k_max: 20.0,
        }
    }
}

impl PDEParams {
    pub fn validate(&self) -> Result<()> {
        let finite = [
            self.velocity.0,
            self.velocity.1,
            self.diffusivity,
            self.dt,
            self.ic_slope,
            self.ic_k_min,
            self.ic_k_max,
        ]
        .iter()
        .all(|v| v.is_finite());
        if !finite {
            return Err(Error::invalid("PDE parameters must be finite"));
        }
        if self.height < 2 || self.width < 2 || self.channels == 0 || self.steps < 2 {
            return Err(Error::invalid("grid must be at least 2x2 with >= 1 channel and >= 2 steps"));
        }
        if self.diffusivity < 0.0 || self.dt <= 0.0 {
            return Err(Error::invalid("diffusivity must be >= 0 and dt > 0"));
        }
        if !(self.ic_k_min > 0.0 && self.ic_k_max >= self.ic_k_min) {
            return Err(Error::invalid("need 0 < ic_k_min <= ic_k_max"));
        }
        Ok(())
    }
}

/// Advance one `[H, W]` field by `p.dt`.
pub fn step_spectral(u: &Tensor, p: &PDEParams) -> Result<Tensor> {
    step_by(u, p, p.dt)
}

fn step_by(u: &Tensor, p: &PDEParams, dt: f64) -> Result<Tensor> {
    let mut spec = rfft2(u)?;
    let (h, w) = spec.spatial_shape();
    let tau = std::f64::consts::TAU;
    spec.apply(|ky, kx| {
        let kappa_y = tau * ky as f64 / h as f64;
        let kappa_x = tau * kx as f64 / w as f64;
        let k2 = kappa_x * kappa_x + kappa_y * kappa_y;
        // Nyquist modes carry no first-derivative information on a real grid
        let adv_y = if 2 * ky.unsigned_abs() as usize == h { 0.0 } else { kappa_y };
        let adv_x = if 2 * kx.unsigned_abs() as usize == w { 0.0 } else { kappa_x };
        let phase = -(p.velocity.0 * adv_x + p.velocity.1 * adv_y) * dt;
        Complex64::from_polar((-p.diffusivity * k2 * dt).exp(), phase)
    });
    Ok(irfft2(&spec))
}

/// Band-limited random field `[H, W]` with unit standard deviation.
pub fn initial_condition(p: &PDEParams, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    let (h, w) = (p.height, p.width);
    let noise = Tensor::randn(&[h, w], 1.0, rng);
    let mut spec = rfft2(&noise)?;
    spec.apply(|ky, kx| {
        let k = ((ky * ky + kx * kx) as f64).sqrt();
        if k >= p.ic_k_min && k <= p.ic_k_max {
            Complex64::new(k.powf(-p.ic_slope / 2.0), 0.0)
        } else {
            Complex64::new(0.0, 0.0)
        }
    });
    let u = irfft2(&spec);
    let n = u.len() as f64;
    let mean = u.sum() / n;
    let std = (u.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt();
    if std == 0.0 {
        return Err(Error::invalid("initial-condition band contains no modes"));
    }
    Ok(u.map(|v| (v - mean) / std))
}

/// One trajectory `[steps, H, W, C]`.
pub fn generate_trajectory(p: &PDEParams, seed: u64, index: u64) -> Result<Tensor> {
    p.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    let (h, w, c) = (p.height, p.width, p.channels);
    let mut out = Tensor::zeros(&[p.steps, h, w, c]);
    for ch in 0..c {
        let mut u = initial_condition(p, &mut rng)?;
        for t in 0..p.steps {
            if t > 0 {
                u = step_spectral(&u, p)?;
            }
            let frame = &mut out.data_mut()[t * h * w * c..(t + 1) * h * w * c];
            for (i, v) in u.data().iter().enumerate() {
                frame[i * c + ch] = *v;
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitTag {
    Train,
    Valid,
    Test,
}

impl SplitTag {
    pub const ALL: [SplitTag; 3] = [SplitTag::Train, SplitTag::Valid, SplitTag::Test];

    pub fn file_name(self) -> &'static str {
        match self {
            SplitTag::Train => "train.flxd",
            SplitTag::Valid => "valid.flxd",
            SplitTag::Test => "test.flxd",
        }
    }
}

/// Per-channel z-score statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    /// Statistics over every value of `data` with channels on the last axis.
    pub fn from_data(data: &Tensor) -> Self {
        let c = *data.shape().last().expect("non-scalar data");
        let n = (data.len() / c) as f64;
        let mut mean = vec![0.0; c];
        for row in data.data().chunks(c) {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; c];
        for row in data.data().chunks(c) {
            for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let std = var.iter().map(|s| (s / n).sqrt().max(1e-12)).collect();
        NormStats { mean, std }
    }

    pub fn normalize(&self, data: &Tensor) -> Tensor {
        let c = self.mean.len();
        let mut out = data.clone();
        for row in out.data_mut().chunks_mut(c) {
            for (i, v) in row.iter_mut().enumerate() {
                *v = (*v - self.mean[i]) / self.std[i];
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub kind: String,
    pub split: SplitTag,
    pub dtype: String,
    /// `[n_traj, steps, H, W, C]`
    pub shape: Vec<usize>,
    pub params: PDEParams,
    pub seed: u64,
    pub trajectory_ids: Vec<u64>,
    pub stats: NormStats,
}

/// One split: raw fields `[n, steps, H, W, C]` (f32-rounded) plus metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub tag: SplitTag,
    pub data: Tensor,
    pub trajectory_ids: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryDataset {
    pub params: PDEParams,
    pub seed: u64,
    pub train: Split,
    pub valid: Split,
    pub test: Split,
    /// Computed on the train split.
    pub stats: NormStats,
}

/// 80/10/10 split sizes by trajectory.
pub fn split_sizes(n_traj: usize) -> Result<(usize, usize, usize)> {
    if n_traj < 10 {
        return Err(Error::invalid(format!("need at least 10 trajectories for an 80/10/10 split, got {}", n_traj)));
    }
    let train = n_traj * 8 / 10;
    let valid = n_traj / 10;
    Ok((train, valid, n_traj - train - valid))
}

fn round_f32(t: Tensor) -> Tensor {
    t.map(|v| v as f32 as f64)
}

pub fn generate_dataset(p: &PDEParams, n_traj: usize, seed: u64) -> Result<TrajectoryDataset> {
    p.validate()?;
    let (n_train, n_valid, _) = split_sizes(n_traj)?;
    let trajs: Vec<Tensor> = (0..n_traj as u64)
        .into_par_iter()
        .map(|i| generate_trajectory(p, seed, i).map(round_f32))
        .collect::<Result<_>>()?;
    let make = |tag, range: std::ops::Range<usize>| -> Result<Split> {
        let parts: Vec<Tensor> = trajs[range.clone()]
            .iter()
            .map(|t| {
                let mut s = vec![1];
                s.extend_from_slice(t.shape());
                t.reshaped(&s)
            })
            .collect::<Result<_>>()?;
        let refs: Vec<&Tensor> = parts.iter().collect();
        Ok(Split {
            tag,
            data: Tensor::concat(&refs, 0)?,
            trajectory_ids: range.map(|i| i as u64).collect(),
        })
    };
    let train = make(SplitTag::Train, 0..n_train)?;
    let valid = make(SplitTag::Valid, n_train..n_train + n_valid)?;
    let test = make(SplitTag::Test, n_train + n_valid..n_traj)?;
    let stats = NormStats::from_data(&train.data);
    Ok(TrajectoryDataset {
        params: p.clone(),
        seed,
        train,
        valid,
        test,
        stats,
    })
}

impl TrajectoryDataset {
    pub fn split(&self, tag: SplitTag) -> &Split {
        match tag {
            SplitTag::Train => &self.train,
            SplitTag::Valid => &self.valid,
            SplitTag::Test => &self.test,
        }
    }

    pub fn save(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir)?;
        let mut paths = Vec::new();
        for tag in SplitTag::ALL {
            let s = self.split(tag);
            let header = DatasetHeader {
                kind: "dataset".into(),
                split: tag,
                dtype: "f32".into(),
                shape: s.data.shape().to_vec(),
                params: self.params.clone(),
                seed: self.seed,
                trajectory_ids: s.trajectory_ids.clone(),
                stats: self.stats.clone(),
            };
            let path = dir.join(tag.file_name());
            write_container(&path, &header, &f32_to_bytes(s.data.data()))?;
            paths.push(path);
        }
        Ok(paths)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let mut splits = Vec::new();
        let mut meta: Option<(PDEParams, u64, NormStats)> = None;
        for tag in SplitTag::ALL {
            let (h, data) = load_split_file(&dir.join(tag.file_name()))?;
            if h.split != tag {
                return Err(Error::Format(format!("{} holds split {:?}", tag.file_name(), h.split)));
            }
            match &meta {
                None => meta = Some((h.params.clone(), h.seed, h.stats.clone())),
                Some((p, s, st)) if *p != h.params || *s != h.seed || *st != h.stats => {
                    return Err(Error::Format("dataset splits disagree on metadata".into()))
                }
                _ => {}
            }
            splits.push(Split {
                tag,
                data,
                trajectory_ids: h.trajectory_ids,
            });
        }
        let (params, seed, stats) = meta.expect("three splits read");
        let test = splits.pop().expect("test");
        let valid = splits.pop().expect("valid");
        let train = splits.pop().expect("train");
        Ok(TrajectoryDataset {
            params,
            seed,
            train,
            valid,
            test,
            stats,
        })
    }
}

/// Read one dataset-format file (also used for rollout outputs).
pub fn load_split_file(path: &Path) -> Result<(DatasetHeader, Tensor)> {
    let (h, body): (DatasetHeader, Vec<u8>) = read_container(path)?;
    if h.kind != "dataset" || h.dtype != "f32" {
        return Err(Error::Format(format!("{}: not an f32 dataset file", path.display())));
    }
    let data = Tensor::new(h.shape.clone(), bytes_to_f32_widened(&body)?)
        .map_err(|_| Error::Format(format!("{}: body does not match shape {:?}", path.display(), h.shape)))?;
    Ok((h, data))
}

/// Normalized training windows drawn from one split.
#[derive(Clone, Debug)]
pub struct WindowSet {
    /// z-scored `[n, steps, H, W, C]`
    pub data: Tensor,
    pub context: usize,
}

impl WindowSet {
    pub fn new(split: &Split, stats: &NormStats, context: usize) -> Result<Self> {
        let steps = split.data.shape()[1];
        if context == 0 || context >= steps {
            return Err(Error::invalid(format!(
                "context {} needs more than that many frames, trajectories have {}",
                context, steps
            )));
        }
        Ok(WindowSet {
            data: stats.normalize(&split.data),
            context,
        })
    }

    pub fn n_traj(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn steps(&self) -> usize {
        self.data.shape()[1]
    }

    /// Windows per trajectory (start frames `0..=steps − context − 1`).
    pub fn starts_per_traj(&self) -> usize {
        self.steps() - self.context
    }

    pub fn len(&self) -> usize {
        self.n_traj() * self.starts_per_traj()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Frames `[start, start + len)` of trajectory `traj` as `[H, W, len, C]`.
    pub fn frames(&self, traj: usize, start: usize, len: usize) -> Result<Tensor> {
        let s = self.data.shape();
        let (h, w, c) = (s[2], s[3], s[4]);
        let one = self.data.narrow(0, traj, 1)?.narrow(1, start, len)?;
        one.reshape(&[len, h, w, c])?.permute(&[1, 2, 0, 3])
    }

    /// Stack windows into context `[B, H, W, T, C]` and target `[B, H, W, 1, C]`.
    pub fn batch(&self, windows: &[(usize, usize)]) -> Result<(Tensor, Tensor)> {
        let s = self.data.shape();
        let (h, w, c) = (s[2], s[3], s[4]);
        let t = self.context;
        let mut ctx = Vec::with_capacity(windows.len() * h * w * t * c);
        let mut tgt = Vec::with_capacity(windows.len() * h * w * c);
        for &(traj, start) in windows {
            ctx.extend_from_slice(self.frames(traj, start, t)?.data());
            tgt.extend_from_slice(self.frames(traj, start + t, 1)?.data());
        }
        Ok((
            Tensor::new(vec![windows.len(), h, w, t, c], ctx)?,
            Tensor::new(vec![windows.len(), h, w, 1, c], tgt)?,
        ))
    }

    /// Window `i` in `(traj, start)` form.
    pub fn window(&self, i: usize) -> (usize, usize) {
        (i / self.starts_per_traj(), i % self.starts_per_traj())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_table() {
        assert_eq!(split_sizes(20).unwrap(), (16, 2, 2));
        assert_eq!(split_sizes(10).unwrap(), (8, 1, 1));
        assert!(split_sizes(9).is_err());
    }

    #[test]
    fn ic_is_standardized() {
        let p = PDEParams::default();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let u = initial_condition(&p, &mut rng).unwrap();
        let n = u.len() as f64;
        assert!((u.sum() / n).abs() < 1e-12);
        assert!((u.norm_sq() / n - 1.0).abs() < 1e-12);
    }

    #[test]
    fn invalid_params_rejected() {
        let p = PDEParams {
            diffusivity: -1.0,
            ..PDEParams::default()
        };
        assert!(p.validate().is_err());
        let p = PDEParams {
            dt: f64::NAN,
            ..PDEParams::default()
        };
        assert!(p.validate().is_err());
    }
}
