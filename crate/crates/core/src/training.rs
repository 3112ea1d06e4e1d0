//! Next-step training with a per-step sampled patch/stride size.
//!
//! The loss is NMSE on the change of the last frame. All samples of one
//! optimizer step share one size. Every epoch ends with a validation pass at
//! every size of the model's size set; the parameters with the lowest mean
//! validation VRMSE are kept.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use rand::distr::{weighted::WeightedIndex, Distribution};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Graph, ParameterSet};
use crate::error::{Error, Result};
use crate::metrics::{vrmse_batch, VRMSE_EPS};
use crate::pdegen::WindowSet;
use crate::processor::SurrogateModel;
use crate::tensor::Tensor;

pub const LOSS_EPS: f64 = 1e-7;

/// Discrete distribution over sizes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SizeDistribution {
    pub sizes: Vec<usize>,
    pub probs: Vec<f64>,
}

impl SizeDistribution {
    pub fn uniform(sizes: &[usize]) -> Self {
        SizeDistribution {
            sizes: sizes.to_vec(),
            probs: vec![1.0 / sizes.len() as f64; sizes.len()],
        }
    }

    pub fn single(size: usize) -> Self {
        SizeDistribution {
            sizes: vec![size],
            probs: vec![1.0],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = !self.sizes.is_empty()
            && self.sizes.len() == self.probs.len()
            && self.probs.iter().all(|p| p.is_finite() && *p >= 0.0)
            && (self.probs.iter().sum::<f64>() - 1.0).abs() < 1e-9;
        if !ok {
            return Err(Error::invalid(format!(
                "size distribution {:?} / {:?} must be non-empty with probabilities summing to 1",
                self.sizes, self.probs
            )));
        }
        Ok(())
    }
}

pub fn sample_size<R: Rng + ?Sized>(rng: &mut R, dist: &SizeDistribution) -> Result<usize> {
    if dist.sizes.len() == 1 {
        return Ok(dist.sizes[0]);
    }
    let idx = WeightedIndex::new(&dist.probs)
        .map_err(|e| Error::invalid(format!("size distribution: {}", e)))?;
    Ok(dist.sizes[idx.sample(rng)])
}

/// `mean_{b,c} [ mean_space (p − t)² / (mean_space t² + eps) ]` on `[B, ..., C]` fields.
pub fn nmse_loss(pred: &Tensor, target: &Tensor, eps: f64) -> Result<f64> {
    let mut g = Graph::new();
    let p = g.input(pred.clone());
    let l = g.nmse(p, target, eps)?;
    Ok(g.value(l).item())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Training samples per epoch.
    pub epoch_size: usize,
    pub size_dist: SizeDistribution,
    pub seed: u64,
    /// Validation windows per size per epoch (evenly spaced); `None` uses all.
    pub val_windows: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            weight_decay: 1e-4,
            batch_size: 8,
            epochs: 10,
            epoch_size: 512,
            size_dist: SizeDistribution::uniform(&[4, 8, 16]),
            seed: 0,
            val_windows: Some(32),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) || !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::invalid("lr and weight_decay must be finite and non-negative"));
        }
        if self.batch_size == 0 || self.epochs == 0 || self.epoch_size < self.batch_size {
            return Err(Error::invalid("need batch_size >= 1, epochs >= 1 and epoch_size >= batch_size"));
        }
        self.size_dist.validate()
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.epoch_size / self.batch_size
    }

    /// Samples this configuration will consume in total.
    pub fn total_samples(&self) -> usize {
        self.epochs * self.steps_per_epoch() * self.batch_size
    }

    /// Same schedule with `factor` times the epochs; used to give a flexible
    /// model the combined budget of `factor` fixed-size models.
    pub fn scaled_budget(&self, factor: usize) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs * factor,
            ..self.clone()
        }
    }
}

/// Adam with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: i32,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        AdamW {
            lr,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// `p ← p − lr·wd·p − lr·m̂/(√v̂ + eps)`; parameters without a gradient
    /// are treated as having a zero gradient.
    pub fn step(&mut self, params: &mut ParameterSet, grads: &Gradients) -> Result<()> {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step);
        let bc2 = 1.0 - self.beta2.powi(self.step);
        let decay = self.lr * self.weight_decay;
        for (name, p) in params.iter_mut() {
            let m = self.m.entry(name.to_string()).or_insert_with(|| Tensor::zeros(p.shape()));
            let v = self.v.entry(name.to_string()).or_insert_with(|| Tensor::zeros(p.shape()));
            let g = grads.get(name);
            if let Some(g) = g {
                p.expect_same_shape("adamw", g)?;
            }
            let (pd, md, vd) = (p.data_mut(), m.data_mut(), v.data_mut());
            for i in 0..pd.len() {
                let gi = g.map_or(0.0, |g| g.data()[i]);
                md[i] = self.beta1 * md[i] + (1.0 - self.beta1) * gi;
                vd[i] = self.beta2 * vd[i] + (1.0 - self.beta2) * gi * gi;
                let update = (md[i] / bc1) / ((vd[i] / bc2).sqrt() + self.eps);
                pd[i] = pd[i] - decay * pd[i] - self.lr * update;
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    /// Mean validation VRMSE (over windows and channels) per size.
    pub val_vrmse: BTreeMap<usize, f64>,
    pub samples_seen: usize,
    pub wall_seconds: f64,
}

impl EpochRecord {
    pub fn mean_val(&self) -> f64 {
        self.val_vrmse.values().sum::<f64>() / self.val_vrmse.len() as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainStats {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val: f64,
    pub total_samples: usize,
    /// Optimizer steps taken at each size.
    pub size_counts: BTreeMap<usize, usize>,
    pub loss_curve: Vec<f64>,
}

impl TrainStats {
    /// `epoch,size,val_vrmse,train_loss,samples_seen,wall_seconds`
    pub fn csv_rows(&self) -> Vec<(usize, usize, f64, f64, usize, f64)> {
        let mut rows = Vec::new();
        for e in &self.epochs {
            for (&s, &v) in &e.val_vrmse {
                rows.push((e.epoch, s, v, e.train_loss, e.samples_seen, e.wall_seconds));
            }
        }
        rows
    }
}

/// Evenly spaced window indices, at most `cap`.
pub fn spaced_windows(set: &WindowSet, cap: Option<usize>) -> Vec<(usize, usize)> {
    let n = set.len();
    let k = cap.map_or(n, |c| c.min(n)).max(1);
    (0..k).map(|i| set.window(i * n / k)).collect()
}

/// Mean VRMSE of next-step predictions at `size` over `windows`.
pub fn evaluate_next_step(
    model: &SurrogateModel,
    set: &WindowSet,
    windows: &[(usize, usize)],
    size: usize,
    batch: usize,
) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for chunk in windows.chunks(batch.max(1)) {
        let (ctx, tgt) = set.batch(chunk)?;
        let pred = model.forward(&ctx, size)?;
        let per_channel = vrmse_batch(&pred, &tgt, VRMSE_EPS)?;
        total += per_channel.iter().sum::<f64>() / per_channel.len() as f64 * chunk.len() as f64;
        count += chunk.len();
    }
    Ok(total / count as f64)
}

/// One optimizer step's loss and gradients at `size`.
pub fn loss_and_grads(
    model: &SurrogateModel,
    ctx: &Tensor,
    target: &Tensor,
    size: usize,
) -> Result<(f64, Gradients)> {
    let mut g = Graph::new();
    let p = g.bind(&model.params);
    let delta = model.forward_delta(&mut g, &p, ctx, size)?;
    let s = ctx.shape();
    let (b, h, w, t, c) = (s[0], s[1], s[2], s[3], s[4]);
    let last = ctx.narrow(3, t - 1, 1)?.reshape(&[b, h, w, c])?;
    let true_delta = target.reshaped(&[b, h, w, c])?.sub(&last)?;
    let loss = g.nmse(delta, &true_delta, LOSS_EPS)?;
    let lv = g.value(loss).item();
    Ok((lv, g.backward(loss)?))
}

/// Train `model` in place; on return it holds the best-validation parameters.
pub fn train(
    model: &mut SurrogateModel,
    train_set: &WindowSet,
    valid_set: &WindowSet,
    cfg: &TrainConfig,
    checkpoint: Option<&Path>,
) -> Result<TrainStats> {
    cfg.validate()?;
    for &s in &cfg.size_dist.sizes {
        model.check_size(s)?;
    }
    if train_set.is_empty() || valid_set.is_empty() {
        return Err(Error::invalid("training and validation splits must be non-empty"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = AdamW::new(cfg.lr, cfg.weight_decay);
    let val_windows = spaced_windows(valid_set, cfg.val_windows);
    let started = Instant::now();
    let mut stats = TrainStats {
        epochs: Vec::new(),
        best_epoch: 0,
        best_val: f64::INFINITY,
        total_samples: 0,
        size_counts: BTreeMap::new(),
        loss_curve: Vec::new(),
    };
    let mut best: Option<ParameterSet> = None;
    let mut step_index = 0usize;
    for epoch in 0..cfg.epochs {
        let mut epoch_loss = 0.0;
        for _ in 0..cfg.steps_per_epoch() {
            let size = sample_size(&mut rng, &cfg.size_dist)?;
            let windows: Vec<(usize, usize)> = (0..cfg.batch_size)
                .map(|_| train_set.window(rng.random_range(0..train_set.len())))
                .collect();
            let (ctx, tgt) = train_set.batch(&windows)?;
            let (loss, grads) = loss_and_grads(model, &ctx, &tgt, size)?;
            if !loss.is_finite() || !grads.is_finite() {
                return Err(Error::NonFinite(format!(
                    "training loss at step {} (batch {} of epoch {}, size {}, seed {})",
                    step_index,
                    step_index % cfg.steps_per_epoch(),
                    epoch,
                    size,
                    cfg.seed
                )));
            }
            opt.step(&mut model.params, &grads)?;
            *stats.size_counts.entry(size).or_insert(0) += 1;
            stats.total_samples += cfg.batch_size;
            stats.loss_curve.push(loss);
            epoch_loss += loss;
            step_index += 1;
        }
        let mut val = BTreeMap::new();
        for &s in &model.config.size_set {
            val.insert(s, evaluate_next_step(model, valid_set, &val_windows, s, cfg.batch_size)?);
        }
        let rec = EpochRecord {
            epoch,
            train_loss: epoch_loss / cfg.steps_per_epoch() as f64,
            val_vrmse: val,
            samples_seen: stats.total_samples,
            wall_seconds: started.elapsed().as_secs_f64(),
        };
        let m = rec.mean_val();
        if !m.is_finite() {
            return Err(Error::NonFinite(format!("validation VRMSE after epoch {} (seed {})", epoch, cfg.seed)));
        }
        if m < stats.best_val {
            stats.best_val = m;
            stats.best_epoch = epoch;
            best = Some(model.params.clone());
            if let Some(path) = checkpoint {
                model.save(path)?;
            }
        }
        stats.epochs.push(rec);
    }
    if let Some(p) = best {
        model.params = p;
    }
    Ok(stats)
}
