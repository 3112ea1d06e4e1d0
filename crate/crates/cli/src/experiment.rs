//! Building blocks shared by the verbs and the acceptance harness.

use flexipatch::metrics::{
    bsnmse, channel, frame, harmonic_spike_score, log_bands, residual_spectrum, vrmse, SpectralReport, VRMSE_EPS,
};
use flexipatch::pdegen::{TrajectoryDataset, WindowSet};
use flexipatch::processor::{ModelConfig, SurrogateModel};
use flexipatch::rollout::{make_schedule, rollout_windows, PatchSchedule, ScheduleKind};
use flexipatch::training::{train, TrainConfig, TrainStats};
use flexipatch::{Result, Tensor};
use serde::Serialize;

/// One metric value per window, rollout step and channel.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FieldRow {
    pub window: usize,
    pub traj: usize,
    pub start: usize,
    pub step: usize,
    pub size: usize,
    pub channel: usize,
    pub vrmse: f64,
}

/// Window-and-channel means at one rollout step.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepRow {
    pub step: usize,
    pub size: usize,
    pub vrmse: f64,
    pub bsnmse_low: Option<f64>,
    pub bsnmse_mid: Option<f64>,
    pub bsnmse_high: Option<f64>,
}

pub struct RolloutResult {
    pub schedule: PatchSchedule,
    pub windows: Vec<(usize, usize)>,
    /// `[n, H, W, steps, C]`
    pub pred: Tensor,
    pub truth: Tensor,
    pub fields: Vec<FieldRow>,
    pub steps: Vec<StepRow>,
}

/// Up to `cap` evenly spaced windows that leave room for `horizon` frames.
pub fn horizon_windows(set: &WindowSet, horizon: usize, cap: usize) -> Vec<(usize, usize)> {
    let last = set.steps().saturating_sub(set.context + horizon);
    let all: Vec<(usize, usize)> = (0..set.n_traj())
        .flat_map(|tr| (0..=last).map(move |s| (tr, s)))
        .filter(|&(_, s)| s + set.context + horizon <= set.steps())
        .collect();
    let k = cap.min(all.len());
    (0..k).map(|i| all[i * all.len() / k]).collect()
}

pub fn run_rollout(
    model: &SurrogateModel,
    set: &WindowSet,
    kind: &ScheduleKind,
    steps: usize,
    cycle: &[usize],
    cap: usize,
    batch: usize,
) -> Result<RolloutResult> {
    let schedule = make_schedule(kind, steps, cycle)?;
    let windows = horizon_windows(set, steps, cap);
    let (pred, truth) = rollout_windows(model, set, &windows, &schedule, batch)?;
    let s = pred.shape().to_vec();
    let (h, w, c) = (s[1], s[2], s[4]);
    let bands = log_bands(h, w)?;
    let mut fields = Vec::new();
    let mut step_rows = Vec::new();
    for (t, &size) in schedule.sizes.iter().enumerate() {
        let mut total = 0.0;
        let mut band_sum = [0.0; 3];
        let mut band_n = [0usize; 3];
        for (i, &(traj, start)) in windows.iter().enumerate() {
            let (p, q) = (frame(&pred, i, t)?, frame(&truth, i, t)?);
            for (ch, v) in vrmse(&p, &q, VRMSE_EPS)?.into_iter().enumerate() {
                fields.push(FieldRow {
                    window: i,
                    traj,
                    start,
                    step: t + 1,
                    size,
                    channel: ch,
                    vrmse: v,
                });
                total += v;
            }
            for ch in 0..c {
                let rep = bsnmse(&channel(&p, ch)?, &channel(&q, ch)?, &bands)?;
                for b in 0..3 {
                    if let Some(sc) = rep.score[b] {
                        band_sum[b] += sc;
                        band_n[b] += 1;
                    }
                }
            }
        }
        let band = |b: usize| (band_n[b] > 0).then(|| band_sum[b] / band_n[b] as f64);
        step_rows.push(StepRow {
            step: t + 1,
            size,
            vrmse: total / (windows.len() * c) as f64,
            bsnmse_low: band(0),
            bsnmse_mid: band(1),
            bsnmse_high: band(2),
        });
    }
    Ok(RolloutResult {
        schedule,
        windows,
        pred,
        truth,
        fields,
        steps: step_rows,
    })
}

/// Next-step VRMSE at each size; each size is a one-step fixed rollout.
pub fn eval_sizes(
    model: &SurrogateModel,
    set: &WindowSet,
    sizes: &[usize],
    cap: usize,
    batch: usize,
) -> Result<Vec<(usize, f64, Vec<FieldRow>)>> {
    sizes
        .iter()
        .map(|&size| {
            let r = run_rollout(model, set, &ScheduleKind::Fixed { size }, 1, &[size], cap, batch)?;
            Ok((size, r.steps[0].vrmse, r.fields))
        })
        .collect()
}

/// Residual spectrum of `[n, H, W, steps, C]` fields averaged over windows
/// and channels, at rollout step `step` (1-based) or over all steps for 0.
pub fn rollout_spectrum(pred: &Tensor, truth: &Tensor, step: usize) -> Result<SpectralReport> {
    let s = pred.shape();
    let (n, steps, c) = (s[0], s[3], s[4]);
    if step > steps {
        return Err(flexipatch::Error::InvalidArgument(format!(
            "step {} requested from a {}-step rollout",
            step, steps
        )));
    }
    let range = if step == 0 { 0..steps } else { step - 1..step };
    let mut reports = Vec::new();
    for b in 0..n {
        for t in range.clone() {
            let (p, q) = (frame(pred, b, t)?, frame(truth, b, t)?);
            for ch in 0..c {
                reports.push(residual_spectrum(&channel(&p, ch)?, &channel(&q, ch)?)?);
            }
        }
    }
    SpectralReport::average(&reports)
}

pub fn spike_scores(report: &SpectralReport, probes: &[usize]) -> Result<Vec<(usize, f64)>> {
    probes
        .iter()
        .map(|&p| Ok((p, harmonic_spike_score(report, p, report.height)?)))
        .collect()
}

/// Round to the precision of the on-disk dataset format.
pub fn as_stored(x: &Tensor) -> Tensor {
    x.map(|v| v as f32 as f64)
}

pub struct Splits {
    pub train: WindowSet,
    pub valid: WindowSet,
    pub eval: WindowSet,
}

pub fn window_sets(ds: &TrajectoryDataset, eval: flexipatch::pdegen::SplitTag, context: usize) -> Result<Splits> {
    Ok(Splits {
        train: WindowSet::new(&ds.train, &ds.stats, context)?,
        valid: WindowSet::new(&ds.valid, &ds.stats, context)?,
        eval: WindowSet::new(ds.split(eval), &ds.stats, context)?,
    })
}

/// Initialise from `seed` and train; the returned model holds the
/// best-validation parameters.
pub fn train_model(
    cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    sets: &Splits,
    checkpoint: Option<&std::path::Path>,
) -> Result<(SurrogateModel, TrainStats)> {
    let mut model = SurrogateModel::new(cfg.clone(), train_cfg.seed)?;
    let stats = train(&mut model, &sets.train, &sets.valid, train_cfg, checkpoint)?;
    Ok((model, stats))
}
