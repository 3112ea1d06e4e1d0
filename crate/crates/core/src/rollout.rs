//! Autoregressive rollout with per-step size schedules.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pdegen::WindowSet;
use crate::processor::SurrogateModel;
use crate::tensor::Tensor;
use crate::tokenizer::field_dims;

pub const DEFAULT_CYCLE: [usize; 3] = [4, 8, 16];

/// How sizes are chosen per rollout step. Text form: `fixed:<size>`,
/// `cyclic[:<phase>]`, `random[:<seed>]`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Fixed { size: usize },
    Cyclic { phase: usize },
    Random { seed: u64 },
}

impl FromStr for ScheduleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (name, arg) = match s.split_once(':') {
            Some((n, a)) => (n, Some(a)),
            None => (s, None),
        };
        let num = |a: Option<&str>, default: Option<u64>| -> Result<u64> {
            match (a, default) {
                (Some(a), _) => a
                    .parse()
                    .map_err(|_| Error::invalid(format!("schedule `{}`: `{}` is not an integer", s, a))),
                (None, Some(d)) => Ok(d),
                (None, None) => Err(Error::invalid(format!("schedule `{}` needs an argument", s))),
            }
        };
        match name {
            "fixed" => Ok(ScheduleKind::Fixed {
                size: num(arg, None)? as usize,
            }),
            "cyclic" => Ok(ScheduleKind::Cyclic {
                phase: num(arg, Some(0))? as usize,
            }),
            "random" => Ok(ScheduleKind::Random { seed: num(arg, Some(0))? }),
            _ => Err(Error::invalid(format!(
                "unknown schedule kind `{}` (expected fixed, cyclic or random)",
                name
            ))),
        }
    }
}

impl fmt::Display for ScheduleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ScheduleKind::Fixed { size } => write!(f, "fixed:{}", size),
            ScheduleKind::Cyclic { phase } => write!(f, "cyclic:{}", phase),
            ScheduleKind::Random { seed } => write!(f, "random:{}", seed),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchSchedule {
    pub kind: ScheduleKind,
    pub sizes: Vec<usize>,
}

/// Materialize `steps` sizes. Cyclic and random schedules draw from `cycle`.
pub fn make_schedule(kind: &ScheduleKind, steps: usize, cycle: &[usize]) -> Result<PatchSchedule> {
    if steps == 0 {
        return Err(Error::invalid("a schedule needs at least one step"));
    }
    if cycle.is_empty() {
        return Err(Error::invalid("schedule size set is empty"));
    }
    let sizes = match *kind {
        ScheduleKind::Fixed { size } => vec![size; steps],
        ScheduleKind::Cyclic { phase } => (0..steps).map(|t| cycle[(t + phase) % cycle.len()]).collect(),
        ScheduleKind::Random { seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..steps).map(|_| cycle[rng.random_range(0..cycle.len())]).collect()
        }
    };
    Ok(PatchSchedule {
        kind: kind.clone(),
        sizes,
    })
}

/// Predict `schedule.sizes.len()` frames from `context` `[B, H, W, T, C]`;
/// returns `[B, H, W, steps, C]`.
pub fn rollout(model: &SurrogateModel, context: &Tensor, schedule: &PatchSchedule) -> Result<Tensor> {
    for &s in &schedule.sizes {
        model.check_size(s)?;
    }
    let (_, _, _, t, _) = field_dims(context)?;
    let mut window = context.clone();
    let mut preds = Vec::with_capacity(schedule.sizes.len());
    for &s in &schedule.sizes {
        let next = model.forward(&window, s)?;
        window = Tensor::concat(&[&window.narrow(3, 1, t - 1)?, &next], 3)?;
        preds.push(next);
    }
    let refs: Vec<&Tensor> = preds.iter().collect();
    Tensor::concat(&refs, 3)
}

/// Roll out from each `(traj, start)` window; returns predictions and ground
/// truth, both `[n, H, W, steps, C]`.
pub fn rollout_windows(
    model: &SurrogateModel,
    set: &WindowSet,
    windows: &[(usize, usize)],
    schedule: &PatchSchedule,
    batch: usize,
) -> Result<(Tensor, Tensor)> {
    let steps = schedule.sizes.len();
    let t = set.context;
    for &(traj, start) in windows {
        if traj >= set.n_traj() || start + t + steps > set.steps() {
            return Err(Error::invalid(format!(
                "window (traj {}, start {}) with horizon {} runs past the trajectory",
                traj, start, steps
            )));
        }
    }
    let mut preds = Vec::new();
    let mut truths = Vec::new();
    for chunk in windows.chunks(batch.max(1)) {
        let (ctx, _) = set.batch(chunk)?;
        preds.push(rollout(model, &ctx, schedule)?);
        for &(traj, start) in chunk {
            let f = set.frames(traj, start + t, steps)?;
            let mut s = vec![1];
            s.extend_from_slice(f.shape());
            truths.push(f.reshape(&s)?);
        }
    }
    let p: Vec<&Tensor> = preds.iter().collect();
    let tr: Vec<&Tensor> = truths.iter().collect();
    Ok((Tensor::concat(&p, 0)?, Tensor::concat(&tr, 0)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cyclic_five() {
        let s = make_schedule(&ScheduleKind::Cyclic { phase: 0 }, 5, &DEFAULT_CYCLE).unwrap();
        assert_eq!(s.sizes, vec![4, 8, 16, 4, 8]);
        let s = make_schedule(&ScheduleKind::Cyclic { phase: 2 }, 4, &DEFAULT_CYCLE).unwrap();
        assert_eq!(s.sizes, vec![16, 4, 8, 16]);
    }

    #[test]
    fn fixed_and_random() {
        let f = make_schedule(&ScheduleKind::Fixed { size: 16 }, 3, &DEFAULT_CYCLE).unwrap();
        assert_eq!(f.sizes, vec![16, 16, 16]);
        let a = make_schedule(&ScheduleKind::Random { seed: 7 }, 12, &DEFAULT_CYCLE).unwrap();
        let b = make_schedule(&ScheduleKind::Random { seed: 7 }, 12, &DEFAULT_CYCLE).unwrap();
        assert_eq!(a, b);
        assert!(a.sizes.iter().all(|s| DEFAULT_CYCLE.contains(s)));
    }

    #[test]
    fn parse_round_trip() {
        for s in ["fixed:8", "cyclic:1", "random:7"] {
            assert_eq!(s.parse::<ScheduleKind>().unwrap().to_string(), s);
        }
        assert_eq!("cyclic".parse::<ScheduleKind>().unwrap(), ScheduleKind::Cyclic { phase: 0 });
        assert!("spiral".parse::<ScheduleKind>().is_err());
        assert!("fixed".parse::<ScheduleKind>().is_err());
        assert!(make_schedule(&ScheduleKind::Cyclic { phase: 0 }, 0, &DEFAULT_CYCLE).is_err());
    }
}
