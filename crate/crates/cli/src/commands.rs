use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use flexipatch::container::{f32_to_bytes, write_container};
use flexipatch::pdegen::{generate_dataset, load_split_file, DatasetHeader, PDEParams, TrajectoryDataset, WindowSet};
use flexipatch::processor::SurrogateModel;
use flexipatch::rollout::ScheduleKind;
use flexipatch::tokenizer::token_grid;
use flexipatch::training::TrainConfig;
use flexipatch::Tensor;
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{ConfigError, RunConfig, Study};
use crate::experiment::{
    as_stored, eval_sizes, rollout_spectrum, run_rollout, spike_scores, train_model, window_sets, RolloutResult,
};
use crate::manifest::{Manifest, RunDir, SummaryRow};

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Verb {
    Gen,
    Train,
    Eval,
    Rollout,
    Spectra,
    Ablate,
    Compare,
}

impl Verb {
    pub fn name(self) -> &'static str {
        match self {
            Verb::Gen => "gen",
            Verb::Train => "train",
            Verb::Eval => "eval",
            Verb::Rollout => "rollout",
            Verb::Spectra => "spectra",
            Verb::Ablate => "ablate",
            Verb::Compare => "compare",
        }
    }
}

pub fn run_verb(verb: Verb, cfg: &RunConfig, out: &Path) -> Result<Manifest> {
    let mut run = RunDir::start(out, verb.name(), cfg)?;
    let summary = match verb {
        Verb::Gen => gen(cfg, &mut run)?,
        Verb::Train => train(cfg, &mut run)?,
        Verb::Eval => eval(cfg, &mut run)?,
        Verb::Rollout => rollout(cfg, &mut run)?,
        Verb::Spectra => spectra(cfg, &mut run)?,
        Verb::Ablate => ablate(cfg, &mut run)?,
        Verb::Compare => compare(cfg, &mut run)?,
    };
    run.finish(summary)
}

fn load_dataset(cfg: &RunConfig) -> Result<TrajectoryDataset> {
    let dir = PathBuf::from(&cfg.data.dir);
    TrajectoryDataset::load(&dir).with_context(|| format!("loading dataset from {}", dir.display()))
}

fn load_model(cfg: &RunConfig) -> Result<SurrogateModel> {
    SurrogateModel::load(Path::new(&cfg.checkpoint)).with_context(|| format!("loading checkpoint {}", cfg.checkpoint))
}

fn eval_set(cfg: &RunConfig, ds: &TrajectoryDataset, context: usize) -> Result<WindowSet> {
    Ok(WindowSet::new(ds.split(cfg.data.eval_split), &ds.stats, context)?)
}

fn gen(cfg: &RunConfig, run: &mut RunDir) -> Result<Vec<SummaryRow>> {
    let ds = generate_dataset(&cfg.data.pde, cfg.data.n_traj, cfg.seed)?;
    for path in ds.save(&run.dir)? {
        run.track(&path.file_name().expect("split file").to_string_lossy());
    }
    Ok(vec![
        SummaryRow::new("train_trajectories", ds.train.trajectory_ids.len() as f64),
        SummaryRow::new("valid_trajectories", ds.valid.trajectory_ids.len() as f64),
        SummaryRow::new("test_trajectories", ds.test.trajectory_ids.len() as f64),
    ])
}

#[derive(Serialize)]
struct EpochRow {
    epoch: usize,
    size: usize,
    val_vrmse: f64,
    train_loss: f64,
    samples_seen: usize,
}

#[derive(Serialize)]
struct LossRow {
    step: usize,
    loss: f64,
}

fn train(cfg: &RunConfig, run: &mut RunDir) -> Result<Vec<SummaryRow>> {
    let ds = load_dataset(cfg)?;
    let sets = window_sets(&ds, cfg.data.eval_split, cfg.model.context)?;
    let tc = cfg.train_config()?;
    let ckpt = run.path("model.ckpt");
    let (_, stats) = train_model(&cfg.model, &tc, &sets, Some(&ckpt))?;
    run.track("model.ckpt");
    let epochs: Vec<EpochRow> = stats
        .csv_rows()
        .into_iter()
        .map(|(epoch, size, val_vrmse, train_loss, samples_seen, _)| EpochRow {
            epoch,
            size,
            val_vrmse,
            train_loss,
            samples_seen,
        })
        .collect();
    run.write_csv("train_log.csv", &epochs)?;
    let losses: Vec<LossRow> = stats
        .loss_curve
        .iter()
        .enumerate()
        .map(|(step, &loss)| LossRow { step, loss })
        .collect();
    run.write_csv("loss_curve.csv", &losses)?;
    // wall-clock times live here, outside the CSVs
    run.write_json("train_stats.json", &stats)?;
    let best = &stats.epochs[stats.best_epoch];
    Ok(best
        .val_vrmse
        .iter()
        .map(|(&s, &v)| SummaryRow::new("val_vrmse", v).size(s))
        .collect())
}

#[derive(Serialize)]
struct EvalRow {
    size: usize,
    tokens: usize,
    vrmse: f64,
}

fn eval(cfg: &RunConfig, run: &mut RunDir) -> Result<Vec<SummaryRow>> {
    let model = load_model(cfg)?;
    let ds = load_dataset(cfg)?;
    let set = eval_set(cfg, &ds, model.config.context)?;
    let results = eval_sizes(&model, &set, &cfg.eval.sizes, cfg.eval.windows, cfg.eval.batch)?;
    let (h, w) = (ds.params.height, ds.params.width);
    let mut rows = Vec::new();
    let mut fields = Vec::new();
    for (size, v, f) in results {
        let (nh, nw) = token_grid(h, w, size, size, 0)?;
        rows.push(EvalRow {
            size,
            tokens: nh * nw,
            vrmse: v,
        });
        fields.extend(f);
    }
    run.write_csv("eval.csv", &rows)?;
    run.write_csv("eval_fields.csv", &fields)?;
    Ok(rows.iter().map(|r| SummaryRow::new("vrmse", r.vrmse).size(r.size)).collect())
}

#[derive(Serialize)]
struct SpectrumRow {
    k: usize,
    power: f64,
}

#[derive(Serialize)]
struct SpikeRow {
    probe: usize,
    harmonic_spacing: usize,
    score: f64,
}

/// Write `[n, H, W, steps, C]` in the dataset file format.
fn write_fields(path: &Path, x: &Tensor, ds: &TrajectoryDataset, cfg: &RunConfig, ids: Vec<u64>) -> Result<()> {
    let stored = x.permute(&[0, 3, 1, 2, 4])?;
    let header = DatasetHeader {
        kind: "dataset".into(),
        split: cfg.data.eval_split,
        dtype: "f32".into(),
        shape: stored.shape().to_vec(),
        params: PDEParams {
            steps: stored.shape()[1],
            ..ds.params.clone()
        },
        seed: ds.seed,
        trajectory_ids: ids,
        stats: ds.stats.clone(),
    };
    write_container(path, &header, &f32_to_bytes(stored.data()))?;
    Ok(())
}

fn write_spectra(run: &mut RunDir, pred: &Tensor, truth: &Tensor, cfg: &RunConfig) -> Result<Vec<SummaryRow>> {
    let report = rollout_spectrum(pred, truth, cfg.spectra.step)?;
    let rows: Vec<SpectrumRow> = report
        .power
        .iter()
        .enumerate()
        .map(|(k, &power)| SpectrumRow { k, power })
        .collect();
    run.write_csv("spectrum.csv", &rows)?;
    let spikes = spike_scores(&report, &cfg.spectra.probes)
        .map_err(|e| ConfigError(format!("spectra.probes: {}", e)))?;
    let spike_rows: Vec<SpikeRow> = spikes
        .iter()
        .map(|&(probe, score)| SpikeRow {
            probe,
            harmonic_spacing: report.height / probe,
            score,
        })
        .collect();
    run.write_csv("spikes.csv", &spike_rows)?;
    Ok(spikes
        .iter()
        .map(|&(p, s)| SummaryRow::new("spike_score", s).size(p))
        .collect())
}

fn rollout(cfg: &RunConfig, run: &mut RunDir) -> Result<Vec<SummaryRow>> {
    let model = load_model(cfg)?;
    let ds = load_dataset(cfg)?;
    let set = eval_set(cfg, &ds, model.config.context)?;
    let kind = cfg.schedule()?;
    let r: RolloutResult = run_rollout(
        &model,
        &set,
        &kind,
        cfg.rollout.steps,
        &cfg.rollout.cycle,
        cfg.eval.windows,
        cfg.eval.batch,
    )?;
    run.write_csv("rollout.csv", &r.steps)?;
    run.write_csv("rollout_fields.csv", &r.fields)?;
    run.write_json("schedule.json", &r.schedule)?;
    let ids: Vec<u64> = r
        .windows
        .iter()
        .map(|&(tr, _)| ds.split(cfg.data.eval_split).trajectory_ids[tr])
        .collect();
    write_fields(&run.path("pred.flxd"), &r.pred, &ds, cfg, ids.clone())?;
    write_fields(&run.path("truth.flxd"), &r.truth, &ds, cfg, ids)?;
    run.track("pred.flxd");
    run.track("truth.flxd");
    // spectra from the stored precision, so `spectra` on this directory agrees
    let mut summary = write_spectra(run, &as_stored(&r.pred), &as_stored(&r.truth), cfg)?;
    summary.extend(r.steps.iter().map(|s| SummaryRow::new("vrmse", s.vrmse).step(s.step).size(s.size)));
    Ok(summary)
}

fn spectra(cfg: &RunConfig, run: &mut RunDir) -> Result<Vec<SummaryRow>> {
    let dir = Path::new(&cfg.spectra.input);
    let read = |name: &str| -> Result<Tensor> {
        let path = dir.join(name);
        let (_, x) = load_split_file(&path).with_context(|| format!("reading {}", path.display()))?;
        Ok(x.permute(&[0, 2, 3, 1, 4])?)
    };
    let (pred, truth) = (read("pred.flxd")?, read("truth.flxd")?);
    write_spectra(run, &pred, &truth, cfg)
}

#[derive(Clone, Debug, Serialize)]
struct AblateRow {
    study: &'static str,
    variant: String,
    seed: Option<u64>,
    metric: String,
    size: Option<usize>,
    step: Option<usize>,
    value: f64,
}

fn ablate(cfg: &RunConfig, run: &mut RunDir) -> Result<Vec<SummaryRow>> {
    let seeds: Vec<u64> = (0..cfg.ablate.replicates as u64).map(|i| cfg.seed + i).collect();
    let rows = match cfg.ablate.study {
        Study::Schedule => schedule_study(cfg, &seeds)?,
        study => training_study(cfg, study, &seeds, run)?,
    };
    run.write_csv("ablate.csv", &rows)?;
    // mean over replicates per (variant, metric, size, step)
    let mut summary: Vec<(SummaryRow, usize)> = Vec::new();
    for r in &rows {
        let key = SummaryRow {
            metric: r.metric.clone(),
            variant: Some(r.variant.clone()),
            size: r.size,
            step: r.step,
            value: 0.0,
        };
        match summary.iter_mut().find(|(s, _)| SummaryRow { value: 0.0, ..s.clone() } == key) {
            Some((s, n)) => {
                s.value += r.value;
                *n += 1;
            }
            None => summary.push((SummaryRow { value: r.value, ..key }, 1)),
        }
    }
    Ok(summary
        .into_iter()
        .map(|(s, n)| SummaryRow {
            value: s.value / n as f64,
            ..s
        })
        .collect())
}

#[derive(Serialize)]
struct JobTiming {
    variant: String,
    seed: u64,
    train_seconds: f64,
}

fn training_study(cfg: &RunConfig, study: Study, seeds: &[u64], run: &mut RunDir) -> Result<Vec<AblateRow>> {
    let ds = load_dataset(cfg)?;
    let sets = window_sets(&ds, cfg.data.eval_split, cfg.model.context)?;
    let base_train = cfg.train_config()?;
    let mut variants = Vec::new();
    match study {
        Study::OmitSize => {
            if !cfg.model.size_set.contains(&cfg.ablate.omit) {
                bail!(ConfigError(format!(
                    "ablate.omit = {} is not in model.size_set {:?}",
                    cfg.ablate.omit, cfg.model.size_set
                )));
            }
            let kept: Vec<usize> = cfg.model.size_set.iter().copied().filter(|&s| s != cfg.ablate.omit).collect();
            let omit_cfg = RunConfig {
                train: crate::config::TrainSection {
                    sizes: kept,
                    probs: Vec::new(),
                    ..cfg.train.clone()
                },
                ..cfg.clone()
            };
            variants.push(("full".to_string(), cfg.model.clone(), base_train.clone()));
            variants.push((format!("omit{}", cfg.ablate.omit), cfg.model.clone(), omit_cfg.train_config()?));
        }
        Study::BaseSize => {
            for &k in &cfg.ablate.base_sizes {
                let mut m = cfg.model.clone();
                m.k_base = k;
                m.validate()
                    .map_err(|e| ConfigError(format!("ablate.base_sizes entry {}: {}", k, e)))?;
                variants.push((format!("base{}", k), m, base_train.clone()));
            }
        }
        Study::Schedule => unreachable!("handled by schedule_study"),
    }
    let jobs: Vec<(usize, u64)> = (0..variants.len()).flat_map(|v| seeds.iter().map(move |&s| (v, s))).collect();
    let dir = run.dir.clone();
    let outcomes: Vec<Result<(Vec<AblateRow>, f64)>> = jobs
        .par_iter()
        .map(|&(v, seed)| {
            let started = Instant::now();
            let (name, model_cfg, tc) = &variants[v];
            let tc = TrainConfig { seed, ..tc.clone() };
            let ckpt = dir.join(format!("{}-seed{}.ckpt", name, seed));
            let (model, _) = train_model(model_cfg, &tc, &sets, Some(&ckpt))?;
            let seconds = started.elapsed().as_secs_f64();
            let evals = eval_sizes(&model, &sets.eval, &model_cfg.size_set, cfg.eval.windows, cfg.eval.batch)?;
            let rows = evals
                .into_iter()
                .map(|(size, value, _)| AblateRow {
                    study: if study == Study::OmitSize { "omit-size" } else { "base-size" },
                    variant: name.clone(),
                    seed: Some(seed),
                    metric: "vrmse".into(),
                    size: Some(size),
                    step: None,
                    value,
                })
                .collect();
            Ok((rows, seconds))
        })
        .collect();
    let mut rows = Vec::new();
    let mut timings = Vec::new();
    for (o, &(v, seed)) in outcomes.into_iter().zip(&jobs) {
        let (r, seconds) = o?;
        rows.extend(r);
        run.track(&format!("{}-seed{}.ckpt", variants[v].0, seed));
        timings.push(JobTiming {
            variant: variants[v].0.clone(),
            seed,
            train_seconds: seconds,
        });
    }
    // wall-clock only, kept out of the CSV
    run.write_json("timings.json", &timings)?;
    Ok(rows)
}

fn schedule_study(cfg: &RunConfig, seeds: &[u64]) -> Result<Vec<AblateRow>> {
    let model = load_model(cfg)?;
    let ds = load_dataset(cfg)?;
    let set = eval_set(cfg, &ds, model.config.context)?;
    let mut kinds = vec![(ScheduleKind::Cyclic { phase: 0 }, None)];
    kinds.extend(seeds.iter().map(|&s| (ScheduleKind::Random { seed: s }, Some(s))));
    let outcomes: Vec<Result<Vec<AblateRow>>> = kinds
        .par_iter()
        .map(|(kind, seed)| {
            let r = run_rollout(
                &model,
                &set,
                kind,
                cfg.rollout.steps,
                &cfg.rollout.cycle,
                cfg.eval.windows,
                cfg.eval.batch,
            )?;
            let variant = match kind {
                ScheduleKind::Random { .. } => "random".to_string(),
                other => other.to_string(),
            };
            let mut rows: Vec<AblateRow> = r
                .steps
                .iter()
                .map(|s| AblateRow {
                    study: "schedule",
                    variant: variant.clone(),
                    seed: *seed,
                    metric: "vrmse".into(),
                    size: Some(s.size),
                    step: Some(s.step),
                    value: s.vrmse,
                })
                .collect();
            let report = rollout_spectrum(&as_stored(&r.pred), &as_stored(&r.truth), cfg.spectra.step)?;
            for (p, score) in spike_scores(&report, &cfg.spectra.probes)? {
                rows.push(AblateRow {
                    study: "schedule",
                    variant: variant.clone(),
                    seed: *seed,
                    metric: format!("spike_score_p{}", p),
                    size: None,
                    step: None,
                    value: score,
                });
            }
            Ok(rows)
        })
        .collect();
    let mut rows = Vec::new();
    for o in outcomes {
        rows.extend(o?);
    }
    Ok(rows)
}

#[derive(Serialize)]
struct CompareRow {
    run: String,
    verb: String,
    seed: u64,
    complete: bool,
    metric: String,
    variant: Option<String>,
    size: Option<usize>,
    step: Option<usize>,
    value: f64,
}

#[derive(Serialize)]
struct RunHeader {
    run: String,
    verb: String,
    seed: u64,
    complete: bool,
    code_version: String,
}

fn compare(cfg: &RunConfig, run: &mut RunDir) -> Result<Vec<SummaryRow>> {
    if cfg.compare.runs.is_empty() {
        bail!(ConfigError("compare.runs lists no run directories".into()));
    }
    let mut rows = Vec::new();
    let mut headers = Vec::new();
    for dir in &cfg.compare.runs {
        let m = Manifest::read(Path::new(dir))?;
        headers.push(RunHeader {
            run: dir.clone(),
            verb: m.verb.clone(),
            seed: m.seed,
            complete: m.complete,
            code_version: m.code_version.clone(),
        });
        for s in m.summary {
            rows.push(CompareRow {
                run: dir.clone(),
                verb: m.verb.clone(),
                seed: m.seed,
                complete: m.complete,
                metric: s.metric,
                variant: s.variant,
                size: s.size,
                step: s.step,
                value: s.value,
            });
        }
    }
    run.write_csv("compare.csv", &rows)?;
    run.write_json("runs.json", &headers)?;
    let incomplete = headers.iter().filter(|h| !h.complete).count();
    Ok(vec![
        SummaryRow::new("runs", headers.len() as f64),
        SummaryRow::new("incomplete_runs", incomplete as f64),
    ])
}
