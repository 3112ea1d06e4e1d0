//! Run configuration shared by every verb.
//!
//! Resolution order: built-in defaults, then the config file, then each
//! `--set key=value`, then the dedicated flags. The resolved value is what
//! lands in the manifest, so a manifest can be fed back in as a config file.

use std::fmt;
use std::path::Path;

use flexipatch::pdegen::{PDEParams, SplitTag};
use flexipatch::processor::ModelConfig;
use flexipatch::rollout::ScheduleKind;
use flexipatch::training::{SizeDistribution, TrainConfig};
use serde::{Deserialize, Serialize};
use serde_json::Value;

/// Raised for anything wrong with the configuration; maps to exit code 2.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "config error: {}", self.0)
    }
}

impl std::error::Error for ConfigError {}

fn cfg_err(msg: impl Into<String>) -> ConfigError {
    ConfigError(msg.into())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Checkpoint read by eval, rollout and the schedule ablation.
    pub checkpoint: String,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainSection,
    pub eval: EvalConfig,
    pub rollout: RolloutConfig,
    pub spectra: SpectraConfig,
    pub ablate: AblateConfig,
    pub compare: CompareConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Dataset directory read by train, eval, rollout and ablate.
    pub dir: String,
    pub n_traj: usize,
    /// Split used for evaluation and rollouts.
    pub eval_split: SplitTag,
    pub pde: PDEParams,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub epoch_size: usize,
    /// Training sizes; empty means the model's size set.
    pub sizes: Vec<usize>,
    /// Probabilities matching `sizes`; empty means uniform.
    pub probs: Vec<f64>,
    pub val_windows: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub sizes: Vec<usize>,
    /// Cap on evaluation windows, evenly spaced over the split.
    pub windows: usize,
    pub batch: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RolloutConfig {
    /// `fixed:<size>`, `cyclic[:<phase>]` or `random[:<seed>]`.
    pub schedule: String,
    pub steps: usize,
    pub cycle: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpectraConfig {
    /// Rollout directory holding `pred.flxd` and `truth.flxd`.
    pub input: String,
    /// Rollout step to analyse; 0 averages over all steps.
    pub step: usize,
    /// Patch sizes whose harmonics are scored.
    pub probes: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Study {
    BaseSize,
    OmitSize,
    Schedule,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblateConfig {
    pub study: Study,
    pub replicates: usize,
    pub base_sizes: Vec<usize>,
    pub omit: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompareConfig {
    pub runs: Vec<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        RunConfig {
            seed: 0,
            checkpoint: "model.ckpt".into(),
            data: DataConfig {
                dir: "data".into(),
                n_traj: 20,
                eval_split: SplitTag::Test,
                pde: PDEParams::default(),
            },
            model: ModelConfig::default(),
            train: TrainSection {
                lr: t.lr,
                weight_decay: t.weight_decay,
                batch_size: t.batch_size,
                epochs: t.epochs,
                epoch_size: t.epoch_size,
                sizes: Vec::new(),
                probs: Vec::new(),
                val_windows: t.val_windows.unwrap_or(32),
            },
            eval: EvalConfig {
                sizes: vec![4, 8, 16],
                windows: 32,
                batch: 8,
            },
            rollout: RolloutConfig {
                schedule: "cyclic".into(),
                steps: 20,
                cycle: vec![4, 8, 16],
            },
            spectra: SpectraConfig {
                input: ".".into(),
                step: 0,
                probes: vec![8, 16],
            },
            ablate: AblateConfig {
                study: Study::OmitSize,
                replicates: 3,
                base_sizes: vec![8, 16],
                omit: 8,
            },
            compare: CompareConfig { runs: Vec::new() },
        }
    }
}

impl RunConfig {
    /// Build a config from an optional file plus `key=value` overrides.
    pub fn resolve(path: Option<&Path>, overrides: &[(String, String)]) -> Result<RunConfig, ConfigError> {
        let mut value = serde_json::to_value(RunConfig::default()).expect("defaults serialize");
        if let Some(p) = path {
            merge(&mut value, read_file(p)?);
        }
        for (k, v) in overrides {
            set_path(&mut value, k, parse_scalar(v))?;
        }
        let cfg: RunConfig = serde_path_to_error::deserialize(value)
            .map_err(|e| cfg_err(format!("at `{}`: {}", e.path(), e.inner())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let field = |name: &str, r: flexipatch::Result<()>| r.map_err(|e| cfg_err(format!("{}: {}", name, e)));
        field("data.pde", self.data.pde.validate())?;
        field("model", self.model.validate())?;
        field("train", self.train_config().and_then(|t| t.validate()))?;
        if self.model.channels != self.data.pde.channels {
            return Err(cfg_err(format!(
                "model.channels = {} but data.pde.channels = {}",
                self.model.channels, self.data.pde.channels
            )));
        }
        if self.eval.sizes.is_empty() || self.eval.windows == 0 || self.eval.batch == 0 {
            return Err(cfg_err("eval needs sizes, windows >= 1 and batch >= 1"));
        }
        if self.rollout.steps == 0 {
            return Err(cfg_err("rollout.steps must be at least 1"));
        }
        self.schedule()?;
        if self.ablate.replicates == 0 {
            return Err(cfg_err("ablate.replicates must be at least 1"));
        }
        Ok(())
    }

    pub fn schedule(&self) -> Result<ScheduleKind, ConfigError> {
        self.rollout
            .schedule
            .parse()
            .map_err(|e| cfg_err(format!("rollout.schedule: {}", e)))
    }

    /// Training hyperparameters; the RNG seed is the run seed.
    pub fn train_config(&self) -> flexipatch::Result<TrainConfig> {
        let t = &self.train;
        let sizes = if t.sizes.is_empty() { &self.model.size_set } else { &t.sizes };
        let size_dist = if t.probs.is_empty() {
            SizeDistribution::uniform(sizes)
        } else {
            SizeDistribution {
                sizes: sizes.clone(),
                probs: t.probs.clone(),
            }
        };
        Ok(TrainConfig {
            lr: t.lr,
            weight_decay: t.weight_decay,
            batch_size: t.batch_size,
            epochs: t.epochs,
            epoch_size: t.epoch_size,
            size_dist,
            seed: self.seed,
            val_windows: Some(t.val_windows),
        })
    }
}

/// A TOML config, or a manifest JSON whose `config` entry is taken as is.
fn read_file(path: &Path) -> Result<Value, ConfigError> {
    let text =
        std::fs::read_to_string(path).map_err(|e| cfg_err(format!("cannot read {}: {}", path.display(), e)))?;
    if path.extension().is_some_and(|e| e == "json") {
        let v: Value =
            serde_json::from_str(&text).map_err(|e| cfg_err(format!("{}: {}", path.display(), e)))?;
        return match v.get("config") {
            Some(c) => Ok(c.clone()),
            None => Ok(v),
        };
    }
    let t: toml::Table = toml::from_str(&text).map_err(|e| cfg_err(format!("{}: {}", path.display(), e)))?;
    serde_json::to_value(t).map_err(|e| cfg_err(format!("{}: {}", path.display(), e)))
}

fn merge(base: &mut Value, top: Value) {
    match (base, top) {
        (Value::Object(b), Value::Object(t)) => {
            for (k, v) in t {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Values parse as TOML (numbers, booleans, arrays, quoted strings); anything
/// else is taken as a bare string.
fn parse_scalar(raw: &str) -> Value {
    toml::from_str::<toml::Table>(&format!("v = {}", raw))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .and_then(|v| serde_json::to_value(v).ok())
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

fn set_path(root: &mut Value, key: &str, value: Value) -> Result<(), ConfigError> {
    let mut cur = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| cfg_err(format!("`{}` is not a section", parts[..i].join("."))))?;
        let slot = obj
            .get_mut(*part)
            .ok_or_else(|| cfg_err(format!("unknown config key `{}`", key)))?;
        if i + 1 == parts.len() {
            *slot = value;
            return Ok(());
        }
        cur = slot;
    }
    Err(cfg_err("empty config key"))
}

/// Split `key=value`.
pub fn parse_override(s: &str) -> Result<(String, String), ConfigError> {
    s.split_once('=')
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .filter(|(k, _)| !k.is_empty())
        .ok_or_else(|| cfg_err(format!("override `{}` is not key=value", s)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(pairs: &[(&str, &str)]) -> Result<RunConfig, ConfigError> {
        let o: Vec<(String, String)> = pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect();
        RunConfig::resolve(None, &o)
    }

    #[test]
    fn overrides_reach_nested_fields() {
        let c = set(&[("model.embed_dim", "32"), ("eval.sizes", "[8, 16]"), ("rollout.schedule", "fixed:16")])
            .unwrap();
        assert_eq!(c.model.embed_dim, 32);
        assert_eq!(c.eval.sizes, vec![8, 16]);
        assert_eq!(c.rollout.schedule, "fixed:16");
    }

    #[test]
    fn diagnostics_name_the_field() {
        let e = set(&[("model.embed_dimm", "32")]).unwrap_err();
        assert!(e.0.contains("model.embed_dimm"), "{}", e);
        let e = set(&[("train.lr", "\"fast\"")]).unwrap_err();
        assert!(e.0.contains("train.lr"), "{}", e);
        let e = set(&[("rollout.schedule", "zigzag")]).unwrap_err();
        assert!(e.0.contains("rollout.schedule"), "{}", e);
    }

    #[test]
    fn resolved_config_survives_json() {
        let c = set(&[("seed", "9"), ("data.pde.velocity", "[0.1, 0.2]")]).unwrap();
        let back: RunConfig = serde_json::from_value(serde_json::to_value(&c).unwrap()).unwrap();
        assert_eq!(back, c);
    }
}
