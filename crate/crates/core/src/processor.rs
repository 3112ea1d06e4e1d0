//! Spatio-temporal transformer surrogate.
//!
//! Each frame of the context window is tokenized independently. Blocks apply
//! pre-norm temporal attention, spatial attention (full, or axial rows then
//! columns) and an MLP, each with a residual connection. Rotary embeddings
//! use the frame index on the temporal axis and the token's physical centre
//! (in units of base patches) on the spatial axes, so positions line up
//! across token grids produced by different sizes. The last frame's tokens
//! go through a zero-initialized linear head and the decoder; the result is
//! added to the last context frame.

use std::path::Path;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Bound, Graph, ParameterSet, RopeTable, SeqLayout, Var};
use crate::container::{bytes_to_f64, f64_to_bytes, read_container, write_container};
use crate::error::{Error, Result};
use crate::piresize::ResizeCache;
use crate::tensor::Tensor;
use crate::tokenizer::{field_dims, PadMode, Tokenizer, TokenizerConfig, TokenizerKind, LN_EPS};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionKind {
    Full,
    Axial,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub mlp_dim: usize,
    pub n_heads: usize,
    pub n_blocks: usize,
    pub attention: AttentionKind,
    pub tokenizer: TokenizerKind,
    pub size_set: Vec<usize>,
    pub k_base: usize,
    pub channels: usize,
    pub context: usize,
    pub pad_mode: PadMode,
    pub rope_base: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            embed_dim: 64,
            mlp_dim: 128,
            n_heads: 4,
            n_blocks: 2,
            attention: AttentionKind::Axial,
            tokenizer: TokenizerKind::Ckm,
            size_set: vec![4, 8, 16],
            k_base: 16,
            channels: 1,
            context: 6,
            pad_mode: PadMode::Learned,
            rope_base: 100.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let d = self.embed_dim;
        if d == 0 || self.n_heads == 0 || d % self.n_heads != 0 {
            return Err(Error::invalid(format!(
                "embed_dim {} must be a positive multiple of n_heads {}",
                d, self.n_heads
            )));
        }
        let head_dim = d / self.n_heads;
        if head_dim % 4 != 0 {
            return Err(Error::invalid(format!(
                "head dimension {} must be divisible by 4 for 2D rotary embedding",
                head_dim
            )));
        }
        if self.mlp_dim < d {
            return Err(Error::invalid(format!("mlp_dim {} must be >= embed_dim {}", self.mlp_dim, d)));
        }
        if self.size_set.is_empty() {
            return Err(Error::invalid("size_set must not be empty"));
        }
        if self.tokenizer == TokenizerKind::Fixed && self.size_set != [self.k_base] {
            return Err(Error::invalid(format!(
                "a fixed-patch model must have size_set [{}], got {:?}",
                self.k_base, self.size_set
            )));
        }
        if self.context == 0 || self.channels == 0 {
            return Err(Error::invalid("context and channels must be positive"));
        }
        if !(self.rope_base > 1.0) {
            return Err(Error::invalid("rope_base must be > 1"));
        }
        Ok(())
    }

    pub fn tokenizer_config(&self) -> TokenizerConfig {
        TokenizerConfig {
            kind: self.tokenizer,
            k_base: self.k_base,
            channels: self.channels,
            hidden_dim: (self.embed_dim / 4).max(1),
            embed_dim: self.embed_dim,
            pad_mode: self.pad_mode,
            stage_activation: true,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SurrogateModel {
    pub config: ModelConfig,
    pub params: ParameterSet,
    tokenizer: Tokenizer,
}

/// Rotation angles for one attention pass, rows in `(frame, h, w)` order.
fn rope_angles(positions: impl Iterator<Item = (f64, f64)>, pairs: usize, base: f64, two_d: bool) -> Vec<f64> {
    let mut out = Vec::new();
    for (a, b) in positions {
        if two_d {
            let half = pairs / 2;
            for j in 0..pairs {
                let (pos, jj, n) = if j < half { (a, j, half) } else { (b, j - half, pairs - half) };
                out.push(pos * base.powf(-(jj as f64) / n as f64));
            }
        } else {
            for j in 0..pairs {
                out.push(a * base.powf(-(j as f64) / pairs as f64));
            }
        }
    }
    out
}

struct Geometry {
    batch: usize,
    frames: usize,
    nh: usize,
    nw: usize,
}

impl Geometry {
    fn rows(&self) -> usize {
        self.batch * self.frames * self.nh * self.nw
    }
}

impl SurrogateModel {
    /// A freshly initialized model; initialization is a function of `seed` only.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let tokenizer = Tokenizer::new(config.tokenizer_config(), Arc::new(ResizeCache::new()))?;
        for &s in &config.size_set {
            tokenizer.stages(s)?;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParameterSet::new();
        tokenizer.init_params(&mut params, &mut rng)?;
        let d = config.embed_dim;
        let m = config.mlp_dim;
        let sd = 1.0 / (d as f64).sqrt();
        let sm = 1.0 / (m as f64).sqrt();
        let attn_names: &[&str] = match config.attention {
            AttentionKind::Full => &["tattn", "sattn"],
            AttentionKind::Axial => &["tattn", "sattn", "cattn"],
        };
        for i in 0..config.n_blocks {
            for a in attn_names {
                params.insert(format!("blocks.{i}.{a}.norm.g"), Tensor::ones(&[d]))?;
                params.insert(format!("blocks.{i}.{a}.norm.b"), Tensor::zeros(&[d]))?;
                for w in ["q", "k", "v", "o"] {
                    params.insert(format!("blocks.{i}.{a}.{w}"), Tensor::randn(&[d, d], sd, &mut rng))?;
                }
                params.insert(format!("blocks.{i}.{a}.o.b"), Tensor::zeros(&[d]))?;
            }
            params.insert(format!("blocks.{i}.mlp.norm.g"), Tensor::ones(&[d]))?;
            params.insert(format!("blocks.{i}.mlp.norm.b"), Tensor::zeros(&[d]))?;
            params.insert(format!("blocks.{i}.mlp.fc1"), Tensor::randn(&[d, m], sd, &mut rng))?;
            params.insert(format!("blocks.{i}.mlp.fc1.b"), Tensor::zeros(&[m]))?;
            params.insert(format!("blocks.{i}.mlp.fc2"), Tensor::randn(&[m, d], sm, &mut rng))?;
            params.insert(format!("blocks.{i}.mlp.fc2.b"), Tensor::zeros(&[d]))?;
        }
        params.insert("final_norm.g", Tensor::ones(&[d]))?;
        params.insert("final_norm.b", Tensor::zeros(&[d]))?;
        params.insert("head.w", Tensor::zeros(&[d, d]))?;
        params.insert("head.b", Tensor::zeros(&[d]))?;
        Ok(SurrogateModel {
            config,
            params,
            tokenizer,
        })
    }

    pub fn tokenizer(&self) -> &Tokenizer {
        &self.tokenizer
    }

    pub fn check_size(&self, size: usize) -> Result<()> {
        if !self.config.size_set.contains(&size) {
            return Err(Error::invalid(format!(
                "size {} is not in the model's size set {:?}",
                size, self.config.size_set
            )));
        }
        Ok(())
    }

    fn attention_layer(
        &self,
        g: &mut Graph,
        p: &Bound,
        x: Var,
        prefix: &str,
        layout: SeqLayout,
        rope: &Arc<RopeTable>,
    ) -> Result<Var> {
        let h = g.layer_norm(x, p.get(&format!("{prefix}.norm.g"))?, p.get(&format!("{prefix}.norm.b"))?, LN_EPS)?;
        let q = g.linear(h, p.get(&format!("{prefix}.q"))?)?;
        let k = g.linear(h, p.get(&format!("{prefix}.k"))?)?;
        let v = g.linear(h, p.get(&format!("{prefix}.v"))?)?;
        let q = g.rope(q, rope.clone())?;
        let k = g.rope(k, rope.clone())?;
        let a = g.attention(q, k, v, layout, self.config.n_heads)?;
        let o = g.linear(a, p.get(&format!("{prefix}.o"))?)?;
        let o = g.add_bias(o, p.get(&format!("{prefix}.o.b"))?)?;
        g.add(x, o)
    }

    fn mlp_layer(&self, g: &mut Graph, p: &Bound, x: Var, prefix: &str) -> Result<Var> {
        let h = g.layer_norm(x, p.get(&format!("{prefix}.norm.g"))?, p.get(&format!("{prefix}.norm.b"))?, LN_EPS)?;
        let h = g.linear(h, p.get(&format!("{prefix}.fc1"))?)?;
        let h = g.add_bias(h, p.get(&format!("{prefix}.fc1.b"))?)?;
        let h = g.gelu(h);
        let h = g.linear(h, p.get(&format!("{prefix}.fc2"))?)?;
        let h = g.add_bias(h, p.get(&format!("{prefix}.fc2.b"))?)?;
        g.add(x, h)
    }

    fn rope_tables(&self, geo: &Geometry, size: usize) -> Result<(Arc<RopeTable>, Arc<RopeTable>)> {
        let pairs = self.config.embed_dim / self.config.n_heads / 2;
        let n = geo.nh * geo.nw;
        let rows = geo.rows();
        let base = self.config.rope_base;
        let temporal = rope_angles(
            (0..rows).map(|r| (((r / n) % geo.frames) as f64, 0.0)),
            pairs,
            base,
            false,
        );
        let scale = size as f64 / self.config.k_base as f64;
        let spatial = rope_angles(
            (0..rows).map(|r| {
                let p = r % n;
                (((p / geo.nw) as f64 + 0.5) * scale, ((p % geo.nw) as f64 + 0.5) * scale)
            }),
            pairs,
            base,
            true,
        );
        Ok((
            Arc::new(RopeTable::from_angles(rows, pairs, &temporal)?),
            Arc::new(RopeTable::from_angles(rows, pairs, &spatial)?),
        ))
    }

    /// Record the forward pass on `g` and return the predicted change of the
    /// last frame, `[B, H, W, C]`. `context` is a field `[B, H, W, T, C]`.
    pub fn forward_delta(&self, g: &mut Graph, p: &Bound, context: &Tensor, size: usize) -> Result<Var> {
        self.check_size(size)?;
        let (b, h, w, t, c) = field_dims(context)?;
        if t != self.config.context || c != self.config.channels {
            return Err(Error::invalid(format!(
                "model expects {} context frames with {} channels, got {:?}",
                self.config.context,
                self.config.channels,
                context.shape()
            )));
        }
        let frames = context.permute(&[0, 3, 1, 2, 4])?.reshape(&[b * t, h, w, c])?;
        let x = g.input(frames);
        let tok = self.tokenizer.encode(g, p, x, size)?;
        let (nh, nw, d) = (g.shape(tok)[1], g.shape(tok)[2], g.shape(tok)[3]);
        let geo = Geometry { batch: b, frames: t, nh, nw };
        let (t_rope, s_rope) = self.rope_tables(&geo, size)?;
        let mut x = g.reshape(tok, &[geo.rows(), d])?;
        let temporal = SeqLayout::temporal(b, t, nh * nw);
        for i in 0..self.config.n_blocks {
            x = self.attention_layer(g, p, x, &format!("blocks.{i}.tattn"), temporal, &t_rope)?;
            match self.config.attention {
                AttentionKind::Full => {
                    let layout = SeqLayout::spatial(b * t, nh, nw);
                    x = self.attention_layer(g, p, x, &format!("blocks.{i}.sattn"), layout, &s_rope)?;
                }
                AttentionKind::Axial => {
                    let rows = SeqLayout::rows_of(b * t, nh, nw);
                    x = self.attention_layer(g, p, x, &format!("blocks.{i}.sattn"), rows, &s_rope)?;
                    let cols = SeqLayout::cols_of(b * t, nh, nw);
                    x = self.attention_layer(g, p, x, &format!("blocks.{i}.cattn"), cols, &s_rope)?;
                }
            }
            x = self.mlp_layer(g, p, x, &format!("blocks.{i}.mlp"))?;
        }
        x = g.layer_norm(x, p.get("final_norm.g")?, p.get("final_norm.b")?, LN_EPS)?;
        let x = g.reshape(x, &[b, t, nh, nw, d])?;
        let last = g.select(x, t - 1)?;
        let y = g.linear(last, p.get("head.w")?)?;
        let y = g.add_bias(y, p.get("head.b")?)?;
        self.tokenizer.decode(g, p, y, size)
    }

    /// Next-frame prediction `[B, H, W, 1, C]` = last context frame + decoded change.
    pub fn forward(&self, context: &Tensor, size: usize) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = g.bind(&self.params);
        let delta = self.forward_delta(&mut g, &p, context, size)?;
        let (b, h, w, t, c) = field_dims(context)?;
        let last = context.narrow(3, t - 1, 1)?;
        let out = g.value(delta).reshaped(&[b, h, w, 1, c])?.add(&last)?;
        if !out.is_finite() {
            return Err(Error::NonFinite(format!("prediction at size {}", size)));
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut entries = Vec::new();
        let mut body = Vec::new();
        let mut offset = 0usize;
        for (name, t) in self.params.iter() {
            let bytes = f64_to_bytes(t.data());
            entries.push(TensorEntry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
                offset,
                nbytes: bytes.len(),
            });
            offset += bytes.len();
            body.extend_from_slice(&bytes);
        }
        let header = CheckpointHeader {
            kind: "checkpoint".into(),
            version: CHECKPOINT_VERSION,
            dtype: "f64".into(),
            config: self.config.clone(),
            tensors: entries,
        };
        write_container(path, &header, &body)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (header, body): (CheckpointHeader, Vec<u8>) = read_container(path)?;
        if header.kind != "checkpoint" || header.version != CHECKPOINT_VERSION || header.dtype != "f64" {
            return Err(Error::Format(format!(
                "{}: expected a version {} f64 checkpoint",
                path.display(),
                CHECKPOINT_VERSION
            )));
        }
        let mut model = SurrogateModel::new(header.config, 0)?;
        let mut seen = 0;
        for e in &header.tensors {
            let slot = model.params.get_mut(&e.name)?;
            let end = e.offset.checked_add(e.nbytes).filter(|&x| x <= body.len());
            let bytes = match end {
                Some(end) => &body[e.offset..end],
                None => return Err(Error::Format(format!("tensor `{}` exceeds file body", e.name))),
            };
            let t = Tensor::new(e.shape.clone(), bytes_to_f64(bytes)?)?;
            if t.shape() != slot.shape() {
                return Err(Error::shape("checkpoint load", t.shape(), slot.shape()));
            }
            *slot = t;
            seen += 1;
        }
        if seen != model.params.len() {
            return Err(Error::Format(format!(
                "checkpoint has {} tensors, model needs {}",
                seen,
                model.params.len()
            )));
        }
        Ok(model)
    }
}

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    nbytes: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    kind: String,
    version: u32,
    dtype: String,
    config: ModelConfig,
    tensors: Vec<TensorEntry>,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(kind: TokenizerKind, attention: AttentionKind) -> ModelConfig {
        ModelConfig {
            embed_dim: 16,
            mlp_dim: 32,
            n_blocks: 1,
            context: 2,
            attention,
            tokenizer: kind,
            size_set: if kind == TokenizerKind::Fixed { vec![16] } else { vec![4, 8, 16] },
            ..ModelConfig::default()
        }
    }

    #[test]
    fn config_validation() {
        let mut c = ModelConfig::default();
        assert!(c.validate().is_ok());
        c.n_heads = 3;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::default();
        c.tokenizer = TokenizerKind::Fixed;
        assert!(c.validate().is_err());
        c.size_set = vec![16];
        assert!(c.validate().is_ok());
    }

    #[test]
    fn zero_head_is_persistence() {
        let m = SurrogateModel::new(small(TokenizerKind::Csm, AttentionKind::Full), 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ctx = Tensor::randn(&[1, 16, 16, 2, 1], 1.0, &mut rng);
        let out = m.forward(&ctx, 8).unwrap();
        assert_eq!(out, ctx.narrow(3, 1, 1).unwrap());
    }

    #[test]
    fn rejects_untrained_size_and_wrong_context() {
        let m = SurrogateModel::new(small(TokenizerKind::Fixed, AttentionKind::Axial), 3).unwrap();
        let ctx = Tensor::zeros(&[1, 16, 16, 2, 1]);
        assert!(m.forward(&ctx, 8).is_err());
        assert!(m.forward(&Tensor::zeros(&[1, 16, 16, 3, 1]), 16).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut m = SurrogateModel::new(small(TokenizerKind::Ckm, AttentionKind::Axial), 5).unwrap();
        m.params.get_mut("head.w").unwrap().data_mut()[3] = 0.25;
        let dir = std::env::temp_dir().join(format!("flxp-ckpt-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("m.ckpt");
        m.save(&path).unwrap();
        let back = SurrogateModel::load(&path).unwrap();
        assert_eq!(back.params, m.params);
        assert_eq!(back.config, m.config);
        std::fs::remove_dir_all(&dir).ok();
    }
}
