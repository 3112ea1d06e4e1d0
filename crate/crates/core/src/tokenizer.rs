//! Two-stage convolutional patch encoders and decoders with a run-time
//! patch size.
//!
//! * **CKM** resizes each stage's base kernel to the sampled stage size with
//!   the pseudoinverse resize operator and convolves with stride = kernel.
//! * **CSM** keeps the base kernels and changes the stride; each stage is
//!   padded by `(k_i − s_i)/2` so the token grid is exactly `H/s × W/s`.
//! * **Fixed** is the plain encoder at the base size.
//!
//! The total size is split across the two stages with a fixed table:
//! `16 → [4, 4]`, `8 → [4, 2]`, `4 → [2, 2]`. Between stages the encoder
//! applies layer normalization over channels and GELU; the decoder runs the
//! stages in reverse with transposed convolutions and GELU only. Without a
//! normalization the decoder maps small tokens to small fields, which keeps
//! a zero-initialized output head continuous with persistence.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Bound, Graph, PadFill, ParameterSet, Var};
use crate::error::{Error, Result};
use crate::piresize::{PIResizeConfig, ResizeCache};
use crate::tensor::Tensor;

pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TokenizerKind {
    Ckm,
    Csm,
    Fixed,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PadMode {
    Learned,
    Periodic,
    Zero,
}

/// `N_h, N_w` for kernel `k`, stride `s` and symmetric padding `pad`.
pub fn token_grid(h: usize, w: usize, k: usize, s: usize, pad: usize) -> Result<(usize, usize)> {
    if s == 0 || k == 0 {
        return Err(Error::invalid("kernel and stride must be positive"));
    }
    if h + 2 * pad < k || w + 2 * pad < k {
        return Err(Error::invalid(format!(
            "grid {}x{} with pad {} is smaller than kernel {}",
            h, w, pad, k
        )));
    }
    Ok(((h + 2 * pad - k) / s + 1, (w + 2 * pad - k) / s + 1))
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StagePlan {
    pub total: usize,
    pub per_stage: Vec<usize>,
}

pub fn split_stages(total: usize) -> Result<StagePlan> {
    let per_stage = match total {
        16 => vec![4, 4],
        8 => vec![4, 2],
        4 => vec![2, 2],
        _ => {
            return Err(Error::invalid(format!(
                "unsupported patch/stride size {} (expected 4, 8 or 16)",
                total
            )))
        }
    };
    Ok(StagePlan { total, per_stage })
}

/// Per-stage convolution settings for one forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StageSpec {
    /// Size of the stored (base) kernel.
    pub base_kernel: usize,
    /// Kernel actually applied (differs from `base_kernel` only under CKM).
    pub kernel: usize,
    pub stride: usize,
    /// Padding per side (encoder) / crop per side (decoder).
    pub pad: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenizerConfig {
    pub kind: TokenizerKind,
    /// Base total downsampling rate; its stage split gives the stored kernel sizes.
    pub k_base: usize,
    pub channels: usize,
    pub hidden_dim: usize,
    pub embed_dim: usize,
    pub pad_mode: PadMode,
    /// Nonlinearity between stages (layer norm + GELU in the encoder, GELU
    /// in the decoder). Disabling it makes the encoder/decoder pair linear.
    pub stage_activation: bool,
}

impl TokenizerConfig {
    pub fn new(kind: TokenizerKind, channels: usize, embed_dim: usize) -> Self {
        TokenizerConfig {
            kind,
            k_base: 16,
            channels,
            hidden_dim: (embed_dim / 4).max(1),
            embed_dim,
            pad_mode: PadMode::Learned,
            stage_activation: true,
        }
    }
}

/// The PadSpec of one CSM forward: mode plus per-stage amounts.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PadSpec {
    pub mode: PadMode,
    pub amounts: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct Tokenizer {
    cfg: TokenizerConfig,
    base: StagePlan,
    cache: Arc<ResizeCache>,
}

/// Token grid produced by an encoder, tagged with the size that made it.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenTensor {
    /// `[B, T, N_h, N_w, D]`
    pub data: Tensor,
    pub size: usize,
    pub kind: TokenizerKind,
}

impl Tokenizer {
    pub fn new(cfg: TokenizerConfig, cache: Arc<ResizeCache>) -> Result<Self> {
        let base = split_stages(cfg.k_base)?;
        if cfg.channels == 0 || cfg.hidden_dim == 0 || cfg.embed_dim == 0 {
            return Err(Error::invalid("tokenizer channel widths must be positive"));
        }
        Ok(Tokenizer { cfg, base, cache })
    }

    pub fn config(&self) -> &TokenizerConfig {
        &self.cfg
    }

    fn stage_widths(&self) -> [(usize, usize); 2] {
        [
            (self.cfg.channels, self.cfg.hidden_dim),
            (self.cfg.hidden_dim, self.cfg.embed_dim),
        ]
    }

    /// Stage settings for a given run-time size.
    pub fn stages(&self, size: usize) -> Result<Vec<StageSpec>> {
        let plan = split_stages(size)?;
        match self.cfg.kind {
            TokenizerKind::Fixed if size != self.cfg.k_base => Err(Error::invalid(format!(
                "fixed-patch tokenizer only supports size {}, got {}",
                self.cfg.k_base, size
            ))),
            TokenizerKind::Fixed | TokenizerKind::Ckm => Ok(self
                .base
                .per_stage
                .iter()
                .zip(&plan.per_stage)
                .map(|(&b, &k)| StageSpec {
                    base_kernel: b,
                    kernel: k,
                    stride: k,
                    pad: 0,
                })
                .collect()),
            TokenizerKind::Csm => self
                .base
                .per_stage
                .iter()
                .zip(&plan.per_stage)
                .map(|(&k, &s)| {
                    if k < s || (k - s) % 2 != 0 {
                        return Err(Error::invalid(format!(
                            "stride {} incompatible with base kernel {}: need k >= s and k - s even",
                            s, k
                        )));
                    }
                    Ok(StageSpec {
                        base_kernel: k,
                        kernel: k,
                        stride: s,
                        pad: (k - s) / 2,
                    })
                })
                .collect(),
        }
    }

    pub fn pad_spec(&self, size: usize) -> Result<PadSpec> {
        Ok(PadSpec {
            mode: self.cfg.pad_mode,
            amounts: self.stages(size)?.iter().map(|s| s.pad).collect(),
        })
    }

    /// Add freshly initialized tokenizer parameters under `enc.*` and `dec.*`.
    pub fn init_params<R: Rng + ?Sized>(&self, params: &mut ParameterSet, rng: &mut R) -> Result<()> {
        for (i, (&k, (cin, cout))) in self.base.per_stage.iter().zip(self.stage_widths()).enumerate() {
            let enc_std = 1.0 / ((k * k * cin) as f64).sqrt();
            params.insert(format!("enc.{i}.w"), Tensor::randn(&[k, k, cin, cout], enc_std, rng))?;
            params.insert(format!("enc.{i}.b"), Tensor::zeros(&[cout]))?;
            // transposed conv maps cout -> cin; each output pixel sees cout·(k/s)² inputs
            let dec_std = 1.0 / (cout as f64).sqrt();
            params.insert(format!("dec.{i}.w"), Tensor::randn(&[k, k, cin, cout], dec_std, rng))?;
            params.insert(format!("dec.{i}.b"), Tensor::zeros(&[cin]))?;
            if self.cfg.kind == TokenizerKind::Csm && self.cfg.pad_mode == PadMode::Learned {
                params.insert(format!("enc.{i}.pad"), Tensor::zeros(&[cin]))?;
            }
        }
        if self.cfg.stage_activation {
            let h = self.cfg.hidden_dim;
            params.insert("enc.norm.g", Tensor::ones(&[h]))?;
            params.insert("enc.norm.b", Tensor::zeros(&[h]))?;
        }
        Ok(())
    }

    fn stage_kernel(&self, g: &mut Graph, w: Var, spec: &StageSpec) -> Result<Var> {
        if spec.kernel == spec.base_kernel {
            return Ok(w);
        }
        let op = self
            .cache
            .operator(spec.kernel, &PIResizeConfig::new(spec.base_kernel))?;
        let s = g.shape(w).to_vec();
        g.const_matmul(op, w, &[spec.kernel, spec.kernel, s[2], s[3]])
    }

    fn check_extent(&self, h: usize, w: usize, size: usize) -> Result<()> {
        if h % size != 0 || w % size != 0 {
            return Err(Error::invalid(format!(
                "grid {}x{} is not divisible by patch/stride size {}",
                h, w, size
            )));
        }
        Ok(())
    }

    /// Encode frames `[N, H, W, C]` to tokens `[N, H/size, W/size, D]`.
    pub fn encode(&self, g: &mut Graph, p: &Bound, x: Var, size: usize) -> Result<Var> {
        let (h, w) = match *g.shape(x) {
            [_, h, w, c] if c == self.cfg.channels => (h, w),
            _ => {
                return Err(Error::invalid(format!(
                    "encoder expects [N, H, W, {}], got {:?}",
                    self.cfg.channels,
                    g.shape(x)
                )))
            }
        };
        self.check_extent(h, w, size)?;
        let stages = self.stages(size)?;
        let mut cur = x;
        for (i, spec) in stages.iter().enumerate() {
            if i > 0 && self.cfg.stage_activation {
                cur = g.layer_norm(cur, p.get("enc.norm.g")?, p.get("enc.norm.b")?, LN_EPS)?;
                cur = g.gelu(cur);
            }
            if spec.pad > 0 {
                let fill = match self.cfg.pad_mode {
                    PadMode::Zero => PadFill::Zero,
                    PadMode::Periodic => PadFill::Periodic,
                    PadMode::Learned => PadFill::Learned(p.get(&format!("enc.{i}.pad"))?),
                };
                cur = g.pad2d(cur, spec.pad, fill)?;
            }
            let kernel = self.stage_kernel(g, p.get(&format!("enc.{i}.w"))?, spec)?;
            cur = g.conv2d(cur, kernel, spec.stride, 0)?;
            cur = g.add_bias(cur, p.get(&format!("enc.{i}.b"))?)?;
        }
        let (nh, nw) = (g.shape(cur)[1], g.shape(cur)[2]);
        debug_assert_eq!((nh, nw), (h / size, w / size));
        Ok(cur)
    }

    /// Decode tokens `[N, N_h, N_w, D]` to frames `[N, N_h·size, N_w·size, C]`.
    pub fn decode(&self, g: &mut Graph, p: &Bound, tokens: Var, size: usize) -> Result<Var> {
        if g.shape(tokens).len() != 4 || g.shape(tokens)[3] != self.cfg.embed_dim {
            return Err(Error::invalid(format!(
                "decoder expects [N, N_h, N_w, {}], got {:?}",
                self.cfg.embed_dim,
                g.shape(tokens)
            )));
        }
        let stages = self.stages(size)?;
        let mut cur = tokens;
        for (i, spec) in stages.iter().enumerate().rev() {
            let kernel = self.stage_kernel(g, p.get(&format!("dec.{i}.w"))?, spec)?;
            if spec.pad > 0 && self.cfg.pad_mode == PadMode::Periodic {
                cur = g.conv_transpose2d(cur, kernel, spec.stride, 0)?;
                cur = g.fold2d_periodic(cur, spec.pad)?;
            } else {
                cur = g.conv_transpose2d(cur, kernel, spec.stride, spec.pad)?;
            }
            cur = g.add_bias(cur, p.get(&format!("dec.{i}.b"))?)?;
            if i > 0 && self.cfg.stage_activation {
                cur = g.gelu(cur);
            }
        }
        Ok(cur)
    }
}

/// Base kernels (plus norms, biases, pad tokens) of one tokenizer with the
/// shared resize-operator cache. Resized kernels are derived per call.
#[derive(Clone, Debug)]
pub struct KernelBank {
    pub tokenizer: Tokenizer,
    pub params: ParameterSet,
}

impl KernelBank {
    pub fn new<R: Rng + ?Sized>(cfg: TokenizerConfig, rng: &mut R) -> Result<Self> {
        let tokenizer = Tokenizer::new(cfg, Arc::new(ResizeCache::new()))?;
        let mut params = ParameterSet::new();
        tokenizer.init_params(&mut params, rng)?;
        Ok(KernelBank { tokenizer, params })
    }

    /// Tokenize a field `[B, H, W, T, C]`; frames are encoded independently.
    pub fn encode(&self, x: &Tensor, size: usize) -> Result<TokenTensor> {
        let (b, h, w, t, c) = field_dims(x)?;
        let frames = x.permute(&[0, 3, 1, 2, 4])?.reshape(&[b * t, h, w, c])?;
        let mut g = Graph::new();
        let p = g.bind(&self.params);
        let xv = g.input(frames);
        let tok = self.tokenizer.encode(&mut g, &p, xv, size)?;
        let s = g.shape(tok).to_vec();
        let data = g.value(tok).reshaped(&[b, t, s[1], s[2], s[3]])?;
        Ok(TokenTensor {
            data,
            size,
            kind: self.tokenizer.cfg.kind,
        })
    }

    /// Decode the last frame of `tokens` to a single-frame field `[B, H, W, 1, C]`.
    pub fn decode(&self, tokens: &TokenTensor, size: usize) -> Result<Tensor> {
        if tokens.size != size || tokens.kind != self.tokenizer.cfg.kind {
            return Err(Error::invalid(format!(
                "tokens were produced with {:?} size {}, decode asked for {:?} size {}",
                tokens.kind, tokens.size, self.tokenizer.cfg.kind, size
            )));
        }
        let s = tokens.data.shape().to_vec();
        if s.len() != 5 {
            return Err(Error::invalid("token tensor must be [B, T, N_h, N_w, D]"));
        }
        let last = tokens
            .data
            .narrow(1, s[1] - 1, 1)?
            .reshape(&[s[0], s[2], s[3], s[4]])?;
        let mut g = Graph::new();
        let p = g.bind(&self.params);
        let tv = g.input(last);
        let out = self.tokenizer.decode(&mut g, &p, tv, size)?;
        let o = g.shape(out).to_vec();
        g.value(out).reshaped(&[o[0], o[1], o[2], 1, o[3]])
    }
}

pub(crate) fn field_dims(x: &Tensor) -> Result<(usize, usize, usize, usize, usize)> {
    match *x.shape() {
        [b, h, w, t, c] => Ok((b, h, w, t, c)),
        _ => Err(Error::invalid(format!(
            "field tensors are [B, H, W, T, C], got {:?}",
            x.shape()
        ))),
    }
}

fn require_kind(bank: &KernelBank, kind: TokenizerKind) -> Result<()> {
    if bank.tokenizer.cfg.kind != kind {
        return Err(Error::invalid(format!(
            "kernel bank is {:?}, expected {:?}",
            bank.tokenizer.cfg.kind, kind
        )));
    }
    Ok(())
}

pub fn ckm_encode(x: &Tensor, k: usize, bank: &KernelBank) -> Result<TokenTensor> {
    require_kind(bank, TokenizerKind::Ckm)?;
    bank.encode(x, k)
}

pub fn ckm_decode(lat: &TokenTensor, k: usize, bank: &KernelBank) -> Result<Tensor> {
    require_kind(bank, TokenizerKind::Ckm)?;
    bank.decode(lat, k)
}

pub fn csm_encode(x: &Tensor, s: usize, bank: &KernelBank) -> Result<TokenTensor> {
    require_kind(bank, TokenizerKind::Csm)?;
    bank.encode(x, s)
}

pub fn csm_decode(lat: &TokenTensor, s: usize, bank: &KernelBank) -> Result<Tensor> {
    require_kind(bank, TokenizerKind::Csm)?;
    bank.decode(lat, s)
}
