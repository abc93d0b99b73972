//! The patch Transformer: patch embedding with a learned position table,
//! a multi-head attention encoder with batch norm, feed-forward blocks and
//! residual connections, and either a flatten + linear forecast head or a
//! token-wise reconstruction head.
//!
//! Activations are kept token-major, `[rows, N, D]`, i.e. each row is the
//! transpose of the `D × N` representation. The position table is stored
//! the same way, `[N, D]`.

use indexmap::IndexMap;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{BatchStats, Graph, NormMode, Var};
use crate::data::{instance_normalize, InstanceStats, INSTANCE_EPS};
use crate::error::{Error, Result};
use crate::patching::{
    apply_mask, channel_independent_reshape, channel_mixing_reshape, PatchConfig, PatchMask,
    PatchMode,
};
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
pub const INIT_SCALE: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChannelMode {
    /// Every channel is its own row through shared weights.
    Independent,
    /// Tokens concatenate all channels' patches (ablation variant).
    Mixing,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadKind {
    Forecast,
    Reconstruct,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub lookback: usize,
    pub horizon: usize,
    pub patch_len: usize,
    pub stride: usize,
    pub patch_mode: PatchMode,
    pub d_model: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub layers: usize,
    pub dropout: f64,
    pub channel_mode: ChannelMode,
    /// Input channel count; only shapes parameters in mixing mode.
    pub channels: usize,
    pub instance_norm: bool,
    pub head_kind: HeadKind,
}

impl Default for ModelConfig {
    /// The 42-patch supervised preset: L=336, P=16, S=8, D=128, H=16,
    /// F=256, three layers, dropout 0.2.
    fn default() -> Self {
        Self {
            lookback: 336,
            horizon: 96,
            patch_len: 16,
            stride: 8,
            patch_mode: PatchMode::PaddedOverlap,
            d_model: 128,
            heads: 16,
            d_ff: 256,
            layers: 3,
            dropout: 0.2,
            channel_mode: ChannelMode::Independent,
            channels: 1,
            instance_norm: true,
            head_kind: HeadKind::Forecast,
        }
    }
}

impl ModelConfig {
    /// Reduced size for small datasets: H=4, D=16, F=128.
    pub fn small() -> Self {
        Self {
            d_model: 16,
            heads: 4,
            d_ff: 128,
            ..Self::default()
        }
    }

    pub fn patch_config(&self) -> Result<PatchConfig> {
        PatchConfig::validated(self.patch_len, self.stride, self.patch_mode)
    }

    pub fn num_patches(&self) -> Result<usize> {
        self.patch_config()?.num_patches(self.lookback)
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    /// Feature width of one input token.
    pub fn token_width(&self) -> usize {
        match self.channel_mode {
            ChannelMode::Independent => self.patch_len,
            ChannelMode::Mixing => self.channels * self.patch_len,
        }
    }

    /// Output width of the forecast head per row.
    pub fn forecast_width(&self) -> usize {
        match self.channel_mode {
            ChannelMode::Independent => self.horizon,
            ChannelMode::Mixing => self.channels * self.horizon,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.d_model == 0 || self.d_model % self.heads != 0 {
            return Err(Error::config(format!(
                "d_model {} is not divisible by heads {}",
                self.d_model, self.heads
            )));
        }
        if self.layers == 0 || self.d_ff == 0 {
            return Err(Error::config("layers and d_ff must be ≥ 1"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if self.horizon == 0 || self.channels == 0 {
            return Err(Error::config("horizon and channels must be ≥ 1"));
        }
        self.num_patches()?;
        Ok(())
    }
}

/// Which optimizer group a parameter belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    /// Embedding, position table and encoder layers.
    Trunk,
    Head,
    /// Batch-norm running statistics (not learned by gradient).
    Buffer,
}

impl ParamGroup {
    pub fn as_str(self) -> &'static str {
        match self {
            ParamGroup::Trunk => "trunk",
            ParamGroup::Head => "head",
            ParamGroup::Buffer => "buffer",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "trunk" => Some(ParamGroup::Trunk),
            "head" => Some(ParamGroup::Head),
            "buffer" => Some(ParamGroup::Buffer),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub tensor: Tensor,
    pub group: ParamGroup,
}

/// Every array of the model keyed by canonical name, in canonical order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ModelParams {
    entries: IndexMap<String, Param>,
}

enum Init {
    Uniform,
    Zeros,
    Ones,
}

impl ModelParams {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor, group: ParamGroup) {
        self.entries.insert(name.into(), Param { tensor, group });
    }

    pub fn get(&self, name: &str) -> Result<&Param> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        Ok(&self.get(name)?.tensor)
    }

    pub fn tensor_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.entries
            .get_mut(name)
            .map(|p| &mut p.tensor)
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn remove_group(&mut self, group: ParamGroup) {
        self.entries.retain(|_, p| p.group != group);
    }

    /// Total element count of a group.
    pub fn count(&self, group: ParamGroup) -> usize {
        self.entries
            .values()
            .filter(|p| p.group == group)
            .map(|p| p.tensor.numel())
            .sum()
    }

    /// Order-sensitive FNV-1a digest over names and raw bits of every
    /// array of the selected groups.
    pub fn digest(&self, groups: &[ParamGroup]) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |bytes: &[u8]| {
            for b in bytes {
                h ^= u64::from(*b);
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        };
        for (name, p) in self.iter().filter(|(_, p)| groups.contains(&p.group)) {
            eat(name.as_bytes());
            for v in p.tensor.data() {
                eat(&v.to_bits().to_le_bytes());
            }
        }
        h
    }

    /// Canonical parameter set for a configuration, initialized with
    /// `uniform(−0.02, 0.02)` weights, zero biases, unit BN scales.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Self::new();
        let n = cfg.num_patches()?;
        let (d, f, w) = (cfg.d_model, cfg.d_ff, cfg.token_width());
        let mut add = |params: &mut Self, name: String, shape: &[usize], init: Init, group| {
            let t = match init {
                Init::Uniform => {
                    Tensor::from_fn(shape, |_| rng.random_range(-INIT_SCALE..INIT_SCALE))
                }
                Init::Zeros => Tensor::zeros(shape),
                Init::Ones => Tensor::full(shape, 1.0),
            };
            params.insert(name, t, group);
        };
        use ParamGroup::{Buffer, Trunk};
        add(&mut params, "embed.w_p".into(), &[d, w], Init::Uniform, Trunk);
        add(&mut params, "embed.w_pos".into(), &[n, d], Init::Uniform, Trunk);
        for l in 0..cfg.layers {
            for m in ["w_q", "w_k", "w_v", "w_o"] {
                add(&mut params, format!("layers.{l}.attn.{m}"), &[d, d], Init::Uniform, Trunk);
            }
            add_bn(&mut params, &mut add, &format!("layers.{l}.bn1"), d);
            add(&mut params, format!("layers.{l}.ffn.w1"), &[f, d], Init::Uniform, Trunk);
            add(&mut params, format!("layers.{l}.ffn.b1"), &[f], Init::Zeros, Trunk);
            add(&mut params, format!("layers.{l}.ffn.w2"), &[d, f], Init::Uniform, Trunk);
            add(&mut params, format!("layers.{l}.ffn.b2"), &[d], Init::Zeros, Trunk);
            add_bn(&mut params, &mut add, &format!("layers.{l}.bn2"), d);
        }
        fn add_bn(
            params: &mut ModelParams,
            add: &mut impl FnMut(&mut ModelParams, String, &[usize], Init, ParamGroup),
            prefix: &str,
            d: usize,
        ) {
            add(params, format!("{prefix}.gamma"), &[d], Init::Ones, Trunk);
            add(params, format!("{prefix}.beta"), &[d], Init::Zeros, Trunk);
            add(params, format!("{prefix}.running_mean"), &[d], Init::Zeros, Buffer);
            add(params, format!("{prefix}.running_var"), &[d], Init::Ones, Buffer);
        }
        params.reset_head(cfg, &mut rng)?;
        Ok(params)
    }

    /// Replaces the task head with a freshly initialized one for `cfg`.
    pub fn reset_head<R: Rng + ?Sized>(&mut self, cfg: &ModelConfig, rng: &mut R) -> Result<()> {
        self.remove_group(ParamGroup::Head);
        let n = cfg.num_patches()?;
        let d = cfg.d_model;
        let mut uniform =
            |shape: &[usize]| Tensor::from_fn(shape, |_| rng.random_range(-INIT_SCALE..INIT_SCALE));
        match cfg.head_kind {
            HeadKind::Forecast => {
                let out = cfg.forecast_width();
                self.insert("head.forecast.w", uniform(&[out, n * d]), ParamGroup::Head);
                self.insert("head.forecast.b", Tensor::zeros(&[out]), ParamGroup::Head);
            }
            HeadKind::Reconstruct => {
                let w = cfg.token_width();
                self.insert("head.reconstruct.w", uniform(&[w, d]), ParamGroup::Head);
                self.insert("head.reconstruct.b", Tensor::zeros(&[w]), ParamGroup::Head);
            }
        }
        Ok(())
    }

    /// Adds every parameter to `g`; those whose group passes `trainable`
    /// receive gradients. Buffers are never bound.
    pub fn bind(&self, g: &mut Graph, trainable: impl Fn(ParamGroup) -> bool) -> Bound {
        let vars = self
            .entries
            .iter()
            .filter(|(_, p)| p.group != ParamGroup::Buffer)
            .map(|(name, p)| {
                let v = if trainable(p.group) {
                    g.param(p.tensor.clone())
                } else {
                    g.constant(p.tensor.clone())
                };
                (name.clone(), v)
            })
            .collect();
        Bound { vars }
    }

    /// Folds train-mode batch statistics into the running estimates.
    pub fn apply_bn_updates(&mut self, updates: &[(String, BatchStats)]) -> Result<()> {
        for (prefix, stats) in updates {
            let unbias = if stats.count > 1 {
                stats.count as f64 / (stats.count - 1) as f64
            } else {
                1.0
            };
            let rm = self.tensor_mut(&format!("{prefix}.running_mean"))?;
            for (r, m) in rm.data_mut().iter_mut().zip(&stats.mean) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * m;
            }
            let rv = self.tensor_mut(&format!("{prefix}.running_var"))?;
            for (r, v) in rv.data_mut().iter_mut().zip(&stats.var) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v * unbias;
            }
        }
        Ok(())
    }
}

/// Graph handles of the bound parameters.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: IndexMap<String, Var>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Checkpoint(format!("parameter {name} not bound")))
    }

    /// Rebinds `name` to another graph variable (e.g. a gradient-check input).
    pub fn insert(&mut self, name: impl Into<String>, var: Var) {
        self.vars.insert(name.into(), var);
    }

    /// Gradients of every bound parameter that received one.
    pub fn grads(&self, g: &Graph) -> Vec<(String, Vec<f64>)> {
        self.vars
            .iter()
            .filter_map(|(name, &v)| g.grad(v).map(|gr| (name.clone(), gr.to_vec())))
            .collect()
    }
}

/// Train passes draw dropout masks from the given stream and use batch
/// statistics; eval passes are deterministic.
pub enum Pass<'a> {
    Train(&'a mut ChaCha8Rng),
    Eval,
}

impl Pass<'_> {
    pub fn is_train(&self) -> bool {
        matches!(self, Pass::Train(_))
    }

    fn rng(&mut self) -> Option<&mut ChaCha8Rng> {
        match self {
            Pass::Train(r) => Some(&mut **r),
            Pass::Eval => None,
        }
    }
}

/// Side outputs of one forward pass.
#[derive(Debug, Default)]
pub struct Trace {
    /// Batch-norm prefix and batch statistics (train passes only).
    pub bn_updates: Vec<(String, BatchStats)>,
    /// Post-softmax attention per layer, `[rows, H, N, N]`, when captured.
    pub attention: Option<Vec<Tensor>>,
}

impl Trace {
    pub fn capturing() -> Self {
        Self {
            bn_updates: Vec::new(),
            attention: Some(Vec::new()),
        }
    }
}

/// `x_d = W_p · patch + W_pos` per token, followed by dropout.
/// `tokens` is `[rows, N, W]`; returns `[rows, N, D]`.
pub fn embed(g: &mut Graph, tokens: Var, w_p: Var, w_pos: Var, dropout: f64, pass: &mut Pass<'_>) -> Result<Var> {
    let n = g.shape(tokens)[1];
    if g.shape(w_pos)[0] != n {
        return Err(Error::Shape {
            op: "embed position table",
            lhs: g.shape(tokens).to_vec(),
            rhs: g.shape(w_pos).to_vec(),
        });
    }
    let proj = g.matmul_t(tokens, w_p)?;
    let x = g.add(proj, w_pos)?;
    g.dropout(x, dropout, pass.rng())
}

/// Multi-head scaled dot-product self-attention over `[rows, N, D]`.
/// Head `h` uses columns `h·d_k..(h+1)·d_k` of the query, key and value
/// projections; head outputs are concatenated and projected by `W^O`.
/// Returns the output and the post-softmax weights `[rows, H, N, N]`.
#[allow(clippy::too_many_arguments)]
pub fn attention(
    g: &mut Graph,
    x: Var,
    w_q: Var,
    w_k: Var,
    w_v: Var,
    w_o: Var,
    heads: usize,
    dropout: f64,
    pass: &mut Pass<'_>,
) -> Result<(Var, Var)> {
    let &[rows, n, d] = g.shape(x) else {
        return Err(Error::InvalidShape {
            shape: g.shape(x).to_vec(),
            reason: "attention expects [rows, N, D]".into(),
        });
    };
    if heads == 0 || d % heads != 0 {
        return Err(Error::config(format!("d_model {d} not divisible by {heads} heads")));
    }
    let dk = d / heads;
    let mut split = |w: Var| -> Result<Var> {
        let p = g.matmul(x, w)?;
        let p = g.reshape(p, &[rows, n, heads, dk])?;
        g.permute(p, &[0, 2, 1, 3])
    };
    let q = split(w_q)?;
    let k = split(w_k)?;
    let v = split(w_v)?;
    let scores = g.matmul_t(q, k)?;
    let scores = g.scale(scores, 1.0 / (dk as f64).sqrt())?;
    let weights = g.softmax_lastdim(scores)?;
    let dropped = g.dropout(weights, dropout, pass.rng())?;
    let ctx = g.matmul(dropped, v)?;
    let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
    let ctx = g.reshape(ctx, &[rows, n, d])?;
    Ok((g.matmul(ctx, w_o)?, weights))
}

fn batchnorm(
    g: &mut Graph,
    params: &ModelParams,
    bound: &Bound,
    prefix: &str,
    x: Var,
    pass: &Pass<'_>,
    trace: &mut Trace,
) -> Result<Var> {
    let gamma = bound.var(&format!("{prefix}.gamma"))?;
    let beta = bound.var(&format!("{prefix}.beta"))?;
    if pass.is_train() {
        let (y, stats) = g.batchnorm(x, gamma, beta, NormMode::Train, BN_EPS)?;
        trace
            .bn_updates
            .push((prefix.to_string(), stats.expect("train mode returns stats")));
        Ok(y)
    } else {
        let mean = params.tensor(&format!("{prefix}.running_mean"))?.data();
        let var = params.tensor(&format!("{prefix}.running_var"))?.data();
        Ok(g.batchnorm(x, gamma, beta, NormMode::Eval { mean, var }, BN_EPS)?.0)
    }
}

/// One post-norm encoder block:
/// `y = BN₁(x + Dropout(Attn(x)))`, `out = BN₂(y + Dropout(W₂·GELU(W₁·y)))`.
#[allow(clippy::too_many_arguments)]
pub fn encoder_layer(
    g: &mut Graph,
    params: &ModelParams,
    bound: &Bound,
    cfg: &ModelConfig,
    layer: usize,
    x: Var,
    pass: &mut Pass<'_>,
    trace: &mut Trace,
) -> Result<Var> {
    let name = |s: &str| format!("layers.{layer}.{s}");
    let (attn, weights) = attention(
        g,
        x,
        bound.var(&name("attn.w_q"))?,
        bound.var(&name("attn.w_k"))?,
        bound.var(&name("attn.w_v"))?,
        bound.var(&name("attn.w_o"))?,
        cfg.heads,
        cfg.dropout,
        pass,
    )?;
    if let Some(maps) = trace.attention.as_mut() {
        maps.push(g.value(weights).clone());
    }
    let attn = g.dropout(attn, cfg.dropout, pass.rng())?;
    let r1 = g.add(x, attn)?;
    let y = batchnorm(g, params, bound, &name("bn1"), r1, pass, trace)?;

    let h = g.matmul_t(y, bound.var(&name("ffn.w1"))?)?;
    let h = g.add(h, bound.var(&name("ffn.b1"))?)?;
    let h = g.gelu(h)?;
    let f = g.matmul_t(h, bound.var(&name("ffn.w2"))?)?;
    let f = g.add(f, bound.var(&name("ffn.b2"))?)?;
    let f = g.dropout(f, cfg.dropout, pass.rng())?;
    let r2 = g.add(y, f)?;
    batchnorm(g, params, bound, &name("bn2"), r2, pass, trace)
}

/// Embedding plus every encoder layer: `[rows, N, W] → [rows, N, D]`.
pub fn trunk(
    g: &mut Graph,
    params: &ModelParams,
    bound: &Bound,
    cfg: &ModelConfig,
    tokens: Var,
    pass: &mut Pass<'_>,
    trace: &mut Trace,
) -> Result<Var> {
    let mut x = embed(
        g,
        tokens,
        bound.var("embed.w_p")?,
        bound.var("embed.w_pos")?,
        cfg.dropout,
        pass,
    )?;
    for layer in 0..cfg.layers {
        x = encoder_layer(g, params, bound, cfg, layer, x, pass, trace)?;
    }
    Ok(x)
}

/// Flatten `[rows, N, D]` to `[rows, N·D]` and apply the shared linear
/// head: `[rows, N, D] → [rows, out]`.
pub fn forecast_head(g: &mut Graph, z: Var, w: Var, b: Var) -> Result<Var> {
    let &[rows, n, d] = g.shape(z) else {
        return Err(Error::InvalidShape {
            shape: g.shape(z).to_vec(),
            reason: "forecast head expects [rows, N, D]".into(),
        });
    };
    if g.shape(w)[1] != n * d {
        return Err(Error::Shape {
            op: "forecast head (patch count differs from the head's)",
            lhs: g.shape(z).to_vec(),
            rhs: g.shape(w).to_vec(),
        });
    }
    let flat = g.reshape(z, &[rows, n * d])?;
    let out = g.matmul_t(flat, w)?;
    g.add(out, b)
}

/// Token-wise linear map `D → W`: `[rows, N, D] → [rows, N, W]`.
pub fn reconstruct_head(g: &mut Graph, z: Var, w: Var, b: Var) -> Result<Var> {
    let out = g.matmul_t(z, w)?;
    g.add(out, b)
}

/// Input tokens `[rows, N, W]` for `x: [B, M, L]` (already normalized).
fn tokens_from_patches(cfg: &ModelConfig, patches: &Tensor) -> Result<Tensor> {
    match cfg.channel_mode {
        ChannelMode::Independent => channel_independent_reshape(patches)?.values.permute(&[0, 2, 1]),
        ChannelMode::Mixing => channel_mixing_reshape(patches)?.permute(&[0, 2, 1]),
    }
}

/// Optional per-row instance normalization of `x: [B, M, L]`.
fn normalize_input(cfg: &ModelConfig, x: &Tensor) -> Result<(Tensor, Option<InstanceStats>)> {
    let &[_, m, l] = x.shape() else {
        return Err(Error::InvalidShape {
            shape: x.shape().to_vec(),
            reason: "expected [batch, channels, look-back]".into(),
        });
    };
    if l != cfg.lookback {
        return Err(Error::Shape {
            op: "look-back length",
            lhs: x.shape().to_vec(),
            rhs: vec![cfg.lookback],
        });
    }
    if cfg.channel_mode == ChannelMode::Mixing && m != cfg.channels {
        return Err(Error::Shape {
            op: "channel count of the mixing model",
            lhs: x.shape().to_vec(),
            rhs: vec![cfg.channels],
        });
    }
    if !cfg.instance_norm {
        return Ok((x.clone(), None));
    }
    let (norm, stats) = instance_normalize(x.data(), l);
    Ok((Tensor::new(x.shape().to_vec(), norm)?, Some(stats)))
}

/// Supervised forecast in both normalized and data space.
#[derive(Debug)]
pub struct ForecastOutput {
    /// `[B, M, T]`, instance statistics added back.
    pub pred: Var,
    /// `[B, M, T]` before de-normalization (same as `pred` without it).
    pub pred_norm: Var,
    pub stats: Option<InstanceStats>,
}

/// Encoder features for a supervised batch.
#[derive(Debug)]
pub struct Features {
    /// `[rows, N, D]`
    pub z: Var,
    pub batch: usize,
    pub channels: usize,
    pub stats: Option<InstanceStats>,
}

/// Normalize → patch → reshape → embed → encoder.
pub fn encode(
    g: &mut Graph,
    params: &ModelParams,
    bound: &Bound,
    cfg: &ModelConfig,
    x: &Tensor,
    pass: &mut Pass<'_>,
    trace: &mut Trace,
) -> Result<Features> {
    let (xn, stats) = normalize_input(cfg, x)?;
    let patches = cfg.patch_config()?.patchify_batch(&xn)?;
    let tokens = g.constant(tokens_from_patches(cfg, &patches)?);
    let z = trunk(g, params, bound, cfg, tokens, pass, trace)?;
    Ok(Features {
        z,
        batch: x.shape()[0],
        channels: x.shape()[1],
        stats,
    })
}

/// Forecast head applied to features, followed by de-normalization.
pub fn head_from_features(
    g: &mut Graph,
    bound: &Bound,
    cfg: &ModelConfig,
    feats: &Features,
) -> Result<ForecastOutput> {
    let out = forecast_head(
        g,
        feats.z,
        bound.var("head.forecast.w")?,
        bound.var("head.forecast.b")?,
    )?;
    let (b, m, t) = (feats.batch, feats.channels, cfg.horizon);
    let pred_norm = g.reshape(out, &[b, m, t])?;
    let pred = match &feats.stats {
        None => pred_norm,
        Some(stats) => {
            let scale = Tensor::from_fn(&[b, m, t], |i| stats.std[i / t] + INSTANCE_EPS);
            let shift = Tensor::from_fn(&[b, m, t], |i| stats.mean[i / t]);
            let scale = g.constant(scale);
            let shift = g.constant(shift);
            let scaled = g.mul(pred_norm, scale)?;
            g.add(scaled, shift)?
        }
    };
    Ok(ForecastOutput {
        pred,
        pred_norm,
        stats: feats.stats.clone(),
    })
}

/// Full supervised forward pass for `x: [B, M, L]`.
pub fn forward_supervised(
    g: &mut Graph,
    params: &ModelParams,
    bound: &Bound,
    cfg: &ModelConfig,
    x: &Tensor,
    pass: &mut Pass<'_>,
    trace: &mut Trace,
) -> Result<ForecastOutput> {
    if cfg.head_kind != HeadKind::Forecast {
        return Err(Error::config("supervised forward needs a forecast head"));
    }
    let feats = encode(g, params, bound, cfg, x, pass, trace)?;
    head_from_features(g, bound, cfg, &feats)
}

#[derive(Debug)]
pub struct PretrainOutput {
    /// `[B, M, P, N]`
    pub recon: Var,
    /// Normalized, unmasked patches `[B, M, P, N]`.
    pub target: Tensor,
    /// Masked patches as handed to the embedding, `[B·M, P, N]`.
    pub masked_input: Tensor,
    pub stats: Option<InstanceStats>,
}

/// Masked-reconstruction forward pass. Masked patches are zeroed after
/// instance normalization and before the embedding.
#[allow(clippy::too_many_arguments)]
pub fn forward_pretrain(
    g: &mut Graph,
    params: &ModelParams,
    bound: &Bound,
    cfg: &ModelConfig,
    x: &Tensor,
    mask: &PatchMask,
    pass: &mut Pass<'_>,
    trace: &mut Trace,
) -> Result<PretrainOutput> {
    if cfg.patch_mode != PatchMode::NonOverlap {
        return Err(Error::config(
            "masked pretraining needs non-overlapping patches so visible patches carry no masked values",
        ));
    }
    if cfg.head_kind != HeadKind::Reconstruct {
        return Err(Error::config("pretraining needs a reconstruction head"));
    }
    if cfg.channel_mode != ChannelMode::Independent {
        return Err(Error::config("pretraining runs in channel-independent mode"));
    }
    let (xn, stats) = normalize_input(cfg, x)?;
    let patches = cfg.patch_config()?.patchify_batch(&xn)?;
    let &[b, m, p, n] = patches.shape() else { unreachable!() };
    let ci = channel_independent_reshape(&patches)?;
    let masked = apply_mask(&ci.values, mask)?;
    let tokens = g.constant(masked.permute(&[0, 2, 1])?);
    let z = trunk(g, params, bound, cfg, tokens, pass, trace)?;
    let rec = reconstruct_head(
        g,
        z,
        bound.var("head.reconstruct.w")?,
        bound.var("head.reconstruct.b")?,
    )?;
    let rec = g.permute(rec, &[0, 2, 1])?;
    let recon = g.reshape(rec, &[b, m, p, n])?;
    Ok(PretrainOutput {
        recon,
        target: patches,
        masked_input: masked,
        stats,
    })
}

/// A configuration with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ModelParams,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let params = ModelParams::init(&config, seed)?;
        Ok(Self { config, params })
    }

    /// Eval-mode forecast `[B, M, T]` in data space.
    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let bound = self.params.bind(&mut g, |_| false);
        let out = forward_supervised(
            &mut g,
            &self.params,
            &bound,
            &self.config,
            x,
            &mut Pass::Eval,
            &mut Trace::default(),
        )?;
        Ok(g.value(out.pred).clone())
    }

    /// Eval-mode encoder features `[B·M, N, D]` (or `[B, N, D]` when mixing)
    /// and the instance statistics of the input.
    pub fn features(&self, x: &Tensor) -> Result<(Tensor, Option<InstanceStats>)> {
        let mut g = Graph::new();
        let bound = self.params.bind(&mut g, |_| false);
        let f = encode(
            &mut g,
            &self.params,
            &bound,
            &self.config,
            x,
            &mut Pass::Eval,
            &mut Trace::default(),
        )?;
        Ok((g.value(f.z).clone(), f.stats))
    }

    /// Attention maps averaged over every layer and head: one `[N, N]` map
    /// per row (`b·M + m` in channel-independent mode).
    pub fn export_attention(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let mut g = Graph::new();
        let bound = self.params.bind(&mut g, |_| false);
        let mut trace = Trace::capturing();
        encode(
            &mut g,
            &self.params,
            &bound,
            &self.config,
            x,
            &mut Pass::Eval,
            &mut trace,
        )?;
        let maps = trace.attention.expect("capturing trace");
        average_attention(&maps)
    }
}

/// Mean over layers and heads of `[rows, H, N, N]` attention tensors.
pub fn average_attention(layers: &[Tensor]) -> Result<Vec<Tensor>> {
    let first = layers
        .first()
        .ok_or_else(|| Error::data("no attention maps captured"))?;
    let &[rows, heads, n, _] = first.shape() else {
        return Err(Error::InvalidShape {
            shape: first.shape().to_vec(),
            reason: "expected [rows, H, N, N]".into(),
        });
    };
    let denom = (layers.len() * heads) as f64;
    (0..rows)
        .map(|r| {
            let mut acc = vec![0.0; n * n];
            for t in layers {
                for h in 0..heads {
                    let off = (r * heads + h) * n * n;
                    for (a, v) in acc.iter_mut().zip(&t.data()[off..off + n * n]) {
                        *a += v;
                    }
                }
            }
            acc.iter_mut().for_each(|a| *a /= denom);
            Tensor::new(vec![n, n], acc)
        })
        .collect()
}
