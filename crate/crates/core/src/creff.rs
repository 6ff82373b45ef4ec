//! Cross-resolution feature fusion.
//!
//! Keyframe features `F_I` are warped by per-pixel motion into `F̂_I`,
//! low-resolution features `f_P` are upsampled into `F̄_P`, and a fusion
//! variant combines the two:
//!
//! | variant      | output                                        |
//! |--------------|-----------------------------------------------|
//! | `la`         | `F̄_P + A_P`, `A_P` = local attention (grouped QKV) |
//! | `la_dense`   | same with dense QKV encoders                  |
//! | `ga`         | attention over pooled keys/values, all positions |
//! | `conv`       | `F̄_P + conv3×3([F̂_I, F̄_P])`                  |
//! | `warp_only`  | `F̂_I`                                         |
//! | `none`       | `F̄_P`                                         |
//!
//! Without the direct connection the attention and conv variants return
//! `A_P` alone.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::backbone::{ConvLayer, ConvVars, Flops};
use crate::cost;
use crate::error::{Error, Result};
use crate::ops::{self, Candidates, ConvGeometry};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FusionKind {
    #[serde(rename = "la")]
    LocalAttention,
    #[serde(rename = "la_dense")]
    LocalAttentionDense,
    #[serde(rename = "ga")]
    GlobalAttention,
    #[serde(rename = "conv")]
    ConvFusion,
    #[serde(rename = "warp_only")]
    WarpOnly,
    #[serde(rename = "none")]
    NoFusion,
}

impl FusionKind {
    pub const ALL: [FusionKind; 6] = [
        FusionKind::LocalAttention,
        FusionKind::LocalAttentionDense,
        FusionKind::GlobalAttention,
        FusionKind::ConvFusion,
        FusionKind::WarpOnly,
        FusionKind::NoFusion,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FusionKind::LocalAttention => "la",
            FusionKind::LocalAttentionDense => "la_dense",
            FusionKind::GlobalAttention => "ga",
            FusionKind::ConvFusion => "conv",
            FusionKind::WarpOnly => "warp_only",
            FusionKind::NoFusion => "none",
        }
    }

    pub fn uses_attention(self) -> bool {
        matches!(
            self,
            FusionKind::LocalAttention | FusionKind::LocalAttentionDense | FusionKind::GlobalAttention
        )
    }
}

impl fmt::Display for FusionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FusionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        FusionKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown fusion variant '{s}' (expected la, la_dense, ga, conv, warp_only or none)")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    pub kind: FusionKind,
    /// Neighborhood side for local attention.
    #[serde(default = "default_n")]
    pub n: usize,
    /// Key/value downsample factor for global attention.
    #[serde(default = "default_ds")]
    pub ds: f64,
    #[serde(default = "default_true")]
    pub direct_connection: bool,
    /// Bias terms on the QKV (or fusion conv) encoders.
    #[serde(default)]
    pub bias: bool,
}

fn default_n() -> usize {
    7
}

fn default_ds() -> f64 {
    1.0 / 32.0
}

fn default_true() -> bool {
    true
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig::new(FusionKind::LocalAttention)
    }
}

impl FusionConfig {
    pub fn new(kind: FusionKind) -> Self {
        FusionConfig {
            kind,
            n: default_n(),
            ds: default_ds(),
            direct_connection: true,
            bias: false,
        }
    }

    pub fn local(n: usize) -> Self {
        FusionConfig {
            n,
            ..FusionConfig::new(FusionKind::LocalAttention)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.n % 2 == 0 {
            return Err(Error::invalid(format!("neighborhood side n = {} must be odd and positive", self.n)));
        }
        if !(self.ds > 0.0 && self.ds <= 1.0) {
            return Err(Error::invalid(format!("global-attention ds = {} outside (0, 1]", self.ds)));
        }
        Ok(())
    }

    /// Integer average-pooling window equivalent to `ds`.
    pub fn pool_factor(&self) -> usize {
        (1.0 / self.ds).round().max(1.0) as usize
    }

    fn qkv_groups(&self, channels: usize) -> usize {
        if self.kind == FusionKind::LocalAttentionDense {
            1
        } else {
            channels
        }
    }
}

/// Fusion parameters. Attention variants hold `[query, key, value]`
/// encoders; the conv variant holds one `2C → C` convolution; the others
/// hold nothing.
#[derive(Clone, Debug, PartialEq)]
pub struct Creff {
    pub config: FusionConfig,
    pub channels: usize,
    pub layers: Vec<ConvLayer>,
}

pub const QUERY: usize = 0;
pub const KEY: usize = 1;
pub const VALUE: usize = 2;

impl Creff {
    /// Center-tap identity QKV encoders; He-initialized fusion conv.
    pub fn new(config: FusionConfig, channels: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        if channels == 0 {
            return Err(Error::invalid("fusion needs at least one channel"));
        }
        let layers = match config.kind {
            k if k.uses_attention() => {
                let g = config.qkv_groups(channels);
                (0..3).map(|_| identity_conv(channels, g, config.bias)).collect()
            }
            FusionKind::ConvFusion => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                vec![ConvLayer::init(2 * channels, channels, 3, ConvGeometry::same(1), config.bias, &mut rng)]
            }
            _ => Vec::new(),
        };
        Ok(Creff {
            config,
            channels,
            layers,
        })
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.layers.iter().flat_map(ConvLayer::tensors)
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.layers.iter_mut().flat_map(ConvLayer::tensors_mut)
    }

    /// Replaces parameters from the front of `tensors`, checking shapes.
    pub fn load_tensors(&mut self, tensors: &mut std::vec::IntoIter<Tensor>) -> Result<()> {
        for slot in self.tensors_mut() {
            let t = tensors
                .next()
                .ok_or_else(|| Error::format("checkpoint", "too few layers for the configured fusion"))?;
            if t.shape() != slot.shape() {
                return Err(Error::format(
                    "checkpoint",
                    format!("fusion layer shape {:?} where {:?} was expected", t.shape(), slot.shape()),
                ));
            }
            *slot = t;
        }
        Ok(())
    }

    pub fn register(&self, tape: &mut Tape) -> CreffVars {
        CreffVars {
            layers: self.layers.iter().map(|l| l.register(tape)).collect(),
        }
    }

    /// Records the fusion of keyframe features `f_i` (C×H×W), a per-pixel
    /// motion field (2×H×W) and LR features `f_p` (C×h×w) onto `tape`.
    pub fn forward_tape(&self, tape: &mut Tape, vars: &CreffVars, f_i: Var, motion: &Tensor, f_p: Var) -> Result<Var> {
        let (c, h, w) = tape.value(f_i).dims3()?;
        let (cp, _, _) = tape.value(f_p).dims3()?;
        if c != self.channels || cp != self.channels {
            return Err(Error::shape(
                "creff_forward",
                format!("keyframe has {c} channels, LR features {cp}, fusion expects {}", self.channels),
            ));
        }
        if vars.layers.len() != self.layers.len() {
            return Err(Error::invalid("fusion variables do not match the fusion variant"));
        }
        let f_bar = tape.resize(f_p, h, w)?;
        if self.config.kind == FusionKind::NoFusion {
            return Ok(f_bar);
        }
        let index = Arc::new(ops::warp_index(motion, h, w)?);
        let f_hat = tape.gather(f_i, index)?;
        let a = match self.config.kind {
            FusionKind::WarpOnly => return Ok(f_hat),
            FusionKind::NoFusion => unreachable!(),
            FusionKind::ConvFusion => {
                let cat = tape.concat(&[f_hat, f_bar])?;
                vars.layers[0].apply(tape, cat)?
            }
            FusionKind::LocalAttention | FusionKind::LocalAttentionDense => {
                let q = vars.layers[QUERY].apply(tape, f_bar)?;
                let k = vars.layers[KEY].apply(tape, f_hat)?;
                let v = vars.layers[VALUE].apply(tape, f_hat)?;
                let cands = Arc::new(Candidates::neighborhood(h, w, self.config.n));
                tape.attention(v, k, q, cands)?
            }
            FusionKind::GlobalAttention => {
                let q = vars.layers[QUERY].apply(tape, f_bar)?;
                let k = vars.layers[KEY].apply(tape, f_hat)?;
                let v = vars.layers[VALUE].apply(tape, f_hat)?;
                let factor = self.config.pool_factor();
                let k = tape.avg_pool(k, factor)?;
                let v = tape.avg_pool(v, factor)?;
                let count = h.div_ceil(factor) * w.div_ceil(factor);
                tape.attention(v, k, q, Arc::new(Candidates::Global { count }))?
            }
        };
        if self.config.direct_connection {
            tape.add(f_bar, a)
        } else {
            Ok(a)
        }
    }

    /// Analytic FLOPs of one fusion with LR features at `h_lr×w_lr` and the
    /// output at `h×w`.
    pub fn flops(&self, h_lr: usize, w_lr: usize, h: usize, w: usize) -> Flops {
        fusion_flops(&self.config, self.channels, h_lr, w_lr, h, w)
    }
}

fn identity_conv(channels: usize, groups: usize, bias: bool) -> ConvLayer {
    let mut layer = ConvLayer::zeros(channels, channels, 3, ConvGeometry::same(groups), bias);
    let per_group = channels / groups;
    for c in 0..channels {
        let ic = c % per_group;
        layer.weight.data_mut()[(c * per_group + ic) * 9 + 4] = 1.0;
    }
    layer
}

#[derive(Clone, Debug)]
pub struct CreffVars {
    pub layers: Vec<ConvVars>,
}

impl CreffVars {
    pub fn all(&self) -> Vec<Var> {
        self.layers.iter().flat_map(ConvVars::vars).collect()
    }
}

/// Cost model for any fusion variant without materializing weights.
pub fn fusion_flops(config: &FusionConfig, c: usize, h_lr: usize, w_lr: usize, h: usize, w: usize) -> Flops {
    let hw = h * w;
    let mut f = Flops {
        resize: cost::resize(c, h_lr, w_lr, h, w),
        ..Flops::default()
    };
    let qkv = |groups: usize| 3 * cost::conv(3, c, c, groups, h, w);
    match config.kind {
        FusionKind::NoFusion | FusionKind::WarpOnly => return f,
        FusionKind::ConvFusion => f.conv += cost::conv(3, 2 * c, c, 1, h, w),
        FusionKind::LocalAttention | FusionKind::LocalAttentionDense => {
            f.conv += qkv(config.qkv_groups(c));
            f.attention += cost::attention(c, hw, config.n * config.n);
        }
        FusionKind::GlobalAttention => {
            let p = config.pool_factor();
            f.conv += qkv(c);
            f.pool += 2 * cost::avg_pool(c * hw);
            f.attention += cost::attention(c, hw, h.div_ceil(p) * w.div_ceil(p));
        }
    }
    if config.direct_connection {
        f.pointwise += cost::pointwise(c * hw);
    }
    f
}

/// `out(x, y) = F(x + M_x(x, y), y + M_y(x, y))` with coordinates clamped
/// into the frame.
pub fn warp_features(features: &Tensor, motion: &Tensor) -> Result<Tensor> {
    let (_, h, w) = features.dims3()?;
    ops::gather_spatial(features, &ops::warp_index(motion, h, w)?)
}

/// `(V_I, K_I, Q_P)` from warped keyframe features and upsampled LR features.
pub fn encode_qkv(f_hat: &Tensor, f_bar: &Tensor, creff: &Creff) -> Result<(Tensor, Tensor, Tensor)> {
    f_hat.expect_same_shape(f_bar, "encode_qkv")?;
    if !creff.config.kind.uses_attention() {
        return Err(Error::invalid(format!("variant '{}' has no QKV encoders", creff.config.kind)));
    }
    let l = &creff.layers;
    Ok((l[VALUE].forward(f_hat)?, l[KEY].forward(f_hat)?, l[QUERY].forward(f_bar)?))
}

/// Local attention over clamped `n×n` neighborhoods with temperature √C.
pub fn local_attention(v: &Tensor, k: &Tensor, q: &Tensor, n: usize) -> Result<Tensor> {
    Ok(local_attention_weights(v, k, q, n)?.output)
}

/// As [`local_attention`], also returning the per-position weights
/// (`H·W × n²`, row-major).
pub fn local_attention_weights(v: &Tensor, k: &Tensor, q: &Tensor, n: usize) -> Result<ops::Attention> {
    if n == 0 || n % 2 == 0 {
        return Err(Error::invalid(format!("neighborhood side n = {n} must be odd and positive")));
    }
    q.expect_same_shape(k, "local_attention")?;
    let (_, h, w) = q.dims3()?;
    ops::attention(v, k, q, &Candidates::neighborhood(h, w, n))
}

/// Fused features `F̃_P` for keyframe features `f_i`, motion field `motion`
/// and LR features `f_p`.
pub fn creff_forward(f_i: &Tensor, motion: &Tensor, f_p: &Tensor, creff: &Creff) -> Result<Tensor> {
    let mut tape = Tape::new();
    let vars = creff.register(&mut tape);
    let fi = tape.leaf(f_i.clone());
    let fp = tape.leaf(f_p.clone());
    let out = creff.forward_tape(&mut tape, &vars, fi, motion, fp)?;
    Ok(tape.value(out).clone())
}
