//! Split segmentation backbone: feature sub-network, task sub-network and a
//! final 1×1 convolution, runnable at any input scale.
//!
//! The feature sub-network is a stack of 3×3 convolutions (some strided),
//! each followed by a ramp. The task sub-network adds stride-1 3×3
//! convolutions down to `C` feature channels and one bilinear upsample back
//! to its input resolution. The final 1×1 convolution maps `C` features to
//! `K` class logits and is the only layer after the fusion point; it sits
//! behind an [`Arc`] so the low-resolution branch can share the
//! high-resolution branch's instance.

use std::fs;
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::bytes::{put_f64s, Reader};
use crate::cost;
use crate::error::{Error, Result};
use crate::ops::{conv_out_extent, ConvGeometry};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"ARWT";
pub const CHECKPOINT_VERSION: u8 = 1;

/// Smallest accepted branch input side, in pixels.
pub const MIN_INPUT_SIDE: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderLayer {
    pub channels: usize,
    pub stride: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub in_channels: usize,
    /// Feature sub-network, one 3×3 convolution per entry.
    pub encoder: Vec<EncoderLayer>,
    /// Hidden widths of the task sub-network before its last convolution
    /// down to `feature_channels`.
    pub decoder: Vec<usize>,
    pub feature_channels: usize,
    pub num_classes: usize,
    #[serde(default = "default_true")]
    pub bias: bool,
}

fn default_true() -> bool {
    true
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            in_channels: 1,
            encoder: vec![
                EncoderLayer { channels: 16, stride: 1 },
                EncoderLayer { channels: 32, stride: 2 },
                EncoderLayer { channels: 32, stride: 1 },
                EncoderLayer { channels: 64, stride: 2 },
            ],
            decoder: vec![64],
            feature_channels: 16,
            num_classes: 3,
            bias: true,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        let zero_width = self.encoder.iter().any(|l| l.channels == 0 || l.stride == 0)
            || self.decoder.contains(&0);
        if self.in_channels == 0 || self.feature_channels == 0 || self.num_classes == 0 || zero_width {
            return Err(Error::invalid("backbone widths, strides and class count must be positive"));
        }
        Ok(())
    }

    /// `(C_in, C_out, stride)` of every feature sub-network convolution.
    fn feat_layers(&self) -> Vec<(usize, usize, usize)> {
        let mut cin = self.in_channels;
        self.encoder
            .iter()
            .map(|l| {
                let out = (cin, l.channels, l.stride);
                cin = l.channels;
                out
            })
            .collect()
    }

    fn task_layers(&self) -> Vec<(usize, usize)> {
        let mut cin = self.encoder.last().map_or(self.in_channels, |l| l.channels);
        self.decoder
            .iter()
            .chain(std::iter::once(&self.feature_channels))
            .map(|&c| {
                let out = (cin, c);
                cin = c;
                out
            })
            .collect()
    }
}

/// Weights of one convolution.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
    pub geo: ConvGeometry,
}

impl ConvLayer {
    /// He-uniform initialization.
    pub fn init(cin: usize, cout: usize, k: usize, geo: ConvGeometry, bias: bool, rng: &mut impl Rng) -> Self {
        let fan_in = (cin / geo.groups * k * k) as f64;
        let bound = (6.0 / fan_in).sqrt();
        ConvLayer {
            weight: Tensor::from_fn(&[cout, cin / geo.groups, k, k], |_| rng.gen_range(-bound..bound)),
            bias: bias.then(|| Tensor::zeros(&[cout])),
            geo,
        }
    }

    pub fn zeros(cin: usize, cout: usize, k: usize, geo: ConvGeometry, bias: bool) -> Self {
        ConvLayer {
            weight: Tensor::zeros(&[cout, cin / geo.groups, k, k]),
            bias: bias.then(|| Tensor::zeros(&[cout])),
            geo,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn kernel(&self) -> usize {
        self.weight.shape()[2]
    }

    pub fn register(&self, tape: &mut Tape) -> ConvVars {
        ConvVars {
            weight: tape.leaf(self.weight.clone()),
            bias: self.bias.as_ref().map(|b| tape.leaf(b.clone())),
            geo: self.geo,
        }
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        std::iter::once(&self.weight).chain(self.bias.as_ref())
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        std::iter::once(&mut self.weight).chain(self.bias.as_mut())
    }

    pub fn forward(&self, input: &Tensor) -> Result<Tensor> {
        crate::ops::conv2d(input, &self.weight, self.bias.as_ref(), self.geo)
    }
}

/// Tape handles of a [`ConvLayer`]'s weights.
#[derive(Clone, Copy, Debug)]
pub struct ConvVars {
    pub weight: Var,
    pub bias: Option<Var>,
    pub geo: ConvGeometry,
}

impl ConvVars {
    pub fn apply(&self, tape: &mut Tape, input: Var) -> Result<Var> {
        tape.conv2d(input, self.weight, self.bias, self.geo)
    }

    pub fn vars(&self) -> impl Iterator<Item = Var> {
        std::iter::once(self.weight).chain(self.bias)
    }
}

#[derive(Clone, Debug)]
pub struct Backbone {
    pub config: BackboneConfig,
    pub n_feat: Vec<ConvLayer>,
    pub n_task: Vec<ConvLayer>,
    pub final_conv: Arc<ConvLayer>,
}

/// Tape handles for every backbone parameter.
#[derive(Clone, Debug)]
pub struct BackboneVars {
    pub n_feat: Vec<ConvVars>,
    pub n_task: Vec<ConvVars>,
    pub final_conv: ConvVars,
}

impl BackboneVars {
    /// Feature and task sub-network parameters, in [`Backbone::body_mut`] order.
    pub fn body(&self) -> Vec<Var> {
        self.n_feat.iter().chain(&self.n_task).flat_map(ConvVars::vars).collect()
    }

    pub fn all(&self) -> Vec<Var> {
        let mut v = self.body();
        v.extend(self.final_conv.vars());
        v
    }
}

impl Backbone {
    pub fn new(config: BackboneConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n_feat = config
            .feat_layers()
            .into_iter()
            .map(|(cin, cout, stride)| {
                let geo = ConvGeometry { groups: 1, stride, padding: 1 };
                ConvLayer::init(cin, cout, 3, geo, config.bias, &mut rng)
            })
            .collect();
        let n_task = config
            .task_layers()
            .into_iter()
            .map(|(cin, cout)| ConvLayer::init(cin, cout, 3, ConvGeometry::same(1), config.bias, &mut rng))
            .collect();
        let final_conv = Arc::new(ConvLayer::init(
            config.feature_channels,
            config.num_classes,
            1,
            ConvGeometry::pointwise(),
            config.bias,
            &mut rng,
        ));
        Ok(Backbone {
            config,
            n_feat,
            n_task,
            final_conv,
        })
    }

    /// All-zero weights (biases too).
    pub fn zeros(config: BackboneConfig) -> Result<Self> {
        let mut b = Self::new(config, 0)?;
        for t in b.body_mut() {
            t.data_mut().fill(0.0);
        }
        for t in Arc::make_mut(&mut b.final_conv).tensors_mut() {
            t.data_mut().fill(0.0);
        }
        Ok(b)
    }

    /// Same body, but `final_conv` replaced by a shared handle.
    pub fn with_final_conv(mut self, shared: Arc<ConvLayer>) -> Result<Self> {
        if shared.weight.shape() != self.final_conv.weight.shape() {
            return Err(Error::shape(
                "with_final_conv",
                format!("{:?} vs {:?}", shared.weight.shape(), self.final_conv.weight.shape()),
            ));
        }
        self.final_conv = shared;
        Ok(self)
    }

    pub fn body(&self) -> impl Iterator<Item = &Tensor> {
        self.n_feat.iter().chain(&self.n_task).flat_map(ConvLayer::tensors)
    }

    pub fn body_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.n_feat.iter_mut().chain(self.n_task.iter_mut()).flat_map(ConvLayer::tensors_mut)
    }

    pub fn register(&self, tape: &mut Tape) -> BackboneVars {
        BackboneVars {
            n_feat: self.n_feat.iter().map(|l| l.register(tape)).collect(),
            n_task: self.n_task.iter().map(|l| l.register(tape)).collect(),
            final_conv: self.final_conv.register(tape),
        }
    }

    /// Runs the feature and task sub-networks on an already-scaled input.
    pub fn features_tape(&self, tape: &mut Tape, vars: &BackboneVars, input: Var) -> Result<Var> {
        let (c, h, w) = tape.value(input).dims3()?;
        if c != self.config.in_channels {
            return Err(Error::shape(
                "forward_features",
                format!("frame has {c} channels, backbone expects {}", self.config.in_channels),
            ));
        }
        let mut x = input;
        for l in vars.n_feat.iter().chain(&vars.n_task) {
            let y = l.apply(tape, x)?;
            x = tape.relu(y)?;
        }
        tape.resize(x, h, w)
    }

    pub fn logits_tape(&self, tape: &mut Tape, vars: &BackboneVars, features: Var) -> Result<Var> {
        let (c, _, _) = tape.value(features).dims3()?;
        if c != self.config.feature_channels {
            return Err(Error::shape(
                "forward_logits",
                format!("features have {c} channels, final conv expects {}", self.config.feature_channels),
            ));
        }
        vars.final_conv.apply(tape, features)
    }

    /// Serializes every parameter tensor: body layers in order, then the
    /// final convolution.
    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            tensors: self.body().chain(self.final_conv.tensors()).cloned().collect(),
        }
    }

    /// Consumes this backbone's tensors from the front of `tensors`.
    pub fn load_tensors(&mut self, tensors: &mut std::vec::IntoIter<Tensor>) -> Result<()> {
        let final_conv = Arc::make_mut(&mut self.final_conv);
        for slot in self
            .n_feat
            .iter_mut()
            .chain(self.n_task.iter_mut())
            .flat_map(ConvLayer::tensors_mut)
            .chain(final_conv.tensors_mut())
        {
            let t = tensors
                .next()
                .ok_or_else(|| Error::format("checkpoint", "too few layers for the configured backbone"))?;
            if t.shape() != slot.shape() {
                return Err(Error::format(
                    "checkpoint",
                    format!("layer shape {:?} where {:?} was expected", t.shape(), slot.shape()),
                ));
            }
            *slot = t;
        }
        Ok(())
    }

    pub fn from_checkpoint(config: BackboneConfig, ckpt: Checkpoint) -> Result<Self> {
        let mut b = Self::new(config, 0)?;
        let mut it = ckpt.tensors.into_iter();
        b.load_tensors(&mut it)?;
        if it.next().is_some() {
            return Err(Error::format("checkpoint", "more layers than the configured backbone"));
        }
        Ok(b)
    }

    /// FLOPs of the feature and task sub-networks on a `C×h×w` input that is
    /// already at branch scale.
    pub fn feature_flops(&self, h: usize, w: usize) -> Flops {
        let mut f = Flops::default();
        let (mut ch, mut cw) = (h, w);
        for l in self.n_feat.iter().chain(&self.n_task) {
            let k = l.kernel();
            let (oh, ow) = (
                conv_out_extent(ch, k, l.geo.stride, l.geo.padding).unwrap_or(0),
                conv_out_extent(cw, k, l.geo.stride, l.geo.padding).unwrap_or(0),
            );
            let cin = l.weight.shape()[1] * l.geo.groups;
            f.conv += cost::conv(k, cin, l.out_channels(), l.geo.groups, oh, ow);
            f.pointwise += cost::pointwise(l.out_channels() * oh * ow);
            (ch, cw) = (oh, ow);
        }
        f.resize += cost::resize(self.config.feature_channels, ch, cw, h, w);
        f
    }

    pub fn final_conv_flops(&self, h: usize, w: usize) -> u64 {
        cost::conv(1, self.config.feature_channels, self.config.num_classes, 1, h, w)
    }
}

/// FLOPs split by kind.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Flops {
    pub conv: u64,
    pub resize: u64,
    pub pointwise: u64,
    pub attention: u64,
    pub pool: u64,
}

impl Flops {
    pub fn total(&self) -> u64 {
        self.conv + self.resize + self.pointwise + self.attention + self.pool
    }
}

impl std::ops::Add for Flops {
    type Output = Flops;
    fn add(self, o: Flops) -> Flops {
        Flops {
            conv: self.conv + o.conv,
            resize: self.resize + o.resize,
            pointwise: self.pointwise + o.pointwise,
            attention: self.attention + o.attention,
            pool: self.pool + o.pool,
        }
    }
}

/// A backbone together with the input scale it runs at.
#[derive(Clone, Debug)]
pub struct BranchConfig {
    pub scale: f64,
    pub backbone: Backbone,
}

impl BranchConfig {
    pub fn new(scale: f64, backbone: Backbone) -> Result<Self> {
        if !(scale > 0.0 && scale <= 1.0) {
            return Err(Error::invalid(format!("branch scale {scale} outside (0, 1]")));
        }
        Ok(BranchConfig { scale, backbone })
    }

    /// Input grid the branch runs at for an `h×w` frame.
    pub fn input_size(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let (sh, sw) = (
            (self.scale * h as f64).round() as usize,
            (self.scale * w as f64).round() as usize,
        );
        if sh < MIN_INPUT_SIDE || sw < MIN_INPUT_SIDE {
            return Err(Error::invalid(format!(
                "scale {} turns {h}×{w} into {sh}×{sw}; both sides must be at least {MIN_INPUT_SIDE}",
                self.scale
            )));
        }
        Ok((sh, sw))
    }

    /// Resizes `frame` to branch scale and returns the features that feed
    /// the final convolution, at the branch's input grid.
    pub fn features_tape(&self, tape: &mut Tape, vars: &BackboneVars, frame: Var) -> Result<Var> {
        let (_, h, w) = tape.value(frame).dims3()?;
        let (sh, sw) = self.input_size(h, w)?;
        let x = tape.resize(frame, sh, sw)?;
        self.backbone.features_tape(tape, vars, x)
    }

    pub fn forward_features(&self, frame: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = self.backbone.register(&mut tape);
        let x = tape.leaf(frame.clone());
        let f = self.features_tape(&mut tape, &vars, x)?;
        Ok(tape.value(f).clone())
    }

    /// Applies only the final 1×1 convolution.
    pub fn forward_logits(&self, features: &Tensor) -> Result<Tensor> {
        let (c, _, _) = features.dims3()?;
        if c != self.backbone.config.feature_channels {
            return Err(Error::shape(
                "forward_logits",
                format!(
                    "features have {c} channels, final conv expects {}",
                    self.backbone.config.feature_channels
                ),
            ));
        }
        self.backbone.final_conv.forward(features)
    }

    /// Analytic FLOPs of one standalone pass over a `C×h×w` frame: input
    /// resize, both sub-networks and the final convolution at the branch grid.
    pub fn flops(&self, h: usize, w: usize) -> Result<Flops> {
        let (sh, sw) = self.input_size(h, w)?;
        let mut f = self.backbone.feature_flops(sh, sw);
        f.resize += cost::resize(self.backbone.config.in_channels, h, w, sh, sw);
        f.conv += self.backbone.final_conv_flops(sh, sw);
        Ok(f)
    }
}

/// Total analytic FLOPs of `branch` on an `h×w` frame.
pub fn flops_of(branch: &BranchConfig, h: usize, w: usize) -> Result<u64> {
    Ok(branch.flops(h, w)?.total())
}

/// Flat list of parameter tensors in the `ARWT` layout: magic, `u8`
/// version, `u32` layer count, then per layer a `u8` rank, `u32` extents and
/// the `f64` payload, all little-endian.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub tensors: Vec<Tensor>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.push(CHECKPOINT_VERSION);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            out.push(t.rank() as u8);
            for &e in t.shape() {
                out.extend_from_slice(&(e as u32).to_le_bytes());
            }
            put_f64s(&mut out, t.data());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, "checkpoint");
        let magic = r.take(4)?;
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::format("checkpoint", format!("bad magic {magic:?}")));
        }
        let version = r.u8()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::format("checkpoint", format!("unsupported version {version}")));
        }
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(4096));
        for i in 0..count {
            let rank = r.u8()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32()? as usize);
            }
            let n = shape.iter().product::<usize>();
            let data = r.f64_vec(n)?;
            tensors.push(
                Tensor::new(&shape, data).map_err(|e| Error::format("checkpoint", format!("layer {i}: {e}")))?,
            );
        }
        r.finish()?;
        Ok(Checkpoint { tensors })
    }

    pub fn write_file(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn read_file(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}
