//! Training: plain cross-entropy training of a branch, and feature
//! similarity training of the low-resolution path against a frozen
//! high-resolution branch.
//!
//! The similarity objective for a non-keyframe `p` with keyframe `i` is
//! `CE(S_P, G_P) + MSE(F̃_P, F_P)`, where `F̃_P` is the fused feature map,
//! `S_P` the logits the shared final convolution produces from it, and
//! `F_P` the frozen HR branch's features of frame `p`.

use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{grad_check, GradCheck, Tape, Var};
use crate::backbone::{Backbone, BackboneVars, BranchConfig, Checkpoint, ConvVars};
use crate::creff::{Creff, CreffVars};
use crate::error::{Error, Result};
use crate::ops;
use crate::tensor::{LabelMap, Tensor};
use crate::IGNORE_INDEX;

/// Feature-similarity term added to the cross-entropy.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SimilarityLoss {
    #[default]
    Mse,
    Kl,
    None,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub loss: SimilarityLoss,
    /// Rescales each step's gradient to at most this global L2 norm.
    #[serde(default)]
    pub clip_norm: Option<f64>,
}

fn default_momentum() -> f64 {
    0.9
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 1,
            lr: 0.01,
            momentum: default_momentum(),
            seed: 0,
            loss: SimilarityLoss::Mse,
            clip_norm: None,
        }
    }
}

impl TrainConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: TrainConfig = serde_json::from_str(text)?;
        if !(cfg.lr >= 0.0 && cfg.lr.is_finite()) || !(0.0..1.0).contains(&cfg.momentum) {
            return Err(Error::invalid("lr must be finite and ≥ 0, momentum in [0, 1)"));
        }
        Ok(cfg)
    }
}

/// SGD with classical momentum: `v ← μ·v + g`, `θ ← θ − η·v`.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64) -> Self {
        Sgd {
            lr,
            momentum,
            velocity: Vec::new(),
        }
    }

    pub fn step<'a>(&mut self, params: impl Iterator<Item = &'a mut Tensor>, grads: &[Tensor]) {
        for (i, (p, g)) in params.zip(grads).enumerate() {
            if self.velocity.len() <= i {
                self.velocity.push(vec![0.0; g.len()]);
            }
            let v = &mut self.velocity[i];
            for ((pv, vv), &gv) in p.data_mut().iter_mut().zip(v.iter_mut()).zip(g.data()) {
                *vv = self.momentum * *vv + gv;
                *pv -= self.lr * *vv;
            }
        }
    }
}

/// A frame and its ground truth.
#[derive(Clone, Debug)]
pub struct Sample {
    pub frame: Tensor,
    pub labels: Arc<LabelMap>,
}

/// Keyframe `i`, non-keyframe `p`, the per-pixel motion of `p` relative to
/// `i` (2×H×W), and the ground truth of `p`.
#[derive(Clone, Debug)]
pub struct TrainPair {
    pub keyframe: Tensor,
    pub target: Tensor,
    pub motion: Tensor,
    pub labels: Arc<LabelMap>,
}

/// A pair with the frozen HR features of both frames.
#[derive(Clone, Debug)]
pub struct PreparedPair {
    pub keyframe_features: Tensor,
    pub target_features: Tensor,
    pub target: Tensor,
    pub motion: Tensor,
    pub labels: Arc<LabelMap>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRecord {
    pub step: usize,
    pub total: f64,
    pub ce: f64,
    pub similarity: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossHistory {
    pub records: Vec<LossRecord>,
    pub steps_per_epoch: usize,
}

impl LossHistory {
    /// Mean total loss of each epoch.
    pub fn epoch_means(&self) -> Vec<f64> {
        if self.steps_per_epoch == 0 {
            return Vec::new();
        }
        self.records
            .chunks(self.steps_per_epoch)
            .map(|c| c.iter().map(|r| r.total).sum::<f64>() / c.len() as f64)
            .collect()
    }

    /// CSV with header `step,total,ce,mse`.
    pub fn write_csv(&self, out: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["step", "total", "ce", "mse"])?;
        for r in &self.records {
            w.write_record([
                r.step.to_string(),
                r.total.to_string(),
                r.ce.to_string(),
                r.similarity.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_csv_file(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }
}

/// Loss components of one pair.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FstLoss {
    pub total: f64,
    pub ce: f64,
    pub mse: f64,
}

/// `CE(logits, labels) + MSE(fused, target)` evaluated directly.
pub fn fst_loss(logits: &Tensor, labels: &LabelMap, fused: &Tensor, target: &Tensor) -> Result<FstLoss> {
    fused.expect_same_shape(target, "fst_loss")?;
    let (_, h, w) = logits.dims3()?;
    let (_, fh, fw) = fused.dims3()?;
    if (h, w) != (fh, fw) {
        return Err(Error::shape("fst_loss", format!("logits are {h}×{w}, features {fh}×{fw}")));
    }
    let ce = ops::cross_entropy(logits, labels, IGNORE_INDEX)?.loss;
    let mse = ops::mse(fused, target)?;
    Ok(FstLoss { total: ce + mse, ce, mse })
}

/// Tape handles of the loss terms.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub total: Var,
    pub ce: Var,
    pub similarity: Option<Var>,
}

/// Records the training objective for one pair. `fused` is `F̃_P`, `target`
/// the frozen `F_P`.
pub fn fst_loss_tape(
    tape: &mut Tape,
    logits: Var,
    labels: Arc<LabelMap>,
    fused: Var,
    target: Var,
    kind: SimilarityLoss,
) -> Result<LossVars> {
    let ce = tape.cross_entropy(logits, labels, IGNORE_INDEX)?;
    let similarity = match kind {
        SimilarityLoss::Mse => Some(tape.mse(fused, target)?),
        SimilarityLoss::Kl => Some(tape.kl_div(fused, target)?),
        SimilarityLoss::None => None,
    };
    let total = match similarity {
        Some(s) => tape.add(ce, s)?,
        None => ce,
    };
    Ok(LossVars { total, ce, similarity })
}

/// Logits of a standalone branch at frame resolution: features, bilinear
/// resize to `h×w` (free at full scale), final convolution.
pub fn branch_logits_tape(branch: &BranchConfig, tape: &mut Tape, vars: &BackboneVars, frame: Var) -> Result<Var> {
    let (_, h, w) = tape.value(frame).dims3()?;
    let f = branch.features_tape(tape, vars, frame)?;
    let f = tape.resize(f, h, w)?;
    branch.backbone.logits_tape(tape, vars, f)
}

fn check_finite(tape: &Tape, var: Var, step: usize, term: &'static str) -> Result<f64> {
    let v = tape.value(var).item();
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite { step, term })
    }
}

fn collect_grads(tape: &Tape, loss: Var, vars: &[Var], step: usize, clip_norm: Option<f64>) -> Result<Vec<Tensor>> {
    let mut grads = tape.backward(loss)?;
    let mut out: Vec<Tensor> = vars
        .iter()
        .map(|&v| grads.take(v).unwrap_or_else(|| Tensor::zeros(tape.value(v).shape())))
        .collect();
    if out.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite { step, term: "gradient" });
    }
    if let Some(max) = clip_norm {
        let norm = out.iter().flat_map(|g| g.data()).map(|v| v * v).sum::<f64>().sqrt();
        if norm > max {
            let s = max / norm;
            for g in &mut out {
                g.data_mut().iter_mut().for_each(|v| *v *= s);
            }
        }
    }
    Ok(out)
}

fn epoch_order(len: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(rng);
    order
}

/// Cross-entropy training of every parameter of `branch`, including its
/// final convolution. Works at any branch scale; logits are scored at frame
/// resolution.
pub fn train_hr_branch(branch: &mut BranchConfig, data: &[Sample], config: &TrainConfig) -> Result<LossHistory> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut sgd = Sgd::new(config.lr, config.momentum);
    let mut history = LossHistory {
        records: Vec::new(),
        steps_per_epoch: data.len(),
    };
    let mut step = 0;
    for _ in 0..config.epochs {
        for i in epoch_order(data.len(), &mut rng) {
            let sample = &data[i];
            let mut tape = Tape::new();
            let vars = branch.backbone.register(&mut tape);
            let x = tape.leaf(sample.frame.clone());
            let logits = branch_logits_tape(branch, &mut tape, &vars, x)?;
            let ce = tape.cross_entropy(logits, sample.labels.clone(), IGNORE_INDEX)?;
            let loss = check_finite(&tape, ce, step, "cross_entropy")?;
            let grads = collect_grads(&tape, ce, &vars.all(), step, config.clip_norm)?;
            let b = &mut branch.backbone;
            let final_conv = Arc::make_mut(&mut b.final_conv);
            sgd.step(
                b.n_feat
                    .iter_mut()
                    .chain(b.n_task.iter_mut())
                    .flat_map(|l| l.tensors_mut())
                    .chain(final_conv.tensors_mut()),
                &grads,
            );
            history.records.push(LossRecord {
                step,
                total: loss,
                ce: loss,
                similarity: 0.0,
            });
            step += 1;
        }
    }
    Ok(history)
}

/// Parameters of the altering-resolution model during similarity training.
/// `hr` is frozen; `lr` shares `hr`'s final convolution.
#[derive(Clone, Debug)]
pub struct LrState {
    pub hr: BranchConfig,
    pub lr: BranchConfig,
    pub creff: Creff,
}

impl LrState {
    /// Builds the state, replacing `lr_body`'s final convolution with the
    /// HR branch's.
    pub fn new(hr: BranchConfig, lr_body: Backbone, scale: f64, creff: Creff) -> Result<Self> {
        if creff.channels != hr.backbone.config.feature_channels {
            return Err(Error::shape(
                "LrState",
                format!(
                    "fusion has {} channels, backbone features {}",
                    creff.channels, hr.backbone.config.feature_channels
                ),
            ));
        }
        let lr_backbone = lr_body.with_final_conv(Arc::clone(&hr.backbone.final_conv))?;
        Ok(LrState {
            lr: BranchConfig::new(scale, lr_backbone)?,
            hr,
            creff,
        })
    }

    /// Serialized frozen parameters: the HR branch including the shared
    /// final convolution.
    pub fn frozen_bytes(&self) -> Vec<u8> {
        self.hr.backbone.to_checkpoint().to_bytes()
    }

    /// LR body and fusion parameters followed by the shared final
    /// convolution, as stored in an LR checkpoint.
    pub fn lr_checkpoint(&self) -> Checkpoint {
        let mut tensors: Vec<Tensor> = self.lr.backbone.body().cloned().collect();
        tensors.extend(self.creff.tensors().cloned());
        tensors.extend(self.lr.backbone.final_conv.tensors().cloned());
        Checkpoint { tensors }
    }

    pub fn trainable(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.lr.backbone.body_mut().chain(self.creff.tensors_mut())
    }

    /// Runs the frozen HR branch on every pair's keyframe and target.
    pub fn prepare(&self, pairs: &[TrainPair]) -> Result<Vec<PreparedPair>> {
        pairs
            .iter()
            .map(|p| {
                Ok(PreparedPair {
                    keyframe_features: self.hr.forward_features(&p.keyframe)?,
                    target_features: self.hr.forward_features(&p.target)?,
                    target: p.target.clone(),
                    motion: p.motion.clone(),
                    labels: p.labels.clone(),
                })
            })
            .collect()
    }

    /// Records the LR path and objective for one prepared pair. Returns the
    /// loss handles and the trainable variables in [`Self::trainable`] order.
    pub fn loss_tape(&self, tape: &mut Tape, pair: &PreparedPair, kind: SimilarityLoss) -> Result<(LossVars, Vec<Var>)> {
        let lr_vars = self.lr.backbone.register(tape);
        let creff_vars = self.creff.register(tape);
        let f_i = tape.leaf(pair.keyframe_features.clone());
        let frame = tape.leaf(pair.target.clone());
        let f_p_hr = tape.leaf(pair.target_features.clone());
        let loss = fst_forward(
            tape,
            &self.lr,
            &lr_vars,
            &self.creff,
            &creff_vars,
            f_i,
            frame,
            &pair.motion,
            f_p_hr,
            pair.labels.clone(),
            kind,
        )?;
        let mut trainable = lr_vars.body();
        trainable.extend(creff_vars.all());
        Ok((loss, trainable))
    }
}

/// LR features of `frame`, fusion with keyframe features `f_i`, shared final
/// convolution, and the training objective against the HR features `f_p_hr`.
#[allow(clippy::too_many_arguments)]
pub fn fst_forward(
    tape: &mut Tape,
    lr: &BranchConfig,
    lr_vars: &BackboneVars,
    creff: &Creff,
    creff_vars: &CreffVars,
    f_i: Var,
    frame: Var,
    motion: &Tensor,
    f_p_hr: Var,
    labels: Arc<LabelMap>,
    kind: SimilarityLoss,
) -> Result<LossVars> {
    let f_p = lr.features_tape(tape, lr_vars, frame)?;
    let fused = creff.forward_tape(tape, creff_vars, f_i, motion, f_p)?;
    let logits = lr.backbone.logits_tape(tape, lr_vars, fused)?;
    fst_loss_tape(tape, logits, labels, fused, f_p_hr, kind)
}

/// Central-difference check of the LR objective's gradients with respect
/// to every LR body and fusion parameter, in [`LrState::trainable`] order.
pub fn check_lr_gradients(
    lr: &BranchConfig,
    creff: &Creff,
    pair: &PreparedPair,
    kind: SimilarityLoss,
    eps: f64,
) -> Result<GradCheck> {
    let inputs: Vec<Tensor> = lr.backbone.body().chain(creff.tensors()).cloned().collect();
    grad_check(
        |tape, params| {
            let mut lr_vars = lr.backbone.register(tape);
            let mut creff_vars = creff.register(tape);
            let mut it = params.iter().copied();
            for l in lr_vars.n_feat.iter_mut().chain(lr_vars.n_task.iter_mut()).chain(creff_vars.layers.iter_mut()) {
                rebind(l, &mut it)?;
            }
            let f_i = tape.leaf(pair.keyframe_features.clone());
            let frame = tape.leaf(pair.target.clone());
            let f_p_hr = tape.leaf(pair.target_features.clone());
            let loss = fst_forward(
                tape,
                lr,
                &lr_vars,
                creff,
                &creff_vars,
                f_i,
                frame,
                &pair.motion,
                f_p_hr,
                pair.labels.clone(),
                kind,
            )?;
            Ok(loss.total)
        },
        &inputs,
        eps,
    )
}

fn rebind(layer: &mut ConvVars, params: &mut impl Iterator<Item = Var>) -> Result<()> {
    let mut next = || params.next().ok_or_else(|| Error::invalid("parameter list shorter than the model"));
    layer.weight = next()?;
    if layer.bias.is_some() {
        layer.bias = Some(next()?);
    }
    Ok(())
}

/// Similarity training of the LR body and fusion weights. The HR branch and
/// the shared final convolution are left untouched.
pub fn train_lr_branch(state: &mut LrState, data: &[TrainPair], config: &TrainConfig) -> Result<LossHistory> {
    let prepared = state.prepare(data)?;
    train_lr_prepared(state, &prepared, config)
}

/// As [`train_lr_branch`] with HR features already computed.
pub fn train_lr_prepared(state: &mut LrState, data: &[PreparedPair], config: &TrainConfig) -> Result<LossHistory> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut sgd = Sgd::new(config.lr, config.momentum);
    let mut history = LossHistory {
        records: Vec::new(),
        steps_per_epoch: data.len(),
    };
    let mut step = 0;
    for _ in 0..config.epochs {
        for i in epoch_order(data.len(), &mut rng) {
            let mut tape = Tape::new();
            let (loss, trainable) = state.loss_tape(&mut tape, &data[i], config.loss)?;
            let ce = check_finite(&tape, loss.ce, step, "cross_entropy")?;
            let similarity = match loss.similarity {
                Some(s) => check_finite(&tape, s, step, "similarity")?,
                None => 0.0,
            };
            let total = check_finite(&tape, loss.total, step, "total")?;
            let grads = collect_grads(&tape, loss.total, &trainable, step, config.clip_norm)?;
            sgd.step(state.trainable(), &grads);
            history.records.push(LossRecord {
                step,
                total,
                ce,
                similarity,
            });
            step += 1;
        }
    }
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{BackboneConfig, EncoderLayer};
    use crate::creff::FusionConfig;
    use rand::Rng;

    fn small_config() -> BackboneConfig {
        BackboneConfig {
            in_channels: 1,
            encoder: vec![EncoderLayer { channels: 4, stride: 1 }, EncoderLayer { channels: 6, stride: 2 }],
            decoder: vec![],
            feature_channels: 4,
            num_classes: 3,
            bias: true,
        }
    }

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_fn(shape, |_| rng.gen_range(0.0..1.0))
    }

    fn toy_pairs(n: usize, seed: u64) -> Vec<TrainPair> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let labels = LabelMap::new(16, 16, (0..256).map(|_| rng.gen_range(0..3)).collect()).unwrap();
                TrainPair {
                    keyframe: random(&[1, 16, 16], &mut rng),
                    target: random(&[1, 16, 16], &mut rng),
                    motion: Tensor::from_fn(&[2, 16, 16], |_| rng.gen_range(-2..=2) as f64),
                    labels: Arc::new(labels),
                }
            })
            .collect()
    }

    fn toy_state(seed: u64) -> LrState {
        let hr = BranchConfig::new(1.0, Backbone::new(small_config(), seed).unwrap()).unwrap();
        let lr_body = Backbone::new(small_config(), seed + 1).unwrap();
        LrState::new(hr, lr_body, 0.5, Creff::new(FusionConfig::local(3), 4, 0).unwrap()).unwrap()
    }

    #[test]
    fn fst_loss_parts() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let logits = random(&[3, 4, 4], &mut rng);
        let labels = LabelMap::new(4, 4, (0..16).map(|i| i % 3).collect()).unwrap();
        let f = random(&[2, 4, 4], &mut rng);
        let g = random(&[2, 4, 4], &mut rng);
        let same = fst_loss(&logits, &labels, &f, &f).unwrap();
        assert_eq!(same.mse, 0.0);
        assert_eq!(same.total, same.ce);
        let r = fst_loss(&logits, &labels, &f, &g).unwrap();
        let ce = ops::cross_entropy(&logits, &labels, IGNORE_INDEX).unwrap().loss;
        let mse: f64 = f.data().iter().zip(g.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / 32.0;
        assert!((r.total - (ce + mse)).abs() < 1e-12);

        let perfect = Tensor::from_fn(&[3, 4, 4], |i| if i / 16 == (i % 16) % 3 { 40.0 } else { 0.0 });
        assert!(fst_loss(&perfect, &labels, &f, &f).unwrap().total < 1e-9);
        assert!(fst_loss(&logits, &labels, &f, &random(&[2, 4, 3], &mut rng)).is_err());
    }

    #[test]
    fn zero_epochs_and_zero_lr_change_nothing() {
        let pairs = toy_pairs(2, 2);
        for cfg in [
            TrainConfig { epochs: 0, ..TrainConfig::default() },
            TrainConfig { epochs: 2, lr: 0.0, ..TrainConfig::default() },
        ] {
            let mut state = toy_state(3);
            let before = state.lr_checkpoint().to_bytes();
            train_lr_branch(&mut state, &pairs, &cfg).unwrap();
            assert_eq!(state.lr_checkpoint().to_bytes(), before);

            let mut hr = state.hr.clone();
            let before = hr.backbone.to_checkpoint().to_bytes();
            let samples: Vec<Sample> = pairs.iter().map(|p| Sample { frame: p.target.clone(), labels: p.labels.clone() }).collect();
            train_hr_branch(&mut hr, &samples, &cfg).unwrap();
            assert_eq!(hr.backbone.to_checkpoint().to_bytes(), before);
        }
    }

    #[test]
    fn frozen_parameters_stay_frozen() {
        let pairs = toy_pairs(3, 4);
        let mut state = toy_state(5);
        let frozen = state.frozen_bytes();
        let trainable = state.lr_checkpoint().to_bytes();
        let final_before = state.lr.backbone.final_conv.weight.clone();
        let cfg = TrainConfig { epochs: 10, lr: 0.01, ..TrainConfig::default() };
        train_lr_branch(&mut state, &pairs, &cfg).unwrap();
        assert_eq!(state.frozen_bytes(), frozen);
        assert_ne!(state.lr_checkpoint().to_bytes(), trainable);
        assert!(Arc::ptr_eq(&state.lr.backbone.final_conv, &state.hr.backbone.final_conv));
        assert_eq!(state.lr.backbone.final_conv.weight, final_before);
    }

    #[test]
    fn training_is_deterministic() {
        let pairs = toy_pairs(3, 6);
        let cfg = TrainConfig { epochs: 2, lr: 0.01, seed: 9, ..TrainConfig::default() };
        let (mut a, mut b) = (toy_state(7), toy_state(7));
        let ha = train_lr_branch(&mut a, &pairs, &cfg).unwrap();
        let hb = train_lr_branch(&mut b, &pairs, &cfg).unwrap();
        assert_eq!(ha, hb);
        assert_eq!(ha.records.len(), 6);
        let mut csv = Vec::new();
        ha.write_csv(&mut csv).unwrap();
        assert!(String::from_utf8(csv).unwrap().starts_with("step,total,ce,mse\n0,"));
    }

    #[test]
    fn constant_labels_are_learned() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let labels = Arc::new(LabelMap::filled(16, 16, 2));
        let data: Vec<Sample> = (0..4).map(|_| Sample { frame: random(&[1, 16, 16], &mut rng), labels: labels.clone() }).collect();
        let mut branch = BranchConfig::new(1.0, Backbone::new(small_config(), 9).unwrap()).unwrap();
        let cfg = TrainConfig { epochs: 50, lr: 0.05, ..TrainConfig::default() };
        let history = train_hr_branch(&mut branch, &data, &cfg).unwrap();
        assert_eq!(history.records.len(), 200);
        assert!(history.records.last().unwrap().ce < 0.05, "{:?}", history.records.last());
    }

    #[test]
    fn small_steps_do_not_increase_loss() {
        let pair = toy_pairs(1, 10);
        let mut state = toy_state(11);
        let cfg = TrainConfig { epochs: 5, lr: 1e-4, momentum: 0.0, ..TrainConfig::default() };
        let history = train_lr_branch(&mut state, &pair, &cfg).unwrap();
        for w in history.records.windows(2) {
            assert!(w[1].total <= w[0].total, "{history:?}");
        }
    }

    #[test]
    fn non_finite_loss_reports_the_step() {
        let mut pairs = toy_pairs(1, 12);
        pairs[0].target.data_mut()[0] = f64::NAN;
        let mut state = toy_state(13);
        let err = train_lr_branch(&mut state, &pairs, &TrainConfig::default()).unwrap_err();
        assert!(err.is_numerical(), "{err}");
        assert!(matches!(err, Error::NonFinite { step: 0, .. }));
    }

    #[test]
    fn kl_and_plain_variants_run() {
        let pairs = toy_pairs(2, 14);
        for loss in [SimilarityLoss::Kl, SimilarityLoss::None] {
            let mut state = toy_state(15);
            let cfg = TrainConfig { epochs: 1, loss, ..TrainConfig::default() };
            let h = train_lr_branch(&mut state, &pairs, &cfg).unwrap();
            assert!(h.records.iter().all(|r| r.total.is_finite()));
            if loss == SimilarityLoss::None {
                assert!(h.records.iter().all(|r| r.similarity == 0.0 && r.total == r.ce));
            }
        }
        let cfg = TrainConfig::from_json(r#"{"epochs": 3, "lr": 0.1, "loss": "kl"}"#).unwrap();
        assert_eq!((cfg.momentum, cfg.loss), (0.9, SimilarityLoss::Kl));
        assert!(TrainConfig::from_json(r#"{"epochs": 3, "lr": -1}"#).is_err());
    }
}
