//! Desk-scale end-to-end experiment on the moving-shapes dataset: train an
//! HR branch, a plain LR baseline and altering-resolution models, then
//! score them per keyframe distance.

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneConfig, BranchConfig, EncoderLayer};
use crate::codec::{decode_clip, encode_clip, estimate_motion, expand_mv, CodecParams};
use crate::creff::{Creff, FusionConfig, FusionKind};
use crate::error::Result;
use crate::model::initial_creff;
use crate::eval::{branch_logits, miou_by_distance, AnnotatedClip, Confusion, CostReport, DistanceTable, MotionSearch, Pipeline};
use crate::ops;
use crate::synth::{generate, SynthConfig, SynthClip};
use crate::tensor::Tensor;
use crate::train::{train_hr_branch, train_lr_prepared, LrState, PreparedPair, Sample, TrainConfig, TrainPair};
use crate::IGNORE_INDEX;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub data: SynthConfig,
    pub train_clips: usize,
    pub eval_clips: usize,
    /// Frames scored against ground truth in every evaluation clip.
    pub annotated: Vec<usize>,
    pub gop_length: usize,
    pub eval_gop_lengths: Vec<usize>,
    pub scale: f64,
    pub codec: CodecParams,
    pub backbone: BackboneConfig,
    pub fusion: FusionConfig,
    /// Initial scale of the value encoder's center tap.
    pub value_init: f64,
    /// Initial scale of the query and key encoders' center taps. Small values
    /// keep the softmax away from saturation at the start of training.
    pub query_key_init: f64,
    /// The LR body starts as a copy of the HR body with its last layer
    /// (weights and bias) scaled by this factor.
    pub lr_feature_init: f64,
    pub hr_train: TrainConfig,
    pub lr_baseline_train: TrainConfig,
    pub fst_train: TrainConfig,
    /// Cycle training-pair distances through `1..L` instead of always
    /// pairing with `p − (L−1)`.
    #[serde(default)]
    pub mixed_distances: bool,
    /// Also train and score the variant without the direct connection.
    pub ablate_direct_connection: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            data: SynthConfig {
                deform: 0.6,
                ..SynthConfig::default()
            },
            train_clips: 40,
            eval_clips: 16,
            annotated: vec![14, 15],
            gop_length: 6,
            eval_gop_lengths: vec![6, 10, 15],
            scale: 0.5,
            codec: CodecParams {
                gop_length: 6,
                block_size: 8,
                search_range: 15,
                quant_step: 0.02,
            },
            backbone: BackboneConfig {
                in_channels: 1,
                encoder: vec![
                    EncoderLayer { channels: 16, stride: 1 },
                    EncoderLayer { channels: 32, stride: 2 },
                    EncoderLayer { channels: 64, stride: 1 },
                    EncoderLayer { channels: 96, stride: 2 },
                ],
                decoder: vec![96, 64],
                feature_channels: 8,
                num_classes: 3,
                bias: true,
            },
            fusion: FusionConfig::local(3),
            value_init: 1.0,
            query_key_init: 1.0,
            lr_feature_init: 0.1,
            hr_train: TrainConfig {
                epochs: 6,
                lr: 0.01,
                momentum: 0.9,
                seed: 1,
                clip_norm: Some(5.0),
                ..TrainConfig::default()
            },
            lr_baseline_train: TrainConfig {
                epochs: 6,
                lr: 0.01,
                momentum: 0.9,
                seed: 2,
                clip_norm: Some(5.0),
                ..TrainConfig::default()
            },
            fst_train: TrainConfig {
                epochs: 6,
                lr: 0.005,
                momentum: 0.9,
                seed: 3,
                clip_norm: Some(5.0),
                ..TrainConfig::default()
            },
            mixed_distances: true,
            ablate_direct_connection: true,
        }
    }
}

/// Scores of one trained altering-resolution variant.
#[derive(Clone, Debug)]
pub struct VariantResult {
    pub name: String,
    /// Per-distance tables keyed by GOP length.
    pub tables: BTreeMap<usize, DistanceTable>,
    pub cost: BTreeMap<usize, CostReport>,
    pub epoch_losses: Vec<f64>,
    /// Mean `MSE(F̃_P, F_P)` over evaluation pairs at the training distance,
    /// and the same with the fusion replaced by plain upsampling.
    pub feature_mse: Option<(f64, f64)>,
}

impl VariantResult {
    pub fn overall(&self, gop_length: usize) -> Option<f64> {
        self.tables.get(&gop_length).and_then(|t| t.overall)
    }
}

#[derive(Clone, Debug)]
pub struct ExperimentReport {
    pub hr_miou: Option<f64>,
    pub lr_baseline_miou: Option<f64>,
    pub full: VariantResult,
    pub no_direct_connection: Option<VariantResult>,
    pub warp_only: VariantResult,
    pub seconds: f64,
}

struct Data {
    train: Vec<Vec<Tensor>>,
    train_clips: Vec<SynthClip>,
    eval: Vec<AnnotatedClip>,
}

fn decoded(clip: &SynthClip, codec: CodecParams) -> Result<Vec<Tensor>> {
    Ok(decode_clip(&encode_clip(&clip.frames, codec)?)?.frames)
}

fn build_data(cfg: &ExperimentConfig) -> Result<Data> {
    let train_clips = generate(&cfg.data, 0, cfg.train_clips)?;
    let eval_clips = generate(&cfg.data, 1_000_000, cfg.eval_clips)?;
    let train = train_clips.iter().map(|c| decoded(c, cfg.codec)).collect::<Result<_>>()?;
    let eval = eval_clips
        .iter()
        .map(|c| {
            Ok(AnnotatedClip {
                frames: decoded(c, cfg.codec)?,
                labels: cfg.annotated.iter().map(|&p| (p, c.labels[p].clone())).collect(),
            })
        })
        .collect::<Result<_>>()?;
    Ok(Data {
        train,
        train_clips,
        eval,
    })
}

fn search(cfg: &ExperimentConfig) -> MotionSearch {
    MotionSearch {
        block_size: cfg.codec.block_size,
        search_range: cfg.codec.search_range,
    }
}

/// Pairs `(p − d, p)` over every training clip, motion estimated from `p` to
/// its keyframe. `d` is `L−1`, or cycles through `1..L` with mixed distances.
fn training_pairs(cfg: &ExperimentConfig, data: &Data) -> Result<Vec<TrainPair>> {
    let top = cfg.gop_length - 1;
    let mut pairs = Vec::new();
    for (frames, clip) in data.train.iter().zip(&data.train_clips) {
        for p in top..frames.len() {
            let d = if cfg.mixed_distances { 1 + p % top.max(1) } else { top };
            let (_, h, w) = frames[p].dims3()?;
            let field = estimate_motion(&frames[p - d], &frames[p], cfg.codec.block_size, cfg.codec.search_range)?;
            pairs.push(TrainPair {
                keyframe: frames[p - d].clone(),
                target: frames[p].clone(),
                motion: expand_mv(&field, h, w)?,
                labels: Arc::new(clip.labels[p].clone()),
            });
        }
    }
    Ok(pairs)
}

fn standalone_miou(branch: &BranchConfig, clips: &[AnnotatedClip]) -> Result<Option<f64>> {
    let mut conf = Confusion::new(branch.backbone.config.num_classes);
    for clip in clips {
        for (&p, gt) in &clip.labels {
            let pred = branch_logits(branch, &clip.frames[p])?.argmax_channels()?;
            conf.add(&pred, gt, IGNORE_INDEX)?;
        }
    }
    Ok(conf.miou())
}

fn feature_mse(state: &LrState, pairs: &[PreparedPair]) -> Result<(f64, f64)> {
    let (mut fused, mut plain) = (0.0, 0.0);
    for p in pairs {
        let f_p = state.lr.forward_features(&p.target)?;
        let f = crate::creff::creff_forward(&p.keyframe_features, &p.motion, &f_p, &state.creff)?;
        let (_, h, w) = f.dims3()?;
        fused += ops::mse(&f, &p.target_features)?;
        plain += ops::mse(&ops::bilinear_resize(&f_p, h, w)?, &p.target_features)?;
    }
    let n = pairs.len().max(1) as f64;
    Ok((fused / n, plain / n))
}

fn evaluate(
    cfg: &ExperimentConfig,
    name: &str,
    state: &LrState,
    data: &Data,
    gop_lengths: &[usize],
) -> Result<VariantResult> {
    let (h, w) = (cfg.data.height, cfg.data.width);
    let pipe = Pipeline {
        hr: &state.hr,
        lr: &state.lr,
        creff: &state.creff,
    };
    let mut tables = BTreeMap::new();
    let mut cost = BTreeMap::new();
    for &l in gop_lengths {
        tables.insert(l, miou_by_distance(&data.eval, pipe, l, search(cfg), IGNORE_INDEX)?);
        cost.insert(l, pipe.cost_report(h, w, l)?);
    }
    Ok(VariantResult {
        name: name.to_string(),
        tables,
        cost,
        epoch_losses: Vec::new(),
        feature_mse: None,
    })
}

/// Runs every stage; `log` receives one line per stage.
pub fn run_experiment(cfg: &ExperimentConfig, mut log: impl FnMut(&str)) -> Result<ExperimentReport> {
    let start = Instant::now();
    let data = build_data(cfg)?;
    let mut stamp = |msg: String| log(&format!("[{:6.1}s] {msg}", start.elapsed().as_secs_f64()));

    let samples: Vec<Sample> = data
        .train
        .iter()
        .zip(&data.train_clips)
        .flat_map(|(frames, clip)| {
            frames.iter().zip(&clip.labels).map(|(f, l)| Sample {
                frame: f.clone(),
                labels: Arc::new(l.clone()),
            })
        })
        .collect();

    let mut hr = BranchConfig::new(1.0, Backbone::new(cfg.backbone.clone(), cfg.hr_train.seed)?)?;
    let h = train_hr_branch(&mut hr, &samples, &cfg.hr_train)?;
    let hr_miou = standalone_miou(&hr, &data.eval)?;
    stamp(format!("HR branch: epoch losses {:?}, mIoU {hr_miou:?}", rounded(&h.epoch_means())));

    let mut lr_base = BranchConfig::new(cfg.scale, Backbone::new(cfg.backbone.clone(), cfg.lr_baseline_train.seed)?)?;
    let h = train_hr_branch(&mut lr_base, &samples, &cfg.lr_baseline_train)?;
    let lr_baseline_miou = standalone_miou(&lr_base, &data.eval)?;
    stamp(format!("LR baseline: epoch losses {:?}, mIoU {lr_baseline_miou:?}", rounded(&h.epoch_means())));

    let pairs = training_pairs(cfg, &data)?;
    let probe = LrState::new(hr.clone(), hr.backbone.clone(), cfg.scale, Creff::new(FusionConfig::new(FusionKind::NoFusion), cfg.backbone.feature_channels, 0)?)?;
    let prepared = probe.prepare(&pairs)?;
    stamp(format!("{} training pairs prepared", prepared.len()));

    let eval_pairs: Vec<TrainPair> = data
        .eval
        .iter()
        .flat_map(|c| {
            let d = cfg.gop_length - 1;
            c.labels.iter().filter(move |(&p, _)| p >= d).map(move |(&p, gt)| (c, p, d, gt))
        })
        .map(|(c, p, d, gt)| {
            let (_, h, w) = c.frames[p].dims3()?;
            let field = estimate_motion(&c.frames[p - d], &c.frames[p], cfg.codec.block_size, cfg.codec.search_range)?;
            Ok(TrainPair {
                keyframe: c.frames[p - d].clone(),
                target: c.frames[p].clone(),
                motion: expand_mv(&field, h, w)?,
                labels: Arc::new(gt.clone()),
            })
        })
        .collect::<Result<_>>()?;
    let eval_prepared = probe.prepare(&eval_pairs)?;

    let train_variant = |fusion: FusionConfig, name: &str| -> Result<(LrState, VariantResult)> {
        let creff = initial_creff(fusion, cfg.backbone.feature_channels, cfg.fst_train.seed, cfg.query_key_init, cfg.value_init)?;
        let mut body = hr.backbone.clone();
        let last = body.n_task.last_mut().or(body.n_feat.last_mut()).expect("validated backbone has layers");
        last.tensors_mut().for_each(|t| t.data_mut().iter_mut().for_each(|v| *v *= cfg.lr_feature_init));
        let mut state = LrState::new(hr.clone(), body, cfg.scale, creff)?;
        let hist = train_lr_prepared(&mut state, &prepared, &cfg.fst_train)?;
        let gops: Vec<usize> = if name == "full" { cfg.eval_gop_lengths.clone() } else { vec![cfg.gop_length] };
        let mut r = evaluate(cfg, name, &state, &data, &gops)?;
        r.epoch_losses = hist.epoch_means();
        r.feature_mse = Some(feature_mse(&state, &eval_prepared)?);
        Ok((state, r))
    };

    let (full_state, full) = train_variant(cfg.fusion, "full")?;
    stamp(format!(
        "full: epoch losses {:?}, overall {:?}",
        rounded(&full.epoch_losses),
        full.tables.iter().map(|(l, t)| (*l, t.overall)).collect::<Vec<_>>()
    ));

    let no_direct_connection = if cfg.ablate_direct_connection {
        let fusion = FusionConfig {
            direct_connection: false,
            ..cfg.fusion
        };
        let (_, r) = train_variant(fusion, "no_dc")?;
        stamp(format!("no direct connection: overall {:?}", r.overall(cfg.gop_length)));
        Some(r)
    } else {
        None
    };

    let warp_state = LrState {
        creff: Creff::new(FusionConfig::new(FusionKind::WarpOnly), cfg.backbone.feature_channels, 0)?,
        ..full_state
    };
    let mut warp_only = evaluate(cfg, "warp_only", &warp_state, &data, &[cfg.gop_length])?;
    warp_only.feature_mse = Some(feature_mse(&warp_state, &eval_prepared)?);
    stamp(format!("warp only: overall {:?}", warp_only.overall(cfg.gop_length)));

    Ok(ExperimentReport {
        hr_miou,
        lr_baseline_miou,
        full,
        no_direct_connection,
        warp_only,
        seconds: start.elapsed().as_secs_f64(),
    })
}

fn rounded(v: &[f64]) -> Vec<f64> {
    v.iter().map(|x| (x * 1e4).round() / 1e4).collect()
}
