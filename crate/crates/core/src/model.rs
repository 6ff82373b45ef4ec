//! Model files. Weights go in an ARWT checkpoint; the architecture goes in a
//! JSON sidecar next to it (`<checkpoint>.json`).
//!
//! An HR checkpoint holds the backbone body followed by the final
//! convolution. An LR checkpoint holds the LR body, the fusion layers and a
//! copy of the shared final convolution, which must match the HR
//! checkpoint's bit for bit when the two are loaded together.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneConfig, BranchConfig, Checkpoint};
use crate::codec::{decode_clip, expand_mv, EncodedClip};
use crate::creff::{Creff, FusionConfig, KEY, QUERY, VALUE};
use crate::error::{Error, Result};
use crate::tensor::{LabelMap, Tensor};
use crate::train::{Sample, TrainConfig, TrainPair};

/// Architecture stored in a checkpoint's sidecar.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub backbone: BackboneConfig,
    pub scale: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fusion: Option<FusionConfig>,
}

/// Job description for `train-hr`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HrJob {
    #[serde(default)]
    pub backbone: BackboneConfig,
    #[serde(default)]
    pub init_seed: u64,
    pub train: TrainConfig,
}

/// Job description for `train-lr`. The LR body starts from the HR weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrJob {
    pub scale: f64,
    #[serde(default)]
    pub fusion: FusionConfig,
    #[serde(default = "one")]
    pub value_init: f64,
    #[serde(default = "one")]
    pub query_key_init: f64,
    pub train: TrainConfig,
}

fn one() -> f64 {
    1.0
}

pub fn sidecar_path(checkpoint: &Path) -> PathBuf {
    let mut s = checkpoint.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

fn write_pair(path: &Path, ckpt: &Checkpoint, spec: &ModelSpec) -> Result<()> {
    ckpt.write_file(path)?;
    std::fs::write(sidecar_path(path), serde_json::to_string_pretty(spec)?)?;
    Ok(())
}

pub fn read_spec(checkpoint: &Path) -> Result<ModelSpec> {
    let spec: ModelSpec = serde_json::from_str(&std::fs::read_to_string(sidecar_path(checkpoint))?)?;
    spec.backbone.validate()?;
    if let Some(f) = &spec.fusion {
        f.validate()?;
    }
    Ok(spec)
}

pub fn save_hr(branch: &BranchConfig, path: impl AsRef<Path>) -> Result<()> {
    let spec = ModelSpec {
        backbone: branch.backbone.config.clone(),
        scale: branch.scale,
        fusion: None,
    };
    write_pair(path.as_ref(), &branch.backbone.to_checkpoint(), &spec)
}

pub fn load_hr(path: impl AsRef<Path>) -> Result<BranchConfig> {
    let path = path.as_ref();
    let spec = read_spec(path)?;
    let backbone = Backbone::from_checkpoint(spec.backbone, Checkpoint::read_file(path)?)?;
    BranchConfig::new(spec.scale, backbone)
}

/// LR branch and fusion layers sharing `hr`'s final convolution.
#[derive(Clone, Debug)]
pub struct LrModel {
    pub lr: BranchConfig,
    pub creff: Creff,
}

pub fn save_lr(lr: &BranchConfig, creff: &Creff, path: impl AsRef<Path>) -> Result<()> {
    let mut tensors: Vec<Tensor> = lr.backbone.body().cloned().collect();
    tensors.extend(creff.tensors().cloned());
    tensors.extend(lr.backbone.final_conv.tensors().cloned());
    let spec = ModelSpec {
        backbone: lr.backbone.config.clone(),
        scale: lr.scale,
        fusion: Some(creff.config),
    };
    write_pair(path.as_ref(), &Checkpoint { tensors }, &spec)
}

/// Loads an LR checkpoint against the HR branch it was trained with.
pub fn load_lr(path: impl AsRef<Path>, hr: &BranchConfig) -> Result<LrModel> {
    let path = path.as_ref();
    let spec = read_spec(path)?;
    let fusion = spec
        .fusion
        .ok_or_else(|| Error::format("model config", "LR checkpoint sidecar has no fusion entry"))?;
    if spec.backbone.feature_channels != hr.backbone.config.feature_channels
        || spec.backbone.num_classes != hr.backbone.config.num_classes
    {
        return Err(Error::format("model config", "LR and HR checkpoints disagree on feature channels or classes"));
    }
    let mut tensors = Checkpoint::read_file(path)?.tensors.into_iter();
    let mut body = Backbone::new(spec.backbone.clone(), 0)?;
    for slot in body.body_mut() {
        let t = tensors
            .next()
            .ok_or_else(|| Error::format("checkpoint", "too few layers for the configured LR backbone"))?;
        if t.shape() != slot.shape() {
            return Err(Error::format(
                "checkpoint",
                format!("layer shape {:?} where {:?} was expected", t.shape(), slot.shape()),
            ));
        }
        *slot = t;
    }
    let mut creff = Creff::new(fusion, spec.backbone.feature_channels, 0)?;
    creff.load_tensors(&mut tensors)?;
    let stored: Vec<Tensor> = tensors.collect();
    let shared: Vec<&Tensor> = hr.backbone.final_conv.tensors().collect();
    let same = stored.len() == shared.len()
        && stored
            .iter()
            .zip(&shared)
            .all(|(a, b)| a.to_bytes() == b.to_bytes());
    if !same {
        return Err(Error::format(
            "checkpoint",
            "LR checkpoint's final convolution differs from the HR checkpoint's",
        ));
    }
    let lr = BranchConfig::new(spec.scale, body.with_final_conv(Arc::clone(&hr.backbone.final_conv))?)?;
    Ok(LrModel { lr, creff })
}

/// Fusion layers for a fresh LR model, with the encoders' center taps
/// rescaled.
pub fn initial_creff(fusion: FusionConfig, channels: usize, seed: u64, query_key: f64, value: f64) -> Result<Creff> {
    let mut creff = Creff::new(fusion, channels, seed)?;
    if fusion.kind.uses_attention() {
        for (layer, s) in [(QUERY, query_key), (KEY, query_key), (VALUE, value)] {
            creff.layers[layer].weight.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    Ok(creff)
}

/// Reads `<frame index>.tnsr` label maps from `dir`.
pub fn read_label_dir(dir: impl AsRef<Path>) -> Result<BTreeMap<usize, LabelMap>> {
    let mut out = BTreeMap::new();
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        if path.extension().and_then(|e| e.to_str()) != Some("tnsr") {
            continue;
        }
        let index = path
            .file_stem()
            .and_then(|s| s.to_str())
            .and_then(|s| s.parse::<usize>().ok())
            .ok_or_else(|| Error::format("labels directory", format!("{} is not named <frame index>.tnsr", path.display())))?;
        out.insert(index, LabelMap::from_tensor(&Tensor::read_file(&path)?)?);
    }
    Ok(out)
}

/// Writes one `<frame index>.tnsr` label map per entry.
pub fn write_label_dir<'a>(dir: impl AsRef<Path>, labels: impl IntoIterator<Item = (usize, &'a LabelMap)>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    for (i, l) in labels {
        l.to_tensor().write_file(dir.join(format!("{i}.tnsr")))?;
    }
    Ok(())
}

/// Reads every `*.tnsr` frame in `dir`, sorted by file name.
pub fn read_frame_dir(dir: impl AsRef<Path>) -> Result<Vec<Tensor>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    paths.retain(|p| p.extension().and_then(|e| e.to_str()) == Some("tnsr"));
    paths.sort();
    paths.iter().map(Tensor::read_file).collect()
}

/// Decoded frames of `clip` paired with their annotations.
pub fn labelled_samples(clip: &EncodedClip, labels: &BTreeMap<usize, LabelMap>) -> Result<Vec<Sample>> {
    let frames = decode_clip(clip)?.frames;
    labels
        .iter()
        .map(|(&p, l)| {
            let frame = frames
                .get(p)
                .ok_or_else(|| Error::invalid(format!("label for frame {p} but the clip has {} frames", frames.len())))?;
            Ok(Sample {
                frame: frame.clone(),
                labels: Arc::new(l.clone()),
            })
        })
        .collect()
}

/// One pair per annotated P frame: its GOP keyframe, the frame, and the
/// motion field stored in the clip.
pub fn clip_pairs(clip: &EncodedClip, labels: &BTreeMap<usize, LabelMap>) -> Result<Vec<TrainPair>> {
    let decoded = decode_clip(clip)?;
    let gop = clip.params.gop_length;
    let mut pairs = Vec::new();
    for (&p, l) in labels {
        if p >= decoded.frames.len() {
            return Err(Error::invalid(format!(
                "label for frame {p} but the clip has {} frames",
                decoded.frames.len()
            )));
        }
        let Some(field) = &decoded.motion[p] else { continue };
        pairs.push(TrainPair {
            keyframe: decoded.frames[p / gop * gop].clone(),
            target: decoded.frames[p].clone(),
            motion: expand_mv(field, clip.height, clip.width)?,
            labels: Arc::new(l.clone()),
        });
    }
    Ok(pairs)
}
