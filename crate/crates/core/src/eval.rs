//! GOP scheduling, sequence inference, segmentation metrics, amortized cost
//! and Bjøntegaard-style comparison of rate curves.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::backbone::{BranchConfig, Flops};
use crate::codec::{decode_clip, estimate_motion, expand_mv, EncodedClip};
use crate::creff::Creff;
use crate::error::{Error, Result};
use crate::tensor::{LabelMap, Tensor};
use crate::train::branch_logits_tape;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Branch {
    Hr,
    Lr,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ScheduleEntry {
    pub frame: usize,
    pub branch: Branch,
    pub keyframe: usize,
    pub distance: usize,
}

/// Frame `t` runs against keyframe `⌊t/L⌋·L` at distance `t mod L`; only
/// distance 0 takes the HR branch.
pub fn gop_schedule(frame_count: usize, gop_length: usize) -> Result<Vec<ScheduleEntry>> {
    if gop_length == 0 {
        return Err(Error::invalid("GOP length must be at least 1"));
    }
    Ok((0..frame_count)
        .map(|t| {
            let distance = t % gop_length;
            ScheduleEntry {
                frame: t,
                branch: if distance == 0 { Branch::Hr } else { Branch::Lr },
                keyframe: t - distance,
                distance,
            }
        })
        .collect())
}

/// The three parts of an altering-resolution model. `lr` must share `hr`'s
/// channel and class counts.
#[derive(Clone, Copy, Debug)]
pub struct Pipeline<'a> {
    pub hr: &'a BranchConfig,
    pub lr: &'a BranchConfig,
    pub creff: &'a Creff,
}

impl Pipeline<'_> {
    fn validate(&self) -> Result<()> {
        let (h, l) = (&self.hr.backbone.config, &self.lr.backbone.config);
        if h.feature_channels != l.feature_channels
            || h.num_classes != l.num_classes
            || self.creff.channels != h.feature_channels
        {
            return Err(Error::shape(
                "pipeline",
                format!(
                    "HR has C={}, K={}; LR has C={}, K={}; fusion has C={}",
                    h.feature_channels, h.num_classes, l.feature_channels, l.num_classes, self.creff.channels
                ),
            ));
        }
        Ok(())
    }

    /// HR logits and features of one frame, plus executed FLOPs.
    pub fn keyframe(&self, frame: &Tensor) -> Result<(Tensor, Tensor, u64)> {
        let mut tape = Tape::new();
        let vars = self.hr.backbone.register(&mut tape);
        let x = tape.leaf(frame.clone());
        let (_, h, w) = frame.dims3()?;
        let f = self.hr.features_tape(&mut tape, &vars, x)?;
        let f = tape.resize(f, h, w)?;
        let logits = self.hr.backbone.logits_tape(&mut tape, &vars, f)?;
        Ok((tape.value(logits).clone(), tape.value(f).clone(), tape.flops()))
    }

    /// LR features of one frame and executed FLOPs.
    pub fn lr_features(&self, frame: &Tensor) -> Result<(Tensor, u64)> {
        let mut tape = Tape::new();
        let vars = self.lr.backbone.register(&mut tape);
        let x = tape.leaf(frame.clone());
        let f = self.lr.features_tape(&mut tape, &vars, x)?;
        Ok((tape.value(f).clone(), tape.flops()))
    }

    /// Fusion with cached keyframe features and the shared final
    /// convolution. `motion` is per-pixel (2×H×W).
    pub fn fuse(&self, key_features: &Tensor, motion: &Tensor, lr_features: &Tensor) -> Result<(Tensor, u64)> {
        let mut tape = Tape::new();
        let cv = self.creff.register(&mut tape);
        let final_conv = self.lr.backbone.final_conv.register(&mut tape);
        let fi = tape.leaf(key_features.clone());
        let fp = tape.leaf(lr_features.clone());
        let fused = self.creff.forward_tape(&mut tape, &cv, fi, motion, fp)?;
        let logits = final_conv.apply(&mut tape, fused)?;
        Ok((tape.value(logits).clone(), tape.flops()))
    }

    /// Analytic FLOPs of an HR frame: backbone and final conv at `h×w`.
    pub fn hr_frame_flops(&self, h: usize, w: usize) -> Result<Flops> {
        self.hr.flops(h, w)
    }

    /// Analytic FLOPs of an LR frame without fusion: input resize and LR
    /// sub-networks, plus the final convolution at `h×w`.
    pub fn lr_frame_flops(&self, h: usize, w: usize) -> Result<Flops> {
        let (sh, sw) = self.lr.input_size(h, w)?;
        let b = &self.lr.backbone;
        let mut f = b.feature_flops(sh, sw);
        f.resize += crate::cost::resize(b.config.in_channels, h, w, sh, sw);
        f.conv += b.final_conv_flops(h, w);
        Ok(f)
    }

    /// Analytic FLOPs of the fusion step of an LR frame.
    pub fn creff_flops(&self, h: usize, w: usize) -> Result<Flops> {
        let (sh, sw) = self.lr.input_size(h, w)?;
        Ok(self.creff.flops(sh, sw, h, w))
    }

    pub fn cost_report(&self, h: usize, w: usize, gop_length: usize) -> Result<CostReport> {
        amortized_cost(
            self.hr_frame_flops(h, w)?.total() as f64,
            self.lr_frame_flops(h, w)?.total() as f64,
            self.creff_flops(h, w)?.total() as f64,
            gop_length,
        )
    }
}

#[derive(Clone, Debug)]
pub struct SequenceOutput {
    pub schedule: Vec<ScheduleEntry>,
    pub logits: Vec<Tensor>,
    pub labels: Vec<LabelMap>,
    /// Executed FLOPs per frame, as counted by the tape.
    pub flops: Vec<u64>,
}

/// Decodes `clip` and segments every frame: keyframes through the HR
/// branch (caching their features), other frames through the LR branch and
/// fusion with the frame's decoded motion.
pub fn run_sequence(clip: &EncodedClip, pipeline: Pipeline<'_>) -> Result<SequenceOutput> {
    pipeline.validate()?;
    let decoded = decode_clip(clip)?;
    let schedule = gop_schedule(decoded.frames.len(), clip.params.gop_length)?;
    let mut cache: Option<(usize, Tensor)> = None;
    let mut out = SequenceOutput {
        schedule: schedule.clone(),
        logits: Vec::with_capacity(schedule.len()),
        labels: Vec::with_capacity(schedule.len()),
        flops: Vec::with_capacity(schedule.len()),
    };
    for entry in &schedule {
        let frame = &decoded.frames[entry.frame];
        let (logits, flops) = match entry.branch {
            Branch::Hr => {
                let (logits, features, flops) = pipeline.keyframe(frame)?;
                cache = Some((entry.frame, features));
                (logits, flops)
            }
            Branch::Lr => {
                let key = match &cache {
                    Some((k, f)) if *k == entry.keyframe => f,
                    _ => {
                        return Err(Error::invalid(format!(
                            "frame {} needs keyframe {} features, which were never computed",
                            entry.frame, entry.keyframe
                        )))
                    }
                };
                let field = decoded.motion[entry.frame].as_ref().ok_or_else(|| {
                    Error::format("clip", format!("frame {} is scheduled as a P frame but is intra-coded", entry.frame))
                })?;
                let motion = expand_mv(field, clip.height, clip.width)?;
                let (f_p, lf) = pipeline.lr_features(frame)?;
                let (logits, ff) = pipeline.fuse(key, &motion, &f_p)?;
                (logits, lf + ff)
            }
        };
        out.labels.push(logits.argmax_channels()?);
        out.logits.push(logits);
        out.flops.push(flops);
    }
    Ok(out)
}

/// Standalone logits of `branch` on one frame, at frame resolution.
pub fn branch_logits(branch: &BranchConfig, frame: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let vars = branch.backbone.register(&mut tape);
    let x = tape.leaf(frame.clone());
    let logits = branch_logits_tape(branch, &mut tape, &vars, x)?;
    Ok(tape.value(logits).clone())
}

/// Pixel counts indexed `[gt][pred]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Confusion {
    pub classes: usize,
    pub counts: Vec<u64>,
}

impl Confusion {
    pub fn new(classes: usize) -> Self {
        Confusion {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn add(&mut self, pred: &LabelMap, gt: &LabelMap, ignore_index: u32) -> Result<()> {
        if (pred.height, pred.width) != (gt.height, gt.width) {
            return Err(Error::shape(
                "miou",
                format!("prediction is {}×{}, ground truth {}×{}", pred.height, pred.width, gt.height, gt.width),
            ));
        }
        let k = self.classes as u32;
        for (&p, &g) in pred.data.iter().zip(&gt.data) {
            if g == ignore_index {
                continue;
            }
            if g >= k || p >= k {
                return Err(Error::invalid(format!("label {} outside [0, {k})", g.max(p))));
            }
            self.counts[(g * k + p) as usize] += 1;
        }
        Ok(())
    }

    /// IoU per class; `None` for classes absent from both maps.
    pub fn per_class(&self) -> Vec<Option<f64>> {
        let k = self.classes;
        (0..k)
            .map(|c| {
                let inter = self.counts[c * k + c];
                let gt: u64 = (0..k).map(|p| self.counts[c * k + p]).sum();
                let pred: u64 = (0..k).map(|g| self.counts[g * k + c]).sum();
                let union = gt + pred - inter;
                (union > 0).then(|| inter as f64 / union as f64)
            })
            .collect()
    }

    /// Mean over present classes; `None` when no class is present. Values
    /// are summed in sorted order, so renaming classes cannot change the
    /// result.
    pub fn miou(&self) -> Option<f64> {
        let mut present: Vec<f64> = self.per_class().into_iter().flatten().collect();
        present.sort_by(f64::total_cmp);
        (!present.is_empty()).then(|| present.iter().sum::<f64>() / present.len() as f64)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Miou {
    /// `None` when every class is absent from both maps.
    pub miou: Option<f64>,
    pub per_class: Vec<Option<f64>>,
}

pub fn miou(pred: &LabelMap, gt: &LabelMap, classes: usize, ignore_index: u32) -> Result<Miou> {
    let mut c = Confusion::new(classes);
    c.add(pred, gt, ignore_index)?;
    Ok(Miou {
        miou: c.miou(),
        per_class: c.per_class(),
    })
}

/// Decoded frames of a clip with ground truth for some of them.
#[derive(Clone, Debug)]
pub struct AnnotatedClip {
    pub frames: Vec<Tensor>,
    pub labels: BTreeMap<usize, LabelMap>,
}

/// Motion-search settings used when pairing a frame with an arbitrary
/// earlier keyframe.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MotionSearch {
    pub block_size: usize,
    pub search_range: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DistanceTable {
    /// `(d, mIoU_d)` for `d = 0..L`.
    pub rows: Vec<(usize, Option<f64>)>,
    /// Mean of the defined per-distance values.
    pub overall: Option<f64>,
    /// `(p, d)` cells skipped for lack of a frame `p − d`.
    pub skipped: usize,
}

/// Scores every annotated frame `p` against every keyframe distance
/// `d < L`: HR on `p` for `d = 0`, otherwise HR on `p − d`, motion estimated
/// from `p` to `p − d`, LR on `p`, fusion and final convolution.
pub fn miou_by_distance(
    clips: &[AnnotatedClip],
    pipeline: Pipeline<'_>,
    gop_length: usize,
    search: MotionSearch,
    ignore_index: u32,
) -> Result<DistanceTable> {
    pipeline.validate()?;
    if gop_length == 0 {
        return Err(Error::invalid("GOP length must be at least 1"));
    }
    let k = pipeline.hr.backbone.config.num_classes;
    let mut conf: Vec<Confusion> = (0..gop_length).map(|_| Confusion::new(k)).collect();
    let mut skipped = 0;
    for clip in clips {
        let mut hr_cache: BTreeMap<usize, (Tensor, Tensor)> = BTreeMap::new();
        let mut hr = |t: usize| -> Result<(Tensor, Tensor)> {
            if let Some(v) = hr_cache.get(&t) {
                return Ok(v.clone());
            }
            let (logits, features, _) = pipeline.keyframe(&clip.frames[t])?;
            hr_cache.insert(t, (logits.clone(), features.clone()));
            Ok((logits, features))
        };
        for (&p, gt) in &clip.labels {
            let frame = clip.frames.get(p).ok_or_else(|| {
                Error::invalid(format!("annotation for frame {p} but the clip has {} frames", clip.frames.len()))
            })?;
            let (_, h, w) = frame.dims3()?;
            let (f_p, _) = pipeline.lr_features(frame)?;
            for (d, cm) in conf.iter_mut().enumerate() {
                if d > p {
                    skipped += 1;
                    continue;
                }
                let logits = if d == 0 {
                    hr(p)?.0
                } else {
                    let (_, key) = hr(p - d)?;
                    let field = estimate_motion(&clip.frames[p - d], frame, search.block_size, search.search_range)?;
                    pipeline.fuse(&key, &expand_mv(&field, h, w)?, &f_p)?.0
                };
                cm.add(&logits.argmax_channels()?, gt, ignore_index)?;
            }
        }
    }
    let rows: Vec<(usize, Option<f64>)> = conf.iter().enumerate().map(|(d, c)| (d, c.miou())).collect();
    let defined: Vec<f64> = rows.iter().filter_map(|r| r.1).collect();
    Ok(DistanceTable {
        overall: (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64),
        rows,
        skipped,
    })
}

/// Per-frame cost averaged over a GOP of length `L`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub hr_frame_flops: f64,
    pub lr_frame_flops: f64,
    pub creff_flops: f64,
    pub gop_length: usize,
    /// `(hr + (L−1)·(lr + creff)) / L`.
    pub average: f64,
    /// `average / hr`.
    pub ratio: f64,
}

pub fn amortized_cost(hr: f64, lr: f64, creff: f64, gop_length: usize) -> Result<CostReport> {
    if gop_length == 0 {
        return Err(Error::invalid("GOP length must be at least 1"));
    }
    if !(hr >= 0.0 && lr >= 0.0 && creff >= 0.0) {
        return Err(Error::invalid("FLOP counts must be non-negative"));
    }
    let l = gop_length as f64;
    let average = (hr + (l - 1.0) * (lr + creff)) / l;
    Ok(CostReport {
        hr_frame_flops: hr,
        lr_frame_flops: lr,
        creff_flops: creff,
        gop_length,
        average,
        ratio: if hr > 0.0 { average / hr } else { f64::NAN },
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RatePoint {
    pub flops: f64,
    pub miou: f64,
}

/// At least two points with positive FLOPs, sorted by FLOPs.
#[derive(Clone, Debug, PartialEq)]
pub struct RateCurve {
    points: Vec<RatePoint>,
}

impl RateCurve {
    pub fn new(mut points: Vec<RatePoint>) -> Result<Self> {
        if points.len() < 2 {
            return Err(Error::invalid("a rate curve needs at least two points"));
        }
        if points.iter().any(|p| !(p.flops > 0.0 && p.flops.is_finite() && p.miou.is_finite())) {
            return Err(Error::invalid("rate points need positive finite FLOPs and finite mIoU"));
        }
        points.sort_by(|a, b| a.flops.total_cmp(&b.flops));
        Ok(RateCurve { points })
    }

    pub fn points(&self) -> &[RatePoint] {
        &self.points
    }

    /// Reads CSV with a header naming `flops` and `miou` columns.
    pub fn read_csv(input: impl Read) -> Result<Self> {
        let mut r = csv::Reader::from_reader(input);
        let points = r.deserialize().collect::<std::result::Result<Vec<RatePoint>, _>>()?;
        Self::new(points)
    }

    pub fn write_csv(&self, out: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for p in &self.points {
            w.serialize(p)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Least-squares polynomial of degree `min(3, n−1)` in `x − center`.
struct Poly {
    center: f64,
    coef: Vec<f64>,
}

impl Poly {
    fn fit(xs: &[f64], ys: &[f64]) -> Result<Poly> {
        let n = xs.len();
        let deg = (n - 1).min(3);
        let center = xs.iter().sum::<f64>() / n as f64;
        let a = DMatrix::from_fn(n, deg + 1, |i, j| (xs[i] - center).powi(j as i32));
        let b = DVector::from_column_slice(ys);
        let coef = a
            .svd(true, true)
            .solve(&b, 1e-14)
            .map_err(|e| Error::invalid(format!("curve fit failed: {e}")))?;
        Ok(Poly {
            center,
            coef: coef.iter().copied().collect(),
        })
    }

    fn integral(&self, lo: f64, hi: f64) -> f64 {
        let anti = |x: f64| {
            let u = x - self.center;
            self.coef
                .iter()
                .enumerate()
                .map(|(j, c)| c * u.powi(j as i32 + 1) / (j + 1) as f64)
                .sum::<f64>()
        };
        anti(hi) - anti(lo)
    }
}

fn mean_gap(
    axis: &'static str,
    anchor: (&[f64], &[f64]),
    test: (&[f64], &[f64]),
) -> Result<f64> {
    let range = |v: &[f64]| (v.iter().copied().fold(f64::INFINITY, f64::min), v.iter().copied().fold(f64::NEG_INFINITY, f64::max));
    let (alo, ahi) = range(anchor.0);
    let (tlo, thi) = range(test.0);
    let (lo, hi) = (alo.max(tlo), ahi.min(thi));
    if lo >= hi {
        return Err(Error::NoOverlap {
            axis,
            anchor_lo: alo,
            anchor_hi: ahi,
            test_lo: tlo,
            test_hi: thi,
        });
    }
    let pa = Poly::fit(anchor.0, anchor.1)?;
    let pt = Poly::fit(test.0, test.1)?;
    Ok((pt.integral(lo, hi) - pa.integral(lo, hi)) / (hi - lo))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BdResult {
    /// Mean mIoU gain of `test` over `anchor` at equal cost.
    pub bd_miou: f64,
    /// Mean relative cost change of `test` at equal mIoU, in percent.
    pub bd_flops: f64,
}

fn log_flops(c: &RateCurve) -> Vec<f64> {
    c.points.iter().map(|p| p.flops.log10()).collect()
}

fn mious(c: &RateCurve) -> Vec<f64> {
    c.points.iter().map(|p| p.miou).collect()
}

/// Mean mIoU gap of `test` over `anchor` across their shared log10-FLOPs
/// interval, from cubic fits of mIoU against log10 FLOPs.
pub fn bd_miou(anchor: &RateCurve, test: &RateCurve) -> Result<f64> {
    mean_gap("log10 FLOPs", (&log_flops(anchor), &mious(anchor)), (&log_flops(test), &mious(test)))
}

/// Mean relative FLOPs change of `test` against `anchor` across their
/// shared mIoU interval, in percent, from cubic fits of log10 FLOPs against
/// mIoU.
pub fn bd_flops(anchor: &RateCurve, test: &RateCurve) -> Result<f64> {
    let gap = mean_gap("mIoU", (&mious(anchor), &log_flops(anchor)), (&mious(test), &log_flops(test)))?;
    Ok((10f64.powf(gap) - 1.0) * 100.0)
}

/// Both deltas; fails if either axis lacks overlap.
pub fn bd_metrics(anchor: &RateCurve, test: &RateCurve) -> Result<BdResult> {
    Ok(BdResult {
        bd_miou: bd_miou(anchor, test)?,
        bd_flops: bd_flops(anchor, test)?,
    })
}

/// Writes `d,miou` rows, the overall mean, and the cost report as key/value
/// rows under the same two columns.
pub fn write_report(table: &DistanceTable, cost: Option<&CostReport>, out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let fmt = |v: Option<f64>| v.map_or_else(|| "missing".to_string(), |v| v.to_string());
    w.write_record(["d", "miou"])?;
    for &(d, m) in &table.rows {
        w.write_record([d.to_string(), fmt(m)])?;
    }
    w.write_record(["overall".to_string(), fmt(table.overall)])?;
    if let Some(c) = cost {
        for (k, v) in [
            ("hr_frame_flops", c.hr_frame_flops),
            ("lr_frame_flops", c.lr_frame_flops),
            ("creff_flops", c.creff_flops),
            ("gop_length", c.gop_length as f64),
            ("average_flops", c.average),
            ("ratio", c.ratio),
        ] {
            w.write_record([k.to_string(), v.to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}
