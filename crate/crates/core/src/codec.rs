//! Toy GOP codec: full-search block matching, uniform residual quantization
//! and a bit-exact container.
//!
//! Every GOP opens with an I frame stored verbatim. Each following P frame
//! is predicted from that I frame (not from the previous frame), so the
//! motion vectors a P frame carries point straight at its keyframe.
//!
//! With `quant_step = 0` the decoder reproduces every frame bit for bit as
//! long as pixel values sit on a fixed-point grid such as `k / 256`, where
//! residuals and their sums are exact in `f64`. Arbitrary doubles can be
//! off by one rounding step.
//!
//! Container layout, all integers little-endian:
//!
//! ```text
//! "ARSG" u8 version=1
//! u16 width  u16 height  u16 gop_length  u8 block_size  u8 search_range
//! f64 quant_step  u8 channels  u32 frame_count
//! per frame: u8 type (0 = I, 1 = P)
//!   I: f64 pixels, C×H×W row-major
//!   P: i8 (dx, dy) per block, block rows row-major, then f64 residuals C×H×W
//! ```

use std::fs;
use std::path::Path;

use crate::bytes::{put_f64s, Reader};
use crate::error::{Error, Result};
use crate::ops;
use crate::tensor::Tensor;

pub const CLIP_MAGIC: &[u8; 4] = b"ARSG";
pub const CLIP_VERSION: u8 = 1;

/// Integer-pel displacement. Adding it to a current-frame coordinate gives
/// the sampling location in the reference frame.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub struct MotionVector {
    pub dx: i32,
    pub dy: i32,
}

impl MotionVector {
    pub const ZERO: MotionVector = MotionVector { dx: 0, dy: 0 };

    pub fn new(dx: i32, dy: i32) -> Self {
        MotionVector { dx, dy }
    }
}

/// One motion vector per `block_size × block_size` block.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MotionField {
    pub block_size: usize,
    pub rows: usize,
    pub cols: usize,
    pub vectors: Vec<MotionVector>,
}

impl MotionField {
    pub fn uniform(block_size: usize, rows: usize, cols: usize, mv: MotionVector) -> Self {
        MotionField {
            block_size,
            rows,
            cols,
            vectors: vec![mv; rows * cols],
        }
    }

    /// Block grid needed to cover an `h×w` frame.
    pub fn grid_for(h: usize, w: usize, block_size: usize) -> (usize, usize) {
        (h.div_ceil(block_size), w.div_ceil(block_size))
    }

    pub fn get(&self, row: usize, col: usize) -> MotionVector {
        self.vectors[row * self.cols + col]
    }

    pub fn max_magnitude(&self) -> i32 {
        self.vectors
            .iter()
            .map(|v| v.dx.abs().max(v.dy.abs()))
            .max()
            .unwrap_or(0)
    }

    pub fn is_zero(&self) -> bool {
        self.vectors.iter().all(|v| *v == MotionVector::ZERO)
    }

    fn covers(&self, h: usize, w: usize) -> bool {
        self.block_size > 0 && (self.rows, self.cols) == Self::grid_for(h, w, self.block_size)
    }
}

/// Per-pixel expansion of a block field into a `2×H×W` map, channel 0
/// holding x displacements and channel 1 y displacements.
pub fn expand_mv(field: &MotionField, h: usize, w: usize) -> Result<Tensor> {
    if !field.covers(h, w) {
        return Err(Error::shape(
            "expand_mv",
            format!(
                "{}×{} grid of {}-pixel blocks does not cover {h}×{w}",
                field.rows, field.cols, field.block_size
            ),
        ));
    }
    let hw = h * w;
    let mut out = vec![0.0; 2 * hw];
    for y in 0..h {
        for x in 0..w {
            let mv = field.get(y / field.block_size, x / field.block_size);
            out[y * w + x] = mv.dx as f64;
            out[hw + y * w + x] = mv.dy as f64;
        }
    }
    Tensor::new(&[2, h, w], out)
}

/// Candidate displacements in tie-break order: `(0,0)`, then ascending
/// `|dx|+|dy|`, then ascending `dy`, then ascending `dx`.
pub fn candidate_order(search_range: usize) -> Vec<MotionVector> {
    let r = search_range as i32;
    let mut c: Vec<MotionVector> = (-r..=r)
        .flat_map(|dy| (-r..=r).map(move |dx| MotionVector::new(dx, dy)))
        .collect();
    c.sort_by_key(|v| (v.dx.abs() + v.dy.abs(), v.dy, v.dx));
    c
}

#[inline]
fn clamp_coord(v: i64, n: usize) -> usize {
    v.clamp(0, n as i64 - 1) as usize
}

/// Full-search SAD block matching of `current` against `reference`.
///
/// Blocks overhanging the frame edge read the current frame with edge
/// replication; reference samples are clamped into the frame.
pub fn estimate_motion(
    reference: &Tensor,
    current: &Tensor,
    block_size: usize,
    search_range: usize,
) -> Result<MotionField> {
    let (c, h, w) = current.dims3()?;
    if reference.shape() != current.shape() {
        return Err(Error::shape(
            "estimate_motion",
            format!(
                "reference {:?} and current {:?} differ",
                reference.shape(),
                current.shape()
            ),
        ));
    }
    if block_size == 0 || block_size > h.min(w) {
        return Err(Error::invalid(format!(
            "block size {block_size} must be in 1..={} for a {h}×{w} frame",
            h.min(w)
        )));
    }
    if search_range > i8::MAX as usize {
        return Err(Error::invalid(format!(
            "search range {search_range} exceeds the container's i8 vectors"
        )));
    }
    let (rows, cols) = MotionField::grid_for(h, w, block_size);
    let cands = candidate_order(search_range);
    let cur = current.data();
    let refd = reference.data();
    let mut vectors = Vec::with_capacity(rows * cols);
    let mut block = vec![0.0; c * block_size * block_size];
    for by in 0..rows {
        for bx in 0..cols {
            // gather the (edge-replicated) current block once
            let mut i = 0;
            for ch in 0..c {
                for yy in 0..block_size {
                    let y = clamp_coord((by * block_size + yy) as i64, h);
                    for xx in 0..block_size {
                        let x = clamp_coord((bx * block_size + xx) as i64, w);
                        block[i] = cur[(ch * h + y) * w + x];
                        i += 1;
                    }
                }
            }
            let mut best = MotionVector::ZERO;
            let mut best_sad = f64::INFINITY;
            for &mv in &cands {
                let mut sad = 0.0;
                let mut i = 0;
                'outer: for ch in 0..c {
                    for yy in 0..block_size {
                        let ry = clamp_coord((by * block_size + yy) as i64 + mv.dy as i64, h);
                        let row = &refd[(ch * h + ry) * w..(ch * h + ry + 1) * w];
                        for xx in 0..block_size {
                            let rx = clamp_coord((bx * block_size + xx) as i64 + mv.dx as i64, w);
                            sad += (block[i] - row[rx]).abs();
                            i += 1;
                        }
                        if sad >= best_sad {
                            break 'outer;
                        }
                    }
                }
                if sad < best_sad {
                    best_sad = sad;
                    best = mv;
                }
            }
            vectors.push(best);
        }
    }
    Ok(MotionField {
        block_size,
        rows,
        cols,
        vectors,
    })
}

/// Sum of absolute differences of one block at displacement `mv`.
pub fn block_sad(
    reference: &Tensor,
    current: &Tensor,
    block_size: usize,
    row: usize,
    col: usize,
    mv: MotionVector,
) -> f64 {
    let (c, h, w) = current.dims3().expect("C×H×W");
    let mut sad = 0.0;
    for ch in 0..c {
        for yy in 0..block_size {
            for xx in 0..block_size {
                let y = (row * block_size + yy) as i64;
                let x = (col * block_size + xx) as i64;
                let cv = current.at3(ch, clamp_coord(y, h), clamp_coord(x, w));
                let rv = reference.at3(
                    ch,
                    clamp_coord(y + mv.dy as i64, h),
                    clamp_coord(x + mv.dx as i64, w),
                );
                sad += (cv - rv).abs();
            }
        }
    }
    sad
}

/// Motion-compensated prediction of a frame from `reference`.
pub fn motion_compensate(reference: &Tensor, field: &MotionField) -> Result<Tensor> {
    let (_, h, w) = reference.dims3()?;
    let m = expand_mv(field, h, w)?;
    let index = ops::warp_index(&m, h, w)?;
    ops::gather_spatial(reference, &index)
}

/// Uniform mid-tread quantizer; a step of 0 passes values through.
pub fn quantize(value: f64, step: f64) -> f64 {
    if step == 0.0 {
        value
    } else {
        (value / step).round() * step
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum EncodedFrame {
    Intra(Tensor),
    Inter { motion: MotionField, residual: Tensor },
}

impl EncodedFrame {
    pub fn is_intra(&self) -> bool {
        matches!(self, EncodedFrame::Intra(_))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CodecParams {
    pub gop_length: usize,
    pub block_size: usize,
    pub search_range: usize,
    pub quant_step: f64,
}

impl Default for CodecParams {
    fn default() -> Self {
        CodecParams {
            gop_length: 12,
            block_size: 4,
            search_range: 8,
            quant_step: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncodedClip {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub params: CodecParams,
    pub frames: Vec<EncodedFrame>,
}

/// Decoder output: reconstructed frames plus the motion field of each P
/// frame (`None` for I frames).
#[derive(Clone, Debug)]
pub struct Decoded {
    pub frames: Vec<Tensor>,
    pub motion: Vec<Option<MotionField>>,
}

fn validate_params(p: &CodecParams, c: usize, h: usize, w: usize) -> Result<()> {
    if p.gop_length == 0 || p.gop_length > u16::MAX as usize {
        return Err(Error::invalid(format!("GOP length {} out of range", p.gop_length)));
    }
    if p.block_size == 0 || p.block_size > u8::MAX as usize || p.block_size > h.min(w) {
        return Err(Error::invalid(format!(
            "block size {} must be in 1..={}",
            p.block_size,
            h.min(w).min(u8::MAX as usize)
        )));
    }
    if p.search_range > i8::MAX as usize {
        return Err(Error::invalid(format!("search range {} exceeds 127", p.search_range)));
    }
    if !(p.quant_step >= 0.0 && p.quant_step.is_finite()) {
        return Err(Error::invalid(format!("quant step {} must be finite and ≥ 0", p.quant_step)));
    }
    if c > u8::MAX as usize || h > u16::MAX as usize || w > u16::MAX as usize {
        return Err(Error::invalid(format!("frame {c}×{h}×{w} exceeds container limits")));
    }
    Ok(())
}

pub fn encode_clip(frames: &[Tensor], params: CodecParams) -> Result<EncodedClip> {
    let first = frames
        .first()
        .ok_or_else(|| Error::invalid("cannot encode an empty clip"))?;
    let (c, h, w) = first.dims3()?;
    validate_params(&params, c, h, w)?;
    if frames.len() > u32::MAX as usize {
        return Err(Error::invalid("too many frames"));
    }
    if let Some((i, f)) = frames.iter().enumerate().find(|(_, f)| f.shape() != first.shape()) {
        return Err(Error::shape(
            "encode_clip",
            format!("frame {i} is {:?}, frame 0 is {:?}", f.shape(), first.shape()),
        ));
    }
    let mut out = Vec::with_capacity(frames.len());
    for gop in frames.chunks(params.gop_length) {
        let key = &gop[0];
        out.push(EncodedFrame::Intra(key.clone()));
        for cur in &gop[1..] {
            let motion = estimate_motion(key, cur, params.block_size, params.search_range)?;
            let pred = motion_compensate(key, &motion)?;
            let residual = cur.zip_map(&pred, |a, b| quantize(a - b, params.quant_step))?;
            out.push(EncodedFrame::Inter { motion, residual });
        }
    }
    Ok(EncodedClip {
        width: w,
        height: h,
        channels: c,
        params,
        frames: out,
    })
}

pub fn decode_clip(clip: &EncodedClip) -> Result<Decoded> {
    let shape = [clip.channels, clip.height, clip.width];
    let mut frames = Vec::with_capacity(clip.frames.len());
    let mut motion = Vec::with_capacity(clip.frames.len());
    let mut key: Option<usize> = None;
    for (t, f) in clip.frames.iter().enumerate() {
        match f {
            EncodedFrame::Intra(px) => {
                if px.shape() != shape {
                    return Err(Error::format("clip", format!("I frame {t} has shape {:?}", px.shape())));
                }
                key = Some(t);
                frames.push(px.clone());
                motion.push(None);
            }
            EncodedFrame::Inter { motion: mf, residual } => {
                let k = key.ok_or_else(|| Error::format("clip", format!("P frame {t} precedes any I frame")))?;
                let pred = motion_compensate(&frames[k], mf)?;
                frames.push(pred.zip_map(residual, |a, b| a + b)?);
                motion.push(Some(mf.clone()));
            }
        }
    }
    Ok(Decoded { frames, motion })
}

impl EncodedClip {
    pub fn frame_count(&self) -> usize {
        self.frames.len()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CLIP_MAGIC);
        out.push(CLIP_VERSION);
        out.extend_from_slice(&(self.width as u16).to_le_bytes());
        out.extend_from_slice(&(self.height as u16).to_le_bytes());
        out.extend_from_slice(&(self.params.gop_length as u16).to_le_bytes());
        out.push(self.params.block_size as u8);
        out.push(self.params.search_range as u8);
        out.extend_from_slice(&self.params.quant_step.to_le_bytes());
        out.push(self.channels as u8);
        out.extend_from_slice(&(self.frames.len() as u32).to_le_bytes());
        for f in &self.frames {
            match f {
                EncodedFrame::Intra(px) => {
                    out.push(0);
                    put_f64s(&mut out, px.data());
                }
                EncodedFrame::Inter { motion, residual } => {
                    out.push(1);
                    for v in &motion.vectors {
                        out.push(v.dx as i8 as u8);
                        out.push(v.dy as i8 as u8);
                    }
                    put_f64s(&mut out, residual.data());
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, "clip");
        let magic = r.take(4)?;
        if magic != CLIP_MAGIC {
            return Err(Error::format("clip", format!("bad magic {magic:?}")));
        }
        let version = r.u8()?;
        if version != CLIP_VERSION {
            return Err(Error::format("clip", format!("unsupported version {version}")));
        }
        let width = r.u16()? as usize;
        let height = r.u16()? as usize;
        let gop_length = r.u16()? as usize;
        let block_size = r.u8()? as usize;
        let search_range = r.u8()? as usize;
        let quant_step = r.f64()?;
        let channels = r.u8()? as usize;
        let frame_count = r.u32()? as usize;
        if width == 0 || height == 0 || channels == 0 {
            return Err(Error::format("clip", format!("empty frame geometry {channels}×{height}×{width}")));
        }
        let params = CodecParams {
            gop_length,
            block_size,
            search_range,
            quant_step,
        };
        validate_params(&params, channels, height, width).map_err(|e| Error::format("clip", e.to_string()))?;
        let shape = [channels, height, width];
        let n = channels * height * width;
        let (rows, cols) = MotionField::grid_for(height, width, block_size);
        let mut frames = Vec::with_capacity(frame_count.min(1 << 16));
        for t in 0..frame_count {
            let at = r.offset();
            let kind = r.u8()?;
            let expect_intra = t % gop_length == 0;
            match (kind, expect_intra) {
                (0, true) => frames.push(EncodedFrame::Intra(Tensor::new(&shape, r.f64_vec(n)?)?)),
                (1, false) => {
                    let mut vectors = Vec::with_capacity(rows * cols);
                    for _ in 0..rows * cols {
                        let mv = MotionVector::new(r.i8()? as i32, r.i8()? as i32);
                        if mv.dx.unsigned_abs() as usize > search_range || mv.dy.unsigned_abs() as usize > search_range {
                            return Err(Error::format(
                                "clip",
                                format!("frame {t}: vector ({}, {}) exceeds search range {search_range}", mv.dx, mv.dy),
                            ));
                        }
                        vectors.push(mv);
                    }
                    let residual = Tensor::new(&shape, r.f64_vec(n)?)?;
                    frames.push(EncodedFrame::Inter {
                        motion: MotionField {
                            block_size,
                            rows,
                            cols,
                            vectors,
                        },
                        residual,
                    });
                }
                (0 | 1, _) => {
                    return Err(Error::format(
                        "clip",
                        format!("frame {t} at offset {at}: type {kind} breaks the GOP structure (L = {gop_length})"),
                    ))
                }
                _ => return Err(Error::format("clip", format!("frame {t} at offset {at}: unknown type {kind}"))),
            }
        }
        r.finish()?;
        Ok(EncodedClip {
            width,
            height,
            channels,
            params,
            frames,
        })
    }

    pub fn write_file(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn read_file(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn noise(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.gen_range(0.0..1.0))
    }

    /// Content of `src` moved by (sx, sy): out(x, y) = src(x − sx, y − sy), clamped.
    fn translate(src: &Tensor, sx: i64, sy: i64) -> Tensor {
        let (c, h, w) = src.dims3().unwrap();
        Tensor::from_fn(&[c, h, w], |i| {
            let (ch, y, x) = (i / (h * w), (i / w) % h, i % w);
            src.at3(ch, clamp_coord(y as i64 - sy, h), clamp_coord(x as i64 - sx, w))
        })
    }

    /// Exhaustive SAD search written independently of the encoder's loop.
    fn oracle_field(reference: &Tensor, current: &Tensor, b: usize, s: usize) -> MotionField {
        let (_, h, w) = current.dims3().unwrap();
        let (rows, cols) = MotionField::grid_for(h, w, b);
        let r = s as i32;
        let mut vectors = Vec::new();
        for row in 0..rows {
            for col in 0..cols {
                let mut all: Vec<(f64, i32, i32, i32)> = Vec::new();
                for dy in -r..=r {
                    for dx in -r..=r {
                        let sad = block_sad(reference, current, b, row, col, MotionVector::new(dx, dy));
                        all.push((sad, dx.abs() + dy.abs(), dy, dx));
                    }
                }
                all.sort_by(|a, b| a.partial_cmp(b).unwrap());
                vectors.push(MotionVector::new(all[0].3, all[0].2));
            }
        }
        MotionField {
            block_size: b,
            rows,
            cols,
            vectors,
        }
    }

    #[test]
    fn identical_frames_give_zero_motion() {
        let f = noise(&[1, 16, 16], 1);
        let m = estimate_motion(&f, &f, 4, 3).unwrap();
        assert!(m.is_zero());
        let flat = Tensor::full(&[2, 8, 12], 0.5);
        assert!(estimate_motion(&flat, &flat, 4, 5).unwrap().is_zero());
    }

    #[test]
    fn rightward_translation_reports_negative_dx() {
        let reference = noise(&[1, 16, 24], 2);
        let current = translate(&reference, 2, 0);
        let m = estimate_motion(&reference, &current, 4, 3).unwrap();
        let oracle = oracle_field(&reference, &current, 4, 3);
        assert_eq!(m, oracle);
        for row in 0..m.rows {
            for col in 1..m.cols {
                assert_eq!(m.get(row, col), MotionVector::new(-2, 0), "block {row},{col}");
            }
        }
    }

    #[test]
    fn matches_oracle_on_random_frames() {
        for seed in 0..4 {
            let reference = noise(&[2, 10, 13], 10 + seed);
            let current = noise(&[2, 10, 13], 20 + seed);
            let m = estimate_motion(&reference, &current, 4, 2).unwrap();
            assert_eq!(m, oracle_field(&reference, &current, 4, 2));
            for row in 0..m.rows {
                for col in 0..m.cols {
                    let at = block_sad(&reference, &current, 4, row, col, m.get(row, col));
                    let zero = block_sad(&reference, &current, 4, row, col, MotionVector::ZERO);
                    assert!(at <= zero);
                }
            }
        }
    }

    #[test]
    fn tie_break_order() {
        let order = candidate_order(1);
        assert_eq!(order[0], MotionVector::ZERO);
        assert_eq!(
            &order[1..5],
            &[
                MotionVector::new(0, -1),
                MotionVector::new(-1, 0),
                MotionVector::new(1, 0),
                MotionVector::new(0, 1)
            ]
        );
        // Horizontal stripes with period 2, current shifted by one row: dy = ±1
        // both match exactly and dx never matters.
        let reference = Tensor::from_fn(&[1, 12, 12], |i| ((i / 12) % 2) as f64);
        let current = Tensor::from_fn(&[1, 12, 12], |i| (((i / 12) + 1) % 2) as f64);
        let m = estimate_motion(&reference, &current, 4, 2).unwrap();
        // the L1 = 1 candidates (0,-1) and (0,1) tie; lower dy wins
        assert_eq!(m.get(1, 1), MotionVector::new(0, -1));
        // a constant block ties everywhere and keeps the zero vector
        let flat = Tensor::full(&[1, 8, 8], 1.0);
        assert!(estimate_motion(&flat, &flat, 4, 2).unwrap().is_zero());
    }

    #[test]
    fn rejects_oversized_blocks() {
        let f = noise(&[1, 6, 10], 3);
        assert!(estimate_motion(&f, &f, 7, 1).is_err());
        assert!(estimate_motion(&f, &noise(&[1, 6, 9], 3), 2, 1).is_err());
    }

    #[test]
    fn non_divisible_frames_pad_by_replication() {
        let reference = noise(&[1, 10, 11], 4);
        let current = translate(&reference, 1, 1);
        let m = estimate_motion(&reference, &current, 4, 2).unwrap();
        assert_eq!((m.rows, m.cols), (3, 3));
        assert_eq!(m, oracle_field(&reference, &current, 4, 2));
    }

    #[test]
    fn expand_mv_replicates_blocks() {
        let f = MotionField::uniform(8, 1, 1, MotionVector::new(3, -1));
        let e = expand_mv(&f, 8, 8).unwrap();
        assert!(e.data()[..64].iter().all(|&v| v == 3.0));
        assert!(e.data()[64..].iter().all(|&v| v == -1.0));

        let f = MotionField {
            block_size: 4,
            rows: 2,
            cols: 2,
            vectors: vec![
                MotionVector::new(1, 2),
                MotionVector::new(-3, 0),
                MotionVector::new(0, 5),
                MotionVector::new(-1, -1),
            ],
        };
        let e = expand_mv(&f, 8, 8).unwrap();
        for y in 0..8 {
            for x in 0..8 {
                let mv = f.get(y / 4, x / 4);
                assert_eq!(e.at3(0, y, x), mv.dx as f64);
                assert_eq!(e.at3(1, y, x), mv.dy as f64);
            }
        }
        assert!(expand_mv(&f, 9, 8).is_err());
    }

    #[test]
    fn expand_then_mode_pool_recovers_grid() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (b, h, w) = (3, 10, 8);
        let (rows, cols) = MotionField::grid_for(h, w, b);
        let f = MotionField {
            block_size: b,
            rows,
            cols,
            vectors: (0..rows * cols)
                .map(|_| MotionVector::new(rng.gen_range(-4..=4), rng.gen_range(-4..=4)))
                .collect(),
        };
        let e = expand_mv(&f, h, w).unwrap();
        for row in 0..rows {
            for col in 0..cols {
                let mut counts = std::collections::HashMap::new();
                for y in row * b..((row + 1) * b).min(h) {
                    for x in col * b..((col + 1) * b).min(w) {
                        *counts.entry((e.at3(0, y, x) as i32, e.at3(1, y, x) as i32)).or_insert(0) += 1;
                    }
                }
                let (&(dx, dy), _) = counts.iter().max_by_key(|(_, &n)| n).unwrap();
                assert_eq!(MotionVector::new(dx, dy), f.get(row, col));
            }
        }
    }

    fn moving_clip(n: usize) -> Vec<Tensor> {
        let base = noise(&[1, 16, 16], 6);
        (0..n).map(|t| translate(&base, t as i64, (t / 2) as i64)).collect()
    }

    #[test]
    fn single_frame_clip() {
        let clip = encode_clip(&[noise(&[1, 8, 8], 7)], CodecParams::default()).unwrap();
        assert_eq!(clip.frames.len(), 1);
        assert!(clip.frames[0].is_intra());
    }

    #[test]
    fn lossless_round_trip() {
        let frames = moving_clip(9);
        let params = CodecParams {
            gop_length: 4,
            block_size: 4,
            search_range: 6,
            quant_step: 0.0,
        };
        let clip = encode_clip(&frames, params).unwrap();
        assert_eq!(clip.frame_count(), 9);
        for (t, f) in clip.frames.iter().enumerate() {
            assert_eq!(f.is_intra(), t % 4 == 0);
        }
        let dec = decode_clip(&clip).unwrap();
        assert_eq!(dec.frames, frames);
        assert!(dec.motion[0].is_none() && dec.motion[4].is_none() && dec.motion[1].is_some());
        let back = EncodedClip::from_bytes(&clip.to_bytes()).unwrap();
        assert_eq!(back, clip);
    }

    #[test]
    fn static_clip_has_zero_motion_and_residual() {
        let f = noise(&[2, 8, 8], 8);
        let clip = encode_clip(&vec![f; 5], CodecParams { gop_length: 5, ..CodecParams::default() }).unwrap();
        for fr in &clip.frames[1..] {
            let EncodedFrame::Inter { motion, residual } = fr else { panic!() };
            assert!(motion.is_zero());
            assert!(residual.data().iter().all(|&r| r == 0.0));
        }
    }

    #[test]
    fn quantized_error_is_bounded() {
        let frames = moving_clip(6);
        let q = 0.1;
        let clip = encode_clip(
            &frames,
            CodecParams {
                gop_length: 6,
                block_size: 4,
                search_range: 6,
                quant_step: q,
            },
        )
        .unwrap();
        let dec = decode_clip(&clip).unwrap();
        assert_eq!(dec.frames[0], frames[0]);
        for (a, b) in dec.frames.iter().zip(&frames) {
            assert!(a.max_abs_diff(b) <= q / 2.0 + 1e-12);
        }
    }

    #[test]
    fn motion_stays_in_range() {
        let frames = moving_clip(8);
        let clip = encode_clip(&frames, CodecParams { gop_length: 8, block_size: 4, search_range: 2, quant_step: 0.0 }).unwrap();
        for m in decode_clip(&clip).unwrap().motion.iter().flatten() {
            assert!(m.max_magnitude() <= 2);
        }
    }

    #[test]
    fn container_layout_and_errors() {
        let clip = encode_clip(&moving_clip(3), CodecParams { gop_length: 2, block_size: 8, search_range: 1, quant_step: 0.5 }).unwrap();
        let b = clip.to_bytes();
        assert_eq!(&b[..4], b"ARSG");
        assert_eq!(b[4], 1);
        assert_eq!(u16::from_le_bytes([b[5], b[6]]), 16);
        assert_eq!(u16::from_le_bytes([b[9], b[10]]), 2);
        assert_eq!(b[11], 8);
        assert_eq!(b[12], 1);
        assert_eq!(f64::from_le_bytes(b[13..21].try_into().unwrap()), 0.5);
        assert_eq!(b[21], 1);
        assert_eq!(u32::from_le_bytes(b[22..26].try_into().unwrap()), 3);
        assert_eq!(b[26], 0);
        let header = 26;
        let i_len = 1 + 256 * 8;
        let p_len = 1 + 4 * 2 + 256 * 8;
        assert_eq!(b.len(), header + 2 * i_len + p_len);
        assert_eq!(encode_clip(&moving_clip(3), clip.params).unwrap().to_bytes(), b);

        let mut bad = b.clone();
        bad[1] = b'X';
        assert!(matches!(EncodedClip::from_bytes(&bad), Err(Error::Format { .. })));
        match EncodedClip::from_bytes(&b[..b.len() - 5]) {
            Err(Error::Truncated { offset, .. }) => assert!(offset > header),
            other => panic!("unexpected {other:?}"),
        }
        let mut wrong_type = b.clone();
        wrong_type[header + i_len] = 0;
        assert!(EncodedClip::from_bytes(&wrong_type).is_err());
    }
}
