//! Dense row-major `f64` tensors of rank 1 to 4, plus integer label maps.
//!
//! Both share one on-disk layout: magic `TNSR`, a `u8` rank, one `u32` per
//! extent and the row-major `f64` payload, all little-endian. Label maps are
//! stored as rank-2 tensors whose values are exact non-negative integers.

use std::fmt;
use std::fs;
use std::path::Path;

use crate::bytes::{put_f64s, Reader};
use crate::error::{Error, Result};

pub const TENSOR_MAGIC: &[u8; 4] = b"TNSR";
pub const MAX_RANK: usize = 4;

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() || shape.len() > MAX_RANK {
        return Err(Error::invalid(format!(
            "tensor rank must be in 1..={MAX_RANK}, got {}",
            shape.len()
        )));
    }
    if let Some(axis) = shape.iter().position(|&e| e == 0) {
        return Err(Error::invalid(format!("tensor extent {axis} is zero")));
    }
    Ok(shape.iter().product())
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let n = check_shape(shape)?;
        if n != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {shape:?} holds {n} values, data has {}", data.len()),
            ));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = check_shape(shape).expect("valid shape");
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// Builds a tensor by evaluating `f` at every row-major flat index.
    pub fn from_fn(shape: &[usize], f: impl FnMut(usize) -> f64) -> Self {
        let n = check_shape(shape).expect("valid shape");
        Tensor {
            shape: shape.to_vec(),
            data: (0..n).map(f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Interprets the tensor as `C×H×W`.
    pub fn dims3(&self) -> Result<(usize, usize, usize)> {
        match *self.shape.as_slice() {
            [c, h, w] => Ok((c, h, w)),
            _ => Err(Error::shape(
                "dims3",
                format!("expected a C×H×W tensor, got shape {:?}", self.shape),
            )),
        }
    }

    pub fn at3(&self, c: usize, y: usize, x: usize) -> f64 {
        let (h, w) = (self.shape[1], self.shape[2]);
        self.data[(c * h + y) * w + x]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n = check_shape(shape)?;
        if n != self.data.len() {
            return Err(Error::shape(
                "reshape",
                format!("cannot view {:?} as {shape:?}", self.shape),
            ));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// Returns the first value; intended for scalar results.
    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.expect_same_shape(other, "zip_map")?;
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub(crate) fn expect_same_shape(&self, other: &Tensor, op: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(
                op,
                format!("operands have shapes {:?} and {:?}", self.shape, other.shape),
            ));
        }
        Ok(())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Per-pixel argmax over the leading channel axis of a `K×H×W` tensor.
    /// Ties resolve to the lowest class id.
    pub fn argmax_channels(&self) -> Result<LabelMap> {
        let (k, h, w) = self.dims3()?;
        let hw = h * w;
        let data = (0..hw)
            .map(|p| {
                let mut best = 0;
                for c in 1..k {
                    if self.data[c * hw + p] > self.data[best * hw + p] {
                        best = c;
                    }
                }
                best as u32
            })
            .collect();
        Ok(LabelMap {
            height: h,
            width: w,
            data,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(5 + 4 * self.rank() + 8 * self.len());
        out.extend_from_slice(TENSOR_MAGIC);
        out.push(self.rank() as u8);
        for &e in &self.shape {
            out.extend_from_slice(&(e as u32).to_le_bytes());
        }
        put_f64s(&mut out, &self.data);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, "tensor file");
        let tensor = Self::read_from(&mut r)?;
        r.finish()?;
        Ok(tensor)
    }

    pub(crate) fn read_from(r: &mut Reader<'_>) -> Result<Self> {
        let magic = r.take(4)?;
        if magic != TENSOR_MAGIC {
            return Err(Error::format(
                "tensor file",
                format!("bad magic {magic:?} at offset {}", r.offset() - 4),
            ));
        }
        let rank = r.u8()? as usize;
        if rank == 0 || rank > MAX_RANK {
            return Err(Error::format("tensor file", format!("rank {rank} out of range")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let n = check_shape(&shape).map_err(|e| Error::format("tensor file", e.to_string()))?;
        let data = r.f64_vec(n)?;
        Ok(Tensor { shape, data })
    }

    pub fn write_file(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn read_file(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

/// Integer class map `H×W`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u32>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, data: Vec<u32>) -> Result<Self> {
        if height == 0 || width == 0 || data.len() != height * width {
            return Err(Error::shape(
                "label map",
                format!("{height}×{width} map with {} labels", data.len()),
            ));
        }
        Ok(LabelMap {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, label: u32) -> Self {
        LabelMap {
            height,
            width,
            data: vec![label; height * width],
        }
    }

    pub fn get(&self, y: usize, x: usize) -> u32 {
        self.data[y * self.width + x]
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor {
            shape: vec![self.height, self.width],
            data: self.data.iter().map(|&v| v as f64).collect(),
        }
    }

    /// Accepts a rank-2 tensor (or `1×H×W`) of exact non-negative integers.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let (h, w) = match *t.shape() {
            [h, w] | [1, h, w] => (h, w),
            _ => {
                return Err(Error::format(
                    "label map",
                    format!("expected H×W, got shape {:?}", t.shape()),
                ))
            }
        };
        let data = t
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                if v >= 0.0 && v.fract() == 0.0 && v <= u32::MAX as f64 {
                    Ok(v as u32)
                } else {
                    Err(Error::format(
                        "label map",
                        format!("value {v} at index {i} is not a non-negative integer"),
                    ))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(LabelMap {
            height: h,
            width: w,
            data,
        })
    }
}
