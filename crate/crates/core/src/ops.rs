//! Forward and backward kernels over [`Tensor`]s.
//!
//! Every kernel here is a pure function. The autodiff tape in
//! [`crate::autograd`] records which kernel produced a value and calls the
//! matching `*_backward` during the reverse sweep.

use crate::error::{Error, Result};
use crate::tensor::{LabelMap, Tensor};

/// Geometry of a 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub groups: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub const fn same(groups: usize) -> Self {
        ConvGeometry {
            groups,
            stride: 1,
            padding: 1,
        }
    }

    pub const fn pointwise() -> Self {
        ConvGeometry {
            groups: 1,
            stride: 1,
            padding: 0,
        }
    }
}

/// Output extent of a convolution along one axis (floor convention).
pub fn conv_out_extent(n: usize, k: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = n + 2 * padding;
    if stride == 0 || padded < k {
        return None;
    }
    Some((padded - k) / stride + 1)
}

struct ConvDims {
    h: usize,
    w: usize,
    cout: usize,
    cin_g: usize,
    k: usize,
    ho: usize,
    wo: usize,
}

fn conv_dims(
    input: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    geo: ConvGeometry,
) -> Result<ConvDims> {
    let (cin, h, w) = input.dims3()?;
    let [cout, cin_g, kh, kw] = *weight.shape() else {
        return Err(Error::shape(
            "conv2d",
            format!("weights must be C_out×C_in/g×k×k, got {:?}", weight.shape()),
        ));
    };
    if geo.groups == 0 || geo.stride == 0 {
        return Err(Error::invalid("conv2d groups and stride must be positive"));
    }
    if cin % geo.groups != 0 {
        return Err(Error::invalid(format!(
            "conv2d: input channels {cin} not divisible by groups {}",
            geo.groups
        )));
    }
    if cout % geo.groups != 0 {
        return Err(Error::invalid(format!(
            "conv2d: output channels {cout} not divisible by groups {}",
            geo.groups
        )));
    }
    if cin_g != cin / geo.groups {
        return Err(Error::shape(
            "conv2d",
            format!(
                "weight input-channel dimension is {cin_g}, expected C_in/g = {}",
                cin / geo.groups
            ),
        ));
    }
    if kh != kw || kh % 2 == 0 {
        return Err(Error::shape(
            "conv2d",
            format!("kernel must be square with odd side, got {kh}×{kw}"),
        ));
    }
    if let Some(b) = bias {
        if b.shape() != [cout] {
            return Err(Error::shape(
                "conv2d",
                format!("bias length {:?} does not match C_out = {cout}", b.shape()),
            ));
        }
    }
    let ho = conv_out_extent(h, kh, geo.stride, geo.padding).ok_or_else(|| {
        Error::shape("conv2d", format!("height {h} too small for kernel {kh}"))
    })?;
    let wo = conv_out_extent(w, kw, geo.stride, geo.padding).ok_or_else(|| {
        Error::shape("conv2d", format!("width {w} too small for kernel {kw}"))
    })?;
    Ok(ConvDims {
        h,
        w,
        cout,
        cin_g,
        k: kh,
        ho,
        wo,
    })
}

/// Unfolds one group's `cin_g` input planes into a `(cin_g·k²) × (H_out·W_out)`
/// row-major matrix; padded taps are zero.
fn im2col(planes: &[f64], d: &ConvDims, s: usize, p: usize) -> Vec<f64> {
    let n = d.ho * d.wo;
    let mut cols = vec![0.0; d.cin_g * d.k * d.k * n];
    for ic in 0..d.cin_g {
        let plane = &planes[ic * d.h * d.w..(ic + 1) * d.h * d.w];
        for ky in 0..d.k {
            for kx in 0..d.k {
                let row = &mut cols[((ic * d.k + ky) * d.k + kx) * n..][..n];
                for oy in 0..d.ho {
                    let Some(iy) = (oy * s + ky).checked_sub(p).filter(|&iy| iy < d.h) else {
                        continue;
                    };
                    for ox in 0..d.wo {
                        if let Some(ix) = (ox * s + kx).checked_sub(p).filter(|&ix| ix < d.w) {
                            row[oy * d.wo + ox] = plane[iy * d.w + ix];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters columns back onto the input planes.
fn col2im(cols: &[f64], planes: &mut [f64], d: &ConvDims, s: usize, p: usize) {
    let n = d.ho * d.wo;
    for ic in 0..d.cin_g {
        let plane = &mut planes[ic * d.h * d.w..(ic + 1) * d.h * d.w];
        for ky in 0..d.k {
            for kx in 0..d.k {
                let row = &cols[((ic * d.k + ky) * d.k + kx) * n..][..n];
                for oy in 0..d.ho {
                    let Some(iy) = (oy * s + ky).checked_sub(p).filter(|&iy| iy < d.h) else {
                        continue;
                    };
                    for ox in 0..d.wo {
                        if let Some(ix) = (ox * s + kx).checked_sub(p).filter(|&ix| ix < d.w) {
                            plane[iy * d.w + ix] += row[oy * d.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// `c = a·b + beta·c` for row-major matrices, with optional transposes.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], a_t: bool, b: &[f64], b_t: bool, beta: f64, c: &mut [f64]) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the slices cover the m×k, k×n and m×n extents checked above,
    // with the strides describing exactly those layouts.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Grouped 2-D cross-correlation of a `C_in×H×W` input.
pub fn conv2d(
    input: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    geo: ConvGeometry,
) -> Result<Tensor> {
    let d = conv_dims(input, weight, bias, geo)?;
    let cout_g = d.cout / geo.groups;
    let kk = d.cin_g * d.k * d.k;
    let n = d.ho * d.wo;
    let in_group = d.cin_g * d.h * d.w;
    let mut out = vec![0.0; d.cout * n];
    if let Some(b) = bias {
        for (plane, &bv) in out.chunks_mut(n).zip(b.data()) {
            plane.fill(bv);
        }
    }
    for g in 0..geo.groups {
        let cols = im2col(&input.data()[g * in_group..(g + 1) * in_group], &d, geo.stride, geo.padding);
        gemm(
            cout_g,
            kk,
            n,
            &weight.data()[g * cout_g * kk..(g + 1) * cout_g * kk],
            false,
            &cols,
            false,
            1.0,
            &mut out[g * cout_g * n..(g + 1) * cout_g * n],
        );
    }
    Tensor::new(&[d.cout, d.ho, d.wo], out)
}

pub struct ConvGrads {
    pub input: Tensor,
    pub weight: Tensor,
    pub bias: Tensor,
}

pub fn conv2d_backward(
    input: &Tensor,
    weight: &Tensor,
    grad_out: &Tensor,
    geo: ConvGeometry,
) -> Result<ConvGrads> {
    let d = conv_dims(input, weight, None, geo)?;
    if grad_out.shape() != [d.cout, d.ho, d.wo] {
        return Err(Error::shape("conv2d_backward", "upstream gradient shape"));
    }
    let cout_g = d.cout / geo.groups;
    let kk = d.cin_g * d.k * d.k;
    let n = d.ho * d.wo;
    let in_group = d.cin_g * d.h * d.w;
    let go = grad_out.data();
    let mut gx = vec![0.0; input.len()];
    let mut gw = vec![0.0; weight.len()];
    let gb: Vec<f64> = go.chunks(n).map(|plane| plane.iter().sum()).collect();
    let mut gcols = vec![0.0; kk * n];
    for g in 0..geo.groups {
        let cols = im2col(&input.data()[g * in_group..(g + 1) * in_group], &d, geo.stride, geo.padding);
        let go_g = &go[g * cout_g * n..(g + 1) * cout_g * n];
        let w_g = &weight.data()[g * cout_g * kk..(g + 1) * cout_g * kk];
        gemm(cout_g, n, kk, go_g, false, &cols, true, 0.0, &mut gw[g * cout_g * kk..(g + 1) * cout_g * kk]);
        gemm(kk, cout_g, n, w_g, true, go_g, false, 0.0, &mut gcols);
        col2im(&gcols, &mut gx[g * in_group..(g + 1) * in_group], &d, geo.stride, geo.padding);
    }
    Ok(ConvGrads {
        input: Tensor::new(input.shape(), gx)?,
        weight: Tensor::new(weight.shape(), gw)?,
        bias: Tensor::new(&[d.cout], gb)?,
    })
}

/// One output coordinate's source taps along an axis: `(i0, i1, t)` with
/// value `src[i0] + t·(src[i1] − src[i0])`, which is exact on constants.
fn resize_axis(n_in: usize, n_out: usize) -> Vec<(usize, usize, f64)> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n_in - 1);
            let i1 = (i0 + 1).min(n_in - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

/// Bilinear resize with half-pixel centers (no antialiasing).
pub fn bilinear_resize(input: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (c, h, w) = input.dims3()?;
    if out_h == 0 || out_w == 0 {
        return Err(Error::invalid("bilinear_resize target must be at least 1×1"));
    }
    if (h, w) == (out_h, out_w) {
        return Ok(input.clone());
    }
    let ty = resize_axis(h, out_h);
    let tx = resize_axis(w, out_w);
    let src = input.data();
    let mut out = Vec::with_capacity(c * out_h * out_w);
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        for &(y0, y1, fy) in &ty {
            let r0 = &plane[y0 * w..(y0 + 1) * w];
            let r1 = &plane[y1 * w..(y1 + 1) * w];
            for &(x0, x1, fx) in &tx {
                let top = r0[x0] + fx * (r0[x1] - r0[x0]);
                let bot = r1[x0] + fx * (r1[x1] - r1[x0]);
                out.push(top + fy * (bot - top));
            }
        }
    }
    Tensor::new(&[c, out_h, out_w], out)
}

pub fn bilinear_resize_backward(input_shape: &[usize], grad_out: &Tensor) -> Result<Tensor> {
    let [c, h, w] = *input_shape else {
        return Err(Error::shape("bilinear_resize_backward", "input must be C×H×W"));
    };
    let (_, out_h, out_w) = grad_out.dims3()?;
    if (h, w) == (out_h, out_w) {
        return Ok(grad_out.clone());
    }
    let ty = resize_axis(h, out_h);
    let tx = resize_axis(w, out_w);
    let g = grad_out.data();
    let mut gi = vec![0.0; c * h * w];
    for ch in 0..c {
        let plane = &mut gi[ch * h * w..(ch + 1) * h * w];
        let mut idx = ch * out_h * out_w;
        for &(y0, y1, fy) in &ty {
            for &(x0, x1, fx) in &tx {
                let v = g[idx];
                idx += 1;
                plane[y0 * w + x0] += (1.0 - fy) * (1.0 - fx) * v;
                plane[y0 * w + x1] += (1.0 - fy) * fx * v;
                plane[y1 * w + x0] += fy * (1.0 - fx) * v;
                plane[y1 * w + x1] += fy * fx * v;
            }
        }
    }
    Tensor::new(input_shape, gi)
}

fn axis_layout(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::invalid(format!(
            "axis {axis} out of range for rank {}",
            shape.len()
        )));
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

/// Softmax of `input / temperature` along `axis`, max-subtracted.
pub fn softmax(input: &Tensor, axis: usize, temperature: f64) -> Result<Tensor> {
    if !(temperature > 0.0) {
        return Err(Error::invalid("softmax temperature must be positive"));
    }
    let (outer, len, inner) = axis_layout(input.shape(), axis)?;
    let x = input.data();
    let mut out = vec![0.0; x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| (o * len + j) * inner + i;
            let mut max = f64::NEG_INFINITY;
            for j in 0..len {
                max = max.max(x[at(j)] / temperature);
            }
            let mut sum = 0.0;
            for j in 0..len {
                let e = (x[at(j)] / temperature - max).exp();
                out[at(j)] = e;
                sum += e;
            }
            for j in 0..len {
                out[at(j)] /= sum;
            }
        }
    }
    Tensor::new(input.shape(), out)
}

pub fn softmax_backward(
    output: &Tensor,
    grad_out: &Tensor,
    axis: usize,
    temperature: f64,
) -> Result<Tensor> {
    let (outer, len, inner) = axis_layout(output.shape(), axis)?;
    let y = output.data();
    let g = grad_out.data();
    let mut gi = vec![0.0; y.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| (o * len + j) * inner + i;
            let dot: f64 = (0..len).map(|j| y[at(j)] * g[at(j)]).sum();
            for j in 0..len {
                gi[at(j)] = y[at(j)] * (g[at(j)] - dot) / temperature;
            }
        }
    }
    Tensor::new(output.shape(), gi)
}

pub fn relu(input: &Tensor) -> Tensor {
    input.map(|v| v.max(0.0))
}

pub fn relu_backward(input: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
    input.zip_map(grad_out, |x, g| if x > 0.0 { g } else { 0.0 })
}

/// Mean pixel-wise cross entropy result.
#[derive(Clone, Debug)]
pub struct CrossEntropy {
    pub loss: f64,
    /// Number of non-ignored pixels that contributed.
    pub counted: usize,
    /// Per-pixel class probabilities, `K×H×W`.
    pub probs: Tensor,
}

impl CrossEntropy {
    /// Set when every pixel was ignored; the loss is then defined as 0.
    pub fn all_ignored(&self) -> bool {
        self.counted == 0
    }
}

fn check_labels(
    op: &'static str,
    k: usize,
    h: usize,
    w: usize,
    labels: &LabelMap,
    ignore_index: u32,
) -> Result<()> {
    if (labels.height, labels.width) != (h, w) {
        return Err(Error::shape(
            op,
            format!(
                "labels are {}×{}, logits are {h}×{w}",
                labels.height, labels.width
            ),
        ));
    }
    if let Some(bad) = labels
        .data
        .iter()
        .find(|&&l| l != ignore_index && l as usize >= k)
    {
        return Err(Error::invalid(format!(
            "{op}: label {bad} outside [0, {k}) and not the ignore index"
        )));
    }
    Ok(())
}

pub fn cross_entropy(logits: &Tensor, labels: &LabelMap, ignore_index: u32) -> Result<CrossEntropy> {
    let (k, h, w) = logits.dims3()?;
    check_labels("cross_entropy", k, h, w, labels, ignore_index)?;
    let probs = softmax(logits, 0, 1.0)?;
    let hw = h * w;
    let x = logits.data();
    let mut total = 0.0;
    let mut counted = 0;
    for (p, &l) in labels.data.iter().enumerate() {
        if l == ignore_index {
            continue;
        }
        let max = (0..k).map(|c| x[c * hw + p]).fold(f64::NEG_INFINITY, f64::max);
        let lse = max + (0..k).map(|c| (x[c * hw + p] - max).exp()).sum::<f64>().ln();
        total += lse - x[l as usize * hw + p];
        counted += 1;
    }
    let loss = if counted == 0 { 0.0 } else { total / counted as f64 };
    Ok(CrossEntropy {
        loss,
        counted,
        probs,
    })
}

pub fn cross_entropy_backward(
    ce: &CrossEntropy,
    labels: &LabelMap,
    ignore_index: u32,
    grad_loss: f64,
) -> Tensor {
    let (k, h, w) = ce.probs.dims3().expect("probs are K×H×W");
    let hw = h * w;
    let mut g = vec![0.0; k * hw];
    if ce.counted == 0 {
        return Tensor::new(ce.probs.shape(), g).unwrap();
    }
    let scale = grad_loss / ce.counted as f64;
    let p = ce.probs.data();
    for (px, &l) in labels.data.iter().enumerate() {
        if l == ignore_index {
            continue;
        }
        for c in 0..k {
            let onehot = if c == l as usize { 1.0 } else { 0.0 };
            g[c * hw + px] = (p[c * hw + px] - onehot) * scale;
        }
    }
    Tensor::new(ce.probs.shape(), g).unwrap()
}

/// Mean squared element difference.
pub fn mse(a: &Tensor, b: &Tensor) -> Result<f64> {
    a.expect_same_shape(b, "mse")?;
    let n = a.len() as f64;
    Ok(a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / n)
}

/// Gradient of [`mse`] with respect to `a` (negate for `b`).
pub fn mse_backward(a: &Tensor, b: &Tensor, grad_loss: f64) -> Result<Tensor> {
    let scale = 2.0 * grad_loss / a.len() as f64;
    a.zip_map(b, |x, y| scale * (x - y))
}

/// Mean over pixels of `KL(softmax(teacher) || softmax(student))`, with the
/// softmax taken across channels of `C×H×W` maps.
pub fn kl_divergence(student: &Tensor, teacher: &Tensor) -> Result<f64> {
    student.expect_same_shape(teacher, "kl_divergence")?;
    let (c, h, w) = student.dims3()?;
    let ps = softmax(student, 0, 1.0)?;
    let pt = softmax(teacher, 0, 1.0)?;
    let hw = h * w;
    let mut total = 0.0;
    for p in 0..hw {
        for ch in 0..c {
            let (t, s) = (pt.data()[ch * hw + p], ps.data()[ch * hw + p]);
            if t > 0.0 {
                total += t * (t.ln() - s.ln());
            }
        }
    }
    Ok(total / hw as f64)
}

/// Gradients of [`kl_divergence`] with respect to `(student, teacher)`.
pub fn kl_divergence_backward(
    student: &Tensor,
    teacher: &Tensor,
    grad_loss: f64,
) -> Result<(Tensor, Tensor)> {
    let (c, h, w) = student.dims3()?;
    let ps = softmax(student, 0, 1.0)?;
    let pt = softmax(teacher, 0, 1.0)?;
    let hw = h * w;
    let scale = grad_loss / hw as f64;
    let mut gs = vec![0.0; c * hw];
    let mut gt = vec![0.0; c * hw];
    for p in 0..hw {
        let kl: f64 = (0..c)
            .map(|ch| {
                let (t, s) = (pt.data()[ch * hw + p], ps.data()[ch * hw + p]);
                t * (t.ln() - s.ln())
            })
            .sum();
        for ch in 0..c {
            let i = ch * hw + p;
            let (t, s) = (pt.data()[i], ps.data()[i]);
            gs[i] = scale * (s - t);
            gt[i] = scale * t * (t.ln() - s.ln() - kl);
        }
    }
    Ok((
        Tensor::new(student.shape(), gs)?,
        Tensor::new(teacher.shape(), gt)?,
    ))
}

/// Source pixel (flat `y·W + x`) for every output pixel of a motion warp.
/// Sampling coordinates are clamped into the frame.
pub fn warp_index(motion: &Tensor, h: usize, w: usize) -> Result<Vec<usize>> {
    if motion.shape() != [2, h, w] {
        return Err(Error::shape(
            "warp_features",
            format!(
                "motion field is {:?}, features are {h}×{w} (need 2×{h}×{w})",
                motion.shape()
            ),
        ));
    }
    let m = motion.data();
    let hw = h * w;
    (0..hw)
        .map(|p| {
            let (dx, dy) = (m[p], m[hw + p]);
            if dx.fract() != 0.0 || dy.fract() != 0.0 || !dx.is_finite() || !dy.is_finite() {
                return Err(Error::invalid(format!(
                    "warp_features: motion ({dx}, {dy}) at pixel {p} is not integer-pel"
                )));
            }
            let (y, x) = ((p / w) as i64, (p % w) as i64);
            let sx = (x + dx as i64).clamp(0, w as i64 - 1) as usize;
            let sy = (y + dy as i64).clamp(0, h as i64 - 1) as usize;
            Ok(sy * w + sx)
        })
        .collect()
}

/// Gathers every channel of a `C×H×W` map through a spatial index.
pub fn gather_spatial(input: &Tensor, index: &[usize]) -> Result<Tensor> {
    let (c, h, w) = input.dims3()?;
    if index.len() != h * w {
        return Err(Error::shape("gather", "index length differs from H·W"));
    }
    let hw = h * w;
    let src = input.data();
    let mut out = Vec::with_capacity(c * hw);
    for ch in 0..c {
        let plane = &src[ch * hw..(ch + 1) * hw];
        out.extend(index.iter().map(|&i| plane[i]));
    }
    Tensor::new(input.shape(), out)
}

pub fn gather_spatial_backward(input_shape: &[usize], index: &[usize], grad_out: &Tensor) -> Tensor {
    let hw = index.len();
    let c = grad_out.len() / hw;
    let g = grad_out.data();
    let mut gi = vec![0.0; c * hw];
    for ch in 0..c {
        for (p, &i) in index.iter().enumerate() {
            gi[ch * hw + i] += g[ch * hw + p];
        }
    }
    Tensor::new(input_shape, gi).unwrap()
}

/// Non-overlapping average pooling by `factor`; edge windows average only
/// the pixels they cover.
pub fn avg_pool(input: &Tensor, factor: usize) -> Result<Tensor> {
    let (c, h, w) = input.dims3()?;
    if factor == 0 {
        return Err(Error::invalid("avg_pool factor must be positive"));
    }
    let (ho, wo) = (h.div_ceil(factor), w.div_ceil(factor));
    let x = input.data();
    let mut out = vec![0.0; c * ho * wo];
    for ch in 0..c {
        for oy in 0..ho {
            for ox in 0..wo {
                let (y0, y1) = (oy * factor, ((oy + 1) * factor).min(h));
                let (x0, x1) = (ox * factor, ((ox + 1) * factor).min(w));
                let mut s = 0.0;
                for y in y0..y1 {
                    for xx in x0..x1 {
                        s += x[(ch * h + y) * w + xx];
                    }
                }
                out[(ch * ho + oy) * wo + ox] = s / ((y1 - y0) * (x1 - x0)) as f64;
            }
        }
    }
    Tensor::new(&[c, ho, wo], out)
}

pub fn avg_pool_backward(input_shape: &[usize], factor: usize, grad_out: &Tensor) -> Result<Tensor> {
    let [c, h, w] = *input_shape else {
        return Err(Error::shape("avg_pool_backward", "input must be C×H×W"));
    };
    let (_, ho, wo) = grad_out.dims3()?;
    let g = grad_out.data();
    let mut gi = vec![0.0; c * h * w];
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let (oy, ox) = (y / factor, x / factor);
                let ny = ((oy + 1) * factor).min(h) - oy * factor;
                let nx = ((ox + 1) * factor).min(w) - ox * factor;
                gi[(ch * h + y) * w + x] = g[(ch * ho + oy) * wo + ox] / (ny * nx) as f64;
            }
        }
    }
    Tensor::new(input_shape, gi)
}

/// Concatenation of `C_i×H×W` maps along channels.
pub fn concat_channels(parts: &[&Tensor]) -> Result<Tensor> {
    let first = parts
        .first()
        .ok_or_else(|| Error::invalid("concat of zero tensors"))?;
    let (_, h, w) = first.dims3()?;
    let mut c_total = 0;
    let mut data = Vec::new();
    for t in parts {
        let (c, th, tw) = t.dims3()?;
        if (th, tw) != (h, w) {
            return Err(Error::shape(
                "concat",
                format!("spatial extent {th}×{tw} differs from {h}×{w}"),
            ));
        }
        c_total += c;
        data.extend_from_slice(t.data());
    }
    Tensor::new(&[c_total, h, w], data)
}

/// Transposes `C×H×W` into pixel-major `(H·W)×C` storage.
fn to_pixel_major(t: &Tensor) -> (Vec<f64>, usize, usize) {
    let (c, h, w) = t.dims3().expect("C×H×W");
    let hw = h * w;
    let src = t.data();
    let mut out = vec![0.0; c * hw];
    for ch in 0..c {
        for p in 0..hw {
            out[p * c + ch] = src[ch * hw + p];
        }
    }
    (out, c, hw)
}

fn from_pixel_major(data: &[f64], c: usize, h: usize, w: usize) -> Tensor {
    let hw = h * w;
    let mut out = vec![0.0; c * hw];
    for p in 0..hw {
        for ch in 0..c {
            out[ch * hw + p] = data[p * c + ch];
        }
    }
    Tensor::new(&[c, h, w], out).unwrap()
}

/// Which key/value positions each query attends to.
#[derive(Clone, Debug)]
pub enum Candidates {
    /// `per_query` positions for each query, stored query-major.
    Local { per_query: usize, index: Vec<usize> },
    /// Every key/value position, for every query.
    Global { count: usize },
}

impl Candidates {
    pub fn per_query(&self) -> usize {
        match self {
            Candidates::Local { per_query, .. } => *per_query,
            Candidates::Global { count } => *count,
        }
    }

    #[inline]
    fn position(&self, query: usize, j: usize) -> usize {
        match self {
            Candidates::Local { per_query, index } => index[query * per_query + j],
            Candidates::Global { .. } => j,
        }
    }

    /// `n×n` clamped neighborhoods on an `h×w` grid, row-major over offsets.
    pub fn neighborhood(h: usize, w: usize, n: usize) -> Self {
        let r = (n / 2) as i64;
        let mut index = Vec::with_capacity(h * w * n * n);
        for y in 0..h as i64 {
            for x in 0..w as i64 {
                for dy in -r..=r {
                    let sy = (y + dy).clamp(0, h as i64 - 1) as usize;
                    for dx in -r..=r {
                        let sx = (x + dx).clamp(0, w as i64 - 1) as usize;
                        index.push(sy * w + sx);
                    }
                }
            }
        }
        Candidates::Local {
            per_query: n * n,
            index,
        }
    }
}

/// Output of [`attention`]: the aggregated map and the softmax weights,
/// `queries × candidates` row-major.
#[derive(Clone, Debug)]
pub struct Attention {
    pub output: Tensor,
    pub weights: Vec<f64>,
}

/// Dot-product attention with one weight vector per query position shared
/// across channels: `out(q) = Σ_j softmax_j(K_j·Q_q / √C) V_j`.
pub fn attention(value: &Tensor, key: &Tensor, query: &Tensor, cands: &Candidates) -> Result<Attention> {
    value.expect_same_shape(key, "attention")?;
    let (c, qh, qw) = query.dims3()?;
    let (kc, kh, kw) = key.dims3()?;
    if kc != c {
        return Err(Error::shape(
            "attention",
            format!("key has {kc} channels, query has {c}"),
        ));
    }
    let nq = qh * qw;
    let m = cands.per_query();
    match cands {
        Candidates::Local { index, .. } => {
            if index.len() != nq * m || index.iter().any(|&i| i >= kh * kw) {
                return Err(Error::shape("attention", "neighborhood index does not fit grids"));
            }
        }
        Candidates::Global { count } => {
            if *count != kh * kw {
                return Err(Error::shape("attention", "global candidate count differs from key grid"));
            }
        }
    }
    let (v, _, _) = to_pixel_major(value);
    let (k, _, _) = to_pixel_major(key);
    let (q, _, _) = to_pixel_major(query);
    let inv_temp = 1.0 / (c as f64).sqrt();
    let mut weights = vec![0.0; nq * m];
    let mut out = vec![0.0; nq * c];
    for p in 0..nq {
        let qv = &q[p * c..(p + 1) * c];
        let wrow = &mut weights[p * m..(p + 1) * m];
        let mut max = f64::NEG_INFINITY;
        for (j, wj) in wrow.iter_mut().enumerate() {
            let pos = cands.position(p, j);
            let kv = &k[pos * c..(pos + 1) * c];
            let s = kv.iter().zip(qv).map(|(a, b)| a * b).sum::<f64>() * inv_temp;
            *wj = s;
            max = max.max(s);
        }
        let mut sum = 0.0;
        for wj in wrow.iter_mut() {
            *wj = (*wj - max).exp();
            sum += *wj;
        }
        let orow = &mut out[p * c..(p + 1) * c];
        for (j, wj) in wrow.iter_mut().enumerate() {
            *wj /= sum;
            let pos = cands.position(p, j);
            for (o, &vv) in orow.iter_mut().zip(&v[pos * c..(pos + 1) * c]) {
                *o += *wj * vv;
            }
        }
    }
    Ok(Attention {
        output: from_pixel_major(&out, c, qh, qw),
        weights,
    })
}

pub struct AttentionGrads {
    pub value: Tensor,
    pub key: Tensor,
    pub query: Tensor,
}

pub fn attention_backward(
    value: &Tensor,
    key: &Tensor,
    query: &Tensor,
    cands: &Candidates,
    weights: &[f64],
    grad_out: &Tensor,
) -> Result<AttentionGrads> {
    let (c, qh, qw) = query.dims3()?;
    let (_, kh, kw) = key.dims3()?;
    let nq = qh * qw;
    let m = cands.per_query();
    let (v, _, _) = to_pixel_major(value);
    let (k, _, _) = to_pixel_major(key);
    let (q, _, _) = to_pixel_major(query);
    let (g, _, _) = to_pixel_major(grad_out);
    let inv_temp = 1.0 / (c as f64).sqrt();
    let mut gv = vec![0.0; v.len()];
    let mut gk = vec![0.0; k.len()];
    let mut gq = vec![0.0; q.len()];
    let mut dw = vec![0.0; m];
    for p in 0..nq {
        let grow = &g[p * c..(p + 1) * c];
        let wrow = &weights[p * m..(p + 1) * m];
        let mut dot = 0.0;
        for j in 0..m {
            let pos = cands.position(p, j);
            let vv = &v[pos * c..(pos + 1) * c];
            let gvv = &mut gv[pos * c..(pos + 1) * c];
            let mut d = 0.0;
            for ((gvi, &vi), &gi) in gvv.iter_mut().zip(vv).zip(grow) {
                *gvi += wrow[j] * gi;
                d += gi * vi;
            }
            dw[j] = d;
            dot += wrow[j] * d;
        }
        let qv = &q[p * c..(p + 1) * c];
        let gqv = &mut gq[p * c..(p + 1) * c];
        for j in 0..m {
            let ds = wrow[j] * (dw[j] - dot) * inv_temp;
            if ds == 0.0 {
                continue;
            }
            let pos = cands.position(p, j);
            let kv = &k[pos * c..(pos + 1) * c];
            let gkv = &mut gk[pos * c..(pos + 1) * c];
            for ch in 0..c {
                gkv[ch] += ds * qv[ch];
                gqv[ch] += ds * kv[ch];
            }
        }
    }
    Ok(AttentionGrads {
        value: from_pixel_major(&gv, c, kh, kw),
        key: from_pixel_major(&gk, c, kh, kw),
        query: from_pixel_major(&gq, c, qh, qw),
    })
}
