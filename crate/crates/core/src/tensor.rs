//! Dense NCHW tensor type and the numerical kernels the rest of the crate
//! composes: convolutions (plus their adjoints and weight gradients),
//! elementwise maps, reductions, channel surgery, padding and a plain-text
//! dump format for debugging.
//!
//! Everything is 64-bit, row-major and immutable after construction. All
//! kernels are straight loops evaluated in a fixed order, so identical inputs
//! produce bit-identical outputs.

use crate::error::{Error, Result};
use std::io::{BufRead, Write};

/// Dense 4-D array, shape `[n, c, h, w]`, row-major `f64` storage.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: [usize; 4],
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: [usize; 4]) -> Tensor {
        Tensor {
            shape,
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn filled(shape: [usize; 4], value: f64) -> Tensor {
        Tensor {
            shape,
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: [usize; 4], data: Vec<f64>) -> Result<Tensor> {
        let expect: usize = shape.iter().product();
        if data.len() != expect {
            return Err(Error::shape(format!(
                "data length {} does not match shape {:?} (= {})",
                data.len(),
                shape,
                expect
            )));
        }
        Ok(Tensor { shape, data })
    }

    /// Scalar wrapped as a `[1,1,1,1]` tensor.
    pub fn scalar(value: f64) -> Tensor {
        Tensor {
            shape: [1, 1, 1, 1],
            data: vec![value],
        }
    }

    pub fn from_fn(shape: [usize; 4], mut f: impl FnMut(usize, usize, usize, usize) -> f64) -> Tensor {
        let mut t = Tensor::zeros(shape);
        for n in 0..shape[0] {
            for c in 0..shape[1] {
                for i in 0..shape[2] {
                    for j in 0..shape[3] {
                        let v = f(n, c, i, j);
                        *t.at_mut(n, c, i, j) = v;
                    }
                }
            }
        }
        t
    }

    #[inline]
    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    fn idx(&self, n: usize, c: usize, i: usize, j: usize) -> usize {
        ((n * self.shape[1] + c) * self.shape[2] + i) * self.shape[3] + j
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, i: usize, j: usize) -> f64 {
        self.data[self.idx(n, c, i, j)]
    }

    #[inline]
    pub fn at_mut(&mut self, n: usize, c: usize, i: usize, j: usize) -> &mut f64 {
        let k = self.idx(n, c, i, j);
        &mut self.data[k]
    }

    /// The single element of a `[1,1,1,1]` tensor.
    pub fn scalar_value(&self) -> Result<f64> {
        if self.len() != 1 {
            return Err(Error::shape(format!(
                "expected scalar tensor, got shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    /// Maximum absolute elementwise difference; shapes must match.
    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0_f64, |m, (a, b)| m.max((a - b).abs()))
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::shape(format!(
                "elementwise op on mismatched shapes {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(Tensor {
            shape: self.shape,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }
}

/// Stride/dilation/groups/padding bundle shared by `conv2d` and
/// `conv_transpose2d`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub dilation: usize,
    pub groups: usize,
    pub pad: usize,
}

impl Default for ConvSpec {
    fn default() -> Self {
        ConvSpec {
            stride: 1,
            dilation: 1,
            groups: 1,
            pad: 0,
        }
    }
}

impl ConvSpec {
    pub fn new(stride: usize, dilation: usize, groups: usize, pad: usize) -> ConvSpec {
        ConvSpec {
            stride,
            dilation,
            groups,
            pad,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.stride < 1 || self.dilation < 1 || self.groups < 1 {
            return Err(Error::invalid(format!(
                "stride, dilation and groups must be >= 1, got {:?}",
                self
            )));
        }
        Ok(())
    }
}

fn conv_check(x: &Tensor, w: &Tensor, bias: Option<&Tensor>, spec: ConvSpec) -> Result<()> {
    spec.validate()?;
    let [_, c_in, h, wd] = x.shape();
    let [c_out, c_in_g, kh, kw] = w.shape();
    if kh != kw {
        return Err(Error::shape(format!("kernel must be square, got {}x{}", kh, kw)));
    }
    if c_in % spec.groups != 0 || c_out % spec.groups != 0 {
        return Err(Error::shape(format!(
            "groups {} must divide input channels {} and output channels {}",
            spec.groups, c_in, c_out
        )));
    }
    if c_in_g != c_in / spec.groups {
        return Err(Error::shape(format!(
            "weight expects {} channels per group, input has {} (groups {})",
            c_in_g,
            c_in / spec.groups,
            spec.groups
        )));
    }
    let span = spec.dilation * (kh - 1) + 1;
    if h + 2 * spec.pad < span || wd + 2 * spec.pad < span {
        return Err(Error::shape(format!(
            "padded input {}x{} smaller than dilated kernel span {}",
            h + 2 * spec.pad,
            wd + 2 * spec.pad,
            span
        )));
    }
    if let Some(b) = bias {
        if b.len() != c_out {
            return Err(Error::shape(format!(
                "bias length {} does not match output channels {}",
                b.len(),
                c_out
            )));
        }
    }
    Ok(())
}

/// Spatial output size of `conv2d` along one axis.
pub fn conv_out_len(len: usize, k: usize, spec: ConvSpec) -> usize {
    (len + 2 * spec.pad - spec.dilation * (k - 1) - 1) / spec.stride + 1
}

/// Spatial output size of `conv_transpose2d` along one axis.
pub fn conv_transpose_out_len(len: usize, k: usize, spec: ConvSpec) -> usize {
    (len - 1) * spec.stride + spec.dilation * (k - 1) + 1 - 2 * spec.pad
}

/// 2-D cross-correlation (no kernel flip). Weight layout `[c_out, c_in/groups, k, k]`.
pub fn conv2d(x: &Tensor, w: &Tensor, bias: Option<&Tensor>, spec: ConvSpec) -> Result<Tensor> {
    conv_check(x, w, bias, spec)?;
    let [n, c_in, h, wd] = x.shape();
    let [c_out, c_in_g, k, _] = w.shape();
    let oh = conv_out_len(h, k, spec);
    let ow = conv_out_len(wd, k, spec);
    let c_out_g = c_out / spec.groups;
    let mut out = Tensor::zeros([n, c_out, oh, ow]);

    // Pointwise fast path: 1x1, stride 1, no padding.
    if k == 1 && spec.stride == 1 && spec.pad == 0 {
        let hw = h * wd;
        for b in 0..n {
            for oc in 0..c_out {
                let g = oc / c_out_g;
                let base_out = (b * c_out + oc) * hw;
                for icl in 0..c_in_g {
                    let ic = g * c_in_g + icl;
                    let wv = w.data[oc * c_in_g + icl];
                    if wv == 0.0 {
                        continue;
                    }
                    let base_in = (b * c_in + ic) * hw;
                    for p in 0..hw {
                        out.data[base_out + p] += wv * x.data[base_in + p];
                    }
                }
            }
        }
    } else {
        for b in 0..n {
            for oc in 0..c_out {
                let g = oc / c_out_g;
                for oi in 0..oh {
                    for oj in 0..ow {
                        let mut acc = 0.0;
                        for icl in 0..c_in_g {
                            let ic = g * c_in_g + icl;
                            for ki in 0..k {
                                let i = (oi * spec.stride + ki * spec.dilation) as isize
                                    - spec.pad as isize;
                                if i < 0 || i >= h as isize {
                                    continue;
                                }
                                for kj in 0..k {
                                    let j = (oj * spec.stride + kj * spec.dilation) as isize
                                        - spec.pad as isize;
                                    if j < 0 || j >= wd as isize {
                                        continue;
                                    }
                                    acc += x.at(b, ic, i as usize, j as usize)
                                        * w.at(oc, icl, ki, kj);
                                }
                            }
                        }
                        *out.at_mut(b, oc, oi, oj) = acc;
                    }
                }
            }
        }
    }

    if let Some(bias) = bias {
        for b in 0..n {
            for oc in 0..c_out {
                let bv = bias.data[oc];
                for oi in 0..oh {
                    for oj in 0..ow {
                        *out.at_mut(b, oc, oi, oj) += bv;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Exact linear adjoint of [`conv2d`] under the same spec: for matching
/// shapes, `<conv2d(x,w), y> == <x, conv_transpose2d(y,w)>`.
///
/// Input lives in conv2d's output space `[n, c_out, oh, ow]`; the result is
/// in conv2d's input space `[n, c_in, h, w]`. Weight layout is unchanged.
/// The output spatial size is the minimal one consistent with the spec; when
/// the matching conv2d floor-truncated (it did not exactly cover its input),
/// use [`conv_transpose2d_to`] with the original size.
pub fn conv_transpose2d(y: &Tensor, w: &Tensor, spec: ConvSpec) -> Result<Tensor> {
    conv_transpose2d_to(y, w, spec, None)
}

/// [`conv_transpose2d`] with an explicit target spatial size; positions the
/// forward convolution never read stay zero, keeping the map an exact
/// adjoint on the full input space.
pub fn conv_transpose2d_to(
    y: &Tensor,
    w: &Tensor,
    spec: ConvSpec,
    out_hw: Option<(usize, usize)>,
) -> Result<Tensor> {
    spec.validate()?;
    let [n, c_out, oh, ow] = y.shape();
    let [wc_out, c_in_g, k, kw] = w.shape();
    if k != kw {
        return Err(Error::shape(format!("kernel must be square, got {}x{}", k, kw)));
    }
    if wc_out != c_out {
        return Err(Error::shape(format!(
            "input channels {} do not match weight c_out {}",
            c_out, wc_out
        )));
    }
    if c_out % spec.groups != 0 {
        return Err(Error::shape(format!(
            "groups {} must divide channels {}",
            spec.groups, c_out
        )));
    }
    let c_in = c_in_g * spec.groups;
    let (h, wd) = match out_hw {
        None => (
            conv_transpose_out_len(oh, k, spec),
            conv_transpose_out_len(ow, k, spec),
        ),
        Some((th, tw)) => {
            if conv_out_len(th, k, spec) != oh || conv_out_len(tw, k, spec) != ow {
                return Err(Error::shape(format!(
                    "target size {}x{} is inconsistent with input {}x{} under {:?}",
                    th, tw, oh, ow, spec
                )));
            }
            (th, tw)
        }
    };
    let c_out_g = c_out / spec.groups;
    let mut out = Tensor::zeros([n, c_in, h, wd]);

    for b in 0..n {
        for oc in 0..c_out {
            let g = oc / c_out_g;
            for oi in 0..oh {
                for oj in 0..ow {
                    let v = y.at(b, oc, oi, oj);
                    if v == 0.0 {
                        continue;
                    }
                    for icl in 0..c_in_g {
                        let ic = g * c_in_g + icl;
                        for ki in 0..k {
                            let i =
                                (oi * spec.stride + ki * spec.dilation) as isize - spec.pad as isize;
                            if i < 0 || i >= h as isize {
                                continue;
                            }
                            for kj in 0..k {
                                let j = (oj * spec.stride + kj * spec.dilation) as isize
                                    - spec.pad as isize;
                                if j < 0 || j >= wd as isize {
                                    continue;
                                }
                                *out.at_mut(b, ic, i as usize, j as usize) +=
                                    v * w.at(oc, icl, ki, kj);
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// d(conv2d)/d(weight): correlate the input with the output cotangent.
pub fn conv2d_grad_w(
    x: &Tensor,
    gout: &Tensor,
    spec: ConvSpec,
    w_shape: [usize; 4],
) -> Result<Tensor> {
    let [n, _c_in, h, wd] = x.shape();
    let [c_out, c_in_g, k, _] = w_shape;
    let [gn, gc, oh, ow] = gout.shape();
    if gn != n || gc != c_out {
        return Err(Error::shape(format!(
            "cotangent shape {:?} does not match [n={}, c_out={}]",
            gout.shape(),
            n,
            c_out
        )));
    }
    let c_out_g = c_out / spec.groups;
    let mut dw = Tensor::zeros(w_shape);
    for b in 0..n {
        for oc in 0..c_out {
            let g = oc / c_out_g;
            for oi in 0..oh {
                for oj in 0..ow {
                    let gv = gout.at(b, oc, oi, oj);
                    if gv == 0.0 {
                        continue;
                    }
                    for icl in 0..c_in_g {
                        let ic = g * c_in_g + icl;
                        for ki in 0..k {
                            let i =
                                (oi * spec.stride + ki * spec.dilation) as isize - spec.pad as isize;
                            if i < 0 || i >= h as isize {
                                continue;
                            }
                            for kj in 0..k {
                                let j = (oj * spec.stride + kj * spec.dilation) as isize
                                    - spec.pad as isize;
                                if j < 0 || j >= wd as isize {
                                    continue;
                                }
                                *dw.at_mut(oc, icl, ki, kj) +=
                                    gv * x.at(b, ic, i as usize, j as usize);
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(dw)
}

/// d(conv2d)/d(bias): per-channel sum of the output cotangent.
pub fn conv2d_grad_bias(gout: &Tensor) -> Tensor {
    let [n, c, h, w] = gout.shape();
    let mut db = Tensor::zeros([1, c, 1, 1]);
    for b in 0..n {
        for ch in 0..c {
            let mut acc = 0.0;
            for i in 0..h {
                for j in 0..w {
                    acc += gout.at(b, ch, i, j);
                }
            }
            db.data[ch] += acc;
        }
    }
    db
}

/// d(conv_transpose2d)/d(weight).
pub fn conv_transpose2d_grad_w(
    y: &Tensor,
    gout: &Tensor,
    spec: ConvSpec,
    w_shape: [usize; 4],
) -> Result<Tensor> {
    let [n, c_out, oh, ow] = y.shape();
    let [_, c_in_g, k, _] = w_shape;
    let [_, _, h, wd] = gout.shape();
    let c_out_g = c_out / spec.groups;
    let mut dw = Tensor::zeros(w_shape);
    for b in 0..n {
        for oc in 0..c_out {
            let g = oc / c_out_g;
            for oi in 0..oh {
                for oj in 0..ow {
                    let v = y.at(b, oc, oi, oj);
                    if v == 0.0 {
                        continue;
                    }
                    for icl in 0..c_in_g {
                        let ic = g * c_in_g + icl;
                        for ki in 0..k {
                            let i =
                                (oi * spec.stride + ki * spec.dilation) as isize - spec.pad as isize;
                            if i < 0 || i >= h as isize {
                                continue;
                            }
                            for kj in 0..k {
                                let j = (oj * spec.stride + kj * spec.dilation) as isize
                                    - spec.pad as isize;
                                if j < 0 || j >= wd as isize {
                                    continue;
                                }
                                *dw.at_mut(oc, icl, ki, kj) +=
                                    v * gout.at(b, ic, i as usize, j as usize);
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(dw)
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    a.zip(b, |x, y| x + y)
}

pub fn sub(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    a.zip(b, |x, y| x - y)
}

pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    a.zip(b, |x, y| x * y)
}

pub fn div(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    a.zip(b, |x, y| x / y)
}

pub fn maximum(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    a.zip(b, |x, y| if x >= y { x } else { y })
}

pub fn scale(a: &Tensor, c: f64) -> Tensor {
    a.map(|x| x * c)
}

pub fn add_scalar(a: &Tensor, c: f64) -> Tensor {
    a.map(|x| x + c)
}

#[inline]
pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid(a: &Tensor) -> Tensor {
    a.map(sigmoid_scalar)
}

pub fn silu(a: &Tensor) -> Tensor {
    a.map(|x| x * sigmoid_scalar(x))
}

pub fn tanh(a: &Tensor) -> Tensor {
    a.map(f64::tanh)
}

pub fn abs(a: &Tensor) -> Tensor {
    a.map(f64::abs)
}

pub fn sqrt_elem(a: &Tensor) -> Tensor {
    a.map(f64::sqrt)
}

/// Elementwise `sqrt(a^2 + b^2)`.
pub fn hypot(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    a.zip(b, f64::hypot)
}

/// Broadcast-add a per-channel bias of shape `[1, c, 1, 1]`.
pub fn add_channel_bias(x: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let [n, c, h, w] = x.shape();
    if bias.shape() != [1, c, 1, 1] {
        return Err(Error::shape(format!(
            "bias shape {:?} does not broadcast over {:?}",
            bias.shape(),
            x.shape()
        )));
    }
    let mut out = x.clone();
    for b in 0..n {
        for ch in 0..c {
            let bv = bias.data[ch];
            for i in 0..h {
                for j in 0..w {
                    *out.at_mut(b, ch, i, j) += bv;
                }
            }
        }
    }
    Ok(out)
}

pub fn sum_all(x: &Tensor) -> Tensor {
    Tensor::scalar(x.data.iter().sum())
}

pub fn mean_all(x: &Tensor) -> Tensor {
    Tensor::scalar(x.data.iter().sum::<f64>() / x.len() as f64)
}

/// Per-position layer normalization over the channel axis with per-channel
/// affine parameters (`gamma`, `beta` of shape `[1, c, 1, 1]`).
pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    let [n, c, h, w] = x.shape();
    if gamma.shape() != [1, c, 1, 1] || beta.shape() != [1, c, 1, 1] {
        return Err(Error::shape(format!(
            "layer_norm affine params must be [1,{},1,1], got {:?} and {:?}",
            c,
            gamma.shape(),
            beta.shape()
        )));
    }
    let mut out = Tensor::zeros(x.shape());
    for b in 0..n {
        for i in 0..h {
            for j in 0..w {
                let mut mean = 0.0;
                for ch in 0..c {
                    mean += x.at(b, ch, i, j);
                }
                mean /= c as f64;
                let mut var = 0.0;
                for ch in 0..c {
                    let d = x.at(b, ch, i, j) - mean;
                    var += d * d;
                }
                var /= c as f64;
                let inv = 1.0 / (var + eps).sqrt();
                for ch in 0..c {
                    let xn = (x.at(b, ch, i, j) - mean) * inv;
                    *out.at_mut(b, ch, i, j) = xn * gamma.data[ch] + beta.data[ch];
                }
            }
        }
    }
    Ok(out)
}

pub fn concat_channels(parts: &[&Tensor]) -> Result<Tensor> {
    if parts.is_empty() {
        return Err(Error::invalid("concat_channels needs at least one tensor"));
    }
    let [n, _, h, w] = parts[0].shape();
    let mut c_total = 0;
    for p in parts {
        let [pn, pc, ph, pw] = p.shape();
        if pn != n || ph != h || pw != w {
            return Err(Error::shape(format!(
                "concat_channels mismatch: {:?} vs leading {:?}",
                p.shape(),
                parts[0].shape()
            )));
        }
        c_total += pc;
    }
    let mut out = Tensor::zeros([n, c_total, h, w]);
    let plane = h * w;
    for b in 0..n {
        let mut c_off = 0;
        for p in parts {
            let pc = p.shape()[1];
            let src = &p.data[b * pc * plane..(b + 1) * pc * plane];
            let dst_start = (b * c_total + c_off) * plane;
            out.data[dst_start..dst_start + pc * plane].copy_from_slice(src);
            c_off += pc;
        }
    }
    Ok(out)
}

pub fn slice_channels(x: &Tensor, start: usize, len: usize) -> Result<Tensor> {
    let [n, c, h, w] = x.shape();
    if start + len > c {
        return Err(Error::shape(format!(
            "channel slice {}..{} out of bounds for {} channels",
            start,
            start + len,
            c
        )));
    }
    let plane = h * w;
    let mut out = Tensor::zeros([n, len, h, w]);
    for b in 0..n {
        let src_start = (b * c + start) * plane;
        let dst_start = b * len * plane;
        out.data[dst_start..dst_start + len * plane]
            .copy_from_slice(&x.data[src_start..src_start + len * plane]);
    }
    Ok(out)
}

/// Scatter-adjoint of [`slice_channels`]: place `g` back at `start` within
/// `c_total` channels, zeros elsewhere.
pub fn unslice_channels(g: &Tensor, start: usize, c_total: usize) -> Tensor {
    let [n, len, h, w] = g.shape();
    let plane = h * w;
    let mut out = Tensor::zeros([n, c_total, h, w]);
    for b in 0..n {
        let dst_start = (b * c_total + start) * plane;
        let src_start = b * len * plane;
        out.data[dst_start..dst_start + len * plane]
            .copy_from_slice(&g.data[src_start..src_start + len * plane]);
    }
    out
}

/// Stack single-item tensors `[1,c,h,w]` along the batch axis.
pub fn stack_batch(items: &[&Tensor]) -> Result<Tensor> {
    if items.is_empty() {
        return Err(Error::invalid("stack_batch needs at least one tensor"));
    }
    let [n0, c, h, w] = items[0].shape();
    if n0 != 1 {
        return Err(Error::shape("stack_batch expects [1,c,h,w] items".to_string()));
    }
    let mut data = Vec::with_capacity(items.len() * c * h * w);
    for item in items {
        if item.shape() != [1, c, h, w] {
            return Err(Error::shape(format!(
                "stack_batch mismatch: {:?} vs {:?}",
                item.shape(),
                items[0].shape()
            )));
        }
        data.extend_from_slice(item.data());
    }
    Tensor::from_vec([items.len(), c, h, w], data)
}

/// Zero-pad the spatial axes by `p` on every side.
pub fn pad_zero(x: &Tensor, p: usize) -> Tensor {
    let [n, c, h, w] = x.shape();
    let mut out = Tensor::zeros([n, c, h + 2 * p, w + 2 * p]);
    for b in 0..n {
        for ch in 0..c {
            for i in 0..h {
                for j in 0..w {
                    *out.at_mut(b, ch, i + p, j + p) = x.at(b, ch, i, j);
                }
            }
        }
    }
    out
}

/// Crop a spatial window starting at `(top, left)` with size `(h, w)`.
pub fn crop(x: &Tensor, top: usize, left: usize, h: usize, w: usize) -> Result<Tensor> {
    let [n, c, xh, xw] = x.shape();
    if top + h > xh || left + w > xw {
        return Err(Error::shape(format!(
            "crop {}x{}+{}+{} out of bounds for {}x{}",
            h, w, top, left, xh, xw
        )));
    }
    let mut out = Tensor::zeros([n, c, h, w]);
    for b in 0..n {
        for ch in 0..c {
            for i in 0..h {
                for j in 0..w {
                    *out.at_mut(b, ch, i, j) = x.at(b, ch, top + i, left + j);
                }
            }
        }
    }
    Ok(out)
}

/// Replicate the border pixels outward by `p` on every side.
pub fn replicate_pad(x: &Tensor, p: usize) -> Tensor {
    let [n, c, h, w] = x.shape();
    let mut out = Tensor::zeros([n, c, h + 2 * p, w + 2 * p]);
    for b in 0..n {
        for ch in 0..c {
            for i in 0..h + 2 * p {
                let si = i.saturating_sub(p).min(h - 1);
                for j in 0..w + 2 * p {
                    let sj = j.saturating_sub(p).min(w - 1);
                    *out.at_mut(b, ch, i, j) = x.at(b, ch, si, sj);
                }
            }
        }
    }
    out
}

/// Adjoint of [`replicate_pad`]: fold padded-border cotangents back onto the
/// edge pixels they were copied from.
pub fn replicate_pad_adjoint(g: &Tensor, p: usize) -> Tensor {
    let [n, c, gh, gw] = g.shape();
    let h = gh - 2 * p;
    let w = gw - 2 * p;
    let mut out = Tensor::zeros([n, c, h, w]);
    for b in 0..n {
        for ch in 0..c {
            for i in 0..gh {
                let si = i.saturating_sub(p).min(h - 1);
                for j in 0..gw {
                    let sj = j.saturating_sub(p).min(w - 1);
                    *out.at_mut(b, ch, si, sj) += g.at(b, ch, i, j);
                }
            }
        }
    }
    out
}

/// Standard 3x3 Sobel kernel pair `(gx, gy)`, shape `[1,1,3,3]` each.
pub fn sobel_kernels() -> (Tensor, Tensor) {
    let gx = Tensor::from_vec(
        [1, 1, 3, 3],
        vec![-1.0, 0.0, 1.0, -2.0, 0.0, 2.0, -1.0, 0.0, 1.0],
    )
    .unwrap();
    let gy = Tensor::from_vec(
        [1, 1, 3, 3],
        vec![-1.0, -2.0, -1.0, 0.0, 0.0, 0.0, 1.0, 2.0, 1.0],
    )
    .unwrap();
    (gx, gy)
}

/// Sobel gradient magnitude `sqrt(Gx^2 + Gy^2)` on a single-channel tensor,
/// replicate padding so the output matches the input size.
pub fn sobel_grad(x: &Tensor) -> Result<Tensor> {
    let [_, c, _, _] = x.shape();
    if c != 1 {
        return Err(Error::shape(format!(
            "sobel_grad expects a single channel, got {}",
            c
        )));
    }
    let padded = replicate_pad(x, 1);
    let (kx, ky) = sobel_kernels();
    let gx = conv2d(&padded, &kx, None, ConvSpec::default())?;
    let gy = conv2d(&padded, &ky, None, ConvSpec::default())?;
    hypot(&gx, &gy)
}

/// Write the debug dump format: header `tensor n c h w`, then the values in
/// row-major order, one shortest-roundtrip decimal per whitespace-separated
/// token.
pub fn write_dump(w: &mut impl Write, t: &Tensor) -> Result<()> {
    let [n, c, h, wd] = t.shape();
    writeln!(w, "tensor {} {} {} {}", n, c, h, wd)?;
    for row in t.data.chunks(wd.max(1)) {
        let line: Vec<String> = row.iter().map(|v| format!("{}", v)).collect();
        writeln!(w, "{}", line.join(" "))?;
    }
    Ok(())
}

/// Read the dump format produced by [`write_dump`].
pub fn read_dump(r: &mut impl BufRead) -> Result<Tensor> {
    let mut header = String::new();
    r.read_line(&mut header)?;
    let parts: Vec<&str> = header.split_whitespace().collect();
    if parts.len() != 5 || parts[0] != "tensor" {
        return Err(Error::format(format!(
            "expected header 'tensor n c h w', got {:?}",
            header.trim()
        )));
    }
    let mut dims = [0usize; 4];
    for (i, p) in parts[1..].iter().enumerate() {
        dims[i] = p
            .parse()
            .map_err(|_| Error::format(format!("bad dimension {:?}", p)))?;
    }
    let expect: usize = dims.iter().product();
    let mut data = Vec::with_capacity(expect);
    let mut body = String::new();
    r.read_to_string(&mut body)?;
    for tok in body.split_whitespace() {
        let v: f64 = tok
            .parse()
            .map_err(|_| Error::format(format!("bad float {:?}", tok)))?;
        data.push(v);
    }
    if data.len() != expect {
        return Err(Error::format(format!(
            "dump holds {} values, shape {:?} needs {}",
            data.len(),
            dims,
            expect
        )));
    }
    Tensor::from_vec(dims, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_kernel_conv() {
        let x = Tensor::from_fn([1, 1, 4, 4], |_, _, i, j| (i * 4 + j) as f64);
        let w = Tensor::from_vec([1, 1, 1, 1], vec![1.0]).unwrap();
        let y = conv2d(&x, &w, None, ConvSpec::default()).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn ones_kernel_counts_window() {
        let x = Tensor::filled([1, 1, 4, 4], 1.0);
        let w = Tensor::filled([1, 1, 3, 3], 1.0);
        let y = conv2d(&x, &w, None, ConvSpec::default()).unwrap();
        assert_eq!(y.shape(), [1, 1, 2, 2]);
        assert!(y.data().iter().all(|&v| (v - 9.0).abs() < 1e-15));
    }

    #[test]
    fn conv_rejects_bad_groups() {
        let x = Tensor::zeros([1, 3, 4, 4]);
        let w = Tensor::zeros([2, 1, 2, 2]);
        let err = conv2d(&x, &w, None, ConvSpec::new(1, 1, 2, 0)).unwrap_err();
        assert!(err.to_string().contains("groups"));
    }

    #[test]
    fn transpose_of_single_pixel_paints_kernel() {
        let y = Tensor::from_vec([1, 1, 1, 1], vec![3.0]).unwrap();
        let w = Tensor::from_vec([1, 1, 2, 2], vec![0.5, 0.5, 0.5, 0.5]).unwrap();
        let x = conv_transpose2d(&y, &w, ConvSpec::new(2, 1, 1, 0)).unwrap();
        assert_eq!(x.shape(), [1, 1, 2, 2]);
        assert!(x.data().iter().all(|&v| (v - 1.5).abs() < 1e-15));
    }

    #[test]
    fn transpose_zero_is_zero() {
        let y = Tensor::zeros([1, 2, 3, 3]);
        let w = Tensor::filled([2, 1, 2, 2], 1.0);
        let x = conv_transpose2d(&y, &w, ConvSpec::new(2, 1, 2, 0)).unwrap();
        assert_eq!(x.max_abs(), 0.0);
    }

    #[test]
    fn sobel_constant_is_zero() {
        let x = Tensor::filled([1, 1, 6, 6], 0.7);
        let g = sobel_grad(&x).unwrap();
        assert!(g.max_abs() < 1e-15);
    }

    #[test]
    fn sobel_step_edge_magnitude() {
        // Vertical step of height 1 between columns 2 and 3.
        let x = Tensor::from_fn([1, 1, 6, 6], |_, _, _, j| if j < 3 { 0.0 } else { 1.0 });
        let g = sobel_grad(&x).unwrap();
        // Interior rows, the two columns adjacent to the edge see |Gx| = 4.
        for i in 1..5 {
            assert!((g.at(0, 0, i, 2) - 4.0).abs() < 1e-12);
            assert!((g.at(0, 0, i, 3) - 4.0).abs() < 1e-12);
        }
    }

    #[test]
    fn sobel_ramp_magnitude() {
        let x = Tensor::from_fn([1, 1, 6, 6], |_, _, _, j| j as f64);
        let g = sobel_grad(&x).unwrap();
        for i in 1..5 {
            for j in 1..5 {
                assert!((g.at(0, 0, i, j) - 8.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn sobel_rejects_multichannel() {
        let x = Tensor::zeros([1, 2, 4, 4]);
        assert!(sobel_grad(&x).is_err());
    }

    #[test]
    fn layer_norm_normalizes_channels() {
        let x = Tensor::from_fn([1, 4, 2, 2], |_, c, _, _| c as f64);
        let gamma = Tensor::filled([1, 4, 1, 1], 1.0);
        let beta = Tensor::zeros([1, 4, 1, 1]);
        let y = layer_norm(&x, &gamma, &beta, 1e-5).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                let mean: f64 = (0..4).map(|c| y.at(0, c, i, j)).sum::<f64>() / 4.0;
                assert!(mean.abs() < 1e-12);
            }
        }
    }

    #[test]
    fn concat_slice_roundtrip() {
        let a = Tensor::from_fn([2, 2, 3, 3], |n, c, i, j| (n + c + i + j) as f64);
        let b = Tensor::from_fn([2, 3, 3, 3], |n, c, i, j| (n * c + i * j) as f64 + 0.5);
        let cat = concat_channels(&[&a, &b]).unwrap();
        assert_eq!(cat.shape(), [2, 5, 3, 3]);
        assert_eq!(slice_channels(&cat, 0, 2).unwrap(), a);
        assert_eq!(slice_channels(&cat, 2, 3).unwrap(), b);
    }

    #[test]
    fn replicate_pad_adjoint_matches_inner_product() {
        // <pad(x), y> == <x, adjoint(y)> on small exhaustive values.
        let x = Tensor::from_fn([1, 1, 3, 3], |_, _, i, j| (i * 3 + j) as f64 + 1.0);
        let y = Tensor::from_fn([1, 1, 5, 5], |_, _, i, j| ((i * 5 + j) % 7) as f64 - 3.0);
        let px = replicate_pad(&x, 1);
        let ay = replicate_pad_adjoint(&y, 1);
        let lhs: f64 = px.data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data().iter().zip(ay.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn dump_roundtrip() {
        let t = Tensor::from_fn([1, 2, 3, 4], |_, c, i, j| {
            (c as f64 + 1.0) * 0.123456789012345 + i as f64 - j as f64 / 7.0
        });
        let mut buf = Vec::new();
        write_dump(&mut buf, &t).unwrap();
        let back = read_dump(&mut std::io::BufReader::new(&buf[..])).unwrap();
        assert_eq!(back.shape(), t.shape());
        assert!(t.max_abs_diff(&back) < 1e-15);
    }

    #[test]
    fn dump_rejects_truncation() {
        let t = Tensor::filled([1, 1, 2, 2], 1.0);
        let mut buf = Vec::new();
        write_dump(&mut buf, &t).unwrap();
        buf.truncate(buf.len() - 2);
        assert!(read_dump(&mut std::io::BufReader::new(&buf[..])).is_err());
    }
}
