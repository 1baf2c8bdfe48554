//! Reverse-mode automatic differentiation over the tensor kernels.
//!
//! The central abstraction is the [`Ops`] trait: forward code is written once
//! against it and then either evaluated directly ([`Eager`], values are plain
//! tensors that drop when they go out of scope) or recorded on a [`Tape`]
//! whose `backward` replays vector-Jacobian products in reverse order and
//! accumulates gradients into a [`ParamSet`].
//!
//! Also here: the [`Adam`] optimizer and the central finite-difference
//! gradient checker.

use crate::error::{Error, Result};
use crate::ssd::{
    freq_filter_backward, freq_filter_forward, scan2d_backward, scan2d_forward, MaskMode, ScanDir,
};
use crate::tensor::{self, ConvSpec, Tensor};
use std::collections::HashMap;

/// Handle to one named leaf in a [`ParamSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(usize);

/// A learnable leaf: value plus accumulated gradient of identical shape.
#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
}

/// Ordered, named collection of parameters; order is registration order and
/// is the canonical checkpoint order.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    params: Vec<Parameter>,
}

impl ParamSet {
    pub fn new() -> ParamSet {
        ParamSet { params: Vec::new() }
    }

    pub fn register(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let grad = Tensor::zeros(value.shape());
        self.params.push(Parameter {
            name: name.into(),
            value,
            grad,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar entries across all leaves.
    pub fn total_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].grad
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad = Tensor::zeros(p.value.shape());
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    fn accumulate_grad(&mut self, id: ParamId, g: &Tensor) {
        let p = &mut self.params[id.0];
        p.grad = tensor::add(&p.grad, g).expect("gradient shape matches parameter");
    }
}

/// The tensor-valued operation set the network is written against.
///
/// `V` is a plain [`Tensor`] for eager evaluation or a node handle for the
/// recording tape.
pub trait Ops {
    type V: Clone;

    /// Lift a constant (no gradient will flow into it).
    fn lift(&mut self, t: Tensor) -> Self::V;
    /// Load a parameter leaf; on the tape, repeated loads of the same id
    /// return the same node so gradient accumulation is linear.
    fn load(&mut self, ps: &ParamSet, id: ParamId) -> Self::V;
    /// Read the concrete value behind a handle.
    fn tensor<'a>(&'a self, v: &'a Self::V) -> &'a Tensor;

    fn conv2d(
        &mut self,
        x: &Self::V,
        w: &Self::V,
        bias: Option<&Self::V>,
        spec: ConvSpec,
    ) -> Result<Self::V>;
    fn conv_transpose2d(&mut self, x: &Self::V, w: &Self::V, spec: ConvSpec) -> Result<Self::V>;

    fn add(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V>;
    fn sub(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V>;
    fn mul(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V>;
    fn div(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V>;
    fn maximum(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V>;
    fn scale(&mut self, x: &Self::V, c: f64) -> Result<Self::V>;
    fn add_scalar(&mut self, x: &Self::V, c: f64) -> Result<Self::V>;
    fn sigmoid(&mut self, x: &Self::V) -> Result<Self::V>;
    fn silu(&mut self, x: &Self::V) -> Result<Self::V>;
    fn tanh(&mut self, x: &Self::V) -> Result<Self::V>;
    fn abs(&mut self, x: &Self::V) -> Result<Self::V>;
    /// Elementwise square root; inputs must be strictly positive wherever a
    /// gradient is needed.
    fn sqrt(&mut self, x: &Self::V) -> Result<Self::V>;
    fn hypot(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V>;
    fn add_channel_bias(&mut self, x: &Self::V, bias: &Self::V) -> Result<Self::V>;
    fn layer_norm(
        &mut self,
        x: &Self::V,
        gamma: &Self::V,
        beta: &Self::V,
        eps: f64,
    ) -> Result<Self::V>;
    fn concat_channels(&mut self, parts: &[&Self::V]) -> Result<Self::V>;
    fn slice_channels(&mut self, x: &Self::V, start: usize, len: usize) -> Result<Self::V>;
    fn replicate_pad(&mut self, x: &Self::V, p: usize) -> Result<Self::V>;
    fn sum_all(&mut self, x: &Self::V) -> Result<Self::V>;
    fn mean_all(&mut self, x: &Self::V) -> Result<Self::V>;

    /// Separable 2-D kernel from two length-L vectors (`[1,1,1,L]` each),
    /// replicated per channel into a grouped-conv weight `[channels,1,L,L]`
    /// with `K[ch,0,i,j] = row[i] * col[j]`.
    fn outer_kernel(&mut self, row: &Self::V, col: &Self::V, channels: usize) -> Result<Self::V>;

    /// FFT power-threshold filter (the frequency branch); `lambda01` is a
    /// scalar handle in (0,1].
    fn freq_filter(
        &mut self,
        x: &Self::V,
        lambda01: &Self::V,
        mode: MaskMode,
        k_sharp: f64,
    ) -> Result<Self::V>;

    /// Multi-directional 2-D state-space scan, averaged over `dirs`.
    fn scan2d(
        &mut self,
        x: &Self::V,
        a: &Self::V,
        b: &Self::V,
        c: &Self::V,
        groups: usize,
        state_dim: usize,
        dirs: &[ScanDir],
    ) -> Result<Self::V>;

    fn shape(&self, v: &Self::V) -> [usize; 4] {
        self.tensor(v).shape()
    }

    /// Fail fast with the stage name when a NaN/Inf appears.
    fn assert_finite(&self, v: &Self::V, stage: &str) -> Result<()> {
        if self.tensor(v).is_finite() {
            Ok(())
        } else {
            Err(Error::numeric(format!(
                "non-finite values produced at stage '{stage}'"
            )))
        }
    }
}

/// Direct evaluation; values are plain tensors.
#[derive(Debug, Default)]
pub struct Eager;

impl Ops for Eager {
    type V = Tensor;

    fn lift(&mut self, t: Tensor) -> Tensor {
        t
    }

    fn load(&mut self, ps: &ParamSet, id: ParamId) -> Tensor {
        ps.value(id).clone()
    }

    fn tensor<'a>(&'a self, v: &'a Tensor) -> &'a Tensor {
        v
    }

    fn conv2d(
        &mut self,
        x: &Tensor,
        w: &Tensor,
        bias: Option<&Tensor>,
        spec: ConvSpec,
    ) -> Result<Tensor> {
        tensor::conv2d(x, w, bias, spec)
    }

    fn conv_transpose2d(&mut self, x: &Tensor, w: &Tensor, spec: ConvSpec) -> Result<Tensor> {
        tensor::conv_transpose2d(x, w, spec)
    }

    fn add(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        tensor::add(a, b)
    }

    fn sub(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        tensor::sub(a, b)
    }

    fn mul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        tensor::mul(a, b)
    }

    fn div(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        tensor::div(a, b)
    }

    fn maximum(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        tensor::maximum(a, b)
    }

    fn scale(&mut self, x: &Tensor, c: f64) -> Result<Tensor> {
        Ok(tensor::scale(x, c))
    }

    fn add_scalar(&mut self, x: &Tensor, c: f64) -> Result<Tensor> {
        Ok(tensor::add_scalar(x, c))
    }

    fn sigmoid(&mut self, x: &Tensor) -> Result<Tensor> {
        Ok(tensor::sigmoid(x))
    }

    fn silu(&mut self, x: &Tensor) -> Result<Tensor> {
        Ok(tensor::silu(x))
    }

    fn tanh(&mut self, x: &Tensor) -> Result<Tensor> {
        Ok(tensor::tanh(x))
    }

    fn abs(&mut self, x: &Tensor) -> Result<Tensor> {
        Ok(tensor::abs(x))
    }

    fn sqrt(&mut self, x: &Tensor) -> Result<Tensor> {
        Ok(tensor::sqrt_elem(x))
    }

    fn hypot(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        tensor::hypot(a, b)
    }

    fn add_channel_bias(&mut self, x: &Tensor, bias: &Tensor) -> Result<Tensor> {
        tensor::add_channel_bias(x, bias)
    }

    fn layer_norm(&mut self, x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
        tensor::layer_norm(x, gamma, beta, eps)
    }

    fn concat_channels(&mut self, parts: &[&Tensor]) -> Result<Tensor> {
        tensor::concat_channels(parts)
    }

    fn slice_channels(&mut self, x: &Tensor, start: usize, len: usize) -> Result<Tensor> {
        tensor::slice_channels(x, start, len)
    }

    fn replicate_pad(&mut self, x: &Tensor, p: usize) -> Result<Tensor> {
        Ok(tensor::replicate_pad(x, p))
    }

    fn sum_all(&mut self, x: &Tensor) -> Result<Tensor> {
        Ok(tensor::sum_all(x))
    }

    fn mean_all(&mut self, x: &Tensor) -> Result<Tensor> {
        Ok(tensor::mean_all(x))
    }

    fn outer_kernel(&mut self, row: &Tensor, col: &Tensor, channels: usize) -> Result<Tensor> {
        outer_kernel_forward(row, col, channels)
    }

    fn freq_filter(
        &mut self,
        x: &Tensor,
        lambda01: &Tensor,
        mode: MaskMode,
        k_sharp: f64,
    ) -> Result<Tensor> {
        freq_filter_forward(x, lambda01.scalar_value()?, mode, k_sharp)
    }

    fn scan2d(
        &mut self,
        x: &Tensor,
        a: &Tensor,
        b: &Tensor,
        c: &Tensor,
        groups: usize,
        state_dim: usize,
        dirs: &[ScanDir],
    ) -> Result<Tensor> {
        scan2d_forward(x, a, b, c, groups, state_dim, dirs)
    }
}

pub(crate) fn outer_kernel_forward(row: &Tensor, col: &Tensor, channels: usize) -> Result<Tensor> {
    let l_r = row.len();
    let l_c = col.len();
    if l_r != l_c || l_r < 2 {
        return Err(Error::shape(format!(
            "kernel vectors must share a length >= 2, got {} and {}",
            l_r, l_c
        )));
    }
    let mut k = Tensor::zeros([channels, 1, l_r, l_c]);
    for ch in 0..channels {
        for i in 0..l_r {
            for j in 0..l_c {
                *k.at_mut(ch, 0, i, j) = row.data()[i] * col.data()[j];
            }
        }
    }
    Ok(k)
}

/// Tape node handle.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

type BackFn = Box<dyn Fn(&[Tensor], &Tensor) -> Vec<(usize, Tensor)>>;

struct Record {
    out: usize,
    back: BackFn,
}

/// Wengert-list tape: records every primitive application together with a
/// closure computing its vector-Jacobian product from saved node values.
#[derive(Default)]
pub struct Tape {
    values: Vec<Tensor>,
    records: Vec<Record>,
    param_nodes: Vec<(ParamId, usize)>,
    param_memo: HashMap<usize, usize>,
    spent: bool,
}

impl Tape {
    pub fn new() -> Tape {
        Tape::default()
    }

    fn push_value(&mut self, t: Tensor) -> Var {
        self.values.push(t);
        Var(self.values.len() - 1)
    }

    fn push_op(&mut self, t: Tensor, back: BackFn) -> Var {
        let v = self.push_value(t);
        self.records.push(Record { out: v.0, back });
        v
    }

    /// Run reverse accumulation from a scalar loss node, adding each reached
    /// parameter's gradient into `ps`.
    pub fn backward(&mut self, loss: Var, ps: &mut ParamSet) -> Result<()> {
        if self.spent {
            return Err(Error::invalid(
                "backward called twice on the same tape; re-record the forward pass first",
            ));
        }
        if self.values[loss.0].len() != 1 {
            return Err(Error::shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.values[loss.0].shape()
            )));
        }
        self.spent = true;
        let mut grads: Vec<Option<Tensor>> = vec![None; self.values.len()];
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for rec in self.records.iter().rev() {
            let gout = match grads[rec.out].take() {
                Some(g) => g,
                None => continue,
            };
            for (parent, contrib) in (rec.back)(&self.values, &gout) {
                match &mut grads[parent] {
                    Some(acc) => {
                        *acc = tensor::add(acc, &contrib)
                            .expect("gradient accumulation shape mismatch");
                    }
                    slot @ None => *slot = Some(contrib),
                }
            }
        }
        for &(pid, node) in &self.param_nodes {
            if let Some(g) = &grads[node] {
                ps.accumulate_grad(pid, g);
            }
        }
        Ok(())
    }
}

impl Ops for Tape {
    type V = Var;

    fn lift(&mut self, t: Tensor) -> Var {
        self.push_value(t)
    }

    fn load(&mut self, ps: &ParamSet, id: ParamId) -> Var {
        if let Some(&node) = self.param_memo.get(&id.0) {
            return Var(node);
        }
        let v = self.push_value(ps.value(id).clone());
        self.param_memo.insert(id.0, v.0);
        self.param_nodes.push((id, v.0));
        v
    }

    fn tensor<'a>(&'a self, v: &'a Var) -> &'a Tensor {
        &self.values[v.0]
    }

    fn conv2d(
        &mut self,
        x: &Var,
        w: &Var,
        bias: Option<&Var>,
        spec: ConvSpec,
    ) -> Result<Var> {
        let out = tensor::conv2d(
            &self.values[x.0],
            &self.values[w.0],
            bias.map(|b| &self.values[b.0]),
            spec,
        )?;
        let (xi, wi, bi) = (x.0, w.0, bias.map(|b| b.0));
        let w_shape = self.values[w.0].shape();
        let [_, _, xh, xw] = self.values[x.0].shape();
        Ok(self.push_op(
            out,
            Box::new(move |vals, g| {
                let dx = tensor::conv_transpose2d_to(g, &vals[wi], spec, Some((xh, xw)))
                    .expect("conv2d vjp dx");
                let dw = tensor::conv2d_grad_w(&vals[xi], g, spec, w_shape).expect("conv2d vjp dw");
                let mut out = vec![(xi, dx), (wi, dw)];
                if let Some(bi) = bi {
                    out.push((bi, reshape_like(tensor::conv2d_grad_bias(g), &vals[bi])));
                }
                out
            }),
        ))
    }

    fn conv_transpose2d(&mut self, x: &Var, w: &Var, spec: ConvSpec) -> Result<Var> {
        let out = tensor::conv_transpose2d(&self.values[x.0], &self.values[w.0], spec)?;
        let (xi, wi) = (x.0, w.0);
        let w_shape = self.values[w.0].shape();
        Ok(self.push_op(
            out,
            Box::new(move |vals, g| {
                let dx = tensor::conv2d(g, &vals[wi], None, spec).expect("convT vjp dx");
                let dw = tensor::conv_transpose2d_grad_w(&vals[xi], g, spec, w_shape)
                    .expect("convT vjp dw");
                vec![(xi, dx), (wi, dw)]
            }),
        ))
    }

    fn add(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let out = tensor::add(&self.values[a.0], &self.values[b.0])?;
        let (ai, bi) = (a.0, b.0);
        Ok(self.push_op(
            out,
            Box::new(move |_, g| vec![(ai, g.clone()), (bi, g.clone())]),
        ))
    }

    fn sub(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let out = tensor::sub(&self.values[a.0], &self.values[b.0])?;
        let (ai, bi) = (a.0, b.0);
        Ok(self.push_op(
            out,
            Box::new(move |_, g| vec![(ai, g.clone()), (bi, tensor::scale(g, -1.0))]),
        ))
    }

    fn mul(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let out = tensor::mul(&self.values[a.0], &self.values[b.0])?;
        let (ai, bi) = (a.0, b.0);
        Ok(self.push_op(
            out,
            Box::new(move |vals, g| {
                vec![
                    (ai, tensor::mul(g, &vals[bi]).expect("mul vjp")),
                    (bi, tensor::mul(g, &vals[ai]).expect("mul vjp")),
                ]
            }),
        ))
    }

    fn div(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let out = tensor::div(&self.values[a.0], &self.values[b.0])?;
        let (ai, bi) = (a.0, b.0);
        Ok(self.push_op(
            out,
            Box::new(move |vals, g| {
                let da = tensor::div(g, &vals[bi]).expect("div vjp");
                let db = vals[ai]
                    .zip(&vals[bi], |x, y| -x / (y * y))
                    .and_then(|t| tensor::mul(g, &t))
                    .expect("div vjp");
                vec![(ai, da), (bi, db)]
            }),
        ))
    }

    fn maximum(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let out = tensor::maximum(&self.values[a.0], &self.values[b.0])?;
        let (ai, bi) = (a.0, b.0);
        Ok(self.push_op(
            out,
            Box::new(move |vals, g| {
                // Ties route the gradient to the first operand.
                let da = vals[ai]
                    .zip(&vals[bi], |x, y| if x >= y { 1.0 } else { 0.0 })
                    .and_then(|m| tensor::mul(g, &m))
                    .expect("max vjp");
                let db = vals[ai]
                    .zip(&vals[bi], |x, y| if x >= y { 0.0 } else { 1.0 })
                    .and_then(|m| tensor::mul(g, &m))
                    .expect("max vjp");
                vec![(ai, da), (bi, db)]
            }),
        ))
    }

    fn scale(&mut self, x: &Var, c: f64) -> Result<Var> {
        let out = tensor::scale(&self.values[x.0], c);
        let xi = x.0;
        Ok(self.push_op(out, Box::new(move |_, g| vec![(xi, tensor::scale(g, c))])))
    }

    fn add_scalar(&mut self, x: &Var, c: f64) -> Result<Var> {
        let out = tensor::add_scalar(&self.values[x.0], c);
        let xi = x.0;
        Ok(self.push_op(out, Box::new(move |_, g| vec![(xi, g.clone())])))
    }

    fn sigmoid(&mut self, x: &Var) -> Result<Var> {
        let out = tensor::sigmoid(&self.values[x.0]);
        let xi = x.0;
        Ok(self.push_op(
            out,
            Box::new(move |vals, g| {
                let d = vals[xi].map(|v| {
                    let s = tensor::sigmoid_scalar(v);
                    s * (1.0 - s)
                });
                vec![(xi, tensor::mul(g, &d).expect("sigmoid vjp"))]
            }),
        ))
    }

    fn silu(&mut self, x: &Var) -> Result<Var> {
        let out = tensor::silu(&self.values[x.0]);
        let xi = x.0;
        Ok(self.push_op(
            out,
            Box::new(move |vals, g| {
                let d = vals[xi].map(|v| {
                    let s = tensor::sigmoid_scalar(v);
                    s + v * s * (1.0 - s)
                });
                vec![(xi, tensor::mul(g, &d).expect("silu vjp"))]
            }),
        ))
    }

    fn tanh(&mut self, x: &Var) -> Result<Var> {
        let out = tensor::tanh(&self.values[x.0]);
        let xi = x.0;
        Ok(self.push_op(
            out,
            Box::new(move |vals, g| {
                let d = vals[xi].map(|v| {
                    let t = v.tanh();
                    1.0 - t * t
                });
                vec![(xi, tensor::mul(g, &d).expect("tanh vjp"))]
            }),
        ))
    }

    fn abs(&mut self, x: &Var) -> Result<Var> {
        let out = tensor::abs(&self.values[x.0]);
        let xi = x.0;
        Ok(self.push_op(
            out,
            Box::new(move |vals, g| {
                let d = vals[xi].map(|v| {
                    if v > 0.0 {
                        1.0
                    } else if v < 0.0 {
                        -1.0
                    } else {
                        0.0
                    }
                });
                vec![(xi, tensor::mul(g, &d).expect("abs vjp"))]
            }),
        ))
    }

    fn sqrt(&mut self, x: &Var) -> Result<Var> {
        let out = tensor::sqrt_elem(&self.values[x.0]);
        let xi = x.0;
        Ok(self.push_op(
            out,
            Box::new(move |vals, g| {
                let d = vals[xi].map(|v| {
                    let r = v.sqrt();
                    if r == 0.0 {
                        0.0
                    } else {
                        0.5 / r
                    }
                });
                vec![(xi, tensor::mul(g, &d).expect("sqrt vjp"))]
            }),
        ))
    }

    fn hypot(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let out = tensor::hypot(&self.values[a.0], &self.values[b.0])?;
        let (ai, bi) = (a.0, b.0);
        Ok(self.push_op(
            out,
            Box::new(move |vals, g| {
                // d hypot = (a/r, b/r); zero at the origin by convention.
                let r = tensor::hypot(&vals[ai], &vals[bi]).expect("hypot vjp");
                let da = vals[ai]
                    .zip(&r, |x, rv| if rv == 0.0 { 0.0 } else { x / rv })
                    .and_then(|t| tensor::mul(g, &t))
                    .expect("hypot vjp");
                let db = vals[bi]
                    .zip(&r, |x, rv| if rv == 0.0 { 0.0 } else { x / rv })
                    .and_then(|t| tensor::mul(g, &t))
                    .expect("hypot vjp");
                vec![(ai, da), (bi, db)]
            }),
        ))
    }

    fn add_channel_bias(&mut self, x: &Var, bias: &Var) -> Result<Var> {
        let out = tensor::add_channel_bias(&self.values[x.0], &self.values[bias.0])?;
        let (xi, bi) = (x.0, bias.0);
        Ok(self.push_op(
            out,
            Box::new(move |_, g| vec![(xi, g.clone()), (bi, tensor::conv2d_grad_bias(g))]),
        ))
    }

    fn layer_norm(&mut self, x: &Var, gamma: &Var, beta: &Var, eps: f64) -> Result<Var> {
        let out = tensor::layer_norm(
            &self.values[x.0],
            &self.values[gamma.0],
            &self.values[beta.0],
            eps,
        )?;
        let (xi, gi, bi) = (x.0, gamma.0, beta.0);
        Ok(self.push_op(
            out,
            Box::new(move |vals, g| layer_norm_vjp(&vals[xi], &vals[gi], eps, g, xi, gi, bi)),
        ))
    }

    fn concat_channels(&mut self, parts: &[&Var]) -> Result<Var> {
        let tensors: Vec<&Tensor> = parts.iter().map(|v| &self.values[v.0]).collect();
        let out = tensor::concat_channels(&tensors)?;
        let idx: Vec<usize> = parts.iter().map(|v| v.0).collect();
        let widths: Vec<usize> = tensors.iter().map(|t| t.shape()[1]).collect();
        Ok(self.push_op(
            out,
            Box::new(move |_, g| {
                let mut offset = 0;
                let mut grads = Vec::with_capacity(idx.len());
                for (&i, &w) in idx.iter().zip(&widths) {
                    grads.push((i, tensor::slice_channels(g, offset, w).expect("concat vjp")));
                    offset += w;
                }
                grads
            }),
        ))
    }

    fn slice_channels(&mut self, x: &Var, start: usize, len: usize) -> Result<Var> {
        let out = tensor::slice_channels(&self.values[x.0], start, len)?;
        let xi = x.0;
        let c_total = self.values[x.0].shape()[1];
        Ok(self.push_op(
            out,
            Box::new(move |_, g| vec![(xi, tensor::unslice_channels(g, start, c_total))]),
        ))
    }

    fn replicate_pad(&mut self, x: &Var, p: usize) -> Result<Var> {
        let out = tensor::replicate_pad(&self.values[x.0], p);
        let xi = x.0;
        Ok(self.push_op(
            out,
            Box::new(move |_, g| vec![(xi, tensor::replicate_pad_adjoint(g, p))]),
        ))
    }

    fn sum_all(&mut self, x: &Var) -> Result<Var> {
        let out = tensor::sum_all(&self.values[x.0]);
        let xi = x.0;
        Ok(self.push_op(
            out,
            Box::new(move |vals, g| {
                let gv = g.scalar_value().expect("sum_all cotangent is scalar");
                vec![(xi, Tensor::filled(vals[xi].shape(), gv))]
            }),
        ))
    }

    fn mean_all(&mut self, x: &Var) -> Result<Var> {
        let out = tensor::mean_all(&self.values[x.0]);
        let xi = x.0;
        Ok(self.push_op(
            out,
            Box::new(move |vals, g| {
                let gv = g.scalar_value().expect("mean_all cotangent is scalar");
                let n = vals[xi].len() as f64;
                vec![(xi, Tensor::filled(vals[xi].shape(), gv / n))]
            }),
        ))
    }

    fn outer_kernel(&mut self, row: &Var, col: &Var, channels: usize) -> Result<Var> {
        let out = outer_kernel_forward(&self.values[row.0], &self.values[col.0], channels)?;
        let (ri, ci) = (row.0, col.0);
        Ok(self.push_op(
            out,
            Box::new(move |vals, g| {
                let l = vals[ri].len();
                let ch = g.shape()[0];
                let mut dr = Tensor::zeros(vals[ri].shape());
                let mut dc = Tensor::zeros(vals[ci].shape());
                for c in 0..ch {
                    for i in 0..l {
                        for j in 0..l {
                            let gv = g.at(c, 0, i, j);
                            dr.data_mut()[i] += gv * vals[ci].data()[j];
                            dc.data_mut()[j] += gv * vals[ri].data()[i];
                        }
                    }
                }
                vec![(ri, dr), (ci, dc)]
            }),
        ))
    }

    fn freq_filter(
        &mut self,
        x: &Var,
        lambda01: &Var,
        mode: MaskMode,
        k_sharp: f64,
    ) -> Result<Var> {
        let lambda = self.values[lambda01.0].scalar_value()?;
        let out = freq_filter_forward(&self.values[x.0], lambda, mode, k_sharp)?;
        let (xi, li) = (x.0, lambda01.0);
        Ok(self.push_op(
            out,
            Box::new(move |vals, g| {
                let lambda = vals[li].scalar_value().expect("lambda is scalar");
                let (dx, dl) = freq_filter_backward(&vals[xi], lambda, mode, k_sharp, g)
                    .expect("freq_filter vjp");
                vec![(xi, dx), (li, Tensor::scalar(dl))]
            }),
        ))
    }

    fn scan2d(
        &mut self,
        x: &Var,
        a: &Var,
        b: &Var,
        c: &Var,
        groups: usize,
        state_dim: usize,
        dirs: &[ScanDir],
    ) -> Result<Var> {
        let out = scan2d_forward(
            &self.values[x.0],
            &self.values[a.0],
            &self.values[b.0],
            &self.values[c.0],
            groups,
            state_dim,
            dirs,
        )?;
        let (xi, ai, bi, ci) = (x.0, a.0, b.0, c.0);
        let dirs: Vec<ScanDir> = dirs.to_vec();
        Ok(self.push_op(
            out,
            Box::new(move |vals, g| {
                let (dx, da, db, dc) = scan2d_backward(
                    &vals[xi], &vals[ai], &vals[bi], &vals[ci], groups, state_dim, &dirs, g,
                )
                .expect("scan2d vjp");
                vec![(xi, dx), (ai, da), (bi, db), (ci, dc)]
            }),
        ))
    }
}

fn reshape_like(mut t: Tensor, like: &Tensor) -> Tensor {
    // Bias leaves may be stored [1,c,1,1] or flat; lengths always agree.
    debug_assert_eq!(t.len(), like.len());
    if t.shape() != like.shape() {
        t = Tensor::from_vec(like.shape(), t.data().to_vec()).expect("same length");
    }
    t
}

fn layer_norm_vjp(
    x: &Tensor,
    gamma: &Tensor,
    eps: f64,
    g: &Tensor,
    xi: usize,
    gi: usize,
    bi: usize,
) -> Vec<(usize, Tensor)> {
    let [n, c, h, w] = x.shape();
    let mut dx = Tensor::zeros(x.shape());
    let mut dgamma = Tensor::zeros([1, c, 1, 1]);
    let mut dbeta = Tensor::zeros([1, c, 1, 1]);
    let cf = c as f64;
    for b in 0..n {
        for i in 0..h {
            for j in 0..w {
                let mut mean = 0.0;
                for ch in 0..c {
                    mean += x.at(b, ch, i, j);
                }
                mean /= cf;
                let mut var = 0.0;
                for ch in 0..c {
                    let d = x.at(b, ch, i, j) - mean;
                    var += d * d;
                }
                var /= cf;
                let inv = 1.0 / (var + eps).sqrt();
                let mut sum_dxhat = 0.0;
                let mut sum_dxhat_xhat = 0.0;
                let mut xhat = vec![0.0; c];
                let mut dxhat = vec![0.0; c];
                for ch in 0..c {
                    xhat[ch] = (x.at(b, ch, i, j) - mean) * inv;
                    let gv = g.at(b, ch, i, j);
                    dgamma.data_mut()[ch] += gv * xhat[ch];
                    dbeta.data_mut()[ch] += gv;
                    dxhat[ch] = gv * gamma.data()[ch];
                    sum_dxhat += dxhat[ch];
                    sum_dxhat_xhat += dxhat[ch] * xhat[ch];
                }
                for ch in 0..c {
                    *dx.at_mut(b, ch, i, j) = inv
                        * (dxhat[ch] - sum_dxhat / cf - xhat[ch] * sum_dxhat_xhat / cf);
                }
            }
        }
    }
    vec![(xi, dx), (gi, dgamma), (bi, dbeta)]
}

/// Bias-corrected Adam over a [`ParamSet`]. Gradients are read, never
/// cleared; the caller zeroes them between steps.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(ps: &ParamSet, lr: f64) -> Adam {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: ps.iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect(),
            v: ps.iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect(),
        }
    }

    pub fn step(&mut self, ps: &mut ParamSet) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for i in 0..ps.len() {
            let id = ParamId(i);
            let grad = ps.grad(id).clone();
            for k in 0..grad.len() {
                let g = grad.data()[k];
                let m = &mut self.m[i].data_mut()[k];
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                let v = &mut self.v[i].data_mut()[k];
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let m_hat = self.m[i].data()[k] / bc1;
                let v_hat = self.v[i].data()[k] / bc2;
                ps.value_mut(id).data_mut()[k] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}

/// Central-difference check of an analytic gradient.
///
/// Per entry the step is `h * max(1, |p|)` and the derivative estimate is
/// the fourth-order five-point central stencil
/// `(f(-2h) - 8 f(-h) + 8 f(h) - f(2h)) / 12h`; returns the maximum of
/// `|analytic - central| / max(1e-8, |central|, |analytic|)`.
pub fn finite_diff_check(
    f: &mut dyn FnMut(&Tensor) -> Result<f64>,
    value: &Tensor,
    analytic: &Tensor,
    h: f64,
) -> Result<f64> {
    if value.shape() != analytic.shape() {
        return Err(Error::shape(format!(
            "analytic gradient shape {:?} does not match value shape {:?}",
            analytic.shape(),
            value.shape()
        )));
    }
    let mut worst = 0.0_f64;
    let mut probe = value.clone();
    for k in 0..value.len() {
        let orig = value.data()[k];
        let step = h * orig.abs().max(1.0);
        let mut eval = |offset: f64| -> Result<f64> {
            probe.data_mut()[k] = orig + offset;
            f(&probe)
        };
        let m2 = eval(-2.0 * step)?;
        let m1 = eval(-step)?;
        let p1 = eval(step)?;
        let p2 = eval(2.0 * step)?;
        probe.data_mut()[k] = orig;
        let central = (m2 - 8.0 * m1 + 8.0 * p1 - p2) / (12.0 * step);
        let a = analytic.data()[k];
        let denom = central.abs().max(a.abs()).max(1e-8);
        worst = worst.max((a - central).abs() / denom);
    }
    Ok(worst)
}
