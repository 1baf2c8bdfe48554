//! Spatial-frequency state-space fusion block.
//!
//! A block normalizes its input, projects it to a wide channel space, runs a
//! spatial 3x3 branch and an FFT power-threshold branch, splits the fused
//! result into `{X, B, C, A}`, mixes globally with a four-direction 2-D
//! state-space scan, gates, projects back with a residual, and finishes with
//! a gated-residual MLP.
//!
//! The scan and the frequency filter are tape primitives with hand-derived
//! adjoints (see `freq_filter_backward` / `scan2d_backward`); everything else
//! composes from elementwise/conv primitives.

use crate::autodiff::{Ops, ParamId, ParamSet};
use crate::error::{Error, Result};
use crate::fft::{fft2, fft2_complex, ifft2, Spectrum};
use crate::tensor::{ConvSpec, Tensor};
use rand::Rng;

/// Raster-scan direction; state resets at the start of every scan line
/// (rows for LR/RL, columns for TB/BT).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScanDir {
    LeftRight,
    RightLeft,
    TopBottom,
    BottomTop,
}

impl ScanDir {
    pub const ALL: [ScanDir; 4] = [
        ScanDir::LeftRight,
        ScanDir::RightLeft,
        ScanDir::TopBottom,
        ScanDir::BottomTop,
    ];

    /// Number of lines and line length on an `h x w` grid.
    fn lines(self, h: usize, w: usize) -> (usize, usize) {
        match self {
            ScanDir::LeftRight | ScanDir::RightLeft => (h, w),
            ScanDir::TopBottom | ScanDir::BottomTop => (w, h),
        }
    }

    #[inline]
    fn pos(self, line: usize, t: usize, h: usize, w: usize) -> (usize, usize) {
        match self {
            ScanDir::LeftRight => (line, t),
            ScanDir::RightLeft => (line, w - 1 - t),
            ScanDir::TopBottom => (t, line),
            ScanDir::BottomTop => (h - 1 - t, line),
        }
    }
}

/// Frequency-mask flavor: `Hard` thresholds the normalized power spectrum,
/// `Soft` replaces the comparator with a sharp sigmoid so the filter is
/// differentiable (training uses `Soft`).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskMode {
    Hard,
    Soft,
}

fn mask_value(p_norm: f64, lambda: f64, mode: MaskMode, k_sharp: f64) -> f64 {
    match mode {
        MaskMode::Hard => {
            if p_norm >= lambda {
                1.0
            } else {
                0.0
            }
        }
        MaskMode::Soft => crate::tensor::sigmoid_scalar(k_sharp * (p_norm - lambda)),
    }
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(lambda > 0.0 && lambda <= 1.0) {
        return Err(Error::invalid(format!(
            "frequency threshold must lie in (0, 1], got {lambda}"
        )));
    }
    Ok(())
}

/// FFT -> per-channel max-normalized power threshold -> inverse FFT.
///
/// The mask is conjugate-symmetric because the power spectrum of a real
/// input is, so the inverse transform is real up to rounding.
pub fn freq_filter_forward(
    x: &Tensor,
    lambda: f64,
    mode: MaskMode,
    k_sharp: f64,
) -> Result<Tensor> {
    check_lambda(lambda)?;
    let spec = fft2(x);
    let [n, c, h, w] = spec.shape;
    let plane = h * w;
    let mut masked = Spectrum::zeros(spec.shape);
    for p in 0..n * c {
        let base = p * plane;
        let mut m = 0.0_f64;
        for k in 0..plane {
            let pw = spec.re[base + k] * spec.re[base + k] + spec.im[base + k] * spec.im[base + k];
            m = m.max(pw);
        }
        let mg = m.max(1e-30);
        for k in 0..plane {
            let pw = spec.re[base + k] * spec.re[base + k] + spec.im[base + k] * spec.im[base + k];
            let mv = mask_value(pw / mg, lambda, mode, k_sharp);
            masked.re[base + k] = spec.re[base + k] * mv;
            masked.im[base + k] = spec.im[base + k] * mv;
        }
    }
    ifft2(&masked)
}

/// Adjoint of [`freq_filter_forward`]: returns `(d/dx, d/dlambda)`.
///
/// In `Hard` mode the mask is piecewise constant, so `d/dlambda = 0` and the
/// mask itself is treated as fixed.
pub fn freq_filter_backward(
    x: &Tensor,
    lambda: f64,
    mode: MaskMode,
    k_sharp: f64,
    gout: &Tensor,
) -> Result<(Tensor, f64)> {
    check_lambda(lambda)?;
    let spec = fft2(x);
    let gspec = fft2(gout); // cotangent of the masked spectrum
    let [n, c, h, w] = spec.shape;
    let plane = h * w;
    let mut d_re = vec![0.0; spec.len()];
    let mut d_im = vec![0.0; spec.len()];
    let mut d_lambda = 0.0;

    for p in 0..n * c {
        let base = p * plane;
        let mut m = 0.0_f64;
        let mut argmax = 0usize;
        for k in 0..plane {
            let pw = spec.re[base + k] * spec.re[base + k] + spec.im[base + k] * spec.im[base + k];
            if pw > m {
                m = pw;
                argmax = k;
            }
        }
        let mg = m.max(1e-30);
        let mut d_pn_dot_pn = 0.0; // sum_k dPn[k] * Pn[k], for the max-norm adjoint
        for k in 0..plane {
            let (r, i) = (spec.re[base + k], spec.im[base + k]);
            let (gr, gi) = (gspec.re[base + k], gspec.im[base + k]);
            let pw = r * r + i * i;
            let pn = pw / mg;
            let mv = mask_value(pn, lambda, mode, k_sharp);
            d_re[base + k] += gr * mv;
            d_im[base + k] += gi * mv;
            if mode == MaskMode::Soft {
                let dmask = gr * r + gi * i;
                let slope = k_sharp * mv * (1.0 - mv);
                let d_pn = dmask * slope;
                d_lambda -= dmask * slope;
                let d_p = d_pn / mg;
                d_re[base + k] += 2.0 * r * d_p;
                d_im[base + k] += 2.0 * i * d_p;
                d_pn_dot_pn += d_pn * pn;
            }
        }
        // Pn = P / max(P): the entry holding the max also collects
        // -sum(dPn * Pn) / max(P).
        if mode == MaskMode::Soft && m > 1e-30 {
            let (r, i) = (spec.re[base + argmax], spec.im[base + argmax]);
            let corr = -d_pn_dot_pn / mg;
            d_re[base + argmax] += 2.0 * r * corr;
            d_im[base + argmax] += 2.0 * i * corr;
        }
    }

    // VJP of the real-input forward FFT: Re(F(g_re - i*g_im)).
    let conj = Spectrum {
        shape: spec.shape,
        re: d_re,
        im: d_im.iter().map(|v| -v).collect(),
    };
    let back = fft2_complex(&conj);
    let dx = Tensor::from_vec(spec.shape, back.re)?;
    Ok((dx, d_lambda))
}

fn scan_check(
    x: &Tensor,
    a: &Tensor,
    b: &Tensor,
    c: &Tensor,
    groups: usize,
    state_dim: usize,
) -> Result<(usize, usize, usize, usize, usize)> {
    let [n, cp, h, w] = x.shape();
    if a.shape() != x.shape() {
        return Err(Error::shape(format!(
            "A shape {:?} must match X shape {:?}",
            a.shape(),
            x.shape()
        )));
    }
    let gd = groups * state_dim;
    if b.shape() != [n, gd, h, w] || c.shape() != [n, gd, h, w] {
        return Err(Error::shape(format!(
            "B/C must be [n,{},h,w], got {:?} and {:?}",
            gd,
            b.shape(),
            c.shape()
        )));
    }
    if groups == 0 || cp % groups != 0 {
        return Err(Error::shape(format!(
            "groups {} must divide state-vector channels {}",
            groups, cp
        )));
    }
    Ok((n, cp, h, w, cp / groups))
}

/// Multi-directional 2-D state-space scan.
///
/// Per direction and scan line, with per-group state `S[d][c]`:
/// `S <- A_t (.) S + B_t (x) X_t` and `Y_t = C_t^T S`; the outputs of the
/// requested directions are averaged with equal weight.
pub fn scan2d_forward(
    x: &Tensor,
    a: &Tensor,
    b: &Tensor,
    c: &Tensor,
    groups: usize,
    state_dim: usize,
    dirs: &[ScanDir],
) -> Result<Tensor> {
    let (n, cp, h, w, cpg) = scan_check(x, a, b, c, groups, state_dim)?;
    if dirs.is_empty() {
        return Err(Error::invalid("scan2d needs at least one direction"));
    }
    let d = state_dim;
    let inv = 1.0 / dirs.len() as f64;
    let mut out = Tensor::zeros([n, cp, h, w]);
    let mut state = vec![0.0; d * cpg];
    let mut bbuf = vec![0.0; d];
    let mut cbuf = vec![0.0; d];

    for &dir in dirs {
        let (line_count, line_len) = dir.lines(h, w);
        for bn in 0..n {
            for g in 0..groups {
                for line in 0..line_count {
                    state.fill(0.0);
                    for t in 0..line_len {
                        let (i, j) = dir.pos(line, t, h, w);
                        for id in 0..d {
                            bbuf[id] = b.at(bn, g * d + id, i, j);
                            cbuf[id] = c.at(bn, g * d + id, i, j);
                        }
                        for cl in 0..cpg {
                            let ch = g * cpg + cl;
                            let av = a.at(bn, ch, i, j);
                            let xv = x.at(bn, ch, i, j);
                            let mut y = 0.0;
                            for id in 0..d {
                                let s = &mut state[id * cpg + cl];
                                *s = av * *s + bbuf[id] * xv;
                                y += cbuf[id] * *s;
                            }
                            *out.at_mut(bn, ch, i, j) += y * inv;
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Adjoint of [`scan2d_forward`]: `(dX, dA, dB, dC)`.
///
/// Works line by line: the forward states of a line are recomputed and
/// stored, then a reverse pass propagates `dS_{t-1} = A_t (.) dS_t`.
#[allow(clippy::too_many_arguments)]
pub fn scan2d_backward(
    x: &Tensor,
    a: &Tensor,
    b: &Tensor,
    c: &Tensor,
    groups: usize,
    state_dim: usize,
    dirs: &[ScanDir],
    gout: &Tensor,
) -> Result<(Tensor, Tensor, Tensor, Tensor)> {
    let (n, _cp, h, w, cpg) = scan_check(x, a, b, c, groups, state_dim)?;
    if gout.shape() != x.shape() {
        return Err(Error::shape(format!(
            "cotangent shape {:?} must match X shape {:?}",
            gout.shape(),
            x.shape()
        )));
    }
    let d = state_dim;
    let inv = 1.0 / dirs.len() as f64;
    let mut dx = Tensor::zeros(x.shape());
    let mut da = Tensor::zeros(a.shape());
    let mut db = Tensor::zeros(b.shape());
    let mut dc = Tensor::zeros(c.shape());

    let state_len = d * cpg;
    let mut d_state = vec![0.0; state_len];
    let mut bbuf = vec![0.0; d];
    let mut cbuf = vec![0.0; d];
    let mut db_buf = vec![0.0; d];
    let mut dc_buf = vec![0.0; d];

    for &dir in dirs {
        let (line_count, line_len) = dir.lines(h, w);
        let mut states = vec![0.0; (line_len + 1) * state_len]; // states[0] is S_{-1} = 0
        for bn in 0..n {
            for g in 0..groups {
                for line in 0..line_count {
                    // Recompute forward states along the line.
                    states[..state_len].fill(0.0);
                    for t in 0..line_len {
                        let (i, j) = dir.pos(line, t, h, w);
                        for id in 0..d {
                            bbuf[id] = b.at(bn, g * d + id, i, j);
                        }
                        let (prev, cur) = states.split_at_mut((t + 1) * state_len);
                        let prev = &prev[t * state_len..];
                        let cur = &mut cur[..state_len];
                        for cl in 0..cpg {
                            let ch = g * cpg + cl;
                            let av = a.at(bn, ch, i, j);
                            let xv = x.at(bn, ch, i, j);
                            for id in 0..d {
                                cur[id * cpg + cl] = av * prev[id * cpg + cl] + bbuf[id] * xv;
                            }
                        }
                    }
                    // Reverse pass.
                    d_state.fill(0.0);
                    for t in (0..line_len).rev() {
                        let (i, j) = dir.pos(line, t, h, w);
                        let s_cur = &states[(t + 1) * state_len..(t + 2) * state_len];
                        let s_prev = &states[t * state_len..(t + 1) * state_len];
                        for id in 0..d {
                            bbuf[id] = b.at(bn, g * d + id, i, j);
                            cbuf[id] = c.at(bn, g * d + id, i, j);
                            db_buf[id] = 0.0;
                            dc_buf[id] = 0.0;
                        }
                        for cl in 0..cpg {
                            let ch = g * cpg + cl;
                            let gv = gout.at(bn, ch, i, j) * inv;
                            let av = a.at(bn, ch, i, j);
                            let xv = x.at(bn, ch, i, j);
                            let mut sum_da = 0.0;
                            let mut sum_dx = 0.0;
                            for id in 0..d {
                                let k = id * cpg + cl;
                                // y_t = C^T S_t
                                dc_buf[id] += gv * s_cur[k];
                                let ds = d_state[k] + cbuf[id] * gv;
                                // S_t = A (.) S_{t-1} + B (x) X
                                sum_da += ds * s_prev[k];
                                sum_dx += ds * bbuf[id];
                                db_buf[id] += ds * xv;
                                d_state[k] = ds * av;
                            }
                            *da.at_mut(bn, ch, i, j) += sum_da;
                            *dx.at_mut(bn, ch, i, j) += sum_dx;
                        }
                        for id in 0..d {
                            *db.at_mut(bn, g * d + id, i, j) += db_buf[id];
                            *dc.at_mut(bn, g * d + id, i, j) += dc_buf[id];
                        }
                    }
                }
            }
        }
    }
    Ok((dx, da, db, dc))
}

/// Shape bundle for one block.
#[derive(Debug, Clone, Copy)]
pub struct BlockDims {
    /// Input/output channel count of the block.
    pub c_in: usize,
    /// State-vector channel count (the split's X and A widths).
    pub c_prime: usize,
    pub groups: usize,
    pub state_dim: usize,
    pub mlp_hidden: usize,
    pub k_sharp: f64,
}

impl BlockDims {
    /// Channel width of the input projection: `2*C' + 2*G*d`.
    pub fn proj_width(&self) -> usize {
        2 * self.c_prime + 2 * self.groups * self.state_dim
    }
}

/// Parameter ids of one block inside a [`ParamSet`].
#[derive(Debug, Clone)]
pub struct BlockIds {
    pub norm1_gamma: ParamId,
    pub norm1_beta: ParamId,
    pub w_in: ParamId,
    pub b_in: ParamId,
    pub w_se: ParamId,
    pub b_se: ParamId,
    pub lambda_raw: ParamId,
    pub w_gate: ParamId,
    pub b_gate: ParamId,
    pub w_out: ParamId,
    pub b_out: ParamId,
    pub norm2_gamma: ParamId,
    pub norm2_beta: ParamId,
    pub mlp_w1: ParamId,
    pub mlp_b1: ParamId,
    pub mlp_w2: ParamId,
    pub mlp_b2: ParamId,
}

pub(crate) fn uniform_init(rng: &mut impl Rng, shape: [usize; 4], fan_in: usize) -> Tensor {
    let bound = (1.0 / fan_in as f64).sqrt();
    let mut t = Tensor::zeros(shape);
    for v in t.data_mut() {
        *v = rng.gen_range(-bound..bound);
    }
    t
}

impl BlockIds {
    /// Register one block's parameters. With `zero_residual` the output
    /// projection and second MLP layer start at zero, making the block an
    /// exact identity map at initialization.
    pub fn register(
        ps: &mut ParamSet,
        prefix: &str,
        dims: BlockDims,
        rng: &mut impl Rng,
        zero_residual: bool,
    ) -> BlockIds {
        let m = dims.c_in;
        let wd = dims.proj_width();
        let cp = dims.c_prime;
        let hid = dims.mlp_hidden;
        let w_out_init = if zero_residual {
            Tensor::zeros([m, cp, 1, 1])
        } else {
            uniform_init(rng, [m, cp, 1, 1], cp)
        };
        let mlp_w2_init = if zero_residual {
            Tensor::zeros([m, hid, 1, 1])
        } else {
            uniform_init(rng, [m, hid, 1, 1], hid)
        };
        BlockIds {
            norm1_gamma: ps.register(format!("{prefix}.norm1.gamma"), Tensor::filled([1, m, 1, 1], 1.0)),
            norm1_beta: ps.register(format!("{prefix}.norm1.beta"), Tensor::zeros([1, m, 1, 1])),
            w_in: ps.register(format!("{prefix}.w_in.w"), uniform_init(rng, [wd, m, 1, 1], m)),
            b_in: ps.register(format!("{prefix}.w_in.b"), Tensor::zeros([1, wd, 1, 1])),
            w_se: ps.register(format!("{prefix}.w_se.w"), uniform_init(rng, [wd, 1, 3, 3], 9)),
            b_se: ps.register(format!("{prefix}.w_se.b"), Tensor::zeros([1, wd, 1, 1])),
            lambda_raw: ps.register(format!("{prefix}.lambda_raw"), Tensor::scalar(0.0)),
            w_gate: ps.register(format!("{prefix}.w_gate.w"), uniform_init(rng, [cp, m, 1, 1], m)),
            b_gate: ps.register(format!("{prefix}.w_gate.b"), Tensor::zeros([1, cp, 1, 1])),
            w_out: ps.register(format!("{prefix}.w_out.w"), w_out_init),
            b_out: ps.register(format!("{prefix}.w_out.b"), Tensor::zeros([1, m, 1, 1])),
            norm2_gamma: ps.register(format!("{prefix}.norm2.gamma"), Tensor::filled([1, m, 1, 1], 1.0)),
            norm2_beta: ps.register(format!("{prefix}.norm2.beta"), Tensor::zeros([1, m, 1, 1])),
            mlp_w1: ps.register(format!("{prefix}.mlp.w1"), uniform_init(rng, [hid, m, 1, 1], m)),
            mlp_b1: ps.register(format!("{prefix}.mlp.b1"), Tensor::zeros([1, hid, 1, 1])),
            mlp_w2: ps.register(format!("{prefix}.mlp.w2"), mlp_w2_init),
            mlp_b2: ps.register(format!("{prefix}.mlp.b2"), Tensor::zeros([1, m, 1, 1])),
        }
    }
}

/// `L_S = SiLU(depthwise 3x3(lp))`, same shape as `lp`.
pub fn spatial_branch<O: Ops>(
    o: &mut O,
    lp: &O::V,
    w_se: &O::V,
    b_se: &O::V,
) -> Result<O::V> {
    let wd = o.shape(lp)[1];
    let conv = o.conv2d(lp, w_se, Some(b_se), ConvSpec::new(1, 1, wd, 1))?;
    o.silu(&conv)
}

/// `L_T`: frequency filter at threshold `lambda01 = sigmoid(lambda_raw)`.
pub fn freq_branch<O: Ops>(
    o: &mut O,
    lp: &O::V,
    lambda01: &O::V,
    mode: MaskMode,
    k_sharp: f64,
) -> Result<O::V> {
    o.freq_filter(lp, lambda01, mode, k_sharp)
}

/// Fuse the two branches by addition and split the channels into
/// `X:[C'], B:[G*d], C:[G*d], A:[C']`, squashing `A` through a sigmoid so
/// the scan recurrence is a contraction.
pub fn split_xbca<O: Ops>(
    o: &mut O,
    ls: &O::V,
    lt: &O::V,
    c_prime: usize,
    groups: usize,
    state_dim: usize,
) -> Result<(O::V, O::V, O::V, O::V)> {
    let fused = o.add(ls, lt)?;
    let ch = o.shape(&fused)[1];
    let gd = groups * state_dim;
    if ch != 2 * c_prime + 2 * gd {
        return Err(Error::shape(format!(
            "split expects {} channels (2*{} + 2*{}), got {}",
            2 * c_prime + 2 * gd,
            c_prime,
            gd,
            ch
        )));
    }
    let x = o.slice_channels(&fused, 0, c_prime)?;
    let b = o.slice_channels(&fused, c_prime, gd)?;
    let c = o.slice_channels(&fused, c_prime + gd, gd)?;
    let a_raw = o.slice_channels(&fused, c_prime + gd + gd, c_prime)?;
    let a = o.sigmoid(&a_raw)?;
    Ok((x, b, c, a))
}

/// Parameter handles of one block, loaded for a particular backend.
pub struct BlockLeaves<V> {
    pub norm1_gamma: V,
    pub norm1_beta: V,
    pub w_in: V,
    pub b_in: V,
    pub w_se: V,
    pub b_se: V,
    pub lambda_raw: V,
    pub w_gate: V,
    pub b_gate: V,
    pub w_out: V,
    pub b_out: V,
    pub norm2_gamma: V,
    pub norm2_beta: V,
    pub mlp_w1: V,
    pub mlp_b1: V,
    pub mlp_w2: V,
    pub mlp_b2: V,
}

impl BlockIds {
    pub fn load<O: Ops>(&self, o: &mut O, ps: &ParamSet) -> BlockLeaves<O::V> {
        BlockLeaves {
            norm1_gamma: o.load(ps, self.norm1_gamma),
            norm1_beta: o.load(ps, self.norm1_beta),
            w_in: o.load(ps, self.w_in),
            b_in: o.load(ps, self.b_in),
            w_se: o.load(ps, self.w_se),
            b_se: o.load(ps, self.b_se),
            lambda_raw: o.load(ps, self.lambda_raw),
            w_gate: o.load(ps, self.w_gate),
            b_gate: o.load(ps, self.b_gate),
            w_out: o.load(ps, self.w_out),
            b_out: o.load(ps, self.b_out),
            norm2_gamma: o.load(ps, self.norm2_gamma),
            norm2_beta: o.load(ps, self.norm2_beta),
            mlp_w1: o.load(ps, self.mlp_w1),
            mlp_b1: o.load(ps, self.mlp_b1),
            mlp_w2: o.load(ps, self.mlp_w2),
            mlp_b2: o.load(ps, self.mlp_b2),
        }
    }
}

const LN_EPS: f64 = 1e-5;

/// One full block: `l_in -> l_out`, shape preserved.
pub fn block_forward<O: Ops>(
    o: &mut O,
    l_in: &O::V,
    p: &BlockLeaves<O::V>,
    dims: BlockDims,
    mode: MaskMode,
) -> Result<O::V> {
    let u = o.layer_norm(l_in, &p.norm1_gamma, &p.norm1_beta, LN_EPS)?;
    let lp = o.conv2d(&u, &p.w_in, Some(&p.b_in), ConvSpec::default())?;
    let ls = spatial_branch(o, &lp, &p.w_se, &p.b_se)?;
    let lambda01 = o.sigmoid(&p.lambda_raw)?;
    let lt = freq_branch(o, &lp, &lambda01, mode, dims.k_sharp)?;
    let (x, b, c, a) = split_xbca(o, &ls, &lt, dims.c_prime, dims.groups, dims.state_dim)?;
    let y = o.scan2d(&x, &a, &b, &c, dims.groups, dims.state_dim, &ScanDir::ALL)?;
    let gate_lin = o.conv2d(&u, &p.w_gate, Some(&p.b_gate), ConvSpec::default())?;
    let gate = o.silu(&gate_lin)?;
    let gated = o.mul(&y, &gate)?;
    let proj = o.conv2d(&gated, &p.w_out, Some(&p.b_out), ConvSpec::default())?;
    let l_mid = o.add(l_in, &proj)?;
    let m = o.layer_norm(&l_mid, &p.norm2_gamma, &p.norm2_beta, LN_EPS)?;
    let h1 = o.conv2d(&m, &p.mlp_w1, Some(&p.mlp_b1), ConvSpec::default())?;
    let h1 = o.silu(&h1)?;
    let h2 = o.conv2d(&h1, &p.mlp_w2, Some(&p.mlp_b2), ConvSpec::default())?;
    o.add(&l_mid, &h2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Eager;

    fn seq_tensor(shape: [usize; 4], scale: f64) -> Tensor {
        let mut k = 0.0_f64;
        Tensor::from_fn(shape, |_, _, _, _| {
            k += 1.0;
            (k * 7.0).sin() * scale
        })
    }

    #[test]
    fn freq_filter_pass_all_is_identity() {
        let x = seq_tensor([1, 2, 6, 6], 1.0);
        let y = freq_filter_forward(&x, 1e-12, MaskMode::Hard, 50.0).unwrap();
        assert!(x.max_abs_diff(&y) < 1e-10);
    }

    #[test]
    fn freq_filter_lambda_one_keeps_constant_image() {
        // Only the per-channel max-power bin survives; for a constant image
        // that is DC, so the image is reproduced.
        let x = Tensor::filled([1, 1, 8, 8], 0.42);
        let y = freq_filter_forward(&x, 1.0, MaskMode::Hard, 50.0).unwrap();
        assert!(x.max_abs_diff(&y) < 1e-10);
    }

    #[test]
    fn freq_filter_rejects_bad_lambda() {
        let x = Tensor::filled([1, 1, 4, 4], 1.0);
        assert!(freq_filter_forward(&x, 0.0, MaskMode::Hard, 50.0).is_err());
        assert!(freq_filter_forward(&x, 1.5, MaskMode::Hard, 50.0).is_err());
    }

    #[test]
    fn hard_mask_is_idempotent() {
        let x = seq_tensor([1, 2, 8, 8], 1.0);
        let once = freq_filter_forward(&x, 0.3, MaskMode::Hard, 50.0).unwrap();
        let twice = freq_filter_forward(&once, 0.3, MaskMode::Hard, 50.0).unwrap();
        assert!(once.max_abs_diff(&twice) < 1e-9);
    }

    #[test]
    fn soft_and_hard_masks_agree_away_from_threshold() {
        // sigma(50 * 0.3) is within 1e-6 of the comparator.
        let x = seq_tensor([1, 1, 8, 8], 1.0);
        let lambda = 0.5;
        let spec = fft2(&x);
        let p = spec.power();
        let m = p.data().iter().fold(0.0_f64, |a, &b| a.max(b)).max(1e-30);
        for (k, &pw) in p.data().iter().enumerate() {
            let pn = pw / m;
            if (pn - lambda).abs() > 0.3 {
                let hard = mask_value(pn, lambda, MaskMode::Hard, 50.0);
                let soft = mask_value(pn, lambda, MaskMode::Soft, 50.0);
                assert!(
                    (hard - soft).abs() < 1e-6,
                    "bin {k}: hard {hard} vs soft {soft}"
                );
            }
        }
    }

    #[test]
    fn scan_memoryless_matches_pointwise_product() {
        // A = 0 -> Y_ij = C^T (B x_ij) identically for every direction.
        let n = 1;
        let (cp, g, d) = (4, 1, 2);
        let x = seq_tensor([n, cp, 3, 3], 1.0);
        let a = Tensor::zeros([n, cp, 3, 3]);
        let b = seq_tensor([n, g * d, 3, 3], 0.7);
        let c = seq_tensor([n, g * d, 3, 3], 0.9);
        for dir in ScanDir::ALL {
            let y = scan2d_forward(&x, &a, &b, &c, g, d, &[dir]).unwrap();
            for i in 0..3 {
                for j in 0..3 {
                    for cl in 0..cp {
                        let mut expect = 0.0;
                        for id in 0..d {
                            expect += c.at(0, id, i, j) * b.at(0, id, i, j) * x.at(0, cl, i, j);
                        }
                        assert!((y.at(0, cl, i, j) - expect).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn scan_single_pixel_ignores_direction() {
        let (cp, g, d) = (2, 1, 3);
        let x = seq_tensor([1, cp, 1, 1], 1.0);
        let a = seq_tensor([1, cp, 1, 1], 0.5).map(f64::abs);
        let b = seq_tensor([1, g * d, 1, 1], 0.7);
        let c = seq_tensor([1, g * d, 1, 1], 0.9);
        let full = scan2d_forward(&x, &a, &b, &c, g, d, &ScanDir::ALL).unwrap();
        let single = scan2d_forward(&x, &a, &b, &c, g, d, &[ScanDir::LeftRight]).unwrap();
        assert!(full.max_abs_diff(&single) < 1e-12);
    }

    #[test]
    fn scan_rejects_bad_divisibility() {
        let x = Tensor::zeros([1, 3, 2, 2]);
        let a = Tensor::zeros([1, 3, 2, 2]);
        let b = Tensor::zeros([1, 2, 2, 2]);
        let c = Tensor::zeros([1, 2, 2, 2]);
        assert!(scan2d_forward(&x, &a, &b, &c, 2, 1, &ScanDir::ALL).is_err());
    }

    #[test]
    fn split_roundtrip_and_sigmoid_a() {
        let mut o = Eager;
        let (cp, g, d) = (3, 1, 2);
        let ls = seq_tensor([1, 2 * cp + 2 * g * d, 2, 2], 1.0);
        let lt = Tensor::zeros(ls.shape());
        let (x, b, c, a) = split_xbca(&mut o, &ls, &lt, cp, g, d).unwrap();
        // lt = 0 so fused = ls; channels come back in order.
        assert_eq!(x, crate::tensor::slice_channels(&ls, 0, cp).unwrap());
        assert_eq!(b, crate::tensor::slice_channels(&ls, cp, g * d).unwrap());
        assert_eq!(c, crate::tensor::slice_channels(&ls, cp + g * d, g * d).unwrap());
        let a_raw = crate::tensor::slice_channels(&ls, cp + 2 * g * d, cp).unwrap();
        assert!(a.max_abs_diff(&crate::tensor::sigmoid(&a_raw)) < 1e-15);
    }

    #[test]
    fn split_a_raw_zero_gives_half() {
        let mut o = Eager;
        let (cp, g, d) = (2, 1, 1);
        let ls = Tensor::zeros([1, 2 * cp + 2 * g * d, 2, 2]);
        let lt = Tensor::zeros(ls.shape());
        let (_, _, _, a) = split_xbca(&mut o, &ls, &lt, cp, g, d).unwrap();
        assert!(a.data().iter().all(|&v| (v - 0.5).abs() < 1e-15));
    }

    #[test]
    fn block_is_identity_at_zero_residual_init() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let dims = BlockDims {
            c_in: 4,
            c_prime: 8,
            groups: 1,
            state_dim: 2,
            mlp_hidden: 8,
            k_sharp: 50.0,
        };
        let mut ps = ParamSet::new();
        let ids = BlockIds::register(&mut ps, "blk", dims, &mut rng, true);
        let mut o = Eager;
        let leaves = ids.load(&mut o, &ps);
        let l_in = seq_tensor([2, 4, 6, 6], 0.8);
        let l_out = block_forward(&mut o, &l_in, &leaves, dims, MaskMode::Soft).unwrap();
        assert!(l_in.max_abs_diff(&l_out) < 1e-12);
    }

    #[test]
    fn block_preserves_shape() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let dims = BlockDims {
            c_in: 8,
            c_prime: 16,
            groups: 2,
            state_dim: 4,
            mlp_hidden: 16,
            k_sharp: 50.0,
        };
        let mut ps = ParamSet::new();
        let ids = BlockIds::register(&mut ps, "blk", dims, &mut rng, false);
        let mut o = Eager;
        let leaves = ids.load(&mut o, &ps);
        let l_in = seq_tensor([2, 8, 6, 6], 0.5);
        let l_out = block_forward(&mut o, &l_in, &leaves, dims, MaskMode::Hard).unwrap();
        assert_eq!(l_out.shape(), [2, 8, 6, 6]);
    }
}
