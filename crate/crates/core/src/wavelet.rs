//! Learnable approximate wavelet transform.
//!
//! Two analysis vectors (low-pass `u0`, high-pass `u1`) generate the four
//! separable subband kernels LL/LH/HL/HH by outer products; analysis is a
//! grouped stride-2 convolution per band, optionally followed by a
//! residual depthwise dilated-conv enhancement (dilation 3 on the low band,
//! dilation 1 on the high bands, zero-initialized so it starts as the
//! identity). Synthesis sums the transposed convolutions of an independent
//! synthesis vector pair.
//!
//! At Haar initialization with enhancement bypassed the transform is
//! orthonormal: synthesis exactly reconstructs the input and band energies
//! sum to the input energy.

use crate::autodiff::{Ops, ParamId, ParamSet};
use crate::error::{Error, Result};
use crate::tensor::{ConvSpec, Tensor};

/// The Haar pair: `u0 = [1/sqrt2, 1/sqrt2]`, `u1 = [1/sqrt2, -1/sqrt2]`,
/// each shaped `[1,1,1,2]`.
pub fn haar_vectors() -> (Tensor, Tensor) {
    let s = std::f64::consts::FRAC_1_SQRT_2;
    let u0 = Tensor::from_vec([1, 1, 1, 2], vec![s, s]).unwrap();
    let u1 = Tensor::from_vec([1, 1, 1, 2], vec![s, -s]).unwrap();
    (u0, u1)
}

/// The four subbands of one feature map, each `[n, c, h/2, w/2]`.
#[derive(Debug, Clone)]
pub struct SubbandSet<V> {
    pub ll: V,
    pub lh: V,
    pub hl: V,
    pub hh: V,
}

impl<V> SubbandSet<V> {
    pub fn map_ref<U>(&self, mut f: impl FnMut(&V) -> U) -> SubbandSet<U> {
        SubbandSet {
            ll: f(&self.ll),
            lh: f(&self.lh),
            hl: f(&self.hl),
            hh: f(&self.hh),
        }
    }
}

/// The four derived band kernels, grouped-conv weights `[c, 1, L, L]`.
pub struct BandKernels<V> {
    pub ll: V,
    pub lh: V,
    pub hl: V,
    pub hh: V,
}

/// Rebuild the band kernels from the current vectors. `K_LL = u0 u0^T`,
/// `K_LH = u0 u1^T`, `K_HL = u1 u0^T`, `K_HH = u1 u1^T`; the row vector runs
/// down the kernel's vertical axis.
pub fn build_kernels<O: Ops>(
    o: &mut O,
    u0: &O::V,
    u1: &O::V,
    channels: usize,
) -> Result<BandKernels<O::V>> {
    Ok(BandKernels {
        ll: o.outer_kernel(u0, u0, channels)?,
        lh: o.outer_kernel(u0, u1, channels)?,
        hl: o.outer_kernel(u1, u0, channels)?,
        hh: o.outer_kernel(u1, u1, channels)?,
    })
}

/// Parameter ids of one wavelet stage.
#[derive(Debug, Clone)]
pub struct WaveletIds {
    pub u0: ParamId,
    pub u1: ParamId,
    pub s0: ParamId,
    pub s1: ParamId,
    pub dconv_ll: ParamId,
    pub dconv_lh: ParamId,
    pub dconv_hl: ParamId,
    pub dconv_hh: ParamId,
}

impl WaveletIds {
    /// Register analysis/synthesis vectors at the Haar pair (extended with
    /// zeros when `kernel_len > 2`) and zero-initialized enhancement weights.
    pub fn register(ps: &mut ParamSet, prefix: &str, channels: usize, kernel_len: usize) -> WaveletIds {
        let (h0, h1) = haar_vectors();
        let extend = |t: &Tensor| -> Tensor {
            let mut data = vec![0.0; kernel_len];
            data[..2].copy_from_slice(t.data());
            Tensor::from_vec([1, 1, 1, kernel_len], data).unwrap()
        };
        WaveletIds {
            u0: ps.register(format!("{prefix}.u0"), extend(&h0)),
            u1: ps.register(format!("{prefix}.u1"), extend(&h1)),
            s0: ps.register(format!("{prefix}.s0"), extend(&h0)),
            s1: ps.register(format!("{prefix}.s1"), extend(&h1)),
            dconv_ll: ps.register(format!("{prefix}.dconv_ll"), Tensor::zeros([channels, 1, 3, 3])),
            dconv_lh: ps.register(format!("{prefix}.dconv_lh"), Tensor::zeros([channels, 1, 3, 3])),
            dconv_hl: ps.register(format!("{prefix}.dconv_hl"), Tensor::zeros([channels, 1, 3, 3])),
            dconv_hh: ps.register(format!("{prefix}.dconv_hh"), Tensor::zeros([channels, 1, 3, 3])),
        }
    }
}

/// Loaded handles of one wavelet stage.
pub struct WaveletLeaves<V> {
    pub u0: V,
    pub u1: V,
    pub s0: V,
    pub s1: V,
    pub dconv_ll: V,
    pub dconv_lh: V,
    pub dconv_hl: V,
    pub dconv_hh: V,
}

impl WaveletIds {
    pub fn load<O: Ops>(&self, o: &mut O, ps: &ParamSet) -> WaveletLeaves<O::V> {
        WaveletLeaves {
            u0: o.load(ps, self.u0),
            u1: o.load(ps, self.u1),
            s0: o.load(ps, self.s0),
            s1: o.load(ps, self.s1),
            dconv_ll: o.load(ps, self.dconv_ll),
            dconv_lh: o.load(ps, self.dconv_lh),
            dconv_hl: o.load(ps, self.dconv_hl),
            dconv_hh: o.load(ps, self.dconv_hh),
        }
    }
}

fn band_spec(kernel_len: usize) -> Result<ConvSpec> {
    if kernel_len < 2 || kernel_len % 2 != 0 {
        return Err(Error::invalid(format!(
            "wavelet kernel length must be even and >= 2, got {kernel_len}"
        )));
    }
    Ok(ConvSpec::new(2, 1, 1, (kernel_len - 2) / 2)) // groups patched per call
}

/// Stride-2 band analysis; `enhance` adds the residual dilated depthwise
/// enhancement (identity at zero-initialized weights).
pub fn analyze<O: Ops>(
    o: &mut O,
    f: &O::V,
    p: &WaveletLeaves<O::V>,
    enhance: bool,
) -> Result<SubbandSet<O::V>> {
    let [_, c, h, w] = o.shape(f);
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::shape(format!(
            "wavelet analysis needs even spatial sizes, got {h}x{w}; pad the input first"
        )));
    }
    let kernel_len = o.shape(&p.u0)[3];
    let mut spec = band_spec(kernel_len)?;
    spec.groups = c;
    let k = build_kernels(o, &p.u0, &p.u1, c)?;
    let mut bands = SubbandSet {
        ll: o.conv2d(f, &k.ll, None, spec)?,
        lh: o.conv2d(f, &k.lh, None, spec)?,
        hl: o.conv2d(f, &k.hl, None, spec)?,
        hh: o.conv2d(f, &k.hh, None, spec)?,
    };
    if enhance {
        let lo_spec = ConvSpec::new(1, 3, c, 3);
        let hi_spec = ConvSpec::new(1, 1, c, 1);
        let residual = |o: &mut O, band: &O::V, wgt: &O::V, s: ConvSpec| -> Result<O::V> {
            let d = o.conv2d(band, wgt, None, s)?;
            o.add(band, &d)
        };
        bands = SubbandSet {
            ll: residual(o, &bands.ll, &p.dconv_ll, lo_spec)?,
            lh: residual(o, &bands.lh, &p.dconv_lh, hi_spec)?,
            hl: residual(o, &bands.hl, &p.dconv_hl, hi_spec)?,
            hh: residual(o, &bands.hh, &p.dconv_hh, hi_spec)?,
        };
    }
    Ok(bands)
}

/// Recoupling: sum of stride-2 transposed convolutions with the synthesis
/// kernels. With synthesis vectors equal to the Haar analysis pair and
/// enhancement off, `synthesize(analyze(f)) == f`.
pub fn synthesize<O: Ops>(o: &mut O, s: &SubbandSet<O::V>, p: &WaveletLeaves<O::V>) -> Result<O::V> {
    let shape = o.shape(&s.ll);
    for (name, band) in [("lh", &s.lh), ("hl", &s.hl), ("hh", &s.hh)] {
        if o.shape(band) != shape {
            return Err(Error::shape(format!(
                "subband {name} has shape {:?}, expected {:?}",
                o.shape(band),
                shape
            )));
        }
    }
    let c = shape[1];
    let kernel_len = o.shape(&p.s0)[3];
    let mut spec = band_spec(kernel_len)?;
    spec.groups = c;
    let k = build_kernels(o, &p.s0, &p.s1, c)?;
    let r_ll = o.conv_transpose2d(&s.ll, &k.ll, spec)?;
    let r_lh = o.conv_transpose2d(&s.lh, &k.lh, spec)?;
    let r_hl = o.conv_transpose2d(&s.hl, &k.hl, spec)?;
    let r_hh = o.conv_transpose2d(&s.hh, &k.hh, spec)?;
    let a = o.add(&r_ll, &r_lh)?;
    let b = o.add(&r_hl, &r_hh)?;
    o.add(&a, &b)
}
