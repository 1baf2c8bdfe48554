//! Training losses: structural similarity, texture (Sobel-gradient) and
//! intensity terms, combined as `mu1*L_ssim + mu2*L_text + mu3*L_int`.
//!
//! Every loss is written against [`Ops`], so the same code produces plain
//! numbers eagerly and gradients on the tape.

use crate::autodiff::{Eager, Ops};
use crate::error::{Error, Result};
use crate::tensor::{ConvSpec, Tensor};

/// How the two sources are aggregated in the intensity target.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Aggregate {
    /// Elementwise maximum (infrared-visible, multi-focus, medical fusion).
    Max,
    /// Elementwise mean (multi-exposure fusion).
    Mean,
}

impl std::fmt::Display for Aggregate {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Aggregate::Max => write!(f, "max"),
            Aggregate::Mean => write!(f, "mean"),
        }
    }
}

impl std::str::FromStr for Aggregate {
    type Err = Error;
    fn from_str(s: &str) -> Result<Aggregate> {
        match s {
            "max" => Ok(Aggregate::Max),
            "mean" => Ok(Aggregate::Mean),
            other => Err(Error::invalid(format!(
                "aggregation must be 'max' or 'mean', got {other:?}"
            ))),
        }
    }
}

/// Loss weights; defaults are `mu1 = 10`, `mu2 = mu3 = 20`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub mu1: f64,
    pub mu2: f64,
    pub mu3: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            mu1: 10.0,
            mu2: 20.0,
            mu3: 20.0,
        }
    }
}

/// Per-step loss values.
#[derive(Debug, Clone, Copy)]
pub struct LossReport {
    pub l_ssim: f64,
    pub l_text: f64,
    pub l_int: f64,
    pub l_total: f64,
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

/// Normalized 11x11 Gaussian window, sigma 1.5, shape `[1,1,11,11]`.
pub fn gaussian_window() -> Tensor {
    let n = SSIM_WINDOW;
    let half = (n - 1) as f64 / 2.0;
    let mut data = vec![0.0; n * n];
    let mut sum = 0.0;
    for i in 0..n {
        for j in 0..n {
            let di = i as f64 - half;
            let dj = j as f64 - half;
            let v = (-(di * di + dj * dj) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
            data[i * n + j] = v;
            sum += v;
        }
    }
    for v in &mut data {
        *v /= sum;
    }
    Tensor::from_vec([1, 1, n, n], data).unwrap()
}

fn check_pair<O: Ops>(o: &O, x: &O::V, y: &O::V, what: &str) -> Result<()> {
    let sx = o.shape(x);
    let sy = o.shape(y);
    if sx != sy {
        return Err(Error::shape(format!(
            "{what}: shapes {sx:?} and {sy:?} differ"
        )));
    }
    if sx[1] != 1 {
        return Err(Error::shape(format!(
            "{what}: expected single-channel input, got {} channels",
            sx[1]
        )));
    }
    if sx[2] < SSIM_WINDOW || sx[3] < SSIM_WINDOW {
        return Err(Error::shape(format!(
            "{what}: image {}x{} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window",
            sx[2], sx[3]
        )));
    }
    Ok(())
}

/// Mean local SSIM over the valid region (no padding), dynamic range 1.
pub fn ssim_index<O: Ops>(o: &mut O, x: &O::V, y: &O::V) -> Result<O::V> {
    check_pair(o, x, y, "ssim_index")?;
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let w = o.lift(gaussian_window());
    let spec = ConvSpec::default();
    let mu_x = o.conv2d(x, &w, None, spec)?;
    let mu_y = o.conv2d(y, &w, None, spec)?;
    let xx = o.mul(x, x)?;
    let yy = o.mul(y, y)?;
    let xy = o.mul(x, y)?;
    let mu_xx = o.mul(&mu_x, &mu_x)?;
    let mu_yy = o.mul(&mu_y, &mu_y)?;
    let mu_xy = o.mul(&mu_x, &mu_y)?;
    let e_xx = o.conv2d(&xx, &w, None, spec)?;
    let e_yy = o.conv2d(&yy, &w, None, spec)?;
    let e_xy = o.conv2d(&xy, &w, None, spec)?;
    let var_x = o.sub(&e_xx, &mu_xx)?;
    let var_y = o.sub(&e_yy, &mu_yy)?;
    let cov = o.sub(&e_xy, &mu_xy)?;

    let lum = {
        let t = o.scale(&mu_xy, 2.0)?;
        o.add_scalar(&t, c1)?
    };
    let con = {
        let t = o.scale(&cov, 2.0)?;
        o.add_scalar(&t, c2)?
    };
    let num = o.mul(&lum, &con)?;
    let d1 = {
        let t = o.add(&mu_xx, &mu_yy)?;
        o.add_scalar(&t, c1)?
    };
    let d2 = {
        let t = o.add(&var_x, &var_y)?;
        o.add_scalar(&t, c2)?
    };
    let den = o.mul(&d1, &d2)?;
    let map = o.div(&num, &den)?;
    o.mean_all(&map)
}

/// `(1 - SSIM(f, i1)) + (1 - SSIM(f, i2))`, range [0, 4].
pub fn loss_ssim<O: Ops>(o: &mut O, f: &O::V, i1: &O::V, i2: &O::V) -> Result<O::V> {
    let s1 = ssim_index(o, f, i1)?;
    let s2 = ssim_index(o, f, i2)?;
    let sum = o.add(&s1, &s2)?;
    let neg = o.scale(&sum, -1.0)?;
    o.add_scalar(&neg, 2.0)
}

/// Corner-smoothing half-width of the texture magnitude. The exact
/// `sqrt(gx^2+gy^2)` has unbounded curvature at flat pixels, which defeats
/// finite-difference validation of the training gradient; the surrogate
/// `sqrt(gx^2+gy^2+eps^2) - eps` is zero at zero, within `eps` of the exact
/// magnitude everywhere, and fully smooth (the same approach as the soft
/// frequency mask).
pub const TEXTURE_SMOOTH_EPS: f64 = 1e-3;

/// Differentiable Sobel gradient magnitude (replicate padding,
/// corner-smoothed by [`TEXTURE_SMOOTH_EPS`]).
pub fn sobel_magnitude<O: Ops>(o: &mut O, x: &O::V) -> Result<O::V> {
    let (kx, ky) = crate::tensor::sobel_kernels();
    let kx = o.lift(kx);
    let ky = o.lift(ky);
    let padded = o.replicate_pad(x, 1)?;
    let gx = o.conv2d(&padded, &kx, None, ConvSpec::default())?;
    let gy = o.conv2d(&padded, &ky, None, ConvSpec::default())?;
    let gx2 = o.mul(&gx, &gx)?;
    let gy2 = o.mul(&gy, &gy)?;
    let sum = o.add(&gx2, &gy2)?;
    let shifted = o.add_scalar(&sum, TEXTURE_SMOOTH_EPS * TEXTURE_SMOOTH_EPS)?;
    let root = o.sqrt(&shifted)?;
    o.add_scalar(&root, -TEXTURE_SMOOTH_EPS)
}

/// Mean L1 distance between the fused gradient magnitude and the pixelwise
/// maximum of the source gradient magnitudes.
pub fn loss_text<O: Ops>(o: &mut O, f: &O::V, i1: &O::V, i2: &O::V) -> Result<O::V> {
    let gf = sobel_magnitude(o, f)?;
    let g1 = sobel_magnitude(o, i1)?;
    let g2 = sobel_magnitude(o, i2)?;
    let target = o.maximum(&g1, &g2)?;
    let diff = o.sub(&gf, &target)?;
    let a = o.abs(&diff)?;
    o.mean_all(&a)
}

/// Mean L1 distance between the fused image and the aggregated sources.
pub fn loss_int<O: Ops>(
    o: &mut O,
    f: &O::V,
    i1: &O::V,
    i2: &O::V,
    mode: Aggregate,
) -> Result<O::V> {
    let target = match mode {
        Aggregate::Max => o.maximum(i1, i2)?,
        Aggregate::Mean => {
            let s = o.add(i1, i2)?;
            o.scale(&s, 0.5)?
        }
    };
    let diff = o.sub(f, &target)?;
    let a = o.abs(&diff)?;
    o.mean_all(&a)
}

/// Weighted total loss; returns the scalar handle plus the report of the
/// individual terms.
pub fn total_loss<O: Ops>(
    o: &mut O,
    f: &O::V,
    i1: &O::V,
    i2: &O::V,
    weights: LossWeights,
    mode: Aggregate,
) -> Result<(O::V, LossReport)> {
    let ls = loss_ssim(o, f, i1, i2)?;
    let lt = loss_text(o, f, i1, i2)?;
    let li = loss_int(o, f, i1, i2, mode)?;
    let ws = o.scale(&ls, weights.mu1)?;
    let wt = o.scale(&lt, weights.mu2)?;
    let wi = o.scale(&li, weights.mu3)?;
    let partial = o.add(&ws, &wt)?;
    let total = o.add(&partial, &wi)?;
    let report = LossReport {
        l_ssim: o.tensor(&ls).scalar_value()?,
        l_text: o.tensor(&lt).scalar_value()?,
        l_int: o.tensor(&li).scalar_value()?,
        l_total: o.tensor(&total).scalar_value()?,
    };
    Ok((total, report))
}

/// Eager convenience wrapper around [`ssim_index`].
pub fn ssim_index_value(x: &Tensor, y: &Tensor) -> Result<f64> {
    let mut o = Eager;
    let x = x.clone();
    let y = y.clone();
    let s = ssim_index(&mut o, &x, &y)?;
    s.scalar_value()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn textured(shape: [usize; 4], seed: u64) -> Tensor {
        let mut state = seed.wrapping_mul(2654435761).wrapping_add(1);
        Tensor::from_fn(shape, |_, _, _, _| {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((state >> 33) as f64) / (u32::MAX as f64 * 2.0)
        })
    }

    #[test]
    fn ssim_self_is_one() {
        let x = textured([1, 1, 16, 16], 3);
        let s = ssim_index_value(&x, &x).unwrap();
        assert!((s - 1.0).abs() < 1e-12, "ssim(x,x) = {s}");
    }

    #[test]
    fn ssim_constant_pair_closed_form() {
        let (a, b) = (0.3, 0.8);
        let x = Tensor::filled([1, 1, 12, 12], a);
        let y = Tensor::filled([1, 1, 12, 12], b);
        let c1 = SSIM_K1 * SSIM_K1;
        let expect = (2.0 * a * b + c1) / (a * a + b * b + c1);
        let s = ssim_index_value(&x, &y).unwrap();
        assert!((s - expect).abs() < 1e-10, "got {s}, want {expect}");
    }

    #[test]
    fn ssim_anticorrelated_checkerboard_is_negative() {
        let x = Tensor::from_fn([1, 1, 16, 16], |_, _, i, j| ((i + j) % 2) as f64);
        let y = x.map(|v| 1.0 - v);
        let s = ssim_index_value(&x, &y).unwrap();
        assert!(s < 0.0, "ssim = {s}");
    }

    #[test]
    fn ssim_rejects_mismatched_shapes() {
        let x = Tensor::zeros([1, 1, 16, 16]);
        let y = Tensor::zeros([1, 1, 12, 16]);
        assert!(ssim_index_value(&x, &y).is_err());
    }

    #[test]
    fn loss_ssim_zero_when_identical() {
        let mut o = Eager;
        let x = textured([1, 1, 16, 16], 5);
        let l = loss_ssim(&mut o, &x, &x, &x).unwrap().scalar_value().unwrap();
        assert!(l.abs() < 1e-12);
    }

    #[test]
    fn loss_ssim_substitution_case() {
        // f = i1 != i2 reduces to 1 - SSIM(i1, i2).
        let mut o = Eager;
        let i1 = textured([1, 1, 16, 16], 7);
        let i2 = textured([1, 1, 16, 16], 9);
        let l = loss_ssim(&mut o, &i1, &i1, &i2).unwrap().scalar_value().unwrap();
        let s12 = ssim_index_value(&i1, &i2).unwrap();
        assert!((l - (1.0 - s12)).abs() < 1e-12);
    }

    #[test]
    fn loss_text_zero_cases() {
        let mut o = Eager;
        // Gradient of f already equals the max of the source gradients.
        let i1 = textured([1, 1, 16, 16], 11);
        let l = loss_text(&mut o, &i1, &i1, &i1).unwrap().scalar_value().unwrap();
        assert!(l.abs() < 1e-12);
        // All-constant images have zero gradients everywhere.
        let c = Tensor::filled([1, 1, 16, 16], 0.5);
        let l = loss_text(&mut o, &c, &c, &c).unwrap().scalar_value().unwrap();
        assert!(l.abs() < 1e-12);
    }

    #[test]
    fn loss_int_examples() {
        let mut o = Eager;
        let i1 = textured([1, 1, 16, 16], 13);
        let i2 = textured([1, 1, 16, 16], 17);
        let fmax = crate::tensor::maximum(&i1, &i2).unwrap();
        let l = loss_int(&mut o, &fmax, &i1, &i2, Aggregate::Max)
            .unwrap()
            .scalar_value()
            .unwrap();
        assert!(l.abs() < 1e-15);
        let zero = Tensor::zeros([1, 1, 16, 16]);
        let one = Tensor::filled([1, 1, 16, 16], 1.0);
        let l = loss_int(&mut o, &zero, &one, &one, Aggregate::Max)
            .unwrap()
            .scalar_value()
            .unwrap();
        assert!((l - 1.0).abs() < 1e-15);
        // Mean mode hand case: i1 = 0.2, i2 = 0.6, f = 0.3 -> |0.3 - 0.4| = 0.1.
        let a = Tensor::filled([1, 1, 16, 16], 0.2);
        let b = Tensor::filled([1, 1, 16, 16], 0.6);
        let f = Tensor::filled([1, 1, 16, 16], 0.3);
        let l = loss_int(&mut o, &f, &a, &b, Aggregate::Mean)
            .unwrap()
            .scalar_value()
            .unwrap();
        assert!((l - 0.1).abs() < 1e-12);
    }

    #[test]
    fn total_is_exact_weighted_sum() {
        let mut o = Eager;
        let f = textured([1, 1, 16, 16], 19);
        let i1 = textured([1, 1, 16, 16], 23);
        let i2 = textured([1, 1, 16, 16], 29);
        let w = LossWeights::default();
        let (_, r) = total_loss(&mut o, &f, &i1, &i2, w, Aggregate::Max).unwrap();
        let expect = w.mu1 * r.l_ssim + w.mu2 * r.l_text + w.mu3 * r.l_int;
        assert!((r.l_total - expect).abs() < 1e-12);
        assert!(r.l_ssim >= 0.0 && r.l_text >= 0.0 && r.l_int >= 0.0);
    }

    #[test]
    fn losses_are_symmetric_in_sources() {
        let mut o = Eager;
        let f = textured([1, 1, 16, 16], 31);
        let i1 = textured([1, 1, 16, 16], 37);
        let i2 = textured([1, 1, 16, 16], 41);
        for mode in [Aggregate::Max, Aggregate::Mean] {
            let (_, r12) = total_loss(&mut o, &f, &i1, &i2, LossWeights::default(), mode).unwrap();
            let (_, r21) = total_loss(&mut o, &f, &i2, &i1, LossWeights::default(), mode).unwrap();
            assert!((r12.l_total - r21.l_total).abs() < 1e-12);
        }
    }
}
