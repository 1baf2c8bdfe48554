//! 2-D Fourier transforms on NCHW tensors.
//!
//! Scaling convention: **unitary** — both directions carry a `1/sqrt(h*w)`
//! factor, so `ifft2(fft2(x)) == x` and Parseval holds exactly as
//! `sum(x^2) == sum(re^2 + im^2)`. A constant image of value `c` on an
//! `h x w` grid therefore has a single DC bin of value `c*sqrt(h*w)`.
//!
//! The per-axis transforms come from `rustfft`, which is radix-agnostic
//! (mixed radix with Bluestein for prime sizes), so arbitrary spatial sizes
//! are handled without pad-and-crop aliasing.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

/// Complex spectrum of a 4-D tensor stored as paired real/imaginary planes.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum {
    pub shape: [usize; 4],
    pub re: Vec<f64>,
    pub im: Vec<f64>,
}

impl Spectrum {
    pub fn zeros(shape: [usize; 4]) -> Spectrum {
        let len = shape.iter().product();
        Spectrum {
            shape,
            re: vec![0.0; len],
            im: vec![0.0; len],
        }
    }

    pub fn len(&self) -> usize {
        self.re.len()
    }

    pub fn is_empty(&self) -> bool {
        self.re.is_empty()
    }

    /// Power per bin `re^2 + im^2`, as a tensor.
    pub fn power(&self) -> Tensor {
        let data: Vec<f64> = self
            .re
            .iter()
            .zip(&self.im)
            .map(|(r, i)| r * r + i * i)
            .collect();
        Tensor::from_vec(self.shape, data).expect("power preserves length")
    }
}

/// Direction tag for the complex transform.
#[derive(Clone, Copy, PartialEq, Eq)]
enum Dir {
    Forward,
    Inverse,
}

/// Unitary 2-D FFT applied plane-by-plane over `[n, c]`.
fn transform2d(re: &[f64], im: &[f64], shape: [usize; 4], dir: Dir) -> (Vec<f64>, Vec<f64>) {
    let [n, c, h, w] = shape;
    let mut planner = FftPlanner::<f64>::new();
    let fft_w = match dir {
        Dir::Forward => planner.plan_fft_forward(w),
        Dir::Inverse => planner.plan_fft_inverse(w),
    };
    let fft_h = match dir {
        Dir::Forward => planner.plan_fft_forward(h),
        Dir::Inverse => planner.plan_fft_inverse(h),
    };
    let norm = 1.0 / ((h * w) as f64).sqrt();
    let plane = h * w;
    let mut out_re = vec![0.0; re.len()];
    let mut out_im = vec![0.0; im.len()];
    let mut row = vec![Complex64::new(0.0, 0.0); w];
    let mut col = vec![Complex64::new(0.0, 0.0); h];
    let mut buf = vec![Complex64::new(0.0, 0.0); plane];

    for p in 0..n * c {
        let base = p * plane;
        for i in 0..h {
            for j in 0..w {
                row[j] = Complex64::new(re[base + i * w + j], im[base + i * w + j]);
            }
            fft_w.process(&mut row);
            buf[i * w..(i + 1) * w].copy_from_slice(&row);
        }
        for j in 0..w {
            for i in 0..h {
                col[i] = buf[i * w + j];
            }
            fft_h.process(&mut col);
            for i in 0..h {
                out_re[base + i * w + j] = col[i].re * norm;
                out_im[base + i * w + j] = col[i].im * norm;
            }
        }
    }
    (out_re, out_im)
}

/// Forward unitary 2-D FFT of a real tensor.
pub fn fft2(x: &Tensor) -> Spectrum {
    let zeros = vec![0.0; x.len()];
    let (re, im) = transform2d(x.data(), &zeros, x.shape(), Dir::Forward);
    Spectrum {
        shape: x.shape(),
        re,
        im,
    }
}

/// Inverse unitary 2-D FFT returning the real part; errors if the imaginary
/// residue is not negligible relative to the real part.
pub fn ifft2(s: &Spectrum) -> Result<Tensor> {
    let (re, im) = transform2d(&s.re, &s.im, s.shape, Dir::Inverse);
    let max_re = re.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    let max_im = im.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    if max_im > 1e-8 * max_re.max(1.0) {
        return Err(Error::numeric(format!(
            "ifft2 imaginary residue {:.3e} exceeds 1e-8 of real magnitude {:.3e}; \
             spectrum is not conjugate-symmetric",
            max_im, max_re
        )));
    }
    Tensor::from_vec(s.shape, re)
}

/// Complex-to-complex forward transform (unitary).
pub fn fft2_complex(s: &Spectrum) -> Spectrum {
    let (re, im) = transform2d(&s.re, &s.im, s.shape, Dir::Forward);
    Spectrum {
        shape: s.shape,
        re,
        im,
    }
}

/// Complex-to-complex inverse transform (unitary).
pub fn ifft2_complex(s: &Spectrum) -> Spectrum {
    let (re, im) = transform2d(&s.re, &s.im, s.shape, Dir::Inverse);
    Spectrum {
        shape: s.shape,
        re,
        im,
    }
}
