//! Independent reference implementations (oracles) shared by the
//! integration suites. These deliberately avoid the library's kernel code
//! paths: convolutions materialize an explicitly padded buffer, the DFT is
//! the O(N^2) textbook sum, and the scan is a direct per-position
//! recurrence over nested vectors.

#![allow(dead_code)]

pub mod fixtures;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sfusion::ssd::ScanDir;
use sfusion::tensor::{ConvSpec, Tensor};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: [usize; 4], lo: f64, hi: f64) -> Tensor {
    let mut t = Tensor::zeros(shape);
    for v in t.data_mut() {
        *v = rng.gen_range(lo..hi);
    }
    t
}

/// Brute-force conv2d: explicit zero-padded copy, then plain nested loops.
pub fn reference_conv2d(
    x: &Tensor,
    w: &Tensor,
    bias: Option<&Tensor>,
    spec: ConvSpec,
) -> Tensor {
    let [n, c_in, h, wd] = x.shape();
    let [c_out, c_in_g, k, _] = w.shape();
    let (ph, pw) = (h + 2 * spec.pad, wd + 2 * spec.pad);
    let mut padded = vec![0.0; n * c_in * ph * pw];
    for b in 0..n {
        for c in 0..c_in {
            for i in 0..h {
                for j in 0..wd {
                    padded[((b * c_in + c) * ph + i + spec.pad) * pw + j + spec.pad] =
                        x.at(b, c, i, j);
                }
            }
        }
    }
    let oh = (ph - spec.dilation * (k - 1) - 1) / spec.stride + 1;
    let ow = (pw - spec.dilation * (k - 1) - 1) / spec.stride + 1;
    let c_out_g = c_out / spec.groups;
    let mut out = Tensor::zeros([n, c_out, oh, ow]);
    for b in 0..n {
        for oc in 0..c_out {
            let g = oc / c_out_g;
            for oi in 0..oh {
                for oj in 0..ow {
                    let mut acc = match bias {
                        Some(bt) => bt.data()[oc],
                        None => 0.0,
                    };
                    for icl in 0..c_in_g {
                        let ic = g * c_in_g + icl;
                        for ki in 0..k {
                            for kj in 0..k {
                                let pi = oi * spec.stride + ki * spec.dilation;
                                let pj = oj * spec.stride + kj * spec.dilation;
                                acc += padded[((b * c_in + ic) * ph + pi) * pw + pj]
                                    * w.at(oc, icl, ki, kj);
                            }
                        }
                    }
                    *out.at_mut(b, oc, oi, oj) = acc;
                }
            }
        }
    }
    out
}

/// Brute-force transposed convolution by scattering into a padded buffer
/// and cropping, mirroring the adjoint definition directly.
pub fn reference_conv_transpose2d(y: &Tensor, w: &Tensor, spec: ConvSpec) -> Tensor {
    let [n, c_out, oh, ow] = y.shape();
    let [_, c_in_g, k, _] = w.shape();
    let c_in = c_in_g * spec.groups;
    let c_out_g = c_out / spec.groups;
    // Scatter in padded coordinates, then crop the pad ring.
    let ph = (oh - 1) * spec.stride + spec.dilation * (k - 1) + 1;
    let pw = (ow - 1) * spec.stride + spec.dilation * (k - 1) + 1;
    let mut buf = vec![0.0; n * c_in * ph * pw];
    for b in 0..n {
        for oc in 0..c_out {
            let g = oc / c_out_g;
            for oi in 0..oh {
                for oj in 0..ow {
                    for icl in 0..c_in_g {
                        let ic = g * c_in_g + icl;
                        for ki in 0..k {
                            for kj in 0..k {
                                let pi = oi * spec.stride + ki * spec.dilation;
                                let pj = oj * spec.stride + kj * spec.dilation;
                                buf[((b * c_in + ic) * ph + pi) * pw + pj] +=
                                    y.at(b, oc, oi, oj) * w.at(oc, icl, ki, kj);
                            }
                        }
                    }
                }
            }
        }
    }
    let h = ph - 2 * spec.pad;
    let wd = pw - 2 * spec.pad;
    let mut out = Tensor::zeros([n, c_in, h, wd]);
    for b in 0..n {
        for c in 0..c_in {
            for i in 0..h {
                for j in 0..wd {
                    *out.at_mut(b, c, i, j) =
                        buf[((b * c_in + c) * ph + i + spec.pad) * pw + j + spec.pad];
                }
            }
        }
    }
    out
}

/// Textbook O(N^2) 2-D DFT with unitary scaling, per `[n,c]` plane.
pub fn naive_dft2(x: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let [n, c, h, w] = x.shape();
    let norm = 1.0 / ((h * w) as f64).sqrt();
    let mut re = vec![0.0; x.len()];
    let mut im = vec![0.0; x.len()];
    for b in 0..n {
        for ch in 0..c {
            for u in 0..h {
                for v in 0..w {
                    let mut sr = 0.0;
                    let mut si = 0.0;
                    for i in 0..h {
                        for j in 0..w {
                            let ang = -std::f64::consts::TAU
                                * (u as f64 * i as f64 / h as f64
                                    + v as f64 * j as f64 / w as f64);
                            sr += x.at(b, ch, i, j) * ang.cos();
                            si += x.at(b, ch, i, j) * ang.sin();
                        }
                    }
                    let idx = ((b * c + ch) * h + u) * w + v;
                    re[idx] = sr * norm;
                    im[idx] = si * norm;
                }
            }
        }
    }
    (re, im)
}

/// Direct per-position recurrence oracle for one scan direction.
pub fn naive_scan(
    x: &Tensor,
    a: &Tensor,
    b: &Tensor,
    c: &Tensor,
    groups: usize,
    d: usize,
    dir: ScanDir,
) -> Tensor {
    let [n, cp, h, w] = x.shape();
    let cpg = cp / groups;
    let mut out = Tensor::zeros([n, cp, h, w]);
    let positions: Vec<Vec<(usize, usize)>> = match dir {
        ScanDir::LeftRight => (0..h)
            .map(|i| (0..w).map(|j| (i, j)).collect())
            .collect(),
        ScanDir::RightLeft => (0..h)
            .map(|i| (0..w).rev().map(|j| (i, j)).collect())
            .collect(),
        ScanDir::TopBottom => (0..w)
            .map(|j| (0..h).map(|i| (i, j)).collect())
            .collect(),
        ScanDir::BottomTop => (0..w)
            .map(|j| (0..h).rev().map(|i| (i, j)).collect())
            .collect(),
    };
    for bn in 0..n {
        for g in 0..groups {
            for line in &positions {
                let mut state = vec![vec![0.0f64; cpg]; d];
                for &(i, j) in line {
                    for id in 0..d {
                        for cl in 0..cpg {
                            let ch = g * cpg + cl;
                            state[id][cl] = a.at(bn, ch, i, j) * state[id][cl]
                                + b.at(bn, g * d + id, i, j) * x.at(bn, ch, i, j);
                        }
                    }
                    for cl in 0..cpg {
                        let ch = g * cpg + cl;
                        let mut y = 0.0;
                        for id in 0..d {
                            y += c.at(bn, g * d + id, i, j) * state[id][cl];
                        }
                        *out.at_mut(bn, ch, i, j) = y;
                    }
                }
            }
        }
    }
    out
}

pub fn inner_product(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}
