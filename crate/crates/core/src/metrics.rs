//! Fusion-quality metrics: entropy, standard deviation, spatial frequency,
//! mutual information, sum of difference correlation, gradient-based edge
//! preservation (Qabf) and the two-source SSIM sum.
//!
//! Histogram-based metrics operate on the 8-bit quantization
//! `round(255 * clamp(x, 0, 1))`; SSIM runs on the float images directly.
//! Conventions worth knowing:
//!  - spatial frequency uses interior first differences (RMS over the
//!    `h*(w-1)` horizontal and `(h-1)*w` vertical pairs);
//!  - SCD treats a zero-variance operand as contributing 0;
//!  - Qabf maps relative gradient strength/orientation through the usual
//!    sigmoids (kg=-15, sg=0.5; ka=-22, sa=0.8), each normalized by its
//!    value at perfect preservation (0.9994 and 0.9879 to four places), so
//!    a perfectly preserved edge scores exactly 1; pixels where the fused
//!    gradient vanishes score 0.

use crate::error::{Error, Result};
use crate::losses::ssim_index_value;
use crate::tensor::Tensor;

/// Per-image metric row.
#[derive(Debug, Clone, Copy)]
pub struct MetricReport {
    pub en: f64,
    pub sd: f64,
    pub sf: f64,
    pub mi: f64,
    pub scd: f64,
    pub qabf: f64,
    pub ssim: f64,
}

impl MetricReport {
    pub const CSV_HEADER: &'static str = "file,en,sd,sf,mi,scd,qabf,ssim";

    pub fn csv_row(&self, label: &str) -> String {
        format!(
            "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
            label, self.en, self.sd, self.sf, self.mi, self.scd, self.qabf, self.ssim
        )
    }
}

fn single_plane(x: &Tensor, what: &str) -> Result<(usize, usize)> {
    let [n, c, h, w] = x.shape();
    if n != 1 || c != 1 {
        return Err(Error::shape(format!(
            "{what} expects a single [1,1,h,w] image, got {:?}",
            x.shape()
        )));
    }
    Ok((h, w))
}

/// 8-bit quantization used by the histogram metrics.
pub fn quantize(x: &Tensor) -> Vec<u8> {
    x.data()
        .iter()
        .map(|&v| (255.0 * v.clamp(0.0, 1.0)).round() as u8)
        .collect()
}

fn histogram(q: &[u8]) -> [f64; 256] {
    let mut h = [0.0; 256];
    for &v in q {
        h[v as usize] += 1.0;
    }
    let n = q.len() as f64;
    for b in &mut h {
        *b /= n;
    }
    h
}

/// Shannon entropy (bits) of the 256-bin histogram.
pub fn entropy(x: &Tensor) -> Result<f64> {
    single_plane(x, "entropy")?;
    let hist = histogram(&quantize(x));
    Ok(hist
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| -p * p.log2())
        .sum())
}

/// Population standard deviation of the 8-bit values.
pub fn std_dev(x: &Tensor) -> Result<f64> {
    single_plane(x, "std_dev")?;
    let q = quantize(x);
    let n = q.len() as f64;
    let mean: f64 = q.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var: f64 = q.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
    Ok(var.sqrt())
}

/// `sqrt(RF^2 + CF^2)` of the 8-bit values over interior differences.
pub fn spatial_frequency(x: &Tensor) -> Result<f64> {
    let (h, w) = single_plane(x, "spatial_frequency")?;
    if h < 2 || w < 2 {
        return Err(Error::shape("spatial_frequency needs at least 2x2".to_string()));
    }
    let q = quantize(x);
    let at = |i: usize, j: usize| q[i * w + j] as f64;
    let mut rf = 0.0;
    for i in 0..h {
        for j in 1..w {
            rf += (at(i, j) - at(i, j - 1)).powi(2);
        }
    }
    rf = (rf / (h * (w - 1)) as f64).sqrt();
    let mut cf = 0.0;
    for i in 1..h {
        for j in 0..w {
            cf += (at(i, j) - at(i - 1, j)).powi(2);
        }
    }
    cf = (cf / ((h - 1) * w) as f64).sqrt();
    Ok(rf.hypot(cf))
}

/// Mutual information (bits) between two images from the 256x256 joint
/// histogram.
pub fn mi_pair(x: &Tensor, y: &Tensor) -> Result<f64> {
    single_plane(x, "mutual_information")?;
    if x.shape() != y.shape() {
        return Err(Error::shape(format!(
            "mutual_information: shapes {:?} and {:?} differ",
            x.shape(),
            y.shape()
        )));
    }
    let qx = quantize(x);
    let qy = quantize(y);
    let n = qx.len() as f64;
    let mut joint = vec![0.0f64; 256 * 256];
    for (&a, &b) in qx.iter().zip(&qy) {
        joint[a as usize * 256 + b as usize] += 1.0;
    }
    let hx = histogram(&qx);
    let hy = histogram(&qy);
    let mut mi = 0.0;
    for a in 0..256 {
        if hx[a] == 0.0 {
            continue;
        }
        for b in 0..256 {
            let p = joint[a * 256 + b] / n;
            if p > 0.0 {
                mi += p * (p / (hx[a] * hy[b])).log2();
            }
        }
    }
    Ok(mi)
}

/// `MI(f,a) + MI(f,b)`.
pub fn mutual_information(f: &Tensor, a: &Tensor, b: &Tensor) -> Result<f64> {
    Ok(mi_pair(f, a)? + mi_pair(f, b)?)
}

fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for (&a, &b) in x.iter().zip(y) {
        cov += (a - mx) * (b - my);
        vx += (a - mx) * (a - mx);
        vy += (b - my) * (b - my);
    }
    if vx == 0.0 || vy == 0.0 {
        return 0.0; // zero-variance convention
    }
    cov / (vx.sqrt() * vy.sqrt())
}

/// Sum of difference correlation: `corr(f-b, a) + corr(f-a, b)`.
pub fn scd(f: &Tensor, a: &Tensor, b: &Tensor) -> Result<f64> {
    single_plane(f, "scd")?;
    if f.shape() != a.shape() || f.shape() != b.shape() {
        return Err(Error::shape("scd: image shapes differ".to_string()));
    }
    let qf: Vec<f64> = quantize(f).iter().map(|&v| v as f64).collect();
    let qa: Vec<f64> = quantize(a).iter().map(|&v| v as f64).collect();
    let qb: Vec<f64> = quantize(b).iter().map(|&v| v as f64).collect();
    let fmb: Vec<f64> = qf.iter().zip(&qb).map(|(x, y)| x - y).collect();
    let fma: Vec<f64> = qf.iter().zip(&qa).map(|(x, y)| x - y).collect();
    Ok(pearson(&fmb, &qa) + pearson(&fma, &qb))
}

const QABF_KG: f64 = -15.0;
const QABF_SG: f64 = 0.5;
const QABF_KA: f64 = -22.0;
const QABF_SA: f64 = 0.8;

fn qabf_sigmoid(x: f64, k: f64, s: f64) -> f64 {
    1.0 / (1.0 + (k * (x - s)).exp())
}

/// Sobel strength and orientation with replicate padding (no spurious
/// border edges on flat images).
fn sobel_polar(q: &[f64], h: usize, w: usize) -> (Vec<f64>, Vec<f64>) {
    let mut strength = vec![0.0; h * w];
    let mut angle = vec![0.0; h * w];
    let get = |i: isize, j: isize| -> f64 {
        let i = i.clamp(0, h as isize - 1) as usize;
        let j = j.clamp(0, w as isize - 1) as usize;
        q[i * w + j]
    };
    for i in 0..h as isize {
        for j in 0..w as isize {
            let gx = -get(i - 1, j - 1) + get(i - 1, j + 1) - 2.0 * get(i, j - 1)
                + 2.0 * get(i, j + 1)
                - get(i + 1, j - 1)
                + get(i + 1, j + 1);
            let gy = -get(i - 1, j - 1) - 2.0 * get(i - 1, j) - get(i - 1, j + 1)
                + get(i + 1, j - 1)
                + 2.0 * get(i + 1, j)
                + get(i + 1, j + 1);
            let idx = i as usize * w + j as usize;
            strength[idx] = gx.hypot(gy);
            angle[idx] = if gx == 0.0 {
                if gy == 0.0 {
                    0.0
                } else {
                    std::f64::consts::FRAC_PI_2 * gy.signum()
                }
            } else {
                (gy / gx).atan()
            };
        }
    }
    (strength, angle)
}

/// Edge preservation of one source in the fused image, per pixel.
fn preservation(gs: f64, as_: f64, gf: f64, af: f64) -> f64 {
    if gf == 0.0 {
        // No fused edge: nothing preserved at this pixel.
        return 0.0;
    }
    let g_rel = if gs == 0.0 {
        0.0
    } else if gs > gf {
        gf / gs
    } else {
        gs / gf
    };
    let d = (as_ - af).abs();
    let a_rel = (d - std::f64::consts::FRAC_PI_2).abs() / std::f64::consts::FRAC_PI_2;
    let qg = qabf_sigmoid(g_rel, QABF_KG, QABF_SG) / qabf_sigmoid(1.0, QABF_KG, QABF_SG);
    let qa = qabf_sigmoid(a_rel, QABF_KA, QABF_SA) / qabf_sigmoid(1.0, QABF_KA, QABF_SA);
    qg * qa
}

/// Gradient-based edge-preservation measure; 1 means every source edge
/// survives in the fused image with its orientation.
pub fn qabf(f: &Tensor, a: &Tensor, b: &Tensor) -> Result<f64> {
    let (h, w) = single_plane(f, "qabf")?;
    if f.shape() != a.shape() || f.shape() != b.shape() {
        return Err(Error::shape("qabf: image shapes differ".to_string()));
    }
    let qf: Vec<f64> = quantize(f).iter().map(|&v| v as f64).collect();
    let qa: Vec<f64> = quantize(a).iter().map(|&v| v as f64).collect();
    let qb: Vec<f64> = quantize(b).iter().map(|&v| v as f64).collect();
    let (gf, af) = sobel_polar(&qf, h, w);
    let (ga, aa) = sobel_polar(&qa, h, w);
    let (gb, ab) = sobel_polar(&qb, h, w);
    let mut num = 0.0;
    let mut den = 0.0;
    for k in 0..h * w {
        let q_af = preservation(ga[k], aa[k], gf[k], af[k]);
        let q_bf = preservation(gb[k], ab[k], gf[k], af[k]);
        num += q_af * ga[k] + q_bf * gb[k];
        den += ga[k] + gb[k];
    }
    if den == 0.0 {
        return Ok(0.0);
    }
    Ok(num / den)
}

/// Two-source SSIM sum `SSIM(f,a) + SSIM(f,b)`, range [-2, 2].
pub fn ssim_metric(f: &Tensor, a: &Tensor, b: &Tensor) -> Result<f64> {
    Ok(ssim_index_value(f, a)? + ssim_index_value(f, b)?)
}

/// All metrics for one fused/source triple.
pub fn report(f: &Tensor, a: &Tensor, b: &Tensor) -> Result<MetricReport> {
    Ok(MetricReport {
        en: entropy(f)?,
        sd: std_dev(f)?,
        sf: spatial_frequency(f)?,
        mi: mutual_information(f, a, b)?,
        scd: scd(f, a, b)?,
        qabf: qabf(f, a, b)?,
        ssim: ssim_metric(f, a, b)?,
    })
}

/// Field-wise mean of several reports.
pub fn mean_report(rows: &[MetricReport]) -> Option<MetricReport> {
    if rows.is_empty() {
        return None;
    }
    let n = rows.len() as f64;
    Some(MetricReport {
        en: rows.iter().map(|r| r.en).sum::<f64>() / n,
        sd: rows.iter().map(|r| r.sd).sum::<f64>() / n,
        sf: rows.iter().map(|r| r.sf).sum::<f64>() / n,
        mi: rows.iter().map(|r| r.mi).sum::<f64>() / n,
        scd: rows.iter().map(|r| r.scd).sum::<f64>() / n,
        qabf: rows.iter().map(|r| r.qabf).sum::<f64>() / n,
        ssim: rows.iter().map(|r| r.ssim).sum::<f64>() / n,
    })
}
