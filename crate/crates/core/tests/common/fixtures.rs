//! Synthetic training fixtures: four deterministic 64x64 pairs shaped like
//! aligned visible/thermal captures of one scene. The first image carries a
//! textured background and structural edges but no targets; the second is a
//! mostly smooth dark field with bright target blobs the first image does
//! not show. Averaging such a pair washes the targets to half contrast and
//! darkens the textured background, so the pixel-average baseline is a
//! genuinely weak fusion that a trained model can beat.

#![allow(dead_code)]

use sfusion::tensor::Tensor;

struct Variant {
    targets: [(f64, f64, f64); 2], // (row, col, radius)
    bar_row: usize,
    phase: f64,
}

fn variant(v: u64) -> Variant {
    let f = v as f64;
    Variant {
        targets: [
            (
                14.0 + 6.0 * ((f * 1.3).sin() * 0.5 + 0.5) + 2.0 * f,
                40.0 - 4.0 * f,
                5.0 + (v % 3) as f64,
            ),
            (44.0 - 3.0 * f, 14.0 + 5.0 * f, 6.0),
        ],
        bar_row: 26 + (v as usize * 9) % 20,
        phase: 0.9 * f,
    }
}

/// Visible-style image: textured background, edges, no targets.
pub fn visible_image(v: u64, size: usize) -> Tensor {
    let var = variant(v);
    Tensor::from_fn([1, 1, size, size], |_, _, i, j| {
        let (fi, fj) = (i as f64, j as f64);
        let mut val = 0.38 + 0.2 * fj / size as f64 + 0.05 * fi / size as f64;
        val += 0.08 * ((fi * 0.9 + var.phase).sin() * (fj * 1.1 - var.phase).cos());
        if i >= var.bar_row && i < var.bar_row + 4 && j >= 6 && j < size - 6 {
            val += 0.22;
        }
        if j >= 10 && j < 14 {
            val -= 0.15;
        }
        val.clamp(0.02, 0.98)
    })
}

/// Thermal-style image: dark smooth field with bright target blobs.
pub fn thermal_image(v: u64, size: usize) -> Tensor {
    let var = variant(v);
    Tensor::from_fn([1, 1, size, size], |_, _, i, j| {
        let (fi, fj) = (i as f64, j as f64);
        let mut val = 0.12 + 0.06 * (fi + fj) / (2.0 * size as f64);
        for (ti, tj, r) in var.targets {
            let d = ((fi - ti).powi(2) + (fj - tj).powi(2)).sqrt();
            if d < r {
                let core = 1.0 - (d / r).powi(2);
                val += 0.72 * core;
            }
        }
        val.clamp(0.02, 0.98)
    })
}

/// The four deterministic visible/thermal fixture pairs.
pub fn training_pairs(size: usize) -> Vec<(Tensor, Tensor)> {
    (0..4)
        .map(|v| (visible_image(v, size), thermal_image(v, size)))
        .collect()
}

/// Pixelwise average baseline for one pair.
pub fn average_baseline(a: &Tensor, b: &Tensor) -> Tensor {
    sfusion::tensor::scale(&sfusion::tensor::add(a, b).unwrap(), 0.5)
}
