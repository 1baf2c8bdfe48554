//! Image ingestion and emission: binary PNM (P5 grayscale / P6 color),
//! BT.601 full-range YCbCr conversion, reflect padding to a size multiple,
//! and patch extraction.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::io::{Read, Write};
use std::path::Path;

/// 8-bit raster image, interleaved row-major pixels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    /// 1 (grayscale) or 3 (RGB).
    pub channels: usize,
    pub pixels: Vec<u8>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize, pixels: Vec<u8>) -> Result<Image> {
        if channels != 1 && channels != 3 {
            return Err(Error::invalid(format!(
                "images must have 1 or 3 channels, got {channels}"
            )));
        }
        if pixels.len() != width * height * channels {
            return Err(Error::shape(format!(
                "pixel count {} does not match {}x{}x{}",
                pixels.len(),
                width,
                height,
                channels
            )));
        }
        Ok(Image {
            width,
            height,
            channels,
            pixels,
        })
    }

    /// Grayscale image from a `[1,1,h,w]` tensor in [0,1].
    pub fn from_gray_tensor(t: &Tensor) -> Result<Image> {
        let [n, c, h, w] = t.shape();
        if n != 1 || c != 1 {
            return Err(Error::shape(format!(
                "expected [1,1,h,w] tensor, got {:?}",
                t.shape()
            )));
        }
        let pixels = t
            .data()
            .iter()
            .map(|&v| (255.0 * v.clamp(0.0, 1.0)).round() as u8)
            .collect();
        Image::new(w, h, 1, pixels)
    }

    /// Luminance tensor `[1,1,h,w]` in [0,1]; RGB input is converted first.
    pub fn to_gray_tensor(&self) -> Tensor {
        if self.channels == 1 {
            let data = self.pixels.iter().map(|&p| p as f64 / 255.0).collect();
            Tensor::from_vec([1, 1, self.height, self.width], data).unwrap()
        } else {
            let (y, _, _) = rgb_to_ycbcr(self);
            y
        }
    }
}

fn read_token(bytes: &[u8], pos: &mut usize) -> Result<String> {
    // Skip whitespace and `#` comments.
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if start == *pos {
        return Err(Error::format("unexpected end of PNM header".to_string()));
    }
    Ok(String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
}

/// Read a binary PGM (P5) or PPM (P6) file with maxval 255.
pub fn read_pnm(path: &Path) -> Result<Image> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut pos = 0usize;
    let magic = read_token(&bytes, &mut pos)?;
    let channels = match magic.as_str() {
        "P5" => 1,
        "P6" => 3,
        other => {
            return Err(Error::format(format!(
                "unsupported PNM magic {other:?} (want binary P5 or P6)"
            )))
        }
    };
    let width: usize = read_token(&bytes, &mut pos)?
        .parse()
        .map_err(|_| Error::format("bad PNM width".to_string()))?;
    let height: usize = read_token(&bytes, &mut pos)?
        .parse()
        .map_err(|_| Error::format("bad PNM height".to_string()))?;
    let maxval: usize = read_token(&bytes, &mut pos)?
        .parse()
        .map_err(|_| Error::format("bad PNM maxval".to_string()))?;
    if maxval != 255 {
        return Err(Error::format(format!(
            "only maxval 255 is supported, got {maxval}"
        )));
    }
    // Exactly one whitespace byte separates the header from the payload.
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(Error::format("missing separator before PNM payload".to_string()));
    }
    pos += 1;
    let expect = width * height * channels;
    let payload = &bytes[pos..];
    if payload.len() < expect {
        return Err(Error::format(format!(
            "truncated PNM payload: have {} bytes, need {}",
            payload.len(),
            expect
        )));
    }
    Image::new(width, height, channels, payload[..expect].to_vec())
}

/// Write a binary PGM/PPM; byte-exact and deterministic.
pub fn write_pnm(path: &Path, img: &Image) -> Result<()> {
    let magic = if img.channels == 1 { "P5" } else { "P6" };
    let mut out = Vec::with_capacity(img.pixels.len() + 32);
    write!(&mut out, "{}\n{} {}\n255\n", magic, img.width, img.height)?;
    out.extend_from_slice(&img.pixels);
    write_atomic(path, &out)
}

/// Write through a temp file in the same directory, then rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    std::fs::create_dir_all(dir)?;
    let tmp = dir.join(format!(
        ".{}.tmp",
        path.file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "out".to_string())
    ));
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// BT.601 full-range RGB -> YCbCr. Returns `[1,1,h,w]` tensors in [0,1]
/// (chroma centered at 0.5). Grayscale input yields `cb = cr = 0.5`.
pub fn rgb_to_ycbcr(img: &Image) -> (Tensor, Tensor, Tensor) {
    let (h, w) = (img.height, img.width);
    let mut y = Tensor::zeros([1, 1, h, w]);
    let mut cb = Tensor::zeros([1, 1, h, w]);
    let mut cr = Tensor::zeros([1, 1, h, w]);
    for p in 0..h * w {
        let (r, g, b) = if img.channels == 3 {
            (
                img.pixels[3 * p] as f64 / 255.0,
                img.pixels[3 * p + 1] as f64 / 255.0,
                img.pixels[3 * p + 2] as f64 / 255.0,
            )
        } else {
            let v = img.pixels[p] as f64 / 255.0;
            (v, v, v)
        };
        y.data_mut()[p] = 0.299 * r + 0.587 * g + 0.114 * b;
        cb.data_mut()[p] = 0.5 - 0.168736 * r - 0.331264 * g + 0.5 * b;
        cr.data_mut()[p] = 0.5 + 0.5 * r - 0.418688 * g - 0.081312 * b;
    }
    (y, cb, cr)
}

/// Inverse of [`rgb_to_ycbcr`]; channels clamp to [0,1] before quantization.
pub fn ycbcr_to_rgb(y: &Tensor, cb: &Tensor, cr: &Tensor) -> Result<Image> {
    let [n, c, h, w] = y.shape();
    if n != 1 || c != 1 || cb.shape() != y.shape() || cr.shape() != y.shape() {
        return Err(Error::shape("ycbcr_to_rgb expects matching [1,1,h,w] planes".to_string()));
    }
    let mut pixels = vec![0u8; h * w * 3];
    for p in 0..h * w {
        let yv = y.data()[p];
        let cbv = cb.data()[p] - 0.5;
        let crv = cr.data()[p] - 0.5;
        let r = yv + 1.402 * crv;
        let g = yv - 0.344136 * cbv - 0.714136 * crv;
        let b = yv + 1.772 * cbv;
        pixels[3 * p] = (255.0 * r.clamp(0.0, 1.0)).round() as u8;
        pixels[3 * p + 1] = (255.0 * g.clamp(0.0, 1.0)).round() as u8;
        pixels[3 * p + 2] = (255.0 * b.clamp(0.0, 1.0)).round() as u8;
    }
    Image::new(w, h, 3, pixels)
}

/// Mirror-pad the bottom/right spatial borders so both sizes become
/// multiples of `m`; returns the padded tensor and the original size.
pub fn pad_to_multiple(x: &Tensor, m: usize) -> (Tensor, (usize, usize)) {
    let [n, c, h, w] = x.shape();
    let ph = (m - h % m) % m;
    let pw = (m - w % m) % m;
    if ph == 0 && pw == 0 {
        return (x.clone(), (h, w));
    }
    let out = Tensor::from_fn([n, c, h + ph, w + pw], |b, ch, i, j| {
        let si = if i < h { i } else { h - 1 - (i - h) };
        let sj = if j < w { j } else { w - 1 - (j - w) };
        x.at(b, ch, si, sj)
    });
    (out, (h, w))
}

/// Undo [`pad_to_multiple`].
pub fn crop_back(x: &Tensor, original: (usize, usize)) -> Result<Tensor> {
    crate::tensor::crop(x, 0, 0, original.0, original.1)
}

/// Grid patches of `size` with the given stride, row-major; with a seed the
/// order is shuffled deterministically.
pub fn patchify(x: &Tensor, size: usize, stride: usize, seed: Option<u64>) -> Result<Vec<Tensor>> {
    let [_, _, h, w] = x.shape();
    if size == 0 || stride == 0 {
        return Err(Error::invalid("patch size and stride must be positive"));
    }
    if size > h || size > w {
        return Err(Error::invalid(format!(
            "patch size {size} exceeds image {h}x{w}"
        )));
    }
    let mut patches = Vec::new();
    let mut i = 0;
    while i + size <= h {
        let mut j = 0;
        while j + size <= w {
            patches.push(crate::tensor::crop(x, i, j, size, size)?);
            j += stride;
        }
        i += stride;
    }
    if let Some(seed) = seed {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        patches.shuffle(&mut rng);
    }
    Ok(patches)
}
