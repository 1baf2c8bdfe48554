//! Command-line surface: `fuse`, `decompose`, `metrics`, `gradcheck`,
//! `train`, `info`.
//!
//! Exit codes: 0 success, 1 computational failure (threshold exceeded,
//! per-item metric errors), 2 usage/IO/format errors. Every run prints its
//! fully-resolved configuration, and all artifacts are written atomically
//! (temp file + rename), so reruns with the same seed are byte-identical.

use crate::checkpoint;
use crate::error::{Error, Result};
use crate::fft::fft2;
use crate::imageio::{
    pad_to_multiple, read_pnm, rgb_to_ycbcr, write_atomic, write_pnm, crop_back, Image,
};
use crate::metrics::{mean_report, report, MetricReport};
use crate::pipeline::{
    fuse_images, gradient_check, smoothed_trace, train_toy, FusionConfig, Model,
};
use crate::tensor::Tensor;
use crate::wavelet::analyze;
use clap::{Parser, Subcommand, ValueEnum};
use std::io::Write as _;
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(
    name = "sfusion",
    version,
    about = "Spatial-frequency multimodal image fusion"
)]
pub struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ColorSource {
    A,
    B,
}

#[derive(Subcommand)]
enum Cmd {
    /// Fuse two aligned PNM images with a trained checkpoint.
    Fuse {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Recombine the named source's chroma into a color output.
        #[arg(long, value_enum)]
        color: Option<ColorSource>,
    },
    /// Emit the four wavelet subbands of an image plus their log-magnitude
    /// spectra as PGM files.
    Decompose {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Batch fusion-quality metrics over directories of matching files.
    Metrics {
        #[arg(long)]
        fused: PathBuf,
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        #[arg(long)]
        csv: PathBuf,
    },
    /// Finite-difference check of every parameter gradient on a small model.
    Gradcheck {
        /// key=value config file overriding the built-in micro config.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 1e-4)]
        threshold: f64,
        /// Input side length (divisible by 4).
        #[arg(long, default_value_t = 16)]
        size: usize,
    },
    /// Desk-scale training on a directory with `a/` and `b/` image subdirs.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 200)]
        steps: usize,
        /// Continue from an existing checkpoint (its config wins).
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Loss trace CSV path (default: <out>.loss.csv).
        #[arg(long)]
        loss_csv: Option<PathBuf>,
    },
    /// Print a checkpoint's configuration and parameter count.
    Info {
        #[arg(long)]
        ckpt: PathBuf,
    },
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Numeric(_) => 1,
        _ => 2,
    }
}

/// Parse `std::env::args` and run; returns the process exit code.
pub fn run() -> i32 {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn dispatch(cli: Cli) -> Result<i32> {
    match cli.cmd {
        Cmd::Fuse {
            a,
            b,
            ckpt,
            out,
            color,
        } => cmd_fuse(&a, &b, &ckpt, &out, color),
        Cmd::Decompose { input, ckpt, out } => cmd_decompose(&input, &ckpt, &out),
        Cmd::Metrics { fused, a, b, csv } => cmd_metrics(&fused, &a, &b, &csv),
        Cmd::Gradcheck {
            config,
            threshold,
            size,
        } => cmd_gradcheck(config.as_deref(), threshold, size),
        Cmd::Train {
            data,
            config,
            out,
            steps,
            resume,
            loss_csv,
        } => cmd_train(&data, config.as_deref(), &out, steps, resume.as_deref(), loss_csv),
        Cmd::Info { ckpt } => cmd_info(&ckpt),
    }
}

fn log_config(cfg: &FusionConfig) {
    for (k, v) in cfg.to_pairs() {
        println!("cfg {k} {v}");
    }
}

/// Parse a `key=value` config file (# comments, blank lines allowed).
pub fn read_config_file(path: &Path) -> Result<Vec<(String, String)>> {
    let text = std::fs::read_to_string(path)?;
    let mut pairs = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            Error::format(format!(
                "{}:{}: expected key=value, got {raw:?}",
                path.display(),
                lineno + 1
            ))
        })?;
        pairs.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(pairs)
}

fn apply_config_file(cfg: &mut FusionConfig, path: &Path) -> Result<()> {
    for (k, v) in read_config_file(path)? {
        cfg.apply(&k, &v)?;
    }
    cfg.validate()
}

fn load_luma(path: &Path) -> Result<(Image, Tensor)> {
    let img = read_pnm(path)?;
    let y = img.to_gray_tensor();
    Ok((img, y))
}

fn cmd_fuse(
    a_path: &Path,
    b_path: &Path,
    ckpt: &Path,
    out: &Path,
    color: Option<ColorSource>,
) -> Result<i32> {
    let model = checkpoint::load(ckpt)?;
    log_config(&model.cfg);
    let (img_a, ya) = load_luma(a_path)?;
    let (img_b, yb) = load_luma(b_path)?;
    if (img_a.width, img_a.height) != (img_b.width, img_b.height) {
        return Err(Error::invalid(format!(
            "source sizes differ: {}x{} vs {}x{}",
            img_a.width, img_a.height, img_b.width, img_b.height
        )));
    }
    let (pa, orig) = pad_to_multiple(&ya, 4);
    let (pb, _) = pad_to_multiple(&yb, 4);
    let fused = fuse_images(&model, &pa, &pb)?;
    let fused = crop_back(&fused, orig)?;
    let out_img = match color {
        None => Image::from_gray_tensor(&fused)?,
        Some(src) => {
            let source = match src {
                ColorSource::A => &img_a,
                ColorSource::B => &img_b,
            };
            let (_, cb, cr) = rgb_to_ycbcr(source);
            crate::imageio::ycbcr_to_rgb(&fused, &cb, &cr)?
        }
    };
    write_pnm(out, &out_img)?;
    println!("wrote {}", out.display());
    Ok(0)
}

/// Min-max normalize a single plane to 8 bits; a flat plane renders as
/// mid-gray (128).
fn normalize_to_image(t: &Tensor) -> Result<Image> {
    let lo = t.data().iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = t.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let [_, _, h, w] = t.shape();
    let pixels: Vec<u8> = if hi - lo < 1e-300 {
        vec![128; h * w]
    } else {
        t.data()
            .iter()
            .map(|&v| (255.0 * (v - lo) / (hi - lo)).round() as u8)
            .collect()
    };
    Image::new(w, h, 1, pixels)
}

/// log(1 + |F|) with the DC bin shifted to the center.
fn log_spectrum(t: &Tensor) -> Tensor {
    let s = fft2(t);
    let [n, c, h, w] = s.shape;
    let mag = Tensor::from_vec(
        s.shape,
        s.re
            .iter()
            .zip(&s.im)
            .map(|(re, im)| (1.0 + re.hypot(*im)).ln())
            .collect(),
    )
    .unwrap();
    Tensor::from_fn([n, c, h, w], |b, ch, i, j| {
        mag.at(b, ch, (i + h - h / 2) % h, (j + w - w / 2) % w)
    })
}

fn cmd_decompose(input: &Path, ckpt: &Path, out_dir: &Path) -> Result<i32> {
    let model = checkpoint::load(ckpt)?;
    log_config(&model.cfg);
    let (_, y) = load_luma(input)?;
    let (padded, _) = pad_to_multiple(&y, 2);
    let mut o = crate::autodiff::Eager;
    let leaves = model.wavelet_ids().load(&mut o, &model.ps);
    // The enhancement convs live in C-channel feature space; on a raw
    // 1-channel image only the learned analysis vectors apply.
    let bands = analyze(&mut o, &padded, &leaves, false)?;
    std::fs::create_dir_all(out_dir)?;
    for (name, band) in [
        ("ll", &bands.ll),
        ("lh", &bands.lh),
        ("hl", &bands.hl),
        ("hh", &bands.hh),
    ] {
        write_pnm(&out_dir.join(format!("{name}.pgm")), &normalize_to_image(band)?)?;
        let spec = log_spectrum(band);
        write_pnm(
            &out_dir.join(format!("{name}_spectrum.pgm")),
            &normalize_to_image(&spec)?,
        )?;
    }
    println!("wrote 8 files to {}", out_dir.display());
    Ok(0)
}

fn list_images(dir: &Path) -> Result<Vec<String>> {
    let mut names = Vec::new();
    for entry in std::fs::read_dir(dir)? {
        let entry = entry?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if name.ends_with(".pgm") || name.ends_with(".ppm") {
            names.push(name);
        }
    }
    names.sort();
    Ok(names)
}

fn cmd_metrics(fused_dir: &Path, a_dir: &Path, b_dir: &Path, csv: &Path) -> Result<i32> {
    let names = list_images(fused_dir)?;
    if names.is_empty() {
        return Err(Error::invalid(format!(
            "no .pgm/.ppm files in {}",
            fused_dir.display()
        )));
    }
    let mut rows: Vec<String> = vec![MetricReport::CSV_HEADER.to_string()];
    let mut ok_reports: Vec<MetricReport> = Vec::new();
    let mut failures = 0usize;
    for name in &names {
        let item = (|| -> Result<MetricReport> {
            let (_, f) = load_luma(&fused_dir.join(name))?;
            let (_, a) = load_luma(&a_dir.join(name))?;
            let (_, b) = load_luma(&b_dir.join(name))?;
            report(&f, &a, &b)
        })();
        match item {
            Ok(r) => {
                rows.push(r.csv_row(name));
                ok_reports.push(r);
            }
            Err(e) => {
                rows.push(format!("{name},error: {e}"));
                failures += 1;
            }
        }
    }
    if let Some(mean) = mean_report(&ok_reports) {
        rows.push(mean.csv_row("mean"));
    }
    let mut text = rows.join("\n");
    text.push('\n');
    write_atomic(csv, text.as_bytes())?;
    println!(
        "wrote {} ({} items, {} failures)",
        csv.display(),
        names.len(),
        failures
    );
    Ok(if failures > 0 { 1 } else { 0 })
}

fn cmd_gradcheck(config: Option<&Path>, threshold: f64, size: usize) -> Result<i32> {
    let mut cfg = FusionConfig::micro();
    if let Some(path) = config {
        apply_config_file(&mut cfg, path)?;
    }
    log_config(&cfg);
    let mut model = Model::init_random(cfg)?;
    let rep = gradient_check(&mut model, size, 1e-4)?;
    println!(
        "checked {} parameters ({} scalars)",
        rep.per_param.len(),
        model.param_count()
    );
    println!("worst parameter: {} rel-err {:.3e}", rep.worst_param, rep.worst_err);
    if rep.worst_err < threshold {
        println!("gradcheck PASS (threshold {threshold:.1e})");
        Ok(0)
    } else {
        println!("gradcheck FAIL (threshold {threshold:.1e})");
        Ok(1)
    }
}

fn load_pairs(data: &Path) -> Result<Vec<(Tensor, Tensor)>> {
    let a_dir = data.join("a");
    let b_dir = data.join("b");
    if !a_dir.is_dir() || !b_dir.is_dir() {
        return Err(Error::invalid(format!(
            "training data dir {} must contain a/ and b/ subdirectories",
            data.display()
        )));
    }
    let names = list_images(&a_dir)?;
    if names.is_empty() {
        return Err(Error::invalid(format!("no training images in {}", a_dir.display())));
    }
    let mut pairs = Vec::with_capacity(names.len());
    for name in names {
        let (_, ya) = load_luma(&a_dir.join(&name))?;
        let (_, yb) = load_luma(&b_dir.join(&name))?;
        let (pa, _) = pad_to_multiple(&ya, 4);
        let (pb, _) = pad_to_multiple(&yb, 4);
        pairs.push((pa, pb));
    }
    Ok(pairs)
}

fn cmd_train(
    data: &Path,
    config: Option<&Path>,
    out: &Path,
    steps: usize,
    resume: Option<&Path>,
    loss_csv: Option<PathBuf>,
) -> Result<i32> {
    let mut model = match resume {
        Some(ckpt) => {
            let m = checkpoint::load(ckpt)?;
            if config.is_some() {
                println!("note: resuming from {}; --config ignored", ckpt.display());
            }
            m
        }
        None => {
            let mut cfg = FusionConfig::default();
            if let Some(path) = config {
                apply_config_file(&mut cfg, path)?;
            }
            Model::init(cfg)?
        }
    };
    log_config(&model.cfg);
    let pairs = load_pairs(data)?;
    println!("training on {} pairs for {} steps", pairs.len(), steps);
    let rows = train_toy(&mut model, &pairs, steps)?;

    let mut csv = String::from("step,l_ssim,l_text,l_int,l_total\n");
    for row in &rows {
        csv.push_str(&format!(
            "{},{},{},{},{}\n",
            row.step, row.report.l_ssim, row.report.l_text, row.report.l_int, row.report.l_total
        ));
    }
    let csv_path = loss_csv.unwrap_or_else(|| {
        let mut p = out.as_os_str().to_owned();
        p.push(".loss.csv");
        PathBuf::from(p)
    });
    write_atomic(&csv_path, csv.as_bytes())?;
    checkpoint::save(&model, out)?;

    if let Some(first) = rows.first() {
        let totals: Vec<f64> = rows.iter().map(|r| r.report.l_total).collect();
        let smooth = smoothed_trace(&totals);
        println!(
            "initial loss {:.6}, final smoothed loss {:.6}",
            first.report.l_total,
            smooth.last().unwrap()
        );
    }
    println!("wrote {} and {}", out.display(), csv_path.display());
    Ok(0)
}

fn cmd_info(ckpt: &Path) -> Result<i32> {
    let model = checkpoint::load(ckpt)?;
    log_config(&model.cfg);
    println!("step {}", model.step);
    println!("parameters {}", model.param_count());
    // Flush so piped callers always see the count.
    std::io::stdout().flush()?;
    Ok(0)
}
