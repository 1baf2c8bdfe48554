//! Checkpoint format: a text manifest (format version, step counter, config
//! echo, one `param <name> <n> <c> <h> <w>` line per parameter in
//! registration order) terminated by a `data` line, followed by the raw
//! little-endian `f64` payloads concatenated in manifest order.
//!
//! Loading rebuilds the model from the embedded config and rejects any
//! manifest whose parameter names or shapes disagree with it.

use crate::error::{Error, Result};
use crate::imageio::write_atomic;
use crate::pipeline::{FusionConfig, Model};
use std::io::Write;
use std::path::Path;

const MAGIC: &str = "sfusion-checkpoint v1";

pub fn save(model: &Model, path: &Path) -> Result<()> {
    let mut out = Vec::new();
    writeln!(&mut out, "{MAGIC}")?;
    writeln!(&mut out, "step {}", model.step)?;
    for (k, v) in model.cfg.to_pairs() {
        writeln!(&mut out, "cfg {k} {v}")?;
    }
    for (_, p) in model.ps.iter() {
        let [n, c, h, w] = p.value.shape();
        writeln!(&mut out, "param {} {} {} {} {}", p.name, n, c, h, w)?;
    }
    writeln!(&mut out, "data")?;
    for (_, p) in model.ps.iter() {
        for v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    write_atomic(path, &out)
}

pub fn load(path: &Path) -> Result<Model> {
    let bytes = std::fs::read(path)?;
    // Split the text manifest from the binary payload at the `data` line.
    let mut pos = 0usize;
    let mut lines: Vec<String> = Vec::new();
    loop {
        let eol = bytes[pos..]
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::format("checkpoint manifest has no data section".to_string()))?;
        let line = String::from_utf8(bytes[pos..pos + eol].to_vec())
            .map_err(|_| Error::format("manifest is not valid UTF-8".to_string()))?;
        pos += eol + 1;
        if line == "data" {
            break;
        }
        lines.push(line);
        if pos >= bytes.len() {
            return Err(Error::format("checkpoint manifest has no data section".to_string()));
        }
    }

    let mut it = lines.iter();
    match it.next() {
        Some(l) if l == MAGIC => {}
        other => {
            return Err(Error::format(format!(
                "bad checkpoint magic {:?}, expected {MAGIC:?}",
                other.map(String::as_str).unwrap_or("<empty>")
            )))
        }
    }
    let step_line = it
        .next()
        .ok_or_else(|| Error::format("missing step line".to_string()))?;
    let step: u64 = step_line
        .strip_prefix("step ")
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::format(format!("bad step line {step_line:?}")))?;

    let mut cfg = FusionConfig::default();
    let mut manifest: Vec<(String, [usize; 4])> = Vec::new();
    for line in it {
        if let Some(rest) = line.strip_prefix("cfg ") {
            let (k, v) = rest
                .split_once(' ')
                .ok_or_else(|| Error::format(format!("bad cfg line {line:?}")))?;
            cfg.apply(k, v)?;
        } else if let Some(rest) = line.strip_prefix("param ") {
            let parts: Vec<&str> = rest.split(' ').collect();
            if parts.len() != 5 {
                return Err(Error::format(format!("bad param line {line:?}")));
            }
            let mut shape = [0usize; 4];
            for (i, p) in parts[1..].iter().enumerate() {
                shape[i] = p
                    .parse()
                    .map_err(|_| Error::format(format!("bad shape in {line:?}")))?;
            }
            manifest.push((parts[0].to_string(), shape));
        } else {
            return Err(Error::format(format!("unrecognized manifest line {line:?}")));
        }
    }

    let mut model = Model::init(cfg)?;
    model.step = step;
    if manifest.len() != model.ps.len() {
        return Err(Error::format(format!(
            "manifest lists {} parameters, config implies {}",
            manifest.len(),
            model.ps.len()
        )));
    }
    let ids: Vec<_> = model.ps.iter().map(|(id, p)| (id, p.name.clone(), p.value.shape())).collect();
    let mut payload = &bytes[pos..];
    for ((name, shape), (id, expect_name, expect_shape)) in manifest.iter().zip(ids) {
        if *name != expect_name || *shape != expect_shape {
            return Err(Error::format(format!(
                "parameter {name:?} with shape {shape:?} disagrees with the config \
                 (expected {expect_name:?} {expect_shape:?})"
            )));
        }
        let count: usize = shape.iter().product();
        if payload.len() < count * 8 {
            return Err(Error::format("checkpoint payload is truncated".to_string()));
        }
        let mut data = Vec::with_capacity(count);
        for k in 0..count {
            let mut b = [0u8; 8];
            b.copy_from_slice(&payload[k * 8..k * 8 + 8]);
            data.push(f64::from_le_bytes(b));
        }
        payload = &payload[count * 8..];
        *model.ps.value_mut(id) = crate::tensor::Tensor::from_vec(*shape, data)?;
    }
    if !payload.is_empty() {
        return Err(Error::format(format!(
            "checkpoint payload has {} trailing bytes",
            payload.len()
        )));
    }
    Ok(model)
}
