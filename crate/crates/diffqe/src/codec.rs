//! QP-parameterized degradation sources.
//!
//! The proxy codec applies an orthonormal block DCT, uniform quantization
//! with the HEVC-style step rule Qstep = 2^((qp-4)/6) on the 0..255 scale,
//! and the inverse transform. It is deterministic and dependency-free, so
//! the full pipeline runs anywhere; the external adapter shells out to a
//! real encoder binary for paper-faithful data.

use crate::error::{Error, Result};
use crate::plane::{Plane, QpMap, QP_MAX};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CodecMode {
    Proxy,
    External,
}

impl CodecMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            CodecMode::Proxy => "proxy",
            CodecMode::External => "external",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "proxy" => Ok(CodecMode::Proxy),
            "external" => Ok(CodecMode::External),
            _ => Err(Error::Config(format!("unknown codec mode: {s}"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct CodecConfig {
    pub mode: CodecMode,
    pub block_size: usize,
    pub external_encoder_path: Option<PathBuf>,
    /// Placeholders: {in} {out} {qp} {w} {h}.
    pub external_args_template: String,
}

impl Default for CodecConfig {
    fn default() -> Self {
        CodecConfig {
            mode: CodecMode::Proxy,
            block_size: 8,
            external_encoder_path: None,
            external_args_template: "{in} {out} {qp} {w} {h}".into(),
        }
    }
}

impl CodecConfig {
    pub fn compress(&self, img: &Plane, qp: u8) -> Result<Plane> {
        match self.mode {
            CodecMode::Proxy => compress_proxy(img, qp, self.block_size),
            CodecMode::External => compress_external(img, qp, self),
        }
    }
}

/// HEVC-style quantization step on the 0..255 sample scale.
pub fn quant_step(qp: u8) -> f64 {
    2f64.powf((qp as f64 - 4.0) / 6.0)
}

/// Orthonormal type-II DCT matrix of size n (row k = basis k).
fn dct_matrix(n: usize) -> Vec<f64> {
    let mut m = vec![0.0; n * n];
    for k in 0..n {
        let scale = if k == 0 { (1.0 / n as f64).sqrt() } else { (2.0 / n as f64).sqrt() };
        for i in 0..n {
            m[k * n + i] =
                scale * (std::f64::consts::PI * (2.0 * i as f64 + 1.0) * k as f64 / (2.0 * n as f64)).cos();
        }
    }
    m
}

/// 2-D transform of one n x n block: out = M . blk . M^T (forward) or
/// M^T . blk . M (inverse).
fn transform_block(blk: &mut [f64], m: &[f64], n: usize, inverse: bool) {
    let mut tmp = vec![0.0; n * n];
    // rows: tmp = blk . M^T (forward) => tmp[y][k] = sum_x blk[y][x] m[k][x]
    for y in 0..n {
        for k in 0..n {
            let mut acc = 0.0;
            for x in 0..n {
                let mm = if inverse { m[x * n + k] } else { m[k * n + x] };
                acc += blk[y * n + x] * mm;
            }
            tmp[y * n + k] = acc;
        }
    }
    // cols: out[k][x] = sum_y m[k][y] tmp[y][x]
    for k in 0..n {
        for x in 0..n {
            let mut acc = 0.0;
            for y in 0..n {
                let mm = if inverse { m[y * n + k] } else { m[k * n + y] };
                acc += mm * tmp[y * n + x];
            }
            blk[k * n + x] = acc;
        }
    }
}

/// Forward-then-inverse without quantization; exposed for the orthonormality
/// check.
pub fn dct_roundtrip(block: &[f64], n: usize) -> Vec<f64> {
    let m = dct_matrix(n);
    let mut b = block.to_vec();
    transform_block(&mut b, &m, n, false);
    transform_block(&mut b, &m, n, true);
    b
}

/// Block-DCT quantization proxy. Deterministic: same inputs, same bytes.
pub fn compress_proxy(img: &Plane, qp: u8, block_size: usize) -> Result<Plane> {
    if qp > QP_MAX {
        return Err(Error::Range(format!("qp {qp} exceeds {QP_MAX}")));
    }
    if block_size == 0 {
        return Err(Error::Range("block size must be positive".into()));
    }
    let n = block_size;
    let pw = img.w.div_ceil(n) * n;
    let ph = img.h.div_ceil(n) * n;
    let padded = if pw == img.w && ph == img.h { img.clone() } else { img.pad_to(pw, ph) };
    let q = quant_step(qp);
    let m = dct_matrix(n);
    let mut out = Plane::zeros(pw, ph);
    let mut blk = vec![0.0f64; n * n];
    for by in (0..ph).step_by(n) {
        for bx in (0..pw).step_by(n) {
            for y in 0..n {
                for x in 0..n {
                    blk[y * n + x] = padded.data[(by + y) * pw + bx + x] as f64 * 255.0;
                }
            }
            transform_block(&mut blk, &m, n, false);
            for c in blk.iter_mut() {
                // round-half-away-from-zero keeps the quantizer sign-symmetric
                *c = (*c / q).round() * q;
            }
            transform_block(&mut blk, &m, n, true);
            for y in 0..n {
                for x in 0..n {
                    out.data[(by + y) * pw + bx + x] = ((blk[y * n + x] / 255.0) as f32).clamp(0.0, 1.0);
                }
            }
        }
    }
    if pw == img.w && ph == img.h {
        Ok(out)
    } else {
        out.crop(0, 0, img.w, img.h)
    }
}

/// Frame-constant QP map (value qp/51).
pub fn make_qpmap(qp: u8, w: usize, h: usize) -> Result<QpMap> {
    QpMap::new(qp, w, h)
}

/// Raw plane file: width x height bytes, row-major, 8-bit.
pub fn write_plane_file(path: &Path, plane: &Plane) -> Result<()> {
    Ok(std::fs::write(path, plane.to_bytes())?)
}

pub fn read_plane_file(path: &Path, w: usize, h: usize) -> Result<Plane> {
    let bytes = std::fs::read(path)?;
    if bytes.len() != w * h {
        return Err(Error::Shape(format!(
            "{}: {} bytes, expected {}x{}",
            path.display(),
            bytes.len(),
            w,
            h
        )));
    }
    Plane::from_bytes(w, h, &bytes)
}

fn render_template(template: &str, input: &Path, output: &Path, qp: u8, w: usize, h: usize) -> Vec<String> {
    template
        .split_whitespace()
        .map(|tok| {
            tok.replace("{in}", &input.display().to_string())
                .replace("{out}", &output.display().to_string())
                .replace("{qp}", &qp.to_string())
                .replace("{w}", &w.to_string())
                .replace("{h}", &h.to_string())
        })
        .collect()
}

/// Invoke an external encoder binary on a raw plane file.
pub fn compress_external(img: &Plane, qp: u8, config: &CodecConfig) -> Result<Plane> {
    if qp > QP_MAX {
        return Err(Error::Range(format!("qp {qp} exceeds {QP_MAX}")));
    }
    let bin = config
        .external_encoder_path
        .as_ref()
        .ok_or_else(|| Error::Config("external codec mode requires an encoder path".into()))?;
    if !bin.exists() {
        return Err(Error::Codec(format!("encoder binary not found: {}", bin.display())));
    }
    let work = tempfile::tempdir()?;
    let in_path = work.path().join("in.plane");
    let out_path = work.path().join("out.plane");
    write_plane_file(&in_path, img)?;
    let args = render_template(&config.external_args_template, &in_path, &out_path, qp, img.w, img.h);
    let output = std::process::Command::new(bin)
        .args(&args)
        .output()
        .map_err(|e| Error::Codec(format!("failed to launch {}: {e}", bin.display())))?;
    if !output.status.success() {
        let tail: String = String::from_utf8_lossy(&output.stderr)
            .chars()
            .rev()
            .take(400)
            .collect::<String>()
            .chars()
            .rev()
            .collect();
        return Err(Error::Codec(format!(
            "encoder exited with {}: {tail}",
            output.status
        )));
    }
    read_plane_file(&out_path, img.w, img.h)
    // temp workspace dropped here, removing both files
}
