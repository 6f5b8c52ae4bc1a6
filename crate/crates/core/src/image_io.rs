//! 8-bit image files (PNG, binary PGM) and raw `f64` dumps.
//!
//! Pixel values in `[-1, 1]` map linearly onto `[0, 255]` with
//! round-half-up: `byte = ⌊(v + 1)·127.5 + 0.5⌋`.

use std::fs;
use std::path::Path;

use image::{ImageBuffer, ImageFormat, Luma, Rgb};

use crate::error::{Result, WinnError};
use crate::tensor::{numel, Tensor};

const RAW_MAGIC: &[u8; 8] = b"WINNF64\0";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Png,
    Pgm,
}

impl Format {
    pub fn from_path(path: &Path) -> Result<Self> {
        match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
            Some("png") => Ok(Format::Png),
            Some("pgm") => Ok(Format::Pgm),
            _ => Err(WinnError::usage(format!("{}: unknown image extension", path.display()))),
        }
    }
}

pub fn quantize(v: f64) -> u8 {
    ((v.clamp(-1.0, 1.0) + 1.0) * 127.5 + 0.5).floor() as u8
}

pub fn dequantize(b: u8) -> f64 {
    b as f64 / 127.5 - 1.0
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| WinnError::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| WinnError::io(path, e))
}

/// Encodes a `[c, h, w]` tensor (`c` = 1 or 3; PGM needs 1).
pub fn encode(t: &Tensor, format: Format) -> Result<Vec<u8>> {
    let s = t.shape();
    if s.len() != 3 || !(s[0] == 1 || s[0] == 3) {
        return Err(WinnError::usage(format!("image tensor must be [1|3, h, w], got {s:?}")));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    if format == Format::Pgm && c != 1 {
        return Err(WinnError::usage("PGM holds a single channel"));
    }
    let d = t.data();
    // Interleave channels.
    let mut px = Vec::with_capacity(c * h * w);
    for i in 0..h * w {
        for ch in 0..c {
            px.push(quantize(d[ch * h * w + i]));
        }
    }
    match format {
        Format::Pgm => {
            let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
            out.extend_from_slice(&px);
            Ok(out)
        }
        Format::Png => {
            let mut out = std::io::Cursor::new(Vec::new());
            let res = if c == 1 {
                ImageBuffer::<Luma<u8>, _>::from_raw(w as u32, h as u32, px)
                    .expect("buffer size")
                    .write_to(&mut out, ImageFormat::Png)
            } else {
                ImageBuffer::<Rgb<u8>, _>::from_raw(w as u32, h as u32, px)
                    .expect("buffer size")
                    .write_to(&mut out, ImageFormat::Png)
            };
            res.map_err(|e| WinnError::usage(format!("png encoding failed: {e}")))?;
            Ok(out.into_inner())
        }
    }
}

pub fn write_image(t: &Tensor, path: &Path) -> Result<()> {
    let bytes = encode(t, Format::from_path(path)?)?;
    write_file(path, &bytes)
}

fn parse_err(what: &str, offset: usize, message: impl Into<String>) -> WinnError {
    WinnError::Parse {
        what: what.into(),
        offset,
        message: message.into(),
    }
}

/// Parses a binary (P5) PGM with maxval 255.
pub fn decode_pgm(bytes: &[u8]) -> Result<Tensor> {
    const WHAT: &str = "PGM";
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        return Err(parse_err(WHAT, 0, "missing P5 magic"));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        // Whitespace and comments.
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(parse_err(WHAT, pos, "expected a decimal header field"));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .expect("ascii digits")
            .parse()
            .map_err(|_| parse_err(WHAT, start, "header field out of range"))?;
    }
    let [w, h, maxval] = fields;
    if maxval != 255 {
        return Err(parse_err(WHAT, pos, format!("maxval {maxval} unsupported (need 255)")));
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(parse_err(WHAT, pos, "expected whitespace after header"));
    }
    pos += 1;
    let need = w * h;
    if bytes.len() - pos != need {
        return Err(parse_err(
            WHAT,
            bytes.len().min(pos + need),
            format!("expected {need} pixel bytes, found {}", bytes.len() - pos),
        ));
    }
    let data = bytes[pos..].iter().map(|&b| dequantize(b)).collect();
    Tensor::new(vec![1, h, w], data)
}

/// Decodes PNG (or anything the `image` crate reads) into `[1|3, h, w]`.
pub fn decode_png(bytes: &[u8]) -> Result<Tensor> {
    let img = image::load_from_memory(bytes).map_err(|e| parse_err("PNG", 0, e.to_string()))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let (c, raw) = if img.color().has_color() {
        (3, img.into_rgb8().into_raw())
    } else {
        (1, img.into_luma8().into_raw())
    };
    let mut data = vec![0.0; c * h * w];
    for i in 0..h * w {
        for ch in 0..c {
            data[ch * h * w + i] = dequantize(raw[i * c + ch]);
        }
    }
    Tensor::new(vec![c, h, w], data)
}

pub fn read_image(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| WinnError::io(path, e))?;
    match Format::from_path(path)? {
        Format::Pgm => decode_pgm(&bytes),
        Format::Png => decode_png(&bytes),
    }
}

/// Exact dump: magic, `u32` rank, `u64` dims, little-endian `f64` data.
pub fn encode_raw(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 8 * t.shape().len() + 8 * t.numel());
    out.extend_from_slice(RAW_MAGIC);
    out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_raw(bytes: &[u8]) -> Result<Tensor> {
    const WHAT: &str = "raw tensor";
    if bytes.len() < 12 || &bytes[..8] != RAW_MAGIC {
        return Err(parse_err(WHAT, 0, "missing magic"));
    }
    let rank = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let mut pos = 12;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let b = bytes
            .get(pos..pos + 8)
            .ok_or_else(|| parse_err(WHAT, pos, "truncated shape"))?;
        shape.push(u64::from_le_bytes(b.try_into().expect("8 bytes")) as usize);
        pos += 8;
    }
    let n = numel(&shape);
    if bytes.len() - pos != 8 * n {
        return Err(parse_err(
            WHAT,
            pos,
            format!("expected {} data bytes, found {}", 8 * n, bytes.len() - pos),
        ));
    }
    let data = bytes[pos..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Tensor::new(shape, data)
}

pub fn write_raw(t: &Tensor, path: &Path) -> Result<()> {
    write_file(path, &encode_raw(t))
}

pub fn read_raw(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| WinnError::io(path, e))?;
    decode_raw(&bytes)
}
