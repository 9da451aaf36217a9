//! Middlebury `.flo` and binary PPM (`P6`) codecs.

use std::path::Path;

use crate::error::{Error, Result};
use crate::flownet::{FlowField, ValidMask};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const FLO_MAGIC: &[u8; 4] = b"PIEH";
/// Components above this magnitude mark unknown flow.
pub const FLO_UNKNOWN_THRESHOLD: f32 = 1e9;
const FLO_UNKNOWN: f32 = 1e10;
/// Largest extent accepted when reading.
const MAX_EXTENT: i64 = 1 << 20;

fn flo_bytes(width: usize, height: usize, values: impl Iterator<Item = f32>) -> Vec<u8> {
    let mut buf = Vec::with_capacity(12 + width * height * 8);
    buf.extend_from_slice(FLO_MAGIC);
    buf.extend_from_slice(&(width as i32).to_le_bytes());
    buf.extend_from_slice(&(height as i32).to_le_bytes());
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf
}

pub fn encode_flo<T: Scalar>(flow: &FlowField<T>) -> Vec<u8> {
    flo_bytes(
        flow.width(),
        flow.height(),
        flow.data().iter().map(|v| v.to_f32().unwrap_or(f32::NAN)),
    )
}

/// Encodes with the unknown marker at pixels outside `valid`.
pub fn encode_flo_masked<T: Scalar>(flow: &FlowField<T>, valid: &ValidMask) -> Result<Vec<u8>> {
    valid.check_matches(flow, "encode_flo")?;
    let values = flow.data().chunks(2).zip(valid.bits()).flat_map(|(v, &ok)| {
        if ok {
            [v[0].to_f32().unwrap_or(f32::NAN), v[1].to_f32().unwrap_or(f32::NAN)]
        } else {
            [FLO_UNKNOWN; 2]
        }
    });
    Ok(flo_bytes(flow.width(), flow.height(), values))
}

/// Decodes a `.flo` buffer. Pixels carrying the unknown marker are zeroed
/// in the field and cleared in the mask.
pub fn decode_flo_masked(buf: &[u8]) -> Result<(FlowField<f32>, ValidMask)> {
    if buf.len() < 4 {
        return Err(Error::Truncated {
            what: ".flo header",
            needed: 12,
            found: buf.len(),
        });
    }
    if &buf[..4] != FLO_MAGIC {
        return Err(Error::BadMagic {
            what: ".flo",
            expected: FLO_MAGIC.to_vec(),
            found: buf[..4].to_vec(),
        });
    }
    if buf.len() < 12 {
        return Err(Error::Truncated {
            what: ".flo header",
            needed: 12,
            found: buf.len(),
        });
    }
    let int = |o: usize| i32::from_le_bytes([buf[o], buf[o + 1], buf[o + 2], buf[o + 3]]) as i64;
    let (width, height) = (int(4), int(8));
    if width <= 0 || height <= 0 || width > MAX_EXTENT || height > MAX_EXTENT {
        return Err(Error::DimensionOverflow {
            what: ".flo",
            width,
            height,
        });
    }
    let (w, h) = (width as usize, height as usize);
    let needed = 12 + w * h * 8;
    if buf.len() < needed {
        return Err(Error::Truncated {
            what: ".flo data",
            needed,
            found: buf.len(),
        });
    }
    if buf.len() > needed {
        return Err(Error::Malformed {
            what: ".flo",
            detail: format!("{} trailing bytes", buf.len() - needed),
        });
    }
    let mut data = Vec::with_capacity(w * h * 2);
    let mut bits = Vec::with_capacity(w * h);
    for px in buf[12..].chunks_exact(8) {
        let dx = f32::from_le_bytes([px[0], px[1], px[2], px[3]]);
        let dy = f32::from_le_bytes([px[4], px[5], px[6], px[7]]);
        let known = dx.abs() <= FLO_UNKNOWN_THRESHOLD && dy.abs() <= FLO_UNKNOWN_THRESHOLD;
        if known {
            data.extend([dx, dy]);
        } else {
            data.extend([0.0, 0.0]);
        }
        bits.push(known);
    }
    Ok((FlowField::new(Tensor::new([h, w, 2], data)?)?, ValidMask::new(h, w, bits)?))
}

pub fn decode_flo(buf: &[u8]) -> Result<FlowField<f32>> {
    decode_flo_masked(buf).map(|(f, _)| f)
}

pub fn write_flo<T: Scalar>(flow: &FlowField<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_flo(flow)).map_err(|e| Error::io(path, e))
}

pub fn write_flo_masked<T: Scalar>(flow: &FlowField<T>, valid: &ValidMask, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_flo_masked(flow, valid)?).map_err(|e| Error::io(path, e))
}

pub fn read_flo(path: impl AsRef<Path>) -> Result<FlowField<f32>> {
    read_flo_masked(path).map(|(f, _)| f)
}

pub fn read_flo_masked(path: impl AsRef<Path>) -> Result<(FlowField<f32>, ValidMask)> {
    let path = path.as_ref();
    decode_flo_masked(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}

/// `P6` with maxval 255; channel values are clamped to `[0, 1]` and
/// rounded to the nearest level.
pub fn encode_ppm<T: Scalar>(image: &Tensor<T>) -> Result<Vec<u8>> {
    let (h, w, c) = image.dims3("encode_ppm")?;
    if c != 3 {
        return Err(Error::shape("encode_ppm", format!("3 channels expected, got {c}")));
    }
    let mut buf = format!("P6\n{w} {h}\n255\n").into_bytes();
    buf.extend(image.data().iter().map(|&v| {
        let v = v.as_f64();
        let v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
        (v * 255.0).round() as u8
    }));
    Ok(buf)
}

fn ppm_err(detail: impl Into<String>) -> Error {
    Error::Malformed {
        what: "ppm",
        detail: detail.into(),
    }
}

pub fn decode_ppm(buf: &[u8]) -> Result<Tensor<f32>> {
    let mut pos = 0;
    let mut token = || -> Result<String> {
        loop {
            while pos < buf.len() && buf[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < buf.len() && buf[pos] == b'#' {
                while pos < buf.len() && buf[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < buf.len() && !buf[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(ppm_err("header ends early"));
        }
        Ok(String::from_utf8_lossy(&buf[start..pos]).into_owned())
    };
    let magic = token()?;
    if magic != "P6" {
        return Err(Error::BadMagic {
            what: "ppm",
            expected: b"P6".to_vec(),
            found: magic.into_bytes(),
        });
    }
    let mut num = |name: &str| -> Result<usize> {
        let t = token()?;
        t.parse().map_err(|_| ppm_err(format!("bad {name} `{t}`")))
    };
    let (w, h, maxval) = (num("width")?, num("height")?, num("maxval")?);
    if maxval != 255 {
        return Err(ppm_err(format!("maxval {maxval} unsupported, expected 255")));
    }
    if w == 0 || h == 0 || w as i64 > MAX_EXTENT || h as i64 > MAX_EXTENT {
        return Err(Error::DimensionOverflow {
            what: "ppm",
            width: w as i64,
            height: h as i64,
        });
    }
    // exactly one whitespace byte separates header and payload
    let start = pos + 1;
    let needed = start + w * h * 3;
    if buf.len() < needed {
        return Err(Error::Truncated {
            what: "ppm data",
            needed,
            found: buf.len(),
        });
    }
    let data = buf[start..needed].iter().map(|&b| b as f32 / 255.0).collect();
    Tensor::new([h, w, 3], data)
}

pub fn write_ppm<T: Scalar>(image: &Tensor<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_ppm(image)?).map_err(|e| Error::io(path, e))
}

pub fn read_ppm(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    let path = path.as_ref();
    decode_ppm(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}
