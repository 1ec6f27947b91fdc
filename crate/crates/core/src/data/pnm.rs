//! Binary PPM (P6) images and PGM (P5) label masks, 8-bit only.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::mask::LabelMask;
use crate::tensor::{Shape4, Tensor};

/// Maps `[0, 1]` to a byte, rounding half up and clamping.
pub fn quantize(v: f32) -> u8 {
    (f64::from(v) * 255.0 + 0.5).floor().clamp(0.0, 255.0) as u8
}

pub fn dequantize(b: u8) -> f32 {
    f32::from(b) / 255.0
}

struct Header {
    width: usize,
    height: usize,
    payload_offset: usize,
}

/// Parses `magic`, width, height and maxval separated by whitespace, with
/// `#` comments, followed by exactly one whitespace byte.
fn parse_header(bytes: &[u8], magic: &[u8; 2]) -> Result<Header> {
    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err(Error::format(0, format!("expected magic {}", String::from_utf8_lossy(magic))));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for (k, field) in fields.iter_mut().enumerate() {
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
            let what = ["width", "height", "maxval"][k];
            return Err(Error::format(pos as u64, format!("expected {what}")));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::format(start as u64, "header number out of range"))?;
    }
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(Error::format(pos as u64, "expected whitespace after maxval")),
    }
    let [width, height, maxval] = fields;
    if width == 0 || height == 0 {
        return Err(Error::format(2, format!("empty image {width}x{height}")));
    }
    if maxval != 255 {
        return Err(Error::format(2, format!("only maxval 255 is supported, got {maxval}")));
    }
    Ok(Header {
        width,
        height,
        payload_offset: pos,
    })
}

fn payload<'a>(bytes: &'a [u8], header: &Header, channels: usize) -> Result<&'a [u8]> {
    let need = header.width * header.height * channels;
    let have = bytes.len() - header.payload_offset;
    if have < need {
        return Err(Error::format(
            bytes.len() as u64,
            format!("truncated payload: {have} of {need} bytes"),
        ));
    }
    Ok(&bytes[header.payload_offset..header.payload_offset + need])
}

pub fn encode_ppm(image: &Tensor) -> Result<Vec<u8>> {
    let s = image.shape();
    if s.n != 1 || s.c != 3 {
        return Err(Error::shape(format!("PPM needs a 1x3xHxW image, got {s}")));
    }
    let mut out = format!("P6\n{} {}\n255\n", s.w, s.h).into_bytes();
    let plane = s.plane();
    let d = image.data();
    out.reserve(3 * plane);
    for i in 0..plane {
        for c in 0..3 {
            out.push(quantize(d[c * plane + i]));
        }
    }
    Ok(out)
}

pub fn decode_ppm(bytes: &[u8]) -> Result<Tensor> {
    let header = parse_header(bytes, b"P6")?;
    let px = payload(bytes, &header, 3)?;
    let plane = header.width * header.height;
    let mut data = vec![0.0; 3 * plane];
    for (i, rgb) in px.chunks_exact(3).enumerate() {
        for c in 0..3 {
            data[c * plane + i] = dequantize(rgb[c]);
        }
    }
    Tensor::from_vec(Shape4::new(1, 3, header.height, header.width)?, data)
}

pub fn encode_pgm(mask: &LabelMask) -> Result<Vec<u8>> {
    if mask.n != 1 {
        return Err(Error::shape(format!("PGM holds one mask, got a batch of {}", mask.n)));
    }
    let mut out = format!("P5\n{} {}\n255\n", mask.w, mask.h).into_bytes();
    out.extend_from_slice(&mask.data);
    Ok(out)
}

pub fn decode_pgm(bytes: &[u8]) -> Result<LabelMask> {
    let header = parse_header(bytes, b"P5")?;
    let px = payload(bytes, &header, 1)?;
    LabelMask::new(1, header.height, header.width, px.to_vec())
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn with_path<T>(path: &Path, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::Format { offset, message } => Error::Format {
            offset,
            message: format!("{}: {message}", path.display()),
        },
        other => other,
    })
}

pub fn read_image(path: &Path) -> Result<Tensor> {
    with_path(path, decode_ppm(&read_bytes(path)?))
}

pub fn write_image(path: &Path, image: &Tensor) -> Result<()> {
    write_bytes(path, &encode_ppm(image)?)
}

pub fn read_mask(path: &Path) -> Result<LabelMask> {
    with_path(path, decode_pgm(&read_bytes(path)?))
}

pub fn write_mask(path: &Path, mask: &LabelMask) -> Result<()> {
    write_bytes(path, &encode_pgm(mask)?)
}
