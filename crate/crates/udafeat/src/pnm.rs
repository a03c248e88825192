//! Binary PPM (P6) images and PGM (P5) label maps, maxval 255.

use std::fs;
use std::path::Path;

use udafeat_core::{LabelMap, Tensor};

use crate::error::{format_err, io_err, Result};

/// Quantizes a `[3,H,W]` image in [0,1] to 8 bits per channel.
pub fn encode_ppm(image: &Tensor) -> Vec<u8> {
    let s = image.shape();
    let (h, w) = (s[1], s[2]);
    let plane = h * w;
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.reserve(3 * plane);
    for i in 0..plane {
        for c in 0..3 {
            let v = image.data()[c * plane + i].clamp(0.0, 1.0);
            out.push((v * 255.0).round() as u8);
        }
    }
    out
}

pub fn encode_pgm(labels: &LabelMap) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", labels.width(), labels.height()).into_bytes();
    out.extend_from_slice(labels.labels());
    out
}

struct Header {
    width: usize,
    height: usize,
    offset: usize,
}

fn parse_header(bytes: &[u8], magic: &[u8; 2]) -> std::result::Result<Header, String> {
    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err(format!("expected magic {}", String::from_utf8_lossy(magic)));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
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
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or("truncated header")?;
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err("missing separator after header".into());
    }
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(format!("unsupported maxval {maxval}"));
    }
    if width == 0 || height == 0 {
        return Err("zero image extent".into());
    }
    Ok(Header {
        width,
        height,
        offset: pos + 1,
    })
}

pub fn decode_ppm(bytes: &[u8]) -> std::result::Result<Tensor, String> {
    let h = parse_header(bytes, b"P6")?;
    let plane = h.width * h.height;
    let body = &bytes[h.offset..];
    if body.len() != 3 * plane {
        return Err(format!("expected {} pixel bytes, found {}", 3 * plane, body.len()));
    }
    let mut data = vec![0.0; 3 * plane];
    for (i, px) in body.chunks_exact(3).enumerate() {
        for c in 0..3 {
            data[c * plane + i] = f64::from(px[c]) / 255.0;
        }
    }
    Tensor::new(&[3, h.height, h.width], data).map_err(|e| e.to_string())
}

pub fn decode_pgm(bytes: &[u8]) -> std::result::Result<LabelMap, String> {
    let h = parse_header(bytes, b"P5")?;
    let body = &bytes[h.offset..];
    if body.len() != h.width * h.height {
        return Err(format!("expected {} pixel bytes, found {}", h.width * h.height, body.len()));
    }
    LabelMap::new(h.height, h.width, body.to_vec()).map_err(|e| e.to_string())
}

pub fn write_ppm(path: &Path, image: &Tensor) -> Result<()> {
    fs::write(path, encode_ppm(image)).map_err(io_err(path))
}

pub fn write_pgm(path: &Path, labels: &LabelMap) -> Result<()> {
    fs::write(path, encode_pgm(labels)).map_err(io_err(path))
}

pub fn read_ppm(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    decode_ppm(&bytes).map_err(|r| format_err(path, r))
}

pub fn read_pgm(path: &Path) -> Result<LabelMap> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    decode_pgm(&bytes).map_err(|r| format_err(path, r))
}
