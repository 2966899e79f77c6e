//! Binary PPM (P6) and PGM (P5) codecs, maxval 255 only.
//!
//! Masks are stored as P5 with values restricted to `{0, 255}`.

use std::path::Path;

use thiserror::Error;

use super::{BinaryMask, RgbImage};

const MAX_PIXELS: usize = 1 << 28;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PnmError {
    #[error("bad magic: expected {expected}, found {found:?}")]
    BadMagic { expected: &'static str, found: String },
    #[error("malformed header: {0}")]
    BadHeader(String),
    #[error("unsupported maxval {0}, only 255 is accepted")]
    UnsupportedMaxval(u32),
    #[error("short payload: expected {expected} bytes, found {found}")]
    ShortPayload { expected: usize, found: usize },
    #[error("non-binary mask: value {value} at pixel ({row}, {col})")]
    NonBinaryMask { value: u8, row: usize, col: usize },
    #[error("i/o error on {path}: {message}")]
    Io { path: String, message: String },
}

impl PnmError {
    fn io(path: &Path, e: std::io::Error) -> Self {
        PnmError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        }
    }
}

struct Header {
    width: usize,
    height: usize,
    payload_start: usize,
}

fn parse_header(bytes: &[u8], magic: &'static str) -> Result<Header, PnmError> {
    if bytes.len() < 2 || &bytes[..2] != magic.as_bytes() {
        let found = String::from_utf8_lossy(&bytes[..bytes.len().min(2)]).into_owned();
        return Err(PnmError::BadMagic {
            expected: magic,
            found,
        });
    }
    let mut pos = 2;
    let mut fields = [0u32; 3];
    for (k, field) in fields.iter_mut().enumerate() {
        // whitespace and comments
        let start_ws = pos;
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
        if pos == start_ws {
            return Err(PnmError::BadHeader(format!(
                "expected whitespace before header field {k}"
            )));
        }
        let digits_start = pos;
        while bytes.get(pos).is_some_and(|b| b.is_ascii_digit()) {
            pos += 1;
        }
        if pos == digits_start {
            return Err(PnmError::BadHeader(format!("header field {k} is not a number")));
        }
        let text = std::str::from_utf8(&bytes[digits_start..pos]).expect("ascii digits");
        *field = text
            .parse()
            .map_err(|_| PnmError::BadHeader(format!("header field {k} out of range")))?;
    }
    let [width, height, maxval] = fields;
    if width == 0 || height == 0 {
        return Err(PnmError::BadHeader(format!("zero dimension {width}x{height}")));
    }
    if (width as usize).saturating_mul(height as usize) > MAX_PIXELS {
        return Err(PnmError::BadHeader(format!("image {width}x{height} too large")));
    }
    if maxval != 255 {
        return Err(PnmError::UnsupportedMaxval(maxval));
    }
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => {
            return Err(PnmError::BadHeader(
                "missing single whitespace after maxval".into(),
            ))
        }
    }
    Ok(Header {
        width: width as usize,
        height: height as usize,
        payload_start: pos,
    })
}

fn payload<'a>(bytes: &'a [u8], header: &Header, channels: usize) -> Result<&'a [u8], PnmError> {
    let expected = header.width * header.height * channels;
    let found = bytes.len() - header.payload_start;
    if found < expected {
        return Err(PnmError::ShortPayload { expected, found });
    }
    Ok(&bytes[header.payload_start..header.payload_start + expected])
}

pub fn decode_ppm(bytes: &[u8]) -> Result<RgbImage, PnmError> {
    let header = parse_header(bytes, "P6")?;
    let data = payload(bytes, &header, 3)?
        .iter()
        .map(|&b| b as f32 / 255.0)
        .collect();
    Ok(RgbImage::new(header.height, header.width, data).expect("validated dimensions"))
}

pub fn encode_ppm(image: &RgbImage) -> Vec<u8> {
    let bytes: Vec<u8> = image.data().iter().map(|&v| to_byte(v)).collect();
    encode_ppm_rgb8(image.height(), image.width(), &bytes)
}

/// Encodes an already quantised interleaved RGB buffer.
pub fn encode_ppm_rgb8(height: usize, width: usize, rgb: &[u8]) -> Vec<u8> {
    assert_eq!(rgb.len(), height * width * 3, "rgb buffer length");
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(rgb);
    out
}

pub fn decode_pgm_mask(bytes: &[u8]) -> Result<BinaryMask, PnmError> {
    let header = parse_header(bytes, "P5")?;
    let raw = payload(bytes, &header, 1)?;
    let mut data = Vec::with_capacity(raw.len());
    for (i, &b) in raw.iter().enumerate() {
        match b {
            0 => data.push(false),
            255 => data.push(true),
            value => {
                return Err(PnmError::NonBinaryMask {
                    value,
                    row: i / header.width,
                    col: i % header.width,
                })
            }
        }
    }
    Ok(BinaryMask::new(header.height, header.width, data).expect("validated dimensions"))
}

pub fn encode_pgm_mask(mask: &BinaryMask) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", mask.width(), mask.height()).into_bytes();
    out.extend(mask.data().iter().map(|&v| if v { 255u8 } else { 0 }));
    out
}

pub fn to_byte(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn read_ppm(path: impl AsRef<Path>) -> Result<RgbImage, PnmError> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| PnmError::io(path, e))?;
    decode_ppm(&bytes)
}

pub fn write_ppm(path: impl AsRef<Path>, image: &RgbImage) -> Result<(), PnmError> {
    let path = path.as_ref();
    std::fs::write(path, encode_ppm(image)).map_err(|e| PnmError::io(path, e))
}

pub fn write_ppm_rgb8(
    path: impl AsRef<Path>,
    height: usize,
    width: usize,
    rgb: &[u8],
) -> Result<(), PnmError> {
    let path = path.as_ref();
    std::fs::write(path, encode_ppm_rgb8(height, width, rgb)).map_err(|e| PnmError::io(path, e))
}

pub fn read_pgm(path: impl AsRef<Path>) -> Result<BinaryMask, PnmError> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| PnmError::io(path, e))?;
    decode_pgm_mask(&bytes)
}

pub fn write_pgm(path: impl AsRef<Path>, mask: &BinaryMask) -> Result<(), PnmError> {
    let path = path.as_ref();
    std::fs::write(path, encode_pgm_mask(mask)).map_err(|e| PnmError::io(path, e))
}
