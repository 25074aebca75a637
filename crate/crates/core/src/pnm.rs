//! Binary PGM (P5) reading and writing.

use thiserror::Error;

use crate::tensor::{Shape, Tensor};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PnmError {
    #[error("not a binary PGM (expected magic P5)")]
    BadMagic,
    #[error("malformed PGM header: {0}")]
    Header(String),
    #[error("pixel data truncated: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
}

/// Grayscale raster with 8-bit (`maxval <= 255`) or 16-bit samples.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Gray {
    pub width: usize,
    pub height: usize,
    pub maxval: u16,
    pub samples: Vec<u16>,
}

impl Gray {
    /// Quantizes values in `[0, 1]` to `maxval` levels.
    pub fn from_unit(t: &Tensor<f32>, maxval: u16) -> Gray {
        let m = maxval as f32;
        Gray {
            width: t.width(),
            height: t.height(),
            maxval,
            samples: t.data().iter().map(|&v| (v.clamp(0.0, 1.0) * m).round() as u16).collect(),
        }
    }

    /// Values scaled to `[0, 1]` by `maxval`.
    pub fn to_unit(&self) -> Tensor<f32> {
        let m = self.maxval as f32;
        Tensor::from_vec(
            Shape::new(self.height, self.width, 1),
            self.samples.iter().map(|&s| s as f32 / m).collect(),
        )
        .expect("validated dimensions")
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n{}\n", self.width, self.height, self.maxval).into_bytes();
        if self.maxval <= 255 {
            out.extend(self.samples.iter().map(|&s| s as u8));
        } else {
            for s in &self.samples {
                out.extend_from_slice(&s.to_be_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Gray, PnmError> {
        if bytes.len() < 2 || &bytes[..2] != b"P5" {
            return Err(PnmError::BadMagic);
        }
        let mut pos = 2;
        let mut fields = [0usize; 3];
        for (i, name) in ["width", "height", "maxval"].iter().enumerate() {
            fields[i] = header_number(bytes, &mut pos).map_err(|e| PnmError::Header(format!("{name}: {e}")))?;
        }
        let [width, height, maxval] = fields;
        if width == 0 || height == 0 {
            return Err(PnmError::Header(format!("empty raster {width}x{height}")));
        }
        if maxval == 0 || maxval > 65535 {
            return Err(PnmError::Header(format!("maxval {maxval} outside 1..=65535")));
        }
        // exactly one whitespace byte separates the header from the raster
        match bytes.get(pos) {
            Some(b) if b.is_ascii_whitespace() => pos += 1,
            _ => return Err(PnmError::Header("missing separator before pixel data".into())),
        }
        let bpp = if maxval <= 255 { 1 } else { 2 };
        let n = width
            .checked_mul(height)
            .ok_or_else(|| PnmError::Header("dimensions overflow".into()))?;
        let expected = n * bpp;
        let data = &bytes[pos..];
        if data.len() < expected {
            return Err(PnmError::Truncated { expected, found: data.len() });
        }
        let samples = if bpp == 1 {
            data[..n].iter().map(|&b| b as u16).collect()
        } else {
            data[..expected].chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]])).collect()
        };
        Ok(Gray { width, height, maxval: maxval as u16, samples })
    }
}

fn header_number(bytes: &[u8], pos: &mut usize) -> Result<usize, String> {
    loop {
        match bytes.get(*pos) {
            Some(b) if b.is_ascii_whitespace() => *pos += 1,
            Some(b'#') => {
                while let Some(&b) = bytes.get(*pos) {
                    *pos += 1;
                    if b == b'\n' {
                        break;
                    }
                }
            }
            Some(b) if b.is_ascii_digit() => break,
            Some(b) => return Err(format!("unexpected byte {:?}", *b as char)),
            None => return Err("unexpected end of header".into()),
        }
    }
    let start = *pos;
    while bytes.get(*pos).is_some_and(u8::is_ascii_digit) {
        *pos += 1;
    }
    std::str::from_utf8(&bytes[start..*pos])
        .expect("ascii digits")
        .parse()
        .map_err(|e| format!("{e}"))
}
