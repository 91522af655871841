//! Binary PGM (P5) with 16-bit samples, the on-disk image form for every
//! rendered map and generated output. Encoding stretches the image's own
//! min/max onto [0, 65535], so files are for looking at, not for exact
//! numerics; exact tensors travel in checkpoint archives instead.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const MAXVAL: u32 = 65535;

fn image_dims(shape: &[usize]) -> Result<(usize, usize)> {
    match shape {
        [h, w] => Ok((*h, *w)),
        [1, h, w] => Ok((*h, *w)),
        other => Err(Error::shape(format!(
            "pgm wants an [h, w] or [1, h, w] image, got {other:?}"
        ))),
    }
}

/// Affine min-max quantization: min ↦ 0, max ↦ 65535, round half away
/// from zero. A constant image encodes to all zeros.
pub fn encode_pgm_bytes<E: Scalar>(x: &Tensor<E>) -> Result<Vec<u8>> {
    let (h, w) = image_dims(x.shape())?;
    if !x.all_finite() {
        return Err(Error::NonFinite("pgm encode input".to_string()));
    }
    let vals = x.to_f64_vec();
    let min = vals.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = max - min;
    let mut out = Vec::with_capacity(32 + 2 * vals.len());
    write!(out, "P5\n{w} {h}\n{MAXVAL}\n").expect("vec write");
    for v in vals {
        let q = if span < 1e-12 {
            0u16
        } else {
            ((v - min) / span * MAXVAL as f64).round() as u16
        };
        out.extend_from_slice(&q.to_be_bytes());
    }
    Ok(out)
}

pub fn encode_pgm<E: Scalar>(x: &Tensor<E>, path: &Path) -> Result<()> {
    let bytes = encode_pgm_bytes(x)?;
    std::fs::write(path, bytes)?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn err(&self, message: impl Into<String>) -> Error {
        Error::Parse { offset: self.pos, message: message.into() }
    }

    /// Skip whitespace and `#` comments (comment runs to end of line).
    fn skip_separators(&mut self) {
        while self.pos < self.bytes.len() {
            let b = self.bytes[self.pos];
            if b.is_ascii_whitespace() {
                self.pos += 1;
            } else if b == b'#' {
                while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                    self.pos += 1;
                }
            } else {
                break;
            }
        }
    }

    fn token(&mut self) -> Result<&'a [u8]> {
        self.skip_separators();
        let start = self.pos;
        while self.pos < self.bytes.len() && !self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        if self.pos == start {
            Err(Error::Parse { offset: start, message: "unexpected end of header".to_string() })
        } else {
            Ok(&self.bytes[start..self.pos])
        }
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        let start_err_pos = {
            self.skip_separators();
            self.pos
        };
        let tok = self.token()?;
        std::str::from_utf8(tok)
            .ok()
            .and_then(|s| s.parse::<usize>().ok())
            .ok_or_else(|| Error::Parse {
                offset: start_err_pos,
                message: format!("{what} is not a decimal number"),
            })
    }
}

/// Parse a P5/65535 file back to an [h, w] image with values in [0, 1]
/// (sample / 65535). Errors carry the byte offset of the trouble spot.
pub fn decode_pgm_bytes(bytes: &[u8]) -> Result<Tensor<f64>> {
    let mut cur = Cursor { bytes, pos: 0 };
    let magic = cur.token()?;
    if magic != b"P5" {
        return Err(Error::Parse {
            offset: 0,
            message: format!("expected magic P5, got {:?}", String::from_utf8_lossy(magic)),
        });
    }
    let w = cur.number("width")?;
    let h = cur.number("height")?;
    if w == 0 || h == 0 {
        return Err(cur.err("zero image dimension"));
    }
    let maxval = cur.number("maxval")?;
    if maxval != MAXVAL as usize {
        return Err(cur.err(format!("unsupported maxval {maxval}, want {MAXVAL}")));
    }
    // exactly one whitespace byte separates the header from the payload
    if cur.pos >= bytes.len() || !bytes[cur.pos].is_ascii_whitespace() {
        return Err(cur.err("missing separator before payload"));
    }
    cur.pos += 1;
    let need = 2 * w * h;
    let have = bytes.len() - cur.pos;
    if have != need {
        return Err(cur.err(format!("payload has {have} bytes, want {need}")));
    }
    let mut data = Vec::with_capacity(w * h);
    for i in 0..w * h {
        let off = cur.pos + 2 * i;
        let q = u16::from_be_bytes([bytes[off], bytes[off + 1]]);
        data.push(q as f64 / MAXVAL as f64);
    }
    Tensor::from_vec(vec![h, w], data)
}

pub fn decode_pgm(path: &Path) -> Result<Tensor<f64>> {
    let bytes = std::fs::read(path)?;
    decode_pgm_bytes(&bytes)
}
