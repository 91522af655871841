//! Binary image masks shared by the saliency ops and the localization
//! metrics.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

impl Mask {
    pub fn new(height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != height * width {
            return Err(Error::shape(format!(
                "mask bits {} != {}x{}",
                bits.len(),
                height,
                width
            )));
        }
        Ok(Mask {
            height,
            width,
            bits,
        })
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Mask {
            height,
            width,
            bits: vec![false; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn get(&self, r: usize, c: usize) -> bool {
        self.bits[r * self.width + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: bool) {
        self.bits[r * self.width + c] = v;
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.iter().all(|&b| !b)
    }

    /// Mean (row, col) of set pixels; `None` when the mask is empty.
    pub fn centroid(&self) -> Option<(f64, f64)> {
        let mut n = 0usize;
        let (mut sr, mut sc) = (0.0f64, 0.0f64);
        for r in 0..self.height {
            for c in 0..self.width {
                if self.get(r, c) {
                    n += 1;
                    sr += r as f64;
                    sc += c as f64;
                }
            }
        }
        if n == 0 {
            None
        } else {
            Some((sr / n as f64, sc / n as f64))
        }
    }

    /// Horizontal mirror, matching the image-space `hflip`.
    pub fn hflip(&self) -> Mask {
        let mut out = Mask::empty(self.height, self.width);
        for r in 0..self.height {
            for c in 0..self.width {
                out.set(r, c, self.get(r, self.width - 1 - c));
            }
        }
        out
    }

    /// Clockwise quarter turn, matching the image-space `rotate90`:
    /// out[r][c] = in[H-1-c][r].
    pub fn rotate90(&self) -> Mask {
        let mut out = Mask::empty(self.width, self.height);
        for r in 0..self.width {
            for c in 0..self.height {
                out.set(r, c, self.get(self.height - 1 - c, r));
            }
        }
        out
    }
}

/// Intersection-over-union of two same-shape masks. Defined as 0 when both
/// masks are empty; callers that need to distinguish that case check
/// emptiness themselves.
pub fn iou(a: &Mask, b: &Mask) -> Result<f64> {
    if a.height != b.height || a.width != b.width {
        return Err(Error::shape(format!(
            "iou masks {}x{} vs {}x{}",
            a.height, a.width, b.height, b.width
        )));
    }
    let mut inter = 0usize;
    let mut union = 0usize;
    for (&x, &y) in a.bits.iter().zip(&b.bits) {
        if x && y {
            inter += 1;
        }
        if x || y {
            union += 1;
        }
    }
    if union == 0 {
        Ok(0.0)
    } else {
        Ok(inter as f64 / union as f64)
    }
}
