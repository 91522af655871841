//! Synthetic bright-on-dark shapes: disks (class 0) and axis-aligned
//! squares (class 1) on a black background, with exact ground-truth masks
//! and centroids. Small enough to train both networks on one core, yet the
//! two classes differ in a way a 3×3 conv stack separates easily.

use crate::error::{Error, Result};
use crate::mask::Mask;
use crate::rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const CLASS_NAMES: [&str; 2] = ["disk", "square"];

#[derive(Clone, Debug)]
pub struct DatasetSpec {
    pub height: usize,
    pub width: usize,
    /// Half-extent of the object: disk radius, or half the square's side.
    pub min_half_extent: usize,
    pub max_half_extent: usize,
    /// Inclusive row/column bounds for the object center; the intersection
    /// with "fully inside the frame" must be nonempty for every size.
    pub row_range: (usize, usize),
    pub col_range: (usize, usize),
    pub intensity: (f64, f64),
    pub count: usize,
    pub seed: u64,
}

impl DatasetSpec {
    pub fn default_desk(count: usize, seed: u64) -> Self {
        DatasetSpec {
            height: 24,
            width: 24,
            min_half_extent: 3,
            max_half_extent: 6,
            row_range: (0, 23),
            col_range: (0, 23),
            intensity: (0.6, 1.0),
            count,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 {
            return Err(Error::contract("image dimensions must be positive".to_string()));
        }
        if self.min_half_extent < 1 || self.min_half_extent > self.max_half_extent {
            return Err(Error::contract(format!(
                "bad object size range [{}, {}]",
                self.min_half_extent, self.max_half_extent
            )));
        }
        if self.row_range.0 > self.row_range.1 || self.col_range.0 > self.col_range.1 {
            return Err(Error::contract("empty placement region".to_string()));
        }
        if !(self.intensity.0 > 0.0 && self.intensity.0 <= self.intensity.1) {
            return Err(Error::contract(format!(
                "bad intensity range [{}, {}]",
                self.intensity.0, self.intensity.1
            )));
        }
        // the largest object must fit somewhere in the placement region
        let r = self.max_half_extent;
        let (rlo, rhi) = clamp_center(self.row_range, r, self.height)?;
        let (clo, chi) = clamp_center(self.col_range, r, self.width)?;
        let _ = (rlo, rhi, clo, chi);
        Ok(())
    }
}

/// Valid center positions along one axis: inside the placement bounds and
/// keeping the object of half-extent `r` fully in the frame.
fn clamp_center(bounds: (usize, usize), r: usize, extent: usize) -> Result<(usize, usize)> {
    if extent < 2 * r + 1 {
        return Err(Error::contract(format!(
            "object of half-extent {r} cannot fit in {extent} pixels"
        )));
    }
    let lo = bounds.0.max(r);
    let hi = bounds.1.min(extent - 1 - r);
    if lo > hi {
        return Err(Error::contract(format!(
            "no valid center in [{}, {}] for half-extent {r}",
            bounds.0, bounds.1
        )));
    }
    Ok((lo, hi))
}

#[derive(Clone, Debug)]
pub struct Sample<E: Scalar> {
    pub id: String,
    pub image: Tensor<E>,
    pub label: usize,
    pub mask: Mask,
    pub centroid: (f64, f64),
}

/// Deterministic shapes dataset. Labels alternate disk/square so an even
/// count splits the classes exactly. Each sample draws from its own
/// subseeded stream in the fixed order (half-extent, intensity, center
/// row, center column); samples are therefore independent of `count`.
pub fn make_shapes_dataset<E: Scalar>(spec: &DatasetSpec) -> Result<Vec<Sample<E>>> {
    spec.validate()?;
    let (h, w) = (spec.height, spec.width);
    let mut out = Vec::with_capacity(spec.count);
    for i in 0..spec.count {
        let label = i % 2;
        let mut r = rng::rng_from(rng::sub_seed(spec.seed, i as u64));
        let half = rng::uniform_usize(&mut r, spec.min_half_extent, spec.max_half_extent);
        let intensity = rng::uniform_f64(&mut r, spec.intensity.0, spec.intensity.1);
        let (rlo, rhi) = clamp_center(spec.row_range, half, h)?;
        let (clo, chi) = clamp_center(spec.col_range, half, w)?;
        let cr = rng::uniform_usize(&mut r, rlo, rhi);
        let cc = rng::uniform_usize(&mut r, clo, chi);

        let mut mask = Mask::empty(h, w);
        let mut data = vec![E::zero(); h * w];
        for p in 0..h {
            for q in 0..w {
                let dr = p as isize - cr as isize;
                let dc = q as isize - cc as isize;
                let inside = if label == 0 {
                    dr * dr + dc * dc <= (half * half) as isize
                } else {
                    dr.unsigned_abs() <= half && dc.unsigned_abs() <= half
                };
                if inside {
                    mask.set(p, q, true);
                    data[p * w + q] = E::from_f64(intensity);
                }
            }
        }
        let centroid = mask.centroid().expect("object is never empty");
        out.push(Sample {
            id: format!("{}-{i:04}", CLASS_NAMES[label]),
            image: Tensor::from_vec(vec![1, h, w], data)?,
            label,
            mask,
            centroid,
        });
    }
    Ok(out)
}

pub fn labelled_images<E: Scalar>(samples: &[Sample<E>]) -> Vec<(Tensor<E>, usize)> {
    samples.iter().map(|s| (s.image.clone(), s.label)).collect()
}
