//! From a generated image to a binary object mask: threshold at the
//! midpoint of the image's own range, keep the largest 4-connected
//! component. The shapes domain is bright-on-dark, so this needs no
//! learned segmentation.

use crate::error::{Error, Result};
use crate::mask::Mask;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct OutputMask {
    pub mask: Mask,
    /// Set when the image was blank (max − min below 1e-6): the mask is
    /// empty by rule, not by thresholding.
    pub blank: bool,
}

pub fn object_mask_of_output<E: Scalar>(x: &Tensor<E>) -> Result<OutputMask> {
    let (h, w) = match x.shape() {
        [h, w] => (*h, *w),
        [1, h, w] => (*h, *w),
        other => {
            return Err(Error::shape(format!(
                "expected an [h, w] or [1, h, w] image, got {other:?}"
            )))
        }
    };
    if !x.all_finite() {
        return Err(Error::NonFinite("output image".to_string()));
    }
    let vals = x.to_f64_vec();
    let min = vals.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max - min < 1e-6 {
        return Ok(OutputMask { mask: Mask::empty(h, w), blank: true });
    }
    let threshold = (min + max) / 2.0;
    let bright: Vec<bool> = vals.iter().map(|&v| v >= threshold).collect();

    // largest 4-connected component, first-found wins ties (row-major scan)
    let mut labels = vec![0usize; h * w];
    let mut best: (usize, Vec<usize>) = (0, Vec::new());
    let mut next_label = 1usize;
    let mut stack = Vec::new();
    for start in 0..h * w {
        if !bright[start] || labels[start] != 0 {
            continue;
        }
        let mut members = Vec::new();
        stack.push(start);
        labels[start] = next_label;
        while let Some(i) = stack.pop() {
            members.push(i);
            let (r, c) = (i / w, i % w);
            let mut visit = |j: usize| {
                if bright[j] && labels[j] == 0 {
                    labels[j] = next_label;
                    stack.push(j);
                }
            };
            if r > 0 {
                visit(i - w);
            }
            if r + 1 < h {
                visit(i + w);
            }
            if c > 0 {
                visit(i - 1);
            }
            if c + 1 < w {
                visit(i + 1);
            }
        }
        if members.len() > best.1.len() {
            best = (next_label, members);
        }
        next_label += 1;
    }
    let mut mask = Mask::empty(h, w);
    for &i in &best.1 {
        mask.set(i / w, i % w, true);
    }
    Ok(OutputMask { mask, blank: false })
}

pub fn centroid_offset(a: (f64, f64), b: (f64, f64)) -> f64 {
    let dr = a.0 - b.0;
    let dc = a.1 - b.1;
    (dr * dr + dc * dc).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mask::iou;
    use crate::pipeline::dataset::{make_shapes_dataset, DatasetSpec};

    #[test]
    fn recovers_dataset_ground_truth() {
        let samples = make_shapes_dataset::<f64>(&DatasetSpec::default_desk(30, 19)).unwrap();
        for s in &samples {
            let out = object_mask_of_output(&s.image).unwrap();
            assert!(!out.blank);
            let score = iou(&out.mask, &s.mask).unwrap();
            assert!(score >= 0.95, "{}: iou {score}", s.id);
        }
    }

    #[test]
    fn blank_image_gives_flagged_empty_mask() {
        let zeros = Tensor::<f64>::zeros(&[1, 6, 6]);
        let out = object_mask_of_output(&zeros).unwrap();
        assert!(out.blank && out.mask.is_empty());
        let nearly = Tensor::<f64>::full(&[6, 6], 0.5);
        let out2 = object_mask_of_output(&nearly).unwrap();
        assert!(out2.blank);
    }

    #[test]
    fn keeps_only_the_larger_blob() {
        let mut vals = vec![0.0f64; 64];
        // 3×3 blob and a 1-pixel blob, separated
        for r in 1..4 {
            for c in 1..4 {
                vals[r * 8 + c] = 1.0;
            }
        }
        vals[6 * 8 + 6] = 1.0;
        let x = Tensor::<f64>::from_f64s(&[8, 8], &vals).unwrap();
        let out = object_mask_of_output(&x).unwrap();
        assert_eq!(out.mask.count(), 9);
        assert!(!out.mask.get(6, 6));
    }

    #[test]
    fn diagonal_pixels_are_not_connected() {
        let mut vals = vec![0.0f64; 16];
        vals[0] = 1.0; // (0,0)
        vals[5] = 1.0; // (1,1) touches only diagonally
        vals[6] = 1.0; // (1,2) joins (1,1)
        let x = Tensor::<f64>::from_f64s(&[4, 4], &vals).unwrap();
        let out = object_mask_of_output(&x).unwrap();
        assert_eq!(out.mask.count(), 2);
        assert!(out.mask.get(1, 1) && out.mask.get(1, 2));
    }

    #[test]
    fn rejects_bad_inputs() {
        let nan = Tensor::<f64>::from_f64s(&[2, 2], &[f64::NAN, 0.0, 0.0, 0.0]).unwrap();
        assert!(object_mask_of_output(&nan).is_err());
        let flat = Tensor::<f64>::zeros(&[8]);
        assert!(object_mask_of_output(&flat).is_err());
    }

    #[test]
    fn centroid_offset_is_euclidean() {
        assert_eq!(centroid_offset((0.0, 0.0), (3.0, 4.0)), 5.0);
        assert_eq!(centroid_offset((1.0, 1.0), (1.0, 1.0)), 0.0);
    }
}
