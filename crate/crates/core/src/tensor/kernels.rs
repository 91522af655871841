//! Raw forward math on plain slices. Every kernel uses a fixed loop order,
//! so results are bit-deterministic for identical inputs.

use crate::scalar::Scalar;

pub fn map2<E: Scalar>(a: &[E], b: &[E], f: impl Fn(E, E) -> E) -> Vec<E> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

pub fn map1<E: Scalar>(a: &[E], f: impl Fn(E) -> E) -> Vec<E> {
    a.iter().map(|&x| f(x)).collect()
}

pub fn sum<E: Scalar>(a: &[E]) -> E {
    a.iter().fold(E::zero(), |acc, &x| acc + x)
}

pub fn l2_norm<E: Scalar>(a: &[E]) -> E {
    a.iter().fold(E::zero(), |acc, &x| acc + x * x).sqrt()
}

/// [m,k] x [k,n] -> [m,n]
pub fn matmul<E: Scalar>(a: &[E], b: &[E], m: usize, k: usize, n: usize) -> Vec<E> {
    let mut out = vec![E::zero(); m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] = orow[j] + av * brow[j];
            }
        }
    }
    out
}

/// [m,n] -> [n,m]
pub fn transpose<E: Scalar>(a: &[E], m: usize, n: usize) -> Vec<E> {
    let mut out = vec![E::zero(); m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

/// Valid cross-correlation: x [ci,h,w], k [co,ci,kh,kw] -> [co,h-kh+1,w-kw+1].
pub fn conv_valid<E: Scalar>(
    x: &[E],
    (ci, h, w): (usize, usize, usize),
    k: &[E],
    (co, kh, kw): (usize, usize, usize),
) -> Vec<E> {
    let ho = h - kh + 1;
    let wo = w - kw + 1;
    let mut out = vec![E::zero(); co * ho * wo];
    for oc in 0..co {
        for icn in 0..ci {
            for u in 0..kh {
                for v in 0..kw {
                    let kv = k[((oc * ci + icn) * kh + u) * kw + v];
                    for i in 0..ho {
                        let xrow = &x[icn * h * w + (i + u) * w + v..][..wo];
                        let orow = &mut out[oc * ho * wo + i * wo..][..wo];
                        for j in 0..wo {
                            orow[j] = orow[j] + kv * xrow[j];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Adjoint of `conv_valid` in its input: g [co,ho,wo], k [co,ci,kh,kw]
/// -> dx [ci, ho+kh-1, wo+kw-1]; dx[ci, i+u, j+v] += g[co,i,j] * k[co,ci,u,v].
pub fn conv_input_grad<E: Scalar>(
    g: &[E],
    (co, ho, wo): (usize, usize, usize),
    k: &[E],
    (ci, kh, kw): (usize, usize, usize),
) -> Vec<E> {
    let h = ho + kh - 1;
    let w = wo + kw - 1;
    let mut out = vec![E::zero(); ci * h * w];
    for oc in 0..co {
        for icn in 0..ci {
            for u in 0..kh {
                for v in 0..kw {
                    let kv = k[((oc * ci + icn) * kh + u) * kw + v];
                    for i in 0..ho {
                        let grow = &g[oc * ho * wo + i * wo..][..wo];
                        let xrow = &mut out[icn * h * w + (i + u) * w + v..][..wo];
                        for j in 0..wo {
                            xrow[j] = xrow[j] + kv * grow[j];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Adjoint of `conv_valid` in its kernel: g [co,ho,wo], x [ci,h,w]
/// -> dw [co,ci,h-ho+1,w-wo+1]; dw[co,ci,u,v] = sum_ij g[co,i,j]*x[ci,i+u,j+v].
pub fn conv_weight_grad<E: Scalar>(
    g: &[E],
    (co, ho, wo): (usize, usize, usize),
    x: &[E],
    (ci, h, w): (usize, usize, usize),
) -> Vec<E> {
    let kh = h - ho + 1;
    let kw = w - wo + 1;
    let mut out = vec![E::zero(); co * ci * kh * kw];
    for oc in 0..co {
        for icn in 0..ci {
            for u in 0..kh {
                for v in 0..kw {
                    let mut acc = E::zero();
                    for i in 0..ho {
                        let grow = &g[oc * ho * wo + i * wo..][..wo];
                        let xrow = &x[icn * h * w + (i + u) * w + v..][..wo];
                        for j in 0..wo {
                            acc = acc + grow[j] * xrow[j];
                        }
                    }
                    out[((oc * ci + icn) * kh + u) * kw + v] = acc;
                }
            }
        }
    }
    out
}

pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; shape.len()];
    for d in (0..shape.len().saturating_sub(1)).rev() {
        s[d] = s[d + 1] * shape[d + 1];
    }
    s
}

/// Zero padding, `(lo, hi)` per axis.
pub fn pad<E: Scalar>(x: &[E], shape: &[usize], pads: &[(usize, usize)]) -> (Vec<usize>, Vec<E>) {
    let out_shape: Vec<usize> = shape
        .iter()
        .zip(pads)
        .map(|(&d, &(lo, hi))| lo + d + hi)
        .collect();
    let out_n: usize = out_shape.iter().product();
    let mut out = vec![E::zero(); out_n];
    let in_strides = strides(shape);
    let out_strides = strides(&out_shape);
    for (flat, &v) in x.iter().enumerate() {
        let mut rem = flat;
        let mut off = 0usize;
        for d in 0..shape.len() {
            let i = rem / in_strides[d];
            rem %= in_strides[d];
            off += (i + pads[d].0) * out_strides[d];
        }
        out[off] = v;
    }
    (out_shape, out)
}

/// Rectangular slice, `(offset, len)` per axis.
pub fn crop<E: Scalar>(
    x: &[E],
    shape: &[usize],
    region: &[(usize, usize)],
) -> (Vec<usize>, Vec<E>) {
    let out_shape: Vec<usize> = region.iter().map(|&(_, len)| len).collect();
    let out_n: usize = out_shape.iter().product();
    let mut out = vec![E::zero(); out_n];
    let in_strides = strides(shape);
    let out_strides = strides(&out_shape);
    for flat in 0..out_n {
        let mut rem = flat;
        let mut src = 0usize;
        for d in 0..shape.len() {
            let i = rem / out_strides[d];
            rem %= out_strides[d];
            src += (i + region[d].0) * in_strides[d];
        }
        out[flat] = x[src];
    }
    (out_shape, out)
}

/// [c,h,w] -> [c]
pub fn spatial_sum<E: Scalar>(x: &[E], (c, h, w): (usize, usize, usize)) -> Vec<E> {
    (0..c).map(|ch| sum(&x[ch * h * w..][..h * w])).collect()
}

/// [c] -> [c,h,w], each channel filled with its input value.
pub fn channel_broadcast<E: Scalar>(b: &[E], (h, w): (usize, usize)) -> Vec<E> {
    let mut out = Vec::with_capacity(b.len() * h * w);
    for &v in b {
        out.extend(std::iter::repeat(v).take(h * w));
    }
    out
}

/// 2x mean pooling, [c,h,w] -> [c,h/2,w/2] (h, w even).
pub fn avg_pool2<E: Scalar>(x: &[E], (c, h, w): (usize, usize, usize)) -> Vec<E> {
    let (ho, wo) = (h / 2, w / 2);
    let quarter = E::from_f64(0.25);
    let mut out = vec![E::zero(); c * ho * wo];
    for ch in 0..c {
        for i in 0..ho {
            for j in 0..wo {
                let base = ch * h * w + 2 * i * w + 2 * j;
                let s = x[base] + x[base + 1] + x[base + w] + x[base + w + 1];
                out[ch * ho * wo + i * wo + j] = s * quarter;
            }
        }
    }
    out
}

/// Adjoint of `avg_pool2`: [c,ho,wo] -> [c,2ho,2wo], each source value
/// spread over its 2x2 block at quarter weight.
pub fn avg_unpool2<E: Scalar>(x: &[E], (c, ho, wo): (usize, usize, usize)) -> Vec<E> {
    let (h, w) = (ho * 2, wo * 2);
    let quarter = E::from_f64(0.25);
    let mut out = vec![E::zero(); c * h * w];
    for ch in 0..c {
        for i in 0..ho {
            for j in 0..wo {
                let v = x[ch * ho * wo + i * wo + j] * quarter;
                let base = ch * h * w + 2 * i * w + 2 * j;
                out[base] = v;
                out[base + 1] = v;
                out[base + w] = v;
                out[base + w + 1] = v;
            }
        }
    }
    out
}

/// Numerically stable softmax cross-entropy forward:
/// loss = logsumexp(s) - s[label].
pub fn softmax_xent_forward<E: Scalar>(scores: &[E], label: usize) -> E {
    let m = scores
        .iter()
        .fold(E::neg_infinity(), |acc, &v| if v > acc { v } else { acc });
    let z = scores
        .iter()
        .fold(E::zero(), |acc, &v| acc + (v - m).exp());
    m + z.ln() - scores[label]
}

/// Softmax probabilities (used by prediction, not by the tape).
pub fn softmax<E: Scalar>(scores: &[E]) -> Vec<E> {
    let m = scores
        .iter()
        .fold(E::neg_infinity(), |acc, &v| if v > acc { v } else { acc });
    let e: Vec<E> = scores.iter().map(|&v| (v - m).exp()).collect();
    let z = sum(&e);
    e.iter().map(|&v| v / z).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_matches_by_hand() {
        // [1 2; 3 4] x [5 6; 7 8] = [19 22; 43 50]
        let a = [1.0f64, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        assert_eq!(matmul(&a, &b, 2, 2, 2), vec![19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn conv_valid_matches_naive_definition() {
        // cross-correlation, no kernel flip
        let x: Vec<f64> = (0..2 * 4 * 4).map(|i| (i as f64) * 0.3 - 2.0).collect();
        let k: Vec<f64> = (0..3 * 2 * 2 * 2).map(|i| (i as f64) * 0.1 - 0.5).collect();
        let got = conv_valid(&x, (2, 4, 4), &k, (3, 2, 2));
        let (ho, wo) = (3, 3);
        for oc in 0..3 {
            for i in 0..ho {
                for j in 0..wo {
                    let mut acc = 0.0;
                    for ci in 0..2 {
                        for u in 0..2 {
                            for v in 0..2 {
                                acc += x[ci * 16 + (i + u) * 4 + (j + v)]
                                    * k[((oc * 2 + ci) * 2 + u) * 2 + v];
                            }
                        }
                    }
                    let g = got[oc * ho * wo + i * wo + j];
                    assert!((g - acc).abs() < 1e-12, "mismatch at {oc},{i},{j}");
                }
            }
        }
    }

    #[test]
    fn conv_adjoints_satisfy_inner_product_identity() {
        // <conv(x,k), g> == <x, input_grad(g,k)> == <k, weight_grad(g,x)>
        let x: Vec<f64> = (0..2 * 5 * 5).map(|i| ((i * 7 % 13) as f64) - 6.0).collect();
        let k: Vec<f64> = (0..4 * 2 * 3 * 3).map(|i| ((i * 5 % 11) as f64) * 0.2).collect();
        let y = conv_valid(&x, (2, 5, 5), &k, (4, 3, 3));
        let g: Vec<f64> = (0..y.len()).map(|i| ((i % 5) as f64) - 2.0).collect();
        let lhs: f64 = y.iter().zip(&g).map(|(a, b)| a * b).sum();
        let dx = conv_input_grad(&g, (4, 3, 3), &k, (2, 3, 3));
        let rhs_x: f64 = x.iter().zip(&dx).map(|(a, b)| a * b).sum();
        let dk = conv_weight_grad(&g, (4, 3, 3), &x, (2, 5, 5));
        let rhs_k: f64 = k.iter().zip(&dk).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs_x).abs() < 1e-9, "{lhs} vs {rhs_x}");
        assert!((lhs - rhs_k).abs() < 1e-9, "{lhs} vs {rhs_k}");
    }

    #[test]
    fn pad_then_crop_round_trips() {
        let x: Vec<f64> = (0..6).map(|i| i as f64).collect();
        let (pshape, padded) = pad(&x, &[2, 3], &[(1, 0), (2, 1)]);
        assert_eq!(pshape, vec![3, 6]);
        assert_eq!(padded.iter().filter(|&&v| v != 0.0).count(), 5); // one zero value inside
        let (cshape, back) = crop(&padded, &pshape, &[(1, 2), (2, 3)]);
        assert_eq!(cshape, vec![2, 3]);
        assert_eq!(back, x);
    }

    #[test]
    fn pool_of_constant_is_constant() {
        let x = vec![3.0f64; 1 * 4 * 4];
        let p = avg_pool2(&x, (1, 4, 4));
        assert!(p.iter().all(|&v| (v - 3.0).abs() < 1e-15));
    }

    #[test]
    fn pool_unpool_adjoint_identity() {
        let x: Vec<f64> = (0..2 * 4 * 4).map(|i| (i as f64) * 0.1).collect();
        let y = avg_pool2(&x, (2, 4, 4));
        let g: Vec<f64> = (0..y.len()).map(|i| (i as f64) - 3.0).collect();
        let lhs: f64 = y.iter().zip(&g).map(|(a, b)| a * b).sum();
        let up = avg_unpool2(&g, (2, 2, 2));
        let rhs: f64 = x.iter().zip(&up).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn xent_uniform_scores_is_ln_k() {
        let loss = softmax_xent_forward(&[0.0f64, 0.0], 0);
        assert!((loss - (2.0f64).ln()).abs() < 1e-12);
        let loss3 = softmax_xent_forward(&[5.0f64, 5.0, 5.0], 2);
        assert!((loss3 - (3.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn xent_is_shift_invariant_and_stable() {
        let a = softmax_xent_forward(&[1.0f64, -2.0, 0.5], 1);
        let b = softmax_xent_forward(&[1001.0f64, 998.0, 1000.5], 1);
        assert!((a - b).abs() < 1e-9);
        assert!(b.is_finite());
    }
}
