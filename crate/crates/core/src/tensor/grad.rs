//! Reverse-mode differentiation over the record.
//!
//! The backward pass appends the adjoint of every visited node as ordinary
//! record nodes, so the result of a carried gradient pass is a valid input
//! to another gradient pass. Piecewise-constant factors (relu masks, abs
//! signs, the softmax max-shift) are detached as constant leaves; their
//! derivative is zero almost everywhere, which is the documented convention
//! at the kink points as well.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::record::{NodeId, Op, Record};
use crate::tensor::Tensor;

impl<E: Scalar> Record<E> {
    /// Gradient of a scalar node with respect to leaf nodes, returned as
    /// plain tensors. Nodes appended while differentiating are discarded
    /// afterwards, so repeated calls do not grow the record.
    ///
    /// A `wrt` entry the scalar does not depend on gets a zero tensor.
    pub fn gradient(&mut self, scalar: NodeId, wrt: &[NodeId]) -> Result<Vec<Tensor<E>>> {
        let mark = self.nodes.len();
        let ids = self.backward_ids(scalar, wrt)?;
        let out = ids.iter().map(|&id| self.value(id)).collect();
        self.nodes.truncate(mark);
        Ok(out)
    }

    /// Gradient of a scalar node with respect to leaf nodes, returned as
    /// recorded nodes. The returned nodes are ordinary ops, so they can be
    /// composed further and differentiated again.
    pub fn gradient_carried(&mut self, scalar: NodeId, wrt: &[NodeId]) -> Result<Vec<NodeId>> {
        self.backward_ids(scalar, wrt)
    }

    fn backward_ids(&mut self, scalar: NodeId, wrt: &[NodeId]) -> Result<Vec<NodeId>> {
        if !self.node(scalar).shape.is_empty() {
            return Err(Error::contract(format!(
                "gradient target must be a scalar node, got shape {:?}",
                self.node(scalar).shape
            )));
        }
        for &w in wrt {
            if !matches!(self.node(w).op, Op::Leaf) {
                return Err(Error::contract(
                    "gradient targets must be leaf nodes".to_string(),
                ));
            }
        }

        let upto = scalar.idx();
        let mut grads: Vec<Option<NodeId>> = vec![None; upto + 1];
        let seed = self.leaf_scalar(E::one());
        grads[upto] = Some(seed);

        for i in (0..=upto).rev() {
            let Some(g) = grads[i] else { continue };
            let op = self.nodes[i].op.clone();
            let me = NodeId(i as u32);
            match op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    self.accum(&mut grads, a, g)?;
                    self.accum(&mut grads, b, g)?;
                }
                Op::Sub(a, b) => {
                    self.accum(&mut grads, a, g)?;
                    let ng = self.scale(g, -1.0);
                    self.accum(&mut grads, b, ng)?;
                }
                Op::Mul(a, b) => {
                    let ga = self.mul(g, b)?;
                    self.accum(&mut grads, a, ga)?;
                    let gb = self.mul(g, a)?;
                    self.accum(&mut grads, b, gb)?;
                }
                Op::Scale(a, c) => {
                    let ga = self.scale(g, c);
                    self.accum(&mut grads, a, ga)?;
                }
                Op::Matmul(a, b) => {
                    let bt = self.transpose(b)?;
                    let ga = self.matmul(g, bt)?;
                    self.accum(&mut grads, a, ga)?;
                    let at = self.transpose(a)?;
                    let gb = self.matmul(at, g)?;
                    self.accum(&mut grads, b, gb)?;
                }
                Op::Transpose(a) => {
                    let ga = self.transpose(g)?;
                    self.accum(&mut grads, a, ga)?;
                }
                Op::ConvValid(x, k) => {
                    let gx = self.conv_input_grad(g, k)?;
                    self.accum(&mut grads, x, gx)?;
                    let gk = self.conv_weight_grad(g, x)?;
                    self.accum(&mut grads, k, gk)?;
                }
                Op::ConvInputGrad(a, k) => {
                    // forward: out = A*(a) with kernel k, out in input space.
                    // d/da is the forward conv; d/dk pairs a with g.
                    let ga = self.conv2d(g, k, super::record::ConvMode::Valid)?;
                    self.accum(&mut grads, a, ga)?;
                    let gk = self.conv_weight_grad(a, g)?;
                    self.accum(&mut grads, k, gk)?;
                }
                Op::ConvWeightGrad(a, x) => {
                    // forward: out[co,ci,u,v] = sum_ij a[co,i,j] x[ci,i+u,j+v]
                    let ga = self.conv2d(x, g, super::record::ConvMode::Valid)?;
                    self.accum(&mut grads, a, ga)?;
                    let gx = self.conv_input_grad(a, g)?;
                    self.accum(&mut grads, x, gx)?;
                }
                Op::Relu(a) => {
                    // derivative at exactly 0 is defined as 0
                    let mask: Vec<E> = self.nodes[a.idx()]
                        .value
                        .iter()
                        .map(|&v| if v > E::zero() { E::one() } else { E::zero() })
                        .collect();
                    let shape = self.nodes[a.idx()].shape.clone();
                    let mask_t = Tensor::from_vec(shape, mask)?;
                    let mask_id = self.leaf(&mask_t);
                    let ga = self.mul(g, mask_id)?;
                    self.accum(&mut grads, a, ga)?;
                }
                Op::Abs(a) => {
                    // sign(0) = 0
                    let sgn: Vec<E> = self.nodes[a.idx()]
                        .value
                        .iter()
                        .map(|&v| {
                            if v > E::zero() {
                                E::one()
                            } else if v < E::zero() {
                                -E::one()
                            } else {
                                E::zero()
                            }
                        })
                        .collect();
                    let shape = self.nodes[a.idx()].shape.clone();
                    let sgn_t = Tensor::from_vec(shape, sgn)?;
                    let sgn_id = self.leaf(&sgn_t);
                    let ga = self.mul(g, sgn_id)?;
                    self.accum(&mut grads, a, ga)?;
                }
                Op::Exp(a) => {
                    let ga = self.mul(g, me)?;
                    self.accum(&mut grads, a, ga)?;
                }
                Op::PowConst(a, p) => {
                    if p == 0.0 {
                        // constant one; no gradient
                    } else if p == 1.0 {
                        self.accum(&mut grads, a, g)?;
                    } else {
                        let pm1 = self.pow_const(a, p - 1.0);
                        let scaled = self.scale(pm1, p);
                        let ga = self.mul(g, scaled)?;
                        self.accum(&mut grads, a, ga)?;
                    }
                }
                Op::Sum(a) => {
                    let shape = self.nodes[a.idx()].shape.clone();
                    let ga = self.broadcast_scalar(g, &shape)?;
                    self.accum(&mut grads, a, ga)?;
                }
                Op::BroadcastScalar(a) => {
                    let ga = self.sum(g);
                    self.accum(&mut grads, a, ga)?;
                }
                Op::SpatialSum(a) => {
                    let shape = self.nodes[a.idx()].shape.clone();
                    let ga = self.channel_broadcast(g, shape[1], shape[2])?;
                    self.accum(&mut grads, a, ga)?;
                }
                Op::ChannelBroadcast(a) => {
                    let ga = self.spatial_sum(g)?;
                    self.accum(&mut grads, a, ga)?;
                }
                Op::AvgPool2(a) => {
                    let ga = self.avg_unpool2(g)?;
                    self.accum(&mut grads, a, ga)?;
                }
                Op::AvgUnpool2(a) => {
                    let ga = self.avg_pool2(g)?;
                    self.accum(&mut grads, a, ga)?;
                }
                Op::L2Norm(a) => {
                    // d‖a‖/da = a/‖a‖; defined as zero at the zero vector
                    if self.nodes[i].value[0] != E::zero() {
                        let inv = self.pow_const(me, -1.0);
                        let gs = self.mul(g, inv)?;
                        let shape = self.nodes[a.idx()].shape.clone();
                        let gb = self.broadcast_scalar(gs, &shape)?;
                        let ga = self.mul(gb, a)?;
                        self.accum(&mut grads, a, ga)?;
                    }
                }
                Op::SoftmaxXent(s, label) => {
                    // d/ds = softmax(s) - onehot(label), built from recorded
                    // ops so the loss gradient stays differentiable.
                    let shape = self.nodes[s.idx()].shape.clone();
                    let m = self.nodes[s.idx()]
                        .value
                        .iter()
                        .fold(E::neg_infinity(), |acc, &v| if v > acc { v } else { acc });
                    let m_id = self.leaf_scalar(m);
                    let mb = self.broadcast_scalar(m_id, &shape)?;
                    let shifted = self.sub(s, mb)?;
                    let e = self.exp(shifted);
                    let z = self.sum(e);
                    let zinv = self.pow_const(z, -1.0);
                    let zb = self.broadcast_scalar(zinv, &shape)?;
                    let sm = self.mul(e, zb)?;
                    let mut onehot = vec![E::zero(); shape[0]];
                    onehot[label] = E::one();
                    let oh_t = Tensor::from_vec(shape.clone(), onehot)?;
                    let oh = self.leaf(&oh_t);
                    let diff = self.sub(sm, oh)?;
                    let gb = self.broadcast_scalar(g, &shape)?;
                    let gs = self.mul(gb, diff)?;
                    self.accum(&mut grads, s, gs)?;
                }
                Op::Reshape(a) => {
                    let shape = self.nodes[a.idx()].shape.clone();
                    let ga = self.reshape(g, shape)?;
                    self.accum(&mut grads, a, ga)?;
                }
                Op::Pad(a, pads) => {
                    let shape = self.nodes[a.idx()].shape.clone();
                    let region: Vec<(usize, usize)> = pads
                        .iter()
                        .zip(&shape)
                        .map(|(&(lo, _), &d)| (lo, d))
                        .collect();
                    let ga = self.crop(g, &region)?;
                    self.accum(&mut grads, a, ga)?;
                }
                Op::Crop(a, region) => {
                    let shape = self.nodes[a.idx()].shape.clone();
                    let pads: Vec<(usize, usize)> = region
                        .iter()
                        .zip(&shape)
                        .map(|(&(off, len), &d)| (off, d - off - len))
                        .collect();
                    let ga = self.pad(g, &pads)?;
                    self.accum(&mut grads, a, ga)?;
                }
                Op::EmbedRow(table, row) => {
                    let rows = self.nodes[table.idx()].shape[0];
                    let ga = self.scatter_row(g, row, rows)?;
                    self.accum(&mut grads, table, ga)?;
                }
                Op::ScatterRow(v, row) => {
                    let ga = self.embed_row(g, row)?;
                    self.accum(&mut grads, v, ga)?;
                }
            }
        }

        let mut out = Vec::with_capacity(wrt.len());
        for &w in wrt {
            let id = match grads[w.idx()] {
                Some(id) => id,
                None => {
                    let zero = Tensor::zeros(&self.node(w).shape.clone());
                    self.leaf(&zero)
                }
            };
            out.push(id);
        }
        Ok(out)
    }

    fn accum(
        &mut self,
        grads: &mut [Option<NodeId>],
        target: NodeId,
        contrib: NodeId,
    ) -> Result<()> {
        grads[target.idx()] = Some(match grads[target.idx()] {
            Some(existing) => self.add(existing, contrib)?,
            None => contrib,
        });
        Ok(())
    }

}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::record::ConvMode;

    fn t(shape: &[usize], vals: &[f64]) -> Tensor<f64> {
        Tensor::from_f64s(shape, vals).unwrap()
    }

    #[test]
    fn grad_of_sum_of_squares() {
        // f = sum(x*x), df/dx = 2x
        let mut rec = Record::<f64>::new();
        let x = rec.leaf(&t(&[3], &[1.0, 2.0, 3.0]));
        let xx = rec.mul(x, x).unwrap();
        let f = rec.sum(xx);
        let g = rec.gradient(f, &[x]).unwrap();
        assert_eq!(g[0].data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn gradient_requires_scalar_target() {
        let mut rec = Record::<f64>::new();
        let x = rec.leaf(&t(&[2], &[1.0, 2.0]));
        let y = rec.relu(x);
        assert!(matches!(
            rec.gradient(y, &[x]),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn gradient_requires_leaf_targets() {
        let mut rec = Record::<f64>::new();
        let x = rec.leaf(&t(&[2], &[1.0, 2.0]));
        let y = rec.relu(x);
        let s = rec.sum(y);
        assert!(matches!(
            rec.gradient(s, &[y]),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn unreached_leaf_gets_zero_gradient() {
        let mut rec = Record::<f64>::new();
        let x = rec.leaf(&t(&[2], &[1.0, 2.0]));
        let unused = rec.leaf(&t(&[3], &[0.0, 0.0, 0.0]));
        let s = rec.sum(x);
        let g = rec.gradient(s, &[x, unused]).unwrap();
        assert_eq!(g[0].data(), &[1.0, 1.0]);
        assert_eq!(g[1].data(), &[0.0, 0.0, 0.0]);
        assert_eq!(g[1].shape(), &[3]);
    }

    #[test]
    fn gradient_discards_work_nodes() {
        let mut rec = Record::<f64>::new();
        let x = rec.leaf(&t(&[2], &[1.0, 2.0]));
        let xx = rec.mul(x, x).unwrap();
        let f = rec.sum(xx);
        let before = rec.len();
        let _ = rec.gradient(f, &[x]).unwrap();
        assert_eq!(rec.len(), before);
        // still usable afterwards
        let g2 = rec.gradient(f, &[x]).unwrap();
        assert_eq!(g2[0].data(), &[2.0, 4.0]);
    }

    #[test]
    fn second_order_of_sum_of_cubes() {
        // f = sum(x^3); d2f/dx2 applied to ones = 6x, checked at [1,2]
        let mut rec = Record::<f64>::new();
        let x = rec.leaf(&t(&[2], &[1.0, 2.0]));
        let xx = rec.mul(x, x).unwrap();
        let xxx = rec.mul(xx, x).unwrap();
        let f = rec.sum(xxx);
        let g = rec.gradient_carried(f, &[x]).unwrap()[0];
        // g = 3x^2; sum(g) has gradient 6x
        assert_eq!(rec.value(g).data(), &[3.0, 12.0]);
        let sg = rec.sum(g);
        let g2 = rec.gradient(sg, &[x]).unwrap();
        let diff: f64 = g2[0]
            .data()
            .iter()
            .zip(&[6.0, 12.0])
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(diff < 1e-10, "second order off by {diff}");
    }

    #[test]
    fn third_order_still_works() {
        // f = sum(x^4): f' = 4x^3, f'' -> sum -> 12x^2, f''' -> 24x
        let mut rec = Record::<f64>::new();
        let x = rec.leaf(&t(&[1], &[2.0]));
        let x2 = rec.mul(x, x).unwrap();
        let x4 = rec.mul(x2, x2).unwrap();
        let f = rec.sum(x4);
        let g1 = rec.gradient_carried(f, &[x]).unwrap()[0];
        let s1 = rec.sum(g1);
        let g2 = rec.gradient_carried(s1, &[x]).unwrap()[0];
        let s2 = rec.sum(g2);
        let g3 = rec.gradient(s2, &[x]).unwrap();
        assert!((g3[0].data()[0] - 48.0).abs() < 1e-9); // 24x at x=2
    }

    #[test]
    fn softmax_xent_gradient_is_probability_residual() {
        let mut rec = Record::<f64>::new();
        let s = rec.leaf(&t(&[3], &[1.0, 0.0, -1.0]));
        let loss = rec.softmax_xent(s, 0).unwrap();
        let g = rec.gradient(loss, &[s]).unwrap();
        let p = kernels_softmax(&[1.0, 0.0, -1.0]);
        assert!((g[0].data()[0] - (p[0] - 1.0)).abs() < 1e-12);
        assert!((g[0].data()[1] - p[1]).abs() < 1e-12);
        assert!((g[0].data()[2] - p[2]).abs() < 1e-12);
    }

    fn kernels_softmax(s: &[f64]) -> Vec<f64> {
        crate::tensor::kernels::softmax(s)
    }

    #[test]
    fn l2_norm_gradient_at_zero_vector_is_zero() {
        let mut rec = Record::<f64>::new();
        let x = rec.leaf(&t(&[3], &[0.0, 0.0, 0.0]));
        let n = rec.l2_norm(x);
        let g = rec.gradient(n, &[x]).unwrap();
        assert_eq!(g[0].data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn relu_gradient_at_zero_is_zero() {
        let mut rec = Record::<f64>::new();
        let x = rec.leaf(&t(&[3], &[-1.0, 0.0, 2.0]));
        let r = rec.relu(x);
        let s = rec.sum(r);
        let g = rec.gradient(s, &[x]).unwrap();
        assert_eq!(g[0].data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn fan_out_accumulates() {
        // f = sum(x*x) + sum(x) -> df/dx = 2x + 1
        let mut rec = Record::<f64>::new();
        let x = rec.leaf(&t(&[2], &[3.0, -1.0]));
        let xx = rec.mul(x, x).unwrap();
        let s1 = rec.sum(xx);
        let s2 = rec.sum(x);
        let f = rec.add(s1, s2).unwrap();
        let g = rec.gradient(f, &[x]).unwrap();
        assert_eq!(g[0].data(), &[7.0, -1.0]);
    }

    #[test]
    fn conv_gradient_flows_to_input_and_kernel() {
        let mut rec = Record::<f64>::new();
        let x = rec.leaf(&t(&[1, 3, 3], &[1., 2., 3., 4., 5., 6., 7., 8., 9.]));
        let k = rec.leaf(&t(&[1, 1, 2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let y = rec.conv2d(x, k, ConvMode::Valid).unwrap();
        let s = rec.sum(y);
        let g = rec.gradient(s, &[x, k]).unwrap();
        // each kernel tap contributes once per window it participates in
        assert_eq!(g[0].shape(), &[1, 3, 3]);
        assert_eq!(g[1].shape(), &[1, 1, 2, 2]);
        // dk[u,v] = sum over windows of x at that offset
        assert_eq!(g[1].data(), &[12.0, 16.0, 24.0, 28.0]);
    }

    #[test]
    fn identical_replays_are_bit_identical() {
        let build = || {
            let mut rec = Record::<f64>::new();
            let x = rec.leaf(&t(&[2, 3], &[0.3, -1.2, 0.7, 2.2, -0.4, 0.9]));
            let r = rec.relu(x);
            let s = rec.reshape(r, vec![6]).unwrap();
            let n = rec.l2_norm(s);
            rec.gradient(n, &[x]).unwrap()
        };
        let a = build();
        let b = build();
        assert!(a[0].bit_eq(&b[0]));
    }
}
