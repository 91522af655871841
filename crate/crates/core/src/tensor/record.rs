use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{kernels, Tensor};

/// Handle to a node on a [`Record`]. Only valid for the record that minted
/// it; handles past a truncation point are invalidated.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug)]
pub struct NodeId(pub(crate) u32);

impl NodeId {
    pub(crate) fn idx(self) -> usize {
        self.0 as usize
    }
}

/// Node operation. Inputs always precede the node on the tape, so reverse
/// index order is a valid reverse topological order.
#[derive(Clone, Debug)]
pub(crate) enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Matmul(NodeId, NodeId),
    Transpose(NodeId),
    ConvValid(NodeId, NodeId),
    /// Adjoint of ConvValid in its input; a first-class op so that
    /// gradients of convolutions are themselves differentiable.
    ConvInputGrad(NodeId, NodeId),
    /// Adjoint of ConvValid in its kernel.
    ConvWeightGrad(NodeId, NodeId),
    Relu(NodeId),
    Abs(NodeId),
    Exp(NodeId),
    PowConst(NodeId, f64),
    Sum(NodeId),
    /// Scalar -> this node's shape.
    BroadcastScalar(NodeId),
    SpatialSum(NodeId),
    /// [c] -> [c,h,w] (h, w from this node's shape).
    ChannelBroadcast(NodeId),
    AvgPool2(NodeId),
    AvgUnpool2(NodeId),
    L2Norm(NodeId),
    SoftmaxXent(NodeId, usize),
    Reshape(NodeId),
    Pad(NodeId, Vec<(usize, usize)>),
    /// (offset, len) per axis.
    Crop(NodeId, Vec<(usize, usize)>),
    EmbedRow(NodeId, usize),
    /// Place a [d] vector at the given row of a zero [rows, d] matrix.
    ScatterRow(NodeId, usize),
}

pub(crate) struct Node<E> {
    pub op: Op,
    pub shape: Vec<usize>,
    pub value: Vec<E>,
}

/// Convolution padding mode. `Same` zero-pads so the spatial size is
/// preserved; it requires odd kernel extents.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConvMode {
    Valid,
    Same,
}

/// The public operation vocabulary for [`Record::apply`]. Structured
/// parameters (scale factor, pad widths, target label, ...) ride along with
/// the op kind; tensor operands are passed as node ids.
#[derive(Clone, Debug)]
pub enum OpSpec {
    Add,
    Sub,
    Mul,
    Scale(f64),
    Matmul,
    Conv2d(ConvMode),
    Relu,
    Sum,
    Mean,
    L2Norm,
    Dot,
    SoftmaxCrossEntropy { label: usize },
    Reshape(Vec<usize>),
    Pad(Vec<(usize, usize)>),
    EmbedLookup { row: usize },
}

/// Append-only computation record with eager values and lazy gradients.
pub struct Record<E: Scalar> {
    pub(crate) nodes: Vec<Node<E>>,
}

impl<E: Scalar> Default for Record<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Scalar> Record<E> {
    pub fn new() -> Self {
        Record { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, value: Vec<E>) -> NodeId {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        assert!(self.nodes.len() < u32::MAX as usize, "record full");
        self.nodes.push(Node { op, shape, value });
        NodeId((self.nodes.len() - 1) as u32)
    }

    pub(crate) fn node(&self, id: NodeId) -> &Node<E> {
        &self.nodes[id.idx()]
    }

    /// Registers a tensor as a leaf. Leaves are the only valid gradient
    /// targets; constants are leaves nothing differentiates against.
    pub fn leaf(&mut self, t: &Tensor<E>) -> NodeId {
        self.push(Op::Leaf, t.shape().to_vec(), t.data().to_vec())
    }

    pub fn leaf_scalar(&mut self, v: E) -> NodeId {
        self.push(Op::Leaf, Vec::new(), vec![v])
    }

    pub fn value(&self, id: NodeId) -> Tensor<E> {
        let n = self.node(id);
        Tensor::from_vec(n.shape.clone(), n.value.clone()).expect("node shape/value consistent")
    }

    pub fn shape_of(&self, id: NodeId) -> &[usize] {
        &self.node(id).shape
    }

    pub fn scalar_value_of(&self, id: NodeId) -> Result<E> {
        let n = self.node(id);
        if !n.shape.is_empty() {
            return Err(Error::shape(format!(
                "expected scalar node, got shape {:?}",
                n.shape
            )));
        }
        Ok(n.value[0])
    }

    fn same_shape(&self, a: NodeId, b: NodeId, what: &str) -> Result<()> {
        if self.node(a).shape != self.node(b).shape {
            return Err(Error::shape(format!(
                "{what}: {:?} vs {:?}",
                self.node(a).shape,
                self.node(b).shape
            )));
        }
        Ok(())
    }

    // ── Elementwise and scalar ops ─────────────────────────────────────

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "add")?;
        let v = kernels::map2(&self.node(a).value, &self.node(b).value, |x, y| x + y);
        Ok(self.push(Op::Add(a, b), self.node(a).shape.clone(), v))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "sub")?;
        let v = kernels::map2(&self.node(a).value, &self.node(b).value, |x, y| x - y);
        Ok(self.push(Op::Sub(a, b), self.node(a).shape.clone(), v))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "mul")?;
        let v = kernels::map2(&self.node(a).value, &self.node(b).value, |x, y| x * y);
        Ok(self.push(Op::Mul(a, b), self.node(a).shape.clone(), v))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let ce = E::from_f64(c);
        let v = kernels::map1(&self.node(a).value, |x| x * ce);
        self.push(Op::Scale(a, c), self.node(a).shape.clone(), v)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = kernels::map1(&self.node(a).value, |x| {
            if x > E::zero() {
                x
            } else {
                E::zero()
            }
        });
        self.push(Op::Relu(a), self.node(a).shape.clone(), v)
    }

    pub fn abs(&mut self, a: NodeId) -> NodeId {
        let v = kernels::map1(&self.node(a).value, |x| x.abs());
        self.push(Op::Abs(a), self.node(a).shape.clone(), v)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let v = kernels::map1(&self.node(a).value, |x| x.exp());
        self.push(Op::Exp(a), self.node(a).shape.clone(), v)
    }

    pub fn pow_const(&mut self, a: NodeId, p: f64) -> NodeId {
        let pe = E::from_f64(p);
        let v = kernels::map1(&self.node(a).value, |x| x.powf(pe));
        self.push(Op::PowConst(a, p), self.node(a).shape.clone(), v)
    }

    // ── Linear algebra ─────────────────────────────────────────────────

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (&self.node(a).shape, &self.node(b).shape);
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape(format!("matmul {:?} x {:?}", sa, sb)));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let v = kernels::matmul(&self.node(a).value, &self.node(b).value, m, k, n);
        Ok(self.push(Op::Matmul(a, b), vec![m, n], v))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let sa = &self.node(a).shape;
        if sa.len() != 2 {
            return Err(Error::shape(format!("transpose needs rank 2, got {:?}", sa)));
        }
        let (m, n) = (sa[0], sa[1]);
        let v = kernels::transpose(&self.node(a).value, m, n);
        Ok(self.push(Op::Transpose(a), vec![n, m], v))
    }

    // ── Convolution ────────────────────────────────────────────────────

    fn conv_shapes(&self, x: NodeId, k: NodeId) -> Result<((usize, usize, usize), (usize, usize, usize))> {
        let (sx, sk) = (&self.node(x).shape, &self.node(k).shape);
        if sx.len() != 3 || sk.len() != 4 {
            return Err(Error::shape(format!(
                "conv2d wants input [c,h,w] and kernel [co,ci,kh,kw], got {:?} and {:?}",
                sx, sk
            )));
        }
        if sx[0] != sk[1] {
            return Err(Error::shape(format!(
                "conv2d channels: input has {}, kernel expects {}",
                sx[0], sk[1]
            )));
        }
        Ok(((sx[0], sx[1], sx[2]), (sk[0], sk[2], sk[3])))
    }

    pub fn conv2d(&mut self, x: NodeId, k: NodeId, mode: ConvMode) -> Result<NodeId> {
        let ((ci, h, w), (co, kh, kw)) = self.conv_shapes(x, k)?;
        match mode {
            ConvMode::Valid => {
                if kh > h || kw > w {
                    return Err(Error::shape(format!(
                        "conv2d valid: kernel {}x{} exceeds input {}x{}",
                        kh, kw, h, w
                    )));
                }
                let v = kernels::conv_valid(
                    &self.node(x).value,
                    (ci, h, w),
                    &self.node(k).value,
                    (co, kh, kw),
                );
                Ok(self.push(Op::ConvValid(x, k), vec![co, h - kh + 1, w - kw + 1], v))
            }
            ConvMode::Same => {
                if kh % 2 == 0 || kw % 2 == 0 {
                    return Err(Error::contract(format!(
                        "conv2d same requires odd kernel extents, got {}x{}",
                        kh, kw
                    )));
                }
                let (ph, pw) = (kh / 2, kw / 2);
                let padded = self.pad(x, &[(0, 0), (ph, ph), (pw, pw)])?;
                self.conv2d(padded, k, ConvMode::Valid)
            }
        }
    }

    /// Adjoint of valid conv2d in its input, exposed as a first-class op.
    pub fn conv_input_grad(&mut self, g: NodeId, k: NodeId) -> Result<NodeId> {
        let (sg, sk) = (&self.node(g).shape, &self.node(k).shape);
        if sg.len() != 3 || sk.len() != 4 || sg[0] != sk[0] {
            return Err(Error::shape(format!(
                "conv_input_grad: cotangent {:?} vs kernel {:?}",
                sg, sk
            )));
        }
        let (co, ho, wo) = (sg[0], sg[1], sg[2]);
        let (ci, kh, kw) = (sk[1], sk[2], sk[3]);
        let v = kernels::conv_input_grad(
            &self.node(g).value,
            (co, ho, wo),
            &self.node(k).value,
            (ci, kh, kw),
        );
        Ok(self.push(
            Op::ConvInputGrad(g, k),
            vec![ci, ho + kh - 1, wo + kw - 1],
            v,
        ))
    }

    /// Adjoint of valid conv2d in its kernel, exposed as a first-class op.
    pub fn conv_weight_grad(&mut self, g: NodeId, x: NodeId) -> Result<NodeId> {
        let (sg, sx) = (&self.node(g).shape, &self.node(x).shape);
        if sg.len() != 3 || sx.len() != 3 || sg[1] > sx[1] || sg[2] > sx[2] {
            return Err(Error::shape(format!(
                "conv_weight_grad: cotangent {:?} vs input {:?}",
                sg, sx
            )));
        }
        let (co, ho, wo) = (sg[0], sg[1], sg[2]);
        let (ci, h, w) = (sx[0], sx[1], sx[2]);
        let v = kernels::conv_weight_grad(
            &self.node(g).value,
            (co, ho, wo),
            &self.node(x).value,
            (ci, h, w),
        );
        Ok(self.push(
            Op::ConvWeightGrad(g, x),
            vec![co, ci, h - ho + 1, w - wo + 1],
            v,
        ))
    }

    // ── Reductions and broadcasts ──────────────────────────────────────

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let v = kernels::sum(&self.node(a).value);
        self.push(Op::Sum(a), Vec::new(), vec![v])
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        let n = self.node(a).value.len();
        if n == 0 {
            return Err(Error::contract("mean of empty tensor".to_string()));
        }
        let s = self.sum(a);
        Ok(self.scale(s, 1.0 / n as f64))
    }

    pub fn broadcast_scalar(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        if !self.node(a).shape.is_empty() {
            return Err(Error::shape(format!(
                "broadcast source must be scalar, got {:?}",
                self.node(a).shape
            )));
        }
        let v = vec![self.node(a).value[0]; shape.iter().product()];
        Ok(self.push(Op::BroadcastScalar(a), shape.to_vec(), v))
    }

    pub fn spatial_sum(&mut self, a: NodeId) -> Result<NodeId> {
        let sa = &self.node(a).shape;
        if sa.len() != 3 {
            return Err(Error::shape(format!("spatial_sum needs [c,h,w], got {:?}", sa)));
        }
        let (c, h, w) = (sa[0], sa[1], sa[2]);
        let v = kernels::spatial_sum(&self.node(a).value, (c, h, w));
        Ok(self.push(Op::SpatialSum(a), vec![c], v))
    }

    pub fn channel_broadcast(&mut self, a: NodeId, h: usize, w: usize) -> Result<NodeId> {
        let sa = &self.node(a).shape;
        if sa.len() != 1 {
            return Err(Error::shape(format!(
                "channel_broadcast needs [c], got {:?}",
                sa
            )));
        }
        let c = sa[0];
        let v = kernels::channel_broadcast(&self.node(a).value, (h, w));
        Ok(self.push(Op::ChannelBroadcast(a), vec![c, h, w], v))
    }

    pub fn avg_pool2(&mut self, a: NodeId) -> Result<NodeId> {
        let sa = &self.node(a).shape;
        if sa.len() != 3 || sa[1] % 2 != 0 || sa[2] % 2 != 0 {
            return Err(Error::shape(format!(
                "avg_pool2 needs [c,h,w] with even h,w, got {:?}",
                sa
            )));
        }
        let (c, h, w) = (sa[0], sa[1], sa[2]);
        let v = kernels::avg_pool2(&self.node(a).value, (c, h, w));
        Ok(self.push(Op::AvgPool2(a), vec![c, h / 2, w / 2], v))
    }

    pub fn avg_unpool2(&mut self, a: NodeId) -> Result<NodeId> {
        let sa = &self.node(a).shape;
        if sa.len() != 3 {
            return Err(Error::shape(format!("avg_unpool2 needs [c,h,w], got {:?}", sa)));
        }
        let (c, ho, wo) = (sa[0], sa[1], sa[2]);
        let v = kernels::avg_unpool2(&self.node(a).value, (c, ho, wo));
        Ok(self.push(Op::AvgUnpool2(a), vec![c, ho * 2, wo * 2], v))
    }

    // ── Norms, losses, composites ──────────────────────────────────────

    pub fn l2_norm(&mut self, a: NodeId) -> NodeId {
        let v = kernels::l2_norm(&self.node(a).value);
        self.push(Op::L2Norm(a), Vec::new(), vec![v])
    }

    /// 1-D dot product; a composite of mul and sum.
    pub fn dot(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (&self.node(a).shape, &self.node(b).shape);
        if sa.len() != 1 || sb.len() != 1 || sa[0] != sb[0] {
            return Err(Error::shape(format!("dot {:?} . {:?}", sa, sb)));
        }
        let m = self.mul(a, b)?;
        Ok(self.sum(m))
    }

    pub fn softmax_xent(&mut self, scores: NodeId, label: usize) -> Result<NodeId> {
        let sa = &self.node(scores).shape;
        if sa.len() != 1 || sa[0] < 2 {
            return Err(Error::shape(format!(
                "softmax_xent needs a class-score vector of length >= 2, got {:?}",
                sa
            )));
        }
        if label >= sa[0] {
            return Err(Error::contract(format!(
                "softmax_xent label {} out of range for {} classes",
                label, sa[0]
            )));
        }
        let v = kernels::softmax_xent_forward(&self.node(scores).value, label);
        Ok(self.push(Op::SoftmaxXent(scores, label), Vec::new(), vec![v]))
    }

    // ── Shape ops ──────────────────────────────────────────────────────

    pub fn reshape(&mut self, a: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let n: usize = shape.iter().product();
        if n != self.node(a).value.len() {
            return Err(Error::shape(format!(
                "reshape {:?} -> {:?} changes element count",
                self.node(a).shape,
                shape
            )));
        }
        let v = self.node(a).value.clone();
        Ok(self.push(Op::Reshape(a), shape, v))
    }

    pub fn pad(&mut self, a: NodeId, pads: &[(usize, usize)]) -> Result<NodeId> {
        let sa = self.node(a).shape.clone();
        if pads.len() != sa.len() {
            return Err(Error::shape(format!(
                "pad spec has {} axes for shape {:?}",
                pads.len(),
                sa
            )));
        }
        let (shape, v) = kernels::pad(&self.node(a).value, &sa, pads);
        Ok(self.push(Op::Pad(a, pads.to_vec()), shape, v))
    }

    pub fn crop(&mut self, a: NodeId, region: &[(usize, usize)]) -> Result<NodeId> {
        let sa = self.node(a).shape.clone();
        if region.len() != sa.len() {
            return Err(Error::shape(format!(
                "crop spec has {} axes for shape {:?}",
                region.len(),
                sa
            )));
        }
        for (d, &(off, len)) in region.iter().enumerate() {
            if off + len > sa[d] || len == 0 {
                return Err(Error::shape(format!(
                    "crop axis {}: offset {} + len {} exceeds dim {}",
                    d, off, len, sa[d]
                )));
            }
        }
        let (shape, v) = kernels::crop(&self.node(a).value, &sa, region);
        Ok(self.push(Op::Crop(a, region.to_vec()), shape, v))
    }

    pub fn embed_row(&mut self, table: NodeId, row: usize) -> Result<NodeId> {
        let st = &self.node(table).shape;
        if st.len() != 2 {
            return Err(Error::shape(format!(
                "embed_row table must be [rows, dim], got {:?}",
                st
            )));
        }
        if row >= st[0] {
            return Err(Error::contract(format!(
                "embed_row index {} out of range for {} rows",
                row, st[0]
            )));
        }
        let d = st[1];
        let v = self.node(table).value[row * d..(row + 1) * d].to_vec();
        Ok(self.push(Op::EmbedRow(table, row), vec![d], v))
    }

    pub fn scatter_row(&mut self, vec: NodeId, row: usize, rows: usize) -> Result<NodeId> {
        let sv = &self.node(vec).shape;
        if sv.len() != 1 {
            return Err(Error::shape(format!("scatter_row needs [d], got {:?}", sv)));
        }
        if row >= rows {
            return Err(Error::contract(format!(
                "scatter_row index {} out of range for {} rows",
                row, rows
            )));
        }
        let d = sv[0];
        let mut v = vec![E::zero(); rows * d];
        v[row * d..(row + 1) * d].copy_from_slice(&self.node(vec).value);
        Ok(self.push(Op::ScatterRow(vec, row), vec![rows, d], v))
    }

    // ── Public dispatcher ──────────────────────────────────────────────

    /// Applies one op from the public vocabulary. Output values are
    /// computed immediately; the node is recorded for later gradients.
    pub fn apply(&mut self, op: &OpSpec, inputs: &[NodeId]) -> Result<NodeId> {
        fn arity(name: &str, want: usize, got: usize) -> Result<()> {
            if want != got {
                return Err(Error::contract(format!(
                    "{name} takes {want} input(s), got {got}"
                )));
            }
            Ok(())
        }
        match op {
            OpSpec::Add => {
                arity("add", 2, inputs.len())?;
                self.add(inputs[0], inputs[1])
            }
            OpSpec::Sub => {
                arity("sub", 2, inputs.len())?;
                self.sub(inputs[0], inputs[1])
            }
            OpSpec::Mul => {
                arity("mul", 2, inputs.len())?;
                self.mul(inputs[0], inputs[1])
            }
            OpSpec::Scale(c) => {
                arity("scale", 1, inputs.len())?;
                Ok(self.scale(inputs[0], *c))
            }
            OpSpec::Matmul => {
                arity("matmul", 2, inputs.len())?;
                self.matmul(inputs[0], inputs[1])
            }
            OpSpec::Conv2d(mode) => {
                arity("conv2d", 2, inputs.len())?;
                self.conv2d(inputs[0], inputs[1], *mode)
            }
            OpSpec::Relu => {
                arity("relu", 1, inputs.len())?;
                Ok(self.relu(inputs[0]))
            }
            OpSpec::Sum => {
                arity("sum", 1, inputs.len())?;
                Ok(self.sum(inputs[0]))
            }
            OpSpec::Mean => {
                arity("mean", 1, inputs.len())?;
                self.mean(inputs[0])
            }
            OpSpec::L2Norm => {
                arity("l2_norm", 1, inputs.len())?;
                Ok(self.l2_norm(inputs[0]))
            }
            OpSpec::Dot => {
                arity("dot", 2, inputs.len())?;
                self.dot(inputs[0], inputs[1])
            }
            OpSpec::SoftmaxCrossEntropy { label } => {
                arity("softmax_cross_entropy", 1, inputs.len())?;
                self.softmax_xent(inputs[0], *label)
            }
            OpSpec::Reshape(shape) => {
                arity("reshape", 1, inputs.len())?;
                self.reshape(inputs[0], shape.clone())
            }
            OpSpec::Pad(pads) => {
                arity("pad", 1, inputs.len())?;
                self.pad(inputs[0], pads)
            }
            OpSpec::EmbedLookup { row } => {
                arity("embed_lookup", 1, inputs.len())?;
                self.embed_row(inputs[0], *row)
            }
        }
    }
}

/// One-shot eager evaluation of an op on plain tensors (no gradients kept).
pub fn eval<E: Scalar>(op: &OpSpec, inputs: &[&Tensor<E>]) -> Result<Tensor<E>> {
    let mut rec = Record::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| rec.leaf(t)).collect();
    let out = rec.apply(op, &ids)?;
    Ok(rec.value(out))
}
