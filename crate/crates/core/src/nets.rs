//! The two trainable networks: a small convolutional classifier whose loss
//! drives noise inversion, and a class-conditioned denoiser that predicts the
//! noise component of a diffused image.
//!
//! Both models keep their parameters as a plain list of tensors in a fixed,
//! documented order, so a flat parameter vector is well defined:
//!
//! classifier: conv0.w, conv0.b, conv1.w, conv1.b, ..., head.w, head.b
//! denoiser:   conv0.w, conv0.b, ..., convL.w, convL.b, class_table,
//!             proj0, proj1, ..., projL
//!
//! Flattening walks that order and concatenates row-major element runs;
//! `unflatten_params` inverts it exactly.

use crate::error::{Error, Result};
use crate::rng::{self, SeededRng};
use crate::scalar::Scalar;
use crate::tensor::{ConvMode, NodeId, Record, Tensor};

// ── Parameter plumbing ─────────────────────────────────────────────────

pub fn flatten_params<E: Scalar>(params: &[Tensor<E>]) -> Tensor<E> {
    let total: usize = params.iter().map(|p| p.numel()).sum();
    let mut out = Vec::with_capacity(total);
    for p in params {
        out.extend_from_slice(p.data());
    }
    Tensor::from_vec(vec![total], out).expect("lengths sum to total")
}

pub fn unflatten_params<E: Scalar>(
    flat: &Tensor<E>,
    shapes: &[Vec<usize>],
) -> Result<Vec<Tensor<E>>> {
    let total: usize = shapes.iter().map(|s| s.iter().product::<usize>()).sum();
    if flat.shape() != [total] {
        return Err(Error::shape(format!(
            "flat parameter vector has shape {:?}, expected [{total}]",
            flat.shape()
        )));
    }
    let mut out = Vec::with_capacity(shapes.len());
    let mut off = 0;
    for s in shapes {
        let n: usize = s.iter().product();
        out.push(Tensor::from_vec(
            s.clone(),
            flat.data()[off..off + n].to_vec(),
        )?);
        off += n;
    }
    Ok(out)
}

/// Concatenate recorded nodes into one flat vector node. Built from
/// reshape + pad + add, so it differentiates like any other recorded op.
pub fn record_concat_flat<E: Scalar>(rec: &mut Record<E>, parts: &[NodeId]) -> Result<NodeId> {
    if parts.is_empty() {
        return Err(Error::contract("concat of zero parts".to_string()));
    }
    let lens: Vec<usize> = parts
        .iter()
        .map(|&id| rec.shape_of(id).iter().product())
        .collect();
    let total: usize = lens.iter().sum();
    let mut acc: Option<NodeId> = None;
    let mut off = 0;
    for (&id, &n) in parts.iter().zip(&lens) {
        let row = rec.reshape(id, vec![n])?;
        let placed = rec.pad(row, &[(off, total - off - n)])?;
        acc = Some(match acc {
            None => placed,
            Some(a) => rec.add(a, placed)?,
        });
        off += n;
    }
    Ok(acc.expect("at least one part"))
}

// ── Loss models ────────────────────────────────────────────────────────

/// Anything with parameters and a scalar loss over (input, label). The
/// provided methods give the flat parameter gradient either as a plain
/// tensor or as a recorded node that stays differentiable w.r.t. the input.
pub trait LossModel<E: Scalar> {
    fn input_shape(&self) -> Vec<usize>;
    fn params(&self) -> &[Tensor<E>];
    fn record_loss(
        &self,
        rec: &mut Record<E>,
        param_ids: &[NodeId],
        x: NodeId,
        y: usize,
    ) -> Result<NodeId>;

    fn push_params(&self, rec: &mut Record<E>) -> Vec<NodeId> {
        self.params().iter().map(|p| rec.leaf(p)).collect()
    }

    fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.numel()).sum()
    }

    /// Flat ∂loss/∂θ as a record node; gradients of functions of this node
    /// w.r.t. `x` are exact because the backward pass is itself recorded.
    fn record_flat_param_gradient(
        &self,
        rec: &mut Record<E>,
        x: NodeId,
        y: usize,
    ) -> Result<NodeId> {
        let pids = self.push_params(rec);
        let loss = self.record_loss(rec, &pids, x, y)?;
        let gids = rec.gradient_carried(loss, &pids)?;
        record_concat_flat(rec, &gids)
    }

    /// Flat ∂loss/∂θ evaluated at `x`, no graph kept.
    fn param_gradient(&self, x: &Tensor<E>, y: usize) -> Result<Tensor<E>> {
        let mut rec = Record::new();
        let x_id = rec.leaf(x);
        let flat = self.record_flat_param_gradient(&mut rec, x_id, y)?;
        Ok(rec.value(flat))
    }
}

/// L(x) = (θ·x − y)² / 2. Two parameters, closed-form everything; used to
/// pin the inversion objective against hand-computed values.
#[derive(Clone)]
pub struct QuadraticProbe<E: Scalar> {
    params: [Tensor<E>; 1],
}

impl<E: Scalar> QuadraticProbe<E> {
    pub fn new(theta: Tensor<E>) -> Result<Self> {
        if theta.shape().len() != 1 {
            return Err(Error::contract("probe parameter must be a vector".to_string()));
        }
        Ok(QuadraticProbe { params: [theta] })
    }
}

impl<E: Scalar> LossModel<E> for QuadraticProbe<E> {
    fn input_shape(&self) -> Vec<usize> {
        self.params[0].shape().to_vec()
    }

    fn params(&self) -> &[Tensor<E>] {
        &self.params
    }

    fn record_loss(
        &self,
        rec: &mut Record<E>,
        param_ids: &[NodeId],
        x: NodeId,
        y: usize,
    ) -> Result<NodeId> {
        let d = rec.dot(param_ids[0], x)?;
        let target = rec.leaf_scalar(E::from_f64(y as f64));
        let r = rec.sub(d, target)?;
        let sq = rec.pow_const(r, 2.0);
        Ok(rec.scale(sq, 0.5))
    }
}

// ── Classifier ─────────────────────────────────────────────────────────

#[derive(Clone, Debug, PartialEq)]
pub struct ConvSpec {
    pub out_channels: usize,
    pub kernel: usize,
}

/// Every conv block is: same-padding conv, relu, 2x mean-pool. A linear map
/// on the flattened final feature map produces class scores.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierArch {
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    pub convs: Vec<ConvSpec>,
}

impl ClassifierArch {
    /// 1×24×24 input, two classes: conv 8 then conv 16, both 3×3.
    /// 72+8 + 1152+16 + 1152+2 = 2402 parameters.
    pub fn default_desk() -> Self {
        ClassifierArch {
            in_channels: 1,
            height: 24,
            width: 24,
            classes: 2,
            convs: vec![
                ConvSpec { out_channels: 8, kernel: 3 },
                ConvSpec { out_channels: 16, kernel: 3 },
            ],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::contract("classifier needs at least 2 classes".to_string()));
        }
        if self.convs.is_empty() {
            return Err(Error::contract("classifier needs at least one conv block".to_string()));
        }
        let (mut h, mut w) = (self.height, self.width);
        for (i, c) in self.convs.iter().enumerate() {
            if c.kernel % 2 == 0 || c.kernel == 0 {
                return Err(Error::contract(format!(
                    "conv block {i}: same-padding needs an odd kernel, got {}",
                    c.kernel
                )));
            }
            if h % 2 != 0 || w % 2 != 0 || h < 2 || w < 2 {
                return Err(Error::contract(format!(
                    "conv block {i}: cannot 2x-pool a {h}×{w} map"
                )));
            }
            h /= 2;
            w /= 2;
        }
        Ok(())
    }

    /// (channels, h, w) of the feature map entering the linear head.
    pub fn feature_shape(&self) -> (usize, usize, usize) {
        let blocks = self.convs.len() as u32;
        (
            self.convs.last().map(|c| c.out_channels).unwrap_or(self.in_channels),
            self.height >> blocks,
            self.width >> blocks,
        )
    }

    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        let mut shapes = Vec::new();
        let mut cin = self.in_channels;
        for c in &self.convs {
            shapes.push(vec![c.out_channels, cin, c.kernel, c.kernel]);
            shapes.push(vec![c.out_channels]);
            cin = c.out_channels;
        }
        let (fc, fh, fw) = self.feature_shape();
        shapes.push(vec![self.classes, fc * fh * fw]);
        shapes.push(vec![self.classes]);
        shapes
    }
}

#[derive(Clone, Debug)]
pub struct Classifier<E: Scalar> {
    arch: ClassifierArch,
    params: Vec<Tensor<E>>,
}

/// Weights from a seeded He-style scheme: entries N(0, √(2/fan_in)), biases
/// zero. Each parameter tensor draws from its own derived stream, so the
/// values do not shift when an unrelated tensor changes shape.
pub fn build_classifier<E: Scalar>(arch: &ClassifierArch, seed: u64) -> Result<Classifier<E>> {
    arch.validate()?;
    let shapes = arch.param_shapes();
    let params = init_params(&shapes, seed, |shape| {
        if shape.len() == 1 {
            InitKind::Zero
        } else {
            let fan_in: usize = shape[1..].iter().product();
            InitKind::Normal((2.0 / fan_in as f64).sqrt())
        }
    });
    Ok(Classifier { arch: arch.clone(), params })
}

enum InitKind {
    Zero,
    Normal(f64),
}

fn init_params<E: Scalar>(
    shapes: &[Vec<usize>],
    seed: u64,
    kind_of: impl Fn(&[usize]) -> InitKind,
) -> Vec<Tensor<E>> {
    shapes
        .iter()
        .enumerate()
        .map(|(i, shape)| match kind_of(shape) {
            InitKind::Zero => Tensor::zeros(shape),
            InitKind::Normal(scale) => {
                let mut r: SeededRng = rng::rng_from(rng::sub_seed(seed, i as u64));
                let t: Tensor<E> = rng::normal_tensor(shape, &mut r);
                let data = t.data().iter().map(|&v| v * E::from_f64(scale)).collect();
                Tensor::from_vec(shape.to_vec(), data).expect("same length")
            }
        })
        .collect()
}

impl<E: Scalar> Classifier<E> {
    pub fn arch(&self) -> &ClassifierArch {
        &self.arch
    }

    pub fn num_classes(&self) -> usize {
        self.arch.classes
    }

    /// Rebuild from checkpointed parameters; shapes must match the arch.
    pub fn from_parts(arch: ClassifierArch, params: Vec<Tensor<E>>) -> Result<Self> {
        arch.validate()?;
        let shapes = arch.param_shapes();
        check_param_shapes(&shapes, &params)?;
        Ok(Classifier { arch, params })
    }

    pub fn set_params(&mut self, params: Vec<Tensor<E>>) -> Result<()> {
        check_param_shapes(&self.arch.param_shapes(), &params)?;
        self.params = params;
        Ok(())
    }

    /// Class scores plus the post-relu activation of every conv block
    /// (the last of these feeds the activation-based saliency map).
    pub fn record_scores(
        &self,
        rec: &mut Record<E>,
        param_ids: &[NodeId],
        x: NodeId,
    ) -> Result<(NodeId, Vec<NodeId>)> {
        let expect = [self.arch.in_channels, self.arch.height, self.arch.width];
        if rec.shape_of(x) != expect {
            return Err(Error::shape(format!(
                "classifier input shape {:?}, expected {:?}",
                rec.shape_of(x),
                expect
            )));
        }
        let mut h = x;
        let mut acts = Vec::with_capacity(self.arch.convs.len());
        let (mut mh, mut mw) = (self.arch.height, self.arch.width);
        for (i, _) in self.arch.convs.iter().enumerate() {
            let w_id = param_ids[2 * i];
            let b_id = param_ids[2 * i + 1];
            let z = rec.conv2d(h, w_id, ConvMode::Same)?;
            let cb = rec.channel_broadcast(b_id, mh, mw)?;
            let z = rec.add(z, cb)?;
            let a = rec.relu(z);
            acts.push(a);
            h = rec.avg_pool2(a)?;
            mh /= 2;
            mw /= 2;
        }
        let (fc, fh, fw) = self.arch.feature_shape();
        let flat = rec.reshape(h, vec![fc * fh * fw])?;
        let col = rec.reshape(flat, vec![fc * fh * fw, 1])?;
        let head_w = param_ids[param_ids.len() - 2];
        let head_b = param_ids[param_ids.len() - 1];
        let s = rec.matmul(head_w, col)?;
        let s = rec.reshape(s, vec![self.arch.classes])?;
        let scores = rec.add(s, head_b)?;
        Ok((scores, acts))
    }

    /// Loss value with no graph kept.
    pub fn loss_value(&self, x: &Tensor<E>, y: usize) -> Result<E> {
        let mut rec = Record::new();
        let pids = self.push_params(&mut rec);
        let x_id = rec.leaf(x);
        let loss = self.record_loss(&mut rec, &pids, x_id, y)?;
        rec.scalar_value_of(loss)
    }

    /// (argmax class, softmax probabilities). Ties resolve to the lower id.
    pub fn predict(&self, x: &Tensor<E>) -> Result<(usize, Vec<f64>)> {
        let mut rec = Record::new();
        let pids = self.push_params(&mut rec);
        let x_id = rec.leaf(x);
        let (scores, _) = self.record_scores(&mut rec, &pids, x_id)?;
        let sv = rec.value(scores);
        let probs = crate::tensor::kernels::softmax(sv.data());
        let mut best = 0;
        for (i, p) in probs.iter().enumerate() {
            if *p > probs[best] {
                best = i;
            }
        }
        Ok((best, probs.iter().map(|p| p.as_f64()).collect()))
    }

    pub fn accuracy(&self, dataset: &[(Tensor<E>, usize)]) -> Result<f64> {
        if dataset.is_empty() {
            return Err(Error::contract("accuracy over empty dataset".to_string()));
        }
        let mut hits = 0usize;
        for (x, y) in dataset {
            if self.predict(x)?.0 == *y {
                hits += 1;
            }
        }
        Ok(hits as f64 / dataset.len() as f64)
    }
}

fn check_param_shapes<E: Scalar>(shapes: &[Vec<usize>], params: &[Tensor<E>]) -> Result<()> {
    if shapes.len() != params.len() {
        return Err(Error::shape(format!(
            "expected {} parameter tensors, got {}",
            shapes.len(),
            params.len()
        )));
    }
    for (i, (s, p)) in shapes.iter().zip(params).enumerate() {
        if p.shape() != &s[..] {
            return Err(Error::shape(format!(
                "parameter {i} has shape {:?}, expected {:?}",
                p.shape(),
                s
            )));
        }
    }
    Ok(())
}

impl<E: Scalar> LossModel<E> for Classifier<E> {
    fn input_shape(&self) -> Vec<usize> {
        vec![self.arch.in_channels, self.arch.height, self.arch.width]
    }

    fn params(&self) -> &[Tensor<E>] {
        &self.params
    }

    fn record_loss(
        &self,
        rec: &mut Record<E>,
        param_ids: &[NodeId],
        x: NodeId,
        y: usize,
    ) -> Result<NodeId> {
        let (scores, _) = self.record_scores(rec, param_ids, x)?;
        rec.softmax_xent(scores, y)
    }
}

// ── Denoiser ───────────────────────────────────────────────────────────

/// A stack of same-padding convs at constant resolution. Timestep and class
/// information enter every layer as a per-channel bias: a sinusoidal time
/// code plus a learned class vector, pushed through a per-layer linear map.
/// The final layer has no relu; noise predictions need both signs.
#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserArch {
    pub in_channels: usize,
    pub hidden_channels: usize,
    pub layers: usize,
    pub kernel: usize,
    pub embed_dim: usize,
    pub classes: usize,
    pub t_max: usize,
}

impl DenoiserArch {
    pub fn default_desk() -> Self {
        DenoiserArch {
            in_channels: 1,
            hidden_channels: 32,
            layers: 4,
            kernel: 3,
            embed_dim: 16,
            classes: 2,
            t_max: 200,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers < 2 {
            return Err(Error::contract("denoiser needs at least 2 layers".to_string()));
        }
        if self.kernel % 2 == 0 || self.kernel == 0 {
            return Err(Error::contract("denoiser kernel must be odd".to_string()));
        }
        if self.embed_dim % 2 != 0 || self.embed_dim == 0 {
            return Err(Error::contract("embedding dimension must be even".to_string()));
        }
        if self.classes == 0 || self.t_max == 0 {
            return Err(Error::contract("denoiser needs classes ≥ 1 and t_max ≥ 1".to_string()));
        }
        Ok(())
    }

    fn layer_channels(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.layers);
        for l in 0..self.layers {
            let cin = if l == 0 { self.in_channels } else { self.hidden_channels };
            let cout = if l == self.layers - 1 { self.in_channels } else { self.hidden_channels };
            dims.push((cin, cout));
        }
        dims
    }

    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        let mut shapes = Vec::new();
        for (cin, cout) in self.layer_channels() {
            shapes.push(vec![cout, cin, self.kernel, self.kernel]);
            shapes.push(vec![cout]);
        }
        shapes.push(vec![self.classes, self.embed_dim]);
        for (_, cout) in self.layer_channels() {
            shapes.push(vec![cout, self.embed_dim]);
        }
        shapes
    }
}

#[derive(Clone, Debug)]
pub struct Denoiser<E: Scalar> {
    arch: DenoiserArch,
    params: Vec<Tensor<E>>,
}

pub fn build_denoiser<E: Scalar>(arch: &DenoiserArch, seed: u64) -> Result<Denoiser<E>> {
    arch.validate()?;
    let shapes = arch.param_shapes();
    let params = init_params(&shapes, seed, |shape| {
        if shape.len() == 1 {
            InitKind::Zero
        } else if shape.len() == 4 {
            let fan_in: usize = shape[1..].iter().product();
            InitKind::Normal((2.0 / fan_in as f64).sqrt())
        } else {
            // class table and bias projections: modest scale so the
            // conditioning signal starts small but nonzero
            InitKind::Normal(0.25)
        }
    });
    Ok(Denoiser { arch: arch.clone(), params })
}

/// sin/cos position code for an integer timestep; frequencies fall
/// geometrically from 1 to 1/10000.
pub fn time_embedding(t: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (10000f64).powf(-(i as f64) / half.max(1) as f64);
        let a = t as f64 * freq;
        out[i] = a.sin();
        out[half + i] = a.cos();
    }
    out
}

impl<E: Scalar> Denoiser<E> {
    pub fn arch(&self) -> &DenoiserArch {
        &self.arch
    }

    pub fn params(&self) -> &[Tensor<E>] {
        &self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.numel()).sum()
    }

    pub fn from_parts(arch: DenoiserArch, params: Vec<Tensor<E>>) -> Result<Self> {
        arch.validate()?;
        check_param_shapes(&arch.param_shapes(), &params)?;
        Ok(Denoiser { arch, params })
    }

    pub fn set_params(&mut self, params: Vec<Tensor<E>>) -> Result<()> {
        check_param_shapes(&self.arch.param_shapes(), &params)?;
        self.params = params;
        Ok(())
    }

    pub fn push_params(&self, rec: &mut Record<E>) -> Vec<NodeId> {
        self.params.iter().map(|p| rec.leaf(p)).collect()
    }

    /// ε̂(x_t, t, c) as a record node; differentiable w.r.t. x and params.
    pub fn record_eps(
        &self,
        rec: &mut Record<E>,
        param_ids: &[NodeId],
        x: NodeId,
        t: usize,
        c: usize,
    ) -> Result<NodeId> {
        let a = &self.arch;
        if t < 1 || t > a.t_max {
            return Err(Error::contract(format!(
                "timestep {t} outside [1, {}]",
                a.t_max
            )));
        }
        if c >= a.classes {
            return Err(Error::contract(format!(
                "class id {c} outside [0, {})",
                a.classes
            )));
        }
        let xs = rec.shape_of(x).to_vec();
        if xs.len() != 3 || xs[0] != a.in_channels {
            return Err(Error::shape(format!(
                "denoiser input must be [{}, h, w], got {:?}",
                a.in_channels, xs
            )));
        }
        let (h, w) = (xs[1], xs[2]);

        let table_id = param_ids[2 * a.layers];
        let tcode = Tensor::from_f64s(&[a.embed_dim], &time_embedding(t, a.embed_dim))?;
        let tvec = rec.leaf(&tcode);
        let crow = rec.embed_row(table_id, c)?;
        let e = rec.add(tvec, crow)?;
        let ecol = rec.reshape(e, vec![a.embed_dim, 1])?;

        let mut cur = x;
        for l in 0..a.layers {
            let w_id = param_ids[2 * l];
            let b_id = param_ids[2 * l + 1];
            let proj_id = param_ids[2 * a.layers + 1 + l];
            let z = rec.conv2d(cur, w_id, ConvMode::Same)?;
            let pb = rec.matmul(proj_id, ecol)?;
            let pb = rec.reshape(pb, vec![rec.shape_of(b_id)[0]])?;
            let bias = rec.add(b_id, pb)?;
            let cb = rec.channel_broadcast(bias, h, w)?;
            let z = rec.add(z, cb)?;
            cur = if l == a.layers - 1 { z } else { rec.relu(z) };
        }
        Ok(cur)
    }

    /// Plain evaluation, no graph kept.
    pub fn predict(&self, x_t: &Tensor<E>, t: usize, c: usize) -> Result<Tensor<E>> {
        let mut rec = Record::new();
        let pids = self.push_params(&mut rec);
        let x_id = rec.leaf(x_t);
        let eps = self.record_eps(&mut rec, &pids, x_id, t, c)?;
        Ok(rec.value(eps))
    }
}

// ── Optimizer ──────────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Moment state is kept in f64 regardless of the model element type, so the
/// update arithmetic is identical for f32 and f64 models.
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    t: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, total_params: usize) -> Result<Self> {
        if !(lr > 0.0) {
            return Err(Error::contract(format!("learning rate must be > 0, got {lr}")));
        }
        let state = match kind {
            OptimizerKind::Sgd => 0,
            OptimizerKind::Adam => total_params,
        };
        Ok(Optimizer {
            kind,
            lr,
            t: 0,
            m: vec![0.0; state],
            v: vec![0.0; state],
        })
    }

    pub fn step<E: Scalar>(&mut self, params: &mut [Tensor<E>], grads: &[Tensor<E>]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::contract(format!(
                "{} parameter tensors but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        self.t += 1;
        let mut off = 0usize;
        for (p, g) in params.iter_mut().zip(grads) {
            if p.shape() != g.shape() {
                return Err(Error::shape(format!(
                    "gradient shape {:?} does not match parameter {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
            let n = p.numel();
            let gd: Vec<f64> = g.data().iter().map(|v| v.as_f64()).collect();
            let pd = p.data_mut();
            match self.kind {
                OptimizerKind::Sgd => {
                    for i in 0..n {
                        let next = pd[i].as_f64() - self.lr * gd[i];
                        pd[i] = E::from_f64(next);
                    }
                }
                OptimizerKind::Adam => {
                    let bc1 = 1.0 - ADAM_BETA1.powi(self.t as i32);
                    let bc2 = 1.0 - ADAM_BETA2.powi(self.t as i32);
                    for i in 0..n {
                        let s = off + i;
                        self.m[s] = ADAM_BETA1 * self.m[s] + (1.0 - ADAM_BETA1) * gd[i];
                        self.v[s] = ADAM_BETA2 * self.v[s] + (1.0 - ADAM_BETA2) * gd[i] * gd[i];
                        let mh = self.m[s] / bc1;
                        let vh = self.v[s] / bc2;
                        let next = pd[i].as_f64() - self.lr * mh / (vh.sqrt() + ADAM_EPS);
                        pd[i] = E::from_f64(next);
                    }
                }
            }
            off += n;
        }
        Ok(())
    }
}

// ── Classifier training ────────────────────────────────────────────────

#[derive(Clone, Copy, Debug)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub seed: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 {
            return Err(Error::contract("epochs must be ≥ 1".to_string()));
        }
        if self.batch_size < 1 {
            return Err(Error::contract("batch size must be ≥ 1".to_string()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::contract(format!(
                "learning rate must be > 0, got {}",
                self.learning_rate
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct FitReport {
    pub final_train_loss: f64,
    pub holdout_accuracy: Option<f64>,
    pub epochs: usize,
}

/// Every fifth sample is held out when the dataset is big enough for that
/// to mean anything; the split depends only on position, never on the rng.
fn holdout_split(n: usize) -> (Vec<usize>, Vec<usize>) {
    if n < 5 {
        return ((0..n).collect(), Vec::new());
    }
    let mut train = Vec::with_capacity(n);
    let mut held = Vec::with_capacity(n / 5 + 1);
    for i in 0..n {
        if i % 5 == 4 {
            held.push(i);
        } else {
            train.push(i);
        }
    }
    (train, held)
}

pub fn train_classifier<E: Scalar>(
    dataset: &[(Tensor<E>, usize)],
    arch: &ClassifierArch,
    cfg: &TrainConfig,
) -> Result<(Classifier<E>, FitReport)> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::contract("training dataset is empty".to_string()));
    }
    for (i, (_, y)) in dataset.iter().enumerate() {
        if *y >= arch.classes {
            return Err(Error::contract(format!(
                "sample {i} has label {y}, valid range is [0, {})",
                arch.classes
            )));
        }
    }
    let mut clf = build_classifier::<E>(arch, cfg.seed)?;
    let (train_idx, held_idx) = holdout_split(dataset.len());
    let total = clf.param_count();
    let mut opt = Optimizer::new(cfg.optimizer, cfg.learning_rate, total)?;
    let mut order = train_idx.clone();
    let mut shuffle_rng = rng::rng_from(rng::sub_seed(cfg.seed, 0x5bff1e));

    let shapes = arch.param_shapes();
    for _ in 0..cfg.epochs {
        deterministic_shuffle(&mut order, &mut shuffle_rng);
        for batch in order.chunks(cfg.batch_size) {
            let mut acc = vec![0.0f64; total];
            for &i in batch {
                let (x, y) = &dataset[i];
                let g = clf.param_gradient(x, *y)?;
                for (a, v) in acc.iter_mut().zip(g.data()) {
                    *a += v.as_f64();
                }
            }
            let inv = 1.0 / batch.len() as f64;
            let flat = Tensor::from_vec(
                vec![total],
                acc.iter().map(|&v| E::from_f64(v * inv)).collect(),
            )?;
            let grads = unflatten_params(&flat, &shapes)?;
            let mut params = clf.params.clone();
            opt.step(&mut params, &grads)?;
            clf.params = params;
        }
    }

    let mut loss_sum = 0.0;
    for &i in &train_idx {
        let (x, y) = &dataset[i];
        loss_sum += clf.loss_value(x, *y)?.as_f64();
    }
    let final_train_loss = loss_sum / train_idx.len() as f64;
    let holdout_accuracy = if held_idx.is_empty() {
        None
    } else {
        let held: Vec<_> = held_idx.iter().map(|&i| dataset[i].clone()).collect();
        Some(clf.accuracy(&held)?)
    };
    Ok((
        clf,
        FitReport {
            final_train_loss,
            holdout_accuracy,
            epochs: cfg.epochs,
        },
    ))
}

/// Fisher–Yates with our own index draws; rand's shuffle is not guaranteed
/// stable across versions and these orders must replay forever.
pub fn deterministic_shuffle<T>(items: &mut [T], rng: &mut SeededRng) {
    for i in (1..items.len()).rev() {
        let j = rng::uniform_usize(rng, 0, i);
        items.swap(i, j);
    }
}
