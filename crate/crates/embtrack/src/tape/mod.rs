//! Reverse-mode automatic differentiation on a flat operation tape.
//!
//! Values are recorded in execution order, so walking the tape backwards
//! visits every op exactly once after all of its consumers. Parameters are
//! attached as trainable leaves; after [`Tape::backward`] their gradients
//! can be read back off the tape.

mod kernels;

pub use kernels::PadMode;

use crate::loss::{CosineLossCtx, CrossEntropyCtx};
use crate::tensor::{Real, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    Conv2d { x: Var, w: Var, b: Option<Var>, pad: PadMode },
    MaxPool2 { x: Var, argmax: Vec<u32> },
    Upsample2 { x: Var },
    Relu { x: Var },
    Sigmoid { x: Var },
    Tanh { x: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Affine { x: Var, scale: Real },
    ConcatChannels { a: Var, b: Var },
    SliceChannels { x: Var, start: usize },
    SumAll { x: Var },
    MeanAll { x: Var },
    CosineLoss { emb: Var, ctx: Box<CosineLossCtx> },
    SoftmaxCrossEntropy { logits: Var, ctx: Box<CrossEntropyCtx> },
}

struct Node {
    value: Tensor,
    grad: Option<Vec<Real>>,
    requires: bool,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    backward_done: bool,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, requires: bool, op: Op) -> Var {
        debug_assert!(value.all_finite(), "non-finite values produced by forward op");
        self.nodes.push(Node {
            value,
            grad: None,
            requires,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn requires(&self, v: Var) -> bool {
        self.nodes[v.0].requires
    }

    /// Attaches a tensor to the tape. Trainable leaves receive gradients
    /// during [`Tape::backward`].
    pub fn leaf(&mut self, value: Tensor, trainable: bool) -> Var {
        self.push(value, trainable, Op::Leaf)
    }

    /// Non-trainable leaf.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient of the last [`Tape::backward`] root w.r.t. `v`, if any was
    /// accumulated.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let node = &self.nodes[v.0];
        node.grad
            .as_ref()
            .map(|g| Tensor::from_vec(node.value.shape(), g.clone()))
    }

    // ---- forward ops -----------------------------------------------------

    /// Same-padding cross-correlation.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, pad: PadMode) -> Var {
        let value = kernels::conv2d_forward(
            self.value(x),
            self.value(w),
            b.map(|b| self.value(b)),
            pad,
        );
        let requires =
            self.requires(x) || self.requires(w) || b.map_or(false, |b| self.requires(b));
        self.push(value, requires, Op::Conv2d { x, w, b, pad })
    }

    pub fn max_pool2d(&mut self, x: Var) -> Var {
        let (value, argmax) = kernels::maxpool2_forward(self.value(x));
        let requires = self.requires(x);
        self.push(value, requires, Op::MaxPool2 { x, argmax })
    }

    pub fn upsample2x(&mut self, x: Var) -> Var {
        let value = kernels::upsample2_forward(self.value(x));
        let requires = self.requires(x);
        self.push(value, requires, Op::Upsample2 { x })
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| if v > 0.0 { v } else { 0.0 });
        let requires = self.requires(x);
        self.push(value, requires, Op::Relu { x })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| 1.0 / (1.0 + (-v).exp()));
        let requires = self.requires(x);
        self.push(value, requires, Op::Sigmoid { x })
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let value = self.value(x).map(Real::tanh);
        let requires = self.requires(x);
        self.push(value, requires, Op::Tanh { x })
    }

    fn binary_values(&self, a: Var, b: Var, name: &str) -> (Tensor, bool) {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "{name}: shape mismatch {:?} vs {:?}", va.shape(), vb.shape());
        (va.clone(), self.requires(a) || self.requires(b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (mut value, requires) = self.binary_values(a, b, "add");
        for (v, w) in value.data_mut().iter_mut().zip(self.nodes[b.0].value.data()) {
            *v += w;
        }
        self.push(value, requires, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (mut value, requires) = self.binary_values(a, b, "sub");
        for (v, w) in value.data_mut().iter_mut().zip(self.nodes[b.0].value.data()) {
            *v -= w;
        }
        self.push(value, requires, Op::Sub { a, b })
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (mut value, requires) = self.binary_values(a, b, "mul");
        for (v, w) in value.data_mut().iter_mut().zip(self.nodes[b.0].value.data()) {
            *v *= w;
        }
        self.push(value, requires, Op::Mul { a, b })
    }

    /// `scale * x + shift`, elementwise with scalar coefficients.
    pub fn affine(&mut self, x: Var, scale: Real, shift: Real) -> Var {
        let value = self.value(x).map(|v| scale * v + shift);
        let requires = self.requires(x);
        self.push(value, requires, Op::Affine { x, scale })
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Var {
        let (ba, ca, ha, wa) = self.value(a).dims4();
        let (bb, cb, hb, wb) = self.value(b).dims4();
        assert_eq!(
            (ba, ha, wa),
            (bb, hb, wb),
            "concat_channels: non-channel extents differ: {:?} vs {:?}",
            self.value(a).shape(),
            self.value(b).shape()
        );
        let mut value = Tensor::zeros(&[ba, ca + cb, ha, wa]);
        let plane = ha * wa;
        for bi in 0..ba {
            let dst0 = bi * (ca + cb) * plane;
            value.data_mut()[dst0..dst0 + ca * plane]
                .copy_from_slice(&self.value(a).data()[bi * ca * plane..(bi + 1) * ca * plane]);
            value.data_mut()[dst0 + ca * plane..dst0 + (ca + cb) * plane]
                .copy_from_slice(&self.value(b).data()[bi * cb * plane..(bi + 1) * cb * plane]);
        }
        let requires = self.requires(a) || self.requires(b);
        self.push(value, requires, Op::ConcatChannels { a, b })
    }

    /// Channel range `[start, start+len)` of `x`.
    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Var {
        let (bs, c, h, w) = self.value(x).dims4();
        assert!(start + len <= c, "slice_channels: range {}..{} out of {c} channels", start, start + len);
        let plane = h * w;
        let mut value = Tensor::zeros(&[bs, len, h, w]);
        for bi in 0..bs {
            let src0 = (bi * c + start) * plane;
            let dst0 = bi * len * plane;
            value.data_mut()[dst0..dst0 + len * plane]
                .copy_from_slice(&self.value(x).data()[src0..src0 + len * plane]);
        }
        let requires = self.requires(x);
        self.push(value, requires, Op::SliceChannels { x, start })
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).data().iter().sum());
        let requires = self.requires(x);
        self.push(value, requires, Op::SumAll { x })
    }

    /// Mean of all elements, as a scalar.
    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len() as Real;
        let value = Tensor::scalar(self.value(x).data().iter().sum::<Real>() / n);
        let requires = self.requires(x);
        self.push(value, requires, Op::MeanAll { x })
    }

    pub(crate) fn record_cosine_loss(&mut self, emb: Var, value: Real, ctx: CosineLossCtx) -> Var {
        let requires = self.requires(emb);
        self.push(
            Tensor::scalar(value),
            requires,
            Op::CosineLoss { emb, ctx: Box::new(ctx) },
        )
    }

    pub(crate) fn record_cross_entropy(&mut self, logits: Var, value: Real, ctx: CrossEntropyCtx) -> Var {
        let requires = self.requires(logits);
        self.push(
            Tensor::scalar(value),
            requires,
            Op::SoftmaxCrossEntropy { logits, ctx: Box::new(ctx) },
        )
    }

    // ---- backward --------------------------------------------------------

    /// Populates gradients of every tracked value with `d root / d value`.
    /// `root` must be scalar.
    pub fn backward(&mut self, root: Var) {
        assert!(
            self.value(root).is_scalar(),
            "backward: root must be scalar, got shape {:?}",
            self.value(root).shape()
        );
        assert!(!self.backward_done, "backward: tape already consumed");
        self.backward_done = true;
        self.nodes[root.0].grad = Some(vec![1.0]);

        for id in (0..=root.0).rev() {
            if !self.nodes[id].requires || self.nodes[id].grad.is_none() {
                continue;
            }
            let grad = self.nodes[id].grad.take().expect("grad present");
            let (pre, post) = self.nodes.split_at_mut(id);
            let node = &mut post[0];
            match &node.op {
                Op::Leaf => {}
                Op::Conv2d { x, w, b, pad } => {
                    let needs_dx = pre[x.0].requires;
                    let needs_dw = pre[w.0].requires;
                    let (dx, dw, db) = kernels::conv2d_backward(
                        &pre[x.0].value,
                        &pre[w.0].value,
                        &grad,
                        *pad,
                        needs_dx,
                        needs_dw,
                    );
                    if let Some(dx) = dx {
                        accumulate(pre, *x, dx.data());
                    }
                    if let Some(dw) = dw {
                        accumulate(pre, *w, dw.data());
                    }
                    if let Some(b) = b {
                        if pre[b.0].requires {
                            accumulate(pre, *b, &db);
                        }
                    }
                }
                Op::MaxPool2 { x, argmax } => {
                    let dx = kernels::maxpool2_backward(argmax, &grad, pre[x.0].value.len());
                    accumulate(pre, *x, &dx);
                }
                Op::Upsample2 { x } => {
                    let (bs, c, h, w) = pre[x.0].value.dims4();
                    let dx = kernels::upsample2_backward(&grad, bs, c, h, w);
                    accumulate(pre, *x, &dx);
                }
                Op::Relu { x } => {
                    let dx: Vec<Real> = node
                        .value
                        .data()
                        .iter()
                        .zip(&grad)
                        .map(|(&o, &g)| if o > 0.0 { g } else { 0.0 })
                        .collect();
                    accumulate(pre, *x, &dx);
                }
                Op::Sigmoid { x } => {
                    let dx: Vec<Real> = node
                        .value
                        .data()
                        .iter()
                        .zip(&grad)
                        .map(|(&s, &g)| g * s * (1.0 - s))
                        .collect();
                    accumulate(pre, *x, &dx);
                }
                Op::Tanh { x } => {
                    let dx: Vec<Real> = node
                        .value
                        .data()
                        .iter()
                        .zip(&grad)
                        .map(|(&t, &g)| g * (1.0 - t * t))
                        .collect();
                    accumulate(pre, *x, &dx);
                }
                Op::Add { a, b } => {
                    let (a, b) = (*a, *b);
                    if pre[a.0].requires {
                        accumulate(pre, a, &grad);
                    }
                    if pre[b.0].requires {
                        accumulate(pre, b, &grad);
                    }
                }
                Op::Sub { a, b } => {
                    let (a, b) = (*a, *b);
                    if pre[a.0].requires {
                        accumulate(pre, a, &grad);
                    }
                    if pre[b.0].requires {
                        let neg: Vec<Real> = grad.iter().map(|g| -g).collect();
                        accumulate(pre, b, &neg);
                    }
                }
                Op::Mul { a, b } => {
                    let (a, b) = (*a, *b);
                    if pre[a.0].requires {
                        let da: Vec<Real> =
                            grad.iter().zip(pre[b.0].value.data()).map(|(g, v)| g * v).collect();
                        accumulate(pre, a, &da);
                    }
                    if pre[b.0].requires {
                        let db: Vec<Real> =
                            grad.iter().zip(pre[a.0].value.data()).map(|(g, v)| g * v).collect();
                        accumulate(pre, b, &db);
                    }
                }
                Op::Affine { x, scale } => {
                    let dx: Vec<Real> = grad.iter().map(|g| g * scale).collect();
                    accumulate(pre, *x, &dx);
                }
                Op::ConcatChannels { a, b } => {
                    let (a, b) = (*a, *b);
                    let (bs, ca, h, w) = pre[a.0].value.dims4();
                    let cb = pre[b.0].value.dims4().1;
                    let plane = h * w;
                    if pre[a.0].requires {
                        let mut da = vec![0.0; pre[a.0].value.len()];
                        for bi in 0..bs {
                            let src0 = bi * (ca + cb) * plane;
                            da[bi * ca * plane..(bi + 1) * ca * plane]
                                .copy_from_slice(&grad[src0..src0 + ca * plane]);
                        }
                        accumulate(pre, a, &da);
                    }
                    if pre[b.0].requires {
                        let mut db = vec![0.0; pre[b.0].value.len()];
                        for bi in 0..bs {
                            let src0 = bi * (ca + cb) * plane + ca * plane;
                            db[bi * cb * plane..(bi + 1) * cb * plane]
                                .copy_from_slice(&grad[src0..src0 + cb * plane]);
                        }
                        accumulate(pre, b, &db);
                    }
                }
                Op::SliceChannels { x, start } => {
                    let (bs, c, h, w) = pre[x.0].value.dims4();
                    let len = node.value.dims4().1;
                    let plane = h * w;
                    let mut dx = vec![0.0; pre[x.0].value.len()];
                    for bi in 0..bs {
                        let dst0 = (bi * c + start) * plane;
                        dx[dst0..dst0 + len * plane]
                            .copy_from_slice(&grad[bi * len * plane..(bi + 1) * len * plane]);
                    }
                    accumulate(pre, *x, &dx);
                }
                Op::SumAll { x } => {
                    let dx = vec![grad[0]; pre[x.0].value.len()];
                    accumulate(pre, *x, &dx);
                }
                Op::MeanAll { x } => {
                    let n = pre[x.0].value.len() as Real;
                    let dx = vec![grad[0] / n; pre[x.0].value.len()];
                    accumulate(pre, *x, &dx);
                }
                Op::CosineLoss { emb, ctx } => {
                    let demb = crate::loss::cosine_loss_backward(&pre[emb.0].value, ctx, grad[0]);
                    accumulate(pre, *emb, &demb);
                }
                Op::SoftmaxCrossEntropy { logits, ctx } => {
                    let dl = crate::loss::cross_entropy_backward(&pre[logits.0].value, ctx, grad[0]);
                    accumulate(pre, *logits, &dl);
                }
            }
            // Leaves keep their gradient for the caller; interior grads are
            // dropped once propagated.
            if matches!(self.nodes[id].op, Op::Leaf) {
                self.nodes[id].grad = Some(grad);
            }
        }
    }
}

fn accumulate(nodes: &mut [Node], target: Var, delta: &[Real]) {
    let node = &mut nodes[target.0];
    if !node.requires {
        return;
    }
    let grad = node.grad.get_or_insert_with(|| vec![0.0; node.value.len()]);
    debug_assert_eq!(grad.len(), delta.len());
    for (g, d) in grad.iter_mut().zip(delta) {
        *g += d;
    }
}
