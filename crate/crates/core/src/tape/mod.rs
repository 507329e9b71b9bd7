//! Reverse-mode automatic differentiation on a linear tape.
//!
//! Every operation appends a node holding its output buffer, shape, and
//! enough saved state to replay the chain rule. [`Tape::backward`] walks the
//! nodes once in reverse execution order, accumulating gradients into every
//! node that (transitively) depends on a gradient-tracked leaf. Gradients add
//! across multiple uses of a value, so diamonds and shared weights come out
//! right without any graph analysis.
//!
//! The tape also owns the run's stochastic state (dropout masks) and records
//! the first operation that produced a non-finite value, which the training
//! loop turns into a clean abort instead of silently optimizing NaNs.

mod conv;
mod elementwise;
mod linalg;
mod norm;
mod pool;
pub(crate) mod resample;
mod shape_ops;
mod unary;

use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub(crate) use elementwise::Broadcast;

/// Index of a node on its tape.
pub type TensorId = usize;

/// First non-finite value seen on the tape: which op produced it and where.
#[derive(Clone, Debug)]
pub struct NonFinite {
    pub op: &'static str,
    pub node: TensorId,
}

pub(crate) struct Node<T> {
    pub(crate) data: Vec<T>,
    pub(crate) shape: Vec<usize>,
    pub(crate) requires_grad: bool,
    pub(crate) grad: Option<Vec<T>>,
    pub(crate) op: Op<T>,
}

/// Recorded operations. Each variant stores input ids plus whatever forward
/// state its backward rule needs; anything cheap to recompute is not saved.
pub(crate) enum Op<T> {
    Leaf,
    Add { a: TensorId, b: TensorId, bc: Broadcast },
    Sub { a: TensorId, b: TensorId, bc: Broadcast },
    Mul { a: TensorId, b: TensorId, bc: Broadcast },
    Div { a: TensorId, b: TensorId, bc: Broadcast },
    AddScalar { a: TensorId },
    MulScalar { a: TensorId, c: T },
    MatMul { a: TensorId, b: TensorId },
    GatherRows { table: TensorId, idx: Vec<usize> },
    Conv2d { x: TensorId, w: TensorId, bias: Option<TensorId>, stride: usize, dilation: usize, pad: usize },
    SoftPool2d { x: TensorId, kh: usize, kw: usize },
    MaxLast { x: TensorId, argmax: Vec<usize> },
    Softmax { x: TensorId, axis: usize },
    Relu { x: TensorId },
    Gelu { x: TensorId },
    Sigmoid { x: TensorId },
    Softplus { x: TensorId },
    Dropout { x: TensorId, mask: Vec<T> },
    BatchNorm { x: TensorId, gamma: TensorId, beta: TensorId, mean: Vec<T>, var: Vec<T>, eps: T, batch_stats: bool },
    LayerNorm { x: TensorId, gamma: TensorId, beta: TensorId, eps: T },
    Bilinear { x: TensorId },
    Reshape { x: TensorId },
    Permute { x: TensorId, axes: Vec<usize> },
    Roll { x: TensorId, shifts: Vec<isize> },
    Concat { parts: Vec<TensorId>, axis: usize },
    Sum { x: TensorId },
    SumLast { x: TensorId },
}

pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
    rng: Rng,
    train: bool,
    nonfinite: Option<NonFinite>,
}

impl<T: Scalar> Tape<T> {
    /// Fresh tape in eval mode. The seed drives dropout masks only; two tapes
    /// with the same seed replay identical stochastic decisions.
    pub fn new(seed: u64) -> Self {
        Tape { nodes: Vec::new(), rng: Rng::new(seed), train: false, nonfinite: None }
    }

    /// Train mode enables dropout and makes normalization use batch
    /// statistics; eval mode makes every op deterministic.
    pub fn set_train(&mut self, train: bool) {
        self.train = train;
    }

    pub fn is_train(&self) -> bool {
        self.train
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, t: Tensor<T>, requires_grad: bool) -> TensorId {
        let (shape, data) = (t.shape().to_vec(), t.into_data());
        self.push("leaf", data, shape, requires_grad, Op::Leaf)
    }

    /// Leaf that never receives a gradient (inputs, targets, masks, weights
    /// that are frozen for this pass).
    pub fn constant(&mut self, t: Tensor<T>) -> TensorId {
        self.leaf(t, false)
    }

    pub fn data(&self, id: TensorId) -> &[T] {
        &self.nodes[id].data
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id].shape
    }

    pub fn numel(&self, id: TensorId) -> usize {
        self.nodes[id].data.len()
    }

    /// The value at `id` as an owned tensor.
    pub fn value(&self, id: TensorId) -> Tensor<T> {
        Tensor::new(&self.nodes[id].shape, self.nodes[id].data.clone())
    }

    pub fn requires_grad(&self, id: TensorId) -> bool {
        self.nodes[id].requires_grad
    }

    /// Accumulated gradient of the last `backward` call, if this node tracks
    /// gradients and was reached.
    pub fn grad(&self, id: TensorId) -> Option<&[T]> {
        self.nodes[id].grad.as_deref()
    }

    /// First op that produced NaN or ±inf on this tape, if any.
    pub fn first_nonfinite(&self) -> Option<&NonFinite> {
        self.nonfinite.as_ref()
    }

    pub fn zero_grads(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    /// Overwrite the stored value of a leaf in place (used by the
    /// finite-difference checker to nudge one input between replays).
    pub fn set_leaf_data(&mut self, id: TensorId, data: &[T]) {
        assert!(matches!(self.nodes[id].op, Op::Leaf), "set_leaf_data on a non-leaf node");
        assert_eq!(data.len(), self.nodes[id].data.len(), "set_leaf_data length mismatch");
        self.nodes[id].data.copy_from_slice(data);
    }

    /// Reverse-mode sweep from a scalar output. Grads are zeroed, the seed
    /// d(loss)/d(loss) = 1 is planted, and every recorded op is visited at
    /// most once in reverse execution order. Each call recomputes gradients
    /// from scratch; within one sweep, contributions to a value used in
    /// several places accumulate.
    pub fn backward(&mut self, loss: TensorId) {
        assert_eq!(self.nodes[loss].data.len(), 1, "backward requires a scalar loss, got shape {:?}", self.nodes[loss].shape);
        assert!(
            self.nodes[loss].requires_grad,
            "backward on a value with no path to any gradient-tracked leaf"
        );
        self.zero_grads();
        self.nodes[loss].grad = Some(vec![T::one()]);
        for id in (0..=loss).rev() {
            if !self.nodes[id].requires_grad || self.nodes[id].grad.is_none() {
                continue;
            }
            self.backward_step(id);
        }
    }

    /// Apply one node's chain rule. Upstream grad and the op are temporarily
    /// moved out so input grads can be written while reading them.
    fn backward_step(&mut self, id: TensorId) {
        let op = std::mem::replace(&mut self.nodes[id].op, Op::Leaf);
        let g = self.nodes[id].grad.take().expect("backward_step on node without grad");
        match &op {
            Op::Leaf => {}
            Op::Add { a, b, bc } => elementwise::backward_add(self, *a, *b, bc, &g),
            Op::Sub { a, b, bc } => elementwise::backward_sub(self, *a, *b, bc, &g),
            Op::Mul { a, b, bc } => elementwise::backward_mul(self, *a, *b, bc, &g),
            Op::Div { a, b, bc } => elementwise::backward_div(self, *a, *b, bc, &g),
            Op::AddScalar { a } => self.add_grad(*a, &g),
            Op::MulScalar { a, c } => {
                let da: Vec<T> = g.iter().map(|&gi| gi * *c).collect();
                self.add_grad(*a, &da);
            }
            Op::MatMul { a, b } => linalg::backward_matmul(self, *a, *b, &g),
            Op::GatherRows { table, idx } => linalg::backward_gather_rows(self, *table, idx, &g),
            Op::Conv2d { x, w, bias, stride, dilation, pad } => {
                conv::backward_conv2d(self, *x, *w, *bias, *stride, *dilation, *pad, id, &g)
            }
            Op::SoftPool2d { x, kh, kw } => pool::backward_softpool2d(self, *x, *kh, *kw, &g),
            Op::MaxLast { x, argmax } => pool::backward_max_last(self, *x, argmax, &g),
            Op::Softmax { x, axis } => unary::backward_softmax(self, *x, *axis, id, &g),
            Op::Relu { x } => unary::backward_relu(self, *x, &g),
            Op::Gelu { x } => unary::backward_gelu(self, *x, &g),
            Op::Sigmoid { x } => unary::backward_sigmoid(self, *x, id, &g),
            Op::Softplus { x } => unary::backward_softplus(self, *x, &g),
            Op::Dropout { x, mask } => unary::backward_dropout(self, *x, mask, &g),
            Op::BatchNorm { x, gamma, beta, mean, var, eps, batch_stats } => {
                norm::backward_batch_norm(self, *x, *gamma, *beta, mean, var, *eps, *batch_stats, &g)
            }
            Op::LayerNorm { x, gamma, beta, eps } => norm::backward_layer_norm(self, *x, *gamma, *beta, *eps, &g),
            Op::Bilinear { x } => resample::backward_bilinear(self, *x, id, &g),
            Op::Reshape { x } => self.add_grad(*x, &g),
            Op::Permute { x, axes } => shape_ops::backward_permute(self, *x, axes, &g),
            Op::Roll { x, shifts } => shape_ops::backward_roll(self, *x, shifts, &g),
            Op::Concat { parts, axis } => shape_ops::backward_concat(self, parts, *axis, id, &g),
            Op::Sum { x } => {
                let da = vec![g[0]; self.nodes[*x].data.len()];
                self.add_grad(*x, &da);
            }
            Op::SumLast { x } => {
                let k = *self.nodes[*x].shape.last().expect("sum_last input has rank >= 1");
                let mut da = vec![T::zero(); self.nodes[*x].data.len()];
                for (row, &gi) in g.iter().enumerate() {
                    for slot in &mut da[row * k..(row + 1) * k] {
                        *slot = gi;
                    }
                }
                self.add_grad(*x, &da);
            }
        }
        self.nodes[id].op = op;
        self.nodes[id].grad = Some(g);
    }

    /// Record a node, propagating `requires_grad` from inputs and scanning
    /// the output for the first non-finite value ever produced on this tape.
    pub(crate) fn push(
        &mut self,
        name: &'static str,
        data: Vec<T>,
        shape: Vec<usize>,
        requires_grad: bool,
        op: Op<T>,
    ) -> TensorId {
        debug_assert_eq!(data.len(), shape.iter().product::<usize>(), "{name}: data/shape mismatch");
        let id = self.nodes.len();
        if self.nonfinite.is_none() && !data.iter().all(|v| v.is_finite()) {
            self.nonfinite = Some(NonFinite { op: name, node: id });
        }
        self.nodes.push(Node { data, shape, requires_grad, grad: None, op });
        id
    }

    pub(crate) fn any_requires_grad(&self, ids: &[TensorId]) -> bool {
        ids.iter().any(|&id| self.nodes[id].requires_grad)
    }

    /// Accumulate a gradient contribution into a node (no-op for nodes that
    /// do not track gradients).
    pub(crate) fn add_grad(&mut self, id: TensorId, contrib: &[T]) {
        if !self.nodes[id].requires_grad {
            return;
        }
        let n = self.nodes[id].data.len();
        assert_eq!(contrib.len(), n, "gradient contribution length mismatch on node {id}");
        match &mut self.nodes[id].grad {
            Some(g) => {
                for (gi, &ci) in g.iter_mut().zip(contrib) {
                    *gi = *gi + ci;
                }
            }
            None => self.nodes[id].grad = Some(contrib.to_vec()),
        }
    }

    /// Like `add_grad` but consumes the buffer, installing it directly when
    /// no gradient has accumulated yet.
    pub(crate) fn add_grad_owned(&mut self, id: TensorId, contrib: Vec<T>) {
        if !self.nodes[id].requires_grad {
            return;
        }
        match &mut self.nodes[id].grad {
            Some(g) => {
                assert_eq!(contrib.len(), g.len(), "gradient contribution length mismatch on node {id}");
                for (gi, ci) in g.iter_mut().zip(contrib) {
                    *gi = *gi + ci;
                }
            }
            None => {
                assert_eq!(contrib.len(), self.nodes[id].data.len(), "gradient contribution length mismatch on node {id}");
                self.nodes[id].grad = Some(contrib);
            }
        }
    }

    pub(crate) fn node(&self, id: TensorId) -> &Node<T> {
        &self.nodes[id]
    }

    pub(crate) fn rng_mut(&mut self) -> &mut Rng {
        &mut self.rng
    }
}
