//! Tape-based reverse-mode differentiation.
//!
//! Forward calls record one node per op; [`Tape::backward`] walks the
//! nodes in reverse, consuming each intermediate gradient buffer as soon
//! as its producer has used it so peak memory stays near one extra
//! activation set. Results come back as a [`GradientSet`] indexed by the
//! [`ValueId`]s of the recorded leaves.

use crate::conv::{conv2d, conv2d_backward, ConvSpec};
use crate::error::{Error, Result};
use crate::layers::{bn_backward, bn_batch_stats, bn_apply, dropout_mask, weight_normalize, weight_normalize_backward};
use crate::ops;
use crate::ops::PoolSpec;
use crate::tensor::{Element, Shape, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ValueId(usize);

impl ValueId {
    pub fn index(&self) -> usize {
        self.0
    }
}

enum Op<E: Element> {
    Leaf {
        requires_grad: bool,
    },
    Conv2d {
        x: ValueId,
        w: ValueId,
        spec: ConvSpec,
    },
    Fc {
        x: ValueId,
        w: ValueId,
    },
    Relu {
        x: ValueId,
    },
    Trelu {
        x: ValueId,
        alpha: ValueId,
    },
    MaxPool {
        x: ValueId,
        argmax: Vec<usize>,
    },
    AvgPool {
        x: ValueId,
        spec: PoolSpec,
    },
    SoftmaxXent {
        logits: ValueId,
        labels: Vec<usize>,
        probs: Tensor<E>,
    },
    BatchNorm {
        x: ValueId,
        gamma: ValueId,
        beta: ValueId,
        eps: E,
        mean: Vec<E>,
        var: Vec<E>,
    },
    WeightNorm {
        w: ValueId,
        eps: E,
    },
    ChannelAffine {
        x: ValueId,
        gamma: ValueId,
        beta: ValueId,
    },
    AffineConst {
        x: ValueId,
        scale: E,
    },
    Dropout {
        x: ValueId,
        mask: Vec<bool>,
        keep: E,
    },
    Sum {
        x: ValueId,
    },
    SumSq {
        x: ValueId,
    },
    MulConst {
        x: ValueId,
        coeff: Tensor<E>,
    },
}

struct Node<E: Element> {
    op: Op<E>,
    out: Tensor<E>,
}

/// Recorded computation graph over tensors of one element type.
pub struct Tape<E: Element> {
    nodes: Vec<Node<E>>,
}

impl<E: Element> Default for Tape<E> {
    fn default() -> Self {
        Tape::new()
    }
}

impl<E: Element> Tape<E> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// The tensor a node produced.
    pub fn value(&self, id: ValueId) -> &Tensor<E> {
        &self.nodes[id.0].out
    }

    fn push(&mut self, op: Op<E>, out: Tensor<E>) -> ValueId {
        self.nodes.push(Node { op, out });
        ValueId(self.nodes.len() - 1)
    }

    /// Registers a tensor that participates in gradients (parameters,
    /// or inputs whose gradient is wanted).
    pub fn leaf(&mut self, t: Tensor<E>) -> ValueId {
        self.push(Op::Leaf { requires_grad: true }, t)
    }

    /// Registers a constant input; backward never propagates into it.
    pub fn constant(&mut self, t: Tensor<E>) -> ValueId {
        self.push(Op::Leaf { requires_grad: false }, t)
    }

    pub fn conv2d(&mut self, x: ValueId, spec: ConvSpec, w: ValueId) -> Result<ValueId> {
        let out = conv2d(self.value(x), &spec, self.value(w))?;
        Ok(self.push(Op::Conv2d { x, w, spec }, out))
    }

    pub fn fully_connected(&mut self, x: ValueId, w: ValueId) -> Result<ValueId> {
        let out = ops::fully_connected(self.value(x), self.value(w))?;
        Ok(self.push(Op::Fc { x, w }, out))
    }

    pub fn relu(&mut self, x: ValueId) -> ValueId {
        let out = ops::relu(self.value(x));
        self.push(Op::Relu { x }, out)
    }

    /// Thresholded rectifier; `alpha` is a per-channel leaf shaped like
    /// `(1, C, 1, 1)`.
    pub fn trelu(&mut self, x: ValueId, alpha: ValueId) -> Result<ValueId> {
        let out = ops::trelu(self.value(x), self.value(alpha).data())?;
        Ok(self.push(Op::Trelu { x, alpha }, out))
    }

    pub fn max_pool(&mut self, x: ValueId, spec: PoolSpec) -> Result<ValueId> {
        if spec.kind != ops::PoolKind::Max {
            return Err(Error::invalid("max_pool called with an average spec"));
        }
        let (out, argmax) = ops::pool_with_argmax(self.value(x), &spec)?;
        let argmax = argmax.expect("max pooling returns indices");
        Ok(self.push(Op::MaxPool { x, argmax }, out))
    }

    pub fn avg_pool(&mut self, x: ValueId, spec: PoolSpec) -> Result<ValueId> {
        if spec.kind != ops::PoolKind::Avg {
            return Err(Error::invalid("avg_pool called with a max spec"));
        }
        let out = ops::pool(self.value(x), &spec)?;
        Ok(self.push(Op::AvgPool { x, spec }, out))
    }

    /// Fused softmax cross-entropy head producing the scalar mean loss.
    pub fn softmax_cross_entropy(&mut self, logits: ValueId, labels: &[usize]) -> Result<ValueId> {
        let (loss, probs) = ops::softmax_cross_entropy(self.value(logits), labels)?;
        let out = Tensor::from_vec(Shape::new(1, 1, 1, 1), vec![loss])?;
        Ok(self.push(
            Op::SoftmaxXent {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            out,
        ))
    }

    /// Train-mode batch normalization over batch statistics. The batch
    /// mean and population variance are retained on the node; read them
    /// back with [`Tape::batch_norm_stats`] to update running estimates.
    pub fn batch_norm(&mut self, x: ValueId, gamma: ValueId, beta: ValueId, eps: E) -> Result<ValueId> {
        let (mean, var) = bn_batch_stats(self.value(x))?;
        let out = bn_apply(
            self.value(x),
            &mean,
            &var,
            self.value(gamma).data(),
            self.value(beta).data(),
            eps,
        )?;
        Ok(self.push(Op::BatchNorm { x, gamma, beta, eps, mean, var }, out))
    }

    /// Batch statistics stored by a [`Tape::batch_norm`] node.
    pub fn batch_norm_stats(&self, id: ValueId) -> Option<(&[E], &[E])> {
        match &self.nodes[id.0].op {
            Op::BatchNorm { mean, var, .. } => Some((mean, var)),
            _ => None,
        }
    }

    pub fn weight_normalize(&mut self, w: ValueId, eps: E) -> Result<ValueId> {
        let out = weight_normalize(self.value(w), eps)?;
        Ok(self.push(Op::WeightNorm { w, eps }, out))
    }

    pub fn channel_affine(&mut self, x: ValueId, gamma: ValueId, beta: ValueId) -> Result<ValueId> {
        let out = ops::channel_affine(
            self.value(x),
            self.value(gamma).data(),
            self.value(beta).data(),
        )?;
        Ok(self.push(Op::ChannelAffine { x, gamma, beta }, out))
    }

    /// Elementwise `scale * x + shift` with compile-time-fixed scalars.
    pub fn affine_const(&mut self, x: ValueId, scale: E, shift: E) -> ValueId {
        let out = ops::affine_const(self.value(x), scale, shift);
        self.push(Op::AffineConst { x, scale }, out)
    }

    /// Train-mode inverted dropout with a seeded mask.
    pub fn dropout(&mut self, x: ValueId, rate: f64, seed: u64) -> Result<ValueId> {
        let mask = dropout_mask(self.value(x).len(), rate, seed)?;
        let keep = E::from_f64(1.0 / (1.0 - rate));
        let xv = self.value(x);
        let out = Tensor::from_fn(xv.shape(), |i| {
            if mask[i] {
                xv.data()[i] * keep
            } else {
                E::zero()
            }
        });
        Ok(self.push(Op::Dropout { x, mask, keep }, out))
    }

    /// Scalar sum of all elements.
    pub fn sum(&mut self, x: ValueId) -> ValueId {
        let total = self.value(x).data().iter().copied().sum();
        let out = Tensor::from_vec(Shape::new(1, 1, 1, 1), vec![total]).expect("scalar");
        self.push(Op::Sum { x }, out)
    }

    /// Scalar sum of squares.
    pub fn sum_sq(&mut self, x: ValueId) -> ValueId {
        let total = self.value(x).data().iter().map(|&v| v * v).sum();
        let out = Tensor::from_vec(Shape::new(1, 1, 1, 1), vec![total]).expect("scalar");
        self.push(Op::SumSq { x }, out)
    }

    /// Elementwise product with a fixed coefficient tensor.
    pub fn mul_const(&mut self, x: ValueId, coeff: Tensor<E>) -> Result<ValueId> {
        if coeff.shape() != self.value(x).shape() {
            return Err(Error::shape(format!(
                "coefficient shape {} does not match value {}",
                coeff.shape(),
                self.value(x).shape()
            )));
        }
        let xv = self.value(x);
        let out = Tensor::from_fn(xv.shape(), |i| xv.data()[i] * coeff.data()[i]);
        Ok(self.push(Op::MulConst { x, coeff }, out))
    }

    /// Reverse pass from a scalar node with seed gradient 1.
    pub fn backward(&self, loss: ValueId) -> Result<GradientSet<E>> {
        self.backward_seeded(loss, E::one())
    }

    /// Reverse pass from a scalar node with an explicit seed gradient.
    /// The result is linear in the seed.
    pub fn backward_seeded(&self, loss: ValueId, seed: E) -> Result<GradientSet<E>> {
        if self.value(loss).len() != 1 {
            return Err(Error::invalid(format!(
                "backward needs a scalar root, node has {} elements",
                self.value(loss).len()
            )));
        }
        let mut grads: Vec<Option<Tensor<E>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::from_vec(Shape::new(1, 1, 1, 1), vec![seed])?);

        for idx in (0..=loss.0).rev() {
            if matches!(self.nodes[idx].op, Op::Leaf { .. }) {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &g, &mut grads)?;
        }

        Ok(GradientSet { grads })
    }

    fn wants_grad(&self, id: ValueId) -> bool {
        !matches!(self.nodes[id.0].op, Op::Leaf { requires_grad: false })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<E>>], id: ValueId, delta: Tensor<E>) {
        match &mut grads[id.0] {
            Some(existing) => {
                for (a, b) in existing.data_mut().iter_mut().zip(delta.data()) {
                    *a += *b;
                }
            }
            slot @ None => *slot = Some(delta),
        }
    }

    fn propagate(&self, idx: usize, g: &Tensor<E>, grads: &mut [Option<Tensor<E>>]) -> Result<()> {
        let _t0 = std::time::Instant::now();
        let _nm = op_trace_name(&self.nodes[idx].op);
        let _res = self.propagate_inner(idx, g, grads);
        OP_TRACE.with(|t| {
            let mut t = t.borrow_mut();
            *t.entry(_nm).or_insert(0.0) += _t0.elapsed().as_secs_f64();
        });
        _res
    }

    fn propagate_inner(&self, idx: usize, g: &Tensor<E>, grads: &mut [Option<Tensor<E>>]) -> Result<()> {
        match &self.nodes[idx].op {
            Op::Leaf { .. } => {}
            Op::Conv2d { x, w, spec } => {
                let need_dx = self.wants_grad(*x);
                let out = conv2d_backward(self.value(*x), spec, self.value(*w), g, need_dx)?;
                if self.wants_grad(*w) {
                    self.accumulate(grads, *w, out.dw);
                }
                if let Some(dx) = out.dx {
                    self.accumulate(grads, *x, dx);
                }
            }
            Op::Fc { x, w } => {
                let need_dx = self.wants_grad(*x);
                let out = ops::fully_connected_backward(self.value(*x), self.value(*w), g, need_dx)?;
                if self.wants_grad(*w) {
                    self.accumulate(grads, *w, out.dw);
                }
                if let Some(dx) = out.dx {
                    self.accumulate(grads, *x, dx);
                }
            }
            Op::Relu { x } => {
                if self.wants_grad(*x) {
                    self.accumulate(grads, *x, ops::relu_backward(self.value(*x), g));
                }
            }
            Op::Trelu { x, alpha } => {
                let (dx, dalpha) = ops::trelu_backward(self.value(*x), self.value(*alpha).data(), g)?;
                if self.wants_grad(*x) {
                    self.accumulate(grads, *x, dx);
                }
                if self.wants_grad(*alpha) {
                    let shape = self.value(*alpha).shape();
                    self.accumulate(grads, *alpha, Tensor::from_vec(shape, dalpha)?);
                }
            }
            Op::MaxPool { x, argmax } => {
                if self.wants_grad(*x) {
                    let dx = ops::max_pool_backward(self.value(*x).shape(), argmax, g)?;
                    self.accumulate(grads, *x, dx);
                }
            }
            Op::AvgPool { x, spec } => {
                if self.wants_grad(*x) {
                    let dx = ops::avg_pool_backward(self.value(*x).shape(), spec, g)?;
                    self.accumulate(grads, *x, dx);
                }
            }
            Op::SoftmaxXent { logits, labels, probs } => {
                if self.wants_grad(*logits) {
                    let d = ops::softmax_cross_entropy_backward(probs, labels, g.data()[0]);
                    self.accumulate(grads, *logits, d);
                }
            }
            Op::BatchNorm { x, gamma, beta, eps, mean, var } => {
                let (dx, dgamma, dbeta) = bn_backward(
                    self.value(*x),
                    mean,
                    var,
                    self.value(*gamma).data(),
                    *eps,
                    g,
                )?;
                if self.wants_grad(*x) {
                    self.accumulate(grads, *x, dx);
                }
                if self.wants_grad(*gamma) {
                    let shape = self.value(*gamma).shape();
                    self.accumulate(grads, *gamma, Tensor::from_vec(shape, dgamma)?);
                }
                if self.wants_grad(*beta) {
                    let shape = self.value(*beta).shape();
                    self.accumulate(grads, *beta, Tensor::from_vec(shape, dbeta)?);
                }
            }
            Op::WeightNorm { w, eps } => {
                if self.wants_grad(*w) {
                    let dw = weight_normalize_backward(self.value(*w), *eps, g)?;
                    self.accumulate(grads, *w, dw);
                }
            }
            Op::ChannelAffine { x, gamma, beta } => {
                let (dx, dgamma, dbeta) =
                    ops::channel_affine_backward(self.value(*x), self.value(*gamma).data(), g)?;
                if self.wants_grad(*x) {
                    self.accumulate(grads, *x, dx);
                }
                if self.wants_grad(*gamma) {
                    let shape = self.value(*gamma).shape();
                    self.accumulate(grads, *gamma, Tensor::from_vec(shape, dgamma)?);
                }
                if self.wants_grad(*beta) {
                    let shape = self.value(*beta).shape();
                    self.accumulate(grads, *beta, Tensor::from_vec(shape, dbeta)?);
                }
            }
            Op::AffineConst { x, scale } => {
                if self.wants_grad(*x) {
                    let dx = Tensor::from_fn(g.shape(), |i| g.data()[i] * *scale);
                    self.accumulate(grads, *x, dx);
                }
            }
            Op::Dropout { x, mask, keep } => {
                if self.wants_grad(*x) {
                    let dx = Tensor::from_fn(g.shape(), |i| {
                        if mask[i] {
                            g.data()[i] * *keep
                        } else {
                            E::zero()
                        }
                    });
                    self.accumulate(grads, *x, dx);
                }
            }
            Op::Sum { x } => {
                if self.wants_grad(*x) {
                    let dx = Tensor::filled(self.value(*x).shape(), g.data()[0]);
                    self.accumulate(grads, *x, dx);
                }
            }
            Op::SumSq { x } => {
                if self.wants_grad(*x) {
                    let xv = self.value(*x);
                    let two = E::from_f64(2.0);
                    let scale = g.data()[0];
                    let dx = Tensor::from_fn(xv.shape(), |i| two * scale * xv.data()[i]);
                    self.accumulate(grads, *x, dx);
                }
            }
            Op::MulConst { x, coeff } => {
                if self.wants_grad(*x) {
                    let dx = Tensor::from_fn(g.shape(), |i| g.data()[i] * coeff.data()[i]);
                    self.accumulate(grads, *x, dx);
                }
            }
        }
        Ok(())
    }
}

/// Gradients keyed by [`ValueId`], populated for leaves after a backward
/// pass. Leaves that never influenced the loss have no entry; treat their
/// gradient as zero.
pub struct GradientSet<E: Element> {
    grads: Vec<Option<Tensor<E>>>,
}

impl<E: Element> GradientSet<E> {
    pub fn get(&self, id: ValueId) -> Option<&Tensor<E>> {
        self.grads.get(id.index()).and_then(|g| g.as_ref())
    }

    /// Removes and returns the gradient buffer for `id`.
    pub fn take(&mut self, id: ValueId) -> Option<Tensor<E>> {
        self.grads.get_mut(id.index()).and_then(|g| g.take())
    }

    /// Like [`GradientSet::take`] but materializes zeros for leaves the
    /// loss never touched.
    pub fn take_or_zero(&mut self, id: ValueId, shape: Shape) -> Tensor<E> {
        self.take(id).unwrap_or_else(|| Tensor::zeros(shape))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::{gaussian_init, PoolKind};

    #[test]
    fn fc_relu_sum_chain_has_hand_checkable_gradients() {
        // x = [1, -2], w = [[2, 1], [1, 1]]: u = [0, -1], relu(u) = [0, 0]
        // except u0 = 2*1 + 1*(-2) = 0 stays flat; switch to values with a
        // clearly positive and a clearly negative response.
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_vec(Shape::new(1, 2, 1, 1), vec![1.0, -2.0]).unwrap());
        let w = tape.leaf(Tensor::from_vec(Shape::new(2, 2, 1, 1), vec![3.0, 1.0, 1.0, 1.0]).unwrap());
        let u = tape.fully_connected(x, w).unwrap(); // [1, -1]
        let r = tape.relu(u); // [1, 0]
        let loss = tape.sum(r);
        assert_eq!(tape.value(loss).data(), &[1.0]);

        let mut grads = tape.backward(loss).unwrap();
        // Only the first row is active: dx = w_0, dw_0 = x, dw_1 = 0.
        assert_eq!(grads.take(x).unwrap().data(), &[3.0, 1.0]);
        assert_eq!(grads.take(w).unwrap().data(), &[1.0, -2.0, 0.0, 0.0]);
    }

    #[test]
    fn gradient_accumulates_when_a_leaf_feeds_two_roles() {
        // f(X) = sum(X . X^T): dX = G X + G^T X with G all-ones, which for
        // symmetric G equals 2 * ones * X.
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_vec(Shape::new(2, 2, 1, 1), vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let prod = tape.fully_connected(x, x).unwrap();
        let loss = tape.sum(prod);
        let mut grads = tape.backward(loss).unwrap();
        let dx = grads.take(x).unwrap();
        // Row sums of X are [3, 7]; column replication gives each entry
        // d/dx_ij = sum_k x_kj + sum_k x_kj = 2 * (column sum of X)... the
        // two occurrences contribute (G X)_ij + (G^T X)_ij = 2 (col j sum).
        assert_eq!(dx.data(), &[8.0, 12.0, 8.0, 12.0]);
    }

    #[test]
    fn backward_requires_scalar_root() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(gaussian_init(Shape::new(1, 2, 1, 1), 1));
        let r = tape.relu(x);
        assert!(tape.backward(r).is_err());
    }

    #[test]
    fn backward_is_linear_in_the_seed() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(gaussian_init(Shape::new(2, 3, 2, 2), 5));
        let w = tape.leaf(gaussian_init(Shape::new(4, 3, 3, 3), 6));
        let spec = ConvSpec::square(4, 3, 3, 1, 1).unwrap();
        let y = tape.conv2d(x, spec, w).unwrap();
        let r = tape.relu(y);
        let loss = tape.sum_sq(r);

        let mut g1 = tape.backward_seeded(loss, 1.0).unwrap();
        let mut g2 = tape.backward_seeded(loss, 2.0).unwrap();
        let (a1, a2) = (g1.take(w).unwrap(), g2.take(w).unwrap());
        for i in 0..a1.len() {
            // Doubling is exact in floating point.
            assert_eq!(2.0 * a1.data()[i], a2.data()[i]);
        }
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(gaussian_init(Shape::new(1, 3, 4, 4), 2));
        let w = tape.leaf(gaussian_init(Shape::new(2, 3, 3, 3), 3));
        let spec = ConvSpec::square(2, 3, 3, 1, 1).unwrap();
        let y = tape.conv2d(x, spec, w).unwrap();
        let loss = tape.sum(y);
        let mut grads = tape.backward(loss).unwrap();
        assert!(grads.get(x).is_none());
        assert!(grads.take(w).is_some());
    }

    #[test]
    fn unused_leaves_read_back_as_zero() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(gaussian_init(Shape::new(1, 4, 1, 1), 4));
        let unused = tape.leaf(gaussian_init(Shape::new(3, 3, 1, 1), 5));
        let loss = tape.sum(x);
        let mut grads = tape.backward(loss).unwrap();
        assert!(grads.get(unused).is_none());
        let z = grads.take_or_zero(unused, Shape::new(3, 3, 1, 1));
        assert!(z.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn softmax_head_gradient_matches_probs_minus_onehot() {
        let mut tape = Tape::<f64>::new();
        let logits = tape.leaf(gaussian_init(Shape::new(3, 5, 1, 1), 7));
        let labels = vec![0usize, 2, 4];
        let loss = tape.softmax_cross_entropy(logits, &labels).unwrap();
        let (_, probs) = ops::softmax_cross_entropy(tape.value(logits), &labels).unwrap();
        let mut grads = tape.backward(loss).unwrap();
        let d = grads.take(logits).unwrap();
        for i in 0..3 {
            for k in 0..5 {
                let onehot = if labels[i] == k { 1.0 } else { 0.0 };
                let want = (probs.at(i, k, 0, 0) - onehot) / 3.0;
                assert!((d.at(i, k, 0, 0) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn batch_norm_node_exposes_batch_stats_and_grads() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(gaussian_init(Shape::new(4, 2, 3, 3), 8));
        let gamma = tape.leaf(Tensor::filled(Shape::new(1, 2, 1, 1), 1.0));
        let beta = tape.leaf(Tensor::zeros(Shape::new(1, 2, 1, 1)));
        let y = tape.batch_norm(x, gamma, beta, 1e-5).unwrap();
        let (mean, var) = tape.batch_norm_stats(y).unwrap();
        let (want_mean, want_var) = bn_batch_stats(tape.value(x)).unwrap();
        assert_eq!(mean, &want_mean[..]);
        assert_eq!(var, &want_var[..]);
        assert!(tape.batch_norm_stats(x).is_none());

        let loss = tape.sum_sq(y);
        let mut grads = tape.backward(loss).unwrap();
        assert!(grads.take(gamma).is_some());
        assert!(grads.take(beta).is_some());
        assert!(grads.take(x).is_some());
    }

    #[test]
    fn pooling_nodes_route_gradients() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_vec(Shape::new(1, 1, 2, 2), vec![1.0, 5.0, 3.0, 4.0]).unwrap());
        let mx = tape.max_pool(x, PoolSpec::square(PoolKind::Max, 2, 2, 0).unwrap()).unwrap();
        let loss = tape.sum(mx);
        let mut grads = tape.backward(loss).unwrap();
        assert_eq!(grads.take(x).unwrap().data(), &[0.0, 1.0, 0.0, 0.0]);

        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_vec(Shape::new(1, 1, 2, 2), vec![1.0, 5.0, 3.0, 4.0]).unwrap());
        let av = tape.avg_pool(x, PoolSpec::square(PoolKind::Avg, 2, 2, 0).unwrap()).unwrap();
        let loss = tape.sum(av);
        let mut grads = tape.backward(loss).unwrap();
        assert_eq!(grads.take(x).unwrap().data(), &[0.25, 0.25, 0.25, 0.25]);

        let bad = PoolSpec::square(PoolKind::Avg, 2, 2, 0).unwrap();
        let mut tape2 = Tape::<f64>::new();
        let x2 = tape2.leaf(gaussian_init(Shape::new(1, 1, 4, 4), 1));
        assert!(tape2.max_pool(x2, bad).is_err());
    }

    #[test]
    fn dropout_node_matches_mask_semantics() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::filled(Shape::new(1, 1, 1, 100), 1.0));
        let d = tape.dropout(x, 0.5, 77).unwrap();
        let loss = tape.sum(d);
        let mut grads = tape.backward(loss).unwrap();
        let dx = grads.take(x).unwrap();
        for (o, gx) in tape.value(d).data().iter().zip(dx.data()) {
            if *o == 0.0 {
                assert_eq!(*gx, 0.0);
            } else {
                assert_eq!(*o, 2.0);
                assert_eq!(*gx, 2.0);
            }
        }
    }

    #[test]
    fn weight_norm_node_backpropagates_through_rows() {
        let mut tape = Tape::<f64>::new();
        let w = tape.leaf(gaussian_init(Shape::new(3, 4, 1, 1), 9));
        let what = tape.weight_normalize(w, 0.0).unwrap();
        let loss = tape.sum_sq(what);
        let mut grads = tape.backward(loss).unwrap();
        let dw = grads.take(w).unwrap();
        // sum of squares of unit rows is constant, so the gradient must
        // vanish up to round-off.
        for &v in dw.data() {
            assert!(v.abs() < 1e-12, "residual gradient {v}");
        }
    }
}
