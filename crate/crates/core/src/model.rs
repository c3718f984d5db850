//! Parameterized network state and the forward interpreters.
//!
//! A [`Model`] binds a [`NetworkSpec`] to concrete parameter tensors and
//! knows how to run the network in two modes: a recording forward that
//! builds an autodiff tape for training, and a pure forward that uses
//! stored running statistics for inference. Parameters live in one flat
//! vector so the optimizer can step them as a slice; layer states refer
//! to them by index.

use crate::autodiff::{GradientSet, Tape, ValueId};
use crate::error::{Error, Result};
use crate::layers::{bn_apply, weight_normalize, NpConstants, BN_EPS, BN_RHO, WN_EPS};
use crate::network::{LayerKind, NetworkSpec, NormKind};
use crate::ops::{self, xavier_init};
use crate::tensor::{Element, Shape, Tensor};

/// Name and optimizer treatment of one parameter tensor.
#[derive(Clone, Debug)]
pub struct ParamInfo {
    pub name: String,
    /// Weight matrices shrink under weight decay; scale, shift, and
    /// threshold parameters are exempt.
    pub decay: bool,
}

/// Running batch-norm statistics, kept in f64 so long exponential
/// averages do not drift in low precision.
#[derive(Clone, Debug)]
struct RunningStats {
    mean: Vec<f64>,
    var: Vec<f64>,
    rho: f64,
}

impl RunningStats {
    fn new(channels: usize) -> Self {
        RunningStats {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
            rho: BN_RHO,
        }
    }

    fn update<E: Element>(&mut self, mean: &[E], var: &[E]) {
        for (r, b) in self.mean.iter_mut().zip(mean) {
            *r = self.rho * *r + (1.0 - self.rho) * b.as_f64();
        }
        for (r, b) in self.var.iter_mut().zip(var) {
            *r = self.rho * *r + (1.0 - self.rho) * b.as_f64();
        }
    }
}

/// Per-layer parameter bindings, as indices into the flat parameter list.
#[derive(Clone, Debug)]
enum NodeState {
    /// Bare weight, no normalizer attached.
    Plain { w: usize },
    /// Weight plus batch normalization after the linear map.
    Bn {
        w: usize,
        gamma: usize,
        beta: usize,
        run: RunningStats,
    },
    /// Unit-normalized weight plus a channel affine; `beta` is absent
    /// where the layer must stay bias-free.
    Wn {
        w: usize,
        gamma: usize,
        beta: Option<usize>,
    },
    /// Unit-normalized weight with per-channel learned thresholds.
    TreluWn { w: usize, alpha: usize },
    /// No parameters.
    Pool,
}

/// Result of a recording forward pass: the tape, the loss and logit
/// nodes, every parameter as a leaf (aligned with the model's parameter
/// order), each layer's output node, and the normalizer taps.
pub struct Recorded<E: Element> {
    pub tape: Tape<E>,
    pub loss: ValueId,
    pub logits: ValueId,
    pub param_ids: Vec<ValueId>,
    pub layer_outputs: Vec<(String, ValueId)>,
    /// Per normalized layer, the value its normalizer hands onward
    /// before any rectifier: the batch-normalized activations, or the
    /// unit-weight linear output for weight-based schemes.
    pub norm_taps: Vec<(String, ValueId)>,
}

impl<E: Element> Recorded<E> {
    /// Loss value as a scalar.
    pub fn loss_value(&self) -> f64 {
        self.tape.value(self.loss).data()[0].as_f64()
    }

    /// Output tensor of the named layer, if it exists.
    pub fn layer_output(&self, name: &str) -> Option<&Tensor<E>> {
        self.layer_outputs
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, id)| self.tape.value(*id))
    }

    /// Normalizer output tensor of the named layer, if it exists.
    pub fn norm_tap(&self, name: &str) -> Option<&Tensor<E>> {
        self.norm_taps
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, id)| self.tape.value(*id))
    }
}

/// A network specification bound to parameter tensors.
pub struct Model<E: Element> {
    net: NetworkSpec,
    params: Vec<Tensor<E>>,
    infos: Vec<ParamInfo>,
    states: Vec<NodeState>,
    /// Trailing channel affine on the logits, when the spec asks for one.
    final_affine: Option<(usize, usize)>,
    np: NpConstants,
    wn_eps: f64,
}

fn derive_seed(seed: u64, k: usize) -> u64 {
    seed ^ (k as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

impl<E: Element> Model<E> {
    /// Allocates and initializes parameters for the given network.
    /// Weights draw from the fan-balanced uniform initializer with a
    /// seed derived per parameter; scales start at one, shifts and
    /// thresholds at zero.
    pub fn new(net: NetworkSpec, seed: u64) -> Result<Self> {
        net.validate()?;
        let mut params: Vec<Tensor<E>> = Vec::new();
        let mut infos: Vec<ParamInfo> = Vec::new();
        let mut states: Vec<NodeState> = Vec::new();

        let push = |params: &mut Vec<Tensor<E>>,
                        infos: &mut Vec<ParamInfo>,
                        name: String,
                        decay: bool,
                        t: Tensor<E>|
         -> usize {
            params.push(t);
            infos.push(ParamInfo { name, decay });
            params.len() - 1
        };

        for layer in &net.layers {
            let (w_shape, c_out) = match layer.kind {
                LayerKind::Conv { conv, .. } => (Some(conv.weight_shape()), conv.c_out),
                LayerKind::Fc { d_in, d_out, .. } => {
                    (Some(Shape::new(d_out, d_in, 1, 1)), d_out)
                }
                LayerKind::MaxPool(_) | LayerKind::AvgPool(_) => (None, 0),
            };
            let Some(w_shape) = w_shape else {
                states.push(NodeState::Pool);
                continue;
            };
            let w_init = xavier_init(w_shape, derive_seed(seed, params.len()));
            let w = push(
                &mut params,
                &mut infos,
                format!("{}.w", layer.name),
                true,
                w_init,
            );
            let ch = Shape::new(1, c_out, 1, 1);
            let state = if !layer.is_normalized() {
                NodeState::Plain { w }
            } else {
                match net.norm {
                    NormKind::None => NodeState::Plain { w },
                    NormKind::BatchNorm => {
                        let gamma = push(
                            &mut params,
                            &mut infos,
                            format!("{}.gamma", layer.name),
                            false,
                            Tensor::filled(ch, E::one()),
                        );
                        let beta = push(
                            &mut params,
                            &mut infos,
                            format!("{}.beta", layer.name),
                            false,
                            Tensor::zeros(ch),
                        );
                        NodeState::Bn {
                            w,
                            gamma,
                            beta,
                            run: RunningStats::new(c_out),
                        }
                    }
                    NormKind::WeightNorm | NormKind::NormProp => {
                        let gamma = push(
                            &mut params,
                            &mut infos,
                            format!("{}.gamma", layer.name),
                            false,
                            Tensor::filled(ch, E::one()),
                        );
                        // Fully connected layers stay bias-free; the
                        // shift would reintroduce a bias term.
                        let beta = match layer.kind {
                            LayerKind::Conv { .. } => Some(push(
                                &mut params,
                                &mut infos,
                                format!("{}.beta", layer.name),
                                false,
                                Tensor::zeros(ch),
                            )),
                            _ => None,
                        };
                        NodeState::Wn { w, gamma, beta }
                    }
                    NormKind::TreluWn => {
                        let alpha = push(
                            &mut params,
                            &mut infos,
                            format!("{}.alpha", layer.name),
                            false,
                            Tensor::zeros(ch),
                        );
                        NodeState::TreluWn { w, alpha }
                    }
                }
            };
            states.push(state);
        }

        let final_affine = if net.final_affine {
            let ch = Shape::new(1, net.classes, 1, 1);
            let gamma = push(
                &mut params,
                &mut infos,
                "final.gamma".to_string(),
                false,
                Tensor::filled(ch, E::one()),
            );
            let beta = push(
                &mut params,
                &mut infos,
                "final.beta".to_string(),
                false,
                Tensor::zeros(ch),
            );
            Some((gamma, beta))
        } else {
            None
        };

        Ok(Model {
            net,
            params,
            infos,
            states,
            final_affine,
            np: NpConstants::new(),
            wn_eps: WN_EPS,
        })
    }

    pub fn net(&self) -> &NetworkSpec {
        &self.net
    }

    pub fn params(&self) -> &[Tensor<E>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<E>] {
        &mut self.params
    }

    pub fn param_infos(&self) -> &[ParamInfo] {
        &self.infos
    }

    /// Per-parameter weight-decay eligibility, aligned with `params()`.
    pub fn decay_mask(&self) -> Vec<bool> {
        self.infos.iter().map(|i| i.decay).collect()
    }

    /// Replaces all parameter tensors. Shapes must match pairwise.
    pub fn set_params(&mut self, new: Vec<Tensor<E>>) -> Result<()> {
        if new.len() != self.params.len() {
            return Err(Error::invalid(format!(
                "expected {} parameter tensors, got {}",
                self.params.len(),
                new.len()
            )));
        }
        for (have, got) in self.params.iter().zip(&new) {
            if have.shape() != got.shape() {
                return Err(Error::shape(format!(
                    "parameter shape mismatch: have {}, got {}",
                    have.shape(),
                    got.shape()
                )));
            }
        }
        self.params = new;
        Ok(())
    }

    /// Weight matrices by layer name, for coherence diagnostics.
    pub fn weight_matrices(&self) -> Vec<(&str, &Tensor<E>)> {
        self.net
            .layers
            .iter()
            .zip(&self.states)
            .filter_map(|(layer, state)| {
                let w = match state {
                    NodeState::Plain { w }
                    | NodeState::Bn { w, .. }
                    | NodeState::Wn { w, .. }
                    | NodeState::TreluWn { w, .. } => *w,
                    NodeState::Pool => return None,
                };
                Some((layer.name.as_str(), &self.params[w]))
            })
            .collect()
    }

    /// Names of the layers whose outputs the recording forward captures,
    /// in order.
    pub fn layer_names(&self) -> Vec<String> {
        let mut names: Vec<String> = self.net.layers.iter().map(|l| l.name.clone()).collect();
        if self.final_affine.is_some() {
            names.push("final".to_string());
        }
        names
    }

    /// Training-mode forward: records every op on a fresh tape, returns
    /// the loss node, and folds the batch statistics of each
    /// batch-normalization layer into its running estimates.
    pub fn forward_train(&mut self, x: &Tensor<E>, labels: &[usize]) -> Result<Recorded<E>> {
        let (c, h, w) = self.net.input;
        let in_shape = Shape::new(x.shape().m, c, h, w);
        if x.shape() != in_shape {
            return Err(Error::shape(format!(
                "network expects input {in_shape}, got {}",
                x.shape()
            )));
        }

        let mut tape = Tape::new();
        let param_ids: Vec<ValueId> = self
            .params
            .iter()
            .map(|p| tape.leaf(p.clone()))
            .collect();
        let mut cur = tape.constant(x.clone());
        let mut layer_outputs = Vec::with_capacity(self.net.layers.len() + 1);
        let mut norm_taps = Vec::new();
        let mut bn_nodes: Vec<(usize, ValueId)> = Vec::new();

        for (li, layer) in self.net.layers.iter().enumerate() {
            cur = match (&layer.kind, &self.states[li]) {
                (LayerKind::MaxPool(spec), NodeState::Pool) => tape.max_pool(cur, *spec)?,
                (LayerKind::AvgPool(spec), NodeState::Pool) => tape.avg_pool(cur, *spec)?,
                (LayerKind::Conv { conv, .. }, state) => {
                    let pre = self.linear_node(
                        &mut tape,
                        &param_ids,
                        cur,
                        state,
                        li,
                        &mut bn_nodes,
                        &mut norm_taps,
                        |tape, x, w| tape.conv2d(x, *conv, w),
                    )?;
                    self.post_rectify(&mut tape, &param_ids, pre, state)?
                }
                (LayerKind::Fc { .. }, state) => {
                    let pre = self.linear_node(
                        &mut tape,
                        &param_ids,
                        cur,
                        state,
                        li,
                        &mut bn_nodes,
                        &mut norm_taps,
                        |tape, x, w| tape.fully_connected(x, w),
                    )?;
                    // Fully connected layers are linear; only a
                    // normalizer that rectifies by construction adds one.
                    let rectifying = matches!(state, NodeState::TreluWn { .. })
                        || (matches!(state, NodeState::Wn { .. })
                            && self.net.norm == NormKind::NormProp);
                    if rectifying {
                        self.post_rectify(&mut tape, &param_ids, pre, state)?
                    } else {
                        pre
                    }
                }
                _ => {
                    return Err(Error::invalid(format!(
                        "layer {} has inconsistent parameter state",
                        layer.name
                    )))
                }
            };
            layer_outputs.push((layer.name.clone(), cur));
        }

        if let Some((g, b)) = self.final_affine {
            cur = tape.channel_affine(cur, param_ids[g], param_ids[b])?;
            layer_outputs.push(("final".to_string(), cur));
        }
        let logits = cur;
        let loss = tape.softmax_cross_entropy(logits, labels)?;

        for (li, node) in bn_nodes {
            let (mean, var) = tape
                .batch_norm_stats(node)
                .expect("recorded node is batch normalization");
            if let NodeState::Bn { run, .. } = &mut self.states[li] {
                run.update(mean, var);
            }
        }

        Ok(Recorded {
            tape,
            loss,
            logits,
            param_ids,
            layer_outputs,
            norm_taps,
        })
    }

    /// Records the linear map of one layer together with its normalizer,
    /// up to but not including the rectifier.
    #[allow(clippy::too_many_arguments)]
    fn linear_node(
        &self,
        tape: &mut Tape<E>,
        param_ids: &[ValueId],
        x: ValueId,
        state: &NodeState,
        layer_index: usize,
        bn_nodes: &mut Vec<(usize, ValueId)>,
        norm_taps: &mut Vec<(String, ValueId)>,
        apply: impl Fn(&mut Tape<E>, ValueId, ValueId) -> Result<ValueId>,
    ) -> Result<ValueId> {
        let name = || self.net.layers[layer_index].name.clone();
        match state {
            NodeState::Plain { w } => apply(tape, x, param_ids[*w]),
            NodeState::Bn { w, gamma, beta, .. } => {
                let y = apply(tape, x, param_ids[*w])?;
                let b = tape.batch_norm(
                    y,
                    param_ids[*gamma],
                    param_ids[*beta],
                    E::from_f64(BN_EPS),
                )?;
                bn_nodes.push((layer_index, b));
                norm_taps.push((name(), b));
                Ok(b)
            }
            NodeState::Wn { w, gamma, beta } => {
                let unit = tape.weight_normalize(param_ids[*w], E::from_f64(self.wn_eps))?;
                let y = apply(tape, x, unit)?;
                norm_taps.push((name(), y));
                let beta_id = match beta {
                    Some(b) => param_ids[*b],
                    None => {
                        let c = tape.value(param_ids[*gamma]).shape();
                        tape.constant(Tensor::zeros(c))
                    }
                };
                tape.channel_affine(y, param_ids[*gamma], beta_id)
            }
            NodeState::TreluWn { w, .. } => {
                let unit = tape.weight_normalize(param_ids[*w], E::from_f64(self.wn_eps))?;
                let y = apply(tape, x, unit)?;
                norm_taps.push((name(), y));
                Ok(y)
            }
            NodeState::Pool => Err(Error::invalid("pool layer carries no linear map")),
        }
    }

    /// Applies the layer's rectifier to the normalized pre-activation.
    fn post_rectify(
        &self,
        tape: &mut Tape<E>,
        param_ids: &[ValueId],
        pre: ValueId,
        state: &NodeState,
    ) -> Result<ValueId> {
        Ok(match (state, self.net.norm) {
            (NodeState::Wn { .. }, NormKind::NormProp) => {
                let r = tape.relu(pre);
                let scale = E::from_f64(self.np.c_var);
                let shift = E::from_f64(-self.np.c_var * self.np.c_mean);
                tape.affine_const(r, scale, shift)
            }
            (NodeState::TreluWn { alpha, .. }, _) => tape.trelu(pre, param_ids[*alpha])?,
            _ => tape.relu(pre),
        })
    }

    /// Inference-mode forward: no tape, batch normalization uses the
    /// stored running statistics. Returns the logits.
    pub fn forward_infer(&self, x: &Tensor<E>) -> Result<Tensor<E>> {
        let (c, h, w) = self.net.input;
        let in_shape = Shape::new(x.shape().m, c, h, w);
        if x.shape() != in_shape {
            return Err(Error::shape(format!(
                "network expects input {in_shape}, got {}",
                x.shape()
            )));
        }

        let mut cur = x.clone();
        for (li, layer) in self.net.layers.iter().enumerate() {
            let state = &self.states[li];
            cur = match &layer.kind {
                LayerKind::MaxPool(spec) | LayerKind::AvgPool(spec) => ops::pool(&cur, spec)?,
                LayerKind::Conv { conv, .. } => {
                    let pre = self.infer_linear(&cur, state, |x, w| crate::conv::conv2d(x, conv, w))?;
                    self.infer_rectify(pre, state)?
                }
                LayerKind::Fc { .. } => {
                    let pre = self.infer_linear(&cur, state, ops::fully_connected)?;
                    match (state, self.net.norm) {
                        (NodeState::Wn { .. }, NormKind::NormProp)
                        | (NodeState::TreluWn { .. }, _) => self.infer_rectify(pre, state)?,
                        _ => pre,
                    }
                }
            };
        }

        if let Some((g, b)) = self.final_affine {
            cur = ops::channel_affine(&cur, self.params[g].data(), self.params[b].data())?;
        }
        Ok(cur)
    }

    fn infer_linear(
        &self,
        x: &Tensor<E>,
        state: &NodeState,
        apply: impl Fn(&Tensor<E>, &Tensor<E>) -> Result<Tensor<E>>,
    ) -> Result<Tensor<E>> {
        match state {
            NodeState::Plain { w } => apply(x, &self.params[*w]),
            NodeState::Bn { w, gamma, beta, run } => {
                let y = apply(x, &self.params[*w])?;
                let mean: Vec<E> = run.mean.iter().map(|&v| E::from_f64(v)).collect();
                let var: Vec<E> = run.var.iter().map(|&v| E::from_f64(v)).collect();
                bn_apply(
                    &y,
                    &mean,
                    &var,
                    self.params[*gamma].data(),
                    self.params[*beta].data(),
                    E::from_f64(BN_EPS),
                )
            }
            NodeState::Wn { w, gamma, beta } => {
                let unit = weight_normalize(&self.params[*w], E::from_f64(self.wn_eps))?;
                let y = apply(x, &unit)?;
                let zeros;
                let beta_data: &[E] = match beta {
                    Some(b) => self.params[*b].data(),
                    None => {
                        zeros = vec![E::zero(); self.params[*gamma].data().len()];
                        &zeros
                    }
                };
                ops::channel_affine(&y, self.params[*gamma].data(), beta_data)
            }
            NodeState::TreluWn { w, .. } => {
                let unit = weight_normalize(&self.params[*w], E::from_f64(self.wn_eps))?;
                apply(x, &unit)
            }
            NodeState::Pool => Err(Error::invalid("pool layer carries no linear map")),
        }
    }

    fn infer_rectify(&self, pre: Tensor<E>, state: &NodeState) -> Result<Tensor<E>> {
        Ok(match (state, self.net.norm) {
            (NodeState::Wn { .. }, NormKind::NormProp) => {
                let r = ops::relu(&pre);
                let scale = E::from_f64(self.np.c_var);
                let shift = E::from_f64(-self.np.c_var * self.np.c_mean);
                ops::affine_const(&r, scale, shift)
            }
            (NodeState::TreluWn { alpha, .. }, _) => {
                ops::trelu(&pre, self.params[*alpha].data())?
            }
            _ => ops::relu(&pre),
        })
    }

    /// Extracts this model's parameter gradients from a backward pass,
    /// aligned with `params()`. Parameters the loss never touched get
    /// zero gradients.
    pub fn collect_grads(&self, rec: &Recorded<E>, grads: &mut GradientSet<E>) -> Vec<Tensor<E>> {
        rec.param_ids
            .iter()
            .zip(&self.params)
            .map(|(id, p)| grads.take_or_zero(*id, p.shape()))
            .collect()
    }
}

/// Fraction of rows whose largest logit matches the label.
pub fn accuracy<E: Element>(logits: &Tensor<E>, labels: &[usize]) -> Result<f64> {
    let s = logits.shape();
    if s.m != labels.len() {
        return Err(Error::shape(format!(
            "{} logit rows but {} labels",
            s.m,
            labels.len()
        )));
    }
    if s.m == 0 {
        return Err(Error::invalid("accuracy needs at least one sample"));
    }
    let per = s.per_sample();
    let mut hits = 0usize;
    for (i, &label) in labels.iter().enumerate() {
        let row = &logits.data()[i * per..(i + 1) * per];
        let mut best = 0usize;
        for (j, &v) in row.iter().enumerate() {
            if v.as_f64() > row[best].as_f64() {
                best = j;
            }
        }
        if best == label {
            hits += 1;
        }
    }
    Ok(hits as f64 / s.m as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{build_cifar10_nv, build_deep_linear, build_fc_classifier};
    use crate::ops::gaussian_init;

    fn blob_batch(m: usize, seed: u64) -> (Tensor<f64>, Vec<usize>) {
        let x = gaussian_init(Shape::new(m, 3, 28, 28), seed);
        let labels = (0..m).map(|i| i % 10).collect();
        (x, labels)
    }

    #[test]
    fn init_is_deterministic_and_seed_sensitive() {
        let a: Model<f64> = Model::new(build_cifar10_nv(NormKind::WeightNorm), 7).unwrap();
        let b: Model<f64> = Model::new(build_cifar10_nv(NormKind::WeightNorm), 7).unwrap();
        let c: Model<f64> = Model::new(build_cifar10_nv(NormKind::WeightNorm), 8).unwrap();
        for (x, y) in a.params().iter().zip(b.params()) {
            assert_eq!(x.data(), y.data());
        }
        let first_differs = a.params()[0]
            .data()
            .iter()
            .zip(c.params()[0].data())
            .any(|(x, y)| x != y);
        assert!(first_differs);
    }

    #[test]
    fn parameter_inventory_matches_scheme() {
        let count = |norm: NormKind| {
            let m: Model<f64> = Model::new(build_cifar10_nv(norm), 1).unwrap();
            (
                m.params().len(),
                m.decay_mask().iter().filter(|&&d| d).count(),
            )
        };
        // 9 conv weights everywhere; BN adds gamma+beta at its two sites;
        // WN and the propagating variant add gamma+beta per conv; the
        // threshold variant adds alpha per conv plus the final affine.
        assert_eq!(count(NormKind::None), (9, 9));
        assert_eq!(count(NormKind::BatchNorm), (13, 9));
        assert_eq!(count(NormKind::WeightNorm), (27, 9));
        assert_eq!(count(NormKind::NormProp), (27, 9));
        assert_eq!(count(NormKind::TreluWn), (20, 9));
    }

    #[test]
    fn deep_linear_weight_norm_stays_bias_free() {
        let net = build_deep_linear(4, 8, 16, 4, NormKind::WeightNorm).unwrap();
        let m: Model<f64> = Model::new(net, 3).unwrap();
        assert!(m.param_infos().iter().all(|i| !i.name.ends_with(".beta")));
        // One weight and one scale per layer.
        assert_eq!(m.params().len(), 8);
    }

    #[test]
    fn forward_shapes_and_finite_loss_for_every_scheme() {
        let (x, labels) = blob_batch(2, 11);
        for norm in [
            NormKind::None,
            NormKind::BatchNorm,
            NormKind::WeightNorm,
            NormKind::NormProp,
            NormKind::TreluWn,
        ] {
            let mut m: Model<f64> = Model::new(build_cifar10_nv(norm), 5).unwrap();
            let rec = m.forward_train(&x, &labels).unwrap();
            let logits = rec.tape.value(rec.logits);
            assert_eq!(logits.shape(), Shape::new(2, 10, 1, 1), "{}", norm.name());
            assert!(rec.loss_value().is_finite(), "{}", norm.name());
            assert_eq!(rec.layer_outputs.len(), m.layer_names().len());
        }
    }

    #[test]
    fn norm_taps_cover_normalized_layers_and_start_unit_scale() {
        let (x, labels) = blob_batch(8, 17);

        let mut bn: Model<f64> = Model::new(build_cifar10_nv(NormKind::BatchNorm), 5).unwrap();
        let rec = bn.forward_train(&x, &labels).unwrap();
        let names: Vec<&str> = rec.norm_taps.iter().map(|(n, _)| n.as_str()).collect();
        assert_eq!(names, vec!["conv3", "conv6"]);
        // A fresh batch-normalization layer emits unit-scale activations,
        // shaved slightly below one by the stabilizing epsilon.
        for (name, _) in &rec.norm_taps {
            let tap = rec.norm_tap(name).unwrap();
            let (_, nnorm) = crate::diagnostics::output_norm_stats(tap);
            assert!((nnorm - 1.0).abs() < 0.01, "{name}: nnorm {nnorm}");
            assert!(nnorm <= 1.0, "{name}: nnorm {nnorm}");
        }

        let mut wn: Model<f64> = Model::new(build_cifar10_nv(NormKind::WeightNorm), 5).unwrap();
        let rec = wn.forward_train(&x, &labels).unwrap();
        assert_eq!(rec.norm_taps.len(), 9);
        assert!(rec.norm_tap("conv9").is_some());
        assert!(rec.norm_tap("pool3").is_none());

        let mut plain: Model<f64> = Model::new(build_cifar10_nv(NormKind::None), 5).unwrap();
        let rec = plain.forward_train(&x, &labels).unwrap();
        assert!(rec.norm_taps.is_empty());
    }

    #[test]
    fn classifier_head_trains_and_infers_under_every_scheme() {
        let shape = Shape::new(4, 16, 1, 1);
        let x: Tensor<f64> = gaussian_init(shape, 31);
        let labels = vec![0, 1, 2, 3];
        for norm in [
            NormKind::None,
            NormKind::BatchNorm,
            NormKind::WeightNorm,
            NormKind::NormProp,
            NormKind::TreluWn,
        ] {
            let net = build_fc_classifier(16, 8, 4, norm).unwrap();
            let mut m: Model<f64> = Model::new(net, 7).unwrap();
            let rec = m.forward_train(&x, &labels).unwrap();
            assert!(rec.loss_value().is_finite(), "{}", norm.name());
            let mut grads = rec.tape.backward(rec.loss).unwrap();
            let gvec = m.collect_grads(&rec, &mut grads);
            assert_eq!(gvec.len(), m.params().len(), "{}", norm.name());
            let infer = m.forward_infer(&x).unwrap();
            assert_eq!(infer.shape(), Shape::new(4, 4, 1, 1), "{}", norm.name());
        }
    }

    #[test]
    fn infer_matches_train_when_no_batch_statistics_involved() {
        let (x, labels) = blob_batch(3, 21);
        for norm in [NormKind::None, NormKind::WeightNorm, NormKind::TreluWn] {
            let mut m: Model<f64> = Model::new(build_cifar10_nv(norm), 9).unwrap();
            let rec = m.forward_train(&x, &labels).unwrap();
            let train_logits = rec.tape.value(rec.logits);
            let infer_logits = m.forward_infer(&x).unwrap();
            let max_diff = train_logits
                .data()
                .iter()
                .zip(infer_logits.data())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            assert!(max_diff == 0.0, "{}: diff {max_diff}", norm.name());
        }
    }

    #[test]
    fn running_statistics_follow_batch_statistics() {
        let net = build_deep_linear(2, 6, 12, 6, NormKind::BatchNorm).unwrap();
        let mut m: Model<f64> = Model::new(net, 13).unwrap();
        let x = gaussian_init(Shape::new(16, 12, 1, 1), 77);
        let labels: Vec<usize> = (0..16).map(|i| i % 6).collect();

        // The first linear output is reproducible outside the tape.
        let w0 = m.params()[0].clone();
        let pre = ops::fully_connected(&x, &w0).unwrap();
        let (mean, var) = crate::layers::bn_batch_stats(&pre).unwrap();

        m.forward_train(&x, &labels).unwrap();
        let NodeState::Bn { run, .. } = &m.states[0] else {
            panic!("first layer should carry batch normalization");
        };
        for j in 0..6 {
            let want_mean = 0.99 * 0.0 + 0.01 * mean[j];
            let want_var = 0.99 * 1.0 + 0.01 * var[j];
            assert!((run.mean[j] - want_mean).abs() < 1e-12);
            assert!((run.var[j] - want_var).abs() < 1e-12);
        }
    }

    #[test]
    fn batch_norm_infer_converges_to_train_on_a_fixed_batch() {
        let net = build_deep_linear(2, 6, 12, 6, NormKind::BatchNorm).unwrap();
        let mut m: Model<f64> = Model::new(net, 29).unwrap();
        let x = gaussian_init(Shape::new(32, 12, 1, 1), 31);
        let labels: Vec<usize> = (0..32).map(|i| i % 6).collect();

        let mut last = None;
        for _ in 0..1500 {
            last = Some(m.forward_train(&x, &labels).unwrap());
        }
        let rec = last.unwrap();
        let train_logits = rec.tape.value(rec.logits);
        let infer_logits = m.forward_infer(&x).unwrap();
        let max_diff = train_logits
            .data()
            .iter()
            .zip(infer_logits.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(max_diff < 1e-4, "diff {max_diff}");
    }

    #[test]
    fn gradients_cover_every_parameter() {
        let (x, labels) = blob_batch(2, 41);
        let mut m: Model<f64> = Model::new(build_cifar10_nv(NormKind::TreluWn), 17).unwrap();
        let rec = m.forward_train(&x, &labels).unwrap();
        let mut grads = rec.tape.backward(rec.loss).unwrap();
        let gvec = m.collect_grads(&rec, &mut grads);
        assert_eq!(gvec.len(), m.params().len());
        for (g, p) in gvec.iter().zip(m.params()) {
            assert_eq!(g.shape(), p.shape());
            assert!(g.data().iter().all(|v| v.is_finite()));
        }
        // The loss must actually reach the first and last weights.
        let norm = |t: &Tensor<f64>| t.data().iter().map(|v| v * v).sum::<f64>();
        assert!(norm(&gvec[0]) > 0.0);
        let last_w = m
            .param_infos()
            .iter()
            .rposition(|i| i.decay)
            .unwrap();
        assert!(norm(&gvec[last_w]) > 0.0);
    }

    #[test]
    fn rejects_wrong_input_geometry() {
        let mut m: Model<f64> = Model::new(build_cifar10_nv(NormKind::None), 1).unwrap();
        let x = gaussian_init(Shape::new(2, 3, 32, 32), 1);
        assert!(m.forward_train(&x, &[0, 1]).is_err());
        assert!(m.forward_infer(&x).is_err());
    }

    #[test]
    fn accuracy_counts_argmax_hits() {
        let logits = Tensor::from_vec(
            Shape::new(3, 4, 1, 1),
            vec![
                0.1, 0.9, 0.0, 0.0, // -> 1
                2.0, 0.0, 0.0, 1.0, // -> 0
                0.0, 0.0, 0.3, 0.7, // -> 3
            ],
        )
        .unwrap();
        assert_eq!(accuracy(&logits, &[1, 0, 2]).unwrap(), 2.0 / 3.0);
        assert!(accuracy(&logits, &[0, 0]).is_err());
    }

    #[test]
    fn set_params_validates_shapes() {
        let mut m: Model<f64> = Model::new(
            build_deep_linear(2, 6, 12, 6, NormKind::None).unwrap(),
            1,
        )
        .unwrap();
        let good: Vec<Tensor<f64>> = m.params().to_vec();
        assert!(m.set_params(good).is_ok());
        let mut bad: Vec<Tensor<f64>> = m.params().to_vec();
        bad[0] = Tensor::zeros(Shape::new(1, 1, 1, 1));
        assert!(m.set_params(bad).is_err());
        assert!(m.set_params(Vec::new()).is_err());
    }
}
