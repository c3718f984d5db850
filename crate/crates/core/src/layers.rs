//! Normalization layers: batch normalization, weight normalization with an
//! optional channel affine, normalization propagation, the thresholded
//! rectifier variant, and inverted dropout.
//!
//! Per-channel parameters are stored as `(1, C, 1, 1)` tensors so the
//! optimizer can treat every trainable as a plain tensor.

use crate::conv::{conv2d, ConvSpec};
use crate::error::{Error, Result};
use crate::ops::{affine_const, channel_affine, fully_connected, relu, trelu};
use crate::tensor::{Element, Shape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Which linear map a normalized layer wraps.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LinearKind {
    Conv(ConvSpec),
    Fc,
}

impl LinearKind {
    /// Applies the wrapped linear map.
    pub fn apply<E: Element>(&self, x: &Tensor<E>, w: &Tensor<E>) -> Result<Tensor<E>> {
        match self {
            LinearKind::Conv(spec) => conv2d(x, spec, w),
            LinearKind::Fc => fully_connected(x, w),
        }
    }
}

/// Statistics mode for layers that behave differently while training.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormMode {
    Train,
    Infer,
}

/// Default variance guard for batch normalization.
pub const BN_EPS: f64 = 1e-5;

/// Default norm guard for weight normalization.
pub const WN_EPS: f64 = 1e-6;

/// Default exponential factor for running-statistics updates.
pub const BN_RHO: f64 = 0.99;

// ---------------------------------------------------------------------------
// Batch normalization
// ---------------------------------------------------------------------------

/// Learned and running state of one batch-normalization layer.
#[derive(Clone, Debug)]
pub struct BatchNormParams<E: Element> {
    pub gamma: Tensor<E>,
    pub beta: Tensor<E>,
    pub eps: E,
    pub running_mean: Vec<E>,
    pub running_var: Vec<E>,
    /// Exponential factor for the running-statistics update.
    pub rho: E,
}

impl<E: Element> BatchNormParams<E> {
    /// Identity-affine parameters with unit running variance.
    pub fn new(channels: usize) -> Self {
        BatchNormParams {
            gamma: Tensor::filled(Shape::new(1, channels, 1, 1), E::one()),
            beta: Tensor::zeros(Shape::new(1, channels, 1, 1)),
            eps: E::from_f64(BN_EPS),
            running_mean: vec![E::zero(); channels],
            running_var: vec![E::one(); channels],
            rho: E::from_f64(BN_RHO),
        }
    }

    pub fn with_eps(mut self, eps: E) -> Self {
        self.eps = eps;
        self
    }

    pub fn channels(&self) -> usize {
        self.gamma.shape().c
    }
}

/// Output of [`batch_norm_forward`] together with the statistics that
/// produced it (batch statistics in train mode, running ones in infer).
pub struct BnForward<E: Element> {
    pub out: Tensor<E>,
    pub mean: Vec<E>,
    pub var: Vec<E>,
}

/// Per-channel mean and population variance over all `m*h*w` positions.
/// Requires at least two positions per channel.
pub fn bn_batch_stats<E: Element>(x: &Tensor<E>) -> Result<(Vec<E>, Vec<E>)> {
    let s = x.shape();
    let n = s.m * s.plane();
    if n < 2 {
        return Err(Error::invalid(format!(
            "batch statistics need at least 2 positions per channel, got {n}"
        )));
    }
    let mut mean = vec![E::zero(); s.c];
    let mut var = vec![E::zero(); s.c];
    let inv_n = 1.0 / n as f64;
    for j in 0..s.c {
        let mut sum = 0.0f64;
        for i in 0..s.m {
            for &v in x.plane(i, j) {
                sum += v.as_f64();
            }
        }
        let mu = sum * inv_n;
        let mut sq = 0.0f64;
        for i in 0..s.m {
            for &v in x.plane(i, j) {
                let d = v.as_f64() - mu;
                sq += d * d;
            }
        }
        mean[j] = E::from_f64(mu);
        var[j] = E::from_f64(sq * inv_n);
    }
    Ok((mean, var))
}

/// Normalizes with the given statistics and applies the channel affine.
pub fn bn_apply<E: Element>(
    x: &Tensor<E>,
    mean: &[E],
    var: &[E],
    gamma: &[E],
    beta: &[E],
    eps: E,
) -> Result<Tensor<E>> {
    let s = x.shape();
    if mean.len() != s.c || var.len() != s.c || gamma.len() != s.c || beta.len() != s.c {
        return Err(Error::shape(format!(
            "batch-norm parameter vectors must have {} channels",
            s.c
        )));
    }
    let inv_sigma: Vec<E> = var.iter().map(|&v| (v + eps).sqrt().recip()).collect();
    let (plane, per) = (s.plane(), s.per_sample());
    let mut out = Tensor::zeros(s);
    for i in 0..s.m {
        for j in 0..s.c {
            let at = i * per + j * plane;
            let (g, b, mu, is) = (gamma[j], beta[j], mean[j], inv_sigma[j]);
            for (o, &v) in out.data_mut()[at..at + plane].iter_mut().zip(&x.data()[at..at + plane]) {
                *o = g * (v - mu) * is + b;
            }
        }
    }
    Ok(out)
}

/// Batch normalization. Train mode normalizes with batch statistics and
/// folds them into the running estimates; infer mode uses the stored
/// running statistics and leaves the parameters untouched.
pub fn batch_norm_forward<E: Element>(
    x: &Tensor<E>,
    params: &mut BatchNormParams<E>,
    mode: NormMode,
) -> Result<BnForward<E>> {
    if x.shape().c != params.channels() {
        return Err(Error::shape(format!(
            "batch norm has {} channels, input {} has {}",
            params.channels(),
            x.shape(),
            x.shape().c
        )));
    }
    match mode {
        NormMode::Train => {
            let (mean, var) = bn_batch_stats(x)?;
            let out = bn_apply(x, &mean, &var, params.gamma.data(), params.beta.data(), params.eps)?;
            let one = E::one();
            for j in 0..params.channels() {
                params.running_mean[j] = params.rho * params.running_mean[j] + (one - params.rho) * mean[j];
                params.running_var[j] = params.rho * params.running_var[j] + (one - params.rho) * var[j];
            }
            Ok(BnForward { out, mean, var })
        }
        NormMode::Infer => {
            let out = bn_apply(
                x,
                &params.running_mean,
                &params.running_var,
                params.gamma.data(),
                params.beta.data(),
                params.eps,
            )?;
            Ok(BnForward {
                out,
                mean: params.running_mean.clone(),
                var: params.running_var.clone(),
            })
        }
    }
}

/// Backward pass through train-mode batch normalization.
///
/// With `s = sqrt(var + eps)` and `xh` the normalized input, each channel
/// satisfies `dx = gamma/s * (g - mean(g) - xh * mean(g*xh))`, the means
/// running over the channel's `m*h*w` positions.
pub fn bn_backward<E: Element>(
    x: &Tensor<E>,
    mean: &[E],
    var: &[E],
    gamma: &[E],
    eps: E,
    grad_out: &Tensor<E>,
) -> Result<(Tensor<E>, Vec<E>, Vec<E>)> {
    let s = x.shape();
    if grad_out.shape() != s {
        return Err(Error::shape("batch-norm gradient shape mismatch"));
    }
    let n = s.m * s.plane();
    let inv_n = E::from_f64(1.0 / n as f64);
    let plane = s.plane();
    let mut dgamma = vec![E::zero(); s.c];
    let mut dbeta = vec![E::zero(); s.c];
    let mut dx = Tensor::zeros(s);
    for j in 0..s.c {
        let inv_sigma = (var[j] + eps).sqrt().recip();
        let mut sum_g = E::zero();
        let mut sum_gx = E::zero();
        for i in 0..s.m {
            let xb = s.offset(i, j, 0, 0);
            for t in 0..plane {
                let g = grad_out.data()[xb + t];
                let xh = (x.data()[xb + t] - mean[j]) * inv_sigma;
                sum_g += g;
                sum_gx += g * xh;
            }
        }
        dgamma[j] = sum_gx;
        dbeta[j] = sum_g;
        let mean_g = sum_g * inv_n;
        let mean_gx = sum_gx * inv_n;
        let scale = gamma[j] * inv_sigma;
        for i in 0..s.m {
            let xb = s.offset(i, j, 0, 0);
            for t in 0..plane {
                let g = grad_out.data()[xb + t];
                let xh = (x.data()[xb + t] - mean[j]) * inv_sigma;
                dx.data_mut()[xb + t] = scale * (g - mean_g - xh * mean_gx);
            }
        }
    }
    Ok((dx, dgamma, dbeta))
}

// ---------------------------------------------------------------------------
// Weight normalization
// ---------------------------------------------------------------------------

/// Weights plus channel affine for a weight-normalized layer.
#[derive(Clone, Debug)]
pub struct WeightNormParams<E: Element> {
    pub w: Tensor<E>,
    pub gamma: Tensor<E>,
    pub beta: Tensor<E>,
    pub eps: E,
}

impl<E: Element> WeightNormParams<E> {
    /// Wraps weights with an identity affine. The leading weight axis is
    /// the output-channel axis.
    pub fn new(w: Tensor<E>) -> Self {
        let c_out = w.shape().m;
        WeightNormParams {
            w,
            gamma: Tensor::filled(Shape::new(1, c_out, 1, 1), E::one()),
            beta: Tensor::zeros(Shape::new(1, c_out, 1, 1)),
            eps: E::from_f64(WN_EPS),
        }
    }

    pub fn with_eps(mut self, eps: E) -> Self {
        self.eps = eps;
        self
    }
}

/// Divides each output-channel row of `w` by its Frobenius norm plus
/// `eps`. A zero row is only an error when `eps` is zero too.
pub fn weight_normalize<E: Element>(w: &Tensor<E>, eps: E) -> Result<Tensor<E>> {
    let s = w.shape();
    let row = s.per_sample();
    let mut out = w.clone();
    for j in 0..s.m {
        let seg = &mut out.data_mut()[j * row..(j + 1) * row];
        let norm = seg.iter().map(|&v| v * v).sum::<E>().sqrt();
        if norm == E::zero() && eps == E::zero() {
            return Err(Error::invalid(format!(
                "weight row {j} is zero and eps is zero"
            )));
        }
        let inv = (norm + eps).recip();
        for v in seg.iter_mut() {
            *v *= inv;
        }
    }
    Ok(out)
}

/// Backward pass of [`weight_normalize`]: per row,
/// `dW = g/s - (<g, W> / (n * s^2)) * W` with `n` the row norm and
/// `s = n + eps`; at `n = 0` the map is locally `W/eps`, so `dW = g/eps`.
pub fn weight_normalize_backward<E: Element>(
    w: &Tensor<E>,
    eps: E,
    grad_out: &Tensor<E>,
) -> Result<Tensor<E>> {
    let s = w.shape();
    if grad_out.shape() != s {
        return Err(Error::shape("weight-norm gradient shape mismatch"));
    }
    let row = s.per_sample();
    let mut dw = Tensor::zeros(s);
    for j in 0..s.m {
        let wseg = &w.data()[j * row..(j + 1) * row];
        let gseg = &grad_out.data()[j * row..(j + 1) * row];
        let dseg = &mut dw.data_mut()[j * row..(j + 1) * row];
        let norm = wseg.iter().map(|&v| v * v).sum::<E>().sqrt();
        if norm == E::zero() {
            if eps == E::zero() {
                return Err(Error::invalid(format!(
                    "weight row {j} is zero and eps is zero"
                )));
            }
            let inv = eps.recip();
            for (d, &g) in dseg.iter_mut().zip(gseg) {
                *d = g * inv;
            }
            continue;
        }
        let scale = norm + eps;
        let dot = wseg.iter().zip(gseg).map(|(&a, &b)| a * b).sum::<E>();
        let coeff = dot / (norm * scale * scale);
        let inv_s = scale.recip();
        for ((d, &g), &wv) in dseg.iter_mut().zip(gseg).zip(wseg) {
            *d = g * inv_s - coeff * wv;
        }
    }
    Ok(dw)
}

/// Weight-normalized linear layer with channel affine:
/// `o = gamma * (What . x) + beta`.
pub fn wn_layer_forward<E: Element>(
    x: &Tensor<E>,
    params: &WeightNormParams<E>,
    kind: &LinearKind,
) -> Result<Tensor<E>> {
    let w_hat = weight_normalize(&params.w, params.eps)?;
    let u = kind.apply(x, &w_hat)?;
    channel_affine(&u, params.gamma.data(), params.beta.data())
}

// ---------------------------------------------------------------------------
// Normalization propagation
// ---------------------------------------------------------------------------

/// Closed-form unit-Gaussian rectification constants.
///
/// For `z ~ N(0,1)`: `E[relu(z)] = 1/sqrt(2*pi)` and
/// `Var[relu(z)] = 1/2 - 1/(2*pi)`. The layer divides by the standard
/// deviation, so `c_var = 1/sqrt(1/2 - 1/(2*pi))`.
#[derive(Clone, Copy, Debug)]
pub struct NpConstants {
    pub c_mean: f64,
    pub c_var: f64,
}

impl NpConstants {
    pub fn new() -> Self {
        let c_mean = (2.0 * std::f64::consts::PI).sqrt().recip();
        let rectified_var = 0.5 - (2.0 * std::f64::consts::PI).recip();
        NpConstants {
            c_mean,
            c_var: rectified_var.sqrt().recip(),
        }
    }
}

impl Default for NpConstants {
    fn default() -> Self {
        NpConstants::new()
    }
}

/// Normalization-propagation layer:
/// `o = c_var * (relu(gamma * (What . x) + beta) - c_mean)`.
pub fn np_layer_forward<E: Element>(
    x: &Tensor<E>,
    params: &WeightNormParams<E>,
    constants: &NpConstants,
    kind: &LinearKind,
) -> Result<Tensor<E>> {
    let pre = wn_layer_forward(x, params, kind)?;
    let rect = relu(&pre);
    let c_var = E::from_f64(constants.c_var);
    let shift = E::from_f64(-constants.c_var * constants.c_mean);
    Ok(affine_const(&rect, c_var, shift))
}

// ---------------------------------------------------------------------------
// Thresholded-rectifier weight normalization
// ---------------------------------------------------------------------------

/// Weights and per-channel thresholds for the trelu variant; the only
/// channel affine in such a network sits before the classifier head.
#[derive(Clone, Debug)]
pub struct TreluWnParams<E: Element> {
    pub w: Tensor<E>,
    pub alpha: Tensor<E>,
    pub eps: E,
}

impl<E: Element> TreluWnParams<E> {
    /// Zero thresholds, so the layer starts out as plain rectified
    /// weight normalization.
    pub fn new(w: Tensor<E>) -> Self {
        let c_out = w.shape().m;
        TreluWnParams {
            w,
            alpha: Tensor::zeros(Shape::new(1, c_out, 1, 1)),
            eps: E::from_f64(WN_EPS),
        }
    }

    pub fn with_eps(mut self, eps: E) -> Self {
        self.eps = eps;
        self
    }
}

/// `o = trelu(What . x, alpha)`: the normalized response clamped below at
/// each channel's learned threshold.
pub fn trelu_wn_layer_forward<E: Element>(
    x: &Tensor<E>,
    params: &TreluWnParams<E>,
    kind: &LinearKind,
) -> Result<Tensor<E>> {
    let w_hat = weight_normalize(&params.w, params.eps)?;
    let u = kind.apply(x, &w_hat)?;
    trelu(&u, params.alpha.data())
}

/// Channel affine placed before the classifier head.
pub fn last_layer_affine<E: Element>(x: &Tensor<E>, gamma: &[E], beta: &[E]) -> Result<Tensor<E>> {
    channel_affine(x, gamma, beta)
}

// ---------------------------------------------------------------------------
// Dropout
// ---------------------------------------------------------------------------

/// Seeded keep/drop decisions for inverted dropout.
pub fn dropout_mask(len: usize, rate: f64, seed: u64) -> Result<Vec<bool>> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::invalid(format!(
            "dropout rate must lie in [0, 1), got {rate}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..len).map(|_| rng.gen::<f64>() >= rate).collect())
}

/// Inverted dropout: in train mode zeroes each element with probability
/// `rate` and scales survivors by `1/(1-rate)`; in infer mode it is the
/// identity, so expectations match between modes.
pub fn dropout<E: Element>(
    x: &Tensor<E>,
    rate: f64,
    mode: NormMode,
    seed: u64,
) -> Result<Tensor<E>> {
    match mode {
        NormMode::Infer => {
            if !(0.0..1.0).contains(&rate) {
                return Err(Error::invalid(format!(
                    "dropout rate must lie in [0, 1), got {rate}"
                )));
            }
            Ok(x.clone())
        }
        NormMode::Train => {
            let mask = dropout_mask(x.len(), rate, seed)?;
            let keep = E::from_f64(1.0 / (1.0 - rate));
            Ok(Tensor::from_fn(x.shape(), |i| {
                if mask[i] {
                    x.data()[i] * keep
                } else {
                    E::zero()
                }
            }))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::gaussian_init;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn bn_normalizes_a_known_channel() {
        let x = Tensor::from_vec(Shape::new(3, 1, 1, 1), vec![1.0, 2.0, 3.0]).unwrap();
        let mut p = BatchNormParams::new(1).with_eps(1e-15);
        let fwd = batch_norm_forward(&x, &mut p, NormMode::Train).unwrap();
        assert!(close(fwd.mean[0], 2.0, 1e-15));
        assert!(close(fwd.var[0], 2.0 / 3.0, 1e-15));
        let r = (1.5f64).sqrt();
        for (got, want) in fwd.out.data().iter().zip([-r, 0.0, r]) {
            assert!(close(*got, want, 1e-7));
        }
    }

    #[test]
    fn bn_affine_rescales_output() {
        let x = Tensor::from_vec(Shape::new(3, 1, 1, 1), vec![1.0, 2.0, 3.0]).unwrap();
        let mut p = BatchNormParams::new(1).with_eps(1e-15);
        p.gamma = Tensor::filled(Shape::new(1, 1, 1, 1), 2.0);
        p.beta = Tensor::filled(Shape::new(1, 1, 1, 1), 1.0);
        let fwd = batch_norm_forward(&x, &mut p, NormMode::Train).unwrap();
        let r = (1.5f64).sqrt();
        for (got, want) in fwd.out.data().iter().zip([1.0 - 2.0 * r, 1.0, 1.0 + 2.0 * r]) {
            assert!(close(*got, want, 1e-7));
        }
    }

    #[test]
    fn bn_statistics_cover_all_spatial_positions() {
        // Two samples, one channel, 2x2 planes: stats pool over 8 values.
        let x = Tensor::from_fn(Shape::new(2, 1, 2, 2), |i| i as f64);
        let (mean, var) = bn_batch_stats(&x).unwrap();
        assert!(close(mean[0], 3.5, 1e-15));
        assert!(close(var[0], 5.25, 1e-15));
    }

    #[test]
    fn bn_rejects_single_position_batches() {
        let x = Tensor::<f64>::zeros(Shape::new(1, 3, 1, 1));
        let mut p = BatchNormParams::new(3);
        assert!(batch_norm_forward(&x, &mut p, NormMode::Train).is_err());
        // A single sample with spatial extent still has enough positions.
        let x = Tensor::<f64>::from_fn(Shape::new(1, 3, 2, 2), |i| i as f64);
        assert!(batch_norm_forward(&x, &mut p, NormMode::Train).is_ok());
    }

    #[test]
    fn bn_running_stats_track_batches() {
        let x = Tensor::from_vec(Shape::new(2, 1, 1, 1), vec![1.0, 3.0]).unwrap();
        let mut p = BatchNormParams::new(1);
        batch_norm_forward(&x, &mut p, NormMode::Train).unwrap();
        // mean_B = 2, var_B = 1: running = 0.99 * prior + 0.01 * batch.
        assert!(close(p.running_mean[0], 0.02, 1e-12));
        assert!(close(p.running_var[0], 0.99 + 0.01, 1e-12));
    }

    #[test]
    fn bn_infer_uses_running_statistics() {
        let mut p = BatchNormParams::new(1).with_eps(0.0);
        p.running_mean = vec![1.0];
        p.running_var = vec![4.0];
        let x = Tensor::from_vec(Shape::new(2, 1, 1, 1), vec![3.0, -1.0]).unwrap();
        let fwd = batch_norm_forward(&x, &mut p, NormMode::Infer).unwrap();
        assert_eq!(fwd.out.data(), &[1.0, -1.0]);
        // Infer mode must not move the running statistics.
        assert_eq!(p.running_mean[0], 1.0);
        assert_eq!(p.running_var[0], 4.0);
    }

    #[test]
    fn bn_train_and_infer_agree_when_running_equals_batch() {
        let x = gaussian_init::<f64>(Shape::new(4, 2, 3, 3), 17);
        let (mean, var) = bn_batch_stats(&x).unwrap();
        let mut p = BatchNormParams::new(2);
        p.running_mean = mean;
        p.running_var = var;
        let infer = batch_norm_forward(&x, &mut p.clone(), NormMode::Infer).unwrap();
        let train = batch_norm_forward(&x, &mut p, NormMode::Train).unwrap();
        for i in 0..infer.out.len() {
            assert!(close(infer.out.data()[i], train.out.data()[i], 1e-12));
        }
    }

    #[test]
    fn bn_backward_gradients_sum_to_zero_per_channel() {
        // The normalized output is mean-free, so dx must be too.
        let x = gaussian_init::<f64>(Shape::new(3, 2, 2, 2), 5);
        let g = gaussian_init::<f64>(x.shape(), 6);
        let (mean, var) = bn_batch_stats(&x).unwrap();
        let (dx, _, dbeta) = bn_backward(&x, &mean, &var, &[1.0, 1.0], 1e-12, &g).unwrap();
        for j in 0..2 {
            let mut sum = 0.0;
            for i in 0..3 {
                sum += dx.plane(i, j).iter().sum::<f64>();
            }
            assert!(close(sum, 0.0, 1e-10));
        }
        // dbeta is the plain gradient sum.
        for j in 0..2 {
            let mut want = 0.0;
            for i in 0..3 {
                want += g.plane(i, j).iter().sum::<f64>();
            }
            assert!(close(dbeta[j], want, 1e-12));
        }
    }

    #[test]
    fn weight_normalize_unit_rows() {
        let w = Tensor::from_vec(Shape::new(1, 2, 1, 1), vec![3.0, 4.0]).unwrap();
        let what = weight_normalize(&w, 0.0).unwrap();
        assert!(close(what.data()[0], 0.6, 1e-15));
        assert!(close(what.data()[1], 0.8, 1e-15));

        let what = weight_normalize(&w, 1.0).unwrap();
        assert!(close(what.data()[0], 0.5, 1e-15));
        assert!(close(what.data()[1], 4.0 / 6.0, 1e-15));
    }

    #[test]
    fn weight_normalize_zero_row_policy() {
        let w = Tensor::from_vec(Shape::new(2, 2, 1, 1), vec![0.0, 0.0, 3.0, 4.0]).unwrap();
        assert!(weight_normalize(&w, 0.0).is_err());
        let what = weight_normalize(&w, 1e-5).unwrap();
        assert_eq!(&what.data()[..2], &[0.0, 0.0]);
    }

    #[test]
    fn weight_normalize_backward_is_tangent_to_rows_at_zero_eps() {
        let w = gaussian_init::<f64>(Shape::new(3, 4, 2, 2), 13);
        let g = gaussian_init::<f64>(w.shape(), 14);
        let dw = weight_normalize_backward(&w, 0.0, &g).unwrap();
        let row = w.shape().per_sample();
        for j in 0..3 {
            let dot: f64 = (0..row)
                .map(|t| dw.data()[j * row + t] * w.data()[j * row + t])
                .sum();
            assert!(close(dot, 0.0, 1e-12), "row {j} dot {dot}");
        }
    }

    #[test]
    fn wn_layer_applies_affine_after_normalized_product() {
        let w = Tensor::from_vec(Shape::new(1, 2, 1, 1), vec![3.0, 4.0]).unwrap();
        let mut p = WeightNormParams::new(w).with_eps(0.0);
        p.gamma = Tensor::filled(Shape::new(1, 1, 1, 1), 2.0);
        p.beta = Tensor::filled(Shape::new(1, 1, 1, 1), -1.0);
        let x = Tensor::from_vec(Shape::new(1, 2, 1, 1), vec![1.0, 1.0]).unwrap();
        let out = wn_layer_forward(&x, &p, &LinearKind::Fc).unwrap();
        // (0.6 + 0.8) * 2 - 1
        assert!(close(out.data()[0], 1.8, 1e-15));
    }

    #[test]
    fn np_constants_match_closed_forms() {
        let k = NpConstants::new();
        assert!(close(k.c_mean * k.c_mean, (2.0 * std::f64::consts::PI).recip(), 1e-15));
        let var = 0.5 - (2.0 * std::f64::consts::PI).recip();
        assert!(close(k.c_var * var.sqrt(), 1.0, 1e-15));
        assert!(close(k.c_mean, 0.3989422804014327, 1e-12));
        assert!(close(k.c_var, 1.712858550449663, 1e-12));
    }

    #[test]
    fn np_layer_value_at_zero_preactivation() {
        // Zero input makes the rectified response zero, leaving the
        // centering shift -c_var * c_mean.
        let w = Tensor::from_vec(Shape::new(1, 2, 1, 1), vec![1.0, 1.0]).unwrap();
        let p = WeightNormParams::new(w).with_eps(0.0);
        let x = Tensor::zeros(Shape::new(1, 2, 1, 1));
        let k = NpConstants::new();
        let out = np_layer_forward(&x, &p, &k, &LinearKind::Fc).unwrap();
        assert!(close(out.data()[0], -0.683332, 1e-5));
    }

    #[test]
    fn np_output_on_unit_gaussian_is_standardized() {
        // One feature channel fed with unit-Gaussian draws through an
        // identity-ish weight: output should be near zero mean, unit var.
        let n = 100_000;
        let w = Tensor::from_vec(Shape::new(1, 1, 1, 1), vec![1.0]).unwrap();
        let p = WeightNormParams::new(w).with_eps(0.0);
        let k = NpConstants::new();
        let x = gaussian_init::<f64>(Shape::new(n, 1, 1, 1), 99);
        let out = np_layer_forward(&x, &p, &k, &LinearKind::Fc).unwrap();
        let mean: f64 = out.data().iter().sum::<f64>() / n as f64;
        let var: f64 = out.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        assert!(close(mean, 0.0, 0.02), "mean {mean}");
        assert!(close(var, 1.0, 0.03), "var {var}");
    }

    #[test]
    fn trelu_wn_layer_clamps_normalized_response() {
        let w = Tensor::from_vec(Shape::new(1, 2, 1, 1), vec![3.0, 4.0]).unwrap();
        let mut p = TreluWnParams::new(w).with_eps(0.0);
        *p.alpha.at_mut(0, 0, 0, 0) = -0.5;
        let x = Tensor::from_vec(Shape::new(2, 2, 1, 1), vec![1.0, 1.0, -1.0, -1.0]).unwrap();
        let out = trelu_wn_layer_forward(&x, &p, &LinearKind::Fc).unwrap();
        assert!(close(out.data()[0], 1.4, 1e-15));
        assert!(close(out.data()[1], -0.5, 1e-15));
    }

    #[test]
    fn last_layer_affine_is_a_channel_affine() {
        let x = Tensor::from_vec(Shape::new(1, 2, 1, 1), vec![2.0, 3.0]).unwrap();
        let out = last_layer_affine(&x, &[2.0, 0.5], &[1.0, 0.0]).unwrap();
        assert_eq!(out.data(), &[5.0, 1.5]);
    }

    #[test]
    fn dropout_infer_is_identity_and_rates_are_validated() {
        let x = gaussian_init::<f64>(Shape::new(2, 3, 2, 2), 7);
        let out = dropout(&x, 0.5, NormMode::Infer, 1).unwrap();
        assert_eq!(out.data(), x.data());
        assert!(dropout(&x, 1.0, NormMode::Train, 1).is_err());
        assert!(dropout(&x, -0.1, NormMode::Train, 1).is_err());
        assert!(dropout(&x, 1.0, NormMode::Infer, 1).is_err());
    }

    #[test]
    fn dropout_train_preserves_expectation() {
        let x = Tensor::filled(Shape::new(1, 1, 1, 2000), 1.0);
        let rate = 0.3;
        let out = dropout(&x, rate, NormMode::Train, 42).unwrap();
        let kept = out.data().iter().filter(|&&v| v != 0.0).count();
        let mean: f64 = out.data().iter().sum::<f64>() / 2000.0;
        // Survivors are scaled by 1/(1-rate), so the mean stays near one.
        assert!(close(mean, 1.0, 0.05), "mean {mean}");
        for &v in out.data() {
            assert!(v == 0.0 || close(v, 1.0 / 0.7, 1e-12));
        }
        assert!((kept as f64 / 2000.0 - 0.7).abs() < 0.05);
    }

    #[test]
    fn dropout_is_deterministic_per_seed() {
        let x = gaussian_init::<f64>(Shape::new(1, 1, 4, 4), 3);
        let a = dropout(&x, 0.4, NormMode::Train, 9).unwrap();
        let b = dropout(&x, 0.4, NormMode::Train, 9).unwrap();
        let c = dropout(&x, 0.4, NormMode::Train, 10).unwrap();
        assert_eq!(a.data(), b.data());
        assert_ne!(a.data(), c.data());
    }
}
