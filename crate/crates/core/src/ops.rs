//! Stateless tensor operations: fully-connected products, activations,
//! pooling, the softmax cross-entropy head, and weight initializers.
//!
//! Each forward op keeps its backward companion next to it so the gradient
//! math lives beside the definition it differentiates.

use crate::error::{Error, Result};
use crate::tensor::{Element, Shape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

// ---------------------------------------------------------------------------
// Fully-connected
// ---------------------------------------------------------------------------

/// `out = x . W^T` treating each sample as a flat `d_in` vector.
///
/// `w` has shape `(d_out, d_in, 1, 1)`; the result is `(m, d_out, 1, 1)`.
pub fn fully_connected<E: Element>(x: &Tensor<E>, w: &Tensor<E>) -> Result<Tensor<E>> {
    let (d_out, d_in) = check_fc(x, w)?;
    let m = x.shape().m;
    let mut out = Tensor::zeros(Shape::new(m, d_out, 1, 1));
    E::gemm(
        m, d_in, d_out,
        E::one(), x.data(), d_in as isize, 1,
        w.data(), 1, d_in as isize,
        E::zero(), out.data_mut(), d_out as isize, 1,
    );
    Ok(out)
}

/// Gradients of [`fully_connected`].
pub struct FcGrads<E: Element> {
    pub dx: Option<Tensor<E>>,
    pub dw: Tensor<E>,
}

pub fn fully_connected_backward<E: Element>(
    x: &Tensor<E>,
    w: &Tensor<E>,
    grad_out: &Tensor<E>,
    need_dx: bool,
) -> Result<FcGrads<E>> {
    let (d_out, d_in) = check_fc(x, w)?;
    let m = x.shape().m;
    if grad_out.shape() != Shape::new(m, d_out, 1, 1) {
        return Err(Error::shape(format!(
            "fc output gradient must be ({m}, {d_out}, 1, 1), got {}",
            grad_out.shape()
        )));
    }
    let mut dw = Tensor::zeros(w.shape());
    // dW = g^T . x
    E::gemm(
        d_out, m, d_in,
        E::one(), grad_out.data(), 1, d_out as isize,
        x.data(), d_in as isize, 1,
        E::zero(), dw.data_mut(), d_in as isize, 1,
    );
    let dx = if need_dx {
        let mut dx = Tensor::zeros(x.shape());
        // dX = g . W
        E::gemm(
            m, d_out, d_in,
            E::one(), grad_out.data(), d_out as isize, 1,
            w.data(), d_in as isize, 1,
            E::zero(), dx.data_mut(), d_in as isize, 1,
        );
        Some(dx)
    } else {
        None
    };
    Ok(FcGrads { dx, dw })
}

fn check_fc<E: Element>(x: &Tensor<E>, w: &Tensor<E>) -> Result<(usize, usize)> {
    let ws = w.shape();
    if ws.h != 1 || ws.w != 1 {
        return Err(Error::shape(format!(
            "fc weights must be (d_out, d_in, 1, 1), got {ws}"
        )));
    }
    let d_in = x.shape().per_sample();
    if d_in != ws.c {
        return Err(Error::shape(format!(
            "fc expects {} features per sample, tensor {} has {}",
            ws.c,
            x.shape(),
            d_in
        )));
    }
    Ok((ws.m, d_in))
}

// ---------------------------------------------------------------------------
// Activations
// ---------------------------------------------------------------------------

/// Elementwise `max(0, x)`.
pub fn relu<E: Element>(x: &Tensor<E>) -> Tensor<E> {
    let mut out = Tensor::zeros(x.shape());
    for (o, &v) in out.data_mut().iter_mut().zip(x.data()) {
        *o = v.max(E::zero());
    }
    out
}

/// `dx = g` where the input was strictly positive, else zero.
pub fn relu_backward<E: Element>(x: &Tensor<E>, grad_out: &Tensor<E>) -> Tensor<E> {
    let mut dx = Tensor::zeros(x.shape());
    for ((o, &v), &g) in dx.data_mut().iter_mut().zip(x.data()).zip(grad_out.data()) {
        if v > E::zero() {
            *o = g;
        }
    }
    dx
}

/// Runs `f` once per channel plane with that channel's index, handing it
/// the matching slices of each buffer.
fn for_each_plane<E: Element>(
    shape: crate::tensor::Shape,
    mut out: Tensor<E>,
    x: &Tensor<E>,
    mut f: impl FnMut(usize, &mut [E], &[E]),
) -> Tensor<E> {
    let plane = shape.plane();
    let per = shape.per_sample();
    for i in 0..shape.m {
        for j in 0..shape.c {
            let at = i * per + j * plane;
            f(j, &mut out.data_mut()[at..at + plane], &x.data()[at..at + plane]);
        }
    }
    out
}

/// Thresholded rectifier: clamps each channel below at its own learned
/// threshold, `max(x, alpha_j)`.
pub fn trelu<E: Element>(x: &Tensor<E>, alpha: &[E]) -> Result<Tensor<E>> {
    check_channel_vec(x, alpha.len(), "trelu threshold")?;
    Ok(for_each_plane(
        x.shape(),
        Tensor::zeros(x.shape()),
        x,
        |j, out, xs| {
            let a = alpha[j];
            for (o, &v) in out.iter_mut().zip(xs) {
                *o = v.max(a);
            }
        },
    ))
}

/// Gradients of [`trelu`]: the input passes gradient where it sits above
/// the threshold; the threshold collects it everywhere else.
pub fn trelu_backward<E: Element>(
    x: &Tensor<E>,
    alpha: &[E],
    grad_out: &Tensor<E>,
) -> Result<(Tensor<E>, Vec<E>)> {
    check_channel_vec(x, alpha.len(), "trelu threshold")?;
    let s = x.shape();
    let (plane, per) = (s.plane(), s.per_sample());
    let mut dalpha = vec![E::zero(); s.c];
    let mut dx = Tensor::zeros(s);
    for i in 0..s.m {
        for j in 0..s.c {
            let at = i * per + j * plane;
            let a = alpha[j];
            let mut acc = E::zero();
            let xs = &x.data()[at..at + plane];
            let gs = &grad_out.data()[at..at + plane];
            let ds = &mut dx.data_mut()[at..at + plane];
            for k in 0..plane {
                if xs[k] > a {
                    ds[k] = gs[k];
                } else {
                    acc = acc + gs[k];
                }
            }
            dalpha[j] = dalpha[j] + acc;
        }
    }
    Ok((dx, dalpha))
}

fn check_channel_vec<E: Element>(x: &Tensor<E>, len: usize, what: &str) -> Result<()> {
    if len != x.shape().c {
        return Err(Error::shape(format!(
            "{what} has {len} entries but the tensor has {} channels",
            x.shape().c
        )));
    }
    Ok(())
}

/// Elementwise `scale * x + shift` with fixed scalars.
pub fn affine_const<E: Element>(x: &Tensor<E>, scale: E, shift: E) -> Tensor<E> {
    let mut out = Tensor::zeros(x.shape());
    for (o, &v) in out.data_mut().iter_mut().zip(x.data()) {
        *o = scale * v + shift;
    }
    out
}

// ---------------------------------------------------------------------------
// Per-channel affine
// ---------------------------------------------------------------------------

/// `out[i,j,y,x] = gamma[j] * x[i,j,y,x] + beta[j]`.
pub fn channel_affine<E: Element>(x: &Tensor<E>, gamma: &[E], beta: &[E]) -> Result<Tensor<E>> {
    check_channel_vec(x, gamma.len(), "gamma")?;
    check_channel_vec(x, beta.len(), "beta")?;
    Ok(for_each_plane(
        x.shape(),
        Tensor::zeros(x.shape()),
        x,
        |j, out, xs| {
            let (g, b) = (gamma[j], beta[j]);
            for (o, &v) in out.iter_mut().zip(xs) {
                *o = g * v + b;
            }
        },
    ))
}

/// Gradients of [`channel_affine`] with respect to input, gain, and shift.
pub fn channel_affine_backward<E: Element>(
    x: &Tensor<E>,
    gamma: &[E],
    grad_out: &Tensor<E>,
) -> Result<(Tensor<E>, Vec<E>, Vec<E>)> {
    check_channel_vec(x, gamma.len(), "gamma")?;
    let s = x.shape();
    let (plane, per) = (s.plane(), s.per_sample());
    let mut dgamma = vec![E::zero(); s.c];
    let mut dbeta = vec![E::zero(); s.c];
    let mut dx = Tensor::zeros(s);
    for i in 0..s.m {
        for j in 0..s.c {
            let at = i * per + j * plane;
            let gam = gamma[j];
            let mut acc_g = E::zero();
            let mut acc_b = E::zero();
            let xs = &x.data()[at..at + plane];
            let gs = &grad_out.data()[at..at + plane];
            let ds = &mut dx.data_mut()[at..at + plane];
            for k in 0..plane {
                let g = gs[k];
                ds[k] = g * gam;
                acc_g = acc_g + g * xs[k];
                acc_b = acc_b + g;
            }
            dgamma[j] = dgamma[j] + acc_g;
            dbeta[j] = dbeta[j] + acc_b;
        }
    }
    Ok((dx, dgamma, dbeta))
}

// ---------------------------------------------------------------------------
// Pooling
// ---------------------------------------------------------------------------

/// Pooling flavor: maximum over the window, or average with the full
/// window area as divisor (implicit zeros at padded positions).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolKind {
    Max,
    Avg,
}

/// Window geometry for pooling; output sizing matches convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PoolSpec {
    pub kind: PoolKind,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

impl PoolSpec {
    pub fn new(kind: PoolKind, kh: usize, kw: usize, stride: usize, pad: usize) -> Result<Self> {
        if kh == 0 || kw == 0 {
            return Err(Error::invalid("pool window must be non-empty"));
        }
        if stride == 0 {
            return Err(Error::invalid("pool stride must be positive"));
        }
        if pad >= kh || pad >= kw {
            return Err(Error::invalid(format!(
                "pool padding {pad} must be smaller than the window {kh}x{kw}"
            )));
        }
        Ok(PoolSpec { kind, kh, kw, stride, pad })
    }

    pub fn square(kind: PoolKind, k: usize, stride: usize, pad: usize) -> Result<Self> {
        PoolSpec::new(kind, k, k, stride, pad)
    }

    pub fn out_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        if h + 2 * self.pad < self.kh || w + 2 * self.pad < self.kw {
            return Err(Error::shape(format!(
                "input {h}x{w} with padding {} is smaller than the {}x{} pool window",
                self.pad, self.kh, self.kw
            )));
        }
        Ok((
            (h + 2 * self.pad - self.kh) / self.stride + 1,
            (w + 2 * self.pad - self.kw) / self.stride + 1,
        ))
    }
}

/// Pools `x`; for max pooling also returns the flat input index of each
/// selected element so the backward pass can scatter exactly.
pub fn pool_with_argmax<E: Element>(
    x: &Tensor<E>,
    spec: &PoolSpec,
) -> Result<(Tensor<E>, Option<Vec<usize>>)> {
    let xs = x.shape();
    let (oh, ow) = spec.out_hw(xs.h, xs.w)?;
    let mut out = Tensor::zeros(Shape::new(xs.m, xs.c, oh, ow));
    let mut argmax = match spec.kind {
        PoolKind::Max => Some(vec![0usize; out.len()]),
        PoolKind::Avg => None,
    };
    let area = E::from_f64((spec.kh * spec.kw) as f64);
    let mut t = 0;
    for i in 0..xs.m {
        for j in 0..xs.c {
            let plane_base = xs.offset(i, j, 0, 0);
            let plane = x.plane(i, j);
            for oy in 0..oh {
                for ox in 0..ow {
                    let y0 = (oy * spec.stride) as isize - spec.pad as isize;
                    let x0 = (ox * spec.stride) as isize - spec.pad as isize;
                    match (&mut argmax, spec.kind) {
                        (Some(am), PoolKind::Max) => {
                            let mut best = E::neg_infinity();
                            let mut best_idx = 0;
                            for ky in 0..spec.kh {
                                let iy = y0 + ky as isize;
                                if iy < 0 || iy >= xs.h as isize {
                                    continue;
                                }
                                for kx in 0..spec.kw {
                                    let ix = x0 + kx as isize;
                                    if ix < 0 || ix >= xs.w as isize {
                                        continue;
                                    }
                                    let idx = iy as usize * xs.w + ix as usize;
                                    if plane[idx] > best {
                                        best = plane[idx];
                                        best_idx = plane_base + idx;
                                    }
                                }
                            }
                            out.data_mut()[t] = best;
                            am[t] = best_idx;
                        }
                        (_, PoolKind::Avg) => {
                            let mut sum = E::zero();
                            for ky in 0..spec.kh {
                                let iy = y0 + ky as isize;
                                if iy < 0 || iy >= xs.h as isize {
                                    continue;
                                }
                                for kx in 0..spec.kw {
                                    let ix = x0 + kx as isize;
                                    if ix < 0 || ix >= xs.w as isize {
                                        continue;
                                    }
                                    sum += plane[iy as usize * xs.w + ix as usize];
                                }
                            }
                            out.data_mut()[t] = sum / area;
                        }
                        _ => unreachable!(),
                    }
                    t += 1;
                }
            }
        }
    }
    Ok((out, argmax))
}

/// Pools `x` without retaining backward bookkeeping.
pub fn pool<E: Element>(x: &Tensor<E>, spec: &PoolSpec) -> Result<Tensor<E>> {
    pool_with_argmax(x, spec).map(|(out, _)| out)
}

/// Scatter of the output gradient to max-pool winners.
pub fn max_pool_backward<E: Element>(
    input_shape: Shape,
    argmax: &[usize],
    grad_out: &Tensor<E>,
) -> Result<Tensor<E>> {
    if argmax.len() != grad_out.len() {
        return Err(Error::shape(format!(
            "argmax has {} entries for {} output gradients",
            argmax.len(),
            grad_out.len()
        )));
    }
    let mut dx = Tensor::zeros(input_shape);
    for (t, &idx) in argmax.iter().enumerate() {
        dx.data_mut()[idx] += grad_out.data()[t];
    }
    Ok(dx)
}

/// Spreads each output gradient uniformly over its window's in-bounds
/// cells, divided by the full window area to mirror the forward divisor.
pub fn avg_pool_backward<E: Element>(
    input_shape: Shape,
    spec: &PoolSpec,
    grad_out: &Tensor<E>,
) -> Result<Tensor<E>> {
    let (oh, ow) = spec.out_hw(input_shape.h, input_shape.w)?;
    if grad_out.shape() != Shape::new(input_shape.m, input_shape.c, oh, ow) {
        return Err(Error::shape(format!(
            "avg-pool gradient shape {} does not match input {}",
            grad_out.shape(),
            input_shape
        )));
    }
    let area = E::from_f64((spec.kh * spec.kw) as f64);
    let mut dx = Tensor::zeros(input_shape);
    let mut t = 0;
    for i in 0..input_shape.m {
        for j in 0..input_shape.c {
            let plane_base = input_shape.offset(i, j, 0, 0);
            for oy in 0..oh {
                for ox in 0..ow {
                    let share = grad_out.data()[t] / area;
                    t += 1;
                    let y0 = (oy * spec.stride) as isize - spec.pad as isize;
                    let x0 = (ox * spec.stride) as isize - spec.pad as isize;
                    for ky in 0..spec.kh {
                        let iy = y0 + ky as isize;
                        if iy < 0 || iy >= input_shape.h as isize {
                            continue;
                        }
                        for kx in 0..spec.kw {
                            let ix = x0 + kx as isize;
                            if ix < 0 || ix >= input_shape.w as isize {
                                continue;
                            }
                            dx.data_mut()[plane_base + iy as usize * input_shape.w + ix as usize] += share;
                        }
                    }
                }
            }
        }
    }
    Ok(dx)
}

// ---------------------------------------------------------------------------
// Softmax cross-entropy
// ---------------------------------------------------------------------------

/// Mean cross-entropy over the batch with a fused, max-stabilized softmax.
/// Returns the scalar loss and the probability rows for the backward pass.
pub fn softmax_cross_entropy<E: Element>(
    logits: &Tensor<E>,
    labels: &[usize],
) -> Result<(E, Tensor<E>)> {
    let s = logits.shape();
    if s.h != 1 || s.w != 1 {
        return Err(Error::shape(format!(
            "logits must be (m, classes, 1, 1), got {s}"
        )));
    }
    if s.m == 0 {
        return Err(Error::invalid("softmax cross-entropy needs at least one sample"));
    }
    if labels.len() != s.m {
        return Err(Error::invalid(format!(
            "{} labels for {} samples",
            labels.len(),
            s.m
        )));
    }
    let classes = s.c;
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::invalid(format!(
            "label {bad} out of range for {classes} classes"
        )));
    }
    let mut probs = Tensor::zeros(s);
    let mut loss_sum = E::zero();
    for i in 0..s.m {
        let row = &logits.data()[i * classes..(i + 1) * classes];
        let max = row.iter().copied().fold(E::neg_infinity(), E::max);
        let mut denom = E::zero();
        let out = &mut probs.data_mut()[i * classes..(i + 1) * classes];
        for (o, &l) in out.iter_mut().zip(row) {
            *o = (l - max).exp();
            denom += *o;
        }
        for o in out.iter_mut() {
            *o = *o / denom;
        }
        loss_sum += denom.ln() - (row[labels[i]] - max);
    }
    Ok((loss_sum / E::from_f64(s.m as f64), probs))
}

/// `d logits = seed * (probs - onehot(labels)) / m`.
pub fn softmax_cross_entropy_backward<E: Element>(
    probs: &Tensor<E>,
    labels: &[usize],
    seed: E,
) -> Tensor<E> {
    let m = probs.shape().m;
    let classes = probs.shape().c;
    let scale = seed / E::from_f64(m as f64);
    let mut d = Tensor::from_fn(probs.shape(), |i| probs.data()[i] * scale);
    for (i, &label) in labels.iter().enumerate() {
        d.data_mut()[i * classes + label] -= scale;
    }
    d
}

// ---------------------------------------------------------------------------
// Initializers
// ---------------------------------------------------------------------------

/// Independent standard normal draws, seeded.
pub fn gaussian_init<E: Element>(shape: Shape, seed: u64) -> Tensor<E> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = StandardNormal;
    Tensor::from_fn(shape, |_| E::from_f64(normal.sample(&mut rng)))
}

/// Uniform fan-balanced initialization over `[-b, b)` with
/// `b = sqrt(6 / (fan_in + fan_out))`.
///
/// Fans follow the weight layout `(c_out, c_in, kh, kw)`: the receptive
/// field feeds `c_in*kh*kw` inputs and `c_out*kh*kw` outputs. For
/// fully-connected weights `(d_out, d_in, 1, 1)` this reduces to the plain
/// vector fans.
pub fn xavier_init<E: Element>(shape: Shape, seed: u64) -> Tensor<E> {
    let fan_in = (shape.c * shape.h * shape.w) as f64;
    let fan_out = (shape.m * shape.h * shape.w) as f64;
    let bound = (6.0 / (fan_in + fan_out)).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| {
        E::from_f64(bound * (2.0 * rng.gen::<f64>() - 1.0))
    })
}

/// Square matrix with orthonormal rows `(n, n, 1, 1)`, built by modified
/// Gram-Schmidt over Gaussian draws in 64-bit.
pub fn orthogonal_init<E: Element>(n: usize, seed: u64) -> Result<Tensor<E>> {
    if n == 0 {
        return Err(Error::invalid("orthogonal init needs a positive dimension"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = StandardNormal;
    let mut rows = vec![vec![0.0f64; n]; n];
    for r in 0..n {
        loop {
            for v in rows[r].iter_mut() {
                *v = normal.sample(&mut rng);
            }
            for prev in 0..r {
                let dot: f64 = rows[r].iter().zip(&rows[prev]).map(|(a, b)| a * b).sum();
                let (head, tail) = rows.split_at_mut(r);
                for (v, &p) in tail[0].iter_mut().zip(&head[prev]) {
                    *v -= dot * p;
                }
            }
            let norm: f64 = rows[r].iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 1e-8 {
                for v in rows[r].iter_mut() {
                    *v /= norm;
                }
                break;
            }
        }
    }
    let flat: Vec<E> = rows.into_iter().flatten().map(E::from_f64).collect();
    Tensor::from_vec(Shape::new(n, n, 1, 1), flat)
}

/// Gaussian rows rescaled to unit Frobenius norm, `(d_out, d_in, 1, 1)`.
pub fn unit_rows_init<E: Element>(d_out: usize, d_in: usize, seed: u64) -> Result<Tensor<E>> {
    if d_out == 0 || d_in == 0 {
        return Err(Error::invalid("unit-row init needs positive dimensions"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = StandardNormal;
    let mut data = vec![E::zero(); d_out * d_in];
    for r in 0..d_out {
        let row = &mut data[r * d_in..(r + 1) * d_in];
        loop {
            let mut sq = 0.0f64;
            for v in row.iter_mut() {
                let g: f64 = normal.sample(&mut rng);
                *v = E::from_f64(g);
                sq += g * g;
            }
            if sq > 1e-16 {
                let inv = E::from_f64(1.0 / sq.sqrt());
                for v in row.iter_mut() {
                    *v *= inv;
                }
                break;
            }
        }
    }
    Tensor::from_vec(Shape::new(d_out, d_in, 1, 1), data)
}
