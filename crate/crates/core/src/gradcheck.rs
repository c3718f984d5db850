//! Finite-difference certification of the recorded backward rules.
//!
//! Every analytic gradient is compared coordinate by coordinate against
//! a central difference of the rebuilt forward pass. Coordinates sitting
//! on a rectifier kink or a pooling tie have no well-defined two-sided
//! derivative, so mask builders mark them and the checker counts them as
//! skipped instead of failed.

use crate::autodiff::{Tape, ValueId};
use crate::error::{Error, Result};
use crate::conv::ConvSpec;
use crate::layers::NpConstants;
use crate::ops::{gaussian_init, xavier_init, PoolKind, PoolSpec};
use crate::tensor::Tensor;

/// Step size and acceptance threshold for a finite-difference run.
#[derive(Clone, Copy, Debug)]
pub struct GradCheckConfig {
    /// Central-difference step applied per coordinate.
    pub step: f64,
    /// Largest tolerated relative error.
    pub tolerance: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            step: 1e-5,
            tolerance: 1e-5,
        }
    }
}

impl GradCheckConfig {
    /// Width of the exclusion zone around kinks and ties.
    pub fn kink_band(&self) -> f64 {
        10.0 * self.step
    }
}

/// Outcome of checking one tensor's gradient.
#[derive(Clone, Debug)]
pub struct GradReport {
    /// Coordinates compared against the oracle.
    pub checked: usize,
    /// Coordinates excluded by the skip mask.
    pub skipped: usize,
    /// Largest relative error seen over the checked coordinates.
    pub max_rel_err: f64,
    /// Flat index where `max_rel_err` occurred.
    pub worst_index: usize,
    /// Whether `max_rel_err` stayed within tolerance.
    pub passed: bool,
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-8)
}

/// Compares `analytic` against central differences of `loss_at` around
/// `base`, coordinate by coordinate. `skip[i]` excludes coordinate `i`
/// from the comparison; skips are counted in the report.
pub fn central_diff_check<F>(
    base: &Tensor<f64>,
    skip: Option<&[bool]>,
    cfg: &GradCheckConfig,
    analytic: &Tensor<f64>,
    mut loss_at: F,
) -> Result<GradReport>
where
    F: FnMut(&Tensor<f64>) -> Result<f64>,
{
    if analytic.shape() != base.shape() {
        return Err(Error::shape(format!(
            "analytic gradient shape {} does not match value {}",
            analytic.shape(),
            base.shape()
        )));
    }
    if let Some(mask) = skip {
        if mask.len() != base.len() {
            return Err(Error::shape(format!(
                "skip mask has {} entries for {} coordinates",
                mask.len(),
                base.len()
            )));
        }
    }

    let h = cfg.step;
    let mut probe = base.clone();
    let mut report = GradReport {
        checked: 0,
        skipped: 0,
        max_rel_err: 0.0,
        worst_index: 0,
        passed: true,
    };

    for i in 0..base.len() {
        if skip.map_or(false, |mask| mask[i]) {
            report.skipped += 1;
            continue;
        }
        let original = base.data()[i];
        probe.data_mut()[i] = original + h;
        let f_plus = loss_at(&probe)?;
        probe.data_mut()[i] = original - h;
        let f_minus = loss_at(&probe)?;
        probe.data_mut()[i] = original;

        let numeric = (f_plus - f_minus) / (2.0 * h);
        let a = analytic.data()[i];
        if !a.is_finite() || !numeric.is_finite() {
            return Err(Error::NonFinite(format!(
                "gradient check at coordinate {i}: analytic {a}, numeric {numeric}"
            )));
        }
        let err = rel_err(a, numeric);
        if err > report.max_rel_err {
            report.max_rel_err = err;
            report.worst_index = i;
        }
        report.checked += 1;
    }
    report.passed = report.max_rel_err <= cfg.tolerance;
    Ok(report)
}

/// Certifies the gradient of one recorded value. `build` reconstructs the
/// graph around a substituted copy of that value and returns the tape,
/// the scalar loss node, and the node under test. The analytic gradient
/// comes from one backward pass at the base point; every perturbed
/// evaluation reruns only the forward build.
pub fn check_value<B>(
    base: &Tensor<f64>,
    skip: Option<&[bool]>,
    cfg: &GradCheckConfig,
    build: B,
) -> Result<GradReport>
where
    B: Fn(Tensor<f64>) -> Result<(Tape<f64>, ValueId, ValueId)>,
{
    let (tape, loss, target) = build(base.clone())?;
    if tape.value(loss).len() != 1 {
        return Err(Error::invalid("gradient check needs a scalar loss node"));
    }
    let mut grads = tape.backward(loss)?;
    let analytic = grads.take_or_zero(target, base.shape());

    central_diff_check(base, skip, cfg, &analytic, |probe| {
        let (tape, loss, _) = build(probe.clone())?;
        Ok(tape.value(loss).data()[0])
    })
}

/// Marks coordinates within `band` of the rectifier kink at zero.
pub fn relu_kink_mask(x: &Tensor<f64>, band: f64) -> Vec<bool> {
    x.data().iter().map(|&v| v.abs() < band).collect()
}

/// Marks coordinates within `band` of their channel's threshold.
pub fn trelu_kink_mask(x: &Tensor<f64>, alpha: &[f64], band: f64) -> Vec<bool> {
    let c = x.shape().c;
    let plane = x.shape().plane();
    x.data()
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let j = (i / plane) % c;
            (v - alpha[j]).abs() < band
        })
        .collect()
}

/// Marks threshold channels whose input has any coordinate within `band`
/// of the threshold, where perturbing the threshold flips membership.
pub fn trelu_alpha_mask(x: &Tensor<f64>, alpha: &[f64], band: f64) -> Vec<bool> {
    let c = x.shape().c;
    let plane = x.shape().plane();
    let mut mask = vec![false; alpha.len()];
    for (i, &v) in x.data().iter().enumerate() {
        let j = (i / plane) % c;
        if (v - alpha[j]).abs() < band {
            mask[j] = true;
        }
    }
    mask
}

/// Marks input coordinates whose perturbation by `band` could change some
/// window's argmax: the window maximum when the runner-up is within
/// `band`, and any coordinate within `band` of its window's maximum.
pub fn max_pool_tie_mask(x: &Tensor<f64>, spec: &PoolSpec, band: f64) -> Result<Vec<bool>> {
    let s = x.shape();
    let (oh, ow) = spec.out_hw(s.h, s.w)?;
    let mut mask = vec![false; x.len()];
    for i in 0..s.m {
        for j in 0..s.c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let y0 = (oy * spec.stride) as isize - spec.pad as isize;
                    let x0 = (ox * spec.stride) as isize - spec.pad as isize;
                    let mut cells: Vec<usize> = Vec::new();
                    for ky in 0..spec.kh {
                        for kx in 0..spec.kw {
                            let yy = y0 + ky as isize;
                            let xx = x0 + kx as isize;
                            if yy >= 0 && (yy as usize) < s.h && xx >= 0 && (xx as usize) < s.w {
                                cells.push(s.offset(i, j, yy as usize, xx as usize));
                            }
                        }
                    }
                    let Some(&max_idx) = cells
                        .iter()
                        .max_by(|&&a, &&b| x.data()[a].total_cmp(&x.data()[b]))
                    else {
                        continue;
                    };
                    let mx = x.data()[max_idx];
                    for &cell in &cells {
                        if cell == max_idx {
                            let runner_up = cells
                                .iter()
                                .filter(|&&c| c != max_idx)
                                .map(|&c| x.data()[c])
                                .fold(f64::NEG_INFINITY, f64::max);
                            if mx - runner_up < band {
                                mask[cell] = true;
                            }
                        } else if mx - x.data()[cell] < band {
                            mask[cell] = true;
                        }
                    }
                }
            }
        }
    }
    Ok(mask)
}

/// One named check from the layer suite.
pub struct SuiteEntry {
    pub name: &'static str,
    pub report: GradReport,
}

fn proj_loss(tape: &mut Tape<f64>, y: ValueId, seed: u64) -> Result<ValueId> {
    let coeff = gaussian_init(tape.value(y).shape(), seed);
    let p = tape.mul_const(y, coeff)?;
    Ok(tape.sum(p))
}

/// Retries derived seeds until `accept` holds, keeping the suite
/// deterministic while steering composite layers away from kinks that
/// the per-coordinate masks cannot express for upstream parameters.
fn settle_seed(base: u64, accept: impl Fn(u64) -> Result<bool>) -> Result<u64> {
    let mut s = base;
    for _ in 0..32 {
        if accept(s)? {
            return Ok(s);
        }
        s = s.wrapping_add(1009);
    }
    Err(Error::invalid(
        "no kink-free configuration found for a composite gradient check",
    ))
}

fn min_abs(t: &Tensor<f64>) -> f64 {
    t.data().iter().fold(f64::INFINITY, |m, &v| m.min(v.abs()))
}

/// Runs the finite-difference certification over every layer op at one
/// seed: convolution on both dispatch paths, the fully connected map,
/// both rectifiers, both poolings, the softmax cross-entropy head, batch
/// normalization, weight normalization alone and inside its three layer
/// compositions, the channel affine, and train-mode dropout under its
/// seeded mask.
pub fn layer_gradient_suite(seed: u64, cfg: &GradCheckConfig) -> Result<Vec<SuiteEntry>> {
    let mut entries = Vec::new();
    let mut run = |name: &'static str, report: GradReport| {
        entries.push(SuiteEntry { name, report });
    };
    let band = cfg.kink_band();
    let d = |k: u64| seed.wrapping_mul(4099).wrapping_add(k);

    // Same-size convolution exercises the tap-shift path.
    {
        let x0 = gaussian_init(crate::tensor::Shape::new(2, 3, 5, 5), d(1));
        let w0 = xavier_init(crate::tensor::Shape::new(4, 3, 3, 3), d(2));
        let spec = ConvSpec::square(4, 3, 3, 1, 1)?;
        let build_w = |w: Tensor<f64>| {
            let mut tape = Tape::new();
            let x = tape.constant(x0.clone());
            let wid = tape.leaf(w);
            let y = tape.conv2d(x, spec, wid)?;
            let l = proj_loss(&mut tape, y, d(3))?;
            Ok((tape, l, wid))
        };
        run("conv_same_w", check_value(&w0, None, cfg, build_w)?);
        let build_x = |x: Tensor<f64>| {
            let mut tape = Tape::new();
            let xid = tape.leaf(x);
            let w = tape.constant(w0.clone());
            let y = tape.conv2d(xid, spec, w)?;
            let l = proj_loss(&mut tape, y, d(3))?;
            Ok((tape, l, xid))
        };
        run("conv_same_x", check_value(&x0, None, cfg, build_x)?);
    }

    // A strided convolution exercises the general lowering path.
    {
        let x0 = gaussian_init(crate::tensor::Shape::new(2, 2, 7, 7), d(4));
        let w0 = xavier_init(crate::tensor::Shape::new(3, 2, 3, 3), d(5));
        let spec = ConvSpec::square(3, 2, 3, 2, 1)?;
        let build = |w: Tensor<f64>| {
            let mut tape = Tape::new();
            let x = tape.constant(x0.clone());
            let wid = tape.leaf(w);
            let y = tape.conv2d(x, spec, wid)?;
            let l = proj_loss(&mut tape, y, d(6))?;
            Ok((tape, l, wid))
        };
        run("conv_strided_w", check_value(&w0, None, cfg, build)?);
    }

    // Fully connected, both arguments.
    {
        let x0 = gaussian_init(crate::tensor::Shape::new(3, 8, 1, 1), d(7));
        let w0 = xavier_init(crate::tensor::Shape::new(5, 8, 1, 1), d(8));
        let build_w = |w: Tensor<f64>| {
            let mut tape = Tape::new();
            let x = tape.constant(x0.clone());
            let wid = tape.leaf(w);
            let y = tape.fully_connected(x, wid)?;
            let l = proj_loss(&mut tape, y, d(9))?;
            Ok((tape, l, wid))
        };
        run("fc_w", check_value(&w0, None, cfg, build_w)?);
        let build_x = |x: Tensor<f64>| {
            let mut tape = Tape::new();
            let xid = tape.leaf(x);
            let w = tape.constant(w0.clone());
            let y = tape.fully_connected(xid, w)?;
            let l = proj_loss(&mut tape, y, d(9))?;
            Ok((tape, l, xid))
        };
        run("fc_x", check_value(&x0, None, cfg, build_x)?);
    }

    // Rectifier with its kink mask.
    {
        let x0 = gaussian_init(crate::tensor::Shape::new(2, 4, 3, 3), d(10));
        let mask = relu_kink_mask(&x0, band);
        let build = |x: Tensor<f64>| {
            let mut tape = Tape::new();
            let xid = tape.leaf(x);
            let y = tape.relu(xid);
            let l = proj_loss(&mut tape, y, d(11))?;
            Ok((tape, l, xid))
        };
        run("relu_x", check_value(&x0, Some(&mask), cfg, build)?);
    }

    // Thresholded rectifier: input under the kink mask, thresholds under
    // the channel flip mask.
    {
        let x0 = gaussian_init(crate::tensor::Shape::new(2, 3, 2, 2), d(12));
        let a0 = gaussian_init(crate::tensor::Shape::new(1, 3, 1, 1), d(13));
        let x_mask = trelu_kink_mask(&x0, a0.data(), band);
        let a_mask = trelu_alpha_mask(&x0, a0.data(), band);
        let build_x = |x: Tensor<f64>| {
            let mut tape = Tape::new();
            let xid = tape.leaf(x);
            let aid = tape.constant(a0.clone());
            let y = tape.trelu(xid, aid)?;
            let l = proj_loss(&mut tape, y, d(14))?;
            Ok((tape, l, xid))
        };
        run("trelu_x", check_value(&x0, Some(&x_mask), cfg, build_x)?);
        let build_a = |a: Tensor<f64>| {
            let mut tape = Tape::new();
            let xid = tape.constant(x0.clone());
            let aid = tape.leaf(a);
            let y = tape.trelu(xid, aid)?;
            let l = proj_loss(&mut tape, y, d(14))?;
            Ok((tape, l, aid))
        };
        run("trelu_alpha", check_value(&a0, Some(&a_mask), cfg, build_a)?);
    }

    // Poolings: overlapping padded windows, max under its tie mask.
    {
        let x0 = gaussian_init(crate::tensor::Shape::new(2, 2, 6, 6), d(15));
        let max_spec = PoolSpec::square(PoolKind::Max, 3, 2, 1)?;
        let avg_spec = PoolSpec::square(PoolKind::Avg, 3, 2, 1)?;
        let mask = max_pool_tie_mask(&x0, &max_spec, band)?;
        let build_max = |x: Tensor<f64>| {
            let mut tape = Tape::new();
            let xid = tape.leaf(x);
            let y = tape.max_pool(xid, max_spec)?;
            let l = proj_loss(&mut tape, y, d(16))?;
            Ok((tape, l, xid))
        };
        run("max_pool_x", check_value(&x0, Some(&mask), cfg, build_max)?);
        let build_avg = |x: Tensor<f64>| {
            let mut tape = Tape::new();
            let xid = tape.leaf(x);
            let y = tape.avg_pool(xid, avg_spec)?;
            let l = proj_loss(&mut tape, y, d(16))?;
            Ok((tape, l, xid))
        };
        run("avg_pool_x", check_value(&x0, None, cfg, build_avg)?);
    }

    // Softmax cross-entropy head, already scalar.
    {
        let x0 = gaussian_init(crate::tensor::Shape::new(4, 6, 1, 1), d(17));
        let labels = vec![0usize, 2, 5, 3];
        let build = |x: Tensor<f64>| {
            let mut tape = Tape::new();
            let xid = tape.leaf(x);
            let l = tape.softmax_cross_entropy(xid, &labels)?;
            Ok((tape, l, xid))
        };
        run("softmax_xent_logits", check_value(&x0, None, cfg, build)?);
    }

    // Batch normalization over batch statistics: input and both affines.
    {
        let x0 = gaussian_init(crate::tensor::Shape::new(4, 3, 2, 2), d(18));
        let g0 = gaussian_init(crate::tensor::Shape::new(1, 3, 1, 1), d(19));
        let b0 = gaussian_init(crate::tensor::Shape::new(1, 3, 1, 1), d(20));
        let build_x = |x: Tensor<f64>| {
            let mut tape = Tape::new();
            let xid = tape.leaf(x);
            let g = tape.constant(g0.clone());
            let b = tape.constant(b0.clone());
            let y = tape.batch_norm(xid, g, b, 1e-5)?;
            let l = proj_loss(&mut tape, y, d(21))?;
            Ok((tape, l, xid))
        };
        run("batch_norm_x", check_value(&x0, None, cfg, build_x)?);
        let build_g = |g: Tensor<f64>| {
            let mut tape = Tape::new();
            let xid = tape.constant(x0.clone());
            let gid = tape.leaf(g);
            let b = tape.constant(b0.clone());
            let y = tape.batch_norm(xid, gid, b, 1e-5)?;
            let l = proj_loss(&mut tape, y, d(21))?;
            Ok((tape, l, gid))
        };
        run("batch_norm_gamma", check_value(&g0, None, cfg, build_g)?);
        let build_b = |b: Tensor<f64>| {
            let mut tape = Tape::new();
            let xid = tape.constant(x0.clone());
            let g = tape.constant(g0.clone());
            let bid = tape.leaf(b);
            let y = tape.batch_norm(xid, g, bid, 1e-5)?;
            let l = proj_loss(&mut tape, y, d(21))?;
            Ok((tape, l, bid))
        };
        run("batch_norm_beta", check_value(&b0, None, cfg, build_b)?);
    }

    // Row normalization on its own.
    {
        let w0 = gaussian_init(crate::tensor::Shape::new(4, 6, 1, 1), d(22));
        let build = |w: Tensor<f64>| {
            let mut tape = Tape::new();
            let wid = tape.leaf(w);
            let y = tape.weight_normalize(wid, 1e-5)?;
            let l = proj_loss(&mut tape, y, d(23))?;
            Ok((tape, l, wid))
        };
        run("weight_normalize_w", check_value(&w0, None, cfg, build)?);
    }

    // Channel affine, all three arguments.
    {
        let x0 = gaussian_init(crate::tensor::Shape::new(2, 3, 2, 2), d(24));
        let g0 = gaussian_init(crate::tensor::Shape::new(1, 3, 1, 1), d(25));
        let b0 = gaussian_init(crate::tensor::Shape::new(1, 3, 1, 1), d(26));
        let build_x = |x: Tensor<f64>| {
            let mut tape = Tape::new();
            let xid = tape.leaf(x);
            let g = tape.constant(g0.clone());
            let b = tape.constant(b0.clone());
            let y = tape.channel_affine(xid, g, b)?;
            let l = proj_loss(&mut tape, y, d(27))?;
            Ok((tape, l, xid))
        };
        run("channel_affine_x", check_value(&x0, None, cfg, build_x)?);
        let build_g = |g: Tensor<f64>| {
            let mut tape = Tape::new();
            let xid = tape.constant(x0.clone());
            let gid = tape.leaf(g);
            let b = tape.constant(b0.clone());
            let y = tape.channel_affine(xid, gid, b)?;
            let l = proj_loss(&mut tape, y, d(27))?;
            Ok((tape, l, gid))
        };
        run("channel_affine_gamma", check_value(&g0, None, cfg, build_g)?);
        let build_b = |b: Tensor<f64>| {
            let mut tape = Tape::new();
            let xid = tape.constant(x0.clone());
            let g = tape.constant(g0.clone());
            let bid = tape.leaf(b);
            let y = tape.channel_affine(xid, g, bid)?;
            let l = proj_loss(&mut tape, y, d(27))?;
            Ok((tape, l, bid))
        };
        run("channel_affine_beta", check_value(&b0, None, cfg, build_b)?);
    }

    // Dropout in train mode; the mask comes from a fixed seed, so every
    // rebuild sees the same pattern and the map stays piecewise linear.
    {
        let x0 = gaussian_init(crate::tensor::Shape::new(2, 2, 3, 3), d(28));
        let build = |x: Tensor<f64>| {
            let mut tape = Tape::new();
            let xid = tape.leaf(x);
            let y = tape.dropout(xid, 0.4, 4242)?;
            let l = proj_loss(&mut tape, y, d(29))?;
            Ok((tape, l, xid))
        };
        run("dropout_x", check_value(&x0, None, cfg, build)?);
    }

    // Weight-normalized layer: normalize, convolve, channel affine.
    {
        let x0 = gaussian_init(crate::tensor::Shape::new(2, 2, 4, 4), d(30));
        let w0 = xavier_init(crate::tensor::Shape::new(3, 2, 3, 3), d(31));
        let g0 = gaussian_init(crate::tensor::Shape::new(1, 3, 1, 1), d(32));
        let b0 = gaussian_init(crate::tensor::Shape::new(1, 3, 1, 1), d(33));
        let spec = ConvSpec::square(3, 2, 3, 1, 1)?;
        let build = |w: Tensor<f64>| {
            let mut tape = Tape::new();
            let x = tape.constant(x0.clone());
            let wid = tape.leaf(w);
            let g = tape.constant(g0.clone());
            let b = tape.constant(b0.clone());
            let what = tape.weight_normalize(wid, 1e-5)?;
            let y = tape.conv2d(x, spec, what)?;
            let z = tape.channel_affine(y, g, b)?;
            let l = proj_loss(&mut tape, z, d(34))?;
            Ok((tape, l, wid))
        };
        run("wn_layer_w", check_value(&w0, None, cfg, build)?);
    }

    // Normalization-propagation layer: the rectifier sits mid-graph, so
    // no per-coordinate mask can protect an upstream weight; instead the
    // input seed is settled until every pre-rectifier value clears the
    // kink band with a wide margin.
    {
        let nc = NpConstants::new();
        let w0 = xavier_init(crate::tensor::Shape::new(3, 2, 3, 3), d(35));
        let g0 = gaussian_init(crate::tensor::Shape::new(1, 3, 1, 1), d(36));
        let b0 = gaussian_init(crate::tensor::Shape::new(1, 3, 1, 1), d(37));
        let spec = ConvSpec::square(3, 2, 3, 1, 1)?;
        let margin = 100.0 * cfg.step;
        let pre_rect = |x0: &Tensor<f64>| -> Result<Tensor<f64>> {
            let mut tape = Tape::new();
            let x = tape.constant(x0.clone());
            let w = tape.constant(w0.clone());
            let g = tape.constant(g0.clone());
            let b = tape.constant(b0.clone());
            let what = tape.weight_normalize(w, 1e-5)?;
            let y = tape.conv2d(x, spec, what)?;
            let z = tape.channel_affine(y, g, b)?;
            Ok(tape.value(z).clone())
        };
        let xs = settle_seed(d(38), |s| {
            let x0 = gaussian_init(crate::tensor::Shape::new(2, 2, 4, 4), s);
            Ok(min_abs(&pre_rect(&x0)?) > margin)
        })?;
        let x0 = gaussian_init(crate::tensor::Shape::new(2, 2, 4, 4), xs);
        let build = |w: Tensor<f64>| {
            let mut tape = Tape::new();
            let x = tape.constant(x0.clone());
            let wid = tape.leaf(w);
            let g = tape.constant(g0.clone());
            let b = tape.constant(b0.clone());
            let what = tape.weight_normalize(wid, 1e-5)?;
            let y = tape.conv2d(x, spec, what)?;
            let z = tape.channel_affine(y, g, b)?;
            let r = tape.relu(z);
            let o = tape.affine_const(r, nc.c_var, -nc.c_var * nc.c_mean);
            let l = proj_loss(&mut tape, o, d(39))?;
            Ok((tape, l, wid))
        };
        run("np_layer_w", check_value(&w0, None, cfg, build)?);
    }

    // Thresholded weight-normalized layer: same settling treatment, with
    // the thresholds checked as a second parameter.
    {
        let w0 = xavier_init(crate::tensor::Shape::new(3, 2, 3, 3), d(40));
        let a0 = gaussian_init(crate::tensor::Shape::new(1, 3, 1, 1), d(41));
        let spec = ConvSpec::square(3, 2, 3, 1, 1)?;
        let margin = 100.0 * cfg.step;
        let pre_rect = |x0: &Tensor<f64>| -> Result<Tensor<f64>> {
            let mut tape = Tape::new();
            let x = tape.constant(x0.clone());
            let w = tape.constant(w0.clone());
            let what = tape.weight_normalize(w, 1e-5)?;
            let y = tape.conv2d(x, spec, what)?;
            Ok(tape.value(y).clone())
        };
        let xs = settle_seed(d(42), |s| {
            let x0 = gaussian_init(crate::tensor::Shape::new(2, 2, 4, 4), s);
            let pre = pre_rect(&x0)?;
            let mask = trelu_kink_mask(&pre, a0.data(), margin);
            Ok(mask.iter().all(|&hit| !hit))
        })?;
        let x0 = gaussian_init(crate::tensor::Shape::new(2, 2, 4, 4), xs);
        let build_w = |w: Tensor<f64>| {
            let mut tape = Tape::new();
            let x = tape.constant(x0.clone());
            let wid = tape.leaf(w);
            let a = tape.constant(a0.clone());
            let what = tape.weight_normalize(wid, 1e-5)?;
            let y = tape.conv2d(x, spec, what)?;
            let t = tape.trelu(y, a)?;
            let l = proj_loss(&mut tape, t, d(43))?;
            Ok((tape, l, wid))
        };
        run("trelu_wn_layer_w", check_value(&w0, None, cfg, build_w)?);
        let build_a = |a: Tensor<f64>| {
            let mut tape = Tape::new();
            let x = tape.constant(x0.clone());
            let w = tape.constant(w0.clone());
            let aid = tape.leaf(a);
            let what = tape.weight_normalize(w, 1e-5)?;
            let y = tape.conv2d(x, spec, what)?;
            let t = tape.trelu(y, aid)?;
            let l = proj_loss(&mut tape, t, d(43))?;
            Ok((tape, l, aid))
        };
        run("trelu_wn_layer_alpha", check_value(&a0, None, cfg, build_a)?);
    }

    Ok(entries)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;

    #[test]
    fn quadratic_gradient_matches_closed_form() {
        let x0 = gaussian_init(Shape::new(2, 3, 1, 1), 11);
        let cfg = GradCheckConfig::default();
        let report = check_value(&x0, None, &cfg, |x| {
            let mut tape = Tape::new();
            let xid = tape.leaf(x);
            let l = tape.sum_sq(xid);
            Ok((tape, l, xid))
        })
        .unwrap();
        assert!(report.passed, "max rel err {}", report.max_rel_err);
        assert_eq!(report.checked, 6);
        assert_eq!(report.skipped, 0);
        assert!(report.max_rel_err < 1e-8);
    }

    #[test]
    fn corrupted_analytic_gradient_is_caught() {
        let x0 = gaussian_init(Shape::new(1, 4, 1, 1), 12);
        let cfg = GradCheckConfig::default();
        let analytic = Tensor::from_fn(x0.shape(), |i| 2.0 * x0.data()[i] * 1.01);
        let report = central_diff_check(&x0, None, &cfg, &analytic, |probe| {
            Ok(probe.data().iter().map(|&v| v * v).sum())
        })
        .unwrap();
        assert!(!report.passed);
        assert!(report.max_rel_err > 1e-3);
    }

    #[test]
    fn relu_kink_fails_unmasked_and_passes_masked() {
        let x0 = Tensor::from_vec(Shape::new(1, 4, 1, 1), vec![1.0, -2.0, 0.0, 3.0]).unwrap();
        let cfg = GradCheckConfig::default();
        let build = |x: Tensor<f64>| {
            let mut tape = Tape::new();
            let xid = tape.leaf(x);
            let y = tape.relu(xid);
            let l = tape.sum(y);
            Ok((tape, l, xid))
        };
        let unmasked = check_value(&x0, None, &cfg, build).unwrap();
        assert!(!unmasked.passed);
        assert_eq!(unmasked.worst_index, 2);

        let mask = relu_kink_mask(&x0, cfg.kink_band());
        assert_eq!(mask, vec![false, false, true, false]);
        let masked = check_value(&x0, Some(&mask), &cfg, build).unwrap();
        assert!(masked.passed);
        assert_eq!(masked.skipped, 1);
        assert_eq!(masked.checked, 3);
    }

    #[test]
    fn pool_tie_mask_flags_the_tied_window_only() {
        // One 2x2 window holds an exact tie; the other window is clear.
        let x0 = Tensor::from_vec(
            Shape::new(1, 1, 2, 4),
            vec![5.0, 5.0, 1.0, 9.0, 0.0, -1.0, 2.0, 3.0],
        )
        .unwrap();
        let spec = PoolSpec::square(PoolKind::Max, 2, 2, 0).unwrap();
        let cfg = GradCheckConfig::default();
        let mask = max_pool_tie_mask(&x0, &spec, cfg.kink_band()).unwrap();
        assert!(mask[0] && mask[1], "tied pair must be skipped");
        assert!(!mask[3], "clear maximum stays checked");

        let build = |x: Tensor<f64>| {
            let mut tape = Tape::new();
            let xid = tape.leaf(x);
            let y = tape.max_pool(xid, spec)?;
            let l = tape.sum(y);
            Ok((tape, l, xid))
        };
        let report = check_value(&x0, Some(&mask), &cfg, build).unwrap();
        assert!(report.passed, "max rel err {}", report.max_rel_err);
        assert_eq!(report.skipped, 2);
    }

    #[test]
    fn trelu_masks_cover_input_and_threshold() {
        let x0 = Tensor::from_vec(
            Shape::new(1, 2, 1, 2),
            vec![0.5, 0.500001, -1.0, 2.0],
        )
        .unwrap();
        let alpha = [0.5, 0.0];
        let cfg = GradCheckConfig::default();
        let band = cfg.kink_band();
        let xm = trelu_kink_mask(&x0, &alpha, band);
        assert_eq!(xm, vec![true, true, false, false]);
        let am = trelu_alpha_mask(&x0, &alpha, band);
        assert_eq!(am, vec![true, false]);
    }

    #[test]
    fn non_finite_numeric_gradient_is_an_error() {
        let x0 = Tensor::from_vec(Shape::new(1, 2, 1, 1), vec![1.0, 2.0]).unwrap();
        let cfg = GradCheckConfig::default();
        let analytic = Tensor::zeros(x0.shape());
        let err = central_diff_check(&x0, None, &cfg, &analytic, |_| Ok(f64::NAN)).unwrap_err();
        assert!(matches!(err, Error::NonFinite(_)));
    }

    #[test]
    fn full_layer_suite_passes_at_default_tolerance() {
        let cfg = GradCheckConfig::default();
        let entries = layer_gradient_suite(1, &cfg).unwrap();
        assert!(entries.len() >= 18);
        for e in &entries {
            assert!(
                e.report.passed,
                "{} failed: max rel err {} at {}",
                e.name, e.report.max_rel_err, e.report.worst_index
            );
            assert!(e.report.checked > 0, "{} checked nothing", e.name);
        }
    }
}
