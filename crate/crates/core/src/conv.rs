//! 2-D convolution (cross-correlation) with zero padding and floor-based
//! output sizing, plus its backward pass.
//!
//! Three execution paths feed the same GEMM backend:
//! * odd square kernels at stride 1 with "same" padding run tap-by-tap over
//!   zero-padded planes, which needs no column matrix at all;
//! * 1x1 kernels at stride 1 without padding multiply the channel matrix
//!   directly;
//! * everything else goes through an explicit im2col buffer.
//!
//! The paths agree to floating-point round-off; tests pin the equivalence.

use crate::error::{Error, Result};
use crate::tensor::{Element, Shape, Tensor};

/// Geometry of a convolution: kernel extents, stride, and zero padding.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub c_out: usize,
    pub c_in: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvSpec {
    /// Validates the geometry. Stride and kernel extents must be positive
    /// and padding must be smaller than the kernel so every window overlaps
    /// the input.
    pub fn new(c_out: usize, c_in: usize, kh: usize, kw: usize, stride: usize, pad: usize) -> Result<Self> {
        if c_out == 0 || c_in == 0 || kh == 0 || kw == 0 {
            return Err(Error::invalid(format!(
                "conv channels and kernel extents must be positive, got {c_out}x{c_in}x{kh}x{kw}"
            )));
        }
        if stride == 0 {
            return Err(Error::invalid("conv stride must be positive"));
        }
        if pad >= kh || pad >= kw {
            return Err(Error::invalid(format!(
                "conv padding {pad} must be smaller than the kernel {kh}x{kw}"
            )));
        }
        Ok(ConvSpec { c_out, c_in, kh, kw, stride, pad })
    }

    /// Square-kernel convenience constructor.
    pub fn square(c_out: usize, c_in: usize, k: usize, stride: usize, pad: usize) -> Result<Self> {
        ConvSpec::new(c_out, c_in, k, k, stride, pad)
    }

    /// Expected weight-tensor shape `(c_out, c_in, kh, kw)`.
    pub fn weight_shape(&self) -> Shape {
        Shape::new(self.c_out, self.c_in, self.kh, self.kw)
    }

    /// Output spatial extents: `floor((in + 2*pad - k) / stride) + 1`.
    pub fn out_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        if h + 2 * self.pad < self.kh || w + 2 * self.pad < self.kw {
            return Err(Error::shape(format!(
                "input {h}x{w} with padding {} is smaller than the {}x{} kernel",
                self.pad, self.kh, self.kw
            )));
        }
        let oh = (h + 2 * self.pad - self.kh) / self.stride + 1;
        let ow = (w + 2 * self.pad - self.kw) / self.stride + 1;
        Ok((oh, ow))
    }

    fn check<E: Element>(&self, x: &Tensor<E>, w: &Tensor<E>) -> Result<(usize, usize)> {
        let xs = x.shape();
        if xs.c != self.c_in {
            return Err(Error::shape(format!(
                "conv expects {} input channels, tensor has {}",
                self.c_in, xs.c
            )));
        }
        if w.shape() != self.weight_shape() {
            return Err(Error::shape(format!(
                "conv weights must be {}, got {}",
                self.weight_shape(),
                w.shape()
            )));
        }
        self.out_hw(xs.h, xs.w)
    }

    /// True for the odd square-kernel, stride-1, "same"-output geometry
    /// that the tap-shift path handles.
    fn is_same_size(&self) -> bool {
        self.stride == 1 && self.kh == self.kw && self.kh % 2 == 1 && self.pad == self.kh / 2
    }

}

/// Gradients returned by [`conv2d_backward`].
pub struct ConvGrads<E: Element> {
    /// Gradient with respect to the input, when requested.
    pub dx: Option<Tensor<E>>,
    /// Gradient with respect to the weights.
    pub dw: Tensor<E>,
}

/// Convolves `x` with `w` (no kernel flip) under `spec`.
pub fn conv2d<E: Element>(x: &Tensor<E>, spec: &ConvSpec, w: &Tensor<E>) -> Result<Tensor<E>> {
    let (oh, ow) = spec.check(x, w)?;
    if spec.is_same_size() {
        Ok(tap_shift_forward(x, spec, w))
    } else {
        Ok(im2col_forward(x, spec, w, oh, ow))
    }
}

/// Backward pass for [`conv2d`]: weight gradient always, input gradient on
/// request. `grad_out` must have the forward output's shape.
pub fn conv2d_backward<E: Element>(
    x: &Tensor<E>,
    spec: &ConvSpec,
    w: &Tensor<E>,
    grad_out: &Tensor<E>,
    need_dx: bool,
) -> Result<ConvGrads<E>> {
    let (oh, ow) = spec.check(x, w)?;
    let want = Shape::new(x.shape().m, spec.c_out, oh, ow);
    if grad_out.shape() != want {
        return Err(Error::shape(format!(
            "conv output gradient must be {}, got {}",
            want,
            grad_out.shape()
        )));
    }
    if spec.is_same_size() {
        Ok(tap_shift_backward(x, spec, w, grad_out, need_dx))
    } else {
        Ok(im2col_backward(x, spec, w, grad_out, oh, ow, need_dx))
    }
}

// ---------------------------------------------------------------------------
// im2col path
// ---------------------------------------------------------------------------

/// Fills sample `i`'s block of `col`, a `(c_in*kh*kw) x ncol` row-major
/// matrix whose rows hold several samples side by side; this sample's
/// columns start at `at`. Out-of-bounds positions are zero.
fn im2col<E: Element>(
    x: &Tensor<E>,
    i: usize,
    spec: &ConvSpec,
    oh: usize,
    ow: usize,
    col: &mut [E],
    ncol: usize,
    at: usize,
) {
    let xs = x.shape();
    let (h, w) = (xs.h as isize, xs.w as isize);
    let (s, p) = (spec.stride, spec.pad as isize);
    let cols = oh * ow;
    let mut r = 0;
    for ci in 0..spec.c_in {
        let plane = x.plane(i, ci);
        for ky in 0..spec.kh {
            for kx in 0..spec.kw {
                let row = &mut col[r * ncol + at..r * ncol + at + cols];
                r += 1;
                for oy in 0..oh {
                    let iy = (oy * s) as isize + ky as isize - p;
                    let seg = &mut row[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= h {
                        seg.fill(E::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * w as usize..(iy as usize + 1) * w as usize];
                    if s == 1 {
                        // ix = ox + kx - p is valid for ox in [lo, hi)
                        let shift = kx as isize - p;
                        let lo = (-shift).max(0).min(ow as isize) as usize;
                        let hi = (w - shift).clamp(0, ow as isize) as usize;
                        seg[..lo].fill(E::zero());
                        if lo < hi {
                            let start = (lo as isize + shift) as usize;
                            seg[lo..hi].copy_from_slice(&src[start..start + (hi - lo)]);
                        }
                        seg[hi.max(lo)..].fill(E::zero());
                    } else {
                        for (ox, out) in seg.iter_mut().enumerate() {
                            let ix = (ox * s) as isize + kx as isize - p;
                            *out = if ix < 0 || ix >= w { E::zero() } else { src[ix as usize] };
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-adds sample `i`'s block of a multi-sample column matrix back
/// onto the input layout; the block's columns start at `at`.
fn col2im_add<E: Element>(
    dx: &mut Tensor<E>,
    i: usize,
    spec: &ConvSpec,
    oh: usize,
    ow: usize,
    col: &[E],
    ncol: usize,
    at: usize,
) {
    let xs = dx.shape();
    let (h, w) = (xs.h as isize, xs.w as isize);
    let (s, p) = (spec.stride, spec.pad as isize);
    let cols = oh * ow;
    let plane_len = xs.plane();
    let sample_base = i * xs.per_sample();
    let mut r = 0;
    for ci in 0..spec.c_in {
        let plane_base = sample_base + ci * plane_len;
        for ky in 0..spec.kh {
            for kx in 0..spec.kw {
                let row = &col[r * ncol + at..r * ncol + at + cols];
                r += 1;
                for oy in 0..oh {
                    let iy = (oy * s) as isize + ky as isize - p;
                    if iy < 0 || iy >= h {
                        continue;
                    }
                    let dst_row = plane_base + iy as usize * w as usize;
                    let seg = &row[oy * ow..(oy + 1) * ow];
                    for (ox, &v) in seg.iter().enumerate() {
                        let ix = (ox * s) as isize + kx as isize - p;
                        if ix >= 0 && ix < w {
                            dx.data_mut()[dst_row + ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

/// Ceiling on column-buffer elements per chunk. Samples are grouped so
/// one GEMM spans many of them while the buffer stays cache-friendly.
const COL_CHUNK_ELEMS: usize = 4 << 20;

fn chunk_len(k: usize, cols: usize, m: usize) -> usize {
    (COL_CHUNK_ELEMS / (k * cols)).clamp(1, m)
}

/// Copies rows of a `(c_out x ncol)` product matrix out to the
/// per-sample output layout.
fn scatter_rows<E: Element>(
    prod: &[E],
    out: &mut [E],
    c_out: usize,
    cols: usize,
    base_sample: usize,
    len: usize,
    ncol: usize,
) {
    let per = c_out * cols;
    for s in 0..len {
        let t0 = (base_sample + s) * per;
        for o in 0..c_out {
            let b = o * ncol + s * cols;
            let t = t0 + o * cols;
            out[t..t + cols].copy_from_slice(&prod[b..b + cols]);
        }
    }
}

/// Gathers per-sample rows into a `(c_out x ncol)` matrix, the inverse
/// of [`scatter_rows`].
fn gather_rows<E: Element>(
    src: &[E],
    buf: &mut [E],
    c_out: usize,
    cols: usize,
    base_sample: usize,
    len: usize,
    ncol: usize,
) {
    let per = c_out * cols;
    for s in 0..len {
        let t0 = (base_sample + s) * per;
        for o in 0..c_out {
            let b = o * ncol + s * cols;
            let t = t0 + o * cols;
            buf[b..b + cols].copy_from_slice(&src[t..t + cols]);
        }
    }
}

fn im2col_forward<E: Element>(x: &Tensor<E>, spec: &ConvSpec, w: &Tensor<E>, oh: usize, ow: usize) -> Tensor<E> {
    let m = x.shape().m;
    let k = spec.c_in * spec.kh * spec.kw;
    let cols = oh * ow;
    let chunk = chunk_len(k, cols, m);
    let mut out = Tensor::zeros(Shape::new(m, spec.c_out, oh, ow));
    let mut col = vec![E::zero(); k * chunk * cols];
    let mut prod = vec![E::zero(); spec.c_out * chunk * cols];
    let mut base = 0;
    while base < m {
        let len = chunk.min(m - base);
        let ncol = len * cols;
        for s in 0..len {
            im2col(x, base + s, spec, oh, ow, &mut col, ncol, s * cols);
        }
        E::gemm(
            spec.c_out, k, ncol,
            E::one(), w.data(), k as isize, 1,
            &col, ncol as isize, 1,
            E::zero(), &mut prod, ncol as isize, 1,
        );
        scatter_rows(&prod, out.data_mut(), spec.c_out, cols, base, len, ncol);
        base += len;
    }
    out
}

fn im2col_backward<E: Element>(
    x: &Tensor<E>,
    spec: &ConvSpec,
    w: &Tensor<E>,
    grad_out: &Tensor<E>,
    oh: usize,
    ow: usize,
    need_dx: bool,
) -> ConvGrads<E> {
    let m = x.shape().m;
    let k = spec.c_in * spec.kh * spec.kw;
    let cols = oh * ow;
    let chunk = chunk_len(k, cols, m);
    let mut dw = Tensor::zeros(spec.weight_shape());
    let mut dx = need_dx.then(|| Tensor::zeros(x.shape()));
    let mut col = vec![E::zero(); k * chunk * cols];
    let mut gbuf = vec![E::zero(); spec.c_out * chunk * cols];
    let mut base = 0;
    while base < m {
        let len = chunk.min(m - base);
        let ncol = len * cols;
        for s in 0..len {
            im2col(x, base + s, spec, oh, ow, &mut col, ncol, s * cols);
        }
        gather_rows(grad_out.data(), &mut gbuf, spec.c_out, cols, base, len, ncol);
        // dW += g . col^T
        E::gemm(
            spec.c_out, ncol, k,
            E::one(), &gbuf, ncol as isize, 1,
            &col, 1, ncol as isize,
            E::one(), dw.data_mut(), k as isize, 1,
        );
        if let Some(dx) = dx.as_mut() {
            // dcol = W^T . g, reusing the column buffer, then scatter
            // back onto the input layout.
            E::gemm(
                k, spec.c_out, ncol,
                E::one(), w.data(), 1, k as isize,
                &gbuf, ncol as isize, 1,
                E::zero(), &mut col, ncol as isize, 1,
            );
            for s in 0..len {
                col2im_add(dx, base + s, spec, oh, ow, &col, ncol, s * cols);
            }
        }
        base += len;
    }
    ConvGrads { dx, dw }
}

// ---------------------------------------------------------------------------
// Tap-shift path for odd square kernels, stride 1, "same" padding
// ---------------------------------------------------------------------------
//
// Planes are copied once into a zero-padded buffer with a guard margin on
// both ends. Each kernel tap then contributes one GEMM over a shifted view
// of that buffer. Interior cells of every product read only true padded
// values; garbage reaches only border cells of padded outputs, which the
// compaction step drops, or is multiplied by the gradient's zero border.

struct Padded<E: Element> {
    buf: Vec<E>,
    base: usize,
    plane_p: usize,
    wp: usize,
    pad: usize,
}

impl<E: Element> Padded<E> {
    fn new(channels: usize, h: usize, w: usize, pad: usize) -> Self {
        let hp = h + 2 * pad;
        let wp = w + 2 * pad;
        let plane_p = hp * wp;
        let guard = pad * wp + pad;
        Padded {
            buf: vec![E::zero(); guard + channels * plane_p + guard],
            base: guard,
            plane_p,
            wp,
            pad,
        }
    }

    /// Copies sample `i` of `x` into the interior. Borders and guards hold
    /// zeros from allocation and are never written, so the buffer can be
    /// refilled sample after sample.
    fn load(&mut self, x: &Tensor<E>, i: usize) {
        let xs = x.shape();
        for c in 0..xs.c {
            let plane = x.plane(i, c);
            for y in 0..xs.h {
                let dst = self.base + c * self.plane_p + (y + self.pad) * self.wp + self.pad;
                self.buf[dst..dst + xs.w].copy_from_slice(&plane[y * xs.w..(y + 1) * xs.w]);
            }
        }
    }

    /// Copies the interior of channel `c` out to a dense `(h, w)` row range.
    fn store(&self, c: usize, h: usize, w: usize, dst: &mut [E]) {
        for y in 0..h {
            let src = self.base + c * self.plane_p + (y + self.pad) * self.wp + self.pad;
            dst[y * w..(y + 1) * w].copy_from_slice(&self.buf[src..src + w]);
        }
    }
}

/// Repacks `(c_out, c_in, k, k)` weights into one dense `(c_out, c_in)`
/// matrix per tap, so the hot GEMMs read contiguous operands.
fn pack_taps<E: Element>(spec: &ConvSpec, w: &Tensor<E>) -> Vec<E> {
    let kk = spec.kh * spec.kw;
    let block = spec.c_out * spec.c_in;
    let mut packed = vec![E::zero(); kk * block];
    for o in 0..spec.c_out {
        for ci in 0..spec.c_in {
            let src = (o * spec.c_in + ci) * kk;
            for tap in 0..kk {
                packed[tap * block + o * spec.c_in + ci] = w.data()[src + tap];
            }
        }
    }
    packed
}

fn tap_shift_forward<E: Element>(x: &Tensor<E>, spec: &ConvSpec, w: &Tensor<E>) -> Tensor<E> {
    let xs = x.shape();
    let (h, wd, p, k) = (xs.h, xs.w, spec.pad, spec.kh);
    let mut out = Tensor::zeros(Shape::new(xs.m, spec.c_out, h, wd));
    let mut xpad = Padded::<E>::new(spec.c_in, h, wd, p);
    let mut opad = Padded::<E>::new(spec.c_out, h, wd, p);
    let kk = k * k;
    let block = spec.c_out * spec.c_in;
    let packed = pack_taps(spec, w);
    for i in 0..xs.m {
        xpad.load(x, i);
        for tap in 0..kk {
            let (ky, kx) = (tap / k, tap % k);
            let d = (ky as isize - p as isize) * xpad.wp as isize + (kx as isize - p as isize);
            let b_start = (xpad.base as isize + d) as usize;
            let beta = if tap == 0 { E::zero() } else { E::one() };
            E::gemm(
                spec.c_out, spec.c_in, opad.plane_p,
                E::one(),
                &packed[tap * block..], spec.c_in as isize, 1,
                &xpad.buf[b_start..], xpad.plane_p as isize, 1,
                beta,
                &mut opad.buf[opad.base..], opad.plane_p as isize, 1,
            );
        }
        let per = spec.c_out * h * wd;
        let dst = &mut out.data_mut()[i * per..(i + 1) * per];
        for co in 0..spec.c_out {
            opad.store(co, h, wd, &mut dst[co * h * wd..(co + 1) * h * wd]);
        }
    }
    out
}

fn tap_shift_backward<E: Element>(
    x: &Tensor<E>,
    spec: &ConvSpec,
    w: &Tensor<E>,
    grad_out: &Tensor<E>,
    need_dx: bool,
) -> ConvGrads<E> {
    let xs = x.shape();
    let (h, wd, p, k) = (xs.h, xs.w, spec.pad, spec.kh);
    let kk = k * k;
    let block = spec.c_out * spec.c_in;
    // Dense per-tap accumulators keep every GEMM output contiguous; one
    // scatter at the end restores the kernel layout.
    let mut dwacc = vec![E::zero(); kk * block];
    let mut xpad = Padded::<E>::new(spec.c_in, h, wd, p);
    let mut gpad = Padded::<E>::new(spec.c_out, h, wd, p);
    for i in 0..xs.m {
        xpad.load(x, i);
        gpad.load(grad_out, i);
        for tap in 0..kk {
            let (ky, kx) = (tap / k, tap % k);
            let d = (ky as isize - p as isize) * xpad.wp as isize + (kx as isize - p as isize);
            // dW tap += g . shifted(x)^T; the gradient's zero border
            // cancels every junk read, so this accumulation is exact.
            E::gemm(
                spec.c_out, gpad.plane_p, spec.c_in,
                E::one(),
                &gpad.buf[gpad.base..], gpad.plane_p as isize, 1,
                &xpad.buf[(xpad.base as isize + d) as usize..], 1, xpad.plane_p as isize,
                E::one(),
                &mut dwacc[tap * block..], spec.c_in as isize, 1,
            );
        }
    }
    let mut dw = Tensor::zeros(spec.weight_shape());
    for o in 0..spec.c_out {
        for ci in 0..spec.c_in {
            for tap in 0..kk {
                dw.data_mut()[(o * spec.c_in + ci) * kk + tap] =
                    dwacc[tap * block + o * spec.c_in + ci];
            }
        }
    }
    // dx is itself a same-geometry convolution: the output gradient
    // against the kernel transposed over channels and flipped spatially.
    let dx = need_dx.then(|| {
        let mut wt = Tensor::zeros(Shape::new(spec.c_in, spec.c_out, k, k));
        for o in 0..spec.c_out {
            for ci in 0..spec.c_in {
                for ky in 0..k {
                    for kx in 0..k {
                        wt.data_mut()[(ci * spec.c_out + o) * kk + (k - 1 - ky) * k + (k - 1 - kx)] =
                            w.data()[(o * spec.c_in + ci) * kk + ky * k + kx];
                    }
                }
            }
        }
        let spec_t = ConvSpec::square(spec.c_in, spec.c_out, k, 1, p)
            .expect("transposing a valid same-size geometry keeps it valid");
        tap_shift_forward(grad_out, &spec_t, &wt)
    });
    ConvGrads { dx, dw }
}
