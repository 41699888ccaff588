//! Forward and backward kernels for the fixed layer set.

use crate::error::{Error, Result};
use crate::nn::tensor::{gemm, MatView, Scalar, Tensor};

/// Probability clamp used inside the logarithms of the loss.
pub const LOSS_EPS: f64 = 1e-12;

// ---------------------------------------------------------------------------
// conv2d: odd square kernel, stride 1, zero padding k/2.
//
// The input plane is copied into a zero-bordered buffer of width Wp = W + 2p.
// Output position q = r * Wp + c then reads input q + s(t) for kernel tap t,
// where s(ky, kx) = ky * Wp + kx; the columns c >= W of this extended output
// are discarded. Rather than one GEMM per tap (which re-packs the whole input
// each time), all taps are stacked into the rows of a single GEMM and the
// shifts are applied to the small side: the per-tap products in the forward
// pass, the output gradient in the backward pass. Work is chunked along q.

/// Elements per chunk buffer.
const CHUNK_ELEMS: usize = 1 << 20;

fn chunk_len(rows: usize) -> usize {
    (CHUNK_ELEMS / rows.max(1)).max(256)
}

struct ConvGeom {
    pad: usize,
    h: usize,
    w: usize,
    wp: usize,
    /// Per-channel stride of the padded buffer.
    stride: usize,
    /// Extended output columns `h * wp`.
    ext: usize,
}

impl ConvGeom {
    fn new(k: usize, h: usize, w: usize) -> Self {
        let pad = k / 2;
        let wp = w + 2 * pad;
        let hp = h + 2 * pad;
        ConvGeom {
            pad,
            h,
            w,
            wp,
            stride: hp * wp + 2 * pad,
            ext: h * wp,
        }
    }
}

impl ConvGeom {
    fn shifts(&self, k: usize) -> Vec<usize> {
        (0..k * k).map(|t| (t / k) * self.wp + t % k).collect()
    }
}

fn check_conv<T: Scalar>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<usize> {
    let [cout, cin, kh, kw] = weights.shape();
    if kh != kw || kh % 2 == 0 {
        return Err(Error::Shape(format!(
            "conv kernel must be odd and square, got {kh}x{kw}"
        )));
    }
    if cin != input.channels() {
        return Err(Error::Shape(format!(
            "conv expects {cin} input channels, got {}",
            input.channels()
        )));
    }
    if bias.len() != cout {
        return Err(Error::Shape(format!(
            "conv bias has {} entries for {cout} outputs",
            bias.len()
        )));
    }
    Ok(kh)
}

fn pad_sample<T: Scalar>(input: &Tensor<T>, n: usize, g: &ConvGeom) -> Vec<T> {
    let cin = input.channels();
    let mut buf = vec![T::zero(); cin * g.stride];
    for c in 0..cin {
        let src = input.plane_slice(n, c);
        let dst = &mut buf[c * g.stride..];
        for r in 0..g.h {
            let o = (r + g.pad) * g.wp + g.pad;
            dst[o..o + g.w].copy_from_slice(&src[r * g.w..(r + 1) * g.w]);
        }
    }
    buf
}

pub fn conv2d<T: Scalar>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<Tensor<T>> {
    let k = check_conv(input, weights, bias)?;
    let [nb, cin, h, w] = input.shape();
    let cout = weights.batch();
    let mut out = Tensor::zeros([nb, cout, h, w]);
    if k == 1 {
        for n in 0..nb {
            let x = input.sample(n);
            let plane = h * w;
            let y = &mut out.data_mut()[n * cout * plane..(n + 1) * cout * plane];
            gemm(
                T::one(),
                weights.data(),
                MatView {
                    offset: 0,
                    rows: cout,
                    cols: cin,
                    rs: cin,
                    cs: 1,
                },
                x,
                MatView {
                    offset: 0,
                    rows: cin,
                    cols: plane,
                    rs: plane,
                    cs: 1,
                },
                T::zero(),
                y,
                MatView {
                    offset: 0,
                    rows: cout,
                    cols: plane,
                    rs: plane,
                    cs: 1,
                },
            );
            for o in 0..cout {
                let b = bias.data()[o];
                for v in &mut y[o * plane..(o + 1) * plane] {
                    *v = *v + b;
                }
            }
        }
        return Ok(out);
    }

    let g = ConvGeom::new(k, h, w);
    let kk = k * k;
    let shifts = g.shifts(k);
    let smax = shifts[kk - 1];
    // weights with rows ordered (tap, out channel)
    let mut wr = vec![T::zero(); kk * cout * cin];
    for o in 0..cout {
        for c in 0..cin {
            for t in 0..kk {
                wr[(t * cout + o) * cin + c] = weights.data()[(o * cin + c) * kk + t];
            }
        }
    }
    let chunk = chunk_len(kk * cout);
    let mut prod = vec![T::zero(); kk * cout * (chunk + smax)];
    let mut ext = vec![T::zero(); cout * g.ext];
    for n in 0..nb {
        let xpad = pad_sample(input, n, &g);
        let mut q0 = 0;
        while q0 < g.ext {
            let len = chunk.min(g.ext - q0);
            let span = len + smax;
            gemm(
                T::one(),
                &wr,
                MatView {
                    offset: 0,
                    rows: kk * cout,
                    cols: cin,
                    rs: cin,
                    cs: 1,
                },
                &xpad,
                MatView {
                    offset: q0,
                    rows: cin,
                    cols: span,
                    rs: g.stride,
                    cs: 1,
                },
                T::zero(),
                &mut prod,
                MatView {
                    offset: 0,
                    rows: kk * cout,
                    cols: span,
                    rs: span,
                    cs: 1,
                },
            );
            for o in 0..cout {
                let dst = &mut ext[o * g.ext + q0..o * g.ext + q0 + len];
                dst.iter_mut().for_each(|v| *v = T::zero());
                for (t, &sh) in shifts.iter().enumerate() {
                    let row = (t * cout + o) * span + sh;
                    for (d, &v) in dst.iter_mut().zip(&prod[row..row + len]) {
                        *d = *d + v;
                    }
                }
            }
            q0 += len;
        }
        for o in 0..cout {
            let b = bias.data()[o];
            let dst = out.plane_slice_mut(n, o);
            let src = &ext[o * g.ext..(o + 1) * g.ext];
            for r in 0..h {
                for c in 0..w {
                    dst[r * w + c] = src[r * g.wp + c] + b;
                }
            }
        }
    }
    Ok(out)
}

pub struct ConvGrads<T> {
    /// `None` when the input gradient was not requested.
    pub input: Option<Tensor<T>>,
    pub weights: Tensor<T>,
    pub bias: Tensor<T>,
}

/// Exact adjoint of [`conv2d`].
pub fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    grad_out: &Tensor<T>,
    need_input: bool,
) -> Result<ConvGrads<T>> {
    let [cout, cin, k, _] = weights.shape();
    let [nb, _, h, w] = input.shape();
    if grad_out.shape() != [nb, cout, h, w] {
        return Err(Error::Shape(format!(
            "conv grad {:?} does not match output {:?}",
            grad_out.shape(),
            [nb, cout, h, w]
        )));
    }
    let mut gx = Tensor::zeros(input.shape());
    let mut gw = Tensor::zeros(weights.shape());
    let mut gb = Tensor::zeros([1, 1, 1, cout]);
    for n in 0..nb {
        for o in 0..cout {
            let s = grad_out
                .plane_slice(n, o)
                .iter()
                .fold(T::zero(), |a, &b| a + b);
            gb.data_mut()[o] = gb.data()[o] + s;
        }
    }

    if k == 1 {
        let plane = h * w;
        for n in 0..nb {
            let gy = &grad_out.data()[n * cout * plane..(n + 1) * cout * plane];
            gemm(
                T::one(),
                gy,
                MatView {
                    offset: 0,
                    rows: cout,
                    cols: plane,
                    rs: plane,
                    cs: 1,
                },
                input.sample(n),
                MatView {
                    offset: 0,
                    rows: plane,
                    cols: cin,
                    rs: 1,
                    cs: plane,
                },
                T::one(),
                gw.data_mut(),
                MatView {
                    offset: 0,
                    rows: cout,
                    cols: cin,
                    rs: cin,
                    cs: 1,
                },
            );
            if !need_input {
                continue;
            }
            let gxn = &mut gx.data_mut()[n * cin * plane..(n + 1) * cin * plane];
            gemm(
                T::one(),
                weights.data(),
                MatView {
                    offset: 0,
                    rows: cin,
                    cols: cout,
                    rs: 1,
                    cs: cin,
                },
                gy,
                MatView {
                    offset: 0,
                    rows: cout,
                    cols: plane,
                    rs: plane,
                    cs: 1,
                },
                T::zero(),
                gxn,
                MatView {
                    offset: 0,
                    rows: cin,
                    cols: plane,
                    rs: plane,
                    cs: 1,
                },
            );
        }
        return Ok(ConvGrads {
            input: need_input.then_some(gx),
            weights: gw,
            bias: gb,
        });
    }

    let g = ConvGeom::new(k, h, w);
    let kk = k * k;
    let shifts = g.shifts(k);
    let total = g.ext + shifts[kk - 1];
    debug_assert_eq!(total, g.stride);
    // wt[c, (tap, o)] = W[o, c, tap]
    let mut wt = vec![T::zero(); cin * kk * cout];
    for o in 0..cout {
        for c in 0..cin {
            for t in 0..kk {
                wt[c * kk * cout + t * cout + o] = weights.data()[(o * cin + c) * kk + t];
            }
        }
    }
    // weight gradient with rows ordered (tap, out channel)
    let mut gwr = vec![T::zero(); kk * cout * cin];
    let mut gext = vec![T::zero(); cout * g.ext];
    let mut gpad = vec![T::zero(); cin * g.stride];
    let chunk = chunk_len(kk * cout);
    let mut shifted = vec![T::zero(); kk * cout * chunk];
    for n in 0..nb {
        for o in 0..cout {
            let src = grad_out.plane_slice(n, o);
            let dst = &mut gext[o * g.ext..(o + 1) * g.ext];
            for r in 0..h {
                dst[r * g.wp..r * g.wp + w].copy_from_slice(&src[r * w..(r + 1) * w]);
            }
        }
        let xpad = pad_sample(input, n, &g);
        // j runs over padded-buffer positions; input position j receives
        // gradient from output position j - s(t) through tap t
        let mut j0 = 0;
        while j0 < total {
            let len = chunk.min(total - j0);
            for (t, &sh) in shifts.iter().enumerate() {
                for o in 0..cout {
                    let row = &mut shifted[(t * cout + o) * len..(t * cout + o + 1) * len];
                    row.iter_mut().for_each(|v| *v = T::zero());
                    // q = j - sh must lie in [0, ext)
                    let lo = j0.max(sh);
                    let hi = (j0 + len).min(g.ext + sh);
                    if lo < hi {
                        let src = &gext[o * g.ext + lo - sh..o * g.ext + hi - sh];
                        row[lo - j0..hi - j0].copy_from_slice(src);
                    }
                }
            }
            gemm(
                T::one(),
                &shifted,
                MatView {
                    offset: 0,
                    rows: kk * cout,
                    cols: len,
                    rs: len,
                    cs: 1,
                },
                &xpad,
                MatView {
                    offset: j0,
                    rows: len,
                    cols: cin,
                    rs: 1,
                    cs: g.stride,
                },
                T::one(),
                &mut gwr,
                MatView {
                    offset: 0,
                    rows: kk * cout,
                    cols: cin,
                    rs: cin,
                    cs: 1,
                },
            );
            if need_input {
                gemm(
                    T::one(),
                    &wt,
                    MatView {
                        offset: 0,
                        rows: cin,
                        cols: kk * cout,
                        rs: kk * cout,
                        cs: 1,
                    },
                    &shifted,
                    MatView {
                        offset: 0,
                        rows: kk * cout,
                        cols: len,
                        rs: len,
                        cs: 1,
                    },
                    T::zero(),
                    &mut gpad,
                    MatView {
                        offset: j0,
                        rows: cin,
                        cols: len,
                        rs: g.stride,
                        cs: 1,
                    },
                );
            }
            j0 += len;
        }
        if !need_input {
            continue;
        }
        for c in 0..cin {
            let src = &gpad[c * g.stride..];
            let dst = gx.plane_slice_mut(n, c);
            for r in 0..h {
                let o = (r + g.pad) * g.wp + g.pad;
                dst[r * w..(r + 1) * w].copy_from_slice(&src[o..o + w]);
            }
        }
    }
    for o in 0..cout {
        for c in 0..cin {
            for t in 0..kk {
                gw.data_mut()[(o * cin + c) * kk + t] = gwr[(t * cout + o) * cin + c];
            }
        }
    }
    Ok(ConvGrads {
        input: need_input.then_some(gx),
        weights: gw,
        bias: gb,
    })
}

// ---------------------------------------------------------------------------
// 2x2 max pooling, stride 2. Odd trailing rows/cols form partial windows.

pub struct PoolOutput<T> {
    pub output: Tensor<T>,
    /// Flat input index of each output's maximum.
    pub argmax: Vec<usize>,
}

pub fn maxpool2<T: Scalar>(input: &Tensor<T>) -> PoolOutput<T> {
    let [nb, ch, h, w] = input.shape();
    let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
    let mut output = Tensor::zeros([nb, ch, oh, ow]);
    let mut argmax = Vec::with_capacity(nb * ch * oh * ow);
    let data = input.data();
    let mut o = 0;
    for n in 0..nb {
        for c in 0..ch {
            let base = (n * ch + c) * h * w;
            for r in 0..oh {
                for col in 0..ow {
                    let mut best = base + 2 * r * w + 2 * col;
                    // row-major scan; strict > keeps the first maximum
                    for (dr, dc) in [(0, 1), (1, 0), (1, 1)] {
                        let (rr, cc) = (2 * r + dr, 2 * col + dc);
                        if rr < h && cc < w {
                            let idx = base + rr * w + cc;
                            if data[idx] > data[best] {
                                best = idx;
                            }
                        }
                    }
                    output.data_mut()[o] = data[best];
                    argmax.push(best);
                    o += 1;
                }
            }
        }
    }
    PoolOutput { output, argmax }
}

pub fn maxpool2_backward<T: Scalar>(
    input_shape: [usize; 4],
    argmax: &[usize],
    grad_out: &Tensor<T>,
) -> Tensor<T> {
    let mut gx = Tensor::zeros(input_shape);
    let d = gx.data_mut();
    for (&i, &g) in argmax.iter().zip(grad_out.data()) {
        d[i] = d[i] + g;
    }
    gx
}

// ---------------------------------------------------------------------------
// x2 bilinear upsampling, align_corners = false: output index j samples input
// coordinate max(0, (j + 0.5) / 2 - 0.5), clamped at the far edge.

#[derive(Debug, Clone, Copy)]
struct Tap<T> {
    lo: usize,
    hi: usize,
    frac: T,
}

fn taps<T: Scalar>(n: usize) -> Vec<Tap<T>> {
    (0..2 * n)
        .map(|j| {
            let src = ((j as f64 + 0.5) / 2.0 - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(n - 1);
            let hi = (lo + 1).min(n - 1);
            let frac = if hi == lo { 0.0 } else { src - lo as f64 };
            Tap {
                lo,
                hi,
                frac: T::from_f64(frac),
            }
        })
        .collect()
}

pub fn upsample_bilinear2<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    let [nb, ch, h, w] = input.shape();
    let (ty, tx) = (taps::<T>(h), taps::<T>(w));
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = Tensor::zeros([nb, ch, oh, ow]);
    let mut rowbuf = vec![T::zero(); h * ow];
    for n in 0..nb {
        for c in 0..ch {
            let src = input.plane_slice(n, c);
            for r in 0..h {
                for (j, t) in tx.iter().enumerate() {
                    let (a, b) = (src[r * w + t.lo], src[r * w + t.hi]);
                    rowbuf[r * ow + j] = a + t.frac * (b - a);
                }
            }
            let dst = out.plane_slice_mut(n, c);
            for (i, t) in ty.iter().enumerate() {
                for j in 0..ow {
                    let (a, b) = (rowbuf[t.lo * ow + j], rowbuf[t.hi * ow + j]);
                    dst[i * ow + j] = a + t.frac * (b - a);
                }
            }
        }
    }
    out
}

/// Transpose of the linear map [`upsample_bilinear2`].
pub fn upsample_bilinear2_backward<T: Scalar>(
    input_shape: [usize; 4],
    grad_out: &Tensor<T>,
) -> Tensor<T> {
    let [nb, ch, h, w] = input_shape;
    let (ty, tx) = (taps::<T>(h), taps::<T>(w));
    let ow = 2 * w;
    let mut gx = Tensor::zeros(input_shape);
    let mut rowbuf = vec![T::zero(); h * ow];
    for n in 0..nb {
        for c in 0..ch {
            rowbuf.iter_mut().for_each(|v| *v = T::zero());
            let g = grad_out.plane_slice(n, c);
            for (i, t) in ty.iter().enumerate() {
                for j in 0..ow {
                    let v = g[i * ow + j];
                    rowbuf[t.lo * ow + j] = rowbuf[t.lo * ow + j] + (T::one() - t.frac) * v;
                    rowbuf[t.hi * ow + j] = rowbuf[t.hi * ow + j] + t.frac * v;
                }
            }
            let dst = gx.plane_slice_mut(n, c);
            for r in 0..h {
                for (j, t) in tx.iter().enumerate() {
                    let v = rowbuf[r * ow + j];
                    dst[r * w + t.lo] = dst[r * w + t.lo] + (T::one() - t.frac) * v;
                    dst[r * w + t.hi] = dst[r * w + t.hi] + t.frac * v;
                }
            }
        }
    }
    gx
}

// ---------------------------------------------------------------------------
// Pointwise nonlinearities

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pointwise {
    Relu,
    Sigmoid,
}

pub fn sigmoid<T: Scalar>(x: T) -> T {
    let one = T::one();
    let y = if x >= T::zero() {
        one / (one + (-x).exp())
    } else {
        let e = x.exp();
        e / (one + e)
    };
    // keep the result strictly inside (0, 1)
    let top = one - T::epsilon() / T::from_f64(2.0);
    y.max(T::min_positive_value()).min(top)
}

pub fn pointwise<T: Scalar>(input: &Tensor<T>, kind: Pointwise) -> Tensor<T> {
    match kind {
        Pointwise::Relu => input.map(|v| if v > T::zero() { v } else { T::zero() }),
        Pointwise::Sigmoid => input.map(sigmoid),
    }
}

/// `input` is the layer input for relu and the layer output for sigmoid.
pub fn pointwise_backward<T: Scalar>(
    kind: Pointwise,
    saved: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Tensor<T> {
    let mut g = grad_out.clone();
    match kind {
        Pointwise::Relu => {
            for (gv, &x) in g.data_mut().iter_mut().zip(saved.data()) {
                if x <= T::zero() {
                    *gv = T::zero();
                }
            }
        }
        Pointwise::Sigmoid => {
            for (gv, &y) in g.data_mut().iter_mut().zip(saved.data()) {
                *gv = *gv * y * (T::one() - y);
            }
        }
    }
    g
}

pub fn relu_inplace<T: Scalar>(t: &mut Tensor<T>) {
    for v in t.data_mut() {
        if *v <= T::zero() {
            *v = T::zero();
        }
    }
}

// ---------------------------------------------------------------------------
// Channel concatenation

pub fn concat_channels<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let [na, ca, ha, wa] = a.shape();
    let [nb, cb, hb, wb] = b.shape();
    if (na, ha, wa) != (nb, hb, wb) {
        return Err(Error::Shape(format!(
            "concat needs equal batch and spatial dims: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut data = Vec::with_capacity(a.len() + b.len());
    for n in 0..na {
        data.extend_from_slice(a.sample(n));
        data.extend_from_slice(b.sample(n));
    }
    Tensor::from_vec([na, ca + cb, ha, wa], data)
}

/// Splits a concatenated gradient back into its `a` (first `ca` channels) and `b` parts.
pub fn split_channels<T: Scalar>(grad: &Tensor<T>, ca: usize) -> (Tensor<T>, Tensor<T>) {
    let [n, c, h, w] = grad.shape();
    let cb = c - ca;
    let p = h * w;
    let mut a = Vec::with_capacity(n * ca * p);
    let mut b = Vec::with_capacity(n * cb * p);
    for i in 0..n {
        let s = grad.sample(i);
        a.extend_from_slice(&s[..ca * p]);
        b.extend_from_slice(&s[ca * p..]);
    }
    (
        Tensor::from_vec([n, ca, h, w], a).expect("split a"),
        Tensor::from_vec([n, cb, h, w], b).expect("split b"),
    )
}

// ---------------------------------------------------------------------------
// Masked binary cross-entropy (negative log-likelihood of Bernoulli labels)

fn check_loss_inputs<T: Scalar>(probs: &Tensor<T>, labels: &[f32], mask: &[bool]) -> Result<usize> {
    if probs.len() != labels.len() || probs.len() != mask.len() {
        return Err(Error::Shape(format!(
            "loss inputs disagree: {} probabilities, {} labels, {} mask cells",
            probs.len(),
            labels.len(),
            mask.len()
        )));
    }
    let count = mask.iter().filter(|m| **m).count();
    if count == 0 {
        return Err(Error::EmptyMask);
    }
    Ok(count)
}

/// Sum over valid cells of `-[y log p + (1 - y) log(1 - p)]`, with both
/// logarithm arguments clamped at [`LOSS_EPS`]. Also returns the valid count.
pub fn masked_bce_sum<T: Scalar>(
    probs: &Tensor<T>,
    labels: &[f32],
    mask: &[bool],
) -> Result<(f64, usize)> {
    let count = check_loss_inputs(probs, labels, mask)?;
    let mut sum = 0.0f64;
    for ((&p, &y), &m) in probs.data().iter().zip(labels).zip(mask) {
        if m {
            let p = p.as_f64();
            let y = y as f64;
            let mut term = 0.0;
            if y != 0.0 {
                term += y * p.max(LOSS_EPS).ln();
            }
            if y != 1.0 {
                term += (1.0 - y) * (1.0 - p).max(LOSS_EPS).ln();
            }
            sum -= term;
        }
    }
    Ok((sum, count))
}

/// Mean masked binary cross-entropy.
pub fn masked_bce_loss<T: Scalar>(probs: &Tensor<T>, labels: &[f32], mask: &[bool]) -> Result<f64> {
    let (sum, count) = masked_bce_sum(probs, labels, mask)?;
    Ok(sum / count as f64)
}

/// Gradient of `scale * sum_valid bce(sigmoid(z))` with respect to the
/// pre-sigmoid logits `z`, given `probs = sigmoid(z)`.
pub fn masked_bce_grad_logits<T: Scalar>(
    probs: &Tensor<T>,
    labels: &[f32],
    mask: &[bool],
    scale: f64,
) -> Result<Tensor<T>> {
    check_loss_inputs(probs, labels, mask)?;
    let mut g = Tensor::zeros(probs.shape());
    for (((gv, &p), &y), &m) in g
        .data_mut()
        .iter_mut()
        .zip(probs.data())
        .zip(labels)
        .zip(mask)
    {
        if m {
            let p = p.as_f64();
            let y = y as f64;
            let mut d = 0.0;
            if p > LOSS_EPS {
                d -= y * (1.0 - p);
            }
            if 1.0 - p > LOSS_EPS {
                d += (1.0 - y) * p;
            }
            *gv = T::from_f64(d * scale);
        }
    }
    Ok(g)
}
