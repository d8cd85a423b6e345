//! Forward and vector–Jacobian kernels on plain tensors.
//!
//! The gradient tape wraps these; inference code may also call them directly.
//! Convolutions zero-pad, sampling clamps to the border.

use crate::counter;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Leaky rectifier slope for negative inputs.
pub const LEAKY_SLOPE: f64 = 0.1;

fn conv_dims<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
) -> Result<(usize, usize, usize, usize, usize)> {
    let (cin, h, w) = input.chw()?;
    let [cout, kcin, kh, kw] = kernel.shape()[..] else {
        return Err(Error::shape("conv2d", input.shape(), kernel.shape()));
    };
    if kcin != cin || kh != kw || kh % 2 == 0 {
        return Err(Error::shape("conv2d", input.shape(), kernel.shape()));
    }
    Ok((cin, cout, h, w, kh))
}

/// Valid output index range `[lo, hi)` along one axis for kernel tap `t` with radius `r`.
#[inline]
fn tap_range(t: usize, r: usize, n: usize) -> (usize, usize) {
    let lo = r.saturating_sub(t).min(n);
    let hi = (n + r).saturating_sub(t).min(n);
    (lo, hi.max(lo))
}

/// Same-size, stride-1, zero-padded 2-D convolution (cross-correlation).
pub fn conv2d<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    let (cin, cout, h, w, k) = conv_dims(input, kernel)?;
    if let Some(b) = bias {
        if b.len() != cout {
            return Err(Error::shape("conv2d bias", kernel.shape(), b.shape()));
        }
    }
    let r = k / 2;
    let x = input.data();
    let kd = kernel.data();
    let mut out = vec![T::zero(); cout * h * w];
    for co in 0..cout {
        let o = &mut out[co * h * w..(co + 1) * h * w];
        if let Some(b) = bias {
            o.fill(b.data()[co]);
        }
        for ci in 0..cin {
            let xi = &x[ci * h * w..(ci + 1) * h * w];
            for ky in 0..k {
                let (y_lo, y_hi) = tap_range(ky, r, h);
                for kx in 0..k {
                    let wv = kd[((co * cin + ci) * k + ky) * k + kx];
                    let (x_lo, x_hi) = tap_range(kx, r, w);
                    if x_lo == x_hi {
                        continue;
                    }
                    for y in y_lo..y_hi {
                        let sy = y + ky - r;
                        let orow = &mut o[y * w + x_lo..y * w + x_hi];
                        let irow = &xi[sy * w + x_lo + kx - r..sy * w + x_hi + kx - r];
                        for (ov, &iv) in orow.iter_mut().zip(irow) {
                            *ov += wv * iv;
                        }
                    }
                }
            }
        }
    }
    counter::add((h * w * cout * cin * k * k) as u64);
    Tensor::from_vec(&[cout, h, w], out)
}

/// Gradients of [`conv2d`] with respect to input, kernel and bias.
pub fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let (cin, cout, h, w, k) = conv_dims(input, kernel).expect("checked in forward");
    let r = k / 2;
    let x = input.data();
    let kd = kernel.data();
    let g = grad_out.data();
    let mut gx = vec![T::zero(); cin * h * w];
    let mut gk = vec![T::zero(); kernel.len()];
    let mut gb = vec![T::zero(); cout];
    for co in 0..cout {
        let go = &g[co * h * w..(co + 1) * h * w];
        gb[co] = go.iter().copied().sum();
        for ci in 0..cin {
            let xi = &x[ci * h * w..(ci + 1) * h * w];
            let gxi = &mut gx[ci * h * w..(ci + 1) * h * w];
            for ky in 0..k {
                let (y_lo, y_hi) = tap_range(ky, r, h);
                for kx in 0..k {
                    let kidx = ((co * cin + ci) * k + ky) * k + kx;
                    let wv = kd[kidx];
                    let (x_lo, x_hi) = tap_range(kx, r, w);
                    if x_lo == x_hi {
                        continue;
                    }
                    let mut acc = T::zero();
                    for y in y_lo..y_hi {
                        let sy = y + ky - r;
                        let grow = &go[y * w + x_lo..y * w + x_hi];
                        let s = sy * w + x_lo + kx - r;
                        let e = sy * w + x_hi + kx - r;
                        for ((gxv, &iv), &gv) in gxi[s..e].iter_mut().zip(&xi[s..e]).zip(grow) {
                            *gxv += wv * gv;
                            acc += gv * iv;
                        }
                    }
                    gk[kidx] = acc;
                }
            }
        }
    }
    (
        Tensor::from_vec(input.shape(), gx).unwrap(),
        Tensor::from_vec(kernel.shape(), gk).unwrap(),
        Tensor::from_vec(&[cout], gb).unwrap(),
    )
}

fn depthwise_dims<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
) -> Result<(usize, usize, usize, usize)> {
    let (c, h, w) = input.chw()?;
    let [kc, kh, kw] = kernel.shape()[..] else {
        return Err(Error::shape("depthwise_conv2d", input.shape(), kernel.shape()));
    };
    if kc != c || kh != kw || kh % 2 == 0 {
        return Err(Error::shape("depthwise_conv2d", input.shape(), kernel.shape()));
    }
    Ok((c, h, w, kh))
}

/// Per-channel spatial convolution with a `C×k×k` kernel.
pub fn depthwise_conv2d<T: Scalar>(input: &Tensor<T>, kernel: &Tensor<T>) -> Result<Tensor<T>> {
    let (c, h, w, k) = depthwise_dims(input, kernel)?;
    let r = k / 2;
    let x = input.data();
    let kd = kernel.data();
    let mut out = vec![T::zero(); c * h * w];
    for ch in 0..c {
        let xi = &x[ch * h * w..(ch + 1) * h * w];
        let o = &mut out[ch * h * w..(ch + 1) * h * w];
        for ky in 0..k {
            let (y_lo, y_hi) = tap_range(ky, r, h);
            for kx in 0..k {
                let wv = kd[(ch * k + ky) * k + kx];
                let (x_lo, x_hi) = tap_range(kx, r, w);
                if x_lo == x_hi {
                    continue;
                }
                for y in y_lo..y_hi {
                    let sy = y + ky - r;
                    let orow = &mut o[y * w + x_lo..y * w + x_hi];
                    let irow = &xi[sy * w + x_lo + kx - r..sy * w + x_hi + kx - r];
                    for (ov, &iv) in orow.iter_mut().zip(irow) {
                        *ov += wv * iv;
                    }
                }
            }
        }
    }
    counter::add((h * w * c * k * k) as u64);
    Tensor::from_vec(&[c, h, w], out)
}

pub fn depthwise_conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>) {
    let (c, h, w, k) = depthwise_dims(input, kernel).expect("checked in forward");
    let r = k / 2;
    let x = input.data();
    let kd = kernel.data();
    let g = grad_out.data();
    let mut gx = vec![T::zero(); c * h * w];
    let mut gk = vec![T::zero(); kernel.len()];
    for ch in 0..c {
        let xi = &x[ch * h * w..(ch + 1) * h * w];
        let go = &g[ch * h * w..(ch + 1) * h * w];
        let gxi = &mut gx[ch * h * w..(ch + 1) * h * w];
        for ky in 0..k {
            let (y_lo, y_hi) = tap_range(ky, r, h);
            for kx in 0..k {
                let kidx = (ch * k + ky) * k + kx;
                let wv = kd[kidx];
                let (x_lo, x_hi) = tap_range(kx, r, w);
                if x_lo == x_hi {
                    continue;
                }
                let mut acc = T::zero();
                for y in y_lo..y_hi {
                    let sy = y + ky - r;
                    let grow = &go[y * w + x_lo..y * w + x_hi];
                    let s = sy * w + x_lo + kx - r;
                    let e = sy * w + x_hi + kx - r;
                    for ((gxv, &iv), &gv) in gxi[s..e].iter_mut().zip(&xi[s..e]).zip(grow) {
                        *gxv += wv * gv;
                        acc += gv * iv;
                    }
                }
                gk[kidx] = acc;
            }
        }
    }
    (
        Tensor::from_vec(input.shape(), gx).unwrap(),
        Tensor::from_vec(kernel.shape(), gk).unwrap(),
    )
}

/// Depthwise `k×k` convolution followed by `1×1` channel mixing (`pw` is `C_out×C`).
pub fn depthwise_separable<T: Scalar>(
    input: &Tensor<T>,
    dw: &Tensor<T>,
    pw: &Tensor<T>,
) -> Result<Tensor<T>> {
    let spatial = depthwise_conv2d(input, dw)?;
    let (cout, c) = match pw.shape()[..] {
        [o, i] => (o, i),
        [o, i, 1, 1] => (o, i),
        _ => return Err(Error::shape("depthwise_separable", input.shape(), pw.shape())),
    };
    let pw4 = pw.reshape(&[cout, c, 1, 1])?;
    conv2d(&spatial, &pw4, None)
}

/// `p×p` block mean over the last two axes. Extents must be divisible by `p`.
pub fn avg_pool<T: Scalar>(input: &Tensor<T>, p: usize) -> Result<Tensor<T>> {
    let (lead, h, w) = split_hw(input.shape())?;
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(Error::invalid(format!(
            "avg_pool: extents {h}×{w} not divisible by window {p}; pad with zeros to a multiple of {p} first"
        )));
    }
    let (oh, ow) = (h / p, w / p);
    let inv = T::one() / T::lit((p * p) as f64);
    let x = input.data();
    let mut out = vec![T::zero(); lead * oh * ow];
    for l in 0..lead {
        for by in 0..oh {
            for bx in 0..ow {
                let mut acc = T::zero();
                for dy in 0..p {
                    let row = l * h * w + (by * p + dy) * w + bx * p;
                    for &v in &x[row..row + p] {
                        acc += v;
                    }
                }
                out[(l * oh + by) * ow + bx] = acc * inv;
            }
        }
    }
    let mut shape = input.shape().to_vec();
    let n = shape.len();
    shape[n - 2] = oh;
    shape[n - 1] = ow;
    Tensor::from_vec(&shape, out)
}

pub fn avg_pool_backward<T: Scalar>(input_shape: &[usize], p: usize, grad_out: &Tensor<T>) -> Tensor<T> {
    let (lead, h, w) = split_hw(input_shape).expect("checked in forward");
    let (oh, ow) = (h / p, w / p);
    let inv = T::one() / T::lit((p * p) as f64);
    let g = grad_out.data();
    let mut out = vec![T::zero(); lead * h * w];
    for l in 0..lead {
        for y in 0..h {
            for x in 0..w {
                out[(l * h + y) * w + x] = g[(l * oh + y / p) * ow + x / p] * inv;
            }
        }
    }
    Tensor::from_vec(input_shape, out).unwrap()
}

fn split_hw(shape: &[usize]) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 {
        return Err(Error::invalid(format!("expected at least 2 axes, got {shape:?}")));
    }
    let n = shape.len();
    Ok((shape[..n - 2].iter().product(), shape[n - 2], shape[n - 1]))
}

/// Mean over every `win×win` window fully inside an `H×W` map ("valid" box filter).
pub fn box_mean_valid<T: Scalar>(input: &Tensor<T>, win: usize) -> Result<Tensor<T>> {
    let (h, w) = input.hw()?;
    if win == 0 || win > h || win > w {
        return Err(Error::invalid(format!("box window {win} does not fit {h}×{w}")));
    }
    let (oh, ow) = (h - win + 1, w - win + 1);
    let x = input.data();
    let inv = T::one() / T::lit((win * win) as f64);
    // Column sums first, then a sliding sum along rows, both in fixed order.
    let mut col = vec![T::zero(); oh * w];
    for y in 0..oh {
        for x_ in 0..w {
            let mut acc = T::zero();
            for dy in 0..win {
                acc += x[(y + dy) * w + x_];
            }
            col[y * w + x_] = acc;
        }
    }
    let mut out = vec![T::zero(); oh * ow];
    for y in 0..oh {
        for x_ in 0..ow {
            let mut acc = T::zero();
            for dx in 0..win {
                acc += col[y * w + x_ + dx];
            }
            out[y * ow + x_] = acc * inv;
        }
    }
    Tensor::from_vec(&[oh, ow], out)
}

pub fn box_mean_valid_backward<T: Scalar>(h: usize, w: usize, win: usize, grad_out: &Tensor<T>) -> Tensor<T> {
    let (oh, ow) = (h - win + 1, w - win + 1);
    let inv = T::one() / T::lit((win * win) as f64);
    let g = grad_out.data();
    let mut out = vec![T::zero(); h * w];
    for y in 0..oh {
        for x in 0..ow {
            let gv = g[y * ow + x] * inv;
            for dy in 0..win {
                for v in &mut out[(y + dy) * w + x..(y + dy) * w + x + win] {
                    *v += gv;
                }
            }
        }
    }
    Tensor::from_vec(&[h, w], out).unwrap()
}

/// Softmax along the last axis with max subtraction.
pub fn softmax<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    let n = *input.shape().last().unwrap();
    let mut out = input.data().to_vec();
    for row in out.chunks_mut(n) {
        let m = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
        let mut s = T::zero();
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        for v in row.iter_mut() {
            *v = *v / s;
        }
    }
    Tensor::from_vec(input.shape(), out).unwrap()
}

pub fn softmax_backward<T: Scalar>(output: &Tensor<T>, grad_out: &Tensor<T>) -> Tensor<T> {
    let n = *output.shape().last().unwrap();
    let mut gx = vec![T::zero(); output.len()];
    for ((gr, yr), gor) in gx
        .chunks_mut(n)
        .zip(output.data().chunks(n))
        .zip(grad_out.data().chunks(n))
    {
        let dot: T = yr.iter().zip(gor).map(|(&y, &g)| y * g).sum();
        for ((gv, &y), &g) in gr.iter_mut().zip(yr).zip(gor) {
            *gv = y * (g - dot);
        }
    }
    Tensor::from_vec(output.shape(), gx).unwrap()
}

struct BilinearTap<T> {
    i00: usize,
    i01: usize,
    i10: usize,
    i11: usize,
    fx: T,
    fy: T,
    x_free: bool,
    y_free: bool,
}

#[inline]
fn bilinear_tap<T: Scalar>(x: usize, y: usize, dx: T, dy: T, h: usize, w: usize) -> BilinearTap<T> {
    let xmax = T::lit((w - 1) as f64);
    let ymax = T::lit((h - 1) as f64);
    let px = T::lit(x as f64) + dx;
    let py = T::lit(y as f64) + dy;
    let x_free = px > T::zero() && px < xmax;
    let y_free = py > T::zero() && py < ymax;
    let sx = px.max(T::zero()).min(xmax);
    let sy = py.max(T::zero()).min(ymax);
    let x0 = sx.floor().to_usize().unwrap_or(0).min(w - 1);
    let y0 = sy.floor().to_usize().unwrap_or(0).min(h - 1);
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    BilinearTap {
        i00: y0 * w + x0,
        i01: y0 * w + x1,
        i10: y1 * w + x0,
        i11: y1 * w + x1,
        fx: sx - T::lit(x0 as f64),
        fy: sy - T::lit(y0 as f64),
        x_free,
        y_free,
    }
}

fn check_flow<T: Scalar>(feature: &Tensor<T>, flow: &Tensor<T>) -> Result<(usize, usize, usize)> {
    let (c, h, w) = feature.chw()?;
    if flow.shape() != [2, h, w] {
        return Err(Error::shape("bilinear_sample", feature.shape(), flow.shape()));
    }
    Ok((c, h, w))
}

/// Backward warp: `out(p) = feature(p + flow(p))`, bilinear, coordinates clamped to the border.
///
/// `flow` is laid out `2×H×W` (dx plane, then dy plane).
pub fn bilinear_sample<T: Scalar>(feature: &Tensor<T>, flow: &Tensor<T>) -> Result<Tensor<T>> {
    let (c, h, w) = check_flow(feature, flow)?;
    let f = feature.data();
    let fl = flow.data();
    let hw = h * w;
    let mut out = vec![T::zero(); c * hw];
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            let t = bilinear_tap(x, y, fl[p], fl[hw + p], h, w);
            let (ax, ay) = (T::one() - t.fx, T::one() - t.fy);
            for ch in 0..c {
                let s = &f[ch * hw..(ch + 1) * hw];
                out[ch * hw + p] = (s[t.i00] * ax + s[t.i01] * t.fx) * ay
                    + (s[t.i10] * ax + s[t.i11] * t.fx) * t.fy;
            }
        }
    }
    Tensor::from_vec(feature.shape(), out)
}

/// Gradients of [`bilinear_sample`] with respect to the feature map and the flow.
///
/// The flow gradient is zero along any axis where the sample coordinate is clamped.
pub fn bilinear_sample_backward<T: Scalar>(
    feature: &Tensor<T>,
    flow: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>) {
    let (c, h, w) = check_flow(feature, flow).expect("checked in forward");
    let f = feature.data();
    let fl = flow.data();
    let g = grad_out.data();
    let hw = h * w;
    let mut gf = vec![T::zero(); c * hw];
    let mut gflow = vec![T::zero(); 2 * hw];
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            let t = bilinear_tap(x, y, fl[p], fl[hw + p], h, w);
            let (ax, ay) = (T::one() - t.fx, T::one() - t.fy);
            let mut gdx = T::zero();
            let mut gdy = T::zero();
            for ch in 0..c {
                let go = g[ch * hw + p];
                let s = &f[ch * hw..(ch + 1) * hw];
                let gs = &mut gf[ch * hw..(ch + 1) * hw];
                gs[t.i00] += go * ax * ay;
                gs[t.i01] += go * t.fx * ay;
                gs[t.i10] += go * ax * t.fy;
                gs[t.i11] += go * t.fx * t.fy;
                gdx += go * ((s[t.i01] - s[t.i00]) * ay + (s[t.i11] - s[t.i10]) * t.fy);
                gdy += go * ((s[t.i10] - s[t.i00]) * ax + (s[t.i11] - s[t.i01]) * t.fx);
            }
            if t.x_free {
                gflow[p] = gdx;
            }
            if t.y_free {
                gflow[hw + p] = gdy;
            }
        }
    }
    (
        Tensor::from_vec(feature.shape(), gf).unwrap(),
        Tensor::from_vec(flow.shape(), gflow).unwrap(),
    )
}

/// Matrix product of `m×n` and `n×p`.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, n, p) = match (a.shape(), b.shape()) {
        (&[m, n], &[n2, p]) if n == n2 => (m, n, p),
        _ => return Err(Error::shape("matmul", a.shape(), b.shape())),
    };
    let out = matmul_raw(a.data(), b.data(), m, n, p);
    counter::add((m * n * p) as u64);
    Tensor::from_vec(&[m, p], out)
}

fn matmul_raw<T: Scalar>(a: &[T], b: &[T], m: usize, n: usize, p: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * p];
    for i in 0..m {
        let orow = &mut out[i * p..(i + 1) * p];
        for k in 0..n {
            let av = a[i * n + k];
            for (o, &bv) in orow.iter_mut().zip(&b[k * p..(k + 1) * p]) {
                *o += av * bv;
            }
        }
    }
    out
}

pub fn transpose<T: Scalar>(a: &Tensor<T>) -> Result<Tensor<T>> {
    let [m, n] = a.shape()[..] else {
        return Err(Error::invalid(format!("transpose expects a matrix, got {:?}", a.shape())));
    };
    let d = a.data();
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = d[i * n + j];
        }
    }
    Tensor::from_vec(&[n, m], out)
}

/// Gradients of `a·b`: `(g·bᵀ, aᵀ·g)`. Not counted as forward work.
pub fn matmul_backward<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, g: &Tensor<T>) -> (Tensor<T>, Tensor<T>) {
    let (m, n) = (a.shape()[0], a.shape()[1]);
    let p = b.shape()[1];
    let bt = transpose(b).unwrap();
    let at = transpose(a).unwrap();
    let ga = matmul_raw(g.data(), bt.data(), m, p, n);
    let gb = matmul_raw(at.data(), g.data(), n, m, p);
    (
        Tensor::from_vec(&[m, n], ga).unwrap(),
        Tensor::from_vec(&[n, p], gb).unwrap(),
    )
}

pub fn leaky_relu<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        x
    } else {
        x * T::lit(LEAKY_SLOPE)
    }
}

pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Geometry of the non-overlapping `p×p` patch partition of an `H×W` map.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchGrid {
    pub patch: usize,
    pub rows: usize,
    pub cols: usize,
}

impl PatchGrid {
    pub fn new(h: usize, w: usize, patch: usize) -> Result<Self> {
        if patch == 0 || !h.is_multiple_of(patch) || !w.is_multiple_of(patch) {
            return Err(Error::invalid(format!(
                "{h}×{w} is not divisible into {patch}×{patch} patches; pad first"
            )));
        }
        Ok(Self {
            patch,
            rows: h / patch,
            cols: w / patch,
        })
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Top-left pixel `(y, x)` of patch `i`.
    pub fn origin(&self, i: usize) -> (usize, usize) {
        ((i / self.cols) * self.patch, (i % self.cols) * self.patch)
    }

    /// Token width for a `C`-channel map: `C·p²`.
    pub fn token_dim(&self, channels: usize) -> usize {
        channels * self.patch * self.patch
    }
}

/// Flattens the listed patches of a `C×H×W` map into `k×(C·p²)` tokens (channel-major).
pub fn gather_patches<T: Scalar>(input: &Tensor<T>, grid: PatchGrid, indices: &[usize]) -> Result<Tensor<T>> {
    let (c, h, w) = input.chw()?;
    if h != grid.rows * grid.patch || w != grid.cols * grid.patch {
        return Err(Error::invalid(format!("patch grid {grid:?} does not match {h}×{w}")));
    }
    let p = grid.patch;
    let d = grid.token_dim(c);
    let x = input.data();
    let mut out = vec![T::zero(); indices.len() * d];
    for (j, &i) in indices.iter().enumerate() {
        if i >= grid.len() {
            return Err(Error::invalid(format!("patch index {i} out of range 0..{}", grid.len())));
        }
        let (oy, ox) = grid.origin(i);
        let tok = &mut out[j * d..(j + 1) * d];
        for ch in 0..c {
            for dy in 0..p {
                let src = ch * h * w + (oy + dy) * w + ox;
                tok[(ch * p + dy) * p..(ch * p + dy + 1) * p].copy_from_slice(&x[src..src + p]);
            }
        }
    }
    Tensor::from_vec(&[indices.len(), d], out)
}

/// Inverse of [`gather_patches`]: writes tokens back to their blocks, zeros elsewhere.
pub fn scatter_patches<T: Scalar>(
    tokens: &Tensor<T>,
    grid: PatchGrid,
    indices: &[usize],
    channels: usize,
) -> Result<Tensor<T>> {
    let p = grid.patch;
    let d = grid.token_dim(channels);
    if tokens.shape() != [indices.len(), d] {
        return Err(Error::shape("scatter_patches", tokens.shape(), &[indices.len(), d]));
    }
    let (h, w) = (grid.rows * p, grid.cols * p);
    let t = tokens.data();
    let mut out = vec![T::zero(); channels * h * w];
    for (j, &i) in indices.iter().enumerate() {
        if i >= grid.len() {
            return Err(Error::invalid(format!("patch index {i} out of range 0..{}", grid.len())));
        }
        let (oy, ox) = grid.origin(i);
        let tok = &t[j * d..(j + 1) * d];
        for ch in 0..channels {
            for dy in 0..p {
                let dst = ch * h * w + (oy + dy) * w + ox;
                // Later duplicates overwrite, matching index-copy semantics.
                out[dst..dst + p].copy_from_slice(&tok[(ch * p + dy) * p..(ch * p + dy + 1) * p]);
            }
        }
    }
    Tensor::from_vec(&[channels, h, w], out)
}

/// Zero-extends the last two axes to `h×w`.
pub fn pad_hw<T: Scalar>(input: &Tensor<T>, h: usize, w: usize) -> Result<Tensor<T>> {
    let (lead, ih, iw) = split_hw(input.shape())?;
    if h < ih || w < iw {
        return Err(Error::invalid(format!("cannot pad {ih}×{iw} down to {h}×{w}")));
    }
    let x = input.data();
    let mut out = vec![T::zero(); lead * h * w];
    for l in 0..lead {
        for y in 0..ih {
            out[(l * h + y) * w..(l * h + y) * w + iw].copy_from_slice(&x[(l * ih + y) * iw..(l * ih + y + 1) * iw]);
        }
    }
    let mut shape = input.shape().to_vec();
    let n = shape.len();
    shape[n - 2] = h;
    shape[n - 1] = w;
    Tensor::from_vec(&shape, out)
}

/// Keeps the top-left `h×w` of the last two axes.
pub fn crop_hw<T: Scalar>(input: &Tensor<T>, h: usize, w: usize) -> Result<Tensor<T>> {
    let (lead, ih, iw) = split_hw(input.shape())?;
    if h > ih || w > iw {
        return Err(Error::invalid(format!("cannot crop {ih}×{iw} to {h}×{w}")));
    }
    let x = input.data();
    let mut out = Vec::with_capacity(lead * h * w);
    for l in 0..lead {
        for y in 0..h {
            out.extend_from_slice(&x[(l * ih + y) * iw..(l * ih + y) * iw + w]);
        }
    }
    let mut shape = input.shape().to_vec();
    let n = shape.len();
    shape[n - 2] = h;
    shape[n - 1] = w;
    Tensor::from_vec(&shape, out)
}
