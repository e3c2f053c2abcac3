//! Forward and adjoint kernels over NCHW tensors.
//!
//! All spatial convolutions use zero "same" padding with odd kernels, so the
//! output plane always has the input's extents. Every output accumulator starts
//! from its bias and adds taps in `(in_channel, ky, kx)` order; the depthwise,
//! pointwise and dense kernels share that order, which makes the one-channel
//! and 1x1 reductions bitwise identical.

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::{Shape, Tensor};

#[inline]
fn axpy<T: Real>(a: T, x: &[T], y: &mut [T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

#[inline]
fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let chunks = a.len() / 8;
    for k in 0..chunks {
        let (ca, cb) = (&a[k * 8..k * 8 + 8], &b[k * 8..k * 8 + 8]);
        for j in 0..8 {
            acc[j] += ca[j] * cb[j];
        }
    }
    let mut tail = T::zero();
    for j in chunks * 8..a.len() {
        tail += a[j] * b[j];
    }
    acc.iter().copied().sum::<T>() + tail
}

/// Valid output range and input offset of one kernel tap along one axis.
#[derive(Clone, Copy)]
struct Tap {
    lo: usize,
    hi: usize,
    off: isize,
}

fn taps(extent: usize, k: usize) -> Vec<Tap> {
    let pad = (k / 2) as isize;
    (0..k)
        .map(|t| {
            let off = t as isize - pad;
            let lo = (-off).max(0) as usize;
            let hi = (extent as isize - off).min(extent as isize).max(0) as usize;
            Tap {
                lo: lo.min(hi),
                hi,
                off,
            }
        })
        .collect()
}

struct PlaneGeom {
    w: usize,
    ty: Vec<Tap>,
    tx: Vec<Tap>,
}

impl PlaneGeom {
    fn new(h: usize, w: usize, kh: usize, kw: usize) -> Self {
        PlaneGeom {
            w,
            ty: taps(h, kh),
            tx: taps(w, kw),
        }
    }
}

fn plane_forward<T: Real>(g: &PlaneGeom, kernel: &[T], input: &[T], out: &mut [T]) {
    let kw = g.tx.len();
    for (ky, ty) in g.ty.iter().enumerate() {
        for (kx, tx) in g.tx.iter().enumerate() {
            let wv = kernel[ky * kw + kx];
            if tx.lo >= tx.hi {
                continue;
            }
            for y in ty.lo..ty.hi {
                let iy = (y as isize + ty.off) as usize;
                let o = y * g.w;
                let i = (iy as isize * g.w as isize + tx.off + tx.lo as isize) as usize;
                axpy(wv, &input[i..i + tx.hi - tx.lo], &mut out[o + tx.lo..o + tx.hi]);
            }
        }
    }
}

fn plane_grad_input<T: Real>(g: &PlaneGeom, kernel: &[T], grad_out: &[T], grad_in: &mut [T]) {
    let kw = g.tx.len();
    for (ky, ty) in g.ty.iter().enumerate() {
        for (kx, tx) in g.tx.iter().enumerate() {
            let wv = kernel[ky * kw + kx];
            if tx.lo >= tx.hi {
                continue;
            }
            for y in ty.lo..ty.hi {
                let iy = (y as isize + ty.off) as usize;
                let o = y * g.w;
                let i = (iy as isize * g.w as isize + tx.off + tx.lo as isize) as usize;
                axpy(wv, &grad_out[o + tx.lo..o + tx.hi], &mut grad_in[i..i + tx.hi - tx.lo]);
            }
        }
    }
}

fn plane_grad_kernel<T: Real>(g: &PlaneGeom, input: &[T], grad_out: &[T], grad_k: &mut [T]) {
    let kw = g.tx.len();
    for (ky, ty) in g.ty.iter().enumerate() {
        for (kx, tx) in g.tx.iter().enumerate() {
            if tx.lo >= tx.hi {
                continue;
            }
            let mut acc = T::zero();
            for y in ty.lo..ty.hi {
                let iy = (y as isize + ty.off) as usize;
                let o = y * g.w;
                let i = (iy as isize * g.w as isize + tx.off + tx.lo as isize) as usize;
                acc += dot(&grad_out[o + tx.lo..o + tx.hi], &input[i..i + tx.hi - tx.lo]);
            }
            grad_k[ky * kw + kx] += acc;
        }
    }
}

fn check_bias<T: Real>(op: &'static str, bias: Option<&Tensor<T>>, channels: usize) -> Result<()> {
    match bias {
        Some(b) if b.len() != channels => Err(Error::shape(
            op,
            format!("bias has {} entries, expected {channels}", b.len()),
        )),
        _ => Ok(()),
    }
}

fn bias_at<T: Real>(bias: Option<&Tensor<T>>, o: usize) -> T {
    bias.map_or(T::zero(), |b| b.data()[o])
}

fn check_odd(kh: usize, kw: usize) -> Result<()> {
    if kh.is_multiple_of(2) || kw.is_multiple_of(2) {
        Err(Error::EvenKernel(kh, kw))
    } else {
        Ok(())
    }
}

/// Dense 2-D convolution. `kernel` is laid out `[out, in, kh, kw]`.
pub fn conv2d<T: Real>(x: &Tensor<T>, kernel: &Tensor<T>, bias: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    let xs = x.shape();
    let ks = kernel.shape();
    check_odd(ks.h, ks.w)?;
    if ks.c != xs.c {
        return Err(Error::shape(
            "conv2d",
            format!("input has {} channels, kernel expects {}", xs.c, ks.c),
        ));
    }
    check_bias("conv2d", bias, ks.n)?;
    let geom = PlaneGeom::new(xs.h, xs.w, ks.h, ks.w);
    let taps = ks.h * ks.w;
    let mut out = Tensor::zeros(Shape::new(xs.n, ks.n, xs.h, xs.w));
    for n in 0..xs.n {
        for o in 0..ks.n {
            let b = bias_at(bias, o);
            let plane = out.plane_mut(n, o);
            plane.iter_mut().for_each(|v| *v = b);
            for i in 0..xs.c {
                let k = &kernel.data()[(o * ks.c + i) * taps..(o * ks.c + i + 1) * taps];
                plane_forward(&geom, k, x.plane(n, i), plane);
            }
        }
    }
    Ok(out)
}

pub struct ConvGrads<T> {
    pub input: Option<Tensor<T>>,
    pub kernel: Tensor<T>,
    pub bias: Tensor<T>,
}

pub fn conv2d_backward<T: Real>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    grad_out: &Tensor<T>,
    need_input: bool,
) -> ConvGrads<T> {
    let xs = x.shape();
    let ks = kernel.shape();
    let geom = PlaneGeom::new(xs.h, xs.w, ks.h, ks.w);
    let taps = ks.h * ks.w;
    let mut gk = Tensor::zeros(ks);
    let mut gb = Tensor::zeros(Shape::new(1, ks.n, 1, 1));
    let mut gx = need_input.then(|| Tensor::zeros(xs));
    for n in 0..xs.n {
        for o in 0..ks.n {
            let g = grad_out.plane(n, o);
            gb.data_mut()[o] += g.iter().copied().sum::<T>();
            for i in 0..xs.c {
                let base = (o * ks.c + i) * taps;
                plane_grad_kernel(&geom, x.plane(n, i), g, &mut gk.data_mut()[base..base + taps]);
                if let Some(gx) = gx.as_mut() {
                    plane_grad_input(&geom, &kernel.data()[base..base + taps], g, gx.plane_mut(n, i));
                }
            }
        }
    }
    ConvGrads {
        input: gx,
        kernel: gk,
        bias: gb,
    }
}

/// Per-channel 2-D convolution. `kernel` is laid out `[1, c, kh, kw]`.
pub fn depthwise_conv2d<T: Real>(x: &Tensor<T>, kernel: &Tensor<T>, bias: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    let xs = x.shape();
    let ks = kernel.shape();
    check_odd(ks.h, ks.w)?;
    if ks.c != xs.c || ks.n != 1 {
        return Err(Error::shape(
            "depthwise_conv2d",
            format!("input has {} channels, kernel {:?}", xs.c, ks),
        ));
    }
    check_bias("depthwise_conv2d", bias, xs.c)?;
    let geom = PlaneGeom::new(xs.h, xs.w, ks.h, ks.w);
    let taps = ks.h * ks.w;
    let mut out = Tensor::zeros(xs);
    for n in 0..xs.n {
        for c in 0..xs.c {
            let b = bias_at(bias, c);
            let plane = out.plane_mut(n, c);
            plane.iter_mut().for_each(|v| *v = b);
            plane_forward(&geom, &kernel.data()[c * taps..(c + 1) * taps], x.plane(n, c), plane);
        }
    }
    Ok(out)
}

pub fn depthwise_conv2d_backward<T: Real>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    grad_out: &Tensor<T>,
    need_input: bool,
) -> ConvGrads<T> {
    let xs = x.shape();
    let ks = kernel.shape();
    let geom = PlaneGeom::new(xs.h, xs.w, ks.h, ks.w);
    let taps = ks.h * ks.w;
    let mut gk = Tensor::zeros(ks);
    let mut gb = Tensor::zeros(Shape::new(1, xs.c, 1, 1));
    let mut gx = need_input.then(|| Tensor::zeros(xs));
    for n in 0..xs.n {
        for c in 0..xs.c {
            let g = grad_out.plane(n, c);
            gb.data_mut()[c] += g.iter().copied().sum::<T>();
            plane_grad_kernel(&geom, x.plane(n, c), g, &mut gk.data_mut()[c * taps..(c + 1) * taps]);
            if let Some(gx) = gx.as_mut() {
                plane_grad_input(&geom, &kernel.data()[c * taps..(c + 1) * taps], g, gx.plane_mut(n, c));
            }
        }
    }
    ConvGrads {
        input: gx,
        kernel: gk,
        bias: gb,
    }
}

/// 1x1 convolution. `kernel` is laid out `[out, in, 1, 1]`.
pub fn pointwise_conv2d<T: Real>(x: &Tensor<T>, kernel: &Tensor<T>, bias: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    let xs = x.shape();
    let ks = kernel.shape();
    if ks.c != xs.c || ks.h != 1 || ks.w != 1 {
        return Err(Error::shape(
            "pointwise_conv2d",
            format!("input has {} channels, kernel {:?}", xs.c, ks),
        ));
    }
    check_bias("pointwise_conv2d", bias, ks.n)?;
    let mut out = Tensor::zeros(Shape::new(xs.n, ks.n, xs.h, xs.w));
    for n in 0..xs.n {
        for o in 0..ks.n {
            let b = bias_at(bias, o);
            let plane = out.plane_mut(n, o);
            plane.iter_mut().for_each(|v| *v = b);
            for i in 0..xs.c {
                axpy(kernel.data()[o * ks.c + i], x.plane(n, i), plane);
            }
        }
    }
    Ok(out)
}

pub fn pointwise_conv2d_backward<T: Real>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    grad_out: &Tensor<T>,
    need_input: bool,
) -> ConvGrads<T> {
    let xs = x.shape();
    let ks = kernel.shape();
    let mut gk = Tensor::zeros(ks);
    let mut gb = Tensor::zeros(Shape::new(1, ks.n, 1, 1));
    let mut gx = need_input.then(|| Tensor::zeros(xs));
    for n in 0..xs.n {
        for o in 0..ks.n {
            let g = grad_out.plane(n, o);
            gb.data_mut()[o] += g.iter().copied().sum::<T>();
            for i in 0..xs.c {
                gk.data_mut()[o * ks.c + i] += dot(g, x.plane(n, i));
                if let Some(gx) = gx.as_mut() {
                    axpy(kernel.data()[o * ks.c + i], g, gx.plane_mut(n, i));
                }
            }
        }
    }
    ConvGrads {
        input: gx,
        kernel: gk,
        bias: gb,
    }
}

/// Sum over everything except the channel axis.
pub fn channel_sums<T: Real>(t: &Tensor<T>) -> Tensor<T> {
    let s = t.shape();
    let mut out = vec![T::zero(); s.c];
    for n in 0..s.n {
        for (c, o) in out.iter_mut().enumerate() {
            *o += t.plane(n, c).iter().copied().sum::<T>();
        }
    }
    Tensor::vector(out)
}

/// Broadcast a `[c]` vector over every plane with `f(value, channel_value)`.
pub fn channel_broadcast<T: Real>(t: &Tensor<T>, v: &Tensor<T>, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
    let s = t.shape();
    if v.len() != s.c {
        return Err(Error::shape(
            "channel_broadcast",
            format!("{} channel weights for {:?}", v.len(), s),
        ));
    }
    let mut out = t.clone();
    for n in 0..s.n {
        for c in 0..s.c {
            let cv = v.data()[c];
            out.plane_mut(n, c).iter_mut().for_each(|x| *x = f(*x, cv));
        }
    }
    Ok(out)
}

pub fn concat_channels<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.n != sb.n || sa.h != sb.h || sa.w != sb.w {
        return Err(Error::shape("concat_channels", format!("{sa:?} vs {sb:?}")));
    }
    let mut data = Vec::with_capacity(a.len() + b.len());
    for n in 0..sa.n {
        for c in 0..sa.c {
            data.extend_from_slice(a.plane(n, c));
        }
        for c in 0..sb.c {
            data.extend_from_slice(b.plane(n, c));
        }
    }
    Tensor::from_vec(sa.with_c(sa.c + sb.c), data)
}

/// Inverse of [`concat_channels`]: the first `ca` channels and the rest.
pub fn split_channels<T: Real>(t: &Tensor<T>, ca: usize) -> (Tensor<T>, Tensor<T>) {
    let s = t.shape();
    let mut a = Vec::with_capacity(s.n * ca * s.plane());
    let mut b = Vec::with_capacity(s.n * (s.c - ca) * s.plane());
    for n in 0..s.n {
        for c in 0..s.c {
            if c < ca {
                a.extend_from_slice(t.plane(n, c));
            } else {
                b.extend_from_slice(t.plane(n, c));
            }
        }
    }
    (
        Tensor::from_vec(s.with_c(ca), a).expect("split extents"),
        Tensor::from_vec(s.with_c(s.c - ca), b).expect("split extents"),
    )
}

/// Resampling factor for [`resize_bilinear`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Resize {
    Half,
    Double,
}

impl Resize {
    pub fn target(self, h: usize, w: usize) -> Result<(usize, usize)> {
        match self {
            Resize::Half if !h.is_multiple_of(2) || !w.is_multiple_of(2) => Err(Error::shape(
                "resize_bilinear",
                format!("{h}x{w} is not divisible by 2"),
            )),
            Resize::Half => Ok((h / 2, w / 2)),
            Resize::Double => Ok((h * 2, w * 2)),
        }
    }
}

/// Two-tap interpolation weights per destination index, half-pixel centers
/// (align_corners = false), source coordinate clamped at the borders.
fn linear_taps(src: usize, dst: usize) -> Vec<[(usize, f64); 2]> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|d| {
            let s = ((d as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (s.floor() as usize).min(src - 1);
            let i1 = (i0 + 1).min(src - 1);
            let l = s - i0 as f64;
            [(i0, 1.0 - l), (i1, l)]
        })
        .collect()
}

pub fn resize_bilinear<T: Real>(x: &Tensor<T>, factor: Resize) -> Result<Tensor<T>> {
    let s = x.shape();
    let (oh, ow) = factor.target(s.h, s.w)?;
    let ty = linear_taps(s.h, oh);
    let tx = linear_taps(s.w, ow);
    let mut out = Tensor::zeros(Shape::new(s.n, s.c, oh, ow));
    for n in 0..s.n {
        for c in 0..s.c {
            let src = x.plane(n, c);
            let dst = out.plane_mut(n, c);
            for (y, wy) in ty.iter().enumerate() {
                for (xx, wx) in tx.iter().enumerate() {
                    let mut acc = T::zero();
                    for &(iy, ay) in wy {
                        for &(ix, ax) in wx {
                            acc += T::of(ay * ax) * src[iy * s.w + ix];
                        }
                    }
                    dst[y * ow + xx] = acc;
                }
            }
        }
    }
    Ok(out)
}

pub fn resize_bilinear_backward<T: Real>(input_shape: Shape, grad_out: &Tensor<T>) -> Tensor<T> {
    let s = input_shape;
    let gs = grad_out.shape();
    let ty = linear_taps(s.h, gs.h);
    let tx = linear_taps(s.w, gs.w);
    let mut gi = Tensor::zeros(s);
    for n in 0..s.n {
        for c in 0..s.c {
            let g = grad_out.plane(n, c);
            let dst = gi.plane_mut(n, c);
            for (y, wy) in ty.iter().enumerate() {
                for (xx, wx) in tx.iter().enumerate() {
                    let gv = g[y * gs.w + xx];
                    for &(iy, ay) in wy {
                        for &(ix, ax) in wx {
                            dst[iy * s.w + ix] += T::of(ay * ax) * gv;
                        }
                    }
                }
            }
        }
    }
    gi
}

/// Per-pixel softmax across channels, max-subtracted.
pub fn softmax_channels<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let s = x.shape();
    let p = s.plane();
    let mut out = Tensor::zeros(s);
    let src = x.data();
    let dst = out.data_mut();
    for n in 0..s.n {
        let base = n * s.c * p;
        for px in 0..p {
            let idx = |c: usize| base + c * p + px;
            let m = (0..s.c).map(|c| src[idx(c)]).fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for c in 0..s.c {
                let e = (src[idx(c)] - m).exp();
                dst[idx(c)] = e;
                z += e;
            }
            for c in 0..s.c {
                dst[idx(c)] = dst[idx(c)] / z;
            }
        }
    }
    out
}

pub fn softmax_channels_backward<T: Real>(probs: &Tensor<T>, grad_out: &Tensor<T>) -> Tensor<T> {
    let s = probs.shape();
    let p = s.plane();
    let mut gi = Tensor::zeros(s);
    let (sp, gp) = (probs.data(), grad_out.data());
    let dst = gi.data_mut();
    for n in 0..s.n {
        let base = n * s.c * p;
        for px in 0..p {
            let idx = |c: usize| base + c * p + px;
            let dotp: T = (0..s.c).map(|c| sp[idx(c)] * gp[idx(c)]).sum();
            for c in 0..s.c {
                dst[idx(c)] = sp[idx(c)] * (gp[idx(c)] - dotp);
            }
        }
    }
    gi
}

fn check_labels<T: Real>(logits: &Tensor<T>, labels: &[u8]) -> Result<()> {
    let s = logits.shape();
    if labels.len() != s.n * s.plane() {
        return Err(Error::shape(
            "cross_entropy",
            format!("{} labels for logits {:?}", labels.len(), s),
        ));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l as usize >= s.c) {
        return Err(Error::Invalid(format!("label {bad} >= {} classes", s.c)));
    }
    Ok(())
}

/// Mean per-pixel cross-entropy of channel logits against class indices
/// laid out `[n, h, w]`.
pub fn softmax_cross_entropy<T: Real>(logits: &Tensor<T>, labels: &[u8]) -> Result<T> {
    check_labels(logits, labels)?;
    let s = logits.shape();
    let p = s.plane();
    let src = logits.data();
    let mut total = 0.0f64;
    for n in 0..s.n {
        let base = n * s.c * p;
        for px in 0..p {
            let v = |c: usize| src[base + c * p + px].as_f64();
            let m = (0..s.c).map(v).fold(f64::NEG_INFINITY, f64::max);
            let lse = m + (0..s.c).map(|c| (v(c) - m).exp()).sum::<f64>().ln();
            total += lse - v(labels[n * p + px] as usize);
        }
    }
    Ok(T::of(total / (s.n * p) as f64))
}

pub fn softmax_cross_entropy_backward<T: Real>(logits: &Tensor<T>, labels: &[u8], grad: T) -> Tensor<T> {
    let s = logits.shape();
    let p = s.plane();
    let scale = grad / T::of((s.n * p) as f64);
    let mut gi = softmax_channels(logits);
    let dst = gi.data_mut();
    for n in 0..s.n {
        for px in 0..p {
            dst[(n * s.c + labels[n * p + px] as usize) * p + px] -= T::one();
        }
    }
    dst.iter_mut().for_each(|v| *v *= scale);
    gi
}

pub fn sigmoid<T: Real>(v: T) -> T {
    T::one() / (T::one() + (-v).exp())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dot_covers_the_unrolled_tail() {
        let a: Vec<f64> = (0..19).map(f64::from).collect();
        let expect: f64 = a.iter().map(|v| v * v).sum();
        assert_eq!(dot(&a, &a), expect);
    }

    #[test]
    fn taps_clip_to_the_valid_range() {
        let t = taps(4, 3);
        assert_eq!((t[0].lo, t[0].hi, t[0].off), (1, 4, -1));
        assert_eq!((t[1].lo, t[1].hi, t[1].off), (0, 4, 0));
        assert_eq!((t[2].lo, t[2].hi, t[2].off), (0, 3, 1));
        // a tap that never lands inside the image collapses to an empty range
        let wide = taps(2, 7);
        assert_eq!(wide[0].lo, wide[0].hi);
    }

    #[test]
    fn split_undoes_concat() {
        let shape = Shape::chw(3, 2, 2);
        let a = Tensor::from_vec(shape, (0..12).map(|v| v as f32).collect()).unwrap();
        let b = Tensor::from_vec(shape.with_c(1), vec![-1.0; 4]).unwrap();
        let (a2, b2) = split_channels(&concat_channels(&a, &b).unwrap(), 3);
        assert_eq!(a2.data(), a.data());
        assert_eq!(b2.data(), b.data());
    }

    #[test]
    fn half_resize_needs_even_extents() {
        assert!(Resize::Half.target(5, 4).is_err());
        assert_eq!(Resize::Double.target(5, 4).unwrap(), (10, 8));
    }

    #[test]
    fn sigmoid_is_centred() {
        assert_eq!(sigmoid(0.0f64), 0.5);
        assert!((sigmoid(3.0f64) + sigmoid(-3.0f64) - 1.0).abs() < 1e-15);
    }
}
