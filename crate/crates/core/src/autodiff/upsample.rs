//! Bilinear upsampling by an integer factor, half-pixel (align-corners=false)
//! sampling with edge clamping.

use crate::tensor::{Real, Shape4, Tensor};

#[derive(Debug, Clone, Copy)]
struct Tap<T> {
    i0: usize,
    i1: usize,
    w0: T,
    w1: T,
}

fn taps<T: Real>(in_len: usize, out_len: usize) -> Vec<Tap<T>> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(in_len - 1);
            let i1 = (i0 + 1).min(in_len - 1);
            let frac = src - i0 as f64;
            Tap {
                i0,
                i1,
                w0: T::from_f64_lossy(1.0 - frac),
                w1: T::from_f64_lossy(frac),
            }
        })
        .collect()
}

/// Resamples every plane to `out_h × out_w`.
pub(crate) fn resize<T: Real>(x: &Tensor<T>, out_h: usize, out_w: usize) -> Tensor<T> {
    let s = x.shape();
    let ys = taps::<T>(s.h, out_h);
    let xs = taps::<T>(s.w, out_w);
    let out_shape = Shape4 {
        h: out_h,
        w: out_w,
        ..s
    };
    let mut out = Vec::with_capacity(out_shape.numel());
    for plane in x.data().chunks(s.plane()) {
        for ty in &ys {
            let r0 = &plane[ty.i0 * s.w..(ty.i0 + 1) * s.w];
            let r1 = &plane[ty.i1 * s.w..(ty.i1 + 1) * s.w];
            for tx in &xs {
                let top = tx.w0 * r0[tx.i0] + tx.w1 * r0[tx.i1];
                let bot = tx.w0 * r1[tx.i0] + tx.w1 * r1[tx.i1];
                out.push(ty.w0 * top + ty.w1 * bot);
            }
        }
    }
    Tensor::from_vec(out_shape, out).expect("resize preserves element count")
}

/// Transpose of [`resize`] applied to an upstream gradient.
pub(crate) fn resize_backward<T: Real>(in_shape: Shape4, out_h: usize, out_w: usize, gout: &[T]) -> Vec<T> {
    let s = in_shape;
    let ys = taps::<T>(s.h, out_h);
    let xs = taps::<T>(s.w, out_w);
    let mut dx = vec![T::zero(); s.numel()];
    for (plane, go) in dx.chunks_mut(s.plane()).zip(gout.chunks(out_h * out_w)) {
        for (oy, ty) in ys.iter().enumerate() {
            for (ox, tx) in xs.iter().enumerate() {
                let g = go[oy * out_w + ox];
                let gt = ty.w0 * g;
                let gb = ty.w1 * g;
                plane[ty.i0 * s.w + tx.i0] += tx.w0 * gt;
                plane[ty.i0 * s.w + tx.i1] += tx.w1 * gt;
                plane[ty.i1 * s.w + tx.i0] += tx.w0 * gb;
                plane[ty.i1 * s.w + tx.i1] += tx.w1 * gb;
            }
        }
    }
    dx
}
