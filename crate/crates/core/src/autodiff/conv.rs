//! im2col convolution kernels.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{Real, Shape4, Tensor};

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub ci: usize,
    pub co: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub h: usize,
    pub w: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(x: Shape4, weight: Shape4, bias_len: usize, stride: usize, pad: usize) -> Result<Self> {
        if stride == 0 {
            return Err(Error::shape("convolution stride must be positive"));
        }
        if weight.c != x.c {
            return Err(Error::shape(format!(
                "conv weight {weight} expects {} input channels, input is {x}",
                weight.c
            )));
        }
        if bias_len != weight.n {
            return Err(Error::shape(format!(
                "conv bias has {bias_len} entries for {} output channels",
                weight.n
            )));
        }
        let (hp, wp) = (x.h + 2 * pad, x.w + 2 * pad);
        if hp < weight.h || wp < weight.w {
            return Err(Error::shape(format!(
                "kernel {}x{} larger than padded input {hp}x{wp}",
                weight.h, weight.w
            )));
        }
        Ok(Self {
            n: x.n,
            ci: x.c,
            co: weight.n,
            kh: weight.h,
            kw: weight.w,
            stride,
            pad,
            h: x.h,
            w: x.w,
            ho: (hp - weight.h) / stride + 1,
            wo: (wp - weight.w) / stride + 1,
        })
    }

    pub fn out_shape(&self) -> Shape4 {
        Shape4 {
            n: self.n,
            c: self.co,
            h: self.ho,
            w: self.wo,
        }
    }

    fn rows(&self) -> usize {
        self.ci * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.ho * self.wo
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

fn im2col<T: Real>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let ncols = g.cols();
    for c in 0..g.ci {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * ncols..(row + 1) * ncols];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let out_row = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        out_row.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, o) in out_row.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *o = if ix < 0 || ix >= g.w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Real>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let ncols = g.cols();
    for c in 0..g.ci {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let src = &cols[row * ncols..(row + 1) * ncols];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn forward<T: Real>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let g = ConvGeom::new(x.shape(), weight.shape(), bias.len(), stride, pad)?;
    let out_shape = g.out_shape();
    let mut out = vec![T::zero(); out_shape.numel()];
    let ncols = g.cols();
    let in_len = x.shape().image_len();
    let w = weight.data();
    let b = bias.data();
    out.par_chunks_mut(g.co * ncols)
        .enumerate()
        .for_each(|(n, dst)| {
            let img = &x.data()[n * in_len..(n + 1) * in_len];
            for (co, row) in dst.chunks_mut(ncols).enumerate() {
                row.fill(b[co]);
            }
            if g.is_pointwise() {
                T::gemm(g.co, g.ci, ncols, w, false, img, false, T::one(), dst);
            } else {
                let mut cols = vec![T::zero(); g.rows() * ncols];
                im2col(img, &g, &mut cols);
                T::gemm(g.co, g.rows(), ncols, w, false, &cols, false, T::one(), dst);
            }
        });
    Tensor::from_vec(out_shape, out)
}

pub(crate) struct ConvGrads<T> {
    pub dx: Option<Vec<T>>,
    pub dw: Vec<T>,
    pub db: Vec<T>,
}

/// Gradients of a convolution given the upstream gradient `gout`. Per-sample
/// weight gradients are reduced in batch order so results do not depend on
/// the thread count.
pub(crate) fn backward<T: Real>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    stride: usize,
    pad: usize,
    gout: &[T],
    need_dx: bool,
) -> ConvGrads<T> {
    let g = ConvGeom::new(x.shape(), weight.shape(), weight.shape().n, stride, pad)
        .expect("geometry was validated on forward");
    let ncols = g.cols();
    let rows = g.rows();
    let in_len = x.shape().image_len();
    let w = weight.data();

    let per_sample: Vec<(Vec<T>, Vec<T>, Option<Vec<T>>)> = (0..g.n)
        .into_par_iter()
        .map(|n| {
            let img = &x.data()[n * in_len..(n + 1) * in_len];
            let go = &gout[n * g.co * ncols..(n + 1) * g.co * ncols];
            let db: Vec<T> = go.chunks(ncols).map(|r| r.iter().copied().sum()).collect();
            let mut dw = vec![T::zero(); g.co * rows];
            let dx = if g.is_pointwise() {
                T::gemm(g.co, ncols, g.ci, go, false, img, true, T::zero(), &mut dw);
                need_dx.then(|| {
                    let mut dx = vec![T::zero(); in_len];
                    T::gemm(g.ci, g.co, ncols, w, true, go, false, T::zero(), &mut dx);
                    dx
                })
            } else {
                let mut cols = vec![T::zero(); rows * ncols];
                im2col(img, &g, &mut cols);
                T::gemm(g.co, ncols, rows, go, false, &cols, true, T::zero(), &mut dw);
                need_dx.then(|| {
                    T::gemm(rows, g.co, ncols, w, true, go, false, T::zero(), &mut cols);
                    let mut dx = vec![T::zero(); in_len];
                    col2im(&cols, &g, &mut dx);
                    dx
                })
            };
            (dw, db, dx)
        })
        .collect();

    let mut dw = vec![T::zero(); g.co * rows];
    let mut db = vec![T::zero(); g.co];
    let mut dx = need_dx.then(|| Vec::with_capacity(g.n * in_len));
    for (sdw, sdb, sdx) in per_sample {
        dw.iter_mut().zip(&sdw).for_each(|(a, &b)| *a += b);
        db.iter_mut().zip(&sdb).for_each(|(a, &b)| *a += b);
        if let (Some(dx), Some(sdx)) = (dx.as_mut(), sdx) {
            dx.extend_from_slice(&sdx);
        }
    }
    ConvGrads { dx, dw, db }
}
