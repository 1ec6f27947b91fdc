//! Group normalization: each sample's channels are split into groups, and
//! every group is standardized over its channels and pixels before a
//! per-channel scale and shift. Statistics accumulate in f64.

use crate::tensor::{Real, Tensor};

pub(super) const EPSILON: f64 = 1e-5;

/// Per (sample, group) mean and inverse standard deviation, sample-major.
#[derive(Debug)]
pub(super) struct Stats {
    pub mean: Vec<f64>,
    pub inv_std: Vec<f64>,
}

fn group_span<T: Real>(x: &Tensor<T>, groups: usize, n: usize, g: usize) -> std::ops::Range<usize> {
    let s = x.shape();
    let len = s.c / groups * s.plane();
    let start = n * s.image_len() + g * len;
    start..start + len
}

pub(super) fn forward<T: Real>(x: &Tensor<T>, groups: usize, gamma: &[T], beta: &[T]) -> (Tensor<T>, Stats) {
    let s = x.shape();
    let per_group = s.c / groups;
    let plane = s.plane();
    let mut out = x.clone();
    let mut stats = Stats {
        mean: Vec::with_capacity(s.n * groups),
        inv_std: Vec::with_capacity(s.n * groups),
    };
    for n in 0..s.n {
        for g in 0..groups {
            let span = group_span(x, groups, n, g);
            let vals = &x.data()[span.clone()];
            let count = vals.len() as f64;
            let mean = vals.iter().map(|v| v.as_f64()).sum::<f64>() / count;
            let var = vals.iter().map(|v| (v.as_f64() - mean).powi(2)).sum::<f64>() / count;
            let inv_std = 1.0 / (var + EPSILON).sqrt();
            for (i, o) in out.data_mut()[span].iter_mut().enumerate() {
                let c = g * per_group + i / plane;
                let xhat = (o.as_f64() - mean) * inv_std;
                *o = T::from_f64_lossy(gamma[c].as_f64() * xhat + beta[c].as_f64());
            }
            stats.mean.push(mean);
            stats.inv_std.push(inv_std);
        }
    }
    (out, stats)
}

pub(super) struct Grads<T> {
    pub dx: Vec<T>,
    pub dgamma: Vec<T>,
    pub dbeta: Vec<T>,
}

pub(super) fn backward<T: Real>(x: &Tensor<T>, groups: usize, gamma: &[T], stats: &Stats, gy: &[T]) -> Grads<T> {
    let s = x.shape();
    let per_group = s.c / groups;
    let plane = s.plane();
    let mut dx = vec![T::zero(); x.len()];
    let mut dgamma = vec![0f64; s.c];
    let mut dbeta = vec![0f64; s.c];
    for n in 0..s.n {
        for g in 0..groups {
            let k = n * groups + g;
            let (mean, inv_std) = (stats.mean[k], stats.inv_std[k]);
            let span = group_span(x, groups, n, g);
            let count = span.len() as f64;
            let xs = &x.data()[span.clone()];
            let gs = &gy[span.clone()];
            // dxhat = gy * gamma; dx = inv_std * (dxhat - mean(dxhat) - xhat * mean(dxhat * xhat))
            let (mut sum_d, mut sum_dx) = (0f64, 0f64);
            for (i, (xv, gv)) in xs.iter().zip(gs).enumerate() {
                let c = g * per_group + i / plane;
                let xhat = (xv.as_f64() - mean) * inv_std;
                let d = gv.as_f64() * gamma[c].as_f64();
                sum_d += d;
                sum_dx += d * xhat;
                dgamma[c] += gv.as_f64() * xhat;
                dbeta[c] += gv.as_f64();
            }
            let (mean_d, mean_dx) = (sum_d / count, sum_dx / count);
            for (i, ((xv, gv), out)) in xs.iter().zip(gs).zip(&mut dx[span]).enumerate() {
                let c = g * per_group + i / plane;
                let xhat = (xv.as_f64() - mean) * inv_std;
                let d = gv.as_f64() * gamma[c].as_f64();
                *out = T::from_f64_lossy(inv_std * (d - mean_d - xhat * mean_dx));
            }
        }
    }
    let cast = |v: Vec<f64>| v.into_iter().map(T::from_f64_lossy).collect();
    Grads {
        dx,
        dgamma: cast(dgamma),
        dbeta: cast(dbeta),
    }
}
