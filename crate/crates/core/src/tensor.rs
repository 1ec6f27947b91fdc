//! Dense NCHW tensors.
//!
//! A [`Tensor`] is a plain value: a [`Shape4`] and a row-major buffer. All
//! model arithmetic runs in `f32`; the same code instantiates at `f64` for
//! gradient checking.

use std::fmt;
use std::iter::Sum;
use std::ops::{AddAssign, Range};

use num_traits::{Float, FromPrimitive, ToPrimitive};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;

/// Scalar type usable by the tensor kernels.
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + AddAssign
    + Sum
    + Default
    + fmt::Debug
    + fmt::Display
    + Send
    + Sync
    + 'static
{
    /// `c = a·b + beta·c` with `a` (m×k), `b` (k×n), `c` (m×n), all
    /// row-major; `trans_a`/`trans_b` read the stored buffer transposed.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        trans_a: bool,
        b: &[Self],
        trans_b: bool,
        beta: Self,
        c: &mut [Self],
    );

    fn from_f64_lossy(v: f64) -> Self {
        Self::from_f64(v).expect("finite f64 converts")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("real converts to f64")
    }
}

macro_rules! impl_real {
    ($t:ty, $gemm:path) => {
        impl Real for $t {
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                trans_a: bool,
                b: &[Self],
                trans_b: bool,
                beta: Self,
                c: &mut [Self],
            ) {
                assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
                if m == 0 || n == 0 {
                    return;
                }
                let (rsa, csa) = if trans_a { (1, m) } else { (k, 1) };
                let (rsb, csb) = if trans_b { (1, k) } else { (n, 1) };
                // SAFETY: the bounds above cover every index the kernel
                // touches for these strides.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        1.0,
                        a.as_ptr(),
                        rsa as isize,
                        csa as isize,
                        b.as_ptr(),
                        rsb as isize,
                        csb as isize,
                        beta,
                        c.as_mut_ptr(),
                        n as isize,
                        1,
                    );
                }
            }
        }
    };
}

impl_real!(f32, matrixmultiply::sgemm);
impl_real!(f64, matrixmultiply::dgemm);

/// Batch, channel, height, width.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape4 {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape4 {
    pub fn new(n: usize, c: usize, h: usize, w: usize) -> Result<Self> {
        let s = Self { n, c, h, w };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.c == 0 || self.h == 0 || self.w == 0 {
            return Err(Error::shape(format!("all dimensions must be positive, got {self}")));
        }
        [self.n, self.c, self.h, self.w]
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::shape(format!("{self} overflows the address space")))?;
        Ok(())
    }

    pub fn numel(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    /// Elements in one image (one batch entry).
    pub fn image_len(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    pub fn index(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.c + c) * self.h + y) * self.w + x
    }

    pub fn with_channels(self, c: usize) -> Self {
        Self { c, ..self }
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }
}

impl fmt::Display for Shape4 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {}, {})", self.n, self.c, self.h, self.w)
    }
}

#[derive(Clone, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Shape4,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn zeros(shape: Shape4) -> Result<Self> {
        shape.validate()?;
        Ok(Self {
            shape,
            data: vec![T::zero(); shape.numel()],
        })
    }

    pub fn full(shape: Shape4, value: T) -> Result<Self> {
        shape.validate()?;
        Ok(Self {
            shape,
            data: vec![value; shape.numel()],
        })
    }

    pub fn from_vec(shape: Shape4, data: Vec<T>) -> Result<Self> {
        shape.validate()?;
        if data.len() != shape.numel() {
            return Err(Error::shape(format!(
                "buffer of length {} does not fill {shape}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn scalar(v: T) -> Self {
        Self {
            shape: Shape4 { n: 1, c: 1, h: 1, w: 1 },
            data: vec![v],
        }
    }

    /// Normal samples with mean 0 and the given standard deviation, drawn in
    /// row-major order from `Rng::new(seed)`.
    pub fn randn(shape: Shape4, seed: u64, stddev: f64) -> Result<Self> {
        let mut rng = Rng::new(seed);
        Self::randn_with(shape, &mut rng, stddev)
    }

    pub fn randn_with(shape: Shape4, rng: &mut Rng, stddev: f64) -> Result<Self> {
        if !(stddev > 0.0 && stddev.is_finite()) {
            return Err(Error::param(format!("stddev must be positive, got {stddev}")));
        }
        shape.validate()?;
        let data = (0..shape.numel())
            .map(|_| T::from_f64_lossy(rng.normal() * stddev))
            .collect();
        Ok(Self { shape, data })
    }

    pub fn shape(&self) -> Shape4 {
        self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn get(&self, n: usize, c: usize, y: usize, x: usize) -> T {
        self.data[self.shape.index(n, c, y, x)]
    }

    /// One batch entry as a borrowed slice.
    pub fn image(&self, n: usize) -> &[T] {
        let len = self.shape.image_len();
        &self.data[n * len..(n + 1) * len]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| U::from_f64_lossy(v.as_f64())).collect(),
        }
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff on mismatched shapes");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }

    /// Concatenate along the channel axis, parts in argument order.
    pub fn concat_channels(parts: &[&Tensor<T>]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat_channels needs at least one part"))?;
        let base = first.shape;
        for p in parts {
            let s = p.shape;
            if (s.n, s.h, s.w) != (base.n, base.h, base.w) {
                return Err(Error::shape(format!(
                    "concat_channels: {s} does not match {base} outside the channel axis"
                )));
            }
        }
        let c: usize = parts.iter().map(|p| p.shape.c).sum();
        let shape = base.with_channels(c);
        let mut data = Vec::with_capacity(shape.numel());
        for n in 0..base.n {
            for p in parts {
                data.extend_from_slice(p.image(n));
            }
        }
        Ok(Self { shape, data })
    }

    /// Channels `range.start..range.end`.
    pub fn slice_channels(&self, range: Range<usize>) -> Result<Self> {
        let s = self.shape;
        if range.start >= range.end || range.end > s.c {
            return Err(Error::shape(format!(
                "channel range {range:?} is not inside 0..{}",
                s.c
            )));
        }
        let shape = s.with_channels(range.end - range.start);
        let plane = s.plane();
        let mut data = Vec::with_capacity(shape.numel());
        for n in 0..s.n {
            let img = self.image(n);
            data.extend_from_slice(&img[range.start * plane..range.end * plane]);
        }
        Ok(Self { shape, data })
    }

    /// Entries `range` of the batch axis.
    pub fn slice_batch(&self, range: Range<usize>) -> Result<Self> {
        if range.start >= range.end || range.end > self.shape.n {
            return Err(Error::shape(format!(
                "batch range {range:?} is not inside 0..{}",
                self.shape.n
            )));
        }
        let len = self.shape.image_len();
        Ok(Self {
            shape: Shape4 {
                n: range.end - range.start,
                ..self.shape
            },
            data: self.data[range.start * len..range.end * len].to_vec(),
        })
    }

    /// Stack single images (n = 1 each, or any n) along the batch axis.
    pub fn stack_batch(parts: &[&Tensor<T>]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("stack_batch needs at least one part"))?;
        let base = first.shape;
        let mut n = 0;
        let mut data = Vec::new();
        for p in parts {
            if p.shape.image_len() != base.image_len() || (p.shape.c, p.shape.h, p.shape.w) != (base.c, base.h, base.w) {
                return Err(Error::shape(format!("stack_batch: {} vs {}", p.shape, base)));
            }
            n += p.shape.n;
            data.extend_from_slice(&p.data);
        }
        Ok(Self {
            shape: Shape4 { n, ..base },
            data,
        })
    }
}

impl<T: Real> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let preview: Vec<_> = self.data.iter().take(8).collect();
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &preview)
            .finish()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn s(n: usize, c: usize, h: usize, w: usize) -> Shape4 {
        Shape4 { n, c, h, w }
    }

    #[test]
    fn zeros_cases() {
        let t = Tensor::<f32>::zeros(s(1, 1, 2, 2)).unwrap();
        assert_eq!(t.data(), &[0.0; 4]);
        let t = Tensor::<f32>::zeros(s(2, 3, 4, 4)).unwrap();
        assert_eq!(t.len(), 96);
        assert_eq!(t.shape(), s(2, 3, 4, 4));
        assert!(t.data().iter().all(|&v| v == 0.0));
        assert!(matches!(
            Tensor::<f32>::zeros(s(1, 0, 2, 2)),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn randn_is_deterministic() {
        let a = Tensor::<f32>::randn(s(2, 3, 5, 7), 11, 0.5).unwrap();
        let b = Tensor::<f32>::randn(s(2, 3, 5, 7), 11, 0.5).unwrap();
        assert_eq!(
            a.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        let c = Tensor::<f32>::randn(s(2, 3, 5, 7), 12, 0.5).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn randn_moments() {
        let t = Tensor::<f32>::randn(s(1, 1, 100, 100), 7, 1.0).unwrap();
        let n = t.len() as f64;
        let mean = t.data().iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = t.data().iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!(mean.abs() <= 0.05, "mean {mean}");
        assert!((0.9..=1.1).contains(&var.sqrt()), "std {}", var.sqrt());
        // 5 sigma / sqrt(N) bound
        assert!(mean.abs() <= 5.0 / n.sqrt());
    }

    #[test]
    fn randn_rejects_bad_stddev() {
        assert!(matches!(
            Tensor::<f32>::randn(s(1, 1, 2, 2), 0, 0.0),
            Err(Error::Parameter(_))
        ));
        assert!(matches!(
            Tensor::<f32>::randn(s(1, 1, 2, 2), 0, -1.0),
            Err(Error::Parameter(_))
        ));
    }

    #[test]
    fn concat_and_slice_examples() {
        let a = Tensor::<f32>::randn(s(1, 2, 4, 4), 1, 1.0).unwrap();
        let b = Tensor::<f32>::randn(s(1, 3, 4, 4), 2, 1.0).unwrap();
        let ab = Tensor::concat_channels(&[&a, &b]).unwrap();
        assert_eq!(ab.shape(), s(1, 5, 4, 4));
        assert_eq!(Tensor::concat_channels(&[&a]).unwrap(), a);

        let t = Tensor::<f32>::randn(s(1, 5, 2, 2), 3, 1.0).unwrap();
        assert_eq!(t.slice_channels(0..5).unwrap(), t);
        assert_eq!(t.slice_channels(2..5).unwrap().shape(), s(1, 3, 2, 2));
        assert!(t.slice_channels(3..3).is_err());
        assert!(t.slice_channels(2..6).is_err());

        let wrong = Tensor::<f32>::zeros(s(1, 1, 4, 5)).unwrap();
        assert!(matches!(
            Tensor::concat_channels(&[&a, &wrong]),
            Err(Error::Shape(_))
        ));
        assert!(Tensor::<f32>::concat_channels(&[]).is_err());
    }

    #[test]
    fn concat_channel_order_per_batch_entry() {
        let a = Tensor::<f32>::from_vec(s(2, 1, 1, 1), vec![1.0, 2.0]).unwrap();
        let b = Tensor::<f32>::from_vec(s(2, 1, 1, 1), vec![10.0, 20.0]).unwrap();
        let ab = Tensor::concat_channels(&[&a, &b]).unwrap();
        assert_eq!(ab.data(), &[1.0, 10.0, 2.0, 20.0]);
    }

    #[test]
    fn gemm_transposes() {
        // a = [[1,2,3],[4,5,6]], b = [[1,0],[0,1],[1,1]]
        let a = [1.0f64, 2., 3., 4., 5., 6.];
        let b = [1.0f64, 0., 0., 1., 1., 1.];
        let mut c = [0.0f64; 4];
        f64::gemm(2, 3, 2, &a, false, &b, false, 0.0, &mut c);
        assert_eq!(c, [4., 5., 10., 11.]);
        // a^T stored as 3x2
        let at = [1.0f64, 4., 2., 5., 3., 6.];
        let bt = [1.0f64, 0., 1., 0., 1., 1.];
        let mut c2 = [1.0f64; 4];
        f64::gemm(2, 3, 2, &at, true, &bt, true, 1.0, &mut c2);
        assert_eq!(c2, [5., 6., 11., 12.]);
    }

    fn arb_part(n: usize, h: usize, w: usize) -> impl Strategy<Value = Tensor<f32>> {
        (1usize..4, any::<u64>()).prop_map(move |(c, seed)| {
            Tensor::randn(Shape4 { n, c, h, w }, seed, 1.0).unwrap()
        })
    }

    proptest! {
        #[test]
        fn slice_recovers_concat_parts(
            parts in (1usize..3, 1usize..4, 1usize..4).prop_flat_map(|(n, h, w)| {
                proptest::collection::vec(arb_part(n, h, w), 1..4)
            })
        ) {
            let refs: Vec<&Tensor<f32>> = parts.iter().collect();
            let cat = Tensor::concat_channels(&refs).unwrap();
            let mut lo = 0;
            for p in &parts {
                let hi = lo + p.shape().c;
                let back = cat.slice_channels(lo..hi).unwrap();
                prop_assert_eq!(
                    back.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                    p.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
                );
                lo = hi;
            }
        }

        #[test]
        fn concat_is_associative(
            parts in (1usize..3, 1usize..4, 1usize..4).prop_flat_map(|(n, h, w)| {
                (arb_part(n, h, w), arb_part(n, h, w), arb_part(n, h, w))
            })
        ) {
            let (a, b, c) = parts;
            let bc = Tensor::concat_channels(&[&b, &c]).unwrap();
            let left = Tensor::concat_channels(&[&a, &bc]).unwrap();
            let flat = Tensor::concat_channels(&[&a, &b, &c]).unwrap();
            prop_assert_eq!(left, flat);
        }
    }
}
