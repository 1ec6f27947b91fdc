//! Image and mask resampling to arbitrary sizes.

use crate::autodiff::resize_bilinear_kernel;
use crate::error::{Error, Result};
use crate::mask::LabelMask;
use crate::tensor::Tensor;

/// Bilinear resize with half-pixel sampling, the same interpolation the
/// decoder's upsampling uses.
pub fn resize_bilinear(image: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    if h == 0 || w == 0 {
        return Err(Error::shape(format!("resize target {h}x{w} must be positive")));
    }
    Ok(resize_bilinear_kernel(image, h, w))
}

/// Nearest-neighbour resize; each output pixel copies the input pixel whose
/// area contains its center, so labels are never blended.
pub fn resize_nearest(mask: &LabelMask, h: usize, w: usize) -> Result<LabelMask> {
    if h == 0 || w == 0 {
        return Err(Error::shape(format!("resize target {h}x{w} must be positive")));
    }
    let src = |o: usize, out: usize, inp: usize| ((2 * o + 1) * inp / (2 * out)).min(inp - 1);
    let mut data = Vec::with_capacity(mask.n * h * w);
    for n in 0..mask.n {
        for y in 0..h {
            let sy = src(y, h, mask.h);
            data.extend((0..w).map(|x| mask.get(n, sy, src(x, w, mask.w))));
        }
    }
    LabelMask::new(mask.n, h, w, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape4;

    fn ramp(h: usize, w: usize) -> Tensor {
        let s = Shape4::new(1, 3, h, w).unwrap();
        let data = (0..s.numel())
            .map(|i| {
                let (y, x) = ((i / w) % h, i % w);
                (x as f32 + 0.5) / w as f32 * 0.5 + (y as f32 + 0.5) / h as f32 * 0.5
            })
            .collect();
        Tensor::from_vec(s, data).unwrap()
    }

    #[test]
    fn identity_size_is_unchanged() {
        let img = ramp(6, 10);
        assert_eq!(resize_bilinear(&img, 6, 10).unwrap(), img);
        let mask = LabelMask::new(1, 2, 3, vec![0, 1, 2, 3, 4, 5]).unwrap();
        assert_eq!(resize_nearest(&mask, 2, 3).unwrap(), mask);
    }

    #[test]
    fn constant_stays_constant() {
        let img = Tensor::full(Shape4::new(2, 3, 7, 5).unwrap(), 0.375).unwrap();
        let out = resize_bilinear(&img, 13, 4).unwrap();
        assert!(out.data().iter().all(|&v| (v - 0.375).abs() < 1e-7));
    }

    #[test]
    fn smooth_ramp_survives_down_and_up() {
        // Interior pixels of a linear ramp are reproduced exactly by bilinear
        // interpolation; only the clamped border band deviates, by at most
        // one source step along each axis.
        let (h, w) = (32, 48);
        let img = ramp(h, w);
        let back = resize_bilinear(&resize_bilinear(&img, h / 2, w / 2).unwrap(), h, w).unwrap();
        let step = 0.5 / h as f32 * 2.0 + 0.5 / w as f32 * 2.0;
        let mut interior = 0.0f32;
        for (i, (a, b)) in img.data().iter().zip(back.data()).enumerate() {
            let (y, x) = ((i / w) % h, i % w);
            let d = (a - b).abs();
            assert!(d <= step + 1e-6, "pixel {y},{x} off by {d}");
            if (2..h - 2).contains(&y) && (2..w - 2).contains(&x) {
                interior = interior.max(d);
            }
        }
        assert!(interior < 1e-5, "interior error {interior}");
    }

    #[test]
    fn nearest_never_invents_labels() {
        let mask = LabelMask::new(1, 3, 3, vec![0, 1, 2, 3, 4, 5, 6, 7, 8]).unwrap();
        let up = resize_nearest(&mask, 7, 5).unwrap();
        assert!(up.data.iter().all(|l| mask.data.contains(l)));
        let down = resize_nearest(&up, 3, 3).unwrap();
        assert_eq!(down, mask);
        assert_eq!(resize_nearest(&mask, 6, 6).unwrap().get(0, 5, 5), 8);
    }

    #[test]
    fn zero_target_is_rejected() {
        assert!(resize_bilinear(&ramp(4, 4), 0, 4).is_err());
        assert!(resize_nearest(&LabelMask::filled(1, 2, 2, 0), 2, 0).is_err());
    }
}
