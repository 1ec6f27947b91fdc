//! Pixelwise softmax cross-entropy.

use crate::mask::LabelMask;
use crate::tensor::{Real, Tensor};

fn is_valid(label: u8, ignore: Option<u8>) -> bool {
    Some(label) != ignore
}

/// Mean over non-ignored pixels of `-log softmax(logits)[label]`; zero when
/// every pixel is ignored.
pub(crate) fn forward<T: Real>(logits: &Tensor<T>, labels: &LabelMask, ignore: Option<u8>) -> T {
    let s = logits.shape();
    let plane = s.plane();
    let mut total = 0.0f64;
    let mut count = 0usize;
    for n in 0..s.n {
        let img = logits.image(n);
        for (p, &label) in labels.image(n).iter().enumerate() {
            if !is_valid(label, ignore) {
                continue;
            }
            let max = (0..s.c).map(|c| img[c * plane + p]).fold(T::neg_infinity(), T::max);
            let sum: f64 = (0..s.c).map(|c| (img[c * plane + p] - max).as_f64().exp()).sum();
            total += sum.ln() - (img[label as usize * plane + p] - max).as_f64();
            count += 1;
        }
    }
    if count == 0 {
        T::zero()
    } else {
        T::from_f64_lossy(total / count as f64)
    }
}

/// `upstream · (softmax − onehot) / N_valid`.
pub(crate) fn backward<T: Real>(logits: &Tensor<T>, labels: &LabelMask, ignore: Option<u8>, upstream: T) -> Vec<T> {
    let s = logits.shape();
    let plane = s.plane();
    let count = labels.data.iter().filter(|&&l| is_valid(l, ignore)).count();
    let mut grad = vec![T::zero(); s.numel()];
    if count == 0 {
        return grad;
    }
    let scale = upstream / T::from_usize(count).expect("pixel count fits");
    for n in 0..s.n {
        let img = logits.image(n);
        let gimg = &mut grad[n * s.image_len()..(n + 1) * s.image_len()];
        for (p, &label) in labels.image(n).iter().enumerate() {
            if !is_valid(label, ignore) {
                continue;
            }
            let max = (0..s.c).map(|c| img[c * plane + p]).fold(T::neg_infinity(), T::max);
            let sum: T = (0..s.c).map(|c| (img[c * plane + p] - max).exp()).sum();
            for c in 0..s.c {
                let prob = (img[c * plane + p] - max).exp() / sum;
                let target = if c == label as usize { T::one() } else { T::zero() };
                gimg[c * plane + p] = scale * (prob - target);
            }
        }
    }
    grad
}
