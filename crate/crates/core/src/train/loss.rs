//! Pixel-wise softmax cross-entropy.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Sum over pixels of `-log softmax(logits)[target]` for one `[K, H, W]`
/// logit map and `[H, W]` labels, with the gradient of that sum scaled by
/// `grad_scale`.
pub fn cross_entropy_sum(logits: &Tensor, target: &Tensor, grad_scale: f64) -> Result<(f64, Tensor)> {
    let (k, h, w) = logits.dims3()?;
    if target.shape() != [h, w] {
        return Err(Error::shape(
            "cross_entropy",
            format!("logits {:?} vs target {:?}", logits.shape(), target.shape()),
        ));
    }
    let plane = h * w;
    let z = logits.data();
    let mut grad = vec![0.0; z.len()];
    let mut total = 0.0;
    for (p, &t) in target.data().iter().enumerate() {
        if !(t >= 0.0 && t.fract() == 0.0 && (t as usize) < k) {
            return Err(Error::InvalidArgument(format!(
                "target label {t} at pixel {p} outside 0..{k}"
            )));
        }
        let t = t as usize;
        let max = (0..k).map(|c| z[c * plane + p]).fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = (0..k).map(|c| (z[c * plane + p] - max).exp()).sum();
        let log_denom = denom.ln();
        total += log_denom - (z[t * plane + p] - max);
        for c in 0..k {
            let prob = (z[c * plane + p] - max).exp() / denom;
            grad[c * plane + p] = grad_scale * (prob - f64::from(u8::from(c == t)));
        }
    }
    Ok((total, Tensor::new(logits.shape().to_vec(), grad)?))
}

/// Mean cross-entropy over all pixels of a `[B, K, H, W]` batch against
/// `[B, H, W]` labels, and its gradient w.r.t. the logits.
pub fn cross_entropy(logits: &Tensor, target: &Tensor) -> Result<(f64, Tensor)> {
    let (b, k, h, w) = logits.dims4()?;
    if target.shape() != [b, h, w] {
        return Err(Error::shape(
            "cross_entropy",
            format!("logits {:?} vs target {:?}", logits.shape(), target.shape()),
        ));
    }
    let n = (b * h * w) as f64;
    let mut grads = Vec::with_capacity(logits.len());
    let mut total = 0.0;
    for i in 0..b {
        let l = logits.narrow0(i, 1)?.reshape(&[k, h, w])?;
        let t = target.narrow0(i, 1)?.reshape(&[h, w])?;
        let (s, g) = cross_entropy_sum(&l, &t, 1.0 / n)?;
        total += s;
        grads.extend_from_slice(g.data());
    }
    Ok((total / n, Tensor::new(logits.shape().to_vec(), grads)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{grad_check, FnOp};
    use crate::rng::{self, Stream};
    use rand::Rng;

    #[test]
    fn confident_and_uniform() {
        let target = Tensor::new(vec![1, 2, 2], vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        let logits = Tensor::from_fn(&[1, 2, 2, 2], |i| {
            let (c, p) = (i / 4, i % 4);
            if target.data()[p] as usize == c {
                20.0
            } else {
                0.0
            }
        });
        assert!(cross_entropy(&logits, &target).unwrap().0 < 1e-8);
        let (l, _) = cross_entropy(&Tensor::zeros(&[1, 2, 2, 2]), &target).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn stable_for_huge_logits() {
        let logits = Tensor::new(vec![1, 2, 1, 1], vec![1000.0, -1000.0]).unwrap();
        let t = Tensor::new(vec![1, 1, 1], vec![1.0]).unwrap();
        let (l, g) = cross_entropy(&logits, &t).unwrap();
        assert!((l - 2000.0).abs() < 1e-9);
        assert!(g.is_finite());
    }

    #[test]
    fn rejects_bad_labels() {
        let logits = Tensor::zeros(&[1, 2, 1, 2]);
        assert!(cross_entropy(&logits, &Tensor::new(vec![1, 1, 2], vec![0.0, 2.0]).unwrap()).is_err());
        assert!(cross_entropy(&logits, &Tensor::new(vec![1, 1, 2], vec![0.0, -1.0]).unwrap()).is_err());
        assert!(cross_entropy(&logits, &Tensor::zeros(&[1, 2, 1])).is_err());
    }

    #[test]
    fn gradient_check() {
        let mut r = rng::stream(0, Stream::Test, 0);
        let target = Tensor::from_fn(&[2, 3, 2], |_| f64::from(r.gen_range(0u8..2)));
        let logits = Tensor::from_fn(&[2, 2, 3, 2], |_| 3.0 * r.gen_range(-1.0..1.0));
        let t2 = target.clone();
        let op = FnOp::new(
            "cross_entropy",
            move |xs: &[Tensor]| Ok(Tensor::scalar(cross_entropy(&xs[0], &target)?.0)),
            move |xs: &[Tensor], g: &Tensor| Ok(vec![cross_entropy(&xs[0], &t2)?.1.scale(g.data()[0])]),
        );
        let rep = grad_check(&op, &[logits], 1e-5).unwrap();
        assert!(rep.passed, "{rep}");
    }
}
