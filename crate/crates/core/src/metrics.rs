//! Pixel-level confusion counts, per-class IoU / mIoU, and PSNR.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Logged stand-in for an infinite PSNR.
pub const PSNR_LOG_CAP: f64 = 120.0;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl ClassCounts {
    /// `None` when the class never occurs in prediction or ground truth.
    pub fn iou(&self) -> Option<f64> {
        let denom = self.tp + self.fp + self.fn_;
        (denom > 0).then(|| self.tp as f64 / denom as f64)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub classes: Vec<ClassCounts>,
    pub images: u64,
}

fn label(v: f64, n: usize, what: &str) -> Result<usize> {
    if v >= 0.0 && v.fract() == 0.0 && (v as usize) < n {
        Ok(v as usize)
    } else {
        Err(Error::InvalidArgument(format!("{what} label {v} outside 0..{n}")))
    }
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        Self {
            classes: vec![ClassCounts::default(); num_classes],
            images: 0,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    /// Adds one `[H, W]` label map pair.
    pub fn accumulate(&mut self, pred: &Tensor, gt: &Tensor) -> Result<()> {
        pred.dims2()?;
        pred.expect_same_shape("confusion_accumulate", gt)?;
        let n = self.num_classes();
        let mut pairs = vec![0u64; n * n];
        for (&p, &g) in pred.data().iter().zip(gt.data()) {
            pairs[label(g, n, "ground-truth")? * n + label(p, n, "predicted")?] += 1;
        }
        let total = pred.len() as u64;
        for c in 0..n {
            let tp = pairs[c * n + c];
            let gt_c: u64 = pairs[c * n..(c + 1) * n].iter().sum();
            let pred_c: u64 = (0..n).map(|g| pairs[g * n + c]).sum();
            let k = &mut self.classes[c];
            k.tp += tp;
            k.fn_ += gt_c - tp;
            k.fp += pred_c - tp;
            k.tn += total + tp - gt_c - pred_c;
        }
        self.images += 1;
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.num_classes() != self.num_classes() {
            return Err(Error::InvalidArgument(format!(
                "merging {}-class and {}-class matrices",
                self.num_classes(),
                other.num_classes()
            )));
        }
        for (a, b) in self.classes.iter_mut().zip(&other.classes) {
            a.tp += b.tp;
            a.fp += b.fp;
            a.fn_ += b.fn_;
            a.tn += b.tn;
        }
        self.images += other.images;
        Ok(())
    }

    pub fn iou(&self) -> Vec<Option<f64>> {
        self.classes.iter().map(ClassCounts::iou).collect()
    }

    /// Mean IoU over classes that occur in prediction or ground truth.
    pub fn miou(&self) -> Result<f64> {
        let present: Vec<f64> = self.iou().into_iter().flatten().collect();
        if present.is_empty() {
            return Err(Error::InvalidArgument(
                "mIoU undefined: no class occurs in prediction or ground truth".into(),
            ));
        }
        Ok(present.iter().sum::<f64>() / present.len() as f64)
    }

    pub fn report(&self) -> Result<EvalReport> {
        Ok(EvalReport {
            miou: self.miou()?,
            iou: self.iou(),
            counts: self.classes.clone(),
            pixels: self.classes.first().map_or(0, |c| c.tp + c.fp + c.fn_ + c.tn),
            images: self.images,
        })
    }
}

/// Evaluation summary written as JSON.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub miou: f64,
    /// Per-class IoU; `null` for classes excluded from the mean.
    pub iou: Vec<Option<f64>>,
    pub counts: Vec<ClassCounts>,
    pub pixels: u64,
    pub images: u64,
}

/// `[K, H, W]` logits -> `[H, W]` labels; ties go to the lower class.
pub fn argmax_labels(logits: &Tensor) -> Result<Tensor> {
    let (k, h, w) = logits.dims3()?;
    let plane = h * w;
    let d = logits.data();
    Tensor::new(
        vec![h, w],
        (0..plane)
            .map(|p| {
                let mut best = 0;
                for c in 1..k {
                    if d[c * plane + p] > d[best * plane + p] {
                        best = c;
                    }
                }
                best as f64
            })
            .collect(),
    )
}

/// `10 log10(peak^2 / MSE)`; identical inputs give `+inf`.
pub fn psnr(a: &Tensor, b: &Tensor, peak: f64) -> Result<f64> {
    a.expect_same_shape("psnr", b)?;
    if a.is_empty() {
        return Err(Error::InvalidArgument("psnr of empty tensors".into()));
    }
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

/// PSNR as written to logs and reports.
pub fn psnr_for_log(db: f64) -> f64 {
    db.min(PSNR_LOG_CAP)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{self, Stream};
    use rand::Rng;

    fn labels(v: &[f64], h: usize, w: usize) -> Tensor {
        Tensor::new(vec![h, w], v.to_vec()).unwrap()
    }

    #[test]
    fn hand_example() {
        let mut cm = ConfusionMatrix::new(2);
        cm.accumulate(&labels(&[0.0; 4], 2, 2), &labels(&[1.0, 0.0, 0.0, 0.0], 2, 2))
            .unwrap();
        assert_eq!(
            cm.classes[0],
            ClassCounts {
                tp: 3,
                fp: 1,
                fn_: 0,
                tn: 0
            }
        );
        assert_eq!(
            cm.classes[1],
            ClassCounts {
                tp: 0,
                fp: 0,
                fn_: 1,
                tn: 3
            }
        );
        assert_eq!(cm.miou().unwrap(), 0.375);
    }

    #[test]
    fn perfect_and_swapped() {
        let gt = labels(&[1.0, 0.0, 1.0, 1.0, 0.0, 0.0], 2, 3);
        let pred = labels(&[0.0, 0.0, 1.0, 1.0, 1.0, 0.0], 2, 3);
        let mut cm = ConfusionMatrix::new(2);
        cm.accumulate(&gt, &gt).unwrap();
        assert_eq!(cm.miou().unwrap(), 1.0);
        assert!(cm.classes.iter().all(|c| c.fp == 0 && c.fn_ == 0));
        let (mut a, mut b) = (ConfusionMatrix::new(2), ConfusionMatrix::new(2));
        a.accumulate(&pred, &gt).unwrap();
        b.accumulate(&gt, &pred).unwrap();
        assert_eq!(a.miou().unwrap(), b.miou().unwrap());
    }

    #[test]
    fn empty_class_is_excluded_and_all_empty_errors() {
        let z = labels(&[0.0; 4], 2, 2);
        let mut cm = ConfusionMatrix::new(2);
        cm.accumulate(&z, &z).unwrap();
        assert_eq!(cm.iou(), vec![Some(1.0), None]);
        assert_eq!(cm.miou().unwrap(), 1.0);
        assert!(ConfusionMatrix::new(2).miou().is_err());
    }

    #[test]
    fn rejects_bad_labels_and_shapes() {
        let mut cm = ConfusionMatrix::new(2);
        assert!(cm.accumulate(&labels(&[2.0], 1, 1), &labels(&[0.0], 1, 1)).is_err());
        assert!(cm.accumulate(&labels(&[0.5], 1, 1), &labels(&[0.0], 1, 1)).is_err());
        assert!(cm
            .accumulate(&labels(&[0.0, 0.0], 1, 2), &labels(&[0.0, 0.0], 2, 1))
            .is_err());
    }

    fn brute_force_miou(pairs: &[(Vec<usize>, Vec<usize>)], n: usize) -> f64 {
        let mut ious = Vec::new();
        for c in 0..n {
            let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
            for (pred, gt) in pairs {
                for i in 0..pred.len() {
                    match (pred[i] == c, gt[i] == c) {
                        (true, true) => tp += 1,
                        (true, false) => fp += 1,
                        (false, true) => fn_ += 1,
                        _ => {}
                    }
                }
            }
            if tp + fp + fn_ > 0 {
                ious.push(tp as f64 / (tp + fp + fn_) as f64);
            }
        }
        ious.iter().sum::<f64>() / ious.len() as f64
    }

    #[test]
    fn random_cases_match_pixel_loop_and_stream_equals_single_pass() {
        let mut r = rng::stream(0, Stream::Test, 0);
        for _ in 0..200 {
            let n = r.gen_range(2..4);
            let imgs: Vec<(Vec<usize>, Vec<usize>)> = (0..r.gen_range(1..4))
                .map(|_| {
                    let p = (0..64).map(|_| r.gen_range(0..n)).collect();
                    let g = (0..64).map(|_| r.gen_range(0..n)).collect();
                    (p, g)
                })
                .collect();
            let to_t = |v: &Vec<usize>| labels(&v.iter().map(|&x| x as f64).collect::<Vec<_>>(), 8, 8);
            let mut streamed = ConfusionMatrix::new(n);
            let mut parts = Vec::new();
            for (p, g) in &imgs {
                streamed.accumulate(&to_t(p), &to_t(g)).unwrap();
                let mut one = ConfusionMatrix::new(n);
                one.accumulate(&to_t(p), &to_t(g)).unwrap();
                parts.push(one);
            }
            let mut merged = ConfusionMatrix::new(n);
            for p in parts.iter().rev() {
                merged.merge(p).unwrap();
            }
            assert_eq!(merged, streamed);
            // one tall image holding every pixel
            let cat = |sel: fn(&(Vec<usize>, Vec<usize>)) -> &Vec<usize>| {
                let v: Vec<f64> = imgs.iter().flat_map(|x| sel(x).iter().map(|&l| l as f64)).collect();
                labels(&v, 8 * imgs.len(), 8)
            };
            let mut single = ConfusionMatrix::new(n);
            single.accumulate(&cat(|x| &x.0), &cat(|x| &x.1)).unwrap();
            assert_eq!(single.classes, streamed.classes);
            let m = streamed.miou().unwrap();
            assert!((m - brute_force_miou(&imgs, n)).abs() <= 1e-12);
            for iou in streamed.iou().into_iter().flatten() {
                assert!((0.0..=1.0).contains(&iou));
            }
            let total = 64 * imgs.len() as u64;
            assert!(streamed.classes.iter().all(|c| c.tp + c.fp + c.fn_ + c.tn == total));
        }
    }

    #[test]
    fn argmax_ties_go_to_background() {
        let l = Tensor::new(vec![2, 1, 3], vec![0.0, 1.0, -1.0, 0.0, 0.5, 2.0]).unwrap();
        assert_eq!(argmax_labels(&l).unwrap().data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn psnr_examples() {
        let a = Tensor::from_fn(&[3, 4, 4], |i| (i as f64 * 0.01) % 1.0);
        assert_eq!(psnr(&a, &a, 1.0).unwrap(), f64::INFINITY);
        assert_eq!(psnr_for_log(f64::INFINITY), PSNR_LOG_CAP);
        let b = a.map(|v| v + 1.0 / 255.0);
        let want = 20.0 * 255f64.log10();
        assert!((psnr(&a, &b, 1.0).unwrap() - want).abs() < 1e-9);
        assert!((want - 48.1308).abs() < 1e-4);
        assert_eq!(psnr(&a, &b, 1.0).unwrap(), psnr(&b, &a, 1.0).unwrap());
        assert!(psnr(&a, &Tensor::zeros(&[3, 4, 3]), 1.0).is_err());
    }
}
