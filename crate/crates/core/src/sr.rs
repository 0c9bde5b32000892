//! Resolution alignment: self-supervised detail-injection super-resolution
//! of the IR channels and six-channel fusion with RGB.
//!
//! The network predicts a residual on top of a bicubic upsample. It is
//! trained at a reduced scale, with each IR image serving as the target for
//! its own degraded copy, and then applied at the full RGB resolution.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::impl_parameters;
use crate::metrics::psnr;
use crate::model::layers::Conv;
use crate::numerics::ops::{self, resize_bicubic};
use crate::params::{global_norm, scale_all, zeros_like, Parameters};
use crate::rng::{self, Stream};
use crate::scale::ScaleFactor;
use crate::tensor::Tensor;
use crate::train::checkpoint::Archive;
use crate::train::optim::{poly_lr, AdamW, AdamWConfig};

/// Smallest extent `degrade` will produce.
pub const MIN_DEGRADED_EXTENT: usize = 8;

/// Bicubic reduction by `factor`; extents round to nearest.
pub fn degrade(img: &Tensor, factor: ScaleFactor) -> Result<Tensor> {
    let (_, h, w) = img.dims3()?;
    if factor.value() < 1.0 {
        return Err(Error::InvalidArgument(format!("degrade factor {factor} must be > 1")));
    }
    if factor.is_identity() {
        return Ok(img.clone());
    }
    let (oh, ow) = (factor.shrink(h), factor.shrink(w));
    if oh < MIN_DEGRADED_EXTENT || ow < MIN_DEGRADED_EXTENT {
        return Err(Error::InvalidArgument(format!(
            "degrading {h}x{w} by {factor} gives {oh}x{ow}, below {MIN_DEGRADED_EXTENT}"
        )));
    }
    resize_bicubic(img, oh, ow)
}

/// Three-layer residual predictor, `3 -> hidden -> hidden -> 3`, 3x3 kernels.
#[derive(Clone, Debug, PartialEq)]
pub struct SrNet {
    pub conv1: Conv,
    pub conv2: Conv,
    pub conv3: Conv,
}

impl_parameters!(SrNet { conv1, conv2, conv3 });

struct NetCache {
    pre1: Tensor,
    act1: Tensor,
    pre2: Tensor,
    act2: Tensor,
}

impl SrNet {
    /// The last layer starts at zero so an untrained model is plain bicubic.
    pub fn init(hidden: usize, rng: &mut impl Rng) -> Self {
        let mut conv3 = Conv::init(hidden, 3, 3, rng);
        conv3.w.fill(0.0);
        Self {
            conv1: Conv::init(3, hidden, 3, rng),
            conv2: Conv::init(hidden, hidden, 3, rng),
            conv3,
        }
    }

    fn forward_cached(&self, up: &Tensor) -> Result<(Tensor, NetCache)> {
        let pre1 = self.conv1.forward(up)?;
        let act1 = ops::silu(&pre1);
        let pre2 = self.conv2.forward(&act1)?;
        let act2 = ops::silu(&pre2);
        let r = self.conv3.forward(&act2)?;
        Ok((r, NetCache { pre1, act1, pre2, act2 }))
    }

    pub fn residual(&self, up: &Tensor) -> Result<Tensor> {
        Ok(self.forward_cached(up)?.0)
    }

    fn backward(&self, up: &Tensor, c: &NetCache, dr: &Tensor, grads: &mut Self) -> Result<Tensor> {
        let da2 = self.conv3.backward(&c.act2, dr, &mut grads.conv3)?;
        let dp2 = ops::silu_vjp(&c.pre2, &da2)?;
        let da1 = self.conv2.backward(&c.act1, &dp2, &mut grads.conv2)?;
        let dp1 = ops::silu_vjp(&c.pre1, &da1)?;
        self.conv1.backward(up, &dp1, &mut grads.conv1)
    }

    /// `(residual, d<dr, residual>/d up)` for gradient checks of the residual path.
    pub fn residual_vjp(&self, up: &Tensor, dr: &Tensor) -> Result<(Tensor, Self)> {
        let (_, cache) = self.forward_cached(up)?;
        let mut grads = zeros_like(self);
        let dup = self.backward(up, &cache, dr, &mut grads)?;
        Ok((dup, grads))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SrModel {
    pub net: SrNet,
    /// Ratio between the training target and its degraded input.
    pub factor: ScaleFactor,
    pub initial_loss: Option<f64>,
    pub final_loss: Option<f64>,
}

impl Parameters for SrModel {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.net.visit(prefix, f)
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.net.visit_mut(prefix, f)
    }
}

impl SrModel {
    pub fn untrained(hidden: usize, factor: ScaleFactor, seed: u64) -> Self {
        let mut r = rng::stream(seed, Stream::Init, 1);
        Self {
            net: SrNet::init(hidden, &mut r),
            factor,
            initial_loss: None,
            final_loss: None,
        }
    }
}

const CHECKPOINT_KIND: &str = "super_resolution";

impl SrModel {
    pub fn hidden(&self) -> usize {
        self.net.conv1.w.shape()[0]
    }

    pub fn to_archive(&self) -> Archive {
        let mut a = Archive::new(serde_json::json!({
            "kind": CHECKPOINT_KIND,
            "hidden": self.hidden(),
            "factor": self.factor,
            "initial_loss": self.initial_loss,
            "final_loss": self.final_loss,
        }));
        a.push_params("net", &self.net);
        a
    }

    pub fn from_archive(a: &Archive) -> Result<Self> {
        let kind: String = a.meta_field("kind")?;
        if kind != CHECKPOINT_KIND {
            return Err(Error::Validation(format!(
                "checkpoint holds a '{kind}', not a super-resolution model"
            )));
        }
        let mut m = SrModel::untrained(a.meta_field("hidden")?, a.meta_field("factor")?, 0);
        a.load_params("net", &mut m.net)?;
        m.initial_loss = a.meta_field("initial_loss")?;
        m.final_loss = a.meta_field("final_loss")?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_archive().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_archive(&Archive::load(path)?)
    }
}

/// `clamp(up + net(up), 0, 1)` with `up` the bicubic upsample of `low`.
pub fn sr_forward(m: &SrModel, low: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (c, _, _) = low.dims3()?;
    if c != 3 {
        return Err(Error::ChannelMismatch { expected: 3, got: c });
    }
    let up = resize_bicubic(low, out_h, out_w)?;
    let r = m.net.residual(&up)?;
    up.zip_map(&r, |u, d| (u + d).clamp(0.0, 1.0))
}

/// Super-resolves an IR image onto the RGB grid.
pub fn sr_apply(m: &SrModel, ir: &Tensor, rgb_dims: (usize, usize)) -> Result<Tensor> {
    let (_, h, w) = ir.dims3()?;
    if rgb_dims.0 < h || rgb_dims.1 < w {
        return Err(Error::InvalidArgument(format!(
            "target {}x{} is smaller than the IR image {h}x{w}",
            rgb_dims.0, rgb_dims.1
        )));
    }
    sr_forward(m, ir, rgb_dims.0, rgb_dims.1)
}

/// `[R, G, B, IR1, IR2, IR3]`.
pub fn fuse_channels(rgb: &Tensor, ir_sr: &Tensor) -> Result<Tensor> {
    let (c1, h1, w1) = rgb.dims3()?;
    let (c2, h2, w2) = ir_sr.dims3()?;
    if (c1, c2) != (3, 3) || (h1, w1) != (h2, w2) {
        return Err(Error::shape(
            "fuse_channels",
            format!("rgb {:?} vs ir {:?}", rgb.shape(), ir_sr.shape()),
        ));
    }
    Tensor::cat0(&[rgb, ir_sr])
}

/// Inverse of [`fuse_channels`].
pub fn split_channels(fused: &Tensor) -> Result<(Tensor, Tensor)> {
    let (c, _, _) = fused.dims3()?;
    if c != 6 {
        return Err(Error::ChannelMismatch { expected: 6, got: c });
    }
    Ok((fused.narrow0(0, 3)?, fused.narrow0(3, 3)?))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SrTrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    /// Side of the full-resolution training crop; must map to an integer
    /// extent under the factor.
    pub patch: usize,
    pub lr: f64,
    pub hidden: usize,
    pub seed: u64,
}

impl Default for SrTrainConfig {
    fn default() -> Self {
        Self {
            iterations: 400,
            batch_size: 8,
            patch: 30,
            lr: 2e-3,
            hidden: 32,
            seed: 0,
        }
    }
}

struct PatchPair {
    up: Tensor,
    target: Tensor,
}

fn make_pair(img: &Tensor, factor: ScaleFactor, patch: usize, r: &mut impl Rng) -> Result<PatchPair> {
    let (c, h, w) = img.dims3()?;
    let (y0, x0) = (r.gen_range(0..=h - patch), r.gen_range(0..=w - patch));
    let target = Tensor::from_fn(&[c, patch, patch], |i| {
        let (ch, rem) = (i / (patch * patch), i % (patch * patch));
        img.data()[(ch * h + y0 + rem / patch) * w + x0 + rem % patch]
    });
    let small = factor.shrink(patch);
    let low = resize_bicubic(&target, small, small)?;
    Ok(PatchPair {
        up: resize_bicubic(&low, patch, patch)?,
        target,
    })
}

/// Mean squared error of the clamped output over `pairs`, with gradients
/// summed into `grads` when given.
fn batch_loss(net: &SrNet, pairs: &[PatchPair], mut grads: Option<&mut SrNet>) -> Result<f64> {
    let n: usize = pairs.iter().map(|p| p.target.len()).sum();
    let mut total = 0.0;
    for p in pairs {
        let (r, cache) = net.forward_cached(&p.up)?;
        let mut dr = Tensor::zeros(r.shape());
        for (i, ((&u, &d), &t)) in p.up.data().iter().zip(r.data()).zip(p.target.data()).enumerate() {
            let raw = u + d;
            let y = raw.clamp(0.0, 1.0);
            total += (y - t) * (y - t);
            if raw > 0.0 && raw < 1.0 {
                dr.data_mut()[i] = 2.0 * (y - t) / n as f64;
            }
        }
        if let Some(g) = grads.as_deref_mut() {
            net.backward(&p.up, &cache, &dr, g)?;
        }
    }
    Ok(total / n as f64)
}

/// Trains the residual net on `(degrade(ir), ir)` crops with a squared-error
/// loss. Fails if the loss blows up past ten times its starting value.
pub fn sr_train_selfsupervised(irs: &[Tensor], factor: ScaleFactor, cfg: &SrTrainConfig) -> Result<SrModel> {
    if irs.is_empty() {
        return Err(Error::InvalidArgument("no images to train super-resolution on".into()));
    }
    if factor.value() < 1.0 {
        return Err(Error::InvalidArgument(format!("factor {factor} must be > 1")));
    }
    if cfg.patch == 0 || !factor.divides(cfg.patch) || cfg.batch_size == 0 || !(cfg.lr > 0.0) {
        return Err(Error::Config(format!(
            "sr training needs batch_size > 0, lr > 0 and a patch divisible by {factor}, got patch {}",
            cfg.patch
        )));
    }
    for img in irs {
        let (c, h, w) = img.dims3()?;
        if c != 3 || h < cfg.patch || w < cfg.patch {
            return Err(Error::shape(
                "sr_train",
                format!("image {:?} vs {}x{} crops", img.shape(), cfg.patch, cfg.patch),
            ));
        }
    }
    let mut model = SrModel::untrained(cfg.hidden, factor, cfg.seed);
    let draw = |stream_index: u64| -> Result<Vec<PatchPair>> {
        let mut r = rng::stream(cfg.seed, Stream::SrPatches, stream_index);
        (0..cfg.batch_size)
            .map(|_| {
                let img = &irs[r.gen_range(0..irs.len())];
                make_pair(img, factor, cfg.patch, &mut r)
            })
            .collect()
    };
    let probe = draw(u64::MAX)?;
    let initial = batch_loss(&model.net, &probe, None)?;
    let mut opt = AdamW::new(
        &model.net,
        AdamWConfig {
            weight_decay: 0.0,
            ..AdamWConfig::default()
        },
    );
    let mut first_step_loss = None;
    for it in 0..cfg.iterations {
        let batch = draw(it as u64)?;
        let mut grads = zeros_like(&model.net);
        let loss = batch_loss(&model.net, &batch, Some(&mut grads))?;
        let reference = *first_step_loss.get_or_insert(loss);
        if !loss.is_finite() || loss > 10.0 * reference.max(1e-12) {
            return Err(Error::Diverged(format!(
                "super-resolution loss {loss:.3e} at iteration {it} exceeds 10x its start \
                 ({reference:.3e}); lower the learning rate"
            )));
        }
        let norm = global_norm(&grads);
        if norm > 1.0 {
            scale_all(&mut grads, 1.0 / norm);
        }
        opt.step(&mut model.net, &grads, poly_lr(it, cfg.lr, 0, cfg.iterations, 0.9))?;
    }
    model.initial_loss = Some(initial);
    model.final_loss = Some(batch_loss(&model.net, &probe, None)?);
    Ok(model)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SrPsnrRow {
    pub id: String,
    pub model_db: f64,
    pub bicubic_db: f64,
}

/// Mean PSNR of the model and of plain bicubic when restoring each image
/// from its degraded copy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SrPsnrReport {
    pub model_db: f64,
    pub bicubic_db: f64,
    pub rows: Vec<SrPsnrRow>,
}

pub fn sr_psnr_report(m: &SrModel, images: &[(String, Tensor)]) -> Result<SrPsnrReport> {
    if images.is_empty() {
        return Err(Error::InvalidArgument("PSNR report over zero images".into()));
    }
    let mut rows = Vec::with_capacity(images.len());
    for (id, img) in images {
        let (_, h, w) = img.dims3()?;
        let low = degrade(img, m.factor)?;
        let bic = resize_bicubic(&low, h, w)?.map(|v| v.clamp(0.0, 1.0));
        let sr = sr_forward(m, &low, h, w)?;
        rows.push(SrPsnrRow {
            id: id.clone(),
            model_db: crate::metrics::psnr_for_log(psnr(&sr, img, 1.0)?),
            bicubic_db: crate::metrics::psnr_for_log(psnr(&bic, img, 1.0)?),
        });
    }
    let n = rows.len() as f64;
    Ok(SrPsnrReport {
        model_db: rows.iter().map(|r| r.model_db).sum::<f64>() / n,
        bicubic_db: rows.iter().map(|r| r.bicubic_db).sum::<f64>() / n,
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{grad_check, FnOp};
    use crate::params::{load_tensors, tensors};

    fn rand_img(h: usize, w: usize, seed: u64) -> Tensor {
        let mut r = rng::stream(seed, Stream::Test, 0);
        Tensor::from_fn(&[3, h, w], |_| r.gen_range(0.0..1.0))
    }

    fn f(s: &str) -> ScaleFactor {
        s.parse().unwrap()
    }

    #[test]
    fn degrade_shapes() {
        assert_eq!(degrade(&rand_img(64, 64, 0), f("2")).unwrap().shape(), &[3, 32, 32]);
        assert_eq!(
            degrade(&rand_img(288, 384, 0), f("10/3")).unwrap().shape(),
            &[3, 86, 115]
        );
        let c = degrade(&Tensor::full(&[3, 40, 40], 0.3), f("10/3")).unwrap();
        assert!(c.data().iter().all(|&v| (v - 0.3).abs() < 1e-12));
        assert!(degrade(&rand_img(20, 20, 0), f("10/3")).is_err());
        assert!(degrade(&rand_img(20, 20, 0), f("1/2")).is_err());
        let img = rand_img(9, 9, 1);
        assert_eq!(degrade(&img, f("1")).unwrap(), img);
    }

    #[test]
    fn untrained_model_is_bicubic() {
        let m = SrModel::untrained(8, f("10/3"), 0);
        let low = rand_img(9, 12, 2);
        let out = sr_forward(&m, &low, 30, 40).unwrap();
        let bic = resize_bicubic(&low, 30, 40).unwrap().map(|v| v.clamp(0.0, 1.0));
        assert_eq!(out, bic);
        let applied = sr_apply(&m, &low, (30, 40)).unwrap();
        assert_eq!(applied.shape(), &[3, 30, 40]);
        assert!(applied.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(sr_apply(&m, &low, (8, 40)).is_err());
    }

    #[test]
    fn sensor_resolution_output() {
        let m = SrModel::untrained(2, f("10/3"), 0);
        let ir = rand_img(288, 384, 3);
        assert_eq!(sr_apply(&m, &ir, (960, 1280)).unwrap().shape(), &[3, 960, 1280]);
    }

    #[test]
    fn residual_path_grad_check() {
        let mut m = SrModel::untrained(4, f("2"), 1);
        let mut r = rng::stream(4, Stream::Test, 1);
        m.net.conv3.w = Tensor::from_fn(m.net.conv3.w.shape(), |_| r.gen_range(-0.3..0.3));
        let net = m.net.clone();
        let (n1, n2) = (net.clone(), net.clone());
        let op = FnOp::new(
            "sr_residual",
            move |xs: &[Tensor]| {
                let mut p = n1.clone();
                load_tensors(&mut p, &xs[1..])?;
                p.residual(&xs[0])
            },
            move |xs: &[Tensor], g: &Tensor| {
                let mut p = n2.clone();
                load_tensors(&mut p, &xs[1..])?;
                let (dx, gp) = p.residual_vjp(&xs[0], g)?;
                let mut out = vec![dx];
                out.extend(tensors(&gp));
                Ok(out)
            },
        );
        let mut inputs = vec![rand_img(5, 4, 5)];
        inputs.extend(tensors(&net));
        let rep = grad_check(&op, &inputs, 1e-5).unwrap();
        assert!(rep.passed, "{rep}");
    }

    #[test]
    fn fuse_and_split() {
        let (a, b) = (rand_img(48, 48, 6), rand_img(48, 48, 7));
        let fused = fuse_channels(&a, &b).unwrap();
        assert_eq!(fused.shape(), &[6, 48, 48]);
        assert_eq!(&fused.data()[..a.len()], a.data());
        let (a2, b2) = split_channels(&fused).unwrap();
        assert_eq!((a2, b2), (a.clone(), b));
        let err = fuse_channels(&a, &rand_img(24, 24, 8)).unwrap_err().to_string();
        assert!(err.contains("[3, 48, 48]") && err.contains("[3, 24, 24]"), "{err}");
    }

    #[test]
    fn training_reduces_loss() {
        let imgs: Vec<Tensor> = (0..3)
            .map(|s| {
                let p = crate::data::synth::synth_parts(s, 0, &Default::default()).unwrap();
                p.ir
            })
            .collect();
        let cfg = SrTrainConfig {
            iterations: 60,
            batch_size: 8,
            hidden: 16,
            ..SrTrainConfig::default()
        };
        let m = sr_train_selfsupervised(&imgs, f("10/3"), &cfg).unwrap();
        assert!(m.final_loss.unwrap() < m.initial_loss.unwrap());
        let bad = SrTrainConfig {
            patch: 29,
            ..cfg.clone()
        };
        assert!(sr_train_selfsupervised(&imgs, f("10/3"), &bad).is_err());
        assert!(sr_train_selfsupervised(&[], f("10/3"), &cfg).is_err());
    }

    #[test]
    fn identity_factor_trains_to_near_zero_loss() {
        let imgs = vec![rand_img(12, 12, 9)];
        let cfg = SrTrainConfig {
            iterations: 3,
            batch_size: 1,
            patch: 6,
            hidden: 4,
            ..SrTrainConfig::default()
        };
        let m = sr_train_selfsupervised(&imgs, f("1"), &cfg).unwrap();
        assert!(m.initial_loss.unwrap() < 1e-20);
        assert!(m.final_loss.unwrap() < 1e-6);
    }

    #[test]
    fn checkpoint_roundtrip() {
        let m = SrModel::untrained(4, f("10/3"), 2);
        let back = SrModel::from_archive(&Archive::from_bytes(&m.to_archive().to_bytes().unwrap()).unwrap()).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.hidden(), 4);
    }
}
