//! UperNet-style decoder: pyramid pooling on the deepest grid, top-down
//! lateral fusion, multi-level concatenation and a per-pixel classifier.
//! Works in `[C, H, W]` layout.

use rand::Rng;

use crate::error::{Error, Result};
use crate::impl_parameters;
use crate::model::layers::{conv_silu, conv_silu_backward, Conv};
use crate::numerics::ops::{Kernel, Resample2d};
use crate::tensor::Tensor;

pub const PPM_BINS: [usize; 4] = [1, 2, 3, 6];

#[derive(Clone, Debug, PartialEq)]
pub struct UperDecoder {
    /// 1x1 conv per pooling bin, deepest width -> decoder width.
    pub ppm: Vec<Conv>,
    /// 3x3 over `[deepest, pooled...]`.
    pub bottleneck: Conv,
    /// 1x1 per shallower level.
    pub laterals: Vec<Conv>,
    /// 3x3 per shallower level.
    pub fpn: Vec<Conv>,
    /// 3x3 over all levels concatenated.
    pub fuse: Conv,
    /// 1x1 to class logits.
    pub classifier: Conv,
}

impl_parameters!(UperDecoder {
    ppm,
    bottleneck,
    laterals,
    fpn,
    fuse,
    classifier
});

#[derive(Clone, Debug)]
pub struct DecoderCache {
    feats: Vec<Tensor>,
    pooled: Vec<Tensor>,
    ppm_pre: Vec<Tensor>,
    ppm_cat: Tensor,
    bottleneck_pre: Tensor,
    lateral_pre: Vec<Tensor>,
    /// Top-down sums per level; the deepest entry is the pooling-module output.
    lat: Vec<Tensor>,
    fpn_pre: Vec<Tensor>,
    fuse_in: Tensor,
    fuse_pre: Tensor,
    fuse_out: Tensor,
}

fn extent(t: &Tensor) -> (usize, usize) {
    let s = t.shape();
    (s[1], s[2])
}

fn resampler(kernel: Kernel, from: (usize, usize), to: (usize, usize)) -> Result<Resample2d> {
    Resample2d::new(kernel, from.0, from.1, to.0, to.1)
}

impl UperDecoder {
    /// `level_dims` are encoder widths from shallowest to deepest.
    pub fn init(level_dims: &[usize], dim: usize, num_classes: usize, rng: &mut impl Rng) -> Self {
        let deepest = *level_dims.last().expect("at least one level");
        let shallow = &level_dims[..level_dims.len() - 1];
        Self {
            ppm: PPM_BINS.iter().map(|_| Conv::he_init(deepest, dim, 1, rng)).collect(),
            bottleneck: Conv::he_init(deepest + PPM_BINS.len() * dim, dim, 3, rng),
            laterals: shallow.iter().map(|&c| Conv::he_init(c, dim, 1, rng)).collect(),
            fpn: shallow.iter().map(|_| Conv::he_init(dim, dim, 3, rng)).collect(),
            fuse: Conv::he_init(level_dims.len() * dim, dim, 3, rng),
            classifier: Conv::init(dim, num_classes, 1, rng),
        }
    }

    pub fn levels(&self) -> usize {
        self.laterals.len() + 1
    }

    fn dim(&self) -> usize {
        self.classifier.w.shape()[1]
    }

    /// `features`: `[H_i, W_i, C_i]` grids, shallowest first.
    pub fn forward(&self, features: &[Tensor], out_h: usize, out_w: usize) -> Result<Tensor> {
        Ok(self.forward_cached(features, out_h, out_w)?.0)
    }

    pub fn forward_cached(&self, features: &[Tensor], out_h: usize, out_w: usize) -> Result<(Tensor, DecoderCache)> {
        let n = self.levels();
        if features.len() != n {
            return Err(Error::shape(
                "uper_decode",
                format!("{} feature levels for a {n}-level decoder", features.len()),
            ));
        }
        let feats: Vec<Tensor> = features.iter().map(|f| f.hwc_to_chw()).collect::<Result<_>>()?;
        let deepest = &feats[n - 1];
        let top = extent(deepest);

        let mut pooled = Vec::new();
        let mut ppm_pre = Vec::new();
        let mut parts = vec![deepest.clone()];
        for (conv, &bins) in self.ppm.iter().zip(&PPM_BINS) {
            let p = resampler(Kernel::AdaptiveMean, top, (bins, bins))?.apply(deepest)?;
            let (act, pre) = conv_silu(conv, &p)?;
            parts.push(resampler(Kernel::Bilinear, (bins, bins), top)?.apply(&act)?);
            pooled.push(p);
            ppm_pre.push(pre);
        }
        let ppm_cat = Tensor::cat0(&parts.iter().collect::<Vec<_>>())?;
        let (top_lat, bottleneck_pre) = conv_silu(&self.bottleneck, &ppm_cat)?;

        let mut lateral_pre = Vec::new();
        let mut lat = Vec::with_capacity(n);
        for (conv, f) in self.laterals.iter().zip(&feats) {
            let (act, pre) = conv_silu(conv, f)?;
            lat.push(act);
            lateral_pre.push(pre);
        }
        lat.push(top_lat);
        for i in (0..n - 1).rev() {
            let up = resampler(Kernel::Bilinear, extent(&lat[i + 1]), extent(&lat[i]))?.apply(&lat[i + 1])?;
            lat[i].add_assign(&up)?;
        }

        let base = extent(&lat[0]);
        let mut fpn_pre = Vec::new();
        let mut outs = Vec::with_capacity(n);
        for i in 0..n {
            let o = if i + 1 < n {
                let (act, pre) = conv_silu(&self.fpn[i], &lat[i])?;
                fpn_pre.push(pre);
                act
            } else {
                lat[i].clone()
            };
            outs.push(if i == 0 {
                o
            } else {
                resampler(Kernel::Bilinear, extent(&o), base)?.apply(&o)?
            });
        }
        let fuse_in = Tensor::cat0(&outs.iter().collect::<Vec<_>>())?;
        let (fuse_out, fuse_pre) = conv_silu(&self.fuse, &fuse_in)?;
        let small = self.classifier.forward(&fuse_out)?;
        let logits = resampler(Kernel::Bilinear, base, (out_h, out_w))?.apply(&small)?;
        Ok((
            logits,
            DecoderCache {
                feats,
                pooled,
                ppm_pre,
                ppm_cat,
                bottleneck_pre,
                lateral_pre,
                lat,
                fpn_pre,
                fuse_in,
                fuse_pre,
                fuse_out,
            },
        ))
    }

    /// Returns the gradients w.r.t. the `[H_i, W_i, C_i]` feature grids.
    pub fn backward(&self, cache: &DecoderCache, dlogits: &Tensor, grads: &mut Self) -> Result<Vec<Tensor>> {
        let c = cache;
        let n = self.levels();
        let dim = self.dim();
        let base = extent(&c.lat[0]);
        let (_, oh, ow) = dlogits.dims3()?;

        let dsmall = resampler(Kernel::Bilinear, base, (oh, ow))?.apply_transpose(dlogits)?;
        let dfuse_out = self.classifier.backward(&c.fuse_out, &dsmall, &mut grads.classifier)?;
        let dfuse_in = conv_silu_backward(&self.fuse, &c.fuse_in, &c.fuse_pre, &dfuse_out, &mut grads.fuse)?;

        let mut dlat = Vec::with_capacity(n);
        for i in 0..n {
            let dout_base = dfuse_in.narrow0(i * dim, dim)?;
            let dout = if i == 0 {
                dout_base
            } else {
                resampler(Kernel::Bilinear, extent(&c.lat[i]), base)?.apply_transpose(&dout_base)?
            };
            dlat.push(if i + 1 < n {
                conv_silu_backward(&self.fpn[i], &c.lat[i], &c.fpn_pre[i], &dout, &mut grads.fpn[i])?
            } else {
                dout
            });
        }

        let mut dfeats = Vec::with_capacity(n);
        for i in 0..n - 1 {
            let up = resampler(Kernel::Bilinear, extent(&c.lat[i + 1]), extent(&c.lat[i]))?;
            let carry = up.apply_transpose(&dlat[i])?;
            dlat[i + 1].add_assign(&carry)?;
            dfeats.push(conv_silu_backward(
                &self.laterals[i],
                &c.feats[i],
                &c.lateral_pre[i],
                &dlat[i],
                &mut grads.laterals[i],
            )?);
        }

        let deepest = &c.feats[n - 1];
        let top = extent(deepest);
        let dcat = conv_silu_backward(
            &self.bottleneck,
            &c.ppm_cat,
            &c.bottleneck_pre,
            &dlat[n - 1],
            &mut grads.bottleneck,
        )?;
        let cdeep = deepest.shape()[0];
        let mut ddeep = dcat.narrow0(0, cdeep)?;
        for (k, &bins) in PPM_BINS.iter().enumerate() {
            let dup = dcat.narrow0(cdeep + k * dim, dim)?;
            let dact = resampler(Kernel::Bilinear, (bins, bins), top)?.apply_transpose(&dup)?;
            let dp = conv_silu_backward(&self.ppm[k], &c.pooled[k], &c.ppm_pre[k], &dact, &mut grads.ppm[k])?;
            ddeep.add_assign(&resampler(Kernel::AdaptiveMean, top, (bins, bins))?.apply_transpose(&dp)?)?;
        }
        dfeats.push(ddeep);
        dfeats.iter().map(|d| d.chw_to_hwc()).collect()
    }
}
