//! Encoder pieces on `[H, W, C]` token grids.

use rand::Rng;

use crate::cross_scan::{ss2d, ss2d_vjp, Ss2dParams};
use crate::error::{Error, Result};
use crate::impl_parameters;
use crate::model::layers::{fan_in_uniform, LayerNorm, Linear};
use crate::numerics::ops;
use crate::params::{accumulate, join, Parameters};
use crate::ssm::SsmParams;
use crate::tensor::Tensor;

/// Non-overlapping `ps x ps` patches of a `[C, H, W]` image, each flattened
/// in `(channel, row, col)` order and projected to the embedding width.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchEmbed {
    pub patch_size: usize,
    pub proj: Linear,
}

impl Parameters for PatchEmbed {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.proj.visit(&join(prefix, "proj"), f)
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.proj.visit_mut(&join(prefix, "proj"), f)
    }
}

impl PatchEmbed {
    pub fn init(in_channels: usize, patch_size: usize, dim: usize, rng: &mut impl Rng) -> Self {
        Self {
            patch_size,
            proj: Linear::init(in_channels * patch_size * patch_size, dim, rng),
        }
    }

    /// `[C, H, W]` -> `[H/ps, W/ps, C * ps * ps]`.
    pub fn patchify(&self, image: &Tensor) -> Result<Tensor> {
        let (c, h, w) = image.dims3()?;
        let ps = self.patch_size;
        if ps == 0 || h % ps != 0 || w % ps != 0 {
            return Err(Error::shape(
                "patch_embed",
                format!("{h}x{w} image is not divisible into {ps}x{ps} patches"),
            ));
        }
        let (gh, gw) = (h / ps, w / ps);
        let mut out = Vec::with_capacity(image.len());
        let d = image.data();
        for gy in 0..gh {
            for gx in 0..gw {
                for ch in 0..c {
                    for dy in 0..ps {
                        let row = (ch * h + gy * ps + dy) * w + gx * ps;
                        out.extend_from_slice(&d[row..row + ps]);
                    }
                }
            }
        }
        Tensor::new(vec![gh, gw, c * ps * ps], out)
    }

    fn unpatchify(&self, patches: &Tensor, c: usize, h: usize, w: usize) -> Result<Tensor> {
        let ps = self.patch_size;
        let (gh, gw) = (h / ps, w / ps);
        let mut out = vec![0.0; c * h * w];
        let mut src = patches.data().iter();
        for gy in 0..gh {
            for gx in 0..gw {
                for ch in 0..c {
                    for dy in 0..ps {
                        let row = (ch * h + gy * ps + dy) * w + gx * ps;
                        for v in &mut out[row..row + ps] {
                            *v = *src.next().expect("patch count");
                        }
                    }
                }
            }
        }
        Tensor::new(vec![c, h, w], out)
    }

    pub fn forward(&self, image: &Tensor) -> Result<Tensor> {
        self.proj.forward(&self.patchify(image)?)
    }

    pub fn backward(&self, image: &Tensor, dy: &Tensor, grads: &mut Self) -> Result<Tensor> {
        let (c, h, w) = image.dims3()?;
        let patches = self.patchify(image)?;
        let dp = self.proj.backward(&patches, dy, &mut grads.proj)?;
        self.unpatchify(&dp, c, h, w)
    }
}

/// 2x2 patch merging: the four sub-positions, ordered `(0,0) (0,1) (1,0) (1,1)`,
/// are concatenated along channels and projected from `4C` to `2C`.
#[derive(Clone, Debug, PartialEq)]
pub struct Downsample {
    pub proj: Linear,
}

impl_parameters!(Downsample { proj });

impl Downsample {
    pub fn init(dim: usize, rng: &mut impl Rng) -> Self {
        Self {
            proj: Linear::init(4 * dim, 2 * dim, rng),
        }
    }

    pub fn merge(x: &Tensor) -> Result<Tensor> {
        let (h, w, c) = x.dims3()?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::shape("downsample", format!("odd extents {h}x{w}")));
        }
        let mut out = Vec::with_capacity(x.len());
        for y in (0..h).step_by(2) {
            for xx in (0..w).step_by(2) {
                for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    let s = ((y + dy) * w + xx + dx) * c;
                    out.extend_from_slice(&x.data()[s..s + c]);
                }
            }
        }
        Tensor::new(vec![h / 2, w / 2, 4 * c], out)
    }

    fn unmerge(merged: &Tensor, h: usize, w: usize, c: usize) -> Result<Tensor> {
        let mut out = vec![0.0; h * w * c];
        let mut src = merged.data().chunks_exact(c);
        for y in (0..h).step_by(2) {
            for xx in (0..w).step_by(2) {
                for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    let s = ((y + dy) * w + xx + dx) * c;
                    out[s..s + c].copy_from_slice(src.next().expect("merged count"));
                }
            }
        }
        Tensor::new(vec![h, w, c], out)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.proj.forward(&Self::merge(x)?)
    }

    pub fn backward(&self, x: &Tensor, dy: &Tensor, grads: &mut Self) -> Result<Tensor> {
        let (h, w, c) = x.dims3()?;
        let merged = Self::merge(x)?;
        let dm = self.proj.backward(&merged, dy, &mut grads.proj)?;
        Self::unmerge(&dm, h, w, c)
    }
}

/// Gated residual block:
///
/// ```text
/// u   = LN1(x)
/// out = x + out_proj( LN2(ss2d(silu(dwconv(main(u))))) * silu(gate(u)) )
/// ```
#[derive(Clone, Debug, PartialEq)]
pub struct BlockWeights {
    pub norm_in: LayerNorm,
    pub gate: Linear,
    pub main: Linear,
    /// `[D, 3, 3]`
    pub dw_kernel: Tensor,
    pub ssm: Ss2dParams,
    pub norm_scan: LayerNorm,
    pub out_proj: Linear,
}

impl_parameters!(BlockWeights {
    norm_in,
    gate,
    main,
    dw_kernel,
    ssm,
    norm_scan,
    out_proj
});

/// Intermediate activations kept for the backward pass.
#[derive(Clone, Debug)]
pub struct BlockCache {
    u: Tensor,
    m: Tensor,
    conv: Tensor,
    s: Tensor,
    z: Tensor,
    n: Tensor,
    gate_pre: Tensor,
    g: Tensor,
    p: Tensor,
}

impl BlockWeights {
    /// `dim` tokens channels, inner width `expand * dim`, state size `state`.
    pub fn init(dim: usize, expand: usize, state: usize, tie_directions: bool, rng: &mut impl Rng) -> Self {
        let inner = expand * dim;
        let ssm = if tie_directions {
            Ss2dParams::tied(SsmParams::init(inner, state, rng))
        } else {
            Ss2dParams::independent(std::array::from_fn(|_| SsmParams::init(inner, state, rng)))
        };
        Self {
            norm_in: LayerNorm::new(dim),
            gate: Linear::init(dim, inner, rng),
            main: Linear::init(dim, inner, rng),
            dw_kernel: fan_in_uniform(&[inner, 3, 3], 9, rng),
            ssm,
            norm_scan: LayerNorm::new(inner),
            out_proj: Linear::init(inner, dim, rng),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.forward_cached(x)?.0)
    }

    pub fn forward_cached(&self, x: &Tensor) -> Result<(Tensor, BlockCache)> {
        x.dims3()?;
        let u = self.norm_in.forward(x)?;
        let m = self.main.forward(&u)?;
        let conv = ops::depthwise_conv2d(&m.hwc_to_chw()?, &self.dw_kernel)?.chw_to_hwc()?;
        let s = ops::silu(&conv);
        let z = ss2d(&s, &self.ssm)?;
        let n = self.norm_scan.forward(&z)?;
        let gate_pre = self.gate.forward(&u)?;
        let g = ops::silu(&gate_pre);
        let p = n.mul(&g)?;
        let out = x.add(&self.out_proj.forward(&p)?)?;
        Ok((
            out,
            BlockCache {
                u,
                m,
                conv,
                s,
                z,
                n,
                gate_pre,
                g,
                p,
            },
        ))
    }

    pub fn backward(&self, x: &Tensor, cache: &BlockCache, dy: &Tensor, grads: &mut Self) -> Result<Tensor> {
        let c = cache;
        let dp = self.out_proj.backward(&c.p, dy, &mut grads.out_proj)?;
        let dn = dp.mul(&c.g)?;
        let dg = dp.mul(&c.n)?;
        let dgate_pre = ops::silu_vjp(&c.gate_pre, &dg)?;
        let mut du = self.gate.backward(&c.u, &dgate_pre, &mut grads.gate)?;
        let dz = self.norm_scan.backward(&c.z, &dn, &mut grads.norm_scan)?;
        let (ds, dssm) = ss2d_vjp(&c.s, &self.ssm, &dz)?;
        accumulate(&mut grads.ssm, &dssm);
        let dconv = ops::silu_vjp(&c.conv, &ds)?;
        let (dm_chw, dk) = ops::depthwise_conv2d_vjp(&c.m.hwc_to_chw()?, &self.dw_kernel, &dconv.hwc_to_chw()?)?;
        grads.dw_kernel.add_assign(&dk)?;
        du.add_assign(&self.main.backward(&c.u, &dm_chw.chw_to_hwc()?, &mut grads.main)?)?;
        let mut dx = self.norm_in.backward(x, &du, &mut grads.norm_in)?;
        dx.add_assign(dy)?;
        Ok(dx)
    }
}
