//! Finite-difference checks of every hand-written backward pass, on small
//! random instances. Parameters are checked alongside the data inputs.

use rand::Rng;

use crate::cross_scan::{ss2d, ss2d_vjp, Ss2dParams};
use crate::error::Result;
use crate::model::blocks::{BlockWeights, Downsample, PatchEmbed};
use crate::model::decoder::UperDecoder;
use crate::model::{Model, ModelConfig};
use crate::numerics::ops::*;
use crate::numerics::{grad_check_with, DiffOp, FnOp, GradCheckConfig, GradCheckReport};
use crate::params::{load_tensors, tensors, zeros_like, Parameters};
use crate::rng::{self, Stream};
use crate::sr::SrNet;
use crate::ssm::scan::{selective_scan_seq, selective_scan_vjp};
use crate::ssm::SsmParams;
use crate::tensor::Tensor;
use crate::train::loss::cross_entropy;

/// Coordinates checked per input for the composite model; all others are
/// checked exhaustively.
const MODEL_SAMPLES: usize = 8;

/// Wraps a parameterised map as a [`DiffOp`] over
/// `[data inputs.., parameter tensors..]`.
pub fn param_op<P, F, B>(name: &str, template: P, n_data: usize, fwd: F, bwd: B) -> impl DiffOp
where
    P: Parameters + Clone,
    F: Fn(&P, &[Tensor]) -> Result<Tensor>,
    B: Fn(&P, &[Tensor], &Tensor, &mut P) -> Result<Vec<Tensor>>,
{
    let t2 = template.clone();
    FnOp::new(
        name,
        move |xs: &[Tensor]| {
            let mut p = template.clone();
            load_tensors(&mut p, &xs[n_data..])?;
            fwd(&p, &xs[..n_data])
        },
        move |xs: &[Tensor], g: &Tensor| {
            let mut p = t2.clone();
            load_tensors(&mut p, &xs[n_data..])?;
            let mut grads = zeros_like(&p);
            let mut out = bwd(&p, &xs[..n_data], g, &mut grads)?;
            out.extend(tensors(&grads));
            Ok(out)
        },
    )
}

fn with_params(data: Vec<Tensor>, p: &impl Parameters) -> Vec<Tensor> {
    let mut v = data;
    v.extend(tensors(p));
    v
}

struct Gen(rand_chacha::ChaCha8Rng);

impl Gen {
    fn t(&mut self, shape: &[usize]) -> Tensor {
        Tensor::from_fn(shape, |_| self.0.gen_range(-1.0..1.0))
    }

    fn ssm(&mut self, c: usize, n: usize) -> SsmParams {
        let mut p = SsmParams::init(c, n, &mut self.0);
        p.delta_b = Tensor::from_fn(&[c], |_| self.0.gen_range(-2.0..0.5));
        p
    }

    /// Perturbs every parameter so no check runs at a symmetric init
    /// (zeroed projections would hide whole branches).
    fn jitter(&mut self, p: &mut impl Parameters, scale: f64) {
        p.visit_mut("", &mut |_, t| {
            for v in t.data_mut() {
                *v += scale * self.0.gen_range(-1.0..1.0);
            }
        });
    }
}

fn check(op: &dyn DiffOp, inputs: &[Tensor], cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    grad_check_with(op, inputs, cfg)
}

/// Runs the full suite at relative tolerance `tol`.
pub fn run(tol: f64, seed: u64) -> Result<Vec<GradCheckReport>> {
    let mut g = Gen(rng::stream(seed, Stream::GradCheck, 1));
    let full = GradCheckConfig {
        seed,
        ..GradCheckConfig::new(tol)
    };
    let sampled = full.clone().sampled(MODEL_SAMPLES);
    let mut out = Vec::new();

    let op = FnOp::new(
        "silu",
        |x: &[Tensor]| Ok(silu(&x[0])),
        |x: &[Tensor], d: &Tensor| Ok(vec![silu_vjp(&x[0], d)?]),
    );
    out.push(check(&op, &[g.t(&[4, 5])], &full)?);

    let op = FnOp::new(
        "layer_norm",
        |x: &[Tensor]| layer_norm(&x[0], &x[1], &x[2], 1e-5),
        |x: &[Tensor], d: &Tensor| {
            let (a, b, c) = layer_norm_vjp(&x[0], &x[1], 1e-5, d)?;
            Ok(vec![a, b, c])
        },
    );
    out.push(check(&op, &[g.t(&[3, 6]), g.t(&[6]), g.t(&[6])], &full)?);

    let op = FnOp::new(
        "linear",
        |x: &[Tensor]| linear(&x[0], &x[1], Some(&x[2])),
        |x: &[Tensor], d: &Tensor| {
            let (a, b, c) = linear_vjp(&x[0], &x[1], d)?;
            Ok(vec![a, b, c])
        },
    );
    out.push(check(&op, &[g.t(&[3, 4]), g.t(&[4, 5]), g.t(&[5])], &full)?);

    let op = FnOp::new(
        "depthwise_conv2d",
        |x: &[Tensor]| depthwise_conv2d(&x[0], &x[1]),
        |x: &[Tensor], d: &Tensor| {
            let (a, b) = depthwise_conv2d_vjp(&x[0], &x[1], d)?;
            Ok(vec![a, b])
        },
    );
    out.push(check(&op, &[g.t(&[2, 5, 4]), g.t(&[2, 3, 3])], &full)?);

    let op = FnOp::new(
        "conv2d",
        |x: &[Tensor]| conv2d(&x[0], &x[1], &x[2]),
        |x: &[Tensor], d: &Tensor| {
            let (a, b, c) = conv2d_vjp(&x[0], &x[1], d)?;
            Ok(vec![a, b, c])
        },
    );
    out.push(check(&op, &[g.t(&[2, 5, 4]), g.t(&[3, 2, 3, 3]), g.t(&[3])], &full)?);

    for (name, kernel, (ih, iw, oh, ow)) in [
        ("resize_bicubic", Kernel::Bicubic, (4, 5, 9, 7)),
        ("resize_bilinear", Kernel::Bilinear, (3, 3, 7, 5)),
        ("adaptive_avg_pool", Kernel::AdaptiveMean, (7, 6, 3, 2)),
    ] {
        let plan = Resample2d::new(kernel, ih, iw, oh, ow)?;
        let p2 = plan.clone();
        let op = FnOp::new(
            name,
            move |x: &[Tensor]| plan.apply(&x[0]),
            move |_: &[Tensor], d: &Tensor| Ok(vec![p2.apply_transpose(d)?]),
        );
        out.push(check(&op, &[g.t(&[2, ih, iw])], &full)?);
    }

    let p = g.ssm(3, 4);
    let op = param_op(
        "selective_scan",
        p.clone(),
        1,
        |p: &SsmParams, x: &[Tensor]| selective_scan_seq(&x[0], p),
        |p: &SsmParams, x: &[Tensor], d: &Tensor, grads: &mut SsmParams| {
            let (dx, gp) = selective_scan_vjp(&x[0], p, d)?;
            *grads = gp;
            Ok(vec![dx])
        },
    );
    out.push(check(&op, &with_params(vec![g.t(&[7, 3])], &p), &full)?);

    for (name, p) in [
        ("ss2d", Ss2dParams::independent([0, 1, 2, 3].map(|_| g.ssm(2, 3)))),
        ("ss2d_tied", Ss2dParams::tied(g.ssm(2, 3))),
    ] {
        let op = param_op(
            name,
            p.clone(),
            1,
            |p: &Ss2dParams, x: &[Tensor]| ss2d(&x[0], p),
            |p: &Ss2dParams, x: &[Tensor], d: &Tensor, grads: &mut Ss2dParams| {
                let (dx, gp) = ss2d_vjp(&x[0], p, d)?;
                *grads = gp;
                Ok(vec![dx])
            },
        );
        out.push(check(&op, &with_params(vec![g.t(&[3, 3, 2])], &p), &full)?);
    }

    let mut embed = PatchEmbed::init(2, 2, 3, &mut g.0);
    g.jitter(&mut embed, 0.1);
    let op = param_op(
        "patch_embed",
        embed.clone(),
        1,
        |p: &PatchEmbed, x: &[Tensor]| p.forward(&x[0]),
        |p: &PatchEmbed, x: &[Tensor], d: &Tensor, grads: &mut PatchEmbed| Ok(vec![p.backward(&x[0], d, grads)?]),
    );
    out.push(check(&op, &with_params(vec![g.t(&[2, 4, 6])], &embed), &full)?);

    let mut down = Downsample::init(2, &mut g.0);
    g.jitter(&mut down, 0.1);
    let op = param_op(
        "downsample",
        down.clone(),
        1,
        |p: &Downsample, x: &[Tensor]| p.forward(&x[0]),
        |p: &Downsample, x: &[Tensor], d: &Tensor, grads: &mut Downsample| Ok(vec![p.backward(&x[0], d, grads)?]),
    );
    out.push(check(&op, &with_params(vec![g.t(&[4, 2, 2])], &down), &full)?);

    let mut block = BlockWeights::init(4, 2, 2, false, &mut g.0);
    g.jitter(&mut block, 0.2);
    let op = param_op(
        "vss_block",
        block.clone(),
        1,
        |p: &BlockWeights, x: &[Tensor]| p.forward(&x[0]),
        |p: &BlockWeights, x: &[Tensor], d: &Tensor, grads: &mut BlockWeights| {
            let (_, cache) = p.forward_cached(&x[0])?;
            Ok(vec![p.backward(&x[0], &cache, d, grads)?])
        },
    );
    out.push(check(&op, &with_params(vec![g.t(&[3, 3, 4])], &block), &full)?);

    let mut dec = UperDecoder::init(&[3, 4], 3, 2, &mut g.0);
    g.jitter(&mut dec, 0.1);
    let op = param_op(
        "uper_decode",
        dec.clone(),
        2,
        |p: &UperDecoder, x: &[Tensor]| p.forward(x, 8, 6),
        |p: &UperDecoder, x: &[Tensor], d: &Tensor, grads: &mut UperDecoder| {
            let (_, cache) = p.forward_cached(x, 8, 6)?;
            p.backward(&cache, d, grads)
        },
    );
    out.push(check(
        &op,
        &with_params(vec![g.t(&[4, 3, 3]), g.t(&[2, 2, 4])], &dec),
        &full,
    )?);

    let target = Tensor::from_fn(&[2, 3, 2], |_| f64::from(g.0.gen_range(0u8..2)));
    let t2 = target.clone();
    let op = FnOp::new(
        "cross_entropy",
        move |x: &[Tensor]| Ok(Tensor::scalar(cross_entropy(&x[0], &target)?.0)),
        move |x: &[Tensor], d: &Tensor| Ok(vec![cross_entropy(&x[0], &t2)?.1.scale(d.data()[0])]),
    );
    out.push(check(&op, &[g.t(&[2, 2, 3, 2]).scale(3.0)], &full)?);

    let mut sr = SrNet::init(3, &mut g.0);
    g.jitter(&mut sr, 0.2);
    let op = param_op(
        "sr_residual",
        sr.clone(),
        1,
        |p: &SrNet, x: &[Tensor]| p.residual(&x[0]),
        |p: &SrNet, x: &[Tensor], d: &Tensor, grads: &mut SrNet| {
            let (dx, gp) = p.residual_vjp(&x[0], d)?;
            *grads = gp;
            Ok(vec![dx])
        },
    );
    out.push(check(&op, &with_params(vec![g.t(&[3, 5, 4])], &sr), &full)?);

    let cfg = ModelConfig {
        in_channels: 2,
        patch_size: 2,
        embed_dim: 2,
        depths: vec![1, 1],
        state_dim: 2,
        num_classes: 2,
        expand: 2,
        decoder_dim: 3,
        tie_directions: false,
    };
    let mut model = Model::init(cfg, seed)?;
    g.jitter(&mut model, 0.1);
    let op = param_op(
        "segmenter",
        model.clone(),
        1,
        |p: &Model, x: &[Tensor]| p.forward(&x[0]),
        |p: &Model, x: &[Tensor], d: &Tensor, grads: &mut Model| {
            let (_, cache) = p.forward_cached(&x[0])?;
            Ok(vec![p.backward(&cache, d, grads)?])
        },
    );
    out.push(check(&op, &with_params(vec![g.t(&[2, 4, 8])], &model), &sampled)?);

    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes_and_names_every_op() {
        let reports = run(1e-4, 0).unwrap();
        for r in &reports {
            assert!(r.passed, "{r}");
        }
        let names: Vec<&str> = reports.iter().map(|r| r.op.as_str()).collect();
        for want in [
            "selective_scan",
            "ss2d",
            "vss_block",
            "uper_decode",
            "cross_entropy",
            "segmenter",
        ] {
            assert!(names.contains(&want), "{want} missing from {names:?}");
        }
    }
}
