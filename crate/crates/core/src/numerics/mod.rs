//! Dense tensor ops with explicit vector-Jacobian products, resampling, and
//! finite-difference gradient checking.

pub mod gradcheck;
pub mod ops;

pub use gradcheck::{grad_check, grad_check_with, DiffOp, FnOp, GradCheckConfig, GradCheckReport};
pub use ops::{
    conv2d, conv2d_vjp, depthwise_conv2d, depthwise_conv2d_vjp, layer_norm, layer_norm_vjp, linear, linear_vjp,
    resize_bicubic, resize_bilinear, resize_nearest_2d, sigmoid, silu, silu_vjp, softplus, Kernel, Resample2d,
};

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{self, Stream};
    use crate::tensor::Tensor;
    use rand::Rng;

    const EPS: f64 = 1e-5;

    fn rand_tensor(r: &mut impl Rng, shape: &[usize]) -> Tensor {
        Tensor::from_fn(shape, |_| r.gen_range(-1.5..1.5))
    }

    fn check(op: &dyn DiffOp, inputs: &[Tensor]) {
        let rep = grad_check(op, inputs, 1e-5).unwrap();
        assert!(
            rep.passed,
            "{rep} shapes {:?}",
            inputs.iter().map(|t| t.shape().to_vec()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn every_op_passes_on_ten_random_shapes() {
        let mut r = rng::stream(11, Stream::Test, 0);
        let silu_op = FnOp::new(
            "silu",
            |x: &[Tensor]| Ok(silu(&x[0])),
            |x: &[Tensor], g: &Tensor| Ok(vec![silu_vjp(&x[0], g)?]),
        );
        let ln_op = FnOp::new(
            "layer_norm",
            |x: &[Tensor]| layer_norm(&x[0], &x[1], &x[2], EPS),
            |x: &[Tensor], g: &Tensor| {
                let (a, b, c) = layer_norm_vjp(&x[0], &x[1], EPS, g)?;
                Ok(vec![a, b, c])
            },
        );
        let lin_op = FnOp::new(
            "linear",
            |x: &[Tensor]| linear(&x[0], &x[1], Some(&x[2])),
            |x: &[Tensor], g: &Tensor| {
                let (a, b, c) = linear_vjp(&x[0], &x[1], g)?;
                Ok(vec![a, b, c])
            },
        );
        let dw_op = FnOp::new(
            "depthwise_conv2d",
            |x: &[Tensor]| depthwise_conv2d(&x[0], &x[1]),
            |x: &[Tensor], g: &Tensor| {
                let (a, b) = depthwise_conv2d_vjp(&x[0], &x[1], g)?;
                Ok(vec![a, b])
            },
        );
        let conv_op = FnOp::new(
            "conv2d",
            |x: &[Tensor]| conv2d(&x[0], &x[1], &x[2]),
            |x: &[Tensor], g: &Tensor| {
                let (a, b, c) = conv2d_vjp(&x[0], &x[1], g)?;
                Ok(vec![a, b, c])
            },
        );
        for _ in 0..10 {
            let rows = r.gen_range(1..5);
            let d = r.gen_range(1..7);
            let o = r.gen_range(1..6);
            let (c, h, w) = (r.gen_range(1..4), r.gen_range(1..7), r.gen_range(1..7));
            let k = [1, 3, 5][r.gen_range(0..3)];

            check(&silu_op, &[rand_tensor(&mut r, &[rows, d])]);
            let gamma = rand_tensor(&mut r, &[d]);
            let beta = rand_tensor(&mut r, &[d]);
            check(&ln_op, &[rand_tensor(&mut r, &[rows, d]), gamma, beta]);
            check(
                &lin_op,
                &[
                    rand_tensor(&mut r, &[rows, d]),
                    rand_tensor(&mut r, &[d, o]),
                    rand_tensor(&mut r, &[o]),
                ],
            );
            check(
                &dw_op,
                &[rand_tensor(&mut r, &[c, h, w]), rand_tensor(&mut r, &[c, k, k])],
            );
            check(
                &conv_op,
                &[
                    rand_tensor(&mut r, &[c, h, w]),
                    rand_tensor(&mut r, &[o, c, k, k]),
                    rand_tensor(&mut r, &[o]),
                ],
            );

            for kernel in [Kernel::Bicubic, Kernel::Bilinear, Kernel::AdaptiveMean] {
                let (oh, ow) = (r.gen_range(1..9), r.gen_range(1..9));
                let plan = Resample2d::new(kernel, h, w, oh, ow).unwrap();
                let p2 = plan.clone();
                let op = FnOp::new(
                    "resample",
                    move |x: &[Tensor]| plan.apply(&x[0]),
                    move |_x: &[Tensor], g: &Tensor| Ok(vec![p2.apply_transpose(g)?]),
                );
                check(&op, &[rand_tensor(&mut r, &[c, h, w])]);
            }
        }
    }

    #[test]
    fn pure_ops_are_bitwise_repeatable() {
        let mut r = rng::stream(12, Stream::Test, 0);
        let x = rand_tensor(&mut r, &[3, 5, 5]);
        let k = rand_tensor(&mut r, &[3, 3, 3]);
        assert_eq!(depthwise_conv2d(&x, &k).unwrap(), depthwise_conv2d(&x, &k).unwrap());
        assert_eq!(silu(&x), silu(&x));
        let g = rand_tensor(&mut r, &[5]);
        assert_eq!(
            layer_norm(&x, &g, &g, EPS).unwrap(),
            layer_norm(&x, &g, &g, EPS).unwrap()
        );
        let w = rand_tensor(&mut r, &[5, 2]);
        assert_eq!(linear(&x, &w, None).unwrap(), linear(&x, &w, None).unwrap());
    }

    /// Separable Gaussian blur used to build smooth test images.
    fn blur(x: &Tensor, sigma: f64) -> Tensor {
        let (c, h, w) = x.dims3().unwrap();
        let rad = (3.0 * sigma).ceil() as isize;
        let kern: Vec<f64> = (-rad..=rad)
            .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
            .collect();
        let pass = |src: &[f64], horizontal: bool| {
            let mut out = vec![0.0; src.len()];
            for ch in 0..c {
                for y in 0..h {
                    for xx in 0..w {
                        let (mut acc, mut norm) = (0.0, 0.0);
                        for (ki, kv) in kern.iter().enumerate() {
                            let d = ki as isize - rad;
                            let (sy, sx) = if horizontal {
                                (y as isize, xx as isize + d)
                            } else {
                                (y as isize + d, xx as isize)
                            };
                            if sy >= 0 && sy < h as isize && sx >= 0 && sx < w as isize {
                                acc += kv * src[(ch * h + sy as usize) * w + sx as usize];
                                norm += kv;
                            }
                        }
                        out[(ch * h + y) * w + xx] = acc / norm;
                    }
                }
            }
            out
        };
        let a = pass(x.data(), true);
        Tensor::new(x.shape().to_vec(), pass(&a, false)).unwrap()
    }

    #[test]
    fn bicubic_up_down_roundtrip_on_smooth_images() {
        let mut r = rng::stream(13, Stream::Test, 0);
        for _ in 0..5 {
            let (h, w) = (r.gen_range(12..30), r.gen_range(12..30));
            let x = blur(&Tensor::from_fn(&[2, h, w], |_| r.gen_range(0.0..1.0)), 2.0);
            let up = resize_bicubic(&x, 2 * h, 2 * w).unwrap();
            let back = resize_bicubic(&up, h, w).unwrap();
            let err = back.max_abs_diff(&x).unwrap();
            assert!(err <= 0.05, "roundtrip error {err}");
        }
    }
}
