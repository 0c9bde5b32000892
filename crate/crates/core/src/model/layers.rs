//! Parameterized building blocks shared by the encoder and decoder.

use rand::Rng;

use crate::error::Result;
use crate::impl_parameters;
use crate::numerics::ops;
use crate::tensor::Tensor;

pub(crate) const LN_EPS: f64 = 1e-5;

/// Uniform `[-1/sqrt(fan_in), 1/sqrt(fan_in)]` weights.
pub(crate) fn fan_in_uniform(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor {
    scaled_uniform(shape, 1.0 / (fan_in.max(1) as f64).sqrt(), rng)
}

fn scaled_uniform(shape: &[usize], bound: f64, rng: &mut impl Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-bound..bound))
}

/// `y = x W + b` over the last axis, `W: [in, out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub w: Tensor,
    pub b: Tensor,
}

impl_parameters!(Linear { w, b });

impl Linear {
    pub fn init(fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Self {
        Self {
            w: fan_in_uniform(&[fan_in, fan_out], fan_in, rng),
            b: Tensor::zeros(&[fan_out]),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        ops::linear(x, &self.w, Some(&self.b))
    }

    pub fn backward(&self, x: &Tensor, dy: &Tensor, grads: &mut Self) -> Result<Tensor> {
        let (dx, dw, db) = ops::linear_vjp(x, &self.w, dy)?;
        grads.w.add_assign(&dw)?;
        grads.b.add_assign(&db)?;
        Ok(dx)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
}

impl_parameters!(LayerNorm { gamma, beta });

impl LayerNorm {
    pub fn new(dim: usize) -> Self {
        Self {
            gamma: Tensor::full(&[dim], 1.0),
            beta: Tensor::zeros(&[dim]),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        ops::layer_norm(x, &self.gamma, &self.beta, LN_EPS)
    }

    pub fn backward(&self, x: &Tensor, dy: &Tensor, grads: &mut Self) -> Result<Tensor> {
        let (dx, dg, db) = ops::layer_norm_vjp(x, &self.gamma, LN_EPS, dy)?;
        grads.gamma.add_assign(&dg)?;
        grads.beta.add_assign(&db)?;
        Ok(dx)
    }
}

/// "Same"-padded dense convolution on `[C, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv {
    /// `[out, in, k, k]`
    pub w: Tensor,
    pub b: Tensor,
}

impl_parameters!(Conv { w, b });

impl Conv {
    pub fn init(cin: usize, cout: usize, k: usize, rng: &mut impl Rng) -> Self {
        Self {
            w: fan_in_uniform(&[cout, cin, k, k], cin * k * k, rng),
            b: Tensor::zeros(&[cout]),
        }
    }

    /// He-uniform, bound `sqrt(6 / fan_in)`: keeps activation variance
    /// roughly constant through stacked conv + SiLU layers.
    pub fn he_init(cin: usize, cout: usize, k: usize, rng: &mut impl Rng) -> Self {
        Self {
            w: scaled_uniform(&[cout, cin, k, k], (6.0 / (cin * k * k).max(1) as f64).sqrt(), rng),
            b: Tensor::zeros(&[cout]),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        ops::conv2d(x, &self.w, &self.b)
    }

    pub fn backward(&self, x: &Tensor, dy: &Tensor, grads: &mut Self) -> Result<Tensor> {
        let (dx, dw, db) = ops::conv2d_vjp(x, &self.w, dy)?;
        grads.w.add_assign(&dw)?;
        grads.b.add_assign(&db)?;
        Ok(dx)
    }
}

/// Conv followed by SiLU; keeps the pre-activation for the backward pass.
pub(crate) fn conv_silu(conv: &Conv, x: &Tensor) -> Result<(Tensor, Tensor)> {
    let pre = conv.forward(x)?;
    Ok((ops::silu(&pre), pre))
}

pub(crate) fn conv_silu_backward(
    conv: &Conv,
    x: &Tensor,
    pre: &Tensor,
    dy: &Tensor,
    grads: &mut Conv,
) -> Result<Tensor> {
    let dpre = ops::silu_vjp(pre, dy)?;
    conv.backward(x, &dpre, grads)
}
