//! Selective state-space (S6) layer: input-dependent step sizes and
//! projections, ZOH discretization, sequential and work-efficient parallel
//! scans, and the reverse-time adjoint scan for gradients.

pub mod discretize;
pub mod scan;

use rand::Rng;

use crate::error::{Error, Result};
use crate::impl_parameters;
use crate::numerics::ops::{self, sigmoid, softplus};
use crate::tensor::Tensor;

pub use discretize::{discretize_zoh, DiscretizedPair};
pub use scan::{
    combine, scan_discretized_par, scan_discretized_seq, selective_scan_par, selective_scan_seq, selective_scan_vjp,
};

/// Parameters of one S6 layer over `C` channels with state size `N`.
///
/// `A = -exp(a_log)` is diagonal per (channel, state) pair.
#[derive(Clone, Debug, PartialEq)]
pub struct SsmParams {
    /// `[C, N]`
    pub a_log: Tensor,
    /// `[C]`
    pub d: Tensor,
    /// `[C, C]` and `[C]`: `delta = softplus(x W + b)`
    pub delta_w: Tensor,
    pub delta_b: Tensor,
    /// `[C, N]`: `B_t = x_t W_B`
    pub b_w: Tensor,
    /// `[C, N]`: `C_t = x_t W_C`
    pub c_w: Tensor,
}

impl_parameters!(SsmParams {
    a_log,
    d,
    delta_w,
    delta_b,
    b_w,
    c_w
});

/// Inverse of softplus for positive arguments.
pub fn softplus_inv(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

impl SsmParams {
    /// S4-style real initialization: `-A` spans `1..=N` per channel, `D = 1`,
    /// step-size bias so that `softplus(b)` is log-uniform in `[0.01, 0.1]`.
    pub fn init(channels: usize, state: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (channels.max(1) as f64).sqrt();
        let mut uni = |shape: &[usize]| Tensor::from_fn(shape, |_| rng.gen_range(-bound..bound));
        let delta_w = uni(&[channels, channels]).scale(0.1);
        let b_w = uni(&[channels, state]);
        let c_w = uni(&[channels, state]);
        let delta_b = Tensor::from_fn(&[channels], |_| {
            let dt = (rng.gen_range(0.01f64.ln()..0.1f64.ln())).exp();
            softplus_inv(dt)
        });
        Self {
            a_log: Tensor::from_fn(&[channels, state], |i| ((i % state) as f64 + 1.0).ln()),
            d: Tensor::full(&[channels], 1.0),
            delta_w,
            delta_b,
            b_w,
            c_w,
        }
    }

    pub fn channels(&self) -> usize {
        self.d.len()
    }

    pub fn state_dim(&self) -> usize {
        self.a_log.shape().get(1).copied().unwrap_or(0)
    }

    /// Materialized `A = -exp(a_log)`, `[C, N]`.
    pub fn a(&self) -> Tensor {
        self.a_log.map(|v| -v.exp())
    }

    pub fn check(&self) -> Result<()> {
        let (c, n) = self.a_log.dims2()?;
        let ok = self.d.shape() == [c]
            && self.delta_w.shape() == [c, c]
            && self.delta_b.shape() == [c]
            && self.b_w.shape() == [c, n]
            && self.c_w.shape() == [c, n];
        if !ok {
            return Err(Error::shape(
                "SsmParams",
                format!(
                    "a_log {:?} d {:?} delta_w {:?} delta_b {:?} b_w {:?} c_w {:?}",
                    self.a_log.shape(),
                    self.d.shape(),
                    self.delta_w.shape(),
                    self.delta_b.shape(),
                    self.b_w.shape(),
                    self.c_w.shape()
                ),
            ));
        }
        Ok(())
    }
}

/// Input-dependent projections for one sequence.
#[derive(Clone, Debug)]
pub struct Projection {
    /// Pre-softplus step-size logits, `[L, C]`.
    pub delta_pre: Tensor,
    /// `[L, C]`, strictly positive.
    pub delta: Tensor,
    /// `[L, N]`
    pub b: Tensor,
    /// `[L, N]`
    pub c: Tensor,
}

pub(crate) fn project(x: &Tensor, p: &SsmParams) -> Result<Projection> {
    p.check()?;
    let (_, c) = x.dims2()?;
    if c != p.channels() {
        return Err(Error::shape(
            "s6_project",
            format!("input {:?} vs {} channels", x.shape(), p.channels()),
        ));
    }
    let delta_pre = ops::linear(x, &p.delta_w, Some(&p.delta_b))?;
    let delta = delta_pre.map(softplus);
    let b = ops::linear(x, &p.b_w, None)?;
    let c = ops::linear(x, &p.c_w, None)?;
    Ok(Projection { delta_pre, delta, b, c })
}

/// `x: [L, C]` -> `(delta [L, C], B [L, N], C [L, N])`.
pub fn s6_project(x: &Tensor, p: &SsmParams) -> Result<(Tensor, Tensor, Tensor)> {
    let pr = project(x, p)?;
    Ok((pr.delta, pr.b, pr.c))
}

/// Backpropagates projection cotangents into `dx` and the parameter grads.
pub(crate) fn project_vjp(
    x: &Tensor,
    p: &SsmParams,
    pr: &Projection,
    d_delta: &Tensor,
    d_b: &Tensor,
    d_c: &Tensor,
    grads: &mut SsmParams,
) -> Result<Tensor> {
    let d_pre = pr.delta_pre.zip_map(d_delta, |u, g| g * sigmoid(u))?;
    let (mut dx, dw, db) = ops::linear_vjp(x, &p.delta_w, &d_pre)?;
    grads.delta_w.add_assign(&dw)?;
    grads.delta_b.add_assign(&db)?;
    let (dxb, dwb, _) = ops::linear_vjp(x, &p.b_w, d_b)?;
    dx.add_assign(&dxb)?;
    grads.b_w.add_assign(&dwb)?;
    let (dxc, dwc, _) = ops::linear_vjp(x, &p.c_w, d_c)?;
    dx.add_assign(&dxc)?;
    grads.c_w.add_assign(&dwc)?;
    Ok(dx)
}
