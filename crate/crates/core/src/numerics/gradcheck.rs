//! Finite-difference verification of hand-written vector-Jacobian products.
//!
//! The op output is reduced to a scalar `f(x) = <u, op(x)>` with a fixed-seed
//! Gaussian cotangent `u`; the analytic gradient is `vjp(x, u)` and the
//! numeric one is a central difference of `f` per input coordinate.

use rand::seq::index;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::rng::{self, Stream};
use crate::tensor::Tensor;

/// An operation with a forward map and its vector-Jacobian product.
pub trait DiffOp {
    fn name(&self) -> &str;
    fn forward(&self, inputs: &[Tensor]) -> Result<Tensor>;
    /// One cotangent per input, shaped like that input.
    fn vjp(&self, inputs: &[Tensor], upstream: &Tensor) -> Result<Vec<Tensor>>;
}

/// Closure-backed [`DiffOp`].
pub struct FnOp<F, G> {
    pub name: String,
    pub forward: F,
    pub vjp: G,
}

impl<F, G> FnOp<F, G>
where
    F: Fn(&[Tensor]) -> Result<Tensor>,
    G: Fn(&[Tensor], &Tensor) -> Result<Vec<Tensor>>,
{
    pub fn new(name: impl Into<String>, forward: F, vjp: G) -> Self {
        Self {
            name: name.into(),
            forward,
            vjp,
        }
    }
}

impl<F, G> DiffOp for FnOp<F, G>
where
    F: Fn(&[Tensor]) -> Result<Tensor>,
    G: Fn(&[Tensor], &Tensor) -> Result<Vec<Tensor>>,
{
    fn name(&self) -> &str {
        &self.name
    }

    fn forward(&self, inputs: &[Tensor]) -> Result<Tensor> {
        (self.forward)(inputs)
    }

    fn vjp(&self, inputs: &[Tensor], upstream: &Tensor) -> Result<Vec<Tensor>> {
        (self.vjp)(inputs, upstream)
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    pub tol: f64,
    pub seed: u64,
    /// Denominator floor of the relative error, so that coordinates with
    /// vanishing gradients are judged on absolute error.
    pub floor: f64,
    /// Check at most this many coordinates per input (sampled without
    /// replacement from the fixed seed). `None` checks all.
    pub max_entries_per_input: Option<usize>,
}

impl GradCheckConfig {
    pub fn new(tol: f64) -> Self {
        Self {
            tol,
            seed: 0,
            floor: 1e-3,
            max_entries_per_input: None,
        }
    }

    pub fn sampled(mut self, n: usize) -> Self {
        self.max_entries_per_input = Some(n);
        self
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct InputError {
    pub index: usize,
    pub checked: usize,
    pub max_rel_error: f64,
    /// Coordinate with the worst error.
    pub worst_entry: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub op: String,
    pub max_rel_error: f64,
    pub inputs: Vec<InputError>,
    pub tol: f64,
    pub passed: bool,
    pub diagnostic: Option<String>,
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{:<28} {} max_rel_err={:.3e} tol={:.0e}",
            self.op,
            if self.passed { "PASS" } else { "FAIL" },
            self.max_rel_error,
            self.tol
        )?;
        if let Some(d) = &self.diagnostic {
            write!(f, " ({d})")?;
        }
        Ok(())
    }
}

pub fn grad_check(op: &dyn DiffOp, inputs: &[Tensor], tol: f64) -> Result<GradCheckReport> {
    grad_check_with(op, inputs, &GradCheckConfig::new(tol))
}

pub fn grad_check_with(op: &dyn DiffOp, inputs: &[Tensor], cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let out = op.forward(inputs)?;
    let mut r = rng::stream(cfg.seed, Stream::GradCheck, 0);
    let u = Tensor::from_fn(out.shape(), |_| rng::normal(&mut r));
    let analytic = op.vjp(inputs, &u)?;
    if analytic.len() != inputs.len() {
        return Err(Error::InvalidArgument(format!(
            "{}: vjp returned {} cotangents for {} inputs",
            op.name(),
            analytic.len(),
            inputs.len()
        )));
    }
    let mut report = GradCheckReport {
        op: op.name().to_string(),
        max_rel_error: 0.0,
        inputs: Vec::new(),
        tol: cfg.tol,
        passed: true,
        diagnostic: None,
    };
    let objective = |xs: &[Tensor]| -> Result<f64> { op.forward(xs)?.dot(&u) };
    let step_base = f64::EPSILON.cbrt();
    let mut work = inputs.to_vec();

    for (idx, (input, grad)) in inputs.iter().zip(&analytic).enumerate() {
        if grad.shape() != input.shape() {
            return Err(Error::shape(
                "grad_check",
                format!(
                    "{}: cotangent {idx} has shape {:?}, input {:?}",
                    op.name(),
                    grad.shape(),
                    input.shape()
                ),
            ));
        }
        if !grad.is_finite() {
            report.passed = false;
            report.max_rel_error = f64::INFINITY;
            report.diagnostic = Some(format!("non-finite analytic gradient for input {idx}"));
            return Ok(report);
        }
        let coords: Vec<usize> = match cfg.max_entries_per_input {
            Some(n) if n < input.len() => {
                let mut v = index::sample(&mut r, input.len(), n).into_vec();
                v.sort_unstable();
                v
            }
            _ => (0..input.len()).collect(),
        };
        let mut entry = InputError {
            index: idx,
            checked: coords.len(),
            max_rel_error: 0.0,
            worst_entry: 0,
        };
        for &k in &coords {
            let x0 = input.data()[k];
            let h = step_base * x0.abs().max(1.0);
            work[idx].data_mut()[k] = x0 + h;
            let fp = objective(&work)?;
            work[idx].data_mut()[k] = x0 - h;
            let fm = objective(&work)?;
            work[idx].data_mut()[k] = x0;
            let numeric = (fp - fm) / (2.0 * h);
            if !numeric.is_finite() {
                report.passed = false;
                report.max_rel_error = f64::INFINITY;
                report.diagnostic = Some(format!("non-finite numeric gradient for input {idx} entry {k}"));
                return Ok(report);
            }
            let a = grad.data()[k];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(cfg.floor);
            if rel > entry.max_rel_error {
                entry.max_rel_error = rel;
                entry.worst_entry = k;
            }
        }
        report.max_rel_error = report.max_rel_error.max(entry.max_rel_error);
        report.inputs.push(entry);
    }
    report.passed = report.max_rel_error <= cfg.tol;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::ops;
    use crate::rng::{self, Stream};
    use rand::Rng;

    fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
        let mut r = rng::stream(seed, Stream::Test, 1);
        Tensor::from_fn(shape, |_| r.gen_range(-1.0..1.0))
    }

    fn linear_op(scale: f64) -> impl DiffOp {
        FnOp::new(
            "linear",
            |xs: &[Tensor]| ops::linear(&xs[0], &xs[1], Some(&xs[2])),
            move |xs: &[Tensor], g: &Tensor| {
                let (dx, dw, db) = ops::linear_vjp(&xs[0], &xs[1], g)?;
                Ok(vec![dx.scale(scale), dw, db])
            },
        )
    }

    #[test]
    fn linear_passes() {
        let inputs = [rand_tensor(&[4, 3], 1), rand_tensor(&[3, 5], 2), rand_tensor(&[5], 3)];
        let rep = grad_check(&linear_op(1.0), &inputs, 1e-5).unwrap();
        assert!(rep.passed, "{rep}");
        assert_eq!(rep.inputs.len(), 3);
    }

    #[test]
    fn scaled_vjp_fails() {
        let inputs = [rand_tensor(&[4, 3], 1), rand_tensor(&[3, 5], 2), rand_tensor(&[5], 3)];
        let rep = grad_check(&linear_op(2.0), &inputs, 1e-5).unwrap();
        assert!(!rep.passed);
        assert!(rep.inputs[0].max_rel_error > 0.1);
    }

    #[test]
    fn non_finite_gradient_fails_with_diagnostic() {
        let op = FnOp::new(
            "bad",
            |xs: &[Tensor]| Ok(xs[0].clone()),
            |xs: &[Tensor], _g: &Tensor| Ok(vec![Tensor::full(xs[0].shape(), f64::NAN)]),
        );
        let rep = grad_check(&op, &[rand_tensor(&[3], 4)], 1e-5).unwrap();
        assert!(!rep.passed);
        assert!(rep.diagnostic.unwrap().contains("non-finite"));
    }

    #[test]
    fn report_is_deterministic() {
        let inputs = [rand_tensor(&[2, 3], 5), rand_tensor(&[3, 2], 6), rand_tensor(&[2], 7)];
        let a = grad_check(&linear_op(1.0), &inputs, 1e-5).unwrap();
        let b = grad_check(&linear_op(1.0), &inputs, 1e-5).unwrap();
        assert_eq!(a.max_rel_error.to_bits(), b.max_rel_error.to_bits());
    }
}
