//! Zero-order-hold discretization of the diagonal continuous system
//! `h' = A h + B x`:
//!
//! ```text
//! Abar = exp(delta * A)
//! Bbar = (Abar - 1) / A * B
//! ```
//!
//! `(Abar - 1) / A` loses precision as `delta * A -> 0`, so below
//! [`SERIES_THRESHOLD`] it is replaced by its Taylor series.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const SERIES_THRESHOLD: f64 = 1e-4;

/// Per-step decay factors and input gains, both `[L, C, N]`.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscretizedPair {
    pub abar: Tensor,
    pub bbar: Tensor,
}

/// `(exp(delta*a) - 1) / a` from the closed form.
#[inline]
pub fn phi_exact(delta: f64, a: f64) -> f64 {
    (delta * a).exp_m1() / a
}

/// `delta * (1 + z/2 + z^2/6)` with `z = delta * a`; truncation error is
/// `delta * z^3 / 24`.
#[inline]
pub fn phi_series(delta: f64, a: f64) -> f64 {
    let z = delta * a;
    delta * (1.0 + z * (0.5 + z / 6.0))
}

/// Returns `(Abar, (Abar - 1)/A)` for one (step, channel, state) entry.
#[inline]
pub fn zoh(delta: f64, a: f64) -> (f64, f64) {
    let z = delta * a;
    let abar = z.exp();
    let phi = if z.abs() < SERIES_THRESHOLD {
        phi_series(delta, a)
    } else {
        phi_exact(delta, a)
    };
    (abar, phi)
}

/// Partial derivatives of `phi = (exp(delta*a) - 1)/a`: `(d/d delta, d/d a)`.
#[inline]
pub fn zoh_phi_grads(delta: f64, a: f64, abar: f64) -> (f64, f64) {
    let z = delta * a;
    let d_delta = abar;
    let d_a = if z.abs() < SERIES_THRESHOLD {
        delta * delta * (0.5 + z * (1.0 / 3.0 + z / 8.0))
    } else {
        (delta * abar * a - z.exp_m1()) / (a * a)
    };
    (d_delta, d_a)
}

/// Discretizes `A: [C, N]` with per-step gains `B_t: [L, N]` and step sizes
/// `delta: [L, C]`.
pub fn discretize_zoh(a: &Tensor, b_t: &Tensor, delta: &Tensor) -> Result<DiscretizedPair> {
    let (c, n) = a.dims2()?;
    let (l, bn) = b_t.dims2()?;
    let (dl, dc) = delta.dims2()?;
    if bn != n || dl != l || dc != c {
        return Err(Error::shape(
            "discretize_zoh",
            format!("A {:?}, B {:?}, delta {:?}", a.shape(), b_t.shape(), delta.shape()),
        ));
    }
    if let Some(bad) = delta.data().iter().find(|&&d| !(d > 0.0)) {
        return Err(Error::InvalidArgument(format!(
            "delta must be strictly positive, got {bad}"
        )));
    }
    let mut abar = vec![0.0; l * c * n];
    let mut bbar = vec![0.0; l * c * n];
    for k in 0..l {
        for ch in 0..c {
            let dt = delta.data()[k * c + ch];
            for s in 0..n {
                let (ab, phi) = zoh(dt, a.data()[ch * n + s]);
                let i = (k * c + ch) * n + s;
                abar[i] = ab;
                bbar[i] = phi * b_t.data()[k * n + s];
            }
        }
    }
    Ok(DiscretizedPair {
        abar: Tensor::new(vec![l, c, n], abar)?,
        bbar: Tensor::new(vec![l, c, n], bbar)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn closed_form_ln2() {
        let a = Tensor::new(vec![1, 1], vec![-1.0]).unwrap();
        let b = Tensor::new(vec![1, 1], vec![1.0]).unwrap();
        let d = Tensor::new(vec![1, 1], vec![std::f64::consts::LN_2]).unwrap();
        let p = discretize_zoh(&a, &b, &d).unwrap();
        assert!((p.abar.data()[0] - 0.5).abs() < 1e-12);
        assert!((p.bbar.data()[0] - 0.5).abs() < 1e-12);
        // Bbar scales linearly with B
        let b3 = Tensor::new(vec![1, 1], vec![3.0]).unwrap();
        let p3 = discretize_zoh(&a, &b3, &d).unwrap();
        assert!((p3.bbar.data()[0] - 1.5).abs() < 1e-12);
    }

    #[test]
    fn vanishing_step() {
        let (abar, phi) = zoh(1e-14, -2.0);
        assert!((abar - 1.0).abs() < 1e-13);
        assert!(phi.abs() < 1e-13);
    }

    #[test]
    fn series_matches_exact_at_threshold() {
        for a in [-1.0, -3.5, -0.25] {
            let delta = SERIES_THRESHOLD / -a;
            let (s, e) = (phi_series(delta, a), phi_exact(delta, a));
            assert!(((s - e) / e).abs() < 1e-10, "a={a}: {s} vs {e}");
        }
    }

    #[test]
    fn rejects_non_positive_delta() {
        let a = Tensor::new(vec![1, 1], vec![-1.0]).unwrap();
        let b = Tensor::new(vec![2, 1], vec![1.0, 1.0]).unwrap();
        let d = Tensor::new(vec![2, 1], vec![0.1, 0.0]).unwrap();
        assert!(discretize_zoh(&a, &b, &d).is_err());
    }

    #[test]
    fn phi_grads_match_finite_differences() {
        // the tiny-step case is limited by the oracle: the perturbation of phi
        // sits ~4 digits below its magnitude
        for (delta, a, tol) in [
            (0.3, -1.7, 1e-5),
            (1e-6, -2.0, 1e-3),
            (0.05, -4.0, 1e-5),
            (2.0, -0.5, 1e-5),
        ] {
            let (abar, _) = zoh(delta, a);
            let (gd, ga) = zoh_phi_grads(delta, a, abar);
            let h = 1e-7 * delta.max(1e-3);
            let nd = (phi_exact(delta + h, a) - phi_exact(delta - h, a)) / (2.0 * h);
            let ha = 1e-6;
            let na = (phi_exact(delta, a + ha) - phi_exact(delta, a - ha)) / (2.0 * ha);
            assert!((gd - nd).abs() <= 1e-6 * nd.abs().max(1e-9), "d/ddelta at {delta},{a}");
            assert!((ga - na).abs() <= tol * na.abs(), "d/da at {delta},{a}: {ga} vs {na}");
        }
    }

    proptest! {
        #[test]
        fn decay_is_in_unit_interval(delta in 1e-6f64..5.0, neg_a in 1e-3f64..20.0) {
            let (abar, phi) = zoh(delta, -neg_a);
            prop_assert!(abar > 0.0 && abar < 1.0);
            prop_assert!(phi > 0.0 && phi <= delta);
        }
    }
}
