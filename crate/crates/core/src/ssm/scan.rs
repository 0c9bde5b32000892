//! Selective scans.
//!
//! Per (channel c, state n) lane the recurrence is
//!
//! ```text
//! h_k = Abar_k h_{k-1} + Bbar_k x_k,    h_{-1} = 0
//! y_k = <C_k, h_k> + D x_k
//! ```
//!
//! The map `h -> a h + b` composes associatively, which is what the parallel
//! scan exploits.

use rayon::prelude::*;

use super::discretize::{zoh, zoh_phi_grads};
use super::{project, project_vjp, SsmParams};
use crate::error::{Error, Result};
use crate::params::zeros_like;
use crate::tensor::Tensor;

/// Composes two affine steps: `first` is applied before `second`.
///
/// `(a2, b2) o (a1, b1) = (a1 a2, a2 b1 + b2)`.
#[inline]
pub fn combine(first: (f64, f64), second: (f64, f64)) -> (f64, f64) {
    (first.0 * second.0, second.0 * first.1 + second.1)
}

/// Exclusive Blelloch scan in place over a power-of-two buffer.
fn blelloch_exclusive(buf: &mut [(f64, f64)]) {
    let m = buf.len();
    debug_assert!(m.is_power_of_two());
    let mut stride = 1;
    while stride < m {
        let span = stride * 2;
        let mut i = 0;
        while i < m {
            let (l, r) = (i + stride - 1, i + span - 1);
            buf[r] = combine(buf[l], buf[r]);
            i += span;
        }
        stride = span;
    }
    buf[m - 1] = (1.0, 0.0);
    while stride > 1 {
        let half = stride / 2;
        let mut i = 0;
        while i < m {
            let (l, r) = (i + half - 1, i + stride - 1);
            let t = buf[l];
            buf[l] = buf[r];
            buf[r] = combine(buf[r], t);
            i += stride;
        }
        stride = half;
    }
}

/// All states `h_k` of one lane via the work-efficient scan.
fn lane_states_par(pairs: &[(f64, f64)]) -> Vec<f64> {
    let l = pairs.len();
    if l == 0 {
        return Vec::new();
    }
    let m = l.next_power_of_two();
    let mut buf = Vec::with_capacity(m);
    buf.extend_from_slice(pairs);
    buf.resize(m, (1.0, 0.0));
    blelloch_exclusive(&mut buf);
    // inclusive prefix = exclusive prefix followed by the element itself;
    // with h_{-1} = 0 only the offset component matters
    (0..l).map(|k| pairs[k].0 * buf[k].1 + pairs[k].1).collect()
}

fn check_discretized(
    abar: &Tensor,
    bbar: &Tensor,
    c: &Tensor,
    d: &Tensor,
    x: &Tensor,
) -> Result<(usize, usize, usize)> {
    let (l, ch, n) = abar.dims3()?;
    let ok = bbar.shape() == [l, ch, n] && c.shape() == [l, n] && d.shape() == [ch] && x.shape() == [l, ch];
    if !ok {
        return Err(Error::shape(
            "scan_discretized",
            format!(
                "abar {:?} bbar {:?} C {:?} D {:?} x {:?}",
                abar.shape(),
                bbar.shape(),
                c.shape(),
                d.shape(),
                x.shape()
            ),
        ));
    }
    Ok((l, ch, n))
}

/// Sequential recurrence over pre-discretized coefficients.
/// `abar, bbar: [L, C, N]`, `c: [L, N]`, `d: [C]`, `x: [L, C]`.
pub fn scan_discretized_seq(abar: &Tensor, bbar: &Tensor, c: &Tensor, d: &Tensor, x: &Tensor) -> Result<Tensor> {
    let (l, ch, n) = check_discretized(abar, bbar, c, d, x)?;
    let mut h = vec![0.0; ch * n];
    let mut y = vec![0.0; l * ch];
    for k in 0..l {
        let ck = &c.data()[k * n..(k + 1) * n];
        for cc in 0..ch {
            let xv = x.data()[k * ch + cc];
            let base = (k * ch + cc) * n;
            let hs = &mut h[cc * n..(cc + 1) * n];
            let mut acc = 0.0;
            for s in 0..n {
                hs[s] = abar.data()[base + s] * hs[s] + bbar.data()[base + s] * xv;
                acc += ck[s] * hs[s];
            }
            y[k * ch + cc] = acc + d.data()[cc] * xv;
        }
    }
    Tensor::new(vec![l, ch], y)
}

/// Parallel-scan counterpart of [`scan_discretized_seq`].
pub fn scan_discretized_par(abar: &Tensor, bbar: &Tensor, c: &Tensor, d: &Tensor, x: &Tensor) -> Result<Tensor> {
    let (l, ch, n) = check_discretized(abar, bbar, c, d, x)?;
    let lanes: Vec<Vec<f64>> = (0..ch * n)
        .into_par_iter()
        .map(|lane| {
            let (cc, s) = (lane / n, lane % n);
            let pairs: Vec<(f64, f64)> = (0..l)
                .map(|k| {
                    let i = (k * ch + cc) * n + s;
                    (abar.data()[i], bbar.data()[i] * x.data()[k * ch + cc])
                })
                .collect();
            lane_states_par(&pairs)
        })
        .collect();
    Ok(readout(&lanes, c, d, x, l, ch, n))
}

fn readout(lanes: &[Vec<f64>], c: &Tensor, d: &Tensor, x: &Tensor, l: usize, ch: usize, n: usize) -> Tensor {
    let mut y = vec![0.0; l * ch];
    for k in 0..l {
        for cc in 0..ch {
            let mut acc = 0.0;
            for s in 0..n {
                acc += c.data()[k * n + s] * lanes[cc * n + s][k];
            }
            y[k * ch + cc] = acc + d.data()[cc] * x.data()[k * ch + cc];
        }
    }
    Tensor::new(vec![l, ch], y).expect("readout shape")
}

fn empty_output(x: &Tensor, p: &SsmParams) -> Option<Tensor> {
    (x.shape().first() == Some(&0)).then(|| Tensor::zeros(&[0, p.channels()]))
}

/// Sequential selective scan of `x: [L, C]`; coefficients are discretized on
/// the fly so memory stays `O(L C + C N)`.
pub fn selective_scan_seq(x: &Tensor, p: &SsmParams) -> Result<Tensor> {
    if let Some(e) = empty_output(x, p) {
        return Ok(e);
    }
    let pr = project(x, p)?;
    let (l, ch) = x.dims2()?;
    let n = p.state_dim();
    let a = p.a();
    let mut h = vec![0.0; ch * n];
    let mut y = vec![0.0; l * ch];
    for k in 0..l {
        let bk = &pr.b.data()[k * n..(k + 1) * n];
        let ck = &pr.c.data()[k * n..(k + 1) * n];
        for cc in 0..ch {
            let xv = x.data()[k * ch + cc];
            let dt = pr.delta.data()[k * ch + cc];
            let ar = &a.data()[cc * n..(cc + 1) * n];
            let hs = &mut h[cc * n..(cc + 1) * n];
            let mut acc = 0.0;
            for s in 0..n {
                let (abar, phi) = zoh(dt, ar[s]);
                hs[s] = abar * hs[s] + phi * bk[s] * xv;
                acc += ck[s] * hs[s];
            }
            y[k * ch + cc] = acc + p.d.data()[cc] * xv;
        }
    }
    Tensor::new(vec![l, ch], y)
}

/// Selective scan evaluated with the associative combine and a
/// work-efficient up-sweep/down-sweep per lane; lanes run in parallel.
pub fn selective_scan_par(x: &Tensor, p: &SsmParams) -> Result<Tensor> {
    if let Some(e) = empty_output(x, p) {
        return Ok(e);
    }
    let pr = project(x, p)?;
    let (l, ch) = x.dims2()?;
    let n = p.state_dim();
    let a = p.a();
    let lanes: Vec<Vec<f64>> = (0..ch * n)
        .into_par_iter()
        .map(|lane| {
            let (cc, s) = (lane / n, lane % n);
            let av = a.data()[cc * n + s];
            let pairs: Vec<(f64, f64)> = (0..l)
                .map(|k| {
                    let (abar, phi) = zoh(pr.delta.data()[k * ch + cc], av);
                    (abar, phi * pr.b.data()[k * n + s] * x.data()[k * ch + cc])
                })
                .collect();
            lane_states_par(&pairs)
        })
        .collect();
    Ok(readout(&lanes, &pr.c, &p.d, x, l, ch, n))
}

/// Gradients of `<upstream, selective_scan(x, p)>` with respect to `x` and
/// every parameter. The adjoint state runs right-to-left:
/// `lambda_k = C_k g_k + Abar_{k+1} lambda_{k+1}`.
pub fn selective_scan_vjp(x: &Tensor, p: &SsmParams, upstream: &Tensor) -> Result<(Tensor, SsmParams)> {
    let mut grads = zeros_like(p);
    if x.shape().first() == Some(&0) {
        return Ok((x.clone(), grads));
    }
    let (l, ch) = x.dims2()?;
    x.expect_same_shape("selective_scan_vjp", upstream)?;
    let pr = project(x, p)?;
    let n = p.state_dim();
    let a = p.a();
    let (xd, g, dt, bt, ct) = (x.data(), upstream.data(), pr.delta.data(), pr.b.data(), pr.c.data());

    // forward states, [L, C, N]
    let mut hs = vec![0.0; l * ch * n];
    for k in 0..l {
        for cc in 0..ch {
            for s in 0..n {
                let (abar, phi) = zoh(dt[k * ch + cc], a.data()[cc * n + s]);
                let prev = if k == 0 { 0.0 } else { hs[((k - 1) * ch + cc) * n + s] };
                hs[(k * ch + cc) * n + s] = abar * prev + phi * bt[k * n + s] * xd[k * ch + cc];
            }
        }
    }

    let mut dx = vec![0.0; l * ch];
    let mut d_delta = vec![0.0; l * ch];
    let mut d_b = vec![0.0; l * n];
    let mut d_c = vec![0.0; l * n];
    let mut d_a = vec![0.0; ch * n];
    let mut carry = vec![0.0; ch * n];
    for k in (0..l).rev() {
        for cc in 0..ch {
            let gi = g[k * ch + cc];
            let xv = xd[k * ch + cc];
            let dtv = dt[k * ch + cc];
            grads.d.data_mut()[cc] += gi * xv;
            let mut dxv = gi * p.d.data()[cc];
            let mut ddt = 0.0;
            for s in 0..n {
                let i = (k * ch + cc) * n + s;
                let av = a.data()[cc * n + s];
                let (abar, phi) = zoh(dtv, av);
                let lam = gi * ct[k * n + s] + carry[cc * n + s];
                d_c[k * n + s] += gi * hs[i];
                let prev = if k == 0 { 0.0 } else { hs[i - ch * n] };
                let d_abar = lam * prev;
                let d_bbar = lam * xv;
                let bv = bt[k * n + s];
                dxv += lam * phi * bv;
                let (dphi_dt, dphi_da) = zoh_phi_grads(dtv, av, abar);
                ddt += d_abar * abar * av + d_bbar * bv * dphi_dt;
                d_a[cc * n + s] += d_abar * abar * dtv + d_bbar * bv * dphi_da;
                d_b[k * n + s] += d_bbar * phi;
                carry[cc * n + s] = abar * lam;
            }
            dx[k * ch + cc] = dxv;
            d_delta[k * ch + cc] = ddt;
        }
    }

    for (i, ga) in grads.a_log.data_mut().iter_mut().enumerate() {
        *ga += d_a[i] * a.data()[i];
    }
    let d_delta = Tensor::new(vec![l, ch], d_delta)?;
    let d_b = Tensor::new(vec![l, n], d_b)?;
    let d_c = Tensor::new(vec![l, n], d_c)?;
    let dx_proj = project_vjp(x, p, &pr, &d_delta, &d_b, &d_c, &mut grads)?;
    let mut dx = Tensor::new(vec![l, ch], dx)?;
    dx.add_assign(&dx_proj)?;
    Ok((dx, grads))
}
