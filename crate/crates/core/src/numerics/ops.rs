//! Differentiable dense ops. Each forward has a matching `*_vjp` that maps an
//! upstream cotangent back onto every differentiable input.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.max(0.0) + (-x.abs()).exp().ln_1p()
    }
}

#[inline]
pub fn silu_scalar(x: f64) -> f64 {
    x * sigmoid(x)
}

#[inline]
fn silu_grad_scalar(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

pub fn silu(x: &Tensor) -> Tensor {
    x.map(silu_scalar)
}

pub fn silu_vjp(x: &Tensor, dy: &Tensor) -> Result<Tensor> {
    x.zip_map(dy, |v, g| g * silu_grad_scalar(v))
}

fn last_axis(x: &Tensor, op: &'static str) -> Result<usize> {
    match x.shape().last() {
        Some(&0) => Err(Error::shape(op, "last axis has extent 0")),
        Some(&d) => Ok(d),
        None => Err(Error::shape(op, "scalar input")),
    }
}

/// Normalizes each vector along the last axis, then applies `gamma`/`beta`.
pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    let d = last_axis(x, "layer_norm")?;
    if gamma.shape() != [d] || beta.shape() != [d] {
        return Err(Error::shape(
            "layer_norm",
            format!("gamma {:?} / beta {:?} must be [{d}]", gamma.shape(), beta.shape()),
        ));
    }
    let (g, b) = (gamma.data(), beta.data());
    let mut out = vec![0.0; x.len()];
    for (row, o) in x.data().chunks_exact(d).zip(out.chunks_exact_mut(d)) {
        let (mean, rstd) = moments(row, eps);
        for i in 0..d {
            o[i] = (row[i] - mean) * rstd * g[i] + b[i];
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

fn moments(row: &[f64], eps: f64) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, 1.0 / (var + eps).sqrt())
}

/// Returns `(dx, dgamma, dbeta)`.
pub fn layer_norm_vjp(x: &Tensor, gamma: &Tensor, eps: f64, dy: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
    let d = last_axis(x, "layer_norm_vjp")?;
    x.expect_same_shape("layer_norm_vjp", dy)?;
    let g = gamma.data();
    let mut dx = vec![0.0; x.len()];
    let mut dgamma = vec![0.0; d];
    let mut dbeta = vec![0.0; d];
    let mut xhat = vec![0.0; d];
    let mut dxhat = vec![0.0; d];
    for ((row, gy), gx) in x
        .data()
        .chunks_exact(d)
        .zip(dy.data().chunks_exact(d))
        .zip(dx.chunks_exact_mut(d))
    {
        let (mean, rstd) = moments(row, eps);
        for i in 0..d {
            xhat[i] = (row[i] - mean) * rstd;
            dxhat[i] = gy[i] * g[i];
            dgamma[i] += gy[i] * xhat[i];
            dbeta[i] += gy[i];
        }
        let n = d as f64;
        let mean_dxhat = dxhat.iter().sum::<f64>() / n;
        let mean_dxhat_xhat = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / n;
        for i in 0..d {
            gx[i] = rstd * (dxhat[i] - mean_dxhat - xhat[i] * mean_dxhat_xhat);
        }
    }
    Ok((
        Tensor::new(x.shape().to_vec(), dx)?,
        Tensor::new(vec![d], dgamma)?,
        Tensor::new(vec![d], dbeta)?,
    ))
}

fn linear_dims(x: &Tensor, w: &Tensor, op: &'static str) -> Result<(usize, usize, usize)> {
    let (fan_in, fan_out) = w.dims2()?;
    let d = *x.shape().last().ok_or_else(|| Error::shape(op, "scalar input"))?;
    if d != fan_in {
        return Err(Error::shape(
            op,
            format!("input last axis {d} vs weight {:?}", w.shape()),
        ));
    }
    let rows = if fan_in == 0 { 0 } else { x.len() / fan_in };
    Ok((rows, fan_in, fan_out))
}

/// `y = x W + b` over the last axis; `W` is `[in, out]`.
pub fn linear(x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
    let (rows, fan_in, fan_out) = linear_dims(x, w, "linear")?;
    if let Some(b) = b {
        if b.shape() != [fan_out] {
            return Err(Error::shape("linear", format!("bias {:?} vs out {fan_out}", b.shape())));
        }
    }
    let wd = w.data();
    let mut out = vec![0.0; rows * fan_out];
    for (xr, yr) in x
        .data()
        .chunks_exact(fan_in.max(1))
        .zip(out.chunks_exact_mut(fan_out.max(1)))
    {
        if let Some(b) = b {
            yr.copy_from_slice(b.data());
        }
        for (i, &xv) in xr.iter().enumerate() {
            if xv == 0.0 {
                continue;
            }
            let wr = &wd[i * fan_out..(i + 1) * fan_out];
            for (y, &wv) in yr.iter_mut().zip(wr) {
                *y += xv * wv;
            }
        }
    }
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = fan_out;
    Tensor::new(shape, out)
}

/// Returns `(dx, dW, db)`.
pub fn linear_vjp(x: &Tensor, w: &Tensor, dy: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
    let (rows, fan_in, fan_out) = linear_dims(x, w, "linear_vjp")?;
    if dy.len() != rows * fan_out {
        return Err(Error::shape("linear_vjp", format!("upstream {:?}", dy.shape())));
    }
    let wd = w.data();
    let mut dx = vec![0.0; x.len()];
    let mut dw = vec![0.0; fan_in * fan_out];
    let mut db = vec![0.0; fan_out];
    for ((xr, gr), dxr) in x
        .data()
        .chunks_exact(fan_in.max(1))
        .zip(dy.data().chunks_exact(fan_out.max(1)))
        .zip(dx.chunks_exact_mut(fan_in.max(1)))
    {
        for (b, g) in db.iter_mut().zip(gr) {
            *b += g;
        }
        for i in 0..fan_in {
            let wr = &wd[i * fan_out..(i + 1) * fan_out];
            let dwr = &mut dw[i * fan_out..(i + 1) * fan_out];
            let xv = xr[i];
            let mut acc = 0.0;
            for ((dwv, &wv), &g) in dwr.iter_mut().zip(wr).zip(gr) {
                acc += g * wv;
                *dwv += xv * g;
            }
            dxr[i] = acc;
        }
    }
    Ok((
        Tensor::new(x.shape().to_vec(), dx)?,
        Tensor::new(vec![fan_in, fan_out], dw)?,
        Tensor::new(vec![fan_out], db)?,
    ))
}

fn odd_kernel(kh: usize, kw: usize, op: &'static str) -> Result<()> {
    if kh.is_multiple_of(2) || kw.is_multiple_of(2) {
        return Err(Error::shape(op, format!("kernel {kh}x{kw} must have odd extents")));
    }
    Ok(())
}

/// Per-channel 2D cross-correlation with zero "same" padding.
pub fn depthwise_conv2d(x: &Tensor, k: &Tensor) -> Result<Tensor> {
    let (c, h, w) = x.dims3()?;
    let (kc, kh, kw) = k.dims3()?;
    if kc != c {
        return Err(Error::shape(
            "depthwise_conv2d",
            format!("{c} channels vs kernel {:?}", k.shape()),
        ));
    }
    odd_kernel(kh, kw, "depthwise_conv2d")?;
    let mut out = vec![0.0; x.len()];
    let (xd, kd) = (x.data(), k.data());
    for ch in 0..c {
        let plane = &xd[ch * h * w..(ch + 1) * h * w];
        let kern = &kd[ch * kh * kw..(ch + 1) * kh * kw];
        let dst = &mut out[ch * h * w..(ch + 1) * h * w];
        correlate_plane_add(plane, kern, dst, h, w, kh, kw);
    }
    Tensor::new(vec![c, h, w], out)
}

/// `dst[y, x] += sum_{i,j} kern[i, j] * src[y + i - kh/2, x + j - kw/2]`.
fn correlate_plane_add(src: &[f64], kern: &[f64], dst: &mut [f64], h: usize, w: usize, kh: usize, kw: usize) {
    let (ph, pw) = ((kh / 2) as isize, (kw / 2) as isize);
    for i in 0..kh {
        let dy = i as isize - ph;
        for j in 0..kw {
            let kv = kern[i * kw + j];
            if kv == 0.0 {
                continue;
            }
            let dx = j as isize - pw;
            let x0 = (-dx).max(0) as usize;
            let x1 = (w as isize - dx).min(w as isize).max(0) as usize;
            for y in 0..h {
                let sy = y as isize + dy;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                let srow = &src[sy as usize * w..(sy as usize + 1) * w];
                let drow = &mut dst[y * w..(y + 1) * w];
                for x in x0..x1 {
                    drow[x] += kv * srow[(x as isize + dx) as usize];
                }
            }
        }
    }
}

/// `dsrc[y + i - ph, x + j - pw] += kern[i, j] * dout[y, x]` and the kernel gradient.
#[allow(clippy::too_many_arguments)]
fn correlate_plane_vjp(
    src: &[f64],
    kern: &[f64],
    dout: &[f64],
    dsrc: &mut [f64],
    dkern: &mut [f64],
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
) {
    let (ph, pw) = ((kh / 2) as isize, (kw / 2) as isize);
    for i in 0..kh {
        let dy = i as isize - ph;
        for j in 0..kw {
            let kv = kern[i * kw + j];
            let dx = j as isize - pw;
            let x0 = (-dx).max(0) as usize;
            let x1 = (w as isize - dx).min(w as isize).max(0) as usize;
            let mut acc = 0.0;
            for y in 0..h {
                let sy = y as isize + dy;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                let sy = sy as usize;
                let grow = &dout[y * w..(y + 1) * w];
                for x in x0..x1 {
                    let sx = (x as isize + dx) as usize;
                    acc += grow[x] * src[sy * w + sx];
                    dsrc[sy * w + sx] += kv * grow[x];
                }
            }
            dkern[i * kw + j] += acc;
        }
    }
}

/// Returns `(dx, dk)`.
pub fn depthwise_conv2d_vjp(x: &Tensor, k: &Tensor, dy: &Tensor) -> Result<(Tensor, Tensor)> {
    let (c, h, w) = x.dims3()?;
    let (_, kh, kw) = k.dims3()?;
    x.expect_same_shape("depthwise_conv2d_vjp", dy)?;
    let mut dx = vec![0.0; x.len()];
    let mut dk = vec![0.0; k.len()];
    let (xd, kd, gd) = (x.data(), k.data(), dy.data());
    for ch in 0..c {
        let p = ch * h * w..(ch + 1) * h * w;
        let q = ch * kh * kw..(ch + 1) * kh * kw;
        correlate_plane_vjp(
            &xd[p.clone()],
            &kd[q.clone()],
            &gd[p.clone()],
            &mut dx[p],
            &mut dk[q],
            h,
            w,
            kh,
            kw,
        );
    }
    Ok((Tensor::new(vec![c, h, w], dx)?, Tensor::new(k.shape().to_vec(), dk)?))
}

/// Dense 2D cross-correlation, zero "same" padding. `x: [Cin,H,W]`,
/// `w: [Cout,Cin,kh,kw]`, `b: [Cout]`.
pub fn conv2d(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (cin, h, wd) = x.dims3()?;
    let (cout, wcin, kh, kw) = w.dims4()?;
    if wcin != cin || b.shape() != [cout] {
        return Err(Error::shape(
            "conv2d",
            format!("input {:?}, weight {:?}, bias {:?}", x.shape(), w.shape(), b.shape()),
        ));
    }
    odd_kernel(kh, kw, "conv2d")?;
    let plane = h * wd;
    let ksz = kh * kw;
    let mut out = vec![0.0; cout * plane];
    for o in 0..cout {
        let dst = &mut out[o * plane..(o + 1) * plane];
        dst.iter_mut().for_each(|v| *v = b.data()[o]);
        for i in 0..cin {
            let kern = &w.data()[(o * cin + i) * ksz..(o * cin + i + 1) * ksz];
            correlate_plane_add(&x.data()[i * plane..(i + 1) * plane], kern, dst, h, wd, kh, kw);
        }
    }
    Tensor::new(vec![cout, h, wd], out)
}

/// Returns `(dx, dw, db)`.
pub fn conv2d_vjp(x: &Tensor, w: &Tensor, dy: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
    let (cin, h, wd) = x.dims3()?;
    let (cout, _, kh, kw) = w.dims4()?;
    if dy.shape() != [cout, h, wd] {
        return Err(Error::shape("conv2d_vjp", format!("upstream {:?}", dy.shape())));
    }
    let plane = h * wd;
    let ksz = kh * kw;
    let mut dx = vec![0.0; x.len()];
    let mut dw = vec![0.0; w.len()];
    let mut db = vec![0.0; cout];
    for o in 0..cout {
        let g = &dy.data()[o * plane..(o + 1) * plane];
        db[o] = g.iter().sum();
        for i in 0..cin {
            let kidx = (o * cin + i) * ksz..(o * cin + i + 1) * ksz;
            correlate_plane_vjp(
                &x.data()[i * plane..(i + 1) * plane],
                &w.data()[kidx.clone()],
                g,
                &mut dx[i * plane..(i + 1) * plane],
                &mut dw[kidx],
                h,
                wd,
                kh,
                kw,
            );
        }
    }
    Ok((
        Tensor::new(x.shape().to_vec(), dx)?,
        Tensor::new(w.shape().to_vec(), dw)?,
        Tensor::new(vec![cout], db)?,
    ))
}

/// Sparse 1D resampling matrix: for each output index, `(source index, weight)` taps.
#[derive(Clone, Debug, PartialEq)]
pub struct AxisWeights {
    pub in_len: usize,
    pub taps: Vec<Vec<(usize, f64)>>,
}

/// Cubic convolution kernel with parameter `a`.
fn cubic(x: f64, a: f64) -> f64 {
    let x = x.abs();
    if x <= 1.0 {
        ((a + 2.0) * x - (a + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((a * x - 5.0 * a) * x + 8.0 * a) * x - 4.0 * a
    } else {
        0.0
    }
}

pub const CATMULL_ROM_A: f64 = -0.5;

impl AxisWeights {
    /// Half-pixel-centred bicubic taps, clamped at the edges.
    pub fn bicubic(in_len: usize, out_len: usize) -> Self {
        let scale = in_len as f64 / out_len as f64;
        let last = in_len as isize - 1;
        let taps = (0..out_len)
            .map(|o| {
                let src = (o as f64 + 0.5) * scale - 0.5;
                let base = src.floor();
                let t = src - base;
                let base = base as isize;
                let mut row: Vec<(usize, f64)> = Vec::with_capacity(4);
                for (k, dist) in [(-1isize, t + 1.0), (0, t), (1, 1.0 - t), (2, 2.0 - t)] {
                    let wgt = cubic(dist, CATMULL_ROM_A);
                    if wgt == 0.0 {
                        continue;
                    }
                    let idx = (base + k).clamp(0, last) as usize;
                    match row.iter_mut().find(|(i, _)| *i == idx) {
                        Some(entry) => entry.1 += wgt,
                        None => row.push((idx, wgt)),
                    }
                }
                row
            })
            .collect();
        Self { in_len, taps }
    }

    /// Half-pixel-centred bilinear taps (no corner alignment).
    pub fn bilinear(in_len: usize, out_len: usize) -> Self {
        let scale = in_len as f64 / out_len as f64;
        let last = in_len - 1;
        let taps = (0..out_len)
            .map(|o| {
                let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
                let i0 = (src.floor() as usize).min(last);
                let t = src - i0 as f64;
                let i1 = (i0 + 1).min(last);
                if i1 == i0 || t == 0.0 {
                    vec![(i0, 1.0)]
                } else {
                    vec![(i0, 1.0 - t), (i1, t)]
                }
            })
            .collect();
        Self { in_len, taps }
    }

    /// Adaptive average pooling bins `[floor(i*n/m), ceil((i+1)*n/m))`.
    pub fn adaptive_mean(in_len: usize, out_len: usize) -> Self {
        let taps = (0..out_len)
            .map(|o| {
                let start = o * in_len / out_len;
                let end = ((o + 1) * in_len).div_ceil(out_len);
                let wgt = 1.0 / (end - start) as f64;
                (start..end).map(|i| (i, wgt)).collect()
            })
            .collect();
        Self { in_len, taps }
    }

    pub fn out_len(&self) -> usize {
        self.taps.len()
    }
}

/// A separable resampling of the two trailing spatial axes of `[C, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Resample2d {
    pub rows: AxisWeights,
    pub cols: AxisWeights,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Kernel {
    Bicubic,
    Bilinear,
    AdaptiveMean,
}

impl Resample2d {
    pub fn new(kernel: Kernel, in_h: usize, in_w: usize, out_h: usize, out_w: usize) -> Result<Self> {
        if out_h == 0 || out_w == 0 || in_h == 0 || in_w == 0 {
            return Err(Error::InvalidArgument(format!(
                "resample {in_h}x{in_w} -> {out_h}x{out_w}: extents must be >= 1"
            )));
        }
        let make = match kernel {
            Kernel::Bicubic => AxisWeights::bicubic,
            Kernel::Bilinear => AxisWeights::bilinear,
            Kernel::AdaptiveMean => AxisWeights::adaptive_mean,
        };
        Ok(Self {
            rows: make(in_h, out_h),
            cols: make(in_w, out_w),
        })
    }

    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let (c, h, w) = x.dims3()?;
        if h != self.rows.in_len || w != self.cols.in_len {
            return Err(Error::shape(
                "resample",
                format!(
                    "input {:?} vs plan {}x{}",
                    x.shape(),
                    self.rows.in_len,
                    self.cols.in_len
                ),
            ));
        }
        let (oh, ow) = (self.rows.out_len(), self.cols.out_len());
        let mut tmp = vec![0.0; c * h * ow];
        for (src, dst) in x.data().chunks_exact(w).zip(tmp.chunks_exact_mut(ow)) {
            for (d, taps) in dst.iter_mut().zip(&self.cols.taps) {
                *d = taps.iter().map(|&(i, wt)| wt * src[i]).sum();
            }
        }
        let mut out = vec![0.0; c * oh * ow];
        for ch in 0..c {
            let src = &tmp[ch * h * ow..(ch + 1) * h * ow];
            let dst = &mut out[ch * oh * ow..(ch + 1) * oh * ow];
            for (oy, taps) in self.rows.taps.iter().enumerate() {
                let drow = &mut dst[oy * ow..(oy + 1) * ow];
                for &(iy, wt) in taps {
                    let srow = &src[iy * ow..(iy + 1) * ow];
                    for (d, s) in drow.iter_mut().zip(srow) {
                        *d += wt * s;
                    }
                }
            }
        }
        Tensor::new(vec![c, oh, ow], out)
    }

    /// Adjoint of [`Resample2d::apply`].
    pub fn apply_transpose(&self, dy: &Tensor) -> Result<Tensor> {
        let (c, oh, ow) = dy.dims3()?;
        if oh != self.rows.out_len() || ow != self.cols.out_len() {
            return Err(Error::shape("resample_vjp", format!("upstream {:?}", dy.shape())));
        }
        let (h, w) = (self.rows.in_len, self.cols.in_len);
        let mut tmp = vec![0.0; c * h * ow];
        for ch in 0..c {
            let src = &dy.data()[ch * oh * ow..(ch + 1) * oh * ow];
            let dst = &mut tmp[ch * h * ow..(ch + 1) * h * ow];
            for (oy, taps) in self.rows.taps.iter().enumerate() {
                let srow = &src[oy * ow..(oy + 1) * ow];
                for &(iy, wt) in taps {
                    let drow = &mut dst[iy * ow..(iy + 1) * ow];
                    for (d, s) in drow.iter_mut().zip(srow) {
                        *d += wt * s;
                    }
                }
            }
        }
        let mut out = vec![0.0; c * h * w];
        for (src, dst) in tmp.chunks_exact(ow).zip(out.chunks_exact_mut(w)) {
            for (s, taps) in src.iter().zip(&self.cols.taps) {
                for &(i, wt) in taps {
                    dst[i] += wt * s;
                }
            }
        }
        Tensor::new(vec![c, h, w], out)
    }
}

/// Separable Catmull-Rom resize of `[C, H, W]` with clamp-to-edge sampling.
pub fn resize_bicubic(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (_, h, w) = x.dims3()?;
    if (h, w) == (out_h, out_w) {
        return Ok(x.clone());
    }
    Resample2d::new(Kernel::Bicubic, h, w, out_h, out_w)?.apply(x)
}

pub fn resize_bilinear(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (_, h, w) = x.dims3()?;
    Resample2d::new(Kernel::Bilinear, h, w, out_h, out_w)?.apply(x)
}

/// Nearest-neighbour resize of a `[H, W]` label map (half-pixel centres).
pub fn resize_nearest_2d(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (h, w) = x.dims2()?;
    if out_h == 0 || out_w == 0 {
        return Err(Error::InvalidArgument("nearest resize to zero extent".into()));
    }
    let pick = |o: usize, n_in: usize, n_out: usize| {
        (((o as f64 + 0.5) * n_in as f64 / n_out as f64).floor() as usize).min(n_in - 1)
    };
    let mut out = Vec::with_capacity(out_h * out_w);
    for oy in 0..out_h {
        let sy = pick(oy, h, out_h);
        for ox in 0..out_w {
            out.push(x.data()[sy * w + pick(ox, w, out_w)]);
        }
    }
    Tensor::new(vec![out_h, out_w], out)
}
