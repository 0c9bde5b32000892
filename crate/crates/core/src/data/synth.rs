//! Synthetic RGB+IR crack pairs.
//!
//! Each sample is a textured concrete-like background crossed by random
//! smooth polyline cracks. Cracks darken the RGB image, except a designated
//! subset that leaves RGB untouched. All cracks show up as warm lines in a
//! smooth thermal field, which is blurred and resampled to the IR grid.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::SamplePair;
use crate::error::{Error, Result};
use crate::numerics::ops::resize_bicubic;
use crate::rng::{self, Stream};
use crate::scale::ScaleFactor;
use crate::tensor::Tensor;

/// Accepted range of crack-pixel fraction per image.
pub const CRACK_FRACTION: (f64, f64) = (0.002, 0.08);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub rgb_height: usize,
    pub rgb_width: usize,
    pub ir_factor: ScaleFactor,
    /// Probability that a crack is invisible in RGB.
    pub ir_only_prob: f64,
    /// Crack widths are drawn uniformly from this range, in RGB pixels.
    pub width_range: (f64, f64),
    pub max_cracks: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            rgb_height: 120,
            rgb_width: 120,
            ir_factor: ScaleFactor { num: 10, den: 3 },
            ir_only_prob: 0.3,
            width_range: (1.0, 4.0),
            max_cracks: 3,
        }
    }
}

impl SynthConfig {
    pub fn ir_dims(&self) -> (usize, usize) {
        (
            self.ir_factor.shrink(self.rgb_height),
            self.ir_factor.shrink(self.rgb_width),
        )
    }

    pub fn validate(&self) -> Result<()> {
        let (ih, iw) = self.ir_dims();
        if self.rgb_height < 16 || self.rgb_width < 16 || ih == 0 || iw == 0 {
            return Err(Error::Config(format!(
                "synthetic RGB {}x{} (IR {ih}x{iw}) is too small",
                self.rgb_height, self.rgb_width
            )));
        }
        if self.ir_factor.value() < 1.0 {
            return Err(Error::Config("IR factor must be at least 1".into()));
        }
        let (lo, hi) = self.width_range;
        if !(lo > 0.0 && lo <= hi) {
            return Err(Error::Config(format!("crack width range {lo}..{hi}")));
        }
        if !(0.0..=1.0).contains(&self.ir_only_prob) || self.max_cracks == 0 {
            return Err(Error::Config(
                "ir_only_prob in [0,1] and max_cracks >= 1 required".into(),
            ));
        }
        Ok(())
    }
}

/// Everything the generator produced for one sample.
#[derive(Clone, Debug)]
pub struct SynthParts {
    /// `[3, H, W]` texture before any crack was drawn.
    pub background: Tensor,
    pub rgb: Tensor,
    pub ir: Tensor,
    /// Union of all cracks, `[H, W]`.
    pub mask: Tensor,
    /// Pixels covered only by RGB-invisible cracks, `[H, W]`.
    pub ir_only: Tensor,
}

struct Crack {
    points: Vec<(f64, f64)>,
    width: f64,
    ir_only: bool,
}

fn dist_to_segment(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
    };
    let (cx, cy) = (a.0 + t * dx - p.0, a.1 + t * dy - p.1);
    (cx * cx + cy * cy).sqrt()
}

fn random_crack(r: &mut impl Rng, h: usize, w: usize, cfg: &SynthConfig) -> Crack {
    let span = h.min(w) as f64;
    let mut p = (r.gen_range(0.0..w as f64), r.gen_range(0.0..h as f64));
    let mut theta: f64 = r.gen_range(0.0..std::f64::consts::TAU);
    let segments = r.gen_range(4..=10);
    let mut points = vec![p];
    for _ in 0..segments {
        theta += 0.35 * rng::normal(r);
        let len = r.gen_range(0.08..0.2) * span;
        p = (p.0 + len * theta.cos(), p.1 + len * theta.sin());
        points.push(p);
    }
    Crack {
        points,
        width: r.gen_range(cfg.width_range.0..=cfg.width_range.1),
        ir_only: r.gen_bool(cfg.ir_only_prob),
    }
}

/// Marks pixels whose centre lies within `width / 2` of the polyline.
fn rasterize(c: &Crack, h: usize, w: usize, out: &mut [bool]) {
    let rad = c.width / 2.0;
    for seg in c.points.windows(2) {
        let (a, b) = (seg[0], seg[1]);
        let x0 = (a.0.min(b.0) - rad - 1.0).floor().max(0.0) as usize;
        let x1 = ((a.0.max(b.0) + rad + 1.0).ceil().max(0.0) as usize).min(w);
        let y0 = (a.1.min(b.1) - rad - 1.0).floor().max(0.0) as usize;
        let y1 = ((a.1.max(b.1) + rad + 1.0).ceil().max(0.0) as usize).min(h);
        for y in y0..y1 {
            for x in x0..x1 {
                if dist_to_segment((x as f64 + 0.5, y as f64 + 0.5), a, b) <= rad {
                    out[y * w + x] = true;
                }
            }
        }
    }
}

/// Separable Gaussian blur of a single `[H, W]` plane, clamped edges.
fn gaussian_blur(plane: &[f64], h: usize, w: usize, sigma: f64) -> Vec<f64> {
    let rad = (3.0 * sigma).ceil() as isize;
    let k: Vec<f64> = (-rad..=rad)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f64 = k.iter().sum();
    let k: Vec<f64> = k.iter().map(|v| v / norm).collect();
    let clamp = |i: isize, n: usize| i.clamp(0, n as isize - 1) as usize;
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = (-rad..=rad)
                .map(|d| k[(d + rad) as usize] * plane[y * w + clamp(x as isize + d, w)])
                .sum();
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = (-rad..=rad)
                .map(|d| k[(d + rad) as usize] * tmp[clamp(y as isize + d, h) * w + x])
                .sum();
        }
    }
    out
}

/// Sum of a few random low-frequency plane waves, roughly in `[-1, 1]`.
fn smooth_field(r: &mut impl Rng, h: usize, w: usize, waves: usize) -> Vec<f64> {
    let params: Vec<(f64, f64, f64, f64)> = (0..waves)
        .map(|_| {
            let f = r.gen_range(0.5..2.5) * std::f64::consts::TAU / h.max(w) as f64;
            let a: f64 = r.gen_range(0.0..std::f64::consts::TAU);
            (
                f * a.cos(),
                f * a.sin(),
                r.gen_range(0.0..std::f64::consts::TAU),
                1.0 / waves as f64,
            )
        })
        .collect();
    (0..h * w)
        .map(|i| {
            let (y, x) = ((i / w) as f64, (i % w) as f64);
            params
                .iter()
                .map(|&(fx, fy, ph, amp)| amp * (fx * x + fy * y + ph).sin())
                .sum()
        })
        .collect()
}

fn background(r: &mut impl Rng, h: usize, w: usize) -> Tensor {
    let base = r.gen_range(0.45..0.7);
    let tint: Vec<f64> = (0..3).map(|_| r.gen_range(-0.03..0.03)).collect();
    let low = smooth_field(r, h, w, 3);
    let grain: Vec<f64> = (0..h * w).map(|_| r.gen_range(-0.08..0.08)).collect();
    let grain = gaussian_blur(&grain, h, w, 0.7);
    let plane = h * w;
    Tensor::from_fn(&[3, h, w], |i| {
        let (c, p) = (i / plane, i % plane);
        (base + tint[c] + 0.06 * low[p] + grain[p] + 0.01 * ((p * 7 + c) % 3) as f64).clamp(0.0, 1.0)
    })
}

/// Generates sample `index` of the dataset seeded by `seed`.
pub fn synth_parts(seed: u64, index: u64, cfg: &SynthConfig) -> Result<SynthParts> {
    cfg.validate()?;
    let (h, w) = (cfg.rgb_height, cfg.rgb_width);
    let mut r = rng::stream(seed, Stream::Data, index);
    let background = background(&mut r, h, w);

    let (lo, hi) = CRACK_FRACTION;
    let mut attempts = 0;
    let (all, ir_only_px) = loop {
        attempts += 1;
        if attempts > 10_000 {
            return Err(Error::Validation(format!(
                "could not place cracks within the {lo}..{hi} pixel fraction on {h}x{w}"
            )));
        }
        let n = r.gen_range(1..=cfg.max_cracks);
        let cracks: Vec<Crack> = (0..n).map(|_| random_crack(&mut r, h, w, cfg)).collect();
        let mut all = vec![false; h * w];
        let mut visible = vec![false; h * w];
        for c in &cracks {
            rasterize(c, h, w, &mut all);
            if !c.ir_only {
                rasterize(c, h, w, &mut visible);
            }
        }
        let frac = all.iter().filter(|&&b| b).count() as f64 / (h * w) as f64;
        if (lo..=hi).contains(&frac) {
            let ir_only: Vec<bool> = all.iter().zip(&visible).map(|(&a, &v)| a && !v).collect();
            break (all, ir_only);
        }
    };
    let visible: Vec<bool> = all.iter().zip(&ir_only_px).map(|(&a, &o)| a && !o).collect();

    let depth = r.gen_range(0.35..0.6);
    let plane = h * w;
    let mut rgb = background.clone();
    for (i, v) in rgb.data_mut().iter_mut().enumerate() {
        if visible[i % plane] {
            *v *= 1.0 - depth;
        }
    }

    // thermal field at RGB resolution, then low-passed onto the IR grid
    let warmth: Vec<f64> = all.iter().map(|&b| f64::from(u8::from(b))).collect();
    let warmth = gaussian_blur(&warmth, h, w, 0.6);
    let ambient = r.gen_range(0.25..0.4);
    let contrast = r.gen_range(0.45..0.6);
    let field = smooth_field(&mut r, h, w, 2);
    let thermal: Vec<f64> = (0..plane)
        .map(|p| (ambient + 0.08 * field[p] + contrast * warmth[p] + 0.01 * rng::normal(&mut r)).clamp(0.0, 1.0))
        .collect();
    let (ih, iw) = cfg.ir_dims();
    let sigma = 0.5 * cfg.ir_factor.value();
    let thermal = if cfg.ir_factor.is_identity() {
        thermal
    } else {
        gaussian_blur(&thermal, h, w, sigma)
    };
    let colour = Tensor::from_fn(&[3, h, w], |i| {
        let t = thermal[i % plane];
        match i / plane {
            0 => t,
            1 => t * t,
            _ => 1.0 - 0.8 * t,
        }
    });
    let ir = resize_bicubic(&colour, ih, iw)?.map(|v| v.clamp(0.0, 1.0));
    let to_mask = |b: &[bool]| Tensor::from_fn(&[h, w], |i| f64::from(u8::from(b[i])));
    Ok(SynthParts {
        background,
        rgb,
        ir,
        mask: to_mask(&all),
        ir_only: to_mask(&ir_only_px),
    })
}

pub fn sample_id(index: u64) -> String {
    format!("s{index:05}")
}

/// `n` samples, deterministic in `seed`.
pub fn synth_dataset(seed: u64, n: usize, cfg: &SynthConfig) -> Result<Vec<SamplePair>> {
    if n == 0 {
        return Err(Error::InvalidArgument("synthetic dataset of zero samples".into()));
    }
    (0..n as u64)
        .map(|i| {
            let p = synth_parts(seed, i, cfg)?;
            Ok(SamplePair {
                id: sample_id(i),
                rgb: p.rgb,
                ir: p.ir,
                mask: p.mask,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthConfig {
        SynthConfig {
            rgb_height: 60,
            rgb_width: 48,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn dims_and_ranges() {
        let s = synth_dataset(3, 4, &small()).unwrap();
        for p in &s {
            assert_eq!(p.rgb.shape(), &[3, 60, 48]);
            assert_eq!(p.ir.shape(), &[3, 18, 14]);
            assert_eq!(p.mask.shape(), &[60, 48]);
            assert!(p.rgb.data().iter().chain(p.ir.data()).all(|v| (0.0..=1.0).contains(v)));
            assert!(p.mask.data().iter().all(|&v| v == 0.0 || v == 1.0));
        }
        assert_eq!(s[2].id, "s00002");
        assert!(synth_dataset(0, 0, &small()).is_err());
    }

    #[test]
    fn deterministic_per_seed() {
        let a = synth_dataset(7, 3, &small()).unwrap();
        let b = synth_dataset(7, 3, &small()).unwrap();
        let c = synth_dataset(8, 3, &small()).unwrap();
        assert_eq!(a, b);
        assert_ne!(a[0].rgb, c[0].rgb);
    }

    #[test]
    fn crack_fraction_in_range_over_many_seeds() {
        let cfg = SynthConfig::default();
        for seed in 0..100 {
            let p = synth_parts(seed, 0, &cfg).unwrap();
            let frac = p.mask.sum() / p.mask.len() as f64;
            assert!(
                (CRACK_FRACTION.0..=CRACK_FRACTION.1).contains(&frac),
                "seed {seed}: {frac}"
            );
        }
    }

    #[test]
    fn ir_only_cracks_have_no_rgb_contrast() {
        let cfg = SynthConfig {
            ir_only_prob: 0.5,
            ..SynthConfig::default()
        };
        let mut seen = 0.0;
        for seed in 0..20 {
            let p = synth_parts(seed, 1, &cfg).unwrap();
            let plane = p.mask.len();
            for (i, (&v, &b)) in p.rgb.data().iter().zip(p.background.data()).enumerate() {
                let px = i % plane;
                if p.ir_only.data()[px] == 1.0 || p.mask.data()[px] == 0.0 {
                    assert_eq!(v, b);
                } else {
                    assert!(v < b || b == 0.0);
                }
            }
            seen += p.ir_only.sum();
        }
        assert!(seen > 0.0);
    }

    #[test]
    fn cracks_are_warm_in_ir() {
        let cfg = SynthConfig {
            ir_factor: ScaleFactor::new(1, 1).unwrap(),
            ..small()
        };
        let p = synth_parts(5, 0, &cfg).unwrap();
        let plane = p.mask.len();
        let mean = |sel: f64| {
            let v: Vec<f64> = (0..plane)
                .filter(|&i| p.mask.data()[i] == sel)
                .map(|i| p.ir.data()[i])
                .collect();
            v.iter().sum::<f64>() / v.len() as f64
        };
        assert!(mean(1.0) > mean(0.0) + 0.2);
    }
}
