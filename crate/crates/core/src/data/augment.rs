//! Geometric augmentation: flips, quarter-turn rotations and a random crop,
//! applied identically to an image and its mask.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Horizontal then vertical flip, `quarter_turns` counter-clockwise
/// rotations, then a `patch x patch` crop at `(crop_y, crop_x)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Augmentation {
    pub flip_h: bool,
    pub flip_v: bool,
    pub quarter_turns: u8,
    pub crop_y: usize,
    pub crop_x: usize,
    pub patch: usize,
}

impl Augmentation {
    /// Centred crop without flips or rotation.
    pub fn centre_crop(h: usize, w: usize, patch: usize) -> Result<Self> {
        check_fits(h, w, patch)?;
        Ok(Self {
            flip_h: false,
            flip_v: false,
            quarter_turns: 0,
            crop_y: (h - patch) / 2,
            crop_x: (w - patch) / 2,
            patch,
        })
    }

    pub fn sample(rng: &mut impl Rng, h: usize, w: usize, patch: usize) -> Result<Self> {
        let flip_h = rng.gen_bool(0.5);
        let flip_v = rng.gen_bool(0.5);
        let quarter_turns = rng.gen_range(0..4u8);
        let (rh, rw) = if quarter_turns % 2 == 0 { (h, w) } else { (w, h) };
        check_fits(rh, rw, patch)?;
        Ok(Self {
            flip_h,
            flip_v,
            quarter_turns,
            crop_y: rng.gen_range(0..=rh - patch),
            crop_x: rng.gen_range(0..=rw - patch),
            patch,
        })
    }

    /// Source pixel of output `(y, x)` in an `h x w` input.
    fn source(&self, h: usize, w: usize, y: usize, x: usize) -> (usize, usize) {
        let (mut y, mut x) = (y + self.crop_y, x + self.crop_x);
        for turn in (0..self.quarter_turns).rev() {
            // width of the frame before this turn
            let before_w = if turn % 2 == 0 { w } else { h };
            (y, x) = (x, before_w - 1 - y);
        }
        if self.flip_v {
            y = h - 1 - y;
        }
        if self.flip_h {
            x = w - 1 - x;
        }
        (y, x)
    }

    fn check(&self, h: usize, w: usize) -> Result<()> {
        let (rh, rw) = if self.quarter_turns.is_multiple_of(2) {
            (h, w)
        } else {
            (w, h)
        };
        if self.crop_y + self.patch > rh || self.crop_x + self.patch > rw {
            return Err(Error::InvalidArgument(format!(
                "crop {}x{} at ({}, {}) exceeds {rh}x{rw}",
                self.patch, self.patch, self.crop_y, self.crop_x
            )));
        }
        Ok(())
    }

    /// `[C, H, W]` -> `[C, patch, patch]`.
    pub fn apply_image(&self, x: &Tensor) -> Result<Tensor> {
        let (c, h, w) = x.dims3()?;
        self.check(h, w)?;
        let p = self.patch;
        let map: Vec<usize> = (0..p * p)
            .map(|i| {
                let (sy, sx) = self.source(h, w, i / p, i % p);
                sy * w + sx
            })
            .collect();
        Tensor::new(
            vec![c, p, p],
            (0..c)
                .flat_map(|ch| map.iter().map(move |&s| x.data()[ch * h * w + s]))
                .collect(),
        )
    }

    /// `[H, W]` -> `[patch, patch]`.
    pub fn apply_mask(&self, m: &Tensor) -> Result<Tensor> {
        let (h, w) = m.dims2()?;
        let img = self.apply_image(&m.clone().reshape(&[1, h, w])?)?;
        img.reshape(&[self.patch, self.patch])
    }
}

fn check_fits(h: usize, w: usize, patch: usize) -> Result<()> {
    if patch == 0 || patch > h || patch > w {
        return Err(Error::InvalidArgument(format!(
            "patch {patch} does not fit in a {h}x{w} image"
        )));
    }
    Ok(())
}

/// Random flip/rotate/crop of `input [C, H, W]` and `target [H, W]`.
pub fn augment(input: &Tensor, target: &Tensor, patch: usize, rng: &mut impl Rng) -> Result<(Tensor, Tensor)> {
    let (_, h, w) = input.dims3()?;
    if target.shape() != [h, w] {
        return Err(Error::shape(
            "augment",
            format!("input {:?} vs target {:?}", input.shape(), target.shape()),
        ));
    }
    let a = Augmentation::sample(rng, h, w, patch)?;
    Ok((a.apply_image(input)?, a.apply_mask(target)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{self, Stream};

    fn all_transforms(patch: usize) -> Vec<Augmentation> {
        let mut v = Vec::new();
        for flip_h in [false, true] {
            for flip_v in [false, true] {
                for quarter_turns in 0..4 {
                    v.push(Augmentation {
                        flip_h,
                        flip_v,
                        quarter_turns,
                        crop_y: 0,
                        crop_x: 0,
                        patch,
                    });
                }
            }
        }
        v
    }

    #[test]
    fn centred_full_crop_is_identity() {
        let x = Tensor::from_fn(&[2, 5, 5], |i| i as f64);
        let a = Augmentation::centre_crop(5, 5, 5).unwrap();
        assert_eq!(a.apply_image(&x).unwrap(), x);
    }

    #[test]
    fn rotation_matches_hand_example() {
        // [[0, 1], [2, 3]] rotated a quarter turn counter-clockwise is [[1, 3], [0, 2]]
        let m = Tensor::new(vec![2, 2], vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let a = Augmentation {
            flip_h: false,
            flip_v: false,
            quarter_turns: 1,
            crop_y: 0,
            crop_x: 0,
            patch: 2,
        };
        assert_eq!(a.apply_mask(&m).unwrap().data(), &[1.0, 3.0, 0.0, 2.0]);
        let four = Augmentation { quarter_turns: 2, ..a };
        assert_eq!(four.apply_mask(&m).unwrap().data(), &[3.0, 2.0, 1.0, 0.0]);
        let flip = Augmentation {
            quarter_turns: 0,
            flip_h: true,
            ..a
        };
        assert_eq!(flip.apply_mask(&m).unwrap().data(), &[1.0, 0.0, 3.0, 2.0]);
    }

    #[test]
    fn full_transforms_are_permutations() {
        let m = Tensor::from_fn(&[6, 6], |i| i as f64);
        for a in all_transforms(6) {
            let mut v = a.apply_mask(&m).unwrap().into_data();
            v.sort_by(f64::total_cmp);
            assert_eq!(v, m.data());
        }
    }

    #[test]
    fn marker_follows_mask_and_counts_preserved() {
        let mut r = rng::stream(0, Stream::Test, 0);
        for _ in 0..50 {
            let (h, w) = (r.gen_range(6..12), r.gen_range(6..12));
            let (my, mx) = (r.gen_range(0..h), r.gen_range(0..w));
            let mut input = Tensor::zeros(&[3, h, w]);
            let mut target = Tensor::zeros(&[h, w]);
            target.data_mut()[my * w + mx] = 1.0;
            input.data_mut()[(2 * h + my) * w + mx] = 5.0;
            let (x, y) = augment(&input, &target, 6, &mut r).unwrap();
            let ti = y.data().iter().position(|&v| v == 1.0);
            let xi = x.data()[2 * 36..].iter().position(|&v| v == 5.0);
            assert_eq!(ti, xi);
            assert!(y.data().iter().all(|&v| v == 0.0 || v == 1.0));
        }
    }

    #[test]
    fn uncropped_counts_are_exact() {
        let mut r = rng::stream(1, Stream::Test, 0);
        let m = Tensor::from_fn(&[8, 8], |i| f64::from(u8::from(i % 3 == 0)));
        let img = Tensor::zeros(&[1, 8, 8]);
        for _ in 0..20 {
            let (_, y) = augment(&img, &m, 8, &mut r).unwrap();
            assert_eq!(y.sum(), m.sum());
        }
    }

    #[test]
    fn reproducible_and_errors() {
        let x = Tensor::from_fn(&[1, 10, 8], |i| i as f64);
        let m = Tensor::zeros(&[10, 8]);
        let a = augment(&x, &m, 5, &mut rng::stream(3, Stream::Augment, 0)).unwrap();
        let b = augment(&x, &m, 5, &mut rng::stream(3, Stream::Augment, 0)).unwrap();
        assert_eq!(a, b);
        assert!(augment(&x, &m, 9, &mut rng::stream(3, Stream::Augment, 0)).is_err());
    }
}
