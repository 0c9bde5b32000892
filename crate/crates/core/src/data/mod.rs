//! Dataset handling: image I/O, synthetic data, input variants,
//! augmentation, splits and batching.
//!
//! On-disk layout of a dataset root:
//!
//! ```text
//! root/
//!   manifest.json
//!   rgb/<id>.ppm      P6, full resolution
//!   ir/<id>.ppm       P6, sensor IR resolution
//!   mask/<id>.pgm     P5, 0 = background, 255 = crack
//!   ir_sr/<id>.ppm    super-resolved IR (written by `sr-apply`)
//!   fused/<id>.mscm   six-channel fused tensors (written by `fuse`)
//! ```

pub mod augment;
pub mod batch;
pub mod image_io;
pub mod synth;

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::ops::{resize_bicubic, resize_nearest_2d};
use crate::scale::ScaleFactor;
use crate::sr::{fuse_channels, sr_apply, SrModel};
use crate::tensor::Tensor;

pub use augment::{augment, Augmentation};
pub use batch::{eval_chunks, split_ids, train_batch_items, Batch, Split};
pub use image_io::{load_image, load_mask, save_image, save_mask};
pub use synth::{synth_dataset, SynthConfig};

/// One RGB/IR/mask triple.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplePair {
    pub id: String,
    /// `[3, H, W]` in `[0, 1]`.
    pub rgb: Tensor,
    /// `[3, h, w]` in `[0, 1]`.
    pub ir: Tensor,
    /// `[H, W]` of `{0, 1}`.
    pub mask: Tensor,
}

impl SamplePair {
    pub fn validate(&self) -> Result<()> {
        let (c, h, w) = self.rgb.dims3()?;
        let (ci, _, _) = self.ir.dims3()?;
        if c != 3 || ci != 3 {
            return Err(Error::Validation(format!(
                "{}: RGB and IR must have 3 channels",
                self.id
            )));
        }
        if self.mask.shape() != [h, w] {
            return Err(Error::Validation(format!(
                "{}: mask {:?} vs RGB {h}x{w}",
                self.id,
                self.mask.shape()
            )));
        }
        if self.mask.data().iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::Validation(format!("{}: mask is not binary", self.id)));
        }
        Ok(())
    }
}

/// Network input assembled from a sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    /// RGB reduced to the IR grid.
    #[serde(rename = "p_RGB")]
    LowRgb,
    /// Full-resolution RGB.
    #[serde(rename = "P_RGB")]
    Rgb,
    /// Reduced RGB with raw IR, on the IR grid.
    #[serde(rename = "pRGB_plus_PIR")]
    LowRgbIr,
    /// Full-resolution RGB with super-resolved IR.
    #[serde(rename = "PRGB_plus_PIRprime")]
    RgbSrIr,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::LowRgb, Variant::Rgb, Variant::LowRgbIr, Variant::RgbSrIr];

    pub fn channels(self) -> usize {
        match self {
            Variant::LowRgb | Variant::Rgb => 3,
            Variant::LowRgbIr | Variant::RgbSrIr => 6,
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            Variant::LowRgb => "p_RGB",
            Variant::Rgb => "P_RGB",
            Variant::LowRgbIr => "pRGB_plus_PIR",
            Variant::RgbSrIr => "PRGB_plus_PIRprime",
        }
    }

    /// Row label used in comparison tables.
    pub fn label(self) -> &'static str {
        match self {
            Variant::LowRgb => "p_RGB",
            Variant::Rgb => "P_RGB",
            Variant::LowRgbIr => "pRGB+PIR",
            Variant::RgbSrIr => "PRGB+P'IR",
        }
    }

    pub fn needs_sr(self) -> bool {
        self == Variant::RgbSrIr
    }

    pub fn at_ir_resolution(self) -> bool {
        matches!(self, Variant::LowRgb | Variant::LowRgbIr)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.tag() == s || v.label() == s)
            .ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "unknown variant {s:?}; expected one of p_RGB, P_RGB, pRGB_plus_PIR, PRGB_plus_PIRprime"
                ))
            })
    }
}

/// `(input [C, h, w], target [h, w])` for a variant. Images are resampled
/// bicubically, masks by nearest neighbour.
pub fn make_variant(sample: &SamplePair, variant: Variant, sr: Option<&SrModel>) -> Result<(Tensor, Tensor)> {
    let (_, h, w) = sample.rgb.dims3()?;
    let (_, ih, iw) = sample.ir.dims3()?;
    let low_rgb = || -> Result<Tensor> { Ok(resize_bicubic(&sample.rgb, ih, iw)?.map(|v| v.clamp(0.0, 1.0))) };
    let low_mask = || resize_nearest_2d(&sample.mask, ih, iw);
    let out = match variant {
        Variant::LowRgb => (low_rgb()?, low_mask()?),
        Variant::Rgb => (sample.rgb.clone(), sample.mask.clone()),
        Variant::LowRgbIr => (fuse_channels(&low_rgb()?, &sample.ir)?, low_mask()?),
        Variant::RgbSrIr => {
            let sr =
                sr.ok_or_else(|| Error::InvalidArgument(format!("variant {variant} needs a super-resolution model")))?;
            let ir_sr = sr_apply(sr, &sample.ir, (h, w))?;
            (fuse_channels(&sample.rgb, &ir_sr)?, sample.mask.clone())
        }
    };
    debug_assert_eq!(out.0.shape()[0], variant.channels());
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub ids: Vec<String>,
    pub split: Split,
    pub seed: u64,
    pub variant: Variant,
    pub rgb_dims: (usize, usize),
    pub ir_dims: (usize, usize),
    pub ir_factor: ScaleFactor,
}

pub const TRAIN_FRACTION: f64 = 0.8;

impl DatasetManifest {
    pub fn for_samples(samples: &[SamplePair], seed: u64, ir_factor: ScaleFactor) -> Result<Self> {
        let first = samples
            .first()
            .ok_or_else(|| Error::InvalidArgument("manifest of zero samples".into()))?;
        let (_, h, w) = first.rgb.dims3()?;
        let (_, ih, iw) = first.ir.dims3()?;
        let ids: Vec<String> = samples.iter().map(|s| s.id.clone()).collect();
        Ok(Self {
            split: split_ids(&ids, TRAIN_FRACTION, seed)?,
            ids,
            seed,
            variant: Variant::RgbSrIr,
            rgb_dims: (h, w),
            ir_dims: (ih, iw),
            ir_factor,
        })
    }

    pub fn path(root: &Path) -> PathBuf {
        root.join("manifest.json")
    }

    pub fn load(root: &Path) -> Result<Self> {
        let p = Self::path(root);
        let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, root: &Path) -> Result<()> {
        let p = Self::path(root);
        let text = serde_json::to_string_pretty(self)? + "\n";
        std::fs::write(&p, text).map_err(|e| Error::io(&p, e))
    }
}

pub fn rgb_path(root: &Path, id: &str) -> PathBuf {
    root.join("rgb").join(format!("{id}.ppm"))
}

pub fn ir_path(root: &Path, id: &str) -> PathBuf {
    root.join("ir").join(format!("{id}.ppm"))
}

pub fn mask_path(root: &Path, id: &str) -> PathBuf {
    root.join("mask").join(format!("{id}.pgm"))
}

pub fn ir_sr_path(root: &Path, id: &str) -> PathBuf {
    root.join("ir_sr").join(format!("{id}.ppm"))
}

pub fn fused_path(root: &Path, id: &str) -> PathBuf {
    root.join("fused").join(format!("{id}.mscm"))
}

fn mkdir(p: &Path) -> Result<()> {
    std::fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

/// Writes samples and manifest under `root`.
pub fn save_dataset(root: &Path, samples: &[SamplePair], manifest: &DatasetManifest) -> Result<()> {
    for sub in ["rgb", "ir", "mask"] {
        mkdir(&root.join(sub))?;
    }
    for s in samples {
        s.validate()?;
        save_image(rgb_path(root, &s.id), &s.rgb)?;
        save_image(ir_path(root, &s.id), &s.ir)?;
        save_mask(mask_path(root, &s.id), &s.mask)?;
    }
    manifest.save(root)
}

pub fn load_sample(root: &Path, id: &str) -> Result<SamplePair> {
    let s = SamplePair {
        id: id.to_string(),
        rgb: load_image(rgb_path(root, id))?,
        ir: load_image(ir_path(root, id))?,
        mask: load_mask(mask_path(root, id))?,
    };
    s.validate()?;
    Ok(s)
}

pub fn load_dataset(root: &Path) -> Result<(DatasetManifest, Vec<SamplePair>)> {
    let m = DatasetManifest::load(root)?;
    let samples = m.ids.iter().map(|id| load_sample(root, id)).collect::<Result<_>>()?;
    Ok((m, samples))
}

/// Pixel value quantization that a PPM roundtrip applies.
pub fn quantize_8bit(t: &Tensor) -> Tensor {
    t.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth::SynthConfig;

    fn small() -> Vec<SamplePair> {
        synth_dataset(
            1,
            3,
            &SynthConfig {
                rgb_height: 40,
                rgb_width: 30,
                ..SynthConfig::default()
            },
        )
        .unwrap()
    }

    #[test]
    fn variant_shapes() {
        let s = &small()[0];
        let sr = SrModel::untrained(4, "10/3".parse().unwrap(), 0);
        let want = [
            (Variant::LowRgb, vec![3, 12, 9]),
            (Variant::Rgb, vec![3, 40, 30]),
            (Variant::LowRgbIr, vec![6, 12, 9]),
            (Variant::RgbSrIr, vec![6, 40, 30]),
        ];
        for (v, shape) in want {
            let (x, y) = make_variant(s, v, Some(&sr)).unwrap();
            assert_eq!(x.shape(), &shape[..], "{v}");
            assert_eq!(y.shape(), &shape[1..], "{v}");
            assert_eq!(x.shape()[0], v.channels());
            assert!(y.data().iter().all(|&m| m == 0.0 || m == 1.0));
        }
        assert!(make_variant(s, Variant::RgbSrIr, None).is_err());
        let (x, _) = make_variant(s, Variant::RgbSrIr, Some(&sr)).unwrap();
        assert_eq!(&x.data()[..s.rgb.len()], s.rgb.data());
    }

    #[test]
    fn variant_parsing() {
        for v in Variant::ALL {
            assert_eq!(v.tag().parse::<Variant>().unwrap(), v);
            assert_eq!(v.label().parse::<Variant>().unwrap(), v);
            assert_eq!(serde_json::to_string(&v).unwrap(), format!("\"{}\"", v.tag()));
        }
        assert!("rgb".parse::<Variant>().is_err());
    }

    #[test]
    fn dataset_roundtrip_on_disk() {
        let samples = small();
        let dir = tempfile::tempdir().unwrap();
        let m = DatasetManifest::for_samples(&samples, 1, "10/3".parse().unwrap()).unwrap();
        save_dataset(dir.path(), &samples, &m).unwrap();
        let (m2, back) = load_dataset(dir.path()).unwrap();
        assert_eq!(m, m2);
        for (a, b) in samples.iter().zip(&back) {
            assert_eq!(a.mask, b.mask);
            assert_eq!(quantize_8bit(&a.rgb), b.rgb);
            assert!(a.ir.max_abs_diff(&b.ir).unwrap() <= 0.5 / 255.0 + 1e-12);
        }
    }
}
