//! Input-variant comparison: one training run per variant on a shared split
//! and seed, scored on the validation images.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{SamplePair, Split, Variant};
use crate::error::Result;
use crate::model::ModelConfig;
use crate::sr::SrModel;
use crate::train::{evaluate, TrainConfig, TrainData, Trainer};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub label: String,
    pub channels: usize,
    /// Validation mIoU of the final weights.
    pub miou: f64,
    pub iou_crack: Option<f64>,
    /// Highest validation mIoU seen at any evaluation.
    pub best_miou: f64,
}

/// Trains `variants` in order with `model` (its channel count adapted to
/// each variant) and `train`. With `out_dir`, each run keeps its
/// checkpoints and metrics log under `<out_dir>/<tag>/`.
pub fn run_ablation(
    samples: &[SamplePair],
    split: &Split,
    sr: Option<&SrModel>,
    model: &ModelConfig,
    train: &TrainConfig,
    variants: &[Variant],
    out_dir: Option<&Path>,
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::with_capacity(variants.len());
    for &variant in variants {
        let data = TrainData::from_samples(samples, split, variant, sr)?;
        let model_cfg = ModelConfig {
            in_channels: variant.channels(),
            ..model.clone()
        };
        let run_dir = out_dir.map(|d| d.join(variant.tag()));
        let cfg = TrainConfig {
            checkpoint_dir: run_dir.clone().or_else(|| train.checkpoint_dir.clone()),
            ..train.clone()
        };
        let mut trainer = Trainer::from_scratch(model_cfg, cfg)?;
        let summary = match &run_dir {
            Some(dir) => {
                std::fs::create_dir_all(dir).map_err(|e| crate::Error::io(dir, e))?;
                let path = dir.join("metrics.jsonl");
                let mut log = std::fs::File::create(&path).map_err(|e| crate::Error::io(&path, e))?;
                trainer.run(&data, usize::MAX, &mut log)?
            }
            None => trainer.run(&data, usize::MAX, &mut std::io::sink())?,
        };
        let report = match summary.evals.last() {
            Some(e) if e.iter == trainer.iteration => (e.miou, e.iou_crack),
            _ => {
                let r = evaluate(&trainer.model, &data.val)?;
                (r.miou, r.iou.get(1).copied().flatten())
            }
        };
        rows.push(AblationRow {
            variant,
            label: variant.label().to_string(),
            channels: variant.channels(),
            miou: report.0,
            iou_crack: report.1,
            best_miou: summary.best.map_or(report.0, |b| b.miou),
        });
    }
    Ok(rows)
}

/// Plain-text comparison table, one row per variant.
pub fn format_table(rows: &[AblationRow]) -> String {
    let mut s = format!(
        "{:<12} {:>4} {:>8} {:>10} {:>9}\n",
        "input", "ch", "mIoU", "IoU_crack", "best"
    );
    for r in rows {
        let crack = r.iou_crack.map_or_else(|| "-".to_string(), |v| format!("{:.4}", v));
        s += &format!(
            "{:<12} {:>4} {:>8.4} {:>10} {:>9.4}\n",
            r.label, r.channels, r.miou, crack, r.best_miou
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth::{synth_dataset, SynthConfig};
    use crate::data::DatasetManifest;
    use crate::scale::ScaleFactor;

    #[test]
    fn four_rows_with_table_labels() {
        let cfg = SynthConfig {
            rgb_height: 80,
            rgb_width: 80,
            ..SynthConfig::default()
        };
        let samples = synth_dataset(3, 5, &cfg).unwrap();
        let factor = ScaleFactor::new(10, 3).unwrap();
        let m = DatasetManifest::for_samples(&samples, 0, factor).unwrap();
        let sr = SrModel::untrained(4, factor, 0);
        let model = ModelConfig {
            depths: vec![1, 1],
            ..ModelConfig::toy(3)
        };
        let train = TrainConfig {
            iterations: 2,
            warmup: 1,
            batch_size: 2,
            lr: 1e-3,
            patch: 24,
            ..TrainConfig::default()
        };
        let dir = tempfile::tempdir().unwrap();
        let rows = run_ablation(
            &samples,
            &m.split,
            Some(&sr),
            &model,
            &train,
            &Variant::ALL,
            Some(dir.path()),
        )
        .unwrap();
        let labels: Vec<&str> = rows.iter().map(|r| r.label.as_str()).collect();
        assert_eq!(labels, ["p_RGB", "P_RGB", "pRGB+PIR", "PRGB+P'IR"]);
        assert_eq!(rows.iter().map(|r| r.channels).collect::<Vec<_>>(), [3, 3, 6, 6]);
        assert!(dir.path().join("PRGB_plus_PIRprime").join("last.ckpt").exists());
        let table = format_table(&rows);
        assert_eq!(table.lines().count(), 5);
    }
}
