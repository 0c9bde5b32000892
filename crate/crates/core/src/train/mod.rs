//! Segmentation training: loss, optimizer, schedule, evaluation and the
//! resumable training loop.
//!
//! The metrics log is JSON lines. Every optimizer step writes
//! `{"iter", "loss", "lr"}` with `iter` the 0-based step index; every
//! evaluation writes `{"iter", "miou", "iou_bg", "iou_crack"}` with `iter`
//! the number of completed steps.

pub mod ablation;
pub mod checkpoint;
pub mod loss;
pub mod optim;

use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::data::batch::{Batch, Example};
use crate::data::{make_variant, SamplePair, Split, Variant};
use crate::error::{Error, Result};
use crate::metrics::{argmax_labels, ConfusionMatrix, EvalReport};
use crate::model::{Model, ModelConfig};
use crate::params::{accumulate, global_norm, scale_all, zeros_like};
use crate::sr::SrModel;
use crate::tensor::Tensor;

pub use checkpoint::Archive;
pub use loss::{cross_entropy, cross_entropy_sum};
pub use optim::{poly_lr, AdamW, AdamWConfig};

pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const BEST_CHECKPOINT: &str = "best.ckpt";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub warmup: usize,
    pub power: f64,
    pub seed: u64,
    pub eval_interval: usize,
    /// Side of the square training crop; shrunk to the largest valid size
    /// for images that are smaller.
    pub patch: usize,
    /// Global gradient-norm ceiling; off by default.
    pub grad_clip: Option<f64>,
    /// Directory receiving `best.ckpt` and `last.ckpt`.
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 20000,
            batch_size: 8,
            lr: 3e-5,
            weight_decay: 0.01,
            warmup: 1500,
            power: 0.9,
            seed: 0,
            eval_interval: 100,
            patch: 48,
            grad_clip: None,
            checkpoint_dir: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if self.iterations == 0 {
            bad.push("iterations must be > 0".to_string());
        }
        if self.warmup >= self.iterations {
            bad.push(format!(
                "warmup {} must be < iterations {}",
                self.warmup, self.iterations
            ));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            bad.push(format!("lr {} must be positive", self.lr));
        }
        if !(self.weight_decay >= 0.0) {
            bad.push("weight_decay must be >= 0".into());
        }
        if !(self.power > 0.0) {
            bad.push("power must be > 0".into());
        }
        if self.batch_size == 0 || self.eval_interval == 0 || self.patch == 0 {
            bad.push("batch_size, eval_interval and patch must be > 0".into());
        }
        if matches!(self.grad_clip, Some(c) if !(c > 0.0)) {
            bad.push("grad_clip must be > 0".into());
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(bad.join("; ")))
        }
    }

    pub fn lr_at(&self, iter: usize) -> f64 {
        poly_lr(iter, self.lr, self.warmup, self.iterations, self.power)
    }
}

/// Largest multiple of `multiple` that fits in `h x w`, or an error when
/// none does.
pub fn fit_to_multiple(h: usize, w: usize, multiple: usize) -> Result<(usize, usize)> {
    let (fh, fw) = (h / multiple * multiple, w / multiple * multiple);
    if fh == 0 || fw == 0 {
        return Err(Error::InvalidArgument(format!(
            "{h}x{w} image is smaller than the model's input multiple {multiple}"
        )));
    }
    Ok((fh, fw))
}

/// Centre crop of `[C, H, W]` input and `[H, W]` label to `h x w`.
pub fn centre_crop(input: &Tensor, label: &Tensor, h: usize, w: usize) -> Result<(Tensor, Tensor)> {
    let (c, ih, iw) = input.dims3()?;
    if label.shape() != [ih, iw] || h > ih || w > iw {
        return Err(Error::shape(
            "centre_crop",
            format!("{:?} / {:?} to {h}x{w}", input.shape(), label.shape()),
        ));
    }
    let (y0, x0) = ((ih - h) / 2, (iw - w) / 2);
    let pick = |src: &[f64], planes: usize| -> Vec<f64> {
        let mut out = Vec::with_capacity(planes * h * w);
        for p in 0..planes {
            for y in 0..h {
                let row = (p * ih + y0 + y) * iw + x0;
                out.extend_from_slice(&src[row..row + w]);
            }
        }
        out
    };
    Ok((
        Tensor::new(vec![c, h, w], pick(input.data(), c))?,
        Tensor::new(vec![h, w], pick(label.data(), 1))?,
    ))
}

/// Model inputs and labels for the train and validation splits.
#[derive(Clone, Debug)]
pub struct TrainData {
    pub train: Vec<Example>,
    pub val: Vec<Example>,
}

impl TrainData {
    /// Builds `variant` inputs for every sample named in `split`.
    pub fn from_samples(samples: &[SamplePair], split: &Split, variant: Variant, sr: Option<&SrModel>) -> Result<Self> {
        let pick = |ids: &[String]| -> Result<Vec<Example>> {
            ids.par_iter()
                .map(|id| {
                    let s = samples
                        .iter()
                        .find(|s| &s.id == id)
                        .ok_or_else(|| Error::Validation(format!("split names unknown sample '{id}'")))?;
                    let (x, y) = make_variant(s, variant, sr)?;
                    Ok((id.clone(), x, y))
                })
                .collect()
        };
        Ok(Self {
            train: pick(&split.train)?,
            val: pick(&split.val)?,
        })
    }

    pub fn channels(&self) -> Result<usize> {
        let (_, x, _) = self
            .train
            .first()
            .ok_or_else(|| Error::InvalidArgument("empty training split".into()))?;
        Ok(x.dims3()?.0)
    }

    /// Training crop size: `patch` limited to the smallest training image,
    /// rounded down to `multiple`.
    pub fn train_patch(&self, patch: usize, multiple: usize) -> Result<usize> {
        let mut side = patch;
        for (_, x, _) in &self.train {
            let (_, h, w) = x.dims3()?;
            side = side.min(h).min(w);
        }
        let side = side / multiple * multiple;
        if side == 0 {
            return Err(Error::InvalidArgument(format!(
                "training images are smaller than the model's input multiple {multiple}"
            )));
        }
        Ok(side)
    }
}

/// Confusion counts of `model` over `items`, each centre-cropped to the
/// model's input multiple. Images are evaluated in parallel and merged in
/// order.
pub fn evaluate(model: &Model, items: &[Example]) -> Result<EvalReport> {
    let multiple = model.config.input_multiple();
    let partials: Vec<ConfusionMatrix> = items
        .par_iter()
        .map(|(_, x, y)| {
            let (_, h, w) = x.dims3()?;
            let (ch, cw) = fit_to_multiple(h, w, multiple)?;
            let (x, y) = centre_crop(x, y, ch, cw)?;
            let pred = argmax_labels(&model.forward(&x)?)?;
            let mut cm = ConfusionMatrix::new(model.config.num_classes);
            cm.accumulate(&pred, &y)?;
            Ok(cm)
        })
        .collect::<Result<_>>()?;
    let mut total = ConfusionMatrix::new(model.config.num_classes);
    for p in &partials {
        total.merge(p)?;
    }
    total.report()
}

/// Score of predicting background everywhere on the same crops
/// [`evaluate`] uses.
pub fn background_baseline(items: &[Example], multiple: usize, num_classes: usize) -> Result<EvalReport> {
    let mut cm = ConfusionMatrix::new(num_classes);
    for (_, x, y) in items {
        let (_, h, w) = x.dims3()?;
        let (ch, cw) = fit_to_multiple(h, w, multiple)?;
        let (_, y) = centre_crop(x, y, ch, cw)?;
        cm.accumulate(&Tensor::zeros(y.shape()), &y)?;
    }
    cm.report()
}

/// Mean pixel cross-entropy of `batch` and its parameter gradient. Items
/// run in parallel; their gradients are summed in slot order.
pub fn batch_gradient(model: &Model, batch: &Batch) -> Result<(f64, Model)> {
    let (b, _, h, w) = batch.inputs.dims4()?;
    let scale = 1.0 / (b * h * w) as f64;
    let parts: Vec<(f64, Model)> = (0..b)
        .into_par_iter()
        .map(|i| {
            let (x, y) = batch.item(i)?;
            let (logits, cache) = model.forward_cached(&x)?;
            let (loss, dlogits) = cross_entropy_sum(&logits, &y, scale)?;
            let mut grads = zeros_like(model);
            model.backward(&cache, &dlogits, &mut grads)?;
            Ok((loss, grads))
        })
        .collect::<Result<_>>()?;
    let mut grads = zeros_like(model);
    let mut loss = 0.0;
    for (l, g) in &parts {
        loss += l;
        accumulate(&mut grads, g);
    }
    Ok((loss * scale, grads))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub iter: usize,
    pub loss: f64,
    pub lr: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub iter: usize,
    pub miou: f64,
    pub iou_bg: Option<f64>,
    pub iou_crack: Option<f64>,
}

impl EvalRecord {
    fn from_report(iter: usize, r: &EvalReport) -> Self {
        Self {
            iter,
            miou: r.miou,
            iou_bg: r.iou.first().copied().flatten(),
            iou_crack: r.iou.get(1).copied().flatten(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BestScore {
    pub iter: usize,
    pub miou: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSummary {
    pub steps: Vec<StepRecord>,
    pub evals: Vec<EvalRecord>,
    pub best: Option<BestScore>,
}

/// Model, optimizer and progress; everything needed to continue a run.
#[derive(Clone, Debug, PartialEq)]
pub struct Trainer {
    pub config: TrainConfig,
    pub model: Model,
    pub optimizer: AdamW<Model>,
    /// Completed steps.
    pub iteration: usize,
    pub best: Option<BestScore>,
}

const CHECKPOINT_KIND: &str = "segmenter";

impl Trainer {
    pub fn new(model: Model, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let adam = AdamWConfig {
            weight_decay: config.weight_decay,
            ..AdamWConfig::default()
        };
        Ok(Self {
            optimizer: AdamW::new(&model, adam),
            model,
            config,
            iteration: 0,
            best: None,
        })
    }

    /// Fresh model from `model_config` initialised from the run seed.
    pub fn from_scratch(model_config: ModelConfig, config: TrainConfig) -> Result<Self> {
        let model = Model::init(model_config, config.seed)?;
        Self::new(model, config)
    }

    /// One optimizer step on the batch for the current iteration.
    pub fn step(&mut self, train: &[Example], patch: usize) -> Result<StepRecord> {
        let it = self.iteration;
        let lr = self.config.lr_at(it);
        let batch = Batch::for_iteration(train, self.config.batch_size, patch, self.config.seed, it)?;
        let (loss, mut grads) = batch_gradient(&self.model, &batch)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("training loss at iteration {it}")));
        }
        if let Some(clip) = self.config.grad_clip {
            let norm = global_norm(&grads);
            if norm > clip {
                scale_all(&mut grads, clip / norm);
            }
        }
        self.optimizer.step(&mut self.model, &grads, lr)?;
        self.iteration += 1;
        Ok(StepRecord { iter: it, loss, lr })
    }

    /// Trains until `until` steps (capped at the configured total) have
    /// completed, logging to `log`. Evaluates on `data.val` every
    /// `eval_interval` steps and at the end of the schedule; writes
    /// `best.ckpt` on improvement and `last.ckpt` after each evaluation and
    /// on return. A non-finite loss aborts without touching the
    /// checkpoints.
    pub fn run(&mut self, data: &TrainData, until: usize, log: &mut dyn Write) -> Result<TrainSummary> {
        let got = data.channels()?;
        if got != self.model.config.in_channels {
            return Err(Error::ChannelMismatch {
                expected: self.model.config.in_channels,
                got,
            });
        }
        let patch = data.train_patch(self.config.patch, self.model.config.input_multiple())?;
        let end = until.min(self.config.iterations);
        let mut summary = TrainSummary {
            steps: Vec::new(),
            evals: Vec::new(),
            best: self.best,
        };
        while self.iteration < end {
            let rec = self.step(&data.train, patch)?;
            write_line(log, &json!({"iter": rec.iter, "loss": rec.loss, "lr": rec.lr}))?;
            summary.steps.push(rec);
            let done = self.iteration;
            if done.is_multiple_of(self.config.eval_interval) || done == self.config.iterations {
                let report = evaluate(&self.model, &data.val)?;
                let e = EvalRecord::from_report(done, &report);
                write_line(log, &serde_json::to_value(e)?)?;
                summary.evals.push(e);
                if self.best.is_none_or(|b| e.miou > b.miou) {
                    self.best = Some(BestScore {
                        iter: done,
                        miou: e.miou,
                    });
                    self.save_named(BEST_CHECKPOINT)?;
                }
                self.save_named(LAST_CHECKPOINT)?;
            }
        }
        self.save_named(LAST_CHECKPOINT)?;
        summary.best = self.best;
        Ok(summary)
    }

    fn save_named(&self, file: &str) -> Result<()> {
        if let Some(dir) = &self.config.checkpoint_dir {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            self.to_archive().save(&dir.join(file))?;
        }
        Ok(())
    }

    pub fn to_archive(&self) -> Archive {
        let mut a = Archive::new(json!({
            "kind": CHECKPOINT_KIND,
            "model": self.model.config,
            "train": self.config,
            "adamw": self.optimizer.config,
            "optimizer_step": self.optimizer.step,
            "iteration": self.iteration,
            "best": self.best,
        }));
        a.push_params("model", &self.model);
        a.push_params("adam_m", &self.optimizer.m);
        a.push_params("adam_v", &self.optimizer.v);
        a
    }

    pub fn from_archive(a: &Archive) -> Result<Self> {
        let kind: String = a.meta_field("kind")?;
        if kind != CHECKPOINT_KIND {
            return Err(Error::Validation(format!(
                "checkpoint holds a '{kind}', not a segmenter"
            )));
        }
        let model_config: ModelConfig = a.meta_field("model")?;
        let config: TrainConfig = a.meta_field("train")?;
        let mut model = Model::init(model_config, 0)?;
        a.load_params("model", &mut model)?;
        let mut optimizer = AdamW::new(&model, a.meta_field("adamw")?);
        a.load_params("adam_m", &mut optimizer.m)?;
        a.load_params("adam_v", &mut optimizer.v)?;
        optimizer.step = a.meta_field("optimizer_step")?;
        Ok(Self {
            config,
            model,
            optimizer,
            iteration: a.meta_field("iteration")?,
            best: a.meta_field("best")?,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_archive(&Archive::load(path)?)
    }
}

/// Weights only, as stored in a training checkpoint.
pub fn load_model(path: &Path) -> Result<Model> {
    Ok(Trainer::load(path)?.model)
}

fn write_line(log: &mut dyn Write, v: &serde_json::Value) -> Result<()> {
    let mut line = serde_json::to_vec(v)?;
    line.push(b'\n');
    log.write_all(&line).map_err(|e| Error::io("<metrics log>", e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth::{synth_dataset, SynthConfig};
    use crate::data::DatasetManifest;
    use crate::scale::ScaleFactor;

    fn tiny_data(n: usize) -> TrainData {
        let cfg = SynthConfig {
            rgb_height: 48,
            rgb_width: 48,
            ..SynthConfig::default()
        };
        let samples = synth_dataset(0, n, &cfg).unwrap();
        let m = DatasetManifest::for_samples(&samples, 0, ScaleFactor::new(10, 3).unwrap()).unwrap();
        TrainData::from_samples(&samples, &m.split, Variant::Rgb, None).unwrap()
    }

    fn tiny_config(iterations: usize) -> TrainConfig {
        TrainConfig {
            iterations,
            batch_size: 2,
            lr: 1e-3,
            warmup: 1,
            eval_interval: 2,
            patch: 24,
            ..TrainConfig::default()
        }
    }

    fn model_config() -> ModelConfig {
        ModelConfig {
            depths: vec![1, 1],
            ..ModelConfig::toy(3)
        }
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig {
            warmup: 30000,
            lr: 0.0,
            ..TrainConfig::default()
        };
        let msg = bad.validate().unwrap_err().to_string();
        assert!(msg.contains("warmup") && msg.contains("lr"), "{msg}");
        let json = r#"{"iterations": 10, "warmup": 1, "bogus": 3}"#;
        assert!(serde_json::from_str::<TrainConfig>(json).is_err());
    }

    #[test]
    fn crop_helpers() {
        assert_eq!(fit_to_multiple(120, 100, 24).unwrap(), (120, 96));
        assert!(fit_to_multiple(20, 100, 24).is_err());
        let x = Tensor::from_fn(&[1, 4, 4], |i| i as f64);
        let y = Tensor::from_fn(&[4, 4], |i| i as f64);
        let (cx, cy) = centre_crop(&x, &y, 2, 2).unwrap();
        assert_eq!(cx.data(), &[5.0, 6.0, 9.0, 10.0]);
        assert_eq!(cy.data(), cx.data());
    }

    #[test]
    fn batch_gradient_matches_single_item_sum() {
        let data = tiny_data(6);
        let model = Model::init(model_config(), 1).unwrap();
        let batch = Batch::for_iteration(&data.train, 2, 24, 0, 0).unwrap();
        let (loss, _) = batch_gradient(&model, &batch).unwrap();
        let mut want = 0.0;
        for i in 0..2 {
            let (x, y) = batch.item(i).unwrap();
            let logits = model.forward(&x).unwrap();
            want += cross_entropy_sum(&logits, &y, 1.0).unwrap().0;
        }
        assert!((loss - want / (2.0 * 24.0 * 24.0)).abs() < 1e-12);
    }

    #[test]
    fn deterministic_and_resumable() {
        let data = tiny_data(6);
        let dir = tempfile::tempdir().unwrap();
        let cfg = TrainConfig {
            checkpoint_dir: Some(dir.path().to_path_buf()),
            ..tiny_config(5)
        };
        let mut log_a = Vec::new();
        let mut a = Trainer::from_scratch(model_config(), cfg.clone()).unwrap();
        let sa = a.run(&data, usize::MAX, &mut log_a).unwrap();
        let mut log_b = Vec::new();
        let mut b = Trainer::from_scratch(model_config(), cfg.clone()).unwrap();
        b.run(&data, usize::MAX, &mut log_b).unwrap();
        assert_eq!(log_a, log_b);
        assert_eq!(sa.steps.len(), 5);
        assert_eq!(sa.evals.iter().map(|e| e.iter).collect::<Vec<_>>(), vec![2, 4, 5]);

        let mut c = Trainer::from_scratch(model_config(), tiny_config(5)).unwrap();
        let first = c.run(&data, 3, &mut Vec::new()).unwrap();
        let archive = c.to_archive();
        let bytes = archive.to_bytes().unwrap();
        let mut resumed = Trainer::from_archive(&Archive::from_bytes(&bytes).unwrap()).unwrap();
        assert_eq!(resumed, c);
        assert_eq!(resumed.to_archive().to_bytes().unwrap(), bytes);
        let rest = resumed.run(&data, usize::MAX, &mut Vec::new()).unwrap();
        let curve: Vec<u64> = first
            .steps
            .iter()
            .chain(&rest.steps)
            .map(|s| s.loss.to_bits())
            .collect();
        let want: Vec<u64> = sa.steps.iter().map(|s| s.loss.to_bits()).collect();
        assert_eq!(curve, want);

        let best = Trainer::load(&dir.path().join(BEST_CHECKPOINT)).unwrap();
        assert_eq!(best.best, sa.best);
        let last = Trainer::load(&dir.path().join(LAST_CHECKPOINT)).unwrap();
        assert_eq!(last.iteration, 5);
    }

    #[test]
    fn rejects_wrong_channels() {
        let data = tiny_data(6);
        let mut t = Trainer::from_scratch(ModelConfig::toy(6), tiny_config(2)).unwrap();
        assert!(matches!(
            t.run(&data, 1, &mut Vec::new()),
            Err(Error::ChannelMismatch { expected: 6, got: 3 })
        ));
    }

    #[test]
    fn non_finite_loss_aborts_without_checkpoint() {
        let data = tiny_data(6);
        let dir = tempfile::tempdir().unwrap();
        let cfg = TrainConfig {
            checkpoint_dir: Some(dir.path().to_path_buf()),
            ..tiny_config(4)
        };
        let mut t = Trainer::from_scratch(model_config(), cfg).unwrap();
        t.model.decoder.classifier.b.data_mut()[0] = f64::NAN;
        assert!(matches!(t.run(&data, 4, &mut Vec::new()), Err(Error::NonFinite(_))));
        assert_eq!(t.iteration, 0);
        assert!(!dir.path().join(LAST_CHECKPOINT).exists());
    }

    #[test]
    fn small_step_decreases_loss_on_fixed_batch() {
        let data = tiny_data(6);
        let mut failures = 0;
        for trial in 0..20u64 {
            let model = Model::init(model_config(), 100 + trial).unwrap();
            let batch = Batch::for_iteration(&data.train, 2, 24, trial, 0).unwrap();
            let (before, grads) = batch_gradient(&model, &batch).unwrap();
            let mut stepped = model.clone();
            let mut opt = AdamW::new(&stepped, AdamWConfig::default());
            opt.step(&mut stepped, &grads, 1e-6).unwrap();
            let (after, _) = batch_gradient(&stepped, &batch).unwrap();
            if after >= before {
                failures += 1;
            }
        }
        assert!(failures <= 1, "{failures} of 20 steps failed to decrease the loss");
    }

    #[test]
    fn untrained_eval_is_valid() {
        let data = tiny_data(6);
        let model = Model::init(model_config(), 0).unwrap();
        let r = evaluate(&model, &data.val).unwrap();
        assert!((0.0..=1.0).contains(&r.miou));
        assert_eq!(r.images, data.val.len() as u64);
        let base = background_baseline(&data.val, 24, 2).unwrap();
        assert_eq!(base.pixels, r.pixels);
    }
}
