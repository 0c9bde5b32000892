//! Train/validation splits and deterministic batch schedules.
//!
//! The batch at iteration `it` depends only on `(seed, it)`: the epoch
//! permutation comes from the shuffle stream indexed by epoch, and slot `j`
//! of that batch draws its augmentation from the augment stream at index
//! `it * batch + j`. Resuming at any iteration therefore replays the exact
//! same data.

use std::ops::Range;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::augment::augment;
use crate::error::{Error, Result};
use crate::rng::{self, Stream};
use crate::tensor::Tensor;

/// `(id, input [C, H, W], label [H, W])`.
pub type Example = (String, Tensor, Tensor);

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<String>,
    pub val: Vec<String>,
}

/// Random split with `round(n * train_fraction)` training ids. Both sides
/// keep the input order.
pub fn split_ids(ids: &[String], train_fraction: f64, seed: u64) -> Result<Split> {
    if !(0.0..=1.0).contains(&train_fraction) {
        return Err(Error::InvalidArgument(format!(
            "train fraction {train_fraction} outside [0, 1]"
        )));
    }
    let n = ids.len();
    let n_train = (n as f64 * train_fraction).round() as usize;
    if n_train == 0 || n_train == n {
        return Err(Error::InvalidArgument(format!(
            "splitting {n} ids at fraction {train_fraction} leaves one side empty"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(seed, Stream::Split, 0));
    let mut is_train = vec![false; n];
    for &i in &order[..n_train] {
        is_train[i] = true;
    }
    let pick = |want: bool| -> Vec<String> {
        ids.iter()
            .zip(&is_train)
            .filter(|(_, &t)| t == want)
            .map(|(id, _)| id.clone())
            .collect()
    };
    Ok(Split {
        train: pick(true),
        val: pick(false),
    })
}

/// Item indices for iteration `it`: a slice of the epoch's permutation.
/// The trailing partial batch of every epoch is dropped.
pub fn train_batch_items(n_items: usize, batch: usize, seed: u64, it: usize) -> Result<Vec<usize>> {
    if batch == 0 || batch > n_items {
        return Err(Error::InvalidArgument(format!(
            "batch size {batch} with {n_items} training items"
        )));
    }
    let per_epoch = n_items / batch;
    let (epoch, slot) = (it / per_epoch, it % per_epoch);
    let mut order: Vec<usize> = (0..n_items).collect();
    order.shuffle(&mut rng::stream(seed, Stream::Shuffle, epoch as u64));
    Ok(order[slot * batch..(slot + 1) * batch].to_vec())
}

/// Consecutive ranges of at most `batch` items; the last may be short.
pub fn eval_chunks(n_items: usize, batch: usize) -> Vec<Range<usize>> {
    let batch = batch.max(1);
    (0..n_items)
        .step_by(batch)
        .map(|s| s..(s + batch).min(n_items))
        .collect()
}

/// Stacked inputs `[B, C, P, P]` and labels `[B, P, P]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub inputs: Tensor,
    pub targets: Tensor,
    pub ids: Vec<String>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Input `[C, P, P]` and label `[P, P]` of slot `i`.
    pub fn item(&self, i: usize) -> Result<(Tensor, Tensor)> {
        let (_, c, h, w) = self.inputs.dims4()?;
        Ok((
            self.inputs.narrow0(i, 1)?.reshape(&[c, h, w])?,
            self.targets.narrow0(i, 1)?.reshape(&[h, w])?,
        ))
    }

    /// Augmented training batch for iteration `it` over `(id, input, label)`.
    pub fn for_iteration(items: &[Example], batch: usize, patch: usize, seed: u64, it: usize) -> Result<Self> {
        let picks = train_batch_items(items.len(), batch, seed, it)?;
        let mut inputs = Vec::with_capacity(batch);
        let mut targets = Vec::with_capacity(batch);
        let mut ids = Vec::with_capacity(batch);
        for (slot, &i) in picks.iter().enumerate() {
            let (id, x, y) = &items[i];
            let mut r = rng::stream(seed, Stream::Augment, (it * batch + slot) as u64);
            let (xa, ya) = augment(x, y, patch, &mut r)?;
            let c = xa.shape()[0];
            inputs.push(xa.reshape(&[1, c, patch, patch])?);
            targets.push(ya.reshape(&[1, patch, patch])?);
            ids.push(id.clone());
        }
        Ok(Self {
            inputs: Tensor::cat0(&inputs.iter().collect::<Vec<_>>())?,
            targets: Tensor::cat0(&targets.iter().collect::<Vec<_>>())?,
            ids,
        })
    }
}
