//! Deterministic batch construction.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

use super::{DatasetHandle, EEGBatch, Split};

/// Partition the trials of `split` into batches, deterministically under
/// `seed`. Every trial appears exactly once.
///
/// With `distinct_classes`, no batch contains two trials of the same class:
/// trials are dealt out in passes of one-trial-per-class, so surplus trials of
/// a class are deferred to later passes. The InfoNCE denominator treats every
/// other batch item as a negative, and a duplicated class would make one of
/// them a false negative.
pub fn make_batches(
    handle: &DatasetHandle,
    batch_size: usize,
    seed: u64,
    distinct_classes: bool,
    split: Split,
) -> Result<Vec<EEGBatch>> {
    if batch_size < 1 {
        return Err(Error::config("batch_size must be at least 1"));
    }
    let indices = handle.trial_indices(split);
    if indices.is_empty() {
        return Err(Error::data(format!("no trials in the {split:?} split")));
    }
    let n_classes = handle.classes_in(split).len();
    if distinct_classes && batch_size > n_classes {
        return Err(Error::config(format!(
            "batch_size {batch_size} exceeds the {n_classes} classes of the {split:?} split \
             with distinct-class batching on"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut batches = Vec::new();
    if !distinct_classes {
        let mut order = indices;
        order.shuffle(&mut rng);
        for chunk in order.chunks(batch_size) {
            batches.push(EEGBatch::from_trials(handle, chunk));
        }
        return Ok(batches);
    }

    // One shuffled queue per class; BTreeMap keeps class iteration stable.
    let mut queues: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for &i in &indices {
        queues.entry(handle.trials()[i].class_id).or_default().push(i);
    }
    for q in queues.values_mut() {
        q.shuffle(&mut rng);
    }
    loop {
        let mut pass: Vec<usize> = queues.values_mut().filter_map(|q| q.pop()).collect();
        if pass.is_empty() {
            break;
        }
        pass.shuffle(&mut rng);
        for chunk in pass.chunks(batch_size) {
            batches.push(EEGBatch::from_trials(handle, chunk));
        }
    }
    Ok(batches)
}
