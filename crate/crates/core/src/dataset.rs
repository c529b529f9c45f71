//! Synthetic training data: uniform prior draws pushed through the signal
//! model, corrupted with Rician noise at a per-record SNR, then normalized.
//!
//! Record `i` of a run is produced entirely from `derive_seed(master,
//! TrainingRecord, i)`, so the generated set does not depend on how records
//! are distributed over worker threads.

use std::sync::Arc;

use ndarray::Array2;
use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::ivim::{
    add_rician_noise, forward_signal, normalize_signal, BValueSchedule, IvimParams, PriorRanges,
    SignalRecord, N_PARAMS,
};
use crate::rng::{rng_for, Stream};

/// Normalized signals with their generating parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSet {
    pub schedule: Arc<BValueSchedule>,
    pub prior_ranges: PriorRanges,
    /// Normalized, noise-corrupted records.
    pub signals: Vec<SignalRecord>,
    /// Ground-truth parameters in physical units.
    pub labels: Vec<IvimParams>,
    /// SNR drawn for each record (kept for inspection; not a training input).
    pub snr: Vec<f64>,
}

impl TrainingSet {
    pub fn len(&self) -> usize {
        self.signals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.signals.is_empty()
    }

    /// Labels mapped onto [0, 1]^3, the space the networks regress in.
    pub fn labels_unit(&self) -> Vec<[f64; N_PARAMS]> {
        self.labels
            .iter()
            .map(|&p| self.prior_ranges.normalize(p))
            .collect()
    }

    /// Rows selected by index, in the given order.
    pub fn subset(&self, indices: &[usize]) -> Result<TrainingSet> {
        for &i in indices {
            if i >= self.len() {
                return Err(Error::invalid(format!(
                    "subset index {i} out of bounds for {} records",
                    self.len()
                )));
            }
        }
        Ok(TrainingSet {
            schedule: Arc::clone(&self.schedule),
            prior_ranges: self.prior_ranges,
            signals: indices.iter().map(|&i| self.signals[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            snr: indices.iter().map(|&i| self.snr[i]).collect(),
        })
    }

    /// Dense design matrices: inputs `n x n_b`, unit-space labels `n x 3`.
    pub fn to_matrices(&self) -> (Array2<f64>, Array2<f64>) {
        let n = self.len();
        let n_b = self.schedule.len();
        let mut x = Array2::zeros((n, n_b));
        let mut y = Array2::zeros((n, N_PARAMS));
        for (i, rec) in self.signals.iter().enumerate() {
            for (j, &s) in rec.s.iter().enumerate() {
                x[(i, j)] = s;
            }
        }
        for (i, unit) in self.labels_unit().into_iter().enumerate() {
            for (p, &u) in unit.iter().enumerate() {
                y[(i, p)] = u;
            }
        }
        (x, y)
    }
}

fn sample_record(
    ranges: &PriorRanges,
    schedule: &Arc<BValueSchedule>,
    snr_range: (f64, f64),
    seed: u64,
    stream: Stream,
    index: u64,
) -> Result<(SignalRecord, IvimParams, f64)> {
    let mut rng = rng_for(seed, stream, index);
    // Draw order is part of the reproducibility contract: d, f, d_star, snr,
    // then the noise channel pairs in b-value order.
    let pairs = ranges.as_pairs();
    let d = rng.gen_range(pairs[0].0..=pairs[0].1);
    let f = rng.gen_range(pairs[1].0..=pairs[1].1);
    let d_star = rng.gen_range(pairs[2].0..=pairs[2].1);
    let snr = rng.gen_range(snr_range.0..=snr_range.1);
    let params = IvimParams::new(d, f, d_star);
    let clean = forward_signal(params, schedule, 1.0)?;
    let noisy = add_rician_noise(&clean, snr, &mut rng)?;
    let norm = normalize_signal(&noisy)?;
    Ok((norm, params, snr))
}

/// Draws `n` records from the prior at SNRs uniform in `snr_range`.
///
/// Deterministic in `seed` and independent of the rayon worker count.
pub fn sample_training_set(
    n: usize,
    ranges: &PriorRanges,
    schedule: &Arc<BValueSchedule>,
    snr_range: (f64, f64),
    seed: u64,
) -> Result<TrainingSet> {
    if n == 0 {
        return Err(Error::invalid("cannot sample an empty training set"));
    }
    ranges.validate()?;
    if !snr_range.0.is_finite() || !snr_range.1.is_finite() || snr_range.0 <= 0.0 {
        return Err(Error::invalid(format!(
            "snr range must be positive and finite, got [{}, {}]",
            snr_range.0, snr_range.1
        )));
    }
    if snr_range.0 > snr_range.1 {
        return Err(Error::invalid(format!(
            "snr range is inverted: [{}, {}]",
            snr_range.0, snr_range.1
        )));
    }
    let rows: Result<Vec<_>> = (0..n)
        .into_par_iter()
        .map(|i| sample_record(ranges, schedule, snr_range, seed, Stream::TrainingRecord, i as u64))
        .collect();
    let rows = rows?;
    let mut signals = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    let mut snr = Vec::with_capacity(n);
    for (rec, p, s) in rows {
        signals.push(rec);
        labels.push(p);
        snr.push(s);
    }
    Ok(TrainingSet {
        schedule: Arc::clone(schedule),
        prior_ranges: *ranges,
        signals,
        labels,
        snr,
    })
}

/// Index partition for a validation split: `(train, validation)`, each sorted
/// ascending. The permutation is drawn once from the split stream of `seed`.
pub fn split_indices(n: usize, val_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if n < 2 {
        return Err(Error::invalid("need at least two records to split"));
    }
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(Error::invalid(format!(
            "validation fraction must lie in (0, 1), got {val_fraction}"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = rng_for(seed, Stream::ValidationSplit, 0);
    // Fisher-Yates; both halves are then sorted, record order carries no
    // information because training reshuffles every epoch.
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    let n_val = ((n as f64 * val_fraction).round() as usize).clamp(1, n - 1);
    let mut val: Vec<usize> = order[..n_val].to_vec();
    let mut train: Vec<usize> = order[n_val..].to_vec();
    val.sort_unstable();
    train.sort_unstable();
    Ok((train, val))
}

/// Splits a set into `(train, validation)` subsets.
pub fn split_train_validation(
    set: &TrainingSet,
    val_fraction: f64,
    seed: u64,
) -> Result<(TrainingSet, TrainingSet)> {
    let (train_idx, val_idx) = split_indices(set.len(), val_fraction, seed)?;
    Ok((set.subset(&train_idx)?, set.subset(&val_idx)?))
}
