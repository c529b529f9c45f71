//! Accuracy, dispersion, calibration and sharpness metrics.
//!
//! Quantiles follow the linear-interpolation convention h = (n - 1) * p on
//! the sorted sample (the common default in statistical software), so every
//! interval endpoint is reproducible to the bit. Calibration is summarized as
//! the mean absolute gap between observed and nominal coverage across the
//! swept levels; a constant coverage offset of c yields exactly c.

use crate::error::{Error, Result};

/// Consistency constant mapping MAD to a Gaussian-equivalent sigma.
pub const RCV_CONSTANT: f64 = 1.486;

fn check_finite(name: &str, xs: &[f64]) -> Result<()> {
    if xs.iter().any(|x| !x.is_finite()) {
        return Err(Error::invalid(format!("{name} must be finite")));
    }
    Ok(())
}

fn sorted_copy(xs: &[f64]) -> Vec<f64> {
    let mut v = xs.to_vec();
    v.sort_unstable_by(|a, b| a.partial_cmp(b).expect("finite values"));
    v
}

/// Median of a non-empty finite sample.
pub fn median(xs: &[f64]) -> Result<f64> {
    if xs.is_empty() {
        return Err(Error::invalid("median of an empty sample"));
    }
    check_finite("median input", xs)?;
    let v = sorted_copy(xs);
    let n = v.len();
    Ok(if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    })
}

/// Median and median absolute deviation.
pub fn median_mad(xs: &[f64]) -> Result<(f64, f64)> {
    let med = median(xs)?;
    let dev: Vec<f64> = xs.iter().map(|x| (x - med).abs()).collect();
    Ok((med, median(&dev)?))
}

/// Median summary of a relative error sample, with exclusion accounting.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RelativeSummary {
    pub median: f64,
    pub mad: f64,
    pub n_used: usize,
    /// Entries dropped because the reference value was exactly zero.
    pub n_excluded: usize,
}

fn relative_summary<F>(pred: &[f64], truth: &[f64], err: F) -> Result<RelativeSummary>
where
    F: Fn(f64, f64) -> f64,
{
    if pred.len() != truth.len() {
        return Err(Error::invalid("prediction and truth lengths differ"));
    }
    if pred.is_empty() {
        return Err(Error::invalid("empty error sample"));
    }
    check_finite("predictions", pred)?;
    check_finite("truths", truth)?;
    let mut values = Vec::with_capacity(pred.len());
    let mut n_excluded = 0usize;
    for (&p, &t) in pred.iter().zip(truth.iter()) {
        if t == 0.0 {
            n_excluded += 1;
        } else {
            values.push(err(p, t));
        }
    }
    if values.is_empty() {
        return Err(Error::invalid(
            "every reference value is zero; relative errors are undefined",
        ));
    }
    let (med, mad) = median_mad(&values)?;
    Ok(RelativeSummary {
        median: med,
        mad,
        n_used: values.len(),
        n_excluded,
    })
}

/// Median absolute relative error |pred - truth| / |truth|.
pub fn mdae(pred: &[f64], truth: &[f64]) -> Result<RelativeSummary> {
    relative_summary(pred, truth, |p, t| ((p - t) / t).abs())
}

/// Median signed relative error (pred - truth) / truth.
pub fn mdb(pred: &[f64], truth: &[f64]) -> Result<RelativeSummary> {
    relative_summary(pred, truth, |p, t| (p - t) / t)
}

/// Robust coefficient of variation of one region's estimates.
pub fn rcv(values: &[f64]) -> Result<f64> {
    let (med, mad) = median_mad(values)?;
    if med == 0.0 {
        return Err(Error::Numerical(
            "robust coefficient of variation is undefined at zero median".into(),
        ));
    }
    Ok(RCV_CONSTANT * mad / med)
}

/// Linear-interpolation quantile on an ascending sample, p in [0, 1].
pub fn quantile_sorted(sorted: &[f64], p: f64) -> Result<f64> {
    if sorted.is_empty() {
        return Err(Error::invalid("quantile of an empty sample"));
    }
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::invalid(format!("quantile level {p} outside [0, 1]")));
    }
    let n = sorted.len();
    let h = (n - 1) as f64 * p;
    let lo = h.floor() as usize;
    if lo + 1 >= n {
        return Ok(sorted[n - 1]);
    }
    let frac = h - lo as f64;
    Ok(sorted[lo] + frac * (sorted[lo + 1] - sorted[lo]))
}

/// Central interval endpoints for a coverage level gamma in percent,
/// on an already sorted sample.
pub fn interval_from_sorted(sorted: &[f64], gamma: f64) -> Result<(f64, f64)> {
    if !(gamma > 0.0 && gamma <= 100.0) {
        return Err(Error::invalid(format!(
            "coverage level must lie in (0, 100], got {gamma}"
        )));
    }
    let lo = quantile_sorted(sorted, (100.0 - gamma) / 200.0)?;
    let hi = quantile_sorted(sorted, (100.0 + gamma) / 200.0)?;
    Ok((lo, hi))
}

/// Central gamma-percent prediction interval of a sample.
///
/// gamma = 100 degenerates to the full sample range.
pub fn prediction_interval(samples: &[f64], gamma: f64) -> Result<(f64, f64)> {
    if samples.is_empty() {
        return Err(Error::invalid("prediction interval of an empty sample"));
    }
    check_finite("samples", samples)?;
    interval_from_sorted(&sorted_copy(samples), gamma)
}

/// Fraction of truths inside their closed intervals.
pub fn picp(intervals: &[(f64, f64)], truths: &[f64]) -> Result<f64> {
    if intervals.len() != truths.len() {
        return Err(Error::invalid("interval and truth counts differ"));
    }
    if intervals.is_empty() {
        return Err(Error::invalid("empty coverage sample"));
    }
    let hits = intervals
        .iter()
        .zip(truths.iter())
        .filter(|((lo, hi), t)| lo <= *t && *t <= hi)
        .count();
    Ok(hits as f64 / truths.len() as f64)
}

/// Observed coverage against nominal coverage, both as fractions.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationCurve {
    pub nominal: Vec<f64>,
    pub observed: Vec<f64>,
}

impl CalibrationCurve {
    pub fn new(nominal: Vec<f64>, observed: Vec<f64>) -> Result<Self> {
        if nominal.len() != observed.len() {
            return Err(Error::invalid("nominal and observed lengths differ"));
        }
        if nominal.len() < 2 {
            return Err(Error::invalid("a calibration curve needs at least two levels"));
        }
        for w in nominal.windows(2) {
            if w[1] <= w[0] {
                return Err(Error::invalid("nominal levels must be strictly increasing"));
            }
        }
        if nominal.iter().any(|&p| !(0.0 < p && p <= 1.0)) {
            return Err(Error::invalid("nominal levels must lie in (0, 1]"));
        }
        if observed.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
            return Err(Error::invalid("observed coverage must lie in [0, 1]"));
        }
        Ok(CalibrationCurve { nominal, observed })
    }

    /// The standard 5% to 95% sweep in 5% steps, as fractions.
    pub fn standard_levels() -> Vec<f64> {
        (1..=19).map(|i| i as f64 * 0.05).collect()
    }
}

/// Mean absolute coverage gap: the trapezoidal integral of
/// |observed - nominal| over the level range, normalized by that range.
pub fn miscalibration_area(curve: &CalibrationCurve) -> f64 {
    let gaps: Vec<f64> = curve
        .nominal
        .iter()
        .zip(curve.observed.iter())
        .map(|(n, o)| (o - n).abs())
        .collect();
    let mut integral = 0.0;
    for i in 0..curve.nominal.len() - 1 {
        let dx = curve.nominal[i + 1] - curve.nominal[i];
        integral += 0.5 * (gaps[i] + gaps[i + 1]) * dx;
    }
    integral / (curve.nominal.last().unwrap() - curve.nominal.first().unwrap())
}

/// Mean interval width normalized by the reference range of the target.
pub fn pinaw(intervals: &[(f64, f64)], reference_range: f64) -> Result<f64> {
    if intervals.is_empty() {
        return Err(Error::invalid("empty interval sample"));
    }
    if !(reference_range.is_finite() && reference_range > 0.0) {
        return Err(Error::invalid(format!(
            "reference range must be positive, got {reference_range}"
        )));
    }
    let mean_width: f64 = intervals.iter().map(|(lo, hi)| hi - lo).sum::<f64>()
        / intervals.len() as f64;
    Ok(mean_width / reference_range)
}

/// Sample-based continuous ranked probability score, energy form:
/// mean |x_i - y| - (1/2) mean |x_i - x_j|, evaluated in O(n log n) via the
/// sorted-sample identity sum_{i<j} (x_(j) - x_(i)) = sum_k x_(k) (2k - n + 1).
pub fn crps_empirical(samples: &[f64], y: f64) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::invalid("crps of an empty sample"));
    }
    if !y.is_finite() {
        return Err(Error::invalid("crps target must be finite"));
    }
    check_finite("samples", samples)?;
    let sorted = sorted_copy(samples);
    crps_from_sorted(&sorted, y)
}

/// CRPS on an already sorted sample; the hot path for per-voxel scoring.
pub fn crps_from_sorted(sorted: &[f64], y: f64) -> Result<f64> {
    if sorted.is_empty() {
        return Err(Error::invalid("crps of an empty sample"));
    }
    let n = sorted.len() as f64;
    let term1: f64 = sorted.iter().map(|x| (x - y).abs()).sum::<f64>() / n;
    let mut pair_sum = 0.0;
    for (k, &x) in sorted.iter().enumerate() {
        pair_sum += x * (2.0 * k as f64 - n + 1.0);
    }
    Ok(term1 - pair_sum / (n * n))
}
