//! Bi-exponential intravoxel incoherent motion (IVIM) signal model.
//!
//! A voxel's diffusion-weighted amplitude at b-value `b` is
//!
//! ```text
//! S(b) = S0 * ( f * exp(-b * d_star) + (1 - f) * exp(-b * d) )
//! ```
//!
//! with tissue diffusion coefficient `d`, perfusion fraction `f` and
//! pseudo-diffusion coefficient `d_star`, all in SI-consistent units
//! (mm^2/s for the coefficients, s/mm^2 for b).

use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

/// Number of tissue parameters per voxel.
pub const N_PARAMS: usize = 3;

/// One voxel's tissue parameters, in physical units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IvimParams {
    /// Tissue diffusion coefficient, mm^2/s.
    pub d: f64,
    /// Perfusion fraction, dimensionless.
    pub f: f64,
    /// Pseudo-diffusion coefficient, mm^2/s.
    pub d_star: f64,
}

impl IvimParams {
    pub fn new(d: f64, f: f64, d_star: f64) -> Self {
        IvimParams { d, f, d_star }
    }

    pub fn is_finite(&self) -> bool {
        self.d.is_finite() && self.f.is_finite() && self.d_star.is_finite()
    }

    /// Canonical parameter order used across arrays, files and networks.
    pub fn to_array(self) -> [f64; N_PARAMS] {
        [self.d, self.f, self.d_star]
    }

    pub fn from_array(a: [f64; N_PARAMS]) -> Self {
        IvimParams::new(a[0], a[1], a[2])
    }
}

/// Canonical parameter names in array order.
pub const PARAM_NAMES: [&str; N_PARAMS] = ["d", "f", "d_star"];

/// Closed intervals the networks are trained on; also the normalization frame
/// for labels and for reported uncertainties.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PriorRanges {
    pub d: (f64, f64),
    pub f: (f64, f64),
    pub d_star: (f64, f64),
}

impl Default for PriorRanges {
    /// Training prior: d in [0, 3e-3], f in [0, 0.4], d_star in [3e-3, 0.2].
    fn default() -> Self {
        PriorRanges {
            d: (0.0, 3.0e-3),
            f: (0.0, 0.4),
            d_star: (3.0e-3, 0.2),
        }
    }
}

impl PriorRanges {
    pub fn validate(&self) -> Result<()> {
        for (name, (lo, hi)) in PARAM_NAMES.iter().zip(self.as_pairs()) {
            if !lo.is_finite() || !hi.is_finite() || lo >= hi {
                return Err(Error::invalid(format!(
                    "prior range for {name} must be finite with min < max, got [{lo}, {hi}]"
                )));
            }
        }
        Ok(())
    }

    pub fn as_pairs(&self) -> [(f64, f64); N_PARAMS] {
        [self.d, self.f, self.d_star]
    }

    /// Interval width per parameter; the unit in which uncertainties are reported.
    pub fn widths(&self) -> [f64; N_PARAMS] {
        let p = self.as_pairs();
        [p[0].1 - p[0].0, p[1].1 - p[1].0, p[2].1 - p[2].0]
    }

    /// Maps physical parameters onto [0, 1]^3.
    pub fn normalize(&self, params: IvimParams) -> [f64; N_PARAMS] {
        let p = self.as_pairs();
        let a = params.to_array();
        [
            (a[0] - p[0].0) / (p[0].1 - p[0].0),
            (a[1] - p[1].0) / (p[1].1 - p[1].0),
            (a[2] - p[2].0) / (p[2].1 - p[2].0),
        ]
    }

    /// Inverse of [`PriorRanges::normalize`].
    pub fn denormalize(&self, unit: [f64; N_PARAMS]) -> IvimParams {
        let p = self.as_pairs();
        IvimParams::new(
            p[0].0 + unit[0] * (p[0].1 - p[0].0),
            p[1].0 + unit[1] * (p[1].1 - p[1].0),
            p[2].0 + unit[2] * (p[2].1 - p[2].0),
        )
    }
}

/// Acquisition b-values, s/mm^2. Strictly increasing, starting at zero so
/// every record carries its own normalization reference.
#[derive(Debug, Clone, PartialEq)]
pub struct BValueSchedule {
    values: Vec<f64>,
}

impl BValueSchedule {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.len() < 2 {
            return Err(Error::invalid("schedule needs at least two b-values"));
        }
        if values[0] != 0.0 {
            return Err(Error::invalid(format!(
                "first b-value must be 0, got {}",
                values[0]
            )));
        }
        for w in values.windows(2) {
            if !w[1].is_finite() || w[1] <= w[0] {
                return Err(Error::invalid(format!(
                    "b-values must be finite and strictly increasing, got {} after {}",
                    w[1], w[0]
                )));
            }
        }
        Ok(BValueSchedule { values })
    }

    /// The 14-point acquisition scheme used throughout the experiments.
    pub fn default_protocol() -> Self {
        BValueSchedule::new(vec![
            0.0, 15.0, 60.0, 100.0, 150.0, 170.0, 190.0, 220.0, 280.0, 440.0, 560.0, 700.0,
            850.0, 1000.0,
        ])
        .expect("default protocol is valid")
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Amplitudes of one voxel across the schedule, with plumbing flags so the
/// simulation stages cannot be applied twice or out of order.
#[derive(Debug, Clone, PartialEq)]
pub struct SignalRecord {
    pub schedule: Arc<BValueSchedule>,
    /// Amplitudes, one per b-value; finite and non-negative.
    pub s: Vec<f64>,
    /// True once amplitudes are divided by the b=0 sample.
    pub normalized: bool,
    /// True once measurement noise has been applied.
    pub noisy: bool,
}

impl SignalRecord {
    pub fn n_b(&self) -> usize {
        self.s.len()
    }
}

/// Evaluates the bi-exponential model at a single b-value.
///
/// b = 0 is emitted as exactly `s0`: both exponentials are one and the
/// compartment fractions sum to one by construction.
pub fn forward_amplitude(params: IvimParams, b: f64, s0: f64) -> f64 {
    if b == 0.0 {
        s0
    } else {
        s0 * (params.f * (-b * params.d_star).exp() + (1.0 - params.f) * (-b * params.d).exp())
    }
}

/// Evaluates the model across a schedule.
///
/// Requires finite parameters and `s0 > 0`; emits a clean (noise-free,
/// unnormalized) record.
pub fn forward_signal(
    params: IvimParams,
    schedule: &Arc<BValueSchedule>,
    s0: f64,
) -> Result<SignalRecord> {
    if !params.is_finite() {
        return Err(Error::invalid("IVIM parameters must be finite"));
    }
    if !s0.is_finite() || s0 <= 0.0 {
        return Err(Error::invalid(format!("s0 must be positive, got {s0}")));
    }
    let s = schedule
        .values()
        .iter()
        .map(|&b| forward_amplitude(params, b, s0))
        .collect();
    Ok(SignalRecord {
        schedule: Arc::clone(schedule),
        s,
        normalized: false,
        noisy: false,
    })
}

/// Applies Rician measurement noise with an explicit Gaussian channel sigma.
///
/// Each amplitude s becomes sqrt((s + n1)^2 + n2^2) with n1, n2 drawn
/// independently from N(0, sigma^2). `sigma = 0` is allowed and is the
/// identity. Used directly for pure-noise background voxels whose reference
/// amplitude is zero.
pub fn add_rician_noise_with_sigma<R: Rng + ?Sized>(
    record: &SignalRecord,
    sigma: f64,
    rng: &mut R,
) -> Result<SignalRecord> {
    if record.noisy {
        return Err(Error::invalid("record already carries noise"));
    }
    if !sigma.is_finite() || sigma < 0.0 {
        return Err(Error::invalid(format!(
            "noise sigma must be finite and non-negative, got {sigma}"
        )));
    }
    let mut out = record.clone();
    out.noisy = true;
    if sigma == 0.0 {
        return Ok(out);
    }
    let normal = Normal::new(0.0, sigma).expect("sigma checked above");
    for s in out.s.iter_mut() {
        let n1 = normal.sample(rng);
        let n2 = normal.sample(rng);
        *s = ((*s + n1).powi(2) + n2.powi(2)).sqrt();
    }
    Ok(out)
}

/// Applies Rician noise at a signal-to-noise ratio defined against the clean
/// b=0 amplitude: `sigma = s[0] / snr`.
///
/// Must run before normalization so that sigma is anchored to the physical
/// signal scale.
pub fn add_rician_noise<R: Rng + ?Sized>(
    record: &SignalRecord,
    snr: f64,
    rng: &mut R,
) -> Result<SignalRecord> {
    if !snr.is_finite() || snr <= 0.0 {
        return Err(Error::invalid(format!("snr must be positive, got {snr}")));
    }
    if record.normalized {
        return Err(Error::invalid(
            "noise must be applied before normalization; the b=0 reference is already scaled",
        ));
    }
    add_rician_noise_with_sigma(record, record.s[0] / snr, rng)
}

/// Divides every amplitude by the b=0 sample so that s[0] == 1 exactly.
///
/// Idempotent; fails with [`Error::DegenerateVoxel`] when the reference
/// amplitude is not positive.
pub fn normalize_signal(record: &SignalRecord) -> Result<SignalRecord> {
    if record.normalized {
        return Ok(record.clone());
    }
    let s0 = record.s[0];
    if !s0.is_finite() || s0 <= 0.0 {
        return Err(Error::DegenerateVoxel(format!(
            "cannot normalize by b=0 amplitude {s0}"
        )));
    }
    let mut out = record.clone();
    out.normalized = true;
    for s in out.s.iter_mut() {
        *s /= s0;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{rng_from_seed, rng_for, Stream};
    use approx::assert_relative_eq;

    fn schedule() -> Arc<BValueSchedule> {
        Arc::new(BValueSchedule::default_protocol())
    }

    #[test]
    fn forward_matches_hand_computed_value() {
        // 0.2 * exp(-5) + 0.8 * exp(-0.1) evaluated independently.
        let p = IvimParams::new(0.002, 0.2, 0.1);
        let s = forward_amplitude(p, 50.0, 1.0);
        assert_relative_eq!(s, 0.725_217_523_828_584_7, max_relative = 1e-15);
    }

    #[test]
    fn forward_at_b0_is_exactly_s0() {
        for f in [0.0, 0.1, 0.123, 0.3, 0.4] {
            let p = IvimParams::new(1.3e-3, f, 0.05);
            assert_eq!(forward_amplitude(p, 0.0, 3.7), 3.7);
        }
    }

    #[test]
    fn forward_zero_f_is_monoexponential() {
        let p = IvimParams::new(1.5e-3, 0.0, 0.07);
        let rec = forward_signal(p, &schedule(), 2.0).unwrap();
        for (&b, &s) in schedule().values().iter().zip(rec.s.iter()) {
            assert_relative_eq!(s, 2.0 * (-b * 1.5e-3).exp(), max_relative = 1e-14);
        }
    }

    #[test]
    fn forward_amplitudes_decay_and_stay_positive() {
        let p = IvimParams::new(2.9e-3, 0.39, 0.19);
        let rec = forward_signal(p, &schedule(), 1.0).unwrap();
        for w in rec.s.windows(2) {
            assert!(w[1] > 0.0 && w[1] < w[0]);
        }
    }

    #[test]
    fn forward_rejects_bad_s0_and_nonfinite_params() {
        let p = IvimParams::new(1e-3, 0.1, 0.05);
        assert!(forward_signal(p, &schedule(), 0.0).is_err());
        assert!(forward_signal(p, &schedule(), -1.0).is_err());
        assert!(forward_signal(p, &schedule(), f64::NAN).is_err());
        let bad = IvimParams::new(f64::NAN, 0.1, 0.05);
        assert!(forward_signal(bad, &schedule(), 1.0).is_err());
    }

    #[test]
    fn schedule_rejects_malformed_inputs() {
        assert!(BValueSchedule::new(vec![0.0]).is_err());
        assert!(BValueSchedule::new(vec![10.0, 20.0]).is_err());
        assert!(BValueSchedule::new(vec![0.0, 5.0, 5.0]).is_err());
        assert!(BValueSchedule::new(vec![0.0, 20.0, 10.0]).is_err());
        assert!(BValueSchedule::new(vec![0.0, f64::INFINITY]).is_err());
    }

    #[test]
    fn default_protocol_has_fourteen_points() {
        let sched = BValueSchedule::default_protocol();
        assert_eq!(sched.len(), 14);
        assert_eq!(sched.values()[0], 0.0);
        assert_eq!(sched.values()[13], 1000.0);
    }

    #[test]
    fn rician_zero_signal_matches_rayleigh_mean() {
        // With s = 0 the magnitude is Rayleigh(sigma); mean sigma*sqrt(pi/2).
        let rec = SignalRecord {
            schedule: schedule(),
            s: vec![0.0; 14],
            normalized: false,
            noisy: false,
        };
        let mut rng = rng_from_seed(7);
        let n = 200_000usize;
        let mut sum = 0.0;
        for _ in 0..n {
            let noisy = add_rician_noise_with_sigma(&rec, 1.0, &mut rng).unwrap();
            sum += noisy.s[0];
        }
        let mean = sum / n as f64;
        let expected = (std::f64::consts::PI / 2.0).sqrt();
        // Rayleigh sd ~0.52; 4 sigma of the sample mean is ~0.0047.
        assert!((mean - expected).abs() < 5e-3, "mean {mean} vs {expected}");
    }

    #[test]
    fn rician_high_snr_is_approximately_unbiased() {
        // s >> sigma: E[magnitude] ~ s + sigma^2/(2 s).
        let rec = SignalRecord {
            schedule: schedule(),
            s: vec![10.0; 14],
            normalized: false,
            noisy: false,
        };
        let mut rng = rng_from_seed(11);
        let n = 100_000usize;
        let mut sum = 0.0;
        for _ in 0..n {
            let noisy = add_rician_noise_with_sigma(&rec, 0.1, &mut rng).unwrap();
            sum += noisy.s[3];
        }
        let mean = sum / n as f64;
        assert!((mean - 10.0005).abs() < 2e-3, "mean {mean}");
    }

    #[test]
    fn rician_with_huge_snr_leaves_signal_nearly_unchanged() {
        let p = IvimParams::new(1e-3, 0.2, 0.05);
        let rec = forward_signal(p, &schedule(), 1.0).unwrap();
        let mut rng = rng_from_seed(3);
        let noisy = add_rician_noise(&rec, 1e12, &mut rng).unwrap();
        for (a, b) in rec.s.iter().zip(noisy.s.iter()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn rician_guards_flags_and_arguments() {
        let p = IvimParams::new(1e-3, 0.2, 0.05);
        let rec = forward_signal(p, &schedule(), 1.0).unwrap();
        let mut rng = rng_from_seed(1);
        assert!(add_rician_noise(&rec, 0.0, &mut rng).is_err());
        assert!(add_rician_noise(&rec, -5.0, &mut rng).is_err());
        let noisy = add_rician_noise(&rec, 50.0, &mut rng).unwrap();
        assert!(noisy.noisy);
        assert!(add_rician_noise(&noisy, 50.0, &mut rng).is_err());
        let norm = normalize_signal(&rec).unwrap();
        assert!(add_rician_noise(&norm, 50.0, &mut rng).is_err());
    }

    #[test]
    fn rician_amplitudes_are_nonnegative_even_at_snr_one() {
        let p = IvimParams::new(3e-3, 0.4, 0.2);
        let rec = forward_signal(p, &schedule(), 1.0).unwrap();
        for i in 0..200 {
            let mut rng = rng_for(5, Stream::TrainingRecord, i);
            let noisy = add_rician_noise(&rec, 1.0, &mut rng).unwrap();
            assert!(noisy.s.iter().all(|&s| s.is_finite() && s >= 0.0));
        }
    }

    #[test]
    fn normalize_sets_reference_to_exactly_one() {
        let p = IvimParams::new(1.1e-3, 0.17, 0.04);
        let rec = forward_signal(p, &schedule(), 123.456).unwrap();
        let mut rng = rng_from_seed(9);
        let noisy = add_rician_noise(&rec, 20.0, &mut rng).unwrap();
        let norm = normalize_signal(&noisy).unwrap();
        assert_eq!(norm.s[0], 1.0);
        assert!(norm.normalized);
        // Idempotent: a second pass is a no-op.
        let again = normalize_signal(&norm).unwrap();
        assert_eq!(again, norm);
    }

    #[test]
    fn normalize_rejects_nonpositive_reference() {
        let rec = SignalRecord {
            schedule: schedule(),
            s: vec![0.0; 14],
            normalized: false,
            noisy: true,
        };
        assert!(matches!(
            normalize_signal(&rec),
            Err(crate::error::Error::DegenerateVoxel(_))
        ));
    }

    #[test]
    fn prior_normalization_round_trips() {
        let ranges = PriorRanges::default();
        let p = IvimParams::new(2.1e-3, 0.33, 0.15);
        let unit = ranges.normalize(p);
        assert!(unit.iter().all(|&u| (0.0..=1.0).contains(&u)));
        let back = ranges.denormalize(unit);
        assert_relative_eq!(back.d, p.d, max_relative = 1e-12);
        assert_relative_eq!(back.f, p.f, max_relative = 1e-12);
        assert_relative_eq!(back.d_star, p.d_star, max_relative = 1e-12);
    }

    #[test]
    fn prior_range_endpoints_map_to_unit_corners() {
        let ranges = PriorRanges::default();
        let lo = ranges.normalize(IvimParams::new(0.0, 0.0, 3.0e-3));
        let hi = ranges.normalize(IvimParams::new(3.0e-3, 0.4, 0.2));
        assert_eq!(lo, [0.0, 0.0, 0.0]);
        assert_eq!(hi, [1.0, 1.0, 1.0]);
    }

    #[test]
    fn prior_validation_rejects_inverted_ranges() {
        let r = PriorRanges {
            f: (0.4, 0.0),
            ..PriorRanges::default()
        };
        assert!(r.validate().is_err());
    }
}
