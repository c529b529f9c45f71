//! Digital phantom: the classic ten-ellipse head layout collapsed into six
//! tissue regions, each holding one parameter triple drawn from the prior.
//!
//! Pixels outside every ellipse are background: pure Rician noise around zero
//! amplitude at the phantom's noise level, excluded from all analysis.

use std::sync::Arc;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::ivim::{
    add_rician_noise_with_sigma, forward_signal, normalize_signal, BValueSchedule, IvimParams,
    PriorRanges, SignalRecord,
};
use crate::rng::{rng_for, Stream};
use rand::Rng;

/// Number of distinct foreground regions; labels run 1..=6, 0 is background.
pub const N_REGIONS: usize = 6;

/// Background label value.
pub const BACKGROUND: u8 = 0;

/// One ellipse in the [-1, 1]^2 frame: center, semi-axes, rotation (degrees).
struct Ellipse {
    x0: f64,
    y0: f64,
    a: f64,
    b: f64,
    phi_deg: f64,
    region: u8,
}

/// Painter-ordered ellipse table; a pixel takes the region of the last
/// ellipse containing it. Shapes follow the standard head phantom: outer
/// shell, brain interior, two large tilted ellipses, and two groups of small
/// structures (three mid-brain, three near the bottom).
const ELLIPSES: [Ellipse; 10] = [
    Ellipse { x0: 0.0, y0: 0.0, a: 0.69, b: 0.92, phi_deg: 0.0, region: 1 },
    Ellipse { x0: 0.0, y0: -0.0184, a: 0.6624, b: 0.874, phi_deg: 0.0, region: 2 },
    Ellipse { x0: 0.22, y0: 0.0, a: 0.11, b: 0.31, phi_deg: -18.0, region: 3 },
    Ellipse { x0: -0.22, y0: 0.0, a: 0.16, b: 0.41, phi_deg: 18.0, region: 4 },
    Ellipse { x0: 0.0, y0: 0.35, a: 0.21, b: 0.25, phi_deg: 0.0, region: 5 },
    Ellipse { x0: 0.0, y0: 0.1, a: 0.046, b: 0.046, phi_deg: 0.0, region: 5 },
    Ellipse { x0: 0.0, y0: -0.1, a: 0.046, b: 0.046, phi_deg: 0.0, region: 5 },
    Ellipse { x0: -0.08, y0: -0.605, a: 0.046, b: 0.023, phi_deg: 0.0, region: 6 },
    Ellipse { x0: 0.0, y0: -0.605, a: 0.023, b: 0.023, phi_deg: 0.0, region: 6 },
    Ellipse { x0: 0.06, y0: -0.605, a: 0.023, b: 0.046, phi_deg: 0.0, region: 6 },
];

/// Smallest grid edge for which every region is guaranteed at least one pixel
/// center (the smallest inscribed circle has radius 0.023 in frame units;
/// the cell half-diagonal must not exceed it).
pub const MIN_SIDE: usize = 64;

impl Ellipse {
    fn contains(&self, x: f64, y: f64) -> bool {
        let phi = self.phi_deg.to_radians();
        let (sin, cos) = phi.sin_cos();
        let dx = x - self.x0;
        let dy = y - self.y0;
        let xr = cos * dx + sin * dy;
        let yr = -sin * dx + cos * dy;
        (xr / self.a).powi(2) + (yr / self.b).powi(2) <= 1.0
    }
}

/// Region label per pixel, row-major, using pixel-center coordinates.
pub fn region_label_map(width: usize, height: usize) -> Vec<u8> {
    let mut labels = vec![BACKGROUND; width * height];
    for row in 0..height {
        let y = -1.0 + 2.0 * (row as f64 + 0.5) / height as f64;
        for col in 0..width {
            let x = -1.0 + 2.0 * (col as f64 + 0.5) / width as f64;
            for e in ELLIPSES.iter() {
                if e.contains(x, y) {
                    labels[row * width + col] = e.region;
                }
            }
        }
    }
    labels
}

/// A simulated slice: labels, per-pixel ground truth and noisy signals.
#[derive(Debug, Clone, PartialEq)]
pub struct PhantomVolume {
    pub width: usize,
    pub height: usize,
    pub snr: f64,
    pub schedule: Arc<BValueSchedule>,
    /// Row-major region labels; 0 is background.
    pub labels: Vec<u8>,
    /// Ground truth per pixel; all-zero triples on background.
    pub truth: Vec<IvimParams>,
    /// Normalized noisy signals, one record per pixel (background included).
    pub signals: Vec<SignalRecord>,
    /// The parameter triple of each region, index 0 holding region 1.
    pub region_params: [IvimParams; N_REGIONS],
}

impl PhantomVolume {
    pub fn n_pixels(&self) -> usize {
        self.width * self.height
    }

    pub fn n_foreground(&self) -> usize {
        self.labels.iter().filter(|&&l| l != BACKGROUND).count()
    }

    /// Pixel indices carrying a given region label (1..=6).
    pub fn region_pixels(&self, region: u8) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l == region)
            .map(|(i, _)| i)
            .collect()
    }
}

/// Simulates one phantom slice at the given SNR.
///
/// Region parameters come from the region stream of `seed`; each pixel's noise
/// comes from its own pixel stream, so the image is identical for any worker
/// count. The Gaussian channel sigma is `1 / snr` everywhere (the foreground
/// reference amplitude is one), including background pixels.
pub fn generate_phantom(
    width: usize,
    height: usize,
    snr: f64,
    ranges: &PriorRanges,
    schedule: &Arc<BValueSchedule>,
    seed: u64,
) -> Result<PhantomVolume> {
    if width < MIN_SIDE || height < MIN_SIDE {
        return Err(Error::invalid(format!(
            "phantom grid must be at least {MIN_SIDE}x{MIN_SIDE} to resolve every region, got {width}x{height}"
        )));
    }
    if !snr.is_finite() || snr <= 0.0 {
        return Err(Error::invalid(format!("snr must be positive, got {snr}")));
    }
    ranges.validate()?;

    let mut region_params = [IvimParams::new(0.0, 0.0, 0.0); N_REGIONS];
    let pairs = ranges.as_pairs();
    for (r, slot) in region_params.iter_mut().enumerate() {
        let mut rng = rng_for(seed, Stream::PhantomRegion, r as u64);
        let d = rng.gen_range(pairs[0].0..=pairs[0].1);
        let f = rng.gen_range(pairs[1].0..=pairs[1].1);
        let d_star = rng.gen_range(pairs[2].0..=pairs[2].1);
        *slot = IvimParams::new(d, f, d_star);
    }

    let labels = region_label_map(width, height);
    for r in 1..=N_REGIONS as u8 {
        if !labels.contains(&r) {
            return Err(Error::Numerical(format!(
                "region {r} received no pixels on a {width}x{height} grid"
            )));
        }
    }

    let sigma = 1.0 / snr;
    let signals: Result<Vec<SignalRecord>> = (0..width * height)
        .into_par_iter()
        .map(|idx| {
            let mut rng = rng_for(seed, Stream::PhantomPixel, idx as u64);
            let label = labels[idx];
            let clean = if label == BACKGROUND {
                SignalRecord {
                    schedule: Arc::clone(schedule),
                    s: vec![0.0; schedule.len()],
                    normalized: false,
                    noisy: false,
                }
            } else {
                forward_signal(region_params[label as usize - 1], schedule, 1.0)?
            };
            let noisy = add_rician_noise_with_sigma(&clean, sigma, &mut rng)?;
            normalize_signal(&noisy)
        })
        .collect();
    let signals = signals?;

    let truth = labels
        .iter()
        .map(|&l| {
            if l == BACKGROUND {
                IvimParams::new(0.0, 0.0, 0.0)
            } else {
                region_params[l as usize - 1]
            }
        })
        .collect();

    Ok(PhantomVolume {
        width,
        height,
        snr,
        schedule: Arc::clone(schedule),
        labels,
        truth,
        signals,
        region_params,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn schedule() -> Arc<BValueSchedule> {
        Arc::new(BValueSchedule::default_protocol())
    }

    fn phantom(seed: u64) -> PhantomVolume {
        generate_phantom(76, 76, 50.0, &PriorRanges::default(), &schedule(), seed).unwrap()
    }

    #[test]
    fn all_six_regions_are_present_at_default_size() {
        let labels = region_label_map(76, 76);
        for r in 1..=6u8 {
            assert!(labels.contains(&r), "region {r} missing");
        }
    }

    #[test]
    fn all_six_regions_survive_at_the_minimum_size() {
        let labels = region_label_map(MIN_SIDE, MIN_SIDE);
        for r in 1..=6u8 {
            assert!(labels.contains(&r), "region {r} missing at {MIN_SIDE}");
        }
    }

    #[test]
    fn background_surrounds_the_shell() {
        let labels = region_label_map(76, 76);
        assert_eq!(labels[0], BACKGROUND);
        assert_eq!(labels[75], BACKGROUND);
        assert_eq!(labels[76 * 76 - 1], BACKGROUND);
        // Center of the slice sits in the interior region.
        assert_eq!(labels[38 * 76 + 38], 2);
    }

    #[test]
    fn generation_is_deterministic_and_seed_sensitive() {
        assert_eq!(phantom(21), phantom(21));
        assert_ne!(phantom(21).region_params, phantom(22).region_params);
    }

    #[test]
    fn generation_is_independent_of_worker_count() {
        let run = |threads: usize| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| phantom(33))
        };
        assert_eq!(run(1), run(2));
    }

    #[test]
    fn truth_is_constant_within_each_region() {
        let ph = phantom(4);
        for r in 1..=N_REGIONS as u8 {
            let expect = ph.region_params[r as usize - 1];
            for idx in ph.region_pixels(r) {
                assert_eq!(ph.truth[idx], expect);
            }
        }
        for (idx, &l) in ph.labels.iter().enumerate() {
            if l == BACKGROUND {
                assert_eq!(ph.truth[idx], IvimParams::new(0.0, 0.0, 0.0));
            }
        }
    }

    #[test]
    fn region_params_lie_in_the_prior() {
        let ph = phantom(10);
        let pairs = PriorRanges::default().as_pairs();
        for p in ph.region_params.iter() {
            for (v, (lo, hi)) in p.to_array().iter().zip(pairs.iter()) {
                assert!(lo <= v && v <= hi);
            }
        }
    }

    #[test]
    fn signals_are_normalized_everywhere() {
        let ph = phantom(14);
        for rec in &ph.signals {
            assert!(rec.normalized && rec.noisy);
            assert_eq!(rec.s[0], 1.0);
            assert!(rec.s.iter().all(|&s| s.is_finite() && s >= 0.0));
        }
    }

    #[test]
    fn foreground_signal_tracks_truth_at_high_snr() {
        let ph = generate_phantom(
            76,
            76,
            100_000.0,
            &PriorRanges::default(),
            &schedule(),
            8,
        )
        .unwrap();
        let idx = ph.region_pixels(2)[0];
        let truth = ph.truth[idx];
        let clean = forward_signal(truth, &schedule(), 1.0).unwrap();
        for (a, b) in ph.signals[idx].s.iter().zip(clean.s.iter()) {
            assert!((a - b).abs() < 1e-3);
        }
    }

    #[test]
    fn rejects_undersized_grids_and_bad_snr() {
        let r = PriorRanges::default();
        let s = schedule();
        assert!(generate_phantom(32, 76, 50.0, &r, &s, 0).is_err());
        assert!(generate_phantom(76, 76, 0.0, &r, &s, 0).is_err());
        assert!(generate_phantom(76, 76, -1.0, &r, &s, 0).is_err());
    }
}
