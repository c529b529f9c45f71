//! Property tests for the invariants the library is built around: interval
//! nesting, scoring-rule identities, variance closure, and round trips.

use std::sync::Arc;

use proptest::prelude::*;

use ivimuq_core::{
    crps_empirical, decode_mixture, decompose_uncertainty, forward_signal, loss_nll_mixture,
    miscalibration_area, picp, pinaw, pooled_mixture, prediction_interval, rng_from_seed,
    BValueSchedule, CalibrationCurve, HeadSpec, IvimParams, Mixture1d, MixturePrediction,
    PriorRanges,
};
use ivimuq_core::dataset::split_indices;
use ivimuq_core::ensemble::decompose_from_members;
use ivimuq_core::ivim::{add_rician_noise_with_sigma, normalize_signal};
use ivimuq_core::metrics::quantile_sorted;

fn finite_vec(max_len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-1.0e3..1.0e3f64, 1..max_len)
}

fn params_in_prior() -> impl Strategy<Value = IvimParams> {
    (0.0..0.003f64, 0.0..0.4f64, 0.003..0.2f64)
        .prop_map(|(d, f, d_star)| IvimParams::new(d, f, d_star))
}

fn mixture(k: usize) -> impl Strategy<Value = Mixture1d> {
    (
        prop::collection::vec(0.05..1.0f64, k),
        prop::collection::vec(0.01..0.99f64, k),
        prop::collection::vec(1.0e-4..0.5f64, k),
    )
        .prop_map(|(raw_w, means, stddevs)| {
            let total: f64 = raw_w.iter().sum();
            Mixture1d {
                weights: raw_w.iter().map(|w| w / total).collect(),
                means,
                stddevs,
            }
        })
}

fn prediction(k: usize) -> impl Strategy<Value = MixturePrediction> {
    (mixture(k), mixture(k), mixture(k)).prop_map(|(a, b, c)| MixturePrediction {
        params: [a, b, c],
    })
}

proptest! {
    #[test]
    fn quantiles_are_monotone_in_the_level(
        mut xs in finite_vec(200),
        p1 in 0.0..1.0f64,
        p2 in 0.0..1.0f64,
    ) {
        xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let (lo_p, hi_p) = if p1 <= p2 { (p1, p2) } else { (p2, p1) };
        let q_lo = quantile_sorted(&xs, lo_p).unwrap();
        let q_hi = quantile_sorted(&xs, hi_p).unwrap();
        prop_assert!(q_lo <= q_hi);
        prop_assert!(quantile_sorted(&xs, 0.0).unwrap() == xs[0]);
        prop_assert!(quantile_sorted(&xs, 1.0).unwrap() == *xs.last().unwrap());
    }

    #[test]
    fn narrower_intervals_nest_inside_wider_ones(
        xs in finite_vec(200),
        g1 in 0.1..100.0f64,
        g2 in 0.1..100.0f64,
    ) {
        let (g_lo, g_hi) = if g1 <= g2 { (g1, g2) } else { (g2, g1) };
        let (lo_n, hi_n) = prediction_interval(&xs, g_lo).unwrap();
        let (lo_w, hi_w) = prediction_interval(&xs, g_hi).unwrap();
        prop_assert!(lo_w <= lo_n);
        prop_assert!(hi_n <= hi_w);
        prop_assert!(lo_n <= hi_n);
    }

    #[test]
    fn full_coverage_interval_spans_the_samples(xs in finite_vec(200)) {
        let (lo, hi) = prediction_interval(&xs, 100.0).unwrap();
        let min = xs.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        prop_assert_eq!(lo, min);
        prop_assert_eq!(hi, max);
    }

    #[test]
    fn picp_is_a_fraction_and_closed_on_the_boundary(
        intervals in prop::collection::vec((-10.0..10.0f64, 0.0..10.0f64), 1..100),
        truths in prop::collection::vec(-15.0..15.0f64, 100),
    ) {
        let intervals: Vec<(f64, f64)> =
            intervals.iter().map(|&(lo, w)| (lo, lo + w)).collect();
        let truths = &truths[..intervals.len()];
        let cov = picp(&intervals, truths).unwrap();
        prop_assert!((0.0..=1.0).contains(&cov));
        let on_edge: Vec<f64> = intervals.iter().map(|&(lo, _)| lo).collect();
        prop_assert_eq!(picp(&intervals, &on_edge).unwrap(), 1.0);
    }

    #[test]
    fn crps_is_nonnegative_and_equivariant(
        xs in finite_vec(64),
        y in -1.0e3..1.0e3f64,
        shift in -50.0..50.0f64,
        scale in 0.01..20.0f64,
    ) {
        let base = crps_empirical(&xs, y).unwrap();
        prop_assert!(base >= 0.0);
        let shifted: Vec<f64> = xs.iter().map(|x| x + shift).collect();
        let scaled: Vec<f64> = xs.iter().map(|x| x * scale).collect();
        let s1 = crps_empirical(&shifted, y + shift).unwrap();
        let s2 = crps_empirical(&scaled, y * scale).unwrap();
        prop_assert!((s1 - base).abs() <= 1e-9 * (1.0 + base.abs()));
        prop_assert!((s2 - scale * base).abs() <= 1e-9 * (1.0 + scale * base.abs()));
    }

    #[test]
    fn crps_identity_matches_the_double_sum(xs in finite_vec(64), y in -1.0e3..1.0e3f64) {
        let fast = crps_empirical(&xs, y).unwrap();
        let n = xs.len() as f64;
        let term1: f64 = xs.iter().map(|x| (x - y).abs()).sum::<f64>() / n;
        let mut term2 = 0.0;
        for a in &xs {
            for b in &xs {
                term2 += (a - b).abs();
            }
        }
        term2 /= 2.0 * n * n;
        prop_assert!((fast - (term1 - term2)).abs() <= 1e-9 * (1.0 + fast.abs()));
    }

    #[test]
    fn pooled_variance_splits_into_au_and_eu(
        members in prop::collection::vec(prediction(3), 2..6),
    ) {
        let pooled = pooled_mixture(&members).unwrap();
        let dec = decompose_from_members(&members).unwrap();
        for p in 0..3 {
            let pooled_var = pooled.params[p].variance();
            let closed = dec.au[p] * dec.au[p] + dec.eu[p] * dec.eu[p];
            prop_assert!((pooled_var - closed).abs() <= 1e-12 * (1.0 + pooled_var));
            prop_assert!(
                (dec.total[p] - pooled_var.sqrt()).abs() <= 1e-12 * (1.0 + dec.total[p])
            );
        }
    }

    #[test]
    fn unit_normalization_round_trips(params in params_in_prior()) {
        let ranges = PriorRanges::default();
        let unit = ranges.normalize(params);
        for u in unit {
            prop_assert!((0.0..=1.0).contains(&u));
        }
        let back = ranges.denormalize(unit);
        prop_assert!((back.d - params.d).abs() <= 1e-12);
        prop_assert!((back.f - params.f).abs() <= 1e-12);
        prop_assert!((back.d_star - params.d_star).abs() <= 1e-12);
    }

    #[test]
    fn signal_decays_from_an_exact_baseline(params in params_in_prior(), s0 in 0.1..10.0f64) {
        let schedule = Arc::new(BValueSchedule::default_protocol());
        let rec = forward_signal(params, &schedule, s0).unwrap();
        prop_assert_eq!(rec.s[0], s0);
        for w in rec.s.windows(2) {
            prop_assert!(w[1] <= w[0] + 1e-15);
            prop_assert!(w[1] > 0.0);
        }
    }

    #[test]
    fn zero_noise_and_renormalization_are_identities(
        params in params_in_prior(),
        s0 in 0.5..4.0f64,
        seed in 0u64..1000,
    ) {
        let schedule = Arc::new(BValueSchedule::default_protocol());
        let clean = forward_signal(params, &schedule, s0).unwrap();
        let mut rng = rng_from_seed(seed);
        let noiseless = add_rician_noise_with_sigma(&clean, 0.0, &mut rng).unwrap();
        prop_assert_eq!(&noiseless.s, &clean.s);
        let once = normalize_signal(&noiseless).unwrap();
        let twice = normalize_signal(&once).unwrap();
        prop_assert_eq!(&once.s, &twice.s);
        prop_assert_eq!(once.s[0], 1.0);
    }

    #[test]
    fn decoded_mixtures_satisfy_the_link_constraints(
        raw in prop::collection::vec(-12.0..12.0f64, 27),
        label in (0.01..0.99f64, 0.01..0.99f64, 0.01..0.99f64),
    ) {
        let spec = HeadSpec::mdn(3);
        let pred = decode_mixture(&spec, &raw).unwrap();
        for mix in &pred.params {
            let total: f64 = mix.weights.iter().sum();
            prop_assert!((total - 1.0).abs() <= 1e-12);
            for &w in &mix.weights {
                prop_assert!(w >= 0.0);
            }
            for &m in &mix.means {
                prop_assert!((0.0..=1.0).contains(&m));
            }
            for &s in &mix.stddevs {
                prop_assert!(s >= 1e-4);
                prop_assert!(s.is_finite());
            }
        }
        let nll = loss_nll_mixture(&pred, &[label.0, label.1, label.2]);
        prop_assert!(nll.is_finite());
    }

    #[test]
    fn miscalibration_area_is_bounded_by_the_worst_level(
        obs in prop::collection::vec(0.0..1.0f64, 2..40),
    ) {
        let n = obs.len();
        let nominal: Vec<f64> = (1..=n).map(|i| i as f64 / (n as f64 + 1.0)).collect();
        let curve = CalibrationCurve::new(nominal.clone(), obs.clone()).unwrap();
        let area = miscalibration_area(&curve);
        let worst = obs
            .iter()
            .zip(nominal.iter())
            .map(|(o, n)| (o - n).abs())
            .fold(0.0f64, f64::max);
        prop_assert!(area >= 0.0);
        prop_assert!(area <= worst + 1e-12);
    }

    #[test]
    fn constant_offset_curves_integrate_to_the_offset(
        c in 0.0..0.2f64,
        n in 3usize..20,
    ) {
        let nominal: Vec<f64> = (1..=n).map(|i| 0.05 + 0.7 * i as f64 / n as f64).collect();
        let observed: Vec<f64> = nominal.iter().map(|x| x + c).collect();
        let curve = CalibrationCurve::new(nominal, observed).unwrap();
        prop_assert!((miscalibration_area(&curve) - c).abs() <= 1e-12);
    }

    #[test]
    fn pinaw_scales_with_the_reference_range(
        intervals in prop::collection::vec((-5.0..5.0f64, 0.0..3.0f64), 1..50),
        range in 0.1..10.0f64,
    ) {
        let intervals: Vec<(f64, f64)> =
            intervals.iter().map(|&(lo, w)| (lo, lo + w)).collect();
        let a = pinaw(&intervals, range).unwrap();
        let b = pinaw(&intervals, 2.0 * range).unwrap();
        prop_assert!(a >= 0.0);
        prop_assert!((a - 2.0 * b).abs() <= 1e-9 * (1.0 + a));
    }

    #[test]
    fn validation_splits_partition_the_index_range(
        n in 2usize..400,
        fraction in 0.05..0.95f64,
        seed in 0u64..500,
    ) {
        let (train, val) = split_indices(n, fraction, seed).unwrap();
        prop_assert!(!train.is_empty());
        prop_assert!(!val.is_empty());
        prop_assert_eq!(train.len() + val.len(), n);
        let mut all: Vec<usize> = train.iter().chain(val.iter()).cloned().collect();
        all.sort_unstable();
        let expect: Vec<usize> = (0..n).collect();
        prop_assert_eq!(all, expect);
        prop_assert!(train.windows(2).all(|w| w[0] < w[1]));
        prop_assert!(val.windows(2).all(|w| w[0] < w[1]));
    }
}

#[test]
fn ensemble_decomposition_closes_for_a_trained_pair() {
    use ivimuq_core::ensemble::{train_ensemble, EnsembleConfig};
    use ivimuq_core::nn::TrainConfig;
    use ndarray::Array2;
    use rand::Rng;

    let schedule = Arc::new(BValueSchedule::default_protocol());
    let mut rng = rng_from_seed(4);
    let x = Array2::from_shape_fn((32, 14), |_| rng.gen_range(0.0..1.0));
    let y = Array2::from_shape_fn((32, 3), |_| rng.gen_range(0.05..0.95));
    let cfg = EnsembleConfig {
        members: 3,
        base_seed: 11,
        hidden_width: 8,
        train: TrainConfig {
            epochs: 2,
            batch_size: 16,
            ..TrainConfig::default()
        },
    };
    let (ens, _) = train_ensemble(
        &HeadSpec::mdn(2),
        &x.view(),
        &y.view(),
        &x.view(),
        &y.view(),
        &cfg,
        &schedule,
        &PriorRanges::default(),
    )
    .unwrap();
    for i in 0..4 {
        let input: Vec<f64> = x.row(i).to_vec();
        let dec = decompose_uncertainty(&ens, &input).unwrap();
        let pooled = pooled_mixture(&ens.member_mixtures(&input).unwrap()).unwrap();
        for p in 0..3 {
            let closed = dec.au[p].powi(2) + dec.eu[p].powi(2);
            assert!((pooled.params[p].variance() - closed).abs() < 1e-12);
        }
    }
}
