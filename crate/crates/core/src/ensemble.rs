//! Deep ensembles: M identically configured networks differing only in
//! initialization and batch-shuffle seeds, pooled into one predictive
//! mixture per voxel.
//!
//! Pooling averages member mixtures with uniform weight 1/M. Uncertainty
//! splits by the law of total variance: aleatoric variance is the mean of
//! member predictive variances, epistemic variance is the population variance
//! of member predictive means; their sum is exactly the pooled variance.

use std::sync::Arc;

use ndarray::ArrayView2;
use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::heads::{
    decode_head, decode_mixture, map_point_estimate, sample_prediction, Decoded, HeadSpec,
    Mixture1d, MixturePrediction,
};
use crate::ivim::{BValueSchedule, IvimParams, PriorRanges, N_PARAMS};
use crate::nn::{train, DenseNetwork, TrainConfig, TrainHistory};

/// Ensemble-level settings; `train` holds the per-member optimizer setup.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleConfig {
    /// Member count M; at least two, else epistemic variance is meaningless.
    pub members: usize,
    /// Member j trains with seed `base_seed + j` for both init and shuffling.
    pub base_seed: u64,
    pub hidden_width: usize,
    pub train: TrainConfig,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        EnsembleConfig {
            members: 5,
            base_seed: 0,
            hidden_width: 64,
            train: TrainConfig::default(),
        }
    }
}

impl EnsembleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.members < 2 {
            return Err(Error::invalid(format!(
                "an ensemble needs at least two members, got {}",
                self.members
            )));
        }
        if self.hidden_width == 0 {
            return Err(Error::invalid("hidden width must be positive"));
        }
        self.train.validate()
    }
}

/// Trained ensemble plus everything needed to interpret its outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct DeepEnsemble {
    pub spec: HeadSpec,
    pub ranges: PriorRanges,
    pub schedule: Arc<BValueSchedule>,
    pub members: Vec<DenseNetwork>,
    pub member_seeds: Vec<u64>,
}

impl DeepEnsemble {
    pub fn m(&self) -> usize {
        self.members.len()
    }

    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        self.ranges.validate()?;
        if self.members.is_empty() {
            return Err(Error::invalid("ensemble has no members"));
        }
        if self.member_seeds.len() != self.members.len() {
            return Err(Error::invalid("member seed list does not match members"));
        }
        for net in &self.members {
            if net.n_inputs() != self.schedule.len() {
                return Err(Error::invalid(format!(
                    "member expects {} inputs but the schedule has {} b-values",
                    net.n_inputs(),
                    self.schedule.len()
                )));
            }
            if net.n_outputs() != self.spec.output_width() {
                return Err(Error::invalid(format!(
                    "member emits {} outputs but the {} head needs {}",
                    net.n_outputs(),
                    self.spec.kind.name(),
                    self.spec.output_width()
                )));
            }
        }
        Ok(())
    }

    /// Decoded predictive mixture of every member for one normalized signal.
    pub fn member_mixtures(&self, x: &[f64]) -> Result<Vec<MixturePrediction>> {
        if !self.spec.is_probabilistic() {
            return Err(Error::invalid("point head emits no distribution"));
        }
        self.members
            .iter()
            .map(|net| decode_mixture(&self.spec, &net.forward_one(x)?))
            .collect()
    }

    /// Member-averaged point estimate for a point-head ensemble.
    pub fn predict_point(&self, x: &[f64]) -> Result<IvimParams> {
        if self.spec.is_probabilistic() {
            return Err(Error::invalid(
                "probabilistic ensembles use the pooled MAP estimate",
            ));
        }
        let mut acc = [0.0; N_PARAMS];
        for net in &self.members {
            match decode_head(&self.spec, &net.forward_one(x)?)? {
                Decoded::Point(p) => {
                    for (a, v) in acc.iter_mut().zip(p.iter()) {
                        *a += v;
                    }
                }
                Decoded::Mixture(_) => unreachable!("point head decodes to a point"),
            }
        }
        let m = self.m() as f64;
        Ok(self.ranges.denormalize([acc[0] / m, acc[1] / m, acc[2] / m]))
    }
}

/// Trains M members over the same data; only seeds differ between members.
#[allow(clippy::too_many_arguments)]
pub fn train_ensemble(
    spec: &HeadSpec,
    x_train: &ArrayView2<f64>,
    y_train: &ArrayView2<f64>,
    x_val: &ArrayView2<f64>,
    y_val: &ArrayView2<f64>,
    cfg: &EnsembleConfig,
    schedule: &Arc<BValueSchedule>,
    ranges: &PriorRanges,
) -> Result<(DeepEnsemble, Vec<TrainHistory>)> {
    spec.validate()?;
    cfg.validate()?;
    ranges.validate()?;
    if x_train.ncols() != schedule.len() {
        return Err(Error::invalid(format!(
            "training inputs have {} columns but the schedule has {} b-values",
            x_train.ncols(),
            schedule.len()
        )));
    }
    let member_seeds: Vec<u64> = (0..cfg.members)
        .map(|j| cfg.base_seed.wrapping_add(j as u64))
        .collect();
    let results: Result<Vec<(DenseNetwork, TrainHistory)>> = member_seeds
        .par_iter()
        .map(|&seed| {
            let mut net = DenseNetwork::with_two_hidden(
                schedule.len(),
                cfg.hidden_width,
                spec.output_width(),
                seed,
            )?;
            let member_cfg = TrainConfig { seed, ..cfg.train.clone() };
            let history = train(
                &mut net,
                &|raw, labels| spec.loss_and_grad(raw, labels),
                x_train,
                y_train,
                Some((x_val, y_val)),
                &member_cfg,
            )?;
            Ok((net, history))
        })
        .collect();
    let results = results?;
    let mut members = Vec::with_capacity(cfg.members);
    let mut histories = Vec::with_capacity(cfg.members);
    for (net, hist) in results {
        members.push(net);
        histories.push(hist);
    }
    let ensemble = DeepEnsemble {
        spec: *spec,
        ranges: *ranges,
        schedule: Arc::clone(schedule),
        members,
        member_seeds,
    };
    ensemble.validate()?;
    Ok((ensemble, histories))
}

/// Uniform mixture over member mixtures; components keep member-major order
/// and weights are scaled by 1/M.
pub fn pooled_mixture(members: &[MixturePrediction]) -> Result<MixturePrediction> {
    if members.is_empty() {
        return Err(Error::invalid("cannot pool zero member predictions"));
    }
    let m = members.len() as f64;
    let pool_param = |p: usize| -> Mixture1d {
        let mut weights = Vec::new();
        let mut means = Vec::new();
        let mut stddevs = Vec::new();
        for member in members {
            let mix = &member.params[p];
            weights.extend(mix.weights.iter().map(|w| w / m));
            means.extend(mix.means.iter().copied());
            stddevs.extend(mix.stddevs.iter().copied());
        }
        Mixture1d { weights, means, stddevs }
    };
    Ok(MixturePrediction {
        params: [pool_param(0), pool_param(1), pool_param(2)],
    })
}

/// Aleatoric / epistemic split in unit space, as standard deviations.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UncertaintyDecomposition {
    pub au: [f64; N_PARAMS],
    pub eu: [f64; N_PARAMS],
    /// sqrt(au^2 + eu^2); equals the pooled mixture's stddev.
    pub total: [f64; N_PARAMS],
}

/// Splits predictive uncertainty from member mixtures via closed-form
/// mixture moments; no sampling involved.
pub fn decompose_from_members(members: &[MixturePrediction]) -> Result<UncertaintyDecomposition> {
    if members.is_empty() {
        return Err(Error::invalid("cannot decompose zero member predictions"));
    }
    let m = members.len() as f64;
    let mut au = [0.0; N_PARAMS];
    let mut eu = [0.0; N_PARAMS];
    let mut total = [0.0; N_PARAMS];
    for p in 0..N_PARAMS {
        let means: Vec<f64> = members.iter().map(|mp| mp.params[p].mean()).collect();
        let vars: Vec<f64> = members.iter().map(|mp| mp.params[p].variance()).collect();
        let grand = means.iter().sum::<f64>() / m;
        let au2 = vars.iter().sum::<f64>() / m;
        let eu2 = means.iter().map(|mu| (mu - grand) * (mu - grand)).sum::<f64>() / m;
        au[p] = au2.sqrt();
        eu[p] = eu2.sqrt();
        total[p] = (au2 + eu2).sqrt();
    }
    Ok(UncertaintyDecomposition { au, eu, total })
}

/// Uncertainty decomposition for one normalized signal.
pub fn decompose_uncertainty(ens: &DeepEnsemble, x: &[f64]) -> Result<UncertaintyDecomposition> {
    decompose_from_members(&ens.member_mixtures(x)?)
}

/// Draws exactly `s_per_member` unit-space triples from every member and
/// concatenates them member-major: M * s_per_member samples in total.
pub fn pooled_sample<R: Rng + ?Sized>(
    ens: &DeepEnsemble,
    x: &[f64],
    s_per_member: usize,
    rng: &mut R,
) -> Result<Vec<[f64; N_PARAMS]>> {
    if s_per_member == 0 {
        return Err(Error::invalid("need at least one sample per member"));
    }
    let mixtures = ens.member_mixtures(x)?;
    let mut out = Vec::with_capacity(mixtures.len() * s_per_member);
    for mix in &mixtures {
        out.extend(sample_prediction(mix, s_per_member, rng));
    }
    Ok(out)
}

/// Everything the pipeline reports for one voxel.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsemblePrediction {
    /// Pooled-mixture MAP estimate, physical units.
    pub map: IvimParams,
    /// Aleatoric stddev as percent of the prior range width, per parameter.
    pub au_pct: [f64; N_PARAMS],
    /// Epistemic stddev, same convention.
    pub eu_pct: [f64; N_PARAMS],
    /// Total predictive stddev, same convention.
    pub total_pct: [f64; N_PARAMS],
    /// Unit-space pooled samples, member-major, when requested.
    pub samples: Option<Vec<[f64; N_PARAMS]>>,
}

/// Full prediction for one normalized signal from a probabilistic ensemble.
///
/// Unit-space standard deviations are exactly "stddev / prior width", so the
/// percent figures are 100 times the unit-space values.
pub fn predict_voxel<R: Rng + ?Sized>(
    ens: &DeepEnsemble,
    x: &[f64],
    s_per_member: usize,
    with_samples: bool,
    rng: &mut R,
) -> Result<EnsemblePrediction> {
    let mixtures = ens.member_mixtures(x)?;
    let pooled = pooled_mixture(&mixtures)?;
    let map = map_point_estimate(&pooled, &ens.ranges);
    let dec = decompose_from_members(&mixtures)?;
    let pct = |v: [f64; N_PARAMS]| [v[0] * 100.0, v[1] * 100.0, v[2] * 100.0];
    let samples = if with_samples {
        let mut out = Vec::with_capacity(mixtures.len() * s_per_member);
        for mix in &mixtures {
            out.extend(sample_prediction(mix, s_per_member, rng));
        }
        Some(out)
    } else {
        None
    };
    Ok(EnsemblePrediction {
        map,
        au_pct: pct(dec.au),
        eu_pct: pct(dec.eu),
        total_pct: pct(dec.total),
        samples,
    })
}
