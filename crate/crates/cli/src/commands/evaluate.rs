//! Scores trained models against a phantom test bed.
//!
//! Phantoms stream one at a time; per-voxel predictive samples are reduced to
//! interval hits, widths and CRPS on the spot, so memory stays flat in the
//! number of phantoms. Voxel draws are keyed by (model, phantom, voxel), so
//! results do not depend on worker count.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use ivimuq_core::ensemble::predict_voxel;
use ivimuq_core::io::{load_ensemble, read_phantom};
use ivimuq_core::metrics::{interval_from_sorted, median};
use ivimuq_core::{
    fit_segmented, miscalibration_area, rcv, rng_for, CalibrationCurve, DeepEnsemble, Error,
    IvimParams, PhantomVolume, Result, Stream, N_PARAMS, PARAM_NAMES,
};

use crate::config::Config;
use crate::provenance::{write_csv, Provenance};

#[derive(Debug, Clone)]
pub struct AccuracyRow {
    pub model: String,
    pub snr: String,
    pub param: &'static str,
    pub mdae: f64,
    pub mdb: f64,
    pub n_used: usize,
    pub n_excluded: usize,
}

#[derive(Debug, Clone)]
pub struct RcvRow {
    pub model: String,
    pub snr: String,
    pub param: &'static str,
    pub region: u8,
    pub rcv_median: f64,
    pub n_phantoms: usize,
}

#[derive(Debug, Clone)]
pub struct UncertaintyRow {
    pub model: String,
    pub snr: String,
    pub param: &'static str,
    pub au_median_pct: f64,
    pub eu_median_pct: f64,
    pub n_voxels: usize,
}

#[derive(Debug, Clone)]
pub struct CalibrationRow {
    pub model: String,
    pub snr: String,
    pub param: &'static str,
    pub level_pct: f64,
    pub observed_pct: f64,
}

#[derive(Debug, Clone)]
pub struct CalibrationSummaryRow {
    pub model: String,
    pub snr: String,
    pub param: &'static str,
    pub miscal_area: f64,
}

#[derive(Debug, Clone)]
pub struct SharpnessRow {
    pub model: String,
    pub snr: String,
    pub param: &'static str,
    pub gamma_pct: f64,
    pub pinaw: f64,
    pub crps_mean: f64,
    pub n_voxels: usize,
}

#[derive(Debug)]
pub struct EvaluateOutcome {
    pub models: Vec<String>,
    pub accuracy: Vec<AccuracyRow>,
    pub rcv: Vec<RcvRow>,
    pub uncertainty: Vec<UncertaintyRow>,
    pub calibration: Vec<CalibrationRow>,
    pub calibration_summary: Vec<CalibrationSummaryRow>,
    pub sharpness: Vec<SharpnessRow>,
    pub baseline_unconverged: usize,
    pub out_dir: PathBuf,
}

enum Model {
    Ensemble(Box<DeepEnsemble>),
    Baseline,
}

impl Model {
    fn probabilistic(&self) -> bool {
        matches!(self, Model::Ensemble(e) if e.spec.is_probabilistic())
    }
}

/// Per-(model, SNR group) running state.
struct Accum {
    rel_err: [Vec<f64>; N_PARAMS],
    n_excluded: [usize; N_PARAMS],
    au: [Vec<f64>; N_PARAMS],
    eu: [Vec<f64>; N_PARAMS],
    /// Interval hit counts, one entry per level.
    hits: Vec<[u64; N_PARAMS]>,
    n_cal: u64,
    width_sum: [f64; N_PARAMS],
    crps_sum: [f64; N_PARAMS],
    truth_unit_min: [f64; N_PARAMS],
    truth_unit_max: [f64; N_PARAMS],
    /// (region, param) -> one RCV value per phantom.
    rcv_values: BTreeMap<(u8, usize), Vec<f64>>,
    unconverged: usize,
}

impl Accum {
    fn new(n_levels: usize) -> Self {
        Accum {
            rel_err: Default::default(),
            n_excluded: [0; N_PARAMS],
            au: Default::default(),
            eu: Default::default(),
            hits: vec![[0; N_PARAMS]; n_levels],
            n_cal: 0,
            width_sum: [0.0; N_PARAMS],
            crps_sum: [0.0; N_PARAMS],
            truth_unit_min: [f64::INFINITY; N_PARAMS],
            truth_unit_max: [f64::NEG_INFINITY; N_PARAMS],
            rcv_values: BTreeMap::new(),
            unconverged: 0,
        }
    }

    fn merge_into(self, other: &mut Accum) {
        for p in 0..N_PARAMS {
            other.rel_err[p].extend(self.rel_err[p].iter());
            other.n_excluded[p] += self.n_excluded[p];
            other.au[p].extend(self.au[p].iter());
            other.eu[p].extend(self.eu[p].iter());
            other.width_sum[p] += self.width_sum[p];
            other.crps_sum[p] += self.crps_sum[p];
            other.truth_unit_min[p] = other.truth_unit_min[p].min(self.truth_unit_min[p]);
            other.truth_unit_max[p] = other.truth_unit_max[p].max(self.truth_unit_max[p]);
        }
        for (a, b) in other.hits.iter_mut().zip(self.hits.iter()) {
            for p in 0..N_PARAMS {
                a[p] += b[p];
            }
        }
        other.n_cal += self.n_cal;
        for (key, vals) in self.rcv_values {
            other.rcv_values.entry(key).or_default().extend(vals);
        }
        other.unconverged += self.unconverged;
    }
}

/// One voxel's contribution, computed in parallel then folded serially.
struct VoxelEval {
    idx: usize,
    map: IvimParams,
    au_pct: Option<[f64; N_PARAMS]>,
    eu_pct: Option<[f64; N_PARAMS]>,
    crps_phys: Option<[f64; N_PARAMS]>,
    widths_unit: Option<[f64; N_PARAMS]>,
    hits: Option<Vec<[bool; N_PARAMS]>>,
    unconverged: bool,
}

fn discover_models(models_dir: &Path) -> Result<Vec<(String, Model)>> {
    let mut out: Vec<(String, Model)> = Vec::new();
    for entry in std::fs::read_dir(models_dir)? {
        let entry = entry?;
        let manifest = entry.path().join("ensemble.manifest");
        if !manifest.is_file() {
            continue;
        }
        let dir_name = entry.file_name().to_string_lossy().into_owned();
        let name = dir_name
            .strip_prefix("ensemble_")
            .unwrap_or(&dir_name)
            .to_string();
        out.push((name, Model::Ensemble(Box::new(load_ensemble(&manifest)?))));
    }
    if out.is_empty() {
        return Err(Error::invalid(format!(
            "no ensemble manifests under {}",
            models_dir.display()
        )));
    }
    out.sort_by(|a, b| a.0.cmp(&b.0));
    out.push(("baseline".to_string(), Model::Baseline));
    Ok(out)
}

fn read_phantom_index(data: &Path) -> Result<Vec<(String, f64)>> {
    let path = data.join("phantom_index.txt");
    let text = std::fs::read_to_string(&path)
        .map_err(|e| Error::open(path.display().to_string(), e))?;
    let mut out = Vec::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let Some((name, snr)) = line.rsplit_once(' ') else {
            return Err(Error::format(path.display().to_string(), "malformed index line"));
        };
        let snr: f64 = snr
            .parse()
            .map_err(|_| Error::format(path.display().to_string(), "bad SNR value"))?;
        out.push((name.to_string(), snr));
    }
    if out.is_empty() {
        return Err(Error::format(path.display().to_string(), "empty phantom index"));
    }
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
fn evaluate_voxel(
    model: &Model,
    ph: &PhantomVolume,
    idx: usize,
    levels: &[f64],
    pinaw_gamma: f64,
    prior_widths: &[f64; N_PARAMS],
    truth_unit: &[f64; N_PARAMS],
    samples_per_member: usize,
    stream_index: u64,
    seed: u64,
) -> Result<VoxelEval> {
    match model {
        Model::Ensemble(ens) if ens.spec.is_probabilistic() => {
            let mut rng = rng_for(seed, Stream::PredictiveSample, stream_index);
            let pred = predict_voxel(
                ens,
                &ph.signals[idx].s,
                samples_per_member,
                true,
                &mut rng,
            )?;
            let draws = pred.samples.as_ref().expect("samples were requested");
            let mut crps_phys = [0.0; N_PARAMS];
            let mut widths = [0.0; N_PARAMS];
            let mut hits = vec![[false; N_PARAMS]; levels.len()];
            let mut column = vec![0.0; draws.len()];
            for p in 0..N_PARAMS {
                for (slot, draw) in column.iter_mut().zip(draws.iter()) {
                    *slot = draw[p];
                }
                column.sort_by(|a, b| a.partial_cmp(b).unwrap());
                crps_phys[p] =
                    ivimuq_core::metrics::crps_from_sorted(&column, truth_unit[p])?
                        * prior_widths[p];
                let (lo, hi) = interval_from_sorted(&column, pinaw_gamma)?;
                widths[p] = hi - lo;
                for (l, &gamma) in levels.iter().enumerate() {
                    let (lo, hi) = interval_from_sorted(&column, gamma)?;
                    hits[l][p] = lo <= truth_unit[p] && truth_unit[p] <= hi;
                }
            }
            Ok(VoxelEval {
                idx,
                map: pred.map,
                au_pct: Some(pred.au_pct),
                eu_pct: Some(pred.eu_pct),
                crps_phys: Some(crps_phys),
                widths_unit: Some(widths),
                hits: Some(hits),
                unconverged: false,
            })
        }
        Model::Ensemble(ens) => Ok(VoxelEval {
            idx,
            map: ens.predict_point(&ph.signals[idx].s)?,
            au_pct: None,
            eu_pct: None,
            crps_phys: None,
            widths_unit: None,
            hits: None,
            unconverged: false,
        }),
        Model::Baseline => {
            let fit = fit_segmented(&ph.signals[idx])?;
            Ok(VoxelEval {
                idx,
                map: fit.params,
                au_pct: None,
                eu_pct: None,
                crps_phys: None,
                widths_unit: None,
                hits: None,
                unconverged: !fit.converged,
            })
        }
    }
}

#[allow(clippy::needless_range_loop)]
fn fold_phantom(
    accum: &mut Accum,
    ph: &PhantomVolume,
    cfg: &Config,
    evals: Vec<VoxelEval>,
    probabilistic: bool,
) {
    // Per-region MAP collections feed the within-phantom dispersion measure.
    let mut region_maps: BTreeMap<u8, [Vec<f64>; N_PARAMS]> = BTreeMap::new();
    for ev in &evals {
        let truth = ph.truth[ev.idx];
        let truth_arr = truth.to_array();
        let map_arr = ev.map.to_array();
        for p in 0..N_PARAMS {
            if truth_arr[p] == 0.0 {
                accum.n_excluded[p] += 1;
            } else {
                accum.rel_err[p].push((map_arr[p] - truth_arr[p]) / truth_arr[p]);
            }
        }
        let region = ph.labels[ev.idx];
        let slots = region_maps.entry(region).or_default();
        for p in 0..N_PARAMS {
            slots[p].push(map_arr[p]);
        }
        if probabilistic {
            let unit = cfg.prior.normalize(truth);
            for p in 0..N_PARAMS {
                accum.truth_unit_min[p] = accum.truth_unit_min[p].min(unit[p]);
                accum.truth_unit_max[p] = accum.truth_unit_max[p].max(unit[p]);
            }
            if let (Some(au), Some(eu)) = (ev.au_pct, ev.eu_pct) {
                for p in 0..N_PARAMS {
                    accum.au[p].push(au[p]);
                    accum.eu[p].push(eu[p]);
                }
            }
            if let (Some(crps), Some(widths), Some(hits)) =
                (ev.crps_phys, ev.widths_unit, ev.hits.as_ref())
            {
                for p in 0..N_PARAMS {
                    accum.crps_sum[p] += crps[p];
                    accum.width_sum[p] += widths[p];
                }
                for (l, hit) in hits.iter().enumerate() {
                    for p in 0..N_PARAMS {
                        accum.hits[l][p] += hit[p] as u64;
                    }
                }
                accum.n_cal += 1;
            }
        }
        if ev.unconverged {
            accum.unconverged += 1;
        }
    }
    for (region, slots) in region_maps {
        for (p, values) in slots.iter().enumerate() {
            // A half-empty region estimate can sit at zero median; such
            // phantoms contribute no dispersion sample.
            if let Ok(v) = rcv(values) {
                accum.rcv_values.entry((region, p)).or_default().push(v);
            }
        }
    }
}

#[allow(clippy::needless_range_loop)]
fn emit_rows(out: &mut EvaluateOutcome, model: &str, snr: &str, accum: &Accum, cfg: &Config) {
    for p in 0..N_PARAMS {
        let abs: Vec<f64> = accum.rel_err[p].iter().map(|e| e.abs()).collect();
        let (mdae, mdb) = if abs.is_empty() {
            (f64::NAN, f64::NAN)
        } else {
            (median(&abs).unwrap(), median(&accum.rel_err[p]).unwrap())
        };
        out.accuracy.push(AccuracyRow {
            model: model.to_string(),
            snr: snr.to_string(),
            param: PARAM_NAMES[p],
            mdae,
            mdb,
            n_used: accum.rel_err[p].len(),
            n_excluded: accum.n_excluded[p],
        });
    }
    for (&(region, p), values) in &accum.rcv_values {
        out.rcv.push(RcvRow {
            model: model.to_string(),
            snr: snr.to_string(),
            param: PARAM_NAMES[p],
            region,
            rcv_median: median(values).unwrap_or(f64::NAN),
            n_phantoms: values.len(),
        });
    }
    if accum.au[0].is_empty() {
        return;
    }
    for p in 0..N_PARAMS {
        out.uncertainty.push(UncertaintyRow {
            model: model.to_string(),
            snr: snr.to_string(),
            param: PARAM_NAMES[p],
            au_median_pct: median(&accum.au[p]).unwrap(),
            eu_median_pct: median(&accum.eu[p]).unwrap(),
            n_voxels: accum.au[p].len(),
        });
    }
    if accum.n_cal == 0 {
        return;
    }
    let n = accum.n_cal as f64;
    for p in 0..N_PARAMS {
        let nominal: Vec<f64> = cfg.evaluate.levels.iter().map(|l| l / 100.0).collect();
        let observed: Vec<f64> = accum.hits.iter().map(|h| h[p] as f64 / n).collect();
        for (l, &gamma) in cfg.evaluate.levels.iter().enumerate() {
            out.calibration.push(CalibrationRow {
                model: model.to_string(),
                snr: snr.to_string(),
                param: PARAM_NAMES[p],
                level_pct: gamma,
                observed_pct: 100.0 * observed[l],
            });
        }
        let curve = CalibrationCurve::new(nominal, observed)
            .expect("levels are validated at config load");
        out.calibration_summary.push(CalibrationSummaryRow {
            model: model.to_string(),
            snr: snr.to_string(),
            param: PARAM_NAMES[p],
            miscal_area: miscalibration_area(&curve),
        });
        // Mean interval width over the spread of true values; truths span the
        // phantom draws, so the range is strictly positive in practice.
        let range = accum.truth_unit_max[p] - accum.truth_unit_min[p];
        let pinaw = if range > 0.0 {
            (accum.width_sum[p] / n) / range
        } else {
            f64::NAN
        };
        out.sharpness.push(SharpnessRow {
            model: model.to_string(),
            snr: snr.to_string(),
            param: PARAM_NAMES[p],
            gamma_pct: cfg.evaluate.pinaw_gamma,
            pinaw,
            crps_mean: accum.crps_sum[p] / n,
            n_voxels: accum.n_cal as usize,
        });
    }
}

pub fn run(
    cfg: &Config,
    seed: u64,
    data: &Path,
    models_dir: &Path,
    out: &Path,
    prov: &Provenance,
) -> Result<EvaluateOutcome> {
    std::fs::create_dir_all(out)?;
    let schedule = cfg.schedule()?;
    let models = discover_models(models_dir)?;
    for (name, model) in &models {
        if let Model::Ensemble(ens) = model {
            crate::check_schedules(
                schedule.values(),
                ens.schedule.values(),
                &format!("ensemble '{name}'"),
            )?;
            if ens.ranges != cfg.prior {
                return Err(Error::invalid(format!(
                    "ensemble '{name}' was trained with prior {:?} but the configuration says {:?}",
                    ens.ranges.as_pairs(),
                    cfg.prior.as_pairs()
                )));
            }
        }
    }
    let index = read_phantom_index(data)?;
    let mut groups: Vec<(f64, Vec<(usize, String)>)> = Vec::new();
    for (i, (name, snr)) in index.iter().enumerate() {
        match groups.iter_mut().find(|(s, _)| s == snr) {
            Some((_, members)) => members.push((i, name.clone())),
            None => groups.push((*snr, vec![(i, name.clone())])),
        }
    }

    let n_levels = cfg.evaluate.levels.len();
    let prior_widths = cfg.prior.widths();
    let mut outcome = EvaluateOutcome {
        models: models.iter().map(|(n, _)| n.clone()).collect(),
        accuracy: Vec::new(),
        rcv: Vec::new(),
        uncertainty: Vec::new(),
        calibration: Vec::new(),
        calibration_summary: Vec::new(),
        sharpness: Vec::new(),
        baseline_unconverged: 0,
        out_dir: out.to_path_buf(),
    };
    let mut all_accums: Vec<Accum> = models.iter().map(|_| Accum::new(n_levels)).collect();
    let n_phantoms_total = index.len() as u64;

    for (snr, members) in &groups {
        let snr_label = format!("{snr}");
        let mut group_accums: Vec<Accum> = models.iter().map(|_| Accum::new(n_levels)).collect();
        for (phantom_idx, name) in members {
            let ph = read_phantom(&data.join(name))?;
            crate::check_schedules(schedule.values(), ph.schedule.values(), name)?;
            let included: Vec<usize> = (0..ph.n_pixels())
                .filter(|&i| ph.labels[i] != 0)
                .collect();
            let truth_units: Vec<[f64; N_PARAMS]> = included
                .iter()
                .map(|&i| cfg.prior.normalize(ph.truth[i]))
                .collect();
            for (m, (_, model)) in models.iter().enumerate() {
                let evals: Result<Vec<VoxelEval>> = included
                    .par_iter()
                    .zip(truth_units.par_iter())
                    .map(|(&idx, unit)| {
                        let stream_index = (m as u64 * n_phantoms_total
                            + *phantom_idx as u64)
                            * ph.n_pixels() as u64
                            + idx as u64;
                        evaluate_voxel(
                            model,
                            &ph,
                            idx,
                            &cfg.evaluate.levels,
                            cfg.evaluate.pinaw_gamma,
                            &prior_widths,
                            unit,
                            cfg.predict.samples_per_member,
                            stream_index,
                            seed,
                        )
                    })
                    .collect();
                fold_phantom(&mut group_accums[m], &ph, cfg, evals?, model.probabilistic());
            }
        }
        for (m, (name, _)) in models.iter().enumerate() {
            emit_rows(&mut outcome, name, &snr_label, &group_accums[m], cfg);
        }
        for (m, accum) in group_accums.into_iter().enumerate() {
            accum.merge_into(&mut all_accums[m]);
        }
    }
    for (m, (name, _)) in models.iter().enumerate() {
        emit_rows(&mut outcome, name, "all", &all_accums[m], cfg);
        outcome.baseline_unconverged += all_accums[m].unconverged;
    }

    write_outputs(&mut outcome, cfg, prov)?;
    Ok(outcome)
}

fn write_outputs(outcome: &mut EvaluateOutcome, cfg: &Config, prov: &Provenance) -> Result<()> {
    let out = outcome.out_dir.clone();
    write_csv(
        &out.join("accuracy.csv"),
        prov,
        "model,snr,param,mdae,mdb,n_used,n_excluded",
        outcome.accuracy.iter().map(|r| {
            format!(
                "{},{},{},{:?},{:?},{},{}",
                r.model, r.snr, r.param, r.mdae, r.mdb, r.n_used, r.n_excluded
            )
        }),
    )?;
    write_csv(
        &out.join("rcv.csv"),
        prov,
        "model,snr,param,region,rcv_median,n_phantoms",
        outcome.rcv.iter().map(|r| {
            format!(
                "{},{},{},{},{:?},{}",
                r.model, r.snr, r.param, r.region, r.rcv_median, r.n_phantoms
            )
        }),
    )?;
    write_csv(
        &out.join("uncertainty.csv"),
        prov,
        "model,snr,param,au_median_pct,eu_median_pct,n_voxels",
        outcome.uncertainty.iter().map(|r| {
            format!(
                "{},{},{},{:?},{:?},{}",
                r.model, r.snr, r.param, r.au_median_pct, r.eu_median_pct, r.n_voxels
            )
        }),
    )?;
    write_csv(
        &out.join("calibration.csv"),
        prov,
        "model,snr,param,level_pct,observed_pct",
        outcome.calibration.iter().map(|r| {
            format!(
                "{},{},{},{:?},{:?}",
                r.model, r.snr, r.param, r.level_pct, r.observed_pct
            )
        }),
    )?;
    write_csv(
        &out.join("calibration_summary.csv"),
        prov,
        "model,snr,param,miscal_area",
        outcome.calibration_summary.iter().map(|r| {
            format!("{},{},{},{:?}", r.model, r.snr, r.param, r.miscal_area)
        }),
    )?;
    write_csv(
        &out.join("sharpness.csv"),
        prov,
        "model,snr,param,gamma_pct,pinaw,crps_mean,n_voxels",
        outcome.sharpness.iter().map(|r| {
            format!(
                "{},{},{},{:?},{:?},{:?},{}",
                r.model, r.snr, r.param, r.gamma_pct, r.pinaw, r.crps_mean, r.n_voxels
            )
        }),
    )?;
    prov.write_run_manifest(
        &out,
        "evaluate",
        cfg,
        &[
            format!("models = {}", outcome.models.join(",")),
            format!("baseline_unconverged = {}", outcome.baseline_unconverged),
        ],
    )?;
    Ok(())
}
