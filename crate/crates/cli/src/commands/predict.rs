//! Produces parameter and uncertainty maps for one phantom or raw volume.

use std::io::Read;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;

use ivimuq_core::io::{
    load_ensemble, read_phantom, read_volume, write_prediction, write_samples,
    PredictionVolume, SampleVolume, VolumeInput,
};
use ivimuq_core::{
    fit_segmented, normalize_signal, rng_for, DeepEnsemble, Error, IvimParams, PhantomVolume,
    Result, SignalRecord, Stream, N_PARAMS,
};
use ivimuq_core::ensemble::predict_voxel;

use crate::config::Config;
use crate::provenance::Provenance;

pub enum PredictInput {
    Phantom(PhantomVolume),
    Volume(VolumeInput),
}

impl PredictInput {
    pub fn grid(&self) -> (usize, usize, usize) {
        match self {
            PredictInput::Phantom(ph) => (ph.width, ph.height, 1),
            PredictInput::Volume(v) => (v.nx, v.ny, v.nz),
        }
    }

    pub fn schedule(&self) -> &Arc<ivimuq_core::BValueSchedule> {
        match self {
            PredictInput::Phantom(ph) => &ph.schedule,
            PredictInput::Volume(v) => &v.schedule,
        }
    }

    fn n_voxels(&self) -> usize {
        let (nx, ny, nz) = self.grid();
        nx * ny * nz
    }
}

/// Phantom files are sniffed by magic; anything else is read as a sidecar.
pub fn load_input(path: &Path) -> Result<PredictInput> {
    let mut head = [0u8; 7];
    let n = std::fs::File::open(path)
        .map_err(|e| Error::open(path.display().to_string(), e))?
        .read(&mut head)?;
    if n == 7 && &head == b"IVUQPH1" {
        Ok(PredictInput::Phantom(read_phantom(path)?))
    } else {
        Ok(PredictInput::Volume(read_volume(path)?))
    }
}

#[derive(Debug)]
pub struct PredictOutcome {
    pub grid: (usize, usize, usize),
    pub n_predicted: usize,
    pub n_skipped_background: usize,
    pub n_skipped_masked: usize,
    pub n_skipped_degenerate: usize,
    /// Baseline fits that ended at a partial estimate.
    pub n_unconverged: usize,
    pub prediction_path: PathBuf,
    pub samples_path: Option<PathBuf>,
}

enum Model {
    Ensemble(Box<DeepEnsemble>),
    Baseline,
}

enum VoxelOutcome {
    SkippedBackground,
    SkippedMasked,
    SkippedDegenerate,
    Predicted {
        map: IvimParams,
        au_pct: Option<[f64; N_PARAMS]>,
        eu_pct: Option<[f64; N_PARAMS]>,
        samples: Option<Vec<[f64; N_PARAMS]>>,
        unconverged: bool,
    },
}

/// Prepares one voxel's normalized record, or the reason it is skipped.
fn voxel_record(input: &PredictInput, idx: usize) -> Result<std::result::Result<SignalRecord, VoxelOutcome>> {
    match input {
        PredictInput::Phantom(ph) => {
            if ph.labels[idx] == 0 {
                return Ok(Err(VoxelOutcome::SkippedBackground));
            }
            Ok(Ok(ph.signals[idx].clone()))
        }
        PredictInput::Volume(v) => {
            if !v.included(idx) {
                return Ok(Err(VoxelOutcome::SkippedMasked));
            }
            let s: Vec<f64> = v.voxel_signal(idx).iter().map(|&x| x as f64).collect();
            if s.iter().any(|x| !x.is_finite()) {
                return Ok(Err(VoxelOutcome::SkippedDegenerate));
            }
            let record = SignalRecord {
                schedule: Arc::clone(&v.schedule),
                s,
                normalized: false,
                noisy: true,
            };
            match normalize_signal(&record) {
                Ok(normalized) => Ok(Ok(normalized)),
                Err(Error::DegenerateVoxel(_)) => Ok(Err(VoxelOutcome::SkippedDegenerate)),
                Err(e) => Err(e),
            }
        }
    }
}

fn predict_one(
    model: &Model,
    record: &SignalRecord,
    seed: u64,
    idx: usize,
    samples_per_member: usize,
    with_samples: bool,
) -> Result<VoxelOutcome> {
    match model {
        Model::Ensemble(ens) => {
            if ens.spec.is_probabilistic() {
                let mut rng = rng_for(seed, Stream::PredictiveSample, idx as u64);
                let pred =
                    predict_voxel(ens, &record.s, samples_per_member, with_samples, &mut rng)?;
                Ok(VoxelOutcome::Predicted {
                    map: pred.map,
                    au_pct: Some(pred.au_pct),
                    eu_pct: Some(pred.eu_pct),
                    samples: pred.samples,
                    unconverged: false,
                })
            } else {
                Ok(VoxelOutcome::Predicted {
                    map: ens.predict_point(&record.s)?,
                    au_pct: None,
                    eu_pct: None,
                    samples: None,
                    unconverged: false,
                })
            }
        }
        Model::Baseline => {
            let fit = fit_segmented(record)?;
            Ok(VoxelOutcome::Predicted {
                map: fit.params,
                au_pct: None,
                eu_pct: None,
                samples: None,
                unconverged: !fit.converged,
            })
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub fn run(
    cfg: &Config,
    seed: u64,
    input_path: &Path,
    ensemble: Option<&Path>,
    baseline: bool,
    samples: bool,
    out: &Path,
    prov: &Provenance,
) -> Result<PredictOutcome> {
    std::fs::create_dir_all(out)?;
    let input = load_input(input_path)?;
    let model = match (ensemble, baseline) {
        (Some(manifest), false) => Model::Ensemble(Box::new(load_ensemble(manifest)?)),
        (None, true) => Model::Baseline,
        _ => {
            return Err(Error::invalid(
                "pick exactly one model: --ensemble <manifest> or --baseline",
            ))
        }
    };
    if let Model::Ensemble(ens) = &model {
        crate::check_schedules(ens.schedule.values(), input.schedule().values(), "input volume")?;
    }
    let with_samples = match &model {
        Model::Ensemble(ens) if ens.spec.is_probabilistic() => samples,
        _ if samples => {
            return Err(Error::invalid(
                "--samples needs a probabilistic ensemble; this model has no predictive distribution",
            ))
        }
        _ => false,
    };

    let n = input.n_voxels();
    let per_member = cfg.predict.samples_per_member;
    let outcomes: Result<Vec<VoxelOutcome>> = (0..n)
        .into_par_iter()
        .map(|idx| match voxel_record(&input, idx)? {
            Err(skip) => Ok(skip),
            Ok(record) => predict_one(&model, &record, seed, idx, per_member, with_samples),
        })
        .collect();
    let outcomes = outcomes?;

    let (nx, ny, nz) = input.grid();
    let mut pred = PredictionVolume::empty(nx, ny, nz);
    let n_pooled_samples = match &model {
        Model::Ensemble(ens) => ens.m() * per_member,
        Model::Baseline => 0,
    };
    let mut sample_vol = if with_samples {
        Some(SampleVolume::empty(nx, ny, nz, n_pooled_samples))
    } else {
        None
    };
    let mut outcome = PredictOutcome {
        grid: (nx, ny, nz),
        n_predicted: 0,
        n_skipped_background: 0,
        n_skipped_masked: 0,
        n_skipped_degenerate: 0,
        n_unconverged: 0,
        prediction_path: out.join("prediction.ivuqpr"),
        samples_path: with_samples.then(|| out.join("samples.ivuqsm")),
    };
    for (idx, vox) in outcomes.into_iter().enumerate() {
        match vox {
            VoxelOutcome::SkippedBackground => outcome.n_skipped_background += 1,
            VoxelOutcome::SkippedMasked => outcome.n_skipped_masked += 1,
            VoxelOutcome::SkippedDegenerate => outcome.n_skipped_degenerate += 1,
            VoxelOutcome::Predicted {
                map,
                au_pct,
                eu_pct,
                samples,
                unconverged,
            } => {
                outcome.n_predicted += 1;
                if unconverged {
                    outcome.n_unconverged += 1;
                }
                pred.map[idx] = [map.d as f32, map.f as f32, map.d_star as f32];
                if let Some(au) = au_pct {
                    pred.au_pct[idx] = [au[0] as f32, au[1] as f32, au[2] as f32];
                }
                if let Some(eu) = eu_pct {
                    pred.eu_pct[idx] = [eu[0] as f32, eu[1] as f32, eu[2] as f32];
                }
                if let (Some(vol), Some(draws)) = (sample_vol.as_mut(), samples) {
                    vol.set_voxel(idx, &draws)?;
                }
            }
        }
    }

    write_prediction(&outcome.prediction_path, &pred)?;
    if let (Some(vol), Some(path)) = (sample_vol.as_ref(), outcome.samples_path.as_ref()) {
        write_samples(path, vol)?;
    }
    prov.write_run_manifest(
        out,
        "predict",
        cfg,
        &[
            format!("input = {}", input_path.display()),
            format!(
                "model = {}",
                match &model {
                    Model::Ensemble(e) => e.spec.kind.name(),
                    Model::Baseline => "baseline",
                }
            ),
            format!("predicted = {}", outcome.n_predicted),
            format!("skipped_background = {}", outcome.n_skipped_background),
            format!("skipped_masked = {}", outcome.n_skipped_masked),
            format!("skipped_degenerate = {}", outcome.n_skipped_degenerate),
            format!("unconverged = {}", outcome.n_unconverged),
        ],
    )?;
    Ok(outcome)
}
