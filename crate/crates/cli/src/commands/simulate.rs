//! Builds the training corpus and the phantom test bed.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use ivimuq_core::io::{write_dataset, write_dataset_csv, write_phantom};
use ivimuq_core::{
    derive_seed, generate_phantom, sample_training_set, split_train_validation, Result, Stream,
};

use crate::config::Config;
use crate::provenance::Provenance;

#[derive(Debug)]
pub struct SimulateOutcome {
    pub train_records: usize,
    pub val_records: usize,
    /// Phantom file names with their SNR, in generation order.
    pub phantoms: Vec<(String, f64)>,
    pub out_dir: PathBuf,
}

/// Number-preserving label: integers print without a trailing `.0`.
pub fn snr_label(snr: f64) -> String {
    format!("{snr}")
}

pub fn run(
    cfg: &Config,
    seed: u64,
    out: &Path,
    csv: bool,
    prov: &Provenance,
) -> Result<SimulateOutcome> {
    std::fs::create_dir_all(out)?;
    let schedule = Arc::new(cfg.schedule()?);

    let set = sample_training_set(
        cfg.simulate.n_signals,
        &cfg.prior,
        &schedule,
        cfg.simulate.snr,
        seed,
    )?;
    let (train, val) = split_train_validation(&set, cfg.simulate.val_fraction, seed)?;
    drop(set);
    write_dataset(&out.join("train.dataset"), &train)?;
    write_dataset(&out.join("val.dataset"), &val)?;
    if csv {
        let comments = prov.comment_lines();
        write_dataset_csv(&out.join("train.csv"), &train, &comments)?;
        write_dataset_csv(&out.join("val.csv"), &val, &comments)?;
    }
    let (train_records, val_records) = (train.len(), val.len());
    drop(train);
    drop(val);

    let mut phantoms = Vec::new();
    let mut index_lines = Vec::new();
    for &snr in &cfg.simulate.phantom_snr {
        for i in 0..cfg.simulate.phantoms_per_snr {
            // Seed by within-group index: phantom i is the same tissue (and the same
            // underlying noise draws) at every SNR, so comparisons across noise levels
            // are paired rather than confounded by population differences.
            let phantom_seed = derive_seed(seed, Stream::PhantomInstance, i as u64);
            let ph = generate_phantom(
                cfg.simulate.width,
                cfg.simulate.height,
                snr,
                &cfg.prior,
                &schedule,
                phantom_seed,
            )?;
            let name = format!("phantom_snr{}_{:04}.phantom", snr_label(snr), i);
            write_phantom(&out.join(&name), &ph)?;
            index_lines.push(format!("{name} {snr:?}"));
            phantoms.push((name, snr));
        }
    }
    std::fs::write(out.join("phantom_index.txt"), index_lines.join("\n") + "\n")?;

    prov.write_run_manifest(
        out,
        "simulate",
        cfg,
        &[
            format!("train_records = {train_records}"),
            format!("val_records = {val_records}"),
            format!("phantoms = {}", phantoms.len()),
        ],
    )?;
    Ok(SimulateOutcome {
        train_records,
        val_records,
        phantoms,
        out_dir: out.to_path_buf(),
    })
}
