//! Trains deep ensembles (one per head) or runs the mixture-size sweep.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;

use ivimuq_core::ndarray::Array2;
use ivimuq_core::ensemble::{train_ensemble, EnsembleConfig};
use ivimuq_core::io::{read_dataset, save_ensemble};
use ivimuq_core::{
    train as train_network, DenseNetwork, HeadKind, HeadSpec, Result, TrainConfig, TrainHistory,
};

use crate::config::Config;
use crate::provenance::{write_csv, Provenance};

/// Display and directory name of a head's model.
pub fn model_name(kind: HeadKind, k: usize) -> String {
    match kind {
        HeadKind::Mdn => format!("mdn_k{k}"),
        other => other.name().to_string(),
    }
}

#[derive(Debug)]
pub struct KSweepRow {
    pub k: usize,
    pub final_val_nll: Vec<f64>,
    pub mean: f64,
}

#[derive(Debug)]
pub struct TrainOutcome {
    /// (model name, manifest path) for each trained ensemble.
    pub ensembles: Vec<(String, PathBuf)>,
    pub histories: Vec<(String, Vec<TrainHistory>)>,
    pub ksweep: Option<Vec<KSweepRow>>,
}

pub fn run(
    cfg: &Config,
    seed: u64,
    data: &Path,
    out: &Path,
    k_sweep: bool,
    prov: &Provenance,
) -> Result<TrainOutcome> {
    std::fs::create_dir_all(out)?;
    let schedule = Arc::new(cfg.schedule()?);
    let train_set = read_dataset(&data.join("train.dataset"), &cfg.prior)?;
    let val_set = read_dataset(&data.join("val.dataset"), &cfg.prior)?;
    crate::check_schedules(schedule.values(), train_set.schedule.values(), "training dataset")?;
    crate::check_schedules(schedule.values(), val_set.schedule.values(), "validation dataset")?;
    let (x_train, y_train) = train_set.to_matrices();
    let (x_val, y_val) = val_set.to_matrices();
    drop(train_set);
    drop(val_set);

    if k_sweep {
        let rows = run_k_sweep(cfg, seed, &x_train, &y_train, &x_val, &y_val)?;
        write_csv(
            &out.join("ksweep.csv"),
            prov,
            &{
                let runs: Vec<String> = (0..cfg.train.k_sweep_runs)
                    .map(|r| format!("run{r}_val_nll"))
                    .collect();
                format!("k,mean_val_nll,{}", runs.join(","))
            },
            rows.iter().map(|r| {
                let runs: Vec<String> =
                    r.final_val_nll.iter().map(|v| format!("{v:?}")).collect();
                format!("{},{:?},{}", r.k, r.mean, runs.join(","))
            }),
        )?;
        prov.write_run_manifest(
            out,
            "train --k-sweep",
            cfg,
            &[format!("k_values = {:?}", cfg.train.k_sweep)],
        )?;
        return Ok(TrainOutcome {
            ensembles: Vec::new(),
            histories: Vec::new(),
            ksweep: Some(rows),
        });
    }

    let mut ensembles = Vec::new();
    let mut histories = Vec::new();
    for &kind in &cfg.train.heads {
        let spec = match kind {
            HeadKind::Point => HeadSpec::point(),
            HeadKind::Gaussian => HeadSpec::gaussian(),
            HeadKind::Mdn => HeadSpec::mdn(cfg.train.k),
        };
        let name = model_name(kind, cfg.train.k);
        let ens_cfg = EnsembleConfig {
            members: cfg.train.members,
            base_seed: seed,
            hidden_width: cfg.train.hidden,
            train: TrainConfig {
                learning_rate: cfg.train.learning_rate,
                batch_size: cfg.train.batch_size,
                epochs: cfg.train.epochs,
                ..TrainConfig::default()
            },
        };
        let (ens, hist) = train_ensemble(
            &spec,
            &x_train.view(),
            &y_train.view(),
            &x_val.view(),
            &y_val.view(),
            &ens_cfg,
            &schedule,
            &cfg.prior,
        )?;
        let manifest = save_ensemble(&out.join(format!("ensemble_{name}")), &ens)?;
        write_loss_csv(&out.join(format!("loss_{name}.csv")), prov, &hist)?;
        ensembles.push((name.clone(), manifest));
        histories.push((name, hist));
    }
    prov.write_run_manifest(
        out,
        "train",
        cfg,
        &[format!(
            "models = {}",
            ensembles
                .iter()
                .map(|(n, _)| n.as_str())
                .collect::<Vec<_>>()
                .join(",")
        )],
    )?;
    Ok(TrainOutcome {
        ensembles,
        histories,
        ksweep: None,
    })
}

fn write_loss_csv(path: &Path, prov: &Provenance, hist: &[TrainHistory]) -> Result<()> {
    let epochs = hist.first().map(|h| h.train_loss.len()).unwrap_or(0);
    let mut cols = vec!["epoch".to_string()];
    for j in 0..hist.len() {
        cols.push(format!("m{j}_train"));
        cols.push(format!("m{j}_val"));
    }
    write_csv(
        path,
        prov,
        &cols.join(","),
        (0..epochs).map(|e| {
            let mut row = vec![(e + 1).to_string()];
            for h in hist {
                row.push(format!("{:?}", h.train_loss[e]));
                row.push(format!("{:?}", h.val_loss[e]));
            }
            row.join(",")
        }),
    )
}

/// Trains one single network per (K, run) pair and reports final validation
/// NLL; run `r` uses seed `base + r` so members stay comparable across K.
fn run_k_sweep(
    cfg: &Config,
    seed: u64,
    x_train: &Array2<f64>,
    y_train: &Array2<f64>,
    x_val: &Array2<f64>,
    y_val: &Array2<f64>,
) -> Result<Vec<KSweepRow>> {
    let pairs: Vec<(usize, u64)> = cfg
        .train
        .k_sweep
        .iter()
        .flat_map(|&k| (0..cfg.train.k_sweep_runs).map(move |r| (k, seed.wrapping_add(r as u64))))
        .collect();
    let results: Result<Vec<f64>> = pairs
        .par_iter()
        .map(|&(k, run_seed)| {
            let spec = HeadSpec::mdn(k);
            let mut net = DenseNetwork::with_two_hidden(
                x_train.ncols(),
                cfg.train.hidden,
                spec.output_width(),
                run_seed,
            )?;
            let train_cfg = TrainConfig {
                learning_rate: cfg.train.learning_rate,
                batch_size: cfg.train.batch_size,
                epochs: cfg.train.epochs,
                seed: run_seed,
                ..TrainConfig::default()
            };
            let hist = train_network(
                &mut net,
                &|raw, labels| spec.loss_and_grad(raw, labels),
                &x_train.view(),
                &y_train.view(),
                Some((&x_val.view(), &y_val.view())),
                &train_cfg,
            )?;
            Ok(hist.final_val_loss().unwrap_or(f64::NAN))
        })
        .collect();
    let results = results?;
    let runs = cfg.train.k_sweep_runs;
    Ok(cfg
        .train
        .k_sweep
        .iter()
        .enumerate()
        .map(|(i, &k)| {
            let vals = results[i * runs..(i + 1) * runs].to_vec();
            let mean = vals.iter().sum::<f64>() / runs as f64;
            KSweepRow {
                k,
                final_val_nll: vals,
                mean,
            }
        })
        .collect())
}
