//! Contract tests against the installed binary: exit codes, refusals,
//! artifact layout, and provenance stamps.

use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_ivimuq"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary should spawn")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("no exit code")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

const TINY: &str = "\
[simulate]
n_signals = 400
phantom_snr = 25
phantoms_per_snr = 2
width = 64
height = 64

[train]
heads = gaussian,mdn
k = 2
members = 2
epochs = 3
hidden = 8

[predict]
samples_per_member = 10

[evaluate]
levels = 10,50,90
";

struct Pipeline {
    _dir: TempDir,
    config: String,
    data: String,
    models: String,
}

fn tiny_pipeline() -> Pipeline {
    let dir = TempDir::new().unwrap();
    let config = dir.path().join("tiny.ini");
    std::fs::write(&config, TINY).unwrap();
    let data = dir.path().join("data");
    let models = dir.path().join("models");
    let p = Pipeline {
        config: config.to_str().unwrap().to_string(),
        data: data.to_str().unwrap().to_string(),
        models: models.to_str().unwrap().to_string(),
        _dir: dir,
    };
    let out = run(&["simulate", "--config", &p.config, "--seed", "7", "--out", &p.data]);
    assert_eq!(code(&out), 0, "simulate failed: {}", stderr(&out));
    let out = run(&[
        "train", "--config", &p.config, "--seed", "3", "--data", &p.data, "--out", &p.models,
    ]);
    assert_eq!(code(&out), 0, "train failed: {}", stderr(&out));
    p
}

#[test]
fn help_and_version_exit_zero() {
    assert_eq!(code(&run(&["--help"])), 0);
    assert_eq!(code(&run(&["--version"])), 0);
    assert_eq!(code(&run(&["simulate", "--help"])), 0);
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(code(&run(&[])), 1);
    assert_eq!(code(&run(&["simulate", "--no-such-flag"])), 1);
    assert_eq!(code(&run(&["frobnicate"])), 1);
}

#[test]
fn missing_or_invalid_config_exits_one() {
    let dir = TempDir::new().unwrap();
    let out_dir = dir.path().join("out");
    let out = run(&[
        "simulate",
        "--config",
        "/nonexistent/nowhere.ini",
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 1);

    let bad = dir.path().join("bad.ini");
    std::fs::write(&bad, "[train]\nmembers = 1\n").unwrap();
    let out = run(&[
        "simulate",
        "--config",
        bad.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("members"));
}

#[test]
fn divergent_training_exits_two() {
    let p = tiny_pipeline();
    let blow = Path::new(&p.data).join("blow.ini");
    std::fs::write(
        &blow,
        TINY.replace("heads = gaussian,mdn", "heads = gaussian")
            .replace("epochs = 3", "epochs = 3\nlearning_rate = 1e300"),
    )
    .unwrap();
    let out_dir = Path::new(&p.data).join("blow_out");
    let out = run(&[
        "train",
        "--config",
        blow.to_str().unwrap(),
        "--data",
        &p.data,
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 2, "stderr: {}", stderr(&out));
    assert!(stderr(&out).contains("non-finite loss"));
}

#[test]
fn full_pipeline_writes_stamped_artifacts() {
    let p = tiny_pipeline();
    let dir = TempDir::new().unwrap();

    // Every dataset artifact exists and carries the provenance stamp.
    for name in ["train.dataset", "val.dataset", "phantom_index.txt", "run_manifest.txt"] {
        assert!(Path::new(&p.data).join(name).is_file(), "{name} missing");
    }
    let manifest = std::fs::read_to_string(Path::new(&p.data).join("run_manifest.txt")).unwrap();
    assert!(manifest.contains("config_sha256 = "));
    assert!(manifest.contains("master_seed = 7"));

    for name in ["ensemble_gaussian/ensemble.manifest", "ensemble_mdn_k2/ensemble.manifest"] {
        assert!(Path::new(&p.models).join(name).is_file(), "{name} missing");
    }
    let loss = std::fs::read_to_string(Path::new(&p.models).join("loss_gaussian.csv")).unwrap();
    assert!(loss.starts_with("# config_sha256 = "));
    assert!(loss.contains("\n# master_seed = 3\n"));
    assert!(loss.contains("epoch,m0_train,m0_val,m1_train,m1_val"));

    let phantom = Path::new(&p.data).join("phantom_snr25_0000.phantom");
    let pred_dir = dir.path().join("pred");
    let ens = Path::new(&p.models).join("ensemble_mdn_k2/ensemble.manifest");
    let out = run(&[
        "predict",
        "--config",
        &p.config,
        "--seed",
        "5",
        "--input",
        phantom.to_str().unwrap(),
        "--ensemble",
        ens.to_str().unwrap(),
        "--samples",
        "--out",
        pred_dir.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "predict failed: {}", stderr(&out));
    let pred = ivimuq_core::io::read_prediction(&pred_dir.join("prediction.ivuqpr")).unwrap();
    assert_eq!((pred.nx, pred.ny, pred.nz), (64, 64, 1));
    let samples = ivimuq_core::io::read_samples(&pred_dir.join("samples.ivuqsm")).unwrap();
    assert_eq!(samples.n_samples, 2 * 10);
    // Foreground voxels predicted, background NaN.
    let center = 32 * 64 + 32;
    assert!(pred.map[center][0].is_finite());
    assert!(pred.au_pct[center][2].is_finite());
    assert!(pred.map[0][0].is_nan());
    assert!(samples.has_voxel(center));
    assert!(!samples.has_voxel(0));

    let base_dir = dir.path().join("base");
    let out = run(&[
        "predict",
        "--config",
        &p.config,
        "--input",
        phantom.to_str().unwrap(),
        "--baseline",
        "--out",
        base_dir.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "baseline predict failed: {}", stderr(&out));
    let base = ivimuq_core::io::read_prediction(&base_dir.join("prediction.ivuqpr")).unwrap();
    // The classical fit has no uncertainty planes.
    assert!(base.map[center][0].is_finite());
    assert!(base.au_pct[center][0].is_nan());

    let eval_dir = dir.path().join("eval");
    let out = run(&[
        "evaluate",
        "--config",
        &p.config,
        "--seed",
        "11",
        "--data",
        &p.data,
        "--models",
        &p.models,
        "--out",
        eval_dir.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "evaluate failed: {}", stderr(&out));
    for name in [
        "accuracy.csv",
        "rcv.csv",
        "uncertainty.csv",
        "calibration.csv",
        "calibration_summary.csv",
        "sharpness.csv",
    ] {
        let text = std::fs::read_to_string(eval_dir.join(name)).unwrap();
        assert!(text.starts_with("# config_sha256 = "), "{name} lacks provenance");
        assert!(text.lines().count() > 3, "{name} has no rows");
    }
    let accuracy = std::fs::read_to_string(eval_dir.join("accuracy.csv")).unwrap();
    for model in ["gaussian", "mdn_k2", "baseline"] {
        assert!(accuracy.contains(&format!("{model},25,d,")), "no {model} rows");
        assert!(accuracy.contains(&format!("{model},all,d,")), "no pooled {model} rows");
    }

    let out = run(&["report", "--evaluation", eval_dir.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "report failed: {}", stderr(&out));
    let digest = String::from_utf8_lossy(&out.stdout).into_owned();
    assert!(digest.contains("median absolute relative error"));
    assert!(digest.contains("baseline"));
    assert!(digest.contains("mdn_k2"));
}

#[test]
fn predict_model_selection_is_strict() {
    let p = tiny_pipeline();
    let phantom = Path::new(&p.data).join("phantom_snr25_0000.phantom");
    let ens = Path::new(&p.models).join("ensemble_gaussian/ensemble.manifest");
    let dir = TempDir::new().unwrap();
    let out_dir = dir.path().join("out");

    // Both models at once is a usage error caught by the parser.
    let out = run(&[
        "predict",
        "--config",
        &p.config,
        "--input",
        phantom.to_str().unwrap(),
        "--ensemble",
        ens.to_str().unwrap(),
        "--baseline",
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 1);

    // No model at all.
    let out = run(&[
        "predict",
        "--config",
        &p.config,
        "--input",
        phantom.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("exactly one model"));

    // Samples from a model with no predictive distribution.
    let out = run(&[
        "predict",
        "--config",
        &p.config,
        "--input",
        phantom.to_str().unwrap(),
        "--baseline",
        "--samples",
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("predictive distribution"));
}

#[test]
fn schedule_mismatch_refusal_names_both_schedules() {
    let p = tiny_pipeline();
    let dir = TempDir::new().unwrap();
    // A second corpus under a protocol whose last b-value differs.
    let other_cfg = dir.path().join("other.ini");
    std::fs::write(
        &other_cfg,
        format!(
            "[acquisition]\nb_values = 0,15,60,100,150,170,190,220,280,440,560,700,850,999\n{TINY}"
        ),
    )
    .unwrap();
    let other_data = dir.path().join("other_data");
    let out = run(&[
        "simulate",
        "--config",
        other_cfg.to_str().unwrap(),
        "--out",
        other_data.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "simulate failed: {}", stderr(&out));

    let ens = Path::new(&p.models).join("ensemble_gaussian/ensemble.manifest");
    let out = run(&[
        "predict",
        "--config",
        &p.config,
        "--input",
        other_data.join("phantom_snr25_0000.phantom").to_str().unwrap(),
        "--ensemble",
        ens.to_str().unwrap(),
        "--out",
        dir.path().join("pred").to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 1);
    let err = stderr(&out);
    assert!(err.contains("schedule mismatch"), "unexpected: {err}");
    assert!(err.contains("1000"), "expected schedule missing: {err}");
    assert!(err.contains("999"), "found schedule missing: {err}");

    // The same guard protects training against a foreign corpus.
    let out = run(&[
        "train",
        "--config",
        &p.config,
        "--data",
        other_data.to_str().unwrap(),
        "--out",
        dir.path().join("models2").to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("schedule mismatch"));
}

#[test]
fn k_sweep_reports_validation_loss_per_mixture_size() {
    let p = tiny_pipeline();
    let dir = TempDir::new().unwrap();
    let sweep_cfg = dir.path().join("sweep.ini");
    std::fs::write(
        &sweep_cfg,
        "[simulate]\nn_signals = 400\n[train]\nheads = mdn\nk = 2\nmembers = 2\nepochs = 2\nhidden = 8\nk_sweep = 1,2\nk_sweep_runs = 2\n",
    )
    .unwrap();
    let sweep_out = dir.path().join("sweep");
    let out = run(&[
        "train",
        "--config",
        sweep_cfg.to_str().unwrap(),
        "--data",
        &p.data,
        "--out",
        sweep_out.to_str().unwrap(),
        "--k-sweep",
    ]);
    assert_eq!(code(&out), 0, "sweep failed: {}", stderr(&out));
    let csv = std::fs::read_to_string(sweep_out.join("ksweep.csv")).unwrap();
    let mut lines = csv.lines().filter(|l| !l.starts_with('#'));
    assert_eq!(
        lines.next().unwrap(),
        "k,mean_val_nll,run0_val_nll,run1_val_nll"
    );
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 2);
    assert!(rows[0].starts_with("1,"));
    assert!(rows[1].starts_with("2,"));
    // No ensembles are trained in sweep mode.
    assert!(!sweep_out.join("ensemble_mdn_k2").exists());
}
