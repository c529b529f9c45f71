//! Command-line front end: simulate, train, predict, evaluate, report.
//!
//! Exit codes: 0 success, 1 user error (arguments, configuration, file
//! formats, mismatched inputs), 2 numerical failure during a computation.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

use ivimuq_core::{Error, Result};

pub mod commands;
pub mod config;
pub mod provenance;

pub use config::Config;
pub use provenance::Provenance;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USER: i32 = 1;
pub const EXIT_NUMERICAL: i32 = 2;

#[derive(Parser, Debug)]
#[command(
    name = "ivimuq",
    version,
    about = "Voxelwise IVIM parameter maps with calibrated uncertainty"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug)]
pub struct Common {
    /// Configuration file; built-in defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Master seed; every random draw derives from it.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Worker threads; 0 means one per core. Results never depend on this.
    #[arg(long, default_value_t = 0)]
    pub workers: usize,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Sample a training corpus and a phantom test bed.
    Simulate {
        #[command(flatten)]
        common: Common,
        /// Also write CSV mirrors of the datasets.
        #[arg(long)]
        csv: bool,
    },
    /// Train one deep ensemble per configured head.
    Train {
        #[command(flatten)]
        common: Common,
        /// Directory written by `simulate`.
        #[arg(long)]
        data: PathBuf,
        /// Sweep mixture sizes instead of training ensembles.
        #[arg(long)]
        k_sweep: bool,
    },
    /// Map one phantom or raw volume with a trained model.
    Predict {
        #[command(flatten)]
        common: Common,
        /// Phantom file or volume sidecar.
        #[arg(long)]
        input: PathBuf,
        /// Ensemble manifest to predict with.
        #[arg(long, conflicts_with = "baseline")]
        ensemble: Option<PathBuf>,
        /// Use the segmented least-squares baseline instead.
        #[arg(long)]
        baseline: bool,
        /// Also dump pooled predictive samples.
        #[arg(long)]
        samples: bool,
    },
    /// Score every trained model against a phantom test bed.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Directory written by `simulate`.
        #[arg(long)]
        data: PathBuf,
        /// Directory written by `train`.
        #[arg(long)]
        models: PathBuf,
    },
    /// Summarize an evaluation directory as text.
    Report {
        /// Directory written by `evaluate`.
        #[arg(long)]
        evaluation: PathBuf,
        /// Optional file to write the digest to.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Compares two b-value schedules up to f32 storage rounding; some formats
/// keep b-values as f32.
pub(crate) fn check_schedules(expected: &[f64], got: &[f64], what: &str) -> Result<()> {
    let same = expected.len() == got.len()
        && expected
            .iter()
            .zip(got.iter())
            .all(|(a, b)| (*a as f32) == (*b as f32));
    if same {
        return Ok(());
    }
    let fmt = |v: &[f64]| {
        v.iter()
            .map(|b| format!("{b}"))
            .collect::<Vec<_>>()
            .join(",")
    };
    Err(Error::invalid(format!(
        "b-value schedule mismatch for {what}: configured [{}] but found [{}]",
        fmt(expected),
        fmt(got)
    )))
}

fn exit_code_for(err: &Error) -> i32 {
    match err {
        Error::NonFiniteLoss { .. } | Error::Numerical(_) => EXIT_NUMERICAL,
        _ => EXIT_USER,
    }
}

fn execute(command: Command) -> Result<()> {
    match command {
        Command::Simulate { common, csv } => {
            let cfg = Config::load(common.config.as_deref())?;
            let prov = Provenance::new(&cfg, common.seed);
            let outcome =
                commands::simulate::run(&cfg, common.seed, &common.out, csv, &prov)?;
            println!(
                "wrote {} training and {} validation records, {} phantoms -> {}",
                outcome.train_records,
                outcome.val_records,
                outcome.phantoms.len(),
                outcome.out_dir.display()
            );
            Ok(())
        }
        Command::Train {
            common,
            data,
            k_sweep,
        } => {
            let cfg = Config::load(common.config.as_deref())?;
            let prov = Provenance::new(&cfg, common.seed);
            let outcome =
                commands::train::run(&cfg, common.seed, &data, &common.out, k_sweep, &prov)?;
            if let Some(rows) = &outcome.ksweep {
                println!("mixture size sweep (mean final validation NLL):");
                for row in rows {
                    println!("  K = {:>3}: {:.6}", row.k, row.mean);
                }
            }
            for (name, hist) in &outcome.histories {
                let final_val: Vec<String> = hist
                    .iter()
                    .map(|h| format!("{:.6}", h.final_val_loss().unwrap_or(f64::NAN)))
                    .collect();
                println!("{name}: final validation loss per member [{}]", final_val.join(", "));
            }
            Ok(())
        }
        Command::Predict {
            common,
            input,
            ensemble,
            baseline,
            samples,
        } => {
            let cfg = Config::load(common.config.as_deref())?;
            let prov = Provenance::new(&cfg, common.seed);
            let outcome = commands::predict::run(
                &cfg,
                common.seed,
                &input,
                ensemble.as_deref(),
                baseline,
                samples,
                &common.out,
                &prov,
            )?;
            println!(
                "predicted {} voxels on a {}x{}x{} grid ({} background, {} masked, {} degenerate skipped; {} fits unconverged)",
                outcome.n_predicted,
                outcome.grid.0,
                outcome.grid.1,
                outcome.grid.2,
                outcome.n_skipped_background,
                outcome.n_skipped_masked,
                outcome.n_skipped_degenerate,
                outcome.n_unconverged,
            );
            println!("maps -> {}", outcome.prediction_path.display());
            if let Some(path) = &outcome.samples_path {
                println!("samples -> {}", path.display());
            }
            Ok(())
        }
        Command::Evaluate {
            common,
            data,
            models,
        } => {
            let cfg = Config::load(common.config.as_deref())?;
            let prov = Provenance::new(&cfg, common.seed);
            let outcome =
                commands::evaluate::run(&cfg, common.seed, &data, &models, &common.out, &prov)?;
            println!(
                "evaluated models [{}]: {} accuracy rows, {} calibration rows -> {}",
                outcome.models.join(", "),
                outcome.accuracy.len(),
                outcome.calibration.len(),
                outcome.out_dir.display()
            );
            Ok(())
        }
        Command::Report { evaluation, out } => {
            let digest = commands::report::run(&evaluation, out.as_deref())?;
            print!("{digest}");
            Ok(())
        }
    }
}

fn workers_of(command: &Command) -> usize {
    match command {
        Command::Simulate { common, .. }
        | Command::Train { common, .. }
        | Command::Predict { common, .. }
        | Command::Evaluate { common, .. } => common.workers,
        Command::Report { .. } => 0,
    }
}

/// Parses and runs; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_USER,
            };
            let _ = e.print();
            return code;
        }
    };
    let workers = workers_of(&cli.command);
    let result = if workers == 0 {
        execute(cli.command)
    } else {
        match rayon::ThreadPoolBuilder::new().num_threads(workers).build() {
            Ok(pool) => pool.install(|| execute(cli.command)),
            Err(e) => {
                eprintln!("error: cannot build a {workers}-thread pool: {e}");
                return EXIT_USER;
            }
        }
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code_for(&e)
        }
    }
}
