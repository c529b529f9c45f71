//! Run provenance: every artifact records which configuration and master
//! seed produced it, as `#` comment lines in CSVs and a `run_manifest.txt`
//! next to binary outputs.

use std::io::Write;
use std::path::Path;

use ivimuq_core::Result;

use crate::config::Config;

#[derive(Debug, Clone)]
pub struct Provenance {
    pub config_sha256: String,
    pub master_seed: u64,
}

impl Provenance {
    pub fn new(cfg: &Config, master_seed: u64) -> Self {
        Provenance {
            config_sha256: cfg.sha256_hex(),
            master_seed,
        }
    }

    pub fn comment_lines(&self) -> Vec<String> {
        vec![
            format!("config_sha256 = {}", self.config_sha256),
            format!("master_seed = {}", self.master_seed),
        ]
    }

    /// Writes `run_manifest.txt` into `dir` with the full effective config.
    /// Worker counts are deliberately absent: a run's outputs are
    /// byte-identical for any `--workers`, manifest included.
    pub fn write_run_manifest(
        &self,
        dir: &Path,
        command: &str,
        cfg: &Config,
        notes: &[String],
    ) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(dir.join("run_manifest.txt"))?);
        writeln!(w, "command = {command}")?;
        writeln!(w, "config_sha256 = {}", self.config_sha256)?;
        writeln!(w, "master_seed = {}", self.master_seed)?;
        for n in notes {
            writeln!(w, "{n}")?;
        }
        writeln!(w)?;
        writeln!(w, "# effective configuration")?;
        for line in cfg.canonical_string().lines() {
            writeln!(w, "# {line}")?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Writes a CSV with provenance comments, one header line, then rows.
pub fn write_csv<I>(path: &Path, prov: &Provenance, header: &str, rows: I) -> Result<()>
where
    I: IntoIterator<Item = String>,
{
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    for c in prov.comment_lines() {
        writeln!(w, "# {c}")?;
    }
    writeln!(w, "{header}")?;
    for row in rows {
        writeln!(w, "{row}")?;
    }
    w.flush()?;
    Ok(())
}
