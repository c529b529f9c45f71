//! Renders an evaluation directory as a plain-text digest.

use std::collections::BTreeMap;
use std::path::Path;

use ivimuq_core::{Error, Result, PARAM_NAMES};

fn read_csv(path: &Path) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::open(path.display().to_string(), e))?;
    let mut header = Vec::new();
    let mut rows = Vec::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let cells: Vec<String> = line.split(',').map(|c| c.to_string()).collect();
        if header.is_empty() {
            header = cells;
        } else {
            rows.push(cells);
        }
    }
    if header.is_empty() {
        return Err(Error::format(path.display().to_string(), "no header line"));
    }
    Ok((header, rows))
}

fn column(header: &[String], name: &str, path: &Path) -> Result<usize> {
    header
        .iter()
        .position(|h| h == name)
        .ok_or_else(|| Error::format(path.display().to_string(), format!("missing column {name}")))
}

/// (model, snr) -> per-parameter value, pivoted from long-format rows.
type Pivot = BTreeMap<(String, String), [f64; 3]>;

fn pivot(path: &Path, value_col: &str) -> Result<Pivot> {
    let (header, rows) = read_csv(path)?;
    let (m, s, p, v) = (
        column(&header, "model", path)?,
        column(&header, "snr", path)?,
        column(&header, "param", path)?,
        column(&header, value_col, path)?,
    );
    let mut out = Pivot::new();
    for row in rows {
        let param_idx = PARAM_NAMES
            .iter()
            .position(|n| *n == row[p])
            .ok_or_else(|| Error::format(path.display().to_string(), "unknown parameter"))?;
        let value: f64 = row[v]
            .parse()
            .map_err(|_| Error::format(path.display().to_string(), "bad value"))?;
        out.entry((row[m].clone(), row[s].clone())).or_insert([f64::NAN; 3])[param_idx] = value;
    }
    Ok(out)
}

fn snr_sort_key(snr: &str) -> (u8, f64) {
    match snr.parse::<f64>() {
        Ok(v) => (0, v),
        Err(_) => (1, f64::INFINITY),
    }
}

fn render_table(title: &str, unit: &str, data: &Pivot, scale: f64) -> String {
    let mut keys: Vec<&(String, String)> = data.keys().collect();
    keys.sort_by(|a, b| {
        a.0.cmp(&b.0)
            .then(snr_sort_key(&a.1).partial_cmp(&snr_sort_key(&b.1)).unwrap())
    });
    let mut s = format!("{title} ({unit})\n");
    s.push_str(&format!(
        "  {:<12} {:>6} {:>10} {:>10} {:>10}\n",
        "model", "snr", "d", "f", "d_star"
    ));
    for key in keys {
        let v = data[key];
        s.push_str(&format!(
            "  {:<12} {:>6} {:>10.4} {:>10.4} {:>10.4}\n",
            key.0,
            key.1,
            v[0] * scale,
            v[1] * scale,
            v[2] * scale
        ));
    }
    s.push('\n');
    s
}

pub fn run(evaluation: &Path, out: Option<&Path>) -> Result<String> {
    let mut digest = String::from("evaluation digest\n\n");
    digest.push_str(&render_table(
        "parameter accuracy, median absolute relative error",
        "percent",
        &pivot(&evaluation.join("accuracy.csv"), "mdae")?,
        100.0,
    ));
    digest.push_str(&render_table(
        "median relative bias",
        "percent",
        &pivot(&evaluation.join("accuracy.csv"), "mdb")?,
        100.0,
    ));
    let uncertainty_path = evaluation.join("uncertainty.csv");
    if uncertainty_path.is_file() {
        digest.push_str(&render_table(
            "median aleatoric uncertainty",
            "percent of prior width",
            &pivot(&uncertainty_path, "au_median_pct")?,
            1.0,
        ));
        digest.push_str(&render_table(
            "median epistemic uncertainty",
            "percent of prior width",
            &pivot(&uncertainty_path, "eu_median_pct")?,
            1.0,
        ));
    }
    let cal_path = evaluation.join("calibration_summary.csv");
    if cal_path.is_file() {
        digest.push_str(&render_table(
            "miscalibration area, lower is better",
            "fraction",
            &pivot(&cal_path, "miscal_area")?,
            1.0,
        ));
    }
    let sharp_path = evaluation.join("sharpness.csv");
    if sharp_path.is_file() {
        digest.push_str(&render_table(
            "normalized interval width, lower is sharper",
            "fraction of truth range",
            &pivot(&sharp_path, "pinaw")?,
            1.0,
        ));
        digest.push_str(&render_table(
            "mean CRPS",
            "physical units",
            &pivot(&sharp_path, "crps_mean")?,
            1.0,
        ));
    }
    if let Some(path) = out {
        std::fs::write(path, &digest)?;
    }
    Ok(digest)
}
