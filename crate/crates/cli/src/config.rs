//! Run configuration: an INI-style text file, a canonical rendering, and a
//! SHA-256 digest over that rendering.
//!
//! The digest identifies the *effective* configuration, so a file that spells
//! out the defaults hashes identically to no file at all. Every artifact a
//! command writes carries the digest and the master seed.

use std::path::Path;

use ivimuq_core::{BValueSchedule, Error, HeadKind, PriorRanges, Result};
use sha2::{Digest, Sha256};

/// Default high/low b split comes from the acquisition protocol below.
pub const DEFAULT_B_VALUES: [f64; 14] = [
    0.0, 15.0, 60.0, 100.0, 150.0, 170.0, 190.0, 220.0, 280.0, 440.0, 560.0, 700.0, 850.0,
    1000.0,
];

#[derive(Debug, Clone, PartialEq)]
pub struct SimulateSection {
    pub n_signals: usize,
    /// Per-record SNR is drawn uniformly from this range.
    pub snr: (f64, f64),
    pub val_fraction: f64,
    pub phantom_snr: Vec<f64>,
    pub phantoms_per_snr: usize,
    pub width: usize,
    pub height: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSection {
    pub heads: Vec<HeadKind>,
    pub k: usize,
    pub members: usize,
    pub hidden: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub k_sweep: Vec<usize>,
    pub k_sweep_runs: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictSection {
    pub samples_per_member: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvaluateSection {
    /// Central interval levels in percent, strictly increasing.
    pub levels: Vec<f64>,
    pub pinaw_gamma: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub prior: PriorRanges,
    pub b_values: Vec<f64>,
    pub simulate: SimulateSection,
    pub train: TrainSection,
    pub predict: PredictSection,
    pub evaluate: EvaluateSection,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            prior: PriorRanges::default(),
            b_values: DEFAULT_B_VALUES.to_vec(),
            simulate: SimulateSection {
                n_signals: 200_000,
                snr: (1.0, 200.0),
                val_fraction: 0.2,
                phantom_snr: vec![25.0, 50.0, 100.0],
                phantoms_per_snr: 200,
                width: 76,
                height: 76,
            },
            train: TrainSection {
                heads: vec![HeadKind::Point, HeadKind::Gaussian, HeadKind::Mdn],
                k: 10,
                members: 5,
                hidden: 64,
                epochs: 1000,
                batch_size: 128,
                learning_rate: 1e-4,
                k_sweep: vec![1, 2, 3, 5, 10, 15],
                k_sweep_runs: 5,
            },
            predict: PredictSection {
                samples_per_member: 100,
            },
            evaluate: EvaluateSection {
                levels: (1..=19).map(|i| 5.0 * i as f64).collect(),
                pinaw_gamma: 90.0,
            },
        }
    }
}

fn fmt_list(values: &[f64]) -> String {
    values
        .iter()
        .map(|v| format!("{v:?}"))
        .collect::<Vec<_>>()
        .join(",")
}

fn fmt_usize_list(values: &[usize]) -> String {
    values
        .iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

fn parse_f64(key: &str, value: &str) -> Result<f64> {
    value
        .parse::<f64>()
        .map_err(|_| Error::invalid(format!("{key}: '{value}' is not a number")))
}

fn parse_usize(key: &str, value: &str) -> Result<usize> {
    value
        .parse::<usize>()
        .map_err(|_| Error::invalid(format!("{key}: '{value}' is not a count")))
}

fn parse_f64_list(key: &str, value: &str) -> Result<Vec<f64>> {
    value
        .split(',')
        .map(|t| parse_f64(key, t.trim()))
        .collect()
}

fn parse_usize_list(key: &str, value: &str) -> Result<Vec<usize>> {
    value
        .split(',')
        .map(|t| parse_usize(key, t.trim()))
        .collect()
}

fn parse_pair(key: &str, value: &str) -> Result<(f64, f64)> {
    let v = parse_f64_list(key, value)?;
    if v.len() != 2 {
        return Err(Error::invalid(format!("{key}: expected 'low,high'")));
    }
    Ok((v[0], v[1]))
}

impl Config {
    /// Parses an INI-style file; unknown sections or keys are errors.
    pub fn parse(text: &str) -> Result<Config> {
        let mut cfg = Config::default();
        let mut section = String::new();
        let mut seen = std::collections::BTreeSet::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') || line.starts_with(';') {
                continue;
            }
            if let Some(name) = line.strip_prefix('[') {
                let Some(name) = name.strip_suffix(']') else {
                    return Err(Error::invalid(format!(
                        "line {}: unterminated section header",
                        lineno + 1
                    )));
                };
                section = name.trim().to_string();
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::invalid(format!(
                    "line {}: expected 'key = value'",
                    lineno + 1
                )));
            };
            let key = key.trim();
            let value = value.trim();
            let full = format!("{section}.{key}");
            if !seen.insert(full.clone()) {
                return Err(Error::invalid(format!("duplicate key '{full}'")));
            }
            cfg.apply(&section, key, value, &full)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn apply(&mut self, section: &str, key: &str, value: &str, full: &str) -> Result<()> {
        match (section, key) {
            ("prior", "d") => self.prior.d = parse_pair(full, value)?,
            ("prior", "f") => self.prior.f = parse_pair(full, value)?,
            ("prior", "d_star") => self.prior.d_star = parse_pair(full, value)?,
            ("acquisition", "b_values") => self.b_values = parse_f64_list(full, value)?,
            ("simulate", "n_signals") => self.simulate.n_signals = parse_usize(full, value)?,
            ("simulate", "snr") => self.simulate.snr = parse_pair(full, value)?,
            ("simulate", "val_fraction") => {
                self.simulate.val_fraction = parse_f64(full, value)?
            }
            ("simulate", "phantom_snr") => {
                self.simulate.phantom_snr = parse_f64_list(full, value)?
            }
            ("simulate", "phantoms_per_snr") => {
                self.simulate.phantoms_per_snr = parse_usize(full, value)?
            }
            ("simulate", "width") => self.simulate.width = parse_usize(full, value)?,
            ("simulate", "height") => self.simulate.height = parse_usize(full, value)?,
            ("train", "heads") => {
                let mut heads = Vec::new();
                for name in value.split(',') {
                    heads.push(match name.trim() {
                        "point" => HeadKind::Point,
                        "gaussian" => HeadKind::Gaussian,
                        "mdn" => HeadKind::Mdn,
                        other => {
                            return Err(Error::invalid(format!(
                                "{full}: unknown head '{other}'"
                            )))
                        }
                    });
                }
                self.train.heads = heads;
            }
            ("train", "k") => self.train.k = parse_usize(full, value)?,
            ("train", "members") => self.train.members = parse_usize(full, value)?,
            ("train", "hidden") => self.train.hidden = parse_usize(full, value)?,
            ("train", "epochs") => self.train.epochs = parse_usize(full, value)?,
            ("train", "batch_size") => self.train.batch_size = parse_usize(full, value)?,
            ("train", "learning_rate") => {
                self.train.learning_rate = parse_f64(full, value)?
            }
            ("train", "k_sweep") => self.train.k_sweep = parse_usize_list(full, value)?,
            ("train", "k_sweep_runs") => {
                self.train.k_sweep_runs = parse_usize(full, value)?
            }
            ("predict", "samples_per_member") => {
                self.predict.samples_per_member = parse_usize(full, value)?
            }
            ("evaluate", "levels") => self.evaluate.levels = parse_f64_list(full, value)?,
            ("evaluate", "pinaw_gamma") => {
                self.evaluate.pinaw_gamma = parse_f64(full, value)?
            }
            _ => {
                return Err(Error::invalid(format!(
                    "unknown configuration key '{full}'"
                )))
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.prior.validate()?;
        self.schedule()?;
        let s = &self.simulate;
        if s.n_signals < 2 {
            return Err(Error::invalid("simulate.n_signals must be at least 2"));
        }
        if !(s.snr.0 > 0.0 && s.snr.1 >= s.snr.0 && s.snr.1.is_finite()) {
            return Err(Error::invalid("simulate.snr must satisfy 0 < low <= high"));
        }
        if !(s.val_fraction > 0.0 && s.val_fraction < 1.0) {
            return Err(Error::invalid("simulate.val_fraction must lie in (0, 1)"));
        }
        if s.phantom_snr.is_empty() || s.phantom_snr.iter().any(|&v| v <= 0.0) {
            return Err(Error::invalid("simulate.phantom_snr needs positive entries"));
        }
        if s.phantoms_per_snr == 0 {
            return Err(Error::invalid("simulate.phantoms_per_snr must be positive"));
        }
        let t = &self.train;
        if t.heads.is_empty() {
            return Err(Error::invalid("train.heads must name at least one head"));
        }
        let mut unique = std::collections::BTreeSet::new();
        for h in &t.heads {
            if !unique.insert(h.name()) {
                return Err(Error::invalid(format!("train.heads repeats '{}'", h.name())));
            }
        }
        if t.k == 0 {
            return Err(Error::invalid("train.k must be positive"));
        }
        if t.members < 2 {
            return Err(Error::invalid("train.members must be at least 2"));
        }
        if t.hidden == 0 || t.epochs == 0 || t.batch_size == 0 {
            return Err(Error::invalid("train sizes must be positive"));
        }
        if !(t.learning_rate > 0.0 && t.learning_rate.is_finite()) {
            return Err(Error::invalid("train.learning_rate must be positive"));
        }
        if t.k_sweep.is_empty() || t.k_sweep.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid(
                "train.k_sweep must be strictly increasing and non-empty",
            ));
        }
        if t.k_sweep.contains(&0) {
            return Err(Error::invalid("train.k_sweep entries must be positive"));
        }
        if t.k_sweep_runs == 0 {
            return Err(Error::invalid("train.k_sweep_runs must be positive"));
        }
        if self.predict.samples_per_member == 0 {
            return Err(Error::invalid("predict.samples_per_member must be positive"));
        }
        let e = &self.evaluate;
        if e.levels.is_empty()
            || e.levels.windows(2).any(|w| w[0] >= w[1])
            || e.levels.iter().any(|&l| !(0.0 < l && l < 100.0))
        {
            return Err(Error::invalid(
                "evaluate.levels must be strictly increasing inside (0, 100)",
            ));
        }
        if !(e.pinaw_gamma > 0.0 && e.pinaw_gamma <= 100.0) {
            return Err(Error::invalid("evaluate.pinaw_gamma must lie in (0, 100]"));
        }
        Ok(())
    }

    pub fn schedule(&self) -> Result<BValueSchedule> {
        BValueSchedule::new(self.b_values.clone())
    }

    /// Fixed-order rendering; parsing it back reproduces the same config.
    pub fn canonical_string(&self) -> String {
        let pairs = self.prior.as_pairs();
        let heads: Vec<&str> = self.train.heads.iter().map(|h| h.name()).collect();
        format!(
            "[prior]\n\
             d = {}\n\
             f = {}\n\
             d_star = {}\n\
             \n[acquisition]\n\
             b_values = {}\n\
             \n[simulate]\n\
             n_signals = {}\n\
             snr = {}\n\
             val_fraction = {:?}\n\
             phantom_snr = {}\n\
             phantoms_per_snr = {}\n\
             width = {}\n\
             height = {}\n\
             \n[train]\n\
             heads = {}\n\
             k = {}\n\
             members = {}\n\
             hidden = {}\n\
             epochs = {}\n\
             batch_size = {}\n\
             learning_rate = {:?}\n\
             k_sweep = {}\n\
             k_sweep_runs = {}\n\
             \n[predict]\n\
             samples_per_member = {}\n\
             \n[evaluate]\n\
             levels = {}\n\
             pinaw_gamma = {:?}\n",
            fmt_list(&[pairs[0].0, pairs[0].1]),
            fmt_list(&[pairs[1].0, pairs[1].1]),
            fmt_list(&[pairs[2].0, pairs[2].1]),
            fmt_list(&self.b_values),
            self.simulate.n_signals,
            fmt_list(&[self.simulate.snr.0, self.simulate.snr.1]),
            self.simulate.val_fraction,
            fmt_list(&self.simulate.phantom_snr),
            self.simulate.phantoms_per_snr,
            self.simulate.width,
            self.simulate.height,
            heads.join(","),
            self.train.k,
            self.train.members,
            self.train.hidden,
            self.train.epochs,
            self.train.batch_size,
            self.train.learning_rate,
            fmt_usize_list(&self.train.k_sweep),
            self.train.k_sweep_runs,
            self.predict.samples_per_member,
            fmt_list(&self.evaluate.levels),
            self.evaluate.pinaw_gamma,
        )
    }

    /// Digest of the canonical rendering, lowercase hex.
    pub fn sha256_hex(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.canonical_string().as_bytes());
        hex::encode(hasher.finalize())
    }

    /// Loads from `path` when given, otherwise returns the defaults.
    pub fn load(path: Option<&Path>) -> Result<Config> {
        match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| Error::open(p.display().to_string(), e))?;
                Config::parse(&text)
            }
            None => Ok(Config::default()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip_canonically() {
        let cfg = Config::default();
        cfg.validate().unwrap();
        let text = cfg.canonical_string();
        let back = Config::parse(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.sha256_hex(), cfg.sha256_hex());
    }

    #[test]
    fn spelled_out_defaults_hash_like_no_file() {
        let cfg = Config::parse(&Config::default().canonical_string()).unwrap();
        assert_eq!(cfg.sha256_hex(), Config::default().sha256_hex());
    }

    #[test]
    fn overrides_change_the_hash() {
        let cfg = Config::parse("[train]\nepochs = 3\n").unwrap();
        assert_eq!(cfg.train.epochs, 3);
        assert_ne!(cfg.sha256_hex(), Config::default().sha256_hex());
        // Everything else keeps its default.
        assert_eq!(cfg.train.members, 5);
        assert_eq!(cfg.b_values.len(), 14);
    }

    #[test]
    fn unknown_keys_and_duplicates_are_rejected() {
        assert!(Config::parse("[train]\nepchs = 3\n").is_err());
        assert!(Config::parse("[nope]\nx = 1\n").is_err());
        assert!(Config::parse("[train]\nepochs = 3\nepochs = 4\n").is_err());
        assert!(Config::parse("[train\nepochs = 3\n").is_err());
        assert!(Config::parse("[train]\nepochs\n").is_err());
    }

    #[test]
    fn semantic_validation_catches_bad_values() {
        assert!(Config::parse("[simulate]\nval_fraction = 1.5\n").is_err());
        assert!(Config::parse("[simulate]\nsnr = 0,100\n").is_err());
        assert!(Config::parse("[train]\nmembers = 1\n").is_err());
        assert!(Config::parse("[train]\nheads = point,point\n").is_err());
        assert!(Config::parse("[train]\nheads = laplace\n").is_err());
        assert!(Config::parse("[evaluate]\nlevels = 5,5\n").is_err());
        assert!(Config::parse("[evaluate]\npinaw_gamma = 0\n").is_err());
        assert!(Config::parse("[acquisition]\nb_values = 10,20\n").is_err());
        assert!(Config::parse("[train]\nk_sweep = 3,2\n").is_err());
    }

    #[test]
    fn comments_and_blank_lines_are_ignored()  {
        let cfg = Config::parse("# top\n\n[train]\n; note\nepochs = 7\n").unwrap();
        assert_eq!(cfg.train.epochs, 7);
    }
}
