//! On-disk artifact formats, all little-endian, all magic-tagged.
//!
//! * `IVUQDS1` training dataset: signals and labels, f32.
//! * `IVUQPH1` phantom slice: labels, truth maps, signal stack.
//! * `IVUQNN1` network weights: f64, bit-exact round trip.
//! * `IVUQEM1` ensemble manifest: text key-value file naming member files.
//! * `IVUQPR1` prediction volume: MAP plus uncertainty planes, f32.
//! * `IVUQSM1` pooled predictive samples, f32, unit space.
//! * `IVUQVOL1` volume sidecar: text header describing a raw f32 stack.
//!
//! Floats written as text (manifests, sidecars) use the shortest
//! representation that round-trips exactly.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::dataset::TrainingSet;
use crate::ensemble::DeepEnsemble;
use crate::error::{Error, Result};
use crate::heads::{HeadKind, HeadSpec};
use crate::ivim::{BValueSchedule, IvimParams, PriorRanges, SignalRecord, N_PARAMS};
use crate::nn::DenseNetwork;
use crate::phantom::PhantomVolume;

const MAGIC_DATASET: &[u8; 7] = b"IVUQDS1";
const MAGIC_PHANTOM: &[u8; 7] = b"IVUQPH1";
const MAGIC_MODEL: &[u8; 7] = b"IVUQNN1";
const MAGIC_PREDICTION: &[u8; 7] = b"IVUQPR1";
const MAGIC_SAMPLES: &[u8; 7] = b"IVUQSM1";
const MODEL_VERSION: u32 = 1;

fn path_str(path: &Path) -> String {
    path.display().to_string()
}

fn open_reader(path: &Path) -> Result<BufReader<File>> {
    let file = File::open(path).map_err(|e| Error::open(path_str(path), e))?;
    Ok(BufReader::new(file))
}

fn open_writer(path: &Path) -> Result<BufWriter<File>> {
    let file = File::create(path).map_err(|e| Error::open(path_str(path), e))?;
    Ok(BufWriter::new(file))
}

fn check_magic<R: Read>(r: &mut R, expected: &[u8; 7], path: &Path) -> Result<()> {
    let mut got = [0u8; 7];
    r.read_exact(&mut got)
        .map_err(|_| Error::format(path_str(path), "file too short for magic"))?;
    if &got != expected {
        return Err(Error::format(
            path_str(path),
            format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(&got),
                String::from_utf8_lossy(expected)
            ),
        ));
    }
    Ok(())
}

fn read_f32s<R: Read>(r: &mut R, n: usize, path: &Path, what: &str) -> Result<Vec<f32>> {
    let mut out = vec![0f32; n];
    r.read_f32_into::<LittleEndian>(&mut out)
        .map_err(|_| Error::format(path_str(path), format!("truncated {what}")))?;
    Ok(out)
}

/// Writes a training dataset; all records must be normalized and share the
/// set's schedule.
pub fn write_dataset(path: &Path, set: &TrainingSet) -> Result<()> {
    if set.is_empty() {
        return Err(Error::invalid("refusing to write an empty dataset"));
    }
    let n_b = set.schedule.len();
    for rec in &set.signals {
        if !rec.normalized || rec.n_b() != n_b {
            return Err(Error::invalid(
                "dataset records must be normalized against the shared schedule",
            ));
        }
    }
    let mut w = open_writer(path)?;
    w.write_all(MAGIC_DATASET)?;
    w.write_u32::<LittleEndian>(set.len() as u32)?;
    w.write_u32::<LittleEndian>(n_b as u32)?;
    for &b in set.schedule.values() {
        w.write_f32::<LittleEndian>(b as f32)?;
    }
    for rec in &set.signals {
        for &s in &rec.s {
            w.write_f32::<LittleEndian>(s as f32)?;
        }
    }
    for p in &set.labels {
        for v in p.to_array() {
            w.write_f32::<LittleEndian>(v as f32)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads a dataset; labels are re-normalized against `ranges`, and the
/// per-record SNR draws are not persisted (the vector comes back empty).
pub fn read_dataset(path: &Path, ranges: &PriorRanges) -> Result<TrainingSet> {
    ranges.validate()?;
    let mut r = open_reader(path)?;
    check_magic(&mut r, MAGIC_DATASET, path)?;
    let n = r
        .read_u32::<LittleEndian>()
        .map_err(|_| Error::format(path_str(path), "truncated header"))? as usize;
    let n_b = r
        .read_u32::<LittleEndian>()
        .map_err(|_| Error::format(path_str(path), "truncated header"))? as usize;
    if n == 0 || n_b < 2 {
        return Err(Error::format(path_str(path), "empty dataset"));
    }
    let b_values = read_f32s(&mut r, n_b, path, "b-values")?;
    let schedule = Arc::new(
        BValueSchedule::new(b_values.iter().map(|&b| b as f64).collect())
            .map_err(|e| Error::format(path_str(path), e.to_string()))?,
    );
    let raw_signals = read_f32s(&mut r, n * n_b, path, "signals")?;
    let raw_labels = read_f32s(&mut r, n * N_PARAMS, path, "labels")?;
    let mut signals = Vec::with_capacity(n);
    for i in 0..n {
        signals.push(SignalRecord {
            schedule: Arc::clone(&schedule),
            s: raw_signals[i * n_b..(i + 1) * n_b]
                .iter()
                .map(|&s| s as f64)
                .collect(),
            normalized: true,
            noisy: true,
        });
    }
    let labels = (0..n)
        .map(|i| {
            IvimParams::new(
                raw_labels[i * N_PARAMS] as f64,
                raw_labels[i * N_PARAMS + 1] as f64,
                raw_labels[i * N_PARAMS + 2] as f64,
            )
        })
        .collect();
    Ok(TrainingSet {
        schedule,
        prior_ranges: *ranges,
        signals,
        labels,
        snr: Vec::new(),
    })
}

/// Plain-text CSV mirror of a dataset for inspection; `comments` lines are
/// emitted first, prefixed with `#`.
pub fn write_dataset_csv(path: &Path, set: &TrainingSet, comments: &[String]) -> Result<()> {
    let mut w = open_writer(path)?;
    for c in comments {
        writeln!(w, "# {c}")?;
    }
    let cols: Vec<String> = set
        .schedule
        .values()
        .iter()
        .map(|b| format!("b{b:?}"))
        .collect();
    writeln!(w, "{},d,f,d_star,snr", cols.join(","))?;
    for (i, rec) in set.signals.iter().enumerate() {
        let sig: Vec<String> = rec.s.iter().map(|s| format!("{s:?}")).collect();
        let p = set.labels[i];
        let snr = set
            .snr
            .get(i)
            .map(|s| format!("{s:?}"))
            .unwrap_or_default();
        writeln!(w, "{},{:?},{:?},{:?},{}", sig.join(","), p.d, p.f, p.d_star, snr)?;
    }
    w.flush()?;
    Ok(())
}

/// Writes a phantom slice.
pub fn write_phantom(path: &Path, ph: &PhantomVolume) -> Result<()> {
    if ph.width > u16::MAX as usize || ph.height > u16::MAX as usize {
        return Err(Error::invalid("phantom grid exceeds the format's u16 extent"));
    }
    let mut w = open_writer(path)?;
    w.write_all(MAGIC_PHANTOM)?;
    w.write_u16::<LittleEndian>(ph.width as u16)?;
    w.write_u16::<LittleEndian>(ph.height as u16)?;
    w.write_u32::<LittleEndian>(ph.schedule.len() as u32)?;
    w.write_f32::<LittleEndian>(ph.snr as f32)?;
    for &b in ph.schedule.values() {
        w.write_f32::<LittleEndian>(b as f32)?;
    }
    w.write_all(&ph.labels)?;
    for p in &ph.truth {
        for v in p.to_array() {
            w.write_f32::<LittleEndian>(v as f32)?;
        }
    }
    for rec in &ph.signals {
        for &s in &rec.s {
            w.write_f32::<LittleEndian>(s as f32)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads a phantom slice; region parameters are reconstructed from the truth
/// maps.
pub fn read_phantom(path: &Path) -> Result<PhantomVolume> {
    let mut r = open_reader(path)?;
    check_magic(&mut r, MAGIC_PHANTOM, path)?;
    let width = r
        .read_u16::<LittleEndian>()
        .map_err(|_| Error::format(path_str(path), "truncated header"))? as usize;
    let height = r
        .read_u16::<LittleEndian>()
        .map_err(|_| Error::format(path_str(path), "truncated header"))? as usize;
    let n_b = r
        .read_u32::<LittleEndian>()
        .map_err(|_| Error::format(path_str(path), "truncated header"))? as usize;
    let snr = r
        .read_f32::<LittleEndian>()
        .map_err(|_| Error::format(path_str(path), "truncated header"))? as f64;
    if width == 0 || height == 0 || n_b < 2 {
        return Err(Error::format(path_str(path), "degenerate phantom header"));
    }
    let b_values = read_f32s(&mut r, n_b, path, "b-values")?;
    let schedule = Arc::new(
        BValueSchedule::new(b_values.iter().map(|&b| b as f64).collect())
            .map_err(|e| Error::format(path_str(path), e.to_string()))?,
    );
    let n_px = width * height;
    let mut labels = vec![0u8; n_px];
    r.read_exact(&mut labels)
        .map_err(|_| Error::format(path_str(path), "truncated label map"))?;
    let raw_truth = read_f32s(&mut r, n_px * N_PARAMS, path, "truth maps")?;
    let raw_signals = read_f32s(&mut r, n_px * n_b, path, "signal stack")?;

    let truth: Vec<IvimParams> = (0..n_px)
        .map(|i| {
            IvimParams::new(
                raw_truth[i * N_PARAMS] as f64,
                raw_truth[i * N_PARAMS + 1] as f64,
                raw_truth[i * N_PARAMS + 2] as f64,
            )
        })
        .collect();
    let signals: Vec<SignalRecord> = (0..n_px)
        .map(|i| SignalRecord {
            schedule: Arc::clone(&schedule),
            s: raw_signals[i * n_b..(i + 1) * n_b]
                .iter()
                .map(|&s| s as f64)
                .collect(),
            normalized: true,
            noisy: true,
        })
        .collect();

    let mut region_params = [IvimParams::new(0.0, 0.0, 0.0); crate::phantom::N_REGIONS];
    for (i, &l) in labels.iter().enumerate() {
        if l != 0 {
            let idx = l as usize - 1;
            if idx >= region_params.len() {
                return Err(Error::format(
                    path_str(path),
                    format!("label {l} exceeds the region count"),
                ));
            }
            region_params[idx] = truth[i];
        }
    }
    Ok(PhantomVolume {
        width,
        height,
        snr,
        schedule,
        labels,
        truth,
        signals,
        region_params,
    })
}

fn head_tag(kind: HeadKind) -> u8 {
    match kind {
        HeadKind::Point => 0,
        HeadKind::Gaussian => 1,
        HeadKind::Mdn => 2,
    }
}

fn head_from_tag(tag: u8, path: &Path) -> Result<HeadKind> {
    match tag {
        0 => Ok(HeadKind::Point),
        1 => Ok(HeadKind::Gaussian),
        2 => Ok(HeadKind::Mdn),
        other => Err(Error::format(
            path_str(path),
            format!("unknown head tag {other}"),
        )),
    }
}

/// Writes one network with its head spec; parameters are stored as f64 and
/// round-trip bit-exactly. The init seed is not persisted here; ensemble
/// manifests carry member seeds.
pub fn write_model(path: &Path, net: &DenseNetwork, spec: &HeadSpec) -> Result<()> {
    spec.validate()?;
    if net.n_outputs() != spec.output_width() {
        return Err(Error::invalid(format!(
            "network emits {} outputs but the {} head needs {}",
            net.n_outputs(),
            spec.kind.name(),
            spec.output_width()
        )));
    }
    let mut w = open_writer(path)?;
    w.write_all(MAGIC_MODEL)?;
    w.write_u32::<LittleEndian>(MODEL_VERSION)?;
    w.write_u8(head_tag(spec.kind))?;
    w.write_u32::<LittleEndian>(spec.k as u32)?;
    w.write_u32::<LittleEndian>(net.sizes().len() as u32)?;
    for &s in net.sizes() {
        w.write_u32::<LittleEndian>(s as u32)?;
    }
    for v in net.params_flat() {
        w.write_f64::<LittleEndian>(v)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a network and its head spec.
pub fn read_model(path: &Path) -> Result<(DenseNetwork, HeadSpec)> {
    let mut r = open_reader(path)?;
    check_magic(&mut r, MAGIC_MODEL, path)?;
    let version = r
        .read_u32::<LittleEndian>()
        .map_err(|_| Error::format(path_str(path), "truncated header"))?;
    if version != MODEL_VERSION {
        return Err(Error::format(
            path_str(path),
            format!("unsupported model version {version}"),
        ));
    }
    let kind = head_from_tag(
        r.read_u8()
            .map_err(|_| Error::format(path_str(path), "truncated header"))?,
        path,
    )?;
    let k = r
        .read_u32::<LittleEndian>()
        .map_err(|_| Error::format(path_str(path), "truncated header"))? as usize;
    let spec = HeadSpec { kind, k };
    spec.validate()
        .map_err(|e| Error::format(path_str(path), e.to_string()))?;
    let n_sizes = r
        .read_u32::<LittleEndian>()
        .map_err(|_| Error::format(path_str(path), "truncated header"))? as usize;
    if !(2..=16).contains(&n_sizes) {
        return Err(Error::format(
            path_str(path),
            format!("implausible layer count {n_sizes}"),
        ));
    }
    let mut sizes = Vec::with_capacity(n_sizes);
    for _ in 0..n_sizes {
        sizes.push(
            r.read_u32::<LittleEndian>()
                .map_err(|_| Error::format(path_str(path), "truncated sizes"))? as usize,
        );
    }
    let mut net = DenseNetwork::new(&sizes, 0)
        .map_err(|e| Error::format(path_str(path), e.to_string()))?;
    if net.n_outputs() != spec.output_width() {
        return Err(Error::format(
            path_str(path),
            "output width does not match the head spec",
        ));
    }
    let mut params = vec![0f64; net.n_params()];
    r.read_f64_into::<LittleEndian>(&mut params)
        .map_err(|_| Error::format(path_str(path), "truncated parameters"))?;
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(Error::format(path_str(path), "trailing bytes"));
    }
    net.set_params_flat(&params)
        .map_err(|e| Error::format(path_str(path), e.to_string()))?;
    Ok((net, spec))
}

fn fmt_f64_list(values: &[f64]) -> String {
    values
        .iter()
        .map(|v| format!("{v:?}"))
        .collect::<Vec<_>>()
        .join(",")
}

fn parse_f64_list(s: &str, path: &Path, what: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|t| {
            t.trim()
                .parse::<f64>()
                .map_err(|_| Error::format(path_str(path), format!("bad {what} entry '{t}'")))
        })
        .collect()
}

/// Writes member model files plus a text manifest into `dir`; returns the
/// manifest path. Member files are named `member_<j>.model`.
pub fn save_ensemble(dir: &Path, ens: &DeepEnsemble) -> Result<PathBuf> {
    ens.validate()?;
    std::fs::create_dir_all(dir)?;
    let mut member_files = Vec::new();
    for (j, net) in ens.members.iter().enumerate() {
        let name = format!("member_{j}.model");
        write_model(&dir.join(&name), net, &ens.spec)?;
        member_files.push(name);
    }
    let manifest = dir.join("ensemble.manifest");
    let mut w = open_writer(&manifest)?;
    writeln!(w, "format = IVUQEM1")?;
    writeln!(w, "head = {}", ens.spec.kind.name())?;
    writeln!(w, "k = {}", ens.spec.k)?;
    writeln!(w, "members = {}", ens.m())?;
    writeln!(w, "b_values = {}", fmt_f64_list(ens.schedule.values()))?;
    let pairs = ens.ranges.as_pairs();
    writeln!(w, "prior_d = {}", fmt_f64_list(&[pairs[0].0, pairs[0].1]))?;
    writeln!(w, "prior_f = {}", fmt_f64_list(&[pairs[1].0, pairs[1].1]))?;
    writeln!(w, "prior_d_star = {}", fmt_f64_list(&[pairs[2].0, pairs[2].1]))?;
    for (j, (file, seed)) in member_files.iter().zip(ens.member_seeds.iter()).enumerate() {
        writeln!(w, "member_{j}_seed = {seed}")?;
        writeln!(w, "member_{j}_file = {file}")?;
    }
    w.flush()?;
    Ok(manifest)
}

/// Loads an ensemble from its manifest; member files resolve relative to the
/// manifest's directory.
pub fn load_ensemble(manifest: &Path) -> Result<DeepEnsemble> {
    let text = std::fs::read_to_string(manifest)
        .map_err(|e| Error::open(path_str(manifest), e))?;
    let mut kv = std::collections::BTreeMap::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(Error::format(
                path_str(manifest),
                format!("malformed line '{line}'"),
            ));
        };
        kv.insert(key.trim().to_string(), value.trim().to_string());
    }
    let get = |key: &str| -> Result<&String> {
        kv.get(key)
            .ok_or_else(|| Error::format(path_str(manifest), format!("missing key '{key}'")))
    };
    if get("format")? != "IVUQEM1" {
        return Err(Error::format(path_str(manifest), "not an ensemble manifest"));
    }
    let kind = match get("head")?.as_str() {
        "point" => HeadKind::Point,
        "gaussian" => HeadKind::Gaussian,
        "mdn" => HeadKind::Mdn,
        other => {
            return Err(Error::format(
                path_str(manifest),
                format!("unknown head '{other}'"),
            ))
        }
    };
    let k: usize = get("k")?
        .parse()
        .map_err(|_| Error::format(path_str(manifest), "bad k"))?;
    let spec = HeadSpec { kind, k };
    let m: usize = get("members")?
        .parse()
        .map_err(|_| Error::format(path_str(manifest), "bad member count"))?;
    let schedule = Arc::new(
        BValueSchedule::new(parse_f64_list(get("b_values")?, manifest, "b_values")?)
            .map_err(|e| Error::format(path_str(manifest), e.to_string()))?,
    );
    let range_pair = |key: &str| -> Result<(f64, f64)> {
        let v = parse_f64_list(get(key)?, manifest, key)?;
        if v.len() != 2 {
            return Err(Error::format(
                path_str(manifest),
                format!("{key} needs exactly two values"),
            ));
        }
        Ok((v[0], v[1]))
    };
    let ranges = PriorRanges {
        d: range_pair("prior_d")?,
        f: range_pair("prior_f")?,
        d_star: range_pair("prior_d_star")?,
    };
    let dir = manifest.parent().unwrap_or_else(|| Path::new("."));
    let mut members = Vec::with_capacity(m);
    let mut member_seeds = Vec::with_capacity(m);
    for j in 0..m {
        let seed: u64 = get(&format!("member_{j}_seed"))?
            .parse()
            .map_err(|_| Error::format(path_str(manifest), "bad member seed"))?;
        let file = get(&format!("member_{j}_file"))?;
        let (net, member_spec) = read_model(&dir.join(file))?;
        if member_spec != spec {
            return Err(Error::format(
                path_str(manifest),
                format!("member {j} head spec disagrees with the manifest"),
            ));
        }
        members.push(net);
        member_seeds.push(seed);
    }
    let ens = DeepEnsemble {
        spec,
        ranges,
        schedule,
        members,
        member_seeds,
    };
    ens.validate()?;
    Ok(ens)
}

/// Per-voxel prediction planes; NaN marks skipped voxels or, for point and
/// baseline models, absent uncertainty maps.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionVolume {
    pub nx: usize,
    pub ny: usize,
    pub nz: usize,
    /// MAP estimates in physical units, voxel-major (x fastest).
    pub map: Vec<[f32; N_PARAMS]>,
    /// Aleatoric stddev, percent of prior width.
    pub au_pct: Vec<[f32; N_PARAMS]>,
    /// Epistemic stddev, percent of prior width.
    pub eu_pct: Vec<[f32; N_PARAMS]>,
}

impl PredictionVolume {
    pub fn empty(nx: usize, ny: usize, nz: usize) -> Self {
        let n = nx * ny * nz;
        PredictionVolume {
            nx,
            ny,
            nz,
            map: vec![[f32::NAN; N_PARAMS]; n],
            au_pct: vec![[f32::NAN; N_PARAMS]; n],
            eu_pct: vec![[f32::NAN; N_PARAMS]; n],
        }
    }

    pub fn n_voxels(&self) -> usize {
        self.nx * self.ny * self.nz
    }
}

pub fn write_prediction(path: &Path, pred: &PredictionVolume) -> Result<()> {
    if pred.map.len() != pred.n_voxels()
        || pred.au_pct.len() != pred.n_voxels()
        || pred.eu_pct.len() != pred.n_voxels()
    {
        return Err(Error::invalid("prediction plane sizes disagree with the grid"));
    }
    let mut w = open_writer(path)?;
    w.write_all(MAGIC_PREDICTION)?;
    w.write_u32::<LittleEndian>(pred.nx as u32)?;
    w.write_u32::<LittleEndian>(pred.ny as u32)?;
    w.write_u32::<LittleEndian>(pred.nz as u32)?;
    for i in 0..pred.n_voxels() {
        for plane in [&pred.map, &pred.au_pct, &pred.eu_pct] {
            for &v in plane[i].iter() {
                w.write_f32::<LittleEndian>(v)?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_prediction(path: &Path) -> Result<PredictionVolume> {
    let mut r = open_reader(path)?;
    check_magic(&mut r, MAGIC_PREDICTION, path)?;
    let mut dims = [0usize; 3];
    for d in dims.iter_mut() {
        *d = r
            .read_u32::<LittleEndian>()
            .map_err(|_| Error::format(path_str(path), "truncated header"))? as usize;
    }
    let n = dims[0] * dims[1] * dims[2];
    if n == 0 {
        return Err(Error::format(path_str(path), "empty prediction grid"));
    }
    let raw = read_f32s(&mut r, n * 9, path, "prediction planes")?;
    let mut pred = PredictionVolume::empty(dims[0], dims[1], dims[2]);
    for i in 0..n {
        let base = i * 9;
        for p in 0..N_PARAMS {
            pred.map[i][p] = raw[base + p];
            pred.au_pct[i][p] = raw[base + 3 + p];
            pred.eu_pct[i][p] = raw[base + 6 + p];
        }
    }
    Ok(pred)
}

/// Pooled predictive samples per voxel, unit space, sample-major within each
/// voxel; NaN-filled rows mark skipped voxels.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleVolume {
    pub nx: usize,
    pub ny: usize,
    pub nz: usize,
    pub n_samples: usize,
    data: Vec<f32>,
}

impl SampleVolume {
    pub fn empty(nx: usize, ny: usize, nz: usize, n_samples: usize) -> Self {
        SampleVolume {
            nx,
            ny,
            nz,
            n_samples,
            data: vec![f32::NAN; nx * ny * nz * n_samples * N_PARAMS],
        }
    }

    pub fn n_voxels(&self) -> usize {
        self.nx * self.ny * self.nz
    }

    /// Flattened samples of one voxel: n_samples rows of (d, f, d_star).
    pub fn voxel(&self, idx: usize) -> &[f32] {
        let stride = self.n_samples * N_PARAMS;
        &self.data[idx * stride..(idx + 1) * stride]
    }

    pub fn set_voxel(&mut self, idx: usize, samples: &[[f64; N_PARAMS]]) -> Result<()> {
        if samples.len() != self.n_samples {
            return Err(Error::invalid(format!(
                "expected {} samples, got {}",
                self.n_samples,
                samples.len()
            )));
        }
        let stride = self.n_samples * N_PARAMS;
        let slot = &mut self.data[idx * stride..(idx + 1) * stride];
        for (s, triple) in samples.iter().enumerate() {
            for p in 0..N_PARAMS {
                slot[s * N_PARAMS + p] = triple[p] as f32;
            }
        }
        Ok(())
    }

    /// True when the voxel holds real samples rather than NaN fill.
    pub fn has_voxel(&self, idx: usize) -> bool {
        !self.voxel(idx)[0].is_nan()
    }
}

pub fn write_samples(path: &Path, vol: &SampleVolume) -> Result<()> {
    let mut w = open_writer(path)?;
    w.write_all(MAGIC_SAMPLES)?;
    w.write_u32::<LittleEndian>(vol.nx as u32)?;
    w.write_u32::<LittleEndian>(vol.ny as u32)?;
    w.write_u32::<LittleEndian>(vol.nz as u32)?;
    w.write_u32::<LittleEndian>(vol.n_samples as u32)?;
    for &v in &vol.data {
        w.write_f32::<LittleEndian>(v)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_samples(path: &Path) -> Result<SampleVolume> {
    let mut r = open_reader(path)?;
    check_magic(&mut r, MAGIC_SAMPLES, path)?;
    let mut dims = [0usize; 4];
    for d in dims.iter_mut() {
        *d = r
            .read_u32::<LittleEndian>()
            .map_err(|_| Error::format(path_str(path), "truncated header"))? as usize;
    }
    let [nx, ny, nz, n_samples] = dims;
    if nx * ny * nz == 0 || n_samples == 0 {
        return Err(Error::format(path_str(path), "empty sample grid"));
    }
    let data = read_f32s(&mut r, nx * ny * nz * n_samples * N_PARAMS, path, "samples")?;
    Ok(SampleVolume {
        nx,
        ny,
        nz,
        n_samples,
        data,
    })
}

/// An externally supplied signal volume: raw f32 stack plus text sidecar.
#[derive(Debug, Clone, PartialEq)]
pub struct VolumeInput {
    pub nx: usize,
    pub ny: usize,
    pub nz: usize,
    pub schedule: Arc<BValueSchedule>,
    /// Voxel-major, b fastest: index = voxel * n_b + j.
    pub signals: Vec<f32>,
    /// Optional voxel mask; zero means skip.
    pub mask: Option<Vec<u8>>,
}

impl VolumeInput {
    pub fn n_voxels(&self) -> usize {
        self.nx * self.ny * self.nz
    }

    pub fn voxel_signal(&self, idx: usize) -> &[f32] {
        let n_b = self.schedule.len();
        &self.signals[idx * n_b..(idx + 1) * n_b]
    }

    pub fn included(&self, idx: usize) -> bool {
        self.mask.as_ref().map(|m| m[idx] != 0).unwrap_or(true)
    }
}

/// Writes `volume.sidecar` plus the raw stack (and mask if present) into
/// `dir`; returns the sidecar path.
pub fn write_volume(dir: &Path, vol: &VolumeInput) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    if vol.signals.len() != vol.n_voxels() * vol.schedule.len() {
        return Err(Error::invalid("signal stack size disagrees with the grid"));
    }
    if let Some(mask) = &vol.mask {
        if mask.len() != vol.n_voxels() {
            return Err(Error::invalid("mask size disagrees with the grid"));
        }
    }
    let data_name = "signals.f32";
    {
        let mut w = open_writer(&dir.join(data_name))?;
        for &v in &vol.signals {
            w.write_f32::<LittleEndian>(v)?;
        }
        w.flush()?;
    }
    if let Some(mask) = &vol.mask {
        std::fs::write(dir.join("mask.u8"), mask)?;
    }
    let sidecar = dir.join("volume.sidecar");
    let mut w = open_writer(&sidecar)?;
    writeln!(w, "format = IVUQVOL1")?;
    writeln!(w, "nx = {}", vol.nx)?;
    writeln!(w, "ny = {}", vol.ny)?;
    writeln!(w, "nz = {}", vol.nz)?;
    writeln!(w, "b_values = {}", fmt_f64_list(vol.schedule.values()))?;
    writeln!(w, "data = {data_name}")?;
    if vol.mask.is_some() {
        writeln!(w, "mask = mask.u8")?;
    }
    w.flush()?;
    Ok(sidecar)
}

/// Reads a volume described by its sidecar; paths resolve relative to the
/// sidecar's directory.
pub fn read_volume(sidecar: &Path) -> Result<VolumeInput> {
    let text = std::fs::read_to_string(sidecar)
        .map_err(|e| Error::open(path_str(sidecar), e))?;
    let mut kv = std::collections::BTreeMap::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(Error::format(
                path_str(sidecar),
                format!("malformed line '{line}'"),
            ));
        };
        kv.insert(key.trim().to_string(), value.trim().to_string());
    }
    let get = |key: &str| -> Result<&String> {
        kv.get(key)
            .ok_or_else(|| Error::format(path_str(sidecar), format!("missing key '{key}'")))
    };
    if get("format")? != "IVUQVOL1" {
        return Err(Error::format(path_str(sidecar), "not a volume sidecar"));
    }
    let dim = |key: &str| -> Result<usize> {
        get(key)?
            .parse::<usize>()
            .map_err(|_| Error::format(path_str(sidecar), format!("bad {key}")))
    };
    let (nx, ny, nz) = (dim("nx")?, dim("ny")?, dim("nz")?);
    if nx * ny * nz == 0 {
        return Err(Error::format(path_str(sidecar), "empty grid"));
    }
    let schedule = Arc::new(
        BValueSchedule::new(parse_f64_list(get("b_values")?, sidecar, "b_values")?)
            .map_err(|e| Error::format(path_str(sidecar), e.to_string()))?,
    );
    let dir = sidecar.parent().unwrap_or_else(|| Path::new("."));
    let data_path = dir.join(get("data")?);
    let n_expected = nx * ny * nz * schedule.len();
    let mut r = open_reader(&data_path)?;
    let signals = read_f32s(&mut r, n_expected, &data_path, "signal stack")?;
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(Error::format(path_str(&data_path), "trailing bytes"));
    }
    let mask = match kv.get("mask") {
        Some(name) => {
            let mask = std::fs::read(dir.join(name))?;
            if mask.len() != nx * ny * nz {
                return Err(Error::format(
                    path_str(sidecar),
                    "mask size disagrees with the grid",
                ));
            }
            Some(mask)
        }
        None => None,
    };
    Ok(VolumeInput {
        nx,
        ny,
        nz,
        schedule,
        signals,
        mask,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::sample_training_set;
    use crate::phantom::generate_phantom;
    use tempfile::TempDir;

    fn schedule() -> Arc<BValueSchedule> {
        Arc::new(BValueSchedule::default_protocol())
    }

    #[test]
    fn dataset_round_trips_through_f32() {
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("train.dataset");
        let set = sample_training_set(
            20,
            &PriorRanges::default(),
            &schedule(),
            (1.0, 200.0),
            3,
        )
        .unwrap();
        write_dataset(&path, &set).unwrap();
        let back = read_dataset(&path, &PriorRanges::default()).unwrap();
        assert_eq!(back.len(), 20);
        assert_eq!(back.schedule.values(), set.schedule.values());
        for (a, b) in set.signals.iter().zip(back.signals.iter()) {
            assert!(b.normalized && b.noisy);
            for (x, y) in a.s.iter().zip(b.s.iter()) {
                assert_eq!(*x as f32, *y as f32);
            }
        }
        for (a, b) in set.labels.iter().zip(back.labels.iter()) {
            assert_eq!(a.d as f32, b.d as f32);
        }
        assert!(back.snr.is_empty());
    }

    #[test]
    fn dataset_reader_rejects_corruption() {
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("bad.dataset");
        std::fs::write(&path, b"IVUQXX1rest").unwrap();
        assert!(matches!(
            read_dataset(&path, &PriorRanges::default()),
            Err(Error::Format { .. })
        ));
        std::fs::write(&path, b"IVUQDS1").unwrap();
        assert!(read_dataset(&path, &PriorRanges::default()).is_err());
    }

    #[test]
    fn dataset_csv_lists_comments_then_rows() {
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("train.csv");
        let set = sample_training_set(
            3,
            &PriorRanges::default(),
            &schedule(),
            (1.0, 200.0),
            3,
        )
        .unwrap();
        write_dataset_csv(&path, &set, &["config_sha256 = abc".into()]).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "# config_sha256 = abc");
        assert!(lines.next().unwrap().starts_with("b0.0,"));
        assert_eq!(lines.count(), 3);
    }

    #[test]
    fn phantom_round_trips() {
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("ph.phantom");
        let ph = generate_phantom(76, 76, 25.0, &PriorRanges::default(), &schedule(), 5)
            .unwrap();
        write_phantom(&path, &ph).unwrap();
        let back = read_phantom(&path).unwrap();
        assert_eq!(back.width, 76);
        assert_eq!(back.height, 76);
        assert_eq!(back.labels, ph.labels);
        assert_eq!(back.snr as f32, 25.0);
        for (a, b) in ph.truth.iter().zip(back.truth.iter()) {
            assert_eq!(a.d as f32, b.d as f32);
            assert_eq!(a.f as f32, b.f as f32);
            assert_eq!(a.d_star as f32, b.d_star as f32);
        }
        for r in 1..=6u8 {
            assert_eq!(
                back.region_params[r as usize - 1].d as f32,
                ph.region_params[r as usize - 1].d as f32
            );
        }
    }

    #[test]
    fn model_round_trip_is_bit_exact() {
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("net.model");
        let net = DenseNetwork::with_two_hidden(14, 8, 90, 77).unwrap();
        let spec = HeadSpec::mdn(10);
        write_model(&path, &net, &spec).unwrap();
        let (back, back_spec) = read_model(&path).unwrap();
        assert_eq!(back_spec, spec);
        assert_eq!(back.sizes(), net.sizes());
        let a = net.params_flat();
        let b = back.params_flat();
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b.iter()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn model_writer_checks_head_width() {
        let dir = TempDir::new().unwrap();
        let net = DenseNetwork::with_two_hidden(14, 8, 6, 0).unwrap();
        assert!(write_model(&dir.path().join("x.model"), &net, &HeadSpec::mdn(10)).is_err());
    }

    #[test]
    fn model_reader_rejects_tampering() {
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("net.model");
        let net = DenseNetwork::with_two_hidden(14, 4, 6, 1).unwrap();
        write_model(&path, &net, &HeadSpec::gaussian()).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 3);
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(read_model(&path), Err(Error::Format { .. })));
    }

    #[test]
    fn ensemble_round_trips_through_manifest() {
        use crate::ensemble::{train_ensemble, EnsembleConfig};
        use crate::nn::TrainConfig;
        use crate::rng::rng_from_seed;
        use ndarray::Array2;
        use rand::Rng;

        let mut rng = rng_from_seed(9);
        let x = Array2::from_shape_fn((24, 14), |_| rng.gen_range(0.0..1.0));
        let y = Array2::from_shape_fn((24, 3), |_| rng.gen_range(0.0..1.0));
        let cfg = EnsembleConfig {
            members: 2,
            base_seed: 5,
            hidden_width: 6,
            train: TrainConfig {
                epochs: 1,
                batch_size: 12,
                ..TrainConfig::default()
            },
        };
        let (ens, _) = train_ensemble(
            &HeadSpec::gaussian(),
            &x.view(),
            &y.view(),
            &x.view(),
            &y.view(),
            &cfg,
            &schedule(),
            &PriorRanges::default(),
        )
        .unwrap();
        let dir = TempDir::new().unwrap();
        let manifest = save_ensemble(&dir.path().join("ens"), &ens).unwrap();
        let back = load_ensemble(&manifest).unwrap();
        assert_eq!(back.spec, ens.spec);
        assert_eq!(back.member_seeds, ens.member_seeds);
        assert_eq!(back.ranges, ens.ranges);
        assert_eq!(back.schedule.values(), ens.schedule.values());
        for (a, b) in ens.members.iter().zip(back.members.iter()) {
            let pa = a.params_flat();
            let pb = b.params_flat();
            for (x, y) in pa.iter().zip(pb.iter()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn prediction_round_trips_with_nan_planes() {
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("p.prediction");
        let mut pred = PredictionVolume::empty(4, 3, 1);
        pred.map[5] = [1.0e-3, 0.2, 0.05];
        pred.au_pct[5] = [4.5, 10.5, 21.1];
        pred.eu_pct[5] = [0.5, 1.5, 8.9];
        write_prediction(&path, &pred).unwrap();
        let back = read_prediction(&path).unwrap();
        assert_eq!(back.nx, 4);
        assert_eq!(back.map[5], pred.map[5]);
        assert!(back.map[0][0].is_nan());
        assert!(back.au_pct[11][2].is_nan());
    }

    #[test]
    fn samples_round_trip_and_flag_skipped_voxels() {
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("s.samples");
        let mut vol = SampleVolume::empty(2, 2, 1, 3);
        vol.set_voxel(2, &[[0.1, 0.2, 0.3], [0.4, 0.5, 0.6], [0.7, 0.8, 0.9]])
            .unwrap();
        assert!(vol.set_voxel(1, &[[0.0; 3]; 2]).is_err());
        write_samples(&path, &vol).unwrap();
        let back = read_samples(&path).unwrap();
        assert!(back.has_voxel(2));
        assert!(!back.has_voxel(0));
        assert_eq!(back.voxel(2)[4], 0.5);
    }

    #[test]
    fn volume_round_trips_with_mask() {
        let dir = TempDir::new().unwrap();
        let vol = VolumeInput {
            nx: 2,
            ny: 2,
            nz: 2,
            schedule: schedule(),
            signals: (0..2 * 2 * 2 * 14).map(|i| i as f32 * 0.5).collect(),
            mask: Some(vec![1, 0, 1, 1, 0, 1, 1, 1]),
        };
        let sidecar = write_volume(&dir.path().join("vol"), &vol).unwrap();
        let back = read_volume(&sidecar).unwrap();
        assert_eq!(back, vol);
        assert!(back.included(0));
        assert!(!back.included(1));
        assert_eq!(back.voxel_signal(1)[0], 7.0);
    }

    #[test]
    fn volume_reader_validates_sizes() {
        let dir = TempDir::new().unwrap();
        let vol = VolumeInput {
            nx: 2,
            ny: 1,
            nz: 1,
            schedule: schedule(),
            signals: vec![0.0; 28],
            mask: None,
        };
        let sidecar = write_volume(&dir.path().join("vol"), &vol).unwrap();
        // Truncate the raw stack behind the sidecar's back.
        let data = dir.path().join("vol").join("signals.f32");
        let bytes = std::fs::read(&data).unwrap();
        std::fs::write(&data, &bytes[..bytes.len() - 4]).unwrap();
        assert!(read_volume(&sidecar).is_err());
    }
}
