//! Dataset ingestion (`.ts` archives, CSV fallback), normalisation, splits
//! and the synthetic low-frequency generator.
//!
//! Labels are stored as 0-based class indices into `class_names`; files keep
//! the original class names.

use std::collections::BTreeSet;
use std::f64::consts::TAU;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::net::Tensor3;
use crate::spectral;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    #[default]
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeSeriesDataset {
    pub instances: Tensor3,
    pub labels: Vec<usize>,
    pub class_names: Vec<String>,
    pub sampling_freq: f64,
    pub name: String,
    pub split: Split,
}

impl TimeSeriesDataset {
    pub fn new(instances: Tensor3, labels: Vec<usize>, class_names: Vec<String>) -> Result<Self> {
        let ds = Self {
            instances,
            labels,
            class_names,
            sampling_freq: 1.0,
            name: String::new(),
            split: Split::Train,
        };
        ds.validate()?;
        Ok(ds)
    }

    #[must_use]
    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    #[must_use]
    pub fn with_split(mut self, split: Split) -> Self {
        self.split = split;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.labels.len() != self.instances.batch() {
            return Err(Error::invalid(format!(
                "{} labels for {} instances",
                self.labels.len(),
                self.instances.batch()
            )));
        }
        if self.instances.channels() == 0 {
            return Err(Error::invalid("dataset needs at least one variable"));
        }
        if let Some(&bad) = self.labels.iter().find(|&&y| y >= self.class_names.len()) {
            return Err(Error::ClassOutOfRange {
                class: bad,
                classes: self.class_names.len(),
            });
        }
        if !(self.sampling_freq > 0.0 && self.sampling_freq.is_finite()) {
            return Err(Error::invalid("sampling frequency must be positive"));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn channels(&self) -> usize {
        self.instances.channels()
    }

    pub fn length(&self) -> usize {
        self.instances.length()
    }

    pub fn metadata(&self) -> DatasetMetadata {
        DatasetMetadata {
            name: self.name.clone(),
            channels: self.channels(),
            length: self.length(),
            class_names: self.class_names.clone(),
            sampling_freq: self.sampling_freq,
            split: self.split,
        }
    }

    /// Same instances with every series replaced by `f(series)`.
    pub fn map_series(&self, mut f: impl FnMut(&[f64]) -> Result<Vec<f64>>) -> Result<Self> {
        let mut out = self.clone();
        for n in 0..self.len() {
            for c in 0..self.channels() {
                let s = f(self.instances.series(n, c))?;
                out.instances.series_mut(n, c).copy_from_slice(&s);
            }
        }
        Ok(out)
    }
}

/// Sidecar describing a dataset file (`<stem>.meta.json`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMetadata {
    #[serde(default)]
    pub name: String,
    #[serde(default = "one_usize")]
    pub channels: usize,
    #[serde(default)]
    pub length: usize,
    #[serde(default)]
    pub class_names: Vec<String>,
    #[serde(default = "one_f64")]
    pub sampling_freq: f64,
    #[serde(default)]
    pub split: Split,
}

fn one_usize() -> usize {
    1
}

fn one_f64() -> f64 {
    1.0
}

pub fn sidecar_path(data_path: &Path) -> PathBuf {
    data_path.with_extension("meta.json")
}

pub fn read_metadata(path: &Path) -> Result<DatasetMetadata> {
    Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
}

pub fn write_metadata(meta: &DatasetMetadata, path: &Path) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(meta)? + "\n")?;
    Ok(())
}

fn parse_err(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

fn parse_value(path: &Path, line: usize, tok: &str) -> Result<f64> {
    let tok = tok.trim();
    if tok == "?" || tok.eq_ignore_ascii_case("nan") {
        return Err(parse_err(path, line, "missing values are not supported"));
    }
    match tok.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(v),
        _ => Err(parse_err(path, line, format!("invalid value {tok:?}"))),
    }
}

/// Parses `.ts` text from `path`.
pub fn load_ts_archive(path: &Path) -> Result<TimeSeriesDataset> {
    let text = std::fs::read_to_string(path)?;
    let mut ds = parse_ts(&text, path)?;
    if ds.name.is_empty() {
        ds.name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
    }
    let lower = ds.name.to_ascii_lowercase();
    if lower.ends_with("_test") {
        ds.split = Split::Test;
    }
    apply_sidecar(&mut ds, path)?;
    Ok(ds)
}

/// Parses `.ts` content; `path` is only used in diagnostics.
pub fn parse_ts(text: &str, path: &Path) -> Result<TimeSeriesDataset> {
    let mut name = String::new();
    let mut class_names: Option<Vec<String>> = None;
    let mut in_data = false;
    let mut rows: Vec<Vec<Vec<f64>>> = Vec::new();
    let mut labels = Vec::new();
    let mut label_lines = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let lineno = i + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if !in_data {
            let Some(header) = line.strip_prefix('@') else {
                return Err(parse_err(path, lineno, "expected a header line before @data"));
            };
            let mut parts = header.split_whitespace();
            let key = parts.next().unwrap_or("").to_ascii_lowercase();
            let rest: Vec<&str> = parts.collect();
            let flag = || rest.first().map(|v| v.eq_ignore_ascii_case("true"));
            match key.as_str() {
                "problemname" => name = rest.join(" "),
                "timestamps" if flag() == Some(true) => {
                    return Err(parse_err(path, lineno, "timestamped series are not supported"))
                }
                "equallength" if flag() == Some(false) => {
                    return Err(Error::VariableLength(format!("{} declares @equalLength false", path.display())))
                }
                "classlabel" => {
                    if flag() != Some(true) {
                        return Err(parse_err(path, lineno, "only classification files (@classLabel true) are supported"));
                    }
                    let names: Vec<String> = rest[1..].iter().map(|s| s.to_string()).collect();
                    if names.is_empty() {
                        return Err(parse_err(path, lineno, "@classLabel lists no classes"));
                    }
                    class_names = Some(names);
                }
                "data" => {
                    if class_names.is_none() {
                        return Err(parse_err(path, lineno, "@classLabel header missing before @data"));
                    }
                    in_data = true;
                }
                _ => {}
            }
            continue;
        }
        let fields: Vec<&str> = line.split(':').collect();
        if fields.len() < 2 {
            return Err(parse_err(path, lineno, "instance has no label"));
        }
        let (label, dims) = fields.split_last().expect("at least two fields");
        let series = dims
            .iter()
            .map(|d| d.split(',').map(|tok| parse_value(path, lineno, tok)).collect::<Result<Vec<f64>>>())
            .collect::<Result<Vec<_>>>()?;
        rows.push(series);
        labels.push(label.trim().to_string());
        label_lines.push(lineno);
    }
    if !in_data {
        return Err(parse_err(path, 0, "no @data section"));
    }
    if rows.is_empty() {
        return Err(parse_err(path, 0, "no instances"));
    }
    let dims = rows[0].len();
    let length = rows[0][0].len();
    for (row, &lineno) in rows.iter().zip(&label_lines) {
        if row.len() != dims {
            return Err(parse_err(path, lineno, format!("expected {dims} dimensions, found {}", row.len())));
        }
        if row.iter().any(|s| s.len() != length) {
            return Err(Error::VariableLength(format!("{} line {lineno}", path.display())));
        }
    }
    let class_names = class_names.expect("checked at @data");
    let labels = labels
        .iter()
        .zip(&label_lines)
        .map(|(l, &lineno)| {
            class_names
                .iter()
                .position(|c| c == l)
                .ok_or_else(|| parse_err(path, lineno, format!("unknown label {l:?}")))
        })
        .collect::<Result<Vec<_>>>()?;
    let ds = TimeSeriesDataset::new(Tensor3::from_instances(&rows)?, labels, class_names)?;
    Ok(ds.with_name(name))
}

pub fn write_ts(ds: &TimeSeriesDataset, path: &Path) -> Result<()> {
    let mut out = String::new();
    let name = if ds.name.is_empty() { "dataset" } else { &ds.name };
    let _ = writeln!(out, "@problemName {name}");
    let _ = writeln!(out, "@timeStamps false");
    let _ = writeln!(out, "@missing false");
    let _ = writeln!(out, "@univariate {}", ds.channels() == 1);
    if ds.channels() > 1 {
        let _ = writeln!(out, "@dimensions {}", ds.channels());
    }
    let _ = writeln!(out, "@equalLength true");
    let _ = writeln!(out, "@seriesLength {}", ds.length());
    let _ = writeln!(out, "@classLabel true {}", ds.class_names.join(" "));
    let _ = writeln!(out, "@data");
    for n in 0..ds.len() {
        for c in 0..ds.channels() {
            let s: Vec<String> = ds.instances.series(n, c).iter().map(f64::to_string).collect();
            out.push_str(&s.join(","));
            out.push(':');
        }
        out.push_str(&ds.class_names[ds.labels[n]]);
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Reads the CSV fallback: one row per instance, `D·T` values
/// channel-major, label last, no header. `D` and the class order come from
/// the sidecar when present; otherwise `D = 1` and classes are the sorted
/// distinct labels (numerically if all are integers).
pub fn load_csv(path: &Path) -> Result<TimeSeriesDataset> {
    let side = sidecar_path(path);
    let meta = if side.exists() { Some(read_metadata(&side)?) } else { None };
    let channels = meta.as_ref().map_or(1, |m| m.channels.max(1));
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_err(path, e))?;
    let mut rows = Vec::new();
    let mut raw_labels = Vec::new();
    let mut width = None;
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let lineno = i + 1;
        if rec.len() < 2 {
            return Err(parse_err(path, lineno, "row needs values and a label"));
        }
        let values = rec.len() - 1;
        if *width.get_or_insert(values) != values {
            return Err(Error::VariableLength(format!("{} line {lineno}", path.display())));
        }
        if values % channels != 0 {
            return Err(parse_err(path, lineno, format!("{values} values do not split into {channels} channels")));
        }
        let vals = (0..values)
            .map(|j| parse_value(path, lineno, &rec[j]))
            .collect::<Result<Vec<_>>>()?;
        let t = values / channels;
        rows.push(vals.chunks(t).map(<[f64]>::to_vec).collect::<Vec<_>>());
        raw_labels.push((rec[values].to_string(), lineno));
    }
    if rows.is_empty() {
        return Err(parse_err(path, 0, "no instances"));
    }
    let class_names = match meta.as_ref().filter(|m| !m.class_names.is_empty()) {
        Some(m) => m.class_names.clone(),
        None => infer_classes(raw_labels.iter().map(|(l, _)| l.as_str())),
    };
    let labels = raw_labels
        .iter()
        .map(|(l, lineno)| {
            class_names
                .iter()
                .position(|c| c == l)
                .ok_or_else(|| parse_err(path, *lineno, format!("unknown label {l:?}")))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut ds = TimeSeriesDataset::new(Tensor3::from_instances(&rows)?, labels, class_names)?;
    ds.name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    if let Some(m) = meta {
        if !m.name.is_empty() {
            ds.name = m.name;
        }
        ds.sampling_freq = m.sampling_freq;
        ds.split = m.split;
        ds.validate()?;
    }
    Ok(ds)
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line() as usize);
    parse_err(path, line, e.to_string())
}

fn infer_classes<'a>(labels: impl Iterator<Item = &'a str>) -> Vec<String> {
    let set: BTreeSet<&str> = labels.collect();
    let mut names: Vec<String> = set.into_iter().map(str::to_string).collect();
    if names.iter().all(|n| n.parse::<i64>().is_ok()) {
        names.sort_by_key(|n| n.parse::<i64>().expect("checked"));
    }
    names
}

/// Writes the CSV fallback plus its metadata sidecar.
pub fn write_csv(ds: &TimeSeriesDataset, path: &Path) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(|e| csv_err(path, e))?;
    for n in 0..ds.len() {
        let mut row: Vec<String> = Vec::with_capacity(ds.channels() * ds.length() + 1);
        for c in 0..ds.channels() {
            row.extend(ds.instances.series(n, c).iter().map(f64::to_string));
        }
        row.push(ds.class_names[ds.labels[n]].clone());
        w.write_record(&row).map_err(|e| csv_err(path, e))?;
    }
    w.flush()?;
    write_metadata(&ds.metadata(), &sidecar_path(path))
}

fn apply_sidecar(ds: &mut TimeSeriesDataset, path: &Path) -> Result<()> {
    let side = sidecar_path(path);
    if side.exists() {
        let m = read_metadata(&side)?;
        ds.sampling_freq = m.sampling_freq;
        ds.split = m.split;
        if !m.name.is_empty() {
            ds.name = m.name;
        }
        ds.validate()?;
    }
    Ok(())
}

/// Loads `.ts` or `.csv` by extension.
pub fn load_dataset(path: &Path) -> Result<TimeSeriesDataset> {
    match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
        Some("ts") => load_ts_archive(path),
        Some("csv") => load_csv(path),
        _ => Err(Error::invalid(format!("unsupported dataset file {}", path.display()))),
    }
}

/// Threshold below which a series is treated as constant.
pub const ZNORM_MIN_STD: f64 = 1e-8;

/// Per-instance, per-variable z-normalisation with population std; nearly
/// constant series are only mean-centred.
pub fn znormalize(ds: &TimeSeriesDataset) -> TimeSeriesDataset {
    ds.map_series(|s| Ok(znormalize_series(s))).expect("infallible")
}

pub fn znormalize_series(s: &[f64]) -> Vec<f64> {
    let n = s.len() as f64;
    let mean = s.iter().sum::<f64>() / n;
    let var = s.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    if std < ZNORM_MIN_STD {
        s.iter().map(|v| v - mean).collect()
    } else {
        s.iter().map(|v| (v - mean) / std).collect()
    }
}

/// Stratified split: a `test_fraction` share of every class goes to the
/// test set, chosen by a seeded shuffle.
pub fn train_test_split(
    ds: &TimeSeriesDataset,
    test_fraction: f64,
    seed: u64,
) -> Result<(TimeSeriesDataset, TimeSeriesDataset)> {
    if !(0.0..1.0).contains(&test_fraction) {
        return Err(Error::invalid("test fraction must lie in [0, 1)"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = Vec::new();
    let mut test = Vec::new();
    for class in 0..ds.classes() {
        let mut idx: Vec<usize> = (0..ds.len()).filter(|&i| ds.labels[i] == class).collect();
        idx.shuffle(&mut rng);
        let k = (idx.len() as f64 * test_fraction).round() as usize;
        test.extend_from_slice(&idx[..k]);
        train.extend_from_slice(&idx[k..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((subset(ds, &train, Split::Train), subset(ds, &test, Split::Test)))
}

pub fn subset(ds: &TimeSeriesDataset, indices: &[usize], split: Split) -> TimeSeriesDataset {
    TimeSeriesDataset {
        instances: ds.instances.select(indices),
        labels: indices.iter().map(|&i| ds.labels[i]).collect(),
        class_names: ds.class_names.clone(),
        sampling_freq: ds.sampling_freq,
        name: ds.name.clone(),
        split,
    }
}

/// Low-frequency class template.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassTone {
    pub bin: usize,
    pub phase: f64,
}

/// Parameters of the synthetic low-frequency dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub classes: usize,
    pub instances: usize,
    pub length: usize,
    /// Amplitude of each high-frequency noise tone.
    pub noise_hf_amplitude: f64,
    /// High-frequency tones per instance.
    pub noise_tones: usize,
    pub seed: u64,
    /// Overrides the per-class templates; defaults to evenly spaced bins
    /// below `length / 8`.
    pub tones: Option<Vec<ClassTone>>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            classes: 2,
            instances: 400,
            length: 128,
            noise_hf_amplitude: 0.25,
            noise_tones: 3,
            seed: 0,
            tones: None,
        }
    }
}

impl SynthConfig {
    /// Class templates: distinct bins in `[1, length/8)` and evenly spread
    /// phases.
    pub fn class_tones(&self) -> Result<Vec<ClassTone>> {
        if let Some(t) = &self.tones {
            if t.len() != self.classes {
                return Err(Error::invalid(format!("{} tones for {} classes", t.len(), self.classes)));
            }
            return Ok(t.clone());
        }
        let limit = self.length.div_ceil(8);
        let avail = limit.saturating_sub(1);
        if avail < self.classes {
            return Err(Error::invalid(format!(
                "length {} leaves {avail} low-frequency bins for {} classes",
                self.length, self.classes
            )));
        }
        let step = avail / self.classes;
        Ok((0..self.classes)
            .map(|c| ClassTone {
                bin: 1 + c * step,
                phase: TAU * c as f64 / self.classes as f64,
            })
            .collect())
    }
}

/// Generates instances `a·cos(2π k_y t/T + φ_y + δ) + Σ noise tones`, where
/// the class tone `(k_y, φ_y)` lies below bin `T/8`, `a ~ U(0.8, 1.2)`,
/// `δ ~ U(-0.25, 0.25)`, and each noise tone sits at a random bin above
/// `T/4` with random phase and amplitude `noise_hf_amplitude`. Classes are
/// balanced and interleaved.
pub fn synth_lowfreq_dataset(cfg: &SynthConfig) -> Result<TimeSeriesDataset> {
    if cfg.classes < 2 || cfg.instances == 0 {
        return Err(Error::invalid("synthetic data needs ≥ 2 classes and ≥ 1 instance"));
    }
    if cfg.length < 16 {
        return Err(Error::invalid("synthetic series need length ≥ 16"));
    }
    if !(cfg.noise_hf_amplitude >= 0.0 && cfg.noise_hf_amplitude.is_finite()) {
        return Err(Error::invalid("noise amplitude must be non-negative"));
    }
    let tones = cfg.class_tones()?;
    let t_len = cfg.length;
    let max_bin = spectral::bin_count(t_len) - 1;
    let lo = t_len / 4 + 1;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut data = Tensor3::zeros(cfg.instances, 1, t_len);
    let mut labels = Vec::with_capacity(cfg.instances);
    for n in 0..cfg.instances {
        let y = n % cfg.classes;
        let tone = tones[y];
        let a: f64 = rng.gen_range(0.8..1.2);
        let jitter: f64 = rng.gen_range(-0.25..0.25);
        let noise: Vec<(usize, f64)> = (0..cfg.noise_tones)
            .map(|_| (rng.gen_range(lo..=max_bin), rng.gen_range(0.0..TAU)))
            .collect();
        let s = data.series_mut(n, 0);
        for (t, v) in s.iter_mut().enumerate() {
            let w = TAU * t as f64 / t_len as f64;
            *v = a * (w * tone.bin as f64 + tone.phase + jitter).cos();
            for &(k, ph) in &noise {
                *v += cfg.noise_hf_amplitude * (w * k as f64 + ph).cos();
            }
        }
        labels.push(y);
    }
    let names = (1..=cfg.classes).map(|c| c.to_string()).collect();
    Ok(TimeSeriesDataset::new(data, labels, names)?.with_name("synth_lowfreq"))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CentroidStats {
    pub mean: f64,
    /// Population variance.
    pub variance: f64,
    /// Series contributing to the statistics.
    pub count: usize,
    /// All-zero series that were skipped.
    pub skipped: usize,
}

/// Frequency centroid of every variable of every instance divided by the
/// maximum bin, summarised by mean and variance.
pub fn dataset_centroid_ratio(ds: &TimeSeriesDataset) -> Result<CentroidStats> {
    let mut ratios = Vec::new();
    let mut skipped = 0;
    for n in 0..ds.len() {
        for c in 0..ds.channels() {
            let s = spectral::amplitude_spectrum(ds.instances.series(n, c), ds.sampling_freq)?;
            if s.is_degenerate() {
                skipped += 1;
                continue;
            }
            ratios.push(spectral::normalized_centroid(&s)?);
        }
    }
    if ratios.is_empty() {
        return Err(Error::DegenerateSpectrum);
    }
    let mean = ratios.iter().sum::<f64>() / ratios.len() as f64;
    let variance = ratios.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / ratios.len() as f64;
    Ok(CentroidStats {
        mean,
        variance,
        count: ratios.len(),
        skipped,
    })
}
