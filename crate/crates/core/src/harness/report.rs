use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use crate::data::CentroidStats;
use crate::focus::FocusReport;
use crate::{Error, Result};

/// One trained (or evaluated) model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub dataset: String,
    /// `<backbone>-<depth>`.
    pub model: String,
    pub depth: usize,
    /// Data or gating variant, e.g. `full`, `lfc`, `restore_0.1`, `skip_3`.
    pub variant: String,
    pub regulated: bool,
    pub seed: u64,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    pub params: u64,
    pub flops: u64,
    /// Skipped units (0-based), `;`-separated.
    pub skipped: String,
    /// Wall time; kept out of the deterministic artefacts.
    #[serde(skip)]
    pub seconds: f64,
}

impl RunRecord {
    pub fn config_key(&self) -> String {
        if self.variant.is_empty() {
            self.model.clone()
        } else {
            format!("{}/{}", self.model, self.variant)
        }
    }
}

/// Median over seeds for one configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MedianRow {
    pub dataset: String,
    pub model: String,
    pub depth: usize,
    pub variant: String,
    pub regulated: bool,
    pub seeds: usize,
    pub median_train_accuracy: f64,
    pub median_test_accuracy: f64,
    pub median_params: f64,
    pub median_flops: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankRow {
    pub dataset: String,
    pub config: String,
    pub median_test_accuracy: f64,
    pub rank: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelledFocus {
    pub seed: u64,
    pub label: String,
    pub report: FocusReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlotPoint {
    pub series: String,
    pub x: f64,
    pub y: f64,
}

/// `series,x,y` rows for one figure analog.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlotData {
    pub name: String,
    pub points: Vec<PlotPoint>,
}

impl PlotData {
    pub fn new(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            points: Vec::new(),
        }
    }

    pub fn push(&mut self, series: impl Into<String>, x: f64, y: f64) {
        self.points.push(PlotPoint {
            series: series.into(),
            x,
            y,
        });
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DegradationSummary {
    /// Median test accuracy per depth.
    pub accuracy_by_depth: BTreeMap<usize, f64>,
    pub flagged_depths: Vec<usize>,
}

/// Everything one experiment produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config_hash: String,
    pub config: ExperimentConfig,
    pub runs: Vec<RunRecord>,
    pub medians: Vec<MedianRow>,
    pub focus_reports: Vec<LabelledFocus>,
    pub degradation: Option<DegradationSummary>,
    pub centroid_stats: BTreeMap<String, CentroidStats>,
    /// Monotonicity of the restore curve per configuration (reported only).
    pub restore_monotone: BTreeMap<String, bool>,
    pub plots: Vec<PlotData>,
    /// Extra files written next to the report (relative names).
    pub artifacts: Vec<String>,
}

impl RunReport {
    pub fn new(cfg: &ExperimentConfig) -> Self {
        Self {
            config_hash: cfg.hash(),
            config: cfg.canonical(),
            runs: Vec::new(),
            medians: Vec::new(),
            focus_reports: Vec::new(),
            degradation: None,
            centroid_stats: BTreeMap::new(),
            restore_monotone: BTreeMap::new(),
            plots: Vec::new(),
            artifacts: Vec::new(),
        }
    }

    /// Recomputes `medians` from `runs`.
    pub fn finalize(&mut self) {
        self.medians = medians(&self.runs);
    }

    pub fn ranks(&self) -> Vec<RankRow> {
        rank_table(&self.medians)
    }
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        (v[m - 1] + v[m]) / 2.0
    }
}

/// Groups runs by (dataset, model, variant, regulated) in first-seen order.
pub fn medians(runs: &[RunRecord]) -> Vec<MedianRow> {
    let mut order: Vec<(String, String, String, bool)> = Vec::new();
    let mut groups: BTreeMap<(String, String, String, bool), Vec<&RunRecord>> = BTreeMap::new();
    for r in runs {
        let key = (r.dataset.clone(), r.model.clone(), r.variant.clone(), r.regulated);
        if !groups.contains_key(&key) {
            order.push(key.clone());
        }
        groups.entry(key).or_default().push(r);
    }
    order
        .into_iter()
        .map(|key| {
            let g = &groups[&key];
            let col = |f: fn(&RunRecord) -> f64| median(&g.iter().map(|r| f(r)).collect::<Vec<_>>());
            MedianRow {
                dataset: key.0.clone(),
                model: key.1.clone(),
                depth: g[0].depth,
                variant: key.2.clone(),
                regulated: key.3,
                seeds: g.len(),
                median_train_accuracy: col(|r| r.train_accuracy),
                median_test_accuracy: col(|r| r.test_accuracy),
                median_params: col(|r| r.params as f64),
                median_flops: col(|r| r.flops as f64),
            }
        })
        .collect()
}

/// Ranks configurations within each dataset by median test accuracy
/// (1 = best); tied configurations share the average of their ranks.
pub fn rank_table(rows: &[MedianRow]) -> Vec<RankRow> {
    let mut by_dataset: BTreeMap<&str, Vec<&MedianRow>> = BTreeMap::new();
    for r in rows {
        by_dataset.entry(&r.dataset).or_default().push(r);
    }
    let mut out = Vec::new();
    for (dataset, mut rows) in by_dataset {
        rows.sort_by(|a, b| {
            b.median_test_accuracy
                .total_cmp(&a.median_test_accuracy)
                .then_with(|| config_key(a).cmp(&config_key(b)))
        });
        let mut i = 0;
        while i < rows.len() {
            let mut j = i;
            while j + 1 < rows.len() && rows[j + 1].median_test_accuracy == rows[i].median_test_accuracy {
                j += 1;
            }
            let rank = (i + j) as f64 / 2.0 + 1.0;
            for r in &rows[i..=j] {
                out.push(RankRow {
                    dataset: dataset.to_string(),
                    config: config_key(r),
                    median_test_accuracy: r.median_test_accuracy,
                    rank,
                });
            }
            i = j + 1;
        }
    }
    out
}

fn config_key(r: &MedianRow) -> String {
    let mut k = r.model.clone();
    if !r.variant.is_empty() {
        k.push('/');
        k.push_str(&r.variant);
    }
    k
}

/// Mean rank of every configuration across datasets.
pub fn average_ranks(ranks: &[RankRow]) -> BTreeMap<String, f64> {
    let mut acc: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for r in ranks {
        let e = acc.entry(r.config.clone()).or_default();
        e.0 += r.rank;
        e.1 += 1;
    }
    acc.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect()
}

fn write_csv_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::invalid(format!("{}: {e}", path.display())))?;
    for r in rows {
        w.serialize(r)
            .map_err(|e| Error::invalid(format!("{}: {e}", path.display())))?;
    }
    w.flush()?;
    Ok(())
}

/// Writes `runs.csv`, `medians.csv`, `ranks.csv`, `report.json`, one
/// `plot_<name>.csv` per plot, and `timings.csv`. Everything except
/// `timings.csv` is a pure function of the config.
pub fn emit_reports(report: &RunReport, out_dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out_dir)?;
    let mut written = Vec::new();
    let p = out_dir.join("runs.csv");
    write_csv_rows(&p, &report.runs)?;
    written.push(p);
    let p = out_dir.join("medians.csv");
    write_csv_rows(&p, &report.medians)?;
    written.push(p);
    let p = out_dir.join("ranks.csv");
    write_csv_rows(&p, &report.ranks())?;
    written.push(p);
    for plot in &report.plots {
        let p = out_dir.join(format!("plot_{}.csv", plot.name));
        write_csv_rows(&p, &plot.points)?;
        written.push(p);
    }
    let p = out_dir.join("report.json");
    std::fs::write(&p, serde_json::to_string_pretty(report)? + "\n")?;
    written.push(p);

    #[derive(Serialize)]
    struct Timing<'a> {
        model: &'a str,
        variant: &'a str,
        seed: u64,
        seconds: f64,
    }
    let timings: Vec<Timing> = report
        .runs
        .iter()
        .map(|r| Timing {
            model: &r.model,
            variant: &r.variant,
            seed: r.seed,
            seconds: r.seconds,
        })
        .collect();
    let p = out_dir.join("timings.csv");
    write_csv_rows(&p, &timings)?;
    written.push(p);
    Ok(written)
}

/// Reads the `runs.csv` of each directory.
pub fn read_runs(dir: &Path) -> Result<Vec<RunRecord>> {
    let path = dir.join("runs.csv");
    let mut r = csv::Reader::from_path(&path).map_err(|e| Error::invalid(format!("{}: {e}", path.display())))?;
    r.deserialize()
        .map(|row| row.map_err(|e| Error::invalid(format!("{}: {e}", path.display()))))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergedReport {
    pub medians: Vec<MedianRow>,
    pub ranks: Vec<RankRow>,
    pub average_ranks: BTreeMap<String, f64>,
}

/// Combines several experiment directories into one rank table, written to
/// `out_dir` as `ranks.csv`, `average_ranks.csv` and `summary.json`.
pub fn merge_reports(dirs: &[PathBuf], out_dir: &Path) -> Result<MergedReport> {
    if dirs.is_empty() {
        return Err(Error::invalid("no report directories given"));
    }
    let mut runs = Vec::new();
    for d in dirs {
        runs.extend(read_runs(d)?);
    }
    let med = medians(&runs);
    let ranks = rank_table(&med);
    let avg = average_ranks(&ranks);
    std::fs::create_dir_all(out_dir)?;
    write_csv_rows(&out_dir.join("medians.csv"), &med)?;
    write_csv_rows(&out_dir.join("ranks.csv"), &ranks)?;
    #[derive(Serialize)]
    struct Avg<'a> {
        config: &'a str,
        average_rank: f64,
    }
    let rows: Vec<Avg> = avg
        .iter()
        .map(|(c, r)| Avg {
            config: c,
            average_rank: *r,
        })
        .collect();
    write_csv_rows(&out_dir.join("average_ranks.csv"), &rows)?;
    let merged = MergedReport {
        medians: med,
        ranks,
        average_ranks: avg,
    };
    std::fs::write(out_dir.join("summary.json"), serde_json::to_string_pretty(&merged)? + "\n")?;
    Ok(merged)
}
