//! Experiment orchestration: configs, runners and report files.
//!
//! Every runner is a pure function of its [`ExperimentConfig`]; wall time is
//! the only non-deterministic output and is written to `timings.csv` alone.

mod config;
mod report;

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use log::info;

pub use config::{DatasetSpec, ExperimentConfig, ExperimentKind, GradCamOptions, DATA_ROOT_ENV, DESK_EPOCHS};
pub use report::{
    average_ranks, emit_reports, median, medians, merge_reports, rank_table, read_runs, DegradationSummary,
    LabelledFocus, MedianRow, MergedReport, PlotData, PlotPoint, RankRow, RunRecord, RunReport,
};

use crate::data::{self, TimeSeriesDataset};
use crate::focus::{self, RegulationPoint};
use crate::gradcam;
use crate::net::{checkpoint, count_params_flops, Network, NetworkSpec, TrainConfig, Trainer};
use crate::spectral::{self, BandFilterSpec, BandMode};
use crate::{Error, Result};

/// Runs the configured experiment and, when `out_dir` is set, writes its
/// report files there.
pub fn execute(cfg: &ExperimentConfig) -> Result<RunReport> {
    let report = run_experiment(cfg)?;
    if let Some(dir) = &cfg.out_dir {
        emit_reports(&report, dir)?;
    }
    Ok(report)
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunReport> {
    cfg.validate()?;
    info!("{} experiment, config {}", cfg.kind.as_str(), &cfg.hash()[..12]);
    let mut report = match cfg.kind {
        ExperimentKind::Train => run_train(cfg),
        ExperimentKind::DepthSweep => run_depth_sweep(cfg),
        ExperimentKind::BandFilter => run_band_experiment(cfg),
        ExperimentKind::LfcRestore => run_lfc_restore_experiment(cfg),
        ExperimentKind::SkipSweep => run_skip_sweep(cfg),
        ExperimentKind::Regulate => run_regulate(cfg),
        ExperimentKind::Gradcam => run_gradcam(cfg),
        ExperimentKind::CentroidStats => run_centroid_stats(cfg),
    }?;
    report.finalize();
    Ok(report)
}

fn network_spec(cfg: &ExperimentConfig, ds: &TimeSeriesDataset, depth: usize, seed: u64) -> NetworkSpec {
    NetworkSpec::build(cfg.backbone, ds.channels(), ds.classes(), depth, cfg.filters.as_deref()).with_seed(seed)
}

fn train_config(cfg: &ExperimentConfig, seed: u64) -> TrainConfig {
    TrainConfig {
        seed,
        ..cfg.train.clone()
    }
}

fn new_trainer(cfg: &ExperimentConfig, ds: &TimeSeriesDataset, depth: usize, seed: u64) -> Result<Trainer> {
    Trainer::new(Network::ungated(network_spec(cfg, ds, depth, seed))?, train_config(cfg, seed))
}

fn model_name(cfg: &ExperimentConfig, depth: usize) -> String {
    format!("{}-{depth}", cfg.backbone)
}

struct RecordArgs<'a> {
    variant: &'a str,
    regulated: bool,
    seed: u64,
    started: Instant,
}

fn record(
    net: &Network,
    train: &TimeSeriesDataset,
    test: &TimeSeriesDataset,
    args: RecordArgs<'_>,
) -> Result<RunRecord> {
    let spec = net.spec();
    let cost = count_params_flops(spec, net.plan(), train.length());
    let skipped: Vec<String> = net.plan().skipped().iter().map(usize::to_string).collect();
    Ok(RunRecord {
        dataset: train.name.clone(),
        model: format!("{}-{}", spec.backbone, spec.depth()),
        depth: spec.depth(),
        variant: args.variant.to_string(),
        regulated: args.regulated,
        seed: args.seed,
        train_accuracy: net.accuracy(&train.instances, &train.labels)?,
        test_accuracy: net.accuracy(&test.instances, &test.labels)?,
        params: cost.params,
        flops: cost.flops,
        skipped: skipped.join(";"),
        seconds: args.started.elapsed().as_secs_f64(),
    })
}

fn fit(cfg: &ExperimentConfig, ds: &TimeSeriesDataset, depth: usize, seed: u64) -> Result<Trainer> {
    let mut t = new_trainer(cfg, ds, depth, seed)?;
    t.train_until(&ds.instances, &ds.labels, cfg.train.epochs)?;
    Ok(t)
}

fn run_train(cfg: &ExperimentConfig) -> Result<RunReport> {
    let (train, test) = cfg.load_data()?;
    let mut report = RunReport::new(cfg);
    let depth = cfg.depths[0];
    for &seed in &cfg.seeds {
        let started = Instant::now();
        let mut t = new_trainer(cfg, &train, depth, seed)?;
        let hist = t.train_until(&train.instances, &train.labels, cfg.train.epochs)?;
        let mut curve = PlotData::new(format!("loss_seed{seed}"));
        for e in &hist {
            curve.push("loss", (e.epoch + 1) as f64, e.loss);
            curve.push("train_accuracy", (e.epoch + 1) as f64, e.accuracy);
        }
        report.plots.push(curve);
        report.runs.push(record(
            t.network(),
            &train,
            &test,
            RecordArgs {
                variant: "",
                regulated: false,
                seed,
                started,
            },
        )?);
        if let Some(dir) = &cfg.out_dir {
            std::fs::create_dir_all(dir)?;
            let name = format!("model_{}_seed{seed}.ckpt", model_name(cfg, depth));
            checkpoint::save(&t, &dir.join(&name))?;
            report.artifacts.push(name);
        }
    }
    Ok(report)
}

/// Trains every depth with the same seeds and data and flags degradation
/// on the median test accuracy per depth.
pub fn run_depth_sweep(cfg: &ExperimentConfig) -> Result<RunReport> {
    let (train, test) = cfg.load_data()?;
    let mut report = RunReport::new(cfg);
    for &depth in &cfg.depths {
        for &seed in &cfg.seeds {
            let started = Instant::now();
            let t = fit(cfg, &train, depth, seed)?;
            let r = record(
                t.network(),
                &train,
                &test,
                RecordArgs {
                    variant: "",
                    regulated: false,
                    seed,
                    started,
                },
            )?;
            info!("depth {depth} seed {seed}: test accuracy {:.4}", r.test_accuracy);
            report.runs.push(r);
        }
    }
    report.finalize();
    let mut plot = PlotData::new("depth_accuracy");
    let mut by_depth = BTreeMap::new();
    for m in &report.medians {
        plot.push("train", m.depth as f64, m.median_train_accuracy);
        plot.push("test", m.depth as f64, m.median_test_accuracy);
        by_depth.insert(m.depth, m.median_test_accuracy);
    }
    report.plots.push(plot);
    report.degradation = Some(DegradationSummary {
        flagged_depths: focus::detect_degradation(&by_depth),
        accuracy_by_depth: by_depth,
    });
    Ok(report)
}

/// Filters every series of `ds` around its own frequency centroid. All-zero
/// series pass through unchanged.
pub fn band_filter_dataset(ds: &TimeSeriesDataset, mode: BandMode, fraction: f64) -> Result<TimeSeriesDataset> {
    ds.map_series(|s| {
        if s.iter().all(|&v| v == 0.0) {
            return Ok(s.to_vec());
        }
        spectral::band_filter(s, &BandFilterSpec::for_signal(s, mode, fraction)?)
    })
}

fn reject_degenerate(ds: &TimeSeriesDataset, variant: &str) -> Result<()> {
    if ds.instances.data().iter().all(|&v| v.abs() < 1e-12) {
        return Err(Error::invalid(format!(
            "{variant} filtering left the {:?} set identically zero; nothing to learn from",
            ds.split
        )));
    }
    Ok(())
}

fn band_variants(train: &TimeSeriesDataset, test: &TimeSeriesDataset) -> Result<Vec<(String, TimeSeriesDataset, TimeSeriesDataset)>> {
    let mut out = vec![("full".to_string(), train.clone(), test.clone())];
    for (name, mode, f) in [
        ("lfc", BandMode::KeepLfc, 0.0),
        ("hfc", BandMode::KeepHfc, 0.0),
        ("restore_1", BandMode::RestoreLfcFraction, 1.0),
    ] {
        let tr = band_filter_dataset(train, mode, f)?;
        let te = band_filter_dataset(test, mode, f)?;
        reject_degenerate(&tr, name)?;
        reject_degenerate(&te, name)?;
        out.push((name.to_string(), tr, te));
    }
    Ok(out)
}

/// Trains and evaluates on LFC-only, HFC-only, unfiltered and fully
/// restored (control) versions of the data for every depth.
pub fn run_band_experiment(cfg: &ExperimentConfig) -> Result<RunReport> {
    let (train, test) = cfg.load_data()?;
    let variants = band_variants(&train, &test)?;
    let mut report = RunReport::new(cfg);
    for &depth in &cfg.depths {
        for &seed in &cfg.seeds {
            // Variants with identical data give identical runs; train once.
            let mut done: Vec<(usize, RunRecord)> = Vec::new();
            for (i, (name, tr, te)) in variants.iter().enumerate() {
                let same = done
                    .iter()
                    .find(|(j, _)| variants[*j].1 == *tr && variants[*j].2 == *te)
                    .map(|(_, r)| r.clone());
                let r = match same {
                    Some(r) => RunRecord {
                        variant: name.clone(),
                        seconds: 0.0,
                        ..r
                    },
                    None => {
                        let started = Instant::now();
                        let t = fit(cfg, tr, depth, seed)?;
                        record(
                            t.network(),
                            tr,
                            te,
                            RecordArgs {
                                variant: name,
                                regulated: false,
                                seed,
                                started,
                            },
                        )?
                    }
                };
                done.push((i, r.clone()));
                report.runs.push(r);
            }
        }
    }
    report.finalize();
    let mut plot = PlotData::new("band_accuracy");
    for m in &report.medians {
        plot.push(format!("{}_train", m.variant), m.depth as f64, m.median_train_accuracy);
        plot.push(format!("{}_test", m.variant), m.depth as f64, m.median_test_accuracy);
    }
    report.plots.push(plot);
    Ok(report)
}

fn restore_label(f: f64) -> String {
    format!("restore_{f}")
}

fn regulated_trainer(cfg: &ExperimentConfig, train: &TimeSeriesDataset, depth: usize, seed: u64) -> Result<(Trainer, Trainer, RegulationPoint)> {
    let mut t = new_trainer(cfg, train, depth, seed)?;
    let point = focus::train_to_regulation_point(&mut t, &train.instances, &train.labels, &cfg.regulator, train.sampling_freq)?;
    let mut regulated = t.clone();
    regulated.apply_plan(point.plan.clone(), focus::regulation_init_seed(t.network().spec()))?;
    Ok((t, regulated, point))
}

/// Evaluates trained models on HFC-only test data with growing shares of
/// the LFC band restored (fraction 0 is HFC-only, 1 the full signal).
pub fn run_lfc_restore_experiment(cfg: &ExperimentConfig) -> Result<RunReport> {
    let (train, test) = cfg.load_data()?;
    let mut report = RunReport::new(cfg);
    let mut fractions = vec![0.0];
    fractions.extend(cfg.fractions.iter().copied().filter(|&f| f > 0.0 && f < 1.0));
    fractions.push(1.0);
    let test_variants = fractions
        .iter()
        .map(|&f| band_filter_dataset(&test, BandMode::RestoreLfcFraction, f))
        .collect::<Result<Vec<_>>>()?;
    let depth = cfg.depths[0];
    for &seed in &cfg.seeds {
        let started = Instant::now();
        let mut models: Vec<(Trainer, bool)> = Vec::new();
        if cfg.include_regulated {
            let (mut plain, mut reg, point) = regulated_trainer(cfg, &train, depth, seed)?;
            report.focus_reports.push(LabelledFocus {
                seed,
                label: format!("{}@{}", model_name(cfg, depth), cfg.regulator.alpha),
                report: point.report,
            });
            plain.train_until(&train.instances, &train.labels, cfg.train.epochs)?;
            reg.train_until(&train.instances, &train.labels, cfg.train.epochs)?;
            models.push((plain, false));
            models.push((reg, true));
        } else {
            models.push((fit(cfg, &train, depth, seed)?, false));
        }
        for (t, regulated) in &models {
            for (f, te) in fractions.iter().zip(&test_variants) {
                report.runs.push(record(
                    t.network(),
                    &train,
                    te,
                    RecordArgs {
                        variant: &restore_label(*f),
                        regulated: *regulated,
                        seed,
                        started,
                    },
                )?);
            }
        }
    }
    report.finalize();
    let mut plot = PlotData::new("restore_accuracy");
    let mut curves: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for f in &fractions {
        for m in report.medians.iter().filter(|m| m.variant == restore_label(*f)) {
            let series = if m.regulated { format!("{}+reg", m.model) } else { m.model.clone() };
            plot.push(series.clone(), *f, m.median_test_accuracy);
            curves.entry(series).or_default().push(m.median_test_accuracy);
        }
    }
    for (k, v) in curves {
        report.restore_monotone.insert(k, v.windows(2).all(|w| w[1] >= w[0]));
    }
    report.plots.push(plot);
    Ok(report)
}

/// From the α-epoch checkpoint, retrains once per unit with only that unit
/// skipped (plus the unskipped baseline) and reports accuracy next to the
/// unit's focus-scale change.
pub fn run_skip_sweep(cfg: &ExperimentConfig) -> Result<RunReport> {
    let (train, test) = cfg.load_data()?;
    let mut report = RunReport::new(cfg);
    let depth = cfg.depths[0];
    let mut plot = PlotData::new("skip_accuracy");
    for &seed in &cfg.seeds {
        let started = Instant::now();
        let mut ckpt = new_trainer(cfg, &train, depth, seed)?;
        let point = focus::train_to_regulation_point(&mut ckpt, &train.instances, &train.labels, &cfg.regulator, train.sampling_freq)?;
        let prefix = started.elapsed().as_secs_f64();
        let deltas: BTreeMap<usize, f64> = point.report.units.iter().map(|u| (u.unit_index, u.delta)).collect();
        report.focus_reports.push(LabelledFocus {
            seed,
            label: format!("{}@{}", model_name(cfg, depth), cfg.regulator.alpha),
            report: point.report.clone(),
        });
        let spec = ckpt.network().spec().clone();
        let init_seed = focus::regulation_init_seed(&spec);
        for skip in std::iter::once(None).chain((0..depth).map(Some)) {
            let started = Instant::now();
            let mut t = ckpt.clone();
            let variant = match skip {
                None => "baseline".to_string(),
                Some(l) => {
                    t.apply_plan(crate::net::GatePlan::skipping(&spec, &[l])?, init_seed)?;
                    format!("skip_{l}")
                }
            };
            t.train_until(&train.instances, &train.labels, cfg.train.epochs)?;
            let mut r = record(
                t.network(),
                &train,
                &test,
                RecordArgs {
                    variant: &variant,
                    regulated: skip.is_some(),
                    seed,
                    started,
                },
            )?;
            r.seconds += prefix;
            if let Some(l) = skip {
                plot.push(format!("accuracy_seed{seed}"), l as f64, r.test_accuracy);
                plot.push(format!("delta_seed{seed}"), l as f64, deltas.get(&l).copied().unwrap_or(f64::NAN));
            }
            report.runs.push(r);
        }
    }
    report.plots.push(plot);
    Ok(report)
}

/// Two-stage regulated training against the unregulated baseline; both
/// share the first α epochs.
pub fn run_regulate(cfg: &ExperimentConfig) -> Result<RunReport> {
    let (train, test) = cfg.load_data()?;
    let mut report = RunReport::new(cfg);
    let depth = cfg.depths[0];
    let mut scales = PlotData::new("focus_scales");
    let mut centroids = PlotData::new("unit_centroids");
    for &seed in &cfg.seeds {
        let started = Instant::now();
        let (mut plain, mut reg, point) = regulated_trainer(cfg, &train, depth, seed)?;
        let prefix = started.elapsed().as_secs_f64();
        for u in &point.report.units {
            scales.push(format!("seed{seed}"), u.unit_index as f64, u.focus_scale);
            if let Some(c) = u.centroid {
                centroids.push(format!("seed{seed}"), u.unit_index as f64, c);
            }
        }
        report.focus_reports.push(LabelledFocus {
            seed,
            label: format!("{}@{}", model_name(cfg, depth), cfg.regulator.alpha),
            report: point.report,
        });
        for (t, regulated) in [(&mut plain, false), (&mut reg, true)] {
            let started = Instant::now();
            t.train_until(&train.instances, &train.labels, cfg.train.epochs)?;
            let mut r = record(
                t.network(),
                &train,
                &test,
                RecordArgs {
                    variant: if regulated { "regulated" } else { "" },
                    regulated,
                    seed,
                    started,
                },
            )?;
            r.seconds += prefix;
            info!(
                "seed {seed} {}: test accuracy {:.4}, params {}",
                if regulated { "regulated" } else { "original" },
                r.test_accuracy,
                r.params
            );
            report.runs.push(r);
        }
    }
    report.plots.push(scales);
    report.plots.push(centroids);
    Ok(report)
}

/// Trains one model per seed and dumps Grad-CAM maps for chosen test
/// instances (`gradcam_seed<s>_i<n>.csv`).
pub fn run_gradcam(cfg: &ExperimentConfig) -> Result<RunReport> {
    let (train, test) = cfg.load_data()?;
    let mut report = RunReport::new(cfg);
    let depth = cfg.depths[0];
    for &seed in &cfg.seeds {
        let started = Instant::now();
        let t = fit(cfg, &train, depth, seed)?;
        let net = t.network();
        for &i in &cfg.gradcam.instances {
            if i >= test.len() {
                return Err(Error::invalid(format!("test instance {i} out of range ({} instances)", test.len())));
            }
            let x = test.instances.select(&[i]);
            let class = cfg.gradcam.class.unwrap_or(test.labels[i]);
            let cam = gradcam::grad_cam(net, &x, class)?;
            let mut plot = PlotData::new(format!("gradcam_seed{seed}_i{i}"));
            for (t, e) in cam.activation.iter().enumerate() {
                plot.push("E", t as f64, *e);
            }
            for c in 0..x.channels() {
                for (t, v) in x.series(0, c).iter().enumerate() {
                    plot.push(format!("input_{c}"), t as f64, *v);
                }
            }
            report.plots.push(plot);
            if let Some(dir) = &cfg.out_dir {
                std::fs::create_dir_all(dir)?;
                let name = format!("gradcam_seed{seed}_i{i}.csv");
                gradcam::write_csv(&cam, &dir.join(&name))?;
                report.artifacts.push(name);
            }
        }
        report.runs.push(record(
            net,
            &train,
            &test,
            RecordArgs {
                variant: "",
                regulated: false,
                seed,
                started,
            },
        )?);
    }
    Ok(report)
}

/// Dataset-level centroid ratio statistics for both splits.
pub fn run_centroid_stats(cfg: &ExperimentConfig) -> Result<RunReport> {
    let (train, test) = cfg.load_data()?;
    let mut report = RunReport::new(cfg);
    let mut plot = PlotData::new("centroid_ratios");
    for (name, ds) in [("train", &train), ("test", &test)] {
        report.centroid_stats.insert(name.into(), data::dataset_centroid_ratio(ds)?);
        for n in 0..ds.len() {
            for c in 0..ds.channels() {
                let s = spectral::amplitude_spectrum(ds.instances.series(n, c), ds.sampling_freq)?;
                if !s.is_degenerate() {
                    plot.push(name, n as f64, spectral::normalized_centroid(&s)?);
                }
            }
        }
    }
    report.plots.push(plot);
    Ok(report)
}

/// Loads a report written by [`emit_reports`].
pub fn read_report(dir: &Path) -> Result<RunReport> {
    Ok(serde_json::from_str(&std::fs::read_to_string(dir.join("report.json"))?)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::SynthConfig;

    fn tiny(kind: ExperimentKind) -> ExperimentConfig {
        ExperimentConfig {
            kind,
            dataset: DatasetSpec::Synth(SynthConfig {
                instances: 24,
                length: 32,
                ..Default::default()
            }),
            depths: vec![1, 2],
            filters: Some(vec![4, 6]),
            train: TrainConfig {
                epochs: 3,
                batch_size: 8,
                ..Default::default()
            },
            regulator: crate::RegulatorConfig { alpha: 2, max_skips: 1 },
            fractions: vec![0.5],
            ..Default::default()
        }
    }

    #[test]
    fn every_kind_runs() {
        for kind in [
            ExperimentKind::Train,
            ExperimentKind::DepthSweep,
            ExperimentKind::BandFilter,
            ExperimentKind::LfcRestore,
            ExperimentKind::SkipSweep,
            ExperimentKind::Regulate,
            ExperimentKind::Gradcam,
            ExperimentKind::CentroidStats,
        ] {
            let r = run_experiment(&tiny(kind)).unwrap_or_else(|e| panic!("{kind:?}: {e}"));
            assert_eq!(r.config_hash, tiny(kind).hash());
        }
    }

    #[test]
    fn single_depth_sweep_has_no_flags() {
        let cfg = ExperimentConfig {
            depths: vec![2],
            ..tiny(ExperimentKind::DepthSweep)
        };
        let r = run_experiment(&cfg).unwrap();
        assert!(r.degradation.unwrap().flagged_depths.is_empty());
    }

    #[test]
    fn identical_depths_agree() {
        let cfg = ExperimentConfig {
            depths: vec![2, 2],
            ..tiny(ExperimentKind::DepthSweep)
        };
        let r = run_experiment(&cfg).unwrap();
        assert_eq!(r.runs[0].test_accuracy, r.runs[1].test_accuracy);
        assert!(r.degradation.unwrap().flagged_depths.is_empty());
    }

    #[test]
    fn band_control_equals_full() {
        let r = run_experiment(&tiny(ExperimentKind::BandFilter)).unwrap();
        let acc = |v: &str, d: usize| r.runs.iter().find(|x| x.variant == v && x.depth == d).unwrap().test_accuracy;
        for d in [1, 2] {
            assert_eq!(acc("full", d), acc("restore_1", d));
        }
    }

    #[test]
    fn restore_endpoints_match_band_variants() {
        let cfg = tiny(ExperimentKind::LfcRestore);
        let (_, test) = cfg.load_data().unwrap();
        let hfc = band_filter_dataset(&test, BandMode::KeepHfc, 0.0).unwrap();
        let r0 = band_filter_dataset(&test, BandMode::RestoreLfcFraction, 0.0).unwrap();
        let r1 = band_filter_dataset(&test, BandMode::RestoreLfcFraction, 1.0).unwrap();
        assert_eq!(hfc, r0);
        assert_eq!(r1, test);
    }

    #[test]
    fn degenerate_band_rejected() {
        let mut cfg = tiny(ExperimentKind::BandFilter);
        // Pure DC after the generator: every HFC band is empty.
        cfg.znormalize = false;
        let (train, _) = cfg.load_data().unwrap();
        let dc = train.map_series(|s| Ok(vec![1.0; s.len()])).unwrap();
        let hfc = band_filter_dataset(&dc, BandMode::KeepHfc, 0.0).unwrap();
        assert!(reject_degenerate(&hfc, "hfc").is_err());
    }
}
