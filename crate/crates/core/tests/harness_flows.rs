use std::collections::BTreeMap;
use std::path::Path;

use freqfocus::data::SynthConfig;
use freqfocus::harness::{self, DatasetSpec, ExperimentConfig, ExperimentKind, RunRecord};
use freqfocus::{RegulatorConfig, TrainConfig};

fn cfg(kind: ExperimentKind, instances: usize, length: usize, epochs: usize) -> ExperimentConfig {
    ExperimentConfig {
        kind,
        dataset: DatasetSpec::Synth(SynthConfig {
            instances,
            length,
            ..Default::default()
        }),
        depths: vec![3],
        filters: Some(vec![4, 6]),
        train: TrainConfig {
            epochs,
            batch_size: 8,
            ..Default::default()
        },
        regulator: RegulatorConfig { alpha: 2, max_skips: 1 },
        seeds: vec![0, 1],
        ..Default::default()
    }
}

fn by_key(runs: &[RunRecord]) -> BTreeMap<(u64, bool), f64> {
    runs.iter().map(|r| ((r.seed, r.regulated), r.test_accuracy)).collect()
}

#[test]
fn skip_sweep_baseline_matches_unregulated_run() {
    let sweep = harness::run_experiment(&cfg(ExperimentKind::SkipSweep, 24, 32, 4)).unwrap();
    let reg = harness::run_experiment(&cfg(ExperimentKind::Regulate, 24, 32, 4)).unwrap();
    let base: Vec<RunRecord> = sweep.runs.iter().filter(|r| r.variant == "baseline").cloned().collect();
    let plain: Vec<RunRecord> = reg.runs.iter().filter(|r| !r.regulated).cloned().collect();
    assert_eq!(base.len(), 2);
    for (a, b) in base.iter().zip(&plain) {
        assert_eq!((a.seed, a.train_accuracy, a.test_accuracy, a.params), (b.seed, b.train_accuracy, b.test_accuracy, b.params));
    }
    // Both experiments see the same α-epoch focus report.
    assert_eq!(sweep.focus_reports, reg.focus_reports);
    // One run per unit plus the baseline, per seed.
    assert_eq!(sweep.runs.len(), 2 * 4);
    let by = by_key(&reg.runs);
    assert_eq!(by.len(), 4);
}

#[test]
fn single_unit_network_can_skip_its_only_unit() {
    let mut c = cfg(ExperimentKind::SkipSweep, 24, 32, 3);
    c.depths = vec![1];
    c.seeds = vec![0];
    let r = harness::run_experiment(&c).unwrap();
    let variants: Vec<&str> = r.runs.iter().map(|r| r.variant.as_str()).collect();
    assert_eq!(variants, ["baseline", "skip_0"]);
    let skipped = &r.runs[1];
    assert_eq!(skipped.skipped, "0");
    // With no unit left only the head remains: (channels + 1) · classes.
    assert_eq!(skipped.params, 4);
    assert!((0.0..=1.0).contains(&skipped.test_accuracy));
}

fn files(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.file_name().unwrap() != "timings.csv")
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
        .collect()
}

#[test]
fn replay_reproduces_every_report_file() {
    let tmp = tempfile::tempdir().unwrap();
    let mut outs = Vec::new();
    for run in ["a", "b"] {
        let mut c = cfg(ExperimentKind::Regulate, 24, 32, 3);
        c.out_dir = Some(tmp.path().join(run));
        harness::execute(&c).unwrap();
        outs.push(files(&tmp.path().join(run)));
    }
    assert!(outs[0].contains_key("report.json"));
    assert_eq!(outs[0], outs[1]);

    // Re-running from the config stored in the report gives the same hash.
    let stored = harness::read_report(&tmp.path().join("a")).unwrap();
    assert_eq!(stored.config.hash(), cfg(ExperimentKind::Regulate, 24, 32, 3).hash());
}

#[test]
fn low_band_beats_high_band() {
    let mut c = cfg(ExperimentKind::BandFilter, 96, 64, 12);
    c.depths = vec![2];
    c.filters = Some(vec![8]);
    c.seeds = vec![0];
    let r = harness::run_experiment(&c).unwrap();
    let acc = |v: &str| r.runs.iter().find(|x| x.variant == v).unwrap().test_accuracy;
    assert!(acc("lfc") >= acc("hfc"), "lfc {} hfc {}", acc("lfc"), acc("hfc"));
    assert!(acc("lfc") >= 0.9, "{}", acc("lfc"));
    // The fully restored control is the unfiltered run.
    assert_eq!(acc("restore_1"), acc("full"));
}
