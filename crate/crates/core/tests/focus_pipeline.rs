mod common;

use std::io::Write;

use freqfocus::data::{self, SynthConfig};
use freqfocus::focus::{self, compute_focus_report, select_skips, FocusReport};
use freqfocus::net::{count_params_flops, GatePlan, Network, NetworkSpec, Tensor3, TrainConfig, Trainer};
use freqfocus::RegulatorConfig;
use proptest::prelude::*;

/// Writes every captured map as CSV rows `unit,channel,instance,v0,v1,...`
/// and parses them back, so the oracle only sees exported numbers.
fn export_and_reload(maps: &[freqfocus::ActivationMap], dir: &std::path::Path) -> Vec<(usize, Vec<Vec<Vec<f64>>>)> {
    let path = dir.join("maps.csv");
    let mut f = std::fs::File::create(&path).unwrap();
    for m in maps {
        for c in 0..m.data.channels() {
            for n in 0..m.data.batch() {
                let vals: Vec<String> = m.data.series(n, c).iter().map(|v| format!("{v:e}")).collect();
                writeln!(f, "{},{c},{n},{}", m.unit_index, vals.join(",")).unwrap();
            }
        }
    }
    drop(f);
    let mut out: Vec<(usize, Vec<Vec<Vec<f64>>>)> = Vec::new();
    for line in std::fs::read_to_string(&path).unwrap().lines() {
        let mut it = line.split(',');
        let unit: usize = it.next().unwrap().parse().unwrap();
        let c: usize = it.next().unwrap().parse().unwrap();
        let _n: usize = it.next().unwrap().parse().unwrap();
        let vals: Vec<f64> = it.map(|v| v.parse().unwrap()).collect();
        if out.last().map(|(u, _)| *u) != Some(unit) {
            out.push((unit, Vec::new()));
        }
        let chans = &mut out.last_mut().unwrap().1;
        if chans.len() <= c {
            chans.push(Vec::new());
        }
        chans[c].push(vals);
    }
    out
}

/// Focus scales recomputed from scratch: naive DFT, batch mean, peak/RMS
/// ratio from its definition, population variance.
fn oracle_scales(units: &[(usize, Vec<Vec<Vec<f64>>>)]) -> Vec<f64> {
    units
        .iter()
        .map(|(_, chans)| {
            let mut ratios = Vec::new();
            for inst in chans {
                let spectra: Vec<Vec<f64>> = inst.iter().map(|s| common::naive_amplitudes(s)).collect();
                let b = spectra[0].len();
                let z: Vec<f64> = (0..b)
                    .map(|k| spectra.iter().map(|s| s[k]).sum::<f64>() / spectra.len() as f64)
                    .collect();
                let peak = z.iter().copied().fold(0.0, f64::max);
                if peak == 0.0 {
                    continue;
                }
                let rms = (z.iter().map(|a| a * a).sum::<f64>() / b as f64).sqrt();
                ratios.push(peak / rms);
            }
            if ratios.is_empty() {
                return 0.0;
            }
            let mean = ratios.iter().sum::<f64>() / ratios.len() as f64;
            ratios.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / ratios.len() as f64
        })
        .collect()
}

#[test]
fn report_matches_recomputation_from_exported_maps() {
    let ds = data::znormalize(
        &data::synth_lowfreq_dataset(&SynthConfig {
            instances: 32,
            length: 64,
            seed: 4,
            ..Default::default()
        })
        .unwrap(),
    );
    let spec = NetworkSpec::resnet_with_filters(1, 2, 5, &[6, 8]).with_seed(21);
    let mut t = Trainer::new(
        Network::ungated(spec).unwrap(),
        TrainConfig {
            epochs: 3,
            batch_size: 16,
            seed: 2,
            ..Default::default()
        },
    )
    .unwrap();
    t.train_until(&ds.instances, &ds.labels, 2).unwrap();
    let maps = t.network().forward(&ds.instances.select(&(0..16).collect::<Vec<_>>()), true).unwrap().captured;
    assert_eq!(maps.len(), 5);
    let report = compute_focus_report(&maps, 1.0).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let exported = export_and_reload(&maps, dir.path());
    let scales = oracle_scales(&exported);
    for (got, want) in report.focus_scales().iter().zip(&scales) {
        assert!((got - want).abs() <= 1e-9 * want.abs().max(1.0), "{got} vs {want}");
    }
    for l in 0..5 {
        let want = if l == 0 { 0.0 } else { scales[l] - scales[l - 1] };
        assert!((report.deltas()[l] - want).abs() < 1e-9);
    }
    // The JSON form carries the same numbers.
    let back: FocusReport = serde_json::from_str(&report.to_json().unwrap()).unwrap();
    assert_eq!(back.disturbing_set(), report.disturbing_set());
    for (a, b) in back.focus_scales().iter().zip(report.focus_scales()) {
        assert!((a - b).abs() <= 1e-15 * b.abs().max(1e-300));
    }
}

#[test]
fn deltas_telescope() {
    let scales = [0.3, 0.1, 0.7, 0.65, 0.9, 0.2];
    let r = FocusReport::from_focus_scales(&scales);
    let sum: f64 = r.deltas().iter().sum();
    assert!((sum - (scales[5] - scales[0])).abs() < 1e-12);
}

#[test]
fn regulation_shares_prefix_with_plain_training() {
    let ds = data::synth_lowfreq_dataset(&SynthConfig {
        instances: 24,
        length: 32,
        ..Default::default()
    })
    .unwrap();
    let spec = NetworkSpec::resnet_with_filters(1, 2, 3, &[4, 6]).with_seed(5);
    let train = TrainConfig {
        epochs: 5,
        batch_size: 8,
        seed: 1,
        ..Default::default()
    };
    let reg = RegulatorConfig { alpha: 3, max_skips: 2 };
    let run = focus::regulate_training(Network::ungated(spec.clone()).unwrap(), &ds.instances, &ds.labels, &train, &reg, 1.0)
        .unwrap();
    assert_eq!(run.trainer.epochs_done(), 5);
    assert_eq!(run.history.len(), 5);
    assert_eq!(run.trainer.network().plan(), &run.plan);

    let mut plain = Trainer::new(Network::ungated(spec).unwrap(), train).unwrap();
    let hist = plain.train_until(&ds.instances, &ds.labels, 3).unwrap();
    assert_eq!(&run.history[..3], &hist[..]);
    assert_eq!(run.plan.skipped(), run.report.ranked_disturbing().into_iter().take(2).collect::<Vec<_>>());
}

fn spec_strategy() -> impl Strategy<Value = (NetworkSpec, Vec<bool>)> {
    (any::<bool>(), 1..=3usize, 2..=4usize, 1..=6usize, proptest::collection::vec(1..=6usize, 1..=3))
        .prop_flat_map(|(fcn, d_in, classes, depth, filters)| {
            let spec = if fcn {
                NetworkSpec::fcn_with_filters(d_in, classes, depth, &filters)
            } else {
                NetworkSpec::resnet_with_filters(d_in, classes, depth, &filters)
            };
            (Just(spec), proptest::collection::vec(any::<bool>(), depth))
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn any_plan_builds_and_runs((spec, gates) in spec_strategy(), seed in any::<u64>()) {
        let plan = GatePlan::from_gates(&spec, gates.clone()).unwrap();
        plan.validate(&spec).unwrap();
        // Adapters sit exactly where a preserved unit's input would mismatch.
        let mut c = spec.input_channels;
        for (l, unit) in spec.units.iter().enumerate() {
            if gates[l] {
                prop_assert_eq!(plan.adapter(l).is_some(), c != unit.in_channels);
                c = unit.out_channels;
            } else {
                prop_assert!(plan.adapter(l).is_none());
            }
        }
        let net = Network::new(spec.clone().with_seed(seed), plan.clone()).unwrap();
        prop_assert_eq!(count_params_flops(&spec, &plan, 12).params, net.param_count() as u64);
        let x = Tensor3::from_channel_major(2, spec.input_channels, 12, (0..24 * spec.input_channels).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
        let fwd = net.forward(&x, true).unwrap();
        prop_assert_eq!(fwd.logits.len(), 2 * spec.classes);
        prop_assert!(fwd.logits.iter().all(|v| v.is_finite()));
        prop_assert_eq!(fwd.captured.len(), gates.iter().filter(|&&g| g).count());
    }

    #[test]
    fn select_skips_takes_most_negative(scales in proptest::collection::vec(0.0..1.0f64, 1..10), p in 0..5usize) {
        let spec = NetworkSpec::resnet_with_filters(1, 2, scales.len(), &[3]);
        let report = FocusReport::from_focus_scales(&scales);
        let plan = select_skips(&report, p, &spec).unwrap();
        let skipped = plan.skipped();
        let negatives: Vec<usize> = (0..scales.len()).filter(|&l| report.units[l].delta < 0.0).collect();
        prop_assert_eq!(skipped.len(), p.min(negatives.len()));
        for &s in &skipped {
            for &n in &negatives {
                if !skipped.contains(&n) {
                    prop_assert!(report.units[s].delta <= report.units[n].delta);
                }
            }
        }
    }
}
