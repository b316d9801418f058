//! Frequency-focus analysis of captured feature maps and the two-stage
//! regulated training procedure built on it.
//!
//! For every preserved unit the explorer turns each output channel into an
//! averaged amplitude spectrum (an FE feature map), scores how concentrated
//! that spectrum is (peak-to-RMS ratio), and takes the population variance of
//! those scores across channels as the unit's focus scale. A unit whose focus
//! scale drops relative to its predecessor is "disturbing"; the regulator
//! skips the most negative ones.

use std::collections::BTreeMap;

use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::net::{ActivationMap, EpochStats, GatePlan, Network, NetworkSpec, Tensor3, TrainConfig, Trainer};
use crate::spectral::{self, Spectrum};
use crate::{Error, Result};

/// FE feature maps of one unit: one batch-averaged spectrum per channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnitSpectra {
    pub unit_index: usize,
    pub channels: Vec<Spectrum>,
}

/// Amplitude spectrum of every channel of every captured unit, averaged
/// elementwise over the batch after the amplitude transform.
pub fn fe_feature_maps(captured: &[ActivationMap], sampling_freq: f64) -> Result<Vec<UnitSpectra>> {
    captured
        .iter()
        .map(|map| {
            let data = &map.data;
            let len = data.length();
            let bins = spectral::bin_count(len);
            let channels = (0..data.channels())
                .map(|c| {
                    let mut acc = vec![0.0; bins];
                    for n in 0..data.batch() {
                        let s = spectral::amplitude_spectrum(data.series(n, c), sampling_freq)?;
                        for (a, z) in acc.iter_mut().zip(s.amplitudes()) {
                            *a += z;
                        }
                    }
                    let inv = 1.0 / data.batch() as f64;
                    acc.iter_mut().for_each(|a| *a *= inv);
                    Spectrum::from_amplitudes(acc, sampling_freq, len)
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(UnitSpectra {
                unit_index: map.unit_index,
                channels,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnitFocus {
    pub unit_index: usize,
    /// Peak-to-RMS ratio of every live channel.
    pub ratios: Vec<f64>,
    /// Channels whose spectrum is identically zero; excluded from the ratios.
    pub dead_channels: usize,
    pub focus_scale: f64,
    /// Change in focus scale from the previous unit; 0 for the first.
    pub delta: f64,
    pub disturbing: bool,
    /// Mean normalised frequency centroid over live channels.
    pub centroid: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FocusReport {
    pub units: Vec<UnitFocus>,
}

impl FocusReport {
    pub fn focus_scales(&self) -> Vec<f64> {
        self.units.iter().map(|u| u.focus_scale).collect()
    }

    pub fn deltas(&self) -> Vec<f64> {
        self.units.iter().map(|u| u.delta).collect()
    }

    /// Unit indices with a negative delta, in network order.
    pub fn disturbing_set(&self) -> Vec<usize> {
        self.units
            .iter()
            .filter(|u| u.disturbing)
            .map(|u| u.unit_index)
            .collect()
    }

    pub fn centroids(&self) -> Vec<Option<f64>> {
        self.units.iter().map(|u| u.centroid).collect()
    }

    /// Report built from precomputed focus scales of consecutive units.
    pub fn from_focus_scales(scales: &[f64]) -> Self {
        let units = scales
            .iter()
            .enumerate()
            .map(|(l, &v)| UnitFocus {
                unit_index: l,
                ratios: Vec::new(),
                dead_channels: 0,
                focus_scale: v,
                delta: 0.0,
                disturbing: false,
                centroid: None,
            })
            .collect();
        let mut report = Self { units };
        report.fill_deltas();
        report
    }

    fn fill_deltas(&mut self) {
        let mut prev: Option<f64> = None;
        for u in &mut self.units {
            u.delta = prev.map_or(0.0, |p| u.focus_scale - p);
            u.disturbing = u.delta < 0.0;
            prev = Some(u.focus_scale);
        }
    }

    /// Disturbing units ordered most-negative delta first; ties go to the
    /// shallower unit.
    pub fn ranked_disturbing(&self) -> Vec<usize> {
        let mut cands: Vec<&UnitFocus> = self.units.iter().filter(|u| u.disturbing).collect();
        cands.sort_by(|a, b| a.delta.total_cmp(&b.delta).then(a.unit_index.cmp(&b.unit_index)));
        cands.into_iter().map(|u| u.unit_index).collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Focus report from already computed FE feature maps.
pub fn focus_report_from_spectra(units: &[UnitSpectra]) -> Result<FocusReport> {
    let mut out = Vec::with_capacity(units.len());
    for unit in units {
        let live: Vec<&Spectrum> = unit.channels.iter().filter(|s| !s.is_degenerate()).collect();
        let dead = unit.channels.len() - live.len();
        let ratios = live
            .iter()
            .map(|s| spectral::peak_rms_ratio(s))
            .collect::<Result<Vec<_>>>()?;
        let (focus_scale, centroid) = if live.is_empty() {
            warn!(
                "unit {}: all {} channels are dead; focus scale set to 0",
                unit.unit_index, dead
            );
            (0.0, None)
        } else {
            let mut sum = 0.0;
            for s in &live {
                sum += spectral::normalized_centroid(s)?;
            }
            (spectral::focus_scale(&ratios)?, Some(sum / live.len() as f64))
        };
        out.push(UnitFocus {
            unit_index: unit.unit_index,
            ratios,
            dead_channels: dead,
            focus_scale,
            delta: 0.0,
            disturbing: false,
            centroid,
        });
    }
    let mut report = FocusReport { units: out };
    report.fill_deltas();
    Ok(report)
}

pub fn compute_focus_report(captured: &[ActivationMap], sampling_freq: f64) -> Result<FocusReport> {
    if captured.is_empty() {
        return Err(Error::invalid("focus report needs at least one captured unit"));
    }
    focus_report_from_spectra(&fe_feature_maps(captured, sampling_freq)?)
}

/// Gate plan skipping the first `max_skips` disturbing units (most negative
/// delta first). An empty disturbing set yields the all-preserved plan.
pub fn select_skips(report: &FocusReport, max_skips: usize, spec: &NetworkSpec) -> Result<GatePlan> {
    let chosen: Vec<usize> = report.ranked_disturbing().into_iter().take(max_skips).collect();
    GatePlan::skipping(spec, &chosen)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct RegulatorConfig {
    /// Epoch after which the network is regulated.
    pub alpha: usize,
    /// Maximum number of units skipped.
    pub max_skips: usize,
}

impl Default for RegulatorConfig {
    fn default() -> Self {
        Self {
            alpha: 100,
            max_skips: 2,
        }
    }
}

impl RegulatorConfig {
    pub fn validate(&self, epochs: usize) -> Result<()> {
        if self.alpha == 0 || self.alpha >= epochs {
            return Err(Error::invalid(format!(
                "regulation epoch {} must lie in [1, {epochs})",
                self.alpha
            )));
        }
        if self.max_skips == 0 {
            return Err(Error::invalid("at least one skip must be allowed"));
        }
        Ok(())
    }
}

/// Seed for parameters created at regulation time (adapters, resized head).
pub fn regulation_init_seed(spec: &NetworkSpec) -> u64 {
    spec.seed ^ 0x5EED_0F_AD_A97E
}

#[derive(Debug, Clone)]
pub struct RegulationPoint {
    pub report: FocusReport,
    pub plan: GatePlan,
    pub history: Vec<EpochStats>,
}

/// First stage: trains for `alpha` epochs and analyses the final training
/// batch of epoch `alpha` (captured in the forward pass of that batch).
pub fn train_to_regulation_point(
    trainer: &mut Trainer,
    x: &Tensor3,
    labels: &[usize],
    reg: &RegulatorConfig,
    sampling_freq: f64,
) -> Result<RegulationPoint> {
    reg.validate(trainer.config().epochs)?;
    let mut history = Vec::new();
    let mut captured = Vec::new();
    while trainer.epochs_done() < reg.alpha {
        let last = trainer.epochs_done() + 1 == reg.alpha;
        history.push(trainer.run_epoch(x, labels, |tape| {
            if last {
                captured = tape.captured();
            }
        })?);
    }
    let report = compute_focus_report(&captured, sampling_freq)?;
    let plan = select_skips(&report, reg.max_skips, trainer.network().spec())?;
    if plan.is_all_preserved() {
        info!("no disturbing units at epoch {}; training continues ungated", reg.alpha);
    } else {
        info!("regulation at epoch {} skips units {:?}", reg.alpha, plan.skipped());
    }
    Ok(RegulationPoint {
        report,
        plan,
        history,
    })
}

#[derive(Debug, Clone)]
pub struct RegulatedRun {
    pub trainer: Trainer,
    pub report: FocusReport,
    pub plan: GatePlan,
    pub history: Vec<EpochStats>,
}

/// Two-stage training: `alpha` epochs on the original network, regulation,
/// then the remaining epochs on the regulated network. The total epoch count
/// is `train.epochs`.
pub fn regulate_training(
    net: Network,
    x: &Tensor3,
    labels: &[usize],
    train: &TrainConfig,
    reg: &RegulatorConfig,
    sampling_freq: f64,
) -> Result<RegulatedRun> {
    let mut trainer = Trainer::new(net, train.clone())?;
    let point = train_to_regulation_point(&mut trainer, x, labels, reg, sampling_freq)?;
    let seed = regulation_init_seed(trainer.network().spec());
    trainer.apply_plan(point.plan.clone(), seed)?;
    let mut history = point.history;
    history.extend(trainer.train_until(x, labels, train.epochs)?);
    Ok(RegulatedRun {
        trainer,
        report: point.report,
        plan: point.plan,
        history,
    })
}

/// Absolute accuracy drop that counts as degradation.
pub const DEGRADATION_THRESHOLD: f64 = 0.05;

/// Depths whose accuracy is at least 5 points below the best accuracy of
/// any shallower depth.
pub fn detect_degradation(acc_by_depth: &BTreeMap<usize, f64>) -> Vec<usize> {
    let mut best: Option<f64> = None;
    let mut flagged = Vec::new();
    for (&depth, &acc) in acc_by_depth {
        if let Some(b) = best {
            if b - acc >= DEGRADATION_THRESHOLD - 1e-12 {
                flagged.push(depth);
            }
        }
        best = Some(best.map_or(acc, |b: f64| b.max(acc)));
    }
    flagged
}
