use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{self, Split, SynthConfig, TimeSeriesDataset};
use crate::focus::RegulatorConfig;
use crate::net::{Backbone, TrainConfig};
use crate::{Error, Result};

/// Environment variable naming the directory that holds archive datasets.
pub const DATA_ROOT_ENV: &str = "FREQFOCUS_DATA_ROOT";

/// Epoch budget used by experiments unless overridden.
pub const DESK_EPOCHS: usize = 200;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    /// Plain training of one depth; writes checkpoints.
    #[default]
    Train,
    DepthSweep,
    BandFilter,
    LfcRestore,
    SkipSweep,
    Regulate,
    Gradcam,
    CentroidStats,
}

impl ExperimentKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ExperimentKind::Train => "train",
            ExperimentKind::DepthSweep => "depth_sweep",
            ExperimentKind::BandFilter => "band_filter",
            ExperimentKind::LfcRestore => "lfc_restore",
            ExperimentKind::SkipSweep => "skip_sweep",
            ExperimentKind::Regulate => "regulate",
            ExperimentKind::Gradcam => "gradcam",
            ExperimentKind::CentroidStats => "centroid_stats",
        }
    }
}

/// Where instances come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum DatasetSpec {
    /// Generated low-frequency data, split with `test_fraction`.
    Synth(SynthConfig),
    /// Explicit `.ts` / `.csv` files. Relative paths resolve against the
    /// data root. Without a test file the train file is split.
    Files {
        train: PathBuf,
        #[serde(default)]
        test: Option<PathBuf>,
    },
    /// `<root>/<name>/<name>_TRAIN.ts` and `_TEST.ts`.
    Archive { name: String },
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec::Synth(SynthConfig::default())
    }
}

impl DatasetSpec {
    /// Parses the command-line form: `synth`, `synth:key=value,...`
    /// (keys `classes`, `n`, `t`, `noise`, `tones`, `seed`), a path ending in
    /// `.ts`/`.csv`, or an archive name.
    pub fn parse(s: &str) -> Result<Self> {
        if let Some(rest) = s.strip_prefix("synth") {
            let mut cfg = SynthConfig::default();
            let rest = rest.strip_prefix(':').unwrap_or(rest);
            for kv in rest.split(',').filter(|kv| !kv.is_empty()) {
                let (k, v) = kv
                    .split_once('=')
                    .ok_or_else(|| Error::invalid(format!("expected key=value in {kv:?}")))?;
                let bad = || Error::invalid(format!("invalid value for {k}: {v:?}"));
                match k {
                    "classes" => cfg.classes = v.parse().map_err(|_| bad())?,
                    "n" => cfg.instances = v.parse().map_err(|_| bad())?,
                    "t" => cfg.length = v.parse().map_err(|_| bad())?,
                    "noise" => cfg.noise_hf_amplitude = v.parse().map_err(|_| bad())?,
                    "tones" => cfg.noise_tones = v.parse().map_err(|_| bad())?,
                    "seed" => cfg.seed = v.parse().map_err(|_| bad())?,
                    _ => return Err(Error::invalid(format!("unknown synth key {k:?}"))),
                }
            }
            return Ok(DatasetSpec::Synth(cfg));
        }
        let lower = s.to_ascii_lowercase();
        if lower.ends_with(".ts") || lower.ends_with(".csv") {
            return Ok(DatasetSpec::Files {
                train: PathBuf::from(s),
                test: None,
            });
        }
        if s.is_empty() {
            return Err(Error::invalid("empty dataset name"));
        }
        Ok(DatasetSpec::Archive { name: s.to_string() })
    }

    pub fn label(&self) -> String {
        match self {
            DatasetSpec::Synth(_) => "synth_lowfreq".into(),
            DatasetSpec::Files { train, .. } => train
                .file_stem()
                .map(|s| s.to_string_lossy().trim_end_matches("_TRAIN").to_string())
                .unwrap_or_default(),
            DatasetSpec::Archive { name } => name.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GradCamOptions {
    /// Test-set instances to explain.
    pub instances: Vec<usize>,
    /// Explained class; the true label when absent.
    pub class: Option<usize>,
}

impl Default for GradCamOptions {
    fn default() -> Self {
        Self {
            instances: vec![0],
            class: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    pub dataset: DatasetSpec,
    pub backbone: Backbone,
    /// Depths to train; single-depth experiments use the first.
    pub depths: Vec<usize>,
    /// Channel widths; the backbone defaults when absent.
    pub filters: Option<Vec<usize>>,
    /// `train.seed` is replaced by each entry of `seeds`.
    pub train: TrainConfig,
    pub regulator: RegulatorConfig,
    /// Each seed initialises the network and the batch order.
    pub seeds: Vec<u64>,
    /// Share of instances held out when no test file exists.
    pub test_fraction: f64,
    pub znormalize: bool,
    /// LFC fractions restored by the restore experiment.
    pub fractions: Vec<f64>,
    /// Whether the restore experiment also evaluates a regulated model.
    pub include_regulated: bool,
    pub gradcam: GradCamOptions,
    /// Output directory; not part of the config hash.
    pub out_dir: Option<PathBuf>,
    /// Overrides the data root environment variable; not hashed.
    pub data_root: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            kind: ExperimentKind::Train,
            dataset: DatasetSpec::default(),
            backbone: Backbone::Resnet,
            depths: vec![3],
            filters: None,
            train: TrainConfig {
                epochs: DESK_EPOCHS,
                ..TrainConfig::default()
            },
            regulator: RegulatorConfig::default(),
            seeds: vec![0],
            test_fraction: 0.5,
            znormalize: true,
            fractions: vec![0.05, 0.10, 0.15, 0.20, 0.25],
            include_regulated: true,
            gradcam: GradCamOptions::default(),
            out_dir: None,
            data_root: None,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json_file(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::invalid("at least one seed is required"));
        }
        if self.kind != ExperimentKind::CentroidStats {
            if self.depths.is_empty() || self.depths.contains(&0) {
                return Err(Error::invalid("depths must be non-empty and at least 1"));
            }
            if matches!(&self.filters, Some(f) if f.is_empty() || f.contains(&0)) {
                return Err(Error::invalid("filter widths must be non-empty and at least 1"));
            }
            self.train.validate()?;
        }
        if !(0.0..1.0).contains(&self.test_fraction) {
            return Err(Error::invalid("test fraction must lie in [0, 1)"));
        }
        let needs_regulator = match self.kind {
            ExperimentKind::Regulate | ExperimentKind::SkipSweep => true,
            ExperimentKind::LfcRestore => self.include_regulated,
            _ => false,
        };
        if needs_regulator {
            self.regulator.validate(self.train.epochs)?;
        }
        if self.kind == ExperimentKind::LfcRestore
            && (self.fractions.is_empty() || self.fractions.iter().any(|f| !(0.0..=1.0).contains(f)))
        {
            return Err(Error::invalid("restore fractions must be non-empty and lie in [0, 1]"));
        }
        if self.kind == ExperimentKind::Gradcam && self.gradcam.instances.is_empty() {
            return Err(Error::invalid("grad-cam needs at least one instance"));
        }
        Ok(())
    }

    /// Copy without the fields that do not influence results.
    pub fn canonical(&self) -> Self {
        Self {
            out_dir: None,
            data_root: None,
            ..self.clone()
        }
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(&self.canonical()).expect("config serialises");
        Sha256::digest(&json).iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn data_root(&self) -> Option<PathBuf> {
        self.data_root
            .clone()
            .or_else(|| std::env::var_os(DATA_ROOT_ENV).map(PathBuf::from))
    }

    fn resolve(&self, p: &Path) -> PathBuf {
        match (p.is_relative(), self.data_root()) {
            (true, Some(root)) if !p.exists() => root.join(p),
            _ => p.to_path_buf(),
        }
    }

    /// Train and test sets, z-normalised when configured.
    pub fn load_data(&self) -> Result<(TimeSeriesDataset, TimeSeriesDataset)> {
        let (train, test) = match &self.dataset {
            DatasetSpec::Synth(s) => {
                let ds = data::synth_lowfreq_dataset(s)?;
                data::train_test_split(&ds, self.test_fraction, s.seed)?
            }
            DatasetSpec::Files { train, test } => {
                let tr = data::load_dataset(&self.resolve(train))?;
                match test {
                    Some(t) => (tr, data::load_dataset(&self.resolve(t))?.with_split(Split::Test)),
                    None => data::train_test_split(&tr, self.test_fraction, 0)?,
                }
            }
            DatasetSpec::Archive { name } => {
                let root = self.data_root().ok_or_else(|| {
                    Error::invalid(format!("archive dataset {name:?} needs {DATA_ROOT_ENV} or data_root"))
                })?;
                let dir = root.join(name);
                let tr = data::load_ts_archive(&dir.join(format!("{name}_TRAIN.ts")))?;
                let te = data::load_ts_archive(&dir.join(format!("{name}_TEST.ts")))?;
                (tr, te.with_split(Split::Test))
            }
        };
        if train.is_empty() || test.is_empty() {
            return Err(Error::invalid("train and test sets must both be non-empty"));
        }
        if train.class_names != test.class_names || train.channels() != test.channels() || train.length() != test.length() {
            return Err(Error::invalid("train and test sets disagree on classes, variables or length"));
        }
        let name = self.dataset.label();
        let (train, test) = if self.znormalize {
            (data::znormalize(&train), data::znormalize(&test))
        } else {
            (train, test)
        };
        Ok((train.with_name(name.clone()), test.with_name(name)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dataset_strings() {
        let DatasetSpec::Synth(s) = DatasetSpec::parse("synth:n=40,t=64,noise=1.5").unwrap() else {
            panic!()
        };
        assert_eq!((s.instances, s.length, s.noise_hf_amplitude), (40, 64, 1.5));
        assert!(matches!(DatasetSpec::parse("a/b_TRAIN.ts").unwrap(), DatasetSpec::Files { .. }));
        assert!(matches!(DatasetSpec::parse("FaceAll").unwrap(), DatasetSpec::Archive { .. }));
        assert!(DatasetSpec::parse("synth:bogus=1").is_err());
    }

    #[test]
    fn hash_ignores_output_location() {
        let a = ExperimentConfig::default();
        let b = ExperimentConfig {
            out_dir: Some("/tmp/x".into()),
            ..a.clone()
        };
        assert_eq!(a.hash(), b.hash());
        let c = ExperimentConfig {
            seeds: vec![1],
            ..a.clone()
        };
        assert_ne!(a.hash(), c.hash());
        assert_eq!(a.hash().len(), 64);
    }

    #[test]
    fn json_round_trip_with_defaults() {
        let cfg: ExperimentConfig = serde_json::from_str(r#"{"kind":"regulate","depths":[5]}"#).unwrap();
        assert_eq!(cfg.kind, ExperimentKind::Regulate);
        assert_eq!(cfg.train.epochs, DESK_EPOCHS);
        let back: ExperimentConfig = serde_json::from_str(&serde_json::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn validation() {
        let cfg = ExperimentConfig {
            seeds: vec![],
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
        let cfg = ExperimentConfig {
            kind: ExperimentKind::Regulate,
            regulator: RegulatorConfig {
                alpha: DESK_EPOCHS,
                max_skips: 2,
            },
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }
}
