use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use freqfocus::harness::{self, DatasetSpec, ExperimentConfig, ExperimentKind, RunReport, DATA_ROOT_ENV};
use freqfocus::net::Backbone;

#[derive(Parser)]
#[command(name = "freqfocus", version, about = "Frequency-focus analysis and regulated training of 1D-CNN time series classifiers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model per seed and save checkpoints.
    Train(Common),
    /// Train several depths and flag accuracy degradation.
    SweepDepth(Common),
    /// Train on LFC-only / HFC-only / full data.
    Band(Common),
    /// Evaluate on HFC data with growing shares of the LFC band restored.
    RestoreLfc {
        #[command(flatten)]
        common: Common,
        /// Restored LFC fractions (comma separated).
        #[arg(long, value_delimiter = ',')]
        fractions: Option<Vec<f64>>,
        /// Skip the regulated model.
        #[arg(long)]
        no_regulated: bool,
    },
    /// Skip each unit in turn from the regulation-epoch checkpoint.
    SkipSweep(Common),
    /// Two-stage regulated training versus the original network.
    Regulate(Common),
    /// Train a model and dump Grad-CAM maps for test instances.
    Gradcam {
        #[command(flatten)]
        common: Common,
        /// Test instances to explain (comma separated).
        #[arg(long, value_delimiter = ',')]
        instance: Option<Vec<usize>>,
        /// Class to explain; defaults to each instance's label.
        #[arg(long)]
        class: Option<usize>,
    },
    /// Frequency-centroid ratio statistics of a dataset.
    CentroidStats(Common),
    /// Merge experiment directories into one rank table.
    Report {
        /// Directories containing runs.csv.
        #[arg(required = true)]
        dirs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct Common {
    /// JSON experiment config; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// `synth[:key=value,...]`, a .ts/.csv path, or an archive name.
    #[arg(long)]
    dataset: Option<String>,
    #[arg(long)]
    backbone: Option<Backbone>,
    /// Depth, or comma-separated depths for sweeps.
    #[arg(long, value_delimiter = ',')]
    depth: Option<Vec<usize>>,
    /// Channel widths (comma separated).
    #[arg(long, value_delimiter = ',')]
    filters: Option<Vec<usize>>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Regulation epoch.
    #[arg(long)]
    alpha: Option<usize>,
    /// Maximum number of skipped units.
    #[arg(long)]
    skips: Option<usize>,
    /// Seed, or comma-separated seeds.
    #[arg(long, value_delimiter = ',')]
    seed: Option<Vec<u64>>,
    /// Held-out share when no test file exists.
    #[arg(long)]
    test_fraction: Option<f64>,
    /// Disable per-instance z-normalisation.
    #[arg(long)]
    no_znorm: bool,
    #[arg(long, env = DATA_ROOT_ENV)]
    data_root: Option<PathBuf>,
    /// Output directory (default: out/<kind>-<config hash prefix>).
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Common {
    fn into_config(self, kind: ExperimentKind) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::from_json_file(p).with_context(|| format!("reading {}", p.display()))?,
            None => ExperimentConfig::default(),
        };
        cfg.kind = kind;
        if let Some(d) = &self.dataset {
            cfg.dataset = DatasetSpec::parse(d)?;
        }
        if let Some(b) = self.backbone {
            cfg.backbone = b;
        }
        if let Some(d) = self.depth {
            cfg.depths = d;
        }
        if let Some(f) = self.filters {
            cfg.filters = Some(f);
        }
        if let Some(e) = self.epochs {
            cfg.train.epochs = e;
        }
        if let Some(b) = self.batch_size {
            cfg.train.batch_size = b;
        }
        if let Some(lr) = self.lr {
            cfg.train.learning_rate = lr;
        }
        if let Some(a) = self.alpha {
            cfg.regulator.alpha = a;
        }
        if let Some(p) = self.skips {
            cfg.regulator.max_skips = p;
        }
        if let Some(s) = self.seed {
            cfg.seeds = s;
        }
        if let Some(t) = self.test_fraction {
            cfg.test_fraction = t;
        }
        if self.no_znorm {
            cfg.znormalize = false;
        }
        if self.data_root.is_some() {
            cfg.data_root = self.data_root;
        }
        if self.out.is_some() {
            cfg.out_dir = self.out;
        }
        Ok(cfg)
    }
}

fn print_summary(report: &RunReport, cfg: &ExperimentConfig) {
    println!("config {}", report.config_hash);
    for m in &report.medians {
        let variant = if m.variant.is_empty() { String::new() } else { format!(" [{}]", m.variant) };
        println!(
            "{} {}{}: median train {:.4} test {:.4} over {} seed(s), params {} flops {}",
            m.dataset, m.model, variant, m.median_train_accuracy, m.median_test_accuracy, m.seeds, m.median_params, m.median_flops
        );
    }
    for f in &report.focus_reports {
        println!("{} seed {}: M = {:?}, disturbing {:?}", f.label, f.seed, f.report.deltas(), f.report.disturbing_set());
    }
    if let Some(d) = &report.degradation {
        println!("degraded depths: {:?}", d.flagged_depths);
    }
    for (split, s) in &report.centroid_stats {
        println!(
            "{split}: centroid ratio mean {:.4} variance {:.4} over {} series ({} all-zero skipped)",
            s.mean, s.variance, s.count, s.skipped
        );
    }
    for (k, v) in &report.restore_monotone {
        println!("{k}: restore curve monotone = {v}");
    }
    if let Some(dir) = &cfg.out_dir {
        println!("reports written to {}", dir.display());
    }
}

fn run(cli: Cli) -> Result<()> {
    let cfg = match cli.command {
        Command::Train(c) => c.into_config(ExperimentKind::Train)?,
        Command::SweepDepth(c) => c.into_config(ExperimentKind::DepthSweep)?,
        Command::Band(c) => c.into_config(ExperimentKind::BandFilter)?,
        Command::RestoreLfc {
            common,
            fractions,
            no_regulated,
        } => {
            let mut cfg = common.into_config(ExperimentKind::LfcRestore)?;
            if let Some(f) = fractions {
                cfg.fractions = f;
            }
            if no_regulated {
                cfg.include_regulated = false;
            }
            cfg
        }
        Command::SkipSweep(c) => c.into_config(ExperimentKind::SkipSweep)?,
        Command::Regulate(c) => c.into_config(ExperimentKind::Regulate)?,
        Command::Gradcam { common, instance, class } => {
            let mut cfg = common.into_config(ExperimentKind::Gradcam)?;
            if let Some(i) = instance {
                cfg.gradcam.instances = i;
            }
            if class.is_some() {
                cfg.gradcam.class = class;
            }
            cfg
        }
        Command::CentroidStats(c) => c.into_config(ExperimentKind::CentroidStats)?,
        Command::Report { dirs, out } => {
            let merged = harness::merge_reports(&dirs, &out)?;
            for (config, rank) in &merged.average_ranks {
                println!("{config}: average rank {rank:.3}");
            }
            println!("reports written to {}", out.display());
            return Ok(());
        }
    };
    let mut cfg = cfg;
    if cfg.out_dir.is_none() {
        cfg.out_dir = Some(PathBuf::from("out").join(format!("{}-{}", cfg.kind.as_str(), &cfg.hash()[..12])));
    }
    cfg.validate()?;
    let report = harness::execute(&cfg)?;
    print_summary(&report, &cfg);
    Ok(())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
