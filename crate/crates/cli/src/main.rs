use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;

use mvcl::dataset::{save_manifest, SyntheticParams};
use mvcl::evaluation::{self, MetricsReport};
use mvcl::experiment::{self, DataSource, ExperimentConfig, Subset};
use mvcl::{Error, Result, View, ViewMode};

#[derive(Parser)]
#[command(name = "mvcl", version, about = "Dual-view fracture classifier with curriculum and transfer learning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic paired-view dataset as PNGs plus a manifest.
    Synth(SynthArgs),
    /// Train a single-view model on one split.
    Pretrain {
        #[command(flatten)]
        common: RunArgs,
        /// View to train on.
        #[arg(long)]
        view: View,
        #[arg(long, default_value_t = 0)]
        split: usize,
    },
    /// Train the multiview model on one split.
    Train {
        #[command(flatten)]
        common: RunArgs,
        #[arg(long, default_value_t = 0)]
        split: usize,
        /// Restrict test evaluation to one view mode.
        #[arg(long)]
        view: Option<ViewMode>,
        /// Pretrained frontal checkpoint to transfer instead of pretraining.
        #[arg(long, requires = "lateral_checkpoint")]
        frontal_checkpoint: Option<PathBuf>,
        #[arg(long, requires = "frontal_checkpoint")]
        lateral_checkpoint: Option<PathBuf>,
    },
    /// Run every cross-validation split.
    Crossval {
        #[command(flatten)]
        common: RunArgs,
        #[arg(long)]
        view: Option<ViewMode>,
    },
    /// Score a checkpoint on a manifest or on part of a finished run.
    Eval(EvalArgs),
    /// Merge results.csv files into one table.
    Report {
        #[arg(required = true)]
        results: Vec<PathBuf>,
    },
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 100)]
    n_per_class: usize,
    #[arg(long, default_value_t = 64)]
    image_size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0.8)]
    view_asymmetry: f64,
    #[arg(long)]
    noise_sd: Option<f64>,
    #[arg(long)]
    mark_intensity: Option<f64>,
}

/// Flags shared by the training commands. Each overrides the config file.
#[derive(Args)]
struct RunArgs {
    /// JSON experiment configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Manifest CSV to train on instead of the configured data source.
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    folds: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    decay_horizon: Option<usize>,
    #[arg(long)]
    no_curriculum: bool,
    #[arg(long)]
    no_transfer: bool,
    /// Output directory; defaults to `<run root>/<command>-seed<seed>`.
    #[arg(long)]
    run_dir: Option<PathBuf>,
    #[arg(long, env = "MVCL_RUN_ROOT", default_value = "runs")]
    run_root: PathBuf,
}

impl RunArgs {
    fn resolve(&self) -> Result<ExperimentConfig> {
        let mut config = match &self.config {
            Some(path) => ExperimentConfig::from_json_file(path)?,
            None => ExperimentConfig::default(),
        };
        if let Some(path) = &self.manifest {
            config.data = DataSource::Manifest(path.clone());
        }
        if let Some(seed) = self.seed {
            config.seed = seed;
        }
        if let Some(folds) = self.folds {
            config.folds = folds;
        }
        if let Some(epochs) = self.epochs {
            config.train.total_epochs = epochs;
        }
        if let Some(horizon) = self.decay_horizon {
            config.train.decay_horizon = horizon;
        }
        if self.no_curriculum {
            config.use_curriculum = false;
        }
        if self.no_transfer {
            config.use_transfer = false;
        }
        config.validate()?;
        Ok(config)
    }

    fn run_dir(&self, command: &str, config: &ExperimentConfig) -> PathBuf {
        self.run_dir
            .clone()
            .unwrap_or_else(|| self.run_root.join(format!("{command}-seed{}", config.seed)))
    }
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint to score; defaults to the split's model in `--run-dir`.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Score every sample of this manifest.
    #[arg(long, conflicts_with = "run_dir")]
    manifest: Option<PathBuf>,
    /// Finished run whose split to score.
    #[arg(long)]
    run_dir: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    split: usize,
    /// training, validation or test.
    #[arg(long, default_value = "test")]
    subset: Subset,
    /// One view mode; all three by default.
    #[arg(long)]
    view: Option<ViewMode>,
    /// Write per-sample predictions here (one file per view mode).
    #[arg(long)]
    predictions: Option<PathBuf>,
}

fn print_metrics(rows: &[(ViewMode, MetricsReport)]) {
    println!("view_mode,{}", MetricsReport::COLUMNS.join(","));
    for (mode, report) in rows {
        let values: Vec<String> = report.values().iter().map(|v| v.to_string()).collect();
        println!("{mode},{}", values.join(","));
    }
}

fn synth(args: SynthArgs) -> Result<()> {
    let defaults = SyntheticParams::default();
    let params = SyntheticParams {
        n_per_class: args.n_per_class,
        image_size: args.image_size,
        seed: args.seed,
        view_asymmetry: args.view_asymmetry,
        noise_sd: args.noise_sd.unwrap_or(defaults.noise_sd),
        mark_intensity: args.mark_intensity.unwrap_or(defaults.mark_intensity),
    };
    let data = params.generate()?;
    let manifest = save_manifest(&data, &args.out)?;
    println!("{}", manifest.display());
    Ok(())
}

fn eval(args: EvalArgs) -> Result<()> {
    let (data, default_ckpt, rule) = match (&args.manifest, &args.run_dir) {
        (Some(m), _) => (mvcl::dataset::load_manifest(m)?, None, Default::default()),
        (None, Some(run)) => {
            let (data, ckpt, config) = experiment::run_subset(run, args.split, args.subset)?;
            (data, Some(ckpt), config.binary_accuracy_rule)
        }
        (None, None) => return Err(Error::Config("eval needs --manifest or --run-dir".into())),
    };
    let checkpoint = args
        .checkpoint
        .or(default_ckpt)
        .ok_or_else(|| Error::Config("eval on a manifest needs --checkpoint".into()))?;
    let modes = match args.view {
        Some(mode) => vec![mode],
        None => ViewMode::ALL.to_vec(),
    };
    let scored = experiment::evaluate_checkpoint(&checkpoint, &data, &modes, rule)?;
    if let Some(base) = &args.predictions {
        for (mode, _, records) in &scored {
            evaluation::write_records(&suffixed(base, &mode.to_string()), records)?;
        }
    }
    print_metrics(&scored.iter().map(|(m, r, _)| (*m, *r)).collect::<Vec<_>>());
    Ok(())
}

/// `dir/name.csv` becomes `dir/name_<suffix>.csv`.
fn suffixed(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("predictions");
    let ext = path.extension().and_then(|s| s.to_str()).unwrap_or("csv");
    path.with_file_name(format!("{stem}_{suffix}.{ext}"))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(args) => synth(args),
        Command::Pretrain { common, view, split } => {
            let config = common.resolve()?;
            let dir = common.run_dir("pretrain", &config);
            let (out, report) = experiment::run_pretrain(&config, view, &dir, split)?;
            info!("best epoch {}; run directory {}", out.best_epoch, dir.display());
            print_metrics(&[(view.mode(), report)]);
            Ok(())
        }
        Command::Train {
            common,
            split,
            view,
            frontal_checkpoint,
            lateral_checkpoint,
        } => {
            let mut config = common.resolve()?;
            if let Some(mode) = view {
                config.view_modes = vec![mode];
            }
            config.pretrain.frontal_checkpoint = frontal_checkpoint.or(config.pretrain.frontal_checkpoint);
            config.pretrain.lateral_checkpoint = lateral_checkpoint.or(config.pretrain.lateral_checkpoint);
            let dir = common.run_dir("train", &config);
            let summary = experiment::run_experiment(&config, &dir, Some(&[split]))?;
            info!("run directory {}", dir.display());
            print_rows(&summary.rows);
            Ok(())
        }
        Command::Crossval { common, view } => {
            let mut config = common.resolve()?;
            if let Some(mode) = view {
                config.view_modes = vec![mode];
            }
            let dir = common.run_dir("crossval", &config);
            let summary = experiment::run_experiment(&config, &dir, None)?;
            info!("run directory {}", dir.display());
            print_rows(&summary.rows);
            Ok(())
        }
        Command::Eval(args) => eval(args),
        Command::Report { results } => {
            print!("{}", experiment::report(&results)?);
            Ok(())
        }
    }
}

fn print_rows(rows: &[experiment::ResultRow]) {
    let means: Vec<(ViewMode, MetricsReport)> = rows
        .iter()
        .filter(|r| r.fold.is_none())
        .map(|r| (r.view_mode, r.metrics))
        .collect();
    print_metrics(&means);
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
