//! Cross-validated experiments, run directories and result tables.
//!
//! Run directory layout:
//!
//! ```text
//! config.json          resolved configuration
//! folds.csv            id,fold
//! fold_roles.csv       split,test_fold,validation_fold
//! results.csv          per-split and mean test metrics for each view mode
//! history.csv          every epoch of every training stage
//! split_<s>/model.ckpt selected multiview parameters
//! split_<s>/pretrain_<view>.ckpt
//! split_<s>/predictions_<mode>.csv
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, CheckpointMeta, ModelKind};
use crate::curriculum::{assign_scores, DifficultyScoreTable};
use crate::dataset::{load_manifest, stratified_kfold, Dataset, FoldPlan, SyntheticParams};
use crate::error::{Error, Result};
use crate::evaluation::{self, BinaryAccuracyRule, EvalRecord, MetricsReport};
use crate::model::{ArchitectureSpec, BackboneSpec, MultiviewModel, SingleViewModel};
use crate::seed::{self, Stream};
use crate::training::{self, TrainConfig, TrainHistory};
use crate::transfer;
use crate::view::{View, ViewMode};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    /// A manifest CSV; image paths resolve against its directory.
    Manifest(PathBuf),
    Synthetic(SyntheticParams),
}

impl Default for DataSource {
    fn default() -> Self {
        Self::Synthetic(SyntheticParams::default())
    }
}

impl DataSource {
    pub fn load(&self) -> Result<Dataset> {
        match self {
            Self::Manifest(path) => load_manifest(path),
            Self::Synthetic(params) => params.generate(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backbone {
    #[default]
    Desk,
    Vgg16,
}

/// Overrides for the single-view pretraining stage. Unset fields follow
/// the multiview settings.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub total_epochs: Option<usize>,
    pub decay_horizon: Option<usize>,
    pub curriculum: Option<bool>,
    /// Use these single-view checkpoints instead of pretraining.
    pub frontal_checkpoint: Option<PathBuf>,
    pub lateral_checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataSource,
    pub folds: usize,
    /// Master seed; fold assignment and every per-split seed derive from it.
    pub seed: u64,
    pub backbone: Backbone,
    /// Full architecture; overrides `backbone` when set.
    pub architecture: Option<ArchitectureSpec>,
    /// Optimizer and schedule settings. `seed` and `curriculum_enabled`
    /// are replaced per run from the fields below.
    pub train: TrainConfig,
    pub pretrain: PretrainConfig,
    pub scores: DifficultyScoreTable,
    pub use_curriculum: bool,
    pub use_transfer: bool,
    pub view_modes: Vec<ViewMode>,
    pub binary_accuracy_rule: BinaryAccuracyRule,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            data: DataSource::default(),
            folds: 8,
            seed: 0,
            backbone: Backbone::Desk,
            architecture: None,
            train: TrainConfig::default(),
            pretrain: PretrainConfig::default(),
            scores: DifficultyScoreTable::elbow(),
            use_curriculum: true,
            use_transfer: true,
            view_modes: ViewMode::ALL.to_vec(),
            binary_accuracy_rule: BinaryAccuracyRule::LabelLevel,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        if self.folds < 3 {
            return Err(Error::Config(format!("folds must be at least 3, got {}", self.folds)));
        }
        self.train.validate()?;
        self.pretrain_config(0)?.validate()?;
        if self.view_modes.is_empty() {
            return Err(Error::Config("view_modes is empty".into()));
        }
        if let Some(spec) = &self.architecture {
            spec.validate()?;
        }
        if let DataSource::Synthetic(p) = &self.data {
            p.validate()?;
        }
        Ok(())
    }

    /// `Multiview`, optionally followed by ` + CL` and ` + TL`.
    pub fn setting_name(&self) -> String {
        let mut name = String::from("Multiview");
        if self.use_curriculum {
            name.push_str(" + CL");
        }
        if self.use_transfer {
            name.push_str(" + TL");
        }
        name
    }

    pub fn architecture_for(&self, dataset: &Dataset) -> Result<ArchitectureSpec> {
        let (h, w) = dataset.image_size().ok_or(Error::EmptyDataset)?;
        let spec = match &self.architecture {
            Some(spec) => spec.clone(),
            None => {
                if h != w {
                    return Err(Error::Config(format!(
                        "images are {h}x{w}; non-square inputs need an explicit architecture"
                    )));
                }
                match self.backbone {
                    Backbone::Desk => ArchitectureSpec::desk(h),
                    Backbone::Vgg16 => ArchitectureSpec::vgg16(h),
                }
            }
        };
        spec.validate()?;
        if (spec.image_height, spec.image_width) != (h, w) {
            return Err(Error::Shape {
                what: "dataset images".into(),
                expected: format!("{}x{}", spec.image_height, spec.image_width),
                actual: format!("{h}x{w}"),
            });
        }
        Ok(spec)
    }

    pub fn multiview_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            seed,
            curriculum_enabled: self.use_curriculum,
            ..self.train.clone()
        }
    }

    pub fn pretrain_config(&self, seed: u64) -> Result<TrainConfig> {
        let cfg = TrainConfig {
            seed,
            total_epochs: self.pretrain.total_epochs.unwrap_or(self.train.total_epochs),
            decay_horizon: self.pretrain.decay_horizon.unwrap_or(self.train.decay_horizon),
            curriculum_enabled: self.pretrain.curriculum.unwrap_or(self.use_curriculum),
            ..self.train.clone()
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Seed for split `split`.
    pub fn split_seed(&self, split: usize) -> u64 {
        seed::derive(self.seed, Stream::FoldRun, split as u64)
    }
}

/// Convenience for small architectures in tests and quick runs.
pub fn compact_architecture(image_size: usize, channels: &[usize], head: usize, merge: usize) -> ArchitectureSpec {
    ArchitectureSpec {
        image_height: image_size,
        image_width: image_size,
        backbone: BackboneSpec {
            stages: channels
                .iter()
                .map(|&c| crate::model::Stage { out_channels: c, n_convs: 1 })
                .collect(),
            classifier: vec![head, crate::N_CLASSES],
        },
        merge_convs: vec![merge],
        merge_classifier: vec![crate::N_CLASSES],
        input_norm: Default::default(),
    }
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    pub model: SingleViewModel,
    pub history: TrainHistory,
    pub best_epoch: usize,
}

/// Everything one train/validation/test split produces.
#[derive(Debug, Clone)]
pub struct SplitOutcome {
    pub model: MultiviewModel,
    pub history: TrainHistory,
    pub best_epoch: usize,
    pub best_metric: Option<f64>,
    /// Seed the multiview stage trained under.
    pub seed: u64,
    pub pretrained: Vec<PretrainOutcome>,
    pub test: BTreeMap<ViewMode, (MetricsReport, Vec<EvalRecord>)>,
}

fn pretrained_branch(
    config: &ExperimentConfig,
    view: View,
    spec: &ArchitectureSpec,
    train: &Dataset,
    validation: &Dataset,
    split_seed: u64,
) -> Result<PretrainOutcome> {
    let external = match view {
        View::Frontal => &config.pretrain.frontal_checkpoint,
        View::Lateral => &config.pretrain.lateral_checkpoint,
    };
    if let Some(path) = external {
        let (model, meta) = checkpoint::load_single_view(path)?;
        if model.view() != view {
            return Err(Error::Config(format!("{} holds a {} model, expected {view}", path.display(), model.view())));
        }
        return Ok(PretrainOutcome {
            model,
            history: TrainHistory { records: meta.history },
            best_epoch: meta.epoch,
        });
    }
    let stream = match view {
        View::Frontal => Stream::PretrainFrontal,
        View::Lateral => Stream::PretrainLateral,
    };
    let cfg = config.pretrain_config(seed::derive(split_seed, stream, 0))?;
    info!("pretraining {view} branch");
    let out = transfer::pretrain_single_view(view, spec, train, validation, &cfg, &config.scores)?;
    Ok(PretrainOutcome {
        model: out.best,
        history: out.history,
        best_epoch: out.best_epoch,
    })
}

/// Trains one split end to end and scores its test set under every
/// configured view mode.
pub fn run_split(
    config: &ExperimentConfig,
    spec: &ArchitectureSpec,
    train: &Dataset,
    validation: &Dataset,
    test: &Dataset,
    split_seed: u64,
) -> Result<SplitOutcome> {
    let mut model = MultiviewModel::new(spec.clone(), &mut seed::rng(split_seed, Stream::Init, 0))?;
    let mut pretrained = Vec::new();
    if config.use_transfer {
        let f = pretrained_branch(config, View::Frontal, spec, train, validation, split_seed)?;
        let l = pretrained_branch(config, View::Lateral, spec, train, validation, split_seed)?;
        model = transfer::transfer_weights(&model, &f.model, &l.model)?;
        pretrained = vec![f, l];
    }
    let cfg = config.multiview_config(split_seed);
    let scores = training::training_scores(train, &cfg, &config.scores, ViewMode::Both)?;
    info!("training multiview model on {} samples", train.len());
    let out = training::train(model, train, validation, &cfg, &scores)?;

    let mut results = BTreeMap::new();
    for &mode in &config.view_modes {
        let records = evaluation::multiview_records(&out.best, test, mode)?;
        let report = evaluation::evaluate(&records, config.binary_accuracy_rule)?;
        results.insert(mode, (report, records));
    }
    Ok(SplitOutcome {
        model: out.best,
        history: out.history,
        best_epoch: out.best_epoch,
        best_metric: out.best_metric,
        seed: split_seed,
        pretrained,
        test: results,
    })
}

/// One line of `results.csv`; `fold` is `None` on the mean row.
#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub setting: String,
    pub view_mode: ViewMode,
    pub fold: Option<usize>,
    pub metrics: MetricsReport,
}

pub const RESULT_COLUMNS: [&str; 8] = [
    "setting",
    "view_mode",
    "fold",
    "accuracy",
    "auc",
    "balanced_accuracy",
    "binary_accuracy",
    "binary_auc",
];

pub fn write_results(path: &Path, rows: &[ResultRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(RESULT_COLUMNS)?;
    for r in rows {
        let mut rec = vec![
            r.setting.clone(),
            r.view_mode.to_string(),
            r.fold.map_or("mean".to_string(), |f| f.to_string()),
        ];
        rec.extend(r.metrics.values().map(|v| v.to_string()));
        w.write_record(rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_results(path: &Path) -> Result<Vec<ResultRow>> {
    if !path.is_file() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let mut r = csv::Reader::from_path(path)?;
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header != RESULT_COLUMNS {
        return Err(Error::Dataset(format!(
            "{}: expected columns {}, found {}",
            path.display(),
            RESULT_COLUMNS.join(","),
            header.join(",")
        )));
    }
    let bad = |row: usize, what: &str| Error::Dataset(format!("{} row {row}: bad {what}", path.display()));
    let mut rows = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        let row = i + 1;
        let view_mode: ViewMode = rec[1].parse().map_err(|_| bad(row, "view_mode"))?;
        let fold = match &rec[2] {
            "mean" => None,
            s => Some(s.parse().map_err(|_| bad(row, "fold"))?),
        };
        let mut v = [0.0; 5];
        for (j, slot) in v.iter_mut().enumerate() {
            *slot = rec[3 + j].parse().map_err(|_| bad(row, RESULT_COLUMNS[3 + j]))?;
        }
        rows.push(ResultRow {
            setting: rec[0].to_string(),
            view_mode,
            fold,
            metrics: MetricsReport::from_values(v),
        });
    }
    Ok(rows)
}

fn write_split_dir(dir: &Path, spec: &ArchitectureSpec, out: &SplitOutcome) -> Result<()> {
    fs::create_dir_all(dir)?;
    let meta = CheckpointMeta {
        kind: ModelKind::Multiview,
        architecture: spec.clone(),
        epoch: out.best_epoch,
        seed: out.seed,
        history: out.history.records.clone(),
    };
    checkpoint::write(&dir.join("model.ckpt"), &meta, &out.model)?;
    out.history.write_csv(&dir.join("history.csv"))?;
    for p in &out.pretrained {
        let view = p.model.view();
        let meta = CheckpointMeta {
            kind: ModelKind::SingleView(view),
            architecture: spec.clone(),
            epoch: p.best_epoch,
            seed: out.seed,
            history: p.history.records.clone(),
        };
        checkpoint::write(&dir.join(format!("pretrain_{view}.ckpt")), &meta, &p.model)?;
    }
    for (mode, (_, records)) in &out.test {
        evaluation::write_records(&dir.join(format!("predictions_{mode}.csv")), records)?;
    }
    Ok(())
}

/// Datasets for one split of `plan`: training, validation, test.
pub fn split_datasets(dataset: &Dataset, plan: &FoldPlan, split: usize) -> (Dataset, Dataset, Dataset) {
    let idx = plan.split_indices(split);
    (dataset.subset(&idx.training), dataset.subset(&idx.validation), dataset.subset(&idx.test))
}

/// Result of [`run_experiment`].
#[derive(Debug, Clone)]
pub struct ExperimentSummary {
    pub rows: Vec<ResultRow>,
    pub splits: BTreeMap<usize, SplitOutcome>,
}

/// Runs the listed splits (all of them when `splits` is `None`) and writes
/// the run directory.
pub fn run_experiment(config: &ExperimentConfig, run_dir: &Path, splits: Option<&[usize]>) -> Result<ExperimentSummary> {
    config.validate()?;
    let dataset = config.data.load()?;
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if config.use_curriculum {
        assign_scores(&dataset, &config.scores, ViewMode::Both)?;
    }
    let spec = config.architecture_for(&dataset)?;
    let plan = stratified_kfold(&dataset, config.folds, config.seed)?;
    let chosen: Vec<usize> = match splits {
        Some(s) => s.to_vec(),
        None => (0..config.folds).collect(),
    };
    if let Some(&bad) = chosen.iter().find(|&&s| s >= config.folds) {
        return Err(Error::Config(format!("split {bad} out of range for {} folds", config.folds)));
    }

    fs::create_dir_all(run_dir)?;
    fs::write(run_dir.join("config.json"), serde_json::to_string_pretty(config)?)?;
    plan.write_csv(&run_dir.join("folds.csv"))?;
    plan.write_roles_csv(&run_dir.join("fold_roles.csv"))?;

    let mut history = csv::Writer::from_path(run_dir.join("history.csv"))?;
    let mut header = vec!["split", "stage"];
    header.extend(TrainHistory::COLUMNS);
    history.write_record(header)?;

    let setting = config.setting_name();
    let mut outcomes = BTreeMap::new();
    for &split in &chosen {
        info!("split {split}: test fold {}", plan.splits()[split].test);
        let (train, validation, test) = split_datasets(&dataset, &plan, split);
        let out = run_split(config, &spec, &train, &validation, &test, config.split_seed(split))?;
        write_split_dir(&run_dir.join(format!("split_{split}")), &spec, &out)?;
        for p in &out.pretrained {
            let stage = format!("pretrain_{}", p.model.view());
            for r in &p.history.records {
                let mut rec = vec![split.to_string(), stage.clone()];
                rec.extend(r.csv_fields());
                history.write_record(rec)?;
            }
        }
        for r in &out.history.records {
            let mut rec = vec![split.to_string(), "multiview".to_string()];
            rec.extend(r.csv_fields());
            history.write_record(rec)?;
        }
        history.flush()?;
        outcomes.insert(split, out);
    }

    let mut rows = Vec::new();
    for &mode in &config.view_modes {
        let mut reports = Vec::new();
        for (&split, out) in &outcomes {
            let report = out.test[&mode].0;
            reports.push(report);
            rows.push(ResultRow {
                setting: setting.clone(),
                view_mode: mode,
                fold: Some(plan.splits()[split].test),
                metrics: report,
            });
        }
        rows.push(ResultRow {
            setting: setting.clone(),
            view_mode: mode,
            fold: None,
            metrics: MetricsReport::mean(&reports).expect("at least one split"),
        });
    }
    write_results(&run_dir.join("results.csv"), &rows)?;
    Ok(ExperimentSummary { rows, splits: outcomes })
}

/// Pretrains one view's branch on a split's training set exactly as
/// [`run_experiment`] would, and writes its checkpoint, history and test
/// predictions under `run_dir`.
pub fn run_pretrain(config: &ExperimentConfig, view: View, run_dir: &Path, split: usize) -> Result<(PretrainOutcome, MetricsReport)> {
    config.validate()?;
    let dataset = config.data.load()?;
    let spec = config.architecture_for(&dataset)?;
    let plan = stratified_kfold(&dataset, config.folds, config.seed)?;
    if split >= plan.k() {
        return Err(Error::Config(format!("split {split} out of range for {} folds", plan.k())));
    }
    let (train, validation, test) = split_datasets(&dataset, &plan, split);
    let out = pretrained_branch(config, view, &spec, &train, &validation, config.split_seed(split))?;
    let records = evaluation::single_view_records(&out.model, &test)?;
    let report = evaluation::evaluate(&records, config.binary_accuracy_rule)?;

    fs::create_dir_all(run_dir)?;
    fs::write(run_dir.join("config.json"), serde_json::to_string_pretty(config)?)?;
    let meta = CheckpointMeta {
        kind: ModelKind::SingleView(view),
        architecture: spec,
        epoch: out.best_epoch,
        seed: config.split_seed(split),
        history: out.history.records.clone(),
    };
    checkpoint::write(&run_dir.join(format!("pretrain_{view}.ckpt")), &meta, &out.model)?;
    out.history.write_csv(&run_dir.join(format!("history_{view}.csv")))?;
    evaluation::write_records(&run_dir.join(format!("predictions_{view}.csv")), &records)?;
    Ok((out, report))
}

/// Which part of a split to evaluate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Subset {
    Training,
    Validation,
    Test,
}

impl std::str::FromStr for Subset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "training" | "train" => Ok(Self::Training),
            "validation" | "val" => Ok(Self::Validation),
            "test" => Ok(Self::Test),
            other => Err(Error::Config(format!("unknown subset `{other}`"))),
        }
    }
}

/// Reloads the dataset of a finished run and returns the requested subset
/// of one split, that split's checkpoint path and the run's configuration.
pub fn run_subset(run_dir: &Path, split: usize, subset: Subset) -> Result<(Dataset, PathBuf, ExperimentConfig)> {
    let config = ExperimentConfig::from_json_file(&run_dir.join("config.json"))?;
    let dataset = config.data.load()?;
    let plan = stratified_kfold(&dataset, config.folds, config.seed)?;
    if split >= plan.k() {
        return Err(Error::Config(format!("split {split} out of range for {} folds", plan.k())));
    }
    let (train, validation, test) = split_datasets(&dataset, &plan, split);
    let data = match subset {
        Subset::Training => train,
        Subset::Validation => validation,
        Subset::Test => test,
    };
    let checkpoint = run_dir.join(format!("split_{split}")).join("model.ckpt");
    Ok((data, checkpoint, config))
}

/// A loaded checkpoint of either kind.
pub enum LoadedModel {
    Multiview(MultiviewModel),
    SingleView(SingleViewModel),
}

pub fn load_any(path: &Path) -> Result<(LoadedModel, CheckpointMeta)> {
    let (meta, _) = checkpoint::read(path)?;
    Ok(match meta.kind {
        ModelKind::Multiview => {
            let (m, meta) = checkpoint::load_multiview(path)?;
            (LoadedModel::Multiview(m), meta)
        }
        ModelKind::SingleView(_) => {
            let (m, meta) = checkpoint::load_single_view(path)?;
            (LoadedModel::SingleView(m), meta)
        }
    })
}

/// Scores `dataset` with a checkpoint. Multiview models are evaluated under
/// each of `modes`; a single-view model under its own view only.
pub fn evaluate_checkpoint(
    path: &Path,
    dataset: &Dataset,
    modes: &[ViewMode],
    rule: BinaryAccuracyRule,
) -> Result<Vec<(ViewMode, MetricsReport, Vec<EvalRecord>)>> {
    let (model, _) = load_any(path)?;
    let mut out = Vec::new();
    match model {
        LoadedModel::Multiview(m) => {
            for &mode in modes {
                let records = evaluation::multiview_records(&m, dataset, mode)?;
                out.push((mode, evaluation::evaluate(&records, rule)?, records));
            }
        }
        LoadedModel::SingleView(m) => {
            let records = evaluation::single_view_records(&m, dataset)?;
            out.push((m.view().mode(), evaluation::evaluate(&records, rule)?, records));
        }
    }
    Ok(out)
}

const REPORT_HEADINGS: [&str; 5] = ["Accuracy", "AUC", "Balanced accuracy", "Binary accuracy", "Binary AUC"];

/// Merges the mean rows of several `results.csv` files into one text table,
/// grouped by view mode. Within each group the largest value of every
/// column is bolded; equal values at the printed precision are all bolded.
pub fn report(paths: &[PathBuf]) -> Result<String> {
    let mut means = Vec::new();
    for path in paths {
        means.extend(read_results(path)?.into_iter().filter(|r| r.fold.is_none()));
    }
    if means.is_empty() {
        return Err(Error::Dataset("no mean rows in the given results".into()));
    }
    let mut out = String::new();
    out.push_str(&format!("| Setting | View | {} |\n", REPORT_HEADINGS.join(" | ")));
    out.push_str(&format!("|{}\n", "---|".repeat(2 + REPORT_HEADINGS.len())));
    for mode in ViewMode::ALL {
        let group: Vec<&ResultRow> = means.iter().filter(|r| r.view_mode == mode).collect();
        if group.is_empty() {
            continue;
        }
        let cells: Vec<[String; 5]> = group
            .iter()
            .map(|r| r.metrics.values().map(|v| format!("{v:.4}")))
            .collect();
        let best: Vec<f64> = (0..5)
            .map(|c| {
                cells
                    .iter()
                    .map(|row| row[c].parse::<f64>().unwrap_or(f64::NEG_INFINITY))
                    .fold(f64::NEG_INFINITY, f64::max)
            })
            .collect();
        for (row, text) in group.iter().zip(&cells) {
            let marked: Vec<String> = text
                .iter()
                .enumerate()
                .map(|(c, t)| {
                    if t.parse::<f64>().ok() == Some(best[c]) {
                        format!("**{t}**")
                    } else {
                        t.clone()
                    }
                })
                .collect();
            out.push_str(&format!("| {} | {} | {} |\n", row.setting, mode, marked.join(" | ")));
        }
    }
    Ok(out)
}
