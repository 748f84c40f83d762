//! Mini-batch training under a sampling schedule.
//!
//! Every epoch draws one permutation from that epoch's schedule, walks it in
//! consecutive batches (the last one may be short), sums per-sample
//! gradients, divides by the batch length and takes one Adam step. The
//! parameters with the best validation score are kept.

use log::info;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::HashSet;
use std::path::Path;

use crate::curriculum::{self, assign_scores, Curriculum, CurriculumParams, DifficultyScoreTable};
use crate::dataset::{Dataset, Sample};
use crate::error::{Error, Result};
use crate::evaluation::{self, EvalRecord};
use crate::model::{MultiviewModel, Parameters, SingleViewModel};
use crate::optim::{Adam, AdamConfig};
use crate::view::{View, ViewMode};

/// Samples per gradient work unit. Fixed so the summation order, and hence
/// the result, does not depend on the thread count.
const GRAD_CHUNK: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMetric {
    #[default]
    Auc,
    Accuracy,
    BalancedAccuracy,
}

impl SelectionMetric {
    pub fn compute(self, records: &[EvalRecord]) -> Result<f64> {
        match self {
            Self::Auc => evaluation::auc_multiclass(records),
            Self::Accuracy => evaluation::accuracy(records),
            Self::BalancedAccuracy => evaluation::balanced_accuracy(records),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub decay_horizon: usize,
    pub total_epochs: usize,
    pub seed: u64,
    pub curriculum_enabled: bool,
    pub selection_metric: SelectionMetric,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        Self {
            batch_size: 64,
            learning_rate: adam.learning_rate,
            beta1: adam.beta1,
            beta2: adam.beta2,
            epsilon: adam.epsilon,
            decay_horizon: 16,
            total_epochs: 32,
            seed: 0,
            curriculum_enabled: true,
            selection_metric: SelectionMetric::Auc,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::Config("Adam epsilon must be positive".into()));
        }
        self.curriculum_params().map(|_| ())
    }

    pub fn curriculum_params(&self) -> Result<CurriculumParams> {
        CurriculumParams::new(self.decay_horizon, self.total_epochs)
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean per-sample training loss over the epoch.
    pub train_loss: f64,
    /// `None` when the validation set is empty or the metric is undefined.
    pub val_metric: Option<f64>,
    pub probability_hash: String,
    pub order_hash: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
}

impl TrainHistory {
    pub const COLUMNS: [&'static str; 5] = ["epoch", "train_loss", "val_metric", "probability_hash", "order_hash"];

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(Self::COLUMNS)?;
        for r in &self.records {
            w.write_record(r.csv_fields())?;
        }
        w.flush()?;
        Ok(())
    }
}

impl EpochRecord {
    pub fn csv_fields(&self) -> [String; 5] {
        [
            self.epoch.to_string(),
            format!("{:e}", self.train_loss),
            self.val_metric.map(|v| format!("{v:e}")).unwrap_or_default(),
            self.probability_hash.clone(),
            self.order_hash.clone(),
        ]
    }
}

/// A model the trainer can fit.
pub trait Trainable: Parameters + Clone + Send + Sync {
    fn zeros_like(&self) -> Self;

    /// Loss of one sample, with its gradient added into `grads`.
    fn sample_gradient(&self, sample: &Sample, grads: &mut Self) -> Result<f64>;

    /// Records used for model selection.
    fn validation_records(&self, dataset: &Dataset) -> Result<Vec<EvalRecord>>;
}

impl Trainable for MultiviewModel {
    fn zeros_like(&self) -> Self {
        MultiviewModel::zeros_like(self)
    }

    fn sample_gradient(&self, sample: &Sample, grads: &mut Self) -> Result<f64> {
        self.accumulate_gradient(&sample.frontal, &sample.lateral, sample.label, grads)
    }

    fn validation_records(&self, dataset: &Dataset) -> Result<Vec<EvalRecord>> {
        evaluation::multiview_records(self, dataset, ViewMode::Both)
    }
}

impl Trainable for SingleViewModel {
    fn zeros_like(&self) -> Self {
        SingleViewModel::zeros_like(self)
    }

    fn sample_gradient(&self, sample: &Sample, grads: &mut Self) -> Result<f64> {
        let image = match self.view() {
            View::Frontal => &sample.frontal,
            View::Lateral => &sample.lateral,
        };
        self.accumulate_gradient(image, sample.label, grads)
    }

    fn validation_records(&self, dataset: &Dataset) -> Result<Vec<EvalRecord>> {
        evaluation::single_view_records(self, dataset)
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<M> {
    /// Parameters from `best_epoch`.
    pub best: M,
    pub best_epoch: usize,
    pub best_metric: Option<f64>,
    /// Parameters after the last epoch.
    pub last: M,
    pub history: TrainHistory,
}

/// Sum of per-sample losses over `batch`; the summed gradient goes into `grads`.
pub fn batch_gradient<M: Trainable>(model: &M, samples: &[Sample], batch: &[usize], grads: &mut M) -> Result<f64> {
    let partials: Vec<(f64, M)> = batch
        .par_chunks(GRAD_CHUNK)
        .map(|chunk| {
            let mut g = model.zeros_like();
            let mut loss = 0.0;
            for &i in chunk {
                loss += model.sample_gradient(&samples[i], &mut g)?;
            }
            Ok((loss, g))
        })
        .collect::<Result<_>>()?;
    let mut total = 0.0;
    for (loss, g) in partials {
        total += loss;
        grads.add_assign(&g);
    }
    Ok(total)
}

/// Short hex digest of a permutation.
pub fn order_fingerprint(order: &[usize]) -> String {
    let mut h = Sha256::new();
    for &i in order {
        h.update((i as u64).to_le_bytes());
    }
    hex::encode(&h.finalize()[..8])
}

/// Per-sample scores for a run: the table row for `view_mode` when the
/// curriculum is on, otherwise equal scores.
pub fn training_scores(train: &Dataset, config: &TrainConfig, table: &DifficultyScoreTable, view_mode: ViewMode) -> Result<Vec<f64>> {
    if config.curriculum_enabled {
        assign_scores(train, table, view_mode)
    } else {
        Ok(vec![1.0; train.len()])
    }
}

/// Trains `model` on `train`, selecting on `validation`. The sampling seed
/// is `config.seed`; initialization is the caller's business.
pub fn train<M: Trainable>(
    model: M,
    train: &Dataset,
    validation: &Dataset,
    config: &TrainConfig,
    scores: &[f64],
) -> Result<TrainOutcome<M>> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if scores.len() != train.len() {
        return Err(Error::TrainingContract(format!(
            "{} scores for {} training samples",
            scores.len(),
            train.len()
        )));
    }
    let train_ids: HashSet<&str> = train.samples().iter().map(|s| s.id.as_str()).collect();
    if let Some(s) = validation.samples().iter().find(|s| train_ids.contains(s.id.as_str())) {
        return Err(Error::TrainingContract(format!("sample `{}` is in both training and validation sets", s.id)));
    }

    let curriculum = Curriculum::new(scores, config.curriculum_params()?)?;
    let mut adam = Adam::new(config.adam());
    let mut model = model;
    let mut history = TrainHistory::default();
    let mut best: Option<(M, usize, f64)> = None;

    for schedule in curriculum.schedules() {
        let epoch = schedule.epoch();
        let order = curriculum::epoch_permutation(&schedule, Curriculum::permutation_seed(config.seed, epoch));
        let mut epoch_loss = 0.0;
        for (b, batch) in order.chunks(config.batch_size).enumerate() {
            let mut grads = model.zeros_like();
            let loss = batch_gradient(&model, train.samples(), batch, &mut grads)?;
            if !loss.is_finite() {
                return Err(Error::NumericalFailure { epoch, batch: b + 1 });
            }
            grads.scale(1.0 / batch.len() as f64);
            adam.step(&mut model, &grads);
            epoch_loss += loss;
        }
        let train_loss = epoch_loss / train.len() as f64;

        let val_metric = if validation.is_empty() {
            None
        } else {
            match config.selection_metric.compute(&model.validation_records(validation)?) {
                Ok(v) => Some(v),
                Err(Error::UndefinedMetric(_)) => None,
                Err(e) => return Err(e),
            }
        };
        if let Some(v) = val_metric {
            if best.as_ref().is_none_or(|(_, _, b)| v > *b) {
                best = Some((model.clone(), epoch, v));
            }
        }
        info!(
            "epoch {epoch}: loss {train_loss:.6}, val {}",
            val_metric.map_or("n/a".to_string(), |v| format!("{v:.6}"))
        );
        history.records.push(EpochRecord {
            epoch,
            train_loss,
            val_metric,
            probability_hash: schedule.fingerprint(),
            order_hash: order_fingerprint(&order),
        });
    }

    let last_epoch = config.total_epochs;
    let (best, best_epoch, best_metric) = match best {
        Some((m, e, v)) => (m, e, Some(v)),
        None => (model.clone(), last_epoch, None),
    };
    Ok(TrainOutcome {
        best,
        best_epoch,
        best_metric,
        last: model,
        history,
    })
}
