//! Three-class and fracture-vs-normal metrics.
//!
//! Multiclass AUC is the macro average of one-vs-rest AUCs, each scored by
//! that class's own probability. The binary task maps label 0 to 0 and
//! labels 1 and 2 to 1, scoring each record by `1 - p(class 0)`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::model::{MultiviewModel, SingleViewModel};
use crate::nn::argmax;
use crate::view::{SourceBranch, ViewMode};
use crate::N_CLASSES;

/// One scored sample.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalRecord {
    pub id: String,
    pub y: usize,
    pub probabilities: [f64; N_CLASSES],
    pub source_branch: SourceBranch,
}

impl EvalRecord {
    pub fn new(id: impl Into<String>, y: usize, probabilities: &[f64], source_branch: SourceBranch) -> Result<Self> {
        if y >= N_CLASSES {
            return Err(Error::Dataset(format!("label {y} is outside 0..{N_CLASSES}")));
        }
        let probabilities: [f64; N_CLASSES] = probabilities
            .try_into()
            .map_err(|_| Error::Dataset(format!("expected {N_CLASSES} probabilities, got {}", probabilities.len())))?;
        let total: f64 = probabilities.iter().sum();
        if probabilities.iter().any(|p| !(*p >= 0.0)) || (total - 1.0).abs() > 1e-6 {
            return Err(Error::Dataset(format!("probabilities {probabilities:?} are not a distribution")));
        }
        Ok(Self {
            id: id.into(),
            y,
            probabilities,
            source_branch,
        })
    }

    pub fn predicted(&self) -> usize {
        argmax(&self.probabilities)
    }
}

/// Fracture-vs-normal view of a record.
#[derive(Debug, Clone, PartialEq)]
pub struct BinaryRecord {
    pub id: String,
    pub y: usize,
    /// `1 - p(class 0)`.
    pub score: f64,
    /// Binarized argmax label.
    pub predicted: usize,
}

/// How binary accuracy decides the predicted class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BinaryAccuracyRule {
    /// Binarize the three-class argmax label.
    #[default]
    LabelLevel,
    /// Predict fracture when the binary score is at least 0.5.
    Threshold,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub auc: f64,
    pub balanced_accuracy: f64,
    pub binary_accuracy: f64,
    pub binary_auc: f64,
}

impl MetricsReport {
    pub const COLUMNS: [&'static str; 5] = ["accuracy", "auc", "balanced_accuracy", "binary_accuracy", "binary_auc"];

    pub fn values(&self) -> [f64; 5] {
        [
            self.accuracy,
            self.auc,
            self.balanced_accuracy,
            self.binary_accuracy,
            self.binary_auc,
        ]
    }

    pub fn from_values(v: [f64; 5]) -> Self {
        Self {
            accuracy: v[0],
            auc: v[1],
            balanced_accuracy: v[2],
            binary_accuracy: v[3],
            binary_auc: v[4],
        }
    }

    /// Column-wise mean.
    pub fn mean(reports: &[MetricsReport]) -> Option<MetricsReport> {
        if reports.is_empty() {
            return None;
        }
        let mut acc = [0.0; 5];
        for r in reports {
            for (a, v) in acc.iter_mut().zip(r.values()) {
                *a += v;
            }
        }
        Some(Self::from_values(acc.map(|a| a / reports.len() as f64)))
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(Self::COLUMNS)?;
        w.write_record(self.values().map(|v| v.to_string()))?;
        w.flush()?;
        Ok(())
    }
}

fn require_records<T>(records: &[T]) -> Result<()> {
    if records.is_empty() {
        return Err(Error::UndefinedMetric("no records".into()));
    }
    Ok(())
}

pub fn accuracy(records: &[EvalRecord]) -> Result<f64> {
    require_records(records)?;
    let correct = records.iter().filter(|r| r.predicted() == r.y).count();
    Ok(correct as f64 / records.len() as f64)
}

/// Mean per-class recall.
pub fn balanced_accuracy(records: &[EvalRecord]) -> Result<f64> {
    require_records(records)?;
    let mut hits = [0usize; N_CLASSES];
    let mut totals = [0usize; N_CLASSES];
    for r in records {
        totals[r.y] += 1;
        if r.predicted() == r.y {
            hits[r.y] += 1;
        }
    }
    if let Some(class) = totals.iter().position(|&t| t == 0) {
        return Err(Error::UndefinedMetric(format!("balanced accuracy: class {class} has no records")));
    }
    let recall_sum: f64 = hits.iter().zip(&totals).map(|(&h, &t)| h as f64 / t as f64).sum();
    Ok(recall_sum / N_CLASSES as f64)
}

/// Mann-Whitney AUC of `scores` for `positive` labels, ties counted as one
/// half via midranks.
pub fn rank_auc(scores: &[f64], positive: &[bool]) -> Result<f64> {
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric(format!(
            "AUC needs both classes, got {n_pos} positive and {n_neg} negative"
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && scores[order[end]] == scores[order[start]] {
            end += 1;
        }
        // Ranks are 1-based; the tie group spans ranks start+1 ..= end.
        let midrank = (start + 1 + end) as f64 / 2.0;
        rank_sum += midrank * order[start..end].iter().filter(|&&i| positive[i]).count() as f64;
        start = end;
    }
    let (p, n) = (n_pos as f64, n_neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// Macro average of one-vs-rest AUCs.
pub fn auc_multiclass(records: &[EvalRecord]) -> Result<f64> {
    require_records(records)?;
    let mut total = 0.0;
    for class in 0..N_CLASSES {
        let scores: Vec<f64> = records.iter().map(|r| r.probabilities[class]).collect();
        let positive: Vec<bool> = records.iter().map(|r| r.y == class).collect();
        total += rank_auc(&scores, &positive).map_err(|e| match e {
            Error::UndefinedMetric(msg) => Error::UndefinedMetric(format!("class {class} one-vs-rest: {msg}")),
            other => other,
        })?;
    }
    Ok(total / N_CLASSES as f64)
}

pub fn binarize_label(label: usize) -> usize {
    usize::from(label != 0)
}

pub fn binarize(records: &[EvalRecord]) -> Vec<BinaryRecord> {
    records
        .iter()
        .map(|r| BinaryRecord {
            id: r.id.clone(),
            y: binarize_label(r.y),
            score: 1.0 - r.probabilities[0],
            predicted: binarize_label(r.predicted()),
        })
        .collect()
}

pub fn binary_accuracy(records: &[BinaryRecord], rule: BinaryAccuracyRule) -> Result<f64> {
    require_records(records)?;
    let correct = records
        .iter()
        .filter(|r| {
            let predicted = match rule {
                BinaryAccuracyRule::LabelLevel => r.predicted,
                BinaryAccuracyRule::Threshold => usize::from(r.score >= 0.5),
            };
            predicted == r.y
        })
        .count();
    Ok(correct as f64 / records.len() as f64)
}

pub fn binary_auc(records: &[BinaryRecord]) -> Result<f64> {
    let scores: Vec<f64> = records.iter().map(|r| r.score).collect();
    let positive: Vec<bool> = records.iter().map(|r| r.y == 1).collect();
    rank_auc(&scores, &positive)
}

pub fn evaluate(records: &[EvalRecord], rule: BinaryAccuracyRule) -> Result<MetricsReport> {
    let binary = binarize(records);
    Ok(MetricsReport {
        accuracy: accuracy(records)?,
        auc: auc_multiclass(records)?,
        balanced_accuracy: balanced_accuracy(records)?,
        binary_accuracy: binary_accuracy(&binary, rule)?,
        binary_auc: binary_auc(&binary)?,
    })
}

/// Scores every sample with the views `mode` allows.
pub fn multiview_records(model: &MultiviewModel, dataset: &Dataset, mode: ViewMode) -> Result<Vec<EvalRecord>> {
    dataset
        .samples()
        .iter()
        .map(|s| {
            let frontal = mode.uses_frontal().then_some(&s.frontal);
            let lateral = mode.uses_lateral().then_some(&s.lateral);
            let pred = model.predict(frontal, lateral)?;
            EvalRecord::new(s.id.clone(), s.label, pred.probabilities(), pred.source_branch)
        })
        .collect()
}

pub fn single_view_records(model: &SingleViewModel, dataset: &Dataset) -> Result<Vec<EvalRecord>> {
    dataset
        .samples()
        .iter()
        .map(|s| {
            let image = match model.view() {
                crate::View::Frontal => &s.frontal,
                crate::View::Lateral => &s.lateral,
            };
            let pred = model.predict(image)?;
            EvalRecord::new(s.id.clone(), s.label, pred.probabilities(), pred.source_branch)
        })
        .collect()
}

/// Writes `id,y,p0,p1,p2,source_branch`.
pub fn write_records(path: &Path, records: &[EvalRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["id", "y", "p0", "p1", "p2", "source_branch"])?;
    for r in records {
        w.write_record([
            r.id.clone(),
            r.y.to_string(),
            r.probabilities[0].to_string(),
            r.probabilities[1].to_string(),
            r.probabilities[2].to_string(),
            r.source_branch.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_records(path: &Path) -> Result<Vec<EvalRecord>> {
    if !path.is_file() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let mut reader = csv::Reader::from_path(path)?;
    let expected = ["id", "y", "p0", "p1", "p2", "source_branch"];
    if reader.headers()?.iter().ne(expected) {
        return Err(Error::Manifest(format!("prediction file must have header `{}`", expected.join(","))));
    }
    let mut out = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec?;
        let num = |k: usize| -> Result<f64> {
            rec[k]
                .parse()
                .map_err(|_| Error::Manifest(format!("row {}: `{}` is not a number", i + 1, &rec[k])))
        };
        let y = rec[1].parse::<usize>().map_err(|_| Error::LabelDomain {
            row: i + 1,
            label: rec[1].to_string(),
        })?;
        out.push(EvalRecord::new(&rec[0], y, &[num(2)?, num(3)?, num(4)?], rec[5].parse()?)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rec(y: usize, p: [f64; 3]) -> EvalRecord {
        EvalRecord::new("r", y, &p, SourceBranch::Merge).unwrap()
    }

    fn random_records(rng: &mut ChaCha8Rng, n: usize) -> Vec<EvalRecord> {
        (0..n)
            .map(|i| {
                let y = if i < 3 { i } else { rng.random_range(0..3) };
                // Coarse values so that ties actually occur.
                let raw: Vec<f64> = (0..3).map(|_| f64::from(rng.random_range(1u8..6))).collect();
                let total: f64 = raw.iter().sum();
                let p: Vec<f64> = raw.iter().map(|v| v / total).collect();
                EvalRecord::new(format!("s{i}"), y, &p, SourceBranch::Merge).unwrap()
            })
            .collect()
    }

    /// O(n^2) comparison of every positive/negative pair.
    fn pairwise_auc(scores: &[f64], positive: &[bool]) -> f64 {
        let mut wins = 0.0;
        let mut pairs = 0.0;
        for i in 0..scores.len() {
            for j in 0..scores.len() {
                if positive[i] && !positive[j] {
                    pairs += 1.0;
                    if scores[i] > scores[j] {
                        wins += 1.0;
                    } else if scores[i] == scores[j] {
                        wins += 0.5;
                    }
                }
            }
        }
        wins / pairs
    }

    #[test]
    fn accuracy_examples() {
        let all = vec![rec(0, [0.8, 0.1, 0.1]), rec(2, [0.1, 0.1, 0.8])];
        assert_eq!(accuracy(&all).unwrap(), 1.0);
        let some = vec![rec(0, [0.8, 0.1, 0.1]), rec(1, [0.1, 0.8, 0.1]), rec(2, [0.8, 0.1, 0.1])];
        assert!((accuracy(&some).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert!(matches!(accuracy(&[]), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn balanced_accuracy_examples() {
        // Recalls 1.0, 0.5, 0.0.
        let r = vec![
            rec(0, [0.9, 0.05, 0.05]),
            rec(1, [0.1, 0.8, 0.1]),
            rec(1, [0.8, 0.1, 0.1]),
            rec(2, [0.8, 0.1, 0.1]),
        ];
        assert!((balanced_accuracy(&r).unwrap() - 0.5).abs() < 1e-15);
        let missing = vec![rec(0, [0.9, 0.05, 0.05]), rec(1, [0.1, 0.8, 0.1])];
        assert!(matches!(balanced_accuracy(&missing), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn balanced_accuracy_on_skewed_data() {
        let mut rng = ChaCha8Rng::seed_from_u64(90);
        let mut records = Vec::new();
        for (class, n) in [(0, 90), (1, 9), (2, 1)] {
            for _ in 0..n {
                let hit = rng.random_bool(0.7);
                let mut p = [0.1, 0.1, 0.1];
                p[if hit { class } else { (class + 1) % 3 }] = 0.8;
                records.push(rec(class, p));
            }
        }
        let mut recall = [0.0; 3];
        for c in 0..3 {
            let of_class: Vec<_> = records.iter().filter(|r| r.y == c).collect();
            let hits = of_class.iter().filter(|r| r.probabilities[c] == 0.8).count();
            recall[c] = hits as f64 / of_class.len() as f64;
        }
        let expected = recall.iter().sum::<f64>() / 3.0;
        assert!((balanced_accuracy(&records).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn auc_examples() {
        let ordered = vec![
            rec(0, [0.8, 0.1, 0.1]),
            rec(1, [0.1, 0.8, 0.1]),
            rec(2, [0.1, 0.1, 0.8]),
            rec(0, [0.7, 0.2, 0.1]),
        ];
        assert_eq!(auc_multiclass(&ordered).unwrap(), 1.0);
        let flat = vec![
            rec(0, [1.0 / 3.0; 3]),
            rec(1, [1.0 / 3.0; 3]),
            rec(2, [1.0 / 3.0; 3]),
        ];
        assert_eq!(auc_multiclass(&flat).unwrap(), 0.5);
        let degenerate = vec![rec(0, [0.8, 0.1, 0.1]), rec(0, [0.7, 0.2, 0.1])];
        assert!(matches!(auc_multiclass(&degenerate), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn binarization() {
        let r = vec![
            rec(0, [1.0, 0.0, 0.0]),
            rec(1, [0.2, 0.5, 0.3]),
            rec(2, [0.2, 0.3, 0.5]),
        ];
        let b = binarize(&r);
        assert_eq!(b.iter().map(|x| x.y).collect::<Vec<_>>(), vec![0, 1, 1]);
        assert_eq!(b[0].score, 0.0);
        assert!((b[1].score - 0.8).abs() < 1e-15);
        for l in 0..3 {
            assert_eq!(binarize_label(binarize_label(l)), binarize_label(l));
        }
        assert_eq!(binary_accuracy(&b, BinaryAccuracyRule::LabelLevel).unwrap(), 1.0);
        assert_eq!(binary_auc(&b).unwrap(), 1.0);
        let constant: Vec<BinaryRecord> = b.iter().map(|r| BinaryRecord { score: 0.3, ..r.clone() }).collect();
        assert_eq!(binary_auc(&constant).unwrap(), 0.5);
        assert!(binary_auc(&b[1..]).is_err());
    }

    #[test]
    fn threshold_rule_differs_from_label_rule() {
        // argmax says normal, but 1 - p0 = 0.6 says fracture.
        let r = binarize(&[rec(1, [0.4, 0.3, 0.3])]);
        assert_eq!(binary_accuracy(&r, BinaryAccuracyRule::LabelLevel).unwrap(), 0.0);
        assert_eq!(binary_accuracy(&r, BinaryAccuracyRule::Threshold).unwrap(), 1.0);
    }

    #[test]
    fn metrics_match_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..100 {
            let n = rng.random_range(6..=50);
            let records = random_records(&mut rng, n);
            let naive_acc = records
                .iter()
                .filter(|r| {
                    let best = r.probabilities.iter().cloned().fold(f64::MIN, f64::max);
                    r.probabilities.iter().position(|&p| p == best).unwrap() == r.y
                })
                .count() as f64
                / n as f64;
            assert_eq!(accuracy(&records).unwrap(), naive_acc);

            let mut macro_auc = 0.0;
            for c in 0..3 {
                let s: Vec<f64> = records.iter().map(|r| r.probabilities[c]).collect();
                let pos: Vec<bool> = records.iter().map(|r| r.y == c).collect();
                macro_auc += pairwise_auc(&s, &pos) / 3.0;
            }
            assert!((auc_multiclass(&records).unwrap() - macro_auc).abs() < 1e-12);

            let b = binarize(&records);
            if b.iter().any(|r| r.y == 0) && b.iter().any(|r| r.y == 1) {
                let s: Vec<f64> = b.iter().map(|r| r.score).collect();
                let pos: Vec<bool> = b.iter().map(|r| r.y == 1).collect();
                assert!((binary_auc(&b).unwrap() - pairwise_auc(&s, &pos)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.csv");
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let records = random_records(&mut rng, 10);
        write_records(&path, &records).unwrap();
        assert_eq!(read_records(&path).unwrap(), records);
    }

    proptest! {
        #[test]
        fn auc_invariant_under_monotone_transform(
            scores in prop::collection::vec(0.0f64..1.0, 2..50),
            flips in prop::collection::vec(any::<bool>(), 2..50),
        ) {
            let n = scores.len().min(flips.len());
            let (scores, positive) = (&scores[..n], &flips[..n]);
            prop_assume!(positive.iter().any(|&p| p) && positive.iter().any(|&p| !p));
            let base = rank_auc(scores, positive).unwrap();
            let transformed: Vec<f64> = scores.iter().map(|s| (3.0 * s).exp() - 7.0).collect();
            prop_assert!((rank_auc(&transformed, positive).unwrap() - base).abs() < 1e-12);
        }

        #[test]
        fn balanced_equals_plain_under_equal_counts(per_class in 1usize..10, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let records: Vec<EvalRecord> = (0..3 * per_class)
                .map(|i| {
                    let mut p = [0.2, 0.2, 0.2];
                    p[rng.random_range(0..3)] = 0.6;
                    rec(i % 3, p)
                })
                .collect();
            let diff = balanced_accuracy(&records).unwrap() - accuracy(&records).unwrap();
            prop_assert!(diff.abs() < 1e-12);
        }
    }
}
