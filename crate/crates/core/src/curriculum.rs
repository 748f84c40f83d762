//! Knowledge-guided curriculum sampling.
//!
//! Class-level difficulty scores (1 hardest, 100 easiest) seed a sampling
//! distribution proportional to the score. Each following epoch multiplies
//! every probability by `((1/N) / p_initial)^(1/E')` and renormalizes, so the
//! distribution decays geometrically towards uniform and is exactly uniform
//! once the decay horizon `E'` has passed. Every epoch's training order is a
//! full permutation drawn without replacement from the current distribution.

use std::collections::BTreeMap;
use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::seed;
use crate::view::ViewMode;
use crate::N_CLASSES;

pub const MIN_SCORE: f64 = 1.0;
pub const MAX_SCORE: f64 = 100.0;

/// Difficulty score per `(class, view mode)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "BTreeMap<ViewMode, Vec<f64>>", into = "BTreeMap<ViewMode, Vec<f64>>")]
pub struct DifficultyScoreTable {
    entries: BTreeMap<(usize, ViewMode), f64>,
}

impl DifficultyScoreTable {
    /// Expert scores for elbow fracture classes (non-fracture, ulnar,
    /// radial) under each view mode.
    pub fn elbow() -> Self {
        Self::from_rows([
            (ViewMode::FrontalOnly, [30.0, 30.0, 30.0]),
            (ViewMode::LateralOnly, [35.0, 60.0, 45.0]),
            (ViewMode::Both, [45.0, 65.0, 55.0]),
        ])
        .expect("built-in table is valid")
    }

    /// Every entry set to the same score; reduces the curriculum to
    /// uniform shuffling.
    pub fn uniform(score: f64) -> Result<Self> {
        Self::from_rows(ViewMode::ALL.map(|m| (m, [score; N_CLASSES])))
    }

    /// A complete table from one row of class scores per view mode.
    pub fn from_rows(rows: [(ViewMode, [f64; N_CLASSES]); 3]) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (mode, scores) in rows {
            for (class, s) in scores.into_iter().enumerate() {
                entries.insert((class, mode), s);
            }
        }
        let table = Self::from_entries(entries)?;
        table.require_complete()?;
        Ok(table)
    }

    /// Possibly incomplete table; lookups of absent pairs fail in
    /// [`assign_scores`].
    pub fn from_entries(entries: BTreeMap<(usize, ViewMode), f64>) -> Result<Self> {
        for (&(class, mode), &score) in &entries {
            if class >= N_CLASSES {
                return Err(Error::Config(format!("difficulty table names unknown class {class}")));
            }
            if !(MIN_SCORE..=MAX_SCORE).contains(&score) {
                return Err(Error::Config(format!(
                    "difficulty score {score} for class {class}, view mode {mode} is outside [{MIN_SCORE}, {MAX_SCORE}]"
                )));
            }
        }
        Ok(Self { entries })
    }

    pub fn get(&self, class: usize, mode: ViewMode) -> Option<f64> {
        self.entries.get(&(class, mode)).copied()
    }

    pub fn require_complete(&self) -> Result<()> {
        for mode in ViewMode::ALL {
            for class in 0..N_CLASSES {
                if self.get(class, mode).is_none() {
                    return Err(Error::MissingScore {
                        class,
                        view_mode: mode.to_string(),
                    });
                }
            }
        }
        Ok(())
    }
}

impl TryFrom<BTreeMap<ViewMode, Vec<f64>>> for DifficultyScoreTable {
    type Error = Error;

    fn try_from(rows: BTreeMap<ViewMode, Vec<f64>>) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (mode, scores) in rows {
            if scores.len() != N_CLASSES {
                return Err(Error::Config(format!(
                    "view mode {mode} lists {} scores, expected {N_CLASSES}",
                    scores.len()
                )));
            }
            for (class, s) in scores.into_iter().enumerate() {
                entries.insert((class, mode), s);
            }
        }
        Self::from_entries(entries)
    }
}

impl From<DifficultyScoreTable> for BTreeMap<ViewMode, Vec<f64>> {
    fn from(table: DifficultyScoreTable) -> Self {
        let mut rows: BTreeMap<ViewMode, Vec<f64>> = BTreeMap::new();
        for mode in ViewMode::ALL {
            let row: Option<Vec<f64>> = (0..N_CLASSES).map(|c| table.get(c, mode)).collect();
            if let Some(row) = row {
                rows.insert(mode, row);
            }
        }
        rows
    }
}

impl Default for DifficultyScoreTable {
    fn default() -> Self {
        Self::elbow()
    }
}

/// Decay horizon `E'` and total epoch budget `E`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CurriculumParams {
    pub decay_horizon: usize,
    pub total_epochs: usize,
}

impl CurriculumParams {
    pub fn new(decay_horizon: usize, total_epochs: usize) -> Result<Self> {
        let p = Self {
            decay_horizon,
            total_epochs,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.decay_horizon < 1 || self.decay_horizon > self.total_epochs {
            return Err(Error::Config(format!(
                "decay horizon {} must satisfy 1 <= E' <= E = {}",
                self.decay_horizon, self.total_epochs
            )));
        }
        Ok(())
    }
}

impl Default for CurriculumParams {
    fn default() -> Self {
        Self {
            decay_horizon: 16,
            total_epochs: 32,
        }
    }
}

/// Score for every sample: its own override if present, otherwise the
/// table entry for its class under `view_mode`.
pub fn assign_scores(dataset: &Dataset, table: &DifficultyScoreTable, view_mode: ViewMode) -> Result<Vec<f64>> {
    dataset
        .samples()
        .iter()
        .map(|s| match s.score {
            Some(v) => Ok(v),
            None => table.get(s.label, view_mode).ok_or_else(|| Error::MissingScore {
                class: s.label,
                view_mode: view_mode.to_string(),
            }),
        })
        .collect()
}

/// Per-sample sampling probabilities for one epoch (1-based).
#[derive(Debug, Clone, PartialEq)]
pub struct SamplingSchedule {
    epoch: usize,
    probabilities: Vec<f64>,
}

impl SamplingSchedule {
    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn probabilities(&self) -> &[f64] {
        &self.probabilities
    }

    pub fn len(&self) -> usize {
        self.probabilities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probabilities.is_empty()
    }

    /// Short SHA-256 digest of the probability bits, for audit logs.
    pub fn fingerprint(&self) -> String {
        let mut hasher = Sha256::new();
        for p in &self.probabilities {
            hasher.update(p.to_le_bytes());
        }
        hex::encode(&hasher.finalize()[..8])
    }

    /// Appends `epoch,sample_id,probability` rows.
    pub fn write_csv_rows<W: Write>(&self, ids: &[String], out: &mut csv::Writer<W>) -> Result<()> {
        for (id, p) in ids.iter().zip(&self.probabilities) {
            out.write_record([self.epoch.to_string(), id.clone(), format!("{p:e}")])?;
        }
        Ok(())
    }
}

/// Epoch-1 distribution, `p_i = s_i / sum_k s_k`.
pub fn init_probabilities(scores: &[f64]) -> Result<SamplingSchedule> {
    if scores.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if let Some((index, &score)) = scores.iter().enumerate().find(|(_, s)| !(**s > 0.0 && s.is_finite())) {
        return Err(Error::InvalidScore { index, score });
    }
    let total: f64 = scores.iter().sum();
    Ok(SamplingSchedule {
        epoch: 1,
        probabilities: scores.iter().map(|s| s / total).collect(),
    })
}

/// Moves `schedule` forward one epoch. `initial` must be the epoch-1
/// probabilities the schedule started from.
pub fn advance(schedule: &SamplingSchedule, params: &CurriculumParams, initial: &[f64]) -> SamplingSchedule {
    assert_eq!(
        schedule.len(),
        initial.len(),
        "initial distribution must cover the same samples"
    );
    let next = schedule.epoch + 1;
    let n = schedule.len();
    let uniform = 1.0 / n as f64;
    if next > params.decay_horizon {
        return SamplingSchedule {
            epoch: next,
            probabilities: vec![uniform; n],
        };
    }
    let root = 1.0 / params.decay_horizon as f64;
    let raw: Vec<f64> = schedule
        .probabilities
        .iter()
        .zip(initial)
        .map(|(p, p0)| p * (uniform / p0).powf(root))
        .collect();
    let total: f64 = raw.iter().sum();
    SamplingSchedule {
        epoch: next,
        probabilities: raw.into_iter().map(|q| q / total).collect(),
    }
}

/// Full training order drawn without replacement: each position takes a
/// remaining index with probability proportional to its weight among the
/// indices not yet placed.
pub fn epoch_permutation(schedule: &SamplingSchedule, rng_seed: u64) -> Vec<usize> {
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(rng_seed);
    draw_without_replacement(&schedule.probabilities, &mut rng)
}

fn draw_without_replacement<R: Rng>(weights: &[f64], rng: &mut R) -> Vec<usize> {
    let mut remaining: Vec<usize> = (0..weights.len()).collect();
    let mut order = Vec::with_capacity(weights.len());
    while !remaining.is_empty() {
        let total: f64 = remaining.iter().map(|&i| weights[i]).sum();
        let target = rng.random::<f64>() * total;
        let mut acc = 0.0;
        let mut pick = remaining.len() - 1;
        for (slot, &i) in remaining.iter().enumerate() {
            acc += weights[i];
            if target < acc {
                pick = slot;
                break;
            }
        }
        order.push(remaining.remove(pick));
    }
    order
}

/// The full epoch-indexed schedule for one training run.
#[derive(Debug, Clone)]
pub struct Curriculum {
    initial: SamplingSchedule,
    params: CurriculumParams,
}

impl Curriculum {
    pub fn new(scores: &[f64], params: CurriculumParams) -> Result<Self> {
        params.validate()?;
        Ok(Self {
            initial: init_probabilities(scores)?,
            params,
        })
    }

    /// Equal scores for `n` samples: plain shuffled training through the
    /// same sampling path.
    pub fn uniform(n: usize, params: CurriculumParams) -> Result<Self> {
        Self::new(&vec![1.0; n], params)
    }

    pub fn params(&self) -> &CurriculumParams {
        &self.params
    }

    pub fn initial(&self) -> &SamplingSchedule {
        &self.initial
    }

    /// Schedules for epochs `1..=E`.
    pub fn schedules(&self) -> impl Iterator<Item = SamplingSchedule> + '_ {
        std::iter::successors(Some(self.initial.clone()), |s| {
            Some(advance(s, &self.params, &self.initial.probabilities))
        })
        .take(self.params.total_epochs)
    }

    /// Seed used for the permutation of `epoch` under a run's master seed.
    pub fn permutation_seed(master: u64, epoch: usize) -> u64 {
        seed::derive(master, seed::Stream::Permutation, epoch as u64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{Image, Sample};
    use proptest::prelude::*;

    fn labelled(labels: &[usize]) -> Dataset {
        let img = Image::new(1, 1, vec![0.0]).unwrap();
        Dataset::new(
            labels
                .iter()
                .enumerate()
                .map(|(i, &label)| Sample {
                    id: format!("s{i}"),
                    frontal: img.clone(),
                    lateral: img.clone(),
                    label,
                    score: None,
                })
                .collect(),
        )
        .unwrap()
    }

    /// Independent evaluation of the decay at epoch `e`, straight from the
    /// closed form rather than by iteration.
    fn closed_form(initial: &[f64], decay_horizon: usize, epoch: usize) -> Vec<f64> {
        let n = initial.len() as f64;
        if epoch > decay_horizon {
            return vec![1.0 / n; initial.len()];
        }
        let exponent = (epoch - 1) as f64 / decay_horizon as f64;
        let raw: Vec<f64> = initial.iter().map(|p| p * ((1.0 / n) / p).powf(exponent)).collect();
        let total: f64 = raw.iter().sum();
        raw.iter().map(|q| q / total).collect()
    }

    #[test]
    fn assigns_table_scores() {
        let ds = labelled(&[0, 1, 2]);
        let table = DifficultyScoreTable::elbow();
        assert_eq!(assign_scores(&ds, &table, ViewMode::Both).unwrap(), vec![45.0, 65.0, 55.0]);
        assert_eq!(
            assign_scores(&ds, &table, ViewMode::FrontalOnly).unwrap(),
            vec![30.0, 30.0, 30.0]
        );
        assert_eq!(
            assign_scores(&ds, &table, ViewMode::LateralOnly).unwrap(),
            vec![35.0, 60.0, 45.0]
        );
        assert!(assign_scores(&labelled(&[]), &table, ViewMode::Both).unwrap().is_empty());
    }

    #[test]
    fn missing_entry_names_pair() {
        let mut entries = BTreeMap::new();
        entries.insert((0, ViewMode::Both), 10.0);
        let table = DifficultyScoreTable::from_entries(entries).unwrap();
        let err = assign_scores(&labelled(&[0, 2]), &table, ViewMode::Both).unwrap_err();
        assert!(matches!(err, Error::MissingScore { class: 2, ref view_mode } if view_mode == "both"));
        assert!(table.require_complete().is_err());
    }

    #[test]
    fn per_sample_override_wins() {
        let mut ds = labelled(&[0, 1]).samples().to_vec();
        ds[1].score = Some(7.5);
        let ds = Dataset::new(ds).unwrap();
        let scores = assign_scores(&ds, &DifficultyScoreTable::elbow(), ViewMode::Both).unwrap();
        assert_eq!(scores, vec![45.0, 7.5]);
    }

    #[test]
    fn table_rejects_out_of_scale_scores() {
        assert!(DifficultyScoreTable::uniform(0.5).is_err());
        assert!(DifficultyScoreTable::uniform(101.0).is_err());
        assert!(DifficultyScoreTable::uniform(100.0).is_ok());
    }

    #[test]
    fn table_json_round_trip() {
        let table = DifficultyScoreTable::elbow();
        let json = serde_json::to_string(&table).unwrap();
        assert_eq!(json, r#"{"frontal":[30.0,30.0,30.0],"lateral":[35.0,60.0,45.0],"both":[45.0,65.0,55.0]}"#);
        let back: DifficultyScoreTable = serde_json::from_str(&json).unwrap();
        assert_eq!(back, table);
        assert!(serde_json::from_str::<DifficultyScoreTable>(r#"{"both":[1,2]}"#).is_err());
    }

    #[test]
    fn initial_probabilities() {
        let s = init_probabilities(&[45.0, 65.0, 55.0]).unwrap();
        let expected = [45.0 / 165.0, 65.0 / 165.0, 55.0 / 165.0];
        for (p, e) in s.probabilities().iter().zip(expected) {
            assert!((p - e).abs() < 1e-12);
        }
        assert!((s.probabilities()[0] - 0.27273).abs() < 1e-5);
        assert_eq!(s.epoch(), 1);
        let flat = init_probabilities(&[30.0; 3]).unwrap();
        assert!(flat.probabilities().iter().all(|p| (p - 1.0 / 3.0).abs() < 1e-15));
        assert_eq!(init_probabilities(&[17.0]).unwrap().probabilities(), &[1.0]);
    }

    #[test]
    fn initial_probabilities_errors() {
        assert!(matches!(init_probabilities(&[]), Err(Error::EmptyDataset)));
        assert!(matches!(
            init_probabilities(&[3.0, 0.0]),
            Err(Error::InvalidScore { index: 1, .. })
        ));
        assert!(matches!(
            init_probabilities(&[-1.0]),
            Err(Error::InvalidScore { index: 0, .. })
        ));
    }

    #[test]
    fn advance_two_samples() {
        // 0.75 * sqrt(0.5 / 0.75) and 0.25 * sqrt(0.5 / 0.25), renormalized.
        let initial = init_probabilities(&[3.0, 1.0]).unwrap();
        let params = CurriculumParams::new(2, 4).unwrap();
        let next = advance(&initial, &params, initial.probabilities());
        assert_eq!(next.epoch(), 2);
        let raw = [0.75 * (0.5f64 / 0.75).sqrt(), 0.25 * (0.5f64 / 0.25).sqrt()];
        assert!((raw[0] - 0.61237).abs() < 1e-5 && (raw[1] - 0.35355).abs() < 1e-5);
        let total = raw[0] + raw[1];
        assert!((next.probabilities()[0] - raw[0] / total).abs() < 1e-12);
        assert!((next.probabilities()[0] - 0.63397).abs() < 1e-5);
        assert!((next.probabilities()[1] - 0.36603).abs() < 1e-5);
    }

    #[test]
    fn uniform_after_horizon() {
        let params = CurriculumParams::new(3, 6).unwrap();
        let c = Curriculum::new(&[45.0, 65.0, 55.0, 10.0], params).unwrap();
        let all: Vec<_> = c.schedules().collect();
        assert_eq!(all.len(), 6);
        for s in &all[3..] {
            assert!(s.epoch() > 3);
            assert!(s.probabilities().iter().all(|&p| p == 0.25));
        }
    }

    #[test]
    fn uniform_stays_uniform() {
        let params = CurriculumParams::new(5, 8).unwrap();
        let c = Curriculum::new(&[30.0; 7], params).unwrap();
        for s in c.schedules() {
            let first = s.probabilities()[0];
            assert!(s.probabilities().iter().all(|&p| p == first));
            assert!((first - 1.0 / 7.0).abs() < 1e-15);
        }
    }

    #[test]
    fn iterated_matches_closed_form() {
        let initial = [45.0 / 165.0, 65.0 / 165.0, 55.0 / 165.0];
        let params = CurriculumParams::new(16, 32).unwrap();
        let c = Curriculum::new(&[45.0, 65.0, 55.0], params).unwrap();
        for s in c.schedules() {
            let oracle = closed_form(&initial, 16, s.epoch());
            for (p, q) in s.probabilities().iter().zip(&oracle) {
                assert!((p - q).abs() < 1e-12, "epoch {}: {p} vs {q}", s.epoch());
            }
        }
    }

    #[test]
    fn permutation_single_and_determinism() {
        let one = init_probabilities(&[5.0]).unwrap();
        assert_eq!(epoch_permutation(&one, 3), vec![0]);
        let s = init_probabilities(&[1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        assert_eq!(epoch_permutation(&s, 42), epoch_permutation(&s, 42));
    }

    #[test]
    fn uniform_first_position_chi_square() {
        let s = init_probabilities(&[1.0; 5]).unwrap();
        let draws = 100_000;
        let mut counts = [0usize; 5];
        for seed in 0..draws {
            counts[epoch_permutation(&s, seed as u64)[0]] += 1;
        }
        let expected = draws as f64 / 5.0;
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        // Upper 0.001 quantile of chi-square with 4 degrees of freedom.
        assert!(chi2 < 18.467, "chi2 = {chi2}, counts {counts:?}");
    }

    #[test]
    fn schedule_csv_rows() {
        let s = init_probabilities(&[1.0, 3.0]).unwrap();
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["epoch", "sample_id", "probability"]).unwrap();
        s.write_csv_rows(&["a".into(), "b".into()], &mut w).unwrap();
        let text = String::from_utf8(w.into_inner().unwrap()).unwrap();
        assert_eq!(text, "epoch,sample_id,probability\n1,a,2.5e-1\n1,b,7.5e-1\n");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]

        #[test]
        fn schedules_are_valid_distributions(
            scores in prop::collection::vec(1.0f64..100.0, 1..50),
            horizon in 1usize..32,
        ) {
            let params = CurriculumParams::new(horizon, horizon + 4).unwrap();
            let c = Curriculum::new(&scores, params).unwrap();
            for s in c.schedules() {
                prop_assert!(s.probabilities().iter().all(|&p| p > 0.0));
                prop_assert!((s.probabilities().iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }

        #[test]
        fn permutation_is_bijection(weights in prop::collection::vec(1.0f64..100.0, 1..60), seed in any::<u64>()) {
            let s = init_probabilities(&weights).unwrap();
            let mut perm = epoch_permutation(&s, seed);
            perm.sort_unstable();
            prop_assert_eq!(perm, (0..weights.len()).collect::<Vec<_>>());
        }
    }
}
