use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;

use super::Dataset;
use crate::error::{Error, Result};
use crate::seed::{self, Stream};
use crate::N_CLASSES;

/// Fold roles for one cross-validation split.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitRoles {
    pub test: usize,
    pub validation: usize,
    pub training: Vec<usize>,
}

/// Stratified assignment of samples to `k` folds, plus the role each fold
/// plays in each of the `k` splits.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldPlan {
    k: usize,
    ids: Vec<String>,
    assignments: Vec<usize>,
    splits: Vec<SplitRoles>,
}

/// Sample indices of one split, each in dataset order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitIndices {
    pub training: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
}

/// Shuffles each class, then deals its members round-robin over the folds.
/// The dealing position carries over between classes so that the folds
/// receiving a class's remainder rotate, which keeps total fold sizes
/// within one of each other as well.
pub fn stratified_kfold(dataset: &Dataset, k: usize, seed: u64) -> Result<FoldPlan> {
    if k < 3 {
        return Err(Error::Config(format!(
            "{k} folds cannot provide separate test, validation and training folds"
        )));
    }
    for (class, &count) in dataset.class_counts().iter().enumerate() {
        if count > 0 && count < k {
            return Err(Error::InfeasibleStratification { class, count, folds: k });
        }
    }

    let labels = dataset.labels();
    let mut assignments = vec![0; labels.len()];
    let mut rng = seed::rng(seed, Stream::Folds, 0);
    let mut cursor = 0;
    for class in 0..N_CLASSES {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        members.shuffle(&mut rng);
        for idx in members {
            assignments[idx] = cursor % k;
            cursor += 1;
        }
    }

    let mut role_rng = seed::rng(seed, Stream::ValidationFold, 0);
    let splits = (0..k)
        .map(|test| {
            let offset = role_rng.random_range(1..k);
            let validation = (test + offset) % k;
            let training = (0..k).filter(|&f| f != test && f != validation).collect();
            SplitRoles {
                test,
                validation,
                training,
            }
        })
        .collect();

    Ok(FoldPlan {
        k,
        ids: dataset.samples().iter().map(|s| s.id.clone()).collect(),
        assignments,
        splits,
    })
}

impl FoldPlan {
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn assignments(&self) -> &[usize] {
        &self.assignments
    }

    pub fn splits(&self) -> &[SplitRoles] {
        &self.splits
    }

    pub fn fold_members(&self, fold: usize) -> Vec<usize> {
        (0..self.assignments.len())
            .filter(|&i| self.assignments[i] == fold)
            .collect()
    }

    pub fn split_indices(&self, split: usize) -> SplitIndices {
        let roles = &self.splits[split];
        let mut out = SplitIndices {
            training: Vec::new(),
            validation: Vec::new(),
            test: Vec::new(),
        };
        for (i, &fold) in self.assignments.iter().enumerate() {
            if fold == roles.test {
                out.test.push(i);
            } else if fold == roles.validation {
                out.validation.push(i);
            } else {
                out.training.push(i);
            }
        }
        out
    }

    /// Per-fold class counts, `counts[fold][class]`.
    pub fn class_counts(&self, labels: &[usize]) -> Vec<[usize; N_CLASSES]> {
        let mut counts = vec![[0; N_CLASSES]; self.k];
        for (&fold, &label) in self.assignments.iter().zip(labels) {
            counts[fold][label] += 1;
        }
        counts
    }

    /// Writes `id,fold`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["id", "fold"])?;
        for (id, fold) in self.ids.iter().zip(&self.assignments) {
            w.write_record([id.as_str(), &fold.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Writes `split,test_fold,validation_fold`.
    pub fn write_roles_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["split", "test_fold", "validation_fold"])?;
        for (i, r) in self.splits.iter().enumerate() {
            w.write_record([i.to_string(), r.test.to_string(), r.validation.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{Image, Sample};
    use proptest::prelude::*;

    pub(crate) fn dataset_with_counts(counts: &[usize]) -> Dataset {
        let img = Image::new(1, 1, vec![0.0]).unwrap();
        let mut samples = Vec::new();
        for (label, &n) in counts.iter().enumerate() {
            for j in 0..n {
                samples.push(Sample {
                    id: format!("c{label}-{j}"),
                    frontal: img.clone(),
                    lateral: img.clone(),
                    label,
                    score: None,
                });
            }
        }
        Dataset::new(samples).unwrap()
    }

    fn check_plan(ds: &Dataset, plan: &FoldPlan) {
        let k = plan.k();
        let counts = plan.class_counts(&ds.labels());
        let totals = ds.class_counts();
        for class in 0..N_CLASSES {
            let lo = totals[class] / k;
            let hi = totals[class].div_ceil(k);
            for fold in &counts {
                assert!(fold[class] >= lo && fold[class] <= hi, "class {class}: {:?}", counts);
            }
        }
        let covered: usize = (0..k).map(|f| plan.fold_members(f).len()).sum();
        assert_eq!(covered, ds.len());
        for split in 0..k {
            let roles = &plan.splits()[split];
            assert_ne!(roles.test, roles.validation);
            assert_eq!(roles.training.len(), k - 2);
            let s = plan.split_indices(split);
            assert_eq!(s.training.len() + s.validation.len() + s.test.len(), ds.len());
        }
    }

    #[test]
    fn clinical_class_counts_eight_folds() {
        let ds = dataset_with_counts(&[500, 98, 384]);
        let plan = stratified_kfold(&ds, 8, 0).unwrap();
        for fold in plan.class_counts(&ds.labels()) {
            assert!(fold[0] == 62 || fold[0] == 63);
            assert!(fold[1] == 12 || fold[1] == 13);
            assert_eq!(fold[2], 48);
        }
        check_plan(&ds, &plan);
    }

    #[test]
    fn one_sample_per_fold() {
        let ds = dataset_with_counts(&[5]);
        let plan = stratified_kfold(&ds, 5, 3).unwrap();
        for f in 0..5 {
            assert_eq!(plan.fold_members(f).len(), 1);
        }
    }

    #[test]
    fn balanced_classes_split_exactly() {
        let ds = dataset_with_counts(&[9, 9, 9]);
        for seed in 0..20 {
            let plan = stratified_kfold(&ds, 3, seed).unwrap();
            for fold in plan.class_counts(&ds.labels()) {
                assert_eq!(fold, [3, 3, 3]);
            }
        }
    }

    #[test]
    fn too_few_members_is_infeasible() {
        let ds = dataset_with_counts(&[10, 2, 10]);
        let err = stratified_kfold(&ds, 3, 0).unwrap_err();
        assert!(matches!(err, Error::InfeasibleStratification { class: 1, count: 2, folds: 3 }));
        assert!(matches!(stratified_kfold(&ds, 2, 0), Err(Error::Config(_))));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn stratification_bound_holds(a in 0usize..60, b in 0usize..60, c in 0usize..60, k in 3usize..9, seed in any::<u64>()) {
            let counts: Vec<usize> = [a, b, c].iter().map(|&n| if n == 0 { 0 } else { n + k }).collect();
            prop_assume!(counts.iter().sum::<usize>() > 0);
            let ds = dataset_with_counts(&counts);
            let plan = stratified_kfold(&ds, k, seed).unwrap();
            check_plan(&ds, &plan);
            prop_assert_eq!(plan, stratified_kfold(&ds, k, seed).unwrap());
        }
    }
}
