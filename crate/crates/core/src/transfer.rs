//! Single-view pretraining and weight transfer into the multiview model.
//!
//! A [`SingleViewModel`] for view `v` names its tensors `v.features.*` and
//! `v.classifier.*`, the same names the matching branch carries inside a
//! [`MultiviewModel`]. Transfer copies by name; the merge branch is left
//! alone.

use std::collections::HashMap;

use crate::curriculum::DifficultyScoreTable;
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::model::{ArchitectureSpec, MultiviewModel, Parameters, SingleViewModel};
use crate::seed::{self, Stream};
use crate::training::{self, TrainConfig, TrainOutcome};
use crate::view::View;

/// Trains a standalone branch for `view`. With the curriculum on, scores
/// come from the table row for that view alone. Initialization is drawn
/// from `config.seed`.
pub fn pretrain_single_view(
    view: View,
    spec: &ArchitectureSpec,
    train: &Dataset,
    validation: &Dataset,
    config: &TrainConfig,
    table: &DifficultyScoreTable,
) -> Result<TrainOutcome<SingleViewModel>> {
    let model = SingleViewModel::new(spec.clone(), view, &mut seed::rng(config.seed, Stream::Init, 0))?;
    let scores = training::training_scores(train, config, table, view.mode())?;
    training::train(model, train, validation, config, &scores)
}

fn layer_of(tensor: &str) -> &str {
    tensor.rsplit_once('.').map_or(tensor, |(layer, _)| layer)
}

/// Copies the frontal and lateral branch weights from the two pretrained
/// models into a copy of `target`. Every tensor is checked before anything
/// is written, so a mismatch leaves no partial result.
pub fn transfer_weights(target: &MultiviewModel, frontal: &SingleViewModel, lateral: &SingleViewModel) -> Result<MultiviewModel> {
    for (source, expected) in [(frontal, View::Frontal), (lateral, View::Lateral)] {
        if source.view() != expected {
            return Err(Error::Config(format!(
                "expected a {expected} source model, got a {} one",
                source.view()
            )));
        }
    }
    let mut sources: HashMap<String, (Vec<usize>, Vec<f64>)> = HashMap::new();
    for source in [frontal, lateral] {
        for (name, shape, values) in source.named_tensors() {
            sources.insert(name, (shape, values));
        }
    }

    // Pass 1: every frontal/lateral tensor of the target needs a source of
    // the same shape, and every source tensor needs a home.
    let mut seen = 0;
    let mut problem: Option<Error> = None;
    target.visit(&mut |name, shape, _| {
        if problem.is_some() || name.starts_with("merge.") {
            return;
        }
        match sources.get(name) {
            Some((s, _)) if s == shape => seen += 1,
            Some((s, _)) => {
                problem = Some(Error::Transfer {
                    layer: layer_of(name).to_string(),
                    expected: shape.to_vec(),
                    actual: s.clone(),
                })
            }
            None => {
                problem = Some(Error::Transfer {
                    layer: layer_of(name).to_string(),
                    expected: shape.to_vec(),
                    actual: vec![],
                })
            }
        }
    });
    if let Some(e) = problem {
        return Err(e);
    }
    if seen != sources.len() {
        let mut target_names = std::collections::HashSet::new();
        target.visit(&mut |name, _, _| {
            target_names.insert(name.to_string());
        });
        let mut extra: Vec<&String> = sources.keys().filter(|n| !target_names.contains(*n)).collect();
        extra.sort();
        let (shape, _) = &sources[extra[0]];
        return Err(Error::Transfer {
            layer: layer_of(extra[0]).to_string(),
            expected: vec![],
            actual: shape.clone(),
        });
    }

    // Pass 2: copy.
    let mut out = target.clone();
    out.visit_mut(&mut |name, _, values| {
        if let Some((_, src)) = sources.get(name) {
            values.copy_from_slice(src);
        }
    });
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Image;
    use crate::model::{BackboneSpec, Stage};
    use crate::view::SourceBranch;
    use crate::dataset::Sample;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn spec(head: usize) -> ArchitectureSpec {
        ArchitectureSpec {
            image_height: 8,
            image_width: 8,
            backbone: BackboneSpec {
                stages: vec![Stage { out_channels: 2, n_convs: 1 }, Stage { out_channels: 3, n_convs: 1 }],
                classifier: vec![head, 3],
            },
            merge_convs: vec![4],
            merge_classifier: vec![3],
            input_norm: Default::default(),
        }
    }

    fn random_image(rng: &mut ChaCha8Rng) -> Image {
        Image::new(8, 8, (0..64).map(|_| rng.random::<f64>()).collect()).unwrap()
    }

    fn models(seed: u64) -> (MultiviewModel, SingleViewModel, SingleViewModel) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (
            MultiviewModel::new(spec(5), &mut rng).unwrap(),
            SingleViewModel::new(spec(5), View::Frontal, &mut rng).unwrap(),
            SingleViewModel::new(spec(5), View::Lateral, &mut rng).unwrap(),
        )
    }

    #[test]
    fn transferred_branches_reproduce_pretrained_logits() {
        let (mv, f, l) = models(1);
        let out = transfer_weights(&mv, &f, &l).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let (a, b) = (random_image(&mut rng), random_image(&mut rng));
            let logits = out.forward(Some(&a), Some(&b)).unwrap();
            assert_eq!(logits.frontal.unwrap(), f.forward(&a).unwrap());
            assert_eq!(logits.lateral.unwrap(), l.forward(&b).unwrap());
        }
        assert_eq!(out.branch(SourceBranch::Merge), mv.branch(SourceBranch::Merge));
    }

    #[test]
    fn transfer_is_idempotent() {
        let (mv, f, l) = models(3);
        let once = transfer_weights(&mv, &f, &l).unwrap();
        assert_eq!(transfer_weights(&once, &f, &l).unwrap(), once);
    }

    #[test]
    fn width_mismatch_names_the_layer_and_writes_nothing() {
        let (mv, _, l) = models(4);
        let narrow = SingleViewModel::new(spec(7), View::Frontal, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let err = transfer_weights(&mv, &narrow, &l).unwrap_err();
        match &err {
            Error::Transfer { layer, .. } => assert_eq!(layer, "frontal.classifier.0"),
            other => panic!("unexpected {other}"),
        }
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn swapped_sources_are_rejected() {
        let (mv, f, l) = models(6);
        assert!(matches!(transfer_weights(&mv, &l, &f), Err(Error::Config(_))));
    }

    #[test]
    fn transferred_weights_keep_training() {
        let (mv, f, l) = models(7);
        let out = transfer_weights(&mv, &f, &l).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let samples: Vec<Sample> = (0..3)
            .map(|c| Sample {
                id: format!("s{c}"),
                frontal: random_image(&mut rng),
                lateral: random_image(&mut rng),
                label: c,
                score: None,
            })
            .collect();
        let ds = Dataset::new(samples).unwrap();
        let config = TrainConfig {
            batch_size: 3,
            decay_horizon: 1,
            total_epochs: 1,
            ..TrainConfig::default()
        };
        let trained = training::train(out.clone(), &ds, &Dataset::default(), &config, &[1.0; 3]).unwrap();
        let before = out.named_tensors();
        let after = trained.last.named_tensors();
        let changed = |prefix: &str| {
            before
                .iter()
                .zip(&after)
                .filter(|((n, _, _), _)| n.starts_with(prefix))
                .any(|((_, _, a), (_, _, b))| a != b)
        };
        assert!(changed("frontal.") && changed("lateral.") && changed("merge."));
    }
}
