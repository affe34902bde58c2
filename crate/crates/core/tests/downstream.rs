use std::collections::BTreeSet;

use gpm_core::data::{synth_dataset, Dataset, ShapeFamily, SyntheticShapeSpec};
use gpm_core::downstream::{
    encode_dataset, few_shot_episode, finetune_classifier, mean_std, untrained_baseline, ClassifyConfig, QUERY_PER_CLASS,
};
use gpm_core::dvae::{DvaeConfig, DvaeModel};
use gpm_core::model::{GpmConfig, GpmModel};
use gpm_core::training::OptimConfig;
use gpm_core::GpmError;
use proptest::prelude::*;

fn dataset(classes: usize, per_class: usize, points: usize) -> Dataset {
    let specs: Vec<_> = (0..classes).map(|c| SyntheticShapeSpec::new(ShapeFamily::ALL[c % 6], points, c as u64)).collect();
    synth_dataset(&specs, per_class).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn episodes_are_balanced_and_disjoint(way in 1usize..5, shot in 1usize..6, seed in any::<u64>()) {
        let data = dataset(5, shot + QUERY_PER_CLASS + 2, 8);
        let ep = few_shot_episode(&data, way, shot, seed).unwrap();
        prop_assert_eq!(ep.classes.len(), way);
        prop_assert_eq!(ep.support.len(), way * shot);
        prop_assert_eq!(ep.query.len(), way * QUERY_PER_CLASS);
        let s: BTreeSet<usize> = ep.support.iter().map(|p| p.0).collect();
        let q: BTreeSet<usize> = ep.query.iter().map(|p| p.0).collect();
        prop_assert!(s.is_disjoint(&q));
        prop_assert_eq!(s.len() + q.len(), way * (shot + QUERY_PER_CLASS));
        for (i, l) in ep.support.iter().chain(&ep.query) {
            prop_assert_eq!(data.items()[*i].label, Some(ep.classes[*l]));
        }
        prop_assert_eq!(few_shot_episode(&data, way, shot, seed).unwrap(), ep);
    }
}

#[test]
fn short_classes_are_reported() {
    let data = dataset(3, 10, 8);
    assert!(matches!(few_shot_episode(&data, 2, 1, 0), Err(GpmError::Data(_))));
    assert!(matches!(few_shot_episode(&dataset(2, 30, 8), 3, 1, 0), Err(GpmError::Data(_))));
    assert!(few_shot_episode(&data, 0, 1, 0).is_err());
}

#[test]
fn sample_std_matches_hand_values() {
    let (m, s) = mean_std(&[0.8, 0.9, 1.0]);
    assert!((m - 0.9).abs() < 1e-12);
    assert!((s - 0.1).abs() < 1e-12);
}

fn models() -> (DvaeModel, GpmModel) {
    let d = DvaeConfig {
        vocab: 8,
        code_dim: 8,
        hidden: 8,
        groups: 4,
        group_size: 8,
        graph_k: 2,
        edge_width: 8,
        edge_depth: 1,
        decoder_width: 8,
        fold_hidden: 8,
        ..DvaeConfig::default()
    };
    let mut dvae = DvaeModel::new(d, 0).unwrap();
    dvae.mark_ready();
    let g = GpmConfig { dim: 16, depth: 1, heads: 2, input_dim: 8, vocab: 8, groups: 4, ..GpmConfig::default() };
    (dvae, GpmModel::new(g, 1).unwrap())
}

#[test]
fn fine_tuning_fits_a_small_training_set() {
    let (dvae, gpm) = models();
    let data = dataset(2, 6, 64);
    let enc = encode_dataset(&dvae, &data, 0).unwrap();
    assert_eq!(enc.len(), 12);
    assert!(enc.iter().all(|e| e.input.mask_set.is_empty()));
    let cfg = ClassifyConfig { optim: OptimConfig { base_lr: 1e-3, ..OptimConfig::desk(60, 12) }, ..ClassifyConfig::default() };
    let run = finetune_classifier(&gpm, &enc, Some(&enc), 2, &cfg, 3).unwrap();
    assert_eq!(run.losses.len(), 60);
    assert!(run.losses[59] < run.losses[0]);
    assert!(run.train_accuracy >= 0.9, "{}", run.train_accuracy);
    assert_eq!(run.test_accuracy, Some(run.train_accuracy));
    assert_ne!(run.classifier.backbone.params.checksum(), gpm.params.checksum());
    let frozen = ClassifyConfig { freeze_backbone: true, optim: OptimConfig::desk(3, 4), ..ClassifyConfig::default() };
    let run = finetune_classifier(&gpm, &enc, None, 2, &frozen, 3).unwrap();
    assert_eq!(run.classifier.backbone.params.checksum(), gpm.params.checksum());
    assert!(matches!(finetune_classifier(&gpm, &enc, None, 1, &frozen, 3), Err(GpmError::Data(_))));
}

#[test]
fn baseline_is_an_average_accuracy() {
    let (dvae, gpm) = models();
    let enc = encode_dataset(&dvae, &dataset(3, 4, 64), 0).unwrap();
    let b = untrained_baseline(&gpm, &enc, 3, 5, 0).unwrap();
    assert!((0.0..=1.0).contains(&b));
    assert_eq!(b, untrained_baseline(&gpm, &enc, 3, 5, 0).unwrap());
}
