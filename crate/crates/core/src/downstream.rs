//! Classification fine-tuning on top of the PartA encoder and the few-shot
//! episode protocol.

use std::sync::Arc;

use gpm_nn::{AdamW, Graph, ParamStore, Var};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{rotate_randomly, Dataset};
use crate::dvae::DvaeModel;
use crate::error::{invalid, GpmError, Result};
use crate::geometry::PointCloud;
use crate::layers::{Bind, Init, Linear};
use crate::model::{GpmInput, GpmModel};
use crate::training::{batch_indices, stream_rng, OptimConfig, EVAL_PATCH_SEED};

pub const HEAD_HIDDEN: usize = 256;
pub const HEAD_DROPOUT: f64 = 0.5;

/// Two-layer classifier over `[CLS] ++ max_i(patch_i)`.
#[derive(Clone, Debug)]
pub struct ClassifierHead {
    pub fc1: Linear,
    pub fc2: Linear,
    pub classes: usize,
}

impl ClassifierHead {
    pub fn new(
        store: &mut ParamStore<f32>,
        dim: usize,
        classes: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if classes == 0 {
            return Err(invalid("classifier needs at least one class"));
        }
        Ok(Self {
            fc1: Linear::new(store, "head.fc1", 2 * dim, HEAD_HIDDEN, Init::FanIn, rng)?,
            fc2: Linear::new(store, "head.fc2", HEAD_HIDDEN, classes, Init::FanIn, rng)?,
            classes,
        })
    }

    pub fn forward(&self, g: &mut Graph<f32>, b: &Bind<f32>, feat: Var) -> Result<Var> {
        let h = self.fc1.forward(g, b, feat)?;
        let h = g.gelu(h)?;
        let h = g.dropout(h, HEAD_DROPOUT)?;
        self.fc2.forward(g, b, h)
    }
}

/// A cloud ready for classification: frozen patch embeddings and centers.
#[derive(Clone, Debug)]
pub struct Encoded {
    pub input: GpmInput<f32>,
    pub label: usize,
}

/// Embeds every labeled cloud with the frozen dVAE encoder.
pub fn encode_dataset(dvae: &DvaeModel, data: &Dataset, patch_seed: u64) -> Result<Vec<Encoded>> {
    use rayon::prelude::*;
    let classes = data.num_classes();
    data.items()
        .par_iter()
        .map(|item| {
            let label = item
                .label
                .ok_or_else(|| GpmError::Data(format!("item {} has no label", item.id)))?;
            if label >= classes {
                return Err(GpmError::Data(format!(
                    "item {} label {label} outside {classes} classes",
                    item.id
                )));
            }
            Ok(Encoded { input: encode_cloud(dvae, &item.cloud, patch_seed)?, label })
        })
        .collect()
}

/// Unmasked transformer input of one cloud.
pub fn encode_cloud(dvae: &DvaeModel, cloud: &PointCloud, patch_seed: u64) -> Result<GpmInput<f32>> {
    let patches = dvae.patches(cloud, patch_seed)?;
    let embeddings = dvae.embeddings(&patches)?;
    let m = patches.centers.len();
    GpmInput::new(embeddings, patches.centers, vec![0; m], Vec::new())
}

/// Pretrained backbone plus a classification head, each with its own store.
#[derive(Clone, Debug)]
pub struct Classifier {
    pub backbone: GpmModel,
    pub head: ClassifierHead,
    pub head_params: ParamStore<f32>,
}

impl Classifier {
    pub fn new(backbone: &GpmModel, classes: usize, seed: u64) -> Result<Self> {
        let mut head_params = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let head = ClassifierHead::new(&mut head_params, backbone.config().dim, classes, &mut rng)?;
        Ok(Self {
            backbone: backbone.clone(),
            head,
            head_params,
        })
    }

    /// Class logits `[b, C]`. Only PartA is run.
    pub fn logits(
        &self,
        g: &mut Graph<f32>,
        train_backbone: bool,
        items: &[&Encoded],
    ) -> Result<Var> {
        let inputs: Vec<GpmInput<f32>> = items.iter().map(|e| e.input.clone()).collect();
        let bb = Bind {
            store: &self.backbone.params,
            trainable: train_backbone,
        };
        let hidden = self.backbone.arch.encode_part_a(g, &bb, &inputs)?;
        let m = inputs[0].groups();
        let cls_rows: Vec<usize> = (0..items.len()).map(|i| i * (m + 1)).collect();
        let patch_rows: Vec<usize> = (0..items.len())
            .flat_map(|i| (1..=m).map(move |s| i * (m + 1) + s))
            .collect();
        let cls = g.gather_rows(hidden, Arc::new(cls_rows))?;
        let patches = g.gather_rows(hidden, Arc::new(patch_rows))?;
        let pooled = g.segment_max(patches, m)?;
        let feat = g.concat_cols(&[cls, pooled])?;
        self.head
            .forward(g, &Bind::trainable(&self.head_params), feat)
    }

    /// Predicted class per item, eval mode.
    pub fn predict(&self, items: &[Encoded]) -> Result<Vec<usize>> {
        let mut out = Vec::with_capacity(items.len());
        for chunk in items.chunks(32) {
            let mut g = Graph::eval();
            let refs: Vec<&Encoded> = chunk.iter().collect();
            let logits = self.logits(&mut g, false, &refs)?;
            out.extend(g.value(logits).argmax_rows());
        }
        Ok(out)
    }

    pub fn accuracy(&self, items: &[Encoded]) -> Result<f64> {
        if items.is_empty() {
            return Err(GpmError::Data("accuracy of an empty set".into()));
        }
        let pred = self.predict(items)?;
        let hits = pred
            .iter()
            .zip(items)
            .filter(|(p, e)| **p == e.label)
            .count();
        Ok(hits as f64 / items.len() as f64)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassifyConfig {
    pub optim: OptimConfig,
    /// Keep the backbone fixed and train the head only.
    pub freeze_backbone: bool,
    pub patch_seed: u64,
    /// Randomly rotated copies of every support item added by
    /// [`few_shot_eval`]; plain fine-tuning ignores it.
    pub rotation_copies: usize,
}

impl Default for ClassifyConfig {
    fn default() -> Self {
        Self {
            optim: OptimConfig::desk(1000, 32),
            freeze_backbone: false,
            patch_seed: EVAL_PATCH_SEED,
            rotation_copies: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ClassifyRun {
    pub classifier: Classifier,
    pub losses: Vec<f64>,
    pub train_accuracy: f64,
    pub test_accuracy: Option<f64>,
}

/// Fine-tunes a copy of the backbone together with a fresh head.
pub fn finetune_classifier(
    backbone: &GpmModel,
    train: &[Encoded],
    test: Option<&[Encoded]>,
    classes: usize,
    cfg: &ClassifyConfig,
    seed: u64,
) -> Result<ClassifyRun> {
    cfg.optim.validate("classify")?;
    if train.is_empty() {
        return Err(GpmError::Data("classifier training set is empty".into()));
    }
    if let Some(bad) = train
        .iter()
        .chain(test.unwrap_or(&[]))
        .find(|e| e.label >= classes)
    {
        return Err(GpmError::Data(format!(
            "label {} outside {classes} classes",
            bad.label
        )));
    }
    let mut clf = Classifier::new(backbone, classes, seed)?;
    let mut head_opt = AdamW::new(cfg.optim.adamw(), &clf.head_params);
    let mut body_opt = AdamW::new(cfg.optim.adamw(), &clf.backbone.params);
    let mut losses = Vec::with_capacity(cfg.optim.steps as usize);
    let train_body = !cfg.freeze_backbone;
    for step in 0..cfg.optim.steps {
        let idx = batch_indices(train.len(), cfg.optim.batch_size, seed, step);
        let items: Vec<&Encoded> = idx.iter().map(|i| &train[*i]).collect();
        let labels: Vec<usize> = items.iter().map(|e| e.label).collect();
        let mut g = Graph::<f32>::new(true, stream_rng(seed ^ 0xc1a5, step).random());
        let logits = clf.logits(&mut g, train_body, &items)?;
        let loss = g.cross_entropy(logits, &labels)?;
        losses.push(g.value(loss).item() as f64);
        let grads = g.backward(loss)?;
        let lr = cfg.optim.lr_at(step);
        let mut hg = grads.for_store(&clf.head_params);
        if train_body {
            let mut bg = grads.for_store(&clf.backbone.params);
            let norm = (hg.global_norm().powi(2) + bg.global_norm().powi(2)).sqrt();
            if norm > cfg.optim.clip_norm {
                let s = cfg.optim.clip_norm / norm;
                hg.scale(s as f32);
                bg.scale(s as f32);
            }
            body_opt.step(&mut clf.backbone.params, &bg, lr)?;
        } else {
            hg.clip_global_norm(cfg.optim.clip_norm);
        }
        head_opt.step(&mut clf.head_params, &hg, lr)?;
    }
    let train_accuracy = clf.accuracy(train)?;
    let test_accuracy = test.map(|t| clf.accuracy(t)).transpose()?;
    Ok(ClassifyRun {
        classifier: clf,
        losses,
        train_accuracy,
        test_accuracy,
    })
}

/// Mean accuracy of `heads` randomly initialized heads on an untouched
/// backbone: the chance-level reference.
pub fn untrained_baseline(
    backbone: &GpmModel,
    items: &[Encoded],
    classes: usize,
    heads: usize,
    seed: u64,
) -> Result<f64> {
    if heads == 0 {
        return Err(invalid("baseline needs at least one head"));
    }
    let mut total = 0.0;
    for h in 0..heads {
        let clf = Classifier::new(backbone, classes, stream_rng(seed, h as u64).random())?;
        total += clf.accuracy(items)?;
    }
    Ok(total / heads as f64)
}

pub const QUERY_PER_CLASS: usize = 20;

/// One few-shot episode, as indices into the dataset. Labels are
/// re-indexed to positions in `classes`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Episode {
    pub classes: Vec<usize>,
    pub support: Vec<(usize, usize)>,
    pub query: Vec<(usize, usize)>,
}

/// Picks `way` classes, then `shot + 20` items per class without
/// replacement: the first `shot` become support, the rest query.
pub fn few_shot_episode(data: &Dataset, way: usize, shot: usize, seed: u64) -> Result<Episode> {
    if way == 0 || shot == 0 {
        return Err(invalid(format!(
            "few-shot needs way and shot >= 1, got {way}-way {shot}-shot"
        )));
    }
    let by_class = data.indices_by_class();
    if by_class.len() < way {
        return Err(GpmError::Data(format!(
            "{way}-way episode but the dataset has {} classes",
            by_class.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut classes = index::sample(&mut rng, by_class.len(), way).into_vec();
    classes.sort_unstable();
    let need = shot + QUERY_PER_CLASS;
    let mut support = Vec::with_capacity(way * shot);
    let mut query = Vec::with_capacity(way * QUERY_PER_CLASS);
    for (new_label, &c) in classes.iter().enumerate() {
        let pool = &by_class[c];
        if pool.len() < need {
            return Err(GpmError::Data(format!(
                "class '{}' has {} items, {need} needed for {shot}-shot",
                data.class_names()
                    .map_or_else(|| c.to_string(), |n| n[c].clone()),
                pool.len()
            )));
        }
        let picked = index::sample(&mut rng, pool.len(), need).into_vec();
        for (t, p) in picked.iter().enumerate() {
            let entry = (pool[*p], new_label);
            if t < shot {
                support.push(entry);
            } else {
                query.push(entry);
            }
        }
    }
    Ok(Episode {
        classes,
        support,
        query,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct FewShotReport {
    pub way: usize,
    pub shot: usize,
    pub accuracies: Vec<f64>,
    pub mean: f64,
    /// Sample standard deviation; zero for a single run.
    pub std: f64,
}

pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// `runs` episodes, each fine-tuned from the same pretrained weights on its
/// support set and scored on its query set.
#[allow(clippy::too_many_arguments)]
pub fn few_shot_eval(
    backbone: &GpmModel,
    dvae: &DvaeModel,
    data: &Dataset,
    way: usize,
    shot: usize,
    runs: usize,
    cfg: &ClassifyConfig,
    seed: u64,
) -> Result<FewShotReport> {
    if runs == 0 {
        return Err(invalid("few-shot evaluation needs at least one run"));
    }
    let encoded = encode_dataset(dvae, data, cfg.patch_seed)?;
    let mut accuracies = Vec::with_capacity(runs);
    for r in 0..runs {
        let run_seed = stream_rng(seed, r as u64).random::<u64>();
        let ep = few_shot_episode(data, way, shot, run_seed)?;
        let pick = |set: &[(usize, usize)]| -> Vec<Encoded> {
            set.iter()
                .map(|(i, l)| Encoded {
                    input: encoded[*i].input.clone(),
                    label: *l,
                })
                .collect()
        };
        let (mut support, query) = (pick(&ep.support), pick(&ep.query));
        let mut rng = stream_rng(run_seed, 0x726f_74);
        for (i, l) in &ep.support {
            for _ in 0..cfg.rotation_copies {
                let cloud = rotate_randomly(&data.items()[*i].cloud, &mut rng);
                let input = encode_cloud(dvae, &cloud, cfg.patch_seed)?;
                support.push(Encoded { input, label: *l });
            }
        }
        let run = finetune_classifier(backbone, &support, Some(&query), way, cfg, run_seed)?;
        accuracies.push(run.test_accuracy.expect("query set given"));
    }
    let (mean, std) = mean_std(&accuracies);
    Ok(FewShotReport {
        way,
        shot,
        accuracies,
        mean,
        std,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn std_of_one_run_is_zero() {
        assert_eq!(mean_std(&[0.7]), (0.7, 0.0));
        let (m, s) = mean_std(&[1.0, 2.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s - 1.0).abs() < 1e-15);
    }
}
