//! Schedules, training loops, checkpoints and logs.
//!
//! Every random draw of step `t` comes from generators seeded by the run
//! seeds and `t` alone, so a run resumed from a checkpoint follows the same
//! trajectory as an uninterrupted one.

use std::fs::{self, File, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use gpm_nn::{
    checkpoint, cosine_schedule, AdamW, AdamWConfig, Graph, OptimizerState, ParamStore, Tensor,
};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::data::Dataset;
use crate::dvae::{
    kl_aggregate_to_uniform_graph, kl_to_uniform_graph, DvaeModel, PatchBatch, QuantizeMode,
};
use crate::error::{invalid, io_err, GpmError, Result};
use crate::geometry::{build_patches, chamfer_l1, PatchSet, PointCloud};
use crate::layers::Bind;
use crate::model::{select_mask_region, GpmInput, GpmModel};

/// KL weight: zero for `flat_steps`, then a linear ramp to `final_weight`
/// over `ramp_steps`.
#[derive(Clone, Debug, PartialEq)]
pub struct KlSchedule {
    pub flat_steps: u64,
    pub ramp_steps: u64,
    pub final_weight: f64,
}

pub fn kl_weight_at(step: u64, s: &KlSchedule) -> f64 {
    if step < s.flat_steps {
        0.0
    } else if s.ramp_steps == 0 || step >= s.flat_steps + s.ramp_steps {
        s.final_weight
    } else {
        s.final_weight * (step - s.flat_steps) as f64 / s.ramp_steps as f64
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum DecayShape {
    #[default]
    Linear,
    Cosine,
}

impl FromStr for DecayShape {
    type Err = GpmError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(Self::Linear),
            "cosine" => Ok(Self::Cosine),
            _ => Err(invalid(format!(
                "unknown decay shape `{s}` (linear|cosine)"
            ))),
        }
    }
}

/// Gumbel-softmax temperature decaying from `start` to `end` over
/// `decay_steps`, constant afterwards.
#[derive(Clone, Debug, PartialEq)]
pub struct TemperatureSchedule {
    pub start: f64,
    pub end: f64,
    pub decay_steps: u64,
    pub shape: DecayShape,
}

pub fn temperature_at(step: u64, s: &TemperatureSchedule) -> f64 {
    if s.decay_steps == 0 || step >= s.decay_steps {
        return s.end;
    }
    let t = step as f64 / s.decay_steps as f64;
    match s.shape {
        DecayShape::Linear => s.start + (s.end - s.start) * t,
        DecayShape::Cosine => {
            s.end + 0.5 * (s.start - s.end) * (1.0 + (std::f64::consts::PI * t).cos())
        }
    }
}

/// Optimization settings shared by every training loop.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub base_lr: f64,
    pub min_lr: f64,
    /// Length of the cosine decay; the rate stays at `min_lr` afterwards.
    pub lr_span: u64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    /// Checkpoint cadence in steps; zero writes only the final checkpoint.
    pub checkpoint_every: u64,
}

impl OptimConfig {
    pub fn desk(steps: u64, batch_size: usize) -> Self {
        Self {
            steps,
            batch_size,
            base_lr: 5e-4,
            min_lr: 1e-6,
            lr_span: steps,
            weight_decay: 0.05,
            clip_norm: 10.0,
            checkpoint_every: 0,
        }
    }

    pub fn lr_at(&self, step: u64) -> f64 {
        let span = self.lr_span.max(1);
        cosine_schedule(step.min(span), span, self.base_lr, self.min_lr)
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            weight_decay: self.weight_decay,
            ..AdamWConfig::default()
        }
    }

    pub fn validate(&self, stage: &str) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 {
            return Err(invalid(format!(
                "{stage}: steps and batch size must be positive"
            )));
        }
        if !(self.base_lr > 0.0 && self.min_lr >= 0.0 && self.min_lr <= self.base_lr) {
            return Err(invalid(format!(
                "{stage}: need 0 <= min_lr <= base_lr and base_lr > 0"
            )));
        }
        if !(self.weight_decay >= 0.0 && self.clip_norm > 0.0) {
            return Err(invalid(format!(
                "{stage}: weight decay must be >= 0 and clip norm > 0"
            )));
        }
        Ok(())
    }
}

/// Independent seeds for data order, weight initialization and sampling
/// noise (Gumbel, dropout, stochastic depth, masks).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Seeds {
    pub data: u64,
    pub model: u64,
    pub sampling: u64,
}

impl Seeds {
    pub fn from_base(base: u64) -> Self {
        Self {
            data: base,
            model: base.wrapping_add(1),
            sampling: base.wrapping_add(2),
        }
    }
}

/// A generator for `(seed, stream)`; used to derive per-step randomness.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Item indices of step `step`'s batch: distinct when the dataset is large
/// enough, otherwise drawn with replacement.
pub fn batch_indices(len: usize, batch: usize, seed: u64, step: u64) -> Vec<usize> {
    let mut rng = stream_rng(seed, step);
    if batch <= len {
        index::sample(&mut rng, len, batch).into_vec()
    } else {
        (0..batch).map(|_| rng.random_range(0..len)).collect()
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLogRecord {
    pub step: u64,
    pub lr: f64,
    pub temperature: f64,
    pub kl_weight: f64,
    pub chamfer: f64,
    pub kl: f64,
    pub ae: f64,
    pub ar: f64,
    pub loss: f64,
    pub wall_ms: f64,
}

impl TrainLogRecord {
    pub const HEADER: &'static str =
        "step\tlr\ttemperature\tkl_weight\tchamfer\tkl\tae\tar\tloss\twall_ms";

    pub fn to_tsv(&self) -> String {
        format!(
            "{}\t{:e}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{:.3}",
            self.step,
            self.lr,
            self.temperature,
            self.kl_weight,
            self.chamfer,
            self.kl,
            self.ae,
            self.ar,
            self.loss,
            self.wall_ms
        )
    }
}

/// Append-only tab-separated log with a header row.
pub struct LogWriter {
    file: File,
    path: PathBuf,
}

impl LogWriter {
    /// Opens `path`, writing the header unless the file already has content.
    pub fn open(path: &Path) -> Result<Self> {
        let mut file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(io_err(path))?;
        if file.metadata().map_err(io_err(path))?.len() == 0 {
            writeln!(file, "{}", TrainLogRecord::HEADER).map_err(io_err(path))?;
        }
        Ok(Self {
            file,
            path: path.to_path_buf(),
        })
    }

    pub fn write(&mut self, rec: &TrainLogRecord) -> Result<()> {
        writeln!(self.file, "{}", rec.to_tsv()).map_err(io_err(&self.path))
    }
}

/// Where and how a run persists state.
#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Output directory for checkpoints and the log; nothing is written
    /// when absent.
    pub out_dir: Option<PathBuf>,
    /// Resume from the checkpoint in `out_dir` if one exists.
    pub resume: bool,
    /// Stop after this step count (exclusive) even if the schedule is
    /// longer; used to interrupt runs.
    pub stop_at: Option<u64>,
}

fn params_path(dir: &Path, stem: &str) -> PathBuf {
    dir.join(format!("{stem}.ckpt"))
}

fn optim_path(dir: &Path, stem: &str) -> PathBuf {
    dir.join(format!("{stem}.opt"))
}

fn save_state(
    dir: &Path,
    stem: &str,
    store: &ParamStore<f32>,
    state: &OptimizerState<f32>,
) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    checkpoint::save_params(&params_path(dir, stem), store)?;
    checkpoint::save_optimizer(&optim_path(dir, stem), store, state)?;
    Ok(())
}

/// Loads parameters and optimizer state if a checkpoint exists; returns
/// the step to continue from.
fn try_resume(
    dir: &Path,
    stem: &str,
    store: &mut ParamStore<f32>,
    opt: &mut AdamW<f32>,
) -> Result<u64> {
    let (p, o) = (params_path(dir, stem), optim_path(dir, stem));
    if !p.exists() || !o.exists() {
        return Ok(0);
    }
    checkpoint::load_params(&p, store)?;
    opt.state = checkpoint::load_optimizer(&o, store)?;
    Ok(opt.state.step)
}

#[derive(Clone, Debug, PartialEq)]
pub struct DvaeTrainConfig {
    pub optim: OptimConfig,
    pub kl: KlSchedule,
    pub temperature: TemperatureSchedule,
    /// Draw Gumbel noise in the relaxed sample; off gives plain softmax
    /// mixing of the codebook.
    pub gumbel_noise: bool,
    pub patch_sampling: PatchSampling,
    pub kl_form: KlForm,
}

/// Which code distribution the KL term pulls toward uniform.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum KlForm {
    /// Every patch's own distribution, averaged over patches.
    PerPatch,
    /// The distribution averaged over all patches of the batch.
    Aggregate,
}

impl FromStr for KlForm {
    type Err = GpmError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per_patch" => Ok(Self::PerPatch),
            "aggregate" => Ok(Self::Aggregate),
            _ => Err(invalid(format!(
                "unknown kl form '{s}' (per_patch|aggregate)"
            ))),
        }
    }
}

/// Where FPS starts when patching a training cloud.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PatchSampling {
    /// A fresh start point per step and item.
    PerStep,
    /// The evaluation seed every time, so each cloud keeps one patch set.
    Fixed,
}

impl FromStr for PatchSampling {
    type Err = GpmError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per_step" => Ok(Self::PerStep),
            "fixed" => Ok(Self::Fixed),
            _ => Err(invalid(format!(
                "unknown patch sampling '{s}' (per_step|fixed)"
            ))),
        }
    }
}

impl Default for DvaeTrainConfig {
    fn default() -> Self {
        Self {
            optim: OptimConfig::desk(3000, 8),
            kl: KlSchedule {
                flat_steps: 200,
                ramp_steps: 2000,
                final_weight: 0.1,
            },
            temperature: TemperatureSchedule {
                start: 1.0,
                end: 0.0625,
                decay_steps: 2000,
                shape: DecayShape::Linear,
            },
            gumbel_noise: true,
            patch_sampling: PatchSampling::Fixed,
            kl_form: KlForm::Aggregate,
        }
    }
}

/// Seed of the FPS start used when patching item `item` at step `step`.
fn patch_seed(seed: u64, step: u64, item: usize) -> u64 {
    stream_rng(seed ^ 0x7061_7463, step).random::<u64>() ^ item as u64
}

/// Mean Chamfer distance between every cloud and its hard-token
/// reconstruction, with a fixed patching seed.
pub fn dvae_eval_chamfer(model: &DvaeModel, data: &Dataset, seed: u64) -> Result<f64> {
    if data.is_empty() {
        return Err(GpmError::Data("empty dataset".into()));
    }
    let mut total = 0.0;
    for item in data.items() {
        let (recon, _, patches) = model.reconstruct_unchecked(&item.cloud, seed)?;
        total += chamfer_l1(&recon, &PointCloud::new(patches.union_points())?);
    }
    Ok(total / data.len() as f64)
}

#[derive(Clone, Debug)]
pub struct DvaeRun {
    pub log: Vec<TrainLogRecord>,
    /// Hard-token evaluation Chamfer before the first step of this call.
    pub initial_eval: f64,
    pub final_eval: f64,
    pub steps_done: u64,
}

pub const EVAL_PATCH_SEED: u64 = 0;

/// Trains the dVAE. The model is marked ready when the schedule completes.
pub fn train_dvae(
    model: &mut DvaeModel,
    data: &Dataset,
    cfg: &DvaeTrainConfig,
    seeds: Seeds,
    opts: &RunOptions,
) -> Result<DvaeRun> {
    cfg.optim.validate("dvae")?;
    if data.is_empty() {
        return Err(GpmError::Data(
            "dVAE training needs a non-empty dataset".into(),
        ));
    }
    let mut opt = AdamW::new(cfg.optim.adamw(), &model.params);
    let start = match (&opts.out_dir, opts.resume) {
        (Some(dir), true) => try_resume(dir, "dvae", &mut model.params, &mut opt)?,
        _ => 0,
    };
    let mut writer = match &opts.out_dir {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(io_err(dir))?;
            Some(LogWriter::open(&dir.join("dvae_log.tsv"))?)
        }
        None => None,
    };
    let initial_eval = dvae_eval_chamfer(model, data, EVAL_PATCH_SEED)?;
    let end = opts
        .stop_at
        .map_or(cfg.optim.steps, |s| s.min(cfg.optim.steps));
    let (m, k) = (model.config().groups, model.config().group_size);
    let mut log = Vec::new();
    let clock = Instant::now();
    for step in start..end {
        let idx = batch_indices(data.len(), cfg.optim.batch_size, seeds.data, step);
        let clouds: Vec<_> = idx.iter().map(|i| &data.items()[*i].cloud).collect();
        let sets = clouds
            .iter()
            .enumerate()
            .map(|(j, c)| {
                let seed = match cfg.patch_sampling {
                    PatchSampling::PerStep => patch_seed(seeds.data, step, j),
                    PatchSampling::Fixed => EVAL_PATCH_SEED,
                };
                build_patches(c, m, k, seed)
            })
            .collect::<Result<Vec<PatchSet>>>()?;
        let batch = PatchBatch::<f32>::new(&sets.iter().collect::<Vec<_>>())?;
        let tau = temperature_at(step, &cfg.temperature);
        let kl_w = kl_weight_at(step, &cfg.kl);
        let lr = cfg.optim.lr_at(step);

        let mut g = Graph::<f32>::new(true, stream_rng(seeds.sampling, step).random());
        let bind = Bind::trainable(&model.params);
        let fwd = model.arch.forward(
            &mut g,
            &bind,
            &batch,
            tau,
            QuantizeMode::Soft,
            cfg.gumbel_noise,
        )?;
        let chamfer = model.arch.chamfer_term(&mut g, fwd.recon, &batch)?;
        let kl = match cfg.kl_form {
            KlForm::PerPatch => kl_to_uniform_graph(&mut g, fwd.logits)?,
            KlForm::Aggregate => kl_aggregate_to_uniform_graph(&mut g, fwd.logits)?,
        };
        let weighted = g.scale(kl, kl_w)?;
        let loss = g.add(chamfer, weighted)?;
        let mut grads = g.backward(loss)?.for_store(&model.params);
        grads.clip_global_norm(cfg.optim.clip_norm);
        opt.step(&mut model.params, &grads, lr)?;

        let rec = TrainLogRecord {
            step,
            lr,
            temperature: tau,
            kl_weight: kl_w,
            chamfer: g.value(chamfer).item() as f64,
            kl: g.value(kl).item() as f64,
            loss: g.value(loss).item() as f64,
            wall_ms: clock.elapsed().as_secs_f64() * 1e3,
            ..Default::default()
        };
        if let Some(w) = writer.as_mut() {
            w.write(&rec)?;
        }
        log.push(rec);
        let done = step + 1;
        if let Some(dir) = &opts.out_dir {
            let every = cfg.optim.checkpoint_every;
            if (every > 0 && done % every == 0) || done == end {
                save_state(dir, "dvae", &model.params, &opt.state)?;
            }
        }
    }
    if end == cfg.optim.steps {
        model.mark_ready();
    }
    let final_eval = dvae_eval_chamfer(model, data, EVAL_PATCH_SEED)?;
    Ok(DvaeRun {
        log,
        initial_eval,
        final_eval,
        steps_done: end,
    })
}

/// A cloud prepared for transformer training: fixed patches, frozen
/// embeddings and tokenizer labels.
#[derive(Clone, Debug)]
pub struct TokenizedCloud {
    pub id: String,
    pub label: Option<usize>,
    pub patches: PatchSet,
    pub embeddings: Tensor<f32>,
    pub tokens: Vec<usize>,
}

/// Patches, embeds and tokenizes every cloud with the frozen dVAE.
pub fn tokenize_corpus(
    dvae: &DvaeModel,
    data: &Dataset,
    patch_seed: u64,
) -> Result<Vec<TokenizedCloud>> {
    data.items()
        .par_iter()
        .map(|item| {
            let patches = dvae.patches(&item.cloud, patch_seed)?;
            let embeddings = dvae.embeddings(&patches)?;
            let tokens = dvae.tokens_from_embeddings(&embeddings)?.tokens;
            Ok(TokenizedCloud {
                id: item.id.clone(),
                label: item.label,
                patches,
                embeddings,
                tokens,
            })
        })
        .collect()
}

impl TokenizedCloud {
    pub fn input(&self, mask_set: Vec<usize>) -> Result<GpmInput<f32>> {
        GpmInput::new(
            self.embeddings.clone(),
            self.patches.centers.clone(),
            self.tokens.clone(),
            mask_set,
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GpmTrainConfig {
    pub optim: OptimConfig,
    /// FPS seed used when tokenizing the corpus.
    pub patch_seed: u64,
}

impl Default for GpmTrainConfig {
    fn default() -> Self {
        Self {
            optim: OptimConfig::desk(2000, 8),
            patch_seed: EVAL_PATCH_SEED,
        }
    }
}

const EVAL_MASK_SEED: u64 = 0x6d61_736b;

/// Deterministic loss of the model on the corpus: fixed mask regions, eval
/// mode. Returns `(ae, ar, total)` averaged over items.
pub fn gpm_eval_loss(model: &GpmModel, corpus: &[TokenizedCloud]) -> Result<(f64, f64, f64)> {
    if corpus.is_empty() {
        return Err(GpmError::Data("empty corpus".into()));
    }
    let mut sums = (0.0, 0.0, 0.0);
    for (i, c) in corpus.iter().enumerate() {
        let mut rng = stream_rng(EVAL_MASK_SEED, i as u64);
        let mask = select_mask_region(&c.patches.centers, model.config().mask_ratio, &mut rng)?;
        let mut input = c.input(mask)?;
        input.order = model.config().order;
        let mut g = Graph::<f32>::eval();
        let (_, l) = model
            .arch
            .losses(&mut g, &Bind::frozen(&model.params), &[input])?;
        sums.0 += g.value(l.ae).item() as f64;
        sums.1 += g.value(l.ar).item() as f64;
        sums.2 += g.value(l.total).item() as f64;
    }
    let n = corpus.len() as f64;
    Ok((sums.0 / n, sums.1 / n, sums.2 / n))
}

#[derive(Clone, Debug)]
pub struct GpmRun {
    pub log: Vec<TrainLogRecord>,
    pub initial_eval: f64,
    pub final_eval: f64,
    pub final_eval_ae: f64,
    pub final_eval_ar: f64,
    pub tokenizer_checksum_before: u64,
    pub tokenizer_checksum_after: u64,
    pub steps_done: u64,
}

/// Trains the transformer against labels from the frozen dVAE.
pub fn train_gpm(
    model: &mut GpmModel,
    dvae: &DvaeModel,
    data: &Dataset,
    cfg: &GpmTrainConfig,
    seeds: Seeds,
    opts: &RunOptions,
) -> Result<GpmRun> {
    cfg.optim.validate("gpm")?;
    if !dvae.is_ready() {
        return Err(GpmError::NotReady(
            "transformer training needs a trained dVAE".into(),
        ));
    }
    if data.is_empty() {
        return Err(GpmError::Data(
            "transformer training needs a non-empty dataset".into(),
        ));
    }
    let before = dvae.params.checksum();
    let corpus = tokenize_corpus(dvae, data, cfg.patch_seed)?;
    let mut opt = AdamW::new(cfg.optim.adamw(), &model.params);
    let start = match (&opts.out_dir, opts.resume) {
        (Some(dir), true) => try_resume(dir, "gpm", &mut model.params, &mut opt)?,
        _ => 0,
    };
    let mut writer = match &opts.out_dir {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(io_err(dir))?;
            Some(LogWriter::open(&dir.join("gpm_log.tsv"))?)
        }
        None => None,
    };
    let initial_eval = gpm_eval_loss(model, &corpus)?.2;
    let end = opts
        .stop_at
        .map_or(cfg.optim.steps, |s| s.min(cfg.optim.steps));
    let mut log = Vec::new();
    let clock = Instant::now();
    for step in start..end {
        let idx = batch_indices(corpus.len(), cfg.optim.batch_size, seeds.data, step);
        let mut mask_rng = stream_rng(seeds.sampling ^ EVAL_MASK_SEED, step);
        let inputs = idx
            .iter()
            .map(|i| {
                let c = &corpus[*i];
                let mask = select_mask_region(
                    &c.patches.centers,
                    model.config().mask_ratio,
                    &mut mask_rng,
                )?;
                let mut input = c.input(mask)?;
                input.order = model.config().order;
                Ok(input)
            })
            .collect::<Result<Vec<_>>>()?;
        let lr = cfg.optim.lr_at(step);
        let mut g = Graph::<f32>::new(true, stream_rng(seeds.sampling, step).random());
        let (_, l) = model
            .arch
            .losses(&mut g, &Bind::trainable(&model.params), &inputs)?;
        let mut grads = g.backward(l.total)?.for_store(&model.params);
        grads.clip_global_norm(cfg.optim.clip_norm);
        opt.step(&mut model.params, &grads, lr)?;
        let rec = TrainLogRecord {
            step,
            lr,
            ae: g.value(l.ae).item() as f64,
            ar: g.value(l.ar).item() as f64,
            loss: g.value(l.total).item() as f64,
            wall_ms: clock.elapsed().as_secs_f64() * 1e3,
            ..Default::default()
        };
        if let Some(w) = writer.as_mut() {
            w.write(&rec)?;
        }
        log.push(rec);
        let done = step + 1;
        if let Some(dir) = &opts.out_dir {
            let every = cfg.optim.checkpoint_every;
            if (every > 0 && done % every == 0) || done == end {
                save_state(dir, "gpm", &model.params, &opt.state)?;
            }
        }
    }
    let (ae, ar, total) = gpm_eval_loss(model, &corpus)?;
    Ok(GpmRun {
        log,
        initial_eval,
        final_eval: total,
        final_eval_ae: ae,
        final_eval_ar: ar,
        tokenizer_checksum_before: before,
        tokenizer_checksum_after: dvae.params.checksum(),
        steps_done: end,
    })
}
