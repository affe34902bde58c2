//! Flat `key = value` run configuration with `#` comments, the desk and
//! full-size presets, and the resolved-config snapshot format.
//!
//! Every key is `section.field`; `seed` alone sets all three seeds at once.
//! [`Config::to_text`] writes every key, so a snapshot parses back to the
//! same configuration.

use std::fmt::Display;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::data::{
    load_dataset_dir, normalize_unit_sphere, sample_n, synth_dataset, Dataset, ShapeFamily,
    SyntheticShapeSpec,
};
use crate::downstream::ClassifyConfig;
use crate::dvae::{ChamferScope, DvaeConfig};
use crate::error::{GpmError, Result};
use crate::generation::{SamplingMode, SamplingPolicy};
use crate::geometry::ChamferNorm;
use crate::model::{ArLossMode, GpmConfig, PosEmbedKind, SequenceOrder};
use crate::training::{
    DecayShape, DvaeTrainConfig, GpmTrainConfig, KlForm, KlSchedule, OptimConfig, PatchSampling,
    Seeds, TemperatureSchedule,
};

/// Where training clouds come from.
#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    Synthetic,
    /// A directory of class subdirectories holding xyz or ply files.
    Dir(PathBuf),
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub source: DataSource,
    pub families: Vec<ShapeFamily>,
    pub per_class: usize,
    pub points: usize,
    pub noise_sigma: f64,
    pub scale_jitter: (f64, f64),
    pub rotation_jitter: f64,
}

impl DataConfig {
    /// Specs for `families` with this section's jitter settings.
    pub fn specs(&self, families: &[ShapeFamily], seed: u64) -> Vec<SyntheticShapeSpec> {
        families
            .iter()
            .map(|f| SyntheticShapeSpec {
                scale_jitter: self.scale_jitter,
                rotation_jitter: self.rotation_jitter,
                noise_sigma: self.noise_sigma,
                ..SyntheticShapeSpec::new(*f, self.points, seed)
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassifySection {
    pub run: ClassifyConfig,
    pub families: Vec<ShapeFamily>,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub baseline_heads: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FewShotSection {
    pub run: ClassifyConfig,
    pub families: Vec<ShapeFamily>,
    pub per_class: usize,
    pub way: usize,
    pub shot: usize,
    pub runs: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenerateSection {
    pub policy: SamplingPolicy,
    pub mask_ratio: f64,
    /// Generate from a fully masked PartA over canonical centers.
    pub unconditional: bool,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Config {
    pub seeds: Seeds,
    pub data: DataConfig,
    pub dvae: DvaeConfig,
    pub dvae_train: DvaeTrainConfig,
    pub gpm: GpmConfig,
    pub gpm_train: GpmTrainConfig,
    pub classify: ClassifySection,
    pub few_shot: FewShotSection,
    pub generate: GenerateSection,
}

impl Default for Config {
    fn default() -> Self {
        Self::desk()
    }
}

fn cfg_err(key: &str, line: usize, msg: impl Into<String>) -> GpmError {
    GpmError::Config {
        key: key.to_string(),
        line,
        msg: msg.into(),
    }
}

fn parse<T: FromStr>(key: &str, value: &str, line: usize) -> Result<T>
where
    T::Err: Display,
{
    value
        .parse()
        .map_err(|e: T::Err| cfg_err(key, line, format!("cannot parse `{value}`: {e}")))
}

fn parse_bool(key: &str, value: &str, line: usize) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(cfg_err(
            key,
            line,
            format!("expected true or false, got `{value}`"),
        )),
    }
}

fn parse_families(key: &str, value: &str, line: usize) -> Result<Vec<ShapeFamily>> {
    let out = value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse::<ShapeFamily>(key, s, line))
        .collect::<Result<Vec<_>>>()?;
    if out.is_empty() {
        return Err(cfg_err(key, line, "needs at least one shape family"));
    }
    Ok(out)
}

fn norm_name(n: ChamferNorm) -> &'static str {
    match n {
        ChamferNorm::Euclidean => "euclidean",
        ChamferNorm::L1 => "l1",
        ChamferNorm::Squared => "squared",
    }
}

fn parse_norm(key: &str, value: &str, line: usize) -> Result<ChamferNorm> {
    match value {
        "euclidean" => Ok(ChamferNorm::Euclidean),
        "l1" => Ok(ChamferNorm::L1),
        "squared" => Ok(ChamferNorm::Squared),
        _ => Err(cfg_err(
            key,
            line,
            format!("unknown norm `{value}` (euclidean|l1|squared)"),
        )),
    }
}

fn families_text(f: &[ShapeFamily]) -> String {
    f.iter().map(|f| f.name()).collect::<Vec<_>>().join(",")
}

fn set_optim(
    o: &mut OptimConfig,
    field: &str,
    key: &str,
    value: &str,
    line: usize,
) -> Result<bool> {
    match field {
        "steps" => o.steps = parse(key, value, line)?,
        "batch_size" => o.batch_size = parse(key, value, line)?,
        "base_lr" => o.base_lr = parse(key, value, line)?,
        "min_lr" => o.min_lr = parse(key, value, line)?,
        "lr_span" => o.lr_span = parse(key, value, line)?,
        "weight_decay" => o.weight_decay = parse(key, value, line)?,
        "clip_norm" => o.clip_norm = parse(key, value, line)?,
        "checkpoint_every" => o.checkpoint_every = parse(key, value, line)?,
        _ => return Ok(false),
    }
    Ok(true)
}

fn optim_text(out: &mut String, p: &str, o: &OptimConfig) {
    let _ = writeln!(out, "{p}.steps = {}", o.steps);
    let _ = writeln!(out, "{p}.batch_size = {}", o.batch_size);
    let _ = writeln!(out, "{p}.base_lr = {}", o.base_lr);
    let _ = writeln!(out, "{p}.min_lr = {}", o.min_lr);
    let _ = writeln!(out, "{p}.lr_span = {}", o.lr_span);
    let _ = writeln!(out, "{p}.weight_decay = {}", o.weight_decay);
    let _ = writeln!(out, "{p}.clip_norm = {}", o.clip_norm);
    let _ = writeln!(out, "{p}.checkpoint_every = {}", o.checkpoint_every);
}

impl Config {
    /// Desk-scale defaults: every schedule scaled to the short runs.
    pub fn desk() -> Self {
        let few_shot_run = ClassifyConfig {
            optim: OptimConfig::desk(300, 16),
            rotation_copies: 7,
            ..ClassifyConfig::default()
        };
        Self {
            seeds: Seeds::from_base(0),
            data: DataConfig {
                source: DataSource::Synthetic,
                families: ShapeFamily::ALL[..4].to_vec(),
                per_class: 2,
                points: 1024,
                noise_sigma: 0.005,
                scale_jitter: (0.85, 1.15),
                rotation_jitter: std::f64::consts::PI,
            },
            dvae: DvaeConfig::default(),
            dvae_train: DvaeTrainConfig::default(),
            gpm: GpmConfig::default(),
            gpm_train: GpmTrainConfig::default(),
            classify: ClassifySection {
                run: ClassifyConfig::default(),
                families: vec![ShapeFamily::Sphere, ShapeFamily::Cube, ShapeFamily::Torus],
                train_per_class: 100,
                test_per_class: 50,
                baseline_heads: 10,
            },
            few_shot: FewShotSection {
                run: few_shot_run,
                families: ShapeFamily::ALL.to_vec(),
                per_class: 40,
                way: 5,
                shot: 10,
                runs: 10,
            },
            generate: GenerateSection {
                policy: SamplingPolicy::default(),
                mask_ratio: 0.35,
                unconditional: false,
                count: 1,
            },
        }
    }

    /// The full-scale constants, kept for reference runs.
    pub fn full() -> Self {
        let mut c = Self::desk();
        c.dvae.vocab = 8192;
        c.dvae.groups = 64;
        c.dvae.group_size = 32;
        c.dvae_train.optim = OptimConfig {
            lr_span: 60_000,
            ..OptimConfig::desk(150_000, 64)
        };
        c.dvae_train.kl = KlSchedule {
            flat_steps: 10_000,
            ramp_steps: 100_000,
            final_weight: 0.1,
        };
        c.dvae_train.temperature = TemperatureSchedule {
            start: 1.0,
            end: 0.0625,
            decay_steps: 100_000,
            shape: DecayShape::Linear,
        };
        c.gpm.vocab = 8192;
        c.gpm.groups = 64;
        c.gpm.dim = 384;
        c.gpm.depth = 12;
        c.gpm.heads = 6;
        c.classify.run.optim.batch_size = 32;
        c
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "full" => Ok(Self::full()),
            _ => Err(cfg_err(
                "preset",
                0,
                format!("unknown preset `{name}` (desk|full)"),
            )),
        }
    }

    /// Clouds for one experiment: synthetic `families` with `per_class`
    /// items drawn under `seed`, or every file of the configured directory
    /// normalized and resampled to `data.points`.
    pub fn corpus(&self, families: &[ShapeFamily], per_class: usize, seed: u64) -> Result<Dataset> {
        match &self.data.source {
            DataSource::Synthetic => synth_dataset(&self.data.specs(families, seed), per_class),
            DataSource::Dir(dir) => {
                let points = self.data.points;
                load_dataset_dir(dir)?.map_clouds(|c| sample_n(&normalize_unit_sphere(c), points, seed))
            }
        }
    }

    /// The corpus the tokenizer and the transformer pretrain on.
    pub fn pretraining_data(&self) -> Result<Dataset> {
        self.corpus(&self.data.families, self.data.per_class, self.seeds.data)
    }

    /// Applies one `key = value` assignment. `line` is reported in errors.
    pub fn set(&mut self, key: &str, value: &str, line: usize) -> Result<()> {
        let value = value.trim();
        let (section, field) = key.split_once('.').unwrap_or((key, ""));
        let handled = match section {
            "seed" => self.set_seed(field, key, value, line)?,
            "data" => self.set_data(field, key, value, line)?,
            "dvae" => self.set_dvae(field, key, value, line)?,
            "dvae_train" => self.set_dvae_train(field, key, value, line)?,
            "gpm" => self.set_gpm(field, key, value, line)?,
            "gpm_train" => match field {
                "patch_seed" => {
                    self.gpm_train.patch_seed = parse(key, value, line)?;
                    true
                }
                _ => set_optim(&mut self.gpm_train.optim, field, key, value, line)?,
            },
            "classify" => self.set_classify(field, key, value, line)?,
            "few_shot" => self.set_few_shot(field, key, value, line)?,
            "generate" => self.set_generate(field, key, value, line)?,
            _ => false,
        };
        if handled {
            Ok(())
        } else {
            Err(cfg_err(key, line, "unknown key"))
        }
    }

    fn set_seed(&mut self, field: &str, key: &str, value: &str, line: usize) -> Result<bool> {
        match field {
            "" => self.seeds = Seeds::from_base(parse(key, value, line)?),
            "data" => self.seeds.data = parse(key, value, line)?,
            "model" => self.seeds.model = parse(key, value, line)?,
            "sampling" => self.seeds.sampling = parse(key, value, line)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    fn set_data(&mut self, field: &str, key: &str, value: &str, line: usize) -> Result<bool> {
        let d = &mut self.data;
        match field {
            "source" => {
                d.source = if value == "synthetic" {
                    DataSource::Synthetic
                } else {
                    DataSource::Dir(value.into())
                }
            }
            "families" => d.families = parse_families(key, value, line)?,
            "per_class" => d.per_class = parse(key, value, line)?,
            "points" => d.points = parse(key, value, line)?,
            "noise_sigma" => d.noise_sigma = parse(key, value, line)?,
            "scale_min" => d.scale_jitter.0 = parse(key, value, line)?,
            "scale_max" => d.scale_jitter.1 = parse(key, value, line)?,
            "rotation_jitter" => d.rotation_jitter = parse(key, value, line)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    fn set_dvae(&mut self, field: &str, key: &str, value: &str, line: usize) -> Result<bool> {
        let d = &mut self.dvae;
        match field {
            "vocab" => d.vocab = parse(key, value, line)?,
            "code_dim" => d.code_dim = parse(key, value, line)?,
            "hidden" => d.hidden = parse(key, value, line)?,
            "groups" => d.groups = parse(key, value, line)?,
            "group_size" => d.group_size = parse(key, value, line)?,
            "graph_k" => d.graph_k = parse(key, value, line)?,
            "edge_width" => d.edge_width = parse(key, value, line)?,
            "edge_depth" => d.edge_depth = parse(key, value, line)?,
            "decoder_width" => d.decoder_width = parse(key, value, line)?,
            "fold_hidden" => d.fold_hidden = parse(key, value, line)?,
            "chamfer_norm" => d.chamfer_norm = parse_norm(key, value, line)?,
            "chamfer_scope" => d.chamfer_scope = parse::<ChamferScope>(key, value, line)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    fn set_dvae_train(&mut self, field: &str, key: &str, value: &str, line: usize) -> Result<bool> {
        let t = &mut self.dvae_train;
        match field {
            "kl_flat_steps" => t.kl.flat_steps = parse(key, value, line)?,
            "kl_ramp_steps" => t.kl.ramp_steps = parse(key, value, line)?,
            "kl_final_weight" => t.kl.final_weight = parse(key, value, line)?,
            "tau_start" => t.temperature.start = parse(key, value, line)?,
            "tau_end" => t.temperature.end = parse(key, value, line)?,
            "tau_decay_steps" => t.temperature.decay_steps = parse(key, value, line)?,
            "tau_shape" => t.temperature.shape = parse::<DecayShape>(key, value, line)?,
            "gumbel_noise" => t.gumbel_noise = parse_bool(key, value, line)?,
            "patch_sampling" => t.patch_sampling = parse::<PatchSampling>(key, value, line)?,
            "kl_form" => t.kl_form = parse::<KlForm>(key, value, line)?,
            _ => return set_optim(&mut t.optim, field, key, value, line),
        }
        Ok(true)
    }

    fn set_gpm(&mut self, field: &str, key: &str, value: &str, line: usize) -> Result<bool> {
        let g = &mut self.gpm;
        match field {
            "dim" => g.dim = parse(key, value, line)?,
            "depth" => g.depth = parse(key, value, line)?,
            "heads" => g.heads = parse(key, value, line)?,
            "mlp_ratio" => g.mlp_ratio = parse(key, value, line)?,
            "drop_path" => g.drop_path = parse(key, value, line)?,
            "pos_embed" => g.pos_embed = parse::<PosEmbedKind>(key, value, line)?,
            "input_dim" => g.input_dim = parse(key, value, line)?,
            "vocab" => g.vocab = parse(key, value, line)?,
            "groups" => g.groups = parse(key, value, line)?,
            "w_ae" => g.w_ae = parse(key, value, line)?,
            "w_ar" => g.w_ar = parse(key, value, line)?,
            "ar_loss" => g.ar_loss = parse::<ArLossMode>(key, value, line)?,
            "order" => g.order = parse::<SequenceOrder>(key, value, line)?,
            "mask_min" => g.mask_ratio.0 = parse(key, value, line)?,
            "mask_max" => g.mask_ratio.1 = parse(key, value, line)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    fn set_classify(&mut self, field: &str, key: &str, value: &str, line: usize) -> Result<bool> {
        let c = &mut self.classify;
        match field {
            "freeze_backbone" => c.run.freeze_backbone = parse_bool(key, value, line)?,
            "patch_seed" => c.run.patch_seed = parse(key, value, line)?,
            "families" => c.families = parse_families(key, value, line)?,
            "train_per_class" => c.train_per_class = parse(key, value, line)?,
            "test_per_class" => c.test_per_class = parse(key, value, line)?,
            "baseline_heads" => c.baseline_heads = parse(key, value, line)?,
            _ => return set_optim(&mut c.run.optim, field, key, value, line),
        }
        Ok(true)
    }

    fn set_few_shot(&mut self, field: &str, key: &str, value: &str, line: usize) -> Result<bool> {
        let f = &mut self.few_shot;
        match field {
            "freeze_backbone" => f.run.freeze_backbone = parse_bool(key, value, line)?,
            "patch_seed" => f.run.patch_seed = parse(key, value, line)?,
            "rotation_copies" => f.run.rotation_copies = parse(key, value, line)?,
            "families" => f.families = parse_families(key, value, line)?,
            "per_class" => f.per_class = parse(key, value, line)?,
            "way" => f.way = parse(key, value, line)?,
            "shot" => f.shot = parse(key, value, line)?,
            "runs" => f.runs = parse(key, value, line)?,
            _ => return set_optim(&mut f.run.optim, field, key, value, line),
        }
        Ok(true)
    }

    fn set_generate(&mut self, field: &str, key: &str, value: &str, line: usize) -> Result<bool> {
        let g = &mut self.generate;
        match field {
            "mode" => g.policy.mode = parse::<SamplingMode>(key, value, line)?,
            "temperature" => g.policy.temperature = parse(key, value, line)?,
            "seed" => g.policy.seed = parse(key, value, line)?,
            "mask_ratio" => g.mask_ratio = parse(key, value, line)?,
            "unconditional" => g.unconditional = parse_bool(key, value, line)?,
            "count" => g.count = parse(key, value, line)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    /// Applies every assignment in `text` on top of `self`. A `preset`
    /// key, if present, must come first and resets to that preset.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let body = raw.split('#').next().unwrap_or("").trim();
            if body.is_empty() {
                continue;
            }
            let (key, value) = body
                .split_once('=')
                .ok_or_else(|| cfg_err(body, line, "expected `key = value`"))?;
            let key = key.trim();
            if key == "preset" {
                *self = Self::preset(value.trim()).map_err(|_| {
                    cfg_err(key, line, format!("unknown preset `{}`", value.trim()))
                })?;
            } else {
                self.set(key, value, line)?;
            }
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut c = Self::desk();
        c.apply_text(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(crate::error::io_err(path))?;
        Self::parse(&text)
    }

    /// Applies a command-line `key=value` override; line 0 marks its origin.
    pub fn set_override(&mut self, assignment: &str) -> Result<()> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| cfg_err(assignment, 0, "override must look like key=value"))?;
        self.set(k.trim(), v, 0)
    }

    pub fn validate(&self) -> Result<()> {
        let wrap = |key: &str, r: Result<()>| r.map_err(|e| cfg_err(key, 0, e.to_string()));
        wrap("dvae", self.dvae.validate())?;
        wrap("gpm", self.gpm.validate())?;
        wrap("dvae_train", self.dvae_train.optim.validate("dvae_train"))?;
        wrap("gpm_train", self.gpm_train.optim.validate("gpm_train"))?;
        wrap("classify", self.classify.run.optim.validate("classify"))?;
        wrap("few_shot", self.few_shot.run.optim.validate("few_shot"))?;
        wrap("generate", self.generate.policy.validate(self.gpm.vocab))?;
        if self.dvae.vocab != self.gpm.vocab || self.dvae.groups != self.gpm.groups {
            return Err(cfg_err(
                "gpm.vocab",
                0,
                "transformer vocab and groups must match the dVAE",
            ));
        }
        if self.dvae.code_dim != self.gpm.input_dim || self.dvae.hidden != self.gpm.input_dim {
            return Err(cfg_err(
                "gpm.input_dim",
                0,
                "input width must equal dvae.hidden and dvae.code_dim",
            ));
        }
        if !(self.generate.mask_ratio > 0.0 && self.generate.mask_ratio < 1.0) {
            return Err(cfg_err("generate.mask_ratio", 0, "must lie in (0, 1)"));
        }
        if self.data.per_class == 0 || self.data.points < self.dvae.group_size {
            return Err(cfg_err(
                "data.points",
                0,
                "need at least one cloud per class and group_size points",
            ));
        }
        Ok(())
    }

    /// Every key with its current value, in a form [`Config::parse`] reads back.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let w = &mut s;
        let _ = writeln!(w, "seed.data = {}", self.seeds.data);
        let _ = writeln!(w, "seed.model = {}", self.seeds.model);
        let _ = writeln!(w, "seed.sampling = {}", self.seeds.sampling);

        let d = &self.data;
        let source = match &d.source {
            DataSource::Synthetic => "synthetic".to_string(),
            DataSource::Dir(p) => p.display().to_string(),
        };
        let _ = writeln!(w, "data.source = {source}");
        let _ = writeln!(w, "data.families = {}", families_text(&d.families));
        let _ = writeln!(w, "data.per_class = {}", d.per_class);
        let _ = writeln!(w, "data.points = {}", d.points);
        let _ = writeln!(w, "data.noise_sigma = {}", d.noise_sigma);
        let _ = writeln!(w, "data.scale_min = {}", d.scale_jitter.0);
        let _ = writeln!(w, "data.scale_max = {}", d.scale_jitter.1);
        let _ = writeln!(w, "data.rotation_jitter = {}", d.rotation_jitter);

        let v = &self.dvae;
        let _ = writeln!(w, "dvae.vocab = {}", v.vocab);
        let _ = writeln!(w, "dvae.code_dim = {}", v.code_dim);
        let _ = writeln!(w, "dvae.hidden = {}", v.hidden);
        let _ = writeln!(w, "dvae.groups = {}", v.groups);
        let _ = writeln!(w, "dvae.group_size = {}", v.group_size);
        let _ = writeln!(w, "dvae.graph_k = {}", v.graph_k);
        let _ = writeln!(w, "dvae.edge_width = {}", v.edge_width);
        let _ = writeln!(w, "dvae.edge_depth = {}", v.edge_depth);
        let _ = writeln!(w, "dvae.decoder_width = {}", v.decoder_width);
        let _ = writeln!(w, "dvae.fold_hidden = {}", v.fold_hidden);
        let _ = writeln!(w, "dvae.chamfer_norm = {}", norm_name(v.chamfer_norm));
        let scope = match v.chamfer_scope {
            ChamferScope::Whole => "whole",
            ChamferScope::Patch => "patch",
        };
        let _ = writeln!(w, "dvae.chamfer_scope = {scope}");

        let t = &self.dvae_train;
        optim_text(w, "dvae_train", &t.optim);
        let _ = writeln!(w, "dvae_train.kl_flat_steps = {}", t.kl.flat_steps);
        let _ = writeln!(w, "dvae_train.kl_ramp_steps = {}", t.kl.ramp_steps);
        let _ = writeln!(w, "dvae_train.kl_final_weight = {}", t.kl.final_weight);
        let _ = writeln!(w, "dvae_train.tau_start = {}", t.temperature.start);
        let _ = writeln!(w, "dvae_train.tau_end = {}", t.temperature.end);
        let _ = writeln!(
            w,
            "dvae_train.tau_decay_steps = {}",
            t.temperature.decay_steps
        );
        let shape = match t.temperature.shape {
            DecayShape::Linear => "linear",
            DecayShape::Cosine => "cosine",
        };
        let _ = writeln!(w, "dvae_train.tau_shape = {shape}");
        let _ = writeln!(w, "dvae_train.gumbel_noise = {}", t.gumbel_noise);
        let sampling = match t.patch_sampling {
            PatchSampling::PerStep => "per_step",
            PatchSampling::Fixed => "fixed",
        };
        let _ = writeln!(w, "dvae_train.patch_sampling = {sampling}");
        let form = match t.kl_form {
            KlForm::PerPatch => "per_patch",
            KlForm::Aggregate => "aggregate",
        };
        let _ = writeln!(w, "dvae_train.kl_form = {form}");

        let g = &self.gpm;
        let _ = writeln!(w, "gpm.dim = {}", g.dim);
        let _ = writeln!(w, "gpm.depth = {}", g.depth);
        let _ = writeln!(w, "gpm.heads = {}", g.heads);
        let _ = writeln!(w, "gpm.mlp_ratio = {}", g.mlp_ratio);
        let _ = writeln!(w, "gpm.drop_path = {}", g.drop_path);
        let pos = match g.pos_embed {
            PosEmbedKind::Mlp => "mlp",
            PosEmbedKind::Table => "table",
        };
        let _ = writeln!(w, "gpm.pos_embed = {pos}");
        let _ = writeln!(w, "gpm.input_dim = {}", g.input_dim);
        let _ = writeln!(w, "gpm.vocab = {}", g.vocab);
        let _ = writeln!(w, "gpm.groups = {}", g.groups);
        let _ = writeln!(w, "gpm.w_ae = {}", g.w_ae);
        let _ = writeln!(w, "gpm.w_ar = {}", g.w_ar);
        let ar = match g.ar_loss {
            ArLossMode::Masked => "masked",
            ArLossMode::All => "all",
        };
        let _ = writeln!(w, "gpm.ar_loss = {ar}");
        let order = match g.order {
            SequenceOrder::AThenB => "ab",
            SequenceOrder::BThenA => "ba",
        };
        let _ = writeln!(w, "gpm.order = {order}");
        let _ = writeln!(w, "gpm.mask_min = {}", g.mask_ratio.0);
        let _ = writeln!(w, "gpm.mask_max = {}", g.mask_ratio.1);

        optim_text(w, "gpm_train", &self.gpm_train.optim);
        let _ = writeln!(w, "gpm_train.patch_seed = {}", self.gpm_train.patch_seed);

        let c = &self.classify;
        optim_text(w, "classify", &c.run.optim);
        let _ = writeln!(w, "classify.freeze_backbone = {}", c.run.freeze_backbone);
        let _ = writeln!(w, "classify.patch_seed = {}", c.run.patch_seed);
        let _ = writeln!(w, "classify.families = {}", families_text(&c.families));
        let _ = writeln!(w, "classify.train_per_class = {}", c.train_per_class);
        let _ = writeln!(w, "classify.test_per_class = {}", c.test_per_class);
        let _ = writeln!(w, "classify.baseline_heads = {}", c.baseline_heads);

        let f = &self.few_shot;
        optim_text(w, "few_shot", &f.run.optim);
        let _ = writeln!(w, "few_shot.freeze_backbone = {}", f.run.freeze_backbone);
        let _ = writeln!(w, "few_shot.patch_seed = {}", f.run.patch_seed);
        let _ = writeln!(w, "few_shot.rotation_copies = {}", f.run.rotation_copies);
        let _ = writeln!(w, "few_shot.families = {}", families_text(&f.families));
        let _ = writeln!(w, "few_shot.per_class = {}", f.per_class);
        let _ = writeln!(w, "few_shot.way = {}", f.way);
        let _ = writeln!(w, "few_shot.shot = {}", f.shot);
        let _ = writeln!(w, "few_shot.runs = {}", f.runs);

        let gen = &self.generate;
        let mode = match gen.policy.mode {
            SamplingMode::Greedy => "greedy".to_string(),
            SamplingMode::TopK(k) => format!("top_k:{k}"),
            SamplingMode::Temperature => "temperature".to_string(),
        };
        let _ = writeln!(w, "generate.mode = {mode}");
        let _ = writeln!(w, "generate.temperature = {}", gen.policy.temperature);
        let _ = writeln!(w, "generate.seed = {}", gen.policy.seed);
        let _ = writeln!(w, "generate.mask_ratio = {}", gen.mask_ratio);
        let _ = writeln!(w, "generate.unconditional = {}", gen.unconditional);
        let _ = writeln!(w, "generate.count = {}", gen.count);
        s
    }
}

/// Writes `key = value` lines, the grammar of config files.
pub fn format_report(pairs: &[(&str, String)]) -> String {
    let mut s = String::new();
    for (k, v) in pairs {
        let _ = writeln!(s, "{k} = {v}");
    }
    s
}

/// Reads a `key = value` report back into ordered pairs.
pub fn parse_report(text: &str) -> Result<Vec<(String, String)>> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.split('#').next().unwrap_or("").trim()))
        .filter(|(_, l)| !l.is_empty())
        .map(|(line, l)| {
            l.split_once('=')
                .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
                .ok_or_else(|| cfg_err(l, line, "expected `key = value`"))
        })
        .collect()
}
