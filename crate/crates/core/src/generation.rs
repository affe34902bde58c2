//! Autoregressive token generation through PartB and decoding of the
//! sampled sequences back to points.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::str::FromStr;

use gpm_nn::{Graph, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::dvae::{DvaeModel, TokenSequence};
use crate::error::{invalid, GpmError, Result};
use crate::geometry::{fps, Point, PointCloud};
use crate::layers::Bind;
use crate::model::{GpmInput, GpmModel};
use crate::training::stream_rng;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SamplingMode {
    Greedy,
    TopK(usize),
    Temperature,
}

/// How the next token is drawn from a row of logits.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SamplingPolicy {
    pub mode: SamplingMode,
    pub temperature: f64,
    pub seed: u64,
}

impl Default for SamplingPolicy {
    fn default() -> Self {
        Self {
            mode: SamplingMode::TopK(8),
            temperature: 1.0,
            seed: 0,
        }
    }
}

impl SamplingPolicy {
    pub fn greedy() -> Self {
        Self {
            mode: SamplingMode::Greedy,
            ..Self::default()
        }
    }

    pub fn validate(&self, vocab: usize) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(invalid(format!(
                "sampling temperature must be positive, got {}",
                self.temperature
            )));
        }
        if let SamplingMode::TopK(k) = self.mode {
            if k == 0 {
                return Err(GpmError::ContractViolation(
                    "top-k sampling over an empty candidate set".into(),
                ));
            }
            if k > vocab {
                return Err(invalid(format!(
                    "top-k {k} exceeds the vocabulary of {vocab}"
                )));
            }
        }
        Ok(())
    }
}

impl FromStr for SamplingMode {
    type Err = GpmError;

    /// `greedy`, `temperature`, or `top_k` / `top_k:K` (default K = 8).
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "greedy" => Ok(Self::Greedy),
            "temperature" => Ok(Self::Temperature),
            "top_k" => Ok(Self::TopK(8)),
            _ => match s.strip_prefix("top_k:") {
                Some(k) => k
                    .parse()
                    .map(Self::TopK)
                    .map_err(|_| invalid(format!("bad top-k '{k}'"))),
                None => Err(invalid(format!(
                    "unknown sampling mode '{s}' (greedy|top_k[:K]|temperature)"
                ))),
            },
        }
    }
}

/// Index of the largest logit, lowest index on ties.
fn argmax(logits: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in logits.iter().enumerate() {
        if *v > logits[best] {
            best = i;
        }
    }
    best
}

/// Draws one token from `logits` under `policy`.
pub fn sample_token(
    logits: &[f64],
    policy: &SamplingPolicy,
    rng: &mut ChaCha8Rng,
) -> Result<usize> {
    if logits.is_empty() {
        return Err(GpmError::ContractViolation(
            "sampling from an empty logit row".into(),
        ));
    }
    policy.validate(logits.len())?;
    let candidates: Vec<usize> = match policy.mode {
        SamplingMode::Greedy => return Ok(argmax(logits)),
        SamplingMode::Temperature => (0..logits.len()).collect(),
        SamplingMode::TopK(k) => {
            let mut order: Vec<usize> = (0..logits.len()).collect();
            order.sort_by(|a, b| logits[*b].total_cmp(&logits[*a]).then(a.cmp(b)));
            order.truncate(k);
            order
        }
    };
    let top = candidates
        .iter()
        .map(|i| logits[*i])
        .fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = candidates
        .iter()
        .map(|i| ((logits[*i] - top) / policy.temperature).exp())
        .collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (c, w) in candidates.iter().zip(&weights) {
        if u < *w {
            return Ok(*c);
        }
        u -= w;
    }
    Ok(*candidates.last().expect("non-empty candidates"))
}

/// One sampled position.
#[derive(Clone, Debug, PartialEq)]
pub struct TraceEntry {
    pub position: usize,
    pub token: usize,
    /// Raw AR logit of the chosen token.
    pub logit: f64,
}

#[derive(Clone, Debug)]
pub struct Generation {
    pub tokens: TokenSequence,
    pub cloud: PointCloud,
    pub centers: Vec<Point>,
    pub trace: Vec<TraceEntry>,
}

/// Tab-separated trace: a header, then `step position token logit`.
pub fn format_trace(trace: &[TraceEntry]) -> String {
    let mut s = String::from("step\tposition\ttoken\tlogit\n");
    for (i, e) in trace.iter().enumerate() {
        let _ = writeln!(s, "{i}\t{}\t{}\t{}", e.position, e.token, e.logit);
    }
    s
}

/// Trained models used for generation.
#[derive(Clone, Copy)]
pub struct Models<'a> {
    pub dvae: &'a DvaeModel,
    pub gpm: &'a GpmModel,
}

impl Models<'_> {
    fn check(&self) -> Result<()> {
        if !self.dvae.is_ready() {
            return Err(GpmError::NotReady(
                "generation needs trained dVAE weights".into(),
            ));
        }
        let (dc, gc) = (self.dvae.config(), self.gpm.config());
        if dc.vocab != gc.vocab || dc.code_dim != gc.input_dim || dc.hidden != gc.input_dim {
            return Err(invalid(
                "dVAE and transformer configurations are incompatible",
            ));
        }
        Ok(())
    }
}

/// Tokens fixed in advance at chosen positions instead of being sampled.
/// Sampling at every other position is unaffected.
pub type ForcedTokens = BTreeMap<usize, usize>;

/// Rolls PartB over `positions` in ascending order. `known` holds the
/// PartB content for positions that are not generated.
fn roll(
    models: Models<'_>,
    base: &GpmInput<f32>,
    known: &Tensor<f32>,
    positions: &[usize],
    policy: &SamplingPolicy,
    forced: &ForcedTokens,
) -> Result<(Vec<usize>, Vec<TraceEntry>)> {
    let m = base.groups();
    let w = models.gpm.config().input_dim;
    let mut tokens = base.labels.clone();
    let mut content = known.data().to_vec();
    let mut trace = Vec::with_capacity(positions.len());
    let bind = Bind::frozen(&models.gpm.params);
    for (step, &j) in positions.iter().enumerate() {
        let mut input = base.clone();
        if m > 1 {
            input.part_b_override = Some(Tensor::new(
                vec![m - 1, w],
                content[..(m - 1) * w].to_vec(),
            )?);
        }
        let mut g = Graph::eval();
        let out = models
            .gpm
            .arch
            .forward(&mut g, &bind, std::slice::from_ref(&input))?;
        let logits = g.value(out.ar_logits);
        let row: Vec<f64> = logits.row(j).iter().map(|v| f64::from(*v)).collect();
        let token = match forced.get(&j) {
            Some(t) if *t < row.len() => *t,
            Some(t) => {
                return Err(GpmError::ContractViolation(format!(
                    "forced token {t} outside the vocabulary"
                )))
            }
            None => sample_token(&row, policy, &mut stream_rng(policy.seed, step as u64))?,
        };
        trace.push(TraceEntry {
            position: j,
            token,
            logit: row[token],
        });
        tokens[j] = token;
        if j + 1 < m {
            let code = models.dvae.code_vectors(&[token])?;
            content[j * w..(j + 1) * w].copy_from_slice(code.data());
        }
    }
    Ok((tokens, trace))
}

/// Tokenizes `cloud`, masks `mask_set` in PartA and regenerates the masked
/// tokens one by one through PartB, then decodes the completed sequence
/// over the original centers.
pub fn generate_masked_region(
    cloud: &PointCloud,
    mask_set: &[usize],
    policy: &SamplingPolicy,
    models: Models<'_>,
    patch_seed: u64,
) -> Result<Generation> {
    generate_masked_region_forced(
        cloud,
        mask_set,
        policy,
        models,
        patch_seed,
        &ForcedTokens::new(),
    )
}

/// [`generate_masked_region`] with some masked positions pinned to given
/// tokens.
pub fn generate_masked_region_forced(
    cloud: &PointCloud,
    mask_set: &[usize],
    policy: &SamplingPolicy,
    models: Models<'_>,
    patch_seed: u64,
    forced: &ForcedTokens,
) -> Result<Generation> {
    models.check()?;
    policy.validate(models.gpm.config().vocab)?;
    let patches = models.dvae.patches(cloud, patch_seed)?;
    let embeddings = models.dvae.embeddings(&patches)?;
    let original = models.dvae.tokens_from_embeddings(&embeddings)?.tokens;
    let m = original.len();
    let input = GpmInput::new(
        embeddings.clone(),
        patches.centers.clone(),
        original,
        mask_set.to_vec(),
    )?;
    let w = models.gpm.config().input_dim;
    // Ground truth for visible patches, zeros for masked ones until sampled.
    let mut known = embeddings.data()[..m.saturating_sub(1) * w].to_vec();
    for &j in input.mask_set.iter().filter(|j| **j + 1 < m) {
        known[j * w..(j + 1) * w].fill(0.0);
    }
    let known = Tensor::new(vec![m.saturating_sub(1), w], known)?;
    let (tokens, trace) = roll(models, &input, &known, &input.mask_set, policy, forced)?;
    let cloud = models.dvae.decode_tokens(&tokens, &patches.centers)?;
    Ok(Generation {
        tokens: TokenSequence::new(tokens, models.dvae.config().vocab)?,
        cloud,
        centers: patches.centers,
        trace,
    })
}

/// `n` points spread evenly over the unit sphere on a Fibonacci spiral.
pub fn fibonacci_sphere(n: usize) -> Vec<Point> {
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    (0..n)
        .map(|i| {
            let y = 1.0 - 2.0 * (i as f64 + 0.5) / n as f64;
            let r = (1.0 - y * y).sqrt();
            let t = golden * i as f64;
            [r * t.cos(), y, r * t.sin()]
        })
        .collect()
}

/// Points of the Fibonacci sphere used for canonical center layouts.
pub const CANONICAL_SPHERE_POINTS: usize = 1024;

/// `m` centers chosen by FPS from a fixed unit-sphere point set.
pub fn canonical_centers(m: usize) -> Result<Vec<Point>> {
    let sphere = PointCloud::new(fibonacci_sphere(CANONICAL_SPHERE_POINTS.max(m)))?;
    Ok(fps(&sphere, m, 0)?
        .into_iter()
        .map(|i| sphere.points()[i])
        .collect())
}

/// Generates all `m` tokens from a fully masked PartA and decodes them over
/// `centers`.
pub fn generate_unconditional(
    centers: &[Point],
    policy: &SamplingPolicy,
    models: Models<'_>,
) -> Result<Generation> {
    models.check()?;
    policy.validate(models.gpm.config().vocab)?;
    let m = centers.len();
    if m == 0 {
        return Err(invalid(
            "unconditional generation needs at least one center",
        ));
    }
    let w = models.gpm.config().input_dim;
    let input = GpmInput::new(
        Tensor::zeros(&[m, w]),
        centers.to_vec(),
        vec![0; m],
        (0..m).collect(),
    )?;
    let known = Tensor::zeros(&[m - 1, w]);
    let positions: Vec<usize> = (0..m).collect();
    let (tokens, trace) = roll(
        models,
        &input,
        &known,
        &positions,
        policy,
        &ForcedTokens::new(),
    )?;
    let cloud = models.dvae.decode_tokens(&tokens, centers)?;
    Ok(Generation {
        tokens: TokenSequence::new(tokens, models.dvae.config().vocab)?,
        cloud,
        centers: centers.to_vec(),
        trace,
    })
}
