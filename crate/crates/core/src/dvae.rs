//! Discrete VAE point tokenizer.
//!
//! A mini-PointNet embeds every patch, an EdgeConv stack over the patch
//! embeddings produces logits over a learnable codebook, and a folding
//! decoder turns code vectors back into points around the patch centers.

use std::str::FromStr;
use std::sync::Arc;

use gpm_nn::params::uniform;
use gpm_nn::{
    gumbel_noise, gumbel_softmax, ChamferNorm, Graph, ParamId, ParamStore, Real, Tensor, Var,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, GpmError, Result};
use crate::geometry::{self, build_patches, PatchSet, Point, PointCloud};
use crate::layers::{Bind, EdgeConvStack, Init, Linear, Mlp};

/// Which point sets the Chamfer term compares.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ChamferScope {
    /// Whole reconstruction against the whole input cloud.
    #[default]
    Whole,
    /// Each decoded patch against its own source patch.
    Patch,
}

impl FromStr for ChamferScope {
    type Err = GpmError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "whole" => Ok(Self::Whole),
            "patch" => Ok(Self::Patch),
            _ => Err(invalid(format!(
                "unknown chamfer scope `{s}` (whole|patch)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DvaeConfig {
    /// Codebook size S.
    pub vocab: usize,
    /// Code vector width d_z.
    pub code_dim: usize,
    /// Patch embedding width d_h.
    pub hidden: usize,
    /// Patches per cloud m.
    pub groups: usize,
    /// Points per patch k.
    pub group_size: usize,
    /// Neighbours in the EdgeConv feature graph.
    pub graph_k: usize,
    pub edge_width: usize,
    pub edge_depth: usize,
    pub decoder_width: usize,
    pub fold_hidden: usize,
    pub chamfer_norm: ChamferNorm,
    pub chamfer_scope: ChamferScope,
}

impl Default for DvaeConfig {
    fn default() -> Self {
        Self {
            vocab: 256,
            code_dim: 64,
            hidden: 64,
            groups: 32,
            group_size: 16,
            graph_k: 4,
            edge_width: 64,
            edge_depth: 4,
            decoder_width: 128,
            fold_hidden: 128,
            chamfer_norm: ChamferNorm::Euclidean,
            chamfer_scope: ChamferScope::Whole,
        }
    }
}

impl DvaeConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab", self.vocab),
            ("code_dim", self.code_dim),
            ("hidden", self.hidden),
            ("groups", self.groups),
            ("group_size", self.group_size),
            ("graph_k", self.graph_k),
            ("edge_width", self.edge_width),
            ("edge_depth", self.edge_depth),
            ("decoder_width", self.decoder_width),
            ("fold_hidden", self.fold_hidden),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(invalid(format!("dvae.{name} must be positive")));
        }
        if self.vocab < 2 {
            return Err(invalid("dvae.vocab must be at least 2"));
        }
        if self.hidden < 2 || self.hidden % 2 != 0 {
            return Err(invalid("dvae.hidden must be even"));
        }
        Ok(())
    }

    /// Side of the folding grid: the smallest square with at least `k` points.
    pub fn grid_side(&self) -> usize {
        (1..)
            .find(|s| s * s >= self.group_size)
            .expect("grid side exists")
    }
}

/// The fixed 2D folding grid: row-major `side x side` points spanning
/// `[-0.5, 0.5]^2`, truncated to the first `k`.
pub fn folding_grid(k: usize) -> Vec<[f64; 2]> {
    let side = (1..).find(|s| s * s >= k).expect("grid side exists");
    let coord = |i: usize| {
        if side == 1 {
            0.0
        } else {
            -0.5 + i as f64 / (side - 1) as f64
        }
    };
    (0..k).map(|t| [coord(t % side), coord(t / side)]).collect()
}

/// Shared per-point MLP, max-pool, concatenation of the pooled feature to
/// every point, a second MLP and a final max-pool.
#[derive(Clone, Debug)]
pub struct MiniPointNet {
    pub first: Mlp,
    pub second: Mlp,
}

impl MiniPointNet {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        hidden: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let half = hidden / 2;
        Ok(Self {
            first: Mlp::new(
                store,
                &format!("{name}.first"),
                &[3, half, half],
                Init::FanIn,
                true,
                rng,
            )?,
            second: Mlp::new(
                store,
                &format!("{name}.second"),
                &[2 * half, hidden, hidden],
                Init::FanIn,
                true,
                rng,
            )?,
        })
    }

    /// `points [p * k, 3]` (p patches of k points) to `[p, hidden]`.
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        b: &Bind<T>,
        points: Var,
        k: usize,
    ) -> Result<Var> {
        let local = self.first.forward(g, b, points)?;
        let pooled = g.segment_max(local, k)?;
        let global = g.repeat_rows(pooled, k)?;
        let both = g.concat_cols(&[global, local])?;
        let h = self.second.forward(g, b, both)?;
        Ok(g.segment_max(h, k)?)
    }
}

/// Patches of a batch of clouds, laid out as stacked rows.
#[derive(Clone, Debug)]
pub struct PatchBatch<T> {
    /// Center-relative patch points `[b * m * k, 3]`.
    pub patches: Tensor<T>,
    /// `[b * m, 3]`.
    pub centers: Tensor<T>,
    /// Union of each item's patches in absolute coordinates, `[m * k, 3]`
    /// per item: the reconstruction target.
    pub targets: Vec<Tensor<T>>,
    pub groups: usize,
    pub group_size: usize,
}

pub fn points_tensor<T: Real>(points: &[Point]) -> Tensor<T> {
    Tensor::from_fn(&[points.len(), 3], |i| T::of(points[i / 3][i % 3]))
}

pub fn tensor_points<T: Real>(t: &Tensor<T>) -> Vec<Point> {
    t.data()
        .chunks(3)
        .map(|r| [r[0].f64(), r[1].f64(), r[2].f64()])
        .collect()
}

impl<T: Real> PatchBatch<T> {
    pub fn new(sets: &[&PatchSet]) -> Result<Self> {
        let first = sets.first().ok_or_else(|| invalid("empty patch batch"))?;
        let (m, k) = (first.num_groups(), first.group_size());
        if sets
            .iter()
            .any(|s| s.num_groups() != m || s.group_size() != k)
        {
            return Err(invalid("patch batch items disagree in shape"));
        }
        let patch_pts: Vec<Point> = sets
            .iter()
            .flat_map(|s| s.patches.iter().flatten().copied())
            .collect();
        let centers: Vec<Point> = sets
            .iter()
            .flat_map(|s| s.centers.iter().copied())
            .collect();
        Ok(Self {
            patches: points_tensor(&patch_pts),
            centers: points_tensor(&centers),
            targets: sets
                .iter()
                .map(|s| points_tensor(&s.union_points()))
                .collect(),
            groups: m,
            group_size: k,
        })
    }

    pub fn batch_size(&self) -> usize {
        self.targets.len()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum QuantizeMode {
    Soft,
    Hard,
}

/// Per-patch codebook indices, plus the soft assignment distributions when
/// produced during training.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence {
    pub tokens: Vec<usize>,
    pub soft_assignments: Option<Vec<Vec<f64>>>,
}

impl TokenSequence {
    pub fn new(tokens: Vec<usize>, vocab: usize) -> Result<Self> {
        if let Some(t) = tokens.iter().find(|t| **t >= vocab) {
            return Err(invalid(format!(
                "token {t} out of range for vocabulary {vocab}"
            )));
        }
        Ok(Self {
            tokens,
            soft_assignments: None,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Outputs of one dVAE forward pass.
pub struct DvaeForward {
    pub logits: Var,
    pub code_inputs: Var,
    pub tokens: Vec<usize>,
    pub offsets: Var,
    pub recon: Var,
}

/// dVAE architecture: parameter handles and configuration.
#[derive(Clone, Debug)]
pub struct Dvae {
    pub config: DvaeConfig,
    pub embed: MiniPointNet,
    pub tokenizer: EdgeConvStack,
    pub head: Linear,
    pub codebook: ParamId,
    pub decoder_graph: EdgeConvStack,
    pub decoder_proj: Linear,
    pub fold1: Mlp,
    pub fold2: Mlp,
}

impl Dvae {
    pub fn new<T: Real>(
        config: DvaeConfig,
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let embed = MiniPointNet::new(store, "dvae.embed", c.hidden, rng)?;
        let tokenizer = EdgeConvStack::new(
            store,
            "dvae.tokenizer",
            c.hidden,
            c.edge_width,
            c.edge_depth,
            c.graph_k,
            rng,
        )?;
        let head = Linear::new(
            store,
            "dvae.head",
            tokenizer.out_width(),
            c.vocab,
            Init::FanIn,
            rng,
        )?;
        let bound = 1.0 / (c.code_dim as f64).sqrt();
        let codebook = store.add("dvae.codebook", uniform(&[c.vocab, c.code_dim], bound, rng))?;
        let decoder_graph = EdgeConvStack::new(
            store,
            "dvae.decoder.graph",
            c.code_dim,
            c.edge_width,
            c.edge_depth,
            c.graph_k,
            rng,
        )?;
        let decoder_proj = Linear::new(
            store,
            "dvae.decoder.proj",
            decoder_graph.out_width(),
            c.decoder_width,
            Init::FanIn,
            rng,
        )?;
        let f = c.decoder_width;
        let h = c.fold_hidden;
        let fold1 = Mlp::new(
            store,
            "dvae.decoder.fold1",
            &[f + 2, h, h, 3],
            Init::FanIn,
            false,
            rng,
        )?;
        let fold2 = Mlp::new(
            store,
            "dvae.decoder.fold2",
            &[f + 3, h, h, 3],
            Init::FanIn,
            false,
            rng,
        )?;
        Ok(Self {
            config,
            embed,
            tokenizer,
            head,
            codebook,
            decoder_graph,
            decoder_proj,
            fold1,
            fold2,
        })
    }

    /// Patch points `[p * k, 3]` to embeddings `[p, d_h]`.
    pub fn embed<T: Real>(&self, g: &mut Graph<T>, b: &Bind<T>, patches: Var) -> Result<Var> {
        self.embed.forward(g, b, patches, self.config.group_size)
    }

    /// Embeddings `[b * m, d_h]` to logits `[b * m, S]`; the feature graph is
    /// built within each cloud's `m` rows.
    pub fn logits<T: Real>(&self, g: &mut Graph<T>, b: &Bind<T>, h: Var, m: usize) -> Result<Var> {
        let feat = self.tokenizer.forward(g, b, h, m)?;
        self.head.forward(g, b, feat)
    }

    /// Code vectors for `logits`. Soft mode mixes codebook rows with a
    /// Gumbel-softmax sample; hard mode picks the argmax row. `noise` is
    /// added to the logits in either mode. Tokens are the argmax of the
    /// perturbed logits.
    pub fn quantize<T: Real>(
        &self,
        g: &mut Graph<T>,
        b: &Bind<T>,
        logits: Var,
        tau: f64,
        mode: QuantizeMode,
        noise: Option<Tensor<T>>,
    ) -> Result<(Var, Vec<usize>)> {
        let codebook = b.var(g, self.codebook);
        match mode {
            QuantizeMode::Soft => {
                let q = gumbel_softmax(g, logits, tau, false, noise)?;
                let tokens = g.value(q).argmax_rows();
                Ok((g.matmul(q, codebook)?, tokens))
            }
            QuantizeMode::Hard => {
                if !(tau > 0.0) {
                    return Err(invalid(format!("temperature must be positive, got {tau}")));
                }
                let mut perturbed = g.value(logits).clone();
                if let Some(n) = noise {
                    if n.shape() != perturbed.shape() {
                        return Err(invalid("quantize: noise shape mismatch"));
                    }
                    perturbed
                        .data_mut()
                        .iter_mut()
                        .zip(n.data())
                        .for_each(|(a, b)| *a = *a + *b);
                }
                let tokens = perturbed.argmax_rows();
                Ok((g.gather_rows(codebook, Arc::new(tokens.clone()))?, tokens))
            }
        }
    }

    /// Code rows for explicit token ids.
    pub fn codes_for<T: Real>(
        &self,
        g: &mut Graph<T>,
        b: &Bind<T>,
        tokens: &[usize],
    ) -> Result<Var> {
        let codebook = b.var(g, self.codebook);
        Ok(g.gather_rows(codebook, Arc::new(tokens.to_vec()))?)
    }

    /// Code inputs `[b * m, d_z]` and centers `[b * m, 3]` to per-point
    /// offsets and the reconstruction `offsets + center`, both `[b * m * k, 3]`.
    pub fn decode<T: Real>(
        &self,
        g: &mut Graph<T>,
        b: &Bind<T>,
        codes: Var,
        centers: &Tensor<T>,
        m: usize,
    ) -> Result<(Var, Var)> {
        let k = self.config.group_size;
        let rows = g.dims2(codes)?.0;
        if centers.shape() != [rows, 3] {
            return Err(invalid(format!(
                "decode: centers {:?} for {rows} codes",
                centers.shape()
            )));
        }
        let ctx = self.decoder_graph.forward(g, b, codes, m)?;
        let feat = self.decoder_proj.forward(g, b, ctx)?;
        let feat = g.repeat_rows(feat, k)?;
        let grid: Vec<[f64; 2]> = folding_grid(k);
        let grid = g.constant(Tensor::from_fn(&[rows * k, 2], |i| {
            T::of(grid[(i / 2) % k][i % 2])
        }));
        let in1 = g.concat_cols(&[feat, grid])?;
        let fold1 = self.fold1.forward(g, b, in1)?;
        let in2 = g.concat_cols(&[feat, fold1])?;
        let offsets = self.fold2.forward(g, b, in2)?;
        let rep = Tensor::from_fn(&[rows * k, 3], |i| centers.data()[(i / 3 / k) * 3 + i % 3]);
        let rep = g.constant(rep);
        let recon = g.add(offsets, rep)?;
        Ok((offsets, recon))
    }

    /// Full pass on a batch: embed, tokenize, quantize, decode. With
    /// `noisy`, Gumbel noise is drawn from the graph's generator.
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        b: &Bind<T>,
        batch: &PatchBatch<T>,
        tau: f64,
        mode: QuantizeMode,
        noisy: bool,
    ) -> Result<DvaeForward> {
        let m = batch.groups;
        let pts = g.constant(batch.patches.clone());
        let h = self.embed(g, b, pts)?;
        let logits = self.logits(g, b, h, m)?;
        let noise = if noisy {
            let shape = g.shape(logits).to_vec();
            Some(gumbel_noise(&shape, g.rng()))
        } else {
            None
        };
        let (code_inputs, tokens) = self.quantize(g, b, logits, tau, mode, noise)?;
        let (offsets, recon) = self.decode(g, b, code_inputs, &batch.centers, m)?;
        Ok(DvaeForward {
            logits,
            code_inputs,
            tokens,
            offsets,
            recon,
        })
    }

    /// Mean Chamfer term of a batch under the configured norm and scope.
    pub fn chamfer_term<T: Real>(
        &self,
        g: &mut Graph<T>,
        recon: Var,
        batch: &PatchBatch<T>,
    ) -> Result<Var> {
        let (m, k) = (batch.groups, batch.group_size);
        let norm = self.config.chamfer_norm;
        let mut terms = Vec::new();
        match self.config.chamfer_scope {
            ChamferScope::Whole => {
                for (i, target) in batch.targets.iter().enumerate() {
                    let r = g.slice_rows(recon, i * m * k..(i + 1) * m * k)?;
                    let c = g.constant(target.clone());
                    terms.push(g.chamfer(r, c, norm)?);
                }
            }
            ChamferScope::Patch => {
                let rows = batch.batch_size() * m;
                for p in 0..rows {
                    let r = g.slice_rows(recon, p * k..(p + 1) * k)?;
                    let src = Tensor::from_fn(&[k, 3], |i| {
                        batch.patches.data()[p * k * 3 + i] + batch.centers.data()[p * 3 + i % 3]
                    });
                    let c = g.constant(src);
                    terms.push(g.chamfer(r, c, norm)?);
                }
            }
        }
        let n = terms.len();
        let mut total = terms[0];
        for t in &terms[1..] {
            total = g.add(total, *t)?;
        }
        Ok(g.scale(total, 1.0 / n as f64)?)
    }
}

/// KL divergence from `softmax(logits)` to the uniform distribution over
/// S codes, averaged over rows: `mean_i sum_s q log q + ln S`.
pub fn kl_to_uniform_graph<T: Real>(g: &mut Graph<T>, logits: Var) -> Result<Var> {
    let (rows, s) = g.dims2(logits)?;
    let q = g.softmax(logits)?;
    let lq = g.log_softmax(logits)?;
    let prod = g.mul(q, lq)?;
    let total = g.sum(prod)?;
    let per_row = g.scale(total, 1.0 / rows as f64)?;
    let ln_s = g.constant(Tensor::scalar(T::of((s as f64).ln())));
    Ok(g.add(per_row, ln_s)?)
}

/// KL divergence from the batch-averaged code distribution
/// `mean_i softmax(logits)_i` to the uniform distribution. Zero whenever
/// codes are used evenly across the batch, however peaked each row is.
pub fn kl_aggregate_to_uniform_graph<T: Real>(g: &mut Graph<T>, logits: Var) -> Result<Var> {
    let (rows, s) = g.dims2(logits)?;
    let q = g.softmax(logits)?;
    let mean = g.segment_mean(q, rows)?;
    let lq = g.ln(mean)?;
    let prod = g.mul(mean, lq)?;
    let total = g.sum(prod)?;
    let ln_s = g.constant(Tensor::scalar(T::of((s as f64).ln())));
    Ok(g.add(total, ln_s)?)
}

/// Direct evaluation of the same KL on explicit probability vectors, with
/// `0 ln 0 = 0`.
pub fn kl_to_uniform(assignments: &[Vec<f64>]) -> Result<f64> {
    if assignments.is_empty() {
        return Err(invalid("kl_to_uniform: no assignments"));
    }
    let mut total = 0.0;
    for q in assignments {
        let ln_s = (q.len() as f64).ln();
        total += q
            .iter()
            .filter(|p| **p > 0.0)
            .map(|p| p * (p.ln() + ln_s))
            .sum::<f64>();
    }
    Ok(total / assignments.len() as f64)
}

/// `chamfer_l1(input, recon) + kl_weight * kl_to_uniform(soft)`.
pub fn dvae_loss(
    input: &PointCloud,
    recon: &PointCloud,
    soft: &[Vec<f64>],
    kl_weight: f64,
) -> Result<f64> {
    if !(kl_weight >= 0.0) {
        return Err(invalid(format!("kl weight {kl_weight} must be >= 0")));
    }
    Ok(geometry::chamfer_l1(recon, input) + kl_weight * kl_to_uniform(soft)?)
}

/// A dVAE with single-precision weights and a readiness flag.
#[derive(Clone, Debug)]
pub struct DvaeModel {
    pub arch: Dvae,
    pub params: ParamStore<f32>,
    ready: bool,
}

impl DvaeModel {
    pub fn new(config: DvaeConfig, seed: u64) -> Result<Self> {
        let mut params = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let arch = Dvae::new(config, &mut params, &mut rng)?;
        Ok(Self {
            arch,
            params,
            ready: false,
        })
    }

    pub fn config(&self) -> &DvaeConfig {
        &self.arch.config
    }

    pub fn is_ready(&self) -> bool {
        self.ready
    }

    /// Marks the weights as trained; [`DvaeModel::tokenize`] refuses to run
    /// before this.
    pub fn mark_ready(&mut self) {
        self.ready = true;
    }

    fn check_ready(&self) -> Result<()> {
        if self.ready {
            Ok(())
        } else {
            Err(GpmError::NotReady(
                "dVAE weights are untrained or not loaded".into(),
            ))
        }
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        Ok(gpm_nn::checkpoint::save_params(path, &self.params)?)
    }

    /// Builds the architecture for `config` and loads trained weights.
    pub fn load(config: DvaeConfig, path: &std::path::Path) -> Result<Self> {
        let mut model = Self::new(config, 0)?;
        gpm_nn::checkpoint::load_params(path, &mut model.params)?;
        model.ready = true;
        Ok(model)
    }

    pub fn patches(&self, cloud: &PointCloud, seed: u64) -> Result<PatchSet> {
        build_patches(
            cloud,
            self.arch.config.groups,
            self.arch.config.group_size,
            seed,
        )
    }

    /// Patch embeddings `[m, d_h]` of one patch set.
    pub fn embeddings(&self, set: &PatchSet) -> Result<Tensor<f32>> {
        let mut g = Graph::eval();
        let b = Bind::frozen(&self.params);
        let pts: Vec<Point> = set.patches.iter().flatten().copied().collect();
        let x = g.constant(points_tensor(&pts));
        let h = self.arch.embed(&mut g, &b, x)?;
        Ok(g.value(h).clone())
    }

    /// Hard tokens of precomputed embeddings `[m, d_h]`.
    pub fn tokens_from_embeddings(&self, h: &Tensor<f32>) -> Result<TokenSequence> {
        self.check_ready()?;
        self.hard_tokens(h)
    }

    fn hard_tokens(&self, h: &Tensor<f32>) -> Result<TokenSequence> {
        let mut g = Graph::eval();
        let b = Bind::frozen(&self.params);
        let hv = g.constant(h.clone());
        let m = h.dims2()?.0;
        let logits = self.arch.logits(&mut g, &b, hv, m)?;
        TokenSequence::new(g.value(logits).argmax_rows(), self.arch.config.vocab)
    }

    /// Patches the cloud, embeds, runs the tokenizer and takes the argmax;
    /// no Gumbel noise. The seed only affects the FPS start.
    pub fn tokenize(&self, cloud: &PointCloud, seed: u64) -> Result<(TokenSequence, PatchSet)> {
        self.check_ready()?;
        self.tokenize_unchecked(cloud, seed)
    }

    /// [`DvaeModel::tokenize`] without the readiness check, for monitoring
    /// reconstructions while training.
    pub fn tokenize_unchecked(
        &self,
        cloud: &PointCloud,
        seed: u64,
    ) -> Result<(TokenSequence, PatchSet)> {
        let set = self.patches(cloud, seed)?;
        let h = self.embeddings(&set)?;
        Ok((self.hard_tokens(&h)?, set))
    }

    /// Codebook rows `[len, d_z]` for the given tokens.
    pub fn code_vectors(&self, tokens: &[usize]) -> Result<Tensor<f32>> {
        let mut g = Graph::eval();
        let b = Bind::frozen(&self.params);
        let v = self.arch.codes_for(&mut g, &b, tokens)?;
        Ok(g.value(v).clone())
    }

    /// Decodes one token sequence around its centers.
    pub fn decode_tokens(&self, tokens: &[usize], centers: &[Point]) -> Result<PointCloud> {
        if tokens.len() != centers.len() {
            return Err(invalid(format!(
                "{} tokens for {} centers",
                tokens.len(),
                centers.len()
            )));
        }
        TokenSequence::new(tokens.to_vec(), self.arch.config.vocab)?;
        let mut g = Graph::eval();
        let b = Bind::frozen(&self.params);
        let codes = self.arch.codes_for(&mut g, &b, tokens)?;
        let (_, recon) =
            self.arch
                .decode(&mut g, &b, codes, &points_tensor(centers), tokens.len())?;
        PointCloud::new(tensor_points(g.value(recon)))
    }

    /// Tokenize then decode.
    pub fn reconstruct(
        &self,
        cloud: &PointCloud,
        seed: u64,
    ) -> Result<(PointCloud, TokenSequence, PatchSet)> {
        self.check_ready()?;
        self.reconstruct_unchecked(cloud, seed)
    }

    pub fn reconstruct_unchecked(
        &self,
        cloud: &PointCloud,
        seed: u64,
    ) -> Result<(PointCloud, TokenSequence, PatchSet)> {
        let (tokens, set) = self.tokenize_unchecked(cloud, seed)?;
        let recon = self.decode_tokens(&tokens.tokens, &set.centers)?;
        Ok((recon, tokens, set))
    }
}
