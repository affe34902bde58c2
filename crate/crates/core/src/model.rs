//! The point model: one transformer over a bidirectional masked-prediction
//! segment (PartA) and a causal generation segment (PartB).
//!
//! PartA holds `[CLS]` followed by one slot per patch, masked slots carrying
//! the shared `[M]` vector. PartB holds `[S]` followed by the first `m - 1`
//! patch embeddings (teacher forcing); PartB slot `j` predicts token `j`.
//! PartA rows attend to PartA only, PartB rows attend to PartA and to their
//! own prefix.

use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use gpm_nn::params::trunc_normal;
use gpm_nn::{Graph, ParamId, ParamStore, Real, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dvae::points_tensor;
use crate::error::{invalid, GpmError, Result};
use crate::geometry::{dist2, Point};
use crate::layers::{Bind, Init, LayerNorm, Linear};

static PART_B_BUILDS: AtomicUsize = AtomicUsize::new(0);

/// Number of PartB segments assembled so far in this process.
pub fn part_b_builds() -> usize {
    PART_B_BUILDS.load(Ordering::SeqCst)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum SequenceOrder {
    /// PartA rows first, then PartB.
    #[default]
    AThenB,
    /// PartB rows first, then PartA.
    BThenA,
}

impl SequenceOrder {
    pub fn flipped(self) -> Self {
        match self {
            Self::AThenB => Self::BThenA,
            Self::BThenA => Self::AThenB,
        }
    }
}

impl FromStr for SequenceOrder {
    type Err = GpmError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ab" | "a_then_b" => Ok(Self::AThenB),
            "ba" | "b_then_a" => Ok(Self::BThenA),
            _ => Err(invalid(format!("unknown sequence order `{s}` (ab|ba)"))),
        }
    }
}

/// Which PartB positions the autoregressive loss covers.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ArLossMode {
    #[default]
    Masked,
    All,
}

impl FromStr for ArLossMode {
    type Err = GpmError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "masked" => Ok(Self::Masked),
            "all" => Ok(Self::All),
            _ => Err(invalid(format!("unknown AR loss mode `{s}` (masked|all)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum PosEmbedKind {
    /// Two-layer MLP over the center coordinates.
    #[default]
    Mlp,
    /// Learned table indexed by patch slot.
    Table,
}

impl FromStr for PosEmbedKind {
    type Err = GpmError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mlp" => Ok(Self::Mlp),
            "table" => Ok(Self::Table),
            _ => Err(invalid(format!(
                "unknown positional embedding `{s}` (mlp|table)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GpmConfig {
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// Stochastic depth rate of the last block; earlier blocks scale
    /// linearly from zero.
    pub drop_path: f64,
    pub pos_embed: PosEmbedKind,
    /// Width of the incoming patch embeddings and code vectors.
    pub input_dim: usize,
    pub vocab: usize,
    /// Patch count; sizes the positional table.
    pub groups: usize,
    pub w_ae: f64,
    pub w_ar: f64,
    pub ar_loss: ArLossMode,
    pub order: SequenceOrder,
    pub mask_ratio: (f64, f64),
}

impl Default for GpmConfig {
    fn default() -> Self {
        Self {
            dim: 128,
            depth: 4,
            heads: 4,
            mlp_ratio: 4,
            drop_path: 0.1,
            pos_embed: PosEmbedKind::Mlp,
            input_dim: 64,
            vocab: 256,
            groups: 32,
            w_ae: 1.0,
            w_ar: 1.0,
            ar_loss: ArLossMode::Masked,
            order: SequenceOrder::AThenB,
            mask_ratio: (0.25, 0.45),
        }
    }
}

impl GpmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.depth == 0 || self.heads == 0 || self.mlp_ratio == 0 {
            return Err(invalid(
                "gpm dims, depth, heads and mlp ratio must be positive",
            ));
        }
        if self.dim % self.heads != 0 {
            return Err(invalid(format!(
                "gpm.dim {} not divisible by gpm.heads {}",
                self.dim, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.drop_path) {
            return Err(invalid("gpm.drop_path must lie in [0, 1)"));
        }
        if !(self.w_ae >= 0.0 && self.w_ar >= 0.0) {
            return Err(invalid("loss weights must be >= 0"));
        }
        let (lo, hi) = self.mask_ratio;
        if !(lo > 0.0 && lo <= hi && hi < 1.0) {
            return Err(invalid(format!(
                "mask ratio range ({lo}, {hi}) must lie inside (0, 1)"
            )));
        }
        if self.vocab < 2 || self.groups == 0 || self.input_dim == 0 {
            return Err(invalid(
                "gpm vocab, groups and input width must be positive",
            ));
        }
        Ok(())
    }
}

/// Visibility matrix over the concatenated sequence; `true` means the
/// query row may attend to the key column.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionMask {
    pub len_a: usize,
    pub len_b: usize,
    pub order: SequenceOrder,
    visible: Vec<bool>,
}

impl AttentionMask {
    pub fn len(&self) -> usize {
        self.len_a + self.len_b
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.visible[row * self.len() + col]
    }

    /// Row position of PartA slot `i` and PartB slot `j` in this order.
    pub fn row_of_a(&self, i: usize) -> usize {
        match self.order {
            SequenceOrder::AThenB => i,
            SequenceOrder::BThenA => self.len_b + i,
        }
    }

    pub fn row_of_b(&self, j: usize) -> usize {
        match self.order {
            SequenceOrder::AThenB => self.len_a + j,
            SequenceOrder::BThenA => j,
        }
    }

    /// The same visibility relation laid out in the other order.
    pub fn swapped(&self) -> AttentionMask {
        let order = self.order.flipped();
        let mut out = AttentionMask {
            len_a: self.len_a,
            len_b: self.len_b,
            order,
            visible: self.visible.clone(),
        };
        let l = self.len();
        let pos = |m: &AttentionMask, r: usize| {
            if r < m.len_a {
                m.row_of_a(r)
            } else {
                m.row_of_b(r - m.len_a)
            }
        };
        for r in 0..l {
            for c in 0..l {
                let dst = pos(&out, r) * l + pos(&out, c);
                out.visible[dst] = self.visible[pos(self, r) * l + pos(self, c)];
            }
        }
        out
    }

    /// `0` on visible entries, `-inf` on hidden ones.
    pub fn additive<T: Real>(&self) -> Tensor<T> {
        let l = self.len();
        Tensor::from_fn(&[l, l], |i| {
            if self.visible[i] {
                T::zero()
            } else {
                T::neg_infinity()
            }
        })
    }
}

/// PartA rows see exactly the PartA columns; PartB row `j` sees every
/// PartA column and PartB columns `0..=j`. Laid out PartA first.
pub fn build_attention_mask(len_a: usize, len_b: usize) -> Result<AttentionMask> {
    if len_a == 0 || len_b == 0 {
        return Err(invalid("attention mask needs non-empty PartA and PartB"));
    }
    let l = len_a + len_b;
    let mut visible = vec![false; l * l];
    for r in 0..l {
        let upto = if r < len_a { len_a } else { r + 1 };
        visible[r * l..r * l + upto].fill(true);
    }
    Ok(AttentionMask {
        len_a,
        len_b,
        order: SequenceOrder::AThenB,
        visible,
    })
}

pub fn attention_mask_for(
    len_a: usize,
    len_b: usize,
    order: SequenceOrder,
) -> Result<AttentionMask> {
    let mask = build_attention_mask(len_a, len_b)?;
    Ok(if order == SequenceOrder::BThenA {
        mask.swapped()
    } else {
        mask
    })
}

/// `round_half_up(ratio * m)` clamped to `[1, m - 1]`.
pub fn mask_count(ratio: f64, m: usize) -> usize {
    ((ratio * m as f64 + 0.5).floor() as usize).clamp(1, m.saturating_sub(1).max(1))
}

/// The `b` centers nearest to `centers[seed_center]` (itself included),
/// ties to the lowest index, returned sorted.
pub fn select_mask_region_with(
    centers: &[Point],
    ratio: f64,
    seed_center: usize,
) -> Result<Vec<usize>> {
    let m = centers.len();
    if m < 3 {
        return Err(invalid(format!(
            "mask selection needs at least 3 patches, got {m}"
        )));
    }
    if seed_center >= m {
        return Err(invalid(format!("seed center {seed_center} out of range")));
    }
    let b = mask_count(ratio, m);
    let c = centers[seed_center];
    let mut idx: Vec<usize> = (0..m).collect();
    idx.sort_by(|x, y| {
        dist2(centers[*x], c)
            .total_cmp(&dist2(centers[*y], c))
            .then(x.cmp(y))
    });
    let mut set = idx[..b].to_vec();
    set.sort_unstable();
    Ok(set)
}

/// Draws a ratio uniformly from `range` and a seed center uniformly, then
/// masks the nearest-`b` region around that center.
pub fn select_mask_region(
    centers: &[Point],
    range: (f64, f64),
    rng: &mut impl Rng,
) -> Result<Vec<usize>> {
    let (lo, hi) = range;
    if !(0.0 < lo && lo <= hi && hi < 1.0) {
        return Err(invalid(format!(
            "mask ratio range ({lo}, {hi}) must lie inside (0, 1)"
        )));
    }
    let r = if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    };
    let seed = rng.random_range(0..centers.len().max(1));
    select_mask_region_with(centers, r, seed)
}

/// Everything needed to lay out one item's PartA and PartB.
#[derive(Clone, Debug, PartialEq)]
pub struct GpmInput<T> {
    /// Ground-truth patch embeddings `[m, d_h]`.
    pub embeddings: Tensor<T>,
    pub centers: Vec<Point>,
    /// Tokenizer labels, one per patch.
    pub labels: Vec<usize>,
    /// Sorted masked patch indices.
    pub mask_set: Vec<usize>,
    /// Replacement contents for PartB slots `1..m` (`[m - 1, d_h]`); the
    /// ground-truth embeddings `0..m-1` when absent.
    pub part_b_override: Option<Tensor<T>>,
    pub order: SequenceOrder,
}

impl<T: Real> GpmInput<T> {
    pub fn new(
        embeddings: Tensor<T>,
        centers: Vec<Point>,
        labels: Vec<usize>,
        mask_set: Vec<usize>,
    ) -> Result<Self> {
        let (m, _) = embeddings.dims2()?;
        if centers.len() != m || labels.len() != m {
            return Err(invalid(format!(
                "{m} embeddings but {} centers and {} labels",
                centers.len(),
                labels.len()
            )));
        }
        if let Some(bad) = mask_set.iter().find(|i| **i >= m) {
            return Err(GpmError::ContractViolation(format!(
                "mask index {bad} out of range for {m} patches"
            )));
        }
        let mut mask_set = mask_set;
        mask_set.sort_unstable();
        mask_set.dedup();
        Ok(Self {
            embeddings,
            centers,
            labels,
            mask_set,
            part_b_override: None,
            order: SequenceOrder::AThenB,
        })
    }

    pub fn groups(&self) -> usize {
        self.centers.len()
    }

    pub fn is_masked(&self, i: usize) -> bool {
        self.mask_set.binary_search(&i).is_ok()
    }
}

/// The same input laid out in the other order.
pub fn order_swap<T: Real>(input: &GpmInput<T>) -> GpmInput<T> {
    GpmInput {
        order: input.order.flipped(),
        ..input.clone()
    }
}

#[derive(Clone, Debug)]
pub struct Block {
    pub norm1: LayerNorm,
    pub qkv: Linear,
    pub proj: Linear,
    pub norm2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
    pub drop_path: f64,
}

impl Block {
    fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        hidden: usize,
        drop_path: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let tn = Init::TruncNormal;
        Ok(Self {
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), dim)?,
            qkv: Linear::new(store, &format!("{name}.qkv"), dim, 3 * dim, tn, rng)?,
            proj: Linear::new(store, &format!("{name}.proj"), dim, dim, tn, rng)?,
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), dim)?,
            fc1: Linear::new(store, &format!("{name}.fc1"), dim, hidden, tn, rng)?,
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, dim, tn, rng)?,
            drop_path,
        })
    }

    /// Multi-head self-attention within each `len`-row item under `mask`.
    fn attention<T: Real>(
        &self,
        g: &mut Graph<T>,
        b: &Bind<T>,
        x: Var,
        len: usize,
        heads: usize,
        mask: Option<&Tensor<T>>,
    ) -> Result<Var> {
        let (rows, dim) = g.dims2(x)?;
        let hd = dim / heads;
        let qkv = self.qkv.forward(g, b, x)?;
        let scale = 1.0 / (hd as f64).sqrt();
        let mut items = Vec::with_capacity(rows / len);
        for start in (0..rows).step_by(len) {
            let r = start..start + len;
            let mut outs = Vec::with_capacity(heads);
            for h in 0..heads {
                let q = g.slice(qkv, r.clone(), h * hd..(h + 1) * hd)?;
                let k = g.slice(qkv, r.clone(), dim + h * hd..dim + (h + 1) * hd)?;
                let v = g.slice(qkv, r.clone(), 2 * dim + h * hd..2 * dim + (h + 1) * hd)?;
                let s = g.matmul_nt(q, k)?;
                let s = g.scale(s, scale)?;
                let p = g.softmax_with_additive_mask(s, mask)?;
                outs.push(g.matmul(p, v)?);
            }
            items.push(g.concat_cols(&outs)?);
        }
        let merged = if items.len() == 1 {
            items[0]
        } else {
            g.concat_rows(&items)?
        };
        self.proj.forward(g, b, merged)
    }

    /// Residual branch scaled by stochastic depth: per-item Bernoulli keep in
    /// training, the survival probability at evaluation.
    fn drop_branch<T: Real>(&self, g: &mut Graph<T>, branch: Var, len: usize) -> Result<Var> {
        if self.drop_path == 0.0 {
            return Ok(branch);
        }
        let keep = 1.0 - self.drop_path;
        let rows = g.dims2(branch)?.0;
        let factors: Vec<T> = if g.is_training() {
            (0..rows / len)
                .flat_map(|_| {
                    let f = if g.rng().random::<f64>() < keep {
                        T::one()
                    } else {
                        T::zero()
                    };
                    std::iter::repeat_n(f, len)
                })
                .collect()
        } else {
            vec![T::of(keep); rows]
        };
        Ok(g.row_scale(branch, factors)?)
    }

    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        b: &Bind<T>,
        x: Var,
        len: usize,
        heads: usize,
        mask: Option<&Tensor<T>>,
    ) -> Result<Var> {
        let h = self.norm1.forward(g, b, x)?;
        let a = self.attention(g, b, h, len, heads, mask)?;
        let a = self.drop_branch(g, a, len)?;
        let x = g.add(x, a)?;
        let h = self.norm2.forward(g, b, x)?;
        let h = self.fc1.forward(g, b, h)?;
        let h = g.gelu(h)?;
        let h = self.fc2.forward(g, b, h)?;
        let h = self.drop_branch(g, h, len)?;
        Ok(g.add(x, h)?)
    }
}

/// Per-item outputs of a full forward pass, stacked over the batch.
pub struct GpmOutput {
    /// `[b * m, S]`, PartA patch slots in patch order.
    pub ae_logits: Var,
    /// `[b * m, S]`, PartB slots in slot order.
    pub ar_logits: Var,
    /// `[b * L, D]` final normalized hidden states in sequence order.
    pub hidden: Var,
}

#[derive(Clone, Debug)]
pub enum PosEmbed {
    Mlp { fc1: Linear, fc2: Linear },
    Table { table: ParamId },
}

/// Transformer architecture: parameter handles and configuration.
#[derive(Clone, Debug)]
pub struct Gpm {
    pub config: GpmConfig,
    pub input_proj: Linear,
    pub pos: PosEmbed,
    pub cls: ParamId,
    pub mask_token: ParamId,
    pub start_token: ParamId,
    pub blocks: Vec<Block>,
    pub norm: LayerNorm,
    pub ae_head: Linear,
    pub ar_head: Linear,
}

impl Gpm {
    pub fn new<T: Real>(
        config: GpmConfig,
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        config.validate()?;
        let d = config.dim;
        let tn = Init::TruncNormal;
        let input_proj = Linear::new(store, "gpm.input_proj", config.input_dim, d, tn, rng)?;
        let pos = match config.pos_embed {
            PosEmbedKind::Mlp => PosEmbed::Mlp {
                fc1: Linear::new(store, "gpm.pos.fc1", 3, d, Init::FanIn, rng)?,
                fc2: Linear::new(store, "gpm.pos.fc2", d, d, tn, rng)?,
            },
            PosEmbedKind::Table => PosEmbed::Table {
                table: store.add(
                    "gpm.pos.table",
                    trunc_normal(&[config.groups, d], 0.02, rng),
                )?,
            },
        };
        let cls = store.add("gpm.cls", trunc_normal(&[1, d], 0.02, rng))?;
        let mask_token = store.add("gpm.mask_token", trunc_normal(&[1, d], 0.02, rng))?;
        let start_token = store.add("gpm.start_token", trunc_normal(&[1, d], 0.02, rng))?;
        let depth = config.depth;
        let blocks = (0..depth)
            .map(|l| {
                let rate = if depth > 1 {
                    config.drop_path * l as f64 / (depth - 1) as f64
                } else {
                    config.drop_path
                };
                Block::new(
                    store,
                    &format!("gpm.block{l}"),
                    d,
                    d * config.mlp_ratio,
                    rate,
                    rng,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let norm = LayerNorm::new(store, "gpm.norm", d)?;
        let ae_head = Linear::new(store, "gpm.ae_head", d, config.vocab, tn, rng)?;
        let ar_head = Linear::new(store, "gpm.ar_head", d, config.vocab, tn, rng)?;
        Ok(Self {
            config,
            input_proj,
            pos,
            cls,
            mask_token,
            start_token,
            blocks,
            norm,
            ae_head,
            ar_head,
        })
    }

    fn positions<T: Real>(&self, g: &mut Graph<T>, b: &Bind<T>, centers: &[Point]) -> Result<Var> {
        match &self.pos {
            PosEmbed::Mlp { fc1, fc2 } => {
                let c = g.constant(points_tensor(centers));
                let h = fc1.forward(g, b, c)?;
                let h = g.gelu(h)?;
                fc2.forward(g, b, h)
            }
            PosEmbed::Table { table } => {
                if centers.len() > self.config.groups {
                    return Err(invalid(format!(
                        "{} patches exceed the positional table",
                        centers.len()
                    )));
                }
                let t = b.var(g, *table);
                Ok(g.gather_rows(t, Arc::new((0..centers.len()).collect()))?)
            }
        }
    }

    /// PartA rows `[m + 1, D]`: `[CLS]`, then per patch `[M]` or the
    /// projected embedding, plus the patch position.
    fn part_a<T: Real>(
        &self,
        g: &mut Graph<T>,
        b: &Bind<T>,
        input: &GpmInput<T>,
        pos: Var,
    ) -> Result<Var> {
        let m = input.groups();
        let e = g.constant(input.embeddings.clone());
        let proj = self.input_proj.forward(g, b, e)?;
        let mask_tok = b.var(g, self.mask_token);
        let pool = g.concat_rows(&[proj, mask_tok])?;
        let idx: Vec<usize> = (0..m)
            .map(|i| if input.is_masked(i) { m } else { i })
            .collect();
        let slots = g.gather_rows(pool, Arc::new(idx))?;
        let slots = g.add(slots, pos)?;
        let cls = b.var(g, self.cls);
        Ok(g.concat_rows(&[cls, slots])?)
    }

    /// PartB rows `[m, D]`: `[S]`, then the projected contents of slots
    /// `1..m`; slot `j` carries the position of the patch it predicts.
    fn part_b<T: Real>(
        &self,
        g: &mut Graph<T>,
        b: &Bind<T>,
        input: &GpmInput<T>,
        pos: Var,
    ) -> Result<Var> {
        PART_B_BUILDS.fetch_add(1, Ordering::SeqCst);
        let m = input.groups();
        let start = b.var(g, self.start_token);
        let rows = if m > 1 {
            let content = match &input.part_b_override {
                Some(t) => {
                    if t.shape() != [m - 1, self.config.input_dim] {
                        return Err(invalid(format!("PartB override shape {:?}", t.shape())));
                    }
                    t.clone()
                }
                None => {
                    let w = self.config.input_dim;
                    Tensor::new(
                        vec![m - 1, w],
                        input.embeddings.data()[..(m - 1) * w].to_vec(),
                    )?
                }
            };
            let c = g.constant(content);
            let proj = self.input_proj.forward(g, b, c)?;
            g.concat_rows(&[start, proj])?
        } else {
            start
        };
        Ok(g.add(rows, pos)?)
    }

    fn check_batch<T: Real>(&self, inputs: &[GpmInput<T>]) -> Result<(usize, SequenceOrder)> {
        let first = inputs.first().ok_or_else(|| invalid("empty model batch"))?;
        let (m, order) = (first.groups(), first.order);
        for inp in inputs {
            if inp.groups() != m || inp.order != order {
                return Err(invalid("batch items must share patch count and order"));
            }
            if inp.embeddings.dims2()?.1 != self.config.input_dim {
                return Err(invalid(
                    "embedding width does not match the model input width",
                ));
            }
            if let Some(t) = inp.labels.iter().find(|t| **t >= self.config.vocab) {
                return Err(GpmError::ContractViolation(format!(
                    "label {t} outside the vocabulary"
                )));
            }
        }
        Ok((m, order))
    }

    fn encode<T: Real>(
        &self,
        g: &mut Graph<T>,
        b: &Bind<T>,
        x: Var,
        len: usize,
        mask: Option<&Tensor<T>>,
    ) -> Result<Var> {
        let mut h = x;
        for block in &self.blocks {
            h = block.forward(g, b, h, len, self.config.heads, mask)?;
        }
        self.norm.forward(g, b, h)
    }

    /// The full hybrid pass over a batch.
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        b: &Bind<T>,
        inputs: &[GpmInput<T>],
    ) -> Result<GpmOutput> {
        let (m, order) = self.check_batch(inputs)?;
        let mask = attention_mask_for(m + 1, m, order)?;
        let len = mask.len();
        let mut seqs = Vec::with_capacity(inputs.len());
        for inp in inputs {
            let pos = self.positions(g, b, &inp.centers)?;
            let a = self.part_a(g, b, inp, pos)?;
            let bb = self.part_b(g, b, inp, pos)?;
            seqs.push(match order {
                SequenceOrder::AThenB => g.concat_rows(&[a, bb])?,
                SequenceOrder::BThenA => g.concat_rows(&[bb, a])?,
            });
        }
        let x = g.concat_rows(&seqs)?;
        let additive = mask.additive::<T>();
        let hidden = self.encode(g, b, x, len, Some(&additive))?;
        let mask = &mask;
        let a_rows: Vec<usize> = (0..inputs.len())
            .flat_map(|i| (1..=m).map(move |s| i * len + mask.row_of_a(s)))
            .collect();
        let b_rows: Vec<usize> = (0..inputs.len())
            .flat_map(|i| (0..m).map(move |s| i * len + mask.row_of_b(s)))
            .collect();
        let a_h = g.gather_rows(hidden, Arc::new(a_rows))?;
        let b_h = g.gather_rows(hidden, Arc::new(b_rows))?;
        let ae_logits = self.ae_head.forward(g, b, a_h)?;
        let ar_logits = self.ar_head.forward(g, b, b_h)?;
        Ok(GpmOutput {
            ae_logits,
            ar_logits,
            hidden,
        })
    }

    /// PartA alone, fully bidirectional; returns hidden states `[b * (m + 1), D]`
    /// with `[CLS]` first in every item. PartB is never built.
    pub fn encode_part_a<T: Real>(
        &self,
        g: &mut Graph<T>,
        b: &Bind<T>,
        inputs: &[GpmInput<T>],
    ) -> Result<Var> {
        let (m, _) = self.check_batch(inputs)?;
        let mut seqs = Vec::with_capacity(inputs.len());
        for inp in inputs {
            let pos = self.positions(g, b, &inp.centers)?;
            seqs.push(self.part_a(g, b, inp, pos)?);
        }
        let x = g.concat_rows(&seqs)?;
        self.encode(g, b, x, m + 1, None)
    }
}

fn check_mask(mask_rows: &[usize]) -> Result<()> {
    if mask_rows.is_empty() {
        return Err(invalid("loss needs a non-empty mask set"));
    }
    Ok(())
}

/// Mean cross-entropy of `logits` rows listed in `rows` against `labels`
/// (indexed like the logits rows).
fn masked_ce<T: Real>(
    g: &mut Graph<T>,
    logits: Var,
    labels: &[usize],
    rows: &[usize],
) -> Result<Var> {
    check_mask(rows)?;
    let picked = g.gather_rows(logits, Arc::new(rows.to_vec()))?;
    let targets: Vec<usize> = rows.iter().map(|r| labels[*r]).collect();
    Ok(g.cross_entropy(picked, &targets)?)
}

/// Masked-prediction loss: mean cross-entropy over the masked PartA rows.
pub fn loss_ae<T: Real>(
    g: &mut Graph<T>,
    ae_logits: Var,
    labels: &[usize],
    mask_rows: &[usize],
) -> Result<Var> {
    masked_ce(g, ae_logits, labels, mask_rows)
}

/// Generation loss: PartB row `j` predicts label `j`; mean cross-entropy
/// over the masked rows.
pub fn loss_ar<T: Real>(
    g: &mut Graph<T>,
    ar_logits: Var,
    labels: &[usize],
    mask_rows: &[usize],
) -> Result<Var> {
    masked_ce(g, ar_logits, labels, mask_rows)
}

/// `w_ae * ae + w_ar * ar`; a zero weight drops its term from the graph.
pub fn loss_total<T: Real>(
    g: &mut Graph<T>,
    ae: Var,
    ar: Var,
    w_ae: f64,
    w_ar: f64,
) -> Result<Var> {
    if !(w_ae >= 0.0 && w_ar >= 0.0) {
        return Err(invalid("loss weights must be >= 0"));
    }
    let a = g.scale(ae, w_ae)?;
    let r = g.scale(ar, w_ar)?;
    Ok(g.add(a, r)?)
}

/// Scalar losses of one batch.
pub struct GpmLosses {
    pub ae: Var,
    pub ar: Var,
    pub total: Var,
}

impl Gpm {
    /// Forward pass plus the configured losses over a batch.
    pub fn losses<T: Real>(
        &self,
        g: &mut Graph<T>,
        b: &Bind<T>,
        inputs: &[GpmInput<T>],
    ) -> Result<(GpmOutput, GpmLosses)> {
        let out = self.forward(g, b, inputs)?;
        let m = inputs[0].groups();
        let labels: Vec<usize> = inputs
            .iter()
            .flat_map(|i| i.labels.iter().copied())
            .collect();
        let masked: Vec<usize> = inputs
            .iter()
            .enumerate()
            .flat_map(|(i, inp)| inp.mask_set.iter().map(move |j| i * m + j))
            .collect();
        let ae = loss_ae(g, out.ae_logits, &labels, &masked)?;
        let ar = match self.config.ar_loss {
            ArLossMode::Masked => loss_ar(g, out.ar_logits, &labels, &masked)?,
            ArLossMode::All => loss_ar(
                g,
                out.ar_logits,
                &labels,
                &(0..labels.len()).collect::<Vec<_>>(),
            )?,
        };
        let total = loss_total(g, ae, ar, self.config.w_ae, self.config.w_ar)?;
        Ok((out, GpmLosses { ae, ar, total }))
    }
}

/// A transformer with single-precision weights.
#[derive(Clone, Debug)]
pub struct GpmModel {
    pub arch: Gpm,
    pub params: ParamStore<f32>,
}

impl GpmModel {
    pub fn new(config: GpmConfig, seed: u64) -> Result<Self> {
        let mut params = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let arch = Gpm::new(config, &mut params, &mut rng)?;
        Ok(Self { arch, params })
    }

    pub fn config(&self) -> &GpmConfig {
        &self.arch.config
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        Ok(gpm_nn::checkpoint::save_params(path, &self.params)?)
    }

    pub fn load(config: GpmConfig, path: &std::path::Path) -> Result<Self> {
        let mut model = Self::new(config, 0)?;
        gpm_nn::checkpoint::load_params(path, &mut model.params)?;
        Ok(model)
    }
}
