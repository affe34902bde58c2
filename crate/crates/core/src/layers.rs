//! Parameterized building blocks shared by the dVAE and the transformer.
//!
//! Layers only hold [`ParamId`]s, so one architecture value works with a
//! single-precision store for training and a double-precision copy for
//! gradient checks.

use std::sync::Arc;

use gpm_nn::params::{trunc_normal, uniform};
use gpm_nn::{Graph, ParamId, ParamStore, Real, Tensor, Var};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;

/// How parameters enter a graph: as trainable leaves or as constants.
#[derive(Clone, Copy)]
pub struct Bind<'s, T: Real> {
    pub store: &'s ParamStore<T>,
    pub trainable: bool,
}

impl<'s, T: Real> Bind<'s, T> {
    pub fn trainable(store: &'s ParamStore<T>) -> Self {
        Self {
            store,
            trainable: true,
        }
    }

    pub fn frozen(store: &'s ParamStore<T>) -> Self {
        Self {
            store,
            trainable: false,
        }
    }

    pub fn var(&self, g: &mut Graph<T>, id: ParamId) -> Var {
        if self.trainable {
            g.param(self.store, id)
        } else {
            g.param_frozen(self.store, id)
        }
    }
}

/// Weight initialization used by [`Linear::new`].
#[derive(Clone, Copy, Debug)]
pub enum Init {
    /// `uniform(±1/sqrt(fan_in))` for weights and biases.
    FanIn,
    /// Truncated normal with std 0.02, zero bias.
    TruncNormal,
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        init: Init,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let (w, b) = match init {
            Init::FanIn => {
                let bound = 1.0 / (fan_in as f64).sqrt();
                (
                    uniform(&[fan_in, fan_out], bound, rng),
                    uniform(&[fan_out], bound, rng),
                )
            }
            Init::TruncNormal => (
                trunc_normal(&[fan_in, fan_out], 0.02, rng),
                Tensor::zeros(&[fan_out]),
            ),
        };
        Ok(Self {
            w: store.add(format!("{name}.w"), w)?,
            b: store.add(format!("{name}.b"), b)?,
            fan_in,
            fan_out,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bind<T>, x: Var) -> Result<Var> {
        let w = p.var(g, self.w);
        let b = p.var(g, self.b);
        Ok(g.affine(x, w, b)?)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub const EPS: f64 = 1e-5;

    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, width: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(&[width], T::one()))?,
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[width]))?,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bind<T>, x: Var) -> Result<Var> {
        let gamma = p.var(g, self.gamma);
        let beta = p.var(g, self.beta);
        Ok(g.layer_norm(x, gamma, beta, Self::EPS)?)
    }
}

/// Group normalization whose statistics span a block of rows (one cloud)
/// and a group of adjacent channels.
#[derive(Clone, Debug)]
pub struct GroupNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub groups: usize,
}

impl GroupNorm {
    pub const EPS: f64 = 1e-5;

    /// Up to `groups` channel groups; fewer when `width` is not divisible.
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        width: usize,
        groups: usize,
    ) -> Result<Self> {
        let groups = (1..=groups.max(1))
            .rev()
            .find(|g| width % g == 0)
            .unwrap_or(1);
        Ok(Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(&[width], T::one()))?,
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[width]))?,
            groups,
        })
    }

    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        p: &Bind<T>,
        x: Var,
        block: usize,
    ) -> Result<Var> {
        let gamma = p.var(g, self.gamma);
        let beta = p.var(g, self.beta);
        Ok(g.group_norm(x, gamma, beta, block, self.groups, Self::EPS)?)
    }
}

/// `k` nearest rows of `x [n, c]` to each row, within consecutive blocks of
/// `block` rows, as global row indices. A row is its own nearest neighbour;
/// ties go to the lowest index. When `k` exceeds the block size the
/// neighbour list wraps around the sorted order.
pub fn feature_knn<T: Real>(x: &Tensor<T>, block: usize, k: usize) -> Result<Vec<usize>> {
    let (n, c) = x.dims2()?;
    if block == 0 || n % block != 0 || k == 0 {
        return Err(crate::error::invalid(format!(
            "feature_knn: {n} rows, block {block}, k {k}"
        )));
    }
    let data = x.data();
    let mut out = Vec::with_capacity(n * k);
    let mut dist = vec![0.0f64; block];
    let mut order: Vec<usize> = Vec::with_capacity(block);
    for start in (0..n).step_by(block) {
        for i in start..start + block {
            let xi = &data[i * c..(i + 1) * c];
            for (j, d) in dist.iter_mut().enumerate() {
                let xj = &data[(start + j) * c..(start + j + 1) * c];
                *d = xi
                    .iter()
                    .zip(xj)
                    .map(|(a, b)| (a.f64() - b.f64()).powi(2))
                    .sum();
            }
            order.clear();
            order.extend(0..block);
            order.sort_by(|a, b| dist[*a].total_cmp(&dist[*b]).then(a.cmp(b)));
            out.extend((0..k).map(|t| start + order[t % block]));
        }
    }
    Ok(out)
}

/// One EdgeConv layer: for every node, `max_j LeakyReLU(GN(W [x_i, x_j - x_i]))`
/// over its `k` feature-space neighbours. The group norm pools statistics
/// over all edges of one graph.
#[derive(Clone, Debug)]
pub struct EdgeConv {
    pub linear: Linear,
    pub norm: GroupNorm,
}

impl EdgeConv {
    pub const NORM_GROUPS: usize = 64;

    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        fan_in: usize,
        width: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Ok(Self {
            linear: Linear::new(
                store,
                &format!("{name}.fc"),
                2 * fan_in,
                width,
                Init::FanIn,
                rng,
            )?,
            norm: GroupNorm::new(store, &format!("{name}.gn"), width, Self::NORM_GROUPS)?,
        })
    }

    /// `x [b * block, c]`, graphs built independently within each block.
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        p: &Bind<T>,
        x: Var,
        block: usize,
        k: usize,
    ) -> Result<Var> {
        let nbr = feature_knn(g.value(x), block, k)?;
        let centers: Vec<usize> = (0..g.dims2(x)?.0)
            .flat_map(|i| std::iter::repeat_n(i, k))
            .collect();
        let xj = g.gather_rows(x, Arc::new(nbr))?;
        let xi = g.gather_rows(x, Arc::new(centers))?;
        let diff = g.sub(xj, xi)?;
        let edge = g.concat_cols(&[xi, diff])?;
        let h = self.linear.forward(g, p, edge)?;
        let h = self.norm.forward(g, p, h, block * k)?;
        let h = g.leaky_relu(h, 0.2)?;
        Ok(g.segment_max(h, k)?)
    }
}

/// A stack of EdgeConv layers whose outputs are concatenated.
#[derive(Clone, Debug)]
pub struct EdgeConvStack {
    pub layers: Vec<EdgeConv>,
    pub k: usize,
}

impl EdgeConvStack {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        fan_in: usize,
        width: usize,
        depth: usize,
        k: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let mut layers = Vec::with_capacity(depth);
        let mut c = fan_in;
        for l in 0..depth {
            layers.push(EdgeConv::new(store, &format!("{name}.{l}"), c, width, rng)?);
            c = width;
        }
        Ok(Self { layers, k })
    }

    pub fn out_width(&self) -> usize {
        self.layers.iter().map(|l| l.linear.fan_out).sum()
    }

    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        p: &Bind<T>,
        x: Var,
        block: usize,
    ) -> Result<Var> {
        let mut outs = Vec::with_capacity(self.layers.len());
        let mut h = x;
        for layer in &self.layers {
            h = layer.forward(g, p, h, block, self.k)?;
            outs.push(h);
        }
        Ok(g.concat_cols(&outs)?)
    }
}

/// `Linear -> [LayerNorm] -> ReLU -> Linear -> ... -> Linear`; the norm
/// after each hidden layer is optional.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub norms: Vec<LayerNorm>,
}

impl Mlp {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        widths: &[usize],
        init: Init,
        normed: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let mut layers = Vec::with_capacity(widths.len().saturating_sub(1));
        let mut norms = Vec::new();
        for (i, w) in widths.windows(2).enumerate() {
            layers.push(Linear::new(
                store,
                &format!("{name}.{i}"),
                w[0],
                w[1],
                init,
                rng,
            )?);
            if normed && i + 2 < widths.len() {
                norms.push(LayerNorm::new(store, &format!("{name}.ln{i}"), w[1])?);
            }
        }
        Ok(Self { layers, norms })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bind<T>, x: Var) -> Result<Var> {
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            if i > 0 {
                if let Some(norm) = self.norms.get(i - 1) {
                    h = norm.forward(g, p, h)?;
                }
                h = g.relu(h)?;
            }
            h = layer.forward(g, p, h)?;
        }
        Ok(h)
    }
}
