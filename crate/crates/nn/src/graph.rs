//! Define-by-run computation graph with reverse-mode differentiation.
//!
//! A [`Graph`] records every operation applied to its nodes. Parameters are
//! copied in from a [`ParamStore`] on first use; [`Graph::backward`] returns
//! gradients for inputs and parameters. Most operations work on row-major
//! matrices where rows are items (points, patches, tokens) and columns are
//! features, so batches are just stacked rows.

use std::collections::HashMap;
use std::ops::Range;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, NnError, Result};
use crate::ops::ChamferNorm;
use crate::params::{ParamId, ParamStore};
use crate::real::Real;
use crate::tensor::{gemm, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

pub(crate) enum Op<T> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        b_t: bool,
    },
    Affine {
        x: Var,
        w: Var,
        b: Var,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow {
        x: Var,
        row: Var,
    },
    Scale(Var, T),
    Relu(Var),
    LeakyRelu(Var, T),
    Gelu(Var),
    Ln(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        block: usize,
        groups: usize,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    SegmentMax {
        x: Var,
        arg: Vec<usize>,
    },
    SegmentMean {
        x: Var,
        group: usize,
    },
    RepeatRows {
        x: Var,
        times: usize,
    },
    GatherRows {
        x: Var,
        index: Arc<Vec<usize>>,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Slice {
        x: Var,
        rows: Range<usize>,
        cols: Range<usize>,
    },
    Softmax(Var),
    LogSoftmax(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<T>,
    },
    RowScale {
        x: Var,
        factors: Vec<T>,
    },
    Dropout {
        x: Var,
        mask: Vec<T>,
    },
    Sum(Var),
    Mean(Var),
    StraightThrough {
        soft: Var,
    },
    Chamfer {
        a: Var,
        b: Var,
        nn_ab: Vec<usize>,
        nn_ba: Vec<usize>,
        norm: ChamferNorm,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
    training: bool,
    rng: ChaCha8Rng,
    param_vars: HashMap<(u64, usize), Var>,
}

impl<T: Real> Graph<T> {
    /// `training` enables dropout and other stochastic ops, all of which
    /// draw from a generator seeded with `seed`.
    pub fn new(training: bool, seed: u64) -> Self {
        Self {
            nodes: Vec::new(),
            training,
            rng: ChaCha8Rng::seed_from_u64(seed),
            param_vars: HashMap::new(),
        }
    }

    pub fn eval() -> Self {
        Self::new(false, 0)
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn dims2(&self, v: Var) -> Result<(usize, usize)> {
        self.nodes[v.0].value.dims2()
    }

    pub(crate) fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A value that never receives a gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.leaf(t, false)
    }

    /// A leaf whose gradient is reported by [`Graph::backward`].
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.leaf(t, true)
    }

    fn leaf(&mut self, t: Tensor<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Parameter `id` of `store` as a differentiable leaf. Repeated calls
    /// within one graph return the same node.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        let key = (store.uid(), id.index());
        if let Some(v) = self.param_vars.get(&key) {
            return *v;
        }
        let v = self.leaf(store.get(id).clone(), true);
        self.param_vars.insert(key, v);
        v
    }

    /// Parameter as a constant: used when a store is frozen.
    pub fn param_frozen(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        let key = (store.uid(), id.index());
        if let Some(v) = self.param_vars.get(&key) {
            return *v;
        }
        let v = self.leaf(store.get(id).clone(), false);
        self.param_vars.insert(key, v);
        v
    }

    pub(crate) fn push(
        &mut self,
        op_name: &'static str,
        value: Tensor<T>,
        op: Op<T>,
    ) -> Result<Var> {
        if !value.is_finite() {
            return Err(NnError::NumericFailure { op: op_name });
        }
        let needs_grad = self
            .inputs_of(&op)
            .iter()
            .any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn inputs_of(&self, op: &Op<T>) -> Vec<Var> {
        match op {
            Op::Leaf => vec![],
            Op::MatMul { a, b, .. } => vec![*a, *b],
            Op::Affine { x, w, b } => vec![*x, *w, *b],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::AddRow { x, row } => vec![*x, *row],
            Op::LayerNorm { x, gamma, beta, .. } | Op::GroupNorm { x, gamma, beta, .. } => {
                vec![*x, *gamma, *beta]
            }
            Op::Chamfer { a, b, .. } => vec![*a, *b],
            Op::ConcatCols(v) | Op::ConcatRows(v) => v.clone(),
            Op::Scale(x, _)
            | Op::Relu(x)
            | Op::LeakyRelu(x, _)
            | Op::Gelu(x)
            | Op::Ln(x)
            | Op::SegmentMax { x, .. }
            | Op::SegmentMean { x, .. }
            | Op::RepeatRows { x, .. }
            | Op::GatherRows { x, .. }
            | Op::Slice { x, .. }
            | Op::Softmax(x)
            | Op::LogSoftmax(x)
            | Op::CrossEntropy { logits: x, .. }
            | Op::RowScale { x, .. }
            | Op::Dropout { x, .. }
            | Op::Sum(x)
            | Op::Mean(x)
            | Op::StraightThrough { soft: x } => vec![*x],
        }
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop(Var(i), &g, &mut grads)?;
            grads[i] = Some(g);
        }
        if grads
            .iter()
            .flatten()
            .any(|g| g.iter().any(|v| !v.is_finite()))
        {
            return Err(NnError::NumericFailure { op: "backward" });
        }
        Ok(Gradients {
            grads,
            param_vars: self.param_vars.clone(),
        })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<T>>], v: Var, f: impl FnOnce(&mut [T])) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| vec![T::zero(); self.nodes[v.0].value.numel()]);
        f(slot);
    }

    fn backprop(&self, out: Var, g: &[T], grads: &mut [Option<Vec<T>>]) -> Result<()> {
        let node = &self.nodes[out.0];
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, b_t } => {
                let (n, k) = self.dims2(*a)?;
                let m = y.len() / n.max(1);
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                self.accumulate(grads, *a, |ga| {
                    // dA = dC * op(B)^T
                    gemm(n, m, k, g, false, bv, !*b_t, ga, true);
                });
                self.accumulate(grads, *b, |gb| {
                    if *b_t {
                        // B is [m, k]: dB = dC^T * A
                        gemm(m, n, k, g, true, av, false, gb, true);
                    } else {
                        gemm(k, n, m, av, true, g, false, gb, true);
                    }
                });
            }
            Op::Affine { x, w, b } => {
                let (n, k) = self.dims2(*x)?;
                let m = y.len() / n.max(1);
                let xv = self.value(*x).data();
                let wv = self.value(*w).data();
                self.accumulate(grads, *x, |gx| gemm(n, m, k, g, false, wv, true, gx, true));
                self.accumulate(grads, *w, |gw| gemm(k, n, m, xv, true, g, false, gw, true));
                self.accumulate(grads, *b, |gb| {
                    for row in g.chunks(m) {
                        for (acc, v) in gb.iter_mut().zip(row) {
                            *acc = *acc + *v;
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, |ga| add_into(ga, g));
                self.accumulate(grads, *b, |gb| add_into(gb, g));
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, |ga| add_into(ga, g));
                self.accumulate(grads, *b, |gb| {
                    for (acc, v) in gb.iter_mut().zip(g) {
                        *acc = *acc - *v;
                    }
                });
            }
            Op::Mul(a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                self.accumulate(grads, *a, |ga| {
                    for ((acc, gi), bi) in ga.iter_mut().zip(g).zip(bv) {
                        *acc = *acc + *gi * *bi;
                    }
                });
                self.accumulate(grads, *b, |gb| {
                    for ((acc, gi), ai) in gb.iter_mut().zip(g).zip(av) {
                        *acc = *acc + *gi * *ai;
                    }
                });
            }
            Op::AddRow { x, row } => {
                let c = self.value(*row).numel();
                self.accumulate(grads, *x, |gx| add_into(gx, g));
                self.accumulate(grads, *row, |gr| {
                    for chunk in g.chunks(c) {
                        add_into(gr, chunk);
                    }
                });
            }
            Op::Scale(x, f) => {
                self.accumulate(grads, *x, |gx| {
                    for (acc, v) in gx.iter_mut().zip(g) {
                        *acc = *acc + *v * *f;
                    }
                });
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                self.accumulate(grads, *x, |gx| {
                    for ((acc, gi), xi) in gx.iter_mut().zip(g).zip(xv) {
                        if *xi > T::zero() {
                            *acc = *acc + *gi;
                        }
                    }
                });
            }
            Op::LeakyRelu(x, slope) => {
                let xv = self.value(*x).data();
                self.accumulate(grads, *x, |gx| {
                    for ((acc, gi), xi) in gx.iter_mut().zip(g).zip(xv) {
                        let d = if *xi > T::zero() { T::one() } else { *slope };
                        *acc = *acc + *gi * d;
                    }
                });
            }
            Op::Gelu(x) => {
                let xv = self.value(*x).data();
                self.accumulate(grads, *x, |gx| {
                    for ((acc, gi), xi) in gx.iter_mut().zip(g).zip(xv) {
                        *acc = *acc + *gi * gelu_grad(*xi);
                    }
                });
            }
            Op::Ln(x) => {
                let xv = self.value(*x).data();
                self.accumulate(grads, *x, |gx| {
                    for ((acc, gi), xi) in gx.iter_mut().zip(g).zip(xv) {
                        *acc = *acc + *gi / *xi;
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let c = self.value(*gamma).numel();
                let gam = self.value(*gamma).data();
                self.accumulate(grads, *gamma, |gg| {
                    for (grow, hrow) in g.chunks(c).zip(xhat.chunks(c)) {
                        for j in 0..c {
                            gg[j] = gg[j] + grow[j] * hrow[j];
                        }
                    }
                });
                self.accumulate(grads, *beta, |gb| {
                    for grow in g.chunks(c) {
                        add_into(gb, grow);
                    }
                });
                self.accumulate(grads, *x, |gx| {
                    let cn = T::of(c as f64);
                    for (r, ((gxrow, grow), hrow)) in gx
                        .chunks_mut(c)
                        .zip(g.chunks(c))
                        .zip(xhat.chunks(c))
                        .enumerate()
                    {
                        let mut mean_d = T::zero();
                        let mut mean_dh = T::zero();
                        for j in 0..c {
                            let d = grow[j] * gam[j];
                            mean_d = mean_d + d;
                            mean_dh = mean_dh + d * hrow[j];
                        }
                        mean_d = mean_d / cn;
                        mean_dh = mean_dh / cn;
                        for j in 0..c {
                            let d = grow[j] * gam[j];
                            gxrow[j] = gxrow[j] + rstd[r] * (d - mean_d - hrow[j] * mean_dh);
                        }
                    }
                });
            }
            Op::GroupNorm {
                x,
                gamma,
                beta,
                block,
                groups,
                xhat,
                rstd,
            } => {
                let c = self.value(*gamma).numel();
                let gam = self.value(*gamma).data();
                self.accumulate(grads, *gamma, |gg| {
                    for (grow, hrow) in g.chunks(c).zip(xhat.chunks(c)) {
                        for j in 0..c {
                            gg[j] = gg[j] + grow[j] * hrow[j];
                        }
                    }
                });
                self.accumulate(grads, *beta, |gb| {
                    for grow in g.chunks(c) {
                        add_into(gb, grow);
                    }
                });
                self.accumulate(grads, *x, |gx| {
                    let (block, groups) = (*block, *groups);
                    let width = c / groups;
                    let count = T::of((block * width) as f64);
                    let n = g.len() / c;
                    for (bi, b0) in (0..n).step_by(block).enumerate() {
                        for gi in 0..groups {
                            let cols = gi * width..(gi + 1) * width;
                            let mut mean_d = T::zero();
                            let mut mean_dh = T::zero();
                            for r in b0..b0 + block {
                                for j in cols.clone() {
                                    let d = g[r * c + j] * gam[j];
                                    mean_d = mean_d + d;
                                    mean_dh = mean_dh + d * xhat[r * c + j];
                                }
                            }
                            mean_d = mean_d / count;
                            mean_dh = mean_dh / count;
                            let rs = rstd[bi * groups + gi];
                            for r in b0..b0 + block {
                                for j in cols.clone() {
                                    let i = r * c + j;
                                    let d = g[i] * gam[j];
                                    gx[i] = gx[i] + rs * (d - mean_d - xhat[i] * mean_dh);
                                }
                            }
                        }
                    }
                });
            }
            Op::SegmentMax { x, arg } => {
                let c = self.value(*x).dims2()?.1;
                self.accumulate(grads, *x, |gx| {
                    for (o, src_row) in arg.iter().enumerate() {
                        let j = o % c;
                        gx[src_row * c + j] = gx[src_row * c + j] + g[o];
                    }
                });
            }
            Op::SegmentMean { x, group } => {
                let c = self.value(*x).dims2()?.1;
                let inv = T::one() / T::of(*group as f64);
                self.accumulate(grads, *x, |gx| {
                    for (r, gxrow) in gx.chunks_mut(c).enumerate() {
                        let grow = &g[(r / group) * c..(r / group + 1) * c];
                        for j in 0..c {
                            gxrow[j] = gxrow[j] + grow[j] * inv;
                        }
                    }
                });
            }
            Op::RepeatRows { x, times } => {
                let c = self.value(*x).dims2()?.1;
                self.accumulate(grads, *x, |gx| {
                    for (r, grow) in g.chunks(c).enumerate() {
                        let dst = &mut gx[(r / times) * c..(r / times + 1) * c];
                        add_into(dst, grow);
                    }
                });
            }
            Op::GatherRows { x, index } => {
                let c = self.value(*x).dims2()?.1;
                self.accumulate(grads, *x, |gx| {
                    for (grow, src) in g.chunks(c).zip(index.iter()) {
                        add_into(&mut gx[src * c..(src + 1) * c], grow);
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let rows = self.value(out).dims2()?.0;
                let total = y.len() / rows.max(1);
                let mut off = 0;
                for p in parts {
                    let c = self.value(*p).dims2()?.1;
                    self.accumulate(grads, *p, |gp| {
                        for r in 0..rows {
                            add_into(
                                &mut gp[r * c..(r + 1) * c],
                                &g[r * total + off..r * total + off + c],
                            );
                        }
                    });
                    off += c;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let n = self.value(*p).numel();
                    self.accumulate(grads, *p, |gp| add_into(gp, &g[off..off + n]));
                    off += n;
                }
            }
            Op::Slice { x, rows, cols } => {
                let c = self.value(*x).dims2()?.1;
                let w = cols.len();
                self.accumulate(grads, *x, |gx| {
                    for (i, r) in rows.clone().enumerate() {
                        add_into(
                            &mut gx[r * c + cols.start..r * c + cols.end],
                            &g[i * w..(i + 1) * w],
                        );
                    }
                });
            }
            Op::Softmax(x) => {
                let c = self.value(*x).dims2()?.1;
                self.accumulate(grads, *x, |gx| {
                    for ((gxrow, grow), yrow) in gx.chunks_mut(c).zip(g.chunks(c)).zip(y.chunks(c))
                    {
                        let dot: T = grow.iter().zip(yrow).map(|(a, b)| *a * *b).sum();
                        for j in 0..c {
                            gxrow[j] = gxrow[j] + yrow[j] * (grow[j] - dot);
                        }
                    }
                });
            }
            Op::LogSoftmax(x) => {
                let c = self.value(*x).dims2()?.1;
                self.accumulate(grads, *x, |gx| {
                    for ((gxrow, grow), yrow) in gx.chunks_mut(c).zip(g.chunks(c)).zip(y.chunks(c))
                    {
                        let s: T = grow.iter().copied().sum();
                        for j in 0..c {
                            gxrow[j] = gxrow[j] + grow[j] - yrow[j].exp() * s;
                        }
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let c = self.value(*logits).dims2()?.1;
                let scale = g[0] / T::of(targets.len() as f64);
                self.accumulate(grads, *logits, |gl| {
                    for (r, t) in targets.iter().enumerate() {
                        for j in 0..c {
                            let onehot = if j == *t { T::one() } else { T::zero() };
                            gl[r * c + j] = gl[r * c + j] + scale * (probs[r * c + j] - onehot);
                        }
                    }
                });
            }
            Op::RowScale { x, factors } => {
                let c = self.value(*x).dims2()?.1;
                self.accumulate(grads, *x, |gx| {
                    for (r, (gxrow, grow)) in gx.chunks_mut(c).zip(g.chunks(c)).enumerate() {
                        for j in 0..c {
                            gxrow[j] = gxrow[j] + grow[j] * factors[r];
                        }
                    }
                });
            }
            Op::Dropout { x, mask } => {
                self.accumulate(grads, *x, |gx| {
                    for ((acc, gi), m) in gx.iter_mut().zip(g).zip(mask) {
                        *acc = *acc + *gi * *m;
                    }
                });
            }
            Op::Sum(x) => {
                self.accumulate(grads, *x, |gx| gx.iter_mut().for_each(|v| *v = *v + g[0]));
            }
            Op::Mean(x) => {
                let n = T::of(self.value(*x).numel() as f64);
                self.accumulate(grads, *x, |gx| {
                    gx.iter_mut().for_each(|v| *v = *v + g[0] / n)
                });
            }
            Op::StraightThrough { soft } => {
                self.accumulate(grads, *soft, |gs| add_into(gs, g));
            }
            Op::Chamfer {
                a,
                b,
                nn_ab,
                nn_ba,
                norm,
            } => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                let na = T::of(nn_ab.len() as f64);
                let nb = T::of(nn_ba.len() as f64);
                // d/dp |p - q| = (p - q) / |p - q| (Euclidean), sign(p - q)
                // (L1) or 2 (p - q) (squared); zero where the points coincide.
                let unit = |p: &[T], q: &[T]| -> [T; 3] {
                    let d = [p[0] - q[0], p[1] - q[1], p[2] - q[2]];
                    match norm {
                        ChamferNorm::Euclidean => {
                            let n = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
                            if n > T::of(1e-12) {
                                [d[0] / n, d[1] / n, d[2] / n]
                            } else {
                                [T::zero(); 3]
                            }
                        }
                        ChamferNorm::Squared => d.map(|c| c + c),
                        ChamferNorm::L1 => d.map(|c| {
                            if c > T::zero() {
                                T::one()
                            } else if c < T::zero() {
                                -T::one()
                            } else {
                                T::zero()
                            }
                        }),
                    }
                };
                let ga_needed = self.needs_grad(*a);
                let gb_needed = self.needs_grad(*b);
                let mut da = vec![T::zero(); av.len()];
                let mut db = vec![T::zero(); bv.len()];
                for (i, j) in nn_ab.iter().enumerate() {
                    let u = unit(&av[3 * i..3 * i + 3], &bv[3 * j..3 * j + 3]);
                    for c in 0..3 {
                        let s = g[0] * u[c] / na;
                        da[3 * i + c] = da[3 * i + c] + s;
                        db[3 * j + c] = db[3 * j + c] - s;
                    }
                }
                for (j, i) in nn_ba.iter().enumerate() {
                    let u = unit(&bv[3 * j..3 * j + 3], &av[3 * i..3 * i + 3]);
                    for c in 0..3 {
                        let s = g[0] * u[c] / nb;
                        db[3 * j + c] = db[3 * j + c] + s;
                        da[3 * i + c] = da[3 * i + c] - s;
                    }
                }
                if ga_needed {
                    self.accumulate(grads, *a, |ga| add_into(ga, &da));
                }
                if gb_needed {
                    self.accumulate(grads, *b, |gb| add_into(gb, &db));
                }
            }
        }
        Ok(())
    }
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d = *d + *s;
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

pub(crate) fn gelu<T: Real>(x: T) -> T {
    let u = T::of(GELU_C) * (x + T::of(GELU_A) * x * x * x);
    T::of(0.5) * x * (T::one() + u.tanh())
}

fn gelu_grad<T: Real>(x: T) -> T {
    let u = T::of(GELU_C) * (x + T::of(GELU_A) * x * x * x);
    let t = u.tanh();
    let du = T::of(GELU_C) * (T::one() + T::of(3.0 * GELU_A) * x * x);
    T::of(0.5) * (T::one() + t) + T::of(0.5) * x * (T::one() - t * t) * du
}

/// Result of [`Graph::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    param_vars: HashMap<(u64, usize), Var>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of a node, or `None` if it did not influence the loss.
    pub fn wrt(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradients for every parameter of `store` used in the graph; unused
    /// parameters get zeros.
    pub fn for_store(&self, store: &ParamStore<T>) -> ParamGrads<T> {
        let grads = store
            .iter()
            .map(|(id, p)| {
                let g = self
                    .param_vars
                    .get(&(store.uid(), id.index()))
                    .and_then(|v| self.grads[v.0].clone())
                    .unwrap_or_else(|| vec![T::zero(); p.tensor.numel()]);
                Tensor::new(p.tensor.shape().to_vec(), g).expect("gradient matches parameter shape")
            })
            .map(Some)
            .collect();
        ParamGrads { grads }
    }
}

/// Per-parameter gradients of one store, indexed like the store.
#[derive(Clone, Debug)]
pub struct ParamGrads<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> ParamGrads<T> {
    pub fn zeros(store: &ParamStore<T>) -> Self {
        Self {
            grads: store
                .iter()
                .map(|(_, p)| Some(Tensor::zeros(p.tensor.shape())))
                .collect(),
        }
    }

    pub fn from_vec(grads: Vec<Option<Tensor<T>>>) -> Self {
        Self { grads }
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.grads.get(id.index()).and_then(|g| g.as_ref())
    }

    pub fn add_assign(&mut self, other: &ParamGrads<T>) -> Result<()> {
        if self.grads.len() != other.grads.len() {
            return Err(invalid("gradient sets differ in length"));
        }
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            match (a.as_mut(), b) {
                (Some(a), Some(b)) => add_into(a.data_mut(), b.data()),
                (None, Some(b)) => *a = Some(b.clone()),
                _ => {}
            }
        }
        Ok(())
    }

    pub fn scale(&mut self, f: T) {
        for g in self.grads.iter_mut().flatten() {
            g.data_mut().iter_mut().for_each(|v| *v = *v * f);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.grads
            .iter()
            .flatten()
            .flat_map(|g| g.data().iter())
            .map(|v| v.f64() * v.f64())
            .sum::<f64>()
            .sqrt()
    }

    /// Rescale so the global norm is at most `max_norm`; returns the norm
    /// before clipping.
    pub fn clip_global_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.global_norm();
        if norm > max_norm {
            self.scale(T::of(max_norm / norm));
        }
        norm
    }
}
