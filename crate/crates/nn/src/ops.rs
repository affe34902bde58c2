//! Forward definitions of the differentiable operations.

use std::ops::Range;
use std::sync::Arc;

use rand::Rng;

use crate::error::{invalid, Result};
use crate::graph::{gelu, Graph, Op, Var};
use crate::real::Real;
use crate::tensor::{gemm, Tensor};

impl<T: Real> Graph<T> {
    fn same_shape(&self, a: Var, b: Var, op: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(invalid(format!(
                "{op}: shape mismatch {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn map(&mut self, name: &'static str, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Result<Var> {
        let v = self.value(x);
        let out = Tensor::new(v.shape().to_vec(), v.data().iter().map(|a| f(*a)).collect())?;
        self.push(name, out, op)
    }

    /// `a [n, k] * b [k, m]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = self.dims2(a)?;
        let (k2, m) = self.dims2(b)?;
        if k != k2 {
            return Err(invalid(format!("matmul: inner dims {k} vs {k2}")));
        }
        let mut out = vec![T::zero(); n * m];
        gemm(
            n,
            k,
            m,
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            &mut out,
            false,
        );
        self.push(
            "matmul",
            Tensor::new(vec![n, m], out)?,
            Op::MatMul { a, b, b_t: false },
        )
    }

    /// `a [n, k] * b^T` for `b [m, k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = self.dims2(a)?;
        let (m, k2) = self.dims2(b)?;
        if k != k2 {
            return Err(invalid(format!("matmul_nt: inner dims {k} vs {k2}")));
        }
        let mut out = vec![T::zero(); n * m];
        gemm(
            n,
            k,
            m,
            self.value(a).data(),
            false,
            self.value(b).data(),
            true,
            &mut out,
            false,
        );
        self.push(
            "matmul_nt",
            Tensor::new(vec![n, m], out)?,
            Op::MatMul { a, b, b_t: true },
        )
    }

    /// `x [n, k] * w [k, m] + b [m]`, the bias broadcast over rows.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (n, k) = self.dims2(x)?;
        let (k2, m) = self.dims2(w)?;
        if k != k2 || self.value(b).numel() != m {
            return Err(invalid(format!(
                "affine: x {:?}, w {:?}, b {:?}",
                self.shape(x),
                self.shape(w),
                self.shape(b)
            )));
        }
        let mut out = Vec::with_capacity(n * m);
        for _ in 0..n {
            out.extend_from_slice(self.value(b).data());
        }
        gemm(
            n,
            k,
            m,
            self.value(x).data(),
            false,
            self.value(w).data(),
            false,
            &mut out,
            true,
        );
        self.push(
            "affine",
            Tensor::new(vec![n, m], out)?,
            Op::Affine { x, w, b },
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out = zip_with(self.value(a), self.value(b), |x, y| x + y);
        self.push("add", out, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let out = zip_with(self.value(a), self.value(b), |x, y| x - y);
        self.push("sub", out, Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out = zip_with(self.value(a), self.value(b), |x, y| x * y);
        self.push("mul", out, Op::Mul(a, b))
    }

    /// Adds a row vector `[c]` (or `[1, c]`) to every row of `x [n, c]`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (_, c) = self.dims2(x)?;
        if self.value(row).numel() != c {
            return Err(invalid(format!(
                "add_row: {:?} vs {:?}",
                self.shape(x),
                self.shape(row)
            )));
        }
        let r = self.value(row).data().to_vec();
        let v = self.value(x);
        let data = v
            .data()
            .chunks(c)
            .flat_map(|xr| xr.iter().zip(&r).map(|(a, b)| *a + *b))
            .collect();
        let out = Tensor::new(v.shape().to_vec(), data)?;
        self.push("add_row", out, Op::AddRow { x, row })
    }

    pub fn scale(&mut self, x: Var, f: f64) -> Result<Var> {
        let f = T::of(f);
        self.map("scale", x, |a| a * f, Op::Scale(x, f))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.map("relu", x, |a| a.max(T::zero()), Op::Relu(x))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Result<Var> {
        let s = T::of(slope);
        self.map(
            "leaky_relu",
            x,
            |a| if a > T::zero() { a } else { a * s },
            Op::LeakyRelu(x, s),
        )
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.map("gelu", x, gelu, Op::Gelu(x))
    }

    /// Natural logarithm; inputs must be positive.
    pub fn ln(&mut self, x: Var) -> Result<Var> {
        self.map("ln", x, |a| a.ln(), Op::Ln(x))
    }

    /// Normalizes each row of `x [n, c]`, then applies `gamma`/`beta` `[c]`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (n, c) = self.dims2(x)?;
        if self.value(gamma).numel() != c || self.value(beta).numel() != c {
            return Err(invalid(
                "layer_norm: affine parameters must have one entry per column",
            ));
        }
        let xv = self.value(x).data();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let cn = T::of(c as f64);
        let mut xhat = Vec::with_capacity(n * c);
        let mut rstd = Vec::with_capacity(n);
        let mut out = Vec::with_capacity(n * c);
        for row in xv.chunks(c) {
            let mean = row.iter().copied().sum::<T>() / cn;
            let var = row.iter().map(|v| (*v - mean) * (*v - mean)).sum::<T>() / cn;
            let r = T::one() / (var + T::of(eps)).sqrt();
            rstd.push(r);
            for j in 0..c {
                let h = (row[j] - mean) * r;
                xhat.push(h);
                out.push(h * gv[j] + bv[j]);
            }
        }
        let out = Tensor::new(vec![n, c], out)?;
        self.push(
            "layer_norm",
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
        )
    }

    /// Group normalization over blocks of rows: within each block of `block`
    /// consecutive rows, each set of `c / groups` adjacent columns is
    /// normalized jointly over all its rows, then `gamma`/`beta` `[c]` apply
    /// per column.
    pub fn group_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        block: usize,
        groups: usize,
        eps: f64,
    ) -> Result<Var> {
        let (n, c) = self.dims2(x)?;
        if block == 0 || n % block != 0 || groups == 0 || c % groups != 0 {
            return Err(invalid(format!(
                "group_norm: {n}x{c} input, block {block}, {groups} groups"
            )));
        }
        if self.value(gamma).numel() != c || self.value(beta).numel() != c {
            return Err(invalid(
                "group_norm: affine parameters must have one entry per column",
            ));
        }
        let xv = self.value(x).data();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let width = c / groups;
        let count = T::of((block * width) as f64);
        let mut xhat = vec![T::zero(); n * c];
        let mut rstd = Vec::with_capacity(n / block * groups);
        for b0 in (0..n).step_by(block) {
            for gi in 0..groups {
                let cols = gi * width..(gi + 1) * width;
                let mut mean = T::zero();
                for r in b0..b0 + block {
                    for j in cols.clone() {
                        mean = mean + xv[r * c + j];
                    }
                }
                mean = mean / count;
                let mut var = T::zero();
                for r in b0..b0 + block {
                    for j in cols.clone() {
                        let d = xv[r * c + j] - mean;
                        var = var + d * d;
                    }
                }
                let rs = T::one() / (var / count + T::of(eps)).sqrt();
                rstd.push(rs);
                for r in b0..b0 + block {
                    for j in cols.clone() {
                        xhat[r * c + j] = (xv[r * c + j] - mean) * rs;
                    }
                }
            }
        }
        let out: Vec<T> = xhat
            .iter()
            .enumerate()
            .map(|(i, h)| *h * gv[i % c] + bv[i % c])
            .collect();
        let out = Tensor::new(vec![n, c], out)?;
        self.push(
            "group_norm",
            out,
            Op::GroupNorm {
                x,
                gamma,
                beta,
                block,
                groups,
                xhat,
                rstd,
            },
        )
    }

    /// Column-wise max over consecutive groups of `group` rows:
    /// `[g * group, c] -> [g, c]`. Ties go to the earliest row.
    pub fn segment_max(&mut self, x: Var, group: usize) -> Result<Var> {
        let (n, c) = self.dims2(x)?;
        if group == 0 || n % group != 0 {
            return Err(invalid(format!(
                "segment_max: {n} rows not divisible by {group}"
            )));
        }
        let xv = self.value(x).data();
        let g = n / group;
        let mut out = Vec::with_capacity(g * c);
        let mut arg = Vec::with_capacity(g * c);
        for s in 0..g {
            for j in 0..c {
                let mut best = s * group;
                for r in s * group + 1..(s + 1) * group {
                    if xv[r * c + j] > xv[best * c + j] {
                        best = r;
                    }
                }
                out.push(xv[best * c + j]);
                arg.push(best);
            }
        }
        self.push(
            "segment_max",
            Tensor::new(vec![g, c], out)?,
            Op::SegmentMax { x, arg },
        )
    }

    /// Column-wise mean over consecutive groups of `group` rows.
    pub fn segment_mean(&mut self, x: Var, group: usize) -> Result<Var> {
        let (n, c) = self.dims2(x)?;
        if group == 0 || n % group != 0 {
            return Err(invalid(format!(
                "segment_mean: {n} rows not divisible by {group}"
            )));
        }
        let xv = self.value(x).data();
        let g = n / group;
        let inv = T::one() / T::of(group as f64);
        let mut out = vec![T::zero(); g * c];
        for (r, row) in xv.chunks(c).enumerate() {
            let dst = &mut out[(r / group) * c..(r / group + 1) * c];
            for j in 0..c {
                dst[j] = dst[j] + row[j];
            }
        }
        out.iter_mut().for_each(|v| *v = *v * inv);
        self.push(
            "segment_mean",
            Tensor::new(vec![g, c], out)?,
            Op::SegmentMean { x, group },
        )
    }

    /// Repeats every row `times` times in place: `[n, c] -> [n * times, c]`.
    pub fn repeat_rows(&mut self, x: Var, times: usize) -> Result<Var> {
        let (n, c) = self.dims2(x)?;
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(n * times * c);
        for row in xv.chunks(c) {
            for _ in 0..times {
                out.extend_from_slice(row);
            }
        }
        self.push(
            "repeat_rows",
            Tensor::new(vec![n * times, c], out)?,
            Op::RepeatRows { x, times },
        )
    }

    /// Rows of `x` in the order given by `index` (repeats allowed). Also
    /// serves as embedding lookup.
    pub fn gather_rows(&mut self, x: Var, index: Arc<Vec<usize>>) -> Result<Var> {
        let (n, c) = self.dims2(x)?;
        if let Some(bad) = index.iter().find(|i| **i >= n) {
            return Err(invalid(format!(
                "gather_rows: index {bad} out of range for {n} rows"
            )));
        }
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(index.len() * c);
        for i in index.iter() {
            out.extend_from_slice(&xv[i * c..(i + 1) * c]);
        }
        let shape = vec![index.len(), c];
        self.push(
            "gather_rows",
            Tensor::new(shape, out)?,
            Op::GatherRows { x, index },
        )
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(first) = parts.first() else {
            return Err(invalid("concat_cols: no inputs"));
        };
        let n = self.dims2(*first)?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let (r, c) = self.dims2(*p)?;
            if r != n {
                return Err(invalid(format!("concat_cols: row counts {n} vs {r}")));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(n * total);
        for r in 0..n {
            for (p, c) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(*p).data()[r * c..(r + 1) * c]);
            }
        }
        self.push(
            "concat_cols",
            Tensor::new(vec![n, total], out)?,
            Op::ConcatCols(parts.to_vec()),
        )
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(first) = parts.first() else {
            return Err(invalid("concat_rows: no inputs"));
        };
        let c = self.dims2(*first)?.1;
        let mut rows = 0;
        let mut out = Vec::new();
        for p in parts {
            let (r, c2) = self.dims2(*p)?;
            if c2 != c {
                return Err(invalid(format!("concat_rows: column counts {c} vs {c2}")));
            }
            rows += r;
            out.extend_from_slice(self.value(*p).data());
        }
        self.push(
            "concat_rows",
            Tensor::new(vec![rows, c], out)?,
            Op::ConcatRows(parts.to_vec()),
        )
    }

    pub fn slice(&mut self, x: Var, rows: Range<usize>, cols: Range<usize>) -> Result<Var> {
        let (n, c) = self.dims2(x)?;
        if rows.end > n || cols.end > c || rows.start > rows.end || cols.start > cols.end {
            return Err(invalid(format!(
                "slice {rows:?}x{cols:?} out of bounds for [{n}, {c}]"
            )));
        }
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(rows.len() * cols.len());
        for r in rows.clone() {
            out.extend_from_slice(&xv[r * c + cols.start..r * c + cols.end]);
        }
        let shape = vec![rows.len(), cols.len()];
        self.push(
            "slice",
            Tensor::new(shape, out)?,
            Op::Slice { x, rows, cols },
        )
    }

    pub fn slice_rows(&mut self, x: Var, rows: Range<usize>) -> Result<Var> {
        let c = self.dims2(x)?.1;
        self.slice(x, rows, 0..c)
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        self.softmax_with_additive_mask(x, None)
    }

    /// Row-wise softmax of `x + mask`. Mask entries are `0` (visible) or
    /// `-inf` (hidden); hidden entries come out exactly zero. A row with
    /// every entry hidden is an error.
    pub fn softmax_with_additive_mask(&mut self, x: Var, mask: Option<&Tensor<T>>) -> Result<Var> {
        let (n, c) = self.dims2(x)?;
        if let Some(m) = mask {
            if m.shape() != [n, c] {
                return Err(invalid(format!(
                    "softmax mask {:?} vs logits [{n}, {c}]",
                    m.shape()
                )));
            }
        }
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); n * c];
        for r in 0..n {
            let row = &xv[r * c..(r + 1) * c];
            let shifted: Vec<T> = match mask {
                Some(m) => row.iter().zip(m.row(r)).map(|(a, b)| *a + *b).collect(),
                None => row.to_vec(),
            };
            let max = shifted.iter().copied().fold(T::neg_infinity(), T::max);
            if max == T::neg_infinity() {
                return Err(invalid(format!("softmax: row {r} is fully masked")));
            }
            let dst = &mut out[r * c..(r + 1) * c];
            let mut total = T::zero();
            for (d, s) in dst.iter_mut().zip(&shifted) {
                *d = (*s - max).exp();
                total = total + *d;
            }
            dst.iter_mut().for_each(|d| *d = *d / total);
        }
        self.push("softmax", Tensor::new(vec![n, c], out)?, Op::Softmax(x))
    }

    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let (n, c) = self.dims2(x)?;
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(n * c);
        for row in xv.chunks(c) {
            let lse = log_sum_exp(row);
            out.extend(row.iter().map(|v| *v - lse));
        }
        self.push(
            "log_softmax",
            Tensor::new(vec![n, c], out)?,
            Op::LogSoftmax(x),
        )
    }

    /// Mean over rows of `-log softmax(logits)[target]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (n, c) = self.dims2(logits)?;
        if targets.len() != n || n == 0 {
            return Err(invalid(format!(
                "cross_entropy: {} targets for {n} rows",
                targets.len()
            )));
        }
        if let Some(t) = targets.iter().find(|t| **t >= c) {
            return Err(invalid(format!(
                "cross_entropy: target {t} out of range for {c} classes"
            )));
        }
        let lv = self.value(logits).data();
        let mut probs = Vec::with_capacity(n * c);
        let mut total = 0.0;
        for (row, t) in lv.chunks(c).zip(targets) {
            let lse = log_sum_exp(row);
            total += (lse - row[*t]).f64();
            probs.extend(row.iter().map(|v| (*v - lse).exp()));
        }
        let out = Tensor::scalar(T::of(total / n as f64));
        self.push(
            "cross_entropy",
            out,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        )
    }

    /// Multiplies row `r` by the constant `factors[r]`.
    pub fn row_scale(&mut self, x: Var, factors: Vec<T>) -> Result<Var> {
        let (n, c) = self.dims2(x)?;
        if factors.len() != n {
            return Err(invalid(format!(
                "row_scale: {} factors for {n} rows",
                factors.len()
            )));
        }
        let xv = self.value(x).data();
        let data = xv
            .chunks(c)
            .zip(&factors)
            .flat_map(|(r, f)| r.iter().map(move |v| *v * *f))
            .collect();
        self.push(
            "row_scale",
            Tensor::new(vec![n, c], data)?,
            Op::RowScale { x, factors },
        )
    }

    /// Inverted dropout; the identity outside training mode.
    pub fn dropout(&mut self, x: Var, p: f64) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(invalid(format!("dropout rate {p} outside [0, 1)")));
        }
        if !self.is_training() || p == 0.0 {
            return Ok(x);
        }
        let keep = T::of(1.0 / (1.0 - p));
        let n = self.value(x).numel();
        let mask: Vec<T> = (0..n)
            .map(|_| {
                if self.rng().random::<f64>() < p {
                    T::zero()
                } else {
                    keep
                }
            })
            .collect();
        let out = zip_with(
            self.value(x),
            &Tensor::new(self.shape(x).to_vec(), mask.clone())?,
            |a, m| a * m,
        );
        self.push("dropout", out, Op::Dropout { x, mask })
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s: T = self.value(x).data().iter().copied().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        if v.numel() == 0 {
            return Err(invalid("mean of an empty tensor"));
        }
        let s = v.data().iter().copied().sum::<T>() / T::of(v.numel() as f64);
        self.push("mean", Tensor::scalar(s), Op::Mean(x))
    }

    /// Forward value `hard`, gradient passed straight to `soft`.
    pub fn straight_through(&mut self, soft: Var, hard: Tensor<T>) -> Result<Var> {
        if hard.shape() != self.shape(soft) {
            return Err(invalid("straight_through: shape mismatch"));
        }
        self.push("straight_through", hard, Op::StraightThrough { soft })
    }

    /// Symmetric Chamfer distance with non-squared Euclidean norms between
    /// `a [n, 3]` and `b [m, 3]`: mean nearest distance from `a` to `b` plus
    /// mean nearest distance from `b` to `a`. Nearest-neighbour ties go to
    /// the lowest index.
    pub fn chamfer_l1(&mut self, a: Var, b: Var) -> Result<Var> {
        self.chamfer(a, b, ChamferNorm::Euclidean)
    }

    pub fn chamfer(&mut self, a: Var, b: Var, norm: ChamferNorm) -> Result<Var> {
        let (na, ca) = self.dims2(a)?;
        let (nb, cb) = self.dims2(b)?;
        if ca != 3 || cb != 3 || na == 0 || nb == 0 {
            return Err(invalid(format!(
                "chamfer_l1 needs non-empty [n, 3] clouds, got {:?} and {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let (nn_ab, sum_ab) = nearest(av, bv, norm);
        let (nn_ba, sum_ba) = nearest(bv, av, norm);
        let value = sum_ab / na as f64 + sum_ba / nb as f64;
        self.push(
            "chamfer",
            Tensor::scalar(T::of(value)),
            Op::Chamfer {
                a,
                b,
                nn_ab,
                nn_ba,
                norm,
            },
        )
    }
}

/// Norm used inside the Chamfer distance.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ChamferNorm {
    /// Non-squared Euclidean norm.
    #[default]
    Euclidean,
    /// Coordinate-wise absolute sum.
    L1,
    /// Squared Euclidean distance.
    Squared,
}

/// For each point of `src`, the index of its nearest point in `dst` and the
/// summed distances.
fn nearest<T: Real>(src: &[T], dst: &[T], norm: ChamferNorm) -> (Vec<usize>, f64) {
    let mut idx = Vec::with_capacity(src.len() / 3);
    let mut total = 0.0;
    for p in src.chunks_exact(3) {
        let mut best = T::infinity();
        let mut arg = 0;
        for (j, q) in dst.chunks_exact(3).enumerate() {
            let dx = p[0] - q[0];
            let dy = p[1] - q[1];
            let dz = p[2] - q[2];
            let d = match norm {
                ChamferNorm::Euclidean | ChamferNorm::Squared => dx * dx + dy * dy + dz * dz,
                ChamferNorm::L1 => dx.abs() + dy.abs() + dz.abs(),
            };
            if d < best {
                best = d;
                arg = j;
            }
        }
        idx.push(arg);
        total += match norm {
            ChamferNorm::Euclidean => best.f64().sqrt(),
            ChamferNorm::L1 | ChamferNorm::Squared => best.f64(),
        };
    }
    (idx, total)
}

pub(crate) fn log_sum_exp<T: Real>(row: &[T]) -> T {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    max + row.iter().map(|v| (*v - max).exp()).sum::<T>().ln()
}

fn zip_with<T: Real>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| f(*x, *y))
        .collect();
    Tensor::new(a.shape().to_vec(), data).expect("shapes checked by caller")
}
