//! Finite-difference gradient suite over every differentiable operation and
//! the composite layers built from them, in double precision.

use std::sync::Arc;

use gpm_nn::gradcheck::{check_inputs, check_params, random_projection};
use gpm_nn::params::uniform;
use gpm_nn::{gumbel_noise, gumbel_softmax, ChamferNorm, Graph, ParamStore, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dvae::{kl_to_uniform_graph, Dvae, DvaeConfig, MiniPointNet, QuantizeMode};
use crate::error::Result;
use crate::geometry::Point;
use crate::layers::{Bind, EdgeConvStack};
use crate::model::{build_attention_mask, Gpm, GpmConfig, GpmInput};

/// Relative error accepted by the suite.
pub const TOLERANCE: f64 = 1e-4;

const COORDS: usize = 48;

/// Outcome of one check.
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub name: String,
    pub error: f64,
}

impl GradCheck {
    pub fn passed(&self) -> bool {
        self.error < TOLERANCE
    }
}

fn rand_t(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    uniform(shape, 1.0, rng)
}

fn scalarize(g: &mut Graph<f64>, out: Var) -> gpm_nn::Result<Var> {
    if g.shape(out).is_empty() {
        Ok(out)
    } else {
        random_projection(g, out, 17)
    }
}

struct Suite {
    results: Vec<GradCheck>,
}

impl Suite {
    fn inputs<F>(&mut self, name: &str, inputs: Vec<Tensor<f64>>, f: F) -> Result<()>
    where
        F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
    {
        let error = check_inputs(&inputs, COORDS, |g, v| {
            let out = f(g, v).map_err(|e| gpm_nn::NnError::InvalidArgument(e.to_string()))?;
            scalarize(g, out)
        })?;
        self.results.push(GradCheck {
            name: name.to_string(),
            error,
        });
        Ok(())
    }

    fn params<F>(&mut self, name: &str, store: &ParamStore<f64>, f: F) -> Result<()>
    where
        F: Fn(&mut Graph<f64>, &Bind<f64>) -> Result<Var>,
    {
        let error = check_params(store, COORDS, |g, s| {
            let b = Bind::trainable(s);
            let out = f(g, &b).map_err(|e| gpm_nn::NnError::InvalidArgument(e.to_string()))?;
            scalarize(g, out)
        })?;
        self.results.push(GradCheck {
            name: format!("{name} (parameters)"),
            error,
        });
        Ok(())
    }
}

fn primitive_ops(s: &mut Suite, rng: &mut ChaCha8Rng) -> Result<()> {
    let (n, c, m) = (4, 3, 5);
    let a = rand_t(&[n, c], rng);
    let b = rand_t(&[n, c], rng);
    s.inputs("matmul", vec![a.clone(), rand_t(&[c, m], rng)], |g, v| {
        Ok(g.matmul(v[0], v[1])?)
    })?;
    s.inputs(
        "matmul_nt",
        vec![a.clone(), rand_t(&[m, c], rng)],
        |g, v| Ok(g.matmul_nt(v[0], v[1])?),
    )?;
    s.inputs(
        "affine",
        vec![a.clone(), rand_t(&[c, m], rng), rand_t(&[m], rng)],
        |g, v| Ok(g.affine(v[0], v[1], v[2])?),
    )?;
    s.inputs("add", vec![a.clone(), b.clone()], |g, v| {
        Ok(g.add(v[0], v[1])?)
    })?;
    s.inputs("sub", vec![a.clone(), b.clone()], |g, v| {
        Ok(g.sub(v[0], v[1])?)
    })?;
    s.inputs("mul", vec![a.clone(), b.clone()], |g, v| {
        Ok(g.mul(v[0], v[1])?)
    })?;
    s.inputs("add_row", vec![a.clone(), rand_t(&[c], rng)], |g, v| {
        Ok(g.add_row(v[0], v[1])?)
    })?;
    s.inputs("scale", vec![a.clone()], |g, v| Ok(g.scale(v[0], -1.3)?))?;
    s.inputs("relu", vec![a.clone()], |g, v| Ok(g.relu(v[0])?))?;
    s.inputs("leaky_relu", vec![a.clone()], |g, v| {
        Ok(g.leaky_relu(v[0], 0.2)?)
    })?;
    s.inputs("gelu", vec![a.clone()], |g, v| Ok(g.gelu(v[0])?))?;
    let factors: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    s.inputs("row_scale", vec![a.clone()], move |g, v| {
        Ok(g.row_scale(v[0], factors.clone())?)
    })?;
    let pos = Tensor::from_fn(&[n, c], |i| 0.5 + a.data()[i].abs());
    s.inputs("ln", vec![pos], |g, v| Ok(g.ln(v[0])?))?;
    s.inputs("sum", vec![a.clone()], |g, v| Ok(g.sum(v[0])?))?;
    s.inputs("mean", vec![a.clone()], |g, v| Ok(g.mean(v[0])?))?;
    s.inputs(
        "layer_norm",
        vec![a.clone(), rand_t(&[c], rng), rand_t(&[c], rng)],
        |g, v| Ok(g.layer_norm(v[0], v[1], v[2], 1e-5)?),
    )?;
    let wide = rand_t(&[2 * n, 4], rng);
    s.inputs(
        "group_norm",
        vec![wide, rand_t(&[4], rng), rand_t(&[4], rng)],
        move |g, v| Ok(g.group_norm(v[0], v[1], v[2], n, 2, 1e-5)?),
    )?;
    s.inputs("softmax", vec![a.clone()], |g, v| Ok(g.softmax(v[0])?))?;
    let mask = Tensor::from_fn(&[n, c], |i| {
        if i % c <= (i / c) % c {
            0.0
        } else {
            f64::NEG_INFINITY
        }
    });
    s.inputs("masked softmax", vec![a.clone()], move |g, v| {
        Ok(g.softmax_with_additive_mask(v[0], Some(&mask))?)
    })?;
    s.inputs("log_softmax", vec![a.clone()], |g, v| {
        Ok(g.log_softmax(v[0])?)
    })?;
    let targets: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
    s.inputs("cross_entropy", vec![a.clone()], move |g, v| {
        Ok(g.cross_entropy(v[0], &targets)?)
    })?;
    let grouped = rand_t(&[3 * 4, c], rng);
    s.inputs("segment_max", vec![grouped.clone()], |g, v| {
        Ok(g.segment_max(v[0], 4)?)
    })?;
    s.inputs("segment_mean", vec![grouped.clone()], |g, v| {
        Ok(g.segment_mean(v[0], 4)?)
    })?;
    s.inputs("repeat_rows", vec![a.clone()], |g, v| {
        Ok(g.repeat_rows(v[0], 3)?)
    })?;
    let idx = Arc::new(vec![3, 0, 3, 1, 2]);
    s.inputs("gather_rows", vec![a.clone()], move |g, v| {
        Ok(g.gather_rows(v[0], idx.clone())?)
    })?;
    s.inputs("concat_cols", vec![a.clone(), b.clone()], |g, v| {
        Ok(g.concat_cols(&[v[0], v[1]])?)
    })?;
    s.inputs(
        "concat_rows",
        vec![a.clone(), rand_t(&[2, c], rng)],
        |g, v| Ok(g.concat_rows(&[v[1], v[0]])?),
    )?;
    s.inputs("slice", vec![a.clone()], |g, v| {
        Ok(g.slice(v[0], 1..3, 1..3)?)
    })?;
    s.inputs("slice_rows", vec![a.clone()], |g, v| {
        Ok(g.slice_rows(v[0], 2..4)?)
    })?;
    for (label, norm) in [
        ("chamfer euclidean", ChamferNorm::Euclidean),
        ("chamfer l1", ChamferNorm::L1),
        ("chamfer squared", ChamferNorm::Squared),
    ] {
        s.inputs(
            label,
            vec![rand_t(&[16, 3], rng), rand_t(&[12, 3], rng)],
            move |g, v| Ok(g.chamfer(v[0], v[1], norm)?),
        )?;
    }
    Ok(())
}

fn gumbel_path(s: &mut Suite, rng: &mut ChaCha8Rng) -> Result<()> {
    let noise: Tensor<f64> = gumbel_noise(&[5, 6], rng);
    for tau in [1.0, 0.0625] {
        let noise = noise.clone();
        s.inputs(
            &format!("gumbel_softmax tau {tau}"),
            vec![rand_t(&[5, 6], rng)],
            move |g, v| Ok(gumbel_softmax(g, v[0], tau, false, Some(noise.clone()))?),
        )?;
    }
    Ok(())
}

fn small_dvae_config() -> DvaeConfig {
    DvaeConfig {
        vocab: 7,
        code_dim: 6,
        hidden: 8,
        groups: 5,
        group_size: 4,
        graph_k: 2,
        edge_width: 6,
        edge_depth: 2,
        decoder_width: 5,
        fold_hidden: 6,
        ..DvaeConfig::default()
    }
}

fn layers(s: &mut Suite, rng: &mut ChaCha8Rng) -> Result<()> {
    let mut store = ParamStore::new();
    let net = MiniPointNet::new(&mut store, "pn", 8, rng)?;
    let pts = rand_t(&[3 * 4, 3], rng);
    let p2 = pts.clone();
    s.params("mini-PointNet", &store, |g, b| {
        let x = g.constant(p2.clone());
        net.forward(g, b, x, 4)
    })?;
    s.inputs("mini-PointNet (points)", vec![pts], |g, v| {
        net.forward(g, &Bind::frozen(&store), v[0], 4)
    })?;

    let mut store = ParamStore::new();
    let stack = EdgeConvStack::new(&mut store, "ec", 5, 6, 2, 2, rng)?;
    let x = rand_t(&[2 * 5, 5], rng);
    let x2 = x.clone();
    s.params("EdgeConv stack", &store, |g, b| {
        let v = g.constant(x2.clone());
        stack.forward(g, b, v, 5)
    })?;
    s.inputs("EdgeConv stack (features)", vec![x], |g, v| {
        stack.forward(g, &Bind::frozen(&store), v[0], 5)
    })?;
    Ok(())
}

fn dvae_parts(s: &mut Suite, rng: &mut ChaCha8Rng) -> Result<()> {
    let cfg = small_dvae_config();
    let (m, k, vocab) = (cfg.groups, cfg.group_size, cfg.vocab);
    let mut store = ParamStore::new();
    let dvae = Dvae::new(cfg.clone(), &mut store, rng)?;
    let centers = rand_t(&[m, 3], rng);
    let codes = rand_t(&[m, cfg.code_dim], rng);
    let (c2, z2) = (centers.clone(), codes.clone());
    s.params("folding decoder", &store, |g, b| {
        let z = g.constant(z2.clone());
        Ok(dvae.decode(g, b, z, &c2, m)?.1)
    })?;
    let c3 = centers.clone();
    s.inputs("folding decoder (codes)", vec![codes], |g, v| {
        Ok(dvae.decode(g, &Bind::frozen(&store), v[0], &c3, m)?.1)
    })?;

    let noise: Tensor<f64> = gumbel_noise(&[m, vocab], rng);
    let logits = rand_t(&[m, vocab], rng);
    let n2 = noise.clone();
    s.inputs("Gumbel-softmax codebook mixing", vec![logits], |g, v| {
        Ok(dvae
            .quantize(
                g,
                &Bind::frozen(&store),
                v[0],
                0.5,
                QuantizeMode::Soft,
                Some(n2.clone()),
            )?
            .0)
    })?;

    let patches = rand_t(&[m * k, 3], rng);
    let target = rand_t(&[m * k, 3], rng);
    s.params("dVAE soft path with KL", &store, |g, b| {
        let pts = g.constant(patches.clone());
        let h = dvae.embed(g, b, pts)?;
        let logits = dvae.logits(g, b, h, m)?;
        let (z, _) = dvae.quantize(g, b, logits, 0.7, QuantizeMode::Soft, Some(noise.clone()))?;
        let (_, recon) = dvae.decode(g, b, z, &centers, m)?;
        let t = g.constant(target.clone());
        let ch = g.chamfer(recon, t, ChamferNorm::Euclidean)?;
        let kl = kl_to_uniform_graph(g, logits)?;
        let kl = g.scale(kl, 0.1)?;
        Ok(g.add(ch, kl)?)
    })?;
    Ok(())
}

fn transformer(s: &mut Suite, rng: &mut ChaCha8Rng) -> Result<()> {
    let cfg = GpmConfig {
        dim: 8,
        depth: 2,
        heads: 2,
        mlp_ratio: 2,
        drop_path: 0.1,
        input_dim: 6,
        vocab: 7,
        groups: 5,
        ..GpmConfig::default()
    };
    let mut store = ParamStore::new();
    let gpm = Gpm::new(cfg.clone(), &mut store, rng)?;
    let m = cfg.groups;
    let items: Vec<GpmInput<f64>> = (0..2)
        .map(|i| {
            let centers: Vec<Point> = (0..m)
                .map(|_| [rng.random(), rng.random(), rng.random()])
                .collect();
            let labels: Vec<usize> = (0..m).map(|_| rng.random_range(0..cfg.vocab)).collect();
            GpmInput::new(
                rand_t(&[m, cfg.input_dim], rng),
                centers,
                labels,
                vec![i, 2, 3],
            )
        })
        .collect::<Result<_>>()?;
    s.params("transformer blocks and losses", &store, |g, b| {
        Ok(gpm.losses(g, b, &items)?.1.total)
    })?;
    let mask = build_attention_mask(3, 2)?.additive::<f64>();
    let len = mask.dims2()?.0;
    let x = rand_t(&[2 * len, cfg.dim], rng);
    s.inputs("transformer block (hidden states)", vec![x], |g, v| {
        gpm.blocks[1].forward(g, &Bind::frozen(&store), v[0], len, cfg.heads, Some(&mask))
    })?;
    Ok(())
}

/// Run every check; deterministic for a given seed.
pub fn run_gradient_suite(seed: u64) -> Result<Vec<GradCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = Suite {
        results: Vec::new(),
    };
    primitive_ops(&mut s, &mut rng)?;
    gumbel_path(&mut s, &mut rng)?;
    layers(&mut s, &mut rng)?;
    dvae_parts(&mut s, &mut rng)?;
    transformer(&mut s, &mut rng)?;
    Ok(s.results)
}
