//! Every differentiable op against central finite differences, over several
//! random shapes, in double precision.

use std::sync::Arc;

use gpm_nn::gradcheck::{check_inputs, random_projection};
use gpm_nn::params::uniform;
use gpm_nn::{gumbel_noise, gumbel_softmax, Graph, Result, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-4;
const SHAPES: [(usize, usize); 5] = [(1, 1), (2, 3), (4, 2), (3, 5), (6, 4)];

fn rand_t(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    uniform(shape, 1.0, rng)
}

fn check<F>(name: &str, inputs: Vec<Tensor<f64>>, f: F)
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let err = check_inputs(&inputs, 64, |g, v| {
        let out = f(g, v)?;
        if g.value(out).numel() == 1 && g.shape(out).is_empty() {
            Ok(out)
        } else {
            random_projection(g, out, 17)
        }
    })
    .unwrap();
    assert!(err < TOL, "{name}: relative error {err:e}");
}

#[test]
fn matmul_and_affine() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for (n, k) in SHAPES {
        let m = rng.random_range(1..5);
        check(
            "matmul",
            vec![rand_t(&[n, k], &mut rng), rand_t(&[k, m], &mut rng)],
            |g, v| g.matmul(v[0], v[1]),
        );
        check(
            "matmul_nt",
            vec![rand_t(&[n, k], &mut rng), rand_t(&[m, k], &mut rng)],
            |g, v| g.matmul_nt(v[0], v[1]),
        );
        check(
            "affine",
            vec![
                rand_t(&[n, k], &mut rng),
                rand_t(&[k, m], &mut rng),
                rand_t(&[m], &mut rng),
            ],
            |g, v| g.affine(v[0], v[1], v[2]),
        );
    }
}

#[test]
fn elementwise() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for (n, c) in SHAPES {
        let a = rand_t(&[n, c], &mut rng);
        let b = rand_t(&[n, c], &mut rng);
        check("add", vec![a.clone(), b.clone()], |g, v| g.add(v[0], v[1]));
        check("sub", vec![a.clone(), b.clone()], |g, v| g.sub(v[0], v[1]));
        check("mul", vec![a.clone(), b.clone()], |g, v| g.mul(v[0], v[1]));
        check("scale", vec![a.clone()], |g, v| g.scale(v[0], -1.7));
        check("relu", vec![a.clone()], |g, v| g.relu(v[0]));
        check("leaky_relu", vec![a.clone()], |g, v| {
            g.leaky_relu(v[0], 0.2)
        });
        check("gelu", vec![a.clone()], |g, v| g.gelu(v[0]));
        check(
            "add_row",
            vec![a.clone(), rand_t(&[c], &mut rng)],
            |g, v| g.add_row(v[0], v[1]),
        );
        let factors: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        check("row_scale", vec![a.clone()], move |g, v| {
            g.row_scale(v[0], factors.clone())
        });
        let pos = Tensor::from_fn(&[n, c], |i| 0.5 + a.data()[i].abs());
        check("ln", vec![pos], |g, v| g.ln(v[0]));
        check("sum", vec![a.clone()], |g, v| g.sum(v[0]));
        check("mean", vec![a], |g, v| g.mean(v[0]));
    }
}

#[test]
fn normalization_and_softmax_family() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for (n, c) in SHAPES {
        let c = c.max(2);
        let x = rand_t(&[n, c], &mut rng);
        check(
            "layer_norm",
            vec![x.clone(), rand_t(&[c], &mut rng), rand_t(&[c], &mut rng)],
            |g, v| g.layer_norm(v[0], v[1], v[2], 1e-5),
        );
        for (block, groups) in [(n, 1), (1, c), (n, if c % 2 == 0 { 2 } else { 1 })] {
            check(
                "group_norm",
                vec![x.clone(), rand_t(&[c], &mut rng), rand_t(&[c], &mut rng)],
                move |g, v| g.group_norm(v[0], v[1], v[2], block, groups, 1e-5),
            );
        }
        let stacked = rand_t(&[2 * n, 2 * c], &mut rng);
        check(
            "group_norm blocks",
            vec![
                stacked,
                rand_t(&[2 * c], &mut rng),
                rand_t(&[2 * c], &mut rng),
            ],
            move |g, v| g.group_norm(v[0], v[1], v[2], n, 2, 1e-5),
        );
        check("softmax", vec![x.clone()], |g, v| g.softmax(v[0]));
        let mask = Tensor::from_fn(&[n, c], |i| {
            if i % c == 0 || (i * 7) % 3 != 0 {
                0.0
            } else {
                f64::NEG_INFINITY
            }
        });
        check("masked softmax", vec![x.clone()], move |g, v| {
            g.softmax_with_additive_mask(v[0], Some(&mask))
        });
        check("log_softmax", vec![x.clone()], |g, v| g.log_softmax(v[0]));
        let targets: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
        check("cross_entropy", vec![x], move |g, v| {
            g.cross_entropy(v[0], &targets)
        });
    }
}

#[test]
fn set_and_indexing_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for (groups, c) in SHAPES {
        let k = rng.random_range(1..5);
        let x = rand_t(&[groups * k, c], &mut rng);
        check("segment_max", vec![x.clone()], move |g, v| {
            g.segment_max(v[0], k)
        });
        check("segment_mean", vec![x.clone()], move |g, v| {
            g.segment_mean(v[0], k)
        });
        check("repeat_rows", vec![x.clone()], |g, v| {
            g.repeat_rows(v[0], 3)
        });
        let idx: Vec<usize> = (0..7).map(|_| rng.random_range(0..groups * k)).collect();
        let idx = Arc::new(idx);
        check("gather_rows", vec![x.clone()], move |g, v| {
            g.gather_rows(v[0], idx.clone())
        });
        let y = rand_t(&[groups * k, 2], &mut rng);
        check("concat_cols", vec![x.clone(), y], |g, v| {
            g.concat_cols(&[v[0], v[1], v[0]])
        });
        let z = rand_t(&[3, c], &mut rng);
        check("concat_rows", vec![x.clone(), z], |g, v| {
            g.concat_rows(&[v[1], v[0]])
        });
        let rows = groups * k;
        check("slice", vec![x], move |g, v| {
            g.slice(v[0], rows / 2..rows, c / 2..c)
        });
    }
}

#[test]
fn chamfer_both_arguments() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for (n, m) in [(1, 1), (3, 5), (8, 4), (16, 16), (7, 12)] {
        check(
            "chamfer_l1",
            vec![rand_t(&[n, 3], &mut rng), rand_t(&[m, 3], &mut rng)],
            |g, v| g.chamfer_l1(v[0], v[1]),
        );
        check(
            "chamfer L1 norm",
            vec![rand_t(&[n, 3], &mut rng), rand_t(&[m, 3], &mut rng)],
            |g, v| g.chamfer(v[0], v[1], gpm_nn::ChamferNorm::L1),
        );
        check(
            "chamfer squared norm",
            vec![rand_t(&[n, 3], &mut rng), rand_t(&[m, 3], &mut rng)],
            |g, v| g.chamfer(v[0], v[1], gpm_nn::ChamferNorm::Squared),
        );
    }
}

#[test]
fn gumbel_softmax_soft_path() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for (n, c) in SHAPES {
        let noise: Tensor<f64> = gumbel_noise(&[n, c], &mut rng);
        for tau in [1.0, 0.5, 2.0] {
            let noise = noise.clone();
            check(
                "gumbel_softmax",
                vec![rand_t(&[n, c], &mut rng)],
                move |g, v| gumbel_softmax(g, v[0], tau, false, Some(noise.clone())),
            );
        }
    }
}

#[test]
fn dropout_gradient_uses_recorded_mask() {
    // Stochastic ops are checked with the mask held fixed: the same seed
    // reproduces the same mask in every evaluation.
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = rand_t(&[5, 6], &mut rng);
    let f = |g: &mut Graph<f64>, v: Var| -> Result<Var> {
        let d = g.dropout(v, 0.3)?;
        random_projection(g, d, 3)
    };
    let mut g = Graph::new(true, 42);
    let v = g.input(x.clone());
    let out = f(&mut g, v).unwrap();
    let grads = g.backward(out).unwrap();
    let analytic = grads.wrt(v).unwrap().to_vec();
    let eps = 1e-6;
    let mut numeric = Vec::new();
    for i in 0..x.numel() {
        let eval = |delta: f64| {
            let mut t = x.clone();
            t.data_mut()[i] += delta;
            let mut g = Graph::new(true, 42);
            let v = g.input(t);
            let o = f(&mut g, v).unwrap();
            g.value(o).item()
        };
        numeric.push((eval(eps) - eval(-eps)) / (2.0 * eps));
    }
    assert!(gpm_nn::gradcheck::relative_error(&analytic, &numeric) < TOL);
}
