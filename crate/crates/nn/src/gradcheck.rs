//! Central finite-difference gradient checks in double precision.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Result};
use crate::graph::{Graph, Var};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Step used for central differences.
pub const FD_STEP: f64 = 1e-6;

/// Norm-wise relative error `|a - n| / max(|a|, |n|)` over the checked
/// coordinates; zero when both vectors are negligibly small.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n) * (a - n))
        .sum::<f64>()
        .sqrt();
    let na = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
    let denom = na.max(nn);
    if denom < 1e-8 {
        0.0
    } else {
        diff / denom
    }
}

/// Reduce any tensor to a scalar with fixed random weights, so every output
/// entry contributes to the checked gradient.
pub fn random_projection(g: &mut Graph<f64>, out: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = g.shape(out).to_vec();
    let w = crate::params::uniform::<f64>(&shape, 1.0, &mut rng);
    let wv = g.constant(w);
    let prod = g.mul(out, wv)?;
    g.sum(prod)
}

fn pick(n: usize, limit: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if n <= limit {
        (0..n).collect()
    } else {
        let mut idx = sample(rng, n, limit).into_vec();
        idx.sort_unstable();
        idx
    }
}

/// Check gradients of the scalar `f(graph, inputs)` with respect to every
/// input tensor; at most `max_coords` coordinates per tensor are perturbed.
/// Returns the largest relative error over the inputs.
pub fn check_inputs<F>(inputs: &[Tensor<f64>], max_coords: usize, f: F) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::eval();
        let vars: Vec<Var> = vals.iter().map(|t| g.input(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).item())
    };
    let mut g = Graph::eval();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    if g.value(out).numel() != 1 {
        return Err(invalid("gradient check needs a scalar function"));
    }
    let grads = g.backward(out)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let mut worst: f64 = 0.0;
    for (k, v) in vars.iter().enumerate() {
        let analytic_full = grads
            .wrt(*v)
            .map(|s| s.to_vec())
            .unwrap_or_else(|| vec![0.0; inputs[k].numel()]);
        let coords = pick(inputs[k].numel(), max_coords, &mut rng);
        let mut analytic = Vec::with_capacity(coords.len());
        let mut numeric = Vec::with_capacity(coords.len());
        for &c in &coords {
            let mut vals = inputs.to_vec();
            vals[k].data_mut()[c] += FD_STEP;
            let up = eval(&vals)?;
            vals[k].data_mut()[c] -= 2.0 * FD_STEP;
            let down = eval(&vals)?;
            numeric.push((up - down) / (2.0 * FD_STEP));
            analytic.push(analytic_full[c]);
        }
        worst = worst.max(relative_error(&analytic, &numeric));
    }
    Ok(worst)
}

/// Same as [`check_inputs`] but perturbing the parameters of `store`.
pub fn check_params<F>(store: &ParamStore<f64>, max_coords: usize, f: F) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let mut g = Graph::eval();
    let out = f(&mut g, store)?;
    let grads = g.backward(out)?.for_store(store);
    let mut rng = ChaCha8Rng::seed_from_u64(0x9a7a);
    let mut worst: f64 = 0.0;
    let mut probe = store.clone();
    for id in store.ids() {
        let analytic_full = grads
            .get(id)
            .expect("for_store fills every parameter")
            .data()
            .to_vec();
        let coords = pick(store.get(id).numel(), max_coords, &mut rng);
        let mut analytic = Vec::with_capacity(coords.len());
        let mut numeric = Vec::with_capacity(coords.len());
        for &c in &coords {
            let orig = store.get(id).data()[c];
            probe.get_mut(id).data_mut()[c] = orig + FD_STEP;
            let up = {
                let mut g = Graph::eval();
                let o = f(&mut g, &probe)?;
                g.value(o).item()
            };
            probe.get_mut(id).data_mut()[c] = orig - FD_STEP;
            let down = {
                let mut g = Graph::eval();
                let o = f(&mut g, &probe)?;
                g.value(o).item()
            };
            probe.get_mut(id).data_mut()[c] = orig;
            numeric.push((up - down) / (2.0 * FD_STEP));
            analytic.push(analytic_full[c]);
        }
        worst = worst.max(relative_error(&analytic, &numeric));
    }
    Ok(worst)
}
