//! Gumbel-softmax relaxation of categorical sampling.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Result};
use crate::graph::{Graph, Var};
use crate::real::Real;
use crate::tensor::Tensor;

/// Standard Gumbel draws `-ln(-ln U)`, `U ~ Uniform(0, 1)`.
pub fn gumbel_noise<T: Real>(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<T> {
    Tensor::from_fn(shape, |_| {
        let u: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
        T::of(-(-u.ln()).ln())
    })
}

/// `softmax((logits + noise) / tau)` row-wise. With `hard`, the forward
/// value is the one-hot argmax of that sample while gradients flow through
/// the soft sample (straight-through). `noise = None` is the zero-noise
/// test hook.
pub fn gumbel_softmax<T: Real>(
    g: &mut Graph<T>,
    logits: Var,
    tau: f64,
    hard: bool,
    noise: Option<Tensor<T>>,
) -> Result<Var> {
    if !(tau > 0.0) {
        return Err(invalid(format!(
            "gumbel_softmax: temperature must be positive, got {tau}"
        )));
    }
    let perturbed = match noise {
        Some(n) => {
            let nv = g.constant(n);
            g.add(logits, nv)?
        }
        None => logits,
    };
    let scaled = g.scale(perturbed, 1.0 / tau)?;
    let soft = g.softmax(scaled)?;
    if !hard {
        return Ok(soft);
    }
    let v = g.value(soft);
    let (n, c) = v.dims2()?;
    let mut onehot = Tensor::zeros(&[n, c]);
    for (r, j) in v.argmax_rows().into_iter().enumerate() {
        onehot.data_mut()[r * c + j] = T::one();
    }
    g.straight_through(soft, onehot)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn logits(g: &mut Graph<f64>) -> Var {
        g.input(Tensor::new(vec![2, 4], vec![0.3, -1.0, 2.0, 0.1, 1.5, 1.4, -0.2, 0.0]).unwrap())
    }

    #[test]
    fn soft_rows_sum_to_one() {
        let mut g = Graph::<f64>::eval();
        let l = logits(&mut g);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let y =
            gumbel_softmax(&mut g, l, 0.7, false, Some(gumbel_noise(&[2, 4], &mut rng))).unwrap();
        for row in g.value(y).data().chunks(4) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|p| *p > 0.0));
        }
    }

    #[test]
    fn hard_is_exactly_one_hot() {
        let mut g = Graph::<f64>::eval();
        let l = logits(&mut g);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let y =
            gumbel_softmax(&mut g, l, 1.0, true, Some(gumbel_noise(&[2, 4], &mut rng))).unwrap();
        for row in g.value(y).data().chunks(4) {
            assert_eq!(row.iter().filter(|v| **v == 1.0).count(), 1);
            assert_eq!(row.iter().filter(|v| **v == 0.0).count(), 3);
        }
    }

    #[test]
    fn zero_noise_unit_temperature_is_softmax() {
        let mut g = Graph::<f64>::eval();
        let l = logits(&mut g);
        let y = gumbel_softmax(&mut g, l, 1.0, false, None).unwrap();
        let s = g.softmax(l).unwrap();
        assert_eq!(g.value(y).data(), g.value(s).data());
    }

    #[test]
    fn low_temperature_concentrates_on_perturbed_argmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let noise: Tensor<f64> = gumbel_noise(&[2, 4], &mut rng);
        let mut g = Graph::<f64>::eval();
        let l = logits(&mut g);
        let want: Vec<usize> = g
            .value(l)
            .data()
            .iter()
            .zip(noise.data())
            .map(|(a, b)| a + b)
            .collect::<Vec<_>>()
            .chunks(4)
            .map(|r| (0..4).fold(0, |best, j| if r[j] > r[best] { j } else { best }))
            .collect();
        let y = gumbel_softmax(&mut g, l, 0.01, false, Some(noise)).unwrap();
        let v = g.value(y);
        assert_eq!(v.argmax_rows(), want);
        for (r, j) in want.iter().enumerate() {
            assert!(v.data()[r * 4 + j] > 0.99);
        }
    }

    #[test]
    fn non_positive_temperature_rejected() {
        let mut g = Graph::<f64>::eval();
        let l = logits(&mut g);
        assert!(gumbel_softmax(&mut g, l, 0.0, false, None).is_err());
        assert!(gumbel_softmax(&mut g, l, -1.0, true, None).is_err());
    }
}
