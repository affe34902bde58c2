use gpm_nn::checkpoint::{load_optimizer, load_params, save_optimizer, save_params};
use gpm_nn::params::uniform;
use gpm_nn::{AdamW, AdamWConfig, Graph, NnError, ParamStore, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn masked_entry_gets_zero_probability() {
    let mut g = Graph::<f64>::eval();
    let x = g.input(Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap());
    let mask = Tensor::new(vec![1, 2], vec![0.0, f64::NEG_INFINITY]).unwrap();
    let y = g.softmax_with_additive_mask(x, Some(&mask)).unwrap();
    assert_eq!(g.value(y).data(), &[1.0, 0.0]);
}

#[test]
fn fully_masked_row_is_an_error() {
    let mut g = Graph::<f64>::eval();
    let x = g.input(Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap());
    let mask = Tensor::full(&[1, 2], f64::NEG_INFINITY);
    assert!(g.softmax_with_additive_mask(x, Some(&mask)).is_err());
}

#[test]
fn uniform_cross_entropy_is_log_classes() {
    for c in [2usize, 5, 256] {
        let mut g = Graph::<f64>::eval();
        let x = g.input(Tensor::full(&[3, c], 0.25));
        let l = g.cross_entropy(x, &[0, c - 1, c / 2]).unwrap();
        assert!((g.value(l).item() - (c as f64).ln()).abs() < 1e-12);
    }
}

#[test]
fn shape_mismatch_is_invalid_argument() {
    let mut g = Graph::<f32>::eval();
    let a = g.input(Tensor::zeros(&[2, 3]));
    let b = g.input(Tensor::zeros(&[2, 2]));
    assert!(matches!(g.matmul(a, b), Err(NnError::InvalidArgument(_))));
    assert!(matches!(g.add(a, b), Err(NnError::InvalidArgument(_))));
}

#[test]
fn non_finite_result_names_the_op() {
    let mut g = Graph::<f32>::eval();
    let a = g.input(Tensor::full(&[1, 1], f32::MAX));
    match g.scale(a, 10.0) {
        Err(NnError::NumericFailure { op }) => assert_eq!(op, "scale"),
        other => panic!("expected numeric failure, got {:?}", other.map(|_| ())),
    }
}

#[test]
fn backward_of_sum_equals_sum_of_backwards() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x: Tensor<f64> = uniform(&[4, 3], 1.0, &mut rng);
    let w: Tensor<f64> = uniform(&[3, 2], 1.0, &mut rng);
    let grad = |which: u8| {
        let mut g = Graph::<f64>::eval();
        let xv = g.input(x.clone());
        let wv = g.input(w.clone());
        let y = g.matmul(xv, wv).unwrap();
        let a = g.gelu(y).unwrap();
        let l1 = g.mean(a).unwrap();
        let s = g.softmax(y).unwrap();
        let l2 = g.cross_entropy(s, &[0, 1, 1, 0]).unwrap();
        let loss = match which {
            0 => l1,
            1 => l2,
            _ => g.add(l1, l2).unwrap(),
        };
        g.backward(loss).unwrap().wrt(wv).unwrap().to_vec()
    };
    let (a, b, both) = (grad(0), grad(1), grad(2));
    for i in 0..a.len() {
        assert!((a[i] + b[i] - both[i]).abs() < 1e-12);
    }
}

#[test]
fn eval_mode_is_deterministic() {
    let run = || {
        let mut g = Graph::<f32>::new(false, 99);
        let x = g.input(Tensor::from_fn(&[8, 8], |i| (i as f32 * 0.37).sin()));
        let d = g.dropout(x, 0.5).unwrap();
        let y = g.gelu(d).unwrap();
        g.value(y).clone()
    };
    assert_eq!(run().data(), run().data());
}

fn sample_store(seed: u64) -> ParamStore<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = ParamStore::new();
    s.add("enc.w", uniform(&[5, 3], 1.0, &mut rng)).unwrap();
    s.add("enc.b", uniform(&[3], 1.0, &mut rng)).unwrap();
    s.add("héad/ü", uniform(&[2, 2, 2], 1.0, &mut rng)).unwrap();
    s
}

#[test]
fn params_and_optimizer_round_trip_bit_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let mut store = sample_store(1);
    let mut opt = AdamW::new(AdamWConfig::default(), &store);
    let grads = gpm_nn::ParamGrads::from_vec(
        store
            .iter()
            .map(|(_, p)| Some(Tensor::full(p.tensor.shape(), 0.1f32)))
            .collect(),
    );
    opt.step(&mut store, &grads, 1e-3).unwrap();
    let p = dir.path().join("model.ckpt");
    let o = dir.path().join("opt.ckpt");
    save_params(&p, &store).unwrap();
    save_optimizer(&o, &store, &opt.state).unwrap();

    let mut loaded = sample_store(2);
    load_params(&p, &mut loaded).unwrap();
    for ((_, a), (_, b)) in store.iter().zip(loaded.iter()) {
        let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a.tensor), bits(&b.tensor));
    }
    assert_eq!(load_optimizer(&o, &loaded).unwrap(), opt.state);

    // forward through loaded parameters is bit-identical
    let fwd = |s: &ParamStore<f32>| {
        let mut g = Graph::<f32>::eval();
        let x = g.input(Tensor::from_fn(&[4, 5], |i| i as f32 * 0.1));
        let w = g.param(s, s.id("enc.w").unwrap());
        let b = g.param(s, s.id("enc.b").unwrap());
        let y = g.affine(x, w, b).unwrap();
        g.value(y)
            .data()
            .iter()
            .map(|v| v.to_bits())
            .collect::<Vec<_>>()
    };
    assert_eq!(fwd(&store), fwd(&loaded));
}

#[test]
fn loading_into_mismatched_store_fails() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("model.ckpt");
    save_params(&p, &sample_store(1)).unwrap();
    let mut other = ParamStore::<f32>::new();
    other.add("missing", Tensor::zeros(&[1])).unwrap();
    assert!(load_params(&p, &mut other).is_err());
}

proptest! {
    #[test]
    fn checkpoint_codec_round_trips(values in proptest::collection::vec(any::<f32>(), 1..40), name in "[a-z./]{1,12}") {
        let t = Tensor::new(vec![values.len()], values).unwrap();
        let bytes = gpm_nn::checkpoint::encode(&[(name.clone(), t.clone())]);
        let back = gpm_nn::checkpoint::decode(&bytes).unwrap();
        prop_assert_eq!(&back[0].0, &name);
        let a: Vec<u32> = back[0].1.data().iter().map(|v| v.to_bits()).collect();
        let b: Vec<u32> = t.data().iter().map(|v| v.to_bits()).collect();
        prop_assert_eq!(a, b);
    }
}

#[test]
fn straight_through_is_hard_forward_and_soft_backward() {
    let logits = Tensor::new(vec![2, 3], vec![0.2, -0.4, 1.1, 0.5, 0.6, -1.0]).unwrap();
    let weights = Tensor::new(vec![2, 3], vec![1.0, -2.0, 0.5, 0.3, 0.7, -1.5]).unwrap();
    let run = |hard: bool| {
        let mut g = Graph::<f64>::eval();
        let l = g.input(logits.clone());
        let y = gpm_nn::gumbel::gumbel_softmax(&mut g, l, 0.5, hard, None).unwrap();
        let w = g.constant(weights.clone());
        let p = g.mul(y, w).unwrap();
        let s = g.sum(p).unwrap();
        let grads = g.backward(s).unwrap();
        (g.value(y).clone(), grads.wrt(l).unwrap().to_vec())
    };
    let (soft_y, soft_grad) = run(false);
    let (hard_y, hard_grad) = run(true);
    assert_eq!(hard_y.data(), &[0.0, 0.0, 1.0, 0.0, 1.0, 0.0]);
    assert_ne!(soft_y.data(), hard_y.data());
    assert_eq!(soft_grad, hard_grad);
}
