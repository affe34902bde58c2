mod common;

use common::{is_nearest_region, random_points};
use gpm_core::layers::Bind;
use gpm_core::model::{
    attention_mask_for, build_attention_mask, loss_total, mask_count, order_swap, part_b_builds, select_mask_region,
    select_mask_region_with, GpmConfig, GpmInput, GpmModel, SequenceOrder,
};
use gpm_nn::{Graph, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_config(m: usize) -> GpmConfig {
    GpmConfig { dim: 16, depth: 2, heads: 4, input_dim: 8, vocab: 9, groups: m, ..GpmConfig::default() }
}

fn input(cfg: &GpmConfig, m: usize, seed: u64) -> GpmInput<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let emb = Tensor::from_fn(&[m, cfg.input_dim], |_| rng.random_range(-1.0f32..1.0));
    let centers = random_points(m, &mut rng);
    let labels = (0..m).map(|_| rng.random_range(0..cfg.vocab)).collect();
    GpmInput::new(emb, centers, labels, vec![1, 3]).unwrap()
}

#[test]
fn mask_matches_visibility_rule() {
    for (a, b) in [(1, 1), (3, 2), (5, 4), (9, 8)] {
        let mask = build_attention_mask(a, b).unwrap();
        for r in 0..a + b {
            for c in 0..a + b {
                let want = if r < a { c < a } else { c < a || c <= r };
                assert_eq!(mask.get(r, c), want, "row {r} col {c}");
            }
        }
    }
    assert!(build_attention_mask(0, 2).is_err());
}

#[test]
fn swapped_mask_keeps_relations() {
    let ab = attention_mask_for(5, 4, SequenceOrder::AThenB).unwrap();
    let ba = attention_mask_for(5, 4, SequenceOrder::BThenA).unwrap();
    let slots: Vec<(bool, usize)> = (0..5).map(|i| (true, i)).chain((0..4).map(|j| (false, j))).collect();
    let row = |m: &gpm_core::model::AttentionMask, s: (bool, usize)| if s.0 { m.row_of_a(s.1) } else { m.row_of_b(s.1) };
    for x in &slots {
        for y in &slots {
            assert_eq!(ab.get(row(&ab, *x), row(&ab, *y)), ba.get(row(&ba, *x), row(&ba, *y)));
        }
    }
    assert_eq!(ba.swapped(), ab);
    let add = ab.additive::<f64>();
    assert_eq!(add.data()[1], 0.0);
    assert_eq!(add.data()[5], f64::NEG_INFINITY);
}

#[test]
fn mask_count_rounds_half_up_and_clamps() {
    assert_eq!(mask_count(0.25, 64), 16);
    assert_eq!(mask_count(0.45, 64), 29);
    assert_eq!(mask_count(0.35, 10), 4);
    assert_eq!(mask_count(0.0, 10), 1);
    assert_eq!(mask_count(0.999, 10), 9);
}

#[test]
fn mask_regions_are_nearest_neighbourhoods() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..200 {
        let centers = random_points(32, &mut rng);
        let mask = select_mask_region(&centers, (0.25, 0.45), &mut rng).unwrap();
        assert!((8..=14).contains(&mask.len()));
        assert!(mask.windows(2).all(|w| w[0] < w[1]));
        assert!(is_nearest_region(&centers, &mask));
    }
    let centers = random_points(10, &mut rng);
    let fixed = select_mask_region_with(&centers, 0.3, 4).unwrap();
    assert!(fixed.contains(&4));
    assert!(select_mask_region_with(&centers[..2], 0.3, 0).is_err());
    assert!(select_mask_region(&centers, (0.5, 1.0), &mut rng).is_err());
}

#[test]
fn input_rejects_out_of_range_mask() {
    let cfg = small_config(4);
    let emb = Tensor::zeros(&[4, cfg.input_dim]);
    assert!(GpmInput::<f32>::new(emb.clone(), vec![[0.0; 3]; 4], vec![0; 4], vec![4]).is_err());
    assert!(GpmInput::<f32>::new(emb, vec![[0.0; 3]; 3], vec![0; 4], vec![1]).is_err());
}

#[test]
fn order_does_not_change_outputs() {
    let m = 6;
    let cfg = small_config(m);
    let model = GpmModel::new(cfg.clone(), 2).unwrap();
    let inp = input(&cfg, m, 3);
    let run = |inp: &GpmInput<f32>| {
        let mut g = Graph::eval();
        let out = model.arch.forward(&mut g, &Bind::frozen(&model.params), std::slice::from_ref(inp)).unwrap();
        (g.value(out.ae_logits).clone(), g.value(out.ar_logits).clone())
    };
    let (ae, ar) = run(&inp);
    let (ae2, ar2) = run(&order_swap(&inp));
    for (x, y) in ae.data().iter().chain(ar.data()).zip(ae2.data().iter().chain(ar2.data())) {
        assert!((x - y).abs() < 1e-4, "{x} vs {y}");
    }
}

#[test]
fn part_a_encoder_never_builds_part_b() {
    let m = 5;
    let cfg = small_config(m);
    let model = GpmModel::new(cfg.clone(), 4).unwrap();
    let inp = input(&cfg, m, 5);
    let before = part_b_builds();
    let mut g = Graph::eval();
    let h = model.arch.encode_part_a(&mut g, &Bind::frozen(&model.params), std::slice::from_ref(&inp)).unwrap();
    assert_eq!(g.shape(h), &[m + 1, cfg.dim]);
    assert_eq!(part_b_builds(), before);
}

#[test]
fn fresh_model_losses_are_near_log_vocab() {
    let m = 6;
    let cfg = small_config(m);
    let model = GpmModel::new(cfg.clone(), 6).unwrap();
    let inputs: Vec<_> = (0..4).map(|s| input(&cfg, m, 10 + s)).collect();
    let mut g = Graph::eval();
    let (_, l) = model.arch.losses(&mut g, &Bind::frozen(&model.params), &inputs).unwrap();
    let ln_s = (cfg.vocab as f32).ln();
    for v in [l.ae, l.ar] {
        assert!((g.value(v).item() - ln_s).abs() < 1.0, "{} vs {ln_s}", g.value(v).item());
    }
    let sum = g.value(l.ae).item() + g.value(l.ar).item();
    assert!((g.value(l.total).item() - sum).abs() < 1e-5);
}

#[test]
fn zero_weight_drops_a_term() {
    let mut g = Graph::<f64>::eval();
    let a = g.input(Tensor::scalar(2.0));
    let b = g.input(Tensor::scalar(3.0));
    let t = loss_total(&mut g, a, b, 1.0, 0.0).unwrap();
    assert_eq!(g.value(t).item(), 2.0);
    assert!(loss_total(&mut g, a, b, -1.0, 1.0).is_err());
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(4);
    let model = GpmModel::new(cfg.clone(), 7).unwrap();
    let path = dir.path().join("m.ckpt");
    model.save(&path).unwrap();
    let back = GpmModel::load(cfg.clone(), &path).unwrap();
    assert_eq!(back.params.checksum(), model.params.checksum());
    let other = GpmConfig { dim: 24, ..cfg };
    assert!(GpmModel::load(other, &path).is_err());
}
