//! Normalization, loss-range, metric and parameter-count invariants.

use acfnet_core::fusion::{alignment_loss, disentanglement_loss};
use acfnet_core::heads::{self, predict_time, total_loss, LossParts, LossWeights};
use acfnet_core::model::{attention4d, count_params, declared_block_params, ModelConfig, ASYMPTOTIC_REDUCTION_PCT};
use acfnet_core::network::{Network, Variant};
use acfnet_core::params::{ParamInit, Params};
use acfnet_core::{kernels, Graph, Tensor};
use proptest::collection::vec;
use proptest::prelude::*;

fn tensor(shape: &[usize], data: Vec<f64>) -> Tensor {
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// `(rows, cols, data)` with entries in `[-scale, scale]`.
fn matrix(max_rows: usize, max_cols: usize, scale: f64) -> impl Strategy<Value = (usize, usize, Vec<f64>)> {
    (1..=max_rows, 1..=max_cols).prop_flat_map(move |(r, c)| (Just(r), Just(c), vec(-scale..scale, r * c)))
}

fn nonzero_rows(data: &[f64], cols: usize) -> bool {
    data.chunks(cols).all(|r| r.iter().map(|v| v * v).sum::<f64>() > 1e-12)
}

fn batch_loss(f: fn(&mut Graph, acfnet_core::Var, acfnet_core::Var) -> acfnet_core::Result<acfnet_core::Var>, a: &Tensor, b: &Tensor) -> f64 {
    let mut g = Graph::new();
    let (x, y) = (g.leaf(a.clone()), g.leaf(b.clone()));
    let l = f(&mut g, x, y).unwrap();
    g.value(l).item().unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn softmax_rows_sum_to_one((r, c, data) in matrix(6, 14, 200.0), axis in 0usize..2) {
        let x = tensor(&[r, c], data);
        let s = kernels::softmax(&x, axis).unwrap();
        let (outer, inner) = if axis == 1 { (r, c) } else { (c, r) };
        for o in 0..outer {
            let sum: f64 = (0..inner)
                .map(|i| if axis == 1 { s.data()[o * c + i] } else { s.data()[i * c + o] })
                .sum();
            prop_assert!((sum - 1.0).abs() <= 1e-12, "row sum {sum}");
        }
        prop_assert!(s.data().iter().all(|&p| (0.0..=1.0).contains(&p)));
    }

    #[test]
    fn attention_weights_are_row_stochastic(
        t in 1usize..5, c in 1usize..4, e in 1usize..3, dk in 1usize..4,
        seed in any::<u64>(), scale in 0.1f64..20.0,
    ) {
        let mut init = ParamInit::new(seed);
        init.linear("st.attn.q", c + e, dk).linear("st.attn.k", c + e, dk).linear("st.attn.v", c + e, c);
        let mut params = init.finish();
        for (_, p) in params.iter_mut() {
            p.data_mut().iter_mut().for_each(|v| *v *= scale);
        }
        let sites = 2;
        let feats = Tensor::from_fn([t, c, 1, 1, sites], |i| ((i as f64) * 0.37 + seed as f64 * 1e-3).sin()).unwrap();
        let embed = Tensor::from_fn([t, e], |i| (i as f64 * 1.3).cos()).unwrap();
        let mut g = Graph::new();
        let (f, em) = (g.leaf(feats), g.leaf(embed));
        let att = attention4d(&mut g, &params, f, em).unwrap();
        let w = g.value(att.weights);
        prop_assert_eq!(w.shape(), &[sites, t, t]);
        for row in w.data().chunks(t) {
            let sum: f64 = row.iter().sum();
            prop_assert!((sum - 1.0).abs() <= 1e-12);
            prop_assert!(row.iter().all(|&p| p >= 0.0));
        }
    }

    #[test]
    fn survival_head_is_a_distribution(h in vec(-50.0f64..50.0, 32), seed in any::<u64>()) {
        let cfg = ModelConfig::desk();
        let mut init = ParamInit::new(seed);
        heads::declare_params(&cfg, &mut init);
        let params = init.finish();
        let mut g = Graph::new();
        let x = g.leaf(tensor(&[1, 32], h));
        let p = heads::survival_head(&mut g, &params, x).unwrap();
        let sum: f64 = g.value(p).data().iter().sum();
        prop_assert!((sum - 1.0).abs() <= 1e-9);
        let r = heads::recurrence_head(&mut g, &params, x).unwrap();
        prop_assert!(g.value(r).data().iter().all(|&p| (0.0..=1.0).contains(&p)));
    }

    #[test]
    fn alignment_loss_is_bounded((b, d, a) in matrix(8, 6, 10.0), seed in any::<u64>()) {
        prop_assume!(nonzero_rows(&a, d));
        let other: Vec<f64> = (0..b * d).map(|i| ((i as u64).wrapping_mul(seed | 1) % 1000) as f64 / 500.0 - 1.0 + 1e-3).collect();
        prop_assume!(nonzero_rows(&other, d));
        let l = batch_loss(alignment_loss, &tensor(&[b, d], a.clone()), &tensor(&[b, d], other));
        prop_assert!((-1.0..=1.0).contains(&l), "{l}");
        let same = batch_loss(alignment_loss, &tensor(&[b, d], a.clone()), &tensor(&[b, d], a));
        prop_assert!((same + 1.0).abs() <= 1e-12);
    }

    #[test]
    fn disentanglement_loss_is_nonnegative((b, d, a) in matrix(8, 6, 10.0), shift in -3.0f64..3.0) {
        let x = tensor(&[b, d], a.clone());
        let y = tensor(&[b, d], a.iter().enumerate().map(|(i, v)| v * (1.0 + (i % 3) as f64) + shift).collect());
        prop_assert!(batch_loss(disentanglement_loss, &x, &y) >= 0.0);
        prop_assert_eq!(batch_loss(disentanglement_loss, &x, &x), 0.0);
        let row0 = |t: &Tensor| tensor(&[1, d], t.data()[..d].to_vec());
        prop_assert_eq!(batch_loss(disentanglement_loss, &row0(&x), &row0(&y)), 0.0);
    }

    #[test]
    fn predict_time_ignores_monotone_transforms(p in vec(0.0f64..1.0, 12), a in 0.1f64..5.0, b in -3.0f64..3.0) {
        let t = predict_time(&p);
        let affine: Vec<f64> = p.iter().map(|v| a * v + b).collect();
        let cubed: Vec<f64> = p.iter().map(|v| v * v * v).collect();
        let logit: Vec<f64> = p.iter().map(|v| (v / (1.0 - v + 1e-300)).ln()).collect();
        prop_assert_eq!(predict_time(&affine), t);
        prop_assert_eq!(predict_time(&cubed), t);
        prop_assert_eq!(predict_time(&logit), t);
        prop_assert!((1..=12).contains(&t));
    }

    #[test]
    fn total_loss_is_linear(a in vec(-5.0f64..5.0, 4), b in vec(-5.0f64..5.0, 4)) {
        let parts = |v: &[f64]| LossParts { surv: v[0], recur: v[1], align: v[2], dis: v[3] };
        let sum: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x + y).collect();
        let w = LossWeights::default();
        let lhs = total_loss(parts(&sum), w).unwrap();
        let rhs = total_loss(parts(&a), w).unwrap() + total_loss(parts(&b), w).unwrap();
        prop_assert!((lhs - rhs).abs() <= 1e-12);
    }
}

#[test]
fn predict_time_examples() {
    let mut one_hot = vec![0.0; 12];
    one_hot[4] = 1.0;
    assert_eq!(predict_time(&one_hot), 5);
    assert_eq!(predict_time(&[1.0 / 12.0; 12]), 1);
    let mut p = vec![0.1; 12];
    p[1] = 0.9;
    assert_eq!(predict_time(&p), 2);
}

#[test]
fn total_loss_examples() {
    let w = LossWeights::default();
    let t = |s, r, a, d| total_loss(LossParts { surv: s, recur: r, align: a, dis: d }, w).unwrap();
    assert!((t(1.0, 1.0, 1.0, 1.0) - 1.0).abs() < 1e-15);
    assert!((t(2.0, 0.0, 0.0, 0.0) - 1.0).abs() < 1e-15);
    assert!((t(0.0, 0.0, -1.0, 0.25) + 0.075).abs() < 1e-15);
    assert!(total_loss(LossParts { surv: f64::NAN, ..Default::default() }, w).is_err());
}

#[test]
fn separable_block_is_smaller_for_every_width() {
    for c in 1..=1024 {
        let p = count_params(c);
        assert_eq!(p.separable_block, 30 * c * c + 2 * c);
        assert_eq!(p.dense_baseline, 81 * c * c + c);
        assert!(p.separable_block < p.dense_baseline, "C = {c}");
        assert!(p.reduction_pct < ASYMPTOTIC_REDUCTION_PCT);
    }
    assert!((ASYMPTOTIC_REDUCTION_PCT - 62.96).abs() < 0.005);
    assert!((count_params(1 << 20).reduction_pct - ASYMPTOTIC_REDUCTION_PCT).abs() < 1e-4);
}

#[test]
fn allocated_block_matches_the_formula() {
    for cfg in [ModelConfig::desk(), ModelConfig::toy()] {
        let net = Network::new(cfg.clone(), Variant::full(), 0).unwrap();
        assert_eq!(declared_block_params(&net.params).unwrap(), count_params(cfg.st_channels()).separable_block);
    }
}

#[test]
fn initialization_respects_fan_in_bounds() {
    let net = Network::new(ModelConfig::desk(), Variant::full(), 11).unwrap();
    let w = net.params.get("st.spatial.w").unwrap();
    let fan_in = w.shape()[1] * 27;
    let bound = 1.0 / (fan_in as f64).sqrt();
    assert!(w.data().iter().all(|v| v.abs() <= bound));
    let again = Network::new(ModelConfig::desk(), Variant::full(), 11).unwrap();
    assert_eq!(net.params, again.params);
    let other: Params = Network::new(ModelConfig::desk(), Variant::full(), 12).unwrap().params;
    assert_ne!(net.params, other);
}
