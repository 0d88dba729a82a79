//! Optimizer, virtual-batch gradients and training-loop invariants.

use std::collections::BTreeMap;

use acfnet_core::heads::{Labels, LossWeights, SurvivalLoss};
use acfnet_core::model::ModelConfig;
use acfnet_core::network::{Network, Variant};
use acfnet_core::optim::{adamw_step, AdamWConfig, AdamWState, PlateauConfig, PlateauState};
use acfnet_core::params::Params;
use acfnet_core::preprocess::{preprocess_hu, PreprocessConfig};
use acfnet_core::synth::CohortSpec;
use acfnet_core::trainer::{Example, TrainConfig, Trainer};
use acfnet_core::{Graph, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Textbook decoupled-decay AdamW on flat vectors.
struct RefAdamW {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl RefAdamW {
    fn new(shapes: &[usize]) -> Self {
        RefAdamW { m: shapes.iter().map(|&n| vec![0.0; n]).collect(), v: shapes.iter().map(|&n| vec![0.0; n]).collect(), t: 0 }
    }

    fn step(&mut self, params: &mut [Vec<f64>], grads: &[Vec<f64>], lr: f64, c: &AdamWConfig) {
        self.t += 1;
        let bc1 = 1.0 - c.beta1.powi(self.t);
        let bc2 = 1.0 - c.beta2.powi(self.t);
        for (k, p) in params.iter_mut().enumerate() {
            for i in 0..p.len() {
                let g = grads[k][i];
                self.m[k][i] = c.beta1 * self.m[k][i] + (1.0 - c.beta1) * g;
                self.v[k][i] = c.beta2 * self.v[k][i] + (1.0 - c.beta2) * g * g;
                let m_hat = self.m[k][i] / bc1;
                let v_hat = self.v[k][i] / bc2;
                p[i] -= lr * (m_hat / (v_hat.sqrt() + c.eps) + c.weight_decay * p[i]);
            }
        }
    }
}

#[test]
fn adamw_matches_reference_for_100_steps() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for trial in 0..10 {
        let shapes: Vec<usize> = (0..3).map(|_| rng.random_range(1..=20)).collect();
        let names: Vec<String> = (0..3).map(|k| format!("p{k}")).collect();
        let mut flat: Vec<Vec<f64>> = shapes.iter().map(|&n| (0..n).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
        let mut params = Params::new();
        for (name, v) in names.iter().zip(&flat) {
            params.insert(name.clone(), Tensor::vector(v).unwrap());
        }
        let cfg = AdamWConfig { weight_decay: if trial % 2 == 0 { 0.01 } else { 0.3 }, ..Default::default() };
        let mut state = AdamWState::new(&params);
        let mut reference = RefAdamW::new(&shapes);
        for step in 0..100 {
            let lr = 1e-3 * (1.0 + (step % 7) as f64);
            let grads: Vec<Vec<f64>> = shapes.iter().map(|&n| (0..n).map(|_| rng.random_range(-5.0..5.0)).collect()).collect();
            let map: BTreeMap<String, Tensor> =
                names.iter().zip(&grads).map(|(n, g)| (n.clone(), Tensor::vector(g).unwrap())).collect();
            adamw_step(&mut params, &map, &mut state, lr, &cfg).unwrap();
            reference.step(&mut flat, &grads, lr, &cfg);
        }
        for (name, want) in names.iter().zip(&flat) {
            for (a, b) in params.get(name).unwrap().data().iter().zip(want) {
                assert!((a - b).abs() <= 1e-12, "{name}: {a} vs {b}");
            }
        }
        assert_eq!(state.step, 100);
    }
}

#[test]
fn adamw_rejects_missing_gradients() {
    let mut params = Params::new();
    params.insert("a", Tensor::vector(&[1.0]).unwrap());
    params.insert("b", Tensor::vector(&[1.0]).unwrap());
    let mut state = AdamWState::new(&params);
    let mut grads = BTreeMap::new();
    grads.insert("a".to_string(), Tensor::vector(&[1.0]).unwrap());
    assert!(adamw_step(&mut params, &grads, &mut state, 1e-3, &AdamWConfig::default()).is_err());
}

#[test]
fn plateau_halves_after_patience_and_respects_floor() {
    let cfg = PlateauConfig { factor: 0.5, patience: 5, threshold: 0.0, min_lr: 1e-5 };
    let mut s = PlateauState::new(1e-4);
    assert_eq!(s.step(1.0, &cfg).unwrap(), 1e-4);
    for _ in 0..5 {
        assert_eq!(s.step(1.0, &cfg).unwrap(), 1e-4);
    }
    assert_eq!(s.step(1.0, &cfg).unwrap(), 5e-5);
    assert_eq!(s.step(0.5, &cfg).unwrap(), 5e-5);
    for _ in 0..30 {
        s.step(2.0, &cfg).unwrap();
    }
    assert_eq!(s.lr, 1e-5);
    assert!(s.step(f64::NAN, &cfg).is_err());
}

fn toy_examples(n: usize, seed: u64) -> Vec<Example> {
    let spec = CohortSpec { n: n.max(3), seed, ..Default::default() };
    (0..n)
        .map(|i| {
            let (s, p) = spec.generate_one(i).unwrap();
            Example {
                id: s.id,
                volume_hu: preprocess_hu(&s.volume, p.anchor_slice, PreprocessConfig { n_slices: 8, target: 16 }).unwrap(),
                clinical: s.clinical.to_array(),
                labels: s.labels,
            }
        })
        .collect()
}

fn grads_of(g: &Graph, grads: &acfnet_core::Gradients, into: &mut BTreeMap<String, Tensor>) {
    for (name, t) in g.param_grads(grads) {
        match into.get_mut(&name) {
            Some(acc) => {
                let sum: Vec<f64> = acc.data().iter().zip(t.data()).map(|(a, b)| a + b).collect();
                *acc = Tensor::new(acc.shape().to_vec(), sum).unwrap();
            }
            None => {
                into.insert(name, t);
            }
        }
    }
}

/// Per-sample task gradients plus the batch terms pushed back through each
/// sample's truncated tape equal the gradient of the one-graph objective.
#[test]
fn retained_tapes_reproduce_the_batch_gradient() {
    let data = toy_examples(4, 5);
    for name in ["full", "3d_lstm+fuse+align", "3d_only+fuse+align+dis"] {
        let variant: Variant = name.parse().unwrap();
        let net = Network::new(ModelConfig::toy(), variant, 9).unwrap();
        let weights = variant.loss_weights(LossWeights::default());
        let inputs: Vec<(Tensor, Tensor, Labels)> = data
            .iter()
            .map(|e| {
                let v = acfnet_core::preprocess::normalize_hu(&e.volume_hu).unwrap().to_tensor().unwrap();
                let c = Tensor::vector(&e.clinical.map(|x| x / 50.0)).unwrap();
                (v, c, e.labels)
            })
            .collect();

        let mut whole = Graph::new();
        let vars: Vec<_> = inputs
            .iter()
            .map(|(v, c, l)| {
                let (vv, cv) = net.inputs(&mut whole, v, c).unwrap();
                (vv, cv, *l)
            })
            .collect();
        let obj = net.batch_objective(&mut whole, &vars, weights, SurvivalLoss::CrossEntropy).unwrap();
        let want = whole.param_grads(&whole.backward(obj).unwrap());

        let mut got = BTreeMap::new();
        let mut tapes = Vec::new();
        for (v, c, l) in &inputs {
            let mut g = Graph::new();
            let (vv, cv) = net.inputs(&mut g, v, c).unwrap();
            let fwd = net.forward(&mut g, vv, cv).unwrap();
            let (o, _, _) = net.task_objective(&mut g, &fwd, *l, weights, SurvivalLoss::CrossEntropy).unwrap();
            grads_of(&g, &g.backward(o).unwrap(), &mut got);
            g.truncate(fwd.trunk_len);
            tapes.push((g, fwd.h_img, fwd.h_clin.unwrap()));
        }
        let hi: Vec<Tensor> = tapes.iter().map(|(g, h, _)| g.value(*h).clone()).collect();
        let hc: Vec<Tensor> = tapes.iter().map(|(g, _, h)| g.value(*h).clone()).collect();
        let aux = net.aux_losses(&hi, &hc, weights).unwrap();
        for ((g, h_img, h_clin), (gi, gc)) in tapes.iter().zip(aux.grads) {
            let grads = g.backward_seeded(&[(*h_img, gi), (*h_clin, gc)]).unwrap();
            grads_of(g, &grads, &mut got);
        }

        assert_eq!(got.keys().collect::<Vec<_>>(), want.keys().collect::<Vec<_>>(), "{name}");
        for (k, w) in &want {
            let scale = w.data().iter().fold(1e-8f64, |m, v| m.max(v.abs()));
            let err = got[k].max_abs_diff(w).unwrap();
            assert!(err <= 1e-10 * scale, "{name}/{k}: {err}");
        }
    }
}

fn toy_trainer(cfg: TrainConfig, train: &[Example]) -> Trainer {
    Trainer::new(ModelConfig::toy(), cfg, train).unwrap()
}

fn run(cfg: TrainConfig, train: &[Example], val: &[Example], epochs: usize) -> (Vec<String>, Params) {
    let mut t = toy_trainer(cfg, train);
    let reports = (0..epochs).map(|_| serde_json::to_string(&t.run_epoch(train, val).unwrap()).unwrap()).collect();
    (reports, t.net.params)
}

#[test]
fn zeroed_batch_terms_make_grouping_irrelevant() {
    let data = toy_examples(9, 2);
    let (train, val) = data.split_at(7);
    let zero = LossWeights { align: 0.0, dis: 0.0, ..Default::default() };
    let base = TrainConfig { learning_rate: 1e-3, augment: false, weights: zero, ..Default::default() };
    let a = run(TrainConfig { virtual_batch: 8, ..base.clone() }, train, val, 2).1;
    let b = run(TrainConfig { virtual_batch: 3, ..base.clone() }, train, val, 2).1;
    let c = run(TrainConfig { virtual_batch: 2, variant: "full-align-dis".parse().unwrap(), ..base.clone() }, train, val, 2).1;
    assert_eq!(a, b);
    assert_eq!(a, c);

    // with the terms active the grouping does matter
    let on = TrainConfig { weights: LossWeights::default(), ..base };
    let x = run(TrainConfig { virtual_batch: 8, ..on.clone() }, train, val, 1).1;
    let y = run(TrainConfig { virtual_batch: 3, ..on }, train, val, 1).1;
    assert_ne!(x, y);
}

#[test]
fn zeroed_batch_terms_send_no_gradient_for_any_pairing() {
    let net = Network::new(ModelConfig::toy(), Variant::full(), 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let rows = |rng: &mut ChaCha8Rng| -> Vec<Tensor> {
        (0..5).map(|_| Tensor::from_fn([1, 32], |_| rng.random_range(-1.0..1.0)).unwrap()).collect()
    };
    let (hi, mut hc) = (rows(&mut rng), rows(&mut rng));
    let zero = LossWeights { align: 0.0, dis: 0.0, ..Default::default() };
    for _ in 0..4 {
        let res = net.aux_losses(&hi, &hc, zero).unwrap();
        assert!(res.grads.iter().all(|(a, b)| a.data().iter().chain(b.data()).all(|&v| v == 0.0)));
        hc.rotate_left(1);
    }
}

#[test]
fn resumed_trainer_matches_uninterrupted_run() {
    let data = toy_examples(8, 6);
    let (train, val) = data.split_at(6);
    let cfg = TrainConfig { learning_rate: 1e-3, virtual_batch: 4, ..Default::default() };
    let (full, params) = run(cfg.clone(), train, val, 2);
    let mut first = toy_trainer(cfg, train);
    let r1 = first.run_epoch(train, val).unwrap();
    let mut resumed = first.clone();
    let r2 = resumed.run_epoch(train, val).unwrap();
    assert_eq!(vec![serde_json::to_string(&r1).unwrap(), serde_json::to_string(&r2).unwrap()], full);
    assert_eq!(resumed.net.params, params);
}

#[test]
fn training_reduces_the_objective_on_a_tiny_cohort() {
    let data = toy_examples(10, 8);
    let (train, val) = data.split_at(8);
    let cfg = TrainConfig { learning_rate: 3e-3, augment: false, ..Default::default() };
    let mut t = toy_trainer(cfg, train);
    let first = t.run_epoch(train, val).unwrap().train.total;
    let mut last = first;
    for _ in 0..7 {
        last = t.run_epoch(train, val).unwrap().train.total;
    }
    assert!(last < first, "{first} -> {last}");
}
