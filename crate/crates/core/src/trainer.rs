//! Training and evaluation engine (no I/O).
//!
//! Batch size is one: every sample gets its own AdamW step on the task
//! terms. The alignment/disentanglement terms need several samples, so each
//! sample's tape is kept (truncated to its feature trunk) until a virtual
//! batch closes; the batch terms are then differentiated once and their
//! gradient is pushed back through every retained tape for one more step.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::heads::{predict_time, Labels, LossParts, LossWeights, SplitMetrics, SurvivalLoss};
use crate::model::ModelConfig;
use crate::network::{Network, Variant};
use crate::optim::{adamw_step, AdamWConfig, AdamWState, PlateauConfig, PlateauState};
use crate::preprocess::{augment, normalize_hu, Volume};
use crate::rng::{fnv1a, keyed_rng};
use crate::synth::Standardizer;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub seed: u64,
    pub batch_size: usize,
    pub virtual_batch: usize,
    pub weights: LossWeights,
    pub adamw: AdamWConfig,
    pub plateau: PlateauConfig,
    pub variant: Variant,
    pub survival_loss: SurvivalLoss,
    /// Elastic + noise/blur augmentation of training samples.
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            epochs: 50,
            seed: 0,
            batch_size: 1,
            virtual_batch: 8,
            weights: LossWeights::default(),
            adamw: AdamWConfig::default(),
            plateau: PlateauConfig::default(),
            variant: Variant::full(),
            survival_loss: SurvivalLoss::CrossEntropy,
            augment: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("learning_rate", self.learning_rate >= 0.0 && self.learning_rate.is_finite()),
            ("virtual_batch", self.virtual_batch >= 1),
            ("plateau factor", self.plateau.factor > 0.0 && self.plateau.factor <= 1.0),
            ("min_lr", self.plateau.min_lr >= 0.0),
            ("weight_decay", self.adamw.weight_decay >= 0.0),
            ("eps", self.adamw.eps > 0.0),
            ("beta1", (0.0..1.0).contains(&self.adamw.beta1)),
            ("beta2", (0.0..1.0).contains(&self.adamw.beta2)),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, ok)| !ok) {
            return Err(Error::invalid("train config", format!("invalid {name}")));
        }
        if self.batch_size != 1 {
            return Err(Error::invalid("train config", "only batch_size = 1 is supported"));
        }
        self.variant.validate()
    }
}

/// A preprocessed (HU) sample ready for training or evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub id: String,
    pub volume_hu: Volume,
    pub clinical: [f64; 6],
    pub labels: Labels,
}

/// Mean losses over a pass and the resulting objective.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossSummary {
    pub surv: f64,
    pub recur: f64,
    pub align: f64,
    pub dis: f64,
    pub total: f64,
}

#[derive(Default)]
struct LossAcc {
    surv: f64,
    recur: f64,
    samples: usize,
    align: f64,
    dis: f64,
    batches: usize,
}

impl LossAcc {
    fn summary(&self, w: LossWeights) -> LossSummary {
        let n = self.samples.max(1) as f64;
        let b = self.batches.max(1) as f64;
        let (surv, recur, align, dis) = (self.surv / n, self.recur / n, self.align / b, self.dis / b);
        LossSummary {
            surv,
            recur,
            align,
            dis,
            total: w.surv * surv + w.recur * recur + w.align * align + w.dis * dis,
        }
    }
}

/// Per-sample head outputs plus metrics and losses for one split.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub ids: Vec<String>,
    pub recurrence: Vec<Vec<f64>>,
    pub survival: Vec<Vec<f64>>,
    pub metrics: SplitMetrics,
    pub loss: LossSummary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: usize,
    /// Learning rate used during this epoch.
    pub lr: f64,
    pub train: LossSummary,
    pub val: LossSummary,
    pub val_recurrence_taa: f64,
    pub val_survival_taa: f64,
    /// Learning rate after the scheduler step.
    pub next_lr: f64,
}

/// Everything needed to continue training bit-exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct Trainer {
    pub cfg: TrainConfig,
    pub net: Network,
    pub adam: AdamWState,
    pub sched: PlateauState,
    /// Completed epochs.
    pub epoch: usize,
    pub standardizer: Standardizer,
}

/// Seed for the per-epoch, per-sample augmentation stream.
pub fn augment_seed(seed: u64, epoch: usize, id: &str) -> u64 {
    let mut rng = keyed_rng(seed ^ fnv1a(id.as_bytes()), &format!("augment/{epoch}"));
    rand::Rng::random(&mut rng)
}

struct Retained {
    graph: Graph,
    h_img: Var,
    h_clin: Var,
}

fn zero_grads(params: &crate::params::Params) -> BTreeMap<String, Tensor> {
    params.iter().map(|(k, t)| (k.clone(), t.zeros_like())).collect()
}

fn add_grads(acc: &mut BTreeMap<String, Tensor>, g: &Graph, grads: &crate::graph::Gradients) {
    for (name, &v) in g.param_vars() {
        if let (Some(slot), Some(d)) = (acc.get_mut(name), grads.get(v)) {
            slot.add_assign(d);
        }
    }
}

impl Trainer {
    pub fn new(model: ModelConfig, cfg: TrainConfig, train: &[Example]) -> Result<Self> {
        cfg.validate()?;
        let net = Network::new(model, cfg.variant, cfg.seed)?;
        let rows: Vec<[f64; 6]> = train.iter().map(|e| e.clinical).collect();
        let standardizer = Standardizer::fit(&rows)?;
        Ok(Trainer {
            adam: AdamWState::new(&net.params),
            sched: PlateauState::new(cfg.learning_rate),
            cfg,
            net,
            epoch: 0,
            standardizer,
        })
    }

    fn inputs(&self, g: &mut Graph, ex: &Example, volume: &Volume) -> Result<(Var, Var)> {
        let clin = Tensor::vector(&self.standardizer.apply(&ex.clinical))?;
        self.net.inputs(g, &volume.to_tensor()?, &clin)
    }

    fn weights(&self) -> LossWeights {
        self.cfg.variant.loss_weights(self.cfg.weights)
    }

    /// Tags numeric failures with the sample and loss components; other
    /// errors pass through.
    fn divergence(id: &str, parts: LossParts, cause: Error) -> Error {
        if !matches!(cause, Error::NonFinite { .. }) {
            return cause;
        }
        Error::NonFinite {
            what: format!(
                "sample {id} (L_surv={}, L_recur={}, L_align={}, L_dis={}): {cause}",
                parts.surv, parts.recur, parts.align, parts.dis
            ),
        }
    }

    /// Training order of epoch `epoch`.
    pub fn epoch_order(&self, n: usize, epoch: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut keyed_rng(self.cfg.seed, &format!("shuffle/{epoch}")));
        order
    }

    /// Task-term update for one sample; returns `(L_surv, L_recur)` and,
    /// when batch terms are active, the truncated tape.
    fn sample_step(
        &mut self,
        ex: &Example,
        volume: &Volume,
        lr: f64,
        weights: LossWeights,
        aux: bool,
    ) -> Result<(f64, f64, Option<Retained>)> {
        let mut g = Graph::new();
        let (v, c) = self.inputs(&mut g, ex, volume)?;
        let fwd = self.net.forward(&mut g, v, c)?;
        let (obj, l_rec, l_surv) = self.net.task_objective(&mut g, &fwd, ex.labels, weights, self.cfg.survival_loss)?;
        let (l_rec, l_surv) = (g.value(l_rec).item()?, g.value(l_surv).item()?);
        let parts = LossParts { surv: l_surv, recur: l_rec, ..Default::default() };
        parts.check_finite().map_err(|e| Self::divergence(&ex.id, parts, e))?;
        let grads = g.backward(obj)?;
        let pg = g.param_grads(&grads);
        if pg.values().any(|t| !t.is_finite()) {
            return Err(Error::NonFinite { what: "parameter gradient".into() });
        }
        adamw_step(&mut self.net.params, &pg, &mut self.adam, lr, &self.cfg.adamw)?;
        let keep = match (aux, fwd.h_clin) {
            (true, Some(h_clin)) => {
                g.truncate(fwd.trunk_len);
                Some(Retained { graph: g, h_img: fwd.h_img, h_clin })
            }
            _ => None,
        };
        Ok((l_surv, l_rec, keep))
    }

    /// One pass over `train` with parameter updates.
    pub fn train_epoch(&mut self, train: &[Example]) -> Result<LossSummary> {
        if train.is_empty() {
            return Err(Error::Empty { op: "train_epoch" });
        }
        let lr = self.sched.lr;
        let weights = self.weights();
        // zero batch-term weights leave nothing to step on
        let aux = self.cfg.variant.has_aux() && (weights.align != 0.0 || weights.dis != 0.0);
        let mut acc = LossAcc::default();
        let order = self.epoch_order(train.len(), self.epoch);
        for chunk in order.chunks(self.cfg.virtual_batch) {
            let mut retained = Vec::new();
            for &i in chunk {
                let ex = &train[i];
                let volume = if self.cfg.augment {
                    augment(&ex.volume_hu, augment_seed(self.cfg.seed, self.epoch, &ex.id))?
                } else {
                    normalize_hu(&ex.volume_hu)?
                };
                let (ls, lr_, keep) = self.sample_step(ex, &volume, lr, weights, aux).map_err(|e| match e {
                    Error::NonFinite { ref what } if !what.starts_with("sample ") => {
                        Self::divergence(&ex.id, LossParts::default(), e)
                    }
                    e => e,
                })?;
                acc.surv += ls;
                acc.recur += lr_;
                acc.samples += 1;
                retained.extend(keep);
            }
            if aux && !retained.is_empty() {
                let hi: Vec<Tensor> = retained.iter().map(|r| r.graph.value(r.h_img).clone()).collect();
                let hc: Vec<Tensor> = retained.iter().map(|r| r.graph.value(r.h_clin).clone()).collect();
                let first = &train[chunk[0]].id;
                let res = self
                    .net
                    .aux_losses(&hi, &hc, weights)
                    .map_err(|e| Self::divergence(first, LossParts::default(), e))?;
                let parts = LossParts { align: res.align, dis: res.dis, ..Default::default() };
                parts.check_finite().map_err(|e| Self::divergence(first, parts, e))?;
                let mut sum = zero_grads(&self.net.params);
                for (r, (gi, gc)) in retained.iter().zip(res.grads) {
                    let grads = r.graph.backward_seeded(&[(r.h_img, gi), (r.h_clin, gc)])?;
                    add_grads(&mut sum, &r.graph, &grads);
                }
                adamw_step(&mut self.net.params, &sum, &mut self.adam, lr, &self.cfg.adamw)?;
                acc.align += res.align;
                acc.dis += res.dis;
                acc.batches += 1;
            }
        }
        Ok(acc.summary(weights))
    }

    /// Forward-only pass: predictions, metrics and the objective value with
    /// the batch terms taken over consecutive groups of `virtual_batch`.
    pub fn evaluate(&self, split: &str, samples: &[Example], keep_recon: bool) -> Result<(Evaluation, Vec<Option<Tensor>>)> {
        if samples.is_empty() {
            return Err(Error::invalid("evaluate", format!("split `{split}` is empty")));
        }
        let weights = self.weights();
        let mut acc = LossAcc::default();
        let mut out = Evaluation {
            ids: Vec::new(),
            recurrence: Vec::new(),
            survival: Vec::new(),
            metrics: SplitMetrics::compute(split, &[1], &[1], &[1], &[1])?,
            loss: LossSummary::default(),
        };
        let mut recons = Vec::new();
        let (mut hi, mut hc) = (Vec::new(), Vec::new());
        for (k, ex) in samples.iter().enumerate() {
            let volume = normalize_hu(&ex.volume_hu)?;
            let mut g = Graph::new();
            let (v, c) = self.inputs(&mut g, ex, &volume)?;
            let fwd = self.net.forward(&mut g, v, c)?;
            let (_, l_rec, l_surv) = self.net.task_objective(&mut g, &fwd, ex.labels, weights, self.cfg.survival_loss)?;
            acc.surv += g.value(l_surv).item()?;
            acc.recur += g.value(l_rec).item()?;
            acc.samples += 1;
            out.ids.push(ex.id.clone());
            out.recurrence.push(g.value(fwd.recurrence).data().to_vec());
            out.survival.push(g.value(fwd.survival).data().to_vec());
            recons.push(if keep_recon { fwd.recon.map(|r| g.value(r).clone()) } else { None });
            if let Some(h) = fwd.h_clin {
                hi.push(g.value(fwd.h_img).clone());
                hc.push(g.value(h).clone());
            }
            let closes = hi.len() == self.cfg.virtual_batch || k + 1 == samples.len();
            if self.cfg.variant.has_aux() && closes && !hi.is_empty() {
                let res = self.net.aux_losses(&hi, &hc, weights)?;
                acc.align += res.align;
                acc.dis += res.dis;
                acc.batches += 1;
                hi.clear();
                hc.clear();
            }
        }
        let pred = |p: &Vec<Vec<f64>>| p.iter().map(|v| predict_time(v)).collect::<Vec<_>>();
        let rec_true: Vec<usize> = samples.iter().map(|e| usize::from(e.labels.recurrence_year)).collect();
        let surv_true: Vec<usize> = samples.iter().map(|e| usize::from(e.labels.survival_year)).collect();
        out.metrics = SplitMetrics::compute(split, &pred(&out.recurrence), &rec_true, &pred(&out.survival), &surv_true)?;
        out.loss = acc.summary(weights);
        if !out.loss.total.is_finite() {
            return Err(Error::NonFinite { what: format!("{split} loss") });
        }
        Ok((out, recons))
    }

    /// Train one epoch, evaluate on `val`, advance the scheduler.
    pub fn run_epoch(&mut self, train: &[Example], val: &[Example]) -> Result<EpochReport> {
        let lr = self.sched.lr;
        let train_loss = self.train_epoch(train)?;
        let (eval, _) = self.evaluate("val", val, false)?;
        let next_lr = self.sched.step(eval.loss.total, &self.cfg.plateau)?;
        self.epoch += 1;
        Ok(EpochReport {
            epoch: self.epoch,
            lr,
            train: train_loss,
            val: eval.loss,
            val_recurrence_taa: eval.metrics.recurrence.taa,
            val_survival_taa: eval.metrics.survival.taa,
            next_lr,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::CohortSpec;
    use crate::preprocess::{preprocess_hu, PreprocessConfig};

    fn examples(n: usize) -> Vec<Example> {
        let spec = CohortSpec { n, seed: 3, ..Default::default() };
        (0..n)
            .map(|i| {
                let (s, p) = spec.generate_one(i).unwrap();
                let pre = PreprocessConfig { n_slices: 8, target: 16 };
                Example {
                    id: s.id,
                    volume_hu: preprocess_hu(&s.volume, p.anchor_slice, pre).unwrap(),
                    clinical: s.clinical.to_array(),
                    labels: s.labels,
                }
            })
            .collect()
    }

    #[test]
    fn zero_lr_freezes_parameters() {
        let data = examples(5);
        let cfg = TrainConfig { learning_rate: 0.0, virtual_batch: 2, ..Default::default() };
        let mut t = Trainer::new(ModelConfig::toy(), cfg, &data).unwrap();
        let before = t.net.params.clone();
        t.run_epoch(&data[..3], &data[3..]).unwrap();
        assert_eq!(t.net.params, before);
    }

    #[test]
    fn deterministic_epochs() {
        let data = examples(5);
        let cfg = TrainConfig { learning_rate: 1e-3, virtual_batch: 2, ..Default::default() };
        let run = || {
            let mut t = Trainer::new(ModelConfig::toy(), cfg.clone(), &data).unwrap();
            let r = t.run_epoch(&data[..3], &data[3..]).unwrap();
            (r, t.net.params)
        };
        assert_eq!(run(), run());
    }
}
