//! Recurrence/survival heads, task losses, the weighted total loss and the
//! year-level evaluation metrics.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::model::ModelConfig;
use crate::params::{ParamInit, Params};
use crate::tensor::Tensor;

/// Probability floor used inside every logarithm.
pub const PROB_CLAMP: f64 = 1e-12;

pub fn declare_params(cfg: &ModelConfig, init: &mut ParamInit) {
    let d = cfg.fused_dim;
    init.linear("head.rec1", d, d)
        .linear("head.rec2", d, cfg.years)
        .linear("head.surv1", d, d)
        .linear("head.surv2", d, cfg.years);
}

fn mlp_logits(g: &mut Graph, params: &Params, prefix: &str, h: Var) -> Result<Var> {
    let w1 = params.bind(g, &alloc::format!("{prefix}1.w"))?;
    let b1 = params.bind(g, &alloc::format!("{prefix}1.b"))?;
    let w2 = params.bind(g, &alloc::format!("{prefix}2.w"))?;
    let b2 = params.bind(g, &alloc::format!("{prefix}2.b"))?;
    if g.shape(h).len() != 2 || g.shape(h)[1] != g.shape(w1)[0] {
        return Err(Error::shape(prefix_op(prefix), g.shape(h), g.shape(w1)));
    }
    let x = g.linear(h, w1, b1)?;
    let x = g.gelu(x)?;
    g.linear(x, w2, b2)
}

fn prefix_op(prefix: &str) -> &'static str {
    if prefix.contains("rec") {
        "recurrence_head"
    } else {
        "survival_head"
    }
}

/// `d → d`, GELU, `d → years`, sigmoid: independent yearly recurrence
/// probabilities, `[1, d] -> [1, years]`.
pub fn recurrence_head(g: &mut Graph, params: &Params, h_fused: Var) -> Result<Var> {
    let logits = mlp_logits(g, params, "head.rec", h_fused)?;
    g.sigmoid(logits)
}

/// Survival logits (pre-softmax), `[1, d] -> [1, years]`.
pub fn survival_logits(g: &mut Graph, params: &Params, h_fused: Var) -> Result<Var> {
    mlp_logits(g, params, "head.surv", h_fused)
}

/// `d → d`, GELU, `d → years`, softmax over years.
pub fn survival_head(g: &mut Graph, params: &Params, h_fused: Var) -> Result<Var> {
    let logits = survival_logits(g, params, h_fused)?;
    g.softmax(logits, 1)
}

/// Event years, 1-based.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Labels {
    pub recurrence_year: u8,
    pub survival_year: u8,
}

impl Labels {
    pub fn new(recurrence_year: u8, survival_year: u8, years: usize) -> Result<Self> {
        let l = Labels {
            recurrence_year,
            survival_year,
        };
        l.validate(years)?;
        Ok(l)
    }

    pub fn validate(&self, years: usize) -> Result<()> {
        for (what, v) in [("recurrence_year", self.recurrence_year), ("survival_year", self.survival_year)] {
            if v == 0 || usize::from(v) > years {
                return Err(Error::OutOfRange {
                    what,
                    value: f64::from(v),
                    lo: 1.0,
                    hi: years as f64,
                });
            }
        }
        Ok(())
    }
}

/// How the survival head is scored.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SurvivalLoss {
    /// `−log p[survival_year]`.
    #[default]
    CrossEntropy,
    /// `(Σ_k k·p_k − survival_year)²`, regression on the expected year.
    ExpectedYearMse,
}

fn one_hot(years: usize, year: u8) -> Tensor {
    let mut v = vec![0.0; years];
    v[usize::from(year) - 1] = 1.0;
    Tensor::from_parts(vec![1, years], v)
}

/// Per-sample task losses `(L_recur, L_surv)` from head outputs of shape `[1, years]`.
pub fn task_losses(
    g: &mut Graph,
    recurrence_probs: Var,
    survival_probs: Var,
    labels: Labels,
    survival_loss: SurvivalLoss,
) -> Result<(Var, Var)> {
    let years = g.shape(recurrence_probs)[1];
    labels.validate(years)?;
    if g.shape(survival_probs) != [1, years] {
        return Err(Error::shape("task_losses", g.shape(recurrence_probs), g.shape(survival_probs)));
    }

    // mean binary cross-entropy against the one-hot recurrence year
    let target = g.leaf(one_hot(years, labels.recurrence_year));
    let anti = g.leaf(one_hot(years, labels.recurrence_year).map(|v| 1.0 - v));
    let p = g.clamp(recurrence_probs, PROB_CLAMP, 1.0 - PROB_CLAMP)?;
    let log_p = g.log(p)?;
    let q = g.affine(p, -1.0, 1.0)?;
    let log_q = g.log(q)?;
    let pos = g.mul(target, log_p)?;
    let neg = g.mul(anti, log_q)?;
    let bce = g.add(pos, neg)?;
    let bce = g.mean(bce)?;
    let l_recur = g.scale(bce, -1.0)?;

    let l_surv = match survival_loss {
        SurvivalLoss::CrossEntropy => {
            let pick = g.leaf(one_hot(years, labels.survival_year));
            let py = g.mul(pick, survival_probs)?;
            let py = g.sum(py)?;
            let py = g.clamp(py, PROB_CLAMP, 1.0)?;
            let lp = g.log(py)?;
            g.scale(lp, -1.0)?
        }
        SurvivalLoss::ExpectedYearMse => {
            let idx = Tensor::from_parts(vec![1, years], (1..=years).map(|k| k as f64).collect());
            let idx = g.leaf(idx);
            let e = g.mul(idx, survival_probs)?;
            let e = g.sum(e)?;
            let err = g.affine(e, 1.0, -f64::from(labels.survival_year))?;
            g.mul(err, err)?
        }
    };
    Ok((l_recur, l_surv))
}

/// Weights of the multi-task objective.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub surv: f64,
    pub recur: f64,
    pub align: f64,
    pub dis: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            surv: 0.5,
            recur: 0.3,
            align: 0.1,
            dis: 0.1,
        }
    }
}

/// Loss components of one sample or virtual batch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub surv: f64,
    pub recur: f64,
    pub align: f64,
    pub dis: f64,
}

impl LossParts {
    pub fn check_finite(&self) -> Result<()> {
        for (name, v) in [("L_surv", self.surv), ("L_recur", self.recur), ("L_align", self.align), ("L_dis", self.dis)] {
            if !v.is_finite() {
                return Err(Error::NonFinite {
                    what: alloc::format!("{name} = {v}"),
                });
            }
        }
        Ok(())
    }
}

/// `w_surv·L_surv + w_recur·L_recur + w_align·L_align + w_dis·L_dis`.
pub fn total_loss(parts: LossParts, w: LossWeights) -> Result<f64> {
    parts.check_finite()?;
    Ok(w.surv * parts.surv + w.recur * parts.recur + w.align * parts.align + w.dis * parts.dis)
}

/// Arg-max year (1-based); ties go to the earliest year.
pub fn predict_time(probs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > probs[best] {
            best = i;
        }
    }
    best + 1
}

/// Temporal adjacency accuracy, MSE and MAE in years.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub taa: f64,
    pub mse: f64,
    pub mae: f64,
    pub n: usize,
}

pub fn metrics(pred: &[usize], truth: &[usize]) -> Result<Metrics> {
    if pred.is_empty() {
        return Err(Error::Empty { op: "metrics" });
    }
    if pred.len() != truth.len() {
        return Err(Error::shape("metrics", &[pred.len()], &[truth.len()]));
    }
    let n = pred.len();
    let (mut hits, mut sq, mut abs) = (0usize, 0.0, 0.0);
    for (&p, &t) in pred.iter().zip(truth) {
        let e = p.abs_diff(t);
        if e <= 1 {
            hits += 1;
        }
        sq += (e * e) as f64;
        abs += e as f64;
    }
    Ok(Metrics {
        taa: hits as f64 / n as f64,
        mse: sq / n as f64,
        mae: abs / n as f64,
        n,
    })
}

/// Serialized metrics row: `{"split","taa","mse","mae","n"}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub split: String,
    pub taa: f64,
    pub mse: f64,
    pub mae: f64,
    pub n: usize,
}

impl MetricsReport {
    pub fn new(split: impl Into<String>, m: Metrics) -> Self {
        MetricsReport {
            split: split.into(),
            taa: m.taa,
            mse: m.mse,
            mae: m.mae,
            n: m.n,
        }
    }
}

/// Per-task and pooled metrics for one split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitMetrics {
    pub recurrence: MetricsReport,
    pub survival: MetricsReport,
    /// Both tasks pooled into one `2N`-sample table row.
    pub combined: MetricsReport,
}

impl SplitMetrics {
    pub fn compute(
        split: &str,
        rec_pred: &[usize],
        rec_true: &[usize],
        surv_pred: &[usize],
        surv_true: &[usize],
    ) -> Result<Self> {
        let all_pred: Vec<usize> = rec_pred.iter().chain(surv_pred).copied().collect();
        let all_true: Vec<usize> = rec_true.iter().chain(surv_true).copied().collect();
        Ok(SplitMetrics {
            recurrence: MetricsReport::new(split, metrics(rec_pred, rec_true)?),
            survival: MetricsReport::new(split, metrics(surv_pred, surv_true)?),
            combined: MetricsReport::new(split, metrics(&all_pred, &all_true)?),
        })
    }
}
