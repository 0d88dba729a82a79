//! Variant ablations: one training run per (variant, seed), test metrics
//! averaged over seeds and laid out as the comparison tables.

use acfnet_core::heads::SplitMetrics;
use acfnet_core::model::ModelConfig;
use acfnet_core::network::Variant;
use acfnet_core::trainer::{TrainConfig, Trainer};
use serde::{Deserialize, Serialize};

use crate::data::{par_map, Dataset};
use crate::error::Result;

/// Spatiotemporal-modeling comparison rows.
pub const TABLE1: [(&str, &str); 3] = [
    ("3D CNN only", "3d_only+fuse+align"),
    ("3D CNN + LSTM", "3d_lstm+fuse+align"),
    ("4D spatiotemporal attention", "full"),
];

/// Module ablation rows.
pub const TABLE2: [(&str, &str); 5] = [
    ("3D-CNN", "3d_only"),
    ("3D-CNN + Alignment", "3d_only+fuse+align"),
    ("4D Spatiotemporal Attention + Alignment", "full-dis"),
    ("3D-CNN + Alignment + Modality Disentanglement", "3d_only+fuse+align+dis"),
    ("4D Spatiotemporal Attention + Alignment + Modality Disentanglement", "full"),
];

pub const REFERENCE_FOOTER: &str = "reference (published, real cohort): 4D spatiotemporal attention  TAA 1.0000  MSE 0.4250  MAE 0.4250";

/// Every distinct variant of both tables, in first-appearance order.
pub fn table_variants() -> Vec<Variant> {
    let mut out: Vec<Variant> = Vec::new();
    for (_, v) in TABLE1.iter().chain(&TABLE2) {
        let v: Variant = v.parse().expect("table variants parse");
        if !out.contains(&v) {
            out.push(v);
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub variant: String,
    pub seed: u64,
    pub test: SplitMetrics,
    pub final_train_total: f64,
}

/// Trains every (variant, seed) pair on `data.train` and evaluates on
/// `data.test`. Runs are independent and execute in parallel; results keep
/// the (variant, seed) order.
pub fn run(model: &ModelConfig, base: &TrainConfig, data: &Dataset, variants: &[Variant], seeds: &[u64]) -> Result<Vec<RunResult>> {
    let jobs: Vec<(Variant, u64)> = variants.iter().flat_map(|&v| seeds.iter().map(move |&s| (v, s))).collect();
    par_map(&jobs, |&(variant, seed)| -> Result<RunResult> {
        let cfg = TrainConfig { variant, seed, ..base.clone() };
        let mut t = Trainer::new(model.clone(), cfg, &data.train)?;
        let mut last = f64::NAN;
        while t.epoch < t.cfg.epochs {
            last = t.run_epoch(&data.train, &data.val)?.train.total;
        }
        let (ev, _) = t.evaluate("test", &data.test, false)?;
        Ok(RunResult { variant: variant.to_string(), seed, test: ev.metrics, final_train_total: last })
    })
    .into_iter()
    .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Row {
    pub label: String,
    pub variant: String,
    pub taa: f64,
    pub mse: f64,
    pub mae: f64,
    pub recurrence_taa: f64,
    pub survival_taa: f64,
    pub seeds: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Table {
    pub title: String,
    pub rows: Vec<Row>,
}

/// Seed-averaged metrics of `variant`; `None` if it was not run.
pub fn mean_row(label: &str, variant: &str, results: &[RunResult]) -> Option<Row> {
    let target = variant.parse::<Variant>().ok();
    let runs: Vec<&RunResult> = results.iter().filter(|r| r.variant.parse::<Variant>().ok() == target).collect();
    if runs.is_empty() {
        return None;
    }
    let mean = |f: &dyn Fn(&SplitMetrics) -> f64| runs.iter().map(|r| f(&r.test)).sum::<f64>() / runs.len() as f64;
    Some(Row {
        label: label.into(),
        variant: runs[0].variant.clone(),
        taa: mean(&|m| m.combined.taa),
        mse: mean(&|m| m.combined.mse),
        mae: mean(&|m| m.combined.mae),
        recurrence_taa: mean(&|m| m.recurrence.taa),
        survival_taa: mean(&|m| m.survival.taa),
        seeds: runs.len(),
    })
}

/// The two comparison tables when every table variant was run, otherwise
/// one table with a row per requested variant.
pub fn tables(variants: &[Variant], results: &[RunResult]) -> Vec<Table> {
    let build = |title: &str, rows: &[(&str, &str)]| Table {
        title: title.into(),
        rows: rows.iter().filter_map(|(l, v)| mean_row(l, v, results)).collect(),
    };
    let all = table_variants();
    if all.iter().all(|v| variants.contains(v)) {
        vec![
            build("Table 1: spatiotemporal modeling", &TABLE1),
            build("Table 2: module ablation", &TABLE2),
        ]
    } else {
        let names: Vec<String> = variants.iter().map(|v| v.to_string()).collect();
        let rows: Vec<(&str, &str)> = names.iter().map(|n| (n.as_str(), n.as_str())).collect();
        vec![build("Ablation", &rows)]
    }
}

pub fn render(tables: &[Table]) -> String {
    let width = tables
        .iter()
        .flat_map(|t| &t.rows)
        .map(|r| r.label.chars().count())
        .max()
        .unwrap_or(5)
        .max(5);
    let mut out = String::new();
    for t in tables {
        out.push_str(&format!("{}\n", t.title));
        out.push_str(&format!(
            "{:<width$}  {:>7}  {:>9}  {:>7}  {:>9}  {:>9}  {:>5}\n",
            "Model", "TAA", "MSE", "MAE", "rec TAA", "surv TAA", "seeds"
        ));
        for r in &t.rows {
            out.push_str(&format!(
                "{:<width$}  {:>7.4}  {:>9.4}  {:>7.4}  {:>9.4}  {:>9.4}  {:>5}\n",
                r.label, r.taa, r.mse, r.mae, r.recurrence_taa, r.survival_taa, r.seeds
            ));
        }
        out.push('\n');
    }
    out.push_str("TAA/MSE/MAE pool recurrence and survival over the test split, averaged over seeds.\n");
    out.push_str(REFERENCE_FOOTER);
    out.push('\n');
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use acfnet_core::heads::SplitMetrics;

    fn fake(variant: &str, seed: u64, hit: bool) -> RunResult {
        let p = if hit { 3 } else { 9 };
        RunResult {
            variant: variant.into(),
            seed,
            test: SplitMetrics::compute("test", &[p, 3], &[3, 3], &[4, 4], &[4, 5]).unwrap(),
            final_train_total: 1.0,
        }
    }

    #[test]
    fn six_distinct_variants() {
        let v = table_variants();
        assert_eq!(v.len(), 6);
        assert!(v.iter().all(|x| x.validate().is_ok()));
    }

    #[test]
    fn tables_have_the_published_row_sets() {
        let vs = table_variants();
        let results: Vec<RunResult> = vs.iter().flat_map(|v| (0..3).map(|s| fake(&v.to_string(), s, s != 0))).collect();
        let t = tables(&vs, &results);
        assert_eq!(t.len(), 2);
        let labels = |i: usize| t[i].rows.iter().map(|r| r.label.as_str()).collect::<Vec<_>>();
        assert_eq!(labels(0), TABLE1.map(|r| r.0));
        assert_eq!(labels(1), TABLE2.map(|r| r.0));
        let r = &t[0].rows[0];
        assert_eq!(r.seeds, 3);
        assert!((r.recurrence_taa - (0.5 + 1.0 + 1.0) / 3.0).abs() < 1e-12);
        let text = render(&t);
        assert!(text.ends_with(&format!("{REFERENCE_FOOTER}\n")));
        assert_eq!(text.lines().filter(|l| l.contains("0.")).count(), 8 + 1);
    }

    #[test]
    fn custom_variant_list_gets_one_row_each() {
        let vs: Vec<Variant> = vec!["full".parse().unwrap(), "3d_only".parse().unwrap()];
        let results = vec![fake("full", 0, true), fake("3d_only", 0, false)];
        let t = tables(&vs, &results);
        assert_eq!(t.len(), 1);
        assert_eq!(t[0].rows.len(), 2);
    }
}
