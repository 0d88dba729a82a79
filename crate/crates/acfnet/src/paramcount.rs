//! Separable-versus-dense parameter accounting.

use acfnet_core::model::{count_params, declared_block_params, ModelConfig, ParamCount, ASYMPTOTIC_REDUCTION_PCT};
use acfnet_core::network::{Network, Variant};
use serde::{Deserialize, Serialize};

use crate::ablate::table_variants;
use crate::error::Result;

pub const PUBLISHED_CLAIM_PCT: f64 = 41.0;

pub const BASELINE_CAVEAT: &str = "The published 41% reduction does not state its dense baseline. Against one dense \
3x3x3x3 spatiotemporal kernel (81C^2 + C) the separable block (27C^2 + C spatial + 3C^2 + C temporal) saves \
100*(1 - 30/81) = 62.96% as C grows; 41% would need a different baseline or whole-network accounting.";

pub const CHANNELS: [usize; 9] = [1, 2, 4, 8, 16, 32, 64, 256, 1024];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantParams {
    pub variant: String,
    pub parameters: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    /// `C_f + E` of the configured model.
    pub model_channels: usize,
    pub model_block: ParamCount,
    /// Block size read off the allocated arrays; equals `model_block.separable_block`.
    pub declared_block: usize,
    pub sweep: Vec<ParamCount>,
    pub asymptotic_reduction_pct: f64,
    pub published_claim_pct: f64,
    pub caveat: String,
    pub variants: Vec<VariantParams>,
}

pub fn report(cfg: &ModelConfig) -> Result<Report> {
    let full = Network::new(cfg.clone(), Variant::full(), 0)?;
    let variants = table_variants()
        .into_iter()
        .map(|v| -> Result<VariantParams> {
            Ok(VariantParams { variant: v.to_string(), parameters: Network::new(cfg.clone(), v, 0)?.params.count() })
        })
        .collect::<Result<_>>()?;
    Ok(Report {
        model_channels: cfg.st_channels(),
        model_block: count_params(cfg.st_channels()),
        declared_block: declared_block_params(&full.params)?,
        sweep: CHANNELS.iter().map(|&c| count_params(c)).collect(),
        asymptotic_reduction_pct: ASYMPTOTIC_REDUCTION_PCT,
        published_claim_pct: PUBLISHED_CLAIM_PCT,
        caveat: BASELINE_CAVEAT.into(),
        variants,
    })
}

pub fn render(r: &Report) -> String {
    let mut out = String::new();
    out.push_str("Spatiotemporal block: separable 30C^2+2C vs dense 81C^2+C\n");
    out.push_str(&format!("{:>6}  {:>12}  {:>12}  {:>10}\n", "C", "separable", "dense", "reduction"));
    let mut line = |p: &ParamCount, tag: &str| {
        out.push_str(&format!(
            "{:>6}  {:>12}  {:>12}  {:>9.2}%{tag}\n",
            p.channels, p.separable_block, p.dense_baseline, p.reduction_pct
        ));
    };
    for p in &r.sweep {
        line(p, if p.channels == r.model_channels { "  <- model" } else { "" });
    }
    if !r.sweep.iter().any(|p| p.channels == r.model_channels) {
        line(&r.model_block, "  <- model");
    }
    out.push_str(&format!("asymptotic reduction (C -> inf): {:.2}%\n", r.asymptotic_reduction_pct));
    out.push_str(&format!("published claimed reduction:     {:.2}%\n", r.published_claim_pct));
    out.push_str(&format!("note: {}\n\n", r.caveat));
    out.push_str("Trainable parameters per variant\n");
    let width = r.variants.iter().map(|v| v.variant.len()).max().unwrap_or(7).max(7);
    for v in &r.variants {
        out.push_str(&format!("{:<width$}  {:>8}\n", v.variant, v.parameters));
    }
    out
}
