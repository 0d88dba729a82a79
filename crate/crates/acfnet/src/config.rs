//! Flat `key = value` run configuration.
//!
//! One entry per line, `#` starts a comment. Command-line flags are
//! applied after the file, so they win.

use std::path::{Path, PathBuf};

use acfnet_core::heads::SurvivalLoss;
use acfnet_core::model::ModelConfig;
use acfnet_core::network::Variant;
use acfnet_core::trainer::TrainConfig;

use crate::error::{AppError, Result};

/// Parses `text` into `(key, value)` pairs in file order.
pub fn parse_entries(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| AppError::Usage(format!("config line {}: expected key=value, got `{line}`", i + 1)))?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(AppError::Usage(format!("config line {}: empty key", i + 1)));
        }
        out.push((k.to_string(), v.to_string()));
    }
    Ok(out)
}

/// Everything a training run needs besides the data itself.
#[derive(Clone, Debug, PartialEq)]
pub struct RunSettings {
    pub train: TrainConfig,
    pub model: ModelConfig,
    pub data_dir: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

impl Default for RunSettings {
    fn default() -> Self {
        RunSettings {
            train: TrainConfig::default(),
            model: ModelConfig::desk(),
            data_dir: None,
            out_dir: None,
        }
    }
}

pub const KEYS: &[&str] = &[
    "learning_rate",
    "epochs",
    "seed",
    "batch_size",
    "virtual_batch",
    "weight_surv",
    "weight_recur",
    "weight_align",
    "weight_dis",
    "beta1",
    "beta2",
    "adam_eps",
    "weight_decay",
    "plateau_factor",
    "plateau_patience",
    "plateau_threshold",
    "min_lr",
    "variant",
    "survival_loss",
    "augment",
    "data_dir",
    "out_dir",
    "timesteps",
    "embed_dim",
    "encoder_hidden",
    "feature_channels",
    "key_dim",
    "recon_hidden",
    "fused_dim",
    "ffn_dim",
    "recon_encoder_channels",
];

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| AppError::Usage(format!("`{key}`: cannot parse `{v}`")))
}

fn boolean(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(AppError::Usage(format!("`{key}`: expected true/false, got `{v}`"))),
    }
}

impl RunSettings {
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let t = &mut self.train;
        let m = &mut self.model;
        match key {
            "learning_rate" => t.learning_rate = num(key, v)?,
            "epochs" => t.epochs = num(key, v)?,
            "seed" => t.seed = num(key, v)?,
            "batch_size" => t.batch_size = num(key, v)?,
            "virtual_batch" => t.virtual_batch = num(key, v)?,
            "weight_surv" => t.weights.surv = num(key, v)?,
            "weight_recur" => t.weights.recur = num(key, v)?,
            "weight_align" => t.weights.align = num(key, v)?,
            "weight_dis" => t.weights.dis = num(key, v)?,
            "beta1" => t.adamw.beta1 = num(key, v)?,
            "beta2" => t.adamw.beta2 = num(key, v)?,
            "adam_eps" => t.adamw.eps = num(key, v)?,
            "weight_decay" => t.adamw.weight_decay = num(key, v)?,
            "plateau_factor" => t.plateau.factor = num(key, v)?,
            "plateau_patience" => t.plateau.patience = num(key, v)?,
            "plateau_threshold" => t.plateau.threshold = num(key, v)?,
            "min_lr" => t.plateau.min_lr = num(key, v)?,
            "variant" => t.variant = v.parse::<Variant>().map_err(|e| AppError::Usage(e.to_string()))?,
            "survival_loss" => {
                t.survival_loss = match v {
                    "cross_entropy" => SurvivalLoss::CrossEntropy,
                    "expected_year_mse" => SurvivalLoss::ExpectedYearMse,
                    _ => {
                        return Err(AppError::Usage(format!(
                            "`survival_loss`: expected cross_entropy or expected_year_mse, got `{v}`"
                        )))
                    }
                }
            }
            "augment" => t.augment = boolean(key, v)?,
            "data_dir" => self.data_dir = Some(PathBuf::from(v)),
            "out_dir" => self.out_dir = Some(PathBuf::from(v)),
            "timesteps" => m.timesteps = num(key, v)?,
            "embed_dim" => m.embed_dim = num(key, v)?,
            "encoder_hidden" => m.encoder_hidden = num(key, v)?,
            "feature_channels" => m.feature_channels = num(key, v)?,
            "key_dim" => m.key_dim = num(key, v)?,
            "recon_hidden" => m.recon_hidden = num(key, v)?,
            "fused_dim" => m.fused_dim = num(key, v)?,
            "ffn_dim" => m.ffn_dim = num(key, v)?,
            "recon_encoder_channels" => {
                let parts: Vec<usize> = v.split(',').map(|p| num(key, p.trim())).collect::<Result<_>>()?;
                m.recon_encoder_channels = parts
                    .try_into()
                    .map_err(|_| AppError::Usage(format!("`{key}`: expected two comma-separated channels")))?;
            }
            _ => {
                return Err(AppError::Usage(format!(
                    "unknown config key `{key}`; valid keys: {}",
                    KEYS.join(", ")
                )))
            }
        }
        Ok(())
    }

    pub fn apply_all(&mut self, entries: &[(String, String)]) -> Result<()> {
        entries.iter().try_for_each(|(k, v)| self.set(k, v))
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let mut s = RunSettings::default();
        s.apply_all(&parse_entries(&crate::io::read_text(path)?)?)?;
        Ok(s)
    }

    /// Renders every key, readable back by [`parse_entries`].
    pub fn to_text(&self) -> String {
        let t = &self.train;
        let m = &self.model;
        let survival = match t.survival_loss {
            SurvivalLoss::CrossEntropy => "cross_entropy",
            SurvivalLoss::ExpectedYearMse => "expected_year_mse",
        };
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        let mut lines = vec![
            format!("learning_rate = {}", t.learning_rate),
            format!("epochs = {}", t.epochs),
            format!("seed = {}", t.seed),
            format!("batch_size = {}", t.batch_size),
            format!("virtual_batch = {}", t.virtual_batch),
            format!("weight_surv = {}", t.weights.surv),
            format!("weight_recur = {}", t.weights.recur),
            format!("weight_align = {}", t.weights.align),
            format!("weight_dis = {}", t.weights.dis),
            format!("beta1 = {}", t.adamw.beta1),
            format!("beta2 = {}", t.adamw.beta2),
            format!("adam_eps = {}", t.adamw.eps),
            format!("weight_decay = {}", t.adamw.weight_decay),
            format!("plateau_factor = {}", t.plateau.factor),
            format!("plateau_patience = {}", t.plateau.patience),
            format!("plateau_threshold = {}", t.plateau.threshold),
            format!("min_lr = {}", t.plateau.min_lr),
            format!("variant = {}", t.variant),
            format!("survival_loss = {survival}"),
            format!("augment = {}", t.augment),
            format!("timesteps = {}", m.timesteps),
            format!("embed_dim = {}", m.embed_dim),
            format!("encoder_hidden = {}", m.encoder_hidden),
            format!("feature_channels = {}", m.feature_channels),
            format!("key_dim = {}", m.key_dim),
            format!("recon_hidden = {}", m.recon_hidden),
            format!("fused_dim = {}", m.fused_dim),
            format!("ffn_dim = {}", m.ffn_dim),
            format!("recon_encoder_channels = {},{}", m.recon_encoder_channels[0], m.recon_encoder_channels[1]),
        ];
        if self.data_dir.is_some() {
            lines.push(format!("data_dir = {}", path(&self.data_dir)));
        }
        if self.out_dir.is_some() {
            lines.push(format!("out_dir = {}", path(&self.out_dir)));
        }
        let mut s = lines.join("\n");
        s.push('\n');
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn comments_blank_lines_and_overrides() {
        let text = "# run\nlearning_rate = 0.001  # faster\n\nepochs=3\nvariant = full-dis\nseed = 9\n";
        let mut s = RunSettings::default();
        s.apply_all(&parse_entries(text).unwrap()).unwrap();
        s.set("seed", "4").unwrap();
        assert_eq!(s.train.learning_rate, 0.001);
        assert_eq!(s.train.epochs, 3);
        assert_eq!(s.train.seed, 4);
        assert!(!s.train.variant.dis);
    }

    #[test]
    fn errors_are_usage_errors() {
        assert!(matches!(parse_entries("lr 3"), Err(AppError::Usage(_))));
        let mut s = RunSettings::default();
        assert!(matches!(s.set("nope", "1"), Err(AppError::Usage(_))));
        assert!(matches!(s.set("epochs", "x"), Err(AppError::Usage(_))));
        assert!(matches!(s.set("variant", "4d"), Err(AppError::Usage(_))));
    }

    #[test]
    fn text_round_trip() {
        let mut s = RunSettings::default();
        s.set("survival_loss", "expected_year_mse").unwrap();
        s.set("variant", "3d_lstm+fuse+align").unwrap();
        s.set("out_dir", "/tmp/run").unwrap();
        let mut back = RunSettings::default();
        back.apply_all(&parse_entries(&s.to_text()).unwrap()).unwrap();
        assert_eq!(back, s);
        let keys: Vec<String> = parse_entries(&s.to_text()).unwrap().into_iter().map(|(k, _)| k).collect();
        assert!(KEYS.iter().filter(|k| **k != "data_dir").all(|k| keys.iter().any(|x| x == k)));
    }
}
