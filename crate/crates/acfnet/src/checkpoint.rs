//! Training checkpoints: a JSON header line followed by every array
//! (parameters, then Adam first and second moments) as little-endian `f64`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use acfnet_core::model::ModelConfig;
use acfnet_core::network::Network;
use acfnet_core::optim::{AdamWState, PlateauState};
use acfnet_core::params::Params;
use acfnet_core::synth::Standardizer;
use acfnet_core::trainer::{TrainConfig, Trainer};
use acfnet_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{AppError, Result};
use crate::io::write_bytes;

pub const FORMAT: &str = "acfnet-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    model: ModelConfig,
    train: TrainConfig,
    epoch: usize,
    sched_lr: f64,
    /// `None` until a finite validation loss has been seen.
    sched_best: Option<f64>,
    sched_bad_epochs: u32,
    adam_step: u64,
    standardizer: Standardizer,
    /// Array names and shapes in payload order (each group: params, m, v).
    arrays: Vec<(String, Vec<usize>)>,
}

fn put(out: &mut Vec<u8>, t: &Tensor) {
    for x in t.data() {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

pub fn encode(t: &Trainer) -> Vec<u8> {
    let arrays: Vec<(String, Vec<usize>)> = t.net.params.iter().map(|(k, v)| (k.clone(), v.shape().to_vec())).collect();
    let header = Header {
        format: FORMAT.into(),
        version: VERSION,
        model: t.net.cfg.clone(),
        train: t.cfg.clone(),
        epoch: t.epoch,
        sched_lr: t.sched.lr,
        sched_best: t.sched.best.is_finite().then_some(t.sched.best),
        sched_bad_epochs: t.sched.bad_epochs,
        adam_step: t.adam.step,
        standardizer: t.standardizer.clone(),
        arrays,
    };
    let mut out = serde_json::to_vec(&header).expect("header serializes");
    out.push(b'\n');
    for (name, _) in &header.arrays {
        put(&mut out, t.net.params.get(name).expect("own name"));
    }
    for map in [&t.adam.m, &t.adam.v] {
        for (name, _) in &header.arrays {
            put(&mut out, &map[name]);
        }
    }
    out
}

pub fn decode(path: &Path, bytes: &[u8]) -> Result<Trainer> {
    let bad = |msg: String| AppError::format(path, msg);
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| bad("missing checkpoint header".into()))?;
    let h: Header = serde_json::from_slice(&bytes[..nl]).map_err(|e| bad(format!("bad checkpoint header: {e}")))?;
    if h.format != FORMAT || h.version != VERSION {
        return Err(bad(format!("unsupported checkpoint {} v{}", h.format, h.version)));
    }
    let per_group: usize = h.arrays.iter().map(|(_, s)| s.iter().product::<usize>()).sum();
    let payload = &bytes[nl + 1..];
    if payload.len() != 3 * per_group * 8 {
        return Err(bad(format!(
            "payload length mismatch: expected {} bytes, found {}",
            3 * per_group * 8,
            payload.len()
        )));
    }
    let mut floats = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
    let mut group = || -> Result<BTreeMap<String, Tensor>> {
        h.arrays
            .iter()
            .map(|(name, shape)| {
                let n = shape.iter().product();
                let data: Vec<f64> = floats.by_ref().take(n).collect();
                Ok((name.clone(), Tensor::new(shape.clone(), data)?))
            })
            .collect()
    };
    let (p, m, v) = (group()?, group()?, group()?);
    let mut params = Params::new();
    for (k, t) in p {
        params.insert(k, t);
    }
    let net = Network::with_params(h.model, h.train.variant, params).map_err(|e| bad(e.to_string()))?;
    Ok(Trainer {
        cfg: h.train,
        net,
        adam: AdamWState { step: h.adam_step, m, v },
        sched: PlateauState {
            lr: h.sched_lr,
            best: h.sched_best.unwrap_or(f64::INFINITY),
            bad_epochs: h.sched_bad_epochs,
        },
        epoch: h.epoch,
        standardizer: h.standardizer,
    })
}

/// Writes through a temporary file so an interrupted save never leaves a
/// truncated checkpoint behind.
pub fn save(path: &Path, t: &Trainer) -> Result<()> {
    let tmp = path.with_extension("ckpt.tmp");
    write_bytes(&tmp, &encode(t))?;
    fs::rename(&tmp, path).map_err(|e| AppError::io(path, e))
}

pub fn load(path: &Path) -> Result<Trainer> {
    let bytes = fs::read(path).map_err(|e| AppError::io(path, e))?;
    decode(path, &bytes)
}
