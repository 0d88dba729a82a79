//! Per-patient yearly risk tables and images.

use std::path::Path;

use acfnet_core::trainer::{Example, Trainer};
use acfnet_core::Tensor;

use crate::error::{AppError, Result};
use crate::io::{write_bytes, YEARS};

pub const PROBABILITIES_CSV: &str = "probabilities.csv";
pub const COHORT_PGM: &str = "recurrence_heatmap.pgm";
pub const RECON_DIR: &str = "recon";

/// `round(255·p)` for `p` clamped to `[0, 1]`.
pub fn pixel(p: f64) -> u8 {
    (p.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Plain ("P2") greymap with maxval 255; `rows[r][c]` becomes one pixel.
pub fn encode_pgm(width: usize, rows: &[Vec<u8>]) -> Vec<u8> {
    let mut out = format!("P2\n{width} {}\n255\n", rows.len());
    for r in rows {
        let line: Vec<String> = r.iter().map(u8::to_string).collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
    out.into_bytes()
}

/// Min-max scales `values` to 0..=255; a constant slice maps to 0.
pub fn scale_slice(values: &[f64]) -> Vec<u8> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    values
        .iter()
        .map(|&v| if span > 0.0 { pixel((v - lo) / span) } else { 0 })
        .collect()
}

pub fn encode_probabilities(ids: &[String], rec: &[Vec<f64>], surv: &[Vec<f64>]) -> Vec<u8> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["id".to_string()];
    header.extend((1..=YEARS).map(|y| format!("recurrence_y{y}")));
    header.extend((1..=YEARS).map(|y| format!("survival_y{y}")));
    w.write_record(&header).expect("in-memory csv");
    for ((id, r), s) in ids.iter().zip(rec).zip(surv) {
        let mut rec_row = vec![id.clone()];
        rec_row.extend(r.iter().chain(s).map(f64::to_string));
        w.write_record(&rec_row).expect("in-memory csv");
    }
    w.into_inner().expect("in-memory csv")
}

/// Mid-axial slice of every timestep of a `[T, 1, D, H, W]` reconstruction.
pub fn recon_slices(recon: &Tensor) -> Result<Vec<(usize, usize, Vec<f64>)>> {
    let s = recon.shape();
    let &[t, 1, d, h, w] = s else {
        return Err(AppError::Usage(format!("reconstruction shape {s:?} is not [T, 1, D, H, W]")));
    };
    let z = d / 2;
    Ok((0..t)
        .map(|k| {
            let start = ((k * d) + z) * h * w;
            (h, w, recon.data()[start..start + h * w].to_vec())
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HeatmapSummary {
    pub patients: usize,
    pub recon_images: usize,
}

/// Writes the probability table, the cohort greymap and (for models with a
/// reconstruction path) one greymap per patient and timestep.
pub fn emit(t: &Trainer, split: &str, samples: &[Example], out: &Path) -> Result<HeatmapSummary> {
    let (ev, recons) = t.evaluate(split, samples, true)?;
    write_bytes(&out.join(PROBABILITIES_CSV), &encode_probabilities(&ev.ids, &ev.recurrence, &ev.survival))?;
    let rows: Vec<Vec<u8>> = ev.recurrence.iter().map(|r| r.iter().map(|&p| pixel(p)).collect()).collect();
    write_bytes(&out.join(COHORT_PGM), &encode_pgm(YEARS, &rows))?;
    let mut images = 0;
    for (id, recon) in ev.ids.iter().zip(&recons) {
        let Some(recon) = recon else { continue };
        for (k, (h, w, slice)) in recon_slices(recon)?.into_iter().enumerate() {
            let px = scale_slice(&slice);
            let rows: Vec<Vec<u8>> = px.chunks(w).map(<[u8]>::to_vec).collect();
            debug_assert_eq!(rows.len(), h);
            write_bytes(&out.join(RECON_DIR).join(format!("{id}_t{:02}.pgm", k + 1)), &encode_pgm(w, &rows))?;
            images += 1;
        }
    }
    Ok(HeatmapSummary { patients: ev.ids.len(), recon_images: images })
}
