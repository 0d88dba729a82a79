//! On-disk formats: volumes, the clinical table, phantom sidecars and
//! small JSON documents.

use std::fs;
use std::io::Write;
use std::path::Path;

use acfnet_core::heads::Labels;
use acfnet_core::preprocess::Volume;
use acfnet_core::synth::{Clinical, Phantom};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{AppError, Result};

pub const YEARS: usize = 12;

#[derive(Debug, Serialize, Deserialize)]
struct VolumeHeader {
    shape: [usize; 3],
    spacing_mm: [f64; 3],
    dtype: String,
}

/// JSON header line, then `D·H·W` little-endian `f32` (z, then y, then x).
pub fn encode_volume(v: &Volume) -> Vec<u8> {
    let header = VolumeHeader {
        shape: v.extents(),
        spacing_mm: v.spacing_mm(),
        dtype: "f32le".into(),
    };
    let mut out = serde_json::to_vec(&header).expect("header serializes");
    out.push(b'\n');
    out.reserve(v.len() * 4);
    for &x in v.voxels() {
        out.extend_from_slice(&(x as f32).to_le_bytes());
    }
    out
}

pub fn decode_volume(path: &Path, bytes: &[u8]) -> Result<Volume> {
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| AppError::format(path, "missing header line"))?;
    let header: VolumeHeader =
        serde_json::from_slice(&bytes[..nl]).map_err(|e| AppError::format(path, format!("bad header: {e}")))?;
    if header.dtype != "f32le" {
        return Err(AppError::format(path, format!("unsupported dtype `{}`", header.dtype)));
    }
    let n: usize = header.shape.iter().product();
    let payload = &bytes[nl + 1..];
    if payload.len() != n * 4 {
        return Err(AppError::format(
            path,
            format!(
                "payload length mismatch: header shape {:?} needs {} floats, found {} bytes",
                header.shape,
                n,
                payload.len()
            ),
        ));
    }
    let voxels = payload
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
        .collect();
    Volume::new(header.shape, header.spacing_mm, voxels).map_err(|e| AppError::format(path, e.to_string()))
}

pub fn write_volume(path: &Path, v: &Volume) -> Result<()> {
    write_bytes(path, &encode_volume(v))
}

pub fn read_volume(path: &Path) -> Result<Volume> {
    let bytes = fs::read(path).map_err(|e| AppError::io(path, e))?;
    decode_volume(path, &bytes)
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| AppError::io(dir, e))?;
        }
    }
    fs::write(path, bytes).map_err(|e| AppError::io(path, e))
}

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| AppError::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value).expect("serializable");
    s.push('\n');
    write_bytes(path, s.as_bytes())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = read_text(path)?;
    serde_json::from_str(&text).map_err(|e| AppError::format(path, e.to_string()))
}

/// Appends one compact JSON object as a line.
pub fn append_jsonl<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut f = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| AppError::io(path, e))?;
    let mut line = serde_json::to_string(value).expect("serializable");
    line.push('\n');
    f.write_all(line.as_bytes()).map_err(|e| AppError::io(path, e))
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    read_text(path)?
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| AppError::format(path, format!("line {}: {e}", i + 1))))
        .collect()
}

// ------------------------------------------------------------ cohort table

/// One row of the clinical table.
#[derive(Clone, Debug, PartialEq)]
pub struct CohortRow {
    pub id: String,
    pub clinical: Clinical,
    pub labels: Labels,
}

#[derive(Debug, Serialize, Deserialize)]
struct CsvRow {
    id: String,
    age: f64,
    sex: f64,
    tnm: f64,
    n_mets: f64,
    cea: f64,
    treatment: f64,
    recurrence_year: i64,
    survival_year: i64,
}

pub const COHORT_HEADER: &str = "id,age,sex,tnm,n_mets,cea,treatment,recurrence_year,survival_year";

pub fn encode_cohort(rows: &[CohortRow]) -> Vec<u8> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        let c = &r.clinical;
        w.serialize(CsvRow {
            id: r.id.clone(),
            age: c.age,
            sex: c.sex,
            tnm: c.tnm,
            n_mets: c.n_mets,
            cea: c.cea,
            treatment: c.treatment,
            recurrence_year: i64::from(r.labels.recurrence_year),
            survival_year: i64::from(r.labels.survival_year),
        })
        .expect("in-memory csv");
    }
    if rows.is_empty() {
        return format!("{COHORT_HEADER}\n").into_bytes();
    }
    w.into_inner().expect("in-memory csv")
}

fn label(path: &Path, line: u64, what: &str, v: i64) -> Result<u8> {
    if (1..=YEARS as i64).contains(&v) {
        Ok(v as u8)
    } else {
        Err(AppError::format(
            path,
            format!("line {line}: {what} = {v} out of range 1..={YEARS}"),
        ))
    }
}

pub fn decode_cohort(path: &Path, bytes: &[u8]) -> Result<Vec<CohortRow>> {
    let mut r = csv::Reader::from_reader(bytes);
    let header = r
        .headers()
        .map_err(|e| AppError::format(path, format!("line 1: {e}")))?
        .iter()
        .collect::<Vec<_>>()
        .join(",");
    if header != COHORT_HEADER {
        return Err(AppError::format(path, format!("line 1: expected header `{COHORT_HEADER}`")));
    }
    let mut out = Vec::new();
    for (i, rec) in r.deserialize::<CsvRow>().enumerate() {
        let line = i as u64 + 2;
        let row = rec.map_err(|e| AppError::format(path, format!("line {line}: malformed row: {e}")))?;
        let clinical = Clinical {
            age: row.age,
            sex: row.sex,
            tnm: row.tnm,
            n_mets: row.n_mets,
            cea: row.cea,
            treatment: row.treatment,
        };
        if clinical.to_array().iter().any(|x| !x.is_finite()) {
            return Err(AppError::format(path, format!("line {line}: non-finite clinical value")));
        }
        out.push(CohortRow {
            id: row.id,
            clinical,
            labels: Labels {
                recurrence_year: label(path, line, "recurrence_year", row.recurrence_year)?,
                survival_year: label(path, line, "survival_year", row.survival_year)?,
            },
        });
    }
    Ok(out)
}

pub fn write_cohort(path: &Path, rows: &[CohortRow]) -> Result<()> {
    write_bytes(path, &encode_cohort(rows))
}

pub fn read_cohort(path: &Path) -> Result<Vec<CohortRow>> {
    let bytes = fs::read(path).map_err(|e| AppError::io(path, e))?;
    decode_cohort(path, &bytes)
}

pub fn write_phantoms(path: &Path, phantoms: &[Phantom]) -> Result<()> {
    let mut out = String::new();
    for p in phantoms {
        out.push_str(&serde_json::to_string(p).expect("serializable"));
        out.push('\n');
    }
    write_bytes(path, out.as_bytes())
}

pub fn read_phantoms(path: &Path) -> Result<Vec<Phantom>> {
    read_jsonl(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn volume_round_trip_is_bit_exact() {
        let v = Volume::new([2, 3, 2], [2.5, 3.0, 3.0], (0..12).map(|i| i as f64 * 0.1 - 1024.0).collect()).unwrap();
        let bytes = encode_volume(&v);
        let back = decode_volume(Path::new("x"), &bytes).unwrap();
        assert_eq!(encode_volume(&back), bytes);
        assert!(bytes.starts_with(br#"{"shape":[2,3,2],"spacing_mm":[2.5,3.0,3.0],"dtype":"f32le"}"#));
    }

    #[test]
    fn short_payload_is_rejected() {
        let mut bytes = br#"{"shape":[2,2,2],"spacing_mm":[1,1,1],"dtype":"f32le"}"#.to_vec();
        bytes.push(b'\n');
        bytes.extend(std::iter::repeat_n(0u8, 7 * 4));
        let err = decode_volume(Path::new("v.vol"), &bytes).unwrap_err();
        assert!(err.to_string().contains("length mismatch"), "{err}");
    }

    #[test]
    fn cohort_round_trip_and_range_check() {
        let rows = vec![CohortRow {
            id: "P0001".into(),
            clinical: Clinical::from_array([61.0, 1.0, 3.0, 2.0, 4.123456789012345, 2.0]),
            labels: Labels { recurrence_year: 4, survival_year: 7 },
        }];
        let bytes = encode_cohort(&rows);
        assert!(bytes.starts_with(COHORT_HEADER.as_bytes()));
        assert_eq!(decode_cohort(Path::new("c"), &bytes).unwrap(), rows);
        let bad = format!("{COHORT_HEADER}\nP1,50,0,1,1,3.0,0,13,4\n");
        let err = decode_cohort(Path::new("c.csv"), bad.as_bytes()).unwrap_err();
        assert!(err.to_string().contains("line 2") && err.to_string().contains("recurrence_year"));
        let bad = format!("{COHORT_HEADER}\nP1,50,zero,1,1,3.0,0,3,4\n");
        assert!(decode_cohort(Path::new("c.csv"), bad.as_bytes()).unwrap_err().to_string().contains("line 2"));
    }
}
