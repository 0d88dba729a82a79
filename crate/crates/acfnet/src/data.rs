//! Synthetic cohort generation, preprocessing to disk and dataset loading.

use std::path::{Path, PathBuf};

use acfnet_core::preprocess::{preprocess_hu, PreprocessConfig, Volume};
use acfnet_core::split::{split_dataset, Split, SplitMode};
use acfnet_core::synth::{CohortSpec, Phantom, Sample};
use acfnet_core::trainer::Example;
use serde::{Deserialize, Serialize};

use crate::error::{AppError, Result};
use crate::io::{self, CohortRow};

pub const COHORT_CSV: &str = "cohort.csv";
pub const PHANTOMS: &str = "phantoms.jsonl";
pub const SPLIT_JSON: &str = "split.json";
pub const PREPROCESS_JSON: &str = "preprocess.json";
pub const COHORT_JSON: &str = "cohort.json";
pub const VOLUMES: &str = "volumes";

pub fn volume_path(dir: &Path, id: &str) -> PathBuf {
    dir.join(VOLUMES).join(format!("{id}.vol"))
}

/// Runs `f` over `items` on all available cores, keeping input order.
pub fn par_map<T: Sync, U: Send>(items: &[T], f: impl Fn(&T) -> U + Sync) -> Vec<U> {
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get()).min(items.len().max(1));
    let chunk = items.len().div_ceil(threads).max(1);
    std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|c| s.spawn(|| c.iter().map(&f).collect::<Vec<_>>()))
            .collect();
        handles.into_iter().flat_map(|h| h.join().expect("worker panicked")).collect()
    })
}

fn row(s: &Sample) -> CohortRow {
    CohortRow { id: s.id.clone(), clinical: s.clinical, labels: s.labels }
}

/// Writes raw volumes, the clinical table, phantom geometry and the cohort parameters.
pub fn gen_data(out: &Path, spec: &CohortSpec) -> Result<Vec<Phantom>> {
    spec.validate()?;
    let generated = par_map(&(0..spec.n).collect::<Vec<_>>(), |&i| spec.generate_one(i));
    let mut rows = Vec::with_capacity(spec.n);
    let mut phantoms = Vec::with_capacity(spec.n);
    for g in generated {
        let (s, p) = g?;
        io::write_volume(&volume_path(out, &s.id), &s.volume)?;
        rows.push(row(&s));
        phantoms.push(p);
    }
    io::write_cohort(&out.join(COHORT_CSV), &rows)?;
    io::write_phantoms(&out.join(PHANTOMS), &phantoms)?;
    io::write_json(&out.join(COHORT_JSON), spec)?;
    Ok(phantoms)
}

/// Split membership by sample id.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitFile {
    pub seed: u64,
    pub mode: SplitMode,
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

impl SplitFile {
    pub fn new(ids: &[String], seed: u64, mode: SplitMode) -> Result<Self> {
        let Split { train, val, test } = split_dataset(ids.len(), seed, mode)?;
        let names = |ix: Vec<usize>| ix.into_iter().map(|i| ids[i].clone()).collect();
        Ok(SplitFile { seed, mode, train: names(train), val: names(val), test: names(test) })
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct PreprocessRecord {
    config: PreprocessConfig,
    source: String,
    units: String,
}

/// Preprocesses every volume under `raw` (HU output, normalization happens
/// at load time) and writes the split.
pub fn preprocess_dir(raw: &Path, out: &Path, cfg: PreprocessConfig, seed: u64, mode: SplitMode) -> Result<SplitFile> {
    let rows = io::read_cohort(&raw.join(COHORT_CSV))?;
    let phantoms = io::read_phantoms(&raw.join(PHANTOMS))?;
    if phantoms.len() != rows.len() || rows.iter().zip(&phantoms).any(|(r, p)| r.id != p.id) {
        return Err(AppError::format(&raw.join(PHANTOMS), "phantom ids do not match the cohort table"));
    }
    let done = par_map(&phantoms, |p| -> Result<()> {
        let v = io::read_volume(&volume_path(raw, &p.id))?;
        let pre = preprocess_hu(&v, p.anchor_slice, cfg)?;
        io::write_volume(&volume_path(out, &p.id), &pre)
    });
    done.into_iter().collect::<Result<()>>()?;
    io::write_cohort(&out.join(COHORT_CSV), &rows)?;
    let ids: Vec<String> = rows.iter().map(|r| r.id.clone()).collect();
    let split = SplitFile::new(&ids, seed, mode)?;
    io::write_json(&out.join(SPLIT_JSON), &split)?;
    let record = PreprocessRecord { config: cfg, source: raw.display().to_string(), units: "HU".into() };
    io::write_json(&out.join(PREPROCESS_JSON), &record)?;
    Ok(split)
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub train: Vec<Example>,
    pub val: Vec<Example>,
    pub test: Vec<Example>,
}

impl Dataset {
    pub fn split(&self, name: &str) -> Result<&[Example]> {
        match name {
            "train" => Ok(&self.train),
            "val" => Ok(&self.val),
            "test" => Ok(&self.test),
            _ => Err(AppError::Usage(format!("unknown split `{name}` (train, val, test)"))),
        }
    }

    /// Common `(D, H, W)` of every volume.
    pub fn extents(&self) -> Result<[usize; 3]> {
        let mut all = self.train.iter().chain(&self.val).chain(&self.test);
        let first = all.next().ok_or_else(|| AppError::Usage("empty dataset".into()))?;
        let e = first.volume_hu.extents();
        match all.find(|x| x.volume_hu.extents() != e) {
            Some(x) => Err(AppError::Usage(format!(
                "volume {} has extents {:?}, expected {e:?}",
                x.id,
                x.volume_hu.extents()
            ))),
            None => Ok(e),
        }
    }
}

/// Loads a preprocessed directory.
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let rows = io::read_cohort(&dir.join(COHORT_CSV))?;
    let split: SplitFile = io::read_json(&dir.join(SPLIT_JSON))?;
    let volumes = par_map(&rows, |r| io::read_volume(&volume_path(dir, &r.id)));
    let mut by_id = std::collections::HashMap::new();
    for (r, v) in rows.into_iter().zip(volumes) {
        let volume_hu = v?;
        volume_hu.check_hu()?;
        by_id.insert(
            r.id.clone(),
            Example { id: r.id, volume_hu, clinical: r.clinical.to_array(), labels: r.labels },
        );
    }
    let take = |ids: &[String]| -> Result<Vec<Example>> {
        ids.iter()
            .map(|id| {
                by_id
                    .get(id)
                    .cloned()
                    .ok_or_else(|| AppError::format(&dir.join(SPLIT_JSON), format!("unknown id `{id}`")))
            })
            .collect()
    };
    Ok(Dataset { train: take(&split.train)?, val: take(&split.val)?, test: take(&split.test)? })
}

/// Rounds voxels to `f32`, matching what a write/read cycle produces.
fn as_stored(mut v: Volume) -> Volume {
    for x in v.voxels_mut() {
        *x = f64::from(*x as f32);
    }
    v
}

/// Generates, preprocesses and splits a cohort in memory; identical to
/// [`gen_data`] + [`preprocess_dir`] + [`load_dataset`].
pub fn synthesize(spec: &CohortSpec, cfg: PreprocessConfig, split_seed: u64, mode: SplitMode) -> Result<Dataset> {
    spec.validate()?;
    let examples = par_map(&(0..spec.n).collect::<Vec<_>>(), |&i| -> Result<Example> {
        let (s, p) = spec.generate_one(i)?;
        Ok(Example {
            volume_hu: as_stored(preprocess_hu(&as_stored(s.volume), p.anchor_slice, cfg)?),
            id: s.id,
            clinical: s.clinical.to_array(),
            labels: s.labels,
        })
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let Split { train, val, test } = split_dataset(examples.len(), split_seed, mode)?;
    let pick = |ix: Vec<usize>| ix.into_iter().map(|i| examples[i].clone()).collect();
    Ok(Dataset { train: pick(train), val: pick(val), test: pick(test) })
}
