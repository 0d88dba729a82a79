//! Synthetic liver-phantom cohorts with deterministic labels.
//!
//! Each phantom is an ellipsoidal liver on an air/soft-tissue background
//! with 1–5 spherical lesions. Labels are a pure function of the lesion
//! burden and the clinical covariates, so they can be recomputed from the
//! stored features and a perfect predictor exists.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heads::Labels;
use crate::preprocess::{Volume, HU_MAX, HU_MIN};
use crate::rng::keyed_rng;

pub const CLINICAL_FIELDS: [&str; 6] = ["age", "sex", "tnm", "n_mets", "cea", "treatment"];
/// Population median of the CEA draw (ng/mL).
pub const CEA_MEDIAN: f64 = 5.0;

/// Raw (unstandardized) clinical covariates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Clinical {
    /// Years.
    pub age: f64,
    /// 0 or 1.
    pub sex: f64,
    /// TNM stage ordinal, 1–4.
    pub tnm: f64,
    /// Number of liver metastases.
    pub n_mets: f64,
    /// Carcinoembryonic antigen, ng/mL.
    pub cea: f64,
    /// Treatment code 0–2.
    pub treatment: f64,
}

impl Clinical {
    pub fn to_array(&self) -> [f64; 6] {
        [self.age, self.sex, self.tnm, self.n_mets, self.cea, self.treatment]
    }

    pub fn from_array(a: [f64; 6]) -> Self {
        Clinical {
            age: a[0],
            sex: a[1],
            tnm: a[2],
            n_mets: a[3],
            cea: a[4],
            treatment: a[5],
        }
    }
}

/// One patient: volume, raw clinical covariates and labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub volume: Volume,
    pub clinical: Clinical,
    pub labels: Labels,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Lesion {
    pub center_mm: [f64; 3],
    pub radius_mm: f64,
}

/// Ground-truth geometry of a phantom.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Phantom {
    pub id: String,
    pub extents: [usize; 3],
    pub spacing_mm: [f64; 3],
    pub liver_center_mm: [f64; 3],
    pub liver_radii_mm: [f64; 3],
    pub lesions: Vec<Lesion>,
    /// Liver-centre slice, used as the cropping anchor.
    pub anchor_slice: usize,
}

impl Phantom {
    pub fn liver_volume_mm3(&self) -> f64 {
        let [a, b, c] = self.liver_radii_mm;
        4.0 / 3.0 * PI * a * b * c
    }

    /// Analytic lesion volume over liver volume.
    pub fn tumor_volume_fraction(&self) -> f64 {
        let lesions: f64 = self.lesions.iter().map(|l| 4.0 / 3.0 * PI * libm::pow(l.radius_mm, 3.0)).sum();
        lesions / self.liver_volume_mm3()
    }
}

/// Cohort geometry and label-rule parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CohortSpec {
    pub n: usize,
    pub seed: u64,
    /// Inclusive range of raw slice counts.
    pub depth_range: (usize, usize),
    /// Raw in-plane extent (H = W).
    pub in_plane: usize,
    pub spacing_mm: [f64; 3],
    pub rule: LabelRule,
}

impl Default for CohortSpec {
    fn default() -> Self {
        CohortSpec {
            n: 197,
            seed: 0,
            depth_range: (34, 46),
            in_plane: 64,
            spacing_mm: [2.5, 3.0, 3.0],
            rule: LabelRule::default(),
        }
    }
}

/// `recurrence = clip(round(base + burden·tvf + cea_step·𝟙(CEA > 5)
///   + interaction·𝟙(TNM ≥ 3)·𝟙(n_mets ≥ 3)), 1, 12)`;
/// survival adds `survival_offset`, `young_bonus·𝟙(age < 60)` and
/// `−stage_penalty·(TNM − 1)` to the unrounded recurrence score.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelRule {
    pub base: f64,
    pub burden: f64,
    pub cea_step: f64,
    pub interaction: f64,
    pub survival_offset: f64,
    pub young_bonus: f64,
    pub stage_penalty: f64,
}

impl Default for LabelRule {
    fn default() -> Self {
        LabelRule {
            base: 2.0,
            burden: 6.0 * 40.0,
            cea_step: 2.0,
            interaction: 1.0,
            survival_offset: 1.5,
            young_bonus: 1.0,
            stage_penalty: 0.5,
        }
    }
}

fn to_year(score: f64) -> u8 {
    libm::round(score).clamp(1.0, 12.0) as u8
}

impl LabelRule {
    pub fn recurrence_score(&self, c: &Clinical, tvf: f64) -> f64 {
        let cea = if c.cea > CEA_MEDIAN { self.cea_step } else { 0.0 };
        let inter = if c.tnm >= 3.0 && c.n_mets >= 3.0 { self.interaction } else { 0.0 };
        self.base + self.burden * tvf + cea + inter
    }

    pub fn labels(&self, c: &Clinical, tvf: f64) -> Labels {
        let r = self.recurrence_score(c, tvf);
        let young = if c.age < 60.0 { self.young_bonus } else { 0.0 };
        let s = r + self.survival_offset + young - self.stage_penalty * (c.tnm - 1.0);
        Labels {
            recurrence_year: to_year(r),
            survival_year: to_year(s),
        }
    }
}

const LIVER_RADII_MM: [(f64, f64); 3] = [(30.0, 36.0), (52.0, 60.0), (56.0, 66.0)];
const LESION_RADIUS_MM: (f64, f64) = (7.0, 8.0);
const HU_BACKGROUND: (f64, f64) = (-700.0, 30.0);
const HU_LIVER: (f64, f64) = (60.0, 10.0);
const HU_LESION: (f64, f64) = (90.0, 8.0);

pub fn sample_id(index: usize) -> String {
    format!("P{index:04}")
}

fn sq(x: f64) -> f64 {
    x * x
}

fn in_ellipsoid(p: [f64; 3], c: [f64; 3], r: [f64; 3]) -> bool {
    (0..3).map(|i| sq((p[i] - c[i]) / r[i])).sum::<f64>() <= 1.0
}

impl CohortSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n < 3 {
            return Err(Error::invalid("cohort", format!("n = {} (need at least 3 for a split)", self.n)));
        }
        let (lo, hi) = self.depth_range;
        if lo == 0 || lo > hi {
            return Err(Error::invalid("cohort", format!("bad depth range {lo}..={hi}")));
        }
        let fits = [lo, self.in_plane, self.in_plane]
            .iter()
            .zip(self.spacing_mm)
            .zip(LIVER_RADII_MM)
            .all(|((&n, s), (_, rmax))| n as f64 * s >= 2.0 * rmax + 10.0);
        if !fits {
            return Err(Error::invalid(
                "cohort",
                format!(
                    "extents {lo}×{0}×{0} at spacing {1:?} mm cannot hold the liver ellipsoid (radii up to {2:?} mm)",
                    self.in_plane,
                    self.spacing_mm,
                    LIVER_RADII_MM.map(|r| r.1)
                ),
            ));
        }
        Ok(())
    }

    /// The phantom and sample with index `index`, from the `(seed, id)` stream.
    pub fn generate_one(&self, index: usize) -> Result<(Sample, Phantom)> {
        self.validate()?;
        let id = sample_id(index);
        let mut rng = keyed_rng(self.seed, &id);
        let depth = rng.random_range(self.depth_range.0..=self.depth_range.1);
        let extents = [depth, self.in_plane, self.in_plane];
        let sp = self.spacing_mm;
        let size = [0, 1, 2].map(|i| extents[i] as f64 * sp[i]);

        let radii = LIVER_RADII_MM.map(|(a, b)| rng.random_range(a..b));
        let center = [0, 1, 2].map(|i| {
            let slack = (size[i] / 2.0 - radii[i] - 4.0).clamp(0.0, 6.0);
            size[i] / 2.0 + rng.random_range(-slack..=slack)
        });

        let n_lesions = rng.random_range(1..=5usize);
        let mut lesions = Vec::with_capacity(n_lesions);
        while lesions.len() < n_lesions {
            let r = rng.random_range(LESION_RADIUS_MM.0..LESION_RADIUS_MM.1);
            let inner = radii.map(|x| x - r - 2.0);
            let p = [0, 1, 2].map(|i| center[i] + rng.random_range(-inner[i]..inner[i]));
            if in_ellipsoid(p, center, inner) {
                lesions.push(Lesion { center_mm: p, radius_mm: r });
            }
        }

        let age = libm::round(rng.random_range(35.0..85.0));
        let sex = f64::from(rng.random_range(0..=1u8));
        let tnm = f64::from(rng.random_range(1..=4u8));
        let z: f64 = Normal::new(0.0, 1.0).expect("unit normal").sample(&mut rng);
        let cea = CEA_MEDIAN * libm::exp(0.6 * z);
        let treatment = f64::from(rng.random_range(0..=2u8));
        let clinical = Clinical {
            age,
            sex,
            tnm,
            n_mets: n_lesions as f64,
            cea,
            treatment,
        };

        let anchor_slice = ((center[0] / sp[0]) as usize).min(depth - 1);
        let phantom = Phantom {
            id: id.clone(),
            extents,
            spacing_mm: sp,
            liver_center_mm: center,
            liver_radii_mm: radii,
            lesions,
            anchor_slice,
        };
        let labels = self.rule.labels(&clinical, phantom.tumor_volume_fraction());

        let normal = |(m, s): (f64, f64)| Normal::new(m, s).expect("positive sigma");
        let (bg, liver, lesion) = (normal(HU_BACKGROUND), normal(HU_LIVER), normal(HU_LESION));
        let mut voxels = Vec::with_capacity(extents.iter().product());
        for z in 0..extents[0] {
            for y in 0..extents[1] {
                for x in 0..extents[2] {
                    let p = [(z as f64 + 0.5) * sp[0], (y as f64 + 0.5) * sp[1], (x as f64 + 0.5) * sp[2]];
                    let dist = if phantom
                        .lesions
                        .iter()
                        .any(|l| in_ellipsoid(p, l.center_mm, [l.radius_mm; 3]))
                    {
                        &lesion
                    } else if in_ellipsoid(p, center, radii) {
                        &liver
                    } else {
                        &bg
                    };
                    voxels.push(dist.sample(&mut rng).clamp(HU_MIN, HU_MAX));
                }
            }
        }
        let volume = Volume::new(extents, sp, voxels)?;
        Ok((
            Sample {
                id,
                volume,
                clinical,
                labels,
            },
            phantom,
        ))
    }

    pub fn generate(&self) -> Result<Vec<(Sample, Phantom)>> {
        (0..self.n).map(|i| self.generate_one(i)).collect()
    }
}

/// Per-feature mean and standard deviation over a training split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    /// Fits on `rows`; zero-variance features keep unit scale.
    pub fn fit(rows: &[[f64; 6]]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Empty { op: "standardizer" });
        }
        let n = rows.len() as f64;
        let mean: Vec<f64> = (0..6).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n).collect();
        let std = (0..6)
            .map(|j| {
                let var = rows.iter().map(|r| sq(r[j] - mean[j])).sum::<f64>() / n;
                let s = libm::sqrt(var);
                if s > 1e-12 {
                    s
                } else {
                    1.0
                }
            })
            .collect();
        Ok(Standardizer { mean, std })
    }

    pub fn apply(&self, row: &[f64; 6]) -> Vec<f64> {
        row.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(x, (m, s))| (x - m) / s)
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> CohortSpec {
        CohortSpec {
            n: 4,
            seed: 11,
            ..Default::default()
        }
    }

    #[test]
    fn deterministic_per_id() {
        let spec = small();
        let (a, pa) = spec.generate_one(2).unwrap();
        let (b, pb) = spec.generate_one(2).unwrap();
        assert_eq!(a, b);
        assert_eq!(pa, pb);
        let (c, _) = spec.generate_one(3).unwrap();
        assert_ne!(a.volume, c.volume);
    }

    #[test]
    fn labels_recompute_from_features() {
        let spec = small();
        for i in 0..spec.n {
            let (s, p) = spec.generate_one(i).unwrap();
            assert_eq!(spec.rule.labels(&s.clinical, p.tumor_volume_fraction()), s.labels);
            assert_eq!(s.clinical.n_mets as usize, p.lesions.len());
            s.volume.check_hu().unwrap();
            let [d, h, w] = s.volume.extents();
            assert!((34..=46).contains(&d) && h == 64 && w == 64);
            assert!(p.anchor_slice < d);
        }
    }

    #[test]
    fn too_small_extents_rejected() {
        let spec = CohortSpec {
            in_plane: 16,
            ..small()
        };
        assert!(spec.generate_one(0).is_err());
        assert!(CohortSpec { n: 2, ..small() }.validate().is_err());
    }

    #[test]
    fn standardizer_zero_mean_unit_var() {
        let rows = [[1.0, 0.0, 2.0, 3.0, 4.0, 5.0], [3.0, 0.0, 4.0, 1.0, 0.0, 5.0]];
        let s = Standardizer::fit(&rows).unwrap();
        assert_eq!(s.apply(&rows[0]), [-1.0, 0.0, -1.0, 1.0, 1.0, 0.0]);
    }
}
