//! CT volume preprocessing and augmentation: adaptive histogram
//! equalization, cubic in-plane resizing, slice cropping/padding,
//! HU normalization, elastic deformation and noise/blur.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::rng::keyed_rng;
use crate::tensor::Tensor;

pub const HU_MIN: f64 = -1024.0;
pub const HU_MAX: f64 = 3071.0;
/// Fill value for padding and out-of-volume reads.
pub const HU_AIR: f64 = HU_MIN;

/// A single-channel voxel grid, `z`-major then `y` then `x`.
///
/// Raw and preprocessed volumes hold Hounsfield units; normalized volumes
/// hold values in `[−1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    extents: [usize; 3],
    spacing_mm: [f64; 3],
    voxels: Vec<f64>,
}

impl Volume {
    pub fn new(extents: [usize; 3], spacing_mm: [f64; 3], voxels: Vec<f64>) -> Result<Self> {
        if extents.contains(&0) {
            return Err(Error::invalid("volume", format!("zero extent in {extents:?}")));
        }
        if extents.iter().product::<usize>() != voxels.len() {
            return Err(Error::invalid(
                "volume",
                format!("{} voxels for extents {extents:?}", voxels.len()),
            ));
        }
        if !spacing_mm.iter().all(|&s| s.is_finite() && s > 0.0) {
            return Err(Error::invalid("volume", format!("spacing must be positive, got {spacing_mm:?}")));
        }
        if voxels.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { what: "volume voxels".into() });
        }
        Ok(Volume {
            extents,
            spacing_mm,
            voxels,
        })
    }

    pub fn filled(extents: [usize; 3], spacing_mm: [f64; 3], value: f64) -> Result<Self> {
        Self::new(extents, spacing_mm, vec![value; extents.iter().product()])
    }

    pub fn extents(&self) -> [usize; 3] {
        self.extents
    }

    pub fn spacing_mm(&self) -> [f64; 3] {
        self.spacing_mm
    }

    pub fn voxels(&self) -> &[f64] {
        &self.voxels
    }

    pub fn voxels_mut(&mut self) -> &mut [f64] {
        &mut self.voxels
    }

    pub fn into_voxels(self) -> Vec<f64> {
        self.voxels
    }

    pub fn len(&self) -> usize {
        self.voxels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.voxels.is_empty()
    }

    pub fn index(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.extents[1] + y) * self.extents[2] + x
    }

    pub fn get(&self, z: usize, y: usize, x: usize) -> f64 {
        self.voxels[self.index(z, y, x)]
    }

    pub fn slice(&self, z: usize) -> &[f64] {
        let n = self.extents[1] * self.extents[2];
        &self.voxels[z * n..(z + 1) * n]
    }

    /// Errors unless every voxel lies in the 12-bit HU range.
    pub fn check_hu(&self) -> Result<()> {
        match self.voxels.iter().find(|v| !(HU_MIN..=HU_MAX).contains(*v)) {
            Some(&v) => Err(Error::OutOfRange {
                what: "HU value",
                value: v,
                lo: HU_MIN,
                hi: HU_MAX,
            }),
            None => Ok(()),
        }
    }

    /// `[D, H, W]` tensor view of the voxels.
    pub fn to_tensor(&self) -> Result<Tensor> {
        Tensor::new(self.extents.to_vec(), self.voxels.clone())
    }
}

// ------------------------------------------------------------ normalization

/// `x ↦ (x + 1024)/2047.5 − 1`, mapping `[−1024, 3071]` onto `[−1, 1]`.
pub fn normalize_hu(v: &Volume) -> Result<Volume> {
    v.check_hu()?;
    let mut out = v.clone();
    for x in &mut out.voxels {
        *x = (*x - HU_MIN) / 2047.5 - 1.0;
    }
    Ok(out)
}

// ------------------------------------------------------------ equalization

pub const AHE_TILES: usize = 4;
pub const AHE_BINS: usize = 64;

/// Monotone map of one tile's histogram onto `[lo, hi]`.
struct TileMap {
    lut: [f64; AHE_BINS],
    identity: bool,
}

fn bin_of(x: f64, lo: f64, hi: f64) -> usize {
    let b = ((x - lo) / (hi - lo) * AHE_BINS as f64) as usize;
    b.min(AHE_BINS - 1)
}

fn tile_map(values: impl Iterator<Item = f64>, lo: f64, hi: f64) -> TileMap {
    let mut hist = [0usize; AHE_BINS];
    let mut n = 0;
    for x in values {
        hist[bin_of(x, lo, hi)] += 1;
        n += 1;
    }
    let mut lut = [0.0; AHE_BINS];
    let cdf_min = hist.iter().copied().find(|&c| c > 0).unwrap_or(0);
    if n == cdf_min {
        // single occupied bin: leave values where they are
        return TileMap { lut, identity: true };
    }
    let mut acc = 0;
    for (b, &c) in hist.iter().enumerate() {
        acc += c;
        lut[b] = lo + (acc.saturating_sub(cdf_min)) as f64 / (n - cdf_min) as f64 * (hi - lo);
    }
    TileMap { lut, identity: false }
}

impl TileMap {
    fn apply(&self, x: f64, lo: f64, hi: f64) -> f64 {
        if self.identity {
            x
        } else {
            self.lut[bin_of(x, lo, hi)]
        }
    }
}

/// Equalizes one `h × w` slice in place.
pub fn equalize_slice(slice: &mut [f64], h: usize, w: usize) {
    let (lo, hi) = slice
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
    if hi <= lo {
        return;
    }
    if h < AHE_TILES || w < AHE_TILES {
        let map = tile_map(slice.iter().copied(), lo, hi);
        for x in slice.iter_mut() {
            *x = map.apply(*x, lo, hi);
        }
        return;
    }
    let edge = |i: usize, n: usize| i * n / AHE_TILES;
    let maps: Vec<TileMap> = (0..AHE_TILES * AHE_TILES)
        .map(|t| {
            let (ty, tx) = (t / AHE_TILES, t % AHE_TILES);
            let (y0, y1, x0, x1) = (edge(ty, h), edge(ty + 1, h), edge(tx, w), edge(tx + 1, w));
            let src = &*slice;
            tile_map((y0..y1).flat_map(move |y| (x0..x1).map(move |x| src[y * w + x])), lo, hi)
        })
        .collect();
    // continuous tile coordinate of a pixel centre, clamped to the tile-centre lattice
    let coord = |i: usize, n: usize| -> (usize, usize, f64) {
        let t = ((i as f64 + 0.5) * AHE_TILES as f64 / n as f64 - 0.5).clamp(0.0, (AHE_TILES - 1) as f64);
        let t0 = (t as usize).min(AHE_TILES - 1);
        let t1 = (t0 + 1).min(AHE_TILES - 1);
        (t0, t1, t - t0 as f64)
    };
    let src = slice.to_vec();
    for y in 0..h {
        let (a0, a1, fy) = coord(y, h);
        for x in 0..w {
            let (b0, b1, fx) = coord(x, w);
            let v = src[y * w + x];
            let m = |ty: usize, tx: usize| maps[ty * AHE_TILES + tx].apply(v, lo, hi);
            let top = (1.0 - fx) * m(a0, b0) + fx * m(a0, b1);
            let bot = (1.0 - fx) * m(a1, b0) + fx * m(a1, b1);
            slice[y * w + x] = ((1.0 - fy) * top + fy * bot).clamp(lo, hi);
        }
    }
}

/// Per-slice adaptive histogram equalization (4×4 tiles, 64 bins, bilinear
/// blending between tile maps). Each slice keeps its value range.
pub fn adaptive_hist_eq(v: &Volume) -> Volume {
    let mut out = v.clone();
    let [d, h, w] = v.extents;
    for z in 0..d {
        equalize_slice(&mut out.voxels[z * h * w..(z + 1) * h * w], h, w);
    }
    out
}

// ------------------------------------------------------------ resizing

/// Catmull-Rom weights for taps at offsets −1, 0, 1, 2 from `floor(x)`.
pub fn catmull_rom_weights(t: f64) -> [f64; 4] {
    let t2 = t * t;
    let t3 = t2 * t;
    [
        0.5 * (-t3 + 2.0 * t2 - t),
        0.5 * (3.0 * t3 - 5.0 * t2 + 2.0),
        0.5 * (-3.0 * t3 + 4.0 * t2 + t),
        0.5 * (t3 - t2),
    ]
}

/// Resamples `src` (length `n`) at `m` points with end points aligned.
fn resample_line(src: &[f64], m: usize, out: &mut [f64]) {
    let n = src.len();
    for (i, o) in out.iter_mut().enumerate().take(m) {
        let x = if m == 1 {
            (n - 1) as f64 / 2.0
        } else {
            i as f64 * (n - 1) as f64 / (m - 1) as f64
        };
        let k = libm::floor(x);
        let w = catmull_rom_weights(x - k);
        let k = k as isize;
        *o = (0..4)
            .map(|j| {
                let idx = (k + j as isize - 1).clamp(0, n as isize - 1) as usize;
                w[j] * src[idx]
            })
            .sum();
    }
}

/// Separable Catmull-Rom downsampling of every slice to `target × target`
/// (along H, then W; border taps clamp to the edge).
pub fn resize_cubic(v: &Volume, target: usize) -> Result<Volume> {
    let [d, h, w] = v.extents;
    if target == 0 || target > h || target > w {
        return Err(Error::invalid(
            "resize_cubic",
            format!("target {target} must be in 1..={} (upscaling is not supported)", h.min(w)),
        ));
    }
    let mut out = vec![0.0; d * target * target];
    let mut col = vec![0.0; h];
    let mut col_out = vec![0.0; target];
    let mut mid = vec![0.0; target * w];
    for z in 0..d {
        let s = v.slice(z);
        for x in 0..w {
            for y in 0..h {
                col[y] = s[y * w + x];
            }
            resample_line(&col, target, &mut col_out);
            for y in 0..target {
                mid[y * w + x] = col_out[y];
            }
        }
        for y in 0..target {
            let row = &mid[y * w..(y + 1) * w];
            let o = &mut out[(z * target + y) * target..(z * target + y + 1) * target];
            resample_line(row, target, o);
        }
    }
    let scale = |n: usize| if target > 1 { (n - 1) as f64 / (target - 1) as f64 } else { n as f64 };
    let [sz, sy, sx] = v.spacing_mm;
    Volume::new([d, target, target], [sz, sy * scale(h), sx * scale(w)], out)
}

// ------------------------------------------------------------ slices

/// Extracts an `n`-slice window centred at `anchor` (shifted inward at the
/// volume boundary), or pads symmetrically with −1024 HU when too short
/// (the odd extra slice goes after).
pub fn crop_or_pad_slices(v: &Volume, n: usize, anchor: usize) -> Result<Volume> {
    let [d, h, w] = v.extents;
    if n == 0 {
        return Err(Error::invalid("crop_or_pad_slices", "slice count must be positive"));
    }
    if anchor >= d {
        return Err(Error::invalid(
            "crop_or_pad_slices",
            format!("anchor slice {anchor} outside a {d}-slice volume"),
        ));
    }
    let plane = h * w;
    let voxels = if d >= n {
        let start = anchor.saturating_sub(n / 2).min(d - n);
        v.voxels[start * plane..(start + n) * plane].to_vec()
    } else {
        let before = (n - d) / 2;
        let mut out = vec![HU_AIR; n * plane];
        out[before * plane..(before + d) * plane].copy_from_slice(&v.voxels);
        out
    };
    Volume::new([n, h, w], v.spacing_mm, voxels)
}

// ------------------------------------------------------------ full chain

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PreprocessConfig {
    pub n_slices: usize,
    pub target: usize,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig { n_slices: 40, target: 32 }
    }
}

/// AHE → cubic resize → clamp to the HU range → crop/pad. Output stays in HU.
pub fn preprocess_hu(raw: &Volume, anchor: usize, cfg: PreprocessConfig) -> Result<Volume> {
    raw.check_hu()?;
    let eq = adaptive_hist_eq(raw);
    let mut small = resize_cubic(&eq, cfg.target)?;
    // cubic interpolation can overshoot slightly
    for x in &mut small.voxels {
        *x = x.clamp(HU_MIN, HU_MAX);
    }
    crop_or_pad_slices(&small, cfg.n_slices, anchor)
}

/// The deterministic chain ending in `[−1, 1]`: [`preprocess_hu`] then [`normalize_hu`].
pub fn preprocess(raw: &Volume, anchor: usize, cfg: PreprocessConfig) -> Result<Volume> {
    normalize_hu(&preprocess_hu(raw, anchor, cfg)?)
}

// ------------------------------------------------------------ elastic

pub const CONTROL_POINTS: usize = 7;
pub const MAX_DISPLACEMENT_MM: f64 = 5.0;

/// Displacements (mm, per axis z/y/x) at a 7×7×7 control lattice spanning
/// the volume.
#[derive(Clone, Debug, PartialEq)]
pub struct ControlGrid {
    pub displacement_mm: Vec<[f64; 3]>,
}

impl ControlGrid {
    pub fn zero() -> Self {
        ControlGrid {
            displacement_mm: vec![[0.0; 3]; CONTROL_POINTS.pow(3)],
        }
    }

    /// Each control displacement uniform in the ball of radius 5 mm, so the
    /// interpolated field's magnitude is bounded by 5 mm as well.
    pub fn random(seed: u64) -> Self {
        let mut rng = keyed_rng(seed, "elastic");
        let m = MAX_DISPLACEMENT_MM;
        let mut draw = || loop {
            let v = [rng.random_range(-m..=m), rng.random_range(-m..=m), rng.random_range(-m..=m)];
            if v[0] * v[0] + v[1] * v[1] + v[2] * v[2] <= m * m {
                return v;
            }
        };
        ControlGrid {
            displacement_mm: (0..CONTROL_POINTS.pow(3)).map(|_| draw()).collect(),
        }
    }

    fn at(&self, i: usize, j: usize, k: usize) -> [f64; 3] {
        self.displacement_mm[(i * CONTROL_POINTS + j) * CONTROL_POINTS + k]
    }
}

/// Uniform cubic B-spline basis at fraction `t` for taps −1, 0, 1, 2.
pub fn bspline_weights(t: f64) -> [f64; 4] {
    let s = 1.0 - t;
    [
        s * s * s / 6.0,
        (3.0 * t * t * t - 6.0 * t * t + 4.0) / 6.0,
        (-3.0 * t * t * t + 3.0 * t * t + 3.0 * t + 1.0) / 6.0,
        t * t * t / 6.0,
    ]
}

/// Lattice index range and weights for one voxel coordinate along an axis.
fn lattice_taps(i: usize, n: usize) -> ([usize; 4], [f64; 4]) {
    let u = if n > 1 {
        i as f64 * (CONTROL_POINTS - 1) as f64 / (n - 1) as f64
    } else {
        0.0
    };
    let k = libm::floor(u).min((CONTROL_POINTS - 1) as f64);
    let w = bspline_weights(u - k);
    let k = k as isize;
    let idx = core::array::from_fn(|j| (k + j as isize - 1).clamp(0, CONTROL_POINTS as isize - 1) as usize);
    (idx, w)
}

/// Dense displacement field (mm) by cubic B-spline interpolation of the
/// lattice. Weights are nonnegative and sum to one, so each displacement is a
/// convex combination of control displacements and inherits their bound.
pub fn dense_displacement(grid: &ControlGrid, extents: [usize; 3]) -> Vec<[f64; 3]> {
    let [d, h, w] = extents;
    let tz: Vec<_> = (0..d).map(|i| lattice_taps(i, d)).collect();
    let ty: Vec<_> = (0..h).map(|i| lattice_taps(i, h)).collect();
    let tx: Vec<_> = (0..w).map(|i| lattice_taps(i, w)).collect();
    let mut out = Vec::with_capacity(d * h * w);
    for (iz, wz) in &tz {
        for (iy, wy) in &ty {
            for (ix, wx) in &tx {
                let mut acc = [0.0; 3];
                for a in 0..4 {
                    for b in 0..4 {
                        let wab = wz[a] * wy[b];
                        for c in 0..4 {
                            let p = grid.at(iz[a], iy[b], ix[c]);
                            let wt = wab * wx[c];
                            for (s, q) in acc.iter_mut().zip(p) {
                                *s += wt * q;
                            }
                        }
                    }
                }
                out.push(acc);
            }
        }
    }
    out
}

/// Trilinear read at fractional voxel coordinates; outside corners read −1024.
fn trilinear(v: &Volume, p: [f64; 3]) -> f64 {
    let [d, h, w] = v.extents;
    let fl = p.map(libm::floor);
    let f = [p[0] - fl[0], p[1] - fl[1], p[2] - fl[2]];
    let base = fl.map(|x| x as isize);
    let mut acc = 0.0;
    for dz in 0..2 {
        let wz = if dz == 0 { 1.0 - f[0] } else { f[0] };
        if wz == 0.0 {
            continue;
        }
        for dy in 0..2 {
            let wy = if dy == 0 { 1.0 - f[1] } else { f[1] };
            if wy == 0.0 {
                continue;
            }
            for dx in 0..2 {
                let wx = if dx == 0 { 1.0 - f[2] } else { f[2] };
                if wx == 0.0 {
                    continue;
                }
                let (z, y, x) = (base[0] + dz, base[1] + dy, base[2] + dx);
                let inside = (0..d as isize).contains(&z) && (0..h as isize).contains(&y) && (0..w as isize).contains(&x);
                let val = if inside { v.get(z as usize, y as usize, x as usize) } else { HU_AIR };
                acc += wz * wy * wx * val;
            }
        }
    }
    acc
}

/// Resamples `v` at positions displaced by the B-spline field of `grid`.
pub fn elastic_deform_with(v: &Volume, grid: &ControlGrid) -> Volume {
    let [d, h, w] = v.extents;
    let field = dense_displacement(grid, v.extents);
    let sp = v.spacing_mm;
    // reads are convex combinations of voxels and the fill value; clamp away rounding
    let (lo, hi) = v
        .voxels
        .iter()
        .fold((HU_AIR, HU_AIR), |(a, b), &x| (a.min(x), b.max(x)));
    let mut out = v.clone();
    let mut i = 0;
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let u = field[i];
                let p = [z as f64 + u[0] / sp[0], y as f64 + u[1] / sp[1], x as f64 + u[2] / sp[2]];
                out.voxels[i] = trilinear(v, p).clamp(lo, hi);
                i += 1;
            }
        }
    }
    out
}

/// Elastic deformation with a random 7×7×7 control lattice (|u| ≤ 5 mm).
pub fn elastic_deform(v: &Volume, seed: u64) -> Volume {
    elastic_deform_with(v, &ControlGrid::random(seed))
}

// ------------------------------------------------------------ noise / blur

pub const MAX_NOISE_SIGMA: f64 = 0.1;
pub const MAX_BLUR_SIGMA: f64 = 0.5;

/// Drawn parameters of one noise-and-blur application.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoiseBlur {
    pub noise_sigma: f64,
    pub blur_sigma: f64,
    /// In-plane axis of the blur: 1 = y, 2 = x.
    pub blur_axis: usize,
    pub noise_seed: u64,
}

impl NoiseBlur {
    pub fn random(seed: u64) -> Self {
        let mut rng = keyed_rng(seed, "noise_blur");
        NoiseBlur {
            noise_sigma: rng.random_range(0.0..=MAX_NOISE_SIGMA),
            blur_sigma: rng.random_range(0.0..=MAX_BLUR_SIGMA),
            blur_axis: if rng.random::<bool>() { 1 } else { 2 },
            noise_seed: rng.random(),
        }
    }
}

/// Normalized Gaussian taps of radius `⌈3σ⌉` (a single tap at σ = 0).
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = libm::ceil(3.0 * sigma) as isize;
    if r == 0 {
        return vec![1.0];
    }
    let raw: Vec<f64> = (-r..=r)
        .map(|k| libm::exp(-((k * k) as f64) / (2.0 * sigma * sigma)))
        .collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|x| x / s).collect()
}

/// Adds `N(0, σ_n²)` noise, blurs along one in-plane axis (weights
/// renormalized where taps leave the volume) and clamps to `[−1, 1]`.
pub fn noise_and_blur_with(v: &Volume, p: &NoiseBlur) -> Result<Volume> {
    if !(p.blur_axis == 1 || p.blur_axis == 2) {
        return Err(Error::invalid("noise_and_blur", "blur axis must be 1 (y) or 2 (x)"));
    }
    let mut noisy = v.clone();
    if p.noise_sigma > 0.0 {
        let normal = Normal::new(0.0, p.noise_sigma).map_err(|e| Error::invalid("noise_and_blur", format!("{e}")))?;
        let mut rng = keyed_rng(p.noise_seed, "noise");
        for x in &mut noisy.voxels {
            *x += normal.sample(&mut rng);
        }
    }
    let kernel = gaussian_kernel(p.blur_sigma);
    let r = (kernel.len() / 2) as isize;
    let mut out = noisy.clone();
    if r > 0 {
        let [d, h, w] = v.extents;
        let (n, stride) = if p.blur_axis == 1 { (h, w) } else { (w, 1) };
        for z in 0..d {
            for a in 0..h {
                for b in 0..w {
                    let pos = if p.blur_axis == 1 { a } else { b } as isize;
                    let centre = v.index(z, a, b);
                    let (mut acc, mut wsum) = (0.0, 0.0);
                    for (j, &k) in kernel.iter().enumerate() {
                        let q = pos + j as isize - r;
                        if q < 0 || q >= n as isize {
                            continue;
                        }
                        let idx = (centre as isize + (q - pos) * stride as isize) as usize;
                        acc += k * noisy.voxels[idx];
                        wsum += k;
                    }
                    out.voxels[centre] = acc / wsum;
                }
            }
        }
    }
    for x in &mut out.voxels {
        *x = x.clamp(-1.0, 1.0);
    }
    Ok(out)
}

pub fn noise_and_blur(v: &Volume, seed: u64) -> Result<Volume> {
    noise_and_blur_with(v, &NoiseBlur::random(seed))
}

/// Training-time augmentation of a preprocessed HU volume: elastic
/// deformation, normalization, then noise and blur. Result in `[−1, 1]`.
pub fn augment(v_hu: &Volume, seed: u64) -> Result<Volume> {
    let deformed = elastic_deform(v_hu, seed);
    let normalized = normalize_hu(&deformed)?;
    noise_and_blur(&normalized, seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vol(extents: [usize; 3], f: impl Fn(usize, usize, usize) -> f64) -> Volume {
        let [d, h, w] = extents;
        let mut v = Vec::new();
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    v.push(f(z, y, x));
                }
            }
        }
        Volume::new(extents, [2.0, 1.0, 1.0], v).unwrap()
    }

    #[test]
    fn normalization_endpoints() {
        let v = Volume::new([1, 1, 3], [1.0; 3], vec![-1024.0, 3071.0, 1023.5]).unwrap();
        assert_eq!(normalize_hu(&v).unwrap().voxels(), &[-1.0, 1.0, 0.0]);
        let bad = Volume::new([1, 1, 1], [1.0; 3], vec![3072.0]).unwrap();
        assert!(normalize_hu(&bad).is_err());
    }

    #[test]
    fn ahe_constant_and_range() {
        let c = vol([2, 8, 8], |_, _, _| 40.0);
        assert_eq!(adaptive_hist_eq(&c), c);
        let r = vol([1, 16, 12], |_, y, x| ((y * 37 + x * 11) % 50) as f64 * 3.0 - 20.0);
        let e = adaptive_hist_eq(&r);
        let (lo, hi) = (-20.0, 49.0 * 3.0 - 20.0);
        assert!(e.voxels().iter().all(|&x| (lo..=hi).contains(&x)));
    }

    #[test]
    fn ahe_two_valued_fallback() {
        // 2×3 slice is smaller than the tile grid: whole-slice equalization
        let v = Volume::new([1, 2, 3], [1.0; 3], vec![0.0, 0.0, 0.0, 10.0, 10.0, 10.0]).unwrap();
        let e = adaptive_hist_eq(&v);
        assert_eq!(e.voxels(), v.voxels());
        let v = Volume::new([1, 2, 3], [1.0; 3], vec![0.0, 1.0, 2.0, 7.0, 9.0, 10.0]).unwrap();
        let e = adaptive_hist_eq(&v);
        let expect: Vec<f64> = [0.0, 1.0, 2.0, 3.0, 4.0, 5.0].iter().map(|c| c * 2.0).collect();
        assert_eq!(e.voxels(), &expect[..]);
    }

    #[test]
    fn resize_identity_constant_ramp() {
        let r = vol([2, 9, 9], |z, y, x| (z * 100 + y * 9 + x) as f64);
        let same = resize_cubic(&r, 9).unwrap();
        assert_eq!(same.voxels(), r.voxels());
        let c = vol([1, 20, 20], |_, _, _| 7.5);
        assert!(resize_cubic(&c, 7).unwrap().voxels().iter().all(|&x| (x - 7.5).abs() < 1e-12));
        let ramp = vol([1, 64, 64], |_, _, x| 3.0 * x as f64 - 10.0);
        let small = resize_cubic(&ramp, 32).unwrap();
        for (i, &v) in small.voxels().iter().enumerate() {
            let x = (i % 32) as f64 * 63.0 / 31.0;
            assert!((v - (3.0 * x - 10.0)).abs() < 1e-10);
        }
        assert!(resize_cubic(&ramp, 65).is_err());
    }

    #[test]
    fn crop_pad_rules() {
        let v = |d| vol([d, 2, 2], |z, _, _| z as f64);
        assert_eq!(crop_or_pad_slices(&v(40), 40, 20).unwrap(), v(40));
        let p = crop_or_pad_slices(&v(38), 40, 5).unwrap();
        assert_eq!(p.slice(0), &[HU_AIR; 4]);
        assert_eq!(p.slice(1), &[0.0; 4]);
        assert_eq!(p.slice(39), &[HU_AIR; 4]);
        let p = crop_or_pad_slices(&v(37), 40, 5).unwrap();
        assert_eq!(p.slice(0), &[HU_AIR; 4]);
        assert_eq!(p.slice(1), &[0.0; 4]);
        assert_eq!(p.slice(37), &[36.0; 4]);
        assert_eq!(p.slice(38), &[HU_AIR; 4]);
        assert_eq!(p.slice(39), &[HU_AIR; 4]);
        let c = crop_or_pad_slices(&v(50), 40, 2).unwrap();
        assert_eq!(c.slice(0)[0], 0.0);
        let c = crop_or_pad_slices(&v(50), 40, 25).unwrap();
        assert_eq!(c.slice(0)[0], 5.0);
        assert!(crop_or_pad_slices(&v(5), 0, 1).is_err());
    }

    #[test]
    fn zero_augmentation_is_identity() {
        let v = vol([5, 6, 7], |z, y, x| ((z * 31 + y * 7 + x) % 13) as f64 * 20.0 - 100.0);
        assert_eq!(elastic_deform_with(&v, &ControlGrid::zero()), v);
        let n = normalize_hu(&v).unwrap();
        let zero = NoiseBlur { noise_sigma: 0.0, blur_sigma: 0.0, blur_axis: 2, noise_seed: 3 };
        assert_eq!(noise_and_blur_with(&n, &zero).unwrap(), n);
    }

    #[test]
    fn bspline_partition_of_unity() {
        for i in 0..=10 {
            let w = bspline_weights(i as f64 / 10.0);
            assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-15);
            assert!(w.iter().all(|&x| x >= 0.0));
        }
    }

    #[test]
    fn blur_preserves_constant_interior() {
        let v = vol([2, 10, 10], |_, _, _| 0.25);
        let p = NoiseBlur { noise_sigma: 0.0, blur_sigma: 0.5, blur_axis: 1, noise_seed: 0 };
        let b = noise_and_blur_with(&v, &p).unwrap();
        assert!(b.voxels().iter().all(|&x| (x - 0.25).abs() < 1e-12));
        assert!((gaussian_kernel(0.37).iter().sum::<f64>() - 1.0).abs() < 1e-15);
    }
}
