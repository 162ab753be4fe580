//! Volume preparation: brain masking, isotropic resampling, in-mask z-scoring,
//! ADC channel replication and the 16 axis-aligned augmentations.

use std::collections::VecDeque;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{read_mvol, write_manifest, write_mvol, CohortManifest, Modality, ScanRecord, Volume};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskMode {
    /// Use a `<name>.mask.mvol` file next to the scan.
    Provided,
    Auto,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalize {
    ZscoreInMask,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessConfig {
    pub target_spacing_mm: f64,
    pub target_dims: [usize; 3],
    pub mask_mode: MaskMode,
    pub normalize: Normalize,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            target_spacing_mm: 1.5,
            target_dims: [64, 64, 64],
            mask_mode: MaskMode::Auto,
            normalize: Normalize::ZscoreInMask,
        }
    }
}

impl PreprocessConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.target_spacing_mm.is_finite() && self.target_spacing_mm > 0.0) {
            return Err(Error::Config(format!("target_spacing_mm must be positive, got {}", self.target_spacing_mm)));
        }
        if self.target_dims.iter().any(|&d| d < 8) {
            return Err(Error::Config(format!("target_dims must all be >= 8, got {:?}", self.target_dims)));
        }
        Ok(())
    }
}

/// Otsu threshold over a 256-bin histogram spanning `[min, max]`.
/// Values strictly above the returned threshold are foreground.
pub fn otsu_threshold(values: &[f32]) -> Option<f64> {
    let (lo, hi) =
        values.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v as f64), hi.max(v as f64)));
    if !(hi > lo) {
        return None;
    }
    const BINS: usize = 256;
    let width = (hi - lo) / BINS as f64;
    let mut hist = [0u64; BINS];
    for &v in values {
        let b = (((v as f64 - lo) / width) as usize).min(BINS - 1);
        hist[b] += 1;
    }
    let total = values.len() as f64;
    let sum_all: f64 = hist.iter().enumerate().map(|(i, &c)| i as f64 * c as f64).sum();
    let (mut w0, mut sum0) = (0.0, 0.0);
    let (mut best, mut best_bin) = (-1.0, 0);
    for (i, &c) in hist.iter().enumerate().take(BINS - 1) {
        w0 += c as f64;
        sum0 += i as f64 * c as f64;
        let w1 = total - w0;
        if w0 == 0.0 || w1 == 0.0 {
            continue;
        }
        let m0 = sum0 / w0;
        let m1 = (sum_all - sum0) / w1;
        let between = w0 * w1 * (m0 - m1) * (m0 - m1);
        if between > best {
            best = between;
            best_bin = i;
        }
    }
    Some(lo + (best_bin + 1) as f64 * width)
}

const NEIGHBOURS: [(isize, isize, isize); 6] = [(-1, 0, 0), (1, 0, 0), (0, -1, 0), (0, 1, 0), (0, 0, -1), (0, 0, 1)];

fn neighbour(dims: [usize; 3], z: usize, y: usize, x: usize, d: (isize, isize, isize)) -> Option<usize> {
    let (nz, ny, nx) = (z as isize + d.0, y as isize + d.1, x as isize + d.2);
    if nz < 0 || ny < 0 || nx < 0 || nz >= dims[0] as isize || ny >= dims[1] as isize || nx >= dims[2] as isize {
        return None;
    }
    Some((nz as usize * dims[1] + ny as usize) * dims[2] + nx as usize)
}

fn coords(dims: [usize; 3], i: usize) -> (usize, usize, usize) {
    (i / (dims[1] * dims[2]), (i / dims[2]) % dims[1], i % dims[2])
}

/// Keeps the largest 6-connected foreground component; ties go to the one
/// containing the lowest flat index.
pub fn largest_component(mask: &[bool], dims: [usize; 3]) -> Vec<bool> {
    let mut label = vec![0u32; mask.len()];
    let (mut best_label, mut best_size) = (0u32, 0usize);
    let mut next = 0u32;
    let mut queue = VecDeque::new();
    for start in 0..mask.len() {
        if !mask[start] || label[start] != 0 {
            continue;
        }
        next += 1;
        label[start] = next;
        queue.push_back(start);
        let mut size = 0;
        while let Some(i) = queue.pop_front() {
            size += 1;
            let (z, y, x) = coords(dims, i);
            for d in NEIGHBOURS {
                if let Some(j) = neighbour(dims, z, y, x, d) {
                    if mask[j] && label[j] == 0 {
                        label[j] = next;
                        queue.push_back(j);
                    }
                }
            }
        }
        if size > best_size {
            best_size = size;
            best_label = next;
        }
    }
    label.iter().map(|&l| l != 0 && l == best_label).collect()
}

/// Morphological closing with the radius-1 ball (centre plus 6 face
/// neighbours). Erosion treats voxels beyond the border as foreground so the
/// closing never eats into a mask that touches the edge.
pub fn close(mask: &[bool], dims: [usize; 3]) -> Vec<bool> {
    let dilated: Vec<bool> = (0..mask.len())
        .map(|i| {
            let (z, y, x) = coords(dims, i);
            mask[i] || NEIGHBOURS.iter().any(|&d| neighbour(dims, z, y, x, d).is_some_and(|j| mask[j]))
        })
        .collect();
    (0..mask.len())
        .map(|i| {
            let (z, y, x) = coords(dims, i);
            dilated[i] && NEIGHBOURS.iter().all(|&d| neighbour(dims, z, y, x, d).is_none_or(|j| dilated[j]))
        })
        .collect()
}

/// Otsu threshold, then the largest 6-connected component, then one closing.
pub fn brain_mask(volume: &Volume) -> Result<Volume> {
    let t = otsu_threshold(&volume.voxels).ok_or(Error::NoForeground)?;
    let fg: Vec<bool> = volume.voxels.iter().map(|&v| v as f64 > t).collect();
    let mask = close(&largest_component(&fg, volume.dims), volume.dims);
    if !mask.iter().any(|&m| m) {
        return Err(Error::NoForeground);
    }
    volume.with_voxels(Modality::Mask, mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect())
}

/// Trilinear resampling onto a `dims` grid with isotropic `spacing` mm,
/// centred on the input's physical centre. Samples outside the input field
/// of view are 0.
pub fn resample(volume: &Volume, spacing: f64, dims: [usize; 3]) -> Result<Volume> {
    if !(spacing.is_finite() && spacing > 0.0) || dims.contains(&0) {
        return Err(Error::InvalidArgument(format!("bad resample geometry {spacing} mm, {dims:?}")));
    }
    let [d_in, h_in, w_in] = volume.dims;
    // spacing_mm is [sx, sy, sz] for axes [W, H, D]
    let s_in = [volume.spacing_mm[2], volume.spacing_mm[1], volume.spacing_mm[0]];
    let axis = |n_out: usize, n_in: usize, s: f64| -> Vec<Option<(usize, usize, f64)>> {
        let c_out = (n_out as f64 - 1.0) / 2.0;
        let c_in = (n_in as f64 - 1.0) / 2.0;
        (0..n_out)
            .map(|o| {
                let idx = (o as f64 - c_out) * spacing / s + c_in;
                if idx < 0.0 || idx > (n_in - 1) as f64 {
                    return None;
                }
                let i0 = idx.floor() as usize;
                let i1 = (i0 + 1).min(n_in - 1);
                Some((i0, i1, idx - i0 as f64))
            })
            .collect()
    };
    let az = axis(dims[0], d_in, s_in[0]);
    let ay = axis(dims[1], h_in, s_in[1]);
    let ax = axis(dims[2], w_in, s_in[2]);
    let src = &volume.voxels;
    let at = |z: usize, y: usize, x: usize| src[(z * h_in + y) * w_in + x] as f64;
    let mut out = vec![0f32; dims.iter().product()];
    out.par_chunks_mut(dims[1] * dims[2]).zip(az.par_iter()).for_each(|(plane, zw)| {
        let Some((z0, z1, fz)) = *zw else { return };
        for (y, yw) in ay.iter().enumerate() {
            let Some((y0, y1, fy)) = *yw else { continue };
            for (x, xw) in ax.iter().enumerate() {
                let Some((x0, x1, fx)) = *xw else { continue };
                let lerp = |a: f64, b: f64, t: f64| if t == 0.0 { a } else { a + (b - a) * t };
                let c00 = lerp(at(z0, y0, x0), at(z0, y0, x1), fx);
                let c01 = lerp(at(z0, y1, x0), at(z0, y1, x1), fx);
                let c10 = lerp(at(z1, y0, x0), at(z1, y0, x1), fx);
                let c11 = lerp(at(z1, y1, x0), at(z1, y1, x1), fx);
                let v = lerp(lerp(c00, c01, fy), lerp(c10, c11, fy), fz);
                plane[y * dims[2] + x] = v as f32;
            }
        }
    });
    Volume::new(dims, [spacing; 3], volume.modality, out)
}

pub fn resample_isotropic(volume: &Volume, config: &PreprocessConfig) -> Result<Volume> {
    config.validate()?;
    resample(volume, config.target_spacing_mm, config.target_dims)
}

/// Resamples a binary mask: trilinear value `>= 0.5` is inside.
pub fn resample_mask(mask: &Volume, spacing: f64, dims: [usize; 3]) -> Result<Volume> {
    let r = resample(mask, spacing, dims)?;
    let voxels = r.voxels.iter().map(|&v| if v >= 0.5 { 1.0 } else { 0.0 }).collect();
    r.with_voxels(Modality::Mask, voxels)
}

/// Z-score over mask voxels (population std, floored at 1e-6); 0 outside.
pub fn normalize_intensity(volume: &Volume, mask: &Volume) -> Result<Volume> {
    if mask.dims != volume.dims {
        return Err(Error::Shape(format!("mask {:?} does not match volume {:?}", mask.dims, volume.dims)));
    }
    let inside: Vec<f64> =
        volume.voxels.iter().zip(&mask.voxels).filter(|(_, &m)| m > 0.0).map(|(&v, _)| v as f64).collect();
    if inside.is_empty() {
        return Err(Error::NoForeground);
    }
    let n = inside.len() as f64;
    let mean = inside.iter().sum::<f64>() / n;
    let var = inside.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let std = var.sqrt().max(1e-6);
    let voxels = volume
        .voxels
        .iter()
        .zip(&mask.voxels)
        .map(|(&v, &m)| if m > 0.0 { ((v as f64 - mean) / std) as f32 } else { 0.0 })
        .collect();
    volume.with_voxels(volume.modality, voxels)
}

/// `[3, D, H, W]` with the volume replicated into each channel.
pub fn channelize_adc(volume: &Volume) -> Tensor<f32> {
    let [d, h, w] = volume.dims;
    let data = volume.voxels.repeat(3);
    Tensor::from_vec(&[3, d, h, w], data).expect("volume dims are positive")
}

/// `[1, D, H, W]` view of a volume.
pub fn single_channel(volume: &Volume) -> Tensor<f32> {
    let [d, h, w] = volume.dims;
    Tensor::from_vec(&[1, d, h, w], volume.voxels.clone()).expect("volume dims are positive")
}

/// One of 16 axis-aligned transforms: `index = k + 4 * flip_xy + 8 * flip_yz`,
/// where `k` quarter turns are about the z axis (the H,W plane), `flip_xy`
/// reverses D and `flip_yz` reverses W.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AugmentId(u8);

impl AugmentId {
    pub const IDENTITY: AugmentId = AugmentId(0);

    pub fn new(index: u8) -> Result<Self> {
        if index > 15 {
            return Err(Error::InvalidArgument(format!("augment id must be in 0..=15, got {index}")));
        }
        Ok(AugmentId(index))
    }

    pub fn all() -> impl Iterator<Item = AugmentId> {
        (0..16).map(AugmentId)
    }

    pub fn index(self) -> u8 {
        self.0
    }

    pub fn rotation(self) -> u8 {
        self.0 % 4
    }

    pub fn flip_xy(self) -> bool {
        self.0 & 4 != 0
    }

    pub fn flip_yz(self) -> bool {
        self.0 & 8 != 0
    }
}

/// Applies `id` to the three trailing spatial axes of `[.., D, H, W]`:
/// rotation first, then the flips. Pure index permutation.
pub fn augment<T: Scalar>(t: &Tensor<T>, id: AugmentId) -> Result<Tensor<T>> {
    let shape = t.shape();
    if shape.len() < 3 {
        return Err(Error::Shape(format!("augment needs [.., D, H, W], got {shape:?}")));
    }
    let r = shape.len();
    let (d, h, w) = (shape[r - 3], shape[r - 2], shape[r - 1]);
    if id.rotation() != 0 && h != w {
        return Err(Error::InvalidArgument(format!("rotation about z needs H == W, got H={h}, W={w}")));
    }
    let lead: usize = shape[..r - 3].iter().product();
    let vol = d * h * w;
    let src = t.data();
    let mut out = vec![T::zero(); src.len()];
    for l in 0..lead {
        let s = &src[l * vol..(l + 1) * vol];
        let o = &mut out[l * vol..(l + 1) * vol];
        for z in 0..d {
            let zs = if id.flip_xy() { d - 1 - z } else { z };
            for y in 0..h {
                for x in 0..w {
                    let xf = if id.flip_yz() { w - 1 - x } else { x };
                    // output (y, xf) after rotation comes from source (ys, xs)
                    let (ys, xs) = match id.rotation() {
                        0 => (y, xf),
                        1 => (xf, w - 1 - y),
                        2 => (h - 1 - y, w - 1 - xf),
                        _ => (h - 1 - xf, y),
                    };
                    o[(z * h + y) * w + x] = s[(zs * h + ys) * w + xs];
                }
            }
        }
    }
    Tensor::from_vec(shape, out)
}

/// Output of [`preprocess_session`], all on the target grid.
#[derive(Debug, Clone)]
pub struct PreparedSession {
    pub dwi: Volume,
    pub adc: Option<Volume>,
    pub mask: Volume,
}

/// Mask, resample and normalize one session. The brain mask is derived from
/// the DWI (or taken from `provided_mask`) and shared by both modalities:
/// restricted-diffusion lesions are dark on ADC and an intensity mask of the
/// ADC alone would cut them out.
pub fn preprocess_session(
    dwi: &Volume,
    adc: Option<&Volume>,
    provided_mask: Option<&Volume>,
    config: &PreprocessConfig,
) -> Result<PreparedSession> {
    config.validate()?;
    if let Some(a) = adc {
        if a.dims != dwi.dims || a.spacing_mm != dwi.spacing_mm {
            return Err(Error::Shape(format!(
                "ADC geometry {:?}/{:?} differs from DWI {:?}/{:?}",
                a.dims, a.spacing_mm, dwi.dims, dwi.spacing_mm
            )));
        }
    }
    let native_mask = match (config.mask_mode, provided_mask) {
        (MaskMode::Provided, Some(m)) => {
            if m.dims != dwi.dims {
                return Err(Error::Shape(format!("provided mask {:?} does not match scan {:?}", m.dims, dwi.dims)));
            }
            m.clone()
        }
        (MaskMode::Provided, None) => {
            return Err(Error::InvalidArgument("mask_mode is provided but no mask volume was found".into()))
        }
        (MaskMode::Auto, _) => brain_mask(dwi)?,
    };
    let (s, dims) = (config.target_spacing_mm, config.target_dims);
    let mask = resample_mask(&native_mask, s, dims)?;
    let dwi = normalize_intensity(&resample(dwi, s, dims)?, &mask)?;
    let adc = adc.map(|a| normalize_intensity(&resample(a, s, dims)?, &mask)).transpose()?;
    Ok(PreparedSession { dwi, adc, mask })
}

/// `<scan>.mask.mvol` next to a scan path.
pub fn provided_mask_path(scan: &Path) -> PathBuf {
    let name = scan.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let stem = name.strip_suffix(".mvol").unwrap_or(&name);
    scan.with_file_name(format!("{stem}.mask.mvol"))
}

/// Preprocesses every session of `manifest` into `out_dir` as
/// `<subject>/<session>_{dwi,adc}.mvol` and returns (and writes) the
/// manifest of the prepared volumes.
pub fn preprocess_cohort(
    manifest: &CohortManifest,
    config: &PreprocessConfig,
    out_dir: &Path,
) -> Result<CohortManifest> {
    config.validate()?;
    let pairs = manifest.session_pairs();
    let paired = pairs.len() + pairs.iter().filter(|p| p.adc.is_some()).count();
    if paired != manifest.records.len() {
        return Err(Error::InvalidArgument("every ADC scan needs a DWI scan from the same session".into()));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let rows: Vec<Vec<ScanRecord>> = pairs
        .par_iter()
        .map(|pair| -> Result<Vec<ScanRecord>> {
            let dwi_path = manifest.resolve(pair.dwi);
            let dwi = read_mvol(&dwi_path)?;
            let adc = pair.adc.map(|a| read_mvol(manifest.resolve(a))).transpose()?;
            let mask = match config.mask_mode {
                MaskMode::Provided => Some(read_mvol(provided_mask_path(&dwi_path))?),
                MaskMode::Auto => None,
            };
            let prepared = preprocess_session(&dwi, adc.as_ref(), mask.as_ref(), config)?;
            let dir = out_dir.join(&pair.dwi.subject_id);
            std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            let mut out = Vec::new();
            let vols =
                [(pair.dwi, Some(&prepared.dwi), "dwi"), (pair.adc.unwrap_or(pair.dwi), prepared.adc.as_ref(), "adc")];
            for (rec, vol, kind) in vols {
                let Some(vol) = vol else { continue };
                let rel = format!("{}/{}_{kind}.mvol", rec.subject_id, rec.session_id);
                write_mvol(vol, out_dir.join(&rel))?;
                out.push(ScanRecord { path: rel, ..rec.clone() });
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    let prepared = CohortManifest { records: rows.into_iter().flatten().collect(), base_dir: out_dir.to_path_buf() };
    write_manifest(&prepared, out_dir.join("manifest.csv"))?;
    Ok(prepared)
}
