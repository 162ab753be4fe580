//! Seeded synthetic DWI/ADC cohort.
//!
//! Each subject is an ellipsoidal "brain" with a smooth intensity gradient.
//! CE-positive subjects carry 1 to 3 spherical lesions that are bright on DWI
//! and dark on ADC. Magnitude images get Rician noise. Outcome labels (AHT,
//! FSS) are drawn with a dependence on lesion burden.
//!
//! Subject `i` draws everything from `ChaCha8Rng::seed_from_u64(seed)` on
//! stream `i`, so subjects can be generated in any order or in parallel.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{write_manifest, write_mvol, CohortManifest, Modality, ScanRecord, Volume};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomParams {
    /// `[D, H, W]`.
    pub dims: [usize; 3],
    pub spacing_mm: f64,
    pub lesion_prevalence: f64,
    /// Lesion radius bounds in voxels.
    pub lesion_radius_range: [f64; 2],
    /// DWI lesion level is `dwi_background * (1 + dwi_lesion_contrast)`.
    pub dwi_lesion_contrast: f64,
    /// ADC lesion level is `adc_background * adc_lesion_factor`.
    pub adc_lesion_factor: f64,
    /// Rician noise sigma relative to the background mean.
    pub dwi_noise: f64,
    pub adc_noise: f64,
    pub dwi_background: f64,
    pub adc_background: f64,
    /// Relative amplitude of the linear in-brain intensity gradient.
    pub gradient: f64,
    /// Brain semi-axes as fractions of the half extents `[D, H, W]`.
    pub brain_axes: [f64; 3],
    pub max_sessions: usize,
    /// `P(aht = 1) = sigmoid(aht_intercept + aht_slope * burden)`.
    pub aht_intercept: f64,
    pub aht_slope: f64,
    /// `fss = round(fss_base + fss_slope * burden + N(0, fss_noise))`, floored at 0.
    pub fss_base: f64,
    pub fss_slope: f64,
    pub fss_noise: f64,
}

impl Default for PhantomParams {
    fn default() -> Self {
        PhantomParams {
            dims: [64, 64, 64],
            spacing_mm: 1.5,
            lesion_prevalence: 0.5,
            lesion_radius_range: [4.0, 8.0],
            dwi_lesion_contrast: 0.45,
            adc_lesion_factor: 0.4,
            dwi_noise: 0.15,
            adc_noise: 0.05,
            dwi_background: 100.0,
            adc_background: 800.0,
            gradient: 0.1,
            brain_axes: [0.7, 0.85, 0.8],
            max_sessions: 2,
            aht_intercept: -1.0,
            aht_slope: 1.0,
            fss_base: 4.0,
            fss_slope: 8.0,
            fss_noise: 2.0,
        }
    }
}

impl PhantomParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.dims.iter().any(|&d| d < 4) {
            return bad(format!("phantom dims must be >= 4, got {:?}", self.dims));
        }
        if !(self.spacing_mm > 0.0) {
            return bad(format!("spacing_mm must be positive, got {}", self.spacing_mm));
        }
        if !(0.0..=1.0).contains(&self.lesion_prevalence) {
            return bad(format!("lesion_prevalence must be in [0,1], got {}", self.lesion_prevalence));
        }
        let [r0, r1] = self.lesion_radius_range;
        if !(r0 > 0.0 && r1 >= r0) {
            return bad(format!("bad lesion_radius_range {:?}", self.lesion_radius_range));
        }
        if self.dwi_lesion_contrast <= 0.0 || !(0.0..1.0).contains(&self.adc_lesion_factor) {
            return bad("lesions must be brighter on DWI and darker on ADC".into());
        }
        if self.dwi_noise < 0.0 || self.adc_noise < 0.0 || self.fss_noise < 0.0 {
            return bad("noise levels must be non-negative".into());
        }
        if !(self.dwi_background > 0.0 && self.adc_background > 0.0) {
            return bad("background levels must be positive".into());
        }
        if !(0.0..1.0).contains(&self.gradient) {
            return bad(format!("gradient must be in [0,1), got {}", self.gradient));
        }
        if self.brain_axes.iter().any(|&a| !(a > 0.0 && a <= 1.0)) {
            return bad(format!("brain_axes must be in (0,1], got {:?}", self.brain_axes));
        }
        if !(1..=2).contains(&self.max_sessions) {
            return bad(format!("max_sessions must be 1 or 2, got {}", self.max_sessions));
        }
        let min_axis = self.semi_axes().iter().copied().fold(f64::INFINITY, f64::min);
        if r1 >= min_axis {
            return Err(Error::InvalidArgument(format!(
                "lesion radius {r1} voxels too large for a brain with smallest semi-axis {min_axis:.2} voxels"
            )));
        }
        Ok(())
    }

    /// Brain semi-axes in voxels, `[D, H, W]`.
    pub fn semi_axes(&self) -> [f64; 3] {
        [0, 1, 2].map(|i| self.brain_axes[i] * (self.dims[i] as f64 - 1.0) / 2.0)
    }

    fn centre(&self) -> [f64; 3] {
        [0, 1, 2].map(|i| (self.dims[i] as f64 - 1.0) / 2.0)
    }

    /// Normalized ellipsoid radius of a voxel; `<= 1` is inside the brain.
    fn brain_radius(&self, p: [f64; 3]) -> f64 {
        let (c, a) = (self.centre(), self.semi_axes());
        (0..3).map(|i| ((p[i] - c[i]) / a[i]).powi(2)).sum::<f64>().sqrt()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Lesion {
    /// Voxel coordinates `[z, y, x]`.
    pub centre: [f64; 3],
    pub radius: f64,
}

impl Lesion {
    fn contains(&self, p: [f64; 3]) -> bool {
        (0..3).map(|i| (p[i] - self.centre[i]).powi(2)).sum::<f64>() <= self.radius * self.radius
    }
}

/// Per-subject latent draws and labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectDraw {
    pub ce_label: u8,
    pub aht_label: u8,
    pub fss_score: u32,
    pub sessions: usize,
    pub lesions: Vec<Lesion>,
    /// `sum(r^3) / r_max^3` over lesions; 0 for CE-negative subjects.
    pub burden: f64,
    /// 1 when most lesion voxels lie in the low-x half, for CE-positive subjects.
    pub hemisphere: Option<u8>,
}

#[derive(Debug, Clone)]
pub struct GeneratedSession {
    pub session_id: String,
    pub dwi: Volume,
    pub adc: Volume,
    pub brain_mask: Volume,
    pub lesion_mask: Volume,
}

#[derive(Debug, Clone)]
pub struct GeneratedSubject {
    pub subject_id: String,
    pub draw: SubjectDraw,
    pub sessions: Vec<GeneratedSession>,
}

pub const SESSION_IDS: [&str; 2] = ["base", "follow"];

pub fn subject_id(index: u64) -> String {
    format!("sub-{index:04}")
}

pub fn subject_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn place_lesion(params: &PhantomParams, radius: f64, rng: &mut ChaCha8Rng) -> Result<Lesion> {
    let c = params.centre();
    let a = params.semi_axes();
    for _ in 0..10_000 {
        let centre = [0, 1, 2].map(|i| c[i] + rng.random_range(-a[i]..=a[i]));
        let lesion = Lesion { centre, radius };
        if lesion_inside_brain(params, &lesion) {
            return Ok(lesion);
        }
    }
    Err(Error::InvalidArgument(format!("could not place a lesion of radius {radius} inside the brain")))
}

/// Every voxel of the lesion lies inside the brain ellipsoid.
fn lesion_inside_brain(params: &PhantomParams, lesion: &Lesion) -> bool {
    let lo = |i: usize| (lesion.centre[i] - lesion.radius).floor().max(0.0) as usize;
    let hi = |i: usize| ((lesion.centre[i] + lesion.radius).ceil() as usize).min(params.dims[i] - 1);
    let mut any = false;
    for z in lo(0)..=hi(0) {
        for y in lo(1)..=hi(1) {
            for x in lo(2)..=hi(2) {
                let p = [z as f64, y as f64, x as f64];
                if lesion.contains(p) {
                    any = true;
                    if params.brain_radius(p) > 1.0 {
                        return false;
                    }
                }
            }
        }
    }
    any
}

/// Draws labels and lesion geometry. Consumes the subject stream in a fixed
/// order: CE, session count, lesions, AHT, FSS.
pub fn draw_subject(params: &PhantomParams, rng: &mut ChaCha8Rng) -> Result<SubjectDraw> {
    let ce = rng.random::<f64>() < params.lesion_prevalence;
    let sessions = if params.max_sessions == 2 && rng.random::<bool>() { 2 } else { 1 };
    let mut lesions = Vec::new();
    if ce {
        let count = rng.random_range(1..=3);
        for _ in 0..count {
            let [r0, r1] = params.lesion_radius_range;
            let r = if r1 > r0 { rng.random_range(r0..=r1) } else { r0 };
            lesions.push(place_lesion(params, r, rng)?);
        }
    }
    let r_max = params.lesion_radius_range[1];
    let burden: f64 = lesions.iter().map(|l| (l.radius / r_max).powi(3)).sum();
    let aht = rng.random::<f64>() < sigmoid(params.aht_intercept + params.aht_slope * burden);
    let noise = if params.fss_noise > 0.0 {
        Normal::new(0.0, params.fss_noise).expect("finite sigma").sample(rng)
    } else {
        0.0
    };
    let fss = (params.fss_base + params.fss_slope * burden + noise).round().max(0.0) as u32;
    let hemisphere = ce.then(|| {
        let cx = params.centre()[2];
        let left: f64 = lesions.iter().filter(|l| l.centre[2] < cx).map(|l| l.radius.powi(3)).sum();
        let right: f64 = lesions.iter().filter(|l| l.centre[2] >= cx).map(|l| l.radius.powi(3)).sum();
        u8::from(left > right)
    });
    Ok(SubjectDraw {
        ce_label: u8::from(ce),
        aht_label: u8::from(aht),
        fss_score: fss,
        sessions,
        lesions,
        burden,
        hemisphere,
    })
}

fn rician(signal: f64, sigma: f64, normal: &Normal<f64>, rng: &mut ChaCha8Rng) -> f64 {
    if sigma == 0.0 {
        return signal;
    }
    let (a, b) = (normal.sample(rng), normal.sample(rng));
    ((signal + sigma * a).powi(2) + (sigma * b).powi(2)).sqrt()
}

fn render_session(
    params: &PhantomParams,
    draw: &SubjectDraw,
    session_id: &str,
    rng: &mut ChaCha8Rng,
) -> Result<GeneratedSession> {
    let [d, h, w] = params.dims;
    let n = d * h * w;
    let (c, a) = (params.centre(), params.semi_axes());
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut dwi = Vec::with_capacity(n);
    let mut adc = Vec::with_capacity(n);
    let mut brain = Vec::with_capacity(n);
    let mut lesion = Vec::with_capacity(n);
    let dwi_lesion = params.dwi_background * (1.0 + params.dwi_lesion_contrast);
    let adc_lesion = params.adc_background * params.adc_lesion_factor;
    let (dwi_sigma, adc_sigma) = (params.dwi_noise * params.dwi_background, params.adc_noise * params.adc_background);
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let p = [z as f64, y as f64, x as f64];
                let inside = params.brain_radius(p) <= 1.0;
                let in_lesion = inside && draw.lesions.iter().any(|l| l.contains(p));
                let (sd, sa) = if in_lesion {
                    (dwi_lesion, adc_lesion)
                } else if inside {
                    // smooth gradient mostly along W, weaker along H and D
                    let u = [0.1, 0.3, 0.6].iter().enumerate().map(|(i, wgt)| wgt * (p[i] - c[i]) / a[i]).sum::<f64>();
                    let g = 1.0 + params.gradient * u;
                    (params.dwi_background * g, params.adc_background * g)
                } else {
                    (0.0, 0.0)
                };
                dwi.push(rician(sd, dwi_sigma, &normal, rng) as f32);
                adc.push(rician(sa, adc_sigma, &normal, rng) as f32);
                brain.push(if inside { 1.0 } else { 0.0 });
                lesion.push(if in_lesion { 1.0 } else { 0.0 });
            }
        }
    }
    let s = [params.spacing_mm; 3];
    Ok(GeneratedSession {
        session_id: session_id.to_string(),
        dwi: Volume::new(params.dims, s, Modality::Dwi, dwi)?,
        adc: Volume::new(params.dims, s, Modality::Adc, adc)?,
        brain_mask: Volume::new(params.dims, s, Modality::Mask, brain)?,
        lesion_mask: Volume::new(params.dims, s, Modality::Mask, lesion)?,
    })
}

/// Generates subject `index` of the cohort seeded by `seed`.
pub fn generate_subject(seed: u64, index: u64, params: &PhantomParams) -> Result<GeneratedSubject> {
    params.validate()?;
    let mut rng = subject_rng(seed, index);
    let draw = draw_subject(params, &mut rng)?;
    let sessions = SESSION_IDS[..draw.sessions]
        .iter()
        .map(|sid| render_session(params, &draw, sid, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    Ok(GeneratedSubject { subject_id: subject_id(index), draw, sessions })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortSummary {
    pub seed: u64,
    pub n_subjects: usize,
    pub n_positive: usize,
    pub n_sessions: usize,
    pub n_scans: usize,
    pub n_aht_positive: usize,
    pub params: PhantomParams,
}

fn scan_path(subject: &str, session: &str, kind: &str) -> String {
    format!("{subject}/{session}_{kind}.mvol")
}

/// Writes MVOL files, `manifest.csv`, `pretext_manifest.csv` (CE-positive
/// subjects labelled by lesion hemisphere) and `summary.json` into `out_dir`.
/// With `write_masks`, ground-truth brain masks go next to each scan as
/// `<scan>.mask.mvol` and lesion masks as `<session>_lesion.mvol`.
pub fn generate_cohort(
    n_subjects: usize,
    params: &PhantomParams,
    seed: u64,
    out_dir: &Path,
    write_masks: bool,
) -> Result<(CohortManifest, CohortSummary)> {
    if n_subjects < 5 {
        return Err(Error::InvalidArgument(format!("a cohort needs at least 5 subjects, got {n_subjects}")));
    }
    params.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let draws: Vec<(SubjectDraw, Vec<ScanRecord>)> = (0..n_subjects as u64)
        .into_par_iter()
        .map(|i| -> Result<_> {
            let subj = generate_subject(seed, i, params)?;
            let dir = out_dir.join(&subj.subject_id);
            std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            let mut rows = Vec::new();
            for s in &subj.sessions {
                for (vol, kind, modality) in [(&s.dwi, "dwi", Modality::Dwi), (&s.adc, "adc", Modality::Adc)] {
                    let rel = scan_path(&subj.subject_id, &s.session_id, kind);
                    write_mvol(vol, out_dir.join(&rel))?;
                    if write_masks {
                        write_mvol(&s.brain_mask, out_dir.join(rel.replace(".mvol", ".mask.mvol")))?;
                    }
                    rows.push(ScanRecord {
                        subject_id: subj.subject_id.clone(),
                        session_id: s.session_id.clone(),
                        modality,
                        path: rel,
                        ce_label: Some(subj.draw.ce_label),
                        aht_label: Some(subj.draw.aht_label),
                        fss_score: Some(subj.draw.fss_score),
                    });
                }
                if write_masks {
                    let rel = format!("{}/{}_lesion.mvol", subj.subject_id, s.session_id);
                    write_mvol(&s.lesion_mask, out_dir.join(rel))?;
                }
            }
            Ok((subj.draw, rows))
        })
        .collect::<Result<_>>()?;

    let mut records = Vec::new();
    let mut pretext = Vec::new();
    for (draw, rows) in &draws {
        records.extend(rows.iter().cloned());
        if let Some(hemi) = draw.hemisphere {
            pretext.extend(rows.iter().map(|r| ScanRecord { ce_label: Some(hemi), ..r.clone() }));
        }
    }
    let manifest = CohortManifest { records, base_dir: out_dir.to_path_buf() };
    write_manifest(&manifest, out_dir.join("manifest.csv"))?;
    if !pretext.is_empty() {
        write_manifest(
            &CohortManifest { records: pretext, base_dir: out_dir.to_path_buf() },
            out_dir.join("pretext_manifest.csv"),
        )?;
    }
    let summary = CohortSummary {
        seed,
        n_subjects,
        n_positive: draws.iter().filter(|(d, _)| d.ce_label == 1).count(),
        n_sessions: draws.iter().map(|(d, _)| d.sessions).sum(),
        n_scans: manifest.records.len(),
        n_aht_positive: draws.iter().filter(|(d, _)| d.aht_label == 1).count(),
        params: params.clone(),
    };
    let path = out_dir.join("summary.json");
    let text = serde_json::to_string_pretty(&summary)? + "\n";
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok((manifest, summary))
}
