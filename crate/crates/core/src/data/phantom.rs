//! Deterministic synthetic CT phantom generator.
//!
//! Volumes are two elliptical low-intensity lung fields in brighter body
//! tissue plus Gaussian noise. Covid patients gain 2-5 soft-edged peripheral
//! blobs on a random slice subset; CAP patients gain one large lower-zone
//! consolidation over a contiguous slice run; normal patients gain nothing.
//! Clinical features are sampled class-conditionally with a strength knob
//! that interpolates between pooled (uninformative) and well-separated
//! class-specific parameters.

use std::f64::consts::PI;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{save_dataset, ClassLabel, ClinicalFeatures, PatientRecord, Sex};
use crate::error::{Error, Result};
use crate::rng::SeedStream;
use crate::tensor::Tensor;

/// Slices per patient must cover the stage-2 candidate count.
const MIN_SLICES: usize = 10;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomConfig {
    pub patients_per_class: usize,
    pub slices_per_patient: usize,
    /// Square image side in pixels, at least 32.
    pub side: usize,
    pub seed: u64,
    /// Additive lesion amplitude range (before per-slice rescaling).
    pub blob_intensity: (f64, f64),
    /// Covid blob radius range as a fraction of the image side.
    pub blob_radius: (f64, f64),
    /// CAP consolidation radius range as a fraction of the image side.
    pub consolidation_radius: (f64, f64),
    /// 0 = clinical features identically distributed across classes,
    /// 1 = fully separated class-conditional parameters.
    pub clinical_strength: f64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        PhantomConfig {
            patients_per_class: 10,
            slices_per_patient: 24,
            side: 64,
            seed: 0,
            blob_intensity: (0.22, 0.55),
            blob_radius: (0.05, 0.125),
            consolidation_radius: (0.105, 0.20),
            clinical_strength: 0.8,
        }
    }
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patients_per_class == 0 {
            return Err(Error::config("patients_per_class must be >= 1"));
        }
        if self.slices_per_patient < MIN_SLICES {
            return Err(Error::config(format!(
                "slices_per_patient must be >= {} (stage-2 candidate count)",
                MIN_SLICES
            )));
        }
        if self.side < 32 {
            return Err(Error::config(format!(
                "image side must be >= 32, got {}",
                self.side
            )));
        }
        for (name, (lo, hi)) in [
            ("blob_intensity", self.blob_intensity),
            ("blob_radius", self.blob_radius),
            ("consolidation_radius", self.consolidation_radius),
        ] {
            if !(lo.is_finite() && hi.is_finite() && 0.0 < lo && lo <= hi) {
                return Err(Error::config(format!(
                    "{} range ({}, {}) must satisfy 0 < lo <= hi",
                    name, lo, hi
                )));
            }
        }
        if self.blob_intensity.1 > 1.0 {
            return Err(Error::config("blob intensity must stay within 1.0"));
        }
        for (name, (lo, hi)) in [
            ("blob_radius", self.blob_radius),
            ("consolidation_radius", self.consolidation_radius),
        ] {
            if hi > 0.3 {
                return Err(Error::config(format!(
                    "{} upper bound {} exceeds 0.3 of the image side",
                    name, hi
                )));
            }
            if lo * (self.side as f64) < 1.0 {
                return Err(Error::config(format!(
                    "side {} too small for {} lower bound {}",
                    self.side, name, lo
                )));
            }
        }
        if !(0.0..=1.0).contains(&self.clinical_strength) {
            return Err(Error::config(format!(
                "clinical_strength {} outside [0, 1]",
                self.clinical_strength
            )));
        }
        Ok(())
    }
}

/// Generated set: patient records plus the lesion regions that produced
/// them, for localization checks. `blob_masks[p][s]` is a binary
/// `[side, side]` grid marking lesion disks on slice `s` of patient `p`
/// (all-zero for uninfected slices).
#[derive(Debug, Clone)]
pub struct PhantomSet {
    pub records: Vec<PatientRecord>,
    pub blob_masks: Vec<Vec<Tensor>>,
}

struct Ellipse {
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
}

impl Ellipse {
    fn contains(&self, x: f64, y: f64) -> bool {
        let dx = (x - self.cx) / self.a;
        let dy = (y - self.cy) / self.b;
        dx * dx + dy * dy <= 1.0
    }
}

struct Blob {
    cx: f64,
    cy: f64,
    radius: f64,
    amplitude: f64,
}

const LUNG_BASE: f64 = 0.18;
const BODY_BASE: f64 = 0.60;
const NOISE_SD: f64 = 0.02;

/// Class-conditional clinical parameters: male rate, age (mean, sd),
/// weight (mean, sd), then rates for cough, fever, dyspnea, chest pain,
/// fatigue.
struct ClinicalParams {
    male: f64,
    age: (f64, f64),
    weight: (f64, f64),
    rates: [f64; 5],
}

const POOLED: ClinicalParams = ClinicalParams {
    male: 0.55,
    age: (49.0, 16.0),
    weight: (74.0, 14.0),
    rates: [0.40, 0.28, 0.30, 0.08, 0.15],
};

/// Separation directions mirror the cohort table: CAP patients older,
/// lighter, with more fever and cough; covid patients heavier with more
/// fatigue; normal (non-infected referrals) younger, with more dyspnea and
/// chest pain.
fn class_target(label: ClassLabel) -> ClinicalParams {
    match label {
        ClassLabel::Covid => ClinicalParams {
            male: 0.58,
            age: (50.0, 6.0),
            weight: (88.0, 6.0),
            rates: [0.28, 0.10, 0.22, 0.05, 0.55],
        },
        ClassLabel::Cap => ClinicalParams {
            male: 0.58,
            age: (72.0, 6.0),
            weight: (58.0, 6.0),
            rates: [0.90, 0.88, 0.12, 0.01, 0.02],
        },
        ClassLabel::Normal => ClinicalParams {
            male: 0.50,
            age: (31.0, 6.0),
            weight: (74.0, 6.0),
            rates: [0.24, 0.02, 0.62, 0.20, 0.03],
        },
    }
}

fn lerp(a: f64, b: f64, t: f64) -> f64 {
    a + (b - a) * t
}

fn sample_clinical(label: ClassLabel, strength: f64, rng: &mut ChaCha8Rng) -> ClinicalFeatures {
    let target = class_target(label);
    let male = lerp(POOLED.male, target.male, strength);
    let age_mean = lerp(POOLED.age.0, target.age.0, strength);
    let age_sd = lerp(POOLED.age.1, target.age.1, strength);
    let weight_mean = lerp(POOLED.weight.0, target.weight.0, strength);
    let weight_sd = lerp(POOLED.weight.1, target.weight.1, strength);
    let mut rates = [0.0; 5];
    for i in 0..5 {
        rates[i] = lerp(POOLED.rates[i], target.rates[i], strength).clamp(0.01, 0.99);
    }

    let sex = if rng.gen_bool(male.clamp(0.01, 0.99)) {
        Sex::Male
    } else {
        Sex::Female
    };
    let age = Normal::new(age_mean, age_sd)
        .expect("valid sd")
        .sample(rng)
        .clamp(18.0, 95.0);
    let weight = Normal::new(weight_mean, weight_sd)
        .expect("valid sd")
        .sample(rng)
        .clamp(40.0, 160.0);
    let mut flags = [false; 5];
    for i in 0..5 {
        flags[i] = rng.gen_bool(rates[i]);
    }
    ClinicalFeatures {
        sex,
        age,
        weight,
        cough: flags[0],
        fever: flags[1],
        dyspnea: flags[2],
        chest_pain: flags[3],
        fatigue: flags[4],
    }
}

fn lungs(side: f64, rng: &mut ChaCha8Rng) -> (Ellipse, Ellipse) {
    let mut jitter = |scale: f64| rng.gen_range(-scale..=scale);
    let left = Ellipse {
        cx: 0.32 * side + jitter(0.02 * side),
        cy: 0.52 * side + jitter(0.02 * side),
        a: 0.17 * side * (1.0 + jitter(0.06)),
        b: 0.30 * side * (1.0 + jitter(0.06)),
    };
    let right = Ellipse {
        cx: 0.68 * side + jitter(0.02 * side),
        cy: 0.52 * side + jitter(0.02 * side),
        a: 0.17 * side * (1.0 + jitter(0.06)),
        b: 0.30 * side * (1.0 + jitter(0.06)),
    };
    (left, right)
}

/// Place a blob center inside a lung at relative radius `rho` and angle
/// `theta` of the ellipse.
fn blob_center(lung: &Ellipse, rho: f64, theta: f64) -> (f64, f64) {
    (
        lung.cx + lung.a * rho * theta.cos(),
        lung.cy + lung.b * rho * theta.sin(),
    )
}

fn render_patient(
    cfg: &PhantomConfig,
    left: &Ellipse,
    right: &Ellipse,
    blobs_per_slice: &[Vec<Blob>],
    noise_rng: &mut ChaCha8Rng,
) -> (Vec<Tensor>, Vec<Tensor>, Vec<Tensor>) {
    let side = cfg.side;
    let noise = Normal::new(0.0, NOISE_SD).expect("valid sd");
    let mut slices = Vec::with_capacity(blobs_per_slice.len());
    let mut masks = Vec::with_capacity(blobs_per_slice.len());
    let mut blob_masks = Vec::with_capacity(blobs_per_slice.len());
    for blobs in blobs_per_slice {
        let mut pix = vec![0.0f64; side * side];
        let mut mask = vec![0.0f64; side * side];
        let mut blob_mask = vec![0.0f64; side * side];
        for y in 0..side {
            for x in 0..side {
                let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
                let in_lung = left.contains(fx, fy) || right.contains(fx, fy);
                let mut v = if in_lung { LUNG_BASE } else { BODY_BASE };
                if in_lung {
                    for blob in blobs {
                        let d2 = (fx - blob.cx) * (fx - blob.cx) + (fy - blob.cy) * (fy - blob.cy);
                        let r2 = blob.radius * blob.radius;
                        if d2 <= r2 {
                            v += blob.amplitude * (1.0 - d2 / r2);
                            blob_mask[y * side + x] = 1.0;
                        }
                    }
                    mask[y * side + x] = 1.0;
                }
                v += noise.sample(noise_rng);
                // Store at f32 precision so disk round-trips are exact.
                pix[y * side + x] = (v.clamp(0.0, 1.0) as f32) as f64;
            }
        }
        slices.push(Tensor::new(vec![side, side], pix).expect("finite pixels"));
        masks.push(Tensor::new(vec![side, side], mask).expect("binary mask"));
        blob_masks.push(Tensor::new(vec![side, side], blob_mask).expect("binary mask"));
    }
    (slices, masks, blob_masks)
}

/// Volume-involvement severity grade from lesion and lung areas.
fn severity_grade(blob_masks: &[Tensor], lung_masks: &[Tensor]) -> u8 {
    let blob_px: f64 = blob_masks.iter().map(|m| m.data().iter().sum::<f64>()).sum();
    let lung_px: f64 = lung_masks.iter().map(|m| m.data().iter().sum::<f64>()).sum();
    let involvement = if lung_px > 0.0 { blob_px / lung_px } else { 0.0 };
    if involvement < 0.03 {
        1
    } else if involvement < 0.08 {
        2
    } else if involvement < 0.18 {
        3
    } else {
        4
    }
}

/// Generate a phantom dataset. Records are returned sorted by patient id
/// (the loader's order); when `out_dir` is given the set is also written to
/// disk in the standard layout. Fully determined by `config.seed`.
pub fn generate_phantom(cfg: &PhantomConfig, out_dir: Option<&Path>) -> Result<PhantomSet> {
    cfg.validate()?;
    let stream = SeedStream::new(cfg.seed);
    let side = cfg.side as f64;
    let n_slices = cfg.slices_per_patient;

    let mut patients: Vec<(PatientRecord, Vec<Tensor>)> = Vec::new();
    for label in ClassLabel::ALL {
        for p in 0..cfg.patients_per_class {
            let id = format!("{}_{:03}", label.name(), p);
            let scope = stream.scoped(&format!("phantom/{}", id));
            let clinical =
                sample_clinical(label, cfg.clinical_strength, &mut scope.rng("clinical"));
            let (lungs_l, lungs_r) = lungs(side, &mut scope.rng("anatomy"));

            let mut lesion_rng = scope.rng("lesions");
            let mut infected = vec![false; n_slices];
            let mut blobs_per_slice: Vec<Vec<Blob>> = (0..n_slices).map(|_| Vec::new()).collect();
            match label {
                ClassLabel::Covid => {
                    let slice_rate = lesion_rng.gen_range(0.15..=0.65);
                    for flag in infected.iter_mut() {
                        *flag = lesion_rng.gen_bool(slice_rate);
                    }
                    if infected.iter().all(|f| !f) {
                        let forced = lesion_rng.gen_range(0..n_slices);
                        infected[forced] = true;
                    }
                    for (s, flag) in infected.iter().enumerate() {
                        if !*flag {
                            continue;
                        }
                        let count = lesion_rng.gen_range(2..=5usize);
                        for _ in 0..count {
                            let lung = if lesion_rng.gen_bool(0.5) {
                                &lungs_l
                            } else {
                                &lungs_r
                            };
                            let theta = lesion_rng.gen_range(0.0..(2.0 * PI));
                            let rho = lesion_rng.gen_range(0.55..=0.9);
                            let (cx, cy) = blob_center(lung, rho, theta);
                            blobs_per_slice[s].push(Blob {
                                cx,
                                cy,
                                radius: lesion_rng.gen_range(cfg.blob_radius.0..=cfg.blob_radius.1)
                                    * side,
                                amplitude: lesion_rng
                                    .gen_range(cfg.blob_intensity.0..=cfg.blob_intensity.1),
                            });
                        }
                    }
                }
                ClassLabel::Cap => {
                    let run_frac = lesion_rng.gen_range(0.35..=0.6);
                    let run_len = ((n_slices as f64 * run_frac).round() as usize).max(1);
                    let start = lesion_rng.gen_range(0..=(n_slices - run_len));
                    let lung = if lesion_rng.gen_bool(0.5) {
                        &lungs_l
                    } else {
                        &lungs_r
                    };
                    // Lower zone: y grows downward, so the lower half is
                    // theta in (0, pi).
                    let theta = lesion_rng.gen_range(0.25 * PI..=0.75 * PI);
                    let rho = lesion_rng.gen_range(0.35..=0.65);
                    let (cx, cy) = blob_center(lung, rho, theta);
                    let radius = lesion_rng
                        .gen_range(cfg.consolidation_radius.0..=cfg.consolidation_radius.1)
                        * side;
                    let amplitude = lesion_rng
                        .gen_range(cfg.blob_intensity.0..=cfg.blob_intensity.1);
                    for s in start..start + run_len {
                        infected[s] = true;
                        let jx = lesion_rng.gen_range(-1.0..=1.0);
                        let jy = lesion_rng.gen_range(-1.0..=1.0);
                        blobs_per_slice[s].push(Blob {
                            cx: cx + jx,
                            cy: cy + jy,
                            radius,
                            amplitude,
                        });
                    }
                }
                ClassLabel::Normal => {}
            }

            let (slices, masks, blob_masks) = render_patient(
                cfg,
                &lungs_l,
                &lungs_r,
                &blobs_per_slice,
                &mut scope.rng("noise"),
            );
            let severity = match label {
                ClassLabel::Covid => Some(severity_grade(&blob_masks, &masks)),
                _ => None,
            };
            let record = PatientRecord {
                id,
                label,
                severity,
                clinical,
                slices,
                masks,
                slice_infection_labels: Some(infected),
            };
            record.validate()?;
            patients.push((record, blob_masks));
        }
    }

    patients.sort_by(|a, b| a.0.id.cmp(&b.0.id));
    let (records, blob_masks): (Vec<_>, Vec<_>) = patients.into_iter().unzip();
    if let Some(dir) = out_dir {
        save_dataset(dir, &records)?;
    }
    Ok(PhantomSet {
        records,
        blob_masks,
    })
}
