//! Dataset model, on-disk format, preprocessing, and the synthetic phantom
//! generator.
//!
//! On disk a dataset is `<root>/manifest.json` naming patient ids, plus one
//! directory per patient: `meta.json`, and per slice `slice_<n>.raw`
//! (row-major little-endian f32) with `mask_<n>.raw` (bytes in {0,1}).

mod io;
mod phantom;

pub use io::{load_dataset, save_dataset};
pub use phantom::{generate_phantom, PhantomConfig, PhantomSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Diagnosis classes, in report order. `index()` gives the class axis used
/// across metrics and network outputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassLabel {
    Covid,
    Cap,
    Normal,
}

impl ClassLabel {
    pub const ALL: [ClassLabel; 3] = [ClassLabel::Covid, ClassLabel::Cap, ClassLabel::Normal];

    pub fn index(self) -> usize {
        match self {
            ClassLabel::Covid => 0,
            ClassLabel::Cap => 1,
            ClassLabel::Normal => 2,
        }
    }

    pub fn from_index(index: usize) -> Result<Self> {
        ClassLabel::ALL
            .get(index)
            .copied()
            .ok_or_else(|| Error::contract(format!("class index {} out of range", index)))
    }

    pub fn name(self) -> &'static str {
        match self {
            ClassLabel::Covid => "covid",
            ClassLabel::Cap => "cap",
            ClassLabel::Normal => "normal",
        }
    }
}

impl std::str::FromStr for ClassLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "covid" => Ok(ClassLabel::Covid),
            "cap" => Ok(ClassLabel::Cap),
            "normal" => Ok(ClassLabel::Normal),
            other => Err(Error::data(format!("unknown class label '{}'", other))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sex {
    Male,
    Female,
}

/// Demographics and symptom flags recorded per patient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClinicalFeatures {
    pub sex: Sex,
    /// Years, in [0, 130].
    pub age: f64,
    /// Kilograms, in (0, 400].
    pub weight: f64,
    pub cough: bool,
    pub fever: bool,
    pub dyspnea: bool,
    pub chest_pain: bool,
    pub fatigue: bool,
}

impl ClinicalFeatures {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=130.0).contains(&self.age) || !self.age.is_finite() {
            return Err(Error::data(format!("age {} outside [0, 130]", self.age)));
        }
        if !(self.weight > 0.0 && self.weight <= 400.0) {
            return Err(Error::data(format!(
                "weight {} outside (0, 400]",
                self.weight
            )));
        }
        Ok(())
    }
}

/// One patient: ordered slice grids with matching binary masks.
#[derive(Debug, Clone, PartialEq)]
pub struct PatientRecord {
    pub id: String,
    pub label: ClassLabel,
    /// Radiologist-style 1..=4 involvement grade; only covid cases carry one,
    /// and covid cases without imaging findings have none.
    pub severity: Option<u8>,
    pub clinical: ClinicalFeatures,
    /// Square `[side, side]` tensors, one per slice.
    pub slices: Vec<Tensor>,
    /// Binary `[side, side]` lung masks matching `slices`.
    pub masks: Vec<Tensor>,
    /// Per-slice infection flags, when annotated.
    pub slice_infection_labels: Option<Vec<bool>>,
}

impl PatientRecord {
    pub fn validate(&self) -> Result<()> {
        let who = |detail: String| Error::data(format!("patient {}: {}", self.id, detail));
        self.clinical
            .validate()
            .map_err(|e| who(e.to_string()))?;
        if self.slices.len() != self.masks.len() {
            return Err(who(format!(
                "{} slices but {} masks",
                self.slices.len(),
                self.masks.len()
            )));
        }
        for (i, (s, m)) in self.slices.iter().zip(&self.masks).enumerate() {
            if s.shape() != m.shape() {
                return Err(who(format!(
                    "slice {} shape {:?} differs from mask shape {:?}",
                    i,
                    s.shape(),
                    m.shape()
                )));
            }
            if s.rank() != 2 {
                return Err(who(format!("slice {} has rank {}", i, s.rank())));
            }
            if !m.data().iter().all(|v| *v == 0.0 || *v == 1.0) {
                return Err(who(format!("mask {} is not binary", i)));
            }
        }
        if self.severity.is_some() && self.label != ClassLabel::Covid {
            return Err(who("severity present on a non-covid patient".into()));
        }
        if let Some(s) = self.severity {
            if !(1..=4).contains(&s) {
                return Err(who(format!("severity {} outside 1..=4", s)));
            }
        }
        if let Some(flags) = &self.slice_infection_labels {
            if flags.len() != self.slices.len() {
                return Err(who(format!(
                    "{} infection flags for {} slices",
                    flags.len(),
                    self.slices.len()
                )));
            }
        }
        Ok(())
    }
}

/// Mask, downsample, and rescale one slice:
/// out-of-mask pixels are zeroed, the result is area-average resized to
/// `target_side`, and intensities are linearly rescaled to [0,1] using the
/// min/max over in-mask source pixels (constant-in-mask slices map to 0).
///
/// A resized output pixel is "in mask" when at least half of its source
/// block is; only such pixels receive the rescaled value.
pub fn preprocess_slice(slice: &Tensor, mask: &Tensor, target_side: usize) -> Result<Tensor> {
    if slice.rank() != 2 || slice.shape()[0] != slice.shape()[1] {
        return Err(Error::dim(
            "preprocess_slice",
            format!("slice must be square, got {:?}", slice.shape()),
        ));
    }
    if slice.shape() != mask.shape() {
        return Err(Error::dim(
            "preprocess_slice",
            format!("slice {:?} vs mask {:?}", slice.shape(), mask.shape()),
        ));
    }
    if !mask.data().iter().all(|v| *v == 0.0 || *v == 1.0) {
        return Err(Error::data("mask is not binary"));
    }
    let side = slice.shape()[0];
    if target_side == 0 || side % target_side != 0 {
        return Err(Error::config(format!(
            "target side {} must divide source side {}",
            target_side, side
        )));
    }

    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for (v, m) in slice.data().iter().zip(mask.data()) {
        if *m == 1.0 {
            lo = lo.min(*v);
            hi = hi.max(*v);
        }
    }
    let span = hi - lo;

    let block = side / target_side;
    let area = (block * block) as f64;
    let mut out = vec![0.0; target_side * target_side];
    for oy in 0..target_side {
        for ox in 0..target_side {
            let mut value = 0.0;
            let mut coverage = 0.0;
            for by in 0..block {
                for bx in 0..block {
                    let idx = (oy * block + by) * side + ox * block + bx;
                    let m = mask.data()[idx];
                    coverage += m;
                    if m == 1.0 && span > 0.0 {
                        value += (slice.data()[idx] - lo) / span;
                    }
                }
            }
            if coverage >= area / 2.0 {
                out[oy * target_side + ox] = value / area;
            }
        }
    }
    Tensor::new(vec![target_side, target_side], out)
}

/// Clinical feature vector in network order:
/// `[sex(male=1), age_z, weight_z, cough, fever, dyspnea, chest_pain,
/// fatigue]`, with age and weight standardized by the supplied statistics.
pub fn encode_clinical(c: &ClinicalFeatures, scaling: &ClinicalScaling) -> [f64; 8] {
    let b = |flag: bool| if flag { 1.0 } else { 0.0 };
    [
        match c.sex {
            Sex::Male => 1.0,
            Sex::Female => 0.0,
        },
        (c.age - scaling.age_mean) / scaling.age_sd,
        (c.weight - scaling.weight_mean) / scaling.weight_sd,
        b(c.cough),
        b(c.fever),
        b(c.dyspnea),
        b(c.chest_pain),
        b(c.fatigue),
    ]
}

/// Standardization constants for the continuous clinical features, fitted on
/// training patients only.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClinicalScaling {
    pub age_mean: f64,
    pub age_sd: f64,
    pub weight_mean: f64,
    pub weight_sd: f64,
}

impl ClinicalScaling {
    /// Fit from training records; degenerate spreads fall back to 1 so
    /// encoding never divides by zero.
    pub fn fit(records: &[&ClinicalFeatures]) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::data("cannot fit clinical scaling on no patients"));
        }
        let stats = |take: &dyn Fn(&ClinicalFeatures) -> f64| {
            let vals: Vec<f64> = records.iter().map(|c| take(c)).collect();
            let (mean, sd) = crate::stats::mean_sd(&vals);
            (mean, if sd > 1e-12 { sd } else { 1.0 })
        };
        let (age_mean, age_sd) = stats(&|c| c.age);
        let (weight_mean, weight_sd) = stats(&|c| c.weight);
        Ok(ClinicalScaling {
            age_mean,
            age_sd,
            weight_mean,
            weight_sd,
        })
    }
}
