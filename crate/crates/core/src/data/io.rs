use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{ClassLabel, ClinicalFeatures, PatientRecord};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    patients: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MetaFile {
    label: ClassLabel,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    severity: Option<u8>,
    clinical: ClinicalFeatures,
    side: usize,
    slice_count: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    infected: Option<Vec<bool>>,
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| Error::format(path, e.to_string()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let bytes = serde_json::to_vec(value).map_err(|e| Error::format(path, e.to_string()))?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn slice_path(dir: &Path, n: usize) -> PathBuf {
    dir.join(format!("slice_{}.raw", n))
}

fn mask_path(dir: &Path, n: usize) -> PathBuf {
    dir.join(format!("mask_{}.raw", n))
}

fn read_f32_grid(path: &Path, side: usize) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let expect = side * side * 4;
    if bytes.len() != expect {
        return Err(Error::format(
            path,
            format!(
                "expected {} bytes for a {}x{} f32 grid, got {}",
                expect,
                side,
                side,
                bytes.len()
            ),
        ));
    }
    let data: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Tensor::new(vec![side, side], data)
        .map_err(|e| Error::format(path, e.to_string()))
}

fn read_mask_grid(path: &Path, side: usize) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() != side * side {
        return Err(Error::format(
            path,
            format!("expected {} mask bytes, got {}", side * side, bytes.len()),
        ));
    }
    if let Some(b) = bytes.iter().find(|b| **b > 1) {
        return Err(Error::format(path, format!("mask byte {} is not 0/1", b)));
    }
    Tensor::new(vec![side, side], bytes.iter().map(|b| *b as f64).collect())
        .map_err(|e| Error::format(path, e.to_string()))
}

/// Load a dataset from `root`. Patients come back sorted by id; any record
/// violating an invariant fails the whole load.
pub fn load_dataset(root: &Path) -> Result<Vec<PatientRecord>> {
    let manifest: Manifest = read_json(&root.join("manifest.json"))?;
    let mut ids = manifest.patients;
    ids.sort();
    if ids.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::format(
            root.join("manifest.json"),
            "duplicate patient id in manifest".to_string(),
        ));
    }

    let mut records = Vec::with_capacity(ids.len());
    for id in ids {
        let dir = root.join(&id);
        let meta: MetaFile = read_json(&dir.join("meta.json"))?;

        // Count the raw files up front so a mismatched pair is reported as
        // such rather than as a missing file.
        let mut n_slices = 0usize;
        let mut n_masks = 0usize;
        let entries = fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))?;
        for entry in entries {
            let entry = entry.map_err(|e| Error::io(&dir, e))?;
            let name = entry.file_name();
            let name = name.to_string_lossy();
            if name.starts_with("slice_") && name.ends_with(".raw") {
                n_slices += 1;
            } else if name.starts_with("mask_") && name.ends_with(".raw") {
                n_masks += 1;
            }
        }
        if n_slices != n_masks {
            return Err(Error::data(format!(
                "patient {}: {} slice files but {} mask files",
                id, n_slices, n_masks
            )));
        }
        if n_slices != meta.slice_count {
            return Err(Error::data(format!(
                "patient {}: meta declares {} slices but {} slice files exist",
                id, meta.slice_count, n_slices
            )));
        }

        let mut slices = Vec::with_capacity(meta.slice_count);
        let mut masks = Vec::with_capacity(meta.slice_count);
        for n in 0..meta.slice_count {
            slices.push(read_f32_grid(&slice_path(&dir, n), meta.side)?);
            masks.push(read_mask_grid(&mask_path(&dir, n), meta.side)?);
        }

        let record = PatientRecord {
            id,
            label: meta.label,
            severity: meta.severity,
            clinical: meta.clinical,
            slices,
            masks,
            slice_infection_labels: meta.infected,
        };
        record.validate()?;
        records.push(record);
    }
    Ok(records)
}

/// Write a dataset under `root` in the layout `load_dataset` reads.
/// Slice values are stored as f32; callers that need exact round-trips must
/// hold values already representable in f32 (the phantom generator does).
pub fn save_dataset(root: &Path, records: &[PatientRecord]) -> Result<()> {
    let mut ids: Vec<String> = records.iter().map(|r| r.id.clone()).collect();
    ids.sort();
    if ids.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::data("duplicate patient id in dataset"));
    }
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    write_json(&root.join("manifest.json"), &Manifest { patients: ids })?;

    for record in records {
        record.validate()?;
        let side = if record.slices.is_empty() {
            0
        } else {
            record.slices[0].shape()[0]
        };
        if record.slices.iter().any(|s| s.shape() != [side, side]) {
            return Err(Error::data(format!(
                "patient {}: slices must share one square extent to serialize",
                record.id
            )));
        }
        let dir = root.join(&record.id);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let meta = MetaFile {
            label: record.label,
            severity: record.severity,
            clinical: record.clinical.clone(),
            side,
            slice_count: record.slices.len(),
            infected: record.slice_infection_labels.clone(),
        };
        write_json(&dir.join("meta.json"), &meta)?;
        for (n, (slice, mask)) in record.slices.iter().zip(&record.masks).enumerate() {
            let mut bytes = Vec::with_capacity(slice.len() * 4);
            for v in slice.data() {
                bytes.extend_from_slice(&(*v as f32).to_le_bytes());
            }
            let p = slice_path(&dir, n);
            fs::write(&p, bytes).map_err(|e| Error::io(&p, e))?;
            let mask_bytes: Vec<u8> = mask.data().iter().map(|v| *v as u8).collect();
            let p = mask_path(&dir, n);
            fs::write(&p, mask_bytes).map_err(|e| Error::io(&p, e))?;
        }
    }
    Ok(())
}
