//! Dataset manifest: a small CSV mapping each case id to its four modality
//! files and its label file, plus helpers to save and load whole samples
//! as NIfTI volumes.
//!
//! Format: a `case_id,t1,t1gd,t2,flair,label` header line, then one row
//! per case. No quoting; paths must not contain commas. Relative paths
//! resolve against the manifest's directory.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::nifti::{read_nifti, write_nifti, NiftiData};
use crate::phantom::{SampleVolume, MODALITIES};
use crate::tensor::Tensor;

const HEADER: &str = "case_id,t1,t1gd,t2,flair,label";

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub case_id: String,
    pub modalities: [PathBuf; 4],
    pub label: PathBuf,
}

/// Parses a manifest, resolving relative paths against its directory.
pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = fs::read_to_string(path)?;
    let base = path.parent().unwrap_or_else(|| Path::new(""));
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    match lines.next() {
        Some(h) if h.trim() == HEADER => {}
        other => {
            return Err(Error::Manifest(format!(
                "expected header {HEADER:?}, got {other:?}"
            )))
        }
    }
    let resolve = |field: &str| {
        let p = Path::new(field.trim());
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            base.join(p)
        }
    };
    let mut entries = Vec::new();
    for (ln, line) in lines.enumerate() {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 6 {
            return Err(Error::Manifest(format!(
                "row {}: expected 6 fields, got {}",
                ln + 2,
                fields.len()
            )));
        }
        entries.push(ManifestEntry {
            case_id: fields[0].trim().to_string(),
            modalities: [
                resolve(fields[1]),
                resolve(fields[2]),
                resolve(fields[3]),
                resolve(fields[4]),
            ],
            label: resolve(fields[5]),
        });
    }
    if entries.is_empty() {
        return Err(Error::Manifest("manifest lists no cases".into()));
    }
    Ok(entries)
}

/// Writes entries with their paths exactly as stored.
pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut out = String::from(HEADER);
    out.push('\n');
    for e in entries {
        let field = |p: &Path| -> Result<String> {
            let s = p.to_string_lossy().into_owned();
            if s.contains(',') {
                return Err(Error::Manifest(format!("path {s:?} contains a comma")));
            }
            Ok(s)
        };
        write!(
            out,
            "{},{},{},{},{},{}",
            e.case_id,
            field(&e.modalities[0])?,
            field(&e.modalities[1])?,
            field(&e.modalities[2])?,
            field(&e.modalities[3])?,
            field(&e.label)?
        )
        .expect("writing to String");
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

/// Saves a sample as five NIfTI files named after the case id (float32
/// modalities, uint8 labels) and returns an entry with bare file names.
pub fn save_sample(dir: &Path, sample: &SampleVolume, spacing: [f64; 3]) -> Result<ManifestEntry> {
    let voxels = sample.voxels();
    let data = sample.image.data();
    let mut modalities: [PathBuf; 4] = Default::default();
    for (m, name) in MODALITIES.iter().enumerate() {
        let file = format!("{}_{name}.nii", sample.case_id);
        write_nifti(
            &dir.join(&file),
            &NiftiData::F32(data[m * voxels..(m + 1) * voxels].to_vec()),
            sample.extents,
            spacing,
        )?;
        modalities[m] = PathBuf::from(file);
    }
    let label_file = format!("{}_label.nii", sample.case_id);
    write_nifti(
        &dir.join(&label_file),
        &NiftiData::U8(sample.labels.clone()),
        sample.extents,
        spacing,
    )?;
    Ok(ManifestEntry {
        case_id: sample.case_id.clone(),
        modalities,
        label: PathBuf::from(label_file),
    })
}

/// Loads one case from disk, checking that all five volumes agree on
/// extents; returns the sample plus its voxel spacing.
pub fn load_sample(entry: &ManifestEntry) -> Result<(SampleVolume, [f64; 3])> {
    let mut image = Vec::new();
    let mut extents = None;
    let mut spacing = [1.0; 3];
    for path in &entry.modalities {
        let (header, data) = read_nifti(path)?;
        let this = header.extents()?;
        match extents {
            None => {
                extents = Some(this);
                spacing = header.spacing();
            }
            Some(e) if e == this => {}
            Some(e) => {
                return Err(Error::Manifest(format!(
                    "case {}: extents {this:?} differ from {e:?}",
                    entry.case_id
                )))
            }
        }
        image.extend(data.scaled(header.scl_slope, header.scl_inter));
    }
    let extents = extents.expect("four modalities read");

    let (label_header, label_data) = read_nifti(&entry.label)?;
    if label_header.extents()? != extents {
        return Err(Error::Manifest(format!(
            "case {}: label extents differ from image",
            entry.case_id
        )));
    }
    let labels = match label_data {
        NiftiData::U8(v) => v,
        other => {
            return Err(Error::Manifest(format!(
                "case {}: labels must be uint8, got datatype {}",
                entry.case_id,
                other.datatype()
            )))
        }
    };

    let sample = SampleVolume::new(
        Tensor::from_vec(
            &[MODALITIES.len(), extents[0], extents[1], extents[2]],
            image,
        )?,
        labels,
        extents,
        entry.case_id.clone(),
    )?;
    Ok((sample, spacing))
}
