//! Datasets: NIfTI ingestion, subject splits, the synthetic generator and
//! mixed labeled/unlabeled batching.

mod batch;
mod split;
mod store;
mod synth;
mod volume;

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub use batch::{mixed_batches, steps_per_epoch, Batch, BatchPlan, BatchSpec};
pub use split::{make_split, DatasetSplit, SplitSizes};
pub use store::{load_synth, save_synth, Manifest, GENERATOR_VERSION};
pub use synth::{synth_generate, synth_split, SynthConfig};
pub use volume::{
    center_fit, center_of, extract_slices, load_volume, resample_inplane, standardize, write_volume, Resample, Volume,
};

/// Environment variable that overrides the configured data root.
pub const DATA_ROOT_ENV: &str = "MTSEG_DATA_ROOT";

/// One 2D training or evaluation item. It counts as labeled iff `mask` is present.
#[derive(Debug, Clone, PartialEq)]
pub struct SliceSample {
    pub image: Array2<f32>,
    pub mask: Option<Array2<f32>>,
    pub subject_id: String,
}

impl SliceSample {
    pub fn labeled(&self) -> bool {
        self.mask.is_some()
    }

    /// The same slice with its mask dropped.
    pub fn unlabeled(mut self) -> Self {
        self.mask = None;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(m) = &self.mask {
            if m.dim() != self.image.dim() {
                return Err(Error::contract(format!(
                    "{}: mask shape {:?} differs from image shape {:?}",
                    self.subject_id,
                    m.dim(),
                    self.image.dim()
                )));
            }
            if m.iter().any(|&v| v != 0.0 && v != 1.0) {
                return Err(Error::contract(format!("{}: mask is not binary", self.subject_id)));
            }
        }
        Ok(())
    }
}

/// Slices for every role of a run.
#[derive(Debug, Clone, Default)]
pub struct SplitData {
    pub labeled: Vec<SliceSample>,
    pub unlabeled: Vec<SliceSample>,
    pub validation: Vec<SliceSample>,
    pub test: Vec<SliceSample>,
}

impl SplitData {
    fn pools(&self) -> [(&'static str, &[SliceSample]); 4] {
        [
            ("labeled", &self.labeled),
            ("unlabeled", &self.unlabeled),
            ("validation", &self.validation),
            ("test", &self.test),
        ]
    }

    /// Checks shapes, labels and subject-level disjointness of the four pools.
    pub fn validate(&self) -> Result<()> {
        let mut shape = None;
        let mut seen: Vec<(&str, BTreeSet<&str>)> = Vec::new();
        for (name, pool) in self.pools() {
            let mut ids = BTreeSet::new();
            for s in pool {
                s.validate()?;
                if *shape.get_or_insert(s.image.dim()) != s.image.dim() {
                    return Err(Error::contract(format!("{name}: slices of different shapes")));
                }
                if name != "unlabeled" && !s.labeled() {
                    return Err(Error::contract(format!("{name}: slice of {} has no mask", s.subject_id)));
                }
                ids.insert(s.subject_id.as_str());
            }
            for (other, other_ids) in &seen {
                if let Some(id) = ids.intersection(other_ids).next() {
                    return Err(Error::contract(format!("subject {id} appears in both {other} and {name}")));
                }
            }
            seen.push((name, ids));
        }
        if self.labeled.is_empty() {
            return Err(Error::config("the labeled pool is empty"));
        }
        Ok(())
    }

    pub fn slice_shape(&self) -> Option<(usize, usize)> {
        self.labeled.first().map(|s| s.image.dim())
    }

    pub fn counts(&self) -> [usize; 4] {
        [self.labeled.len(), self.unlabeled.len(), self.validation.len(), self.test.len()]
    }
}

/// Options for building slices from a directory of NIfTI subjects.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NiftiOptions {
    pub root: PathBuf,
    pub spacing_mm: f64,
    pub slice_size: usize,
    pub split: SplitSizes,
}

/// Resolve the data root, letting the environment override the configured path.
pub fn data_root(configured: &Path) -> PathBuf {
    std::env::var_os(DATA_ROOT_ENV).map(PathBuf::from).unwrap_or_else(|| configured.to_path_buf())
}

/// Subject directories under `root` that contain an `image.nii[.gz]`, sorted.
pub fn list_subjects(root: &Path) -> Result<Vec<String>> {
    let entries = std::fs::read_dir(root).map_err(|e| Error::ingestion(root, e))?;
    let mut out = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::ingestion(root, e))?;
        if entry.path().is_dir() && find_file(&entry.path(), "image").is_some() {
            out.push(entry.file_name().to_string_lossy().into_owned());
        }
    }
    out.sort();
    Ok(out)
}

fn find_file(dir: &Path, stem: &str) -> Option<PathBuf> {
    ["nii.gz", "nii"].iter().map(|ext| dir.join(format!("{stem}.{ext}"))).find(|p| p.is_file())
}

/// Load, resample and slice one subject. Unlabeled subjects may lack a mask.
pub fn load_subject(root: &Path, subject: &str, opts: &NiftiOptions, want_mask: bool) -> Result<Vec<SliceSample>> {
    let dir = root.join(subject);
    let image_path = find_file(&dir, "image").ok_or_else(|| Error::ingestion(dir.join("image.nii.gz"), "not found"))?;
    let target = (opts.spacing_mm, opts.spacing_mm);
    let image = resample_inplane(&load_volume(&image_path)?, target, Resample::Bilinear)?;
    if !image.has_expected_spacing() {
        log::warn!("{subject}: voxel spacing {:?} outside the expected MRI range", image.spacing);
    }
    let mask = if want_mask {
        let mask_path = find_file(&dir, "mask").ok_or_else(|| Error::ingestion(dir.join("mask.nii.gz"), "not found"))?;
        Some(resample_inplane(&load_volume(&mask_path)?, target, Resample::Nearest)?)
    } else {
        None
    };
    let size = (opts.slice_size, opts.slice_size);
    Ok(extract_slices(&image, mask.as_ref())?
        .into_iter()
        .map(|s| SliceSample {
            image: center_fit(s.image.view(), size),
            mask: s.mask.map(|m| center_fit(m.view(), size)),
            subject_id: s.subject_id,
        })
        .collect())
}

/// Build all four pools from NIfTI subjects under the (possibly overridden) root.
pub fn load_nifti_split(opts: &NiftiOptions, seed: u64) -> Result<SplitData> {
    let root = data_root(&opts.root);
    let subjects = list_subjects(&root)?;
    let split = make_split(&subjects, &opts.split, seed)?;
    let load = |ids: &[String], mask: bool| -> Result<Vec<SliceSample>> {
        let mut out = Vec::new();
        for id in ids {
            out.extend(load_subject(&root, id, opts, mask)?);
        }
        Ok(out)
    };
    let data = SplitData {
        labeled: load(&split.train_labeled, true)?,
        unlabeled: load(&split.unlabeled, false)?,
        validation: load(&split.validation, true)?,
        test: load(&split.test, true)?,
    };
    data.validate()?;
    Ok(data)
}
