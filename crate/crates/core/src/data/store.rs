//! Synthetic datasets on disk: one `.npy` file per image and mask plus a
//! `manifest.json`.

use std::fs;
use std::path::Path;

use ndarray::Array2;
use ndarray_npy::{read_npy, write_npy};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

use super::{SliceSample, SplitData, SynthConfig};

pub const GENERATOR_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub generator_version: u32,
    pub seed: u64,
    pub config: SynthConfig,
    pub counts: PoolCounts,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolCounts {
    pub labeled: usize,
    pub unlabeled: usize,
    pub validation: usize,
    pub test: usize,
}

const POOLS: [&str; 4] = ["labeled", "unlabeled", "validation", "test"];

fn pools(d: &SplitData) -> [&[SliceSample]; 4] {
    [&d.labeled, &d.unlabeled, &d.validation, &d.test]
}

/// Write `data` under `dir`, creating it if needed.
pub fn save_synth(dir: &Path, data: &SplitData, cfg: &SynthConfig, seed: u64) -> Result<Manifest> {
    let io = |e: &dyn std::fmt::Display| Error::ingestion(dir, e.to_string());
    for (name, pool) in POOLS.iter().zip(pools(data)) {
        let sub = dir.join(name);
        fs::create_dir_all(&sub).map_err(|e| io(&e))?;
        for (i, s) in pool.iter().enumerate() {
            write_npy(sub.join(format!("{i:05}_image.npy")), &s.image).map_err(|e| io(&e))?;
            if let Some(m) = &s.mask {
                write_npy(sub.join(format!("{i:05}_mask.npy")), m).map_err(|e| io(&e))?;
            }
        }
    }
    let [labeled, unlabeled, validation, test] = data.counts();
    let manifest = Manifest {
        generator_version: GENERATOR_VERSION,
        seed,
        config: cfg.clone(),
        counts: PoolCounts { labeled, unlabeled, validation, test },
    };
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(dir.join("manifest.json"), json).map_err(|e| io(&e))?;
    Ok(manifest)
}

/// Read a dataset written by [`save_synth`].
pub fn load_synth(dir: &Path) -> Result<(Manifest, SplitData)> {
    let mpath = dir.join("manifest.json");
    let text = fs::read_to_string(&mpath).map_err(|e| Error::ingestion(&mpath, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::ingestion(&mpath, e))?;
    let c = manifest.counts;
    let mut out = SplitData::default();
    let targets = [&mut out.labeled, &mut out.unlabeled, &mut out.validation, &mut out.test];
    for ((name, count), target) in POOLS.iter().zip([c.labeled, c.unlabeled, c.validation, c.test]).zip(targets) {
        for i in 0..count {
            let ipath = dir.join(name).join(format!("{i:05}_image.npy"));
            let image: Array2<f32> = read_npy(&ipath).map_err(|e| Error::ingestion(&ipath, e))?;
            let mpath = dir.join(name).join(format!("{i:05}_mask.npy"));
            let mask = if mpath.exists() {
                Some(read_npy::<_, Array2<f32>>(&mpath).map_err(|e| Error::ingestion(&mpath, e))?)
            } else {
                None
            };
            target.push(SliceSample { image, mask, subject_id: format!("synth-{name}-{i:04}") });
        }
    }
    out.validate()?;
    Ok((manifest, out))
}
