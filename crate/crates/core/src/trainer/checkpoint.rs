//! Checkpoints: one safetensors file holding student, teacher and Adam
//! arrays, with run metadata as JSON in the header.

use std::collections::HashMap;
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use safetensors::tensor::{Dtype, SafeTensors, TensorView};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::ema::TeacherState;
use crate::model::{NamedArray, ParamStore, UNet};
use crate::{Error, Result};

use super::{AdamState, TrainConfig, TrainState};

const META_KEY: &str = "mtseg";
const FORMAT_VERSION: u32 = 1;

/// Hex SHA-256 of the canonical JSON form of a configuration.
pub fn config_fingerprint(cfg: &TrainConfig) -> String {
    let json = serde_json::to_vec(cfg).expect("config serializes");
    Sha256::digest(&json).iter().map(|b| format!("{b:02x}")).collect()
}

/// Running sums for the epoch in progress, so a resumed run logs the same
/// epoch means as an uninterrupted one.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct EpochAccumulator {
    pub seg_sum: f64,
    pub cons_sum: f64,
    pub steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub step: u64,
    pub epoch: usize,
    pub step_in_epoch: usize,
    pub adam_t: u64,
    pub teacher_step: u64,
    pub teacher_alpha: f64,
    pub seed: u64,
    pub config_sha256: String,
    pub config: TrainConfig,
    pub accumulator: EpochAccumulator,
    /// Best validation Dice of the selected model so far, with its epoch.
    pub best: Option<(f64, usize)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub state: TrainState,
    pub accumulator: EpochAccumulator,
    pub best: Option<(f64, usize)>,
}

fn ckpt_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Checkpoint(format!("{}: {e}", path.display()))
}

fn to_bytes(a: &ArrayD<f32>) -> Vec<u8> {
    a.iter().flat_map(|v| v.to_le_bytes()).collect()
}

impl Checkpoint {
    fn arrays(&self) -> Vec<(String, &ArrayD<f32>)> {
        fn push<'a>(prefix: &str, s: &'a ParamStore<f32>, out: &mut Vec<(String, &'a ArrayD<f32>)>) {
            out.extend(s.params.iter().map(|p| (format!("{prefix}.param.{}", p.name), &p.value)));
            out.extend(s.buffers.iter().map(|b| (format!("{prefix}.buffer.{}", b.name), &b.value)));
        }
        let mut out = Vec::new();
        push("student", &self.state.student, &mut out);
        push("teacher", &self.state.teacher.weights, &mut out);
        for (p, (m, v)) in self.state.student.params.iter().zip(self.state.adam.m.iter().zip(&self.state.adam.v)) {
            out.push((format!("adam.m.{}", p.name), m));
            out.push((format!("adam.v.{}", p.name), v));
        }
        out
    }

    pub fn meta(&self) -> CheckpointMeta {
        CheckpointMeta {
            format_version: FORMAT_VERSION,
            step: self.state.step,
            epoch: self.state.epoch,
            step_in_epoch: self.state.step_in_epoch,
            adam_t: self.state.adam.t,
            teacher_step: self.state.teacher.step,
            teacher_alpha: self.state.teacher.alpha,
            seed: self.config.seed,
            config_sha256: config_fingerprint(&self.config),
            config: self.config.clone(),
            accumulator: self.accumulator,
            best: self.best,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let arrays = self.arrays();
        let bytes: Vec<(String, Vec<usize>, Vec<u8>)> =
            arrays.iter().map(|(n, a)| (n.clone(), a.shape().to_vec(), to_bytes(a))).collect();
        let views = bytes
            .iter()
            .map(|(n, s, b)| Ok((n.clone(), TensorView::new(Dtype::F32, s.clone(), b).map_err(|e| ckpt_err(path, e))?)))
            .collect::<Result<Vec<_>>>()?;
        let meta = serde_json::to_string(&self.meta()).expect("metadata serializes");
        let info = Some(HashMap::from([(META_KEY.to_string(), meta)]));
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        // Write then rename so an interrupted save never leaves a torn file.
        let tmp = path.with_extension("tmp");
        safetensors::serialize_to_file(views, &info, &tmp).map_err(|e| ckpt_err(path, e))?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let buf = std::fs::read(path).map_err(|e| ckpt_err(path, e))?;
        let (_, header) = SafeTensors::read_metadata(&buf).map_err(|e| ckpt_err(path, e))?;
        let meta_json = header
            .metadata()
            .as_ref()
            .and_then(|m| m.get(META_KEY))
            .ok_or_else(|| ckpt_err(path, "missing run metadata"))?;
        let meta: CheckpointMeta = serde_json::from_str(meta_json).map_err(|e| ckpt_err(path, e))?;
        if meta.format_version != FORMAT_VERSION {
            return Err(ckpt_err(path, format!("unsupported format version {}", meta.format_version)));
        }
        if config_fingerprint(&meta.config) != meta.config_sha256 {
            return Err(ckpt_err(path, "configuration fingerprint mismatch"));
        }
        let tensors = SafeTensors::deserialize(&buf).map_err(|e| ckpt_err(path, e))?;
        let read = |name: &str, like: &ArrayD<f32>| -> Result<ArrayD<f32>> {
            let t = tensors.tensor(name).map_err(|e| ckpt_err(path, format!("{name}: {e}")))?;
            if t.dtype() != Dtype::F32 || t.shape() != like.shape() {
                return Err(ckpt_err(path, format!("{name}: unexpected dtype or shape {:?}", t.shape())));
            }
            let values = t.data().chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            Ok(ArrayD::from_shape_vec(IxDyn(t.shape()), values).expect("shape checked"))
        };
        let template = UNet::new(meta.config.model.clone())?.init_params::<f32>(0);
        let fill = |prefix: &str| -> Result<ParamStore<f32>> {
            let load = |kind: &str, list: &[NamedArray<f32>]| -> Result<Vec<NamedArray<f32>>> {
                list.iter()
                    .map(|p| Ok(NamedArray { name: p.name.clone(), value: read(&format!("{prefix}.{kind}.{}", p.name), &p.value)? }))
                    .collect()
            };
            Ok(ParamStore { params: load("param", &template.params)?, buffers: load("buffer", &template.buffers)? })
        };
        let student = fill("student")?;
        let teacher = fill("teacher")?;
        let moments = |kind: &str| -> Result<Vec<ArrayD<f32>>> {
            template.params.iter().map(|p| read(&format!("adam.{kind}.{}", p.name), &p.value)).collect()
        };
        let adam = AdamState { m: moments("m")?, v: moments("v")?, t: meta.adam_t };
        Ok(Checkpoint {
            state: TrainState {
                student,
                teacher: TeacherState { weights: teacher, alpha: meta.teacher_alpha, step: meta.teacher_step },
                adam,
                step: meta.step,
                epoch: meta.epoch,
                step_in_epoch: meta.step_in_epoch,
            },
            config: meta.config,
            accumulator: meta.accumulator,
            best: meta.best,
        })
    }
}
