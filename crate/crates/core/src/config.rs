//! Run configuration: TOML files, named presets and `key=value` overrides.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::augment::AugmentConfig;
use crate::data::{self, NiftiOptions, SplitData, SplitSizes, SynthConfig};
use crate::ema::AlphaSchedule;
use crate::losses::{ConsistencyKind, DICE_SMOOTHING};
use crate::model::UNetConfig;
use crate::schedules::{RampShape, ScheduleConfig};
use crate::trainer::{AdamConfig, BnGroups, EvalConfig, ModelChoice, TeacherBn, TeacherForward, TrainConfig, TrainMode};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DataSource {
    /// Generate the synthetic dataset in memory.
    Synthetic,
    /// A synthetic dataset previously written with `mtseg synth`.
    SynthDir,
    /// `<root>/<subject>/image.nii.gz` + `mask.nii.gz`.
    Nifti,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    /// Seed of the dataset itself (generator draws or subject split).
    pub seed: u64,
    pub synth: SynthConfig,
    pub synth_dir: Option<PathBuf>,
    pub nifti: Option<NiftiOptions>,
}

impl DataConfig {
    pub fn load(&self) -> Result<SplitData> {
        match self.source {
            DataSource::Synthetic => data::synth_split(&self.synth, self.seed),
            DataSource::SynthDir => {
                let dir = self.synth_dir.as_ref().ok_or_else(|| Error::config("data.synth_dir is required"))?;
                Ok(data::load_synth(&data::data_root(dir))?.1)
            }
            DataSource::Nifti => {
                let opts = self.nifti.as_ref().ok_or_else(|| Error::config("data.nifti is required"))?;
                data::load_nifti_split(opts, self.seed)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub data: DataConfig,
}

pub const PRESETS: [&str; 5] = ["paper-semi", "paper-supervised", "synth-smoke", "desk-semi", "desk-supervised"];

fn paper_semi() -> RunConfig {
    RunConfig {
        train: TrainConfig {
            mode: TrainMode::SemiSupervised,
            seed: 0,
            batch_size: 8,
            labeled_per_batch: None,
            steps_per_epoch: None,
            l2: 0.0006,
            adam: AdamConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8 },
            schedule: ScheduleConfig {
                consistency_max: 2.9,
                consistency_rampup_epochs: 100,
                lr_max: 0.0006,
                lr_rampup_epochs: 50,
                total_epochs: 350,
                steps_per_epoch: 0,
                ramp: RampShape::Sigmoid,
            },
            ema: AlphaSchedule { early: 0.99, late: 0.999, switch_epoch: 50 },
            augment: AugmentConfig::default(),
            consistency: ConsistencyKind::Bce,
            dice_smoothing: DICE_SMOOTHING,
            teacher_forward: TeacherForward::Train,
            bn_groups: BnGroups::Split,
            teacher_bn: TeacherBn::Copy,
            model: UNetConfig::default(),
            eval: EvalConfig::default(),
        },
        data: DataConfig {
            source: DataSource::Nifti,
            seed: 0,
            synth: SynthConfig::default(),
            synth_dir: None,
            nifti: Some(NiftiOptions {
                root: PathBuf::from("data/gmchallenge"),
                spacing_mm: 0.25,
                slice_size: 200,
                split: SplitSizes::default(),
            }),
        },
    }
}

/// Supervised counterpart: the student is the reported model.
fn supervised(mut c: RunConfig) -> RunConfig {
    c.train.mode = TrainMode::Supervised;
    c.train.schedule.consistency_max = 0.0;
    c.train.eval.selection = ModelChoice::Student;
    c
}

fn desk_semi() -> RunConfig {
    let mut c = paper_semi();
    c.train.model.base_channels = 16;
    c.train.schedule.total_epochs = 60;
    c.train.schedule.lr_rampup_epochs = 5;
    c.train.schedule.consistency_rampup_epochs = 20;
    c.train.ema.switch_epoch = 10;
    c.train.eval.every_epochs = 10;
    c.train.teacher_bn = TeacherBn::Own;
    c.data = DataConfig {
        source: DataSource::Synthetic,
        seed: 0,
        synth: SynthConfig { centers: 6, ..SynthConfig::default() },
        synth_dir: None,
        nifti: None,
    };
    c
}

/// Resolve a named preset.
pub fn preset(name: &str) -> Result<RunConfig> {
    Ok(match name {
        "paper-semi" => paper_semi(),
        "paper-supervised" => {
            let mut c = supervised(paper_semi());
            c.train.l2 = 0.0008;
            c.train.schedule.total_epochs = 1600;
            c
        }
        "desk-semi" => desk_semi(),
        "desk-supervised" => {
            let mut c = supervised(desk_semi());
            // Same number of optimizer steps as the semi-supervised run.
            c.train.steps_per_epoch = Some(desk_semi().data.synth.unlabeled.div_ceil(4));
            c
        }
        "synth-smoke" => {
            let mut c = desk_semi();
            c.train.model.base_channels = 8;
            c.train.schedule.total_epochs = 4;
            c.train.schedule.lr_rampup_epochs = 1;
            c.train.schedule.consistency_rampup_epochs = 2;
            c.train.ema.switch_epoch = 2;
            c.train.eval.every_epochs = 1;
            c.data.synth = SynthConfig { labeled: 4, unlabeled: 16, validation: 8, test: 8, size: 32, ..SynthConfig::default() };
            c
        }
        other => {
            return Err(Error::config(format!("unknown preset '{other}' (known: {})", PRESETS.join(", "))));
        }
    })
}

/// A configuration with every optional key filled in, used to tell missing
/// and unknown keys apart.
fn key_template() -> toml::Value {
    let mut c = paper_semi();
    c.train.labeled_per_batch = Some(4);
    c.train.steps_per_epoch = Some(1);
    c.data.synth_dir = Some(PathBuf::from("x"));
    toml::Value::try_from(&c).expect("config serializes")
}

const OPTIONAL: [&str; 4] = ["train.labeled_per_batch", "train.steps_per_epoch", "data.synth_dir", "data.nifti"];

fn diff_keys(tpl: &toml::Value, got: &toml::Value, path: &str, missing: &mut Vec<String>, unknown: &mut Vec<String>) {
    let (Some(t), Some(g)) = (tpl.as_table(), got.as_table()) else { return };
    let join = |k: &str| if path.is_empty() { k.to_string() } else { format!("{path}.{k}") };
    for (k, tv) in t {
        let p = join(k);
        match g.get(k) {
            Some(gv) => diff_keys(tv, gv, &p, missing, unknown),
            None if OPTIONAL.contains(&p.as_str()) => {}
            None => missing.push(p),
        }
    }
    let known: BTreeSet<&String> = t.keys().collect();
    unknown.extend(g.keys().filter(|k| !known.contains(k)).map(|k| join(k)));
}

/// Parse a configuration document. Every missing and unknown key is reported
/// in one error.
pub fn parse(text: &str) -> Result<RunConfig> {
    let value: toml::Value = text.parse().map_err(|e| Error::config(format!("invalid TOML: {e}")))?;
    from_value(value)
}

fn from_value(value: toml::Value) -> Result<RunConfig> {
    let (mut missing, mut unknown) = (Vec::new(), Vec::new());
    diff_keys(&key_template(), &value, "", &mut missing, &mut unknown);
    if !missing.is_empty() || !unknown.is_empty() {
        let mut parts = Vec::new();
        if !missing.is_empty() {
            parts.push(format!("missing keys: {}", missing.join(", ")));
        }
        if !unknown.is_empty() {
            parts.push(format!("unknown keys: {}", unknown.join(", ")));
        }
        return Err(Error::config(parts.join("; ")));
    }
    let cfg: RunConfig = value.try_into().map_err(|e: toml::de::Error| Error::config(e.message().to_string()))?;
    cfg.train.validate()?;
    Ok(cfg)
}

pub fn load(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
    parse(&text)
}

/// Apply `key=value` overrides (dotted keys, TOML values; bare words are strings).
pub fn apply_overrides(cfg: &RunConfig, overrides: &[String]) -> Result<RunConfig> {
    let mut value = toml::Value::try_from(cfg).expect("config serializes");
    for ov in overrides {
        let (key, raw) = ov.split_once('=').ok_or_else(|| Error::config(format!("override '{ov}' is not key=value")))?;
        let parsed = format!("v = {raw}")
            .parse::<toml::Table>()
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(raw.to_string()));
        let mut node = &mut value;
        let parts: Vec<&str> = key.trim().split('.').collect();
        for (i, part) in parts.iter().enumerate() {
            let table = node.as_table_mut().ok_or_else(|| Error::config(format!("override '{key}': not a table")))?;
            if i + 1 == parts.len() {
                table.insert(part.to_string(), parsed.clone());
                break;
            }
            node = table.entry(part.to_string()).or_insert_with(|| toml::Value::Table(Default::default()));
        }
    }
    from_value(value)
}

pub fn to_toml(cfg: &RunConfig) -> String {
    toml::to_string_pretty(cfg).expect("config serializes")
}

/// Human-readable summary of the hyperparameters that define a regime.
pub fn echo(cfg: &RunConfig) -> String {
    let t = &cfg.train;
    let s = &t.schedule;
    format!(
        "mode={:?} lambda={} epochs={} batch={} lr={} lr_rampup={} ema_alpha={}->{}@{} w_max={} w_rampup={} dropout={} bn_momentum={} adam_betas=({}, {}) rotation=±{}° noise_std={} base_channels={} seed={}",
        t.mode,
        t.l2,
        s.total_epochs,
        t.batch_size,
        s.lr_max,
        s.lr_rampup_epochs,
        t.ema.early,
        t.ema.late,
        t.ema.switch_epoch,
        s.consistency_max,
        s.consistency_rampup_epochs,
        t.model.dropout,
        t.model.bn_momentum,
        t.adam.beta1,
        t.adam.beta2,
        t.augment.rotation_deg,
        t.augment.noise_std(),
        t.model.base_channels,
        t.seed
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_round_trip_through_toml() {
        for name in PRESETS {
            let c = preset(name).unwrap();
            assert_eq!(parse(&to_toml(&c)).unwrap(), c, "{name}");
        }
    }

    #[test]
    fn missing_and_unknown_keys_are_aggregated() {
        let mut text = to_toml(&preset("paper-semi").unwrap());
        text = text.replace("l2 = 0.0006\n", "").replace("batch_size = 8\n", "bogus = 1\n");
        let err = parse(&text).unwrap_err().to_string();
        assert!(err.contains("train.l2") && err.contains("train.batch_size") && err.contains("train.bogus"), "{err}");
    }

    #[test]
    fn overrides() {
        let c = preset("desk-semi").unwrap();
        let o = apply_overrides(&c, &["train.seed=7".into(), "train.consistency=mse".into(), "train.labeled_per_batch=2".into()])
            .unwrap();
        assert_eq!(o.train.seed, 7);
        assert_eq!(o.train.consistency, ConsistencyKind::Mse);
        assert_eq!(o.train.labeled_per_batch, Some(2));
        assert!(apply_overrides(&c, &["train.nope=1".into()]).is_err());
        assert!(apply_overrides(&c, &["train.l2=-1".into()]).is_err());
        assert!(preset("nope").is_err());
    }
}
