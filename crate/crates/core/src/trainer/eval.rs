use ndarray::{Array3, Axis};
use serde::{Deserialize, Serialize};

use crate::data::SliceSample;
use crate::metrics::{compute_metrics, confusion, ConfusionCounts, MetricsReport};
use crate::model::{sigmoid, Mode, ParamStore, UNet};
use crate::{Error, Result};

use super::Checkpoint;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelChoice {
    Student,
    Teacher,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Pooling {
    /// One confusion matrix over every test pixel.
    #[default]
    Pooled,
    /// Metrics per slice, then averaged.
    PerSlice,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Which {
    /// Weights with the best validation Dice of the selected model.
    Best,
    Final,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub threshold: f64,
    pub pooling: Pooling,
    /// Model whose validation Dice selects the best checkpoint and whose test
    /// metrics are reported.
    pub selection: ModelChoice,
    /// Validate every this many epochs (and always after the last one).
    pub every_epochs: usize,
    pub report: Which,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            threshold: 0.5,
            pooling: Pooling::Pooled,
            selection: ModelChoice::Teacher,
            every_epochs: 1,
            report: Which::Best,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::config("eval.threshold must lie in (0, 1)"));
        }
        if self.every_epochs == 0 {
            return Err(Error::config("eval.every_epochs must be positive"));
        }
        Ok(())
    }
}

const CHUNK: usize = 16;

/// Eval-mode foreground probabilities, one map per slice.
pub fn predict(net: &UNet, params: &ParamStore<f32>, slices: &[SliceSample]) -> Result<Array3<f32>> {
    let first = slices.first().ok_or_else(|| Error::config("cannot predict on an empty dataset"))?;
    let (h, w) = first.image.dim();
    let mut out = Array3::zeros((slices.len(), h, w));
    for (c, chunk) in slices.chunks(CHUNK).enumerate() {
        let views: Vec<_> = chunk.iter().map(|s| s.image.view()).collect();
        let x = ndarray::stack(Axis(0), &views)
            .map_err(|_| Error::contract("slices differ in shape"))?
            .insert_axis(Axis(1));
        let pass = net.forward(params, &x, Mode::Eval, false)?;
        let p = pass.logits.index_axis(Axis(1), 0).mapv(sigmoid);
        out.slice_mut(ndarray::s![c * CHUNK..c * CHUNK + chunk.len(), .., ..]).assign(&p);
    }
    Ok(out)
}

/// Binarize eval-mode predictions at `p > threshold` and score them against
/// the masks.
pub fn evaluate(
    net: &UNet,
    params: &ParamStore<f32>,
    slices: &[SliceSample],
    threshold: f64,
    pooling: Pooling,
) -> Result<MetricsReport> {
    if slices.is_empty() {
        return Err(Error::config("cannot evaluate on an empty dataset"));
    }
    let probs = predict(net, params, slices)?;
    score(&probs, slices, threshold, pooling)
}

pub(crate) fn score(probs: &Array3<f32>, slices: &[SliceSample], threshold: f64, pooling: Pooling) -> Result<MetricsReport> {
    let th = threshold as f32;
    let mut per_slice = Vec::with_capacity(slices.len());
    let mut pooled = ConfusionCounts::default();
    for (n, s) in slices.iter().enumerate() {
        let mask = s
            .mask
            .as_ref()
            .ok_or_else(|| Error::contract(format!("evaluation slice of {} has no mask", s.subject_id)))?;
        let pred = probs.index_axis(Axis(0), n).mapv(|p| if p > th { 1.0f32 } else { 0.0 });
        let c = confusion(pred.iter(), mask.iter())?;
        pooled += c;
        per_slice.push(c);
    }
    match pooling {
        Pooling::Pooled => compute_metrics(&pooled),
        Pooling::PerSlice => {
            let mut sum = [0.0; 6];
            for c in &per_slice {
                for (acc, v) in sum.iter_mut().zip(compute_metrics(c)?.values()) {
                    *acc += v;
                }
            }
            Ok(MetricsReport::from_values(sum.map(|v| v / per_slice.len() as f64)))
        }
    }
}

/// Test metrics of both models of a checkpoint.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Reports {
    pub student: MetricsReport,
    pub teacher: MetricsReport,
}

impl Reports {
    pub fn get(&self, which: ModelChoice) -> &MetricsReport {
        match which {
            ModelChoice::Student => &self.student,
            ModelChoice::Teacher => &self.teacher,
        }
    }
}

pub fn evaluate_checkpoint(ckpt: &Checkpoint, slices: &[SliceSample]) -> Result<Reports> {
    let cfg = &ckpt.config;
    let net = UNet::new(cfg.model.clone())?;
    let (th, pool) = (cfg.eval.threshold, cfg.eval.pooling);
    Ok(Reports {
        student: evaluate(&net, &ckpt.state.student, slices, th, pool)?,
        teacher: evaluate(&net, &ckpt.state.teacher.weights, slices, th, pool)?,
    })
}
