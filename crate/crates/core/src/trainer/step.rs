use ndarray::{s, Array3, Array4, Axis};
use rayon::prelude::*;

use crate::augment::{
    align_ground_truth, align_teacher_prediction, sample_params, sample_pixel_params, student_view, teacher_view,
    valid_region, AugmentationParams, PixelParams,
};
use crate::data::Batch;
use crate::ema::{init_teacher, TeacherState};
use crate::error::Divergence;
use crate::losses::{consistency_loss_with, dice_loss, total_loss};
use crate::model::layers::BnStats;
use crate::model::{sigmoid, ForwardPass, Grads, Mode, ParamStore, UNet};
use crate::schedules::{consistency_weight, learning_rate, ScheduleConfig};
use crate::{rng, Error, Result};

use super::{AdamState, BnGroups, TeacherBn, TeacherForward, TrainConfig, TrainMode};

/// Everything that changes during training.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub student: ParamStore<f32>,
    pub teacher: TeacherState<f32>,
    pub adam: AdamState,
    /// Global step counter t.
    pub step: u64,
    pub epoch: usize,
    pub step_in_epoch: usize,
}

impl TrainState {
    /// Fresh student weights from the run seed and a teacher copied from them.
    pub fn init(net: &UNet, seed: u64) -> Self {
        let student = net.init_params::<f32>(rng::derive(seed, &[rng::INIT]));
        TrainState {
            teacher: init_teacher(&student),
            adam: AdamState::new(&student),
            student,
            step: 0,
            epoch: 0,
            step_in_epoch: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    /// Step counter before this step ran.
    pub step: u64,
    pub epoch: usize,
    pub seg_loss: f64,
    /// Zero in supervised mode.
    pub cons_loss: f64,
    pub weight: f64,
    pub lr: f64,
    pub alpha: f64,
}

fn plane(a: &Array4<f32>, n: usize) -> ndarray::ArrayView2<'_, f32> {
    a.slice(s![n, 0, .., ..])
}

/// Item indices of each sub-batch, in batch order within a group.
fn bn_groups(batch: &Batch, mode: BnGroups) -> Vec<Vec<usize>> {
    let all: Vec<usize> = (0..batch.len()).collect();
    match mode {
        BnGroups::Joint => vec![all],
        BnGroups::Split => {
            let (lab, unl): (Vec<usize>, Vec<usize>) = all.into_iter().partition(|&n| batch.labeled[n]);
            [lab, unl].into_iter().filter(|g| !g.is_empty()).collect()
        }
    }
}

/// Forward every group as its own batch; probabilities come back in batch order.
fn grouped_forward(
    net: &UNet,
    params: &ParamStore<f32>,
    x: &Array4<f32>,
    groups: &[Vec<usize>],
    mode: impl Fn(usize) -> Mode,
    track: bool,
) -> Result<(Vec<ForwardPass<f32>>, Array3<f32>)> {
    let (b, _, h, w) = x.dim();
    let mut probs = Array3::<f32>::zeros((b, h, w));
    let mut passes = Vec::with_capacity(groups.len());
    for (k, g) in groups.iter().enumerate() {
        let pass = net.forward(params, &x.select(Axis(0), g), mode(k), track)?;
        for (row, &n) in g.iter().enumerate() {
            probs.index_axis_mut(Axis(0), n).assign(&pass.logits.slice(s![row, 0, .., ..]).mapv(sigmoid));
        }
        passes.push(pass);
    }
    Ok((passes, probs))
}

/// Size-weighted average of the per-group batch statistics.
fn pooled_stats(passes: &[ForwardPass<f32>], groups: &[Vec<usize>], b: usize) -> Vec<BnStats<f32>> {
    if passes.len() == 1 {
        return passes[0].batch_stats.iter().map(|s| BnStats { mean: s.mean.clone(), var: s.var.clone() }).collect();
    }
    (0..passes[0].batch_stats.len())
        .map(|layer| {
            let mut mean = passes[0].batch_stats[layer].mean.mapv(|_| 0.0f32);
            let mut var = mean.clone();
            for (pass, g) in passes.iter().zip(groups) {
                let f = g.len() as f32 / b as f32;
                mean.scaled_add(f, &pass.batch_stats[layer].mean);
                var.scaled_add(f, &pass.batch_stats[layer].var);
            }
            BnStats { mean, var }
        })
        .collect()
}

fn stack(maps: Vec<ndarray::Array2<f32>>) -> Array3<f32> {
    let views: Vec<_> = maps.iter().map(|m| m.view()).collect();
    ndarray::stack(Axis(0), &views).expect("equal shapes")
}

/// One iteration of the mean-teacher loop:
/// augment, student forward, teacher forward (no tracking), align, losses,
/// Adam with L2 on the student, `t ← t + 1`, EMA update of the teacher.
pub fn train_step(
    net: &UNet,
    state: &mut TrainState,
    batch: &Batch,
    cfg: &TrainConfig,
    sched: &ScheduleConfig,
) -> Result<StepReport> {
    let b = batch.len();
    if b == 0 || batch.num_labeled() == 0 {
        return Err(Error::contract("a training batch needs at least one labeled item"));
    }
    let t = state.step;
    let semi = cfg.mode == TrainMode::SemiSupervised;
    let (h, w) = (batch.images.dim().2, batch.images.dim().3);

    // 1. per-item augmentation parameters
    let params: Vec<AugmentationParams> = (0..b)
        .map(|n| sample_params(&mut rng::stream(cfg.seed, &[rng::AUGMENT, t, n as u64, 0]), &cfg.augment))
        .collect();

    // 2. student forward on rotated + noisy inputs
    let groups = bn_groups(batch, cfg.bn_groups);
    let views: Vec<_> = (0..b).into_par_iter().map(|n| student_view(plane(&batch.images, n), &params[n])).collect();
    let xs = stack(views).insert_axis(Axis(1));
    let student_mode = |k: usize| Mode::Train { dropout_seed: rng::derive(cfg.seed, &[rng::DROPOUT_STUDENT, t, k as u64]) };
    let (passes, probs) = grouped_forward(net, &state.student, &xs, &groups, student_mode, true)?;
    let weight = if semi { consistency_weight(t, sched) } else { 0.0 };
    let lr = learning_rate(t, sched);
    let diverged = |seg: f64, cons: f64| {
        Error::Diverged(Box::new(Divergence { step: t, epoch: state.epoch, lr, consistency_weight: weight, seg_loss: seg, cons_loss: cons }))
    };
    if probs.iter().any(|p| !p.is_finite()) {
        return Err(diverged(f64::NAN, f64::NAN));
    }

    // 5. segmentation loss on labeled items against rotated ground truth
    let labeled: Vec<usize> = (0..b).filter(|&n| batch.labeled[n]).collect();
    let pred_l = probs.select(Axis(0), &labeled);
    let gt = stack(labeled.iter().map(|&n| align_ground_truth(plane(&batch.masks, n), &params[n].spatial)).collect());
    let seg = dice_loss(pred_l.view(), gt.view(), cfg.dice_smoothing as f32)?;
    let mut grad_p = Array3::<f32>::zeros(probs.raw_dim());
    for (k, &n) in labeled.iter().enumerate() {
        grad_p.index_axis_mut(Axis(0), n).assign(&seg.grad.index_axis(Axis(0), k));
    }

    let mut cons_value = 0.0f32;
    let mut teacher_stats = None;
    if semi {
        // 3. teacher forward on independently noised, unrotated inputs
        let pixel: Vec<PixelParams> = (0..b)
            .map(|n| sample_pixel_params(&mut rng::stream(cfg.seed, &[rng::AUGMENT, t, n as u64, 1]), &cfg.augment))
            .collect();
        let tviews: Vec<_> = (0..b).into_par_iter().map(|n| teacher_view(plane(&batch.images, n), &pixel[n])).collect();
        let xt = stack(tviews).insert_axis(Axis(1));
        let teacher_mode = |k: usize| match cfg.teacher_forward {
            TeacherForward::Train => Mode::Train { dropout_seed: rng::derive(cfg.seed, &[rng::DROPOUT_TEACHER, t, k as u64]) },
            TeacherForward::Eval => Mode::Eval,
        };
        let (tpasses, tprobs) = grouped_forward(net, &state.teacher.weights, &xt, &groups, teacher_mode, false)?;
        if tprobs.iter().any(|p| !p.is_finite()) {
            return Err(diverged(seg.value as f64, f64::NAN));
        }
        if cfg.teacher_bn == TeacherBn::Own {
            teacher_stats = Some(pooled_stats(&tpasses, &groups, b));
        }

        // 4. rotate the teacher prediction into the student's frame
        let aligned = stack(
            (0..b)
                .into_par_iter()
                .map(|n| align_teacher_prediction(tprobs.index_axis(Axis(0), n), &params[n].spatial))
                .collect(),
        );
        let mask = cfg
            .augment
            .mask_border
            .then(|| stack((0..b).map(|n| valid_region::<f32>(h, w, &params[n].spatial)).collect()));

        // 6. consistency on every item
        let cons = consistency_loss_with(cfg.consistency, probs.view(), aligned.view(), mask.as_ref().map(|m| m.view()))?;
        cons_value = cons.value;
        if weight != 0.0 {
            let wf = weight as f32;
            grad_p.zip_mut_with(&cons.grad, |g, &c| *g += wf * c);
        }
    }

    // 7. total loss
    let total = total_loss(seg.value as f64, cons_value as f64, weight)?;
    if !total.is_finite() || !seg.value.is_finite() || !cons_value.is_finite() {
        return Err(diverged(seg.value as f64, cons_value as f64));
    }

    // chain rule through the sigmoid, then back through each sub-batch
    let mut grads = Grads::zeros_for(&state.student);
    for (pass, g) in passes.iter().zip(&groups) {
        let mut dlogits = Array4::<f32>::zeros(pass.logits.raw_dim());
        ndarray::Zip::from(dlogits.index_axis_mut(Axis(1), 0))
            .and(&grad_p.select(Axis(0), g))
            .and(&probs.select(Axis(0), g))
            .for_each(|d, &gp, &p| *d = gp * p * (1.0 - p));
        for (acc, part) in grads.0.iter_mut().zip(net.backward(&state.student, pass, &dlogits)?.0) {
            *acc += &part;
        }
    }
    net.apply_batch_stats(&mut state.student, &pooled_stats(&passes, &groups, b));

    // 8. Adam with L2 on the student only
    state.adam.step(&mut state.student, &grads, lr, cfg.l2, &cfg.adam);
    // 9. t ← t + 1
    state.step += 1;
    // 10. EMA update of the teacher
    let alpha = cfg.ema.alpha_at(state.epoch);
    match teacher_stats {
        Some(stats) => {
            state.teacher.update_params(&state.student, alpha)?;
            net.apply_batch_stats(&mut state.teacher.weights, &stats);
        }
        None => state.teacher.update(&state.student, alpha)?,
    }

    Ok(StepReport {
        step: t,
        epoch: state.epoch,
        seg_loss: seg.value as f64,
        cons_loss: cons_value as f64,
        weight,
        lr,
        alpha,
    })
}
