//! Segmentation and consistency losses.
//!
//! Every loss takes a batch of probability maps `[batch, height, width]`
//! and returns its value together with the gradient with respect to the
//! first (student) argument. Targets, including teacher predictions, are
//! constants: no gradient is produced for them.

use ndarray::{Array3, ArrayView3, Zip};
use serde::{Deserialize, Serialize};

use crate::{Error, Real, Result};

/// Smoothing added to numerator and denominator of the Dice loss.
pub const DICE_SMOOTHING: f64 = 1e-5;

/// Probabilities are clamped to `[LOG_CLAMP, 1 - LOG_CLAMP]` inside logarithms.
pub const LOG_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq)]
pub struct LossValue<T> {
    pub value: T,
    /// d(value)/d(pred), same shape as the prediction batch.
    pub grad: Array3<T>,
}

/// Consistency criterion between student and (aligned) teacher predictions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ConsistencyKind {
    /// Pixel-wise binary cross-entropy with the teacher output as soft target.
    #[default]
    Bce,
    /// Mean squared error; kept for comparison runs.
    Mse,
}

fn same_shape<T>(a: &ArrayView3<T>, b: &ArrayView3<T>, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::contract(format!("{what}: shape mismatch {:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn unit_interval<T: Real>(a: &ArrayView3<T>, what: &str) -> Result<()> {
    if a.iter().any(|&v| !(v >= T::zero() && v <= T::one())) {
        return Err(Error::contract(format!("{what} values must lie in [0, 1]")));
    }
    Ok(())
}

/// Soft Dice loss pooled over every pixel of every item in the batch:
///
/// `-(2 Σ p·y + ε) / (Σ p + Σ y + ε)`
pub fn dice_loss<T: Real>(pred: ArrayView3<T>, target: ArrayView3<T>, smoothing: T) -> Result<LossValue<T>> {
    if !(smoothing >= T::zero()) {
        return Err(Error::config("dice smoothing must be non-negative"));
    }
    same_shape(&pred, &target, "dice_loss")?;
    unit_interval(&pred, "prediction")?;
    unit_interval(&target, "target")?;

    let eps = smoothing.f64();
    let (mut inter, mut sum_p, mut sum_y) = (0.0f64, 0.0f64, 0.0f64);
    Zip::from(&pred).and(&target).for_each(|&p, &y| {
        let (p, y) = (p.f64(), y.f64());
        inter += p * y;
        sum_p += p;
        sum_y += y;
    });
    let num = 2.0 * inter + eps;
    let den = sum_p + sum_y + eps;
    if den == 0.0 {
        // Only reachable with zero smoothing and two empty maps.
        return Ok(LossValue { value: -T::one(), grad: Array3::zeros(pred.raw_dim()) });
    }
    let value = -num / den;
    let den2 = den * den;
    let grad = Zip::from(&target).map_collect(|&y| T::of(-(2.0 * y.f64() * den - num) / den2));
    Ok(LossValue { value: T::of(value), grad })
}

/// Pixel-wise binary cross-entropy of the student prediction against the
/// teacher prediction, averaged over all pixels and items.
pub fn consistency_loss<T: Real>(student: ArrayView3<T>, teacher: ArrayView3<T>) -> Result<LossValue<T>> {
    consistency_loss_with(ConsistencyKind::Bce, student, teacher, None)
}

/// Consistency loss of the given kind. With `mask`, pixels are weighted by the
/// mask value (0 excludes a pixel) and the mean is taken over the mask sum.
pub fn consistency_loss_with<T: Real>(
    kind: ConsistencyKind,
    student: ArrayView3<T>,
    teacher: ArrayView3<T>,
    mask: Option<ArrayView3<T>>,
) -> Result<LossValue<T>> {
    same_shape(&student, &teacher, "consistency_loss")?;
    unit_interval(&student, "student prediction")?;
    unit_interval(&teacher, "teacher prediction")?;
    if let Some(m) = &mask {
        same_shape(&student, m, "consistency mask")?;
    }

    let weight_at = |idx: (usize, usize, usize)| mask.as_ref().map_or(1.0, |m| m[idx].f64());
    let total_weight: f64 = match &mask {
        Some(m) => m.iter().map(|v| v.f64()).sum(),
        None => student.len() as f64,
    };
    if total_weight <= 0.0 {
        return Ok(LossValue { value: T::zero(), grad: Array3::zeros(student.raw_dim()) });
    }

    let mut grad = Array3::<T>::zeros(student.raw_dim());
    let mut total = 0.0f64;
    for (idx, g) in grad.indexed_iter_mut() {
        let wt = weight_at(idx);
        if wt == 0.0 {
            continue;
        }
        let (p, y) = (student[idx].f64(), teacher[idx].f64());
        let (term, dterm) = match kind {
            ConsistencyKind::Bce => {
                let pc = p.clamp(LOG_CLAMP, 1.0 - LOG_CLAMP);
                let term = -(y * pc.ln() + (1.0 - y) * (1.0 - pc).ln());
                let inside = p > LOG_CLAMP && p < 1.0 - LOG_CLAMP;
                let d = if inside { -y / pc + (1.0 - y) / (1.0 - pc) } else { 0.0 };
                (term, d)
            }
            ConsistencyKind::Mse => ((p - y) * (p - y), 2.0 * (p - y)),
        };
        total += wt * term;
        *g = T::of(wt * dterm / total_weight);
    }
    Ok(LossValue { value: T::of(total / total_weight), grad })
}

/// `seg + weight · cons`.
pub fn total_loss<T: Real>(seg: T, cons: T, weight: T) -> Result<T> {
    if !(weight >= T::zero()) {
        return Err(Error::config("consistency weight must be non-negative"));
    }
    Ok(seg + weight * cons)
}

/// Binary entropy in nats, the lower bound of the BCE against a soft target.
pub fn binary_entropy(y: f64) -> f64 {
    let f = |v: f64| if v > 0.0 { -v * v.ln() } else { 0.0 };
    f(y) + f(1.0 - y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::Array3;

    fn a(v: &[f64]) -> Array3<f64> {
        Array3::from_shape_vec((1, 1, v.len()), v.to_vec()).unwrap()
    }

    #[test]
    fn dice_perfect_overlap_is_minus_one() {
        let p = a(&[1.0, 1.0, 0.0, 0.0]);
        let l = dice_loss(p.view(), p.view(), 0.0).unwrap();
        assert_eq!(l.value, -1.0);
    }

    #[test]
    fn dice_half_overlap() {
        let l = dice_loss(a(&[0.5, 0.5]).view(), a(&[1.0, 0.0]).view(), 0.0).unwrap();
        assert_abs_diff_eq!(l.value, -0.5, epsilon = 1e-15);
    }

    #[test]
    fn dice_empty_vs_empty_is_perfect_with_smoothing() {
        let z = a(&[0.0; 16]);
        let l = dice_loss(z.view(), z.view(), DICE_SMOOTHING).unwrap();
        assert_eq!(l.value, -1.0);
        let l0 = dice_loss(z.view(), z.view(), 0.0).unwrap();
        assert_eq!(l0.value, -1.0);
        assert!(l0.grad.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn dice_pools_over_batch_items() {
        // Item 0 perfect, item 1 predicts nothing where the target is full.
        let p = Array3::from_shape_vec((2, 1, 2), vec![1.0, 1.0, 0.0, 0.0]).unwrap();
        let y = Array3::from_shape_vec((2, 1, 2), vec![1.0, 1.0, 1.0, 1.0]).unwrap();
        let l = dice_loss(p.view(), y.view(), 0.0).unwrap();
        // pooled: 2*2 / (2 + 4) rather than the per-item mean of (1 + 0) / 2
        assert_abs_diff_eq!(l.value, -4.0 / 6.0, epsilon = 1e-15);
    }

    #[test]
    fn dice_errors() {
        let p = a(&[0.5, 0.5]);
        assert!(matches!(dice_loss(p.view(), a(&[1.0]).view(), 0.0), Err(Error::Contract(_))));
        assert!(matches!(dice_loss(p.view(), p.view(), -1.0), Err(Error::Config(_))));
        assert!(matches!(dice_loss(a(&[1.5, 0.0]).view(), p.view(), 0.0), Err(Error::Contract(_))));
    }

    #[test]
    fn bce_examples() {
        let l = consistency_loss(a(&[1.0]).view(), a(&[1.0]).view()).unwrap();
        assert_abs_diff_eq!(l.value, 0.0, epsilon = 1e-6);
        let l = consistency_loss(a(&[0.5]).view(), a(&[0.5]).view()).unwrap();
        assert_abs_diff_eq!(l.value, std::f64::consts::LN_2, epsilon = 1e-12);
        let l = consistency_loss(a(&[0.9]).view(), a(&[0.1]).view()).unwrap();
        assert_abs_diff_eq!(l.value, 2.082862, epsilon = 1e-6);
    }

    #[test]
    fn bce_is_finite_at_saturation() {
        let l = consistency_loss(a(&[0.0, 1.0]).view(), a(&[1.0, 0.0]).view()).unwrap();
        assert!(l.value.is_finite());
        assert!(l.grad.iter().all(|g| g.is_finite()));
    }

    #[test]
    fn bce_shape_mismatch() {
        assert!(matches!(consistency_loss(a(&[0.5]).view(), a(&[0.5, 0.5]).view()), Err(Error::Contract(_))));
    }

    #[test]
    fn bce_is_minimized_at_target() {
        for y in [0.1, 0.5, 0.9] {
            let at = |p: f64| consistency_loss(a(&[p]).view(), a(&[y]).view()).unwrap().value;
            let best = (1..1000).map(|i| i as f64 / 1000.0).min_by(|&p, &q| at(p).total_cmp(&at(q))).unwrap();
            assert_abs_diff_eq!(best, y, epsilon = 1e-3);
            assert!(at(best) >= binary_entropy(y) - 1e-12);
            assert_abs_diff_eq!(at(y), binary_entropy(y), epsilon = 1e-12);
        }
    }

    #[test]
    fn masked_consistency_ignores_masked_pixels() {
        let p = a(&[0.9, 0.5]);
        let y = a(&[0.1, 0.5]);
        let m = a(&[0.0, 1.0]);
        let l = consistency_loss_with(ConsistencyKind::Bce, p.view(), y.view(), Some(m.view())).unwrap();
        assert_abs_diff_eq!(l.value, std::f64::consts::LN_2, epsilon = 1e-12);
        assert_eq!(l.grad[[0, 0, 0]], 0.0);
    }

    #[test]
    fn mse_variant() {
        let l = consistency_loss_with(ConsistencyKind::Mse, a(&[0.9, 0.5]).view(), a(&[0.1, 0.5]).view(), None).unwrap();
        assert_abs_diff_eq!(l.value, 0.32, epsilon = 1e-12);
        assert_abs_diff_eq!(l.grad[[0, 0, 0]], 0.8, epsilon = 1e-12);
    }

    #[test]
    fn total_loss_examples() {
        assert_eq!(total_loss(-0.5, 0.7, 0.0).unwrap(), -0.5);
        assert_abs_diff_eq!(total_loss(-0.5, 0.7, 2.9).unwrap(), 1.53, epsilon = 1e-12);
        assert_eq!(total_loss(0.0, 0.0, 2.9).unwrap(), 0.0);
        assert!(matches!(total_loss(0.0, 0.0, -1.0), Err(Error::Config(_))));
    }
}
