use ndarray::{Array4, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::{rng, Error, Result};

use super::{SliceSample, SplitData};

/// How mini-batches are composed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BatchSpec {
    pub batch_size: usize,
    /// Labeled items per batch; the rest are unlabeled. `None` means ⌈B/2⌉.
    pub labeled_per_batch: Option<usize>,
    /// Draw unlabeled items at all. Off in supervised runs.
    pub use_unlabeled: bool,
    /// Fixed number of steps per epoch instead of one pass over the driving pool.
    pub steps_per_epoch: Option<usize>,
}

impl BatchSpec {
    /// (labeled, unlabeled) items per batch.
    pub fn composition(&self, n_unlabeled: usize) -> (usize, usize) {
        if !self.use_unlabeled || n_unlabeled == 0 {
            return (self.batch_size, 0);
        }
        let l = self.labeled_per_batch.unwrap_or(self.batch_size.div_ceil(2));
        (l, self.batch_size.saturating_sub(l))
    }

    fn check(&self, n_labeled: usize, n_unlabeled: usize) -> Result<(usize, usize)> {
        if n_labeled == 0 {
            return Err(Error::config("the labeled pool is empty"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        if self.steps_per_epoch == Some(0) {
            return Err(Error::config("steps_per_epoch must be positive"));
        }
        let (l, u) = self.composition(n_unlabeled);
        if self.use_unlabeled && n_unlabeled > 0 {
            if self.batch_size < 2 {
                return Err(Error::config("batch_size must be at least 2 when unlabeled data is used"));
            }
            if l == 0 || u == 0 {
                return Err(Error::config(format!(
                    "labeled_per_batch must lie in 1..{} so each batch holds both kinds of item",
                    self.batch_size
                )));
            }
        }
        Ok((l, u))
    }
}

/// Steps in one epoch: one pass over the unlabeled pool (or over the labeled
/// pool when no unlabeled items are drawn), unless overridden.
pub fn steps_per_epoch(spec: &BatchSpec, n_labeled: usize, n_unlabeled: usize) -> Result<usize> {
    let (l, u) = spec.check(n_labeled, n_unlabeled)?;
    Ok(spec.steps_per_epoch.unwrap_or(if u > 0 { n_unlabeled.div_ceil(u) } else { n_labeled.div_ceil(l) }))
}

/// Item indices of every batch of one epoch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchPlan {
    pub labeled: Vec<Vec<usize>>,
    pub unlabeled: Vec<Vec<usize>>,
}

/// Endless sequence of shuffled passes over `0..n`; pass `c` uses its own stream.
fn cycled(n: usize, seed: u64, tag: u64, epoch: u64, count: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(count);
    let mut cycle = 0u64;
    while out.len() < count {
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng::stream(seed, &[tag, epoch, cycle]));
        out.extend(perm.into_iter().take(count - out.len()));
        cycle += 1;
    }
    out
}

impl BatchPlan {
    pub fn for_epoch(spec: &BatchSpec, n_labeled: usize, n_unlabeled: usize, seed: u64, epoch: usize) -> Result<Self> {
        let (l, u) = spec.check(n_labeled, n_unlabeled)?;
        let steps = steps_per_epoch(spec, n_labeled, n_unlabeled)?;
        let e = epoch as u64;
        let lab = cycled(n_labeled, seed, rng::SHUFFLE_LABELED, e, steps * l);
        let unl = if u > 0 { cycled(n_unlabeled, seed, rng::SHUFFLE_UNLABELED, e, steps * u) } else { Vec::new() };
        Ok(BatchPlan {
            labeled: lab.chunks(l).map(<[usize]>::to_vec).collect(),
            unlabeled: if u > 0 { unl.chunks(u).map(<[usize]>::to_vec).collect() } else { vec![Vec::new(); steps] },
        })
    }

    pub fn len(&self) -> usize {
        self.labeled.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labeled.is_empty()
    }
}

/// A mini-batch, labeled items first. `masks` holds zeros for unlabeled items.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub images: Array4<f32>,
    pub masks: Array4<f32>,
    pub labeled: Vec<bool>,
}

impl Batch {
    pub fn from_samples<'a>(items: impl IntoIterator<Item = &'a SliceSample>) -> Result<Batch> {
        let items: Vec<&SliceSample> = items.into_iter().collect();
        let first = items.first().ok_or_else(|| Error::contract("empty batch"))?;
        let (h, w) = first.image.dim();
        let mut images = Array4::zeros((items.len(), 1, h, w));
        let mut masks = Array4::zeros((items.len(), 1, h, w));
        for (n, s) in items.iter().enumerate() {
            s.validate()?;
            if s.image.dim() != (h, w) {
                return Err(Error::contract("batch items differ in shape"));
            }
            images.index_axis_mut(Axis(0), n).index_axis_mut(Axis(0), 0).assign(&s.image);
            if let Some(m) = &s.mask {
                masks.index_axis_mut(Axis(0), n).index_axis_mut(Axis(0), 0).assign(m);
            }
        }
        Ok(Batch { images, masks, labeled: items.iter().map(|s| s.labeled()).collect() })
    }

    pub fn len(&self) -> usize {
        self.labeled.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labeled.is_empty()
    }

    pub fn num_labeled(&self) -> usize {
        self.labeled.iter().filter(|&&l| l).count()
    }
}

/// Batches of one epoch, in a fixed order determined by `seed` and `epoch`.
pub fn mixed_batches<'a>(
    data: &'a SplitData,
    spec: &BatchSpec,
    seed: u64,
    epoch: usize,
) -> Result<impl Iterator<Item = Batch> + 'a> {
    let plan = BatchPlan::for_epoch(spec, data.labeled.len(), data.unlabeled.len(), seed, epoch)?;
    Ok(plan.labeled.into_iter().zip(plan.unlabeled).map(move |(l, u)| {
        let items = l.iter().map(|&i| &data.labeled[i]).chain(u.iter().map(|&i| &data.unlabeled[i]));
        Batch::from_samples(items).expect("pool slices validated")
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    fn data(nl: usize, nu: usize) -> SplitData {
        let s = |id: String, lab: bool| SliceSample {
            image: Array2::from_elem((4, 4), 1.0),
            mask: lab.then(|| Array2::from_elem((4, 4), 1.0)),
            subject_id: id,
        };
        SplitData {
            labeled: (0..nl).map(|i| s(format!("l{i}"), true)).collect(),
            unlabeled: (0..nu).map(|i| s(format!("u{i}"), false)).collect(),
            ..Default::default()
        }
    }

    const SEMI: BatchSpec = BatchSpec { batch_size: 8, labeled_per_batch: None, use_unlabeled: true, steps_per_epoch: None };

    #[test]
    fn half_and_half() {
        let d = data(8, 200);
        let batches: Vec<Batch> = mixed_batches(&d, &SEMI, 1, 0).unwrap().collect();
        assert_eq!(batches.len(), 50);
        for b in &batches {
            assert_eq!(b.len(), 8);
            assert_eq!(b.num_labeled(), 4);
            for (n, &lab) in b.labeled.iter().enumerate() {
                assert_eq!(b.masks.index_axis(Axis(0), n).sum() > 0.0, lab);
            }
        }
    }

    #[test]
    fn epoch_covers_unlabeled_pool_and_wraps() {
        let plan = BatchPlan::for_epoch(&SEMI, 3, 10, 2, 0).unwrap();
        assert_eq!(plan.len(), 3);
        let seen: std::collections::HashSet<usize> = plan.unlabeled.iter().flatten().copied().collect();
        assert_eq!(seen.len(), 10);
        assert!(plan.unlabeled.iter().all(|b| b.len() == 4));
        assert!(plan.labeled.iter().all(|b| b.len() == 4 && b.iter().all(|&i| i < 3)));
    }

    #[test]
    fn supervised_mode_is_all_labeled() {
        let spec = BatchSpec { use_unlabeled: false, ..SEMI };
        let d = data(20, 50);
        let batches: Vec<Batch> = mixed_batches(&d, &spec, 1, 0).unwrap().collect();
        assert_eq!(batches.len(), 3);
        assert!(batches.iter().all(|b| b.num_labeled() == 8));
        let over = BatchSpec { steps_per_epoch: Some(7), ..spec };
        assert_eq!(mixed_batches(&d, &over, 1, 0).unwrap().count(), 7);
    }

    #[test]
    fn order_is_seeded() {
        let a = BatchPlan::for_epoch(&SEMI, 8, 40, 3, 1).unwrap();
        assert_eq!(a, BatchPlan::for_epoch(&SEMI, 8, 40, 3, 1).unwrap());
        assert_ne!(a, BatchPlan::for_epoch(&SEMI, 8, 40, 3, 2).unwrap());
        assert_ne!(a, BatchPlan::for_epoch(&SEMI, 8, 40, 4, 1).unwrap());
    }

    #[test]
    fn invalid_specs() {
        assert!(matches!(BatchPlan::for_epoch(&SEMI, 0, 10, 0, 0), Err(Error::Config(_))));
        let one = BatchSpec { batch_size: 1, ..SEMI };
        assert!(BatchPlan::for_epoch(&one, 2, 10, 0, 0).is_err());
        let all = BatchSpec { labeled_per_batch: Some(8), ..SEMI };
        assert!(BatchPlan::for_epoch(&all, 2, 10, 0, 0).is_err());
        let ratio = BatchSpec { labeled_per_batch: Some(2), ..SEMI };
        assert_eq!(ratio.composition(10), (2, 6));
    }
}
