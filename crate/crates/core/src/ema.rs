//! Teacher weights as an exponential moving average of the student.

use ndarray::Zip;
use serde::{Deserialize, Serialize};

use crate::model::ParamStore;
use crate::{Error, Real, Result};

/// The teacher: EMA-averaged weights, the smoothing factor used by the most
/// recent update and the number of updates applied so far.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherState<T> {
    pub weights: ParamStore<T>,
    pub alpha: f64,
    pub step: u64,
}

/// Teacher at step 0: an exact copy of the student.
pub fn init_teacher<T: Real>(student: &ParamStore<T>) -> TeacherState<T> {
    TeacherState { weights: student.clone(), alpha: 0.0, step: 0 }
}

impl<T: Real> TeacherState<T> {
    /// `θ' ← α θ' + (1 − α) θ` for every learnable parameter, then
    /// `step ← step + 1`. Batch-norm running statistics are copied from the
    /// student rather than averaged.
    ///
    /// Evaluated as `θ' + (1 − α)(θ − θ')`, which leaves `θ'` bit-identical
    /// when `θ' = θ` or `α = 1`; `α = 0` copies the student exactly.
    pub fn update(&mut self, student: &ParamStore<T>, alpha: f64) -> Result<()> {
        self.update_params(student, alpha)?;
        self.weights.copy_buffers_from(student);
        Ok(())
    }

    /// As [`update`](Self::update) but leaves the teacher's batch-norm
    /// running statistics alone, for a teacher that tracks its own.
    pub fn update_params(&mut self, student: &ParamStore<T>, alpha: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::contract(format!("EMA alpha {alpha} outside [0, 1]")));
        }
        self.weights.check_isomorphic(student)?;
        let rate = T::of(1.0 - alpha);
        for (t, s) in self.weights.params.iter_mut().zip(&student.params) {
            if alpha == 0.0 {
                t.value.assign(&s.value);
            } else {
                Zip::from(&mut t.value).and(&s.value).for_each(|t, &s| *t = *t + rate * (s - *t));
            }
        }
        self.alpha = alpha;
        self.step += 1;
        Ok(())
    }
}

/// Free-function form of [`TeacherState::update`].
pub fn ema_update<T: Real>(state: &mut TeacherState<T>, student: &ParamStore<T>, alpha: f64) -> Result<()> {
    state.update(student, alpha)
}

/// Two-level smoothing schedule: `early` before `switch_epoch`, `late` from it on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AlphaSchedule {
    pub early: f64,
    pub late: f64,
    pub switch_epoch: usize,
}

impl Default for AlphaSchedule {
    fn default() -> Self {
        AlphaSchedule { early: 0.99, late: 0.999, switch_epoch: 50 }
    }
}

impl AlphaSchedule {
    pub fn alpha_at(&self, epoch: usize) -> f64 {
        if epoch < self.switch_epoch {
            self.early
        } else {
            self.late
        }
    }

    pub fn validate(&self) -> Result<()> {
        for a in [self.early, self.late] {
            if !(0.0..=1.0).contains(&a) {
                return Err(Error::config(format!("ema alpha {a} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

/// α for the given epoch under the default 0.99 → 0.999 switch at epoch 50.
pub fn alpha_at(epoch: usize) -> f64 {
    AlphaSchedule::default().alpha_at(epoch)
}
