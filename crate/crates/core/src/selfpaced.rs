//! Self-paced weighting: the linear regularizer, its closed-form weight
//! rule, the per-class FIFO loss queue and the percentile age scheduler.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Schedule of the used-sample rate `p`, plus queue and warmup settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AgeSchedule {
    pub p_init: f64,
    pub p_step: f64,
    pub step_every_epochs: u64,
    pub p_max: f64,
    /// `None` derives the capacity from the data, see [`default_queue_capacity`].
    pub queue_capacity: Option<usize>,
    pub warmup_epochs: u64,
}

impl Default for AgeSchedule {
    fn default() -> Self {
        AgeSchedule {
            p_init: 0.3,
            p_step: 0.05,
            step_every_epochs: 5,
            p_max: 0.6,
            queue_capacity: None,
            warmup_epochs: 1,
        }
    }
}

impl AgeSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.p_init > 0.0 && self.p_init <= self.p_max && self.p_max <= 1.0) {
            return Err(Error::config(format!(
                "need 0 < p_init <= p_max <= 1, got p_init={} p_max={}",
                self.p_init, self.p_max
            )));
        }
        if !(self.p_step >= 0.0 && self.p_step.is_finite()) {
            return Err(Error::config("p_step must be nonnegative"));
        }
        if self.step_every_epochs == 0 {
            return Err(Error::config("step_every_epochs must be positive"));
        }
        if self.queue_capacity == Some(0) {
            return Err(Error::config("queue_capacity must be positive"));
        }
        Ok(())
    }

    /// A schedule that holds `p` fixed.
    pub fn constant(p: f64) -> Self {
        AgeSchedule {
            p_init: p,
            p_step: 0.0,
            p_max: p,
            ..AgeSchedule::default()
        }
    }
}

/// `min(p_max, p_init + p_step * floor(epoch / step_every_epochs))`.
pub fn advance_schedule(schedule: &AgeSchedule, epoch: u64) -> f64 {
    let steps = (epoch / schedule.step_every_epochs) as f64;
    (schedule.p_init + schedule.p_step * steps).min(schedule.p_max)
}

/// Four times the mean per-class positive count, clamped to `[256, 65536]`.
pub fn default_queue_capacity(positive_counts: &[usize]) -> usize {
    if positive_counts.is_empty() {
        return 256;
    }
    let total: usize = positive_counts.iter().sum();
    let mean = total.div_ceil(positive_counts.len());
    (4 * mean).clamp(256, 65536)
}

/// Linear self-paced regularizer `(lambda / 2) (v^2 - 2v)`.
pub fn regularizer_value(v: f64, lambda: f64) -> f64 {
    0.5 * lambda * (v * v - 2.0 * v)
}

/// Minimizer over `v in [0, 1]` of `v * loss + regularizer_value(v, lambda)`:
/// `1 - loss / lambda` when `loss < lambda`, else 0.
pub fn compute_sample_weight(loss: f64, lambda: f64) -> Result<f64> {
    if lambda.is_nan() || lambda <= 0.0 {
        return Err(Error::argument(format!("age must be positive, got {lambda}")));
    }
    Ok(if loss < lambda { 1.0 - loss / lambda } else { 0.0 })
}

#[derive(Debug, Clone, PartialEq, Default)]
struct ClassAge {
    lambda: Option<f64>,
    queue: VecDeque<f64>,
}

/// Per-class age and loss queues.
#[derive(Debug, Clone, PartialEq)]
pub struct AgeState {
    classes: Vec<ClassAge>,
    capacity: usize,
    p_current: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LambdaSummary {
    pub min: f64,
    pub median: f64,
    pub max: f64,
}

impl AgeState {
    pub fn new(n_classes: usize, capacity: usize, p: f64) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::argument("queue capacity must be positive"));
        }
        Ok(AgeState {
            classes: vec![ClassAge::default(); n_classes],
            capacity,
            p_current: p,
        })
    }

    pub fn n_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn p(&self) -> f64 {
        self.p_current
    }

    pub fn set_p(&mut self, p: f64) {
        self.p_current = p;
    }

    pub fn lambda(&self, c: usize) -> Option<f64> {
        self.classes[c].lambda
    }

    pub fn lambdas(&self) -> Vec<Option<f64>> {
        self.classes.iter().map(|a| a.lambda).collect()
    }

    pub fn queue(&self, c: usize) -> impl Iterator<Item = f64> + '_ {
        self.classes[c].queue.iter().copied()
    }

    pub fn queue_len(&self, c: usize) -> usize {
        self.classes[c].queue.len()
    }

    /// Appends losses of positive-labeled samples of class `c`, evicting the
    /// oldest entries beyond capacity.
    pub fn push_losses(&mut self, c: usize, losses: &[f64]) {
        let cap = self.capacity;
        let q = &mut self.classes[c].queue;
        for &l in losses {
            if q.len() == cap {
                q.pop_front();
            }
            q.push_back(l);
        }
    }

    /// Sets `lambda_c` to the nearest-rank `100p`-th percentile of the queue:
    /// the element of 1-based rank `ceil(p * len)` in ascending order.
    pub fn compute_age(&mut self, c: usize) -> Result<f64> {
        let q = &self.classes[c].queue;
        if q.is_empty() {
            return Err(Error::State(format!(
                "loss queue of class {c} is empty; run warmup before computing the age"
            )));
        }
        let mut buf: Vec<f64> = q.iter().copied().collect();
        let k = nearest_rank(self.p_current, buf.len()) - 1;
        let (_, &mut lambda, _) = buf.select_nth_unstable_by(k, f64::total_cmp);
        self.classes[c].lambda = Some(lambda);
        Ok(lambda)
    }

    /// Min / median / max over the classes whose age is defined.
    pub fn lambda_summary(&self) -> Option<LambdaSummary> {
        let mut ls: Vec<f64> = self.classes.iter().filter_map(|a| a.lambda).collect();
        if ls.is_empty() {
            return None;
        }
        ls.sort_by(f64::total_cmp);
        let mid = ls.len() / 2;
        let median = if ls.len() % 2 == 1 {
            ls[mid]
        } else {
            0.5 * (ls[mid - 1] + ls[mid])
        };
        Some(LambdaSummary {
            min: ls[0],
            median,
            max: ls[ls.len() - 1],
        })
    }
}

/// 1-based nearest rank `ceil(p * len)` in `[1, len]`. A small tolerance
/// absorbs representation error in `p` (0.3 + 0.05 is not exactly 0.35).
pub(crate) fn nearest_rank(p: f64, len: usize) -> usize {
    let k = (p * len as f64 - 1e-9).ceil();
    (k.max(1.0) as usize).min(len)
}

/// `batch x C` weights, every entry in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightMatrix(Matrix);

impl WeightMatrix {
    pub fn new(m: Matrix) -> Result<Self> {
        if let Some(v) = m.as_slice().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::argument(format!("weight {v} outside [0, 1]")));
        }
        Ok(WeightMatrix(m))
    }

    pub fn ones(rows: usize, cols: usize) -> Self {
        WeightMatrix(Matrix::filled(rows, cols, 1.0))
    }

    pub fn as_matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn into_matrix(self) -> Matrix {
        self.0
    }

    pub fn get(&self, n: usize, c: usize) -> f64 {
        self.0.get(n, c)
    }
}

/// Weights for one minibatch from per-class ages: closed-form self-paced weights on
/// positive-labeled entries, 1 on negative-labeled entries unless
/// `weight_negatives` is set.
pub fn batch_weights(
    losses: &Matrix,
    targets: &Matrix,
    state: &AgeState,
    weight_negatives: bool,
) -> Result<WeightMatrix> {
    if (losses.rows(), losses.cols()) != (targets.rows(), targets.cols()) || losses.cols() != state.n_classes() {
        return Err(Error::argument("loss/label/age shapes disagree"));
    }
    let mut out = Matrix::zeros(losses.rows(), losses.cols());
    for c in 0..losses.cols() {
        let lambda = state
            .lambda(c)
            .ok_or_else(|| Error::State(format!("age of class {c} is undefined")))?;
        for n in 0..losses.rows() {
            let w = if targets.get(n, c) == 1.0 || weight_negatives {
                compute_sample_weight(losses.get(n, c), lambda)?
            } else {
                1.0
            };
            out.set(n, c, w);
        }
    }
    Ok(WeightMatrix(out))
}
