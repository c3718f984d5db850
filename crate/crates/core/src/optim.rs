//! SGD with momentum, weight decay, and the two learning-rate decay laws
//! the experiments use.

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Decay law for the learning rate over a fixed step budget.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScheduleKind {
    Linear,
    Poly2,
}

/// Learning-rate schedule running from `lr_initial` at step 0 to
/// `lr_final` at step `total_steps`, clamped beyond.
#[derive(Clone, Copy, Debug)]
pub struct Schedule {
    pub kind: ScheduleKind,
    pub lr_initial: f64,
    pub lr_final: f64,
    pub total_steps: usize,
}

impl Schedule {
    pub fn new(kind: ScheduleKind, lr_initial: f64, lr_final: f64, total_steps: usize) -> Result<Self> {
        if total_steps == 0 {
            return Err(Error::invalid("schedule needs at least one step"));
        }
        if !lr_initial.is_finite() || !lr_final.is_finite() {
            return Err(Error::invalid("schedule endpoints must be finite"));
        }
        if lr_final < 0.0 || lr_initial < lr_final {
            return Err(Error::invalid(format!(
                "schedule must decay: lr_initial {lr_initial} < lr_final {lr_final}"
            )));
        }
        Ok(Schedule {
            kind,
            lr_initial,
            lr_final,
            total_steps,
        })
    }

    /// Learning rate at step `t`. Endpoints are returned verbatim so they
    /// are exact; steps past the budget clamp to the final rate.
    pub fn lr_at(&self, t: usize) -> f64 {
        if t == 0 {
            return self.lr_initial;
        }
        if t >= self.total_steps {
            return self.lr_final;
        }
        let frac = 1.0 - t as f64 / self.total_steps as f64;
        let scale = match self.kind {
            ScheduleKind::Linear => frac,
            ScheduleKind::Poly2 => frac * frac,
        };
        self.lr_final + (self.lr_initial - self.lr_final) * scale
    }
}

/// Whether an update was applied or refused because of a bad gradient.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StepStatus {
    Applied,
    /// Some gradient entry was non-finite; parameters and velocity are
    /// untouched so the caller can halt and report.
    Diverged,
}

/// Momentum buffers plus the fixed hyperparameters of the update rule.
pub struct OptState<E: Element> {
    velocity: Vec<Tensor<E>>,
    momentum: f64,
    weight_decay: f64,
    decay_eligible: Vec<bool>,
}

impl<E: Element> OptState<E> {
    /// Zero velocity for each parameter; weight decay applies to all of
    /// them. Use [`OptState::with_decay_mask`] to exempt affine
    /// parameters.
    pub fn new(params: &[Tensor<E>], momentum: f64, weight_decay: f64) -> Result<Self> {
        Self::with_decay_mask(params, momentum, weight_decay, vec![true; params.len()])
    }

    pub fn with_decay_mask(
        params: &[Tensor<E>],
        momentum: f64,
        weight_decay: f64,
        decay_eligible: Vec<bool>,
    ) -> Result<Self> {
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::invalid(format!(
                "momentum {momentum} outside [0, 1)"
            )));
        }
        if !weight_decay.is_finite() || weight_decay < 0.0 {
            return Err(Error::invalid(format!(
                "weight decay {weight_decay} must be finite and non-negative"
            )));
        }
        if decay_eligible.len() != params.len() {
            return Err(Error::shape(format!(
                "decay mask covers {} of {} parameters",
                decay_eligible.len(),
                params.len()
            )));
        }
        Ok(OptState {
            velocity: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            momentum,
            weight_decay,
            decay_eligible,
        })
    }

    pub fn momentum(&self) -> f64 {
        self.momentum
    }

    pub fn weight_decay(&self) -> f64 {
        self.weight_decay
    }
}

/// One SGD update: `g' = g + λ·p`, `v ← μ·v + g'`, `p ← p − lr·v`.
/// Every gradient is screened first; any non-finite entry aborts the
/// whole step before any parameter changes.
pub fn sgd_momentum_step<E: Element>(
    params: &mut [Tensor<E>],
    grads: &[Tensor<E>],
    state: &mut OptState<E>,
    lr: f64,
) -> Result<StepStatus> {
    if params.len() != grads.len() || params.len() != state.velocity.len() {
        return Err(Error::shape(format!(
            "step over {} parameters, {} gradients, {} velocity buffers",
            params.len(),
            grads.len(),
            state.velocity.len()
        )));
    }
    for (p, g) in params.iter().zip(grads) {
        if p.shape() != g.shape() {
            return Err(Error::shape(format!(
                "gradient shape {} does not match parameter {}",
                g.shape(),
                p.shape()
            )));
        }
    }
    if grads.iter().any(|g| !g.all_finite()) {
        return Ok(StepStatus::Diverged);
    }

    let mu = E::from_f64(state.momentum);
    let step = E::from_f64(lr);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let lambda = if state.decay_eligible[i] {
            E::from_f64(state.weight_decay)
        } else {
            E::zero()
        };
        let v = state.velocity[i].data_mut();
        let pv = p.data_mut();
        for j in 0..pv.len() {
            let decayed = g.data()[j] + lambda * pv[j];
            v[j] = mu * v[j] + decayed;
            pv[j] = pv[j] - step * v[j];
        }
    }
    Ok(StepStatus::Applied)
}
