//! Loss-weight decay, learning-rate schedules, and the Adam optimizer.
//!
//! The identity and reconstruction weights decay polynomially over training:
//! `lambda(t) = lambda_max * (1 - t/T_total)^gamma`. The learning rate
//! follows half a cosine per cycle:
//! `eta(t) = eta_min + (eta_max - eta_min) * (1 + cos(t*pi/T_cycle)) / 2`.
//!
//! Schedule math is always f64 regardless of the training precision.

use crate::error::{Error, Result};
use crate::nn::ParamSet;
use crate::tensor::Element;

/// Everything needed to evaluate the loss-weight and learning-rate schedules
/// at a step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScheduleState {
    /// Current step.
    pub t: usize,
    /// Total steps of the run.
    pub t_total: usize,
    /// Decay exponent of the loss weights.
    pub gamma: f64,
    pub lambda_id_max: f64,
    pub lambda_rec_max: f64,
    pub eta_min: f64,
    pub eta_max: f64,
    /// Cosine cycle length in steps.
    pub t_cycle: usize,
}

impl ScheduleState {
    pub fn validate(&self) -> Result<()> {
        if self.gamma <= 0.0 || !self.gamma.is_finite() {
            return Err(Error::InvalidConfig {
                what: format!("decay exponent must be positive, got {}", self.gamma),
            });
        }
        if self.eta_min > self.eta_max || self.eta_min < 0.0 {
            return Err(Error::InvalidConfig {
                what: format!(
                    "need 0 <= eta_min <= eta_max, got {} > {}",
                    self.eta_min, self.eta_max
                ),
            });
        }
        if self.t_cycle == 0 {
            return Err(Error::InvalidConfig {
                what: "cosine cycle length must be >= 1".into(),
            });
        }
        if self.lambda_id_max < 0.0 || self.lambda_rec_max < 0.0 {
            return Err(Error::InvalidConfig {
                what: "loss weight maxima must be nonnegative".into(),
            });
        }
        if self.t > self.t_total {
            return Err(Error::StepOutOfRange {
                t: self.t,
                t_total: self.t_total,
            });
        }
        Ok(())
    }

    pub fn at_step(mut self, t: usize) -> Self {
        self.t = t;
        self
    }
}

fn decay_factor(s: &ScheduleState) -> Result<f64> {
    if s.t > s.t_total {
        return Err(Error::StepOutOfRange {
            t: s.t,
            t_total: s.t_total,
        });
    }
    Ok((1.0 - s.t as f64 / s.t_total as f64).powf(s.gamma))
}

/// Identity-loss weight at the state's step.
pub fn lambda_id_at(s: &ScheduleState) -> Result<f64> {
    Ok(s.lambda_id_max * decay_factor(s)?)
}

/// Reconstruction-loss weight at the state's step.
pub fn lambda_rec_at(s: &ScheduleState) -> Result<f64> {
    Ok(s.lambda_rec_max * decay_factor(s)?)
}

/// Cosine-annealed learning rate at the state's step.
///
/// Cycles are closed on the right: `t = T_cycle` evaluates the cosine at pi
/// (so the rate reaches `eta_min`), and `t = T_cycle + 1` begins the next
/// cycle. With the default single cycle (`T_cycle = T_total`) no wrap ever
/// happens.
pub fn lr_at(s: &ScheduleState) -> f64 {
    let tc = s.t_cycle;
    let t_in_cycle = if s.t == 0 { 0 } else { (s.t - 1) % tc + 1 };
    let phase = t_in_cycle as f64 * std::f64::consts::PI / tc as f64;
    s.eta_min + 0.5 * (s.eta_max - s.eta_min) * (1.0 + phase.cos())
}

/// Step-decay alternative: multiplies the base rate by 0.1 at 50% and again
/// at 75% of the run.
pub fn lr_step_decay(s: &ScheduleState) -> f64 {
    let mut lr = s.eta_max;
    if 2 * s.t >= s.t_total {
        lr *= 0.1;
    }
    if 4 * s.t >= 3 * s.t_total {
        lr *= 0.1;
    }
    lr
}

/// Adam optimizer state for one parameter set.
///
/// Moment buffers are aligned with the set's registration order; the update
/// is the standard bias-corrected rule.
pub struct Adam<E: Element> {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Number of updates applied so far.
    pub t: u64,
    m: Vec<Vec<E>>,
    v: Vec<Vec<E>>,
}

impl<E: Element> Adam<E> {
    pub fn new(params: &ParamSet<E>, beta1: f64, beta2: f64) -> Self {
        let m = params
            .iter()
            .map(|(_, t)| vec![E::zero(); t.numel()])
            .collect();
        let v = params
            .iter()
            .map(|(_, t)| vec![E::zero(); t.numel()])
            .collect();
        Adam {
            beta1,
            beta2,
            epsilon: 1e-8,
            t: 0,
            m,
            v,
        }
    }

    /// Applies one update using the parameters' accumulated gradients.
    /// Missing gradients count as zero. Non-finite gradients abort with the
    /// offending parameter's name.
    pub fn step(&mut self, params: &ParamSet<E>, lr: f64) -> Result<()> {
        self.t += 1;
        let b1 = E::from_f64(self.beta1);
        let b2 = E::from_f64(self.beta2);
        let one = E::one();
        let bc1 = E::from_f64(1.0 - self.beta1.powi(self.t as i32));
        let bc2 = E::from_f64(1.0 - self.beta2.powi(self.t as i32));
        let lre = E::from_f64(lr);
        let eps = E::from_f64(self.epsilon);
        for (idx, (name, p)) in params.iter().enumerate() {
            let grad = p.grad();
            let g = match &grad {
                Some(g) => g.as_slice(),
                None => continue, // zero gradient: moments decay toward zero anyway
            };
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteGradient { param: name.into() });
            }
            let m = &mut self.m[idx];
            let v = &mut self.v[idx];
            let mut data = p.data().clone();
            for i in 0..g.len() {
                m[i] = b1 * m[i] + (one - b1) * g[i];
                v[i] = b2 * v[i] + (one - b2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                data[i] = data[i] - lre * m_hat / (v_hat.sqrt() + eps);
            }
            p.set_data(data)?;
        }
        Ok(())
    }

    /// Moment buffers and step counter, for checkpointing.
    pub fn export(&self) -> (u64, Vec<Vec<E>>, Vec<Vec<E>>) {
        (self.t, self.m.clone(), self.v.clone())
    }

    pub fn import(&mut self, t: u64, m: Vec<Vec<E>>, v: Vec<Vec<E>>) -> Result<()> {
        if m.len() != self.m.len() || v.len() != self.v.len() {
            return Err(Error::Checkpoint {
                what: "optimizer moment count mismatch".into(),
            });
        }
        for (cur, new) in self.m.iter().zip(&m).chain(self.v.iter().zip(&v)) {
            if cur.len() != new.len() {
                return Err(Error::Checkpoint {
                    what: "optimizer moment shape mismatch".into(),
                });
            }
        }
        self.t = t;
        self.m = m;
        self.v = v;
        Ok(())
    }
}
