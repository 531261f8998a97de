//! Warmup learning-rate schedule and Adam.

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// lr(t) = m^(−1/2) · min(t^(−1/2), t · w^(−3/2)) — linear warmup to step w,
/// then inverse-square-root decay. The peak sits exactly at t = w.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LrSchedule {
    pub m: usize,
    pub warmup: usize,
}

impl LrSchedule {
    pub fn new(m: usize, warmup: usize) -> Result<Self> {
        if m == 0 || warmup == 0 {
            return Err(Error::Config(format!(
                "schedule needs m ≥ 1 and warmup ≥ 1, got m={m}, warmup={warmup}"
            )));
        }
        Ok(LrSchedule { m, warmup })
    }

    /// Steps are 1-based: the first optimizer update is step 1.
    pub fn at(&self, step: usize) -> Result<f64> {
        if step == 0 {
            return Err(Error::Contract("schedule step counter starts at 1".into()));
        }
        let t = step as f64;
        let w = self.warmup as f64;
        Ok((self.m as f64).powf(-0.5) * (t.powf(-0.5)).min(t * w.powf(-1.5)))
    }
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.98;
pub const ADAM_EPS: f64 = 1e-9;

struct Moments<T> {
    m1: Vec<T>,
    m2: Vec<T>,
}

/// Adam with the warmup schedule above. Moment buffers are allocated once and
/// aligned index-for-index with the parameter registry they were built from.
pub struct Adam<T: Element> {
    schedule: LrSchedule,
    step: usize,
    moments: Vec<Moments<T>>,
}

impl<T: Element> Adam<T> {
    pub fn new(params: &[(String, Tensor<T>)], schedule: LrSchedule) -> Self {
        let moments = params
            .iter()
            .map(|(_, t)| Moments {
                m1: vec![T::zero(); t.len()],
                m2: vec![T::zero(); t.len()],
            })
            .collect();
        Adam {
            schedule,
            step: 0,
            moments,
        }
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    /// Applies one update from the gradients currently stored on `params`,
    /// then clears them. Parameters without a gradient this round decay their
    /// moments as if the gradient were zero. Returns the learning rate used.
    pub fn step(&mut self, params: &[(String, Tensor<T>)]) -> Result<f64> {
        if params.len() != self.moments.len() {
            return Err(Error::Contract(format!(
                "optimizer built for {} parameters, given {}",
                self.moments.len(),
                params.len()
            )));
        }
        self.step += 1;
        let lr = self.schedule.at(self.step)?;
        let c1 = 1.0 - ADAM_BETA1.powi(self.step as i32);
        let c2 = 1.0 - ADAM_BETA2.powi(self.step as i32);
        let (b1, b2) = (T::from_f64(ADAM_BETA1), T::from_f64(ADAM_BETA2));
        let (k1, k2) = (T::from_f64(1.0 - ADAM_BETA1), T::from_f64(1.0 - ADAM_BETA2));
        let eps = T::from_f64(ADAM_EPS);
        let (lr_t, inv_c1, inv_c2) = (
            T::from_f64(lr),
            T::from_f64(1.0 / c1),
            T::from_f64(1.0 / c2),
        );
        for ((name, t), mo) in params.iter().zip(&mut self.moments) {
            let grad = t.grad();
            if let Some(g) = &grad {
                if g.iter().any(|x| !x.is_finite()) {
                    return Err(Error::Numerical(format!(
                        "non-finite gradient on {name} at step {}",
                        self.step
                    )));
                }
            }
            let zero = T::zero();
            t.update_data(|v, i| {
                let g = grad.as_ref().map_or(zero, |g| g[i]);
                mo.m1[i] = b1 * mo.m1[i] + k1 * g;
                mo.m2[i] = b2 * mo.m2[i] + k2 * g * g;
                let m1_hat = mo.m1[i] * inv_c1;
                let m2_hat = mo.m2[i] * inv_c2;
                *v = *v - lr_t * m1_hat / (m2_hat.sqrt() + eps);
            });
            t.clear_grad();
        }
        Ok(lr)
    }
}
