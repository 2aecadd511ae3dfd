//! Learning-rate schedule and the Adam optimizer with decoupled weight decay.

use crate::backbone::{Model, ParamView};
use ams_core::real::Real;

/// Schedule parameters: linear warmup from `base/100` to `base`, then cosine
/// decay from `base` to `final` at the last epoch.
#[derive(Debug, Clone, Copy)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub final_lr: f64,
    pub warmup_epochs: usize,
    pub epochs: usize,
}

/// Learning rate at an epoch (0-based; `epoch == epochs` is the final point).
pub fn lr_at(epoch: usize, s: &LrSchedule) -> f64 {
    if s.warmup_epochs > 0 && epoch < s.warmup_epochs {
        let start = s.base_lr / 100.0;
        start + (s.base_lr - start) * epoch as f64 / s.warmup_epochs as f64
    } else {
        let span = (s.epochs - s.warmup_epochs).max(1) as f64;
        let t = (epoch - s.warmup_epochs) as f64 / span;
        s.final_lr
            + (s.base_lr - s.final_lr) * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
    }
}

/// Adam with decoupled weight decay. Moments are kept per parameter in the
/// model's visit order; parameters flagged `decay: false` (gains, shifts,
/// biases) skip the decay term.
pub struct Adam<T: Real> {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
    step: usize,
    slots: Vec<AdamSlot<T>>,
}

struct AdamSlot<T: Real> {
    name: String,
    m: Vec<T>,
    v: Vec<T>,
}

impl<T: Real> Adam<T> {
    pub fn new(weight_decay: f64) -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay,
            step: 0,
            slots: Vec::new(),
        }
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    /// The per-slice moment update shared by the model path and tests:
    /// `m/v` update, bias correction, decoupled decay, parameter step.
    #[allow(clippy::too_many_arguments)]
    pub fn update_slice(
        &self,
        t: usize,
        m: &mut [T],
        v: &mut [T],
        value: &mut [T],
        grad: &[T],
        lr: f64,
        decay: bool,
    ) {
        let tf = t as f64;
        let b1 = T::from_f64(self.beta1);
        let b2 = T::from_f64(self.beta2);
        let one_minus_b1 = T::from_f64(1.0 - self.beta1);
        let one_minus_b2 = T::from_f64(1.0 - self.beta2);
        let inv_bias1 = T::from_f64(1.0 / (1.0 - self.beta1.powf(tf)));
        let inv_bias2 = T::from_f64(1.0 / (1.0 - self.beta2.powf(tf)));
        let eps = T::from_f64(self.epsilon);
        let lr_t = T::from_f64(lr);
        let wd = T::from_f64(self.weight_decay);
        for i in 0..value.len() {
            let g = grad[i];
            m[i] = b1 * m[i] + one_minus_b1 * g;
            v[i] = b2 * v[i] + one_minus_b2 * g * g;
            let m_hat = m[i] * inv_bias1;
            let v_hat = v[i] * inv_bias2;
            let mut update = m_hat / (v_hat.sqrt() + eps);
            if decay {
                update += wd * value[i];
            }
            value[i] -= lr_t * update;
        }
    }

    /// One update over all model parameters at learning rate `lr`.
    pub fn step(&mut self, model: &mut Model<T>, lr: f64) {
        self.step += 1;
        let t = self.step;
        let first_step = self.slots.is_empty();
        let mut slots = std::mem::take(&mut self.slots);
        let mut index = 0usize;
        model.visit_params(&mut |p: ParamView<'_, T>| {
            if first_step {
                slots.push(AdamSlot {
                    name: p.name.clone(),
                    m: vec![T::zero(); p.value.len()],
                    v: vec![T::zero(); p.value.len()],
                });
            }
            let slot = &mut slots[index];
            assert_eq!(slot.name, p.name, "parameter order changed under Adam");
            index += 1;
            self.update_slice(t, &mut slot.m, &mut slot.v, p.value, p.grad, lr, p.decay);
        });
        self.slots = slots;
    }

    /// Exports `(name, m, v)` for checkpointing.
    pub fn export_moments(&self) -> Vec<(String, Vec<f64>, Vec<f64>)> {
        self.slots
            .iter()
            .map(|s| {
                (
                    s.name.clone(),
                    s.m.iter().map(|v| v.to_f64()).collect(),
                    s.v.iter().map(|v| v.to_f64()).collect(),
                )
            })
            .collect()
    }

    pub fn import_moments(&mut self, step: usize, moments: Vec<(String, Vec<f64>, Vec<f64>)>) {
        self.step = step;
        self.slots = moments
            .into_iter()
            .map(|(name, m, v)| AdamSlot {
                name,
                m: m.into_iter().map(T::from_f64).collect(),
                v: v.into_iter().map(T::from_f64).collect(),
            })
            .collect();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::ModelConfig;
    use crate::rng::seeded;
    use ams_core::ams::VariantKind;

    #[test]
    fn warmup_reaches_base_and_cosine_lands_on_final() {
        let s = LrSchedule {
            base_lr: 3.5e-4,
            final_lr: 7.7e-7,
            warmup_epochs: 10,
            epochs: 60,
        };
        assert!((lr_at(10, &s) - 3.5e-4).abs() < 1e-18);
        assert!((lr_at(60, &s) - 7.7e-7).abs() < 1e-18);
        // Midpoint of the cosine span hits the closed form.
        let mid = lr_at(35, &s);
        let expect = 7.7e-7 + (3.5e-4 - 7.7e-7) * 0.5;
        assert!((mid - expect).abs() < 1e-12);
    }

    #[test]
    fn schedule_is_continuous_and_non_increasing_after_warmup() {
        let s = LrSchedule {
            base_lr: 1e-3,
            final_lr: 1e-6,
            warmup_epochs: 5,
            epochs: 30,
        };
        // Continuity at the junction: warmup formula at its endpoint equals
        // the cosine start.
        let before = lr_at(4, &s);
        let junction = lr_at(5, &s);
        assert!(junction >= before);
        assert!((junction - 1e-3).abs() < 1e-15);
        let mut prev = junction;
        for e in 6..=30 {
            let lr = lr_at(e, &s);
            assert!(lr <= prev + 1e-18, "lr increased at epoch {e}");
            prev = lr;
        }
    }

    /// Textbook scalar Adam on a quadratic, independent of the model path.
    fn reference_adam_quadratic(steps: usize, lr: f64) -> f64 {
        let (b1, b2, eps) = (0.9, 0.999, 1e-8);
        let mut x: f64 = 1.0;
        let (mut m, mut v) = (0.0f64, 0.0f64);
        for t in 1..=steps {
            let g = 2.0 * x; // d/dx x^2
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let m_hat = m / (1.0 - b1.powi(t as i32));
            let v_hat = v / (1.0 - b2.powi(t as i32));
            x -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        x
    }

    #[test]
    fn adam_matches_textbook_reference_on_scalar_quadratic() {
        // Drive the production update path on a single scalar minimizing x^2
        // and compare against an independent textbook implementation.
        let lr = 0.05;
        let steps = 100;
        let expect = reference_adam_quadratic(steps, lr);

        let opt = Adam::<f64>::new(0.0);
        let mut value = vec![1.0f64];
        let mut m = vec![0.0f64];
        let mut v = vec![0.0f64];
        for t in 1..=steps {
            let grad = vec![2.0 * value[0]];
            opt.update_slice(t, &mut m, &mut v, &mut value, &grad, lr, false);
        }
        assert!((value[0] - expect).abs() < 1e-12, "{} vs {expect}", value[0]);
    }

    #[test]
    fn decay_flag_is_honored() {
        // One optimizer step with zero gradients: decayed parameters shrink,
        // others stay exactly put.
        let cfg = ModelConfig {
            stage_widths: vec![8, 8, 8, 8],
            placements: vec![1],
            variant: VariantKind::canonical(),
            whiten_g: 4,
            whiten_epsilon: 1e-3,
            ns_iterations: 8,
            sa_kernel: 3,
            ca_reduction: 4,
            in_epsilon: 1e-5,
            num_classes: 3,
        };
        let mut model = crate::backbone::Model::<f64>::new(&cfg, &mut seeded(11)).unwrap();
        model.zero_grads();
        let before = model.export_params();
        let mut opt = Adam::new(0.1);
        opt.step(&mut model, 1e-2);
        let after = model.export_params();
        for ((name, _, b), (_, _, a)) in before.iter().zip(&after) {
            let changed = b.iter().zip(a).any(|(x, y)| x != y);
            let is_plain = name.ends_with(".gamma")
                || name.ends_with(".beta")
                || name.ends_with(".bias");
            if is_plain {
                assert!(!changed, "{name} should not decay");
            } else {
                // Weight tensors decay whenever they are non-zero.
                let nonzero = b.iter().any(|v| *v != 0.0);
                assert_eq!(changed, nonzero, "{name}");
            }
        }
    }
}
