//! AdamW (decoupled weight decay), SGD with momentum, and the step schedule.

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::model::Parameter;

use super::config::OptimKind;

/// One AdamW update. The decay is decoupled: parameters shrink by
/// lr * wd * theta before the bias-corrected moment update is applied.
#[allow(clippy::too_many_arguments)]
pub fn adamw_step(
    theta: &mut Tensor,
    grad: &Tensor,
    m: &mut Tensor,
    v: &mut Tensor,
    step: u64,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
) -> Result<()> {
    if eps <= 0.0 {
        return Err(Error::Config(format!("adamw eps {eps} must be positive")));
    }
    if theta.shape() != grad.shape() || theta.shape() != m.shape() || theta.shape() != v.shape() {
        return Err(Error::ShapeMismatch {
            op: "adamw_step",
            detail: format!("theta {:?} vs grad {:?}", theta.shape(), grad.shape()),
        });
    }
    let bc1 = 1.0 - beta1.powi(step as i32);
    let bc2 = 1.0 - beta2.powi(step as i32);
    for (((t, g), mi), vi) in theta
        .data_mut()
        .iter_mut()
        .zip(grad.data())
        .zip(m.data_mut().iter_mut())
        .zip(v.data_mut().iter_mut())
    {
        if weight_decay != 0.0 {
            *t -= lr * weight_decay * *t;
        }
        *mi = beta1 * *mi + (1.0 - beta1) * g;
        *vi = beta2 * *vi + (1.0 - beta2) * g * g;
        let m_hat = *mi / bc1;
        let v_hat = *vi / bc2;
        *t -= lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}

/// Classic SGD with momentum; weight decay folds into the gradient.
pub fn sgd_momentum_step(
    theta: &mut Tensor,
    grad: &Tensor,
    velocity: &mut Tensor,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    if theta.shape() != grad.shape() || theta.shape() != velocity.shape() {
        return Err(Error::ShapeMismatch {
            op: "sgd_momentum_step",
            detail: format!("theta {:?} vs grad {:?}", theta.shape(), grad.shape()),
        });
    }
    for ((t, g), vel) in theta
        .data_mut()
        .iter_mut()
        .zip(grad.data())
        .zip(velocity.data_mut().iter_mut())
    {
        let g_eff = g + weight_decay * *t;
        *vel = momentum * *vel + g_eff;
        *t -= lr * *vel;
    }
    Ok(())
}

/// lr = base * gamma^floor(epoch / step_size).
pub fn step_lr(base: f64, epoch: usize, step_size: usize, gamma: f64) -> f64 {
    base * gamma.powi((epoch / step_size) as i32)
}

struct Slot {
    name: String,
    m: Tensor,
    v: Tensor,
}

/// Per-parameter-group optimizer instance (one for the encoder, one for the
/// head) with serializable state.
pub struct Optimizer {
    pub kind: OptimKind,
    prefix: String,
    lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    step_count: u64,
    slots: Vec<Slot>,
}

impl Optimizer {
    pub fn new(kind: OptimKind, prefix: impl Into<String>, lr: f64, weight_decay: f64) -> Self {
        Self {
            kind,
            prefix: prefix.into(),
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            momentum: 0.9,
            step_count: 0,
            slots: Vec::new(),
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    fn slot_index(&mut self, name: &str, shape: &[usize]) -> usize {
        if let Some(i) = self.slots.iter().position(|s| s.name == name) {
            return i;
        }
        self.slots.push(Slot {
            name: name.to_string(),
            m: Tensor::zeros(shape),
            v: Tensor::zeros(shape),
        });
        self.slots.len() - 1
    }

    /// Apply one update to every trainable parameter. Frozen parameters are
    /// skipped and must not move.
    pub fn step(
        &mut self,
        params: &mut [&mut Parameter],
        grads: &[(String, Tensor)],
    ) -> Result<()> {
        self.step_count += 1;
        for p in params.iter_mut() {
            if !p.trainable {
                continue;
            }
            let grad = grads
                .iter()
                .find(|(n, _)| n == &p.name)
                .map(|(_, g)| g)
                .ok_or_else(|| {
                    Error::Config(format!("no gradient recorded for parameter {}", p.name))
                })?;
            let idx = self.slot_index(&p.name, p.value.shape());
            let slot = &mut self.slots[idx];
            match self.kind {
                OptimKind::AdamW => adamw_step(
                    &mut p.value,
                    grad,
                    &mut slot.m,
                    &mut slot.v,
                    self.step_count,
                    self.lr,
                    self.beta1,
                    self.beta2,
                    self.eps,
                    self.weight_decay,
                )?,
                OptimKind::SgdMomentum => sgd_momentum_step(
                    &mut p.value,
                    grad,
                    &mut slot.m,
                    self.lr,
                    self.momentum,
                    self.weight_decay,
                )?,
            }
        }
        Ok(())
    }

    pub fn state_entries(&self) -> Vec<(String, Vec<usize>, Vec<f64>)> {
        let mut out = vec![(
            format!("{}.step", self.prefix),
            vec![1],
            vec![self.step_count as f64],
        )];
        for s in &self.slots {
            out.push((
                format!("{}.m.{}", self.prefix, s.name),
                s.m.shape().to_vec(),
                s.m.data().to_vec(),
            ));
            out.push((
                format!("{}.v.{}", self.prefix, s.name),
                s.v.shape().to_vec(),
                s.v.data().to_vec(),
            ));
        }
        out
    }

    /// Restore counters and moment slots; entries belonging to other
    /// prefixes are ignored.
    pub fn load_state(&mut self, entries: &[(String, Vec<usize>, Vec<f64>)]) -> Result<()> {
        let step_key = format!("{}.step", self.prefix);
        let m_prefix = format!("{}.m.", self.prefix);
        let v_prefix = format!("{}.v.", self.prefix);
        self.slots.clear();
        for (name, shape, data) in entries {
            if name == &step_key {
                self.step_count = data[0] as u64;
            } else if let Some(pname) = name.strip_prefix(&m_prefix) {
                let idx = self.slot_index(pname, shape);
                self.slots[idx].m = Tensor::new(shape.clone(), data.clone())?;
            } else if let Some(pname) = name.strip_prefix(&v_prefix) {
                let idx = self.slot_index(pname, shape);
                self.slots[idx].v = Tensor::new(shape.clone(), data.clone())?;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn adamw_single_step_hand_computation() {
        // theta=1, g=1, lr=0.1, wd=0, step 1: m_hat=1, v_hat=1, theta ~ 0.9.
        let mut theta = Tensor::from_vec(vec![1.0]);
        let grad = Tensor::from_vec(vec![1.0]);
        let mut m = Tensor::zeros(&[1]);
        let mut v = Tensor::zeros(&[1]);
        adamw_step(&mut theta, &grad, &mut m, &mut v, 1, 0.1, 0.9, 0.999, 1e-8, 0.0).unwrap();
        assert!(close(theta.data()[0], 0.9, 1e-8), "{}", theta.data()[0]);
    }

    #[test]
    fn adamw_zero_grad_behavior() {
        // g=0, wd=0: unchanged. g=0, wd>0: shrinks by exactly lr*wd*theta.
        let mut theta = Tensor::from_vec(vec![2.0]);
        let grad = Tensor::zeros(&[1]);
        let mut m = Tensor::zeros(&[1]);
        let mut v = Tensor::zeros(&[1]);
        adamw_step(&mut theta, &grad, &mut m, &mut v, 1, 0.1, 0.9, 0.999, 1e-8, 0.0).unwrap();
        assert_eq!(theta.data()[0], 2.0);
        adamw_step(&mut theta, &grad, &mut m, &mut v, 2, 0.1, 0.9, 0.999, 1e-8, 0.05).unwrap();
        assert_eq!(theta.data()[0], 2.0 - 0.1 * 0.05 * 2.0);
    }

    #[test]
    fn adamw_rejects_bad_eps_and_shapes() {
        let mut theta = Tensor::from_vec(vec![1.0]);
        let grad = Tensor::from_vec(vec![1.0]);
        let mut m = Tensor::zeros(&[1]);
        let mut v = Tensor::zeros(&[1]);
        assert!(
            adamw_step(&mut theta, &grad, &mut m, &mut v, 1, 0.1, 0.9, 0.999, 0.0, 0.0).is_err()
        );
        let bad = Tensor::zeros(&[2]);
        assert!(
            adamw_step(&mut theta, &bad, &mut m, &mut v, 1, 0.1, 0.9, 0.999, 1e-8, 0.0).is_err()
        );
    }

    #[test]
    fn adamw_descends_a_unit_quadratic() {
        // f = 0.5 * theta^2; one step with small lr must decrease f.
        for lr in [1e-3, 1e-4] {
            let mut theta = Tensor::from_vec(vec![1.0]);
            let grad = theta.clone();
            let mut m = Tensor::zeros(&[1]);
            let mut v = Tensor::zeros(&[1]);
            adamw_step(&mut theta, &grad, &mut m, &mut v, 1, lr, 0.9, 0.999, 1e-8, 0.0).unwrap();
            assert!(theta.data()[0].abs() < 1.0, "lr {lr}");
        }
    }

    #[test]
    fn sgd_momentum_accumulates_velocity() {
        let mut theta = Tensor::from_vec(vec![0.0]);
        let grad = Tensor::from_vec(vec![1.0]);
        let mut vel = Tensor::zeros(&[1]);
        sgd_momentum_step(&mut theta, &grad, &mut vel, 0.1, 0.9, 0.0).unwrap();
        assert!(close(theta.data()[0], -0.1, 1e-15));
        sgd_momentum_step(&mut theta, &grad, &mut vel, 0.1, 0.9, 0.0).unwrap();
        // velocity = 0.9*1 + 1 = 1.9; theta = -0.1 - 0.19
        assert!(close(theta.data()[0], -0.29, 1e-15));
    }

    #[test]
    fn step_lr_schedule_values() {
        assert_eq!(step_lr(1e-4, 0, 15, 0.1), 1e-4);
        assert_eq!(step_lr(1e-4, 14, 15, 0.1), 1e-4);
        assert!(close(step_lr(1e-4, 15, 15, 0.1), 1e-5, 1e-20));
        assert!(close(step_lr(1e-4, 30, 15, 0.1), 1e-6, 1e-21));
        assert_eq!(step_lr(3e-3, 999, 7, 1.0), 3e-3);
    }

    #[test]
    fn optimizer_skips_frozen_params_and_round_trips_state() {
        let mut p1 = Parameter::new("a", Tensor::from_vec(vec![1.0, 2.0]));
        let mut p2 = Parameter::new("b", Tensor::from_vec(vec![3.0]));
        p2.trainable = false;
        let grads = vec![
            ("a".to_string(), Tensor::from_vec(vec![0.5, -0.5])),
            ("b".to_string(), Tensor::from_vec(vec![9.0])),
        ];
        let mut opt = Optimizer::new(OptimKind::AdamW, "optim.test", 0.01, 0.0);
        {
            let mut params: Vec<&mut Parameter> = vec![&mut p1, &mut p2];
            opt.step(&mut params, &grads).unwrap();
        }
        assert_eq!(p2.value.data(), &[3.0], "frozen parameter moved");
        assert_ne!(p1.value.data(), &[1.0, 2.0]);

        let entries = opt.state_entries();
        let mut restored = Optimizer::new(OptimKind::AdamW, "optim.test", 0.01, 0.0);
        restored.load_state(&entries).unwrap();
        assert_eq!(restored.step_count(), opt.step_count());
        assert_eq!(restored.state_entries(), entries);
    }
}
