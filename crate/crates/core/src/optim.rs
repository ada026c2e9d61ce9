//! AdamW with decoupled weight decay and the polynomial learning-rate decay.

use thiserror::Error;

use crate::tensor::Tensor;

#[derive(Debug, Error, PartialEq)]
pub enum OptimError {
    #[error("parameter {index}: shape {param:?} does not match gradient {grad:?}")]
    Shape {
        index: usize,
        param: Vec<usize>,
        grad: Vec<usize>,
    },
    #[error("{params} parameters but {grads} gradients")]
    Count { params: usize, grads: usize },
    #[error("invalid optimizer setting: {0}")]
    Config(String),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub lr0: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr0: 5e-3,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 0.1,
            eps: 1e-8,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<(), OptimError> {
        let ok = self.lr0 > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.weight_decay >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(OptimError::Config(format!("{self:?}")))
        }
    }
}

/// `lr_i = lr0 * (1 - i / iter_max)^0.9`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PolySchedule {
    pub lr0: f64,
    pub iter_max: u64,
}

impl PolySchedule {
    pub const POWER: f64 = 0.9;

    pub fn new(lr0: f64, iter_max: u64) -> Self {
        Self { lr0, iter_max }
    }

    /// Learning rate at iteration `i`; zero from `iter_max` on.
    pub fn lr_at(&self, i: u64) -> f64 {
        if self.iter_max == 0 || i >= self.iter_max {
            return 0.0;
        }
        self.lr0 * (1.0 - i as f64 / self.iter_max as f64).powf(Self::POWER)
    }
}

/// First and second moment estimates, aligned with the parameter list.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: u64,
}

impl AdamState {
    pub fn new(params: &[Tensor]) -> Self {
        let zeros = |p: &Tensor| Tensor::zeros(p.shape());
        Self {
            m: params.iter().map(zeros).collect(),
            v: params.iter().map(zeros).collect(),
            step: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }
}

#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub state: AdamState,
}

impl AdamW {
    pub fn new(config: AdamWConfig, params: &[Tensor]) -> Self {
        Self {
            config,
            state: AdamState::new(params),
        }
    }

    /// One update with an explicit learning rate (usually from a schedule).
    pub fn step(
        &mut self,
        params: &mut [Tensor],
        grads: &[Tensor],
        lr: f64,
    ) -> Result<(), OptimError> {
        if params.len() != grads.len() || params.len() != self.state.m.len() {
            return Err(OptimError::Count {
                params: params.len(),
                grads: grads.len(),
            });
        }
        for (index, ((p, g), m)) in params.iter().zip(grads).zip(&self.state.m).enumerate() {
            if p.shape() != g.shape() || p.shape() != m.shape() {
                return Err(OptimError::Shape {
                    index,
                    param: p.shape().to_vec(),
                    grad: g.shape().to_vec(),
                });
            }
        }

        let AdamWConfig {
            beta1,
            beta2,
            weight_decay,
            eps,
            ..
        } = self.config;
        self.state.step += 1;
        let t = self.state.step as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);

        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.state.m.iter_mut().zip(self.state.v.iter_mut()))
        {
            let it = p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()));
            for ((w, &gi), (mi, vi)) in it {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *w -= lr * (m_hat / (v_hat.sqrt() + eps) + weight_decay * *w);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cfg(weight_decay: f64) -> AdamWConfig {
        AdamWConfig {
            weight_decay,
            ..AdamWConfig::default()
        }
    }

    #[test]
    fn schedule_endpoints() {
        let s = PolySchedule::new(5e-3, 100);
        assert_eq!(s.lr_at(0), 5e-3);
        assert_eq!(s.lr_at(100), 0.0);
        assert_eq!(s.lr_at(250), 0.0);
        assert!((s.lr_at(50) - 2.679e-3).abs() < 1e-6);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = vec![Tensor::scalar(1.0)];
        let mut opt = AdamW::new(cfg(0.0), &p);
        opt.step(&mut p, &[Tensor::scalar(0.5)], 0.01).unwrap();
        assert!((p[0].item() - 0.99).abs() < 1e-9);
    }

    #[test]
    fn zero_gradient_no_decay_is_a_no_op() {
        let mut p = vec![Tensor::full(&[2, 3], 0.7)];
        let before = p.clone();
        let mut opt = AdamW::new(cfg(0.0), &p);
        opt.step(&mut p, &[Tensor::zeros(&[2, 3])], 0.01).unwrap();
        assert!(p[0].bit_eq(&before[0]));
    }

    #[test]
    fn pure_decoupled_decay() {
        let mut p = vec![Tensor::scalar(1.0)];
        let mut opt = AdamW::new(cfg(0.1), &p);
        opt.step(&mut p, &[Tensor::scalar(0.0)], 0.01).unwrap();
        assert!((p[0].item() - 0.999).abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut p = vec![Tensor::zeros(&[2])];
        let mut opt = AdamW::new(cfg(0.0), &p);
        assert!(matches!(
            opt.step(&mut p, &[Tensor::zeros(&[3])], 0.01),
            Err(OptimError::Shape { index: 0, .. })
        ));
        assert!(opt.step(&mut p, &[], 0.01).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(AdamWConfig::default().validate().is_ok());
        assert!(AdamWConfig {
            beta1: 1.0,
            ..AdamWConfig::default()
        }
        .validate()
        .is_err());
        assert!(AdamWConfig {
            lr0: 0.0,
            ..AdamWConfig::default()
        }
        .validate()
        .is_err());
    }

    proptest! {
        #[test]
        fn schedule_is_non_increasing(lr0 in 1e-5f64..1.0, iter_max in 1u64..500) {
            let s = PolySchedule::new(lr0, iter_max);
            for i in 0..iter_max {
                prop_assert!(s.lr_at(i + 1) <= s.lr_at(i));
            }
            prop_assert_eq!(s.lr_at(iter_max), 0.0);
        }

        #[test]
        fn constant_gradient_updates_are_bounded(g in -10.0f64..10.0, steps in 1usize..20, lr in 1e-4f64..1e-1) {
            let mut p = vec![Tensor::scalar(0.3)];
            let mut opt = AdamW::new(cfg(0.0), &p);
            for _ in 0..steps {
                let before = p[0].item();
                opt.step(&mut p, &[Tensor::scalar(g)], lr).unwrap();
                prop_assert!((p[0].item() - before).abs() <= lr * (1.0 + 1e-9));
            }
        }

        #[test]
        fn identical_optimizers_agree_bitwise(gs in prop::collection::vec(-3.0f64..3.0, 1..10)) {
            let mut p1 = vec![Tensor::scalar(1.0)];
            let mut p2 = p1.clone();
            let mut o1 = AdamW::new(AdamWConfig::default(), &p1);
            let mut o2 = AdamW::new(AdamWConfig::default(), &p2);
            for g in gs {
                o1.step(&mut p1, &[Tensor::scalar(g)], 5e-3).unwrap();
                o2.step(&mut p2, &[Tensor::scalar(g)], 5e-3).unwrap();
            }
            prop_assert!(p1[0].bit_eq(&p2[0]));
            prop_assert_eq!(o1.state, o2.state);
        }
    }
}
