//! Bi-level optimisation of LoRA weights `W` (lower level, split `D1`) and
//! the prompt embedding `A` (upper level, split `D2`).
//!
//! The engine is written against [`BilevelObjective`], so the same step and
//! hypergradient code drives the segmentation model, the closed-form
//! quadratic instance and the tiny-MLP instances used as oracles.

use std::collections::BTreeMap;
use std::fmt;

use thiserror::Error;

use crate::loss::LossError;
use crate::nn::{ModelError, Track};
use crate::optim::{AdamW, AdamWConfig, OptimError};
use crate::tensor::{Tensor, TensorError};

mod hypergrad;
pub mod oracle;
mod seg;
mod train;

pub use hypergrad::{first_order_hypergradient, second_order_hypergradient, Hypergradient};
pub use seg::SegObjective;
pub use train::{
    run_training, Alternation, BloConfig, EpochMetrics, Mode, SplitMetrics, TrainingOutcome,
    XiPolicy,
};

#[derive(Debug, Error)]
pub enum BloError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error("{0}: empty batch")]
    EmptyBatch(&'static str),
    #[error("{op}: batch contains a {found} example, expected only {expected}")]
    WrongSplit {
        op: &'static str,
        expected: Split,
        found: Split,
    },
    #[error("no example {index} in {split}")]
    UnknownExample { split: Split, index: usize },
    #[error("non-finite value at {step}")]
    Numerical { step: String },
    #[error("invalid configuration: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, BloError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Split {
    D1,
    D2,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::D1 => "D1",
            Split::D2 => "D2",
        })
    }
}

/// Training examples addressed by `(split, index within split)`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub members: Vec<(Split, usize)>,
}

impl Batch {
    pub fn new(members: Vec<(Split, usize)>) -> Self {
        Self { members }
    }

    /// Every example of one split.
    pub fn whole(split: Split, len: usize) -> Self {
        Self::new((0..len).map(|i| (split, i)).collect())
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    fn require(&self, op: &'static str, split: Split) -> Result<()> {
        if self.is_empty() {
            return Err(BloError::EmptyBatch(op));
        }
        if let Some(&(found, _)) = self.members.iter().find(|(s, _)| *s != split) {
            return Err(BloError::WrongSplit {
                op,
                expected: split,
                found,
            });
        }
        Ok(())
    }
}

/// Batch loss and the gradients that were requested through [`Track`].
/// Untracked groups come back as zeros.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub loss: f64,
    pub grad_weights: Vec<Tensor>,
    pub grad_prompt: Vec<Tensor>,
}

pub trait BilevelObjective {
    /// Mean loss over `batch` at `(weights, prompt)`.
    fn evaluate(
        &self,
        weights: &[Tensor],
        prompt: &[Tensor],
        batch: &Batch,
        track: Track,
    ) -> Result<Evaluation>;
}

/// What a gradient computation fed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum GradTarget {
    /// A gradient applied to `W`.
    Weights,
    /// A gradient applied to `A`.
    Prompt,
    /// `∇_W` on the virtual inner step of the second-order unroll; never applied to `W`.
    VirtualStep,
    /// `∇_A L_D1(W±, A)` inside the finite-difference mixed term.
    UnrollMixed,
}

/// Per-example tally of which gradients each training example entered.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Provenance {
    counts: BTreeMap<(GradTarget, Split), u64>,
}

impl Provenance {
    pub fn record(&mut self, target: GradTarget, batch: &Batch) {
        for &(split, _) in &batch.members {
            *self.counts.entry((target, split)).or_insert(0) += 1;
        }
    }

    pub fn count(&self, target: GradTarget, split: Split) -> u64 {
        self.counts.get(&(target, split)).copied().unwrap_or(0)
    }

    /// `D2` examples in applied `W` gradients plus `D1` examples in applied
    /// `A` gradients taken directly from a loss.
    pub fn hygiene_violations(&self) -> u64 {
        self.count(GradTarget::Weights, Split::D2) + self.count(GradTarget::Prompt, Split::D1)
    }
}

/// Trainable values, their optimizers and the step counters of both levels.
#[derive(Clone, Debug)]
pub struct BloState {
    pub weights: Vec<Tensor>,
    pub prompt: Vec<Tensor>,
    opt_weights: AdamW,
    opt_prompt: AdamW,
    pub lower_steps: u64,
    pub upper_steps: u64,
    pub provenance: Provenance,
}

fn check_finite(value: f64, step: impl FnOnce() -> String) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(BloError::Numerical { step: step() })
    }
}

fn check_all_finite(grads: &[Tensor], step: impl FnOnce() -> String) -> Result<()> {
    if grads.iter().all(Tensor::is_finite) {
        Ok(())
    } else {
        Err(BloError::Numerical { step: step() })
    }
}

impl BloState {
    pub fn new(
        weights: Vec<Tensor>,
        prompt: Vec<Tensor>,
        lower: AdamWConfig,
        upper: AdamWConfig,
    ) -> Self {
        Self {
            opt_weights: AdamW::new(lower, &weights),
            opt_prompt: AdamW::new(upper, &prompt),
            weights,
            prompt,
            lower_steps: 0,
            upper_steps: 0,
            provenance: Provenance::default(),
        }
    }

    /// One AdamW update of `W` on a `D1` batch; `A` is held fixed.
    pub fn lower_step(
        &mut self,
        obj: &dyn BilevelObjective,
        batch: &Batch,
        lr: f64,
    ) -> Result<f64> {
        batch.require("lower_step", Split::D1)?;
        let track = Track {
            weights: true,
            prompt: false,
        };
        let eval = obj.evaluate(&self.weights, &self.prompt, batch, track)?;
        let step = self.lower_steps;
        check_finite(eval.loss, || format!("lower step {step} loss"))?;
        check_all_finite(&eval.grad_weights, || format!("lower step {step} gradient"))?;
        self.provenance.record(GradTarget::Weights, batch);
        self.opt_weights
            .step(&mut self.weights, &eval.grad_weights, lr)?;
        self.lower_steps += 1;
        Ok(eval.loss)
    }

    /// One AdamW update of `A` from `∇_A L_D2(W, A)` with `W` held constant.
    pub fn upper_step_first_order(
        &mut self,
        obj: &dyn BilevelObjective,
        batch_d2: &Batch,
        lr: f64,
    ) -> Result<f64> {
        batch_d2.require("upper_step_first_order", Split::D2)?;
        let h = first_order_hypergradient(obj, &self.weights, &self.prompt, batch_d2)?;
        self.apply_upper(h, lr, &[(GradTarget::Prompt, batch_d2)])
    }

    /// One AdamW update of `A` from the finite-difference second-order
    /// hypergradient. `W` is read but never written.
    pub fn upper_step_second_order(
        &mut self,
        obj: &dyn BilevelObjective,
        batch_d2: &Batch,
        batch_d1: &Batch,
        xi: f64,
        lr: f64,
    ) -> Result<f64> {
        batch_d2.require("upper_step_second_order", Split::D2)?;
        batch_d1.require("upper_step_second_order", Split::D1)?;
        let h =
            second_order_hypergradient(obj, &self.weights, &self.prompt, batch_d2, batch_d1, xi)?;
        let sources = [
            (GradTarget::Prompt, batch_d2),
            (GradTarget::VirtualStep, batch_d1),
            (GradTarget::UnrollMixed, batch_d1),
        ];
        self.apply_upper(h, lr, &sources)
    }

    fn apply_upper(
        &mut self,
        h: Hypergradient,
        lr: f64,
        sources: &[(GradTarget, &Batch)],
    ) -> Result<f64> {
        let step = self.upper_steps;
        check_finite(h.upper_loss, || format!("upper step {step} loss"))?;
        check_all_finite(&h.grad, || format!("upper step {step} hypergradient"))?;
        for (target, batch) in sources {
            self.provenance.record(*target, batch);
        }
        self.opt_prompt.step(&mut self.prompt, &h.grad, lr)?;
        self.upper_steps += 1;
        Ok(h.upper_loss)
    }

    /// Baseline: `W` and `A` updated together from one backward pass.
    pub fn joint_step(
        &mut self,
        obj: &dyn BilevelObjective,
        batch: &Batch,
        lr_weights: f64,
        lr_prompt: f64,
    ) -> Result<f64> {
        if batch.is_empty() {
            return Err(BloError::EmptyBatch("joint_step"));
        }
        let eval = obj.evaluate(&self.weights, &self.prompt, batch, Track::ALL)?;
        let step = self.lower_steps;
        check_finite(eval.loss, || format!("joint step {step} loss"))?;
        check_all_finite(&eval.grad_weights, || {
            format!("joint step {step} weight gradient")
        })?;
        check_all_finite(&eval.grad_prompt, || {
            format!("joint step {step} prompt gradient")
        })?;
        self.provenance.record(GradTarget::Weights, batch);
        self.provenance.record(GradTarget::Prompt, batch);
        self.opt_weights
            .step(&mut self.weights, &eval.grad_weights, lr_weights)?;
        self.opt_prompt
            .step(&mut self.prompt, &eval.grad_prompt, lr_prompt)?;
        self.lower_steps += 1;
        self.upper_steps += 1;
        Ok(eval.loss)
    }
}

pub(crate) fn global_norm(ts: &[Tensor]) -> f64 {
    ts.iter().map(Tensor::norm_sq).sum::<f64>().sqrt()
}

/// `base + alpha * dir`, tensor by tensor.
pub(crate) fn offset(base: &[Tensor], dir: &[Tensor], alpha: f64) -> Vec<Tensor> {
    base.iter()
        .zip(dir)
        .map(|(b, d)| {
            let mut out = b.clone();
            out.add_scaled(d, alpha);
            out
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::oracle::{QuadraticBilevel, TinyMlpBilevel};
    use super::*;

    fn quad_state(w: f64, a: f64, wd: f64) -> BloState {
        let cfg = AdamWConfig {
            weight_decay: wd,
            ..AdamWConfig::default()
        };
        BloState::new(vec![Tensor::scalar(w)], vec![Tensor::scalar(a)], cfg, cfg)
    }

    #[test]
    fn batch_validation() {
        let q = QuadraticBilevel::new(1.0);
        let mut s = quad_state(0.0, 1.0, 0.0);
        assert!(matches!(
            s.lower_step(&q, &Batch::new(vec![]), 0.01),
            Err(BloError::EmptyBatch("lower_step"))
        ));
        assert!(matches!(
            s.lower_step(&q, &Batch::whole(Split::D2, 1), 0.01),
            Err(BloError::WrongSplit { .. })
        ));
        assert!(s
            .upper_step_first_order(&q, &Batch::whole(Split::D1, 1), 0.01)
            .is_err());
        assert!(s
            .upper_step_first_order(&q, &Batch::new(vec![]), 0.01)
            .is_err());
        assert!(s.joint_step(&q, &Batch::new(vec![]), 0.01, 0.01).is_err());
    }

    #[test]
    fn lower_step_at_minimum_leaves_weights() {
        // L1 = (W - A)^2 is minimal at W = A.
        let q = QuadraticBilevel::new(1.0);
        let mut s = quad_state(0.7, 0.7, 0.0);
        s.lower_step(&q, &Batch::whole(Split::D1, 1), 0.01).unwrap();
        assert!(s.weights[0].bit_eq(&Tensor::scalar(0.7)));
        assert_eq!(s.prompt[0].item(), 0.7);
    }

    #[test]
    fn first_order_upper_step_ignores_prompt_free_loss() {
        // L2 = (W - c)^2 has no direct A dependence.
        let q = QuadraticBilevel::new(1.0);
        let mut s = quad_state(0.0, 1.0, 0.0);
        s.upper_step_first_order(&q, &Batch::whole(Split::D2, 1), 0.01)
            .unwrap();
        assert_eq!(s.prompt[0].item(), 1.0);
        assert_eq!(s.weights[0].item(), 0.0);
    }

    #[test]
    fn second_order_step_restores_weights_and_moves_prompt() {
        let q = QuadraticBilevel::new(1.0);
        let mut s = quad_state(0.0, 1.0, 0.0);
        let before = s.weights.clone();
        s.upper_step_second_order(
            &q,
            &Batch::whole(Split::D2, 1),
            &Batch::whole(Split::D1, 1),
            0.25,
            0.01,
        )
        .unwrap();
        assert!(s.weights[0].bit_eq(&before[0]));
        // h = -0.5, so Adam's first step moves A up by lr.
        assert!((s.prompt[0].item() - 1.01).abs() < 1e-9);
    }

    #[test]
    fn joint_step_moves_both_groups() {
        let mlp = TinyMlpBilevel::random(3, 4, 5, 6);
        let mut s = BloState::new(
            mlp.init_weights(1),
            mlp.init_prompt(2),
            AdamWConfig::default(),
            AdamWConfig::default(),
        );
        let (w0, a0) = (s.weights.clone(), s.prompt.clone());
        let batch = Batch::new(vec![
            (Split::D1, 0),
            (Split::D1, 1),
            (Split::D2, 0),
            (Split::D2, 1),
        ]);
        s.joint_step(&mlp, &batch, 0.01, 0.01).unwrap();
        assert!(s.weights.iter().zip(&w0).any(|(a, b)| !a.bit_eq(b)));
        assert!(!s.prompt[0].bit_eq(&a0[0]));
        assert_eq!(s.provenance.count(GradTarget::Prompt, Split::D1), 2);
    }

    #[test]
    fn lower_steps_reduce_training_loss() {
        let mlp = TinyMlpBilevel::random(3, 4, 6, 11);
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..AdamWConfig::default()
        };
        let mut s = BloState::new(mlp.init_weights(1), mlp.init_prompt(2), cfg, cfg);
        let batch = Batch::whole(Split::D1, 6);
        let mut losses = Vec::new();
        for _ in 0..10 {
            losses.push(s.lower_step(&mlp, &batch, 0.01).unwrap());
        }
        let rises = losses.windows(2).filter(|w| w[1] > w[0]).count();
        assert!(rises <= 1, "{losses:?}");
        assert_eq!(s.provenance.hygiene_violations(), 0);
        assert_eq!(s.provenance.count(GradTarget::Weights, Split::D1), 60);
    }

    #[test]
    fn provenance_tracks_unroll_separately() {
        let mlp = TinyMlpBilevel::random(3, 4, 5, 2);
        let mut s = BloState::new(
            mlp.init_weights(1),
            mlp.init_prompt(2),
            AdamWConfig::default(),
            AdamWConfig::default(),
        );
        let d1 = Batch::whole(Split::D1, 5);
        let d2 = Batch::whole(Split::D2, 5);
        s.lower_step(&mlp, &d1, 0.01).unwrap();
        s.upper_step_second_order(&mlp, &d2, &d1, 0.01, 0.01)
            .unwrap();
        assert_eq!(s.provenance.hygiene_violations(), 0);
        assert_eq!(s.provenance.count(GradTarget::Prompt, Split::D2), 5);
        assert_eq!(s.provenance.count(GradTarget::UnrollMixed, Split::D1), 5);
    }
}
