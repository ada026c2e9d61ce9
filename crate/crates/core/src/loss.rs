//! Segmentation training losses and the Dice evaluation metric.

use thiserror::Error;

use crate::tensor::{sigmoid, Result as TensorResult, Tensor, TensorError, Var};

#[derive(Debug, Error, PartialEq)]
pub enum LossError {
    #[error("lambda must lie in [0, 1], got {0}")]
    Lambda(f64),
    #[error("dice smoothing must be positive, got {0}")]
    Smoothing(f64),
    #[error("mask shape {mask:?} does not match prediction shape {pred:?}")]
    Shape { pred: Vec<usize>, mask: Vec<usize> },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    /// Weight of the Dice term; cross-entropy gets `1 - lambda`.
    pub lambda: f64,
    pub dice_smoothing: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda: 0.8,
            dice_smoothing: 1.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<(), LossError> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(LossError::Lambda(self.lambda));
        }
        if self.dice_smoothing.is_nan() || self.dice_smoothing <= 0.0 {
            return Err(LossError::Smoothing(self.dice_smoothing));
        }
        Ok(())
    }
}

fn check_shapes(logits: &Var<'_>, mask: &Tensor) -> TensorResult<()> {
    let shape = logits.shape();
    if shape != mask.shape() {
        return Err(TensorError::ShapeMismatch {
            op: "loss",
            lhs: shape,
            rhs: mask.shape().to_vec(),
        });
    }
    Ok(())
}

/// Pixel-mean binary cross-entropy on logits, `softplus(z) - m*z` form.
pub fn bce_loss<'t>(logits: Var<'t>, mask: &Tensor) -> TensorResult<Var<'t>> {
    check_shapes(&logits, mask)?;
    let m = logits.tape().constant(mask.clone());
    Ok(logits.softplus().sub(logits.mul(m)?)?.mean_all())
}

/// Soft Dice loss `1 - (2 Σ p m + s) / (Σ p + Σ m + s)` with `p = σ(z)`.
pub fn dice_loss<'t>(logits: Var<'t>, mask: &Tensor, smoothing: f64) -> TensorResult<Var<'t>> {
    check_shapes(&logits, mask)?;
    let tape = logits.tape();
    let m = tape.constant(mask.clone());
    let p = logits.sigmoid();
    let overlap = p.mul(m)?.sum_all().scale(2.0).add_scalar(smoothing);
    let denom = p.sum_all().add_scalar(mask.sum() + smoothing);
    Ok(overlap.div(denom)?.neg().add_scalar(1.0))
}

/// `(1 - λ) BCE + λ Dice`.
pub fn composite_loss<'t>(
    logits: Var<'t>,
    mask: &Tensor,
    cfg: &LossConfig,
) -> TensorResult<Var<'t>> {
    let ce = bce_loss(logits, mask)?;
    let dice = dice_loss(logits, mask, cfg.dice_smoothing)?;
    ce.scale(1.0 - cfg.lambda).add(dice.scale(cfg.lambda))
}

/// Thresholds logits at `σ(z) > 0.5` into a 0/1 mask.
pub fn binarize(logits: &Tensor) -> Tensor {
    logits.map(|z| if sigmoid(z) > 0.5 { 1.0 } else { 0.0 })
}

/// `2|A∩B| / (|A|+|B|)` on binary masks; two empty masks score 1.
pub fn dice_score(pred: &Tensor, gt: &Tensor) -> Result<f64, LossError> {
    if pred.shape() != gt.shape() {
        return Err(LossError::Shape {
            pred: pred.shape().to_vec(),
            mask: gt.shape().to_vec(),
        });
    }
    let (mut inter, mut a, mut b) = (0usize, 0usize, 0usize);
    for (&x, &y) in pred.data().iter().zip(gt.data()) {
        let (x, y) = (x > 0.5, y > 0.5);
        inter += usize::from(x && y);
        a += usize::from(x);
        b += usize::from(y);
    }
    if a + b == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (a + b) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;
    use proptest::prelude::*;

    fn mask4() -> Tensor {
        Tensor::new(vec![2, 4], vec![1.0, 1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0]).unwrap()
    }

    #[test]
    fn bce_at_zero_logits_is_ln2() {
        let tape = Tape::new();
        let z = tape.param(Tensor::zeros(&[2, 4]));
        let l = bce_loss(z, &mask4()).unwrap().item();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn bce_saturated_correct_is_tiny() {
        let tape = Tape::new();
        let z = tape.param(mask4().map(|m| if m > 0.5 { 50.0 } else { -50.0 }));
        assert!(bce_loss(z, &mask4()).unwrap().item() < 1e-8);
    }

    #[test]
    fn dice_loss_examples() {
        let tape = Tape::new();
        // p ≡ m exactly is unreachable through a sigmoid, so saturate instead.
        let z = tape.param(mask4().map(|m| if m > 0.5 { 800.0 } else { -800.0 }));
        assert_eq!(dice_loss(z, &mask4(), 1.0).unwrap().item(), 0.0);

        let z = tape.param(Tensor::full(&[2, 4], -800.0));
        let l = dice_loss(z, &mask4(), 1.0).unwrap().item();
        assert!((l - 0.8).abs() < 1e-12);

        let l = dice_loss(z, &Tensor::zeros(&[2, 4]), 1.0).unwrap().item();
        assert!(l.abs() < 1e-12);
    }

    #[test]
    fn composite_endpoints_and_mix() {
        let tape = Tape::new();
        let z = tape.param(
            Tensor::new(vec![2, 4], vec![0.3, -1.0, 2.0, 0.1, -0.4, 1.5, -2.0, 0.7]).unwrap(),
        );
        let ce = bce_loss(z, &mask4()).unwrap().item();
        let dl = dice_loss(z, &mask4(), 1.0).unwrap().item();
        let at = |lambda| {
            composite_loss(
                z,
                &mask4(),
                &LossConfig {
                    lambda,
                    dice_smoothing: 1.0,
                },
            )
            .unwrap()
            .item()
        };
        assert_eq!(at(0.0), ce);
        assert_eq!(at(1.0), dl);
        assert!((at(0.8) - (0.2 * ce + 0.8 * dl)).abs() < 1e-15);
        assert!((0.2f64 * 0.5 + 0.8 * 0.25 - 0.3).abs() < 1e-15);
    }

    #[test]
    fn config_validation() {
        assert!(LossConfig::default().validate().is_ok());
        assert_eq!(
            LossConfig {
                lambda: 1.5,
                dice_smoothing: 1.0
            }
            .validate(),
            Err(LossError::Lambda(1.5))
        );
        assert!(LossConfig {
            lambda: 0.5,
            dice_smoothing: 0.0
        }
        .validate()
        .is_err());
    }

    #[test]
    fn dice_score_examples() {
        let a = Tensor::new(vec![4], vec![1.0, 1.0, 0.0, 0.0]).unwrap();
        let b = Tensor::new(vec![4], vec![0.0, 0.0, 1.0, 1.0]).unwrap();
        let c = Tensor::new(vec![4], vec![1.0, 0.0, 1.0, 0.0]).unwrap();
        assert_eq!(dice_score(&a, &a).unwrap(), 1.0);
        assert_eq!(dice_score(&a, &b).unwrap(), 0.0);
        assert_eq!(dice_score(&a, &c).unwrap(), 0.5);
        let empty = Tensor::zeros(&[4]);
        assert_eq!(dice_score(&empty, &empty).unwrap(), 1.0);
        assert!(dice_score(&a, &Tensor::zeros(&[2, 2])).is_err());
    }

    #[test]
    fn binarize_threshold() {
        let z = Tensor::new(vec![3], vec![-0.1, 0.0, 0.1]).unwrap();
        assert_eq!(binarize(&z).data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn losses_finite_at_extreme_logits() {
        let tape = Tape::new();
        let z = tape.param(
            Tensor::new(vec![2, 4], vec![1e4, -1e4, 1e4, -1e4, -1e4, 1e4, 0.0, 1e4]).unwrap(),
        );
        let l = composite_loss(z, &mask4(), &LossConfig::default()).unwrap();
        assert!(l.item().is_finite());
        let g = l.backward().unwrap().wrt(z);
        assert!(g.is_finite());
    }

    #[test]
    fn dice_loss_shrinks_toward_perfect() {
        let mut prev = f64::INFINITY;
        for scale in [0.5, 1.0, 2.0, 4.0, 8.0, 16.0, 32.0] {
            let tape = Tape::new();
            let z = tape.param(mask4().map(|m| if m > 0.5 { scale } else { -scale }));
            let l = dice_loss(z, &mask4(), 1.0).unwrap().item();
            assert!(l < prev);
            prev = l;
        }
        assert!(prev < 1e-10);
    }

    fn binary_mask(n: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(prop::bool::ANY.prop_map(|b| if b { 1.0 } else { 0.0 }), n)
    }

    proptest! {
        #[test]
        fn composite_is_convex_combination(
            logits in prop::collection::vec(-5.0f64..5.0, 8),
            mask in binary_mask(8),
            lambda in 0.0f64..=1.0,
        ) {
            let mask = Tensor::new(vec![2, 4], mask).unwrap();
            let tape = Tape::new();
            let z = tape.param(Tensor::new(vec![2, 4], logits).unwrap());
            let ce = bce_loss(z, &mask).unwrap().item();
            let dl = dice_loss(z, &mask, 1.0).unwrap().item();
            let l = composite_loss(z, &mask, &LossConfig { lambda, dice_smoothing: 1.0 }).unwrap().item();
            prop_assert!(l >= ce.min(dl) - 1e-12 && l <= ce.max(dl) + 1e-12);
        }

        #[test]
        fn dice_score_symmetric_and_permutation_invariant(
            a in binary_mask(16),
            b in binary_mask(16),
            shift in 0usize..16,
        ) {
            let ta = Tensor::new(vec![16], a.clone()).unwrap();
            let tb = Tensor::new(vec![16], b.clone()).unwrap();
            let s = dice_score(&ta, &tb).unwrap();
            prop_assert_eq!(s, dice_score(&tb, &ta).unwrap());
            prop_assert!((0.0..=1.0).contains(&s));
            let rot = |v: &Vec<f64>| {
                let mut r = v.clone();
                r.rotate_left(shift);
                Tensor::new(vec![16], r).unwrap()
            };
            prop_assert_eq!(s, dice_score(&rot(&a), &rot(&b)).unwrap());
        }
    }
}
