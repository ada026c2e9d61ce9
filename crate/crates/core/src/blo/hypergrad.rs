use super::{global_norm, offset, Batch, BilevelObjective, BloError, Result};
use crate::nn::Track;
use crate::tensor::Tensor;

/// Gradient for the upper-level variable plus the quantities used to build it.
#[derive(Clone, Debug)]
pub struct Hypergradient {
    pub grad: Vec<Tensor>,
    /// `L_D2` at the point where its gradients were taken.
    pub upper_loss: f64,
    /// Finite-difference radius, `None` when the mixed term was skipped.
    pub epsilon: Option<f64>,
    pub xi: f64,
}

/// `∇_A L_D2(W, A)` with `W` treated as constant.
pub fn first_order_hypergradient(
    obj: &dyn BilevelObjective,
    weights: &[Tensor],
    prompt: &[Tensor],
    batch_d2: &Batch,
) -> Result<Hypergradient> {
    let track = Track {
        weights: false,
        prompt: true,
    };
    let eval = obj.evaluate(weights, prompt, batch_d2, track)?;
    Ok(Hypergradient {
        grad: eval.grad_prompt,
        upper_loss: eval.loss,
        epsilon: None,
        xi: 0.0,
    })
}

/// One-step unrolled hypergradient with the mixed second derivative
/// replaced by a central difference:
///
/// ```text
/// W' = W - ξ ∇_W L_D1(W, A)
/// g  = ∇_W L_D2(W', A),  ε = 0.01 / ‖g‖₂,  W± = W ± ε g
/// h  = ∇_A L_D2(W', A) - ξ (∇_A L_D1(W⁺, A) - ∇_A L_D1(W⁻, A)) / 2ε
/// ```
///
/// With `ξ = 0` this is exactly the first-order gradient. When `g = 0` the
/// mixed term vanishes and is skipped.
pub fn second_order_hypergradient(
    obj: &dyn BilevelObjective,
    weights: &[Tensor],
    prompt: &[Tensor],
    batch_d2: &Batch,
    batch_d1: &Batch,
    xi: f64,
) -> Result<Hypergradient> {
    if !(xi >= 0.0 && xi.is_finite()) {
        return Err(BloError::Config(format!(
            "xi must be finite and non-negative, got {xi}"
        )));
    }
    let weights_only = Track {
        weights: true,
        prompt: false,
    };
    let prompt_only = Track {
        weights: false,
        prompt: true,
    };

    let inner = obj.evaluate(weights, prompt, batch_d1, weights_only)?;
    let virtual_weights = offset(weights, &inner.grad_weights, -xi);
    let outer = obj.evaluate(&virtual_weights, prompt, batch_d2, Track::ALL)?;

    let norm = global_norm(&outer.grad_weights);
    if norm == 0.0 || xi == 0.0 {
        return Ok(Hypergradient {
            grad: outer.grad_prompt,
            upper_loss: outer.loss,
            epsilon: None,
            xi,
        });
    }
    let eps = 0.01 / norm;
    let plus = offset(weights, &outer.grad_weights, eps);
    let minus = offset(weights, &outer.grad_weights, -eps);
    let grad_plus = obj
        .evaluate(&plus, prompt, batch_d1, prompt_only)?
        .grad_prompt;
    let grad_minus = obj
        .evaluate(&minus, prompt, batch_d1, prompt_only)?
        .grad_prompt;

    let scale = xi / (2.0 * eps);
    let grad = outer
        .grad_prompt
        .into_iter()
        .zip(grad_plus.iter().zip(&grad_minus))
        .map(|(mut h, (gp, gm))| {
            h.add_scaled(gp, -scale);
            h.add_scaled(gm, scale);
            h
        })
        .collect();
    Ok(Hypergradient {
        grad,
        upper_loss: outer.loss,
        epsilon: Some(eps),
        xi,
    })
}

#[cfg(test)]
mod tests {
    use super::super::oracle::QuadraticBilevel;
    use super::super::Split;
    use super::*;

    #[test]
    fn quadratic_instance_matches_closed_form() {
        let q = QuadraticBilevel::new(1.0);
        let (w, a) = ([Tensor::scalar(0.0)], [Tensor::scalar(1.0)]);
        let h = second_order_hypergradient(
            &q,
            &w,
            &a,
            &Batch::whole(Split::D2, 1),
            &Batch::whole(Split::D1, 1),
            0.25,
        )
        .unwrap();
        // g = 2(W' - c) = -1 at W' = 0.5, so ε = 0.01.
        assert_eq!(h.epsilon, Some(0.01));
        assert!((h.grad[0].item() + 0.5).abs() < 1e-6);
    }

    #[test]
    fn epsilon_rule() {
        // W = A makes the inner step a no-op, so g = 2(W - c) = 4.
        let q = QuadraticBilevel::new(0.0);
        let (w, a) = ([Tensor::scalar(2.0)], [Tensor::scalar(2.0)]);
        let h = second_order_hypergradient(
            &q,
            &w,
            &a,
            &Batch::whole(Split::D2, 1),
            &Batch::whole(Split::D1, 1),
            0.1,
        )
        .unwrap();
        assert_eq!(h.epsilon, Some(0.0025));
    }

    #[test]
    fn zero_outer_gradient_skips_mixed_term() {
        let q = QuadraticBilevel::new(1.0);
        let (w, a) = ([Tensor::scalar(1.0)], [Tensor::scalar(1.0)]);
        let h = second_order_hypergradient(
            &q,
            &w,
            &a,
            &Batch::whole(Split::D2, 1),
            &Batch::whole(Split::D1, 1),
            0.3,
        )
        .unwrap();
        assert_eq!(h.epsilon, None);
        assert_eq!(h.grad[0].item(), 0.0);
    }

    #[test]
    fn negative_xi_rejected() {
        let q = QuadraticBilevel::new(1.0);
        let (w, a) = ([Tensor::scalar(0.0)], [Tensor::scalar(1.0)]);
        assert!(second_order_hypergradient(
            &q,
            &w,
            &a,
            &Batch::whole(Split::D2, 1),
            &Batch::whole(Split::D1, 1),
            -0.1
        )
        .is_err());
    }
}
