//! Reference bilevel instances and the exact unrolled hypergradient.
//!
//! [`exact_hypergradient`] differentiates the composed one-step map
//! `A ↦ L_D2(W - ξ ∇_W L_D1(W, A), A)` by central differences over `A`. It
//! shares no code with the finite-difference mixed-term estimator in
//! `hypergrad`, which is what makes it usable as a check on that estimator.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{Batch, BilevelObjective, BloError, Evaluation, Result, Split};
use crate::nn::Track;
use crate::tensor::{Tape, Tensor};

/// `L1 = (W - A)^2` on `D1`, `L2 = (W - c)^2` on `D2`, scalar `W` and `A`.
#[derive(Clone, Copy, Debug)]
pub struct QuadraticBilevel {
    pub c: f64,
}

impl QuadraticBilevel {
    pub fn new(c: f64) -> Self {
        Self { c }
    }

    /// `d/dA (W' - c)^2` with `W' = W - 2ξ(W - A)`, so `dW'/dA = 2ξ`.
    pub fn closed_form_hypergradient(&self, w: f64, a: f64, xi: f64) -> f64 {
        let w_inner = w - xi * 2.0 * (w - a);
        2.0 * (w_inner - self.c) * 2.0 * xi
    }
}

impl BilevelObjective for QuadraticBilevel {
    fn evaluate(
        &self,
        weights: &[Tensor],
        prompt: &[Tensor],
        batch: &Batch,
        track: Track,
    ) -> Result<Evaluation> {
        if batch.is_empty() {
            return Err(BloError::EmptyBatch("quadratic"));
        }
        let (w, a) = (weights[0].item(), prompt[0].item());
        let n = batch.len() as f64;
        let (mut loss, mut gw, mut ga) = (0.0, 0.0, 0.0);
        for &(split, _) in &batch.members {
            match split {
                Split::D1 => {
                    loss += (w - a).powi(2);
                    gw += 2.0 * (w - a);
                    ga -= 2.0 * (w - a);
                }
                Split::D2 => {
                    loss += (w - self.c).powi(2);
                    gw += 2.0 * (w - self.c);
                }
            }
        }
        let keep = |on: bool, g: f64| Tensor::scalar(if on { g / n } else { 0.0 });
        Ok(Evaluation {
            loss: loss / n,
            grad_weights: vec![keep(track.weights, gw)],
            grad_prompt: vec![keep(track.prompt, ga)],
        })
    }
}

/// Regression with `f(x) = tanh((x + a) W1) W2`; the prompt `a` shifts every
/// input. Mean squared error per split.
#[derive(Clone, Debug)]
pub struct TinyMlpBilevel {
    inputs: [Tensor; 2],
    targets: [Tensor; 2],
    in_dim: usize,
    hidden: usize,
}

impl TinyMlpBilevel {
    /// `n` examples per split with targets from a random teacher network.
    pub fn random(in_dim: usize, hidden: usize, n: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let mut gauss = |shape: &[usize], std: f64| {
            let mut t = Tensor::zeros(shape);
            t.data_mut()
                .iter_mut()
                .for_each(|x| *x = std * normal.sample(&mut rng));
            t
        };
        let teacher_w1 = gauss(&[in_dim, hidden], 1.0);
        let teacher_w2 = gauss(&[hidden, 1], 1.0);
        let teacher_a = gauss(&[1, in_dim], 0.5);
        let inputs = [gauss(&[n, in_dim], 1.0), gauss(&[n, in_dim], 1.0)];
        let targets = inputs.clone().map(|x| {
            let tape = Tape::new();
            let pred = Self::predict(&tape, &x, &teacher_w1, &teacher_w2, &teacher_a).unwrap();
            let v = pred.value();
            (*v).clone()
        });
        Self {
            inputs,
            targets,
            in_dim,
            hidden,
        }
    }

    pub fn init_weights(&self, seed: u64) -> Vec<Tensor> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut fill = |shape: &[usize], std: f64| {
            let mut t = Tensor::zeros(shape);
            t.data_mut()
                .iter_mut()
                .for_each(|x| *x = std * rng.gen_range(-1.7..1.7));
            t
        };
        vec![
            fill(
                &[self.in_dim, self.hidden],
                1.0 / (self.in_dim as f64).sqrt(),
            ),
            fill(&[self.hidden, 1], 1.0 / (self.hidden as f64).sqrt()),
        ]
    }

    pub fn init_prompt(&self, seed: u64) -> Vec<Tensor> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..self.in_dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        vec![Tensor::new(vec![1, self.in_dim], data).unwrap()]
    }

    fn predict<'t>(
        tape: &'t Tape,
        x: &Tensor,
        w1: &Tensor,
        w2: &Tensor,
        a: &Tensor,
    ) -> crate::tensor::Result<crate::tensor::Var<'t>> {
        let n = x.shape()[0];
        let ones = tape.constant(Tensor::full(&[n, 1], 1.0));
        let shifted = tape
            .constant(x.clone())
            .add(ones.matmul(tape.constant(a.clone()))?)?;
        shifted
            .matmul(tape.constant(w1.clone()))?
            .tanh()
            .matmul(tape.constant(w2.clone()))
    }

    fn rows(&self, split: Split) -> usize {
        self.inputs[split as usize].shape()[0]
    }
}

impl BilevelObjective for TinyMlpBilevel {
    fn evaluate(
        &self,
        weights: &[Tensor],
        prompt: &[Tensor],
        batch: &Batch,
        track: Track,
    ) -> Result<Evaluation> {
        if batch.is_empty() {
            return Err(BloError::EmptyBatch("tiny_mlp"));
        }
        let tape = Tape::new();
        let w1 = tape.leaf(weights[0].clone(), track.weights);
        let w2 = tape.leaf(weights[1].clone(), track.weights);
        let a = tape.leaf(prompt[0].clone(), track.prompt);

        let mut total = None;
        for split in [Split::D1, Split::D2] {
            let idx: Vec<usize> = batch
                .members
                .iter()
                .filter(|(s, _)| *s == split)
                .map(|&(_, i)| i)
                .collect();
            if idx.is_empty() {
                continue;
            }
            if let Some(&bad) = idx.iter().find(|&&i| i >= self.rows(split)) {
                return Err(BloError::UnknownExample { split, index: bad });
            }
            let x = tape
                .constant(self.inputs[split as usize].clone())
                .select_rows(&idx)?;
            let y = tape
                .constant(self.targets[split as usize].clone())
                .select_rows(&idx)?;
            let ones = tape.constant(Tensor::full(&[idx.len(), 1], 1.0));
            let pred = x.add(ones.matmul(a)?)?.matmul(w1)?.tanh().matmul(w2)?;
            let diff = pred.sub(y)?;
            let sq = diff.mul(diff)?.sum_all();
            total = Some(match total {
                None => sq,
                Some(t) => sq.add(t)?,
            });
        }
        let loss = total
            .expect("non-empty batch")
            .scale(1.0 / batch.len() as f64);
        let value = loss.item();
        let grads = loss.backward()?;
        Ok(Evaluation {
            loss: value,
            grad_weights: vec![grads.wrt(w1), grads.wrt(w2)],
            grad_prompt: vec![grads.wrt(a)],
        })
    }
}

/// How the oracle obtains the inner `∇_W L_D1`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum InnerGradient {
    Autodiff,
    /// Central differences with the given step, for fully derivative-free nesting.
    FiniteDifference(f64),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OracleConfig {
    pub outer_step: f64,
    pub inner: InnerGradient,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            outer_step: 1e-5,
            inner: InnerGradient::Autodiff,
        }
    }
}

fn loss_at(obj: &dyn BilevelObjective, w: &[Tensor], a: &[Tensor], batch: &Batch) -> Result<f64> {
    Ok(obj.evaluate(w, a, batch, Track::NONE)?.loss)
}

fn inner_gradient(
    obj: &dyn BilevelObjective,
    w: &[Tensor],
    a: &[Tensor],
    d1: &Batch,
    how: InnerGradient,
) -> Result<Vec<Tensor>> {
    match how {
        InnerGradient::Autodiff => {
            let track = Track {
                weights: true,
                prompt: false,
            };
            Ok(obj.evaluate(w, a, d1, track)?.grad_weights)
        }
        InnerGradient::FiniteDifference(h) => {
            let mut grads: Vec<Tensor> = w.iter().map(|t| Tensor::zeros(t.shape())).collect();
            let mut probe = w.to_vec();
            for ti in 0..w.len() {
                for j in 0..w[ti].numel() {
                    let orig = probe[ti].data()[j];
                    probe[ti].data_mut()[j] = orig + h;
                    let up = loss_at(obj, &probe, a, d1)?;
                    probe[ti].data_mut()[j] = orig - h;
                    let down = loss_at(obj, &probe, a, d1)?;
                    probe[ti].data_mut()[j] = orig;
                    grads[ti].data_mut()[j] = (up - down) / (2.0 * h);
                }
            }
            Ok(grads)
        }
    }
}

/// `L_D2(W - ξ ∇_W L_D1(W, A), A)` as a function of `A`.
pub fn unrolled_upper_loss(
    obj: &dyn BilevelObjective,
    w: &[Tensor],
    a: &[Tensor],
    d2: &Batch,
    d1: &Batch,
    xi: f64,
    inner: InnerGradient,
) -> Result<f64> {
    let g = inner_gradient(obj, w, a, d1, inner)?;
    let stepped: Vec<Tensor> = w
        .iter()
        .zip(&g)
        .map(|(wi, gi)| {
            let mut t = wi.clone();
            t.add_scaled(gi, -xi);
            t
        })
        .collect();
    loss_at(obj, &stepped, a, d2)
}

/// Exact (to finite-difference precision) gradient of the unrolled upper loss.
pub fn exact_hypergradient(
    obj: &dyn BilevelObjective,
    w: &[Tensor],
    a: &[Tensor],
    d2: &Batch,
    d1: &Batch,
    xi: f64,
    cfg: OracleConfig,
) -> Result<Vec<Tensor>> {
    let h = cfg.outer_step;
    let mut out: Vec<Tensor> = a.iter().map(|t| Tensor::zeros(t.shape())).collect();
    let mut probe = a.to_vec();
    for ti in 0..a.len() {
        for j in 0..a[ti].numel() {
            let orig = probe[ti].data()[j];
            probe[ti].data_mut()[j] = orig + h;
            let up = unrolled_upper_loss(obj, w, &probe, d2, d1, xi, cfg.inner)?;
            probe[ti].data_mut()[j] = orig - h;
            let down = unrolled_upper_loss(obj, w, &probe, d2, d1, xi, cfg.inner)?;
            probe[ti].data_mut()[j] = orig;
            out[ti].data_mut()[j] = (up - down) / (2.0 * h);
        }
    }
    Ok(out)
}

pub fn cosine_similarity(a: &[Tensor], b: &[Tensor]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x.dot(y)).sum();
    let na: f64 = a.iter().map(Tensor::norm_sq).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(Tensor::norm_sq).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// `‖a - reference‖ / ‖reference‖`.
pub fn relative_error(a: &[Tensor], reference: &[Tensor]) -> f64 {
    let diff: f64 = a
        .iter()
        .zip(reference)
        .map(|(x, y)| {
            x.data()
                .iter()
                .zip(y.data())
                .map(|(p, q)| (p - q).powi(2))
                .sum::<f64>()
        })
        .sum();
    let nr: f64 = reference.iter().map(Tensor::norm_sq).sum();
    (diff / nr).sqrt()
}

/// Largest absolute elementwise difference.
pub fn max_abs_diff(a: &[Tensor], b: &[Tensor]) -> f64 {
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| x.data().iter().zip(y.data()).map(|(p, q)| (p - q).abs()))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::super::second_order_hypergradient;
    use super::*;

    fn quad_batches() -> (Batch, Batch) {
        (Batch::whole(Split::D2, 1), Batch::whole(Split::D1, 1))
    }

    #[test]
    fn quadratic_closed_form() {
        let q = QuadraticBilevel::new(1.0);
        assert_eq!(q.closed_form_hypergradient(0.0, 1.0, 0.25), -0.5);
        assert_eq!(q.closed_form_hypergradient(0.0, 1.0, 0.0), 0.0);
    }

    #[test]
    fn nested_finite_differences_agree_with_closed_form() {
        let q = QuadraticBilevel::new(1.0);
        let (d2, d1) = quad_batches();
        let cfg = OracleConfig {
            outer_step: 1e-4,
            inner: InnerGradient::FiniteDifference(1e-4),
        };
        let nested = exact_hypergradient(
            &q,
            &[Tensor::scalar(0.0)],
            &[Tensor::scalar(1.0)],
            &d2,
            &d1,
            0.25,
            cfg,
        )
        .unwrap();
        assert!((nested[0].item() + 0.5).abs() < 1e-6);
        let ad = exact_hypergradient(
            &q,
            &[Tensor::scalar(0.0)],
            &[Tensor::scalar(1.0)],
            &d2,
            &d1,
            0.25,
            OracleConfig::default(),
        )
        .unwrap();
        assert!((ad[0].item() - nested[0].item()).abs() < 1e-6);
    }

    #[test]
    fn zero_xi_collapses_to_direct_gradient() {
        let q = QuadraticBilevel::new(1.0);
        let (d2, d1) = quad_batches();
        let g = exact_hypergradient(
            &q,
            &[Tensor::scalar(0.0)],
            &[Tensor::scalar(1.0)],
            &d2,
            &d1,
            0.0,
            OracleConfig::default(),
        )
        .unwrap();
        assert!(g[0].item().abs() < 1e-9);
    }

    #[test]
    fn tiny_mlp_gradients_match_finite_differences() {
        let mlp = TinyMlpBilevel::random(3, 4, 5, 1);
        let (w, a) = (mlp.init_weights(2), mlp.init_prompt(3));
        let batch = Batch::whole(Split::D1, 5);
        let eval = mlp.evaluate(&w, &a, &batch, Track::ALL).unwrap();
        let fd =
            inner_gradient(&mlp, &w, &a, &batch, InnerGradient::FiniteDifference(1e-6)).unwrap();
        assert!(relative_error(&eval.grad_weights, &fd) < 1e-7);
    }

    #[test]
    fn finite_difference_hypergradient_tracks_oracle_on_mlps() {
        for seed in 0..5 {
            let mlp = TinyMlpBilevel::random(3, 4, 5, seed);
            let (w, a) = (mlp.init_weights(seed + 100), mlp.init_prompt(seed + 200));
            let d1 = Batch::whole(Split::D1, 5);
            let d2 = Batch::whole(Split::D2, 5);
            let xi = 0.1;
            let h = second_order_hypergradient(&mlp, &w, &a, &d2, &d1, xi).unwrap();
            let exact =
                exact_hypergradient(&mlp, &w, &a, &d2, &d1, xi, OracleConfig::default()).unwrap();
            assert!(cosine_similarity(&h.grad, &exact) > 0.999);
            assert!(relative_error(&h.grad, &exact) < 0.05);
        }
    }

    #[test]
    fn unknown_example_rejected() {
        let mlp = TinyMlpBilevel::random(2, 3, 2, 0);
        let batch = Batch::new(vec![(Split::D2, 5)]);
        assert!(matches!(
            mlp.evaluate(
                &mlp.init_weights(0),
                &mlp.init_prompt(0),
                &batch,
                Track::ALL
            ),
            Err(BloError::UnknownExample { .. })
        ));
    }
}
