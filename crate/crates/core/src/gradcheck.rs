//! Analytic-versus-numeric gradient comparison for every tape op, both loss
//! terms and the assembled segmentation model.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use thiserror::Error;

use crate::loss::{bce_loss, composite_loss, dice_loss, LossConfig};
use crate::nn::{lora_forward, ModelConfig, ModelError, Partition, SegModel, Track};
use crate::tensor::{Tape, Tensor, TensorError, Var};

/// Central-difference step.
pub const STEP: f64 = 1e-6;
pub const TOLERANCE: f64 = 1e-5;
/// Inputs with more elements than this are checked on a random subset.
const FULL_CHECK_LIMIT: usize = 64;
const SAMPLED_COORDS: usize = 24;

#[derive(Debug, Error)]
pub enum GradcheckError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("{case}: non-finite value during gradient check")]
    NonFinite { case: String },
}

type LossAndGrad = dyn Fn(&[Tensor]) -> Result<(f64, Vec<Tensor>), GradcheckError> + Send + Sync;

/// A scalar function of some input tensors together with its autodiff gradient.
pub struct GradCase {
    pub name: String,
    pub inputs: Vec<Tensor>,
    eval: Box<LossAndGrad>,
}

impl GradCase {
    pub fn new(
        name: impl Into<String>,
        inputs: Vec<Tensor>,
        eval: impl Fn(&[Tensor]) -> Result<(f64, Vec<Tensor>), GradcheckError> + Send + Sync + 'static,
    ) -> Self {
        Self {
            name: name.into(),
            inputs,
            eval: Box::new(eval),
        }
    }

    /// Wraps a tape expression. Non-scalar outputs are reduced with fixed
    /// random weights so every output element contributes.
    pub fn op(
        name: impl Into<String>,
        inputs: Vec<Tensor>,
        seed: u64,
        build: impl for<'t> Fn(&[Var<'t>]) -> Result<Var<'t>, TensorError> + Send + Sync + 'static,
    ) -> Self {
        Self::new(name, inputs, move |xs| {
            let tape = Tape::new();
            let vars: Vec<_> = xs.iter().map(|x| tape.param(x.clone())).collect();
            let out = build(&vars)?;
            let weights = gaussian(&out.shape(), seed ^ 0x5eed);
            let loss = out.mul(tape.constant(weights))?.sum_all();
            let grads = loss.backward()?;
            Ok((loss.item(), vars.iter().map(|&v| grads.wrt(v)).collect()))
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CaseResult {
    pub name: String,
    pub max_rel_error: f64,
    pub coords_checked: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Report {
    pub results: Vec<CaseResult>,
    pub tolerance: f64,
}

impl Report {
    pub fn passed(&self) -> bool {
        self.results
            .iter()
            .all(|r| r.max_rel_error < self.tolerance)
    }

    pub fn exit_code(&self) -> i32 {
        if self.passed() {
            0
        } else {
            1
        }
    }

    pub fn worst(&self) -> Option<&CaseResult> {
        self.results
            .iter()
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }

    pub fn render(&self) -> String {
        let width = self.results.iter().map(|r| r.name.len()).max().unwrap_or(0);
        let mut out = String::new();
        for r in &self.results {
            let verdict = if r.max_rel_error < self.tolerance {
                "ok"
            } else {
                "FAIL"
            };
            let _ = writeln!(
                out,
                "{:<width$}  max_rel_err={:.3e}  coords={:<4} {verdict}",
                r.name, r.max_rel_error, r.coords_checked
            );
        }
        let failed = self
            .results
            .iter()
            .filter(|r| r.max_rel_error >= self.tolerance)
            .count();
        let _ = writeln!(
            out,
            "{} cases, {failed} failed (tolerance {:e}, h = {:e})",
            self.results.len(),
            self.tolerance,
            STEP
        );
        out
    }
}

fn gaussian(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    let data = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape and length agree")
}

fn uniform(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape and length agree")
}

fn binary_mask(shape: &[usize], seed: u64) -> Tensor {
    uniform(shape, 0.0, 1.0, seed).map(|u| if u < 0.3 { 1.0 } else { 0.0 })
}

fn coords_for(numel: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if numel <= FULL_CHECK_LIMIT {
        (0..numel).collect()
    } else {
        rand::seq::index::sample(rng, numel, SAMPLED_COORDS).into_vec()
    }
}

/// Compares autodiff against central differences on (a sample of) every input coordinate.
pub fn check_case(case: &GradCase, seed: u64) -> Result<CaseResult, GradcheckError> {
    let non_finite = || GradcheckError::NonFinite {
        case: case.name.clone(),
    };
    let (_, analytic) = (case.eval)(&case.inputs)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut max_diff = 0.0f64;
    let mut max_analytic = 0.0f64;
    let mut max_numeric = 0.0f64;
    let mut checked = 0;
    let mut inputs = case.inputs.clone();
    for (t, grad) in analytic.iter().enumerate() {
        for i in coords_for(inputs[t].numel(), &mut rng) {
            let x0 = inputs[t].data()[i];
            inputs[t].data_mut()[i] = x0 + STEP;
            let up = (case.eval)(&inputs)?.0;
            inputs[t].data_mut()[i] = x0 - STEP;
            let down = (case.eval)(&inputs)?.0;
            inputs[t].data_mut()[i] = x0;
            let numeric = (up - down) / (2.0 * STEP);
            let a = grad.data()[i];
            if !numeric.is_finite() || !a.is_finite() {
                return Err(non_finite());
            }
            max_diff = max_diff.max((a - numeric).abs());
            max_analytic = max_analytic.max(a.abs());
            max_numeric = max_numeric.max(numeric.abs());
            checked += 1;
        }
    }
    Ok(CaseResult {
        name: case.name.clone(),
        max_rel_error: max_diff / max_analytic.max(max_numeric).max(1e-8),
        coords_checked: checked,
    })
}

pub fn run(cases: &[GradCase], seed: u64) -> Result<Report, GradcheckError> {
    let results = cases
        .par_iter()
        .enumerate()
        .map(|(i, c)| check_case(c, seed.wrapping_add(i as u64)))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Report {
        results,
        tolerance: TOLERANCE,
    })
}

/// Every differentiable op, the two loss terms, their blend, a LoRA
/// projection and the full model loss with respect to `W` and `A`.
pub fn standard_cases(seed: u64) -> Result<Vec<GradCase>, GradcheckError> {
    let s = |k: u64| seed.wrapping_mul(1_000).wrapping_add(k);
    let g = |shape: &[usize], k: u64| gaussian(shape, s(k));
    let pos = |shape: &[usize], k: u64| uniform(shape, 0.5, 2.0, s(k));

    let mut cases = vec![
        GradCase::op("matmul", vec![g(&[3, 4], 1), g(&[4, 5], 2)], s(100), |v| {
            v[0].matmul(v[1])
        }),
        GradCase::op("add", vec![g(&[3, 4], 3), g(&[3, 4], 4)], s(101), |v| {
            v[0].add(v[1])
        }),
        GradCase::op(
            "add_broadcast",
            vec![g(&[3, 4], 5), g(&[1], 6)],
            s(102),
            |v| v[0].add(v[1]),
        ),
        GradCase::op("sub", vec![g(&[3, 4], 7), g(&[3, 4], 8)], s(103), |v| {
            v[0].sub(v[1])
        }),
        GradCase::op("mul", vec![g(&[3, 4], 9), g(&[3, 4], 10)], s(104), |v| {
            v[0].mul(v[1])
        }),
        GradCase::op(
            "mul_broadcast",
            vec![g(&[1], 11), g(&[3, 4], 12)],
            s(105),
            |v| v[0].mul(v[1]),
        ),
        GradCase::op("div", vec![g(&[3, 4], 13), pos(&[3, 4], 14)], s(106), |v| {
            v[0].div(v[1])
        }),
        GradCase::op("neg", vec![g(&[3, 4], 15)], s(107), |v| Ok(v[0].neg())),
        GradCase::op("scale", vec![g(&[3, 4], 16)], s(108), |v| {
            Ok(v[0].scale(-1.7))
        }),
        GradCase::op("add_scalar", vec![g(&[3, 4], 17)], s(109), |v| {
            Ok(v[0].add_scalar(0.3))
        }),
        GradCase::op("sigmoid", vec![g(&[3, 4], 18)], s(110), |v| {
            Ok(v[0].sigmoid())
        }),
        GradCase::op("log", vec![pos(&[3, 4], 19)], s(111), |v| v[0].log()),
        GradCase::op("exp", vec![g(&[3, 4], 20)], s(112), |v| Ok(v[0].exp())),
        GradCase::op("tanh", vec![g(&[3, 4], 21)], s(113), |v| Ok(v[0].tanh())),
        GradCase::op(
            "softplus",
            vec![g(&[3, 4], 22).map(|x| 3.0 * x)],
            s(114),
            |v| Ok(v[0].softplus()),
        ),
        GradCase::op("pow", vec![pos(&[3, 4], 23)], s(115), |v| v[0].pow(1.5)),
        GradCase::op("softmax", vec![g(&[3, 5], 24)], s(116), |v| {
            Ok(v[0].softmax())
        }),
        GradCase::op("sum_all", vec![g(&[3, 4], 25)], s(117), |v| {
            Ok(v[0].sum_all())
        }),
        GradCase::op("sum_axis0", vec![g(&[3, 4], 26)], s(118), |v| {
            v[0].sum(Some(0))
        }),
        GradCase::op("sum_axis1", vec![g(&[3, 4], 27)], s(119), |v| {
            v[0].sum(Some(1))
        }),
        GradCase::op("mean_all", vec![g(&[3, 4], 28)], s(120), |v| {
            Ok(v[0].mean_all())
        }),
        GradCase::op("mean_axis1", vec![g(&[3, 4], 29)], s(121), |v| {
            v[0].mean(Some(1))
        }),
        GradCase::op("transpose", vec![g(&[3, 4], 30)], s(122), |v| {
            v[0].transpose()
        }),
        GradCase::op("reshape", vec![g(&[3, 4], 31)], s(123), |v| {
            v[0].reshape(&[2, 6])
        }),
        GradCase::op("select_rows", vec![g(&[4, 3], 32)], s(124), |v| {
            v[0].select_rows(&[2, 0, 2, 3, 1])
        }),
        GradCase::op(
            "lora_projection",
            vec![
                g(&[5, 6], 33),
                g(&[6, 6], 34),
                g(&[6, 2], 35),
                g(&[2, 6], 36),
            ],
            s(125),
            |v| lora_forward(v[2], v[3], v[0].matmul(v[1])?, v[0]),
        ),
    ];

    let logits = g(&[6, 6], 40).map(|x| 2.0 * x);
    let mask = binary_mask(&[6, 6], s(41));
    let m = mask.clone();
    cases.push(GradCase::op(
        "loss_bce",
        vec![logits.clone()],
        s(126),
        move |v| bce_loss(v[0], &m),
    ));
    let m = mask.clone();
    cases.push(GradCase::op(
        "loss_dice",
        vec![logits.clone()],
        s(127),
        move |v| dice_loss(v[0], &m, 1.0),
    ));
    let m = mask;
    cases.push(GradCase::op(
        "loss_composite",
        vec![logits],
        s(128),
        move |v| composite_loss(v[0], &m, &LossConfig::default()),
    ));

    cases.push(model_case(seed)?);
    Ok(cases)
}

/// Composite loss of a small model with respect to every trainable tensor.
/// LoRA `up` matrices are moved off zero so `down` receives gradient too.
pub fn model_case(seed: u64) -> Result<GradCase, GradcheckError> {
    let config = ModelConfig {
        image_size: 16,
        seed,
        ..ModelConfig::default()
    };
    let model = SegModel::new(config)?;
    let mut inputs = model.group(Partition::Weights);
    let n_weights = inputs.len();
    inputs.extend(model.group(Partition::Prompt));
    for (k, t) in inputs.iter_mut().enumerate() {
        t.add_scaled(&gaussian(t.shape(), seed.wrapping_add(500 + k as u64)), 0.1);
    }
    let image = uniform(&[16, 16], 0.0, 1.0, seed.wrapping_add(900));
    let mask = binary_mask(&[16, 16], seed.wrapping_add(901));
    let partition = model.parameter_partition();
    Ok(GradCase::new("model_loss", inputs, move |xs| {
        let tape = Tape::new();
        let (w, a) = xs.split_at(n_weights);
        let b = model.bind_with(&tape, w, a, Track::ALL)?;
        let logits = model.forward(&b, &image)?;
        let loss = composite_loss(logits, &mask, &LossConfig::default())?;
        let grads = loss.backward()?;
        let collected = partition
            .weights
            .iter()
            .chain(&partition.prompt)
            .map(|&id| grads.wrt(b.var(id)))
            .collect();
        Ok((loss.item(), collected))
    }))
}

/// A `sin` node whose registered derivative is off by 1%, which the checker must reject.
pub fn corrupted_case(seed: u64) -> GradCase {
    GradCase::op("corrupted_sin", vec![gaussian(&[3, 4], seed)], seed, |v| {
        Ok(v[0].map_with_derivative(f64::sin, |x| 1.01 * x.cos()))
    })
}
