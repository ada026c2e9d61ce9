use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Batch, BloError, BloState, Provenance, Result, SegObjective, Split};
use crate::data::DataSplit;
use crate::loss::LossConfig;
use crate::nn::{Partition, SegModel};
use crate::optim::{AdamWConfig, PolySchedule};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Mode {
    BloFirst,
    BloSecond,
    Joint,
}

impl Mode {
    pub const ALL: [Mode; 3] = [Mode::Joint, Mode::BloFirst, Mode::BloSecond];

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::BloFirst => "blo_first",
            Mode::BloSecond => "blo_second",
            Mode::Joint => "joint",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "blo_first" => Ok(Mode::BloFirst),
            "blo_second" => Ok(Mode::BloSecond),
            "joint" => Ok(Mode::Joint),
            other => Err(format!(
                "unknown mode {other:?} (expected blo_first, blo_second or joint)"
            )),
        }
    }
}

/// Virtual inner-step size used by the second-order hypergradient.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum XiPolicy {
    /// The lower level's scheduled learning rate at its latest step.
    LowerLr,
    Fixed(f64),
}

impl fmt::Display for XiPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            XiPolicy::LowerLr => f.write_str("lower_lr"),
            XiPolicy::Fixed(v) => write!(f, "{v}"),
        }
    }
}

impl FromStr for XiPolicy {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        if s == "lower_lr" {
            return Ok(XiPolicy::LowerLr);
        }
        s.parse::<f64>()
            .map(XiPolicy::Fixed)
            .map_err(|_| format!("xi_policy must be `lower_lr` or a number, got {s:?}"))
    }
}

/// How lower and upper steps interleave within an epoch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Alternation {
    /// One lower batch, then one upper batch, repeated.
    Batch,
    /// Every lower batch of the epoch, then every upper batch.
    Epoch,
}

impl fmt::Display for Alternation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Alternation::Batch => "batch",
            Alternation::Epoch => "epoch",
        })
    }
}

impl FromStr for Alternation {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "batch" => Ok(Alternation::Batch),
            "epoch" => Ok(Alternation::Epoch),
            other => Err(format!(
                "unknown alternation {other:?} (expected batch or epoch)"
            )),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BloConfig {
    pub mode: Mode,
    pub lower: AdamWConfig,
    pub upper: AdamWConfig,
    pub xi: XiPolicy,
    pub epochs: usize,
    pub loss: LossConfig,
    pub alternation: Alternation,
    /// `None` uses each whole split as one batch.
    pub batch_size: Option<usize>,
}

impl Default for BloConfig {
    fn default() -> Self {
        Self {
            mode: Mode::BloFirst,
            lower: AdamWConfig::default(),
            upper: AdamWConfig::default(),
            xi: XiPolicy::LowerLr,
            epochs: 100,
            loss: LossConfig::default(),
            alternation: Alternation::Batch,
            batch_size: None,
        }
    }
}

impl BloConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(BloError::Config(m));
        if self.epochs == 0 {
            return bad("epochs must be positive".into());
        }
        self.lower.validate()?;
        self.upper.validate()?;
        self.loss.validate()?;
        if let XiPolicy::Fixed(xi) = self.xi {
            if self.mode == Mode::BloSecond && !(xi > 0.0 && xi.is_finite()) {
                return bad(format!("blo_second needs xi > 0, got {xi}"));
            }
        }
        if self.batch_size == Some(0) {
            return bad("batch_size must be positive".into());
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SplitMetrics {
    pub dice: f64,
    pub loss: f64,
}

/// Metrics after the given (1-based) epoch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// `D1 ∪ D2`.
    pub train: SplitMetrics,
    pub test: SplitMetrics,
    pub d2_val: SplitMetrics,
}

impl EpochMetrics {
    pub fn gap(&self) -> f64 {
        self.train.dice - self.test.dice
    }
}

#[derive(Clone, Debug)]
pub struct TrainingOutcome {
    pub history: Vec<EpochMetrics>,
    /// Epoch whose `D2` Dice was highest (earliest on ties).
    pub best_epoch: usize,
    pub best_model: SegModel,
    pub final_model: SegModel,
    pub provenance: Provenance,
    pub lower_steps: u64,
    pub upper_steps: u64,
}

impl TrainingOutcome {
    pub fn best(&self) -> &EpochMetrics {
        &self.history[self.best_epoch - 1]
    }

    pub fn last(&self) -> &EpochMetrics {
        self.history.last().expect("at least one epoch")
    }

    pub fn best_test_dice(&self) -> f64 {
        self.best().test.dice
    }

    pub fn final_gap(&self) -> f64 {
        self.last().gap()
    }
}

fn batches(
    members: Vec<(Split, usize)>,
    size: Option<usize>,
    rng: Option<&mut ChaCha8Rng>,
) -> Vec<Batch> {
    let mut members = members;
    match size {
        Some(size) if size < members.len() => {
            if let Some(rng) = rng {
                members.shuffle(rng);
            }
            members
                .chunks(size)
                .map(|c| Batch::new(c.to_vec()))
                .collect()
        }
        _ => vec![Batch::new(members)],
    }
}

fn whole(split: Split, n: usize) -> Vec<(Split, usize)> {
    (0..n).map(|i| (split, i)).collect()
}

fn with_context(epoch: usize) -> impl Fn(BloError) -> BloError {
    move |e| match e {
        BloError::Numerical { step } => BloError::Numerical {
            step: format!("epoch {epoch}, {step}"),
        },
        other => other,
    }
}

/// Trains `W` and `A` from `model`'s initial values and logs metrics per epoch.
pub fn run_training(
    model: &SegModel,
    data: &DataSplit,
    cfg: &BloConfig,
    seed: u64,
) -> Result<TrainingOutcome> {
    cfg.validate()?;
    if data.d1.is_empty() || data.d2.is_empty() || data.test.is_empty() {
        return Err(BloError::Config(
            "D1, D2 and the test set must all be non-empty".into(),
        ));
    }
    let obj = SegObjective::new(model, cfg.loss, &data.d1, &data.d2)?;
    let (n1, n2) = (data.d1.len(), data.d2.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // Batch counts are fixed per epoch, which fixes both schedule lengths.
    let k1 = batches(whole(Split::D1, n1), cfg.batch_size, None).len();
    let k2 = batches(whole(Split::D2, n2), cfg.batch_size, None).len();
    let kj = batches(
        [whole(Split::D1, n1), whole(Split::D2, n2)].concat(),
        cfg.batch_size,
        None,
    )
    .len();
    let (lower_per_epoch, upper_per_epoch) = match (cfg.mode, cfg.alternation) {
        (Mode::Joint, _) => (kj, kj),
        (_, Alternation::Batch) => (k1.max(k2), k1.max(k2)),
        (_, Alternation::Epoch) => (k1, k2),
    };
    let epochs = cfg.epochs as u64;
    let lower_sched = PolySchedule::new(cfg.lower.lr0, epochs * lower_per_epoch as u64);
    let upper_sched = PolySchedule::new(cfg.upper.lr0, epochs * upper_per_epoch as u64);

    let mut state = BloState::new(
        model.group(Partition::Weights),
        model.group(Partition::Prompt),
        cfg.lower,
        cfg.upper,
    );
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(
        usize,
        f64,
        Vec<crate::tensor::Tensor>,
        Vec<crate::tensor::Tensor>,
    )> = None;

    for epoch in 1..=cfg.epochs {
        let ctx = with_context(epoch);
        let upper = |state: &mut BloState, b2: &Batch, b1: &Batch| -> Result<f64> {
            let lr = upper_sched.lr_at(state.upper_steps);
            match cfg.mode {
                Mode::BloSecond => {
                    let xi = match cfg.xi {
                        XiPolicy::LowerLr => lower_sched.lr_at(state.lower_steps.saturating_sub(1)),
                        XiPolicy::Fixed(v) => v,
                    };
                    state.upper_step_second_order(&obj, b2, b1, xi, lr)
                }
                _ => state.upper_step_first_order(&obj, b2, lr),
            }
        };

        match cfg.mode {
            Mode::Joint => {
                let members = [whole(Split::D1, n1), whole(Split::D2, n2)].concat();
                for b in batches(members, cfg.batch_size, Some(&mut rng)) {
                    let lr_w = lower_sched.lr_at(state.lower_steps);
                    let lr_a = upper_sched.lr_at(state.upper_steps);
                    state.joint_step(&obj, &b, lr_w, lr_a).map_err(&ctx)?;
                }
            }
            Mode::BloFirst | Mode::BloSecond => {
                let b1 = batches(whole(Split::D1, n1), cfg.batch_size, Some(&mut rng));
                let b2 = batches(whole(Split::D2, n2), cfg.batch_size, Some(&mut rng));
                match cfg.alternation {
                    Alternation::Batch => {
                        for t in 0..lower_per_epoch {
                            let lower_batch = &b1[t % b1.len()];
                            let lr = lower_sched.lr_at(state.lower_steps);
                            state.lower_step(&obj, lower_batch, lr).map_err(&ctx)?;
                            upper(&mut state, &b2[t % b2.len()], lower_batch).map_err(&ctx)?;
                        }
                    }
                    Alternation::Epoch => {
                        for b in &b1 {
                            let lr = lower_sched.lr_at(state.lower_steps);
                            state.lower_step(&obj, b, lr).map_err(&ctx)?;
                        }
                        for (j, b) in b2.iter().enumerate() {
                            upper(&mut state, b, &b1[j % b1.len()]).map_err(&ctx)?;
                        }
                    }
                }
            }
        }

        let (d1_dice, d1_loss) = obj.score(&state.weights, &state.prompt, &data.d1)?;
        let (d2_dice, d2_loss) = obj.score(&state.weights, &state.prompt, &data.d2)?;
        let (test_dice, test_loss) = obj.score(&state.weights, &state.prompt, &data.test)?;
        let mix = |a: f64, b: f64| (a * n1 as f64 + b * n2 as f64) / (n1 + n2) as f64;
        let metrics = EpochMetrics {
            epoch,
            train: SplitMetrics {
                dice: mix(d1_dice, d2_dice),
                loss: mix(d1_loss, d2_loss),
            },
            test: SplitMetrics {
                dice: test_dice,
                loss: test_loss,
            },
            d2_val: SplitMetrics {
                dice: d2_dice,
                loss: d2_loss,
            },
        };
        for (name, v) in [
            ("train", metrics.train.loss),
            ("test", metrics.test.loss),
            ("d2_val", metrics.d2_val.loss),
        ] {
            if !v.is_finite() {
                return Err(BloError::Numerical {
                    step: format!("epoch {epoch}, {name} evaluation loss"),
                });
            }
        }
        if best.as_ref().is_none_or(|(_, d, _, _)| d2_dice > *d) {
            best = Some((epoch, d2_dice, state.weights.clone(), state.prompt.clone()));
        }
        history.push(metrics);
    }

    let (best_epoch, _, best_w, best_a) = best.expect("epochs > 0");
    let mut best_model = model.clone();
    best_model.set_group(Partition::Weights, &best_w)?;
    best_model.set_group(Partition::Prompt, &best_a)?;
    let mut final_model = model.clone();
    final_model.set_group(Partition::Weights, &state.weights)?;
    final_model.set_group(Partition::Prompt, &state.prompt)?;

    Ok(TrainingOutcome {
        history,
        best_epoch,
        best_model,
        final_model,
        provenance: state.provenance,
        lower_steps: state.lower_steps,
        upper_steps: state.upper_steps,
    })
}
