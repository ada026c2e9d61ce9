//! Flat `key=value` run configuration.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use crate::blo::{Alternation, BloConfig, Mode, XiPolicy};
use crate::data::{ShapeClass, TaskSpec};
use crate::loss::LossConfig;
use crate::nn::ModelConfig;
use crate::optim::AdamWConfig;

use super::ExperimentError;

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub mode: Mode,
    pub n_train: usize,
    pub seeds: Vec<u64>,
    pub epochs: usize,
    pub lr0: f64,
    pub lambda: f64,
    pub rank: usize,
    pub xi_policy: XiPolicy,
    pub image_size: usize,
    pub target_class: ShapeClass,
    pub out_dir: PathBuf,
    pub test_size: usize,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub alternation: Alternation,
    /// `None` means whole-split batches.
    pub batch_size: Option<usize>,
    pub noise_std: f64,
    pub lambda_grid: Vec<f64>,
    pub rank_grid: Vec<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            mode: Mode::BloFirst,
            n_train: 4,
            seeds: vec![0, 1, 2],
            epochs: 100,
            lr0: 5e-3,
            lambda: 0.8,
            rank: 4,
            xi_policy: XiPolicy::LowerLr,
            image_size: 32,
            target_class: ShapeClass::Ellipse,
            out_dir: PathBuf::from("blofin_out"),
            test_size: 200,
            weight_decay: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            alternation: Alternation::Batch,
            batch_size: None,
            noise_std: 0.05,
            lambda_grid: vec![0.0, 0.2, 0.5, 0.8, 1.0],
            rank_grid: vec![1, 4, 8],
        }
    }
}

/// Checkpoints are always chosen by Dice on the held-out upper split.
pub const CHECKPOINT_SELECTION: &str = "d2_dice";

const KEYS: &[&str] = &[
    "mode",
    "n_train",
    "seeds",
    "epochs",
    "lr0",
    "lambda",
    "rank",
    "xi_policy",
    "image_size",
    "target_class",
    "out_dir",
    "test_size",
    "weight_decay",
    "beta1",
    "beta2",
    "alternation",
    "batch_size",
    "noise_std",
    "checkpoint_selection",
    "lambda_grid",
    "rank_grid",
];

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T, ExperimentError> {
    value
        .parse()
        .map_err(|_| ExperimentError::Config(format!("{key}: cannot parse {value:?}")))
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>, ExperimentError> {
    let items: Vec<T> = value
        .split(',')
        .map(|s| parse_value(key, s.trim()))
        .collect::<Result<_, _>>()?;
    if items.is_empty() {
        return Err(ExperimentError::Config(format!("{key}: empty list")));
    }
    Ok(items)
}

fn join<T: ToString>(items: &[T]) -> String {
    items.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    /// Parses a config file body on top of the defaults.
    pub fn parse(text: &str) -> Result<Self, ExperimentError> {
        let mut cfg = Self::default();
        let mut seen = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = split_pair(line)
                .map_err(|e| ExperimentError::Config(format!("line {}: {e}", n + 1)))?;
            if seen.contains(&key) {
                return Err(ExperimentError::Config(format!(
                    "line {}: duplicate key {key}",
                    n + 1
                )));
            }
            seen.push(key);
            cfg.set(key, value)
                .map_err(|e| ExperimentError::Config(format!("line {}: {}", n + 1, e.message())))?;
        }
        Ok(cfg)
    }

    /// Applies one `key=value` override.
    pub fn apply_override(&mut self, pair: &str) -> Result<(), ExperimentError> {
        let (key, value) = split_pair(pair).map_err(ExperimentError::Config)?;
        self.set(key, value)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ExperimentError> {
        let err = |m: String| ExperimentError::Config(m);
        match key {
            "mode" => self.mode = value.parse().map_err(err)?,
            "n_train" => self.n_train = parse_value(key, value)?,
            "seeds" => self.seeds = parse_list(key, value)?,
            "epochs" => self.epochs = parse_value(key, value)?,
            "lr0" => self.lr0 = parse_value(key, value)?,
            "lambda" => self.lambda = parse_value(key, value)?,
            "rank" => self.rank = parse_value(key, value)?,
            "xi_policy" => self.xi_policy = value.parse().map_err(err)?,
            "image_size" => self.image_size = parse_value(key, value)?,
            "target_class" => self.target_class = value.parse().map_err(err)?,
            "out_dir" => self.out_dir = PathBuf::from(value),
            "test_size" => self.test_size = parse_value(key, value)?,
            "weight_decay" => self.weight_decay = parse_value(key, value)?,
            "beta1" => self.beta1 = parse_value(key, value)?,
            "beta2" => self.beta2 = parse_value(key, value)?,
            "alternation" => self.alternation = value.parse().map_err(err)?,
            "batch_size" => {
                self.batch_size = match value {
                    "full" => None,
                    v => Some(parse_value(key, v)?),
                }
            }
            "noise_std" => self.noise_std = parse_value(key, value)?,
            "checkpoint_selection" => {
                if value != CHECKPOINT_SELECTION {
                    return Err(err(format!(
                        "checkpoint_selection: only {CHECKPOINT_SELECTION} is supported, got {value:?}"
                    )));
                }
            }
            "lambda_grid" => self.lambda_grid = parse_list(key, value)?,
            "rank_grid" => self.rank_grid = parse_list(key, value)?,
            other => {
                return Err(err(format!(
                    "unknown key {other:?} (known keys: {})",
                    KEYS.join(", ")
                )))
            }
        }
        Ok(())
    }

    pub fn task_spec(&self, seed: u64) -> TaskSpec {
        TaskSpec {
            image_size: self.image_size,
            target_class: self.target_class,
            noise_std: self.noise_std,
            seed,
            ..TaskSpec::default()
        }
    }

    pub fn model_config(&self, seed: u64) -> ModelConfig {
        ModelConfig {
            image_size: self.image_size,
            rank: self.rank,
            seed,
            ..ModelConfig::default()
        }
    }

    pub fn blo_config(&self) -> BloConfig {
        let adam = AdamWConfig {
            lr0: self.lr0,
            beta1: self.beta1,
            beta2: self.beta2,
            weight_decay: self.weight_decay,
            ..AdamWConfig::default()
        };
        BloConfig {
            mode: self.mode,
            lower: adam,
            upper: adam,
            xi: self.xi_policy,
            epochs: self.epochs,
            loss: LossConfig {
                lambda: self.lambda,
                ..LossConfig::default()
            },
            alternation: self.alternation,
            batch_size: self.batch_size,
        }
    }

    /// Checks every derived configuration without running anything.
    pub fn validate(&self) -> Result<(), ExperimentError> {
        let err = |m: String| Err(ExperimentError::Config(m));
        if self.seeds.is_empty() {
            return err("seeds: at least one seed required".into());
        }
        if self.n_train == 0 || !self.n_train.is_multiple_of(2) {
            return err(format!(
                "n_train must be even and positive, got {}",
                self.n_train
            ));
        }
        if self.test_size == 0 {
            return err("test_size must be positive".into());
        }
        if self.lambda_grid.iter().any(|l| !(0.0..=1.0).contains(l)) {
            return err("lambda_grid values must lie in [0, 1]".into());
        }
        self.task_spec(0)
            .validate()
            .map_err(|e| ExperimentError::Config(e.to_string()))?;
        self.model_config(0)
            .validate()
            .map_err(|e| ExperimentError::Config(e.to_string()))?;
        for &rank in &self.rank_grid {
            ModelConfig {
                rank,
                ..self.model_config(0)
            }
            .validate()
            .map_err(|e| ExperimentError::Config(format!("rank_grid: {e}")))?;
        }
        self.blo_config()
            .validate()
            .map_err(|e| ExperimentError::Config(e.to_string()))?;
        Ok(())
    }

    /// Every effective setting, in a form [`RunConfig::parse`] reads back.
    pub fn resolved(&self) -> String {
        let mut out = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(out, "{k}={v}");
        };
        put("mode", self.mode.to_string());
        put("n_train", self.n_train.to_string());
        put("seeds", join(&self.seeds));
        put("epochs", self.epochs.to_string());
        put("lr0", self.lr0.to_string());
        put("lambda", self.lambda.to_string());
        put("rank", self.rank.to_string());
        put("xi_policy", self.xi_policy.to_string());
        put("image_size", self.image_size.to_string());
        put("target_class", self.target_class.to_string());
        put("out_dir", self.out_dir.display().to_string());
        put("test_size", self.test_size.to_string());
        put("weight_decay", self.weight_decay.to_string());
        put("beta1", self.beta1.to_string());
        put("beta2", self.beta2.to_string());
        put("alternation", self.alternation.to_string());
        put(
            "batch_size",
            self.batch_size
                .map_or("full".to_string(), |b| b.to_string()),
        );
        put("noise_std", self.noise_std.to_string());
        put("checkpoint_selection", CHECKPOINT_SELECTION.to_string());
        put("lambda_grid", join(&self.lambda_grid));
        put("rank_grid", join(&self.rank_grid));
        out
    }
}

fn split_pair(s: &str) -> Result<(&str, &str), String> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| format!("expected key=value, got {s:?}"))?;
    let (k, v) = (k.trim(), v.trim());
    if k.is_empty() {
        return Err(format!("missing key in {s:?}"));
    }
    Ok((k, v))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let blo = cfg.blo_config();
        assert_eq!(blo.loss.lambda, 0.8);
        assert_eq!(blo.lower.lr0, 5e-3);
        assert_eq!((blo.lower.beta1, blo.lower.beta2), (0.9, 0.999));
        assert_eq!(blo.upper.weight_decay, 0.1);
        assert_eq!(blo.epochs, 100);
        assert_eq!(cfg.model_config(0).rank, 4);
    }

    #[test]
    fn parse_comments_and_overrides() {
        let text = "# run\nmode = joint\nseeds=3, 4\n\nlr0=0.01 # faster\nbatch_size=full\n";
        let mut cfg = RunConfig::parse(text).unwrap();
        assert_eq!(cfg.mode, Mode::Joint);
        assert_eq!(cfg.seeds, vec![3, 4]);
        assert_eq!(cfg.lr0, 0.01);
        assert_eq!(cfg.batch_size, None);
        cfg.apply_override("batch_size=2").unwrap();
        assert_eq!(cfg.batch_size, Some(2));
        cfg.apply_override("xi_policy=0.001").unwrap();
        assert_eq!(cfg.xi_policy, XiPolicy::Fixed(0.001));
    }

    #[test]
    fn rejects_bad_input() {
        for text in [
            "foo=1",
            "lr0",
            "epochs=ten",
            "mode=sgd",
            "rank=1\nrank=2",
            "checkpoint_selection=test_dice",
        ] {
            assert!(
                matches!(RunConfig::parse(text), Err(ExperimentError::Config(_))),
                "{text}"
            );
        }
        let unknown = RunConfig::parse("x=1\nfoo=2").unwrap_err().to_string();
        assert!(unknown.contains("line 1"), "{unknown}");
        for set in [
            "n_train=3",
            "rank=16",
            "lambda=1.5",
            "image_size=20",
            "epochs=0",
        ] {
            let mut cfg = RunConfig::default();
            cfg.apply_override(set).unwrap();
            assert!(cfg.validate().is_err(), "{set}");
        }
    }

    #[test]
    fn resolved_round_trips() {
        let mut cfg = RunConfig::default();
        cfg.apply_override("mode=blo_second").unwrap();
        cfg.apply_override("batch_size=1").unwrap();
        cfg.apply_override("lambda_grid=0.1,0.9").unwrap();
        let text = cfg.resolved();
        assert_eq!(RunConfig::parse(&text).unwrap(), cfg);
        assert!(text.contains("checkpoint_selection=d2_dice\n"));
        assert!(text.contains("lr0=0.005\n"));
    }
}
