//! Run orchestration behind the `blofin` binary: training over seeds,
//! sweeps, the hypergradient oracle suite, and their CSV/JSON/SVG artifacts.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde_json::json;
use thiserror::Error;

use crate::blo::oracle::{
    cosine_similarity, exact_hypergradient, max_abs_diff, relative_error, OracleConfig,
    QuadraticBilevel, TinyMlpBilevel,
};
use crate::blo::{
    first_order_hypergradient, run_training, second_order_hypergradient, Batch, BloError, Mode,
    Split, TrainingOutcome,
};
use crate::data::{export_pnm, generate, split, DataSplit};
use crate::nn::SegModel;
use crate::tensor::Tensor;

pub mod config;
pub mod svg;

pub use config::RunConfig;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("check failed: {0}")]
    Check(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("run failed: {0}")]
    Run(String),
}

impl ExperimentError {
    /// 0 is success; 1 check or run failure, 2 bad configuration or I/O, 3 non-finite values.
    pub fn exit_code(&self) -> i32 {
        match self {
            ExperimentError::Check(_) | ExperimentError::Run(_) => 1,
            ExperimentError::Config(_) | ExperimentError::Io { .. } => 2,
            ExperimentError::Numerical(_) => 3,
        }
    }

    pub(crate) fn message(&self) -> String {
        match self {
            ExperimentError::Config(m)
            | ExperimentError::Check(m)
            | ExperimentError::Numerical(m)
            | ExperimentError::Run(m) => m.clone(),
            other => other.to_string(),
        }
    }

    fn from_blo(seed: u64, e: BloError) -> Self {
        match e {
            BloError::Numerical { step } => {
                ExperimentError::Numerical(format!("seed {seed}, {step}"))
            }
            BloError::Config(m) => ExperimentError::Config(m),
            other => ExperimentError::Run(format!("seed {seed}: {other}")),
        }
    }
}

pub type Result<T> = std::result::Result<T, ExperimentError>;

fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|source| ExperimentError::Io {
            path: parent.to_path_buf(),
            source,
        })?;
    }
    fs::write(path, contents).map_err(|source| ExperimentError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// The seeded data split and initial model for one run.
pub fn prepare(cfg: &RunConfig, seed: u64) -> Result<(SegModel, DataSplit)> {
    let config_err = |e: String| ExperimentError::Config(e);
    let samples = generate(&cfg.task_spec(seed), cfg.n_train + cfg.test_size)
        .map_err(|e| config_err(e.to_string()))?;
    let data = split(samples, cfg.n_train, seed).map_err(|e| config_err(e.to_string()))?;
    let model = SegModel::new(cfg.model_config(seed)).map_err(|e| config_err(e.to_string()))?;
    Ok((model, data))
}

#[derive(Clone, Debug)]
pub struct SeedRun {
    pub seed: u64,
    pub outcome: TrainingOutcome,
}

/// Trains every seed concurrently. When `out_dir` is given each run also
/// writes its best checkpoint and its training samples under `seed_<s>/`.
pub fn run_seeds(cfg: &RunConfig, out_dir: Option<&Path>) -> Result<Vec<SeedRun>> {
    cfg.validate()?;
    let blo = cfg.blo_config();
    cfg.seeds
        .par_iter()
        .map(|&seed| {
            let (model, data) = prepare(cfg, seed)?;
            let outcome = run_training(&model, &data, &blo, seed)
                .map_err(|e| ExperimentError::from_blo(seed, e))?;
            if let Some(dir) = out_dir {
                let dir = dir.join(format!("seed_{seed}"));
                fs::create_dir_all(&dir).map_err(|source| ExperimentError::Io {
                    path: dir.clone(),
                    source,
                })?;
                let ckpt = dir.join("best.blofin");
                outcome
                    .best_model
                    .save_checkpoint(&ckpt)
                    .map_err(|e| ExperimentError::Run(format!("{}: {e}", ckpt.display())))?;
                for (name, samples) in [("d1", &data.d1), ("d2", &data.d2)] {
                    export_pnm(samples, &dir.join("samples").join(name))
                        .map_err(|e| ExperimentError::Run(format!("sample export: {e}")))?;
                }
            }
            Ok(SeedRun { seed, outcome })
        })
        .collect()
}

/// `seed,mode,epoch,split,dice,loss`, ordered by seed, epoch, then split name.
pub fn metrics_csv(mode: Mode, runs: &[SeedRun]) -> String {
    let mut out = String::from("seed,mode,epoch,split,dice,loss\n");
    let mut runs: Vec<&SeedRun> = runs.iter().collect();
    runs.sort_by_key(|r| r.seed);
    for r in runs {
        for m in &r.outcome.history {
            for (name, s) in [("d2_val", m.d2_val), ("test", m.test), ("train", m.train)] {
                let _ = writeln!(
                    out,
                    "{},{mode},{},{name},{:.6},{:.6}",
                    r.seed, m.epoch, s.dice, s.loss
                );
            }
        }
    }
    out
}

/// Mean and sample standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

pub fn summary_json(cfg: &RunConfig, runs: &[SeedRun]) -> String {
    let per_seed: Vec<_> = runs
        .iter()
        .map(|r| {
            let o = &r.outcome;
            json!({
                "seed": r.seed,
                "best_epoch": o.best_epoch,
                "best_d2_dice": o.best().d2_val.dice,
                "best_test_dice": o.best_test_dice(),
                "final_train_dice": o.last().train.dice,
                "final_test_dice": o.last().test.dice,
                "final_gap": o.final_gap(),
                "hygiene_violations": o.provenance.hygiene_violations(),
            })
        })
        .collect();
    let stat = |f: &dyn Fn(&TrainingOutcome) -> f64| {
        let (mean, std) = mean_std(&runs.iter().map(|r| f(&r.outcome)).collect::<Vec<_>>());
        json!({ "mean": mean, "std": std })
    };
    let doc = json!({
        "mode": cfg.mode.as_str(),
        "n_train": cfg.n_train,
        "epochs": cfg.epochs,
        "checkpoint_selection": config::CHECKPOINT_SELECTION,
        "seeds": per_seed,
        "best_test_dice": stat(&|o| o.best_test_dice()),
        "final_gap": stat(&|o| o.final_gap()),
        "final_test_dice": stat(&|o| o.last().test.dice),
    });
    let mut s = serde_json::to_string_pretty(&doc).expect("json values are finite or null");
    s.push('\n');
    s
}

/// Seed-averaged train and test Dice per epoch.
pub fn curves_svg(mode: Mode, runs: &[SeedRun]) -> String {
    let epochs = runs.first().map_or(0, |r| r.outcome.history.len());
    let n = runs.len() as f64;
    let mean_curve = |f: &dyn Fn(&crate::blo::EpochMetrics) -> f64| -> Vec<(f64, f64)> {
        (0..epochs)
            .map(|e| {
                let v = runs.iter().map(|r| f(&r.outcome.history[e])).sum::<f64>() / n;
                ((e + 1) as f64, v)
            })
            .collect()
    };
    svg::line_chart(
        &format!("{mode}: Dice vs epoch (mean over {} seeds)", runs.len()),
        "epoch",
        "Dice",
        &[
            svg::Series {
                label: "train".into(),
                points: mean_curve(&|m| m.train.dice),
            },
            svg::Series {
                label: "test".into(),
                points: mean_curve(&|m| m.test.dice),
            },
        ],
    )
}

/// `train`: runs all seeds and writes the metrics, summary, curves and resolved config.
pub fn train(cfg: &RunConfig) -> Result<Vec<SeedRun>> {
    cfg.validate()?;
    let dir = cfg.out_dir.clone();
    write_file(&dir.join("config.resolved"), &cfg.resolved())?;
    let runs = run_seeds(cfg, Some(&dir))?;
    write_file(&dir.join("metrics.csv"), &metrics_csv(cfg.mode, &runs))?;
    write_file(&dir.join("summary.json"), &summary_json(cfg, &runs))?;
    write_file(&dir.join("curves.svg"), &curves_svg(cfg.mode, &runs))?;
    Ok(runs)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Sweep {
    Order,
    Lambda,
    Rank,
}

impl Sweep {
    pub fn as_str(self) -> &'static str {
        match self {
            Sweep::Order => "order",
            Sweep::Lambda => "lambda",
            Sweep::Rank => "rank",
        }
    }
}

impl FromStr for Sweep {
    type Err = ExperimentError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "order" => Ok(Sweep::Order),
            "lambda" => Ok(Sweep::Lambda),
            "rank" => Ok(Sweep::Rank),
            other => Err(ExperimentError::Config(format!(
                "unknown sweep {other:?} (expected order, lambda or rank)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub setting: String,
    pub seed: u64,
    pub final_test_dice: f64,
    pub best_test_dice: f64,
    pub final_gap: f64,
}

/// The per-setting configurations of a sweep, in reporting order.
pub fn sweep_settings(cfg: &RunConfig, sweep: Sweep) -> Vec<(String, RunConfig)> {
    match sweep {
        Sweep::Order => Mode::ALL
            .iter()
            .map(|&mode| {
                (
                    mode.to_string(),
                    RunConfig {
                        mode,
                        ..cfg.clone()
                    },
                )
            })
            .collect(),
        Sweep::Lambda => cfg
            .lambda_grid
            .iter()
            .map(|&lambda| {
                (
                    format!("lambda={lambda}"),
                    RunConfig {
                        lambda,
                        ..cfg.clone()
                    },
                )
            })
            .collect(),
        Sweep::Rank => cfg
            .rank_grid
            .iter()
            .map(|&rank| {
                (
                    format!("rank={rank}"),
                    RunConfig {
                        rank,
                        ..cfg.clone()
                    },
                )
            })
            .collect(),
    }
}

pub fn ablation_csv(sweep: Sweep, rows: &[AblationRow]) -> String {
    let mut out = String::from("sweep,setting,seed,final_test_dice,best_test_dice,final_gap\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{:.6},{:.6},{:.6}",
            sweep.as_str(),
            r.setting,
            r.seed,
            r.final_test_dice,
            r.best_test_dice,
            r.final_gap
        );
    }
    out
}

pub fn ablation_svg(sweep: Sweep, cfg: &RunConfig, rows: &[AblationRow]) -> String {
    let settings: Vec<String> = sweep_settings(cfg, sweep)
        .into_iter()
        .map(|(s, _)| s)
        .collect();
    let bars: Vec<String> = cfg.seeds.iter().map(|s| format!("seed {s}")).collect();
    let values: Vec<Vec<f64>> = settings
        .iter()
        .map(|s| {
            cfg.seeds
                .iter()
                .map(|&seed| {
                    rows.iter()
                        .find(|r| &r.setting == s && r.seed == seed)
                        .map_or(0.0, |r| r.final_test_dice)
                })
                .collect()
        })
        .collect();
    svg::grouped_bars(
        &format!("{} sweep: final test Dice", sweep.as_str()),
        sweep.as_str(),
        "final test Dice",
        &settings,
        &bars,
        &values,
    )
}

/// `ablate`: every setting of the sweep over every seed; writes CSV and SVG.
pub fn ablate(cfg: &RunConfig, sweep: Sweep) -> Result<Vec<AblationRow>> {
    cfg.validate()?;
    let settings = sweep_settings(cfg, sweep);
    for (_, c) in &settings {
        c.validate()?;
    }
    let dir = cfg.out_dir.join(format!("ablate_{}", sweep.as_str()));
    write_file(&dir.join("config.resolved"), &cfg.resolved())?;
    let per_setting = settings
        .par_iter()
        .map(|(name, c)| {
            let runs = run_seeds(c, None)?;
            Ok(runs
                .into_iter()
                .map(|r| AblationRow {
                    setting: name.clone(),
                    seed: r.seed,
                    final_test_dice: r.outcome.last().test.dice,
                    best_test_dice: r.outcome.best_test_dice(),
                    final_gap: r.outcome.final_gap(),
                })
                .collect::<Vec<_>>())
        })
        .collect::<Result<Vec<_>>>()?;
    let rows: Vec<AblationRow> = per_setting.into_iter().flatten().collect();
    write_file(&dir.join("ablation.csv"), &ablation_csv(sweep, &rows))?;
    write_file(&dir.join("ablation.svg"), &ablation_svg(sweep, cfg, &rows))?;
    Ok(rows)
}

pub fn render_ablation(rows: &[AblationRow]) -> String {
    let mut settings: Vec<&str> = Vec::new();
    for r in rows {
        if !settings.contains(&r.setting.as_str()) {
            settings.push(&r.setting);
        }
    }
    let mut out = String::new();
    for s in settings {
        let pick = |f: fn(&AblationRow) -> f64| {
            mean_std(
                &rows
                    .iter()
                    .filter(|r| r.setting == s)
                    .map(f)
                    .collect::<Vec<_>>(),
            )
        };
        let (ft, ft_sd) = pick(|r| r.final_test_dice);
        let (bt, bt_sd) = pick(|r| r.best_test_dice);
        let (gap, gap_sd) = pick(|r| r.final_gap);
        let _ = writeln!(
            out,
            "{s:<14} final_test_dice={ft:.4}±{ft_sd:.4}  best_test_dice={bt:.4}±{bt_sd:.4}  final_gap={gap:.4}±{gap_sd:.4}"
        );
    }
    out
}

/// Thresholds used by [`oracle_suite`].
pub const QUADRATIC_TOLERANCE: f64 = 1e-6;
pub const MIN_COSINE: f64 = 0.999;
pub const MAX_RELATIVE_ERROR: f64 = 0.05;
pub const MLP_INSTANCES: u64 = 20;
pub const MLP_XI: f64 = 0.1;

#[derive(Clone, Debug, PartialEq)]
pub struct MlpCheck {
    pub seed: u64,
    pub cosine: f64,
    pub relative_error: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OracleReport {
    pub quadratic: f64,
    pub quadratic_expected: f64,
    pub mlp: Vec<MlpCheck>,
    /// Largest |second-order(ξ = 0) − first-order| entry.
    pub collapse_diff: f64,
    /// `(ξ, ‖second-order(ξ) − first-order‖)` on one tiny-MLP instance.
    pub xi_sweep: Vec<(f64, f64)>,
}

impl OracleReport {
    pub fn quadratic_ok(&self) -> bool {
        (self.quadratic - self.quadratic_expected).abs() < QUADRATIC_TOLERANCE
    }

    pub fn mlp_ok(&self) -> bool {
        self.mlp
            .iter()
            .all(|m| m.cosine > MIN_COSINE && m.relative_error < MAX_RELATIVE_ERROR)
    }

    pub fn collapse_ok(&self) -> bool {
        self.collapse_diff == 0.0
    }

    pub fn xi_sweep_monotone(&self) -> bool {
        self.xi_sweep.windows(2).all(|w| w[1].1 < w[0].1)
    }

    pub fn passed(&self) -> bool {
        self.quadratic_ok() && self.mlp_ok() && self.collapse_ok() && self.xi_sweep_monotone()
    }

    pub fn render(&self) -> String {
        let verdict = |ok: bool| if ok { "ok" } else { "FAIL" };
        let mut out = String::new();
        let _ = writeln!(
            out,
            "quadratic: h = {:.9} (expected {}) {}",
            self.quadratic,
            self.quadratic_expected,
            verdict(self.quadratic_ok())
        );
        for m in &self.mlp {
            let _ = writeln!(
                out,
                "tiny-mlp seed {:>2}: cosine = {:.7}  rel_err = {:.3e} {}",
                m.seed,
                m.cosine,
                m.relative_error,
                verdict(m.cosine > MIN_COSINE && m.relative_error < MAX_RELATIVE_ERROR)
            );
        }
        let min_cos = self
            .mlp
            .iter()
            .map(|m| m.cosine)
            .fold(f64::INFINITY, f64::min);
        let max_rel = self
            .mlp
            .iter()
            .map(|m| m.relative_error)
            .fold(0.0, f64::max);
        let _ = writeln!(
            out,
            "tiny-mlp: min cosine = {min_cos:.7}, max rel_err = {max_rel:.3e}"
        );
        let _ = writeln!(
            out,
            "xi = 0 collapse: max |second - first| = {:e} {}",
            self.collapse_diff,
            verdict(self.collapse_ok())
        );
        for (xi, d) in &self.xi_sweep {
            let _ = writeln!(out, "xi = {xi:e}: ‖second - first‖ = {d:.3e}");
        }
        let _ = writeln!(
            out,
            "xi sweep monotone: {}",
            verdict(self.xi_sweep_monotone())
        );
        out
    }
}

fn norm_of_difference(a: &[Tensor], b: &[Tensor]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            x.data()
                .iter()
                .zip(y.data())
                .map(|(p, q)| (p - q).powi(2))
                .sum::<f64>()
        })
        .sum::<f64>()
        .sqrt()
}

/// Quadratic closed form, tiny-MLP exact-oracle agreement, the `ξ = 0`
/// collapse and the small-`ξ` limit.
pub fn oracle_suite() -> Result<OracleReport> {
    let run_err = |e: BloError| ExperimentError::Run(e.to_string());
    let (d1, d2) = (Batch::whole(Split::D1, 1), Batch::whole(Split::D2, 1));
    let q = QuadraticBilevel::new(1.0);
    let h = second_order_hypergradient(
        &q,
        &[Tensor::scalar(0.0)],
        &[Tensor::scalar(1.0)],
        &d2,
        &d1,
        0.25,
    )
    .map_err(run_err)?;

    const N: usize = 5;
    let (d1, d2) = (Batch::whole(Split::D1, N), Batch::whole(Split::D2, N));
    let instance = |seed: u64| {
        let mlp = TinyMlpBilevel::random(3, 4, N, seed);
        let w = mlp.init_weights(seed + 100);
        let a = mlp.init_prompt(seed + 200);
        (mlp, w, a)
    };
    let mlp = (0..MLP_INSTANCES)
        .into_par_iter()
        .map(|seed| {
            let (mlp, w, a) = instance(seed);
            let h = second_order_hypergradient(&mlp, &w, &a, &d2, &d1, MLP_XI)?;
            let exact =
                exact_hypergradient(&mlp, &w, &a, &d2, &d1, MLP_XI, OracleConfig::default())?;
            Ok(MlpCheck {
                seed,
                cosine: cosine_similarity(&h.grad, &exact),
                relative_error: relative_error(&h.grad, &exact),
            })
        })
        .collect::<std::result::Result<Vec<_>, BloError>>()
        .map_err(run_err)?;

    let (inst, w, a) = instance(0);
    let first = first_order_hypergradient(&inst, &w, &a, &d2).map_err(run_err)?;
    let zero = second_order_hypergradient(&inst, &w, &a, &d2, &d1, 0.0).map_err(run_err)?;
    let xi_sweep = [1e-2, 1e-4, 1e-6]
        .into_iter()
        .map(|xi| {
            let h = second_order_hypergradient(&inst, &w, &a, &d2, &d1, xi)?;
            Ok((xi, norm_of_difference(&h.grad, &first.grad)))
        })
        .collect::<std::result::Result<Vec<_>, BloError>>()
        .map_err(run_err)?;

    Ok(OracleReport {
        quadratic: h.grad[0].item(),
        quadratic_expected: q.closed_form_hypergradient(0.0, 1.0, 0.25),
        mlp,
        collapse_diff: max_abs_diff(&zero.grad, &first.grad),
        xi_sweep,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config(dir: &Path) -> RunConfig {
        let mut cfg = RunConfig::default();
        for set in ["epochs=3", "seeds=0,1", "test_size=6"] {
            cfg.apply_override(set).unwrap();
        }
        cfg.out_dir = dir.to_path_buf();
        cfg
    }

    #[test]
    fn exit_codes() {
        assert_eq!(ExperimentError::Config("x".into()).exit_code(), 2);
        assert_eq!(ExperimentError::Check("x".into()).exit_code(), 1);
        assert_eq!(ExperimentError::Numerical("x".into()).exit_code(), 3);
        let e = ExperimentError::from_blo(
            4,
            BloError::Numerical {
                step: "lower step".into(),
            },
        );
        assert_eq!(e.exit_code(), 3);
        assert!(e.to_string().contains("seed 4, lower step"));
    }

    #[test]
    fn mean_std_values() {
        assert_eq!(mean_std(&[1.0, 3.0]), (2.0, 2f64.sqrt()));
        assert_eq!(mean_std(&[5.0]), (5.0, 0.0));
    }

    #[test]
    fn train_writes_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config(dir.path());
        let runs = train(&cfg).unwrap();
        assert_eq!(runs.len(), 2);
        let csv = fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "seed,mode,epoch,split,dice,loss");
        assert_eq!(lines.len(), 1 + 2 * 3 * 3);
        assert!(lines[1].starts_with("0,blo_first,1,d2_val,"));
        assert!(lines[3].starts_with("0,blo_first,1,train,"));
        let summary: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(dir.path().join("summary.json")).unwrap())
                .unwrap();
        assert_eq!(summary["seeds"].as_array().unwrap().len(), 2);
        assert!(summary["final_gap"]["mean"].is_f64());
        for seed in [0, 1] {
            let seed_dir = dir.path().join(format!("seed_{seed}"));
            let mut model = runs[0].outcome.best_model.clone();
            model
                .load_checkpoint(&seed_dir.join("best.blofin"))
                .unwrap();
            assert!(seed_dir.join("samples/d1/sample_000.pgm").exists());
            assert!(seed_dir.join("samples/d2/sample_001.pbm").exists());
        }
        let resolved = fs::read_to_string(dir.path().join("config.resolved")).unwrap();
        assert_eq!(RunConfig::parse(&resolved).unwrap(), cfg);
    }

    #[test]
    fn ablation_rows_cover_settings() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_config(dir.path());
        cfg.apply_override("epochs=1").unwrap();
        cfg.apply_override("seeds=0").unwrap();
        let rows = ablate(&cfg, Sweep::Order).unwrap();
        let settings: Vec<&str> = rows.iter().map(|r| r.setting.as_str()).collect();
        assert_eq!(settings, ["joint", "blo_first", "blo_second"]);
        let csv = fs::read_to_string(dir.path().join("ablate_order/ablation.csv")).unwrap();
        assert_eq!(csv.lines().count(), 4);
        assert!(dir.path().join("ablate_order/ablation.svg").exists());
        assert!(render_ablation(&rows).contains("blo_second"));
        assert!("depth".parse::<Sweep>().is_err());
    }

    #[test]
    fn oracle_suite_passes() {
        let report = oracle_suite().unwrap();
        assert!(report.passed(), "{}", report.render());
        assert_eq!(report.mlp.len(), MLP_INSTANCES as usize);
        assert_eq!(report.quadratic_expected, -0.5);
    }
}
