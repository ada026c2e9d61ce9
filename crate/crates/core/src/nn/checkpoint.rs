//! Text checkpoint format.
//!
//! ```text
//! BLOFIN1
//! manifest frozen=<n> weights=<n> prompt=<n>
//! param <name> <partition> <dims comma-separated, or "scalar">
//! <values separated by single spaces>
//! ...
//! ```
//!
//! Manifest counts are numbers of parameter tensors per partition. Values use
//! Rust's shortest round-trip float formatting, so a load restores every
//! parameter bit-exactly.

use std::fmt::Write as _;
use std::path::Path;

use thiserror::Error;

use super::{Param, Partition, SegModel};
use crate::tensor::Tensor;

pub const MAGIC: &str = "BLOFIN1";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("checkpoint does not match model: {0}")]
    Mismatch(String),
}

fn parse_err(line: usize, message: impl Into<String>) -> CheckpointError {
    CheckpointError::Parse {
        line,
        message: message.into(),
    }
}

pub fn to_string(params: &[Param]) -> String {
    let count = |p: Partition| params.iter().filter(|x| x.partition == p).count();
    let mut out = String::new();
    writeln!(out, "{MAGIC}").unwrap();
    writeln!(
        out,
        "manifest frozen={} weights={} prompt={}",
        count(Partition::Frozen),
        count(Partition::Weights),
        count(Partition::Prompt)
    )
    .unwrap();
    for p in params {
        let dims = if p.value.shape().is_empty() {
            "scalar".to_string()
        } else {
            p.value
                .shape()
                .iter()
                .map(|d| d.to_string())
                .collect::<Vec<_>>()
                .join(",")
        };
        writeln!(out, "param {} {} {}", p.name, p.partition.as_str(), dims).unwrap();
        let values: Vec<String> = p.value.data().iter().map(|v| format!("{v:?}")).collect();
        writeln!(out, "{}", values.join(" ")).unwrap();
    }
    out
}

pub fn parse(text: &str) -> Result<Vec<Param>, CheckpointError> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    match lines.next() {
        Some((_, MAGIC)) => {}
        _ => return Err(parse_err(1, format!("missing {MAGIC} magic"))),
    }
    let (mline, manifest) = lines
        .next()
        .ok_or_else(|| parse_err(2, "missing manifest"))?;
    let mut expected = [0usize; 3];
    let mut fields = manifest.split_whitespace();
    if fields.next() != Some("manifest") {
        return Err(parse_err(mline, "expected manifest line"));
    }
    for (slot, key) in expected.iter_mut().zip(["frozen", "weights", "prompt"]) {
        let field = fields
            .next()
            .ok_or_else(|| parse_err(mline, "short manifest"))?;
        let value = field
            .strip_prefix(key)
            .and_then(|r| r.strip_prefix('='))
            .ok_or_else(|| parse_err(mline, format!("expected {key}=<count>")))?;
        *slot = value
            .parse()
            .map_err(|_| parse_err(mline, format!("bad count {value:?}")))?;
    }

    let mut params = Vec::new();
    while let Some((hline, header)) = lines.next() {
        if header.is_empty() {
            continue;
        }
        let parts: Vec<&str> = header.split(' ').collect();
        if parts.len() != 4 || parts[0] != "param" {
            return Err(parse_err(
                hline,
                "expected `param <name> <partition> <dims>`",
            ));
        }
        let partition = Partition::parse(parts[2])
            .ok_or_else(|| parse_err(hline, format!("unknown partition {}", parts[2])))?;
        let shape: Vec<usize> = if parts[3] == "scalar" {
            Vec::new()
        } else {
            parts[3]
                .split(',')
                .map(|d| {
                    d.parse()
                        .map_err(|_| parse_err(hline, format!("bad dimension {d:?}")))
                })
                .collect::<Result<_, _>>()?
        };
        let (vline, values) = lines
            .next()
            .ok_or_else(|| parse_err(hline + 1, "missing values"))?;
        let data: Vec<f64> = values
            .split(' ')
            .map(|v| {
                v.parse()
                    .map_err(|_| parse_err(vline, format!("bad value {v:?}")))
            })
            .collect::<Result<_, _>>()?;
        let value = Tensor::new(shape, data).map_err(|e| parse_err(vline, e.to_string()))?;
        params.push(Param {
            name: parts[1].to_string(),
            partition,
            value,
        });
    }

    let count = |p: Partition| params.iter().filter(|x| x.partition == p).count();
    let got = [
        count(Partition::Frozen),
        count(Partition::Weights),
        count(Partition::Prompt),
    ];
    if got != expected {
        return Err(parse_err(
            mline,
            format!("manifest {expected:?} disagrees with contents {got:?}"),
        ));
    }
    Ok(params)
}

impl SegModel {
    pub fn save_checkpoint(&self, path: &Path) -> Result<(), CheckpointError> {
        std::fs::write(path, to_string(self.params()))?;
        Ok(())
    }

    /// Overwrites this model's parameters from a checkpoint with the same layout.
    pub fn load_checkpoint(&mut self, path: &Path) -> Result<(), CheckpointError> {
        let loaded = parse(&std::fs::read_to_string(path)?)?;
        self.apply_params(loaded)
    }

    pub fn apply_params(&mut self, loaded: Vec<Param>) -> Result<(), CheckpointError> {
        if loaded.len() != self.params().len() {
            return Err(CheckpointError::Mismatch(format!(
                "{} parameters in checkpoint, {} in model",
                loaded.len(),
                self.params().len()
            )));
        }
        for (have, got) in self.params().iter().zip(&loaded) {
            if have.name != got.name
                || have.partition != got.partition
                || have.value.shape() != got.value.shape()
            {
                return Err(CheckpointError::Mismatch(format!(
                    "parameter {} ({:?}, {:?}) vs {} ({:?}, {:?})",
                    have.name,
                    have.partition,
                    have.value.shape(),
                    got.name,
                    got.partition,
                    got.value.shape()
                )));
            }
        }
        for (slot, got) in self.params_mut().iter_mut().zip(loaded) {
            slot.value = got.value;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ModelConfig;

    #[test]
    fn round_trip_is_bit_exact() {
        let model = SegModel::new(ModelConfig {
            seed: 3,
            ..ModelConfig::default()
        })
        .unwrap();
        let text = to_string(model.params());
        assert!(text.starts_with("BLOFIN1\nmanifest frozen="));
        let parsed = parse(&text).unwrap();
        assert_eq!(parsed.len(), model.params().len());
        for (a, b) in parsed.iter().zip(model.params()) {
            assert_eq!(a.name, b.name);
            assert!(a.value.bit_eq(&b.value));
        }

        let mut other = SegModel::new(ModelConfig::default()).unwrap();
        other.apply_params(parsed).unwrap();
        for (a, b) in other.params().iter().zip(model.params()) {
            assert!(a.value.bit_eq(&b.value));
        }
    }

    #[test]
    fn rejects_bad_input() {
        assert!(parse("BLOFIN0\n").is_err());
        let model = SegModel::new(ModelConfig::default()).unwrap();
        let text = to_string(model.params()).replacen("prompt=1", "prompt=2", 1);
        assert!(matches!(
            parse(&text),
            Err(CheckpointError::Parse { line: 2, .. })
        ));

        let small = SegModel::new(ModelConfig {
            n_blocks: 1,
            ..ModelConfig::default()
        })
        .unwrap();
        let mut big = SegModel::new(ModelConfig::default()).unwrap();
        let parsed = parse(&to_string(small.params())).unwrap();
        assert!(matches!(
            big.apply_params(parsed),
            Err(CheckpointError::Mismatch(_))
        ));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.blofin");
        let model = SegModel::new(ModelConfig::default()).unwrap();
        model.save_checkpoint(&path).unwrap();
        let mut fresh = SegModel::new(ModelConfig {
            seed: 99,
            ..ModelConfig::default()
        })
        .unwrap();
        fresh.load_checkpoint(&path).unwrap();
        assert!(fresh.params()[0].value.bit_eq(&model.params()[0].value));
    }
}
