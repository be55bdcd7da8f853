//! Flat `key = value` run configuration.
//!
//! | key            | default      |
//! |----------------|--------------|
//! | dataset        | ucihar       |
//! | root           | data         |
//! | stage          | 1-static     |
//! | batch_size     | 64           |
//! | epochs         | 100 for stage 1, 50 for stage 2 |
//! | lr             | 0.001        |
//! | seed           | 42           |
//! | freeze_experts | true         |
//! | out            | model.ck     |
//!
//! `#` starts a comment. Unknown or repeated keys are errors.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::data::{DatasetKind, Superclass};
use crate::error::{Error, Result};
use crate::train::TrainConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Expert(Superclass),
    Fusion,
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "1-static" => Ok(Stage::Expert(Superclass::Static)),
            "1-dynamic" => Ok(Stage::Expert(Superclass::Dynamic)),
            "2" => Ok(Stage::Fusion),
            other => Err(Error::Config(format!(
                "unknown stage {other:?}; expected 1-static, 1-dynamic or 2"
            ))),
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Expert(Superclass::Static) => "1-static",
            Stage::Expert(Superclass::Dynamic) => "1-dynamic",
            Stage::Fusion => "2",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub dataset: DatasetKind,
    pub root: PathBuf,
    pub stage: Stage,
    pub batch_size: usize,
    /// `None` means the stage default.
    pub epochs: Option<usize>,
    pub lr: f64,
    pub seed: u64,
    pub freeze_experts: bool,
    pub out: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            dataset: DatasetKind::UciHar,
            root: PathBuf::from("data"),
            stage: Stage::Expert(Superclass::Static),
            batch_size: 64,
            epochs: None,
            lr: 1e-3,
            seed: 42,
            freeze_experts: true,
            out: PathBuf::from("model.ck"),
        }
    }
}

fn value<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("invalid value {v:?} for {key}")))
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut seen = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if seen.contains(&k) {
                return Err(Error::Config(format!("line {}: {k} given twice", n + 1)));
            }
            seen.push(k);
            match k {
                "dataset" => cfg.dataset = v.parse()?,
                "root" => cfg.root = PathBuf::from(v),
                "stage" => cfg.stage = v.parse()?,
                "batch_size" => cfg.batch_size = value(k, v)?,
                "epochs" => cfg.epochs = Some(value(k, v)?),
                "lr" => cfg.lr = value(k, v)?,
                "seed" => cfg.seed = value(k, v)?,
                "freeze_experts" => cfg.freeze_experts = value(k, v)?,
                "out" => cfg.out = PathBuf::from(v),
                other => return Err(Error::Config(format!("line {}: unknown key {other:?}", n + 1))),
            }
        }
        cfg.train_config().validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn train_config(&self) -> TrainConfig {
        let base = match self.stage {
            Stage::Expert(_) => TrainConfig::stage1(),
            Stage::Fusion => TrainConfig::stage2(),
        };
        TrainConfig {
            batch_size: self.batch_size,
            epochs: self.epochs.unwrap_or(base.epochs),
            lr: self.lr,
            seed: self.seed,
            freeze_experts: self.freeze_experts,
            ..base
        }
    }

    /// Effective settings as key/value pairs (paths excluded so that outputs
    /// do not depend on where the data lives).
    pub fn echo(&self) -> Vec<(String, String)> {
        let t = self.train_config();
        vec![
            ("dataset".into(), self.dataset.name().into()),
            ("stage".into(), self.stage.to_string()),
            ("batch_size".into(), t.batch_size.to_string()),
            ("epochs".into(), t.epochs.to_string()),
            ("lr".into(), t.lr.to_string()),
            ("seed".into(), t.seed.to_string()),
            ("freeze_experts".into(), t.freeze_experts.to_string()),
            ("val_fraction".into(), t.val_fraction.to_string()),
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_and_overrides() {
        let cfg = RunConfig::parse("").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.train_config().epochs, 100);
        let cfg = RunConfig::parse(
            "# comment\ndataset = motionsense\nstage=2 # trailing\nbatch_size=32\nlr=5e-4\nfreeze_experts=false\n",
        )
        .unwrap();
        assert_eq!(cfg.dataset, DatasetKind::MotionSense);
        assert_eq!(cfg.stage, Stage::Fusion);
        let t = cfg.train_config();
        assert_eq!((t.batch_size, t.epochs, t.lr, t.freeze_experts), (32, 50, 5e-4, false));
    }

    #[test]
    fn rejects_bad_input() {
        for text in [
            "colour = red",
            "epochs = 10\nepochs = 20",
            "batch_size = 1",
            "epochs = many",
            "stage = 3",
            "dataset = mnist",
            "just a line",
        ] {
            assert!(matches!(RunConfig::parse(text), Err(Error::Config(_))), "{text}");
        }
    }

    #[test]
    fn stage_names_round_trip() {
        for s in ["1-static", "1-dynamic", "2"] {
            assert_eq!(s.parse::<Stage>().unwrap().to_string(), s);
        }
    }
}
