//! Root run configuration and the shipped profiles.
//!
//! Defaults follow the paper where it gives a value (K=128, G=4, β=0.25,
//! T=8, AdamW lr 1e-4 with betas 0.9/0.99, batch 128, 100 epochs). The desk
//! profile shrinks the models so the full ablation grid runs on one core.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::CorpusConfig;
use crate::error::{Error, Result};
use crate::motion::Part;
use crate::numerics::{AdamWConfig, NormKind};
use crate::pqvae::PqVaeConfig;
use crate::predictor::PredictorConfig;
use crate::refiner::RefinerConfig;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitConfig {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            train: 0.8,
            val: 0.1,
            test: 0.1,
        }
    }
}

impl SplitConfig {
    pub fn fractions(&self) -> [f64; 3] {
        [self.train, self.val, self.test]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Samples per test condition for the variance metric.
    pub samples: usize,
    /// Samples per test condition for best-of-S MAE.
    pub best_of: usize,
    /// Parts whose FGD is reported; each needs its own feature PQ-VAE.
    pub fgd_parts: Vec<Part>,
    /// Sequence length used for throughput runs.
    pub bench_frames: usize,
    pub bench_runs: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            samples: 10,
            best_of: 32,
            fgd_parts: vec![Part::Holistic, Part::Body, Part::Face],
            bench_frames: 128,
            bench_runs: 10,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    /// Codebook sizes of the K × G grid.
    pub codes: Vec<usize>,
    pub groups: Vec<usize>,
    /// Decoding iterations of the T sweep.
    pub iterations: Vec<usize>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            codes: vec![32],
            groups: vec![1, 2, 4],
            iterations: vec![1, 2, 4, 8, 16],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub corpus: CorpusConfig,
    pub split: SplitConfig,
    pub pqvae: PqVaeConfig,
    pub predictor: PredictorConfig,
    pub refiner: RefinerConfig,
    pub eval: EvalConfig,
    pub ablation: AblationConfig,
}

impl Config {
    /// Paper hyperparameters; not trainable on one core in reasonable time.
    pub fn paper() -> Self {
        Self::default()
    }

    /// Small models and short schedules for a single CPU core.
    pub fn desk() -> Self {
        let mut c = Self::default();
        c.pqvae = PqVaeConfig {
            codes: 32,
            hidden: 64,
            norm: NormKind::Layer,
            epochs: 20,
            batch_size: 8,
            optimizer: AdamWConfig {
                lr: 3e-3,
                ..Default::default()
            },
            ..Default::default()
        };
        c.predictor = PredictorConfig {
            blocks: 2,
            context_layers: 4,
            norm: NormKind::Layer,
            epochs: 40,
            batch_size: 16,
            optimizer: AdamWConfig {
                lr: 1e-4,
                ..Default::default()
            },
            ..Default::default()
        };
        c.refiner = RefinerConfig {
            blocks: 2,
            epochs: 40,
            batch_size: 16,
            optimizer: AdamWConfig {
                lr: 2e-3,
                ..Default::default()
            },
            ..Default::default()
        };
        c
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |e: Error| match e {
            Error::Config(_) => e,
            other => Error::Config(other.to_string()),
        };
        self.corpus.validate().map_err(cfg)?;
        self.pqvae.validate().map_err(cfg)?;
        self.predictor.validate()?;
        self.refiner.validate()?;
        let f = self.split.fractions();
        if f.iter().any(|x| !(0.0..=1.0).contains(x)) || (f.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("split fractions {f:?} must be in [0,1] and sum to 1")));
        }
        if self.eval.samples < 2 || self.eval.best_of == 0 || self.eval.bench_runs == 0 || self.eval.bench_frames == 0 {
            return Err(Error::Config(
                "eval.samples must be >= 2 and best_of, bench_runs, bench_frames positive".into(),
            ));
        }
        if self.ablation.codes.contains(&0) || self.ablation.groups.contains(&0) || self.ablation.iterations.contains(&0) {
            return Err(Error::Config("ablation grids must contain positive values".into()));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let c: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(crate::error::io_err(path))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn profiles_validate_and_round_trip() {
        for c in [Config::paper(), Config::desk()] {
            c.validate().unwrap();
            assert_eq!(Config::from_json(&c.to_json()).unwrap(), c);
        }
        let p = Config::paper();
        assert_eq!((p.pqvae.codes, p.pqvae.groups, p.predictor.schedule.iterations), (128, 4, 8));
        assert_eq!(p.pqvae.optimizer.lr, 1e-4);
    }

    #[test]
    fn rejects_unknown_fields_and_bad_splits() {
        assert!(matches!(Config::from_json(r#"{"pqvae": {"codez": 3}}"#), Err(Error::Config(_))));
        assert!(Config::from_json(r#"{"split": {"train": 0.5, "val": 0.1, "test": 0.1}}"#).is_err());
        assert_eq!(Config::from_json("{}").unwrap(), Config::default());
    }
}
