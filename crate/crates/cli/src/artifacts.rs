//! Layout of a run directory and the overwrite/resume rules.

use std::path::{Path, PathBuf};

use pqmotion::checkpoint::{Checkpoint, Stage};
use pqmotion::config::Config;
use pqmotion::corpus::{read_corpus, split, Corpus};
use pqmotion::experiment::Splits;
use pqmotion::pipeline::Pipeline;
use pqmotion::pqvae::PqVae;
use pqmotion::predictor::Predictor;
use pqmotion::refiner::Refiner;
use serde_json::Value;

use crate::CliError;

pub const CORPUS: &str = "corpus.pqmc";
pub const CONFIG: &str = "config.json";

pub fn checkpoint_name(stage: Stage) -> String {
    format!("{stage}.ckpt")
}

/// Which command produces a missing artifact.
fn producer(name: &str) -> &'static str {
    match name {
        CORPUS => "gen-corpus",
        "pqvae.ckpt" => "train-pqvae",
        "predictor.ckpt" => "train-predictor",
        "refiner.ckpt" => "train-refiner",
        _ => "an earlier stage",
    }
}

pub struct RunDir {
    pub root: PathBuf,
    pub force: bool,
}

impl RunDir {
    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    /// Path of an input artifact, which must already exist.
    pub fn require(&self, name: &str) -> Result<PathBuf, CliError> {
        let p = self.path(name);
        if p.exists() {
            Ok(p)
        } else {
            Err(CliError::MissingArtifact {
                path: p,
                producer: producer(name),
            })
        }
    }

    /// Path of an output, refusing to replace an existing one unless forced.
    pub fn output(&self, name: &str) -> Result<PathBuf, CliError> {
        let p = self.path(name);
        if p.exists() && !self.force {
            return Err(CliError::Exists(p));
        }
        if p.is_dir() {
            std::fs::remove_dir_all(&p).map_err(|e| io(&p, e))?;
        }
        Ok(p)
    }

    pub fn corpus(&self) -> Result<Corpus, CliError> {
        Ok(read_corpus(&self.require(CORPUS)?)?)
    }

    /// Train/validation/test split; the split seed is the corpus seed.
    pub fn splits(&self, cfg: &Config) -> Result<Splits, CliError> {
        let corpus = self.corpus()?;
        let (train, val, test) = split(&corpus, cfg.split.fractions(), corpus.meta.seed)?;
        Ok(Splits { train, val, test })
    }

    pub fn checkpoint(&self, stage: Stage) -> Result<Checkpoint, CliError> {
        Ok(Checkpoint::load_stage(&self.require(&checkpoint_name(stage))?, stage)?)
    }

    pub fn pqvae(&self) -> Result<PqVae, CliError> {
        Ok(PqVae::from_checkpoint(&self.checkpoint(Stage::Pqvae)?)?)
    }

    pub fn pipeline(&self) -> Result<Pipeline, CliError> {
        let pqvae = self.pqvae()?;
        let predictor = Predictor::from_checkpoint(&self.checkpoint(Stage::Predictor)?)?;
        let refiner = Refiner::from_checkpoint(&self.checkpoint(Stage::Refiner)?)?;
        Ok(Pipeline::new(pqvae, predictor, Some(refiner))?)
    }
}

pub fn io(path: &Path, source: std::io::Error) -> CliError {
    CliError::Core(pqmotion::Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Leaf-level differences between two JSON values as `path: old -> new`.
pub fn json_diff(old: &Value, new: &Value) -> Vec<String> {
    let mut out = Vec::new();
    walk("", old, new, &mut out);
    out
}

fn walk(path: &str, a: &Value, b: &Value, out: &mut Vec<String>) {
    match (a, b) {
        (Value::Object(x), Value::Object(y)) => {
            let mut keys: Vec<&String> = x.keys().chain(y.keys()).collect();
            keys.sort();
            keys.dedup();
            for k in keys {
                let p = if path.is_empty() {
                    k.clone()
                } else {
                    format!("{path}.{k}")
                };
                walk(&p, x.get(k).unwrap_or(&Value::Null), y.get(k).unwrap_or(&Value::Null), out);
            }
        }
        _ if a != b => out.push(format!("{path}: {a} -> {b}")),
        _ => {}
    }
}
