//! Named-tensor checkpoint container shared by all trainable stages.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::binio::{self, Reader, Writer};
use crate::error::{format_err, invalid, Error, Result};
use crate::numerics::{ParamStore, Real, Tensor};

pub const CHECKPOINT_MAGIC: &[u8] = b"PQCK1\n";
const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Pqvae,
    Predictor,
    Refiner,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Pqvae => "pqvae",
            Stage::Predictor => "predictor",
            Stage::Refiner => "refiner",
        }
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Element type of a stored tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    fn width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub stage: Stage,
    /// Snapshot of the configuration the weights were trained with.
    pub config: serde_json::Value,
    pub seed: u64,
    pub tensors: Vec<(String, Tensor)>,
    /// Payload precision. `F64` keeps every value bit-exact.
    pub dtype: Dtype,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    version: u32,
    stage: Stage,
    config: serde_json::Value,
    seed: u64,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    dtype: Dtype,
    shape: Vec<usize>,
    /// Byte offset from the start of the payload.
    offset: u64,
    /// Byte length.
    length: u64,
}

impl Checkpoint {
    pub fn new(stage: Stage, config: serde_json::Value, seed: u64, store: &ParamStore) -> Self {
        Self {
            stage,
            config,
            seed,
            tensors: store.named_tensors(),
            dtype: Dtype::F64,
        }
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| invalid(format!("checkpoint has no tensor `{name}`")))
    }

    pub fn expect_stage(&self, stage: Stage) -> Result<()> {
        if self.stage != stage {
            return Err(Error::StageMismatch {
                expected: stage.to_string(),
                found: self.stage.to_string(),
            });
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let width = self.dtype.width() as u64;
        let mut offset = 0u64;
        let entries = self
            .tensors
            .iter()
            .map(|(name, t)| {
                let length = t.numel() as u64 * width;
                let e = TensorEntry {
                    name: name.clone(),
                    dtype: self.dtype,
                    shape: t.shape().to_vec(),
                    offset,
                    length,
                };
                offset += length;
                e
            })
            .collect();
        let manifest = Manifest {
            version: FORMAT_VERSION,
            stage: self.stage,
            config: self.config.clone(),
            seed: self.seed,
            tensors: entries,
        };
        let mut w = Writer::new(CHECKPOINT_MAGIC, &manifest)?;
        for (_, t) in &self.tensors {
            match self.dtype {
                Dtype::F32 => {
                    let v: Vec<f32> = t.data().iter().map(|&x| x as f32).collect();
                    w.f32s(&v);
                }
                Dtype::F64 => {
                    let v: Vec<f64> = t.data().iter().map(|&x| x as f64).collect();
                    w.f64s(&v);
                }
            }
        }
        Ok(w.finish())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (mut r, m): (Reader, Manifest) = Reader::open(bytes, CHECKPOINT_MAGIC)?;
        if m.version != FORMAT_VERSION {
            return Err(format_err(
                CHECKPOINT_MAGIC.len() as u64 + 4,
                format!("unsupported checkpoint version {}", m.version),
            ));
        }
        let payload_start = r.offset();
        let mut dtype = Dtype::F64;
        let mut tensors = Vec::with_capacity(m.tensors.len());
        for e in m.tensors {
            let numel: usize = e.shape.iter().product();
            let at = r.offset();
            if at - payload_start != e.offset || e.length != (numel * e.dtype.width()) as u64 {
                return Err(format_err(
                    at,
                    format!("tensor `{}` has inconsistent offset or length", e.name),
                ));
            }
            let data: Vec<Real> = match e.dtype {
                Dtype::F32 => r
                    .f32s(numel, &e.name)?
                    .into_iter()
                    .map(|x| x as Real)
                    .collect(),
                Dtype::F64 => r
                    .f64s(numel, &e.name)?
                    .into_iter()
                    .map(|x| x as Real)
                    .collect(),
            };
            dtype = e.dtype;
            tensors.push((e.name, Tensor::new(e.shape, data)?));
        }
        r.finish()?;
        Ok(Self {
            stage: m.stage,
            config: m.config,
            seed: m.seed,
            tensors,
            dtype,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        binio::write_file(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.display().to_string()));
        }
        Self::from_bytes(&binio::read_file(path)?)
    }

    /// Load and check that the file holds the expected stage.
    pub fn load_stage(path: &Path, stage: Stage) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(format!(
                "{stage} checkpoint {}",
                path.display()
            )));
        }
        let ck = Self::load(path)?;
        ck.expect_stage(stage)?;
        Ok(ck)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        Checkpoint {
            stage: Stage::Predictor,
            config: serde_json::json!({"a": 1, "b": [0.1, 2]}),
            seed: 9,
            tensors: vec![
                ("w".into(), Tensor::matrix(2, 2, vec![0.1, -3.5, 1e-300, 7.0]).unwrap()),
                ("b".into(), Tensor::vector(vec![std::f64::consts::PI as Real])),
            ],
            dtype: Dtype::F64,
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let ck = sample();
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn f32_payload_rounds() {
        let mut ck = sample();
        ck.dtype = Dtype::F32;
        let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
        assert_eq!(back.dtype, Dtype::F32);
        assert_eq!(back.tensors[1].1.data()[0], std::f32::consts::PI as Real);
    }

    #[test]
    fn truncation_and_stage_errors() {
        let bytes = sample().to_bytes().unwrap();
        for cut in [3, 12, bytes.len() - 1] {
            assert!(matches!(
                Checkpoint::from_bytes(&bytes[..cut]),
                Err(Error::Format { .. })
            ));
        }
        let ck = Checkpoint::from_bytes(&bytes).unwrap();
        assert!(matches!(
            ck.expect_stage(Stage::Refiner),
            Err(Error::StageMismatch { .. })
        ));
    }
}
