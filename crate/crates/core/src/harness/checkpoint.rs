use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::write_atomic;
use crate::curriculum::PhaseTag;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams};
use crate::numcore::{AdamConfig, OptimizerState, Tensor};

const MAGIC: &[u8; 8] = b"TCLNATCK";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct OptimizerHeader {
    config: AdamConfig,
    step: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    config_hash: String,
    vocab_fingerprint: String,
    model: ModelConfig,
    step: u64,
    phase: Option<PhaseTag>,
    tensors: Vec<TensorEntry>,
    optimizer: Option<OptimizerHeader>,
}

/// Model weights plus everything needed to resume training.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub optimizer: Option<OptimizerState>,
    /// Completed training steps.
    pub step: u64,
    /// Phase of the last completed step.
    pub phase: Option<PhaseTag>,
    pub config_hash: String,
    pub vocab_fingerprint: String,
}

fn push_f64s(out: &mut Vec<u8>, values: &[f64]) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

impl Checkpoint {
    /// `MAGIC | version u32 | header length u64 | JSON header | f64 LE data`.
    /// Data order: every tensor, then Adam first moments, then second moments.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let w = &self.params.weights;
        let names = w.names();
        let tensors: Vec<&Tensor> = w.flatten();
        let header = Header {
            format_version: FORMAT_VERSION,
            config_hash: self.config_hash.clone(),
            vocab_fingerprint: self.vocab_fingerprint.clone(),
            model: self.params.config.clone(),
            step: self.step,
            phase: self.phase,
            tensors: names
                .into_iter()
                .zip(&tensors)
                .map(|(name, t)| TensorEntry {
                    name,
                    shape: t.shape().to_vec(),
                })
                .collect(),
            optimizer: self.optimizer.as_ref().map(|o| OptimizerHeader {
                config: o.config.clone(),
                step: o.step,
            }),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(json.len() + 24 + 24 * w.flatten().iter().map(|t| t.len()).sum::<usize>());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for t in &tensors {
            push_f64s(&mut out, t.data());
        }
        if let Some(o) = &self.optimizer {
            for m in &o.m {
                push_f64s(&mut out, m);
            }
            for v in &o.v {
                push_f64s(&mut out, v);
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |msg: &str| Error::Checkpoint(msg.to_owned());
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(20..).ok_or_else(|| bad("truncated header"))?;
        let json = body.get(..hlen).ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(json)?;
        let mut data = body[hlen..].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
        if (body.len() - hlen) % 8 != 0 {
            return Err(bad("data section is not a whole number of f64 values"));
        }
        let sizes: Vec<usize> = header.tensors.iter().map(|t| t.shape.iter().product()).collect();
        let mut take = |n: usize| -> Result<Vec<f64>> {
            let v: Vec<f64> = data.by_ref().take(n).collect();
            if v.len() == n {
                Ok(v)
            } else {
                Err(bad("truncated data section"))
            }
        };
        let mut tensors = Vec::with_capacity(sizes.len());
        for (entry, &n) in header.tensors.iter().zip(&sizes) {
            tensors.push(Tensor::new(entry.shape.clone(), take(n)?)?);
        }
        let params = ModelParams::from_tensors(header.model.clone(), tensors)?;
        if params.weights.names() != header.tensors.iter().map(|t| t.name.clone()).collect::<Vec<_>>() {
            return Err(bad("tensor names do not match the model layout"));
        }
        let optimizer = match header.optimizer {
            Some(o) => {
                let m = sizes.iter().map(|&n| take(n)).collect::<Result<Vec<_>>>()?;
                let v = sizes.iter().map(|&n| take(n)).collect::<Result<Vec<_>>>()?;
                Some(OptimizerState {
                    config: o.config,
                    d_model: header.model.d_model,
                    step: o.step,
                    m,
                    v,
                })
            }
            None => None,
        };
        if data.next().is_some() {
            return Err(bad("trailing data after the last array"));
        }
        Ok(Checkpoint {
            params,
            optimizer,
            step: header.step,
            phase: header.phase,
            config_hash: header.config_hash,
            vocab_fingerprint: header.vocab_fingerprint,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Hex SHA-256 of the serialised checkpoint.
    pub fn digest(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.to_bytes()?)))
    }

    pub fn check_config(&self, expected: &str) -> Result<()> {
        if self.config_hash != expected {
            return Err(Error::Checkpoint(format!(
                "config hash mismatch: checkpoint {} vs config {}",
                self.config_hash, expected
            )));
        }
        Ok(())
    }

    pub fn check_vocab(&self, fingerprint: &str) -> Result<()> {
        if self.vocab_fingerprint != fingerprint {
            return Err(Error::Checkpoint(format!(
                "vocabulary mismatch: checkpoint {} vs corpus {} (config hash {})",
                self.vocab_fingerprint, fingerprint, self.config_hash
            )));
        }
        Ok(())
    }
}
