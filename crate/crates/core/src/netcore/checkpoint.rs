//! Single-file checkpoints.
//!
//! Layout: the magic bytes `ONHWCKPT`, the header length as a little-endian
//! `u64`, a JSON header, then every tensor as little-endian `f64` values in
//! manifest order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::adam::AdamState;
use super::model::{BatchNormState, Model, ModelConfig};
use super::tensor::Tensor;
use super::train::{LossSelector, TrainConfig, Trainer};
use crate::dataio::Alphabet;
use crate::error::{Error, Result};
use crate::losses::LossParams;

const MAGIC: &[u8; 8] = b"ONHWCKPT";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    /// Offset in values (not bytes) from the start of the block.
    offset: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TrainingHeader {
    config: TrainConfig,
    loss: LossSelector,
    loss_params: LossParams,
    epoch: usize,
    adam_step: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    version: u32,
    model_config: ModelConfig,
    alphabet: Option<Alphabet>,
    batchnorm_initialized: Option<bool>,
    training: Option<TrainingHeader>,
    manifest: Vec<ManifestEntry>,
}

/// Optimizer and schedule state needed to resume training.
#[derive(Debug, Clone)]
pub struct TrainingState {
    pub config: TrainConfig,
    pub loss: LossSelector,
    pub loss_params: LossParams,
    pub optimizer: AdamState,
    pub epoch: usize,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: Model,
    pub alphabet: Option<Alphabet>,
    pub training: Option<TrainingState>,
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::Format {
        line: 0,
        msg: format!("checkpoint: {}", msg.into()),
    }
}

impl Checkpoint {
    pub fn from_trainer(trainer: &Trainer, alphabet: Option<Alphabet>) -> Self {
        Checkpoint {
            model: trainer.model.clone(),
            alphabet,
            training: Some(TrainingState {
                config: trainer.config.clone(),
                loss: trainer.loss,
                loss_params: trainer.loss_params.clone(),
                optimizer: trainer.optimizer.clone(),
                epoch: trainer.epoch,
            }),
        }
    }

    pub fn into_trainer(self) -> Result<Trainer> {
        let Some(t) = self.training else {
            return Err(Error::State("checkpoint holds no training state".into()));
        };
        Trainer::resume(self.model, t.optimizer, t.config, t.loss, t.loss_params, t.epoch)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut manifest = Vec::new();
        let mut block: Vec<f64> = Vec::new();
        let mut put = |name: String, shape: Vec<usize>, data: &[f64]| {
            manifest.push(ManifestEntry {
                name,
                shape,
                offset: block.len(),
            });
            block.extend_from_slice(data);
        };
        for (name, t) in self.model.param_names().iter().zip(self.model.params()) {
            put(format!("param/{name}"), t.shape().to_vec(), t.data());
        }
        let bn = self.model.batchnorm_state();
        if let Some(st) = bn {
            put("bn/running_mean".into(), vec![st.running_mean.len()], &st.running_mean);
            put("bn/running_var".into(), vec![st.running_var.len()], &st.running_var);
        }
        if let Some(tr) = &self.training {
            for (i, name) in self.model.param_names().iter().enumerate() {
                let shape = self.model.params()[i].shape().to_vec();
                put(format!("adam.m/{name}"), shape.clone(), &tr.optimizer.m[i]);
                put(format!("adam.v/{name}"), shape, &tr.optimizer.v[i]);
            }
        }
        let header = Header {
            version: VERSION,
            model_config: self.model.config().clone(),
            alphabet: self.alphabet.clone(),
            batchnorm_initialized: bn.map(|s| s.initialized),
            training: self.training.as_ref().map(|t| TrainingHeader {
                config: t.config.clone(),
                loss: t.loss,
                loss_params: t.loss_params.clone(),
                epoch: t.epoch,
                adam_step: t.optimizer.step,
            }),
            manifest,
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(16 + json.len() + 8 * block.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for v in block {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(corrupt("missing magic bytes"));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(16..).ok_or_else(|| corrupt("truncated"))?;
        if body.len() < hlen {
            return Err(corrupt("truncated header"));
        }
        let header: Header = serde_json::from_slice(&body[..hlen])?;
        if header.version != VERSION {
            return Err(corrupt(format!("unsupported version {}", header.version)));
        }
        let raw = &body[hlen..];
        if raw.len() % 8 != 0 {
            return Err(corrupt("parameter block is not a whole number of f64 values"));
        }
        let block: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let get = |name: &str| -> Result<Tensor> {
            let e = header
                .manifest
                .iter()
                .find(|e| e.name == name)
                .ok_or_else(|| corrupt(format!("manifest lacks {name}")))?;
            let n: usize = e.shape.iter().product();
            let data = block
                .get(e.offset..e.offset + n)
                .ok_or_else(|| corrupt(format!("{name} runs past the parameter block")))?;
            Tensor::new(e.shape.clone(), data.to_vec())
        };

        let template = Model::new(header.model_config.clone(), 0)?;
        let params = template
            .param_names()
            .iter()
            .map(|n| Ok((n.clone(), get(&format!("param/{n}"))?)))
            .collect::<Result<Vec<_>>>()?;
        let bn = match header.batchnorm_initialized {
            Some(initialized) => Some(BatchNormState {
                running_mean: get("bn/running_mean")?.into_data(),
                running_var: get("bn/running_var")?.into_data(),
                initialized,
            }),
            None => None,
        };
        let model = Model::from_parts(header.model_config, params, bn)?;
        let training = match header.training {
            Some(t) => {
                let mut m = Vec::new();
                let mut v = Vec::new();
                for n in model.param_names() {
                    m.push(get(&format!("adam.m/{n}"))?.into_data());
                    v.push(get(&format!("adam.v/{n}"))?.into_data());
                }
                Some(TrainingState {
                    config: t.config,
                    loss: t.loss,
                    loss_params: t.loss_params,
                    optimizer: AdamState { m, v, step: t.adam_step },
                    epoch: t.epoch,
                })
            }
            None => None,
        };
        Ok(Checkpoint {
            model,
            alphabet: header.alphabet,
            training,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Checkpoint::from_bytes(&fs::read(path)?)
    }
}
