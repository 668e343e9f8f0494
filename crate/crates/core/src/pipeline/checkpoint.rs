//! Single-file checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! b"MNERCKPT"  u32 version  u64 header_len  header (JSON)  f64 data...
//! ```
//!
//! The header lists every tensor by name and shape; the data section holds
//! their values back to back in that order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Vocab;
use crate::error::{Error, Result};
use crate::eval::EntityInventory;

use super::config::ExperimentConfig;
use super::model::{Model, ModelSpec};

pub const MAGIC: &[u8; 8] = b"MNERCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainingMetadata {
    pub epochs_run: usize,
    /// 1-based epoch whose parameters were kept; 0 when untrained.
    pub best_epoch: usize,
    pub dev_f1_history: Vec<f64>,
    pub train_loss_history: Vec<f64>,
    /// Training-set (surface, type) pairs, for seen/unseen breakdowns.
    pub inventory: EntityInventory,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    spec: ModelSpec,
    config: ExperimentConfig,
    vocab: String,
    metadata: TrainingMetadata,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: Model,
    pub config: ExperimentConfig,
    pub metadata: TrainingMetadata,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let store = &self.model.store;
        let header = Header {
            spec: self.model.spec.clone(),
            config: self.config.clone(),
            vocab: self.model.vocab.to_json()?,
            metadata: self.metadata.clone(),
            tensors: store
                .iter()
                .map(|(name, t)| TensorEntry {
                    name: name.to_string(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(20 + json.len() + 8 * store.num_scalars());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in store.iter() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    /// Rebuilds the model from its spec and overwrites every parameter by name.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let header_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(20..20usize.saturating_add(header_len)).ok_or_else(|| bad("truncated header"))?;
        let header: Header =
            serde_json::from_slice(body).map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
        let vocab = Vocab::from_json(&header.vocab)?;
        let mut model = Model::new(header.spec, vocab, 0)?;

        let mut data = &bytes[20 + header_len..];
        let mut seen = 0;
        for entry in &header.tensors {
            let id = model
                .store
                .id(&entry.name)
                .ok_or_else(|| Error::Checkpoint(format!("unknown tensor {}", entry.name)))?;
            let shape = model.store.get(id).shape();
            if shape != entry.shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "tensor {} has shape {:?}, model expects {shape:?}",
                    entry.name, entry.shape
                )));
            }
            let n: usize = entry.shape.iter().product();
            if data.len() < 8 * n {
                return Err(Error::Checkpoint(format!("truncated data for {}", entry.name)));
            }
            let values = data[..8 * n]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            model.store.set_data(id, values)?;
            data = &data[8 * n..];
            seen += 1;
        }
        if seen != model.store.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {seen} tensors, model has {}",
                model.store.len()
            )));
        }
        if !data.is_empty() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", data.len())));
        }
        Ok(Self {
            model,
            config: header.config,
            metadata: header.metadata,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth::{generate_synthetic, SynthConfig};
    use crate::data::VocabConfig;
    use crate::encoder::EncoderConfig;
    use crate::pipeline::config::ModelKind;

    fn checkpoint() -> (Checkpoint, crate::data::synth::SynthCorpus) {
        let corpus = generate_synthetic(&SynthConfig {
            n_train: 10,
            n_dev: 2,
            n_test: 4,
            feature_dim: 8,
            ..SynthConfig::default()
        })
        .unwrap();
        let mut config = ExperimentConfig::for_model(ModelKind::BertCamCrf);
        config.encoder = EncoderConfig {
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            d_ff: 8,
            max_len: 48,
            char_dim: 3,
            char_filters: 3,
            dropout: 0.0,
        };
        let vocab = Vocab::build(&corpus.train, &VocabConfig::default()).unwrap();
        let spec = ModelSpec::from_config(&config, Some(8)).unwrap();
        let model = Model::new(spec, vocab, 11).unwrap();
        let metadata = TrainingMetadata {
            epochs_run: 2,
            best_epoch: 1,
            dev_f1_history: vec![0.25, 0.125],
            train_loss_history: vec![3.0, 2.0],
            inventory: EntityInventory::from_sentences(&corpus.train),
        };
        (Checkpoint { model, config, metadata }, corpus)
    }

    #[test]
    fn round_trip_is_bitwise() {
        let (ck, corpus) = checkpoint();
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes().unwrap(), bytes);
        assert_eq!(back.metadata, ck.metadata);
        let table = corpus.global_table();
        let a = ck.model.inputs(&corpus.test, Some(&table)).unwrap();
        let b = back.model.inputs(&corpus.test, Some(&table)).unwrap();
        for (x, y) in a.iter().zip(&b) {
            let ea: Vec<u64> = ck.model.emission_scores(x).unwrap().iter().map(|v| v.to_bits()).collect();
            let eb: Vec<u64> = back.model.emission_scores(y).unwrap().iter().map(|v| v.to_bits()).collect();
            assert_eq!(ea, eb);
        }
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let (ck, _) = checkpoint();
        let bytes = ck.to_bytes().unwrap();
        assert!(matches!(Checkpoint::from_bytes(b"nope"), Err(Error::Checkpoint(_))));
        assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]), Err(Error::Checkpoint(_))));
        let mut v2 = bytes.clone();
        v2[8] = 9;
        assert!(matches!(Checkpoint::from_bytes(&v2), Err(Error::Checkpoint(_))));
        let mut extra = bytes;
        extra.push(0);
        assert!(matches!(Checkpoint::from_bytes(&extra), Err(Error::Checkpoint(_))));
    }
}
