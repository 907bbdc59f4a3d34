//! Self-contained model files: configuration, vocabularies and weights in a
//! JSON envelope, tensors stored as base64 little-endian `f32`.

use std::fs;
use std::path::Path;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::decode::Translator;
use super::vocab::{CharVocab, VocabKind};
use super::weights::{Layout, Weights};
use super::NeuralError;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub source_vocab: CharVocab,
    pub target_vocab: CharVocab,
    pub weights: Weights<f32>,
    pub best_val_loss: f64,
    /// Epoch (1-based) that produced these weights.
    pub epoch: usize,
}

#[derive(Serialize, Deserialize)]
struct Vocabs {
    source: CharVocab,
    target: CharVocab,
}

#[derive(Serialize, Deserialize)]
struct TensorRecord {
    name: String,
    shape: Vec<usize>,
    data: String,
}

#[derive(Serialize, Deserialize)]
struct Envelope {
    version: u32,
    config: ModelConfig,
    vocabs: Vocabs,
    tensors: Vec<TensorRecord>,
    best_val_loss: f64,
    epoch: usize,
}

impl Checkpoint {
    pub fn translator(&self) -> Translator<'_, f32> {
        Translator::new(&self.config, &self.weights, &self.source_vocab, &self.target_vocab)
    }

    pub fn to_json(&self) -> String {
        let tensors = self
            .weights
            .layout
            .shapes()
            .into_iter()
            .zip(self.weights.slices())
            .map(|((name, shape), data)| {
                let bytes: Vec<u8> = data.iter().flat_map(|v| v.to_le_bytes()).collect();
                TensorRecord { name, shape, data: STANDARD.encode(bytes) }
            })
            .collect();
        let env = Envelope {
            version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            vocabs: Vocabs { source: self.source_vocab.clone(), target: self.target_vocab.clone() },
            tensors,
            best_val_loss: self.best_val_loss,
            epoch: self.epoch,
        };
        serde_json::to_string(&env).expect("checkpoint serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, NeuralError> {
        let env: Envelope = serde_json::from_str(text).map_err(|e| NeuralError::Format(e.to_string()))?;
        if env.version != CHECKPOINT_VERSION {
            return Err(NeuralError::Format(format!("unsupported version {}", env.version)));
        }
        env.config.validate()?;
        if env.vocabs.source.kind() != VocabKind::Source || env.vocabs.target.kind() != VocabKind::Target {
            return Err(NeuralError::Format("vocabulary kinds are swapped".into()));
        }
        let layout = Layout::new(&env.config, env.vocabs.source.len(), env.vocabs.target.len());
        let expected = layout.shapes();
        if expected.len() != env.tensors.len() {
            return Err(NeuralError::Format(format!(
                "expected {} tensors, found {}",
                expected.len(),
                env.tensors.len()
            )));
        }
        let mut decoded = Vec::with_capacity(expected.len());
        for ((name, shape), t) in expected.iter().zip(&env.tensors) {
            if name != &t.name || shape != &t.shape {
                return Err(NeuralError::Format(format!(
                    "tensor {} {:?} does not match expected {} {:?}",
                    t.name, t.shape, name, shape
                )));
            }
            let bytes = STANDARD.decode(&t.data).map_err(|e| NeuralError::Format(format!("{name}: {e}")))?;
            if bytes.len() != 4 * shape.iter().product::<usize>() {
                return Err(NeuralError::Format(format!("{name}: wrong data length")));
            }
            decoded.push(bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect::<Vec<_>>());
        }
        let mut it = decoded.into_iter();
        let weights = Weights::build(layout, |_, _| it.next().expect("counted"));
        Ok(Checkpoint {
            config: env.config,
            source_vocab: env.vocabs.source,
            target_vocab: env.vocabs.target,
            weights,
            best_val_loss: env.best_val_loss,
            epoch: env.epoch,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), NeuralError> {
        fs::write(path, self.to_json()).map_err(|source| NeuralError::Io { path: path.to_path_buf(), source })
    }

    pub fn load(path: &Path) -> Result<Self, NeuralError> {
        let text = fs::read_to_string(path).map_err(|source| NeuralError::Io { path: path.to_path_buf(), source })?;
        Checkpoint::from_json(&text)
    }
}
