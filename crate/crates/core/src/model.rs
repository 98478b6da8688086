//! The full set of trainable networks plus the binary checkpoint format.
//!
//! Checkpoint layout: `ESRC`, u32 version, u64 header length, JSON header,
//! then every parameter tensor as little-endian f64 in header order.

use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor};
use crate::corpus::FeatureSequence;
use crate::encoders::{
    embeddings_from_rows, Embedding, Modality, Pooling, SpeechEncoder, TextEncoder,
};
use crate::nn::{Bound, ParamGroup, ParamStore};
use crate::objectives::{Discriminator, StyleClassifier, Temperature};
use crate::prompts::Vocabulary;
use crate::{Error, Result, StyleRegistry};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"ESRC";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Utterances encoded per graph when embedding many clips.
const ENCODE_CHUNK: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_mels: usize,
    pub speech_hidden: usize,
    pub text_hidden: usize,
    pub dim: usize,
    pub disc_hidden: usize,
    pub cls_hidden: usize,
    pub pooling: Pooling,
    pub tau_init: f64,
    /// When false no discriminator parameters exist at all.
    pub discriminator: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_mels: crate::corpus::DEFAULT_N_MELS,
            speech_hidden: 128,
            text_hidden: 64,
            dim: 64,
            disc_hidden: 128,
            cls_hidden: 128,
            pooling: Pooling::Mean,
            tau_init: 0.07,
            discriminator: true,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.n_mels,
            self.speech_hidden,
            self.text_hidden,
            self.dim,
            self.disc_hidden,
            self.cls_hidden,
        ];
        if dims.contains(&0) {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if !(self.tau_init > 0.0 && self.tau_init.is_finite()) {
            return Err(Error::Config(format!(
                "tau_init must be positive, got {}",
                self.tau_init
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct ModelBundle {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub speech: SpeechEncoder,
    pub text: TextEncoder,
    pub temperature: Temperature,
    pub classifier: StyleClassifier,
    pub discriminator: Option<Discriminator>,
    pub registry: StyleRegistry,
    pub vocab: Vocabulary,
}

impl ModelBundle {
    /// Freshly initialized networks. Parameters are created in a fixed order
    /// with the discriminator last, so toggling it leaves every other
    /// initial value unchanged.
    pub fn new(config: ModelConfig, registry: StyleRegistry, vocab: Vocabulary) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let speech = SpeechEncoder::new(
            &mut store,
            config.n_mels,
            config.speech_hidden,
            config.dim,
            &mut rng,
        );
        let text = TextEncoder::new(
            &mut store,
            vocab.len(),
            config.text_hidden,
            config.dim,
            config.pooling,
            &mut rng,
        );
        let temperature = Temperature::new(&mut store, config.tau_init);
        let classifier = StyleClassifier::new(
            &mut store,
            config.dim,
            config.cls_hidden,
            registry.len(),
            &mut rng,
        );
        let discriminator = config
            .discriminator
            .then(|| Discriminator::new(&mut store, config.dim, config.disc_hidden, &mut rng));
        Ok(Self {
            config,
            store,
            speech,
            text,
            temperature,
            classifier,
            discriminator,
            registry,
            vocab,
        })
    }

    pub fn dim(&self) -> usize {
        self.config.dim
    }

    pub fn tau(&self) -> f64 {
        self.temperature.tau(&self.store)
    }

    pub fn has_group(&self, group: ParamGroup) -> bool {
        self.store.in_group(group).next().is_some()
    }

    pub fn encode_speech(&self, feats: &FeatureSequence) -> Result<Embedding> {
        Ok(self.encode_speech_batch(&[feats])?.remove(0))
    }

    pub fn encode_speech_batch(&self, feats: &[&FeatureSequence]) -> Result<Vec<Embedding>> {
        let mut out = Vec::with_capacity(feats.len());
        for chunk in feats.chunks(ENCODE_CHUNK) {
            let mut g = Graph::new();
            let b = Bound::frozen(&mut g, &self.store);
            let e = self.speech.forward_batch(&mut g, &b, chunk)?;
            out.extend(embeddings_from_rows(g.value(e), Modality::Speech)?);
        }
        Ok(out)
    }

    /// Tokenizes with the model vocabulary, so arbitrary text is accepted.
    pub fn encode_text(&self, text: &str) -> Result<Embedding> {
        Ok(self.encode_texts(&[text])?.remove(0))
    }

    pub fn encode_texts<S: AsRef<str>>(&self, texts: &[S]) -> Result<Vec<Embedding>> {
        let mut out = Vec::with_capacity(texts.len());
        for chunk in texts.chunks(ENCODE_CHUNK) {
            let tokens: Vec<_> = chunk
                .iter()
                .map(|t| self.vocab.tokenize(t.as_ref()))
                .collect();
            let mut g = Graph::new();
            let b = Bound::frozen(&mut g, &self.store);
            let e = self.text.forward_batch(&mut g, &b, &tokens)?;
            out.extend(embeddings_from_rows(g.value(e), Modality::Text)?);
        }
        Ok(out)
    }

    /// Classifier logits, one row per embedding and one column per style.
    pub fn classifier_logits(&self, embeddings: &[&[f64]]) -> Result<Tensor> {
        if embeddings.is_empty() {
            return Ok(Tensor::zeros(0, self.registry.len()));
        }
        let rows: Vec<Vec<f64>> = embeddings.iter().map(|e| e.to_vec()).collect();
        let x = Tensor::from_rows(&rows)?;
        if x.cols() != self.dim() {
            return Err(Error::shape(format!(
                "classifier expects dim {}, got {}",
                self.dim(),
                x.cols()
            )));
        }
        let mut g = Graph::new();
        let b = Bound::frozen(&mut g, &self.store);
        let x = g.constant(x);
        let logits = self.classifier.logits(&mut g, &b, x)?;
        Ok(g.value(logits).clone())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    group: ParamGroup,
    shape: (usize, usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CheckpointHeader {
    model: ModelConfig,
    styles: StyleRegistry,
    vocab: Vec<String>,
    vocab_hash: String,
    tensors: Vec<TensorEntry>,
    trainer: Option<serde_json::Value>,
    epoch: usize,
    val_loss: Option<f64>,
}

/// A model plus the training context it was selected in.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: ModelBundle,
    /// Serialized trainer configuration, when produced by training.
    pub trainer: Option<serde_json::Value>,
    pub epoch: usize,
    pub val_loss: Option<f64>,
}

impl Checkpoint {
    pub fn untrained(model: ModelBundle) -> Self {
        Self {
            model,
            trainer: None,
            epoch: 0,
            val_loss: None,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let m = &self.model;
        let header = CheckpointHeader {
            model: m.config,
            styles: m.registry.clone(),
            vocab: m.vocab.tokens().to_vec(),
            vocab_hash: m.vocab.hash(),
            tensors: m
                .store
                .iter()
                .map(|(_, p)| TensorEntry {
                    name: p.name.clone(),
                    group: p.group,
                    shape: p.value.shape(),
                })
                .collect(),
            trainer: self.trainer.clone(),
            epoch: self.epoch,
            val_loss: self.val_loss,
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(16 + json.len() + m.store.num_values() * 8);
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, p) in m.store.iter() {
            for v in p.value.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = crate::index::ByteReader::new(bytes);
        let magic = r.array::<4>("checkpoint magic")?;
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::BadMagic {
                expected: CHECKPOINT_MAGIC,
                found: magic,
            });
        }
        let version = r.u32("checkpoint version")?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::VersionMismatch {
                expected: CHECKPOINT_VERSION,
                found: version,
            });
        }
        let len = r.u64("header length")?;
        let json = r.take(
            usize::try_from(len).map_err(|_| Error::Truncated("header length".into()))?,
            "header",
        )?;
        let header: CheckpointHeader = serde_json::from_slice(json)?;

        let vocab = Vocabulary::from_tokens(header.vocab)?;
        if vocab.hash() != header.vocab_hash {
            return Err(Error::Format(
                "vocabulary hash does not match its tokens".into(),
            ));
        }
        let mut model = ModelBundle::new(header.model, header.styles, vocab)?;
        if model.store.len() != header.tensors.len() {
            return Err(Error::Format(format!(
                "checkpoint lists {} tensors, model has {}",
                header.tensors.len(),
                model.store.len()
            )));
        }
        let ids: Vec<_> = model.store.iter().map(|(id, _)| id).collect();
        for (id, entry) in ids.into_iter().zip(&header.tensors) {
            let p = model.store.param(id);
            if p.name != entry.name || p.group != entry.group || p.value.shape() != entry.shape {
                return Err(Error::Format(format!(
                    "tensor {} {:?} does not match model parameter {} {:?}",
                    entry.name,
                    entry.shape,
                    p.name,
                    p.value.shape()
                )));
            }
            let n = entry.shape.0 * entry.shape.1;
            let raw = r.take(n * 8, &entry.name)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            *model.store.get_mut(id) = Tensor::new(entry.shape.0, entry.shape.1, data)?;
        }
        if !r.is_empty() {
            return Err(Error::Format(format!(
                "{} trailing bytes after checkpoint",
                r.remaining()
            )));
        }
        Ok(Self {
            model,
            trainer: header.trainer,
            epoch: header.epoch,
            val_loss: header.val_loss,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
