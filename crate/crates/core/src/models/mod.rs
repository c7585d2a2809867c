//! The three networks: the encoder-decoder inpainter, the encoder-only
//! feedback critic and the autoregressive evaluator.

mod evaluator;
mod feedback;
mod inpainter;
mod layers;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::remi::{Vocab, VOCAB_SIZE};
use crate::tensor::{
    AttnMask, Checkpoint, CheckpointError, CheckpointHeader, Graph, ParamId, ParamStore, TensorError, Var,
    CHECKPOINT_FORMAT_VERSION,
};

pub use evaluator::Evaluator;
pub use feedback::Feedback;
pub use inpainter::{IncrementalDecoder, Inpainter};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("length mismatch: {what} has length {found}, expected {expected}")]
    LengthMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("sequence of length {len} exceeds max_len {max_len}")]
    SequenceTooLong { len: usize, max_len: usize },
    #[error("empty input sequence")]
    EmptyInput,
    #[error("token id {0} is outside the vocabulary")]
    UnknownToken(u32),
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_enc_layers: usize,
    pub n_dec_layers: usize,
    pub max_len: usize,
    pub dropout_p: f64,
    pub vocab_size: usize,
}

impl ModelConfig {
    pub fn desk_inpainter() -> Self {
        Self {
            d_model: 64,
            n_heads: 4,
            n_enc_layers: 2,
            n_dec_layers: 2,
            max_len: 256,
            dropout_p: 0.0,
            vocab_size: VOCAB_SIZE,
        }
    }

    pub fn desk_feedback() -> Self {
        Self {
            n_enc_layers: 2,
            n_dec_layers: 0,
            dropout_p: 0.1,
            ..Self::desk_inpainter()
        }
    }

    pub fn desk_evaluator() -> Self {
        Self {
            n_enc_layers: 0,
            n_dec_layers: 4,
            ..Self::desk_inpainter()
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |msg: String| Err(ModelError::InvalidConfig(msg));
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return bad(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.max_len == 0 {
            return bad("max_len must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return bad(format!("dropout_p {} outside [0, 1)", self.dropout_p));
        }
        if self.vocab_size != VOCAB_SIZE {
            return bad(format!("vocab_size {} but the vocabulary has {VOCAB_SIZE}", self.vocab_size));
        }
        Ok(())
    }

    fn check_ids(&self, ids: &[u32]) -> Result<(), ModelError> {
        if ids.is_empty() {
            return Err(ModelError::EmptyInput);
        }
        if ids.len() > self.max_len {
            return Err(ModelError::SequenceTooLong {
                len: ids.len(),
                max_len: self.max_len,
            });
        }
        match ids.iter().find(|&&id| id as usize >= self.vocab_size) {
            Some(&id) => Err(ModelError::UnknownToken(id)),
            None => Ok(()),
        }
    }
}

fn check_len(what: &'static str, expected: usize, found: usize) -> Result<(), ModelError> {
    if expected == found {
        Ok(())
    } else {
        Err(ModelError::LengthMismatch { what, expected, found })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AttentionMaskKind {
    AntiCausal,
    Causal,
    Identity,
}

/// `allow[i][j]`: may query position `i` attend to key position `j`.
pub fn build_attention_mask(kind: AttentionMaskKind, n: usize) -> AttnMask {
    match kind {
        AttentionMaskKind::Causal => AttnMask::from_fn(n, n, |i, j| j <= i),
        AttentionMaskKind::AntiCausal => AttnMask::from_fn(n, n, |i, j| j >= i),
        AttentionMaskKind::Identity => AttnMask::from_fn(n, n, |i, j| i == j),
    }
}

/// Common checkpoint plumbing for the three networks.
pub trait Network: Sized {
    const KIND: &'static str;

    fn build<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self, ModelError>;
    fn config(&self) -> &ModelConfig;
    fn params(&self) -> &ParamStore;
    fn params_mut(&mut self) -> &mut ParamStore;

    fn to_checkpoint(&self) -> Checkpoint {
        let header = CheckpointHeader {
            format_version: CHECKPOINT_FORMAT_VERSION,
            model_kind: Self::KIND.to_string(),
            config: serde_json::to_value(self.config()).expect("config serializes"),
            vocab_checksum: Vocab::remi().checksum(),
        };
        Checkpoint::from_store(header, self.params())
    }

    fn save(&self) -> Vec<u8> {
        self.to_checkpoint().to_bytes()
    }

    fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self, ModelError> {
        if ckpt.header.model_kind != Self::KIND {
            return Err(CheckpointError::VersionMismatch {
                expected: format!("model_kind {}", Self::KIND),
                found: format!("model_kind {}", ckpt.header.model_kind),
            }
            .into());
        }
        let vocab = Vocab::remi().checksum();
        if ckpt.header.vocab_checksum != vocab {
            return Err(CheckpointError::VocabMismatch {
                expected: vocab,
                found: ckpt.header.vocab_checksum.clone(),
            }
            .into());
        }
        let config: ModelConfig = serde_json::from_value(ckpt.header.config.clone())
            .map_err(|e| CheckpointError::Malformed(format!("config: {e}")))?;
        let mut model = Self::build(config, &mut ChaCha8Rng::seed_from_u64(0))?;
        ckpt.load_into(model.params_mut())?;
        Ok(model)
    }

    fn load(bytes: &[u8]) -> Result<Self, ModelError> {
        Self::from_checkpoint(&Checkpoint::from_bytes(bytes)?)
    }
}

/// Token, position and optional binary-channel embeddings summed per row.
#[derive(Debug, Clone)]
struct Embeddings {
    token: ParamId,
    position: ParamId,
    channel: Option<ParamId>,
}

impl Embeddings {
    fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        config: &ModelConfig,
        with_channel: bool,
        rng: &mut R,
    ) -> Self {
        let d = config.d_model;
        Self {
            token: store.add_normal(format!("{name}.token"), &[config.vocab_size, d], 0.02, rng),
            position: store.add_normal(format!("{name}.position"), &[config.max_len, d], 0.02, rng),
            channel: with_channel.then(|| store.add_normal(format!("{name}.channel"), &[2, d], 0.02, rng)),
        }
    }

    fn forward(&self, g: &mut Graph, store: &ParamStore, ids: &[u32], channel: Option<&[bool]>) -> Result<Var, TensorError> {
        let tok_table = g.param(store, self.token);
        let tok = g.embedding_lookup(tok_table, ids)?;
        let pos_table = g.param(store, self.position);
        let positions: Vec<u32> = (0..ids.len() as u32).collect();
        let pos = g.embedding_lookup(pos_table, &positions)?;
        let mut x = g.add(tok, pos)?;
        if let (Some(chan_id), Some(bits)) = (self.channel, channel) {
            let table = g.param(store, chan_id);
            let bits: Vec<u32> = bits.iter().map(|&b| b as u32).collect();
            let c = g.embedding_lookup(table, &bits)?;
            x = g.add(x, c)?;
        }
        Ok(x)
    }

    /// Embedding of a single row without building a graph.
    fn row(&self, store: &ParamStore, id: u32, position: usize) -> Vec<f64> {
        let tok = store.get(self.token).row(id as usize);
        let pos = store.get(self.position).row(position);
        tok.iter().zip(pos).map(|(a, b)| a + b).collect()
    }
}
