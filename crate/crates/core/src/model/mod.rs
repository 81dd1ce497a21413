//! Forward-pass backends.
//!
//! Two implementations share [`DiffusionModel`]: a seeded toy bidirectional
//! transformer ([`ToyModel`]) with logit-lens taps at every layer, and a
//! table-driven [`ScriptedModel`] whose outputs are chosen by ordered rules.

mod scripted;
mod toy;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cache::{CacheError, CacheView};
use crate::numerics::{Matrix, NumericsError};

pub use scripted::{
    build_sticky_script, AttentionSpec, Condition, LogitTable, RowSpec, Script, ScriptedModel,
    ScriptedRule,
};
pub use toy::ToyModel;

pub type TokenId = u32;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("sequence length {len} exceeds max_seq_len {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("token {token} at position {position} is outside the vocabulary of size {vocab}")]
    TokenOutOfRange {
        position: usize,
        token: TokenId,
        vocab: usize,
    },
    #[error("attention hook produced {value} at layer {layer} head {head} ({row}, {col})")]
    BadHook {
        layer: usize,
        head: usize,
        row: usize,
        col: usize,
        value: f64,
    },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: String, got: String },
    #[error("invalid script: {0}")]
    Script(String),
    #[error(transparent)]
    Cache(#[from] CacheError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Backend {
    #[default]
    Toy,
    Scripted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub layers: usize,
    pub heads: usize,
    pub model_dim: usize,
    pub max_seq_len: usize,
    pub seed: u64,
    pub backend: Backend,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 64,
            layers: 8,
            heads: 4,
            model_dim: 64,
            max_seq_len: 256,
            seed: 0,
            backend: Backend::Toy,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let fail = |msg: String| Err(ModelError::InvalidConfig(msg));
        if self.vocab_size < 4 {
            return fail(format!("vocab_size {} < 4", self.vocab_size));
        }
        if self.layers < 4 {
            return fail(format!("layers {} < 4", self.layers));
        }
        if self.heads == 0 || self.model_dim == 0 || !self.model_dim.is_multiple_of(self.heads) {
            return fail(format!(
                "model_dim {} must be a positive multiple of heads {}",
                self.model_dim, self.heads
            ));
        }
        if self.max_seq_len == 0 {
            return fail("max_seq_len must be positive".into());
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.heads
    }

    /// Hidden width of the feed-forward block.
    pub fn ffn_dim(&self) -> usize {
        2 * self.model_dim
    }

    /// Vocabulary id reserved for the mask token by the harness defaults.
    pub fn default_mask_token(&self) -> TokenId {
        (self.vocab_size - 1) as TokenId
    }
}

/// Borrowed view of a sequence as the model sees it.
#[derive(Debug, Clone, Copy)]
pub struct SequenceView<'a> {
    pub tokens: &'a [TokenId],
    pub masked: &'a [bool],
    pub prefix_len: usize,
    pub mask_token: TokenId,
}

impl SequenceView<'_> {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub(crate) fn check(&self, config: &ModelConfig) -> Result<(), ModelError> {
        if self.tokens.len() > config.max_seq_len {
            return Err(ModelError::SequenceTooLong {
                len: self.tokens.len(),
                max: config.max_seq_len,
            });
        }
        if self.masked.len() != self.tokens.len() {
            return Err(ModelError::DimensionMismatch {
                expected: format!("{} mask flags", self.tokens.len()),
                got: self.masked.len().to_string(),
            });
        }
        for (position, &token) in self.tokens.iter().enumerate() {
            if token as usize >= config.vocab_size {
                return Err(ModelError::TokenOutOfRange {
                    position,
                    token,
                    vocab: config.vocab_size,
                });
            }
        }
        Ok(())
    }
}

/// Everything one forward pass exposes for decoding and analysis.
///
/// Layer vectors are indexed from 0; the last entry is the output layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    /// `[layer][head]`, each `T x T`, post-softmax and post-hook.
    pub attention: Vec<Vec<Matrix>>,
    /// `[layer]`, each `T x model_dim` block output.
    pub hidden: Vec<Matrix>,
    /// `[layer]`, each `T x V`.
    pub lens_logits: Vec<Matrix>,
    pub final_logits: Matrix,
    /// Positions whose features were computed in this pass rather than reused.
    pub recomputed: Vec<bool>,
}

impl ForwardTrace {
    pub fn num_layers(&self) -> usize {
        self.hidden.len()
    }

    pub fn seq_len(&self) -> usize {
        self.final_logits.rows()
    }
}

/// Attention intervention applied inside every layer and head.
///
/// `bias_scores` sees the pre-softmax scores, `transform_weights` the
/// post-softmax weights before value mixing. Both must be pure.
pub trait AttentionHook: Send + Sync {
    fn bias_scores(&self, _layer: usize, _head: usize, _scores: &mut Matrix) {}
    fn transform_weights(&self, _layer: usize, _head: usize, _weights: &mut Matrix) {}
}

pub(crate) fn check_hooked_weights(
    layer: usize,
    head: usize,
    weights: &Matrix,
) -> Result<(), ModelError> {
    for i in 0..weights.rows() {
        for (j, &value) in weights.row(i).iter().enumerate() {
            if !value.is_finite() || value < 0.0 {
                return Err(ModelError::BadHook {
                    layer,
                    head,
                    row: i,
                    col: j,
                    value,
                });
            }
        }
    }
    Ok(())
}

pub trait DiffusionModel: Send + Sync {
    fn config(&self) -> &ModelConfig;

    /// Full bidirectional pass. With a cache view, positions the view marks
    /// as reused carry their stored features instead of recomputed ones.
    fn forward(
        &self,
        seq: &SequenceView<'_>,
        hook: Option<&dyn AttentionHook>,
        cache: Option<&CacheView<'_>>,
    ) -> Result<ForwardTrace, ModelError>;

    /// Current-step final-layer features, computed without any cache.
    /// Used as the similarity probe for adaptive recompute.
    fn probe_features(&self, seq: &SequenceView<'_>) -> Result<Matrix, ModelError>;
}

/// Either backend, chosen at runtime.
pub enum AnyModel {
    Toy(ToyModel),
    Scripted(ScriptedModel),
}

impl DiffusionModel for AnyModel {
    fn config(&self) -> &ModelConfig {
        match self {
            AnyModel::Toy(m) => m.config(),
            AnyModel::Scripted(m) => m.config(),
        }
    }

    fn forward(
        &self,
        seq: &SequenceView<'_>,
        hook: Option<&dyn AttentionHook>,
        cache: Option<&CacheView<'_>>,
    ) -> Result<ForwardTrace, ModelError> {
        match self {
            AnyModel::Toy(m) => m.forward(seq, hook, cache),
            AnyModel::Scripted(m) => m.forward(seq, hook, cache),
        }
    }

    fn probe_features(&self, seq: &SequenceView<'_>) -> Result<Matrix, ModelError> {
        match self {
            AnyModel::Toy(m) => m.probe_features(seq),
            AnyModel::Scripted(m) => m.probe_features(seq),
        }
    }
}
