//! Repetition mitigation: attention decay toward nearby tokens ([`ctae`])
//! and entropy-guided unmasking scores ([`ctev`]).

pub mod ctae;
pub mod ctev;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use ctae::{
    apply_ctae, apply_decay, build_alibi_bias, build_decay, BiasKind, CtaeConfig, CtaeHook,
    CtaeReport, DecayMatrix,
};
pub use ctev::{
    apply_ctev, context_entropy, context_set, deep_entropy_sum, normalized_entropy,
    normalized_entropy_of_logits, ContextEntropy, CtevConfig, CtevMode, LayerRange,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CotaError {
    #[error("invalid intervention config: {0}")]
    InvalidConfig(String),
    #[error("layer range {first}..={last} outside [1, {layers}]")]
    LayerRange {
        first: usize,
        last: usize,
        layers: usize,
    },
    #[error("shape mismatch: {0}")]
    Shape(String),
}

/// Both interventions; either may be absent.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CotaConfig {
    #[serde(default)]
    pub ctae: Option<CtaeConfig>,
    #[serde(default)]
    pub ctev: Option<CtevConfig>,
}

impl CotaConfig {
    /// Both enabled with tau 5, gamma_min 0.5, alpha 0.75 and three context tokens.
    pub fn full() -> Self {
        Self {
            ctae: Some(CtaeConfig::default()),
            ctev: Some(CtevConfig::default()),
        }
    }

    pub fn validate(&self, layers: usize) -> Result<(), CotaError> {
        if let Some(c) = &self.ctae {
            c.validate()?;
        }
        if let Some(c) = &self.ctev {
            c.validate(layers)?;
        }
        Ok(())
    }
}
