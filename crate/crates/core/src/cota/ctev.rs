//! Context-token entropy-guided voting.
//!
//! Deep-layer logit-lens entropy is summed per position, then over each
//! position's context set (itself plus its nearest in-block neighbours), and
//! folded into the unmasking score.

use serde::{Deserialize, Serialize};

use super::CotaError;
use crate::decoder::StepPlan;
use crate::model::ForwardTrace;
use crate::numerics::softmax_into;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CtevMode {
    /// `score = c - |alpha| * E_ctx`
    #[default]
    Penalty,
    /// `score = c + alpha * E_ctx`
    Literal,
}

/// Inclusive 1-based layer range.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerRange {
    pub first: usize,
    pub last: usize,
}

impl LayerRange {
    pub fn new(first: usize, last: usize) -> Self {
        Self { first, last }
    }

    /// Layers `ceil(0.8 L)` through `L - 2`, swapped into order when they cross.
    /// For L = 32 this is 26..=30; for L = 8 it is 6..=7.
    pub fn deep_default(layers: usize) -> Self {
        let a = (4 * layers).div_ceil(5).max(1);
        let b = layers.saturating_sub(2).max(1);
        Self {
            first: a.min(b),
            last: a.max(b).min(layers),
        }
    }

    pub fn len(&self) -> usize {
        self.last + 1 - self.first
    }

    pub fn is_empty(&self) -> bool {
        self.last < self.first
    }

    pub fn check(&self, layers: usize) -> Result<(), CotaError> {
        if self.first == 0 || self.first > self.last || self.last > layers {
            return Err(CotaError::LayerRange {
                first: self.first,
                last: self.last,
                layers,
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CtevConfig {
    pub alpha: f64,
    pub context_width: usize,
    /// `None` picks [`LayerRange::deep_default`] for the model depth.
    pub deep_layers: Option<LayerRange>,
    pub mode: CtevMode,
}

impl Default for CtevConfig {
    fn default() -> Self {
        Self {
            alpha: 0.75,
            context_width: 3,
            deep_layers: None,
            mode: CtevMode::Penalty,
        }
    }
}

impl CtevConfig {
    pub fn validate(&self, layers: usize) -> Result<(), CotaError> {
        if !matches!(self.context_width, 1 | 3 | 5) {
            return Err(CotaError::InvalidConfig(format!(
                "context_width {} not in {{1, 3, 5}}",
                self.context_width
            )));
        }
        if !self.alpha.is_finite() {
            return Err(CotaError::InvalidConfig("alpha must be finite".into()));
        }
        self.layer_range(layers).check(layers)
    }

    pub fn layer_range(&self, layers: usize) -> LayerRange {
        self.deep_layers
            .unwrap_or_else(|| LayerRange::deep_default(layers))
    }
}

/// `-sum p log p / log V`, with `0 log 0 = 0`.
pub fn normalized_entropy(p: &[f64]) -> f64 {
    if p.len() < 2 {
        return 0.0;
    }
    let h: f64 = p.iter().filter(|&&x| x > 0.0).map(|&x| -x * x.ln()).sum();
    h / (p.len() as f64).ln()
}

pub fn normalized_entropy_of_logits(logits: &[f64], scratch: &mut Vec<f64>) -> f64 {
    scratch.resize(logits.len(), 0.0);
    softmax_into(logits, scratch);
    normalized_entropy(scratch)
}

/// Per-position sum of normalized lens entropy over `range`.
pub fn deep_entropy_sum(trace: &ForwardTrace, range: LayerRange) -> Result<Vec<f64>, CotaError> {
    range.check(trace.num_layers())?;
    let n = trace.seq_len();
    let mut sums = vec![0.0; n];
    let mut scratch = Vec::new();
    for layer in range.first..=range.last {
        let logits = &trace.lens_logits[layer - 1];
        for (i, s) in sums.iter_mut().enumerate() {
            *s += normalized_entropy_of_logits(logits.row(i), &mut scratch);
        }
    }
    Ok(sums)
}

/// Position `i` plus its `width - 1` nearest positions inside `[lo, hi)`,
/// nearer first and lower index on ties. The flag is set when the block
/// is narrower than `width`.
pub fn context_set(i: usize, width: usize, block: (usize, usize)) -> (Vec<usize>, bool) {
    let (lo, hi) = block;
    debug_assert!(lo <= i && i < hi);
    let size = hi - lo;
    let clipped = width > size;
    let width = width.min(size);
    let mut others: Vec<usize> = (lo..hi).filter(|&j| j != i).collect();
    others.sort_by_key(|&j| (j.abs_diff(i), j));
    let mut set = Vec::with_capacity(width);
    set.push(i);
    set.extend(others.into_iter().take(width.saturating_sub(1)));
    (set, clipped)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContextEntropy {
    pub value: f64,
    pub clipped: bool,
}

/// Sum of `e_sum` over the context set of `i`. `e_sum` is indexed by absolute position.
pub fn context_entropy(
    e_sum: &[f64],
    i: usize,
    width: usize,
    block: (usize, usize),
) -> ContextEntropy {
    let (set, clipped) = context_set(i, width, block);
    if clipped {
        log::warn!(
            "context width {width} clipped to block size {}",
            block.1 - block.0
        );
    }
    ContextEntropy {
        value: set.iter().map(|&j| e_sum[j]).sum(),
        clipped,
    }
}

/// Rewrites every candidate's score from its base confidence and `e_ctx`
/// (indexed by absolute position).
pub fn apply_ctev(plan: &mut StepPlan, e_ctx: &[f64], config: &CtevConfig) {
    for cand in &mut plan.candidates {
        let e = e_ctx[cand.position];
        cand.score = match config.mode {
            CtevMode::Literal => cand.confidence + config.alpha * e,
            CtevMode::Penalty => cand.confidence - config.alpha.abs() * e,
        };
    }
}
