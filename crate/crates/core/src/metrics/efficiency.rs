//! Analytic FLOP counting and modeled throughput.
//!
//! Counts cover the transformer blocks only: a reused position skips every
//! block, so only recomputed positions are charged. A multiply-add is two
//! FLOPs.

use serde::{Deserialize, Serialize};

use crate::decoder::StepRecord;
use crate::model::ModelConfig;

/// Cost of pushing one position through one block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockFlops {
    /// Q, K, V and output projections: `4 * 2 d^2`.
    pub projections: u64,
    /// Scores and value mixing against `T` keys: `2 * 2 T d`.
    pub attention: u64,
    /// Up and down projections: `2 * 2 d f`.
    pub mlp: u64,
}

impl BlockFlops {
    pub fn new(config: &ModelConfig, seq_len: usize) -> Self {
        let d = config.model_dim as u64;
        let f = config.ffn_dim() as u64;
        let t = seq_len as u64;
        Self {
            projections: 8 * d * d,
            attention: 4 * t * d,
            mlp: 4 * d * f,
        }
    }

    /// The parts that grow with `d^2`.
    pub fn dense(&self) -> u64 {
        self.projections + self.mlp
    }

    pub fn total(&self) -> u64 {
        self.projections + self.attention + self.mlp
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EfficiencyRecord {
    /// Generated tokens over modeled seconds at the nominal FLOP rate.
    pub tokens_per_second: f64,
    pub flop_estimate: u64,
    pub cache_off_flops: u64,
    pub recompute_savings: f64,
    pub recomputed_positions: u64,
    pub total_positions: u64,
}

/// Counts block FLOPs for one decode from its step records.
pub fn flop_estimate(
    config: &ModelConfig,
    seq_len: usize,
    steps: &[StepRecord],
    generated_tokens: usize,
    nominal_flops_per_second: f64,
) -> EfficiencyRecord {
    let per_position = BlockFlops::new(config, seq_len).total() * config.layers as u64;
    let recomputed: u64 = steps.iter().map(|s| s.recompute_count() as u64).sum();
    let total = (steps.len() * seq_len) as u64;
    efficiency_from_counts(
        per_position,
        recomputed,
        total,
        generated_tokens,
        nominal_flops_per_second,
    )
}

/// Builds a record from position counts; also used to merge samples.
pub fn efficiency_from_counts(
    flops_per_position: u64,
    recomputed_positions: u64,
    total_positions: u64,
    generated_tokens: usize,
    nominal_flops_per_second: f64,
) -> EfficiencyRecord {
    let counted = flops_per_position * recomputed_positions;
    let off = flops_per_position * total_positions;
    let savings = if off == 0 {
        0.0
    } else {
        (off - counted) as f64 / off as f64
    };
    let tokens_per_second = if counted == 0 {
        0.0
    } else {
        generated_tokens as f64 * nominal_flops_per_second / counted as f64
    };
    EfficiencyRecord {
        tokens_per_second,
        flop_estimate: counted,
        cache_off_flops: off,
        recompute_savings: savings,
        recomputed_positions,
        total_positions,
    }
}
