//! Feature cache for diffusion decoding.
//!
//! The store keeps per-layer per-position block outputs (and the attention
//! rows that produced them). Each step a [`RecomputePlan`] splits positions
//! into recomputed and reused; reused positions carry stored rows into the
//! forward pass. Three policies are supported:
//!
//! - `dllm_cache`: prefix refreshed every `prefix_interval` steps, suffix
//!   every `suffix_interval` steps, and in between the least-similar
//!   `adaptive_fraction` of suffix positions is recomputed.
//! - `prefix_only`: prefix computed once, suffix recomputed every step.
//! - `off`: everything recomputed every step.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::ForwardTrace;
use crate::numerics::{cosine_similarity, Matrix};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CacheError {
    #[error("no stored row for layer {layer} position {position}")]
    MissingRow { layer: usize, position: usize },
    #[error("invalid cache policy: {0}")]
    InvalidPolicy(String),
    #[error("cache shape mismatch: {0}")]
    Shape(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CacheMode {
    DllmCache,
    PrefixOnly,
    #[default]
    Off,
}

/// How `prefix_interval` / `suffix_interval` are read.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum IntervalSemantics {
    /// Refresh when `t mod interval == 0`.
    #[default]
    Interval,
    /// Refresh `interval` times per decode: when `t mod (total_steps / interval) == 0`.
    RefreshCount,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CachePolicy {
    pub mode: CacheMode,
    pub prefix_interval: usize,
    pub suffix_interval: usize,
    pub adaptive_fraction: f64,
    pub similarity_threshold: f64,
    pub interval_semantics: IntervalSemantics,
}

impl Default for CachePolicy {
    fn default() -> Self {
        Self {
            mode: CacheMode::Off,
            ..Self::dllm_cache()
        }
    }
}

impl CachePolicy {
    /// dLLM-Cache settings: 25% adaptive, prefix every 25 steps, suffix every 7.
    pub fn dllm_cache() -> Self {
        Self {
            mode: CacheMode::DllmCache,
            prefix_interval: 25,
            suffix_interval: 7,
            adaptive_fraction: 0.25,
            similarity_threshold: 1.0,
            interval_semantics: IntervalSemantics::Interval,
        }
    }

    pub fn off() -> Self {
        Self::default()
    }

    pub fn prefix_only() -> Self {
        Self {
            mode: CacheMode::PrefixOnly,
            ..Self::dllm_cache()
        }
    }

    pub fn validate(&self) -> Result<(), CacheError> {
        if self.prefix_interval == 0 || self.suffix_interval == 0 {
            return Err(CacheError::InvalidPolicy("intervals must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.adaptive_fraction) {
            return Err(CacheError::InvalidPolicy(format!(
                "adaptive_fraction {} outside [0, 1]",
                self.adaptive_fraction
            )));
        }
        if !(0.0..=1.0).contains(&self.similarity_threshold) {
            return Err(CacheError::InvalidPolicy(format!(
                "similarity_threshold {} outside [0, 1]",
                self.similarity_threshold
            )));
        }
        Ok(())
    }

    fn due(&self, interval: usize, step: usize, total_steps: usize) -> bool {
        let period = match self.interval_semantics {
            IntervalSemantics::Interval => interval,
            IntervalSemantics::RefreshCount => (total_steps / interval).max(1),
        };
        step.is_multiple_of(period)
    }

    pub fn prefix_due(&self, step: usize, total_steps: usize) -> bool {
        self.due(self.prefix_interval, step, total_steps)
    }

    pub fn suffix_due(&self, step: usize, total_steps: usize) -> bool {
        self.due(self.suffix_interval, step, total_steps)
    }

    /// Whether step `step` would consult similarity probes.
    pub fn needs_probe(&self, state: &CacheState, step: usize) -> bool {
        self.mode == CacheMode::DllmCache
            && state.is_warm()
            && !self.suffix_due(step, state.total_steps)
            && self.adaptive_count(state.seq_len - state.prefix_len) > 0
            && self.similarity_threshold > 0.0
    }

    fn adaptive_count(&self, suffix_len: usize) -> usize {
        (self.adaptive_fraction * suffix_len as f64).floor() as usize
    }
}

/// Recompute/reuse split for one step.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RecomputePlan {
    pub step: usize,
    pub recompute: Vec<bool>,
    /// Suffix positions recomputed by the similarity branch, in rank order.
    pub adaptive: Vec<usize>,
    /// Clamped similarity per position when probes were consulted.
    pub similarity: Vec<Option<f64>>,
    /// Positions whose probe or stored feature was the zero vector.
    pub degenerate: Vec<usize>,
}

impl RecomputePlan {
    pub fn all(seq_len: usize, step: usize) -> Self {
        Self {
            step,
            recompute: vec![true; seq_len],
            adaptive: Vec::new(),
            similarity: vec![None; seq_len],
            degenerate: Vec::new(),
        }
    }

    pub fn recompute_count(&self) -> usize {
        self.recompute.iter().filter(|&&r| r).count()
    }

    pub fn reuse_set(&self) -> Vec<usize> {
        self.recompute
            .iter()
            .enumerate()
            .filter_map(|(i, &r)| (!r).then_some(i))
            .collect()
    }
}

/// Stored features plus staleness bookkeeping for one decode session.
#[derive(Debug, Clone)]
pub struct CacheState {
    seq_len: usize,
    prefix_len: usize,
    total_steps: usize,
    hidden: Vec<Matrix>,
    attention: Vec<Vec<Matrix>>,
    last_recompute: Vec<Option<usize>>,
    current_step: usize,
}

impl CacheState {
    pub fn new(seq_len: usize, prefix_len: usize, total_steps: usize) -> Self {
        Self {
            seq_len,
            prefix_len,
            total_steps,
            hidden: Vec::new(),
            attention: Vec::new(),
            last_recompute: vec![None; seq_len],
            current_step: 0,
        }
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn prefix_len(&self) -> usize {
        self.prefix_len
    }

    pub fn current_step(&self) -> usize {
        self.current_step
    }

    pub fn last_recompute(&self, position: usize) -> Option<usize> {
        self.last_recompute[position]
    }

    /// True once every position has a stored row.
    pub fn is_warm(&self) -> bool {
        self.last_recompute.iter().all(Option::is_some)
    }

    /// Staleness as of the last absorbed step; `None` for never-computed positions.
    pub fn staleness(&self, position: usize) -> Option<usize> {
        self.last_recompute[position].map(|s| self.current_step - s)
    }

    /// Final-layer stored rows (the features the previous step produced).
    pub fn final_features(&self) -> Option<&Matrix> {
        self.hidden.last()
    }

    pub fn hidden_row(&self, layer: usize, position: usize) -> Result<&[f64], CacheError> {
        match (self.hidden.get(layer), self.last_recompute[position]) {
            (Some(m), Some(_)) => Ok(m.row(position)),
            _ => Err(CacheError::MissingRow { layer, position }),
        }
    }

    pub fn attention_row(
        &self,
        layer: usize,
        head: usize,
        position: usize,
    ) -> Result<&[f64], CacheError> {
        match (
            self.attention.get(layer).and_then(|h| h.get(head)),
            self.last_recompute[position],
        ) {
            (Some(m), Some(_)) => Ok(m.row(position)),
            _ => Err(CacheError::MissingRow { layer, position }),
        }
    }

    /// Stores rows for every position the trace recomputed and resets their staleness.
    pub fn absorb(&mut self, trace: &ForwardTrace, step: usize) -> Result<(), CacheError> {
        if trace.seq_len() != self.seq_len {
            return Err(CacheError::Shape(format!(
                "trace has {} positions, cache {}",
                trace.seq_len(),
                self.seq_len
            )));
        }
        if self.hidden.is_empty() {
            self.hidden = trace
                .hidden
                .iter()
                .map(|m| Matrix::zeros(m.rows(), m.cols()))
                .collect();
            self.attention = trace
                .attention
                .iter()
                .map(|heads| {
                    heads
                        .iter()
                        .map(|m| Matrix::zeros(m.rows(), m.cols()))
                        .collect()
                })
                .collect();
        }
        for (p, _) in trace.recomputed.iter().enumerate().filter(|(_, &r)| r) {
            for (store, fresh) in self.hidden.iter_mut().zip(&trace.hidden) {
                store.row_mut(p).copy_from_slice(fresh.row(p));
            }
            for (store_heads, fresh_heads) in self.attention.iter_mut().zip(&trace.attention) {
                for (store, fresh) in store_heads.iter_mut().zip(fresh_heads) {
                    store.row_mut(p).copy_from_slice(fresh.row(p));
                }
            }
            self.last_recompute[p] = Some(step);
        }
        self.current_step = step;
        Ok(())
    }

    pub fn view<'a>(&'a self, plan: &'a RecomputePlan) -> CacheView<'a> {
        CacheView { state: self, plan }
    }
}

/// Read-only cache access handed to a forward pass.
#[derive(Debug, Clone, Copy)]
pub struct CacheView<'a> {
    pub state: &'a CacheState,
    pub plan: &'a RecomputePlan,
}

impl CacheView<'_> {
    pub fn is_reused(&self, position: usize) -> bool {
        !self.plan.recompute[position]
    }

    /// Staleness the position will have once this step completes.
    pub fn staleness(&self, position: usize) -> usize {
        if self.plan.recompute[position] {
            return 0;
        }
        self.state.last_recompute[position].map_or(0, |s| self.plan.step - s)
    }

    pub fn staleness_vec(&self) -> Vec<usize> {
        (0..self.plan.recompute.len())
            .map(|p| self.staleness(p))
            .collect()
    }
}

/// Computes which positions to recompute at step `step` (1-based).
///
/// `features_prev` are the final-layer rows the previous step produced
/// (the stored rows) and `features_curr` the current-step probe. They are
/// only read when the adaptive branch runs; pass `None` otherwise.
pub fn plan_recompute(
    policy: &CachePolicy,
    state: &CacheState,
    step: usize,
    features_prev: Option<&Matrix>,
    features_curr: Option<&Matrix>,
) -> RecomputePlan {
    let n = state.seq_len;
    let prefix = state.prefix_len;
    let mut plan = RecomputePlan::all(n, step);
    if policy.mode == CacheMode::Off {
        return plan;
    }
    plan.recompute.fill(false);
    match policy.mode {
        CacheMode::Off => unreachable!(),
        CacheMode::PrefixOnly => {
            plan.recompute[prefix..].fill(true);
        }
        CacheMode::DllmCache => {
            if policy.prefix_due(step, state.total_steps) {
                plan.recompute[..prefix].fill(true);
            }
            if policy.suffix_due(step, state.total_steps) {
                plan.recompute[prefix..].fill(true);
            } else if let (Some(prev), Some(curr)) = (features_prev, features_curr) {
                adaptive_branch(policy, prefix, prev, curr, &mut plan);
            }
        }
    }
    // positions that were never computed cannot be reused
    for (r, last) in plan.recompute.iter_mut().zip(&state.last_recompute) {
        if last.is_none() {
            *r = true;
        }
    }
    plan
}

fn adaptive_branch(
    policy: &CachePolicy,
    prefix: usize,
    prev: &Matrix,
    curr: &Matrix,
    plan: &mut RecomputePlan,
) {
    let n = plan.recompute.len();
    let count = policy.adaptive_count(n - prefix);
    if count == 0 {
        return;
    }
    let mut ranked: Vec<(f64, usize)> = Vec::with_capacity(n - prefix);
    for p in prefix..n {
        let sim = cosine_similarity(prev.row(p), curr.row(p))
            .expect("probe and stored features share a width");
        if sim.degenerate {
            plan.degenerate.push(p);
        }
        // negative similarity ranks like zero
        let value = sim.value.max(0.0);
        plan.similarity[p] = Some(value);
        ranked.push((value, p));
    }
    ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    for &(sim, p) in ranked.iter().take(count) {
        if sim < policy.similarity_threshold {
            plan.recompute[p] = true;
            plan.adaptive.push(p);
        }
    }
}

/// Per-position staleness counts as of the last absorbed step.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct StalenessHistogram {
    pub step: usize,
    /// staleness -> number of positions
    pub counts: BTreeMap<usize, usize>,
    /// Positions never computed.
    pub cold: usize,
}

impl StalenessHistogram {
    pub fn total(&self) -> usize {
        self.counts.values().sum::<usize>() + self.cold
    }
}

pub fn staleness_report(state: &CacheState) -> StalenessHistogram {
    let mut hist = StalenessHistogram {
        step: state.current_step,
        ..Default::default()
    };
    for p in 0..state.seq_len {
        match state.staleness(p) {
            Some(s) => *hist.counts.entry(s).or_default() += 1,
            None => hist.cold += 1,
        }
    }
    hist
}

/// Replaces rows of every reused position in `trace` with stored rows.
pub fn substitute(trace: &mut ForwardTrace, view: &CacheView<'_>) -> Result<(), CacheError> {
    let n = trace.seq_len();
    if view.plan.recompute.len() != n {
        return Err(CacheError::Shape(format!(
            "plan covers {} positions, trace {}",
            view.plan.recompute.len(),
            n
        )));
    }
    for p in view.plan.reuse_set() {
        for (layer, hidden) in trace.hidden.iter_mut().enumerate() {
            hidden
                .row_mut(p)
                .copy_from_slice(view.state.hidden_row(layer, p)?);
        }
        for (layer, heads) in trace.attention.iter_mut().enumerate() {
            for (head, attn) in heads.iter_mut().enumerate() {
                attn.row_mut(p)
                    .copy_from_slice(view.state.attention_row(layer, head, p)?);
            }
        }
    }
    trace.recomputed.clone_from(&view.plan.recompute);
    Ok(())
}
