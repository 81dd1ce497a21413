//! Iterative unmasking with semi-autoregressive blocks.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cache::{plan_recompute, CacheError, CachePolicy, CacheState, RecomputePlan};
use crate::cota::{
    apply_ctev, context_entropy, deep_entropy_sum, normalized_entropy_of_logits, CotaConfig,
    CotaError, CtaeHook,
};
use crate::model::{
    AttentionHook, DiffusionModel, ForwardTrace, ModelError, SequenceView, TokenId,
};
use crate::numerics::{softmax_into, Matrix};

#[derive(Debug, Error)]
pub enum DecodeError {
    #[error("invalid decode config: {0}")]
    Config(String),
    #[error("no masked positions left in the active block")]
    Complete,
    #[error("position {0} is not masked")]
    AlreadyUnmasked(usize),
    #[error("step budget of {budget} exhausted with {remaining} masked positions left")]
    BudgetExhausted {
        budget: usize,
        remaining: usize,
        partial: Box<DecodeOutput>,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Cache(#[from] CacheError),
    #[error(transparent)]
    Cota(#[from] CotaError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Voting {
    #[default]
    Confidence,
    Ctev,
    Ngram,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecodeConfig {
    pub total_steps: usize,
    /// Fixed tokens per step. `None` derives it per block from the step budget.
    pub tokens_per_step: Option<usize>,
    /// `None` decodes the whole response as one block.
    pub block_length: Option<usize>,
    pub voting: Voting,
    pub ngram_n: usize,
    pub ngram_penalty: f64,
    /// Recorded for provenance; decoding itself is greedy.
    pub seed: u64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            total_steps: 32,
            tokens_per_step: None,
            block_length: None,
            voting: Voting::Confidence,
            ngram_n: 2,
            ngram_penalty: 0.5,
            seed: 0,
        }
    }
}

/// One block `[lo, hi)` and the tokens unmasked per step inside it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockPlan {
    pub lo: usize,
    pub hi: usize,
    pub tokens_per_step: usize,
}

impl DecodeConfig {
    pub fn validate(&self, response_len: usize) -> Result<(), DecodeError> {
        if self.total_steps == 0 {
            return Err(DecodeError::Config("total_steps must be >= 1".into()));
        }
        if self.tokens_per_step == Some(0) {
            return Err(DecodeError::Config("tokens_per_step must be >= 1".into()));
        }
        if self.block_length == Some(0) {
            return Err(DecodeError::Config("block_length must be >= 1".into()));
        }
        if self.voting == Voting::Ngram {
            if !matches!(self.ngram_n, 2 | 3) {
                return Err(DecodeError::Config(format!(
                    "ngram_n {} not in {{2, 3}}",
                    self.ngram_n
                )));
            }
            if !(self.ngram_penalty > 0.0 && self.ngram_penalty <= 1.0) {
                return Err(DecodeError::Config(format!(
                    "ngram_penalty {} outside (0, 1]",
                    self.ngram_penalty
                )));
            }
        }
        self.blocks(response_len).map(|_| ())
    }

    /// Splits the response into blocks relative to the response start.
    ///
    /// Each block gets `total_steps / n_blocks` steps; the derived per-step
    /// count is `ceil(block_len / steps_per_block)`, so the last step of a
    /// block takes the remainder. A short final block is kept.
    pub fn blocks(&self, response_len: usize) -> Result<Vec<BlockPlan>, DecodeError> {
        if response_len == 0 {
            return Ok(Vec::new());
        }
        let block_len = self.block_length.unwrap_or(response_len).min(response_len);
        let n_blocks = response_len.div_ceil(block_len);
        if self.total_steps < n_blocks {
            return Err(DecodeError::Config(format!(
                "{} steps cannot cover {n_blocks} blocks",
                self.total_steps
            )));
        }
        let steps_per_block = self.total_steps / n_blocks;
        Ok((0..n_blocks)
            .map(|b| {
                let lo = b * block_len;
                let hi = (lo + block_len).min(response_len);
                BlockPlan {
                    lo,
                    hi,
                    tokens_per_step: self
                        .tokens_per_step
                        .unwrap_or_else(|| (hi - lo).div_ceil(steps_per_block)),
                }
            })
            .collect())
    }
}

/// A prompt plus the number of response slots to generate.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputSequence {
    pub prefix: Vec<TokenId>,
    pub response_len: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DecodeState {
    pub tokens: Vec<TokenId>,
    pub masked: Vec<bool>,
    pub prefix_len: usize,
    pub mask_token: TokenId,
    /// Completed steps.
    pub step: usize,
    /// Active block, absolute positions.
    pub block: (usize, usize),
}

impl DecodeState {
    pub fn new(input: &InputSequence, mask_token: TokenId) -> Self {
        let prefix_len = input.prefix.len();
        let n = prefix_len + input.response_len;
        let mut tokens = input.prefix.clone();
        tokens.resize(n, mask_token);
        let mut masked = vec![false; prefix_len];
        masked.resize(n, true);
        Self {
            tokens,
            masked,
            prefix_len,
            mask_token,
            step: 0,
            block: (prefix_len, n),
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn view(&self) -> SequenceView<'_> {
        SequenceView {
            tokens: &self.tokens,
            masked: &self.masked,
            prefix_len: self.prefix_len,
            mask_token: self.mask_token,
        }
    }

    pub fn masked_count(&self) -> usize {
        self.masked.iter().filter(|&&m| m).count()
    }

    pub fn masked_in_block(&self) -> Vec<usize> {
        (self.block.0..self.block.1)
            .filter(|&p| self.masked[p])
            .collect()
    }

    pub fn response(&self) -> &[TokenId] {
        &self.tokens[self.prefix_len..]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub position: usize,
    pub token: TokenId,
    pub confidence: f64,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct StepPlan {
    /// One entry per masked position in the active block, in position order.
    pub candidates: Vec<Candidate>,
    /// Positions to unmask, ascending.
    pub chosen: Vec<usize>,
}

impl StepPlan {
    /// Picks the `k` highest scores; equal scores go to the lower position.
    pub fn select(&mut self, k: usize) {
        let mut order: Vec<&Candidate> = self.candidates.iter().collect();
        order.sort_by(|a, b| {
            b.score
                .total_cmp(&a.score)
                .then(a.position.cmp(&b.position))
        });
        let mut chosen: Vec<usize> = order.iter().take(k).map(|c| c.position).collect();
        chosen.sort_unstable();
        self.chosen = chosen;
    }

    pub fn candidate(&self, position: usize) -> Option<&Candidate> {
        self.candidates.iter().find(|c| c.position == position)
    }
}

/// Most likely non-mask token and its probability for every masked
/// position in the active block. Vocabulary ties go to the lowest id.
pub fn predict_step(trace: &ForwardTrace, state: &DecodeState) -> Result<StepPlan, DecodeError> {
    let positions = state.masked_in_block();
    if positions.is_empty() {
        return Err(DecodeError::Complete);
    }
    let vocab = trace.final_logits.cols();
    let mut probs = vec![0.0; vocab];
    let mut candidates = Vec::with_capacity(positions.len());
    for p in positions {
        softmax_into(trace.final_logits.row(p), &mut probs);
        let mut best: Option<(usize, f64)> = None;
        for (v, &q) in probs.iter().enumerate() {
            if v as TokenId == state.mask_token {
                continue;
            }
            if best.is_none_or(|(_, b)| q > b) {
                best = Some((v, q));
            }
        }
        let (token, confidence) = best.ok_or_else(|| {
            DecodeError::Config("vocabulary has no token besides the mask".into())
        })?;
        candidates.push(Candidate {
            position: p,
            token: token as TokenId,
            confidence,
            score: confidence,
        });
    }
    Ok(StepPlan {
        candidates,
        chosen: Vec::new(),
    })
}

/// Writes the chosen tokens, clears their mask flags and advances the step.
pub fn apply_unmask(state: &mut DecodeState, plan: &StepPlan) -> Result<(), DecodeError> {
    let mut updates = Vec::with_capacity(plan.chosen.len());
    for &p in &plan.chosen {
        if p >= state.len() || !state.masked[p] {
            return Err(DecodeError::AlreadyUnmasked(p));
        }
        let cand = plan
            .candidate(p)
            .ok_or_else(|| DecodeError::Config(format!("no candidate for position {p}")))?;
        updates.push((p, cand.token));
    }
    for (p, token) in updates {
        state.tokens[p] = token;
        state.masked[p] = false;
    }
    state.step += 1;
    Ok(())
}

/// Scales a candidate's score by `penalty` when its token, appended to the
/// `n - 1` unmasked response tokens on its left, forms an n-gram already
/// present among consecutive unmasked response tokens.
pub fn ngram_penalty_scores(plan: &mut StepPlan, state: &DecodeState, n: usize, penalty: f64) {
    if penalty == 1.0 || n == 0 {
        return;
    }
    let start = state.prefix_len;
    let end = state.len();
    let mut seen: Vec<&[TokenId]> = Vec::new();
    if end - start >= n {
        for lo in start..=end - n {
            if (lo..lo + n).all(|p| !state.masked[p]) {
                seen.push(&state.tokens[lo..lo + n]);
            }
        }
    }
    for cand in &mut plan.candidates {
        let p = cand.position;
        if p < start + n - 1 {
            continue;
        }
        let left = p + 1 - n..p;
        if left.clone().any(|q| state.masked[q]) {
            continue;
        }
        let mut gram: Vec<TokenId> = state.tokens[left].to_vec();
        gram.push(cand.token);
        if seen.contains(&gram.as_slice()) {
            cand.score *= penalty;
        }
    }
}

/// Which internals to keep beyond the per-step records.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Retention {
    /// Per-layer lens entropy for every position at every step.
    pub entropy: bool,
    /// `(step, layer)` pairs, both 1-based, whose attention maps to keep.
    pub attention: Vec<(usize, usize)>,
}

impl Default for Retention {
    fn default() -> Self {
        Self {
            entropy: true,
            attention: Vec::new(),
        }
    }
}

/// Provenance for one decode step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    /// 1-based.
    pub step: usize,
    pub block: (usize, usize),
    pub candidates: Vec<Candidate>,
    pub chosen: Vec<usize>,
    pub recomputed: Vec<bool>,
    /// Steps since each position's features were last computed, as used by this step.
    pub staleness: Vec<usize>,
    /// Suffix positions added by the similarity branch.
    pub adaptive: Vec<usize>,
}

impl StepRecord {
    pub fn recompute_count(&self) -> usize {
        self.recomputed.iter().filter(|&&r| r).count()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetainedAttention {
    pub step: usize,
    pub layer: usize,
    pub heads: Vec<Matrix>,
}

/// Normalized lens entropy at one step: rows are layers, columns positions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepEntropy {
    pub step: usize,
    pub per_layer: Matrix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeOutput {
    pub tokens: Vec<TokenId>,
    pub prefix_len: usize,
    pub steps: Vec<StepRecord>,
    pub attention: Vec<RetainedAttention>,
    pub entropy: Vec<StepEntropy>,
    /// Attention maps requested but never produced, as `(step, layer)`.
    pub missing_attention: Vec<(usize, usize)>,
}

impl DecodeOutput {
    pub fn response(&self) -> &[TokenId] {
        &self.tokens[self.prefix_len..]
    }
}

/// Per-layer per-position normalized entropy of the lens logits.
pub fn lens_entropy(trace: &ForwardTrace) -> Matrix {
    let mut scratch = Vec::new();
    let mut out = Matrix::zeros(trace.num_layers(), trace.seq_len());
    for (layer, logits) in trace.lens_logits.iter().enumerate() {
        for p in 0..logits.rows() {
            out.set(
                layer,
                p,
                normalized_entropy_of_logits(logits.row(p), &mut scratch),
            );
        }
    }
    out
}

pub struct Decoder<'m, M: DiffusionModel + ?Sized> {
    model: &'m M,
    config: DecodeConfig,
    cota: Option<CotaConfig>,
    cache: Option<CachePolicy>,
    retention: Retention,
}

impl<'m, M: DiffusionModel + ?Sized> Decoder<'m, M> {
    pub fn new(model: &'m M, config: DecodeConfig) -> Self {
        Self {
            model,
            config,
            cota: None,
            cache: None,
            retention: Retention::default(),
        }
    }

    pub fn with_cota(mut self, cota: Option<CotaConfig>) -> Self {
        self.cota = cota;
        self
    }

    pub fn with_cache(mut self, cache: Option<CachePolicy>) -> Self {
        self.cache = cache;
        self
    }

    pub fn with_retention(mut self, retention: Retention) -> Self {
        self.retention = retention;
        self
    }

    /// Checks every setting against the model and input without decoding.
    pub fn validate(&self, input: &InputSequence) -> Result<(), DecodeError> {
        let mc = self.model.config();
        self.config.validate(input.response_len)?;
        if let Some(cota) = &self.cota {
            cota.validate(mc.layers)?;
        }
        let ctev = self.cota.as_ref().and_then(|c| c.ctev.as_ref()).is_some();
        match (self.config.voting, ctev) {
            (Voting::Ctev, false) => {
                return Err(DecodeError::Config(
                    "voting = ctev needs entropy voting parameters".into(),
                ))
            }
            (Voting::Confidence | Voting::Ngram, true) => {
                return Err(DecodeError::Config(
                    "entropy voting parameters given but voting is not ctev".into(),
                ))
            }
            _ => {}
        }
        if let Some(policy) = &self.cache {
            policy.validate()?;
        }
        Ok(())
    }

    pub fn run(&self, input: &InputSequence) -> Result<DecodeOutput, DecodeError> {
        self.validate(input)?;
        let mc = self.model.config();
        let mut state = DecodeState::new(input, mc.default_mask_token());
        let n = state.len();
        let prefix = state.prefix_len;
        let budget = self.config.total_steps;

        let hook = match self.cota.as_ref().and_then(|c| c.ctae.as_ref()) {
            Some(cfg) => Some(CtaeHook::new(n, cfg)?),
            None => None,
        };
        let hook_ref = hook.as_ref().map(|h| h as &dyn AttentionHook);
        let ctev = self.cota.as_ref().and_then(|c| c.ctev.as_ref());
        let ctev_range = ctev.map(|c| c.layer_range(mc.layers));
        let mut cache_state = self
            .cache
            .as_ref()
            .map(|_| CacheState::new(n, prefix, budget));

        let mut out = DecodeOutput {
            tokens: Vec::new(),
            prefix_len: prefix,
            steps: Vec::new(),
            attention: Vec::new(),
            entropy: Vec::new(),
            missing_attention: Vec::new(),
        };

        for block in self.config.blocks(input.response_len)? {
            state.block = (prefix + block.lo, prefix + block.hi);
            while !state.masked_in_block().is_empty() {
                if state.step >= budget {
                    let remaining = state.masked_count();
                    out.tokens = state.tokens.clone();
                    self.finish_retention(&mut out);
                    return Err(DecodeError::BudgetExhausted {
                        budget,
                        remaining,
                        partial: Box::new(out),
                    });
                }
                let t = state.step + 1;
                let seq = state.view();

                let (trace, recompute_plan) = match (&self.cache, cache_state.as_mut()) {
                    (Some(policy), Some(cs)) => {
                        let probe = if policy.needs_probe(cs, t) {
                            Some(self.model.probe_features(&seq)?)
                        } else {
                            None
                        };
                        let plan =
                            plan_recompute(policy, cs, t, cs.final_features(), probe.as_ref());
                        let trace = self.model.forward(&seq, hook_ref, Some(&cs.view(&plan)))?;
                        (trace, plan)
                    }
                    _ => (
                        self.model.forward(&seq, hook_ref, None)?,
                        RecomputePlan::all(n, t),
                    ),
                };
                let staleness = match cache_state.as_ref() {
                    Some(cs) => cs.view(&recompute_plan).staleness_vec(),
                    None => vec![0; n],
                };

                let mut plan = predict_step(&trace, &state)?;
                match self.config.voting {
                    Voting::Confidence => {}
                    Voting::Ngram => ngram_penalty_scores(
                        &mut plan,
                        &state,
                        self.config.ngram_n,
                        self.config.ngram_penalty,
                    ),
                    Voting::Ctev => {
                        let cfg = ctev.expect("checked in validation");
                        let range = ctev_range.expect("set with ctev");
                        let e_sum = deep_entropy_sum(&trace, range)?;
                        let mut e_ctx = vec![0.0; n];
                        for c in &plan.candidates {
                            e_ctx[c.position] =
                                context_entropy(&e_sum, c.position, cfg.context_width, state.block)
                                    .value;
                        }
                        apply_ctev(&mut plan, &e_ctx, cfg);
                    }
                }
                plan.select(block.tokens_per_step);

                if self.retention.entropy {
                    out.entropy.push(StepEntropy {
                        step: t,
                        per_layer: lens_entropy(&trace),
                    });
                }
                for &(s, layer) in &self.retention.attention {
                    if s == t && layer >= 1 && layer <= trace.num_layers() {
                        out.attention.push(RetainedAttention {
                            step: t,
                            layer,
                            heads: trace.attention[layer - 1].clone(),
                        });
                    }
                }
                if let Some(cs) = cache_state.as_mut() {
                    cs.absorb(&trace, t)?;
                }
                out.steps.push(StepRecord {
                    step: t,
                    block: state.block,
                    candidates: plan.candidates.clone(),
                    chosen: plan.chosen.clone(),
                    recomputed: trace.recomputed.clone(),
                    staleness,
                    adaptive: recompute_plan.adaptive.clone(),
                });
                apply_unmask(&mut state, &plan)?;
            }
        }
        out.tokens = state.tokens;
        self.finish_retention(&mut out);
        Ok(out)
    }

    fn finish_retention(&self, out: &mut DecodeOutput) {
        for &(s, layer) in &self.retention.attention {
            if !out
                .attention
                .iter()
                .any(|a| a.step == s && a.layer == layer)
            {
                out.missing_attention.push((s, layer));
            }
        }
    }
}

/// Convenience wrapper around [`Decoder`] with default retention.
pub fn decode<M: DiffusionModel + ?Sized>(
    model: &M,
    config: &DecodeConfig,
    input: &InputSequence,
    cota: Option<&CotaConfig>,
    cache: Option<&CachePolicy>,
) -> Result<DecodeOutput, DecodeError> {
    Decoder::new(model, config.clone())
        .with_cota(cota.cloned())
        .with_cache(cache.cloned())
        .run(input)
}
