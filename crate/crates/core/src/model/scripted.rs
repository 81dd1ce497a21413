//! Table-driven model used as a deterministic test fixture.
//!
//! A [`Script`] is an ordered list of rules. For every position the first
//! rule whose [`Condition`] holds picks a [`LogitTable`]; the table then
//! yields that position's logits at every layer and its attention rows.
//! Conditions can see the position's cache staleness, which is how cache
//! reuse is turned into deterministic repetition.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{
    check_hooked_weights, AttentionHook, DiffusionModel, ForwardTrace, ModelConfig, ModelError,
    SequenceView, TokenId,
};
use crate::cache::{substitute, CacheView};
use crate::numerics::{softmax_into, Matrix};

/// Predicate over one position of the current sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Condition {
    Always,
    Masked,
    Unmasked,
    Prefix,
    StalenessAtLeast(usize),
    TokenIs(TokenId),
    All(Vec<Condition>),
    Any(Vec<Condition>),
    Not(Box<Condition>),
}

struct PositionContext<'a> {
    seq: &'a SequenceView<'a>,
    position: usize,
    staleness: usize,
    seq_hash: u64,
}

impl Condition {
    fn holds(&self, ctx: &PositionContext<'_>) -> bool {
        let p = ctx.position;
        match self {
            Condition::Always => true,
            Condition::Masked => ctx.seq.masked[p],
            Condition::Unmasked => !ctx.seq.masked[p],
            Condition::Prefix => p < ctx.seq.prefix_len,
            Condition::StalenessAtLeast(n) => ctx.staleness >= *n,
            Condition::TokenIs(t) => ctx.seq.tokens[p] == *t,
            Condition::All(cs) => cs.iter().all(|c| c.holds(ctx)),
            Condition::Any(cs) => cs.iter().any(|c| c.holds(ctx)),
            Condition::Not(c) => !c.holds(ctx),
        }
    }
}

/// How one logit row is generated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RowSpec {
    /// All-zero logits.
    Uniform,
    /// `margin` on a fixed token, 0 elsewhere.
    Token { token: TokenId, margin: f64 },
    /// `margin` on the token currently at the position.
    Own { margin: f64 },
    /// `margin + jitter * u` on a per-position token, where consecutive
    /// positions get consecutive entries of the vocabulary minus `exclude`
    /// and the mask token, offset by a hash of the prefix. `u` in [0, 1) is
    /// a hash of (prefix, position).
    Distinct {
        margin: f64,
        #[serde(default)]
        jitter: f64,
        #[serde(default)]
        exclude: Vec<TokenId>,
    },
    /// Explicit rows, indexed by position modulo the row count.
    Rows { rows: Vec<Vec<f64>> },
}

impl RowSpec {
    fn validate(&self, vocab: usize) -> Result<(), ModelError> {
        match self {
            RowSpec::Token { token, .. } if *token as usize >= vocab => Err(ModelError::Script(
                format!("token {token} outside vocabulary {vocab}"),
            )),
            RowSpec::Rows { rows } if rows.is_empty() || rows.iter().any(|r| r.len() != vocab) => {
                Err(ModelError::Script(format!(
                    "explicit rows must be non-empty with {vocab} columns"
                )))
            }
            RowSpec::Rows { rows } if rows.iter().flatten().any(|v| !v.is_finite()) => {
                Err(ModelError::Script("explicit rows must be finite".into()))
            }
            _ => Ok(()),
        }
    }

    fn fill(&self, ctx: &PositionContext<'_>, out: &mut [f64]) {
        out.fill(0.0);
        let vocab = out.len();
        match self {
            RowSpec::Uniform => {}
            RowSpec::Token { token, margin } => out[*token as usize] = *margin,
            RowSpec::Own { margin } => out[ctx.seq.tokens[ctx.position] as usize] = *margin,
            RowSpec::Distinct {
                margin,
                jitter,
                exclude,
            } => {
                let allowed: Vec<usize> = (0..vocab)
                    .filter(|&v| {
                        v as TokenId != ctx.seq.mask_token && !exclude.contains(&(v as TokenId))
                    })
                    .collect();
                if allowed.is_empty() {
                    return;
                }
                let offset = (ctx.seq_hash % allowed.len() as u64) as usize;
                let token = allowed[(ctx.position + offset) % allowed.len()];
                let u = unit_interval(splitmix64(ctx.seq_hash ^ (ctx.position as u64 + 1)));
                out[token] = margin + jitter * u;
            }
            RowSpec::Rows { rows } => out.copy_from_slice(&rows[ctx.position % rows.len()]),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AttentionSpec {
    /// Scores `-sharpness * (layer / L) * |i - j|`: local, sharpening with depth.
    Local {
        sharpness: f64,
    },
    Uniform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LogitTable {
    pub name: String,
    /// Output layer, which is also the final logits.
    pub output: RowSpec,
    /// Layers from `converge_layer` up to (excluding) the output layer.
    pub deep: RowSpec,
    /// Layers below `converge_layer`.
    pub shallow: RowSpec,
    pub attention: AttentionSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScriptedRule {
    pub when: Condition,
    pub table: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Script {
    /// First 1-based layer that uses a table's `deep` rows.
    pub converge_layer: usize,
    /// Table used when no rule matches.
    pub default_table: String,
    pub tables: Vec<LogitTable>,
    #[serde(default)]
    pub rules: Vec<ScriptedRule>,
}

impl Script {
    /// One table, no rules: every position gets `row` at every layer.
    pub fn constant(row: RowSpec) -> Self {
        Self {
            converge_layer: 1,
            default_table: "default".into(),
            tables: vec![LogitTable {
                name: "default".into(),
                output: row.clone(),
                deep: row.clone(),
                shallow: row,
                attention: AttentionSpec::Uniform,
            }],
            rules: Vec::new(),
        }
    }

    fn table_index(&self, name: &str) -> Option<usize> {
        self.tables.iter().position(|t| t.name == name)
    }
}

/// Fixture where stale features flip predictions to `repeat_token`.
///
/// Fresh masked positions predict distinct neighbouring tokens whose
/// confidence varies per position, with deep-layer logits that converge on
/// the same token. Masked positions whose features are at least
/// `trigger_staleness` steps old predict `repeat_token` with higher
/// confidence than any fresh prediction, while their deep-layer logits stay
/// flat. Unmasked positions holding `repeat_token` keep flat deep layers
/// while stale.
pub fn build_sticky_script(repeat_token: TokenId, trigger_staleness: usize) -> Script {
    let stale = Condition::StalenessAtLeast(trigger_staleness);
    let table = |name: &str, output, deep, attention| LogitTable {
        name: name.into(),
        output,
        deep,
        shallow: RowSpec::Uniform,
        attention,
    };
    let local = AttentionSpec::Local { sharpness: 1.0 };
    Script {
        converge_layer: 3,
        default_table: "fresh".into(),
        tables: vec![
            table(
                "sticky",
                RowSpec::Token {
                    token: repeat_token,
                    margin: 8.0,
                },
                RowSpec::Uniform,
                AttentionSpec::Uniform,
            ),
            table(
                "uncertain_self",
                RowSpec::Own { margin: 10.0 },
                RowSpec::Uniform,
                AttentionSpec::Uniform,
            ),
            table(
                "self",
                RowSpec::Own { margin: 10.0 },
                RowSpec::Own { margin: 10.0 },
                local.clone(),
            ),
            table(
                "fresh",
                RowSpec::Distinct {
                    margin: 5.0,
                    jitter: 2.0,
                    exclude: vec![repeat_token],
                },
                RowSpec::Distinct {
                    margin: 10.0,
                    jitter: 0.0,
                    exclude: vec![repeat_token],
                },
                local,
            ),
        ],
        rules: vec![
            ScriptedRule {
                when: Condition::All(vec![Condition::Masked, stale.clone()]),
                table: "sticky".into(),
            },
            ScriptedRule {
                when: Condition::All(vec![
                    Condition::Unmasked,
                    Condition::TokenIs(repeat_token),
                    stale,
                ]),
                table: "uncertain_self".into(),
            },
            ScriptedRule {
                when: Condition::Unmasked,
                table: "self".into(),
            },
        ],
    }
}

pub struct ScriptedModel {
    config: ModelConfig,
    script: Script,
    default_index: usize,
    rule_tables: Vec<usize>,
    feature_basis: Matrix,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn unit_interval(h: u64) -> f64 {
    (h >> 11) as f64 / (1u64 << 53) as f64
}

fn prefix_hash(seq: &SequenceView<'_>) -> u64 {
    seq.tokens[..seq.prefix_len]
        .iter()
        .fold(0x51_7cc1_b727_220a, |h, &t| splitmix64(h ^ u64::from(t)))
}

impl ScriptedModel {
    pub fn new(config: ModelConfig, script: Script) -> Result<Self, ModelError> {
        config.validate()?;
        if script.converge_layer == 0 || script.converge_layer > config.layers {
            return Err(ModelError::Script(format!(
                "converge_layer {} outside [1, {}]",
                script.converge_layer, config.layers
            )));
        }
        let lookup = |name: &str| {
            script
                .table_index(name)
                .ok_or_else(|| ModelError::Script(format!("unknown table `{name}`")))
        };
        let default_index = lookup(&script.default_table)?;
        let rule_tables = script
            .rules
            .iter()
            .map(|r| lookup(&r.table))
            .collect::<Result<Vec<_>, _>>()?;
        for t in &script.tables {
            for row in [&t.output, &t.deep, &t.shallow] {
                row.validate(config.vocab_size)?;
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let feature_basis = Matrix::from_fn(config.vocab_size, config.model_dim, |_, _| {
            normal.sample(&mut rng)
        });
        Ok(Self {
            config,
            script,
            default_index,
            rule_tables,
            feature_basis,
        })
    }

    pub fn script(&self) -> &Script {
        &self.script
    }

    fn table_for(&self, ctx: &PositionContext<'_>) -> &LogitTable {
        let idx = self
            .script
            .rules
            .iter()
            .zip(&self.rule_tables)
            .find(|(rule, _)| rule.when.holds(ctx))
            .map_or(self.default_index, |(_, &i)| i);
        &self.script.tables[idx]
    }

    /// Feature row: the token's basis vector plus half of each neighbour's.
    fn features(&self, seq: &SequenceView<'_>, layer: usize) -> Matrix {
        let n = seq.len();
        let scale = 1.0 + layer as f64 / self.config.layers as f64;
        Matrix::from_fn(n, self.config.model_dim, |p, j| {
            let basis = |q: usize| self.feature_basis.get(seq.tokens[q] as usize, j);
            let mut v = basis(p);
            if p > 0 {
                v += 0.5 * basis(p - 1);
            }
            if p + 1 < n {
                v += 0.5 * basis(p + 1);
            }
            v * scale
        })
    }
}

impl DiffusionModel for ScriptedModel {
    fn config(&self) -> &ModelConfig {
        &self.config
    }

    fn forward(
        &self,
        seq: &SequenceView<'_>,
        hook: Option<&dyn AttentionHook>,
        cache: Option<&CacheView<'_>>,
    ) -> Result<ForwardTrace, ModelError> {
        seq.check(&self.config)?;
        let n = seq.len();
        let layers = self.config.layers;
        let vocab = self.config.vocab_size;
        let seq_hash = prefix_hash(seq);
        let tables: Vec<&LogitTable> = (0..n)
            .map(|position| {
                let ctx = PositionContext {
                    seq,
                    position,
                    staleness: cache.map_or(0, |c| c.staleness(position)),
                    seq_hash,
                };
                self.table_for(&ctx)
            })
            .collect();

        let mut lens_logits = Vec::with_capacity(layers);
        for layer in 1..=layers {
            let mut m = Matrix::zeros(n, vocab);
            for (position, table) in tables.iter().enumerate() {
                let spec = if layer == layers {
                    &table.output
                } else if layer >= self.script.converge_layer {
                    &table.deep
                } else {
                    &table.shallow
                };
                let ctx = PositionContext {
                    seq,
                    position,
                    staleness: 0,
                    seq_hash,
                };
                spec.fill(&ctx, m.row_mut(position));
            }
            lens_logits.push(m);
        }

        let mut attention = Vec::with_capacity(layers);
        for layer in 0..layers {
            let depth = (layer + 1) as f64 / layers as f64;
            let mut heads = Vec::with_capacity(self.config.heads);
            for head in 0..self.config.heads {
                let mut scores = Matrix::from_fn(n, n, |i, j| match &tables[i].attention {
                    AttentionSpec::Local { sharpness } => {
                        -sharpness * depth * (i as f64 - j as f64).abs()
                    }
                    AttentionSpec::Uniform => 0.0,
                });
                if let Some(hook) = hook {
                    hook.bias_scores(layer, head, &mut scores);
                }
                let mut weights = Matrix::zeros(n, n);
                for i in 0..n {
                    softmax_into(scores.row(i), weights.row_mut(i));
                }
                if let Some(hook) = hook {
                    hook.transform_weights(layer, head, &mut weights);
                    check_hooked_weights(layer, head, &weights)?;
                }
                heads.push(weights);
            }
            attention.push(heads);
        }

        let hidden = (0..layers).map(|l| self.features(seq, l)).collect();
        let final_logits = lens_logits.last().expect("layers >= 4").clone();
        let mut trace = ForwardTrace {
            attention,
            hidden,
            lens_logits,
            final_logits,
            recomputed: vec![true; n],
        };
        if let Some(view) = cache {
            substitute(&mut trace, view)?;
        }
        Ok(trace)
    }

    fn probe_features(&self, seq: &SequenceView<'_>) -> Result<Matrix, ModelError> {
        seq.check(&self.config)?;
        Ok(self.features(seq, self.config.layers - 1))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::row_softmax;

    fn config() -> ModelConfig {
        ModelConfig {
            backend: super::super::Backend::Scripted,
            ..ModelConfig::default()
        }
    }

    fn seq<'a>(tokens: &'a [u32], masked: &'a [bool]) -> SequenceView<'a> {
        SequenceView {
            tokens,
            masked,
            prefix_len: 2,
            mask_token: 63,
        }
    }

    #[test]
    fn uniform_default_rule_gives_one_over_v() {
        let m = ScriptedModel::new(config(), Script::constant(RowSpec::Uniform)).unwrap();
        let t = m
            .forward(
                &seq(&[1, 2, 63, 63], &[false, false, true, true]),
                None,
                None,
            )
            .unwrap();
        let p = row_softmax(&t.final_logits).unwrap();
        for i in 2..4 {
            let max = p.row(i).iter().copied().fold(0.0, f64::max);
            assert!((max - 1.0 / 64.0).abs() < 1e-15);
        }
    }

    #[test]
    fn sticky_fresh_positions_predict_distinct_tokens() {
        let m = ScriptedModel::new(config(), build_sticky_script(0, 3)).unwrap();
        let tokens = [5, 9, 63, 63, 63, 63];
        let masked = [false, false, true, true, true, true];
        let t = m.forward(&seq(&tokens, &masked), None, None).unwrap();
        let argmax: Vec<usize> = (2..6)
            .map(|i| {
                let row = t.final_logits.row(i);
                (0..64)
                    .max_by(|&a, &b| row[a].total_cmp(&row[b]).then(b.cmp(&a)))
                    .unwrap()
            })
            .collect();
        for w in argmax.windows(2) {
            assert_ne!(w[0], w[1]);
        }
        assert!(argmax.iter().all(|&tok| tok != 0 && tok != 63));
    }

    #[test]
    fn unknown_table_is_rejected() {
        let mut script = build_sticky_script(0, 3);
        script.rules[0].table = "nope".into();
        assert!(matches!(
            ScriptedModel::new(config(), script),
            Err(ModelError::Script(_))
        ));
    }
}
