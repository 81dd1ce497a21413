//! Context-token attention enhancement: a distance decay multiplied into
//! post-softmax attention, plus the additive linear-bias alternative.

use serde::{Deserialize, Serialize};

use super::CotaError;
use crate::model::AttentionHook;
use crate::numerics::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BiasKind {
    /// Multiply attention weights by the Gaussian decay matrix.
    #[default]
    GaussianDecay,
    /// Add `-slope * |i - j|` to the pre-softmax scores.
    Alibi,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CtaeConfig {
    pub tau: f64,
    pub gamma_min: f64,
    pub renormalize_rows: bool,
    pub bias_kind: BiasKind,
    pub alibi_slope: f64,
}

impl Default for CtaeConfig {
    fn default() -> Self {
        Self {
            tau: 5.0,
            gamma_min: 0.5,
            renormalize_rows: false,
            bias_kind: BiasKind::GaussianDecay,
            alibi_slope: 0.1,
        }
    }
}

impl CtaeConfig {
    pub fn validate(&self) -> Result<(), CotaError> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(CotaError::InvalidConfig(format!(
                "tau {} must be > 0",
                self.tau
            )));
        }
        if !(self.gamma_min > 0.0 && self.gamma_min <= 1.0) {
            return Err(CotaError::InvalidConfig(format!(
                "gamma_min {} outside (0, 1]",
                self.gamma_min
            )));
        }
        if !(self.alibi_slope >= 0.0 && self.alibi_slope.is_finite()) {
            return Err(CotaError::InvalidConfig(format!(
                "alibi_slope {} must be >= 0",
                self.alibi_slope
            )));
        }
        Ok(())
    }
}

/// `T x T` decay `G[i][j] = gamma_min + (1 - gamma_min) * exp(-(|i - j| / tau)^2)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DecayMatrix(Matrix);

impl DecayMatrix {
    pub fn matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.0.get(i, j)
    }

    pub fn len(&self) -> usize {
        self.0.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.0.rows() == 0
    }
}

pub fn decay_value(distance: usize, tau: f64, gamma_min: f64) -> f64 {
    let g = (-(distance as f64 / tau).powi(2)).exp();
    gamma_min + (1.0 - gamma_min) * g
}

pub fn build_decay(t: usize, config: &CtaeConfig) -> DecayMatrix {
    DecayMatrix(Matrix::from_fn(t, t, |i, j| {
        decay_value(i.abs_diff(j), config.tau, config.gamma_min)
    }))
}

/// Multiplies one attention matrix by the decay in place.
///
/// Returns the rows that summed to zero; with `renormalize` those are left
/// untouched and every other row is rescaled to sum to one.
pub fn apply_decay(
    weights: &mut Matrix,
    decay: &DecayMatrix,
    renormalize: bool,
) -> Result<Vec<usize>, CotaError> {
    if weights.shape() != decay.0.shape() {
        return Err(CotaError::Shape(format!(
            "attention {:?} vs decay {:?}",
            weights.shape(),
            decay.0.shape()
        )));
    }
    let mut zero_rows = Vec::new();
    for i in 0..weights.rows() {
        let row = weights.row_mut(i);
        for (w, g) in row.iter_mut().zip(decay.0.row(i)) {
            *w *= g;
        }
        if renormalize {
            let sum: f64 = row.iter().sum();
            if sum == 0.0 {
                zero_rows.push(i);
                continue;
            }
            for w in row.iter_mut() {
                *w /= sum;
            }
        }
    }
    Ok(zero_rows)
}

/// Zero-sum rows found while enhancing, as `(layer, head, row)`.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CtaeReport {
    pub zero_rows: Vec<(usize, usize, usize)>,
}

/// Applies the decay to every layer and head.
pub fn apply_ctae(
    attention: &mut [Vec<Matrix>],
    decay: &DecayMatrix,
    renormalize: bool,
) -> Result<CtaeReport, CotaError> {
    let mut report = CtaeReport::default();
    for (layer, heads) in attention.iter_mut().enumerate() {
        for (head, weights) in heads.iter_mut().enumerate() {
            for row in apply_decay(weights, decay, renormalize)? {
                report.zero_rows.push((layer, head, row));
            }
        }
    }
    Ok(report)
}

/// Additive bias `-slope * |i - j|`, applied before softmax.
pub fn build_alibi_bias(t: usize, slope: f64) -> Matrix {
    Matrix::from_fn(t, t, |i, j| -slope * i.abs_diff(j) as f64)
}

/// Attention hook that applies the configured bias to every layer and head.
pub struct CtaeHook {
    kind: BiasKind,
    decay: DecayMatrix,
    alibi: Matrix,
    renormalize: bool,
}

impl CtaeHook {
    pub fn new(seq_len: usize, config: &CtaeConfig) -> Result<Self, CotaError> {
        config.validate()?;
        let (decay, alibi) = match config.bias_kind {
            BiasKind::GaussianDecay => (build_decay(seq_len, config), Matrix::zeros(0, 0)),
            BiasKind::Alibi => (
                DecayMatrix(Matrix::zeros(0, 0)),
                build_alibi_bias(seq_len, config.alibi_slope),
            ),
        };
        Ok(Self {
            kind: config.bias_kind,
            decay,
            alibi,
            renormalize: config.renormalize_rows,
        })
    }
}

impl AttentionHook for CtaeHook {
    fn bias_scores(&self, _layer: usize, _head: usize, scores: &mut Matrix) {
        if self.kind != BiasKind::Alibi {
            return;
        }
        for i in 0..scores.rows() {
            for (s, b) in scores.row_mut(i).iter_mut().zip(self.alibi.row(i)) {
                *s += b;
            }
        }
    }

    fn transform_weights(&self, layer: usize, head: usize, weights: &mut Matrix) {
        if self.kind != BiasKind::GaussianDecay {
            return;
        }
        let zero_rows = apply_decay(weights, &self.decay, self.renormalize)
            .expect("hook is built for the sequence length");
        if !zero_rows.is_empty() {
            log::warn!(
                "CTAE left {} zero-sum rows at layer {layer} head {head}",
                zero_rows.len()
            );
        }
    }
}
