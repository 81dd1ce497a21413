//! Cross-layer entropy traces for tracked positions.

use serde::{Deserialize, Serialize};

use crate::cota::normalized_entropy_of_logits;
use crate::decoder::StepEntropy;
use crate::model::ForwardTrace;
use crate::numerics::Matrix;

/// For each recorded step a `layers x positions` grid of normalized entropy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntropyTrace {
    pub layers: usize,
    pub positions: Vec<usize>,
    pub steps: Vec<usize>,
    pub values: Vec<Matrix>,
}

impl EntropyTrace {
    /// Mean over steps and tracked positions, per layer.
    pub fn layer_means(&self) -> Vec<f64> {
        let count = (self.values.len() * self.positions.len()) as f64;
        (0..self.layers)
            .map(|l| {
                if count == 0.0 {
                    return 0.0;
                }
                let sum: f64 = self.values.iter().flat_map(|m| m.row(l).iter()).sum();
                sum / count
            })
            .collect()
    }
}

/// Entropy of the lens logits at every layer for `positions`; `traces`
/// are numbered as steps 1, 2, ...
pub fn entropy_trace(traces: &[ForwardTrace], positions: &[usize]) -> EntropyTrace {
    let layers = traces.first().map_or(0, |t| t.num_layers());
    let mut scratch = Vec::new();
    let values = traces
        .iter()
        .map(|trace| {
            Matrix::from_fn(layers, positions.len(), |l, j| {
                normalized_entropy_of_logits(trace.lens_logits[l].row(positions[j]), &mut scratch)
            })
        })
        .collect();
    EntropyTrace {
        layers,
        positions: positions.to_vec(),
        steps: (1..=traces.len()).collect(),
        values,
    }
}

/// Same selection taken from entropy retained during decoding.
pub fn entropy_trace_from_steps(steps: &[StepEntropy], positions: &[usize]) -> EntropyTrace {
    let layers = steps.first().map_or(0, |s| s.per_layer.rows());
    EntropyTrace {
        layers,
        positions: positions.to_vec(),
        steps: steps.iter().map(|s| s.step).collect(),
        values: steps
            .iter()
            .map(|s| {
                Matrix::from_fn(layers, positions.len(), |l, j| {
                    s.per_layer.get(l, positions[j])
                })
            })
            .collect(),
    }
}

/// Per-layer means averaged across samples, each sample weighted equally.
pub fn mean_layer_profile(traces: &[EntropyTrace]) -> Vec<f64> {
    let Some(first) = traces.first() else {
        return Vec::new();
    };
    let mut acc = vec![0.0; first.layers];
    for t in traces {
        for (a, m) in acc.iter_mut().zip(t.layer_means()) {
            *a += m;
        }
    }
    acc.iter().map(|a| a / traces.len() as f64).collect()
}
