//! Adjacent-repetition statistics over token sequences.
//!
//! Everything here is generic over `PartialEq` so results are invariant
//! under any relabeling of token ids.

use serde::{Deserialize, Serialize};

/// Fraction of adjacent equal pairs over the `M - 1` pairs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Arr {
    pub value: f64,
    /// Set when the sequence was shorter than two tokens and the value is a placeholder 0.
    pub degenerate: bool,
}

pub fn arr<T: PartialEq>(tokens: &[T]) -> Arr {
    if tokens.len() < 2 {
        return Arr {
            value: 0.0,
            degenerate: true,
        };
    }
    let pairs = tokens.windows(2).filter(|w| w[0] == w[1]).count();
    Arr {
        value: pairs as f64 / (tokens.len() - 1) as f64,
        degenerate: false,
    }
}

/// Lengths of maximal runs of identical tokens, in order.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct RunInventory {
    pub runs: Vec<usize>,
}

impl RunInventory {
    /// Runs of length at least two.
    pub fn rep_runs(&self) -> Vec<usize> {
        self.runs.iter().copied().filter(|&r| r >= 2).collect()
    }

    pub fn has_repetition(&self) -> bool {
        self.runs.iter().any(|&r| r >= 2)
    }

    pub fn total_len(&self) -> usize {
        self.runs.iter().sum()
    }

    /// `sum(r - 1)` over repeated runs, i.e. the number of adjacent equal pairs.
    pub fn repeated_pairs(&self) -> usize {
        self.runs.iter().map(|r| r - 1).sum()
    }
}

pub fn run_inventory<T: PartialEq>(tokens: &[T]) -> RunInventory {
    let mut runs = Vec::new();
    let mut iter = tokens.iter();
    let Some(mut prev) = iter.next() else {
        return RunInventory { runs };
    };
    let mut len = 1;
    for tok in iter {
        if tok == prev {
            len += 1;
        } else {
            runs.push(len);
            len = 1;
            prev = tok;
        }
    }
    runs.push(len);
    RunInventory { runs }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunStats {
    pub mrl: usize,
    pub arl: f64,
    pub p95rl: usize,
}

/// Max, mean and nearest-rank 95th percentile of the repeated runs, or
/// `None` when there are none.
pub fn mrl_arl_p95(inventory: &RunInventory) -> Option<RunStats> {
    let mut rep = inventory.rep_runs();
    if rep.is_empty() {
        return None;
    }
    rep.sort_unstable();
    let n = rep.len();
    let rank = (95 * n).div_ceil(100);
    Some(RunStats {
        mrl: rep[n - 1],
        arl: rep.iter().sum::<usize>() as f64 / n as f64,
        p95rl: rep[rank - 1],
    })
}

/// Fraction of samples containing at least one repeated run.
pub fn srr<T: PartialEq, S: AsRef<[T]>>(samples: &[S]) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    let dup = samples
        .iter()
        .filter(|s| run_inventory(s.as_ref()).has_repetition())
        .count();
    dup as f64 / samples.len() as f64
}

/// Per-sample repetition scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRepetition {
    pub arr: Arr,
    pub inventory: RunInventory,
    pub stats: Option<RunStats>,
}

impl SampleRepetition {
    pub fn of<T: PartialEq>(tokens: &[T]) -> Self {
        let inventory = run_inventory(tokens);
        Self {
            arr: arr(tokens),
            stats: mrl_arl_p95(&inventory),
            inventory,
        }
    }

    pub fn repetitive(&self) -> bool {
        self.stats.is_some()
    }
}

/// Batch aggregate. Absent fields mean no sample repeated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepetitionReport {
    pub samples: usize,
    /// Mean ARR over all samples.
    pub arr: f64,
    /// Mean ARR over repetitive samples only.
    pub arr_repetitive: Option<f64>,
    pub srr: f64,
    pub mrl: Option<f64>,
    pub arl: Option<f64>,
    pub p95rl: Option<f64>,
    /// Set for an empty batch.
    pub empty: bool,
}

/// Collects per-sample scores; merging is concatenation, so it is
/// associative and the final reduction always runs in sample order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RepetitionAccumulator {
    samples: Vec<SampleRepetition>,
}

impl RepetitionAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, sample: SampleRepetition) {
        self.samples.push(sample);
    }

    pub fn push_tokens<T: PartialEq>(&mut self, tokens: &[T]) {
        self.push(SampleRepetition::of(tokens));
    }

    pub fn merge(mut self, other: Self) -> Self {
        self.samples.extend(other.samples);
        self
    }

    pub fn samples(&self) -> &[SampleRepetition] {
        &self.samples
    }

    pub fn report(&self) -> RepetitionReport {
        let n = self.samples.len();
        let rep: Vec<&SampleRepetition> = self.samples.iter().filter(|s| s.repetitive()).collect();
        let mean = |xs: &mut dyn Iterator<Item = f64>, count: usize| -> Option<f64> {
            (count > 0).then(|| xs.sum::<f64>() / count as f64)
        };
        let stats = |f: fn(&RunStats) -> f64| {
            mean(
                &mut rep.iter().map(|s| f(s.stats.as_ref().expect("repetitive"))),
                rep.len(),
            )
        };
        RepetitionReport {
            samples: n,
            arr: mean(&mut self.samples.iter().map(|s| s.arr.value), n).unwrap_or(0.0),
            arr_repetitive: mean(&mut rep.iter().map(|s| s.arr.value), rep.len()),
            srr: if n == 0 {
                0.0
            } else {
                rep.len() as f64 / n as f64
            },
            mrl: stats(|s| s.mrl as f64),
            arl: stats(|s| s.arl),
            p95rl: stats(|s| s.p95rl as f64),
            empty: n == 0,
        }
    }
}

pub fn repetition_report<T: PartialEq, S: AsRef<[T]>>(samples: &[S]) -> RepetitionReport {
    let mut acc = RepetitionAccumulator::new();
    for s in samples {
        acc.push_tokens(s.as_ref());
    }
    acc.report()
}
