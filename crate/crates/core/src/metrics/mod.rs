//! Repetition statistics, entropy traces and efficiency accounting.

pub mod efficiency;
pub mod entropy;
pub mod repetition;

pub use efficiency::{efficiency_from_counts, flop_estimate, BlockFlops, EfficiencyRecord};
pub use entropy::{entropy_trace, entropy_trace_from_steps, mean_layer_profile, EntropyTrace};
pub use repetition::{
    arr, mrl_arl_p95, repetition_report, run_inventory, srr, Arr, RepetitionAccumulator,
    RepetitionReport, RunInventory, RunStats, SampleRepetition,
};
