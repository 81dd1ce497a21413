//! Single runs: decode every corpus sample and write reports, provenance
//! and a manifest with content digests.
//!
//! Files written under the run directory:
//!
//! | file | content |
//! |------|---------|
//! | `config.toml` | the config snapshot |
//! | `samples.jsonl` | one line per sample: prefix, response, completion flag |
//! | `provenance.jsonl` | one line per decode step |
//! | `report.csv`, `report.json` | aggregate repetition and efficiency |
//! | `manifest.json` | everything above plus SHA-256 digests |
//! | `timing.json` | wall-clock timings, not covered by digests |

use std::path::Path;
use std::time::Instant;

use cotasim_core::decoder::{DecodeError, DecodeOutput, Decoder, Retention, StepRecord};
use cotasim_core::metrics::{
    efficiency_from_counts, BlockFlops, EfficiencyRecord, RepetitionAccumulator, RepetitionReport,
};
use cotasim_core::model::{DiffusionModel, TokenId};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::corpus::make_corpus;
use crate::report::{digest_file, write_file, write_report_csv, FileDigest, ReportRow};
use crate::HarnessError;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Seeds {
    pub model: u64,
    pub corpus: u64,
    pub decode: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleOutput {
    pub sample: usize,
    pub prefix: Vec<TokenId>,
    pub response: Vec<TokenId>,
    pub complete: bool,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: ExperimentConfig,
    pub seeds: Seeds,
    pub samples: Vec<SampleOutput>,
    pub repetition: RepetitionReport,
    pub efficiency: EfficiencyRecord,
    pub files: Vec<FileDigest>,
    pub complete: bool,
    pub failures: Vec<String>,
}

impl RunManifest {
    pub fn report_row(&self) -> ReportRow {
        ReportRow::new(&self.repetition, &self.efficiency)
    }

    pub fn load(dir: &Path) -> Result<Self, HarnessError> {
        let path = dir.join("manifest.json");
        let text = std::fs::read_to_string(&path).map_err(|e| HarnessError::io(&path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

#[derive(Serialize)]
struct ProvenanceLine<'a> {
    sample: usize,
    #[serde(flatten)]
    record: &'a StepRecord,
}

#[derive(Debug, Deserialize)]
pub struct ProvenanceRecord {
    pub sample: usize,
    #[serde(flatten)]
    pub record: StepRecord,
}

#[derive(Serialize)]
struct Timing {
    wall_seconds: f64,
    wall_tokens_per_second: f64,
}

/// Outcome of one sample's decode.
struct SampleRun {
    output: SampleOutput,
    steps: Vec<StepRecord>,
}

fn decode_sample(
    model: &(impl DiffusionModel + ?Sized),
    config: &ExperimentConfig,
    index: usize,
    input: &cotasim_core::decoder::InputSequence,
) -> SampleRun {
    let decoder = Decoder::new(model, config.decode.clone())
        .with_cota(Some(config.cota.clone()))
        .with_cache(Some(config.cache.clone()))
        .with_retention(Retention {
            entropy: false,
            attention: Vec::new(),
        });
    let split = |out: DecodeOutput, complete: bool, error: Option<String>| SampleRun {
        output: SampleOutput {
            sample: index,
            prefix: input.prefix.clone(),
            response: out.response().to_vec(),
            complete,
            error,
        },
        steps: out.steps,
    };
    match decoder.run(input) {
        Ok(out) => split(out, true, None),
        Err(DecodeError::BudgetExhausted {
            partial,
            remaining,
            budget,
        }) => split(
            *partial,
            false,
            Some(format!(
                "step budget {budget} exhausted with {remaining} masked"
            )),
        ),
        Err(e) => SampleRun {
            output: SampleOutput {
                sample: index,
                prefix: input.prefix.clone(),
                response: Vec::new(),
                complete: false,
                error: Some(e.to_string()),
            },
            steps: Vec::new(),
        },
    }
}

/// Runs `config` and writes every output file into `out_dir`.
///
/// `base` resolves a relative script path. The returned manifest has
/// `complete == false` if any sample failed; outputs are still written.
pub fn run(
    config: &ExperimentConfig,
    base: Option<&Path>,
    out_dir: &Path,
) -> Result<RunManifest, HarnessError> {
    config.validate(base)?;
    let model = config.build_model(base)?;
    let c = &config.corpus;
    let corpus = make_corpus(
        c.n_samples,
        c.prefix_length,
        c.response_length,
        config.model.vocab_size,
        c.seed,
    );
    std::fs::create_dir_all(out_dir).map_err(|e| HarnessError::io(out_dir, e))?;

    let started = Instant::now();
    let runs: Vec<SampleRun> = corpus
        .par_iter()
        .enumerate()
        .map(|(i, input)| decode_sample(&model, config, i, input))
        .collect();
    let wall = started.elapsed().as_secs_f64();

    let mut acc = RepetitionAccumulator::new();
    let mut failures = Vec::new();
    let (mut recomputed, mut total, mut generated) = (0u64, 0u64, 0usize);
    for r in &runs {
        if r.output.complete {
            acc.push_tokens(&r.output.response);
            generated += r.output.response.len();
        } else {
            failures.push(format!(
                "sample {}: {}",
                r.output.sample,
                r.output.error.as_deref().unwrap_or("failed")
            ));
        }
        recomputed += r
            .steps
            .iter()
            .map(|s| s.recompute_count() as u64)
            .sum::<u64>();
        total += (r.steps.len() * (c.prefix_length + c.response_length)) as u64;
    }
    let repetition = acc.report();
    let per_position = BlockFlops::new(&config.model, c.prefix_length + c.response_length).total()
        * config.model.layers as u64;
    let efficiency = efficiency_from_counts(
        per_position,
        recomputed,
        total,
        generated,
        config.output.nominal_flops_per_second,
    );
    if repetition.empty {
        log::warn!("run produced no complete samples");
    }

    write_file(&out_dir.join("config.toml"), config.to_toml()?.as_bytes())?;
    let mut samples_text = String::new();
    let mut prov_text = String::new();
    for r in &runs {
        samples_text.push_str(&serde_json::to_string(&r.output)?);
        samples_text.push('\n');
        for record in &r.steps {
            prov_text.push_str(&serde_json::to_string(&ProvenanceLine {
                sample: r.output.sample,
                record,
            })?);
            prov_text.push('\n');
        }
    }
    write_file(&out_dir.join("samples.jsonl"), samples_text.as_bytes())?;
    write_file(&out_dir.join("provenance.jsonl"), prov_text.as_bytes())?;
    let row = ReportRow::new(&repetition, &efficiency);
    write_report_csv(&out_dir.join("report.csv"), &[row])?;
    let report_json = serde_json::json!({ "repetition": repetition, "efficiency": efficiency });
    write_file(
        &out_dir.join("report.json"),
        serde_json::to_string_pretty(&report_json)?.as_bytes(),
    )?;

    let files = [
        "config.toml",
        "samples.jsonl",
        "provenance.jsonl",
        "report.csv",
        "report.json",
    ]
    .iter()
    .map(|name| digest_file(out_dir, name))
    .collect::<Result<Vec<_>, _>>()?;
    let manifest = RunManifest {
        config: config.clone(),
        seeds: Seeds {
            model: config.model.seed,
            corpus: c.seed,
            decode: config.decode.seed,
        },
        samples: runs.into_iter().map(|r| r.output).collect(),
        repetition,
        efficiency,
        files,
        complete: failures.is_empty(),
        failures,
    };
    write_file(
        &out_dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)?.as_bytes(),
    )?;
    let timing = Timing {
        wall_seconds: wall,
        wall_tokens_per_second: if wall > 0.0 {
            generated as f64 / wall
        } else {
            0.0
        },
    };
    write_file(
        &out_dir.join("timing.json"),
        serde_json::to_string_pretty(&timing)?.as_bytes(),
    )?;
    Ok(manifest)
}

/// Recomputes the report row of an existing run from its sample and
/// provenance streams.
pub fn rescore(dir: &Path) -> Result<ReportRow, HarnessError> {
    let manifest = RunManifest::load(dir)?;
    let cfg = &manifest.config;
    let read = |name: &str| {
        let path = dir.join(name);
        std::fs::read_to_string(&path).map_err(|e| HarnessError::io(&path, e))
    };
    let mut acc = RepetitionAccumulator::new();
    let mut generated = 0;
    for line in read("samples.jsonl")?.lines() {
        let s: SampleOutput = serde_json::from_str(line)?;
        if s.complete {
            generated += s.response.len();
            acc.push_tokens(&s.response);
        }
    }
    let seq_len = cfg.corpus.prefix_length + cfg.corpus.response_length;
    let (mut recomputed, mut total) = (0u64, 0u64);
    for line in read("provenance.jsonl")?.lines() {
        let p: ProvenanceRecord = serde_json::from_str(line)?;
        if p.record.recomputed.len() != seq_len {
            return Err(HarnessError::Malformed(format!(
                "sample {} step {} has {} positions, expected {seq_len}",
                p.sample,
                p.record.step,
                p.record.recomputed.len()
            )));
        }
        recomputed += p.record.recompute_count() as u64;
        total += seq_len as u64;
    }
    let per_position = BlockFlops::new(&cfg.model, seq_len).total() * cfg.model.layers as u64;
    let eff = efficiency_from_counts(
        per_position,
        recomputed,
        total,
        generated,
        cfg.output.nominal_flops_per_second,
    );
    Ok(ReportRow::new(&acc.report(), &eff))
}
