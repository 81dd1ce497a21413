//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use cotasim_core::cache::{CacheMode, CachePolicy};
use cotasim_core::cota::{
    apply_ctae, build_decay, deep_entropy_sum, normalized_entropy, CotaConfig, CtaeConfig,
    CtaeHook, CtevConfig, LayerRange,
};
use cotasim_core::decoder::{decode, DecodeConfig, InputSequence, Voting};
use cotasim_core::metrics::{
    arr, flop_estimate, mrl_arl_p95, repetition_report, run_inventory, srr, RepetitionReport,
};
use cotasim_core::model::{DiffusionModel, ForwardTrace, ModelConfig, SequenceView, ToyModel};
use cotasim_harness::config::ExperimentConfig;
use cotasim_harness::run::{run, RunManifest};
use cotasim_harness::sweep::{point_dir_name, sweep};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

// Tolerances and budgets, fixed here rather than tuned per run.
const DECAY_AT_FIVE: f64 = 0.68394;
const DECAY_TOL: f64 = 1e-5;
const ENTROPY_TOL: f64 = 1e-9;
const METRIC_BUDGET: Duration = Duration::from_secs(5);
const CACHE_ORACLE_BUDGET: Duration = Duration::from_secs(30);
const STICKY_BUDGET: Duration = Duration::from_secs(60);
const METRIC_SEQUENCES: usize = 1000;
const DECAY_DRAWS: usize = 50;
const IDENTITY_DECODES: u64 = 20;
const ORACLE_SEEDS: u64 = 20;
const STICKY_SAMPLES: usize = 100;

type Outcome = Result<String, String>;
type Criterion<'a> = (&'static str, Box<dyn Fn() -> Outcome + 'a>);

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn configs_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("configs")
}

fn load_config(name: &str, overrides: &[&str]) -> ExperimentConfig {
    ExperimentConfig::load(&configs_dir().join(name))
        .and_then(|c| c.with_overrides(overrides))
        .unwrap_or_else(|e| panic!("{name}: {e}"))
}

// ---------------------------------------------------------------------------
// Brute-force oracles
// ---------------------------------------------------------------------------

struct OracleStats {
    arr: f64,
    runs: Vec<usize>,
    stats: Option<(usize, f64, usize)>,
}

fn oracle_metrics(seq: &[u8]) -> OracleStats {
    let m = seq.len();
    let mut pairs = 0;
    for i in 1..m {
        if seq[i] == seq[i - 1] {
            pairs += 1;
        }
    }
    // run starts are positions whose left neighbour differs
    let starts: Vec<usize> = (0..m).filter(|&i| i == 0 || seq[i] != seq[i - 1]).collect();
    let runs: Vec<usize> = starts
        .iter()
        .enumerate()
        .map(|(k, &s)| starts.get(k + 1).copied().unwrap_or(m) - s)
        .collect();
    let rep: Vec<usize> = runs.iter().copied().filter(|&r| r > 1).collect();
    let stats = if rep.is_empty() {
        None
    } else {
        let max = *rep.iter().max().unwrap();
        let mean = rep.iter().sum::<usize>() as f64 / rep.len() as f64;
        // smallest value v with at least 95% of runs <= v
        let mut candidates = rep.clone();
        candidates.sort_unstable();
        let p95 = *candidates
            .iter()
            .find(|&&v| 100 * rep.iter().filter(|&&r| r <= v).count() >= 95 * rep.len())
            .unwrap();
        Some((max, mean, p95))
    };
    OracleStats {
        arr: pairs as f64 / (m - 1) as f64,
        runs,
        stats,
    }
}

fn oracle_batch(batch: &[Vec<u8>]) -> (f64, f64, Option<f64>, Option<f64>, Option<f64>) {
    let per: Vec<OracleStats> = batch.iter().map(|s| oracle_metrics(s)).collect();
    let n = per.len() as f64;
    let mean_arr = per.iter().map(|p| p.arr).sum::<f64>() / n;
    let rep: Vec<&(usize, f64, usize)> = per.iter().filter_map(|p| p.stats.as_ref()).collect();
    let srr = rep.len() as f64 / n;
    let avg = |f: &dyn Fn(&(usize, f64, usize)) -> f64| {
        (!rep.is_empty()).then(|| rep.iter().map(|s| f(s)).sum::<f64>() / rep.len() as f64)
    };
    (
        mean_arr,
        srr,
        avg(&|s| s.0 as f64),
        avg(&|s| s.1),
        avg(&|s| s.2 as f64),
    )
}

/// Decoder with no shared code: a full forward pass per step, then an
/// exhaustive scan for the most confident non-mask prediction.
fn brute_force_decode(model: &dyn DiffusionModel, prefix: &[u32], m: usize) -> Vec<u32> {
    let mask = (model.config().vocab_size - 1) as u32;
    let mut tokens = prefix.to_vec();
    tokens.extend(std::iter::repeat_n(mask, m));
    let mut masked: Vec<bool> = (0..tokens.len()).map(|p| p >= prefix.len()).collect();
    for _ in 0..m {
        let trace = model
            .forward(
                &SequenceView {
                    tokens: &tokens,
                    masked: &masked,
                    prefix_len: prefix.len(),
                    mask_token: mask,
                },
                None,
                None,
            )
            .unwrap();
        let mut best: Option<(usize, u32, f64)> = None;
        for p in 0..tokens.len() {
            if !masked[p] {
                continue;
            }
            let row = trace.final_logits.row(p);
            let peak = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|x| (x - peak).exp()).sum();
            let mut arg = if mask == 0 { 1 } else { 0 };
            for v in 0..row.len() {
                if v as u32 != mask && row[v] > row[arg] {
                    arg = v;
                }
            }
            let conf = (row[arg] - peak).exp() / z;
            if best.is_none_or(|(_, _, c)| conf > c) {
                best = Some((p, arg as u32, conf));
            }
        }
        let (p, tok, _) = best.unwrap();
        tokens[p] = tok;
        masked[p] = false;
    }
    tokens
}

fn toy_model(seed: u64, vocab: usize) -> ToyModel {
    ToyModel::new(ModelConfig {
        vocab_size: vocab,
        layers: 4,
        heads: 2,
        model_dim: 16,
        max_seq_len: 64,
        seed,
        ..ModelConfig::default()
    })
    .unwrap()
}

fn random_prefix(rng: &mut ChaCha8Rng, vocab: usize) -> Vec<u32> {
    let len = rng.gen_range(1..=8);
    (0..len)
        .map(|_| rng.gen_range(0..vocab as u32 - 1))
        .collect()
}

fn toy_trace(seed: u64) -> (ToyModel, Vec<u32>, Vec<bool>) {
    let model = toy_model(seed, 16);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tokens = random_prefix(&mut rng, 16);
    let prefix = tokens.len();
    tokens.extend(std::iter::repeat_n(15, 10));
    let masked = (0..tokens.len()).map(|p| p >= prefix).collect();
    (model, tokens, masked)
}

fn forward(
    model: &ToyModel,
    tokens: &[u32],
    masked: &[bool],
    hook: Option<&CtaeHook>,
) -> ForwardTrace {
    let view = SequenceView {
        tokens,
        masked,
        prefix_len: masked.iter().take_while(|m| !**m).count(),
        mask_token: 15,
    };
    model.forward(&view, hook.map(|h| h as _), None).unwrap()
}

fn same_report(a: &RepetitionReport, b: (f64, f64, Option<f64>, Option<f64>, Option<f64>)) -> bool {
    a.arr == b.0 && a.srr == b.1 && a.mrl == b.2 && a.arl == b.3 && a.p95rl == b.4
}

// ---------------------------------------------------------------------------
// Criteria
// ---------------------------------------------------------------------------

fn metric_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let seqs: Vec<Vec<u8>> = (0..METRIC_SEQUENCES)
        .map(|_| {
            let len = rng.gen_range(2..=64);
            let alphabet = rng.gen_range(1..=8u8);
            (0..len).map(|_| rng.gen_range(0..alphabet)).collect()
        })
        .collect();
    for (i, s) in seqs.iter().enumerate() {
        let o = oracle_metrics(s);
        let inv = run_inventory(s);
        ensure!(arr(s).value == o.arr, "sequence {i}: arr");
        ensure!(inv.runs == o.runs, "sequence {i}: runs");
        let got = mrl_arl_p95(&inv).map(|s| (s.mrl, s.arl, s.p95rl));
        ensure!(
            got == o.stats,
            "sequence {i}: run stats {got:?} vs {:?}",
            o.stats
        );
    }
    for (b, batch) in seqs.chunks(10).enumerate() {
        ensure!(srr(batch) == oracle_batch(batch).1, "batch {b}: srr");
        ensure!(
            same_report(&repetition_report(batch), oracle_batch(batch)),
            "batch {b}: report"
        );
    }
    // hand cases
    ensure!(arr(b"abcd").value == 0.0, "distinct arr");
    ensure!(arr(b"aaaa").value == 1.0, "constant arr");
    ensure!(arr(b"aab").value == 0.5, "aab arr");
    ensure!(run_inventory(b"abc").runs == vec![1, 1, 1], "abc runs");
    ensure!(
        run_inventory(b"aaabb").rep_runs() == vec![3, 2],
        "aaabb runs"
    );
    ensure!(run_inventory(b"a").runs == vec![1], "single runs");
    let s = mrl_arl_p95(&run_inventory(b"aaabbcc")).unwrap();
    ensure!(
        (s.mrl, s.arl, s.p95rl) == (3, 7.0 / 3.0, 3),
        "(3,2,2) stats"
    );
    let s = mrl_arl_p95(&run_inventory(b"aa")).unwrap();
    ensure!((s.mrl, s.arl, s.p95rl) == (2, 2.0, 2), "singleton stats");
    let mut long: Vec<u8> = Vec::new();
    for k in 0..20u8 {
        long.extend([k % 2 + 10; 2]);
        long.push(99);
    }
    long.extend([5; 11]);
    let s = mrl_arl_p95(&run_inventory(&long)).unwrap();
    ensure!((s.mrl, s.p95rl) == (11, 2), "twenty 2s and one 11: {s:?}");
    ensure!(srr(&[b"ab".to_vec(), b"cd".to_vec()]) == 0.0, "srr none");
    ensure!(srr(&[b"aa".to_vec(), b"bb".to_vec()]) == 1.0, "srr all");
    ensure!(
        srr(&[
            b"aa".to_vec(),
            b"bb".to_vec(),
            b"cd".to_vec(),
            b"eee".to_vec()
        ]) == 0.75,
        "srr 3 of 4"
    );
    let elapsed = start.elapsed();
    ensure!(elapsed < METRIC_BUDGET, "took {elapsed:?}");
    Ok(format!("{METRIC_SEQUENCES} sequences in {:.2?}", elapsed))
}

fn arr_cross_formulation() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let mut checked = 0;
    for _ in 0..METRIC_SEQUENCES {
        let len = rng.gen_range(2..=64);
        let alphabet = rng.gen_range(1..=8u8);
        let s: Vec<u8> = (0..len).map(|_| rng.gen_range(0..alphabet)).collect();
        let inv = run_inventory(&s);
        let runs_based: usize = inv.rep_runs().iter().map(|r| r - 1).sum();
        ensure!(
            arr(&s).value == runs_based as f64 / (s.len() - 1) as f64,
            "mismatch on {s:?}"
        );
        checked += 1;
    }
    Ok(format!("{checked} sequences"))
}

fn decay_values() -> Outcome {
    let cfg = CtaeConfig {
        tau: 5.0,
        gamma_min: 0.5,
        ..CtaeConfig::default()
    };
    let d = build_decay(16, &cfg);
    ensure!(d.get(3, 3) == 1.0, "diagonal {}", d.get(3, 3));
    ensure!(
        (d.get(0, 5) - DECAY_AT_FIVE).abs() < DECAY_TOL,
        "distance 5 gives {}",
        d.get(0, 5)
    );
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for draw in 0..DECAY_DRAWS {
        let tau = rng.gen_range(0.5..20.0);
        let gamma_min = rng.gen_range(0.01..=1.0);
        let t = rng.gen_range(1..64);
        let d = build_decay(
            t,
            &CtaeConfig {
                tau,
                gamma_min,
                ..CtaeConfig::default()
            },
        );
        for i in 0..t {
            ensure!(d.get(i, i) == 1.0, "draw {draw}: diagonal");
            for j in 0..t {
                let g = d.get(i, j);
                ensure!(g >= gamma_min && g <= 1.0, "draw {draw}: bound {g}");
                ensure!(g == d.get(j, i), "draw {draw}: symmetry");
                if j > i {
                    ensure!(g <= d.get(i, j - 1), "draw {draw}: monotone");
                }
            }
        }
    }
    Ok(format!("G(5) = {:.6}, {DECAY_DRAWS} draws", d.get(0, 5)))
}

fn identity_reductions() -> Outcome {
    let unit = CtaeConfig {
        gamma_min: 1.0,
        ..CtaeConfig::default()
    };
    for seed in 0..5 {
        let (model, tokens, masked) = toy_trace(seed);
        let plain = forward(&model, &tokens, &masked, None);
        let mut attn = plain.attention.clone();
        apply_ctae(&mut attn, &build_decay(tokens.len(), &unit), false)
            .map_err(|e| e.to_string())?;
        ensure!(
            attn == plain.attention,
            "seed {seed}: decay changed attention"
        );
        let hook = CtaeHook::new(tokens.len(), &unit).map_err(|e| e.to_string())?;
        let hooked = forward(&model, &tokens, &masked, Some(&hook));
        ensure!(hooked == plain, "seed {seed}: hooked forward differs");
    }
    let zero_alpha = CotaConfig {
        ctae: None,
        ctev: Some(CtevConfig {
            alpha: 0.0,
            ..CtevConfig::default()
        }),
    };
    let mut steps = 0;
    for seed in 0..IDENTITY_DECODES {
        let model = toy_model(1000 + seed, 16);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let input = InputSequence {
            prefix: random_prefix(&mut rng, 16),
            response_len: 12,
        };
        let cfg = DecodeConfig {
            total_steps: 6,
            block_length: Some(6),
            ..DecodeConfig::default()
        };
        let base = decode(&model, &cfg, &input, None, None).map_err(|e| e.to_string())?;
        let voted = decode(
            &model,
            &DecodeConfig {
                voting: Voting::Ctev,
                ..cfg
            },
            &input,
            Some(&zero_alpha),
            None,
        )
        .map_err(|e| e.to_string())?;
        ensure!(
            base.steps.len() == voted.steps.len(),
            "seed {seed}: step count"
        );
        for (a, b) in base.steps.iter().zip(&voted.steps) {
            ensure!(
                a.chosen == b.chosen,
                "seed {seed} step {}: chosen sets differ",
                a.step
            );
            steps += 1;
        }
    }
    Ok(format!(
        "5 traces bit-exact, {steps} steps with identical selections"
    ))
}

fn cache_equivalence() -> Outcome {
    let start = Instant::now();
    let unit = CachePolicy {
        mode: CacheMode::DllmCache,
        prefix_interval: 1,
        suffix_interval: 1,
        ..CachePolicy::dllm_cache()
    };
    let off = CachePolicy::off();
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for seed in 0..ORACLE_SEEDS {
        let vocab = rng.gen_range(4..=16);
        let m = rng.gen_range(1..=16);
        let model = toy_model(500 + seed, vocab);
        let prefix = random_prefix(&mut rng, vocab);
        let input = InputSequence {
            prefix: prefix.clone(),
            response_len: m,
        };
        let cfg = DecodeConfig {
            total_steps: m,
            tokens_per_step: Some(1),
            ..DecodeConfig::default()
        };
        let expected = brute_force_decode(&model, &prefix, m);
        for policy in [&off, &unit] {
            let out =
                decode(&model, &cfg, &input, None, Some(policy)).map_err(|e| e.to_string())?;
            ensure!(
                out.tokens == expected,
                "seed {seed} ({:?}): {:?} vs {:?}",
                policy.mode,
                out.tokens,
                expected
            );
        }
    }
    let elapsed = start.elapsed();
    ensure!(elapsed < CACHE_ORACLE_BUDGET, "took {elapsed:?}");
    Ok(format!(
        "{ORACLE_SEEDS} seeds x 2 policies in {elapsed:.2?}"
    ))
}

fn entropy_correctness() -> Outcome {
    let cases: [(&[f64], f64); 3] = [
        (&[0.25; 4], 1.0),
        (&[0.0, 0.0, 1.0, 0.0], 0.0),
        (&[0.5, 0.5, 0.0, 0.0], 0.5),
    ];
    for (p, want) in cases {
        let got = normalized_entropy(p);
        ensure!((got - want).abs() < ENTROPY_TOL, "{p:?}: {got}");
    }
    let mut worst: f64 = 0.0;
    for seed in 0..5 {
        let model = ToyModel::new(ModelConfig {
            vocab_size: 32,
            layers: 8,
            heads: 2,
            model_dim: 16,
            max_seq_len: 64,
            seed,
            ..ModelConfig::default()
        })
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tokens = random_prefix(&mut rng, 32);
        let prefix = tokens.len();
        tokens.extend(std::iter::repeat_n(31, 12));
        let masked: Vec<bool> = (0..tokens.len()).map(|p| p >= prefix).collect();
        let trace = model
            .forward(
                &SequenceView {
                    tokens: &tokens,
                    masked: &masked,
                    prefix_len: prefix,
                    mask_token: 31,
                },
                None,
                None,
            )
            .unwrap();
        let sum = |a, b| deep_entropy_sum(&trace, LayerRange::new(a, b)).unwrap();
        for split in 1..8 {
            let whole = sum(1, 8);
            let (lo, hi) = (sum(1, split), sum(split + 1, 8));
            for p in 0..whole.len() {
                let d = (whole[p] - lo[p] - hi[p]).abs();
                worst = worst.max(d);
                ensure!(
                    d < ENTROPY_TOL,
                    "seed {seed} split {split} position {p}: {d}"
                );
            }
        }
    }
    Ok(format!("max additivity gap {worst:.1e}"))
}

fn sticky_run(overrides: &[&str], tmp: &Path, name: &str) -> Result<RunManifest, String> {
    let n = format!("corpus.n_samples={STICKY_SAMPLES}");
    let mut all = vec![n.as_str()];
    all.extend_from_slice(overrides);
    let cfg = load_config("sticky.toml", &all);
    let m = run(&cfg, Some(&configs_dir()), &tmp.join(name)).map_err(|e| e.to_string())?;
    if !m.complete {
        return Err(format!("{name}: incomplete run {:?}", m.failures));
    }
    if !(m.efficiency.tokens_per_second > 0.0) {
        return Err(format!("{name}: tps {}", m.efficiency.tokens_per_second));
    }
    Ok(m)
}

fn sticky_regression(tmp: &Path) -> Outcome {
    let start = Instant::now();
    let mut srrs = Vec::new();
    let mut baseline7 = None;
    for interval in [1, 3, 5, 7] {
        let key = format!("cache.suffix_interval={interval}");
        let m = sticky_run(&[&key], tmp, &format!("ac7-interval-{interval}"))?;
        srrs.push(m.repetition.srr);
        if interval == 7 {
            baseline7 = Some(m.repetition);
        }
    }
    ensure!(srrs[0] == 0.0, "SRR at interval 1 is {}", srrs[0]);
    ensure!(
        srrs.windows(2).all(|w| w[0] <= w[1]),
        "SRR not nondecreasing: {srrs:?}"
    );
    let base = baseline7.unwrap();
    let voted = sticky_run(
        &[
            "cache.suffix_interval=7",
            "decode.voting=\"ctev\"",
            "cota.ctev.alpha=0.75",
            "cota.ctev.context_width=3",
            "cota.ctev.mode=\"penalty\"",
        ],
        tmp,
        "ac7-ctev",
    )?
    .repetition;
    ensure!(
        voted.srr < base.srr,
        "CTEV SRR {} vs {}",
        voted.srr,
        base.srr
    );
    ensure!(
        voted.arr < base.arr,
        "CTEV ARR {} vs {}",
        voted.arr,
        base.arr
    );
    let elapsed = start.elapsed();
    ensure!(elapsed < STICKY_BUDGET, "took {elapsed:?}");
    Ok(format!(
        "SRR over intervals {srrs:?}; at 7 SRR {:.2} -> {:.2}, ARR {:.4} -> {:.4} ({elapsed:.2?})",
        base.srr, voted.srr, base.arr, voted.arr
    ))
}

fn prefix_only(tmp: &Path) -> Outcome {
    let p = sticky_run(&["cache.mode=\"prefix_only\""], tmp, "ac8-prefix-only")?;
    let d = sticky_run(&["cache.suffix_interval=7"], tmp, "ac8-dllm")?;
    ensure!(
        p.repetition.srr == 0.0,
        "prefix_only SRR {}",
        p.repetition.srr
    );
    ensure!(
        d.repetition.srr > 0.0,
        "dllm_cache SRR {}",
        d.repetition.srr
    );
    Ok(format!(
        "prefix_only SRR {}, dllm_cache@7 SRR {}",
        p.repetition.srr, d.repetition.srr
    ))
}

fn efficiency_accounting(tmp: &Path) -> Outcome {
    let model_cfg = ModelConfig {
        vocab_size: 32,
        layers: 4,
        heads: 2,
        model_dim: 32,
        max_seq_len: 64,
        seed: 5,
        ..ModelConfig::default()
    };
    let model = ToyModel::new(model_cfg.clone()).unwrap();
    let input = InputSequence {
        prefix: vec![1, 2, 3, 4, 5, 6],
        response_len: 10,
    };
    let cfg = DecodeConfig {
        total_steps: 10,
        tokens_per_step: Some(1),
        ..DecodeConfig::default()
    };
    let never_refresh = CachePolicy {
        mode: CacheMode::DllmCache,
        prefix_interval: 1000,
        suffix_interval: 1000,
        similarity_threshold: 0.0,
        ..CachePolicy::dllm_cache()
    };
    let n = 16u64;
    let t = 10u64;
    let (d, f, l) = (32u64, 64u64, 4u64);
    // per position per block: four projections, scores plus mixing, two MLP matmuls
    let per_position = l * (4 * 2 * d * d + 2 * 2 * n * d + 2 * 2 * d * f);

    let reused =
        decode(&model, &cfg, &input, None, Some(&never_refresh)).map_err(|e| e.to_string())?;
    let e = flop_estimate(&model_cfg, n as usize, &reused.steps, 10, 1e9);
    ensure!(
        e.flop_estimate == per_position * n,
        "counted {} vs {}",
        e.flop_estimate,
        per_position * n
    );
    ensure!(
        e.cache_off_flops == per_position * n * t,
        "cache-off count {}",
        e.cache_off_flops
    );
    ensure!(
        e.recompute_savings == (t - 1) as f64 / t as f64,
        "savings {}",
        e.recompute_savings
    );
    ensure!(e.tokens_per_second > 0.0, "tps {}", e.tokens_per_second);

    let off =
        decode(&model, &cfg, &input, None, Some(&CachePolicy::off())).map_err(|e| e.to_string())?;
    let e_off = flop_estimate(&model_cfg, n as usize, &off.steps, 10, 1e9);
    ensure!(
        e_off.recompute_savings == 0.0,
        "cache-off savings {}",
        e_off.recompute_savings
    );
    ensure!(e_off.tokens_per_second > 0.0, "cache-off tps");

    for name in ["toy.toml", "sticky.toml"] {
        let cfg = load_config(name, &["corpus.n_samples=4", "cache.mode=\"off\""]);
        let m = run(&cfg, Some(&configs_dir()), &tmp.join(format!("ac9-{name}")))
            .map_err(|e| e.to_string())?;
        ensure!(
            m.efficiency.recompute_savings == 0.0,
            "{name}: savings {}",
            m.efficiency.recompute_savings
        );
        ensure!(m.efficiency.tokens_per_second > 0.0, "{name}: tps");
    }
    Ok(format!(
        "full reuse counts {} of {} FLOPs, savings {}",
        e.flop_estimate, e.cache_off_flops, e.recompute_savings
    ))
}

fn read(path: &Path) -> Result<Vec<u8>, String> {
    std::fs::read(path).map_err(|e| format!("{}: {e}", path.display()))
}

fn determinism(tmp: &Path) -> Outcome {
    let mut compared = 0;
    for name in ["toy.toml", "sticky.toml"] {
        let cfg = load_config(name, &[]);
        let mut digests = Vec::new();
        for rep in 0..2 {
            let dir = tmp.join(format!("ac10-{name}-{rep}"));
            let m = run(&cfg, Some(&configs_dir()), &dir).map_err(|e| e.to_string())?;
            ensure!(m.efficiency.tokens_per_second > 0.0, "{name}: tps");
            digests.push((
                read(&dir.join("report.csv"))?,
                read(&dir.join("manifest.json"))?,
                m.files,
            ));
        }
        ensure!(
            digests[0] == digests[1],
            "{name}: outputs differ between executions"
        );
        compared += 1;
    }
    let cfg = load_config("sticky_sweep.toml", &["corpus.n_samples=20"]);
    let points = cfg
        .sweep
        .axes
        .iter()
        .map(|a| a.values.len())
        .product::<usize>();
    let dirs = [tmp.join("ac10-sweep-0"), tmp.join("ac10-sweep-1")];
    for dir in &dirs {
        sweep(&cfg, Some(&configs_dir()), dir).map_err(|e| e.to_string())?;
    }
    ensure!(
        read(&dirs[0].join("sweep.csv"))? == read(&dirs[1].join("sweep.csv"))?,
        "sweep tables differ"
    );
    for p in 0..points {
        let name = point_dir_name(p);
        ensure!(
            read(&dirs[0].join(&name).join("manifest.json"))?
                == read(&dirs[1].join(&name).join("manifest.json"))?,
            "sweep point {p} manifests differ"
        );
    }
    compared += 1;
    Ok(format!(
        "{compared} configs executed twice with identical tables and digests"
    ))
}

fn main() {
    let tmp = tempfile::tempdir().expect("temp dir");
    let tmp = tmp.path();
    let criteria: Vec<Criterion> = vec![
        ("metric oracle equivalence", Box::new(metric_oracle)),
        (
            "ARR cross-formulation identity",
            Box::new(arr_cross_formulation),
        ),
        ("decay matrix values", Box::new(decay_values)),
        ("identity reductions", Box::new(identity_reductions)),
        ("cache equivalence oracle", Box::new(cache_equivalence)),
        ("entropy correctness", Box::new(entropy_correctness)),
        (
            "stale-cache repetition regression",
            Box::new(|| sticky_regression(tmp)),
        ),
        (
            "prefix-only cache avoids repetition",
            Box::new(|| prefix_only(tmp)),
        ),
        (
            "efficiency accounting",
            Box::new(|| efficiency_accounting(tmp)),
        ),
        ("end-to-end determinism", Box::new(|| determinism(tmp))),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(std::panic::AssertUnwindSafe(check))
            .unwrap_or_else(|_| Err("panicked".into()));
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("AC-{:02} PASS {name} [{secs:.2}s]: {detail}", i + 1),
            Err(reason) => {
                failed += 1;
                println!("AC-{:02} FAIL {name} [{secs:.2}s]: {reason}", i + 1);
            }
        }
    }
    println!(
        "acceptance: {} passed, {failed} failed",
        criteria.len() - failed
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
