//! Dense text grids of attention maps, lens entropy and the decay matrix.
//!
//! Each file starts with one header line, `# axes=<row>,<col> shape=<R>x<C>`
//! followed by `key=value` tags, then one whitespace-separated row per line.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use cotasim_core::cota::build_decay;
use cotasim_core::decoder::{Decoder, Retention};
use cotasim_core::numerics::Matrix;

use crate::config::ExperimentConfig;
use crate::corpus::make_corpus;
use crate::report::write_file;
use crate::HarnessError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TraceKind {
    Attention,
    Entropy,
    Decay,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TraceRequest {
    pub sample: usize,
    /// 1-based steps; empty means every step (entropy only).
    pub steps: Vec<usize>,
    /// 1-based layers for attention dumps. With both `steps` and `layers`
    /// empty, the config's `retention.attention` pairs are used.
    pub layers: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TraceOutcome {
    pub written: Vec<PathBuf>,
    /// Requested `(step, layer)` pairs that the decode never produced.
    pub missing: Vec<(usize, usize)>,
}

pub fn format_grid(axes: (&str, &str), tags: &[(&str, String)], grid: &Matrix) -> String {
    let mut out = format!(
        "# axes={},{} shape={}x{}",
        axes.0,
        axes.1,
        grid.rows(),
        grid.cols()
    );
    for (k, v) in tags {
        let _ = write!(out, " {k}={v}");
    }
    out.push('\n');
    for row in grid.iter_rows() {
        let line: Vec<String> = row.iter().map(|x| x.to_string()).collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
    out
}

/// Parses a grid file back into its header line and values.
pub fn parse_grid(text: &str) -> Result<(String, Matrix), HarnessError> {
    let mut lines = text.lines();
    let header = lines
        .next()
        .filter(|h| h.starts_with("# "))
        .ok_or_else(|| HarnessError::Malformed("grid without header".into()))?
        .to_string();
    let shape = header
        .split_whitespace()
        .find_map(|t| t.strip_prefix("shape="))
        .and_then(|s| s.split_once('x'))
        .and_then(|(r, c)| Some((r.parse::<usize>().ok()?, c.parse::<usize>().ok()?)))
        .ok_or_else(|| HarnessError::Malformed(format!("bad header {header:?}")))?;
    let mut data = Vec::with_capacity(shape.0 * shape.1);
    for line in lines {
        for tok in line.split_whitespace() {
            data.push(
                tok.parse::<f64>()
                    .map_err(|_| HarnessError::Malformed(format!("bad value {tok:?}")))?,
            );
        }
    }
    let grid = Matrix::from_vec(shape.0, shape.1, data)
        .map_err(|e| HarnessError::Malformed(e.to_string()))?;
    Ok((header, grid))
}

/// Re-decodes one corpus sample with the requested retention and writes
/// grids into `out_dir`.
pub fn dump_traces(
    config: &ExperimentConfig,
    base: Option<&Path>,
    kind: TraceKind,
    request: &TraceRequest,
    out_dir: &Path,
) -> Result<TraceOutcome, HarnessError> {
    config.validate(base)?;
    std::fs::create_dir_all(out_dir).map_err(|e| HarnessError::io(out_dir, e))?;
    let c = &config.corpus;
    let seq_len = c.prefix_length + c.response_length;
    let mut outcome = TraceOutcome::default();

    if kind == TraceKind::Decay {
        let ctae = config.cota.ctae.clone().unwrap_or_default();
        let grid = build_decay(seq_len, &ctae);
        let path = out_dir.join("decay.txt");
        let tags = [
            ("tau", ctae.tau.to_string()),
            ("gamma_min", ctae.gamma_min.to_string()),
        ];
        write_file(
            &path,
            format_grid(("query", "key"), &tags, grid.matrix()).as_bytes(),
        )?;
        outcome.written.push(path);
        return Ok(outcome);
    }

    let corpus = make_corpus(
        c.n_samples.max(request.sample + 1),
        c.prefix_length,
        c.response_length,
        config.model.vocab_size,
        c.seed,
    );
    let input = &corpus[request.sample];
    let retention = match kind {
        TraceKind::Attention => {
            let attention = if request.steps.is_empty() && request.layers.is_empty() {
                config.retention.attention.clone()
            } else {
                request
                    .steps
                    .iter()
                    .flat_map(|&s| request.layers.iter().map(move |&l| (s, l)))
                    .collect()
            };
            if attention.is_empty() {
                return Err(HarnessError::Config(
                    "attention dumps need (step, layer) pairs from the request or retention.attention".into(),
                ));
            }
            Retention {
                entropy: false,
                attention,
            }
        }
        _ => Retention {
            entropy: true,
            attention: Vec::new(),
        },
    };
    let model = config.build_model(base)?;
    let out = Decoder::new(&model, config.decode.clone())
        .with_cota(Some(config.cota.clone()))
        .with_cache(Some(config.cache.clone()))
        .with_retention(retention)
        .run(input)?;
    let sample = request.sample.to_string();

    match kind {
        TraceKind::Attention => {
            for att in &out.attention {
                for (head, grid) in att.heads.iter().enumerate() {
                    let path = out_dir.join(format!(
                        "attention_s{:03}_l{:02}_h{:02}.txt",
                        att.step, att.layer, head
                    ));
                    let tags = [
                        ("sample", sample.clone()),
                        ("step", att.step.to_string()),
                        ("layer", att.layer.to_string()),
                        ("head", head.to_string()),
                    ];
                    write_file(&path, format_grid(("query", "key"), &tags, grid).as_bytes())?;
                    outcome.written.push(path);
                }
            }
            outcome.missing = out.missing_attention.clone();
        }
        TraceKind::Entropy => {
            for e in &out.entropy {
                if !request.steps.is_empty() && !request.steps.contains(&e.step) {
                    continue;
                }
                let path = out_dir.join(format!("entropy_s{:03}.txt", e.step));
                let tags = [("sample", sample.clone()), ("step", e.step.to_string())];
                write_file(
                    &path,
                    format_grid(("layer", "position"), &tags, &e.per_layer).as_bytes(),
                )?;
                outcome.written.push(path);
            }
            for &s in &request.steps {
                if !out.entropy.iter().any(|e| e.step == s) {
                    outcome.missing.push((s, 0));
                }
            }
        }
        TraceKind::Decay => unreachable!(),
    }
    Ok(outcome)
}
