use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use cotasim_core::model::build_sticky_script;
use cotasim_harness::config::ExperimentConfig;
use cotasim_harness::report::{write_report_csv, REPORT_COLUMNS};
use cotasim_harness::run::{rescore, run, RunManifest};
use cotasim_harness::sweep::sweep;
use cotasim_harness::trace::{dump_traces, TraceKind, TraceRequest};

#[derive(Parser)]
#[command(
    name = "cotasim",
    version,
    about = "Masked-diffusion decoding experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Experiment config (TOML).
    #[arg(long, short)]
    config: PathBuf,
    /// Override a config key, e.g. `--set cache.suffix_interval=3`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory; defaults to `output.dir` (under $COTASIM_OUTPUT_ROOT if set).
    #[arg(long, short)]
    out: Option<PathBuf>,
}

impl ConfigArgs {
    fn load(&self) -> Result<(ExperimentConfig, PathBuf)> {
        let cfg = ExperimentConfig::load(&self.config)?.with_overrides(&self.overrides)?;
        let out = self.out.clone().unwrap_or_else(|| cfg.output_dir());
        Ok((cfg, out))
    }

    fn base(&self) -> Option<&Path> {
        self.config.parent()
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum What {
    Attention,
    Entropy,
    Decay,
}

#[derive(Subcommand)]
enum Command {
    /// Decode the configured corpus once.
    Decode(ConfigArgs),
    /// Run every point of the configured grid.
    Sweep(ConfigArgs),
    /// Recompute the report of an existing run directory.
    Metrics {
        /// Run directory containing manifest.json.
        run: PathBuf,
        /// Also write the rescored table here.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Dump attention, entropy or decay grids for one sample.
    Trace {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, value_enum)]
        what: What,
        #[arg(long, default_value_t = 0)]
        sample: usize,
        /// 1-based decode step. Repeatable.
        #[arg(long = "step")]
        steps: Vec<usize>,
        /// 1-based layer. Repeatable.
        #[arg(long = "layer")]
        layers: Vec<usize>,
    },
    /// Write the built-in scripted fixtures and example configs.
    Fixtures {
        #[arg(long, short)]
        out: PathBuf,
        #[arg(long, default_value_t = 7)]
        repeat_token: u32,
        #[arg(long, default_value_t = 4)]
        trigger_staleness: usize,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match dispatch(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Decode(args) => {
            let (cfg, out) = args.load()?;
            let manifest = run(&cfg, args.base(), &out)?;
            print_row(&manifest);
            if !manifest.complete {
                for f in &manifest.failures {
                    eprintln!("{f}");
                }
                bail!(
                    "run incomplete, see {}",
                    out.join("manifest.json").display()
                );
            }
        }
        Command::Sweep(args) => {
            let (cfg, out) = args.load()?;
            let rows = sweep(&cfg, args.base(), &out)?;
            let text = std::fs::read_to_string(out.join("sweep.csv"))?;
            print!("{text}");
            if rows.iter().any(|r| !r.complete) {
                bail!("some sweep points were incomplete");
            }
        }
        Command::Metrics { run, csv } => {
            let row = rescore(&run)?;
            println!("{}", REPORT_COLUMNS.join(","));
            println!("{}", row.fields().join(","));
            if let Some(path) = csv {
                write_report_csv(&path, &[row])?;
            }
        }
        Command::Trace {
            config,
            what,
            sample,
            steps,
            layers,
        } => {
            let (cfg, out) = config.load()?;
            let kind = match what {
                What::Attention => TraceKind::Attention,
                What::Entropy => TraceKind::Entropy,
                What::Decay => TraceKind::Decay,
            };
            let request = TraceRequest {
                sample,
                steps,
                layers,
            };
            let outcome = dump_traces(&cfg, config.base(), kind, &request, &out)?;
            for p in &outcome.written {
                println!("{}", p.display());
            }
            for (s, l) in &outcome.missing {
                eprintln!("missing: step {s} layer {l}");
            }
        }
        Command::Fixtures {
            out,
            repeat_token,
            trigger_staleness,
        } => write_fixtures(&out, repeat_token, trigger_staleness)?,
    }
    Ok(ExitCode::SUCCESS)
}

fn print_row(manifest: &RunManifest) {
    println!("{}", REPORT_COLUMNS.join(","));
    println!("{}", manifest.report_row().fields().join(","));
}

fn write_fixtures(out: &Path, repeat_token: u32, trigger: usize) -> Result<()> {
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let script = build_sticky_script(repeat_token, trigger);
    let path = out.join("sticky_script.toml");
    std::fs::write(&path, toml::to_string(&script)?)?;
    println!("{}", path.display());

    let mut cfg = ExperimentConfig::default();
    cfg.model.backend = cotasim_core::model::Backend::Scripted;
    cfg.script.fixture = String::new();
    cfg.script.path = Some(PathBuf::from("sticky_script.toml"));
    cfg.output.dir = PathBuf::from("runs/sticky");
    let path = out.join("sticky_experiment.toml");
    std::fs::write(&path, cfg.to_toml()?)?;
    println!("{}", path.display());
    Ok(())
}
