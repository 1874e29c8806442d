//! `manifold-match`: batch front end for set-to-set face matching.
//!
//! Each command reads a JSON run configuration (`--config`), applies flag
//! overrides, writes its artifacts to `--out` and records the effective
//! configuration there as `config.json`. Failures print a JSON object with
//! `error` and `message` to stderr and exit nonzero.

mod commands;
mod config;
mod matcher;

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use manifold_match::filters::FilterTag;
use manifold_match::{Error, Result};

use commands::Ctx;
use config::{Generator, Method, RunConfig};

#[derive(Parser)]
#[command(name = "manifold-match", version, about = "Set-to-set matching of face appearance manifolds")]
struct Cli {
    /// JSON run configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for all randomness (`MM_SEED` takes precedence).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; defaults to the available cores.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Output directory (default `out`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Corpus manifest.
    #[arg(long, global = true)]
    manifest: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    method: Option<Method>,
    /// raw, hp, qi, ed, lg, dx or dy.
    #[arg(long, global = true, value_parser = parse_filter)]
    filter: Option<FilterTag>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic point set or image corpus.
    Synth {
        #[arg(value_enum)]
        generator: Generator,
    },
    /// Fit a mixture by description length to points or one sequence; with
    /// `--method gsim`, train the illumination model on the manifest instead.
    Fit {
        #[arg(long)]
        points: Option<PathBuf>,
        /// `person/sequence` from the manifest.
        #[arg(long)]
        sequence: Option<String>,
    },
    /// Score two sequences of the manifest.
    Match { a: String, b: String },
    /// Rank every other sequence of the manifest against a probe.
    Recognize {
        #[arg(long)]
        probe: String,
    },
    /// Group the manifest's sequences into classes.
    Cluster,
    /// Recognition rates over all ordered pairs of illuminations.
    Eval,
    /// Feed points one at a time to the online mixture.
    Stream {
        #[arg(long)]
        points: PathBuf,
        /// Checkpoint to continue from.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop after this many points in total.
        #[arg(long)]
        limit: Option<usize>,
    },
}

fn parse_filter(s: &str) -> std::result::Result<FilterTag, String> {
    match FilterTag::parse(s) {
        Ok(FilterTag::Bandpass) => Err("bandpass is configured through the config file".into()),
        Ok(t) => Ok(t),
        Err(e) => Err(e.to_string()),
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = RunConfig::load(cli.config.as_deref())?;
    let seed = cfg.resolve_seed(cli.seed);
    cfg.jobs = cli.jobs.or(cfg.jobs);
    cfg.out = cli.out.or(cfg.out.take());
    cfg.manifest = cli.manifest.or(cfg.manifest.take());
    cfg.method = cli.method.or(cfg.method);
    cfg.override_filter(cli.filter);
    if let Some(n) = cfg.jobs {
        if n == 0 {
            return Err(Error::InvalidParams("--jobs must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::InvalidParams(format!("thread pool: {e}")))?;
    }
    let out = cfg.out_dir();
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let ctx = Ctx { cfg, seed, out };
    match cli.command {
        Command::Synth { generator } => commands::synth(&ctx, generator),
        Command::Fit { points, sequence } => commands::fit(&ctx, points.as_deref(), sequence.as_deref()),
        Command::Match { a, b } => commands::match_pair(&ctx, &a, &b),
        Command::Recognize { probe } => commands::recognize(&ctx, &probe),
        Command::Cluster => commands::cluster(&ctx),
        Command::Eval => commands::evaluate(&ctx),
        Command::Stream { points, resume, limit } => commands::stream(&ctx, &points, resume.as_deref(), limit),
    }
}

fn report_error(kind: &str, message: &str) {
    eprintln!("{}", serde_json::json!({ "error": kind, "message": message }));
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            report_error("Usage", e.to_string().trim_end());
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            report_error(e.kind(), &e.to_string());
            ExitCode::FAILURE
        }
    }
}
