use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use log::info;

use pathpt::corpus::{generate_corpus, read_feature_store, CorpusConfig, Quality, Split};
use pathpt::harness::{self, plots, ExperimentConfig, WORKERS_ENV};

#[derive(Parser)]
#[command(name = "pathpt", version, about = "Few-shot slide subtyping experiments on tile features")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus and write it as a feature store.
    GenCorpus {
        /// TOML file with corpus settings; defaults when absent.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Quality preset overriding the two noise scales.
        #[arg(long)]
        quality: Option<Quality>,
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory; must not exist or be empty.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the experiment matrix described by a TOML config.
    Run {
        config: PathBuf,
        /// Overrides `output_dir` from the config.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Worker threads (same as the environment variable).
        #[arg(long, env = WORKERS_ENV)]
        workers: Option<usize>,
    },
    /// Render figures for a finished run directory.
    Plot { dir: PathBuf },
    /// Summarise a feature store or a finished run directory.
    Inspect { path: PathBuf },
}

fn gen_corpus(config: Option<PathBuf>, quality: Option<Quality>, seed: Option<u64>, out: PathBuf) -> Result<()> {
    let mut cfg = match config {
        Some(p) => toml::from_str::<CorpusConfig>(&fs::read_to_string(&p)?)
            .with_context(|| format!("parsing {}", p.display()))?,
        None => CorpusConfig::default(),
    };
    if let Some(q) = quality {
        cfg = cfg.with_quality(q);
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if out.exists() && fs::read_dir(&out)?.next().is_some() {
        bail!("{} exists and is not empty", out.display());
    }
    let corpus = generate_corpus(&cfg)?;
    corpus.to_store().write(&out)?;
    println!("wrote {} slides ({} classes, d={}) to {}", corpus.slides.len(), corpus.labels.len(), cfg.dim, out.display());
    Ok(())
}

fn run(config: PathBuf, out: Option<PathBuf>, workers: Option<usize>) -> Result<bool> {
    let mut cfg = ExperimentConfig::load(&config).with_context(|| format!("loading {}", config.display()))?;
    if let Some(o) = out {
        cfg.output_dir = o;
    }
    if let Some(w) = workers {
        std::env::set_var(WORKERS_ENV, w.to_string());
    }
    let outcome = harness::run_experiment(&cfg)?;
    print!("{}", fs::read_to_string(outcome.output_dir.join("summary.md"))?);
    let failed = outcome.failed();
    println!("\n{} runs, {failed} failed; results in {}", outcome.runs.len(), outcome.output_dir.display());
    Ok(failed == 0)
}

fn inspect(path: PathBuf) -> Result<()> {
    if path.join("runs.csv").exists() {
        let runs = harness::read_runs(&path)?;
        let failed: Vec<_> = runs.iter().filter(|r| !r.ok()).collect();
        println!("run directory: {} runs, {} failed", runs.len(), failed.len());
        for r in failed {
            println!("  {} k={} seed={}: {}", r.method, r.k, r.seed, r.status);
        }
        if path.join("summary.md").exists() {
            print!("{}", fs::read_to_string(path.join("summary.md"))?);
        }
        return Ok(());
    }
    let store = read_feature_store(&path).with_context(|| format!("reading {}", path.display()))?;
    let tiles: usize = store.slides.iter().map(|s| s.num_tiles()).sum();
    println!("feature store: {} slides, {tiles} tiles, d={}", store.slides.len(), store.dim);
    for c in 1..store.labels.len() {
        let of = |split| store.slides.iter().filter(|s| s.slide_label == c && s.split == split).count();
        println!("  {:<32} train {:>3}  test {:>3}", store.labels.name(c), of(Split::Train), of(Split::Test));
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenCorpus { config, quality, seed, out } => gen_corpus(config, quality, seed, out).map(|_| true),
        Command::Run { config, out, workers } => run(config, out, workers),
        Command::Plot { dir } => plots::emit_plots(&dir).map_err(Into::into).map(|files| {
            for f in &files {
                info!("wrote {}", f.display());
            }
            true
        }),
        Command::Inspect { path } => inspect(path).map(|_| true),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
