use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use curate_core::baselines::{baseline_kmeans_distant, baseline_perplexity, baseline_random};
use curate_core::config::PipelineConfig;
use curate_core::corpus::{load_corpus, save_corpus, SaveOptions};
use curate_core::merging::Aggregation;
use curate_core::pairing::pairing_stats;
use curate_core::pipeline::{artifacts, load_report, Pipeline, PipelineError, Stage};
use curate_core::report::GateTally;
use curate_core::scoring::{LogprobSource, MockLogprobs, RemoteLogprobs};
use curate_core::selection::Allocation;
use curate_core::synthetic::{synthetic_corpus, SyntheticSpec};

#[derive(Parser)]
#[command(name = "curate", version, about = "Filter and merge instruction-tuning corpora")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Embed, cluster and select; writes filtered.json.
    Filter(Common),
    /// Everything up to pair mining; writes pairs.jsonl.
    Pair(Common),
    /// Everything up to merging; appends to outcomes.jsonl.
    Merge(Common),
    /// All stages; writes merged.json and report.json.
    Run(Common),
    /// Build a reference subset.
    Baseline {
        #[arg(value_enum)]
        kind: BaselineKind,
        /// Number of records to keep.
        #[arg(long)]
        n: usize,
        /// Output file (default: <output-dir>/baseline-<kind>.json).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Cluster count for kmeans-distant.
        #[arg(long)]
        groups: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Re-check and print a run report.
    Report {
        /// Report file (default: <output-dir>/report.json).
        #[arg(long)]
        path: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Write a seeded synthetic corpus.
    Synth {
        #[arg(long, default_value_t = 2000)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum BaselineKind {
    Random,
    Perplexity,
    KmeansDistant,
}

#[derive(Clone, Copy, ValueEnum)]
enum AggregationArg {
    Sum,
    Mean,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// TOML config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Use the offline embedder, scorer and merger.
    #[arg(long)]
    mock: bool,
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Number of k-means clusters.
    #[arg(long)]
    clusters: Option<usize>,
    /// Fraction of the corpus kept by the filter.
    #[arg(long)]
    fraction: Option<f64>,
    /// Pairing similarity threshold.
    #[arg(long)]
    tau: Option<f64>,
    /// Tune the threshold towards this post-merge size.
    #[arg(long)]
    target_size: Option<usize>,
    #[arg(long)]
    drop_singletons: bool,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long, value_enum)]
    aggregation: Option<AggregationArg>,
    /// Concurrent merge calls.
    #[arg(long)]
    max_in_flight: Option<usize>,
}

impl Common {
    fn resolve(&self) -> Result<PipelineConfig, PipelineError> {
        let mut cfg = match &self.config {
            Some(p) => PipelineConfig::load(p)?,
            None => PipelineConfig::default(),
        };
        if let Some(p) = &self.corpus {
            cfg.corpus = Some(p.clone());
        }
        if let Some(d) = &self.output_dir {
            cfg.output_dir = d.clone();
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(m) = self.clusters {
            cfg.clustering.m = m;
        }
        if let Some(f) = self.fraction {
            cfg.selection.allocation = Allocation::ProportionalFraction { fraction: f };
        }
        if let Some(t) = self.tau {
            cfg.pairing.tau = t;
            cfg.pairing.target_size = None;
        }
        if let Some(t) = self.target_size {
            cfg.pairing.target_size = Some(t);
        }
        if self.drop_singletons {
            cfg.pairing.keep_singletons = false;
        }
        if let Some(a) = self.alpha {
            cfg.gate.alpha = a;
        }
        if let Some(a) = self.aggregation {
            cfg.gate.aggregation = match a {
                AggregationArg::Sum => Aggregation::SumOfParents,
                AggregationArg::Mean => Aggregation::MeanOfParents,
            };
        }
        if let Some(n) = self.max_in_flight {
            cfg.merger.max_in_flight = n;
        }
        if self.mock {
            cfg = cfg.mock();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn run_stage(common: &Common, stage: Stage) -> Result<(), PipelineError> {
    let cfg = common.resolve()?;
    let keep = cfg.pairing.keep_singletons;
    let out = Pipeline::new(cfg)?.run_until(stage)?;
    match stage {
        Stage::Select => {
            let s = out.selection.expect("selection ran");
            println!("selected {} of {} records across {} clusters", s.total_selected, s.total_size, s.clusters.len());
        }
        Stage::Pair => {
            let p = out.pairing.expect("pairing ran");
            let st = pairing_stats(&p.results, keep);
            println!(
                "tau {:.4}: {} pairs, {} singletons, expected size {}",
                p.tau, st.pairs, st.singletons, st.expected_size
            );
        }
        Stage::Merge => {
            let g = GateTally::from_outcomes(out.outcomes.as_deref().unwrap_or_default());
            println!(
                "{} accepted, {} rejected, {} parse failures, {} provider failures",
                g.accepted, g.rejected_by_gate, g.parse_failed, g.provider_failed
            );
        }
        _ => print!("{}", out.summary.unwrap_or_default()),
    }
    Ok(())
}

fn run_baseline(
    kind: BaselineKind,
    n: usize,
    out: Option<PathBuf>,
    groups: Option<usize>,
    common: &Common,
) -> Result<(), PipelineError> {
    let mut cfg = common.resolve()?;
    if let Some(g) = groups {
        cfg.baseline.groups = g;
    }
    let corpus = load_corpus(cfg.corpus_path()?)?;
    let (name, subset) = match kind {
        BaselineKind::Random => ("random", baseline_random(&corpus, n, cfg.seed)?),
        BaselineKind::Perplexity => {
            let source: Box<dyn LogprobSource> = match &cfg.baseline.logprobs {
                Some(lp) => Box::new(RemoteLogprobs::new(lp)?),
                None => Box::new(MockLogprobs { seed: cfg.seed }),
            };
            let (subset, info) = baseline_perplexity(&corpus, n, source.as_ref(), cfg.baseline.direction)?;
            if info.skipped > 0 {
                eprintln!("{} records could not be scored and were skipped", info.skipped);
            }
            ("perplexity", subset)
        }
        BaselineKind::KmeansDistant => {
            let groups = cfg.baseline.groups;
            let vectors = Pipeline::new(cfg.clone())?
                .run_corpus(&corpus, Stage::Embed)?
                .vectors
                .expect("embedding ran");
            ("kmeans-distant", baseline_kmeans_distant(&corpus, &vectors, groups, n, cfg.seed)?.0)
        }
    };
    let path = out.unwrap_or_else(|| cfg.output_dir.join(format!("baseline-{name}.json")));
    save_corpus(&subset, &path, SaveOptions::default())?;
    println!("wrote {} records to {}", subset.len(), path.display());
    Ok(())
}

fn run_report(path: Option<PathBuf>, common: &Common) -> Result<(), PipelineError> {
    let path = match path {
        Some(p) => p,
        None => {
            let dir = match &common.output_dir {
                Some(d) => d.clone(),
                None => common.resolve()?.output_dir,
            };
            dir.join(artifacts::REPORT)
        }
    };
    print!("{}", load_report(&path)?.summary());
    Ok(())
}

fn write_synthetic(n: usize, seed: u64, out: &Path) -> Result<(), PipelineError> {
    let corpus = synthetic_corpus(SyntheticSpec::new(n, seed));
    save_corpus(&corpus, out, SaveOptions::default())?;
    println!("wrote {n} records to {}", out.display());
    Ok(())
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_env("CURATE_LOG").unwrap_or_else(|_| "warn".into()))
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Filter(c) => run_stage(c, Stage::Select),
        Command::Pair(c) => run_stage(c, Stage::Pair),
        Command::Merge(c) => run_stage(c, Stage::Merge),
        Command::Run(c) => run_stage(c, Stage::Assemble),
        Command::Baseline {
            kind,
            n,
            out,
            groups,
            common,
        } => run_baseline(*kind, *n, out.clone(), *groups, common),
        Command::Report { path, common } => run_report(path.clone(), common),
        Command::Synth { n, seed, out } => write_synthetic(*n, *seed, out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
