use std::io::Write;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use curate_core::config::PipelineConfig;
use curate_core::corpus::{load_corpus, save_corpus, SaveOptions};
use curate_core::merging::{MergeContext, MergedFields, Merger, SynthesisError};
use curate_core::pipeline::{artifacts, load_report, Pipeline, Providers, Stage};
use curate_core::selection::Allocation;
use curate_core::synthetic::{synthetic_corpus, SyntheticSpec};

fn config(dir: &Path) -> PipelineConfig {
    let corpus = dir.join("corpus.json");
    if !corpus.exists() {
        save_corpus(&synthetic_corpus(SyntheticSpec::new(200, 4)), &corpus, SaveOptions::with_metadata()).unwrap();
    }
    let mut cfg = PipelineConfig::default().mock();
    cfg.corpus = Some(corpus);
    cfg.output_dir = dir.join("out");
    cfg.clustering.m = 10;
    cfg.selection.allocation = Allocation::ProportionalFraction { fraction: 0.5 };
    cfg.pairing.target_size = Some(60);
    cfg
}

struct Counting {
    inner: Box<dyn Merger>,
    calls: Arc<AtomicUsize>,
}

impl Merger for Counting {
    fn merger_id(&self) -> String {
        self.inner.merger_id()
    }

    fn synthesize(&self, ctx: &MergeContext, attempt: u32) -> Result<MergedFields, SynthesisError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.inner.synthesize(ctx, attempt)
    }
}

fn counting_pipeline(cfg: PipelineConfig) -> (Pipeline, Arc<AtomicUsize>) {
    let calls = Arc::new(AtomicUsize::new(0));
    let mut providers = Providers::from_config(&cfg).unwrap();
    providers.merger = Box::new(Counting {
        inner: providers.merger,
        calls: calls.clone(),
    });
    (Pipeline::with_providers(cfg, providers).unwrap(), calls)
}

#[test]
fn small_run_hits_target_and_repeats_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path());
    let first = Pipeline::new(cfg.clone()).unwrap().run().unwrap();
    let merged = first.merged.unwrap();
    assert!((54..=66).contains(&merged.len()), "|D^| = {}", merged.len());
    let bytes = std::fs::read(cfg.output_dir.join(artifacts::MERGED)).unwrap();

    let other = tempfile::tempdir().unwrap();
    std::fs::copy(cfg.corpus.as_ref().unwrap(), other.path().join("corpus.json")).unwrap();
    let cfg2 = config(other.path());
    Pipeline::new(cfg2.clone()).unwrap().run().unwrap();
    assert_eq!(std::fs::read(cfg2.output_dir.join(artifacts::MERGED)).unwrap(), bytes);

    let report = load_report(&cfg.output_dir.join(artifacts::REPORT)).unwrap();
    assert_eq!(report.config_hash, cfg.config_hash());
    assert_eq!(report.counts.merged, merged.len());
    let back = load_corpus(cfg.output_dir.join(artifacts::MERGED)).unwrap();
    assert_eq!(back, merged);
}

#[test]
fn rerun_reuses_every_stage() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path());
    Pipeline::new(cfg.clone()).unwrap().run().unwrap();
    let (p, calls) = counting_pipeline(cfg);
    let out = p.run().unwrap();
    assert_eq!(calls.load(Ordering::SeqCst), 0);
    for s in [Stage::Embed, Stage::Cluster, Stage::Select, Stage::Pair, Stage::Merge] {
        assert!(out.reused.contains(&s), "{s:?} was recomputed");
    }
}

#[test]
fn resume_after_interrupted_merge_matches_uninterrupted_run() {
    let clean = tempfile::tempdir().unwrap();
    let cfg = config(clean.path());
    let full = Pipeline::new(cfg.clone()).unwrap().run().unwrap();
    let expected = std::fs::read(cfg.output_dir.join(artifacts::MERGED)).unwrap();
    let pairs = full.outcomes.unwrap().len();
    assert!(pairs >= 4);

    let dir = tempfile::tempdir().unwrap();
    std::fs::copy(cfg.corpus.as_ref().unwrap(), dir.path().join("corpus.json")).unwrap();
    let cfg = config(dir.path());
    Pipeline::new(cfg.clone()).unwrap().run_until(Stage::Merge).unwrap();

    // Simulate a kill: keep half the log and tear the next line.
    let log = cfg.output_dir.join(artifacts::OUTCOMES);
    let text = std::fs::read_to_string(&log).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    let keep = lines.len() / 2;
    let mut f = std::fs::File::create(&log).unwrap();
    for l in &lines[..keep] {
        writeln!(f, "{l}").unwrap();
    }
    write!(f, "{}", &lines[keep][..lines[keep].len() / 2]).unwrap();
    drop(f);
    let _ = std::fs::remove_file(cfg.output_dir.join(artifacts::MERGED));

    let (p, calls) = counting_pipeline(cfg.clone());
    let out = p.run().unwrap();
    assert!(out.reused.contains(&Stage::Merge));
    // Mock merges succeed on the first attempt, so one call per missing pair.
    assert_eq!(calls.load(Ordering::SeqCst), pairs - keep);
    assert_eq!(std::fs::read(cfg.output_dir.join(artifacts::MERGED)).unwrap(), expected);
}

#[test]
fn config_change_invalidates_downstream_stages() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config(dir.path());
    Pipeline::new(cfg.clone()).unwrap().run().unwrap();
    cfg.gate.alpha = 0.9;
    let (p, calls) = counting_pipeline(cfg);
    let out = p.run().unwrap();
    assert!(out.reused.contains(&Stage::Pair));
    assert!(!out.reused.contains(&Stage::Merge));
    assert!(calls.load(Ordering::SeqCst) > 0);
}
