//! Stage orchestration: embed, cluster, select, pair, merge, assemble.
//!
//! Every stage writes its artifact under the output directory and records
//! a key in `checkpoints.json` derived from its inputs. A later run reuses
//! an artifact only when its key still matches. The merge stage appends
//! each outcome to `outcomes.jsonl` as it completes, so an interrupted run
//! picks up where it stopped.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::clustering::{kmeans_fit, project_2d, write_projection_csv, ClusterModel, ClusteringError, KMeansParams};
use crate::config::{ConfigError, PipelineConfig};
use crate::corpus::{load_corpus, parse_corpus, save_corpus, Corpus, CorpusError, RecordId, SaveOptions};
use crate::embedding::{embed_batch, read_vectors, record_text_for_embedding, write_vectors, Embedder, EmbeddingError, EmbeddingVector};
use crate::hashing::ContentHasher;
use crate::merging::{
    assemble_merged_corpus, merge_all, MergeContext, MergeError, MergeOutcome, Merger, OutcomeLog, MERGE_TEMPLATE_ID,
};
use crate::pairing::{mine_pairs, read_pair_manifest, tune_threshold, write_pair_manifest, PairingError, PairingResult, TunedThreshold};
use crate::report::{emit_report, reference_check, ClusterReport, GateTally, ProviderInfo, QualityDelta, ReportError, RunReport, StageCounts};
use crate::scoring::{Scorer, ScoringError, SCORE_TEMPLATE_ID};
use crate::selection::{filter_corpus, SelectionError, SelectionReport, SimilarityBlock};

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error(transparent)]
    Clustering(#[from] ClusteringError),
    #[error(transparent)]
    Selection(#[from] SelectionError),
    #[error(transparent)]
    Pairing(#[from] PairingError),
    #[error(transparent)]
    Merge(#[from] MergeError),
    #[error(transparent)]
    Scoring(#[from] ScoringError),
    #[error(transparent)]
    Report(#[from] ReportError),
    #[error(transparent)]
    Baseline(#[from] crate::baselines::BaselineError),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("checkpoint {name}: {message}")]
    Checkpoint { name: String, message: String },
}

impl PipelineError {
    /// 2 for configuration or input problems, 3 for provider failures, 4 for
    /// internal inconsistencies, 1 for anything else (I/O).
    pub fn exit_code(&self) -> i32 {
        use PipelineError as P;
        match self {
            P::Config(_) | P::Corpus(_) => 2,
            P::Embedding(e) => match e {
                EmbeddingError::Remote(_) => 3,
                EmbeddingError::Config(_) | EmbeddingError::EmptyText(_) => 2,
                EmbeddingError::Cache { .. } => 1,
                _ => 4,
            },
            P::Clustering(e) | P::Baseline(crate::baselines::BaselineError::Clustering(e)) => match e {
                ClusteringError::Export(_) => 1,
                ClusteringError::DimensionMismatch { .. } => 4,
                _ => 2,
            },
            P::Baseline(_) => 2,
            P::Selection(SelectionError::Budget(_)) => 2,
            P::Selection(_) => 4,
            P::Pairing(PairingError::Manifest { .. }) => 1,
            P::Pairing(_) => 2,
            P::Merge(e) => match e {
                MergeError::Provider(_) => 3,
                MergeError::Config(_) | MergeError::InvalidAlpha(_) => 2,
                MergeError::Log { .. } => 1,
                _ => 4,
            },
            P::Scoring(e) => match e {
                ScoringError::Provider(_) | ScoringError::Unparseable { .. } => 3,
                ScoringError::Config(_) | ScoringError::Capability(_) | ScoringError::Argument(_) => 2,
                ScoringError::Cache { .. } => 1,
                ScoringError::InvalidScore(_) => 4,
            },
            P::Report(ReportError::Io { .. }) => 1,
            P::Report(_) => 4,
            P::Checkpoint { .. } => 4,
            P::Io { .. } => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Embed,
    Cluster,
    Select,
    Pair,
    Merge,
    Assemble,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Embed => "embed",
            Stage::Cluster => "cluster",
            Stage::Select => "select",
            Stage::Pair => "pair",
            Stage::Merge => "merge",
            Stage::Assemble => "assemble",
        }
    }
}

/// File names of the stage artifacts inside the output directory.
pub mod artifacts {
    pub const CHECKPOINTS: &str = "checkpoints.json";
    pub const EMBEDDINGS: &str = "embeddings.bin";
    pub const CLUSTER_MODEL: &str = "cluster_model.json";
    pub const PROJECTION: &str = "projection.csv";
    pub const SELECTION: &str = "selection.json";
    pub const FILTERED: &str = "filtered.json";
    pub const PAIRS: &str = "pairs.jsonl";
    pub const PAIRING: &str = "pairing.json";
    pub const OUTCOMES: &str = "outcomes.jsonl";
    pub const MERGED: &str = "merged.json";
    pub const REPORT: &str = "report.json";
}

/// The three model-backed components of a run.
pub struct Providers {
    pub embedder: Box<dyn Embedder>,
    pub scorer: Box<dyn Scorer>,
    pub merger: Box<dyn Merger>,
}

impl Providers {
    pub fn from_config(cfg: &PipelineConfig) -> Result<Self, PipelineError> {
        Ok(Self {
            embedder: cfg.embedding.build()?,
            scorer: cfg.scorer.build()?,
            merger: cfg.merger.build()?,
        })
    }
}

#[derive(Debug, Default, Serialize, Deserialize)]
struct Checkpoints {
    stages: BTreeMap<String, String>,
}

/// Pairing stage artifact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairingArtifact {
    pub tau: f64,
    pub tuned: Option<TunedThreshold>,
    pub keep_singletons: bool,
    pub results: Vec<PairingResult>,
}

/// Whatever the run produced up to the requested stage.
#[derive(Debug, Default)]
pub struct RunOutput {
    pub vectors: Option<Vec<EmbeddingVector>>,
    pub model: Option<ClusterModel>,
    pub filtered: Option<Corpus>,
    pub selection: Option<SelectionReport>,
    pub pairing: Option<PairingArtifact>,
    pub outcomes: Option<Vec<MergeOutcome>>,
    pub merged: Option<Corpus>,
    pub report: Option<RunReport>,
    pub summary: Option<String>,
    /// Stages whose artifact was reused rather than recomputed.
    pub reused: Vec<Stage>,
}

pub struct Pipeline {
    cfg: PipelineConfig,
    providers: Providers,
}

fn key(parts: &[&str]) -> String {
    parts.iter().fold(ContentHasher::new(), |h, p| h.part(p)).finish()
}

fn json<T: Serialize>(v: &T) -> String {
    serde_json::to_string(v).expect("serializable")
}

impl Pipeline {
    pub fn new(cfg: PipelineConfig) -> Result<Self, PipelineError> {
        cfg.validate()?;
        let providers = Providers::from_config(&cfg)?;
        Ok(Self { cfg, providers })
    }

    /// Uses the given providers instead of building them from the config.
    pub fn with_providers(cfg: PipelineConfig, providers: Providers) -> Result<Self, PipelineError> {
        cfg.validate()?;
        Ok(Self { cfg, providers })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.cfg
    }

    pub fn output_path(&self, name: &str) -> PathBuf {
        self.cfg.output_dir.join(name)
    }

    fn io_err(path: &Path) -> impl Fn(std::io::Error) -> PipelineError + '_ {
        move |source| PipelineError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    fn load_checkpoints(&self) -> Result<Checkpoints, PipelineError> {
        let p = self.output_path(artifacts::CHECKPOINTS);
        match std::fs::read(&p) {
            Ok(b) => serde_json::from_slice(&b).map_err(|e| PipelineError::Checkpoint {
                name: artifacts::CHECKPOINTS.into(),
                message: e.to_string(),
            }),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(Checkpoints::default()),
            Err(e) => Err(Self::io_err(&p)(e)),
        }
    }

    fn save_checkpoints(&self, ck: &Checkpoints) -> Result<(), PipelineError> {
        let p = self.output_path(artifacts::CHECKPOINTS);
        let mut bytes = serde_json::to_vec_pretty(ck).expect("serializable");
        bytes.push(b'\n');
        crate::fsio::write_atomic(&p, &bytes).map_err(Self::io_err(&p))
    }

    fn fresh(&self, ck: &Checkpoints, stage: Stage, k: &str, files: &[&str]) -> bool {
        ck.stages.get(stage.name()).map(String::as_str) == Some(k) && files.iter().all(|f| self.output_path(f).exists())
    }

    fn write_json<T: Serialize>(&self, name: &str, v: &T) -> Result<(), PipelineError> {
        let p = self.output_path(name);
        let mut bytes = serde_json::to_vec_pretty(v).expect("serializable");
        bytes.push(b'\n');
        crate::fsio::write_atomic(&p, &bytes).map_err(Self::io_err(&p))
    }

    fn read_json<T: for<'de> Deserialize<'de>>(&self, name: &str) -> Result<T, PipelineError> {
        let p = self.output_path(name);
        let bytes = std::fs::read(&p).map_err(Self::io_err(&p))?;
        serde_json::from_slice(&bytes).map_err(|e| PipelineError::Checkpoint {
            name: name.into(),
            message: e.to_string(),
        })
    }

    fn save_options(&self) -> SaveOptions {
        if self.cfg.write_metadata {
            SaveOptions::with_metadata()
        } else {
            SaveOptions::default()
        }
    }

    /// Runs every stage.
    pub fn run(&self) -> Result<RunOutput, PipelineError> {
        self.run_until(Stage::Assemble)
    }

    /// Runs stages in order up to and including `last`.
    pub fn run_until(&self, last: Stage) -> Result<RunOutput, PipelineError> {
        let corpus = load_corpus(self.cfg.corpus_path()?)?;
        self.run_corpus(&corpus, last)
    }

    pub fn run_corpus(&self, corpus: &Corpus, last: Stage) -> Result<RunOutput, PipelineError> {
        let out_dir = &self.cfg.output_dir;
        std::fs::create_dir_all(out_dir).map_err(Self::io_err(out_dir))?;
        let mut ck = self.load_checkpoints()?;
        let mut out = RunOutput::default();
        let mut timings = BTreeMap::new();
        let cfg = &self.cfg;
        let p = &self.providers;

        // Embed.
        let t = Instant::now();
        let k_embed = key(&[
            "embed",
            &corpus.content_hash(),
            p.embedder.model_name(),
            &p.embedder.dim().to_string(),
            &json(&cfg.text_mode),
        ]);
        let vectors = if self.fresh(&ck, Stage::Embed, &k_embed, &[artifacts::EMBEDDINGS]) {
            out.reused.push(Stage::Embed);
            let path = self.output_path(artifacts::EMBEDDINGS);
            read_vectors(&path).map_err(Self::io_err(&path))?
        } else {
            let texts: Vec<String> = corpus.iter().map(|r| record_text_for_embedding(r, cfg.text_mode)).collect();
            let v = embed_batch(p.embedder.as_ref(), &texts, cfg.embedding.batch_size, cfg.embedding.max_in_flight)?;
            let path = self.output_path(artifacts::EMBEDDINGS);
            write_vectors(&path, &v).map_err(Self::io_err(&path))?;
            ck.stages.insert(Stage::Embed.name().into(), k_embed.clone());
            self.save_checkpoints(&ck)?;
            v
        };
        if vectors.len() != corpus.len() {
            return Err(PipelineError::Checkpoint {
                name: artifacts::EMBEDDINGS.into(),
                message: format!("{} vectors for {} records", vectors.len(), corpus.len()),
            });
        }
        timings.insert(Stage::Embed.name().to_owned(), t.elapsed().as_secs_f64());
        if last == Stage::Embed {
            out.vectors = Some(vectors);
            return Ok(out);
        }

        // Cluster.
        let t = Instant::now();
        let params = KMeansParams {
            m: cfg.clustering.m,
            seed: cfg.seed,
            max_iters: cfg.clustering.max_iters,
            tol: cfg.clustering.tol,
        };
        let k_cluster = key(&["cluster", &k_embed, &json(&params)]);
        let model: ClusterModel =
            if self.fresh(&ck, Stage::Cluster, &k_cluster, &[artifacts::CLUSTER_MODEL, artifacts::PROJECTION]) {
                out.reused.push(Stage::Cluster);
                self.read_json(artifacts::CLUSTER_MODEL)?
            } else {
                let model = kmeans_fit(&vectors, &params)?;
                self.write_json(artifacts::CLUSTER_MODEL, &model)?;
                let coords = project_2d(&vectors)?;
                let ids: Vec<RecordId> = corpus.iter().map(|r| r.id.clone()).collect();
                write_projection_csv(&self.output_path(artifacts::PROJECTION), &ids, &model, &coords)?;
                ck.stages.insert(Stage::Cluster.name().into(), k_cluster.clone());
                self.save_checkpoints(&ck)?;
                model
            };
        if model.assignments.len() != corpus.len() {
            return Err(PipelineError::Checkpoint {
                name: artifacts::CLUSTER_MODEL.into(),
                message: "assignment count does not match the corpus".into(),
            });
        }
        timings.insert(Stage::Cluster.name().to_owned(), t.elapsed().as_secs_f64());
        if last == Stage::Cluster {
            out.vectors = Some(vectors);
            out.model = Some(model);
            return Ok(out);
        }

        // Select.
        let t = Instant::now();
        let floor_id = if cfg.selection.quality_floor.is_some() { p.scorer.scorer_id() } else { String::new() };
        let k_select = key(&["select", &k_cluster, &json(&cfg.selection), &floor_id]);
        let (filtered, selection) =
            if self.fresh(&ck, Stage::Select, &k_select, &[artifacts::FILTERED, artifacts::SELECTION]) {
                out.reused.push(Stage::Select);
                let path = self.output_path(artifacts::FILTERED);
                let text = std::fs::read_to_string(&path).map_err(Self::io_err(&path))?;
                (parse_corpus(&text, &path)?, self.read_json::<SelectionReport>(artifacts::SELECTION)?)
            } else {
                let scores = match cfg.selection.quality_floor {
                    Some(_) => Some(corpus.iter().map(|r| p.scorer.score(r).map(|s| s.value())).collect::<Result<Vec<f64>, _>>()?),
                    None => None,
                };
                let (filtered, report) = filter_corpus(corpus, &model, &vectors, &cfg.selection, scores.as_deref())?;
                save_corpus(&filtered, self.output_path(artifacts::FILTERED), SaveOptions::with_metadata())?;
                self.write_json(artifacts::SELECTION, &report)?;
                ck.stages.insert(Stage::Select.name().into(), k_select.clone());
                self.save_checkpoints(&ck)?;
                (filtered, report)
            };
        timings.insert(Stage::Select.name().to_owned(), t.elapsed().as_secs_f64());
        if last == Stage::Select {
            out.model = Some(model);
            out.vectors = Some(vectors);
            out.filtered = Some(filtered);
            out.selection = Some(selection);
            return Ok(out);
        }

        // Pair.
        let t = Instant::now();
        let cluster_of: HashMap<RecordId, usize> = corpus
            .iter()
            .zip(&model.assignments)
            .map(|(r, &c)| (r.id.clone(), c))
            .collect();
        let k_pair = key(&["pair", &k_select, &json(&cfg.pairing)]);
        let pairing: PairingArtifact = if self.fresh(&ck, Stage::Pair, &k_pair, &[artifacts::PAIRS, artifacts::PAIRING]) {
            out.reused.push(Stage::Pair);
            self.read_json(artifacts::PAIRING)?
        } else {
            let blocks = self.blocks(corpus, &filtered, &model, &vectors)?;
            let tuned = match cfg.pairing.target_size {
                Some(target) => Some(tune_threshold(&blocks, target, cfg.pairing.keep_singletons)?),
                None => None,
            };
            let tau = tuned.map_or(cfg.pairing.tau, |t| t.tau);
            let results = blocks.iter().map(|b| mine_pairs(b, tau)).collect::<Result<Vec<_>, _>>()?;
            let artifact = PairingArtifact {
                tau,
                tuned,
                keep_singletons: cfg.pairing.keep_singletons,
                results,
            };
            write_pair_manifest(&self.output_path(artifacts::PAIRS), &artifact.results)?;
            self.write_json(artifacts::PAIRING, &artifact)?;
            ck.stages.insert(Stage::Pair.name().into(), k_pair.clone());
            self.save_checkpoints(&ck)?;
            artifact
        };
        timings.insert(Stage::Pair.name().to_owned(), t.elapsed().as_secs_f64());
        if last == Stage::Pair {
            out.model = Some(model);
            out.vectors = Some(vectors);
            out.filtered = Some(filtered);
            out.selection = Some(selection);
            out.pairing = Some(pairing);
            return Ok(out);
        }

        // Merge. The log is kept only while its key matches.
        let t = Instant::now();
        let k_merge = key(&[
            "merge",
            &k_pair,
            &p.merger.merger_id(),
            &p.scorer.scorer_id(),
            &json(&cfg.gate),
            &cfg.merger.max_resynthesis.to_string(),
        ]);
        let log_path = self.output_path(artifacts::OUTCOMES);
        if ck.stages.get(Stage::Merge.name()) != Some(&k_merge) {
            if log_path.exists() {
                std::fs::remove_file(&log_path).map_err(Self::io_err(&log_path))?;
            }
            ck.stages.insert(Stage::Merge.name().into(), k_merge.clone());
            self.save_checkpoints(&ck)?;
        } else if log_path.exists() {
            out.reused.push(Stage::Merge);
        }
        let pairs = read_pair_manifest(&self.output_path(artifacts::PAIRS))?;
        let jobs = pairs
            .into_iter()
            .map(|pair| MergeContext::resolve(&pair, &filtered, Some(&cluster_of)).map(|ctx| (pair, ctx)))
            .collect::<Result<Vec<_>, _>>()?;
        let log = OutcomeLog::open(&log_path)?;
        let outcomes = merge_all(
            &jobs,
            p.merger.as_ref(),
            p.scorer.as_ref(),
            &cfg.gate,
            cfg.merger.max_resynthesis,
            cfg.merger.max_in_flight,
            Some(&log),
        )?;
        for o in &outcomes {
            o.check(&cfg.gate)?;
        }
        timings.insert(Stage::Merge.name().to_owned(), t.elapsed().as_secs_f64());
        if last == Stage::Merge {
            out.model = Some(model);
            out.vectors = Some(vectors);
            out.filtered = Some(filtered);
            out.selection = Some(selection);
            out.pairing = Some(pairing);
            out.outcomes = Some(outcomes);
            return Ok(out);
        }

        // Assemble.
        let t = Instant::now();
        let merged = assemble_merged_corpus(&pairing.results, &outcomes, &filtered, pairing.keep_singletons)?;
        save_corpus(&merged, self.output_path(artifacts::MERGED), self.save_options())?;
        timings.insert(Stage::Assemble.name().to_owned(), t.elapsed().as_secs_f64());
        let report = self.build_report(corpus, &filtered, &selection, &pairing, &outcomes, &merged, timings);
        let summary = emit_report(&report, &self.output_path(artifacts::REPORT))?;
        out.model = Some(model);
        out.vectors = Some(vectors);
        out.filtered = Some(filtered);
        out.selection = Some(selection);
        out.pairing = Some(pairing);
        out.outcomes = Some(outcomes);
        out.merged = Some(merged);
        out.report = Some(report);
        out.summary = Some(summary);
        Ok(out)
    }

    /// One similarity block per cluster over its filtered members, in corpus
    /// order.
    fn blocks(
        &self,
        corpus: &Corpus,
        filtered: &Corpus,
        model: &ClusterModel,
        vectors: &[EmbeddingVector],
    ) -> Result<Vec<SimilarityBlock>, PipelineError> {
        let mut members: Vec<Vec<usize>> = vec![Vec::new(); model.m];
        for r in filtered {
            let pos = corpus.position(&r.id).ok_or_else(|| PipelineError::Checkpoint {
                name: artifacts::FILTERED.into(),
                message: format!("record {} is not in the input corpus", r.id),
            })?;
            members[model.assignments[pos]].push(pos);
        }
        members
            .iter()
            .enumerate()
            .map(|(c, ps)| {
                let ids = ps.iter().map(|&i| corpus.records()[i].id.clone()).collect();
                let vs: Vec<&EmbeddingVector> = ps.iter().map(|&i| &vectors[i]).collect();
                Ok(SimilarityBlock::from_vectors(c, ids, &vs)?)
            })
            .collect()
    }

    #[allow(clippy::too_many_arguments)]
    fn build_report(
        &self,
        corpus: &Corpus,
        filtered: &Corpus,
        selection: &SelectionReport,
        pairing: &PairingArtifact,
        outcomes: &[MergeOutcome],
        merged: &Corpus,
        timings: BTreeMap<String, f64>,
    ) -> RunReport {
        let pairs: usize = pairing.results.iter().map(|r| r.pairs.len()).sum();
        let singletons: usize = pairing.results.iter().map(|r| r.singletons.len()).sum();
        let by_cluster: HashMap<usize, &PairingResult> = pairing.results.iter().map(|r| (r.cluster, r)).collect();
        let clusters = selection
            .clusters
            .iter()
            .map(|c| {
                let r = by_cluster.get(&c.cluster);
                ClusterReport {
                    cluster: c.cluster,
                    size: c.size,
                    selected: c.selected,
                    coverage_ratio: c.coverage_ratio,
                    pairs: r.map_or(0, |r| r.pairs.len()),
                    singletons: r.map_or(0, |r| r.singletons.len()),
                    quality: QualityDelta::from_outcomes(outcomes.iter().filter(|o| o.pair.cluster == c.cluster)),
                }
            })
            .collect();
        RunReport {
            config_hash: self.cfg.config_hash(),
            providers: ProviderInfo {
                embedder: self.providers.embedder.model_name().to_owned(),
                scorer: self.providers.scorer.scorer_id(),
                merger: self.providers.merger.merger_id(),
                merge_template: MERGE_TEMPLATE_ID.into(),
                score_template: SCORE_TEMPLATE_ID.into(),
            },
            tau: pairing.tau,
            tuned: pairing.tuned,
            counts: StageCounts {
                input: corpus.len(),
                filtered: filtered.len(),
                pairs,
                singletons,
                kept_singletons: if pairing.keep_singletons { singletons } else { 0 },
                merged: merged.len(),
            },
            gate: GateTally::from_outcomes(outcomes),
            quality: QualityDelta::from_outcomes(outcomes),
            clusters,
            reference: reference_check(&self.cfg.gate),
            config: self.cfg.clone(),
            timings,
        }
    }
}

/// Re-reads a report, re-checks it and returns its summary.
pub fn load_report(path: &Path) -> Result<RunReport, PipelineError> {
    let bytes = std::fs::read(path).map_err(|source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let report = RunReport::from_json(&bytes)?;
    report.check()?;
    Ok(report)
}
