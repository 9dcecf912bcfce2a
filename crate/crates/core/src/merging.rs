//! Pair synthesis, the quality-preservation gate, and assembly of the
//! merged corpus.

use std::collections::{HashMap, HashSet};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use rayon::prelude::*;
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, InstructionRecord, Provenance, RecordId};
use crate::http::{ApiError, ChatMessage, ChatRequest, ChatTransport, EndpointConfig};
use crate::pairing::{CandidatePair, PairingResult};
use crate::scoring::{Scorer, ScoringError};

pub const MERGE_TEMPLATE_ID: &str = "merge-v1";
pub const DEFAULT_ALPHA: f64 = 0.75;
pub const DEFAULT_RESYNTHESIS: u32 = 2;
const EMPTY_MARKER: &str = "[empty]";

#[derive(Debug, thiserror::Error)]
pub enum MergeError {
    #[error("pair references unknown record {0}")]
    Unresolved(RecordId),
    #[error("records {0} and {1} are in different clusters")]
    CrossCluster(RecordId, RecordId),
    #[error("gate alpha {0} outside (0, 1)")]
    InvalidAlpha(f64),
    #[error("merger config: {0}")]
    Config(String),
    #[error("outcome log {}: {message}", path.display())]
    Log { path: PathBuf, message: String },
    #[error("inconsistent merge state: {0}")]
    Inconsistent(String),
    #[error(transparent)]
    Provider(#[from] ApiError),
}

/// The two source records of a pair, in pair order.
#[derive(Debug, Clone, PartialEq)]
pub struct MergeContext {
    pub cluster: usize,
    pub first: InstructionRecord,
    pub second: InstructionRecord,
}

impl MergeContext {
    /// Resolves both ids of `pair` in `corpus`. When `cluster_of` is given,
    /// both records must sit in the pair's cluster.
    pub fn resolve(
        pair: &CandidatePair,
        corpus: &Corpus,
        cluster_of: Option<&HashMap<RecordId, usize>>,
    ) -> Result<Self, MergeError> {
        let get = |id: &RecordId| corpus.get(id).cloned().ok_or_else(|| MergeError::Unresolved(id.clone()));
        let (first, second) = (get(&pair.id_a)?, get(&pair.id_b)?);
        if let Some(map) = cluster_of {
            let same = map.get(&pair.id_a) == Some(&pair.cluster) && map.get(&pair.id_b) == Some(&pair.cluster);
            if !same {
                return Err(MergeError::CrossCluster(pair.id_a.clone(), pair.id_b.clone()));
            }
        }
        Ok(Self {
            cluster: pair.cluster,
            first,
            second,
        })
    }
}

fn or_empty(s: &str) -> &str {
    if s.is_empty() {
        EMPTY_MARKER
    } else {
        s
    }
}

/// Renders the versioned merge prompt. Source fields are inserted verbatim;
/// empty inputs are shown as `[empty]`.
pub fn build_merge_prompt(ctx: &MergeContext) -> String {
    let block = |label: &str, r: &InstructionRecord| {
        format!(
            "### Example {label}\nInstruction:\n{}\nInput:\n{}\nOutput:\n{}\n",
            r.instruction,
            or_empty(&r.input),
            or_empty(&r.output)
        )
    };
    format!(
        "You are given two instruction-tuning examples that ask for closely related tasks.\n\
         Write ONE new example whose instruction covers both tasks without losing any \
         information from either, together with an input and a response that do the same.\n\
         Reply with exactly one block in this format:\n\
         <merged>\n<instruction>...</instruction>\n<input>...</input>\n<output>...</output>\n</merged>\n\
         Write {EMPTY_MARKER} inside <input> if the new task needs no input.\n\n{}\n{}",
        block("A", &ctx.first),
        block("B", &ctx.second)
    )
}

/// The three synthesized fields.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MergedFields {
    pub instruction: String,
    pub input: String,
    pub output: String,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("unparseable merge response ({reason})")]
pub struct ParseFailure {
    pub reason: String,
    pub raw: String,
}

/// Extracts the delimited triple, ignoring any prose around it. Fails when a
/// delimiter is missing or the instruction or output is empty.
pub fn parse_merge_response(text: &str) -> Result<MergedFields, ParseFailure> {
    static RE: std::sync::OnceLock<[Regex; 3]> = std::sync::OnceLock::new();
    let res = RE.get_or_init(|| {
        ["instruction", "input", "output"]
            .map(|t| Regex::new(&format!(r"(?s)<{t}>(.*?)</{t}>")).expect("valid regex"))
    });
    let fail = |reason: &str| ParseFailure {
        reason: reason.to_owned(),
        raw: text.to_owned(),
    };
    // Prefer the last <merged> block if the model echoed the format first.
    let body = match text.rfind("<merged>") {
        Some(start) => &text[start..],
        None => text,
    };
    let mut fields = Vec::with_capacity(3);
    for (re, name) in res.iter().zip(["instruction", "input", "output"]) {
        let m = re
            .captures(body)
            .ok_or_else(|| fail(&format!("missing <{name}> block")))?;
        fields.push(m[1].trim().to_owned());
    }
    let output = fields.pop().expect("three fields");
    let mut input = fields.pop().expect("three fields");
    let instruction = fields.pop().expect("three fields");
    if input == EMPTY_MARKER {
        input.clear();
    }
    if instruction.is_empty() || instruction == EMPTY_MARKER {
        return Err(fail("empty instruction"));
    }
    if output.is_empty() || output == EMPTY_MARKER {
        return Err(fail("empty output"));
    }
    Ok(MergedFields {
        instruction,
        input,
        output,
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    #[default]
    SumOfParents,
    MeanOfParents,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GateConfig {
    pub alpha: f64,
    pub aggregation: Aggregation,
}

impl Default for GateConfig {
    fn default() -> Self {
        Self {
            alpha: DEFAULT_ALPHA,
            aggregation: Aggregation::SumOfParents,
        }
    }
}

impl GateConfig {
    pub fn validate(&self) -> Result<(), MergeError> {
        if self.alpha > 0.0 && self.alpha < 1.0 {
            Ok(())
        } else {
            Err(MergeError::InvalidAlpha(self.alpha))
        }
    }

    /// The value a merged score must strictly exceed.
    pub fn threshold(&self, pre_i: f64, pre_j: f64) -> f64 {
        match self.aggregation {
            Aggregation::SumOfParents => self.alpha * (pre_i + pre_j),
            Aggregation::MeanOfParents => self.alpha * (pre_i + pre_j) / 2.0,
        }
    }
}

/// `post > α · (pre_i + pre_j)` (or half of that under mean aggregation).
pub fn quality_gate(post: f64, pre_i: f64, pre_j: f64, cfg: &GateConfig) -> bool {
    post > cfg.threshold(pre_i, pre_j)
}

#[derive(Debug, thiserror::Error)]
pub enum SynthesisError {
    #[error(transparent)]
    Parse(#[from] ParseFailure),
    #[error(transparent)]
    Provider(#[from] ApiError),
}

pub trait Merger: Send + Sync {
    fn merger_id(&self) -> String;

    /// One synthesis attempt; `attempt` counts from 0.
    fn synthesize(&self, ctx: &MergeContext, attempt: u32) -> Result<MergedFields, SynthesisError>;
}

/// Offline merger: instructions joined with `" and "`, non-empty inputs and
/// outputs joined with newlines.
#[derive(Debug, Clone, Copy, Default)]
pub struct ConcatMerger;

fn join_nonempty(a: &str, b: &str) -> String {
    match (a.is_empty(), b.is_empty()) {
        (true, _) => b.to_owned(),
        (_, true) => a.to_owned(),
        _ => format!("{a}\n{b}"),
    }
}

impl Merger for ConcatMerger {
    fn merger_id(&self) -> String {
        "concat-v1".into()
    }

    fn synthesize(&self, ctx: &MergeContext, _attempt: u32) -> Result<MergedFields, SynthesisError> {
        let (a, b) = (&ctx.first, &ctx.second);
        Ok(MergedFields {
            instruction: format!("{} and {}", a.instruction, b.instruction),
            input: join_nonempty(&a.input, &b.input),
            output: join_nonempty(&a.output, &b.output),
        })
    }
}

/// LLM merger over a chat transport. The first attempt runs at temperature
/// 0; re-synthesis attempts raise it so a recorded or cached response is not
/// simply repeated.
pub struct RemoteMerger {
    transport: Box<dyn ChatTransport>,
    model: String,
}

impl RemoteMerger {
    pub fn new(transport: Box<dyn ChatTransport>, model: impl Into<String>) -> Self {
        Self {
            transport,
            model: model.into(),
        }
    }

    pub fn request_for(&self, ctx: &MergeContext, attempt: u32) -> ChatRequest {
        ChatRequest {
            model: self.model.clone(),
            messages: vec![ChatMessage::user(build_merge_prompt(ctx))],
            temperature: 0.35 * attempt as f64,
            max_tokens: None,
        }
    }
}

impl Merger for RemoteMerger {
    fn merger_id(&self) -> String {
        format!("{MERGE_TEMPLATE_ID}:{}", self.model)
    }

    fn synthesize(&self, ctx: &MergeContext, attempt: u32) -> Result<MergedFields, SynthesisError> {
        let raw = self.transport.complete(&self.request_for(ctx, attempt))?;
        Ok(parse_merge_response(&raw)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Accepted,
    RejectedByGate,
    ParseFailed,
    ProviderFailed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Disposition {
    UseMerged,
    KeepBothOriginals,
}

/// Result of merging one pair. Also the line format of the outcome log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergeOutcome {
    pub pair: CandidatePair,
    pub verdict: Verdict,
    pub disposition: Disposition,
    /// Parent scores; absent only when scoring a parent failed.
    pub pre_scores: Option<[f64; 2]>,
    pub post_score: Option<f64>,
    /// The last synthesized candidate, kept for audit even when rejected.
    #[serde(rename = "merged_fields")]
    pub merged: Option<InstructionRecord>,
    pub template_id: String,
    pub attempts: u32,
    /// Raw response or error text of the last failed attempt.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
}

impl MergeOutcome {
    pub fn accepted(&self) -> bool {
        self.verdict == Verdict::Accepted
    }

    /// Checks the verdict/disposition contract and, for accepted outcomes,
    /// re-evaluates the gate from the recorded scores.
    pub fn check(&self, gate: &GateConfig) -> Result<(), MergeError> {
        let bad = |m: &str| Err(MergeError::Inconsistent(format!("pair ({}, {}): {m}", self.pair.id_a, self.pair.id_b)));
        match (self.verdict, self.disposition) {
            (Verdict::Accepted, Disposition::UseMerged) => {}
            (Verdict::Accepted, _) => return bad("accepted outcome must use the merged record"),
            (_, Disposition::UseMerged) => return bad("only accepted outcomes may use the merged record"),
            _ => {}
        }
        if self.accepted() {
            let (Some([a, b]), Some(post), Some(m)) = (self.pre_scores, self.post_score, &self.merged) else {
                return bad("accepted outcome lacks scores or record");
            };
            if !quality_gate(post, a, b, gate) {
                return bad("accepted outcome does not pass the gate");
            }
            if m.provenance
                != (Provenance::Merged {
                    parents: [self.pair.id_a.clone(), self.pair.id_b.clone()],
                })
            {
                return bad("merged record does not name the pair as parents");
            }
        }
        Ok(())
    }
}

/// Id given to the record merged from `a` and `b`.
pub fn merged_id(a: &RecordId, b: &RecordId) -> RecordId {
    RecordId::new(format!("merged-{a}-{b}"))
}

fn score(scorer: &dyn Scorer, r: &InstructionRecord) -> Result<f64, ScoringError> {
    scorer.score(r).map(|s| s.value())
}

/// Scores the parents, then synthesizes, scores and gates up to
/// `1 + max_resynthesis` candidates. Failures never abort: they end in a
/// `KeepBothOriginals` outcome.
pub fn merge_pair(
    pair: &CandidatePair,
    ctx: &MergeContext,
    merger: &dyn Merger,
    scorer: &dyn Scorer,
    gate: &GateConfig,
    max_resynthesis: u32,
) -> MergeOutcome {
    let mut out = MergeOutcome {
        pair: pair.clone(),
        verdict: Verdict::ProviderFailed,
        disposition: Disposition::KeepBothOriginals,
        pre_scores: None,
        post_score: None,
        merged: None,
        template_id: MERGE_TEMPLATE_ID.into(),
        attempts: 0,
        detail: None,
    };
    let (a, b) = match (score(scorer, &ctx.first), score(scorer, &ctx.second)) {
        (Ok(a), Ok(b)) => (a, b),
        (Err(e), _) | (_, Err(e)) => {
            out.detail = Some(e.to_string());
            return out;
        }
    };
    out.pre_scores = Some([a, b]);
    let parents = [pair.id_a.clone(), pair.id_b.clone()];
    for attempt in 0..=max_resynthesis {
        out.attempts = attempt + 1;
        let fields = match merger.synthesize(ctx, attempt) {
            Ok(f) => f,
            Err(SynthesisError::Parse(p)) => {
                out.verdict = Verdict::ParseFailed;
                out.detail = Some(p.raw);
                continue;
            }
            Err(SynthesisError::Provider(e)) => {
                out.verdict = Verdict::ProviderFailed;
                out.detail = Some(e.to_string());
                return out;
            }
        };
        let record = InstructionRecord::new(merged_id(&parents[0], &parents[1]).as_str(), fields.instruction, fields.input, fields.output)
            .with_provenance(Provenance::Merged {
                parents: parents.clone(),
            });
        let post = match score(scorer, &record) {
            Ok(p) => p,
            Err(e) => {
                out.verdict = Verdict::ProviderFailed;
                out.detail = Some(e.to_string());
                out.merged = Some(record);
                return out;
            }
        };
        out.post_score = Some(post);
        out.merged = Some(record);
        if quality_gate(post, a, b, gate) {
            out.verdict = Verdict::Accepted;
            out.disposition = Disposition::UseMerged;
            out.detail = None;
            return out;
        }
        out.verdict = Verdict::RejectedByGate;
        out.detail = None;
    }
    out
}

type PairKey = (RecordId, RecordId);

fn pair_key(p: &CandidatePair) -> PairKey {
    (p.id_a.clone(), p.id_b.clone())
}

/// Append-only JSONL log of outcomes. Reopening an existing log recovers
/// every complete line, so an interrupted merge stage resumes where it
/// stopped.
pub struct OutcomeLog {
    path: PathBuf,
    done: HashMap<PairKey, MergeOutcome>,
    file: Mutex<File>,
}

impl OutcomeLog {
    pub fn open(path: impl Into<PathBuf>) -> Result<Self, MergeError> {
        let path = path.into();
        let err = |e: std::io::Error| MergeError::Log {
            path: path.clone(),
            message: e.to_string(),
        };
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(err)?;
        }
        let mut done = HashMap::new();
        let mut torn = false;
        if path.exists() {
            let text = std::fs::read_to_string(&path).map_err(err)?;
            torn = !text.is_empty() && !text.ends_with('\n');
            for line in BufReader::new(text.as_bytes()).lines() {
                let line = line.map_err(err)?;
                if line.trim().is_empty() {
                    continue;
                }
                match serde_json::from_str::<MergeOutcome>(&line) {
                    Ok(o) => {
                        done.insert(pair_key(&o.pair), o);
                    }
                    Err(e) => tracing::warn!("{}: skipping unreadable outcome line: {e}", path.display()),
                }
            }
        }
        let mut file = OpenOptions::new().create(true).append(true).open(&path).map_err(err)?;
        if torn {
            // Terminate the torn line so the next append starts clean.
            file.write_all(b"\n").map_err(err)?;
        }
        Ok(Self {
            path,
            done,
            file: Mutex::new(file),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn completed(&self) -> usize {
        self.done.len()
    }

    pub fn get(&self, pair: &CandidatePair) -> Option<&MergeOutcome> {
        self.done.get(&pair_key(pair))
    }

    pub fn append(&self, outcome: &MergeOutcome) -> Result<(), MergeError> {
        let line = serde_json::to_string(outcome).expect("outcome serializes");
        let mut f = self.file.lock().expect("lock");
        writeln!(f, "{line}")
            .and_then(|_| f.flush())
            .map_err(|e| MergeError::Log {
                path: self.path.clone(),
                message: e.to_string(),
            })
    }
}

/// Runs `merge_pair` over `pairs` with at most `max_in_flight` concurrent
/// calls. Outcomes already in `log` are reused; new ones are appended as
/// they complete. The result follows the input order.
pub fn merge_all(
    pairs: &[(CandidatePair, MergeContext)],
    merger: &dyn Merger,
    scorer: &dyn Scorer,
    gate: &GateConfig,
    max_resynthesis: u32,
    max_in_flight: usize,
    log: Option<&OutcomeLog>,
) -> Result<Vec<MergeOutcome>, MergeError> {
    gate.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(max_in_flight.max(1))
        .build()
        .map_err(|e| MergeError::Config(e.to_string()))?;
    pool.install(|| {
        pairs
            .par_iter()
            .map(|(pair, ctx)| {
                if let Some(prev) = log.and_then(|l| l.get(pair)) {
                    return Ok(prev.clone());
                }
                let o = merge_pair(pair, ctx, merger, scorer, gate, max_resynthesis);
                if let Some(l) = log {
                    l.append(&o)?;
                }
                Ok(o)
            })
            .collect()
    })
}

/// Builds the merged corpus: per cluster, each pair contributes its merged
/// record when accepted or both parents otherwise, followed by the
/// cluster's singletons when `keep_singletons` is set.
pub fn assemble_merged_corpus(
    pairing: &[PairingResult],
    outcomes: &[MergeOutcome],
    filtered: &Corpus,
    keep_singletons: bool,
) -> Result<Corpus, MergeError> {
    let mut by_pair: HashMap<PairKey, &MergeOutcome> = HashMap::with_capacity(outcomes.len());
    for o in outcomes {
        if by_pair.insert(pair_key(&o.pair), o).is_some() {
            return Err(MergeError::Inconsistent(format!("duplicate outcome for ({}, {})", o.pair.id_a, o.pair.id_b)));
        }
    }
    let original = |id: &RecordId| filtered.get(id).cloned().ok_or_else(|| MergeError::Unresolved(id.clone()));
    let mut out = Vec::new();
    let mut used = HashSet::new();
    for result in pairing {
        for pair in &result.pairs {
            let o = by_pair
                .remove(&pair_key(pair))
                .ok_or_else(|| MergeError::Inconsistent(format!("no outcome for pair ({}, {})", pair.id_a, pair.id_b)))?;
            used.insert(pair_key(pair));
            match (o.disposition, &o.merged) {
                (Disposition::UseMerged, Some(m)) => out.push(m.clone()),
                (Disposition::UseMerged, None) => {
                    return Err(MergeError::Inconsistent(format!("accepted pair ({}, {}) has no record", pair.id_a, pair.id_b)))
                }
                (Disposition::KeepBothOriginals, _) => {
                    out.push(original(&pair.id_a)?);
                    out.push(original(&pair.id_b)?);
                }
            }
        }
        if keep_singletons {
            for id in &result.singletons {
                out.push(original(id)?);
            }
        }
    }
    if let Some((a, b)) = by_pair.keys().next() {
        return Err(MergeError::Inconsistent(format!("outcome for unmined pair ({a}, {b})")));
    }
    Corpus::new(out).map_err(|e| MergeError::Inconsistent(e.to_string()))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MergerKind {
    RemoteLlm,
    Replay,
    #[default]
    DeterministicMock,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MergerConfig {
    pub kind: MergerKind,
    pub endpoint: Option<EndpointConfig>,
    pub model: String,
    pub max_resynthesis: u32,
    pub max_in_flight: usize,
    /// Fixture file for `replay`; audit log for `remote_llm`.
    pub fixture_path: Option<PathBuf>,
}

impl Default for MergerConfig {
    fn default() -> Self {
        Self {
            kind: MergerKind::DeterministicMock,
            endpoint: None,
            model: "gpt-4o-mini".into(),
            max_resynthesis: DEFAULT_RESYNTHESIS,
            max_in_flight: 4,
            fixture_path: None,
        }
    }
}

impl MergerConfig {
    pub fn validate(&self) -> Result<(), MergeError> {
        if self.max_in_flight == 0 {
            return Err(MergeError::Config("max_in_flight must be at least 1".into()));
        }
        match self.kind {
            MergerKind::RemoteLlm if self.endpoint.is_none() => Err(MergeError::Config("remote_llm merger needs an endpoint".into())),
            MergerKind::Replay if self.fixture_path.is_none() => Err(MergeError::Config("replay merger needs fixture_path".into())),
            _ => Ok(()),
        }
    }

    pub fn build(&self) -> Result<Box<dyn Merger>, MergeError> {
        self.validate()?;
        Ok(match self.kind {
            MergerKind::DeterministicMock => Box::new(ConcatMerger),
            MergerKind::Replay => {
                let replay = crate::http::ReplayChat::from_file(self.fixture_path.as_ref().expect("validated"))?;
                Box::new(RemoteMerger::new(Box::new(replay), &self.model))
            }
            MergerKind::RemoteLlm => {
                let http = crate::http::HttpChat::new(self.endpoint.as_ref().expect("validated"))?;
                let transport: Box<dyn ChatTransport> = match &self.fixture_path {
                    Some(p) => Box::new(crate::http::RecordingChat::open(http, p)?),
                    None => Box::new(http),
                };
                Box::new(RemoteMerger::new(transport, &self.model))
            }
        })
    }
}
