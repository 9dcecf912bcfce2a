//! Record quality scores and sequence perplexity.
//!
//! Quality scorers feed the merge gate and the optional selection floor.
//! Perplexity is `2^(-mean log2 p)` over per-token probabilities and backs
//! the perplexity baseline.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Mutex, RwLock};

use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::corpus::InstructionRecord;
use crate::hashing::ContentHasher;
use crate::http::{ApiClient, ApiError, ChatMessage, ChatRequest, ChatTransport, EndpointConfig};

#[derive(Debug, thiserror::Error)]
pub enum ScoringError {
    #[error("no score in response after {attempts} attempt(s): {raw:?}")]
    Unparseable { raw: String, attempts: u32 },
    #[error("scoring provider: {0}")]
    Provider(#[from] ApiError),
    #[error("invalid score {0}")]
    InvalidScore(f64),
    #[error("{0}")]
    Argument(String),
    #[error("endpoint capability: {0}")]
    Capability(String),
    #[error("score cache {}: {message}", path.display())]
    Cache { path: PathBuf, message: String },
    #[error("scorer config: {0}")]
    Config(String),
}

/// A finite, non-negative quality score.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct QualityScore(f64);

impl QualityScore {
    pub fn new(value: f64) -> Result<Self, ScoringError> {
        if value.is_finite() && value >= 0.0 {
            Ok(Self(value))
        } else {
            Err(ScoringError::InvalidScore(value))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

impl TryFrom<f64> for QualityScore {
    type Error = ScoringError;

    fn try_from(v: f64) -> Result<Self, Self::Error> {
        Self::new(v)
    }
}

impl From<QualityScore> for f64 {
    fn from(s: QualityScore) -> f64 {
        s.0
    }
}

pub trait Scorer: Send + Sync {
    /// Identity used in cache keys; changes whenever scores could change.
    fn scorer_id(&self) -> String;

    fn score(&self, record: &InstructionRecord) -> Result<QualityScore, ScoringError>;
}

/// Offline scorer bounded in [0, 5].
///
/// `5 · (1 − e^(−tokens/200)) · (0.8 + 0.2 · ttr) · (0.95 + 0.05 · u)`,
/// where `tokens` counts whitespace tokens over all three fields, `ttr` is
/// their type-token ratio (case-folded), and `u ∈ [0, 1)` is a hash of the
/// seed and the text. Longer, lexically varied records score higher.
#[derive(Debug, Clone, Copy)]
pub struct MockScorer {
    pub seed: u64,
}

const MOCK_LENGTH_SCALE: f64 = 200.0;

impl MockScorer {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    pub fn score_value(&self, record: &InstructionRecord) -> f64 {
        let tokens: Vec<String> = [&record.instruction, &record.input, &record.output]
            .iter()
            .flat_map(|f| f.split_whitespace())
            .map(|t| t.to_lowercase())
            .collect();
        let total = tokens.len() as f64;
        let ttr = if tokens.is_empty() {
            0.0
        } else {
            let mut uniq = tokens.clone();
            uniq.sort_unstable();
            uniq.dedup();
            uniq.len() as f64 / total
        };
        let length = 1.0 - (-total / MOCK_LENGTH_SCALE).exp();
        let u = ContentHasher::new()
            .part(self.seed.to_le_bytes())
            .part(&record.instruction)
            .part(&record.input)
            .part(&record.output)
            .finish_u64() as f64
            / (u64::MAX as f64 + 1.0);
        5.0 * length * (0.8 + 0.2 * ttr) * (0.95 + 0.05 * u)
    }
}

impl Scorer for MockScorer {
    fn scorer_id(&self) -> String {
        format!("mock-v1-s{}", self.seed)
    }

    fn score(&self, record: &InstructionRecord) -> Result<QualityScore, ScoringError> {
        QualityScore::new(self.score_value(record))
    }
}

pub const SCORE_TEMPLATE_ID: &str = "quality-v1";

/// Renders the scoring prompt for one record.
pub fn build_score_prompt(record: &InstructionRecord) -> String {
    let input = if record.input.is_empty() { "[empty]" } else { &record.input };
    format!(
        "Rate the quality of the following instruction-tuning example: how clear, \
         complex and informative the instruction is, and how helpful, accurate and \
         complete the response is. Use a scale from 0 to 5.\n\
         Reply with a bare number only.\n\n\
         ### Instruction\n{}\n\n### Input\n{}\n\n### Response\n{}\n",
        record.instruction, input, record.output
    )
}

/// First unsigned decimal literal in `text`.
pub fn parse_score(text: &str) -> Option<f64> {
    static RE: std::sync::OnceLock<Regex> = std::sync::OnceLock::new();
    let re = RE.get_or_init(|| Regex::new(r"\d+(?:\.\d+)?").expect("valid regex"));
    re.find(text).and_then(|m| m.as_str().parse().ok())
}

/// LLM judge over an OpenAI-compatible chat transport.
pub struct RemoteScorer {
    transport: Box<dyn ChatTransport>,
    model: String,
    max_retries: u32,
}

impl RemoteScorer {
    pub fn new(transport: Box<dyn ChatTransport>, model: impl Into<String>, max_retries: u32) -> Self {
        Self {
            transport,
            model: model.into(),
            max_retries,
        }
    }

    pub fn request_for(&self, record: &InstructionRecord, attempt: u32) -> ChatRequest {
        ChatRequest {
            model: self.model.clone(),
            messages: vec![ChatMessage::user(build_score_prompt(record))],
            temperature: 0.2 * attempt as f64,
            max_tokens: Some(16),
        }
    }
}

impl Scorer for RemoteScorer {
    fn scorer_id(&self) -> String {
        format!("{}:{}", SCORE_TEMPLATE_ID, self.model)
    }

    fn score(&self, record: &InstructionRecord) -> Result<QualityScore, ScoringError> {
        let mut raw = String::new();
        for attempt in 0..=self.max_retries {
            raw = self.transport.complete(&self.request_for(record, attempt))?;
            if let Some(v) = parse_score(&raw) {
                return QualityScore::new(v);
            }
            tracing::warn!("unparseable score response (attempt {}): {raw:?}", attempt + 1);
        }
        Err(ScoringError::Unparseable {
            raw,
            attempts: self.max_retries + 1,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct ScoreLine {
    key: String,
    scorer_id: String,
    score: f64,
}

/// Memoizes a scorer by record content; optionally persisted as JSONL
/// `{key, scorer_id, score}`.
pub struct CachedScorer<S> {
    inner: S,
    id: String,
    entries: RwLock<HashMap<String, f64>>,
    file: Option<(PathBuf, Mutex<File>)>,
    upstream: AtomicUsize,
}

impl<S: Scorer> CachedScorer<S> {
    pub fn in_memory(inner: S) -> Self {
        Self {
            id: inner.scorer_id(),
            inner,
            entries: RwLock::new(HashMap::new()),
            file: None,
            upstream: AtomicUsize::new(0),
        }
    }

    pub fn persistent(inner: S, path: impl Into<PathBuf>) -> Result<Self, ScoringError> {
        let path = path.into();
        let err = |e: std::io::Error| ScoringError::Cache {
            path: path.clone(),
            message: e.to_string(),
        };
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(err)?;
        }
        let id = inner.scorer_id();
        let mut entries = HashMap::new();
        if path.exists() {
            for line in BufReader::new(File::open(&path).map_err(err)?).lines() {
                let line = line.map_err(err)?;
                if let Ok(l) = serde_json::from_str::<ScoreLine>(&line) {
                    if l.scorer_id == id {
                        entries.insert(l.key, l.score);
                    }
                }
            }
        }
        let f = OpenOptions::new().create(true).append(true).open(&path).map_err(err)?;
        Ok(Self {
            inner,
            id,
            entries: RwLock::new(entries),
            file: Some((path, Mutex::new(f))),
            upstream: AtomicUsize::new(0),
        })
    }

    pub fn upstream_calls(&self) -> usize {
        self.upstream.load(Ordering::Relaxed)
    }

    fn key(&self, record: &InstructionRecord) -> String {
        ContentHasher::new().part(&self.id).part(record.content_hash()).finish()
    }
}

impl<S: Scorer> Scorer for CachedScorer<S> {
    fn scorer_id(&self) -> String {
        self.id.clone()
    }

    fn score(&self, record: &InstructionRecord) -> Result<QualityScore, ScoringError> {
        let key = self.key(record);
        if let Some(&v) = self.entries.read().expect("lock").get(&key) {
            return QualityScore::new(v);
        }
        self.upstream.fetch_add(1, Ordering::Relaxed);
        let s = self.inner.score(record)?;
        if let Some((path, f)) = &self.file {
            let line = serde_json::to_string(&ScoreLine {
                key: key.clone(),
                scorer_id: self.id.clone(),
                score: s.value(),
            })
            .expect("score line serializes");
            writeln!(f.lock().expect("lock"), "{line}").map_err(|e| ScoringError::Cache {
                path: path.clone(),
                message: e.to_string(),
            })?;
        }
        self.entries.write().expect("lock").insert(key, s.value());
        Ok(s)
    }
}

/// `2^(−(1/N) Σ log2 p_i)` over base-2 token log-probabilities.
pub fn compute_perplexity(token_log2_probs: &[f64]) -> Result<f64, ScoringError> {
    if token_log2_probs.is_empty() {
        return Err(ScoringError::Argument("perplexity of an empty sequence".into()));
    }
    if let Some(bad) = token_log2_probs.iter().find(|x| !(**x <= 0.0)) {
        return Err(ScoringError::Argument(format!("log-probability {bad} is not <= 0")));
    }
    let mean = token_log2_probs.iter().sum::<f64>() / token_log2_probs.len() as f64;
    Ok((-mean).exp2())
}

/// Converts natural-log probabilities to base 2.
pub fn ln_to_log2(ln_probs: &[f64]) -> Vec<f64> {
    ln_probs.iter().map(|x| x / std::f64::consts::LN_2).collect()
}

/// Per-token natural-log probabilities of a text under some model.
pub trait LogprobSource: Send + Sync {
    fn source_id(&self) -> String;

    fn token_logprobs(&self, text: &str) -> Result<Vec<f64>, ScoringError>;
}

/// Offline stand-in: one log-probability per whitespace token, derived from
/// a hash of `(seed, token, previous token)`.
#[derive(Debug, Clone, Copy)]
pub struct MockLogprobs {
    pub seed: u64,
}

impl LogprobSource for MockLogprobs {
    fn source_id(&self) -> String {
        format!("mock-logprobs-s{}", self.seed)
    }

    fn token_logprobs(&self, text: &str) -> Result<Vec<f64>, ScoringError> {
        if text.is_empty() {
            return Err(ScoringError::Argument("empty text".into()));
        }
        let mut prev = "";
        Ok(text
            .split_whitespace()
            .map(|tok| {
                let u = ContentHasher::new()
                    .part(self.seed.to_le_bytes())
                    .part(prev)
                    .part(tok)
                    .finish_u64() as f64
                    / (u64::MAX as f64 + 1.0);
                prev = tok;
                -(0.05 + 4.0 * u)
            })
            .collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogprobEndpointConfig {
    pub endpoint: EndpointConfig,
    pub model: String,
    /// Whether the server returns prompt-token logprobs (`echo` + `logprobs`).
    #[serde(default = "yes")]
    pub supports_logprobs: bool,
}

fn yes() -> bool {
    true
}

impl LogprobEndpointConfig {
    pub fn validate(&self) -> Result<(), ScoringError> {
        if !self.supports_logprobs {
            return Err(ScoringError::Capability(format!(
                "endpoint {} does not provide per-token logprobs",
                self.endpoint.base_url
            )));
        }
        Ok(())
    }
}

/// Scores a text through an OpenAI-compatible `/completions` call with
/// `echo` and `logprobs`, memoized by text hash.
pub struct RemoteLogprobs {
    client: ApiClient,
    model: String,
    cache: RwLock<HashMap<String, Vec<f64>>>,
}

impl RemoteLogprobs {
    pub fn new(cfg: &LogprobEndpointConfig) -> Result<Self, ScoringError> {
        cfg.validate()?;
        Ok(Self {
            client: ApiClient::new(&cfg.endpoint)?,
            model: cfg.model.clone(),
            cache: RwLock::new(HashMap::new()),
        })
    }

    pub fn request_count(&self) -> usize {
        self.client.request_count()
    }
}

impl LogprobSource for RemoteLogprobs {
    fn source_id(&self) -> String {
        format!("logprobs:{}", self.model)
    }

    fn token_logprobs(&self, text: &str) -> Result<Vec<f64>, ScoringError> {
        if text.is_empty() {
            return Err(ScoringError::Argument("empty text".into()));
        }
        let key = crate::hashing::sha256_hex(text);
        if let Some(hit) = self.cache.read().expect("lock").get(&key) {
            return Ok(hit.clone());
        }
        let resp = self.client.post_json(
            "completions",
            &json!({"model": self.model, "prompt": text, "max_tokens": 0, "echo": true, "logprobs": 1, "temperature": 0}),
        )?;
        let lps = resp
            .pointer("/choices/0/logprobs/token_logprobs")
            .and_then(Value::as_array)
            .ok_or_else(|| ScoringError::Capability("response carries no token_logprobs".into()))?;
        // The first position (no left context) is reported as null.
        let values: Vec<f64> = lps.iter().filter_map(Value::as_f64).collect();
        if let Some(bad) = values.iter().find(|v| **v > 0.0) {
            return Err(ScoringError::Argument(format!("endpoint returned positive logprob {bad}")));
        }
        self.cache.write().expect("lock").insert(key, values.clone());
        Ok(values)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScorerKind {
    RemoteLlm,
    /// Replays a recorded chat fixture file.
    Replay,
    #[default]
    DeterministicMock,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScorerConfig {
    pub kind: ScorerKind,
    pub endpoint: Option<EndpointConfig>,
    pub model: String,
    pub prompt_template: String,
    pub seed: u64,
    pub max_retries: u32,
    /// Fixture file for `replay`; audit log for `remote_llm`.
    pub fixture_path: Option<PathBuf>,
    pub cache_path: Option<PathBuf>,
}

impl Default for ScorerConfig {
    fn default() -> Self {
        Self {
            kind: ScorerKind::DeterministicMock,
            endpoint: None,
            model: "deita-quality-scorer".into(),
            prompt_template: SCORE_TEMPLATE_ID.into(),
            seed: 0,
            max_retries: 2,
            fixture_path: None,
            cache_path: None,
        }
    }
}

impl ScorerConfig {
    pub fn validate(&self) -> Result<(), ScoringError> {
        if self.prompt_template != SCORE_TEMPLATE_ID {
            return Err(ScoringError::Config(format!(
                "unknown prompt template {:?} (available: {SCORE_TEMPLATE_ID})",
                self.prompt_template
            )));
        }
        match self.kind {
            ScorerKind::RemoteLlm if self.endpoint.is_none() => {
                Err(ScoringError::Config("remote_llm scorer needs an endpoint".into()))
            }
            ScorerKind::Replay if self.fixture_path.is_none() => {
                Err(ScoringError::Config("replay scorer needs fixture_path".into()))
            }
            _ => Ok(()),
        }
    }

    /// Builds the scorer, memoized in memory or in `cache_path`.
    pub fn build(&self) -> Result<Box<dyn Scorer>, ScoringError> {
        self.validate()?;
        let inner: Box<dyn Scorer> = match self.kind {
            ScorerKind::DeterministicMock => Box::new(MockScorer::new(self.seed)),
            ScorerKind::Replay => {
                let replay = crate::http::ReplayChat::from_file(self.fixture_path.as_ref().expect("validated"))?;
                Box::new(RemoteScorer::new(Box::new(replay), &self.model, self.max_retries))
            }
            ScorerKind::RemoteLlm => {
                let http = crate::http::HttpChat::new(self.endpoint.as_ref().expect("validated"))?;
                let transport: Box<dyn ChatTransport> = match &self.fixture_path {
                    Some(p) => Box::new(crate::http::RecordingChat::open(http, p)?),
                    None => Box::new(http),
                };
                Box::new(RemoteScorer::new(transport, &self.model, self.max_retries))
            }
        };
        Ok(match &self.cache_path {
            Some(p) => Box::new(CachedScorer::persistent(inner, p)?),
            None => Box::new(CachedScorer::in_memory(inner)),
        })
    }
}

impl Scorer for Box<dyn Scorer> {
    fn scorer_id(&self) -> String {
        (**self).scorer_id()
    }

    fn score(&self, record: &InstructionRecord) -> Result<QualityScore, ScoringError> {
        (**self).score(record)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::http::ReplayChat;

    #[test]
    fn perplexity_identities() {
        assert_eq!(compute_perplexity(&[0.0, 0.0, 0.0]).unwrap(), 1.0);
        assert_eq!(compute_perplexity(&[-3.0; 7]).unwrap(), 8.0);
        assert!((compute_perplexity(&[-1.0, -2.0, -3.0]).unwrap() - 4.0).abs() < 1e-12);
        assert!(compute_perplexity(&[]).is_err());
        assert!(compute_perplexity(&[-1.0, 0.5]).is_err());
        assert!(compute_perplexity(&[f64::NAN]).is_err());
    }

    #[test]
    fn natural_log_helper() {
        let lp2 = ln_to_log2(&[(0.125f64).ln(); 4]);
        assert!((compute_perplexity(&lp2).unwrap() - 8.0).abs() < 1e-12);
    }

    #[test]
    fn score_validation() {
        assert!(QualityScore::new(0.0).is_ok());
        assert!(QualityScore::new(-0.1).is_err());
        assert!(QualityScore::new(f64::INFINITY).is_err());
        assert!(serde_json::from_str::<QualityScore>("-1").is_err());
    }

    #[test]
    fn mock_is_bounded_and_prefers_content() {
        let s = MockScorer::new(3);
        let empty = InstructionRecord::new("1", "Summarize the paragraph", "", "");
        let words: Vec<String> = (0..50).map(|i| format!("word{i}")).collect();
        let full = InstructionRecord::new("1", "Summarize the paragraph", "", words.join(" "));
        let (a, b) = (s.score_value(&empty), s.score_value(&full));
        assert!(a < 0.5, "empty output scored {a}");
        assert!(a < b);
        assert!((0.0..=5.0).contains(&b));
        let huge = InstructionRecord::new("1", "x", "", "y ".repeat(100_000));
        assert!(s.score_value(&huge) <= 5.0);
    }

    #[test]
    fn mock_ignores_id_and_depends_on_seed() {
        let a = InstructionRecord::new("1", "Name a color", "", "Blue");
        let b = InstructionRecord::new("2", "Name a color", "", "Blue");
        assert_eq!(MockScorer::new(0).score_value(&a), MockScorer::new(0).score_value(&b));
        assert_ne!(MockScorer::new(0).score_value(&a), MockScorer::new(1).score_value(&a));
    }

    #[test]
    fn score_parsing() {
        assert_eq!(parse_score("3.5"), Some(3.5));
        assert_eq!(parse_score("Score: 4 out of 5"), Some(4.0));
        assert_eq!(parse_score("  1.88\n"), Some(1.88));
        assert_eq!(parse_score("no idea"), None);
    }

    struct Fixed(&'static str, AtomicUsize);

    impl ChatTransport for Fixed {
        fn complete(&self, _r: &ChatRequest) -> Result<String, ApiError> {
            self.1.fetch_add(1, Ordering::SeqCst);
            Ok(self.0.to_owned())
        }
    }

    #[test]
    fn unparseable_after_retries_keeps_raw() {
        let s = RemoteScorer::new(Box::new(Fixed("great!", AtomicUsize::new(0))), "m", 2);
        match s.score(&InstructionRecord::new("1", "x", "", "y")).unwrap_err() {
            ScoringError::Unparseable { raw, attempts } => {
                assert_eq!(raw, "great!");
                assert_eq!(attempts, 3);
            }
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn cache_makes_one_upstream_call_per_content() {
        let cached = CachedScorer::in_memory(RemoteScorer::new(Box::new(Fixed("2.5", AtomicUsize::new(0))), "m", 0));
        let a = InstructionRecord::new("1", "x", "", "y");
        let b = InstructionRecord::new("2", "x", "", "y");
        assert_eq!(cached.score(&a).unwrap(), cached.score(&b).unwrap());
        assert_eq!(cached.upstream_calls(), 1);
    }

    #[test]
    fn persistent_cache_survives_reopen() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("scores.jsonl");
        let r = InstructionRecord::new("1", "x", "", "y");
        let first = CachedScorer::persistent(MockScorer::new(9), &p).unwrap().score(&r).unwrap();
        let reopened = CachedScorer::persistent(MockScorer::new(9), &p).unwrap();
        assert_eq!(reopened.score(&r).unwrap(), first);
        assert_eq!(reopened.upstream_calls(), 0);
    }

    #[test]
    fn replay_scorer_reads_recorded_score() {
        let r = InstructionRecord::new("1", "Name a color", "", "Blue");
        let scorer = RemoteScorer::new(Box::new(ReplayChat::from_exchanges([])), "m", 0);
        let req = scorer.request_for(&r, 0);
        let replay = ReplayChat::from_exchanges([crate::http::RecordedExchange {
            key: req.key(),
            request: req,
            response: "2.75".into(),
        }]);
        let scorer = RemoteScorer::new(Box::new(replay), "m", 0);
        assert_eq!(scorer.score(&r).unwrap().value(), 2.75);
    }

    #[test]
    fn capability_is_checked_up_front() {
        let cfg = LogprobEndpointConfig {
            endpoint: EndpointConfig::new("http://127.0.0.1:9"),
            model: "m".into(),
            supports_logprobs: false,
        };
        assert!(matches!(RemoteLogprobs::new(&cfg), Err(ScoringError::Capability(_))));
    }

    #[test]
    fn mock_logprobs_are_nonpositive_and_stable() {
        let m = MockLogprobs { seed: 1 };
        let a = m.token_logprobs("the cat sat").unwrap();
        assert_eq!(a.len(), 3);
        assert!(a.iter().all(|x| *x < 0.0));
        assert_eq!(a, m.token_logprobs("the cat sat").unwrap());
        assert!(m.token_logprobs("").is_err());
    }
}
