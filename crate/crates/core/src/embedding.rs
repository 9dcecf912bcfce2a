//! Text embeddings and similarity primitives.
//!
//! Every vector handed out by an [`Embedder`] is L2-normalized, so cosine
//! similarity downstream is a plain dot product.

use std::collections::{HashMap, HashSet};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Mutex, RwLock};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::corpus::InstructionRecord;
use crate::hashing::ContentHasher;
use crate::http::{ApiClient, ApiError, EndpointConfig};

pub const DEFAULT_DIM: usize = 384;

#[derive(Debug, thiserror::Error)]
pub enum EmbeddingError {
    #[error("zero vector has no direction")]
    ZeroVector,
    #[error("dimension mismatch: expected {expected}, got {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("text #{0} is empty")]
    EmptyText(usize),
    #[error("embedding provider: {0}")]
    Remote(#[from] ApiError),
    #[error("embedding config: {0}")]
    Config(String),
    #[error("embedding cache {}: {message}", path.display())]
    Cache { path: PathBuf, message: String },
}

impl EmbeddingError {
    pub fn is_retriable(&self) -> bool {
        matches!(self, EmbeddingError::Remote(e) if e.is_retriable())
    }
}

/// A dense real vector. Not necessarily unit length (centroids are not).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EmbeddingVector {
    values: Vec<f64>,
}

impl EmbeddingVector {
    pub fn new(values: Vec<f64>) -> Self {
        Self { values }
    }

    /// Builds a unit vector; fails on the zero vector.
    pub fn normalized(values: Vec<f64>) -> Result<Self, EmbeddingError> {
        Self::new(values).normalize()
    }

    pub fn normalize(&self) -> Result<Self, EmbeddingError> {
        let norm = self.norm();
        if norm == 0.0 || !norm.is_finite() {
            return Err(EmbeddingError::ZeroVector);
        }
        Ok(Self {
            values: self.values.iter().map(|x| x / norm).collect(),
        })
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn dot(&self, other: &Self) -> f64 {
        dot(&self.values, &other.values)
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self::new(self.values.iter().map(|x| x * factor).collect())
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Cosine of the angle between `u` and `v`, clamped to [-1, 1].
pub fn cosine_similarity(u: &EmbeddingVector, v: &EmbeddingVector) -> Result<f64, EmbeddingError> {
    if u.dim() != v.dim() {
        return Err(EmbeddingError::DimensionMismatch {
            expected: u.dim(),
            found: v.dim(),
        });
    }
    let (nu, nv) = (u.norm(), v.norm());
    if nu == 0.0 || nv == 0.0 {
        return Err(EmbeddingError::ZeroVector);
    }
    Ok((u.dot(v) / (nu * nv)).clamp(-1.0, 1.0))
}

/// Which record fields feed the embedder.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TextMode {
    #[default]
    InstructionOnly,
    InstructionPlusInput,
    Full,
}

pub fn record_text_for_embedding(record: &InstructionRecord, mode: TextMode) -> String {
    match mode {
        TextMode::InstructionOnly => record.instruction.clone(),
        TextMode::InstructionPlusInput if record.input.is_empty() => record.instruction.clone(),
        TextMode::InstructionPlusInput => format!("{}\n{}", record.instruction, record.input),
        TextMode::Full => format!("{}\n{}\n{}", record.instruction, record.input, record.output),
    }
}

pub trait Embedder: Send + Sync {
    fn dim(&self) -> usize;

    /// Stable identity used in cache keys and reports.
    fn model_name(&self) -> &str;

    /// One unit vector per text, in input order.
    fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, EmbeddingError>;
}

/// Offline embedder: a bag of hashed character trigrams projected through a
/// seeded random sign matrix, then normalized. The sign row for a trigram is
/// generated from a hash of `(seed, trigram)`, so the matrix is never
/// materialized.
#[derive(Debug, Clone)]
pub struct HashedNgramEmbedder {
    dim: usize,
    seed: u64,
    name: String,
}

const NGRAM: usize = 3;
const START: char = '\u{2}';
const END: char = '\u{3}';

impl HashedNgramEmbedder {
    pub fn new(dim: usize, seed: u64) -> Self {
        Self {
            dim,
            seed,
            name: format!("hashed-trigram-s{seed}"),
        }
    }

    pub fn embed_one(&self, text: &str) -> Result<EmbeddingVector, EmbeddingError> {
        let chars: Vec<char> = std::iter::once(START)
            .chain(text.chars())
            .chain(std::iter::once(END))
            .collect();
        let mut counts: HashMap<String, f64> = HashMap::new();
        for window in chars.windows(NGRAM) {
            *counts.entry(window.iter().collect()).or_default() += 1.0;
        }
        let mut grams: Vec<_> = counts.into_iter().collect();
        grams.sort_unstable_by(|a, b| a.0.cmp(&b.0));

        let mut acc = vec![0.0; self.dim];
        let mut bits = vec![0u64; self.dim.div_ceil(64)];
        for (gram, count) in grams {
            let row_seed = ContentHasher::new()
                .part(self.seed.to_le_bytes())
                .part(gram.as_bytes())
                .finish_u64();
            let mut rng = ChaCha8Rng::seed_from_u64(row_seed);
            for word in bits.iter_mut() {
                *word = rng.next_u64();
            }
            for (j, a) in acc.iter_mut().enumerate() {
                let bit = (bits[j / 64] >> (j % 64)) & 1;
                *a += if bit == 1 { count } else { -count };
            }
        }
        EmbeddingVector::normalized(acc)
    }
}

impl Embedder for HashedNgramEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn model_name(&self) -> &str {
        &self.name
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, EmbeddingError> {
        texts.iter().map(|t| self.embed_one(t)).collect()
    }
}

/// OpenAI-compatible `/embeddings` client.
pub struct RemoteEmbedder {
    client: ApiClient,
    model: String,
    dim: usize,
}

impl RemoteEmbedder {
    pub fn new(endpoint: &EndpointConfig, model: impl Into<String>, dim: usize) -> Result<Self, EmbeddingError> {
        Ok(Self {
            client: ApiClient::new(endpoint)?,
            model: model.into(),
            dim,
        })
    }

    pub fn request_count(&self) -> usize {
        self.client.request_count()
    }
}

impl Embedder for RemoteEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn model_name(&self) -> &str {
        &self.model
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, EmbeddingError> {
        if texts.is_empty() {
            return Ok(Vec::new());
        }
        let resp = self
            .client
            .post_json("embeddings", &json!({"model": self.model, "input": texts}))?;
        let data = resp
            .get("data")
            .and_then(Value::as_array)
            .ok_or_else(|| ApiError::Decode(format!("no data array in {resp}")))?;
        if data.len() != texts.len() {
            return Err(ApiError::Decode(format!("{} embeddings for {} inputs", data.len(), texts.len())).into());
        }
        let mut slots: Vec<Option<EmbeddingVector>> = vec![None; texts.len()];
        for (pos, item) in data.iter().enumerate() {
            let index = item.get("index").and_then(Value::as_u64).map_or(pos, |i| i as usize);
            let values: Vec<f64> = item
                .get("embedding")
                .and_then(Value::as_array)
                .ok_or_else(|| ApiError::Decode("item without embedding".into()))?
                .iter()
                .map(|x| x.as_f64().ok_or_else(|| ApiError::Decode("non-numeric embedding".into())))
                .collect::<Result<_, _>>()?;
            if values.len() != self.dim {
                return Err(EmbeddingError::DimensionMismatch {
                    expected: self.dim,
                    found: values.len(),
                });
            }
            let slot = slots
                .get_mut(index)
                .ok_or_else(|| ApiError::Decode(format!("index {index} out of range")))?;
            *slot = Some(EmbeddingVector::normalized(values)?);
        }
        slots
            .into_iter()
            .enumerate()
            .map(|(i, v)| v.ok_or_else(|| ApiError::Decode(format!("missing embedding {i}")).into()))
            .collect()
    }
}

#[derive(Serialize, Deserialize)]
struct CacheLine {
    key: String,
    model: String,
    dim: usize,
    vector: Vec<f64>,
}

/// Append-only JSONL cache keyed by `(model, dim, text hash)`.
pub struct EmbeddingCache {
    path: PathBuf,
    entries: RwLock<HashMap<String, Vec<f64>>>,
    file: Mutex<File>,
}

impl EmbeddingCache {
    pub fn open(path: impl Into<PathBuf>) -> Result<Self, EmbeddingError> {
        let path = path.into();
        let err = |e: std::io::Error| EmbeddingError::Cache {
            path: path.clone(),
            message: e.to_string(),
        };
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(err)?;
        }
        let mut entries = HashMap::new();
        if path.exists() {
            let reader = BufReader::new(File::open(&path).map_err(err)?);
            for line in reader.lines() {
                let line = line.map_err(err)?;
                if let Ok(l) = serde_json::from_str::<CacheLine>(&line) {
                    entries.insert(l.key, l.vector);
                }
            }
        }
        let file = OpenOptions::new().create(true).append(true).open(&path).map_err(err)?;
        Ok(Self {
            path,
            entries: RwLock::new(entries),
            file: Mutex::new(file),
        })
    }

    pub fn key(model: &str, dim: usize, text: &str) -> String {
        ContentHasher::new()
            .part(model)
            .part(dim.to_le_bytes())
            .part(text)
            .finish()
    }

    pub fn get(&self, key: &str) -> Option<Vec<f64>> {
        self.entries.read().expect("lock").get(key).cloned()
    }

    pub fn len(&self) -> usize {
        self.entries.read().expect("lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn insert(&self, key: String, model: &str, vector: &EmbeddingVector) -> Result<(), EmbeddingError> {
        let line = serde_json::to_string(&CacheLine {
            key: key.clone(),
            model: model.to_owned(),
            dim: vector.dim(),
            vector: vector.values().to_vec(),
        })
        .expect("cache line serializes");
        {
            let mut f = self.file.lock().expect("lock");
            writeln!(f, "{line}").map_err(|e| EmbeddingError::Cache {
                path: self.path.clone(),
                message: e.to_string(),
            })?;
        }
        self.entries
            .write()
            .expect("lock")
            .insert(key, vector.values().to_vec());
        Ok(())
    }
}

/// Serves repeated texts from an [`EmbeddingCache`]; only misses reach the
/// wrapped embedder.
pub struct CachedEmbedder<E> {
    inner: E,
    cache: EmbeddingCache,
    misses: AtomicUsize,
}

impl<E: Embedder> CachedEmbedder<E> {
    pub fn new(inner: E, cache: EmbeddingCache) -> Self {
        Self {
            inner,
            cache,
            misses: AtomicUsize::new(0),
        }
    }

    /// Texts that had to be sent upstream so far.
    pub fn misses(&self) -> usize {
        self.misses.load(Ordering::Relaxed)
    }

    pub fn inner(&self) -> &E {
        &self.inner
    }
}

impl<E: Embedder> Embedder for CachedEmbedder<E> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn model_name(&self) -> &str {
        self.inner.model_name()
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, EmbeddingError> {
        let (model, dim) = (self.inner.model_name(), self.inner.dim());
        let keys: Vec<String> = texts.iter().map(|t| EmbeddingCache::key(model, dim, t)).collect();
        let mut seen = HashSet::new();
        let missing: Vec<usize> = (0..texts.len())
            .filter(|&i| self.cache.get(&keys[i]).is_none() && seen.insert(keys[i].clone()))
            .collect();
        if !missing.is_empty() {
            let batch: Vec<String> = missing.iter().map(|&i| texts[i].clone()).collect();
            let fresh = self.inner.embed(&batch)?;
            self.misses.fetch_add(batch.len(), Ordering::Relaxed);
            for (&i, v) in missing.iter().zip(&fresh) {
                self.cache.insert(keys[i].clone(), model, v)?;
            }
        }
        keys.iter()
            .map(|k| {
                let values = self.cache.get(k).expect("cached above");
                if values.len() != dim {
                    return Err(EmbeddingError::DimensionMismatch {
                        expected: dim,
                        found: values.len(),
                    });
                }
                Ok(EmbeddingVector::new(values))
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingKind {
    RemoteApi,
    #[default]
    DeterministicTest,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmbeddingProviderConfig {
    pub kind: EmbeddingKind,
    pub endpoint: Option<EndpointConfig>,
    pub model_name: String,
    pub dim: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub max_in_flight: usize,
    /// JSONL cache for remote embeddings.
    pub cache_path: Option<PathBuf>,
}

impl Default for EmbeddingProviderConfig {
    fn default() -> Self {
        Self {
            kind: EmbeddingKind::DeterministicTest,
            endpoint: None,
            model_name: "all-MiniLM-L6-v2".into(),
            dim: DEFAULT_DIM,
            batch_size: 64,
            seed: 0,
            max_in_flight: 4,
            cache_path: None,
        }
    }
}

impl EmbeddingProviderConfig {
    pub fn deterministic(dim: usize, seed: u64) -> Self {
        Self {
            dim,
            seed,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), EmbeddingError> {
        if self.batch_size < 1 {
            return Err(EmbeddingError::Config("batch_size must be >= 1".into()));
        }
        if self.dim < 2 {
            return Err(EmbeddingError::Config("dim must be >= 2".into()));
        }
        if self.max_in_flight < 1 {
            return Err(EmbeddingError::Config("max_in_flight must be >= 1".into()));
        }
        if self.kind == EmbeddingKind::RemoteApi && self.endpoint.is_none() {
            return Err(EmbeddingError::Config("remote_api embedding needs an endpoint".into()));
        }
        Ok(())
    }

    pub fn build(&self) -> Result<Box<dyn Embedder>, EmbeddingError> {
        self.validate()?;
        Ok(match self.kind {
            EmbeddingKind::DeterministicTest => Box::new(HashedNgramEmbedder::new(self.dim, self.seed)),
            EmbeddingKind::RemoteApi => {
                let remote = RemoteEmbedder::new(self.endpoint.as_ref().expect("validated"), &self.model_name, self.dim)?;
                match &self.cache_path {
                    Some(p) => Box::new(CachedEmbedder::new(remote, EmbeddingCache::open(p)?)),
                    None => Box::new(remote),
                }
            }
        })
    }
}

/// Embeds `texts` in batches of `batch_size`, with at most `max_in_flight`
/// batches outstanding. Output order matches input order.
pub fn embed_batch(
    embedder: &dyn Embedder,
    texts: &[String],
    batch_size: usize,
    max_in_flight: usize,
) -> Result<Vec<EmbeddingVector>, EmbeddingError> {
    if let Some(i) = texts.iter().position(|t| t.is_empty()) {
        return Err(EmbeddingError::EmptyText(i));
    }
    let chunks: Vec<&[String]> = texts.chunks(batch_size.max(1)).collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(max_in_flight.max(1))
        .build()
        .map_err(|e| EmbeddingError::Config(e.to_string()))?;
    let results: Vec<Result<Vec<EmbeddingVector>, EmbeddingError>> =
        pool.install(|| chunks.par_iter().map(|c| embedder.embed(c)).collect());
    let mut out = Vec::with_capacity(texts.len());
    for r in results {
        out.extend(r?);
    }
    for v in &out {
        if v.dim() != embedder.dim() {
            return Err(EmbeddingError::DimensionMismatch {
                expected: embedder.dim(),
                found: v.dim(),
            });
        }
    }
    Ok(out)
}

/// Reads the binary vector artifact written by [`write_vectors`].
pub fn read_vectors(path: &Path) -> std::io::Result<Vec<EmbeddingVector>> {
    let bytes = std::fs::read(path)?;
    let bad = || std::io::Error::new(std::io::ErrorKind::InvalidData, "truncated vector file");
    if bytes.len() < 16 {
        return Err(bad());
    }
    let n = u64::from_le_bytes(bytes[0..8].try_into().expect("8 bytes")) as usize;
    let dim = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    if bytes.len() != 16 + n * dim * 8 {
        return Err(bad());
    }
    Ok(bytes[16..]
        .chunks_exact(dim.max(1) * 8)
        .take(n)
        .map(|row| {
            EmbeddingVector::new(
                row.chunks_exact(8)
                    .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
                    .collect(),
            )
        })
        .collect())
}

/// Little-endian `n, dim, values...` dump; exact round-trip of every bit.
pub fn vectors_to_bytes(vectors: &[EmbeddingVector]) -> Vec<u8> {
    let dim = vectors.first().map_or(0, EmbeddingVector::dim);
    let mut out = Vec::with_capacity(16 + vectors.len() * dim * 8);
    out.extend((vectors.len() as u64).to_le_bytes());
    out.extend((dim as u64).to_le_bytes());
    for v in vectors {
        for x in v.values() {
            out.extend(x.to_le_bytes());
        }
    }
    out
}

pub fn write_vectors(path: &Path, vectors: &[EmbeddingVector]) -> std::io::Result<()> {
    crate::fsio::write_atomic(path, &vectors_to_bytes(vectors))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testing::FakeServer;

    fn texts(xs: &[&str]) -> Vec<String> {
        xs.iter().map(|s| s.to_string()).collect()
    }

    fn translation_record() -> InstructionRecord {
        InstructionRecord::new(
            "0",
            "Translate to Spanish",
            "Life is a journey, not a destination.",
            "La vida es un viaje, no un destino.",
        )
    }

    #[test]
    fn equal_texts_embed_identically() {
        let e = HashedNgramEmbedder::new(64, 7);
        let v = e.embed(&texts(&["a", "a"])).unwrap();
        assert_eq!(v[0], v[1]);
        assert!((v[0].norm() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn distinct_texts_are_not_collinear() {
        let e = HashedNgramEmbedder::new(DEFAULT_DIM, 7);
        let v = e.embed(&texts(&["a", "b"])).unwrap();
        assert!(cosine_similarity(&v[0], &v[1]).unwrap() < 1.0);
    }

    #[test]
    fn similar_strings_land_closer_than_unrelated_ones() {
        let e = HashedNgramEmbedder::new(DEFAULT_DIM, 1);
        let v = e
            .embed(&texts(&["Translate to Spanish", "Translate to English", "Is 19 a prime number?"]))
            .unwrap();
        let near = v[0].dot(&v[1]);
        let far = v[0].dot(&v[2]);
        assert!(near > far + 0.2, "near={near} far={far}");
    }

    #[test]
    fn seed_changes_the_projection() {
        let a = HashedNgramEmbedder::new(32, 1).embed_one("hello").unwrap();
        let b = HashedNgramEmbedder::new(32, 2).embed_one("hello").unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn text_modes() {
        let r = translation_record();
        assert_eq!(record_text_for_embedding(&r, TextMode::InstructionOnly), "Translate to Spanish");
        assert_eq!(
            record_text_for_embedding(&r, TextMode::InstructionPlusInput),
            "Translate to Spanish\nLife is a journey, not a destination."
        );
        let full = record_text_for_embedding(&r, TextMode::Full);
        assert_eq!(
            full.lines().collect::<Vec<_>>(),
            vec![
                "Translate to Spanish",
                "Life is a journey, not a destination.",
                "La vida es un viaje, no un destino."
            ]
        );
        let no_input = InstructionRecord::new("1", "Say hi", "", "hi");
        assert_eq!(record_text_for_embedding(&no_input, TextMode::InstructionPlusInput), "Say hi");
    }

    #[test]
    fn cosine_basics() {
        let v = EmbeddingVector::new(vec![0.3, -1.2, 2.0]);
        assert!((cosine_similarity(&v, &v).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(cosine_similarity(&v, &v.scaled(-1.0)).unwrap(), -1.0);
        let e1 = EmbeddingVector::new(vec![1.0, 0.0, 0.0]);
        let e2 = EmbeddingVector::new(vec![0.0, 1.0, 0.0]);
        assert_eq!(cosine_similarity(&e1, &e2).unwrap(), 0.0);
        let z = EmbeddingVector::new(vec![0.0; 3]);
        assert!(matches!(cosine_similarity(&e1, &z), Err(EmbeddingError::ZeroVector)));
        let short = EmbeddingVector::new(vec![1.0, 0.0]);
        assert!(matches!(
            cosine_similarity(&e1, &short),
            Err(EmbeddingError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn config_validation() {
        let mut c = EmbeddingProviderConfig::default();
        assert!(c.validate().is_ok());
        c.dim = 1;
        assert!(c.validate().is_err());
        c.dim = 8;
        c.batch_size = 0;
        assert!(c.validate().is_err());
        c.batch_size = 1;
        c.kind = EmbeddingKind::RemoteApi;
        assert!(c.validate().is_err());
    }

    #[test]
    fn empty_text_is_rejected() {
        let e = HashedNgramEmbedder::new(8, 0);
        assert!(matches!(
            embed_batch(&e, &texts(&["x", ""]), 4, 1),
            Err(EmbeddingError::EmptyText(1))
        ));
    }

    #[test]
    fn vector_file_round_trips_bits() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("v.bin");
        let e = HashedNgramEmbedder::new(16, 3);
        let v = e.embed(&texts(&["one", "two", "three"])).unwrap();
        write_vectors(&p, &v).unwrap();
        assert_eq!(read_vectors(&p).unwrap(), v);
    }

    fn embedding_server(dim: usize) -> FakeServer {
        FakeServer::start(move |req| {
            let body = req.json();
            let inputs = body["input"].as_array().cloned().unwrap_or_default();
            let data: Vec<Value> = inputs
                .iter()
                .enumerate()
                .map(|(i, t)| {
                    let len = t.as_str().unwrap_or("").len() as f64;
                    let mut v = vec![0.0; dim];
                    v[0] = 1.0;
                    v[1] = len;
                    json!({"index": i, "embedding": v})
                })
                .rev()
                .collect();
            (200, json!({"data": data, "model": body["model"]}).to_string())
        })
    }

    #[test]
    fn remote_embeddings_are_ordered_normalized_and_cached() {
        let server = embedding_server(4);
        let dir = tempfile::tempdir().unwrap();
        let remote = RemoteEmbedder::new(&EndpointConfig::new(server.url()), "m", 4).unwrap();
        let cached = CachedEmbedder::new(remote, EmbeddingCache::open(dir.path().join("c.jsonl")).unwrap());
        let out = cached.embed(&texts(&["ab", "abcd", "ab"])).unwrap();
        assert_eq!(out.len(), 3);
        assert!((out[0].norm() - 1.0).abs() < 1e-12);
        assert_eq!(out[0], out[2]);
        assert!(out[1].values()[1] > out[0].values()[1]);
        assert_eq!(cached.misses(), 2);
        let again = cached.embed(&texts(&["abcd"])).unwrap();
        assert_eq!(again[0], out[1]);
        assert_eq!(cached.inner().request_count(), 1);
        drop(cached);
        let reopened = EmbeddingCache::open(dir.path().join("c.jsonl")).unwrap();
        assert_eq!(reopened.len(), 2);
    }

    #[test]
    fn remote_dimension_mismatch_is_fatal() {
        let server = embedding_server(5);
        let remote = RemoteEmbedder::new(&EndpointConfig::new(server.url()), "m", 4).unwrap();
        let err = remote.embed(&texts(&["x"])).unwrap_err();
        assert!(matches!(err, EmbeddingError::DimensionMismatch { expected: 4, found: 5 }));
        assert!(!err.is_retriable());
    }
}
