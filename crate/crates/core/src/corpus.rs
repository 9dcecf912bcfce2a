//! Instruction records and Alpaca-format corpus I/O.
//!
//! An Alpaca file is a top-level JSON array of objects with the keys
//! `instruction`, `input` (optional) and `output`. Identity and lineage are
//! carried in a single reserved key, [`METADATA_KEY`], which trainers that
//! ignore unknown keys skip over.

use std::collections::HashMap;
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::fsio::write_atomic;
use crate::hashing::ContentHasher;

/// Reserved object key holding `{id, provenance}` when metadata is emitted.
pub const METADATA_KEY: &str = "_curate";

/// Opaque record identifier, unique within a [`Corpus`].
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RecordId(String);

impl RecordId {
    pub fn new(id: impl Into<String>) -> Self {
        Self(id.into())
    }

    /// Zero-padded sequence id used for records loaded without an id.
    pub fn sequence(position: usize) -> Self {
        Self(format!("{position:06}"))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for RecordId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for RecordId {
    fn from(s: &str) -> Self {
        Self(s.to_owned())
    }
}

/// Lineage of a record.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Provenance {
    Original,
    Merged { parents: [RecordId; 2] },
}

/// One instruction/input/output triple.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstructionRecord {
    pub id: RecordId,
    pub instruction: String,
    pub input: String,
    pub output: String,
    pub provenance: Provenance,
}

impl InstructionRecord {
    pub fn new(
        id: impl Into<String>,
        instruction: impl Into<String>,
        input: impl Into<String>,
        output: impl Into<String>,
    ) -> Self {
        Self {
            id: RecordId::new(id),
            instruction: instruction.into(),
            input: input.into(),
            output: output.into(),
            provenance: Provenance::Original,
        }
    }

    pub fn with_provenance(mut self, provenance: Provenance) -> Self {
        self.provenance = provenance;
        self
    }

    pub fn is_merged(&self) -> bool {
        matches!(self.provenance, Provenance::Merged { .. })
    }

    /// Hash of the three text fields; identical texts hash identically
    /// regardless of id.
    pub fn content_hash(&self) -> String {
        ContentHasher::new()
            .part(&self.instruction)
            .part(&self.input)
            .part(&self.output)
            .finish()
    }

    fn check(&self) -> Result<(), String> {
        if self.instruction.trim().is_empty() {
            return Err("empty instruction".into());
        }
        if let Provenance::Merged { parents } = &self.provenance {
            if parents[0] == parents[1] {
                return Err(format!("merged record names parent {} twice", parents[0]));
            }
        }
        Ok(())
    }
}

/// A problem found with one element of an input file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RecordProblem {
    pub index: usize,
    pub reason: String,
}

impl fmt::Display for RecordProblem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}: {}", self.index, self.reason)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}: malformed JSON at byte {offset}: {message}", path.display())]
    Parse {
        path: PathBuf,
        offset: usize,
        message: String,
    },
    #[error("{}: top-level value is not an array", path.display())]
    NotAnArray { path: PathBuf },
    #[error("invalid records: {}", join_problems(problems))]
    Validation { problems: Vec<RecordProblem> },
    #[error("duplicate record id {0}")]
    DuplicateId(RecordId),
}

fn join_problems(problems: &[RecordProblem]) -> String {
    const SHOWN: usize = 20;
    let mut s = problems
        .iter()
        .take(SHOWN)
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join(", ");
    if problems.len() > SHOWN {
        s.push_str(&format!(", ... ({} total)", problems.len()));
    }
    s
}

/// An ordered, id-indexed collection of records. Immutable once built.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Corpus {
    records: Vec<InstructionRecord>,
    index: HashMap<RecordId, usize>,
}

impl Corpus {
    pub fn new(records: Vec<InstructionRecord>) -> Result<Self, CorpusError> {
        let problems: Vec<_> = records
            .iter()
            .enumerate()
            .filter_map(|(index, r)| r.check().err().map(|reason| RecordProblem { index, reason }))
            .collect();
        if !problems.is_empty() {
            return Err(CorpusError::Validation { problems });
        }
        let mut index = HashMap::with_capacity(records.len());
        for (pos, r) in records.iter().enumerate() {
            if index.insert(r.id.clone(), pos).is_some() {
                return Err(CorpusError::DuplicateId(r.id.clone()));
            }
        }
        Ok(Self { records, index })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[InstructionRecord] {
        &self.records
    }

    pub fn iter(&self) -> std::slice::Iter<'_, InstructionRecord> {
        self.records.iter()
    }

    pub fn get(&self, id: &RecordId) -> Option<&InstructionRecord> {
        self.index.get(id).map(|&p| &self.records[p])
    }

    pub fn position(&self, id: &RecordId) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn contains(&self, id: &RecordId) -> bool {
        self.index.contains_key(id)
    }

    /// New corpus made of the records at `positions`, in the order given.
    pub fn subset(&self, positions: &[usize]) -> Corpus {
        let records: Vec<_> = positions.iter().map(|&p| self.records[p].clone()).collect();
        let index = records
            .iter()
            .enumerate()
            .map(|(pos, r)| (r.id.clone(), pos))
            .collect();
        Corpus { records, index }
    }

    pub fn into_records(self) -> Vec<InstructionRecord> {
        self.records
    }

    /// Fingerprint over ids, provenance and text of every record, in order.
    pub fn content_hash(&self) -> String {
        let mut h = ContentHasher::new();
        for r in &self.records {
            h = h.part(r.id.as_str()).part(r.content_hash());
            h = match &r.provenance {
                Provenance::Original => h.part("o"),
                Provenance::Merged { parents } => h.part(parents[0].as_str()).part(parents[1].as_str()),
            };
        }
        h.finish()
    }
}

impl<'a> IntoIterator for &'a Corpus {
    type Item = &'a InstructionRecord;
    type IntoIter = std::slice::Iter<'a, InstructionRecord>;

    fn into_iter(self) -> Self::IntoIter {
        self.records.iter()
    }
}

#[derive(Deserialize)]
struct Metadata {
    id: Option<RecordId>,
    provenance: Option<Provenance>,
}

#[derive(Serialize)]
struct MetadataOut<'a> {
    id: &'a RecordId,
    provenance: &'a Provenance,
}

#[derive(Serialize)]
struct AlpacaOut<'a> {
    instruction: &'a str,
    input: &'a str,
    output: &'a str,
    #[serde(rename = "_curate", skip_serializing_if = "Option::is_none")]
    meta: Option<MetadataOut<'a>>,
}

/// Options for [`save_corpus`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SaveOptions {
    /// Emit the reserved metadata block with id and provenance.
    pub metadata: bool,
}

impl SaveOptions {
    pub fn with_metadata() -> Self {
        Self { metadata: true }
    }
}

fn byte_offset(text: &str, line: usize, column: usize) -> usize {
    if line == 0 {
        return 0;
    }
    let line_start: usize = text.split_inclusive('\n').take(line - 1).map(str::len).sum();
    (line_start + column.saturating_sub(1)).min(text.len())
}

/// Parses Alpaca JSON from a string. `origin` only labels errors.
pub fn parse_corpus(text: &str, origin: &Path) -> Result<Corpus, CorpusError> {
    let value: Value = serde_json::from_str(text).map_err(|e| CorpusError::Parse {
        path: origin.to_path_buf(),
        offset: byte_offset(text, e.line(), e.column()),
        message: e.to_string(),
    })?;
    let Value::Array(items) = value else {
        return Err(CorpusError::NotAnArray {
            path: origin.to_path_buf(),
        });
    };

    let mut problems = Vec::new();
    let mut records = Vec::with_capacity(items.len());
    let mut empty_outputs = 0usize;
    for (index, item) in items.into_iter().enumerate() {
        match record_from_value(index, item) {
            Ok(r) => {
                if r.output.is_empty() {
                    empty_outputs += 1;
                }
                records.push(r);
            }
            Err(reason) => problems.push(RecordProblem { index, reason }),
        }
    }
    if !problems.is_empty() {
        return Err(CorpusError::Validation { problems });
    }
    if empty_outputs > 0 {
        tracing::warn!(
            "{}: {empty_outputs} record(s) have an empty output",
            origin.display()
        );
    }
    Corpus::new(records)
}

fn record_from_value(index: usize, item: Value) -> Result<InstructionRecord, String> {
    let Value::Object(mut obj) = item else {
        return Err("not an object".into());
    };
    let instruction = match obj.remove("instruction") {
        Some(Value::String(s)) => s,
        Some(_) => return Err("instruction is not a string".into()),
        None => return Err("missing instruction".into()),
    };
    if instruction.trim().is_empty() {
        return Err("empty instruction".into());
    }
    let input = match obj.remove("input") {
        Some(Value::String(s)) => s,
        Some(Value::Null) | None => String::new(),
        Some(_) => return Err("input is not a string".into()),
    };
    let output = match obj.remove("output") {
        Some(Value::String(s)) => s,
        Some(_) => return Err("output is not a string".into()),
        None => return Err("missing output".into()),
    };
    let meta: Option<Metadata> = match obj.remove(METADATA_KEY) {
        Some(v) => Some(serde_json::from_value(v).map_err(|e| format!("bad {METADATA_KEY} block: {e}"))?),
        None => None,
    };
    let top_level_id = match obj.remove("id") {
        Some(Value::String(s)) => Some(RecordId::new(s)),
        Some(Value::Number(n)) => Some(RecordId::new(n.to_string())),
        Some(_) => return Err("id is not a string or number".into()),
        None => None,
    };
    let (meta_id, provenance) = match meta {
        Some(m) => (m.id, m.provenance.unwrap_or(Provenance::Original)),
        None => (None, Provenance::Original),
    };
    let id = meta_id
        .or(top_level_id)
        .unwrap_or_else(|| RecordId::sequence(index));
    Ok(InstructionRecord {
        id,
        instruction,
        input,
        output,
        provenance,
    })
}

/// Loads an Alpaca-format JSON file.
pub fn load_corpus(path: impl AsRef<Path>) -> Result<Corpus, CorpusError> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let text = String::from_utf8(bytes).map_err(|e| CorpusError::Parse {
        path: path.to_path_buf(),
        offset: e.utf8_error().valid_up_to(),
        message: "invalid UTF-8".into(),
    })?;
    parse_corpus(&text, path)
}

/// Serializes a corpus to Alpaca JSON bytes.
pub fn corpus_to_json(corpus: &Corpus, options: SaveOptions) -> Vec<u8> {
    let out: Vec<_> = corpus
        .iter()
        .map(|r| AlpacaOut {
            instruction: &r.instruction,
            input: &r.input,
            output: &r.output,
            meta: options.metadata.then_some(MetadataOut {
                id: &r.id,
                provenance: &r.provenance,
            }),
        })
        .collect();
    let mut bytes = serde_json::to_vec_pretty(&out).expect("corpus serialization is infallible");
    bytes.push(b'\n');
    bytes
}

/// Writes a corpus as Alpaca JSON.
pub fn save_corpus(corpus: &Corpus, path: impl AsRef<Path>, options: SaveOptions) -> Result<(), CorpusError> {
    let path = path.as_ref();
    write_atomic(path, &corpus_to_json(corpus, options)).map_err(|source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    })
}
