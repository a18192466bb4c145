//! Domain records and their JSONL persistence.
//!
//! Every record type is an immutable value object with a content-hash
//! identity, so resumed or parallel runs agree on ids without any
//! sequence-number coordination. Files are line-delimited JSON with a
//! fixed field order; rewriting the same records yields byte-identical
//! output.

use std::fmt;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::marker::PhantomData;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RecordError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: line {line}: {detail}")]
    Malformed {
        path: PathBuf,
        line: usize,
        detail: String,
    },
    #[error("seed text is empty after trimming")]
    EmptySeedText,
    #[error("decomposition has no sub-instructions")]
    EmptySubInstructions,
    #[error("decomposition sub-instruction {index} is empty")]
    BlankSubInstruction { index: usize },
}

/// First 128 bits of SHA-256 over the exact bytes, lowercase hex.
///
/// Stable across runs and platforms; byte-sensitive (trailing
/// whitespace changes the id).
pub fn content_id(text: &str) -> String {
    let digest = Sha256::digest(text.as_bytes());
    hex::encode(&digest[..16])
}

/// Content-hash identity of a seed instruction.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SeedId(pub String);

impl fmt::Display for SeedId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl SeedId {
    pub fn as_str(&self) -> &str {
        &self.0
    }
}

/// Identity of an eval or detection item.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ItemId(pub String);

impl fmt::Display for ItemId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// A seed or one of its variants, as addressed by response records.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum InstructionId {
    Seed(SeedId),
    Variant(SeedId, u32),
}

impl fmt::Display for InstructionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            InstructionId::Seed(s) => write!(f, "{s}"),
            InstructionId::Variant(s, j) => write!(f, "{s}#{j}"),
        }
    }
}

/// One instruction from the valid seed set.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeedInstruction {
    pub seed_id: SeedId,
    pub text: String,
    pub source: String,
}

impl SeedInstruction {
    /// Builds a seed with its content-hash id. Errors when the text is
    /// empty after whitespace trimming.
    pub fn new(text: impl Into<String>, source: impl Into<String>) -> Result<Self, RecordError> {
        let text = text.into();
        if text.trim().is_empty() {
            return Err(RecordError::EmptySeedText);
        }
        Ok(Self {
            seed_id: SeedId(content_id(&text)),
            text,
            source: source.into(),
        })
    }
}

/// Background facts and sub-instructions extracted from one seed.
///
/// List order equals the numbered order in the model's decomposition
/// output.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecomposedInstruction {
    pub seed_id: SeedId,
    pub facts: Vec<String>,
    pub subs: Vec<String>,
}

impl DecomposedInstruction {
    pub fn new(
        seed_id: SeedId,
        facts: Vec<String>,
        subs: Vec<String>,
    ) -> Result<Self, RecordError> {
        if subs.is_empty() {
            return Err(RecordError::EmptySubInstructions);
        }
        if let Some(index) = subs.iter().position(|s| s.trim().is_empty()) {
            return Err(RecordError::BlankSubInstruction { index });
        }
        Ok(Self {
            seed_id,
            facts,
            subs,
        })
    }

    /// Number of sub-instructions.
    pub fn sub_count(&self) -> u32 {
        self.subs.len() as u32
    }
}

/// A reconstructed prompt whose `variant_index`-th sub-instruction was
/// modified. `valid == false` means the model emitted the INVALID
/// sentinel for this revision; invalid variants carry an empty `text`
/// and are excluded from response collection.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VariantInstruction {
    pub seed_id: SeedId,
    pub variant_index: u32,
    pub modified_sub: String,
    pub text: String,
    pub valid: bool,
}

impl VariantInstruction {
    pub fn instruction_id(&self) -> InstructionId {
        InstructionId::Variant(self.seed_id.clone(), self.variant_index)
    }
}

/// How a response was collected.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ResponseMode {
    /// The instruction text was sent as the sole user message.
    Direct,
    /// The model revised the seed's response to fit the variant.
    Reference,
}

impl fmt::Display for ResponseMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ResponseMode::Direct => f.write_str("direct"),
            ResponseMode::Reference => f.write_str("reference"),
        }
    }
}

/// Token counts as reported by the provider.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TokenUsage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

/// A model response to a seed (`variant_index` absent) or a variant.
/// Reference mode exists only for variants; the seed's own response is
/// always direct.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResponseRecord {
    pub seed_id: SeedId,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub variant_index: Option<u32>,
    pub mode: ResponseMode,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub usage: Option<TokenUsage>,
}

impl ResponseRecord {
    pub fn instruction_id(&self) -> InstructionId {
        match self.variant_index {
            None => InstructionId::Seed(self.seed_id.clone()),
            Some(j) => InstructionId::Variant(self.seed_id.clone(), j),
        }
    }
}

/// A (prompt, chosen, rejected) training triple. `chosen` answers the
/// pair's own prompt; `rejected` answers a different member of the same
/// seed's variant family.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PreferencePair {
    pub seed_id: SeedId,
    pub prompt: String,
    pub chosen: String,
    pub rejected: String,
}

/// One evaluation instruction; always a variant, never the seed itself.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalItem {
    pub item_id: ItemId,
    pub instruction: String,
    pub seed_id: SeedId,
}

/// A yes/no verdict or label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Judgement {
    Yes,
    No,
}

impl fmt::Display for Judgement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Judgement::Yes => f.write_str("Yes"),
            Judgement::No => f.write_str("No"),
        }
    }
}

/// One non-compliance detection pair. The label is Yes iff `response`
/// was generated for exactly this `instruction`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetItem {
    pub item_id: ItemId,
    pub instruction: String,
    pub response: String,
    pub label: Judgement,
}

/// SFT export row.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SftExample {
    pub instruction: String,
    pub response: String,
}

/// Preference export row (seedless view of a [`PreferencePair`]).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PreferenceExample {
    pub prompt: String,
    pub chosen: String,
    pub rejected: String,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> RecordError + '_ {
    move |source| RecordError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Writes records as JSONL, one object per line, UTF-8, fields in
/// declaration order. The write is atomic: a temp file in the same
/// directory is renamed over the target. Returns the line count.
pub fn save_records<T: Serialize>(records: &[T], path: &Path) -> Result<usize, RecordError> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(io_err(path))?;
        }
    }
    let tmp = path.with_extension("jsonl.tmp");
    {
        let file = File::create(&tmp).map_err(io_err(&tmp))?;
        let mut out = BufWriter::new(file);
        for record in records {
            let line = serde_json::to_string(record).map_err(|e| RecordError::Malformed {
                path: path.to_path_buf(),
                line: 0,
                detail: format!("serialize: {e}"),
            })?;
            out.write_all(line.as_bytes()).map_err(io_err(&tmp))?;
            out.write_all(b"\n").map_err(io_err(&tmp))?;
        }
        out.flush().map_err(io_err(&tmp))?;
    }
    fs::rename(&tmp, path).map_err(io_err(path))?;
    Ok(records.len())
}

/// Loads a whole JSONL file. Malformed lines error with their
/// 1-based line number; unknown fields are rejected by the record
/// schemas.
pub fn load_records<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, RecordError> {
    stream_records(path)?.collect()
}

/// Streaming JSONL reader; holds one line in memory at a time.
pub struct RecordStream<T> {
    path: PathBuf,
    lines: std::io::Lines<BufReader<File>>,
    line_no: usize,
    _marker: PhantomData<T>,
}

impl<T: DeserializeOwned> Iterator for RecordStream<T> {
    type Item = Result<T, RecordError>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            let line = match self.lines.next()? {
                Ok(line) => line,
                Err(e) => {
                    return Some(Err(RecordError::Io {
                        path: self.path.clone(),
                        source: e,
                    }))
                }
            };
            self.line_no += 1;
            if line.trim().is_empty() {
                continue;
            }
            return Some(serde_json::from_str(&line).map_err(|e| RecordError::Malformed {
                path: self.path.clone(),
                line: self.line_no,
                detail: e.to_string(),
            }));
        }
    }
}

/// Opens a JSONL file for constant-memory iteration.
pub fn stream_records<T: DeserializeOwned>(path: &Path) -> Result<RecordStream<T>, RecordError> {
    let file = File::open(path).map_err(io_err(path))?;
    Ok(RecordStream {
        path: path.to_path_buf(),
        lines: BufReader::new(file).lines(),
        line_no: 0,
        _marker: PhantomData,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn content_id_is_deterministic_and_byte_sensitive() {
        assert_eq!(content_id("a"), content_id("a"));
        assert_ne!(content_id("a"), content_id("a "));
    }

    #[test]
    fn content_id_golden() {
        // Frozen from the first implementation run; guards the hash
        // choice (SHA-256, truncated to 128 bits) across refactors.
        assert_eq!(
            content_id("Write a short SMS."),
            "cf7af248ace6e1296c8887625179d501"
        );
    }

    #[test]
    fn seed_rejects_whitespace_only_text() {
        assert!(matches!(
            SeedInstruction::new("   \n\t", "t"),
            Err(RecordError::EmptySeedText)
        ));
    }

    #[test]
    fn seed_id_is_a_function_of_text_only() {
        let a = SeedInstruction::new("List five birds.", "x").unwrap();
        let b = SeedInstruction::new("List five birds.", "y").unwrap();
        assert_eq!(a.seed_id, b.seed_id);
    }

    #[test]
    fn decomposition_requires_nonempty_subs() {
        let id = SeedId("s".into());
        assert!(matches!(
            DecomposedInstruction::new(id.clone(), vec![], vec![]),
            Err(RecordError::EmptySubInstructions)
        ));
        assert!(matches!(
            DecomposedInstruction::new(id, vec![], vec!["ok".into(), "  ".into()]),
            Err(RecordError::BlankSubInstruction { index: 1 })
        ));
    }

    #[test]
    fn save_empty_writes_empty_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.jsonl");
        let n = save_records::<SeedInstruction>(&[], &path).unwrap();
        assert_eq!(n, 0);
        assert_eq!(fs::read(&path).unwrap(), b"");
    }

    #[test]
    fn roundtrip_preserves_records() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("seeds.jsonl");
        let seeds: Vec<SeedInstruction> = (0..3)
            .map(|i| SeedInstruction::new(format!("Seed number {i}."), "fixture").unwrap())
            .collect();
        save_records(&seeds, &path).unwrap();
        let loaded: Vec<SeedInstruction> = load_records(&path).unwrap();
        assert_eq!(loaded, seeds);
    }

    #[test]
    fn pair_roundtrips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pairs.jsonl");
        let pair = PreferencePair {
            seed_id: SeedId("abc".into()),
            prompt: "p".into(),
            chosen: "c".into(),
            rejected: "r".into(),
        };
        save_records(std::slice::from_ref(&pair), &path).unwrap();
        let loaded: Vec<PreferencePair> = load_records(&path).unwrap();
        assert_eq!(loaded, vec![pair]);
    }

    #[test]
    fn rewriting_identical_records_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let seeds: Vec<SeedInstruction> = (0..12)
            .map(|i| SeedInstruction::new(format!("Fixture seed {i}."), "fixture").unwrap())
            .collect();
        let a = dir.path().join("a.jsonl");
        let b = dir.path().join("b.jsonl");
        save_records(&seeds, &a).unwrap();
        save_records(&seeds, &b).unwrap();
        assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    }

    #[test]
    fn truncated_line_errors_with_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        let seed = SeedInstruction::new("Complete line.", "t").unwrap();
        let good = serde_json::to_string(&seed).unwrap();
        let mut body = String::new();
        for _ in 0..6 {
            body.push_str(&good);
            body.push('\n');
        }
        body.push_str(&good[..good.len() / 2]);
        body.push('\n');
        fs::write(&path, body).unwrap();
        let err = load_records::<SeedInstruction>(&path).unwrap_err();
        assert!(err.to_string().contains("line 7"), "got: {err}");
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("extra.jsonl");
        fs::write(
            &path,
            "{\"seed_id\":\"x\",\"text\":\"t\",\"source\":\"s\",\"extra\":1}\n",
        )
        .unwrap();
        let err = load_records::<SeedInstruction>(&path).unwrap_err();
        assert!(err.to_string().contains("line 1"), "got: {err}");
    }

    #[test]
    fn response_record_variant_index_is_optional_on_disk() {
        let rec = ResponseRecord {
            seed_id: SeedId("s".into()),
            variant_index: None,
            mode: ResponseMode::Direct,
            text: "body".into(),
            usage: None,
        };
        let line = serde_json::to_string(&rec).unwrap();
        assert!(!line.contains("variant_index"));
        assert!(!line.contains("usage"));
        let back: ResponseRecord = serde_json::from_str(&line).unwrap();
        assert_eq!(back, rec);
    }
}
