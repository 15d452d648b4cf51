//! Canonical data model for instruction records and dataset persistence.
//!
//! Datasets are line-delimited JSON with a fixed key order, so two runs that
//! produce the same records produce byte-identical files. Every write also
//! emits a `.manifest.json` provenance document next to the dataset.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::util::{normalize_ws, sha256_hex};

/// Version tag for the record id digest, pinned in every manifest.
pub const ID_DIGEST_VERSION: &str = "sha256-v1";

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("instruction is empty after trimming")]
    EmptyInstruction,
    #[error("{path}: line {line}: {message}")]
    ParseError {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("{path}: format mismatch: {message}")]
    FormatMismatch { path: PathBuf, message: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// How a record came to exist.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Derivation {
    Seed,
    Expanded,
    Refined,
    ResponseAnnotated,
    IreGenerated,
}

impl Derivation {
    pub fn as_str(&self) -> &'static str {
        match self {
            Derivation::Seed => "seed",
            Derivation::Expanded => "expanded",
            Derivation::Refined => "refined",
            Derivation::ResponseAnnotated => "response_annotated",
            Derivation::IreGenerated => "ire_generated",
        }
    }
}

/// One instruction(-response) pair with provenance.
///
/// Field order here is the on-disk key order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstructionRecord {
    pub id: String,
    pub instruction: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub response: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub task_type: Option<String>,
    pub language: String,
    pub source: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub parent_id: Option<String>,
    pub derivation: Derivation,
}

/// Deterministic content id over (instruction, response-or-empty, source).
pub fn record_id(instruction: &str, response: Option<&str>, source: &str) -> String {
    let mut buf = String::new();
    buf.push_str(instruction);
    buf.push('\x1f');
    buf.push_str(response.unwrap_or(""));
    buf.push('\x1f');
    buf.push_str(source);
    sha256_hex(buf.as_bytes())
}

/// Build a record, computing its content id.
///
/// `parent_id` must be present exactly when `derivation != Seed`; content is
/// stored verbatim apart from the non-empty check.
#[allow(clippy::too_many_arguments)]
pub fn make_record(
    instruction: &str,
    response: Option<&str>,
    task_type: Option<&str>,
    language: &str,
    source: &str,
    parent_id: Option<&str>,
    derivation: Derivation,
) -> Result<InstructionRecord, CorpusError> {
    if instruction.trim().is_empty() {
        return Err(CorpusError::EmptyInstruction);
    }
    debug_assert_eq!(
        parent_id.is_some(),
        derivation != Derivation::Seed,
        "parent_id present iff derivation != seed"
    );
    Ok(InstructionRecord {
        id: record_id(instruction, response, source),
        instruction: instruction.to_string(),
        response: response.map(str::to_string),
        task_type: task_type.map(str::to_string),
        language: language.to_string(),
        source: source.to_string(),
        parent_id: parent_id.map(str::to_string),
        derivation,
    })
}

/// Supported input dataset formats.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum DatasetFormat {
    /// `{"instruction": ..., "response": ...}` per line (the canonical format).
    PairsJsonl,
    /// JSON array of `{"instruction", "input", "output"}` objects.
    AlpacaJson,
    /// `{"conversation": [{"role", "text"}, ...]}` per line.
    DialogueJsonl,
}

#[derive(Debug, Deserialize)]
struct PairsLine {
    instruction: String,
    #[serde(default)]
    response: Option<String>,
    #[serde(default)]
    task_type: Option<String>,
    #[serde(default)]
    language: Option<String>,
}

#[derive(Debug, Deserialize)]
struct AlpacaEntry {
    instruction: String,
    #[serde(default)]
    input: String,
    output: String,
}

#[derive(Debug, Deserialize)]
struct DialogueLine {
    conversation: Vec<DialogueTurn>,
}

#[derive(Debug, Deserialize)]
struct DialogueTurn {
    role: String,
    text: String,
}

/// Read a dataset file in one of the supported formats as seed records.
///
/// Alpaca entries append the `input` after a blank line when non-empty.
/// Dialogue conversations flatten to one record per consecutive
/// (human, assistant) turn pair.
pub fn read_dataset(path: &Path, format: DatasetFormat) -> Result<Vec<InstructionRecord>, CorpusError> {
    let source = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string());
    let file = File::open(path).map_err(|e| CorpusError::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    match format {
        DatasetFormat::PairsJsonl => read_pairs_jsonl(path, file, &source),
        DatasetFormat::AlpacaJson => read_alpaca_json(path, file, &source),
        DatasetFormat::DialogueJsonl => read_dialogue_jsonl(path, file, &source),
    }
}

fn parse_err(path: &Path, line: usize, message: impl ToString) -> CorpusError {
    CorpusError::ParseError {
        path: path.to_path_buf(),
        line,
        message: message.to_string(),
    }
}

fn read_pairs_jsonl(path: &Path, file: File, source: &str) -> Result<Vec<InstructionRecord>, CorpusError> {
    let mut records = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| parse_err(path, line_no, e))?;
        if line.trim().is_empty() {
            continue;
        }
        // Full record lines (our own canonical output) round-trip verbatim.
        if let Ok(record) = serde_json::from_str::<InstructionRecord>(&line) {
            records.push(record);
            continue;
        }
        let parsed: PairsLine =
            serde_json::from_str(&line).map_err(|e| parse_err(path, line_no, e))?;
        let record = make_record(
            &parsed.instruction,
            parsed.response.as_deref(),
            parsed.task_type.as_deref(),
            parsed.language.as_deref().unwrap_or("en"),
            source,
            None,
            Derivation::Seed,
        )
        .map_err(|e| parse_err(path, line_no, e))?;
        records.push(record);
    }
    Ok(records)
}

fn read_alpaca_json(path: &Path, file: File, source: &str) -> Result<Vec<InstructionRecord>, CorpusError> {
    let entries: Vec<AlpacaEntry> =
        serde_json::from_reader(BufReader::new(file)).map_err(|e| CorpusError::FormatMismatch {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
    entries
        .into_iter()
        .enumerate()
        .map(|(idx, entry)| {
            let instruction = if entry.input.trim().is_empty() {
                entry.instruction
            } else {
                format!("{}\n\n{}", entry.instruction, entry.input)
            };
            make_record(
                &instruction,
                Some(&entry.output),
                None,
                "en",
                source,
                None,
                Derivation::Seed,
            )
            .map_err(|e| parse_err(path, idx + 1, e))
        })
        .collect()
}

fn read_dialogue_jsonl(path: &Path, file: File, source: &str) -> Result<Vec<InstructionRecord>, CorpusError> {
    let mut records = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| parse_err(path, line_no, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: DialogueLine =
            serde_json::from_str(&line).map_err(|e| parse_err(path, line_no, e))?;
        let mut turns = parsed.conversation.iter().peekable();
        while let Some(turn) = turns.next() {
            if turn.role != "human" {
                continue;
            }
            if let Some(next) = turns.peek() {
                if next.role == "assistant" {
                    let next = turns.next().unwrap();
                    let record = make_record(
                        &turn.text,
                        Some(&next.text),
                        None,
                        "en",
                        source,
                        None,
                        Derivation::Seed,
                    )
                    .map_err(|e| parse_err(path, line_no, e))?;
                    records.push(record);
                }
            }
        }
    }
    Ok(records)
}

/// Per-stage accounting: every input record ends up in exactly one column.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageAccounting {
    pub input_count: usize,
    pub kept: usize,
    pub transformed: usize,
    pub rejected: usize,
    pub failed: usize,
}

impl StageAccounting {
    pub fn balances(&self) -> bool {
        self.input_count == self.kept + self.transformed + self.rejected + self.failed
    }
}

/// Provenance manifest written next to every dataset file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub record_count: usize,
    pub counts_by_derivation: BTreeMap<String, usize>,
    pub counts_by_task_type: BTreeMap<String, usize>,
    pub config_digest: String,
    pub rng_seed: u64,
    pub stage_name: String,
    pub created_at: chrono::DateTime<chrono::Utc>,
    pub id_digest: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub accounting: Option<StageAccounting>,
    #[serde(skip_serializing_if = "BTreeMap::is_empty", default)]
    pub template_digests: BTreeMap<String, String>,
}

impl DatasetManifest {
    pub fn new(records: &[InstructionRecord], stage_name: &str, config_digest: &str, rng_seed: u64) -> Self {
        let mut counts_by_derivation = BTreeMap::new();
        let mut counts_by_task_type = BTreeMap::new();
        for record in records {
            *counts_by_derivation
                .entry(record.derivation.as_str().to_string())
                .or_insert(0) += 1;
            if let Some(task) = &record.task_type {
                *counts_by_task_type.entry(task.clone()).or_insert(0) += 1;
            }
        }
        Self {
            record_count: records.len(),
            counts_by_derivation,
            counts_by_task_type,
            config_digest: config_digest.to_string(),
            rng_seed,
            stage_name: stage_name.to_string(),
            created_at: chrono::Utc::now(),
            id_digest: ID_DIGEST_VERSION.to_string(),
            accounting: None,
            template_digests: BTreeMap::new(),
        }
    }
}

/// Path of the manifest sitting next to a dataset file.
pub fn manifest_path(dataset_path: &Path) -> PathBuf {
    let mut name = dataset_path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    name.push_str(".manifest.json");
    dataset_path.with_file_name(name)
}

/// Write records as JSONL plus a manifest; returns the manifest.
pub fn write_dataset(
    records: &[InstructionRecord],
    path: &Path,
    stage_name: &str,
    config_digest: &str,
    rng_seed: u64,
) -> Result<DatasetManifest, CorpusError> {
    let manifest = DatasetManifest::new(records, stage_name, config_digest, rng_seed);
    write_dataset_with_manifest(records, path, manifest)
}

/// Like [`write_dataset`] but with a caller-prepared manifest (extra
/// accounting or template digests already filled in).
pub fn write_dataset_with_manifest(
    records: &[InstructionRecord],
    path: &Path,
    manifest: DatasetManifest,
) -> Result<DatasetManifest, CorpusError> {
    let io_err = |e: std::io::Error| CorpusError::Io {
        path: path.to_path_buf(),
        source: e,
    };
    let mut writer = BufWriter::new(File::create(path).map_err(io_err)?);
    for record in records {
        let line = serde_json::to_string(record).expect("records serialize");
        writer.write_all(line.as_bytes()).map_err(io_err)?;
        writer.write_all(b"\n").map_err(io_err)?;
    }
    writer.flush().map_err(io_err)?;

    let manifest_file = File::create(manifest_path(path)).map_err(io_err)?;
    serde_json::to_writer_pretty(BufWriter::new(manifest_file), &manifest)
        .map_err(|e| CorpusError::FormatMismatch {
            path: manifest_path(path),
            message: e.to_string(),
        })?;
    Ok(manifest)
}

/// Drop records whose normalized instruction duplicates an earlier one.
/// First occurrence wins; order is otherwise preserved.
pub fn dedupe(records: Vec<InstructionRecord>) -> (Vec<InstructionRecord>, usize) {
    let mut seen = std::collections::HashSet::new();
    let mut kept = Vec::with_capacity(records.len());
    let mut dropped = 0usize;
    for record in records {
        if seen.insert(normalize_ws(&record.instruction)) {
            kept.push(record);
        } else {
            dropped += 1;
        }
    }
    (kept, dropped)
}
