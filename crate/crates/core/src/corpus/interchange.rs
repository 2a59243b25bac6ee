//! JSONL interchange: one sequence per line,
//! `{"tokens": [...], "content_positions": [...], "concepts": [{"pos", "original", "synonyms"}]}`.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::generate::Sequence;
use super::vocab::Vocabulary;
use crate::conceptset::{AnnotatedSequence, ConceptAnnotation, DEFAULT_SYNONYM_CAP};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConceptRecord {
    pub pos: usize,
    pub original: String,
    pub synonyms: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SequenceRecord {
    pub tokens: Vec<String>,
    pub content_positions: Vec<usize>,
    #[serde(default)]
    pub concepts: Vec<ConceptRecord>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct IngestOptions {
    /// Synonym sets larger than this are rejected.
    pub synonym_cap: usize,
    /// Records shorter than this many tokens are dropped.
    pub min_tokens: usize,
}

impl Default for IngestOptions {
    fn default() -> Self {
        Self {
            synonym_cap: DEFAULT_SYNONYM_CAP,
            min_tokens: 8,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct IngestReport {
    pub records: usize,
    pub dropped_short: usize,
}

pub fn to_record(item: &AnnotatedSequence, vocab: &Vocabulary) -> SequenceRecord {
    let name = |t| vocab.token(t).to_string();
    SequenceRecord {
        tokens: item.sequence.token_ids.iter().map(|&t| name(t)).collect(),
        content_positions: item.sequence.content_positions.clone(),
        concepts: item
            .annotations
            .iter()
            .map(|a| ConceptRecord {
                pos: a.position,
                original: name(a.original),
                synonyms: a.synonyms.iter().map(|&t| name(t)).collect(),
            })
            .collect(),
    }
}

pub fn from_record(
    rec: SequenceRecord,
    vocab: &Vocabulary,
    line: usize,
    synonym_cap: usize,
) -> Result<AnnotatedSequence> {
    let lookup = |t: &str| {
        vocab
            .id(t)
            .ok_or_else(|| Error::Vocabulary(format!("line {line}: unknown token {t:?}")))
    };
    let token_ids = rec
        .tokens
        .iter()
        .map(|t| lookup(t))
        .collect::<Result<Vec<_>>>()?;
    let sequence = Sequence::new(token_ids, rec.content_positions);
    sequence
        .validate(vocab)
        .map_err(|e| Error::Vocabulary(format!("line {line}: {e}")))?;
    let mut annotations = Vec::with_capacity(rec.concepts.len());
    for c in rec.concepts {
        if c.synonyms.len() > synonym_cap {
            return Err(Error::SynonymCap {
                line,
                size: c.synonyms.len(),
                cap: synonym_cap,
            });
        }
        if !sequence.is_content_position(c.pos) {
            return Err(Error::Parse {
                line,
                message: format!("concept at position {} is not a content position", c.pos),
            });
        }
        let original = lookup(&c.original)?;
        if sequence.token_ids[c.pos] != original {
            return Err(Error::Parse {
                line,
                message: format!(
                    "concept original {:?} does not match token at position {}",
                    c.original, c.pos
                ),
            });
        }
        let synonyms = c
            .synonyms
            .iter()
            .map(|t| lookup(t))
            .collect::<Result<Vec<_>>>()?;
        annotations.push(ConceptAnnotation::new(c.pos, original, synonyms));
    }
    Ok(AnnotatedSequence {
        sequence,
        annotations,
    })
}

pub fn write_jsonl<W: Write>(
    mut w: W,
    items: &[AnnotatedSequence],
    vocab: &Vocabulary,
) -> Result<()> {
    for item in items {
        serde_json::to_writer(&mut w, &to_record(item, vocab))?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn export_annotated(
    path: &Path,
    items: &[AnnotatedSequence],
    vocab: &Vocabulary,
) -> Result<()> {
    write_jsonl(BufWriter::new(File::create(path)?), items, vocab)
}

/// Writes sequences without annotations.
pub fn export_corpus(path: &Path, corpus: &[Sequence], vocab: &Vocabulary) -> Result<()> {
    let items: Vec<AnnotatedSequence> = corpus
        .iter()
        .map(|s| AnnotatedSequence {
            sequence: s.clone(),
            annotations: Vec::new(),
        })
        .collect();
    export_annotated(path, &items, vocab)
}

pub fn read_jsonl<R: BufRead>(
    reader: R,
    vocab: &Vocabulary,
    opts: IngestOptions,
) -> Result<(Vec<AnnotatedSequence>, IngestReport)> {
    let mut out = Vec::new();
    let mut report = IngestReport::default();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: SequenceRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        report.records += 1;
        if rec.tokens.len() < opts.min_tokens {
            report.dropped_short += 1;
            continue;
        }
        out.push(from_record(rec, vocab, line_no, opts.synonym_cap)?);
    }
    if report.dropped_short > 0 {
        log::warn!(
            "dropped {} record(s) shorter than {} tokens",
            report.dropped_short,
            opts.min_tokens
        );
    }
    Ok((out, report))
}

pub fn ingest_annotated(
    path: &Path,
    vocab: &Vocabulary,
    opts: IngestOptions,
) -> Result<(Vec<AnnotatedSequence>, IngestReport)> {
    read_jsonl(BufReader::new(File::open(path)?), vocab, opts)
}
