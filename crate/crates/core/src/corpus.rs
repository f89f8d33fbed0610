//! Corpus records, line-delimited ingestion and byte-level tokenization.

use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::DataError;
use crate::gpt2::TokenSequence;

pub const BOS: u32 = 256;
pub const EOS: u32 = 257;
/// Byte values plus BOS and EOS.
pub const VOCAB_SIZE: usize = 258;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusRecord {
    pub id: String,
    pub text: String,
    pub label: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub proficiency: Option<String>,
}

#[derive(Deserialize)]
struct RawRecord {
    id: Option<String>,
    text: Option<String>,
    label: Option<String>,
    prompt: Option<String>,
    proficiency: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Reject {
    /// 1-based line number.
    pub line: usize,
    pub reason: String,
}

#[derive(Clone, Debug)]
pub struct Ingested {
    pub records: Vec<CorpusRecord>,
    pub rejects: Vec<Reject>,
}

/// Parses line-delimited JSON records `{"text", "label", "id"?, "prompt"?,
/// "proficiency"?}`. Malformed lines become rejects; duplicate ids and a
/// corpus with no valid record are errors.
pub fn parse_corpus(source: &str, declared_labels: Option<&[String]>, origin: &Path) -> Result<Ingested, DataError> {
    let mut records = Vec::new();
    let mut rejects = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in source.lines().enumerate() {
        let line_no = i + 1;
        let reject = |reason: String| Reject { line: line_no, reason };
        if line.trim().is_empty() {
            rejects.push(reject("blank line".into()));
            continue;
        }
        let raw: RawRecord = match serde_json::from_str(line) {
            Ok(r) => r,
            Err(e) => {
                rejects.push(reject(format!("not a JSON record: {e}")));
                continue;
            }
        };
        let Some(text) = raw.text.filter(|t| !t.is_empty()) else {
            rejects.push(reject("missing or empty text".into()));
            continue;
        };
        let Some(label) = raw.label.filter(|l| !l.trim().is_empty()) else {
            rejects.push(reject("missing label".into()));
            continue;
        };
        if let Some(declared) = declared_labels {
            if !declared.contains(&label) {
                rejects.push(reject(format!("label {label:?} is not in the declared label set")));
                continue;
            }
        }
        let id = raw.id.unwrap_or_else(|| format!("line-{line_no}"));
        if !seen.insert(id.clone()) {
            return Err(DataError::DuplicateId(id));
        }
        records.push(CorpusRecord {
            id,
            text,
            label,
            prompt: raw.prompt,
            proficiency: raw.proficiency,
        });
    }
    if records.is_empty() {
        return Err(DataError::NoRecords {
            path: origin.to_path_buf(),
            rejected: rejects.len(),
        });
    }
    Ok(Ingested { records, rejects })
}

pub fn ingest(path: &Path, declared_labels: Option<&[String]>) -> Result<Ingested, DataError> {
    let source = fs::read_to_string(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_corpus(&source, declared_labels, path)
}

pub fn write_corpus(path: &Path, records: &[CorpusRecord]) -> Result<(), DataError> {
    let io = |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    };
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(io)?;
    }
    let mut out = std::io::BufWriter::new(fs::File::create(path).map_err(io)?);
    for r in records {
        serde_json::to_writer(&mut out, r).map_err(|e| io(e.into()))?;
        out.write_all(b"\n").map_err(io)?;
    }
    out.flush().map_err(io)
}

/// Distinct labels in order of first appearance.
pub fn labels_in_order(records: &[CorpusRecord]) -> Vec<String> {
    let mut seen = HashSet::new();
    records
        .iter()
        .filter(|r| seen.insert(r.label.clone()))
        .map(|r| r.label.clone())
        .collect()
}

/// Byte-level tokenization wrapped in BOS/EOS.
pub fn tokenize(text: &str) -> TokenSequence {
    let mut ids = Vec::with_capacity(text.len() + 2);
    ids.push(BOS);
    ids.extend(text.bytes().map(u32::from));
    ids.push(EOS);
    TokenSequence::new(ids)
}

/// Inverse of [`tokenize`]; specials are dropped. Returns `None` if the
/// bytes are not valid UTF-8.
pub fn detokenize(tokens: &TokenSequence) -> Option<String> {
    let bytes: Vec<u8> = tokens
        .ids()
        .iter()
        .filter(|&&t| t < 256)
        .map(|&t| t as u8)
        .collect();
    String::from_utf8(bytes).ok()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn parse(s: &str) -> Result<Ingested, DataError> {
        parse_corpus(s, None, Path::new("mem"))
    }

    #[test]
    fn three_good_lines() {
        let src = r#"{"text":"one","label":"A"}
{"text":"two","label":"B","id":"x"}
{"text":"three","label":"A","prompt":"P1","proficiency":"high"}
"#;
        let ing = parse(src).unwrap();
        assert_eq!(ing.records.len(), 3);
        assert!(ing.rejects.is_empty());
        assert_eq!(ing.records[1].id, "x");
        assert_eq!(ing.records[2].prompt.as_deref(), Some("P1"));
    }

    #[test]
    fn missing_label_is_rejected_with_line_number() {
        let src = "{\"text\":\"one\",\"label\":\"A\"}\n{\"text\":\"two\"}\nnot json\n";
        let ing = parse(src).unwrap();
        assert_eq!(ing.records.len(), 1);
        assert_eq!(ing.rejects.len(), 2);
        assert_eq!(ing.rejects[0].line, 2);
        assert!(ing.rejects[0].reason.contains("label"));
        assert_eq!(ing.rejects[1].line, 3);
    }

    #[test]
    fn duplicate_ids_fail() {
        let src = "{\"id\":\"d\",\"text\":\"a\",\"label\":\"A\"}\n{\"id\":\"d\",\"text\":\"b\",\"label\":\"B\"}\n";
        match parse(src) {
            Err(DataError::DuplicateId(id)) => assert_eq!(id, "d"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn no_valid_records_fail() {
        assert!(matches!(parse("{\"text\":\"x\"}\n"), Err(DataError::NoRecords { .. })));
    }

    #[test]
    fn undeclared_label_rejected() {
        let declared = vec!["A".to_string()];
        let src = "{\"text\":\"a\",\"label\":\"A\"}\n{\"text\":\"b\",\"label\":\"Z\"}\n";
        let ing = parse_corpus(src, Some(&declared), Path::new("mem")).unwrap();
        assert_eq!(ing.records.len(), 1);
        assert_eq!(ing.rejects[0].line, 2);
    }

    #[test]
    fn tokenize_bytes_with_specials() {
        assert_eq!(tokenize("ab").ids(), &[BOS, 97, 98, EOS]);
        let doc: String = "x".repeat(348);
        assert_eq!(tokenize(&doc).len(), 350);
    }

    proptest! {
        #[test]
        fn detokenize_inverts_tokenize(s in "\\PC*") {
            prop_assert_eq!(detokenize(&tokenize(&s)).unwrap(), s);
        }
    }
}
