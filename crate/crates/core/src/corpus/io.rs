//! JSONL interchange format, one record per line.
//!
//! ```text
//! parallel:    {"source": [..], "reference": [..], "context_before": [[..]..],
//!               "context_after": [[..]..], "source_style": "..", "target_style": ".."}
//! nonparallel: {"sentence": [..], "style": ".."}
//! paragraphs:  {"sentences": [[..]..], "target_index": 0}
//! ```

use super::{Context, NonParallelSample, Paragraph, ParallelSample, Sentence, StyleNames};
use crate::error::{CastError, Result};
use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DatasetKind {
    Parallel,
    NonParallel,
    Paragraphs,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Dataset {
    Parallel(Vec<ParallelSample>),
    NonParallel(Vec<NonParallelSample>),
    Paragraphs(Vec<Paragraph>),
}

impl Dataset {
    pub fn len(&self) -> usize {
        match self {
            Dataset::Parallel(v) => v.len(),
            Dataset::NonParallel(v) => v.len(),
            Dataset::Paragraphs(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Serialize, Deserialize)]
struct ParallelRecord {
    source: Sentence,
    reference: Sentence,
    context_before: Vec<Sentence>,
    context_after: Vec<Sentence>,
    source_style: String,
    target_style: String,
}

#[derive(Serialize, Deserialize)]
struct NonParallelRecord {
    sentence: Sentence,
    style: String,
}

#[derive(Serialize, Deserialize)]
struct ParagraphRecord {
    sentences: Vec<Sentence>,
    target_index: usize,
}

/// Types that have a line representation in the interchange format.
pub trait JsonlRecord: Sized {
    fn to_json(&self, names: &StyleNames) -> serde_json::Value;
    fn from_json(line: &str, names: &StyleNames) -> std::result::Result<Self, String>;
}

fn style_field(names: &StyleNames, field: &str, value: &str) -> std::result::Result<super::StyleLabel, String> {
    names.parse(value).ok_or_else(|| format!("field `{field}`: unknown style {value:?}"))
}

impl JsonlRecord for ParallelSample {
    fn to_json(&self, names: &StyleNames) -> serde_json::Value {
        serde_json::to_value(ParallelRecord {
            source: self.source.clone(),
            reference: self.reference.clone(),
            context_before: self.context.before.clone(),
            context_after: self.context.after.clone(),
            source_style: names.name(self.source_style).to_string(),
            target_style: names.name(self.target_style).to_string(),
        })
        .expect("record serializes")
    }

    fn from_json(line: &str, names: &StyleNames) -> std::result::Result<Self, String> {
        let r: ParallelRecord = serde_json::from_str(line).map_err(|e| e.to_string())?;
        let sample = ParallelSample {
            source: r.source,
            reference: r.reference,
            context: Context { before: r.context_before, after: r.context_after },
            source_style: style_field(names, "source_style", &r.source_style)?,
            target_style: style_field(names, "target_style", &r.target_style)?,
        };
        sample.validate()?;
        Ok(sample)
    }
}

impl JsonlRecord for NonParallelSample {
    fn to_json(&self, names: &StyleNames) -> serde_json::Value {
        serde_json::to_value(NonParallelRecord { sentence: self.sentence.clone(), style: names.name(self.style).to_string() })
            .expect("record serializes")
    }

    fn from_json(line: &str, names: &StyleNames) -> std::result::Result<Self, String> {
        let r: NonParallelRecord = serde_json::from_str(line).map_err(|e| e.to_string())?;
        let sample = NonParallelSample { sentence: r.sentence, style: style_field(names, "style", &r.style)? };
        sample.validate()?;
        Ok(sample)
    }
}

impl JsonlRecord for Paragraph {
    fn to_json(&self, _names: &StyleNames) -> serde_json::Value {
        serde_json::to_value(ParagraphRecord { sentences: self.sentences.clone(), target_index: self.target_index })
            .expect("record serializes")
    }

    fn from_json(line: &str, _names: &StyleNames) -> std::result::Result<Self, String> {
        let r: ParagraphRecord = serde_json::from_str(line).map_err(|e| e.to_string())?;
        let p = Paragraph { sentences: r.sentences, target_index: r.target_index };
        p.validate()?;
        Ok(p)
    }
}

pub fn write_jsonl<T: JsonlRecord>(path: &Path, records: &[T], names: &StyleNames) -> Result<()> {
    let file = File::create(path).map_err(|e| CastError::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        writeln!(w, "{}", r.to_json(names)).map_err(|e| CastError::io(path, e))?;
    }
    w.flush().map_err(|e| CastError::io(path, e))
}

fn read_jsonl<T: JsonlRecord>(path: &Path, names: &StyleNames) -> Result<Vec<T>> {
    let file = File::open(path).map_err(|e| CastError::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| CastError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record = T::from_json(&line, names).map_err(|message| CastError::Record { path: path.to_path_buf(), line: i + 1, message })?;
        out.push(record);
    }
    Ok(out)
}

pub fn load_parallel(path: &Path, names: &StyleNames) -> Result<Vec<ParallelSample>> {
    read_jsonl(path, names)
}

pub fn load_nonparallel(path: &Path, names: &StyleNames) -> Result<Vec<NonParallelSample>> {
    read_jsonl(path, names)
}

pub fn load_paragraphs(path: &Path) -> Result<Vec<Paragraph>> {
    read_jsonl(path, &StyleNames::default())
}

/// Loads and validates a JSONL file of the given kind. Invalid records are
/// reported with their 1-based line number.
pub fn load_dataset(path: &Path, kind: DatasetKind, names: &StyleNames) -> Result<Dataset> {
    Ok(match kind {
        DatasetKind::Parallel => Dataset::Parallel(load_parallel(path, names)?),
        DatasetKind::NonParallel => Dataset::NonParallel(load_nonparallel(path, names)?),
        DatasetKind::Paragraphs => Dataset::Paragraphs(load_paragraphs(path)?),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::StyleLabel;

    fn write_lines(lines: &[&str]) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        for l in lines {
            writeln!(f, "{l}").unwrap();
        }
        f
    }

    const GOOD: &str = r#"{"source":["hey","we","gonna","fix","it","lol"],"reference":["hello","we","will","fix","the","budget","regards"],"context_before":[["so","the","tax","is","due"]],"context_after":[["ok","audit","now"]],"source_style":"informal","target_style":"formal"}"#;

    #[test]
    fn loads_three_parallel_records() {
        let f = write_lines(&[GOOD, GOOD, GOOD]);
        let data = load_dataset(f.path(), DatasetKind::Parallel, &StyleNames::default()).unwrap();
        let Dataset::Parallel(samples) = data else { panic!("wrong kind") };
        assert_eq!(samples.len(), 3);
        assert_eq!(samples[0].source_style, StyleLabel::A);
        assert_eq!(samples[0].context.hole_index(), 1);
    }

    #[test]
    fn equal_styles_are_rejected_with_the_line_number() {
        let bad = GOOD.replace(r#""target_style":"formal""#, r#""target_style":"informal""#);
        let f = write_lines(&[GOOD, &bad]);
        let err = load_parallel(f.path(), &StyleNames::default()).unwrap_err();
        match err {
            CastError::Record { line, message, .. } => {
                assert_eq!(line, 2);
                assert!(message.contains("source_style"), "{message}");
            }
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn malformed_records_name_the_field() {
        let f = write_lines(&[r#"{"sentence":["a"],"style":"snarky"}"#]);
        let err = load_nonparallel(f.path(), &StyleNames::default()).unwrap_err().to_string();
        assert!(err.contains(":1:") && err.contains("style"), "{err}");
        let f = write_lines(&[r#"{"sentences":[["a"]],"target_index":0}"#]);
        assert!(load_paragraphs(f.path()).is_err());
        let f = write_lines(&[r#"{"sentence":"not a list","style":"formal"}"#]);
        assert!(load_nonparallel(f.path(), &StyleNames::default()).is_err());
    }

    #[test]
    fn missing_file_is_an_io_error() {
        let err = load_paragraphs(Path::new("/definitely/not/here.jsonl")).unwrap_err();
        assert!(matches!(err, CastError::Io { .. }));
    }
}
