//! Corpus and QA data: types, line-delimited JSON persistence, the
//! synthetic multi-hop generator, and evaluation metrics.

mod eval;
mod metrics;
mod synthetic;

use std::collections::HashSet;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use eval::{evaluate, EvalMode, EvalReport};
pub use metrics::{exact_match, normalize_answer};
pub use synthetic::{generate_synthetic, SyntheticConfig, SyntheticData};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    pub title: String,
    pub text: String,
}

/// One question with its gold documents listed in hop order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QAExample {
    pub question: String,
    pub answer: String,
    pub gold_doc_ids: Vec<String>,
    pub hops: u8,
}

impl QAExample {
    pub fn validate(&self) -> Result<()> {
        if self.question.trim().is_empty() {
            return Err(Error::invalid("question is empty"));
        }
        if !(1..=2).contains(&self.hops) {
            return Err(Error::invalid(format!("hops must be 1 or 2, got {}", self.hops)));
        }
        if self.gold_doc_ids.len() != self.hops as usize {
            return Err(Error::invalid(format!(
                "question `{}` has {} gold documents for {} hops",
                self.question,
                self.gold_doc_ids.len(),
                self.hops
            )));
        }
        let unique: HashSet<&String> = self.gold_doc_ids.iter().collect();
        if unique.len() != self.gold_doc_ids.len() {
            return Err(Error::invalid(format!("question `{}` repeats a gold document", self.question)));
        }
        Ok(())
    }
}

/// Checks every gold id against the corpus.
pub fn check_references(dataset: &[QAExample], corpus: &[Document]) -> Result<()> {
    let ids: HashSet<&str> = corpus.iter().map(|d| d.id.as_str()).collect();
    for ex in dataset {
        for g in &ex.gold_doc_ids {
            if !ids.contains(g.as_str()) {
                return Err(Error::UnknownId(g.clone()));
            }
        }
    }
    Ok(())
}

fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            reason: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        serde_json::to_writer(&mut w, r).map_err(|e| Error::io(path, e.into()))?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_corpus(path: impl AsRef<Path>) -> Result<Vec<Document>> {
    let path = path.as_ref();
    let docs: Vec<Document> = read_jsonl(path)?;
    let mut seen = HashSet::new();
    for (i, d) in docs.iter().enumerate() {
        if !seen.insert(d.id.as_str()) {
            return Err(Error::DuplicateId(d.id.clone()));
        }
        if d.text.trim().is_empty() {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                reason: format!("document {} has empty text", d.id),
            });
        }
    }
    Ok(docs)
}

pub fn save_corpus(path: impl AsRef<Path>, corpus: &[Document]) -> Result<()> {
    write_jsonl(path.as_ref(), corpus)
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Vec<QAExample>> {
    let path = path.as_ref();
    let data: Vec<QAExample> = read_jsonl(path)?;
    for (i, ex) in data.iter().enumerate() {
        ex.validate().map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            reason: e.to_string(),
        })?;
    }
    Ok(data)
}

pub fn save_dataset(path: impl AsRef<Path>, data: &[QAExample]) -> Result<()> {
    write_jsonl(path.as_ref(), data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn doc(id: &str) -> Document {
        Document {
            id: id.into(),
            title: "t".into(),
            text: "some text".into(),
        }
    }

    #[test]
    fn corpus_round_trip_and_duplicates() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.jsonl");
        let docs = vec![doc("a"), doc("b")];
        save_corpus(&p, &docs).unwrap();
        assert_eq!(load_corpus(&p).unwrap(), docs);

        save_corpus(&p, &[doc("a"), doc("b"), doc("a")]).unwrap();
        match load_corpus(&p) {
            Err(Error::DuplicateId(id)) => assert_eq!(id, "a"),
            other => panic!("expected duplicate error, got {other:?}"),
        }

        std::fs::write(&p, "").unwrap();
        assert!(load_corpus(&p).unwrap().is_empty());
    }

    #[test]
    fn malformed_line_reports_its_number() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.jsonl");
        let good = r#"{"question":"q","answer":"a","gold_doc_ids":["x"],"hops":1}"#;
        std::fs::write(&p, format!("{good}\n{good}\n{{oops\n")).unwrap();
        match load_dataset(&p) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
        let bad_hops = r#"{"question":"q","answer":"a","gold_doc_ids":["x"],"hops":2}"#;
        std::fs::write(&p, format!("{bad_hops}\n")).unwrap();
        assert!(matches!(load_dataset(&p), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn references_are_checked() {
        let ex = QAExample {
            question: "q".into(),
            answer: "a".into(),
            gold_doc_ids: vec!["zz".into()],
            hops: 1,
        };
        assert!(matches!(check_references(&[ex], &[doc("a")]), Err(Error::UnknownId(_))));
    }
}
