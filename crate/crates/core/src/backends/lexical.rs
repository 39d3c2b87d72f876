use std::collections::{HashMap, HashSet};
use std::io::BufRead;
use std::path::Path;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{BackendError, RetrievalRequest, Retriever};
use crate::transcript::{DocSource, Document};

const K1: f64 = 1.2;
const B: f64 = 0.75;

/// One line of a corpus JSONL file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusRecord {
    pub id: String,
    #[serde(default)]
    pub title: String,
    pub content: String,
}

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("cannot read corpus: {0}")]
    Io(#[from] std::io::Error),
    #[error("corpus line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("corpus line {line}: duplicate document id {id:?}")]
    DuplicateId { line: usize, id: String },
}

/// In-memory inverted index ranked with Okapi BM25 over title and content.
/// Immutable once built.
#[derive(Debug, Clone, Default)]
pub struct LexicalIndex {
    docs: Vec<CorpusRecord>,
    doc_len: Vec<usize>,
    avg_len: f64,
    postings: HashMap<String, Vec<(usize, usize)>>,
}

pub(crate) fn tokenize(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric()).filter(|t| !t.is_empty()).map(str::to_lowercase)
}

impl LexicalIndex {
    /// Builds the index from a JSONL file of `{id, title, content}` lines.
    /// Blank lines are skipped; line numbers in errors are 1-based.
    pub fn from_jsonl(path: impl AsRef<Path>) -> Result<Self, CorpusError> {
        let file = std::fs::File::open(path)?;
        let mut records = Vec::new();
        for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: CorpusRecord = serde_json::from_str(&line)
                .map_err(|e| CorpusError::Parse { line: i + 1, message: e.to_string() })?;
            records.push((i + 1, rec));
        }
        Self::build(records)
    }

    pub fn from_records(records: Vec<CorpusRecord>) -> Result<Self, CorpusError> {
        Self::build(records.into_iter().enumerate().map(|(i, r)| (i + 1, r)).collect())
    }

    fn build(records: Vec<(usize, CorpusRecord)>) -> Result<Self, CorpusError> {
        let mut seen = HashSet::new();
        let mut index = LexicalIndex::default();
        for (line, rec) in records {
            if rec.content.trim().is_empty() {
                return Err(CorpusError::Parse { line, message: "content is empty".into() });
            }
            if !seen.insert(rec.id.clone()) {
                return Err(CorpusError::DuplicateId { line, id: rec.id });
            }
            let doc = index.docs.len();
            let mut tf: HashMap<String, usize> = HashMap::new();
            let mut len = 0;
            for tok in tokenize(&rec.title).chain(tokenize(&rec.content)) {
                *tf.entry(tok).or_default() += 1;
                len += 1;
            }
            for (term, n) in tf {
                index.postings.entry(term).or_default().push((doc, n));
            }
            index.doc_len.push(len);
            index.docs.push(rec);
        }
        let total: usize = index.doc_len.iter().sum();
        index.avg_len = if index.docs.is_empty() { 0.0 } else { total as f64 / index.docs.len() as f64 };
        Ok(index)
    }

    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }

    /// Ranked `(doc index, score)` pairs for documents sharing at least one
    /// term with the query. Ties are broken by ascending document id.
    pub fn search(&self, query: &str, top_k: usize) -> Vec<(usize, f64)> {
        let n = self.docs.len() as f64;
        let mut terms: Vec<String> = tokenize(query).collect();
        terms.sort();
        terms.dedup();

        let mut scores: HashMap<usize, f64> = HashMap::new();
        for term in &terms {
            let Some(posting) = self.postings.get(term) else {
                continue;
            };
            let df = posting.len() as f64;
            let idf = (1.0 + (n - df + 0.5) / (df + 0.5)).ln();
            for &(doc, tf) in posting {
                let tf = tf as f64;
                let norm = 1.0 - B + B * self.doc_len[doc] as f64 / self.avg_len;
                *scores.entry(doc).or_default() += idf * tf * (K1 + 1.0) / (tf + K1 * norm);
            }
        }

        let mut ranked: Vec<(usize, f64)> = scores.into_iter().collect();
        ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| self.docs[a.0].id.cmp(&self.docs[b.0].id)));
        ranked.truncate(top_k);
        ranked
    }
}

#[async_trait]
impl Retriever for LexicalIndex {
    async fn retrieve(&self, req: &RetrievalRequest) -> Result<Vec<Document>, BackendError> {
        if req.top_k == 0 {
            return Err(BackendError::InvalidRequest("top_k must be >= 1".into()));
        }
        if self.docs.is_empty() {
            return Err(BackendError::EmptyCorpus);
        }
        Ok(self
            .search(&req.query, req.top_k)
            .into_iter()
            .enumerate()
            .map(|(i, (doc, _))| {
                let rec = &self.docs[doc];
                Document {
                    id: rec.id.clone(),
                    title: rec.title.clone(),
                    content: rec.content.clone(),
                    source: DocSource::LocalCorpus,
                    rank: i as u32 + 1,
                }
            })
            .collect())
    }
}
