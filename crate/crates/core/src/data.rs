//! File formats: JSON-lines records and tab-separated qrels.
//!
//! Ingestion fails on the first malformed line and reports its 1-based line
//! number. Blank lines are ignored; a file with no records is an error.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TextRecord {
    pub id: String,
    pub text: String,
}

/// A training example: query and its positive document.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainPair {
    pub query: String,
    pub positive: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StsPair {
    pub s1: String,
    pub s2: String,
    pub score: f64,
}

/// Binary relevance judgements: query id to relevant doc ids.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct RunQrels {
    pub relevant: BTreeMap<String, BTreeSet<String>>,
}

impl RunQrels {
    pub fn insert(&mut self, query: &str, doc: &str) {
        self.relevant
            .entry(query.to_owned())
            .or_default()
            .insert(doc.to_owned());
    }

    pub fn get(&self, query: &str) -> Option<&BTreeSet<String>> {
        self.relevant.get(query)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = crate::error::read_text(path)?;
        let mut q = RunQrels::default();
        let perr = |line: usize, message: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            message,
        };
        for (i, line) in text.lines().enumerate() {
            let n = i + 1;
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 3 {
                return Err(perr(n, format!("expected 3 tab-separated fields, got {}", fields.len())));
            }
            let (qid, did, rel) = (fields[0].trim(), fields[1].trim(), fields[2].trim());
            if qid.is_empty() {
                return Err(perr(n, "empty query id".into()));
            }
            if did.is_empty() {
                return Err(perr(n, "empty doc id".into()));
            }
            match rel {
                "1" => q.insert(qid, did),
                "0" => {
                    q.relevant.entry(qid.to_owned()).or_default();
                }
                other => return Err(perr(n, format!("relevance must be 0 or 1, got {other:?}"))),
            }
        }
        if q.relevant.is_empty() {
            return Err(perr(0, "no judgements".into()));
        }
        Ok(q)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        for (qid, docs) in &self.relevant {
            for did in docs {
                writeln!(out, "{qid}\t{did}\t1")?;
            }
        }
        out.flush()?;
        Ok(())
    }
}

/// Parses a JSON-lines file into records of type `R`.
pub fn read_jsonl<R: DeserializeOwned>(path: &Path) -> Result<Vec<R>> {
    let text = crate::error::read_text(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(rec);
    }
    if out.is_empty() {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: 0,
            message: "file holds no records".into(),
        });
    }
    Ok(out)
}

/// Text records with a check that ids are non-empty and unique.
pub fn read_texts(path: &Path) -> Result<Vec<TextRecord>> {
    let recs: Vec<TextRecord> = read_jsonl(path)?;
    let mut seen = BTreeSet::new();
    for (i, r) in recs.iter().enumerate() {
        if r.id.is_empty() || !seen.insert(r.id.as_str()) {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: format!("id {:?} is empty or duplicated", r.id),
            });
        }
    }
    Ok(recs)
}

pub fn write_jsonl<R: Serialize>(path: &Path, records: &[R]) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}
