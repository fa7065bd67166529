use std::collections::HashSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::generate::{Generator, MetaTask, TrainingInstance};
use super::DataError;
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Pretrain,
    Contrastive,
    Eval,
}

impl Split {
    pub fn tag(self) -> u64 {
        self as u64 + 1
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusRecord {
    pub split: Split,
    pub root_seed: u64,
    pub instance_seed: u64,
    pub hard: bool,
    pub instance: TrainingInstance,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusSpec {
    pub root_seed: u64,
    pub split: Split,
    pub counts: Vec<(MetaTask, usize)>,
    pub hard: bool,
}

/// Generates records task by task. Evaluation retrieval images are kept
/// distinct so each caption has exactly one matching image.
pub fn generate_corpus(gen: &Generator, spec: &CorpusSpec) -> Vec<CorpusRecord> {
    let mut out = Vec::new();
    let mut pair_id = 0u64;
    for &(task, count) in &spec.counts {
        let unique = spec.split == Split::Eval && task == MetaTask::Retrieval;
        let mut seen = HashSet::new();
        let mut attempt = 0u64;
        let mut made = 0;
        while made < count {
            let seed = rng::derive_seed(spec.root_seed, &[spec.split.tag(), task as u64, attempt]);
            attempt += 1;
            let instance = gen.generate(task, seed, spec.hard, pair_id);
            if unique && !seen.insert(instance.image.clone()) {
                continue;
            }
            pair_id += 1;
            made += 1;
            out.push(CorpusRecord { split: spec.split, root_seed: spec.root_seed, instance_seed: seed, hard: spec.hard, instance });
        }
    }
    out
}

pub fn serialize(record: &CorpusRecord) -> String {
    serde_json::to_string(record).expect("records serialize")
}

pub fn deserialize(line: &str, line_no: usize) -> Result<CorpusRecord, DataError> {
    serde_json::from_str(line).map_err(|e| DataError::Parse { line: line_no, column: e.column(), message: e.to_string() })
}

pub fn corpus_to_string(records: &[CorpusRecord]) -> String {
    let mut s = String::new();
    for r in records {
        s.push_str(&serialize(r));
        s.push('\n');
    }
    s
}

/// Parses one record per non-blank line; line numbers start at 1.
pub fn parse_corpus(text: &str) -> Result<Vec<CorpusRecord>, DataError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| deserialize(l, i + 1))
        .collect()
}

pub fn write_corpus(path: &Path, records: &[CorpusRecord]) -> Result<(), DataError> {
    fs::write(path, corpus_to_string(records)).map_err(|e| DataError::Io(format!("{}: {e}", path.display())))
}

pub fn read_corpus(path: &Path) -> Result<Vec<CorpusRecord>, DataError> {
    let text = fs::read_to_string(path).map_err(|e| DataError::Io(format!("{}: {e}", path.display())))?;
    parse_corpus(&text)
}
