//! Embedding extraction, Precision@1 pools, probes and the ablation and
//! mask-ratio harnesses.

mod probe;
mod protocol;

pub use probe::{attribute_recall, block_b_loss, eos_probe, reconstruction_gap, ReconstructionGap};
pub use protocol::{median, run_ablation, run_mask_sweep, sweep_label, Arm, Protocol, Report, ReportRow, SeedRun, REPORT_HEADER};

use std::collections::HashMap;

use rand::seq::index::sample;
use rand::Rng;

use crate::data::{classification_label_space, pair_input, text_query, vqa_answer_space, DataError, MetaTask, TrainingInstance, Vocab};
use crate::mask::{build_bidirectional, AttentionMask};
use crate::model::{embed_many, EncodedSequence, ModelError, ModelParams};
use crate::objectives::{cosine_sim, ObjectiveError};
use crate::pipeline::PipelineError;
use crate::rng;

pub const POOL_SIZE: usize = 64;
const EMBED_BATCH: usize = 64;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("empty evaluation pool")]
    EmptyPool,
    #[error("pool of {have} candidates cannot offer {want} choices")]
    PoolTooSmall { have: usize, want: usize },
    #[error("gold target of query {0} is missing from the candidate bank")]
    MissingGold(usize),
    #[error("unknown arm {0:?}")]
    UnknownArm(String),
    #[error("invalid protocol: {0}")]
    Protocol(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Mask(#[from] crate::mask::MaskError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
}

/// Queries of one meta-task, each with its own list of candidate choices
/// drawn from a shared bank of target texts.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalPool {
    pub meta_task: MetaTask,
    pub queries: Vec<EncodedSequence>,
    /// Distinct candidate texts.
    pub candidates: Vec<Vec<usize>>,
    /// Per query, indices into `candidates`.
    pub choices: Vec<Vec<usize>>,
    /// Per query, the position of the gold candidate within its choices.
    pub gold: Vec<usize>,
}

impl EvalPool {
    pub fn len(&self) -> usize {
        self.queries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queries.is_empty()
    }

    pub fn validate(&self) -> Result<(), EvalError> {
        if self.queries.is_empty() {
            return Err(EvalError::EmptyPool);
        }
        for (q, (choices, &g)) in self.choices.iter().zip(&self.gold).enumerate() {
            if choices.len() < 2 || g >= choices.len() {
                return Err(EvalError::PoolTooSmall { have: choices.len(), want: 2 });
            }
            let gold = choices[g];
            if choices.iter().filter(|&&c| c == gold).count() != 1 {
                return Err(EvalError::MissingGold(q));
            }
        }
        Ok(())
    }
}

fn encode_all(vocab: &Vocab, texts: Vec<Vec<&str>>) -> Result<Vec<Vec<usize>>, DataError> {
    texts.into_iter().map(|t| t.iter().map(|w| vocab.id(w)).collect()).collect()
}

/// Candidate bank of a meta-task: the closed label or answer space, or the
/// distinct captions of the evaluation instances themselves.
pub fn candidate_bank(task: MetaTask, instances: &[TrainingInstance], vocab: &Vocab) -> Result<Vec<Vec<usize>>, EvalError> {
    Ok(match task {
        MetaTask::Classification => encode_all(vocab, classification_label_space())?,
        MetaTask::Vqa => encode_all(vocab, vqa_answer_space())?,
        MetaTask::Retrieval => {
            let mut seen = std::collections::HashSet::new();
            instances.iter().filter(|i| seen.insert(i.block_b_text.clone())).map(|i| i.block_b_text.clone()).collect()
        }
    })
}

/// Draws `pool_size` choices per query: its gold target plus distinct
/// distractors, in a seeded random order.
pub fn build_pool(
    task: MetaTask,
    instances: &[TrainingInstance],
    vocab: &Vocab,
    pool_size: usize,
    seed: u64,
) -> Result<EvalPool, EvalError> {
    if instances.is_empty() {
        return Err(EvalError::EmptyPool);
    }
    let candidates = candidate_bank(task, instances, vocab)?;
    if pool_size < 2 || candidates.len() < pool_size {
        return Err(EvalError::PoolTooSmall { have: candidates.len(), want: pool_size });
    }
    let index: HashMap<&[usize], usize> = candidates.iter().enumerate().map(|(i, c)| (c.as_slice(), i)).collect();
    let mut queries = Vec::with_capacity(instances.len());
    let mut choices = Vec::with_capacity(instances.len());
    let mut gold = Vec::with_capacity(instances.len());
    for (q, inst) in instances.iter().enumerate() {
        let g = *index.get(inst.block_b_text.as_slice()).ok_or(EvalError::MissingGold(q))?;
        let mut rng = rng::stream(seed, &[task as u64, q as u64]);
        let mut picks: Vec<usize> =
            sample(&mut rng, candidates.len() - 1, pool_size - 1).into_iter().map(|c| if c >= g { c + 1 } else { c }).collect();
        let at = rng.random_range(0..pool_size);
        picks.insert(at, g);
        queries.push(pair_input(inst)?.query);
        choices.push(picks);
        gold.push(at);
    }
    let pool = EvalPool { meta_task: task, queries, candidates, choices, gold };
    pool.validate()?;
    Ok(pool)
}

fn masks(seqs: &[EncodedSequence]) -> Vec<AttentionMask> {
    seqs.iter().map(|s| build_bidirectional(&s.layout)).collect()
}

/// EOS embeddings of streams that already end in EOS, under full
/// bidirectional attention.
pub fn embed(params: &ModelParams, seqs: &[EncodedSequence]) -> Result<Vec<Vec<f64>>, EvalError> {
    Ok(embed_many(params, seqs, &masks(seqs), EMBED_BATCH)?)
}

/// Embedding of one target text.
pub fn embed_text(params: &ModelParams, tokens: &[usize]) -> Result<Vec<f64>, EvalError> {
    Ok(embed(params, &[text_query(tokens)])?.remove(0))
}

/// Index of the highest-scoring choice, lowest index on ties.
pub fn argmax_first(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

/// Precision@1 given query and bank embeddings.
pub fn precision_from_embeddings(pool: &EvalPool, queries: &[Vec<f64>], bank: &[Vec<f64>]) -> Result<f64, EvalError> {
    pool.validate()?;
    let mut hits = 0usize;
    for (q, choices) in pool.choices.iter().enumerate() {
        let scores = choices.iter().map(|&c| cosine_sim(&queries[q], &bank[c])).collect::<Result<Vec<_>, _>>()?;
        if argmax_first(&scores) == pool.gold[q] {
            hits += 1;
        }
    }
    Ok(hits as f64 / pool.len() as f64)
}

pub fn precision_at_1(pool: &EvalPool, params: &ModelParams) -> Result<f64, EvalError> {
    pool.validate()?;
    let queries = embed(params, &pool.queries)?;
    let bank_seqs: Vec<EncodedSequence> = pool.candidates.iter().map(|c| text_query(c)).collect();
    let bank = embed(params, &bank_seqs)?;
    precision_from_embeddings(pool, &queries, &bank)
}
