use std::collections::HashSet;

use rand_distr::{Distribution, Normal};

use super::EvalError;
use crate::data::{bridged_input, Color, Shape, SymbolicImage, TrainingInstance, Vocab};
use crate::mask::{build_truncated, AttentionMask, Role, SequenceLayout};
use crate::masking::{blockb_mask, NOISE_STD};
use crate::model::{bind, forward_batch, lm_logits, EncodedSequence, InputItem, ModelError, ModelParams, EOS_ID, MASK_ID, RESERVED_TOKENS};
use crate::rng;
use crate::tensor::Graph;

const LOSS_BATCH: usize = 64;

/// Token-weighted mean reconstruction cross-entropy over masked Block-B
/// positions, optionally with every Block-A patch replaced by noise.
pub fn block_b_loss(params: &ModelParams, instances: &[TrainingInstance], ratio: f64, seed: u64, noisy: bool) -> Result<f64, EvalError> {
    if instances.is_empty() {
        return Err(EvalError::EmptyPool);
    }
    let normal = Normal::new(0.0, NOISE_STD).expect("positive noise std");
    let mut total = 0.0;
    let mut count = 0usize;
    for (chunk_no, chunk) in instances.chunks(LOSS_BATCH).enumerate() {
        let mut seqs = Vec::with_capacity(chunk.len());
        let mut masked = Vec::with_capacity(chunk.len());
        let mut targets = Vec::new();
        for (k, inst) in chunk.iter().enumerate() {
            let i = chunk_no * LOSS_BATCH + k;
            let mut b = bridged_input(inst)?;
            if noisy {
                let mut r = rng::stream(seed, &[i as u64, 1]);
                for p in b.patches.clone() {
                    let dim = inst.block_a_patches[p - b.patches.start].len();
                    b.seq.items[p] = InputItem::Patch((0..dim).map(|_| normal.sample(&mut r)).collect());
                }
            }
            let plan = blockb_mask(b.block_b.clone(), ratio, rng::derive_seed(seed, &[i as u64, 0]))
                .map_err(|e| EvalError::Protocol(e.to_string()))?;
            for &p in &plan.positions {
                if let InputItem::Token(t) = std::mem::replace(&mut b.seq.items[p], InputItem::Token(MASK_ID)) {
                    targets.push(t);
                }
            }
            masked.push(plan.positions);
            seqs.push(b.seq);
        }
        let attn = seqs.iter().map(|s| build_truncated(&s.layout)).collect::<Result<Vec<_>, _>>()?;
        let mut g = Graph::new();
        let p = bind(&mut g, params, false)?;
        let refs: Vec<&EncodedSequence> = seqs.iter().collect();
        let arefs: Vec<&AttentionMask> = attn.iter().collect();
        let h = forward_batch(&mut g, &p, &refs, &arefs)?;
        let mut rows = Vec::new();
        for (s, pos) in masked.iter().enumerate() {
            for &q in pos {
                rows.push(h.row(s, q - 1)?);
            }
        }
        let logits = lm_logits(&mut g, &p, h.hidden, &rows)?;
        let ce = g.cross_entropy_from_logits(logits, &targets).map_err(ModelError::from)?;
        total += g.value(ce).data()[0] * targets.len() as f64;
        count += targets.len();
    }
    Ok(total / count as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ReconstructionGap {
    pub clean: f64,
    pub noisy: f64,
}

impl ReconstructionGap {
    pub fn gap(&self) -> f64 {
        self.noisy - self.clean
    }
}

pub fn reconstruction_gap(params: &ModelParams, instances: &[TrainingInstance], ratio: f64, seed: u64) -> Result<ReconstructionGap, EvalError> {
    Ok(ReconstructionGap {
        clean: block_b_loss(params, instances, ratio, seed, false)?,
        noisy: block_b_loss(params, instances, ratio, seed, true)?,
    })
}

/// Greedy left-to-right decoding of `length` Block-B tokens from
/// `[patches][EOS][MASK × length]`, restricted to word tokens.
pub fn eos_probe(params: &ModelParams, patches: &[Vec<f64>], length: usize) -> Result<Vec<usize>, EvalError> {
    let eos = patches.len();
    let total = eos + 1 + length;
    if total > params.config().max_seq {
        return Err(ModelError::TooLong { len: total, max: params.config().max_seq }.into());
    }
    let mut items: Vec<InputItem> = patches.iter().map(|p| InputItem::Patch(p.clone())).collect();
    items.push(InputItem::Token(EOS_ID));
    items.extend(std::iter::repeat_n(InputItem::Token(MASK_ID), length));
    let roles: Vec<Role> = (0..total)
        .map(|i| match i {
            i if i < eos => Role::VisualA,
            i if i == eos => Role::EosBridge,
            _ => Role::TextB,
        })
        .collect();
    let layout = SequenceLayout::new(roles);
    let mask = build_truncated(&layout)?;
    let mut seq = EncodedSequence { items, layout };
    let mut out = Vec::with_capacity(length);
    for j in 0..length {
        let mut g = Graph::new();
        let p = bind(&mut g, params, false)?;
        let h = forward_batch(&mut g, &p, &[&seq], &[&mask])?;
        let logits = lm_logits(&mut g, &p, h.hidden, &[eos + j])?;
        let row = g.value(logits).row(0);
        let best = (RESERVED_TOKENS..row.len()).fold(RESERVED_TOKENS, |b, t| if row[t] > row[b] { t } else { b });
        seq.items[eos + 1 + j] = InputItem::Token(best);
        out.push(best);
    }
    Ok(out)
}

/// Distinct colors and shapes named by `tokens` that occur in the image.
pub fn attribute_recall(vocab: &Vocab, tokens: &[usize], image: &SymbolicImage) -> usize {
    let colors: HashSet<Color> = image.cells.iter().map(|c| c.color).collect();
    let shapes: HashSet<Shape> = image.cells.iter().map(|c| c.shape).collect();
    let mut hits = HashSet::new();
    for w in tokens.iter().filter_map(|&t| vocab.token(t)) {
        if let Some(c) = Color::from_word(w).filter(|c| colors.contains(c)) {
            hits.insert(format!("color:{c:?}"));
        }
        if let Some(s) = Shape::from_word(w).filter(|s| shapes.contains(s)) {
            hits.insert(format!("shape:{s:?}"));
        }
    }
    hits.len()
}
