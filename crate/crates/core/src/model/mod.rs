//! Miniature pre-norm multimodal transformer.
//!
//! Sequences mix token ids and patch vectors. A batch is packed row-wise into
//! one `[total_rows × d_model]` matrix so position-wise layers run as single
//! matrix products; attention is evaluated per sequence under its own mask.

mod checkpoint;
mod params;

pub use checkpoint::{read_params, write_params, CheckpointError, MAGIC};
pub use params::{BlockSlot, ModelConfig, ModelParams, ParamGroup};

use crate::mask::{AttentionMask, Role, SequenceLayout};
use crate::tensor::{Graph, Tensor, TensorError, Var};

pub const PAD_ID: usize = 0;
pub const MASK_ID: usize = 1;
pub const EOS_ID: usize = 2;
pub const RESERVED_TOKENS: usize = 3;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("unknown token id {id} (vocabulary size {vocab})")]
    UnknownToken { id: usize, vocab: usize },
    #[error("patch vector has {got} components, expected {expected}")]
    PatchDim { got: usize, expected: usize },
    #[error("sequence of length {len} exceeds max_seq {max}")]
    TooLong { len: usize, max: usize },
    #[error("mask covers {mask} positions but the sequence has {seq}")]
    MaskLength { mask: usize, seq: usize },
    #[error("inputs ({items}) and layout ({layout}) disagree in length")]
    LayoutLength { items: usize, layout: usize },
    #[error("position {0} is out of range")]
    Position(usize),
    #[error("position {0} is not a visual patch")]
    NotVisual(usize),
    #[error("expected exactly one EOS position, found {0}")]
    EosCount(usize),
    #[error("invalid model config: {0}")]
    Config(String),
}

/// One input position: a vocabulary id or a raw patch vector.
#[derive(Clone, Debug, PartialEq)]
pub enum InputItem {
    Token(usize),
    Patch(Vec<f64>),
}

/// Inputs with their role tags; `items[i]` sits at position `i`.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedSequence {
    pub items: Vec<InputItem>,
    pub layout: SequenceLayout,
}

impl EncodedSequence {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

/// Parameters registered on a graph, indexed like [`ModelParams::tensors`].
#[derive(Clone, Debug)]
pub struct BoundParams {
    vars: Vec<Var>,
    config: ModelConfig,
}

impl BoundParams {
    /// Wraps graph handles laid out like [`ModelParams::tensors`].
    pub fn from_vars(vars: Vec<Var>, config: ModelConfig) -> Self {
        Self { vars, config }
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    fn get(&self, index: usize) -> Var {
        self.vars[index]
    }

    fn block(&self, base: usize, slot: BlockSlot) -> Var {
        self.vars[base + slot as usize]
    }
}

/// Last-layer states of a packed batch.
#[derive(Clone, Debug)]
pub struct BatchHidden {
    pub hidden: Var,
    pub offsets: Vec<usize>,
    pub lengths: Vec<usize>,
    pub layouts: Vec<SequenceLayout>,
}

impl BatchHidden {
    /// Packed row for position `pos` of sequence `seq`.
    pub fn row(&self, seq: usize, pos: usize) -> Result<usize, ModelError> {
        if pos >= self.lengths[seq] {
            return Err(ModelError::Position(pos));
        }
        Ok(self.offsets[seq] + pos)
    }

    pub fn eos_position(&self, seq: usize) -> Result<usize, ModelError> {
        let eos = self.layouts[seq].eos_positions();
        match eos.as_slice() {
            [p] => Ok(*p),
            other => Err(ModelError::EosCount(other.len())),
        }
    }
}

/// Registers parameters as trainable leaves (or constants when `trainable`
/// is false, e.g. for evaluation).
pub fn bind(g: &mut Graph<f64>, params: &ModelParams, trainable: bool) -> Result<BoundParams, ModelError> {
    let vars = params
        .tensors()
        .iter()
        .map(|t| if trainable { g.param(t.clone()) } else { g.constant(t.clone()) })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(BoundParams { vars, config: params.config().clone() })
}

/// Token lookup, patch projection and additive learned positions.
pub fn embed_batch(g: &mut Graph<f64>, p: &BoundParams, seqs: &[&EncodedSequence]) -> Result<(Var, Vec<usize>), ModelError> {
    let cfg = &p.config;
    let mut token_ids = Vec::new();
    let mut patch_data = Vec::new();
    let mut source = Vec::new(); // (is_patch, index within its kind)
    let mut positions = Vec::new();
    let mut offsets = Vec::with_capacity(seqs.len());
    let mut total = 0;
    for seq in seqs {
        if seq.items.len() != seq.layout.len() {
            return Err(ModelError::LayoutLength { items: seq.items.len(), layout: seq.layout.len() });
        }
        if seq.len() > cfg.max_seq {
            return Err(ModelError::TooLong { len: seq.len(), max: cfg.max_seq });
        }
        offsets.push(total);
        total += seq.len();
        for (pos, item) in seq.items.iter().enumerate() {
            positions.push(pos);
            match item {
                InputItem::Token(id) => {
                    if *id >= cfg.vocab_size {
                        return Err(ModelError::UnknownToken { id: *id, vocab: cfg.vocab_size });
                    }
                    source.push((false, token_ids.len()));
                    token_ids.push(*id);
                }
                InputItem::Patch(v) => {
                    if v.len() != cfg.patch_dim {
                        return Err(ModelError::PatchDim { got: v.len(), expected: cfg.patch_dim });
                    }
                    source.push((true, patch_data.len() / cfg.patch_dim));
                    patch_data.extend_from_slice(v);
                }
            }
        }
    }
    let n_tok = token_ids.len();
    let mut parts = Vec::new();
    if n_tok > 0 {
        parts.push(g.embedding_lookup(p.get(ModelParams::TOKEN_EMBED), &token_ids)?);
    }
    if !patch_data.is_empty() {
        let n_patch = patch_data.len() / cfg.patch_dim;
        let raw = g.constant(Tensor::new(vec![n_patch, cfg.patch_dim], patch_data)?)?;
        let proj = g.matmul(raw, p.get(ModelParams::PATCH_PROJ))?;
        parts.push(g.add_bias(proj, p.get(ModelParams::PATCH_BIAS))?);
    }
    let stacked = if parts.len() == 1 { parts[0] } else { g.concat(&parts, 0)? };
    let order: Vec<usize> = source.iter().map(|&(is_patch, i)| if is_patch { n_tok + i } else { i }).collect();
    let content = if order.iter().enumerate().all(|(i, &o)| i == o) {
        stacked
    } else {
        g.embedding_lookup(stacked, &order)?
    };
    let pos = g.embedding_lookup(p.get(ModelParams::POS_EMBED), &positions)?;
    Ok((g.add(content, pos)?, offsets))
}

/// One pre-norm block over packed rows; `segments` are (offset, len) pairs
/// and `masks` the additive mask of each segment (`None` = full attention).
fn block_forward(
    g: &mut Graph<f64>,
    p: &BoundParams,
    base: usize,
    x: Var,
    segments: &[(usize, usize)],
    masks: &[Option<Tensor<f64>>],
) -> Result<Var, ModelError> {
    let cfg = &p.config;
    let heads = cfg.n_heads;
    let dh = cfg.d_model / heads;
    let scale = 1.0 / (dh as f64).sqrt();

    let h = g.layer_norm(x, p.block(base, BlockSlot::Ln1Gain), p.block(base, BlockSlot::Ln1Bias))?;
    let q = g.matmul(h, p.block(base, BlockSlot::Wq))?;
    let k = g.matmul(h, p.block(base, BlockSlot::Wk))?;
    let v = g.matmul(h, p.block(base, BlockSlot::Wv))?;
    let mut outputs = Vec::with_capacity(segments.len());
    for (&(off, len), mask) in segments.iter().zip(masks) {
        let (qs, ks, vs) = if segments.len() == 1 {
            (q, k, v)
        } else {
            (g.narrow(q, 0, off, len)?, g.narrow(k, 0, off, len)?, g.narrow(v, 0, off, len)?)
        };
        let mut head_out = Vec::with_capacity(heads);
        for hd in 0..heads {
            let (qh, kh, vh) = if heads == 1 {
                (qs, ks, vs)
            } else {
                (g.narrow(qs, 1, hd * dh, dh)?, g.narrow(ks, 1, hd * dh, dh)?, g.narrow(vs, 1, hd * dh, dh)?)
            };
            let scores = g.matmul_nt(qh, kh)?;
            let scores = g.scale(scores, scale)?;
            let probs = g.masked_softmax(scores, mask.as_ref())?;
            head_out.push(g.matmul(probs, vh)?);
        }
        outputs.push(if heads == 1 { head_out[0] } else { g.concat(&head_out, 1)? });
    }
    let attn = if outputs.len() == 1 { outputs[0] } else { g.concat(&outputs, 0)? };
    let attn = g.matmul(attn, p.block(base, BlockSlot::Wo))?;
    let attn = g.add_bias(attn, p.block(base, BlockSlot::Bo))?;
    let x = g.add(x, attn)?;

    let h = g.layer_norm(x, p.block(base, BlockSlot::Ln2Gain), p.block(base, BlockSlot::Ln2Bias))?;
    let m = g.matmul(h, p.block(base, BlockSlot::W1))?;
    let m = g.add_bias(m, p.block(base, BlockSlot::B1))?;
    let m = g.gelu(m)?;
    let m = g.matmul(m, p.block(base, BlockSlot::W2))?;
    let m = g.add_bias(m, p.block(base, BlockSlot::B2))?;
    Ok(g.add(x, m)?)
}

/// Runs the encoder stack over a packed batch under per-sequence masks.
pub fn forward_batch(
    g: &mut Graph<f64>,
    p: &BoundParams,
    seqs: &[&EncodedSequence],
    masks: &[&AttentionMask],
) -> Result<BatchHidden, ModelError> {
    if seqs.len() != masks.len() {
        return Err(ModelError::MaskLength { mask: masks.len(), seq: seqs.len() });
    }
    for (seq, mask) in seqs.iter().zip(masks) {
        if mask.len() != seq.len() {
            return Err(ModelError::MaskLength { mask: mask.len(), seq: seq.len() });
        }
    }
    let (mut x, offsets) = embed_batch(g, p, seqs)?;
    let segments: Vec<(usize, usize)> = seqs.iter().zip(&offsets).map(|(s, &o)| (o, s.len())).collect();
    let additive: Vec<Option<Tensor<f64>>> = masks.iter().map(|m| Some(m.additive())).collect();
    for layer in 0..p.config.n_layers {
        x = block_forward(g, p, ModelParams::encoder_block(layer), x, &segments, &additive)?;
    }
    let idx = ModelParams::final_ln(&p.config);
    let hidden = g.layer_norm(x, p.get(idx), p.get(idx + 1))?;
    Ok(BatchHidden {
        hidden,
        offsets,
        lengths: seqs.iter().map(|s| s.len()).collect(),
        layouts: seqs.iter().map(|s| s.layout.clone()).collect(),
    })
}

/// LM-head logits for packed rows.
pub fn lm_logits(g: &mut Graph<f64>, p: &BoundParams, hidden: Var, rows: &[usize]) -> Result<Var, ModelError> {
    let total = g.shape(hidden)[0];
    if let Some(&bad) = rows.iter().find(|&&r| r >= total) {
        return Err(ModelError::Position(bad));
    }
    let selected = g.embedding_lookup(hidden, rows)?;
    Ok(g.matmul(selected, p.get(ModelParams::lm_head(&p.config)))?)
}

/// Shallow reconstruction head over masked-patch encoder outputs.
///
/// `groups` lists, per sequence, the packed rows of its masked patches; rows
/// of one group attend to each other only.
pub fn mae_decode(g: &mut Graph<f64>, p: &BoundParams, hidden: Var, groups: &[Vec<usize>]) -> Result<Var, ModelError> {
    let cfg = &p.config;
    let rows: Vec<usize> = groups.iter().flatten().copied().collect();
    if rows.is_empty() {
        return Ok(g.constant(Tensor::new(vec![0, cfg.patch_dim], Vec::new())?)?);
    }
    let total = g.shape(hidden)[0];
    if let Some(&bad) = rows.iter().find(|&&r| r >= total) {
        return Err(ModelError::Position(bad));
    }
    let mut x = g.embedding_lookup(hidden, &rows)?;
    let mut segments = Vec::new();
    let mut off = 0;
    for grp in groups.iter().filter(|grp| !grp.is_empty()) {
        segments.push((off, grp.len()));
        off += grp.len();
    }
    let masks = vec![None; segments.len()];
    for layer in 0..cfg.mae_decoder_layers {
        x = block_forward(g, p, ModelParams::mae_block(cfg, layer), x, &segments, &masks)?;
    }
    let head = ModelParams::mae_head(cfg);
    let x = g.layer_norm(x, p.get(head), p.get(head + 1))?;
    let out = g.matmul(x, p.get(head + 2))?;
    Ok(g.add_bias(out, p.get(head + 3))?)
}

/// Validates that `positions` of `layout` are visual patches.
pub fn check_visual(layout: &SequenceLayout, positions: &[usize]) -> Result<(), ModelError> {
    for &pos in positions {
        if pos >= layout.len() {
            return Err(ModelError::Position(pos));
        }
        if layout.role(pos) != Role::VisualA {
            return Err(ModelError::NotVisual(pos));
        }
    }
    Ok(())
}

/// EOS rows of every sequence as a `[batch × d_model]` matrix.
pub fn eos_embeddings(g: &mut Graph<f64>, h: &BatchHidden) -> Result<Var, ModelError> {
    let rows = (0..h.offsets.len())
        .map(|s| h.eos_position(s).and_then(|p| h.row(s, p)))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(g.embedding_lookup(h.hidden, &rows)?)
}

/// Last-layer states of one sequence, computed without gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct HiddenStates {
    pub states: Tensor<f64>,
    pub layout: SequenceLayout,
}

impl HiddenStates {
    /// The final-layer vector at the sequence's single EOS position.
    pub fn eos_embedding(&self) -> Result<Vec<f64>, ModelError> {
        let eos = self.layout.eos_positions();
        match eos.as_slice() {
            [p] => Ok(self.states.row(*p).to_vec()),
            other => Err(ModelError::EosCount(other.len())),
        }
    }
}

/// Inference forward pass for a single sequence.
pub fn hidden_states(params: &ModelParams, seq: &EncodedSequence, mask: &AttentionMask) -> Result<HiddenStates, ModelError> {
    let mut g = Graph::new();
    let p = bind(&mut g, params, false)?;
    let h = forward_batch(&mut g, &p, &[seq], &[mask])?;
    Ok(HiddenStates { states: g.value(h.hidden).clone(), layout: seq.layout.clone() })
}

/// EOS embeddings of many sequences under their masks, in batches.
pub fn embed_many(
    params: &ModelParams,
    seqs: &[EncodedSequence],
    masks: &[AttentionMask],
    batch: usize,
) -> Result<Vec<Vec<f64>>, ModelError> {
    let mut out = Vec::with_capacity(seqs.len());
    for (chunk, mchunk) in seqs.chunks(batch.max(1)).zip(masks.chunks(batch.max(1))) {
        let mut g = Graph::new();
        let p = bind(&mut g, params, false)?;
        let refs: Vec<&EncodedSequence> = chunk.iter().collect();
        let mrefs: Vec<&AttentionMask> = mchunk.iter().collect();
        let h = forward_batch(&mut g, &p, &refs, &mrefs)?;
        let e = eos_embeddings(&mut g, &h)?;
        let t = g.value(e);
        out.extend((0..t.rows()).map(|r| t.row(r).to_vec()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests;
