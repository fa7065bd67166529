use std::collections::HashSet;
use std::time::Instant;

use rand::seq::SliceRandom;

use super::{adam_step, MetricRow, PipelineError, StageConfig, TextObjective, TrainerState};
use crate::data::{bridged_input, joint_input, pair_input, TrainingInstance};
use crate::mask::{build_bidirectional, build_truncated, AttentionMask};
use crate::masking::{blockb_mask, mae_mask, mntp_mask, NOISE_STD};
use crate::model::{
    eos_embeddings, forward_batch, mae_decode, BoundParams, EncodedSequence, InputItem, ModelConfig, ModelParams, ParamGroup, MASK_ID,
};
use crate::objectives::{infonce, mae_loss, mntp_loss, warmup_loss, LossBreakdown, LossTerm};
use crate::rng;
use crate::tensor::{Graph, Tensor, Var};

const TAG_INIT: u64 = 0x1417;
const TAG_SHUFFLE: u64 = 0x5117;
pub(crate) const TAG_TEXT: u64 = 1;
pub(crate) const TAG_PATCH: u64 = 2;
pub(crate) const TAG_BLOCK_B: u64 = 3;

/// Whether the encoder, LM head and MAE decoder are updated in this stage.
pub fn trainable_groups(cfg: &StageConfig) -> [bool; 3] {
    match cfg.stage {
        1 => [true, cfg.text_objective != TextObjective::None, cfg.mae_weight > 0.0],
        2 => [true, true, false],
        _ => [true, false, false],
    }
}

fn group_index(g: ParamGroup) -> usize {
    match g {
        ParamGroup::Encoder => 0,
        ParamGroup::LmHead => 1,
        ParamGroup::Mae => 2,
    }
}

/// Seed of the mask drawn for one instance in one epoch.
pub(crate) fn mask_seed(cfg: &StageConfig, epoch: usize, index: usize, kind: u64) -> u64 {
    rng::derive_seed(cfg.root_seed, &[cfg.stage as u64, epoch as u64, index as u64, kind])
}

pub fn initial_params(model: &ModelConfig, root_seed: u64) -> Result<ModelParams, PipelineError> {
    Ok(ModelParams::init(model, &mut rng::stream(root_seed, &[TAG_INIT]))?)
}

/// Prepares the state for a stage, enforcing the 1 → 2 → 3 order.
///
/// A checkpoint from the same stage with an identical config resumes it.
pub fn begin_stage(
    cfg: StageConfig,
    model: &ModelConfig,
    init: Option<TrainerState>,
    allow_skip: bool,
) -> Result<TrainerState, PipelineError> {
    cfg.validate()?;
    model.validate()?;
    let Some(prev) = init else {
        if cfg.stage != 1 && !allow_skip {
            return Err(PipelineError::StageOrder { stage: cfg.stage, expected: cfg.stage - 1, found: "no checkpoint".into() });
        }
        let params = initial_params(model, cfg.root_seed)?;
        return Ok(TrainerState::fresh(params, cfg));
    };
    if prev.params.config() != model {
        return Err(PipelineError::ConfigMismatch(format!(
            "checkpoint model {:?} differs from requested {:?}",
            prev.params.config(),
            model
        )));
    }
    if prev.stage == cfg.stage {
        if prev.config != cfg {
            return Err(PipelineError::ConfigMismatch(format!("resuming stage {} with a different stage config", cfg.stage)));
        }
        return Ok(prev);
    }
    if prev.stage + 1 != cfg.stage && !allow_skip {
        return Err(PipelineError::StageOrder { stage: cfg.stage, expected: cfg.stage - 1, found: format!("stage {}", prev.stage) });
    }
    let mut state = TrainerState::fresh(prev.params, cfg);
    state.stage = prev.stage;
    Ok(state)
}

fn shuffled(n: usize, cfg: &StageConfig, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(cfg.root_seed, &[TAG_SHUFFLE, cfg.stage as u64, epoch as u64]));
    order
}

/// Batches of one epoch; stage 3 batches are collision-free.
pub fn epoch_batches(corpus: &[TrainingInstance], cfg: &StageConfig, epoch: usize) -> Vec<Vec<usize>> {
    let order = shuffled(corpus.len(), cfg, epoch);
    if cfg.stage == 3 {
        contrastive_batches(corpus, order, cfg.batch_size)
    } else {
        order.chunks(cfg.batch_size).map(<[usize]>::to_vec).collect()
    }
}

/// Greedy packing that never puts two instances with the same pair id or
/// the same target text in one batch. Instances left alone in a batch are
/// dropped for the epoch since they would have no negatives.
pub fn contrastive_batches(corpus: &[TrainingInstance], mut pending: Vec<usize>, batch_size: usize) -> Vec<Vec<usize>> {
    let mut batches = Vec::new();
    while !pending.is_empty() {
        let mut batch = Vec::with_capacity(batch_size);
        let mut ids = HashSet::new();
        let mut targets: HashSet<&[usize]> = HashSet::new();
        let mut rest = Vec::with_capacity(pending.len());
        for i in pending {
            let inst = &corpus[i];
            if batch.len() < batch_size && !ids.contains(&inst.pair_id) && !targets.contains(inst.block_b_text.as_slice()) {
                ids.insert(inst.pair_id);
                targets.insert(&inst.block_b_text);
                batch.push(i);
            } else {
                rest.push(i);
            }
        }
        if batch.len() >= 2 {
            batches.push(batch);
        }
        pending = rest;
    }
    batches
}

pub(crate) fn check_contrastive(corpus: &[TrainingInstance], batch: &[usize]) -> Result<(), PipelineError> {
    let mut ids = HashSet::new();
    let mut targets = HashSet::new();
    for &i in batch {
        if !ids.insert(corpus[i].pair_id) {
            return Err(PipelineError::Batch(format!("pair id {} appears twice", corpus[i].pair_id)));
        }
        if !targets.insert(corpus[i].block_b_text.as_slice()) {
            return Err(PipelineError::Batch(format!("instance {i} repeats another target")));
        }
    }
    if batch.len() < 2 {
        return Err(PipelineError::Batch(format!("{} pair(s) leave no negatives", batch.len())));
    }
    Ok(())
}

fn bind_groups(g: &mut Graph<f64>, params: &ModelParams, groups: [bool; 3]) -> Result<(BoundParams, Vec<bool>), PipelineError> {
    let cfg = params.config();
    let mut vars = Vec::with_capacity(params.tensors().len());
    let mut trainable = Vec::with_capacity(params.tensors().len());
    for (i, t) in params.tensors().iter().enumerate() {
        let on = groups[group_index(ModelParams::group_of(cfg, i))];
        vars.push(if on { g.param(t.clone())? } else { g.constant(t.clone())? });
        trainable.push(on);
    }
    Ok((BoundParams::from_vars(vars, cfg.clone()), trainable))
}

/// Loss graph and per-term summary of one batch.
pub struct StepOutcome {
    pub loss: Option<Var>,
    pub breakdown: LossBreakdown,
}

fn mask_text(seq: &mut EncodedSequence, positions: &[usize]) -> Vec<usize> {
    positions
        .iter()
        .map(|&p| match std::mem::replace(&mut seq.items[p], InputItem::Token(MASK_ID)) {
            InputItem::Token(t) => t,
            InputItem::Patch(_) => unreachable!("text span holds tokens"),
        })
        .collect()
}

fn text_rows(h: &crate::model::BatchHidden, seq: usize, positions: &[usize], shifted: bool) -> Result<Vec<usize>, PipelineError> {
    Ok(positions.iter().map(|&p| h.row(seq, if shifted { p - 1 } else { p })).collect::<Result<_, _>>()?)
}

fn stage1_loss(
    g: &mut Graph<f64>,
    p: &BoundParams,
    corpus: &[TrainingInstance],
    batch: &[usize],
    cfg: &StageConfig,
    epoch: usize,
) -> Result<StepOutcome, PipelineError> {
    let text_on = cfg.text_objective != TextObjective::None;
    let mae_on = cfg.mae_weight > 0.0;
    let mut seqs = Vec::with_capacity(batch.len());
    let mut text_masks = Vec::new();
    let mut targets = Vec::new();
    let mut patch_masks = Vec::new();
    let mut patch_truth = Vec::new();
    for &i in batch {
        let inst = &corpus[i];
        let mut joint = joint_input(inst)?;
        if text_on {
            let plan = mntp_mask(joint.text.clone(), cfg.text_ratio, mask_seed(cfg, epoch, i, TAG_TEXT))?;
            targets.extend(mask_text(&mut joint.seq, &plan.positions));
            text_masks.push(plan.positions);
        }
        if mae_on {
            let plan = mae_mask(joint.patches.clone(), cfg.patch_ratio, mask_seed(cfg, epoch, i, TAG_PATCH), NOISE_STD, p.config().patch_dim)?;
            for (&pos, noise) in plan.positions.iter().zip(plan.noise) {
                patch_truth.extend_from_slice(&inst.block_a_patches[pos - joint.patches.start]);
                joint.seq.items[pos] = InputItem::Patch(noise);
            }
            patch_masks.push(plan.positions);
        }
        seqs.push(joint.seq);
    }
    let masks: Vec<AttentionMask> = seqs.iter().map(|s| build_bidirectional(&s.layout)).collect();
    let refs: Vec<&EncodedSequence> = seqs.iter().collect();
    let mrefs: Vec<&AttentionMask> = masks.iter().collect();
    let h = forward_batch(g, p, &refs, &mrefs)?;

    let mut text = LossTerm::EMPTY;
    if text_on {
        let shifted = cfg.text_objective == TextObjective::Mntp;
        let mut rows = Vec::with_capacity(targets.len());
        for (s, pos) in text_masks.iter().enumerate() {
            rows.extend(text_rows(&h, s, pos, shifted)?);
        }
        text = mntp_loss(g, p, h.hidden, &rows, &targets)?;
    }
    let mut mae = LossTerm::EMPTY;
    if mae_on {
        let groups = patch_masks
            .iter()
            .enumerate()
            .map(|(s, pos)| pos.iter().map(|&q| h.row(s, q)).collect::<Result<Vec<_>, _>>())
            .collect::<Result<Vec<_>, _>>()?;
        let count = groups.iter().map(Vec::len).sum::<usize>();
        let pred = mae_decode(g, p, h.hidden, &groups)?;
        mae = mae_loss(g, pred, &Tensor::new(vec![count, p.config().patch_dim], patch_truth)?)?;
    }
    let breakdown = LossBreakdown {
        mntp: text.value(g),
        mae: mae.value(g),
        masked_tokens: text.count,
        masked_patches: mae.count,
        ..LossBreakdown::default()
    };
    let loss = warmup_loss(g, text, mae, cfg.mae_weight)?;
    let total = loss.map_or(0.0, |v| g.value(v).data()[0]);
    Ok(StepOutcome { loss, breakdown: LossBreakdown { total, ..breakdown } })
}

fn stage2_loss(
    g: &mut Graph<f64>,
    p: &BoundParams,
    corpus: &[TrainingInstance],
    batch: &[usize],
    cfg: &StageConfig,
    epoch: usize,
) -> Result<StepOutcome, PipelineError> {
    let mut seqs = Vec::with_capacity(batch.len());
    let mut masked = Vec::with_capacity(batch.len());
    let mut targets = Vec::new();
    for &i in batch {
        let mut b = bridged_input(&corpus[i])?;
        let plan = blockb_mask(b.block_b.clone(), cfg.blockb_ratio, mask_seed(cfg, epoch, i, TAG_BLOCK_B))?;
        targets.extend(mask_text(&mut b.seq, &plan.positions));
        masked.push(plan.positions);
        seqs.push(b.seq);
    }
    let masks = seqs.iter().map(|s| build_truncated(&s.layout)).collect::<Result<Vec<_>, _>>()?;
    let refs: Vec<&EncodedSequence> = seqs.iter().collect();
    let mrefs: Vec<&AttentionMask> = masks.iter().collect();
    let h = forward_batch(g, p, &refs, &mrefs)?;
    let mut rows = Vec::with_capacity(targets.len());
    for (s, pos) in masked.iter().enumerate() {
        rows.extend(text_rows(&h, s, pos, true)?);
    }
    let term = mntp_loss(g, p, h.hidden, &rows, &targets)?;
    let value = term.value(g);
    let breakdown = LossBreakdown { total: value, mntp: value, masked_tokens: term.count, ..LossBreakdown::default() };
    Ok(StepOutcome { loss: term.var, breakdown })
}

fn stage3_loss(
    g: &mut Graph<f64>,
    p: &BoundParams,
    corpus: &[TrainingInstance],
    batch: &[usize],
    cfg: &StageConfig,
) -> Result<StepOutcome, PipelineError> {
    check_contrastive(corpus, batch)?;
    let pairs = batch.iter().map(|&i| pair_input(&corpus[i])).collect::<Result<Vec<_>, _>>()?;
    let refs: Vec<&EncodedSequence> = pairs.iter().map(|x| &x.query).chain(pairs.iter().map(|x| &x.target)).collect();
    let masks: Vec<AttentionMask> = refs.iter().map(|s| build_bidirectional(&s.layout)).collect();
    let mrefs: Vec<&AttentionMask> = masks.iter().collect();
    let h = forward_batch(g, p, &refs, &mrefs)?;
    let eos = eos_embeddings(g, &h)?;
    let b = pairs.len();
    let q = g.narrow(eos, 0, 0, b)?;
    let t = g.narrow(eos, 0, b, b)?;
    let term = infonce(g, q, t, cfg.temperature)?;
    let value = term.value(g);
    let breakdown = LossBreakdown { total: value, infonce: value, pairs: b, ..LossBreakdown::default() };
    Ok(StepOutcome { loss: term.var, breakdown })
}

/// Loss of one batch, with the stage's trainable groups bound as leaves.
pub(crate) fn batch_loss(
    g: &mut Graph<f64>,
    params: &ModelParams,
    corpus: &[TrainingInstance],
    batch: &[usize],
    cfg: &StageConfig,
    epoch: usize,
) -> Result<(StepOutcome, BoundParams, Vec<bool>), PipelineError> {
    let (p, trainable) = bind_groups(g, params, trainable_groups(cfg))?;
    let out = match cfg.stage {
        1 => stage1_loss(g, &p, corpus, batch, cfg, epoch)?,
        2 => stage2_loss(g, &p, corpus, batch, cfg, epoch)?,
        _ => stage3_loss(g, &p, corpus, batch, cfg)?,
    };
    Ok((out, p, trainable))
}

fn train_step(state: &mut TrainerState, corpus: &[TrainingInstance], batch: &[usize], epoch: usize) -> Result<MetricRow, PipelineError> {
    let start = Instant::now();
    let cfg = state.config.clone();
    let step = state.step + 1;
    let mut g = Graph::new();
    let (out, bound, trainable) = batch_loss(&mut g, &state.params, corpus, batch, &cfg, epoch)?;
    let loss = out.loss.ok_or_else(|| PipelineError::Config("batch produced no loss term".into()))?;
    if !out.breakdown.total.is_finite() {
        return Err(PipelineError::NonFinite { step, loss: out.breakdown });
    }
    g.backward(loss)?;
    let grads: Vec<Option<Vec<f64>>> = bound
        .vars()
        .iter()
        .zip(&trainable)
        .map(|(&v, &on)| if on { g.grad(v).map(<[f64]>::to_vec) } else { None })
        .collect();
    let names = state.params.names().to_vec();
    adam_step(state.params.tensors_mut(), &mut state.moments, &grads, &trainable, &names, cfg.learning_rate, step)?;
    if !state.params.is_finite() {
        return Err(PipelineError::NonFinite { step, loss: out.breakdown });
    }
    state.step = step;
    state.stage = cfg.stage;
    Ok(MetricRow { step, stage: cfg.stage, loss: out.breakdown, wall_ms: start.elapsed().as_millis() as u64 })
}

/// Runs the remaining schedule of the state's stage, or stops once
/// `stop_after` steps have been taken in total.
pub fn train(
    state: &mut TrainerState,
    corpus: &[TrainingInstance],
    stop_after: Option<u64>,
    sink: &mut dyn FnMut(&MetricRow),
) -> Result<(), PipelineError> {
    if corpus.is_empty() {
        return Err(PipelineError::EmptyCorpus);
    }
    let mut index = 0u64;
    for epoch in 0..state.config.epochs {
        for batch in epoch_batches(corpus, &state.config, epoch) {
            index += 1;
            if index <= state.step {
                continue;
            }
            if stop_after.is_some_and(|s| state.step >= s) {
                return Ok(());
            }
            let row = train_step(state, corpus, &batch, epoch)?;
            sink(&row);
            state.metrics.push(row);
        }
    }
    Ok(())
}

fn run_stage(
    stage: u8,
    corpus: &[TrainingInstance],
    cfg: StageConfig,
    model: &ModelConfig,
    init: Option<TrainerState>,
    allow_skip: bool,
) -> Result<TrainerState, PipelineError> {
    if cfg.stage != stage {
        return Err(PipelineError::Config(format!("config is for stage {}, not {stage}", cfg.stage)));
    }
    let mut state = begin_stage(cfg, model, init, allow_skip)?;
    train(&mut state, corpus, None, &mut |_| {})?;
    Ok(state)
}

pub fn stage1_train(corpus: &[TrainingInstance], cfg: StageConfig, model: &ModelConfig) -> Result<TrainerState, PipelineError> {
    run_stage(1, corpus, cfg, model, None, false)
}

/// Stage 2 from a stage-1 checkpoint, or from scratch when `allow_skip`.
pub fn stage2_train(
    corpus: &[TrainingInstance],
    cfg: StageConfig,
    model: &ModelConfig,
    init: Option<TrainerState>,
    allow_skip: bool,
) -> Result<TrainerState, PipelineError> {
    run_stage(2, corpus, cfg, model, init, allow_skip)
}

/// Stage 3 from a stage-2 checkpoint; `allow_skip` accepts any other start.
pub fn stage3_train(
    corpus: &[TrainingInstance],
    cfg: StageConfig,
    model: &ModelConfig,
    init: Option<TrainerState>,
    allow_skip: bool,
) -> Result<TrainerState, PipelineError> {
    run_stage(3, corpus, cfg, model, init, allow_skip)
}
