use std::ops::Range;

use super::generate::TrainingInstance;
use super::DataError;
use crate::mask::{Role, SequenceLayout};
use crate::model::{EncodedSequence, InputItem, EOS_ID};

/// Flat bidirectional stream: patches, then question, then target text.
#[derive(Clone, Debug, PartialEq)]
pub struct JointInput {
    pub seq: EncodedSequence,
    pub patches: Range<usize>,
    pub text: Range<usize>,
}

/// `Block A, EOS, Block B`.
#[derive(Clone, Debug, PartialEq)]
pub struct BridgedInput {
    pub seq: EncodedSequence,
    pub patches: Range<usize>,
    pub eos: usize,
    pub block_b: Range<usize>,
}

/// Independently encoded query and target, each ending in EOS.
#[derive(Clone, Debug, PartialEq)]
pub struct PairInput {
    pub query: EncodedSequence,
    pub target: EncodedSequence,
}

#[derive(Clone, Debug, PartialEq)]
pub enum StageLayout {
    Joint(JointInput),
    Bridged(BridgedInput),
    Pair(PairInput),
}

fn push_block_a(inst: &TrainingInstance, items: &mut Vec<InputItem>, roles: &mut Vec<Role>) {
    for p in &inst.block_a_patches {
        items.push(InputItem::Patch(p.clone()));
        roles.push(Role::VisualA);
    }
    for &t in inst.block_a_text.iter().flatten() {
        items.push(InputItem::Token(t));
        roles.push(Role::TextA);
    }
}

fn check(inst: &TrainingInstance) -> Result<(), DataError> {
    if inst.block_a_patches.is_empty() {
        return Err(DataError::Layout("instance has no patches".into()));
    }
    if inst.block_b_text.is_empty() {
        return Err(DataError::Layout("instance has an empty Block B".into()));
    }
    Ok(())
}

pub fn joint_input(inst: &TrainingInstance) -> Result<JointInput, DataError> {
    check(inst)?;
    let (mut items, mut roles) = (Vec::new(), Vec::new());
    push_block_a(inst, &mut items, &mut roles);
    for &t in &inst.block_b_text {
        items.push(InputItem::Token(t));
        roles.push(Role::TextB);
    }
    let n_patch = inst.block_a_patches.len();
    let len = items.len();
    Ok(JointInput { seq: EncodedSequence { items, layout: SequenceLayout::new(roles) }, patches: 0..n_patch, text: n_patch..len })
}

pub fn bridged_input(inst: &TrainingInstance) -> Result<BridgedInput, DataError> {
    check(inst)?;
    let (mut items, mut roles) = (Vec::new(), Vec::new());
    push_block_a(inst, &mut items, &mut roles);
    let eos = items.len();
    items.push(InputItem::Token(EOS_ID));
    roles.push(Role::EosBridge);
    for &t in &inst.block_b_text {
        items.push(InputItem::Token(t));
        roles.push(Role::TextB);
    }
    let len = items.len();
    Ok(BridgedInput {
        seq: EncodedSequence { items, layout: SequenceLayout::new(roles) },
        patches: 0..inst.block_a_patches.len(),
        eos,
        block_b: eos + 1..len,
    })
}

pub fn pair_input(inst: &TrainingInstance) -> Result<PairInput, DataError> {
    check(inst)?;
    let (mut items, mut roles) = (Vec::new(), Vec::new());
    push_block_a(inst, &mut items, &mut roles);
    items.push(InputItem::Token(EOS_ID));
    roles.push(Role::EosBridge);
    let query = EncodedSequence { items, layout: SequenceLayout::new(roles) };
    Ok(PairInput { query, target: text_query(&inst.block_b_text) })
}

/// A text-only stream with a trailing EOS.
pub fn text_query(tokens: &[usize]) -> EncodedSequence {
    let mut items: Vec<InputItem> = tokens.iter().map(|&t| InputItem::Token(t)).collect();
    let mut roles = vec![Role::TextB; tokens.len()];
    items.push(InputItem::Token(EOS_ID));
    roles.push(Role::EosBridge);
    EncodedSequence { items, layout: SequenceLayout::new(roles) }
}

pub fn build_layout(inst: &TrainingInstance, stage: u8) -> Result<StageLayout, DataError> {
    match stage {
        1 => joint_input(inst).map(StageLayout::Joint),
        2 => bridged_input(inst).map(StageLayout::Bridged),
        3 => pair_input(inst).map(StageLayout::Pair),
        other => Err(DataError::Layout(format!("no stage {other}"))),
    }
}
