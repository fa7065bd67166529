#![allow(dead_code)]

use cocoa::mask::{Role, SequenceLayout};
use cocoa::model::{EncodedSequence, InputItem, ModelConfig, ModelParams, RESERVED_TOKENS};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Truncated connectivity built rule by rule from block index sets.
pub fn oracle_truncated(roles: &[Role]) -> Vec<Vec<bool>> {
    let n = roles.len();
    let eos = roles.iter().position(|&r| r == Role::EosBridge).expect("one bridge");
    let a: Vec<usize> = (0..eos).collect();
    let b: Vec<usize> = (eos + 1..n).filter(|&i| roles[i] == Role::TextB).collect();
    let pads: Vec<usize> = (0..n).filter(|&i| roles[i] == Role::Pad).collect();
    let mut m = vec![vec![false; n]; n];
    for block in [&a, &b] {
        for &i in block {
            for &j in block {
                m[i][j] = true;
            }
        }
    }
    for &i in a.iter().chain(&b).chain(std::iter::once(&eos)) {
        m[i][eos] = true;
    }
    for &j in &a {
        m[eos][j] = true;
    }
    for &p in &pads {
        m[p][p] = true;
    }
    m
}

/// `[Block A roles][EOS][B × b][Pad × pad]`.
pub fn layout(block_a: &[Role], b: usize, pad: usize) -> SequenceLayout {
    let mut roles = block_a.to_vec();
    roles.push(Role::EosBridge);
    roles.extend(std::iter::repeat_n(Role::TextB, b));
    roles.extend(std::iter::repeat_n(Role::Pad, pad));
    SequenceLayout::new(roles)
}

/// Block-A roles whose bit `k` of `bits` selects text (1) or visual (0).
pub fn block_a_roles(len: usize, bits: u32) -> Vec<Role> {
    (0..len).map(|k| if bits >> k & 1 == 1 { Role::TextA } else { Role::VisualA }).collect()
}

pub fn tiny_config(layers: usize) -> ModelConfig {
    ModelConfig { d_model: 16, n_layers: layers, n_heads: 2, vocab_size: 24, patch_dim: 6, max_seq: 32, mae_decoder_layers: 1 }
}

pub fn random_params(cfg: &ModelConfig, seed: u64) -> ModelParams {
    ModelParams::init(cfg, &mut ChaCha8Rng::seed_from_u64(seed)).expect("valid config")
}

/// Random sequence contents for a layout: patches for visual slots, word
/// tokens elsewhere.
pub fn random_items<R: Rng>(layout: &SequenceLayout, cfg: &ModelConfig, rng: &mut R) -> EncodedSequence {
    let items = layout
        .roles()
        .iter()
        .map(|r| match r {
            Role::VisualA => InputItem::Patch((0..cfg.patch_dim).map(|_| rng.random_range(-1.0..1.0)).collect()),
            Role::EosBridge => InputItem::Token(cocoa::model::EOS_ID),
            Role::Pad => InputItem::Token(cocoa::model::PAD_ID),
            _ => InputItem::Token(rng.random_range(RESERVED_TOKENS..cfg.vocab_size)),
        })
        .collect();
    EncodedSequence { items, layout: layout.clone() }
}
