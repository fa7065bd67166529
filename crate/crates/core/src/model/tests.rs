use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::gradcheck;
use crate::mask::{build_bidirectional, build_causal, build_truncated, reachability};

fn tiny_config() -> ModelConfig {
    ModelConfig { d_model: 8, n_layers: 2, n_heads: 2, vocab_size: 11, patch_dim: 3, max_seq: 16, mae_decoder_layers: 1 }
}

/// Init with larger weights than the default so perturbations are visible.
fn tiny_params(seed: u64) -> ModelParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = ModelParams::init(&tiny_config(), &mut rng).unwrap();
    for t in p.tensors_mut() {
        for x in t.data_mut() {
            *x += rng.random_range(-0.3..0.3);
        }
    }
    p
}

fn patch(rng: &mut impl Rng, dim: usize) -> InputItem {
    InputItem::Patch((0..dim).map(|_| rng.random_range(-1.0..1.0)).collect())
}

fn token(rng: &mut impl Rng, vocab: usize) -> InputItem {
    InputItem::Token(rng.random_range(RESERVED_TOKENS..vocab))
}

fn random_sequence(rng: &mut impl Rng, layout: &SequenceLayout) -> EncodedSequence {
    let cfg = tiny_config();
    let items = layout
        .roles()
        .iter()
        .map(|r| match r {
            Role::VisualA => patch(rng, cfg.patch_dim),
            Role::EosBridge => InputItem::Token(EOS_ID),
            Role::Pad => InputItem::Token(PAD_ID),
            _ => token(rng, cfg.vocab_size),
        })
        .collect();
    EncodedSequence { items, layout: layout.clone() }
}

fn perturb(rng: &mut impl Rng, item: &InputItem) -> InputItem {
    let cfg = tiny_config();
    match item {
        InputItem::Patch(_) => patch(rng, cfg.patch_dim),
        InputItem::Token(_) => token(rng, cfg.vocab_size),
    }
}

fn hidden(params: &ModelParams, seq: &EncodedSequence, mask: &AttentionMask) -> Tensor<f64> {
    hidden_states(params, seq, mask).unwrap().states
}

#[test]
fn config_validation() {
    let mut cfg = tiny_config();
    cfg.n_heads = 3;
    assert!(matches!(cfg.validate(), Err(ModelError::Config(_))));
    let mut cfg = tiny_config();
    cfg.vocab_size = RESERVED_TOKENS;
    assert!(cfg.validate().is_err());
    assert!(ModelConfig::default().validate().is_ok());
}

#[test]
fn init_follows_conventions() {
    let p = ModelParams::init(&ModelConfig::default(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    assert!(p.is_finite());
    assert!(p.get("mae.pixel_head").unwrap().data().iter().all(|&x| x == 0.0));
    assert!(p.get("layer0.ln1.gain").unwrap().data().iter().all(|&x| x == 1.0));
    assert!(p.get("layer1.mlp.b1").unwrap().data().iter().all(|&x| x == 0.0));
    let w = p.get("embed.token").unwrap().data();
    let var = w.iter().map(|x| x * x).sum::<f64>() / w.len() as f64;
    assert!((var.sqrt() - 0.02).abs() < 0.001, "std {}", var.sqrt());
    let cfg = p.config();
    assert_eq!(p.names()[ModelParams::lm_head(cfg)], "lm_head");
    assert_eq!(p.names()[ModelParams::mae_head(cfg) + 2], "mae.pixel_head");
    assert_eq!(ModelParams::group_of(cfg, ModelParams::lm_head(cfg) - 1), ParamGroup::Encoder);
    assert_eq!(ModelParams::group_of(cfg, ModelParams::lm_head(cfg) + 1), ParamGroup::Mae);
}

#[test]
fn embedding_rows_and_position_additivity() {
    let params = tiny_params(2);
    let layout = SequenceLayout::new(vec![Role::TextA; 5]);
    let seq = EncodedSequence { items: vec![InputItem::Token(5); 5], layout };
    let mut g = Graph::new();
    let p = bind(&mut g, &params, false).unwrap();
    let (x, _) = embed_batch(&mut g, &p, &[&seq]).unwrap();
    let x = g.value(x).clone();
    assert_eq!(x.shape(), &[5, 8]);
    let pos = params.get("embed.position").unwrap();
    for c in 0..8 {
        let got = x.row(1)[c] - x.row(0)[c];
        let want = pos.row(1)[c] - pos.row(0)[c];
        assert!((got - want).abs() < 1e-14);
    }
    assert_ne!(x.row(0), x.row(1));
}

#[test]
fn embedding_errors() {
    let params = tiny_params(3);
    let layout = SequenceLayout::new(vec![Role::TextA]);
    let bad_tok = EncodedSequence { items: vec![InputItem::Token(11)], layout: layout.clone() };
    let mask = build_bidirectional(&layout);
    assert!(matches!(hidden_states(&params, &bad_tok, &mask), Err(ModelError::UnknownToken { id: 11, .. })));
    let bad_patch = EncodedSequence { items: vec![InputItem::Patch(vec![0.0; 4])], layout: layout.clone() };
    assert!(matches!(hidden_states(&params, &bad_patch, &mask), Err(ModelError::PatchDim { got: 4, expected: 3 })));
    let long = SequenceLayout::new(vec![Role::TextA; 17]);
    let seq = EncodedSequence { items: vec![InputItem::Token(4); 17], layout: long.clone() };
    assert!(matches!(hidden_states(&params, &seq, &build_bidirectional(&long)), Err(ModelError::TooLong { .. })));
    let two = SequenceLayout::new(vec![Role::TextA; 2]);
    let seq = EncodedSequence { items: vec![InputItem::Token(4); 2], layout: two };
    assert!(matches!(hidden_states(&params, &seq, &mask), Err(ModelError::MaskLength { mask: 1, seq: 2 })));
}

#[test]
fn causal_outputs_ignore_future_inputs() {
    let params = tiny_params(4);
    let mut rng = ChaCha8Rng::seed_from_u64(40);
    let layout = SequenceLayout::new(vec![Role::TextA; 7]);
    let mask = build_causal(7).unwrap();
    for _ in 0..5 {
        let seq = random_sequence(&mut rng, &layout);
        let base = hidden(&params, &seq, &mask);
        let j = rng.random_range(1..7);
        let mut other = seq.clone();
        other.items[j] = perturb(&mut rng, &seq.items[j]);
        let h = hidden(&params, &other, &mask);
        for i in 0..j {
            assert_eq!(h.row(i), base.row(i), "row {i} changed by input {j}");
        }
        assert_ne!(h.row(j), base.row(j));
    }
}

#[test]
fn truncated_isolation_both_directions() {
    let params = tiny_params(5);
    let mut rng = ChaCha8Rng::seed_from_u64(50);
    let layout = SequenceLayout::parse_spec("A:3,T:1,EOS,B:3").unwrap();
    let mask = build_truncated(&layout).unwrap();
    let blocks = layout.blocks().unwrap();
    for _ in 0..5 {
        let seq = random_sequence(&mut rng, &layout);
        let base = hidden(&params, &seq, &mask);
        let mut other = seq.clone();
        for b in blocks.block_b.clone() {
            other.items[b] = perturb(&mut rng, &seq.items[b]);
        }
        let h = hidden(&params, &other, &mask);
        for a in blocks.block_a.clone().chain([blocks.eos]) {
            assert_eq!(h.row(a), base.row(a));
        }

        let cut = mask.without_node(blocks.eos);
        let base = hidden(&params, &seq, &cut);
        let mut other = seq.clone();
        for a in blocks.block_a.clone() {
            other.items[a] = perturb(&mut rng, &seq.items[a]);
        }
        let h = hidden(&params, &other, &cut);
        for b in blocks.block_b.clone() {
            assert_eq!(h.row(b), base.row(b));
        }
    }
}

#[test]
fn stage_two_eos_embedding_senses_block_a() {
    let params = tiny_params(6);
    let mut rng = ChaCha8Rng::seed_from_u64(60);
    let layout = SequenceLayout::parse_spec("A:4,EOS,B:2").unwrap();
    let mask = build_truncated(&layout).unwrap();
    let seq = random_sequence(&mut rng, &layout);
    let base = hidden_states(&params, &seq, &mask).unwrap().eos_embedding().unwrap();
    let mut other = seq.clone();
    other.items[1] = perturb(&mut rng, &seq.items[1]);
    let moved = hidden_states(&params, &other, &mask).unwrap().eos_embedding().unwrap();
    let delta: f64 = base.iter().zip(&moved).map(|(a, b)| (a - b).abs()).sum();
    assert!(delta > 0.0);
}

#[test]
fn outputs_respect_reachability() {
    let params = tiny_params(7);
    let mut rng = ChaCha8Rng::seed_from_u64(70);
    let cases = [
        SequenceLayout::new(vec![Role::TextA; 6]),
        SequenceLayout::parse_spec("A:2,EOS,B:3").unwrap(),
        SequenceLayout::parse_spec("A:1,T:2,EOS,B:2,P:2").unwrap(),
    ];
    for (ci, layout) in cases.iter().enumerate() {
        let mask = if ci == 0 { build_causal(layout.len()).unwrap() } else { build_truncated(layout).unwrap() };
        let reach = reachability(&mask, tiny_config().n_layers);
        let seq = random_sequence(&mut rng, layout);
        let base = hidden(&params, &seq, &mask);
        for j in 0..layout.len() {
            let mut other = seq.clone();
            other.items[j] = match &seq.items[j] {
                InputItem::Patch(v) => InputItem::Patch(vec![0.0; v.len()]),
                InputItem::Token(_) => InputItem::Token(PAD_ID),
            };
            let h = hidden(&params, &other, &mask);
            for i in 0..layout.len() {
                if !reach[i][j] {
                    assert_eq!(h.row(i), base.row(i), "case {ci}: input {j} leaked into {i}");
                }
            }
        }
    }
}

#[test]
fn packed_batch_matches_single_sequences() {
    let params = tiny_params(8);
    let mut rng = ChaCha8Rng::seed_from_u64(80);
    let la = SequenceLayout::parse_spec("A:2,EOS,B:2").unwrap();
    let lb = SequenceLayout::parse_spec("A:3,T:2,EOS").unwrap();
    let sa = random_sequence(&mut rng, &la);
    let sb = random_sequence(&mut rng, &lb);
    let ma = build_truncated(&la).unwrap();
    let mb = build_bidirectional(&lb);
    let mut g = Graph::new();
    let p = bind(&mut g, &params, false).unwrap();
    let h = forward_batch(&mut g, &p, &[&sa, &sb], &[&ma, &mb]).unwrap();
    let packed = g.value(h.hidden).clone();
    let single_a = hidden(&params, &sa, &ma);
    let single_b = hidden(&params, &sb, &mb);
    for i in 0..la.len() {
        for (x, y) in packed.row(h.row(0, i).unwrap()).iter().zip(single_a.row(i)) {
            assert!((x - y).abs() < 1e-12);
        }
    }
    for i in 0..lb.len() {
        for (x, y) in packed.row(h.row(1, i).unwrap()).iter().zip(single_b.row(i)) {
            assert!((x - y).abs() < 1e-12);
        }
    }
    let eos = embed_many(&params, &[sa.clone(), sb.clone()], &[ma.clone(), mb.clone()], 2).unwrap();
    assert_eq!(eos.len(), 2);
    assert_eq!(eos[1].len(), 8);
}

#[test]
fn eos_extraction() {
    let params = tiny_params(9);
    let mut rng = ChaCha8Rng::seed_from_u64(90);
    let layout = SequenceLayout::parse_spec("A:4,T:1,EOS").unwrap();
    let seq = random_sequence(&mut rng, &layout);
    let mask = build_bidirectional(&layout);
    let hs = hidden_states(&params, &seq, &mask).unwrap();
    assert_eq!(hs.eos_embedding().unwrap(), hs.states.row(5).to_vec());
    let again = hidden_states(&params, &seq, &mask).unwrap();
    assert_eq!(hs.eos_embedding().unwrap(), again.eos_embedding().unwrap());
    let plain = SequenceLayout::new(vec![Role::TextA; 3]);
    let seq = random_sequence(&mut rng, &plain);
    let hs = hidden_states(&params, &seq, &build_bidirectional(&plain)).unwrap();
    assert_eq!(hs.eos_embedding(), Err(ModelError::EosCount(0)));
}

#[test]
fn heads_and_decoder_shapes() {
    let params = tiny_params(10);
    let mut rng = ChaCha8Rng::seed_from_u64(100);
    let layout = SequenceLayout::parse_spec("A:4,T:2").unwrap();
    let seq = random_sequence(&mut rng, &layout);
    let mut g = Graph::new();
    let p = bind(&mut g, &params, false).unwrap();
    let h = forward_batch(&mut g, &p, &[&seq], &[&build_bidirectional(&layout)]).unwrap();
    let logits = lm_logits(&mut g, &p, h.hidden, &[3]).unwrap();
    assert_eq!(g.shape(logits), &[1, 11]);
    assert!(g.value(logits).is_finite());
    assert!(matches!(lm_logits(&mut g, &p, h.hidden, &[6]), Err(ModelError::Position(6))));
    let empty = mae_decode(&mut g, &p, h.hidden, &[vec![]]).unwrap();
    assert_eq!(g.shape(empty), &[0, 3]);
    let rec = mae_decode(&mut g, &p, h.hidden, &[vec![0, 2]]).unwrap();
    assert_eq!(g.shape(rec), &[2, 3]);
    assert!(check_visual(&layout, &[0, 3]).is_ok());
    assert_eq!(check_visual(&layout, &[4]), Err(ModelError::NotVisual(4)));
    assert_eq!(check_visual(&layout, &[9]), Err(ModelError::Position(9)));
}

/// Reconstruction plus language loss over a mixed sequence, touching every
/// parameter group.
fn joint_loss(
    g: &mut Graph<f64>,
    cfg: &ModelConfig,
    names: &[String],
    vars: &[Var],
    seq: &EncodedSequence,
    mask: &AttentionMask,
) -> Result<Var, ModelError> {
    let p = BoundParams { vars: vars.to_vec(), config: cfg.clone() };
    assert_eq!(names.len(), vars.len());
    let h = forward_batch(g, &p, &[seq], &[mask])?;
    let logits = lm_logits(g, &p, h.hidden, &[1, 3, 4])?;
    let ce = g.cross_entropy_from_logits(logits, &[4, 7, 9])?;
    let rec = mae_decode(g, &p, h.hidden, &[vec![0, 2]])?;
    let truth = g.constant(Tensor::new(vec![2, 3], vec![0.3, -0.2, 0.5, 0.1, 0.9, -0.4])?)?;
    let mae = g.mse(rec, truth)?;
    let mae = g.scale(mae, 0.5)?;
    Ok(g.add(ce, mae)?)
}

#[test]
fn full_model_gradient_check() {
    let mut params = tiny_params(11);
    for name in ["mae.pixel_head", "mae.pixel_bias"] {
        let t = params.get_mut(name).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(111);
        for x in t.data_mut() {
            *x = rng.random_range(-0.5..0.5);
        }
    }
    let cfg = params.config().clone();
    let names = params.names().to_vec();
    let layout = SequenceLayout::parse_spec("A:3,T:3").unwrap();
    let seq = random_sequence(&mut ChaCha8Rng::seed_from_u64(112), &layout);
    let mask = build_bidirectional(&layout);
    let report = gradcheck::check(params.tensors(), 1e-5, 6, |g, vars| joint_loss(g, &cfg, &names, vars, &seq, &mask)).unwrap();
    assert!(report.max_rel_error <= 1e-4, "{report:?} at {}", names[report.worst.0]);
    assert!(report.checked > params.tensors().len() * 3);
}

fn permute_heads(params: &ModelParams, perm: &[usize]) -> ModelParams {
    let mut out = params.clone();
    let cfg = params.config().clone();
    let d = cfg.d_model;
    let dh = d / cfg.n_heads;
    let src_col = |c: usize| perm[c / dh] * dh + c % dh;
    for layer in 0..cfg.n_layers {
        let base = ModelParams::encoder_block(layer);
        for slot in [BlockSlot::Wq, BlockSlot::Wk, BlockSlot::Wv] {
            let src = &params.tensors()[base + slot as usize];
            let dst = &mut out.tensors_mut()[base + slot as usize];
            for r in 0..d {
                for c in 0..d {
                    dst.data_mut()[r * d + c] = src.data()[r * d + src_col(c)];
                }
            }
        }
        let src = &params.tensors()[base + BlockSlot::Wo as usize];
        let dst = &mut out.tensors_mut()[base + BlockSlot::Wo as usize];
        for r in 0..d {
            dst.data_mut()[r * d..(r + 1) * d].copy_from_slice(&src.data()[src_col(r) * d..(src_col(r) + 1) * d]);
        }
    }
    out
}

#[test]
fn head_permutation_preserves_outputs() {
    let mut cfg = tiny_config();
    cfg.n_heads = 4;
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut params = ModelParams::init(&cfg, &mut rng).unwrap();
    for t in params.tensors_mut() {
        for x in t.data_mut() {
            *x += rng.random_range(-0.3..0.3);
        }
    }
    let permuted = permute_heads(&params, &[2, 0, 3, 1]);
    assert_ne!(permuted, params);
    let layout = SequenceLayout::parse_spec("A:2,T:2,EOS,B:2").unwrap();
    let mask = build_truncated(&layout).unwrap();
    let seq = random_sequence(&mut ChaCha8Rng::seed_from_u64(120), &layout);
    let a = hidden(&params, &seq, &mask);
    let b = hidden(&permuted, &seq, &mask);
    for (x, y) in a.data().iter().zip(b.data()) {
        assert!((x - y).abs() < 1e-12);
    }
}

#[test]
fn frozen_params_carry_no_gradient() {
    let params = tiny_params(13);
    let layout = SequenceLayout::parse_spec("A:2,T:2").unwrap();
    let seq = random_sequence(&mut ChaCha8Rng::seed_from_u64(130), &layout);
    let mut g = Graph::new();
    let p = bind(&mut g, &params, false).unwrap();
    let h = forward_batch(&mut g, &p, &[&seq], &[&build_bidirectional(&layout)]).unwrap();
    let logits = lm_logits(&mut g, &p, h.hidden, &[0]).unwrap();
    let loss = g.cross_entropy_from_logits(logits, &[5]).unwrap();
    g.backward(loss).unwrap();
    assert!(p.vars().iter().all(|&v| g.grad(v).is_none()));
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let params = tiny_params(14);
    let mut buf = Vec::new();
    write_params(&mut buf, &params).unwrap();
    assert_eq!(&buf[..6], MAGIC);
    let back = read_params(&mut buf.as_slice()).unwrap();
    assert_eq!(back, params);
    let mut again = Vec::new();
    write_params(&mut again, &back).unwrap();
    assert_eq!(again, buf);

    let mut bad = buf.clone();
    bad[0] = b'X';
    assert!(matches!(read_params(&mut bad.as_slice()), Err(CheckpointError::BadMagic)));
    for cut in [3, 20, buf.len() / 2, buf.len() - 1] {
        assert!(matches!(read_params(&mut &buf[..cut]), Err(CheckpointError::Truncated)), "cut {cut}");
    }
}
