//! Convergence and trained-model checks, each a median over five seeds.

use cocoa::data::{bridged_input, generate_corpus, pair_input, text_query, CorpusSpec, Generator, MetaTask, Split, TrainingInstance, Vocab, DEFAULT_CODE_SEED};
use cocoa::eval::{attribute_recall, embed, eos_probe, median, Protocol, SeedRun};
use cocoa::mask::build_truncated;
use cocoa::masking::{blockb_mask, BLOCK_B_RATIO};
use cocoa::model::{bind, forward_batch, lm_logits, InputItem, ModelConfig, ModelParams, MASK_ID, RESERVED_TOKENS};
use cocoa::objectives::{cosine_sim, diagonal_gap, similarity_matrix};
use cocoa::pipeline::{begin_stage, load_checkpoint, save_checkpoint, train, StageConfig, TrainerState};
use cocoa::{rng, Graph};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

fn model() -> ModelConfig {
    ModelConfig { d_model: 32, n_layers: 2, n_heads: 2, vocab_size: Vocab::standard().len(), patch_dim: 12, max_seq: 48, mae_decoder_layers: 1 }
}

fn corpus(seed: u64, split: Split, counts: Vec<(MetaTask, usize)>) -> Vec<TrainingInstance> {
    let gen = Generator::new(DEFAULT_CODE_SEED).unwrap();
    generate_corpus(&gen, &CorpusSpec { root_seed: seed, split, counts, hard: false }).into_iter().map(|r| r.instance).collect()
}

fn mixed(seed: u64, n: usize) -> Vec<TrainingInstance> {
    corpus(seed, Split::Pretrain, vec![(MetaTask::Retrieval, n / 2), (MetaTask::Classification, n / 4), (MetaTask::Vqa, n - n / 2 - n / 4)])
}

fn run(cfg: StageConfig, init: Option<TrainerState>, data: &[TrainingInstance], steps: Option<u64>) -> TrainerState {
    let mut state = begin_stage(cfg, &model(), init, true).unwrap();
    train(&mut state, data, steps, &mut |_| {}).unwrap();
    state
}

fn stage(stage: u8, seed: u64, lr: f64, batch: usize, epochs: usize) -> StageConfig {
    StageConfig { learning_rate: lr, batch_size: batch, epochs, root_seed: seed, ..StageConfig::new(stage) }
}

#[test]
fn stage1_loss_falls_within_200_steps_from_a_uniform_start() {
    let mut drops = Vec::new();
    let mut initial = Vec::new();
    for seed in SEEDS {
        let data = mixed(seed, 1000);
        let s = run(stage(1, seed, 1e-3, 16, 4), None, &data, Some(200));
        assert_eq!(s.step, 200);
        let early: f64 = s.metrics[..10].iter().map(|m| m.loss.total).sum::<f64>() / 10.0;
        drops.push(s.metrics[199].loss.total - early);
        initial.push(s.metrics[0].loss.mntp);
    }
    assert!(median(&drops) < 0.0, "{drops:?}");
    let ln_v = (model().vocab_size as f64).ln();
    let m = median(&initial);
    assert!((m - ln_v).abs() <= 0.1 * ln_v, "initial mntp {m} vs ln V {ln_v}");
}

#[test]
fn stage3_loss_and_diagonal_gap_improve() {
    let protocol = Protocol::smoke();
    let mut drops = Vec::new();
    let mut windows: Vec<Vec<f64>> = Vec::new();
    for seed in SEEDS {
        let data = SeedRun::new(&protocol, seed, &mut |_| {}).unwrap().contrastive;
        let cfg = StageConfig { root_seed: seed, epochs: 100, ..protocol.stage3.clone() };
        let mut state = begin_stage(cfg, &protocol.model, None, true).unwrap();
        let mut trace = Vec::new();
        for step in 1..=100 {
            train(&mut state, &data, Some(step), &mut |_| {}).unwrap();
            trace.push(probe_gap(&state.params, &data));
        }
        let mean = |r: &[f64]| r.iter().sum::<f64>() / r.len() as f64;
        let losses: Vec<f64> = state.metrics.iter().map(|m| m.loss.total).collect();
        drops.push(mean(&losses[90..]) - mean(&losses[..10]));
        windows.push(trace.chunks(10).map(mean).collect());
    }
    assert!(median(&drops) < 0.0, "{drops:?}");
    let medians: Vec<f64> = (0..windows[0].len()).map(|k| median(&windows.iter().map(|w| w[k]).collect::<Vec<_>>())).collect();
    assert!(medians.windows(2).all(|w| w[1] >= w[0]), "{medians:?}");
}

/// Diagonal-minus-off-diagonal cosine gap on a fixed probe batch.
fn probe_gap(params: &ModelParams, probe: &[TrainingInstance]) -> f64 {
    let pairs: Vec<_> = probe.iter().map(|i| pair_input(i).unwrap()).collect();
    let q = embed(params, &pairs.iter().map(|p| p.query.clone()).collect::<Vec<_>>()).unwrap();
    let t = embed(params, &pairs.iter().map(|p| p.target.clone()).collect::<Vec<_>>()).unwrap();
    let mut g = Graph::new();
    let qv = g.constant(cocoa::Tensor::from_rows(&q).unwrap()).unwrap();
    let tv = g.constant(cocoa::Tensor::from_rows(&t).unwrap()).unwrap();
    let sims = similarity_matrix(&mut g, qv, tv).unwrap();
    diagonal_gap(g.value(sims))
}

fn caption_pairs(seed: u64, n: usize) -> Vec<TrainingInstance> {
    corpus(seed, Split::Eval, vec![(MetaTask::Retrieval, n)])
}

#[test]
fn one_contrastive_step_moves_patch_projection_and_token_embedding() {
    let data = caption_pairs(9, 8);
    let before = cocoa::pipeline::initial_params(&model(), 9).unwrap();
    let s = run(stage(3, 9, 1e-3, 8, 1), None, &data, Some(1));
    for idx in [ModelParams::PATCH_PROJ, ModelParams::TOKEN_EMBED] {
        assert_ne!(s.params.tensors()[idx], before.tensors()[idx], "{}", s.params.names()[idx]);
    }
}

#[test]
fn saved_trainer_files_round_trip_byte_for_byte() {
    let dir = tempfile::tempdir().unwrap();
    let s = run(stage(1, 4, 1e-3, 8, 1), None, &mixed(4, 24), None);
    let (a, b) = (dir.path().join("a.ckpt"), dir.path().join("b.ckpt"));
    save_checkpoint(&s, &a).unwrap();
    save_checkpoint(&load_checkpoint(&a).unwrap(), &b).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
}

/// Argmax accuracy of the shifted head on masked Block-B positions.
fn reconstruction_accuracy(params: &ModelParams, data: &[TrainingInstance], seed: u64) -> f64 {
    let (mut hits, mut total) = (0, 0);
    for (i, inst) in data.iter().enumerate() {
        let mut b = bridged_input(inst).unwrap();
        let plan = blockb_mask(b.block_b.clone(), BLOCK_B_RATIO, rng::derive_seed(seed, &[i as u64])).unwrap();
        let mut targets = Vec::new();
        for &p in &plan.positions {
            if let InputItem::Token(t) = std::mem::replace(&mut b.seq.items[p], InputItem::Token(MASK_ID)) {
                targets.push(t);
            }
        }
        let mask = build_truncated(&b.seq.layout).unwrap();
        let mut g = Graph::new();
        let p = bind(&mut g, params, false).unwrap();
        let h = forward_batch(&mut g, &p, &[&b.seq], &[&mask]).unwrap();
        let rows: Vec<usize> = plan.positions.iter().map(|&q| h.row(0, q - 1).unwrap()).collect();
        let logits = lm_logits(&mut g, &p, h.hidden, &rows).unwrap();
        let l = g.value(logits);
        for (r, &t) in targets.iter().enumerate() {
            let row = l.row(r);
            let best = (0..row.len()).fold(0, |b, k| if row[k] > row[b] { k } else { b });
            hits += usize::from(best == t);
            total += 1;
        }
    }
    hits as f64 / total as f64
}

#[test]
fn lm_head_overfits_ten_samples() {
    let data = mixed(5, 10);
    let s = run(stage(2, 5, 3e-3, 10, 300), None, &data, None);
    let acc = reconstruction_accuracy(&s.params, &data, 77);
    assert!(acc >= 0.9, "accuracy {acc}");
}

fn bridge_model(seed: u64) -> ModelParams {
    let data = corpus(seed, Split::Pretrain, vec![(MetaTask::Retrieval, 2000)]);
    run(stage(2, seed, 1e-3, 32, 30), None, &data, None).params
}

fn probe_recall(params: &ModelParams, gen: &Generator, seeds: impl Iterator<Item = u64>) -> f64 {
    let mut total = 0;
    let mut n = 0;
    for s in seeds {
        let img = gen.random_image(&mut rng::stream(s, &[0]), false);
        let patches = gen.codes.render(&img, rng::derive_seed(s, &[1]));
        let tokens = eos_probe(params, &patches, 6).unwrap();
        total += attribute_recall(&gen.vocab, &tokens, &img);
        n += 1;
    }
    total as f64 / n as f64
}

#[test]
fn eos_probe_names_true_attributes_only_after_training() {
    let gen = Generator::new(DEFAULT_CODE_SEED).unwrap();
    let mut trained = Vec::new();
    let mut untrained = Vec::new();
    for seed in SEEDS {
        trained.push(probe_recall(&bridge_model(seed), &gen, 1000..1040));
        untrained.push(probe_recall(&cocoa::pipeline::initial_params(&model(), seed).unwrap(), &gen, 1000..1040));
    }
    // Chance: six word tokens drawn uniformly.
    let mut r = ChaCha8Rng::seed_from_u64(1);
    let chance: Vec<f64> = (0..2000)
        .map(|k| {
            let img = gen.random_image(&mut rng::stream(5000 + k, &[0]), false);
            let tokens: Vec<usize> = (0..6).map(|_| r.random_range(RESERVED_TOKENS..gen.vocab.len())).collect();
            attribute_recall(&gen.vocab, &tokens, &img) as f64
        })
        .collect();
    let mean = chance.iter().sum::<f64>() / chance.len() as f64;
    let sd = (chance.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / chance.len() as f64).sqrt();
    assert!(median(&trained) >= 2.0, "trained recall {trained:?}");
    // Untrained decoding is no better than chance (40 images per seed).
    let u = median(&untrained);
    assert!(u <= mean + 3.0 * sd / 40f64.sqrt(), "untrained recall {untrained:?}, chance {mean:.3} ± {sd:.3}");
}

#[test]
fn trained_image_embeddings_prefer_their_caption() {
    let mut margins = Vec::new();
    for seed in SEEDS {
        let warm = mixed(seed, 600);
        let mut s = run(stage(1, seed, 3e-4, 16, 1), None, &warm, None);
        s = run(stage(2, seed, 3e-4, 16, 3), Some(s), &warm, None);
        s = run(stage(3, seed, 3e-4, 16, 3), Some(s), &corpus(seed, Split::Contrastive, vec![(MetaTask::Retrieval, 600)]), None);
        let eval = caption_pairs(seed + 100, 96);
        let images = embed(&s.params, &eval.iter().map(|i| pair_input(i).unwrap().query).collect::<Vec<_>>()).unwrap();
        let captions = embed(&s.params, &eval.iter().map(|i| text_query(&i.block_b_text)).collect::<Vec<_>>()).unwrap();
        let mut per_query = Vec::new();
        for (q, img) in images.iter().enumerate() {
            let own = cosine_sim(img, &captions[q]).unwrap();
            let others: Vec<f64> = (1..=31).map(|k| cosine_sim(img, &captions[(q + k) % eval.len()]).unwrap()).collect();
            per_query.push(own - others.iter().sum::<f64>() / 31.0);
        }
        margins.push(per_query.iter().sum::<f64>() / per_query.len() as f64);
    }
    assert!(median(&margins) > 0.0, "{margins:?}");
}
