mod common;

use cocoa::data::{corpus_to_string, generate_corpus, parse_corpus, CorpusSpec, Generator, MetaTask, Split, DEFAULT_CODE_SEED};
use cocoa::eval::{build_pool, precision_from_embeddings};
use cocoa::mask::{build_truncated, verify_isolation, Role};
use cocoa::masking::{blockb_mask, mntp_mask, round_half_up};
use cocoa::model::{hidden_states, read_params, write_params, InputItem};
use cocoa::objectives::infonce;
use cocoa::pipeline::{initial_params, read_state, write_state, StageConfig, TrainerState};
use cocoa::{Graph, Tensor};
use common::{block_a_roles, layout, oracle_truncated, random_items, random_params, tiny_config};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn layouts() -> impl Strategy<Value = (usize, u32, usize, usize)> {
    (0usize..=12, any::<u32>(), 0usize..=12, 0usize..=4)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn truncated_mask_matches_rule_oracle((a, bits, b, pad) in layouts()) {
        let l = layout(&block_a_roles(a, bits), b, pad);
        let m = build_truncated(&l).unwrap();
        let want = oracle_truncated(l.roles());
        for (i, row) in want.iter().enumerate() {
            for (j, &w) in row.iter().enumerate() {
                prop_assert_eq!(m.allowed(i, j), w, "({}, {}) in {:?}", i, j, l.roles());
            }
        }
    }

    #[test]
    fn isolation_holds_and_any_leak_is_caught((a, bits, b, pad) in layouts(), k in 1usize..=3, pick in any::<u64>()) {
        let l = layout(&block_a_roles(a, bits), b, pad);
        let m = build_truncated(&l).unwrap();
        prop_assert!(verify_isolation(&m, &l, k).unwrap().passed);
        if a > 0 && b > 0 {
            let (i, j) = if pick % 2 == 0 {
                ((pick / 2) as usize % a, a + 1 + (pick / 7) as usize % b)
            } else {
                (a + 1 + (pick / 2) as usize % b, (pick / 7) as usize % a)
            };
            let mut faulty = m.clone();
            faulty.set(i, j, true);
            let report = verify_isolation(&faulty, &l, k).unwrap();
            prop_assert!(!report.passed);
            let path = report.violation.unwrap();
            for w in path.windows(2) {
                prop_assert!(faulty.allowed(w[1], w[0]));
            }
        }
    }

    #[test]
    fn block_b_count_law(n in 1usize..=64, seed in any::<u64>()) {
        let plan = blockb_mask(5..5 + n, 0.7, seed).unwrap();
        let want = if n < 4 { n } else { round_half_up(0.7, n) };
        prop_assert_eq!(plan.positions.len(), want);
        prop_assert!(plan.positions.windows(2).all(|w| w[0] < w[1]));
        prop_assert!(plan.positions.iter().all(|p| (5..5 + n).contains(p)));
    }

    #[test]
    fn text_masks_never_touch_position_zero(start in 0usize..=2, n in 2usize..=40, seed in any::<u64>()) {
        let plan = mntp_mask(start..start + n, 0.2, seed).unwrap();
        prop_assert_eq!(plan.positions.len(), round_half_up(0.2, n).max(1));
        prop_assert!(plan.positions.iter().all(|&p| p > 0 && (start..start + n).contains(&p)));
        prop_assert_eq!(plan, mntp_mask(start..start + n, 0.2, seed).unwrap());
    }

    #[test]
    fn infonce_is_nonnegative_and_invariant_to_pair_order(seed in any::<u64>(), b in 2usize..=8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let q = Tensor::randn(&[b, 5], 1.0, &mut rng);
        let t = Tensor::randn(&[b, 5], 1.0, &mut rng);
        let loss = |q: &Tensor, t: &Tensor| {
            let mut g = Graph::new();
            let (qv, tv) = (g.constant(q.clone()).unwrap(), g.constant(t.clone()).unwrap());
            let l = infonce(&mut g, qv, tv, 0.1).unwrap().var.unwrap();
            g.value(l).data()[0]
        };
        let base = loss(&q, &t);
        prop_assert!(base >= 0.0);
        let rev = |x: &Tensor| Tensor::from_rows(&(0..b).rev().map(|r| x.row(r).to_vec()).collect::<Vec<_>>()).unwrap();
        prop_assert!((loss(&rev(&q), &rev(&t)) - base).abs() < 1e-12);
    }

    #[test]
    fn permuting_choices_keeps_precision(seed in any::<u64>()) {
        let gen = Generator::new(DEFAULT_CODE_SEED).unwrap();
        let spec = CorpusSpec { root_seed: seed, split: Split::Eval, counts: vec![(MetaTask::Retrieval, 20)], hard: false };
        let items: Vec<_> = generate_corpus(&gen, &spec).into_iter().map(|r| r.instance).collect();
        let pool = build_pool(MetaTask::Retrieval, &items, &gen.vocab, 8, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let q: Vec<Vec<f64>> = (0..pool.len()).map(|_| Tensor::randn(&[4], 1.0, &mut rng).data().to_vec()).collect();
        let bank: Vec<Vec<f64>> = (0..pool.candidates.len()).map(|_| Tensor::randn(&[4], 1.0, &mut rng).data().to_vec()).collect();
        let base = precision_from_embeddings(&pool, &q, &bank).unwrap();
        let mut shuffled = pool.clone();
        for (choices, gold) in shuffled.choices.iter_mut().zip(shuffled.gold.iter_mut()) {
            let g = choices[*gold];
            choices.rotate_left(3);
            *gold = choices.iter().position(|&c| c == g).unwrap();
        }
        prop_assert_eq!(precision_from_embeddings(&shuffled, &q, &bank).unwrap(), base);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn block_a_states_ignore_block_b(a in 1usize..=5, bits in any::<u32>(), b in 1usize..=5, seed in any::<u64>()) {
        let cfg = tiny_config(2);
        let params = random_params(&cfg, seed);
        let l = layout(&block_a_roles(a, bits), b, 1);
        let mask = build_truncated(&l).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
        let seq = random_items(&l, &cfg, &mut rng);
        let mut other = seq.clone();
        for p in a + 1..a + 1 + b {
            other.items[p] = InputItem::Token(3 + (seed as usize + p) % (cfg.vocab_size - 3));
        }
        let h0 = hidden_states(&params, &seq, &mask).unwrap();
        let h1 = hidden_states(&params, &other, &mask).unwrap();
        for p in 0..=a {
            prop_assert_eq!(h0.states.row(p), h1.states.row(p));
        }
    }

    #[test]
    fn corpus_text_round_trips(seed in any::<u64>(), hard in any::<bool>()) {
        let gen = Generator::new(DEFAULT_CODE_SEED).unwrap();
        let counts = vec![(MetaTask::Retrieval, 3), (MetaTask::Classification, 3), (MetaTask::Vqa, 3)];
        let records = generate_corpus(&gen, &CorpusSpec { root_seed: seed, split: Split::Pretrain, counts, hard });
        let text = corpus_to_string(&records);
        let back = parse_corpus(&text).unwrap();
        prop_assert_eq!(&back, &records);
        prop_assert_eq!(corpus_to_string(&back), text);
    }

    #[test]
    fn checkpoints_round_trip_bit_exactly(seed in any::<u64>(), stage in 1u8..=3) {
        let cfg = tiny_config(1);
        let params = initial_params(&cfg, seed).unwrap();
        let mut bytes = Vec::new();
        write_params(&mut bytes, &params).unwrap();
        let back = read_params(&mut bytes.as_slice()).unwrap();
        let mut again = Vec::new();
        write_params(&mut again, &back).unwrap();
        prop_assert_eq!(&bytes, &again);

        let state = TrainerState { step: seed % 1000, stage, ..TrainerState::fresh(params, StageConfig { root_seed: seed, ..StageConfig::new(stage) }) };
        let mut s1 = Vec::new();
        write_state(&mut s1, &state).unwrap();
        let restored = read_state(&mut s1.as_slice()).unwrap();
        let mut s2 = Vec::new();
        write_state(&mut s2, &restored).unwrap();
        prop_assert_eq!(s1, s2);
        prop_assert_eq!(restored.step, state.step);
        prop_assert_eq!(restored.config, state.config);
    }
}

#[test]
fn truncated_layouts_with_text_and_visual_block_a() {
    let l = layout(&[Role::VisualA, Role::TextA, Role::VisualA], 2, 0);
    let m = build_truncated(&l).unwrap();
    let want = oracle_truncated(l.roles());
    assert!((0..l.len()).all(|i| (0..l.len()).all(|j| m.allowed(i, j) == want[i][j])));
}
