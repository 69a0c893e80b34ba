use std::collections::HashSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;

fn kv(pairs: usize, queries: usize) -> TaskSpec {
    TaskSpec::kv_recall(pairs, queries, 32, 16, 64, 48).unwrap()
}

fn multihop(chains: usize, hops: usize) -> TaskSpec {
    TaskSpec::new(
        TaskKind::MultiHopRecall {
            chains,
            hops,
            queries: 3,
            key_vocab: 32,
            value_vocab: 16,
        },
        64,
        48,
        0,
    )
    .unwrap()
}

fn lm(order: usize, repeat_prob: f64) -> TaskSpec {
    TaskSpec::new(
        TaskKind::GenericLm {
            alphabet: 24,
            order,
            zipf_exponent: 1.1,
            repeat_prob,
            repeat_len: 6,
        },
        32,
        64,
        5,
    )
    .unwrap()
}

#[test]
fn infeasible_specs_rejected_at_construction() {
    assert!(TaskSpec::kv_recall(20, 5, 32, 16, 64, 48).is_err());
    assert!(TaskSpec::kv_recall(4, 1, 60, 16, 64, 48).is_err());
    assert!(TaskSpec::kv_recall(40, 1, 32, 16, 64, 200).is_err());
    assert!(TaskSpec::local_copy(48, 10, 64, 48).is_err());
    assert!(TaskSpec::local_copy(0, 10, 64, 48).is_err());
    let hop0 = TaskKind::MultiHopRecall {
        chains: 1,
        hops: 0,
        queries: 1,
        key_vocab: 8,
        value_vocab: 8,
    };
    assert!(matches!(TaskSpec::new(hop0, 64, 48, 0), Err(Error::InfeasibleTask(_))));
}

#[test]
fn kv_layout_and_labels() {
    let spec = kv(6, 4);
    let stream = BatchStream::single(&spec, 8, 1, Partition::Train).unwrap();
    let b = stream.batch(0);
    b.validate(64).unwrap();
    assert_eq!(b.num_queries(), 8 * 4);
    for s in 0..b.batch {
        let seq = b.sequence(s);
        let pad = 48 - 12 - 8;
        assert!(seq[..pad].iter().all(|&t| t == PAD));
        let keys: HashSet<usize> = seq[pad..pad + 12].iter().step_by(2).copied().collect();
        assert_eq!(keys.len(), 6, "keys distinct within a sequence");
        assert!(keys.iter().all(|&k| (2..34).contains(&k)));
        assert!(seq[pad + 1..pad + 12].iter().step_by(2).all(|&v| (34..50).contains(&v)));
    }
    assert_eq!(recall_oracle(&b), b.targets);
}

#[test]
fn single_pair_answer_is_its_value() {
    let spec = kv(1, 3);
    let b = BatchStream::single(&spec, 4, 2, Partition::Train).unwrap().batch(0);
    for s in 0..4 {
        let seq = b.sequence(s);
        let value = seq[48 - 6 - 1] as i64;
        assert!(b.sequence_targets(s).iter().filter(|&&t| t >= 0).all(|&t| t == value));
    }
}

#[test]
fn shuffling_pairs_keeps_labels() {
    let spec = kv(5, 5);
    let mut b = BatchStream::single(&spec, 6, 3, Partition::Train).unwrap().batch(0);
    let before = b.targets.clone();
    let pad = 48 - 10 - 10;
    let mut r = ChaCha8Rng::seed_from_u64(9);
    for s in 0..b.batch {
        let seq = &mut b.tokens[s * 48..(s + 1) * 48];
        let mut pairs: Vec<[usize; 2]> = seq[pad..pad + 10].chunks(2).map(|c| [c[0], c[1]]).collect();
        pairs.shuffle(&mut r);
        seq[pad..pad + 10].copy_from_slice(&pairs.concat());
    }
    assert_eq!(recall_oracle(&b), before);
}

#[test]
fn one_hop_chain_is_key_value_recall() {
    let a = BatchStream::single(&multihop(6, 1), 5, 4, Partition::Train).unwrap().batch(3);
    let mut spec = kv(6, 3);
    spec.kind = TaskKind::KvRecall {
        pairs: 6,
        queries: 3,
        key_vocab: 32,
        value_vocab: 16,
    };
    let b = BatchStream::single(&spec, 5, 4, Partition::Train).unwrap().batch(3);
    assert_eq!(a, b);
}

#[test]
fn chain_following_oracle_agrees() {
    for hops in 1..4 {
        let b = BatchStream::single(&multihop(4, hops), 16, 5, Partition::Train).unwrap().batch(0);
        b.validate(64).unwrap();
        assert_eq!(recall_oracle(&b), b.targets);
    }
}

#[test]
fn hand_resolved_two_hop_chain() {
    // Pairs (5 -> 9), (9 -> 40); query 5 must resolve to 40.
    let tokens = vec![PAD, 9, 40, 5, 9, SEP, 5];
    let batch = TaskBatch {
        batch: 1,
        seq_len: 7,
        targets: vec![-1, -1, -1, -1, -1, -1, 40],
        query_mask: vec![false, false, false, false, false, false, true],
        tokens,
    };
    assert_eq!(recall_oracle(&batch), batch.targets);
}

#[test]
fn local_copy_labels() {
    for w in [1, 4] {
        let spec = TaskSpec::local_copy(w, 30, 64, 40).unwrap();
        let b = BatchStream::single(&spec, 4, 6, Partition::Train).unwrap().batch(0);
        b.validate(64).unwrap();
        for s in 0..4 {
            let (seq, tg) = (b.sequence(s), b.sequence_targets(s));
            for t in 0..40 {
                if t < w {
                    assert_eq!(tg[t], -1);
                } else {
                    assert_eq!(tg[t], seq[t - w] as i64);
                }
            }
        }
    }
}

#[test]
fn streams_are_deterministic_and_partitioned() {
    let mix = [(kv(4, 4), 1.0), (TaskSpec::local_copy(2, 40, 64, 48).unwrap(), 1.0)];
    let a = BatchStream::new(&mix, 4, 11, Partition::Train).unwrap();
    let b = BatchStream::new(&mix, 4, 11, Partition::Train).unwrap();
    assert_eq!(a.batch(7), b.batch(7));
    let held = BatchStream::new(&mix, 4, 11, Partition::Heldout).unwrap();
    let train: HashSet<TaskBatch> = (0..1000).map(|i| a.batch(i)).collect();
    assert!((0..1000).all(|i| !train.contains(&held.batch(i))));
    assert!(BatchStream::new(&[(kv(4, 4), 1.0), (lm(1, 0.0), 1.0)], 2, 0, Partition::Train).is_err());
}

#[test]
fn markov_unigram_entropy_matches_stationary_law() {
    let spec = lm(1, 0.0);
    let g = Generator::new(&spec).unwrap();
    let stream = BatchStream::single(&spec, 64, 1, Partition::Train).unwrap();
    let mut counts = vec![0usize; 32];
    let mut n = 0;
    let mut i = 0;
    while n < 1_000_000 {
        for &t in &stream.batch(i).tokens {
            counts[t] += 1;
            n += 1;
        }
        i += 1;
    }
    let emp: f64 = -counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n as f64;
            p * p.ln()
        })
        .sum::<f64>();
    let exact = g.markov().unwrap().unigram_entropy();
    assert!((emp - exact).abs() / exact < 0.05, "empirical {emp}, analytic {exact}");
}

#[test]
fn markov_perplexity_matches_conditional_entropy() {
    for order in [1, 2] {
        let spec = lm(order, 0.0);
        let g = Generator::new(&spec).unwrap();
        let lm = g.markov().unwrap();
        let stream = BatchStream::single(&spec, 32, 2, Partition::Heldout).unwrap();
        let batches: Vec<TaskBatch> = (0..4).map(|i| stream.batch(i)).collect();
        let ppl = eval_perplexity(lm, &batches).unwrap();
        let expect = lm.conditional_entropy().exp();
        assert!((ppl - expect).abs() / expect < 0.05, "order {order}: {ppl} vs {expect}");
    }
}

#[test]
fn repeats_copy_earlier_spans() {
    let spec = lm(1, 0.05);
    let b = BatchStream::single(&spec, 16, 3, Partition::Train).unwrap().batch(0);
    b.validate(32).unwrap();
    assert_eq!(b.num_queries(), 16 * 63);
}

struct Constant {
    vocab: usize,
}

impl LogitSource for Constant {
    fn vocab(&self) -> usize {
        self.vocab
    }

    fn logits(&self, tokens: &[usize], _batch: usize) -> Result<Tensor> {
        Ok(Tensor::zeros(&[tokens.len(), self.vocab]))
    }
}

struct Oracle;

impl LogitSource for Oracle {
    fn vocab(&self) -> usize {
        64
    }

    fn logits(&self, tokens: &[usize], batch: usize) -> Result<Tensor> {
        let seq_len = tokens.len() / batch;
        let tb = TaskBatch {
            batch,
            seq_len,
            tokens: tokens.to_vec(),
            targets: vec![-1; tokens.len()],
            query_mask: vec![false; tokens.len()],
        };
        let answers = recall_oracle(&tb);
        let mut out = Tensor::zeros(&[tokens.len(), 64]);
        for (i, &a) in answers.iter().enumerate() {
            if a >= 0 {
                out.set(&[i, a as usize], 1.0);
            }
        }
        Ok(out)
    }
}

#[test]
fn accuracy_of_oracle_and_constant_models() {
    let spec = kv(6, 6);
    let stream = BatchStream::single(&spec, 32, 4, Partition::Heldout).unwrap();
    let batches: Vec<TaskBatch> = (0..2).map(|i| stream.batch(i)).collect();
    assert_eq!(eval_accuracy(&Oracle, &batches).unwrap(), 1.0);
    // All-zero logits pick id 0, never a value.
    assert_eq!(eval_accuracy(&Constant { vocab: 64 }, &batches).unwrap(), 0.0);
    let uniform = eval_perplexity(&Constant { vocab: 64 }, &batches).unwrap();
    assert!((uniform - 64.0).abs() < 1e-9);
    let empty = TaskBatch {
        batch: 1,
        seq_len: 2,
        tokens: vec![2, 3],
        targets: vec![-1, -1],
        query_mask: vec![false, false],
    };
    assert!(eval_accuracy(&Oracle, &[empty]).is_err());
}

#[test]
fn jsonl_export_has_one_line_per_sequence() {
    let b = BatchStream::single(&kv(2, 2), 3, 0, Partition::Train).unwrap().batch(0);
    let mut buf = Vec::new();
    b.write_jsonl(&mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 3);
    let v: serde_json::Value = serde_json::from_str(lines[1]).unwrap();
    assert_eq!(v["tokens"].as_array().unwrap().len(), 48);
}

#[test]
fn byte_corpus_split_is_disjoint_and_stable() {
    let text: Vec<u8> = (0..20_000u32).map(|i| (i * 7919 % 251) as u8).collect();
    let a = ByteCorpus::from_bytes(&text, 31, 100).unwrap();
    let b = ByteCorpus::from_bytes(&text, 31, 100).unwrap();
    assert_eq!(a.len(Partition::Train) + a.len(Partition::Heldout), 20_000 / 32);
    assert!(a.len(Partition::Heldout) > 0);
    let batch = a.batch(Partition::Train, 4, 0).unwrap();
    assert_eq!(batch, b.batch(Partition::Train, 4, 0).unwrap());
    batch.validate(256).unwrap();
    assert_eq!(batch.targets[0], batch.tokens[1] as i64);
    assert!(ByteCorpus::from_bytes(b"short", 31, 100).is_err());
}

#[test]
fn task_spec_round_trips_through_toml_like_json() {
    let spec = kv(3, 2);
    let json = serde_json::to_string(&spec).unwrap();
    assert!(json.contains(r#""kind":"kv_recall""#));
    let back: TaskSpec = serde_json::from_str(&json).unwrap();
    assert_eq!(back, spec);
}

mod props {
    use proptest::prelude::*;

    use super::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn recall_labels_follow_the_stored_pairs(pairs in 1usize..10, queries in 1usize..6, seed in 0u64..10_000, step in 0u64..50) {
            let spec = TaskSpec::kv_recall(pairs, queries, 32, 16, 64, 48).unwrap();
            let b = BatchStream::single(&spec, 3, seed, Partition::Train).unwrap().batch(step);
            b.validate(64).unwrap();
            prop_assert_eq!(b.num_queries(), 3 * queries);
            prop_assert_eq!(recall_oracle(&b), b.targets.clone());
        }

        #[test]
        fn copy_labels_point_back_one_window(w in 1usize..12, seed in 0u64..10_000) {
            let spec = TaskSpec::local_copy(w, 30, 64, 40).unwrap();
            let b = BatchStream::single(&spec, 2, seed, Partition::Heldout).unwrap().batch(0);
            b.validate(64).unwrap();
            for s in 0..2 {
                let (seq, tg) = (b.sequence(s), b.sequence_targets(s));
                for t in 0..40 {
                    let want = if t < w { -1 } else { seq[t - w] as i64 };
                    prop_assert_eq!(tg[t], want);
                }
            }
        }

        #[test]
        fn batches_are_pure_functions_of_the_step(seed in 0u64..10_000, step in 0u64..1000) {
            let mix = [(kv(4, 4), 1.0), (TaskSpec::local_copy(2, 40, 64, 48).unwrap(), 1.0)];
            let a = BatchStream::new(&mix, 2, seed, Partition::Train).unwrap();
            let b = BatchStream::new(&mix, 2, seed, Partition::Train).unwrap();
            prop_assert_eq!(a.batch(step), b.batch(step));
        }
    }
}
