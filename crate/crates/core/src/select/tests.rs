use std::collections::BTreeSet;

use proptest::prelude::*;
use rand::seq::index;
use rand::SeedableRng;

use super::*;

/// Published greedy-addition ranking of the 36-layer teacher.
const GA_S2_QWEN: [usize; 36] = [
    20, 32, 33, 21, 22, 25, 17, 19, 5, 31, 4, 3, 10, 30, 26, 29, 27, 13, 0, 28, 15, 23, 6, 12, 24, 7, 18, 9, 34, 14,
    11, 8, 16, 35, 2, 1,
];

fn set(xs: &[usize]) -> BTreeSet<usize> {
    xs.iter().copied().collect()
}

fn table(scores: Vec<f64>) -> ImportanceTable {
    ImportanceTable::new(scores, Metric::S2Kl, Direction::Ga, MixerKind::Gla, 0).unwrap()
}

#[test]
fn jaccard_thresholds() {
    for (k, expect) in [(9usize, 0.80), (7, 0.75)] {
        let a: BTreeSet<usize> = (0..k).collect();
        let mut b = a.clone();
        b.remove(&0);
        b.insert(100);
        assert_eq!(jaccard(&a, &b), expect);
        assert!(within_one_swap(&b, &a, k));
    }
    let a: BTreeSet<usize> = (0..9).collect();
    let b: BTreeSet<usize> = (2..11).collect();
    assert_eq!(jaccard(&a, &b), 7.0 / 11.0);
    assert!(!within_one_swap(&b, &a, 9));
    assert_eq!(jaccard(&BTreeSet::new(), &BTreeSet::new()), 1.0);
    assert_eq!(jaccard(&set(&[1, 2]), &set(&[3])), 0.0);
}

#[test]
fn adjacency_of_published_selection() {
    let top9 = set(&GA_S2_QWEN[..9]);
    assert_eq!(adjacency_index(&top9, 36).unwrap(), 4);
    assert_eq!(expected_adjacency(9, 36).unwrap(), 2.0);
    assert!((expected_adjacency(12, 36).unwrap() - 3.67).abs() < 0.005);
    assert!(adjacency_index(&set(&[36]), 36).is_err());
}

#[test]
fn expected_adjacency_matches_sampling() {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
    let n = 100_000;
    let total: usize = (0..n)
        .map(|_| {
            let s: BTreeSet<usize> = index::sample(&mut rng, 36, 9).into_iter().collect();
            adjacency_index(&s, 36).unwrap()
        })
        .sum();
    let mean = total as f64 / n as f64;
    assert!((mean - 2.0).abs() <= 0.02 * 2.0, "{mean}");
}

#[test]
fn published_ranking_prefixes() {
    let t = table(scores_from_ranking(&GA_S2_QWEN).unwrap());
    assert_eq!(t.ranking(), GA_S2_QWEN.to_vec());
    for k in [0, 5, 9, 12, 18, 36] {
        let top = select_top_k(&t, k).unwrap();
        assert_eq!(top, set(&GA_S2_QWEN[..k]));
        let reg = distance_regularized_select(&t, k, 0.0, 1.0).unwrap();
        assert_eq!(reg, GA_S2_QWEN[..k].to_vec());
    }
    assert_eq!(select_top_k(&t, 9).unwrap(), set(&[20, 32, 33, 21, 22, 25, 17, 19, 5]));
    assert!(select_top_k(&t, 37).is_err());
}

#[test]
fn ties_go_to_lower_index() {
    assert_eq!(rank_by_score(&[1.0, 2.0, 2.0, 0.0]), vec![1, 2, 0, 3]);
    assert!(scores_from_ranking(&[0, 0, 1]).is_err());
}

#[test]
fn uniform_placement() {
    assert_eq!(uniform_select(36, 9).unwrap(), set(&[2, 6, 10, 14, 18, 22, 26, 30, 34]));
    assert_eq!(uniform_select(36, 1).unwrap(), set(&[18]));
    assert_eq!(uniform_select(7, 1).unwrap(), set(&[3]));
    assert_eq!(uniform_select(6, 6).unwrap(), (0..6).collect());
    assert!(uniform_select(6, 7).is_err());
}

#[test]
fn average_rank_tie_rule() {
    assert_eq!(avg_rank_select(&[0, 1, 2, 3], &[3, 2, 1, 0], 2).unwrap(), set(&[0, 1]));
    assert!(avg_rank_select(&[0, 1, 1, 3], &[3, 2, 1, 0], 2).is_err());
}

#[test]
fn distance_penalty_threshold() {
    // Layers 0 and 1 tie on score; layer 30 trails by `gap`. The second pick
    // moves to the distant layer once lambda / e exceeds the gap.
    let gap = 0.1;
    let mut scores = vec![0.0; 31];
    scores[0] = 1.0;
    scores[1] = 1.0;
    scores[30] = 1.0 - gap;
    let t = table(scores);
    let lambda_star = gap * std::f64::consts::E;
    let near = distance_regularized_select(&t, 2, lambda_star * 0.99, 1.0).unwrap();
    let far = distance_regularized_select(&t, 2, lambda_star * 1.01, 1.0).unwrap();
    assert_eq!(near, vec![0, 1]);
    assert_eq!(far, vec![0, 30]);
    assert!(distance_regularized_select(&t, 2, -1.0, 1.0).is_err());
    assert!(distance_regularized_select(&t, 2, 1.0, 0.0).is_err());
}

#[test]
fn selection_records_adjacency() {
    let s = Selection::new("ga-s2", 36, GA_S2_QWEN[..9].to_vec()).unwrap();
    assert_eq!((s.k, s.adjacency, s.expected_adjacency), (9, 4, 2.0));
    assert!(Selection::new("x", 6, vec![1, 1]).is_err());
}

#[test]
fn importance_table_csv() {
    let t = table(vec![0.5, -1.0]);
    let mut buf = Vec::new();
    t.write_csv(&mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert_eq!(text.lines().next().unwrap(), "layer,score,metric,direction,probe,seed");
    assert_eq!(text.lines().nth(2).unwrap(), "1,-1.0,s2-kl,ga,gla,0");
    assert!(ImportanceTable::new(vec![f64::NAN], Metric::S2Kl, Direction::Ga, MixerKind::Gla, 0).is_err());
}

/// First step at which the rule holds, recomputed from scratch on every
/// window.
fn brute_force_stop(sets: &[BTreeSet<usize>], k: usize, r: usize, mode: EarlyStopMode) -> Option<usize> {
    for t in 0..sets.len() {
        if t + 1 < r {
            continue;
        }
        let w = &sets[t + 1 - r..=t];
        let mut union = BTreeSet::new();
        for s in w {
            union.extend(s.iter().copied());
        }
        let union_ok = union.len() <= k + 1;
        let hold = match mode {
            EarlyStopMode::Standard => {
                let backbone = union.iter().filter(|l| w.iter().all(|s| s.contains(l))).count();
                let (mut num, mut pairs) = (0.0, 0.0);
                for i in 0..r {
                    for j in i + 1..r {
                        let inter = w[i].iter().filter(|l| w[j].contains(l)).count() as f64;
                        num += inter / ((w[i].len() + w[j].len()) as f64 - inter);
                        pairs += 1.0;
                    }
                }
                num / pairs >= 0.9 && backbone + 1 >= k && union_ok
            }
            EarlyStopMode::UnionChange => union_ok && t > 0 && sets[t] != sets[t - 1],
        };
        if hold {
            return Some(t);
        }
    }
    None
}

fn stream(sets: &[BTreeSet<usize>]) -> Vec<SelectionSnapshot> {
    sets.iter()
        .enumerate()
        .map(|(i, s)| SelectionSnapshot { step: i, set: s.clone() })
        .collect()
}

fn swap_last(base: &BTreeSet<usize>, last: usize) -> BTreeSet<usize> {
    let mut s = base.clone();
    let top = *s.iter().next_back().unwrap();
    s.remove(&top);
    s.insert(last);
    s
}

#[test]
fn constant_stream_fires_at_tenth_snapshot() {
    let s = set(&[0, 3, 5, 8, 11, 14, 20, 25, 30]);
    let sets = vec![s; 15];
    let (trace, fired) = early_stop_step(&StabilityConfig::new(9), &stream(&sets)).unwrap();
    assert_eq!(fired, Some(9));
    assert_eq!(brute_force_stop(&sets, 9, 10, EarlyStopMode::Standard), Some(9));
    assert!(trace[8].jaccard_mean.is_none());
    assert_eq!(trace[9].jaccard_mean, Some(1.0));
    assert_eq!(trace.iter().filter(|d| d.fired).count(), 1);
}

#[test]
fn alternation_and_rotation() {
    let base = set(&[0, 3, 5, 8, 11, 14, 20, 25, 30]);
    let (a, b, c) = (swap_last(&base, 31), swap_last(&base, 32), swap_last(&base, 33));
    // Noise first, then A A B repeating.
    let mut sets: Vec<BTreeSet<usize>> = (0..6).map(|i| (i * 2..i * 2 + 9).collect()).collect();
    for i in 0..30 {
        sets.push(if i % 3 == 2 { b.clone() } else { a.clone() });
    }
    let expect = brute_force_stop(&sets, 9, 10, EarlyStopMode::Standard);
    assert!(expect.is_some());
    assert_eq!(early_stop_step(&StabilityConfig::new(9), &stream(&sets)).unwrap().1, expect);

    // A strict A/B alternation has 20 identical pairs of 45: mean 0.889.
    let strict: Vec<_> = (0..30).map(|i| if i % 2 == 0 { a.clone() } else { b.clone() }).collect();
    assert_eq!(early_stop_step(&StabilityConfig::new(9), &stream(&strict)).unwrap().1, None);
    assert_eq!(brute_force_stop(&strict, 9, 10, EarlyStopMode::Standard), None);

    let rotation: Vec<_> = (0..60).map(|i| [&a, &b, &c][i % 3].clone()).collect();
    let (trace, fired) = early_stop_step(&StabilityConfig::new(9), &stream(&rotation)).unwrap();
    assert_eq!(fired, None);
    assert_eq!(trace.last().unwrap().union_size, 11);

    let mut cfg = StabilityConfig::new(9);
    cfg.mode = EarlyStopMode::UnionChange;
    let expect = brute_force_stop(&sets, 9, 10, EarlyStopMode::UnionChange);
    assert!(expect.is_some());
    assert_eq!(early_stop_step(&cfg, &stream(&sets)).unwrap().1, expect);
}

#[test]
fn stability_rejects_bad_input() {
    let mut st = StabilityState::new(StabilityConfig::new(2));
    assert!(stability_update(&mut st, &SelectionSnapshot { step: 0, set: set(&[1]) }).is_err());
    stability_update(&mut st, &SelectionSnapshot { step: 3, set: set(&[1, 2]) }).unwrap();
    assert!(stability_update(&mut st, &SelectionSnapshot { step: 3, set: set(&[1, 2]) }).is_err());
    let mut cfg = StabilityConfig::new(2);
    cfg.window = 1;
    let sets = vec![set(&[1, 2]); 5];
    assert_eq!(early_stop_step(&cfg, &stream(&sets)).unwrap().1, None);
}

fn scores_strategy() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(prop_oneof![(-3i32..3).prop_map(f64::from), -10.0f64..10.0], 1..20)
}

proptest! {
    #[test]
    fn top_k_is_sort_prefix(scores in scores_strategy(), k_frac in 0.0f64..=1.0) {
        let n = scores.len();
        let k = ((n as f64) * k_frac).round() as usize;
        let t = table(scores.clone());
        let mut pairs: Vec<(f64, usize)> = scores.iter().copied().zip(0..n).collect();
        pairs.sort_by(|x, y| y.0.partial_cmp(&x.0).unwrap().then(x.1.cmp(&y.1)));
        let oracle: BTreeSet<usize> = pairs[..k].iter().map(|p| p.1).collect();
        let top = select_top_k(&t, k).unwrap();
        prop_assert_eq!(&top, &oracle);
        let reg: BTreeSet<usize> = distance_regularized_select(&t, k, 0.0, 2.0).unwrap().into_iter().collect();
        prop_assert_eq!(reg, oracle);
    }

    #[test]
    fn selectors_return_valid_subsets(scores in scores_strategy(), lambda in 0.0f64..5.0, sigma in 0.1f64..5.0, k_frac in 0.0f64..=1.0) {
        let n = scores.len();
        let k = ((n as f64) * k_frac).round() as usize;
        let t = table(scores);
        let reg = distance_regularized_select(&t, k, lambda, sigma).unwrap();
        let uniq: BTreeSet<usize> = reg.iter().copied().collect();
        prop_assert_eq!(uniq.len(), k);
        prop_assert!(reg.iter().all(|&l| l < n));
        let u = uniform_select(n, k).unwrap();
        prop_assert_eq!(u.len(), k);
        prop_assert!(u.iter().all(|&l| l < n));
    }

    #[test]
    fn average_rank_matches_mean_oracle(seed in 0u64..1000, n in 1usize..16, k_frac in 0.0f64..=1.0) {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let ga: Vec<usize> = index::sample(&mut rng, n, n).into_vec();
        let gr: Vec<usize> = index::sample(&mut rng, n, n).into_vec();
        let k = ((n as f64) * k_frac).round() as usize;
        let pos = |r: &[usize], l: usize| r.iter().position(|&x| x == l).unwrap() as f64;
        let mut layers: Vec<usize> = (0..n).collect();
        layers.sort_by(|&a, &b| {
            let ma = (pos(&ga, a) + pos(&gr, a)) / 2.0;
            let mb = (pos(&ga, b) + pos(&gr, b)) / 2.0;
            ma.partial_cmp(&mb).unwrap().then(pos(&ga, a).partial_cmp(&pos(&ga, b)).unwrap())
        });
        let oracle: BTreeSet<usize> = layers[..k].iter().copied().collect();
        prop_assert_eq!(avg_rank_select(&ga, &gr, k).unwrap(), oracle);
        prop_assert_eq!(avg_rank_select(&ga, &ga, k).unwrap(), ga[..k].iter().copied().collect::<BTreeSet<_>>());
    }

    #[test]
    fn jaccard_and_adjacency_laws(a in prop::collection::btree_set(0usize..30, 0..12), b in prop::collection::btree_set(0usize..30, 0..12)) {
        let j = jaccard(&a, &b);
        prop_assert_eq!(j, jaccard(&b, &a));
        prop_assert!((0.0..=1.0).contains(&j));
        prop_assert_eq!(jaccard(&a, &a), 1.0);
        let adj = adjacency_index(&a, 30).unwrap();
        let k = a.len();
        prop_assert!(adj <= k.saturating_sub(1));
        let contiguous = k > 0 && a.iter().next_back().unwrap() - a.iter().next().unwrap() + 1 == k;
        prop_assert_eq!(k > 0 && adj == k - 1, contiguous);
    }

    #[test]
    fn one_swap_threshold_is_exact(k in 1usize..40) {
        let a: BTreeSet<usize> = (0..k).collect();
        let mut b = a.clone();
        b.remove(&0);
        b.insert(1000);
        prop_assert!(within_one_swap(&b, &a, k));
        prop_assert_eq!(jaccard(&b, &a), (k as f64 - 1.0) / (k as f64 + 1.0));
        if k >= 2 {
            let mut c = b.clone();
            c.remove(&1);
            c.insert(1001);
            prop_assert!(!within_one_swap(&c, &a, k));
        }
    }

    #[test]
    fn firing_survives_constant_suffix(seed in 0u64..500, extra in 1usize..10) {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let base: BTreeSet<usize> = (0..5).collect();
        let options = [swap_last(&base, 10), swap_last(&base, 11), swap_last(&base, 12)];
        let mut sets: Vec<BTreeSet<usize>> = (0..25)
            .map(|_| options[rand::Rng::random_range(&mut rng, 0..2usize)].clone())
            .collect();
        let cfg = StabilityConfig { k: 5, window: 6, jaccard_threshold: 0.8, mode: EarlyStopMode::Standard };
        let before = early_stop_step(&cfg, &stream(&sets)).unwrap().1;
        let last = sets.last().unwrap().clone();
        sets.extend(std::iter::repeat_n(last, extra));
        let after = early_stop_step(&cfg, &stream(&sets)).unwrap().1;
        if let Some(t) = before {
            prop_assert_eq!(after, Some(t));
        }
    }
}
