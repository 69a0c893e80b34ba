use std::collections::BTreeSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autodiff::finite_difference_check;
use crate::tasks::TaskSpec;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn teacher(n_layers: usize, seed: u64) -> Model {
    let mut spec = ModelSpec::uniform(n_layers, 8, 2, 24, 16, MixerKind::Softmax);
    spec.ffn_mult = 2;
    Model::init(spec, seed, &mut rng(seed)).unwrap()
}

fn stream() -> BatchStream {
    let spec = TaskSpec::kv_recall(3, 2, 8, 8, 24, 16).unwrap();
    BatchStream::single(&spec, 2, 7, Partition::Train).unwrap()
}

fn student(t: &Model, kind: MixerKind) -> Model {
    init_student_from_teacher(t, &vec![kind; t.n_layers()], &mut rng(3)).unwrap()
}

fn cfg(stage: Stage, budget: u64, lr: f64) -> StageConfig {
    StageConfig::new(stage, budget, 16, 2, lr, 11)
}

fn randn(shape: &[usize], seed: u64) -> Tensor {
    Tensor::randn(shape, 1.0, &mut rng(seed))
}

#[test]
fn hidden_loss_hand_values() {
    let tape = Tape::new();
    let t = Tensor::new(vec![2, 1], vec![1.0, 1.0]).unwrap();
    let s = tape.constant(Tensor::zeros(&[2, 1]));
    assert_eq!(stage1_loss(&[t.clone()], &[s]).unwrap().item(), 1.0);
    let same = tape.constant(t.clone());
    assert_eq!(stage1_loss(&[t.clone()], &[same]).unwrap().item(), 0.0);
    assert!(stage1_loss(&[t.clone(), t], &[same]).is_err());
}

#[test]
fn hidden_loss_matches_double_loop() {
    for seed in 0..5 {
        let teach: Vec<Tensor> = (0..3).map(|l| randn(&[5, 4], seed * 10 + l)).collect();
        let stud: Vec<Tensor> = (0..3).map(|l| randn(&[5, 4], 100 + seed * 10 + l)).collect();
        let mut expect = 0.0;
        for (a, b) in teach.iter().zip(&stud) {
            let mut layer = 0.0;
            for i in 0..5 {
                for j in 0..4 {
                    let d = a.get(&[i, j]) - b.get(&[i, j]);
                    layer += d * d;
                }
            }
            expect += layer / 5.0;
        }
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = stud.iter().map(|s| tape.constant(s.clone())).collect();
        let got = stage1_loss(&teach, &vars).unwrap().item();
        assert!((got - expect).abs() < 1e-12, "{got} vs {expect}");
    }
}

#[test]
fn kl_loss_two_class_closed_form() {
    let tape = Tape::new();
    let t = tape.constant(Tensor::new(vec![1, 2], vec![2f64.ln(), 0.0]).unwrap());
    let s = tape.constant(Tensor::zeros(&[1, 2]));
    let got = stage2_loss(&t, &s, 1.0).unwrap().item();
    let expect = (2.0 / 3.0) * (4.0f64 / 3.0).ln() + (1.0 / 3.0) * (2.0f64 / 3.0).ln();
    assert!((got - expect).abs() < 1e-14);
    assert!((got - 0.0566).abs() < 1e-4);
    assert_eq!(stage2_loss(&t, &t, 2.0).unwrap().item(), 0.0);
    assert!(stage2_loss(&t, &s, 0.0).is_err());
    assert!(stage2_loss(&t, &s, -1.0).is_err());
}

#[test]
fn temperature_equals_prescaled_logits() {
    let (a, b) = (randn(&[4, 6], 1), randn(&[4, 6], 2));
    let tau = 2.5;
    let tape = Tape::new();
    let hot = stage2_loss(&tape.constant(a.clone()), &tape.constant(b.clone()), tau)
        .unwrap()
        .item();
    let scale = |x: &Tensor| {
        Tensor::new(x.shape().to_vec(), x.data().iter().map(|v| v / tau).collect()).unwrap()
    };
    let cold = stage2_loss(&tape.constant(scale(&a)), &tape.constant(scale(&b)), 1.0)
        .unwrap()
        .item();
    assert!((hot / (tau * tau) - cold).abs() < 1e-14);
}

#[test]
fn no_gradient_reaches_teacher_logits() {
    let tape = Tape::new();
    let t = tape.param(&randn(&[3, 5], 4));
    let s = tape.param(&randn(&[3, 5], 5));
    let loss = stage2_loss(&t, &s, 2.0).unwrap();
    tape.backward(loss).unwrap();
    assert!(t.grad().is_none_or(|g| g.data().iter().all(|&x| x == 0.0)));
    assert!(s.grad().unwrap().data().iter().any(|&x| x != 0.0));
}

#[test]
fn losses_pass_finite_difference_checks() {
    for seed in 0..5 {
        let target = randn(&[4, 3], 50 + seed);
        let err = finite_difference_check(
            |_, x| stage1_loss(std::slice::from_ref(&target), &[x]),
            &randn(&[4, 3], seed),
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-4, "hidden seed {seed}: {err}");
        let teacher_logits = randn(&[3, 5], 80 + seed);
        let err = finite_difference_check(
            |tape, x| stage2_loss(&tape.constant(teacher_logits.clone()), &x, 2.0),
            &randn(&[3, 5], seed),
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-4, "kl seed {seed}: {err}");
    }
}

#[test]
fn config_validation() {
    let ok = cfg(Stage::Two, 64, 1e-3);
    ok.validate().unwrap();
    assert!(StageConfig { tau: 0.0, ..ok.clone() }.validate().is_err());
    assert!(cfg(Stage::Two, 31, 1e-3).validate().is_err());
    assert!(StageConfig {
        freeze: FreezePolicy::All,
        ..cfg(Stage::One, 64, 1e-3)
    }
    .validate()
    .is_err());
    assert_eq!(cfg(Stage::Two, 100, 1e-3).steps(), 3);
    assert_eq!(cfg(Stage::Two, 100, 1e-3).tokens_consumed(), 96);
    let json = serde_json::to_string(&ok).unwrap();
    assert!(json.contains(r#""stage":2"#));
    assert_eq!(serde_json::from_str::<StageConfig>(&json).unwrap(), ok);
}

#[test]
fn freeze_policies() {
    let t = teacher(2, 0);
    let mut s = student(&t, MixerKind::Gla);
    s = s.restore_layer(1, &t).unwrap();
    let one = FreezePolicy::for_stage(Stage::One);
    let trainable: Vec<String> = s
        .named_params()
        .iter()
        .filter(|(k, _)| one.trainable(k, &s.spec))
        .map(|(k, _)| k.to_string())
        .collect();
    assert!(!trainable.is_empty());
    assert!(trainable.iter().all(|k| k.starts_with("layers.0.mixer.")), "{trainable:?}");
    let all = FreezePolicy::for_stage(Stage::Two);
    assert!(s.named_params().iter().all(|(k, _)| all.trainable(k, &s.spec)));
}

#[test]
fn zero_learning_rate_changes_nothing() {
    let t = teacher(2, 1);
    let data = stream();
    for stage in [Stage::One, Stage::Two] {
        let s0 = student(&t, MixerKind::Gla);
        let mut s = s0.clone();
        let report = train_stage(&mut s, &t, &data, &cfg(stage, 32 * 4, 0.0)).unwrap();
        for ((_, a), (_, b)) in s.named_params().iter().zip(s0.named_params()) {
            assert!(a.bit_eq(b));
        }
        // Every step sees the untouched model.
        let again = train_stage(&mut s.clone(), &t, &data, &cfg(stage, 32 * 4, 0.0)).unwrap();
        assert_eq!(report.curve, again.curve);
        let train = data.reseed(11);
        if stage == Stage::Two {
            for p in &report.curve {
                let b = train.batch(p.step as u64);
                let direct = evaluate_kl(&s0, &t, &[b], DEFAULT_TAU).unwrap();
                assert!((direct - p.loss).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn aligning_a_clone_costs_nothing() {
    let t = teacher(2, 2);
    let mut s = student(&t, MixerKind::Softmax);
    let report = train_stage(&mut s, &t, &stream(), &cfg(Stage::One, 32 * 5, 1e-2)).unwrap();
    assert_eq!(report.curve.len(), 5);
    assert!(report.curve.iter().all(|p| p.loss == 0.0));
    assert_eq!(s.layers, t.layers);
}

#[test]
fn stage_one_touches_only_linear_mixers() {
    let t = teacher(3, 3);
    let s0 = student(&t, MixerKind::GatedDeltaNet).restore_layer(2, &t).unwrap();
    let mut s = s0.clone();
    train_stage(&mut s, &t, &stream(), &cfg(Stage::One, 32 * 4, 1e-2)).unwrap();
    let mut moved = 0;
    for ((k, a), (_, b)) in s.named_params().iter().zip(s0.named_params()) {
        let linear_mixer = k.is_mixer() && k.layer.is_some_and(|l| l < 2);
        if linear_mixer {
            moved += usize::from(!a.bit_eq(b));
        } else {
            assert!(a.bit_eq(b), "{k} changed");
        }
    }
    assert!(moved > 0);
}

#[test]
fn budget_is_exact_and_runs_are_deterministic() {
    let t = teacher(2, 4);
    let mut a = student(&t, MixerKind::Gla);
    let mut b = a.clone();
    let c = cfg(Stage::Two, 32 * 3 + 17, 5e-3);
    let ra = train_stage(&mut a, &t, &stream(), &c).unwrap();
    let rb = train_stage(&mut b, &t, &stream(), &c).unwrap();
    assert_eq!(ra.tokens_consumed, 96);
    assert_eq!(ra.curve.last().unwrap().tokens, 96);
    assert_eq!(ra.curve, rb.curve);
    assert_eq!(a, b);
    assert_eq!(a.provenance.step, 3);
    assert!(train_stage(&mut a, &t, &stream(), &cfg(Stage::Two, 31, 1e-3)).is_err());
    let wrong = BatchStream::single(&TaskSpec::kv_recall(3, 2, 8, 8, 24, 16).unwrap(), 3, 0, Partition::Train).unwrap();
    assert!(train_stage(&mut a, &t, &wrong, &c).is_err());
}

#[test]
fn heldout_kl_contract() {
    let t = teacher(2, 5);
    let held = heldout_slice(&stream());
    assert_eq!(held.iter().map(|b| b.batch).sum::<usize>(), HELDOUT_SEQUENCES);
    assert_eq!(evaluate_kl(&t, &t, &held, DEFAULT_TAU).unwrap(), 0.0);
    let s = student(&t, MixerKind::Gla);
    let a = evaluate_kl(&s, &t, &held, DEFAULT_TAU).unwrap();
    let b = evaluate_kl(&s, &t, &held, DEFAULT_TAU).unwrap();
    assert_eq!(a.to_bits(), b.to_bits());
    assert!(a > 0.0);
    assert!(evaluate_kl(&s, &t, &[], DEFAULT_TAU).is_err());
    // Equal to the stage-2 loss evaluated on the whole slice at once.
    let all = crate::tasks::merge(held.clone());
    let tape = Tape::new();
    let tl = tape.constant(t.logits(&all.tokens, all.batch).unwrap());
    let sl = tape.constant(s.logits(&all.tokens, all.batch).unwrap());
    let whole = stage2_loss(&tl, &sl, DEFAULT_TAU).unwrap().item();
    assert!((whole - a).abs() < 1e-12);
    // Held-out sequences never appear in training batches.
    let train: BTreeSet<Vec<usize>> = (0..50)
        .flat_map(|i| {
            let b = stream().batch(i);
            (0..b.batch).map(move |s| b.sequence(s).to_vec()).collect::<Vec<_>>()
        })
        .collect();
    assert!(held
        .iter()
        .all(|b| (0..b.batch).all(|s| !train.contains(b.sequence(s)))));
}

#[test]
fn final_hybrid_edge_layouts() {
    let t = teacher(3, 6);
    let data = stream();
    let mut aligned = student(&t, MixerKind::Gla);
    train_stage(&mut aligned, &t, &data, &cfg(Stage::One, 32 * 2, 1e-2)).unwrap();
    let c2 = cfg(Stage::Two, 32 * 3, 1e-3);

    let all_soft = HybridLayout::new(3, (0..3).collect()).unwrap();
    let (clone, report) = final_hybrid_distill(&all_soft, &aligned, &t, &data, &c2).unwrap();
    assert!(report.curve.iter().all(|p| p.loss.abs() < 1e-12));
    assert_eq!(clone.spec.mixers, t.spec.mixers);
    assert!(clone.layers.iter().zip(&t.layers).all(|(a, b)| a.ffn_up.max_abs_diff(&b.ffn_up) < 1e-9));

    let none = HybridLayout::new(3, BTreeSet::new()).unwrap();
    let (h, r) = final_hybrid_distill(&none, &aligned, &t, &data, &c2).unwrap();
    let mut plain = aligned.clone();
    let rp = train_stage(&mut plain, &t, &data, &c2).unwrap();
    assert_eq!(h, plain);
    assert_eq!(r.curve, rp.curve);

    let short = HybridLayout::new(2, BTreeSet::new()).unwrap();
    assert!(final_hybrid_distill(&short, &aligned, &t, &data, &c2).is_err());
    assert!(final_hybrid_distill(&none, &aligned, &t, &data, &cfg(Stage::One, 64, 1e-3)).is_err());
}

#[test]
fn supervised_training_reduces_loss() {
    let mut spec = ModelSpec::uniform(1, 8, 2, 24, 16, MixerKind::Softmax);
    spec.ffn_mult = 2;
    let mut m = Model::init(spec, 0, &mut rng(0)).unwrap();
    let task = TaskSpec::local_copy(1, 10, 24, 16).unwrap();
    let data = BatchStream::single(&task, 8, 0, Partition::Train).unwrap();
    let c = SupervisedConfig {
        token_budget: 8 * 16 * 150,
        seq_len: 16,
        batch_size: 8,
        learning_rate: 1e-2,
        seed: 0,
        optimizer: AdamConfig::default(),
    };
    let r = train_supervised(&mut m, &data, &c).unwrap();
    assert!(r.tail_mean(10).unwrap() < 0.5 * r.initial_loss().unwrap(), "{:?}", r.tail_mean(10));
    let mut buf = Vec::new();
    r.write_csv(&mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert!(text.starts_with("step,tokens,loss\n"));
    assert_eq!(text.lines().count(), 151);
}
